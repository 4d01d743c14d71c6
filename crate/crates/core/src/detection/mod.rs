//! Boxes, matching, losses, query selection and evaluation.

pub mod boxes;
pub mod eval;
pub mod head;
pub mod hungarian;
pub mod loss;

pub use boxes::{iou, iou_with_grad, BBox};
pub use eval::{evaluate_map, iou_thresholds, read_detections, write_detections, Detection, MapResult};
pub use head::{decode_detections, gather, select_queries, DetectionHead, HeadConfig, HeadOutputs};
pub use hungarian::{assignment_cost, hungarian_match};
pub use loss::{detect_loss, match_cost, top_k, token_scores, vfl_loss, DetectLoss, GroundTruth, LossWeights};
