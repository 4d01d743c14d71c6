//! Event-camera object detection with contour-aware heat conduction.
//!
//! The pipeline slices an event stream, encodes each slice as a count
//! frame, extracts multi-scale graphs over the active patches, runs a DCT
//! heat-conduction backbone conditioned on those graphs, and decodes
//! detections with IoU-aware query selection.

pub mod detection;
pub mod error;
pub mod event_io;
pub mod graph;
pub mod heat;
pub mod nn;
pub mod pipeline;

pub use error::{Error, Result};
