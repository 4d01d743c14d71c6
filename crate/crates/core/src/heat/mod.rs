//! Spectral heat conduction: DCT transforms, the conduction operator,
//! contour-aware blocks and the four-stage backbone.

pub mod backbone;
pub mod block;
pub mod dct;
pub mod hco;

pub use backbone::{backbone_forward, Backbone, BackboneConfig, GraphMode, GraphScale};
pub use block::{chco_block_forward, ChcoBlock, ChcoConfig, KMode, StageContext};
pub use dct::{dct2, idct2, FrequencyGrid};
pub use hco::{hco_apply, predict_k1, predict_k2, Diffusivity, FrequencyEmbedding};
