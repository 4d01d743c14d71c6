//! Configuration, synthetic data, training and end-to-end runs.

pub mod config;
pub mod data;
pub mod model;
pub mod run;
pub mod synthetic;
pub mod train;

pub use config::{InputKind, KChoice, PipelineConfig, KEYS};
pub use data::{build_dataset, Sample, View, GEN_TAG, TRAIN_TAG, VAL_TAG};
pub use model::{Detector, LossParts};
pub use run::{heat_map, pgm_text, run_pipeline, RunOutput};
pub use synthetic::{derive_seed, generate_synthetic, random_scene, Shape, SyntheticObject, SyntheticScene, SyntheticStream};
pub use train::{batch_gradients, evaluate, train, AdamW, StepLog, TrainOutcome};
