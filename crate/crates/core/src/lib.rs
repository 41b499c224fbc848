//! Flip-flop language benchmark: data generation, a small autodiff engine,
//! transformer and LSTM sequence models, training, evaluation and numerical
//! checks of attention behavior.

pub mod dataset;
pub mod evaluation;
pub mod ffl;
pub mod gradcheck;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod theory;
pub mod training;

pub use dataset::{Corpus, DatasetSpec, StandardSet};
pub use evaluation::{glitch_rate, EvalMode, GlitchReport, Predictor, ReplicateStats};
pub use ffl::{FflParams, FflString, Token};
pub use models::{ModelConfig, SequenceModel};
pub use tensor::{Graph, Tensor};
pub use training::{train, TrainConfig, TrainLog};
