//! Training, conversion, evaluation and the self-test suites.

pub mod config;
pub mod convert;
pub mod data;
pub mod eval;
pub mod model;
pub mod selftest;
pub mod train;

pub use config::{Ablation, ModelConfig, RecognizerConfig, TrainConfig};
pub use convert::{convert, ConversionMetadata, ConvertOptions, DurationMode};
pub use data::{Corpus, Example};
pub use eval::{evaluate, wer, EvalReport, EvalRow};
pub use model::{AccentNormalizer, Recognizer};
pub use train::{train, train_recognizer, TrainReport};
