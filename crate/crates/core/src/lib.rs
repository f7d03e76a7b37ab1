//! Autoregressive multi-embedding retrieval on synthetic vector data.
//!
//! Generation of multi-target datasets ([`synthgen`]), an exact cosine
//! index ([`index`]), a small causal transformer that emits query
//! embeddings one at a time ([`model`]), training with the matched
//! InfoNCE objective ([`trainer`]) and MRecall@k evaluation with
//! round-robin fusion, MMR and diversity bins ([`evaluate`]).
//!
//! ```
//! use amer_core::{hungarian, CostMatrix};
//!
//! let cost = CostMatrix::from_rows(&[vec![4.0, 1.0], vec![2.0, 8.0]]).unwrap();
//! let m = hungarian(&cost);
//! assert_eq!(m.assignment, vec![1, 0]);
//! assert_eq!(m.total, 3.0);
//! ```

pub mod assignment;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod index;
pub mod io;
pub mod model;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use assignment::{hungarian, CostMatrix, Matching};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use evaluate::{EvalConfig, EvalMode, EvalReport};
pub use index::{FlatIndex, Hit, RankedList};
pub use model::{ModelConfig, ModelParams, StepInputPolicy};
pub use synthgen::{Corpus, DataConfig, Setting, SyntheticDataset, TransformKind};
pub use tensor::{RngStream, UnitVector};
pub use trainer::{Checkpoint, FeedbackMode, TrainConfig, TrainMode};
