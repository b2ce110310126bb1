//! Transformer encoder for tabular data with decoupled global/local
//! representations trained under auxiliary contrastive losses.
//!
//! The crate is organised bottom-up: [`tensor`] and [`autodiff`] provide a
//! small reverse-mode engine, [`data`] turns CSV tables into encoded
//! datasets, [`model`] holds the encoder, [`losses`] the contrastive and
//! supervised objectives, and [`training`] the optimisation loop.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use autodiff::{Graph, SumOrder, Var};
pub use data::{Batch, Dataset, Schema, Task};
pub use error::{Error, Result};
pub use losses::{ContrastTriple, LossSpec, Scheme};
pub use metrics::{Metric, MetricsReport};
pub use model::{InputLayout, ModelConfig, ModelParams, TabDeco, Variant};
pub use tensor::{Scalar, Tensor};
pub use training::{TrainConfig, TrainOutcome};
