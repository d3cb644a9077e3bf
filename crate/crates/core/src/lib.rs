//! Semi-supervised domain-generalised segmentation with meta-learned
//! feature disentanglement.

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod losses;
pub mod metaloop;
pub mod metrics;
pub mod networks;
pub mod optim;
pub mod tensor;

pub use autograd::Var;
pub use checkpoint::Checkpoint;
pub use data::{Batch, Dataset, DomainSpec, EpisodeSampler, EpisodeSplit, ImageSize, Sample};
pub use error::{Error, Result};
pub use losses::{LossBreakdown, LossWeights};
pub use metaloop::{evaluate, train, train_erm_baseline, TrainConfig, TrainHistory, TrainOutput};
pub use metrics::{HausdorffVariant, MetricsReport, SegmentationMetrics};
pub use networks::{Model, ModelConfig, ParamSets, ParamValues};
pub use tensor::Tensor;
