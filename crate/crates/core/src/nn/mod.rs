//! A small two-view gaze-following network with hand-written gradients.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod model;
pub mod prepare;
pub mod tensor;
pub mod train;

use thiserror::Error;

pub use blocks::{
    CrossViewTransform, Esa, EsaGeometry, GazeDecoder, GazeHead, Hia, ModelOutputs, TokenGrid, HEATMAP_SIZE,
};
pub use loss::{gaussian_target_heatmap, total_loss, LossBreakdown, LossWeights, ViewTarget};
pub use model::{FovSource, PairInput, PairTarget, ToyConfig, ToyModel, ViewInput};
pub use prepare::{pairs_from_manifest, pairs_from_synth, prepare_pair, synth_training_pairs, PreparedPair, RawView};
pub use tensor::{Parameterized, Tensor};
pub use train::{evaluate_loss, infer, train, Inference, LossSummary, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("target ({0}, {1}) outside the 64×64 heatmap")]
    OutOfBounds(f64, f64),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
