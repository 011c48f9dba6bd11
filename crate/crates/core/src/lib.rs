//! Instance-aware pixel-wise contrastive learning with debiased negative
//! sampling, plus a three-stage semi-supervised distillation pipeline
//! (teacher adaptation, knowledge transfer, student refinement) that runs
//! end to end on synthetic instance-segmentation scenes.
//!
//! The numeric core is generic over [`Scalar`] (`f32` or `f64`). The
//! training pipeline and the on-disk formats are `f64`; the aliases below
//! name the concrete types used there.

/// `FromStr`/`Display` for enums spelled as fixed keywords.
macro_rules! keyword_enum {
    ($ty:ty, $what:literal, $($name:literal => $v:expr),+ $(,)?) => {
        impl std::str::FromStr for $ty {
            type Err = $crate::Error;
            fn from_str(s: &str) -> $crate::Result<Self> {
                match s {
                    $($name => Ok($v),)+
                    _ => Err($crate::Error::Argument(format!(concat!("unknown ", $what, " '{}'"), s))),
                }
            }
        }

        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                let name = [$(($v, $name)),+]
                    .into_iter()
                    .find(|(v, _)| v == self)
                    .map(|(_, n)| n)
                    .unwrap_or("?");
                f.write_str(name)
            }
        }
    };
}

pub mod codec;
pub mod contrastive;
pub mod error;
pub mod margin_lab;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod pipeline;
pub mod sampler;
mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use numcore::{RngStream, Var};
pub use scalar::{tree_sum, Scalar};

/// 64-bit tensor used by the training pipeline.
pub type Tensor64 = numcore::Tensor<f64>;
/// 32-bit tensor.
pub type Tensor32 = numcore::Tensor<f32>;
/// 64-bit tape used for every training step.
pub type Tape64 = numcore::Tape<f64>;
/// 64-bit model parameters (the checkpointed type).
pub type Params64 = model::ModelParams<f64>;
/// 64-bit joint pseudo-probability embeddings.
pub type JointEmbedding64 = sampler::JointEmbedding<f64>;
