//! Training-free test-time adaptation for CLIP-style zero-shot classifiers.
//!
//! A pre-norm ViT visual encoder exposes a hook between attention and MLP in
//! selected blocks. At those blocks patch tokens are ranked against the
//! sample's `<cls>` query and a domain anchor drawn from a per-class reservoir
//! of past `<cls>` trajectories; low-ranked tokens are pruned, a middle band
//! is merged by k-center clustering. Zero-shot probabilities are corrected by
//! a layer-weighted cosine classifier over the same reservoir.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common instantiations.

pub mod archive;
pub mod condensation;
pub mod correction;
pub mod encoder;
pub mod error;
pub mod flops;
pub mod kernels;
pub mod num;
pub mod pipeline;
pub mod reservoir;
pub mod synthetic;

pub use archive::{inspect, DType, InspectReport, Tensor, TensorArchive};
pub use condensation::{
    condense, cross_head_rank, kcenter_greedy, kcenter_radius, CondensationPlan, Condenser, CrossHeadScore, Scoring,
    StageCounts, StageReport,
};
pub use correction::{correct, layer_weights, token_level_probs, CorrectionConfig, Direction, LayerWeights};
pub use encoder::{encode, forward_block, zero_shot_probs, EncoderConfig, EncoderWeights, TokenMatrix};
pub use error::{Result, TcaError};
pub use flops::{flops_estimate, vanilla_flops};
pub use kernels::{Matrix, Vector};
pub use num::Scalar;
pub use pipeline::{Dataset, Mode, Model, Pipeline, RunConfig, RunSummary, Sample, SampleResult};
pub use reservoir::{Admission, AnchorRecord, Reservoir, Strategy};

pub type Matrix32 = Matrix<f32>;
pub type Matrix64 = Matrix<f64>;
pub type TokenMatrix32 = TokenMatrix<f32>;
pub type TokenMatrix64 = TokenMatrix<f64>;
pub type EncoderWeights32 = EncoderWeights<f32>;
pub type EncoderWeights64 = EncoderWeights<f64>;
pub type Reservoir32 = Reservoir<f32>;
pub type Reservoir64 = Reservoir<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Pipeline32<'m> = Pipeline<'m, f32>;
pub type Pipeline64<'m> = Pipeline<'m, f64>;
