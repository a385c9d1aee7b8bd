//! Low-light image enhancement with a retinex decomposition network and a
//! cycle-consistent adversarial illumination enhancer.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for common uses. Training runs in `f32`,
//! gradient checks in `f64`.

pub mod ablation;
pub mod adversarial;
pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod decomposition;
pub mod enhancement;
pub mod error;
pub mod imaging;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use ablation::{Enhancer, VariantId, VariantSpec};
pub use adversarial::{CycleState, DiscSpec, PatchDiscriminator};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use dataset::UnpairedDataset;
pub use decomposition::{DecompNet, DecompSpec, DecompTrainConfig, PairedDataset};
pub use enhancement::{EnhanceNet, UNetSpec};
pub use error::{Error, Result};
pub use imaging::ImageTensor;
pub use metrics::{MetricReport, NiqeModel};
pub use report::LossReport;
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use training::{CycleGan, TrainConfig};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Image32 = ImageTensor<f32>;
pub type Image64 = ImageTensor<f64>;
pub type DecompNet32 = DecompNet<f32>;
pub type DecompNet64 = DecompNet<f64>;
pub type EnhanceNet32 = EnhanceNet<f32>;
pub type CycleGan32 = CycleGan<f32>;
pub type CycleGan64 = CycleGan<f64>;
pub type Enhancer32 = Enhancer<f32>;
pub type Checkpoint32 = Checkpoint<f32>;
