//! A compact CPU transformer engine with explicit forward caches and
//! hand-written backward passes, built on `matrixmultiply` kernels.
//!
//! Activations are row-major `(batch * seq) x width` matrices. Every layer
//! exposes `forward` returning its output plus a cache, and `backward` taking
//! that cache and an optional [`GradStore`]: passing `None` propagates input
//! gradients only, which is how frozen modules are run.

pub mod attention;
pub mod float;
pub mod layers;
pub mod mat;
pub mod optim;
pub mod param;
pub mod transformer;

pub use attention::SelfAttention;
pub use float::Float;
pub use layers::{LayerNorm, Linear};
pub use mat::Mat;
pub use optim::{AdamW, AdamWConfig};
pub use param::{GradStore, Param, ParamBuilder, Parameters};
pub use transformer::{StackConfig, TransformerStack};
