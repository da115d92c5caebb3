//! Minimal CPU neural-network engine, generic over the floating-point type.
//!
//! Layers keep their parameters in a [`ParamStore`] and expose explicit
//! forward/backward functions; callers own the activation caches.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod ops;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use error::{NnError, Result};
pub use layers::{BatchNorm2d, BatchNormCache, Conv2d, Linear};
pub use optim::Adam;
pub use params::{Init, Param, ParamId, ParamStore};
pub use scalar::{lit, DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamStore32 = ParamStore<f32>;
pub type ParamStore64 = ParamStore<f64>;
