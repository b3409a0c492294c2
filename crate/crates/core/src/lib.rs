//! Few-shot semantic segmentation with self-distilled support prototypes and
//! supervised affinity attention, on a from-scratch reverse-mode engine.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pnm;
pub mod saam;
pub mod sdpm;
pub mod tensor;
pub mod train;

pub use autodiff::{Graph, PadMode, Var};
pub use error::{Error, Result};
pub use tensor::{ParamStore, Real, Tensor};
