//! Rotation-equivariant convolution built from padding plans.
//!
//! Strided convolution does not normally commute with rotating the input:
//! one-sided padding breaks the symmetry. This crate derives four-sided
//! padding plans whose sides turn along with the input, making quarter-turn
//! rotation and convolution commute exactly, bit for bit. On top of that sit
//! group-convolution layers (a lift, a group layer, and a projection), a
//! small reverse-mode tape for training them, segmentation metrics with a
//! rotation-difference score, and a synthetic shape dataset for audits.

pub mod autodiff;
pub mod conv;
pub mod data;
pub mod error;
pub mod group;
pub mod layers;
pub mod metrics;
pub mod padding;
pub mod tensor;

pub use conv::Kernel;
pub use data::Sample;
pub use error::{Error, Result};
pub use group::GroupElement;
pub use layers::{Flavor, NetConfig, PrecmNet};
pub use metrics::MetricReport;
pub use padding::{ConvSpec, Extent, Padding};
pub use tensor::{LabelMap, Scalar, Shape, Tensor};
