//! Lightweight convolutional networks from first principles: a small
//! reverse-mode tensor engine, MobileNetV3-Large building blocks, an
//! analytic cost model, and a limited-training-data recognition harness for
//! SAR target chips.

pub mod arch;
pub mod blocks;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod ops;
pub mod sweep;
pub mod tensor;
pub mod train;

pub use arch::{mobilenetv3_large_spec, parse_arch_file, resnet50_cost_spec, ArchSpec, LayerSpec};
pub use cost::{analyze, compare_last_stages, report_render, Convention, CostReport, InputShape};
pub use error::{Error, Result};
pub use model::{build_model, Model};
pub use ops::Mode;
pub use tensor::{Scalar, Tensor};
