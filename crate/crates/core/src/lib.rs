//! Class-based real-time styling.
//!
//! A frame is segmented and globally stylized concurrently; per-class binary
//! masks then select styled pixels over the unstyled original. All numeric
//! code is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix the
//! default precision used by the CLI and service.

pub mod autograd;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod image_core;
pub mod nn;
pub mod pipeline;
pub mod scalar;
pub mod segmenter;
pub mod styler;
pub mod tensor;

pub use error::{Error, Result};
pub use image_core::{ClassId, ClassMask, StyleAssignment, StyleId};
pub use scalar::Scalar;

/// Default precision for models, frames and losses.
pub type Real = f64;

pub type Frame = image_core::Frame<Real>;
pub type SoftMask = image_core::SoftMask<Real>;
pub type Tensor = tensor::Tensor<Real>;
pub type StyleModel = styler::StyleModel<Real>;
pub type SegModel = segmenter::SegModel<Real>;
pub type ProbMap = segmenter::ProbMap<Real>;
pub type FeaturePyramid = styler::FeaturePyramid<Real>;
pub type GramMatrix = styler::GramMatrix<Real>;
pub type Pipeline = pipeline::Pipeline<Real>;

pub type Frame32 = image_core::Frame<f32>;
pub type StyleModel32 = styler::StyleModel<f32>;
pub type SegModel32 = segmenter::SegModel<f32>;
