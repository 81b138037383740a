//! Few-shot video object segmentation.
//!
//! Phase 1 trains an episodic few-shot image segmenter on labelled images of
//! base classes. Phase 2 adapts that segmenter to a single video of a novel
//! class by relearning against a frozen copy of itself, using only the
//! clip's frames and its annotated prefix.
//!
//! Everything runs on `f64` tensors with a small reverse-mode autodiff
//! engine ([`graph`]), single threaded and deterministic under a seed.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod relearn;
pub mod rng;
pub mod segmenter;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ArchConfig, ModelState};
pub use tensor::Tensor;
