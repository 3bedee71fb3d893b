//! Multi-task masked field prediction for vector graphic documents.
//!
//! A document is an order-less set of typed elements; each element carries
//! one field per schema attribute (categorical id, numerical vector, or the
//! special tokens `Null` / `Mask`). Design tasks are expressed purely as
//! masking patterns over the element-by-attribute field array, and a single
//! transformer-based model learns to fill every masked field at once.
//!
//! Module map:
//! - [`schema`]: attribute schema, documents, validation, JSONL round-trip
//! - [`mask`]: masking strategies, named tasks, triplet construction
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff
//! - [`model`]: encoder / transformer blocks / decoder heads, checkpoints
//! - [`train`]: loss, Adam, IMP / EXP / EXP-FT / Expert training loops
//! - [`eval`]: the reconstruction score, baselines, report tables, IoU/BDE
//! - [`synth`]: synthetic benchmark corpus and its Bayes-oracle ceiling
//! - [`render`]: nearest-neighbor asset retrieval and SVG previews

pub mod error;
pub mod eval;
pub mod mask;
pub mod model;
pub mod render;
pub mod schema;
pub mod synth;
pub mod tensor;
pub mod train;
pub(crate) mod util;

pub use error::{Error, Result};
