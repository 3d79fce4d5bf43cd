//! Image-text matching by prominent-fragment enhancement alignment.
//!
//! Regions and words arrive as precomputed feature files. Regions are
//! enriched with box geometry and detector label words, then related to
//! each other by a Transformer stack; words are related through a dense
//! affinity graph. Each region is fused with its closest word through a
//! gate, and a caption scores an image by summing, over its words, the
//! best cosine against the plain and the fused region sets.

pub mod alignment;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod image_encoder;
pub mod numerics;
pub mod text_encoder;
pub mod training;

pub use error::{Error, Result};
