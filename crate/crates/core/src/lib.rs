//! Consistency-based detection and grounding of manipulated image-text pairs.
//!
//! The crate trains a small two-stream transformer that scores agreement
//! between fine-grained embeddings — within each modality (contextual
//! consistency) and across modalities against a global embedding (semantic
//! consistency) — and uses those scores to detect manipulated pairs,
//! classify the manipulation type, localize edited faces, and flag edited
//! tokens. Data comes from a deterministic synthetic generator that plants
//! the four manipulation types into feature-vector "images" and "texts".

pub mod analysis;
pub mod config;
pub mod contextual;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod par;
pub mod params;
pub mod real;
pub mod semantic;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
