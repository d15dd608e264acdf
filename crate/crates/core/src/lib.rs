//! Multi-frame pop-bug detection with co-finetuning.
//!
//! The crate covers the whole pipeline: synthetic multi-title data
//! generation ([`datagen`]), grayscale difference stacking and patch masking
//! ([`preprocess`]), a ViT-backed two-stage detector with a latent
//! masked-reconstruction branch ([`model`]), the fused training objective
//! ([`loss`], [`trainer`]), detection metrics ([`eval`]), cross-title
//! significance analysis ([`stats`]) and experiment orchestration
//! ([`experiment`]).

pub mod autograd;
pub mod bbox;
pub mod datagen;
pub mod eval;
pub mod fsutil;
pub mod loss;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod stats;
pub mod trainer;
pub mod experiment;
