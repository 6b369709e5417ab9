//! Two-stage satellite-to-radar reflectivity synthesis.
//!
//! Stage 1 transforms a stack of satellite channels into a coarse radar
//! reflectivity estimate with a small vision transformer trained under an
//! exponential-weighted regression loss. Stage 2 refines that estimate with
//! a conditional denoising diffusion model whose condition is the channel
//! concatenation of the satellite stack and the stage-1 estimate.
//!
//! The crate also ships the supporting machinery needed to run the whole
//! pipeline on a desk machine: a gridded-field data model with a portable
//! on-disk format (`field`), patch extraction and reassembly (`patching`),
//! a minimal reverse-mode autodiff substrate (`nn`), forecast-verification
//! metrics with neighborhood pooling (`metrics`), and a deterministic
//! procedural scene generator (`synthdata`).

pub mod diffusion;
pub mod field;
pub mod metrics;
pub mod nn;
pub mod patching;
pub mod rng;
pub mod synthdata;
pub mod transform;

pub use field::{Field, FieldError, NormSpec, Scene, Units};
pub use patching::{FilterPolicy, Patch, PatchError};
pub use rng::Rng64;
