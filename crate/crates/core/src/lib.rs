//! Two-dimensional rotary position embeddings for vision transformers.
//!
//! The crate covers axial and mixed (learnable-frequency) 2D RoPE next to
//! the conventional absolute embedding and relative position bias, a small
//! attention/ViT engine with hand-written gradients, and the analyses used
//! to compare the variants: Fourier reconstruction of frequency sets,
//! attention distance and entropy, and FLOP/parameter accounting.
//!
//! Data-parallel loops run on rayon when the `parallel` feature is enabled
//! (the default); see [`par`].

pub mod analysis;
pub mod attention;
pub mod check;
pub mod error;
pub mod io;
pub mod par;
pub mod posembed;
pub mod rope;
pub mod tinyvit;

pub use error::{Result, RopeError};
pub use par::Execution;
