//! Spectral experts: SVD-factorized linear layers whose singular values
//! form the only adaptable state.

mod code;
mod layer;
pub mod svd;

pub(crate) use code::OffsetReader;
pub use code::{CodeHolder, SpectralCode, CODE_MAGIC};
pub use layer::{masked_count, MaskStrategy, SpectralBinding, SpectralLayer};
