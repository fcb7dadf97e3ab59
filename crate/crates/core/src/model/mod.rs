//! A small vision transformer whose block linears can be factorized into
//! spectral layers.

mod checkpoint;
mod config;
mod vit;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC,
};
pub use config::{Target, ViTConfig};
pub use vit::{
    alignment_stats, argmax_rows, patchify, AlignmentStats, AlignmentVars, Block, DenseLinear, LayerAlignment, Linear,
    NormParams, ProbeOutput, Probes, Trace, Trainability, VisionTransformer,
};

#[cfg(test)]
mod tests;
