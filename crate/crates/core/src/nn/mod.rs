//! Front-end, encoder blocks and the transformer decoder.

mod blocks;
mod decoder;
mod encoder;
mod frontend;
mod layers;

pub use blocks::{ConformerBlock, EbranchformerBlock};
pub use decoder::{DecoderBlock, DecoderConfig, TransformerDecoder};
pub use encoder::{Encoder, EncoderBlock, EncoderConfig, EncoderOutput, EncoderVariant};
pub use frontend::{subsampled_len, Frontend, FrontendConfig, MIN_FRAMES, SUBSAMPLING};
pub use layers::{
    sinusoidal_positions, AttnSpec, Builder, CgMlp, ConvModule, Ctx, Embedding, FeedForward, LayerNorm, Linear,
    MultiHeadAttention, SeqMask,
};

#[cfg(test)]
mod tests;
