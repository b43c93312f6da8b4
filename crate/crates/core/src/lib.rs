//! Machine translation workbench core: parallel corpus handling, BPE
//! subwords, a tape-based autodiff tensor library, a compact encoder-decoder
//! transformer, Adam/AdamW training, beam decoding, and string MT metrics.

pub mod metrics;
pub mod model;
pub mod train;
pub mod rng;
pub mod corpus;
pub mod decode;
pub mod subword;
pub mod tensor;
