//! Direction encoding, the color/density MLP and its optimizer.

mod adam;
mod mlp;
mod sh;

pub use adam::{AdamConfig, AdamReport, AdamState, ExpDecay};
pub use mlp::{
    decode, decode_backward, softplus, Dense, MlpGrads, MlpParams, MlpScratch, RadianceSample,
    BASE_HIDDEN, BASE_OUT, HEAD_HIDDEN,
};
pub use sh::{sh_encode, sh_encode_with_grad, SH_DIM};
