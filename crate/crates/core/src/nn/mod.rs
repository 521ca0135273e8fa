//! Network building blocks: dense layers, the transformer encoder, and the
//! two operators specific to weight discovery (min-max normalization and
//! straight-through substitution).

mod dense;
mod encoder;
mod minmax;
mod params;
mod ste;

pub use dense::DenseLayer;
pub use encoder::{sinusoidal_table, EncoderConfig, Padding, TransformerEncoder};
pub use minmax::{
    min_max_normalize, min_max_normalize_with, MinMaxMode, NormalizedWeights, DEGENERATE_RANGE,
};
pub use params::{Bound, ParamId, ParamStore};
pub use ste::ste_replace;

#[cfg(test)]
mod tests;
