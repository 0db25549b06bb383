//! Minimal neural-network toolkit on top of `candle-core`.
//!
//! Parameters live in a [`VarStore`] keyed by dotted names, initialized from a
//! seeded generator so that two runs with the same seed build bit-identical
//! networks. A store can be frozen, in which case every layer receives a
//! detached copy of its weights and no gradient ever reaches them.

mod conv;
mod layers;

pub use conv::conv2d;
pub use layers::{
    pixel_shuffle, pixel_unshuffle, sigmoid, upsample_nearest2x, Conv2d, GroupNorm, Init, Linear, ResBlock,
    Scope, VarStore,
};
