pub mod autoencoder;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod inference;
pub mod maps;
pub mod manifest;
pub mod nn;
pub mod objective;
pub mod random;
pub mod selftest;
pub mod spectral;
pub mod train;

#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/quick-start.md")]
    pub mod quick_start {}
    #[doc = include_str!("../../../book/src/diffusion.md")]
    pub mod diffusion {}
    #[doc = include_str!("../../../book/src/fft-filter.md")]
    pub mod fft_filter {}
    #[doc = include_str!("../../../book/src/objective.md")]
    pub mod objective {}
    #[doc = include_str!("../../../book/src/inference.md")]
    pub mod inference {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    pub mod configuration {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    pub mod reproducibility {}
}
