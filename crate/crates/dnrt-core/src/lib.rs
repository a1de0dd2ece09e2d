//! Core library for entropy-guided rotation training and pruning of
//! small transformer checkpoints.
//!
//! The crate is organized bottom-up: dense matrix kernels ([`linalg`]),
//! a reverse-mode tape ([`grad`]), importance scoring ([`importance`]),
//! the rotation trainer ([`denoiser`]), a toy decoder-only transformer
//! ([`transformer`]), pruning ([`pruner`]), and binary serialization for
//! checkpoints and masks ([`checkpoint`], [`pruner`]).

pub mod denoiser;
pub mod grad;
pub mod importance;
pub mod linalg;
pub mod random;
