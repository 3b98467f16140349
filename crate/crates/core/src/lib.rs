//! Decentralized mobile-traffic forecasting at desk scale.
//!
//! The crate covers the full experiment loop for per-site traffic
//! prediction from LTE control-channel aggregates: a small reverse-mode
//! autodiff engine ([`tensor`]), GRU/CNN model construction ([`nn`],
//! [`models`]), the windowed dataset pipeline ([`data`]), synthetic site
//! generation ([`synth`]), the training protocol ([`training`]),
//! frozen-layer transfer between sites ([`transfer`]), SmoothGrad/LRP
//! attribution ([`xai`]), an epsilon-SVR baseline ([`svr`]), and
//! complexity/energy accounting ([`energy`]).
//!
//! Data-parallel inner loops (batched kernels, replicated runs, sweep
//! members, per-sample attribution) run on rayon when the default
//! `parallel` feature is enabled and fall back to sequential iteration
//! without it. Either way results are bit-identical for a fixed seed.

pub mod data;
pub mod energy;
pub mod error;
pub mod exec;
pub mod ledger;
pub mod models;
pub mod nn;
pub mod report;
pub mod seed;
pub mod svr;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod transfer;
pub mod xai;

pub use error::{Error, Result};
