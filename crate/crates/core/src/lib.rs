//! Desk-scale preference optimization for diffusion models.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: dense arrays, a tape-based autodiff engine and Adam.
//! * [`diffusion`]: DDPM schedule, ε-prediction network, Gaussian transitions
//!   and ancestral sampling.
//! * [`weights`]: importance weights between the learned reverse transition
//!   and the forward posterior, clipping and the pairwise inverse weight.
//! * [`losses`]: Bradley–Terry, Diffusion-DPO, clipped/masked DPO and the
//!   importance-weighted (SDPO) objectives.
//! * [`flow_sde`]: stochastic sampling of interpolant flows via Euler–Maruyama.
//! * [`experiments`]: toy targets, preference pairs, training loops and
//!   diagnostics, plus the config and CSV formats used by the CLI.

pub mod diffusion;
pub mod error;
pub mod experiments;
pub mod flow_sde;
pub mod losses;
pub mod numerics;
pub mod rng;
pub mod weights;

pub use error::{Error, Result};
