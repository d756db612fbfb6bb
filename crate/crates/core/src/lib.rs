//! Multi-agent conditional diffusion policies with centralized training and
//! decentralized receding-horizon execution.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`env`] — the two navigation environments (geometry, dynamics,
//!   observations, collision predicates) as pure functions.
//! - [`expert`] — scripted multi-modal expert demonstrations and the
//!   windowed training datasets sliced from them.
//! - [`autodiff`] — a minimal reverse-mode autodiff engine over dense f64
//!   arrays, with the layers and the AdamW optimizer the denoiser needs.
//! - [`denoiser`] — the conditional denoiser network (residual MLP trunk,
//!   EDM-style preconditioning) and the behavior-cloning regressor that
//!   shares its trunk.
//! - [`diffusion`] — the denoising training objective, noise-level
//!   distributions, sigma schedules, and the deterministic Heun sampler for
//!   the probability-flow ODE.
//! - [`training`] — centralized trainers (shared-loss diffusion, ego-only
//!   variant, behavior cloning) plus checkpointing.
//! - [`execution`] — decentralized receding-horizon rollouts and episode
//!   logs.
//! - [`metrics`] — discrete Fréchet distance, exact Earth Mover's Distance,
//!   collision tables, mode classification, success rates.

pub mod autodiff;
pub mod denoiser;
pub mod diffusion;
pub mod env;
pub mod expert;
pub mod execution;
pub mod metrics;
pub mod training;

/// SplitMix64 finalizer, used to decorrelate derived RNG seeds.
pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
