//! The denoising training objective, noise-level distributions, sigma
//! schedules, and the deterministic probability-flow ODE sampler.
//!
//! Sampling integrates dξ/dσ = (ξ − D(ξ; σ, o))/σ from σ_max down to 0
//! with Heun's second-order method, falling back to plain Euler on the
//! final step where the correction is undefined. All randomness enters
//! through the initial noise ξ_0 ~ N(0, σ_max²·I); the ODE path itself is
//! deterministic, so fixed seeds give bitwise-stable trajectories.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{BoundParams, Graph, GraphError, NodeId, Tensor};
use crate::denoiser::{
    c_in, c_noise, c_out, c_skip, denoise_batch, forward_raw, noise_features, DenoiserError,
    Policy,
};
use crate::env::Vec2;

/// Standard EDM defaults; the paper specifies none.
pub const SIGMA_MIN_DEFAULT: f64 = 0.002;
pub const SIGMA_MAX_DEFAULT: f64 = 80.0;
pub const RHO_DEFAULT: f64 = 7.0;
pub const K_DEFAULT: usize = 40;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("invalid schedule: {0}")]
    BadSchedule(String),
    #[error("non-finite sample state after step {step} (σ → {sigma})")]
    NonFinite { step: usize, sigma: f64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

// --- noise schedule -------------------------------------------------------------

/// Decreasing noise levels σ_0 = σ_max > … > σ_K = 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigmas: Vec<f64>,
    pub rho: f64,
}

impl NoiseSchedule {
    /// Number of integration steps (= len(sigmas) − 1).
    pub fn k(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigmas[0]
    }
}

/// Karras spacing: σ_i = (σ_max^{1/ρ} + (i/(K−1))·(σ_min^{1/ρ} −
/// σ_max^{1/ρ}))^ρ for i < K, with σ_K = 0 appended.
pub fn karras_schedule(
    k: usize,
    sigma_min: f64,
    sigma_max: f64,
    rho: f64,
) -> Result<NoiseSchedule, DiffusionError> {
    if k < 1 {
        return Err(DiffusionError::BadSchedule("K must be ≥ 1".into()));
    }
    if !(sigma_min > 0.0 && sigma_min.is_finite()) {
        return Err(DiffusionError::BadSchedule(format!(
            "sigma_min must be positive, got {sigma_min}"
        )));
    }
    if !(sigma_max > sigma_min && sigma_max.is_finite()) {
        return Err(DiffusionError::BadSchedule(format!(
            "sigma_max must exceed sigma_min, got {sigma_max}"
        )));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(DiffusionError::BadSchedule(format!(
            "rho must be positive, got {rho}"
        )));
    }
    let mut sigmas = Vec::with_capacity(k + 1);
    if k == 1 {
        sigmas.push(sigma_max);
    } else {
        let inv = 1.0 / rho;
        let (hi, lo) = (sigma_max.powf(inv), sigma_min.powf(inv));
        for i in 0..k {
            let frac = i as f64 / (k - 1) as f64;
            sigmas.push((hi + frac * (lo - hi)).powf(rho));
        }
    }
    sigmas.push(0.0);
    Ok(NoiseSchedule { sigmas, rho })
}

/// Log-normal σ distribution for training noise levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainNoiseDist {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for TrainNoiseDist {
    fn default() -> Self {
        TrainNoiseDist {
            p_mean: -1.2,
            p_std: 1.2,
        }
    }
}

/// σ = exp(P_mean + P_std·z), z ~ N(0, 1).
pub fn sample_train_sigma(dist: &TrainNoiseDist, rng: &mut impl Rng) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (dist.p_mean + dist.p_std * z).exp()
}

/// Adds i.i.d. N(0, σ²) noise per component; σ = 0 returns the input
/// bitwise (no RNG draws).
pub fn perturb(xi: &[Vec2], sigma: f64, rng: &mut impl Rng) -> Vec<Vec2> {
    if sigma == 0.0 {
        return xi.to_vec();
    }
    xi.iter()
        .map(|a| {
            let ex: f64 = rng.sample(StandardNormal);
            let ey: f64 = rng.sample(StandardNormal);
            Vec2::new(a.x + sigma * ex, a.y + sigma * ey)
        })
        .collect()
}

// --- training loss ----------------------------------------------------------------

/// A built loss graph, ready for backward + optimizer step.
pub struct LossGraph {
    pub graph: Graph,
    pub loss: NodeId,
    pub bound: BoundParams,
    pub value: f64,
}

/// Denoising loss with frozen noise: mean over batch and T·m elements of
/// (D(ξ+ε; σ, o) − ξ)², differentiable w.r.t. the policy parameters.
/// `weighted` applies the λ(σ) = (σ² + σ_d²)/(σ·σ_d)² reweighting.
pub fn diffusion_loss_frozen(
    policy: &Policy,
    obs: &Tensor,
    clean: &Tensor,
    sigmas: &[f64],
    eps: &Tensor,
    weighted: bool,
) -> Result<LossGraph, DiffusionError> {
    let flat = policy.config.flat_dim();
    let b = clean.shape()[0];
    if b == 0 {
        return Err(DiffusionError::EmptyBatch);
    }
    for (what, t, want) in [
        ("clean batch", clean, vec![b, flat]),
        ("noise batch", eps, vec![b, flat]),
        ("observation batch", obs, vec![b, policy.config.obs_dim]),
    ] {
        if t.shape() != want.as_slice() {
            return Err(DenoiserError::Shape {
                what,
                got: t.shape().to_vec(),
                want,
            }
            .into());
        }
    }
    if sigmas.len() != b {
        return Err(DenoiserError::Shape {
            what: "sigma batch",
            got: vec![sigmas.len()],
            want: vec![b],
        }
        .into());
    }
    for &s in sigmas {
        if !(s > 0.0 && s.is_finite()) {
            return Err(DenoiserError::BadSigma(s).into());
        }
    }
    let sd = policy.config.sigma_data;

    let mut noisy = clean.clone();
    for (v, e) in noisy.data_mut().iter_mut().zip(eps.data()) {
        *v += e;
    }
    let mut scaled = noisy.clone();
    let mut skip = noisy.clone();
    for r in 0..b {
        let (ci, cs) = (c_in(sigmas[r], sd), c_skip(sigmas[r], sd));
        for c in 0..flat {
            scaled.data_mut()[r * flat + c] *= ci;
            skip.data_mut()[r * flat + c] *= cs;
        }
    }

    let mut g = Graph::new();
    let bound = policy.params.bind(&mut g);
    let xi_node = g.leaf(scaled);
    let nf = {
        let data = sigmas
            .iter()
            .flat_map(|&s| noise_features(c_noise(s), policy.config.noise_embed_dim))
            .collect();
        g.leaf(Tensor::matrix(b, policy.config.noise_embed_dim, data))
    };
    let obs_node = g.leaf(obs.clone());
    let f = forward_raw(&mut g, &policy.params, &bound, &policy.config, xi_node, nf, obs_node)?;
    let co: Vec<f64> = sigmas.iter().map(|&s| c_out(s, sd)).collect();
    let f_scaled = g.row_scale(f, co)?;
    let skip_node = g.leaf(skip);
    let d = g.add(f_scaled, skip_node)?;
    let target = g.leaf(clean.clone());
    let mut resid = g.sub(d, target)?;
    if weighted {
        let sqrt_lambda: Vec<f64> = sigmas
            .iter()
            .map(|&s| (s * s + sd * sd).sqrt() / (s * sd))
            .collect();
        resid = g.row_scale(resid, sqrt_lambda)?;
    }
    let loss = g.mean_square(resid)?;
    let value = g.value(loss).item();
    Ok(LossGraph {
        graph: g,
        loss,
        bound,
        value,
    })
}

/// Denoising loss with σ ~ p_train and ε ~ N(0, σ²I) drawn per element.
pub fn diffusion_loss(
    policy: &Policy,
    obs: &Tensor,
    clean: &Tensor,
    dist: &TrainNoiseDist,
    weighted: bool,
    rng: &mut impl Rng,
) -> Result<LossGraph, DiffusionError> {
    let b = clean.shape()[0];
    if b == 0 {
        return Err(DiffusionError::EmptyBatch);
    }
    let flat = policy.config.flat_dim();
    let sigmas: Vec<f64> = (0..b).map(|_| sample_train_sigma(dist, rng)).collect();
    let mut eps = Tensor::zeros(vec![b, flat]);
    for r in 0..b {
        for c in 0..flat {
            let z: f64 = rng.sample(StandardNormal);
            eps.data_mut()[r * flat + c] = sigmas[r] * z;
        }
    }
    diffusion_loss_frozen(policy, obs, clean, &sigmas, &eps, weighted)
}

// --- sampling -------------------------------------------------------------------

/// Anything the probability-flow sampler can integrate against.
pub trait Denoiser {
    /// Flattened trajectory length per row.
    fn flat_dim(&self) -> usize;
    /// Batched denoise: one σ per call, shared by all rows.
    fn denoise_rows(
        &self,
        xi: &Tensor,
        sigma: f64,
        obs: &Tensor,
    ) -> Result<Tensor, DiffusionError>;
}

impl Denoiser for Policy {
    fn flat_dim(&self) -> usize {
        self.config.flat_dim()
    }

    fn denoise_rows(
        &self,
        xi: &Tensor,
        sigma: f64,
        obs: &Tensor,
    ) -> Result<Tensor, DiffusionError> {
        let sigmas = vec![sigma; xi.shape()[0]];
        Ok(denoise_batch(self, xi, &sigmas, obs)?)
    }
}

/// Exact denoiser for data ~ N(0, σ_d²·I): D(ξ; σ) = σ_d²·ξ/(σ_d² + σ²).
/// The sampler oracle — with it, samples must be N(0, σ_d²·I) again.
pub struct AnalyticGaussianDenoiser {
    pub sigma_data: f64,
    pub flat: usize,
}

impl Denoiser for AnalyticGaussianDenoiser {
    fn flat_dim(&self) -> usize {
        self.flat
    }

    fn denoise_rows(
        &self,
        xi: &Tensor,
        sigma: f64,
        _obs: &Tensor,
    ) -> Result<Tensor, DiffusionError> {
        let sd2 = self.sigma_data * self.sigma_data;
        let scale = sd2 / (sd2 + sigma * sigma);
        let data = xi.data().iter().map(|&v| scale * v).collect();
        Ok(Tensor::new(xi.shape().to_vec(), data))
    }
}

/// Integrates the probability-flow ODE from the given initial noise
/// (one row per sample) down to σ = 0. Deterministic.
pub fn sample_with_initial(
    den: &dyn Denoiser,
    obs: &Tensor,
    xi0: &Tensor,
    schedule: &NoiseSchedule,
) -> Result<Tensor, DiffusionError> {
    let b = xi0.shape()[0];
    if b == 0 {
        return Err(DiffusionError::EmptyBatch);
    }
    if xi0.shape() != [b, den.flat_dim()] {
        return Err(DenoiserError::Shape {
            what: "initial noise batch",
            got: xi0.shape().to_vec(),
            want: vec![b, den.flat_dim()],
        }
        .into());
    }
    let mut xi = xi0.clone();
    for step in 0..schedule.k() {
        let (s_cur, s_next) = (schedule.sigmas[step], schedule.sigmas[step + 1]);
        let h = s_next - s_cur;
        let d_cur = den.denoise_rows(&xi, s_cur, obs)?;
        // dξ/dσ at σ_cur.
        let slope: Vec<f64> = xi
            .data()
            .iter()
            .zip(d_cur.data())
            .map(|(&x, &d)| (x - d) / s_cur)
            .collect();
        let mut next = xi.clone();
        for (v, s) in next.data_mut().iter_mut().zip(&slope) {
            *v += h * s;
        }
        if s_next > 0.0 {
            // Heun correction: average the slopes at both endpoints.
            let d_next = den.denoise_rows(&next, s_next, obs)?;
            for ((v, &x), (&s1, &d)) in next
                .data_mut()
                .iter_mut()
                .zip(xi.data())
                .zip(slope.iter().zip(d_next.data()))
            {
                let s2 = (*v - d) / s_next;
                *v = x + h * 0.5 * (s1 + s2);
            }
        }
        if !next.is_finite() {
            return Err(DiffusionError::NonFinite {
                step,
                sigma: s_next,
            });
        }
        xi = next;
    }
    Ok(xi)
}

/// Draws ξ_0 ~ N(0, σ_max²·I) from `rng` and integrates to σ = 0;
/// returns the trajectory as T action vectors.
pub fn sample(
    den: &dyn Denoiser,
    obs: &[f64],
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<Vec2>, DiffusionError> {
    let flat = den.flat_dim();
    let sm = schedule.sigma_max();
    let data: Vec<f64> = (0..flat)
        .map(|_| sm * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let xi0 = Tensor::matrix(1, flat, data);
    let obs_t = Tensor::matrix(1, obs.len(), obs.to_vec());
    let out = sample_with_initial(den, &obs_t, &xi0, schedule)?;
    Ok(crate::denoiser::unflatten_actions(out.data()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::AdamWConfig;
    use crate::denoiser::{init_policy, DenoiserConfig};
    use crate::env::ObsMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn karras_schedule_matches_the_formula() {
        let s = karras_schedule(1, 0.002, 80.0, 7.0).unwrap();
        assert_eq!(s.sigmas, vec![80.0, 0.0]);

        for k in [2, 3, 5, 40] {
            let s = karras_schedule(k, 0.002, 80.0, 7.0).unwrap();
            assert_eq!(s.sigmas.len(), k + 1);
            assert_eq!(s.sigmas[0], 80.0);
            assert!((s.sigmas[k - 1] - 0.002).abs() < 1e-15);
            assert_eq!(s.sigmas[k], 0.0);
            assert!(s.sigmas.windows(2).all(|w| w[0] > w[1]));
        }

        let s = karras_schedule(3, 0.002, 80.0, 7.0).unwrap();
        let inv = 1.0 / 7.0;
        let direct =
            (80f64.powf(inv) + 0.5 * (0.002f64.powf(inv) - 80f64.powf(inv))).powi(7);
        assert_eq!(s.sigmas[1], direct);

        assert!(karras_schedule(0, 0.002, 80.0, 7.0).is_err());
        assert!(karras_schedule(10, 0.0, 80.0, 7.0).is_err());
        assert!(karras_schedule(10, 1.0, 0.5, 7.0).is_err());
        assert!(karras_schedule(10, 0.002, 80.0, 0.0).is_err());
    }

    #[test]
    fn train_sigma_is_lognormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let degenerate = TrainNoiseDist {
            p_mean: -0.7,
            p_std: 0.0,
        };
        for _ in 0..10 {
            assert_eq!(sample_train_sigma(&degenerate, &mut rng), (-0.7f64).exp());
        }

        let dist = TrainNoiseDist::default();
        let n = 100_000;
        let logs: Vec<f64> = (0..n)
            .map(|_| {
                let s = sample_train_sigma(&dist, &mut rng);
                assert!(s > 0.0);
                s.ln()
            })
            .collect();
        let mean = logs.iter().sum::<f64>() / n as f64;
        let var = logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / n as f64;
        assert!((mean + 1.2).abs() < 0.02, "mean {mean}");
        assert!((var.sqrt() - 1.2).abs() < 0.02, "std {}", var.sqrt());
    }

    #[test]
    fn perturb_adds_the_right_amount_of_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xi = vec![Vec2::new(0.25, -1.5); 4];
        let same = perturb(&xi, 0.0, &mut rng);
        for (a, b) in xi.iter().zip(&same) {
            assert_eq!(a.x.to_bits(), b.x.to_bits());
            assert_eq!(a.y.to_bits(), b.y.to_bits());
        }

        let n = 50_000;
        let zero = vec![Vec2::ZERO; n];
        let noisy = perturb(&zero, 2.0, &mut rng);
        let comps: Vec<f64> = noisy.iter().flat_map(|a| [a.x, a.y]).collect();
        let mean = comps.iter().sum::<f64>() / comps.len() as f64;
        let var = comps.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / comps.len() as f64;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((1.98..=2.02).contains(&var.sqrt()), "std {}", var.sqrt());
    }

    fn tiny_policy(seed: u64) -> Policy {
        let config = DenoiserConfig {
            t: 3,
            m: 2,
            obs_dim: 4,
            hidden_width: 8,
            n_blocks: 2,
            sigma_data: 0.8,
            noise_embed_dim: 4,
        };
        init_policy(&config, ObsMode::Full, seed).unwrap()
    }

    #[test]
    fn frozen_loss_matches_hand_computation_on_zero_init() {
        // Zero-init head ⇒ D = c_skip·(ξ+ε), so the loss is
        // mean((c_skip·(ξ+ε) − ξ)²) — recomputable by hand.
        let policy = tiny_policy(4);
        let sd = policy.config.sigma_data;
        let flat = policy.config.flat_dim();
        let clean = Tensor::matrix(1, flat, vec![0.3, -0.2, 0.9, 0.0, -1.4, 0.5]);
        let eps = Tensor::matrix(1, flat, vec![0.05, -0.4, 0.0, 0.7, 0.2, -0.1]);
        let obs = Tensor::matrix(1, 4, vec![1.0, 0.0, -2.0, 0.5]);
        let sigma = 0.45;

        let out =
            diffusion_loss_frozen(&policy, &obs, &clean, &[sigma], &eps, false).unwrap();
        let cs = c_skip(sigma, sd);
        let expected: f64 = (0..flat)
            .map(|i| {
                let r = cs * (clean.data()[i] + eps.data()[i]) - clean.data()[i];
                r * r
            })
            .sum::<f64>()
            / flat as f64;
        assert!((out.value - expected).abs() < 1e-15, "{} vs {expected}", out.value);
        assert!(out.value >= 0.0);

        // σ → 0 with ε = 0 makes the zero-init denoiser near-perfect.
        let zero_eps = Tensor::zeros(vec![1, flat]);
        let perfect =
            diffusion_loss_frozen(&policy, &obs, &clean, &[1e-9], &zero_eps, false).unwrap();
        assert!(perfect.value < 1e-12, "loss {}", perfect.value);
    }

    #[test]
    fn weighted_loss_scales_rows_by_lambda() {
        let policy = tiny_policy(4);
        let sd = policy.config.sigma_data;
        let flat = policy.config.flat_dim();
        let clean = Tensor::matrix(1, flat, vec![0.3, -0.2, 0.9, 0.0, -1.4, 0.5]);
        let eps = Tensor::matrix(1, flat, vec![0.05, -0.4, 0.0, 0.7, 0.2, -0.1]);
        let obs = Tensor::matrix(1, 4, vec![1.0, 0.0, -2.0, 0.5]);
        let sigma = 0.45;
        let plain =
            diffusion_loss_frozen(&policy, &obs, &clean, &[sigma], &eps, false).unwrap();
        let weighted =
            diffusion_loss_frozen(&policy, &obs, &clean, &[sigma], &eps, true).unwrap();
        let lambda = (sigma * sigma + sd * sd) / (sigma * sigma * sd * sd);
        assert!((weighted.value - lambda * plain.value).abs() < 1e-12);
    }

    #[test]
    fn random_loss_runs_and_is_nonnegative() {
        let policy = tiny_policy(5);
        let flat = policy.config.flat_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let clean = Tensor::matrix(2, flat, vec![0.1; 2 * flat]);
        let obs = Tensor::matrix(2, 4, vec![0.0; 8]);
        let out = diffusion_loss(
            &policy,
            &obs,
            &clean,
            &TrainNoiseDist::default(),
            false,
            &mut rng,
        )
        .unwrap();
        assert!(out.value >= 0.0);
        assert!(diffusion_loss(
            &policy,
            &Tensor::zeros(vec![0, 4]),
            &Tensor::zeros(vec![0, flat]),
            &TrainNoiseDist::default(),
            false,
            &mut rng
        )
        .is_err());
    }

    #[test]
    fn sampler_recovers_the_gaussian_oracle() {
        let den = AnalyticGaussianDenoiser {
            sigma_data: 1.0,
            flat: 1,
        };
        let schedule = karras_schedule(40, 0.002, 80.0, 7.0).unwrap();
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<f64> = (0..n)
            .map(|_| 80.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let xi0 = Tensor::matrix(n, 1, data);
        let obs = Tensor::zeros(vec![n, 1]);
        let out = sample_with_initial(&den, &obs, &xi0, &schedule).unwrap();
        let mean = out.data().iter().sum::<f64>() / n as f64;
        let var = out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        assert!((std - 1.0).abs() < 0.03, "std {std}");
        assert!(mean.abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn single_step_schedule_is_one_euler_step() {
        // K = 1: the only step goes straight to σ = 0 via Euler, which
        // lands exactly on D(ξ_0; σ_max) = σ_d²·ξ_0/(σ_d² + σ_max²).
        let den = AnalyticGaussianDenoiser {
            sigma_data: 0.7,
            flat: 3,
        };
        let schedule = karras_schedule(1, 0.002, 80.0, 7.0).unwrap();
        let xi0 = Tensor::matrix(1, 3, vec![40.0, -3.0, 0.25]);
        let obs = Tensor::zeros(vec![1, 3]);
        let out = sample_with_initial(&den, &obs, &xi0, &schedule).unwrap();
        let c = 0.49 / (0.49 + 6400.0);
        for (o, x) in out.data().iter().zip(xi0.data()) {
            // Hand-stepped in the integrator's arithmetic order:
            // ξ1 = ξ0 + (0 − σ_max)·(ξ0 − D)/σ_max, which is D = c·ξ0 up
            // to the rounding of the division/multiplication pair.
            let d = c * x;
            let hand = x + (0.0 - 80.0) * ((x - d) / 80.0);
            assert_eq!(*o, hand);
            // ≈ D up to cancellation error on the scale of ξ0.
            assert!((o - d).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let policy = tiny_policy(8);
        let schedule = karras_schedule(10, 0.002, 80.0, 7.0).unwrap();
        let obs = vec![0.5, -0.5, 1.0, 0.0];
        let a = sample(&policy, &obs, &schedule, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample(&policy, &obs, &schedule, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let c = sample(&policy, &obs, &schedule, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.x.to_bits(), y.x.to_bits());
            assert_eq!(x.y.to_bits(), y.y.to_bits());
        }
        assert!(a.iter().zip(&c).any(|(x, y)| x.dist(*y) > 0.0));
    }

    struct NanDenoiser;
    impl Denoiser for NanDenoiser {
        fn flat_dim(&self) -> usize {
            1
        }
        fn denoise_rows(
            &self,
            xi: &Tensor,
            _sigma: f64,
            _obs: &Tensor,
        ) -> Result<Tensor, DiffusionError> {
            Ok(Tensor::new(xi.shape().to_vec(), vec![f64::NAN; xi.len()]))
        }
    }

    #[test]
    fn non_finite_states_name_the_step() {
        let schedule = karras_schedule(5, 0.002, 80.0, 7.0).unwrap();
        let xi0 = Tensor::matrix(1, 1, vec![1.0]);
        let obs = Tensor::zeros(vec![1, 1]);
        match sample_with_initial(&NanDenoiser, &obs, &xi0, &schedule) {
            Err(DiffusionError::NonFinite { step: 0, .. }) => {}
            other => panic!("expected NonFinite at step 0, got {other:?}"),
        }
    }

    /// Distribution recovery on a 1-D bimodal dataset: train a tiny
    /// denoiser on ½N(−1, 0.05²) + ½N(+1, 0.05²) scalars, then sample.
    #[test]
    fn bimodal_distribution_is_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n_data = 4096;
        let data: Vec<f64> = (0..n_data)
            .map(|i| {
                let center = if i % 2 == 0 { -1.0 } else { 1.0 };
                center + 0.05 * rng.sample::<f64, _>(StandardNormal)
            })
            .collect();
        let mean = data.iter().sum::<f64>() / n_data as f64;
        let sd = (data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / n_data as f64)
            .sqrt();

        let config = DenoiserConfig {
            t: 1,
            m: 1,
            obs_dim: 1,
            hidden_width: 32,
            n_blocks: 2,
            sigma_data: sd,
            noise_embed_dim: 8,
        };
        let mut policy = init_policy(&config, ObsMode::Full, 1).unwrap();
        let adamw = AdamWConfig {
            lr: 3e-3,
            ..AdamWConfig::default()
        };
        let dist = TrainNoiseDist::default();
        let batch = 128;
        let obs = Tensor::zeros(vec![batch, 1]);
        for step in 0..1500 {
            let rows: Vec<f64> = (0..batch)
                .map(|j| data[(step * batch + j) % n_data])
                .collect();
            let clean = Tensor::matrix(batch, 1, rows);
            let out =
                diffusion_loss(&policy, &obs, &clean, &dist, false, &mut rng).unwrap();
            let grads = out.graph.backward(out.loss).unwrap();
            policy
                .params
                .adamw_step(&adamw, &grads, &out.bound)
                .unwrap();
        }

        let schedule = karras_schedule(40, 0.002, 80.0, 7.0).unwrap();
        let n_samples = 2000;
        let init: Vec<f64> = (0..n_samples)
            .map(|_| 80.0 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let xi0 = Tensor::matrix(n_samples, 1, init);
        let obs_s = Tensor::zeros(vec![n_samples, 1]);
        let out = sample_with_initial(&policy, &obs_s, &xi0, &schedule).unwrap();

        let (neg, pos): (Vec<f64>, Vec<f64>) =
            out.data().iter().partition(|&&v| v < 0.0);
        let frac_neg = neg.len() as f64 / n_samples as f64;
        assert!(
            (0.25..=0.75).contains(&frac_neg),
            "negative-side fraction {frac_neg}"
        );
        let mean_neg = neg.iter().sum::<f64>() / neg.len() as f64;
        let mean_pos = pos.iter().sum::<f64>() / pos.len() as f64;
        assert!((mean_neg + 1.0).abs() < 0.1, "negative mode mean {mean_neg}");
        assert!((mean_pos - 1.0).abs() < 0.1, "positive mode mean {mean_pos}");
    }
}
