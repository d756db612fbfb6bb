//! The conditional denoiser D_θ(ξ; σ, o) and the behavior-cloning
//! regressor that shares its trunk.
//!
//! The network is a residual MLP over the flattened action trajectory:
//! the noisy input (pre-scaled by c_in) is projected to the hidden width,
//! sinusoidal features of c_noise(σ) and the observation are projected and
//! summed into a conditioning vector added at every block input, and a
//! zero-initialized output projection maps back to T·m. EDM
//! preconditioning wraps the raw network so the initial denoiser is
//! exactly c_skip·ξ.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{BoundParams, Graph, GraphError, NodeId, ParamStore, Tensor};
use crate::env::{ObsMode, Vec2};

/// Epsilon inside every layer norm.
pub const LN_EPS: f64 = 1e-5;
/// Frequency band of the sinusoidal noise embedding; c_noise spans roughly
/// [-1.6, 1.1] over σ ∈ [0.002, 80], so frequencies up to 50 resolve it.
const FREQ_MIN: f64 = 1.0;
const FREQ_MAX: f64 = 50.0;

#[derive(Debug, Error)]
pub enum DenoiserError {
    #[error("invalid denoiser config: {0}")]
    BadConfig(String),
    #[error("{what}: got shape {got:?}, want {want:?}")]
    Shape {
        what: &'static str,
        got: Vec<usize>,
        want: Vec<usize>,
    },
    #[error("sigma must be positive and finite, got {0}")]
    BadSigma(f64),
    #[error("parameter {0} missing from store")]
    MissingParam(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

// --- EDM preconditioner ----------------------------------------------------

pub fn c_skip(sigma: f64, sigma_data: f64) -> f64 {
    sigma_data * sigma_data / (sigma * sigma + sigma_data * sigma_data)
}

pub fn c_out(sigma: f64, sigma_data: f64) -> f64 {
    sigma * sigma_data / (sigma * sigma + sigma_data * sigma_data).sqrt()
}

pub fn c_in(sigma: f64, sigma_data: f64) -> f64 {
    1.0 / (sigma * sigma + sigma_data * sigma_data).sqrt()
}

pub fn c_noise(sigma: f64) -> f64 {
    sigma.ln() / 4.0
}

// --- configuration -----------------------------------------------------------

/// Shape of one agent's denoiser network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    /// Prediction horizon (actions per trajectory).
    pub t: usize,
    /// Action dimension.
    pub m: usize,
    /// Flattened observation length (must match the obs mode).
    pub obs_dim: usize,
    pub hidden_width: usize,
    pub n_blocks: usize,
    /// Empirical std of the action components, from the training set.
    pub sigma_data: f64,
    pub noise_embed_dim: usize,
}

impl DenoiserConfig {
    /// Spec-scale defaults (~0.3M parameters).
    pub fn new(t: usize, m: usize, obs_dim: usize, sigma_data: f64) -> Self {
        DenoiserConfig {
            t,
            m,
            obs_dim,
            hidden_width: 256,
            n_blocks: 4,
            sigma_data,
            noise_embed_dim: 64,
        }
    }

    /// Flattened trajectory length T·m.
    pub fn flat_dim(&self) -> usize {
        self.t * self.m
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let positive = [
            ("t", self.t),
            ("m", self.m),
            ("obs_dim", self.obs_dim),
            ("hidden_width", self.hidden_width),
            ("n_blocks", self.n_blocks),
            ("noise_embed_dim", self.noise_embed_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(DenoiserError::BadConfig(format!("{name} must be > 0")));
            }
        }
        if self.noise_embed_dim % 2 != 0 {
            return Err(DenoiserError::BadConfig(
                "noise_embed_dim must be even (sin/cos pairs)".into(),
            ));
        }
        if !(self.sigma_data > 0.0 && self.sigma_data.is_finite()) {
            return Err(DenoiserError::BadConfig(format!(
                "sigma_data must be positive and finite, got {}",
                self.sigma_data
            )));
        }
        Ok(())
    }

    fn trunk_and_head_params(&self) -> usize {
        let h = self.hidden_width;
        let f = self.flat_dim();
        self.n_blocks * (2 * h * h + 4 * h) + h * f + f
    }

    /// Closed-form parameter count of the diffusion denoiser.
    pub fn param_count_diffusion(&self) -> usize {
        let h = self.hidden_width;
        let f = self.flat_dim();
        (f * h + h) + (self.noise_embed_dim * h + h) + (self.obs_dim * h + h)
            + self.trunk_and_head_params()
    }

    /// Closed-form parameter count of the BC regressor (same trunk, no
    /// trajectory input or noise conditioning).
    pub fn param_count_bc(&self) -> usize {
        let h = self.hidden_width;
        (self.obs_dim * h + h) + self.trunk_and_head_params()
    }
}

/// One agent's diffusion policy: a denoiser network plus the observation
/// mode its obs_dim was derived from.
#[derive(Debug)]
pub struct Policy {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    pub obs_mode: ObsMode,
}

/// Deterministic observation → trajectory regressor for the BC baseline.
#[derive(Debug)]
pub struct BcRegressor {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    pub obs_mode: ObsMode,
}

// --- initialization -----------------------------------------------------------

fn he_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let scale = (2.0 / rows as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data)
}

fn init_shared(
    store: &mut ParamStore,
    config: &DenoiserConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(), DenoiserError> {
    let h = config.hidden_width;
    let f = config.flat_dim();
    let ins = |s: &mut ParamStore, n: &str, t: Tensor| {
        s.insert(n, t)
            .map_err(|e| DenoiserError::BadConfig(e.to_string()))
    };
    for i in 0..config.n_blocks {
        ins(store, &format!("block{i}.ln.gamma"), Tensor::vector(vec![1.0; h]))?;
        ins(store, &format!("block{i}.ln.beta"), Tensor::vector(vec![0.0; h]))?;
        ins(store, &format!("block{i}.fc1.w"), he_matrix(rng, h, h))?;
        ins(store, &format!("block{i}.fc1.b"), Tensor::vector(vec![0.0; h]))?;
        ins(store, &format!("block{i}.fc2.w"), he_matrix(rng, h, h))?;
        ins(store, &format!("block{i}.fc2.b"), Tensor::vector(vec![0.0; h]))?;
    }
    // Zero-initialized head: the raw network starts as the zero function.
    ins(store, "out.w", Tensor::zeros(vec![h, f]))?;
    ins(store, "out.b", Tensor::vector(vec![0.0; f]))?;
    Ok(())
}

/// Builds a freshly initialized diffusion policy, deterministic in `seed`.
pub fn init_policy(
    config: &DenoiserConfig,
    obs_mode: ObsMode,
    seed: u64,
) -> Result<Policy, DenoiserError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = config.hidden_width;
    let mut store = ParamStore::new();
    let ins = |s: &mut ParamStore, n: &str, t: Tensor| {
        s.insert(n, t)
            .map_err(|e| DenoiserError::BadConfig(e.to_string()))
    };
    ins(&mut store, "in.w", he_matrix(&mut rng, config.flat_dim(), h))?;
    ins(&mut store, "in.b", Tensor::vector(vec![0.0; h]))?;
    ins(&mut store, "noise.w", he_matrix(&mut rng, config.noise_embed_dim, h))?;
    ins(&mut store, "noise.b", Tensor::vector(vec![0.0; h]))?;
    ins(&mut store, "obs.w", he_matrix(&mut rng, config.obs_dim, h))?;
    ins(&mut store, "obs.b", Tensor::vector(vec![0.0; h]))?;
    init_shared(&mut store, config, &mut rng)?;
    Ok(Policy {
        config: config.clone(),
        params: store,
        obs_mode,
    })
}

/// Builds a freshly initialized BC regressor, deterministic in `seed`.
pub fn init_bc(
    config: &DenoiserConfig,
    obs_mode: ObsMode,
    seed: u64,
) -> Result<BcRegressor, DenoiserError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ins = |s: &mut ParamStore, n: &str, t: Tensor| {
        s.insert(n, t)
            .map_err(|e| DenoiserError::BadConfig(e.to_string()))
    };
    ins(&mut store, "obs.w", he_matrix(&mut rng, config.obs_dim, config.hidden_width))?;
    ins(&mut store, "obs.b", Tensor::vector(vec![0.0; config.hidden_width]))?;
    init_shared(&mut store, config, &mut rng)?;
    Ok(BcRegressor {
        config: config.clone(),
        params: store,
        obs_mode,
    })
}

// --- forward passes -------------------------------------------------------------

/// Sinusoidal embedding of one c_noise value: sin/cos pairs at
/// geometrically spaced frequencies.
pub fn noise_features(cn: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for j in 0..half {
        let frac = if half > 1 { j as f64 / (half - 1) as f64 } else { 0.0 };
        let w = FREQ_MIN * (FREQ_MAX / FREQ_MIN).powf(frac);
        out.push((cn * w).sin());
        out.push((cn * w).cos());
    }
    out
}

fn pid(
    store: &ParamStore,
    bound: &BoundParams,
    name: &str,
) -> Result<NodeId, DenoiserError> {
    store
        .index_of(name)
        .map(|i| bound.id(i))
        .ok_or_else(|| DenoiserError::MissingParam(name.to_string()))
}

fn linear(
    g: &mut Graph,
    x: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId, DenoiserError> {
    let y = g.matmul(x, w)?;
    Ok(g.bias_add(y, b)?)
}

fn trunk_and_head(
    g: &mut Graph,
    store: &ParamStore,
    bound: &BoundParams,
    config: &DenoiserConfig,
    mut x: NodeId,
    cond: Option<NodeId>,
) -> Result<NodeId, DenoiserError> {
    for i in 0..config.n_blocks {
        let mut h = match cond {
            Some(c) => g.add(x, c)?,
            None => x,
        };
        h = g.layer_norm(
            h,
            pid(store, bound, &format!("block{i}.ln.gamma"))?,
            pid(store, bound, &format!("block{i}.ln.beta"))?,
            LN_EPS,
        )?;
        h = linear(
            g,
            h,
            pid(store, bound, &format!("block{i}.fc1.w"))?,
            pid(store, bound, &format!("block{i}.fc1.b"))?,
        )?;
        h = g.gelu(h)?;
        h = linear(
            g,
            h,
            pid(store, bound, &format!("block{i}.fc2.w"))?,
            pid(store, bound, &format!("block{i}.fc2.b"))?,
        )?;
        x = g.add(x, h)?;
    }
    linear(
        g,
        x,
        pid(store, bound, "out.w")?,
        pid(store, bound, "out.b")?,
    )
}

/// Raw network F_θ over a batch, built onto `g` so gradients flow to the
/// bound parameters. `xi_scaled` is the c_in-scaled noisy trajectory
/// [B, T·m], `noise_feat` the embedded noise levels [B, E], `obs` the flat
/// observations [B, obs_dim].
pub fn forward_raw(
    g: &mut Graph,
    store: &ParamStore,
    bound: &BoundParams,
    config: &DenoiserConfig,
    xi_scaled: NodeId,
    noise_feat: NodeId,
    obs: NodeId,
) -> Result<NodeId, DenoiserError> {
    let x = linear(
        g,
        xi_scaled,
        pid(store, bound, "in.w")?,
        pid(store, bound, "in.b")?,
    )?;
    let nemb = linear(
        g,
        noise_feat,
        pid(store, bound, "noise.w")?,
        pid(store, bound, "noise.b")?,
    )?;
    let oemb = linear(
        g,
        obs,
        pid(store, bound, "obs.w")?,
        pid(store, bound, "obs.b")?,
    )?;
    let cond = g.add(nemb, oemb)?;
    trunk_and_head(g, store, bound, config, x, Some(cond))
}

/// Raw BC network over a batch: observation in, flattened trajectory out.
pub fn forward_bc(
    g: &mut Graph,
    store: &ParamStore,
    bound: &BoundParams,
    config: &DenoiserConfig,
    obs: NodeId,
) -> Result<NodeId, DenoiserError> {
    let x = linear(
        g,
        obs,
        pid(store, bound, "obs.w")?,
        pid(store, bound, "obs.b")?,
    )?;
    trunk_and_head(g, store, bound, config, x, None)
}

fn check_batch_shapes(
    config: &DenoiserConfig,
    xi: Option<&Tensor>,
    sigmas: Option<&[f64]>,
    obs: &Tensor,
) -> Result<usize, DenoiserError> {
    let b = obs.shape()[0];
    if obs.shape().len() != 2 || obs.shape()[1] != config.obs_dim {
        return Err(DenoiserError::Shape {
            what: "observation batch",
            got: obs.shape().to_vec(),
            want: vec![b, config.obs_dim],
        });
    }
    if let Some(xi) = xi {
        if xi.shape() != [b, config.flat_dim()] {
            return Err(DenoiserError::Shape {
                what: "trajectory batch",
                got: xi.shape().to_vec(),
                want: vec![b, config.flat_dim()],
            });
        }
    }
    if let Some(sigmas) = sigmas {
        if sigmas.len() != b {
            return Err(DenoiserError::Shape {
                what: "sigma batch",
                got: vec![sigmas.len()],
                want: vec![b],
            });
        }
        for &s in sigmas {
            if !(s > 0.0 && s.is_finite()) {
                return Err(DenoiserError::BadSigma(s));
            }
        }
    }
    Ok(b)
}

/// Embeds one c_noise value per row.
pub fn noise_feature_rows(sigmas: &[f64], dim: usize) -> Tensor {
    let data = sigmas
        .iter()
        .flat_map(|&s| noise_features(c_noise(s), dim))
        .collect();
    Tensor::matrix(sigmas.len(), dim, data)
}

/// Preconditioned denoiser over a batch of rows (one σ per row):
/// D = c_skip·ξ + c_out·F_θ(c_in·ξ, c_noise, o). Read-only on the policy.
pub fn denoise_batch(
    policy: &Policy,
    xi: &Tensor,
    sigmas: &[f64],
    obs: &Tensor,
) -> Result<Tensor, DenoiserError> {
    let b = check_batch_shapes(&policy.config, Some(xi), Some(sigmas), obs)?;
    let sd = policy.config.sigma_data;
    let flat = policy.config.flat_dim();

    let mut scaled = xi.clone();
    for (row, &s) in scaled.data_mut().chunks_mut(flat).zip(sigmas) {
        let ci = c_in(s, sd);
        for v in row {
            *v *= ci;
        }
    }
    let mut g = Graph::new();
    let bound = policy.params.bind(&mut g);
    let xi_node = g.leaf(scaled);
    let nf_node = g.leaf(noise_feature_rows(sigmas, policy.config.noise_embed_dim));
    let obs_node = g.leaf(obs.clone());
    let f = forward_raw(
        &mut g,
        &policy.params,
        &bound,
        &policy.config,
        xi_node,
        nf_node,
        obs_node,
    )?;
    let f_val = g.value(f);

    let mut out = Tensor::zeros(vec![b, flat]);
    for r in 0..b {
        let (cs, co) = (c_skip(sigmas[r], sd), c_out(sigmas[r], sd));
        for c in 0..flat {
            out.data_mut()[r * flat + c] = cs * xi.data()[r * flat + c] + co * f_val.data()[r * flat + c];
        }
    }
    Ok(out)
}

/// Single-trajectory denoise: actions in, denoised actions out.
pub fn denoise(
    policy: &Policy,
    xi: &[Vec2],
    sigma: f64,
    obs: &[f64],
) -> Result<Vec<Vec2>, DenoiserError> {
    if xi.len() != policy.config.t {
        return Err(DenoiserError::Shape {
            what: "trajectory",
            got: vec![xi.len()],
            want: vec![policy.config.t],
        });
    }
    let flat: Vec<f64> = xi.iter().flat_map(|a| [a.x, a.y]).collect();
    let xi_t = Tensor::matrix(1, policy.config.flat_dim(), flat);
    let obs_t = Tensor::matrix(1, obs.len(), obs.to_vec());
    let out = denoise_batch(policy, &xi_t, &[sigma], &obs_t)?;
    Ok(unflatten_actions(out.data()))
}

/// Deterministic BC prediction over a batch of observations.
pub fn predict_bc_batch(bc: &BcRegressor, obs: &Tensor) -> Result<Tensor, DenoiserError> {
    check_batch_shapes(&bc.config, None, None, obs)?;
    let mut g = Graph::new();
    let bound = bc.params.bind(&mut g);
    let obs_node = g.leaf(obs.clone());
    let f = forward_bc(&mut g, &bc.params, &bound, &bc.config, obs_node)?;
    Ok(g.value(f).clone())
}

/// [x0, y0, x1, y1, …] rows back into action vectors.
pub fn unflatten_actions(flat: &[f64]) -> Vec<Vec2> {
    flat.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect()
}
