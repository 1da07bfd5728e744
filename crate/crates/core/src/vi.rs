//! Mean-field Gaussian variational inference over the parameters of both
//! networks and, for inversion, over `log10 k_a` and `log10 k_d`.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::collocation::{subsample_indices, CollocationSet};
use crate::domain::{ColumnConfig, ScaledPoint};
use crate::error::{Error, Result};
use crate::nn::{read_blob, write_blob, BlobKind, MlpSpec, Streams, Tape};
use crate::oracle::Dataset;
use crate::physics::{Kinetics, LossBreakdown, NoisePreset, NoiseScales, PhysicsLoss, TERMS};

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

fn logistic(x: f64) -> f64 {
    crate::domain::logistic(x)
}

/// `KL(N(mu, std²) ‖ N(mu0, std0²))` summed over coordinates.
pub fn kl_gaussian_diag(mu: &[f64], std: &[f64], mu0: f64, std0: f64) -> Result<f64> {
    if !(std0 > 0.0) {
        return Err(Error::InvalidInput(format!("prior std must be > 0, got {std0}")));
    }
    if mu.len() != std.len() {
        return Err(Error::InvalidInput("mean/std length mismatch".into()));
    }
    let mut kl = 0.0;
    for (&m, &s) in mu.iter().zip(std) {
        if !(s > 0.0) {
            return Err(Error::InvalidInput(format!("std must be > 0, got {s}")));
        }
        kl += kl_term(m, s, mu0, std0);
    }
    Ok(kl)
}

fn kl_term(m: f64, s: f64, mu0: f64, std0: f64) -> f64 {
    let d = m - mu0;
    (std0 / s).ln() + (s * s + d * d) / (2.0 * std0 * std0) - 0.5
}

/// Gaussian priors: zero-mean on network parameters, and on the log10 rate
/// constants when inverting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorSpec {
    pub weight_std: f64,
    pub latent_mean: f64,
    pub latent_std: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            weight_std: 1.0,
            latent_mean: -3.5,
            latent_std: 1.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<Self> {
        let mut bad = Vec::new();
        if !(self.weight_std > 0.0 && self.weight_std.is_finite()) {
            bad.push(format!("weight_std must be > 0, got {}", self.weight_std));
        }
        if !(self.latent_std > 0.0 && self.latent_std.is_finite()) {
            bad.push(format!("latent_std must be > 0, got {}", self.latent_std));
        }
        if !self.latent_mean.is_finite() {
            bad.push("latent_mean must be finite".into());
        }
        if bad.is_empty() {
            Ok(*self)
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Number of latent coordinates in inverse mode.
pub const LATENTS: usize = 2;

/// Means and raw scales of the variational family. Coordinates are laid out
/// as `[aqueous network | retained network | latents]`; the standard
/// deviation of coordinate `i` is `softplus(rho[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub spec: MlpSpec,
    pub mu: Vec<f64>,
    pub rho: Vec<f64>,
    pub latents: usize,
}

impl VariationalState {
    /// Network means drawn from `N(0, mean_init_std²)`, every network std
    /// set to `std_init`; latents start at the prior mean with
    /// `latent_std_init`.
    pub fn init(
        spec: MlpSpec,
        init: &InitOptions,
        prior: &PriorSpec,
        inverse: bool,
        seed: u64,
    ) -> Result<Self> {
        init.validate()?;
        let p = spec.param_count();
        let latents = if inverse { LATENTS } else { 0 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mu = Vec::with_capacity(2 * p + latents);
        for _ in 0..2 {
            let mut net = vec![0.0; p];
            match init.scheme {
                MeanInit::Normal => {
                    for w in &mut net {
                        *w = init.mean_std * rng.sample::<f64, _>(StandardNormal);
                    }
                }
                MeanInit::Xavier => {
                    for layer in spec.layers() {
                        let sd = init.gain * (2.0 / (layer.n_in + layer.n_out) as f64).sqrt();
                        for w in &mut net[layer.weights..layer.biases] {
                            *w = sd * rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                }
            }
            mu.extend(net);
        }
        let mut rho = vec![softplus_inv(init.std); 2 * p];
        for _ in 0..latents {
            mu.push(prior.latent_mean);
            rho.push(softplus_inv(init.latent_std));
        }
        Ok(Self {
            spec,
            mu,
            rho,
            latents,
        })
    }

    pub fn network_len(&self) -> usize {
        self.spec.param_count()
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn is_inverse(&self) -> bool {
        self.latents == LATENTS
    }

    pub fn std(&self) -> Vec<f64> {
        self.rho.iter().map(|&r| softplus(r)).collect()
    }

    pub fn check(&self) -> Result<()> {
        let expected = 2 * self.spec.param_count() + self.latents;
        if self.mu.len() != expected || self.rho.len() != expected {
            return Err(Error::Format(format!(
                "variational state holds {} means and {} scales, architecture needs {expected}",
                self.mu.len(),
                self.rho.len()
            )));
        }
        if self.latents != 0 && self.latents != LATENTS {
            return Err(Error::Format(format!("unsupported latent count {}", self.latents)));
        }
        if let Some(i) = self
            .mu
            .iter()
            .chain(&self.rho)
            .position(|v| !v.is_finite())
        {
            return Err(Error::Format(format!("non-finite value at coordinate {i}")));
        }
        Ok(())
    }

    /// KL divergence from the prior; network and latent blocks use their
    /// own prior.
    pub fn kl(&self, prior: &PriorSpec) -> f64 {
        let n = 2 * self.network_len();
        let mut kl = 0.0;
        for i in 0..self.len() {
            let (m0, s0) = if i < n {
                (0.0, prior.weight_std)
            } else {
                (prior.latent_mean, prior.latent_std)
            };
            kl += kl_term(self.mu[i], softplus(self.rho[i]), m0, s0);
        }
        kl
    }

    /// Checkpoint in the shared binary layout: means, then raw scales.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut values = self.mu.clone();
        values.extend_from_slice(&self.rho);
        write_blob(BlobKind::Variational, &self.spec, self.latents as u32, &values)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let blob = read_blob(bytes)?;
        if blob.kind != BlobKind::Variational {
            return Err(Error::Format(format!(
                "expected a variational state, found {:?}",
                blob.kind
            )));
        }
        if blob.values.len() % 2 != 0 {
            return Err(Error::Format("odd value count in variational state".into()));
        }
        let half = blob.values.len() / 2;
        let state = Self {
            spec: blob.spec,
            mu: blob.values[..half].to_vec(),
            rho: blob.values[half..].to_vec(),
            latents: blob.aux as usize,
        };
        state.check()?;
        Ok(state)
    }
}

/// One reparameterized draw and the noise behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub values: Vec<f64>,
    pub eps: Vec<f64>,
}

impl Draw {
    pub fn aqueous<'a>(&'a self, state: &VariationalState) -> &'a [f64] {
        &self.values[..state.network_len()]
    }

    pub fn retained<'a>(&'a self, state: &VariationalState) -> &'a [f64] {
        let p = state.network_len();
        &self.values[p..2 * p]
    }

    /// `(k_a, k_d) = (10^λa, 10^λb)` in inverse mode.
    pub fn kinetics(&self, state: &VariationalState) -> Option<Kinetics> {
        state.is_inverse().then(|| {
            let n = 2 * state.network_len();
            Kinetics {
                attach: 10f64.powf(self.values[n]),
                detach: 10f64.powf(self.values[n + 1]),
            }
        })
    }
}

/// `mu + softplus(rho) ⊙ eps` for the given noise.
pub fn reparameterize(state: &VariationalState, eps: Vec<f64>) -> Draw {
    let values = state
        .mu
        .iter()
        .zip(&state.rho)
        .zip(&eps)
        .map(|((&m, &r), &e)| m + softplus(r) * e)
        .collect();
    Draw { values, eps }
}

/// Draw with `eps ~ N(0, I)` from `rng`.
pub fn sample_with(state: &VariationalState, rng: &mut impl Rng) -> Draw {
    let eps = (0..state.len()).map(|_| rng.sample(StandardNormal)).collect();
    reparameterize(state, eps)
}

/// Deterministic draw for a seed.
pub fn sample_reparameterized(state: &VariationalState, seed: u64) -> Draw {
    sample_with(state, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Adam with bias correction and a constant step size.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// How the network means start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanInit {
    /// I.i.d. `N(0, mean_std²)` for every weight and bias.
    Normal,
    /// Weights `N(0, gain²·2/(fan_in + fan_out))`, zero biases.
    #[default]
    Xavier,
}

/// Initial values of the variational family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitOptions {
    pub scheme: MeanInit,
    /// Spread of the initial network means under [`MeanInit::Normal`].
    pub mean_std: f64,
    /// Multiplier of the [`MeanInit::Xavier`] spread.
    pub gain: f64,
    /// Initial posterior std of every network parameter.
    pub std: f64,
    /// Initial posterior std of each log10 rate.
    pub latent_std: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            scheme: MeanInit::Xavier,
            mean_std: 0.001,
            gain: 1.0,
            std: 0.01,
            latent_std: 0.1,
        }
    }
}

impl InitOptions {
    pub fn validate(&self) -> Result<Self> {
        let mut bad = Vec::new();
        if !(self.mean_std >= 0.0 && self.mean_std.is_finite()) {
            bad.push(format!("init mean_std must be >= 0, got {}", self.mean_std));
        }
        for (name, v) in [
            ("std", self.std),
            ("latent_std", self.latent_std),
            ("gain", self.gain),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                bad.push(format!("init {name} must be > 0, got {v}"));
            }
        }
        if bad.is_empty() {
            Ok(*self)
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Optimisation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta_kl: f64,
    pub noise_preset: NoisePreset,
    /// Explicit noise scales; replaces the preset when present.
    pub noise: Option<NoiseScales>,
    /// Interior points per iteration; `None` uses all of them.
    pub batch_size: Option<usize>,
    pub init: InitOptions,
    pub prior: PriorSpec,
    /// Multipliers of the likelihood terms in the order
    /// `pde_c, pde_s, inlet, outlet, init_c, init_s, data`.
    pub term_weights: [f64; TERMS],
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iterations: 20_000,
            learning_rate: 1e-2,
            beta_kl: 1.0,
            noise_preset: NoisePreset::Balanced,
            noise: None,
            batch_size: Some(1500),
            init: InitOptions::default(),
            prior: PriorSpec::default(),
            term_weights: [1.0; TERMS],
        }
    }
}

impl TrainOptions {
    pub fn noise_scales(&self) -> NoiseScales {
        self.noise.unwrap_or_else(|| self.noise_preset.scales())
    }

    pub fn validate(&self) -> Result<Self> {
        let mut bad = Vec::new();
        if self.iterations == 0 {
            bad.push("iterations must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bad.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            bad.push(format!("beta_kl must be >= 0, got {}", self.beta_kl));
        }
        if self.batch_size == Some(0) {
            bad.push("batch_size must be >= 1".to_string());
        }
        if self.term_weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            bad.push("term_weights must be finite and >= 0".to_string());
        }
        for r in [self.init.validate().err(), self.prior.validate().err()] {
            if let Some(Error::Config(mut v)) = r {
                bad.append(&mut v);
            }
        }
        if bad.is_empty() {
            Ok(*self)
        } else {
            Err(Error::Config(bad))
        }
    }
}

/// Forward mode learns the fields for known kinetics; inverse mode also
/// learns the kinetics from observations.
#[derive(Debug, Clone)]
pub enum Mode {
    Forward,
    Inverse(Dataset),
}

/// One row of the training trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: LossBreakdown,
    pub kl: f64,
    pub elbo: f64,
}

pub const TRACE_HEADER: &str =
    "iter,r_pde_c,r_pde_s,r_inlet,r_outlet,r_init_c,r_init_s,r_data,total_nll,kl,elbo";

/// Trace as CSV; `r_data` is left empty in forward mode.
pub fn trace_csv(rows: &[TraceRow]) -> String {
    use crate::fmt_f64 as f;
    let mut out = String::with_capacity(rows.len() * 256);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let l = &r.loss;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.iter,
            f(l.r_pde_c),
            f(l.r_pde_s),
            f(l.r_inlet),
            f(l.r_outlet),
            f(l.r_init_c),
            f(l.r_init_s),
            l.r_data.map(f).unwrap_or_default(),
            f(l.total_nll),
            f(r.kl),
            f(r.elbo)
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    pub state: VariationalState,
    pub wall_clock_s: f64,
    pub seed: u64,
    pub preset: NoisePreset,
}

impl TrainReport {
    pub fn elbo_trace(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.elbo).collect()
    }
}

/// Stochastic ELBO objective: likelihood from [`PhysicsLoss`] plus the KL
/// divergence to the prior.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: PhysicsLoss,
    pub prior: PriorSpec,
    pub beta_kl: f64,
    /// Kinetics used in forward mode.
    pub fixed_kinetics: Kinetics,
}

/// Value of the negative ELBO at one draw and its gradient with respect to
/// `(mu, rho)`.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub loss: LossBreakdown,
    pub kl: f64,
    pub grad_mu: Vec<f64>,
    pub grad_rho: Vec<f64>,
}

impl ObjectiveEval {
    pub fn elbo(&self, beta_kl: f64) -> f64 {
        -self.loss.total_nll - beta_kl * self.kl
    }
}

impl Objective {
    pub fn new(
        cfg: &ColumnConfig,
        spec: MlpSpec,
        colloc: CollocationSet,
        mode: &Mode,
        opts: &TrainOptions,
    ) -> Result<Self> {
        let dataset = match mode {
            Mode::Forward => None,
            Mode::Inverse(ds) => Some(ds),
        };
        let mut loss = PhysicsLoss::new(cfg, spec, colloc, opts.noise_scales(), dataset)?;
        loss.weights = opts.term_weights;
        Ok(Self {
            loss,
            prior: opts.prior,
            beta_kl: opts.beta_kl,
            fixed_kinetics: Kinetics::from_config(cfg),
        })
    }

    /// `-ELBO` estimate at the draw `mu + std ⊙ eps` with gradient.
    pub fn evaluate(
        &self,
        state: &VariationalState,
        eps: &[f64],
        batch: Option<&[usize]>,
    ) -> Result<ObjectiveEval> {
        let draw = reparameterize(state, eps.to_vec());
        let kin = draw.kinetics(state).unwrap_or(self.fixed_kinetics);
        let e = self.loss.evaluate(
            draw.aqueous(state),
            draw.retained(state),
            kin,
            batch,
            true,
        )?;
        let n = state.len();
        let p = state.network_len();
        let mut g_w = e.grad_c;
        g_w.extend_from_slice(&e.grad_s);
        if state.is_inverse() {
            let ln10 = std::f64::consts::LN_10;
            g_w.push(e.grad_kinetics[0] * kin.attach * ln10);
            g_w.push(e.grad_kinetics[1] * kin.detach * ln10);
        }
        let beta = self.beta_kl;
        let mut grad_mu = vec![0.0; n];
        let mut grad_rho = vec![0.0; n];
        let mut kl = 0.0;
        for i in 0..n {
            let (m0, s0) = if i < 2 * p {
                (0.0, self.prior.weight_std)
            } else {
                (self.prior.latent_mean, self.prior.latent_std)
            };
            let s = softplus(state.rho[i]);
            kl += kl_term(state.mu[i], s, m0, s0);
            grad_mu[i] = g_w[i] + beta * (state.mu[i] - m0) / (s0 * s0);
            let dstd = g_w[i] * eps[i] + beta * (-1.0 / s + s / (s0 * s0));
            grad_rho[i] = dstd * logistic(state.rho[i]);
        }
        Ok(ObjectiveEval {
            loss: e.breakdown,
            kl,
            grad_mu,
            grad_rho,
        })
    }
}

/// Runs `opts.iterations` Adam steps on the reparameterized ELBO.
pub fn train(
    cfg: &ColumnConfig,
    spec: MlpSpec,
    colloc: CollocationSet,
    mode: Mode,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainReport> {
    train_observed(cfg, spec, colloc, mode, opts, seed, |_| {})
}

/// [`train`] with a callback invoked after every iteration.
pub fn train_observed(
    cfg: &ColumnConfig,
    spec: MlpSpec,
    colloc: CollocationSet,
    mode: Mode,
    opts: &TrainOptions,
    seed: u64,
    mut observer: impl FnMut(&TraceRow),
) -> Result<TrainReport> {
    let opts = opts.validate()?;
    let started = Instant::now();
    let inverse = matches!(mode, Mode::Inverse(_));
    let objective = Objective::new(cfg, spec, colloc, &mode, &opts)?;
    let state = VariationalState::init(spec, &opts.init, &opts.prior, inverse, seed)?;
    let (state, trace) = optimise(&objective, state, &opts, seed, &mut observer)?;
    Ok(TrainReport {
        trace,
        state,
        wall_clock_s: started.elapsed().as_secs_f64(),
        seed,
        preset: opts.noise_preset,
    })
}

/// Continues optimisation from `state`.
pub fn optimise(
    objective: &Objective,
    mut state: VariationalState,
    opts: &TrainOptions,
    seed: u64,
    observer: &mut impl FnMut(&TraceRow),
) -> Result<(VariationalState, Vec<TraceRow>)> {
    let n = state.len();
    let n_interior = objective.loss.colloc.interior.len();
    // separate stream from the initialisation draw
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut adam_mu = Adam::new(n, opts.learning_rate);
    let mut adam_rho = Adam::new(n, opts.learning_rate);
    let mut trace = Vec::with_capacity(opts.iterations);
    let mut eps = vec![0.0; n];
    for iter in 1..=opts.iterations {
        for e in eps.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        let batch = opts
            .batch_size
            .filter(|&b| b < n_interior)
            .map(|b| subsample_indices(n_interior, b, &mut rng));
        let e = objective
            .evaluate(&state, &eps, batch.as_deref())
            .map_err(|err| match err {
                Error::Numerical(msg) => Error::Numerical(format!("iteration {iter}: {msg}")),
                other => other,
            })?;
        let elbo = e.elbo(objective.beta_kl);
        if !elbo.is_finite() {
            let term = e.loss.non_finite_term().unwrap_or("kl");
            return Err(Error::Numerical(format!(
                "iteration {iter}: non-finite ELBO (term {term})"
            )));
        }
        let row = TraceRow {
            iter,
            loss: e.loss,
            kl: e.kl,
            elbo,
        };
        observer(&row);
        trace.push(row);
        adam_mu.step(&mut state.mu, &e.grad_mu);
        adam_rho.step(&mut state.rho, &e.grad_rho);
    }
    Ok((state, trace))
}

/// Pointwise ensemble statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Summary {
    /// `samples[k][j]` is sample `k` at point `j`; std uses `n - 1`.
    pub fn of(samples: &[Vec<f64>]) -> Self {
        let m = samples.first().map_or(0, Vec::len);
        let n = samples.len() as f64;
        let mut s = Self {
            mean: vec![0.0; m],
            std: vec![0.0; m],
            min: vec![f64::INFINITY; m],
            max: vec![f64::NEG_INFINITY; m],
        };
        for j in 0..m {
            let col = samples.iter().map(|row| row[j]);
            let mean = col.clone().sum::<f64>() / n;
            let var = if samples.len() > 1 {
                col.clone().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            s.min[j] = col.clone().fold(f64::INFINITY, f64::min);
            s.max[j] = col.fold(f64::NEG_INFINITY, f64::max);
            // identical samples: avoid a round-off spread
            if s.min[j] == s.max[j] {
                s.mean[j] = s.min[j];
            } else {
                s.mean[j] = mean.clamp(s.min[j], s.max[j]);
                s.std[j] = var.sqrt();
            }
        }
        s
    }
}

/// Posterior predictive breakthrough and retention curves in physical
/// units (kg/m³).
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
    /// `btc[k][j]`: sample `k` at `times[j]`.
    pub btc: Vec<Vec<f64>>,
    /// `retention[k][j]`: sample `k` at `positions[j]`.
    pub retention: Vec<Vec<f64>>,
    pub btc_summary: Summary,
    pub retention_summary: Summary,
}

impl Ensemble {
    /// `t_s,mean,std,min,max,s000,...`.
    pub fn btc_csv(&self) -> String {
        summary_csv("t_s", &self.times, &self.btc_summary, &self.btc)
    }

    /// `x_m,mean,std,min,max,s000,...`.
    pub fn retention_csv(&self) -> String {
        summary_csv("x_m", &self.positions, &self.retention_summary, &self.retention)
    }
}

fn summary_csv(axis: &str, at: &[f64], s: &Summary, samples: &[Vec<f64>]) -> String {
    use crate::fmt_f64 as f;
    let mut out = format!("{axis},mean,std,min,max");
    for k in 0..samples.len() {
        out.push_str(&format!(",s{k:03}"));
    }
    out.push('\n');
    for (j, &x) in at.iter().enumerate() {
        out.push_str(&format!(
            "{},{},{},{},{}",
            f(x),
            f(s.mean[j]),
            f(s.std[j]),
            f(s.min[j]),
            f(s.max[j])
        ));
        for row in samples {
            out.push(',');
            out.push_str(&f(row[j]));
        }
        out.push('\n');
    }
    out
}

/// `n_samples` draws of both networks evaluated on the outlet at `times`
/// and at the final time over `positions` (both physical).
pub fn posterior_predict(
    state: &VariationalState,
    cfg: &ColumnConfig,
    n_samples: usize,
    times: &[f64],
    positions: &[f64],
    seed: u64,
) -> Result<Ensemble> {
    state.check()?;
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be >= 1".into()));
    }
    let btc_pts = times
        .iter()
        .map(|&t| cfg.to_scaled(cfg.length, t))
        .collect::<Result<Vec<ScaledPoint>>>()?;
    let ret_pts = positions
        .iter()
        .map(|&x| cfg.to_scaled(x, cfg.horizon))
        .collect::<Result<Vec<ScaledPoint>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new(state.spec);
    let mut btc = Vec::with_capacity(n_samples);
    let mut retention = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let draw = sample_with(state, &mut rng);
        let mut eval = |params: &[f64], pts: &[ScaledPoint]| -> Vec<f64> {
            if pts.is_empty() {
                return Vec::new();
            }
            tape.forward(params, pts, Streams::VALUE);
            tape.value().iter().map(|u| u * cfg.inlet_peak).collect()
        };
        btc.push(eval(draw.aqueous(state), &btc_pts));
        retention.push(eval(draw.retained(state), &ret_pts));
    }
    for row in btc.iter().chain(&retention) {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite predictive sample".into()));
        }
    }
    Ok(Ensemble {
        times: times.to_vec(),
        positions: positions.to_vec(),
        btc_summary: Summary::of(&btc),
        retention_summary: Summary::of(&retention),
        btc,
        retention,
    })
}

/// Posterior moments of the rate constants in 1/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KineticsPosterior {
    pub ka_mean: f64,
    pub ka_std: f64,
    pub kd_mean: f64,
    pub kd_std: f64,
}

/// Moments of `10^λ` over `n_samples` draws of the latent coordinates.
pub fn inverse_posterior_summary(
    state: &VariationalState,
    n_samples: usize,
    seed: u64,
) -> Result<KineticsPosterior> {
    if !state.is_inverse() {
        return Err(Error::InvalidInput(
            "state has no kinetic latents (forward-mode checkpoint)".into(),
        ));
    }
    if n_samples == 0 {
        return Err(Error::InvalidInput("n_samples must be >= 1".into()));
    }
    let n = 2 * state.network_len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| {
            (n..n + LATENTS)
                .map(|k| {
                    let e: f64 = rng.sample(StandardNormal);
                    10f64.powf(state.mu[k] + softplus(state.rho[k]) * e)
                })
                .collect()
        })
        .collect();
    let m = Summary::of(&rows);
    let (ka_mean, ka_std, kd_mean, kd_std) = (m.mean[0], m.std[0], m.mean[1], m.std[1]);
    Ok(KineticsPosterior {
        ka_mean,
        ka_std,
        kd_mean,
        kd_std,
    })
}
