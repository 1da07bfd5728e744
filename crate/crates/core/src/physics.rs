//! Residuals of the transport/retention equations, boundary and initial
//! misfits, observation misfit, and their Gaussian negative log-likelihood.
//!
//! Both networks take `(x̂, t̂) = (x/L, t/T)` and return concentrations scaled
//! by `c0`. In these units the two governing equations read
//!
//! ```text
//! r1 = (θ/T) ∂ĉ/∂t̂ + (1/T) ∂ŝ/∂t̂ + (v/L) ∂ĉ/∂x̂ - (D/L²) ∂²ĉ/∂x̂²
//! r2 = (1/T) ∂ŝ/∂t̂ - θ k_a ĉ + k_d ŝ
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collocation::CollocationSet;
use crate::domain::{ColumnConfig, ScaledPoint};
use crate::error::{Error, Result};
use crate::nn::{DerivBundle, MlpSpec, Streams, Tape};
use crate::oracle::{Dataset, ObservationKind};

/// Standard deviations of the Gaussian noise assumed on observations
/// (`sigma_u`), equation residuals (`sigma_f`) and boundary/initial data
/// (`sigma_b`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseScales {
    pub sigma_u: f64,
    pub sigma_f: f64,
    pub sigma_b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoisePreset {
    /// σ_u = 0.01, σ_f = 1e-8, σ_b = 0.001.
    Paper,
    /// σ_u = 0.01, σ_f = 1e-4, σ_b = 0.001.
    #[default]
    Balanced,
}

impl NoisePreset {
    pub fn scales(self) -> NoiseScales {
        match self {
            NoisePreset::Paper => NoiseScales {
                sigma_u: 0.01,
                sigma_f: 1e-8,
                sigma_b: 0.001,
            },
            // σ_f = σ_b·v/L: a unit error in the scaled advection term costs
            // the same as a unit error on the boundary. σ_u is tighter than the
            // observation noise so a few hundred data points can move the
            // kinetics against thousands of boundary points.
            NoisePreset::Balanced => NoiseScales {
                sigma_u: 1e-4,
                sigma_f: 2e-7,
                sigma_b: 0.001,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NoisePreset::Paper => "paper",
            NoisePreset::Balanced => "balanced",
        }
    }
}

impl NoiseScales {
    pub fn validate(&self) -> Result<Self> {
        for (name, v) in [
            ("sigma_u", self.sigma_u),
            ("sigma_f", self.sigma_f),
            ("sigma_b", self.sigma_b),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(*self)
    }

    /// Noise scale governing each term, in [`Term::ALL`] order.
    pub fn per_term(&self) -> [f64; TERMS] {
        [
            self.sigma_f,
            self.sigma_f,
            self.sigma_b,
            self.sigma_b,
            self.sigma_b,
            self.sigma_b,
            self.sigma_u,
        ]
    }
}

pub const TERMS: usize = 7;

/// The six physics terms and the observation term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    /// Aqueous balance residual `r1`.
    PdeC = 0,
    /// Retention kinetics residual `r2`.
    PdeS = 1,
    /// Dirichlet inlet schedule.
    Inlet = 2,
    /// Zero dispersive flux at the outlet.
    Outlet = 3,
    /// Clean column, aqueous.
    InitC = 4,
    /// Clean column, retained.
    InitS = 5,
    /// Observations (inverse mode).
    Data = 6,
}

impl Term {
    pub const ALL: [Term; TERMS] = [
        Term::PdeC,
        Term::PdeS,
        Term::Inlet,
        Term::Outlet,
        Term::InitC,
        Term::InitS,
        Term::Data,
    ];
}

/// Mean-squared residual of every term and the resulting negative
/// log-likelihood (normalisation constants dropped).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub r_pde_c: f64,
    pub r_pde_s: f64,
    pub r_inlet: f64,
    pub r_outlet: f64,
    pub r_init_c: f64,
    pub r_init_s: f64,
    pub r_data: Option<f64>,
    pub total_nll: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; TERMS] {
        [
            self.r_pde_c,
            self.r_pde_s,
            self.r_inlet,
            self.r_outlet,
            self.r_init_c,
            self.r_init_s,
            self.r_data.unwrap_or(0.0),
        ]
    }

    fn from_components(mse: [f64; TERMS], has_data: bool, total_nll: f64) -> Self {
        Self {
            r_pde_c: mse[0],
            r_pde_s: mse[1],
            r_inlet: mse[2],
            r_outlet: mse[3],
            r_init_c: mse[4],
            r_init_s: mse[5],
            r_data: has_data.then_some(mse[6]),
            total_nll,
        }
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        const NAMES: [&str; TERMS] = [
            "r_pde_c", "r_pde_s", "r_inlet", "r_outlet", "r_init_c", "r_init_s", "r_data",
        ];
        self.components()
            .iter()
            .position(|v| !v.is_finite())
            .map(|i| NAMES[i])
            .or_else(|| (!self.total_nll.is_finite()).then_some("total_nll"))
    }
}

/// First-order attachment and detachment rates, 1/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kinetics {
    pub attach: f64,
    pub detach: f64,
}

impl Kinetics {
    pub fn from_config(cfg: &ColumnConfig) -> Self {
        Self {
            attach: cfg.attach,
            detach: cfg.detach,
        }
    }
}

/// Constant coefficients of the scaled residuals.
#[derive(Debug, Clone, Copy)]
struct Coefficients {
    porosity: f64,
    storage_c: f64,
    storage_s: f64,
    advection: f64,
    dispersion: f64,
}

impl Coefficients {
    fn new(cfg: &ColumnConfig) -> Self {
        Self {
            porosity: cfg.porosity,
            storage_c: cfg.porosity / cfg.horizon,
            storage_s: 1.0 / cfg.horizon,
            advection: cfg.darcy_flux / cfg.length,
            dispersion: cfg.dispersion() / (cfg.length * cfg.length),
        }
    }

    fn residuals(&self, c: &DerivBundle, s: &DerivBundle, kin: Kinetics) -> (f64, f64) {
        let r1 = self.storage_c * c.du_dt + self.storage_s * s.du_dt + self.advection * c.du_dx
            - self.dispersion * c.d2u_dx2;
        let r2 = self.storage_s * s.du_dt - self.porosity * kin.attach * c.u + kin.detach * s.u;
        (r1, r2)
    }
}

/// Residuals `(r1, r2)` of the two governing equations, 1/s, from the
/// networks' derivative bundles at one point.
pub fn pde_residuals(
    bundle_c: &DerivBundle,
    bundle_s: &DerivBundle,
    cfg: &ColumnConfig,
    kinetics: Kinetics,
) -> Result<(f64, f64)> {
    if !(kinetics.attach >= 0.0 && kinetics.detach >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "kinetic rates must be >= 0, got {kinetics:?}"
        )));
    }
    let (r1, r2) = Coefficients::new(cfg).residuals(bundle_c, bundle_s, kinetics);
    if !(r1.is_finite() && r2.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite residual (r1 = {r1}, r2 = {r2})"
        )));
    }
    Ok((r1, r2))
}

/// Mean-squared boundary and initial misfits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundaryResiduals {
    pub r_inlet: f64,
    pub r_outlet: f64,
    pub r_init_c: f64,
    pub r_init_s: f64,
}

pub fn boundary_residuals(
    spec: &MlpSpec,
    params_c: &[f64],
    params_s: &[f64],
    colloc: &CollocationSet,
    cfg: &ColumnConfig,
) -> Result<BoundaryResiduals> {
    if colloc.inlet.is_empty() || colloc.outlet.is_empty() || colloc.initial.is_empty() {
        return Err(Error::InvalidInput("empty boundary point set".into()));
    }
    let mut tape = Tape::new(*spec);
    tape.forward(params_c, &colloc.inlet, Streams::VALUE);
    let r_inlet = mean(colloc.inlet.iter().zip(tape.value()).map(|(p, &c)| {
        let target = cfg.inlet_concentration(p.t_hat * cfg.horizon) / cfg.inlet_peak;
        (c - target).powi(2)
    }));
    tape.forward(params_c, &colloc.outlet, Streams::WITH_DX);
    let r_outlet = mean(tape.block(1).iter().map(|d| d * d));
    tape.forward(params_c, &colloc.initial, Streams::VALUE);
    let r_init_c = mean(tape.value().iter().map(|c| c * c));
    tape.forward(params_s, &colloc.initial, Streams::VALUE);
    let r_init_s = mean(tape.value().iter().map(|s| s * s));
    Ok(BoundaryResiduals {
        r_inlet,
        r_outlet,
        r_init_c,
        r_init_s,
    })
}

fn mean(it: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = it.len();
    it.sum::<f64>() / n as f64
}

/// Observations mapped onto the unit square with targets scaled by `c0`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScaledObservations {
    pub btc: Vec<(ScaledPoint, f64)>,
    pub ret: Vec<(ScaledPoint, f64)>,
}

impl ScaledObservations {
    pub fn from_dataset(dataset: &Dataset, cfg: &ColumnConfig) -> Result<Self> {
        let mut out = Self::default();
        for (row, obs) in dataset.rows.iter().enumerate() {
            let (x, t) = match obs.kind {
                ObservationKind::Btc => (cfg.length, obs.coord),
                ObservationKind::Ret => (obs.coord, cfg.horizon),
            };
            let p = cfg
                .to_scaled(x, t)
                .map_err(|e| Error::InvalidInput(format!("dataset row {}: {e}", row + 1)))?;
            if !obs.value.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "dataset row {}: non-finite value",
                    row + 1
                )));
            }
            let target = obs.value / cfg.inlet_peak;
            match obs.kind {
                ObservationKind::Btc => out.btc.push((p, target)),
                ObservationKind::Ret => out.ret.push((p, target)),
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.btc.len() + self.ret.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean squared difference between predictions (`ĉ` at the outlet for
/// breakthrough rows, `ŝ` at the final time for retention rows) and
/// observations, in scaled units.
pub fn data_misfit(
    spec: &MlpSpec,
    params_c: &[f64],
    params_s: &[f64],
    dataset: &Dataset,
    cfg: &ColumnConfig,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let obs = ScaledObservations::from_dataset(dataset, cfg)?;
    let mut tape = Tape::new(*spec);
    let mut sq = 0.0;
    for (set, params) in [(&obs.btc, params_c), (&obs.ret, params_s)] {
        if set.is_empty() {
            continue;
        }
        let pts: Vec<ScaledPoint> = set.iter().map(|o| o.0).collect();
        tape.forward(params, &pts, Streams::VALUE);
        sq += set
            .iter()
            .zip(tape.value())
            .map(|((_, y), u)| (u - y).powi(2))
            .sum::<f64>();
    }
    Ok(sq / obs.len() as f64)
}

/// `Σ_term weight · N_term · MSE_term / (2 σ_term²)`.
///
/// `counts` and `weights` are in [`Term::ALL`] order; a zero weight removes a
/// term.
pub fn negative_log_likelihood(
    components: &[f64; TERMS],
    noise: &NoiseScales,
    counts: &[usize; TERMS],
    weights: &[f64; TERMS],
) -> f64 {
    let sigma = noise.per_term();
    (0..TERMS)
        .filter(|&k| weights[k] != 0.0)
        .map(|k| weights[k] * counts[k] as f64 * components[k] / (2.0 * sigma[k] * sigma[k]))
        .sum()
}

/// Result of one likelihood evaluation.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub breakdown: LossBreakdown,
    /// ∂(total_nll)/∂(aqueous network parameters); empty when not requested.
    pub grad_c: Vec<f64>,
    /// ∂(total_nll)/∂(retained network parameters); empty when not requested.
    pub grad_s: Vec<f64>,
    /// ∂(total_nll)/∂(k_a, k_d).
    pub grad_kinetics: [f64; 2],
}

/// Points handled per task; also fixes the summation order.
const CHUNK: usize = 256;

/// Everything needed to evaluate the likelihood and its gradient for a pair
/// of networks.
#[derive(Debug, Clone)]
pub struct PhysicsLoss {
    pub cfg: ColumnConfig,
    pub spec: MlpSpec,
    pub colloc: CollocationSet,
    pub noise: NoiseScales,
    pub observations: Option<ScaledObservations>,
    /// Per-term multipliers in [`Term::ALL`] order.
    pub weights: [f64; TERMS],
    inlet_targets: Vec<f64>,
    data_sets: Vec<(Net, Vec<ScaledPoint>, Vec<f64>)>,
    coef: Coefficients,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Net {
    C,
    S,
}

#[derive(Default)]
struct Partial {
    sq: [f64; TERMS],
    grad_c: Vec<f64>,
    grad_s: Vec<f64>,
    dk: [f64; 2],
}

impl Partial {
    fn absorb(&mut self, other: Partial) {
        for k in 0..TERMS {
            self.sq[k] += other.sq[k];
        }
        add_into(&mut self.grad_c, other.grad_c);
        add_into(&mut self.grad_s, other.grad_s);
        self.dk[0] += other.dk[0];
        self.dk[1] += other.dk[1];
    }
}

fn add_into(acc: &mut Vec<f64>, other: Vec<f64>) {
    if other.is_empty() {
        return;
    }
    if acc.is_empty() {
        *acc = other;
    } else {
        for (a, b) in acc.iter_mut().zip(other) {
            *a += b;
        }
    }
}

/// One boundary-type job: a point set, the network it reads, the stream
/// holding the misfit and a target per point.
struct Job<'a> {
    term: Term,
    net: Net,
    points: &'a [ScaledPoint],
    streams: Streams,
    block: usize,
    targets: Option<&'a [f64]>,
}

impl PhysicsLoss {
    pub fn new(
        cfg: &ColumnConfig,
        spec: MlpSpec,
        colloc: CollocationSet,
        noise: NoiseScales,
        dataset: Option<&Dataset>,
    ) -> Result<Self> {
        let cfg = cfg.validate()?;
        let noise = noise.validate()?;
        if colloc.interior.is_empty()
            || colloc.inlet.is_empty()
            || colloc.outlet.is_empty()
            || colloc.initial.is_empty()
        {
            return Err(Error::InvalidInput("empty collocation point set".into()));
        }
        let observations = match dataset {
            Some(ds) if ds.is_empty() => {
                return Err(Error::InvalidInput("empty dataset".into()));
            }
            Some(ds) => Some(ScaledObservations::from_dataset(ds, &cfg)?),
            None => None,
        };
        let inlet_targets = colloc
            .inlet
            .iter()
            .map(|p| cfg.inlet_concentration(p.t_hat * cfg.horizon) / cfg.inlet_peak)
            .collect();
        let data_sets = observations
            .iter()
            .flat_map(|obs| [(Net::C, &obs.btc), (Net::S, &obs.ret)])
            .filter(|(_, set)| !set.is_empty())
            .map(|(net, set)| {
                (
                    net,
                    set.iter().map(|o| o.0).collect(),
                    set.iter().map(|o| o.1).collect(),
                )
            })
            .collect();
        Ok(Self {
            cfg,
            spec,
            colloc,
            noise,
            observations,
            weights: [1.0; TERMS],
            inlet_targets,
            data_sets,
            coef: Coefficients::new(&cfg),
        })
    }

    /// Number of points behind every term (full sets, not a mini-batch).
    pub fn counts(&self) -> [usize; TERMS] {
        let n_int = self.colloc.interior.len();
        [
            n_int,
            n_int,
            self.colloc.inlet.len(),
            self.colloc.outlet.len(),
            self.colloc.initial.len(),
            self.colloc.initial.len(),
            self.observations.as_ref().map_or(0, ScaledObservations::len),
        ]
    }

    fn has_data(&self) -> bool {
        self.observations.is_some()
    }

    /// Likelihood terms and, when `with_grad`, gradients. `interior_subset`
    /// restricts the equation residuals to those interior points; their
    /// mean squares are then unbiased estimates of the full-set values.
    pub fn evaluate(
        &self,
        params_c: &[f64],
        params_s: &[f64],
        kinetics: Kinetics,
        interior_subset: Option<&[usize]>,
        with_grad: bool,
    ) -> Result<LossEval> {
        let n_params = self.spec.param_count();
        if params_c.len() != n_params || params_s.len() != n_params {
            return Err(Error::InvalidInput(format!(
                "expected {n_params} parameters per network"
            )));
        }
        let counts = self.counts();
        let sigma = self.noise.per_term();
        let interior_points: Vec<ScaledPoint>;
        let interior: &[ScaledPoint] = match interior_subset {
            Some(idx) => {
                interior_points = idx.iter().map(|&i| self.colloc.interior[i]).collect();
                &interior_points
            }
            None => &self.colloc.interior,
        };
        if interior.is_empty() {
            return Err(Error::InvalidInput("empty interior batch".into()));
        }
        let mut used = counts;
        used[0] = interior.len();
        used[1] = interior.len();
        // d(nll)/d(residual) = scale · residual
        let scale: [f64; TERMS] = std::array::from_fn(|k| {
            if used[k] == 0 {
                0.0
            } else {
                self.weights[k] * counts[k] as f64 / (used[k] as f64 * sigma[k] * sigma[k])
            }
        });

        let mut total = Partial::default();
        let interior_parts: Vec<Partial> = interior
            .par_chunks(CHUNK)
            .map_init(
                || (Tape::new(self.spec), Tape::new(self.spec)),
                |(tc, ts), chunk| {
                    self.interior_chunk(tc, ts, params_c, params_s, chunk, kinetics, &scale, with_grad)
                },
            )
            .collect();
        for p in interior_parts {
            total.absorb(p);
        }

        for job in self.boundary_jobs() {
            let parts: Vec<Partial> = job
                .points
                .par_chunks(CHUNK)
                .enumerate()
                .map_init(
                    || Tape::new(self.spec),
                    |tape, (i, chunk)| {
                        let params = match job.net {
                            Net::C => params_c,
                            Net::S => params_s,
                        };
                        let targets =
                            job.targets.map(|t| &t[i * CHUNK..i * CHUNK + chunk.len()]);
                        self.boundary_chunk(tape, params, chunk, &job, targets, &scale, with_grad)
                    },
                )
                .collect();
            for p in parts {
                total.absorb(p);
            }
        }

        let mse: [f64; TERMS] =
            std::array::from_fn(|k| if used[k] == 0 { 0.0 } else { total.sq[k] / used[k] as f64 });
        let total_nll = negative_log_likelihood(&mse, &self.noise, &counts, &self.weights);
        let breakdown = LossBreakdown::from_components(mse, self.has_data(), total_nll);
        if let Some(term) = breakdown.non_finite_term() {
            return Err(Error::Numerical(format!("non-finite loss term {term}")));
        }
        let mut grad_c = total.grad_c;
        let mut grad_s = total.grad_s;
        if with_grad {
            grad_c.resize(n_params, 0.0);
            grad_s.resize(n_params, 0.0);
            for (name, g) in [("aqueous", &grad_c), ("retained", &grad_s)] {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient of the {name} network at parameter {i}"
                    )));
                }
            }
        }
        Ok(LossEval {
            breakdown,
            grad_c,
            grad_s,
            grad_kinetics: total.dk,
        })
    }

    /// Total negative log-likelihood only.
    pub fn total_nll(&self, params_c: &[f64], params_s: &[f64], kinetics: Kinetics) -> Result<f64> {
        Ok(self
            .evaluate(params_c, params_s, kinetics, None, false)?
            .breakdown
            .total_nll)
    }

    fn boundary_jobs(&self) -> Vec<Job<'_>> {
        let mut jobs = vec![
            Job {
                term: Term::Inlet,
                net: Net::C,
                points: &self.colloc.inlet,
                streams: Streams::VALUE,
                block: 0,
                targets: Some(&self.inlet_targets),
            },
            Job {
                term: Term::Outlet,
                net: Net::C,
                points: &self.colloc.outlet,
                streams: Streams::WITH_DX,
                block: 1,
                targets: None,
            },
            Job {
                term: Term::InitC,
                net: Net::C,
                points: &self.colloc.initial,
                streams: Streams::VALUE,
                block: 0,
                targets: None,
            },
            Job {
                term: Term::InitS,
                net: Net::S,
                points: &self.colloc.initial,
                streams: Streams::VALUE,
                block: 0,
                targets: None,
            },
        ];
        for (net, points, targets) in &self.data_sets {
            jobs.push(Job {
                term: Term::Data,
                net: *net,
                points,
                streams: Streams::VALUE,
                block: 0,
                targets: Some(targets),
            });
        }
        jobs
    }

    #[allow(clippy::too_many_arguments)]
    fn interior_chunk(
        &self,
        tc: &mut Tape,
        ts: &mut Tape,
        params_c: &[f64],
        params_s: &[f64],
        chunk: &[ScaledPoint],
        kin: Kinetics,
        scale: &[f64; TERMS],
        with_grad: bool,
    ) -> Partial {
        let b = chunk.len();
        tc.forward(params_c, chunk, Streams::ALL);
        ts.forward(params_s, chunk, Streams::WITH_DT);
        let co = &self.coef;
        let (c, c_x, c_t, c_xx) = (tc.block(0), tc.block(1), tc.block(2), tc.block(3));
        let (s, s_t) = (ts.block(0), ts.block(1));
        let mut part = Partial::default();
        let mut adj_c = if with_grad { vec![0.0; 4 * b] } else { Vec::new() };
        let mut adj_s = if with_grad { vec![0.0; 2 * b] } else { Vec::new() };
        for i in 0..b {
            let r1 = co.storage_c * c_t[i] + co.storage_s * s_t[i] + co.advection * c_x[i]
                - co.dispersion * c_xx[i];
            let r2 = co.storage_s * s_t[i] - co.porosity * kin.attach * c[i] + kin.detach * s[i];
            part.sq[0] += r1 * r1;
            part.sq[1] += r2 * r2;
            if with_grad {
                let g1 = scale[0] * r1;
                let g2 = scale[1] * r2;
                adj_c[i] = -co.porosity * kin.attach * g2;
                adj_c[b + i] = co.advection * g1;
                adj_c[2 * b + i] = co.storage_c * g1;
                adj_c[3 * b + i] = -co.dispersion * g1;
                adj_s[i] = kin.detach * g2;
                adj_s[b + i] = co.storage_s * (g1 + g2);
                part.dk[0] -= g2 * co.porosity * c[i];
                part.dk[1] += g2 * s[i];
            }
        }
        if with_grad {
            let mut gc = vec![0.0; params_c.len()];
            let mut gs = vec![0.0; params_s.len()];
            tc.backward(params_c, &adj_c, &mut gc);
            ts.backward(params_s, &adj_s, &mut gs);
            part.grad_c = gc;
            part.grad_s = gs;
        }
        part
    }

    #[allow(clippy::too_many_arguments)]
    fn boundary_chunk(
        &self,
        tape: &mut Tape,
        params: &[f64],
        chunk: &[ScaledPoint],
        job: &Job<'_>,
        targets: Option<&[f64]>,
        scale: &[f64; TERMS],
        with_grad: bool,
    ) -> Partial {
        let b = chunk.len();
        tape.forward(params, chunk, job.streams);
        let out = tape.block(job.block);
        let k = job.term as usize;
        let mut part = Partial::default();
        let mut adj = if with_grad {
            vec![0.0; job.streams.count() * b]
        } else {
            Vec::new()
        };
        for i in 0..b {
            let r = out[i] - targets.map_or(0.0, |t| t[i]);
            part.sq[k] += r * r;
            if with_grad {
                adj[job.block * b + i] = scale[k] * r;
            }
        }
        if with_grad {
            let mut g = vec![0.0; params.len()];
            tape.backward(params, &adj, &mut g);
            match job.net {
                Net::C => part.grad_c = g,
                Net::S => part.grad_s = g,
            }
        }
        part
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collocation::{build_collocation_set_with, CollocationCounts};
    use crate::nn::{forward_with_derivatives, gradient_check, init_params};
    use crate::oracle::{Observation, ObservationKind};

    fn small_counts() -> CollocationCounts {
        CollocationCounts {
            interior: 600,
            inlet: 80,
            outlet: 70,
            initial: 60,
        }
    }

    fn problem(spec: MlpSpec, dataset: Option<&Dataset>) -> PhysicsLoss {
        let colloc = build_collocation_set_with(&small_counts(), 3).unwrap();
        PhysicsLoss::new(
            &ColumnConfig::default(),
            spec,
            colloc,
            NoisePreset::Balanced.scales(),
            dataset,
        )
        .unwrap()
    }

    fn bundle(u: f64, du_dx: f64, du_dt: f64, d2u_dx2: f64) -> DerivBundle {
        DerivBundle {
            u,
            du_dx,
            du_dt,
            d2u_dx2,
        }
    }

    #[test]
    fn zero_fields_satisfy_both_equations() {
        let cfg = ColumnConfig::default();
        let z = bundle(0.0, 0.0, 0.0, 0.0);
        let kin = Kinetics::from_config(&cfg);
        assert_eq!(pde_residuals(&z, &z, &cfg, kin).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn manufactured_kinetics_solution() {
        let cfg = ColumnConfig::default();
        let kin = Kinetics::from_config(&cfg);
        let c_star = 0.7;
        let amp = cfg.porosity * kin.attach * c_star / kin.detach;
        for t in [0.0, 1500.0, 4000.0, 9999.0] {
            let decay = (-kin.detach * t).exp();
            // ŝ(t̂) = amp (1 - e^{-k_d T t̂})  →  ∂ŝ/∂t̂ = amp k_d T e^{-k_d t}
            let s = bundle(amp * (1.0 - decay), 0.0, amp * kin.detach * cfg.horizon * decay, 0.0);
            let c = bundle(c_star, 0.0, 0.0, 0.0);
            let (r1, r2) = pde_residuals(&c, &s, &cfg, kin).unwrap();
            assert!(r2.abs() < 1e-18, "r2 = {r2}");
            let expected = cfg.porosity * kin.attach * c_star * decay;
            assert!((r1 - expected).abs() <= 1e-14 * expected, "{r1} vs {expected}");
        }
    }

    #[test]
    fn residual_coefficients() {
        let cfg = ColumnConfig::default();
        let kin = Kinetics {
            attach: 0.0,
            detach: 0.0,
        };
        let z = bundle(0.0, 0.0, 0.0, 0.0);
        let r = |c: DerivBundle| pde_residuals(&c, &z, &cfg, kin).unwrap().0;
        assert_eq!(r(bundle(0.0, 1.0, 0.0, 0.0)), cfg.darcy_flux / cfg.length);
        assert_eq!(r(bundle(0.0, 0.0, 1.0, 0.0)), cfg.porosity / cfg.horizon);
        assert_eq!(r(bundle(0.0, 0.0, 0.0, 1.0)), -cfg.dispersion());
    }

    #[test]
    fn negative_rates_rejected() {
        let z = bundle(0.0, 0.0, 0.0, 0.0);
        let kin = Kinetics {
            attach: -1.0,
            detach: 0.0,
        };
        assert!(pde_residuals(&z, &z, &ColumnConfig::default(), kin).is_err());
    }

    #[test]
    fn zero_networks_violate_only_the_inlet() {
        let spec = MlpSpec::default();
        let p = problem(spec, None);
        let zeros = vec![0.0; spec.param_count()];
        let cfg = ColumnConfig::default();
        let b = boundary_residuals(&spec, &zeros, &zeros, &p.colloc, &cfg).unwrap();
        assert_eq!((b.r_outlet, b.r_init_c, b.r_init_s), (0.0, 0.0, 0.0));
        let expected_inlet = p
            .colloc
            .inlet
            .iter()
            .map(|q| cfg.inlet_concentration(q.t_hat * cfg.horizon).powi(2))
            .sum::<f64>()
            / p.colloc.inlet.len() as f64;
        assert!(b.r_inlet > 0.0);
        assert!((b.r_inlet - expected_inlet).abs() <= 1e-15 * expected_inlet);

        let eval = p
            .evaluate(&zeros, &zeros, Kinetics::from_config(&cfg), None, true)
            .unwrap();
        let br = eval.breakdown;
        assert_eq!((br.r_pde_c, br.r_pde_s), (0.0, 0.0));
        assert_eq!(br.r_data, None);
        let sb = NoisePreset::Balanced.scales().sigma_b;
        let inlet_only = p.colloc.inlet.len() as f64 * br.r_inlet / (2.0 * sb * sb);
        assert!((br.total_nll - inlet_only).abs() <= 1e-12 * inlet_only);
    }

    /// Two hidden units reproduce the pulse as `σ(a) + σ(b) - 1`, which
    /// differs from the product `σ(a)σ(b)` by `(1-σ(a))(1-σ(b)) < e^-60`.
    fn inlet_net(cfg: &ColumnConfig) -> (MlpSpec, Vec<f64>) {
        let spec = MlpSpec::new(1, 2);
        let k = 0.02 * cfg.horizon;
        let p = vec![
            0.0, k, 0.0, -k, // hidden weights
            -0.02 * 500.0, 0.02 * 4100.0, // hidden biases
            1.0, 1.0, // output weights
            -1.0,
        ];
        (spec, p)
    }

    #[test]
    fn inlet_fitted_network_has_tiny_inlet_misfit() {
        let cfg = ColumnConfig::default();
        let (spec, pc) = inlet_net(&cfg);
        let colloc = build_collocation_set_with(&small_counts(), 9).unwrap();
        let max_err = (0..=1000)
            .map(|i| {
                let t_hat = i as f64 / 1000.0;
                let u = forward_with_derivatives(&spec, &pc, ScaledPoint::new(0.0, t_hat))
                    .unwrap()
                    .u;
                (u - cfg.inlet_concentration(t_hat * cfg.horizon)).abs()
            })
            .fold(0.0, f64::max);
        assert!(max_err <= 1e-3, "max error {max_err}");
        let zeros = vec![0.0; spec.param_count()];
        let b = boundary_residuals(&spec, &pc, &zeros, &colloc, &cfg).unwrap();
        assert!(b.r_inlet <= 1e-6, "r_inlet = {}", b.r_inlet);

        // the negated network misses by -2g where the zero network misses
        // by -g: doubling every deviation quadruples the misfit
        let zero_b = boundary_residuals(&spec, &zeros, &zeros, &colloc, &cfg).unwrap();
        let negated: Vec<f64> = pc
            .iter()
            .enumerate()
            .map(|(i, &w)| if i >= 6 { -w } else { w })
            .collect();
        let neg_b = boundary_residuals(&spec, &negated, &zeros, &colloc, &cfg).unwrap();
        assert!((neg_b.r_inlet - 4.0 * zero_b.r_inlet).abs() <= 1e-12 * neg_b.r_inlet);
    }

    #[test]
    fn nll_algebra() {
        let noise = NoisePreset::Balanced.scales();
        let counts = [15000, 15000, 1000, 1000, 1000, 1000, 0];
        let ones = [1.0; TERMS];
        assert_eq!(
            negative_log_likelihood(&[0.0; TERMS], &noise, &counts, &ones),
            0.0
        );
        let mut m = [0.0; TERMS];
        m[0] = 0.37;
        let nll = negative_log_likelihood(&m, &noise, &counts, &ones);
        assert_eq!(nll, 15000.0 * 0.37 / (2.0 * noise.sigma_f * noise.sigma_f));

        // unit MSEs: per-term weights N/(2σ²) under the balanced preset
        let w: Vec<f64> = (0..TERMS)
            .map(|k| {
                let mut e = [0.0; TERMS];
                e[k] = 1.0;
                negative_log_likelihood(&e, &noise, &[1; TERMS], &ones)
            })
            .collect();
        assert_eq!(w[0], w[1]);
        assert!((w[0] / w[2] / 2.5e7 - 1.0).abs() < 1e-9);
        assert!((w[6] / w[2] - 100.0).abs() < 1e-9);
        assert!(w[2..6].iter().all(|&x| x == w[2]));

        // σ × √2 halves the term
        let mut wider = noise;
        wider.sigma_b *= std::f64::consts::SQRT_2;
        let mut e = [0.0; TERMS];
        e[3] = 2.5;
        let a = negative_log_likelihood(&e, &noise, &counts, &ones);
        let b = negative_log_likelihood(&e, &wider, &counts, &ones);
        assert!((a - 2.0 * b).abs() <= 1e-12 * a);
    }

    fn dataset_from(rows: &[(ObservationKind, f64, f64)]) -> Dataset {
        Dataset {
            rows: rows
                .iter()
                .map(|&(kind, coord, value)| Observation {
                    kind,
                    coord,
                    value,
                    truth: value,
                })
                .collect(),
        }
    }

    #[test]
    fn self_generated_data_has_zero_misfit() {
        let spec = MlpSpec::new(2, 6);
        let cfg = ColumnConfig::default();
        let pc = init_params(&spec, 0.7, 1).unwrap().0;
        let ps = init_params(&spec, 0.7, 2).unwrap().0;
        let mut rows = Vec::new();
        for t in [1000.0, 5000.0, 10000.0] {
            let u = forward_with_derivatives(&spec, &pc, cfg.to_scaled(cfg.length, t).unwrap())
                .unwrap()
                .u;
            rows.push((ObservationKind::Btc, t, u * cfg.inlet_peak));
        }
        for x in [0.0, 0.5] {
            let u = forward_with_derivatives(&spec, &ps, cfg.to_scaled(x, cfg.horizon).unwrap())
                .unwrap()
                .u;
            rows.push((ObservationKind::Ret, x, u * cfg.inlet_peak));
        }
        let ds = dataset_from(&rows);
        assert!(data_misfit(&spec, &pc, &ps, &ds, &cfg).unwrap() < 1e-30);

        let zeros = vec![0.0; spec.param_count()];
        let one = dataset_from(&[(ObservationKind::Ret, 0.25, 0.03)]);
        let m = data_misfit(&spec, &zeros, &zeros, &one, &cfg).unwrap();
        assert!((m - 0.03f64.powi(2)).abs() < 1e-18);
    }

    #[test]
    fn out_of_domain_rows_rejected() {
        let spec = MlpSpec::new(1, 2);
        let zeros = vec![0.0; spec.param_count()];
        let cfg = ColumnConfig::default();
        let bad = dataset_from(&[(ObservationKind::Btc, 2.0 * cfg.horizon, 0.1)]);
        assert!(data_misfit(&spec, &zeros, &zeros, &bad, &cfg).is_err());
        let bad = dataset_from(&[(ObservationKind::Ret, -0.1, 0.1)]);
        assert!(data_misfit(&spec, &zeros, &zeros, &bad, &cfg).is_err());
        assert!(data_misfit(&spec, &zeros, &zeros, &Dataset::default(), &cfg).is_err());
    }

    fn random_state(spec: MlpSpec) -> (Vec<f64>, Vec<f64>) {
        (
            init_params(&spec, 0.6, 11).unwrap().0,
            init_params(&spec, 0.6, 12).unwrap().0,
        )
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let spec = MlpSpec::new(2, 8);
        let ds = dataset_from(&[
            (ObservationKind::Btc, 3000.0, 0.4),
            (ObservationKind::Btc, 7000.0, 0.2),
            (ObservationKind::Ret, 0.3, 0.9),
        ]);
        let p = problem(spec, Some(&ds));
        let (pc, ps) = random_state(spec);
        let kin = Kinetics {
            attach: 8e-4,
            detach: 1e-4,
        };
        let n = spec.param_count();
        let eval = p.evaluate(&pc, &ps, kin, None, true).unwrap();
        let mut all = pc.clone();
        all.extend_from_slice(&ps);
        let mut grad = eval.grad_c.clone();
        grad.extend_from_slice(&eval.grad_s);
        let value = |w: &[f64]| p.total_nll(&w[..n], &w[n..], kin).unwrap();
        let report = gradient_check(&all, value, &grad, 40, 1e-3, 5).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");

        // kinetics enter r2 linearly: central differences are exact
        for (i, h) in [(0, 1e-5), (1, 1e-5)] {
            let shift = |d: f64| {
                let mut k = kin;
                if i == 0 {
                    k.attach += d;
                } else {
                    k.detach += d;
                }
                p.total_nll(&pc, &ps, k).unwrap()
            };
            let fd = (shift(h) - shift(-h)) / (2.0 * h);
            let an = eval.grad_kinetics[i];
            assert!((fd - an).abs() <= 1e-6 * an.abs(), "k[{i}]: {fd} vs {an}");
        }
    }

    #[test]
    fn full_index_batch_equals_full_evaluation() {
        let spec = MlpSpec::new(2, 5);
        let p = problem(spec, None);
        let (pc, ps) = random_state(spec);
        let kin = Kinetics::from_config(&p.cfg);
        let all: Vec<usize> = (0..p.colloc.interior.len()).collect();
        let a = p.evaluate(&pc, &ps, kin, None, true).unwrap();
        let b = p.evaluate(&pc, &ps, kin, Some(&all), true).unwrap();
        assert_eq!(a.breakdown, b.breakdown);
        assert_eq!(a.grad_c, b.grad_c);
        assert_eq!(a.grad_s, b.grad_s);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let spec = MlpSpec::new(2, 5);
        let p = problem(spec, None);
        let (pc, ps) = random_state(spec);
        let kin = Kinetics::from_config(&p.cfg);
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| p.evaluate(&pc, &ps, kin, None, true).unwrap())
        };
        let (a, b) = (run(1), run(3));
        assert_eq!(a.breakdown, b.breakdown);
        assert_eq!(a.grad_c, b.grad_c);
        assert_eq!(a.grad_s, b.grad_s);
        assert_eq!(a.grad_kinetics, b.grad_kinetics);
    }

    #[test]
    fn masked_terms_drop_out() {
        let spec = MlpSpec::new(1, 4);
        let mut p = problem(spec, None);
        let (pc, ps) = random_state(spec);
        let kin = Kinetics::from_config(&p.cfg);
        p.weights = [0.0; TERMS];
        p.weights[Term::Inlet as usize] = 1.0;
        let e = p.evaluate(&pc, &ps, kin, None, true).unwrap();
        let sb = p.noise.sigma_b;
        let expected = p.colloc.inlet.len() as f64 * e.breakdown.r_inlet / (2.0 * sb * sb);
        assert!((e.breakdown.total_nll - expected).abs() <= 1e-12 * expected);
        assert!(e.grad_s.iter().all(|&g| g == 0.0));
        assert!(e.breakdown.r_pde_c > 0.0);
    }
}
