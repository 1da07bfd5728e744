use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::engine::{Streams, Tape};
use super::MlpSpec;
use crate::domain::ScaledPoint;
use crate::error::{Error, Result};

/// Network output at one point with its input derivatives in scaled
/// coordinates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DerivBundle {
    pub u: f64,
    pub du_dx: f64,
    pub du_dt: f64,
    pub d2u_dx2: f64,
}

impl DerivBundle {
    fn is_finite(&self) -> bool {
        self.u.is_finite()
            && self.du_dx.is_finite()
            && self.du_dt.is_finite()
            && self.d2u_dx2.is_finite()
    }
}

fn bundles_from_tape(tape: &Tape) -> Vec<DerivBundle> {
    let s = tape.streams();
    let (vx, vt, vxx) = (
        s.dx_block().map(|k| tape.block(k)),
        s.dt_block().map(|k| tape.block(k)),
        s.dxx_block().map(|k| tape.block(k)),
    );
    tape.value()
        .iter()
        .enumerate()
        .map(|(i, &u)| DerivBundle {
            u,
            du_dx: vx.map_or(0.0, |v| v[i]),
            du_dt: vt.map_or(0.0, |v| v[i]),
            d2u_dx2: vxx.map_or(0.0, |v| v[i]),
        })
        .collect()
}

fn check_point(p: &ScaledPoint) -> Result<()> {
    p.check()
}

/// Value, first derivatives and `∂²u/∂x̂²` at one point.
pub fn forward_with_derivatives(
    spec: &MlpSpec,
    params: &[f64],
    point: ScaledPoint,
) -> Result<DerivBundle> {
    check_point(&point)?;
    if params.len() != spec.param_count() {
        return Err(Error::InvalidInput(format!(
            "expected {} parameters, got {}",
            spec.param_count(),
            params.len()
        )));
    }
    let mut tape = Tape::new(*spec);
    tape.forward(params, &[point], Streams::ALL);
    let bundle = bundles_from_tape(&tape)[0];
    if !bundle.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite network output at ({}, {}): {bundle:?}",
            point.x_hat, point.t_hat
        )));
    }
    Ok(bundle)
}

/// A scalar loss over the derivative bundles of a point batch.
pub trait BundleLoss {
    /// Loss value and its partial derivative with respect to every field of
    /// every bundle (same order as the input).
    fn evaluate(&self, bundles: &[DerivBundle]) -> (f64, Vec<DerivBundle>);
}

impl<F> BundleLoss for F
where
    F: Fn(&[DerivBundle]) -> (f64, Vec<DerivBundle>),
{
    fn evaluate(&self, bundles: &[DerivBundle]) -> (f64, Vec<DerivBundle>) {
        self(bundles)
    }
}

/// Loss value and exact gradient with respect to every network parameter.
pub fn loss_param_gradient(
    spec: &MlpSpec,
    params: &[f64],
    points: &[ScaledPoint],
    loss: &impl BundleLoss,
) -> Result<(f64, Vec<f64>)> {
    for p in points {
        check_point(p)?;
    }
    let mut tape = Tape::new(*spec);
    tape.forward(params, points, Streams::ALL);
    let bundles = bundles_from_tape(&tape);
    let (value, adj) = loss.evaluate(&bundles);
    if adj.len() != bundles.len() {
        return Err(Error::InvalidInput(format!(
            "loss returned {} adjoints for {} bundles",
            adj.len(),
            bundles.len()
        )));
    }
    let n = points.len();
    let mut flat = vec![0.0; 4 * n];
    for (i, a) in adj.iter().enumerate() {
        flat[i] = a.u;
        flat[n + i] = a.du_dx;
        flat[2 * n + i] = a.du_dt;
        flat[3 * n + i] = a.d2u_dx2;
    }
    let mut grad = vec![0.0; params.len()];
    tape.backward(params, &flat, &mut grad);
    if let Some(idx) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite gradient at parameter {idx}"
        )));
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub probes: usize,
}

/// Compares `grad` against fourth-order central differences of `value` on
/// `n_probes` random coordinates. The wide stencil tolerates a larger `h`,
/// which keeps cancellation error small when `value` is large.
///
/// The relative error of a coordinate is `|a - fd| / max(|a|, |fd|, floor)`,
/// where `floor` is `1e-8` times the largest analytic gradient magnitude, so
/// that coordinates whose gradient vanishes to round-off do not dominate.
pub fn gradient_check(
    params: &[f64],
    value: impl Fn(&[f64]) -> f64,
    grad: &[f64],
    n_probes: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidInput(format!("step h must be > 0, got {h}")));
    }
    if params.is_empty() || grad.len() != params.len() {
        return Err(Error::InvalidInput("gradient length mismatch".into()));
    }
    let scale = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = (1e-8 * scale).max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        analytic: 0.0,
        finite_difference: 0.0,
        probes: n_probes,
    };
    for _ in 0..n_probes {
        let i = rng.random_range(0..params.len());
        let mut at = |k: f64| {
            work[i] = params[i] + k * h;
            value(&work)
        };
        let fd = (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * h);
        work[i] = params[i];
        let a = grad[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
        if rel > report.max_rel_error || !rel.is_finite() {
            report = GradCheckReport {
                max_rel_error: rel,
                worst_coordinate: i,
                analytic: a,
                finite_difference: fd,
                probes: n_probes,
            };
        }
    }
    Ok(report)
}
