//! Latin hypercube interior points and boundary/initial point sets on the
//! unit square.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::domain::ScaledPoint;
use crate::error::{Error, Result};

/// `n` points in `[0,1)^d` with exactly one point per stratum
/// `[k/n, (k+1)/n)` along every axis. Jitter inside a stratum is drawn from
/// the open interval, so no coordinate lands on a stratum edge.
pub fn latin_hypercube(n: usize, d: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 || d == 0 {
        return Err(Error::InvalidInput(format!(
            "latin hypercube needs n >= 1 and d >= 1, got n = {n}, d = {d}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![vec![0.0; d]; n];
    let mut strata: Vec<usize> = (0..n).collect();
    for axis in 0..d {
        strata.shuffle(&mut rng);
        for (point, &k) in points.iter_mut().zip(&strata) {
            let jitter: f64 = rng.sample(Open01);
            point[axis] = (k as f64 + jitter) / n as f64;
        }
    }
    Ok(points)
}

/// True when every axis has exactly one coordinate in each of the `n`
/// strata.
pub fn is_stratified(points: &[Vec<f64>]) -> bool {
    let n = points.len();
    if n == 0 {
        return false;
    }
    let d = points[0].len();
    (0..d).all(|axis| {
        let mut seen = vec![false; n];
        points.iter().all(|p| {
            let x = p[axis];
            if !(0.0..1.0).contains(&x) {
                return false;
            }
            let k = ((x * n as f64) as usize).min(n - 1);
            !std::mem::replace(&mut seen[k], true)
        })
    })
}

/// Point budget of a collocation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollocationCounts {
    pub interior: usize,
    pub inlet: usize,
    pub outlet: usize,
    pub initial: usize,
}

impl Default for CollocationCounts {
    fn default() -> Self {
        Self {
            interior: 15_000,
            inlet: 1000,
            outlet: 1000,
            initial: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollocationSet {
    /// Strictly inside the unit square.
    pub interior: Vec<ScaledPoint>,
    /// `x̂ = 0`.
    pub inlet: Vec<ScaledPoint>,
    /// `x̂ = 1`.
    pub outlet: Vec<ScaledPoint>,
    /// `t̂ = 0`.
    pub initial: Vec<ScaledPoint>,
}

/// Default budget: 15000 interior points and 1000 each on the inlet, the
/// outlet and the initial line.
pub fn build_collocation_set(seed: u64) -> Result<CollocationSet> {
    build_collocation_set_with(&CollocationCounts::default(), seed)
}

pub fn build_collocation_set_with(counts: &CollocationCounts, seed: u64) -> Result<CollocationSet> {
    let interior = latin_hypercube(counts.interior, 2, seed)?
        .into_iter()
        .map(|p| ScaledPoint::new(p[0], p[1]))
        .collect();
    let line = |n: usize, stream: u64| -> Result<Vec<f64>> {
        Ok(latin_hypercube(n, 1, seed ^ (stream << 32))?
            .into_iter()
            .map(|p| p[0])
            .collect())
    };
    let inlet = line(counts.inlet, 1)?
        .into_iter()
        .map(|t| ScaledPoint::new(0.0, t))
        .collect();
    let outlet = line(counts.outlet, 2)?
        .into_iter()
        .map(|t| ScaledPoint::new(1.0, t))
        .collect();
    let initial = line(counts.initial, 3)?
        .into_iter()
        .map(|x| ScaledPoint::new(x, 0.0))
        .collect();
    Ok(CollocationSet {
        interior,
        inlet,
        outlet,
        initial,
    })
}

impl CollocationSet {
    pub fn counts(&self) -> CollocationCounts {
        CollocationCounts {
            interior: self.interior.len(),
            inlet: self.inlet.len(),
            outlet: self.outlet.len(),
            initial: self.initial.len(),
        }
    }

    /// Audit dump `x_hat,t_hat,role`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x_hat,t_hat,role\n");
        for (role, pts) in [
            ("interior", &self.interior),
            ("inlet", &self.inlet),
            ("outlet", &self.outlet),
            ("initial", &self.initial),
        ] {
            for p in pts {
                out.push_str(&format!(
                    "{},{},{role}\n",
                    crate::fmt_f64(p.x_hat),
                    crate::fmt_f64(p.t_hat)
                ));
            }
        }
        out
    }
}

/// Uniform subsample of `k` distinct indices out of `n`, in ascending order.
pub fn subsample_indices(n: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, k.min(n)).into_vec();
    idx.sort_unstable();
    idx
}
