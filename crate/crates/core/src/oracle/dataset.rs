//! Noisy synthetic observations drawn from a reference solve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::solver::{solve_forward, SolveOutput};
use crate::domain::ColumnConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ObservationKind {
    /// Outlet aqueous concentration; the coordinate is a time in s.
    Btc,
    /// Retained concentration at the final time; the coordinate is a position in m.
    Ret,
}

impl ObservationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObservationKind::Btc => "btc",
            ObservationKind::Ret => "ret",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Observation {
    pub kind: ObservationKind,
    pub coord: f64,
    pub value: f64,
    /// Noise-free reference value at the same coordinate.
    pub truth: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Dataset {
    pub rows: Vec<Observation>,
}

pub const DATASET_HEADER: &str = "kind,coord,value,truth";

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn count(&self, kind: ObservationKind) -> usize {
        self.rows.iter().filter(|r| r.kind == kind).count()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(DATASET_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(r.kind.as_str());
            for v in [r.coord, r.value, r.truth] {
                out.push(',');
                out.push_str(&crate::fmt_f64(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == DATASET_HEADER => {}
            other => {
                return Err(Error::Format(format!(
                    "dataset header must be `{DATASET_HEADER}`, found {:?}",
                    other.map(|(_, h)| h)
                )))
            }
        }
        let mut rows = Vec::new();
        for (idx, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(Error::Format(format!(
                    "line {}: expected 4 fields, found {}",
                    idx + 1,
                    fields.len()
                )));
            }
            let kind = match fields[0] {
                "btc" => ObservationKind::Btc,
                "ret" => ObservationKind::Ret,
                other => {
                    return Err(Error::Format(format!(
                        "line {}: unknown kind `{other}`",
                        idx + 1
                    )))
                }
            };
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: `{s}`: {e}", idx + 1)))
            };
            rows.push(Observation {
                kind,
                coord: num(fields[1])?,
                value: num(fields[2])?,
                truth: num(fields[3])?,
            });
        }
        Ok(Self { rows })
    }
}

/// Solves the column for `cfg` and samples a noisy dataset from it.
pub fn synthesize_dataset(
    cfg: &ColumnConfig,
    noise_std: f64,
    n_btc: usize,
    n_ret: usize,
    seed: u64,
) -> Result<Dataset> {
    let out = solve_forward(cfg, None)?;
    sample_dataset(&out, cfg, noise_std, n_btc, n_ret, seed)
}

/// Samples `n_btc` evenly spaced outlet times in (0, T] and `n_ret` evenly
/// spaced positions in [0, L], adding i.i.d. Gaussian noise.
pub fn sample_dataset(
    out: &SolveOutput,
    cfg: &ColumnConfig,
    noise_std: f64,
    n_btc: usize,
    n_ret: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "noise_std must be finite and >= 0, got {noise_std}"
        )));
    }
    let available_btc = out.breakthrough.len() - 1;
    if n_btc > available_btc {
        return Err(Error::InvalidInput(format!(
            "n_btc = {n_btc} exceeds the {available_btc} solver time steps"
        )));
    }
    if n_ret > out.retention_final.len() {
        return Err(Error::InvalidInput(format!(
            "n_ret = {n_ret} exceeds the {} solver grid nodes",
            out.retention_final.len()
        )));
    }
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n_btc + n_ret);
    for k in 0..n_btc {
        let t = cfg.horizon * (k + 1) as f64 / n_btc as f64;
        let truth = out.outlet_at(t);
        rows.push(Observation {
            kind: ObservationKind::Btc,
            coord: t,
            value: truth + noise.sample(&mut rng),
            truth,
        });
    }
    for k in 0..n_ret {
        let x = if n_ret == 1 {
            cfg.length
        } else {
            cfg.length * k as f64 / (n_ret - 1) as f64
        };
        let truth = out.retained_at(x);
        rows.push(Observation {
            kind: ObservationKind::Ret,
            coord: x,
            value: truth + noise.sample(&mut rng),
            truth,
        });
    }
    Ok(Dataset { rows })
}
