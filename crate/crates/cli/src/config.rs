//! JSON run configuration: column parameters at the top level, run options
//! in nested objects. Absent keys take their defaults; unknown keys are
//! rejected.

use std::path::Path;

use nanoflow_core::collocation::CollocationCounts;
use nanoflow_core::nn::MlpSpec;
use nanoflow_core::vi::TrainOptions;
use nanoflow_core::{ColumnConfig, Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisOptions {
    /// Standard deviation of the added observation noise, kg/m³.
    pub noise_std: f64,
    pub n_btc: usize,
    pub n_ret: usize,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            noise_std: 0.001,
            n_btc: 100,
            n_ret: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictionOptions {
    pub samples: usize,
    /// Evenly spaced output times over [0, T], ends included.
    pub n_times: usize,
    /// Evenly spaced retention positions over [0, L], ends included.
    pub n_positions: usize,
}

impl Default for PredictionOptions {
    fn default() -> Self {
        Self {
            samples: 50,
            n_times: 101,
            n_positions: 101,
        }
    }
}

/// Resolution of the finite-difference solution used as ground truth for
/// synthetic data and for scoring trained networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReferenceOptions {
    pub grid_nodes: usize,
    pub time_step: f64,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            grid_nodes: 1001,
            time_step: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkOptions {
    pub hidden_layers: usize,
    pub hidden_width: usize,
}

impl Default for NetworkOptions {
    fn default() -> Self {
        let s = MlpSpec::default();
        Self {
            hidden_layers: s.hidden_layers,
            hidden_width: s.hidden_width,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub column: ColumnConfig,
    pub network: NetworkOptions,
    pub collocation: CollocationCounts,
    pub training: TrainOptions,
    pub synthesis: SynthesisOptions,
    pub prediction: PredictionOptions,
    pub reference: ReferenceOptions,
}

const SECTIONS: [&str; 6] = [
    "network",
    "collocation",
    "training",
    "synthesis",
    "prediction",
    "reference",
];

fn section<T: for<'de> Deserialize<'de> + Default>(
    doc: &mut Map<String, Value>,
    key: &str,
) -> Result<T> {
    match doc.remove(key) {
        None => Ok(T::default()),
        Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(vec![format!("{key}: {e}")])),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| {
            Error::Config(vec![format!(
                "line {}, column {}: {e}",
                e.line(),
                e.column()
            )])
        })?;
        let Value::Object(mut doc) = value else {
            return Err(Error::Config(vec![
                "configuration must be a JSON object".into(),
            ]));
        };
        let network: NetworkOptions = section(&mut doc, SECTIONS[0])?;
        let collocation = section(&mut doc, SECTIONS[1])?;
        let training = section(&mut doc, SECTIONS[2])?;
        let synthesis = section(&mut doc, SECTIONS[3])?;
        let prediction = section(&mut doc, SECTIONS[4])?;
        let reference = section(&mut doc, SECTIONS[5])?;
        let column: ColumnConfig =
            serde_json::from_value(Value::Object(doc)).map_err(|e| Error::Config(vec![e.to_string()]))?;
        let cfg = Self {
            column,
            network,
            collocation,
            training,
            synthesis,
            prediction,
            reference,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(v) => Error::Config(
                v.into_iter()
                    .map(|m| format!("{}: {m}", path.display()))
                    .collect(),
            ),
            other => other,
        })
    }

    pub fn spec(&self) -> MlpSpec {
        MlpSpec {
            hidden_layers: self.network.hidden_layers,
            hidden_width: self.network.hidden_width,
        }
    }

    /// Column configuration at the reference resolution.
    pub fn reference_column(&self) -> ColumnConfig {
        ColumnConfig {
            grid_nodes: self.reference.grid_nodes,
            time_step: self.reference.time_step,
            ..self.column
        }
    }

    /// Reports every violated invariant.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let mut take = |r: Result<()>| {
            if let Err(e) = r {
                match e {
                    Error::Config(mut v) => bad.append(&mut v),
                    other => bad.push(other.to_string()),
                }
            }
        };
        take(self.column.validate().map(|_| ()));
        take(self.reference_column().validate().map(|_| ()));
        take(self.training.validate().map(|_| ()));
        take(self.training.noise_scales().validate().map(|_| ()));
        let mut extra = Vec::new();
        if self.network.hidden_layers == 0 || self.network.hidden_width == 0 {
            extra.push("network: hidden_layers and hidden_width must be >= 1".to_string());
        }
        let c = &self.collocation;
        if c.interior == 0 || c.inlet == 0 || c.outlet == 0 || c.initial == 0 {
            extra.push("collocation: every point count must be >= 1".to_string());
        }
        if !(self.synthesis.noise_std >= 0.0 && self.synthesis.noise_std.is_finite()) {
            extra.push(format!(
                "synthesis: noise_std must be >= 0, got {}",
                self.synthesis.noise_std
            ));
        }
        if self.synthesis.n_btc + self.synthesis.n_ret == 0 {
            extra.push("synthesis: at least one observation is required".to_string());
        }
        let p = &self.prediction;
        if p.samples == 0 || p.n_times < 2 || p.n_positions < 2 {
            extra.push(
                "prediction: samples must be >= 1, n_times and n_positions >= 2".to_string(),
            );
        }
        bad.extend(extra);
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad))
        }
    }

    pub fn output_times(&self) -> Vec<f64> {
        linspace(self.column.horizon, self.prediction.n_times)
    }

    pub fn output_positions(&self) -> Vec<f64> {
        linspace(self.column.length, self.prediction.n_positions)
    }
}

fn linspace(end: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| {
            if k + 1 == n {
                end
            } else {
                end * k as f64 / (n - 1) as f64
            }
        })
        .collect()
}
