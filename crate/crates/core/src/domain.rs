//! Physical problem definition for a saturated 1-D sand column.
//!
//! Aqueous concentration `c` and retained concentration `s` obey
//!
//! ```text
//! θ ∂c/∂t + ∂s/∂t = -v ∂c/∂x + D ∂²c/∂x²,   D = D_e + α_L v
//! ∂s/∂t = θ k_a c - k_d s
//! ```
//!
//! with a smooth injection pulse at the inlet, zero dispersive flux at the
//! outlet and an initially clean column.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rate of both inlet sigmoids, s⁻¹.
const PULSE_RATE: f64 = 0.02;
/// Time at which the rising inlet sigmoid is half open, s.
const PULSE_ON: f64 = 500.0;
/// Time at which the falling inlet sigmoid is half closed, s.
const PULSE_OFF: f64 = 4100.0;

/// All physical, discretization and schedule parameters of the column.
///
/// Field names are the JSON keys of the configuration document.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ColumnConfig {
    /// θ, dimensionless.
    pub porosity: f64,
    /// D_e, m²/s.
    pub molecular_dispersion: f64,
    /// α_L, m.
    pub dispersivity: f64,
    /// Darcy flux v, m/s. Pore velocity is v/θ.
    pub darcy_flux: f64,
    /// k_a, 1/s.
    pub attach: f64,
    /// k_d, 1/s.
    pub detach: f64,
    /// Column length L, m.
    pub length: f64,
    /// Simulated horizon T, s.
    pub horizon: f64,
    /// Peak inlet concentration c0, kg/m³.
    pub inlet_peak: f64,
    /// Number of finite-difference nodes, including both ends.
    pub grid_nodes: usize,
    /// Finite-difference time step, s.
    pub time_step: f64,
}

impl Default for ColumnConfig {
    fn default() -> Self {
        Self {
            porosity: 0.3,
            molecular_dispersion: 1e-9,
            dispersivity: 0.01,
            darcy_flux: 2e-4,
            attach: 8e-4,
            detach: 1e-4,
            length: 1.0,
            horizon: 10_000.0,
            inlet_peak: 1.0,
            grid_nodes: 201,
            time_step: 10.0,
        }
    }
}

impl ColumnConfig {
    /// Effective dispersion D = D_e + α_L v, m²/s.
    pub fn dispersion(&self) -> f64 {
        self.molecular_dispersion + self.dispersivity * self.darcy_flux
    }

    /// Interstitial (pore) velocity v/θ, m/s.
    pub fn pore_velocity(&self) -> f64 {
        self.darcy_flux / self.porosity
    }

    /// Checks every invariant and reports all violations at once.
    pub fn validate(&self) -> Result<Self> {
        let mut violations = Vec::new();
        let reals = [
            ("porosity", self.porosity),
            ("molecular_dispersion", self.molecular_dispersion),
            ("dispersivity", self.dispersivity),
            ("darcy_flux", self.darcy_flux),
            ("attach", self.attach),
            ("detach", self.detach),
            ("length", self.length),
            ("horizon", self.horizon),
            ("inlet_peak", self.inlet_peak),
            ("time_step", self.time_step),
        ];
        for (name, value) in reals {
            if !value.is_finite() {
                violations.push(format!("{name} must be finite, got {value}"));
            }
        }
        if !(self.porosity > 0.0 && self.porosity < 1.0) {
            violations.push(format!("porosity must lie in (0, 1), got {}", self.porosity));
        }
        for (name, value) in [
            ("molecular_dispersion", self.molecular_dispersion),
            ("dispersivity", self.dispersivity),
            ("darcy_flux", self.darcy_flux),
            ("attach", self.attach),
            ("detach", self.detach),
        ] {
            if value < 0.0 {
                violations.push(format!("{name} must be >= 0, got {value}"));
            }
        }
        for (name, value) in [
            ("length", self.length),
            ("horizon", self.horizon),
            ("inlet_peak", self.inlet_peak),
            ("time_step", self.time_step),
        ] {
            if value.is_nan() || value <= 0.0 {
                violations.push(format!("{name} must be > 0, got {value}"));
            }
        }
        if self.grid_nodes < 3 {
            violations.push(format!("grid_nodes must be >= 3, got {}", self.grid_nodes));
        }
        let d = self.dispersion();
        if d.is_nan() || d <= 0.0 {
            violations.push("effective dispersion must be positive".to_string());
        }
        if violations.is_empty() {
            Ok(*self)
        } else {
            Err(Error::Config(violations))
        }
    }

    /// Injected aqueous concentration at the inlet at time `t` (s).
    ///
    /// A rising sigmoid centred on 500 s times a falling one centred on
    /// 4100 s, scaled by `inlet_peak`.
    pub fn inlet_concentration(&self, t: f64) -> f64 {
        self.inlet_peak * inlet_shape(t)
    }

    /// Maps physical coordinates onto the unit square.
    pub fn to_scaled(&self, x: f64, t: f64) -> Result<ScaledPoint> {
        if !(0.0..=self.length).contains(&x) {
            return Err(Error::OutOfRange(format!(
                "x = {x} m outside [0, {}]",
                self.length
            )));
        }
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::OutOfRange(format!(
                "t = {t} s outside [0, {}]",
                self.horizon
            )));
        }
        Ok(ScaledPoint {
            x_hat: x / self.length,
            t_hat: t / self.horizon,
        })
    }

    /// Maps a point of the unit square back to (x in m, t in s).
    pub fn to_physical(&self, p: ScaledPoint) -> Result<(f64, f64)> {
        p.check()?;
        Ok((p.x_hat * self.length, p.t_hat * self.horizon))
    }
}

/// Inlet schedule normalised by the peak concentration.
pub fn inlet_shape(t: f64) -> f64 {
    logistic(PULSE_RATE * (t - PULSE_ON)) * logistic(PULSE_RATE * (PULSE_OFF - t))
}

pub(crate) fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// A space-time point in nondimensional coordinates x/L, t/T.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaledPoint {
    pub x_hat: f64,
    pub t_hat: f64,
}

impl ScaledPoint {
    pub fn new(x_hat: f64, t_hat: f64) -> Self {
        Self { x_hat, t_hat }
    }

    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.x_hat) || !(0.0..=1.0).contains(&self.t_hat) {
            return Err(Error::OutOfRange(format!(
                "scaled point ({}, {}) outside the unit square",
                self.x_hat, self.t_hat
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn messages(err: Error) -> Vec<String> {
        match err {
            Error::Config(v) => v,
            other => panic!("expected config error, got {other}"),
        }
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = ColumnConfig::default();
        assert_eq!(cfg.validate().unwrap(), cfg);
    }

    #[test]
    fn porosity_out_of_bounds_is_named() {
        let cfg = ColumnConfig {
            porosity: 1.2,
            ..Default::default()
        };
        let msgs = messages(cfg.validate().unwrap_err());
        assert_eq!(msgs.len(), 1);
        assert!(msgs[0].contains("porosity"));
    }

    #[test]
    fn zero_dispersion_rejected() {
        let cfg = ColumnConfig {
            molecular_dispersion: 0.0,
            dispersivity: 0.0,
            ..Default::default()
        };
        let msgs = messages(cfg.validate().unwrap_err());
        assert!(msgs.iter().any(|m| m == "effective dispersion must be positive"));
    }

    #[test]
    fn every_violation_is_reported() {
        let cfg = ColumnConfig {
            porosity: 0.0,
            attach: -1.0,
            horizon: f64::NAN,
            grid_nodes: 1,
            ..Default::default()
        };
        let msgs = messages(cfg.validate().unwrap_err());
        for field in ["porosity", "attach", "horizon", "grid_nodes"] {
            assert!(msgs.iter().any(|m| m.contains(field)), "{field} missing in {msgs:?}");
        }
        assert!(msgs.iter().any(|m| m.contains("finite")));
    }

    #[test]
    fn inlet_reference_values() {
        let cfg = ColumnConfig::default();
        // e^{-36} ≈ 2.3e-16 per factor at the plateau centre
        assert!((1.0 - cfg.inlet_concentration(2300.0)).abs() < 1e-15);
        assert!((cfg.inlet_concentration(500.0) - 0.5).abs() < 1e-15);
        let expected_t0 = 1.0 / (1.0 + 10f64.exp());
        assert!((cfg.inlet_concentration(0.0) / expected_t0 - 1.0).abs() < 1e-12);
        assert!((cfg.inlet_concentration(0.0) - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn inlet_scales_with_peak() {
        let cfg = ColumnConfig {
            inlet_peak: 3.0,
            ..Default::default()
        };
        assert!((cfg.inlet_concentration(2300.0) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn inlet_is_unimodal_and_bounded() {
        let cfg = ColumnConfig::default();
        let mut prev = cfg.inlet_concentration(0.0);
        let mut t = 0.0;
        while t <= cfg.horizon {
            let c = cfg.inlet_concentration(t);
            assert!(c >= 0.0 && c <= cfg.inlet_peak);
            // plateau values differ from c0 only in the last ulps
            let slack = 4.0 * f64::EPSILON;
            if t <= 2300.0 {
                assert!(c >= prev - slack, "not nondecreasing at t={t}");
            } else {
                assert!(c <= prev + slack, "not nonincreasing at t={t}");
            }
            prev = c;
            t += 1.0;
        }
    }

    #[test]
    fn scaling_endpoints_and_inverse() {
        let cfg = ColumnConfig::default();
        let p = cfg.to_scaled(cfg.length, cfg.horizon).unwrap();
        assert_eq!((p.x_hat, p.t_hat), (1.0, 1.0));
        let (x, t) = cfg.to_physical(ScaledPoint::new(0.5, 0.5)).unwrap();
        assert_eq!((x, t), (0.5, 5000.0));
    }

    #[test]
    fn scaling_rejects_out_of_range() {
        let cfg = ColumnConfig::default();
        assert!(cfg.to_scaled(-0.1, 0.0).is_err());
        assert!(cfg.to_scaled(0.5, 10_001.0).is_err());
        assert!(cfg.to_physical(ScaledPoint::new(1.5, 0.0)).is_err());
    }

    #[test]
    fn unknown_json_key_rejected() {
        let err = serde_json::from_str::<ColumnConfig>(r#"{"porosty": 0.3}"#).unwrap_err();
        assert!(err.to_string().contains("porosty"));
        let cfg: ColumnConfig = serde_json::from_str(r#"{"porosity": 0.35}"#).unwrap();
        assert_eq!(cfg.porosity, 0.35);
        assert_eq!(cfg.horizon, 10_000.0);
    }
}
