//! Backward-Euler finite-volume solver for the column problem.
//!
//! Nodes sit at `x_i = i·dx`. Node 0 carries the Dirichlet inlet value; every
//! other node owns a control volume (`dx` inside, `dx/2` at the outlet).
//! Advection is upwinded, dispersion uses the central second difference,
//! and the outlet face has zero dispersive flux. The retained phase obeys a
//! linear ODE, so its implicit update is substituted into the aqueous balance
//! and each step reduces to one tridiagonal solve plus an explicit `s` update.

use serde::Serialize;

use super::tridiag;
use crate::domain::ColumnConfig;
use crate::error::{Error, Result};

/// Aqueous and retained concentration over the grid at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FieldState {
    pub c: Vec<f64>,
    pub s: Vec<f64>,
    pub t: f64,
}

impl FieldState {
    fn zeros(n: usize) -> Self {
        Self {
            c: vec![0.0; n],
            s: vec![0.0; n],
            t: 0.0,
        }
    }

    /// Retained mass per unit column cross-section held by the conserved
    /// control volumes, kg/m².
    pub fn retained_mass(&self, cfg: &ColumnConfig) -> f64 {
        control_volume_sum(&self.s, grid_spacing(cfg))
    }

    /// Aqueous mass per unit cross-section held by the conserved control
    /// volumes, kg/m².
    pub fn aqueous_mass(&self, cfg: &ColumnConfig) -> f64 {
        cfg.porosity * control_volume_sum(&self.c, grid_spacing(cfg))
    }
}

/// Conservation bookkeeping of one solve, all in kg/m².
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MassAudit {
    /// Advective plus dispersive flux integrated over time across the face
    /// between the inlet node and the first control volume.
    pub injected: f64,
    pub stored_aqueous: f64,
    pub stored_retained: f64,
    /// Advective flux integrated over time at the outlet.
    pub outflow: f64,
    pub relative_closure_error: f64,
}

/// Where the inlet concentration comes from.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InletMode {
    /// The smooth injection pulse of [`ColumnConfig::inlet_concentration`].
    #[default]
    Pulse,
    /// Inlet held at `inlet_peak` for the whole run.
    Constant,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SolveOptions {
    /// Keep a [`FieldState`] every this many steps.
    pub snapshot_every: Option<usize>,
    pub inlet: InletMode,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveOutput {
    /// `(t, c at the outlet node)` for every step, starting at t = 0.
    pub breakthrough: Vec<(f64, f64)>,
    /// `(x, s)` over the grid at the final time.
    pub retention_final: Vec<(f64, f64)>,
    pub snapshots: Vec<FieldState>,
    pub final_state: FieldState,
    /// Total flux into the first control volume per step, kg/(m²·s).
    pub inlet_flux: Vec<f64>,
    pub time_step: f64,
    pub mass_audit: MassAudit,
}

pub fn grid_spacing(cfg: &ColumnConfig) -> f64 {
    cfg.length / (cfg.grid_nodes - 1) as f64
}

/// Node positions in m.
pub fn grid(cfg: &ColumnConfig) -> Vec<f64> {
    let dx = grid_spacing(cfg);
    (0..cfg.grid_nodes).map(|i| i as f64 * dx).collect()
}

fn control_volume_sum(values: &[f64], dx: f64) -> f64 {
    let n = values.len();
    let interior: f64 = values[1..n - 1].iter().sum();
    dx * (interior + 0.5 * values[n - 1])
}

/// Number of steps and the step actually used so that the last step lands
/// exactly on the horizon.
pub fn step_plan(cfg: &ColumnConfig) -> (usize, f64) {
    let steps = ((cfg.horizon / cfg.time_step) - 1e-9).ceil().max(1.0) as usize;
    (steps, cfg.horizon / steps as f64)
}

pub fn solve_forward(cfg: &ColumnConfig, snapshot_every: Option<usize>) -> Result<SolveOutput> {
    solve_with(
        cfg,
        &SolveOptions {
            snapshot_every,
            ..Default::default()
        },
    )
}

pub fn solve_with(cfg: &ColumnConfig, opts: &SolveOptions) -> Result<SolveOutput> {
    let cfg = cfg.validate()?;
    if opts.snapshot_every == Some(0) {
        return Err(Error::InvalidInput("snapshot_every must be >= 1".into()));
    }
    let n = cfg.grid_nodes;
    let dx = grid_spacing(&cfg);
    let (steps, dt) = step_plan(&cfg);
    let theta = cfg.porosity;
    let v = cfg.darcy_flux;
    let d = cfg.dispersion();
    let inlet = |t: f64| match opts.inlet {
        InletMode::Pulse => cfg.inlet_concentration(t),
        InletMode::Constant => cfg.inlet_peak,
    };

    // Implicit retained update: s_new = (s_old + dt θ k_a c_new) / (1 + dt k_d).
    let kin_den = 1.0 + dt * cfg.detach;
    let storage = theta / dt + theta * cfg.attach / kin_den;
    let adv = v / dx;
    let disp = d / (dx * dx);

    // Unknowns are nodes 1..n-1.
    let m = n - 1;
    let mut lower = vec![-(adv + disp); m];
    let mut diag = vec![storage + adv + 2.0 * disp; m];
    let mut upper = vec![-disp; m];
    lower[0] = 0.0;
    lower[m - 1] = -2.0 * (adv + disp);
    diag[m - 1] = storage + 2.0 * adv + 2.0 * disp;
    upper[m - 1] = 0.0;

    let mut state = FieldState::zeros(n);
    state.c[0] = inlet(0.0);
    let mut rhs = vec![0.0; m];
    let mut scratch = vec![0.0; m];
    let mut breakthrough = Vec::with_capacity(steps + 1);
    let mut inlet_flux = Vec::with_capacity(steps);
    let mut snapshots = Vec::new();
    breakthrough.push((0.0, state.c[n - 1]));
    if opts.snapshot_every.is_some() {
        snapshots.push(state.clone());
    }

    for step in 1..=steps {
        let t = step as f64 * dt;
        let c_in = inlet(t);
        for i in 0..m {
            let node = i + 1;
            rhs[i] = theta * state.c[node] / dt + cfg.detach * state.s[node] / kin_den;
        }
        rhs[0] += (adv + disp) * c_in;
        tridiag::solve_in_place(&lower, &diag, &upper, &mut rhs, &mut scratch).map_err(|row| {
            Error::Numerical(format!("singular tridiagonal system at step {step}, row {row}"))
        })?;
        state.c[0] = c_in;
        state.c[1..].copy_from_slice(&rhs);
        for (s, &c) in state.s.iter_mut().zip(&state.c) {
            *s = (*s + dt * theta * cfg.attach * c) / kin_den;
        }
        state.t = t;
        if let Some(node) = state
            .c
            .iter()
            .chain(&state.s)
            .position(|x| !x.is_finite())
        {
            return Err(Error::Numerical(format!(
                "non-finite concentration at step {step} (entry {node})"
            )));
        }
        inlet_flux.push(v * state.c[0] - d * (state.c[1] - state.c[0]) / dx);
        breakthrough.push((t, state.c[n - 1]));
        if let Some(every) = opts.snapshot_every {
            if step % every == 0 {
                snapshots.push(state.clone());
            }
        }
    }

    let x = grid(&cfg);
    let retention_final = x.iter().copied().zip(state.s.iter().copied()).collect();
    let mut out = SolveOutput {
        breakthrough,
        retention_final,
        snapshots,
        final_state: state,
        inlet_flux,
        time_step: dt,
        mass_audit: MassAudit {
            injected: 0.0,
            stored_aqueous: 0.0,
            stored_retained: 0.0,
            outflow: 0.0,
            relative_closure_error: 0.0,
        },
    };
    out.mass_audit = mass_balance(&out, &cfg)?;
    Ok(out)
}

/// Integrates boundary fluxes over time and the final fields over space.
///
/// Time integrals use the same rectangle rule as the implicit step, space
/// integrals the control volumes of the scheme, so a correct solve closes to
/// round-off.
pub fn mass_balance(output: &SolveOutput, cfg: &ColumnConfig) -> Result<MassAudit> {
    let n = cfg.grid_nodes;
    let fs = &output.final_state;
    if fs.c.len() != n || fs.s.len() != n || output.retention_final.len() != n {
        return Err(Error::InvalidInput(format!(
            "grid length mismatch: config has {n} nodes, output has {} / {} / {}",
            fs.c.len(),
            fs.s.len(),
            output.retention_final.len()
        )));
    }
    if output.breakthrough.len() != output.inlet_flux.len() + 1 {
        return Err(Error::InvalidInput(
            "breakthrough and inlet flux histories differ in length".into(),
        ));
    }
    let dt = output.time_step;
    let injected: f64 = output.inlet_flux.iter().map(|f| f * dt).sum();
    let outflow: f64 = output.breakthrough[1..]
        .iter()
        .map(|&(_, c)| cfg.darcy_flux * c * dt)
        .sum();
    let stored_aqueous = fs.aqueous_mass(cfg);
    let stored_retained = fs.retained_mass(cfg);
    let residual = injected - stored_aqueous - stored_retained - outflow;
    let relative_closure_error = if injected.abs() <= f64::MIN_POSITIVE {
        0.0
    } else {
        residual.abs() / injected.abs()
    };
    Ok(MassAudit {
        injected,
        stored_aqueous,
        stored_retained,
        outflow,
        relative_closure_error,
    })
}

impl SolveOutput {
    /// Breakthrough curve as CSV `t_s,c_kg_m3`.
    pub fn breakthrough_csv(&self) -> String {
        pairs_csv("t_s,c_kg_m3", &self.breakthrough)
    }

    /// Final retention profile as CSV `x_m,s_kg_m3`.
    pub fn retention_csv(&self) -> String {
        pairs_csv("x_m,s_kg_m3", &self.retention_final)
    }

    /// Outlet concentration at time `t`, linearly interpolated.
    pub fn outlet_at(&self, t: f64) -> f64 {
        interpolate(&self.breakthrough, t)
    }

    /// Final retained concentration at position `x`, linearly interpolated.
    pub fn retained_at(&self, x: f64) -> f64 {
        interpolate(&self.retention_final, x)
    }
}

fn pairs_csv(header: &str, rows: &[(f64, f64)]) -> String {
    let mut out = String::with_capacity(40 * (rows.len() + 1));
    out.push_str(header);
    out.push('\n');
    for &(a, b) in rows {
        out.push_str(&crate::fmt_f64(a));
        out.push(',');
        out.push_str(&crate::fmt_f64(b));
        out.push('\n');
    }
    out
}

/// Piecewise-linear interpolation on strictly increasing abscissae, clamped
/// at both ends.
pub fn interpolate(series: &[(f64, f64)], at: f64) -> f64 {
    let k = series.partition_point(|&(x, _)| x < at);
    if k == 0 {
        return series[0].1;
    }
    if k == series.len() {
        return series[k - 1].1;
    }
    let (x0, y0) = series[k - 1];
    let (x1, y1) = series[k];
    if x1 == at {
        return y1;
    }
    y0 + (y1 - y0) * (at - x0) / (x1 - x0)
}
