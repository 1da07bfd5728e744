//! Closed-form advection-dispersion response of a semi-infinite column.
//!
//! Independent of the finite-difference solver: uses only `erfc` and a
//! Duhamel superposition of step responses for time-varying inlets.

/// exp(z²)·erfc(z), stable for large positive z.
fn erfcx(z: f64) -> f64 {
    if z < 25.0 {
        (z * z).exp() * libm::erfc(z)
    } else {
        let z2 = z * z;
        (1.0 - 0.5 / z2 + 0.75 / (z2 * z2) - 1.875 / (z2 * z2 * z2))
            / (z * std::f64::consts::PI.sqrt())
    }
}

/// Normalised concentration at depth `x` and time `t` after the inlet is
/// stepped from 0 to 1, for pore velocity `vel` and dispersion `disp`.
pub fn step_response(x: f64, t: f64, vel: f64, disp: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let root = 2.0 * (disp * t).sqrt();
    let z1 = (x - vel * t) / root;
    let z2 = (x + vel * t) / root;
    // exp(v x / D) erfc(z2) = exp(-z1²) erfcx(z2)
    0.5 * (libm::erfc(z1) + (-z1 * z1).exp() * erfcx(z2))
}

pub type StepResponse = fn(f64, f64, f64, f64) -> f64;

/// Response to an arbitrary inlet history `inlet(t)` with known derivative
/// `inlet_rate(t)`, by superposition of `step` responses on a uniform grid
/// of `n` midpoint cells over [0, t].
#[allow(clippy::too_many_arguments)]
pub fn pulse_response(
    step: StepResponse,
    x: f64,
    t: f64,
    vel: f64,
    disp: f64,
    inlet: impl Fn(f64) -> f64,
    inlet_rate: impl Fn(f64) -> f64,
    n: usize,
) -> f64 {
    let h = t / n as f64;
    let mut acc = inlet(0.0) * step(x, t, vel, disp);
    for k in 0..n {
        let tau = (k as f64 + 0.5) * h;
        acc += inlet_rate(tau) * step(x, t - tau, vel, disp) * h;
    }
    acc
}

/// Inlet pulse of the column problem normalised by its peak, and its rate.
pub fn pulse_shape(t: f64) -> f64 {
    let rise = 1.0 / (1.0 + (-0.02 * (t - 500.0)).exp());
    let fall = 1.0 / (1.0 + (-0.02 * (4100.0 - t)).exp());
    rise * fall
}

pub fn pulse_shape_rate(t: f64) -> f64 {
    let rise = 1.0 / (1.0 + (-0.02 * (t - 500.0)).exp());
    let fall = 1.0 / (1.0 + (-0.02 * (4100.0 - t)).exp());
    0.02 * rise * (1.0 - rise) * fall - 0.02 * fall * (1.0 - fall) * rise
}

/// Flux-averaged concentration `c - (D/V) ∂c/∂x` of the step response, the
/// quantity an effluent sampler collects.
pub fn step_response_flux(x: f64, t: f64, vel: f64, disp: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    let z1 = (x - vel * t) / (2.0 * (disp * t).sqrt());
    0.5 * libm::erfc(z1) + (disp / (std::f64::consts::PI * t)).sqrt() / vel * (-z1 * z1).exp()
}
