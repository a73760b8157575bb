//! Multi-zone web transport dynamics.
//!
//! State layout is the flat vector `[T_1..T_N, v_1..v_N]` (tensions in N,
//! roller surface velocities in m/s); controls are motor torques
//! `[u_1..u_N]` in N·m. Tension dynamics follow mass conservation across
//! each span with boundary tensions `T_0 = T_{N+1} = 0`; velocity dynamics
//! follow torque balance on each roller. The upstream (unwind) velocity
//! `v_0` is an exogenous signal, not a state.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Physical constants of the transport line.
///
/// `frictions` are viscous velocity-damping gains: the deceleration of
/// roller `i` includes `-(f_i / J_i) v_i`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PlantParams {
    /// Number of motorized rollers (and spans), >= 2.
    pub n: usize,
    /// Web stiffness EA in N.
    pub ea: f64,
    /// Span lengths L_i in m.
    pub span_lengths: Vec<f64>,
    /// Roller inertias J_i in kg·m².
    pub inertias: Vec<f64>,
    /// Viscous damping gains f_i in N·m·s/rad.
    pub frictions: Vec<f64>,
    /// Roller radii R_i in m.
    pub radii: Vec<f64>,
    /// Velocity noise intensities b_i in (m/s)/√s.
    pub noise_gains: Vec<f64>,
    /// Sampling period in s.
    pub dt: f64,
}

impl PlantParams {
    pub fn state_dim(&self) -> usize {
        2 * self.n
    }

    pub fn control_dim(&self) -> usize {
        self.n
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::invalid("n", "at least 2 rollers required"));
        }
        if !(self.ea > 0.0) {
            return Err(Error::invalid("ea", "must be strictly positive"));
        }
        if !(self.dt > 0.0) && self.dt != 0.0 {
            return Err(Error::invalid("dt", "must be non-negative and finite"));
        }
        for (name, values) in [
            ("span_lengths", &self.span_lengths),
            ("inertias", &self.inertias),
            ("frictions", &self.frictions),
            ("radii", &self.radii),
        ] {
            if values.len() != self.n {
                return Err(Error::DimensionMismatch {
                    context: "plant parameter vector",
                    expected: self.n,
                    actual: values.len(),
                });
            }
            if values.iter().any(|v| !(*v > 0.0)) {
                return Err(Error::invalid(name, "entries must be strictly positive"));
            }
        }
        if self.noise_gains.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "noise_gains",
                expected: self.n,
                actual: self.noise_gains.len(),
            });
        }
        if self.noise_gains.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("noise_gains", "entries must be finite and >= 0"));
        }
        Ok(())
    }

    /// Homogeneous n-roller line with the default desk-scale constants:
    /// EA = 2000 N, L = 1 m, J = 0.01 kg·m², f = 0.1, R = 0.05 m, no
    /// noise, Δt = 10 ms. Stable under explicit Euler at these values.
    pub fn default_line(n: usize) -> PlantParams {
        PlantParams {
            n,
            ea: 2000.0,
            span_lengths: vec![1.0; n],
            inertias: vec![0.01; n],
            frictions: vec![0.1; n],
            radii: vec![0.05; n],
            noise_gains: vec![0.0; n],
            dt: 0.01,
        }
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                context: "state",
                expected: self.state_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_control(&self, u: &DVector<f64>) -> Result<()> {
        if u.len() != self.control_dim() {
            return Err(Error::DimensionMismatch {
                context: "control",
                expected: self.control_dim(),
                actual: u.len(),
            });
        }
        Ok(())
    }
}

/// Control-free drift: tension flow plus torque balance without the motor
/// torque and noise terms. Boundary tensions `T_0 = T_{N+1} = 0`; `v_0` is
/// the supplied upstream velocity.
pub fn drift(x: &DVector<f64>, params: &PlantParams, upstream_velocity: f64) -> Result<DVector<f64>> {
    params.check_state(x)?;
    let n = params.n;
    let mut dx = DVector::zeros(2 * n);
    for i in 0..n {
        let t_i = x[i];
        let t_prev = if i == 0 { 0.0 } else { x[i - 1] };
        let v_i = x[n + i];
        let v_prev = if i == 0 { upstream_velocity } else { x[n + i - 1] };
        let l = params.span_lengths[i];
        dx[i] = params.ea / l * (v_i - v_prev) + (t_prev * v_prev - t_i * v_i) / l;

        let t_next = if i + 1 < n { x[i + 1] } else { 0.0 };
        let r = params.radii[i];
        let j = params.inertias[i];
        dx[n + i] = r * r / j * (t_next - t_i) - params.frictions[i] / j * v_i;
    }
    Ok(dx)
}

/// Deterministic one-step propagation `x + (drift(x) + G u) dt`. The input
/// map is the per-roller scalar `R_i / J_i` on the velocity states.
pub fn propagate(
    x: &DVector<f64>,
    u: &DVector<f64>,
    params: &PlantParams,
    upstream_velocity: f64,
) -> Result<DVector<f64>> {
    params.check_control(u)?;
    let n = params.n;
    let mut dx = drift(x, params, upstream_velocity)?;
    for i in 0..n {
        dx[n + i] += params.radii[i] / params.inertias[i] * u[i];
    }
    Ok(x + dx * params.dt)
}

/// Euler-Maruyama step: `propagate` plus `b_i √dt ξ_i` on each velocity
/// state. Bit-identical to `propagate` when all noise gains are zero.
pub fn step_stochastic<R: Rng>(
    x: &DVector<f64>,
    u: &DVector<f64>,
    params: &PlantParams,
    upstream_velocity: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let mut next = propagate(x, u, params, upstream_velocity)?;
    let n = params.n;
    let sqrt_dt = params.dt.sqrt();
    for i in 0..n {
        let b = params.noise_gains[i];
        if b != 0.0 {
            let xi: f64 = StandardNormal.sample(rng);
            next[n + i] += b * sqrt_dt * xi;
        }
    }
    Ok(next)
}

/// Equilibrium reference velocities from mass conservation:
/// `v_i = (EA - T_{i-1}) / (EA - T_i) · v_{i-1}` with `T_0 = 0` and `v_0`
/// the upstream velocity. Requires every tension strictly below EA.
pub fn reference_velocities(
    tensions_ref: &DVector<f64>,
    upstream_velocity: f64,
    params: &PlantParams,
) -> Result<DVector<f64>> {
    if tensions_ref.len() != params.n {
        return Err(Error::DimensionMismatch {
            context: "tensions_ref",
            expected: params.n,
            actual: tensions_ref.len(),
        });
    }
    let mut v = DVector::zeros(params.n);
    let mut v_prev = upstream_velocity;
    let mut t_prev = 0.0;
    for i in 0..params.n {
        let t_i = tensions_ref[i];
        if t_i >= params.ea {
            return Err(Error::SingularReference {
                tension: t_i,
                ea: params.ea,
            });
        }
        v[i] = (params.ea - t_prev) / (params.ea - t_i) * v_prev;
        v_prev = v[i];
        t_prev = t_i;
    }
    Ok(v)
}

/// Torques balancing the velocity drift at state `x`, so that
/// `dv_i/dt = 0` when the deterministic dynamics are applied.
pub fn equilibrium_torques(x: &DVector<f64>, params: &PlantParams) -> Result<DVector<f64>> {
    params.check_state(x)?;
    let n = params.n;
    let mut u = DVector::zeros(n);
    for i in 0..n {
        let t_i = x[i];
        let t_next = if i + 1 < n { x[i + 1] } else { 0.0 };
        let r = params.radii[i];
        u[i] = (params.frictions[i] * x[n + i] - r * r * (t_next - t_i)) / r;
    }
    Ok(u)
}
