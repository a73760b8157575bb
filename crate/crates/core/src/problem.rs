//! The roll-to-roll tracking problem: stage residual, hard box
//! constraints, soft tension bands, per-window references, and the LQR
//! baseline synthesis.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::bundle::{ProblemDims, ProblemFunctions};
use crate::error::{Error, Result};
use crate::plant::{self, PlantParams};

/// Diagonal residual weights; entries are the diagonal values, one per
/// span/roller.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Weights {
    pub q_tension: Vec<f64>,
    pub q_velocity: Vec<f64>,
    pub r_torque: Vec<f64>,
    pub s_rate: Vec<f64>,
}

impl Weights {
    /// Default tracking weights for an n-span line: Q = diag(100·I, 10·I),
    /// R = I, S = 0.1·I.
    pub fn default_line(n: usize) -> Weights {
        Weights {
            q_tension: vec![100.0; n],
            q_velocity: vec![10.0; n],
            r_torque: vec![1.0; n],
            s_rate: vec![0.1; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        for (name, w) in [
            ("q_tension", &self.q_tension),
            ("q_velocity", &self.q_velocity),
            ("r_torque", &self.r_torque),
            ("s_rate", &self.s_rate),
        ] {
            if w.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "weights",
                    expected: n,
                    actual: w.len(),
                });
            }
            if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::invalid(name, "entries must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// Hard box bounds applied uniformly to every span/roller.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct Bounds {
    pub tension_min: f64,
    pub tension_max: f64,
    pub velocity_min: f64,
    pub velocity_max: f64,
    pub torque_abs: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds {
            tension_min: 1.0,
            tension_max: 60.0,
            velocity_min: 0.0,
            velocity_max: 1.0,
            torque_abs: 30.0,
        }
    }
}

impl Bounds {
    pub fn validate(&self) -> Result<()> {
        if !(self.tension_min < self.tension_max) {
            return Err(Error::invalid("tension bounds", "require min < max"));
        }
        if !(self.velocity_min < self.velocity_max) {
            return Err(Error::invalid("velocity bounds", "require min < max"));
        }
        if !(self.torque_abs > 0.0) {
            return Err(Error::invalid("torque_abs", "must be > 0"));
        }
        Ok(())
    }
}

/// Asymmetric soft tension band: over-tension (class 0) penalizes
/// `T > upper`, under-tension (class 1) penalizes `T < lower`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SoftBand {
    pub lower: f64,
    pub upper: f64,
}

impl Default for SoftBand {
    fn default() -> Self {
        SoftBand {
            lower: 5.0,
            upper: 50.0,
        }
    }
}

impl SoftBand {
    pub fn validate(&self) -> Result<()> {
        if !(self.lower < self.upper) {
            return Err(Error::invalid("soft band", "require lower < upper"));
        }
        Ok(())
    }
}

/// One receding-horizon window of the tracking problem. References,
/// upstream velocities, and the previous-control sequence are frozen for
/// the duration of one solve so every sampled function is a pure
/// per-timestep map.
#[derive(Debug, Clone)]
pub struct R2RProblem {
    pub plant: PlantParams,
    pub weights: Weights,
    pub bounds: Bounds,
    pub band: SoftBand,
    /// Reference states per timestep: `[T^r; v^r]`.
    pub x_refs: Vec<DVector<f64>>,
    /// Equilibrium torques at the reference states.
    pub u_refs: Vec<DVector<f64>>,
    /// `u_{k-1}` for the rate penalty; entry 0 is the last applied control.
    pub u_prevs: Vec<DVector<f64>>,
    /// Upstream (unwinder) velocity per timestep.
    pub upstreams: Vec<f64>,
    dims: ProblemDims,
}

impl R2RProblem {
    /// Build the window from per-timestep tension references and upstream
    /// velocities. Reference velocities follow the mass-conserving chain
    /// and reference torques hold the reference state stationary.
    pub fn new(
        plant: PlantParams,
        weights: Weights,
        bounds: Bounds,
        band: SoftBand,
        tension_refs: Vec<DVector<f64>>,
        upstreams: Vec<f64>,
        u_prevs: Vec<DVector<f64>>,
    ) -> Result<Self> {
        plant.validate()?;
        let n = plant.n;
        weights.validate(n)?;
        bounds.validate()?;
        band.validate()?;
        let h = tension_refs.len();
        if h == 0 {
            return Err(Error::invalid("tension_refs", "empty horizon"));
        }
        if upstreams.len() != h || u_prevs.len() != h {
            return Err(Error::DimensionMismatch {
                context: "reference window horizon",
                expected: h,
                actual: upstreams.len().min(u_prevs.len()),
            });
        }
        let mut x_refs = Vec::with_capacity(h);
        let mut u_refs = Vec::with_capacity(h);
        for (t_ref, &v0) in tension_refs.iter().zip(&upstreams) {
            let v_ref = plant::reference_velocities(t_ref, v0, &plant)?;
            let mut x = DVector::zeros(2 * n);
            x.rows_mut(0, n).copy_from(t_ref);
            x.rows_mut(n, n).copy_from(&v_ref);
            u_refs.push(plant::equilibrium_torques(&x, &plant)?);
            x_refs.push(x);
        }
        for u in &u_prevs {
            if u.len() != n {
                return Err(Error::DimensionMismatch {
                    context: "u_prevs",
                    expected: n,
                    actual: u.len(),
                });
            }
        }
        let dims = ProblemDims {
            n_x: 2 * n,
            n_u: n,
            n_r: 4 * n,
            n_hard: 6 * n,
            n_soft: vec![n, n],
        };
        Ok(R2RProblem {
            plant,
            weights,
            bounds,
            band,
            x_refs,
            u_refs,
            u_prevs,
            upstreams,
            dims,
        })
    }

    pub fn horizon(&self) -> usize {
        self.x_refs.len()
    }

    fn upstream_at(&self, k: usize) -> f64 {
        self.upstreams[k.min(self.upstreams.len() - 1)]
    }

    fn ref_at(&self, k: usize) -> (&DVector<f64>, &DVector<f64>, &DVector<f64>) {
        let i = k.min(self.x_refs.len() - 1);
        (&self.x_refs[i], &self.u_refs[i], &self.u_prevs[i])
    }
}

impl ProblemFunctions for R2RProblem {
    fn dims(&self) -> &ProblemDims {
        &self.dims
    }

    fn dynamics(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        plant::propagate(x, u, &self.plant, self.upstream_at(k))
            .expect("dimensions validated at construction")
    }

    fn residual(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = self.plant.n;
        let (x_r, u_r, u_prev) = self.ref_at(k);
        let mut r = DVector::zeros(4 * n);
        for i in 0..n {
            r[i] = self.weights.q_tension[i].sqrt() * (x[i] - x_r[i]);
            r[n + i] = self.weights.q_velocity[i].sqrt() * (x[n + i] - x_r[n + i]);
            r[2 * n + i] = self.weights.r_torque[i].sqrt() * (u[i] - u_r[i]);
            r[3 * n + i] = self.weights.s_rate[i].sqrt() * (u[i] - u_prev[i]);
        }
        r
    }

    fn hard_constraints(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let n = self.plant.n;
        let b = &self.bounds;
        let mut c = DVector::zeros(6 * n);
        for i in 0..n {
            c[i] = x[i] - b.tension_min;
            c[n + i] = b.tension_max - x[i];
            c[2 * n + i] = x[n + i] - b.velocity_min;
            c[3 * n + i] = b.velocity_max - x[n + i];
            c[4 * n + i] = u[i] + b.torque_abs;
            c[5 * n + i] = b.torque_abs - u[i];
        }
        c
    }

    fn soft_constraints(
        &self,
        class: usize,
        _k: usize,
        x: &DVector<f64>,
        _u: &DVector<f64>,
    ) -> DVector<f64> {
        let n = self.plant.n;
        match class {
            0 => DVector::from_fn(n, |i, _| self.band.upper - x[i]),
            1 => DVector::from_fn(n, |i, _| x[i] - self.band.lower),
            _ => panic!("unknown soft constraint class {class}"),
        }
    }
}

/// Infinite-horizon discrete LQR gain from the Riccati fixed point,
/// iterated to 1e-10. `q` and `r` are full (typically diagonal) matrices.
pub fn discrete_lqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let m = b.ncols();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || q.ncols() != n || r.nrows() != m {
        return Err(Error::DimensionMismatch {
            context: "lqr matrices",
            expected: n,
            actual: a.ncols(),
        });
    }
    let mut p = q.clone();
    for _ in 0..200_000 {
        let btp = b.transpose() * &p;
        let gram = r + &btp * b;
        let inv = gram.clone().try_inverse().ok_or_else(|| {
            Error::BaselineUnavailable("singular R + BᵀPB in Riccati recursion".to_string())
        })?;
        let k = &inv * &btp * a;
        let p_next = q + a.transpose() * &p * a - a.transpose() * &p * b * &k;
        // symmetrize to keep the recursion numerically self-adjoint
        let p_next = (&p_next + p_next.transpose()) * 0.5;
        if p_next.iter().any(|v| !v.is_finite()) {
            return Err(Error::BaselineUnavailable(
                "Riccati recursion diverged".to_string(),
            ));
        }
        let diff = (&p_next - &p).amax();
        p = p_next;
        if diff < 1e-10 {
            let btp = b.transpose() * &p;
            let gram = r + &btp * b;
            let inv = gram.try_inverse().ok_or_else(|| {
                Error::BaselineUnavailable("singular R + BᵀPB at fixed point".to_string())
            })?;
            return Ok(inv * btp * a);
        }
    }
    Err(Error::BaselineUnavailable(
        "Riccati recursion did not reach the fixed point".to_string(),
    ))
}

/// Central-difference linearization of the deterministic one-step map at
/// an operating point.
pub fn linearize(
    params: &PlantParams,
    x_op: &DVector<f64>,
    u_op: &DVector<f64>,
    upstream: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n_x = params.state_dim();
    let n_u = params.control_dim();
    let h = 1e-5;
    let mut a = DMatrix::zeros(n_x, n_x);
    for j in 0..n_x {
        let mut xp = x_op.clone();
        let mut xm = x_op.clone();
        xp[j] += h;
        xm[j] -= h;
        let fp = plant::propagate(&xp, u_op, params, upstream)?;
        let fm = plant::propagate(&xm, u_op, params, upstream)?;
        a.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    let mut b = DMatrix::zeros(n_x, n_u);
    for j in 0..n_u {
        let mut up = u_op.clone();
        let mut um = u_op.clone();
        up[j] += h;
        um[j] -= h;
        let fp = plant::propagate(x_op, &up, params, upstream)?;
        let fm = plant::propagate(x_op, &um, params, upstream)?;
        b.set_column(j, &((fp - fm) / (2.0 * h)));
    }
    Ok((a, b))
}

/// LQR baseline gain about an admissible operating point. The controller
/// applies `u = u_eq - K (x - x_ref)` saturated at the torque bounds.
pub fn lqr_gain(
    params: &PlantParams,
    x_op: &DVector<f64>,
    u_op: &DVector<f64>,
    upstream: f64,
    q_diag: &DVector<f64>,
    r_diag: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let n = params.n;
    for i in 0..n {
        if x_op[i] >= params.ea {
            return Err(Error::SingularReference {
                tension: x_op[i],
                ea: params.ea,
            });
        }
    }
    let (a, b) = linearize(params, x_op, u_op, upstream)?;
    let q = DMatrix::from_diagonal(q_diag);
    let r = DMatrix::from_diagonal(r_diag);
    discrete_lqr(&a, &b, &q, &r)
}
