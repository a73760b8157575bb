//! Convex bundle subproblem.
//!
//! Minimizes `Σ_k ‖W_r α^(k)‖² + μ Σ_k (‖s_k‖₁ + ‖w_k‖₁) + Σ_j γ_j Σ_k ‖d_{k,j}‖₁`
//! over simplex weights `α^(k)` with dynamics-coupling slacks `s_k`
//! (signed), hard slacks `w_k >= 0`, soft slacks `d_{k,j} >= 0`, and the
//! initial-state anchor `W_x^(1) α^(1) = x_init`. The ℓ₁ terms are handled
//! exactly by splitting `s_k = s_k⁺ - s_k⁻` into nonnegative parts; the
//! result is a convex QP handed to an interior-point backend.

use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT::NonnegativeConeT,
    SupportedConeT::ZeroConeT,
};
use nalgebra::DVector;
use serde::Serialize;

use crate::bundle::BundleSet;
use crate::error::{Error, Result};

/// Solver knobs. `tol_feas` bounds primal/dual residuals, `tol_opt` the
/// duality gap; `max_iter` is the interior-point iteration cap.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SolveSettings {
    pub tol_feas: f64,
    pub tol_opt: f64,
    pub max_iter: u32,
}

impl Default for SolveSettings {
    fn default() -> Self {
        SolveSettings {
            tol_feas: 1e-8,
            tol_opt: 1e-8,
            // Low enough that a stalled solve fails over to the proximal
            // retry quickly; well-posed instances finish in 10-30 iterations.
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SolveStatus {
    Optimal,
    AlmostOptimal,
}

/// Fallback proximal regularization weight on the simplex variables.
///
/// The unregularized subproblem is solved first so that optimality
/// comparisons stay exact. When the residual Gram block is rank deficient
/// (many zero-cost directions, e.g. an iterate already on its references)
/// the interior-point backend can stall with a numerical error; the retry
/// adds `eps*|alpha - e_center|^2`, which restores a well-posed KKT system
/// and pulls objective ties toward the incumbent vertex. The reported
/// objective never includes the proximal term.
const PROX_FALLBACK_EPS: f64 = 1e-2;

/// Assembled subproblem; borrows the bundle matrices.
pub struct ConvexSubproblem<'a> {
    pub bundles: &'a BundleSet,
    pub mu: f64,
    pub gammas: Vec<f64>,
    pub x_init: DVector<f64>,
}

/// Optimizer output: simplex weights and slack blocks per timestep.
#[derive(Debug, Clone)]
pub struct SubproblemSolution {
    /// Simplex weights, one per timestep.
    pub alphas: Vec<DVector<f64>>,
    /// Signed dynamics-coupling slacks, one per coupling (H-1).
    pub dyn_slacks: Vec<DVector<f64>>,
    /// Nonnegative hard-constraint slacks, one per coupling step.
    pub hard_slacks: Vec<DVector<f64>>,
    /// Nonnegative soft slacks indexed `[class][k]`.
    pub soft_slacks: Vec<Vec<DVector<f64>>>,
    /// Optimal objective value.
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: u32,
    pub solve_time_s: f64,
}

struct Triplets {
    rows: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Triplets {
    fn new() -> Self {
        Triplets {
            rows: Vec::new(),
            cols: Vec::new(),
            vals: Vec::new(),
        }
    }

    fn push(&mut self, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            self.rows.push(r);
            self.cols.push(c);
            self.vals.push(v);
        }
    }

    fn into_csc(self, n_rows: usize, n_cols: usize) -> CscMatrix<f64> {
        let nnz = self.vals.len();
        let mut order: Vec<usize> = (0..nnz).collect();
        order.sort_by_key(|&i| (self.cols[i], self.rows[i]));
        let mut colptr = vec![0usize; n_cols + 1];
        let mut rowval = Vec::with_capacity(nnz);
        let mut nzval = Vec::with_capacity(nnz);
        for &i in &order {
            colptr[self.cols[i] + 1] += 1;
            rowval.push(self.rows[i]);
            nzval.push(self.vals[i]);
        }
        for c in 0..n_cols {
            colptr[c + 1] += colptr[c];
        }
        CscMatrix::new(n_rows, n_cols, colptr, rowval, nzval)
    }
}

/// Variable layout offsets inside the stacked QP vector.
struct Layout {
    h: usize,
    m: usize,
    n_x: usize,
    n_hard: usize,
    n_soft: Vec<usize>,
    s_plus: usize,
    s_minus: usize,
    w: usize,
    d: Vec<usize>,
    total: usize,
}

impl Layout {
    fn new(p: &ConvexSubproblem<'_>) -> Layout {
        let h = p.bundles.horizon();
        let m = p.bundles.sample_count;
        let n_x = p.bundles.steps[0].w_x.nrows();
        let n_hard = p.bundles.steps[0].w_hard.nrows();
        let n_soft: Vec<usize> = p.bundles.steps[0].w_soft.iter().map(|w| w.nrows()).collect();
        let couplings = h - 1;
        let s_plus = h * m;
        let s_minus = s_plus + couplings * n_x;
        let w = s_minus + couplings * n_x;
        let mut d = Vec::with_capacity(n_soft.len());
        let mut off = w + couplings * n_hard;
        for &n_j in &n_soft {
            d.push(off);
            off += couplings * n_j;
        }
        Layout {
            h,
            m,
            n_x,
            n_hard,
            n_soft,
            s_plus,
            s_minus,
            w,
            d,
            total: off,
        }
    }

    fn alpha(&self, k: usize) -> usize {
        k * self.m
    }
}

/// Build the subproblem from bundles, penalty weights, and the measured
/// initial state.
pub fn assemble<'a>(
    bundles: &'a BundleSet,
    mu: f64,
    gammas: &[f64],
    x_init: &DVector<f64>,
) -> Result<ConvexSubproblem<'a>> {
    if !(mu > 0.0) {
        return Err(Error::invalid("mu", "penalty must be strictly positive"));
    }
    if gammas.iter().any(|g| !(*g > 0.0)) {
        return Err(Error::invalid("gamma", "penalties must be strictly positive"));
    }
    if bundles.steps.is_empty() {
        return Err(Error::invalid("bundles", "empty horizon"));
    }
    let n_classes = bundles.steps[0].w_soft.len();
    if gammas.len() != n_classes {
        return Err(Error::DimensionMismatch {
            context: "soft penalty vector",
            expected: n_classes,
            actual: gammas.len(),
        });
    }
    let n_x = bundles.steps[0].w_x.nrows();
    if x_init.len() != n_x {
        return Err(Error::DimensionMismatch {
            context: "x_init",
            expected: n_x,
            actual: x_init.len(),
        });
    }
    for step in &bundles.steps {
        for (name, cols) in [
            ("w_x", step.w_x.ncols()),
            ("w_u", step.w_u.ncols()),
            ("w_f", step.w_f.ncols()),
            ("w_r", step.w_r.ncols()),
            ("w_hard", step.w_hard.ncols()),
        ] {
            if cols != bundles.sample_count {
                return Err(Error::invalid(name, "inconsistent bundle column count"));
            }
        }
    }
    Ok(ConvexSubproblem {
        bundles,
        mu,
        gammas: gammas.to_vec(),
        x_init: x_init.clone(),
    })
}

impl ConvexSubproblem<'_> {
    /// Subproblem objective for a fixed vertex assignment: column
    /// `cols[k]` carries all weight at timestep `k`, slacks take their
    /// induced optimal values in closed form.
    pub fn objective_at_assignment(&self, cols: &[usize]) -> f64 {
        let steps = &self.bundles.steps;
        let h = steps.len();
        assert_eq!(cols.len(), h);
        let mut obj = 0.0;
        for (k, step) in steps.iter().enumerate() {
            obj += step.w_r.column(cols[k]).norm_squared();
        }
        for k in 0..h.saturating_sub(1) {
            let s = DVector::from(steps[k].w_f.column(cols[k]))
                - DVector::from(steps[k + 1].w_x.column(cols[k + 1]));
            obj += self.mu * s.iter().map(|v| v.abs()).sum::<f64>();
            let w_violation: f64 = steps[k]
                .w_hard
                .column(cols[k])
                .iter()
                .map(|v| (-v).max(0.0))
                .sum();
            obj += self.mu * w_violation;
            for (j, gamma) in self.gammas.iter().enumerate() {
                let d_violation: f64 = steps[k].w_soft[j]
                    .column(cols[k])
                    .iter()
                    .map(|v| (-v).max(0.0))
                    .sum();
                obj += gamma * d_violation;
            }
        }
        obj
    }

    /// Objective at the current-iterate vertex (`α^(k) = e_{i*}` at all k).
    pub fn objective_at_center(&self) -> f64 {
        let cols = vec![self.bundles.center_index; self.bundles.horizon()];
        self.objective_at_assignment(&cols)
    }

    /// Solve the QP. Fails with `SolverFailure` when the backend does not
    /// reach (near-)optimality within the iteration cap, retrying once
    /// with proximal regularization on a numerical failure.
    pub fn solve(&self, settings: SolveSettings) -> Result<SubproblemSolution> {
        let mut result = self.solve_with_prox(settings, 0.0);
        for scale in [1.0, 1e2, 1e4] {
            match result {
                Err(Error::SolverFailure { .. }) => {
                    result = self.solve_with_prox(settings, scale * PROX_FALLBACK_EPS);
                }
                _ => break,
            }
        }
        result
    }

    fn solve_with_prox(&self, settings: SolveSettings, prox: f64) -> Result<SubproblemSolution> {
        let start = Instant::now();
        let layout = Layout::new(self);
        let (p_mat, q) = self.build_objective(&layout, prox);
        let (a_mat, b, cones) = self.build_constraints(&layout);

        let cfg = DefaultSettings {
            verbose: std::env::var_os("TBM_QP_VERBOSE").is_some(),
            max_iter: settings.max_iter,
            tol_gap_abs: settings.tol_opt,
            tol_gap_rel: settings.tol_opt,
            tol_feas: settings.tol_feas,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p_mat, &q, &a_mat, &b, &cones, cfg);
        solver.solve();

        let status = match solver.solution.status {
            SolverStatus::Solved => SolveStatus::Optimal,
            SolverStatus::AlmostSolved => SolveStatus::AlmostOptimal,
            other => {
                return Err(Error::SolverFailure {
                    status: format!("{other:?}"),
                })
            }
        };

        let x = &solver.solution.x;
        let h = layout.h;
        let couplings = h - 1;
        let alphas: Vec<DVector<f64>> = (0..h)
            .map(|k| DVector::from_iterator(layout.m, (0..layout.m).map(|i| x[layout.alpha(k) + i])))
            .collect();
        let dyn_slacks: Vec<DVector<f64>> = (0..couplings)
            .map(|k| {
                DVector::from_iterator(
                    layout.n_x,
                    (0..layout.n_x).map(|i| {
                        x[layout.s_plus + k * layout.n_x + i] - x[layout.s_minus + k * layout.n_x + i]
                    }),
                )
            })
            .collect();
        let hard_slacks: Vec<DVector<f64>> = (0..couplings)
            .map(|k| {
                DVector::from_iterator(
                    layout.n_hard,
                    (0..layout.n_hard).map(|i| x[layout.w + k * layout.n_hard + i]),
                )
            })
            .collect();
        let soft_slacks: Vec<Vec<DVector<f64>>> = (0..layout.n_soft.len())
            .map(|j| {
                let n_j = layout.n_soft[j];
                (0..couplings)
                    .map(|k| {
                        DVector::from_iterator(
                            n_j,
                            (0..n_j).map(|i| x[layout.d[j] + k * n_j + i]),
                        )
                    })
                    .collect()
            })
            .collect();

        // report the bundle objective itself: evaluated at the returned
        // point, without the proximal term and without the slack split
        // looseness the interior point leaves behind
        let mut objective = 0.0;
        for (step, alpha) in self.bundles.steps.iter().zip(&alphas) {
            objective += (&step.w_r * alpha).norm_squared();
        }
        for s in &dyn_slacks {
            objective += self.mu * s.iter().map(|v| v.abs()).sum::<f64>();
        }
        for w in &hard_slacks {
            objective += self.mu * w.iter().map(|v| v.max(0.0)).sum::<f64>();
        }
        for (j, gamma) in self.gammas.iter().enumerate() {
            for d in &soft_slacks[j] {
                objective += gamma * d.iter().map(|v| v.max(0.0)).sum::<f64>();
            }
        }

        Ok(SubproblemSolution {
            alphas,
            dyn_slacks,
            hard_slacks,
            soft_slacks,
            objective,
            status,
            iterations: solver.solution.iterations,
            solve_time_s: start.elapsed().as_secs_f64(),
        })
    }

    fn build_objective(&self, layout: &Layout, prox: f64) -> (CscMatrix<f64>, Vec<f64>) {
        let mut trip = Triplets::new();
        let center = self.bundles.center_index;
        for (k, step) in self.bundles.steps.iter().enumerate() {
            // 1/2 x'Px convention: P block = 2 W_r' W_r
            let mut gram = 2.0 * step.w_r.transpose() * &step.w_r;
            for i in 0..layout.m {
                gram[(i, i)] += 2.0 * prox;
            }
            let off = layout.alpha(k);
            for c in 0..layout.m {
                for r in 0..layout.m {
                    trip.push(off + r, off + c, gram[(r, c)]);
                }
            }
        }
        let p_mat = trip.into_csc(layout.total, layout.total);

        let couplings = layout.h - 1;
        let mut q = vec![0.0; layout.total];
        for k in 0..layout.h {
            q[layout.alpha(k) + center] = -2.0 * prox;
        }
        for i in 0..couplings * layout.n_x {
            q[layout.s_plus + i] = self.mu;
            q[layout.s_minus + i] = self.mu;
        }
        for i in 0..couplings * layout.n_hard {
            q[layout.w + i] = self.mu;
        }
        for (j, &gamma) in self.gammas.iter().enumerate() {
            for i in 0..couplings * layout.n_soft[j] {
                q[layout.d[j] + i] = gamma;
            }
        }
        (p_mat, q)
    }

    fn build_constraints(
        &self,
        layout: &Layout,
    ) -> (CscMatrix<f64>, Vec<f64>, Vec<clarabel::solver::SupportedConeT<f64>>) {
        let steps = &self.bundles.steps;
        let h = layout.h;
        let m = layout.m;
        let couplings = h - 1;
        // when the first-step stencil was built with the state frozen,
        // every column already equals x_init and explicit anchor rows
        // would duplicate the simplex row, making the KKT system
        // rank-deficient
        let implicit_anchor = (0..m).all(|i| {
            (0..layout.n_x).all(|r| steps[0].w_x[(r, i)] == self.x_init[r])
        });
        let anchor_rows = if implicit_anchor { 0 } else { layout.n_x };
        let n_eq = h + anchor_rows + couplings * layout.n_x;
        let n_slack_vars = layout.total - h * m;
        let n_ineq = h * m
            + n_slack_vars
            + couplings * layout.n_hard
            + layout
                .n_soft
                .iter()
                .map(|&n_j| couplings * n_j)
                .sum::<usize>();

        let mut trip = Triplets::new();
        let mut b = vec![0.0; n_eq + n_ineq];
        let mut row = 0;

        // simplex sums
        for k in 0..h {
            for i in 0..m {
                trip.push(row, layout.alpha(k) + i, 1.0);
            }
            b[row] = 1.0;
            row += 1;
        }
        // initial-state anchor
        if !implicit_anchor {
            for r in 0..layout.n_x {
                for i in 0..m {
                    trip.push(row, layout.alpha(0) + i, steps[0].w_x[(r, i)]);
                }
                b[row] = self.x_init[r];
                row += 1;
            }
        }
        // dynamics couplings: W_f^(k) a^(k) - W_x^(k+1) a^(k+1) - s+ + s- = 0
        for k in 0..couplings {
            for r in 0..layout.n_x {
                for i in 0..m {
                    trip.push(row, layout.alpha(k) + i, steps[k].w_f[(r, i)]);
                    trip.push(row, layout.alpha(k + 1) + i, -steps[k + 1].w_x[(r, i)]);
                }
                trip.push(row, layout.s_plus + k * layout.n_x + r, -1.0);
                trip.push(row, layout.s_minus + k * layout.n_x + r, 1.0);
                row += 1;
            }
        }
        debug_assert_eq!(row, n_eq);

        // nonnegativity of alpha and every slack variable: -v <= 0
        for i in 0..h * m {
            trip.push(row, i, -1.0);
            row += 1;
        }
        for i in 0..n_slack_vars {
            trip.push(row, h * m + i, -1.0);
            row += 1;
        }
        // hard constraints: -W_ch a^(k) - w_k <= 0
        for (k, step) in steps.iter().enumerate().take(couplings) {
            for r in 0..layout.n_hard {
                for i in 0..m {
                    trip.push(row, layout.alpha(k) + i, -step.w_hard[(r, i)]);
                }
                trip.push(row, layout.w + k * layout.n_hard + r, -1.0);
                row += 1;
            }
        }
        // soft constraints: -W_cj a^(k) - d_{k,j} <= 0
        for (j, &n_j) in layout.n_soft.iter().enumerate() {
            for (k, step) in steps.iter().enumerate().take(couplings) {
                for r in 0..n_j {
                    for i in 0..m {
                        trip.push(row, layout.alpha(k) + i, -step.w_soft[j][(r, i)]);
                    }
                    trip.push(row, layout.d[j] + k * n_j + r, -1.0);
                    row += 1;
                }
            }
        }
        debug_assert_eq!(row, n_eq + n_ineq);

        let a_mat = trip.into_csc(n_eq + n_ineq, layout.total);
        let cones = vec![ZeroConeT(n_eq), NonnegativeConeT(n_ineq)];
        (a_mat, b, cones)
    }

    /// Self-describing JSON dump for offline inspection.
    pub fn dump_json(&self) -> serde_json::Value {
        let mat = |m: &nalgebra::DMatrix<f64>| {
            serde_json::json!({
                "rows": m.nrows(),
                "cols": m.ncols(),
                "data_row_major": m.row_iter().flat_map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<f64>>(),
            })
        };
        serde_json::json!({
            "description": "convex bundle subproblem",
            "horizon": self.bundles.horizon(),
            "sample_count": self.bundles.sample_count,
            "center_index": self.bundles.center_index,
            "delta": self.bundles.delta,
            "mu": self.mu,
            "gammas": self.gammas,
            "x_init": self.x_init.as_slice(),
            "steps": self.bundles.steps.iter().map(|s| serde_json::json!({
                "w_x": mat(&s.w_x),
                "w_u": mat(&s.w_u),
                "w_f": mat(&s.w_f),
                "w_r": mat(&s.w_r),
                "w_hard": mat(&s.w_hard),
                "w_soft": s.w_soft.iter().map(&mat).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Recover the trajectory `x_k = W_x^(k) α^(k)`, `u_k = W_u^(k) α^(k)`.
pub fn recover(bundles: &BundleSet, sol: &SubproblemSolution) -> crate::bundle::Trajectory {
    let states = bundles
        .steps
        .iter()
        .zip(&sol.alphas)
        .map(|(step, alpha)| &step.w_x * alpha)
        .collect();
    let controls = bundles
        .steps
        .iter()
        .zip(&sol.alphas)
        .map(|(step, alpha)| &step.w_u * alpha)
        .collect();
    crate::bundle::Trajectory { states, controls }
}
