//! Cross-cutting verification harness: tiny enumerable instances,
//! a brute-force vertex oracle for the convex subproblem, and the
//! randomized property campaign behind the `verify` CLI subcommand.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adapt::AdaptConfig;
use crate::bundle::{
    build_bundles, BundleSet, ProblemDims, ProblemFunctions, TimestepBundle, Trajectory,
};
use crate::certificate::penalized_objective;
use crate::error::{Error, Result};
use crate::orchestrator::{tbm_solve, SolveBudget};
use crate::subproblem::{assemble, recover, ConvexSubproblem, SolveSettings};

/// Fully affine problem functions with per-timestep residual references;
/// exact under bundle interpolation, so ideal for oracle instances.
#[derive(Debug, Clone)]
pub struct AffineOracle {
    pub dims: ProblemDims,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: DMatrix<f64>,
    /// Residual is `C (stack(x,u) - stack_refs[k])`.
    pub stack_refs: Vec<DVector<f64>>,
    pub g_hard: DMatrix<f64>,
    pub h_hard: DVector<f64>,
    pub g_soft: DMatrix<f64>,
    pub h_soft: DVector<f64>,
}

fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut y = DVector::zeros(x.len() + u.len());
    y.rows_mut(0, x.len()).copy_from(x);
    y.rows_mut(x.len(), u.len()).copy_from(u);
    y
}

impl AffineOracle {
    /// Random instance; constraints have large positive offsets so all
    /// near-origin samples satisfy them.
    pub fn random(n_x: usize, n_u: usize, n_r: usize, h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = n_x + n_u;
        let mut mat = |r: usize, c: usize| DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
        let a = mat(n_x, dim);
        let c = mat(n_r, dim);
        let g_hard = mat(2, dim);
        let g_soft = mat(1, dim);
        let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0x51ED);
        let stack_refs = (0..h)
            .map(|_| DVector::from_fn(dim, |_, _| rng2.gen_range(-0.5..0.5)))
            .collect();
        let b = DVector::from_fn(n_x, |_, _| rng2.gen_range(-0.3..0.3));
        AffineOracle {
            dims: ProblemDims {
                n_x,
                n_u,
                n_r,
                n_hard: 2,
                n_soft: vec![1],
            },
            a,
            b,
            c,
            stack_refs,
            g_hard,
            h_hard: DVector::from_element(2, 50.0),
            g_soft,
            h_soft: DVector::from_element(1, 50.0),
        }
    }
}

impl ProblemFunctions for AffineOracle {
    fn dims(&self) -> &ProblemDims {
        &self.dims
    }
    fn dynamics(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * stack(x, u) + &self.b
    }
    fn residual(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let r = &self.stack_refs[k.min(self.stack_refs.len() - 1)];
        &self.c * (stack(x, u) - r)
    }
    fn hard_constraints(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.g_hard * stack(x, u) + &self.h_hard
    }
    fn soft_constraints(
        &self,
        _class: usize,
        _k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DVector<f64> {
        &self.g_soft * stack(x, u) + &self.h_soft
    }
}

/// A tiny instance whose subproblem is small enough for exhaustive vertex
/// enumeration.
#[derive(Debug, Clone)]
pub struct OracleInstance {
    pub system: AffineOracle,
    pub trajectory: Trajectory,
    pub bundles: BundleSet,
    pub mu: f64,
    pub gammas: Vec<f64>,
    pub seed: u64,
}

/// Build bundles with a reduced column count `m` (center first, the rest
/// uniform in the `delta`-ball) so `m^H` stays enumerable.
pub fn small_bundles<F: ProblemFunctions>(
    funcs: &F,
    z: &Trajectory,
    delta: f64,
    m: usize,
    seed: u64,
) -> Result<BundleSet> {
    if m < 2 {
        return Err(Error::invalid("m", "need at least 2 columns"));
    }
    let dims = funcs.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut steps = Vec::with_capacity(z.horizon());
    for k in 0..z.horizon() {
        let mut points = vec![(z.states[k].clone(), z.controls[k].clone())];
        for _ in 1..m {
            let step = DVector::from_fn(dims.n_x + dims.n_u, |_, _| rng.gen_range(-1.0..1.0));
            let step = if step.norm() > 0.0 {
                // uniform direction scaled inside the ball
                &step / step.norm() * (delta * rng.gen_range(0.0..1.0f64))
            } else {
                step
            };
            points.push((
                &z.states[k] + step.rows(0, dims.n_x),
                &z.controls[k] + step.rows(dims.n_x, dims.n_u),
            ));
        }
        let mut w_x = DMatrix::zeros(dims.n_x, m);
        let mut w_u = DMatrix::zeros(dims.n_u, m);
        let mut w_f = DMatrix::zeros(dims.n_x, m);
        let mut w_r = DMatrix::zeros(dims.n_r, m);
        let mut w_hard = DMatrix::zeros(dims.n_hard, m);
        let mut w_soft: Vec<DMatrix<f64>> = dims
            .n_soft
            .iter()
            .map(|&n_j| DMatrix::zeros(n_j, m))
            .collect();
        for (i, (x, u)) in points.iter().enumerate() {
            w_x.set_column(i, x);
            w_u.set_column(i, u);
            w_f.set_column(i, &funcs.dynamics(k, x, u));
            w_r.set_column(i, &funcs.residual(k, x, u));
            w_hard.set_column(i, &funcs.hard_constraints(k, x, u));
            for (j, w_c) in w_soft.iter_mut().enumerate() {
                w_c.set_column(i, &funcs.soft_constraints(j, k, x, u));
            }
        }
        steps.push(TimestepBundle {
            w_x,
            w_u,
            w_f,
            w_r,
            w_hard,
            w_soft,
        });
    }
    Ok(BundleSet {
        steps,
        sample_count: m,
        center_index: 0,
        delta,
    })
}

/// Random tiny instance (`n_x = 2`, `n_u = 1`, `H = 3`, `m = 4`).
pub fn random_instance(seed: u64) -> Result<OracleInstance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFACE);
    let h = 3;
    let system = AffineOracle::random(2, 1, 2, h, seed);
    let states = (0..h)
        .map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5)))
        .collect();
    let controls = (0..h)
        .map(|_| DVector::from_fn(1, |_, _| rng.gen_range(-0.5..0.5)))
        .collect();
    let trajectory = Trajectory::new(states, controls)?;
    let bundles = small_bundles(&system, &trajectory, 0.4, 4, seed ^ 0xB0B)?;
    Ok(OracleInstance {
        system,
        trajectory,
        bundles,
        mu: 8.0,
        gammas: vec![3.0],
        seed,
    })
}

/// Instance planted with an exactly feasible zero-residual vertex chain
/// at column 1 of every timestep.
pub fn planted_instance(seed: u64) -> Result<OracleInstance> {
    let mut inst = random_instance(seed)?;
    let h = inst.trajectory.horizon();
    // roll an exact chain and make the residual vanish along it
    let x0 = inst.trajectory.states[0].clone();
    let mut xs = vec![x0];
    for k in 0..h - 1 {
        let next = inst
            .system
            .dynamics(k, &xs[k], &inst.trajectory.controls[k]);
        xs.push(next);
    }
    inst.system.stack_refs = (0..h)
        .map(|k| stack(&xs[k], &inst.trajectory.controls[k]))
        .collect();
    for (k, x) in xs.iter().enumerate().take(h) {
        let step = &mut inst.bundles.steps[k];
        let u = &inst.trajectory.controls[k];
        step.w_x.set_column(1, x);
        step.w_u.set_column(1, u);
        step.w_f.set_column(1, &inst.system.dynamics(k, x, u));
        step.w_r.set_column(1, &inst.system.residual(k, x, u));
        step.w_hard
            .set_column(1, &inst.system.hard_constraints(k, x, u));
        step.w_soft[0].set_column(1, &inst.system.soft_constraints(0, k, x, u));
        // other columns were sampled before the reference change; refresh
        // their residual rows
        for i in [0, 2, 3] {
            let xi = DVector::from(step.w_x.column(i));
            let ui = DVector::from(step.w_u.column(i));
            step.w_r.set_column(i, &inst.system.residual(k, &xi, &ui));
        }
    }
    // the anchor must match the chain start
    inst.trajectory.states[0] = xs[0].clone();
    Ok(inst)
}

/// Exhaustive minimum of the subproblem objective over all `m^H` vertex
/// assignments, with slacks at their induced optimal values.
pub fn vertex_enumeration_oracle(sp: &ConvexSubproblem) -> Result<(f64, Vec<usize>)> {
    let h = sp.bundles.horizon();
    let m = sp.bundles.sample_count;
    let total = (m as u128).checked_pow(h as u32).unwrap_or(u128::MAX);
    if total > 100_000 {
        return Err(Error::invalid(
            "oracle instance",
            format!("m^H = {total} exceeds the enumeration cap"),
        ));
    }
    let mut cols = vec![0usize; h];
    let mut best = f64::INFINITY;
    let mut best_cols = cols.clone();
    loop {
        // the anchor row pins timestep 0 to the center column; other
        // assignments there are infeasible vertices, skip them
        if cols[0] == sp.bundles.center_index {
            let obj = sp.objective_at_assignment(&cols);
            if obj < best {
                best = obj;
                best_cols = cols.clone();
            }
        }
        // mixed-radix increment
        let mut k = 0;
        loop {
            cols[k] += 1;
            if cols[k] < m {
                break;
            }
            cols[k] = 0;
            k += 1;
            if k == h {
                return Ok((best, best_cols));
            }
        }
    }
}

/// One named invariant aggregated over the campaign instances.
#[derive(Debug, Clone)]
pub struct CampaignCheck {
    pub name: String,
    pub passed: usize,
    pub failed: usize,
    pub first_failure: Option<String>,
}

#[derive(Debug, Clone)]
pub struct CampaignReport {
    pub checks: Vec<CampaignCheck>,
}

impl CampaignReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.failed == 0)
    }
}

struct Tally {
    check: CampaignCheck,
}

impl Tally {
    fn new(name: &str) -> Self {
        Tally {
            check: CampaignCheck {
                name: name.to_string(),
                passed: 0,
                failed: 0,
                first_failure: None,
            },
        }
    }
    fn record(&mut self, ok: bool, detail: impl FnOnce() -> String) {
        if ok {
            self.check.passed += 1;
        } else {
            self.check.failed += 1;
            if self.check.first_failure.is_none() {
                self.check.first_failure = Some(detail());
            }
        }
    }
}

fn campaign_seed(seed: u64, i: usize) -> u64 {
    let mut z = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^ (z >> 31)
}

/// Run every module's cross-cutting invariant over `n_instances`
/// randomized instances and aggregate a pass/fail matrix.
pub fn run_property_campaign(seed: u64, n_instances: usize) -> Result<CampaignReport> {
    let settings = SolveSettings::default();
    let mut affine_exact = Tally::new("affine-exactness");
    let mut baseline = Tally::new("baseline-identity");
    let mut descent = Tally::new("solver-below-baseline");
    let mut vertex = Tally::new("solver-below-vertex-optimum");
    let mut planted = Tally::new("planted-zero-vertex-equality");
    let mut mu_mono = Tally::new("mu-monotone-infeasibility");
    let mut stabilization = Tally::new("penalty-stabilization-cap");
    let mut hull = Tally::new("recovered-iterate-in-hull");

    for i in 0..n_instances {
        let s = campaign_seed(seed, i);
        let inst = random_instance(s)?;
        let z = &inst.trajectory;
        let x_init = &z.states[0];

        // affine exactness on full stencil bundles
        {
            let sys = AffineOracle::random(4, 2, 3, 5, s ^ 0xAE);
            let mut rng = ChaCha8Rng::seed_from_u64(s ^ 0xAF);
            let states = (0..5)
                .map(|_| DVector::from_fn(4, |_, _| rng.gen_range(-0.5..0.5)))
                .collect();
            let controls = (0..5)
                .map(|_| DVector::from_fn(2, |_, _| rng.gen_range(-0.5..0.5)))
                .collect();
            let zt = Trajectory::new(states, controls)?;
            let bundles = build_bundles(&zt, 0.4, &sys, s, false)?;
            let m = bundles.sample_count;
            let mut worst: f64 = 0.0;
            for step in &bundles.steps {
                let mut alpha = DVector::from_fn(m, |_, _| rng.gen_range(0.0..1.0f64));
                alpha /= alpha.sum();
                let x = &step.w_x * &alpha;
                let u = &step.w_u * &alpha;
                worst = worst.max((&step.w_f * &alpha - sys.dynamics(0, &x, &u)).amax());
            }
            affine_exact.record(worst <= 1e-10, || format!("seed {s}: defect {worst}"));
        }

        let sp = assemble(&inst.bundles, inst.mu, &inst.gammas, x_init)?;
        let phi = penalized_objective(z, inst.mu, &inst.gammas, &inst.system, Some(x_init));
        let center = sp.objective_at_center();
        baseline.record(
            (phi - center).abs() <= 1e-8 * phi.abs().max(1.0),
            || format!("seed {s}: phi {phi} vs center {center}"),
        );

        let sol = sp.solve(settings)?;
        descent.record(
            sol.objective <= center + 1e-7 * center.abs().max(1.0),
            || format!("seed {s}: solver {} > center {center}", sol.objective),
        );

        let (v_best, _) = vertex_enumeration_oracle(&sp)?;
        vertex.record(
            sol.objective <= v_best + 1e-7 * v_best.abs().max(1.0),
            || format!("seed {s}: solver {} > vertex {v_best}", sol.objective),
        );

        {
            let pinst = planted_instance(s)?;
            let psp = assemble(&pinst.bundles, pinst.mu, &pinst.gammas, &pinst.trajectory.states[0])?;
            let (pv, _) = vertex_enumeration_oracle(&psp)?;
            let psol = psp.solve(settings)?;
            planted.record(
                pv.abs() <= 1e-8 && psol.objective.abs() <= 1e-6,
                || format!("seed {s}: vertex {pv}, solver {}", psol.objective),
            );
        }

        {
            let mut prev = f64::INFINITY;
            let mut ok = true;
            let mut detail = String::new();
            for mu in [1.0, 10.0, 100.0, 1000.0] {
                let sol = assemble(&inst.bundles, mu, &inst.gammas, x_init)?.solve(settings)?;
                let infeas: f64 = sol
                    .dyn_slacks
                    .iter()
                    .chain(sol.hard_slacks.iter())
                    .map(|v| v.iter().map(|e| e.abs()).sum::<f64>())
                    .sum();
                if infeas > prev + 1e-6 {
                    ok = false;
                    detail = format!("seed {s}: infeasibility rose {prev} -> {infeas} at mu {mu}");
                }
                prev = infeas;
            }
            mu_mono.record(ok, || detail.clone());
        }

        {
            // drive a tiny adaptive solve and count penalty increases
            let config = AdaptConfig {
                gamma_init: vec![3.0],
                gamma_max: vec![1e4],
                tau_soft: vec![1e-2],
                mu_init: 2.0,
                mu_max: 1e4,
                ..AdaptConfig::default()
            };
            let trace = tbm_solve(
                &inst.system,
                x_init,
                z.clone(),
                &config,
                SolveBudget { max_iterations: 25 },
                s,
                true,
                None,
                None,
            )?;
            let cap_mu = (config.mu_max / config.mu_init).log(config.rho_mu).ceil() as usize;
            let mu_rises = trace
                .iterations
                .windows(2)
                .filter(|w| w[1].mu > w[0].mu)
                .count();
            stabilization.record(
                mu_rises <= cap_mu,
                || format!("seed {s}: {mu_rises} mu increases, cap {cap_mu}"),
            );
        }

        {
            let z_next = recover(&inst.bundles, &sol);
            let mut ok = true;
            for k in 0..z.horizon() {
                let d = ((&z_next.states[k] - &z.states[k]).norm_squared()
                    + (&z_next.controls[k] - &z.controls[k]).norm_squared())
                .sqrt();
                if d > inst.bundles.delta + 1e-7 {
                    ok = false;
                }
            }
            hull.record(ok, || format!("seed {s}: recovered point left the ball"));
        }
    }

    Ok(CampaignReport {
        checks: vec![
            affine_exact.check,
            baseline.check,
            descent.check,
            vertex.check,
            planted.check,
            mu_mono.check,
            stabilization.check,
            hull.check,
        ],
    })
}
