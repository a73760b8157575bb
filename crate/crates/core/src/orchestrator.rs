//! The outer bundle-method loop and the receding-horizon closed-loop
//! driver with its controller variants.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adapt::{self, AdaptConfig, AdaptState, Violations};
use crate::bundle::{build_bundles, ProblemFunctions, Trajectory};
use crate::certificate::{monitor_iteration, penalized_objective, LipschitzEstimates, MonitorRecord};
use crate::error::{Error, Result};
use crate::plant::{self, PlantParams};
use crate::problem::{lqr_gain, Bounds, R2RProblem, SoftBand, Weights};
use crate::subproblem::{assemble, recover, SolveSettings};

/// Controller selection for the closed loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControllerKind {
    /// Full adaptive method.
    Atbm,
    /// Same loop with the trust region and penalties frozen at their
    /// initial values.
    TbmFixed,
    /// Linear-quadratic baseline about the initial reference point.
    Lqr,
}

/// How one outer solve ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TbmStatus {
    Converged,
    IterationCap,
    SolverFailure(String),
}

/// One accepted outer iteration. The adaptation fields hold the values
/// *used* by the iteration, so replaying them through the adapt module
/// reproduces the next row.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub j_sub: f64,
    pub violations: Violations,
    pub delta: f64,
    pub mu: f64,
    pub gammas: Vec<f64>,
    pub step_norm: f64,
    pub solver_iterations: u32,
    pub wall_s: f64,
}

#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub iterations: Vec<IterationRecord>,
    pub final_z: Trajectory,
    pub status: TbmStatus,
    pub monitors: Vec<MonitorRecord>,
    /// Penalty state after the last adaptation update, so a receding-horizon
    /// caller can seed the next window's solve instead of re-ramping from
    /// the initial penalties.
    pub final_mu: f64,
    pub final_gammas: Vec<f64>,
}

/// Optional per-iteration inequality monitoring.
#[derive(Debug, Clone)]
pub struct MonitorSetup {
    pub estimates: LipschitzEstimates,
    pub delta_bar: f64,
}

/// Per-solve iteration budget; default matches a bounded control latency.
#[derive(Debug, Clone, Copy)]
pub struct SolveBudget {
    pub max_iterations: usize,
}

impl Default for SolveBudget {
    fn default() -> Self {
        SolveBudget { max_iterations: 30 }
    }
}

/// True violation metrics of an iterate evaluated directly through the
/// problem functions (no solver slacks involved).
fn incumbent_violations<F: ProblemFunctions>(
    funcs: &F,
    x_init: &DVector<f64>,
    z: &Trajectory,
) -> Violations {
    let h = z.horizon();
    let n_classes = funcs.dims().n_classes();
    let mut dyn_viol = (&z.states[0] - x_init).amax();
    let mut hard_viol = 0.0f64;
    let mut soft_viol = vec![0.0; n_classes];
    for k in 0..h - 1 {
        let f = funcs.dynamics(k, &z.states[k], &z.controls[k]);
        dyn_viol = dyn_viol.max((&z.states[k + 1] - f).amax());
        let c = funcs.hard_constraints(k, &z.states[k], &z.controls[k]);
        for v in c.iter() {
            hard_viol = hard_viol.max(-v);
        }
        for (j, sv) in soft_viol.iter_mut().enumerate() {
            let s = funcs.soft_constraints(j, k, &z.states[k], &z.controls[k]);
            *sv += s.iter().map(|v| (-v).max(0.0)).sum::<f64>();
        }
    }
    Violations {
        dyn_viol,
        hard_viol,
        soft_viol,
    }
}

/// Project a candidate onto exact dynamic feasibility: keep its controls,
/// anchor the first state, and roll the rest out through the true
/// dynamics. The recovered candidate deviates from feasibility only by
/// the bundle model error, so the rollout moves the states by the same
/// small amount while zeroing the dynamics defect identically.
fn rollout<F: ProblemFunctions>(
    funcs: &F,
    x_init: &DVector<f64>,
    z: &Trajectory,
) -> Trajectory {
    let h = z.horizon();
    let mut states = Vec::with_capacity(h);
    states.push(x_init.clone());
    for k in 0..h - 1 {
        states.push(funcs.dynamics(k, &states[k], &z.controls[k]));
    }
    Trajectory {
        states,
        controls: z.controls.clone(),
    }
}

fn iteration_seed(seed: u64, iteration: usize) -> u64 {
    // decorrelate per-iteration sampling without touching the per-step
    // sub-seeding inside the bundle builder
    seed ^ (iteration as u64).wrapping_mul(0xD129_0163_0D48_7F21) ^ 0x5851_F42D_4C95_7F2D
}

/// One run of the outer loop: sample, solve, recover, adapt until
/// convergence, the budget, or a hard solver failure at the minimum
/// radius. A recovered iterate is accepted unless it is strictly worse
/// than the incumbent (higher penalized objective, or more constraint
/// slack than the incumbent carries).
///
/// `adaptive = false` freezes the trust region and penalties at their
/// initial values; the loop is otherwise identical.
#[allow(clippy::too_many_arguments)]
pub fn tbm_solve<F: ProblemFunctions>(
    funcs: &F,
    x_init: &DVector<f64>,
    z_init: Trajectory,
    config: &AdaptConfig,
    budget: SolveBudget,
    seed: u64,
    adaptive: bool,
    monitor: Option<&MonitorSetup>,
    dump_dir: Option<&Path>,
) -> Result<SolveTrace> {
    config.validate()?;
    let settings = SolveSettings::default();
    let mut state = AdaptState::new(config);
    let mut z = z_init;
    let mut iterations = Vec::new();
    let mut monitors = Vec::new();

    let mut l = 0;
    while l < budget.max_iterations {
        let started = Instant::now();
        let bundles = build_bundles(&z, state.delta, funcs, iteration_seed(seed, l), true)?;
        let sp = assemble(&bundles, state.mu, &state.gammas, x_init)?;
        if let Some(dir) = dump_dir {
            std::fs::create_dir_all(dir)?;
            let text = serde_json::to_string_pretty(&sp.dump_json())
                .expect("subproblem dump serializes");
            std::fs::write(dir.join(format!("iter_{l:03}.json")), text + "\n")?;
        }
        let sol = match sp.solve(settings) {
            Ok(sol) => sol,
            Err(Error::SolverFailure { status }) => {
                // shrink the sampling region and retry; at the floor the
                // failure is terminal
                if !adaptive || state.delta <= config.delta_min * (1.0 + 1e-12) {
                    return Ok(SolveTrace {
                        iterations,
                        final_z: z,
                        status: TbmStatus::SolverFailure(status),
                        monitors,
                        final_mu: state.mu,
                        final_gammas: state.gammas.clone(),
                    });
                }
                state.delta = (config.beta_con * state.delta).max(config.delta_min);
                l += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let center_obj = sp.objective_at_center();
        let cand_nu = adapt::violations(&sol);
        let inc_nu = incumbent_violations(funcs, x_init, &z);
        let inc_worst = inc_nu.dyn_viol.max(inc_nu.hard_viol);
        let cand_worst = cand_nu.dyn_viol.max(cand_nu.hard_viol);
        // Feasibility safeguard (adaptive mode): a candidate that buys more
        // dynamics or hard-constraint slack than the incumbent carries would
        // corrupt the incumbent and leave only tiny trust-region steps to
        // repair it later. Keep the incumbent, let the candidate's
        // violations drive the radius/penalty updates, and force a penalty
        // escalation below so the next subproblem prices the slack out.
        // Candidates that reduce an infeasible incumbent's violation are
        // still accepted, so the loop cannot deadlock on a bad incumbent.
        let safeguard_reject = adaptive && cand_worst > config.eps_feas.max(inc_worst);
        // Sufficient-decrease test on the *realized* penalized objective of
        // the recovered candidate. The subproblem predicts its decrease
        // through the bundle model, whose error grows with the radius; near
        // a flat optimum the model keeps predicting improvements that
        // evaporate on recovery, and chasing them makes the iterate wander
        // with O(sqrt(gap)) interior-point noise. `center_obj` equals the
        // penalized objective of the incumbent, so keeping the incumbent on
        // an insufficient realized decrease also lets the step-norm test
        // detect convergence.
        let cand_z = rollout(funcs, x_init, &recover(&bundles, &sol));
        let cand_phi = penalized_objective(&cand_z, state.mu, &state.gammas, funcs, Some(x_init));
        let decrease_tol = 1e-6 * center_obj.abs() + 1e-9;
        let insufficient = cand_phi >= center_obj - decrease_tol;
        let (z_next, nu, j_sub) = if insufficient {
            (z.clone(), inc_nu, center_obj)
        } else if safeguard_reject {
            (z.clone(), cand_nu, center_obj)
        } else {
            (cand_z, cand_nu, sol.objective)
        };
        let step_norm = z_next.distance(&z);

        if let Some(m) = monitor {
            let max_violation = nu.dyn_viol.max(nu.hard_viol);
            monitors.push(monitor_iteration(
                funcs,
                &z,
                &z_next,
                x_init,
                j_sub,
                state.delta,
                state.mu,
                &state.gammas,
                &m.estimates,
                m.delta_bar,
                config.tau_viol,
                max_violation,
            ));
        }

        iterations.push(IterationRecord {
            j_sub,
            violations: nu.clone(),
            delta: state.delta,
            mu: state.mu,
            gammas: state.gammas.clone(),
            step_norm,
            solver_iterations: sol.iterations,
            wall_s: started.elapsed().as_secs_f64(),
        });

        let done = adapt::converged(nu.dyn_viol, nu.hard_viol, step_norm, config);
        let delta_used = state.delta;
        if adaptive {
            adapt::apply(&mut state, config, &nu);
            if insufficient && !done {
                // Unsuccessful iteration: the model's predicted decrease did
                // not materialize on the recovered trajectory, so the radius
                // (not the penalty) is the limiting factor. Contract it so
                // the recovery error shrinks below the feasibility
                // tolerance; this overrides the expansion above.
                state.delta = (config.beta_con * delta_used).max(config.delta_min);
            } else if safeguard_reject && state.mu < config.mu_max {
                // Safeguard escalation: the optimum was rejected for
                // infeasible slack, so the penalty must keep growing even
                // while the slack sits below the contraction threshold,
                // otherwise the loop stalls with the penalty frozen under
                // the slack's marginal value. Stops once a candidate is
                // accepted.
                state.mu = (config.rho_mu * state.mu).min(config.mu_max);
                state.mu_increases += 1;
            }
        } else {
            state.iteration += 1;
        }
        z = z_next;
        if done {
            return Ok(SolveTrace {
                iterations,
                final_z: z,
                status: TbmStatus::Converged,
                monitors,
                final_mu: state.mu,
                final_gammas: state.gammas.clone(),
            });
        }
        l += 1;
    }
    Ok(SolveTrace {
        iterations,
        final_z: z,
        status: TbmStatus::IterationCap,
        monitors,
        final_mu: state.mu,
        final_gammas: state.gammas.clone(),
    })
}

/// Everything the closed loop needs, with reference schedules already
/// expanded to one entry per plant step (plus `horizon` extra entries so
/// the final windows stay full length).
#[derive(Debug, Clone)]
pub struct ScenarioRuntime {
    pub plant: PlantParams,
    pub weights: Weights,
    pub bounds: Bounds,
    pub band: SoftBand,
    pub adapt: AdaptConfig,
    pub horizon: usize,
    /// Number of applied control steps.
    pub steps: usize,
    pub seed: u64,
    /// Tension references per step, length `steps + horizon`.
    pub tension_refs: Vec<DVector<f64>>,
    /// Upstream velocity per step, length `steps + horizon`.
    pub upstreams: Vec<f64>,
    pub budget: SolveBudget,
}

impl ScenarioRuntime {
    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.adapt.validate()?;
        if self.horizon < 2 {
            return Err(Error::invalid("horizon", "must be at least 2"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        let need = self.steps + self.horizon;
        if self.tension_refs.len() < need || self.upstreams.len() < need {
            return Err(Error::DimensionMismatch {
                context: "reference schedule length",
                expected: need,
                actual: self.tension_refs.len().min(self.upstreams.len()),
            });
        }
        Ok(())
    }

    /// Reference state `[T^r; v^r]` at an absolute step index.
    pub fn reference_state(&self, step: usize) -> Result<DVector<f64>> {
        let n = self.plant.n;
        let t_ref = &self.tension_refs[step];
        let v_ref = plant::reference_velocities(t_ref, self.upstreams[step], &self.plant)?;
        let mut x = DVector::zeros(2 * n);
        x.rows_mut(0, n).copy_from(t_ref);
        x.rows_mut(n, n).copy_from(&v_ref);
        Ok(x)
    }

    fn window_problem(
        &self,
        step: usize,
        u_prevs: Vec<DVector<f64>>,
    ) -> Result<R2RProblem> {
        let h = self.horizon;
        R2RProblem::new(
            self.plant.clone(),
            self.weights.clone(),
            self.bounds,
            self.band,
            self.tension_refs[step..step + h].to_vec(),
            self.upstreams[step..step + h].to_vec(),
            u_prevs,
        )
    }
}

/// One applied plant step in the closed-loop log.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub time_s: f64,
    pub state: DVector<f64>,
    pub control: DVector<f64>,
    pub reference: DVector<f64>,
    pub nu_dyn: f64,
    pub nu_hard: f64,
    pub delta: f64,
    pub mu: f64,
    pub gammas: Vec<f64>,
    pub outer_iterations: usize,
    pub solve_ms: f64,
    pub solve_status: TbmStatus,
}

#[derive(Debug, Clone)]
pub struct ClosedLoopTrace {
    pub steps: Vec<StepRecord>,
    pub monitors: Vec<MonitorRecord>,
    /// Set when the run was truncated by a controller failure.
    pub failure: Option<String>,
    pub n_classes: usize,
}

fn shift_warm_start(prev: &Trajectory, new_x0: DVector<f64>) -> Trajectory {
    let h = prev.horizon();
    let mut states = Vec::with_capacity(h);
    let mut controls = Vec::with_capacity(h);
    states.push(new_x0);
    for k in 2..h {
        states.push(prev.states[k].clone());
    }
    // repeat the final pair to refill the horizon
    states.push(prev.states[h - 1].clone());
    for k in 1..h {
        controls.push(prev.controls[k].clone());
    }
    controls.push(prev.controls[h - 1].clone());
    Trajectory { states, controls }
}

fn cold_start(x: &DVector<f64>, params: &PlantParams, h: usize) -> Result<Trajectory> {
    // hold the measured state with its equilibrium torques: dynamically
    // near-feasible, so the initial dynamics violation stays small
    let u_eq = plant::equilibrium_torques(x, params)?;
    Ok(Trajectory {
        states: vec![x.clone(); h],
        controls: vec![u_eq; h],
    })
}

fn saturate(u: &mut DVector<f64>, limit: f64) {
    for v in u.iter_mut() {
        *v = v.clamp(-limit, limit);
    }
}

/// Receding-horizon closed loop. The initial plant state sits on the
/// t = 0 reference. Controller failures truncate the trace with a
/// failure record rather than holding stale controls.
pub fn closed_loop(
    kind: ControllerKind,
    scenario: &ScenarioRuntime,
    monitor: Option<&MonitorSetup>,
    dump_dir: Option<&Path>,
) -> Result<ClosedLoopTrace> {
    scenario.validate()?;
    let n = scenario.plant.n;
    let dt = scenario.plant.dt;
    let n_classes = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x9E37_79B9_7F4A_7C15);

    let mut x = scenario.reference_state(0)?;
    let mut u_applied = plant::equilibrium_torques(&x, &scenario.plant)?;
    let mut warm: Option<Trajectory> = None;
    let mut carry: Option<(f64, Vec<f64>)> = None;
    let mut steps = Vec::with_capacity(scenario.steps);
    let mut monitors = Vec::new();
    let mut failure = None;

    // LQR baseline: one gain about the initial reference operating point
    let lqr = if kind == ControllerKind::Lqr {
        let x_op = scenario.reference_state(0)?;
        let u_op = plant::equilibrium_torques(&x_op, &scenario.plant)?;
        let q = DVector::from_fn(2 * n, |i, _| {
            if i < n {
                scenario.weights.q_tension[i]
            } else {
                scenario.weights.q_velocity[i - n]
            }
        });
        let r = DVector::from_vec(scenario.weights.r_torque.clone());
        Some(lqr_gain(
            &scenario.plant,
            &x_op,
            &u_op,
            scenario.upstreams[0],
            &q,
            &r,
        )?)
    } else {
        None
    };

    for step in 0..scenario.steps {
        let x_ref = scenario.reference_state(step)?;
        let record = match kind {
            ControllerKind::Lqr => {
                let k_gain: &DMatrix<f64> = lqr.as_ref().unwrap();
                let u_eq = plant::equilibrium_torques(&x_ref, &scenario.plant)?;
                let mut u = u_eq - k_gain * (&x - &x_ref);
                saturate(&mut u, scenario.bounds.torque_abs);
                StepRecord {
                    time_s: step as f64 * dt,
                    state: x.clone(),
                    control: u,
                    reference: x_ref.clone(),
                    nu_dyn: 0.0,
                    nu_hard: 0.0,
                    delta: 0.0,
                    mu: 0.0,
                    gammas: vec![0.0; n_classes],
                    outer_iterations: 0,
                    solve_ms: 0.0,
                    solve_status: TbmStatus::Converged,
                }
            }
            ControllerKind::Atbm | ControllerKind::TbmFixed => {
                let h = scenario.horizon;
                let mut z_init = match warm.take() {
                    Some(prev) => shift_warm_start(&prev, x.clone()),
                    None => cold_start(&x, &scenario.plant, h)?,
                };
                let mut u_prevs = Vec::with_capacity(h);
                u_prevs.push(u_applied.clone());
                for k in 0..h - 1 {
                    u_prevs.push(z_init.controls[k].clone());
                }
                let problem = scenario.window_problem(step, u_prevs)?;
                // Re-simulate the refilled tail stage under this window's
                // dynamics: a duplicated final state is stationary, which
                // bakes a defect of |f(x, u) - x| into the warm start
                // whenever the plan is mid-transient.
                z_init.states[h - 1] =
                    problem.dynamics(h - 2, &z_init.states[h - 2], &z_init.controls[h - 2]);
                let step_dump = dump_dir.map(|d| d.join(format!("step_{step:03}")));
                // Carry the stabilized penalties into the next window: the
                // initial penalties apply to the first solve only, so a
                // transient does not force a fresh penalty ramp (and the
                // trust-region collapse that rides along with it) at every
                // subsequent step.
                let mut cfg = scenario.adapt.clone();
                if kind == ControllerKind::Atbm {
                    if let Some((mu, gammas)) = carry.take() {
                        cfg.mu_init = mu;
                        cfg.gamma_init = gammas;
                    }
                }
                let started = Instant::now();
                let trace = tbm_solve(
                    &problem,
                    &x,
                    z_init,
                    &cfg,
                    scenario.budget,
                    scenario.seed ^ (step as u64).wrapping_mul(0xA076_1D64_78BD_642F),
                    kind == ControllerKind::Atbm,
                    monitor,
                    step_dump.as_deref(),
                )?;
                carry = Some((trace.final_mu, trace.final_gammas.clone()));
                monitors.extend(trace.monitors.iter().cloned());
                if let TbmStatus::SolverFailure(status) = &trace.status {
                    failure = Some(format!("step {step}: subproblem failure ({status})"));
                }
                let last = trace.iterations.last();
                // Report the violations of the trajectory actually returned,
                // not the last subproblem's slacks.
                let final_nu = incumbent_violations(&problem, &x, &trace.final_z);
                let record = StepRecord {
                    time_s: step as f64 * dt,
                    state: x.clone(),
                    control: trace.final_z.controls[0].clone(),
                    reference: x_ref.clone(),
                    nu_dyn: final_nu.dyn_viol,
                    nu_hard: final_nu.hard_viol,
                    delta: last.map_or(f64::NAN, |r| r.delta),
                    mu: last.map_or(f64::NAN, |r| r.mu),
                    gammas: last.map_or(vec![f64::NAN; n_classes], |r| r.gammas.clone()),
                    outer_iterations: trace.iterations.len(),
                    solve_ms: started.elapsed().as_secs_f64() * 1e3,
                    solve_status: trace.status.clone(),
                };
                warm = Some(trace.final_z);
                record
            }
        };

        if failure.is_some() {
            steps.push(record);
            break;
        }
        let u = record.control.clone();
        x = plant::step_stochastic(&x, &u, &scenario.plant, scenario.upstreams[step], &mut rng)?;
        u_applied = u;
        steps.push(record);
    }

    Ok(ClosedLoopTrace {
        steps,
        monitors,
        failure,
        n_classes,
    })
}
