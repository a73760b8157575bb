//! Trust-region sampling and bundle matrix construction.
//!
//! Each outer iteration samples `m = 2(n_x + n_u) + 21` candidate
//! state-control pairs per timestep: the current iterate, a deterministic
//! stencil of `±Δ` perturbations along every coordinate axis, and 20
//! Gaussian draws clipped radially to the `Δ`-ball. The sampled dynamics,
//! residuals, and constraint values form the bundle matrices consumed by
//! the convex subproblem.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Number of Gaussian samples added to the coordinate stencil.
pub const GAUSSIAN_SAMPLES: usize = 20;

/// Horizon-indexed sequence of state-control pairs; the optimization
/// variable of the outer loop.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(states: Vec<DVector<f64>>, controls: Vec<DVector<f64>>) -> Result<Self> {
        if states.len() != controls.len() {
            return Err(Error::DimensionMismatch {
                context: "trajectory state/control horizon",
                expected: states.len(),
                actual: controls.len(),
            });
        }
        Ok(Trajectory { states, controls })
    }

    pub fn horizon(&self) -> usize {
        self.states.len()
    }

    /// Trajectory norm `sqrt(Σ_k ‖x_k‖² + ‖u_k‖²)`.
    pub fn norm(&self) -> f64 {
        self.states
            .iter()
            .zip(&self.controls)
            .map(|(x, u)| x.norm_squared() + u.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Distance between two trajectories in the trajectory norm.
    pub fn distance(&self, other: &Trajectory) -> f64 {
        debug_assert_eq!(self.horizon(), other.horizon());
        self.states
            .iter()
            .zip(&other.states)
            .map(|(a, b)| (a - b).norm_squared())
            .chain(
                self.controls
                    .iter()
                    .zip(&other.controls)
                    .map(|(a, b)| (a - b).norm_squared()),
            )
            .sum::<f64>()
            .sqrt()
    }
}

/// Dimensions of the per-timestep problem functions.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemDims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_r: usize,
    pub n_hard: usize,
    /// One entry per soft constraint class.
    pub n_soft: Vec<usize>,
}

impl ProblemDims {
    pub fn n_classes(&self) -> usize {
        self.n_soft.len()
    }
}

/// The functions sampled into bundles: discrete dynamics, stage-cost
/// residual, and constraint evaluations (hard classes are `>= 0` bounds,
/// soft classes are `>= 0` bands penalized by class).
pub trait ProblemFunctions {
    fn dims(&self) -> &ProblemDims;
    fn dynamics(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn residual(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn hard_constraints(&self, k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn soft_constraints(
        &self,
        class: usize,
        k: usize,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> DVector<f64>;
}

/// Bundle matrices for one timestep; all matrices share the column count.
#[derive(Debug, Clone)]
pub struct TimestepBundle {
    pub w_x: DMatrix<f64>,
    pub w_u: DMatrix<f64>,
    pub w_f: DMatrix<f64>,
    pub w_r: DMatrix<f64>,
    pub w_hard: DMatrix<f64>,
    pub w_soft: Vec<DMatrix<f64>>,
}

/// Bundles for every timestep of the horizon. Column `center_index` of
/// `(w_x, w_u)` reproduces the iterate exactly at each k.
#[derive(Debug, Clone)]
pub struct BundleSet {
    pub steps: Vec<TimestepBundle>,
    pub sample_count: usize,
    pub center_index: usize,
    /// Per-timestep sampling radius used to build this set.
    pub delta: f64,
}

impl BundleSet {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Expected sample count for the given stencil dimensions.
pub fn stencil_size(n_x: usize, n_u: usize) -> usize {
    2 * (n_x + n_u) + GAUSSIAN_SAMPLES + 1
}

/// Deterministic stencil plus clipped Gaussian cloud around one
/// state-control center. Returns exactly `stencil_size(n_x, n_u)` pairs
/// with the center first.
///
/// When `frozen_state` is set, state coordinates are never perturbed (all
/// samples share the center state); used at the first timestep where the
/// state is anchored to the measured value.
pub fn sample_stencil<R: Rng>(
    center_x: &DVector<f64>,
    center_u: &DVector<f64>,
    delta: f64,
    rng: &mut R,
    frozen_state: bool,
) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
    if !(delta > 0.0) {
        return Err(Error::invalid("delta", "sampling radius must be > 0"));
    }
    let n_x = center_x.len();
    let n_u = center_u.len();
    let dim = n_x + n_u;
    let mut samples = Vec::with_capacity(stencil_size(n_x, n_u));
    samples.push((center_x.clone(), center_u.clone()));

    // coordinate stencil
    for axis in 0..dim {
        for sign in [1.0, -1.0] {
            let mut x = center_x.clone();
            let mut u = center_u.clone();
            if axis < n_x {
                if !frozen_state {
                    x[axis] += sign * delta;
                }
            } else {
                u[axis - n_x] += sign * delta;
            }
            samples.push((x, u));
        }
    }

    // Gaussian cloud with stddev delta/3, clipped radially to the ball
    let sigma = delta / 3.0;
    for _ in 0..GAUSSIAN_SAMPLES {
        let mut step = DVector::from_fn(dim, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            sigma * z
        });
        if frozen_state {
            for i in 0..n_x {
                step[i] = 0.0;
            }
        }
        let norm = step.norm();
        if norm > delta {
            step *= delta / norm;
        }
        let x = center_x + step.rows(0, n_x);
        let u = center_u + step.rows(n_x, n_u);
        samples.push((x, u));
    }
    Ok(samples)
}

fn sub_seed(seed: u64, k: usize) -> u64 {
    // splitmix64 of (seed, k) so serial and parallel builds agree
    let mut z = seed ^ (k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_finite(
    v: &DVector<f64>,
    function: &'static str,
    timestep: usize,
    sample: usize,
) -> Result<()> {
    if v.iter().any(|e| !e.is_finite()) {
        return Err(Error::NonFiniteEvaluation {
            function,
            timestep,
            sample,
        });
    }
    Ok(())
}

/// Sample every timestep of `z` inside the per-timestep `delta`-ball and
/// evaluate the problem functions into bundle matrices.
///
/// When `anchor_first_state` is true, state coordinates at `k = 0` are not
/// perturbed so the initial state stays at the iterate's (measured) value.
pub fn build_bundles<F: ProblemFunctions>(
    z: &Trajectory,
    delta: f64,
    funcs: &F,
    seed: u64,
    anchor_first_state: bool,
) -> Result<BundleSet> {
    let dims = funcs.dims();
    let h = z.horizon();
    if h == 0 {
        return Err(Error::invalid("trajectory", "empty horizon"));
    }
    let m = stencil_size(dims.n_x, dims.n_u);
    let mut steps = Vec::with_capacity(h);
    for k in 0..h {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, k));
        let frozen = anchor_first_state && k == 0;
        let samples = sample_stencil(&z.states[k], &z.controls[k], delta, &mut rng, frozen)?;
        debug_assert_eq!(samples.len(), m);

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

        for (i, (x, u)) in samples.iter().enumerate() {
            let f = funcs.dynamics(k, x, u);
            check_finite(&f, "dynamics", k, i)?;
            let r = funcs.residual(k, x, u);
            check_finite(&r, "residual", k, i)?;
            let c = funcs.hard_constraints(k, x, u);
            check_finite(&c, "hard_constraints", k, i)?;
            w_x.set_column(i, x);
            w_u.set_column(i, u);
            w_f.set_column(i, &f);
            w_r.set_column(i, &r);
            w_hard.set_column(i, &c);
            for (j, w_c) in w_soft.iter_mut().enumerate() {
                let cj = funcs.soft_constraints(j, k, x, u);
                check_finite(&cj, "soft_constraints", k, i)?;
                w_c.set_column(i, &cj);
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

#[cfg(test)]
mod tests {
    use super::*;

    /// Affine test system: F = A[x;u] + b, r = C[x;u] + e, constraints
    /// linear as well.
    pub(crate) struct AffineSystem {
        pub dims: ProblemDims,
        pub a: DMatrix<f64>,
        pub b: DVector<f64>,
        pub c: DMatrix<f64>,
        pub e: DVector<f64>,
        pub g_hard: DMatrix<f64>,
        pub h_hard: DVector<f64>,
        pub g_soft: Vec<(DMatrix<f64>, DVector<f64>)>,
    }

    impl AffineSystem {
        pub fn random(n_x: usize, n_u: usize, n_r: usize, n_hard: usize, seed: u64) -> Self {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dim = n_x + n_u;
            let mut mat = |r: usize, c: usize| {
                DMatrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
            };
            let a = mat(n_x, dim);
            let c = mat(n_r, dim);
            let g1 = mat(n_hard, dim);
            let g2 = mat(1, dim);
            let mut rng2 = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
            let mut vecr = |r: usize| DVector::from_fn(r, |_, _| rng2.gen_range(-1.0..1.0));
            let b = vecr(n_x);
            let e = vecr(n_r);
            let h1 = vecr(n_hard);
            let h2 = vecr(1);
            AffineSystem {
                dims: ProblemDims {
                    n_x,
                    n_u,
                    n_r,
                    n_hard,
                    n_soft: vec![1],
                },
                a,
                b,
                c,
                e,
                g_hard: g1,
                h_hard: h1,
                g_soft: vec![(g2, h2)],
            }
        }

        fn stack(x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            let mut y = DVector::zeros(x.len() + u.len());
            y.rows_mut(0, x.len()).copy_from(x);
            y.rows_mut(x.len(), u.len()).copy_from(u);
            y
        }
    }

    impl ProblemFunctions for AffineSystem {
        fn dims(&self) -> &ProblemDims {
            &self.dims
        }
        fn dynamics(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            &self.a * Self::stack(x, u) + &self.b
        }
        fn residual(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            &self.c * Self::stack(x, u) + &self.e
        }
        fn hard_constraints(&self, _k: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
            &self.g_hard * Self::stack(x, u) + &self.h_hard
        }
        fn soft_constraints(
            &self,
            class: usize,
            _k: usize,
            x: &DVector<f64>,
            u: &DVector<f64>,
        ) -> DVector<f64> {
            let (g, h) = &self.g_soft[class];
            g * Self::stack(x, u) + h
        }
    }

    fn simple_traj(n_x: usize, n_u: usize, h: usize) -> Trajectory {
        let states = (0..h).map(|k| DVector::from_element(n_x, k as f64 * 0.1)).collect();
        let controls = (0..h).map(|_| DVector::zeros(n_u)).collect();
        Trajectory::new(states, controls).unwrap()
    }

    #[test]
    fn stencil_count_matches_six_zone_line() {
        // n_x = 12, n_u = 6 -> 6*6 + 21 = 57
        assert_eq!(stencil_size(12, 6), 57);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples = sample_stencil(
            &DVector::zeros(12),
            &DVector::zeros(6),
            0.5,
            &mut rng,
            false,
        )
        .unwrap();
        assert_eq!(samples.len(), 57);
    }

    #[test]
    fn stencil_contained_in_ball_and_centered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cx = DVector::from_vec(vec![1.0, -2.0]);
        let cu = DVector::from_vec(vec![0.5]);
        let delta = 0.3;
        let samples = sample_stencil(&cx, &cu, delta, &mut rng, false).unwrap();
        assert_eq!(samples[0].0, cx);
        assert_eq!(samples[0].1, cu);
        for (x, u) in &samples {
            let d = ((x - &cx).norm_squared() + (u - &cu).norm_squared()).sqrt();
            assert!(d <= delta + 1e-12);
        }
    }

    #[test]
    fn stencil_small_delta_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cx = DVector::zeros(2);
        let cu = DVector::zeros(1);
        let delta = 1e-9;
        let samples = sample_stencil(&cx, &cu, delta, &mut rng, false).unwrap();
        for (x1, u1) in &samples {
            for (x2, u2) in &samples {
                let d = ((x1 - x2).norm_squared() + (u1 - u2).norm_squared()).sqrt();
                assert!(d <= 2.0 * delta + 1e-18);
            }
        }
    }

    #[test]
    fn stencil_rejects_nonpositive_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_stencil(&DVector::zeros(2), &DVector::zeros(1), 0.0, &mut rng, false).is_err());
    }

    #[test]
    fn stencil_deterministic_given_seed() {
        let cx = DVector::zeros(3);
        let cu = DVector::zeros(2);
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let a = sample_stencil(&cx, &cu, 0.5, &mut r1, false).unwrap();
        let b = sample_stencil(&cx, &cu, 0.5, &mut r2, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn directional_coverage() {
        // Assumption: for any unit d some sample has <y - center, d> >=
        // delta / sqrt(n_x + n_u); the coordinate stencil guarantees it.
        let n_x = 4;
        let n_u = 2;
        let kappa = 1.0 / ((n_x + n_u) as f64).sqrt();
        let delta = 0.7;
        let cx = DVector::zeros(n_x);
        let cu = DVector::zeros(n_u);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let samples = sample_stencil(&cx, &cu, delta, &mut rng, false).unwrap();
        let mut dir_rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..1000 {
            let mut d = DVector::from_fn(n_x + n_u, |_, _| {
                let z: f64 = StandardNormal.sample(&mut dir_rng);
                z
            });
            d /= d.norm();
            let best = samples
                .iter()
                .map(|(x, u)| {
                    let mut y = DVector::zeros(n_x + n_u);
                    y.rows_mut(0, n_x).copy_from(&(x - &cx));
                    y.rows_mut(n_x, n_u).copy_from(&(u - &cu));
                    y.dot(&d)
                })
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(best >= kappa * delta - 1e-12, "best = {best}");
        }
    }

    #[test]
    fn bundles_center_column_reproduces_iterate() {
        let sys = AffineSystem::random(3, 2, 2, 2, 5);
        let z = simple_traj(3, 2, 4);
        let bundles = build_bundles(&z, 0.4, &sys, 9, false).unwrap();
        for (k, step) in bundles.steps.iter().enumerate() {
            let i = bundles.center_index;
            assert_eq!(DVector::from(step.w_x.column(i)), z.states[k]);
            assert_eq!(DVector::from(step.w_u.column(i)), z.controls[k]);
            let f = sys.dynamics(k, &z.states[k], &z.controls[k]);
            assert_eq!(DVector::from(step.w_f.column(i)), f);
        }
    }

    #[test]
    fn bundles_affine_exactness() {
        let sys = AffineSystem::random(3, 2, 2, 2, 6);
        let z = simple_traj(3, 2, 3);
        let bundles = build_bundles(&z, 0.4, &sys, 10, false).unwrap();
        let m = bundles.sample_count;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for step in &bundles.steps {
            for _ in 0..20 {
                let mut alpha = DVector::from_fn(m, |_, _| rng.gen_range(0.0..1.0f64));
                alpha /= alpha.sum();
                let x = &step.w_x * &alpha;
                let u = &step.w_u * &alpha;
                let lhs = &step.w_f * &alpha;
                let rhs = sys.dynamics(0, &x, &u);
                let scale = rhs.norm().max(1.0);
                assert!((lhs - rhs).norm() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn bundles_zero_radius_limit() {
        let sys = AffineSystem::random(2, 1, 2, 1, 8);
        let z = simple_traj(2, 1, 2);
        let bundles = build_bundles(&z, 1e-12, &sys, 1, false).unwrap();
        for (k, step) in bundles.steps.iter().enumerate() {
            let r_center = sys.residual(k, &z.states[k], &z.controls[k]);
            for i in 0..bundles.sample_count {
                let col = DVector::from(step.w_r.column(i));
                assert!((col - &r_center).norm() <= 1e-6);
            }
        }
    }

    #[test]
    fn bundles_bit_identical_rebuild() {
        let sys = AffineSystem::random(3, 2, 2, 2, 12);
        let z = simple_traj(3, 2, 4);
        let a = build_bundles(&z, 0.4, &sys, 33, false).unwrap();
        let b = build_bundles(&z, 0.4, &sys, 33, false).unwrap();
        for (sa, sb) in a.steps.iter().zip(&b.steps) {
            assert_eq!(sa.w_x, sb.w_x);
            assert_eq!(sa.w_f, sb.w_f);
            assert_eq!(sa.w_r, sb.w_r);
        }
    }

    #[test]
    fn bundles_convex_hull_in_ball() {
        let sys = AffineSystem::random(3, 2, 2, 2, 13);
        let z = simple_traj(3, 2, 2);
        let delta = 0.6;
        let bundles = build_bundles(&z, delta, &sys, 40, false).unwrap();
        let m = bundles.sample_count;
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for (k, step) in bundles.steps.iter().enumerate() {
            for _ in 0..100 {
                let mut alpha = DVector::from_fn(m, |_, _| rng.gen_range(0.0..1.0f64));
                alpha /= alpha.sum();
                let x = &step.w_x * &alpha;
                let u = &step.w_u * &alpha;
                let d = ((&x - &z.states[k]).norm_squared()
                    + (&u - &z.controls[k]).norm_squared())
                .sqrt();
                assert!(d <= delta + 1e-9);
            }
        }
    }

    #[test]
    fn anchored_first_step_freezes_state() {
        let sys = AffineSystem::random(3, 2, 2, 2, 14);
        let z = simple_traj(3, 2, 3);
        let bundles = build_bundles(&z, 0.4, &sys, 3, true).unwrap();
        let first = &bundles.steps[0];
        for i in 0..bundles.sample_count {
            assert_eq!(DVector::from(first.w_x.column(i)), z.states[0]);
        }
        // later steps still perturb states
        let second = &bundles.steps[1];
        let distinct = (0..bundles.sample_count)
            .any(|i| second.w_x.column(i) != z.states[1]);
        assert!(distinct);
    }
}
