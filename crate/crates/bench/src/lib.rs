//! Shared fixtures for the benchmarks: a six-zone line at its reference
//! equilibrium with a stepped tension target inside the window.

use nalgebra::DVector;
use tbm_core::bundle::Trajectory;
use tbm_core::plant;
use tbm_core::{Bounds, PlantParams, R2RProblem, SoftBand, Weights};

pub const HORIZON: usize = 15;

/// Problem, initial state, and warm-start trajectory for an N-zone line
/// whose third span reference steps up mid-window.
pub fn stepped_window(n: usize) -> (R2RProblem, DVector<f64>, Trajectory) {
    let params = PlantParams::default_line(n);
    let base: Vec<f64> = (0..n).map(|i| 24.0 + 4.0 * (i as f64)).collect();
    let refs: Vec<DVector<f64>> = (0..HORIZON)
        .map(|k| {
            let mut t = base.clone();
            if k >= HORIZON / 2 {
                t[2.min(n - 1)] += 12.0;
            }
            DVector::from_vec(t)
        })
        .collect();
    let upstream = 0.01;
    let t0 = refs[0].clone();
    let v0 = plant::reference_velocities(&t0, upstream, &params).expect("reference velocities");
    let mut x0 = DVector::zeros(2 * n);
    x0.rows_mut(0, n).copy_from(&t0);
    x0.rows_mut(n, n).copy_from(&v0);
    let u_eq = plant::equilibrium_torques(&x0, &params).expect("equilibrium torques");
    let problem = R2RProblem::new(
        params,
        Weights::default_line(n),
        Bounds::default(),
        SoftBand::default(),
        refs,
        vec![upstream; HORIZON],
        vec![u_eq.clone(); HORIZON],
    )
    .expect("problem construction");
    let z = Trajectory {
        states: vec![x0.clone(); HORIZON],
        controls: vec![u_eq; HORIZON],
    };
    (problem, x0, z)
}
