//! Separable Robin solution and the finite-difference error against it.
#![allow(dead_code)]

use std::f64::consts::PI;

use mono_core::tasks::{solve_robin, RobinConfig};
use mono_core::GridFunction;

/// `1/q + y + cos(πx)(A cosh πy + B sinh πy)`, with A and B fixed by the two boundary conditions:
/// `−u_y + q u = 0` at y = 0 gives `B = qA/π`, and `u_y = 1 + a cos πx` at y = 1 gives
/// `A (π sinh π + q cosh π) = a`.
pub fn exact(q: f64, a: f64, x: f64, y: f64) -> f64 {
    let big_a = a / (PI * PI.sinh() + q * PI.cosh());
    let big_b = q * big_a / PI;
    1.0 / q + y + (PI * x).cos() * (big_a * (PI * y).cosh() + big_b * (PI * y).sinh())
}

/// Max-norm error of the finite-difference field for constant `q` and top flux `1 + a cos πx`.
pub fn max_error(n: usize, q: f64, a: f64) -> f64 {
    let h = 1.0 / (n - 1) as f64;
    let cfg = RobinConfig {
        n,
        q0: q,
        coefficients: 1,
        top_flux: Some((0..n).map(|i| 1.0 + a * (PI * i as f64 * h).cos()).collect()),
        ..RobinConfig::default()
    };
    let sol = solve_robin(&cfg, &GridFunction::constant(cfg.edge_spec(), q)).unwrap();
    assert!(sol.residual <= 1e-10);
    let mut worst = 0.0f64;
    // axis 0 is y, axis 1 is x
    for iy in 0..n {
        for ix in 0..n {
            let e = (sol.u.values()[iy * n + ix] - exact(q, a, ix as f64 * h, iy as f64 * h)).abs();
            worst = worst.max(e);
        }
    }
    worst
}
