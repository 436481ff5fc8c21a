//! Projected gradient ascent with a backtracking step size.
//!
//! Shared by reward fitting, the adversarial inner maximization, and the
//! confidence-set probes. The objective value never decreases across
//! accepted iterations, which several callers assert as an invariant.

use crate::error::{Error, Result};
use crate::vecmath::{add_scaled, norm2, project_ball};

#[derive(Debug, Clone, Copy)]
pub struct AscentOpts {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub init_step: f64,
    pub max_backtracks: u32,
}

impl Default for AscentOpts {
    fn default() -> Self {
        Self {
            max_iters: 10_000,
            grad_tol: 1e-8,
            init_step: 1.0,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AscentReport {
    pub value: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Objective after each accepted step, starting with the initial value.
    pub history: Vec<f64>,
}

/// Maximizes `f` over the Euclidean ball of radius `bound`.
///
/// Each iteration takes one gradient, then halves the trial step until the
/// objective does not decrease. A step that cannot improve the objective at
/// the smallest trial size terminates the ascent.
pub fn projected_ascent(
    x0: Vec<f64>,
    bound: f64,
    mut f: impl FnMut(&[f64]) -> f64,
    mut grad: impl FnMut(&[f64]) -> Vec<f64>,
    opts: &AscentOpts,
) -> Result<(Vec<f64>, AscentReport)> {
    let mut x = x0;
    project_ball(&mut x, bound);
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::NonFinite("objective at the initial point".into()));
    }
    let mut history = vec![fx];
    let mut step = opts.init_step;
    let mut iterations = 0;
    let mut grad_norm = 0.0;
    while iterations < opts.max_iters {
        let g = grad(&x);
        grad_norm = norm2(&g);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite("gradient during ascent".into()));
        }
        if grad_norm <= opts.grad_tol {
            break;
        }
        let mut accepted = false;
        for _ in 0..opts.max_backtracks {
            let mut y = x.clone();
            add_scaled(&mut y, &g, step);
            project_ball(&mut y, bound);
            let moved = y.iter().zip(&x).any(|(a, b)| a != b);
            if !moved {
                break;
            }
            let fy = f(&y);
            if fy.is_finite() && fy >= fx {
                x = y;
                fx = fy;
                history.push(fx);
                step = (step * 1.5).min(opts.init_step * 1024.0);
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
    }
    Ok((
        x,
        AscentReport {
            value: fx,
            iterations,
            grad_norm,
            history,
        },
    ))
}
