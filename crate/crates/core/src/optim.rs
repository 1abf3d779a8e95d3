//! Derivative-free local search (Nelder-Mead simplex) with an evaluation
//! budget.

use std::sync::atomic::{AtomicUsize, Ordering};

use argmin::core::{CostFunction, Error as ArgminError, Executor, State, TerminationReason, TerminationStatus};
use argmin::solver::neldermead::NelderMead;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexOptions {
    pub max_evals: usize,
    /// Edge length of the initial simplex along each axis.
    pub initial_step: f64,
    /// Stop when the standard deviation of simplex costs falls below this.
    pub cost_tolerance: f64,
}

impl Default for SimplexOptions {
    fn default() -> Self {
        Self { max_evals: 2000, initial_step: 0.5, cost_tolerance: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimplexOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    /// False when the budget ran out before the simplex collapsed.
    pub converged: bool,
}

struct Budgeted<'a, F> {
    f: &'a F,
    calls: AtomicUsize,
    budget: usize,
}

impl<F: Fn(&[f64]) -> f64> CostFunction for Budgeted<'_, F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> std::result::Result<f64, ArgminError> {
        let n = self.calls.fetch_add(1, Ordering::Relaxed);
        if n >= self.budget {
            return Ok(f64::INFINITY);
        }
        let v = (self.f)(x);
        Ok(if v.is_nan() { f64::INFINITY } else { v })
    }
}

/// Minimizes `f` from `x0`. Non-finite values are treated as `+inf`.
pub fn nelder_mead<F: Fn(&[f64]) -> f64>(f: &F, x0: &[f64], opts: &SimplexOptions) -> Result<SimplexOutcome> {
    if x0.is_empty() {
        let value = f(x0);
        return Ok(SimplexOutcome { x: vec![], value, evaluations: 1, converged: true });
    }
    let mut simplex = vec![x0.to_vec()];
    for i in 0..x0.len() {
        let mut p = x0.to_vec();
        p[i] += opts.initial_step;
        simplex.push(p);
    }
    let n = x0.len() as f64;
    // dimension-adaptive expansion and shrink
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(opts.cost_tolerance)
        .and_then(|s| s.with_gamma(1.0 + 2.0 / n))
        .and_then(|s| s.with_sigma((1.0 - 1.0 / n).max(0.5)))
        .map_err(|e| Error::config(e.to_string()))?;
    let problem = Budgeted { f, calls: AtomicUsize::new(0), budget: opts.max_evals };
    let res = Executor::new(problem, solver)
        .configure(|state| state.max_iters(opts.max_evals as u64))
        .run()
        .map_err(|e| Error::domain(format!("simplex search failed: {e}")))?;
    let evaluations = res.problem.problem.as_ref().map_or(0, |p| p.calls.load(Ordering::Relaxed)).min(opts.max_evals);
    let state = res.state();
    let converged = matches!(
        state.get_termination_status(),
        TerminationStatus::Terminated(TerminationReason::SolverConverged)
    );
    let x = state.get_best_param().cloned().unwrap_or_else(|| x0.to_vec());
    let value = state.get_best_cost();
    Ok(SimplexOutcome { x, value, evaluations, converged })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let out = nelder_mead(&f, &[-1.2, 1.0], &SimplexOptions { max_evals: 5000, ..Default::default() }).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-3 && (out.x[1] - 1.0).abs() < 1e-3, "{:?}", out);
        assert!(out.converged);
    }

    #[test]
    fn respects_budget() {
        let f = |x: &[f64]| x.iter().map(|v| (v - 3.0).powi(2)).sum::<f64>();
        let out = nelder_mead(&f, &[0.0; 6], &SimplexOptions { max_evals: 50, ..Default::default() }).unwrap();
        assert!(out.evaluations <= 50);
        assert!(!out.converged);
        assert!(out.value < f(&[0.0; 6]));
    }

    #[test]
    fn quadratic_in_higher_dimension() {
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * (v - 0.5).powi(2)).sum::<f64>();
        let out = nelder_mead(&f, &[0.0; 8], &SimplexOptions { max_evals: 20_000, ..Default::default() }).unwrap();
        assert!(out.value < 1e-6, "{}", out.value);
    }

    #[test]
    fn nan_is_avoided() {
        let f = |x: &[f64]| if x[0] < 0.0 { f64::NAN } else { (x[0] - 1.0).powi(2) };
        let out = nelder_mead(&f, &[0.5], &SimplexOptions::default()).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-4);
    }
}
