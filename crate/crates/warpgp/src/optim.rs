//! Limited-memory BFGS with a backtracking Armijo line search. The trace of
//! accepted objective values is monotone non-increasing by construction.

use crate::error::{Error, Result};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LbfgsConfig {
    pub max_iters: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub grad_tol: f64,
    /// Stop when the relative objective decrease falls below this.
    pub obj_tol: f64,
    pub history: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            grad_tol: 1e-5,
            obj_tol: 1e-8,
            history: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    /// Accepted objective values, starting with the initial one.
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub message: String,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

/// Minimizes `value_grad` (which returns the objective and fills the
/// gradient) starting from `x0`. `value_only` must agree with it; the line
/// search uses it to avoid gradient work.
pub fn minimize<F, G>(
    mut value_only: F,
    mut value_grad: G,
    x0: &[f64],
    cfg: &LbfgsConfig,
) -> Result<OptimOutcome>
where
    F: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64], &mut [f64]) -> f64,
{
    let dim = x0.len();
    let mut x = x0.to_vec();
    let mut grad = vec![0.0; dim];
    let mut value = value_grad(&x, &mut grad);
    if !value.is_finite() {
        return Err(Error::NonFiniteObjective(format!(
            "initial objective is {value}"
        )));
    }
    let mut trace = vec![value];
    let mut history: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();

    if dim == 0 {
        return Ok(OptimOutcome {
            x,
            value,
            trace,
            converged: true,
            iterations: 0,
            message: "no free parameters".into(),
        });
    }

    let mut converged = false;
    let mut message = String::from("max iterations reached");
    let mut iterations = 0;

    for iter in 0..cfg.max_iters {
        iterations = iter + 1;

        let gnorm = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if gnorm < cfg.grad_tol {
            converged = true;
            message = format!("gradient norm {gnorm:.3e} below tolerance");
            iterations = iter;
            break;
        }

        let mut dir = two_loop(&grad, &history);
        let mut slope: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
        if !slope.is_finite() || slope >= 0.0 {
            // Fall back to steepest descent when curvature info is unusable.
            dir = grad.iter().map(|g| -g).collect();
            slope = -grad.iter().map(|g| g * g).sum::<f64>();
            history.clear();
        }

        // Backtracking Armijo search.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let cand_value = value_only(&cand);
            if cand_value.is_finite() && cand_value <= value + ARMIJO_C1 * step * slope {
                accepted = Some((cand, cand_value));
                break;
            }
            step *= 0.5;
        }
        let Some((x_new, value_new)) = accepted else {
            converged = false;
            message = "line search failed to find a decrease".into();
            break;
        };

        let mut grad_new = vec![0.0; dim];
        let value_new = {
            // Reuse the gradient evaluation for the accepted point.
            let v = value_grad(&x_new, &mut grad_new);
            debug_assert!((v - value_new).abs() <= 1e-9 * (1.0 + v.abs()));
            v
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if sy > 1e-10 * (ss * yy).sqrt() {
            if history.len() >= cfg.history {
                history.remove(0);
            }
            history.push((s, y, 1.0 / sy));
        }

        let rel_drop = (value - value_new).abs() / value_new.abs().max(1.0);
        x = x_new;
        grad = grad_new;
        value = value_new;
        trace.push(value);

        if rel_drop < cfg.obj_tol {
            converged = true;
            message = format!("relative objective change {rel_drop:.3e} below tolerance");
            break;
        }
    }

    Ok(OptimOutcome {
        x,
        value,
        trace,
        converged,
        iterations,
        message,
    })
}

/// Two-loop recursion for the quasi-Newton direction `-H g`.
fn two_loop(grad: &[f64], history: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let alpha = rho * s.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alpha * yi;
        }
        alphas.push(alpha);
    }
    if let Some((s, y, _)) = history.last() {
        let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
        let yy: f64 = y.iter().map(|v| v * v).sum();
        if yy > 0.0 {
            let gamma = sy / yy;
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
    }
    for ((s, y, rho), alpha) in history.iter().zip(alphas.iter().rev()) {
        let beta = rho * y.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alpha - beta) * si;
        }
    }
    for qi in q.iter_mut() {
        *qi = -*qi;
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let target = [1.0, -2.0, 3.0, 0.5];
        let f = |x: &[f64]| -> f64 {
            x.iter()
                .zip(&target)
                .enumerate()
                .map(|(i, (xi, ti))| (i + 1) as f64 * (xi - ti) * (xi - ti))
                .sum()
        };
        let g = |x: &[f64], grad: &mut [f64]| -> f64 {
            for (i, (xi, ti)) in x.iter().zip(&target).enumerate() {
                grad[i] = 2.0 * (i + 1) as f64 * (xi - ti);
            }
            f(x)
        };
        let out = minimize(f, g, &[0.0; 4], &LbfgsConfig::default()).unwrap();
        assert!(out.converged, "{}", out.message);
        for (xi, ti) in out.x.iter().zip(&target) {
            assert!((xi - ti).abs() < 1e-5, "{} vs {}", xi, ti);
        }
    }

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| -> f64 {
            100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2)
        };
        let g = |x: &[f64], grad: &mut [f64]| -> f64 {
            grad[0] = -400.0 * x[0] * (x[1] - x[0] * x[0]) - 2.0 * (1.0 - x[0]);
            grad[1] = 200.0 * (x[1] - x[0] * x[0]);
            f(x)
        };
        let cfg = LbfgsConfig {
            max_iters: 2000,
            grad_tol: 1e-8,
            obj_tol: 1e-14,
            history: 10,
        };
        let out = minimize(f, g, &[-1.2, 1.0], &cfg).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-4 && (out.x[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn trace_is_monotone_non_increasing() {
        let f = |x: &[f64]| -> f64 { (x[0].cos() + 1.5) * (x[1] * x[1] + 0.1) + x[0] * x[0] * 0.01 };
        let g = |x: &[f64], grad: &mut [f64]| -> f64 {
            grad[0] = -x[0].sin() * (x[1] * x[1] + 0.1) + 0.02 * x[0];
            grad[1] = (x[0].cos() + 1.5) * 2.0 * x[1];
            f(x)
        };
        let out = minimize(f, g, &[2.0, 1.7], &LbfgsConfig::default()).unwrap();
        for w in out.trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15, "trace increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn rejects_non_finite_start() {
        let f = |_: &[f64]| -> f64 { f64::NAN };
        let g = |_: &[f64], _: &mut [f64]| -> f64 { f64::NAN };
        assert!(matches!(
            minimize(f, g, &[0.0], &LbfgsConfig::default()),
            Err(Error::NonFiniteObjective(_))
        ));
    }
}
