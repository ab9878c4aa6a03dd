//! Limited-memory BFGS with Armijo backtracking for smooth full-batch
//! objectives.

use std::collections::VecDeque;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iter: usize,
    /// Stop when `‖g‖∞ ≤ grad_tol`.
    pub grad_tol: f64,
    /// Stop when the relative decrease over one iteration is below this.
    pub rel_decrease_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iter: 500,
            grad_tol: 0.0,
            rel_decrease_tol: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_norm_inf: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// True if the line search could not decrease the objective.
    pub stalled: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Minimizes `f`, which returns value and gradient. Non-finite trial values
/// count as failed line-search steps.
pub fn lbfgs<F>(mut f: F, x0: Vec<f64>, cfg: &LbfgsConfig) -> Result<LbfgsOutcome>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0;
    let (mut fx, mut g) = f(&x)?;
    let mut evaluations = 1;
    let mut hist: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut iterations = 0;
    let mut stalled = false;
    while iterations < cfg.max_iter && norm_inf(&g) > cfg.grad_tol {
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(hist.len());
        for (s, y, rho) in hist.iter().rev() {
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        let scale = hist.back().map(|(s, y, _)| dot(s, y) / dot(y, y)).unwrap_or_else(|| {
            let gn = norm_inf(&g);
            if gn > 0.0 {
                1e-3 / gn
            } else {
                1.0
            }
        });
        q.iter_mut().for_each(|v| *v *= scale);
        for ((s, y, rho), a) in hist.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            hist.clear();
            dir = g.iter().map(|v| -v * scale).collect();
            slope = dot(&g, &dir);
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            let (ft, gt) = f(&trial)?;
            evaluations += 1;
            if ft.is_finite() && ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gn)) = accepted else {
            if hist.is_empty() {
                stalled = true;
                break;
            }
            hist.clear();
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            hist.push_back((s, y, 1.0 / sy));
            if hist.len() > cfg.memory {
                hist.pop_front();
            }
        }
        let decrease = fx - fnew;
        x = xn;
        g = gn;
        iterations += 1;
        let small = decrease <= cfg.rel_decrease_tol * fx.abs();
        fx = fnew;
        if small {
            break;
        }
    }
    Ok(LbfgsOutcome {
        grad_norm_inf: norm_inf(&g),
        x,
        value: fx,
        iterations,
        evaluations,
        stalled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((v, g))
        };
        let cfg = LbfgsConfig {
            max_iter: 500,
            grad_tol: 1e-10,
            ..LbfgsConfig::default()
        };
        let out = lbfgs(f, vec![-1.2, 1.0], &cfg).unwrap();
        assert!((out.x[0] - 1.0).abs() < 1e-7 && (out.x[1] - 1.0).abs() < 1e-7, "{out:?}");
    }

    #[test]
    fn ill_conditioned_quadratic() {
        let d: Vec<f64> = (0..50).map(|i| 10f64.powf(i as f64 / 49.0 * 4.0)).collect();
        let f = |x: &[f64]| {
            let v = 0.5 * x.iter().zip(&d).map(|(a, k)| k * a * a).sum::<f64>();
            Ok((v, x.iter().zip(&d).map(|(a, k)| k * a).collect()))
        };
        let cfg = LbfgsConfig {
            max_iter: 1000,
            grad_tol: 1e-6,
            ..LbfgsConfig::default()
        };
        let out = lbfgs(f, vec![1.0; 50], &cfg).unwrap();
        // starting gradient is 1e4
        assert!(out.grad_norm_inf <= 1e-6, "{out:?}");
    }
}
