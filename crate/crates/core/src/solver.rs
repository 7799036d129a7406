//! Limited-memory quasi-Newton minimizer with backtracking line search and
//! optional box projection. Used for the pose update of every EM iteration.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub max_inner_iters: usize,
    /// Stop when `‖projected gradient‖∞ ≤ grad_tol · max(1, |f|)`.
    pub grad_tol: f64,
    /// Stop when `‖Δx‖∞ ≤ step_tol · (1 + ‖x‖∞)`.
    pub step_tol: f64,
    /// Optional `[lo, hi]` per parameter.
    pub param_bounds: Option<Vec<(f64, f64)>>,
    /// Number of stored curvature pairs.
    pub memory: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_inner_iters: 100,
            grad_tol: 1e-9,
            step_tol: 1e-10,
            param_bounds: None,
            memory: 8,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self, n: usize) -> Result<()> {
        if !(self.grad_tol > 0.0 && self.step_tol > 0.0) {
            return Err(Error::InvalidArgument("solver tolerances must be positive".into()));
        }
        if self.memory == 0 {
            return Err(Error::InvalidArgument("solver memory must be at least 1".into()));
        }
        if let Some(b) = &self.param_bounds {
            if b.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: b.len(),
                });
            }
            if b.iter().any(|(lo, hi)| !(lo < hi)) {
                return Err(Error::InvalidArgument("bounds must satisfy lo < hi".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverStatus {
    ConvergedGrad,
    ConvergedStep,
    MaxIters,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    pub evaluations: usize,
    /// Objective at every accepted iterate, starting with `f(x0)`.
    pub history: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn project(x: &mut [f64], bounds: Option<&[(f64, f64)]>) {
    if let Some(b) = bounds {
        for (v, (lo, hi)) in x.iter_mut().zip(b) {
            *v = v.clamp(*lo, *hi);
        }
    }
}

/// `P(x − g) − x`, which is `−g` without bounds.
fn projected_gradient(x: &[f64], g: &[f64], bounds: Option<&[(f64, f64)]>) -> Vec<f64> {
    let mut moved: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - b).collect();
    project(&mut moved, bounds);
    moved.iter().zip(x).map(|(a, b)| a - b).collect()
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Minimizes `f` with gradient `g` from `x0`. See [`minimize_fg`].
pub fn minimize(
    mut f: impl FnMut(&[f64]) -> f64,
    mut g: impl FnMut(&[f64]) -> Vec<f64>,
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<Minimum> {
    minimize_fg(|x| (f(x), g(x)), x0, opts)
}

/// Minimizes a function given as a combined value-and-gradient callable.
///
/// The accepted iterates have non-increasing objective values. A non-finite
/// value or gradient aborts with [`Error::NonFinite`] carrying the last
/// accepted iterate.
pub fn minimize_fg(
    mut fg: impl FnMut(&[f64]) -> (f64, Vec<f64>),
    x0: &[f64],
    opts: &SolverOptions,
) -> Result<Minimum> {
    let n = x0.len();
    opts.validate(n)?;
    let bounds = opts.param_bounds.as_deref();

    let mut x = x0.to_vec();
    project(&mut x, bounds);
    let (mut fx, mut gx) = fg(&x);
    let mut evaluations = 1;
    if !fx.is_finite() || !all_finite(&gx) || gx.len() != n {
        return Err(Error::NonFinite {
            iteration: 0,
            last_good: x,
            last_value: fx,
        });
    }
    let mut history = vec![fx];
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(opts.memory);

    for iter in 0..opts.max_inner_iters {
        let pg = projected_gradient(&x, &gx, bounds);
        if inf_norm(&pg) <= opts.grad_tol * fx.abs().max(1.0) {
            return Ok(Minimum {
                x,
                value: fx,
                status: SolverStatus::ConvergedGrad,
                iterations: iter,
                evaluations,
                history,
            });
        }

        // Parameters pinned at a bound with the gradient pushing outward are
        // frozen for this iteration.
        let free: Vec<bool> = match bounds {
            Some(b) => (0..n)
                .map(|k| {
                    let (lo, hi) = b[k];
                    !((x[k] <= lo && gx[k] > 0.0) || (x[k] >= hi && gx[k] < 0.0))
                })
                .collect(),
            None => vec![true; n],
        };

        let mut attempt = 0;
        let (x_new, f_new, g_new) = loop {
            let dir = if pairs.is_empty() {
                let free_norm = gx.iter().zip(&free).filter(|(_, &fr)| fr).fold(0.0f64, |m, (v, _)| m.max(v.abs()));
                let scale = 1.0 / free_norm.max(f64::MIN_POSITIVE);
                gx.iter()
                    .zip(&free)
                    .map(|(v, &fr)| if fr { -v * scale } else { 0.0 })
                    .collect::<Vec<_>>()
            } else {
                let mut d = two_loop(&gx, &pairs);
                for (v, &fr) in d.iter_mut().zip(&free) {
                    if !fr {
                        *v = 0.0;
                    }
                }
                if dot(&d, &gx) >= 0.0 {
                    pairs.clear();
                    continue;
                }
                d
            };

            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..MAX_BACKTRACKS {
                let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + alpha * d).collect();
                project(&mut trial, bounds);
                let step: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                let decrease = dot(&gx, &step);
                if inf_norm(&step) == 0.0 {
                    break;
                }
                let (ft, gt) = fg(&trial);
                evaluations += 1;
                if !ft.is_finite() || !all_finite(&gt) {
                    return Err(Error::NonFinite {
                        iteration: iter,
                        last_good: x,
                        last_value: fx,
                    });
                }
                if ft <= fx + ARMIJO_C1 * decrease && ft < fx {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                alpha *= 0.5;
            }
            match accepted {
                Some(a) => break a,
                None if !pairs.is_empty() && attempt == 0 => {
                    pairs.clear();
                    attempt += 1;
                }
                None => {
                    return Ok(Minimum {
                        x,
                        value: fx,
                        status: SolverStatus::ConvergedStep,
                        iterations: iter,
                        evaluations,
                        history,
                    });
                }
            }
        };

        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if pairs.len() == opts.memory {
                pairs.pop_front();
            }
            pairs.push_back((s.clone(), y, 1.0 / sy));
        }
        let small_step = inf_norm(&s) <= opts.step_tol * (1.0 + inf_norm(&x_new));
        x = x_new;
        fx = f_new;
        gx = g_new;
        history.push(fx);
        if small_step {
            return Ok(Minimum {
                x,
                value: fx,
                status: SolverStatus::ConvergedStep,
                iterations: iter + 1,
                evaluations,
                history,
            });
        }
    }

    Ok(Minimum {
        x,
        value: fx,
        status: SolverStatus::MaxIters,
        iterations: opts.max_inner_iters,
        evaluations,
        history,
    })
}

/// L-BFGS two-loop recursion: returns `−H·g`.
fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        for (qk, yk) in q.iter_mut().zip(y) {
            *qk -= a * yk;
        }
        alphas.push(a);
    }
    let (s, y, _) = pairs.back().expect("non-empty");
    let gamma = dot(s, y) / dot(y, y);
    for v in q.iter_mut() {
        *v *= gamma;
    }
    for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
        let b = rho * dot(y, &q);
        for (qk, sk) in q.iter_mut().zip(s) {
            *qk += (a - b) * sk;
        }
    }
    q.iter().map(|v| -v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sphere(x: &[f64]) -> (f64, Vec<f64>) {
        (dot(x, x), x.iter().map(|v| 2.0 * v).collect())
    }

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (f, g)
    }

    #[test]
    fn convex_quadratic() {
        let m = minimize_fg(sphere, &[1.0; 6], &SolverOptions::default()).unwrap();
        assert!(m.value < 1e-12, "f* = {}", m.value);
        assert!(m.x.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn rosenbrock_from_standard_start() {
        let opts = SolverOptions {
            max_inner_iters: 500,
            grad_tol: 1e-12,
            step_tol: 1e-14,
            ..Default::default()
        };
        let m = minimize_fg(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert_relative_eq!(m.x[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(m.x[1], 1.0, epsilon = 1e-6);
    }

    #[test]
    fn history_is_monotone() {
        let opts = SolverOptions {
            max_inner_iters: 200,
            ..Default::default()
        };
        let m = minimize_fg(rosenbrock, &[-1.2, 1.0], &opts).unwrap();
        assert!(m.history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn split_callables() {
        let m = minimize(
            |x| sphere(x).0,
            |x| sphere(x).1,
            &[0.5, -0.3],
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(m.value < 1e-12);
    }

    #[test]
    fn bounds_are_respected_exactly() {
        let opts = SolverOptions {
            param_bounds: Some(vec![(0.5, 2.0), (-1.0, 1.0)]),
            ..Default::default()
        };
        let m = minimize_fg(sphere, &[1.5, 0.7], &opts).unwrap();
        assert_eq!(m.x[0], 0.5);
        assert!(m.x[1].abs() < 1e-6);
    }

    #[test]
    fn restart_at_minimum_is_idempotent() {
        let opts = SolverOptions::default();
        let first = minimize_fg(rosenbrock, &[-1.2, 1.0], &SolverOptions {
            max_inner_iters: 500,
            ..opts.clone()
        })
        .unwrap();
        let again = minimize_fg(rosenbrock, &first.x, &opts).unwrap();
        for (a, b) in again.x.iter().zip(&first.x) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn non_finite_value_is_an_error() {
        let err = minimize_fg(
            |x: &[f64]| {
                if x[0] < 0.5 {
                    (f64::NAN, vec![f64::NAN])
                } else {
                    (x[0] * x[0], vec![2.0 * x[0]])
                }
            },
            &[1.0],
            &SolverOptions::default(),
        )
        .unwrap_err();
        match err {
            Error::NonFinite { last_good, .. } => assert_eq!(last_good, vec![1.0]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn deterministic() {
        let a = minimize_fg(rosenbrock, &[-1.2, 1.0], &SolverOptions::default()).unwrap();
        let b = minimize_fg(rosenbrock, &[-1.2, 1.0], &SolverOptions::default()).unwrap();
        assert_eq!(a.x, b.x);
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn invalid_options() {
        let opts = SolverOptions {
            grad_tol: 0.0,
            ..Default::default()
        };
        assert!(minimize_fg(sphere, &[1.0], &opts).is_err());
        let opts = SolverOptions {
            param_bounds: Some(vec![(1.0, 0.0)]),
            ..Default::default()
        };
        assert!(minimize_fg(sphere, &[1.0], &opts).is_err());
    }
}
