//! Small derivative-free and quasi-Newton optimizers for the low-dimensional
//! outer problems (variance-component ratios, Laplace objectives).
//!
//! All routines minimize. Objectives are expected to be smooth except at
//! parameter-space boundaries, which callers handle by log-transforming.

/// Trace of accepted (monotone) objective values, for convergence reporting.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub evaluations: usize,
    pub accepted: Vec<f64>,
}

impl Trace {
    pub fn accept(&mut self, f: f64) {
        if self.accepted.last().map_or(true, |&last| f <= last) {
            self.accepted.push(f);
        }
    }
}

/// Nelder-Mead simplex minimization. Returns the best vertex.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    step: f64,
    max_iter: usize,
    ftol: f64,
    trace: &mut Trace,
) -> Vec<f64> {
    let d = start.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(d + 1);
    simplex.push(start.to_vec());
    for k in 0..d {
        let mut v = start.to_vec();
        v[k] += step;
        simplex.push(v);
    }
    let mut fx: Vec<f64> = simplex
        .iter()
        .map(|v| {
            trace.evaluations += 1;
            f(v)
        })
        .collect();

    for _ in 0..max_iter {
        // order ascending
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| fx[a].partial_cmp(&fx[b]).unwrap_or(std::cmp::Ordering::Equal));
        let best = order[0];
        let worst = order[d];
        let second_worst = order[d - 1];
        trace.accept(fx[best]);
        if (fx[worst] - fx[best]).abs() <= ftol * (1.0 + fx[best].abs()) {
            break;
        }
        // centroid of all but worst
        let mut centroid = vec![0.0; d];
        for (vi, v) in simplex.iter().enumerate() {
            if vi == worst {
                continue;
            }
            for k in 0..d {
                centroid[k] += v[k] / d as f64;
            }
        }
        let blend = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
            a.iter().zip(b).map(|(&x, &y)| x + t * (y - x)).collect()
        };
        // reflection
        let refl = blend(&centroid, &simplex[worst], -1.0);
        trace.evaluations += 1;
        let f_refl = f(&refl);
        if f_refl < fx[best] {
            // expansion
            let exp = blend(&centroid, &simplex[worst], -2.0);
            trace.evaluations += 1;
            let f_exp = f(&exp);
            if f_exp < f_refl {
                simplex[worst] = exp;
                fx[worst] = f_exp;
            } else {
                simplex[worst] = refl;
                fx[worst] = f_refl;
            }
        } else if f_refl < fx[second_worst] {
            simplex[worst] = refl;
            fx[worst] = f_refl;
        } else {
            // contraction
            let contr = blend(&centroid, &simplex[worst], 0.5);
            trace.evaluations += 1;
            let f_contr = f(&contr);
            if f_contr < fx[worst] {
                simplex[worst] = contr;
                fx[worst] = f_contr;
            } else {
                // shrink toward best
                let best_v = simplex[best].clone();
                for vi in 0..=d {
                    if vi == best {
                        continue;
                    }
                    simplex[vi] = blend(&best_v, &simplex[vi], 0.5);
                    trace.evaluations += 1;
                    fx[vi] = f(&simplex[vi]);
                }
            }
        }
    }
    let mut best = 0;
    for k in 1..=d {
        if fx[k] < fx[best] {
            best = k;
        }
    }
    trace.accept(fx[best]);
    simplex.swap_remove(best)
}

/// Central-difference gradient with per-coordinate steps.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        let hk = h * (1.0 + x[k].abs());
        xp[k] = x[k] + hk;
        let fp = f(&xp);
        xp[k] = x[k] - hk;
        let fm = f(&xp);
        xp[k] = x[k];
        g[k] = (fp - fm) / (2.0 * hk);
    }
    g
}

/// Damped Newton polish with finite-difference derivatives; falls back to a
/// gradient step whenever the FD Hessian is not positive definite. Intended
/// for 1-3 dimensional problems near their optimum.
///
/// Returns (x, final objective, final gradient inf-norm, iterations).
pub fn newton_polish<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    h: f64,
    grad_tol: impl Fn(f64) -> f64,
    max_iter: usize,
    trace: &mut Trace,
) -> (Vec<f64>, f64, f64, usize) {
    let d = start.len();
    let mut x = start.to_vec();
    trace.evaluations += 1;
    let mut fx = f(&x);
    trace.accept(fx);
    let mut grad_norm = f64::INFINITY;
    let mut iters = 0;
    for _ in 0..max_iter {
        iters += 1;
        let g = fd_gradient(
            |v| {
                trace.evaluations += 1;
                f(v)
            },
            &x,
            h,
        );
        grad_norm = g.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        if grad_norm <= grad_tol(fx) {
            break;
        }
        // FD Hessian
        let mut hess = vec![vec![0.0; d]; d];
        let mut xp = x.clone();
        for a in 0..d {
            let ha = h * (1.0 + x[a].abs());
            xp[a] = x[a] + ha;
            let gp = fd_gradient(
                |v| {
                    trace.evaluations += 1;
                    f(v)
                },
                &xp,
                h,
            );
            xp[a] = x[a] - ha;
            let gm = fd_gradient(
                |v| {
                    trace.evaluations += 1;
                    f(v)
                },
                &xp,
                h,
            );
            xp[a] = x[a];
            for b in 0..d {
                hess[a][b] = (gp[b] - gm[b]) / (2.0 * ha);
            }
        }
        // symmetrize
        for a in 0..d {
            for b in (a + 1)..d {
                let m = 0.5 * (hess[a][b] + hess[b][a]);
                hess[a][b] = m;
                hess[b][a] = m;
            }
        }
        let step = solve_spd(&hess, &g).unwrap_or_else(|| {
            // gradient step scaled to unit inf-norm
            let s = grad_norm.max(1e-12);
            g.iter().map(|&v| v / s).collect()
        });
        // backtracking line search on the descent direction -step
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let cand: Vec<f64> = x.iter().zip(&step).map(|(&xi, &si)| xi - t * si).collect();
            trace.evaluations += 1;
            let fc = f(&cand);
            if fc < fx {
                x = cand;
                fx = fc;
                trace.accept(fx);
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (x, fx, grad_norm, iters)
}

/// BFGS with backtracking Armijo line search and finite-difference gradients.
/// Returns (x, objective, gradient inf-norm, iterations).
pub fn bfgs<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    h: f64,
    grad_tol: impl Fn(f64) -> f64,
    max_iter: usize,
    trace: &mut Trace,
) -> (Vec<f64>, f64, f64, usize) {
    let d = start.len();
    let mut x = start.to_vec();
    trace.evaluations += 1;
    let mut fx = f(&x);
    trace.accept(fx);
    let mut g = fd_gradient(
        |v| {
            trace.evaluations += 1;
            f(v)
        },
        &x,
        h,
    );
    // inverse Hessian approximation
    let mut hinv = vec![vec![0.0; d]; d];
    for k in 0..d {
        hinv[k][k] = 1.0;
    }
    let mut grad_norm = g.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let mut iters = 0;
    for _ in 0..max_iter {
        if grad_norm <= grad_tol(fx) {
            break;
        }
        iters += 1;
        // p = -Hinv g
        let mut p = vec![0.0; d];
        for a in 0..d {
            for b in 0..d {
                p[a] -= hinv[a][b] * g[b];
            }
        }
        let gdotp: f64 = g.iter().zip(&p).map(|(&gi, &pi)| gi * pi).sum();
        let mut dir = p.clone();
        let mut slope = gdotp;
        if !(slope < 0.0) {
            // reset to steepest descent
            for k in 0..d {
                hinv[k].iter_mut().for_each(|v| *v = 0.0);
                hinv[k][k] = 1.0;
            }
            dir = g.iter().map(|&v| -v).collect();
            slope = -g.iter().map(|&v| v * v).sum::<f64>();
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand: Vec<f64> = x.iter().zip(&dir).map(|(&xi, &pi)| xi + t * pi).collect();
            trace.evaluations += 1;
            let fc = f(&cand);
            if fc <= fx + 1e-4 * t * slope {
                accepted = Some((cand, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((xn, fn_)) = accepted else { break };
        let gn = fd_gradient(
            |v| {
                trace.evaluations += 1;
                f(v)
            },
            &xn,
            h,
        );
        // BFGS update
        let s: Vec<f64> = xn.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let yv: Vec<f64> = gn.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(&a, &b)| a * b).sum();
        if sy > 1e-12 {
            let rho = 1.0 / sy;
            // Hinv = (I - rho s y') Hinv (I - rho y s') + rho s s'
            let mut hy = vec![0.0; d];
            for a in 0..d {
                for b in 0..d {
                    hy[a] += hinv[a][b] * yv[b];
                }
            }
            let yhy: f64 = yv.iter().zip(&hy).map(|(&a, &b)| a * b).sum();
            for a in 0..d {
                for b in 0..d {
                    hinv[a][b] += (sy + yhy) * rho * rho * s[a] * s[b]
                        - rho * (hy[a] * s[b] + s[a] * hy[b]);
                }
            }
        }
        x = xn;
        fx = fn_;
        trace.accept(fx);
        g = gn;
        grad_norm = g.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    }
    (x, fx, grad_norm, iters)
}

fn solve_spd(a: &[Vec<f64>], b: &[f64]) -> Option<Vec<f64>> {
    // Cholesky for tiny dense systems.
    let d = b.len();
    let mut l = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i][j] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut y = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i][k] * y[k];
        }
        y[i] = s / l[i][i];
    }
    let mut x = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = y[i];
        for k in (i + 1)..d {
            s -= l[k][i] * x[k];
        }
        x[i] = s / l[i][i];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn rosenbrockish(x: &[f64]) -> f64 {
        // smooth convex-ish bowl with cross term
        let (a, b) = (x[0] - 1.5, x[1] + 0.5);
        a * a + 2.0 * b * b + 0.5 * a * b
    }

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let mut trace = Trace::default();
        let x = nelder_mead(rosenbrockish, &[0.0, 0.0], 0.5, 400, 1e-14, &mut trace);
        let (x0, x1) = quadratic_minimum();
        assert_abs_diff_eq!(x[0], x0, epsilon = 1e-4);
        assert_abs_diff_eq!(x[1], x1, epsilon = 1e-4);
        // accepted values are monotone by construction
        for w in trace.accepted.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    fn quadratic_minimum() -> (f64, f64) {
        // grad: 2a + 0.5b = 0, 4b + 0.5a = 0 with a = x0-1.5, b = x1+0.5
        // => a = b = 0
        (1.5, -0.5)
    }

    #[test]
    fn newton_polish_reaches_tight_gradient() {
        let mut trace = Trace::default();
        let (x, _f, g, _it) = newton_polish(
            rosenbrockish,
            &[1.0, 0.0],
            1e-5,
            |_| 1e-9,
            50,
            &mut trace,
        );
        assert!(g < 1e-9, "gradient {g}");
        assert_abs_diff_eq!(x[0], 1.5, epsilon = 1e-8);
    }

    #[test]
    fn bfgs_minimizes_quartic() {
        let f = |x: &[f64]| (x[0] - 2.0).powi(4) + (x[1] + 1.0).powi(2) + x[0] * 0.0;
        let mut trace = Trace::default();
        let (x, _f, g, _it) = bfgs(f, &[0.0, 0.0], 1e-6, |_| 1e-7, 200, &mut trace);
        assert!(g < 1e-7);
        assert_abs_diff_eq!(x[1], -1.0, epsilon = 1e-5);
        assert!((x[0] - 2.0).abs() < 5e-2); // quartic floor is flat
    }
}
