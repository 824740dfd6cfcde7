//! Box-constrained limited-memory quasi-Newton minimization.
//!
//! Projected L-BFGS: the two-loop direction is computed on the free
//! variables (those not pinned at a bound by the gradient), and a projected
//! Armijo backtracking search keeps every iterate inside the box.

use std::collections::VecDeque;

#[derive(Clone, Copy, Debug)]
pub struct LbfgsConfig {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when the infinity norm of the projected gradient drops below this.
    pub grad_tol: f64,
    /// Stop when the relative objective decrease drops below this.
    pub f_tol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            max_iter: 100,
            memory: 8,
            grad_tol: 1e-6,
            f_tol: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evaluations: usize,
}

fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn projected_grad_norm(x: &[f64], g: &[f64], lo: &[f64], hi: &[f64]) -> f64 {
    let mut n: f64 = 0.0;
    for i in 0..x.len() {
        let pg = if x[i] <= lo[i] && g[i] > 0.0 || x[i] >= hi[i] && g[i] < 0.0 {
            0.0
        } else {
            g[i]
        };
        n = n.max(pg.abs());
    }
    n
}

/// Minimizes `f` over the box `[lo, hi]` starting from `x0` (projected first).
///
/// `f` returns the value and gradient, or `None` where it cannot be
/// evaluated; such points are treated as infinitely bad by the line search.
/// Returns `None` only if `x0` itself cannot be evaluated.
pub fn minimize_box<F>(mut f: F, x0: &[f64], lo: &[f64], hi: &[f64], cfg: &LbfgsConfig) -> Option<Minimum>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    project(&mut x, lo, hi);
    let mut evaluations = 1;
    let (mut fx, mut g) = f(&x)?;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut mem: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(cfg.memory);
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        if projected_grad_norm(&x, &g, lo, hi) < cfg.grad_tol {
            break;
        }
        iterations += 1;

        let free: Vec<bool> = (0..n)
            .map(|i| !(x[i] <= lo[i] && g[i] > 0.0 || x[i] >= hi[i] && g[i] < 0.0))
            .collect();

        // Two-loop recursion restricted to free coordinates.
        let mut q: Vec<f64> = (0..n).map(|i| if free[i] { g[i] } else { 0.0 }).collect();
        let mut alphas = Vec::with_capacity(mem.len());
        for (s, y, rho) in mem.iter().rev() {
            let a = rho * (0..n).filter(|&i| free[i]).map(|i| s[i] * q[i]).sum::<f64>();
            for i in 0..n {
                if free[i] {
                    q[i] -= a * y[i];
                }
            }
            alphas.push(a);
        }
        if let Some((s, y, _)) = mem.back() {
            let yy = dot(y, y);
            if yy > 0.0 {
                let gamma = dot(s, y) / yy;
                q.iter_mut().for_each(|v| *v *= gamma);
            }
        }
        for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
            let b = rho * (0..n).filter(|&i| free[i]).map(|i| y[i] * q[i]).sum::<f64>();
            for i in 0..n {
                if free[i] {
                    q[i] += s[i] * (a - b);
                }
            }
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        if dot(&dir, &g) >= 0.0 {
            mem.clear();
            dir = (0..n).map(|i| if free[i] { -g[i] } else { 0.0 }).collect();
        }
        let mut step = if mem.is_empty() {
            let dn = dir.iter().map(|v| v.abs()).fold(0.0, f64::max);
            if dn > 0.0 {
                (1.0 / dn).min(1.0)
            } else {
                1.0
            }
        } else {
            1.0
        };

        // Projected Armijo backtracking.
        let mut accepted = None;
        for _ in 0..40 {
            let mut xn: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect();
            project(&mut xn, lo, hi);
            let delta: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
            let decrease = dot(&g, &delta);
            if decrease >= 0.0 {
                step *= 0.5;
                continue;
            }
            evaluations += 1;
            if let Some((fn_, gn)) = f(&xn) {
                if fn_.is_finite() && gn.iter().all(|v| v.is_finite()) && fn_ <= fx + 1e-4 * decrease {
                    accepted = Some((xn, fn_, gn, delta));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn, s)) = accepted else {
            if mem.is_empty() {
                break;
            }
            mem.clear();
            continue;
        };
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).max(1e-300) {
            if mem.len() == cfg.memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        let rel = (fx - fn_) / fx.abs().max(fn_.abs()).max(1.0);
        x = xn;
        fx = fn_;
        g = gn;
        if rel < cfg.f_tol {
            break;
        }
    }
    Some(Minimum {
        x,
        f: fx,
        iterations,
        evaluations,
    })
}
