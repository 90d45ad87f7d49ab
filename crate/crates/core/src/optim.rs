//! Limited-memory BFGS for small smooth unconstrained problems.

use std::collections::VecDeque;

use nalgebra::DVector;

pub(crate) struct LbfgsOptions {
    pub memory: usize,
    pub max_iter: usize,
    pub f_tol: f64,
    pub g_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            memory: 6,
            max_iter: 100,
            f_tol: 1e-10,
            g_tol: 1e-7,
        }
    }
}

/// Minimizes `f`, where `eval(x)` returns `(f(x), grad f(x))`, or `None` when
/// `x` is outside the domain. Returns the best point found and its value.
pub(crate) fn minimize<F>(x0: DVector<f64>, opts: &LbfgsOptions, mut eval: F) -> Option<(DVector<f64>, f64)>
where
    F: FnMut(&DVector<f64>) -> Option<(f64, DVector<f64>)>,
{
    let (mut f, mut g) = eval(&x0)?;
    if !f.is_finite() {
        return None;
    }
    let mut x = x0;
    let mut history: VecDeque<(DVector<f64>, DVector<f64>, f64)> = VecDeque::new();

    for _ in 0..opts.max_iter {
        if g.norm() < opts.g_tol {
            break;
        }
        let mut dir = two_loop(&g, &history);
        let mut slope = g.dot(&dir);
        if !(slope < 0.0) {
            history.clear();
            dir = -&g;
            slope = -g.norm_squared();
        }
        let mut step = if history.is_empty() {
            1.0 / g.norm().max(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &x + &dir * step;
            if let Some((ft, gt)) = eval(&trial) {
                if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                    accepted = Some((trial, ft, gt));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };
        let s = &xn - &x;
        let y = &gn - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if history.len() == opts.memory {
                history.pop_front();
            }
            history.push_back((s, y, 1.0 / sy));
        }
        let df = f - fn_;
        x = xn;
        f = fn_;
        g = gn;
        if df.abs() <= opts.f_tol * (1.0 + f.abs()) {
            break;
        }
    }
    Some((x, f))
}

fn two_loop(g: &DVector<f64>, history: &VecDeque<(DVector<f64>, DVector<f64>, f64)>) -> DVector<f64> {
    let mut q = g.clone();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = rho * s.dot(&q);
        q -= y * a;
        alphas.push(a);
    }
    if let Some((s, y, _)) = history.back() {
        q *= s.dot(y) / y.norm_squared();
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = rho * y.dot(&q);
        q += s * (a - b);
    }
    -q
}
