//! Moving horizon estimation over a linear model.
//!
//! Each window minimizes
//!
//! ```text
//! J_t = Σ_{k=t-N}^{t}   ‖y_k - C x_k‖²_R
//!     + Σ_{k=t-N}^{t-1} ‖x_{k+1} - A x_k - B u_k‖²_Q
//!     + ‖x_{t-N} - x̄‖²_{P⁻¹}
//! ```
//!
//! `Q` and `R` are cost weights; `P` is a covariance propagated between
//! windows with the Kalman Riccati recursion, so the arrival term weighs by
//! its inverse. The window problem is a linear least-squares problem in the
//! `(N+1)·n_x` stacked states and is solved exactly by Householder QR.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};
use crate::model::LinearModel;

#[derive(Clone, Debug, PartialEq)]
pub struct MheConfig {
    /// Window length `N`; each window holds `N + 1` states.
    pub horizon: usize,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub p0: DMatrix<f64>,
    pub x0_guess: DVector<f64>,
}

impl MheConfig {
    /// Convenience constructor taking diagonals.
    pub fn diagonal(horizon: usize, q: &[f64], r: &[f64], p0: &[f64], x0_guess: &[f64]) -> Result<Self> {
        let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        let cfg = MheConfig {
            horizon,
            q: diag(q),
            r: diag(r),
            p0: diag(p0),
            x0_guess: DVector::from_column_slice(x0_guess),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::invalid("mhe horizon N must be >= 1"));
        }
        let n_x = self.q.nrows();
        for (name, m) in [("Q", &self.q), ("R", &self.r), ("P0", &self.p0)] {
            check_spd(name, m)?;
        }
        if self.p0.nrows() != n_x || self.x0_guess.len() != n_x {
            return Err(Error::invalid("Q, P0 and x0_guess must share the state dimension"));
        }
        Ok(())
    }

    fn check_model(&self, model: &LinearModel) -> Result<()> {
        if model.n_x() != self.q.nrows() || model.n_y() != self.r.nrows() {
            return Err(Error::invalid(format!(
                "model is {}-state/{}-output but weights are {}x{} / {}x{}",
                model.n_x(),
                model.n_y(),
                self.q.nrows(),
                self.q.ncols(),
                self.r.nrows(),
                self.r.ncols()
            )));
        }
        Ok(())
    }
}

fn check_spd(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::invalid(format!("{name} must be square")));
    }
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(Error::invalid(format!("{name} must be symmetric")));
    }
    if Cholesky::new(m.clone()).is_none() {
        return Err(Error::invalid(format!("{name} must be positive definite")));
    }
    Ok(())
}

/// Prior for the first state of a window.
#[derive(Clone, Debug, PartialEq)]
pub struct ArrivalState {
    pub x_bar: DVector<f64>,
    /// Covariance of `x_bar`.
    pub p: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSolution {
    /// `x̂_{t-N|t} .. x̂_{t|t}`.
    pub estimates: Vec<DVector<f64>>,
    pub stage_cost: f64,
}

/// Square-root weights: `‖e‖²_M = ‖S e‖²`.
struct SqrtWeights {
    s_q: DMatrix<f64>,
    s_r: DMatrix<f64>,
}

impl SqrtWeights {
    fn new(cfg: &MheConfig) -> Result<Self> {
        let upper = |name: &str, m: &DMatrix<f64>| {
            Cholesky::new(m.clone())
                .map(|c| c.l().transpose())
                .ok_or_else(|| Error::invalid(format!("{name} must be positive definite")))
        };
        Ok(SqrtWeights {
            s_q: upper("Q", &cfg.q)?,
            s_r: upper("R", &cfg.r)?,
        })
    }
}

/// `L⁻¹` where `P = L Lᵀ`, so that `‖e‖²_{P⁻¹} = ‖L⁻¹ e‖²`.
fn inverse_sqrt_cov(p: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol: Cholesky<f64, Dyn> = Cholesky::new(p.clone()).ok_or(Error::SingularWindow)?;
    let n = p.nrows();
    chol.l()
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(Error::SingularWindow)
}

fn check_window(model: &LinearModel, ys: &[DVector<f64>], us: &[DVector<f64>], arrival: &ArrivalState) -> Result<()> {
    if ys.len() != us.len() + 1 {
        return Err(Error::invalid(format!(
            "window has {} measurements and {} inputs; expected one more measurement than inputs",
            ys.len(),
            us.len()
        )));
    }
    if ys.iter().any(|y| y.len() != model.n_y()) {
        return Err(Error::invalid("measurement dimension does not match C"));
    }
    if model.n_u() > 0 && us.iter().any(|u| u.len() != model.n_u()) {
        return Err(Error::invalid("input dimension does not match B"));
    }
    if arrival.x_bar.len() != model.n_x() || arrival.p.shape() != (model.n_x(), model.n_x()) {
        return Err(Error::invalid("arrival state dimension does not match A"));
    }
    Ok(())
}

fn solve_window_with(
    model: &LinearModel,
    ys: &[DVector<f64>],
    us: &[DVector<f64>],
    arrival: &ArrivalState,
    w: &SqrtWeights,
) -> Result<WindowSolution> {
    check_window(model, ys, us, arrival)?;
    let n = model.n_x();
    let ny = model.n_y();
    let steps = us.len();
    let cols = (steps + 1) * n;
    let rows = n + (steps + 1) * ny + steps * n;
    let mut m = DMatrix::zeros(rows, cols);
    let mut rhs = DVector::zeros(rows);

    let s_p = inverse_sqrt_cov(&arrival.p)?;
    m.view_mut((0, 0), (n, n)).copy_from(&s_p);
    rhs.rows_mut(0, n).copy_from(&(&s_p * &arrival.x_bar));

    let s_rc = &w.s_r * &model.c;
    let mut row = n;
    for (k, y) in ys.iter().enumerate() {
        m.view_mut((row, k * n), (ny, n)).copy_from(&s_rc);
        rhs.rows_mut(row, ny).copy_from(&(&w.s_r * y));
        row += ny;
    }
    let s_qa = &w.s_q * &model.a;
    for (k, u) in us.iter().enumerate() {
        m.view_mut((row, (k + 1) * n), (n, n)).copy_from(&w.s_q);
        m.view_mut((row, k * n), (n, n)).copy_from(&(-&s_qa));
        if model.n_u() > 0 {
            rhs.rows_mut(row, n).copy_from(&(&w.s_q * (&model.b * u)));
        }
        row += n;
    }

    let qr = m.clone().qr();
    let r = qr.r();
    let diag_max = r.diagonal().amax();
    if !(diag_max > 0.0) || r.diagonal().iter().any(|d| d.abs() <= 1e-13 * diag_max) {
        return Err(Error::SingularWindow);
    }
    let qtb = qr.q().transpose() * &rhs;
    let z = r.solve_upper_triangular(&qtb).ok_or(Error::SingularWindow)?;
    let stage_cost = (&m * &z - &rhs).norm_squared();
    let estimates = (0..=steps).map(|k| z.rows(k * n, n).into_owned()).collect();
    Ok(WindowSolution { estimates, stage_cost })
}

/// Exact minimizer of one window's quadratic cost.
///
/// `ys` holds the `N+1` measurements `y_{t-N}..y_t` and `us` the `N` inputs
/// `u_{t-N}..u_{t-1}`. The window length is taken from the data, not from
/// `cfg.horizon`.
pub fn solve_window(
    model: &LinearModel,
    ys: &[DVector<f64>],
    us: &[DVector<f64>],
    arrival: &ArrivalState,
    cfg: &MheConfig,
) -> Result<WindowSolution> {
    cfg.check_model(model)?;
    let w = SqrtWeights::new(cfg)?;
    solve_window_with(model, ys, us, arrival, &w)
}

/// One step of `P⁺ = A P Aᵀ - A P Cᵀ (C P Cᵀ + R)⁻¹ C P Aᵀ + Q`,
/// symmetrized.
pub fn riccati_update(model: &LinearModel, p: &DMatrix<f64>, q_cov: &DMatrix<f64>, r_cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = model.n_x();
    if p.shape() != (n, n) || q_cov.shape() != (n, n) || r_cov.shape() != (model.n_y(), model.n_y()) {
        return Err(Error::invalid("riccati_update: covariance dimensions do not match the model"));
    }
    let a = &model.a;
    let c = &model.c;
    let s = c * p * c.transpose() + r_cov;
    let cpa = c * p * a.transpose();
    let gain_term = s.lu().solve(&cpa).ok_or(Error::SingularInnovation)?;
    if gain_term.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularInnovation);
    }
    let apa = a * p * a.transpose();
    let m = &apa - cpa.transpose() * gain_term + q_cov;
    Ok((&m + m.transpose()) * 0.5)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MheRun {
    /// Committed estimates `x̂_0..x̂_T`.
    pub estimates: Vec<DVector<f64>>,
    /// Sum of the per-window costs.
    pub total_cost: f64,
    pub window_costs: Vec<f64>,
}

/// What one window saw and produced; handed to the observer of
/// [`run_trajectory_observed`].
pub struct WindowRecord<'a> {
    pub t: usize,
    pub arrival: &'a ArrivalState,
    pub solution: &'a WindowSolution,
}

/// Sweeps windows `t = N..T` over the full record `y_0..y_T`, `u_0..u_{T-1}`.
///
/// The first window commits all of `x̂_0..x̂_N`; later windows commit
/// `x̂_{t|t}`. After each window the prior advances to
/// `x̄ = A x̂_{t-N|t} + B u_{t-N}` and `P` takes one Riccati step with the
/// cost weights `Q`, `R`.
pub fn run_trajectory(model: &LinearModel, ys: &[DVector<f64>], us: &[DVector<f64>], cfg: &MheConfig) -> Result<MheRun> {
    run_trajectory_observed(model, ys, us, cfg, |_| {})
}

pub fn run_trajectory_observed<F>(
    model: &LinearModel,
    ys: &[DVector<f64>],
    us: &[DVector<f64>],
    cfg: &MheConfig,
    mut observe: F,
) -> Result<MheRun>
where
    F: FnMut(WindowRecord<'_>),
{
    cfg.validate()?;
    cfg.check_model(model)?;
    let n_win = cfg.horizon;
    if ys.is_empty() || us.len() + 1 != ys.len() {
        return Err(Error::invalid(format!(
            "record has {} measurements and {} inputs; expected T+1 and T",
            ys.len(),
            us.len()
        )));
    }
    let t_end = us.len();
    if t_end < n_win {
        return Err(Error::invalid(format!(
            "record length T = {t_end} is shorter than the horizon N = {n_win}"
        )));
    }
    let w = SqrtWeights::new(cfg)?;
    let mut arrival = ArrivalState {
        x_bar: cfg.x0_guess.clone(),
        p: cfg.p0.clone(),
    };
    let mut estimates = Vec::with_capacity(t_end + 1);
    let mut window_costs = Vec::with_capacity(t_end - n_win + 1);
    let mut total_cost = 0.0;
    let wrap = |t: usize| move |e: Error| Error::Window { window: t, source: Box::new(e) };

    for t in n_win..=t_end {
        let start = t - n_win;
        let sol = solve_window_with(model, &ys[start..=t], &us[start..t], &arrival, &w).map_err(wrap(t))?;
        if t == n_win {
            estimates.extend(sol.estimates.iter().cloned());
        } else {
            estimates.push(sol.estimates[n_win].clone());
        }
        total_cost += sol.stage_cost;
        window_costs.push(sol.stage_cost);
        observe(WindowRecord {
            t,
            arrival: &arrival,
            solution: &sol,
        });
        let x_bar = model.predict(&sol.estimates[0], &us[start]);
        let p = riccati_update(model, &arrival.p, &cfg.q, &cfg.r).map_err(wrap(t))?;
        if x_bar.iter().any(|v| !v.is_finite()) || p.iter().any(|v| !v.is_finite()) {
            return Err(wrap(t)(Error::NumericDivergence { step: t }));
        }
        arrival = ArrivalState { x_bar, p };
    }
    Ok(MheRun {
        estimates,
        total_cost,
        window_costs,
    })
}
