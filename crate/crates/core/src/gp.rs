//! Gaussian-process surrogate with a squared-exponential kernel.
//!
//! Observed values are standardized to zero mean and unit variance before
//! fitting; the prior mean is zero in standardized units. `posterior`
//! reports in the original units, `posterior_standardized` in fitted units.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Bounds;
use crate::optim::{self, LbfgsOptions};
use crate::sim::stream_rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// First jitter tried when the factorization fails, relative to `σ_J²`.
pub const JITTER_START: f64 = 1e-8;
/// Largest jitter tried before giving up, relative to `σ_J²`.
pub const JITTER_MAX: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpHyperParams {
    /// `σ_J²`.
    pub signal_variance: f64,
    /// Per-dimension length scales `l_i`; the kernel uses `Λ = diag(l_i²)`.
    pub length_scales: Vec<f64>,
    /// `σ_n²` added to the kernel diagonal.
    pub noise_jitter: f64,
}

impl GpHyperParams {
    pub fn new(signal_variance: f64, length_scales: Vec<f64>, noise_jitter: f64) -> Result<Self> {
        let h = GpHyperParams {
            signal_variance,
            length_scales,
            noise_jitter,
        };
        h.validate()?;
        Ok(h)
    }

    pub fn dim(&self) -> usize {
        self.length_scales.len()
    }

    fn validate(&self) -> Result<()> {
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(Error::invalid("signal variance must be positive"));
        }
        if self.length_scales.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::invalid("length scales must be positive"));
        }
        if !(self.noise_jitter >= 0.0 && self.noise_jitter.is_finite()) {
            return Err(Error::invalid("noise jitter must be nonnegative"));
        }
        Ok(())
    }

    fn sq_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.length_scales)
            .map(|((x, y), l)| {
                let r = (x - y) / l;
                r * r
            })
            .sum()
    }

    fn kernel_unchecked(&self, a: &[f64], b: &[f64]) -> f64 {
        self.signal_variance * (-0.5 * self.sq_dist(a, b)).exp()
    }
}

/// `σ_J² exp(-½ (a-b)ᵀ Λ⁻¹ (a-b))`.
pub fn kernel_eval(hyper: &GpHyperParams, a: &[f64], b: &[f64]) -> Result<f64> {
    let d = hyper.dim();
    if a.len() != d || b.len() != d {
        return Err(Error::invalid(format!(
            "kernel expects dimension {d}, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(hyper.kernel_unchecked(a, b))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: f64,
    pub scale: f64,
}

impl Standardization {
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mean) / self.scale
    }

    pub fn invert(&self, z: f64) -> f64 {
        z * self.scale + self.mean
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpDataset {
    points: Vec<DVector<f64>>,
    values: Vec<f64>,
    standardization: Standardization,
}

impl GpDataset {
    /// Standardizes with the sample mean and (population) standard
    /// deviation; a zero spread falls back to scale 1.
    pub fn new(points: Vec<DVector<f64>>, values: Vec<f64>) -> Result<Self> {
        if points.len() != values.len() {
            return Err(Error::invalid(format!(
                "{} points but {} values",
                points.len(),
                values.len()
            )));
        }
        if points.is_empty() {
            return Err(Error::invalid("dataset must contain at least one point"));
        }
        let d = points[0].len();
        if points.iter().any(|p| p.len() != d) {
            return Err(Error::invalid("dataset points have mixed dimensions"));
        }
        if values.iter().any(|v| !v.is_finite()) || points.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("dataset contains non-finite entries"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var.sqrt() > 1e-300 * mean.abs().max(1.0) && var > 0.0 {
            var.sqrt()
        } else {
            1.0
        };
        Ok(GpDataset {
            points,
            values,
            standardization: Standardization { mean, scale },
        })
    }

    /// Uses a caller-provided standardization instead of the sample one.
    pub fn with_standardization(points: Vec<DVector<f64>>, values: Vec<f64>, standardization: Standardization) -> Result<Self> {
        if !(standardization.scale > 0.0 && standardization.scale.is_finite() && standardization.mean.is_finite()) {
            return Err(Error::invalid("standardization scale must be positive"));
        }
        let mut data = GpDataset::new(points, values)?;
        data.standardization = standardization;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn standardization(&self) -> Standardization {
        self.standardization
    }

    pub fn standardized_values(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.values.iter().map(|&v| self.standardization.apply(v)))
    }
}

/// A fitted GP. Immutable; refitting produces a new model.
#[derive(Clone, Debug)]
pub struct GpModel {
    hyper: GpHyperParams,
    data: GpDataset,
    jitter: f64,
    chol: Cholesky<f64, Dyn>,
    weights: DVector<f64>,
}

impl GpModel {
    pub fn fit(data: GpDataset, hyper: GpHyperParams) -> Result<Self> {
        hyper.validate()?;
        if hyper.dim() != data.dim() {
            return Err(Error::invalid(format!(
                "hyperparameters have dimension {} but data has {}",
                hyper.dim(),
                data.dim()
            )));
        }
        let k = kernel_matrix(&hyper, data.points());
        let (chol, jitter) = factor_with_jitter(&k, &hyper)?;
        let weights = chol.solve(&data.standardized_values());
        Ok(GpModel {
            hyper,
            data,
            jitter,
            chol,
            weights,
        })
    }

    pub fn hyper(&self) -> &GpHyperParams {
        &self.hyper
    }

    pub fn data(&self) -> &GpDataset {
        &self.data
    }

    /// Diagonal term actually added to `K`; at least `σ_n²`, larger when the
    /// factorization needed escalation.
    pub fn effective_jitter(&self) -> f64 {
        self.jitter
    }

    /// Lower-triangular factor `L` with `L Lᵀ = K + jitter·I`.
    pub fn factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Posterior mean and variance in standardized units.
    pub fn posterior_standardized(&self, query: &[f64]) -> Result<(f64, f64)> {
        if query.len() != self.hyper.dim() {
            return Err(Error::invalid(format!(
                "query has dimension {}, expected {}",
                query.len(),
                self.hyper.dim()
            )));
        }
        let kq = DVector::from_iterator(
            self.data.len(),
            self.data
                .points()
                .iter()
                .map(|p| self.hyper.kernel_unchecked(p.as_slice(), query)),
        );
        let mean = kq.dot(&self.weights);
        let mut v = kq;
        self.chol.l_dirty().solve_lower_triangular_mut(&mut v);
        let var = (self.hyper.signal_variance - v.norm_squared()).max(0.0);
        Ok((mean, var))
    }

    /// Posterior mean and variance in the units of the observed values.
    pub fn posterior(&self, query: &[f64]) -> Result<(f64, f64)> {
        let (m, v) = self.posterior_standardized(query)?;
        let s = self.data.standardization();
        Ok((s.invert(m), v * s.scale * s.scale))
    }

    /// Log marginal likelihood of the standardized values.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let y = self.data.standardized_values();
        let n = y.len() as f64;
        let log_det_half: f64 = self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * y.dot(&self.weights) - log_det_half - 0.5 * n * LN_2PI
    }
}

pub fn kernel_matrix(hyper: &GpHyperParams, points: &[DVector<f64>]) -> DMatrix<f64> {
    let n = points.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hyper.signal_variance;
        for j in 0..i {
            let v = hyper.kernel_unchecked(points[i].as_slice(), points[j].as_slice());
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn try_factor(k: &DMatrix<f64>, jitter: f64, floor: f64) -> Option<Cholesky<f64, Dyn>> {
    let mut m = k.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += jitter;
    }
    let chol = Cholesky::new(m)?;
    let pivots_ok = chol.l_dirty().diagonal().iter().all(|d| d * d > floor);
    pivots_ok.then_some(chol)
}

/// Factors `K + σ_n² I`; on failure retries with extra jitter starting at
/// `JITTER_START·σ_J²`, doubling up to `JITTER_MAX·σ_J²`.
fn factor_with_jitter(k: &DMatrix<f64>, hyper: &GpHyperParams) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let s = hyper.signal_variance;
    // Pivots below this are treated as a failed factorization.
    let floor = 1e-14 * s;
    let base = hyper.noise_jitter;
    if let Some(c) = try_factor(k, base, floor) {
        return Ok((c, base));
    }
    let mut extra = JITTER_START * s;
    while extra <= JITTER_MAX * s {
        if let Some(c) = try_factor(k, base + extra, floor) {
            return Ok((c, base + extra));
        }
        extra *= 2.0;
    }
    Err(Error::IllConditionedKernel { jitter: base + extra / 2.0 })
}

pub fn fit(data: GpDataset, hyper: GpHyperParams) -> Result<GpModel> {
    GpModel::fit(data, hyper)
}

/// `-½ yᵀ(K+σ_n²I)⁻¹y - ½ log det(K+σ_n²I) - (n/2) log 2π` on standardized
/// values.
pub fn log_marginal_likelihood(data: &GpDataset, hyper: &GpHyperParams) -> Result<f64> {
    Ok(GpModel::fit(data.clone(), hyper.clone())?.log_marginal_likelihood())
}

/// Box for the hyperparameter search, in natural (not log) units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperBounds {
    pub signal_variance: (f64, f64),
    pub length_scales: Vec<(f64, f64)>,
    pub noise_jitter: (f64, f64),
}

impl HyperBounds {
    /// Length scales in `[1e-3, 1e3]` times each dimension's width,
    /// `σ_J²` in `[1e-4, 1e4]`, `σ_n²` in `[1e-8, 1]`.
    pub fn for_box(bounds: &[Bounds]) -> Self {
        HyperBounds {
            signal_variance: (1e-4, 1e4),
            length_scales: bounds
                .iter()
                .map(|b| {
                    let w = if b.width() > 0.0 { b.width() } else { 1.0 };
                    (1e-3 * w, 1e3 * w)
                })
                .collect(),
            noise_jitter: (1e-8, 1.0),
        }
    }

    fn log_box(&self) -> Vec<(f64, f64)> {
        let mut v = Vec::with_capacity(self.length_scales.len() + 2);
        v.push(self.signal_variance);
        v.extend(self.length_scales.iter().copied());
        v.push(self.noise_jitter);
        v.into_iter().map(|(lo, hi)| (lo.ln(), hi.ln())).collect()
    }
}

fn hyper_from_log(p: &[f64]) -> GpHyperParams {
    let d = p.len() - 2;
    GpHyperParams {
        signal_variance: p[0].exp(),
        length_scales: p[1..=d].iter().map(|v| v.exp()).collect(),
        noise_jitter: p[d + 1].exp(),
    }
}

fn hyper_to_log(h: &GpHyperParams) -> Vec<f64> {
    let mut p = Vec::with_capacity(h.dim() + 2);
    p.push(h.signal_variance.ln());
    p.extend(h.length_scales.iter().map(|l| l.ln()));
    p.push(h.noise_jitter.max(1e-300).ln());
    p
}

/// LML and its gradient with respect to the log hyperparameters.
fn lml_and_grad(data: &GpDataset, hyper: &GpHyperParams) -> Option<(f64, Vec<f64>)> {
    let model = GpModel::fit(data.clone(), hyper.clone()).ok()?;
    let lml = model.log_marginal_likelihood();
    let n = data.len();
    let d = hyper.dim();
    let kinv = model.chol.inverse();
    let a = &model.weights;
    let pts = data.points();
    let mut grad = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..n {
            let w = a[i] * a[j] - kinv[(i, j)];
            let kf = hyper.kernel_unchecked(pts[i].as_slice(), pts[j].as_slice());
            let wk = w * kf;
            grad[0] += wk;
            for m in 0..d {
                let r = (pts[i][m] - pts[j][m]) / hyper.length_scales[m];
                grad[1 + m] += wk * r * r;
            }
            if i == j {
                grad[d + 1] += w * hyper.noise_jitter;
            }
        }
    }
    for g in &mut grad {
        *g *= 0.5;
    }
    Some((lml, grad))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Local ascent of the LML from `start` inside the log box.
fn local_search(data: &GpDataset, start: &[f64], log_box: &[(f64, f64)]) -> Option<(Vec<f64>, f64)> {
    let to_p = |z: &DVector<f64>| -> Vec<f64> {
        z.iter()
            .zip(log_box)
            .map(|(zi, (lo, hi))| lo + (hi - lo) * sigmoid(*zi))
            .collect()
    };
    let z0 = DVector::from_iterator(
        start.len(),
        start.iter().zip(log_box).map(|(p, (lo, hi))| {
            let u = ((p - lo) / (hi - lo)).clamp(1e-6, 1.0 - 1e-6);
            (u / (1.0 - u)).ln()
        }),
    );
    let eval = |z: &DVector<f64>| {
        let p = to_p(z);
        let (lml, g) = lml_and_grad(data, &hyper_from_log(&p))?;
        let grad = DVector::from_iterator(
            z.len(),
            g.iter().zip(&p).zip(log_box).map(|((gi, pi), (lo, hi))| {
                -gi * (pi - lo) * (hi - pi) / (hi - lo)
            }),
        );
        Some((-lml, grad))
    };
    let (z, f) = optim::minimize(z0, &LbfgsOptions::default(), eval)?;
    Some((to_p(&z), -f))
}

/// Maximizes the log marginal likelihood over `(σ_J², l, σ_n²)` in log
/// space. The first local search starts at `init` (projected into the box);
/// the remaining `restarts - 1` start at log-uniform draws. Never returns
/// hyperparameters with a lower LML than `init`.
pub fn optimize_hyperparams(
    data: &GpDataset,
    init: &GpHyperParams,
    restarts: usize,
    bounds: &HyperBounds,
    seed: u64,
) -> Result<GpHyperParams> {
    init.validate()?;
    if restarts == 0 {
        return Err(Error::invalid("restarts must be at least 1"));
    }
    if bounds.length_scales.len() != init.dim() || init.dim() != data.dim() {
        return Err(Error::invalid("hyperparameter bounds dimension mismatch"));
    }
    let log_box = bounds.log_box();
    let init_lml = log_marginal_likelihood(data, init).unwrap_or(f64::NEG_INFINITY);
    let mut best = (init.clone(), init_lml);

    let mut rng = stream_rng(seed, 0);
    let mut starts = vec![hyper_to_log(init)
        .into_iter()
        .zip(&log_box)
        .map(|(p, (lo, hi))| p.clamp(*lo, *hi))
        .collect::<Vec<_>>()];
    for _ in 1..restarts {
        starts.push(log_box.iter().map(|(lo, hi)| rng.gen_range(*lo..=*hi)).collect());
    }
    for start in &starts {
        let start_lml = log_marginal_likelihood(data, &hyper_from_log(start)).unwrap_or(f64::NEG_INFINITY);
        if start_lml > best.1 {
            best = (hyper_from_log(start), start_lml);
        }
        if let Some((p, lml)) = local_search(data, start, &log_box) {
            if lml > best.1 {
                best = (hyper_from_log(&p), lml);
            }
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::stream_rng;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn hyper(s: f64, l: &[f64], n: f64) -> GpHyperParams {
        GpHyperParams::new(s, l.to_vec(), n).unwrap()
    }

    fn pt(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn random_dataset(rng: &mut impl Rng, n: usize, d: usize) -> GpDataset {
        let points = (0..n)
            .map(|_| DVector::from_iterator(d, (0..d).map(|_| rng.gen_range(0.0..3.0))))
            .collect();
        let values = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        GpDataset::new(points, values).unwrap()
    }

    /// Conditioning of the explicit joint Gaussian over (training, query),
    /// using a dense inverse rather than the Cholesky path.
    fn joint_conditioning(model: &GpModel, q: &[f64]) -> (f64, f64) {
        let h = model.hyper();
        let data = model.data();
        let n = data.len();
        let mut joint = DMatrix::zeros(n + 1, n + 1);
        let mut all: Vec<&[f64]> = data.points().iter().map(|p| p.as_slice()).collect();
        all.push(q);
        for i in 0..=n {
            for j in 0..=n {
                let r2: f64 = all[i]
                    .iter()
                    .zip(all[j])
                    .zip(&h.length_scales)
                    .map(|((a, b), l)| ((a - b) / l).powi(2))
                    .sum();
                joint[(i, j)] = h.signal_variance * (-0.5 * r2).exp();
            }
        }
        let mut kxx = joint.view((0, 0), (n, n)).into_owned();
        for i in 0..n {
            kxx[(i, i)] += model.effective_jitter();
        }
        let kxq = joint.view((0, n), (n, 1)).into_owned();
        let kqq = joint[(n, n)];
        let inv = kxx.try_inverse().unwrap();
        let y = data.standardized_values();
        let mean = (kxq.transpose() * &inv * y)[(0, 0)];
        let var = kqq - (kxq.transpose() * &inv * &kxq)[(0, 0)];
        let s = data.standardization();
        (s.invert(mean), var.max(0.0) * s.scale * s.scale)
    }

    #[test]
    fn kernel_at_zero_distance() {
        let h = hyper(2.5, &[0.3, 1.2], 0.0);
        assert_eq!(kernel_eval(&h, &[1.0, 2.0], &[1.0, 2.0]).unwrap(), 2.5);
    }

    #[test]
    fn kernel_unit_distance_two() {
        let h = hyper(1.0, &[1.0, 1.0], 0.0);
        let k = kernel_eval(&h, &[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert!((k - 0.367_879_44).abs() < 1e-7);
        assert!((k - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn kernel_dimension_mismatch() {
        let h = hyper(1.0, &[1.0, 1.0], 0.0);
        assert!(kernel_eval(&h, &[0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn single_point_interpolates() {
        let data = GpDataset::new(vec![pt(&[0.5, 0.5])], vec![3.25]).unwrap();
        let m = GpModel::fit(data, hyper(1.0, &[1.0, 1.0], 0.0)).unwrap();
        let (mean, var) = m.posterior(&[0.5, 0.5]).unwrap();
        assert_eq!(mean, 3.25);
        assert_eq!(var, 0.0);
    }

    #[test]
    fn single_point_far_query_reverts_to_prior() {
        let data = GpDataset::new(vec![pt(&[0.0])], vec![7.0]).unwrap();
        let m = GpModel::fit(data, hyper(1.7, &[0.1], 0.0)).unwrap();
        let (mean, var) = m.posterior(&[100.0]).unwrap();
        let s = m.data().standardization();
        assert_eq!(mean, s.mean);
        assert!((var - 1.7 * s.scale * s.scale).abs() < 1e-12);
    }

    #[test]
    fn training_points_interpolate_without_noise() {
        let data = GpDataset::new(
            vec![pt(&[0.0]), pt(&[1.0]), pt(&[2.5])],
            vec![1.0, -2.0, 4.0],
        )
        .unwrap();
        let m = GpModel::fit(data, hyper(1.0, &[0.8], 0.0)).unwrap();
        assert_eq!(m.effective_jitter(), 0.0);
        for (p, v) in [(0.0, 1.0), (1.0, -2.0), (2.5, 4.0)] {
            let (mean, var) = m.posterior(&[p]).unwrap();
            assert!((mean - v).abs() < 1e-10);
            assert!(var < 1e-10);
        }
    }

    #[test]
    fn duplicate_points_fit_with_jitter() {
        let data = GpDataset::new(vec![pt(&[1.0]), pt(&[1.0])], vec![2.0, 2.0]).unwrap();
        assert!(GpModel::fit(data.clone(), hyper(1.0, &[1.0], 1e-6)).is_ok());
        // Zero jitter: the escalation path rescues the singular kernel.
        let m = GpModel::fit(data, hyper(1.0, &[1.0], 0.0)).unwrap();
        assert!(m.effective_jitter() >= JITTER_START);
    }

    #[test]
    fn gram_matrix_matches_pairwise_kernel() {
        let mut rng = stream_rng(11, 0);
        let data = random_dataset(&mut rng, 5, 3);
        let h = hyper(1.3, &[0.7, 1.1, 2.0], 1e-4);
        let k = kernel_matrix(&h, data.points());
        for i in 0..5 {
            for j in 0..5 {
                let e = kernel_eval(&h, data.points()[i].as_slice(), data.points()[j].as_slice()).unwrap();
                assert_eq!(k[(i, j)], e);
            }
            assert_eq!(k[(i, i)], 1.3);
        }
        let m = GpModel::fit(data, h).unwrap();
        let l = m.factor();
        let mut target = k.clone();
        for i in 0..5 {
            target[(i, i)] += m.effective_jitter();
        }
        assert!((&l * l.transpose() - target).norm() < 1e-10);
    }

    #[test]
    fn posterior_matches_joint_gaussian_conditioning() {
        let mut rng = stream_rng(12, 0);
        let data = random_dataset(&mut rng, 6, 2);
        let m = GpModel::fit(data, hyper(1.5, &[0.9, 1.4], 1e-5)).unwrap();
        for _ in 0..10 {
            let q = [rng.gen_range(-1.0..4.0), rng.gen_range(-1.0..4.0)];
            let (mean, var) = m.posterior(&q).unwrap();
            let (om, ov) = joint_conditioning(&m, &q);
            assert!((mean - om).abs() < 1e-8, "{mean} vs {om}");
            assert!((var - ov).abs() < 1e-8, "{var} vs {ov}");
        }
    }

    #[test]
    fn lml_single_point() {
        let data = GpDataset::new(vec![pt(&[0.0])], vec![4.0]).unwrap();
        let h = hyper(0.6, &[1.0], 0.15);
        let lml = log_marginal_likelihood(&data, &h).unwrap();
        let s2: f64 = 0.75;
        let expect = -0.5 * s2.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((lml - expect).abs() < 1e-14);
    }

    #[test]
    fn lml_matches_dense_density() {
        let mut rng = stream_rng(13, 0);
        for n in 1..=6 {
            let data = random_dataset(&mut rng, n, 2);
            let h = hyper(rng.gen_range(0.5..2.0), &[rng.gen_range(0.3..2.0), rng.gen_range(0.3..2.0)], 1e-3);
            let lml = log_marginal_likelihood(&data, &h).unwrap();
            let mut k = kernel_matrix(&h, data.points());
            for i in 0..n {
                k[(i, i)] += h.noise_jitter;
            }
            let y = data.standardized_values();
            let quad = (y.transpose() * k.clone().try_inverse().unwrap() * &y)[(0, 0)];
            let dense = -0.5 * quad - 0.5 * k.determinant().ln() - 0.5 * n as f64 * LN_2PI;
            assert!((lml - dense).abs() < 1e-8, "n={n}: {lml} vs {dense}");
        }
    }

    #[test]
    fn lml_invariant_to_permutation() {
        let mut rng = stream_rng(14, 0);
        let data = random_dataset(&mut rng, 7, 3);
        let h = hyper(1.0, &[0.5, 1.0, 1.5], 1e-3);
        let a = log_marginal_likelihood(&data, &h).unwrap();
        let mut idx: Vec<usize> = (0..7).collect();
        idx.reverse();
        idx.swap(1, 4);
        let p = idx.iter().map(|&i| data.points()[i].clone()).collect();
        let v = idx.iter().map(|&i| data.values()[i]).collect();
        let b = log_marginal_likelihood(&GpDataset::new(p, v).unwrap(), &h).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let mut rng = stream_rng(15, 0);
        let data = random_dataset(&mut rng, 8, 2);
        let h = hyper(1.2, &[0.6, 1.3], 1e-2);
        let (_, g) = lml_and_grad(&data, &h).unwrap();
        let p = hyper_to_log(&h);
        let eps = 1e-6;
        for i in 0..p.len() {
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[i] += eps;
            pm[i] -= eps;
            let fd = (log_marginal_likelihood(&data, &hyper_from_log(&pp)).unwrap()
                - log_marginal_likelihood(&data, &hyper_from_log(&pm)).unwrap())
                / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn optimizer_never_decreases_lml() {
        let mut rng = stream_rng(16, 0);
        for trial in 0..20 {
            let d = 1 + trial % 3;
            let data = random_dataset(&mut rng, 4 + trial % 6, d);
            let init = GpHyperParams::new(1.0, vec![1.0; d], 1e-6).unwrap();
            let b = HyperBounds::for_box(&Bounds::uniform(0.0, 3.0, d).unwrap());
            let out = optimize_hyperparams(&data, &init, 2, &b, trial as u64).unwrap();
            let before = log_marginal_likelihood(&data, &init).unwrap();
            let after = log_marginal_likelihood(&data, &out).unwrap();
            assert!(after >= before, "trial {trial}: {after} < {before}");
        }
    }

    #[test]
    fn optimizer_keeps_init_on_single_point() {
        let data = GpDataset::new(vec![pt(&[0.2])], vec![1.0]).unwrap();
        let init = GpHyperParams::new(1.0, vec![0.5], 1e-6).unwrap();
        let b = HyperBounds::for_box(&Bounds::uniform(0.0, 1.0, 1).unwrap());
        let out = optimize_hyperparams(&data, &init, 1, &b, 0).unwrap();
        let before = log_marginal_likelihood(&data, &init).unwrap();
        let after = log_marginal_likelihood(&data, &out).unwrap();
        assert!(after >= before);
    }

    #[test]
    fn optimizer_recovers_generating_length_scales() {
        let truth = [0.25, 0.6];
        let mut rng = stream_rng(17, 0);
        let n = 40;
        let points: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_iterator(2, (0..2).map(|_| rng.gen_range(0.0..1.0))))
            .collect();
        let gen = hyper(1.0, &truth, 1e-6);
        let mut k = kernel_matrix(&gen, &points);
        for i in 0..n {
            k[(i, i)] += 1e-6;
        }
        let l = Cholesky::new(k).unwrap().l();
        let z = DVector::from_iterator(n, (0..n).map(|_| StandardNormal.sample(&mut rng)));
        let y = l * z;
        let data = GpDataset::new(points, y.iter().copied().collect()).unwrap();
        let init = GpHyperParams::new(1.0, vec![0.1, 0.1], 1e-4).unwrap();
        let b = HyperBounds::for_box(&Bounds::uniform(0.0, 1.0, 2).unwrap());
        let out = optimize_hyperparams(&data, &init, 4, &b, 5).unwrap();
        for (got, want) in out.length_scales.iter().zip(truth) {
            assert!(*got > want / 2.0 && *got < want * 2.0, "{got} vs {want}");
        }
    }

    #[test]
    fn fit_is_bitwise_deterministic() {
        let mut rng = stream_rng(18, 0);
        let data = random_dataset(&mut rng, 6, 2);
        let h = hyper(1.0, &[0.5, 0.9], 1e-6);
        let a = GpModel::fit(data.clone(), h.clone()).unwrap().posterior(&[1.0, 1.0]).unwrap();
        let b = GpModel::fit(data, h).unwrap().posterior(&[1.0, 1.0]).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert_eq!(a.1.to_bits(), b.1.to_bits());
    }

    proptest! {
        #[test]
        fn kernel_symmetric_and_bounded(
            a in proptest::collection::vec(-5.0f64..5.0, 3),
            b in proptest::collection::vec(-5.0f64..5.0, 3),
            s in 0.01f64..10.0,
        ) {
            let h = hyper(s, &[0.5, 1.0, 2.0], 0.0);
            let ab = kernel_eval(&h, &a, &b).unwrap();
            let ba = kernel_eval(&h, &b, &a).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0 && ab <= s);
        }

        #[test]
        fn posterior_variance_bounded(seed in 0u64..500, qx in -3.0f64..6.0, qy in -3.0f64..6.0) {
            let mut rng = stream_rng(seed, 0);
            let data = random_dataset(&mut rng, 5, 2);
            let h = hyper(1.4, &[0.7, 0.9], 1e-4);
            let m = GpModel::fit(data, h).unwrap();
            let (_, v) = m.posterior_standardized(&[qx, qy]).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!(v <= 1.4 + 1e-4 + 1e-9);
        }

        #[test]
        fn extra_point_never_increases_variance(seed in 0u64..500, qx in 0.0f64..3.0, qy in 0.0f64..3.0) {
            let mut rng = stream_rng(seed, 0);
            let full = random_dataset(&mut rng, 6, 2);
            let h = hyper(1.0, &[0.8, 1.1], 0.0);
            let fixed = full.standardization();
            let sub = GpDataset::with_standardization(
                full.points()[..5].to_vec(), full.values()[..5].to_vec(), fixed).unwrap();
            let small = GpModel::fit(sub, h.clone()).unwrap();
            let big = GpModel::fit(full, h).unwrap();
            prop_assume!(small.effective_jitter() == 0.0 && big.effective_jitter() == 0.0);
            let (_, v5) = small.posterior_standardized(&[qx, qy]).unwrap();
            let (_, v6) = big.posterior_standardized(&[qx, qy]).unwrap();
            prop_assert!(v6 <= v5 + 1e-9);
        }
    }
}
