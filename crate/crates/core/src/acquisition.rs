//! Expected improvement and its maximization over a box.
//!
//! The objective is minimized, so improvement is measured below the
//! incumbent: `I = best - mean - xi`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::model::{Bounds, ThetaVector};
use crate::sim::stream_rng;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn norm_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Closed-form EI for a Gaussian prediction `N(mean, std²)`; zero when
/// `std = 0`.
pub fn expected_improvement(mean: f64, std: f64, best: f64, xi: f64) -> f64 {
    if !(std > 0.0) {
        return 0.0;
    }
    let improvement = best - mean - xi;
    let z = improvement / std;
    (improvement * norm_cdf(z) + std * norm_pdf(z)).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AcquisitionConfig {
    /// Exploration offset, in standardized objective units.
    pub xi: f64,
    pub n_candidates: usize,
    /// Coordinate-wise refinement passes.
    pub n_refine: usize,
    pub refine_top_k: usize,
    /// Extra candidates drawn around the incumbent.
    pub n_local: usize,
    /// Largest perturbation scale for local candidates, as a fraction of
    /// each bound's width; smaller scales are cycled in.
    pub local_scale: f64,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            xi: 0.01,
            n_candidates: 2048,
            n_refine: 3,
            refine_top_k: 5,
            n_local: 512,
            local_scale: 0.1,
        }
    }
}

impl AcquisitionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0 && self.xi.is_finite()) {
            return Err(Error::invalid("xi must be finite and >= 0"));
        }
        if self.n_candidates == 0 {
            return Err(Error::invalid("n_candidates must be >= 1"));
        }
        if !(self.local_scale > 0.0 && self.local_scale.is_finite()) {
            return Err(Error::invalid("local_scale must be finite and > 0"));
        }
        if self.refine_top_k == 0 {
            return Err(Error::invalid("refine_top_k must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub theta: ThetaVector,
    pub ei_value: f64,
    /// Set when the posterior gave no improvement anywhere and the point was
    /// drawn at random.
    pub fallback: bool,
}

fn first_primes(n: usize) -> Vec<u64> {
    let mut primes = Vec::with_capacity(n);
    let mut c = 2u64;
    while primes.len() < n {
        if primes.iter().take_while(|&&p| p * p <= c).all(|&p| c % p != 0) {
            primes.push(c);
        }
        c += 1;
    }
    primes
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// `n` Halton points in `bounds`, each coordinate rotated by a random shift
/// (Cranley-Patterson scrambling).
pub fn scrambled_halton(n: usize, bounds: &[Bounds], rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let primes = first_primes(bounds.len());
    let shifts: Vec<f64> = bounds.iter().map(|_| rng.gen_range(0.0..1.0)).collect();
    (1..=n as u64)
        .map(|i| {
            bounds
                .iter()
                .zip(&primes)
                .zip(&shifts)
                .map(|((b, &p), s)| {
                    let u = (radical_inverse(i, p) + s).fract();
                    b.clamp(b.lo + u * b.width())
                })
                .collect()
        })
        .collect()
}

struct Scorer<'a> {
    model: &'a GpModel,
    best: f64,
    xi: f64,
}

impl Scorer<'_> {
    fn ei(&self, x: &[f64]) -> f64 {
        match self.model.posterior_standardized(x) {
            Ok((m, v)) => expected_improvement(m, v.sqrt(), self.best, self.xi),
            Err(_) => 0.0,
        }
    }
}

const GOLDEN: f64 = 0.618_033_988_749_894_9;
const GOLDEN_STEPS: usize = 24;

/// Maximizes EI along coordinate `j` of `x` within `[lo, hi]`; updates `x`
/// only on strict improvement.
fn golden_section(scorer: &Scorer, x: &mut [f64], value: &mut f64, j: usize, lo: f64, hi: f64) {
    let original = x[j];
    let mut probe = x.to_vec();
    let mut eval = |t: f64| {
        probe[j] = t;
        scorer.ei(&probe)
    };
    let (mut a, mut b) = (lo, hi);
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let mut fc = eval(c);
    let mut fd = eval(d);
    for _ in 0..GOLDEN_STEPS {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = eval(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = eval(d);
        }
    }
    let (t, f) = if fc >= fd { (c, fc) } else { (d, fd) };
    if f > *value {
        x[j] = t.clamp(lo, hi);
        *value = f;
    } else {
        x[j] = original;
    }
}

/// Proposes the next parameter vector by maximizing EI: a scrambled Halton
/// sweep, then coordinate-wise golden-section passes started from the
/// `refine_top_k` best candidates and from the incumbent training point.
/// `best_observed` is in the model's standardized units.
pub fn propose_next(
    model: &GpModel,
    bounds: &[Bounds],
    cfg: &AcquisitionConfig,
    best_observed: f64,
    seed: u64,
) -> Result<Proposal> {
    cfg.validate()?;
    if bounds.len() != model.hyper().dim() {
        return Err(Error::invalid(format!(
            "bounds have dimension {} but the model has {}",
            bounds.len(),
            model.hyper().dim()
        )));
    }
    let mut rng = stream_rng(seed, 0);
    let scorer = Scorer {
        model,
        best: best_observed,
        xi: cfg.xi,
    };

    let data = model.data();
    let incumbent: Option<Vec<f64>> = data
        .values()
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| data.points()[i].iter().zip(bounds).map(|(v, b)| b.clamp(*v)).collect());

    let mut candidates = scrambled_halton(cfg.n_candidates, bounds, &mut rng);
    if let Some(inc) = &incumbent {
        for k in 0..cfg.n_local {
            let scale = cfg.local_scale * 0.25f64.powi((k % 3) as i32);
            candidates.push(
                inc.iter()
                    .zip(bounds)
                    .map(|(v, b)| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        b.clamp(v + scale * b.width() * z)
                    })
                    .collect(),
            );
        }
    }
    let mut scored: Vec<(f64, Vec<f64>)> = candidates
        .into_iter()
        .map(|c| (scorer.ei(&c), c))
        .collect();
    // Stable sort keeps the generation order among ties.
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut starts: Vec<(f64, Vec<f64>)> = scored.into_iter().take(cfg.refine_top_k).collect();

    if let Some(inc) = incumbent {
        starts.push((scorer.ei(&inc), inc));
    }

    for (value, x) in starts.iter_mut() {
        for pass in 0..cfg.n_refine {
            let shrink = 0.25 * 0.5f64.powi(pass as i32);
            for (j, b) in bounds.iter().enumerate() {
                let r = shrink * b.width();
                let lo = (x[j] - r).max(b.lo);
                let hi = (x[j] + r).min(b.hi);
                if hi > lo {
                    golden_section(&scorer, x, value, j, lo, hi);
                }
            }
        }
    }

    let (ei_value, x) = starts
        .into_iter()
        .fold(None::<(f64, Vec<f64>)>, |acc, s| match acc {
            Some(a) if a.0 >= s.0 => Some(a),
            _ => Some(s),
        })
        .expect("at least one candidate");

    if ei_value > 0.0 {
        return Ok(Proposal {
            theta: ThetaVector::new(x, bounds.to_vec())?,
            ei_value,
            fallback: false,
        });
    }
    let x = bounds.iter().map(|b| b.clamp(b.lo + rng.gen_range(0.0..=1.0) * b.width())).collect();
    Ok(Proposal {
        theta: ThetaVector::new(x, bounds.to_vec())?,
        ei_value: 0.0,
        fallback: true,
    })
}
