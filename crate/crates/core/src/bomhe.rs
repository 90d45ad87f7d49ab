//! The learning loop: bootstrap with random parameter vectors, then
//! alternate GP fitting, EI proposal, and full-record MHE evaluation.

use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::acquisition::{propose_next, AcquisitionConfig};
use crate::error::{Error, Result};
use crate::gp::{optimize_hyperparams, GpDataset, GpHyperParams, GpModel, HyperBounds};
use crate::mhe::{run_trajectory, MheConfig};
use crate::model::{Bounds, LinearModel, ParamTemplate, ThetaVector};
use crate::sim::{stream_rng, BO_STREAM};

/// Objective assigned to the first failed evaluation when no finite value
/// has been seen yet.
pub const FIRST_FAILURE_SENTINEL: f64 = 1e12;
/// Later failures get this multiple of the worst finite objective so far.
pub const FAILURE_FACTOR: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BomheConfig {
    pub max_iter: usize,
    pub n_init: usize,
    pub seed: u64,
    pub bounds: Vec<Bounds>,
    /// Hyperparameters are re-optimized every this many BO observations.
    pub refit_period: usize,
    pub hyper_restarts: usize,
    pub acquisition: AcquisitionConfig,
    /// Transform applied to `J` before it reaches the GP.
    pub objective_transform: ObjectiveTransform,
    pub trust_region: TrustRegion,
}

/// Adaptive radius for the local EI candidates around the incumbent.
///
/// Starts at `acquisition.local_scale`, doubles (up to `max_scale`) after
/// `success_tol` consecutive improvements of the best `J`, halves after
/// `failure_tol` consecutive non-improvements (the parameter dimension when
/// unset), and restarts from the initial radius once it drops below
/// `min_scale`. With `enabled = false` the radius stays fixed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrustRegion {
    pub enabled: bool,
    pub max_scale: f64,
    pub min_scale: f64,
    pub success_tol: usize,
    pub failure_tol: Option<usize>,
    /// An iteration counts as a success when it lowers the best `J` by more
    /// than this fraction.
    pub min_relative_improvement: f64,
}

impl Default for TrustRegion {
    fn default() -> Self {
        TrustRegion {
            enabled: true,
            max_scale: 0.4,
            min_scale: 1e-3,
            success_tol: 3,
            failure_tol: None,
            min_relative_improvement: 1e-3,
        }
    }
}

impl TrustRegion {
    fn validate(&self) -> Result<()> {
        if !(self.min_scale > 0.0 && self.min_scale <= self.max_scale && self.max_scale.is_finite()) {
            return Err(Error::invalid("trust region needs 0 < min_scale <= max_scale"));
        }
        if self.success_tol == 0 || self.failure_tol == Some(0) {
            return Err(Error::invalid("trust region tolerances must be >= 1"));
        }
        if !(self.min_relative_improvement >= 0.0 && self.min_relative_improvement < 1.0) {
            return Err(Error::invalid("min_relative_improvement must be in [0, 1)"));
        }
        Ok(())
    }
}

struct Radius {
    initial: f64,
    scale: f64,
    successes: usize,
    failures: usize,
}

impl Radius {
    fn update(&mut self, tr: &TrustRegion, failure_tol: usize, improved: bool) {
        if !tr.enabled {
            return;
        }
        if improved {
            self.successes += 1;
            self.failures = 0;
        } else {
            self.failures += 1;
            self.successes = 0;
        }
        if self.successes >= tr.success_tol {
            self.scale = (2.0 * self.scale).min(tr.max_scale);
            self.successes = 0;
        } else if self.failures >= failure_tol {
            self.scale *= 0.5;
            self.failures = 0;
            if self.scale < tr.min_scale {
                self.scale = self.initial;
            }
        }
    }
}

/// What the surrogate models. Records always hold the raw `J`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveTransform {
    Identity,
    #[default]
    Log,
}

impl ObjectiveTransform {
    pub fn apply(self, j: f64) -> f64 {
        match self {
            ObjectiveTransform::Identity => j,
            ObjectiveTransform::Log => j.max(f64::MIN_POSITIVE).ln(),
        }
    }
}

impl BomheConfig {
    pub fn new(bounds: Vec<Bounds>, max_iter: usize, seed: u64) -> Self {
        BomheConfig {
            max_iter,
            n_init: 5,
            seed,
            bounds,
            refit_period: 10,
            hyper_restarts: 4,
            acquisition: AcquisitionConfig::default(),
            objective_transform: ObjectiveTransform::default(),
            trust_region: TrustRegion::default(),
        }
    }

    pub fn validate(&self, template: &ParamTemplate) -> Result<()> {
        if self.max_iter == 0 || self.n_init == 0 || self.refit_period == 0 || self.hyper_restarts == 0 {
            return Err(Error::invalid(
                "max_iter, n_init, refit_period and hyper_restarts must all be >= 1",
            ));
        }
        if self.bounds.len() != template.dim() {
            return Err(Error::invalid(format!(
                "bounds have dimension {} but the template has {} free parameters",
                self.bounds.len(),
                template.dim()
            )));
        }
        self.trust_region.validate()?;
        self.acquisition.validate()
    }

    fn initial_hyper(&self) -> GpHyperParams {
        GpHyperParams {
            signal_variance: 1.0,
            length_scales: self.bounds.iter().map(|b| 0.25 * b.width().max(1e-12)).collect(),
            noise_jitter: 1e-6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Init,
    Bo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// Position in the dataset, starting at 0 with the bootstrap points.
    pub index: usize,
    pub phase: Phase,
    pub theta: Vec<f64>,
    pub j: f64,
    pub failed: bool,
    pub mae: Option<f64>,
    pub best_so_far: f64,
    /// EI of the proposal (BO phase only).
    pub ei: Option<f64>,
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Clone, Debug)]
pub struct BomheResult {
    pub records: Vec<RunRecord>,
    pub best_theta: ThetaVector,
    pub best_model: LinearModel,
    pub best_estimates: Vec<DVector<f64>>,
    pub final_hyper: GpHyperParams,
}

impl BomheResult {
    pub fn best_record(&self) -> &RunRecord {
        self.records
            .iter()
            .filter(|r| r.theta == self.best_theta.values())
            .min_by(|a, b| a.j.total_cmp(&b.j))
            .expect("best theta comes from a record")
    }
}

/// True states and the components to score, used only for reporting.
#[derive(Clone, Copy, Debug)]
pub struct Truth<'a> {
    pub states: &'a [DVector<f64>],
    pub monitored: &'a [usize],
}

/// Everything the loop needs besides its own configuration.
#[derive(Clone, Copy, Debug)]
pub struct BomheProblem<'a> {
    pub template: &'a ParamTemplate,
    pub measurements: &'a [DVector<f64>],
    pub inputs: &'a [DVector<f64>],
    pub mhe: &'a MheConfig,
    pub truth: Option<Truth<'a>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub j: f64,
    pub estimates: Vec<DVector<f64>>,
}

/// `J(θ)`: instantiate the template and sweep the MHE over the record.
pub fn evaluate_theta(
    theta: &[f64],
    template: &ParamTemplate,
    measurements: &[DVector<f64>],
    inputs: &[DVector<f64>],
    mhe: &MheConfig,
) -> Result<Evaluation> {
    let model = template.instantiate(theta)?;
    let run = run_trajectory(&model, measurements, inputs, mhe)?;
    Ok(Evaluation {
        j: run.total_cost,
        estimates: run.estimates,
    })
}

/// `(1 / (T·|monitored|)) Σ_{k=1}^{T} Σ_{j∈monitored} |x_{k,j} - x̂_{k,j}|`.
pub fn mae(true_states: &[DVector<f64>], estimates: &[DVector<f64>], monitored: &[usize]) -> Result<f64> {
    if true_states.len() != estimates.len() {
        return Err(Error::invalid(format!(
            "{} true states but {} estimates",
            true_states.len(),
            estimates.len()
        )));
    }
    if true_states.len() < 2 {
        return Err(Error::invalid("mae needs at least two time steps"));
    }
    if monitored.is_empty() {
        return Err(Error::invalid("no monitored components"));
    }
    let n_x = true_states[0].len();
    if let Some(j) = monitored.iter().find(|&&j| j >= n_x) {
        return Err(Error::invalid(format!("monitored component {j} out of range for {n_x} states")));
    }
    if true_states.iter().chain(estimates).any(|x| x.len() != n_x) {
        return Err(Error::invalid("state dimensions differ"));
    }
    let t = (true_states.len() - 1) as f64;
    let sum: f64 = true_states[1..]
        .iter()
        .zip(&estimates[1..])
        .map(|(x, e)| monitored.iter().map(|&j| (x[j] - e[j]).abs()).sum::<f64>())
        .sum();
    Ok(sum / (t * monitored.len() as f64))
}

struct Dataset {
    points: Vec<DVector<f64>>,
    values: Vec<f64>,
}

impl Dataset {
    fn worst_finite(&self, failed: &[bool]) -> Option<f64> {
        self.values
            .iter()
            .zip(failed)
            .filter(|(_, f)| !**f)
            .map(|(v, _)| *v)
            .reduce(f64::max)
    }
}

struct Loop<'a> {
    problem: BomheProblem<'a>,
    data: Dataset,
    failed: Vec<bool>,
    records: Vec<RunRecord>,
    best: Option<(usize, Vec<DVector<f64>>)>,
}

impl Loop<'_> {
    fn evaluate(&mut self, theta: ThetaVector, phase: Phase, ei: Option<f64>) {
        let started = Instant::now();
        let p = &self.problem;
        let outcome = evaluate_theta(theta.values(), p.template, p.measurements, p.inputs, p.mhe)
            .ok()
            .filter(|e| e.j.is_finite());
        let (j, failed, mae_value) = match &outcome {
            Some(e) => {
                let m = p.truth.and_then(|t| mae(t.states, &e.estimates, t.monitored).ok());
                (e.j, false, m)
            }
            None => {
                let j = self
                    .data
                    .worst_finite(&self.failed)
                    .map_or(FIRST_FAILURE_SENTINEL, |w| FAILURE_FACTOR * w.abs().max(f64::MIN_POSITIVE));
                (j, true, None)
            }
        };
        let index = self.records.len();
        if let Some(e) = outcome {
            let better = match &self.best {
                None => true,
                Some((b, _)) => j < self.records[*b].j || self.records[*b].failed,
            };
            if better {
                self.best = Some((index, e.estimates));
            }
        } else if self.best.is_none() {
            // Keep a placeholder so that an all-failed run still reports something.
            self.best = Some((index, Vec::new()));
        }
        let best_so_far = self.records.last().map_or(j, |r| r.best_so_far.min(j));
        self.data.points.push(theta.to_dvector());
        self.data.values.push(j);
        self.failed.push(failed);
        self.records.push(RunRecord {
            index,
            phase,
            theta: theta.values().to_vec(),
            j,
            failed,
            mae: mae_value,
            best_so_far,
            ei,
            wall_time: started.elapsed(),
        });
    }
}

/// Runs `n_init` random evaluations followed by `max_iter` BO iterations
/// and returns the parameter vector with the lowest `J`.
pub fn optimize(problem: BomheProblem<'_>, cfg: &BomheConfig) -> Result<BomheResult> {
    cfg.validate(problem.template)?;
    problem.mhe.validate()?;
    let mut rng = stream_rng(cfg.seed, BO_STREAM);
    let mut state = Loop {
        problem,
        data: Dataset {
            points: Vec::new(),
            values: Vec::new(),
        },
        failed: Vec::new(),
        records: Vec::with_capacity(cfg.n_init + cfg.max_iter),
        best: None,
    };

    for _ in 0..cfg.n_init {
        let values = cfg.bounds.iter().map(|b| b.lo + rng.gen_range(0.0..=1.0) * b.width()).collect();
        state.evaluate(ThetaVector::new(values, cfg.bounds.clone())?, Phase::Init, None);
    }

    let hyper_bounds = HyperBounds::for_box(&cfg.bounds);
    let mut hyper = cfg.initial_hyper();
    let mut acquisition = cfg.acquisition.clone();
    let mut radius = Radius {
        initial: acquisition.local_scale,
        scale: acquisition.local_scale,
        successes: 0,
        failures: 0,
    };
    let failure_tol = cfg.trust_region.failure_tol.unwrap_or(cfg.bounds.len()).max(1);
    for i in 1..=cfg.max_iter {
        let wrap = |e: Error| Error::Iteration { iteration: i, source: Box::new(e) };
        let targets = state.data.values.iter().map(|&j| cfg.objective_transform.apply(j)).collect();
        let data = GpDataset::new(state.data.points.clone(), targets).map_err(wrap)?;
        if (i - 1) % cfg.refit_period == 0 {
            hyper = optimize_hyperparams(&data, &hyper, cfg.hyper_restarts, &hyper_bounds, rng.next_u64()).map_err(wrap)?;
        }
        let model = GpModel::fit(data, hyper.clone()).map_err(wrap)?;
        let best = model.data().standardized_values().min();
        acquisition.local_scale = radius.scale;
        let proposal = propose_next(&model, &cfg.bounds, &acquisition, best, rng.next_u64()).map_err(wrap)?;
        if proposal.theta.values().iter().zip(&cfg.bounds).any(|(v, b)| !b.contains(*v)) {
            return Err(wrap(Error::invalid("proposal left the parameter box")));
        }
        let before = state.records.last().map_or(f64::INFINITY, |r| r.best_so_far);
        state.evaluate(proposal.theta, Phase::Bo, Some(proposal.ei_value));
        let after = state.records.last().map_or(f64::INFINITY, |r| r.best_so_far);
        let improved = after < before - cfg.trust_region.min_relative_improvement * before.abs();
        radius.update(&cfg.trust_region, failure_tol, improved);
    }

    let (best_index, best_estimates) = state.best.take().expect("at least one evaluation");
    let best_theta = ThetaVector::new(state.records[best_index].theta.clone(), cfg.bounds.clone())?;
    let best_model = problem.template.instantiate(best_theta.values())?;
    Ok(BomheResult {
        records: state.records,
        best_theta,
        best_model,
        best_estimates,
        final_hyper: hyper,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{leak_model, SystemKind, SystemSim};

    fn leak_setup(noise: bool, seed: u64) -> (ParamTemplate, crate::sim::Trajectory, MheConfig) {
        let model = leak_model();
        let template = ParamTemplate::sparsity_of(&model.a, &model.b, &model.c).unwrap();
        let sys = if noise {
            SystemSim::leak(DVector::zeros(5)).unwrap()
        } else {
            SystemSim::new(
                SystemKind::Leak,
                DVector::zeros(5),
                DVector::zeros(5),
                DVector::from_vec(vec![4.0, 2.0, -3.0, 1.0, 5.0]),
                DVector::zeros(0),
            )
            .unwrap()
        };
        let traj = sys.simulate(90, seed).unwrap();
        let mut mhe = MheConfig::diagonal(10, &[5.0, 5.0, 5.0, 5.0, 15.0], &[8.0, 8.0, 8.0, 8.0, 4.0], &[1.0; 5], &[0.0; 5]).unwrap();
        if !noise {
            mhe.x0_guess = traj.states[0].clone();
        }
        (template, traj, mhe)
    }

    #[test]
    fn leak_template_has_nine_parameters_in_printed_order() {
        let model = leak_model();
        let t = ParamTemplate::sparsity_of(&model.a, &model.b, &model.c).unwrap();
        assert_eq!(t.dim(), 9);
        let theta = [0.89168, 1.0, 0.10832, 0.90518, 0.04306, 0.09482, 0.89524, 0.10476, 0.89235];
        assert_eq!(t.instantiate(&theta).unwrap(), model);
    }

    #[test]
    fn true_theta_on_noiseless_record() {
        let (template, traj, mhe) = leak_setup(false, 0);
        let theta = template.extract(&leak_model()).unwrap();
        let e = evaluate_theta(&theta, &template, &traj.measurements, &traj.inputs, &mhe).unwrap();
        assert!(e.j <= 1e-10, "J = {}", e.j);
    }

    #[test]
    fn evaluation_is_deterministic_and_passes_through() {
        let (template, traj, mhe) = leak_setup(true, 3);
        let theta = vec![0.5; 9];
        let a = evaluate_theta(&theta, &template, &traj.measurements, &traj.inputs, &mhe).unwrap();
        let b = evaluate_theta(&theta, &template, &traj.measurements, &traj.inputs, &mhe).unwrap();
        assert_eq!(a, b);
        let run = run_trajectory(&template.instantiate(&theta).unwrap(), &traj.measurements, &traj.inputs, &mhe).unwrap();
        assert_eq!(a.j, run.total_cost);
        assert_eq!(a.estimates, run.estimates);
    }

    #[test]
    fn mae_identical_and_offset() {
        let xs: Vec<DVector<f64>> = (0..5).map(|k| DVector::from_element(3, k as f64)).collect();
        assert_eq!(mae(&xs, &xs, &[0, 1, 2]).unwrap(), 0.0);
        let shifted: Vec<_> = xs.iter().map(|x| x.add_scalar(1.0)).collect();
        assert_eq!(mae(&xs, &shifted, &[0, 2]).unwrap(), 1.0);
        let neg: Vec<_> = xs.iter().map(|x| x.add_scalar(-1.0)).collect();
        assert_eq!(mae(&xs, &neg, &[1]).unwrap(), 1.0);
    }

    #[test]
    fn mae_errors() {
        let xs = vec![DVector::zeros(2); 4];
        assert!(mae(&xs, &xs[..3], &[0]).is_err());
        assert!(mae(&xs, &xs, &[2]).is_err());
        assert!(mae(&xs, &xs, &[]).is_err());
    }

    fn small_cfg(max_iter: usize, n_init: usize) -> BomheConfig {
        let mut cfg = BomheConfig::new(Bounds::uniform(0.0, 5.0, 9).unwrap(), max_iter, 11);
        cfg.n_init = n_init;
        cfg.acquisition.n_candidates = 128;
        cfg.acquisition.n_refine = 1;
        cfg
    }

    #[test]
    fn one_iteration_picks_the_lower_of_two() {
        let (template, traj, mhe) = leak_setup(true, 1);
        let problem = BomheProblem {
            template: &template,
            measurements: &traj.measurements,
            inputs: &traj.inputs,
            mhe: &mhe,
            truth: None,
        };
        let res = optimize(problem, &small_cfg(1, 1)).unwrap();
        assert_eq!(res.records.len(), 2);
        let best = res.records.iter().min_by(|a, b| a.j.total_cmp(&b.j)).unwrap();
        assert_eq!(res.best_theta.values(), best.theta.as_slice());
        assert_eq!(res.best_model, template.instantiate(res.best_theta.values()).unwrap());
    }

    #[test]
    fn records_grow_and_best_is_monotone() {
        let (template, traj, mhe) = leak_setup(true, 2);
        let monitored = [2, 4];
        let problem = BomheProblem {
            template: &template,
            measurements: &traj.measurements,
            inputs: &traj.inputs,
            mhe: &mhe,
            truth: Some(Truth {
                states: &traj.states,
                monitored: &monitored,
            }),
        };
        let cfg = small_cfg(12, 3);
        let res = optimize(problem, &cfg).unwrap();
        assert_eq!(res.records.len(), 15);
        for w in res.records.windows(2) {
            assert!(w[1].best_so_far <= w[0].best_so_far);
        }
        for r in &res.records {
            assert!(r.theta.iter().all(|v| (0.0..=5.0).contains(v)));
            assert!(r.mae.is_some());
        }
        let min_j = res.records.iter().map(|r| r.j).fold(f64::INFINITY, f64::min);
        assert_eq!(res.best_record().j, min_j);
        let again = optimize(problem, &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&res.records).unwrap(),
            serde_json::to_string(&again.records).unwrap()
        );
        assert_eq!(res.best_estimates, again.best_estimates);
    }

    #[test]
    fn failed_evaluations_get_sentinel() {
        // Huge bounds make the instantiated model blow up numerically.
        let (template, traj, mhe) = leak_setup(true, 2);
        let problem = BomheProblem {
            template: &template,
            measurements: &traj.measurements,
            inputs: &traj.inputs,
            mhe: &mhe,
            truth: None,
        };
        let mut cfg = small_cfg(2, 2);
        cfg.bounds = Bounds::uniform(1e150, 1e151, 9).unwrap();
        let res = optimize(problem, &cfg).unwrap();
        assert_eq!(res.records.len(), 4);
        let first = &res.records[0];
        assert!(first.failed);
        assert_eq!(first.j, FIRST_FAILURE_SENTINEL);
    }

    #[test]
    fn config_validation() {
        let (template, _, _) = leak_setup(true, 0);
        let mut cfg = small_cfg(1, 1);
        assert!(cfg.validate(&template).is_ok());
        cfg.bounds.pop();
        assert!(cfg.validate(&template).is_err());
        let mut cfg = small_cfg(1, 1);
        cfg.n_init = 0;
        assert!(cfg.validate(&template).is_err());
    }
    #[test]
    fn radius_grows_shrinks_and_resets() {
        let tr = TrustRegion::default();
        let mut r = Radius { initial: 0.1, scale: 0.1, successes: 0, failures: 0 };
        for _ in 0..3 {
            r.update(&tr, 2, true);
        }
        assert_eq!(r.scale, 0.2);
        for _ in 0..9 {
            r.update(&tr, 2, true);
        }
        assert_eq!(r.scale, tr.max_scale);
        r.update(&tr, 2, false);
        r.update(&tr, 2, false);
        assert_eq!(r.scale, 0.2);
        for _ in 0..16 {
            r.update(&tr, 2, false);
        }
        // 0.2 / 2^8 < 1e-3 restarts at the initial radius.
        assert_eq!(r.scale, 0.1);
        let off = TrustRegion { enabled: false, ..TrustRegion::default() };
        r.update(&off, 1, false);
        assert_eq!(r.scale, 0.1);
    }

    #[test]
    fn objective_transforms() {
        assert_eq!(ObjectiveTransform::Identity.apply(3.5), 3.5);
        assert!((ObjectiveTransform::Log.apply(std::f64::consts::E) - 1.0).abs() < 1e-15);
        assert!(ObjectiveTransform::Log.apply(0.0).is_finite());
        assert!(TrustRegion { min_scale: 1.0, max_scale: 0.5, ..TrustRegion::default() }.validate().is_err());
    }
}
