//! Running the estimators of an [`Experiment`] on a simulated record.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use super::config::Experiment;
use crate::bomhe::{mae, optimize, BomheProblem, BomheResult, Truth};
use crate::mhe::run_trajectory;
use crate::sim::Trajectory;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    /// MHE with the true model (leak) or the Jacobian linearization (heat).
    MheTrue,
    /// MHE with a model learned by Bayesian optimization.
    Bomhe,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::MheTrue => "mhe-true",
            Algorithm::Bomhe => "bomhe",
        }
    }
}

#[derive(Clone, Debug)]
pub struct AlgorithmOutcome {
    pub algorithm: Algorithm,
    pub estimates: Vec<DVector<f64>>,
    pub j: f64,
    /// Mean absolute error over the monitored states.
    pub mae: f64,
    /// `(1/T) Σ_k ‖x_k - x̂_k‖₁` over all states.
    pub mae_all_states_l1: f64,
    pub bomhe: Option<BomheResult>,
}

/// `(1/T) Σ_{k=1}^{T} ‖x_k - x̂_k‖₁`.
pub fn mae_all_states_l1(true_states: &[DVector<f64>], estimates: &[DVector<f64>]) -> Result<f64> {
    let n_x = true_states.first().map_or(0, |x| x.len());
    let all: Vec<usize> = (0..n_x).collect();
    Ok(mae(true_states, estimates, &all)? * n_x as f64)
}

impl Experiment {
    pub fn simulate(&self) -> Result<Trajectory> {
        self.system.simulate(self.horizon, self.seed())
    }

    pub fn run(&self, traj: &Trajectory, algorithm: Algorithm) -> Result<AlgorithmOutcome> {
        let (estimates, j, bomhe) = match algorithm {
            Algorithm::MheTrue => {
                let run = run_trajectory(&self.baseline, &traj.measurements, &traj.inputs, &self.mhe)?;
                (run.estimates, run.total_cost, None)
            }
            Algorithm::Bomhe => {
                let problem = BomheProblem {
                    template: &self.template,
                    measurements: &traj.measurements,
                    inputs: &traj.inputs,
                    mhe: &self.mhe,
                    truth: Some(Truth {
                        states: &traj.states,
                        monitored: &self.monitored,
                    }),
                };
                let res = optimize(problem, &self.bomhe)?;
                let j = res.best_record().j;
                (res.best_estimates.clone(), j, Some(res))
            }
        };
        Ok(AlgorithmOutcome {
            algorithm,
            mae: mae(&traj.states, &estimates, &self.monitored)?,
            mae_all_states_l1: mae_all_states_l1(&traj.states, &estimates)?,
            estimates,
            j,
            bomhe,
        })
    }
}
