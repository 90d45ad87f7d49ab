//! Benchmark plants with seeded Gaussian noise.
//!
//! Randomness comes from `ChaCha8Rng` (rand_chacha 0.3) seeded with
//! `seed_from_u64(seed)`. Each consumer gets its own stream via
//! `set_stream`: [`PROCESS_STREAM`] for `w_k`, [`MEASUREMENT_STREAM`] for
//! `v_k`, [`BO_STREAM`] for the optimizer. Zero-variance noise components
//! still consume a draw so the streams stay aligned across configurations.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LinearModel;

pub const PROCESS_STREAM: u64 = 0;
pub const MEASUREMENT_STREAM: u64 = 1;
pub const BO_STREAM: u64 = 2;

/// Human-readable name of the generator, recorded in emitted metadata.
pub const PRNG_NAME: &str = "ChaCha8Rng/rand_chacha-0.3";

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// State matrix of the leak detection plant.
#[rustfmt::skip]
pub const LEAK_A: [f64; 25] = [
    0.89168, 0.0,     0.0,     0.0,     1.0,
    0.10832, 0.90518, 0.0,     0.04306, 0.0,
    0.0,     0.09482, 0.89524, 0.0,     0.0,
    0.0,     0.0,     0.10476, 0.89235, 0.0,
    0.0,     0.0,     0.0,     0.0,     0.0,
];
pub const LEAK_G_DIAG: [f64; 5] = [-1.0, -1.0, -1.0, -1.0, 1.0];
pub const LEAK_PROCESS_NOISE: [f64; 5] = [0.0, 0.0, 5.0, 0.0, 15.0];
pub const LEAK_MEASUREMENT_NOISE: [f64; 5] = [8.0, 8.0, 8.0, 8.0, 4.0];

pub fn leak_model() -> LinearModel {
    LinearModel {
        a: DMatrix::from_row_slice(5, 5, &LEAK_A),
        b: DMatrix::zeros(5, 0),
        c: DMatrix::identity(5, 5),
    }
}

/// Constants of the third-order heat transfer plant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatConstants {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    pub k_u: f64,
    pub t_env: f64,
    pub u: f64,
    pub dt: f64,
}

impl Default for HeatConstants {
    fn default() -> Self {
        HeatConstants {
            k1: 0.1,
            k2: 0.05,
            k3: 0.01,
            k_u: 1.0,
            t_env: 25.0,
            u: 0.0,
            dt: 0.1,
        }
    }
}

impl HeatConstants {
    /// Right-hand side of the continuous-time ODE (noise-free).
    pub fn rhs(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        let dx = x[0] - self.t_env;
        DVector::from_vec(vec![
            -self.k1 * dx + self.k2 * x[2] + self.k_u * u,
            1.0,
            -self.k3 * dx,
        ])
    }

    /// Continuous-time partials `df/dx` (3x3) and `df/du` (3x1).
    pub fn partials(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        #[rustfmt::skip]
        let fx = DMatrix::from_row_slice(3, 3, &[
            -self.k1, 0.0, self.k2,
            0.0,      0.0, 0.0,
            -self.k3, 0.0, 0.0,
        ]);
        let fu = DMatrix::from_column_slice(3, 1, &[self.k_u, 0.0, 0.0]);
        (fx, fu)
    }
}

/// Observation matrix of the heat plant: `x1` and `x3` are measured.
pub fn heat_observation() -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0])
}

#[derive(Clone, Debug, PartialEq)]
pub enum SystemKind {
    Leak,
    Heat(HeatConstants),
    CustomLinear(LinearModel),
}

impl SystemKind {
    pub fn name(&self) -> &'static str {
        match self {
            SystemKind::Leak => "leak",
            SystemKind::Heat(_) => "heat",
            SystemKind::CustomLinear(_) => "custom-linear",
        }
    }
}

/// A plant together with its noise model and initial state.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSim {
    kind: SystemKind,
    process_noise: DVector<f64>,
    measurement_noise: DVector<f64>,
    noise_input: DMatrix<f64>,
    x0: DVector<f64>,
    input: DVector<f64>,
}

impl SystemSim {
    pub fn leak(x0: DVector<f64>) -> Result<Self> {
        SystemSim::new(
            SystemKind::Leak,
            DVector::from_column_slice(&LEAK_PROCESS_NOISE),
            DVector::from_column_slice(&LEAK_MEASUREMENT_NOISE),
            x0,
            DVector::zeros(0),
        )
    }

    pub fn heat(
        constants: HeatConstants,
        x0: DVector<f64>,
        process_noise: DVector<f64>,
        measurement_noise: DVector<f64>,
    ) -> Result<Self> {
        let u = DVector::from_element(1, constants.u);
        SystemSim::new(
            SystemKind::Heat(constants),
            process_noise,
            measurement_noise,
            x0,
            u,
        )
    }

    /// A linear plant `x+ = A x + B u + w`, `y = C x + v` with constant input.
    pub fn custom_linear(
        model: LinearModel,
        x0: DVector<f64>,
        process_noise: DVector<f64>,
        measurement_noise: DVector<f64>,
        input: DVector<f64>,
    ) -> Result<Self> {
        SystemSim::new(
            SystemKind::CustomLinear(model),
            process_noise,
            measurement_noise,
            x0,
            input,
        )
    }

    /// Diagonal covariances are given as vectors of their diagonal entries.
    pub fn new(
        kind: SystemKind,
        process_noise: DVector<f64>,
        measurement_noise: DVector<f64>,
        x0: DVector<f64>,
        input: DVector<f64>,
    ) -> Result<Self> {
        let (n_x, n_y, n_u) = match &kind {
            SystemKind::Leak => (5, 5, 0),
            SystemKind::Heat(c) => {
                if !(c.dt > 0.0 && c.dt.is_finite()) {
                    return Err(Error::invalid(format!("heat dt must be > 0, got {}", c.dt)));
                }
                (3, 2, 1)
            }
            SystemKind::CustomLinear(m) => (m.n_x(), m.n_y(), m.n_u()),
        };
        check_len("x0", x0.len(), n_x)?;
        check_len("process noise", process_noise.len(), n_x)?;
        check_len("measurement noise", measurement_noise.len(), n_y)?;
        check_len("input", input.len(), n_u)?;
        for (name, v) in [("process noise", &process_noise), ("measurement noise", &measurement_noise)] {
            if v.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
                return Err(Error::invalid(format!(
                    "{name} variances must be finite and nonnegative"
                )));
            }
        }
        let noise_input = match &kind {
            SystemKind::Leak => DMatrix::from_diagonal(&DVector::from_column_slice(&LEAK_G_DIAG)),
            _ => DMatrix::identity(n_x, n_x),
        };
        Ok(SystemSim {
            kind,
            process_noise,
            measurement_noise,
            noise_input,
            x0,
            input,
        })
    }

    pub fn kind(&self) -> &SystemKind {
        &self.kind
    }

    pub fn n_x(&self) -> usize {
        self.x0.len()
    }

    pub fn n_y(&self) -> usize {
        self.measurement_noise.len()
    }

    pub fn n_u(&self) -> usize {
        self.input.len()
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    pub fn process_noise(&self) -> &DVector<f64> {
        &self.process_noise
    }

    pub fn measurement_noise(&self) -> &DVector<f64> {
        &self.measurement_noise
    }

    pub fn noise_input(&self) -> &DMatrix<f64> {
        &self.noise_input
    }

    /// Noise-free transition `f(x, u)`.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            SystemKind::Leak => leak_model().predict(x, u),
            SystemKind::CustomLinear(m) => m.predict(x, u),
            SystemKind::Heat(c) => x + c.rhs(x, u[0]) * c.dt,
        }
    }

    /// Noise-free observation `h(x)`.
    pub fn observe(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            SystemKind::Leak => x.clone(),
            SystemKind::CustomLinear(m) => m.observe(x),
            SystemKind::Heat(_) => heat_observation() * x,
        }
    }

    /// The plant itself when it is linear.
    pub fn true_model(&self) -> Option<LinearModel> {
        match &self.kind {
            SystemKind::Leak => Some(leak_model()),
            SystemKind::CustomLinear(m) => Some(m.clone()),
            SystemKind::Heat(_) => None,
        }
    }

    pub fn simulate(&self, horizon: usize, seed: u64) -> Result<Trajectory> {
        if horizon == 0 {
            return Err(Error::invalid("simulation horizon must be at least 1"));
        }
        let mut process = stream_rng(seed, PROCESS_STREAM);
        let mut measurement = stream_rng(seed, MEASUREMENT_STREAM);
        let q_std = self.process_noise.map(f64::sqrt);
        let r_std = self.measurement_noise.map(f64::sqrt);
        let draw = |rng: &mut ChaCha8Rng, std: &DVector<f64>| {
            DVector::from_iterator(
                std.len(),
                std.iter().map(|s| {
                    let z: f64 = StandardNormal.sample(rng);
                    s * z
                }),
            )
        };

        let mut states = Vec::with_capacity(horizon + 1);
        let mut measurements = Vec::with_capacity(horizon + 1);
        let inputs = vec![self.input.clone(); horizon];
        states.push(self.x0.clone());
        for k in 0..horizon {
            let x = &states[k];
            measurements.push(self.observe(x) + draw(&mut measurement, &r_std));
            let w = draw(&mut process, &q_std);
            let next = self.step(x, &inputs[k]) + &self.noise_input * w;
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericDivergence { step: k + 1 });
            }
            states.push(next);
        }
        measurements.push(self.observe(&states[horizon]) + draw(&mut measurement, &r_std));
        Ok(Trajectory {
            states,
            inputs,
            measurements,
            seed,
        })
    }

    /// Discrete-time linearization `(I + dt df/dx, dt df/du, C)` of the heat
    /// plant at `x`.
    pub fn jacobian_linearize(&self, x: &DVector<f64>) -> Result<LinearModel> {
        let SystemKind::Heat(c) = &self.kind else {
            return Err(Error::invalid(format!(
                "jacobian linearization is defined for the heat plant, not {}",
                self.kind.name()
            )));
        };
        check_len("operating point", x.len(), 3)?;
        // The partials do not depend on x: the ODE is affine in the state.
        let (fx, fu) = c.partials();
        LinearModel::new(
            DMatrix::identity(3, 3) + fx * c.dt,
            fu * c.dt,
            heat_observation(),
        )
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::invalid(format!(
            "{what} has length {got}, expected {want}"
        )));
    }
    Ok(())
}

/// One simulated run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// `x_0..x_T`.
    pub states: Vec<DVector<f64>>,
    /// `u_0..u_{T-1}`.
    pub inputs: Vec<DVector<f64>>,
    /// `y_0..y_T`.
    pub measurements: Vec<DVector<f64>>,
    pub seed: u64,
}

impl Trajectory {
    /// Number of transitions `T`.
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_leak(x0: DVector<f64>) -> SystemSim {
        SystemSim::new(
            SystemKind::Leak,
            DVector::zeros(5),
            DVector::zeros(5),
            x0,
            DVector::zeros(0),
        )
        .unwrap()
    }

    fn quiet_heat(c: HeatConstants) -> SystemSim {
        SystemSim::heat(
            c,
            DVector::from_vec(vec![c.t_env, 0.0, 0.0]),
            DVector::zeros(3),
            DVector::zeros(2),
        )
        .unwrap()
    }

    #[test]
    fn leak_zero_noise_from_origin_stays_zero() {
        let traj = quiet_leak(DVector::zeros(5)).simulate(90, 3).unwrap();
        assert_eq!(traj.states.len(), 91);
        assert!(traj.states.iter().all(|x| x.iter().all(|&v| v == 0.0)));
        assert!(traj.measurements.iter().all(|y| y.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn leak_unit_vector_on_fifth_state() {
        let mut e5 = DVector::zeros(5);
        e5[4] = 1.0;
        let traj = quiet_leak(e5).simulate(1, 0).unwrap();
        assert_eq!(traj.states[1].as_slice(), &[1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn heat_equilibrium_with_dyadic_step() {
        let c = HeatConstants {
            dt: 0.125,
            ..HeatConstants::default()
        };
        let traj = quiet_heat(c).simulate(40, 1).unwrap();
        for (k, x) in traj.states.iter().enumerate() {
            assert_eq!(x[0], c.t_env);
            assert_eq!(x[1], k as f64 * c.dt);
            assert_eq!(x[2], 0.0);
        }
    }

    #[test]
    fn heat_time_channel_default_dt() {
        let c = HeatConstants::default();
        let traj = quiet_heat(c).simulate(100, 1).unwrap();
        for (k, x) in traj.states.iter().enumerate() {
            assert!((x[1] - k as f64 * c.dt).abs() < 1e-12);
        }
    }

    #[test]
    fn heat_rejects_nonpositive_dt() {
        let c = HeatConstants {
            dt: 0.0,
            ..HeatConstants::default()
        };
        let r = SystemSim::heat(c, DVector::zeros(3), DVector::zeros(3), DVector::zeros(2));
        assert!(r.is_err());
    }

    #[test]
    fn rejects_negative_variance() {
        let r = SystemSim::new(
            SystemKind::Leak,
            DVector::from_element(5, -1.0),
            DVector::zeros(5),
            DVector::zeros(5),
            DVector::zeros(0),
        );
        assert!(r.is_err());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let sys = SystemSim::leak(DVector::zeros(5)).unwrap();
        assert_eq!(sys.simulate(50, 9).unwrap(), sys.simulate(50, 9).unwrap());
        assert_ne!(sys.simulate(50, 9).unwrap(), sys.simulate(50, 10).unwrap());
    }

    #[test]
    fn leak_noise_enters_only_states_three_and_five() {
        let sys = SystemSim::leak(DVector::from_element(5, 1.0)).unwrap();
        let a = leak_model().a;
        for seed in [4, 5] {
            let traj = sys.simulate(60, seed).unwrap();
            for k in 0..60 {
                let pred = &a * &traj.states[k];
                let next = &traj.states[k + 1];
                for j in [0, 1, 3] {
                    assert_eq!(next[j], pred[j]);
                }
                assert_ne!(next[2], pred[2]);
                assert_ne!(next[4], pred[4]);
            }
        }
    }

    #[test]
    fn divergence_reports_step() {
        let m = LinearModel::new(
            DMatrix::from_element(1, 1, 1e200),
            DMatrix::zeros(1, 0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let sys = SystemSim::custom_linear(
            m,
            DVector::from_element(1, 1.0),
            DVector::zeros(1),
            DVector::zeros(1),
            DVector::zeros(0),
        )
        .unwrap();
        match sys.simulate(10, 0) {
            Err(Error::NumericDivergence { step }) => assert_eq!(step, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn continuous_partials_match_ode_structure() {
        let c = HeatConstants::default();
        let (fx, _) = c.partials();
        assert_eq!(fx[(0, 0)], -c.k1);
        assert_eq!(fx[(0, 2)], c.k2);
        assert_eq!(fx[(2, 0)], -c.k3);
        assert_eq!(fx[(0, 1)], 0.0);
        assert_eq!(fx[(2, 1)], 0.0);
        assert_eq!(fx[(2, 2)], 0.0);
        assert!(fx.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn jacobian_is_constant_in_operating_point() {
        let sys = quiet_heat(HeatConstants::default());
        let a = sys.jacobian_linearize(&DVector::from_vec(vec![50.0, 0.0, 100.0])).unwrap();
        let b = sys.jacobian_linearize(&DVector::from_vec(vec![-3.0, 7.0, 2.5])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let sys = quiet_heat(HeatConstants::default());
        let x = DVector::from_vec(vec![50.0, 3.0, 100.0]);
        let u = DVector::from_element(1, 0.0);
        let lin = sys.jacobian_linearize(&x).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (sys.step(&xp, &u) - sys.step(&xm, &u)) / (2.0 * h);
            for i in 0..3 {
                assert!((col[i] - lin.a[(i, j)]).abs() < 1e-6, "A[{i},{j}]");
            }
        }
        let up = DVector::from_element(1, h);
        let um = DVector::from_element(1, -h);
        let col = (sys.step(&x, &up) - sys.step(&x, &um)) / (2.0 * h);
        for i in 0..3 {
            assert!((col[i] - lin.b[(i, 0)]).abs() < 1e-6);
        }
    }

    #[test]
    fn jacobian_rejects_leak() {
        let sys = SystemSim::leak(DVector::zeros(5)).unwrap();
        assert!(sys.jacobian_linearize(&DVector::zeros(5)).is_err());
    }

    #[test]
    fn dimensions_of_every_sample() {
        let sys = SystemSim::heat(
            HeatConstants::default(),
            DVector::from_vec(vec![50.0, 0.0, 100.0]),
            DVector::from_element(3, 1.0),
            DVector::from_element(2, 5.0),
        )
        .unwrap();
        let traj = sys.simulate(100, 2).unwrap();
        assert_eq!(traj.measurements.len(), traj.states.len());
        assert!(traj.states.iter().all(|x| x.len() == 3));
        assert!(traj.measurements.iter().all(|y| y.len() == 2));
        assert!(traj.inputs.iter().all(|u| u.len() == 1));
    }
}
