//! Experiment configuration files and their resolution into runnable parts.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::acquisition::AcquisitionConfig;
use crate::bomhe::{BomheConfig, ObjectiveTransform, TrustRegion};
use crate::mhe::MheConfig;
use crate::model::{Bounds, LinearModel, ParamTemplate};
use crate::sim::{
    heat_observation, leak_model, HeatConstants, SystemKind, SystemSim, LEAK_MEASUREMENT_NOISE,
    LEAK_PROCESS_NOISE,
};

/// A configuration problem, prefixed with the offending field path.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn field_err(field: &str, msg: impl fmt::Display) -> ConfigError {
    ConfigError(format!("{field}: {msg}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSection,
    pub mhe: MheSection,
    #[serde(default)]
    pub bomhe: BomheSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    /// `leak`, `heat` or `custom-linear`.
    pub kind: Option<String>,
    /// Number of transitions `T`.
    pub horizon: Option<usize>,
    pub x0: Option<Vec<f64>>,
    /// Diagonal of the process-noise covariance.
    pub process_noise: Option<Vec<f64>>,
    /// Diagonal of the measurement-noise covariance.
    pub measurement_noise: Option<Vec<f64>>,
    /// Heat plant only.
    pub constants: Option<HeatConstants>,
    /// Custom linear plant only, row-major.
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub c: Option<Vec<Vec<f64>>>,
    /// Constant input applied at every step.
    pub input: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MheSection {
    /// Window length `N`.
    pub horizon: Option<usize>,
    pub q: Option<Vec<f64>>,
    pub r: Option<Vec<f64>>,
    pub p0: Option<Vec<f64>>,
    pub x0_guess: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    /// Nonzero entries of the true state matrix are free.
    Sparsity,
    /// Every state-matrix entry is free.
    FullState,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BomheSection {
    pub max_iter: Option<usize>,
    pub n_init: Option<usize>,
    pub refit_period: Option<usize>,
    pub hyper_restarts: Option<usize>,
    /// `[lo, hi]` applied to every free parameter.
    pub bounds: Option<[f64; 2]>,
    /// Per-parameter `[lo, hi]`; takes precedence over `bounds`.
    pub bounds_per_dim: Option<Vec<[f64; 2]>>,
    pub template: Option<TemplateKind>,
    pub objective_transform: Option<ObjectiveTransform>,
    pub acquisition: Option<AcquisitionConfig>,
    pub trust_region: Option<TrustRegion>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<String>,
    /// 1-based state indices scored by the MAE.
    pub monitored: Option<Vec<usize>>,
}

/// A validated experiment ready to run.
#[derive(Clone, Debug)]
pub struct Experiment {
    /// The input with every default filled in.
    pub config: ExperimentConfig,
    pub system: SystemSim,
    pub horizon: usize,
    pub mhe: MheConfig,
    pub bomhe: BomheConfig,
    pub template: ParamTemplate,
    /// Model used by the `mhe-true` estimator.
    pub baseline: LinearModel,
    /// 0-based.
    pub monitored: Vec<usize>,
}

impl Experiment {
    pub fn kind(&self) -> &'static str {
        self.system.kind().name()
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    /// Output directory named in the config, or `runs/<kind>`.
    pub fn default_out_dir(&self) -> String {
        self.config
            .output
            .dir
            .clone()
            .unwrap_or_else(|| format!("runs/{}", self.kind()))
    }
}

fn matrix(field: &str, rows: &[Vec<f64>], n_rows: Option<usize>) -> Result<DMatrix<f64>, ConfigError> {
    let n_cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != n_cols) {
        return Err(field_err(field, "rows have different lengths"));
    }
    if let Some(n) = n_rows {
        if rows.len() != n {
            return Err(field_err(field, format!("expected {n} rows, got {}", rows.len())));
        }
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), n_cols, &flat))
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn check_len(field: &str, v: &[f64], n: usize) -> Result<(), ConfigError> {
    if v.len() != n {
        return Err(field_err(field, format!("expected {n} values, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(field_err(field, "values must be finite"));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("config parse error: {e}")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The leak detection experiment.
    pub fn leak() -> Self {
        ExperimentConfig {
            seed: 0,
            system: SystemSection {
                kind: Some("leak".into()),
                horizon: Some(90),
                x0: Some(vec![0.0; 5]),
                process_noise: Some(LEAK_PROCESS_NOISE.to_vec()),
                measurement_noise: Some(LEAK_MEASUREMENT_NOISE.to_vec()),
                ..Default::default()
            },
            mhe: MheSection {
                horizon: Some(10),
                q: Some(vec![5.0, 5.0, 5.0, 5.0, 15.0]),
                r: Some(vec![8.0, 8.0, 8.0, 8.0, 4.0]),
                p0: Some(vec![1.0; 5]),
                x0_guess: Some(vec![0.0; 5]),
            },
            bomhe: BomheSection {
                max_iter: Some(200),
                bounds: Some([0.0, 5.0]),
                template: Some(TemplateKind::Sparsity),
                ..Default::default()
            },
            output: OutputSection {
                dir: Some("runs/leak".into()),
                monitored: Some(vec![3, 5]),
            },
        }
    }

    /// The heat transfer experiment with the documented default constants.
    pub fn heat() -> Self {
        ExperimentConfig {
            seed: 0,
            system: SystemSection {
                kind: Some("heat".into()),
                horizon: Some(100),
                x0: Some(vec![50.0, 0.0, 100.0]),
                process_noise: Some(vec![1.0, 0.0, 0.0]),
                measurement_noise: Some(vec![5.0, 5.0]),
                constants: Some(HeatConstants::default()),
                ..Default::default()
            },
            mhe: MheSection {
                horizon: Some(10),
                q: Some(vec![1.0, 1.0, 1.0]),
                r: Some(vec![5.0, 5.0]),
                p0: Some(vec![1.0; 3]),
                x0_guess: Some(vec![50.0, 0.0, 100.0]),
            },
            bomhe: BomheSection {
                max_iter: Some(200),
                bounds: Some([-2.0, 2.0]),
                template: Some(TemplateKind::FullState),
                ..Default::default()
            },
            output: OutputSection {
                dir: Some("runs/heat".into()),
                monitored: Some(vec![1, 3]),
            },
        }
    }

    pub fn resolve(&self) -> Result<Experiment, ConfigError> {
        let sys = &self.system;
        let kind_name = sys
            .kind
            .as_deref()
            .ok_or_else(|| field_err("system.kind", "missing required field (expected leak, heat or custom-linear)"))?;

        let (kind, n_x, n_y, n_u, default_horizon, default_q_w, default_r_v, default_x0, default_bounds, default_template) =
            match kind_name {
                "leak" => {
                    for (name, present) in [
                        ("system.constants", sys.constants.is_some()),
                        ("system.a", sys.a.is_some()),
                        ("system.b", sys.b.is_some()),
                        ("system.c", sys.c.is_some()),
                        ("system.input", sys.input.is_some()),
                    ] {
                        if present {
                            return Err(field_err(name, "not used by the leak plant"));
                        }
                    }
                    (
                        SystemKind::Leak,
                        5,
                        5,
                        0,
                        90,
                        LEAK_PROCESS_NOISE.to_vec(),
                        LEAK_MEASUREMENT_NOISE.to_vec(),
                        vec![0.0; 5],
                        Some([0.0, 5.0]),
                        TemplateKind::Sparsity,
                    )
                }
                "heat" => {
                    for (name, present) in [
                        ("system.a", sys.a.is_some()),
                        ("system.b", sys.b.is_some()),
                        ("system.c", sys.c.is_some()),
                        ("system.input", sys.input.is_some()),
                    ] {
                        if present {
                            return Err(field_err(name, "not used by the heat plant (set constants.u instead)"));
                        }
                    }
                    let c = sys.constants.unwrap_or_default();
                    for (name, v) in [
                        ("k1", c.k1),
                        ("k2", c.k2),
                        ("k3", c.k3),
                        ("k_u", c.k_u),
                        ("t_env", c.t_env),
                        ("u", c.u),
                    ] {
                        if !v.is_finite() {
                            return Err(field_err(&format!("system.constants.{name}"), "must be finite"));
                        }
                    }
                    if !(c.dt > 0.0 && c.dt.is_finite()) {
                        return Err(field_err("system.constants.dt", "must be finite and > 0"));
                    }
                    (
                        SystemKind::Heat(c),
                        3,
                        2,
                        1,
                        100,
                        vec![1.0, 0.0, 0.0],
                        vec![5.0; 2],
                        vec![50.0, 0.0, 100.0],
                        Some([-2.0, 2.0]),
                        TemplateKind::FullState,
                    )
                }
                "custom-linear" => {
                    if sys.constants.is_some() {
                        return Err(field_err("system.constants", "only used by the heat plant"));
                    }
                    let a = matrix("system.a", sys.a.as_deref().ok_or_else(|| field_err("system.a", "required for custom-linear"))?, None)?;
                    let n_x = a.nrows();
                    let b = match &sys.b {
                        Some(rows) => matrix("system.b", rows, Some(n_x))?,
                        None => DMatrix::zeros(n_x, 0),
                    };
                    let c = match &sys.c {
                        Some(rows) => matrix("system.c", rows, None)?,
                        None => DMatrix::identity(n_x, n_x),
                    };
                    let model = LinearModel::new(a, b, c).map_err(|e| field_err("system.a/b/c", e))?;
                    let (n_y, n_u) = (model.n_y(), model.n_u());
                    (
                        SystemKind::CustomLinear(model),
                        n_x,
                        n_y,
                        n_u,
                        100,
                        vec![0.0; n_x],
                        vec![0.0; n_y],
                        vec![0.0; n_x],
                        None,
                        TemplateKind::FullState,
                    )
                }
                other => {
                    return Err(field_err(
                        "system.kind",
                        format!("unknown kind '{other}' (expected leak, heat or custom-linear)"),
                    ))
                }
            };

        let horizon = sys.horizon.unwrap_or(default_horizon);
        if horizon == 0 {
            return Err(field_err("system.horizon", "must be >= 1"));
        }
        let x0 = sys.x0.clone().unwrap_or(default_x0);
        check_len("system.x0", &x0, n_x)?;
        let q_w = sys.process_noise.clone().unwrap_or(default_q_w);
        check_len("system.process_noise", &q_w, n_x)?;
        let r_v = sys.measurement_noise.clone().unwrap_or(default_r_v);
        check_len("system.measurement_noise", &r_v, n_y)?;
        let input = match (&kind, &sys.input) {
            (SystemKind::Heat(c), _) => vec![c.u],
            (_, Some(u)) => u.clone(),
            _ => vec![0.0; n_u],
        };
        check_len("system.input", &input, n_u)?;
        let system = SystemSim::new(
            kind.clone(),
            DVector::from_vec(q_w.clone()),
            DVector::from_vec(r_v.clone()),
            DVector::from_vec(x0.clone()),
            DVector::from_vec(input.clone()),
        )
        .map_err(|e| field_err("system", e))?;

        let m = &self.mhe;
        let n_window = m.horizon.ok_or_else(|| field_err("mhe.horizon", "missing required field"))?;
        let q = m.q.clone().ok_or_else(|| field_err("mhe.q", "missing required field"))?;
        check_len("mhe.q", &q, n_x)?;
        let r = m.r.clone().ok_or_else(|| field_err("mhe.r", "missing required field"))?;
        check_len("mhe.r", &r, n_y)?;
        let p0 = m.p0.clone().unwrap_or_else(|| vec![1.0; n_x]);
        check_len("mhe.p0", &p0, n_x)?;
        let x0_guess = m.x0_guess.clone().unwrap_or_else(|| x0.clone());
        check_len("mhe.x0_guess", &x0_guess, n_x)?;
        if n_window == 0 || n_window > horizon {
            return Err(field_err("mhe.horizon", format!("must be in 1..={horizon} (the system horizon)")));
        }
        let mhe = MheConfig::diagonal(n_window, &q, &r, &p0, &x0_guess).map_err(|e| field_err("mhe", e))?;

        let (baseline, b_known, c_known) = match &kind {
            SystemKind::Leak => {
                let m = leak_model();
                (m.clone(), m.b, m.c)
            }
            SystemKind::Heat(_) => {
                let lin = system
                    .jacobian_linearize(&DVector::from_vec(x0.clone()))
                    .map_err(|e| field_err("system", e))?;
                let (b, c) = (lin.b.clone(), heat_observation());
                (lin, b, c)
            }
            SystemKind::CustomLinear(m) => (m.clone(), m.b.clone(), m.c.clone()),
        };

        let bs = &self.bomhe;
        let template_kind = bs.template.unwrap_or(default_template);
        let template = match template_kind {
            TemplateKind::Sparsity => ParamTemplate::sparsity_of(&baseline.a, &b_known, &c_known),
            TemplateKind::FullState => ParamTemplate::free_state_matrix(&b_known, &c_known),
        }
        .map_err(|e| field_err("bomhe.template", e))?;
        let d = template.dim();
        let bounds_pairs: Vec<[f64; 2]> = match (&bs.bounds_per_dim, bs.bounds.or(default_bounds)) {
            (Some(per_dim), _) => {
                if per_dim.len() != d {
                    return Err(field_err(
                        "bomhe.bounds_per_dim",
                        format!("expected {d} intervals, got {}", per_dim.len()),
                    ));
                }
                per_dim.clone()
            }
            (None, Some(b)) => vec![b; d],
            (None, None) => return Err(field_err("bomhe.bounds", "required for custom-linear")),
        };
        let bounds = bounds_pairs
            .iter()
            .map(|[lo, hi]| Bounds::new(*lo, *hi))
            .collect::<crate::Result<Vec<_>>>()
            .map_err(|e| field_err("bomhe.bounds", e))?;
        let mut bomhe = BomheConfig::new(bounds, bs.max_iter.unwrap_or(200), self.seed);
        bomhe.n_init = bs.n_init.unwrap_or(bomhe.n_init);
        bomhe.refit_period = bs.refit_period.unwrap_or(bomhe.refit_period);
        bomhe.hyper_restarts = bs.hyper_restarts.unwrap_or(bomhe.hyper_restarts);
        bomhe.objective_transform = bs.objective_transform.unwrap_or_default();
        bomhe.acquisition = bs.acquisition.clone().unwrap_or_default();
        bomhe.trust_region = bs.trust_region.clone().unwrap_or_default();
        bomhe.validate(&template).map_err(|e| field_err("bomhe", e))?;

        let monitored_1 = self.output.monitored.clone().unwrap_or_else(|| (1..=n_x).collect());
        if monitored_1.is_empty() {
            return Err(field_err("output.monitored", "must name at least one state"));
        }
        if let Some(bad) = monitored_1.iter().find(|&&j| j == 0 || j > n_x) {
            return Err(field_err("output.monitored", format!("state {bad} is outside 1..={n_x}")));
        }
        let monitored: Vec<usize> = monitored_1.iter().map(|j| j - 1).collect();

        let config = ExperimentConfig {
            seed: self.seed,
            system: SystemSection {
                kind: Some(kind_name.to_string()),
                horizon: Some(horizon),
                x0: Some(x0),
                process_noise: Some(q_w),
                measurement_noise: Some(r_v),
                constants: match &kind {
                    SystemKind::Heat(c) => Some(*c),
                    _ => None,
                },
                a: match &kind {
                    SystemKind::CustomLinear(m) => Some(rows_of(&m.a)),
                    _ => None,
                },
                b: match &kind {
                    SystemKind::CustomLinear(m) => Some(rows_of(&m.b)),
                    _ => None,
                },
                c: match &kind {
                    SystemKind::CustomLinear(m) => Some(rows_of(&m.c)),
                    _ => None,
                },
                input: match &kind {
                    SystemKind::CustomLinear(_) => Some(input),
                    _ => None,
                },
            },
            mhe: MheSection {
                horizon: Some(n_window),
                q: Some(q),
                r: Some(r),
                p0: Some(p0),
                x0_guess: Some(mhe.x0_guess.iter().copied().collect()),
            },
            bomhe: BomheSection {
                max_iter: Some(bomhe.max_iter),
                n_init: Some(bomhe.n_init),
                refit_period: Some(bomhe.refit_period),
                hyper_restarts: Some(bomhe.hyper_restarts),
                bounds: None,
                bounds_per_dim: Some(bounds_pairs),
                template: Some(template_kind),
                objective_transform: Some(bomhe.objective_transform),
                acquisition: Some(bomhe.acquisition.clone()),
                trust_region: Some(bomhe.trust_region.clone()),
            },
            output: OutputSection {
                dir: self.output.dir.clone(),
                monitored: Some(monitored_1),
            },
        };

        Ok(Experiment {
            config,
            system,
            horizon,
            mhe,
            bomhe,
            template,
            baseline,
            monitored,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve() {
        let leak = ExperimentConfig::leak().resolve().unwrap();
        assert_eq!(leak.template.dim(), 9);
        assert_eq!(leak.monitored, vec![2, 4]);
        assert_eq!(leak.horizon, 90);
        assert_eq!(leak.baseline, leak_model());
        let heat = ExperimentConfig::heat().resolve().unwrap();
        assert_eq!(heat.template.dim(), 9);
        assert_eq!(heat.monitored, vec![0, 2]);
        assert_eq!(heat.baseline.n_u(), 1);
    }

    #[test]
    fn resolved_config_is_a_fixed_point() {
        for cfg in [ExperimentConfig::leak(), ExperimentConfig::heat()] {
            let once = cfg.resolve().unwrap().config;
            let twice = once.resolve().unwrap().config;
            assert_eq!(once, twice);
            let text = once.to_toml_string();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), once);
        }
    }

    #[test]
    fn missing_kind_names_the_field() {
        let cfg = ExperimentConfig::from_toml_str("[system]\nhorizon = 5\n[mhe]\nhorizon = 2\n").unwrap();
        let err = cfg.resolve().unwrap_err();
        assert!(err.0.contains("system.kind"), "{err}");
        let mut bad = ExperimentConfig::leak();
        bad.system.kind = Some("pendulum".into());
        assert!(bad.resolve().unwrap_err().0.contains("system.kind"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("[system]\nkind = \"leak\"\ncolour = 1\n[mhe]\n").unwrap_err();
        assert!(err.0.contains("colour"), "{err}");
    }

    #[test]
    fn field_errors() {
        let mut cfg = ExperimentConfig::leak();
        cfg.mhe.q = Some(vec![1.0; 4]);
        assert!(cfg.resolve().unwrap_err().0.starts_with("mhe.q"));
        let mut cfg = ExperimentConfig::leak();
        cfg.output.monitored = Some(vec![0]);
        assert!(cfg.resolve().unwrap_err().0.starts_with("output.monitored"));
        let mut cfg = ExperimentConfig::leak();
        cfg.bomhe.bounds = Some([3.0, 1.0]);
        assert!(cfg.resolve().unwrap_err().0.starts_with("bomhe.bounds"));
        let mut cfg = ExperimentConfig::leak();
        cfg.mhe.horizon = Some(91);
        assert!(cfg.resolve().unwrap_err().0.starts_with("mhe.horizon"));
    }

    #[test]
    fn custom_linear() {
        let text = r#"
seed = 4
[system]
kind = "custom-linear"
horizon = 20
a = [[0.9, 0.1], [0.0, 0.8]]
c = [[1.0, 0.0]]
process_noise = [0.1, 0.1]
measurement_noise = [0.5]
[mhe]
horizon = 4
q = [1.0, 1.0]
r = [1.0]
[bomhe]
bounds = [-1.0, 1.0]
max_iter = 3
"#;
        let exp = ExperimentConfig::from_toml_str(text).unwrap().resolve().unwrap();
        assert_eq!(exp.template.dim(), 4);
        assert_eq!(exp.monitored, vec![0, 1]);
        assert_eq!(exp.bomhe.seed, 4);
    }
}
