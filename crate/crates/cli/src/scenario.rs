//! Scenario files: schema validation and conversion into core types.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use zoomstab::analysis::DiagnosticConfig;
use zoomstab::closed_loop::{LoopConfig, LoopMode, MultiSensorPolicy};
use zoomstab::linalg::to_matrix;
use zoomstab::quantizer::ZoomParams;
use zoomstab::system::{LinearSystem, Sensor};
use zoomstab::transforms::EstimatorKind;
use zoomstab::{Matrix, Vector};

use crate::CliError;

pub const SCENARIO_SCHEMA: &str = include_str!("../schema/scenario.schema.json");
pub const SUMMARY_SCHEMA: &str = include_str!("../schema/summary.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_w: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0_cov: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensorSpec {
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_v: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZoomSpec {
    pub rho: f64,
    pub epsilon: f64,
    pub eta: f64,
    pub delta: f64,
    pub c: f64,
}

impl Default for ZoomSpec {
    fn default() -> Self {
        let z = ZoomParams::<f64>::standard();
        ZoomSpec { rho: z.rho, epsilon: z.epsilon, eta: z.eta, delta: z.delta, c: z.c }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSpec {
    #[default]
    Single,
    Eigenspace,
    BlockTriangular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RateSpec {
    pub periods: Vec<u32>,
}

impl Default for RateSpec {
    fn default() -> Self {
        RateSpec { periods: vec![1, 2, 5, 10, 20, 50] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TailSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s1: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub s2: Option<usize>,
    pub tail_start: usize,
    pub min_intervals: usize,
    pub min_trials: usize,
    pub moment_ratio: f64,
    pub min_group: usize,
}

impl Default for DiagnoseSpec {
    fn default() -> Self {
        let d = DiagnosticConfig::default();
        DiagnoseSpec {
            s1: None,
            s2: None,
            tail_start: d.tail_start,
            min_intervals: d.min_intervals,
            min_trials: d.min_trials,
            moment_ratio: d.moment_ratio,
            min_group: d.min_group,
        }
    }
}

fn one() -> u32 {
    1
}
fn default_horizon() -> usize {
    1000
}
fn default_trials() -> usize {
    1
}
fn default_coverage() -> f64 {
    0.999
}

/// A scenario file with every default filled in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "one")]
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub system: SystemSpec,
    pub sensors: Vec<SensorSpec>,
    #[serde(default)]
    pub zoom: ZoomSpec,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: ModeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stack: Option<Vec<usize>>,
    #[serde(default)]
    pub estimator: EstimatorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lattice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta0: Option<f64>,
    #[serde(rename = "F", default, skip_serializing_if = "Option::is_none")]
    pub f_radius: Option<f64>,
    #[serde(default = "default_coverage")]
    pub coverage: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_margin: Option<f64>,
    #[serde(default)]
    pub open_loop: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub rate: RateSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tailbound: Option<TailSpec>,
    #[serde(default)]
    pub diagnose: DiagnoseSpec,
}

/// Check a JSON document against a schema, reporting every failing path.
pub fn validate_against(schema_text: &str, doc: &Value, what: &str) -> Result<(), CliError> {
    let schema: Value = serde_json::from_str(schema_text).expect("bundled schema is valid JSON");
    let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
    let problems: Vec<String> = validator
        .iter_errors(doc)
        .map(|e| {
            let at = e.instance_path.to_string();
            format!("{}: {} (schema {})", if at.is_empty() { "/" } else { &at }, e, e.schema_path)
        })
        .collect();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("{what} failed schema validation: {}", problems.join("; "))))
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, CliError> {
        let doc: Value =
            serde_json::from_str(text).map_err(|e| CliError::Validation(format!("scenario is not valid JSON: {e}")))?;
        validate_against(SCENARIO_SCHEMA, &doc, "scenario")?;
        serde_json::from_value(doc).map_err(|e| CliError::Validation(format!("scenario: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Scenario, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read scenario {}: {e}", path.display())))?;
        Scenario::from_json(&text)
    }

    fn matrix(rows: &[Vec<f64>], what: &str) -> Result<Matrix, CliError> {
        to_matrix(rows).map_err(|e| CliError::Validation(format!("{what}: {e}")))
    }

    pub fn system(&self) -> Result<LinearSystem, CliError> {
        let a = Self::matrix(&self.system.a, "system.A")?;
        let b = Self::matrix(&self.system.b, "system.B")?;
        let n = a.nrows();
        let sensors = self
            .sensors
            .iter()
            .enumerate()
            .map(|(j, s)| {
                let c = Self::matrix(&s.c, &format!("sensors[{j}].C"))?;
                Ok(match &s.sigma_v {
                    Some(v) => Sensor::with_noise(c, Self::matrix(v, &format!("sensors[{j}].sigma_v"))?),
                    None => Sensor::new(c),
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let mut sys = LinearSystem::new(a, b, sensors)?;
        if let Some(w) = &self.system.sigma_w {
            sys = sys.with_process_noise(Self::matrix(w, "system.sigma_w")?)?;
        }
        if self.system.x0_mean.is_some() || self.system.x0_cov.is_some() {
            let mean = self.system.x0_mean.clone().map(Vector::from_vec).unwrap_or_else(|| Vector::zeros(n));
            let cov = match &self.system.x0_cov {
                Some(c) => Self::matrix(c, "system.x0_cov")?,
                None => Matrix::identity(n, n),
            };
            sys = sys.with_initial_state(mean, cov)?;
        }
        Ok(sys)
    }

    pub fn loop_config(&self) -> Result<LoopConfig, CliError> {
        let z = &self.zoom;
        let mut cfg = LoopConfig::new(self.horizon);
        cfg.zoom = ZoomParams::new(z.rho, z.epsilon, z.eta, z.delta, z.c)?;
        cfg.mode = match self.mode {
            ModeSpec::Single => LoopMode::SingleSensor { sensors: self.stack.clone().unwrap_or_default() },
            ModeSpec::Eigenspace => LoopMode::MultiSensor(MultiSensorPolicy::Eigenspace),
            ModeSpec::BlockTriangular => {
                LoopMode::MultiSensor(MultiSensorPolicy::BlockTriangular { order: self.order.clone() })
            }
        };
        cfg.f_radius = self.f_radius;
        cfg.delta0 = self.delta0;
        cfg.bins = self.bins.clone();
        cfg.lattice = self.lattice;
        cfg.estimator = self.estimator;
        cfg.transform = self.transform.as_deref().map(|t| Self::matrix(t, "transform")).transpose()?;
        cfg.open_loop = self.open_loop;
        cfg.coverage = self.coverage;
        cfg.noise_margin = self.noise_margin;
        Ok(cfg)
    }

    pub fn diagnostic_config(&self) -> DiagnosticConfig {
        let d = &self.diagnose;
        DiagnosticConfig {
            tail_start: d.tail_start,
            min_intervals: d.min_intervals,
            min_at_risk: DiagnosticConfig::default().min_at_risk,
            min_trials: d.min_trials,
            moment_ratio: d.moment_ratio,
            min_group: d.min_group,
            groups_per_octave: DiagnosticConfig::default().groups_per_octave,
        }
    }
}
