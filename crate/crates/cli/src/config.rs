//! Run configuration: one TOML document with `[model]`, `[environment]`,
//! `[sim]`, `[analysis]` and `[output]` sections. The grammar is described in
//! `book/src/cli.md`.

use std::collections::BTreeMap;
use std::fmt;

use bdenv::diffusive::{DiffusionSpec, DiffusiveExample};
use bdenv::jump::{EnvChainSpec, EnvState};
use bdenv::model::{catalog, ModelSpec, ParamMap, RateParam, Variability};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// A configuration problem, located by field path and (when the key is
/// present in the source) line number.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "line {l}: {}: {}", self.field, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub environment: EnvironmentSection,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Present in manifests written by earlier runs; ignored on input.
    #[serde(default, skip_serializing)]
    pub manifest: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Catalog name; mutually exclusive with `births`/`deaths`.
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub params: BTreeMap<String, RateParam>,
    #[serde(default)]
    pub births: Option<Vec<f64>>,
    #[serde(default)]
    pub deaths: Option<Vec<f64>>,
    /// Truncation level for tables and sums.
    #[serde(default = "default_n_max")]
    pub n_max: usize,
}

fn default_n_max() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentSection {
    /// `β_n`; defaults to constant 1.
    #[serde(default)]
    pub beta: Option<Variability>,
    #[serde(default)]
    pub jump: Option<JumpEnvSection>,
    #[serde(default)]
    pub diffusive: Option<DiffusiveEnvSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpStateSection {
    pub label: String,
    #[serde(default)]
    pub coords: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JumpEnvSection {
    pub states: Vec<JumpStateSection>,
    /// Base generator `T`; rows must sum to zero.
    pub generator: Vec<Vec<f64>>,
    /// Only `"beta_n * T"` is accepted.
    #[serde(default = "default_template")]
    pub template: String,
    #[serde(default)]
    pub start: usize,
}

fn default_template() -> String {
    "beta_n * T".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusiveEnvSection {
    #[serde(flatten)]
    pub example: DiffusiveExample,
    #[serde(default)]
    pub start: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSection {
    pub dt: f64,
    pub horizon: f64,
    pub burn_in: f64,
    pub replicas: usize,
    pub seed: Option<u64>,
    pub h_env: f64,
    pub speed_cap: f64,
    /// Initial level.
    pub start_n: usize,
    /// Highest level tabulated in occupancy outputs; above it counts as overflow.
    pub n_cap: usize,
    /// Environment bins per axis for diffusive occupancy.
    pub bins: Option<usize>,
    /// Write a trajectory CSV (replica 0).
    pub trajectory: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 1e3,
            burn_in: 1e2,
            replicas: 1,
            seed: None,
            h_env: 1e-3,
            speed_cap: f64::INFINITY,
            start_n: 0,
            n_cap: 30,
            bins: None,
            trajectory: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateKind {
    /// First exponential scenario, falling back to the second when `p̄ ≥ 1/2`.
    Auto,
    S1,
    S2,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub balance: bool,
    pub assumptions: bool,
    /// Compare simulated occupancy against the analytic law.
    pub tv_check: bool,
    pub tv_tolerance: f64,
    pub balance_tolerance: f64,
    pub rates: Vec<RateKind>,
    pub coupling_samples: usize,
    pub coupling_horizon: f64,
    pub env_samples: usize,
    pub decay_replicas: usize,
    pub decay_window: [f64; 2],
    pub decay_points: usize,
    pub hitting_starts: Vec<usize>,
    pub hitting_replicas: usize,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            balance: true,
            assumptions: true,
            tv_check: true,
            tv_tolerance: 0.03,
            balance_tolerance: 1e-9,
            rates: Vec::new(),
            coupling_samples: 10_000,
            coupling_horizon: 1e4,
            env_samples: 20_000,
            decay_replicas: 10_000,
            decay_window: [10.0, 1000.0],
            decay_points: 200,
            hitting_starts: vec![1, 2, 5, 10],
            hitting_replicas: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: String,
    /// Only `"csv"` is produced; the report is always plain text.
    pub formats: Vec<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: "bdenv-out".into(),
            formats: vec!["csv".into()],
        }
    }
}

/// Environment after validation.
pub enum Environment {
    Jump { chain: EnvChainSpec, start: usize },
    Diffusive { example: DiffusiveExample, spec: DiffusionSpec, start: Vec<f64> },
}

/// Line of `key` inside `[section]` (dotted sections allowed), if present.
fn locate(source: &str, section: &str, key: Option<&str>) -> Option<usize> {
    let mut current = String::new();
    let mut header_line = None;
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if let Some(h) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = h.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section && header_line.is_none() {
                header_line = Some(i + 1);
            }
            continue;
        }
        if current == section {
            if let Some(k) = key {
                let name = line.split('=').next().unwrap_or("").trim();
                if name == k {
                    return Some(i + 1);
                }
            }
        }
    }
    header_line
}

impl RunConfig {
    pub fn parse(source: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(source).map_err(|e| ConfigError {
            field: "config".into(),
            line: e.span().map(|s| source[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })?;
        cfg.validate(source)?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    fn validate(&self, source: &str) -> Result<(), ConfigError> {
        let err = |section: &str, key: &str, message: String| ConfigError {
            field: format!("{section}.{key}"),
            line: locate(source, section, Some(key)),
            message,
        };
        let m = &self.model;
        match (&m.name, &m.births, &m.deaths) {
            (Some(_), None, None) => {}
            (None, Some(b), Some(d)) => {
                if b.len() != d.len() || b.is_empty() {
                    return Err(err("model", "births", "births and deaths must be nonempty and of equal length".into()));
                }
            }
            _ => {
                return Err(err(
                    "model",
                    "name",
                    "give either a catalog name or both births and deaths tables".into(),
                ))
            }
        }
        match (&self.environment.jump, &self.environment.diffusive) {
            (Some(_), Some(_)) => {
                return Err(ConfigError {
                    field: "environment".into(),
                    line: locate(source, "environment.diffusive", None),
                    message: "both environment.jump and environment.diffusive are present; give exactly one".into(),
                })
            }
            (None, None) => {
                return Err(ConfigError {
                    field: "environment".into(),
                    line: locate(source, "environment", None),
                    message: "one of environment.jump or environment.diffusive is required".into(),
                })
            }
            _ => {}
        }
        if let Some(j) = &self.environment.jump {
            let k = j.states.len();
            if k == 0 {
                return Err(err("environment.jump", "states", "at least one state is required".into()));
            }
            if j.generator.len() != k || j.generator.iter().any(|r| r.len() != k) {
                return Err(err("environment.jump", "generator", format!("generator must be {k}×{k}")));
            }
            if j.template.replace(' ', "") != "beta_n*T" {
                return Err(err(
                    "environment.jump",
                    "template",
                    format!("unsupported template {:?}; only \"beta_n * T\" is accepted", j.template),
                ));
            }
            if j.start >= k {
                return Err(err("environment.jump", "start", format!("start must be below {k}")));
            }
        }
        let s = &self.sim;
        if !(s.dt > 0.0) {
            return Err(err("sim", "dt", "must be positive".into()));
        }
        if !(s.horizon > 0.0 && s.horizon.is_finite()) {
            return Err(err("sim", "horizon", "must be positive and finite".into()));
        }
        if !(s.burn_in >= 0.0 && s.burn_in < s.horizon) {
            return Err(err("sim", "burn_in", format!("must lie in [0, horizon = {})", s.horizon)));
        }
        if s.replicas == 0 {
            return Err(err("sim", "replicas", "must be at least 1".into()));
        }
        if s.replicas > 1 && s.seed.is_none() {
            return Err(err("sim", "seed", "a seed is required when replicas > 1".into()));
        }
        let a = &self.analysis;
        if !(a.decay_window[0] > 0.0 && a.decay_window[0] < a.decay_window[1]) {
            return Err(err("analysis", "decay_window", "needs 0 < start < end".into()));
        }
        if a.decay_points < 2 {
            return Err(err("analysis", "decay_points", "must be at least 2".into()));
        }
        if let Some(f) = self.output.formats.iter().find(|f| f.as_str() != "csv") {
            return Err(err("output", "formats", format!("unsupported format {f:?}")));
        }
        Ok(())
    }

    pub fn beta(&self) -> Variability {
        self.environment.beta.clone().unwrap_or(Variability::Constant(1.0))
    }

    pub fn build_model(&self) -> Result<ModelSpec, ConfigError> {
        let m = &self.model;
        let spec = match (&m.name, &m.births, &m.deaths) {
            (Some(name), _, _) => {
                let params: ParamMap = m.params.clone();
                catalog(name, &params).map_err(|e| ConfigError {
                    field: "model.name".into(),
                    line: None,
                    message: e.to_string(),
                })?
            }
            (None, Some(b), Some(d)) => ModelSpec::from_tables("table", b.clone(), d.clone()),
            _ => unreachable!("validated"),
        };
        Ok(spec.with_variability(self.beta()).with_truncation_hint(m.n_max))
    }

    pub fn build_environment(&self) -> Result<Environment, ConfigError> {
        if let Some(j) = &self.environment.jump {
            let k = j.states.len();
            let base = DMatrix::from_fn(k, k, |r, c| j.generator[r][c]);
            let states = j
                .states
                .iter()
                .map(|s| EnvState::new(s.label.clone(), s.coords.clone()))
                .collect();
            let chain = EnvChainSpec::scaled(states, base, self.beta());
            chain.validate(0).map_err(|e| ConfigError {
                field: "environment.jump.generator".into(),
                line: None,
                message: e.to_string(),
            })?;
            return Ok(Environment::Jump { chain, start: j.start });
        }
        let d = self.environment.diffusive.as_ref().expect("validated");
        let spec = d.example.spec().map_err(|e| ConfigError {
            field: "environment.diffusive".into(),
            line: None,
            message: e.to_string(),
        })?;
        let start = d.start.clone().unwrap_or_else(|| d.example.start());
        if start.len() != spec.dim() {
            return Err(ConfigError {
                field: "environment.diffusive.start".into(),
                line: None,
                message: format!("expected {} coordinates", spec.dim()),
            });
        }
        Ok(Environment::Diffusive {
            example: d.example.clone(),
            spec,
            start,
        })
    }
}
