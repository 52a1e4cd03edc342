//! Birth-death rate structures and their cumulative ratios.
//!
//! A model is a pair of rate fields `λ_n(z)`, `μ_n(z)` over the count `n` and
//! an environment point `z` (a coordinate slice), plus a variability sequence
//! `β_n` that tempers how fast the environment moves at level `n`.
//!
//! The cumulative ratio `r_n(z) = ∏_{k=1}^n λ_{k-1}(z)/μ_k(z)` is kept in log
//! space; queueing models with abandonment or linear growth leave the range of
//! `f64` within a few hundred levels.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Ratio level below which a tail is treated as geometric and summable.
pub const SUMMABILITY_MARGIN: f64 = 1e-3;

pub const DEFAULT_TRUNCATION: usize = 512;

pub type RateFn = Arc<dyn Fn(usize, &[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown model {0:?}")]
    UnknownModel(String),
    #[error("model {model} is missing parameter {param:?}")]
    MissingParam { model: String, param: String },
    #[error("parameter {param:?} must be {expected}")]
    BadParam { param: String, expected: String },
    #[error("death rate vanishes at n = {n}")]
    ZeroDeathRate { n: usize },
    #[error("{which} rate at n = {n} is not a finite nonnegative number: {value}")]
    InvalidRate {
        which: &'static str,
        n: usize,
        value: f64,
    },
    #[error("running product leaves the f64 range at n = {n}")]
    Overflow { n: usize },
    #[error("ratio λ_(n-1)/μ_n = {ratio} has not dropped below 1 - {margin} by n = {n_max}")]
    Divergence { n_max: usize, ratio: f64, margin: f64 },
    #[error("tail ratios in [{min_ratio}, {max_ratio}] neither settle below nor above 1")]
    Inconclusive { min_ratio: f64, max_ratio: f64 },
    #[error("estimated tail mass {tail} beyond n = {n_max} exceeds tolerance {tol}")]
    TruncationTooShort { n_max: usize, tail: f64, tol: f64 },
}

/// The variability coefficients `β_n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variability {
    Constant(f64),
    /// `β_n = a^n`.
    Geometric(f64),
    /// Explicit values; the last entry repeats beyond the table.
    Table(Vec<f64>),
}

impl Variability {
    pub fn beta(&self, n: usize) -> f64 {
        match self {
            Variability::Constant(c) => *c,
            Variability::Geometric(a) => a.powi(n.min(i32::MAX as usize) as i32),
            Variability::Table(t) => match t.get(n) {
                Some(b) => *b,
                None => t.last().copied().unwrap_or(1.0),
            },
        }
    }
}

impl Default for Variability {
    fn default() -> Self {
        Variability::Constant(1.0)
    }
}

/// A rate parameter: either a constant or an affine function of one
/// environment coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RateParam {
    Const(f64),
    Coord {
        coord: usize,
        #[serde(default = "one")]
        scale: f64,
        #[serde(default)]
        offset: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl RateParam {
    pub fn coord(coord: usize) -> Self {
        RateParam::Coord {
            coord,
            scale: 1.0,
            offset: 0.0,
        }
    }

    /// Value at `z`; NaN when the coordinate does not exist.
    pub fn eval(&self, z: &[f64]) -> f64 {
        match *self {
            RateParam::Const(c) => c,
            RateParam::Coord {
                coord,
                scale,
                offset,
            } => z.get(coord).map_or(f64::NAN, |x| scale * x + offset),
        }
    }
}

impl From<f64> for RateParam {
    fn from(c: f64) -> Self {
        RateParam::Const(c)
    }
}

pub type ParamMap = BTreeMap<String, RateParam>;

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    birth: RateFn,
    death: RateFn,
    pub variability: Variability,
    pub truncation_hint: usize,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("variability", &self.variability)
            .field("truncation_hint", &self.truncation_hint)
            .finish_non_exhaustive()
    }
}

impl ModelSpec {
    pub fn new(
        name: impl Into<String>,
        birth: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static,
        death: impl Fn(usize, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            birth: Arc::new(birth),
            death: Arc::new(death),
            variability: Variability::default(),
            truncation_hint: DEFAULT_TRUNCATION,
        }
    }

    /// Environment-free model from explicit rate tables. `deaths[0]` is
    /// ignored; both tables repeat their last entry beyond their length.
    pub fn from_tables(name: impl Into<String>, births: Vec<f64>, deaths: Vec<f64>) -> Self {
        let lookup = |t: &[f64], n: usize| t.get(n).or(t.last()).copied().unwrap_or(0.0);
        Self::new(
            name,
            move |n, _| lookup(&births, n),
            move |n, _| lookup(&deaths, n),
        )
    }

    pub fn with_variability(mut self, variability: Variability) -> Self {
        self.variability = variability;
        self
    }

    pub fn with_truncation_hint(mut self, n_max: usize) -> Self {
        self.truncation_hint = n_max;
        self
    }

    pub fn birth_rate(&self, n: usize, z: &[f64]) -> f64 {
        (self.birth)(n, z)
    }

    /// `μ_n(z)`; the value at `n = 0` is never used.
    pub fn death_rate(&self, n: usize, z: &[f64]) -> f64 {
        if n == 0 {
            0.0
        } else {
            (self.death)(n, z)
        }
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.variability.beta(n)
    }

    fn checked_birth(&self, n: usize, z: &[f64]) -> Result<f64, ModelError> {
        let value = self.birth_rate(n, z);
        if value.is_finite() && value >= 0.0 {
            Ok(value)
        } else {
            Err(ModelError::InvalidRate {
                which: "birth",
                n,
                value,
            })
        }
    }

    fn checked_death(&self, n: usize, z: &[f64]) -> Result<f64, ModelError> {
        let value = self.death_rate(n, z);
        if value == 0.0 {
            Err(ModelError::ZeroDeathRate { n })
        } else if value.is_finite() && value > 0.0 {
            Ok(value)
        } else {
            Err(ModelError::InvalidRate {
                which: "death",
                n,
                value,
            })
        }
    }
}

/// `r_0(z), …, r_M(z)` at a fixed environment point, stored as logarithms.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulativeRatio {
    log_values: Vec<f64>,
    pub z: Vec<f64>,
}

impl CumulativeRatio {
    pub fn truncated_at(&self) -> usize {
        self.log_values.len() - 1
    }

    /// `ln r_n`, `-inf` once a birth rate has vanished.
    pub fn log_value(&self, n: usize) -> f64 {
        self.log_values[n]
    }

    pub fn log_values(&self) -> &[f64] {
        &self.log_values
    }

    pub fn value(&self, n: usize) -> f64 {
        self.log_values[n].exp()
    }

    pub fn values(&self) -> Vec<f64> {
        self.log_values.iter().map(|l| l.exp()).collect()
    }

    /// Ratio `r_n / r_{n-1} = λ_{n-1}/μ_n`, zero past a vanished birth rate.
    pub fn step_ratio(&self, n: usize) -> f64 {
        let (a, b) = (self.log_values[n], self.log_values[n - 1]);
        if b == f64::NEG_INFINITY {
            0.0
        } else {
            (a - b).exp()
        }
    }

    /// First level with `r_n = 0`, if any.
    pub fn support_end(&self) -> Option<usize> {
        self.log_values.iter().position(|l| *l == f64::NEG_INFINITY)
    }
}

/// Computes `ln r_n(z)` for `n = 0..=n_max` by a running sum of log ratios.
pub fn cumulative_ratio(
    model: &ModelSpec,
    z: &[f64],
    n_max: usize,
) -> Result<CumulativeRatio, ModelError> {
    let mut log_values = Vec::with_capacity(n_max + 1);
    log_values.push(0.0);
    let mut acc = 0.0f64;
    for k in 1..=n_max {
        let mu = model.checked_death(k, z)?;
        let lambda = model.checked_birth(k - 1, z)?;
        acc += lambda.ln() - mu.ln();
        log_values.push(acc);
    }
    Ok(CumulativeRatio {
        log_values,
        z: z.to_vec(),
    })
}

/// The same ratios as a plain running product, for cross-checking.
pub fn cumulative_ratio_direct(
    model: &ModelSpec,
    z: &[f64],
    n_max: usize,
) -> Result<Vec<f64>, ModelError> {
    let mut values = Vec::with_capacity(n_max + 1);
    values.push(1.0);
    let mut acc = 1.0f64;
    for k in 1..=n_max {
        let mu = model.checked_death(k, z)?;
        let lambda = model.checked_birth(k - 1, z)?;
        acc *= lambda / mu;
        if !acc.is_finite() || (acc == 0.0 && lambda != 0.0) {
            return Err(ModelError::Overflow { n: k });
        }
        values.push(acc);
    }
    Ok(values)
}

/// `κ_n = κ_0 r_n` with `κ_0 = (Σ_{n ≤ M} r_n + tail)^{-1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedWeights {
    pub kappa: Vec<f64>,
    /// Estimated probability mass beyond the truncation level.
    pub tail_bound: f64,
}

/// Geometric tail estimate: the largest of the last few step ratios.
fn tail_ratio(ratio: &CumulativeRatio) -> f64 {
    let m = ratio.truncated_at();
    let lo = m.saturating_sub(8).max(1);
    (lo..=m).map(|n| ratio.step_ratio(n)).fold(0.0, f64::max)
}

/// Log-sum-exp over the stored ratios: returns `(max, Σ e^{l - max})`.
fn log_sum(log_values: &[f64]) -> (f64, f64) {
    let m = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s = log_values.iter().map(|l| (l - m).exp()).sum();
    (m, s)
}

pub fn normalized_weights(
    model: &ModelSpec,
    z: &[f64],
    n_max: usize,
    tol: f64,
) -> Result<NormalizedWeights, ModelError> {
    let ratio = cumulative_ratio(model, z, n_max)?;
    let (m, s) = log_sum(ratio.log_values());
    let tail_scaled = if ratio.support_end().is_some() || n_max == 0 {
        if n_max == 0 && model.checked_birth(0, z)? > 0.0 {
            return Err(ModelError::TruncationTooShort {
                n_max,
                tail: f64::INFINITY,
                tol,
            });
        }
        0.0
    } else {
        let rho = tail_ratio(&ratio);
        if rho >= 1.0 - SUMMABILITY_MARGIN {
            return Err(ModelError::Divergence {
                n_max,
                ratio: rho,
                margin: SUMMABILITY_MARGIN,
            });
        }
        (ratio.log_value(n_max) - m).exp() * rho / (1.0 - rho)
    };
    let total = s + tail_scaled;
    let tail_bound = tail_scaled / total;
    if tail_bound > tol {
        return Err(ModelError::TruncationTooShort {
            n_max,
            tail: tail_bound,
            tol,
        });
    }
    let kappa = ratio
        .log_values()
        .iter()
        .map(|l| (l - m).exp() / total)
        .collect();
    Ok(NormalizedWeights { kappa, tail_bound })
}

/// `ln Σ_n r_n(z)`, summed level by level from `n = 0` with a geometric tail
/// estimate (the largest of the last eight step ratios) checked from level
/// `max(n_start, 16)` on. Stops once the tail is below `1e-15` of the sum.
pub fn log_ratio_total(model: &ModelSpec, z: &[f64], n_start: usize) -> Result<f64, ModelError> {
    const WINDOW: usize = 8;
    let first_check = n_start.max(16);
    let mut recent = [0.0f64; WINDOW];
    // Σ and the current term, both divided by e^{log_scale}.
    let (mut log_scale, mut sum, mut term) = (0.0f64, 1.0f64, 1.0f64);
    let mut rho = 0.0;
    for n in 1..=MAX_TRUNCATION {
        let lambda = model.checked_birth(n - 1, z)?;
        if lambda == 0.0 {
            return Ok(log_scale + sum.ln());
        }
        let ratio = lambda / model.checked_death(n, z)?;
        term *= ratio;
        sum += term;
        recent[n % WINDOW] = ratio;
        if !sum.is_finite() || sum > 1e250 {
            if !sum.is_finite() {
                return Err(ModelError::Overflow { n });
            }
            log_scale += sum.ln();
            term /= sum;
            sum = 1.0;
        }
        if n >= first_check {
            rho = recent.iter().copied().fold(0.0, f64::max);
            if rho < 1.0 - SUMMABILITY_MARGIN && term * rho / (1.0 - rho) <= 1e-15 * sum {
                return Ok(log_scale + sum.ln());
            }
        }
    }
    if rho >= 1.0 - SUMMABILITY_MARGIN {
        Err(ModelError::Divergence {
            n_max: MAX_TRUNCATION,
            ratio: rho,
            margin: SUMMABILITY_MARGIN,
        })
    } else {
        Err(ModelError::TruncationTooShort {
            n_max: MAX_TRUNCATION,
            tail: term * rho / (1.0 - rho) / sum,
            tol: 1e-15,
        })
    }
}

/// Largest truncation [`log_ratio_total`] will try.
pub const MAX_TRUNCATION: usize = 1 << 16;

/// Outcome of the numerical summability test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summability {
    pub summable: bool,
    /// Geometric bound on `Σ_{n > M} r_n` relative to the partial sum;
    /// infinite when not summable.
    pub residual: f64,
}

/// Tail-ratio test on the last quarter of `1..=n_max`.
pub fn check_summability(
    model: &ModelSpec,
    z: &[f64],
    n_max: usize,
) -> Result<Summability, ModelError> {
    let ratio = cumulative_ratio(model, z, n_max.max(1))?;
    let n_max = ratio.truncated_at();
    if ratio.support_end().is_some() {
        return Ok(Summability {
            summable: true,
            residual: 0.0,
        });
    }
    let start = (n_max - n_max / 4).max(1);
    let window: Vec<f64> = (start..=n_max).map(|n| ratio.step_ratio(n)).collect();
    let max_ratio = window.iter().copied().fold(0.0, f64::max);
    let min_ratio = window.iter().copied().fold(f64::INFINITY, f64::min);
    if max_ratio < 1.0 - SUMMABILITY_MARGIN {
        let (m, s) = log_sum(ratio.log_values());
        let residual = (ratio.log_value(n_max) - m).exp() * max_ratio / (1.0 - max_ratio) / s;
        Ok(Summability {
            summable: true,
            residual,
        })
    } else if min_ratio >= 1.0 {
        Ok(Summability {
            summable: false,
            residual: f64::INFINITY,
        })
    } else {
        Err(ModelError::Inconclusive {
            min_ratio,
            max_ratio,
        })
    }
}

fn param(model: &str, params: &ParamMap, key: &str) -> Result<RateParam, ModelError> {
    params.get(key).copied().ok_or_else(|| ModelError::MissingParam {
        model: model.to_string(),
        param: key.to_string(),
    })
}

fn server_count(model: &str, params: &ParamMap) -> Result<usize, ModelError> {
    match param(model, params, "k")? {
        RateParam::Const(k) if k >= 1.0 && k.fract() == 0.0 => Ok(k as usize),
        _ => Err(ModelError::BadParam {
            param: "k".into(),
            expected: "a positive integer constant".into(),
        }),
    }
}

/// Names accepted by [`catalog`].
pub const CATALOG: &[&str] = &[
    "mm1",
    "mminf",
    "mmk",
    "mmk0",
    "mmk_plus_m",
    "linear_growth",
    "growth_stock",
    "sqrt_service",
];

/// Builds one of the standard models.
///
/// | name | `λ_n(z)` | `μ_n(z)` | params |
/// |---|---|---|---|
/// | `mm1` | `λ` | `μ` | `lambda`, `mu` |
/// | `mminf` | `λ` | `nμ` | `lambda`, `mu` |
/// | `mmk` | `λ` | `μ min(n,K)` | `lambda`, `mu`, `k` |
/// | `mmk0` | `λ 1{n<K}` | `nμ` | `lambda`, `mu`, `k` |
/// | `mmk_plus_m` | `λ` | `μ min(n,K) + γ(n−K)⁺` | `lambda`, `mu`, `k`, `gamma` |
/// | `linear_growth` | `nλ + θ` | `nμ` | `lambda`, `theta`, `mu` |
/// | `growth_stock` | `nλ + θ` | `nμ + ϑ` | `lambda`, `theta`, `mu`, `vartheta` |
/// | `sqrt_service` | `λ` | `μ + √n` | `lambda`, `mu` |
///
/// Any parameter except `k` may depend on an environment coordinate.
///
/// ```
/// use bdenv::model::{catalog, cumulative_ratio, ParamMap};
///
/// let params: ParamMap = [("lambda".into(), 1.0.into()), ("mu".into(), 2.0.into())].into();
/// let mm1 = catalog("mm1", &params).unwrap();
/// let r = cumulative_ratio(&mm1, &[], 3).unwrap();
/// assert!((r.value(3) - 0.125).abs() < 1e-15);
/// ```
pub fn catalog(name: &str, params: &ParamMap) -> Result<ModelSpec, ModelError> {
    let p = |key: &str| param(name, params, key);
    let spec = match name {
        "mm1" => {
            let (l, m) = (p("lambda")?, p("mu")?);
            ModelSpec::new(name, move |_, z| l.eval(z), move |_, z| m.eval(z))
        }
        "mminf" => {
            let (l, m) = (p("lambda")?, p("mu")?);
            ModelSpec::new(name, move |_, z| l.eval(z), move |n, z| n as f64 * m.eval(z))
        }
        "mmk" => {
            let (l, m, k) = (p("lambda")?, p("mu")?, server_count(name, params)?);
            ModelSpec::new(
                name,
                move |_, z| l.eval(z),
                move |n, z| n.min(k) as f64 * m.eval(z),
            )
        }
        "mmk0" => {
            let (l, m, k) = (p("lambda")?, p("mu")?, server_count(name, params)?);
            ModelSpec::new(
                name,
                move |n, z| if n < k { l.eval(z) } else { 0.0 },
                move |n, z| n as f64 * m.eval(z),
            )
        }
        "mmk_plus_m" => {
            let (l, m, g) = (p("lambda")?, p("mu")?, p("gamma")?);
            let k = server_count(name, params)?;
            ModelSpec::new(
                name,
                move |_, z| l.eval(z),
                move |n, z| n.min(k) as f64 * m.eval(z) + n.saturating_sub(k) as f64 * g.eval(z),
            )
        }
        "linear_growth" => {
            let (l, t, m) = (p("lambda")?, p("theta")?, p("mu")?);
            ModelSpec::new(
                name,
                move |n, z| n as f64 * l.eval(z) + t.eval(z),
                move |n, z| n as f64 * m.eval(z),
            )
        }
        "growth_stock" => {
            let (l, t, m, v) = (p("lambda")?, p("theta")?, p("mu")?, p("vartheta")?);
            ModelSpec::new(
                name,
                move |n, z| n as f64 * l.eval(z) + t.eval(z),
                move |n, z| n as f64 * m.eval(z) + v.eval(z),
            )
        }
        "sqrt_service" => {
            let (l, m) = (p("lambda")?, p("mu")?);
            ModelSpec::new(
                name,
                move |_, z| l.eval(z),
                move |n, z| m.eval(z) + (n as f64).sqrt(),
            )
        }
        _ => return Err(ModelError::UnknownModel(name.to_string())),
    };
    Ok(spec)
}
