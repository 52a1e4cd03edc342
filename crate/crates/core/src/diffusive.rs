//! Reflected (jump-)diffusion environments and their stationary laws.
//!
//! At level `n` the environment runs at speed `β_n / r_n(z)`: the joint
//! simulator hands [`Stepper::step`] a time step and that speed, and the
//! stepper advances the diffusion by `dt · speed` units of its own clock.
//!
//! Reflection schemes:
//!
//! * half-lines and intervals fold the overshoot back into the domain, which
//!   is exact in law for Brownian increments;
//! * the orthant with normal reflection folds each coordinate;
//! * the orthant with an oblique reflection matrix `R` solves the discrete
//!   Skorokhod problem `w = x + R y ≥ s`, `y ≥ 0`, `yᵀ(w − s) = 0` by projected
//!   Gauss–Seidel.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};
use libm::erf;
use statrs::function::erf::erf_inv;
use thiserror::Error;

use crate::model::{cumulative_ratio, log_ratio_total, ModelError, ModelSpec};
use crate::quadrature::{integrate, integrate_vec, QuadConfig, QuadError};
use crate::rng::stream_rng;

const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusiveError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("invalid diffusion: {0}")]
    InvalidSpec(String),
    #[error("environment speed {speed:e} exceeds the cap {cap:e}")]
    SpeedCap { speed: f64, cap: f64 },
    #[error("oblique reflection did not converge in {iterations} sweeps (residual {residual:e})")]
    StepRejected { iterations: usize, residual: f64 },
    #[error("skew-symmetry 2Σ = RD + DRᵀ fails with residual {residual:e}")]
    SkewSymmetryFailed { residual: f64 },
    #[error("not positive recurrent: {0}")]
    NotRecurrent(String),
    #[error("effective drift is not negative: c = {c} but jump intensity × mean jump = {jump_drift}")]
    NegativeEffectiveDrift { c: f64, jump_drift: f64 },
    #[error("Ξ diverges: {0}")]
    XiDivergent(String),
    #[error("the law has no density evaluator")]
    NoDensity,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone)]
pub enum DomainKind {
    HalfLine { lower: f64 },
    Interval { lo: f64, hi: f64 },
    /// `{z : z_i ≥ shifts_i}`.
    Orthant { shifts: Vec<f64> },
    /// `[lower(n), ∞)`, varying with the birth-death level.
    VariableHalfLine(Arc<dyn Fn(usize) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for DomainKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DomainKind::HalfLine { lower } => write!(f, "HalfLine({lower})"),
            DomainKind::Interval { lo, hi } => write!(f, "Interval({lo}, {hi})"),
            DomainKind::Orthant { shifts } => write!(f, "Orthant({shifts:?})"),
            DomainKind::VariableHalfLine(_) => write!(f, "VariableHalfLine"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reflection {
    Normal,
    Oblique(DMatrix<f64>),
}

const LCP_SWEEPS: usize = 100;
const LCP_TOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct DomainSpec {
    pub kind: DomainKind,
    pub reflection: Reflection,
}

impl DomainSpec {
    pub fn half_line(lower: f64) -> Self {
        Self {
            kind: DomainKind::HalfLine { lower },
            reflection: Reflection::Normal,
        }
    }

    pub fn interval(lo: f64, hi: f64) -> Self {
        Self {
            kind: DomainKind::Interval { lo, hi },
            reflection: Reflection::Normal,
        }
    }

    pub fn orthant(shifts: Vec<f64>, reflection: Reflection) -> Self {
        Self {
            kind: DomainKind::Orthant { shifts },
            reflection,
        }
    }

    pub fn variable_half_line(lower: impl Fn(usize) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            kind: DomainKind::VariableHalfLine(Arc::new(lower)),
            reflection: Reflection::Normal,
        }
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            DomainKind::Orthant { shifts } => shifts.len(),
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<(), DiffusiveError> {
        let bad = |s: String| Err(DiffusiveError::InvalidDomain(s));
        match &self.kind {
            DomainKind::HalfLine { lower } if !lower.is_finite() => return bad(format!("lower = {lower}")),
            DomainKind::Interval { lo, hi } if !(lo < hi) || !lo.is_finite() || !hi.is_finite() => {
                return bad(format!("interval [{lo}, {hi}]"))
            }
            DomainKind::Orthant { shifts } if shifts.is_empty() || shifts.iter().any(|s| !s.is_finite()) => {
                return bad(format!("shifts {shifts:?}"))
            }
            _ => {}
        }
        if let Reflection::Oblique(r) = &self.reflection {
            let d = self.dim();
            if r.nrows() != d || r.ncols() != d {
                return bad(format!("reflection matrix is {}x{}, domain has dimension {d}", r.nrows(), r.ncols()));
            }
            if r.clone().try_inverse().is_none() {
                return bad("reflection matrix is singular".into());
            }
            if (0..d).any(|i| r[(i, i)] <= 0.0) {
                return bad("reflection matrix needs a positive diagonal".into());
            }
        }
        Ok(())
    }

    /// Lower boundary of coordinate `i` at level `n`.
    pub fn lower(&self, i: usize, n: usize) -> f64 {
        match &self.kind {
            DomainKind::HalfLine { lower } => *lower,
            DomainKind::Interval { lo, .. } => *lo,
            DomainKind::Orthant { shifts } => shifts[i],
            DomainKind::VariableHalfLine(f) => f(n),
        }
    }

    pub fn contains(&self, z: &[f64], n: usize) -> bool {
        match &self.kind {
            DomainKind::Interval { lo, hi } => z[0] >= *lo && z[0] <= *hi,
            _ => (0..self.dim()).all(|i| z[i] >= self.lower(i, n)),
        }
    }

    /// Closest point of the level-`n` domain (coordinatewise clamp).
    pub fn project(&self, z: &mut [f64], n: usize) {
        match &self.kind {
            DomainKind::Interval { lo, hi } => z[0] = z[0].clamp(*lo, *hi),
            _ => {
                for (i, zi) in z.iter_mut().enumerate().take(self.dim()) {
                    *zi = zi.max(self.lower(i, n));
                }
            }
        }
    }

    /// Maps a post-increment point back into the domain.
    pub fn reflect(&self, z: &mut [f64], n: usize, y: &mut [f64]) -> Result<(), DiffusiveError> {
        match (&self.kind, &self.reflection) {
            (DomainKind::Interval { lo, hi }, _) => {
                for _ in 0..64 {
                    if z[0] < *lo {
                        z[0] = 2.0 * lo - z[0];
                    } else if z[0] > *hi {
                        z[0] = 2.0 * hi - z[0];
                    } else {
                        break;
                    }
                }
                z[0] = z[0].clamp(*lo, *hi);
            }
            (DomainKind::Orthant { shifts }, Reflection::Oblique(r)) => {
                oblique_projection(z, shifts, r, y)?;
            }
            _ => {
                for i in 0..self.dim() {
                    let lo = self.lower(i, n);
                    if z[i] < lo {
                        z[i] = 2.0 * lo - z[i];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Discrete Skorokhod map for the orthant `z ≥ s` with reflection matrix `R`.
fn oblique_projection(x: &mut [f64], s: &[f64], r: &DMatrix<f64>, y: &mut [f64]) -> Result<(), DiffusiveError> {
    let d = s.len();
    if (0..d).all(|i| x[i] >= s[i]) {
        return Ok(());
    }
    y.iter_mut().for_each(|v| *v = 0.0);
    let mut residual = f64::INFINITY;
    for _ in 0..LCP_SWEEPS {
        let mut change: f64 = 0.0;
        for i in 0..d {
            let mut push = s[i] - x[i];
            for j in 0..d {
                if j != i {
                    push -= r[(i, j)] * y[j];
                }
            }
            let next = (push / r[(i, i)]).max(0.0);
            change = change.max((next - y[i]).abs());
            y[i] = next;
        }
        residual = change;
        if change <= LCP_TOL * (1.0 + y.iter().fold(0.0f64, |a, b| a.max(*b))) {
            for i in 0..d {
                let w: f64 = x[i] + (0..d).map(|j| r[(i, j)] * y[j]).sum::<f64>();
                x[i] = w.max(s[i]);
            }
            return Ok(());
        }
    }
    Err(DiffusiveError::StepRejected {
        iterations: LCP_SWEEPS,
        residual,
    })
}

/// `max |2Σ − RD − DRᵀ|` with `D = diag(Σ)`; passes below 1e-12.
pub fn skew_symmetry_check(r: &DMatrix<f64>, sigma: &DMatrix<f64>) -> (bool, f64) {
    let d = DMatrix::from_diagonal(&sigma.diagonal());
    let residual = (sigma * 2.0 - r * &d - &d * r.transpose()).amax();
    (residual < 1e-12, residual)
}

/// Jump-size laws for one-dimensional upward jumps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum JumpLaw {
    Exponential { mean: f64 },
    Fixed { size: f64 },
}

impl JumpLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            JumpLaw::Exponential { mean } => mean * Exp::new(1.0).unwrap().sample(rng),
            JumpLaw::Fixed { size } => size,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            JumpLaw::Exponential { mean } => mean,
            JumpLaw::Fixed { size } => size,
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            JumpLaw::Exponential { mean } => 2.0 * mean * mean,
            JumpLaw::Fixed { size } => size * size,
        }
    }

    /// `Ψ_K(u)`, `None` where it is infinite.
    pub fn mgf(&self, u: f64) -> Option<f64> {
        match *self {
            JumpLaw::Exponential { mean } => (u * mean < 1.0).then(|| 1.0 / (1.0 - u * mean)),
            JumpLaw::Fixed { size } => Some((u * size).exp()),
        }
    }

    /// Supremum of the region where `Ψ_K` is finite.
    pub fn mgf_limit(&self) -> f64 {
        match *self {
            JumpLaw::Exponential { mean } => 1.0 / mean,
            JumpLaw::Fixed { .. } => f64::INFINITY,
        }
    }
}

#[derive(Clone)]
pub enum Drift {
    Constant(Vec<f64>),
    /// `−rate (z − center)`.
    MeanReverting { rate: f64, center: Vec<f64> },
    Custom(Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>),
}

impl std::fmt::Debug for Drift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Drift::Constant(b) => write!(f, "Constant({b:?})"),
            Drift::MeanReverting { rate, center } => write!(f, "MeanReverting({rate}, {center:?})"),
            Drift::Custom(_) => write!(f, "Custom"),
        }
    }
}

impl Drift {
    pub fn eval(&self, z: &[f64], out: &mut [f64]) {
        match self {
            Drift::Constant(b) => out.copy_from_slice(b),
            Drift::MeanReverting { rate, center } => {
                for i in 0..out.len() {
                    out[i] = -rate * (z[i] - center[i]);
                }
            }
            Drift::Custom(f) => f(z, out),
        }
    }
}

/// A reflected jump diffusion with constant diffusion matrix `σ`.
#[derive(Debug, Clone)]
pub struct DiffusionSpec {
    pub drift: Drift,
    pub sigma: DMatrix<f64>,
    pub jump_intensity: f64,
    /// Jumps act on coordinate 0.
    pub jump_law: Option<JumpLaw>,
    pub domain: DomainSpec,
}

impl DiffusionSpec {
    pub fn new(drift: Drift, sigma: DMatrix<f64>, domain: DomainSpec) -> Self {
        Self {
            drift,
            sigma,
            jump_intensity: 0.0,
            jump_law: None,
            domain,
        }
    }

    pub fn with_jumps(mut self, intensity: f64, law: JumpLaw) -> Self {
        self.jump_intensity = intensity;
        self.jump_law = Some(law);
        self
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn validate(&self) -> Result<(), DiffusiveError> {
        self.domain.validate()?;
        let d = self.dim();
        if self.sigma.nrows() != d || self.sigma.ncols() != d {
            return Err(DiffusiveError::InvalidSpec(format!(
                "σ is {}x{}, domain has dimension {d}",
                self.sigma.nrows(),
                self.sigma.ncols()
            )));
        }
        let drift_dim_ok = match &self.drift {
            Drift::Constant(b) => b.len() == d,
            Drift::MeanReverting { center, .. } => center.len() == d,
            Drift::Custom(_) => true,
        };
        if !drift_dim_ok {
            return Err(DiffusiveError::InvalidSpec("drift dimension mismatch".into()));
        }
        if !(self.jump_intensity >= 0.0) || (self.jump_intensity > 0.0 && self.jump_law.is_none()) {
            return Err(DiffusiveError::InvalidSpec("jump intensity needs a jump law".into()));
        }
        Ok(())
    }

    /// True when the process cannot move at all (zero drift, noise and jumps).
    pub fn is_static(&self) -> bool {
        let still_drift = match &self.drift {
            Drift::Constant(b) => b.iter().all(|x| *x == 0.0),
            Drift::MeanReverting { rate, .. } => *rate == 0.0,
            Drift::Custom(_) => false,
        };
        still_drift && self.sigma.iter().all(|x| *x == 0.0) && self.jump_intensity == 0.0
    }

    /// Whether `σσᵀ` is positive definite (the matrix is constant, so one
    /// check covers the whole domain).
    pub fn is_nondegenerate(&self) -> bool {
        (&self.sigma * self.sigma.transpose()).cholesky().is_some()
    }
}

/// Reusable scratch space for stepping one diffusion.
pub struct Stepper<'a> {
    spec: &'a DiffusionSpec,
    pub speed_cap: f64,
    drift: Vec<f64>,
    noise: Vec<f64>,
    y: Vec<f64>,
}

impl<'a> Stepper<'a> {
    pub fn new(spec: &'a DiffusionSpec, speed_cap: f64) -> Self {
        let d = spec.dim();
        Self {
            spec,
            speed_cap,
            drift: vec![0.0; d],
            noise: vec![0.0; d],
            y: vec![0.0; d],
        }
    }

    /// One Euler–Maruyama step of environment time `dt · speed` at level `n`,
    /// followed by at most one jump and then reflection.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        z: &mut [f64],
        dt: f64,
        n: usize,
        speed: f64,
        rng: &mut R,
    ) -> Result<(), DiffusiveError> {
        if !speed.is_finite() || !(speed <= self.speed_cap) {
            return Err(DiffusiveError::SpeedCap {
                speed,
                cap: self.speed_cap,
            });
        }
        let h = dt * speed;
        let spec = self.spec;
        let d = z.len();
        spec.drift.eval(z, &mut self.drift);
        let root_h = h.sqrt();
        for e in self.noise.iter_mut() {
            *e = rng.sample(StandardNormal);
        }
        for i in 0..d {
            let mut dz = self.drift[i] * h;
            for j in 0..d {
                dz += spec.sigma[(i, j)] * root_h * self.noise[j];
            }
            z[i] += dz;
        }
        if spec.jump_intensity > 0.0 && rng.random::<f64>() < spec.jump_intensity * h {
            if let Some(law) = &spec.jump_law {
                z[0] += law.sample(rng);
            }
        }
        spec.domain.reflect(z, n, &mut self.y)
    }
}

/// Single-step convenience wrapper around [`Stepper`].
pub fn step_reflected<R: Rng + ?Sized>(
    spec: &DiffusionSpec,
    z: &[f64],
    dt: f64,
    n: usize,
    speed: f64,
    speed_cap: f64,
    rng: &mut R,
) -> Result<Vec<f64>, DiffusiveError> {
    let mut out = z.to_vec();
    Stepper::new(spec, speed_cap).step(&mut out, dt, n, speed, rng)?;
    Ok(out)
}

/// Environment samples on a fixed level, flattened with stride `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvSamples {
    pub dim: usize,
    pub dt: f64,
    pub values: Vec<f64>,
}

impl EnvSamples {
    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn coord(&self, i: usize) -> Vec<f64> {
        self.values.iter().skip(i).step_by(self.dim).copied().collect()
    }

    /// CSV with columns `time, z0, z1, …`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["time".to_string()];
        header.extend((0..self.dim).map(|i| format!("z{i}")));
        w.write_record(&header)?;
        for (k, row) in self.values.chunks(self.dim).enumerate() {
            let mut rec = vec![(k as f64 * self.dt).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs the environment alone at unit speed and level `n`, keeping every
/// `thin`-th point after `burn_in`.
pub fn simulate_env(
    spec: &DiffusionSpec,
    z0: &[f64],
    dt: f64,
    horizon: f64,
    burn_in: f64,
    thin: usize,
    seed: u64,
) -> Result<EnvSamples, DiffusiveError> {
    spec.validate()?;
    let mut rng = stream_rng(seed, 0);
    let mut stepper = Stepper::new(spec, f64::INFINITY);
    let mut z = z0.to_vec();
    let steps = (horizon / dt).round() as u64;
    let skip = (burn_in / dt).round() as u64;
    let thin = thin.max(1) as u64;
    let mut values = Vec::with_capacity(((steps - skip.min(steps)) / thin) as usize * z.len());
    for k in 1..=steps {
        stepper.step(&mut z, dt, 0, 1.0, &mut rng)?;
        if k > skip && (k - skip) % thin == 0 {
            values.extend_from_slice(&z);
        }
    }
    Ok(EnvSamples {
        dim: z.len(),
        dt: dt * thin as f64,
        values,
    })
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

/// `erf⁻¹` polished by Newton steps against `libm::erf`.
fn inv_erf(y: f64) -> f64 {
    let mut x = erf_inv(y);
    for _ in 0..2 {
        if !x.is_finite() {
            break;
        }
        let slope = 2.0 / std::f64::consts::PI.sqrt() * (-x * x).exp();
        if slope == 0.0 {
            break;
        }
        x -= (erf(x) - y) / slope;
    }
    x
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Closed-form (or implicitly defined) stationary laws of the environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum StationaryLaw {
    /// Density `rate · e^{−rate (z − shift)}` on `z > shift`.
    Exponential { rate: f64, shift: f64 },
    ProductExponential { rates: Vec<f64>, shifts: Vec<f64> },
    /// Half-normal: density `∝ e^{−(z − shift)²/(2 var)}` on `z > shift`.
    OneSidedGaussian { shift: f64, var: f64 },
    TruncatedGaussian { mean: f64, var: f64, lo: f64, hi: f64 },
    /// Defined through its MGF `Ψ(u) = M u / F(u)`,
    /// `F(u) = c u − σ²u²/2 − κ Ψ_K(u) + κ`, finite for `u < u0`.
    MgfImplicit {
        c: f64,
        sigma: f64,
        intensity: f64,
        jump: JumpLaw,
        u0: f64,
        m: f64,
    },
    PointMass { at: Vec<f64> },
}

impl StationaryLaw {
    pub fn dim(&self) -> usize {
        match self {
            StationaryLaw::ProductExponential { rates, .. } => rates.len(),
            StationaryLaw::PointMass { at } => at.len(),
            _ => 1,
        }
    }

    /// Natural length scale of each coordinate (used to size quadrature panels
    /// and bins).
    pub fn scale(&self, i: usize) -> f64 {
        match self {
            StationaryLaw::Exponential { rate, .. } => 1.0 / rate,
            StationaryLaw::ProductExponential { rates, .. } => 1.0 / rates[i],
            StationaryLaw::OneSidedGaussian { var, .. } => var.sqrt(),
            StationaryLaw::TruncatedGaussian { var, lo, hi, .. } => var.sqrt().min(hi - lo),
            StationaryLaw::MgfImplicit { .. } => {
                let m = self.mean()[0];
                m.max(1e-12)
            }
            StationaryLaw::PointMass { .. } => 1.0,
        }
    }

    /// Lower end of the support of coordinate `i`.
    pub fn lower(&self, i: usize) -> f64 {
        match self {
            StationaryLaw::Exponential { shift, .. } | StationaryLaw::OneSidedGaussian { shift, .. } => *shift,
            StationaryLaw::ProductExponential { shifts, .. } => shifts[i],
            StationaryLaw::TruncatedGaussian { lo, .. } => *lo,
            StationaryLaw::MgfImplicit { .. } => 0.0,
            StationaryLaw::PointMass { at } => at[i],
        }
    }

    /// Upper end of the support of coordinate `i`, `None` if unbounded.
    pub fn upper(&self, i: usize) -> Option<f64> {
        match self {
            StationaryLaw::TruncatedGaussian { hi, .. } => Some(*hi),
            StationaryLaw::PointMass { at } => Some(at[i]),
            _ => None,
        }
    }

    /// Normalized density; `None` for laws without one.
    pub fn density(&self, z: &[f64]) -> Option<f64> {
        let x = z[0];
        Some(match self {
            StationaryLaw::Exponential { rate, shift } => {
                if x < *shift {
                    0.0
                } else {
                    rate * (-rate * (x - shift)).exp()
                }
            }
            StationaryLaw::ProductExponential { rates, shifts } => rates
                .iter()
                .zip(shifts)
                .zip(z)
                .map(|((a, s), x)| if x < s { 0.0 } else { a * (-a * (x - s)).exp() })
                .product(),
            StationaryLaw::OneSidedGaussian { shift, var } => {
                if x < *shift {
                    0.0
                } else {
                    let sd = var.sqrt();
                    2.0 * normal_pdf((x - shift) / sd) / sd
                }
            }
            StationaryLaw::TruncatedGaussian { mean, var, lo, hi } => {
                if x < *lo || x > *hi {
                    0.0
                } else {
                    let sd = var.sqrt();
                    let mass = normal_cdf((hi - mean) / sd) - normal_cdf((lo - mean) / sd);
                    normal_pdf((x - mean) / sd) / (sd * mass)
                }
            }
            StationaryLaw::MgfImplicit { .. } | StationaryLaw::PointMass { .. } => return None,
        })
    }

    /// Marginal CDF of coordinate `i`.
    pub fn marginal_cdf(&self, i: usize, x: f64) -> Option<f64> {
        Some(match self {
            StationaryLaw::Exponential { rate, shift } => {
                if x <= *shift {
                    0.0
                } else {
                    1.0 - (-rate * (x - shift)).exp()
                }
            }
            StationaryLaw::ProductExponential { rates, shifts } => {
                if x <= shifts[i] {
                    0.0
                } else {
                    1.0 - (-rates[i] * (x - shifts[i])).exp()
                }
            }
            StationaryLaw::OneSidedGaussian { shift, var } => {
                if x <= *shift {
                    0.0
                } else {
                    erf((x - shift) / (2.0 * var).sqrt())
                }
            }
            StationaryLaw::TruncatedGaussian { mean, var, lo, hi } => {
                let sd = var.sqrt();
                let (a, b) = (normal_cdf((lo - mean) / sd), normal_cdf((hi - mean) / sd));
                ((normal_cdf((x.clamp(*lo, *hi) - mean) / sd) - a) / (b - a)).clamp(0.0, 1.0)
            }
            StationaryLaw::PointMass { at } => {
                if x >= at[i] {
                    1.0
                } else {
                    0.0
                }
            }
            StationaryLaw::MgfImplicit { .. } => return None,
        })
    }

    pub fn marginal_quantile(&self, i: usize, p: f64) -> Option<f64> {
        Some(match self {
            StationaryLaw::Exponential { rate, shift } => shift - (1.0 - p).ln() / rate,
            StationaryLaw::ProductExponential { rates, shifts } => shifts[i] - (1.0 - p).ln() / rates[i],
            StationaryLaw::OneSidedGaussian { shift, var } => shift + (2.0 * var).sqrt() * inv_erf(p),
            StationaryLaw::TruncatedGaussian { mean, var, lo, hi } => {
                let sd = var.sqrt();
                let (a, b) = (normal_cdf((lo - mean) / sd), normal_cdf((hi - mean) / sd));
                let q = a + p * (b - a);
                (mean + sd * SQRT_2 * inv_erf(2.0 * q - 1.0)).clamp(*lo, *hi)
            }
            StationaryLaw::PointMass { at } => at[i],
            StationaryLaw::MgfImplicit { .. } => return None,
        })
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            StationaryLaw::Exponential { rate, shift } => vec![shift + 1.0 / rate],
            StationaryLaw::ProductExponential { rates, shifts } => {
                rates.iter().zip(shifts).map(|(a, s)| s + 1.0 / a).collect()
            }
            StationaryLaw::OneSidedGaussian { shift, var } => {
                vec![shift + (2.0 * var / std::f64::consts::PI).sqrt()]
            }
            StationaryLaw::TruncatedGaussian { mean, var, lo, hi } => {
                let sd = var.sqrt();
                let (a, b) = ((lo - mean) / sd, (hi - mean) / sd);
                let mass = normal_cdf(b) - normal_cdf(a);
                vec![mean + sd * (normal_pdf(a) - normal_pdf(b)) / mass]
            }
            StationaryLaw::MgfImplicit {
                sigma,
                intensity,
                jump,
                m,
                ..
            } => vec![(sigma * sigma + intensity * jump.second_moment()) / (2.0 * m)],
            StationaryLaw::PointMass { at } => at.clone(),
        }
    }

    /// Independent draw, `None` for the implicit family.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec<f64>> {
        match self {
            StationaryLaw::MgfImplicit { .. } => None,
            StationaryLaw::PointMass { at } => Some(at.clone()),
            StationaryLaw::OneSidedGaussian { shift, var } => {
                let g: f64 = rng.sample(StandardNormal);
                Some(vec![shift + var.sqrt() * g.abs()])
            }
            _ => Some(
                (0..self.dim())
                    .map(|i| {
                        let u: f64 = rng.random();
                        self.marginal_quantile(i, u).unwrap_or(f64::NAN)
                    })
                    .collect(),
            ),
        }
    }

    /// One-dimensional MGF `E[e^{uZ}]`, `None` where infinite or unknown.
    pub fn mgf(&self, u: f64) -> Option<f64> {
        match self {
            StationaryLaw::Exponential { rate, shift } => (u < *rate).then(|| rate / (rate - u) * (u * shift).exp()),
            StationaryLaw::MgfImplicit { u0, m, .. } => {
                if u == 0.0 {
                    Some(1.0)
                } else if u < *u0 {
                    Some(m * u / jump_rbm_f(self, u)?)
                } else {
                    None
                }
            }
            StationaryLaw::PointMass { at } => Some((u * at[0]).exp()),
            _ => None,
        }
    }
}

/// `F(u) = c u − σ²u²/2 − κ Ψ_K(u) + κ` for an [`StationaryLaw::MgfImplicit`] law.
pub fn jump_rbm_f(law: &StationaryLaw, u: f64) -> Option<f64> {
    match law {
        StationaryLaw::MgfImplicit {
            c,
            sigma,
            intensity,
            jump,
            ..
        } => Some(c * u - 0.5 * sigma * sigma * u * u - intensity * jump.mgf(u)? + intensity),
        _ => None,
    }
}

/// The stationary law of a half-line RBM with drift `−c`, jumps of law `K` at
/// rate `κ`: `M = F'(0) = c − κ K̄`, `u0` the positive root of `F`.
pub fn jump_rbm_law(c: f64, sigma: f64, intensity: f64, jump: JumpLaw) -> Result<StationaryLaw, DiffusiveError> {
    let jump_drift = intensity * jump.mean();
    if c <= jump_drift {
        return Err(DiffusiveError::NegativeEffectiveDrift { c, jump_drift });
    }
    let m = c - jump_drift;
    let mut law = StationaryLaw::MgfImplicit {
        c,
        sigma,
        intensity,
        jump,
        u0: 0.0,
        m,
    };
    let f = |u: f64| jump_rbm_f(&law, u).unwrap_or(f64::NEG_INFINITY);
    let limit = jump.mgf_limit();
    let mut hi = if limit.is_finite() {
        limit * (1.0 - 1e-15)
    } else {
        1.0
    };
    while f(hi) > 0.0 {
        if limit.is_finite() {
            return Err(DiffusiveError::InvalidSpec("F has no sign change below the jump MGF limit".into()));
        }
        hi *= 2.0;
    }
    // F > 0 on (0, u0): start the bracket just above zero.
    let mut lo = 0.0;
    while hi - lo > 1e-12 * hi.max(1.0) {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if let StationaryLaw::MgfImplicit { u0, .. } = &mut law {
        *u0 = 0.5 * (lo + hi);
    }
    Ok(law)
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, DiffusiveError> {
    let d = rows.len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(DiffusiveError::InvalidSpec(format!("{what} must be a nonempty square matrix")));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

/// The environments with closed-form stationary laws. Drifts are written as
/// `−c` so that `c > 0` gives a recurrent process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "example", rename_all = "snake_case")]
pub enum DiffusiveExample {
    /// RBM with drift `−c` on `[lower, ∞)`.
    RbmHalfline {
        c: f64,
        sigma: f64,
        #[serde(default)]
        lower: f64,
    },
    /// The same process started from a positive floor, e.g. a service rate
    /// bounded below by `μ_0`.
    RbmShifted { c: f64, sigma: f64, lower: f64 },
    /// Orthant RBM with drift `−c`, covariance `Σ` and reflection matrix `R`.
    RbmProductOrthant {
        c: Vec<f64>,
        covariance: Vec<Vec<f64>>,
        #[serde(default)]
        reflection: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        shifts: Option<Vec<f64>>,
    },
    /// `dZ = −c (Z − lower) dt + σ dW` reflected at `lower`.
    ReflectedOu {
        c: f64,
        sigma: f64,
        #[serde(default)]
        lower: f64,
    },
    /// Reflected OU on `[lo, hi]` pulled toward `center`.
    ReflectedOuInterval { c: f64, sigma: f64, center: f64, lo: f64, hi: f64 },
    /// RBM with drift `−c` and upward jumps.
    JumpRbm { c: f64, sigma: f64, intensity: f64, jump: JumpLaw },
    /// An environment that never moves.
    Frozen { at: Vec<f64> },
}

impl DiffusiveExample {
    pub fn name(&self) -> &'static str {
        match self {
            DiffusiveExample::RbmHalfline { .. } => "rbm_halfline",
            DiffusiveExample::RbmShifted { .. } => "rbm_shifted",
            DiffusiveExample::RbmProductOrthant { .. } => "rbm_product_orthant",
            DiffusiveExample::ReflectedOu { .. } => "reflected_ou",
            DiffusiveExample::ReflectedOuInterval { .. } => "reflected_ou_interval",
            DiffusiveExample::JumpRbm { .. } => "jump_rbm",
            DiffusiveExample::Frozen { .. } => "frozen",
        }
    }

    pub fn spec(&self) -> Result<DiffusionSpec, DiffusiveError> {
        let one = |s: f64| DMatrix::from_element(1, 1, s);
        let spec = match self {
            DiffusiveExample::RbmHalfline { c, sigma, lower } | DiffusiveExample::RbmShifted { c, sigma, lower } => {
                DiffusionSpec::new(Drift::Constant(vec![-c]), one(*sigma), DomainSpec::half_line(*lower))
            }
            DiffusiveExample::RbmProductOrthant {
                c,
                covariance,
                reflection,
                shifts,
            } => {
                let d = c.len();
                let cov = matrix(covariance, "covariance")?;
                let sigma = cov
                    .clone()
                    .cholesky()
                    .ok_or_else(|| DiffusiveError::InvalidSpec("covariance is not positive definite".into()))?
                    .l();
                let r = matrix(reflection.as_ref().unwrap_or(&identity(d)), "reflection")?;
                let reflection = if r == DMatrix::identity(d, d) {
                    Reflection::Normal
                } else {
                    Reflection::Oblique(r)
                };
                let shifts = shifts.clone().unwrap_or_else(|| vec![0.0; d]);
                DiffusionSpec::new(
                    Drift::Constant(c.iter().map(|x| -x).collect()),
                    sigma,
                    DomainSpec::orthant(shifts, reflection),
                )
            }
            DiffusiveExample::ReflectedOu { c, sigma, lower } => DiffusionSpec::new(
                Drift::MeanReverting {
                    rate: *c,
                    center: vec![*lower],
                },
                one(*sigma),
                DomainSpec::half_line(*lower),
            ),
            DiffusiveExample::ReflectedOuInterval { c, sigma, center, lo, hi } => DiffusionSpec::new(
                Drift::MeanReverting {
                    rate: *c,
                    center: vec![*center],
                },
                one(*sigma),
                DomainSpec::interval(*lo, *hi),
            ),
            DiffusiveExample::JumpRbm {
                c,
                sigma,
                intensity,
                jump,
            } => DiffusionSpec::new(Drift::Constant(vec![-c]), one(*sigma), DomainSpec::half_line(0.0))
                .with_jumps(*intensity, *jump),
            DiffusiveExample::Frozen { at } => {
                let d = at.len();
                let domain = if d == 1 {
                    DomainSpec::half_line(f64::MIN)
                } else {
                    DomainSpec::orthant(vec![f64::MIN; d], Reflection::Normal)
                };
                DiffusionSpec::new(Drift::Constant(vec![0.0; d]), DMatrix::zeros(d, d), domain)
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A starting point inside the domain.
    pub fn start(&self) -> Vec<f64> {
        match self {
            DiffusiveExample::RbmHalfline { lower, .. }
            | DiffusiveExample::RbmShifted { lower, .. }
            | DiffusiveExample::ReflectedOu { lower, .. } => vec![*lower],
            DiffusiveExample::RbmProductOrthant { c, shifts, .. } => {
                shifts.clone().unwrap_or_else(|| vec![0.0; c.len()])
            }
            DiffusiveExample::ReflectedOuInterval { center, .. } => vec![*center],
            DiffusiveExample::JumpRbm { .. } => vec![0.0],
            DiffusiveExample::Frozen { at } => at.clone(),
        }
    }
}

/// Closed-form stationary law of a [`DiffusiveExample`].
///
/// ```
/// use bdenv::diffusive::{stationary_law, DiffusiveExample, StationaryLaw};
///
/// let law = stationary_law(&DiffusiveExample::RbmHalfline { c: 0.5, sigma: 1.0, lower: 0.0 }).unwrap();
/// assert_eq!(law, StationaryLaw::Exponential { rate: 1.0, shift: 0.0 });
/// ```
pub fn stationary_law(example: &DiffusiveExample) -> Result<StationaryLaw, DiffusiveError> {
    let positive = |name: &str, x: f64| {
        if x > 0.0 && x.is_finite() {
            Ok(())
        } else {
            Err(DiffusiveError::InvalidSpec(format!("{name} must be positive, got {x}")))
        }
    };
    match example {
        DiffusiveExample::RbmHalfline { c, sigma, lower } | DiffusiveExample::RbmShifted { c, sigma, lower } => {
            positive("c", *c)?;
            positive("sigma", *sigma)?;
            Ok(StationaryLaw::Exponential {
                rate: 2.0 * c / (sigma * sigma),
                shift: *lower,
            })
        }
        DiffusiveExample::RbmProductOrthant {
            c,
            covariance,
            reflection,
            shifts,
        } => {
            let d = c.len();
            let cov = matrix(covariance, "covariance")?;
            let r = matrix(reflection.as_ref().unwrap_or(&identity(d)), "reflection")?;
            if cov.nrows() != d || r.nrows() != d {
                return Err(DiffusiveError::InvalidSpec("dimension mismatch".into()));
            }
            let (ok, residual) = skew_symmetry_check(&r, &cov);
            if !ok {
                return Err(DiffusiveError::SkewSymmetryFailed { residual });
            }
            let xi = r
                .clone()
                .try_inverse()
                .ok_or_else(|| DiffusiveError::InvalidDomain("reflection matrix is singular".into()))?
                * DVector::from_column_slice(c);
            if xi.iter().any(|x| *x <= 0.0) {
                return Err(DiffusiveError::NotRecurrent(format!("R⁻¹c = {:?} must be positive", xi.as_slice())));
            }
            Ok(StationaryLaw::ProductExponential {
                rates: (0..d).map(|i| 2.0 * xi[i] / cov[(i, i)]).collect(),
                shifts: shifts.clone().unwrap_or_else(|| vec![0.0; d]),
            })
        }
        DiffusiveExample::ReflectedOu { c, sigma, lower } => {
            positive("c", *c)?;
            positive("sigma", *sigma)?;
            Ok(StationaryLaw::OneSidedGaussian {
                shift: *lower,
                var: sigma * sigma / (2.0 * c),
            })
        }
        DiffusiveExample::ReflectedOuInterval { c, sigma, center, lo, hi } => {
            positive("c", *c)?;
            positive("sigma", *sigma)?;
            Ok(StationaryLaw::TruncatedGaussian {
                mean: *center,
                var: sigma * sigma / (2.0 * c),
                lo: *lo,
                hi: *hi,
            })
        }
        DiffusiveExample::JumpRbm {
            c,
            sigma,
            intensity,
            jump,
        } => jump_rbm_law(*c, *sigma, *intensity, *jump),
        DiffusiveExample::Frozen { at } => Ok(StationaryLaw::PointMass { at: at.clone() }),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XiMethod {
    ClosedForm,
    Exact,
    Quadrature,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct XiEstimate {
    pub value: f64,
    /// Quadrature: difference between two panel widths. Monte Carlo: standard error.
    pub error: f64,
    pub method: XiMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct XiConfig {
    pub quad: QuadConfig,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for XiConfig {
    fn default() -> Self {
        Self {
            quad: QuadConfig::default(),
            mc_samples: 200_000,
            seed: 0,
        }
    }
}

fn quad_divergent(e: QuadError) -> DiffusiveError {
    match e {
        QuadError::Divergent { at } => DiffusiveError::XiDivergent(format!("integrand does not decay (z ≈ {at:.3e})")),
    }
}

fn total_or_divergent(model: &ModelSpec, z: &[f64], n_max: usize) -> Result<f64, DiffusiveError> {
    match log_ratio_total(model, z, n_max) {
        Ok(l) => Ok(l.exp()),
        Err(ModelError::Divergence { .. } | ModelError::TruncationTooShort { .. }) => Err(
            DiffusiveError::XiDivergent(format!("Σ_n r_n(z) diverges at z = {z:?}")),
        ),
        Err(e) => Err(e.into()),
    }
}

/// Flags an integrand `Σ_n r_n(z) ν(z)` that does not decay between 16, 32
/// and 64 scales past the lower limit. Such integrands cannot converge within
/// the quadrature range anyway, and finding that out by quadrature is slow.
fn tail_growth_check(model: &ModelSpec, law: &StationaryLaw, n_max: usize) -> Result<(), DiffusiveError> {
    let (lo, s) = (law.lower(0), law.scale(0));
    let mut logs = Vec::with_capacity(3);
    for k in [16.0, 32.0, 64.0] {
        let z = lo + k * s;
        let d = law.density(&[z]).unwrap_or(0.0);
        if !(d > 0.0) {
            return Ok(());
        }
        logs.push(total_or_divergent(model, &[z], n_max)?.ln() + d.ln());
    }
    if logs[1] - logs[0] >= -1e-6 * 16.0 && logs[2] - logs[1] >= -1e-6 * 32.0 {
        return Err(DiffusiveError::XiDivergent(format!(
            "integrand does not decay between z = {} and z = {}",
            lo + 16.0 * s,
            lo + 64.0 * s
        )));
    }
    Ok(())
}

/// `Ξ = ∫ Σ_n r_n(z) ν(dz)`.
///
/// One-dimensional densities are integrated by composite Gauss–Legendre (the
/// error is the change under panel halving); product laws in two or more
/// dimensions use Monte Carlo.
pub fn compute_xi_diffusive(
    model: &ModelSpec,
    law: &StationaryLaw,
    n_max: usize,
    cfg: &XiConfig,
) -> Result<XiEstimate, DiffusiveError> {
    match law {
        StationaryLaw::PointMass { at } => Ok(XiEstimate {
            value: total_or_divergent(model, at, n_max)?,
            error: 0.0,
            method: XiMethod::Exact,
        }),
        StationaryLaw::MgfImplicit { .. } => Err(DiffusiveError::NoDensity),
        StationaryLaw::ProductExponential { .. } => {
            let mut rng = stream_rng(cfg.seed, 0);
            let mut values = Vec::with_capacity(cfg.mc_samples);
            for _ in 0..cfg.mc_samples {
                let z = law.sample(&mut rng).ok_or(DiffusiveError::NoDensity)?;
                values.push(total_or_divergent(model, &z, n_max)?);
            }
            let est = crate::stats::mean_stderr(&values);
            Ok(XiEstimate {
                value: est.mean,
                error: est.stderr,
                method: XiMethod::MonteCarlo,
            })
        }
        _ => {
            if law.upper(0).is_none() {
                tail_growth_check(model, law, n_max)?;
            }
            let run = |panel: f64| -> Result<f64, DiffusiveError> {
                let qc = QuadConfig { panel, ..cfg.quad };
                let mut failure = None;
                let value = integrate(
                    |z| {
                        let d = law.density(&[z]).unwrap_or(0.0);
                        if d == 0.0 {
                            return 0.0;
                        }
                        match total_or_divergent(model, &[z], n_max) {
                            Ok(t) => t * d,
                            Err(e) => {
                                failure.get_or_insert(e);
                                f64::INFINITY
                            }
                        }
                    },
                    law.lower(0),
                    law.upper(0),
                    law.scale(0),
                    &qc,
                );
                if let Some(e) = failure {
                    return Err(e);
                }
                value.map_err(quad_divergent)
            };
            let coarse = run(cfg.quad.panel)?;
            let fine = run(cfg.quad.panel / 2.0)?;
            Ok(XiEstimate {
                value: fine,
                error: (fine - coarse).abs(),
                method: XiMethod::Quadrature,
            })
        }
    }
}

/// `Ξ = (2c/σ²)/(2c/σ² − 1/μ)` for an M/M/∞ queue whose arrival rate is an
/// RBM with drift `−c` on `[0, ∞)`; diverges unless `2c/σ² > 1/μ`.
///
/// ```
/// let xi = bdenv::diffusive::xi_rbm_arrival(1.0, 2f64.sqrt(), 2.0).unwrap();
/// assert!((xi - 2.0).abs() < 1e-15);
/// assert!(bdenv::diffusive::xi_rbm_arrival(1.0, 2f64.sqrt(), 1.0).is_err());
/// ```
pub fn xi_rbm_arrival(c: f64, sigma: f64, mu: f64) -> Result<f64, DiffusiveError> {
    let alpha = 2.0 * c / (sigma * sigma);
    if alpha - 1.0 / mu <= 0.0 {
        return Err(DiffusiveError::XiDivergent(format!("2c/σ² = {alpha} ≤ 1/μ = {}", 1.0 / mu)));
    }
    Ok(alpha / (alpha - 1.0 / mu))
}

/// `Ξ = Ψ_ν(1/μ)` for an M/M/∞ queue whose arrival rate follows `law`.
pub fn xi_mgf_arrival(law: &StationaryLaw, mu: f64) -> Result<f64, DiffusiveError> {
    law.mgf(1.0 / mu)
        .ok_or_else(|| DiffusiveError::XiDivergent(format!("the MGF of ν is infinite at 1/μ = {}", 1.0 / mu)))
}

/// `π({n}, dz) = r_n(z) ν(dz) / Ξ`, summarized by the level weights.
#[derive(Debug, Clone)]
pub struct HybridMeasure {
    pub xi: XiEstimate,
    /// `w_n = ∫ r_n dν / Ξ` for `n = 0..=n_max`.
    pub weights: Vec<f64>,
    pub law: StationaryLaw,
}

impl HybridMeasure {
    /// Unnormalized conditional density of `z` given `N = n`: `r_n(z) ν(z) / Ξ`.
    pub fn joint_density(&self, model: &ModelSpec, n: usize, z: &[f64]) -> Result<f64, DiffusiveError> {
        let d = self.law.density(z).ok_or(DiffusiveError::NoDensity)?;
        if d == 0.0 {
            return Ok(0.0);
        }
        let r = cumulative_ratio(model, z, n)?;
        Ok(r.value(n) * d / self.xi.value)
    }
}

pub fn invariant_measure_diffusive(
    model: &ModelSpec,
    law: &StationaryLaw,
    n_max: usize,
    cfg: &XiConfig,
) -> Result<HybridMeasure, DiffusiveError> {
    let xi = compute_xi_diffusive(model, law, model.truncation_hint.max(n_max), cfg)?;
    let levels = n_max + 1;
    let raw = match law {
        StationaryLaw::PointMass { at } => cumulative_ratio(model, at, n_max)?.values(),
        StationaryLaw::ProductExponential { .. } => {
            let mut rng = stream_rng(cfg.seed, 1);
            let mut acc = vec![0.0; levels];
            for _ in 0..cfg.mc_samples {
                let z = law.sample(&mut rng).ok_or(DiffusiveError::NoDensity)?;
                let r = cumulative_ratio(model, &z, n_max)?;
                for (a, l) in acc.iter_mut().zip(r.log_values()) {
                    *a += l.exp();
                }
            }
            acc.iter().map(|a| a / cfg.mc_samples as f64).collect()
        }
        StationaryLaw::MgfImplicit { .. } => return Err(DiffusiveError::NoDensity),
        _ => {
            let mut failure = None;
            let v = integrate_vec(
                |z, out| {
                    let d = law.density(&[z]).unwrap_or(0.0);
                    match cumulative_ratio(model, &[z], n_max) {
                        Ok(r) => {
                            for (o, l) in out.iter_mut().zip(r.log_values()) {
                                *o = if d == 0.0 { 0.0 } else { l.exp() * d };
                            }
                        }
                        Err(e) => {
                            failure.get_or_insert(e);
                            out.iter_mut().for_each(|o| *o = f64::INFINITY);
                        }
                    }
                },
                levels,
                law.lower(0),
                law.upper(0),
                law.scale(0),
                &cfg.quad,
            );
            if let Some(e) = failure {
                return Err(e.into());
            }
            v.map_err(quad_divergent)?
        }
    };
    Ok(HybridMeasure {
        xi,
        weights: raw.iter().map(|w| w / xi.value).collect(),
        law: law.clone(),
    })
}

/// Per-level shifted exponential laws `ν_n` on `[μ_n, ∞)` with common rate
/// `2c/σ²`.
#[derive(Clone)]
pub struct VariableDomainLaw {
    pub rate: f64,
    lower: Arc<dyn Fn(usize) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for VariableDomainLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VariableDomainLaw").field("rate", &self.rate).finish_non_exhaustive()
    }
}

impl VariableDomainLaw {
    pub fn law(&self, n: usize) -> StationaryLaw {
        StationaryLaw::Exponential {
            rate: self.rate,
            shift: (self.lower)(n),
        }
    }

    pub fn lower(&self, n: usize) -> f64 {
        (self.lower)(n)
    }

    /// The matching environment: RBM with drift `−c` on `[lower(n), ∞)`.
    pub fn spec(&self, c: f64, sigma: f64) -> DiffusionSpec {
        let lower = self.lower.clone();
        DiffusionSpec::new(
            Drift::Constant(vec![-c]),
            DMatrix::from_element(1, 1, sigma),
            DomainSpec::variable_half_line(move |n| lower(n)),
        )
    }
}

pub fn variable_domain_law(
    lower: impl Fn(usize) -> f64 + Send + Sync + 'static,
    c: f64,
    sigma: f64,
) -> Result<VariableDomainLaw, DiffusiveError> {
    if !(c > 0.0 && sigma > 0.0) {
        return Err(DiffusiveError::InvalidSpec("c and σ must be positive".into()));
    }
    Ok(VariableDomainLaw {
        rate: 2.0 * c / (sigma * sigma),
        lower: Arc::new(lower),
    })
}

/// Level weights and `Ξ = Σ_n ∫_{D_n} r_n dν_n` for a variable domain.
#[derive(Debug, Clone)]
pub struct VariableDomainMeasure {
    pub xi: f64,
    pub weights: Vec<f64>,
}

pub fn invariant_measure_variable_domain(
    model: &ModelSpec,
    law: &VariableDomainLaw,
    n_max: usize,
    quad: &QuadConfig,
) -> Result<VariableDomainMeasure, DiffusiveError> {
    let mut terms = Vec::with_capacity(n_max + 1);
    for n in 0..=n_max {
        let lo = law.lower(n);
        if !(lo > 0.0) {
            return Err(DiffusiveError::InvalidDomain(format!("μ_{n} = {lo} must be positive")));
        }
        let nu = law.law(n);
        let mut failure = None;
        let term = integrate(
            |z| match cumulative_ratio(model, &[z], n) {
                Ok(r) => r.value(n) * nu.density(&[z]).unwrap_or(0.0),
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::INFINITY
                }
            },
            lo,
            None,
            1.0 / law.rate,
            quad,
        );
        if let Some(e) = failure {
            return Err(e.into());
        }
        terms.push(term.map_err(quad_divergent)?);
    }
    let xi: f64 = terms.iter().sum();
    let last = *terms.last().unwrap_or(&0.0);
    let prev = if n_max > 0 { terms[n_max - 1] } else { f64::INFINITY };
    if last > 1e-12 * xi && last >= prev {
        return Err(DiffusiveError::XiDivergent(format!(
            "level terms stop shrinking at n = {n_max} (term {last:e})"
        )));
    }
    if !xi.is_finite() {
        return Err(DiffusiveError::XiDivergent("Ξ is not finite".into()));
    }
    Ok(VariableDomainMeasure {
        xi,
        weights: terms.iter().map(|t| t / xi).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{catalog, ParamMap, RateParam};
    use crate::stats::{ks_distance, mean_stderr};
    use proptest::prelude::*;

    fn rbm(c: f64, sigma: f64) -> DiffusiveExample {
        DiffusiveExample::RbmHalfline { c, sigma, lower: 0.0 }
    }

    fn mminf_arrival(mu: f64) -> ModelSpec {
        let mut p = ParamMap::new();
        p.insert("lambda".into(), RateParam::coord(0));
        p.insert("mu".into(), RateParam::Const(mu));
        catalog("mminf", &p).unwrap()
    }

    fn mminf_service(lambda: f64) -> ModelSpec {
        let mut p = ParamMap::new();
        p.insert("lambda".into(), RateParam::Const(lambda));
        p.insert("mu".into(), RateParam::coord(0));
        catalog("mminf", &p).unwrap()
    }

    /// Adaptive Simpson oracle on a finite range.
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        // Unit-width pieces so a peaked integrand cannot hide between the
        // first three samples.
        let pieces = (b - a).ceil().max(1.0) as usize;
        let w = (b - a) / pieces as f64;
        (0..pieces)
            .map(|k| {
                let (lo, hi) = (a + k as f64 * w, a + (k + 1) as f64 * w);
                let (fa, fb, fm) = (f(lo), f(hi), f(0.5 * (lo + hi)));
                rec(f, lo, hi, fa, fm, fb, (hi - lo) / 6.0 * (fa + 4.0 * fm + fb), tol / pieces as f64, 50)
            })
            .sum()
    }

    #[test]
    fn identity_dynamics() {
        let spec = DiffusionSpec::new(Drift::Constant(vec![0.0]), DMatrix::zeros(1, 1), DomainSpec::half_line(0.0));
        let mut rng = stream_rng(1, 0);
        let out = step_reflected(&spec, &[0.7], 1e-3, 0, 1.0, 1e6, &mut rng).unwrap();
        assert_eq!(out, vec![0.7]);
    }

    #[test]
    fn reflection_keeps_points_in_domain() {
        let spec = DiffusionSpec::new(Drift::Constant(vec![-50.0]), DMatrix::from_element(1, 1, 1e-3), DomainSpec::half_line(0.0));
        let mut rng = stream_rng(2, 0);
        let mut stepper = Stepper::new(&spec, 1e6);
        let mut z = vec![0.1];
        for _ in 0..10_000 {
            stepper.step(&mut z, 1e-2, 0, 1.0, &mut rng).unwrap();
            assert!(z[0] >= 0.0);
        }
    }

    #[test]
    fn interval_and_oblique_orthant_stay_inside() {
        let spec = DiffusiveExample::ReflectedOuInterval { c: 0.1, sigma: 3.0, center: 0.5, lo: 0.0, hi: 1.0 }
            .spec()
            .unwrap();
        let mut rng = stream_rng(3, 0);
        let mut stepper = Stepper::new(&spec, 1e6);
        let mut z = vec![0.5];
        for _ in 0..10_000 {
            stepper.step(&mut z, 1e-2, 0, 1.0, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&z[0]));
        }
        let ex = DiffusiveExample::RbmProductOrthant {
            c: vec![1.0, 1.0],
            covariance: vec![vec![1.0, 0.5], vec![0.5, 1.0]],
            reflection: Some(vec![vec![1.0, 0.5], vec![0.5, 1.0]]),
            shifts: Some(vec![0.0, 0.5]),
        };
        let spec = ex.spec().unwrap();
        let mut stepper = Stepper::new(&spec, 1e6);
        let mut z = ex.start();
        for _ in 0..10_000 {
            stepper.step(&mut z, 1e-2, 0, 1.0, &mut rng).unwrap();
            assert!(spec.domain.contains(&z, 0), "{z:?}");
        }
    }

    #[test]
    fn speed_cap_is_enforced() {
        let spec = rbm(1.0, 1.0).spec().unwrap();
        let mut rng = stream_rng(1, 0);
        let err = step_reflected(&spec, &[1.0], 1e-3, 0, 1e7, 1e6, &mut rng).unwrap_err();
        assert!(matches!(err, DiffusiveError::SpeedCap { .. }));
        assert!(step_reflected(&spec, &[1.0], 1e-3, 0, f64::INFINITY, f64::INFINITY, &mut rng).is_err());
    }

    #[test]
    fn rbm_law_examples() {
        let law = stationary_law(&rbm(1.0, SQRT_2)).unwrap();
        let StationaryLaw::Exponential { rate, shift } = law else { panic!() };
        assert!((rate - 1.0).abs() < 1e-15 && shift == 0.0);
        let ou = stationary_law(&DiffusiveExample::ReflectedOu { c: 1.0, sigma: 1.0, lower: 0.0 }).unwrap();
        assert_eq!(ou, StationaryLaw::OneSidedGaussian { shift: 0.0, var: 0.5 });
    }

    #[test]
    fn skew_symmetry_examples() {
        let id = DMatrix::<f64>::identity(2, 2);
        let diag = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        assert!(skew_symmetry_check(&id, &diag).0);
        let coupled = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5]);
        assert!(!skew_symmetry_check(&id, &coupled).0);
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let d = DMatrix::<f64>::identity(2, 2);
        let sigma = (&r * &d + &d * r.transpose()) / 2.0;
        let (ok, residual) = skew_symmetry_check(&r, &sigma);
        assert!(ok && residual < 1e-15);
    }

    #[test]
    fn product_orthant_rates() {
        let law = stationary_law(&DiffusiveExample::RbmProductOrthant {
            c: vec![1.0, 3.0],
            covariance: vec![vec![2.0, 0.0], vec![0.0, 0.5]],
            reflection: None,
            shifts: None,
        })
        .unwrap();
        assert_eq!(
            law,
            StationaryLaw::ProductExponential { rates: vec![1.0, 12.0], shifts: vec![0.0, 0.0] }
        );
        let bad = stationary_law(&DiffusiveExample::RbmProductOrthant {
            c: vec![1.0, 1.0],
            covariance: vec![vec![1.0, 0.3], vec![0.3, 1.0]],
            reflection: None,
            shifts: None,
        });
        assert!(matches!(bad, Err(DiffusiveError::SkewSymmetryFailed { .. })));
    }

    #[test]
    fn jump_rbm_root_and_mgf() {
        let law = jump_rbm_law(2.0, 1.0, 1.0, JumpLaw::Exponential { mean: 0.5 }).unwrap();
        let StationaryLaw::MgfImplicit { u0, m, .. } = law else { panic!() };
        assert!((m - 1.5).abs() < 1e-15);
        // Oracle: sign change bracketing on a grid, then bisection.
        let f = |u: f64| 2.0 * u - 0.5 * u * u - 1.0 / (1.0 - 0.5 * u) + 1.0;
        let grid: Vec<f64> = (1..2000).map(|k| k as f64 * 1e-3).collect();
        let k = grid.windows(2).position(|w| f(w[0]) > 0.0 && f(w[1]) <= 0.0).unwrap();
        let (mut lo, mut hi) = (grid[k], grid[k + 1]);
        while hi - lo > 1e-13 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 { lo = mid } else { hi = mid }
        }
        assert!((u0 - lo).abs() < 1e-11, "{u0} vs {lo}");
        assert!(jump_rbm_f(&law, u0).unwrap().abs() < 1e-10);
        assert_eq!(jump_rbm_f(&law, 0.0).unwrap(), 0.0);
        // No jumps: Ψ is the Exp(2c/σ²) MGF.
        let plain = jump_rbm_law(1.0, SQRT_2, 0.0, JumpLaw::Fixed { size: 1.0 }).unwrap();
        assert!((plain.mgf(0.3).unwrap() - 1.0 / 0.7).abs() < 1e-12);
        assert!((plain.mean()[0] - 1.0).abs() < 1e-15);
        assert!(matches!(
            jump_rbm_law(0.4, 1.0, 1.0, JumpLaw::Fixed { size: 0.5 }),
            Err(DiffusiveError::NegativeEffectiveDrift { .. })
        ));
    }

    #[test]
    fn closed_form_samplers_match_means() {
        let laws = [
            StationaryLaw::Exponential { rate: 2.0, shift: 0.5 },
            StationaryLaw::OneSidedGaussian { shift: 0.0, var: 0.5 },
            StationaryLaw::TruncatedGaussian { mean: 0.2, var: 0.3, lo: 0.0, hi: 1.0 },
            StationaryLaw::ProductExponential { rates: vec![1.0, 3.0], shifts: vec![0.0, 1.0] },
        ];
        let mut rng = stream_rng(4, 0);
        for law in laws {
            let samples: Vec<Vec<f64>> = (0..100_000).map(|_| law.sample(&mut rng).unwrap()).collect();
            for i in 0..law.dim() {
                let xs: Vec<f64> = samples.iter().map(|s| s[i]).collect();
                let est = mean_stderr(&xs);
                assert!((est.mean - law.mean()[i]).abs() < 3.0 * est.stderr, "{law:?} coord {i}");
                assert!(xs.iter().all(|x| *x >= law.lower(i)));
            }
        }
    }

    #[test]
    fn densities_integrate_to_one() {
        let cfg = QuadConfig::default();
        for law in [
            StationaryLaw::Exponential { rate: 2.0, shift: 0.5 },
            StationaryLaw::OneSidedGaussian { shift: 1.0, var: 0.5 },
            StationaryLaw::TruncatedGaussian { mean: 0.2, var: 0.3, lo: 0.0, hi: 1.0 },
        ] {
            let total = integrate(|z| law.density(&[z]).unwrap(), law.lower(0), law.upper(0), law.scale(0), &cfg).unwrap();
            assert!((total - 1.0).abs() < 1e-12, "{law:?}: {total}");
            let mid = law.marginal_quantile(0, 0.3).unwrap();
            let back = law.marginal_cdf(0, mid).unwrap();
            assert!((back - 0.3).abs() < 1e-12, "{law:?}: {back}");
            assert_eq!(law.density(&[law.lower(0) - 1.0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn xi_quadrature_matches_closed_form() {
        let model = mminf_arrival(2.0);
        let law = stationary_law(&rbm(1.0, SQRT_2)).unwrap();
        let est = compute_xi_diffusive(&model, &law, 512, &XiConfig::default()).unwrap();
        let closed = xi_rbm_arrival(1.0, SQRT_2, 2.0).unwrap();
        assert!((closed - 2.0).abs() < 1e-15);
        assert!((est.value / closed - 1.0).abs() < 1e-6, "{est:?}");
        // Independent oracle: adaptive Simpson on ∫ e^{z/μ} e^{−z} dz.
        let oracle = simpson(&|z: f64| (z / 2.0).exp() * (-z).exp(), 0.0, 80.0, 1e-12);
        assert!((oracle - 2.0).abs() < 1e-9);
    }

    #[test]
    fn xi_divergence_boundary() {
        let model = mminf_arrival(1.0);
        let law = stationary_law(&rbm(1.0, SQRT_2)).unwrap();
        assert!(matches!(
            compute_xi_diffusive(&model, &law, 512, &XiConfig::default()),
            Err(DiffusiveError::XiDivergent(_))
        ));
        assert!(xi_rbm_arrival(1.0, SQRT_2, 1.0).is_err());
    }

    #[test]
    fn service_rbm_xi_is_finite() {
        let model = mminf_service(1.0);
        let law = stationary_law(&DiffusiveExample::RbmShifted { c: 1.0, sigma: 1.0, lower: 0.5 }).unwrap();
        let est = compute_xi_diffusive(&model, &law, 512, &XiConfig::default()).unwrap();
        // Oracle: Σ_n r_n(z) = e^{λ/z}, integrated by Simpson.
        let oracle = simpson(&|z: f64| (1.0 / z).exp() * 2.0 * (-2.0 * (z - 0.5)).exp(), 0.5, 40.0, 1e-12);
        assert!((est.value / oracle - 1.0).abs() < 1e-8, "{} vs {oracle}", est.value);
    }

    #[test]
    fn hybrid_weights_for_rbm_arrival() {
        let model = mminf_arrival(2.0);
        let law = stationary_law(&rbm(1.0, SQRT_2)).unwrap();
        let pi = invariant_measure_diffusive(&model, &law, 30, &XiConfig::default()).unwrap();
        for n in 0..=30 {
            // ∫ (z/2)^n/n! e^{−z} dz = 2^{−n}, so w_n = 2^{−(n+1)}.
            let oracle = simpson(
                &|z: f64| {
                    let r = (0..n).fold(1.0, |acc, k| acc * (z / 2.0) / (k + 1) as f64);
                    r * (-z).exp()
                },
                0.0,
                150.0,
                1e-13,
            ) / 2.0;
            assert!((pi.weights[n] - oracle).abs() < 1e-9, "n = {n}: {} vs {oracle}", pi.weights[n]);
            assert!((pi.weights[n] - 0.5f64.powi(n as i32 + 1)).abs() < 1e-10);
        }
        let total: f64 = pi.weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn point_mass_reduces_to_fixed_environment() {
        let model = mminf_arrival(1.0);
        let law = StationaryLaw::PointMass { at: vec![1.5] };
        let pi = invariant_measure_diffusive(&model, &law, 40, &XiConfig::default()).unwrap();
        let kappa = crate::model::normalized_weights(&model, &[1.5], 40, 1e-10).unwrap().kappa;
        for n in 0..=40 {
            assert!((pi.weights[n] - kappa[n]).abs() < 1e-14);
        }
    }

    #[test]
    fn loss_model_has_bounded_levels() {
        let mut p = ParamMap::new();
        p.insert("lambda".into(), RateParam::coord(0));
        p.insert("mu".into(), RateParam::Const(1.0));
        p.insert("k".into(), RateParam::Const(3.0));
        let model = catalog("mmk0", &p).unwrap();
        let law = stationary_law(&rbm(1.0, 1.0)).unwrap();
        let pi = invariant_measure_diffusive(&model, &law, 10, &XiConfig::default()).unwrap();
        assert!(pi.weights[4..].iter().all(|w| *w == 0.0));
        assert!((pi.weights.iter().sum::<f64>() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn variable_domain_cases() {
        let model = mminf_service(1.0);
        let quad = QuadConfig::default();
        let constant = variable_domain_law(|_| 0.5, 1.0, 1.0).unwrap();
        let vm = invariant_measure_variable_domain(&model, &constant, 60, &quad).unwrap();
        let shifted = stationary_law(&DiffusiveExample::RbmShifted { c: 1.0, sigma: 1.0, lower: 0.5 }).unwrap();
        let fixed = compute_xi_diffusive(&model, &shifted, 512, &XiConfig::default()).unwrap();
        assert!((vm.xi / fixed.value - 1.0).abs() < 1e-9);

        let growing = variable_domain_law(|n| 0.5 + n as f64, 1.0, 1.0).unwrap();
        let vm = invariant_measure_variable_domain(&model, &growing, 60, &quad).unwrap();
        // Oracle: per-level Simpson integrals, summed.
        let oracle: f64 = (0..=60)
            .map(|n| {
                let lo = 0.5 + n as f64;
                simpson(
                    &|z: f64| {
                        let r = (0..n).fold(1.0, |acc, k| acc / (z * (k + 1) as f64));
                        r * 2.0 * (-2.0 * (z - lo)).exp()
                    },
                    lo,
                    lo + 40.0,
                    1e-13,
                )
            })
            .sum();
        assert!((vm.xi / oracle - 1.0).abs() < 1e-8);

        let idle = mminf_service(0.0);
        let vm = invariant_measure_variable_domain(&idle, &growing, 20, &quad).unwrap();
        assert!((vm.xi - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rbm_empirical_law_is_exponential() {
        let spec = rbm(1.0, SQRT_2).spec().unwrap();
        let samples = simulate_env(&spec, &[0.0], 1e-3, 2e3, 100.0, 10, 5).unwrap();
        let mut xs = samples.coord(0);
        let d = ks_distance(&mut xs, |x| 1.0 - (-x).exp());
        assert!(d < 0.05, "ks = {d}");
    }

    #[test]
    fn jump_rbm_mgf_matches_simulation() {
        let ex = DiffusiveExample::JumpRbm { c: 2.0, sigma: 1.0, intensity: 1.0, jump: JumpLaw::Exponential { mean: 0.5 } };
        let law = stationary_law(&ex).unwrap();
        let spec = ex.spec().unwrap();
        let samples = simulate_env(&spec, &[0.0], 1e-3, 2e4, 100.0, 100, 6).unwrap();
        let xs = samples.coord(0);
        let u = 0.3;
        // Batch means absorb the correlation between successive samples.
        let batch = 200;
        let means: Vec<f64> = xs
            .chunks(batch)
            .map(|c| c.iter().map(|x| (u * x).exp()).sum::<f64>() / c.len() as f64)
            .collect();
        let est = mean_stderr(&means);
        let exact = law.mgf(u).unwrap();
        assert!((est.mean - exact).abs() < 3.0 * est.stderr + 1e-3, "{est:?} vs {exact}");
    }

    proptest! {
        #[test]
        fn reflection_never_leaves_the_half_line(z in 0.0f64..5.0, drift in -100.0f64..10.0, seed in 0u64..50) {
            let spec = DiffusionSpec::new(Drift::Constant(vec![drift]), DMatrix::from_element(1, 1, 2.0), DomainSpec::half_line(0.0));
            let mut rng = stream_rng(seed, 0);
            let out = step_reflected(&spec, &[z], 0.05, 0, 1.0, 1e6, &mut rng).unwrap();
            prop_assert!(out[0] >= 0.0);
        }
    }
}
