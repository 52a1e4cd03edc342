//! Convergence-rate machinery: the auxiliary functions `θ`, `g`, `G`, `u*`,
//! exponential-rate certificates, busy-period domination, Lyapunov
//! certificates and the Monte Carlo experiments that check them.
//!
//! Two exponential settings are covered. In the first the birth probability
//! of the embedded chain is bounded by `p̄ < 1/2` and the return time of the
//! `p̄`-walk (generating function `g`) dominates the drain time. In the second
//! `λ_n ≤ λ̄` and `μ_n ≥ n μ̄`, and the busy period of an M/M/∞ queue
//! dominates instead. Both produce a rate `κ = (1 − ε) u` whenever
//!
//! ```text
//! G(u) θ(α, q̄, γ, u) < (1 − α^{−q̄/γ} γ/(q̄ + γ))^{−ε/(1−ε)}
//! ```
//!
//! where `(α, γ)` bound the environment coupling tail `P(τ_env ≥ t) ≤ α e^{−γt}`.

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusive::{DiffusionSpec, DiffusiveError, StationaryLaw, Stepper};
use crate::joint::{hitting_time, EnvKind, JointError, SimConfig};
use crate::jump::{pick, EnvChainSpec, JumpError, JumpRates};
use crate::model::{cumulative_ratio, normalized_weights, ModelError, ModelSpec, MAX_TRUNCATION};
use crate::quadrature::{integrate, QuadConfig};
use crate::rng::stream_rng;
use crate::stats::{
    fit_tail, mean_stderr, mgf_estimate, survival_curve, tv_distance, FitRange, MeanEstimate, MgfEstimate,
    StatsError, TailFit, TailModel,
};

#[derive(Debug, Error)]
pub enum ConvergenceError {
    #[error("argument outside the domain: {0}")]
    Domain(String),
    #[error("not a Lyapunov function: −L̄V({n}) = {value} ≤ 0")]
    NotLyapunov { n: usize, value: f64 },
    #[error("hitting-time bound violated at n = {n}: mean {mean} ± {stderr} vs bound {bound}")]
    BoundViolated { n: usize, mean: f64, stderr: f64, bound: f64 },
    #[error("Σ G(u)^n ∫ r_n dν diverges at u = {u}")]
    Divergent { u: f64 },
    #[error("MGF estimate keeps growing with the sample size at u = {u}")]
    DivergenceSuspected { u: f64 },
    #[error("{censored} of {total} coupling runs hit the horizon")]
    HorizonExceeded { censored: usize, total: usize },
    #[error(transparent)]
    Joint(#[from] JointError),
    #[error(transparent)]
    Jump(#[from] JumpError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diffusive(#[from] DiffusiveError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

type Result<T> = std::result::Result<T, ConvergenceError>;

fn domain(msg: String) -> ConvergenceError {
    ConvergenceError::Domain(msg)
}

/// `θ(α, β, γ, a) = β/(β−a) − aγ/((β−a)(β+γ−a)) · α^{−(β−a)/γ}`, an upper bound
/// on `E[e^{a(ξ∧η)}]` for `ξ ~ Exp(β)` and `P(η > t) ≤ α e^{−γt}`.
///
/// ```
/// use bdenv::convergence::theta;
/// assert_eq!(theta(2.0, 1.0, 1.0, 0.0).unwrap(), 1.0);
/// ```
pub fn theta(alpha: f64, beta: f64, gamma: f64, a: f64) -> Result<f64> {
    if !(alpha > 1.0 && beta > 0.0 && gamma > 0.0 && a >= 0.0 && a < beta) {
        return Err(domain(format!(
            "θ needs α > 1, β > 0, γ > 0, 0 ≤ a < β; got α={alpha}, β={beta}, γ={gamma}, a={a}"
        )));
    }
    let d = beta - a;
    Ok(beta / d - a * gamma / (d * (d + gamma)) * alpha.powf(-d / gamma))
}

fn b_of(p_bar: f64) -> f64 {
    4.0 * p_bar * (1.0 - p_bar)
}

/// Generating function `g(s) = (1 − √(1 − bs²))/(2p̄s)`, `b = 4p̄(1−p̄)`, of the
/// return time to 0 of the walk that steps up with probability `p̄`.
///
/// Evaluated in the conjugate form `2(1−p̄)s / (1 + √((1−2p̄)² + b(1−s²)))`,
/// which is exact at `s = 1` and has no `0/0` at `s → 0`.
///
/// ```
/// use bdenv::convergence::g;
/// assert_eq!(g(1.0, 0.25).unwrap(), 1.0);
/// let edge = 1.0 / (4.0f64 * 0.25 * 0.75).sqrt();
/// assert!((g(edge, 0.25).unwrap() - 3f64.sqrt()).abs() < 1e-12);
/// ```
pub fn g(s: f64, p_bar: f64) -> Result<f64> {
    if !(p_bar > 0.0 && p_bar < 0.5) {
        return Err(domain(format!("p̄ must lie in (0, 1/2), got {p_bar}")));
    }
    let b = b_of(p_bar);
    let bs2 = b * s * s;
    // Within rounding of the branch point the radicand is zero.
    let at_edge = (bs2 - 1.0).abs() <= 8.0 * f64::EPSILON;
    if !(s > 0.0) || (bs2 > 1.0 && !at_edge) {
        return Err(domain(format!("g needs 0 < s ≤ b^(-1/2) = {}, got {s}", b.powf(-0.5))));
    }
    let q = 1.0 - p_bar;
    let w = 2.0 * q - 1.0;
    let radicand = if at_edge { 0.0 } else { (w * w + b * (1.0 - s * s)).max(0.0) };
    Ok(2.0 * q * s / (1.0 + radicand.sqrt()))
}

/// `G(u) = g(q̄/(q̄ − u))` for `0 ≤ u ≤ u*`.
pub fn big_g(u: f64, p_bar: f64, q_bar: f64) -> Result<f64> {
    if !(q_bar > 0.0) || !(u >= 0.0) || u >= q_bar {
        return Err(domain(format!("G needs q̄ > 0 and 0 ≤ u < q̄, got u={u}, q̄={q_bar}")));
    }
    if u == 0.0 {
        return g(1.0, p_bar);
    }
    g(q_bar / (q_bar - u), p_bar)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UStar {
    /// `u* = q̄(1 − √b)`, where `q̄/(q̄ − u*) = b^{−1/2}`.
    pub u_star: f64,
    /// `G(u*) = g(b^{−1/2}) = √((1−p̄)/p̄)`.
    pub g_at_u_star: f64,
    /// The alternative closed form `(2q̄ b^{−1/2})^{−1} = √(p̄(1−p̄))/q̄`, which
    /// does not agree with `g(b^{−1/2})`; reported for comparison only.
    pub alternative_display: f64,
}

pub fn u_star(p_bar: f64, q_bar: f64) -> Result<UStar> {
    if !(p_bar > 0.0 && p_bar < 0.5) || !(q_bar > 0.0) {
        return Err(domain(format!("u* needs p̄ ∈ (0, 1/2) and q̄ > 0, got p̄={p_bar}, q̄={q_bar}")));
    }
    let b = b_of(p_bar);
    Ok(UStar {
        u_star: q_bar * (1.0 - b.sqrt()),
        g_at_u_star: g(b.powf(-0.5), p_bar)?,
        alternative_display: (p_bar * (1.0 - p_bar)).sqrt() / q_bar,
    })
}

/// Rate bounds evaluated on a finite probe set of environment points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsProfile {
    /// `inf q_i(z) = λ_i + μ_i` over `1 ≤ i ≤ n_max`.
    pub q_bar: f64,
    /// `sup λ_i/(λ_i + μ_i)` over `1 ≤ i ≤ n_max`.
    pub p_bar: f64,
    /// `sup λ_i(z)` over `0 ≤ i ≤ n_max`.
    pub lambda_bar: f64,
    /// `sup λ_{i−1}/μ_i` over `1 ≤ i ≤ n_max`.
    pub max_ratio: f64,
    pub n_max: usize,
    pub probes: usize,
}

impl BoundsProfile {
    pub fn scenario1(&self) -> bool {
        self.q_bar > 0.0 && self.p_bar < 0.5
    }
}

/// Computes the bounds over `probes × {0..=n_max}`. Level 0 is excluded from
/// `q̄` and `p̄` since `μ_0 = 0` would force `p_0 = 1`.
pub fn bounds_profile(model: &ModelSpec, probes: &[Vec<f64>], n_max: usize) -> Result<BoundsProfile> {
    if probes.is_empty() || n_max == 0 {
        return Err(domain("bounds need at least one probe point and n_max ≥ 1".into()));
    }
    let mut q_bar = f64::INFINITY;
    let mut p_bar: f64 = 0.0;
    let mut lambda_bar: f64 = 0.0;
    let mut max_ratio: f64 = 0.0;
    for z in probes {
        lambda_bar = lambda_bar.max(model.birth_rate(0, z));
        for i in 1..=n_max {
            let (l, m) = (model.birth_rate(i, z), model.death_rate(i, z));
            if !(l >= 0.0 && m >= 0.0) {
                return Err(ModelError::InvalidRate {
                    which: "birth/death",
                    n: i,
                    value: if l >= 0.0 { m } else { l },
                }
                .into());
            }
            q_bar = q_bar.min(l + m);
            if l + m > 0.0 {
                p_bar = p_bar.max(l / (l + m));
            }
            lambda_bar = lambda_bar.max(l);
            max_ratio = max_ratio.max(model.birth_rate(i - 1, z) / m);
        }
    }
    Ok(BoundsProfile {
        q_bar,
        p_bar,
        lambda_bar,
        max_ratio,
        n_max,
        probes: probes.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ExponentialS1,
    ExponentialS2,
    Polynomial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCertificate {
    pub scenario: Scenario,
    pub alpha: f64,
    pub gamma: f64,
    pub u: f64,
    pub epsilon: f64,
    pub kappa: f64,
    /// `G(u)` (or `Ḡ(u)` in the second scenario).
    pub g_value: f64,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs − lhs`; positive when the condition holds.
    pub condition_residual: f64,
    /// `ϑ̄ = γ/(λ̄+γ) α^{−λ̄/γ}`, the chance that the environments couple
    /// before the next birth.
    pub theta_bar: f64,
    pub v_description: String,
    pub c_v: f64,
    /// Sups and infs were taken over a probe set rather than analytically.
    pub probe_certified: bool,
    pub valid: bool,
}

impl RateCertificate {
    /// `key = value` lines, one constant per line.
    pub fn to_text(&self) -> String {
        let s = match self.scenario {
            Scenario::ExponentialS1 => "exponential_s1",
            Scenario::ExponentialS2 => "exponential_s2",
            Scenario::Polynomial => "polynomial",
        };
        format!(
            "scenario = {s}\nvalid = {}\nprobe_certified = {}\nalpha = {}\ngamma = {}\nu = {}\nepsilon = {}\nkappa = {}\ng_value = {}\nlhs = {}\nrhs = {}\ncondition_residual = {}\ntheta_bar = {}\nv = {}\nc_v = {}\n",
            self.valid,
            self.probe_certified,
            self.alpha,
            self.gamma,
            self.u,
            self.epsilon,
            self.kappa,
            self.g_value,
            self.lhs,
            self.rhs,
            self.condition_residual,
            self.theta_bar,
            self.v_description,
            self.c_v
        )
    }
}

fn theta_bar(alpha: f64, gamma: f64, lambda_bar: f64) -> f64 {
    gamma / (lambda_bar + gamma) * alpha.powf(-lambda_bar / gamma)
}

/// Both sides of the exponential condition for a given `G(u)` value.
fn condition_sides(g_value: f64, q_bar: f64, alpha: f64, gamma: f64, u: f64, epsilon: f64) -> Result<(f64, f64)> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(domain(format!("ε must lie in (0, 1), got {epsilon}")));
    }
    let lhs = g_value * theta(alpha, q_bar, gamma, u)?;
    let base = 1.0 - alpha.powf(-q_bar / gamma) * gamma / (q_bar + gamma);
    let rhs = base.powf(-epsilon / (1.0 - epsilon));
    Ok((lhs, rhs))
}

#[allow(clippy::too_many_arguments)]
fn certificate(
    scenario: Scenario,
    profile: &BoundsProfile,
    alpha: f64,
    gamma: f64,
    u: f64,
    epsilon: f64,
    g_value: f64,
    lhs: f64,
    rhs: f64,
) -> RateCertificate {
    RateCertificate {
        scenario,
        alpha,
        gamma,
        u,
        epsilon,
        kappa: (1.0 - epsilon) * u,
        g_value,
        lhs,
        rhs,
        condition_residual: rhs - lhs,
        theta_bar: theta_bar(alpha, gamma, profile.lambda_bar),
        v_description: String::new(),
        c_v: 0.0,
        probe_certified: true,
        valid: lhs < rhs,
    }
}

/// Evaluates the first-scenario condition at one `(u, ε)`.
pub fn check_exponential_condition(
    profile: &BoundsProfile,
    alpha: f64,
    gamma: f64,
    u: f64,
    epsilon: f64,
) -> Result<RateCertificate> {
    if !profile.scenario1() {
        return Err(domain(format!("first scenario needs p̄ < 1/2 (p̄ = {})", profile.p_bar)));
    }
    let us = u_star(profile.p_bar, profile.q_bar)?.u_star;
    if !(u > 0.0 && u <= us * (1.0 + 1e-12)) {
        return Err(domain(format!("u must lie in (0, u*] = (0, {us}], got {u}")));
    }
    let gu = big_g(u.min(us), profile.p_bar, profile.q_bar)?;
    let (lhs, rhs) = condition_sides(gu, profile.q_bar, alpha, gamma, u, epsilon)?;
    Ok(certificate(Scenario::ExponentialS1, profile, alpha, gamma, u, epsilon, gu, lhs, rhs))
}

pub const U_GRID: usize = 64;
pub const EPS_GRID: usize = 32;

/// Geometric grid of `U_GRID` points in `(0, top]`, from `top·1e-4` up.
fn u_grid(top: f64) -> Vec<f64> {
    (0..U_GRID)
        .map(|k| top * 1e-4f64.powf(1.0 - k as f64 / (U_GRID - 1) as f64))
        .collect()
}

fn eps_grid() -> Vec<f64> {
    (0..EPS_GRID).map(|j| (j as f64 + 0.5) / EPS_GRID as f64).collect()
}

fn grid_search(
    scenario: Scenario,
    profile: &BoundsProfile,
    alpha: f64,
    gamma: f64,
    us: &[f64],
    mut g_of: impl FnMut(f64) -> Result<f64>,
) -> Result<RateCertificate> {
    let mut best: Option<RateCertificate> = None;
    let mut closest: Option<RateCertificate> = None;
    for &u in us {
        let gu = g_of(u)?;
        for eps in eps_grid() {
            let (lhs, rhs) = condition_sides(gu, profile.q_bar, alpha, gamma, u, eps)?;
            let cert = certificate(scenario, profile, alpha, gamma, u, eps, gu, lhs, rhs);
            if cert.valid {
                if best.as_ref().is_none_or(|b| cert.kappa > b.kappa) {
                    best = Some(cert);
                }
            } else if closest
                .as_ref()
                .is_none_or(|c| cert.condition_residual > c.condition_residual)
            {
                closest = Some(cert);
            }
        }
    }
    best.or(closest)
        .ok_or_else(|| domain("empty search grid".into()))
}

/// Largest `κ = (1−ε)u` on the `(u, ε)` grid satisfying the first-scenario
/// condition. If no grid point is valid, the least-violating one is returned
/// with `valid = false`.
pub fn best_exponential_s1(profile: &BoundsProfile, alpha: f64, gamma: f64) -> Result<RateCertificate> {
    if !profile.scenario1() {
        return Err(domain(format!("first scenario needs p̄ < 1/2 (p̄ = {})", profile.p_bar)));
    }
    let us = u_star(profile.p_bar, profile.q_bar)?.u_star;
    grid_search(Scenario::ExponentialS1, profile, alpha, gamma, &u_grid(us), |u| {
        big_g(u.min(us), profile.p_bar, profile.q_bar)
    })
}

/// Second-scenario grid search with the busy-period MGF `Ḡ` supplied by the
/// caller (typically a Monte Carlo or series estimate). `u` ranges over
/// `(0, u_max]` with `u_max < q̄`.
pub fn best_exponential_s2(
    profile: &BoundsProfile,
    alpha: f64,
    gamma: f64,
    u_max: f64,
    g_bar: impl FnMut(f64) -> Result<f64>,
) -> Result<RateCertificate> {
    if !(profile.q_bar > 0.0) || !(u_max > 0.0 && u_max < profile.q_bar) {
        return Err(domain(format!("need 0 < u_max < q̄ = {}", profile.q_bar)));
    }
    grid_search(Scenario::ExponentialS2, profile, alpha, gamma, &u_grid(u_max), g_bar)
}

/// `ln Σ_n w^n r_n(z)`, growing the truncation until a geometric tail bound
/// is below `1e-15` of the partial sum.
fn log_weighted_total(model: &ModelSpec, z: &[f64], log_w: f64, n_start: usize) -> std::result::Result<f64, ()> {
    let mut n_max = n_start.max(16);
    loop {
        let r = cumulative_ratio(model, z, n_max).map_err(|_| ())?;
        let terms: Vec<f64> = r
            .log_values()
            .iter()
            .enumerate()
            .map(|(n, l)| l + n as f64 * log_w)
            .collect();
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
        if r.support_end().is_some() {
            return Ok(log_sum);
        }
        let tail = &terms[n_max.saturating_sub(8)..];
        let rho = tail.windows(2).map(|w| (w[1] - w[0]).exp()).fold(0.0f64, f64::max);
        if rho < 1.0 - 1e-3 {
            let log_tail = terms[n_max] + (rho / (1.0 - rho)).ln();
            if log_tail - log_sum < (1e-15f64).ln() {
                return Ok(log_sum);
            }
        }
        if n_max >= MAX_TRUNCATION {
            return Err(());
        }
        n_max *= 4;
    }
}

/// Environment law used by the integrability check.
#[derive(Debug, Clone, Copy)]
pub enum EnvLaw<'a> {
    /// Finite chain: points and weights `v`.
    Jump { chain: &'a EnvChainSpec, v: &'a [f64] },
    Diffusive(&'a StationaryLaw),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntegrabilityReport {
    /// `(u, G(u), Σ_n G(u)^n ∫ r_n dν)` per grid point.
    pub values: Vec<(f64, f64, f64)>,
    pub sup: f64,
    /// `sup λ_{i−1}/μ_i ≤ p̄/(1−p̄)` on the probe set.
    pub sufficient_holds: bool,
    pub max_ratio: f64,
    pub sufficient_threshold: f64,
    /// `(p̄/(1−p̄))^{3/2}`.
    pub c: f64,
}

/// Checks `sup_u Σ_n G(u)^n ∫ r_n dν < ∞` on `u_grid`, and the simpler
/// sufficient ratio condition.
pub fn check_integrability_a43(
    model: &ModelSpec,
    law: EnvLaw<'_>,
    profile: &BoundsProfile,
    u_grid: &[f64],
    n_max: usize,
) -> Result<IntegrabilityReport> {
    let quad = QuadConfig::default();
    let mut values = Vec::with_capacity(u_grid.len());
    for &u in u_grid {
        let gu = big_g(u, profile.p_bar, profile.q_bar)?;
        let lw = gu.ln();
        let total = match law {
            EnvLaw::Jump { chain, v } => {
                let mut acc = 0.0;
                for (k, vz) in v.iter().enumerate() {
                    let l = log_weighted_total(model, chain.coords(k), lw, n_max)
                        .map_err(|_| ConvergenceError::Divergent { u })?;
                    acc += vz * l.exp();
                }
                acc
            }
            EnvLaw::Diffusive(law) => match law {
                StationaryLaw::PointMass { at } => log_weighted_total(model, at, lw, n_max)
                    .map_err(|_| ConvergenceError::Divergent { u })?
                    .exp(),
                _ => {
                    law.density(&vec![law.lower(0); law.dim()]).ok_or(DiffusiveError::NoDensity)?;
                    if law.dim() != 1 {
                        return Err(domain("integrability check supports one-dimensional densities".into()));
                    }
                    let mut failed = false;
                    let v = integrate(
                        |z| {
                            let d = law.density(&[z]).unwrap_or(0.0);
                            if d == 0.0 {
                                return 0.0;
                            }
                            match log_weighted_total(model, &[z], lw, n_max) {
                                Ok(l) => l.exp() * d,
                                Err(()) => {
                                    failed = true;
                                    f64::INFINITY
                                }
                            }
                        },
                        law.lower(0),
                        law.upper(0),
                        law.scale(0),
                        &quad,
                    );
                    if failed {
                        return Err(ConvergenceError::Divergent { u });
                    }
                    v.map_err(|_| ConvergenceError::Divergent { u })?
                }
            },
        };
        if !total.is_finite() {
            return Err(ConvergenceError::Divergent { u });
        }
        values.push((u, gu, total));
    }
    let sup = values.iter().map(|v| v.2).fold(0.0, f64::max);
    let threshold = profile.p_bar / (1.0 - profile.p_bar);
    Ok(IntegrabilityReport {
        values,
        sup,
        sufficient_holds: profile.max_ratio <= threshold,
        max_ratio: profile.max_ratio,
        sufficient_threshold: threshold,
        c: threshold.powf(1.5),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusyPeriodMgf {
    pub u: f64,
    pub estimate: MgfEstimate,
    pub replicas: usize,
    /// Continued-fraction value when requested (`None` if it was not
    /// requested or the MGF is infinite at `u`).
    pub series: Option<f64>,
    /// Whether the series lies within 3 standard errors of the estimate.
    pub agrees: Option<bool>,
}

/// `E[e^{uT}]` for the M/M/∞ busy period by the continued fraction
/// `x_n = nμ̄ / (λ̄ + nμ̄ − u − λ̄ x_{n+1})`, `Ḡ(u) = x_1`, where `x_n` is the
/// MGF of the time to move from `n` to `n − 1`. Truncated with `x_{N+1} = 1`,
/// doubling `N` until two successive values agree to 1e-14.
pub fn busy_period_series(lambda_bar: f64, mu_bar: f64, u: f64) -> Option<f64> {
    let eval = |depth: usize| -> Option<f64> {
        let mut x = 1.0;
        for n in (1..=depth).rev() {
            let nm = n as f64 * mu_bar;
            let den = lambda_bar + nm - u - lambda_bar * x;
            if !(den > 0.0) {
                return None;
            }
            x = nm / den;
        }
        Some(x)
    };
    let mut depth = 64 + (4.0 * (lambda_bar + u) / mu_bar) as usize;
    let mut prev = eval(depth)?;
    for _ in 0..20 {
        depth *= 2;
        let next = eval(depth)?;
        if (next - prev).abs() <= 1e-14 * next {
            return Some(next);
        }
        prev = next;
    }
    None
}

fn mminf(lambda_bar: f64, mu_bar: f64) -> ModelSpec {
    ModelSpec::new("mminf", move |_, _| lambda_bar, move |n, _| n as f64 * mu_bar)
}

/// Busy-period samples of the M/M/∞(λ̄, μ̄) queue started at 1.
pub fn busy_period_samples(lambda_bar: f64, mu_bar: f64, replicas: usize, seed: u64) -> Result<Vec<f64>> {
    let model = mminf(lambda_bar, mu_bar);
    let s = hitting_time(&model, &EnvKind::Fixed(vec![]), 1, &|n, _| n == 0, f64::INFINITY, replicas, seed)?;
    Ok(s.times)
}

/// Monte Carlo `Ḡ(u) = E[e^{uτ̄}]`, optionally cross-checked against the
/// continued fraction. Estimates on the first quarter, half and all of the
/// samples that keep increasing by more than three standard errors are
/// reported as suspected divergence.
pub fn busy_period_mgf(
    lambda_bar: f64,
    mu_bar: f64,
    u: f64,
    replicas: usize,
    seed: u64,
    with_series: bool,
) -> Result<BusyPeriodMgf> {
    if !(lambda_bar > 0.0 && mu_bar > 0.0 && u >= 0.0) || replicas < 8 {
        return Err(domain("busy period needs λ̄, μ̄ > 0, u ≥ 0 and at least 8 replicas".into()));
    }
    let times = busy_period_samples(lambda_bar, mu_bar, replicas, seed)?;
    from_busy_samples(&times, lambda_bar, mu_bar, u, with_series)
}

/// [`busy_period_mgf`] on precomputed samples (common random numbers across `u`).
pub fn from_busy_samples(times: &[f64], lambda_bar: f64, mu_bar: f64, u: f64, with_series: bool) -> Result<BusyPeriodMgf> {
    let est = mgf_estimate(times, u);
    let quarter = mgf_estimate(&times[..times.len() / 4], u);
    let half = mgf_estimate(&times[..times.len() / 2], u);
    if half.mean > quarter.mean + 3.0 * half.stderr.max(quarter.stderr)
        && est.mean > half.mean + 3.0 * est.stderr.max(half.stderr)
    {
        return Err(ConvergenceError::DivergenceSuspected { u });
    }
    let series = if with_series {
        busy_period_series(lambda_bar, mu_bar, u)
    } else {
        None
    };
    Ok(BusyPeriodMgf {
        u,
        estimate: est,
        replicas: times.len(),
        series,
        agrees: series.map(|s| (s - est.mean).abs() <= 3.0 * est.stderr),
    })
}

/// `(α, γ)` for the environment coupling tail `P(τ_env ≥ t) ≤ α e^{−γt}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvCouplingFit {
    pub alpha: f64,
    pub gamma: f64,
    pub fit: TailFit,
    pub samples: usize,
}

/// Meeting time of two independent copies of the chain frozen at level 0.
fn env_meeting_time<R: Rng + ?Sized>(rates: &EnvRates, mut a: usize, mut b: usize, rng: &mut R) -> f64 {
    let mut t = 0.0;
    while a != b {
        let (ra, rb) = (rates.out(a), rates.out(b));
        let total = ra + rb;
        if !(total > 0.0) {
            return f64::INFINITY;
        }
        t += -(1.0 - rng.random::<f64>()).ln() / total;
        if rng.random::<f64>() * total < ra {
            a = rates.jump(a, rng);
        } else {
            b = rates.jump(b, rng);
        }
    }
    t
}

/// Environment rates at level 0: `β_0 T_0(z, ·) / r_0 = β_0 T_0(z, ·)`.
struct EnvRates {
    t: nalgebra::DMatrix<f64>,
}

impl EnvRates {
    fn new(chain: &EnvChainSpec) -> Self {
        Self { t: chain.generator(0) }
    }

    fn out(&self, z: usize) -> f64 {
        -self.t[(z, z)]
    }

    fn jump<R: Rng + ?Sized>(&self, z: usize, rng: &mut R) -> usize {
        let row: Vec<f64> = (0..self.t.ncols()).map(|j| if j == z { 0.0 } else { self.t[(z, j)] }).collect();
        pick(&row, self.out(z), rng.random())
    }
}

/// Simulates environment coupling times from every ordered pair of distinct
/// states and fits the exponential tail of the pooled sample. `γ` is the
/// negated slope over the tail third of the survival curve; `α` is the
/// smallest constant (at least 1) with `P̂(τ > t) ≤ α e^{−γt}` at every
/// sample point carrying at least 10 survivors.
pub fn fit_env_coupling(chain: &EnvChainSpec, samples_per_pair: usize, seed: u64) -> Result<EnvCouplingFit> {
    let m = chain.len();
    if m < 2 {
        return Err(domain("environment coupling needs at least two states".into()));
    }
    let rates = EnvRates::new(chain);
    let mut rng = stream_rng(seed, 0);
    let mut times = Vec::with_capacity(samples_per_pair * m * (m - 1));
    for a in 0..m {
        for b in 0..m {
            if a != b {
                for _ in 0..samples_per_pair {
                    times.push(env_meeting_time(&rates, a, b, &mut rng));
                }
            }
        }
    }
    fit_coupling_times(&times)
}

/// `(α, γ)` from a sample of environment coupling times, as in
/// [`fit_env_coupling`].
pub fn fit_coupling_times(times: &[f64]) -> Result<EnvCouplingFit> {
    if times.iter().any(|t| !t.is_finite()) {
        return Err(domain("environment copies never meet".into()));
    }
    let (ts, ps) = survival_curve(times);
    let fit = fit_tail(&ts, &ps, TailModel::Exponential, FitRange::TailFraction(1.0 / 3.0))?;
    let gamma = -fit.slope;
    if !(gamma > 0.0) {
        return Err(domain(format!("fitted coupling tail does not decay (slope {})", fit.slope)));
    }
    let min_p = 10.0 / times.len() as f64;
    let alpha = ts
        .iter()
        .zip(&ps)
        .filter(|(_, p)| **p >= min_p)
        .map(|(t, p)| p * (gamma * t).exp())
        .fold(1.0f64, f64::max)
        .max(1.0 + 1e-9);
    Ok(EnvCouplingFit {
        alpha,
        gamma,
        fit,
        samples: times.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingSample {
    /// Coupling times of the uncensored runs, in replica order.
    pub times: Vec<f64>,
    pub censored: usize,
    /// Number of races `J` (environment coupling vs. first birth) per run.
    pub races: Vec<u32>,
    /// Exponential fit of `log P(τ > t)` over the tail third.
    pub tail: Option<TailFit>,
}

impl CouplingSample {
    /// Survival-curve slope test against `κ` with relative slack.
    pub fn slope_ok(&self, kappa: f64, slack: f64) -> Option<bool> {
        self.tail.as_ref().map(|f| f.slope <= -kappa * (1.0 - slack))
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let (ts, ps) = survival_curve(&self.times);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "survival"])?;
        for (t, p) in ts.iter().zip(&ps) {
            w.write_record([t.to_string(), p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One staged coupling run for a finite environment: both copies move
/// independently until they are simultaneously empty; then the environments
/// race to meet before either copy sees a birth. A won race couples the
/// copies; a lost one restarts the cycle.
#[allow(clippy::too_many_arguments)]
fn couple_once<R: Rng + ?Sized>(
    model: &ModelSpec,
    chain: &EnvChainSpec,
    a: (usize, usize),
    b: (usize, usize),
    horizon: f64,
    rng: &mut R,
) -> (Option<f64>, u32) {
    let mut ra = JumpRates::new(model, chain);
    let mut rb = JumpRates::new(model, chain);
    let (mut bufa, mut bufb) = (Vec::new(), Vec::new());
    let ((mut n1, mut z1), (mut n2, mut z2)) = (a, b);
    let mut t = 0.0;
    let mut races = 0u32;
    let mut racing = false;
    loop {
        if n1 == 0 && n2 == 0 {
            if !racing {
                racing = true;
                races += 1;
            }
            if z1 == z2 {
                return (Some(t), races);
            }
        }
        ra.fill(n1, z1, &mut bufa);
        rb.fill(n2, z2, &mut bufb);
        let (ta, tb): (f64, f64) = (bufa.iter().sum(), bufb.iter().sum());
        let total = ta + tb;
        if !(total > 0.0) {
            return (None, races);
        }
        t += -(1.0 - rng.random::<f64>()).ln() / total;
        if t > horizon {
            return (None, races);
        }
        let first = rng.random::<f64>() * total < ta;
        let (buf, tot, n, z) = if first {
            (&bufa, ta, &mut n1, &mut z1)
        } else {
            (&bufb, tb, &mut n2, &mut z2)
        };
        match pick(buf, tot, rng.random()) {
            0 => {
                *n += 1;
                racing = false;
            }
            1 => *n -= 1,
            k => *z = k - 2,
        }
    }
}

/// Coupling-time sample for two copies of the joint chain started at `a` and
/// `b` (`(n, z_index)` pairs), with replicas on independent streams.
pub fn couple_exponential(
    model: &ModelSpec,
    chain: &EnvChainSpec,
    a: (usize, usize),
    b: (usize, usize),
    replicas: usize,
    horizon: f64,
    seed: u64,
) -> Result<CouplingSample> {
    if a.1 >= chain.len() || b.1 >= chain.len() {
        return Err(JumpError::BadState(a.1.max(b.1)).into());
    }
    let runs: Vec<(Option<f64>, u32)> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r);
            if a == b {
                return (Some(0.0), 0);
            }
            couple_once(model, chain, a, b, horizon, &mut rng)
        })
        .collect();
    let mut times = Vec::with_capacity(replicas);
    let mut races = Vec::with_capacity(replicas);
    let mut censored = 0;
    for (t, j) in runs {
        races.push(j);
        match t {
            Some(t) => times.push(t),
            None => censored += 1,
        }
    }
    if times.is_empty() {
        return Err(ConvergenceError::HorizonExceeded {
            censored,
            total: replicas,
        });
    }
    let (ts, ps) = survival_curve(&times);
    let tail = fit_tail(&ts, &ps, TailModel::Exponential, FitRange::TailFraction(1.0 / 3.0)).ok();
    Ok(CouplingSample {
        times,
        censored,
        races,
        tail,
    })
}

/// Coupling time of two one-dimensional diffusive-environment copies. The
/// environments are reflection-coupled (mirrored noise) while both copies are
/// empty, and merge once they cross; otherwise the copies move independently.
#[allow(clippy::too_many_arguments)]
pub fn couple_diffusive(
    model: &ModelSpec,
    env: &DiffusionSpec,
    sim: &SimConfig,
    a: (usize, f64),
    b: (usize, f64),
    replicas: usize,
    horizon: f64,
    seed: u64,
) -> Result<CouplingSample> {
    if env.dim() != 1 {
        return Err(domain("diffusive coupling is implemented for one-dimensional environments".into()));
    }
    sim.validate()?;
    let runs: Vec<std::result::Result<(Option<f64>, u32), ConvergenceError>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r);
            let mut s1 = Stepper::new(env, sim.speed_cap);
            let mut s2 = Stepper::new(env, sim.speed_cap);
            let (mut n1, mut n2) = (a.0, b.0);
            let (mut z1, mut z2) = (vec![a.1], vec![b.1]);
            let mut t = 0.0;
            let mut races = 0u32;
            let mut racing = false;
            loop {
                if n1 == n2 && z1 == z2 {
                    return Ok((Some(t), races));
                }
                if t >= horizon {
                    return Ok((None, races));
                }
                let both_empty = n1 == 0 && n2 == 0;
                if both_empty && !racing {
                    racing = true;
                    races += 1;
                }
                if both_empty {
                    // Reflection coupling at equal speeds: mirror one Gaussian draw.
                    let speed = model.beta(0);
                    let h = sim.dt * speed;
                    let before = z1[0] - z2[0];
                    let noise: f64 = rng.sample(rand_distr::StandardNormal);
                    let mut d1 = vec![0.0];
                    let mut d2 = vec![0.0];
                    env.drift.eval(&z1, &mut d1);
                    env.drift.eval(&z2, &mut d2);
                    let sd = env.sigma[(0, 0)] * h.sqrt();
                    z1[0] += d1[0] * h + sd * noise;
                    z2[0] += d2[0] * h - sd * noise;
                    let mut y = vec![0.0];
                    env.domain.reflect(&mut z1, 0, &mut y)?;
                    env.domain.reflect(&mut z2, 0, &mut y)?;
                    if (z1[0] - z2[0]) * before <= 0.0 {
                        z2[0] = z1[0];
                    }
                } else {
                    for (n, z, s) in [(n1, &mut z1, &mut s1), (n2, &mut z2, &mut s2)] {
                        let speed = model.beta(n) * (-cumulative_ratio(model, z, n)?.log_value(n)).exp();
                        let mut remaining = sim.dt;
                        while remaining > 0.0 {
                            let real = (sim.h_env / speed).min(remaining);
                            s.step(z, real, n, speed, &mut rng)?;
                            remaining = if real >= remaining { 0.0 } else { remaining - real };
                        }
                    }
                }
                for (n, z) in [(&mut n1, &z1), (&mut n2, &z2)] {
                    let (l, m) = (model.birth_rate(*n, z), model.death_rate(*n, z));
                    if (l + m) * sim.dt > crate::joint::MAX_STEP_PROBABILITY {
                        return Err(JointError::RateTooLargeForStep { n: *n, prob: (l + m) * sim.dt }.into());
                    }
                    let u: f64 = rng.random();
                    if u < l * sim.dt {
                        *n += 1;
                        racing = false;
                    } else if u < (l + m) * sim.dt && *n > 0 {
                        *n -= 1;
                    }
                }
                t += sim.dt;
            }
        })
        .collect();
    let mut times = Vec::new();
    let mut races = Vec::new();
    let mut censored = 0;
    for r in runs {
        let (t, j) = r?;
        races.push(j);
        match t {
            Some(t) => times.push(t),
            None => censored += 1,
        }
    }
    if times.is_empty() {
        return Err(ConvergenceError::HorizonExceeded {
            censored,
            total: replicas,
        });
    }
    let (ts, ps) = survival_curve(&times);
    let tail = fit_tail(&ts, &ps, TailModel::Exponential, FitRange::TailFraction(1.0 / 3.0)).ok();
    Ok(CouplingSample {
        times,
        censored,
        races,
        tail,
    })
}

/// Polynomial-rate certificate from Lyapunov drift.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCertificate {
    /// `C̄_V = inf_{1≤n≤n_max} −L̄V(n)`.
    pub c_v: f64,
    pub argmin: usize,
    /// `−L̄V(n)` for `n = 1..=n_max`.
    pub drift: Vec<f64>,
    /// `−L̄V` is nondecreasing over the last quarter of the range, so the
    /// infimum is plausibly attained inside it.
    pub inf_in_range: bool,
    pub certificate: RateCertificate,
}

/// Checks `λ̄_n(V(n+1)−V(n)) + μ̄_n(V(n−1)−V(n)) ≤ −C̄_V` for `1 ≤ n ≤ n_max`.
///
/// ```
/// use bdenv::convergence::lyapunov_certificate;
/// let cert = lyapunov_certificate(|_| 1.0, |_| 2.0, |n| n as f64, "n", 100).unwrap();
/// assert!((cert.c_v - 1.0).abs() < 1e-15);
/// ```
pub fn lyapunov_certificate(
    lambda_bar: impl Fn(usize) -> f64,
    mu_bar: impl Fn(usize) -> f64,
    v: impl Fn(usize) -> f64,
    v_description: &str,
    n_max: usize,
) -> Result<LyapunovCertificate> {
    if n_max == 0 {
        return Err(domain("n_max must be at least 1".into()));
    }
    if v(0) != 0.0 {
        return Err(domain(format!("V(0) must be 0, got {}", v(0))));
    }
    if (0..=n_max).any(|n| v(n + 1) < v(n)) {
        return Err(domain("V must be nondecreasing".into()));
    }
    let drift: Vec<f64> = (1..=n_max)
        .map(|n| -(lambda_bar(n) * (v(n + 1) - v(n)) + mu_bar(n) * (v(n - 1) - v(n))))
        .collect();
    let (k, c_v) = drift
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(bk, bv), (k, d)| if *d < bv { (k, *d) } else { (bk, bv) });
    if !(c_v > 0.0) {
        return Err(ConvergenceError::NotLyapunov { n: k + 1, value: c_v });
    }
    let tail = &drift[drift.len() - drift.len().div_ceil(4)..];
    let inf_in_range = tail.windows(2).all(|w| w[1] >= w[0]);
    let certificate = RateCertificate {
        scenario: Scenario::Polynomial,
        alpha: f64::NAN,
        gamma: f64::NAN,
        u: f64::NAN,
        epsilon: f64::NAN,
        kappa: 0.0,
        g_value: f64::NAN,
        lhs: f64::NAN,
        rhs: f64::NAN,
        condition_residual: c_v,
        theta_bar: f64::NAN,
        v_description: v_description.to_string(),
        c_v,
        probe_certified: true,
        valid: inf_in_range,
    };
    Ok(LyapunovCertificate {
        c_v,
        argmin: k + 1,
        drift,
        inf_in_range,
        certificate,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingRow {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub bound: f64,
    pub ok: bool,
}

/// Monte Carlo `E_n[τ̄_0]` for the dominating chain against `V(n)/C̄_V`.
pub fn hitting_bound_table(
    dominator: &ModelSpec,
    v: impl Fn(usize) -> f64,
    c_v: f64,
    starts: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<Vec<HittingRow>> {
    let mut rows = Vec::with_capacity(starts.len());
    for (i, &n) in starts.iter().enumerate() {
        let s = hitting_time(
            dominator,
            &EnvKind::Fixed(vec![]),
            n,
            &|k, _| k == 0,
            f64::INFINITY,
            replicas,
            seed.wrapping_add(i as u64 * 0x9E37_79B9),
        )?;
        let bound = v(n) / c_v;
        rows.push(HittingRow {
            n,
            mean: s.mean,
            stderr: s.stderr,
            bound,
            ok: s.mean <= bound + 3.0 * s.stderr,
        });
    }
    Ok(rows)
}

/// [`hitting_bound_table`], failing on the first violated row.
pub fn hitting_bound_check(
    dominator: &ModelSpec,
    v: impl Fn(usize) -> f64,
    c_v: f64,
    starts: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<Vec<HittingRow>> {
    let rows = hitting_bound_table(dominator, v, c_v, starts, replicas, seed)?;
    if let Some(r) = rows.iter().find(|r| !r.ok) {
        return Err(ConvergenceError::BoundViolated {
            n: r.n,
            mean: r.mean,
            stderr: r.stderr,
            bound: r.bound,
        });
    }
    Ok(rows)
}

/// `2(E_π̄[V] + V(n))/C̄_V`, the constant in the `1/t` bound for the dominator.
pub fn polynomial_bound_constant(
    dominator: &ModelSpec,
    v: impl Fn(usize) -> f64,
    c_v: f64,
    n: usize,
    n_max: usize,
) -> Result<f64> {
    let w = normalized_weights(dominator, &[], n_max, 1e-12)?;
    let ev: f64 = w.kappa.iter().enumerate().map(|(k, p)| p * v(k)).sum();
    Ok(2.0 * (ev + v(n)) / c_v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayCurve {
    pub t: Vec<f64>,
    pub tv: Vec<f64>,
    /// Expected TV of an exact sample of the same size from the reference.
    pub noise_floor: f64,
    /// `C/t` when a constant was supplied.
    pub bound: Option<Vec<f64>>,
    /// Power-law fit of `TV(t)` over the points in the window that sit above
    /// three times the noise floor; `exponent = −slope`.
    pub fit: Option<TailFit>,
    pub exponent: Option<f64>,
    pub replicas: usize,
}

impl DecayCurve {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "tv", "bound"])?;
        for (i, (t, tv)) in self.t.iter().zip(&self.tv).enumerate() {
            let b = self.bound.as_ref().map(|b| b[i].to_string()).unwrap_or_default();
            w.write_record([t.to_string(), tv.to_string(), b])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `E[TV]` of `R` exact draws from `p`: `(1/2) Σ √(2 p_i(1−p_i)/(πR))`.
pub fn tv_noise_floor(p: &[f64], replicas: usize) -> f64 {
    let r = replicas as f64;
    0.5 * p
        .iter()
        .map(|pi| (2.0 * pi * (1.0 - pi) / (std::f64::consts::PI * r)).sqrt())
        .sum::<f64>()
}

/// Empirical `TV(t)` between the law of `(N(t), Z(t))` from a fixed start and
/// `reference` (cells `n·m + z` for `n ≤ n_cap`, overflow last), on `t_grid`.
#[allow(clippy::too_many_arguments)]
pub fn tv_decay(
    model: &ModelSpec,
    chain: &EnvChainSpec,
    start: (usize, usize),
    reference: &[f64],
    n_cap: usize,
    t_grid: &[f64],
    replicas: usize,
    seed: u64,
    window: (f64, f64),
    bound_constant: Option<f64>,
) -> Result<DecayCurve> {
    let m = chain.len();
    let cells = (n_cap + 1) * m + 1;
    if reference.len() != cells {
        return Err(StatsError::CellMismatch {
            left: reference.len(),
            right: cells,
        }
        .into());
    }
    if t_grid.windows(2).any(|w| !(w[0] < w[1])) || t_grid.is_empty() {
        return Err(domain("t grid must be nonempty and increasing".into()));
    }
    let cell = |n: usize, z: usize| if n <= n_cap { n * m + z } else { cells - 1 };
    let per_replica: Vec<Vec<u32>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r);
            let mut rates = JumpRates::new(model, chain);
            let mut buf = Vec::new();
            let (mut n, mut z) = start;
            let mut t = 0.0;
            let mut out = Vec::with_capacity(t_grid.len());
            let mut next = 0;
            while next < t_grid.len() {
                rates.fill(n, z, &mut buf);
                let total: f64 = buf.iter().sum();
                let hold = if total > 0.0 {
                    -(1.0 - rng.random::<f64>()).ln() / total
                } else {
                    f64::INFINITY
                };
                while next < t_grid.len() && t_grid[next] < t + hold {
                    out.push(cell(n, z) as u32);
                    next += 1;
                }
                if next == t_grid.len() {
                    break;
                }
                t += hold;
                match pick(&buf, total, rng.random()) {
                    0 => n += 1,
                    1 => n -= 1,
                    k => z = k - 2,
                }
            }
            out
        })
        .collect();
    let mut tv = Vec::with_capacity(t_grid.len());
    let mut counts = vec![0u64; cells];
    for k in 0..t_grid.len() {
        counts.iter_mut().for_each(|c| *c = 0);
        for run in &per_replica {
            counts[run[k] as usize] += 1;
        }
        let p: Vec<f64> = counts.iter().map(|c| *c as f64 / replicas as f64).collect();
        tv.push(tv_distance(&p, reference)?);
    }
    let noise_floor = tv_noise_floor(reference, replicas);
    let (xs, ys): (Vec<f64>, Vec<f64>) = t_grid
        .iter()
        .zip(&tv)
        .filter(|(t, v)| **t >= window.0 && **t <= window.1 && **v > 3.0 * noise_floor)
        .map(|(t, v)| (*t, *v))
        .unzip();
    let fit = fit_tail(&xs, &ys, TailModel::Power, FitRange::All).ok();
    Ok(DecayCurve {
        t: t_grid.to_vec(),
        tv,
        noise_floor,
        bound: bound_constant.map(|c| t_grid.iter().map(|t| c / t).collect()),
        exponent: fit.as_ref().map(|f| -f.slope),
        fit,
        replicas,
    })
}

/// `points` log-spaced times in `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..points)
        .map(|k| (a + (b - a) * k as f64 / (points - 1).max(1) as f64).exp())
        .collect()
}

/// Monte Carlo `E[s^τ]` for the return time to 0 of the walk started at 1
/// that steps up with probability `p̄`. Walks longer than `max_steps` count
/// as `s^{max_steps}` and are reported as truncated.
pub fn walk_return_pgf(p_bar: f64, s: f64, samples: usize, seed: u64, max_steps: u64) -> (MeanEstimate, usize) {
    let mut rng = stream_rng(seed, 0);
    let mut truncated = 0;
    let vals: Vec<f64> = (0..samples)
        .map(|_| {
            let (mut pos, mut steps) = (1u64, 0u64);
            while pos > 0 && steps < max_steps {
                if rng.random::<f64>() < p_bar {
                    pos += 1;
                } else {
                    pos -= 1;
                }
                steps += 1;
            }
            if pos > 0 {
                truncated += 1;
            }
            s.powf(steps as f64)
        })
        .collect();
    (mean_stderr(&vals), truncated)
}

/// Pathwise check that the embedded birth-death chain of the joint process
/// stays below the `p̄`-walk on shared uniforms until it empties. Counts
/// steps with `N > W`.
pub fn domination_pwalk(
    model: &ModelSpec,
    chain: &EnvChainSpec,
    p_bar: f64,
    n0: usize,
    excursions: usize,
    seed: u64,
) -> crate::joint::DominationReport {
    let mut rng = stream_rng(seed, 0);
    let mut rates = JumpRates::new(model, chain);
    let mut buf = Vec::new();
    let mut z = 0usize;
    let mut events = 0u64;
    let mut violations = 0u64;
    for _ in 0..excursions {
        let (mut n, mut w) = (n0, n0 as u64);
        while n > 0 {
            rates.fill(n, z, &mut buf);
            let (l, m) = (buf[0], buf[1]);
            let env: f64 = buf[2..].iter().sum();
            let total = l + m + env;
            // Environment moves between birth-death events.
            if rng.random::<f64>() * total < env {
                z = pick(&buf[2..], env, rng.random());
                continue;
            }
            let u: f64 = rng.random();
            if u < l / (l + m) {
                n += 1;
            } else {
                n -= 1;
            }
            if u < p_bar {
                w += 1;
            } else {
                w = w.saturating_sub(1);
            }
            events += 1;
            if n as u64 > w {
                violations += 1;
            }
        }
    }
    crate::joint::DominationReport {
        excursions,
        events,
        violations,
    }
}

/// Monte Carlo checks of the two inequalities behind `θ`: for `ξ ~ Exp(β)` and
/// `η` with tail exactly `min(1, α e^{−γt})`,
/// `P(η < ξ) ≥ α^{−β/γ} γ/(β+γ)` and `E[e^{a(ξ∧η)}] ≤ θ(α, β, γ, a)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RaceCheck {
    pub p_eta_first: MeanEstimate,
    pub p_bound: f64,
    pub mgf: MgfEstimate,
    pub theta: f64,
    pub p_ok: bool,
    pub mgf_ok: bool,
}

pub fn race_check(alpha: f64, beta: f64, gamma: f64, a: f64, samples: usize, seed: u64) -> Result<RaceCheck> {
    let th = theta(alpha, beta, gamma, a)?;
    let mut rng = stream_rng(seed, 0);
    let exp1 = Exp::new(1.0).map_err(|e| domain(e.to_string()))?;
    let mut first = Vec::with_capacity(samples);
    let mut mins = Vec::with_capacity(samples);
    for _ in 0..samples {
        let xi = exp1.sample(&mut rng) / beta;
        // P(η > t) = min(1, α e^{−γt}): η = (ln α + E)/γ.
        let eta = (alpha.ln() + exp1.sample(&mut rng)) / gamma;
        first.push(if eta < xi { 1.0 } else { 0.0 });
        mins.push(xi.min(eta));
    }
    let p = mean_stderr(&first);
    let p_bound = alpha.powf(-beta / gamma) * gamma / (beta + gamma);
    let mgf = mgf_estimate(&mins, a);
    Ok(RaceCheck {
        p_ok: p.mean >= p_bound - 3.0 * p.stderr,
        mgf_ok: mgf.mean <= th + 3.0 * mgf.stderr,
        p_eta_first: p,
        p_bound,
        mgf,
        theta: th,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jump::{solve_common_v, EnvState};
    use crate::model::{catalog, ParamMap, RateParam, Variability};
    use nalgebra::DMatrix;
    use proptest::prelude::{prop_assert, proptest};
    use rand::Rng;

    fn two_state(a: f64) -> EnvChainSpec {
        EnvChainSpec::scaled(
            vec![EnvState::new("slow", vec![1.0]), EnvState::new("fast", vec![2.0])],
            DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0]),
            Variability::Geometric(a),
        )
    }

    /// M/M/1 with `λ = 0.3 z`, `μ = z`: the load is 0.3 in every environment.
    fn mm1_rho(rho: f64) -> ModelSpec {
        let mut p = ParamMap::new();
        p.insert("lambda".into(), RateParam::Coord { coord: 0, scale: rho, offset: 0.0 });
        p.insert("mu".into(), RateParam::coord(0));
        catalog("mm1", &p).unwrap().with_variability(Variability::Geometric(rho))
    }

    #[test]
    fn theta_examples() {
        assert_eq!(theta(2.0, 1.0, 1.0, 0.0).unwrap(), 1.0);
        let t = theta(2.0, 1.0, 1.0, 0.5).unwrap();
        assert!(t > 1.0 && t < 2.0, "{t}");
        assert!(theta(1.0, 1.0, 1.0, 0.1).is_err());
        assert!(theta(2.0, 1.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn g_examples() {
        for p in [0.1, 0.25, 0.4] {
            assert_eq!(g(1.0, p).unwrap(), 1.0);
            let b = 4.0 * p * (1.0 - p);
            let edge = g(b.powf(-0.5), p).unwrap();
            assert!((edge - ((1.0 - p) / p).sqrt()).abs() < 1e-12);
        }
        assert!((g(1.0 / 0.75f64.sqrt(), 0.25).unwrap() - 3f64.sqrt()).abs() < 1e-12);
        assert!(g(2.0, 0.25).is_err());
        // The textbook form agrees away from the singular points.
        let (p, s): (f64, f64) = (0.3, 1.05);
        let b = 4.0 * p * (1.0 - p);
        let naive = (1.0 - (1.0 - b * s * s).sqrt()) / (2.0 * p * s);
        assert!((g(s, p).unwrap() - naive).abs() < 1e-14);
        assert!(g(1e-300, 0.3).unwrap() > 0.0);
    }

    #[test]
    fn g_is_increasing() {
        let p: f64 = 0.3;
        let top = (4.0 * p * (1.0 - p)).powf(-0.5);
        let vals: Vec<f64> = (1..=1000).map(|k| g(top * k as f64 / 1000.0, p).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn u_star_examples() {
        let us = u_star(0.25, 1.0).unwrap();
        assert!((us.u_star - (1.0 - 0.75f64.sqrt())).abs() < 1e-15);
        assert!((us.u_star - 0.133975).abs() < 1e-6);
        // Substitution: q̄/(q̄ − u*) = b^{-1/2}.
        assert!((1.0 / (1.0 - us.u_star) - 0.75f64.powf(-0.5)).abs() < 1e-12);
        assert!((us.g_at_u_star - 3f64.sqrt()).abs() < 1e-12);
        assert!((u_star(0.25, 2.0).unwrap().u_star - 2.0 * us.u_star).abs() < 1e-15);
        assert!(u_star(0.5 - 1e-12, 1.0).unwrap().u_star < 1e-5);
        assert_eq!(big_g(0.0, 0.25, 1.0).unwrap(), 1.0);
        let gs: Vec<f64> = (0..=100).map(|k| big_g(us.u_star * k as f64 / 100.0, 0.25, 1.0).unwrap()).collect();
        assert!(gs.windows(2).all(|w| w[1] > w[0]));
    }

    fn profile(p: f64, q: f64) -> BoundsProfile {
        BoundsProfile {
            q_bar: q,
            p_bar: p,
            lambda_bar: p * q,
            max_ratio: p / (1.0 - p),
            n_max: 1,
            probes: 1,
        }
    }

    #[test]
    fn exponential_condition_limits() {
        let prof = profile(0.25, 1.0);
        let near_zero = check_exponential_condition(&prof, 2.0, 1.0, 1e-8, 0.5).unwrap();
        assert!(near_zero.valid && near_zero.lhs < near_zero.rhs && near_zero.rhs > 1.0);
        let us = u_star(0.25, 1.0).unwrap().u_star;
        let far = check_exponential_condition(&prof, 2.0, 1.0, us, 1.0 - 1e-9).unwrap();
        assert!(far.valid && far.kappa < 1e-9);
        let best = best_exponential_s1(&prof, 2.0, 1.0).unwrap();
        assert!(best.valid && best.kappa > 0.0, "{best:?}");
        assert!(best.u <= us * (1.0 + 1e-12));
    }

    #[test]
    fn bounds_for_constant_load() {
        let model = mm1_rho(0.3);
        let prof = bounds_profile(&model, &[vec![1.0], vec![2.0]], 50).unwrap();
        assert!((prof.q_bar - 1.3).abs() < 1e-12);
        assert!((prof.p_bar - 0.3 / 1.3).abs() < 1e-12);
        assert!((prof.lambda_bar - 0.6).abs() < 1e-12);
        assert!((prof.max_ratio - 0.3).abs() < 1e-12);
    }

    #[test]
    fn sufficient_condition_example() {
        let model = mm1_rho(0.3);
        let mut prof = bounds_profile(&model, &[vec![1.0], vec![2.0]], 50).unwrap();
        prof.p_bar = 0.25;
        let chain = two_state(0.3);
        let v = solve_common_v(&chain, &[0, 1, 5]).unwrap();
        let rep = check_integrability_a43(&model, EnvLaw::Jump { chain: &chain, v: &v }, &prof, &[0.0, 0.05], 200).unwrap();
        assert!(rep.sufficient_holds);
        assert!((rep.sufficient_threshold - 1.0 / 3.0).abs() < 1e-15);
        assert!((rep.c - (1.0f64 / 3.0).powf(1.5)).abs() < 1e-15);
        // u = 0: Σ_n r_n = 1/(1 − 0.3) in every state.
        assert!((rep.values[0].2 - 1.0 / 0.7).abs() < 1e-12);
    }

    #[test]
    fn integrability_boundary_for_rbm_arrivals() {
        let mut p = ParamMap::new();
        p.insert("lambda".into(), RateParam::coord(0));
        p.insert("mu".into(), 2.0.into());
        let model = catalog("mminf", &p).unwrap();
        let law = StationaryLaw::Exponential { rate: 1.0, shift: 0.0 };
        let prof = profile(0.25, 1.0);
        let us = u_star(0.25, 1.0).unwrap().u_star;
        // Finite iff 2c/σ² − G(u)/μ > 0, and then equal to α/(α − G/μ).
        let rep = check_integrability_a43(&model, EnvLaw::Diffusive(&law), &prof, &[0.0, us / 2.0, us], 64).unwrap();
        for (_, gu, total) in &rep.values {
            assert!((total - 1.0 / (1.0 - gu / 2.0)).abs() < 1e-8, "{gu} {total}");
        }
        let mut p = ParamMap::new();
        p.insert("lambda".into(), RateParam::coord(0));
        p.insert("mu".into(), 1.5.into());
        let tight = catalog("mminf", &p).unwrap();
        // G(u*) = √3 > 1.5, so the sum diverges at u*.
        let err = check_integrability_a43(&tight, EnvLaw::Diffusive(&law), &prof, &[us], 64).unwrap_err();
        assert!(matches!(err, ConvergenceError::Divergent { .. }));
    }

    #[test]
    fn busy_period_mgf_properties() {
        let times = busy_period_samples(1.0, 2.0, 20_000, 1).unwrap();
        let at0 = from_busy_samples(&times, 1.0, 2.0, 0.0, false).unwrap();
        assert_eq!(at0.estimate.mean, 1.0);
        let a = from_busy_samples(&times, 1.0, 2.0, 0.1, true).unwrap();
        let b = from_busy_samples(&times, 1.0, 2.0, 0.3, true).unwrap();
        assert!(a.estimate.mean <= b.estimate.mean);
        assert_eq!(a.agrees, Some(true), "{a:?}");
        assert_eq!(b.agrees, Some(true), "{b:?}");
        let other = busy_period_mgf(1.0, 2.0, 0.1, 20_000, 2, false).unwrap();
        let diff = (other.estimate.mean - a.estimate.mean).abs();
        assert!(diff < 3.0 * (other.estimate.stderr.powi(2) + a.estimate.stderr.powi(2)).sqrt());
    }

    #[test]
    fn series_matches_mean_busy_period() {
        // d/du Ḡ at 0 is E[τ̄] = (e^{λ/μ} − 1)/λ.
        let h = 1e-6;
        let d = (busy_period_series(1.0, 1.0, h).unwrap() - busy_period_series(1.0, 1.0, -h).unwrap()) / (2.0 * h);
        assert!((d - (std::f64::consts::E - 1.0)).abs() < 1e-6);
        assert_eq!(busy_period_series(1.0, 1.0, 0.0), Some(1.0));
    }

    #[test]
    fn lyapunov_examples() {
        let c = lyapunov_certificate(|_| 1.0, |_| 3.0, |n| n as f64, "V(n) = n", 50).unwrap();
        assert!((c.c_v - 2.0).abs() < 1e-15);
        let sq = lyapunov_certificate(|_| 1.0, |n| 1.0 + (n as f64).sqrt(), |n| n as f64, "V(n) = n", 200).unwrap();
        assert!((sq.c_v - 1.0).abs() < 1e-15);
        assert_eq!(sq.argmin, 1);
        assert!(sq.inf_in_range);
        assert!(matches!(
            lyapunov_certificate(|_| 1.0, |_| 2.0, |_| 0.0, "0", 10),
            Err(ConvergenceError::NotLyapunov { .. })
        ));
    }

    #[test]
    fn hitting_bounds_for_mm1_dominator() {
        let dom = ModelSpec::new("mm1", |_, _| 1.0, |_, _| 2.0);
        let rows = hitting_bound_check(&dom, |n| n as f64, 1.0, &[0, 1, 2, 5], 5000, 3).unwrap();
        assert_eq!(rows[0].mean, 0.0);
        for r in &rows[1..] {
            assert!((r.mean - r.n as f64).abs() < 3.0 * r.stderr + 1e-12, "{r:?}");
        }
        let sq = ModelSpec::new("sqrt", |_, _| 1.0, |n, _| 1.0 + (n as f64).sqrt());
        let rows = hitting_bound_check(&sq, |n| n as f64, 1.0, &[5], 5000, 4).unwrap();
        assert!(rows[0].ok);
    }

    #[test]
    fn walk_pgf_matches_g() {
        for s in [0.5, 1.05, 1.08] {
            let (est, truncated) = walk_return_pgf(0.3, s, 200_000, 11, 100_000);
            assert_eq!(truncated, 0);
            let exact = g(s, 0.3).unwrap();
            assert!((est.mean - exact).abs() < 3.0 * est.stderr, "s = {s}: {est:?} vs {exact}");
        }
    }

    #[test]
    fn race_inequalities() {
        let rc = race_check(2.0, 1.0, 1.5, 0.4, 200_000, 5).unwrap();
        assert!(rc.p_ok && rc.mgf_ok, "{rc:?}");
    }

    #[test]
    fn coupling_basics() {
        let model = mm1_rho(0.3);
        let chain = two_state(0.3);
        let same = couple_exponential(&model, &chain, (2, 1), (2, 1), 10, 1e3, 0).unwrap();
        assert!(same.times.iter().all(|t| *t == 0.0));
        let fit = fit_env_coupling(&chain, 20_000, 1).unwrap();
        // Independent copies of the two-state chain meet at rate 1 + 2.
        assert!((fit.gamma - 3.0).abs() < 0.3, "{fit:?}");
        assert!(fit.alpha >= 1.0);
    }

    #[test]
    fn frozen_coupling_is_the_joint_emptying_time() {
        let model = mm1_rho(0.3);
        let chain = EnvChainSpec::frozen(vec![EnvState::new("only", vec![1.0])]);
        let c = couple_exponential(&model, &chain, (3, 0), (0, 0), 4000, 1e4, 2).unwrap();
        // Oracle: direct simulation of two independent copies until both are empty.
        let mut rng = stream_rng(99, 0);
        let direct: Vec<f64> = (0..4000)
            .map(|_| {
                let (mut a, mut b, mut t) = (3usize, 0usize, 0.0);
                while a + b > 0 {
                    let ra = 0.3 + if a > 0 { 1.0 } else { 0.0 };
                    let rb = 0.3 + if b > 0 { 1.0 } else { 0.0 };
                    t += -(1.0 - rng.random::<f64>()).ln() / (ra + rb);
                    let u = rng.random::<f64>() * (ra + rb);
                    let (n, u) = if u < ra { (&mut a, u) } else { (&mut b, u - ra) };
                    if u < 0.3 { *n += 1 } else { *n -= 1 }
                }
                t
            })
            .collect();
        let x = mean_stderr(&c.times);
        let y = mean_stderr(&direct);
        assert!((x.mean - y.mean).abs() < 3.0 * (x.stderr.powi(2) + y.stderr.powi(2)).sqrt(), "{x:?} {y:?}");
    }

    #[test]
    fn pwalk_domination_has_no_violations() {
        let model = mm1_rho(0.3);
        let chain = two_state(0.3);
        let rep = domination_pwalk(&model, &chain, 0.3 / 1.3, 1, 2000, 8);
        assert_eq!(rep.violations, 0);
    }

    #[test]
    fn decay_from_stationary_start_stays_at_noise() {
        let model = ModelSpec::new("mm1", |_, _| 0.5, |_, _| 1.0);
        let chain = EnvChainSpec::frozen(vec![EnvState::new("only", vec![])]);
        let k = normalized_weights(&model, &[], 30, 1e-6).unwrap().kappa;
        let mut reference = k.clone();
        reference.push((1.0 - k.iter().sum::<f64>()).max(0.0));
        let grid = log_grid(1.0, 10.0, 5);
        // Start in the most likely state; TV is small but not zero at t = 1.
        let curve = tv_decay(&model, &chain, (0, 0), &reference, 30, &grid, 4000, 1, (1.0, 10.0), None).unwrap();
        assert!(curve.tv.last().unwrap() < &(4.0 * curve.noise_floor), "{curve:?}");
    }

    proptest! {
        #[test]
        fn theta_monotone_and_dominated(alpha in 1.01f64..10.0, beta in 0.1f64..5.0, gamma in 0.1f64..5.0, f1 in 0.0f64..0.99, f2 in 0.0f64..0.99) {
            let (a1, a2) = (beta * f1.min(f2), beta * f1.max(f2));
            let t1 = theta(alpha, beta, gamma, a1).unwrap();
            let t2 = theta(alpha, beta, gamma, a2).unwrap();
            prop_assert!(t1 <= t2 * (1.0 + 1e-12));
            prop_assert!(t2 <= beta / (beta - a2) * (1.0 + 1e-12));
        }
    }
}
