//! Simulation of the joint process `(N, Z)` in a diffusive environment, and
//! hitting times for every environment kind.
//!
//! The exact joint process has no tractable exact sampler, so each step of
//! length `dt` is split: the environment first moves with its speed
//! `β_n / r_n(z)` frozen at the current state, then the birth-death component
//! makes at most one transition with probabilities `λ_n(z) dt` and `μ_n(z) dt`.
//!
//! The speed can be huge where `r_n(z)` is tiny (e.g. small arrival rates at
//! high levels). The environment part of a step is therefore cut into
//! substeps of at most `h_env` units of environment time, re-freezing the
//! speed before each one. Near-degenerate states are crossed in a handful of
//! substeps that consume almost no real time.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusive::{
    compute_xi_diffusive, DiffusionSpec, DiffusiveError, StationaryLaw, Stepper, XiConfig,
};
use crate::jump::{pick, EnvChainSpec, JumpError, JumpRates};
use crate::model::{cumulative_ratio, ModelError, ModelSpec};
use crate::quadrature::integrate_vec;
use crate::rng::stream_rng;
use crate::stats::{mean_stderr, StatsError};

/// Largest `(λ + μ) dt` a step may carry before the one-transition
/// approximation is considered biased.
pub const MAX_STEP_PROBABILITY: f64 = 0.1;

#[derive(Debug, Error)]
pub enum JointError {
    #[error(transparent)]
    Diffusive(#[from] DiffusiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Jump(#[from] JumpError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("(λ + μ) dt = {prob:.3} > {MAX_STEP_PROBABILITY} at n = {n}; reduce dt")]
    RateTooLargeForStep { n: usize, prob: f64 },
    #[error("non-finite or negative rate at n = {n}, z = {z:?}")]
    InvalidRate { n: usize, z: Vec<f64> },
    #[error("one step needed more than {budget} environment substeps at n = {n}, z = {z:?}")]
    SubstepBudget { n: usize, z: Vec<f64>, budget: u64 },
    #[error("all {replicas} replicas were censored at the horizon {horizon}")]
    AllCensored { replicas: usize, horizon: f64 },
    #[error("binning: {0}")]
    Binning(String),
}

/// Tensor grid of bins over the environment space. Points outside the grid
/// are counted in the nearest edge bin, so the first and last bins of each
/// axis are half-open.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    pub axes: Vec<Vec<f64>>,
}

impl Binning {
    pub fn new(axes: Vec<Vec<f64>>) -> Result<Self, JointError> {
        if axes.is_empty() {
            return Err(JointError::Binning("no axes".into()));
        }
        for edges in &axes {
            if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(JointError::Binning(
                    "each axis needs at least two strictly increasing edges".into(),
                ));
            }
        }
        Ok(Self { axes })
    }

    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Result<Self, JointError> {
        let w = (hi - lo) / bins as f64;
        Self::new(vec![(0..=bins).map(|k| lo + k as f64 * w).collect()])
    }

    /// Equal-width bins per axis from the lower end of the support to the
    /// 99.9% quantile (or the upper end, if finite).
    pub fn covering(law: &StationaryLaw, bins: usize) -> Result<Self, JointError> {
        let mut axes = Vec::with_capacity(law.dim());
        for i in 0..law.dim() {
            let lo = law.lower(i);
            let hi = match law.upper(i) {
                Some(h) => h,
                None => law
                    .marginal_quantile(i, 0.999)
                    .ok_or_else(|| JointError::Binning("law has no quantile function".into()))?,
            };
            let hi = if hi > lo { hi } else { lo + 1.0 };
            let w = (hi - lo) / bins as f64;
            axes.push((0..=bins).map(|k| lo + k as f64 * w).collect());
        }
        Self::new(axes)
    }

    /// Default policy: 64 bins in one dimension, 32 per axis otherwise.
    pub fn default_for(law: &StationaryLaw) -> Result<Self, JointError> {
        Self::covering(law, if law.dim() == 1 { 64 } else { 32 })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|e| e.len() - 1).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn axis_bin(edges: &[f64], x: f64) -> usize {
        let k = edges.partition_point(|e| *e <= x);
        k.saturating_sub(1).min(edges.len() - 2)
    }

    /// Row-major bin index of `z`.
    pub fn cell(&self, z: &[f64]) -> usize {
        self.axes
            .iter()
            .zip(z)
            .fold(0, |acc, (edges, x)| acc * (edges.len() - 1) + Self::axis_bin(edges, *x))
    }

    /// Per-axis bin indices of a row-major cell.
    pub fn unravel(&self, mut cell: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for (i, edges) in self.axes.iter().enumerate().rev() {
            let b = edges.len() - 1;
            idx[i] = cell % b;
            cell /= b;
        }
        idx
    }

    pub fn center(&self, cell: usize) -> Vec<f64> {
        self.unravel(cell)
            .iter()
            .zip(&self.axes)
            .map(|(&k, e)| 0.5 * (e[k] + e[k + 1]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Record {
    Path,
    #[default]
    Occupancy,
    Terminal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub burn_in: f64,
    /// Largest admissible environment speed. Infinite by default, so only a
    /// vanishing `r_n(z)` trips it.
    pub speed_cap: f64,
    /// Largest environment-time increment per substep.
    pub h_env: f64,
    pub max_substeps: u64,
    pub seed: u64,
    pub record: Record,
    /// Keep every `path_stride`-th state when recording paths.
    pub path_stride: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1e-3,
            horizon: 1e3,
            burn_in: 1e2,
            speed_cap: f64::INFINITY,
            h_env: 1e-3,
            max_substeps: 10_000_000,
            seed: 0,
            record: Record::Occupancy,
            path_stride: 1000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), JointError> {
        let bad = |s: &str| Err(JointError::InvalidConfig(s.into()));
        if !(self.dt > 0.0) {
            return bad("dt must be positive");
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad("horizon must be positive and finite");
        }
        if !(self.burn_in >= 0.0 && self.burn_in < self.horizon) {
            return bad("burn_in must lie in [0, horizon)");
        }
        if !(self.h_env > 0.0) {
            return bad("h_env must be positive");
        }
        if !(self.speed_cap > 0.0) {
            return bad("speed_cap must be positive");
        }
        if self.path_stride == 0 {
            return bad("path_stride must be at least 1");
        }
        Ok(())
    }

    pub fn steps(&self) -> u64 {
        (self.horizon / self.dt).round() as u64
    }

    fn burn_steps(&self) -> u64 {
        (self.burn_in / self.dt).round() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub n: usize,
    pub z: Vec<f64>,
    pub t: f64,
}

impl JointState {
    pub fn new(n: usize, z: Vec<f64>) -> Self {
        Self { n, z, t: 0.0 }
    }
}

/// Step counts over `(n ≤ n_cap, z-bin)` cells plus one overflow cell for
/// `n > n_cap`. Cells are `n`-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JointOccupancy {
    pub n_cap: usize,
    pub binning: Binning,
    pub counts: Vec<u64>,
}

impl JointOccupancy {
    pub fn new(n_cap: usize, binning: Binning) -> Self {
        let cells = (n_cap + 1) * binning.len() + 1;
        Self {
            n_cap,
            binning,
            counts: vec![0; cells],
        }
    }

    pub fn cell(&self, n: usize, z: &[f64]) -> usize {
        if n > self.n_cap {
            self.counts.len() - 1
        } else {
            n * self.binning.len() + self.binning.cell(z)
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn masses(&self) -> Vec<f64> {
        let total = self.total().max(1) as f64;
        self.counts.iter().map(|c| *c as f64 / total).collect()
    }

    pub fn marginal_n(&self) -> Vec<f64> {
        let b = self.binning.len();
        let m = self.masses();
        let mut out: Vec<f64> = m[..m.len() - 1].chunks(b).map(|c| c.iter().sum()).collect();
        out.push(m[m.len() - 1]);
        out
    }

    pub fn merge(&mut self, other: &JointOccupancy) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// CSV rows `n, c0, …, mass` with bin centers; the overflow row has
    /// `n = "{n_cap+1}+"` and empty centers.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.binning.dim();
        let mut header = vec!["n".to_string()];
        header.extend((0..d).map(|i| format!("z{i}_center")));
        header.push("mass".into());
        w.write_record(&header)?;
        let masses = self.masses();
        let b = self.binning.len();
        for n in 0..=self.n_cap {
            for k in 0..b {
                let mut rec = vec![n.to_string()];
                rec.extend(self.binning.center(k).iter().map(|c| c.to_string()));
                rec.push(masses[n * b + k].to_string());
                w.write_record(&rec)?;
            }
        }
        let mut rec = vec![format!("{}+", self.n_cap + 1)];
        rec.extend((0..d).map(|_| String::new()));
        rec.push(masses[masses.len() - 1].to_string());
        w.write_record(&rec)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointRun {
    pub path: Vec<JointState>,
    pub occupancy: Option<JointOccupancy>,
    pub terminal: JointState,
    pub substeps: u64,
}

/// `ln r_n(z)` by a running sum.
fn log_r(model: &ModelSpec, n: usize, z: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 1..=n {
        acc += model.birth_rate(k - 1, z).ln() - model.death_rate(k, z).ln();
    }
    acc
}

/// One splitting step at the current state; returns the number of substeps.
fn joint_step<R: Rng + ?Sized>(
    model: &ModelSpec,
    env: &DiffusionSpec,
    stepper: &mut Stepper<'_>,
    cfg: &SimConfig,
    n: &mut usize,
    z: &mut [f64],
    rng: &mut R,
) -> Result<u64, JointError> {
    let beta = model.beta(*n);
    let mut remaining = if env.is_static() { 0.0 } else { cfg.dt };
    let mut substeps = 0u64;
    while remaining > 0.0 {
        let speed = beta * (-log_r(model, *n, z)).exp();
        if !speed.is_finite() || speed > cfg.speed_cap {
            return Err(DiffusiveError::SpeedCap {
                speed,
                cap: cfg.speed_cap,
            }
            .into());
        }
        if speed == 0.0 {
            break;
        }
        let real = (cfg.h_env / speed).min(remaining);
        stepper.step(z, real, *n, speed, rng)?;
        remaining = if real >= remaining { 0.0 } else { remaining - real };
        substeps += 1;
        if substeps > cfg.max_substeps {
            return Err(JointError::SubstepBudget {
                n: *n,
                z: z.to_vec(),
                budget: cfg.max_substeps,
            });
        }
    }
    let lambda = model.birth_rate(*n, z);
    let mu = model.death_rate(*n, z);
    if !(lambda >= 0.0 && mu >= 0.0) || !lambda.is_finite() || !mu.is_finite() {
        return Err(JointError::InvalidRate { n: *n, z: z.to_vec() });
    }
    let prob = (lambda + mu) * cfg.dt;
    if prob > MAX_STEP_PROBABILITY {
        return Err(JointError::RateTooLargeForStep { n: *n, prob });
    }
    let u: f64 = rng.random();
    let before = *n;
    if u < lambda * cfg.dt {
        *n += 1;
    } else if u < prob && *n > 0 {
        *n -= 1;
    }
    if *n != before {
        env.domain.project(z, *n);
    }
    Ok(substeps)
}

/// Runs one replica on random stream `stream`.
pub fn simulate_joint_diffusive(
    model: &ModelSpec,
    env: &DiffusionSpec,
    cfg: &SimConfig,
    initial: &JointState,
    occupancy: Option<(usize, &Binning)>,
    stream: u64,
) -> Result<JointRun, JointError> {
    cfg.validate()?;
    env.validate()?;
    if initial.z.len() != env.dim() {
        return Err(JointError::InvalidConfig(format!(
            "initial point has {} coordinates, environment has {}",
            initial.z.len(),
            env.dim()
        )));
    }
    let mut rng = stream_rng(cfg.seed, stream);
    let mut stepper = Stepper::new(env, cfg.speed_cap);
    let mut n = initial.n;
    let mut z = initial.z.clone();
    env.domain.project(&mut z, n);
    let mut occ = match (cfg.record, occupancy) {
        (Record::Occupancy, Some((cap, bins))) => Some(JointOccupancy::new(cap, bins.clone())),
        _ => None,
    };
    let mut path = Vec::new();
    let steps = cfg.steps();
    let burn = cfg.burn_steps();
    let mut substeps = 0;
    for k in 1..=steps {
        substeps += joint_step(model, env, &mut stepper, cfg, &mut n, &mut z, &mut rng)?;
        if k > burn {
            if let Some(o) = occ.as_mut() {
                let c = o.cell(n, &z);
                o.counts[c] += 1;
            }
        }
        if cfg.record == Record::Path && k % cfg.path_stride == 0 {
            path.push(JointState {
                n,
                z: z.clone(),
                t: initial.t + k as f64 * cfg.dt,
            });
        }
    }
    Ok(JointRun {
        path,
        occupancy: occ,
        terminal: JointState {
            n,
            z,
            t: initial.t + steps as f64 * cfg.dt,
        },
        substeps,
    })
}

/// Runs `replicas` independent replicas (streams `0..replicas`) in parallel
/// and pools their occupancy in stream order.
pub fn simulate_joint_replicas(
    model: &ModelSpec,
    env: &DiffusionSpec,
    cfg: &SimConfig,
    initial: &JointState,
    n_cap: usize,
    binning: &Binning,
    replicas: usize,
) -> Result<JointOccupancy, JointError> {
    let cfg = SimConfig {
        record: Record::Occupancy,
        ..cfg.clone()
    };
    let runs: Vec<Result<JointRun, JointError>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| simulate_joint_diffusive(model, env, &cfg, initial, Some((n_cap, binning)), r))
        .collect();
    let mut pooled = JointOccupancy::new(n_cap, binning.clone());
    for run in runs {
        if let Some(o) = run?.occupancy {
            pooled.merge(&o);
        }
    }
    Ok(pooled)
}

/// Analytic masses of `π({n} × bin) = ∫_bin r_n dν / Ξ` on the same cells
/// as [`JointOccupancy`], overflow last.
pub fn binned_invariant(
    model: &ModelSpec,
    law: &StationaryLaw,
    binning: &Binning,
    n_cap: usize,
    xi_cfg: &XiConfig,
) -> Result<Vec<f64>, JointError> {
    let xi = compute_xi_diffusive(model, law, model.truncation_hint.max(n_cap), xi_cfg)?.value;
    let levels = n_cap + 1;
    let b = binning.len();
    let mut out = vec![0.0; levels * b + 1];
    match law {
        StationaryLaw::PointMass { at } => {
            let r = cumulative_ratio(model, at, n_cap)?;
            let k = binning.cell(at);
            for n in 0..levels {
                out[n * b + k] = r.value(n) / xi;
            }
        }
        _ => {
            if law.dim() != binning.dim() || law.dim() > 2 {
                return Err(JointError::Binning(format!(
                    "analytic binning supports 1 or 2 dimensions matching the law (law {}, bins {})",
                    law.dim(),
                    binning.dim()
                )));
            }
            law.density(&vec![law.lower(0); law.dim()]).ok_or(DiffusiveError::NoDensity)?;
            let quad = xi_cfg.quad;
            let failure: std::cell::RefCell<Option<ModelError>> = Default::default();
            // Integrand over one bin: r_n(z) ν(z) for every level.
            let point = |z: &[f64], out: &mut [f64]| {
                let d = law.density(z).unwrap_or(0.0);
                if d == 0.0 {
                    out.iter_mut().for_each(|o| *o = 0.0);
                    return;
                }
                match cumulative_ratio(model, z, n_cap) {
                    Ok(r) => {
                        for (o, l) in out.iter_mut().zip(r.log_values()) {
                            *o = l.exp() * d;
                        }
                    }
                    Err(e) => {
                        failure.borrow_mut().get_or_insert(e);
                        out.iter_mut().for_each(|o| *o = f64::NAN);
                    }
                }
            };
            let ranges: Vec<Vec<(f64, Option<f64>)>> = binning
                .axes
                .iter()
                .enumerate()
                .map(|(i, e)| {
                    let nb = e.len() - 1;
                    (0..nb)
                        .map(|k| {
                            let lo = if k == 0 { law.lower(i).min(e[0]) } else { e[k] };
                            let hi = if k + 1 == nb { law.upper(i) } else { Some(e[k + 1]) };
                            (lo, hi)
                        })
                        .collect()
                })
                .collect();
            for cell in 0..b {
                let idx = binning.unravel(cell);
                let masses = if law.dim() == 1 {
                    let (lo, hi) = ranges[0][idx[0]];
                    integrate_vec(|x, o| point(&[x], o), levels, lo, hi, law.scale(0), &quad)
                } else {
                    let (lo0, hi0) = ranges[0][idx[0]];
                    let (lo1, hi1) = ranges[1][idx[1]];
                    let mut inner_fail = None;
                    let v = integrate_vec(
                        |x, o| match integrate_vec(|y, oo| point(&[x, y], oo), levels, lo1, hi1, law.scale(1), &quad) {
                            Ok(v) => o.copy_from_slice(&v),
                            Err(e) => {
                                inner_fail.get_or_insert(e);
                                o.iter_mut().for_each(|v| *v = f64::NAN);
                            }
                        },
                        levels,
                        lo0,
                        hi0,
                        law.scale(0),
                        &quad,
                    );
                    match inner_fail {
                        Some(e) => Err(e),
                        None => v,
                    }
                };
                if let Some(e) = failure.borrow_mut().take() {
                    return Err(e.into());
                }
                let masses = masses.map_err(|_| DiffusiveError::XiDivergent("bin integral diverges".into()))?;
                for n in 0..levels {
                    out[n * b + cell] = masses[n] / xi;
                }
            }
        }
    }
    let inside: f64 = out.iter().sum();
    out[levels * b] = (1.0 - inside).max(0.0);
    Ok(out)
}

/// Where a hitting-time experiment's environment lives.
#[derive(Debug, Clone)]
pub enum EnvKind<'a> {
    /// Constant environment point.
    Fixed(Vec<f64>),
    /// Finite chain, starting in state `start`.
    Jump { chain: &'a EnvChainSpec, start: usize },
    /// Diffusion started at `start`, simulated with `sim.dt`, `sim.h_env`.
    Diffusive { spec: &'a DiffusionSpec, start: Vec<f64>, sim: SimConfig },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingSample {
    /// Uncensored hitting times in replica order.
    pub times: Vec<f64>,
    pub censored: usize,
    pub mean: f64,
    pub stderr: f64,
}

impl HittingSample {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time"])?;
        for t in &self.times {
            w.write_record([t.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Exact hitting time for a finite (or frozen) environment.
fn hit_exact<R: Rng + ?Sized>(
    model: &ModelSpec,
    chain: &EnvChainSpec,
    mut n: usize,
    mut z: usize,
    target: &(dyn Fn(usize, &[f64]) -> bool + Sync),
    horizon: f64,
    rng: &mut R,
) -> Option<f64> {
    let mut rates = JumpRates::new(model, chain);
    let mut buf = Vec::with_capacity(chain.len() + 2);
    let mut t = 0.0;
    loop {
        if target(n, chain.coords(z)) {
            return Some(t);
        }
        rates.fill(n, z, &mut buf);
        let total: f64 = buf.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        t += -(1.0 - rng.random::<f64>()).ln() / total;
        if t > horizon {
            return None;
        }
        match pick(&buf, total, rng.random()) {
            0 => n += 1,
            1 => n -= 1,
            k => z = k - 2,
        }
    }
}

/// First time the predicate `target(n, z)` holds, over independent replicas
/// (stream `r` for replica `r`), censored at `horizon`.
pub fn hitting_time(
    model: &ModelSpec,
    env: &EnvKind<'_>,
    n0: usize,
    target: &(dyn Fn(usize, &[f64]) -> bool + Sync),
    horizon: f64,
    replicas: usize,
    seed: u64,
) -> Result<HittingSample, JointError> {
    let frozen;
    let (chain, z0) = match env {
        EnvKind::Fixed(coords) => {
            frozen = EnvChainSpec::frozen(vec![crate::jump::EnvState::new("fixed", coords.clone())]);
            (Some(&frozen), 0)
        }
        EnvKind::Jump { chain, start } => {
            if *start >= chain.len() {
                return Err(JumpError::BadState(*start).into());
            }
            (Some(*chain), *start)
        }
        EnvKind::Diffusive { .. } => (None, 0),
    };
    let results: Vec<Result<Option<f64>, JointError>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream_rng(seed, r);
            match (chain, env) {
                (Some(chain), _) => Ok(hit_exact(model, chain, n0, z0, target, horizon, &mut rng)),
                (None, EnvKind::Diffusive { spec, start, sim }) => {
                    let mut stepper = Stepper::new(spec, sim.speed_cap);
                    let (mut n, mut z) = (n0, start.clone());
                    spec.domain.project(&mut z, n);
                    let mut t = 0.0;
                    loop {
                        if target(n, &z) {
                            return Ok(Some(t));
                        }
                        if t >= horizon {
                            return Ok(None);
                        }
                        joint_step(model, spec, &mut stepper, sim, &mut n, &mut z, &mut rng)?;
                        t += sim.dt;
                    }
                }
                (None, _) => unreachable!(),
            }
        })
        .collect();
    let mut times = Vec::with_capacity(replicas);
    let mut censored = 0;
    for r in results {
        match r? {
            Some(t) => times.push(t),
            None => censored += 1,
        }
    }
    if times.is_empty() {
        return Err(JointError::AllCensored { replicas, horizon });
    }
    let est = mean_stderr(&times);
    Ok(HittingSample {
        times,
        censored,
        mean: est.mean,
        stderr: est.stderr,
    })
}

/// Result of a pathwise domination run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DominationReport {
    pub excursions: usize,
    pub events: u64,
    pub violations: u64,
}

/// Couples `N` with the M/M/∞ queue `N̄` of rates `λ̄`, `n μ̄` on shared
/// uniforms (uniformized at the local total rate) and counts the event times
/// where `N > N̄`. Each excursion starts both at `n0` and ends when `N̄` hits 0.
///
/// Needs `λ_n(z) ≤ λ̄` and `μ_n(z) ≥ n μ̄`; violations of those bounds show up
/// as violations of the ordering.
pub fn domination_mminf(
    model: &ModelSpec,
    chain: &EnvChainSpec,
    lambda_bar: f64,
    mu_bar: f64,
    n0: usize,
    excursions: usize,
    seed: u64,
) -> DominationReport {
    let mut rng = stream_rng(seed, 0);
    let mut rates = JumpRates::new(model, chain);
    let mut buf = Vec::with_capacity(chain.len() + 2);
    let mut events = 0u64;
    let mut violations = 0u64;
    let mut z = 0usize;
    for _ in 0..excursions {
        let (mut n, mut nb) = (n0, n0);
        while nb > 0 {
            rates.fill(n, z, &mut buf);
            let (lambda, mu) = (buf[0], buf[1]);
            let env_total: f64 = buf[2..].iter().sum();
            let death_band = mu.max(nb as f64 * mu_bar);
            let total = lambda_bar.max(lambda) + death_band + env_total;
            let u = rng.random::<f64>() * total;
            // Bands: [0, λ̄) births, then environment moves, then deaths from the top.
            if u < lambda_bar.max(lambda) {
                if u < lambda_bar {
                    nb += 1;
                }
                if u < lambda {
                    n += 1;
                }
            } else if u < lambda_bar.max(lambda) + env_total {
                let k = pick(&buf[2..], env_total, (u - lambda_bar.max(lambda)) / env_total);
                z = k;
            } else {
                let from_top = total - u;
                if from_top <= nb as f64 * mu_bar {
                    nb -= 1;
                }
                if from_top <= mu && n > 0 {
                    n -= 1;
                }
            }
            events += 1;
            if n > nb {
                violations += 1;
            }
        }
    }
    DominationReport {
        excursions,
        events,
        violations,
    }
}
