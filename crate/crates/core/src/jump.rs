//! Countable (here: finite) environments driven by per-level generators `T_n`.
//!
//! The joint chain on `(n, z)` moves
//!
//! * `(n, z) → (n+1, z)` at rate `λ_n(z)`,
//! * `(n, z) → (n-1, z)` at rate `μ_n(z)`,
//! * `(n, z) → (n, z')` at rate `τ_n(z, z') / r_n(z)`,
//!
//! and never changes both coordinates at once. When one probability vector
//! `v` solves `v'T_n = 0` for every level, `η(n, z) = r_n(z) v(z)` is
//! invariant, and normalizing by `Ξ = Σ_n Σ_z r_n(z) v(z)` gives the
//! stationary law.
//!
//! Environment rates grow like `1/r_n(z)`, so generator entries are stored as
//! logarithms.

use std::collections::VecDeque;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{cumulative_ratio, normalized_weights, ModelError, ModelSpec, Variability};
use crate::rng::stream_rng;

/// Tolerance for `v'T_n = 0` relative to the largest exit rate of `T_n`.
pub const COMMON_V_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JumpError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("generator T_{n} is invalid: {reason}")]
    InvalidGenerator { n: usize, reason: String },
    #[error("generator T_{n} is not irreducible")]
    Reducible { n: usize },
    #[error("no common stationary vector: v'T_{n} has relative residual {residual:e}")]
    NoCommonV { n: usize, residual: f64 },
    #[error("Ξ diverges: {0}")]
    XiDivergent(String),
    #[error("r_{n}(z) vanishes for environment state {z} but not for all states")]
    DegenerateRatio { n: usize, z: usize },
    #[error("exit rate {rate:e} at (n = {n}, z = {z}) exceeds the cap {cap:e}")]
    RateExplosion { n: usize, z: usize, rate: f64, cap: f64 },
    #[error("environment state index {0} out of range")]
    BadState(usize),
}

/// One environment state: a label plus the coordinates rate fields read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub label: String,
    pub coords: Vec<f64>,
}

impl EnvState {
    pub fn new(label: impl Into<String>, coords: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            coords,
        }
    }
}

pub type GeneratorFn = Arc<dyn Fn(usize) -> DMatrix<f64> + Send + Sync>;

#[derive(Clone)]
pub struct EnvChainSpec {
    pub states: Vec<EnvState>,
    generator: GeneratorFn,
}

impl std::fmt::Debug for EnvChainSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnvChainSpec")
            .field("states", &self.states)
            .finish_non_exhaustive()
    }
}

impl EnvChainSpec {
    pub fn new(
        states: Vec<EnvState>,
        generator: impl Fn(usize) -> DMatrix<f64> + Send + Sync + 'static,
    ) -> Self {
        Self {
            states,
            generator: Arc::new(generator),
        }
    }

    /// `T_n = β_n T`.
    pub fn scaled(states: Vec<EnvState>, base: DMatrix<f64>, beta: Variability) -> Self {
        Self::new(states, move |n| &base * beta.beta(n))
    }

    /// An environment that never moves.
    pub fn frozen(states: Vec<EnvState>) -> Self {
        let m = states.len();
        Self::new(states, move |_| DMatrix::zeros(m, m))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn coords(&self, z: usize) -> &[f64] {
        &self.states[z].coords
    }

    pub fn generator(&self, n: usize) -> DMatrix<f64> {
        (self.generator)(n)
    }

    /// Nonnegative off-diagonal entries and zero row sums (relative 1e-12).
    pub fn validate(&self, n: usize) -> Result<DMatrix<f64>, JumpError> {
        let t = self.generator(n);
        let m = self.len();
        let bad = |reason: String| JumpError::InvalidGenerator { n, reason };
        if t.nrows() != m || t.ncols() != m {
            return Err(bad(format!("shape {}x{}, expected {m}x{m}", t.nrows(), t.ncols())));
        }
        for i in 0..m {
            let mut off = 0.0;
            for j in 0..m {
                if i != j {
                    let x = t[(i, j)];
                    if !(x.is_finite() && x >= 0.0) {
                        return Err(bad(format!("entry ({i},{j}) = {x}")));
                    }
                    off += x;
                }
            }
            if (off + t[(i, i)]).abs() > 1e-12 * off.max(t[(i, i)].abs()).max(1e-300) {
                return Err(bad(format!("row {i} sums to {}", off + t[(i, i)])));
            }
        }
        Ok(t)
    }

    pub fn is_irreducible(&self, n: usize) -> bool {
        irreducible(&self.generator(n))
    }
}

/// Strong connectivity of the support graph of a rate matrix.
pub fn irreducible(t: &DMatrix<f64>) -> bool {
    let m = t.nrows();
    if m <= 1 {
        return true;
    }
    let reach = |forward: bool| {
        let mut seen = vec![false; m];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for j in 0..m {
                let w = if forward { t[(i, j)] } else { t[(j, i)] };
                if i != j && w > 0.0 && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reach(true) && reach(false)
}

/// Stationary probability vector of one irreducible generator.
pub fn stationary_vector(t: &DMatrix<f64>) -> Option<DVector<f64>> {
    let m = t.nrows();
    let mut a = t.transpose();
    for j in 0..m {
        a[(m - 1, j)] = 1.0;
    }
    let mut b = DVector::zeros(m);
    b[m - 1] = 1.0;
    let v = a.lu().solve(&b)?;
    Some(v.map(|x| x.max(0.0)) / v.map(|x| x.max(0.0)).sum())
}

fn relative_residual(v: &DVector<f64>, t: &DMatrix<f64>) -> f64 {
    let scale = t.diagonal().amax();
    if scale == 0.0 {
        return 0.0;
    }
    (t.transpose() * v).amax() / scale
}

/// Solves `v'T_n = 0`, `Σv = 1` at the first probe and checks the same `v`
/// at every other probe.
pub fn solve_common_v(env: &EnvChainSpec, probes: &[usize]) -> Result<Vec<f64>, JumpError> {
    let Some((&first, rest)) = probes.split_first() else {
        return Err(JumpError::InvalidGenerator {
            n: 0,
            reason: "no probe levels".into(),
        });
    };
    let t0 = env.validate(first)?;
    if !irreducible(&t0) {
        return Err(JumpError::Reducible { n: first });
    }
    let v = stationary_vector(&t0).ok_or(JumpError::Reducible { n: first })?;
    for &n in std::iter::once(&first).chain(rest) {
        let t = env.validate(n)?;
        if !irreducible(&t) {
            return Err(JumpError::Reducible { n });
        }
        let residual = relative_residual(&v, &t);
        if residual > COMMON_V_TOL {
            return Err(JumpError::NoCommonV { n, residual });
        }
    }
    Ok(v.iter().copied().collect())
}

/// Off-diagonal generator entry, rate stored as its logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenEntry {
    pub row: usize,
    pub col: usize,
    pub log_rate: f64,
}

/// Sparse joint generator over `(n, z)`, `n = 0..=top`, index `n·m + z`.
#[derive(Debug, Clone)]
pub struct JointGeneratorMatrix {
    pub m: usize,
    /// Highest level kept.
    pub top: usize,
    /// True when births out of `top` were dropped (the top rows have a deficit).
    pub truncated: bool,
    /// Off-diagonal entries, sorted by row then column.
    pub entries: Vec<GenEntry>,
    /// `ln(-R[i,i])` per row, including any dropped births.
    pub log_exit: Vec<f64>,
}

impl JointGeneratorMatrix {
    pub fn dimension(&self) -> usize {
        (self.top + 1) * self.m
    }

    pub fn index(&self, n: usize, z: usize) -> usize {
        n * self.m + z
    }

    pub fn state(&self, i: usize) -> (usize, usize) {
        (i / self.m, i % self.m)
    }

    pub fn is_truncated_row(&self, i: usize) -> bool {
        self.truncated && self.state(i).0 == self.top
    }

    /// `R[i, j]`, with the diagonal reported as the negative exit rate.
    pub fn rate(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return -self.log_exit[i].exp();
        }
        let lo = self.entries.partition_point(|e| (e.row, e.col) < (i, j));
        match self.entries.get(lo) {
            Some(e) if e.row == i && e.col == j => e.log_rate.exp(),
            _ => 0.0,
        }
    }

    /// Writes `row col value` triples, diagonal included.
    pub fn write_triples<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let mut k = 0;
        for i in 0..self.dimension() {
            writeln!(out, "{i} {i} {:e}", -self.log_exit[i].exp())?;
            while k < self.entries.len() && self.entries[k].row == i {
                let e = self.entries[k];
                writeln!(out, "{} {} {:e}", e.row, e.col, e.log_rate.exp())?;
                k += 1;
            }
        }
        Ok(())
    }
}

/// Log cumulative ratios for every environment state, and the highest level
/// where they are still positive.
struct RatioTable {
    logs: Vec<Vec<f64>>,
    top: usize,
    truncated: bool,
}

fn ratio_table(model: &ModelSpec, env: &EnvChainSpec, n_max: usize) -> Result<RatioTable, JumpError> {
    let ratios = (0..env.len())
        .map(|z| cumulative_ratio(model, env.coords(z), n_max))
        .collect::<Result<Vec<_>, _>>()?;
    let ends: Vec<Option<usize>> = ratios.iter().map(|r| r.support_end()).collect();
    let first_end = ends.iter().flatten().min().copied();
    let (top, truncated) = match first_end {
        None => (n_max, true),
        Some(end) => {
            if let Some(z) = ends.iter().position(|e| *e != Some(end)) {
                return Err(JumpError::DegenerateRatio { n: end, z });
            }
            (end - 1, false)
        }
    };
    Ok(RatioTable {
        logs: ratios.into_iter().map(|r| r.log_values().to_vec()).collect(),
        top,
        truncated,
    })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Assembles the joint generator up to level `n_max` (or the end of the
/// support, for loss models).
pub fn build_joint_generator(
    model: &ModelSpec,
    env: &EnvChainSpec,
    n_max: usize,
) -> Result<JointGeneratorMatrix, JumpError> {
    let m = env.len();
    let table = ratio_table(model, env, n_max)?;
    let top = table.top;
    let mut entries = Vec::new();
    let mut log_exit = Vec::with_capacity((top + 1) * m);
    for n in 0..=top {
        let t = env.validate(n)?;
        for z in 0..m {
            let coords = env.coords(z);
            let row = n * m + z;
            // (column, ln rate, kept in the matrix)
            let mut out: Vec<(usize, f64, bool)> = Vec::new();
            if n > 0 {
                out.push((row - m, model.death_rate(n, coords).ln(), true));
            }
            let log_r = table.logs[z][n];
            for z2 in 0..m {
                if z2 != z && t[(z, z2)] > 0.0 {
                    out.push((n * m + z2, t[(z, z2)].ln() - log_r, true));
                }
            }
            let birth = model.birth_rate(n, coords);
            if birth > 0.0 {
                out.push((row + m, birth.ln(), n < top));
            }
            for &(col, log_rate, kept) in &out {
                if kept {
                    entries.push(GenEntry { row, col, log_rate });
                }
            }
            let logs: Vec<f64> = out.iter().map(|e| e.1).collect();
            log_exit.push(log_sum_exp(&logs));
        }
    }
    entries.sort_by_key(|e| (e.row, e.col));
    Ok(JointGeneratorMatrix {
        m,
        top,
        truncated: table.truncated,
        entries,
        log_exit,
    })
}

/// `π(n, z) = r_n(z) v(z) / Ξ` on levels `0..=top`.
#[derive(Debug, Clone)]
pub struct InvariantMeasureJump {
    pub m: usize,
    pub top: usize,
    /// `ln η(n, z) = ln r_n(z) + ln v(z)`, index `n·m + z`.
    pub log_eta: Vec<f64>,
    pub log_xi: f64,
    pub xi: f64,
    pub v: Vec<f64>,
    /// Probability mass estimated beyond `top`.
    pub truncation_residual: f64,
}

impl InvariantMeasureJump {
    pub fn prob(&self, n: usize, z: usize) -> f64 {
        if n > self.top {
            return 0.0;
        }
        (self.log_eta[n * self.m + z] - self.log_xi).exp()
    }

    /// Masses on `(n ≤ cap, z)` in index order followed by one overflow cell
    /// holding everything above `cap`.
    pub fn cells(&self, cap: usize) -> Vec<f64> {
        let mut out: Vec<f64> = (0..=cap)
            .flat_map(|n| (0..self.m).map(move |z| (n, z)))
            .map(|(n, z)| self.prob(n, z))
            .collect();
        let inside: f64 = out.iter().sum();
        out.push((1.0 - inside).max(0.0));
        out
    }

    /// Marginal law of `N` on `0..=top`.
    pub fn marginal_n(&self) -> Vec<f64> {
        (0..=self.top)
            .map(|n| (0..self.m).map(|z| self.prob(n, z)).sum())
            .collect()
    }

    /// Marginal law of `Z`; equals `v` weighted by `Σ_n r_n(z)`.
    pub fn marginal_z(&self) -> Vec<f64> {
        (0..self.m)
            .map(|z| (0..=self.top).map(|n| self.prob(n, z)).sum())
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.marginal_n().iter().sum::<f64>() + self.truncation_residual
    }
}

pub const XI_TAIL_TOL: f64 = 1e-10;

pub fn invariant_measure_jump(
    model: &ModelSpec,
    env: &EnvChainSpec,
    n_max: usize,
) -> Result<InvariantMeasureJump, JumpError> {
    let m = env.len();
    let table = ratio_table(model, env, n_max)?;
    let probes: Vec<usize> = (0..=table.top).collect();
    let v = solve_common_v(env, &probes)?;
    let mut log_totals = Vec::with_capacity(m);
    let mut tails = Vec::with_capacity(m);
    for z in 0..m {
        let w = normalized_weights(model, env.coords(z), n_max, XI_TAIL_TOL).map_err(|e| match e {
            ModelError::Divergence { .. } => JumpError::XiDivergent(format!("state {z}: {e}")),
            other => JumpError::Model(other),
        })?;
        // Σ_n r_n(z) including the tail is 1/κ_0(z).
        log_totals.push(-w.kappa[0].ln());
        tails.push(w.tail_bound);
    }
    let weighted: Vec<f64> = (0..m).map(|z| v[z].ln() + log_totals[z]).collect();
    let log_xi = log_sum_exp(&weighted);
    if !log_xi.is_finite() {
        return Err(JumpError::XiDivergent("Ξ is not finite".into()));
    }
    let truncation_residual = (0..m).map(|z| (weighted[z] - log_xi).exp() * tails[z]).sum();
    let mut log_eta = Vec::with_capacity((table.top + 1) * m);
    for n in 0..=table.top {
        for z in 0..m {
            log_eta.push(table.logs[z][n] + v[z].ln());
        }
    }
    Ok(InvariantMeasureJump {
        m,
        top: table.top,
        log_eta,
        log_xi,
        xi: log_xi.exp(),
        v,
        truncation_residual,
    })
}

/// Max over interior rows of `|(η'R)(n,z)| / (η(n,z) |R[(n,z),(n,z)]|)`.
///
/// Rows at a truncation level are skipped; rows with `η = 0` are skipped too.
pub fn verify_balance(gen: &JointGeneratorMatrix, measure: &InvariantMeasureJump) -> f64 {
    let dim = gen.dimension().min(measure.log_eta.len());
    // inflow[j] accumulates Σ_i η_i R_ij / (η_j |R_jj|) for i ≠ j.
    let mut inflow = vec![0.0f64; dim];
    for e in &gen.entries {
        if e.row >= dim || e.col >= dim {
            continue;
        }
        let (src, dst) = (measure.log_eta[e.row], measure.log_eta[e.col]);
        if src == f64::NEG_INFINITY || dst == f64::NEG_INFINITY {
            continue;
        }
        inflow[e.col] += (src + e.log_rate - dst - gen.log_exit[e.col]).exp();
    }
    (0..dim)
        .filter(|&i| !gen.is_truncated_row(i) && measure.log_eta[i] > f64::NEG_INFINITY)
        .filter(|&i| gen.log_exit[i] > f64::NEG_INFINITY)
        .map(|i| (inflow[i] - 1.0).abs())
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Birth,
    Death,
    Env,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::Birth => "birth",
            EventKind::Death => "death",
            EventKind::Env => "env",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    /// State after the event.
    pub n: usize,
    pub z: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone)]
pub struct JumpSimOptions {
    pub burn_in: f64,
    /// Abort when the total exit rate exceeds this.
    pub rate_cap: f64,
    pub record_events: bool,
    /// Accumulate time-weighted occupancy on `n ≤ cap` plus an overflow cell.
    pub occupancy_cap: Option<usize>,
}

impl Default for JumpSimOptions {
    fn default() -> Self {
        Self {
            burn_in: 0.0,
            rate_cap: 1e9,
            record_events: false,
            occupancy_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JumpPath {
    pub events: Vec<JumpEvent>,
    /// Occupation times in [`InvariantMeasureJump::cells`] order.
    pub occupancy: Option<Vec<f64>>,
    pub event_count: u64,
    pub terminal: (usize, usize),
    pub end_time: f64,
}

/// Per-level rate cache shared by the exact simulators.
pub(crate) struct JumpRates<'a> {
    model: &'a ModelSpec,
    env: &'a EnvChainSpec,
    log_r: Vec<Vec<f64>>,
    gens: Vec<DMatrix<f64>>,
}

impl<'a> JumpRates<'a> {
    pub(crate) fn new(model: &'a ModelSpec, env: &'a EnvChainSpec) -> Self {
        Self {
            model,
            env,
            log_r: vec![vec![0.0]; env.len()],
            gens: Vec::new(),
        }
    }

    fn log_ratio(&mut self, n: usize, z: usize) -> f64 {
        let coords = &self.env.states[z].coords;
        let col = &mut self.log_r[z];
        while col.len() <= n {
            let k = col.len();
            let step = self.model.birth_rate(k - 1, coords).ln() - self.model.death_rate(k, coords).ln();
            col.push(col[k - 1] + step);
        }
        col[n]
    }

    fn generator(&mut self, n: usize) -> &DMatrix<f64> {
        while self.gens.len() <= n {
            let k = self.gens.len();
            self.gens.push(self.env.generator(k));
        }
        &self.gens[n]
    }

    /// Rates out of `(n, z)`: birth, death, then one per environment state
    /// (zero at `z` itself).
    pub(crate) fn fill(&mut self, n: usize, z: usize, out: &mut Vec<f64>) {
        out.clear();
        let coords = &self.env.states[z].coords;
        out.push(self.model.birth_rate(n, coords));
        out.push(self.model.death_rate(n, coords));
        let log_r = self.log_ratio(n, z);
        let m = self.env.len();
        let t = self.generator(n);
        for z2 in 0..m {
            let tau = if z2 == z { 0.0 } else { t[(z, z2)] };
            out.push(if tau > 0.0 { (tau.ln() - log_r).exp() } else { 0.0 });
        }
    }
}

/// Picks an index with probability proportional to `weights`.
pub(crate) fn pick(weights: &[f64], total: f64, u: f64) -> usize {
    let target = u * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if target < acc {
            return i;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Exact (Gillespie) simulation of the joint chain on `[0, horizon]`.
pub fn simulate_jump_joint(
    model: &ModelSpec,
    env: &EnvChainSpec,
    initial: (usize, usize),
    horizon: f64,
    seed: u64,
    opts: &JumpSimOptions,
) -> Result<JumpPath, JumpError> {
    let m = env.len();
    if initial.1 >= m {
        return Err(JumpError::BadState(initial.1));
    }
    let mut rng = stream_rng(seed, 0);
    let mut rates = JumpRates::new(model, env);
    let mut buf = Vec::with_capacity(m + 2);
    let (mut n, mut z) = initial;
    let mut t = 0.0f64;
    let mut events = Vec::new();
    let mut occupancy = opts.occupancy_cap.map(|cap| vec![0.0; (cap + 1) * m + 1]);
    let mut event_count = 0u64;
    loop {
        rates.fill(n, z, &mut buf);
        let total: f64 = buf.iter().sum();
        if !(total <= opts.rate_cap) {
            return Err(JumpError::RateExplosion {
                n,
                z,
                rate: total,
                cap: opts.rate_cap,
            });
        }
        let hold = if total > 0.0 {
            -(1.0 - rng.random::<f64>()).ln() / total
        } else {
            f64::INFINITY
        };
        let t_next = (t + hold).min(horizon);
        if let (Some(occ), Some(cap)) = (occupancy.as_mut(), opts.occupancy_cap) {
            let span = t_next - t.max(opts.burn_in);
            if span > 0.0 {
                let cell = if n <= cap { n * m + z } else { (cap + 1) * m };
                occ[cell] += span;
            }
        }
        if t + hold >= horizon {
            t = horizon;
            break;
        }
        t += hold;
        let k = pick(&buf, total, rng.random());
        let kind = match k {
            0 => {
                n += 1;
                EventKind::Birth
            }
            1 => {
                n -= 1;
                EventKind::Death
            }
            _ => {
                z = k - 2;
                EventKind::Env
            }
        };
        event_count += 1;
        if opts.record_events {
            events.push(JumpEvent { time: t, n, z, kind });
        }
    }
    Ok(JumpPath {
        events,
        occupancy,
        event_count,
        terminal: (n, z),
        end_time: t,
    })
}

pub fn write_events_csv<W: Write>(events: &[JumpEvent], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["time", "n", "z_index", "event_kind"])?;
    for e in events {
        w.write_record([
            e.time.to_string(),
            e.n.to_string(),
            e.z.to_string(),
            e.kind.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
