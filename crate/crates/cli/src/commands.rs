//! The four subcommands.

use std::io::Write;

use bdenv::convergence::{
    best_exponential_s1, best_exponential_s2, bounds_profile, couple_diffusive, couple_exponential,
    domination_pwalk, fit_coupling_times, fit_env_coupling, from_busy_samples, busy_period_samples,
    hitting_bound_table, log_grid, lyapunov_certificate, polynomial_bound_constant, tv_decay, BoundsProfile,
    CouplingSample, EnvCouplingFit, RateCertificate,
};
use bdenv::diffusive::{
    compute_xi_diffusive, invariant_measure_diffusive, stationary_law, DiffusionSpec, StationaryLaw, XiConfig,
};
use bdenv::joint::{
    binned_invariant, domination_mminf, simulate_joint_diffusive, simulate_joint_replicas, Binning, JointState,
    Record, SimConfig,
};
use bdenv::jump::{
    build_joint_generator, invariant_measure_jump, simulate_jump_joint, solve_common_v, verify_balance, write_events_csv,
    EnvChainSpec, JumpSimOptions,
};
use bdenv::model::{check_summability, ModelSpec};
use bdenv::stats::tv_distance;
use rayon::prelude::*;

use crate::config::{Environment, RateKind, RunConfig};
use crate::output::{OutDir, Report, Verdict};

pub type CmdResult = Result<(), Box<dyn std::error::Error + Send + Sync>>;

pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub model: ModelSpec,
    pub env: Environment,
    pub seed: u64,
    pub out: &'a mut OutDir,
    pub report: &'a mut Report,
}

fn sim_config(cfg: &RunConfig, seed: u64) -> SimConfig {
    SimConfig {
        dt: cfg.sim.dt,
        horizon: cfg.sim.horizon,
        burn_in: cfg.sim.burn_in,
        speed_cap: cfg.sim.speed_cap,
        h_env: cfg.sim.h_env,
        seed,
        ..SimConfig::default()
    }
}

fn binning_for(cfg: &RunConfig, law: &StationaryLaw) -> Result<Binning, bdenv::joint::JointError> {
    match cfg.sim.bins {
        Some(b) => Binning::covering(law, b),
        None => Binning::default_for(law),
    }
}

fn probes(chain: &EnvChainSpec) -> Vec<Vec<f64>> {
    (0..chain.len()).map(|z| chain.coords(z).to_vec()).collect()
}

/// Quantile probes of a stationary law, per axis (product grid in ≤ 2 dims).
fn law_probes(law: &StationaryLaw) -> Vec<Vec<f64>> {
    let qs = [0.001, 0.01, 0.1, 0.25, 0.5, 0.75, 0.9, 0.99, 0.999];
    let axis = |i: usize| -> Vec<f64> {
        match law.marginal_quantile(i, 0.5) {
            Some(_) => qs.iter().filter_map(|q| law.marginal_quantile(i, *q)).collect(),
            None => vec![law.mean()[i]],
        }
    };
    match law.dim() {
        1 => axis(0).into_iter().map(|x| vec![x]).collect(),
        _ => {
            let mut out = vec![vec![]];
            for i in 0..law.dim() {
                let a = axis(i);
                out = out
                    .into_iter()
                    .flat_map(|p: Vec<f64>| {
                        a.iter().map(move |x| {
                            let mut q = p.clone();
                            q.push(*x);
                            q
                        })
                    })
                    .collect();
            }
            out
        }
    }
}

pub fn invariant(ctx: Context<'_>) -> CmdResult {
    let n_max = ctx.cfg.model.n_max;
    match &ctx.env {
        Environment::Jump { chain, .. } => {
            let pi = invariant_measure_jump(&ctx.model, chain, n_max)?;
            let mut w = csv::Writer::from_writer(ctx.out.file("pi.csv")?);
            w.write_record(["n", "z", "mass"])?;
            for n in 0..=pi.top {
                for z in 0..pi.m {
                    w.write_record([n.to_string(), z.to_string(), pi.prob(n, z).to_string()])?;
                }
            }
            w.flush()?;
            let r = &mut *ctx.report;
            r.section("invariant");
            r.info("environment", "jump");
            r.info("xi", pi.xi);
            r.info("top_level", pi.top);
            r.info("truncation_residual", format!("{:e}", pi.truncation_residual));
            r.info("v", format!("{:?}", pi.v));
            r.info("marginal_z", format!("{:?}", pi.marginal_z()));
            r.check("xi_finite", pi.xi.is_finite() && pi.xi > 0.0, format!("Ξ = {}", pi.xi));
            r.check(
                "total_mass",
                (pi.total_mass() - 1.0).abs() < 1e-9,
                format!("mass + residual = {}", pi.total_mass()),
            );
            if ctx.cfg.analysis.assumptions {
                assumptions_jump(&ctx.model, chain, n_max, r);
            }
        }
        Environment::Diffusive { example, spec, .. } => {
            let law = stationary_law(example)?;
            let xi_cfg = XiConfig {
                seed: ctx.seed,
                ..XiConfig::default()
            };
            let h = invariant_measure_diffusive(&ctx.model, &law, n_max, &xi_cfg)?;
            let mut w = csv::Writer::from_writer(ctx.out.file("weights.csv")?);
            w.write_record(["n", "mass"])?;
            for (n, m) in h.weights.iter().enumerate() {
                w.write_record([n.to_string(), m.to_string()])?;
            }
            w.flush()?;
            let r = &mut *ctx.report;
            r.section("invariant");
            r.info("environment", format!("diffusive ({})", example.name()));
            r.info("law", toml::to_string(&law)?.trim().replace('\n', ", "));
            r.info("xi", h.xi.value);
            r.info("xi_error", h.xi.error);
            r.info("xi_method", format!("{:?}", h.xi.method));
            r.check("xi_finite", h.xi.value.is_finite() && h.xi.value > 0.0, format!("Ξ = {}", h.xi.value));
            if ctx.cfg.analysis.assumptions {
                assumptions_diffusive(spec, r);
            }
        }
    }
    Ok(())
}

fn assumptions_jump(model: &ModelSpec, chain: &EnvChainSpec, n_max: usize, r: &mut Report) {
    let levels = [0, 1, n_max / 2, n_max];
    let valid = levels.iter().map(|&n| chain.validate(n)).find(|v| v.is_err());
    r.check(
        "generator_valid",
        valid.is_none(),
        valid.map_or("rows sum to zero at probed levels".to_string(), |e| e.unwrap_err().to_string()),
    );
    let irr = levels.iter().all(|&n| chain.is_irreducible(n));
    r.check("irreducible", irr, "T_n irreducible at probed levels");
    match solve_common_v(chain, &levels) {
        Ok(v) => r.check("common_v", true, format!("v = {v:?}")),
        Err(e) => r.check("common_v", false, e),
    }
    for z in 0..chain.len() {
        match check_summability(model, chain.coords(z), n_max) {
            Ok(s) => r.check(
                &format!("summable_z{z}"),
                s.summable,
                format!("tail residual {:e}", s.residual),
            ),
            Err(e) => r.check(&format!("summable_z{z}"), false, e),
        }
    }
}

fn assumptions_diffusive(spec: &DiffusionSpec, r: &mut Report) {
    match spec.validate() {
        Ok(()) => r.check("diffusion_valid", true, "domain, drift and reflection are consistent"),
        Err(e) => r.check("diffusion_valid", false, e),
    }
    r.check(
        "nondegenerate",
        spec.is_nondegenerate() || spec.is_static(),
        "covariance is positive definite",
    );
}

pub fn verify(ctx: Context<'_>) -> CmdResult {
    let n_max = ctx.cfg.model.n_max;
    let r = &mut *ctx.report;
    r.section("verify");
    match &ctx.env {
        Environment::Jump { chain, .. } => {
            if ctx.cfg.analysis.balance {
                let gen = build_joint_generator(&ctx.model, chain, n_max)?;
                let pi = invariant_measure_jump(&ctx.model, chain, n_max)?;
                let res = verify_balance(&gen, &pi);
                r.check(
                    "balance",
                    res <= ctx.cfg.analysis.balance_tolerance,
                    format!("max interior residual {res:e}"),
                );
            }
            if ctx.cfg.analysis.assumptions {
                assumptions_jump(&ctx.model, chain, n_max, r);
            }
        }
        Environment::Diffusive { example, spec, .. } => {
            if ctx.cfg.analysis.assumptions {
                assumptions_diffusive(spec, r);
            }
            let law = stationary_law(example)?;
            let xi_cfg = XiConfig {
                seed: ctx.seed,
                ..XiConfig::default()
            };
            match compute_xi_diffusive(&ctx.model, &law, n_max, &xi_cfg) {
                Ok(xi) => r.check("xi_finite", true, format!("Ξ = {}", xi.value)),
                Err(e) => r.check("xi_finite", false, e),
            }
        }
    }
    Ok(())
}

fn write_occupancy_jump<W: Write>(out: W, masses: &[f64], m: usize, n_cap: usize) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "z", "mass"])?;
    for n in 0..=n_cap {
        for z in 0..m {
            w.write_record([n.to_string(), z.to_string(), masses[n * m + z].to_string()])?;
        }
    }
    w.write_record([format!("{}+", n_cap + 1), "*".into(), masses[masses.len() - 1].to_string()])?;
    w.flush()?;
    Ok(())
}

pub fn simulate(ctx: Context<'_>) -> CmdResult {
    let cfg = ctx.cfg;
    let n_cap = cfg.sim.n_cap;
    let replicas = cfg.sim.replicas;
    let r = &mut *ctx.report;
    r.section("simulate");
    r.info("replicas", replicas);
    match &ctx.env {
        Environment::Jump { chain, start } => {
            let opts = JumpSimOptions {
                burn_in: cfg.sim.burn_in,
                occupancy_cap: Some(n_cap),
                ..JumpSimOptions::default()
            };
            let runs: Vec<_> = (0..replicas as u64)
                .into_par_iter()
                .map(|k| {
                    let o = JumpSimOptions {
                        record_events: cfg.sim.trajectory && k == 0,
                        ..opts.clone()
                    };
                    simulate_jump_joint(
                        &ctx.model,
                        chain,
                        (cfg.sim.start_n, *start),
                        cfg.sim.horizon,
                        ctx.seed.wrapping_add(k),
                        &o,
                    )
                })
                .collect();
            let mut pooled = vec![0.0; (n_cap + 1) * chain.len() + 1];
            let mut events = 0u64;
            for (k, run) in runs.into_iter().enumerate() {
                let run = run?;
                events += run.event_count;
                for (p, o) in pooled.iter_mut().zip(run.occupancy.as_deref().unwrap_or(&[])) {
                    *p += o;
                }
                if k == 0 && cfg.sim.trajectory {
                    write_events_csv(&run.events, ctx.out.file("trajectory.csv")?)?;
                }
            }
            let total: f64 = pooled.iter().sum();
            let masses: Vec<f64> = pooled.iter().map(|p| p / total).collect();
            write_occupancy_jump(ctx.out.file("occupancy.csv")?, &masses, chain.len(), n_cap)?;
            r.info("events", events);
            if cfg.analysis.tv_check {
                let pi = invariant_measure_jump(&ctx.model, chain, cfg.model.n_max.max(n_cap))?;
                let tv = tv_distance(&masses, &pi.cells(n_cap))?;
                r.info("tv_to_analytic", tv);
                r.check("tv", tv <= cfg.analysis.tv_tolerance, format!("TV = {tv:.5} vs tolerance {}", cfg.analysis.tv_tolerance));
            }
        }
        Environment::Diffusive { example, spec, start } => {
            let law = stationary_law(example)?;
            let binning = binning_for(cfg, &law)?;
            let sim = sim_config(cfg, ctx.seed);
            let initial = JointState::new(cfg.sim.start_n, start.clone());
            let occ = simulate_joint_replicas(&ctx.model, spec, &sim, &initial, n_cap, &binning, replicas)?;
            occ.write_csv(ctx.out.file("occupancy.csv")?)?;
            if cfg.sim.trajectory {
                let path_cfg = SimConfig {
                    record: Record::Path,
                    ..sim.clone()
                };
                let run = simulate_joint_diffusive(&ctx.model, spec, &path_cfg, &initial, None, 0)?;
                let mut w = csv::Writer::from_writer(ctx.out.file("trajectory.csv")?);
                let mut header = vec!["t".to_string(), "n".to_string()];
                header.extend((0..spec.dim()).map(|i| format!("z{i}")));
                w.write_record(&header)?;
                for s in &run.path {
                    let mut rec = vec![s.t.to_string(), s.n.to_string()];
                    rec.extend(s.z.iter().map(|x| x.to_string()));
                    w.write_record(&rec)?;
                }
                w.flush()?;
            }
            r.info("steps_per_replica", sim.steps());
            if cfg.analysis.tv_check {
                let xi_cfg = XiConfig {
                    seed: ctx.seed,
                    ..XiConfig::default()
                };
                let reference = binned_invariant(&ctx.model, &law, &binning, n_cap, &xi_cfg)?;
                let tv = tv_distance(&occ.masses(), &reference)?;
                r.info("tv_to_analytic", tv);
                r.check("tv", tv <= cfg.analysis.tv_tolerance, format!("TV = {tv:.5} vs tolerance {}", cfg.analysis.tv_tolerance));
            }
        }
    }
    Ok(())
}

fn write_certificate(out: &mut OutDir, name: &str, cert: &RateCertificate, extra: &str) -> std::io::Result<()> {
    out.write_text(name, &format!("{}{extra}", cert.to_text()))
}

fn write_coupling(out: &mut OutDir, name: &str, sample: &CouplingSample) -> CmdResult {
    sample.write_csv(out.file(name)?)?;
    Ok(())
}

/// Largest p̄ and smallest q̄ over the upper half of the levels agree with
/// the full-range values, so the sup/inf is plausibly attained in range.
fn stable_profile(model: &ModelSpec, probes: &[Vec<f64>], full: &BoundsProfile) -> bool {
    match bounds_profile(model, probes, full.n_max / 2) {
        Ok(half) => half.p_bar == full.p_bar && half.q_bar == full.q_bar,
        Err(_) => false,
    }
}

fn env_fit(ctx: &Context<'_>) -> Result<EnvCouplingFit, Box<dyn std::error::Error + Send + Sync>> {
    let a = &ctx.cfg.analysis;
    match &ctx.env {
        Environment::Jump { chain, .. } => {
            let pairs = chain.len() * (chain.len() - 1);
            Ok(fit_env_coupling(chain, (a.env_samples / pairs.max(1)).max(1), ctx.seed)?)
        }
        Environment::Diffusive { spec, .. } => {
            // An idle birth-death component leaves only the environment to couple.
            let idle = ModelSpec::new("idle", |_, _| 0.0, |_, _| 1.0).with_variability(ctx.cfg.beta());
            let law = match &ctx.env {
                Environment::Diffusive { example, .. } => stationary_law(example)?,
                _ => unreachable!(),
            };
            let lo = law.marginal_quantile(0, 0.05).unwrap_or(law.lower(0));
            let hi = law.marginal_quantile(0, 0.95).unwrap_or(lo + 1.0);
            let sim = sim_config(ctx.cfg, ctx.seed);
            let s = couple_diffusive(&idle, spec, &sim, (0, lo), (0, hi), a.env_samples, a.coupling_horizon, ctx.seed)?;
            Ok(fit_coupling_times(&s.times)?)
        }
    }
}

fn coupling_sample(ctx: &Context<'_>) -> Result<CouplingSample, Box<dyn std::error::Error + Send + Sync>> {
    let a = &ctx.cfg.analysis;
    let seed = ctx.seed.wrapping_add(1);
    match &ctx.env {
        Environment::Jump { chain, start } => {
            let other = (start + 1) % chain.len();
            Ok(couple_exponential(
                &ctx.model,
                chain,
                (ctx.cfg.sim.start_n, *start),
                (0, other),
                a.coupling_samples,
                a.coupling_horizon,
                seed,
            )?)
        }
        Environment::Diffusive { spec, example, start } => {
            let law = stationary_law(example)?;
            let other = law.marginal_quantile(0, 0.9).unwrap_or(start[0] + 1.0);
            let sim = sim_config(ctx.cfg, seed);
            Ok(couple_diffusive(
                &ctx.model,
                spec,
                &sim,
                (ctx.cfg.sim.start_n, start[0]),
                (0, other),
                a.coupling_samples,
                a.coupling_horizon,
                seed,
            )?)
        }
    }
}

pub fn rates(ctx: Context<'_>) -> CmdResult {
    let kinds = if ctx.cfg.analysis.rates.is_empty() {
        vec![RateKind::Auto]
    } else {
        ctx.cfg.analysis.rates.clone()
    };
    let n_max = ctx.cfg.model.n_max;
    let probe_set = match &ctx.env {
        Environment::Jump { chain, .. } => probes(chain),
        Environment::Diffusive { example, .. } => law_probes(&stationary_law(example)?),
    };
    let profile = bounds_profile(&ctx.model, &probe_set, n_max)?;
    let exact_probes = matches!(ctx.env, Environment::Jump { .. }) && stable_profile(&ctx.model, &probe_set, &profile);
    ctx.report.section("rates");
    ctx.report.info("q_bar", profile.q_bar);
    ctx.report.info("p_bar", profile.p_bar);
    ctx.report.info("lambda_bar", profile.lambda_bar);
    let mut ctx = ctx;
    for kind in kinds {
        match kind {
            RateKind::Auto if profile.scenario1() => exponential_s1(&mut ctx, &profile, exact_probes)?,
            RateKind::S1 => exponential_s1(&mut ctx, &profile, exact_probes)?,
            RateKind::Auto | RateKind::S2 => {
                if kind == RateKind::Auto {
                    ctx.report.info(
                        "scenario_1",
                        format!("refused: p̄ = {} ≥ 1/2, trying the M/M/∞ dominator", profile.p_bar),
                    );
                }
                exponential_s2(&mut ctx, &profile, &probe_set, exact_probes)?
            }
            RateKind::Polynomial => polynomial(&mut ctx, &probe_set)?,
        }
    }
    Ok(())
}

fn exponential_s1(ctx: &mut Context<'_>, profile: &BoundsProfile, exact: bool) -> CmdResult {
    if !profile.scenario1() {
        ctx.report.verdict(
            "exponential_s1",
            Verdict::Failed,
            format!("p̄ = {} is not below 1/2", profile.p_bar),
        );
        return Ok(());
    }
    let fit = env_fit(ctx)?;
    let cert = best_exponential_s1(profile, fit.alpha, fit.gamma)?;
    let sample = coupling_sample(ctx)?;
    if let Environment::Jump { chain, .. } = &ctx.env {
        let d = domination_pwalk(
            &ctx.model,
            chain,
            profile.p_bar,
            ctx.cfg.sim.start_n.max(1),
            ctx.cfg.analysis.coupling_samples,
            ctx.seed.wrapping_add(3),
        );
        ctx.report.check(
            "domination_pwalk",
            d.violations == 0,
            format!("{} violations over {} events", d.violations, d.events),
        );
    }
    let slope_ok = sample.slope_ok(cert.kappa, 0.1);
    write_certificate(
        ctx.out,
        "certificate_s1.txt",
        &cert,
        &format!(
            "coupling_samples = {}\ncoupling_censored = {}\ntail_slope = {}\n",
            sample.times.len(),
            sample.censored,
            sample.tail.as_ref().map_or(f64::NAN, |t| t.slope)
        ),
    )?;
    write_coupling(ctx.out, "coupling_tail_s1.csv", &sample)?;
    let r = &mut *ctx.report;
    r.info("alpha", fit.alpha);
    r.info("gamma", fit.gamma);
    r.info("kappa", cert.kappa);
    r.info("u", cert.u);
    r.info("epsilon", cert.epsilon);
    r.info("tail_slope", sample.tail.as_ref().map_or(f64::NAN, |t| t.slope));
    let verdict = match (cert.valid, slope_ok) {
        (true, Some(true)) if exact => Verdict::Certified,
        (true, Some(true)) => Verdict::ProbeCertified,
        _ => Verdict::Failed,
    };
    r.verdict(
        "exponential_s1",
        verdict,
        format!("κ = {:.6}, residual {:.3e}, slope check {:?}", cert.kappa, cert.condition_residual, slope_ok),
    );
    Ok(())
}

fn exponential_s2(ctx: &mut Context<'_>, profile: &BoundsProfile, probe_set: &[Vec<f64>], exact: bool) -> CmdResult {
    let n_max = ctx.cfg.model.n_max;
    let mu_bar = probe_set
        .iter()
        .flat_map(|z| (1..=n_max).map(move |n| (n, z)))
        .map(|(n, z)| ctx.model.death_rate(n, z) / n as f64)
        .fold(f64::INFINITY, f64::min);
    let lambda_bar = profile.lambda_bar;
    if !(mu_bar > 0.0 && lambda_bar > 0.0) {
        ctx.report.verdict(
            "exponential_s2",
            Verdict::Failed,
            format!("needs λ_n ≤ λ̄ and μ_n ≥ n μ̄ with μ̄ > 0 (λ̄ = {lambda_bar}, μ̄ = {mu_bar})"),
        );
        return Ok(());
    }
    let a = &ctx.cfg.analysis;
    let fit = env_fit(ctx)?;
    let times = busy_period_samples(lambda_bar, mu_bar, a.coupling_samples, ctx.seed.wrapping_add(2))?;
    let u_max = 0.5 * profile.q_bar.min(mu_bar);
    let cert = best_exponential_s2(profile, fit.alpha, fit.gamma, u_max, |u| {
        Ok(from_busy_samples(&times, lambda_bar, mu_bar, u, false)?.estimate.mean)
    })?;
    let dom = match &ctx.env {
        Environment::Jump { chain, .. } => Some(domination_mminf(
            &ctx.model,
            chain,
            lambda_bar,
            mu_bar,
            ctx.cfg.sim.start_n.max(1),
            a.coupling_samples,
            ctx.seed.wrapping_add(3),
        )),
        Environment::Diffusive { .. } => None,
    };
    write_certificate(ctx.out, "certificate_s2.txt", &cert, &format!("mu_bar = {mu_bar}\n"))?;
    let r = &mut *ctx.report;
    r.info("alpha", fit.alpha);
    r.info("gamma", fit.gamma);
    r.info("mu_bar", mu_bar);
    r.info("kappa_s2", cert.kappa);
    if let Some(d) = dom {
        r.check(
            "domination_mminf",
            d.violations == 0,
            format!("{} violations over {} events", d.violations, d.events),
        );
    }
    let verdict = match cert.valid {
        true if exact => Verdict::Certified,
        true => Verdict::ProbeCertified,
        false => Verdict::Failed,
    };
    r.verdict(
        "exponential_s2",
        verdict,
        format!("κ = {:.6}, residual {:.3e}", cert.kappa, cert.condition_residual),
    );
    Ok(())
}

fn polynomial(ctx: &mut Context<'_>, probe_set: &[Vec<f64>]) -> CmdResult {
    let n_max = ctx.cfg.model.n_max;
    let a = ctx.cfg.analysis.clone();
    let probes_l = probe_set.to_vec();
    let probes_m = probe_set.to_vec();
    let model_l = ctx.model.clone();
    let model_m = ctx.model.clone();
    let lam = move |n: usize| probes_l.iter().map(|z| model_l.birth_rate(n, z)).fold(0.0, f64::max);
    let mu = move |n: usize| probes_m.iter().map(|z| model_m.death_rate(n, z)).fold(f64::INFINITY, f64::min);
    let dominator = ModelSpec::new("dominator", {
        let lam = lam.clone();
        move |n, _| lam(n)
    }, {
        let mu = mu.clone();
        move |n, _| mu(n)
    });
    let v = |n: usize| n as f64;
    let lyap = match lyapunov_certificate(&lam, &mu, v, "V(n) = n", n_max) {
        Ok(l) => l,
        Err(e) => {
            ctx.report.verdict("polynomial", Verdict::Failed, e);
            return Ok(());
        }
    };
    let rows = hitting_bound_table(&dominator, v, lyap.c_v, &a.hitting_starts, a.hitting_replicas, ctx.seed)?;
    let mut w = csv::Writer::from_writer(ctx.out.file("hitting.csv")?);
    w.write_record(["n", "mean", "stderr", "bound", "ok"])?;
    for row in &rows {
        w.write_record([
            row.n.to_string(),
            row.mean.to_string(),
            row.stderr.to_string(),
            row.bound.to_string(),
            row.ok.to_string(),
        ])?;
    }
    w.flush()?;
    let mut exponent = None;
    if let Environment::Jump { chain, start } = &ctx.env {
        let n_cap = ctx.cfg.sim.n_cap;
        let pi = invariant_measure_jump(&ctx.model, chain, n_max.max(n_cap))?;
        let constant = polynomial_bound_constant(&dominator, v, lyap.c_v, ctx.cfg.sim.start_n, n_max).ok();
        let grid = log_grid(a.decay_window[0], a.decay_window[1], a.decay_points);
        let curve = tv_decay(
            &ctx.model,
            chain,
            (ctx.cfg.sim.start_n, *start),
            &pi.cells(n_cap),
            n_cap,
            &grid,
            a.decay_replicas,
            ctx.seed.wrapping_add(4),
            (a.decay_window[0], a.decay_window[1]),
            constant,
        )?;
        curve.write_csv(ctx.out.file("decay.csv")?)?;
        exponent = curve.exponent;
        ctx.report.info("decay_noise_floor", curve.noise_floor);
    }
    let mut cert = lyap.certificate.clone();
    cert.valid = lyap.inf_in_range && rows.iter().all(|r| r.ok);
    write_certificate(
        ctx.out,
        "certificate_polynomial.txt",
        &cert,
        &format!("decay_exponent = {}\n", exponent.unwrap_or(f64::NAN)),
    )?;
    let r = &mut *ctx.report;
    r.info("c_v", lyap.c_v);
    r.info("c_v_argmin", lyap.argmin);
    for row in &rows {
        r.info(
            &format!("hitting_n{}", row.n),
            format!("{:.4} ± {:.4} (bound {:.4})", row.mean, row.stderr, row.bound),
        );
    }
    if let Some(e) = exponent {
        r.info("decay_exponent", e);
    }
    let verdict = if !cert.valid {
        Verdict::Failed
    } else if matches!(ctx.env, Environment::Jump { .. }) && lyap.inf_in_range {
        Verdict::Certified
    } else {
        Verdict::ProbeCertified
    };
    r.verdict(
        "polynomial",
        verdict,
        format!("C̄_V = {}, hitting rows ok: {}", lyap.c_v, rows.iter().all(|r| r.ok)),
    );
    Ok(())
}
