//! Acceptance suite: ten end-to-end criteria, one PASS/FAIL line each.
//! Runs without the libtest harness so the lines always reach the output.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use bdenv::convergence::{
    best_exponential_s1, bounds_profile, couple_exponential, domination_pwalk, fit_env_coupling, g, log_grid,
    lyapunov_certificate, race_check, theta, tv_decay, walk_return_pgf, hitting_bound_check,
};
use bdenv::diffusive::{
    compute_xi_diffusive, simulate_env, stationary_law, xi_rbm_arrival, DiffusiveError, DiffusiveExample,
    StationaryLaw, XiConfig,
};
use bdenv::joint::{binned_invariant, domination_mminf, simulate_joint_replicas, Binning, JointState, SimConfig};
use bdenv::jump::{
    build_joint_generator, invariant_measure_jump, simulate_jump_joint, verify_balance, EnvChainSpec, EnvState,
    JumpSimOptions,
};
use bdenv::model::{catalog, normalized_weights, ModelSpec, ParamMap, RateParam, Variability};
use bdenv::stats::{ks_distance, tv_distance};
use nalgebra::DMatrix;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn params(pairs: &[(&str, RateParam)]) -> ParamMap {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn two_state(a: f64, coords: [f64; 2]) -> EnvChainSpec {
    EnvChainSpec::scaled(
        vec![EnvState::new("low", vec![coords[0]]), EnvState::new("high", vec![coords[1]])],
        DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0]),
        Variability::Geometric(a),
    )
}

/// Product-form stationarity for six catalog models.
fn ac1() -> Outcome {
    let z = RateParam::coord(0);
    let c = RateParam::Const;
    let models = [
        ("mm1", params(&[("lambda", z), ("mu", c(2.0))])),
        ("mminf", params(&[("lambda", z), ("mu", c(1.0))])),
        ("mmk", params(&[("lambda", z), ("mu", c(1.0)), ("k", c(2.0))])),
        ("mmk0", params(&[("lambda", z), ("mu", c(1.0)), ("k", c(2.0))])),
        ("mmk_plus_m", params(&[("lambda", z), ("mu", c(1.0)), ("gamma", c(0.5)), ("k", c(2.0))])),
        ("linear_growth", params(&[("lambda", c(0.3)), ("theta", z), ("mu", c(1.0))])),
    ];
    let env = two_state(0.9, [0.5, 1.5]);
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (name, p) in &models {
        let model = catalog(name, p).unwrap().with_variability(Variability::Geometric(0.9));
        let res = build_joint_generator(&model, &env, 200)
            .and_then(|gen| invariant_measure_jump(&model, &env, 200).map(|pi| verify_balance(&gen, &pi)));
        match res {
            Ok(r) => {
                worst = worst.max(r);
                parts.push(format!("{name} {r:.1e}"));
            }
            Err(e) => {
                worst = f64::INFINITY;
                parts.push(format!("{name} error: {e}"));
            }
        }
    }
    outcome(worst < 1e-9, format!("max balance residual {worst:.2e} [{}]", parts.join(", ")))
}

/// Gillespie occupancy against the analytic law.
fn ac2() -> Outcome {
    let model = catalog("mm1", &params(&[("lambda", RateParam::coord(0)), ("mu", RateParam::Const(2.0))]))
        .unwrap()
        .with_variability(Variability::Geometric(0.9));
    let env = two_state(0.9, [0.5, 1.0]);
    let cap = 25;
    let opts = JumpSimOptions {
        burn_in: 100.0,
        occupancy_cap: Some(cap),
        ..JumpSimOptions::default()
    };
    let path = simulate_jump_joint(&model, &env, (0, 0), 5e5, 2024, &opts).unwrap();
    let occ = path.occupancy.unwrap();
    let total: f64 = occ.iter().sum();
    let masses: Vec<f64> = occ.iter().map(|o| o / total).collect();
    let pi = invariant_measure_jump(&model, &env, 200).unwrap();
    let tv = tv_distance(&masses, &pi.cells(cap)).unwrap();
    outcome(
        tv <= 0.02 && path.event_count >= 1_000_000,
        format!("TV {tv:.5} over {} events (tolerance 0.02)", path.event_count),
    )
}

fn ks_of(example: &DiffusiveExample, law: &StationaryLaw, seed: u64) -> f64 {
    let spec = example.spec().unwrap();
    let samples = simulate_env(&spec, &example.start(), 1e-3, 1e4, 1e3, 10, seed).unwrap();
    let mut x = samples.coord(0);
    ks_distance(&mut x, |v| law.marginal_cdf(0, v).unwrap())
}

/// Reflected Brownian motion and reflected OU against their stationary laws.
fn ac3() -> Outcome {
    let rbm = DiffusiveExample::RbmHalfline {
        c: 1.0,
        sigma: 2f64.sqrt(),
        lower: 0.0,
    };
    let ou = DiffusiveExample::ReflectedOu {
        c: 1.0,
        sigma: 1.0,
        lower: 0.0,
    };
    let t0 = Instant::now();
    let ks_rbm = ks_of(&rbm, &StationaryLaw::Exponential { rate: 1.0, shift: 0.0 }, 31);
    let t_rbm = t0.elapsed();
    let t1 = Instant::now();
    let ou_law = stationary_law(&ou).unwrap();
    let spec = ou.spec().unwrap();
    let samples = simulate_env(&spec, &ou.start(), 1e-3, 1e4, 1e3, 10, 32).unwrap();
    let mut x = samples.coord(0);
    let ks_ou = ks_distance(&mut x, |v| ou_law.marginal_cdf(0, v).unwrap());
    // Variance σ²/(4c) instead of σ²/(2c), for comparison.
    let halved = StationaryLaw::OneSidedGaussian { shift: 0.0, var: 0.25 };
    let ks_halved = ks_distance(&mut x, |v| halved.marginal_cdf(0, v).unwrap());
    let t_ou = t1.elapsed();
    let budget = Duration::from_secs(120);
    outcome(
        ks_rbm <= 0.02 && ks_ou <= 0.02 && t_rbm < budget && t_ou < budget,
        format!(
            "KS RBM {ks_rbm:.4} ({:.1}s), KS OU {ks_ou:.4} ({:.1}s); OU against variance σ²/(4c): {ks_halved:.4}",
            t_rbm.as_secs_f64(),
            t_ou.as_secs_f64()
        ),
    )
}

fn mminf_rbm(mu: f64) -> ModelSpec {
    catalog("mminf", &params(&[("lambda", RateParam::coord(0)), ("mu", RateParam::Const(mu))])).unwrap()
}

/// Ξ for RBM-driven arrivals: closed form, quadrature and the divergence boundary.
fn ac4() -> Outcome {
    let closed = xi_rbm_arrival(1.0, 2f64.sqrt(), 2.0).unwrap();
    let law = StationaryLaw::Exponential { rate: 1.0, shift: 0.0 };
    let quad = compute_xi_diffusive(&mminf_rbm(2.0), &law, 64, &XiConfig::default()).unwrap().value;
    let rel = (quad - 2.0).abs() / 2.0;
    let mut mismatches = Vec::new();
    let mut cases = 0;
    for c in [0.25, 0.5, 1.0, 2.0] {
        for sigma in [0.5, 1.0, 2f64.sqrt(), 2.0] {
            for mu in [0.25, 0.5, 1.0, 2.0, 4.0] {
                cases += 1;
                let alpha = 2.0 * c / (sigma * sigma);
                let diverges = alpha <= 1.0 / mu;
                let law = StationaryLaw::Exponential { rate: alpha, shift: 0.0 };
                let q = compute_xi_diffusive(&mminf_rbm(mu), &law, 64, &XiConfig::default());
                let flagged = matches!(q, Err(DiffusiveError::XiDivergent(_)));
                let closed_flagged = matches!(xi_rbm_arrival(c, sigma, mu), Err(DiffusiveError::XiDivergent(_)));
                if flagged != diverges || closed_flagged != diverges {
                    mismatches.push(format!("(c={c}, σ={sigma}, μ={mu})"));
                }
            }
        }
    }
    outcome(
        (closed - 2.0).abs() < 1e-12 && rel < 1e-6 && mismatches.is_empty(),
        format!(
            "closed form {closed}, quadrature {quad:.12} (rel {rel:.1e}); divergence flag wrong in {} of {cases} cases {}",
            mismatches.len(),
            mismatches.join(" ")
        ),
    )
}

/// Binned joint occupancy for RBM-driven M/M/∞ against the product-form law.
fn ac5() -> Outcome {
    let example = DiffusiveExample::RbmHalfline {
        c: 1.0,
        sigma: 2f64.sqrt(),
        lower: 0.0,
    };
    let spec = example.spec().unwrap();
    let law = stationary_law(&example).unwrap();
    let model = mminf_rbm(2.0).with_variability(Variability::Constant(1.0));
    let cfg = SimConfig {
        dt: 1e-3,
        horizon: 1e3,
        burn_in: 50.0,
        seed: 51,
        ..SimConfig::default()
    };
    let binning = Binning::default_for(&law).unwrap();
    let n_cap = 12;
    let occ = simulate_joint_replicas(&model, &spec, &cfg, &JointState::new(0, vec![0.0]), n_cap, &binning, 32).unwrap();
    let reference = binned_invariant(&model, &law, &binning, n_cap, &XiConfig::default()).unwrap();
    let tv = tv_distance(&occ.masses(), &reference).unwrap();
    outcome(
        tv <= 0.03,
        format!("TV {tv:.5} over {} steps × 32 replicas, {} cells (tolerance 0.03)", cfg.steps(), reference.len()),
    )
}

/// `g`, `θ` and the race bounds.
fn ac6() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    for p in [0.1, 0.25, 0.4] {
        let g1 = g(1.0, p).unwrap();
        let b: f64 = 4.0 * p * (1.0 - p);
        let edge = g(b.powf(-0.5), p).unwrap();
        let err = (edge - ((1.0 - p) / p).sqrt()).abs();
        ok &= g1 == 1.0 && err < 1e-12;
        notes.push(format!("p̄={p}: g(1)={g1}, edge err {err:.1e}"));
    }
    let p = 0.3;
    let mut worst_z: f64 = 0.0;
    for (k, s) in [0.6, 0.95, 1.05].into_iter().enumerate() {
        let (est, truncated) = walk_return_pgf(p, s, 200_000, 60 + k as u64, 1_000_000);
        let z = (est.mean - g(s, p).unwrap()).abs() / est.stderr;
        ok &= z <= 3.0 && truncated == 0;
        worst_z = worst_z.max(z);
    }
    notes.push(format!("walk PGF worst |z| {worst_z:.2}"));
    let t0 = theta(2.0, 1.0, 1.0, 0.0).unwrap();
    ok &= t0 == 1.0;
    let mut race_ok = true;
    for (k, (alpha, beta, gamma, a)) in [(2.0, 1.0, 1.5, 0.4), (1.5, 2.0, 0.5, 1.0), (5.0, 0.5, 3.0, 0.2)]
        .into_iter()
        .enumerate()
    {
        let rc = race_check(alpha, beta, gamma, a, 200_000, 70 + k as u64).unwrap();
        race_ok &= rc.p_ok && rc.mgf_ok;
    }
    ok &= race_ok;
    notes.push(format!("θ(α,β,γ,0)={t0}, race bounds hold: {race_ok}"));
    outcome(ok, notes.join("; "))
}

fn mm1_rho(rho: f64) -> ModelSpec {
    catalog(
        "mm1",
        &params(&[
            ("lambda", RateParam::Coord { coord: 0, scale: rho, offset: 0.0 }),
            ("mu", RateParam::coord(0)),
        ]),
    )
    .unwrap()
    .with_variability(Variability::Geometric(rho))
}

/// Exponential-rate certificate and the coupled tail slope.
fn ac7() -> Outcome {
    let model = mm1_rho(0.3);
    let env = two_state(0.3, [1.0, 2.0]);
    let profile = bounds_profile(&model, &[vec![1.0], vec![2.0]], 200).unwrap();
    let fit = fit_env_coupling(&env, 10_000, 71).unwrap();
    let cert = best_exponential_s1(&profile, fit.alpha, fit.gamma).unwrap();
    let sample = couple_exponential(&model, &env, (5, 0), (0, 1), 10_000, 1e4, 72).unwrap();
    let slope = sample.tail.as_ref().map_or(f64::NAN, |t| t.slope);
    let ok = cert.valid && cert.kappa > 0.0 && sample.censored == 0 && slope <= -cert.kappa * 0.9;
    outcome(
        ok,
        format!(
            "α {:.4}, γ {:.4}, κ {:.5} (u {:.4}, ε {:.4}, residual {:.2e}); tail slope {slope:.4} vs −0.9κ = {:.5}",
            fit.alpha,
            fit.gamma,
            cert.kappa,
            cert.u,
            cert.epsilon,
            cert.condition_residual,
            -0.9 * cert.kappa
        ),
    )
}

/// Pathwise domination and the hitting-time table.
fn ac8() -> Outcome {
    let model = mm1_rho(0.3);
    let env = two_state(0.3, [1.0, 2.0]);
    let pw = domination_pwalk(&model, &env, 0.3 / 1.3, 1, 10_000, 81);
    let inf_model = catalog(
        "mminf",
        &params(&[
            ("lambda", RateParam::coord(0)),
            ("mu", RateParam::Coord { coord: 0, scale: 1.0, offset: 2.0 }),
        ]),
    )
    .unwrap();
    let env2 = two_state(0.9, [0.5, 1.0]);
    let mi = domination_mminf(&inf_model, &env2, 1.0, 2.5, 3, 10_000, 82);
    let lyap = lyapunov_certificate(|_| 1.0, |_| 2.0, |n| n as f64, "V(n) = n", 1000).unwrap();
    let dom = ModelSpec::new("mm1", |_, _| 1.0, |_, _| 2.0);
    let rows = hitting_bound_check(&dom, |n| n as f64, lyap.c_v, &[1, 2, 5, 10], 20_000, 83);
    let (rows_ok, table) = match &rows {
        Ok(rows) => {
            let near = rows.iter().all(|r| (r.mean - r.n as f64).abs() <= 3.0 * r.stderr);
            let t: Vec<String> = rows
                .iter()
                .map(|r| format!("n={}: {:.3}±{:.3} ≤ {:.1}", r.n, r.mean, r.stderr, r.bound))
                .collect();
            (near, t.join(", "))
        }
        Err(e) => (false, e.to_string()),
    };
    outcome(
        pw.violations == 0 && mi.violations == 0 && rows_ok && lyap.c_v == 1.0,
        format!(
            "p̄-walk violations {} / {} events, M/M/∞ violations {} / {} events; C̄_V {}; {table}",
            pw.violations, pw.events, mi.violations, mi.events, lyap.c_v
        ),
    )
}

/// Polynomial TV decay for service rate `μ̄ + √n`.
fn ac9() -> Outcome {
    let model = catalog("sqrt_service", &params(&[("lambda", RateParam::Const(1.0)), ("mu", RateParam::Const(1.0))])).unwrap();
    let env = EnvChainSpec::frozen(vec![EnvState::new("only", vec![])]);
    let n_cap = 60;
    let w = normalized_weights(&model, &[], 400, 1e-12).unwrap();
    let mut reference: Vec<f64> = w.kappa[..=n_cap].to_vec();
    reference.push((1.0 - reference.iter().sum::<f64>()).max(0.0));
    let grid = log_grid(10.0, 1e3, 200);
    let curve = tv_decay(&model, &env, (100, 0), &reference, n_cap, &grid, 10_000, 91, (10.0, 1e3), None).unwrap();
    let points = curve.fit.as_ref().map_or(0, |f| f.points);
    match curve.exponent {
        Some(e) => outcome(
            e >= 0.8,
            format!(
                "fitted exponent {e:.3} over {points} points above 3× noise floor {:.4}",
                curve.noise_floor
            ),
        ),
        None => outcome(false, format!("no fit: fewer than the minimum points above 3× noise floor {:.4}", curve.noise_floor)),
    }
}

fn csv_files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    v.sort();
    v
}

/// Every command re-run from its manifest reproduces its CSV outputs.
fn ac10() -> Outcome {
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    let tmp = tempfile::tempdir().unwrap();
    let runs = [
        ("invariant", "mm1_two_state.toml"),
        ("simulate", "mm1_two_state.toml"),
        ("rates", "mm1_two_state.toml"),
        ("verify", "mm1_two_state.toml"),
        ("invariant", "rbm_mminf.toml"),
        ("rates", "sqrt_service.toml"),
    ];
    let mut compared = 0;
    let mut diffs = Vec::new();
    for (k, (cmd, cfg)) in runs.iter().enumerate() {
        let a = tmp.path().join(format!("{k}a"));
        let b = tmp.path().join(format!("{k}b"));
        let first = Command::new(env!("CARGO_BIN_EXE_bdenv"))
            .args([cmd, "--config"])
            .arg(configs.join(cfg))
            .arg("--out")
            .arg(&a)
            .output()
            .unwrap();
        let second = Command::new(env!("CARGO_BIN_EXE_bdenv"))
            .args([cmd, "--config"])
            .arg(a.join("manifest.toml"))
            .arg("--out")
            .arg(&b)
            .output()
            .unwrap();
        if first.status.code() != second.status.code() {
            diffs.push(format!("{cmd} {cfg}: exit status differs"));
        }
        let files = csv_files(&a);
        if files != csv_files(&b) {
            diffs.push(format!("{cmd} {cfg}: file sets differ"));
        }
        for f in files {
            compared += 1;
            if fs::read(a.join(&f)).unwrap() != fs::read(b.join(&f)).unwrap() {
                diffs.push(format!("{cmd} {cfg}: {f}"));
            }
        }
    }
    outcome(
        diffs.is_empty() && compared > 0,
        format!("{compared} CSV files compared, {} differ {}", diffs.len(), diffs.join("; ")),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, u64); 10] = [
        ("product-form stationarity (jump environment)", ac1, 10),
        ("Gillespie occupancy vs analytic law", ac2, 60),
        ("diffusive stationary laws", ac3, 240),
        ("Ξ closed form, quadrature and divergence boundary", ac4, 1),
        ("joint diffusive invariant measure", ac5, 300),
        ("auxiliary functions g, θ and race bounds", ac6, 60),
        ("exponential-rate certificate and coupling tail", ac7, 300),
        ("domination and hitting-time bounds", ac8, 120),
        ("polynomial TV decay", ac9, 600),
        ("determinism from manifests", ac10, 600),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, f, budget)) in criteria.iter().enumerate() {
        let id = format!("AC{}", k + 1);
        if !filter.is_empty() && !filter.iter().any(|p| id == *p) {
            continue;
        }
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        let in_time = secs < *budget as f64;
        let pass = o.pass && in_time;
        if !pass {
            failed += 1;
        }
        println!(
            "{id} {}: {name}: {} [{secs:.2}s of {budget}s]",
            if pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
