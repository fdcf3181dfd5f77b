//! Acceptance suite: one PASS/FAIL line per criterion. Exits nonzero if any
//! criterion fails.

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use dgff_core::coupling::sticky_gaussian;
use dgff_core::experiments::ScalingReport;
use dgff_core::spectral::laplacian_matrix;
use dgff_core::stats::{ks_p_value, ks_statistic, mean_se, normal_cdf};
use dgff_core::{
    backward_propagate, backward_propagate_with, coalescence_scaling_study, covariance_gap_check, cutoff_profile_study,
    eigenpair, lambda_1, mean_decay_study, representation_check, rng_for, sample_schedule, survival_experiment,
    BackwardOptions, DecayConfig, GreensMatrix, GreensMethod, HeightField, LatticeBox, ProfileConfig, Role,
    ScalingConfig, StationarySampler, SurvivalConfig, SwitchPolicy,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn erf(x: f64) -> f64 {
    2.0 * normal_cdf(x * std::f64::consts::SQRT_2) - 1.0
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

fn representation_identity() -> Outcome {
    let mut worst = 0.0f64;
    for n in [4, 8] {
        let bx = LatticeBox::new(n).unwrap();
        let sampler = StationarySampler::spectral(&bx);
        for t in [50.0, 200.0] {
            let w = (0..50u64)
                .into_par_iter()
                .map(|s| {
                    let sched = sample_schedule(&bx, t, &mut rng_for(101, s, Role::Schedule)).unwrap();
                    let h0 = sampler.sample(&bx, &mut rng_for(101, s, Role::Init)).unwrap();
                    representation_check(&bx, &h0, &sched, t).unwrap()
                })
                .reduce(|| 0.0, f64::max);
            worst = worst.max(w);
        }
    }
    outcome(
        worst < 1e-8,
        format!("max deviation {worst:.3e} (< 1e-8) over n ∈ {{4,8}}, t ∈ {{50,200}}, 50 seeds"),
    )
}

fn covariance_identity() -> Outcome {
    let bx = LatticeBox::new(4).unwrap();
    let g = GreensMatrix::new(&bx, GreensMethod::Fourier).unwrap();
    let opts = BackwardOptions {
        covariance: true,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for s in 0..20u64 {
        let t = 10.0 + 10.0 * s as f64;
        let sched = sample_schedule(&bx, t, &mut rng_for(102, s, Role::Schedule)).unwrap();
        let b = backward_propagate_with(&bx, &sched, &HeightField::zeros(&bx), t, &opts).unwrap();
        worst = worst.max(covariance_gap_check(&b, &g).unwrap());
    }
    outcome(
        worst < 1e-8,
        format!("max |G − AAᵀ − HGHᵀ| {worst:.3e} (< 1e-8), n = 4, 20 seeds"),
    )
}

fn spectral_suite() -> Outcome {
    let mut residual = 0.0f64;
    let mut gram = 0.0f64;
    let mut greens = 0.0f64;
    for n in [2, 3, 4, 8, 16, 32] {
        let bx = LatticeBox::new(n).unwrap();
        let m = bx.len();
        let mut phis = DMatrix::zeros(m, m);
        let mut lambdas = Vec::with_capacity(m);
        for i2 in 1..n {
            for i1 in 1..n {
                let (l, phi) = eigenpair(&bx, (i1, i2)).unwrap();
                phis.set_column(lambdas.len(), &DVector::from_vec(phi));
                lambdas.push(l);
            }
        }
        let applied = laplacian_matrix(&bx) * &phis;
        for (c, l) in lambdas.iter().enumerate() {
            residual = residual.max((applied.column(c) - phis.column(c) * *l).amax());
        }
        gram = gram.max((phis.transpose() * &phis - DMatrix::identity(m, m)).amax());
        let f = GreensMatrix::new(&bx, GreensMethod::Fourier).unwrap();
        let s = GreensMatrix::new(&bx, GreensMethod::LinearSolve).unwrap();
        greens = greens.max(f.max_abs_diff(&s));
    }
    let bx = LatticeBox::new(3).unwrap();
    let mut hand = 0.0f64;
    for method in [GreensMethod::Fourier, GreensMethod::LinearSolve] {
        let g = GreensMatrix::new(&bx, method).unwrap();
        let expect = |x: usize, y: usize| match (x, y) {
            _ if x == y => 7.0 / 6.0,
            (0, 3) | (3, 0) | (1, 2) | (2, 1) => 1.0 / 6.0,
            _ => 1.0 / 3.0,
        };
        for x in 0..4 {
            for y in 0..4 {
                hand = hand.max((g.get(x, y) - expect(x, y)).abs());
            }
        }
    }
    let pass = residual < 1e-10 && gram < 1e-10 && greens < 1e-8 && hand < 1e-12;
    outcome(
        pass,
        format!(
            "eigen residual {residual:.2e} (< 1e-10), orthonormality {gram:.2e} (< 1e-10), \
             Fourier vs solve {greens:.2e} (< 1e-8), n = 3 hand values {hand:.2e} (< 1e-12)"
        ),
    )
}

fn survival_asymptotics() -> Outcome {
    let n = 16;
    let nf = n as f64;
    let rep = survival_experiment(&SurvivalConfig {
        n,
        t: 3.0 * nf * nf * nf.ln(),
        replicas: 100,
        seed: 104,
        ratio_band: (0.8, 1.25),
        walks_per_schedule: 20,
        clock_window_r: 3.0,
    })
    .unwrap();
    let worst_mean = rep
        .sites
        .iter()
        .map(|s| (s.mean_survival / s.prediction - 1.0).abs())
        .fold(0.0, f64::max);
    let lo = rep.sites.iter().map(|s| s.min_ratio).fold(f64::INFINITY, f64::min);
    let hi = rep.sites.iter().map(|s| s.max_ratio).fold(0.0, f64::max);

    let bx = LatticeBox::new(2).unwrap();
    let t = 1.5;
    let surv: Vec<f64> = (0..20_000u64)
        .into_par_iter()
        .map(|r| {
            let s = sample_schedule(&bx, t, &mut rng_for(204, r, Role::Schedule)).unwrap();
            backward_propagate(&bx, &s, &HeightField::zeros(&bx), t)
                .unwrap()
                .survival()[0]
        })
        .collect();
    let (m2, se2) = mean_se(&surv);
    let one_site = (m2 - (-t).exp()).abs() < 3.0 * se2;

    outcome(
        rep.fraction_within_band >= 0.9 && one_site,
        format!(
            "n = 16: {}/{} schedules with every central site in ×[0.8, 1.25] (fraction {:.3}, need ≥ 0.9); \
             ratios span [{lo:.3}, {hi:.3}]; schedule-averaged survival within {:.1}% of prediction; \
             n = 2: {m2:.5} ± {se2:.5} vs e^(−1.5) = {:.5} ({})",
            rep.schedules_within_band,
            rep.replicas,
            rep.fraction_within_band,
            100.0 * worst_mean,
            (-t).exp(),
            if one_site { "ok" } else { "off" },
        ),
    )
}

fn mean_decay_rate() -> Outcome {
    let grid = |n: usize, k: usize| {
        let nf = n as f64;
        linspace(2.0 * nf * nf, 8.0 * nf * nf * nf.ln(), k)
    };
    let main = mean_decay_study(&DecayConfig {
        n: 16,
        init_height: 16.0,
        times: grid(16, 10),
        replicas: 10_000,
        seed: 105,
        oracle_max_n: 12,
    })
    .unwrap();
    let oracle = mean_decay_study(&DecayConfig {
        n: 12,
        init_height: 12.0,
        times: grid(12, 10),
        replicas: 1_000,
        seed: 205,
        oracle_max_n: 12,
    })
    .unwrap();
    let worst_z = oracle
        .points
        .iter()
        .map(|p| (p.mean - p.oracle.unwrap()).abs() / p.se)
        .fold(0.0, f64::max);
    outcome(
        main.relative_error < 0.05 && worst_z < 3.0,
        format!(
            "n = 16, 10⁴ replicas: slope {:.7} vs −λ₁ = {:.7} (relative error {:.2e}, < 0.05); \
             n = 12 semigroup oracle: worst |mean − oracle| = {worst_z:.2} SE (< 3)",
            main.slope,
            -lambda_1(16),
            main.relative_error,
        ),
    )
}

fn sticky_optimality() -> Outcome {
    let draws = 1_000_000u64;
    let mut worst_z = 0.0f64;
    let mut worst_p = 1.0f64;
    let mut parts = Vec::new();
    for (k, mu) in [0.01f64, 0.1, 1.0, 3.0].into_iter().enumerate() {
        let (a, b) = (0.0, 2.0 * mu);
        let samples: Vec<(f64, f64, bool)> = (0..draws)
            .into_par_iter()
            .map(|i| {
                let mut rng = rng_for(106 + k as u64, i, Role::Marks);
                let d = sticky_gaussian(a, b, &mut rng).unwrap();
                (d.z_a, d.z_b, d.coupled)
            })
            .collect();
        let failures = samples.iter().filter(|s| !s.2).count() as f64;
        let p = erf(mu / std::f64::consts::SQRT_2);
        let rate = failures / draws as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        let z = (rate - p).abs() / se;
        worst_z = worst_z.max(z);
        let za: Vec<f64> = samples.iter().map(|s| s.0).collect();
        let zb: Vec<f64> = samples.iter().map(|s| s.1).collect();
        let pa = ks_p_value(ks_statistic(&za, |x| normal_cdf(x - a)), draws as f64);
        let pb = ks_p_value(ks_statistic(&zb, |x| normal_cdf(x - b)), draws as f64);
        worst_p = worst_p.min(pa).min(pb);
        parts.push(format!("μ={mu}: {rate:.6} vs {p:.6} ({z:.2} SE)"));
    }
    outcome(
        worst_z <= 3.0 && worst_p > 1e-3,
        format!("{}; marginal KS min p {worst_p:.3} (> 1e-3)", parts.join(", ")),
    )
}

fn scaling_study() -> ScalingReport {
    coalescence_scaling_study(&ScalingConfig {
        n_list: vec![8, 16, 32],
        replicas: 200,
        seed: 108,
        switch: SwitchPolicy::LogLog,
        horizon_multiplier: 4.0,
        drift_window_n2: 0.125,
        bracket_diagnostics: false,
        v_grid_n2: vec![],
    })
    .unwrap()
}

fn monotone_supermartingale(rep: &ScalingReport) -> Outcome {
    let all: Vec<_> = rep.records.iter().flatten().cloned().collect();
    let violations: u64 = all.iter().map(|r| r.negativity_violations).sum();
    let drift = dgff_core::coupling::supermartingale_drift_check(&all);
    outcome(
        violations == 0 && drift.within_bound,
        format!(
            "{violations} negativity violations over {} coupled runs; mean window drift of V {:.2} ± {:.2} \
             over {} windows (≤ +3 SE)",
            all.len(),
            drift.mean,
            drift.se,
            drift.windows,
        ),
    )
}

fn coalescence_scaling(rep: &ScalingReport) -> Outcome {
    let decreasing = rep.rows.windows(2).all(|w| w[1].normalized < w[0].normalized);
    let last = rep.rows.last().unwrap();
    let within = last.normalized >= last.reference / 2.0 && last.normalized <= last.reference * 2.0;
    let rows: Vec<String> = rep
        .rows
        .iter()
        .map(|r| {
            format!(
                "n={} {:.4} ({}/{} coalesced)",
                r.n, r.normalized, r.coalesced, r.replicas
            )
        })
        .collect();
    outcome(
        decreasing && within,
        format!(
            "median t_coal/(n² log n): {}; decreasing: {decreasing}; reference 2·(2/π²) = {:.4}, \
             n = 32 within ×2: {within}",
            rows.join(", "),
            last.reference,
        ),
    )
}

fn cutoff_profile() -> Outcome {
    let rep = cutoff_profile_study(&ProfileConfig {
        n: 32,
        a: 32.0,
        c0: 4.0,
        s_grid: vec![-1.0, -0.5, 0.0, 0.5, 1.0, 2.0, 3.0],
        replicas: 500,
        seed: 109,
        histogram_bins: None,
    })
    .unwrap();
    let monotone = rep.points.windows(2).all(|w| w[1].estimate <= w[0].estimate);
    let worst = rep
        .points
        .iter()
        .map(|p| (p.estimate - p.prediction).abs())
        .fold(0.0, f64::max);
    let pts: Vec<String> = rep
        .points
        .iter()
        .map(|p| format!("s={}: {:.4} vs {:.4}", p.s, p.estimate, p.prediction))
        .collect();
    outcome(
        monotone && worst <= 0.1,
        format!(
            "{}; max |estimate − prediction| {worst:.4} (≤ 0.1); monotone: {monotone}; shift a − C₀ log n = {:.3}",
            pts.join(", "),
            rep.shift,
        ),
    )
}

fn csv_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

fn determinism() -> Outcome {
    let commands: [&[&str]; 7] = [
        &["spectral", "--n", "8", "--phi"],
        &[
            "simulate",
            "--n",
            "8",
            "--t",
            "50",
            "--init",
            "stationary",
            "--seed",
            "3",
            "--snapshots",
            "0,25,50",
        ],
        &["btrw-verify", "--n", "8", "--t", "200", "--seeds", "10", "--seed", "4"],
        &["couple", "--n", "8", "--replicas", "8", "--seed", "5"],
        &["decay", "--n", "8", "--replicas", "200", "--seed", "6"],
        &["profile", "--n", "16", "--a", "24", "--replicas", "40", "--seed", "7"],
        &["coalescence", "--n-list", "6,8", "--replicas", "20", "--seed", "8"],
    ];
    let tmp = tempfile::tempdir().unwrap();
    let mut mismatches = Vec::new();
    let mut files = 0;
    for (k, args) in commands.iter().enumerate() {
        let first = tmp.path().join(format!("{k}-a"));
        let second = tmp.path().join(format!("{k}-b"));
        let rerun = tmp.path().join(format!("{k}-c"));
        let mut argv: Vec<String> = vec!["dgff".into()];
        argv.extend(args.iter().map(|s| s.to_string()));
        let code_a = dgff_cli::run(
            argv.iter()
                .cloned()
                .chain(["--out-dir".into(), first.display().to_string()]),
        );
        let code_b = dgff_cli::run(argv.iter().cloned().chain([
            "--out-dir".into(),
            second.display().to_string(),
            "--threads".into(),
            "3".into(),
        ]));
        let manifest = first.join("manifest.json").display().to_string();
        let code_c = dgff_cli::run(["dgff", "--config", &manifest, "--out-dir", &rerun.display().to_string()]);
        let a = csv_bytes(&first);
        if code_a != 0 || code_b != 0 || code_c != 0 || a.is_empty() {
            mismatches.push(format!("{} exited {code_a}/{code_b}/{code_c}", args[0]));
            continue;
        }
        files += a.len();
        if a != csv_bytes(&second) || a != csv_bytes(&rerun) {
            mismatches.push(args[0].to_string());
        }
    }
    outcome(
        mismatches.is_empty(),
        format!(
            "{files} CSVs from 7 commands compared across repeat, 3-thread and manifest reruns; mismatches: {}",
            if mismatches.is_empty() {
                "none".to_string()
            } else {
                mismatches.join(", ")
            }
        ),
    )
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome, failed: &mut Vec<usize>) {
    let start = Instant::now();
    let o = f();
    let secs = start.elapsed().as_secs_f64();
    println!(
        "{} criterion {id:>2} {name}: {} [{secs:.1} s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail
    );
    if !o.pass {
        failed.push(id);
    }
}

fn main() {
    let mut failed = Vec::new();
    report(1, "representation identity", representation_identity, &mut failed);
    report(2, "covariance identity", covariance_identity, &mut failed);
    report(3, "spectral suite", spectral_suite, &mut failed);
    report(4, "survival asymptotics", survival_asymptotics, &mut failed);
    report(5, "mean-decay rate", mean_decay_rate, &mut failed);
    report(6, "sticky coupling optimality", sticky_optimality, &mut failed);
    let start = Instant::now();
    let study = scaling_study();
    println!(
        "(coalescence study for criteria 7 and 8 took {:.1} s)",
        start.elapsed().as_secs_f64()
    );
    report(
        7,
        "monotonicity and supermartingale",
        || monotone_supermartingale(&study),
        &mut failed,
    );
    report(8, "coalescence scaling", || coalescence_scaling(&study), &mut failed);
    report(9, "cutoff-profile lower bound", cutoff_profile, &mut failed);
    report(10, "determinism", determinism, &mut failed);
    if failed.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: {} of 10 criteria failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
}
