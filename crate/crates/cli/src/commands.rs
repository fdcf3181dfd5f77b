use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use dgff_core::coupling::{supermartingale_drift_check, volume_scales};
use dgff_core::spectral::{SpectralData, DENSE_GREENS_MAX_N};
use dgff_core::{
    backward_propagate_with, coalescence_scaling_study, covariance_gap_check, cutoff_profile_study, lambda_1,
    mean_decay_study, representation_check, rng_for, run_forward, run_two_stage, sample_schedule, t_star,
    BackwardOptions, CoalescenceRecord, DecayConfig, GreensMatrix, GreensMethod, HeightField, InitialCondition,
    LatticeBox, ProfileConfig, Role, ScalingConfig, StationarySampler, SwitchPolicy, SwitchRule, TwoStageParams,
};

use crate::output::{Cell, Run, Table};
use crate::{
    BtrwVerifyArgs, Cli, CliError, CoalescenceArgs, Command, CoupleArgs, CoupleMode, DecayArgs, ProfileArgs,
    SimulateArgs, SpectralArgs,
};

pub(crate) fn dispatch(cli: &Cli, threads: usize, argv: &[String]) -> Result<(), CliError> {
    let dir = cli.out_dir.as_path();
    match &cli.command {
        Command::Spectral(a) => spectral(dir, a, threads, argv),
        Command::Simulate(a) => simulate(dir, a, threads, argv),
        Command::BtrwVerify(a) => btrw_verify(dir, a, threads, argv),
        Command::Couple(a) => couple(dir, a, threads, argv),
        Command::Decay(a) => decay(dir, a, threads, argv),
        Command::Profile(a) => profile(dir, a, threads, argv),
        Command::Coalescence(a) => coalescence(dir, a, threads, argv),
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(format!("{name} must be positive and finite (got {v})")))
    }
}

fn spectral(dir: &Path, a: &SpectralArgs, threads: usize, argv: &[String]) -> Result<(), CliError> {
    let bx = LatticeBox::new(a.n)?;
    let mut run = Run::start(dir, "spectral", a, None, threads, argv)?;
    let data = SpectralData::new(&bx);
    let mut t = Table::new("spectral.csv", &["i1", "i2", "lambda"]);
    for &(i1, i2, l) in &data.eigenvalues {
        t.row(vec![i1.into(), i2.into(), l.into()]);
    }
    run.write_table(t)?;
    if a.phi {
        let mut t = Table::new("phi1.csv", &["x1", "x2", "phi1", "phi_hat1"]);
        for (k, (p, ph)) in data.phi_1.iter().zip(&data.phi_hat_1).enumerate() {
            let (x1, x2) = bx.site(k);
            t.row(vec![x1.into(), x2.into(), (*p).into(), (*ph).into()]);
        }
        run.write_table(t)?;
    }
    let mut summary = json!({ "n": a.n, "lambda_1": data.lambda_1, "modes": data.eigenvalues.len() });
    if a.greens {
        if a.n > DENSE_GREENS_MAX_N {
            return Err(invalid(format!("--greens needs n ≤ {DENSE_GREENS_MAX_N}")));
        }
        let fourier = GreensMatrix::new(&bx, GreensMethod::Fourier)?;
        let solve = GreensMatrix::new(&bx, GreensMethod::LinearSolve)?;
        summary["greens_max_abs_diff"] = fourier.max_abs_diff(&solve).into();
        summary["greens_center"] = fourier.get(bx.center_index(), bx.center_index()).into();
    }
    run.write_json("spectral_summary.json", &summary)?;
    run.finish("ok")
}

fn simulate(dir: &Path, a: &SimulateArgs, threads: usize, argv: &[String]) -> Result<(), CliError> {
    let bx = LatticeBox::new(a.n)?;
    if !(a.t.is_finite() && a.t >= 0.0) {
        return Err(invalid(format!("t must be finite and ≥ 0 (got {})", a.t)));
    }
    let init: InitialCondition = a.init.parse()?;
    let times = if a.snapshots.is_empty() {
        vec![a.t]
    } else {
        a.snapshots.clone()
    };
    if let Some(&bad) = times.iter().find(|&&s| !(0.0..=a.t).contains(&s)) {
        return Err(invalid(format!("snapshot time {bad} outside [0, {}]", a.t)));
    }
    let mut run = Run::start(dir, "simulate", a, Some(a.seed), threads, argv)?;
    let sampler = matches!(
        init,
        InitialCondition::Stationary | InitialCondition::ShiftedStationary(_)
    )
    .then(|| StationarySampler::spectral(&bx));
    let h0 = init.build(&bx, sampler.as_ref(), &mut rng_for(a.seed, 0, Role::Init))?;
    let schedule = sample_schedule(&bx, a.t, &mut rng_for(a.seed, 0, Role::Schedule))?;
    let traj = run_forward(&bx, &h0, &schedule, &times)?;
    let mut t = Table::new("snapshots.csv", &["time", "x1", "x2", "height"]);
    for s in &traj.snapshots {
        for (k, &h) in s.field.values.iter().enumerate() {
            let (x1, x2) = bx.site(k);
            t.row(vec![s.time.into(), x1.into(), x2.into(), h.into()]);
        }
    }
    run.write_table(t)?;
    let stats: Vec<_> = traj
        .snapshots
        .iter()
        .map(|s| json!({ "time": s.time, "mean": s.field.sum() / bx.len() as f64, "max_abs": s.field.max_abs() }))
        .collect();
    run.write_json(
        "simulate_summary.json",
        &json!({
            "n": a.n,
            "t": a.t,
            "init": init,
            "events": schedule.len(),
            "initial_mean": h0.sum() / bx.len() as f64,
            "snapshots": stats,
        }),
    )?;
    run.finish("ok")
}

fn btrw_verify(dir: &Path, a: &BtrwVerifyArgs, threads: usize, argv: &[String]) -> Result<(), CliError> {
    let bx = LatticeBox::new(a.n)?;
    positive("t", a.t)?;
    positive("tolerance", a.tolerance)?;
    if a.seeds == 0 {
        return Err(invalid("seeds must be positive"));
    }
    let mut run = Run::start(dir, "btrw-verify", a, Some(a.seed), threads, argv)?;
    let greens = if a.n <= DENSE_GREENS_MAX_N {
        Some(GreensMatrix::new(&bx, GreensMethod::Fourier)?)
    } else {
        None
    };
    let sampler = StationarySampler::spectral(&bx);
    let rows: Vec<(u64, f64, Option<f64>)> = (0..a.seeds)
        .into_par_iter()
        .map(|s| {
            let schedule = sample_schedule(&bx, a.t, &mut rng_for(a.seed, s, Role::Schedule))?;
            let h0 = sampler.sample(&bx, &mut rng_for(a.seed, s, Role::Init))?;
            let dev = representation_check(&bx, &h0, &schedule, a.t)?;
            let gap = match &greens {
                Some(g) => {
                    let opts = BackwardOptions {
                        covariance: true,
                        ..Default::default()
                    };
                    let b = backward_propagate_with(&bx, &schedule, &h0, a.t, &opts)?;
                    Some(covariance_gap_check(&b, g)?)
                }
                None => None,
            };
            Ok((s, dev, gap))
        })
        .collect::<Result<_, dgff_core::DgffError>>()?;
    let mut t = Table::new("btrw_verify.csv", &["seed", "max_deviation", "covariance_gap_error"]);
    for &(s, dev, gap) in &rows {
        t.row(vec![s.into(), dev.into(), gap.into()]);
    }
    run.write_table(t)?;
    let worst_dev = rows.iter().map(|r| r.1).fold(0.0, f64::max);
    let worst_gap = rows.iter().filter_map(|r| r.2).fold(0.0, f64::max);
    let violations = rows
        .iter()
        .filter(|r| !(r.1 < a.tolerance) || r.2.is_some_and(|g| !(g < a.tolerance)))
        .count();
    run.write_json(
        "btrw_verify_summary.json",
        &json!({
            "n": a.n,
            "t": a.t,
            "seeds": a.seeds,
            "tolerance": a.tolerance,
            "max_deviation": worst_dev,
            "max_covariance_gap_error": worst_gap,
            "violations": violations,
        }),
    )?;
    if violations > 0 {
        run.finish("verification-failed")?;
        return Err(CliError::Verification(format!(
            "{violations} of {} seeds exceed tolerance {:e} (max deviation {worst_dev:e}, max covariance gap {worst_gap:e})",
            a.seeds, a.tolerance
        )));
    }
    run.finish("ok")
}

fn write_record_tables(run: &mut Run, records: &[CoalescenceRecord], with_n: bool) -> Result<(), CliError> {
    let (vol_header, scale_header): (&[&str], &[&str]) = if with_n {
        (
            &["n", "replica", "t", "V", "N_active", "l2_trunc"],
            &["n", "replica", "scale_i", "level", "T_i", "coalescence_time"],
        )
    } else {
        (
            &["replica", "t", "V", "N_active", "l2_trunc"],
            &["replica", "scale_i", "level", "T_i", "coalescence_time"],
        )
    };
    let prefix = |r: &CoalescenceRecord| -> Vec<Cell> {
        let mut v = Vec::new();
        if with_n {
            v.push(r.n.into());
        }
        v.push(r.replica.into());
        v
    };
    let mut vol = Table::new("couple_volume.csv", vol_header);
    let mut scales = Table::new("couple_scales.csv", scale_header);
    for r in records {
        for g in &r.grid {
            let mut row = prefix(r);
            row.extend([g.t.into(), g.volume.into(), g.active.into(), g.l2_truncated.into()]);
            vol.row(row);
        }
        for h in &r.hitting_times {
            let mut row = prefix(r);
            row.extend([h.scale.into(), h.level.into(), h.time.into(), r.coalescence_time.into()]);
            scales.row(row);
        }
    }
    run.write_table(vol)?;
    run.write_table(scales)
}

fn couple(dir: &Path, a: &CoupleArgs, threads: usize, argv: &[String]) -> Result<(), CliError> {
    let bx = LatticeBox::new(a.n)?;
    positive("horizon-multiplier", a.horizon_multiplier)?;
    positive("drift-window", a.drift_window)?;
    if a.replicas == 0 {
        return Err(invalid("replicas must be positive"));
    }
    let nf = a.n as f64;
    let policy: SwitchPolicy = a.switch.parse()?;
    let mut params = TwoStageParams::new(a.n, a.seed)?;
    params.switch = match a.mode {
        CoupleMode::Identity => SwitchRule::Never,
        CoupleMode::Sticky => SwitchRule::Immediate,
        CoupleMode::TwoStage => policy.rule(a.n, nf)?,
    };
    params.horizon = a.horizon_multiplier * t_star(nf, nf.max(1.5))?;
    params.drift_window = a.drift_window * nf * nf;
    params.bracket_diagnostics = a.bracket;
    params.v_grid = if a.v_grid.is_empty() {
        (0..=100).map(|k| params.horizon * k as f64 / 100.0).collect()
    } else {
        let mut g: Vec<f64> = a.v_grid.iter().map(|v| v * nf * nf).collect();
        g.sort_by(f64::total_cmp);
        g
    };
    let mut run = Run::start(dir, "couple", a, Some(a.seed), threads, argv)?;
    let g0 = HeightField::constant(&bx, -nf);
    let records: Vec<CoalescenceRecord> = (0..a.replicas)
        .into_par_iter()
        .map(|r| run_two_stage(&bx, &g0, &params, r))
        .collect::<Result<_, _>>()?;
    write_record_tables(&mut run, &records, false)?;
    let summary = record_summary(&records);
    let violations = summary["negativity_violations"].as_u64().unwrap_or(0);
    run.write_json(
        "couple_summary.json",
        &json!({
            "n": a.n,
            "mode": a.mode,
            "switch": params.switch,
            "horizon": params.horizon,
            "volume_scales": volume_scales(a.n),
            "results": summary,
        }),
    )?;
    if violations > 0 {
        run.finish("verification-failed")?;
        return Err(CliError::Verification(format!(
            "{violations} negativity violations of dh"
        )));
    }
    run.finish("ok")
}

fn record_summary(records: &[CoalescenceRecord]) -> serde_json::Value {
    let drift = supermartingale_drift_check(records);
    let coalesced = records.iter().filter(|r| r.coalescence_time.is_some()).count();
    let sticky_updates: u64 = records.iter().map(|r| r.sticky_updates).sum();
    let sticky_failures: u64 = records.iter().map(|r| r.sticky_failures).sum();
    let brackets: Vec<_> = records.iter().flat_map(|r| r.bracket.iter()).collect();
    let bracket_ok = brackets
        .iter()
        .filter(|b| {
            let ln = (records[0].n as f64).ln();
            b.rate >= b.volume / (ln * ln)
        })
        .count();
    json!({
        "replicas": records.len(),
        "coalesced": coalesced,
        "negativity_violations": records.iter().map(|r| r.negativity_violations).sum::<u64>(),
        "sticky_updates": sticky_updates,
        "sticky_failures": sticky_failures,
        "drift": drift,
        "bracket_samples": brackets.len(),
        "bracket_above_volume_over_log_sq": bracket_ok,
        "final_sweep_failures": records.iter().filter(|r| r.final_sweep_coalesced == Some(false)).count(),
    })
}

fn decay(dir: &Path, a: &DecayArgs, threads: usize, argv: &[String]) -> Result<(), CliError> {
    LatticeBox::new(a.n)?;
    let nf = a.n as f64;
    let times = if a.times.is_empty() {
        if a.points < 2 {
            return Err(invalid("points must be at least 2"));
        }
        let (lo, hi) = (2.0 * nf * nf, 8.0 * nf * nf * nf.ln());
        (0..a.points)
            .map(|k| lo + (hi - lo) * k as f64 / (a.points - 1) as f64)
            .collect()
    } else {
        a.times.clone()
    };
    let cfg = DecayConfig {
        n: a.n,
        init_height: a.init_height.unwrap_or(nf),
        times,
        replicas: a.replicas,
        seed: a.seed,
        oracle_max_n: a.oracle_max_n,
    };
    let mut run = Run::start(dir, "decay", a, Some(a.seed), threads, argv)?;
    let rep = mean_decay_study(&cfg)?;
    let mut t = Table::new("decay.csv", &["t", "mean", "se", "oracle"]);
    for p in &rep.points {
        t.row(vec![p.t.into(), p.mean.into(), p.se.into(), p.oracle.into()]);
    }
    run.write_table(t)?;
    run.write_json(
        "decay_summary.json",
        &json!({
            "n": rep.n,
            "replicas": rep.replicas,
            "slope": rep.slope,
            "intercept": rep.intercept,
            "lambda_1": rep.lambda_1,
            "relative_error": rep.relative_error,
        }),
    )?;
    run.finish("ok")
}

fn profile(dir: &Path, a: &ProfileArgs, threads: usize, argv: &[String]) -> Result<(), CliError> {
    LatticeBox::new(a.n)?;
    let cfg = ProfileConfig {
        n: a.n,
        a: a.a.unwrap_or(a.n as f64),
        c0: a.c0,
        s_grid: a.s_grid.clone(),
        replicas: a.replicas,
        seed: a.seed,
        histogram_bins: a.histogram_bins,
    };
    let mut run = Run::start(dir, "profile", a, Some(a.seed), threads, argv)?;
    let rep = cutoff_profile_study(&cfg)?;
    let mut t = Table::new(
        "profile.csv",
        &[
            "s",
            "t",
            "clamped",
            "estimate",
            "se",
            "prediction",
            "annealed_exact",
            "histogram_tv",
        ],
    );
    for p in &rep.points {
        t.row(vec![
            p.s.into(),
            p.t.into(),
            p.clamped.into(),
            p.estimate.into(),
            p.se.into(),
            p.prediction.into(),
            p.annealed_exact.into(),
            p.histogram_tv.into(),
        ]);
    }
    run.write_table(t)?;
    let monotone = rep.points.windows(2).all(|w| w[1].estimate <= w[0].estimate);
    let max_gap = rep
        .points
        .iter()
        .map(|p| (p.estimate - p.prediction).abs())
        .fold(0.0, f64::max);
    run.write_json(
        "profile_summary.json",
        &json!({
            "n": rep.n,
            "a": rep.a,
            "c0": rep.c0,
            "shift": rep.shift,
            "t_star": rep.t_star,
            "lambda_1": rep.lambda_1,
            "monotone": monotone,
            "max_abs_gap_to_prediction": max_gap,
        }),
    )?;
    run.finish("ok")
}

fn coalescence(dir: &Path, a: &CoalescenceArgs, threads: usize, argv: &[String]) -> Result<(), CliError> {
    for &n in &a.n_list {
        LatticeBox::new(n)?;
    }
    positive("horizon-multiplier", a.horizon_multiplier)?;
    positive("drift-window", a.drift_window)?;
    let cfg = ScalingConfig {
        n_list: a.n_list.clone(),
        replicas: a.replicas,
        seed: a.seed,
        switch: a.switch.parse()?,
        horizon_multiplier: a.horizon_multiplier,
        drift_window_n2: a.drift_window,
        bracket_diagnostics: false,
        v_grid_n2: vec![],
    };
    let mut run = Run::start(dir, "coalescence", a, Some(a.seed), threads, argv)?;
    let rep = coalescence_scaling_study(&cfg)?;
    let mut t = Table::new(
        "coalescence.csv",
        &["n", "replicas", "coalesced", "median_time", "normalized", "reference"],
    );
    for r in &rep.rows {
        t.row(vec![
            r.n.into(),
            r.replicas.into(),
            r.coalesced.into(),
            r.median_time.into(),
            r.normalized.into(),
            r.reference.into(),
        ]);
    }
    run.write_table(t)?;
    let mut times = Table::new(
        "coalescence_times.csv",
        &[
            "n",
            "replica",
            "switch_time",
            "coalescence_time",
            "events",
            "negativity_violations",
        ],
    );
    for recs in &rep.records {
        for r in recs {
            times.row(vec![
                r.n.into(),
                r.replica.into(),
                r.switch_time.into(),
                r.coalescence_time.into(),
                r.events.into(),
                r.negativity_violations.into(),
            ]);
        }
    }
    run.write_table(times)?;
    let all: Vec<CoalescenceRecord> = rep.records.iter().flatten().cloned().collect();
    let per_n: Vec<_> = rep
        .records
        .iter()
        .map(|recs| json!({ "n": recs.first().map(|r| r.n), "results": record_summary(recs) }))
        .collect();
    let decreasing = rep.rows.windows(2).all(|w| w[1].normalized < w[0].normalized);
    let violations: u64 = all.iter().map(|r| r.negativity_violations).sum();
    run.write_json(
        "coalescence_summary.json",
        &json!({
            "rows": rep.rows,
            "normalized_decreasing": decreasing,
            "lambda_1": a.n_list.iter().map(|&n| lambda_1(n)).collect::<Vec<_>>(),
            "negativity_violations": violations,
            "drift": supermartingale_drift_check(&all),
            "per_n": per_n,
        }),
    )?;
    if violations > 0 {
        run.finish("verification-failed")?;
        return Err(CliError::Verification(format!(
            "{violations} negativity violations of dh"
        )));
    }
    run.finish("ok")
}
