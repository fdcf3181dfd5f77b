//! End-to-end studies: decay of the mean, the cutoff-profile lower bound and
//! the scaling of the two-stage coalescence time.

use std::collections::BTreeMap;
use std::f64::consts::{PI, SQRT_2};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::coupling::{run_two_stage, CoalescenceRecord, SwitchRule, TwoStageParams};
use crate::dynamics::{evolve, EventStream, StationarySampler};
use crate::error::{DgffError, Result};
use crate::lattice::{HeightField, LatticeBox};
use crate::seed::{rng_for, Role, SimRng};
use crate::spectral::{heat_semigroup, lambda_1, phi_1, phi_1_mass, t_star};
use crate::stats::{least_squares, mean_se, median};

/// How the initial height scale `a` depends on `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "kebab-case")]
pub enum HeightRule {
    EqualsN,
    Fixed(f64),
}

impl HeightRule {
    pub fn height(&self, n: usize) -> f64 {
        match *self {
            HeightRule::EqualsN => n as f64,
            HeightRule::Fixed(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridUnits {
    Absolute,
    /// Grid values are multiples of `n²`.
    NSquared,
}

/// Echo of a study's configuration; written into every run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub n_list: Vec<usize>,
    pub height_rule: HeightRule,
    pub replicas: usize,
    pub time_grid: Vec<f64>,
    pub grid_units: GridUnits,
    pub seed: u64,
    pub outputs: Vec<String>,
    /// Desk-scale tolerances standing in for asymptotic error terms.
    pub tolerances: BTreeMap<String, f64>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicas == 0 {
            return Err(DgffError::InvalidParameter("replica count must be positive".into()));
        }
        if self.n_list.is_empty() {
            return Err(DgffError::InvalidParameter("n list is empty".into()));
        }
        if let Some(&n) = self.n_list.iter().find(|&&n| n < 2) {
            return Err(DgffError::BoxTooSmall(n));
        }
        if self.time_grid.windows(2).any(|w| w[0] > w[1]) {
            return Err(DgffError::InvalidParameter("time grid must be sorted".into()));
        }
        Ok(())
    }

    pub fn grid_for(&self, n: usize) -> Vec<f64> {
        let scale = match self.grid_units {
            GridUnits::Absolute => 1.0,
            GridUnits::NSquared => (n * n) as f64,
        };
        self.time_grid.iter().map(|t| t * scale).collect()
    }
}

#[derive(Debug, Clone)]
pub struct DecayConfig {
    pub n: usize,
    pub init_height: f64,
    pub times: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    /// Compare with the semigroup `e^{−t(I−P)} h0` when `n` is at most this.
    pub oracle_max_n: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayPoint {
    pub t: f64,
    pub mean: f64,
    pub se: f64,
    pub oracle: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DecayReport {
    pub n: usize,
    pub replicas: usize,
    pub points: Vec<DecayPoint>,
    pub slope: f64,
    pub intercept: f64,
    pub lambda_1: f64,
    /// `|slope + λ₁| / λ₁`.
    pub relative_error: f64,
}

/// Fits the decay rate of `E[Σ_x h(x, t)]` from the flat start `init_height`.
///
/// Each replica contributes its quenched mean `Σ_x E[h(x, t) | schedule]`,
/// which is the zero-mark heat flow of `h0`; the marks have mean zero, so this
/// estimates the same expectation with the Gaussian noise integrated out.
pub fn mean_decay_study(cfg: &DecayConfig) -> Result<DecayReport> {
    if cfg.replicas == 0 || cfg.times.is_empty() {
        return Err(DgffError::InvalidParameter(
            "need positive replicas and a non-empty grid".into(),
        ));
    }
    if cfg.times.windows(2).any(|w| w[0] >= w[1]) || cfg.times[0] < 0.0 {
        return Err(DgffError::InvalidParameter(
            "decay grid must be increasing and non-negative".into(),
        ));
    }
    let bx = LatticeBox::new(cfg.n)?;
    let h0 = HeightField::constant(&bx, cfg.init_height);
    let horizon = *cfg.times.last().expect("non-empty grid");

    let sums: Vec<Vec<f64>> = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|r| {
            let mut f = h0.clone();
            let mut out = Vec::with_capacity(cfg.times.len());
            let mut k = 0;
            let stream = EventStream::new(&bx, horizon, rng_for(cfg.seed, r, Role::Schedule));
            for e in stream {
                while k < cfg.times.len() && cfg.times[k] < e.time {
                    out.push(f.sum());
                    k += 1;
                }
                evolve(&bx, &mut f, std::iter::once(&e), false);
            }
            while out.len() < cfg.times.len() {
                out.push(f.sum());
            }
            out
        })
        .collect();

    let mut points = Vec::with_capacity(cfg.times.len());
    for (k, &t) in cfg.times.iter().enumerate() {
        let col: Vec<f64> = sums.iter().map(|s| s[k]).collect();
        let (mean, se) = mean_se(&col);
        let oracle = if cfg.n <= cfg.oracle_max_n {
            Some(heat_semigroup(&bx, &h0.values, t)?.iter().sum())
        } else {
            None
        };
        points.push(DecayPoint { t, mean, se, oracle });
    }
    if points.iter().any(|p| !(p.mean > 0.0)) {
        return Err(DgffError::Numerical(
            "degenerate decay fit: a grid mean is not positive".into(),
        ));
    }
    let x: Vec<f64> = points.iter().map(|p| p.t).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mean.ln()).collect();
    let (slope, intercept) = least_squares(&x, &y);
    let l1 = lambda_1(cfg.n);
    Ok(DecayReport {
        n: cfg.n,
        replicas: cfg.replicas,
        points,
        slope,
        intercept,
        lambda_1: l1,
        relative_error: (slope + l1).abs() / l1,
    })
}

/// A free-field sample shifted by the constant `a − C₀ log n`.
pub fn shifted_stationary_init(
    bx: &LatticeBox,
    sampler: &StationarySampler,
    a: f64,
    c0: f64,
    rng: &mut SimRng,
) -> Result<HeightField> {
    let shift = a - c0 * (bx.n() as f64).ln();
    if shift < -1e-12 {
        return Err(DgffError::InvalidParameter(format!(
            "a = {a} must be at least C0 log n = {}",
            c0 * (bx.n() as f64).ln()
        )));
    }
    let mut f = sampler.sample(bx, rng)?;
    f.values.iter_mut().for_each(|v| *v += shift.max(0.0));
    Ok(f)
}

/// `erf((2/π) e^{−π² s / 2})`.
pub fn profile_prediction(s: f64) -> f64 {
    erf(2.0 / PI * (-PI * PI * s / 2.0).exp())
}

/// Total variation between `N(m, 1/λ₁)` and `N(0, 1/λ₁)`.
pub fn gaussian_shift_tv(lambda: f64, m: f64) -> f64 {
    erf(lambda.sqrt() * m.abs() / (2.0 * SQRT_2))
}

#[derive(Debug, Clone)]
pub struct ProfileConfig {
    pub n: usize,
    pub a: f64,
    pub c0: f64,
    pub s_grid: Vec<f64>,
    pub replicas: usize,
    pub seed: u64,
    /// Also estimate the TV from a histogram of sampled test statistics with
    /// this many bins.
    pub histogram_bins: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfilePoint {
    pub s: f64,
    pub t: f64,
    /// `t_⋆(a) + s n² < 0` and the time was clamped to zero.
    pub clamped: bool,
    pub estimate: f64,
    pub se: f64,
    pub prediction: f64,
    /// TV statistic of the schedule-averaged flow `l ⟨φ₁, 𝟙⟩ e^{−λ₁ t}`.
    pub annealed_exact: f64,
    pub histogram_tv: Option<f64>,
    pub replicas: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileReport {
    pub n: usize,
    pub a: f64,
    pub c0: f64,
    /// The shift `l = a − C₀ log n`.
    pub shift: f64,
    pub t_star: f64,
    pub lambda_1: f64,
    pub points: Vec<ProfilePoint>,
}

/// Schedule-averaged TV lower bound at `t_⋆(a) + s n²` from the exact law
/// `F(h(t)) ~ N(⟨φ₁, f(t)⟩, λ₁⁻¹)` of the principal-mode statistic.
pub fn cutoff_profile_study(cfg: &ProfileConfig) -> Result<ProfileReport> {
    if cfg.replicas == 0 || cfg.s_grid.is_empty() {
        return Err(DgffError::InvalidParameter(
            "need positive replicas and a non-empty s grid".into(),
        ));
    }
    if cfg.s_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(DgffError::InvalidParameter("s grid must be sorted".into()));
    }
    let bx = LatticeBox::new(cfg.n)?;
    let nf = cfg.n as f64;
    let ts = t_star(nf, cfg.a)?;
    let shift = cfg.a - cfg.c0 * nf.ln();
    if shift < -1e-12 {
        return Err(DgffError::InvalidParameter(format!("a = {} is below C0 log n", cfg.a)));
    }
    let l1 = lambda_1(cfg.n);
    let phi = phi_1(&bx);
    let raw: Vec<f64> = cfg.s_grid.iter().map(|s| ts + s * nf * nf).collect();
    let times: Vec<f64> = raw.iter().map(|&t| t.max(0.0)).collect();
    let horizon = times.last().copied().unwrap_or(0.0);
    let l = HeightField::constant(&bx, shift.max(0.0));
    let sampler = cfg.histogram_bins.map(|_| StationarySampler::spectral(&bx));

    // per replica: exact statistic per time, and optionally a sampled F(h(t))
    let per: Vec<(Vec<f64>, Vec<f64>)> = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut f = l.clone();
            let mut noisy = match &sampler {
                Some(s) => Some(shifted_stationary_init(
                    &bx,
                    s,
                    cfg.a,
                    cfg.c0,
                    &mut rng_for(cfg.seed, r, Role::Init),
                )?),
                None => None,
            };
            let mut stat = Vec::with_capacity(times.len());
            let mut sampled = Vec::new();
            let dot = |v: &[f64]| v.iter().zip(&phi).map(|(a, b)| a * b).sum::<f64>();
            let mut k = 0;
            let stream = EventStream::new(&bx, horizon, rng_for(cfg.seed, r, Role::Schedule));
            let mut flush = |upto: f64, f: &HeightField, noisy: &Option<HeightField>, k: &mut usize| {
                while *k < times.len() && times[*k] < upto {
                    stat.push(gaussian_shift_tv(l1, dot(&f.values)));
                    if let Some(h) = noisy {
                        sampled.push(dot(&h.values));
                    }
                    *k += 1;
                }
            };
            for e in stream {
                flush(e.time, &f, &noisy, &mut k);
                evolve(&bx, &mut f, std::iter::once(&e), false);
                if let Some(h) = noisy.as_mut() {
                    evolve(&bx, h, std::iter::once(&e), true);
                }
            }
            flush(f64::INFINITY, &f, &noisy, &mut k);
            Ok((stat, sampled))
        })
        .collect::<Result<_>>()?;

    let mass = phi_1_mass(cfg.n);
    let points = cfg
        .s_grid
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let col: Vec<f64> = per.iter().map(|p| p.0[k]).collect();
            let (estimate, se) = mean_se(&col);
            let histogram_tv = cfg.histogram_bins.map(|bins| {
                let xs: Vec<f64> = per.iter().map(|p| p.1[k] * l1.sqrt()).collect();
                histogram_tv_to_standard_normal(&xs, bins)
            });
            ProfilePoint {
                s,
                t: times[k],
                clamped: raw[k] < 0.0,
                estimate,
                se,
                prediction: profile_prediction(s),
                annealed_exact: gaussian_shift_tv(l1, shift.max(0.0) * mass * (-l1 * times[k]).exp()),
                histogram_tv,
                replicas: cfg.replicas,
            }
        })
        .collect();
    Ok(ProfileReport {
        n: cfg.n,
        a: cfg.a,
        c0: cfg.c0,
        shift,
        t_star: ts,
        lambda_1: l1,
        points,
    })
}

/// Histogram estimate of the TV distance between a sample and `N(0, 1)` on
/// equal-probability bins of the reference law, with the tails as two extra
/// bins.
pub fn histogram_tv_to_standard_normal(xs: &[f64], bins: usize) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let std = Normal::standard();
    let bins = bins.max(2);
    let edges: Vec<f64> = (1..bins).map(|i| std.inverse_cdf(i as f64 / bins as f64)).collect();
    let mut counts = vec![0usize; bins];
    for &x in xs {
        counts[edges.partition_point(|&e| e < x)] += 1;
    }
    let n = xs.len() as f64;
    0.5 * counts
        .iter()
        .map(|&c| (c as f64 / n - 1.0 / bins as f64).abs())
        .sum::<f64>()
}

/// Stage-switch choice resolved per `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", content = "value", rename_all = "kebab-case")]
pub enum SwitchPolicy {
    LogLog,
    /// Switch when `V_t ≤ n² (log n)^{−5}`.
    VolumeScale,
    Immediate,
    Never,
    /// Switch at `t_⋆(a) + c n²`.
    StarPlus(f64),
}

impl SwitchPolicy {
    pub fn rule(&self, n: usize, a: f64) -> Result<SwitchRule> {
        Ok(match *self {
            SwitchPolicy::LogLog => SwitchRule::LogLog,
            SwitchPolicy::VolumeScale => SwitchRule::volume_scale(n),
            SwitchPolicy::Immediate => SwitchRule::Immediate,
            SwitchPolicy::Never => SwitchRule::Never,
            SwitchPolicy::StarPlus(c) => {
                let nf = n as f64;
                SwitchRule::Fixed((t_star(nf, a.max(1.5))? + c * nf * nf).max(0.0))
            }
        })
    }
}

impl std::str::FromStr for SwitchPolicy {
    type Err = DgffError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loglog" => Ok(Self::LogLog),
            "volume" => Ok(Self::VolumeScale),
            "immediate" => Ok(Self::Immediate),
            "never" => Ok(Self::Never),
            _ => s
                .strip_prefix("star-plus:")
                .and_then(|v| v.parse().ok())
                .map(Self::StarPlus)
                .ok_or_else(|| DgffError::InvalidParameter(format!("unknown switch policy '{s}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub n_list: Vec<usize>,
    pub replicas: usize,
    pub seed: u64,
    pub switch: SwitchPolicy,
    /// Horizon in units of `t_⋆(n)`.
    pub horizon_multiplier: f64,
    pub drift_window_n2: f64,
    pub bracket_diagnostics: bool,
    /// Grid for `V_t` in units of `n²`.
    pub v_grid_n2: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub n: usize,
    pub replicas: usize,
    pub coalesced: usize,
    /// Median over replicas; non-coalesced replicas count as `+∞`.
    pub median_time: f64,
    /// `median / (n² log n)`.
    pub normalized: f64,
    /// `2 · (2/π²)`, doubled for the symmetric start.
    pub reference: f64,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub records: Vec<Vec<CoalescenceRecord>>,
}

/// Coalescence times of the pair `(n·𝟙, −n·𝟙)` under the two-stage coupling.
pub fn coalescence_scaling_study(cfg: &ScalingConfig) -> Result<ScalingReport> {
    if cfg.replicas == 0 || cfg.n_list.is_empty() {
        return Err(DgffError::InvalidParameter(
            "need positive replicas and a non-empty n list".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for (ni, &n) in cfg.n_list.iter().enumerate() {
        let bx = LatticeBox::new(n)?;
        let nf = n as f64;
        let mut params = TwoStageParams::new(n, cfg.seed.wrapping_add(ni as u64))?;
        params.switch = cfg.switch.rule(n, nf)?;
        params.horizon = cfg.horizon_multiplier * t_star(nf, nf.max(1.5))?;
        params.drift_window = cfg.drift_window_n2 * nf * nf;
        params.bracket_diagnostics = cfg.bracket_diagnostics;
        params.v_grid = cfg.v_grid_n2.iter().map(|g| g * nf * nf).collect();
        let g0 = HeightField::constant(&bx, -nf);
        let records: Vec<CoalescenceRecord> = (0..cfg.replicas as u64)
            .into_par_iter()
            .map(|r| run_two_stage(&bx, &g0, &params, r))
            .collect::<Result<_>>()?;
        let times: Vec<f64> = records
            .iter()
            .map(|r| r.coalescence_time.unwrap_or(f64::INFINITY))
            .collect();
        let med = median(&times);
        rows.push(ScalingRow {
            n,
            replicas: cfg.replicas,
            coalesced: records.iter().filter(|r| r.coalescence_time.is_some()).count(),
            median_time: med,
            normalized: med / (nf * nf * nf.ln()),
            reference: 4.0 / (PI * PI),
        });
        all.push(records);
    }
    Ok(ScalingReport { rows, records: all })
}
