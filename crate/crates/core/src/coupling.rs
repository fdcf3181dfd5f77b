//! Monotone couplings of two Glauber chains driven by one event field.
//!
//! Under the identity coupling both chains use the event's mark. Under the
//! sticky coupling the two conditional Gaussians `N(a, 1)` and `N(b, 1)` are
//! coupled maximally by reflection, so they agree with probability
//! `1 − erf((b − a)/(2√2))` and otherwise the upper draw exceeds the lower one.
//! The lower chain always uses `a + mark`, so it is the same path under every
//! coupling mode.

use std::f64::consts::{PI, SQRT_2};

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::function::erf::erf;

use crate::dynamics::{Event, EventStream};
use crate::error::{DgffError, Result};
use crate::lattice::{HeightField, LatticeBox};
use crate::seed::{rng_for, Role, SimRng};
use crate::spectral::t_star;
use crate::stats::{mean_se, normal_cdf, normal_pdf};

/// Outcome of one coupled draw of `N(a, 1)` and `N(b, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StickyDraw {
    pub a: f64,
    pub b: f64,
    pub z_a: f64,
    pub z_b: f64,
    pub coupled: bool,
}

/// Reflection-maximal coupling from base noise `xi ~ N(0, 1)` and `u ~ U(0, 1)`.
/// The lower draw is always `min(a, b) + xi`.
pub fn sticky_from_noise(a: f64, b: f64, xi: f64, u: f64) -> StickyDraw {
    if a > b {
        let d = sticky_from_noise(b, a, xi, u);
        return StickyDraw {
            a,
            b,
            z_a: d.z_b,
            z_b: d.z_a,
            coupled: d.coupled,
        };
    }
    let x = a + xi;
    if a == b {
        return StickyDraw {
            a,
            b,
            z_a: x,
            z_b: x,
            coupled: true,
        };
    }
    // φ(x − b)/φ(x − a) = exp((b − a)(x − (a + b)/2))
    let log_ratio = (b - a) * (x - 0.5 * (a + b));
    if log_ratio >= 0.0 || u < log_ratio.exp() {
        StickyDraw {
            a,
            b,
            z_a: x,
            z_b: x,
            coupled: true,
        }
    } else {
        StickyDraw {
            a,
            b,
            z_a: x,
            z_b: (a + b - x).max(x),
            coupled: false,
        }
    }
}

pub fn sticky_gaussian(a: f64, b: f64, rng: &mut SimRng) -> Result<StickyDraw> {
    if !a.is_finite() || !b.is_finite() {
        return Err(DgffError::NonFinite("sticky coupling means"));
    }
    let xi: f64 = rng.sample(rand_distr::StandardNormal);
    let u: f64 = rng.random();
    Ok(sticky_from_noise(a, b, xi, u))
}

/// Probability that the two draws differ: `erf(|b − a| / (2√2))`.
pub fn sticky_failure_probability(a: f64, b: f64) -> f64 {
    erf((b - a).abs() / (2.0 * SQRT_2))
}

/// The law of half the gap `(Z_b − Z_a)/2` on failure, for mean gap `2μ`:
/// density `(φ(y − μ) − φ(y + μ)) / erf(μ/√2)` on `(0, ∞)`.
pub mod gap_law {
    use super::*;

    pub fn density(mu: f64, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let mass = erf(mu / SQRT_2);
        if mass > 1e-12 {
            (normal_pdf(y - mu) - normal_pdf(y + mu)) / mass
        } else {
            // μ → 0 limit
            y * (-0.5 * y * y).exp()
        }
    }

    /// `P(Y ≥ z)`.
    pub fn survival(mu: f64, z: f64) -> f64 {
        if z <= 0.0 {
            return 1.0;
        }
        let mass = erf(mu / SQRT_2);
        if mass > 1e-12 {
            ((normal_cdf(z + mu) - normal_cdf(z - mu)) / mass).clamp(0.0, 1.0)
        } else {
            (-0.5 * z * z).exp()
        }
    }

    /// `∫ y^k dν̄(y)` by composite Simpson quadrature.
    pub fn moment(mu: f64, k: i32) -> f64 {
        let upper = mu + 12.0;
        let steps = 2000;
        let h = upper / steps as f64;
        let f = |y: f64| y.powi(k) * density(mu, y);
        let mut s = f(0.0) + f(upper);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(i as f64 * h);
        }
        s * h / 3.0
    }

    /// The largest `ζ` with `P(Y ≥ ζ) ≥ ζ`.
    pub fn zeta(mu: f64) -> f64 {
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if survival(mu, mid) >= mid {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }
}

/// `max_k min(y_(k), k/N)` over the descending order statistics; the
/// empirical counterpart of [`gap_law::zeta`].
pub fn zeta_estimate(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &y)| y.min((i + 1) as f64 / n))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Serialize)]
pub struct ZetaReport {
    pub mu: f64,
    pub draws: usize,
    pub failures: usize,
    pub zeta_hat: f64,
    pub zeta_exact: f64,
    /// Fewer than `min_failures` failures; the estimate is reported only.
    pub insufficient: bool,
}

/// For each `μ`, couples `N(−μ, 1)` with `N(μ, 1)` `draws` times and
/// estimates the Bernoulli domination level of the failure gap.
pub fn dominated_bernoulli_check(mus: &[f64], draws: usize, seed: u64, min_failures: usize) -> Result<Vec<ZetaReport>> {
    mus.par_iter()
        .enumerate()
        .map(|(i, &mu)| {
            if !(mu > 0.0) {
                return Err(DgffError::InvalidParameter(format!("μ must be positive (got {mu})")));
            }
            let mut rng = rng_for(seed, i as u64, Role::Marks);
            let mut gaps = Vec::new();
            for _ in 0..draws {
                let d = sticky_gaussian(-mu, mu, &mut rng)?;
                if !d.coupled {
                    gaps.push(0.5 * (d.z_b - d.z_a));
                }
            }
            Ok(ZetaReport {
                mu,
                draws,
                failures: gaps.len(),
                zeta_hat: zeta_estimate(&gaps),
                zeta_exact: gap_law::zeta(mu),
                insufficient: gaps.len() < min_failures,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMode {
    Identity,
    Sticky,
}

/// Effect of one coupled update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepOutcome {
    pub site: usize,
    /// `b − a`, the gap between the two conditional means.
    pub mean_gap: f64,
    pub delta_volume: f64,
    /// `Some(true)` when a sticky draw failed to couple.
    pub sticky_failed: Option<bool>,
}

/// Two chains `upper ≥ lower` with incrementally maintained discrepancy
/// observables.
#[derive(Debug, Clone)]
pub struct CoupledTrace {
    pub upper: HeightField,
    pub lower: HeightField,
    dh: Vec<f64>,
    volume: f64,
    active: usize,
    l2_trunc: f64,
    pub time: f64,
    pub negativity_violations: u64,
}

#[inline]
fn trunc_sq(d: f64) -> f64 {
    (d * d).min(1.0)
}

impl CoupledTrace {
    pub fn new(bx: &LatticeBox, upper: HeightField, lower: HeightField) -> Result<Self> {
        upper.check_box(bx)?;
        lower.check_box(bx)?;
        if upper.boundary != lower.boundary {
            return Err(DgffError::InvalidParameter(
                "coupled chains must share boundary data".into(),
            ));
        }
        if upper.values.iter().zip(&lower.values).any(|(u, l)| u < l) {
            return Err(DgffError::InvalidParameter(
                "upper chain must dominate the lower chain".into(),
            ));
        }
        let mut trace = Self {
            dh: vec![0.0; bx.len()],
            upper,
            lower,
            volume: 0.0,
            active: 0,
            l2_trunc: 0.0,
            time: 0.0,
            negativity_violations: 0,
        };
        trace.resync();
        Ok(trace)
    }

    /// Recomputes the observables from scratch, removing accumulated
    /// rounding from the running sums.
    pub fn resync(&mut self) {
        for (d, (u, l)) in self.dh.iter_mut().zip(self.upper.values.iter().zip(&self.lower.values)) {
            *d = u - l;
        }
        self.volume = self.dh.iter().sum();
        self.active = self.dh.iter().filter(|&&d| d != 0.0).count();
        self.l2_trunc = self.dh.iter().map(|&d| trunc_sq(d)).sum();
    }

    pub fn dh(&self) -> &[f64] {
        &self.dh
    }

    /// `V_t = Σ_x dh_x`.
    pub fn volume(&self) -> f64 {
        self.volume
    }

    /// `𝒩_t = |{x : dh_x ≠ 0}|`.
    pub fn active_count(&self) -> usize {
        self.active
    }

    /// `Σ_x (dh_x² ∧ 1)`.
    pub fn l2_truncated(&self) -> f64 {
        self.l2_trunc
    }

    pub fn is_coalesced(&self) -> bool {
        self.active == 0
    }

    /// `b − a` at `site`: the neighbor average of the discrepancy.
    pub fn mean_gap(&self, bx: &LatticeBox, site: usize) -> f64 {
        0.25 * (bx.neighbor_sum(site, &self.upper.values, &self.upper.boundary)
            - bx.neighbor_sum(site, &self.lower.values, &self.lower.boundary))
    }

    /// Applies one shared event; `uniforms` supplies the acceptance draws of
    /// the sticky mode.
    pub fn step(&mut self, bx: &LatticeBox, event: &Event, mode: CouplingMode, uniforms: &mut SimRng) -> StepOutcome {
        let v = event.site;
        let a = 0.25 * bx.neighbor_sum(v, &self.lower.values, &self.lower.boundary);
        let b = 0.25 * bx.neighbor_sum(v, &self.upper.values, &self.upper.boundary);
        let (z_a, z_b, failed) = match mode {
            CouplingMode::Identity => (a + event.mark, b + event.mark, None),
            CouplingMode::Sticky => {
                let u: f64 = uniforms.random();
                let d = sticky_from_noise(a, b, event.mark, u);
                (d.z_a, d.z_b, Some(!d.coupled))
            }
        };
        self.lower.values[v] = z_a;
        self.upper.values[v] = z_b;
        let old = self.dh[v];
        let new = z_b - z_a;
        if new < 0.0 {
            self.negativity_violations += 1;
        }
        self.dh[v] = new;
        self.active = self.active + usize::from(new != 0.0) - usize::from(old != 0.0);
        if self.active == 0 {
            self.volume = 0.0;
            self.l2_trunc = 0.0;
        } else {
            self.volume += new - old;
            self.l2_trunc += trunc_sq(new) - trunc_sq(old);
        }
        self.time = event.time;
        StepOutcome {
            site: v,
            mean_gap: b - a,
            delta_volume: new - old,
            sticky_failed: failed,
        }
    }
}

/// Coupled update of `trace` by `event`.
pub fn step_coupled(
    bx: &LatticeBox,
    trace: &mut CoupledTrace,
    event: &Event,
    mode: CouplingMode,
    uniforms: &mut SimRng,
) -> StepOutcome {
    trace.step(bx, event, mode, uniforms)
}

/// Exact conditional drift `d/dt E[V_t | ℱ_t] = Σ_x (¼ Σ_{y∼x} dh_y − dh_x)`,
/// the same for both modes because each coupled pair has the right means.
pub fn expected_drift(bx: &LatticeBox, trace: &CoupledTrace) -> f64 {
    let zeros = vec![0.0; bx.boundary_len()];
    (0..bx.len())
        .map(|x| 0.25 * bx.neighbor_sum(x, &trace.dh, &zeros) - trace.dh[x])
        .sum()
}

/// Sticky-phase growth rate of the predictable quadratic variation of `V`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AngleBracket {
    pub rate: f64,
    pub volume: f64,
    pub active: usize,
    pub l2_truncated: f64,
    /// `V_t / (log n)²`.
    pub volume_over_log_sq: f64,
}

/// `Σ_x [(1 − q_x) dh_x² + q_x E[(2Y_x − dh_x)²]]` with
/// `q_x = erf(μ_x/(2√2))`, `μ_x = ¼ Σ_{y∼x} dh_y`, and `Y_x` distributed as the
/// failure half-gap for mean gap `μ_x`. The moments come from quadrature.
pub fn angle_bracket_rate(bx: &LatticeBox, trace: &CoupledTrace) -> AngleBracket {
    let zeros = vec![0.0; bx.boundary_len()];
    let mut rate = 0.0;
    for x in 0..bx.len() {
        let d = trace.dh[x];
        let mu = 0.25 * bx.neighbor_sum(x, &trace.dh, &zeros);
        if mu <= 0.0 {
            rate += d * d;
            continue;
        }
        let q = erf(mu / (2.0 * SQRT_2));
        let half = 0.5 * mu;
        let m1 = gap_law::moment(half, 1);
        let m2 = gap_law::moment(half, 2);
        let fail_sq = 4.0 * m2 - 4.0 * d * m1 + d * d;
        rate += (1.0 - q) * d * d + q * fail_sq;
    }
    let log_n = (bx.n() as f64).ln();
    AngleBracket {
        rate,
        volume: trace.volume,
        active: trace.active,
        l2_truncated: trace.l2_trunc,
        volume_over_log_sq: trace.volume / (log_n * log_n),
    }
}

/// When the two-stage coupling leaves the identity phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "rule", content = "value", rename_all = "kebab-case")]
pub enum SwitchRule {
    /// `T₀ = t_⋆(a) + (12/π²) n² log log n`.
    LogLog,
    Fixed(f64),
    /// First time `V_t` drops to the given level.
    VolumeBelow(f64),
    /// Sticky from the start.
    Immediate,
    /// Identity coupling throughout.
    Never,
}

impl SwitchRule {
    /// Default volume threshold `n² (log n)^{−5}`.
    pub fn volume_scale(n: usize) -> SwitchRule {
        let nf = n as f64;
        SwitchRule::VolumeBelow(nf * nf * nf.ln().powi(-5))
    }
}

/// `T₀ = t_⋆(a) + (12/π²) n² log log n`, floored at zero.
pub fn loglog_switch_time(n: usize, a: f64) -> Result<f64> {
    let nf = n as f64;
    let loglog = nf.ln().ln();
    Ok((t_star(nf, a)? + 12.0 / (PI * PI) * nf * nf * loglog).max(0.0))
}

/// Scales `L_i = n² (log n)^{−5−i}` for `i = 0..=I`, `I` the first index with
/// `L_i ≤ (log n)⁵`.
pub fn volume_scales(n: usize) -> Vec<f64> {
    let nf = n as f64;
    let ln = nf.ln();
    let floor = ln.powi(5);
    let mut out = Vec::new();
    for i in 0..64 {
        let l = nf * nf * ln.powi(-5 - i);
        out.push(l);
        if l <= floor {
            break;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TwoStageParams {
    pub n: usize,
    /// Height of the flat upper chain.
    pub upper_height: f64,
    pub switch: SwitchRule,
    pub horizon: f64,
    /// Times at which `(V, 𝒩, Σ dh² ∧ 1)` are recorded; sorted.
    pub v_grid: Vec<f64>,
    /// Window length for the increments used by the drift estimate.
    pub drift_window: f64,
    /// Evaluate the angle bracket at sticky-phase grid times.
    pub bracket_diagnostics: bool,
    pub seed: u64,
}

impl TwoStageParams {
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        let nf = n as f64;
        let horizon = 4.0 * t_star(nf, nf.max(1.5))?;
        Ok(Self {
            n,
            upper_height: nf,
            switch: SwitchRule::LogLog,
            horizon,
            v_grid: Vec::new(),
            drift_window: nf * nf / 8.0,
            bracket_diagnostics: false,
            seed,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    pub t: f64,
    pub volume: f64,
    pub active: usize,
    pub l2_truncated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HittingTime {
    pub scale: usize,
    pub level: f64,
    pub time: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BracketSample {
    pub t: f64,
    pub rate: f64,
    pub volume: f64,
    pub l2_truncated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoalescenceRecord {
    pub replica: u64,
    pub n: usize,
    pub horizon: f64,
    pub events: u64,
    pub switch_time: Option<f64>,
    pub volume_at_switch: Option<f64>,
    pub coalescence_time: Option<f64>,
    pub grid: Vec<GridPoint>,
    pub hitting_times: Vec<HittingTime>,
    /// First time `V ≤ (log n)⁵`.
    pub polylog_time: Option<f64>,
    /// `T_F`: first time `V ≤ (log n)^{−3}`.
    pub final_time: Option<f64>,
    /// Whether coalescence followed within `(log n)²` of `T_F`.
    pub final_sweep_coalesced: Option<bool>,
    pub negativity_violations: u64,
    pub sticky_updates: u64,
    pub sticky_failures: u64,
    /// `V` increments over consecutive drift windows before coalescence.
    pub drift_increments: Vec<f64>,
    pub bracket: Vec<BracketSample>,
    /// Sticky-phase samples of `(Σ dh² ∧ 1, V)` taken at grid times.
    pub l2_samples: Vec<(f64, f64)>,
}

/// Runs the coupling from `(upper_height · 𝟙, g0)` until coalescence or the
/// horizon, streaming the event field.
pub fn run_two_stage(
    bx: &LatticeBox,
    g0: &HeightField,
    params: &TwoStageParams,
    replica: u64,
) -> Result<CoalescenceRecord> {
    let n = bx.n();
    if params.n != n {
        return Err(DgffError::InvalidParameter(format!(
            "params are for n = {}, box has n = {n}",
            params.n
        )));
    }
    if !(params.horizon >= 0.0) || !params.horizon.is_finite() {
        return Err(DgffError::InvalidParameter("horizon must be finite and ≥ 0".into()));
    }
    if params.v_grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(DgffError::InvalidParameter("V grid must be sorted".into()));
    }
    if !(params.drift_window > 0.0) {
        return Err(DgffError::InvalidParameter("drift window must be positive".into()));
    }
    let upper = HeightField::constant(bx, params.upper_height).with_boundary(g0.boundary.clone())?;
    let mut trace = CoupledTrace::new(bx, upper, g0.clone())?;
    let nf = n as f64;
    let ln = nf.ln();

    let switch_at = match params.switch {
        SwitchRule::LogLog => Some(loglog_switch_time(n, params.upper_height.max(1.5))?),
        SwitchRule::Fixed(t) => Some(t),
        SwitchRule::Immediate => Some(0.0),
        SwitchRule::VolumeBelow(_) | SwitchRule::Never => None,
    };
    let mut sticky = false;
    let mut switch_time = None;
    let mut volume_at_switch = None;
    let mut try_switch = |trace: &CoupledTrace, now: f64, sticky: &mut bool| {
        if *sticky {
            return;
        }
        let go = match params.switch {
            SwitchRule::VolumeBelow(level) => trace.volume() <= level,
            SwitchRule::Never => false,
            _ => now >= switch_at.unwrap_or(f64::INFINITY),
        };
        if go {
            *sticky = true;
            switch_time = Some(now);
            volume_at_switch = Some(trace.volume());
        }
    };

    let scales = volume_scales(n);
    let mut hitting: Vec<HittingTime> = scales
        .iter()
        .enumerate()
        .map(|(i, &level)| HittingTime {
            scale: i,
            level,
            time: None,
        })
        .collect();
    let polylog = ln.powi(5);
    let final_level = ln.powi(-3);
    let sweep = ln * ln;
    let mut polylog_time = None;
    let mut final_time = None;
    let mut check_levels =
        |trace: &CoupledTrace, now: f64, polylog_time: &mut Option<f64>, final_time: &mut Option<f64>| {
            let v = trace.volume();
            for h in hitting.iter_mut().filter(|h| h.time.is_none()) {
                if v <= h.level {
                    h.time = Some(now);
                }
            }
            if polylog_time.is_none() && v <= polylog {
                *polylog_time = Some(now);
            }
            if final_time.is_none() && v <= final_level {
                *final_time = Some(now);
            }
        };

    let mut grid = Vec::with_capacity(params.v_grid.len());
    let mut next_grid = 0;
    let mut bracket = Vec::new();
    let mut l2_samples = Vec::new();
    let mut drift_increments = Vec::new();
    let mut next_window = params.drift_window;
    let mut window_start_v = trace.volume();
    let mut uniforms = rng_for(params.seed, replica, Role::Marks);
    let mut sticky_updates = 0u64;
    let mut sticky_failures = 0u64;
    let mut events = 0u64;
    let mut coalescence_time = if trace.is_coalesced() { Some(0.0) } else { None };

    try_switch(&trace, 0.0, &mut sticky);
    check_levels(&trace, 0.0, &mut polylog_time, &mut final_time);

    let mut record_grid =
        |trace: &CoupledTrace, upto: f64, sticky: bool, grid: &mut Vec<GridPoint>, next_grid: &mut usize| {
            while *next_grid < params.v_grid.len() && params.v_grid[*next_grid] < upto {
                let t = params.v_grid[*next_grid];
                grid.push(GridPoint {
                    t,
                    volume: trace.volume(),
                    active: trace.active_count(),
                    l2_truncated: trace.l2_truncated(),
                });
                if sticky && !trace.is_coalesced() {
                    l2_samples.push((trace.l2_truncated(), trace.volume()));
                    if params.bracket_diagnostics {
                        let ab = angle_bracket_rate(bx, trace);
                        bracket.push(BracketSample {
                            t,
                            rate: ab.rate,
                            volume: ab.volume,
                            l2_truncated: ab.l2_truncated,
                        });
                    }
                }
                *next_grid += 1;
            }
        };

    if coalescence_time.is_none() {
        let stream = EventStream::new(bx, params.horizon, rng_for(params.seed, replica, Role::Schedule));
        for e in stream {
            // state is right-continuous: grid points before this event see the current field
            record_grid(&trace, e.time, sticky, &mut grid, &mut next_grid);
            while e.time > next_window {
                drift_increments.push(trace.volume() - window_start_v);
                window_start_v = trace.volume();
                next_window += params.drift_window;
            }
            if !sticky && switch_at.is_some_and(|s| e.time >= s) {
                try_switch(&trace, switch_at.unwrap_or(e.time), &mut sticky);
            }
            let mode = if sticky {
                CouplingMode::Sticky
            } else {
                CouplingMode::Identity
            };
            let out = trace.step(bx, &e, mode, &mut uniforms);
            events += 1;
            if let Some(failed) = out.sticky_failed {
                sticky_updates += 1;
                sticky_failures += u64::from(failed);
            }
            check_levels(&trace, e.time, &mut polylog_time, &mut final_time);
            try_switch(&trace, e.time, &mut sticky);
            if trace.is_coalesced() {
                coalescence_time = Some(e.time);
                break;
            }
        }
        if !trace.is_coalesced() {
            trace.resync();
        }
    }
    record_grid(&trace, f64::INFINITY, sticky, &mut grid, &mut next_grid);

    let final_sweep_coalesced = final_time.map(|tf| coalescence_time.is_some_and(|tc| tc <= tf + sweep));
    Ok(CoalescenceRecord {
        replica,
        n,
        horizon: params.horizon,
        events,
        switch_time,
        volume_at_switch,
        coalescence_time,
        grid,
        hitting_times: hitting,
        polylog_time,
        final_time,
        final_sweep_coalesced,
        negativity_violations: trace.negativity_violations,
        sticky_updates,
        sticky_failures,
        drift_increments,
        bracket,
        l2_samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftEstimate {
    pub mean: f64,
    pub se: f64,
    pub windows: usize,
    /// `mean ≤ 3 · se`.
    pub within_bound: bool,
}

/// Average window increment of `V` across replicas; a supermartingale has
/// non-positive mean increments.
pub fn supermartingale_drift_check(records: &[CoalescenceRecord]) -> DriftEstimate {
    let incs: Vec<f64> = records
        .iter()
        .flat_map(|r| r.drift_increments.iter().copied())
        .collect();
    drift_from_increments(&incs)
}

pub fn drift_from_increments(incs: &[f64]) -> DriftEstimate {
    if incs.is_empty() {
        return DriftEstimate {
            mean: 0.0,
            se: 0.0,
            windows: 0,
            within_bound: true,
        };
    }
    let (mean, se) = mean_se(incs);
    let se = if se.is_finite() { se } else { 0.0 };
    DriftEstimate {
        mean,
        se,
        windows: incs.len(),
        within_bound: mean <= 3.0 * se,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn equal_means_always_couple() {
        let mut r = rng_for(1, 0, Role::Marks);
        for _ in 0..1000 {
            let d = sticky_gaussian(0.3, 0.3, &mut r).unwrap();
            assert!(d.coupled && d.z_a == d.z_b);
        }
        assert_eq!(sticky_failure_probability(0.3, 0.3), 0.0);
    }

    #[test]
    fn swapped_means_keep_labels() {
        let d = sticky_from_noise(2.0, 0.0, 0.1, 0.999_999);
        assert_eq!(d.z_b, 0.1);
        assert!(d.z_a >= d.z_b);
    }

    #[test]
    fn non_finite_means_rejected() {
        let mut r = rng_for(1, 0, Role::Marks);
        assert!(sticky_gaussian(f64::NAN, 0.0, &mut r).is_err());
    }

    #[test]
    fn failure_gap_positive() {
        let mut r = rng_for(2, 0, Role::Marks);
        let mut min_gap = f64::INFINITY;
        for _ in 0..100_000 {
            let d = sticky_gaussian(0.0, 2.0, &mut r).unwrap();
            if !d.coupled {
                min_gap = min_gap.min(d.z_b - d.z_a);
            }
            assert!(d.z_b >= d.z_a);
        }
        assert!(min_gap > 0.0);
    }

    #[test]
    fn gap_law_moments_match_closed_forms() {
        for mu in [0.05, 0.5, 1.0, 3.0] {
            let mass = erf(mu / SQRT_2);
            assert_relative_eq!(gap_law::moment(mu, 0), 1.0, epsilon = 1e-9);
            assert_relative_eq!(gap_law::moment(mu, 1), mu / mass, max_relative = 1e-8);
            let m2 = ((1.0 + mu * mu) * mass + 2.0 * mu * normal_pdf(mu)) / mass;
            assert_relative_eq!(gap_law::moment(mu, 2), m2, max_relative = 1e-8);
        }
    }

    #[test]
    fn zeta_estimator_on_known_sample() {
        // survival k/N at y_(k); the crossing is at y = 0.5
        let s: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        assert_relative_eq!(zeta_estimate(&s), 0.5, epsilon = 0.011);
    }

    #[test]
    fn scales_at_desk_sizes() {
        for n in [8usize, 16, 32, 64] {
            let s = volume_scales(n);
            assert_eq!(s.len(), 1, "n = {n}");
        }
        let big = volume_scales(1 << 40);
        assert!(big.len() > 1);
        let floor = ((1u64 << 40) as f64).ln().powi(5);
        assert!(*big.last().unwrap() <= floor && big[big.len() - 2] > floor);
    }

    #[test]
    fn identical_chains_coalesced_from_start() {
        let bx = LatticeBox::new(8).unwrap();
        let params = TwoStageParams::new(8, 3).unwrap();
        let rec = run_two_stage(&bx, &HeightField::constant(&bx, 8.0), &params, 0).unwrap();
        assert_eq!(rec.coalescence_time, Some(0.0));
        assert_eq!(rec.events, 0);
    }

    #[test]
    fn coalesced_pair_stays_coalesced() {
        let bx = LatticeBox::new(5).unwrap();
        let f = HeightField::constant(&bx, 1.0);
        let mut tr = CoupledTrace::new(&bx, f.clone(), f).unwrap();
        let mut r = rng_for(0, 0, Role::Marks);
        for (k, mode) in [CouplingMode::Identity, CouplingMode::Sticky]
            .into_iter()
            .cycle()
            .take(40)
            .enumerate()
        {
            let e = Event {
                time: k as f64,
                site: k % bx.len(),
                mark: 0.3 * k as f64 - 2.0,
            };
            tr.step(&bx, &e, mode, &mut r);
            assert!(tr.is_coalesced() && tr.volume() == 0.0);
        }
    }

    #[test]
    fn identity_step_averages_discrepancy() {
        let bx = LatticeBox::new(5).unwrap();
        let lower = HeightField::zeros(&bx);
        let up: Vec<f64> = (0..bx.len()).map(|i| (i % 5) as f64 * 0.5).collect();
        let mut tr = CoupledTrace::new(&bx, HeightField::from_values(&bx, up.clone()).unwrap(), lower).unwrap();
        let x = bx.index_of((2, 3)).unwrap();
        let want = 0.25 * bx.neighbor_sum(x, &up, &vec![0.0; bx.boundary_len()]);
        tr.step(
            &bx,
            &Event {
                time: 1.0,
                site: x,
                mark: -0.7,
            },
            CouplingMode::Identity,
            &mut rng_for(0, 0, Role::Marks),
        );
        assert_relative_eq!(tr.dh()[x], want, epsilon = 1e-15);
    }

    #[test]
    fn single_site_bracket_contribution() {
        let bx = LatticeBox::new(7).unwrap();
        let x = bx.index_of((3, 3)).unwrap();
        let mut up = vec![0.0; bx.len()];
        up[x] = 2.0;
        let tr = CoupledTrace::new(&bx, HeightField::from_values(&bx, up).unwrap(), HeightField::zeros(&bx)).unwrap();
        let ab = angle_bracket_rate(&bx, &tr);
        // site x contributes d² = 4; each of its four neighbors sees μ = ½
        let mu = 0.5;
        let q = erf(mu / (2.0 * SQRT_2));
        let half = mu / 2.0;
        let mass = erf(half / SQRT_2);
        let m2 = ((1.0 + half * half) * mass + 2.0 * half * normal_pdf(half)) / mass;
        assert_relative_eq!(ab.rate, 4.0 + 4.0 * q * 4.0 * m2, max_relative = 1e-7);
        let zero = CoupledTrace::new(&bx, HeightField::zeros(&bx), HeightField::zeros(&bx)).unwrap();
        assert_eq!(angle_bracket_rate(&bx, &zero).rate, 0.0);
    }

    #[test]
    fn drift_formula_cases() {
        let bx = LatticeBox::new(9).unwrap();
        let center = bx.center_index();
        let mut up = vec![0.0; bx.len()];
        up[center] = 1.0;
        let interior =
            CoupledTrace::new(&bx, HeightField::from_values(&bx, up).unwrap(), HeightField::zeros(&bx)).unwrap();
        assert_relative_eq!(expected_drift(&bx, &interior), 0.0, epsilon = 1e-15);
        let mut edge = vec![0.0; bx.len()];
        edge[bx.index_of((1, 4)).unwrap()] = 1.0;
        let touching = CoupledTrace::new(
            &bx,
            HeightField::from_values(&bx, edge).unwrap(),
            HeightField::zeros(&bx),
        )
        .unwrap();
        assert_relative_eq!(expected_drift(&bx, &touching), -0.25, epsilon = 1e-15);
    }

    #[test]
    fn rejects_non_monotone_start() {
        let bx = LatticeBox::new(4).unwrap();
        assert!(CoupledTrace::new(&bx, HeightField::zeros(&bx), HeightField::constant(&bx, 1.0)).is_err());
    }
}
