//! Backwards-in-time random walks through the event field.
//!
//! A walk started at `(x, t)` reads the window `[0, t]` of the schedule in
//! reverse: a forward event at time `σ` sits at backward time `σ − t`. The walk
//! waits at its site until the most recent earlier event there, collects that
//! event's mark and jumps to a uniform neighbor; boundary sites absorb it. The
//! forward field then satisfies, exactly and pathwise,
//!
//! `h(x, t) = Σ_y H_t(x, y) h0(y) + Σ_p A_t(x, p) Z_p`,
//!
//! where `H_t` is the terminal law of the walk and `A_t(x, p)` the probability
//! that it collects event `p`. Both are computed by a single backward sweep.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{run_forward, sample_schedule, UpdateSchedule};
use crate::error::{DgffError, Result};
use crate::lattice::{HeightField, LatticeBox, Neighbor, Site};
use crate::seed::{rng_for, Role, SimRng};
use crate::spectral::{lambda_1, phi_hat_1, GreensMatrix};
use crate::stats::mean_se;

/// Event indices of each site, in increasing time.
#[derive(Debug, Clone)]
pub struct SiteEventIndex {
    per_site: Vec<Vec<usize>>,
}

impl SiteEventIndex {
    pub fn new(bx: &LatticeBox, schedule: &UpdateSchedule) -> Self {
        let mut per_site: Vec<Vec<usize>> = schedule
            .counts()
            .iter()
            .map(|&c| Vec::with_capacity(c as usize))
            .collect();
        debug_assert_eq!(per_site.len(), bx.len());
        for (j, e) in schedule.events().iter().enumerate() {
            per_site[e.site].push(j);
        }
        Self { per_site }
    }

    /// Latest event at `site` with index below `before`.
    fn latest_before(&self, site: usize, before: usize) -> Option<usize> {
        let list = &self.per_site[site];
        let k = list.partition_point(|&j| j < before);
        k.checked_sub(1).map(|i| list[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BtrwJump {
    /// Backward time `σ − t ∈ (−t, 0]` of the event that triggered the jump.
    pub time: f64,
    /// Site occupied after the jump.
    pub site: Site,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BtrwTrajectory {
    pub start: Site,
    pub t: f64,
    pub jumps: Vec<BtrwJump>,
    pub terminal: Site,
    pub absorbed: bool,
    /// Indices of the events whose marks the walk collects.
    pub collected: Vec<usize>,
    /// Clock rings met on `[−t, 0]` in the whole-plane field: the jumps plus
    /// the rings of the absorbing site's own clock after absorption.
    pub clock_rings: usize,
}

/// Samples one walk; jump directions and post-absorption rings use `rng`.
pub fn sample_btrw_indexed(
    bx: &LatticeBox,
    schedule: &UpdateSchedule,
    index: &SiteEventIndex,
    x: Site,
    t: f64,
    rng: &mut SimRng,
) -> Result<BtrwTrajectory> {
    schedule.check_time(t)?;
    let mut cur = bx.index_of(x)?;
    let events = schedule.events();
    let mut before = schedule.window(t).len();
    let mut jumps = Vec::new();
    let mut collected = Vec::new();
    let mut terminal = x;
    let mut absorbed = false;
    let mut extra_rings = 0usize;

    while let Some(j) = index.latest_before(cur, before) {
        collected.push(j);
        let dir = rng.random_range(0..4usize);
        let time = events[j].time - t;
        match bx.neighbor_slots(cur)[dir] {
            Neighbor::Interior(y) => {
                cur = y;
                terminal = bx.site(y);
                before = j;
                jumps.push(BtrwJump { time, site: terminal });
            }
            Neighbor::Boundary(b) => {
                terminal = bx.boundary_site(b);
                absorbed = true;
                jumps.push(BtrwJump { time, site: terminal });
                // the boundary clock keeps ringing on the remaining span (−t, σ − t)
                let span = events[j].time;
                if span > 0.0 {
                    extra_rings = Poisson::new(span).expect("positive rate").sample(rng) as usize;
                }
                break;
            }
        }
    }
    Ok(BtrwTrajectory {
        start: x,
        t,
        clock_rings: jumps.len() + extra_rings,
        jumps,
        terminal,
        absorbed,
        collected,
    })
}

pub fn sample_btrw(
    bx: &LatticeBox,
    schedule: &UpdateSchedule,
    x: Site,
    t: f64,
    rng: &mut SimRng,
) -> Result<BtrwTrajectory> {
    schedule.check_box(bx)?;
    sample_btrw_indexed(bx, schedule, &SiteEventIndex::new(bx, schedule), x, t, rng)
}

/// What the backward sweep should compute beyond the heat kernel.
#[derive(Debug, Clone, Default)]
pub struct BackwardOptions {
    /// Start sites (dense indices); all interior sites when `None`.
    pub starts: Option<Vec<usize>>,
    /// Accumulate `Σ_p A_t(x, p) Z_p` from the schedule's marks.
    pub marks: bool,
    /// Accumulate `Σ_t = A_t A_tᵀ`.
    pub covariance: bool,
    /// Store the columns of `A_t`.
    pub collection: bool,
}

impl BackwardOptions {
    pub fn full() -> Self {
        Self {
            starts: None,
            marks: true,
            covariance: true,
            collection: true,
        }
    }
}

/// Columns of `A_t` for the events inside the window, newest first.
#[derive(Debug, Clone)]
pub struct CollectionMatrix {
    pub event_ids: Vec<usize>,
    /// `starts × recorded events`.
    pub columns: DMatrix<f64>,
}

/// Exact quenched propagators for one schedule and horizon `t`.
#[derive(Debug, Clone)]
pub struct PropagatorBundle {
    pub n: usize,
    pub t: f64,
    pub starts: Vec<usize>,
    /// `H_t(x, y)` for interior targets; rows follow `starts`.
    pub heat: DMatrix<f64>,
    /// Mass absorbed at each boundary site.
    pub absorbed: DMatrix<f64>,
    /// `m_t(x) = Σ_y H_t(x, y) h0(y)` including boundary data.
    pub mean: Vec<f64>,
    pub collected: Option<Vec<f64>>,
    pub covariance: Option<DMatrix<f64>>,
    pub collection: Option<CollectionMatrix>,
}

impl PropagatorBundle {
    /// Quenched survival `P(S_{−t}^x ∉ ∂Λ)` per start.
    pub fn survival(&self) -> Vec<f64> {
        self.heat.row_iter().map(|r| r.sum()).collect()
    }

    /// Total absorbed mass per start.
    pub fn absorbed_total(&self) -> Vec<f64> {
        self.absorbed.row_iter().map(|r| r.sum()).collect()
    }

    /// Largest deviation of any row of `H_t` from a probability vector.
    pub fn row_sum_error(&self) -> f64 {
        self.survival()
            .iter()
            .zip(self.absorbed_total())
            .map(|(s, a)| (s + a - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `m_t + Σ_p A_t(·, p) Z_p`, the walk side of the representation.
    pub fn representation(&self) -> Result<Vec<f64>> {
        let acc = self
            .collected
            .as_ref()
            .ok_or(DgffError::MissingData("collected marks"))?;
        Ok(self.mean.iter().zip(acc).map(|(m, a)| m + a).collect())
    }
}

/// Backward sweep with the default options: heat kernel, absorption, mean
/// and collected marks for every start site.
pub fn backward_propagate(
    bx: &LatticeBox,
    schedule: &UpdateSchedule,
    h0: &HeightField,
    t: f64,
) -> Result<PropagatorBundle> {
    backward_propagate_with(
        bx,
        schedule,
        h0,
        t,
        &BackwardOptions {
            marks: true,
            ..Default::default()
        },
    )
}

pub fn backward_propagate_with(
    bx: &LatticeBox,
    schedule: &UpdateSchedule,
    h0: &HeightField,
    t: f64,
    opts: &BackwardOptions,
) -> Result<PropagatorBundle> {
    schedule.check_box(bx)?;
    h0.check_box(bx)?;
    schedule.check_time(t)?;
    let m = bx.len();
    let nb_len = bx.boundary_len();
    let starts: Vec<usize> = match &opts.starts {
        Some(s) => {
            if let Some(&bad) = s.iter().find(|&&x| x >= m) {
                return Err(DgffError::InvalidParameter(format!(
                    "start index {bad} outside the box"
                )));
            }
            s.clone()
        }
        None => (0..m).collect(),
    };
    let k = starts.len();

    // column v holds the mass at v for every start, contiguous over starts
    let mut mass = vec![0.0; m * k];
    for (s, &x) in starts.iter().enumerate() {
        mass[x * k + s] = 1.0;
    }
    let mut absorbed = vec![0.0; nb_len * k];
    let mut acc = opts.marks.then(|| vec![0.0; k]);
    let mut cov = opts.covariance.then(|| DMatrix::<f64>::zeros(k, k));
    let window = schedule.window(t);
    let mut coll = opts
        .collection
        .then(|| (Vec::with_capacity(window.len()), Vec::with_capacity(window.len() * k)));
    let mut col = vec![0.0; k];

    for (j, e) in window.iter().enumerate().rev() {
        let v = e.site;
        col.copy_from_slice(&mass[v * k..(v + 1) * k]);
        if col.iter().all(|&c| c == 0.0) {
            continue;
        }
        mass[v * k..(v + 1) * k].fill(0.0);
        if let Some(acc) = acc.as_mut() {
            for (a, c) in acc.iter_mut().zip(&col) {
                *a += c * e.mark;
            }
        }
        if let Some(cov) = cov.as_mut() {
            let c = nalgebra::DVectorView::from_slice(&col, k);
            cov.ger(1.0, &c, &c, 1.0);
        }
        if let Some((ids, data)) = coll.as_mut() {
            ids.push(j);
            data.extend_from_slice(&col);
        }
        for nb in bx.neighbor_slots(v) {
            let target = match *nb {
                Neighbor::Interior(y) => &mut mass[y * k..(y + 1) * k],
                Neighbor::Boundary(b) => &mut absorbed[b * k..(b + 1) * k],
            };
            for (dst, c) in target.iter_mut().zip(&col) {
                *dst += 0.25 * c;
            }
        }
    }

    let heat = DMatrix::from_column_slice(k, m, &mass);
    let absorbed = DMatrix::from_column_slice(k, nb_len, &absorbed);
    let h0v = nalgebra::DVectorView::from_slice(&h0.values, m);
    let bv = nalgebra::DVectorView::from_slice(&h0.boundary, nb_len);
    let mean = (&heat * h0v + &absorbed * bv).as_slice().to_vec();
    let collection = coll.map(|(ids, data)| CollectionMatrix {
        columns: DMatrix::from_column_slice(k, ids.len(), &data),
        event_ids: ids,
    });
    Ok(PropagatorBundle {
        n: bx.n(),
        t,
        starts,
        heat,
        absorbed,
        mean,
        collected: acc,
        covariance: cov,
        collection,
    })
}

pub fn quenched_mean(bundle: &PropagatorBundle) -> &[f64] {
    &bundle.mean
}

/// `Σ_t = A_t A_tᵀ`; requires a sweep run with `covariance` enabled.
pub fn quenched_covariance(bundle: &PropagatorBundle) -> Result<&DMatrix<f64>> {
    bundle.covariance.as_ref().ok_or(DgffError::MissingData("covariance"))
}

/// `‖(G − A_t A_tᵀ) − H_t G H_tᵀ‖_∞` over the interior block.
pub fn covariance_gap_check(bundle: &PropagatorBundle, greens: &GreensMatrix) -> Result<f64> {
    let sigma = quenched_covariance(bundle)?;
    let m = greens.matrix().nrows();
    if bundle.starts.len() != m || bundle.starts.iter().enumerate().any(|(i, &x)| i != x) {
        return Err(DgffError::InvalidParameter(
            "covariance gap needs every interior start in order".into(),
        ));
    }
    let g = greens.matrix();
    let lhs = g - sigma;
    let rhs = &bundle.heat * g * bundle.heat.transpose();
    Ok((lhs - rhs).amax())
}

/// Runs the forward dynamics and the backward sweep on the same marks and
/// returns the largest pointwise disagreement at time `t`.
pub fn representation_check(bx: &LatticeBox, h0: &HeightField, schedule: &UpdateSchedule, t: f64) -> Result<f64> {
    let forward = run_forward(bx, h0, schedule, &[t])?;
    let backward = backward_propagate(bx, schedule, h0, t)?.representation()?;
    Ok(forward
        .last()
        .values
        .iter()
        .zip(&backward)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Sites at graph distance at least `n/4` from the boundary.
pub fn central_sites(bx: &LatticeBox) -> Vec<usize> {
    let need = bx.n() as f64 / 4.0;
    (0..bx.len())
        .filter(|&x| bx.distance_to_boundary(x) as f64 >= need)
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct SurvivalSite {
    pub site: Site,
    pub prediction: f64,
    pub mean_survival: f64,
    pub se: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SurvivalReport {
    pub n: usize,
    pub t: f64,
    pub replicas: usize,
    pub ratio_band: (f64, f64),
    pub sites: Vec<SurvivalSite>,
    /// Schedules on which every central site lies inside the ratio band.
    pub schedules_within_band: usize,
    pub fraction_within_band: f64,
    /// Half-width multiplier `r` of the window `t ± r√t`.
    pub clock_window_r: f64,
    pub clock_walks: usize,
    pub clock_fraction_within: f64,
}

#[derive(Debug, Clone)]
pub struct SurvivalConfig {
    pub n: usize,
    pub t: f64,
    pub replicas: usize,
    pub seed: u64,
    pub ratio_band: (f64, f64),
    pub walks_per_schedule: usize,
    pub clock_window_r: f64,
}

/// Quenched survival of central starts over independent schedules, compared
/// with `φ̂₁(x) e^{−λ₁ t}`, plus the clock-ring count of sampled walks.
pub fn survival_experiment(cfg: &SurvivalConfig) -> Result<SurvivalReport> {
    if cfg.replicas == 0 {
        return Err(DgffError::InvalidParameter("replicas must be positive".into()));
    }
    let bx = LatticeBox::new(cfg.n)?;
    let central = central_sites(&bx);
    let hat = phi_hat_1(&bx);
    let decay = (-lambda_1(cfg.n) * cfg.t).exp();
    let prediction: Vec<f64> = central.iter().map(|&x| (hat[x] * decay).clamp(0.0, 1.0)).collect();
    let h0 = HeightField::zeros(&bx);
    let opts = BackwardOptions {
        starts: Some(central.clone()),
        ..Default::default()
    };
    let start_site = bx.site(bx.center_index());

    let per_replica: Vec<(Vec<f64>, usize)> = (0..cfg.replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<(Vec<f64>, usize)> {
            let schedule = sample_schedule(&bx, cfg.t, &mut rng_for(cfg.seed, r, Role::Schedule))?;
            let bundle = backward_propagate_with(&bx, &schedule, &h0, cfg.t, &opts)?;
            let index = SiteEventIndex::new(&bx, &schedule);
            let mut jumps = rng_for(cfg.seed, r, Role::Jumps);
            let half = cfg.clock_window_r * cfg.t.sqrt();
            let mut within = 0;
            for _ in 0..cfg.walks_per_schedule {
                let w = sample_btrw_indexed(&bx, &schedule, &index, start_site, cfg.t, &mut jumps)?;
                if (w.clock_rings as f64 - cfg.t).abs() <= half {
                    within += 1;
                }
            }
            Ok((bundle.survival(), within))
        })
        .collect::<Result<_>>()?;

    let (lo, hi) = cfg.ratio_band;
    let schedules_within_band = per_replica
        .iter()
        .filter(|(s, _)| {
            s.iter().zip(&prediction).all(|(v, p)| {
                let r = v / p;
                r >= lo && r <= hi
            })
        })
        .count();
    let sites = central
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let vals: Vec<f64> = per_replica.iter().map(|(s, _)| s[i]).collect();
            let ratios = vals.iter().map(|v| v / prediction[i]);
            let (mean_survival, se) = mean_se(&vals);
            SurvivalSite {
                site: bx.site(x),
                prediction: prediction[i],
                mean_survival,
                se,
                min_ratio: ratios.clone().fold(f64::INFINITY, f64::min),
                max_ratio: ratios.fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    let clock_walks = cfg.walks_per_schedule * cfg.replicas;
    let clock_within: usize = per_replica.iter().map(|(_, w)| w).sum();
    Ok(SurvivalReport {
        n: cfg.n,
        t: cfg.t,
        replicas: cfg.replicas,
        ratio_band: cfg.ratio_band,
        sites,
        schedules_within_band,
        fraction_within_band: schedules_within_band as f64 / cfg.replicas as f64,
        clock_window_r: cfg.clock_window_r,
        clock_walks,
        clock_fraction_within: if clock_walks == 0 {
            f64::NAN
        } else {
            clock_within as f64 / clock_walks as f64
        },
    })
}
