//! Heat-bath Glauber dynamics through the graphical construction.
//!
//! Every interior site carries a rate-1 Poisson clock. The superposition of
//! the clocks is a rate-`|Λ_n|` process whose events pick a uniform site, so
//! the event field is generated in time order directly. Each event carries the
//! standard Gaussian mark that drives the update at that site; forward
//! dynamics, the backward walk and the couplings all read the same marks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{DgffError, Result};
use crate::lattice::{HeightField, LatticeBox};
use crate::seed::SimRng;
use crate::spectral::{lambda_1d, sine_basis, GreensMatrix};

/// One clock ring: the site resamples at `time` using `mark`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub site: usize,
    pub mark: f64,
}

/// Lazily generated event field on `(0, horizon]`, in increasing time order.
pub struct EventStream<R> {
    sites: usize,
    rate: f64,
    horizon: f64,
    now: f64,
    rng: R,
}

impl<R: Rng> EventStream<R> {
    pub fn new(bx: &LatticeBox, horizon: f64, rng: R) -> Self {
        Self {
            sites: bx.len(),
            rate: bx.len() as f64,
            horizon,
            now: 0.0,
            rng,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }
}

impl<R: Rng> Iterator for EventStream<R> {
    type Item = Event;

    fn next(&mut self) -> Option<Event> {
        let gap: f64 = Exp1.sample(&mut self.rng);
        let time = self.now + gap / self.rate;
        if time > self.horizon {
            self.now = f64::INFINITY;
            return None;
        }
        self.now = time;
        let site = self.rng.random_range(0..self.sites);
        let mark = StandardNormal.sample(&mut self.rng);
        Some(Event { time, site, mark })
    }
}

/// A stored realization of the event field with its Gaussian marks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateSchedule {
    n: usize,
    horizon: f64,
    events: Vec<Event>,
    counts: Vec<u32>,
}

impl UpdateSchedule {
    /// Builds a schedule from explicit events; they are sorted by time, with
    /// equal times ordered by site index.
    pub fn from_events(bx: &LatticeBox, horizon: f64, mut events: Vec<Event>) -> Result<Self> {
        if !(horizon >= 0.0) || !horizon.is_finite() {
            return Err(DgffError::InvalidParameter(format!(
                "horizon must be finite and ≥ 0 (got {horizon})"
            )));
        }
        let mut counts = vec![0u32; bx.len()];
        for e in &events {
            if e.site >= bx.len() {
                return Err(DgffError::InvalidParameter(format!(
                    "event site index {} outside the box",
                    e.site
                )));
            }
            if !e.time.is_finite() || !e.mark.is_finite() {
                return Err(DgffError::NonFinite("event"));
            }
            if e.time <= 0.0 || e.time > horizon {
                return Err(DgffError::InvalidParameter(format!(
                    "event time {} outside (0, {horizon}]",
                    e.time
                )));
            }
            counts[e.site] += 1;
        }
        events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.site.cmp(&b.site)));
        Ok(Self {
            n: bx.n(),
            horizon,
            events,
            counts,
        })
    }

    pub fn empty(bx: &LatticeBox, horizon: f64) -> Result<Self> {
        Self::from_events(bx, horizon, Vec::new())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    /// Events with time `≤ t`.
    pub fn window(&self, t: f64) -> &[Event] {
        let k = self.events.partition_point(|e| e.time <= t);
        &self.events[..k]
    }

    /// Same event times and sites with every mark replaced by `marks[j]`.
    pub fn with_marks(&self, marks: &[f64]) -> Result<Self> {
        if marks.len() != self.events.len() {
            return Err(DgffError::ShapeMismatch {
                expected: self.events.len(),
                got: marks.len(),
            });
        }
        let mut out = self.clone();
        for (e, &m) in out.events.iter_mut().zip(marks) {
            e.mark = m;
        }
        Ok(out)
    }

    pub(crate) fn check_box(&self, bx: &LatticeBox) -> Result<()> {
        if self.n != bx.n() {
            return Err(DgffError::ShapeMismatch {
                expected: bx.len(),
                got: (self.n.max(1) - 1).pow(2),
            });
        }
        Ok(())
    }

    pub(crate) fn check_time(&self, t: f64) -> Result<()> {
        if !(t >= 0.0) || t > self.horizon {
            return Err(DgffError::BeyondHorizon {
                time: t,
                horizon: self.horizon,
            });
        }
        Ok(())
    }
}

/// Samples the event field on `(0, horizon]` with attached marks.
pub fn sample_schedule(bx: &LatticeBox, horizon: f64, rng: &mut SimRng) -> Result<UpdateSchedule> {
    if !(horizon >= 0.0) || !horizon.is_finite() {
        return Err(DgffError::InvalidParameter(format!(
            "horizon must be finite and ≥ 0 (got {horizon})"
        )));
    }
    let events: Vec<Event> = EventStream::new(bx, horizon, rng).collect();
    UpdateSchedule::from_events(bx, horizon, events)
}

/// Resamples `site` from its conditional law: neighbor mean plus `mark`.
#[inline]
pub fn glauber_update(bx: &LatticeBox, field: &mut HeightField, site: usize, mark: f64) {
    let mean = 0.25 * bx.neighbor_sum(site, &field.values, &field.boundary);
    field.values[site] = mean + mark;
}

/// Applies `events` in order; with `noise == false` the marks are ignored and
/// the field follows the deterministic heat flow.
pub fn evolve<'a>(bx: &LatticeBox, field: &mut HeightField, events: impl IntoIterator<Item = &'a Event>, noise: bool) {
    for e in events {
        glauber_update(bx, field, e.site, if noise { e.mark } else { 0.0 });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub time: f64,
    pub field: HeightField,
}

/// Initial field plus copies at the requested times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial: HeightField,
    pub snapshots: Vec<Snapshot>,
}

impl Trajectory {
    pub fn last(&self) -> &HeightField {
        self.snapshots.last().map_or(&self.initial, |s| &s.field)
    }
}

fn run(
    bx: &LatticeBox,
    h0: &HeightField,
    schedule: &UpdateSchedule,
    snapshot_times: &[f64],
    noise: bool,
) -> Result<Trajectory> {
    h0.check_box(bx)?;
    schedule.check_box(bx)?;
    for &t in snapshot_times {
        schedule.check_time(t)?;
    }
    let mut order: Vec<usize> = (0..snapshot_times.len()).collect();
    order.sort_by(|&a, &b| snapshot_times[a].total_cmp(&snapshot_times[b]));

    let mut field = h0.clone();
    let mut slots: Vec<Option<HeightField>> = vec![None; snapshot_times.len()];
    let events = schedule.events();
    let mut next = 0;
    for &k in &order {
        let t = snapshot_times[k];
        let end = next + events[next..].partition_point(|e| e.time <= t);
        evolve(bx, &mut field, &events[next..end], noise);
        next = end;
        slots[k] = Some(field.clone());
    }
    let snapshots = snapshot_times
        .iter()
        .zip(slots)
        .map(|(&time, f)| Snapshot {
            time,
            field: f.expect("every snapshot was filled"),
        })
        .collect();
    Ok(Trajectory {
        initial: h0.clone(),
        snapshots,
    })
}

/// Forward Glauber dynamics from `h0`; snapshots are right-continuous (an
/// event exactly at a snapshot time is included).
pub fn run_forward(
    bx: &LatticeBox,
    h0: &HeightField,
    schedule: &UpdateSchedule,
    snapshot_times: &[f64],
) -> Result<Trajectory> {
    run(bx, h0, schedule, snapshot_times, true)
}

/// The deterministic flow `f(t)` driven by the schedule with zero marks.
pub fn heat_flow(
    bx: &LatticeBox,
    l: &HeightField,
    schedule: &UpdateSchedule,
    snapshot_times: &[f64],
) -> Result<Trajectory> {
    run(bx, l, schedule, snapshot_times, false)
}

/// Exact sampler for the centered free field with covariance `G`.
#[derive(Debug, Clone)]
pub enum StationarySampler {
    /// `h = L ξ` with `G = L Lᵀ` the Cholesky factorization.
    Cholesky { n: usize, factor: DMatrix<f64> },
    /// `h = Σ_𝐢 λ_𝐢^{−1/2} ξ_𝐢 φ_𝐢`, i.e. the factor `Φ Λ^{−1/2}`; needs no
    /// dense Green's matrix.
    Spectral {
        n: usize,
        basis: DMatrix<f64>,
        inv_sqrt_lambda: DMatrix<f64>,
    },
}

impl StationarySampler {
    pub fn cholesky(greens: &GreensMatrix) -> Result<Self> {
        let chol = greens
            .matrix()
            .clone()
            .cholesky()
            .ok_or_else(|| DgffError::Numerical("Green's matrix is not positive definite".into()))?;
        Ok(Self::Cholesky {
            n: greens.n(),
            factor: chol.l(),
        })
    }

    pub fn spectral(bx: &LatticeBox) -> Self {
        let n = bx.n();
        let m = n - 1;
        let inv_sqrt_lambda = DMatrix::from_fn(m, m, |i1, i2| {
            1.0 / (0.5 * (lambda_1d(n, i1 + 1) + lambda_1d(n, i2 + 1))).sqrt()
        });
        Self::Spectral {
            n,
            basis: sine_basis(n),
            inv_sqrt_lambda,
        }
    }

    pub fn n(&self) -> usize {
        match self {
            Self::Cholesky { n, .. } | Self::Spectral { n, .. } => *n,
        }
    }

    pub fn sample(&self, bx: &LatticeBox, rng: &mut SimRng) -> Result<HeightField> {
        if self.n() != bx.n() {
            return Err(DgffError::ShapeMismatch {
                expected: bx.len(),
                got: (self.n() - 1).pow(2),
            });
        }
        let m = bx.len();
        let values = match self {
            Self::Cholesky { factor, .. } => {
                let xi = nalgebra::DVector::from_fn(m, |_, _| rng.sample::<f64, _>(StandardNormal));
                (factor * xi).as_slice().to_vec()
            }
            Self::Spectral {
                basis, inv_sqrt_lambda, ..
            } => {
                let side = basis.nrows();
                let w = DMatrix::from_fn(side, side, |i1, i2| {
                    inv_sqrt_lambda[(i1, i2)] * rng.sample::<f64, _>(StandardNormal)
                });
                // rows index x₁ and columns x₂, so column-major storage is site order
                (basis.transpose() * w * basis).as_slice().to_vec()
            }
        };
        HeightField::from_values(bx, values)
    }
}

/// One free-field sample through the Cholesky factor of `greens`.
pub fn sample_stationary(bx: &LatticeBox, greens: &GreensMatrix, rng: &mut SimRng) -> Result<HeightField> {
    StationarySampler::cholesky(greens)?.sample(bx, rng)
}

/// Initial conditions offered by the simulation front ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum InitialCondition {
    /// Every interior height equal to `n`.
    AllN,
    /// Every interior height equal to the given constant.
    Constant(f64),
    Flat,
    Stationary,
    /// A free-field sample plus a constant shift.
    ShiftedStationary(f64),
}

impl InitialCondition {
    pub fn build(&self, bx: &LatticeBox, sampler: Option<&StationarySampler>, rng: &mut SimRng) -> Result<HeightField> {
        let need_sampler = || {
            sampler.ok_or_else(|| DgffError::InvalidParameter("stationary initial condition needs a sampler".into()))
        };
        match *self {
            Self::AllN => Ok(HeightField::constant(bx, bx.n() as f64)),
            Self::Constant(c) => {
                if !c.is_finite() {
                    return Err(DgffError::NonFinite("initial constant"));
                }
                Ok(HeightField::constant(bx, c))
            }
            Self::Flat => Ok(HeightField::zeros(bx)),
            Self::Stationary => need_sampler()?.sample(bx, rng),
            Self::ShiftedStationary(shift) => {
                let mut f = need_sampler()?.sample(bx, rng)?;
                f.values.iter_mut().for_each(|v| *v += shift);
                Ok(f)
            }
        }
    }
}

impl std::str::FromStr for InitialCondition {
    type Err = DgffError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || DgffError::InvalidParameter(format!("unknown initial condition '{s}'"));
        match s {
            "all-n" => Ok(Self::AllN),
            "flat" => Ok(Self::Flat),
            "stationary" => Ok(Self::Stationary),
            _ => {
                if let Some(v) = s.strip_prefix("shifted-stationary:") {
                    v.parse().map(Self::ShiftedStationary).map_err(|_| bad())
                } else if let Some(v) = s.strip_prefix("constant:") {
                    v.parse().map(Self::Constant).map_err(|_| bad())
                } else {
                    Err(bad())
                }
            }
        }
    }
}
