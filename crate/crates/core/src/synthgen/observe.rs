use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FieldSeries, Grid};
use crate::error::{config, Result};

/// What a single reading measures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Tau {
    /// `u(x, t)`.
    Pointwise { t: f64 },
    /// Time mean of `u(x, .)` over `[t0, t1]`, by the trapezoid rule on
    /// `intervals` equal sub-intervals.
    Accumulative { t0: f64, t1: f64, intervals: usize },
}

impl Tau {
    /// Quadrature nodes and weights; the weights sum to one.
    pub fn quadrature(&self) -> Vec<(f64, f64)> {
        match *self {
            Tau::Pointwise { t } => vec![(t, 1.0)],
            Tau::Accumulative { t0, t1, intervals } => {
                let m = intervals.max(1);
                (0..=m)
                    .map(|k| {
                        let t = t0 + (t1 - t0) * k as f64 / m as f64;
                        let w = if k == 0 || k == m { 0.5 } else { 1.0 } / m as f64;
                        (t, w)
                    })
                    .collect()
            }
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Tau::Pointwise { .. } => "pointwise",
            Tau::Accumulative { .. } => "accumulative",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub tau: Tau,
    /// Spatial location.
    pub x: Vec<f64>,
    pub clean: f64,
    pub noisy: f64,
    pub sigma: f64,
    /// Readings sharing a group share a noise scale (one sensor, or one boundary data set).
    pub group: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub dims: usize,
    pub entries: Vec<Observation>,
    pub seed: Option<u64>,
}

impl ObservationSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Concatenates two sets; groups of `other` are shifted past those of `self`.
    pub fn merged(mut self, other: ObservationSet) -> Result<Self> {
        if !self.entries.is_empty() && !other.entries.is_empty() && self.dims != other.dims {
            return Err(config("cannot merge observations of different dimension"));
        }
        if self.entries.is_empty() {
            self.dims = other.dims;
        }
        let offset = self.entries.iter().map(|e| e.group + 1).max().unwrap_or(0);
        self.entries.extend(other.entries.into_iter().map(|mut e| {
            e.group += offset;
            e
        }));
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SensorSchedule {
    /// Readings every `every` solver steps, starting at step 0.
    Pointwise { every: usize },
    /// Consecutive non-overlapping windows of `window` solver steps.
    Accumulative { window: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorSet {
    pub locations: Vec<Vec<f64>>,
    pub schedule: SensorSchedule,
}

/// `count` sensor locations drawn uniformly inside the open unit box.
pub fn random_sensors(dims: usize, count: usize, seed: u64, schedule: SensorSchedule) -> SensorSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locations = (0..count)
        .map(|_| (0..dims).map(|_| rng.gen_range(0.02..0.98)).collect())
        .collect();
    SensorSet { locations, schedule }
}

fn check_locations(grid: &Grid, sensors: &SensorSet) -> Result<()> {
    let bad: Vec<String> = sensors
        .locations
        .iter()
        .enumerate()
        .filter(|(_, x)| x.len() != grid.dims || x.iter().any(|c| !(0.0..=1.0).contains(c)))
        .map(|(i, x)| format!("#{i} {x:?}"))
        .collect();
    if !bad.is_empty() {
        return Err(config(format!("sensors outside the domain: {}", bad.join(", "))));
    }
    Ok(())
}

/// Pointwise readings by multilinear interpolation at stored steps.
pub fn sample_pointwise(series: &FieldSeries, sensors: &SensorSet) -> Result<ObservationSet> {
    let grid = series.grid;
    check_locations(&grid, sensors)?;
    let SensorSchedule::Pointwise { every } = sensors.schedule else {
        return Err(config("sensor set is not pointwise"));
    };
    let every = every.max(1);
    let mut entries = Vec::new();
    for (s, x) in sensors.locations.iter().enumerate() {
        for step in (0..=grid.n_steps).step_by(every) {
            let v = series.interpolate(step, x)?;
            entries.push(Observation {
                tau: Tau::Pointwise { t: grid.time(step) },
                x: x.clone(),
                clean: v,
                noisy: v,
                sigma: 0.0,
                group: s,
            });
        }
    }
    Ok(ObservationSet {
        dims: grid.dims,
        entries,
        seed: None,
    })
}

/// Window means by the trapezoid rule over solver steps.
pub fn sample_accumulative(series: &FieldSeries, sensors: &SensorSet) -> Result<ObservationSet> {
    let grid = series.grid;
    check_locations(&grid, sensors)?;
    let SensorSchedule::Accumulative { window } = sensors.schedule else {
        return Err(config("sensor set is not accumulative"));
    };
    if window == 0 || window > grid.n_steps {
        return Err(config(format!(
            "window of {window} steps does not fit in {} steps",
            grid.n_steps
        )));
    }
    let mut entries = Vec::new();
    for (s, x) in sensors.locations.iter().enumerate() {
        let values: Vec<f64> = (0..=grid.n_steps)
            .map(|k| series.interpolate(k, x))
            .collect::<Result<_>>()?;
        let mut start = 0;
        while start + window <= grid.n_steps {
            let mut acc = 0.0;
            for k in start..start + window {
                acc += 0.5 * (values[k] + values[k + 1]);
            }
            let mean = acc / window as f64;
            entries.push(Observation {
                tau: Tau::Accumulative {
                    t0: grid.time(start),
                    t1: grid.time(start + window),
                    intervals: window,
                },
                x: x.clone(),
                clean: mean,
                noisy: mean,
                sigma: 0.0,
                group: s,
            });
            start += window;
        }
    }
    Ok(ObservationSet {
        dims: grid.dims,
        entries,
        seed: None,
    })
}

/// Adds `N(0, sigma^2)` noise with `sigma = level * RMS` of each group's clean values.
pub fn add_noise(obs: &ObservationSet, level: f64, seed: u64) -> Result<ObservationSet> {
    if level.is_nan() || level < 0.0 {
        return Err(config(format!("noise level must be non-negative, got {level}")));
    }
    let n_groups = obs.entries.iter().map(|e| e.group + 1).max().unwrap_or(0);
    let mut sum_sq = vec![0.0; n_groups];
    let mut count = vec![0usize; n_groups];
    for e in &obs.entries {
        sum_sq[e.group] += e.clean * e.clean;
        count[e.group] += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = obs
        .entries
        .iter()
        .map(|e| {
            let rms = (sum_sq[e.group] / count[e.group] as f64).sqrt();
            let sigma = level * rms;
            let eps: f64 = StandardNormal.sample(&mut rng);
            Observation {
                noisy: if level == 0.0 { e.clean } else { e.clean + sigma * eps },
                sigma,
                ..e.clone()
            }
        })
        .collect();
    Ok(ObservationSet {
        dims: obs.dims,
        entries,
        seed: Some(seed),
    })
}

/// Uniform random subset of `ceil(beta / 1000 * N)` boundary space-time nodes,
/// `N` being boundary nodes times stored steps. All entries share one group.
pub fn select_boundary_data(series: &FieldSeries, beta: f64, seed: u64) -> Result<ObservationSet> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(config(format!("beta must be positive, got {beta}")));
    }
    let grid = series.grid;
    let boundary: Vec<usize> = (0..grid.n_nodes()).filter(|&i| grid.on_boundary(i)).collect();
    let total = boundary.len() * (grid.n_steps + 1);
    let want = ((beta / 1000.0 * total as f64).ceil() as usize).min(total);
    let mut all: Vec<usize> = (0..total).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    all.shuffle(&mut rng);
    let mut chosen = all[..want].to_vec();
    chosen.sort_unstable();
    let entries = chosen
        .into_iter()
        .map(|k| {
            let step = k / boundary.len();
            let node = boundary[k % boundary.len()];
            let v = series.snapshots[step][node];
            Observation {
                tau: Tau::Pointwise { t: grid.time(step) },
                x: grid.coords(node),
                clean: v,
                noisy: v,
                sigma: 0.0,
                group: 0,
            }
        })
        .collect();
    Ok(ObservationSet {
        dims: grid.dims,
        entries,
        seed: Some(seed),
    })
}
