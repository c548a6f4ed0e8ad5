//! Finite-difference truth solver, sensor sampling, boundary-data subsetting
//! and observation noise.

mod io;
mod observe;
mod solver;

pub use io::{read_observations, write_observations, write_series};
pub use observe::{
    add_noise, random_sensors, sample_accumulative, sample_pointwise, select_boundary_data, Observation,
    ObservationSet, SensorSchedule, SensorSet, Tau,
};
pub use solver::{solve_forward, ForwardProblem};

use serde::{Deserialize, Serialize};

use crate::error::{config, structural, Result};

/// Uniform node-centred grid on the unit square or cube and a uniform time step on `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: usize,
    /// Cells per axis; there are `n + 1` nodes per axis.
    pub n: usize,
    pub dt: f64,
    pub n_steps: usize,
}

impl Grid {
    pub fn new(dims: usize, n: usize, n_steps: usize) -> Result<Self> {
        if !(2..=3).contains(&dims) {
            return Err(config("grid dimension must be 2 or 3"));
        }
        if n < 8 {
            return Err(config(format!("grid needs at least 8 cells per axis, got {n}")));
        }
        if n_steps == 0 {
            return Err(config("grid needs at least one time step"));
        }
        Ok(Self {
            dims,
            n,
            dt: 1.0 / n_steps as f64,
            n_steps,
        })
    }

    pub fn h(&self) -> f64 {
        1.0 / self.n as f64
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.n + 1
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes_per_axis().pow(self.dims as u32)
    }

    /// Node index from per-axis indices; the x index varies fastest.
    pub fn index(&self, ijk: &[usize]) -> usize {
        let m = self.nodes_per_axis();
        ijk.iter().rev().fold(0, |acc, &i| acc * m + i)
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        let m = self.nodes_per_axis();
        (0..self.dims)
            .map(|_| {
                let i = idx % m;
                idx /= m;
                i
            })
            .collect()
    }

    pub fn coords(&self, idx: usize) -> Vec<f64> {
        let h = self.h();
        self.multi_index(idx).into_iter().map(|i| i as f64 * h).collect()
    }

    pub fn time(&self, step: usize) -> f64 {
        step as f64 * self.dt
    }

    /// Nearest stored step to time `t`.
    pub fn nearest_step(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.n_steps)
    }

    /// Whether node `idx` lies on any face of the box.
    pub fn on_boundary(&self, idx: usize) -> bool {
        self.multi_index(idx).iter().any(|&i| i == 0 || i == self.n)
    }
}

/// Nodal values at every stored time step.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSeries {
    pub grid: Grid,
    /// `n_steps + 1` snapshots of `grid.n_nodes()` values.
    pub snapshots: Vec<Vec<f64>>,
}

impl FieldSeries {
    pub fn new(grid: Grid, snapshots: Vec<Vec<f64>>) -> Result<Self> {
        if snapshots.len() != grid.n_steps + 1 {
            return Err(structural(format!(
                "{} snapshots for {} steps",
                snapshots.len(),
                grid.n_steps
            )));
        }
        if snapshots.iter().any(|s| s.len() != grid.n_nodes()) {
            return Err(structural("snapshot size does not match grid"));
        }
        if snapshots.iter().flatten().any(|v| !v.is_finite()) {
            return Err(crate::Error::Numeric("non-finite value in field series".into()));
        }
        Ok(Self { grid, snapshots })
    }

    /// Samples a closed-form `u(x, t)` on the grid.
    pub fn from_fn(grid: Grid, f: impl Fn(&[f64], f64) -> f64) -> Result<Self> {
        let coords: Vec<Vec<f64>> = (0..grid.n_nodes()).map(|i| grid.coords(i)).collect();
        let snapshots = (0..=grid.n_steps)
            .map(|s| coords.iter().map(|x| f(x, grid.time(s))).collect())
            .collect();
        Self::new(grid, snapshots)
    }

    /// Multilinear interpolation of snapshot `step` at spatial point `x`.
    pub fn interpolate(&self, step: usize, x: &[f64]) -> Result<f64> {
        let g = &self.grid;
        if x.len() != g.dims {
            return Err(structural("point dimension does not match grid"));
        }
        if x.iter().any(|&c| !(0.0..=1.0).contains(&c)) {
            return Err(config(format!("point {x:?} lies outside the unit domain")));
        }
        let snap = &self.snapshots[step];
        let mut base = Vec::with_capacity(g.dims);
        let mut frac = Vec::with_capacity(g.dims);
        for &c in x {
            let s = c * g.n as f64;
            let i = (s.floor() as usize).min(g.n - 1);
            base.push(i);
            frac.push(s - i as f64);
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << g.dims) {
            let mut w = 1.0;
            let mut ijk = base.clone();
            for a in 0..g.dims {
                if corner >> a & 1 == 1 {
                    ijk[a] += 1;
                    w *= frac[a];
                } else {
                    w *= 1.0 - frac[a];
                }
            }
            if w != 0.0 {
                acc += w * snap[g.index(&ijk)];
            }
        }
        Ok(acc)
    }

    pub fn last(&self) -> &[f64] {
        self.snapshots.last().expect("at least one snapshot")
    }
}

#[cfg(test)]
mod tests;
