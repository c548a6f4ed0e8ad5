//! Collocation and data batches, and the per-loss residual vectors built from them.

use ndarray::Array2;

use super::{boundary_tape, residual_tape, u_value_tape, velocity_tape, BoundaryCondition, BundleBinding};
use crate::diffcore::{NodeId, Tape};
use crate::error::{config, structural, Result};
use crate::networks::NetworkBundle;
use crate::synthgen::ObservationSet;

/// Boundary points of one condition type with their outward normals.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryGroup {
    pub condition: BoundaryCondition,
    pub points: Array2<f64>,
    pub normals: Array2<f64>,
}

/// Boundary-condition and initial-condition collocation points.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryBatch {
    pub groups: Vec<BoundaryGroup>,
    /// Points with `t = 0`.
    pub initial: Array2<f64>,
}

impl BoundaryBatch {
    pub fn len(&self) -> usize {
        self.groups.iter().map(|g| g.points.nrows()).sum::<usize>() + self.initial.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Observations as weighted sums of `u` at quadrature points.
#[derive(Clone, Debug, PartialEq)]
pub struct DataBatch {
    /// Quadrature points `(x, y[, z], t)`.
    pub points: Array2<f64>,
    /// For each observation, `(point row, weight)` pairs.
    pub rows: Vec<Vec<(usize, f64)>>,
    pub targets: Vec<f64>,
}

impl DataBatch {
    pub fn from_observations(obs: &ObservationSet) -> Result<Self> {
        let n = obs.dims + 1;
        let mut flat = Vec::new();
        let mut rows = Vec::with_capacity(obs.len());
        let mut targets = Vec::with_capacity(obs.len());
        let mut count = 0;
        for e in &obs.entries {
            if e.x.len() != obs.dims {
                return Err(structural("observation location has the wrong dimension"));
            }
            let mut row = Vec::new();
            for (t, w) in e.tau.quadrature() {
                flat.extend_from_slice(&e.x);
                flat.push(t);
                row.push((count, w));
                count += 1;
            }
            rows.push(row);
            targets.push(e.noisy);
        }
        let points = Array2::from_shape_vec((count, n), flat).expect("rows of n coordinates");
        Ok(Self { points, rows, targets })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Every observation reads exactly its own point with weight one.
    pub fn is_pointwise(&self) -> bool {
        self.rows
            .iter()
            .enumerate()
            .all(|(i, r)| r.len() == 1 && r[0] == (i, 1.0))
    }

    /// Dense `(observations, points)` weight matrix.
    pub fn weight_matrix(&self) -> Array2<f64> {
        let mut w = Array2::zeros((self.rows.len(), self.points.nrows()));
        for (i, r) in self.rows.iter().enumerate() {
            for &(j, v) in r {
                w[[i, j]] += v;
            }
        }
        w
    }
}

/// Velocity measurements: component `axes[k]` of `V` at each point is `targets[[i, k]]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityBatch {
    pub points: Array2<f64>,
    pub axes: Vec<usize>,
    pub targets: Array2<f64>,
}

impl VelocityBatch {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Every point set the loss is evaluated on.
#[derive(Clone, Debug, PartialEq)]
pub struct Batches {
    pub residual: Array2<f64>,
    pub boundary: BoundaryBatch,
    pub data: DataBatch,
    pub velocity: Option<VelocityBatch>,
}

/// Residual vectors of each loss term on one tape.
#[derive(Clone, Debug)]
pub struct LossNodes {
    /// `(N_r, 1)` PDE residuals.
    pub r: NodeId,
    /// One `(n, 1)` node per boundary group, then the initial-condition node.
    pub b: Vec<NodeId>,
    /// `(N_z, 1)` misfits `tau[u] - z*`.
    pub z: NodeId,
    /// One `(n, 1)` misfit node per measured velocity axis; empty without velocity data.
    pub v: Vec<NodeId>,
}

/// Observation predictions `tau[u]` as an `(N_z, 1)` node.
pub fn data_prediction_tape(tape: &mut Tape, bundle: &NetworkBundle, bind: &BundleBinding, data: &DataBatch) -> Result<NodeId> {
    if data.is_empty() {
        return Err(config("empty data batch"));
    }
    let u = u_value_tape(tape, bundle, bind, &data.points)?;
    if data.is_pointwise() {
        Ok(u)
    } else {
        let w = tape.constant(data.weight_matrix());
        tape.matmul(w, u)
    }
}

/// Velocity predictions, one node per measured axis.
pub fn velocity_prediction_tape(
    tape: &mut Tape,
    bundle: &NetworkBundle,
    bind: &BundleBinding,
    vb: &VelocityBatch,
) -> Result<Vec<NodeId>> {
    vb.axes
        .iter()
        .map(|&a| velocity_tape(tape, bundle, bind, &vb.points, a))
        .collect()
}

fn column_target(tape: &mut Tape, targets: &Array2<f64>, k: usize) -> NodeId {
    tape.constant(targets.column(k).to_owned().insert_axis(ndarray::Axis(1)))
}

/// Builds every loss residual vector on `tape`.
pub fn loss_nodes(tape: &mut Tape, bundle: &NetworkBundle, bind: &BundleBinding, batches: &Batches) -> Result<LossNodes> {
    if batches.residual.nrows() == 0 || batches.boundary.is_empty() || batches.data.is_empty() {
        return Err(config("every loss term needs at least one point"));
    }
    let r = residual_tape(tape, bundle, bind, &batches.residual)?;
    let mut b = Vec::new();
    for g in &batches.boundary.groups {
        if g.points.nrows() > 0 {
            b.push(boundary_tape(tape, bundle, bind, &g.points, &g.normals, g.condition)?);
        }
    }
    if batches.boundary.initial.nrows() > 0 {
        b.push(u_value_tape(tape, bundle, bind, &batches.boundary.initial)?);
    }
    let pred = data_prediction_tape(tape, bundle, bind, &batches.data)?;
    let target = tape.constant(Array2::from_shape_vec((batches.data.len(), 1), batches.data.targets.clone()).expect("column"));
    let z = tape.sub(pred, target)?;
    let mut v = Vec::new();
    if let Some(vb) = batches.velocity.as_ref().filter(|vb| !vb.is_empty()) {
        let preds = velocity_prediction_tape(tape, bundle, bind, vb)?;
        for (k, p) in preds.into_iter().enumerate() {
            let t = column_target(tape, &vb.targets, k);
            // a scalar coefficient predicts one (1, 1) value, broadcast over rows
            v.push(tape.sub(p, t)?);
        }
    }
    Ok(LossNodes { r, b, z, v })
}
