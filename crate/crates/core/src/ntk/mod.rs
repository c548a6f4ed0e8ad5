//! Empirical neural tangent kernel blocks `K = J J^T` of each loss term, their
//! traces, the trace-ratio loss weights and eigenvalue spectra.
//!
//! Jacobian columns always follow the bundle's trainable flat order, so rows
//! from different loss terms can be stacked and multiplied directly.

use std::fmt;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{flat_grad, Matrix, NodeId, Tape};
use crate::error::{structural, Error, Result};
use crate::networks::NetworkBundle;
use crate::pdemodel::{
    boundary_tape, residual_tape, u_value_tape, velocity_tape, Batches, BoundaryBatch, BundleBinding, DataBatch,
    VelocityBatch,
};

/// The loss terms of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LossKind {
    Residual,
    Boundary,
    Data,
    Velocity,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Residual, LossKind::Boundary, LossKind::Data, LossKind::Velocity];

    /// Block label used in exported spectra.
    pub fn label(self) -> &'static str {
        match self {
            LossKind::Residual => "rr",
            LossKind::Boundary => "bb",
            LossKind::Data => "zz",
            LossKind::Velocity => "vv",
        }
    }
}

/// One value per loss term; the velocity entry exists only when velocity data do.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerLoss {
    pub r: f64,
    pub b: f64,
    pub z: f64,
    pub v: Option<f64>,
}

impl PerLoss {
    pub fn ones(with_velocity: bool) -> Self {
        Self {
            r: 1.0,
            b: 1.0,
            z: 1.0,
            v: with_velocity.then_some(1.0),
        }
    }

    pub fn get(&self, kind: LossKind) -> Option<f64> {
        match kind {
            LossKind::Residual => Some(self.r),
            LossKind::Boundary => Some(self.b),
            LossKind::Data => Some(self.z),
            LossKind::Velocity => self.v,
        }
    }

    pub fn set(&mut self, kind: LossKind, value: f64) {
        match kind {
            LossKind::Residual => self.r = value,
            LossKind::Boundary => self.b = value,
            LossKind::Data => self.z = value,
            LossKind::Velocity => self.v = Some(value),
        }
    }

    /// Present entries in `r, b, z, v` order.
    pub fn entries(&self) -> Vec<(LossKind, f64)> {
        LossKind::ALL
            .iter()
            .filter_map(|&k| self.get(k).map(|v| (k, v)))
            .collect()
    }
}

impl fmt::Display for PerLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(r {:.4e}, b {:.4e}, z {:.4e}", self.r, self.b, self.z)?;
        if let Some(v) = self.v {
            write!(f, ", v {v:.4e}")?;
        }
        f.write_str(")")
    }
}

/// Loss weights `lambda_alpha`.
pub type Weights = PerLoss;
/// Kernel block traces `Tr(K_alpha alpha)`.
pub type Traces = PerLoss;

/// Traces below this are treated as absent and keep their previous weight.
pub const TRACE_FLOOR: f64 = 1e-30;

/// `lambda_alpha = Tr(K) / Tr(K_alpha alpha)` with `Tr(K)` the sum of the block traces.
pub fn adaptive_weights(traces: &Traces, previous: &Weights) -> Result<Weights> {
    let entries = traces.entries();
    if entries.iter().any(|(_, t)| !t.is_finite() || *t < 0.0) {
        return Err(Error::Numeric(format!("invalid kernel traces {traces}")));
    }
    let total: f64 = entries.iter().map(|(_, t)| t).sum();
    if entries.iter().all(|(_, t)| *t < TRACE_FLOOR) {
        return Err(Error::DegenerateKernel(format!("all kernel traces vanish: {traces}")));
    }
    let mut w = *previous;
    for (k, t) in entries {
        if t >= TRACE_FLOOR {
            w.set(k, total / t);
        } else if previous.get(k).is_none() {
            w.set(k, 1.0);
        }
    }
    Ok(w)
}

/// `Tr(J J^T)`, the squared Frobenius norm of `J`.
pub fn trace_fast(j: &Matrix) -> f64 {
    j.iter().map(|v| v * v).sum()
}

/// Eigenvalues of a symmetric block in descending order, floored at `-1e-12`.
pub fn spectrum(block: &Matrix) -> Result<Vec<f64>> {
    let (n, m) = block.dim();
    if n != m {
        return Err(structural(format!("spectrum of a non-square {n}x{m} block")));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let dm = DMatrix::from_fn(n, n, |i, j| 0.5 * (block[[i, j]] + block[[j, i]]));
    let mut ev: Vec<f64> = SymmetricEigen::new(dm).eigenvalues.iter().map(|&v| v.max(-1e-12)).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    Ok(ev)
}

/// Raw eigenvalues without the reporting floor, ascending.
pub fn eigenvalues_raw(block: &Matrix) -> Result<Vec<f64>> {
    let (n, m) = block.dim();
    if n != m {
        return Err(structural("eigenvalues of a non-square block"));
    }
    let dm = DMatrix::from_fn(n, n, |i, j| block[[i, j]]);
    let mut ev: Vec<f64> = SymmetricEigen::new(dm).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    Ok(ev)
}

/// Seeded sorted subsample of `min(cap, n)` distinct indices from `0..n`.
pub fn subsample(n: usize, cap: usize, seed: u64) -> Vec<usize> {
    if n <= cap {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, n, cap).into_vec();
    idx.sort_unstable();
    idx
}

// ---------------------------------------------------------------------------
// Jacobian rows.

fn row_of(points: &Array2<f64>, i: usize) -> Array2<f64> {
    points.row(i).to_owned().insert_axis(ndarray::Axis(0))
}

/// Number of Jacobian rows a loss term contributes.
pub fn row_count(batches: &Batches, kind: LossKind) -> usize {
    match kind {
        LossKind::Residual => batches.residual.nrows(),
        LossKind::Boundary => batches.boundary.len(),
        LossKind::Data => batches.data.len(),
        LossKind::Velocity => batches.velocity.as_ref().map_or(0, VelocityBatch::len),
    }
}

fn build_boundary_row(
    tape: &mut Tape,
    bundle: &NetworkBundle,
    bind: &BundleBinding,
    boundary: &BoundaryBatch,
    mut i: usize,
) -> Result<NodeId> {
    for g in &boundary.groups {
        if i < g.points.nrows() {
            return boundary_tape(tape, bundle, bind, &row_of(&g.points, i), &row_of(&g.normals, i), g.condition);
        }
        i -= g.points.nrows();
    }
    if i < boundary.initial.nrows() {
        return u_value_tape(tape, bundle, bind, &row_of(&boundary.initial, i));
    }
    Err(structural("boundary row out of range"))
}

fn build_data_row(tape: &mut Tape, bundle: &NetworkBundle, bind: &BundleBinding, data: &DataBatch, i: usize) -> Result<NodeId> {
    let row = data.rows.get(i).ok_or_else(|| structural("data row out of range"))?;
    let pts = Array2::from_shape_fn((row.len(), data.points.ncols()), |(r, c)| data.points[[row[r].0, c]]);
    let u = u_value_tape(tape, bundle, bind, &pts)?;
    if row.len() == 1 && row[0].1 == 1.0 {
        return Ok(u);
    }
    let w = tape.constant(Array2::from_shape_fn((1, row.len()), |(_, c)| row[c].1));
    tape.matmul(w, u)
}

fn build_velocity_row(
    tape: &mut Tape,
    bundle: &NetworkBundle,
    bind: &BundleBinding,
    vb: &VelocityBatch,
    i: usize,
) -> Result<NodeId> {
    let k = vb.axes.len();
    let (p, a) = (i / k, i % k);
    if p >= vb.points.nrows() {
        return Err(structural("velocity row out of range"));
    }
    velocity_tape(tape, bundle, bind, &row_of(&vb.points, p), vb.axes[a])
}

/// Gradient of the `i`-th output of loss term `kind` with respect to the
/// trainable parameters, appended to `out`.
pub fn jacobian_row(bundle: &NetworkBundle, batches: &Batches, kind: LossKind, i: usize, out: &mut Vec<f64>) -> Result<()> {
    let mut tape = Tape::new();
    let bind = BundleBinding::new(&mut tape, bundle);
    let node = match kind {
        LossKind::Residual => {
            if i >= batches.residual.nrows() {
                return Err(structural("residual row out of range"));
            }
            residual_tape(&mut tape, bundle, &bind, &row_of(&batches.residual, i))?
        }
        LossKind::Boundary => build_boundary_row(&mut tape, bundle, &bind, &batches.boundary, i)?,
        LossKind::Data => build_data_row(&mut tape, bundle, &bind, &batches.data, i)?,
        LossKind::Velocity => {
            let vb = batches
                .velocity
                .as_ref()
                .ok_or_else(|| structural("no velocity data"))?;
            build_velocity_row(&mut tape, bundle, &bind, vb, i)?
        }
    };
    let grads = tape.backward(node)?;
    for b in bind.trainable(bundle) {
        flat_grad(&tape, &grads, b, out);
    }
    Ok(())
}

/// Jacobian of loss term `kind` restricted to `rows` (all rows when `None`).
pub fn jacobian(bundle: &NetworkBundle, batches: &Batches, kind: LossKind, rows: Option<&[usize]>) -> Result<Matrix> {
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..row_count(batches, kind)).collect();
            &all
        }
    };
    let p = bundle.n_trainable();
    let mut j = Array2::zeros((rows.len(), p));
    let mut buf = Vec::with_capacity(p);
    for (r, &i) in rows.iter().enumerate() {
        buf.clear();
        jacobian_row(bundle, batches, kind, i, &mut buf)?;
        j.row_mut(r).assign(&ArrayView1::from(&buf[..]));
    }
    Ok(j)
}

/// `Tr(J J^T)` over `rows`, accumulated row by row without storing `J`.
pub fn trace_rows(bundle: &NetworkBundle, batches: &Batches, kind: LossKind, rows: &[usize]) -> Result<f64> {
    let mut buf = Vec::with_capacity(bundle.n_trainable());
    let mut total = 0.0;
    for &i in rows {
        buf.clear();
        jacobian_row(bundle, batches, kind, i, &mut buf)?;
        total += buf.iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total)
}

/// Residual Jacobian at the given interior points.
pub fn build_residual_jacobian(bundle: &NetworkBundle, points: &Array2<f64>) -> Result<Matrix> {
    let p = bundle.n_trainable();
    let mut j = Array2::zeros((points.nrows(), p));
    let mut buf = Vec::with_capacity(p);
    for i in 0..points.nrows() {
        let mut tape = Tape::new();
        let bind = BundleBinding::new(&mut tape, bundle);
        let node = residual_tape(&mut tape, bundle, &bind, &row_of(points, i))?;
        let grads = tape.backward(node)?;
        buf.clear();
        for b in bind.trainable(bundle) {
            flat_grad(&tape, &grads, b, &mut buf);
        }
        j.row_mut(i).assign(&ArrayView1::from(&buf[..]));
    }
    Ok(j)
}

fn with_batches<T>(residual_cols: usize, boundary: &BoundaryBatch, data: &DataBatch, f: impl FnOnce(&Batches) -> T) -> T {
    let b = Batches {
        residual: Array2::zeros((0, residual_cols)),
        boundary: boundary.clone(),
        data: data.clone(),
        velocity: None,
    };
    f(&b)
}

/// Boundary and data Jacobians `(J_b, J_z)`.
pub fn build_data_jacobians(bundle: &NetworkBundle, boundary: &BoundaryBatch, data: &DataBatch) -> Result<(Matrix, Matrix)> {
    if boundary.is_empty() || data.is_empty() {
        return Err(crate::error::config("kernel batches must be nonempty"));
    }
    with_batches(bundle.n_coords(), boundary, data, |b| {
        Ok((
            jacobian(bundle, b, LossKind::Boundary, None)?,
            jacobian(bundle, b, LossKind::Data, None)?,
        ))
    })
}

// ---------------------------------------------------------------------------
// Materialized kernels.

/// Diagonal kernel blocks (and optionally off-diagonal ones) built from named Jacobians.
#[derive(Clone, Debug)]
pub struct KernelBlocks {
    pub names: Vec<String>,
    pub diag: Vec<Matrix>,
    /// `(a, b, K_ab)` for `a < b`.
    pub offdiag: Vec<(usize, usize, Matrix)>,
    pub traces: Vec<f64>,
}

impl KernelBlocks {
    pub fn from_jacobians(named: &[(&str, &Matrix)], with_offdiag: bool) -> Result<Self> {
        if let Some(w) = named.first().map(|(_, j)| j.ncols()) {
            if named.iter().any(|(_, j)| j.ncols() != w) {
                return Err(structural("Jacobians have different column counts"));
            }
        }
        let diag: Vec<Matrix> = named.iter().map(|(_, j)| j.dot(&j.t())).collect();
        let traces = diag.iter().map(|k| k.diag().sum()).collect();
        let mut offdiag = Vec::new();
        if with_offdiag {
            for a in 0..named.len() {
                for b in a + 1..named.len() {
                    offdiag.push((a, b, named[a].1.dot(&named[b].1.t())));
                }
            }
        }
        Ok(Self {
            names: named.iter().map(|(n, _)| n.to_string()).collect(),
            diag,
            offdiag,
            traces,
        })
    }

    pub fn block(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.diag[i])
    }

    /// The full kernel assembled from every block (requires off-diagonals).
    pub fn full(&self) -> Result<Matrix> {
        let k = self.names.len();
        if k > 1 && self.offdiag.len() != k * (k - 1) / 2 {
            return Err(structural("off-diagonal blocks were not computed"));
        }
        let sizes: Vec<usize> = self.diag.iter().map(|d| d.nrows()).collect();
        let starts: Vec<usize> = sizes.iter().scan(0, |s, &n| {
            let r = *s;
            *s += n;
            Some(r)
        }).collect();
        let n: usize = sizes.iter().sum();
        let mut full = Array2::zeros((n, n));
        for (i, d) in self.diag.iter().enumerate() {
            full.slice_mut(ndarray::s![starts[i]..starts[i] + sizes[i], starts[i]..starts[i] + sizes[i]]).assign(d);
        }
        for (a, b, m) in &self.offdiag {
            let (ra, rb) = (starts[*a]..starts[*a] + sizes[*a], starts[*b]..starts[*b] + sizes[*b]);
            full.slice_mut(ndarray::s![ra.clone(), rb.clone()]).assign(m);
            full.slice_mut(ndarray::s![rb, ra]).assign(&m.t());
        }
        Ok(full)
    }
}

// ---------------------------------------------------------------------------
// Exports.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRecord {
    pub block: String,
    pub index: usize,
    pub eigenvalue: f64,
    pub step: usize,
}

/// `block,index,eigenvalue,step`, sorted by step, block and index.
pub fn write_spectra_csv(path: &Path, records: &[SpectrumRecord]) -> Result<()> {
    let mut sorted: Vec<&SpectrumRecord> = records.iter().collect();
    sorted.sort_by(|a, b| (a.step, &a.block, a.index).cmp(&(b.step, &b.block, b.index)));
    let mut text = String::from("block,index,eigenvalue,step\n");
    for r in sorted {
        text.push_str(&format!("{},{},{},{}\n", r.block, r.index, r.eigenvalue, r.step));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// `step,lambda_r,lambda_b,lambda_z[,lambda_v]`.
pub fn write_weight_history(path: &Path, history: &[(usize, Weights)]) -> Result<()> {
    let with_v = history.iter().any(|(_, w)| w.v.is_some());
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("step,lambda_r,lambda_b,lambda_z");
    if with_v {
        text.push_str(",lambda_v");
    }
    text.push('\n');
    for (step, w) in history {
        text.push_str(&format!("{step},{},{},{}", w.r, w.b, w.z));
        if with_v {
            text.push_str(&format!(",{}", w.v.unwrap_or(f64::NAN)));
        }
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
