//! Advection-diffusion residuals, boundary and initial residuals, and the
//! closed-form truth fields of the three test problems.
//!
//! The residual is evaluated in expanded form
//! `u_t + sum_i [(d_i V_i) u + V_i u_i - (d_i D_i) u_i - D_i u_ii] - f`,
//! which needs only first and diagonal second derivatives of `u`.

mod batch;
mod truth;

pub use batch::*;
pub use truth::*;

use ndarray::Array2;

use crate::diffcore::{jet_forward, mlp_forward_tape, mlp_jet_tape, NodeId, ParamBinding, Tape, TapeJet};
use crate::error::{config, structural, Result};
use crate::networks::{CoefSource, Net, NetworkBundle, SourceModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointKind {
    Interior,
    Boundary,
    Initial,
}

/// A space-time collocation point `(x, y[, z], t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPoint {
    pub coords: Vec<f64>,
    pub kind: PointKind,
    pub normal: Option<Vec<f64>>,
}

impl ResidualPoint {
    pub fn interior(coords: Vec<f64>) -> Self {
        Self {
            coords,
            kind: PointKind::Interior,
            normal: None,
        }
    }

    pub fn boundary(coords: Vec<f64>, normal: Vec<f64>) -> Self {
        Self {
            coords,
            kind: PointKind::Boundary,
            normal: Some(normal),
        }
    }

    pub fn initial(coords: Vec<f64>) -> Self {
        Self {
            coords,
            kind: PointKind::Initial,
            normal: None,
        }
    }
}

/// Boundary condition enforced on a face.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    /// `n . grad u = 0`.
    Neumann,
    /// `sum_i n_i D_i d_i u = 0`.
    DiffusiveFlux,
    /// `u = 0`.
    Dirichlet,
}

/// Outward unit normal of the unit-box face `axis = side` (side 0 or 1).
pub fn face_normal(dims: usize, axis: usize, side: usize) -> Vec<f64> {
    let mut n = vec![0.0; dims];
    n[axis] = if side == 0 { -1.0 } else { 1.0 };
    n
}

/// Condition on face `(axis, side)` for a problem of the given dimension: all
/// faces reflective in 2D; in 3D the top face carries zero diffusive flux and
/// every other face is held at zero.
pub fn face_condition(dims: usize, axis: usize, side: usize) -> BoundaryCondition {
    match dims {
        3 if axis == 2 && side == 1 => BoundaryCondition::DiffusiveFlux,
        3 => BoundaryCondition::Dirichlet,
        _ => BoundaryCondition::Neumann,
    }
}

// ---------------------------------------------------------------------------
// Pointwise evaluation.

struct PointCoef {
    value: f64,
    /// Derivative along the coefficient's own axis.
    axis_deriv: f64,
}

fn point_coef(bundle: &NetworkBundle, src: &CoefSource, net: Option<&Net>, axis: usize, p: &[f64]) -> Result<PointCoef> {
    match src {
        CoefSource::Gamma { index, positive } => {
            let value = bundle
                .gamma_value(*index, *positive)
                .ok_or_else(|| config("coefficient refers to a missing scalar"))?;
            Ok(PointCoef { value, axis_deriv: 0.0 })
        }
        CoefSource::Net { output } => {
            let net = net.ok_or_else(|| config("coefficient refers to a missing network"))?;
            let jets = jet_forward(&net.spec, &net.params, &net.local(p))?;
            let jet = jets
                .get(*output)
                .ok_or_else(|| config("coefficient network output out of range"))?;
            let axis_deriv = net.local_index(axis).map_or(0.0, |k| jet.grad[k]);
            Ok(PointCoef {
                value: jet.value,
                axis_deriv,
            })
        }
        CoefSource::Fixed(ff) => {
            let (value, g) = ff.eval(p);
            Ok(PointCoef {
                value,
                axis_deriv: g[axis],
            })
        }
    }
}

/// Derivatives of `u` with respect to the global coordinates at `p`.
fn u_derivatives(bundle: &NetworkBundle, p: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let net = &bundle.u_net;
    let jet = jet_forward(&net.spec, &net.params, &net.local(p))?
        .into_iter()
        .next()
        .ok_or_else(|| structural("u network has no output"))?;
    let n = bundle.n_coords();
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    for g in 0..n {
        if let Some(k) = net.local_index(g) {
            grad[g] = jet.grad[k];
            hess[g] = jet.diag_hess[k];
        }
    }
    Ok((jet.value, grad, hess))
}

fn check_point(bundle: &NetworkBundle, p: &ResidualPoint) -> Result<()> {
    if p.coords.len() != bundle.n_coords() {
        return Err(structural(format!(
            "point has {} coordinates, problem has {}",
            p.coords.len(),
            bundle.n_coords()
        )));
    }
    Ok(())
}

/// PDE residual at one interior point.
pub fn ade_residual(bundle: &NetworkBundle, p: &ResidualPoint) -> Result<f64> {
    check_point(bundle, p)?;
    if p.kind != PointKind::Interior {
        return Err(structural("residual requested at a non-interior point"));
    }
    let x = &p.coords;
    let sd = bundle.spatial_dims;
    let (u, grad, hess) = u_derivatives(bundle, x)?;
    let mut r = grad[sd];
    for i in 0..sd {
        let v = point_coef(bundle, &bundle.velocity[i], bundle.v_net.as_ref(), i, x)?;
        let d = point_coef(bundle, &bundle.diffusion[i], bundle.d_net.as_ref(), i, x)?;
        r += v.axis_deriv * u + v.value * grad[i] - d.axis_deriv * grad[i] - d.value * hess[i];
    }
    Ok(r - bundle.source_value(x)?)
}

/// Boundary residual at one boundary point.
pub fn boundary_residual(bundle: &NetworkBundle, p: &ResidualPoint, bc: BoundaryCondition) -> Result<f64> {
    check_point(bundle, p)?;
    let x = &p.coords;
    let sd = bundle.spatial_dims;
    if bc == BoundaryCondition::Dirichlet {
        return bundle.u_value(x);
    }
    let normal = p
        .normal
        .as_ref()
        .ok_or_else(|| structural("flux boundary point has no normal"))?;
    if normal.len() != sd {
        return Err(structural("normal length does not match spatial dimension"));
    }
    let (_, grad, _) = u_derivatives(bundle, x)?;
    let mut r = 0.0;
    for i in 0..sd {
        if normal[i] == 0.0 {
            continue;
        }
        let scale = match bc {
            BoundaryCondition::Neumann => 1.0,
            _ => point_coef(bundle, &bundle.diffusion[i], bundle.d_net.as_ref(), i, x)?.value,
        };
        r += normal[i] * scale * grad[i];
    }
    Ok(r)
}

/// `u(x, 0)` for the homogeneous initial condition.
pub fn initial_residual(bundle: &NetworkBundle, p: &ResidualPoint) -> Result<f64> {
    check_point(bundle, p)?;
    let t = p.coords[bundle.spatial_dims];
    if t != 0.0 {
        return Err(structural(format!("initial point has t = {t}")));
    }
    bundle.u_value(&p.coords)
}

// ---------------------------------------------------------------------------
// Batched residuals on a tape.

/// Tape leaves for every parameter block of a bundle. Trainable blocks are
/// differentiable; frozen ones are constants.
#[derive(Clone, Debug)]
pub struct BundleBinding {
    pub u: ParamBinding,
    pub f: Option<ParamBinding>,
    pub v: Option<ParamBinding>,
    pub d: Option<ParamBinding>,
    pub gamma: Option<ParamBinding>,
}

impl BundleBinding {
    pub fn new(tape: &mut Tape, bundle: &NetworkBundle) -> Self {
        let tr = bundle.trainable;
        let mut bind = |on: bool, p: &crate::diffcore::ParamVector| {
            if on {
                tape.bind(p)
            } else {
                tape.bind_const(p)
            }
        };
        let u = bind(tr.u, &bundle.u_net.params);
        let f = match &bundle.source {
            SourceModel::Net(n) => Some(bind(tr.f, &n.params)),
            SourceModel::Fixed(_) => None,
        };
        let v = bundle.v_net.as_ref().map(|n| bind(tr.v, &n.params));
        let d = bundle.d_net.as_ref().map(|n| bind(tr.d, &n.params));
        let gamma = bundle.gamma.as_ref().map(|g| bind(tr.gamma, &g.params));
        Self { u, f, v, d, gamma }
    }

    /// Bindings of the trainable blocks in the bundle's flat order.
    pub fn trainable<'a>(&'a self, bundle: &NetworkBundle) -> Vec<&'a ParamBinding> {
        let tr = bundle.trainable;
        let mut out = Vec::new();
        if tr.u {
            out.push(&self.u);
        }
        for (on, b) in [(tr.f, &self.f), (tr.v, &self.v), (tr.d, &self.d), (tr.gamma, &self.gamma)] {
            if let (true, Some(b)) = (on, b) {
                out.push(b);
            }
        }
        out
    }
}

/// Selects the columns of `pts` a network reads.
fn local_points(net: &Net, pts: &Array2<f64>) -> Array2<f64> {
    Array2::from_shape_fn((pts.nrows(), net.inputs.len()), |(r, c)| pts[[r, net.inputs[c]]])
}

/// Value and own-axis derivative of a coefficient as tape nodes. Nodes are
/// `(n, 1)` or `(1, 1)`; a `None` derivative is identically zero.
struct TapeCoef {
    value: NodeId,
    axis_deriv: Option<NodeId>,
}

fn fixed_columns(tape: &mut Tape, ff: &crate::networks::FixedField, axis: usize, pts: &Array2<f64>) -> (NodeId, Option<NodeId>) {
    let n = pts.nrows();
    let mut val = Array2::zeros((n, 1));
    let mut der = Array2::zeros((n, 1));
    for (r, row) in pts.rows().into_iter().enumerate() {
        let p = row.to_vec();
        let (v, g) = ff.eval(&p);
        val[[r, 0]] = v;
        der[[r, 0]] = g[axis];
    }
    let any = der.iter().any(|&d| d != 0.0);
    let value = tape.constant(val);
    (value, if any { Some(tape.constant(der)) } else { None })
}

struct NetJets {
    jets: Vec<TapeJet>,
}

fn coef_net_jets(tape: &mut Tape, net: &Net, binding: &ParamBinding, pts: &Array2<f64>, sd: usize) -> Result<NetJets> {
    let x = tape.constant(local_points(net, pts));
    let dirs: Vec<usize> = (0..net.inputs.len()).filter(|&k| net.inputs[k] < sd).collect();
    Ok(NetJets {
        jets: mlp_jet_tape(tape, &net.spec, binding, x, &dirs, &[])?,
    })
}

fn tape_coef(
    tape: &mut Tape,
    src: &CoefSource,
    gamma: Option<&ParamBinding>,
    net: Option<(&Net, &NetJets)>,
    axis: usize,
    pts: &Array2<f64>,
) -> Result<TapeCoef> {
    match src {
        CoefSource::Gamma { index, positive } => {
            let g = gamma.ok_or_else(|| config("coefficient refers to a missing scalar"))?;
            let raw = tape.column(g.nodes[0], *index)?;
            let value = if *positive { tape.softplus(raw) } else { raw };
            Ok(TapeCoef {
                value,
                axis_deriv: None,
            })
        }
        CoefSource::Net { output } => {
            let (net, jets) = net.ok_or_else(|| config("coefficient refers to a missing network"))?;
            let jet = jets
                .jets
                .get(*output)
                .ok_or_else(|| config("coefficient network output out of range"))?;
            Ok(TapeCoef {
                value: jet.value,
                axis_deriv: net.local_index(axis).and_then(|k| jet.grad[k]),
            })
        }
        CoefSource::Fixed(ff) => {
            let (value, axis_deriv) = fixed_columns(tape, ff, axis, pts);
            Ok(TapeCoef { value, axis_deriv })
        }
    }
}

fn needs_net(list: &[CoefSource]) -> bool {
    list.iter().any(|c| matches!(c, CoefSource::Net { .. }))
}

/// `u` jets on a batch with global-coordinate indexing: `grad[g]`, `hess[g]`.
fn u_tape_jet(
    tape: &mut Tape,
    bundle: &NetworkBundle,
    bind: &BundleBinding,
    pts: &Array2<f64>,
    want_t: bool,
    want_hess: bool,
) -> Result<TapeJet> {
    let net = &bundle.u_net;
    let sd = bundle.spatial_dims;
    let x = tape.constant(local_points(net, pts));
    let grad_dirs: Vec<usize> = (0..net.inputs.len())
        .filter(|&k| net.inputs[k] < sd || want_t)
        .collect();
    let hess_dirs: Vec<usize> = if want_hess {
        (0..net.inputs.len()).filter(|&k| net.inputs[k] < sd).collect()
    } else {
        Vec::new()
    };
    let local = mlp_jet_tape(tape, &net.spec, &bind.u, x, &grad_dirs, &hess_dirs)?
        .into_iter()
        .next()
        .ok_or_else(|| structural("u network has no output"))?;
    let n = bundle.n_coords();
    let mut grad = vec![None; n];
    let mut hess = vec![None; n];
    for g in 0..n {
        if let Some(k) = net.local_index(g) {
            grad[g] = local.grad[k];
            hess[g] = local.hess[k];
        }
    }
    Ok(TapeJet {
        value: local.value,
        grad,
        hess,
    })
}

fn check_batch(bundle: &NetworkBundle, pts: &Array2<f64>) -> Result<()> {
    if pts.ncols() != bundle.n_coords() {
        return Err(structural(format!(
            "points have {} columns, problem has {}",
            pts.ncols(),
            bundle.n_coords()
        )));
    }
    if pts.nrows() == 0 {
        return Err(config("empty collocation batch"));
    }
    Ok(())
}

fn acc(tape: &mut Tape, total: Option<NodeId>, term: NodeId) -> Result<Option<NodeId>> {
    Ok(Some(match total {
        Some(t) => tape.add(t, term)?,
        None => term,
    }))
}

/// Source values on a batch as an `(n, 1)` node.
pub fn source_tape(tape: &mut Tape, bundle: &NetworkBundle, bind: &BundleBinding, pts: &Array2<f64>) -> Result<NodeId> {
    match &bundle.source {
        SourceModel::Net(net) => {
            let fb = bind.f.as_ref().ok_or_else(|| structural("source network is not bound"))?;
            let x = tape.constant(local_points(net, pts));
            let out = mlp_forward_tape(tape, &net.spec, fb, x)?;
            tape.column(out, 0)
        }
        SourceModel::Fixed(ff) => {
            let col = Array2::from_shape_fn((pts.nrows(), 1), |(r, _)| ff.eval(&pts.row(r).to_vec()).0);
            Ok(tape.constant(col))
        }
    }
}

/// PDE residuals at the rows of `pts`, as an `(n, 1)` node.
pub fn residual_tape(tape: &mut Tape, bundle: &NetworkBundle, bind: &BundleBinding, pts: &Array2<f64>) -> Result<NodeId> {
    check_batch(bundle, pts)?;
    let sd = bundle.spatial_dims;
    let u = u_tape_jet(tape, bundle, bind, pts, true, true)?;

    let v_jets = match (&bundle.v_net, &bind.v, needs_net(&bundle.velocity)) {
        (Some(net), Some(b), true) => Some(coef_net_jets(tape, net, b, pts, sd)?),
        _ => None,
    };
    let d_jets = match (&bundle.d_net, &bind.d, needs_net(&bundle.diffusion)) {
        (Some(net), Some(b), true) => Some(coef_net_jets(tape, net, b, pts, sd)?),
        _ => None,
    };

    let mut total = u.grad[sd];
    for i in 0..sd {
        let v_net = bundle.v_net.as_ref().zip(v_jets.as_ref());
        let d_net = bundle.d_net.as_ref().zip(d_jets.as_ref());
        let v = tape_coef(tape, &bundle.velocity[i], bind.gamma.as_ref(), v_net, i, pts)?;
        let d = tape_coef(tape, &bundle.diffusion[i], bind.gamma.as_ref(), d_net, i, pts)?;
        if let Some(dv) = v.axis_deriv {
            let t = tape.mul(dv, u.value)?;
            total = acc(tape, total, t)?;
        }
        if let Some(ui) = u.grad[i] {
            let t = tape.mul(v.value, ui)?;
            total = acc(tape, total, t)?;
            if let Some(dd) = d.axis_deriv {
                let t = tape.mul(dd, ui)?;
                let t = tape.scale(t, -1.0);
                total = acc(tape, total, t)?;
            }
        }
        if let Some(uii) = u.hess[i] {
            let t = tape.mul(d.value, uii)?;
            let t = tape.scale(t, -1.0);
            total = acc(tape, total, t)?;
        }
    }
    let f = source_tape(tape, bundle, bind, pts)?;
    match total {
        Some(t) => tape.sub(t, f),
        None => Ok(tape.scale(f, -1.0)),
    }
}

/// Batched boundary residuals for one condition type. `normals` has one row
/// per point and is ignored for Dirichlet rows.
pub fn boundary_tape(
    tape: &mut Tape,
    bundle: &NetworkBundle,
    bind: &BundleBinding,
    pts: &Array2<f64>,
    normals: &Array2<f64>,
    bc: BoundaryCondition,
) -> Result<NodeId> {
    check_batch(bundle, pts)?;
    let sd = bundle.spatial_dims;
    if bc == BoundaryCondition::Dirichlet {
        return u_value_tape(tape, bundle, bind, pts);
    }
    if normals.nrows() != pts.nrows() || normals.ncols() != sd {
        return Err(structural("normals must have one row of spatial length per point"));
    }
    let u = u_tape_jet(tape, bundle, bind, pts, false, false)?;
    let d_jets = match (&bundle.d_net, &bind.d, bc == BoundaryCondition::DiffusiveFlux && needs_net(&bundle.diffusion)) {
        (Some(net), Some(b), true) => Some(coef_net_jets(tape, net, b, pts, sd)?),
        _ => None,
    };
    let mut total = None;
    for i in 0..sd {
        let col = normals.column(i);
        if col.iter().all(|&c| c == 0.0) {
            continue;
        }
        let Some(ui) = u.grad[i] else { continue };
        let n_i = tape.constant(col.to_owned().insert_axis(ndarray::Axis(1)));
        let mut term = tape.mul(n_i, ui)?;
        if bc == BoundaryCondition::DiffusiveFlux {
            let d_net = bundle.d_net.as_ref().zip(d_jets.as_ref());
            let d = tape_coef(tape, &bundle.diffusion[i], bind.gamma.as_ref(), d_net, i, pts)?;
            term = tape.mul(d.value, term)?;
        }
        total = acc(tape, total, term)?;
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(tape.constant(Array2::zeros((pts.nrows(), 1)))),
    }
}

/// `u` at the rows of `pts`, as an `(n, 1)` node.
pub fn u_value_tape(tape: &mut Tape, bundle: &NetworkBundle, bind: &BundleBinding, pts: &Array2<f64>) -> Result<NodeId> {
    check_batch(bundle, pts)?;
    let x = tape.constant(local_points(&bundle.u_net, pts));
    let out = mlp_forward_tape(tape, &bundle.u_net.spec, &bind.u, x)?;
    tape.column(out, 0)
}

/// Velocity component `axis` at the rows of `pts`, as an `(n, 1)` or `(1, 1)` node.
pub fn velocity_tape(
    tape: &mut Tape,
    bundle: &NetworkBundle,
    bind: &BundleBinding,
    pts: &Array2<f64>,
    axis: usize,
) -> Result<NodeId> {
    let src = bundle
        .velocity
        .get(axis)
        .ok_or_else(|| structural("velocity axis out of range"))?;
    match src {
        CoefSource::Net { output } => {
            let net = bundle.v_net.as_ref().ok_or_else(|| config("missing velocity network"))?;
            let b = bind.v.as_ref().ok_or_else(|| structural("velocity network is not bound"))?;
            let x = tape.constant(local_points(net, pts));
            let out = mlp_forward_tape(tape, &net.spec, b, x)?;
            tape.column(out, *output)
        }
        other => Ok(tape_coef(tape, other, bind.gamma.as_ref(), None, axis, pts)?.value),
    }
}
