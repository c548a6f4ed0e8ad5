//! Input-derivative jets of a tanh MLP.
//!
//! A jet carries the value, the gradient and the diagonal of the Hessian of a
//! network output with respect to its inputs. Layers are propagated
//! analytically: through `tanh`, `a' = s·z'` and `a'' = s·z'' - 2·a·s·z'^2`
//! with `s = 1 - a^2`.

use ndarray::Array2;

use crate::error::{structural, Result};
use crate::networks::{affine_unit, MlpSpec, OutputTransform};

use super::params::ParamVector;
use super::tape::{sigmoid, softplus, NodeId, ParamBinding, Tape};

#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub diag_hess: Vec<f64>,
}

impl Jet {
    pub fn constant(value: f64, dim: usize) -> Self {
        Self {
            value,
            grad: vec![0.0; dim],
            diag_hess: vec![0.0; dim],
        }
    }

    fn apply_transform(self, t: OutputTransform) -> Self {
        match t {
            OutputTransform::None => self,
            OutputTransform::Softplus => {
                let s = sigmoid(self.value);
                let ds = s * (1.0 - s);
                Jet {
                    value: softplus(self.value),
                    diag_hess: self
                        .diag_hess
                        .iter()
                        .zip(&self.grad)
                        .map(|(&h, &g)| s * h + ds * g * g)
                        .collect(),
                    grad: self.grad.iter().map(|g| s * g).collect(),
                }
            }
            OutputTransform::Square => Jet {
                value: self.value * self.value,
                diag_hess: self
                    .diag_hess
                    .iter()
                    .zip(&self.grad)
                    .map(|(&h, &g)| 2.0 * g * g + 2.0 * self.value * h)
                    .collect(),
                grad: self.grad.iter().map(|g| 2.0 * self.value * g).collect(),
            },
        }
    }
}

/// Jets of every network output at a single input point.
///
/// The value channel uses the same arithmetic order as [`crate::networks::mlp_eval`],
/// so `jet.value` agrees with it bit for bit.
pub fn jet_forward(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<Jet>> {
    let d = spec.input_dim();
    if x.len() != d {
        return Err(structural(format!(
            "input has {} coordinates, network expects {d}",
            x.len()
        )));
    }
    spec.check_params(params)?;
    let mats = params.unpack();
    let n_layers = spec.widths.len() - 1;

    let mut a = x.to_vec();
    // grads[j][k] = d a_j / d x_k
    let mut grads: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..d).map(|k| if j == k { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut hess: Vec<Vec<f64>> = vec![vec![0.0; d]; d];

    for l in 0..n_layers {
        let w = &mats[2 * l];
        let b = &mats[2 * l + 1];
        let out = w.ncols();
        let mut z = Vec::with_capacity(out);
        let mut dz = vec![vec![0.0; d]; out];
        let mut ddz = vec![vec![0.0; d]; out];
        for j in 0..out {
            z.push(affine_unit(&a, w, b, j));
            for k in 0..d {
                let mut g = 0.0;
                let mut h = 0.0;
                for i in 0..a.len() {
                    g += grads[i][k] * w[[i, j]];
                    h += hess[i][k] * w[[i, j]];
                }
                dz[j][k] = g;
                ddz[j][k] = h;
            }
        }
        if l + 1 < n_layers {
            a = z.iter().map(|v| v.tanh()).collect();
            for j in 0..out {
                let s = 1.0 - a[j] * a[j];
                for k in 0..d {
                    ddz[j][k] = s * ddz[j][k] - 2.0 * a[j] * s * dz[j][k] * dz[j][k];
                    dz[j][k] *= s;
                }
            }
        } else {
            a = z;
        }
        grads = dz;
        hess = ddz;
    }

    Ok(a.into_iter()
        .zip(grads)
        .zip(hess)
        .map(|((value, grad), diag_hess)| {
            Jet {
                value,
                grad,
                diag_hess,
            }
            .apply_transform(spec.output_transform)
        })
        .collect())
}

/// Jet of one network output on a tape, batched over rows of the input.
///
/// `grad[k]` / `hess[k]` are `None` when derivative `k` was not requested or is
/// identically zero.
#[derive(Clone, Debug)]
pub struct TapeJet {
    pub value: NodeId,
    pub grad: Vec<Option<NodeId>>,
    pub hess: Vec<Option<NodeId>>,
}

fn add_opt(tape: &mut Tape, a: Option<NodeId>, b: Option<NodeId>) -> Result<Option<NodeId>> {
    Ok(match (a, b) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (x, None) | (None, x) => x,
    })
}

/// Batched network jets on a tape.
///
/// `x` is an `(n, d)` node of input points. First derivatives are formed for
/// every input listed in `grad_dirs`, diagonal second derivatives for every
/// input in `hess_dirs` (which must be a subset of `grad_dirs`).
pub fn mlp_jet_tape(
    tape: &mut Tape,
    spec: &MlpSpec,
    binding: &ParamBinding,
    x: NodeId,
    grad_dirs: &[usize],
    hess_dirs: &[usize],
) -> Result<Vec<TapeJet>> {
    let d = spec.input_dim();
    if tape.value(x).ncols() != d {
        return Err(structural(format!(
            "input has {} columns, network expects {d}",
            tape.value(x).ncols()
        )));
    }
    if let Some(k) = hess_dirs.iter().find(|k| !grad_dirs.contains(k)) {
        return Err(structural(format!("hessian direction {k} has no gradient channel")));
    }
    if grad_dirs.iter().any(|&k| k >= d) {
        return Err(structural("derivative direction out of range"));
    }
    let n_layers = spec.widths.len() - 1;
    if binding.nodes.len() != 2 * n_layers {
        return Err(structural("parameter binding does not match network layout"));
    }

    let mut a = x;
    // Seeds: d x / d x_k is the k-th unit row, broadcast over the batch.
    let mut da: Vec<NodeId> = grad_dirs
        .iter()
        .map(|&k| {
            let mut e = Array2::zeros((1, d));
            e[[0, k]] = 1.0;
            tape.constant(e)
        })
        .collect();
    let mut dda: Vec<Option<NodeId>> = vec![None; grad_dirs.len()];
    let wants_hess: Vec<bool> = grad_dirs.iter().map(|k| hess_dirs.contains(k)).collect();

    for l in 0..n_layers {
        let w = binding.nodes[2 * l];
        let b = binding.nodes[2 * l + 1];
        let za = tape.matmul(a, w)?;
        let z = tape.add(za, b)?;
        let mut dz = Vec::with_capacity(da.len());
        let mut ddz = Vec::with_capacity(da.len());
        for (c, &g) in da.iter().enumerate() {
            dz.push(tape.matmul(g, w)?);
            ddz.push(match (wants_hess[c], dda[c]) {
                (true, Some(h)) => Some(tape.matmul(h, w)?),
                _ => None,
            });
        }
        if l + 1 < n_layers {
            let act = tape.tanh(z);
            let sq = tape.square(act);
            let neg = tape.scale(sq, -1.0);
            let s = tape.add_scalar(neg, 1.0);
            let mut a_s = None;
            let mut next_da = Vec::with_capacity(dz.len());
            let mut next_dda = Vec::with_capacity(dz.len());
            for c in 0..dz.len() {
                next_da.push(tape.mul(s, dz[c])?);
                if wants_hess[c] {
                    let a_s = match a_s {
                        Some(n) => n,
                        None => {
                            let n = tape.mul(act, s)?;
                            a_s = Some(n);
                            n
                        }
                    };
                    let dz2 = tape.square(dz[c]);
                    let t = tape.mul(a_s, dz2)?;
                    let curv = tape.scale(t, -2.0);
                    let lin = match ddz[c] {
                        Some(h) => Some(tape.mul(s, h)?),
                        None => None,
                    };
                    next_dda.push(add_opt(tape, lin, Some(curv))?);
                } else {
                    next_dda.push(None);
                }
            }
            a = act;
            da = next_da;
            dda = next_dda;
        } else {
            a = z;
            da = dz;
            dda = ddz;
        }
    }

    let out_w = spec.output_dim();
    let mut jets = Vec::with_capacity(out_w);
    for o in 0..out_w {
        let value = tape.column(a, o)?;
        let mut grad = vec![None; d];
        let mut hess = vec![None; d];
        for (c, &k) in grad_dirs.iter().enumerate() {
            grad[k] = Some(tape.column(da[c], o)?);
            if let Some(h) = dda[c] {
                hess[k] = Some(tape.column(h, o)?);
            }
        }
        jets.push(transform_tape_jet(
            tape,
            TapeJet { value, grad, hess },
            spec.output_transform,
            &wants_hess_for(grad_dirs, hess_dirs, d),
        )?);
    }
    Ok(jets)
}

fn wants_hess_for(grad_dirs: &[usize], hess_dirs: &[usize], d: usize) -> Vec<bool> {
    (0..d)
        .map(|k| grad_dirs.contains(&k) && hess_dirs.contains(&k))
        .collect()
}

fn transform_tape_jet(tape: &mut Tape, jet: TapeJet, t: OutputTransform, wants_hess: &[bool]) -> Result<TapeJet> {
    let r = jet.value;
    match t {
        OutputTransform::None => Ok(jet),
        OutputTransform::Softplus => {
            let value = tape.softplus(r);
            let sig = tape.sigmoid(r);
            let mut grad = vec![None; jet.grad.len()];
            let mut hess = vec![None; jet.hess.len()];
            let mut dsig = None;
            for k in 0..jet.grad.len() {
                let Some(g) = jet.grad[k] else { continue };
                grad[k] = Some(tape.mul(sig, g)?);
                if wants_hess[k] {
                    let ds = match dsig {
                        Some(n) => n,
                        None => {
                            // sigma (1 - sigma)
                            let sq = tape.square(sig);
                            let n = tape.sub(sig, sq)?;
                            dsig = Some(n);
                            n
                        }
                    };
                    let g2 = tape.square(g);
                    let curv = tape.mul(ds, g2)?;
                    let lin = match jet.hess[k] {
                        Some(h) => Some(tape.mul(sig, h)?),
                        None => None,
                    };
                    hess[k] = add_opt(tape, lin, Some(curv))?;
                }
            }
            Ok(TapeJet { value, grad, hess })
        }
        OutputTransform::Square => {
            let value = tape.square(r);
            let two_r = tape.scale(r, 2.0);
            let mut grad = vec![None; jet.grad.len()];
            let mut hess = vec![None; jet.hess.len()];
            for k in 0..jet.grad.len() {
                let Some(g) = jet.grad[k] else { continue };
                grad[k] = Some(tape.mul(two_r, g)?);
                if wants_hess[k] {
                    let g2 = tape.square(g);
                    let curv = tape.scale(g2, 2.0);
                    let lin = match jet.hess[k] {
                        Some(h) => Some(tape.mul(two_r, h)?),
                        None => None,
                    };
                    hess[k] = add_opt(tape, lin, Some(curv))?;
                }
            }
            Ok(TapeJet { value, grad, hess })
        }
    }
}

/// Plain batched forward pass on a tape; returns the `(n, out)` output node.
pub fn mlp_forward_tape(tape: &mut Tape, spec: &MlpSpec, binding: &ParamBinding, x: NodeId) -> Result<NodeId> {
    let n_layers = spec.widths.len() - 1;
    if binding.nodes.len() != 2 * n_layers {
        return Err(structural("parameter binding does not match network layout"));
    }
    if tape.value(x).ncols() != spec.input_dim() {
        return Err(structural("input width does not match network"));
    }
    let mut a = x;
    for l in 0..n_layers {
        let za = tape.matmul(a, binding.nodes[2 * l])?;
        let z = tape.add(za, binding.nodes[2 * l + 1])?;
        a = if l + 1 < n_layers { tape.tanh(z) } else { z };
    }
    Ok(match spec.output_transform {
        OutputTransform::None => a,
        OutputTransform::Softplus => tape.softplus(a),
        OutputTransform::Square => tape.square(a),
    })
}
