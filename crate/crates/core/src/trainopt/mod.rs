//! Composite loss, optimizers and the three-phase training driver.

mod driver;
mod optim;

pub use driver::*;
pub use optim::*;

use serde::{Deserialize, Serialize};

use crate::diffcore::{flat_grad, NodeId, Tape};
use crate::error::{config, Error, Result};
use crate::networks::NetworkBundle;
use crate::ntk::{PerLoss, Weights};
use crate::pdemodel::{loss_nodes, Batches, BundleBinding};

/// Which loss terms enter the optimized objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// `sum lambda_alpha L_alpha` over every term.
    Full,
    /// Boundary, data and velocity misfits with unit weights; no PDE residual.
    Pretrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    /// Unweighted mean-squared components.
    pub components: PerLoss,
    pub weights: Weights,
    pub total: f64,
    /// `(block name, gradient 2-norm)` in flat order.
    pub grad_norms: Vec<(String, f64)>,
}

/// Builds the objective on `tape`; returns the scalar node, the component
/// nodes and the report (without gradient norms).
pub fn total_loss(
    tape: &mut Tape,
    bundle: &NetworkBundle,
    bind: &BundleBinding,
    batches: &Batches,
    weights: &Weights,
    objective: Objective,
) -> Result<(NodeId, Vec<NodeId>, LossReport)> {
    if weights.entries().iter().any(|(_, w)| !(*w > 0.0)) {
        return Err(config(format!("loss weights must be positive, got {weights}")));
    }
    let nodes = loss_nodes(tape, bundle, bind, batches)?;
    let r = mean_square(tape, &[nodes.r]);
    let b = mean_square(tape, &nodes.b);
    let z = mean_square(tape, &[nodes.z]);
    let v = (!nodes.v.is_empty()).then(|| mean_square(tape, &nodes.v));
    let components = PerLoss {
        r: tape.scalar(r),
        b: tape.scalar(b),
        z: tape.scalar(z),
        v: v.map(|n| tape.scalar(n)),
    };
    let parts: Vec<(NodeId, f64)> = match objective {
        Objective::Full => {
            let mut p = vec![(r, weights.r), (b, weights.b), (z, weights.z)];
            if let Some(v) = v {
                p.push((v, weights.v.unwrap_or(1.0)));
            }
            p
        }
        Objective::Pretrain => {
            let mut p = vec![(b, 1.0), (z, 1.0)];
            if let Some(v) = v {
                p.push((v, 1.0));
            }
            p
        }
    };
    let mut total = None;
    for &(node, w) in &parts {
        let term = tape.scale(node, w);
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let total = total.expect("at least one term");
    let mut comp_nodes = vec![r, b, z];
    comp_nodes.extend(v);
    let report = LossReport {
        step: 0,
        components,
        weights: *weights,
        total: tape.scalar(total),
        grad_norms: Vec::new(),
    };
    Ok((total, comp_nodes, report))
}

/// Sum of squares of every entry of `nodes` divided by their total count.
fn mean_square(tape: &mut Tape, nodes: &[NodeId]) -> NodeId {
    let count: usize = nodes.iter().map(|&n| tape.value(n).len()).sum();
    let mut acc = None;
    for &n in nodes {
        let sq = tape.square(n);
        let s = tape.sum(sq);
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s).expect("scalars"),
        });
    }
    match acc {
        Some(a) => tape.scale(a, 1.0 / count.max(1) as f64),
        None => tape.scalar_const(0.0),
    }
}

const TERM_NAMES: [&str; 4] = ["residual", "boundary", "data", "velocity"];

/// Loss value, report and gradient with respect to the trainable flat vector.
pub fn loss_and_grad(
    bundle: &NetworkBundle,
    batches: &Batches,
    weights: &Weights,
    objective: Objective,
) -> Result<(LossReport, Vec<f64>)> {
    let mut tape = Tape::new();
    let bind = BundleBinding::new(&mut tape, bundle);
    let (total, comps, mut report) = total_loss(&mut tape, bundle, &bind, batches, weights, objective)?;
    for (i, &c) in comps.iter().enumerate() {
        if !tape.scalar(c).is_finite() {
            return Err(Error::Numeric(format!("non-finite {} loss", TERM_NAMES[i])));
        }
    }
    let grads = tape.backward(total)?;
    let mut g = Vec::with_capacity(bundle.n_trainable());
    for b in bind.trainable(bundle) {
        flat_grad(&tape, &grads, b, &mut g);
    }
    if g.iter().any(|v| !v.is_finite()) {
        let culprit = comps
            .iter()
            .enumerate()
            .find(|(_, &c)| {
                tape.backward(c).is_ok_and(|gc| {
                    let mut part = Vec::new();
                    for b in bind.trainable(bundle) {
                        flat_grad(&tape, &gc, b, &mut part);
                    }
                    part.iter().any(|v| !v.is_finite())
                })
            })
            .map_or("total", |(i, _)| TERM_NAMES[i]);
        return Err(Error::Numeric(format!("non-finite gradient from the {culprit} loss")));
    }
    report.grad_norms = bundle
        .block_ranges()
        .into_iter()
        .map(|(b, s, n)| (b.name().to_string(), g[s..s + n].iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect();
    Ok((report, g))
}

/// Loss value only, on a tape without parameter gradients.
pub fn loss_value(bundle: &NetworkBundle, batches: &Batches, weights: &Weights, objective: Objective) -> Result<LossReport> {
    let mut tape = Tape::new();
    let bind = BundleBinding::new(&mut tape, bundle);
    Ok(total_loss(&mut tape, bundle, &bind, batches, weights, objective)?.2)
}

#[cfg(test)]
mod tests;
