//! Phase driver: optional data-only pretraining, Adam with kernel-trace
//! weights, then L-BFGS with frozen weights.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{loss_and_grad, Adam, Lbfgs, LossReport, Objective};
use crate::error::{config, structural, Error, Result};
use crate::networks::{read_blob, write_blob, BlobEntry, NetworkBundle, Trainable};
use crate::diffcore::Segment;
use crate::ntk::{
    adaptive_weights, jacobian, row_count, spectrum, subsample, trace_rows, LossKind, SpectrumRecord, Traces, Weights,
};
use crate::pdemodel::{Batches, BoundaryBatch, BoundaryGroup};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Data-only Adam steps before the main phase.
    pub pretrain_steps: usize,
    pub adam_steps: usize,
    pub lbfgs_steps: usize,
    pub adam_lr: f64,
    /// Initial trial step of the L-BFGS line search.
    pub lbfgs_lr: f64,
    pub lbfgs_memory: usize,
    /// Refresh loss weights from kernel traces; fixed at 1 otherwise.
    pub adaptive_weights: bool,
    pub ntk_update_every: usize,
    /// Residual rows used for the residual trace estimate.
    pub ntk_residual_rows: usize,
    /// Rows per block in exported spectra.
    pub spectrum_rows: usize,
    /// Interior collocation points.
    pub n_residual: usize,
    /// Boundary and initial collocation points, split evenly between faces and t=0.
    pub n_boundary: usize,
    pub seed: u64,
    pub log_every: usize,
    /// Checkpoint cadence in steps; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_steps: 0,
            adam_steps: 5000,
            lbfgs_steps: 5000,
            adam_lr: 1e-3,
            lbfgs_lr: 1.0,
            lbfgs_memory: 20,
            adaptive_weights: true,
            ntk_update_every: 100,
            ntk_residual_rows: 200,
            spectrum_rows: 200,
            n_residual: 1024,
            n_boundary: 256,
            seed: 0,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.adam_lr > 0.0 && self.lbfgs_lr > 0.0) {
            return Err(config("learning rates must be positive"));
        }
        if !(3..=50).contains(&self.lbfgs_memory) {
            return Err(config(format!("L-BFGS memory must be in [3, 50], got {}", self.lbfgs_memory)));
        }
        if self.ntk_update_every == 0 || self.ntk_residual_rows == 0 || self.spectrum_rows == 0 || self.log_every == 0 {
            return Err(config("cadences and row caps must be positive"));
        }
        if self.n_residual == 0 || self.n_boundary == 0 {
            return Err(config("collocation counts must be positive"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.pretrain_steps + self.adam_steps + self.lbfgs_steps
    }
}

/// Which blocks spectra snapshots contain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectraMode {
    /// `rr, bb, zz[, vv]`.
    Inverse,
    /// `i, ux, uy[, uz], zz, rr`: boundary kernel split by initial condition and face axis.
    Forward,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub reports: Vec<LossReport>,
    /// `(first step using the weights, weights)`.
    pub weights: Vec<(usize, Weights)>,
    /// `(step evaluated at, traces)`.
    pub traces: Vec<(usize, Traces)>,
    pub spectra: Vec<SpectrumRecord>,
    pub lbfgs_stalled_at: Option<usize>,
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed steps across all phases.
    pub step: usize,
    pub weights: Weights,
    pub adam: Adam,
    pub lbfgs: Lbfgs,
}

fn sub_seed(seed: u64, step: usize) -> u64 {
    seed ^ (step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Block traces with the residual estimated from `cap` sampled rows and rescaled to all rows.
pub fn kernel_traces(bundle: &NetworkBundle, batches: &Batches, cap: usize, seed: u64) -> Result<Traces> {
    let nr = batches.residual.nrows();
    let rows = subsample(nr, cap, seed);
    let r = trace_rows(bundle, batches, LossKind::Residual, &rows)? * nr as f64 / rows.len().max(1) as f64;
    let all = |k| -> Result<f64> {
        let rows: Vec<usize> = (0..row_count(batches, k)).collect();
        trace_rows(bundle, batches, k, &rows)
    };
    Ok(Traces {
        r,
        b: all(LossKind::Boundary)?,
        z: all(LossKind::Data)?,
        v: match &batches.velocity {
            Some(v) if !v.is_empty() => Some(all(LossKind::Velocity)?),
            _ => None,
        },
    })
}

fn boundary_subset(b: &BoundaryBatch, axis: Option<usize>) -> BoundaryBatch {
    let cols = b.initial.ncols();
    match axis {
        None => BoundaryBatch {
            groups: Vec::new(),
            initial: b.initial.clone(),
        },
        Some(a) => BoundaryBatch {
            groups: b
                .groups
                .iter()
                .map(|g| {
                    let keep: Vec<usize> = (0..g.points.nrows()).filter(|&i| g.normals[[i, a]] != 0.0).collect();
                    BoundaryGroup {
                        condition: g.condition,
                        points: g.points.select(ndarray::Axis(0), &keep),
                        normals: g.normals.select(ndarray::Axis(0), &keep),
                    }
                })
                .collect(),
            initial: Array2::zeros((0, cols)),
        },
    }
}

fn block_spectrum(
    bundle: &NetworkBundle,
    batches: &Batches,
    kind: LossKind,
    label: &str,
    step: usize,
    cap: usize,
    seed: u64,
) -> Result<Vec<SpectrumRecord>> {
    let rows = subsample(row_count(batches, kind), cap, seed);
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let j = jacobian(bundle, batches, kind, Some(&rows))?;
    let ev = spectrum(&j.dot(&j.t()))?;
    Ok(ev
        .into_iter()
        .enumerate()
        .map(|(index, eigenvalue)| SpectrumRecord {
            block: label.to_string(),
            index,
            eigenvalue,
            step,
        })
        .collect())
}

/// Eigenvalues of every kernel block at the current parameters.
pub fn spectra_snapshot(
    bundle: &NetworkBundle,
    batches: &Batches,
    mode: SpectraMode,
    step: usize,
    cap: usize,
    seed: u64,
) -> Result<Vec<SpectrumRecord>> {
    let mut out = Vec::new();
    let seed = sub_seed(seed, step);
    match mode {
        SpectraMode::Inverse => {
            for kind in LossKind::ALL {
                if row_count(batches, kind) > 0 {
                    out.extend(block_spectrum(bundle, batches, kind, kind.label(), step, cap, seed)?);
                }
            }
        }
        SpectraMode::Forward => {
            let axes = ["ux", "uy", "uz"];
            let mut parts: Vec<(String, Option<usize>)> = vec![("i".into(), None)];
            parts.extend((0..bundle.spatial_dims).map(|a| (axes[a].to_string(), Some(a))));
            for (label, axis) in parts {
                let sub = Batches {
                    boundary: boundary_subset(&batches.boundary, axis),
                    ..batches.clone()
                };
                out.extend(block_spectrum(bundle, &sub, LossKind::Boundary, &label, step, cap, seed)?);
            }
            out.extend(block_spectrum(bundle, batches, LossKind::Data, "zz", step, cap, seed)?);
            out.extend(block_spectrum(bundle, batches, LossKind::Residual, "rr", step, cap, seed)?);
        }
    }
    Ok(out)
}

/// Stateful three-phase optimizer over one bundle and fixed batches.
pub struct Trainer<'a> {
    pub bundle: NetworkBundle,
    batches: &'a Batches,
    pub cfg: TrainConfig,
    pub mode: SpectraMode,
    pub state: TrainState,
    pub history: TrainHistory,
    pub checkpoint_dir: Option<PathBuf>,
    on_report: Option<Box<dyn FnMut(&LossReport) + 'a>>,
    lbfgs_current: Option<(f64, Vec<f64>)>,
    snapshots: BTreeSet<usize>,
}

impl<'a> Trainer<'a> {
    pub fn new(bundle: NetworkBundle, batches: &'a Batches, cfg: TrainConfig, mode: SpectraMode) -> Result<Self> {
        cfg.validate()?;
        bundle.validate()?;
        let n = bundle.n_trainable();
        if n == 0 {
            return Err(config("bundle has no trainable parameters"));
        }
        let has_v = batches.velocity.as_ref().is_some_and(|v| !v.is_empty());
        let weights = Weights::ones(has_v);
        Ok(Self {
            state: TrainState {
                step: 0,
                weights,
                adam: Adam::new(n),
                lbfgs: Lbfgs::new(cfg.lbfgs_memory),
            },
            history: TrainHistory {
                weights: vec![(cfg.pretrain_steps, weights)],
                ..TrainHistory::default()
            },
            bundle,
            batches,
            cfg,
            mode,
            checkpoint_dir: None,
            on_report: None,
            lbfgs_current: None,
            snapshots: BTreeSet::new(),
        })
    }

    /// Called with every logged report.
    pub fn on_report(&mut self, f: impl FnMut(&LossReport) + 'a) {
        self.on_report = Some(Box::new(f));
    }

    fn log(&mut self, mut report: LossReport, step: usize, force: bool) {
        report.step = step;
        if force || step % self.cfg.log_every == 0 {
            if let Some(cb) = self.on_report.as_mut() {
                cb(&report);
            }
            self.history.reports.push(report);
        }
    }

    fn snapshot(&mut self, step: usize) -> Result<()> {
        if self.snapshots.insert(step) {
            let recs = spectra_snapshot(&self.bundle, self.batches, self.mode, step, self.cfg.spectrum_rows, self.cfg.seed)?;
            self.history.spectra.extend(recs);
        }
        Ok(())
    }

    fn adam_step(&mut self, objective: Objective) -> Result<()> {
        let s = self.state.step;
        let (report, g) = loss_and_grad(&self.bundle, self.batches, &self.state.weights, objective)?;
        let mut p = self.bundle.flat();
        self.state.adam.step(&mut p, &g, self.cfg.adam_lr)?;
        self.bundle.set_flat(&p)?;
        self.log(report, s, false);
        Ok(())
    }

    fn phase1_step(&mut self) -> Result<()> {
        let s = self.state.step;
        let local = s - self.cfg.pretrain_steps;
        let traces = if self.cfg.adaptive_weights && local % self.cfg.ntk_update_every == 0 {
            Some(kernel_traces(
                &self.bundle,
                self.batches,
                self.cfg.ntk_residual_rows,
                sub_seed(self.cfg.seed, s),
            )?)
        } else {
            None
        };
        self.adam_step(Objective::Full)?;
        if let Some(t) = traces {
            let w = adaptive_weights(&t, &self.state.weights)?;
            self.history.traces.push((s, t));
            self.history.weights.push((s + 1, w));
            self.state.weights = w;
        }
        Ok(())
    }

    /// Returns `false` when the line search stalled.
    fn lbfgs_step(&mut self) -> Result<bool> {
        let s = self.state.step;
        let weights = self.state.weights;
        let batches = self.batches;
        let (loss, grad) = match self.lbfgs_current.take() {
            Some(c) => c,
            None => {
                let (r, g) = loss_and_grad(&self.bundle, batches, &weights, Objective::Full)?;
                (r.total, g)
            }
        };
        let mut params = self.bundle.flat();
        let bundle = &mut self.bundle;
        let mut last_report = None;
        let mut eval = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
            bundle.set_flat(p)?;
            let (r, g) = loss_and_grad(bundle, batches, &weights, Objective::Full)?;
            let total = r.total;
            last_report = Some(r);
            Ok((total, g))
        };
        let out = self.state.lbfgs.step(&mut params, loss, &grad, self.cfg.lbfgs_lr, &mut eval)?;
        self.bundle.set_flat(&params)?;
        if out.stalled {
            self.lbfgs_current = Some((loss, grad));
            return Ok(false);
        }
        self.lbfgs_current = Some((out.loss, out.grad));
        if let Some(r) = last_report {
            self.log(r, s, false);
        }
        Ok(true)
    }

    /// Runs every remaining step of every phase.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.total_steps())
    }

    /// Runs until `state.step == target` (or the L-BFGS phase stalls).
    pub fn run_until(&mut self, target: usize) -> Result<()> {
        let target = target.min(self.cfg.total_steps());
        while self.state.step < target {
            if let Err(e) = self.step_once() {
                if matches!(e, Error::Numeric(_)) {
                    if let Some(dir) = self.checkpoint_dir.clone() {
                        self.save_checkpoint(&dir.join("last_finite"))?;
                    }
                }
                return Err(e);
            }
            if self.history.lbfgs_stalled_at.is_some() {
                break;
            }
            if self.cfg.checkpoint_every > 0 && self.state.step % self.cfg.checkpoint_every == 0 {
                if let Some(dir) = self.checkpoint_dir.clone() {
                    self.save_checkpoint(&dir.join(format!("step{:06}", self.state.step)))?;
                }
            }
        }
        let done = self.state.step >= self.cfg.total_steps() || self.history.lbfgs_stalled_at.is_some();
        if done && self.cfg.total_steps() > 0 {
            self.snapshot(self.state.step)?;
            let r = super::loss_value(&self.bundle, self.batches, &self.state.weights, Objective::Full)?;
            if self.history.reports.last().map(|l| l.step) != Some(self.state.step) {
                self.log(r, self.state.step, true);
            }
        }
        Ok(())
    }

    fn step_once(&mut self) -> Result<()> {
        let s = self.state.step;
        let (p, a) = (self.cfg.pretrain_steps, self.cfg.adam_steps);
        if s < p {
            self.adam_step(Objective::Pretrain)?;
        } else if s < p + a {
            if s == p {
                if p > 0 {
                    self.state.adam = Adam::new(self.bundle.n_trainable());
                }
                self.snapshot(s)?;
            }
            self.phase1_step()?;
        } else {
            if s == p + a {
                self.snapshot(s)?;
            }
            if !self.lbfgs_step()? {
                self.history.lbfgs_stalled_at = Some(s);
                return Ok(());
            }
        }
        self.state.step += 1;
        Ok(())
    }

    /// Parameters plus an optimizer sidecar: `params.bin`, `optimizer.bin`, `state.json`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.bundle.save_params(&dir.join("params.bin"))?;
        let st = &self.state;
        let mut vectors: Vec<(String, &[f64])> = vec![("adam_m".into(), &st.adam.m), ("adam_v".into(), &st.adam.v)];
        for (i, (s, y)) in st.lbfgs.s.iter().zip(&st.lbfgs.y).enumerate() {
            vectors.push((format!("lbfgs_s{i}"), s));
            vectors.push((format!("lbfgs_y{i}"), y));
        }
        if let Some((_, g)) = &self.lbfgs_current {
            vectors.push(("lbfgs_grad".into(), g));
        }
        let entries: Vec<(BlobEntry, &[f64])> = vectors
            .iter()
            .map(|(name, v)| {
                (
                    BlobEntry {
                        name: name.clone(),
                        spec: None,
                        inputs: None,
                        names: None,
                        layout: vec![Segment::new(name.clone(), 1, v.len())],
                    },
                    *v,
                )
            })
            .collect();
        write_blob(&dir.join("optimizer.bin"), &entries)?;
        let sidecar = Sidecar {
            step: st.step,
            adam_t: st.adam.t,
            lbfgs_memory: st.lbfgs.memory,
            lbfgs_pairs: st.lbfgs.s.len(),
            lbfgs_loss_bits: self.lbfgs_current.as_ref().map(|(l, _)| l.to_bits()),
            weights_bits: st.weights.entries().iter().map(|(_, w)| w.to_bits()).collect(),
            has_velocity_weight: st.weights.v.is_some(),
            trainable: self.bundle.trainable,
            config: self.cfg.clone(),
        };
        let path = dir.join("state.json");
        std::fs::write(&path, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&path, e))
    }

    /// Restores parameters and optimizer state written by [`Self::save_checkpoint`].
    pub fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let path = dir.join("state.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let sc: Sidecar = serde_json::from_str(&text)?;
        if sc.trainable != self.bundle.trainable {
            return Err(structural("checkpoint trains different parameter blocks"));
        }
        self.bundle.load_params(&dir.join("params.bin"))?;
        let blob = read_blob(&dir.join("optimizer.bin"))?;
        let get = |name: &str| -> Result<Vec<f64>> {
            blob.iter()
                .find(|(e, _)| e.name == name)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| structural(format!("checkpoint lacks {name}")))
        };
        let n = self.bundle.n_trainable();
        let adam = Adam {
            m: get("adam_m")?,
            v: get("adam_v")?,
            t: sc.adam_t,
        };
        if adam.m.len() != n {
            return Err(structural("optimizer state does not match the bundle"));
        }
        let mut lbfgs = Lbfgs::new(sc.lbfgs_memory);
        for i in 0..sc.lbfgs_pairs {
            lbfgs.s.push_back(get(&format!("lbfgs_s{i}"))?);
            lbfgs.y.push_back(get(&format!("lbfgs_y{i}"))?);
        }
        let w: Vec<f64> = sc.weights_bits.iter().map(|&b| f64::from_bits(b)).collect();
        if w.len() != 3 + usize::from(sc.has_velocity_weight) {
            return Err(structural("checkpoint weights are malformed"));
        }
        self.state = TrainState {
            step: sc.step,
            weights: Weights {
                r: w[0],
                b: w[1],
                z: w[2],
                v: w.get(3).copied(),
            },
            adam,
            lbfgs,
        };
        self.lbfgs_current = match sc.lbfgs_loss_bits {
            Some(bits) => Some((f64::from_bits(bits), get("lbfgs_grad")?)),
            None => None,
        };
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    step: usize,
    adam_t: u64,
    lbfgs_memory: usize,
    lbfgs_pairs: usize,
    lbfgs_loss_bits: Option<u64>,
    /// Loss weights as IEEE bit patterns so they reload exactly.
    weights_bits: Vec<u64>,
    has_velocity_weight: bool,
    trainable: Trainable,
    config: TrainConfig,
}

/// Trains every block of `bundle` through all configured phases.
pub fn run_algorithm1(bundle: NetworkBundle, batches: &Batches, cfg: &TrainConfig) -> Result<(NetworkBundle, TrainHistory)> {
    let mut t = Trainer::new(bundle, batches, cfg.clone(), SpectraMode::Inverse)?;
    t.run()?;
    Ok((t.bundle, t.history))
}

/// Trains only the solution network against fixed true coefficients and source.
pub fn forward_mode_run(bundle: NetworkBundle, batches: &Batches, cfg: &TrainConfig) -> Result<(NetworkBundle, TrainHistory)> {
    let mut bundle = bundle;
    bundle.trainable = Trainable {
        u: true,
        f: false,
        v: false,
        d: false,
        gamma: false,
    };
    let mut t = Trainer::new(bundle, batches, cfg.clone(), SpectraMode::Forward)?;
    t.run()?;
    Ok((t.bundle, t.history))
}

/// `step,L_r,L_b,L_z,L_v,lambda_r,lambda_b,lambda_z,lambda_v,total`; absent velocity terms are empty.
pub fn write_loss_history(path: &Path, reports: &[LossReport]) -> Result<()> {
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let mut text = String::from("step,L_r,L_b,L_z,L_v,lambda_r,lambda_b,lambda_z,lambda_v,total\n");
    for r in reports {
        let (c, w) = (&r.components, &r.weights);
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.step,
            c.r,
            c.b,
            c.z,
            opt(c.v),
            w.r,
            w.b,
            w.z,
            opt(w.v),
            r.total
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
