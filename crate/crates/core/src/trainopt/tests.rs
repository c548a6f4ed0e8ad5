use std::collections::BTreeSet;

use approx::assert_relative_eq;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::networks::{gamma_init, CoefSource, FixedField, MlpSpec, Net, OutputTransform, SourceModel, Trainable};
use crate::ntk::PerLoss;
use crate::pdemodel::{face_normal, BoundaryBatch, BoundaryCondition, BoundaryGroup, DataBatch, VelocityBatch};
use crate::synthgen::{Observation, ObservationSet, Tau};

fn net(inputs: Vec<usize>, hidden: usize, outputs: usize, t: OutputTransform, seed: u64) -> Net {
    let spec = MlpSpec::uniform(inputs.len(), hidden, 1, outputs, t);
    Net::new(spec, inputs, seed).unwrap()
}

fn bundle(seed: u64) -> NetworkBundle {
    NetworkBundle {
        spatial_dims: 2,
        u_net: net(vec![0, 1, 2], 6, 1, OutputTransform::None, seed),
        source: SourceModel::Net(net(vec![0, 1], 4, 1, OutputTransform::Softplus, seed + 1)),
        v_net: None,
        d_net: None,
        gamma: Some(gamma_init(2)),
        velocity: vec![
            CoefSource::Gamma { index: 0, positive: false },
            CoefSource::Gamma { index: 1, positive: false },
        ],
        diffusion: vec![CoefSource::Gamma { index: 2, positive: true }; 2],
        trainable: Trainable::default(),
    }
}

fn batches(seed: u64, targets: f64, velocity: bool) -> Batches {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = Vec::new();
    let mut normals = Vec::new();
    for k in 0..8 {
        let (axis, side) = (k % 2, (k / 2) % 2);
        let mut p = vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        p[axis] = side as f64;
        pts.extend(p);
        normals.extend(face_normal(2, axis, side));
    }
    let obs = ObservationSet {
        dims: 2,
        entries: (0..5)
            .map(|_| Observation {
                tau: Tau::Pointwise { t: rng.gen_range(0.0..1.0) },
                x: vec![rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)],
                clean: targets,
                noisy: targets,
                sigma: 0.0,
                group: 0,
            })
            .collect(),
        seed: None,
    };
    Batches {
        residual: Array2::from_shape_fn((16, 3), |_| rng.gen_range(0.0..1.0)),
        boundary: BoundaryBatch {
            groups: vec![BoundaryGroup {
                condition: BoundaryCondition::Neumann,
                points: Array2::from_shape_vec((8, 3), pts).unwrap(),
                normals: Array2::from_shape_vec((8, 2), normals).unwrap(),
            }],
            initial: Array2::from_shape_fn((6, 3), |(_, c)| if c == 2 { 0.0 } else { rng.gen_range(0.0..1.0) }),
        },
        data: DataBatch::from_observations(&obs).unwrap(),
        velocity: velocity.then(|| VelocityBatch {
            points: Array2::from_shape_fn((4, 3), |_| rng.gen_range(0.0..1.0)),
            axes: vec![0, 1],
            targets: Array2::from_elem((4, 2), 0.5),
        }),
    }
}

fn small_cfg() -> TrainConfig {
    TrainConfig {
        adam_steps: 12,
        lbfgs_steps: 6,
        ntk_update_every: 4,
        ntk_residual_rows: 10,
        spectrum_rows: 10,
        log_every: 1,
        ..TrainConfig::default()
    }
}

#[test]
fn first_adam_step_has_unit_normalized_size() {
    let mut a = Adam::new(1);
    let mut p = [0.5];
    a.step(&mut p, &[1.0], 1e-3).unwrap();
    let m = (1.0 - ADAM_BETA1) / (1.0 - ADAM_BETA1);
    let v = (1.0 - ADAM_BETA2) / (1.0 - ADAM_BETA2);
    let expected = -1e-3 * m / (v.sqrt() + ADAM_EPS);
    assert_relative_eq!(p[0] - 0.5, expected, max_relative = 1e-12);
    assert_relative_eq!(p[0] - 0.5, -1e-3, max_relative = 1e-7);
}

#[test]
fn adam_zero_gradient_and_bad_input() {
    let mut a = Adam::new(3);
    let mut p = [1.0, -2.0, 3.0];
    a.step(&mut p, &[0.0; 3], 0.1).unwrap();
    assert_eq!(p, [1.0, -2.0, 3.0]);
    assert!(matches!(a.step(&mut p, &[0.0, f64::NAN, 0.0], 0.1), Err(Error::Numeric(_))));
    assert!(a.step(&mut p, &[0.0; 2], 0.1).is_err());
}

fn quadratic(scales: Vec<f64>, target: Vec<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
    move |p: &[f64]| {
        let mut f = 0.0;
        let mut g = vec![0.0; p.len()];
        for i in 0..p.len() {
            let d = p[i] - target[i];
            f += scales[i] * d * d;
            g[i] = 2.0 * scales[i] * d;
        }
        Ok((f, g))
    }
}

#[test]
fn lbfgs_solves_isotropic_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..5 {
        let n = 50;
        let target: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut p: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut f = quadratic(vec![1.0; n], target.clone());
        let mut opt = Lbfgs::new(10);
        let (mut loss, mut grad) = f(&p).unwrap();
        let mut iters = 0;
        while iters < 25 {
            let dist: f64 = p.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if dist < 1e-10 {
                break;
            }
            let out = opt.step(&mut p, loss, &grad, 1.0, &mut f).unwrap();
            assert!(out.loss <= loss);
            loss = out.loss;
            grad = out.grad;
            iters += 1;
        }
        let dist: f64 = p.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-10, "distance {dist} after {iters} iterations");
    }
}

#[test]
fn lbfgs_first_step_is_line_searched_gradient_descent() {
    let mut f = quadratic(vec![1.0, 4.0], vec![0.0, 0.0]);
    let mut p = vec![1.0, 1.0];
    let (l, g) = f(&p).unwrap();
    let mut opt = Lbfgs::new(5);
    let out = opt.step(&mut p, l, &g, 1.0, &mut f).unwrap();
    // p - a g for the accepted a
    assert_relative_eq!(p[0], 1.0 - out.step * g[0], max_relative = 1e-14);
    assert_relative_eq!(p[1], 1.0 - out.step * g[1], max_relative = 1e-14);
    assert!(out.loss < l);
}

#[test]
fn lbfgs_anisotropic_loss_is_monotone() {
    let n = 20;
    let scales: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    let mut f = quadratic(scales, vec![1.0; n]);
    let mut p = vec![0.0; n];
    let mut opt = Lbfgs::new(10);
    let (mut loss, mut grad) = f(&p).unwrap();
    for _ in 0..200 {
        let out = opt.step(&mut p, loss, &grad, 1.0, &mut f).unwrap();
        assert!(out.loss <= loss);
        if out.stalled {
            break;
        }
        loss = out.loss;
        grad = out.grad;
    }
    assert!(loss < 1e-18, "{loss}");
    assert!(opt.s.iter().zip(&opt.y).all(|(s, y)| s.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() > CURVATURE_FLOOR));
}

#[test]
fn lbfgs_stalls_on_non_finite_loss() {
    let mut opt = Lbfgs::new(5);
    let mut p = vec![1.0];
    let mut f = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Err(Error::Numeric("nan".into())) };
    let out = opt.step(&mut p, 1.0, &[1.0], 1.0, &mut f).unwrap();
    assert!(out.stalled);
    assert_eq!(p, vec![1.0]);
}

#[test]
fn total_is_weighted_sum_and_linear_in_weights() {
    let b = bundle(1);
    let bt = batches(2, 0.3, true);
    let w = PerLoss { r: 1.0, b: 1.0, z: 1.0, v: Some(1.0) };
    let rep = loss_value(&b, &bt, &w, Objective::Full).unwrap();
    let c = rep.components;
    assert_relative_eq!(rep.total, c.r + c.b + c.z + c.v.unwrap(), max_relative = 1e-14);
    let w2 = PerLoss { r: 2.0, b: 0.5, z: 3.0, v: Some(1.5) };
    let rep2 = loss_value(&b, &bt, &w2, Objective::Full).unwrap();
    assert_relative_eq!(rep2.total, 2.0 * c.r + 0.5 * c.b + 3.0 * c.z + 1.5 * c.v.unwrap(), max_relative = 1e-14);
    let pre = loss_value(&b, &bt, &w2, Objective::Pretrain).unwrap();
    assert_relative_eq!(pre.total, c.b + c.z + c.v.unwrap(), max_relative = 1e-14);
    assert!(loss_value(&b, &bt, &PerLoss { r: 0.0, ..w }, Objective::Full).is_err());
}

#[test]
fn zero_field_fits_zero_data_and_boundaries() {
    let mut b = bundle(3);
    b.u_net.params.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
    let rep = loss_value(&b, &batches(1, 0.0, false), &Weights::ones(false), Objective::Full).unwrap();
    assert_eq!(rep.components.z, 0.0);
    assert_eq!(rep.components.b, 0.0);
    assert!(rep.components.r > 0.0, "softplus source leaves a residual");
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let b = {
        let mut b = bundle(5);
        b.u_net = net(vec![0, 1, 2], 2, 1, OutputTransform::None, 9);
        b.source = SourceModel::Fixed(FixedField::new(|p: &[f64]| (p[0] * p[1], vec![p[1], p[0], 0.0])));
        b
    };
    let bt = batches(4, 0.2, false);
    let w = PerLoss { r: 1.3, b: 0.7, z: 2.0, v: None };
    let (_, g) = loss_and_grad(&b, &bt, &w, Objective::Full).unwrap();
    let flat = b.flat();
    let h = 1e-6;
    for k in 0..flat.len() {
        let mut probe = b.clone();
        let mut f = flat.clone();
        f[k] += h;
        probe.set_flat(&f).unwrap();
        let plus = loss_value(&probe, &bt, &w, Objective::Full).unwrap().total;
        f[k] -= 2.0 * h;
        probe.set_flat(&f).unwrap();
        let minus = loss_value(&probe, &bt, &w, Objective::Full).unwrap().total;
        let fd = (plus - minus) / (2.0 * h);
        assert!((g[k] - fd).abs() <= 1e-6 * fd.abs().max(1e-3), "param {k}: {} vs {fd}", g[k]);
    }
}

#[test]
fn non_finite_loss_names_the_term() {
    let mut b = bundle(2);
    b.u_net.params.as_mut_slice()[0] = f64::NAN;
    let err = loss_and_grad(&b, &batches(1, 0.0, false), &Weights::ones(false), Objective::Full).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn empty_schedule_leaves_bundle_unchanged() {
    let b = bundle(7);
    let bt = batches(1, 0.1, false);
    let cfg = TrainConfig {
        adam_steps: 0,
        lbfgs_steps: 0,
        ..TrainConfig::default()
    };
    let (out, hist) = run_algorithm1(b.clone(), &bt, &cfg).unwrap();
    assert_eq!(out.flat(), b.flat());
    assert_eq!(hist.weights, vec![(0, Weights::ones(false))]);
    assert!(hist.reports.is_empty());
}

#[test]
fn weights_follow_last_trace_and_freeze_in_lbfgs() {
    let bt = batches(3, 0.1, true);
    let (_, hist) = run_algorithm1(bundle(4), &bt, &small_cfg()).unwrap();
    assert_eq!(hist.weights[0], (0, Weights::ones(true)));
    assert_eq!(hist.traces.len(), 3);
    let (_, last_w) = *hist.weights.last().unwrap();
    let (_, t) = *hist.traces.last().unwrap();
    let total = t.r + t.b + t.z + t.v.unwrap();
    for (lam, tr) in [(last_w.r, t.r), (last_w.b, t.b), (last_w.z, t.z), (last_w.v.unwrap(), t.v.unwrap())] {
        assert!((lam - total / tr).abs() <= 1e-10 * lam);
    }
    let lbfgs: Vec<_> = hist.reports.iter().filter(|r| r.step >= 12).collect();
    assert!(!lbfgs.is_empty());
    assert!(lbfgs.iter().all(|r| r.weights == last_w));
    // accepted L-BFGS steps never raise the objective
    assert!(lbfgs.windows(2).all(|w| w[1].total <= w[0].total));
    let blocks: BTreeSet<&str> = hist.spectra.iter().map(|s| s.block.as_str()).collect();
    assert_eq!(blocks, ["bb", "rr", "vv", "zz"].into_iter().collect());
}

#[test]
fn identical_seeds_give_identical_trajectories() {
    let bt = batches(5, 0.1, false);
    let (a, ha) = run_algorithm1(bundle(8), &bt, &small_cfg()).unwrap();
    let (b, hb) = run_algorithm1(bundle(8), &bt, &small_cfg()).unwrap();
    assert_eq!(a.flat(), b.flat());
    assert_eq!(ha, hb);
}

#[test]
fn checkpoint_resume_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let bt = batches(6, 0.1, false);
    let cfg = TrainConfig {
        adam_steps: 30,
        lbfgs_steps: 10,
        ..small_cfg()
    };
    for stop in [15, 32] {
        let mut t = Trainer::new(bundle(9), &bt, cfg.clone(), SpectraMode::Inverse).unwrap();
        t.run_until(stop).unwrap();
        let ck = dir.path().join(format!("ck{stop}"));
        t.save_checkpoint(&ck).unwrap();
        t.run_until(stop + 5).unwrap();
        let expect = t.bundle.flat();
        let expect_w = t.state.weights;

        let mut r = Trainer::new(bundle(100), &bt, cfg.clone(), SpectraMode::Inverse).unwrap();
        r.load_checkpoint(&ck).unwrap();
        assert_eq!(r.state.step, stop);
        r.run_until(stop + 5).unwrap();
        assert_eq!(r.bundle.flat(), expect, "resume at {stop}");
        assert_eq!(r.state.weights, expect_w);
    }
}

#[test]
fn numeric_failure_dumps_last_finite_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut b = bundle(1);
    b.gamma.as_mut().unwrap().params.as_mut_slice()[0] = f64::INFINITY;
    let bt = batches(1, 0.1, false);
    let mut t = Trainer::new(b, &bt, small_cfg(), SpectraMode::Inverse).unwrap();
    t.checkpoint_dir = Some(dir.path().to_path_buf());
    let err = t.run().unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(dir.path().join("last_finite/state.json").exists());
}

#[test]
fn pretraining_keeps_unit_weights() {
    let bt = batches(2, 0.1, true);
    let cfg = TrainConfig {
        pretrain_steps: 5,
        adam_steps: 4,
        lbfgs_steps: 0,
        ..small_cfg()
    };
    let (_, hist) = run_algorithm1(bundle(3), &bt, &cfg).unwrap();
    assert_eq!(hist.weights[0], (5, Weights::ones(true)));
    assert!(hist.reports.iter().filter(|r| r.step < 5).all(|r| r.weights == Weights::ones(true)));
    assert!(hist.traces.iter().all(|(s, _)| *s >= 5));
}

#[test]
fn forward_mode_trains_only_u_and_labels_blocks() {
    let mut b = bundle(4);
    b.source = SourceModel::Fixed(FixedField::constant(0.3, 3));
    let f_before = b.gamma.as_ref().unwrap().params.clone();
    let bt = batches(7, 0.1, false);
    let cfg = TrainConfig {
        adam_steps: 3,
        lbfgs_steps: 2,
        ..small_cfg()
    };
    let (out, hist) = forward_mode_run(b, &bt, &cfg).unwrap();
    assert_eq!(out.gamma.unwrap().params, f_before);
    let blocks: BTreeSet<&str> = hist.spectra.iter().map(|s| s.block.as_str()).collect();
    assert_eq!(blocks, ["i", "rr", "ux", "uy", "zz"].into_iter().collect());
}

#[test]
fn config_validation_and_history_csv() {
    assert!(TrainConfig { lbfgs_memory: 2, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { adam_lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("loss.csv");
    let rep = LossReport {
        step: 3,
        components: PerLoss { r: 0.2, b: 0.3, z: 0.5, v: None },
        weights: Weights::ones(false),
        total: 1.0,
        grad_norms: vec![],
    };
    write_loss_history(&p, &[rep]).unwrap();
    let text = std::fs::read_to_string(p).unwrap();
    assert_eq!(text, "step,L_r,L_b,L_z,L_v,lambda_r,lambda_b,lambda_z,lambda_v,total\n3,0.2,0.3,0.5,,1,1,1,,1\n");
}
