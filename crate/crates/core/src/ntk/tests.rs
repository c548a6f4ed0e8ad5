use approx::assert_relative_eq;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::networks::{gamma_init, CoefSource, MlpSpec, Net, OutputTransform, SourceModel, Trainable};
use crate::pdemodel::{ade_residual, face_normal, BoundaryCondition, BoundaryGroup, ResidualPoint};
use crate::synthgen::{Observation, ObservationSet, Tau};

fn random_net(inputs: Vec<usize>, hidden: usize, outputs: usize, t: OutputTransform, seed: u64) -> Net {
    let spec = MlpSpec::uniform(inputs.len(), hidden, 2, outputs, t);
    let mut net = Net::new(spec, inputs, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x77);
    for v in net.params.as_mut_slice() {
        *v += rng.gen_range(-0.2..0.2);
    }
    net
}

fn gamma_bundle(seed: u64) -> NetworkBundle {
    let mut g = gamma_init(2);
    g.params.as_mut_slice().copy_from_slice(&[0.4, -0.3, -1.0]);
    NetworkBundle {
        spatial_dims: 2,
        u_net: random_net(vec![0, 1, 2], 5, 1, OutputTransform::None, seed),
        source: SourceModel::Net(random_net(vec![0, 1], 4, 1, OutputTransform::Softplus, seed + 1)),
        v_net: None,
        d_net: None,
        gamma: Some(g),
        velocity: vec![
            CoefSource::Gamma { index: 0, positive: false },
            CoefSource::Gamma { index: 1, positive: false },
        ],
        diffusion: vec![CoefSource::Gamma { index: 2, positive: true }; 2],
        trainable: Trainable::default(),
    }
}

fn velocity_net_bundle(seed: u64) -> NetworkBundle {
    NetworkBundle {
        spatial_dims: 2,
        u_net: random_net(vec![0, 1, 2], 5, 1, OutputTransform::None, seed),
        source: SourceModel::Net(random_net(vec![0, 1], 4, 1, OutputTransform::Softplus, seed + 1)),
        v_net: Some(random_net(vec![2], 3, 2, OutputTransform::None, seed + 2)),
        d_net: Some(random_net(vec![0, 1], 3, 1, OutputTransform::Softplus, seed + 3)),
        gamma: None,
        velocity: vec![CoefSource::Net { output: 0 }, CoefSource::Net { output: 1 }],
        diffusion: vec![CoefSource::Net { output: 0 }; 2],
        trainable: Trainable::default(),
    }
}

fn points(n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, 3), |_| rng.gen_range(0.05..0.95))
}

fn pointwise_obs(locs: &[(f64, f64, f64)]) -> ObservationSet {
    ObservationSet {
        dims: 2,
        entries: locs
            .iter()
            .map(|&(x, y, t)| Observation {
                tau: Tau::Pointwise { t },
                x: vec![x, y],
                clean: 0.1,
                noisy: 0.1,
                sigma: 0.0,
                group: 0,
            })
            .collect(),
        seed: None,
    }
}

fn batches_for(seed: u64) -> Batches {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bpts = Vec::new();
    let mut normals = Vec::new();
    for k in 0..6 {
        let (axis, side) = (k % 2, (k / 2) % 2);
        let mut p = vec![rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        p[axis] = side as f64;
        bpts.extend(p);
        normals.extend(face_normal(2, axis, side));
    }
    let initial = Array2::from_shape_fn((4, 3), |(_, c)| if c == 2 { 0.0 } else { rng.gen_range(0.0..1.0) });
    let obs = pointwise_obs(&[(0.2, 0.3, 0.5), (0.7, 0.1, 0.9), (0.4, 0.8, 0.25)]);
    Batches {
        residual: points(7, seed + 5),
        boundary: BoundaryBatch {
            groups: vec![BoundaryGroup {
                condition: BoundaryCondition::Neumann,
                points: Array2::from_shape_vec((6, 3), bpts).unwrap(),
                normals: Array2::from_shape_vec((6, 2), normals).unwrap(),
            }],
            initial,
        },
        data: DataBatch::from_observations(&obs).unwrap(),
        velocity: Some(VelocityBatch {
            points: points(3, seed + 9),
            axes: vec![0, 1],
            targets: Array2::zeros((3, 2)),
        }),
    }
}

#[test]
fn trace_fast_small_cases() {
    assert_eq!(trace_fast(&Array2::eye(3)), 3.0);
    assert_eq!(trace_fast(&array![[1.0, 2.0], [3.0, 4.0]]), 30.0);
    assert_eq!(trace_fast(&Array2::zeros((4, 5))), 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let j = Array2::from_shape_fn((10, 7), |_| rng.gen_range(-1.0..1.0));
    let k = j.dot(&j.t());
    assert_relative_eq!(trace_fast(&j), k.diag().sum(), max_relative = 1e-13);
}

#[test]
fn weights_of_equal_and_unequal_traces() {
    let w = adaptive_weights(&PerLoss { r: 1.0, b: 1.0, z: 1.0, v: None }, &Weights::ones(false)).unwrap();
    assert_eq!((w.r, w.b, w.z, w.v), (3.0, 3.0, 3.0, None));
    let w = adaptive_weights(&PerLoss { r: 8.0, b: 1.0, z: 1.0, v: None }, &Weights::ones(false)).unwrap();
    assert_relative_eq!(w.r, 1.25);
    assert_relative_eq!(w.b, 10.0);
    assert_relative_eq!(w.z, 10.0);
    let w = adaptive_weights(&PerLoss { r: 2.0, b: 1.0, z: 1.0, v: Some(4.0) }, &Weights::ones(true)).unwrap();
    assert_relative_eq!(w.v.unwrap(), 2.0);
}

#[test]
fn vanishing_trace_holds_previous_weight() {
    let prev = PerLoss { r: 1.0, b: 7.5, z: 2.0, v: None };
    let w = adaptive_weights(&PerLoss { r: 2.0, b: 0.0, z: 2.0, v: None }, &prev).unwrap();
    assert_eq!(w.b, 7.5);
    assert_relative_eq!(w.r, 2.0);
    let err = adaptive_weights(&PerLoss { r: 0.0, b: 0.0, z: 0.0, v: None }, &prev).unwrap_err();
    assert!(matches!(err, Error::DegenerateKernel(_)));
    assert!(matches!(
        adaptive_weights(&PerLoss { r: f64::NAN, b: 1.0, z: 1.0, v: None }, &prev),
        Err(Error::Numeric(_))
    ));
}

proptest! {
    #[test]
    fn weights_are_scale_invariant(r in 1e-6..1e6f64, b in 1e-6..1e6f64, z in 1e-6..1e6f64, c in 1e-3..1e3f64) {
        let t = PerLoss { r, b, z, v: None };
        let ts = PerLoss { r: c * r, b: c * b, z: c * z, v: None };
        let w = adaptive_weights(&t, &Weights::ones(false)).unwrap();
        let ws = adaptive_weights(&ts, &Weights::ones(false)).unwrap();
        for (a, b) in [(w.r, ws.r), (w.b, ws.b), (w.z, ws.z)] {
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }
        // every weighted trace equals the total
        let total = r + b + z;
        for (lam, tr) in [(w.r, r), (w.b, b), (w.z, z)] {
            prop_assert!((lam * tr - total).abs() <= 1e-9 * total);
        }
    }

    #[test]
    fn kernel_is_psd_with_matching_trace(seed in 0u64..1000, n in 1usize..12, p in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let j = Array2::from_shape_fn((n, p), |_| rng.gen_range(-2.0..2.0));
        let k = j.dot(&j.t());
        let ev = eigenvalues_raw(&k).unwrap();
        let scale = k.diag().sum().max(1.0);
        prop_assert!(ev[0] >= -1e-10 * scale);
        let sum: f64 = ev.iter().sum();
        prop_assert!((sum - trace_fast(&j)).abs() <= 1e-10 * scale);
    }
}

#[test]
fn spectrum_small_cases() {
    assert_eq!(spectrum(&Array2::eye(3)).unwrap(), vec![1.0; 3]);
    let v = array![[1.0], [1.0], [1.0], [1.0]];
    let ev = spectrum(&v.dot(&v.t())).unwrap();
    assert_relative_eq!(ev[0], 4.0, max_relative = 1e-12);
    assert!(ev[1..].iter().all(|e| e.abs() < 1e-12));
    assert!(ev.windows(2).all(|w| w[0] >= w[1]));
    assert!(spectrum(&Array2::zeros((2, 3))).is_err());
    assert!(spectrum(&Array2::zeros((0, 0))).unwrap().is_empty());
}

#[test]
fn residual_rows_match_seeded_batch_backward() {
    for bundle in [gamma_bundle(1), velocity_net_bundle(2)] {
        let pts = points(5, 11);
        let j = build_residual_jacobian(&bundle, &pts).unwrap();
        assert_eq!(j.dim(), (5, bundle.n_trainable()));
        let mut tape = Tape::new();
        let bind = BundleBinding::new(&mut tape, &bundle);
        let r = residual_tape(&mut tape, &bundle, &bind, &pts).unwrap();
        for i in 0..5 {
            let mut seed = Array2::zeros((5, 1));
            seed[[i, 0]] = 1.0;
            let g = tape.backward_seeded(r, seed).unwrap();
            let mut row = Vec::new();
            for b in bind.trainable(&bundle) {
                flat_grad(&tape, &g, b, &mut row);
            }
            for (a, b) in j.row(i).iter().zip(&row) {
                assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
        // entrywise K = J J^T against per-point inner products
        let k = KernelBlocks::from_jacobians(&[("rr", &j)], false).unwrap();
        for a in 0..5 {
            for b in 0..5 {
                let dot: f64 = j.row(a).iter().zip(j.row(b).iter()).map(|(x, y)| x * y).sum();
                assert!((k.diag[0][[a, b]] - dot).abs() <= 1e-12 * (1.0 + dot.abs()));
            }
        }
    }
}

#[test]
fn residual_row_matches_finite_differences() {
    let bundle = velocity_net_bundle(5);
    let pts = points(2, 4);
    let j = build_residual_jacobian(&bundle, &pts).unwrap();
    let flat = bundle.flat();
    let h = 1e-6;
    for i in 0..2 {
        let p = ResidualPoint::interior(pts.row(i).to_vec());
        for k in (0..flat.len()).step_by(3) {
            let mut b = bundle.clone();
            let mut f = flat.clone();
            f[k] += h;
            b.set_flat(&f).unwrap();
            let plus = ade_residual(&b, &p).unwrap();
            f[k] -= 2.0 * h;
            b.set_flat(&f).unwrap();
            let minus = ade_residual(&b, &p).unwrap();
            let fd = (plus - minus) / (2.0 * h);
            assert!((j[[i, k]] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "col {k}: {} vs {fd}", j[[i, k]]);
        }
    }
}

#[test]
fn zero_output_source_contributes_no_columns() {
    let mut bundle = gamma_bundle(8);
    let spec = MlpSpec::uniform(2, 4, 2, 1, OutputTransform::Square);
    let mut f = Net::new(spec, vec![0, 1], 3).unwrap();
    let n = f.params.len();
    let layout = f.spec.layout();
    // zero the last weight matrix and bias so the pre-activation is zero
    let last: usize = layout[layout.len() - 2..].iter().map(|s| s.size()).sum();
    for v in &mut f.params.as_mut_slice()[n - last..] {
        *v = 0.0;
    }
    bundle.source = SourceModel::Net(f);
    let j = build_residual_jacobian(&bundle, &points(6, 2)).unwrap();
    let (_, start, len) = bundle
        .block_ranges()
        .into_iter()
        .find(|(b, _, _)| *b == crate::networks::Block::F)
        .unwrap();
    assert!(j.slice(ndarray::s![.., start..start + len]).iter().all(|&v| v == 0.0));
    assert!(j.slice(ndarray::s![.., ..start]).iter().any(|&v| v != 0.0));
}

#[test]
fn duplicated_point_gives_duplicated_row() {
    let bundle = gamma_bundle(3);
    let mut pts = points(3, 7);
    let r0 = pts.row(0).to_owned();
    pts.row_mut(2).assign(&r0);
    let j = build_residual_jacobian(&bundle, &pts).unwrap();
    assert_eq!(j.row(0), j.row(2));
}

#[test]
fn frozen_blocks_drop_columns() {
    let mut bundle = gamma_bundle(4);
    let full = build_residual_jacobian(&bundle, &points(3, 1)).unwrap();
    bundle.trainable = Trainable {
        f: false,
        ..Trainable::default()
    };
    let part = build_residual_jacobian(&bundle, &points(3, 1)).unwrap();
    assert_eq!(part.ncols(), bundle.n_trainable());
    assert!(part.ncols() < full.ncols());
    let nu = bundle.u_net.params.len();
    assert_eq!(part.slice(ndarray::s![.., ..nu]), full.slice(ndarray::s![.., ..nu]));
}

#[test]
fn accumulative_row_is_trapezoid_mean_of_pointwise_rows() {
    let bundle = gamma_bundle(6);
    let acc = ObservationSet {
        dims: 2,
        entries: vec![Observation {
            tau: Tau::Accumulative {
                t0: 0.2,
                t1: 0.6,
                intervals: 1,
            },
            x: vec![0.3, 0.4],
            clean: 0.0,
            noisy: 0.0,
            sigma: 0.0,
            group: 0,
        }],
        seed: None,
    };
    let pw = pointwise_obs(&[(0.3, 0.4, 0.2), (0.3, 0.4, 0.6)]);
    let boundary = batches_for(1).boundary;
    let (_, ja) = build_data_jacobians(&bundle, &boundary, &DataBatch::from_observations(&acc).unwrap()).unwrap();
    let (_, jp) = build_data_jacobians(&bundle, &boundary, &DataBatch::from_observations(&pw).unwrap()).unwrap();
    for c in 0..ja.ncols() {
        let mean = 0.5 * (jp[[0, c]] + jp[[1, c]]);
        assert!((ja[[0, c]] - mean).abs() <= 1e-13 * (1.0 + mean.abs()));
    }
    // pointwise rows touch only the u columns
    let nu = bundle.u_net.params.len();
    assert!(jp.slice(ndarray::s![.., nu..]).iter().all(|&v| v == 0.0));
}

#[test]
fn empty_batches_are_config_errors() {
    let bundle = gamma_bundle(1);
    let b = batches_for(1);
    let empty = DataBatch {
        points: Array2::zeros((0, 3)),
        rows: vec![],
        targets: vec![],
    };
    assert!(matches!(build_data_jacobians(&bundle, &b.boundary, &empty), Err(Error::Config(_))));
}

#[test]
fn streamed_trace_matches_materialized_jacobian() {
    for bundle in [gamma_bundle(2), velocity_net_bundle(3)] {
        let b = batches_for(2);
        for kind in LossKind::ALL {
            let j = jacobian(&bundle, &b, kind, None).unwrap();
            assert_eq!(j.nrows(), row_count(&b, kind));
            let rows: Vec<usize> = (0..j.nrows()).collect();
            let t = trace_rows(&bundle, &b, kind, &rows).unwrap();
            assert_relative_eq!(t, trace_fast(&j), max_relative = 1e-12);
        }
    }
}

#[test]
fn velocity_rows_touch_only_coefficient_columns() {
    let bundle = velocity_net_bundle(9);
    let b = batches_for(3);
    let j = jacobian(&bundle, &b, LossKind::Velocity, None).unwrap();
    let ranges = bundle.block_ranges();
    for (block, start, len) in ranges {
        let any = j.slice(ndarray::s![.., start..start + len]).iter().any(|&v| v != 0.0);
        assert_eq!(any, block == crate::networks::Block::V, "{block:?}");
    }
}

#[test]
fn off_diagonal_blocks_assemble_a_symmetric_kernel() {
    let bundle = gamma_bundle(5);
    let b = batches_for(5);
    let jr = jacobian(&bundle, &b, LossKind::Residual, None).unwrap();
    let jb = jacobian(&bundle, &b, LossKind::Boundary, None).unwrap();
    let jz = jacobian(&bundle, &b, LossKind::Data, None).unwrap();
    let k = KernelBlocks::from_jacobians(&[("rr", &jr), ("bb", &jb), ("zz", &jz)], true).unwrap();
    let full = k.full().unwrap();
    let n = full.nrows();
    assert_eq!(n, jr.nrows() + jb.nrows() + jz.nrows());
    for a in 0..n {
        for c in 0..n {
            assert_eq!(full[[a, c]], full[[c, a]]);
        }
    }
    let ev = eigenvalues_raw(&full).unwrap();
    assert!(ev[0] >= -1e-10 * full.diag().sum());
    let tr: f64 = k.traces.iter().sum();
    assert_relative_eq!(ev.iter().sum::<f64>(), tr, max_relative = 1e-10);
    assert_relative_eq!(k.block("bb").unwrap().diag().sum(), trace_fast(&jb), max_relative = 1e-12);
    let no_off = KernelBlocks::from_jacobians(&[("rr", &jr), ("bb", &jb)], false).unwrap();
    assert!(no_off.full().is_err());
}

#[test]
fn subsample_is_seeded_sorted_and_distinct() {
    let a = subsample(1000, 200, 4);
    assert_eq!(a, subsample(1000, 200, 4));
    assert_ne!(a, subsample(1000, 200, 5));
    assert_eq!(a.len(), 200);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(subsample(50, 200, 1), (0..50).collect::<Vec<_>>());
}

#[test]
fn csv_exports_have_fixed_headers() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("spectra.csv");
    let recs = vec![
        SpectrumRecord { block: "zz".into(), index: 1, eigenvalue: 0.5, step: 0 },
        SpectrumRecord { block: "bb".into(), index: 0, eigenvalue: 2.0, step: 0 },
    ];
    write_spectra_csv(&p, &recs).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text, "block,index,eigenvalue,step\nbb,0,2,0\nzz,1,0.5,0\n");
    let w = dir.path().join("weights.csv");
    write_weight_history(&w, &[(0, Weights::ones(true)), (100, PerLoss { r: 1.5, b: 2.0, z: 3.0, v: Some(4.0) })]).unwrap();
    let text = std::fs::read_to_string(&w).unwrap();
    assert!(text.starts_with("step,lambda_r,lambda_b,lambda_z,lambda_v\n0,1,1,1,1\n100,1.5,2,3,4"));
}
