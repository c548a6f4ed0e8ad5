use std::f64::consts::PI;
use std::sync::Arc;

use super::*;
use crate::error::Error;
use crate::pdemodel::{BoundaryCondition, TruthCase};

fn neumann_problem(dims: usize) -> ForwardProblem {
    ForwardProblem {
        dims,
        velocity: Arc::new(|_, _| 0.0),
        diffusion: Arc::new(|_, _| 0.05),
        source: Arc::new(|_| 0.0),
        initial: None,
        faces: vec![BoundaryCondition::Neumann; 2 * dims],
        steady_diffusion: true,
    }
}

/// `u = cos(pi x) cos(pi y) exp(-t)` with constant velocity and the
/// variable-coefficient diffusion; the forcing is derived by hand.
fn manufactured(v: [f64; 2]) -> (ForwardProblem, impl Fn(&[f64], f64) -> f64) {
    let exact = |x: &[f64], t: f64| (PI * x[0]).cos() * (PI * x[1]).cos() * (-t).exp();
    let source = move |p: &[f64]| {
        let (x, y, t) = (p[0], p[1], p[2]);
        let e = (-t).exp();
        let (cx, sx, cy, sy) = ((PI * x).cos(), (PI * x).sin(), (PI * y).cos(), (PI * y).sin());
        let u = cx * cy * e;
        let ux = -PI * sx * cy * e;
        let uy = -PI * cx * sy * e;
        let lap = -2.0 * PI * PI * u;
        let d = 0.1 * (1.0 + sx * cy / 2.0);
        let dx = 0.05 * PI * cx * cy;
        let dy = -0.05 * PI * sx * sy;
        -u + v[0] * ux + v[1] * uy - (dx * ux + dy * uy + d * lap)
    };
    let problem = ForwardProblem {
        dims: 2,
        velocity: Arc::new(move |a, _| v[a]),
        diffusion: Arc::new(|_, p| 0.1 * (1.0 + (PI * p[0]).sin() * (PI * p[1]).cos() / 2.0)),
        source: Arc::new(source),
        initial: Some(Arc::new(move |x| exact(x, 0.0))),
        faces: vec![BoundaryCondition::Neumann; 4],
        steady_diffusion: true,
    };
    (problem, exact)
}

fn max_error(n: usize, v: [f64; 2]) -> f64 {
    let (problem, exact) = manufactured(v);
    let h = 1.0 / n as f64;
    let steps = (1.0 / (4.0 * h * h)).ceil() as usize;
    let grid = Grid::new(2, n, steps).unwrap();
    let series = solve_forward(&problem, grid).unwrap();
    series
        .last()
        .iter()
        .enumerate()
        .map(|(i, u)| (u - exact(&grid.coords(i), 1.0)).abs())
        .fold(0.0, f64::max)
}

#[test]
fn grid_invariants() {
    let g = Grid::new(2, 64, 200).unwrap();
    assert!((g.dt * g.n_steps as f64 - 1.0).abs() < 1e-12);
    assert_eq!(g.n_nodes(), 65 * 65);
    assert_eq!(g.index(&g.multi_index(1234)), 1234);
    assert!(matches!(Grid::new(2, 7, 10), Err(Error::Config(_))));
    assert!(Grid::new(4, 16, 10).is_err());
}

#[test]
fn manufactured_solution_converges_at_second_order() {
    let v = [0.2, -0.2];
    let errs: Vec<f64> = [16, 32, 64].iter().map(|&n| max_error(n, v)).collect();
    for w in errs.windows(2) {
        let order = (w[0] / w[1]).log2();
        assert!(order >= 1.8, "errors {errs:?}");
    }
}

#[test]
fn zero_forcing_gives_zero_field() {
    for case in [TruthCase::Constant2d, TruthCase::Height3d] {
        let mut problem = ForwardProblem::truth(case);
        problem.source = Arc::new(|_| 0.0);
        let dims = case.spatial_dims();
        let grid = Grid::new(dims, if dims == 2 { 16 } else { 8 }, 20).unwrap();
        let series = solve_forward(&problem, grid).unwrap();
        assert_eq!(series.snapshots.len(), 21);
        assert!(series.snapshots.iter().flatten().all(|&v| v == 0.0));
    }
}

#[test]
fn pure_diffusion_mass_is_nondecreasing() {
    let mut problem = neumann_problem(2);
    problem.source = Arc::new(|p| (-((p[0] - 0.3).powi(2) + (p[1] - 0.6).powi(2)) / 0.01).exp());
    let grid = Grid::new(2, 24, 50).unwrap();
    let series = solve_forward(&problem, grid).unwrap();
    // trapezoid weights of the node-centred grid
    let w: Vec<f64> = (0..grid.n_nodes())
        .map(|i| {
            grid.multi_index(i)
                .iter()
                .map(|&k| if k == 0 || k == grid.n { 0.5 } else { 1.0 })
                .product::<f64>()
        })
        .collect();
    let mass: Vec<f64> = series
        .snapshots
        .iter()
        .map(|s| s.iter().zip(&w).map(|(u, w)| u * w).sum::<f64>())
        .collect();
    for m in mass.windows(2) {
        assert!(m[1] >= m[0] - 1e-12);
    }
    assert!(mass.last().unwrap() > &0.0);
}

#[test]
fn cfl_violation_is_config_error() {
    let mut problem = neumann_problem(2);
    problem.velocity = Arc::new(|_, _| 50.0);
    let grid = Grid::new(2, 16, 10).unwrap();
    assert!(matches!(solve_forward(&problem, grid), Err(Error::Config(_))));
}

#[test]
fn truth_scenarios_run_and_stay_finite() {
    let grid = Grid::new(2, 16, 40).unwrap();
    let s = solve_forward(&ForwardProblem::truth(TruthCase::Variable2d), grid).unwrap();
    assert!(s.last().iter().all(|v| v.is_finite()));
    assert!(s.last().iter().cloned().fold(0.0, f64::max) > 0.0);
    let grid3 = Grid::new(3, 8, 20).unwrap();
    let s3 = solve_forward(&ForwardProblem::truth(TruthCase::Height3d), grid3).unwrap();
    // held faces stay at zero
    for (i, v) in s3.last().iter().enumerate() {
        let m = grid3.multi_index(i);
        if m[0] == 0 || m[0] == 8 || m[1] == 0 || m[1] == 8 || m[2] == 0 {
            assert_eq!(*v, 0.0);
        }
    }
}

fn series_linear_in_x(grid: Grid) -> FieldSeries {
    FieldSeries::from_fn(grid, |x, t| 2.0 * x[0] + t).unwrap()
}

#[test]
fn pointwise_sampling() {
    let grid = Grid::new(2, 10, 10).unwrap();
    let series = FieldSeries::from_fn(grid, |x, t| (3.0 * x[0]).sin() * (2.0 * x[1]).cos() + t).unwrap();
    let node = vec![0.3, 0.7];
    let sensors = SensorSet {
        locations: vec![node.clone()],
        schedule: SensorSchedule::Pointwise { every: 1 },
    };
    let obs = sample_pointwise(&series, &sensors).unwrap();
    assert_eq!(obs.len(), 11);
    let idx = grid.index(&[3, 7]);
    assert_eq!(obs.entries[4].clean, series.snapshots[4][idx]);

    let lin = series_linear_in_x(grid);
    let center = vec![0.35, 0.45];
    let v = lin.interpolate(2, &center).unwrap();
    let corners = [[3, 4], [4, 4], [3, 5], [4, 5]];
    let avg = corners.iter().map(|c| lin.snapshots[2][grid.index(c)]).sum::<f64>() / 4.0;
    assert!((v - avg).abs() < 1e-14);

    let outside = SensorSet {
        locations: vec![vec![1.2, 0.5]],
        schedule: SensorSchedule::Pointwise { every: 1 },
    };
    assert!(sample_pointwise(&series, &outside).is_err());
}

#[test]
fn interpolation_error_is_second_order() {
    let f = |x: &[f64], _t: f64| (2.0 * x[0]).sin() * (1.5 * x[1] + 0.3).cos() * (x[2] + 0.2).exp();
    let sensors = random_sensors(3, 30, 5, SensorSchedule::Pointwise { every: 1 });
    let mut ratios = Vec::new();
    for n in [8, 16] {
        let grid = Grid::new(3, n, 1).unwrap();
        let s = FieldSeries::from_fn(grid, f).unwrap();
        let err = sensors
            .locations
            .iter()
            .map(|x| (s.interpolate(0, x).unwrap() - f(x, 0.0)).abs())
            .fold(0.0, f64::max);
        let h = grid.h();
        // second derivatives of f are bounded by 4 e^1.2 on the cube
        assert!(err <= 3.0 * 4.0 * 1.2f64.exp() * h * h / 8.0 * 3.0);
        ratios.push(err);
    }
    assert!(ratios[0] / ratios[1] > 3.0);
}

#[test]
fn accumulative_sampling() {
    let grid = Grid::new(2, 8, 90).unwrap();
    let sensors = SensorSet {
        locations: vec![vec![0.4, 0.4]],
        schedule: SensorSchedule::Accumulative { window: 30 },
    };
    let c = FieldSeries::from_fn(grid, |_, _| 2.5).unwrap();
    let obs = sample_accumulative(&c, &sensors).unwrap();
    assert_eq!(obs.len(), 3);
    for e in &obs.entries {
        assert!((e.clean - 2.5).abs() < 1e-14);
    }
    let lin = FieldSeries::from_fn(grid, |_, t| 3.0 * t - 1.0).unwrap();
    let obs = sample_accumulative(&lin, &sensors).unwrap();
    for e in &obs.entries {
        let Tau::Accumulative { t0, t1, .. } = e.tau else { panic!() };
        assert!((e.clean - (3.0 * 0.5 * (t0 + t1) - 1.0)).abs() < 1e-13);
    }

    let fine = Grid::new(2, 8, 4000).unwrap();
    let s = FieldSeries::from_fn(fine, |_, t| (2.0 * PI * t).sin()).unwrap();
    let quarter = SensorSet {
        locations: vec![vec![0.5, 0.5]],
        schedule: SensorSchedule::Accumulative { window: 1000 },
    };
    let obs = sample_accumulative(&s, &quarter).unwrap();
    let expect = (1.0 / 0.25) * (1.0 - (PI / 2.0).cos()) / (2.0 * PI);
    assert!((obs.entries[0].clean - expect).abs() < 1e-6);

    let too_long = SensorSet {
        locations: vec![vec![0.5, 0.5]],
        schedule: SensorSchedule::Accumulative { window: 91 },
    };
    assert!(matches!(sample_accumulative(&c, &too_long), Err(Error::Config(_))));
}

#[test]
fn tau_quadrature_weights() {
    let q = Tau::Accumulative {
        t0: 0.1,
        t1: 0.2,
        intervals: 1,
    }
    .quadrature();
    assert_eq!(q, vec![(0.1, 0.5), (0.2, 0.5)]);
    let q = Tau::Accumulative {
        t0: 0.0,
        t1: 0.3,
        intervals: 30,
    }
    .quadrature();
    assert!((q.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-14);
}

#[test]
fn samplers_are_linear_and_vanish_on_zero() {
    let grid = Grid::new(2, 12, 60).unwrap();
    let u1 = FieldSeries::from_fn(grid, |x, t| x[0] * x[1] + t * t).unwrap();
    let u2 = FieldSeries::from_fn(grid, |x, t| (x[0] + 2.0 * t).sin()).unwrap();
    let (a, b) = (1.7, -0.4);
    let combo = FieldSeries::new(
        grid,
        u1.snapshots
            .iter()
            .zip(&u2.snapshots)
            .map(|(s1, s2)| s1.iter().zip(s2).map(|(p, q)| a * p + b * q).collect())
            .collect(),
    )
    .unwrap();
    let zero = FieldSeries::from_fn(grid, |_, _| 0.0).unwrap();
    for schedule in [SensorSchedule::Pointwise { every: 3 }, SensorSchedule::Accumulative { window: 30 }] {
        let sensors = random_sensors(2, 5, 9, schedule.clone());
        let sample = |s: &FieldSeries| match schedule {
            SensorSchedule::Pointwise { .. } => sample_pointwise(s, &sensors).unwrap(),
            SensorSchedule::Accumulative { .. } => sample_accumulative(s, &sensors).unwrap(),
        };
        let (o1, o2, oc) = (sample(&u1), sample(&u2), sample(&combo));
        for ((e1, e2), ec) in o1.entries.iter().zip(&o2.entries).zip(&oc.entries) {
            assert!((a * e1.clean + b * e2.clean - ec.clean).abs() < 1e-13);
        }
        assert!(sample(&zero).entries.iter().all(|e| e.clean == 0.0));
    }
}

#[test]
fn noise_properties() {
    let grid = Grid::new(2, 8, 10).unwrap();
    let series = FieldSeries::from_fn(grid, |x, t| 1.0 + x[0] + t).unwrap();
    let sensors = random_sensors(2, 4, 3, SensorSchedule::Pointwise { every: 1 });
    let clean = sample_pointwise(&series, &sensors).unwrap();
    let none = add_noise(&clean, 0.0, 1).unwrap();
    assert!(none.entries.iter().all(|e| e.noisy == e.clean && e.sigma == 0.0));
    assert_eq!(add_noise(&clean, 0.05, 7).unwrap(), add_noise(&clean, 0.05, 7).unwrap());
    assert_ne!(add_noise(&clean, 0.05, 7).unwrap(), add_noise(&clean, 0.05, 8).unwrap());
    assert!(add_noise(&clean, -0.1, 1).is_err());

    // per-sensor RMS scale
    let noisy = add_noise(&clean, 0.1, 2).unwrap();
    for g in 0..4 {
        let vals: Vec<f64> = clean.entries.iter().filter(|e| e.group == g).map(|e| e.clean).collect();
        let rms = (vals.iter().map(|v| v * v).sum::<f64>() / vals.len() as f64).sqrt();
        for e in noisy.entries.iter().filter(|e| e.group == g) {
            assert!((e.sigma - 0.1 * rms).abs() < 1e-15);
        }
    }

    let many = ObservationSet {
        dims: 2,
        entries: (0..10_000)
            .map(|i| Observation {
                tau: Tau::Pointwise { t: 0.0 },
                x: vec![0.5, 0.5],
                clean: 1.0 + (i % 3) as f64,
                noisy: 0.0,
                sigma: 0.0,
                group: 0,
            })
            .collect(),
        seed: None,
    };
    let z = add_noise(&many, 0.02, 99).unwrap();
    let std_normal: Vec<f64> = z.entries.iter().map(|e| (e.noisy - e.clean) / e.sigma).collect();
    let mean = std_normal.iter().sum::<f64>() / 1e4;
    let sd = (std_normal.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (1e4 - 1.0)).sqrt();
    assert!((0.97..=1.03).contains(&sd), "sd {sd}");
}

#[test]
fn boundary_selection() {
    let grid = Grid::new(2, 25, 99).unwrap();
    let series = FieldSeries::from_fn(grid, |x, t| x[0] + x[1] + t).unwrap();
    let boundary = (0..grid.n_nodes()).filter(|&i| grid.on_boundary(i)).count();
    assert_eq!(boundary * 100, 10_000);
    let all = select_boundary_data(&series, 1000.0, 1).unwrap();
    assert_eq!(all.len(), 10_000);
    let some = select_boundary_data(&series, 11.0, 1).unwrap();
    assert_eq!(some.len(), 110);
    assert_eq!(some, select_boundary_data(&series, 11.0, 1).unwrap());
    assert_ne!(some, select_boundary_data(&series, 11.0, 2).unwrap());
    for e in &some.entries {
        assert!(e.x.iter().any(|&c| c == 0.0 || c == 1.0));
        let Tau::Pointwise { t } = e.tau else { panic!() };
        assert!((e.clean - (e.x[0] + e.x[1] + t)).abs() < 1e-12);
    }
    assert!(select_boundary_data(&series, 0.0, 1).is_err());
}

#[test]
fn observation_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::new(3, 8, 60).unwrap();
    let series = FieldSeries::from_fn(grid, |x, t| x[0] * x[2] + (t * 3.0).sin()).unwrap();
    let p = sample_pointwise(&series, &random_sensors(3, 3, 1, SensorSchedule::Pointwise { every: 7 })).unwrap();
    let a = sample_accumulative(&series, &random_sensors(3, 2, 2, SensorSchedule::Accumulative { window: 30 })).unwrap();
    let obs = add_noise(&p.merged(a).unwrap(), 0.05, 4).unwrap();
    let path = dir.path().join("obs.csv");
    write_observations(&path, &obs).unwrap();
    let back = read_observations(&path).unwrap();
    assert_eq!(back.dims, 3);
    assert_eq!(back.len(), obs.len());
    for (x, y) in obs.entries.iter().zip(&back.entries) {
        assert_eq!(x.tau, y.tau);
        assert_eq!(x.x, y.x);
        assert_eq!((x.clean, x.noisy, x.sigma), (y.clean, y.noisy, y.sigma));
        assert_eq!(x.group, y.group);
    }
    assert!(back.entries.iter().any(|e| matches!(e.tau, Tau::Accumulative { .. })));
    assert!(back.entries.iter().any(|e| matches!(e.tau, Tau::Pointwise { .. })));
}

#[test]
fn observation_csv_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    std::fs::write(
        &path,
        "kind,x,y,t_or_window,clean,noisy,sigma\npointwise,0.5,0.5,0.1,1,1,0\npointwise,0.2,0.3,0.1,1,1,-0.5\n",
    )
    .unwrap();
    match read_observations(&path) {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("sigma"));
        }
        other => panic!("{other:?}"),
    }
    std::fs::write(
        &path,
        "kind,x,y,t_or_window,clean,noisy,sigma\npointwise,1.5,0.5,0.1,1,1,0\naccumulative,0.5,-0.1,0.1:0.4:30,1,1,0\n",
    )
    .unwrap();
    match read_observations(&path) {
        Err(Error::Config(msg)) => {
            assert!(msg.contains("line 2") && msg.contains("line 3"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, "kind,x,y,t_or_window,clean,noisy,sigma\npointwise,0.5,abc,0.1,1,1,0\n").unwrap();
    assert!(matches!(read_observations(&path), Err(Error::Parse { line: 2, .. })));
}

#[test]
fn series_export_lists_files() {
    let dir = tempfile::tempdir().unwrap();
    let grid = Grid::new(2, 8, 10).unwrap();
    let s = series_linear_in_x(grid);
    let files = write_series(dir.path(), &s, 4, serde_json::json!({"seed": 1})).unwrap();
    assert_eq!(files, vec!["u_step00000.csv", "u_step00004.csv", "u_step00008.csv", "u_step00010.csv", "series.json"]);
    let text = std::fs::read_to_string(dir.path().join("u_step00010.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 81);
}
