use std::fs;
use std::path::Path;

use climath::experiment::*;
use climath::synthgen::{read_observations, write_observations, Observation, ObservationSet, Tau};
use climath::Error;

fn tiny(id: ScenarioId) -> RunConfig {
    RunConfig::preset(id, false)
        .with_overrides(&[
            "data.grid_n=8".into(),
            "data.n_steps=24".into(),
            "data.window=4".into(),
            "data.velocity_every=6".into(),
            "data.sensors=4".into(),
            "networks.u.hidden=6".into(),
            "networks.f.hidden=6".into(),
            "networks.v.hidden=4".into(),
            "networks.d.hidden=4".into(),
            "train.pretrain_steps=0".into(),
            "train.adam_steps=6".into(),
            "train.lbfgs_steps=3".into(),
            "train.n_residual=24".into(),
            "train.n_boundary=16".into(),
            "train.ntk_update_every=3".into(),
            "train.ntk_residual_rows=12".into(),
            "train.spectrum_rows=12".into(),
            "train.checkpoint_every=0".into(),
            "eval.grid_2d=7".into(),
            "eval.grid_3d=4".into(),
            "eval.time_samples=5".into(),
        ])
        .unwrap()
}

fn read_grid(path: &Path) -> Vec<Vec<f64>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(|v| v.parse::<f64>().unwrap()).collect())
        .collect()
}

#[test]
fn noiseless_a1_run_writes_a_metrics_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ScenarioId::A1).with_overrides(&["data.noise=0".into()]).unwrap();
    let out = run(&cfg, dir.path(), RunOptions::default()).unwrap();
    for f in ["metrics.json", "metrics.csv", "params.bin", "loss_history.csv", "weights.csv", "spectra.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert!(out.metrics.field("u_t1").is_some());
    for s in ["V_x", "V_y", "D_x", "D_y"] {
        assert!(out.metrics.scalar(s).unwrap().rel_error >= 0.0);
    }
    let peak = out.metrics.source_peak.unwrap();
    // argmax on the 7-node grid nearest to (0.25, 0.75)
    assert_eq!(peak.truth.len(), 2);
    assert!((peak.truth[0] - 0.25).hypot(peak.truth[1] - 0.75) <= 1.0 / 6.0);
    assert!(out.metrics.data_misfit.unwrap().observations > 0);
}

#[test]
fn identical_seeds_give_identical_metrics_digests() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny(ScenarioId::A1);
    run(&cfg, a.path(), RunOptions::default()).unwrap();
    run(&cfg, b.path(), RunOptions::default()).unwrap();
    let d = |p: &Path| sha256_file(&p.join("metrics.csv")).unwrap();
    assert_eq!(d(a.path()), d(b.path()));
    let ma = RunManifest::read(a.path()).unwrap();
    let mb = RunManifest::read(b.path()).unwrap();
    assert_eq!(ma.files, mb.files);

    let c = tempfile::tempdir().unwrap();
    run(&cfg.with_overrides(&["seed=9".into()]).unwrap(), c.path(), RunOptions::default()).unwrap();
    assert_ne!(d(a.path()), d(c.path()));
}

#[test]
fn run_rederives_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    run(&tiny(ScenarioId::A2), dir.path(), RunOptions::default()).unwrap();
    let manifest = RunManifest::read(dir.path()).unwrap();
    assert!(manifest.verify(dir.path()).unwrap().is_empty());

    let cfg = load_config(dir.path()).unwrap();
    assert_eq!(cfg.hash(), manifest.scenario_hash);
    assert_eq!(cfg.seeds(), manifest.seeds);
    let again = tempfile::tempdir().unwrap();
    run(&cfg, again.path(), RunOptions::default()).unwrap();
    let metrics = |p: &Path| fs::read(p.join("metrics.csv")).unwrap();
    assert_eq!(metrics(dir.path()), metrics(again.path()));
}

#[test]
fn every_output_file_has_a_digest() {
    let dir = tempfile::tempdir().unwrap();
    run(&tiny(ScenarioId::B), dir.path(), RunOptions::default()).unwrap();
    export_plotdata(dir.path()).unwrap();
    let manifest = RunManifest::read(dir.path()).unwrap();
    let listed: Vec<&str> = manifest.files.iter().map(|f| f.path.as_str()).collect();
    let mut on_disk = Vec::new();
    let mut stack = vec![dir.path().to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                on_disk.push(p.strip_prefix(dir.path()).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    on_disk.retain(|p| p != "manifest.json");
    on_disk.sort();
    let mut listed_sorted = listed.clone();
    listed_sorted.sort();
    assert_eq!(on_disk, listed_sorted);
    for f in &manifest.files {
        assert_eq!(f.sha256, sha256_file(&dir.path().join(&f.path)).unwrap());
        assert_eq!(f.sha256.len(), 64);
    }
    assert!(listed.contains(&"velocity.csv"));
    assert!(manifest.schemas.contains_key("metrics.csv"));
    assert!(manifest.constants.contains_key("source_2d_mu"));

    fs::write(dir.path().join("metrics.csv"), "tampered").unwrap();
    assert_eq!(manifest.verify(dir.path()).unwrap(), vec!["metrics.csv".to_string()]);
}

#[test]
fn plot_export_schema_and_error_fields() {
    let dir = tempfile::tempdir().unwrap();
    run(&tiny(ScenarioId::A1), dir.path(), RunOptions::default()).unwrap();
    let files = export_plotdata(dir.path()).unwrap();
    for f in ["u_pred_t1.csv", "f_pred.csv", "err_u_t1.csv", "err_f.csv", "lambda_history.csv", "spectra.csv"] {
        assert!(files.iter().any(|g| g == f), "{f} missing from {files:?}");
    }
    let plots = dir.path().join("plots");
    for (pred, truth, err) in [
        ("u_pred_t1.csv", "u_true_t1.csv", "err_u_t1.csv"),
        ("f_pred.csv", "f_true.csv", "err_f.csv"),
    ] {
        let (p, t, e) = (read_grid(&plots.join(pred)), read_grid(&plots.join(truth)), read_grid(&plots.join(err)));
        assert_eq!(p.len(), 49);
        assert_eq!((p.len(), t.len()), (e.len(), e.len()));
        for ((p, t), e) in p.iter().zip(&t).zip(&e) {
            assert_eq!(p[..2], e[..2]);
            assert!((e[2] - (p[2] - t[2]).abs()).abs() <= 1e-12);
        }
    }
    let header = fs::read_to_string(plots.join("u_pred_t1.csv")).unwrap();
    assert!(header.starts_with("x,y,value\n"));

    let rows = read_spectra(&plots.join("spectra.csv")).unwrap();
    assert!(!rows.is_empty());
    for w in rows.windows(2) {
        let key = |r: &(String, usize, usize, f64)| (r.0.clone(), r.1, r.2);
        assert!(key(&w[0]) <= key(&w[1]));
    }
    let coef = fs::read_to_string(plots.join("coef_V_x.csv")).unwrap();
    assert!(coef.starts_with("pred,truth,abs_err\n"), "{coef}");
}

#[test]
fn plot_export_lists_every_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("config.toml"), tiny(ScenarioId::A1).to_toml()).unwrap();
    match export_plotdata(dir.path()) {
        Err(Error::MissingArtifacts(missing)) => {
            let names: Vec<String> = missing
                .iter()
                .map(|p| Path::new(p).file_name().unwrap().to_string_lossy().into_owned())
                .collect();
            assert_eq!(names, ["params.bin", "weights.csv", "spectra.csv", "manifest.json"]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

fn mixed_set() -> ObservationSet {
    let obs = |tau, x: [f64; 2], v: f64, sigma| Observation {
        tau,
        x: x.to_vec(),
        clean: v,
        noisy: v + sigma,
        sigma,
        group: 0,
    };
    ObservationSet {
        dims: 2,
        entries: vec![
            obs(Tau::Pointwise { t: 0.5 }, [0.1, 0.9], 0.3, 0.01),
            obs(
                Tau::Accumulative {
                    t0: 0.25,
                    t1: 0.5,
                    intervals: 6,
                },
                [0.4, 0.6],
                0.125,
                0.0,
            ),
            obs(Tau::Pointwise { t: 1.0 }, [1.0, 0.0], 1.0 / 3.0, 0.002),
        ],
        seed: None,
    }
}

#[test]
fn observation_export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("obs.csv");
    let set = mixed_set();
    write_observations(&path, &set).unwrap();
    let back = import_observations(&path, Some(&dir.path().join("copy"))).unwrap();
    assert_eq!(back.entries.len(), 3);
    for (a, b) in set.entries.iter().zip(&back.entries) {
        assert_eq!((a.tau, &a.x, a.clean, a.noisy, a.sigma), (b.tau, &b.x, b.clean, b.noisy, b.sigma));
    }
    let copy = read_observations(&dir.path().join("copy/observations.csv")).unwrap();
    assert_eq!(copy.len(), 3);
    assert_eq!(copy.entries.iter().filter(|e| e.tau.kind_name() == "accumulative").count(), 1);
}

#[test]
fn negative_sigma_is_rejected_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("obs.csv");
    fs::write(
        &path,
        "kind,x,y,t_or_window,clean,noisy,sigma\n\
         pointwise,0.1,0.2,0.5,1,1,0.1\n\
         accumulative,0.3,0.3,0:0.5:4,1,1,0\n\
         pointwise,0.5,0.5,0.5,1,1,-0.2\n",
    )
    .unwrap();
    match import_observations(&path, None) {
        Err(Error::Parse { line, message, .. }) => {
            assert_eq!(line, 4);
            assert!(message.contains("sigma"), "{message}");
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn out_of_domain_sensors_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("obs.csv");
    fs::write(
        &path,
        "kind,x,y,t_or_window,clean,noisy,sigma\n\
         pointwise,1.5,0.2,0.5,1,1,0\n\
         pointwise,0.5,0.5,0.5,1,1,0\n\
         pointwise,0.5,-0.1,0.5,1,1,0\n",
    )
    .unwrap();
    let err = import_observations(&path, None).unwrap_err().to_string();
    assert!(err.contains('2') && err.contains('4'), "{err}");
}

#[test]
fn external_mode_reports_only_the_data_misfit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(ScenarioId::A1);
    let series = solve_truth(&cfg).unwrap();
    let obs = generate_data(&cfg, &series).unwrap().observations;
    let out = run(
        &cfg,
        dir.path(),
        RunOptions {
            external: Some(obs.clone()),
            progress: None,
        },
    )
    .unwrap();
    assert!(out.metrics.fields.is_empty() && out.metrics.scalars.is_empty());
    assert!(out.metrics.source_peak.is_none());
    let misfit = out.metrics.data_misfit.unwrap();
    assert_eq!(misfit.observations, obs.len());
    assert_eq!(out.manifest.data_source, EXTERNAL);
    let again = evaluate_run(dir.path()).unwrap();
    assert_eq!(again.data_misfit.unwrap().rmse, misfit.rmse);
    assert!(again.fields.is_empty());
    // without truth there is nothing to compare against
    let files = export_plotdata(dir.path()).unwrap();
    assert!(files.iter().all(|f| !f.starts_with("err_")));
}

#[test]
fn evaluate_reproduces_the_stored_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&tiny(ScenarioId::C), dir.path(), RunOptions::default()).unwrap();
    let again = evaluate_run(dir.path()).unwrap();
    assert_eq!(out.metrics.to_csv(), again.to_csv());
    assert!(again.field("V_x").is_some() && again.scalar("V_z").is_some());
}

#[test]
fn spectra_run_writes_initial_traces() {
    let dir = tempfile::tempdir().unwrap();
    let (records, traces) = spectra_run(&tiny(ScenarioId::A1), dir.path(), false).unwrap();
    assert!(records.iter().all(|r| r.step == 0));
    assert!(traces.r > 0.0 && traces.b > 0.0 && traces.z > 0.0);
    let text = fs::read_to_string(dir.path().join("traces.csv")).unwrap();
    assert!(text.starts_with("step,trace_rr,trace_bb,trace_zz\n0,"));
    let fwd = tempfile::tempdir().unwrap();
    let (records, _) = spectra_run(&tiny(ScenarioId::A1), fwd.path(), true).unwrap();
    for block in ["i", "ux", "uy", "zz", "rr"] {
        assert!(records.iter().any(|r| r.block == block), "{block}");
    }
}
