//! End-to-end pipelines behind the command-line verbs.

use std::fs;
use std::path::Path;

use super::{
    assemble_batches, build_bundle, data_misfit, evaluate_bundle, forward_bundle, generate_data, load_bundle, load_config,
    solve_truth, unix_now, GeneratedData, MetricsReport, RunConfig, RunManifest,
};
use crate::error::{Error, Result};
use crate::networks::NetworkBundle;
use crate::ntk::{write_spectra_csv, write_weight_history, SpectrumRecord, Traces};
use crate::pdemodel::VelocityBatch;
use crate::synthgen::{read_observations, write_observations, FieldSeries, ObservationSet};
use crate::trainopt::{kernel_traces, spectra_snapshot, write_loss_history, LossReport, SpectraMode, TrainHistory, Trainer};

pub const SYNTHETIC: &str = "synthetic";
pub const EXTERNAL: &str = "external";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_velocity(path: &Path, vb: &VelocityBatch) -> Result<()> {
    let dims = vb.points.ncols() - 1;
    let mut cols: Vec<String> = super::AXES[..dims].iter().map(|s| s.to_string()).collect();
    cols.push("t".into());
    cols.extend(vb.axes.iter().map(|&a| format!("V_{}", super::AXES[a])));
    let mut text = cols.join(",");
    text.push('\n');
    for (p, v) in vb.points.rows().into_iter().zip(vb.targets.rows()) {
        let row: Vec<String> = p.iter().chain(v.iter()).map(|x| x.to_string()).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    write_text(path, &text)
}

/// `step,trace_rr,trace_bb,trace_zz[,trace_vv]`.
pub fn write_traces(path: &Path, traces: &[(usize, Traces)]) -> Result<()> {
    let with_v = traces.iter().any(|(_, t)| t.v.is_some());
    let mut text = String::from("step,trace_rr,trace_bb,trace_zz");
    if with_v {
        text.push_str(",trace_vv");
    }
    text.push('\n');
    for (s, t) in traces {
        text.push_str(&format!("{s},{},{},{}", t.r, t.b, t.z));
        if with_v {
            text.push_str(&format!(",{}", t.v.unwrap_or(f64::NAN)));
        }
        text.push('\n');
    }
    write_text(path, &text)
}

/// Solves the truth and writes the sampled data into `dir`.
pub fn generate(cfg: &RunConfig, dir: &Path) -> Result<(RunManifest, FieldSeries, GeneratedData)> {
    cfg.validate()?;
    let started = unix_now();
    create_dir(dir)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let series = solve_truth(cfg)?;
    let data = generate_data(cfg, &series)?;
    write_observations(&dir.join("observations.csv"), &data.observations)?;
    write_observations(&dir.join("boundary_data.csv"), &data.boundary_data)?;
    if let Some(vb) = &data.velocity {
        write_velocity(&dir.join("velocity.csv"), vb)?;
    }
    let mut manifest = RunManifest::new(cfg, SYNTHETIC, started)?;
    manifest.write(dir)?;
    Ok((manifest, series, data))
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Train on these readings instead of synthetic data; metrics become a data misfit.
    pub external: Option<ObservationSet>,
    pub progress: Option<Box<dyn FnMut(&LossReport) + 'a>>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub metrics: MetricsReport,
    pub history: TrainHistory,
    pub bundle: NetworkBundle,
}

/// Truth, observations, training, metrics and manifest in one directory.
pub fn run(cfg: &RunConfig, dir: &Path, opts: RunOptions<'_>) -> Result<RunOutcome> {
    cfg.validate()?;
    let started = unix_now();
    create_dir(dir)?;
    let (series, sensors, data_set, velocity, source) = match opts.external {
        Some(obs) => {
            write_text(&dir.join("config.toml"), &cfg.to_toml())?;
            write_observations(&dir.join("observations.csv"), &obs)?;
            (None, obs.clone(), obs, None, EXTERNAL)
        }
        None => {
            let (_, series, data) = generate(cfg, dir)?;
            let merged = data.data_set()?;
            (Some(series), data.observations, merged, data.velocity, SYNTHETIC)
        }
    };
    let batches = assemble_batches(cfg, &data_set, velocity)?;
    let bundle = build_bundle(cfg)?;
    let mut tc = cfg.train.clone();
    tc.seed = tc.seed.wrapping_add(cfg.seeds().train);
    let mut trainer = Trainer::new(bundle, &batches, tc, SpectraMode::Inverse)?;
    trainer.checkpoint_dir = Some(dir.join("checkpoints"));
    if let Some(cb) = opts.progress {
        trainer.on_report(cb);
    }
    trainer.run()?;
    let bundle = trainer.bundle;
    let history = trainer.history;

    bundle.save_params(&dir.join("params.bin"))?;
    write_loss_history(&dir.join("loss_history.csv"), &history.reports)?;
    write_weight_history(&dir.join("weights.csv"), &history.weights)?;
    write_traces(&dir.join("traces.csv"), &history.traces)?;
    write_spectra_csv(&dir.join("spectra.csv"), &history.spectra)?;

    let mut metrics = match &series {
        Some(s) => evaluate_bundle(&bundle, s, cfg)?,
        None => MetricsReport::default(),
    };
    metrics.data_misfit = Some(data_misfit(&bundle, &sensors)?);
    metrics.write(dir)?;

    let mut manifest = RunManifest::new(cfg, source, started)?;
    manifest.write(dir)?;
    Ok(RunOutcome {
        manifest,
        metrics,
        history,
        bundle,
    })
}

/// Recomputes metrics for a finished run directory.
pub fn evaluate_run(dir: &Path) -> Result<MetricsReport> {
    super::require_artifacts(dir, &["config.toml", "params.bin", "observations.csv", "manifest.json"])?;
    let cfg = load_config(dir)?;
    let bundle = load_bundle(dir, &cfg)?;
    let mut manifest = RunManifest::read(dir)?;
    let obs = read_observations(&dir.join("observations.csv"))?;
    let mut metrics = if manifest.data_source == SYNTHETIC {
        evaluate_bundle(&bundle, &solve_truth(&cfg)?, &cfg)?
    } else {
        MetricsReport::default()
    };
    metrics.data_misfit = Some(data_misfit(&bundle, &obs)?);
    metrics.write(dir)?;
    manifest.write(dir)?;
    Ok(metrics)
}

/// Kernel spectra and traces at initialization; `forward` fixes the true
/// coefficients and source and splits the boundary kernel by face axis.
pub fn spectra_run(cfg: &RunConfig, dir: &Path, forward: bool) -> Result<(Vec<SpectrumRecord>, Traces)> {
    cfg.validate()?;
    let started = unix_now();
    create_dir(dir)?;
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let series = solve_truth(cfg)?;
    let data = generate_data(cfg, &series)?;
    let batches = assemble_batches(cfg, &data.data_set()?, data.velocity.clone())?;
    let (bundle, mode) = if forward {
        (forward_bundle(cfg)?, SpectraMode::Forward)
    } else {
        (build_bundle(cfg)?, SpectraMode::Inverse)
    };
    let seed = cfg.train.seed.wrapping_add(cfg.seeds().train);
    let records = spectra_snapshot(&bundle, &batches, mode, 0, cfg.train.spectrum_rows, seed)?;
    let traces = kernel_traces(&bundle, &batches, cfg.train.ntk_residual_rows, seed)?;
    write_spectra_csv(&dir.join("spectra.csv"), &records)?;
    write_traces(&dir.join("traces.csv"), &[(0, traces)])?;
    let mut manifest = RunManifest::new(cfg, SYNTHETIC, started)?;
    manifest.write(dir)?;
    Ok((records, traces))
}

/// Validates an observation file and copies it into `dir` as `observations.csv`.
pub fn import_observations(path: &Path, dir: Option<&Path>) -> Result<ObservationSet> {
    let obs = read_observations(path)?;
    if let Some(dir) = dir {
        create_dir(dir)?;
        write_observations(&dir.join("observations.csv"), &obs)?;
    }
    Ok(obs)
}
