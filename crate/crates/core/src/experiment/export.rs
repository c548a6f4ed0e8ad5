//! Run manifest and plot-data export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{
    build_bundle, coefficient_samples, eval_grid_size, solve_truth, spatial_grid, truth_case, FieldModel, RunConfig,
    Seeds, TruthModel, AXES,
};
use crate::error::{Error, Result};
use crate::networks::{CoefSource, NetworkBundle};
use crate::pdemodel as truth;
use crate::synthgen::Grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Provenance record written as `manifest.json` in every run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub scenario: String,
    /// SHA-256 of the effective config TOML.
    pub scenario_hash: String,
    /// `synthetic` or `external`.
    pub data_source: String,
    pub master_seed: u64,
    pub seeds: Seeds,
    pub version: String,
    pub grid: Grid,
    pub eval_grid: usize,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub constants: BTreeMap<String, Value>,
    pub schemas: BTreeMap<String, String>,
    pub files: Vec<FileEntry>,
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Truth constants of every scenario, as recorded in manifests and printed at run start.
pub fn truth_constants() -> BTreeMap<String, Value> {
    let mut m = BTreeMap::new();
    m.insert("velocity_constant_2d".into(), json!(truth::VELOCITY_CONSTANT));
    m.insert("diffusion_constant_2d".into(), json!(truth::DIFFUSION_CONSTANT));
    m.insert("source_2d_mu".into(), json!(truth::SOURCE_2D_MU));
    m.insert("source_2d_width".into(), json!(truth::SOURCE_2D_WIDTH));
    m.insert("source_3d_centers".into(), json!(truth::SOURCE_3D_CENTERS));
    m.insert("source_3d_rates".into(), json!(truth::SOURCE_3D_RATES));
    m.insert("source_3d_sigmas".into(), json!(truth::SOURCE_3D_SIGMAS));
    m.insert("wind_exponent".into(), json!(truth::WIND_EXPONENT));
    m.insert("wind_reference_height".into(), json!(truth::WIND_REFERENCE_HEIGHT));
    m.insert("boundary_layer_height".into(), json!(truth::BOUNDARY_LAYER_HEIGHT));
    m.insert("particle_density".into(), json!(truth::PARTICLE_DENSITY));
    m.insert("gravity".into(), json!(truth::GRAVITY));
    m.insert("particle_diameter".into(), json!(truth::PARTICLE_DIAMETER));
    m.insert("air_viscosity".into(), json!(truth::AIR_VISCOSITY));
    m.insert("settling_velocity_stokes".into(), json!(truth::settling_velocity()));
    m.insert("settling_velocity_quoted".into(), json!(truth::SETTLING_VELOCITY_QUOTED));
    m
}

fn schemas() -> BTreeMap<String, String> {
    let s = |a: &str, b: &str| (a.to_string(), b.to_string());
    BTreeMap::from([
        s("config.toml", "effective run configuration"),
        s("observations.csv", "kind,x,y[,z],t_or_window,clean,noisy,sigma (window as t0:t1:intervals)"),
        s("boundary_data.csv", "same columns as observations.csv"),
        s("velocity.csv", "x,y[,z],t,V_<axis> per measured axis"),
        s("params.bin", "JSON header line then little-endian f64 parameters"),
        s("loss_history.csv", "step,L_r,L_b,L_z,L_v,lambda_r,lambda_b,lambda_z,lambda_v,total"),
        s("weights.csv", "step,lambda_r,lambda_b,lambda_z[,lambda_v]; step is the first step using the weights"),
        s("traces.csv", "step,trace_rr,trace_bb,trace_zz[,trace_vv]"),
        s("spectra.csv", "block,index,eigenvalue,step sorted by step, block, index"),
        s("metrics.csv", "kind,name,quantity,value"),
        s("plots/u_pred_t1.csv", "x,y[,z],value: predicted u at t=1 on the evaluation grid"),
        s("plots/u_true_t1.csv", "x,y[,z],value: solver u at t=1"),
        s("plots/err_u_t1.csv", "x,y[,z],value: |pred - truth| of u at t=1"),
        s("plots/f_pred.csv", "x,y[,z],value: predicted source"),
        s("plots/f_true.csv", "x,y[,z],value: true source"),
        s("plots/err_f.csv", "x,y[,z],value: |pred - truth| of the source"),
        s("plots/coef_<V|D>_<axis>.csv", "coordinates read by the coefficient, pred, truth, abs_err"),
        s("plots/lambda_history.csv", "copy of weights.csv"),
        s("plots/spectra.csv", "block,index,step,eigenvalue sorted by block, index, step"),
    ])
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn inventory(dir: &Path, rel: &Path, out: &mut Vec<FileEntry>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        let name = rel.join(p.file_name().expect("entry name"));
        if p.is_dir() {
            inventory(&p, &name, out)?;
        } else if name != Path::new("manifest.json") {
            let meta = fs::metadata(&p).map_err(|e| Error::io(&p, e))?;
            out.push(FileEntry {
                path: name.to_string_lossy().replace('\\', "/"),
                sha256: sha256_file(&p)?,
                bytes: meta.len(),
            });
        }
    }
    Ok(())
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, data_source: &str, started_unix: u64) -> Result<Self> {
        Ok(Self {
            scenario: cfg.scenario.to_string(),
            scenario_hash: cfg.hash(),
            data_source: data_source.to_string(),
            master_seed: cfg.seed,
            seeds: cfg.seeds(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            grid: super::truth_grid(cfg)?,
            eval_grid: eval_grid_size(cfg),
            started_unix,
            finished_unix: started_unix,
            constants: truth_constants(),
            schemas: schemas(),
            files: Vec::new(),
        })
    }

    /// Re-inventories `dir` and writes `manifest.json`.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        self.files.clear();
        inventory(dir, Path::new(""), &mut self.files)?;
        self.finished_unix = unix_now();
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Files whose digest no longer matches.
    pub fn verify(&self, dir: &Path) -> Result<Vec<String>> {
        let mut bad = Vec::new();
        for f in &self.files {
            let p = dir.join(&f.path);
            if !p.exists() || sha256_file(&p)? != f.sha256 {
                bad.push(f.path.clone());
            }
        }
        Ok(bad)
    }
}

/// Fails with every absent name at once.
pub fn require_artifacts(dir: &Path, names: &[&str]) -> Result<()> {
    let missing: Vec<String> = names
        .iter()
        .filter(|n| !dir.join(n).is_file())
        .map(|n| dir.join(n).display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingArtifacts(missing))
    }
}

pub fn load_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join("config.toml");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    RunConfig::from_toml(&text)
}

/// Trained bundle stored in a run directory.
pub fn load_bundle(dir: &Path, cfg: &RunConfig) -> Result<NetworkBundle> {
    let mut b = build_bundle(cfg)?;
    b.load_params(&dir.join("params.bin"))?;
    Ok(b)
}

fn write_grid_csv(path: &Path, dims: usize, points: &[Vec<f64>], values: &[f64]) -> Result<()> {
    let mut text = AXES[..dims].join(",");
    text.push_str(",value\n");
    for (p, v) in points.iter().zip(values) {
        for c in &p[..dims] {
            text.push_str(&format!("{c},"));
        }
        text.push_str(&format!("{v}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

const COORD_NAMES: [&str; 4] = ["x", "y", "z", "t"];

/// Writes gridded plot data under `run_dir/plots` and refreshes the manifest.
/// Returns the written file names.
pub fn export_plotdata(run_dir: &Path) -> Result<Vec<String>> {
    require_artifacts(
        run_dir,
        &["config.toml", "params.bin", "weights.csv", "spectra.csv", "manifest.json"],
    )?;
    let cfg = load_config(run_dir)?;
    let bundle = load_bundle(run_dir, &cfg)?;
    let mut manifest = RunManifest::read(run_dir)?;
    let out = run_dir.join("plots");
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let dims = cfg.scenario.spatial_dims();
    let mut written = Vec::new();

    let grid: Vec<Vec<f64>> = spatial_grid(dims, eval_grid_size(&cfg))
        .into_iter()
        .map(|mut x| {
            x.push(1.0);
            x
        })
        .collect();
    let eval = |f: &dyn Fn(&[f64]) -> Result<f64>| grid.iter().map(|p| f(p)).collect::<Result<Vec<f64>>>();
    let u_pred = eval(&|p| bundle.u(p))?;
    let f_pred = eval(&|p| bundle.source(p))?;
    let mut files: Vec<(&str, Vec<f64>)> = vec![("u_pred_t1.csv", u_pred.clone()), ("f_pred.csv", f_pred.clone())];

    let synthetic = manifest.data_source == "synthetic";
    let series = if synthetic { Some(solve_truth(&cfg)?) } else { None };
    if let Some(series) = &series {
        let truth = TruthModel {
            case: truth_case(cfg.scenario),
            series,
        };
        let u_true = eval(&|p| truth.u(p))?;
        let f_true = eval(&|p| truth.source(p))?;
        let err = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect::<Vec<f64>>();
        files.push(("err_u_t1.csv", err(&u_pred, &u_true)));
        files.push(("err_f.csv", err(&f_pred, &f_true)));
        files.push(("u_true_t1.csv", u_true));
        files.push(("f_true.csv", f_true));

        for (family, list, net) in [
            ("V", &bundle.velocity, &bundle.v_net),
            ("D", &bundle.diffusion, &bundle.d_net),
        ] {
            for (axis, src) in list.iter().enumerate() {
                let samples = match src {
                    CoefSource::Net { .. } => {
                        let n = net.as_ref().expect("validated bundle");
                        coefficient_samples(n, dims, eval_grid_size(&cfg), cfg.eval.time_samples)
                    }
                    CoefSource::Gamma { .. } => vec![vec![0.5; dims + 1]],
                    CoefSource::Fixed(_) => continue,
                };
                let read: Vec<usize> = match src {
                    CoefSource::Net { .. } => net.as_ref().expect("validated bundle").inputs.clone(),
                    _ => Vec::new(),
                };
                let name = format!("coef_{family}_{}.csv", AXES[axis]);
                let mut text: Vec<String> = read.iter().map(|&c| COORD_NAMES[c].to_string()).collect();
                text.extend(["pred", "truth", "abs_err"].map(String::from));
                let mut body = text.join(",");
                body.push('\n');
                for p in &samples {
                    let (pv, tv) = if family == "V" {
                        (bundle.velocity(axis, p)?, truth.velocity(axis, p)?)
                    } else {
                        (bundle.diffusion(axis, p)?, truth.diffusion(axis, p)?)
                    };
                    for &c in &read {
                        body.push_str(&format!("{},", p[c]));
                    }
                    body.push_str(&format!("{pv},{tv},{}\n", (pv - tv).abs()));
                }
                let path = out.join(&name);
                fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
                written.push(name);
            }
        }
    }
    for (name, values) in files {
        write_grid_csv(&out.join(name), dims, &grid, &values)?;
        written.push(name.to_string());
    }

    let lambda = out.join("lambda_history.csv");
    fs::copy(run_dir.join("weights.csv"), &lambda).map_err(|e| Error::io(&lambda, e))?;
    written.push("lambda_history.csv".into());

    let spectra = read_spectra(&run_dir.join("spectra.csv"))?;
    let mut sorted = spectra;
    sorted.sort_by(|a, b| (&a.0, a.1, a.2).cmp(&(&b.0, b.1, b.2)));
    let mut text = String::from("block,index,step,eigenvalue\n");
    for (block, index, step, ev) in sorted {
        text.push_str(&format!("{block},{index},{step},{ev}\n"));
    }
    let path = out.join("spectra.csv");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    written.push("spectra.csv".into());

    manifest.write(run_dir)?;
    written.sort();
    Ok(written)
}

/// `(block, index, step, eigenvalue)` rows of a spectra file; columns are
/// located by header name.
pub fn read_spectra(path: &Path) -> Result<Vec<(String, usize, usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let head: Vec<&str> = lines.next().unwrap_or_default().split(',').map(str::trim).collect();
    let col = |name: &str| {
        head.iter().position(|h| *h == name).ok_or_else(|| Error::Parse {
            path: path.into(),
            line: 1,
            message: format!("missing column {name}"),
        })
    };
    let (cb, ci, cs, ce) = (col("block")?, col("index")?, col("step")?, col("eigenvalue")?);
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let bad = |what: &str| Error::Parse {
            path: path.into(),
            line: i + 2,
            message: what.to_string(),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != head.len() {
            return Err(bad("wrong number of fields"));
        }
        out.push((
            f[cb].to_string(),
            f[ci].parse().map_err(|_| bad("bad index"))?,
            f[cs].parse().map_err(|_| bad("bad step"))?,
            f[ce].parse().map_err(|_| bad("bad eigenvalue"))?,
        ));
    }
    Ok(out)
}
