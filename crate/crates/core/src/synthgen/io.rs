use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde_json::json;

use super::{FieldSeries, Observation, ObservationSet, Tau};
use crate::error::{Error, Result};

const AXES: [&str; 3] = ["x", "y", "z"];

fn header(dims: usize) -> Vec<String> {
    let mut h = vec!["kind".to_string()];
    h.extend(AXES[..dims].iter().map(|s| s.to_string()));
    h.extend(["t_or_window", "clean", "noisy", "sigma"].map(String::from));
    h
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.into(),
        line,
        message: e.to_string(),
    }
}

/// Writes `kind,x,y[,z],t_or_window,clean,noisy,sigma`; accumulative windows
/// are written as `t0:t1:intervals`.
pub fn write_observations(path: &Path, obs: &ObservationSet) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header(obs.dims)).map_err(|e| csv_err(path, e))?;
    for e in &obs.entries {
        let mut rec = vec![e.tau.kind_name().to_string()];
        rec.extend(e.x.iter().map(|c| c.to_string()));
        rec.push(match e.tau {
            Tau::Pointwise { t } => t.to_string(),
            Tau::Accumulative { t0, t1, intervals } => format!("{t0}:{t1}:{intervals}"),
        });
        rec.extend([e.clean, e.noisy, e.sigma].map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn parse_f64(path: &Path, line: usize, field: &str, what: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        message: format!("{what}: cannot parse {field:?} as a number"),
    })
}

/// Parses an observation file, validating the schema, `sigma >= 0` and that
/// every location lies in the closed unit box.
pub fn read_observations(path: &Path) -> Result<ObservationSet> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let head: Vec<String> = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    let dims = match head.len() {
        7 => 2,
        8 => 3,
        n => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: format!("expected 7 or 8 columns, found {n}"),
            })
        }
    };
    if head != header(dims) {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: format!("unexpected header {head:?}"),
        });
    }
    let mut entries = Vec::new();
    let mut groups: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut outside = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let x: Vec<f64> = (0..dims)
            .map(|a| parse_f64(path, line, &rec[1 + a], AXES[a]))
            .collect::<Result<_>>()?;
        let tw = rec[1 + dims].trim();
        let tau = match rec[0].trim() {
            "pointwise" => Tau::Pointwise {
                t: parse_f64(path, line, tw, "t_or_window")?,
            },
            "accumulative" => {
                let parts: Vec<&str> = tw.split(':').collect();
                if parts.len() != 3 {
                    return Err(Error::Parse {
                        path: path.into(),
                        line,
                        message: format!("window {tw:?} is not t0:t1:intervals"),
                    });
                }
                let intervals = parts[2].trim().parse::<usize>().map_err(|_| Error::Parse {
                    path: path.into(),
                    line,
                    message: format!("bad interval count {:?}", parts[2]),
                })?;
                let t0 = parse_f64(path, line, parts[0], "window start")?;
                let t1 = parse_f64(path, line, parts[1], "window end")?;
                if intervals == 0 || t1 < t0 {
                    return Err(Error::Parse {
                        path: path.into(),
                        line,
                        message: format!("empty or reversed window {tw:?}"),
                    });
                }
                Tau::Accumulative { t0, t1, intervals }
            }
            other => {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    message: format!("unknown observation kind {other:?}"),
                })
            }
        };
        let clean = parse_f64(path, line, &rec[2 + dims], "clean")?;
        let noisy = parse_f64(path, line, &rec[3 + dims], "noisy")?;
        let sigma = parse_f64(path, line, &rec[4 + dims], "sigma")?;
        if sigma.is_nan() || sigma < 0.0 {
            return Err(Error::Parse {
                path: path.into(),
                line,
                message: format!("sigma must be non-negative, got {sigma}"),
            });
        }
        let times_ok = tau.quadrature().iter().all(|(t, _)| (0.0..=1.0).contains(t));
        if x.iter().any(|c| !(0.0..=1.0).contains(c)) || !times_ok {
            outside.push(format!("line {line}: {x:?}"));
        }
        let key: Vec<u64> = x.iter().map(|c| c.to_bits()).collect();
        let next = groups.len();
        let group = *groups.entry(key).or_insert(next);
        entries.push(Observation {
            tau,
            x,
            clean,
            noisy,
            sigma,
            group,
        });
    }
    if !outside.is_empty() {
        return Err(Error::Config(format!(
            "observations outside the space-time domain: {}",
            outside.join("; ")
        )));
    }
    Ok(ObservationSet {
        dims,
        entries,
        seed: None,
    })
}

/// One CSV per written snapshot (`u_step{k}.csv`, columns `x,y[,z],u`) plus
/// `series.json` describing the grid. Every `every`-th step and the last are written.
pub fn write_series(dir: &Path, series: &FieldSeries, every: usize, extra: serde_json::Value) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = series.grid;
    let every = every.max(1);
    let mut steps: Vec<usize> = (0..=g.n_steps).step_by(every).collect();
    if steps.last() != Some(&g.n_steps) {
        steps.push(g.n_steps);
    }
    let coords: Vec<Vec<f64>> = (0..g.n_nodes()).map(|i| g.coords(i)).collect();
    let mut files = Vec::new();
    for &s in &steps {
        let name = format!("u_step{s:05}.csv");
        let path = dir.join(&name);
        let mut text = AXES[..g.dims].join(",");
        text.push_str(",u\n");
        for (c, v) in coords.iter().zip(&series.snapshots[s]) {
            for x in c {
                text.push_str(&format!("{x},"));
            }
            text.push_str(&format!("{v}\n"));
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        files.push(name);
    }
    let manifest = json!({
        "grid": g,
        "steps": steps,
        "files": files,
        "extra": extra,
    });
    let path = dir.join("series.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    files.push("series.json".into());
    Ok(files)
}
