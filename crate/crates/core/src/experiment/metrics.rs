//! Recovery metrics on uniform evaluation grids.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{truth_case, RunConfig};
use crate::error::{Error, Result};
use crate::networks::{CoefSource, Net, NetworkBundle};
use crate::pdemodel::TruthCase;
use crate::synthgen::{FieldSeries, ObservationSet};

/// Anything that can be asked for the recovered fields at a global point `(x, y[, z], t)`.
pub trait FieldModel {
    fn u(&self, p: &[f64]) -> Result<f64>;
    fn source(&self, p: &[f64]) -> Result<f64>;
    fn velocity(&self, axis: usize, p: &[f64]) -> Result<f64>;
    fn diffusion(&self, axis: usize, p: &[f64]) -> Result<f64>;
}

impl FieldModel for NetworkBundle {
    fn u(&self, p: &[f64]) -> Result<f64> {
        self.u_value(p)
    }

    fn source(&self, p: &[f64]) -> Result<f64> {
        self.source_value(p)
    }

    fn velocity(&self, axis: usize, p: &[f64]) -> Result<f64> {
        Ok(self.velocity_at(p)?[axis])
    }

    fn diffusion(&self, axis: usize, p: &[f64]) -> Result<f64> {
        Ok(self.diffusion_at(p)?[axis])
    }
}

/// Closed-form coefficients plus the solver's concentration field.
pub struct TruthModel<'a> {
    pub case: TruthCase,
    pub series: &'a FieldSeries,
}

impl FieldModel for TruthModel<'_> {
    fn u(&self, p: &[f64]) -> Result<f64> {
        let d = self.case.spatial_dims();
        let step = self.series.grid.nearest_step(p[d]);
        self.series.interpolate(step, &p[..d])
    }

    fn source(&self, p: &[f64]) -> Result<f64> {
        Ok(self.case.source(p))
    }

    fn velocity(&self, axis: usize, p: &[f64]) -> Result<f64> {
        Ok(self.case.velocity(axis, p))
    }

    fn diffusion(&self, axis: usize, p: &[f64]) -> Result<f64> {
        Ok(self.case.diffusion(axis, p))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldMetric {
    pub name: String,
    pub mae: f64,
    pub rel_l2: f64,
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarMetric {
    pub name: String,
    pub predicted: f64,
    pub truth: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeakMetric {
    pub predicted: Vec<f64>,
    pub truth: Vec<f64>,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataMisfit {
    pub observations: usize,
    pub mse: f64,
    pub rmse: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fields: Vec<FieldMetric>,
    pub scalars: Vec<ScalarMetric>,
    pub source_peak: Option<PeakMetric>,
    pub data_misfit: Option<DataMisfit>,
}

impl MetricsReport {
    pub fn field(&self, name: &str) -> Option<&FieldMetric> {
        self.fields.iter().find(|f| f.name == name)
    }

    pub fn scalar(&self, name: &str) -> Option<&ScalarMetric> {
        self.scalars.iter().find(|s| s.name == name)
    }

    /// `kind,name,quantity,value` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,name,quantity,value\n");
        for f in &self.fields {
            s.push_str(&format!("field,{},mae,{}\n", f.name, f.mae));
            s.push_str(&format!("field,{},rel_l2,{}\n", f.name, f.rel_l2));
            s.push_str(&format!("field,{},points,{}\n", f.name, f.points));
        }
        for c in &self.scalars {
            s.push_str(&format!("scalar,{},predicted,{}\n", c.name, c.predicted));
            s.push_str(&format!("scalar,{},truth,{}\n", c.name, c.truth));
            s.push_str(&format!("scalar,{},rel_error,{}\n", c.name, c.rel_error));
        }
        if let Some(p) = &self.source_peak {
            for (i, v) in p.predicted.iter().enumerate() {
                s.push_str(&format!("peak,source,predicted_{},{}\n", AXES[i], v));
            }
            for (i, v) in p.truth.iter().enumerate() {
                s.push_str(&format!("peak,source,truth_{},{}\n", AXES[i], v));
            }
            s.push_str(&format!("peak,source,distance,{}\n", p.distance));
        }
        if let Some(m) = &self.data_misfit {
            s.push_str(&format!("misfit,data,observations,{}\n", m.observations));
            s.push_str(&format!("misfit,data,mse,{}\n", m.mse));
            s.push_str(&format!("misfit,data,rmse,{}\n", m.rmse));
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = dir.join("metrics.json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}

pub(crate) const AXES: [&str; 3] = ["x", "y", "z"];

/// `(mae, rel_l2)`; a zero truth norm reports the absolute L2 instead.
pub fn error_norms(pred: &[f64], truth: &[f64]) -> (f64, f64) {
    let n = pred.len().max(1) as f64;
    let mae = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / n;
    let diff = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>().sqrt();
    let norm = truth.iter().map(|t| t * t).sum::<f64>().sqrt();
    (mae, if norm > 0.0 { diff / norm } else { diff })
}

pub fn relative_error(pred: f64, truth: f64) -> f64 {
    if truth == 0.0 {
        pred.abs()
    } else {
        ((pred - truth) / truth).abs()
    }
}

/// Uniform nodes `0, 1/(n-1), ..., 1`.
pub fn axis_nodes(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// Cartesian grid of the unit box in `dims` dimensions, first axis fastest.
pub fn spatial_grid(dims: usize, n: usize) -> Vec<Vec<f64>> {
    let nodes = axis_nodes(n);
    let total = n.pow(dims as u32);
    (0..total)
        .map(|mut k| {
            (0..dims)
                .map(|_| {
                    let v = nodes[k % n];
                    k /= n;
                    v
                })
                .collect()
        })
        .collect()
}

/// Sample points for a coefficient: every coordinate the network reads sweeps
/// a uniform axis (`n_space` nodes for space, `n_time` for time), the others sit at 0.5.
pub fn coefficient_samples(net: &Net, dims: usize, n_space: usize, n_time: usize) -> Vec<Vec<f64>> {
    let axes: Vec<(usize, Vec<f64>)> = net
        .inputs
        .iter()
        .map(|&c| (c, axis_nodes(if c == dims { n_time } else { n_space })))
        .collect();
    let total: usize = axes.iter().map(|(_, a)| a.len()).product();
    (0..total)
        .map(|mut k| {
            let mut p = vec![0.5; dims + 1];
            for (c, nodes) in &axes {
                p[*c] = nodes[k % nodes.len()];
                k /= nodes.len();
            }
            p
        })
        .collect()
}

fn at_time(x: &[f64], t: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    p.push(t);
    p
}

pub fn eval_grid_size(cfg: &RunConfig) -> usize {
    if cfg.scenario.spatial_dims() == 3 {
        cfg.eval.grid_3d
    } else {
        cfg.eval.grid_2d
    }
}

fn argmax(points: &[Vec<f64>], values: &[f64]) -> Vec<f64> {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    points[best].clone()
}

/// Compares `model` against `truth` on the evaluation grids.
pub fn evaluate(model: &dyn FieldModel, bundle_layout: &NetworkBundle, truth: &dyn FieldModel, cfg: &RunConfig) -> Result<MetricsReport> {
    let dims = cfg.scenario.spatial_dims();
    let grid = spatial_grid(dims, eval_grid_size(cfg));
    let mut report = MetricsReport::default();

    let mut field = |name: &str, pred: Vec<f64>, tru: Vec<f64>| {
        let (mae, rel_l2) = error_norms(&pred, &tru);
        report.fields.push(FieldMetric {
            name: name.to_string(),
            mae,
            rel_l2,
            points: pred.len(),
        });
    };

    let pts: Vec<Vec<f64>> = grid.iter().map(|x| at_time(x, 1.0)).collect();
    let (up, ut) = eval_pair(&pts, |p| model.u(p), |p| truth.u(p))?;
    field("u_t1", up, ut);
    let (fp, ft) = eval_pair(&pts, |p| model.source(p), |p| truth.source(p))?;
    field("f", fp.clone(), ft.clone());
    let peak_p = argmax(&grid, &fp);
    let peak_t = argmax(&grid, &ft);
    let distance = peak_p.iter().zip(&peak_t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();

    let n_space = eval_grid_size(cfg);
    let n_time = cfg.eval.time_samples;
    for (family, list, net) in [
        ("V", &bundle_layout.velocity, &bundle_layout.v_net),
        ("D", &bundle_layout.diffusion, &bundle_layout.d_net),
    ] {
        for (axis, src) in list.iter().enumerate() {
            let name = format!("{family}_{}", AXES[axis]);
            let get_m = |p: &[f64]| {
                if family == "V" {
                    model.velocity(axis, p)
                } else {
                    model.diffusion(axis, p)
                }
            };
            let get_t = |p: &[f64]| {
                if family == "V" {
                    truth.velocity(axis, p)
                } else {
                    truth.diffusion(axis, p)
                }
            };
            match src {
                CoefSource::Gamma { .. } => {
                    let p = vec![0.5; dims + 1];
                    let (pv, tv) = (get_m(&p)?, get_t(&p)?);
                    report.scalars.push(ScalarMetric {
                        name,
                        predicted: pv,
                        truth: tv,
                        rel_error: relative_error(pv, tv),
                    });
                }
                CoefSource::Net { .. } => {
                    let n = net.as_ref().expect("validated bundle");
                    let samples = coefficient_samples(n, dims, n_space, n_time);
                    let (pv, tv) = eval_pair(&samples, get_m, get_t)?;
                    field(&name, pv, tv);
                }
                CoefSource::Fixed(_) => {}
            }
        }
    }
    report.source_peak = Some(PeakMetric {
        predicted: peak_p,
        truth: peak_t,
        distance,
    });
    Ok(report)
}

fn eval_pair(
    pts: &[Vec<f64>],
    m: impl Fn(&[f64]) -> Result<f64>,
    t: impl Fn(&[f64]) -> Result<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = Vec::with_capacity(pts.len());
    let mut b = Vec::with_capacity(pts.len());
    for p in pts {
        a.push(m(p)?);
        b.push(t(p)?);
    }
    Ok((a, b))
}

/// Misfit of `tau[u]` against the noisy readings, for runs without a known truth.
pub fn data_misfit(model: &dyn FieldModel, obs: &ObservationSet) -> Result<DataMisfit> {
    let mut sum = 0.0;
    for e in &obs.entries {
        let mut pred = 0.0;
        for (t, w) in e.tau.quadrature() {
            pred += w * model.u(&at_time(&e.x, t))?;
        }
        sum += (pred - e.noisy).powi(2);
    }
    let mse = sum / obs.len().max(1) as f64;
    Ok(DataMisfit {
        observations: obs.len(),
        mse,
        rmse: mse.sqrt(),
    })
}

/// Full metrics for a trained bundle against the scenario truth.
pub fn evaluate_bundle(bundle: &NetworkBundle, series: &FieldSeries, cfg: &RunConfig) -> Result<MetricsReport> {
    let truth = TruthModel {
        case: truth_case(cfg.scenario),
        series,
    };
    evaluate(bundle, bundle, &truth, cfg)
}
