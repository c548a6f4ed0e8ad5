//! Truth generation, collocation sampling and network assembly for a scenario.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{RunConfig, ScenarioId, SensorKind};
use crate::diffcore::{ParamVector, Segment};
use crate::error::{config, Result};
use crate::networks::{gamma_init, CoefSource, Gamma, MlpSpec, Net, NetworkBundle, OutputTransform, SourceModel, Trainable};
use crate::pdemodel::{face_condition, face_normal, BoundaryBatch, BoundaryGroup, Batches, DataBatch, TruthCase, VelocityBatch};
use crate::synthgen::{
    add_noise, random_sensors, sample_accumulative, sample_pointwise, select_boundary_data, solve_forward, FieldSeries,
    ForwardProblem, Grid, ObservationSet, SensorSchedule, SensorSet,
};

pub fn truth_case(id: ScenarioId) -> TruthCase {
    match id {
        ScenarioId::A1 | ScenarioId::A2 => TruthCase::Constant2d,
        ScenarioId::B => TruthCase::Variable2d,
        ScenarioId::C => TruthCase::Height3d,
    }
}

/// Whether the scenario also observes the wind.
pub fn has_velocity_data(id: ScenarioId) -> bool {
    matches!(id, ScenarioId::B | ScenarioId::C)
}

/// Velocity components measured in scenarios with wind data.
pub fn measured_velocity_axes(id: ScenarioId) -> Vec<usize> {
    if has_velocity_data(id) {
        vec![0, 1]
    } else {
        Vec::new()
    }
}

pub fn truth_grid(cfg: &RunConfig) -> Result<Grid> {
    Grid::new(cfg.scenario.spatial_dims(), cfg.data.grid_n, cfg.data.n_steps)
}

pub fn solve_truth(cfg: &RunConfig) -> Result<FieldSeries> {
    solve_forward(&ForwardProblem::truth(truth_case(cfg.scenario)), truth_grid(cfg)?)
}

/// Everything sampled from the truth for one run.
#[derive(Clone, Debug)]
pub struct GeneratedData {
    pub sensors: SensorSet,
    /// Noisy sensor readings.
    pub observations: ObservationSet,
    /// Noiseless boundary nodes added to the data misfit.
    pub boundary_data: ObservationSet,
    pub velocity: Option<VelocityBatch>,
}

impl GeneratedData {
    /// Sensor readings followed by the boundary data.
    pub fn data_set(&self) -> Result<ObservationSet> {
        self.observations.clone().merged(self.boundary_data.clone())
    }
}

pub fn generate_data(cfg: &RunConfig, series: &FieldSeries) -> Result<GeneratedData> {
    let dims = cfg.scenario.spatial_dims();
    let seeds = cfg.seeds();
    let d = &cfg.data;
    let schedule = match d.kind {
        SensorKind::Pointwise => SensorSchedule::Pointwise { every: d.sample_every },
        SensorKind::Accumulative => SensorSchedule::Accumulative { window: d.window },
    };
    let sensors = random_sensors(dims, d.sensors, seeds.sensors, schedule);
    let clean = match d.kind {
        SensorKind::Pointwise => sample_pointwise(series, &sensors)?,
        SensorKind::Accumulative => sample_accumulative(series, &sensors)?,
    };
    let observations = add_noise(&clean, d.noise, seeds.noise)?;
    let boundary_data = select_boundary_data(series, d.beta, seeds.boundary)?;
    let velocity = if has_velocity_data(cfg.scenario) {
        Some(velocity_data(cfg, &series.grid, &sensors)?)
    } else {
        None
    };
    Ok(GeneratedData {
        sensors,
        observations,
        boundary_data,
        velocity,
    })
}

/// True wind at the sensors every `velocity_every` solver steps, with the
/// same relative noise level as the concentration readings.
fn velocity_data(cfg: &RunConfig, grid: &Grid, sensors: &SensorSet) -> Result<VelocityBatch> {
    let case = truth_case(cfg.scenario);
    let axes = measured_velocity_axes(cfg.scenario);
    let dims = grid.dims;
    let steps: Vec<usize> = (0..=grid.n_steps).step_by(cfg.data.velocity_every).collect();
    let n = sensors.locations.len() * steps.len();
    let mut points = Array2::zeros((n, dims + 1));
    let mut targets = Array2::zeros((n, axes.len()));
    let mut row = 0;
    for x in &sensors.locations {
        for &s in &steps {
            let mut p = x.clone();
            p.push(grid.time(s));
            for (c, v) in p.iter().enumerate() {
                points[[row, c]] = *v;
            }
            for (k, &a) in axes.iter().enumerate() {
                targets[[row, k]] = case.velocity(a, &p);
            }
            row += 1;
        }
    }
    if cfg.data.noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds().noise ^ 0x5eed_0001);
        for k in 0..axes.len() {
            let col = targets.column(k);
            let rms = (col.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64).sqrt();
            let sigma = cfg.data.noise * rms;
            for r in 0..n {
                let eps: f64 = StandardNormal.sample(&mut rng);
                targets[[r, k]] += sigma * eps;
            }
        }
    }
    Ok(VelocityBatch { points, axes, targets })
}

/// Latin hypercube sample of `n` points in the unit cube of dimension `dim`.
pub fn latin_hypercube(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = Array2::zeros((n, dim));
    for c in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        strata.shuffle(rng);
        for (r, s) in strata.into_iter().enumerate() {
            out[[r, c]] = (s as f64 + rng.gen::<f64>()) / n as f64;
        }
    }
    out
}

/// Interior residual points and boundary/initial points. Half the boundary
/// budget goes to `t = 0`; the rest is spread round-robin over the faces.
pub fn collocation(cfg: &RunConfig, seed: u64) -> (Array2<f64>, BoundaryBatch) {
    let dims = cfg.scenario.spatial_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let residual = latin_hypercube(cfg.train.n_residual, dims + 1, &mut rng);
    let n_init = cfg.train.n_boundary / 2;
    let n_face = cfg.train.n_boundary - n_init;
    let mut initial = latin_hypercube(n_init, dims + 1, &mut rng);
    initial.column_mut(dims).fill(0.0);

    let faces = 2 * dims;
    let mut groups: Vec<BoundaryGroup> = Vec::new();
    let mut rows: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    let free = latin_hypercube(n_face, dims + 1, &mut rng);
    for k in 0..n_face {
        let f = k % faces;
        let (axis, side) = (f / 2, f % 2);
        let mut p: Vec<f64> = free.row(k).to_vec();
        p[axis] = side as f64;
        rows.push((f, p, face_normal(dims, axis, side)));
    }
    for f in 0..faces {
        let cond = face_condition(dims, f / 2, f % 2);
        let mine: Vec<&(usize, Vec<f64>, Vec<f64>)> = rows.iter().filter(|r| r.0 == f).collect();
        let gi = match groups.iter().position(|g| g.condition == cond) {
            Some(i) => i,
            None => {
                groups.push(BoundaryGroup {
                    condition: cond,
                    points: Array2::zeros((0, dims + 1)),
                    normals: Array2::zeros((0, dims)),
                });
                groups.len() - 1
            }
        };
        let g = &mut groups[gi];
        for (_, p, n) in mine {
            g.points.push_row(ndarray::ArrayView1::from(p.as_slice())).expect("row width");
            g.normals.push_row(ndarray::ArrayView1::from(n.as_slice())).expect("row width");
        }
    }
    (residual, BoundaryBatch { groups, initial })
}

pub fn assemble_batches(cfg: &RunConfig, data: &ObservationSet, velocity: Option<VelocityBatch>) -> Result<Batches> {
    if data.dims != cfg.scenario.spatial_dims() {
        return Err(config(format!(
            "observations are {}-dimensional but scenario {} is {}-dimensional",
            data.dims,
            cfg.scenario,
            cfg.scenario.spatial_dims()
        )));
    }
    let (residual, boundary) = collocation(cfg, cfg.seeds().collocation);
    Ok(Batches {
        residual,
        boundary,
        data: DataBatch::from_observations(data)?,
        velocity,
    })
}

fn mlp(inputs: usize, net: &super::NetConfig, outputs: usize, t: OutputTransform) -> Result<MlpSpec> {
    let mut widths = vec![inputs];
    widths.extend(std::iter::repeat(net.hidden).take(net.depth));
    widths.push(outputs);
    MlpSpec::new(widths, t)
}

/// Fresh networks for the scenario's unknowns.
pub fn build_bundle(cfg: &RunConfig) -> Result<NetworkBundle> {
    let dims = cfg.scenario.spatial_dims();
    let nc = &cfg.networks;
    let seed = cfg.seeds().init;
    let all: Vec<usize> = (0..=dims).collect();
    let space: Vec<usize> = (0..dims).collect();
    let u_net = Net::new(mlp(dims + 1, &nc.u, 1, OutputTransform::None)?, all, seed)?;
    let f_net = Net::new(mlp(dims, &nc.f, 1, nc.source_transform)?, space, seed.wrapping_add(1))?;
    let t = dims;
    let (v_net, d_net, gamma, velocity, diffusion) = match cfg.scenario {
        ScenarioId::A1 | ScenarioId::A2 => {
            let g = gamma_init(2);
            let d = g.index("rho_d").expect("diffusion scalar");
            (
                None,
                None,
                Some(g),
                vec![CoefSource::Gamma { index: 0, positive: false }, CoefSource::Gamma { index: 1, positive: false }],
                vec![CoefSource::Gamma { index: d, positive: true }; 2],
            )
        }
        ScenarioId::B => {
            let v = Net::new(mlp(1, &nc.v, 2, OutputTransform::None)?, vec![t], seed.wrapping_add(2))?;
            let d = Net::new(mlp(2, &nc.d, 1, OutputTransform::Softplus)?, vec![0, 1], seed.wrapping_add(3))?;
            (
                Some(v),
                Some(d),
                None,
                vec![CoefSource::Net { output: 0 }, CoefSource::Net { output: 1 }],
                vec![CoefSource::Net { output: 0 }; 2],
            )
        }
        ScenarioId::C => {
            let v = Net::new(mlp(2, &nc.v, 2, OutputTransform::None)?, vec![2, t], seed.wrapping_add(2))?;
            let d = Net::new(mlp(2, &nc.d, 2, OutputTransform::Softplus)?, vec![0, 2], seed.wrapping_add(3))?;
            let g = Gamma {
                names: vec!["vz".into()],
                params: ParamVector::from_parts(vec![1.0], vec![Segment::new("gamma", 1, 1)])?,
            };
            (
                Some(v),
                Some(d),
                Some(g),
                vec![
                    CoefSource::Net { output: 0 },
                    CoefSource::Net { output: 1 },
                    CoefSource::Gamma { index: 0, positive: false },
                ],
                vec![
                    CoefSource::Net { output: 0 },
                    CoefSource::Net { output: 0 },
                    CoefSource::Net { output: 1 },
                ],
            )
        }
    };
    let bundle = NetworkBundle {
        spatial_dims: dims,
        u_net,
        source: SourceModel::Net(f_net),
        v_net,
        d_net,
        gamma,
        velocity,
        diffusion,
        trainable: Trainable::default(),
    };
    bundle.validate()?;
    Ok(bundle)
}

/// Bundle with the true coefficients and source fixed and only `u` trainable.
pub fn forward_bundle(cfg: &RunConfig) -> Result<NetworkBundle> {
    let case = truth_case(cfg.scenario);
    let mut b = build_bundle(cfg)?;
    b.source = SourceModel::Fixed(case.source_field());
    b.velocity = case.velocity_fields().into_iter().map(CoefSource::Fixed).collect();
    b.diffusion = case.diffusion_fields().into_iter().map(CoefSource::Fixed).collect();
    b.v_net = None;
    b.d_net = None;
    b.gamma = None;
    b.trainable = Trainable {
        u: true,
        f: false,
        v: false,
        d: false,
        gamma: false,
    };
    b.validate()?;
    Ok(b)
}
