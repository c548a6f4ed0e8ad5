//! Feedforward tanh networks for the concentration, source, velocity and
//! diffusion fields, plus the scalar coefficient block used when velocity and
//! diffusion are unknown constants.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{inverse_softplus, softplus, ParamVector, Segment};
use crate::error::{config, structural, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutputTransform {
    #[default]
    None,
    Softplus,
    Square,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub output_transform: OutputTransform,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, output_transform: OutputTransform) -> Result<Self> {
        let spec = Self {
            widths,
            output_transform,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `inputs -> hidden x depth -> outputs`.
    pub fn uniform(inputs: usize, hidden: usize, depth: usize, outputs: usize, t: OutputTransform) -> Self {
        let mut widths = vec![inputs];
        widths.extend(std::iter::repeat(hidden).take(depth));
        widths.push(outputs);
        Self {
            widths,
            output_transform: t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(config("an MLP needs at least input and output widths"));
        }
        if self.widths.contains(&0) {
            return Err(config("layer widths must be at least 1"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn layout(&self) -> Vec<Segment> {
        self.widths
            .windows(2)
            .enumerate()
            .flat_map(|(l, w)| {
                [
                    Segment::new(format!("W{l}"), w[0], w[1]),
                    Segment::new(format!("b{l}"), 1, w[1]),
                ]
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.layout().iter().map(Segment::size).sum()
    }

    pub(crate) fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.layout() != self.layout().as_slice() {
            return Err(structural("parameter layout does not match network widths"));
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_mlp(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(spec.n_params());
    for w in spec.widths.windows(2) {
        let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
        for _ in 0..w[0] * w[1] {
            data.push(rng.gen_range(-bound..=bound));
        }
        data.extend(std::iter::repeat(0.0).take(w[1]));
    }
    ParamVector::from_parts(data, spec.layout()).expect("layout built from spec")
}

/// `b_j + sum_i a_i W_ij`, accumulated in index order.
pub(crate) fn affine_unit(a: &[f64], w: &Array2<f64>, b: &Array2<f64>, j: usize) -> f64 {
    let mut acc = 0.0;
    for (i, ai) in a.iter().enumerate() {
        acc += ai * w[[i, j]];
    }
    acc + b[[0, j]]
}

pub fn mlp_eval(spec: &MlpSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != spec.input_dim() {
        return Err(structural(format!(
            "input has {} coordinates, network expects {}",
            x.len(),
            spec.input_dim()
        )));
    }
    spec.check_params(params)?;
    let mats = params.unpack();
    let n_layers = spec.widths.len() - 1;
    let mut a = x.to_vec();
    for l in 0..n_layers {
        let (w, b) = (&mats[2 * l], &mats[2 * l + 1]);
        let z: Vec<f64> = (0..w.ncols()).map(|j| affine_unit(&a, w, b, j)).collect();
        a = if l + 1 < n_layers {
            z.into_iter().map(f64::tanh).collect()
        } else {
            z
        };
    }
    Ok(match spec.output_transform {
        OutputTransform::None => a,
        OutputTransform::Softplus => a.into_iter().map(softplus).collect(),
        OutputTransform::Square => a.into_iter().map(|v| v * v).collect(),
    })
}

/// Batched plain evaluation of many points; rows of `x` are points.
pub fn mlp_eval_batch(spec: &MlpSpec, params: &ParamVector, x: &Array2<f64>) -> Result<Array2<f64>> {
    if x.ncols() != spec.input_dim() {
        return Err(structural("input width does not match network"));
    }
    spec.check_params(params)?;
    let mats = params.unpack();
    let n_layers = spec.widths.len() - 1;
    let mut a = x.clone();
    for l in 0..n_layers {
        let z = a.dot(&mats[2 * l]) + &mats[2 * l + 1];
        a = if l + 1 < n_layers { z.mapv(f64::tanh) } else { z };
    }
    Ok(match spec.output_transform {
        OutputTransform::None => a,
        OutputTransform::Softplus => a.mapv(softplus),
        OutputTransform::Square => a.mapv(|v| v * v),
    })
}

/// A network together with the global coordinates it reads.
///
/// Global coordinates are `(x, y[, z], t)`; `inputs` lists indices into that tuple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Net {
    pub spec: MlpSpec,
    pub params: ParamVector,
    pub inputs: Vec<usize>,
}

impl Net {
    pub fn new(spec: MlpSpec, inputs: Vec<usize>, seed: u64) -> Result<Self> {
        spec.validate()?;
        if inputs.len() != spec.input_dim() {
            return Err(config(format!(
                "network reads {} coordinates but has input width {}",
                inputs.len(),
                spec.input_dim()
            )));
        }
        let params = init_mlp(&spec, seed);
        Ok(Self {
            spec,
            params,
            inputs,
        })
    }

    /// Projects a global point onto this network's inputs.
    pub fn local(&self, global: &[f64]) -> Vec<f64> {
        self.inputs.iter().map(|&i| global[i]).collect()
    }

    pub fn eval(&self, global: &[f64]) -> Result<Vec<f64>> {
        mlp_eval(&self.spec, &self.params, &self.local(global))
    }

    /// Local input index reading global coordinate `g`, if any.
    pub fn local_index(&self, g: usize) -> Option<usize> {
        self.inputs.iter().position(|&i| i == g)
    }
}

/// A closed-form field of the global coordinates returning the value and its
/// gradient with respect to every global coordinate.
#[derive(Clone)]
pub struct FixedField(pub Arc<dyn Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync>);

impl FixedField {
    pub fn new(f: impl Fn(&[f64]) -> (f64, Vec<f64>) + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }

    pub fn constant(c: f64, n_coords: usize) -> Self {
        Self::new(move |_| (c, vec![0.0; n_coords]))
    }

    pub fn eval(&self, p: &[f64]) -> (f64, Vec<f64>) {
        (self.0)(p)
    }
}

impl fmt::Debug for FixedField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("FixedField(..)")
    }
}

/// Where one velocity or diffusion component comes from.
#[derive(Clone, Debug)]
pub enum CoefSource {
    /// Entry of the scalar block; `positive` routes it through softplus.
    Gamma { index: usize, positive: bool },
    /// Output column of the velocity or diffusion network.
    Net { output: usize },
    Fixed(FixedField),
}

#[derive(Clone, Debug)]
pub enum SourceModel {
    Net(Net),
    Fixed(FixedField),
}

/// Named scalar coefficients (velocity components and raw diffusion).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gamma {
    pub names: Vec<String>,
    pub params: ParamVector,
}

impl Gamma {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.params.as_slice()[i])
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Constant-coefficient initialization: every velocity component 1.0 and the
/// diffusion stored as `rho_d` with `softplus(rho_d) = 1.0`.
pub fn gamma_init(spatial_dims: usize) -> Gamma {
    let axes = ["vx", "vy", "vz"];
    let mut names: Vec<String> = axes[..spatial_dims].iter().map(|s| s.to_string()).collect();
    let mut data = vec![1.0; spatial_dims];
    names.push("rho_d".into());
    data.push(inverse_softplus(1.0));
    let n = data.len();
    Gamma {
        names,
        params: ParamVector::from_parts(data, vec![Segment::new("gamma", 1, n)]).expect("sized"),
    }
}

/// Which parameter blocks an optimizer may move.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainable {
    pub u: bool,
    pub f: bool,
    pub v: bool,
    pub d: bool,
    pub gamma: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self {
            u: true,
            f: true,
            v: true,
            d: true,
            gamma: true,
        }
    }
}

/// Every unknown of one inverse problem.
#[derive(Clone, Debug)]
pub struct NetworkBundle {
    pub spatial_dims: usize,
    pub u_net: Net,
    pub source: SourceModel,
    pub v_net: Option<Net>,
    pub d_net: Option<Net>,
    pub gamma: Option<Gamma>,
    /// One entry per spatial axis.
    pub velocity: Vec<CoefSource>,
    /// One entry per spatial axis (isotropic diffusion repeats the same source).
    pub diffusion: Vec<CoefSource>,
    pub trainable: Trainable,
}

/// Identifies a parameter block in the flat ordering `u, f, v, d, gamma`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    U,
    F,
    V,
    D,
    Gamma,
}

impl Block {
    pub fn name(self) -> &'static str {
        match self {
            Block::U => "u",
            Block::F => "f",
            Block::V => "v",
            Block::D => "d",
            Block::Gamma => "gamma",
        }
    }
}

impl NetworkBundle {
    pub fn n_coords(&self) -> usize {
        self.spatial_dims + 1
    }

    pub fn validate(&self) -> Result<()> {
        let sd = self.spatial_dims;
        if !(2..=3).contains(&sd) {
            return Err(config("spatial dimension must be 2 or 3"));
        }
        if self.velocity.len() != sd || self.diffusion.len() != sd {
            return Err(config("need one velocity and one diffusion source per axis"));
        }
        let nets = [Some(&self.u_net), self.v_net.as_ref(), self.d_net.as_ref()];
        for net in nets.into_iter().flatten() {
            if net.inputs.iter().any(|&i| i > sd) {
                return Err(config("network reads a coordinate outside (x, y[, z], t)"));
            }
        }
        if let SourceModel::Net(f) = &self.source {
            if f.inputs.iter().any(|&i| i > sd) {
                return Err(config("source network reads an unknown coordinate"));
            }
        }
        if self.u_net.local_index(sd).is_none() {
            return Err(config("u network must read time"));
        }
        for (which, list, net) in [
            ("velocity", &self.velocity, &self.v_net),
            ("diffusion", &self.diffusion, &self.d_net),
        ] {
            for c in list {
                match c {
                    CoefSource::Gamma { index, .. } => {
                        let g = self
                            .gamma
                            .as_ref()
                            .ok_or_else(|| config(format!("{which} refers to a missing scalar block")))?;
                        if *index >= g.params.len() {
                            return Err(config(format!("{which} scalar index out of range")));
                        }
                    }
                    CoefSource::Net { output } => {
                        let n = net
                            .as_ref()
                            .ok_or_else(|| config(format!("{which} refers to a missing network")))?;
                        if *output >= n.spec.output_dim() {
                            return Err(config(format!("{which} network output out of range")));
                        }
                    }
                    CoefSource::Fixed(_) => {}
                }
            }
        }
        Ok(())
    }

    /// Trainable blocks in flat order.
    pub fn blocks(&self) -> Vec<(Block, &ParamVector)> {
        let mut out = Vec::new();
        if self.trainable.u {
            out.push((Block::U, &self.u_net.params));
        }
        if let (true, SourceModel::Net(f)) = (self.trainable.f, &self.source) {
            out.push((Block::F, &f.params));
        }
        if let (true, Some(v)) = (self.trainable.v, &self.v_net) {
            out.push((Block::V, &v.params));
        }
        if let (true, Some(d)) = (self.trainable.d, &self.d_net) {
            out.push((Block::D, &d.params));
        }
        if let (true, Some(g)) = (self.trainable.gamma, &self.gamma) {
            out.push((Block::Gamma, &g.params));
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<&mut ParamVector> {
        let mut out = Vec::new();
        if self.trainable.u {
            out.push(&mut self.u_net.params);
        }
        if let (true, SourceModel::Net(f)) = (self.trainable.f, &mut self.source) {
            out.push(&mut f.params);
        }
        if let (true, Some(v)) = (self.trainable.v, &mut self.v_net) {
            out.push(&mut v.params);
        }
        if let (true, Some(d)) = (self.trainable.d, &mut self.d_net) {
            out.push(&mut d.params);
        }
        if let (true, Some(g)) = (self.trainable.gamma, &mut self.gamma) {
            out.push(&mut g.params);
        }
        out
    }

    /// `(block, start, len)` ranges inside the flat vector.
    pub fn block_ranges(&self) -> Vec<(Block, usize, usize)> {
        let mut start = 0;
        self.blocks()
            .into_iter()
            .map(|(b, p)| {
                let r = (b, start, p.len());
                start += p.len();
                r
            })
            .collect()
    }

    pub fn n_trainable(&self) -> usize {
        self.blocks().iter().map(|(_, p)| p.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_trainable());
        for (_, p) in self.blocks() {
            v.extend_from_slice(p.as_slice());
        }
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_trainable() {
            return Err(structural(format!(
                "flat vector has {} entries, bundle has {} trainable",
                flat.len(),
                self.n_trainable()
            )));
        }
        let mut offset = 0;
        for p in self.blocks_mut() {
            let n = p.len();
            p.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Effective value of a scalar coefficient after its transform.
    pub fn gamma_value(&self, index: usize, positive: bool) -> Option<f64> {
        let g = self.gamma.as_ref()?;
        let raw = *g.params.as_slice().get(index)?;
        Some(if positive { softplus(raw) } else { raw })
    }

    /// Evaluates the source at a global point (time ignored by spatial nets).
    pub fn source_value(&self, p: &[f64]) -> Result<f64> {
        match &self.source {
            SourceModel::Net(f) => Ok(f.eval(p)?[0]),
            SourceModel::Fixed(ff) => Ok(ff.eval(p).0),
        }
    }

    fn coef_value(&self, c: &CoefSource, net: &Option<Net>, p: &[f64]) -> Result<f64> {
        match c {
            CoefSource::Gamma { index, positive } => self
                .gamma_value(*index, *positive)
                .ok_or_else(|| config("missing scalar coefficient")),
            CoefSource::Net { output } => {
                let n = net.as_ref().ok_or_else(|| config("missing coefficient network"))?;
                Ok(n.eval(p)?[*output])
            }
            CoefSource::Fixed(ff) => Ok(ff.eval(p).0),
        }
    }

    pub fn velocity_at(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.velocity
            .iter()
            .map(|c| self.coef_value(c, &self.v_net, p))
            .collect()
    }

    pub fn diffusion_at(&self, p: &[f64]) -> Result<Vec<f64>> {
        self.diffusion
            .iter()
            .map(|c| self.coef_value(c, &self.d_net, p))
            .collect()
    }

    pub fn u_value(&self, p: &[f64]) -> Result<f64> {
        Ok(self.u_net.eval(p)?[0])
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: one JSON header line, then little-endian f64 payload.

#[derive(Debug, Serialize, Deserialize)]
struct BlobHeader {
    format: String,
    entries: Vec<BlobEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<MlpSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inputs: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
    pub layout: Vec<Segment>,
}

const BLOB_FORMAT: &str = "climath-params-v1";

/// Writes named parameter vectors as a header line plus raw f64 payload.
pub fn write_blob(path: &Path, entries: &[(BlobEntry, &[f64])]) -> Result<()> {
    let header = BlobHeader {
        format: BLOB_FORMAT.into(),
        entries: entries.iter().map(|(e, _)| e.clone()).collect(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    for (_, data) in entries {
        for v in *data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path) -> Result<Vec<(BlobEntry, Vec<f64>)>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let mut line = String::new();
    r.read_line(&mut line).map_err(|e| Error::io(path, e))?;
    let header: BlobHeader = serde_json::from_str(line.trim_end()).map_err(|e| Error::Parse {
        path: path.into(),
        line: 1,
        message: e.to_string(),
    })?;
    if header.format != BLOB_FORMAT {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            message: format!("unknown format {}", header.format),
        });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| Error::io(path, e))?;
    let total: usize = header
        .entries
        .iter()
        .map(|e| e.layout.iter().map(Segment::size).sum::<usize>())
        .sum();
    if payload.len() != total * 8 {
        return Err(Error::Parse {
            path: path.into(),
            line: 2,
            message: format!("payload has {} bytes, header promises {}", payload.len(), total * 8),
        });
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    Ok(header
        .entries
        .into_iter()
        .map(|e| {
            let n = e.layout.iter().map(Segment::size).sum();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            (e, data)
        })
        .collect())
}

fn net_entry(name: &str, net: &Net) -> BlobEntry {
    BlobEntry {
        name: name.into(),
        spec: Some(net.spec.clone()),
        inputs: Some(net.inputs.clone()),
        names: None,
        layout: net.params.layout().to_vec(),
    }
}

impl NetworkBundle {
    /// Saves every network and the scalar block (trainable or not).
    pub fn save_params(&self, path: &Path) -> Result<()> {
        let mut entries: Vec<(BlobEntry, &[f64])> = vec![(net_entry("u", &self.u_net), self.u_net.params.as_slice())];
        if let SourceModel::Net(f) = &self.source {
            entries.push((net_entry("f", f), f.params.as_slice()));
        }
        if let Some(v) = &self.v_net {
            entries.push((net_entry("v", v), v.params.as_slice()));
        }
        if let Some(d) = &self.d_net {
            entries.push((net_entry("d", d), d.params.as_slice()));
        }
        if let Some(g) = &self.gamma {
            entries.push((
                BlobEntry {
                    name: "gamma".into(),
                    spec: None,
                    inputs: None,
                    names: Some(g.names.clone()),
                    layout: g.params.layout().to_vec(),
                },
                g.params.as_slice(),
            ));
        }
        write_blob(path, &entries)
    }

    /// Loads parameters saved by [`Self::save_params`] into a bundle of the same structure.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let blob = read_blob(path)?;
        for (entry, data) in blob {
            let target: &mut ParamVector = match entry.name.as_str() {
                "u" => &mut self.u_net.params,
                "f" => match &mut self.source {
                    SourceModel::Net(f) => &mut f.params,
                    SourceModel::Fixed(_) => return Err(structural("checkpoint has a source network, bundle does not")),
                },
                "v" => &mut self.v_net.as_mut().ok_or_else(|| structural("bundle has no velocity network"))?.params,
                "d" => &mut self.d_net.as_mut().ok_or_else(|| structural("bundle has no diffusion network"))?.params,
                "gamma" => &mut self.gamma.as_mut().ok_or_else(|| structural("bundle has no scalar block"))?.params,
                other => return Err(structural(format!("unknown checkpoint entry {other}"))),
            };
            if target.layout() != entry.layout.as_slice() {
                return Err(structural(format!("layout mismatch for {}", entry.name)));
            }
            target.as_mut_slice().copy_from_slice(&data);
        }
        Ok(())
    }
}
