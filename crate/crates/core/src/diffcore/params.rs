use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{structural, Result};

/// One named matrix-shaped block inside a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
        }
    }

    pub fn size(&self) -> usize {
        self.rows * self.cols
    }
}

/// Contiguous trainable parameters with their segment layout (row-major per segment).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: Vec<Segment>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<Segment>) -> Self {
        let n = layout.iter().map(Segment::size).sum();
        Self {
            data: vec![0.0; n],
            layout,
        }
    }

    pub fn from_parts(data: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let n: usize = layout.iter().map(Segment::size).sum();
        if n != data.len() {
            return Err(structural(format!(
                "layout describes {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { data, layout })
    }

    /// Builds a vector from matrices, taking segment shapes from them.
    pub fn pack(named: Vec<(String, Array2<f64>)>) -> Self {
        let mut data = Vec::new();
        let mut layout = Vec::with_capacity(named.len());
        for (name, m) in named {
            layout.push(Segment::new(name, m.nrows(), m.ncols()));
            data.extend(m.iter().copied());
        }
        Self { data, layout }
    }

    /// Splits the flat data back into one matrix per segment.
    pub fn unpack(&self) -> Vec<Array2<f64>> {
        let mut offset = 0;
        self.layout
            .iter()
            .map(|s| {
                let m = Array2::from_shape_vec(
                    (s.rows, s.cols),
                    self.data[offset..offset + s.size()].to_vec(),
                )
                .expect("segment sizes match data");
                offset += s.size();
                m
            })
            .collect()
    }

    /// Same layout, new data. Panics on a length mismatch.
    pub fn with_data(&self, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), self.data.len(), "parameter length mismatch");
        Self {
            data,
            layout: self.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn layout(&self) -> &[Segment] {
        &self.layout
    }

    /// Offset and segment for the named block.
    pub fn segment(&self, name: &str) -> Option<(usize, &Segment)> {
        let mut offset = 0;
        for s in &self.layout {
            if s.name == name {
                return Some((offset, s));
            }
            offset += s.size();
        }
        None
    }
}
