//! Named parameter tensors, their gradient buffers, and initialization.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{Error, Result};

/// Trainable-parameter group. Stage configs enable or freeze whole groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    PointEncoder,
    SpatialTransformer,
    Connector,
    Lm,
    SpecialEmbeddings,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::PointEncoder,
        Group::SpatialTransformer,
        Group::Connector,
        Group::Lm,
        Group::SpecialEmbeddings,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::PointEncoder => "point_encoder",
            Group::SpatialTransformer => "spatial_transformer",
            Group::Connector => "connector",
            Group::Lm => "lm",
            Group::SpecialEmbeddings => "special_embeddings",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown parameter group {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
struct Entry {
    name: String,
    group: Group,
    value: Matrix,
}

/// Ordered collection of named parameter matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, group: Group, value: Matrix) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            group,
            value,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    /// Inserts a `rows×cols` matrix drawn uniformly from `[-bound, bound]`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: &str,
        group: Group,
        rows: usize,
        cols: usize,
        bound: f64,
    ) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| if bound > 0.0 { rng.gen_range(-bound..=bound) } else { 0.0 })
            .collect();
        self.insert(name, group, Matrix::from_vec(rows, cols, data))
    }

    /// Linear layer weight `[fan_in × fan_out]` and bias `[1 × fan_out]`, both
    /// uniform in `±1/sqrt(fan_in)`.
    pub fn insert_linear<R: Rng>(
        &mut self,
        rng: &mut R,
        prefix: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
    ) -> (ParamId, ParamId) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = self.insert_uniform(rng, &format!("{prefix}.weight"), group, fan_in, fan_out, bound);
        let b = self.insert_uniform(rng, &format!("{prefix}.bias"), group, 1, fan_out, bound);
        (w, b)
    }

    /// Layer-norm gain (ones) and shift (zeros).
    pub fn insert_layer_norm(&mut self, prefix: &str, group: Group, width: usize) -> (ParamId, ParamId) {
        let g = self.insert(
            &format!("{prefix}.gamma"),
            group,
            Matrix::from_vec(1, width, vec![1.0; width]),
        );
        let b = self.insert(&format!("{prefix}.beta"), group, Matrix::zeros(1, width));
        (g, b)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> Group {
        self.entries[id.0].group
    }

    pub fn value(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Total scalar count, optionally restricted to one group.
    pub fn count(&self, group: Option<Group>) -> usize {
        self.entries
            .iter()
            .filter(|e| group.is_none_or(|g| e.group == g))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn named_values(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    /// Overwrites values from `(name, matrix)` pairs; every stored parameter
    /// must be present with a matching shape.
    pub fn load_values(&mut self, tensors: &BTreeMap<String, Matrix>) -> Result<()> {
        for e in &mut self.entries {
            let t = tensors
                .get(&e.name)
                .ok_or_else(|| Error::Data(format!("checkpoint lacks parameter {}", e.name)))?;
            if (t.rows, t.cols) != (e.value.rows, e.value.cols) {
                return Err(Error::Shape(format!(
                    "parameter {}: checkpoint {}x{}, model {}x{}",
                    e.name, t.rows, t.cols, e.value.rows, e.value.cols
                )));
            }
            e.value = t.clone();
        }
        Ok(())
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    bufs: Vec<Matrix>,
}

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads {
            bufs: store
                .ids()
                .map(|id| {
                    let v = store.value(id);
                    Matrix::zeros(v.rows, v.cols)
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, d: &[f64]) {
        for (o, v) in self.bufs[id.0].data.iter_mut().zip(d) {
            *o += v;
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.bufs[id.0]
    }

    pub fn scale(&mut self, s: f64) {
        for b in &mut self.bufs {
            for v in &mut b.data {
                *v *= s;
            }
        }
    }

    pub fn add(&mut self, other: &Grads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.bufs.iter().all(|b| b.data.iter().all(|v| v.is_finite()))
    }
}
