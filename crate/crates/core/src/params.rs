//! Named parameter storage and per-parameter gradient buffers.

use std::collections::HashMap;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{config_err, Result};
use crate::rng::mix_str;

pub type Matrix = Array2<f64>;

/// Index of a parameter array inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly registered parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Glorot-uniform over the (fan_in, fan_out) = (rows, cols) of the array.
    XavierUniform,
}

/// An ordered collection of named 2-D arrays. Vectors are stored as `1 × n`.
///
/// Initialization draws from a generator seeded by `(seed, name)`, so the
/// value of a parameter never depends on what else was registered before it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, ParamId>,
    seed: u64,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Default::default()
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        assert!(
            !self.index.contains_key(name),
            "parameter {name} registered twice"
        );
        let mut rng = ChaCha8Rng::seed_from_u64(mix_str(self.seed, name));
        let value = match init {
            Init::Zeros => Matrix::zeros((rows, cols)),
            Init::Ones => Matrix::ones((rows, cols)),
            Init::Normal(std) => {
                let dist = Normal::new(0.0, std).expect("finite std");
                Matrix::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
            }
            Init::XavierUniform => {
                let bound = (6.0 / (rows + cols) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
                Matrix::from_shape_fn((rows, cols), |_| dist.sample(&mut rng))
            }
        };
        self.insert(name, value)
    }

    pub fn insert(&mut self, name: &str, value: Matrix) -> ParamId {
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.index.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Overwrite every array whose name starts with `prefix` from `source`,
    /// where the source name is `source_prefix` + the remainder. Shapes must match.
    pub fn copy_prefix_from(
        &mut self,
        prefix: &str,
        source: &ParamStore,
        source_prefix: &str,
    ) -> Result<usize> {
        let mut copied = 0;
        for i in 0..self.names.len() {
            let Some(rest) = self.names[i].strip_prefix(prefix) else {
                continue;
            };
            let src_name = format!("{source_prefix}{rest}");
            let src = source
                .by_name(&src_name)
                .ok_or_else(|| config_err!("array {src_name} missing from source"))?;
            if src.dim() != self.values[i].dim() {
                return Err(config_err!(
                    "array {src_name}: source shape {:?} does not match expected {:?}",
                    src.dim(),
                    self.values[i].dim()
                ));
            }
            self.values[i].assign(src);
            copied += 1;
        }
        Ok(copied)
    }

    /// A store holding only the arrays under `prefix`, renamed to keep the prefix.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        let mut out = ParamStore::new(self.seed);
        for (_, name, value) in self.iter() {
            if name.starts_with(prefix) {
                out.insert(name, value.clone());
            }
        }
        out
    }
}

/// Gradient buffers aligned with the ids of one [`ParamStore`].
#[derive(Clone, Debug)]
pub struct ParamGrads {
    grads: Vec<Option<Matrix>>,
}

impl ParamGrads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub(crate) fn from_vec(grads: Vec<Option<Matrix>>) -> Self {
        Self { grads }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient entry, treating a missing buffer as zero.
    pub fn at(&self, id: ParamId, row: usize, col: usize) -> f64 {
        self.get(id).map_or(0.0, |g| g[[row, col]])
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => *d += src,
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Norm restricted to the parameters whose names start with `prefix`.
    pub fn norm_with_prefix(&self, store: &ParamStore, prefix: &str) -> f64 {
        store
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .filter_map(|(id, _, _)| self.get(id))
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
