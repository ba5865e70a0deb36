//! Flat parameter storage with a name registry.
//!
//! All learnable parameters of a model live in one contiguous `Vec<f64>`.
//! Each registered entry has a dotted path name and a (rows, cols) shape;
//! names double as checkpoint keys, and gradient/optimizer buffers are plain
//! vectors aligned with the flat storage.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle to one registered parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamRef(pub(crate) usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    data: Vec<f64>,
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f64>) -> ParamRef {
        assert_eq!(values.len(), rows * cols, "init length mismatch for {name}");
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        let offset = self.data.len();
        self.data.extend_from_slice(&values);
        let id = self.entries.len();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            offset,
            rows,
            cols,
        });
        self.index.insert(name.to_string(), id);
        ParamRef(id)
    }

    pub fn entry(&self, r: ParamRef) -> &ParamEntry {
        &self.entries[r.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamRef> {
        self.index.get(name).copied().map(ParamRef)
    }

    pub fn slice(&self, r: ParamRef) -> &[f64] {
        let e = &self.entries[r.0];
        &self.data[e.offset..e.offset + e.len()]
    }

    pub fn slice_mut(&mut self, r: ParamRef) -> &mut [f64] {
        let e = self.entries[r.0].clone();
        &mut self.data[e.offset..e.offset + e.len()]
    }

    pub fn tensor(&self, r: ParamRef) -> Tensor {
        let e = &self.entries[r.0];
        Tensor::from_vec(e.rows, e.cols, self.slice(r).to_vec())
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Overwrites one named entry, checking the shape.
    pub fn set_named(&mut self, name: &str, rows: usize, cols: usize, values: &[f64]) -> Result<()> {
        let id = self
            .index
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        let e = self.entries[id].clone();
        if (e.rows, e.cols) != (rows, cols) {
            return Err(Error::invalid(format!(
                "parameter `{name}` shape mismatch: expected {}x{}, got {rows}x{cols}",
                e.rows, e.cols
            )));
        }
        self.data[e.offset..e.offset + e.len()].copy_from_slice(values);
        Ok(())
    }
}

/// Registers parameters under a dotted path prefix with seeded initialization.
///
/// Initial values depend only on (seed, full parameter name, shape), so the
/// registration order does not affect the init of any individual tensor.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        ParamBuilder { store, seed }
    }

    fn rng_for(&self, name: &str) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(key)
    }

    /// Uniform init in [-bound, bound] with bound = sqrt(1 / fan_in).
    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamRef {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let values = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.store.register(name, rows, cols, values)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, value: f64) -> ParamRef {
        self.store.register(name, rows, cols, vec![value; rows * cols])
    }

    pub fn values(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f64>) -> ParamRef {
        self.store.register(name, rows, cols, values)
    }
}
