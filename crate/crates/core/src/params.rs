//! Named parameter store with a stable flat-vector view.
//!
//! Parameters live here; the tape only references them by id. The flat view
//! (insertion order, row-major within each tensor) is what the optimizer and
//! the finite-difference checker index into.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug)]
struct Entry<R> {
    name: String,
    offset: usize,
    tensor: Tensor<R>,
}

#[derive(Debug)]
pub struct ParamStore<R> {
    entries: Vec<Entry<R>>,
    by_name: BTreeMap<String, usize>,
    total: usize,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
            total: 0,
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<R>) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Validation(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.to_string(), id.0);
        self.total += tensor.len();
        self.entries.push(Entry {
            name: name.to_string(),
            offset: self.total - tensor.len(),
            tensor,
        });
        Ok(id)
    }

    /// Weight matrix init: uniform on +-sqrt(6 / (fan_in + fan_out)).
    /// Draws in f64 so f32 and f64 models start from the same numbers.
    pub fn xavier(&mut self, rng: &mut impl Rng, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.gen_range(-bound..=bound))
            .collect();
        self.insert(name, Tensor::from_f64(rows, cols, &data)?)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(rows, cols))
    }

    /// Embedding / query init: normal(0, std) via Box-Muller, drawn in f64.
    pub fn gaussian(
        &mut self,
        rng: &mut impl Rng,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
    ) -> Result<ParamId> {
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| {
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        self.insert(name, Tensor::from_f64(rows, cols, &data)?)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<R> {
        &self.entries[id.0].tensor
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn count(&self) -> usize {
        self.entries.len()
    }

    pub fn flat_len(&self) -> usize {
        self.total
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.tensor))
    }

    /// Name of the parameter owning flat coordinate `i`, for diagnostics.
    pub fn owner_of(&self, i: usize) -> &str {
        let idx = match self
            .entries
            .binary_search_by(|e| e.offset.cmp(&i))
        {
            Ok(k) => k,
            Err(k) => k - 1,
        };
        &self.entries[idx].name
    }

    pub fn read_flat(&self) -> Vec<R> {
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    pub fn write_flat(&mut self, flat: &[R]) -> Result<()> {
        if flat.len() != self.total {
            return Err(Error::Shape(format!(
                "flat vector has {} values, store holds {}",
                flat.len(),
                self.total
            )));
        }
        for e in &mut self.entries {
            let src = &flat[e.offset..e.offset + e.tensor.len()];
            e.tensor.data_mut().copy_from_slice(src);
        }
        Ok(())
    }

    pub fn flat_get(&self, i: usize) -> R {
        let e = self.entry_at(i);
        e.tensor.data()[i - e.offset]
    }

    pub fn flat_set(&mut self, i: usize, v: R) {
        let idx = match self.entries.binary_search_by(|e| e.offset.cmp(&i)) {
            Ok(k) => k,
            Err(k) => k - 1,
        };
        let e = &mut self.entries[idx];
        e.tensor.data_mut()[i - e.offset] = v;
    }

    fn entry_at(&self, i: usize) -> &Entry<R> {
        assert!(i < self.total, "flat index {i} out of range {}", self.total);
        let idx = match self.entries.binary_search_by(|e| e.offset.cmp(&i)) {
            Ok(k) => k,
            Err(k) => k - 1,
        };
        &self.entries[idx]
    }

    /// Offset of a parameter's first coordinate in the flat view.
    pub fn offset(&self, id: ParamId) -> usize {
        self.entries[id.0].offset
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flat_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        store.xavier(&mut rng, "w1", 3, 5).unwrap();
        store.zeros("b1", 1, 5).unwrap();
        store.gaussian(&mut rng, "q", 1, 8, 0.02).unwrap();
        assert_eq!(store.flat_len(), 15 + 5 + 8);

        let flat = store.read_flat();
        let mut other = ParamStore::<f64>::new();
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        other.xavier(&mut rng2, "w1", 3, 5).unwrap();
        other.zeros("b1", 1, 5).unwrap();
        other.gaussian(&mut rng2, "q", 1, 8, 0.02).unwrap();
        other.write_flat(&flat).unwrap();
        let back = other.read_flat();
        assert!(flat.iter().zip(&back).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn flat_get_set_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        store.xavier(&mut rng, "a", 2, 2).unwrap();
        store.xavier(&mut rng, "b", 2, 2).unwrap();
        for i in 0..store.flat_len() {
            let old = store.flat_get(i);
            store.flat_set(i, old + 1.0);
            assert_eq!(store.flat_get(i), old + 1.0);
            store.flat_set(i, old);
            assert_eq!(store.flat_get(i).to_bits(), old.to_bits());
        }
        assert_eq!(store.owner_of(0), "a");
        assert_eq!(store.owner_of(5), "b");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store.zeros("x", 1, 1).unwrap();
        assert!(store.insert("x", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn xavier_respects_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let id = store.xavier(&mut rng, "w", 16, 48).unwrap();
        let bound = (6.0 / 64.0_f64).sqrt();
        for &v in store.tensor(id).data() {
            assert!(v.abs() <= bound);
        }
    }
}
