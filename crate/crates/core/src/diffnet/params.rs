use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::Array2;

static NEXT_SET: AtomicU64 = AtomicU64::new(0);

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of trainable tensors. Declaration order is the
/// serialisation order of checkpoints.
///
/// Each set carries an identity so that tensors of different sets stay
/// distinct on one graph; a clone shares the identity of its source.
#[derive(Debug, Clone)]
pub struct ParamSet {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
}

impl Default for ParamSet {
    fn default() -> Self {
        Self { uid: NEXT_SET.fetch_add(1, Ordering::Relaxed), names: Vec::new(), tensors: Vec::new() }
    }
}

impl PartialEq for ParamSet {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.tensors == other.tensors
    }
}

impl ParamSet {
    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    /// Total number of trainable scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// All values flattened in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    /// Overwrites all values from a flat slice in declaration order.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.scalar_count(), "flat parameter length");
        let mut at = 0;
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v = flat[at];
                at += 1;
            }
        }
    }
}
