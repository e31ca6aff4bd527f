//! Named parameter collections shared by the model, the optimizer, and the
//! aggregation strategies.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, named collection of tensors with a designated last-layer subset.
///
/// Iteration order is the lexicographic name order of the underlying map, so
/// it is identical on the server and on every client.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    tensors: BTreeMap<String, Tensor>,
    last_layer: Vec<String>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet {
            tensors: BTreeMap::new(),
            last_layer: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.tensors.insert(name.to_string(), t);
    }

    pub fn set_last_layer(&mut self, names: Vec<String>) {
        for n in &names {
            assert!(self.tensors.contains_key(n), "unknown last-layer name {n}");
        }
        self.last_layer = names;
    }

    pub fn last_layer_names(&self) -> &[String] {
        &self.last_layer
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Same names, all tensors zeroed. Used for velocities, control variates
    /// and gradient trackers.
    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros_like(t)))
                .collect(),
            last_layer: self.last_layer.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn check_shapes_match(&self, other: &ParameterSet, op: &'static str) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: vec![self.tensors.len()],
                rhs: vec![other.tensors.len()],
            });
        }
        for ((na, ta), (nb, tb)) in self.tensors.iter().zip(other.tensors.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: ta.shape().to_vec(),
                    rhs: tb.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// self += s * other, elementwise over matching names.
    pub fn axpy(&mut self, s: f64, other: &ParameterSet) -> Result<()> {
        self.check_shapes_match(other, "axpy")?;
        for (t, o) in self.tensors.values_mut().zip(other.tensors.values()) {
            t.axpy(s, o);
        }
        Ok(())
    }

    /// Elementwise self - other.
    pub fn delta(&self, other: &ParameterSet) -> Result<ParameterSet> {
        self.check_shapes_match(other, "delta")?;
        let mut out = self.clone();
        for (t, o) in out.tensors.values_mut().zip(other.tensors.values()) {
            *t = t.sub(o)?;
        }
        Ok(out)
    }

    /// Designated last-layer tensors flattened and concatenated in name order.
    pub fn last_layer_vector(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for name in &self.last_layer {
            out.extend_from_slice(self.tensors[name].data());
        }
        out
    }

    /// Convex/affine combination sum_k w_k * sets[k], reduced in list order.
    pub fn weighted_sum(sets: &[&ParameterSet], weights: &[f64]) -> Result<ParameterSet> {
        assert_eq!(sets.len(), weights.len());
        assert!(!sets.is_empty());
        let mut out = sets[0].zeros_like();
        for (&set, &w) in sets.iter().zip(weights) {
            out.axpy(w, set)?;
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &ParameterSet) -> f64 {
        let mut m = 0.0_f64;
        for (t, o) in self.tensors.values().zip(other.tensors.values()) {
            for (a, b) in t.data().iter().zip(o.data()) {
                m = m.max((a - b).abs());
            }
        }
        m
    }
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}
