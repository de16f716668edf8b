//! Named tensor collections: model weights, LoRA adapters and gradients all
//! share this representation. Vectors are stored as `1×n` matrices.

use std::collections::BTreeMap;

use ndarray::Array2;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorMap(BTreeMap<String, Array2<f64>>);

/// Gradients are congruent with the trainable subset of a [`TensorMap`].
pub type GradSet = TensorMap;

impl TensorMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Array2<f64>) {
        self.0.insert(name.into(), t);
    }

    /// Panics on a missing name: every caller looks up names it created.
    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("tensor {name} missing"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<f64>> {
        self.0.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.0.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<f64>)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.0.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self(
            self.0
                .iter()
                .map(|(k, v)| (k.clone(), Array2::zeros(v.raw_dim())))
                .collect(),
        )
    }

    /// Accumulate into `name`, creating a zero tensor of the right shape first.
    pub fn accumulate(&mut self, name: &str, delta: &Array2<f64>) {
        match self.0.get_mut(name) {
            Some(t) => *t += delta,
            None => {
                self.0.insert(name.to_string(), delta.clone());
            }
        }
    }

    /// Joint L2 norm over every coordinate of every tensor.
    pub fn l2_norm(&self) -> f64 {
        self.0
            .values()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.0.values().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.0.values_mut() {
            t.mapv_inplace(|x| x * s);
        }
    }

    /// `self += alpha * other` over the names both maps share.
    pub fn add_scaled(&mut self, other: &TensorMap, alpha: f64) {
        for (k, t) in self.0.iter_mut() {
            if let Some(o) = other.0.get(k) {
                t.scaled_add(alpha, o);
            }
        }
    }

    /// True when both maps have the same names and shapes.
    pub fn congruent(&self, other: &TensorMap) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(other.0.iter())
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }

    /// Flat view over all coordinates in name order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.0.values().flat_map(|t| t.iter().copied()).collect()
    }
}

impl FromIterator<(String, Array2<f64>)> for TensorMap {
    fn from_iter<I: IntoIterator<Item = (String, Array2<f64>)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}
