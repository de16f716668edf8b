//! Low-rank adapters over the attention projections.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::TensorMap;
use super::transformer::{layer_name, ModelParams};
use super::ModelError;
use crate::rng::derived;

pub const LORA_TARGETS: [&str; 4] = ["wq", "wk", "wv", "wo"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    /// Subset of `wq`, `wk`, `wv`, `wo`.
    pub targets: Vec<String>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: vec!["wq".into(), "wv".into()],
        }
    }
}

/// Per-target `(A: r×d_in, B: d_out×r)` pairs; the update is `(alpha/r)·B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub config: LoraConfig,
    pub n_layers: usize,
    pub tensors: TensorMap,
}

impl LoraAdapter {
    pub fn a_name(layer: usize, target: &str) -> String {
        layer_name(layer, &format!("{target}.lora_a"))
    }

    pub fn b_name(layer: usize, target: &str) -> String {
        layer_name(layer, &format!("{target}.lora_b"))
    }

    /// `A` Gaussian with std `1/sqrt(d_in)`, `B` zero, so a fresh adapter is neutral.
    pub fn init(base: &ModelParams, config: LoraConfig, seed: u64) -> Result<Self, ModelError> {
        if config.rank == 0 {
            return Err(ModelError::AdapterMismatch("rank must be at least 1".into()));
        }
        if config.targets.is_empty()
            || config
                .targets
                .iter()
                .any(|t| !LORA_TARGETS.contains(&t.as_str()))
        {
            return Err(ModelError::AdapterMismatch(format!(
                "targets must be a non-empty subset of {LORA_TARGETS:?}"
            )));
        }
        let mut rng = derived(seed, "lora_init");
        let mut tensors = TensorMap::new();
        for l in 0..base.hparams.n_layers {
            for t in &config.targets {
                let w = base.tensors.get(&layer_name(l, t));
                let (d_out, d_in) = w.dim();
                let normal = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("positive std");
                tensors.insert(
                    Self::a_name(l, t),
                    Array2::from_shape_simple_fn((config.rank, d_in), || normal.sample(&mut rng)),
                );
                tensors.insert(Self::b_name(l, t), Array2::zeros((d_out, config.rank)));
            }
        }
        Ok(Self {
            config,
            n_layers: base.hparams.n_layers,
            tensors,
        })
    }

    pub fn scale(&self) -> f64 {
        self.config.alpha / self.config.rank as f64
    }

    pub fn check_compatible(&self, base: &ModelParams) -> Result<(), ModelError> {
        if self.n_layers != base.hparams.n_layers {
            return Err(ModelError::AdapterMismatch(format!(
                "adapter has {} layers, model has {}",
                self.n_layers, base.hparams.n_layers
            )));
        }
        for l in 0..self.n_layers {
            for t in &self.config.targets {
                let w = base
                    .tensors
                    .try_get(&layer_name(l, t))
                    .ok_or_else(|| ModelError::AdapterMismatch(format!("no base matrix {t}")))?;
                let a = self.tensors.try_get(&Self::a_name(l, t));
                let b = self.tensors.try_get(&Self::b_name(l, t));
                let ok = matches!((a, b), (Some(a), Some(b))
                    if a.dim() == (self.config.rank, w.ncols())
                        && b.dim() == (w.nrows(), self.config.rank));
                if !ok {
                    return Err(ModelError::AdapterMismatch(format!(
                        "layer {l} target {t} has incongruent adapter shapes"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Fold the adapter into the base weights: `W ← W + (alpha/r)·B·A`.
pub fn merge_lora(params: &ModelParams, adapter: &LoraAdapter) -> Result<ModelParams, ModelError> {
    adapter.check_compatible(params)?;
    let mut merged = params.clone();
    for l in 0..adapter.n_layers {
        for t in &adapter.config.targets {
            let a = adapter.tensors.get(&LoraAdapter::a_name(l, t));
            let b = adapter.tensors.get(&LoraAdapter::b_name(l, t));
            let w = merged
                .tensors
                .get_mut(&layer_name(l, t))
                .expect("checked by check_compatible");
            w.scaled_add(adapter.scale(), &b.dot(a));
        }
    }
    Ok(merged)
}
