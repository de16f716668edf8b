//! The DP-SGD training loop.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::accountant::{PrivacyLedger, PrivacySpec};
use super::mechanism::{clip, joint_norm, noisy_aggregate, poisson_sample};
use super::DpError;
use crate::instruct::InstructionPair;
use crate::model::loss::nll_and_grad;
use crate::model::optim::{sgd_step, Adam};
use crate::model::vocab::{BOS, EOS};
use crate::model::{GradSet, LoraAdapter, ModelError, ModelParams, TensorMap, Vocab};
use crate::rng::derive_seed;

/// A tokenized training sequence; `loss_mask[j]` marks token `j` as a target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainExample {
    pub ids: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

impl TrainExample {
    /// `BOS prompt completion EOS`, truncated to the context; only completion
    /// tokens (and EOS when it fits) are targets. `None` when no completion
    /// token survives truncation.
    pub fn from_pair(vocab: &Vocab, pair: &InstructionPair, context_len: usize) -> Option<Self> {
        Self::from_parts(vocab, &pair.prompt(), &pair.completion, context_len)
    }

    pub fn from_parts(vocab: &Vocab, prompt: &str, completion: &str, context_len: usize) -> Option<Self> {
        let mut ids = vec![BOS];
        ids.extend(vocab.encode(prompt));
        let n_prompt = ids.len();
        ids.extend(vocab.encode(completion));
        ids.push(EOS);
        ids.truncate(context_len);
        if ids.len() <= n_prompt {
            return None;
        }
        let loss_mask = (0..ids.len()).map(|j| j >= n_prompt).collect();
        Some(Self { ids, loss_mask })
    }

    /// Plain text with every token after BOS a target.
    pub fn from_text(vocab: &Vocab, text: &str, context_len: usize) -> Option<Self> {
        Self::from_parts(vocab, "", text, context_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr: f64,
    pub steps: usize,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lot_size: usize,
    pub mean_clipped_norm: f64,
    /// Mean per-example loss over the lot; NaN for an empty lot.
    pub loss: f64,
}

/// A per-example differentiable loss over a parameter map.
pub trait DpObjective: Sync {
    type Prepared: Sync;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Build whatever the per-example evaluations share for one step.
    fn prepare(&self, params: &TensorMap) -> Self::Prepared;

    fn loss_and_grad(&self, prepared: &Self::Prepared, index: usize)
        -> Result<(f64, GradSet), DpError>;
}

#[derive(Debug, Clone)]
pub struct DpOutcome {
    pub params: TensorMap,
    pub ledger: PrivacyLedger,
    pub curve: Vec<LossPoint>,
}

/// Run DP-SGD on `params`. Each step: Poisson lot, per-example gradients
/// (in parallel), clip, noisy aggregate over the expected lot size, update.
pub fn dp_optimize<O: DpObjective>(
    objective: &O,
    mut params: TensorMap,
    spec: &PrivacySpec,
    schedule: &Schedule,
    seed: u64,
) -> Result<DpOutcome, DpError> {
    spec.validate()?;
    let sigma = spec.sigma()?;
    if objective.is_empty() {
        return Err(DpError::EmptyTrainingSet);
    }
    let n = objective.len();
    let q = spec.sampling_rate;
    let expected_lot = q * n as f64;
    let mut ledger = PrivacyLedger::new(*spec);
    let cost = ledger.step_cost(q, sigma)?;
    let mut adam = Adam::new(schedule.lr);
    let mut curve = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let lot = poisson_sample(n, q, derive_seed(seed, &format!("lot/{step}")))?;
        let prepared = objective.prepare(&params);
        let evaluated: Vec<(f64, GradSet, f64)> = lot
            .par_iter()
            .map(|&i| {
                let (loss, g) = objective.loss_and_grad(&prepared, i)?;
                if !loss.is_finite() {
                    return Err(DpError::Diverged { step });
                }
                let clipped = clip(&g, spec.clip_norm).map_err(|e| match e {
                    DpError::NonFiniteGradient => DpError::Diverged { step },
                    other => other,
                })?;
                let norm = joint_norm(&clipped);
                Ok((loss, clipped, norm))
            })
            .collect::<Result<_, DpError>>()?;
        let lot_size = evaluated.len();
        let (loss_sum, norm_sum) = evaluated
            .iter()
            .fold((0.0, 0.0), |(l, c), (loss, _, norm)| (l + loss, c + norm));
        let clipped: Vec<GradSet> = evaluated.into_iter().map(|(_, g, _)| g).collect();
        let update = noisy_aggregate(
            &clipped,
            &params,
            spec.clip_norm,
            sigma,
            expected_lot,
            derive_seed(seed, &format!("noise/{step}")),
        )?;
        match schedule.optimizer {
            OptimizerKind::Sgd => sgd_step(&mut params, &update, schedule.lr),
            OptimizerKind::Adam => adam.step(&mut params, &update),
        }
        if !params.all_finite() {
            return Err(DpError::Diverged { step });
        }
        ledger.advance(&cost);
        let mean = |s: f64| if lot_size == 0 { f64::NAN } else { s / lot_size as f64 };
        curve.push(LossPoint {
            step,
            lot_size,
            mean_clipped_norm: if lot_size == 0 { 0.0 } else { norm_sum / lot_size as f64 },
            loss: mean(loss_sum),
        });
    }
    Ok(DpOutcome {
        params,
        ledger,
        curve,
    })
}

/// Next-token loss over instruction examples with a frozen base and a
/// trainable adapter.
pub struct AdapterObjective<'a> {
    pub base: &'a ModelParams,
    pub template: &'a LoraAdapter,
    pub examples: &'a [TrainExample],
}

impl DpObjective for AdapterObjective<'_> {
    type Prepared = LoraAdapter;

    fn len(&self) -> usize {
        self.examples.len()
    }

    fn prepare(&self, params: &TensorMap) -> LoraAdapter {
        LoraAdapter {
            tensors: params.clone(),
            ..self.template.clone()
        }
    }

    fn loss_and_grad(&self, adapter: &LoraAdapter, i: usize) -> Result<(f64, GradSet), DpError> {
        let ex = &self.examples[i];
        Ok(nll_and_grad(self.base, Some(adapter), &ex.ids, &ex.loss_mask)?)
    }
}

/// Next-token loss with every base parameter trainable.
pub struct BaseObjective<'a> {
    pub template: &'a ModelParams,
    pub examples: &'a [TrainExample],
}

impl DpObjective for BaseObjective<'_> {
    type Prepared = ModelParams;

    fn len(&self) -> usize {
        self.examples.len()
    }

    fn prepare(&self, params: &TensorMap) -> ModelParams {
        ModelParams {
            hparams: self.template.hparams,
            tensors: params.clone(),
        }
    }

    fn loss_and_grad(&self, model: &ModelParams, i: usize) -> Result<(f64, GradSet), DpError> {
        let ex = &self.examples[i];
        Ok(nll_and_grad(model, None, &ex.ids, &ex.loss_mask)?)
    }
}

/// Train `adapter` on `examples` over the frozen `base`.
pub fn dp_train(
    base: &ModelParams,
    adapter: LoraAdapter,
    examples: &[TrainExample],
    spec: &PrivacySpec,
    schedule: &Schedule,
    seed: u64,
) -> Result<(LoraAdapter, PrivacyLedger, Vec<LossPoint>), DpError> {
    adapter.check_compatible(base)?;
    let objective = AdapterObjective {
        base,
        template: &adapter,
        examples,
    };
    let out = dp_optimize(&objective, adapter.tensors.clone(), spec, schedule, seed)?;
    Ok((
        LoraAdapter {
            tensors: out.params,
            ..adapter
        },
        out.ledger,
        out.curve,
    ))
}

/// Train every base parameter; used non-privately for pretraining.
pub fn train_base(
    model: ModelParams,
    examples: &[TrainExample],
    spec: &PrivacySpec,
    schedule: &Schedule,
    seed: u64,
) -> Result<(ModelParams, Vec<LossPoint>), DpError> {
    let objective = BaseObjective {
        template: &model,
        examples,
    };
    let out = dp_optimize(&objective, model.tensors.clone(), spec, schedule, seed)?;
    Ok((
        ModelParams {
            hparams: model.hparams,
            tensors: out.params,
        },
        out.curve,
    ))
}

pub fn write_loss_curve(path: &Path, curve: &[LossPoint]) -> Result<(), ModelError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for p in curve {
        w.serialize(p)
            .map_err(|e| ModelError::Checkpoint(format!("loss curve: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| ModelError::Checkpoint(format!("loss curve: {e}")))?;
    crate::jsonl::write_atomic(path, &bytes)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}
