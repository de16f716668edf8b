//! Perplexity and MLM domain adaptation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean_loss_and_grad, EvalError};
use crate::model::loss::{mlm_loss_and_grad, mlm_nll, sequence_nll};
use crate::model::optim::Adam;
use crate::model::vocab::{BOS, BYTE_BASE, EOS};
use crate::model::{LoraAdapter, ModelError, ModelParams, Vocab};
use crate::rng::{derive_seed, derived};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    Causal,
    /// Masking is re-drawn per document from this seed, so the metric is fixed.
    Mlm { mask_seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplPoint {
    pub step: usize,
    pub ppl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MlmSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub eval_every: usize,
}

/// `BOS text EOS`, truncated to the context.
pub fn encode_document(vocab: &Vocab, text: &str, context_len: usize) -> Vec<u32> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(text));
    ids.push(EOS);
    ids.truncate(context_len);
    ids
}

/// `exp(Σ nll / Σ count)` over sequences scored by `score`.
pub fn perplexity_with<F>(n: usize, score: F) -> Result<f64, EvalError>
where
    F: Fn(usize) -> Result<(f64, usize), EvalError> + Sync,
{
    if n == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    let parts: Vec<(f64, usize)> = (0..n)
        .into_par_iter()
        .map(&score)
        .collect::<Result<_, _>>()?;
    let (total, count) = parts
        .iter()
        .fold((0.0, 0usize), |(t, c), (s, k)| (t + s, c + k));
    if count == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok((total / count as f64).exp())
}

/// Token-weighted perplexity over already tokenized sequences. Causal
/// sequences score every token after the first; MLM scores the masked ones.
pub fn perplexity_ids(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    seqs: &[Vec<u32>],
    kind: LossKind,
) -> Result<f64, EvalError> {
    perplexity_with(seqs.len(), |i| {
        let seq = &seqs[i];
        let r = match kind {
            LossKind::Causal => {
                let mask: Vec<bool> = (0..seq.len()).map(|j| j > 0).collect();
                sequence_nll(params, adapter, seq, &mask)
            }
            LossKind::Mlm { mask_seed } => {
                mlm_nll(params, seq, derive_seed(mask_seed, &format!("ppl/{i}")))
            }
        };
        match r {
            Ok(v) => Ok(v),
            Err(ModelError::EmptyLoss | ModelError::TooShort(_)) => Ok((0.0, 0)),
            Err(e) => Err(e.into()),
        }
    })
}

pub fn perplexity<S: AsRef<str>>(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    vocab: &Vocab,
    corpus: &[S],
    kind: LossKind,
) -> Result<f64, EvalError> {
    let seqs: Vec<Vec<u32>> = corpus
        .iter()
        .map(|t| encode_document(vocab, t.as_ref(), params.hparams.context_len))
        .collect();
    perplexity_ids(params, adapter, &seqs, kind)
}

fn maskable(seq: &[u32]) -> bool {
    seq.len() >= 2 && seq.iter().any(|&t| t >= BYTE_BASE)
}

/// Non-private MLM training with Adam on uniformly drawn minibatches. The
/// curve holds the MLM perplexity on `eval` before training, every
/// `eval_every` steps, and after the last step.
pub fn mlm_adapt(
    encoder: &ModelParams,
    train: &[Vec<u32>],
    schedule: &MlmSchedule,
    eval: &[Vec<u32>],
    eval_mask_seed: u64,
    seed: u64,
) -> Result<(ModelParams, Vec<PplPoint>), EvalError> {
    if encoder.hparams.causal {
        return Err(EvalError::Invalid("MLM adaptation needs a non-causal encoder".into()));
    }
    if schedule.batch_size == 0 || schedule.eval_every == 0 {
        return Err(EvalError::Invalid("batch_size and eval_every must be positive".into()));
    }
    let usable: Vec<&Vec<u32>> = train.iter().filter(|s| maskable(s)).collect();
    if usable.is_empty() && schedule.steps > 0 {
        return Err(EvalError::EmptyTrainingSet);
    }
    let kind = LossKind::Mlm {
        mask_seed: eval_mask_seed,
    };
    let mut model = encoder.clone();
    let mut curve = vec![PplPoint {
        step: 0,
        ppl: perplexity_ids(&model, None, eval, kind)?,
    }];
    let mut adam = Adam::new(schedule.lr);
    let mut rng = derived(seed, "mlm_adapt");
    for step in 0..schedule.steps {
        let batch: Vec<usize> = (0..schedule.batch_size)
            .map(|_| rng.random_range(0..usable.len()))
            .collect();
        let (loss, grad) = mean_loss_and_grad(&batch, |i| {
            let mask_seed = derive_seed(seed, &format!("mlm/{step}/{i}"));
            Ok(mlm_loss_and_grad(&model, usable[i], mask_seed)?)
        })?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(EvalError::Diverged { step });
        }
        adam.step(&mut model.tensors, &grad);
        let done = step + 1;
        if done % schedule.eval_every == 0 || done == schedule.steps {
            let ppl = perplexity_ids(&model, None, eval, kind)?;
            if !ppl.is_finite() {
                return Err(EvalError::Diverged { step });
            }
            curve.push(PplPoint { step: done, ppl });
        }
    }
    Ok((model, curve))
}
