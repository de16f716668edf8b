//! Evaluation: clone generation, perplexity and MLM adaptation, downstream
//! tagging with weighted F1, and the membership-inference audit.

pub mod clone;
pub mod f1;
pub mod mia;
pub mod perplexity;
pub mod report;
pub mod tagging;

pub use clone::{generate_clone, unigram_l1, CloneCorpus};
pub use f1::{weighted_f1, F1Report};
pub use mia::{auc, rmia_audit, sequence_loglik, MiaCandidate, MiaRecord, Scorer};
pub use perplexity::{
    encode_document, mlm_adapt, perplexity, perplexity_ids, perplexity_with, LossKind,
    MlmSchedule, PplPoint,
};
pub use report::{EvalReport, RowResult};
pub use tagging::{
    default_tasks, predict, tagged_sentences, train_tagger, BioTag, TaggedSentence, Tagger,
    TaggerSchedule, TaggingTask,
};

use rayon::prelude::*;

use crate::model::{GradSet, ModelError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("every generation was empty")]
    DegenerateModel,
    #[error("no prompts given")]
    EmptyPrompts,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("prediction and gold are misaligned: {0}")]
    AlignmentError(String),
    #[error("population is empty")]
    EmptyPopulation,
    #[error("labels contain a single class")]
    SingleClass,
    #[error("invalid setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Mean loss and gradient over `indices`, evaluated in parallel and summed in
/// index order so the result does not depend on scheduling.
pub(crate) fn mean_loss_and_grad<F>(indices: &[usize], f: F) -> Result<(f64, GradSet), EvalError>
where
    F: Fn(usize) -> Result<(f64, GradSet), EvalError> + Sync,
{
    let parts: Vec<(f64, GradSet)> = indices
        .par_iter()
        .map(|&i| f(i))
        .collect::<Result<_, _>>()?;
    let n = parts.len() as f64;
    let mut iter = parts.into_iter();
    let (mut loss, mut grad) = iter.next().ok_or(EvalError::EmptyTrainingSet)?;
    for (l, g) in iter {
        loss += l;
        for (name, t) in g.iter() {
            grad.accumulate(name, t);
        }
    }
    grad.scale(1.0 / n);
    Ok((loss / n, grad))
}
