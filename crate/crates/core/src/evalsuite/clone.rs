//! Clone-corpus generation and unigram statistics.

use std::collections::HashMap;

use rayon::prelude::*;

use super::EvalError;
use crate::corpus::{Note, NoteType};
use crate::instruct::{delimiter_note_type, prompt_text};
use crate::model::vocab::{pieces, BOS};
use crate::model::{sample, Decoding, LoraAdapter, ModelError, ModelParams, Vocab};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct CloneCorpus {
    pub notes: Vec<Note>,
    /// Prompts whose generation was empty or did not fit the context.
    pub dropped: usize,
}

/// One note per instruction: the decoded completion after the delimiter,
/// trimmed. Each prompt samples with its own seed derived from `seed`.
pub fn generate_clone(
    params: &ModelParams,
    adapter: Option<&LoraAdapter>,
    vocab: &Vocab,
    instructions: &[String],
    decoding: &Decoding,
    seed: u64,
) -> Result<CloneCorpus, EvalError> {
    if instructions.is_empty() {
        return Err(EvalError::EmptyPrompts);
    }
    let generated: Vec<Option<(NoteType, String)>> = instructions
        .par_iter()
        .enumerate()
        .map(|(i, instr)| {
            let mut prompt = vec![BOS];
            prompt.extend(vocab.encode(&prompt_text(instr)));
            let dec = Decoding {
                seed: derive_seed(seed, &format!("clone/{i}")),
                ..*decoding
            };
            let ids = match sample(params, adapter, &prompt, &dec) {
                Ok(ids) => ids,
                Err(ModelError::ContextOverflow { .. }) => return Ok(None),
                Err(e) => return Err(EvalError::Model(e)),
            };
            let text = vocab.decode(&ids)?.trim().to_string();
            let note_type = delimiter_note_type(instr).unwrap_or(NoteType::Progress);
            Ok((!text.is_empty()).then_some((note_type, text)))
        })
        .collect::<Result<_, EvalError>>()?;
    let dropped = generated.iter().filter(|g| g.is_none()).count();
    let notes: Vec<Note> = generated
        .into_iter()
        .enumerate()
        .filter_map(|(i, g)| {
            g.map(|(note_type, text)| Note {
                id: format!("clone-{i:06}"),
                note_type,
                text,
            })
        })
        .collect();
    if notes.is_empty() {
        return Err(EvalError::DegenerateModel);
    }
    Ok(CloneCorpus { notes, dropped })
}

fn word_counts<S: AsRef<str>>(corpus: &[S]) -> (HashMap<String, f64>, f64) {
    let mut counts: HashMap<String, f64> = HashMap::new();
    let mut total = 0.0;
    for doc in corpus {
        for p in pieces(doc.as_ref()) {
            let w = p.trim();
            if w.chars().any(char::is_alphanumeric) {
                *counts.entry(w.to_lowercase()).or_default() += 1.0;
                total += 1.0;
            }
        }
    }
    (counts, total)
}

/// L1 distance between relative frequencies of the `top` most frequent
/// source words in `source` and in `other`.
pub fn unigram_l1<S: AsRef<str>, T: AsRef<str>>(source: &[S], other: &[T], top: usize) -> f64 {
    let (src, src_total) = word_counts(source);
    let (oth, oth_total) = word_counts(other);
    let mut ranked: Vec<(&String, &f64)> = src.iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(a.1).then_with(|| a.0.cmp(b.0)));
    ranked
        .into_iter()
        .take(top)
        .map(|(w, &c)| {
            let p = c / src_total.max(1.0);
            let q = oth.get(w).copied().unwrap_or(0.0) / oth_total.max(1.0);
            (p - q).abs()
        })
        .sum()
}
