//! Entity-level weighted F1.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::tagging::{BioTag, TaggedSentence};
use super::EvalError;
use crate::corpus::EntityCategory;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    /// Gold-support-weighted mean of the per-type F1 scores.
    pub overall: f64,
    /// Keyed by tag name; covers every type seen in gold or prediction.
    pub per_type: BTreeMap<String, f64>,
    pub support: BTreeMap<String, usize>,
}

type Span = (usize, usize, usize, EntityCategory);

/// Entities as (sentence, start, end, type). An `I-X` that does not continue
/// an `X` entity opens a new one, so ill-formed predictions are still scored.
fn spans(sentences: &[TaggedSentence]) -> Vec<Span> {
    let mut out = Vec::new();
    for (s, sent) in sentences.iter().enumerate() {
        let mut open: Option<(usize, EntityCategory)> = None;
        for (i, label) in sent.labels.iter().enumerate() {
            let continues = matches!((label, open), (BioTag::I(c), Some((_, o))) if *c == o);
            if continues {
                continue;
            }
            if let Some((start, c)) = open.take() {
                out.push((s, start, i, c));
            }
            if let Some(c) = label.category() {
                open = Some((i, c));
            }
        }
        if let Some((start, c)) = open {
            out.push((s, start, sent.labels.len(), c));
        }
    }
    out
}

fn f1(tp: usize, n_pred: usize, n_gold: usize) -> f64 {
    let p = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let r = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Exact span-and-type matching. With no entities on either side the
/// prediction is perfect and scores 1.
pub fn weighted_f1(pred: &[TaggedSentence], gold: &[TaggedSentence]) -> Result<F1Report, EvalError> {
    if pred.len() != gold.len() {
        return Err(EvalError::AlignmentError(format!(
            "{} predicted sentences vs {} gold",
            pred.len(),
            gold.len()
        )));
    }
    for (i, (p, g)) in pred.iter().zip(gold).enumerate() {
        if p.tokens != g.tokens || p.labels.len() != g.labels.len() || g.labels.len() != g.tokens.len() {
            return Err(EvalError::AlignmentError(format!("sentence {i} differs in tokens")));
        }
    }
    let gold_spans = spans(gold);
    let pred_spans = spans(pred);
    let gold_set: HashSet<&Span> = gold_spans.iter().collect();
    let mut counts: BTreeMap<EntityCategory, (usize, usize, usize)> = BTreeMap::new();
    for s in &gold_spans {
        counts.entry(s.3).or_default().2 += 1;
    }
    for s in &pred_spans {
        let c = counts.entry(s.3).or_default();
        c.1 += 1;
        if gold_set.contains(s) {
            c.0 += 1;
        }
    }
    let mut report = F1Report {
        overall: 0.0,
        per_type: BTreeMap::new(),
        support: BTreeMap::new(),
    };
    if gold_spans.is_empty() {
        report.overall = if pred_spans.is_empty() { 1.0 } else { 0.0 };
    }
    let mut weighted = 0.0;
    for (cat, (tp, n_pred, n_gold)) in counts {
        let score = f1(tp, n_pred, n_gold);
        weighted += score * n_gold as f64;
        report.per_type.insert(cat.tag_name().to_string(), score);
        report.support.insert(cat.tag_name().to_string(), n_gold);
    }
    if !gold_spans.is_empty() {
        report.overall = weighted / gold_spans.len() as f64;
    }
    Ok(report)
}
