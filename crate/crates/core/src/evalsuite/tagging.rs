//! BIO tagging over the entity taxonomy: sentence construction from gold
//! annotations, an encoder plus linear head, and decoding.

use std::fmt;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{mean_loss_and_grad, EvalError};
use crate::corpus::{sentence_bounds, AnnotatedNote, EntityCategory};
use crate::model::optim::Adam;
use crate::model::transformer::{backward_hidden, forward_hidden, zero_grads, Trainable};
use crate::model::vocab::{pieces, BOS};
use crate::model::{GradSet, ModelParams, Vocab};
use crate::rng::derived;

pub const NUM_LABELS: usize = 1 + 2 * EntityCategory::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BioTag {
    O,
    B(EntityCategory),
    I(EntityCategory),
}

impl BioTag {
    pub fn index(self) -> usize {
        match self {
            BioTag::O => 0,
            BioTag::B(c) => 1 + 2 * c.index(),
            BioTag::I(c) => 2 + 2 * c.index(),
        }
    }

    pub fn from_index(i: usize) -> Option<BioTag> {
        match i {
            0 => Some(BioTag::O),
            i if i < NUM_LABELS => {
                let c = EntityCategory::ALL[(i - 1) / 2];
                Some(if i % 2 == 1 { BioTag::B(c) } else { BioTag::I(c) })
            }
            _ => None,
        }
    }

    pub fn category(self) -> Option<EntityCategory> {
        match self {
            BioTag::O => None,
            BioTag::B(c) | BioTag::I(c) => Some(c),
        }
    }

    pub fn parse(s: &str) -> Option<BioTag> {
        if s == "O" {
            return Some(BioTag::O);
        }
        let (prefix, name) = s.split_once('-')?;
        let c = EntityCategory::from_tag_name(name)?;
        match prefix {
            "B" => Some(BioTag::B(c)),
            "I" => Some(BioTag::I(c)),
            _ => None,
        }
    }
}

impl fmt::Display for BioTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BioTag::O => f.write_str("O"),
            BioTag::B(c) => write!(f, "B-{}", c.tag_name()),
            BioTag::I(c) => write!(f, "I-{}", c.tag_name()),
        }
    }
}

impl Serialize for BioTag {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BioTag {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BioTag::parse(&s).ok_or_else(|| serde::de::Error::custom(format!("bad BIO tag {s:?}")))
    }
}

/// Word tokens of one sentence with their tags. `space_before[i]` records
/// whether token `i` followed a space, so the encoder sees the original pieces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub labels: Vec<BioTag>,
    #[serde(default)]
    pub space_before: Vec<bool>,
}

impl TaggedSentence {
    /// No `I-X` after `O` or after a tag of another type.
    pub fn is_well_formed(&self) -> bool {
        self.labels.len() == self.tokens.len()
            && self.labels.iter().enumerate().all(|(i, l)| match l {
                BioTag::I(c) => i > 0 && self.labels[i - 1].category() == Some(*c),
                _ => true,
            })
    }

    /// Keep only the given categories; others become `O`.
    pub fn restrict(&self, categories: &[EntityCategory]) -> TaggedSentence {
        let labels = self
            .labels
            .iter()
            .map(|l| match l.category() {
                Some(c) if categories.contains(&c) => *l,
                _ => BioTag::O,
            })
            .collect();
        TaggedSentence {
            labels,
            ..self.clone()
        }
    }

    fn piece(&self, i: usize) -> String {
        if self.space_before.get(i).copied().unwrap_or(i > 0) {
            format!(" {}", self.tokens[i])
        } else {
            self.tokens[i].clone()
        }
    }
}

/// Split a note into sentences of word tokens and tag them from the gold
/// entity spans.
pub fn tagged_sentences(note: &AnnotatedNote) -> Vec<TaggedSentence> {
    let chars: Vec<char> = note.note.text.chars().collect();
    let mut out = Vec::new();
    for (s_start, s_end) in sentence_bounds(&chars) {
        let text: String = chars[s_start..s_end].iter().collect();
        let mut sent = TaggedSentence {
            tokens: Vec::new(),
            labels: Vec::new(),
            space_before: Vec::new(),
        };
        let mut prev_entity = None;
        let mut offset = s_start;
        for p in pieces(&text) {
            let len = p.chars().count();
            let spaced = p.starts_with(' ');
            let word = p.trim_start_matches(' ');
            if !word.is_empty() && !word.chars().all(char::is_whitespace) {
                let start = offset + usize::from(spaced);
                let end = offset + len;
                let hit = note
                    .entities
                    .iter()
                    .position(|e| e.start < end && start < e.end);
                let label = match hit {
                    Some(e) if prev_entity == Some(e) => BioTag::I(note.entities[e].category),
                    Some(e) => BioTag::B(note.entities[e].category),
                    None => BioTag::O,
                };
                prev_entity = hit;
                sent.tokens.push(word.to_string());
                sent.labels.push(label);
                sent.space_before.push(spaced);
            }
            offset += len;
        }
        if !sent.tokens.is_empty() {
            out.push(sent);
        }
    }
    out
}

/// A named subset of categories scored together.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggingTask {
    pub name: String,
    pub categories: Vec<EntityCategory>,
}

pub fn default_tasks() -> Vec<TaggingTask> {
    use EntityCategory::*;
    let task = |name: &str, categories: Vec<EntityCategory>| TaggingTask {
        name: name.to_string(),
        categories,
    };
    vec![
        task("medication", vec![MedicationName, Dosage, Frequency]),
        task("exam_anatomy", vec![ExaminationName, BodyStructure, Age]),
        task("chem_disease", vec![MedicationName, SymptomOrSign]),
        task("disease", vec![SymptomOrSign]),
    ]
}

/// Encoder plus a linear per-token head stored as the extra tensors
/// `head.w` (labels × d_model) and `head.b` (1 × labels).
#[derive(Debug, Clone, PartialEq)]
pub struct Tagger {
    pub model: ModelParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaggerSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

struct Encoded {
    ids: Vec<u32>,
    /// Position in `ids` of each token's first piece id, for tokens that fit.
    word_pos: Vec<usize>,
}

fn encode_sentence(vocab: &Vocab, sent: &TaggedSentence, context_len: usize) -> Encoded {
    let mut ids = vec![BOS];
    let mut word_pos = Vec::with_capacity(sent.tokens.len());
    for i in 0..sent.tokens.len() {
        let mut piece_ids = Vec::new();
        vocab.encode_piece(&sent.piece(i), &mut piece_ids);
        if ids.len() + piece_ids.len() > context_len {
            break;
        }
        word_pos.push(ids.len());
        ids.extend(piece_ids);
    }
    Encoded { ids, word_pos }
}

fn head_logits(model: &ModelParams, hidden_rows: &Array2<f64>) -> Array2<f64> {
    hidden_rows.dot(&model.tensors.get("head.w").t()) + model.tensors.get("head.b")
}

fn tagger_loss_and_grad(
    model: &ModelParams,
    enc: &Encoded,
    labels: &[BioTag],
) -> Result<(f64, GradSet), EvalError> {
    let cache = forward_hidden(model, None, &enc.ids)?;
    let h = cache.hidden.select(Axis(0), &enc.word_pos);
    let mut probs = head_logits(model, &h);
    let n = enc.word_pos.len() as f64;
    let mut loss = 0.0;
    for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
        let target = labels[i].index();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let target_logit = row[target];
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += max + sum.ln() - target_logit;
        row.mapv_inplace(|v| v / sum);
        row[target] -= 1.0;
    }
    let dlogits = probs / n;
    let mut grads = zero_grads(model, None, Trainable::Base);
    grads.accumulate("head.w", &dlogits.t().dot(&h));
    grads.accumulate("head.b", &dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)));
    let dh_rows = dlogits.dot(model.tensors.get("head.w"));
    let mut d_hidden = Array2::<f64>::zeros(cache.hidden.raw_dim());
    for (i, &p) in enc.word_pos.iter().enumerate() {
        d_hidden.row_mut(p).assign(&dh_rows.row(i));
    }
    backward_hidden(model, None, &cache, &d_hidden, Trainable::Base, &mut grads);
    Ok((loss / n, grads))
}

/// Attach a fresh head to `encoder`.
pub fn init_tagger(encoder: &ModelParams, seed: u64) -> Result<Tagger, EvalError> {
    if encoder.hparams.causal {
        return Err(EvalError::Invalid("tagging needs a non-causal encoder".into()));
    }
    let d = encoder.hparams.d_model;
    let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("positive std");
    let mut rng = derived(seed, "tagger_head");
    let mut model = encoder.clone();
    model.tensors.insert(
        "head.w",
        Array2::from_shape_simple_fn((NUM_LABELS, d), || normal.sample(&mut rng)),
    );
    model.tensors.insert("head.b", Array2::zeros((1, NUM_LABELS)));
    Ok(Tagger { model })
}

/// Supervised fine-tuning of encoder and head with Adam on uniformly drawn
/// minibatches of sentences.
pub fn train_tagger(
    encoder: &ModelParams,
    vocab: &Vocab,
    train: &[TaggedSentence],
    schedule: &TaggerSchedule,
    seed: u64,
) -> Result<Tagger, EvalError> {
    let mut tagger = init_tagger(encoder, seed)?;
    let ctx = encoder.hparams.context_len;
    let data: Vec<(Encoded, &TaggedSentence)> = train
        .iter()
        .map(|s| (encode_sentence(vocab, s, ctx), s))
        .filter(|(e, _)| !e.word_pos.is_empty())
        .collect();
    if data.is_empty() {
        return Err(EvalError::EmptyTrainingSet);
    }
    if schedule.batch_size == 0 {
        return Err(EvalError::Invalid("batch_size must be positive".into()));
    }
    let mut adam = Adam::new(schedule.lr);
    let mut rng = derived(seed, "tagger_batches");
    for step in 0..schedule.steps {
        let batch: Vec<usize> = (0..schedule.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let model = &tagger.model;
        let (loss, grad) = mean_loss_and_grad(&batch, |i| {
            let (enc, sent) = &data[i];
            tagger_loss_and_grad(model, enc, &sent.labels)
        })?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(EvalError::Diverged { step });
        }
        adam.step(&mut tagger.model.tensors, &grad);
    }
    Ok(tagger)
}

/// Replace ill-formed `I-X` tags by `B-X`.
pub fn repair_bio(labels: &mut [BioTag]) {
    for i in 0..labels.len() {
        if let BioTag::I(c) = labels[i] {
            if i == 0 || labels[i - 1].category() != Some(c) {
                labels[i] = BioTag::B(c);
            }
        }
    }
}

/// Tag each sentence; tokens that do not fit the context get `O`.
pub fn predict(
    tagger: &Tagger,
    vocab: &Vocab,
    sentences: &[TaggedSentence],
) -> Result<Vec<TaggedSentence>, EvalError> {
    use rayon::prelude::*;
    let model = &tagger.model;
    sentences
        .par_iter()
        .map(|s| {
            let enc = encode_sentence(vocab, s, model.hparams.context_len);
            let mut labels = vec![BioTag::O; s.tokens.len()];
            if !enc.word_pos.is_empty() {
                let cache = forward_hidden(model, None, &enc.ids)?;
                let logits = head_logits(model, &cache.hidden.select(Axis(0), &enc.word_pos));
                for (i, row) in logits.rows().into_iter().enumerate() {
                    let best = crate::model::sample::argmax(&row.to_owned()) as usize;
                    labels[i] = BioTag::from_index(best).expect("head has NUM_LABELS rows");
                }
            }
            repair_bio(&mut labels);
            Ok(TaggedSentence {
                labels,
                ..s.clone()
            })
        })
        .collect()
}
