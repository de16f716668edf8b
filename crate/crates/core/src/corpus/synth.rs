use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lexicon::{
    BODY_STRUCTURES, DOSE_AMOUNTS, DOSE_UNITS, EXAMINATIONS, FREQUENCIES, MEDICATIONS, SEXES,
    SYMPTOMS,
};
use super::{CorpusError, Note, NoteType};
use crate::rng::{derived, StreamRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusProfile {
    pub n_notes: usize,
    pub seed: u64,
    /// Probabilities for CXR, DISCHARGE and PROGRESS notes, in that order.
    pub note_type_mix: [f64; 3],
}

impl CorpusProfile {
    pub fn uniform(n_notes: usize, seed: u64) -> Self {
        Self {
            n_notes,
            seed,
            note_type_mix: [1.0 / 3.0; 3],
        }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.n_notes == 0 {
            return Err(CorpusError::EmptyProfile);
        }
        if self.note_type_mix.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CorpusError::InvalidProfile(
                "note_type_mix entries must be finite and non-negative".into(),
            ));
        }
        let total: f64 = self.note_type_mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidProfile(format!(
                "note_type_mix sums to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

const CXR_OPENING: &str = "EXAMINATION: {EXAM}.";
const CXR_BODY: &[&str] = &[
    "INDICATION: {AGE} {SEX} with {SYM}.",
    "FINDINGS: There is {SYM} in the {BODY}.",
    "No {SYM} is seen.",
    "Mild {SYM} at the {BODY}.",
    "The {BODY} is unremarkable.",
    "Compared with prior {EXAM}, no change.",
    "No evidence of {SYM}.",
    "Small {SYM} in the {BODY}.",
];
const CXR_CLOSING: &[&str] = &["IMPRESSION: {SYM} in the {BODY}.", "IMPRESSION: No acute {SYM}."];

const DISCHARGE_OPENING: &str = "{AGE} {SEX} admitted with {SYM}.";
const DISCHARGE_BODY: &[&str] = &[
    "History of {SYM}.",
    "Discharged on {MED} {DOSE} {FREQ}.",
    "Continue {MED} {DOSE} {FREQ}.",
    "Patient denies {SYM}.",
    "{EXAM} showed {SYM} in the {BODY}.",
    "Follow up {EXAM} in two weeks.",
    "Started {MED} {DOSE} {FREQ} for {SYM}.",
];

const PROGRESS_OPENING: &str = "Patient reports {SYM}.";
const PROGRESS_BODY: &[&str] = &[
    "Denies {SYM} and {SYM}.",
    "Tolerating {MED} {DOSE} {FREQ}.",
    "Exam notable for {SYM} over the {BODY}.",
    "Plan: {EXAM} and continue {MED} {DOSE} {FREQ}.",
    "History of {SYM}, stable.",
    "No {SYM} today.",
    "Worsening {SYM}, recommend {EXAM}.",
];

/// Per-note patient context so age and sex stay consistent within one note.
pub(super) struct Patient {
    pub(super) age: u32,
    pub(super) sex: &'static str,
}

pub(super) fn fill(frame: &str, patient: &Patient, rng: &mut StreamRng) -> String {
    let mut out = String::with_capacity(frame.len() + 32);
    let mut rest = frame;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let close = open + rest[open..].find('}').expect("frame slots are closed");
        let slot = &rest[open + 1..close];
        match slot {
            "MED" => out.push_str(MEDICATIONS.choose(rng).expect("non-empty")),
            "DOSE" => {
                out.push_str(DOSE_AMOUNTS.choose(rng).expect("non-empty"));
                out.push(' ');
                out.push_str(DOSE_UNITS.choose(rng).expect("non-empty"));
            }
            "FREQ" => out.push_str(FREQUENCIES.choose(rng).expect("non-empty")),
            "SYM" => out.push_str(SYMPTOMS.choose(rng).expect("non-empty")),
            "EXAM" => out.push_str(EXAMINATIONS.choose(rng).expect("non-empty")),
            "BODY" => out.push_str(BODY_STRUCTURES.choose(rng).expect("non-empty")),
            "AGE" => out.push_str(&format!("{}-year-old", patient.age)),
            "SEX" => out.push_str(patient.sex),
            other => unreachable!("unknown frame slot {other}"),
        }
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    capitalize_first(&out)
}

pub(crate) fn capitalize_first(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn pick_type(mix: &[f64; 3], rng: &mut StreamRng) -> NoteType {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (t, p) in NoteType::ALL.iter().zip(mix) {
        acc += p;
        if u < acc {
            return *t;
        }
    }
    // Rounding can leave u just above the accumulated total.
    *NoteType::ALL
        .iter()
        .zip(mix)
        .rev()
        .find(|(_, p)| **p > 0.0)
        .map(|(t, _)| t)
        .expect("mix has a positive entry")
}

fn generate_text(note_type: NoteType, rng: &mut StreamRng) -> String {
    let patient = Patient {
        age: rng.random_range(18..=95),
        sex: SEXES.choose(rng).expect("non-empty"),
    };
    let (opening, body, closing, sep): (&str, &[&str], &[&str], &str) = match note_type {
        NoteType::Cxr => (CXR_OPENING, CXR_BODY, CXR_CLOSING, "\n"),
        NoteType::Discharge => (DISCHARGE_OPENING, DISCHARGE_BODY, &[], " "),
        NoteType::Progress => (PROGRESS_OPENING, PROGRESS_BODY, &[], " "),
    };
    let n_body = rng.random_range(2..=3);
    let mut sentences = vec![fill(opening, &patient, rng)];
    for frame in body.choose_multiple(rng, n_body) {
        sentences.push(fill(frame, &patient, rng));
    }
    if let Some(frame) = closing.choose(rng) {
        sentences.push(fill(frame, &patient, rng));
    }
    sentences.join(sep)
}

/// Generate `profile.n_notes` notes; a pure function of the profile.
pub fn synth_corpus(profile: &CorpusProfile) -> Result<Vec<Note>, CorpusError> {
    profile.validate()?;
    let mut rng = derived(profile.seed, "synth_corpus");
    let notes = (0..profile.n_notes)
        .map(|i| {
            let note_type = pick_type(&profile.note_type_mix, &mut rng);
            Note {
                id: format!("{:016x}-{i:06}", profile.seed),
                note_type,
                text: generate_text(note_type, &mut rng),
            }
        })
        .collect();
    Ok(notes)
}

/// Partition by seeded shuffle; each side keeps the input order.
pub fn split_corpus(
    corpus: &[Note],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<Note>, Vec<Note>), CorpusError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(train_fraction));
    }
    let n = corpus.len();
    let n_train = (train_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derived(seed, "split_corpus"));
    let mut in_train = vec![false; n];
    for &i in &order[..n_train] {
        in_train[i] = true;
    }
    let (train, heldout): (Vec<_>, Vec<_>) = corpus
        .iter()
        .cloned()
        .zip(in_train)
        .partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(n, _)| n).collect(),
        heldout.into_iter().map(|(n, _)| n).collect(),
    ))
}
