//! Source corpus: a seeded clinical-note generator standing in for a siloed
//! EHR export, train/held-out splitting, rule-based clinical structuring and
//! JSON-lines persistence.

mod annotate;
mod io;
pub mod lexicon;
mod public;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use annotate::{annotate, sentence_bounds};
pub use io::{load_annotated, load_notes, save_annotated, save_notes};
pub use public::{lexicon_text, public_body, public_text};
pub use synth::{split_corpus, synth_corpus, CorpusProfile};

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("corpus profile asks for zero notes")]
    EmptyProfile,
    #[error("invalid corpus profile: {0}")]
    InvalidProfile(String),
    #[error("train fraction {0} must lie strictly between 0 and 1")]
    InvalidFraction(f64),
    #[error("note text must be non-empty (note {0})")]
    EmptyNote(String),
    #[error("parse error at line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("duplicate note id {0:?}")]
    DuplicateId(String),
    #[error("I/O error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NoteType {
    #[serde(rename = "CXR")]
    Cxr,
    #[serde(rename = "DISCHARGE")]
    Discharge,
    #[serde(rename = "PROGRESS")]
    Progress,
}

impl NoteType {
    pub const ALL: [NoteType; 3] = [NoteType::Cxr, NoteType::Discharge, NoteType::Progress];

    pub fn as_str(self) -> &'static str {
        match self {
            NoteType::Cxr => "CXR",
            NoteType::Discharge => "DISCHARGE",
            NoteType::Progress => "PROGRESS",
        }
    }

    pub fn parse(s: &str) -> Option<NoteType> {
        NoteType::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for NoteType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub id: String,
    pub note_type: NoteType,
    pub text: String,
}

/// The closed clinical entity taxonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityCategory {
    MedicationName,
    Dosage,
    Frequency,
    SymptomOrSign,
    ExaminationName,
    BodyStructure,
    Age,
}

impl EntityCategory {
    pub const ALL: [EntityCategory; 7] = [
        EntityCategory::MedicationName,
        EntityCategory::Dosage,
        EntityCategory::Frequency,
        EntityCategory::SymptomOrSign,
        EntityCategory::ExaminationName,
        EntityCategory::BodyStructure,
        EntityCategory::Age,
    ];

    /// Human-readable label used in instruction blocks ("Symptom or sign").
    pub fn display_name(self) -> &'static str {
        match self {
            EntityCategory::MedicationName => "Medication name",
            EntityCategory::Dosage => "Dosage",
            EntityCategory::Frequency => "Frequency",
            EntityCategory::SymptomOrSign => "Symptom or sign",
            EntityCategory::ExaminationName => "Examination name",
            EntityCategory::BodyStructure => "Body structure",
            EntityCategory::Age => "Age",
        }
    }

    /// Upper snake case name used by template placeholders and BIO tags.
    pub fn tag_name(self) -> &'static str {
        match self {
            EntityCategory::MedicationName => "MEDICATION_NAME",
            EntityCategory::Dosage => "DOSAGE",
            EntityCategory::Frequency => "FREQUENCY",
            EntityCategory::SymptomOrSign => "SYMPTOM_OR_SIGN",
            EntityCategory::ExaminationName => "EXAMINATION_NAME",
            EntityCategory::BodyStructure => "BODY_STRUCTURE",
            EntityCategory::Age => "AGE",
        }
    }

    pub fn from_tag_name(s: &str) -> Option<EntityCategory> {
        EntityCategory::ALL.into_iter().find(|c| c.tag_name() == s)
    }

    pub fn index(self) -> usize {
        EntityCategory::ALL
            .iter()
            .position(|&c| c == self)
            .expect("category is in ALL")
    }
}

impl fmt::Display for EntityCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// A matched entity; `start`/`end` are character (Unicode scalar) offsets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub category: EntityCategory,
    pub surface: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelationKind {
    DosageOfMedication,
    FrequencyOfMedication,
    DirectionOfBody,
}

impl RelationKind {
    pub const ALL: [RelationKind; 3] = [
        RelationKind::DosageOfMedication,
        RelationKind::FrequencyOfMedication,
        RelationKind::DirectionOfBody,
    ];

    /// (source category, target category).
    pub fn signature(self) -> (EntityCategory, EntityCategory) {
        match self {
            RelationKind::DosageOfMedication => {
                (EntityCategory::Dosage, EntityCategory::MedicationName)
            }
            RelationKind::FrequencyOfMedication => {
                (EntityCategory::Frequency, EntityCategory::MedicationName)
            }
            RelationKind::DirectionOfBody => {
                (EntityCategory::BodyStructure, EntityCategory::SymptomOrSign)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub kind: RelationKind,
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Temporality {
    Past,
    Present,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assertion {
    pub entity: usize,
    pub negated: bool,
    pub temporality: Temporality,
}

/// A note together with its extracted structure.
///
/// Serialized flat: the note fields sit next to `entities`, `relations` and
/// `assertions` on the same JSON object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedNote {
    #[serde(flatten)]
    pub note: Note,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub assertions: Vec<Assertion>,
}

impl AnnotatedNote {
    /// Checks every structural invariant; returns a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        let chars: Vec<char> = self.note.text.chars().collect();
        let mut prev_end = 0usize;
        for (i, e) in self.entities.iter().enumerate() {
            if e.start >= e.end || e.end > chars.len() {
                return Err(format!("entity {i} has invalid span {}..{}", e.start, e.end));
            }
            let surface: String = chars[e.start..e.end].iter().collect();
            if surface != e.surface {
                return Err(format!("entity {i} surface {:?} != text {:?}", e.surface, surface));
            }
            if i > 0 && e.start < prev_end {
                return Err(format!("entity {i} overlaps its predecessor"));
            }
            prev_end = e.end;
        }
        for r in &self.relations {
            if r.source >= self.entities.len() || r.target >= self.entities.len() {
                return Err("relation index out of range".into());
            }
            if r.source == r.target {
                return Err("relation is a self loop".into());
            }
            let (s, t) = r.kind.signature();
            if self.entities[r.source].category != s || self.entities[r.target].category != t {
                return Err(format!("relation {:?} endpoints violate its signature", r.kind));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for a in &self.assertions {
            if a.entity >= self.entities.len() {
                return Err("assertion index out of range".into());
            }
            if !seen.insert(a.entity) {
                return Err(format!("entity {} has two assertions", a.entity));
            }
        }
        Ok(())
    }

    pub fn has_category(&self, c: EntityCategory) -> bool {
        self.entities.iter().any(|e| e.category == c)
    }

    pub fn assertion_for(&self, entity: usize) -> Option<&Assertion> {
        self.assertions.iter().find(|a| a.entity == entity)
    }
}
