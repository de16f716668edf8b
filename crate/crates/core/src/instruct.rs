//! Instruction templates and the instruction/completion dataset.
//!
//! Two placeholder styles are supported and may be mixed in one body:
//!
//! - inline `<NAME>` placeholders, e.g. `<AGE>`, `<MEDICINE>`, `<FREQUENCY>`,
//!   `<DOSAGE>`, substituted with one entity surface each;
//! - the block form `<ENTITY_LIST>` or `<ENTITY_LIST:CAT,CAT>`, expanded to one
//!   `- Category: surface` line per matching entity in document order.
//!
//! `<NOTE_TYPE>` expands to the note type. Every template carries the
//! completion delimiter line `*** CLINICAL NOTE OF TYPE ... ***`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedNote, EntityCategory, NoteType, RelationKind, Temporality};
use crate::jsonl::{self, JsonlError};
use crate::rng::derived;

/// Joins an instruction and its completion in training sequences and prompts.
pub const COMPLETION_SEPARATOR: &str = "\n";

const DELIMITER_PREFIX: &str = "*** CLINICAL NOTE OF TYPE ";
const DELIMITER_SUFFIX: &str = " ***";

#[derive(Debug, thiserror::Error)]
pub enum InstructError {
    #[error("template needs a {0} entity the annotation does not supply")]
    TemplateUnsatisfied(EntityCategory),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("no templates given")]
    NoTemplates,
    #[error("no (note, template) combination is satisfiable")]
    NoSatisfiablePrompts,
    #[error("prompt count must be at least 1")]
    InvalidCount,
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub note_type_filter: Option<NoteType>,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructionPair {
    pub instruction: String,
    pub completion: String,
    pub source_note_id: String,
    pub template_id: String,
}

impl InstructionPair {
    /// The prompt a generator sees: the instruction plus the separator.
    pub fn prompt(&self) -> String {
        prompt_text(&self.instruction)
    }
}

pub fn prompt_text(instruction: &str) -> String {
    format!("{instruction}{COMPLETION_SEPARATOR}")
}

/// Parse the note type named by the last delimiter line of a rendered instruction.
pub fn delimiter_note_type(instruction: &str) -> Option<NoteType> {
    instruction.lines().rev().find_map(|l| {
        l.strip_prefix(DELIMITER_PREFIX)
            .and_then(|r| r.strip_suffix(DELIMITER_SUFFIX))
            .and_then(NoteType::parse)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Slot {
    NoteType,
    Entity(Selector),
    List(Vec<EntityCategory>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Selector {
    First(EntityCategory),
    NegatedSymptom,
    PastSymptom,
    /// Dosage or frequency, preferring the one linked to the selected medicine.
    OfMedicine(EntityCategory, RelationKind),
}

impl Selector {
    fn category(self) -> EntityCategory {
        match self {
            Selector::First(c) | Selector::OfMedicine(c, _) => c,
            Selector::NegatedSymptom | Selector::PastSymptom => EntityCategory::SymptomOrSign,
        }
    }
}

#[derive(Debug, Clone)]
enum Piece<'a> {
    Text(&'a str),
    Slot(Slot),
}

fn parse_slot(name: &str) -> Result<Slot, InstructError> {
    use EntityCategory as C;
    if let Some(list) = name.strip_prefix("ENTITY_LIST") {
        if list.is_empty() {
            return Ok(Slot::List(C::ALL.to_vec()));
        }
        let list = list
            .strip_prefix(':')
            .ok_or_else(|| InstructError::InvalidTemplate(format!("bad placeholder <{name}>")))?;
        let cats = list
            .split(',')
            .map(|c| {
                C::from_tag_name(c.trim()).ok_or_else(|| {
                    InstructError::InvalidTemplate(format!("unknown category {c:?} in <{name}>"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        return Ok(Slot::List(cats));
    }
    let sel = match name {
        "NOTE_TYPE" => return Ok(Slot::NoteType),
        "AGE" => Selector::First(C::Age),
        "MEDICINE" | "MEDICATION" => Selector::First(C::MedicationName),
        "DOSAGE" => Selector::OfMedicine(C::Dosage, RelationKind::DosageOfMedication),
        "FREQUENCY" => Selector::OfMedicine(C::Frequency, RelationKind::FrequencyOfMedication),
        "SYMPTOM" => Selector::First(C::SymptomOrSign),
        "NEGATED_SYMPTOM" => Selector::NegatedSymptom,
        "PAST_SYMPTOM" => Selector::PastSymptom,
        "EXAMINATION" => Selector::First(C::ExaminationName),
        "BODY" => Selector::First(C::BodyStructure),
        other => match C::from_tag_name(other) {
            Some(c) => Selector::First(c),
            None => {
                return Err(InstructError::InvalidTemplate(format!(
                    "unknown placeholder <{other}>"
                )))
            }
        },
    };
    Ok(Slot::Entity(sel))
}

fn is_placeholder_name(s: &str) -> bool {
    let head = s.split(':').next().unwrap_or("");
    !head.is_empty()
        && head.starts_with(|c: char| c.is_ascii_uppercase())
        && head.chars().all(|c| c.is_ascii_uppercase() || c == '_')
}

fn parse_body(body: &str) -> Result<Vec<Piece<'_>>, InstructError> {
    let mut pieces = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find('<') {
        let Some(close_rel) = rest[open..].find('>') else {
            break;
        };
        let inner = &rest[open + 1..open + close_rel];
        if !is_placeholder_name(inner) {
            pieces.push(Piece::Text(&rest[..open + 1]));
            rest = &rest[open + 1..];
            continue;
        }
        if open > 0 {
            pieces.push(Piece::Text(&rest[..open]));
        }
        pieces.push(Piece::Slot(parse_slot(inner)?));
        rest = &rest[open + close_rel + 1..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Text(rest));
    }
    Ok(pieces)
}

impl Template {
    pub fn new(id: &str, note_type_filter: Option<NoteType>, body: &str) -> Self {
        Self {
            id: id.into(),
            note_type_filter,
            body: body.into(),
        }
    }

    /// Placeholders must be known and the delimiter line must be present.
    pub fn validate(&self) -> Result<(), InstructError> {
        parse_body(&self.body)?;
        let has_delimiter = self.body.lines().any(|l| {
            l.strip_prefix(DELIMITER_PREFIX)
                .and_then(|r| r.strip_suffix(DELIMITER_SUFFIX))
                .is_some_and(|t| t == "<NOTE_TYPE>" || NoteType::parse(t).is_some())
        });
        if !has_delimiter {
            return Err(InstructError::InvalidTemplate(format!(
                "template {} lacks the completion delimiter line",
                self.id
            )));
        }
        Ok(())
    }

    pub fn applies_to(&self, note_type: NoteType) -> bool {
        self.note_type_filter.is_none_or(|t| t == note_type)
    }
}

/// The shipped template set, tried in this order.
pub fn default_templates() -> Vec<Template> {
    vec![
        Template::new(
            "cxr_findings",
            Some(NoteType::Cxr),
            "*** ENTITIES ***\n<ENTITY_LIST:SYMPTOM_OR_SIGN,EXAMINATION_NAME,BODY_STRUCTURE>\n\n*** CLINICAL NOTE OF TYPE CXR ***",
        ),
        Template::new(
            "discharge_medication",
            Some(NoteType::Discharge),
            "Generate a clinical note about patient of <AGE> being prescribed with <MEDICINE> at a given <FREQUENCY> with <DOSAGE>\n*** CLINICAL NOTE OF TYPE DISCHARGE ***",
        ),
        Template::new(
            "entities_any",
            None,
            "*** ENTITIES ***\n<ENTITY_LIST>\n\n*** CLINICAL NOTE OF TYPE <NOTE_TYPE> ***",
        ),
    ]
}

fn select(sel: Selector, annotation: &AnnotatedNote, medicine: Option<usize>) -> Option<usize> {
    let ents = &annotation.entities;
    let first_of = |c: EntityCategory| ents.iter().position(|e| e.category == c);
    match sel {
        Selector::First(c) => first_of(c),
        Selector::NegatedSymptom | Selector::PastSymptom => {
            annotation.assertions.iter().find_map(|a| {
                let hit = match sel {
                    Selector::NegatedSymptom => a.negated,
                    _ => a.temporality == Temporality::Past,
                };
                (hit && ents[a.entity].category == EntityCategory::SymptomOrSign)
                    .then_some(a.entity)
            })
        }
        Selector::OfMedicine(c, kind) => medicine
            .and_then(|m| {
                annotation
                    .relations
                    .iter()
                    .find(|r| r.kind == kind && r.target == m)
                    .map(|r| r.source)
            })
            .or_else(|| first_of(c)),
    }
}

/// Substitute a template against one annotation.
pub fn render_instruction(
    template: &Template,
    annotation: &AnnotatedNote,
) -> Result<String, InstructError> {
    template.validate()?;
    let pieces = parse_body(&template.body)?;
    let medicine = select(Selector::First(EntityCategory::MedicationName), annotation, None);
    let mut out = String::with_capacity(template.body.len() + 64);
    for piece in pieces {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Slot(Slot::NoteType) => out.push_str(annotation.note.note_type.as_str()),
            Piece::Slot(Slot::Entity(sel)) => {
                let idx = select(sel, annotation, medicine)
                    .ok_or(InstructError::TemplateUnsatisfied(sel.category()))?;
                out.push_str(&annotation.entities[idx].surface);
            }
            Piece::Slot(Slot::List(cats)) => {
                let mut lines: Vec<String> = Vec::new();
                for e in annotation.entities.iter().filter(|e| cats.contains(&e.category)) {
                    let line = format!("- {}: {}", e.category.display_name(), e.surface);
                    if !lines.contains(&line) {
                        lines.push(line);
                    }
                }
                if lines.is_empty() {
                    return Err(InstructError::TemplateUnsatisfied(cats[0]));
                }
                out.push_str(&lines.join("\n"));
            }
        }
    }
    Ok(out)
}

/// Result of [`build_pairs`]: one pair per satisfiable note plus the skip count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub pairs: Vec<InstructionPair>,
    pub skipped: usize,
}

fn first_satisfiable<'t>(
    templates: &'t [Template],
    note: &AnnotatedNote,
) -> Option<(&'t Template, String)> {
    templates
        .iter()
        .filter(|t| t.applies_to(note.note.note_type))
        .find_map(|t| render_instruction(t, note).ok().map(|s| (t, s)))
}

pub fn build_pairs(
    annotated: &[AnnotatedNote],
    templates: &[Template],
) -> Result<PairSet, InstructError> {
    if templates.is_empty() {
        return Err(InstructError::NoTemplates);
    }
    for t in templates {
        t.validate()?;
    }
    let mut pairs = Vec::new();
    let mut skipped = 0;
    for note in annotated {
        match first_satisfiable(templates, note) {
            Some((t, instruction)) => pairs.push(InstructionPair {
                instruction,
                completion: note.note.text.clone(),
                source_note_id: note.note.id.clone(),
                template_id: t.id.clone(),
            }),
            None => skipped += 1,
        }
    }
    Ok(PairSet { pairs, skipped })
}

/// Draw `n` prompts with replacement: a template uniformly among those with
/// at least one satisfiable note, then a note uniformly among its matches.
pub fn sample_prompts(
    annotated: &[AnnotatedNote],
    templates: &[Template],
    n: usize,
    seed: u64,
) -> Result<Vec<String>, InstructError> {
    if n == 0 {
        return Err(InstructError::InvalidCount);
    }
    let mut by_template: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for (ti, t) in templates.iter().enumerate() {
        t.validate()?;
        for note in annotated.iter().filter(|a| t.applies_to(a.note.note_type)) {
            if let Ok(s) = render_instruction(t, note) {
                by_template.entry(ti).or_default().push(s);
            }
        }
    }
    if by_template.is_empty() {
        return Err(InstructError::NoSatisfiablePrompts);
    }
    let groups: Vec<&Vec<String>> = by_template.values().collect();
    let mut rng = derived(seed, "sample_prompts");
    Ok((0..n)
        .map(|_| {
            let g = groups.choose(&mut rng).expect("non-empty");
            g.choose(&mut rng).expect("groups are non-empty").clone()
        })
        .collect())
}

pub fn save_templates(path: &Path, templates: &[Template]) -> Result<(), InstructError> {
    Ok(jsonl::save(path, templates)?)
}

pub fn load_templates(path: &Path) -> Result<Vec<Template>, InstructError> {
    let templates: Vec<Template> = jsonl::load(path)?;
    for t in &templates {
        t.validate()?;
    }
    Ok(templates)
}

pub fn save_pairs(path: &Path, pairs: &[InstructionPair]) -> Result<(), InstructError> {
    Ok(jsonl::save(path, pairs)?)
}

pub fn load_pairs(path: &Path) -> Result<Vec<InstructionPair>, InstructError> {
    Ok(jsonl::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{annotate, synth_corpus, CorpusProfile, Entity, Note};

    fn annotated(note_type: NoteType, entities: &[(EntityCategory, &str)]) -> AnnotatedNote {
        let mut text = String::new();
        let mut ents = Vec::new();
        for (c, s) in entities {
            if !text.is_empty() {
                text.push(' ');
            }
            let start = text.chars().count();
            text.push_str(s);
            ents.push(Entity {
                category: *c,
                surface: s.to_string(),
                start,
                end: start + s.chars().count(),
            });
        }
        AnnotatedNote {
            note: Note {
                id: "n1".into(),
                note_type,
                text: if text.is_empty() { "x".into() } else { text },
            },
            entities: ents,
            relations: vec![],
            assertions: vec![],
        }
    }

    fn cxr_block() -> Template {
        Template::new(
            "cxr",
            Some(NoteType::Cxr),
            "*** ENTITIES ***\n<ENTITY_LIST>\n\n*** CLINICAL NOTE OF TYPE <NOTE_TYPE> ***",
        )
    }

    #[test]
    fn block_form_matches_reference_layout() {
        let a = annotated(
            NoteType::Cxr,
            &[
                (EntityCategory::SymptomOrSign, "scarring"),
                (EntityCategory::ExaminationName, "CT chest"),
            ],
        );
        assert_eq!(
            render_instruction(&cxr_block(), &a).unwrap(),
            "*** ENTITIES ***\n- Symptom or sign: scarring\n- Examination name: CT chest\n\n*** CLINICAL NOTE OF TYPE CXR ***"
        );
    }

    #[test]
    fn no_placeholders_is_identity() {
        let t = Template::new("plain", None, "Write a note.\n*** CLINICAL NOTE OF TYPE CXR ***");
        let a = annotated(NoteType::Cxr, &[]);
        assert_eq!(render_instruction(&t, &a).unwrap(), t.body);
    }

    #[test]
    fn missing_age_is_unsatisfied() {
        let t = &default_templates()[1];
        let a = annotated(NoteType::Discharge, &[(EntityCategory::MedicationName, "aspirin")]);
        assert!(matches!(
            render_instruction(t, &a),
            Err(InstructError::TemplateUnsatisfied(EntityCategory::Age))
        ));
    }

    #[test]
    fn unknown_placeholder_and_missing_delimiter() {
        let a = annotated(NoteType::Cxr, &[(EntityCategory::Age, "50-year-old")]);
        let t = Template::new("bad", None, "<WHATEVER>\n*** CLINICAL NOTE OF TYPE CXR ***");
        assert!(matches!(
            render_instruction(&t, &a),
            Err(InstructError::InvalidTemplate(_))
        ));
        let t = Template::new("bad", None, "patient of <AGE>");
        assert!(matches!(
            render_instruction(&t, &a),
            Err(InstructError::InvalidTemplate(_))
        ));
    }

    #[test]
    fn inline_form_uses_medication_relations() {
        let note = Note {
            id: "d".into(),
            note_type: NoteType::Discharge,
            text: "54-year-old man admitted with cough. Continue heparin 5 units every 8 hours. \
                   Discharged on aspirin 81 mg twice daily."
                .into(),
        };
        let a = annotate(&note).unwrap();
        let s = render_instruction(&default_templates()[1], &a).unwrap();
        assert_eq!(
            s,
            "Generate a clinical note about patient of 54-year-old being prescribed with heparin \
             at a given every 8 hours with 5 units\n*** CLINICAL NOTE OF TYPE DISCHARGE ***"
        );
    }

    #[test]
    fn assertion_placeholders() {
        let note = Note {
            id: "p".into(),
            note_type: NoteType::Progress,
            text: "Patient reports cough. Denies fever. History of syncope.".into(),
        };
        let a = annotate(&note).unwrap();
        let t = Template::new(
            "neg",
            None,
            "<SYMPTOM> without <NEGATED_SYMPTOM>, past <PAST_SYMPTOM>\n*** CLINICAL NOTE OF TYPE <NOTE_TYPE> ***",
        );
        assert_eq!(
            render_instruction(&t, &a).unwrap(),
            "cough without fever, past syncope\n*** CLINICAL NOTE OF TYPE PROGRESS ***"
        );
    }

    #[test]
    fn two_notes_one_template() {
        let t = cxr_block();
        let a = annotated(NoteType::Cxr, &[(EntityCategory::SymptomOrSign, "cough")]);
        let mut b = a.clone();
        b.note.id = "n2".into();
        let set = build_pairs(&[a, b], &[t]).unwrap();
        assert_eq!(set.pairs.len(), 2);
        assert!(set.pairs.iter().all(|p| p.template_id == "cxr"));
        assert_eq!(set.skipped, 0);
    }

    #[test]
    fn empty_annotation_is_skipped() {
        let a = annotated(NoteType::Cxr, &[]);
        let set = build_pairs(&[a], &default_templates()).unwrap();
        assert_eq!((set.pairs.len(), set.skipped), (0, 1));
        assert!(matches!(build_pairs(&[], &[]), Err(InstructError::NoTemplates)));
    }

    // Brute force: a note with at least one entity satisfies the unfiltered
    // `entities_any` block, so it must yield exactly one pair.
    #[test]
    fn default_templates_cover_every_note_with_entities() {
        let notes = synth_corpus(&CorpusProfile::uniform(50, 12)).unwrap();
        let ann: Vec<_> = notes.iter().map(|n| annotate(n).unwrap()).collect();
        let expected = ann.iter().filter(|a| !a.entities.is_empty()).count();
        let set = build_pairs(&ann, &default_templates()).unwrap();
        assert_eq!(set.pairs.len(), expected);
        assert_eq!(set.skipped, ann.len() - expected);
        for (p, a) in set.pairs.iter().zip(ann.iter().filter(|a| !a.entities.is_empty())) {
            assert_eq!(p.completion, a.note.text);
            assert_eq!(p.source_note_id, a.note.id);
            assert_eq!(delimiter_note_type(&p.instruction), Some(a.note.note_type));
        }
    }

    #[test]
    fn substituted_values_come_from_the_note() {
        let notes = synth_corpus(&CorpusProfile::uniform(60, 13)).unwrap();
        let ann: Vec<_> = notes.iter().map(|n| annotate(n).unwrap()).collect();
        let set = build_pairs(&ann, &default_templates()).unwrap();
        for p in &set.pairs {
            let a = ann.iter().find(|a| a.note.id == p.source_note_id).unwrap();
            for line in p.instruction.lines().filter_map(|l| l.strip_prefix("- ")) {
                let (_, surface) = line.split_once(": ").unwrap();
                assert!(a.entities.iter().any(|e| e.surface == surface));
            }
        }
    }

    #[test]
    fn single_combination_repeats() {
        let a = annotated(NoteType::Cxr, &[(EntityCategory::SymptomOrSign, "cough")]);
        let prompts = sample_prompts(&[a], &[cxr_block()], 5, 1).unwrap();
        assert_eq!(prompts.len(), 5);
        assert!(prompts.iter().all(|p| p == &prompts[0]));
    }

    #[test]
    fn sampling_is_deterministic_and_balanced() {
        let notes = synth_corpus(&CorpusProfile::uniform(40, 5)).unwrap();
        let ann: Vec<_> = notes.iter().map(|n| annotate(n).unwrap()).collect();
        let templates = vec![
            Template::new("a", None, "A <SYMPTOM>\n*** CLINICAL NOTE OF TYPE <NOTE_TYPE> ***"),
            Template::new("b", None, "B <SYMPTOM>\n*** CLINICAL NOTE OF TYPE <NOTE_TYPE> ***"),
        ];
        let p1 = sample_prompts(&ann, &templates, 10_000, 3).unwrap();
        assert_eq!(p1, sample_prompts(&ann, &templates, 10_000, 3).unwrap());
        let count_a = p1.iter().filter(|p| p.starts_with("A ")).count() as f64;
        assert!((count_a - 5000.0).abs() <= 4.0 * (10_000.0f64 * 0.25).sqrt());
    }

    #[test]
    fn nothing_satisfiable() {
        let a = annotated(NoteType::Cxr, &[]);
        assert!(matches!(
            sample_prompts(&[a], &default_templates(), 3, 0),
            Err(InstructError::NoSatisfiablePrompts)
        ));
    }

    #[test]
    fn delimiter_parse() {
        assert_eq!(
            delimiter_note_type("x\n*** CLINICAL NOTE OF TYPE PROGRESS ***"),
            Some(NoteType::Progress)
        );
        assert_eq!(delimiter_note_type("nothing"), None);
    }
}
