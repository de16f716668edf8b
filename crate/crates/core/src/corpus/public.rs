//! Public reference text: encyclopedic sentences over the published lexicons,
//! wrapped in the instruction block layout. It feeds vocabulary construction and
//! base-model pretraining and never touches siloed notes.

use rand::seq::IndexedRandom;
use rand::Rng;

use super::lexicon::{self, COMMON_WORDS, DOSE_AMOUNTS, DOSE_UNITS, SEXES};
use super::synth::{fill, Patient};
use super::{annotate, EntityCategory, Note, NoteType};
use crate::rng::derived;

const FRAMES: &[&str] = &[
    "{MED} is commonly given as {DOSE} {FREQ}.",
    "{MED} may be used to treat {SYM}.",
    "{EXAM} can detect {SYM} in the {BODY}.",
    "{SYM} often involves the {BODY}.",
    "Patients with {SYM} may report {SYM}.",
    "A {AGE} {SEX} may present with {SYM}.",
    "A typical dose of {MED} is {DOSE} {FREQ}.",
    "{EXAM} of the {BODY} may show {SYM}.",
    "Clinicians often record a history of {SYM} in a {AGE} {SEX}.",
    "A patient who denies {SYM} may still have {SYM}.",
    "The plan for {SYM} may include {EXAM} of the {BODY}.",
    "After {EXAM}, the impression is often no acute {SYM}.",
    "Findings on {EXAM} are compared with prior studies to judge change.",
    "Mild {SYM} is often stable and may be followed up in two weeks.",
    "Patients tolerating {MED} may continue {DOSE} {FREQ}.",
    "When {MED} is started for {SYM}, the dose is often {DOSE} {FREQ}.",
    "Evidence of {SYM} in the {BODY} is noted in many reports.",
    "A radiology report lists the examination, indication, findings and impression.",
    "Discharged patients may continue {MED} {DOSE} {FREQ} at home.",
    "There is no change in {SYM} when the {BODY} is unremarkable.",
    "Worsening {SYM} over the {BODY} may need a new {EXAM}.",
    "Small or large {SYM} can be seen on the left or right {BODY}.",
];

/// Glossary entries explaining report headings and common phrasing.
const GLOSSARY: &[&str] = &[
    "EXAMINATION: the study performed, such as {EXAM}.",
    "INDICATION: the reason for the study, such as {SYM}.",
    "FINDINGS: what {EXAM} showed in the {BODY}.",
    "IMPRESSION: a summary such as no acute {SYM}.",
    "COMPARISON: prior {EXAM} of the {BODY}.",
    "HISTORY: a {AGE} {SEX} admitted with {SYM}.",
    "PLAN: continue {MED} {DOSE} {FREQ} and recommend {EXAM}.",
    "Patient reports: symptoms such as {SYM}, today or in two weeks.",
    "Denies: the patient reports no {SYM}.",
    "No change: {SYM} is stable compared with prior {EXAM}.",
    "Tolerating: the patient takes {MED} without new {SYM}.",
    "Admitted: a patient admitted with {SYM} showed {SYM}.",
];

/// Every lexicon phrase, trigger, common word and number, each written both
/// line-initial and after a space so both piece forms are seen.
pub fn lexicon_text() -> String {
    let mut parts: Vec<String> = Vec::new();
    for c in EntityCategory::ALL {
        parts.extend(lexicon::phrases(c).iter().map(|p| p.to_string()));
    }
    for a in DOSE_AMOUNTS {
        for u in DOSE_UNITS {
            parts.push(format!("{a} {u}"));
        }
    }
    parts.extend((0..=120).map(|n| format!("{n}-year-old")));
    parts.extend(SEXES.iter().map(|s| s.to_string()));
    parts.extend(lexicon::NEGATION_TRIGGERS.iter().map(|s| s.to_string()));
    parts.extend(lexicon::PAST_TRIGGERS.iter().map(|s| s.to_string()));
    parts.extend(COMMON_WORDS.iter().map(|s| s.to_string()));
    parts
        .iter()
        .map(|p| format!("{p} {p}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// The prose body of a public document, without the instruction block.
pub fn public_body(doc: &str) -> &str {
    doc.rsplit_once("***\n").map_or(doc, |(_, body)| body)
}

/// `n_docs` public documents, deterministic per seed.
pub fn public_text(seed: u64, n_docs: usize) -> Vec<String> {
    let mut rng = derived(seed, "public_text");
    (0..n_docs)
        .map(|_| {
            let patient = Patient {
                age: rng.random_range(18..=95),
                sex: SEXES.choose(&mut rng).expect("non-empty"),
            };
            let n = rng.random_range(2..=3);
            let mut body: Vec<String> = FRAMES
                .choose_multiple(&mut rng, n)
                .map(|f| fill(f, &patient, &mut rng))
                .collect();
            let glossary = rng.random_bool(0.5);
            if glossary {
                let g = GLOSSARY.choose(&mut rng).expect("non-empty");
                body.insert(rng.random_range(0..=body.len()), fill(g, &patient, &mut rng));
            }
            let body = body.join(if glossary { "\n" } else { " " });
            let note_type = *NoteType::ALL.choose(&mut rng).expect("non-empty");
            let annotated = annotate(&Note {
                id: String::new(),
                note_type,
                text: body.clone(),
            })
            .expect("public text is non-empty");
            let mut lines: Vec<String> = Vec::new();
            for e in &annotated.entities {
                let line = format!("- {}: {}", e.category.display_name(), e.surface);
                if !lines.contains(&line) {
                    lines.push(line);
                }
            }
            format!(
                "*** ENTITIES ***\n{}\n\n*** CLINICAL NOTE OF TYPE {} ***\n{}",
                lines.join("\n"),
                note_type,
                body
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn public_text_is_deterministic() {
        assert_eq!(public_text(3, 20), public_text(3, 20));
        assert!(public_text(3, 5).iter().all(|d| d.starts_with("*** ENTITIES ***\n- ")));
        for d in public_text(3, 20) {
            let body = public_body(&d);
            assert!(!body.contains("***") && !body.is_empty() && d.ends_with(body));
        }
    }
}
