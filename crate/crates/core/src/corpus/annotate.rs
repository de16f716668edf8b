//! Rule-based clinical structuring.
//!
//! Entities come from a leftmost-longest gazetteer scan plus two surface
//! patterns (dosages like "81 mg", ages like "67-year-old"). Relations link each
//! modifier to the nearest compatible head in the same sentence, and assertions
//! come from trigger phrases earlier in the sentence.

use std::sync::OnceLock;

use super::lexicon::{self, DOSE_UNITS, NEGATION_TRIGGERS, PAST_TRIGGERS};
use super::{
    AnnotatedNote, Assertion, CorpusError, Entity, EntityCategory, Note, Relation, RelationKind,
    Temporality,
};

struct Gazetteer {
    entries: Vec<(Vec<char>, EntityCategory)>,
}

fn gazetteer() -> &'static Gazetteer {
    static G: OnceLock<Gazetteer> = OnceLock::new();
    G.get_or_init(|| {
        let mut entries = Vec::new();
        for c in EntityCategory::ALL {
            for p in lexicon::phrases(c) {
                entries.push((p.to_ascii_lowercase().chars().collect(), c));
            }
        }
        Gazetteer { entries }
    })
}

fn is_word(c: char) -> bool {
    c.is_alphanumeric()
}

fn boundary_after(chars: &[char], end: usize) -> bool {
    end == chars.len() || !is_word(chars[end])
}

fn matches_ci(chars: &[char], at: usize, pattern: &[char]) -> bool {
    at + pattern.len() <= chars.len()
        && chars[at..at + pattern.len()]
            .iter()
            .zip(pattern)
            .all(|(a, b)| a.to_ascii_lowercase() == *b)
}

fn digits_end(chars: &[char], mut i: usize) -> usize {
    while i < chars.len() && chars[i].is_ascii_digit() {
        i += 1;
    }
    i
}

/// "<number> <unit>" where number is `\d+(\.\d+)?`.
fn match_dosage(chars: &[char], at: usize) -> Option<usize> {
    let mut i = digits_end(chars, at);
    if i == at {
        return None;
    }
    if i + 1 < chars.len() && chars[i] == '.' && chars[i + 1].is_ascii_digit() {
        i = digits_end(chars, i + 1);
    }
    if i >= chars.len() || chars[i] != ' ' {
        return None;
    }
    DOSE_UNITS
        .iter()
        .filter_map(|u| {
            let unit: Vec<char> = u.chars().collect();
            let end = i + 1 + unit.len();
            (end <= chars.len() && chars[i + 1..end] == unit[..] && boundary_after(chars, end))
                .then_some(end)
        })
        .max()
}

/// "<1-3 digits>-year-old".
fn match_age(chars: &[char], at: usize) -> Option<usize> {
    let i = digits_end(chars, at);
    if i == at || i - at > 3 {
        return None;
    }
    let suffix: Vec<char> = "-year-old".chars().collect();
    let end = i + suffix.len();
    (matches_ci(chars, i, &suffix) && boundary_after(chars, end)).then_some(end)
}

/// Longest match starting at `at`; ties go to the earlier category in the taxonomy order.
fn longest_match(chars: &[char], at: usize) -> Option<(usize, EntityCategory)> {
    let mut best: Option<(usize, EntityCategory)> = None;
    let mut consider = |end: usize, cat: EntityCategory| {
        let better = match best {
            None => true,
            Some((b_end, b_cat)) => end > b_end || (end == b_end && cat.index() < b_cat.index()),
        };
        if better {
            best = Some((end, cat));
        }
    };
    for (pattern, cat) in &gazetteer().entries {
        let end = at + pattern.len();
        if matches_ci(chars, at, pattern) && boundary_after(chars, end) {
            consider(end, *cat);
        }
    }
    if let Some(end) = match_dosage(chars, at) {
        consider(end, EntityCategory::Dosage);
    }
    if let Some(end) = match_age(chars, at) {
        consider(end, EntityCategory::Age);
    }
    best
}

fn extract_entities(chars: &[char]) -> Vec<Entity> {
    let mut entities = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let word_start = is_word(chars[i]) && (i == 0 || !is_word(chars[i - 1]));
        if word_start {
            if let Some((end, category)) = longest_match(chars, i) {
                entities.push(Entity {
                    category,
                    surface: chars[i..end].iter().collect(),
                    start: i,
                    end,
                });
                i = end;
                continue;
            }
        }
        i += 1;
    }
    entities
}

/// Sentence spans in character offsets. A sentence ends after `.`, `!` or `?`
/// followed by whitespace (or end of text), or at a newline.
pub fn sentence_bounds(chars: &[char]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..chars.len() {
        let c = chars[i];
        let end_here = c == '\n'
            || (matches!(c, '.' | '!' | '?')
                && (i + 1 == chars.len() || chars[i + 1].is_whitespace()));
        if end_here {
            let end = if c == '\n' { i } else { i + 1 };
            if end > start {
                out.push((start, end));
            }
            start = i + 1;
        }
    }
    if start < chars.len() && chars[start..].iter().any(|c| !c.is_whitespace()) {
        out.push((start, chars.len()));
    }
    out
}

fn sentence_of(bounds: &[(usize, usize)], pos: usize) -> usize {
    bounds
        .iter()
        .position(|&(s, e)| pos >= s && pos < e)
        .unwrap_or(usize::MAX)
}

fn link_relations(entities: &[Entity], sentence: &[usize]) -> Vec<Relation> {
    let mut relations = Vec::new();
    for (src, e) in entities.iter().enumerate() {
        for kind in RelationKind::ALL {
            let (src_cat, tgt_cat) = kind.signature();
            if e.category != src_cat {
                continue;
            }
            // Nearest compatible head; on equal distance the left one wins.
            let nearest = entities
                .iter()
                .enumerate()
                .filter(|(j, t)| {
                    *j != src && t.category == tgt_cat && sentence[*j] == sentence[src]
                })
                .map(|(j, t)| {
                    let dist = if t.end <= e.start {
                        e.start - t.end
                    } else {
                        t.start - e.end
                    };
                    (dist, t.start, j)
                })
                .min();
            if let Some((_, _, target)) = nearest {
                relations.push(Relation {
                    kind,
                    source: src,
                    target,
                });
            }
        }
    }
    relations
}

fn trigger_before(chars: &[char], from: usize, to: usize, triggers: &[&str]) -> bool {
    triggers.iter().any(|t| {
        let pat: Vec<char> = t.chars().collect();
        (from..to).any(|i| {
            let starts_word = i == 0 || !is_word(chars[i - 1]);
            let end = i + pat.len();
            starts_word && end <= to && matches_ci(chars, i, &pat) && boundary_after(chars, end)
        })
    })
}

fn assert_entities(
    chars: &[char],
    entities: &[Entity],
    bounds: &[(usize, usize)],
    sentence: &[usize],
) -> Vec<Assertion> {
    entities
        .iter()
        .enumerate()
        .filter(|(_, e)| e.category == EntityCategory::SymptomOrSign)
        .map(|(i, e)| {
            let from = bounds.get(sentence[i]).map_or(0, |b| b.0);
            Assertion {
                entity: i,
                negated: trigger_before(chars, from, e.start, NEGATION_TRIGGERS),
                temporality: if trigger_before(chars, from, e.start, PAST_TRIGGERS) {
                    Temporality::Past
                } else {
                    Temporality::Present
                },
            }
        })
        .collect()
}

/// Extract entities, relations and assertions from one note.
pub fn annotate(note: &Note) -> Result<AnnotatedNote, CorpusError> {
    if note.text.is_empty() {
        return Err(CorpusError::EmptyNote(note.id.clone()));
    }
    let chars: Vec<char> = note.text.chars().collect();
    let entities = extract_entities(&chars);
    let bounds = sentence_bounds(&chars);
    let sentence: Vec<usize> = entities
        .iter()
        .map(|e| sentence_of(&bounds, e.start))
        .collect();
    let relations = link_relations(&entities, &sentence);
    let assertions = assert_entities(&chars, &entities, &bounds, &sentence);
    Ok(AnnotatedNote {
        note: note.clone(),
        entities,
        relations,
        assertions,
    })
}
