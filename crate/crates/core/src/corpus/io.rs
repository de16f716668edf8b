use std::collections::HashSet;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{AnnotatedNote, CorpusError, Note};
use crate::jsonl::{self, JsonlError};

impl From<JsonlError> for CorpusError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Parse { line, message } => CorpusError::ParseError { line, message },
            JsonlError::Io { path, source } => CorpusError::Io(format!("{path}: {source}")),
        }
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = &'a str>) -> Result<(), CorpusError> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id) {
            return Err(CorpusError::DuplicateId(id.to_string()));
        }
    }
    Ok(())
}

fn save<T: Serialize>(path: &Path, records: &[T]) -> Result<(), CorpusError> {
    Ok(jsonl::save(path, records)?)
}

fn load<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CorpusError> {
    Ok(jsonl::load(path)?)
}

pub fn save_notes(path: &Path, notes: &[Note]) -> Result<(), CorpusError> {
    check_unique(notes.iter().map(|n| n.id.as_str()))?;
    save(path, notes)
}

pub fn load_notes(path: &Path) -> Result<Vec<Note>, CorpusError> {
    let notes: Vec<Note> = load(path)?;
    check_unique(notes.iter().map(|n| n.id.as_str()))?;
    Ok(notes)
}

pub fn save_annotated(path: &Path, notes: &[AnnotatedNote]) -> Result<(), CorpusError> {
    check_unique(notes.iter().map(|n| n.note.id.as_str()))?;
    save(path, notes)
}

pub fn load_annotated(path: &Path) -> Result<Vec<AnnotatedNote>, CorpusError> {
    let notes: Vec<AnnotatedNote> = load(path)?;
    check_unique(notes.iter().map(|n| n.note.id.as_str()))?;
    for (i, n) in notes.iter().enumerate() {
        n.validate().map_err(|message| CorpusError::ParseError {
            line: i + 1,
            message,
        })?;
    }
    Ok(notes)
}
