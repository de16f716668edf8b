//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dataclone_core::dp::OptimizerKind;
use dataclone_core::evalsuite::{MlmSchedule, TaggerSchedule};
use dataclone_core::model::LoraConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Annotate,
    Instruct,
    Train,
    Generate,
    Adapt,
    Tag,
    Audit,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Synth,
        Stage::Annotate,
        Stage::Instruct,
        Stage::Train,
        Stage::Generate,
        Stage::Adapt,
        Stage::Tag,
        Stage::Audit,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Annotate => "annotate",
            Stage::Instruct => "instruct",
            Stage::Train => "train",
            Stage::Generate => "generate",
            Stage::Adapt => "adapt",
            Stage::Tag => "tag",
            Stage::Audit => "audit",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub n_notes: usize,
    pub train_fraction: f64,
    pub note_type_mix: [f64; 3],
    /// Public documents for the vocabulary and both pretraining runs.
    pub public_docs: usize,
    /// Fresh notes for the audit's non-members and population.
    pub audit_notes: usize,
    /// Held-out notes whose sentences train the taggers; the rest are tested.
    pub tagging_train_notes: usize,
    /// Held-out notes scored for perplexity (0 = all).
    pub perplexity_notes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub tie_embeddings: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub clip_norm: f64,
    /// Expected lot size; the sampling rate is this over the training set size.
    pub expected_lot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSchedule {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub steps: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub n_prompts: usize,
    pub max_new: usize,
    pub temperature: f64,
    pub top_k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Taggers trained per row, each from its own seed; scores are averaged.
    pub repeats: usize,
}

impl TagSection {
    pub fn schedule(&self) -> TaggerSchedule {
        TaggerSchedule {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuditSection {
    pub members: usize,
    pub non_members: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub synth: u64,
    pub instruct: u64,
    pub train: u64,
    pub generate: u64,
    pub adapt: u64,
    pub tag: u64,
    pub audit: u64,
}

impl Seeds {
    /// `None` for stages without randomness.
    pub fn get(&self, stage: Stage) -> Option<u64> {
        match stage {
            Stage::Synth => Some(self.synth),
            Stage::Instruct => Some(self.instruct),
            Stage::Train => Some(self.train),
            Stage::Generate => Some(self.generate),
            Stage::Adapt => Some(self.adapt),
            Stage::Tag => Some(self.tag),
            Stage::Audit => Some(self.audit),
            Stage::Annotate | Stage::Report => None,
        }
    }

    fn slot(&mut self, stage: Stage) -> Option<&mut u64> {
        match stage {
            Stage::Synth => Some(&mut self.synth),
            Stage::Instruct => Some(&mut self.instruct),
            Stage::Train => Some(&mut self.train),
            Stage::Generate => Some(&mut self.generate),
            Stage::Adapt => Some(&mut self.adapt),
            Stage::Tag => Some(&mut self.tag),
            Stage::Audit => Some(&mut self.audit),
            Stage::Annotate | Stage::Report => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Relative paths are resolved against the config file's directory.
    pub out_dir: PathBuf,
    /// JSON-lines template set; the built-in set when absent.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub lora: LoraConfig,
    pub privacy: PrivacySection,
    pub pretrain: BatchSchedule,
    pub dp: DpSection,
    pub generate: GenerateSection,
    pub encoder: BatchSchedule,
    pub mlm: MlmSchedule,
    pub tagger: TagSection,
    pub audit: AuditSection,
    pub seeds: Seeds,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// 1-based line of the first `key =` assignment, for semantic errors.
fn key_line(text: &str, key: &str) -> usize {
    text.lines()
        .position(|l| {
            l.trim_start()
                .strip_prefix(key)
                .is_some_and(|r| r.trim_start().starts_with('='))
        })
        .map_or(0, |i| i + 1)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config {
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            message: e.message().to_string(),
        })?;
        cfg.validate(text)?;
        Ok(cfg)
    }

    /// Read, parse and resolve relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config {
            line: 0,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.out_dir = base.join(&cfg.out_dir);
        if let Some(t) = &cfg.templates {
            let t = base.join(t);
            if !t.is_file() {
                return Err(CliError::Config {
                    line: key_line(&text, "templates"),
                    message: format!("template file {} does not exist", t.display()),
                });
            }
            cfg.templates = Some(t);
        }
        Ok(cfg)
    }

    fn validate(&self, text: &str) -> Result<(), CliError> {
        let fail = |key: &str, message: String| {
            Err(CliError::Config {
                line: key_line(text, key),
                message,
            })
        };
        let c = &self.corpus;
        if c.n_notes < 2 {
            return fail("n_notes", "n_notes must be at least 2".into());
        }
        if !(c.train_fraction > 0.0 && c.train_fraction < 1.0) {
            return fail("train_fraction", "train_fraction must lie in (0, 1)".into());
        }
        let n_held = c.n_notes - (c.train_fraction * c.n_notes as f64).round() as usize;
        if c.tagging_train_notes == 0 || c.tagging_train_notes >= n_held {
            return fail(
                "tagging_train_notes",
                format!("tagging_train_notes must be in [1, {n_held}) held-out notes"),
            );
        }
        if c.public_docs == 0 {
            return fail("public_docs", "public_docs must be positive".into());
        }
        let a = &self.audit;
        if a.members == 0 || a.non_members == 0 || a.non_members >= c.audit_notes {
            return fail(
                "non_members",
                "audit needs members, non_members, and audit_notes > non_members for the population"
                    .into(),
            );
        }
        let p = &self.privacy;
        if p.epsilons.is_empty() || p.epsilons.iter().any(|e| !(*e > 0.0 && e.is_finite())) {
            return fail("epsilons", "epsilons must be a non-empty list of positive numbers".into());
        }
        if !(p.clip_norm > 0.0 && p.clip_norm.is_finite()) {
            return fail("clip_norm", "clip_norm must be positive and finite".into());
        }
        if !(p.expected_lot > 0.0) {
            return fail("expected_lot", "expected_lot must be positive".into());
        }
        if !(p.delta > 0.0 && p.delta < 1.0) {
            return fail("delta", "delta must lie in (0, 1)".into());
        }
        if self.pretrain.batch_size == 0 || self.encoder.batch_size == 0 {
            return fail("batch_size", "batch sizes must be positive".into());
        }
        if self.tagger.repeats == 0 {
            return fail("repeats", "repeats must be at least 1".into());
        }
        if self.generate.n_prompts == 0 {
            return fail("n_prompts", "n_prompts must be positive".into());
        }
        Ok(())
    }

    pub fn override_seed(&mut self, stage: Stage, seed: u64) -> Result<(), CliError> {
        match self.seeds.slot(stage) {
            Some(s) => {
                *s = seed;
                Ok(())
            }
            None => Err(CliError::Config {
                line: 0,
                message: format!("stage {stage} takes no seed"),
            }),
        }
    }

    /// Hash of everything except the output location.
    pub fn fingerprint(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("object").remove("out_dir");
        if let Some(t) = &self.templates {
            let bytes = std::fs::read(t).unwrap_or_default();
            v["templates"] = serde_json::Value::String(hex::encode(Sha256::digest(bytes)));
        }
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    /// Row names in report order: no-adapt, source, the non-private clone
    /// and one clone per epsilon.
    pub fn rows(&self) -> Vec<Row> {
        let mut rows = vec![Row::NoAdapt, Row::Source, Row::Clone(None)];
        rows.extend(self.privacy.epsilons.iter().map(|&e| Row::Clone(Some(e))));
        rows
    }

    /// Adapter variants trained in the `train` stage.
    pub fn dp_variants(&self) -> Vec<Option<f64>> {
        let mut v = vec![None];
        v.extend(self.privacy.epsilons.iter().map(|&e| Some(e)));
        v
    }
}

/// One line of the utility grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Row {
    NoAdapt,
    Source,
    /// `None` is the clone trained without noise.
    Clone(Option<f64>),
}

impl Row {
    /// Stable file-name key.
    pub fn key(self) -> String {
        match self {
            Row::NoAdapt => "no-adapt".into(),
            Row::Source => "source".into(),
            Row::Clone(e) => variant_key(e),
        }
    }

    pub fn label(self) -> String {
        match self {
            Row::NoAdapt => "no-adapt".into(),
            Row::Source => "source-data".into(),
            Row::Clone(None) => "clone w/o DP".into(),
            Row::Clone(Some(e)) => format!("clone ε={e}"),
        }
    }

    pub fn epsilon(self) -> Option<f64> {
        match self {
            Row::Clone(e) => e,
            _ => None,
        }
    }
}

pub fn variant_key(eps: Option<f64>) -> String {
    match eps {
        None => "clone-nodp".into(),
        Some(e) => format!("clone-eps{e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SAMPLE: &str = include_str!("../../../configs/smoke.toml");

    #[test]
    fn sample_config_parses() {
        let c = ExperimentConfig::parse(SAMPLE).unwrap();
        assert_eq!(c.rows().len(), 3 + c.privacy.epsilons.len());
        assert_eq!(c.fingerprint(), c.clone().fingerprint());
    }

    #[test]
    fn syntax_errors_report_their_line() {
        let bad = SAMPLE.replacen("n_notes =", "n_notes == ", 1);
        let line = key_line(SAMPLE, "n_notes");
        match ExperimentConfig::parse(&bad) {
            Err(CliError::Config { line: l, .. }) => assert_eq!(l, line),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn semantic_errors_point_at_the_key() {
        let bad = SAMPLE.replacen("train_fraction = 0.", "train_fraction = 1", 1);
        match ExperimentConfig::parse(&bad) {
            Err(CliError::Config { line, .. }) => assert_eq!(line, key_line(SAMPLE, "train_fraction")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = SAMPLE.replacen("[corpus]", "[corpus]\nbogus = 1", 1);
        assert!(matches!(ExperimentConfig::parse(&bad), Err(CliError::Config { .. })));
    }

    #[test]
    fn seed_override_changes_the_fingerprint() {
        let mut c = ExperimentConfig::parse(SAMPLE).unwrap();
        let before = c.fingerprint();
        c.override_seed(Stage::Train, 12345).unwrap();
        assert_ne!(before, c.fingerprint());
        assert!(c.override_seed(Stage::Annotate, 1).is_err());
    }

    #[test]
    fn out_dir_does_not_affect_the_fingerprint() {
        let mut c = ExperimentConfig::parse(SAMPLE).unwrap();
        let before = c.fingerprint();
        c.out_dir = PathBuf::from("/elsewhere");
        assert_eq!(before, c.fingerprint());
    }
}
