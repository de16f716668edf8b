//! The pipeline stages. Each stage reads upstream artifacts from the output
//! directory, writes its own atomically, and records both in the manifest.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use dataclone_core::corpus::{
    annotate, lexicon_text, load_annotated, public_body, load_notes, public_text, save_annotated, save_notes,
    split_corpus, synth_corpus, AnnotatedNote, CorpusProfile, Note,
};
use dataclone_core::dp::{
    dp_train, train_base, write_loss_curve, OptimizerKind, PrivacySpec, Schedule, TrainExample,
};
use dataclone_core::evalsuite::{
    default_tasks, encode_document, generate_clone, mlm_adapt, perplexity_ids, predict,
    rmia_audit, tagged_sentences, train_tagger, weighted_f1, LossKind, MiaCandidate, MlmSchedule,
    PplPoint, Scorer, TaggedSentence,
};
use dataclone_core::instruct::{
    build_pairs, default_templates, load_pairs, load_templates, sample_prompts, save_pairs,
    save_templates, InstructionPair,
};
use dataclone_core::jsonl::{self, write_atomic};
use dataclone_core::model::checkpoint::{load_adapter, load_model, save_adapter, save_model};
use dataclone_core::model::transformer::{init_model, HParams};
use dataclone_core::model::{Decoding, LoraAdapter, ModelParams, Vocab};
use dataclone_core::rng::{derive_seed, derived};
use serde::{Deserialize, Serialize};

use crate::config::{variant_key, ExperimentConfig, Row, Stage};
use crate::manifest::{hash_bytes, hash_file, Manifest, StageRecord};
use crate::report;
use crate::CliError;

pub const CONFIG_SNAPSHOT: &str = "config.json";
const LOCK_FILE: &str = ".lock";

/// Exclusive ownership of an output directory for one process.
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(out_dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(CliError::Locked(path)),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Stage {
    pub fn dependencies(self) -> &'static [Stage] {
        use Stage::*;
        match self {
            Synth | Report => &[],
            Annotate => &[Synth],
            Instruct => &[Annotate],
            Train => &[Synth, Instruct],
            Generate => &[Train, Instruct],
            Adapt => &[Synth, Train, Generate],
            Tag => &[Annotate, Train, Adapt],
            Audit => &[Train, Instruct],
        }
    }
}

/// Config values a stage reads, hashed into its manifest record.
fn stage_params(cfg: &ExperimentConfig, stage: Stage) -> serde_json::Value {
    use serde_json::json;
    match stage {
        Stage::Synth => json!({ "corpus": cfg.corpus }),
        Stage::Annotate => json!({}),
        Stage::Instruct => json!({
            "templates": cfg.templates.as_ref().map(|p| hash_file(p).unwrap_or_default()),
            "n_prompts": cfg.generate.n_prompts,
        }),
        Stage::Train => json!({
            "model": cfg.model, "lora": cfg.lora, "privacy": cfg.privacy,
            "pretrain": cfg.pretrain, "dp": cfg.dp,
        }),
        Stage::Generate => json!({ "generate": cfg.generate, "epsilons": cfg.privacy.epsilons }),
        Stage::Adapt => json!({
            "encoder": cfg.encoder, "mlm": cfg.mlm,
            "perplexity_notes": cfg.corpus.perplexity_notes,
            "epsilons": cfg.privacy.epsilons,
        }),
        Stage::Tag => json!({
            "tagger": cfg.tagger,
            "tagging_train_notes": cfg.corpus.tagging_train_notes,
            "epsilons": cfg.privacy.epsilons,
        }),
        Stage::Audit => json!({ "audit": cfg.audit, "epsilons": cfg.privacy.epsilons }),
        Stage::Report => json!({ "fingerprint": cfg.fingerprint() }),
    }
}

/// Whether the stage ran (`false` when its record was already current).
pub fn run_stage(cfg: &ExperimentConfig, stage: Stage) -> Result<bool, CliError> {
    let out = cfg.out_dir.as_path();
    let _lock = OutDirLock::acquire(out)?;
    let mut manifest = Manifest::load(out)?;
    let mut inputs = BTreeMap::new();
    for &dep in stage.dependencies() {
        let outputs = manifest
            .intact_outputs(dep, out)
            .ok_or(CliError::MissingDependency(dep))?;
        inputs.extend(outputs.iter().map(|(k, v)| (k.clone(), v.clone())));
    }
    let mut record = StageRecord {
        seed: cfg.seeds.get(stage),
        params: hash_bytes(stage_params(cfg, stage).to_string().as_bytes()),
        inputs,
        outputs: BTreeMap::new(),
    };
    if stage != Stage::Report && manifest.is_current(stage, &record, out) {
        return Ok(false);
    }
    let mut snapshot = serde_json::to_string_pretty(cfg).expect("config serializes");
    snapshot.push('\n');
    write_atomic(&out.join(CONFIG_SNAPSHOT), snapshot.as_bytes())?;
    let ctx = Ctx { cfg, out };
    let seed = record.seed.unwrap_or(0);
    let produced = match stage {
        Stage::Synth => ctx.synth(seed),
        Stage::Annotate => ctx.annotate(),
        Stage::Instruct => ctx.instruct(seed),
        Stage::Train => ctx.train(seed),
        Stage::Generate => ctx.generate(seed),
        Stage::Adapt => ctx.adapt(seed),
        Stage::Tag => ctx.tag(seed),
        Stage::Audit => ctx.audit(seed),
        Stage::Report => report::write_reports(out, &cfg.fingerprint(), &cfg.rows()),
    };
    let (files, incomplete) = match produced {
        Ok(files) => (files, None),
        Err(CliError::Incomplete { written, missing }) => (written, Some(missing)),
        Err(e) => return Err(e),
    };
    for rel in files {
        let h = hash_file(&out.join(&rel))?;
        record.outputs.insert(rel, h);
    }
    manifest.tool_version = env!("CARGO_PKG_VERSION").to_string();
    manifest.config_fingerprint = cfg.fingerprint();
    manifest.stages.insert(stage, record);
    manifest.save(out)?;
    match incomplete {
        Some(missing) => Err(CliError::Incomplete {
            written: Vec::new(),
            missing,
        }),
        None => Ok(true),
    }
}

/// Every stage in order.
pub fn run_all(cfg: &ExperimentConfig) -> Result<(), CliError> {
    for stage in Stage::ALL {
        run_stage(cfg, stage)?;
    }
    Ok(())
}

pub mod paths {
    pub const SOURCE_TRAIN: &str = "synth/source_train.jsonl";
    pub const SOURCE_HELDOUT: &str = "synth/source_heldout.jsonl";
    pub const AUDIT_POOL: &str = "synth/audit_pool.jsonl";
    pub const PUBLIC: &str = "synth/public.jsonl";
    pub const ANN_TRAIN: &str = "annotate/train.jsonl";
    pub const ANN_HELDOUT: &str = "annotate/heldout.jsonl";
    pub const ANN_AUDIT: &str = "annotate/audit.jsonl";
    pub const TEMPLATES: &str = "instruct/templates.jsonl";
    pub const PAIRS: &str = "instruct/pairs.jsonl";
    pub const AUDIT_PAIRS: &str = "instruct/audit_pairs.jsonl";
    pub const PROMPTS: &str = "instruct/prompts.jsonl";
    pub const VOCAB: &str = "train/vocab.json";
    pub const BASE: &str = "train/base.ckpt";
    pub const BASE_LOSS: &str = "train/base_loss.csv";
    pub const GENERATE_SUMMARY: &str = "generate/summary.json";
    pub const BABBLE: &str = "babble";
    pub const ENCODER_BASE: &str = "adapt/encoder_base.ckpt";
    pub const F1: &str = "tag/f1.json";
    pub const AUDIT_SUMMARY: &str = "audit/summary.json";

    pub fn adapter(key: &str) -> String {
        format!("train/{key}.ckpt")
    }
    pub fn dp_loss(key: &str) -> String {
        format!("train/{key}_loss.csv")
    }
    pub fn ledger(key: &str) -> String {
        format!("train/{key}_ledger.json")
    }
    pub fn clone_notes(key: &str) -> String {
        format!("generate/{key}.jsonl")
    }
    pub fn encoder(key: &str) -> String {
        format!("adapt/{key}.ckpt")
    }
    pub fn ppl(key: &str) -> String {
        format!("adapt/{key}_ppl.csv")
    }
    pub fn mia_records(key: &str) -> String {
        format!("audit/{key}_records.jsonl")
    }
}

/// Privacy outcome of one adapter run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub variant: String,
    pub epsilon_target: Option<f64>,
    /// `None` when no noise was added.
    pub epsilon_spent: Option<f64>,
    pub delta: f64,
    pub noise_multiplier: f64,
    pub clip_norm: f64,
    pub sampling_rate: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub notes: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScores {
    pub tasks: BTreeMap<String, f64>,
    pub overall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub auc: f64,
    pub members: usize,
    pub non_members: usize,
    pub population: usize,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_ppl_curve(path: &Path, curve: &[PplPoint]) -> Result<(), CliError> {
    let mut text = String::from("step,ppl\n");
    for p in curve {
        text.push_str(&format!("{},{}\n", p.step, p.ppl));
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

pub(crate) fn read_ppl_curve(path: &Path) -> Result<Vec<PplPoint>, CliError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (s, p) = l
                .split_once(',')
                .ok_or_else(|| CliError::Runtime(format!("{}: bad row {l:?}", path.display())))?;
            let bad = |e: String| CliError::Runtime(format!("{}: {e}", path.display()));
            Ok(PplPoint {
                step: s.parse().map_err(|e| bad(format!("{e}")))?,
                ppl: p.parse().map_err(|e| bad(format!("{e}")))?,
            })
        })
        .collect()
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
}

impl Ctx<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn hparams(&self, vocab: &Vocab, causal: bool) -> HParams {
        let m = &self.cfg.model;
        HParams {
            vocab_size: vocab.len(),
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            context_len: m.context_len,
            causal,
            tie_embeddings: m.tie_embeddings,
        }
    }

    fn vocab(&self) -> Result<Vocab, CliError> {
        read_json(&self.path(paths::VOCAB))
    }

    fn public(&self) -> Result<Vec<String>, CliError> {
        Ok(jsonl::load(&self.path(paths::PUBLIC))?)
    }

    fn base(&self) -> Result<(ModelParams, String), CliError> {
        Ok(load_model(&self.path(paths::BASE))?)
    }

    fn synth(&self, seed: u64) -> Result<Vec<String>, CliError> {
        let c = &self.cfg.corpus;
        let profile = |n_notes, label| CorpusProfile {
            n_notes,
            seed: derive_seed(seed, label),
            note_type_mix: c.note_type_mix,
        };
        let notes = synth_corpus(&profile(c.n_notes, "source"))?;
        let (train, held) = split_corpus(&notes, c.train_fraction, derive_seed(seed, "split"))?;
        let audit = synth_corpus(&profile(c.audit_notes, "audit"))?;
        let public = public_text(derive_seed(seed, "public"), c.public_docs);
        save_notes(&self.path(paths::SOURCE_TRAIN), &train)?;
        save_notes(&self.path(paths::SOURCE_HELDOUT), &held)?;
        save_notes(&self.path(paths::AUDIT_POOL), &audit)?;
        jsonl::save(&self.path(paths::PUBLIC), &public)?;
        Ok(vec![
            paths::SOURCE_TRAIN.into(),
            paths::SOURCE_HELDOUT.into(),
            paths::AUDIT_POOL.into(),
            paths::PUBLIC.into(),
        ])
    }

    fn annotate(&self) -> Result<Vec<String>, CliError> {
        let mut out = Vec::new();
        for (src, dst) in [
            (paths::SOURCE_TRAIN, paths::ANN_TRAIN),
            (paths::SOURCE_HELDOUT, paths::ANN_HELDOUT),
            (paths::AUDIT_POOL, paths::ANN_AUDIT),
        ] {
            let notes = load_notes(&self.path(src))?;
            let annotated = notes.iter().map(annotate).collect::<Result<Vec<_>, _>>()?;
            save_annotated(&self.path(dst), &annotated)?;
            out.push(dst.to_string());
        }
        Ok(out)
    }

    fn instruct(&self, seed: u64) -> Result<Vec<String>, CliError> {
        let templates = match &self.cfg.templates {
            Some(p) => load_templates(p)?,
            None => default_templates(),
        };
        let train = load_annotated(&self.path(paths::ANN_TRAIN))?;
        let audit = load_annotated(&self.path(paths::ANN_AUDIT))?;
        let pairs = build_pairs(&train, &templates)?;
        let audit_pairs = build_pairs(&audit, &templates)?;
        let prompts = sample_prompts(&train, &templates, self.cfg.generate.n_prompts, seed)?;
        save_templates(&self.path(paths::TEMPLATES), &templates)?;
        save_pairs(&self.path(paths::PAIRS), &pairs.pairs)?;
        save_pairs(&self.path(paths::AUDIT_PAIRS), &audit_pairs.pairs)?;
        jsonl::save(&self.path(paths::PROMPTS), &prompts)?;
        Ok(vec![
            paths::TEMPLATES.into(),
            paths::PAIRS.into(),
            paths::AUDIT_PAIRS.into(),
            paths::PROMPTS.into(),
        ])
    }

    fn examples(&self, vocab: &Vocab, pairs: &[InstructionPair]) -> Vec<TrainExample> {
        pairs
            .iter()
            .filter_map(|p| TrainExample::from_pair(vocab, p, self.cfg.model.context_len))
            .collect()
    }

    fn train(&self, seed: u64) -> Result<Vec<String>, CliError> {
        let cfg = self.cfg;
        let public = self.public()?;
        let mut vocab_text = public.clone();
        vocab_text.push(lexicon_text());
        let vocab = Vocab::build(&vocab_text, cfg.model.vocab_size)?;
        write_json(&self.path(paths::VOCAB), &vocab)?;
        let mut outputs = vec![paths::VOCAB.to_string()];

        let pub_ex: Vec<TrainExample> = public
            .iter()
            .filter_map(|t| TrainExample::from_text(&vocab, t, cfg.model.context_len))
            .collect();
        let init = init_model(self.hparams(&vocab, true), derive_seed(seed, "base_init"))?;
        let pt = &cfg.pretrain;
        let rate = (pt.batch_size as f64 / pub_ex.len().max(1) as f64).min(1.0);
        let (base, curve) = train_base(
            init,
            &pub_ex,
            &PrivacySpec::non_private(rate, pt.steps),
            &Schedule {
                lr: pt.lr,
                steps: pt.steps,
                optimizer: OptimizerKind::Adam,
            },
            derive_seed(seed, "pretrain"),
        )?;
        save_model(&self.path(paths::BASE), &base)?;
        write_loss_curve(&self.path(paths::BASE_LOSS), &curve)?;
        outputs.extend([paths::BASE.to_string(), paths::BASE_LOSS.to_string()]);
        // Continue from the stored weights so later stages see the same model.
        let (base, checksum) = self.base()?;

        let pairs = load_pairs(&self.path(paths::PAIRS))?;
        let examples = self.examples(&vocab, &pairs);
        let p = &cfg.privacy;
        let rate = (p.expected_lot / examples.len().max(1) as f64).min(1.0);
        let schedule = Schedule {
            lr: cfg.dp.lr,
            steps: cfg.dp.steps,
            optimizer: cfg.dp.optimizer,
        };
        let adapter0 = LoraAdapter::init(&base, cfg.lora.clone(), derive_seed(seed, "lora_init"))?;
        for eps in cfg.dp_variants() {
            let key = variant_key(eps);
            let spec = PrivacySpec {
                epsilon_target: eps,
                delta: p.delta,
                clip_norm: p.clip_norm,
                noise_multiplier: if eps.is_none() { Some(0.0) } else { None },
                sampling_rate: rate,
                steps: cfg.dp.steps,
            }
            .resolve()?;
            let (adapter, ledger, curve) = dp_train(
                &base,
                adapter0.clone(),
                &examples,
                &spec,
                &schedule,
                derive_seed(seed, &format!("dp/{key}")),
            )?;
            save_adapter(&self.path(&paths::adapter(&key)), &adapter, &checksum)?;
            write_loss_curve(&self.path(&paths::dp_loss(&key)), &curve)?;
            let spent = ledger.epsilon();
            write_json(
                &self.path(&paths::ledger(&key)),
                &LedgerSummary {
                    variant: key.clone(),
                    epsilon_target: eps,
                    epsilon_spent: spent.is_finite().then_some(spent),
                    delta: p.delta,
                    noise_multiplier: spec.sigma()?,
                    clip_norm: p.clip_norm,
                    sampling_rate: rate,
                    steps: cfg.dp.steps,
                },
            )?;
            outputs.extend([paths::adapter(&key), paths::dp_loss(&key), paths::ledger(&key)]);
        }
        Ok(outputs)
    }

    fn generate(&self, seed: u64) -> Result<Vec<String>, CliError> {
        let g = &self.cfg.generate;
        let vocab = self.vocab()?;
        let (base, checksum) = self.base()?;
        let prompts: Vec<String> = jsonl::load(&self.path(paths::PROMPTS))?;
        let decoding = Decoding {
            max_new: g.max_new,
            temperature: g.temperature,
            top_k: g.top_k,
            seed: 0,
        };
        let mut summary = BTreeMap::new();
        let mut outputs = Vec::new();
        let mut emit = |key: String, notes: Vec<Note>, dropped: usize| -> Result<(), CliError> {
            save_notes(&self.path(&paths::clone_notes(&key)), &notes)?;
            outputs.push(paths::clone_notes(&key));
            summary.insert(
                key,
                GenerateSummary {
                    notes: notes.len(),
                    dropped,
                },
            );
            Ok(())
        };
        for eps in self.cfg.dp_variants() {
            let key = variant_key(eps);
            let adapter = load_adapter(&self.path(&paths::adapter(&key)), &checksum)?;
            let clone = generate_clone(
                &base,
                Some(&adapter),
                &vocab,
                &prompts,
                &decoding,
                derive_seed(seed, &key),
            )?;
            emit(key, clone.notes, clone.dropped)?;
        }
        let untrained = init_model(base.hparams, derive_seed(seed, "babble_init"))?;
        let babble = generate_clone(
            &untrained,
            None,
            &vocab,
            &prompts,
            &decoding,
            derive_seed(seed, paths::BABBLE),
        )?;
        emit(paths::BABBLE.into(), babble.notes, babble.dropped)?;
        write_json(&self.path(paths::GENERATE_SUMMARY), &summary)?;
        outputs.push(paths::GENERATE_SUMMARY.into());
        Ok(outputs)
    }

    fn documents(&self, vocab: &Vocab, notes: &[Note]) -> Vec<Vec<u32>> {
        notes
            .iter()
            .map(|n| encode_document(vocab, &n.text, self.cfg.model.context_len))
            .collect()
    }

    fn adapt(&self, seed: u64) -> Result<Vec<String>, CliError> {
        let cfg = self.cfg;
        let vocab = self.vocab()?;
        let ctx_len = cfg.model.context_len;
        let public: Vec<Vec<u32>> = self
            .public()?
            .iter()
            .map(|t| encode_document(&vocab, public_body(t), ctx_len))
            .collect();
        let mut held = load_notes(&self.path(paths::SOURCE_HELDOUT))?;
        if cfg.corpus.perplexity_notes > 0 {
            held.truncate(cfg.corpus.perplexity_notes);
        }
        let eval = self.documents(&vocab, &held);
        let mask_seed = derive_seed(seed, "ppl_mask");

        let init = init_model(self.hparams(&vocab, false), derive_seed(seed, "encoder_init"))?;
        let e = &cfg.encoder;
        let (encoder, _) = mlm_adapt(
            &init,
            &public,
            &MlmSchedule {
                steps: e.steps,
                batch_size: e.batch_size,
                lr: e.lr,
                eval_every: e.steps.max(1),
            },
            &eval,
            mask_seed,
            derive_seed(seed, "encoder_pretrain"),
        )?;
        save_model(&self.path(paths::ENCODER_BASE), &encoder)?;
        let (encoder, _) = load_model(&self.path(paths::ENCODER_BASE))?;
        let mut outputs = vec![paths::ENCODER_BASE.to_string()];

        let initial = perplexity_ids(&encoder, None, &eval, LossKind::Mlm { mask_seed })?;
        let no_adapt = Row::NoAdapt.key();
        write_ppl_curve(
            &self.path(&paths::ppl(&no_adapt)),
            &[PplPoint {
                step: 0,
                ppl: initial,
            }],
        )?;
        outputs.push(paths::ppl(&no_adapt));

        let mut corpora: Vec<(String, Vec<Note>)> = vec![(
            Row::Source.key(),
            load_notes(&self.path(paths::SOURCE_TRAIN))?,
        )];
        for eps in cfg.dp_variants() {
            let key = variant_key(eps);
            let notes = load_notes(&self.path(&paths::clone_notes(&key)))?;
            corpora.push((key, notes));
        }
        corpora.push((
            paths::BABBLE.into(),
            load_notes(&self.path(&paths::clone_notes(paths::BABBLE)))?,
        ));
        for (key, notes) in corpora {
            let docs = self.documents(&vocab, &notes);
            let (adapted, curve) = mlm_adapt(
                &encoder,
                &docs,
                &cfg.mlm,
                &eval,
                mask_seed,
                derive_seed(seed, "mlm"),
            )?;
            save_model(&self.path(&paths::encoder(&key)), &adapted)?;
            write_ppl_curve(&self.path(&paths::ppl(&key)), &curve)?;
            outputs.extend([paths::encoder(&key), paths::ppl(&key)]);
        }
        Ok(outputs)
    }

    fn tag(&self, seed: u64) -> Result<Vec<String>, CliError> {
        let cfg = self.cfg;
        let vocab = self.vocab()?;
        let held: Vec<AnnotatedNote> = load_annotated(&self.path(paths::ANN_HELDOUT))?;
        let split = cfg.corpus.tagging_train_notes.min(held.len());
        let train: Vec<TaggedSentence> = held[..split].iter().flat_map(tagged_sentences).collect();
        let test: Vec<TaggedSentence> = held[split..].iter().flat_map(tagged_sentences).collect();
        let tasks = default_tasks();
        let mut scores = BTreeMap::new();
        for row in cfg.rows() {
            let key = row.key();
            let path = match row {
                Row::NoAdapt => self.path(paths::ENCODER_BASE),
                _ => self.path(&paths::encoder(&key)),
            };
            let (encoder, _) = load_model(&path)?;
            let reps = cfg.tagger.repeats;
            let mut by_task: BTreeMap<String, f64> = BTreeMap::new();
            let mut overall = 0.0;
            for r in 0..reps {
                let tagger = train_tagger(
                    &encoder,
                    &vocab,
                    &train,
                    &cfg.tagger.schedule(),
                    derive_seed(seed, &format!("tagger/{r}")),
                )?;
                let pred = predict(&tagger, &vocab, &test)?;
                for t in &tasks {
                    let p: Vec<_> = pred.iter().map(|s| s.restrict(&t.categories)).collect();
                    let g: Vec<_> = test.iter().map(|s| s.restrict(&t.categories)).collect();
                    *by_task.entry(t.name.clone()).or_default() +=
                        weighted_f1(&p, &g)?.overall / reps as f64;
                }
                overall += weighted_f1(&pred, &test)?.overall / reps as f64;
            }
            scores.insert(
                key,
                TaskScores {
                    tasks: by_task,
                    overall,
                },
            );
        }
        write_json(&self.path(paths::F1), &scores)?;
        Ok(vec![paths::F1.into()])
    }

    fn audit(&self, seed: u64) -> Result<Vec<String>, CliError> {
        let a = &self.cfg.audit;
        let vocab = self.vocab()?;
        let (base, checksum) = self.base()?;
        let train = self.examples(&vocab, &load_pairs(&self.path(paths::PAIRS))?);
        let fresh = self.examples(&vocab, &load_pairs(&self.path(paths::AUDIT_PAIRS))?);
        if train.len() < a.members || fresh.len() <= a.non_members {
            return Err(CliError::Runtime(format!(
                "audit needs {} members and more than {} fresh examples; have {} and {}",
                a.members,
                a.non_members,
                train.len(),
                fresh.len()
            )));
        }
        let mut rng = derived(seed, "members");
        let mut member_idx = rand::seq::index::sample(&mut rng, train.len(), a.members).into_vec();
        member_idx.sort_unstable();
        let mut candidates: Vec<MiaCandidate> = member_idx
            .iter()
            .map(|&i| MiaCandidate {
                id: format!("member-{i:06}"),
                example: train[i].clone(),
                member: true,
            })
            .collect();
        candidates.extend(fresh[..a.non_members].iter().enumerate().map(|(i, e)| {
            MiaCandidate {
                id: format!("fresh-{i:06}"),
                example: e.clone(),
                member: false,
            }
        }));
        let population = &fresh[a.non_members..];
        let reference = Scorer {
            params: &base,
            adapter: None,
        };
        let mut summary = BTreeMap::new();
        let mut outputs = Vec::new();
        for eps in self.cfg.dp_variants() {
            let key = variant_key(eps);
            let adapter = load_adapter(&self.path(&paths::adapter(&key)), &checksum)?;
            let target = Scorer {
                params: &base,
                adapter: Some(&adapter),
            };
            let (records, auc) = rmia_audit(&target, &reference, &candidates, population)?;
            jsonl::save(&self.path(&paths::mia_records(&key)), &records)?;
            outputs.push(paths::mia_records(&key));
            summary.insert(
                key,
                AuditSummary {
                    auc,
                    members: a.members,
                    non_members: a.non_members,
                    population: population.len(),
                },
            );
        }
        write_json(&self.path(paths::AUDIT_SUMMARY), &summary)?;
        outputs.push(paths::AUDIT_SUMMARY.into());
        Ok(outputs)
    }
}
