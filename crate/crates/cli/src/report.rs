//! Markdown and JSON rendering of the experiment results.

use std::collections::BTreeMap;
use std::path::Path;

use dataclone_core::evalsuite::{default_tasks, EvalReport, PplPoint, RowResult};
use dataclone_core::jsonl::write_atomic;
use serde::{Deserialize, Serialize};

use crate::config::{variant_key, ExperimentConfig, Row};
use crate::pipeline::{
    paths, read_json, read_ppl_curve, AuditSummary, LedgerSummary, TaskScores, CONFIG_SNAPSHOT,
};
use crate::CliError;

pub const REPORT_MD: &str = "report/report.md";
pub const REPORT_JSON: &str = "report/report.json";

/// Published tagging F1 for RoBERTa adapted on each corpus; shown for
/// orientation only.
pub const REFERENCE_COLUMNS: [&str; 4] = ["i2b2_2009", "n2c2_2022", "BC5CDR", "NCBI-disease"];
pub const REFERENCE_ROWS: [(&str, [f64; 4]); 9] = [
    ("No MLM train", [0.86818, 0.81984, 0.81391, 0.86835]),
    ("Vanilla GPT-3", [0.86603, 0.82577, 0.81722, 0.87042]),
    ("Original MIMIC data", [0.87517, 0.82873, 0.82198, 0.88047]),
    ("GPT-3 DP", [0.86854, 0.82380, 0.81782, 0.87751]),
    ("GPT-3 w/o DP", [0.87287, 0.83157, 0.82078, 0.87412]),
    ("PHI-2 DP ε=2", [0.86931, 0.82640, 0.81939, 0.86318]),
    ("PHI-2 DP ε=4", [0.87441, 0.82239, 0.81972, 0.87092]),
    ("PHI-2 DP ε=8", [0.87001, 0.82673, 0.81749, 0.86477]),
    ("PHI-2 w/o DP", [0.87600, 0.82577, 0.82826, 0.87434]),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub training_data: String,
    pub f1: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub report: EvalReport,
    /// Epsilon each clone row was trained for; `None` for the noiseless clone.
    pub epsilon_targets: BTreeMap<String, Option<f64>>,
    pub curve_files: BTreeMap<String, String>,
    pub reference_note: String,
    pub reference_values: Vec<ReferenceRow>,
    pub missing: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Markdown,
    Json,
}

/// Round to the five decimals the markdown shows, so both renderings carry
/// identical numbers.
pub fn round5(x: f64) -> f64 {
    if x.is_finite() {
        format!("{x:.5}").parse().expect("formatted float parses")
    } else {
        x
    }
}

fn round_curve(c: Vec<PplPoint>) -> Vec<PplPoint> {
    c.into_iter()
        .map(|p| PplPoint {
            step: p.step,
            ppl: round5(p.ppl),
        })
        .collect()
}

fn optional<T>(path: &Path, missing: &mut Vec<String>, what: &str) -> Option<T>
where
    T: for<'de> Deserialize<'de>,
{
    if !path.is_file() {
        missing.push(what.to_string());
        return None;
    }
    match read_json(path) {
        Ok(v) => Some(v),
        Err(e) => {
            missing.push(format!("{what} (unreadable: {e})"));
            None
        }
    }
}

/// Gather whatever results exist under `dir` for the given rows.
pub fn collect(dir: &Path, fingerprint: &str, rows: &[Row]) -> ReportDocument {
    let tasks: Vec<String> = default_tasks().into_iter().map(|t| t.name).collect();
    let mut missing = Vec::new();
    let f1: Option<BTreeMap<String, TaskScores>> =
        optional(&dir.join(paths::F1), &mut missing, "tagging scores");
    let audit: Option<BTreeMap<String, AuditSummary>> =
        optional(&dir.join(paths::AUDIT_SUMMARY), &mut missing, "audit summary");
    missing.clear();

    let mut curve_files = BTreeMap::new();
    let mut curve = |key: &str, label: &str, missing: &mut Vec<String>| -> Vec<PplPoint> {
        let rel = paths::ppl(key);
        match read_ppl_curve(&dir.join(&rel)) {
            Ok(c) if !c.is_empty() => {
                curve_files.insert(label.to_string(), rel);
                round_curve(c)
            }
            _ => {
                missing.push(format!("{label} / perplexity"));
                Vec::new()
            }
        }
    };

    let mut epsilon_targets = BTreeMap::new();
    let mut out_rows = Vec::new();
    for &row in rows {
        let key = row.key();
        let label = row.label();
        let scores = f1.as_ref().and_then(|m| m.get(&key));
        let f1_by_task = tasks
            .iter()
            .map(|t| (t.clone(), scores.and_then(|s| s.tasks.get(t)).map(|&v| round5(v))))
            .collect();
        let (epsilon, mia_auc) = match row {
            Row::Clone(target) => {
                epsilon_targets.insert(label.clone(), target);
                let vk = variant_key(target);
                let ledger: Option<LedgerSummary> =
                    optional(&dir.join(paths::ledger(&vk)), &mut missing, &format!("{label} / epsilon"));
                let auc = audit.as_ref().and_then(|m| m.get(&vk)).map(|a| round5(a.auc));
                if auc.is_none() {
                    missing.push(format!("{label} / rMIA AUC"));
                }
                (ledger.and_then(|l| l.epsilon_spent).map(round5), auc)
            }
            _ => (None, None),
        };
        out_rows.push(RowResult {
            name: label.clone(),
            epsilon,
            f1_by_task,
            overall_f1: scores.map(|s| round5(s.overall)),
            perplexity_curve: curve(&key, &label, &mut missing),
            mia_auc,
        });
    }
    let mut reference_curves = BTreeMap::new();
    let babble = curve(paths::BABBLE, "babble", &mut missing);
    if !babble.is_empty() {
        reference_curves.insert("babble".to_string(), babble);
    }
    let report = EvalReport {
        config_fingerprint: fingerprint.to_string(),
        tasks,
        rows: out_rows,
        reference_curves,
    };
    let mut all_missing: Vec<String> = report
        .missing_cells()
        .into_iter()
        .map(|(r, c)| format!("{r} / {c}"))
        .collect();
    all_missing.extend(missing);
    ReportDocument {
        report,
        epsilon_targets,
        curve_files,
        reference_note: "paper-reported, not reproduced".into(),
        reference_values: REFERENCE_ROWS
            .iter()
            .map(|(name, vals)| ReferenceRow {
                training_data: name.to_string(),
                f1: REFERENCE_COLUMNS
                    .iter()
                    .zip(vals)
                    .map(|(c, v)| (c.to_string(), *v))
                    .collect(),
            })
            .collect(),
        missing: all_missing,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.5}"))
}

fn change(curve: &[PplPoint]) -> String {
    match (curve.first(), curve.last()) {
        (Some(a), Some(b)) => format!("{:+.2}%", 100.0 * (b.ppl / a.ppl - 1.0)),
        _ => "n/a".into(),
    }
}

pub fn render_markdown(doc: &ReportDocument) -> String {
    let r = &doc.report;
    let mut s = String::new();
    s.push_str("# Dataset cloning report\n\n");
    s.push_str(&format!("Config fingerprint: `{}`\n\n", r.config_fingerprint));

    s.push_str("## Tagging F1\n\n");
    s.push_str(
        "Entity-level exact match, support-weighted over entity types. Each row adapts the \
         encoder on a different corpus before tagger training.\n\n",
    );
    s.push_str(&format!("| row | {} | overall |\n", r.tasks.join(" | ")));
    s.push_str(&format!("|---|{}---:|\n", "---:|".repeat(r.tasks.len())));
    for row in &r.rows {
        let cells: Vec<String> = r
            .tasks
            .iter()
            .map(|t| cell(row.f1_by_task.get(t).copied().flatten()))
            .collect();
        s.push_str(&format!(
            "| {} | {} | {} |\n",
            row.name,
            cells.join(" | "),
            cell(row.overall_f1)
        ));
    }

    s.push_str("\n## Privacy and utility by epsilon\n\n");
    s.push_str("rMIA AUC compares each adapted generator against the base model as reference.\n\n");
    s.push_str("| row | ε target | ε spent | overall F1 | rMIA AUC |\n|---|---:|---:|---:|---:|\n");
    for row in &r.rows {
        let Some(target) = doc.epsilon_targets.get(&row.name) else {
            continue;
        };
        let target = target.map_or_else(|| "inf".to_string(), |e| format!("{e}"));
        let spent = match row.epsilon {
            Some(e) => format!("{e:.5}"),
            None if target == "inf" => "inf".into(),
            None => "n/a".into(),
        };
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            row.name,
            target,
            spent,
            cell(row.overall_f1),
            cell(row.mia_auc)
        ));
    }

    s.push_str("\n## Perplexity on held-out source notes\n\n");
    s.push_str("MLM perplexity of the encoder before and after adaptation on each corpus.\n\n");
    s.push_str("| corpus | initial | final | change | curve |\n|---|---:|---:|---:|---|\n");
    let curves = r
        .rows
        .iter()
        .map(|row| (&row.name, &row.perplexity_curve))
        .chain(r.reference_curves.iter());
    for (name, curve) in curves {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} |\n",
            name,
            cell(curve.first().map(|p| p.ppl)),
            cell(curve.last().map(|p| p.ppl)),
            change(curve),
            doc.curve_files.get(name).map_or("n/a", String::as_str)
        ));
    }

    s.push_str(&format!("\n## Reference values ({})\n\n", doc.reference_note));
    s.push_str(
        "Published weighted F1 of RoBERTa taggers on four clinical NER benchmarks. Different \
         model, data and scale; shown for orientation only.\n\n",
    );
    s.push_str(&format!(
        "| training data | {} |\n|---|{}\n",
        REFERENCE_COLUMNS.join(" | "),
        "---:|".repeat(REFERENCE_COLUMNS.len())
    ));
    for row in &doc.reference_values {
        let cells: Vec<String> = REFERENCE_COLUMNS
            .iter()
            .map(|c| format!("{:.5}", row.f1[*c]))
            .collect();
        s.push_str(&format!("| {} | {} |\n", row.training_data, cells.join(" | ")));
    }

    if !doc.missing.is_empty() {
        s.push_str("\n## Missing\n\n");
        for m in &doc.missing {
            s.push_str(&format!("- {m}\n"));
        }
    }
    s
}

pub fn render_json(doc: &ReportDocument) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("report serializes");
    s.push('\n');
    s
}

pub fn render(doc: &ReportDocument, format: Format) -> String {
    match format {
        Format::Markdown => render_markdown(doc),
        Format::Json => render_json(doc),
    }
}

/// The `report` stage: write both renderings, then fail if cells are missing.
pub fn write_reports(out: &Path, fingerprint: &str, rows: &[Row]) -> Result<Vec<String>, CliError> {
    let doc = collect(out, fingerprint, rows);
    doc.report
        .validate()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_atomic(&out.join(REPORT_MD), render_markdown(&doc).as_bytes())?;
    write_atomic(&out.join(REPORT_JSON), render_json(&doc).as_bytes())?;
    let written = vec![REPORT_MD.to_string(), REPORT_JSON.to_string()];
    if doc.missing.is_empty() {
        Ok(written)
    } else {
        Err(CliError::Incomplete {
            written,
            missing: doc.missing,
        })
    }
}

/// Render from a results directory alone. Rows come from the run's config
/// snapshot, or the default grid when there is none.
pub fn from_results(dir: &Path) -> ReportDocument {
    let snapshot: Option<ExperimentConfig> = read_json(&dir.join(CONFIG_SNAPSHOT)).ok();
    let (fingerprint, rows) = match &snapshot {
        Some(cfg) => (cfg.fingerprint(), cfg.rows()),
        None => (
            "unknown".to_string(),
            vec![
                Row::NoAdapt,
                Row::Source,
                Row::Clone(None),
                Row::Clone(Some(2.0)),
                Row::Clone(Some(4.0)),
                Row::Clone(Some(8.0)),
            ],
        ),
    };
    collect(dir, &fingerprint, &rows)
}
