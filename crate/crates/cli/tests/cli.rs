use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

const SMOKE: &str = include_str!("../../../configs/smoke.toml");

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dataclone"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A config file in `dir` with `out_dir = "out"`, optionally edited.
fn write_config(dir: &Path, edit: impl Fn(String) -> String) -> PathBuf {
    let text = SMOKE.replacen("out_dir = \"../runs/smoke\"", "out_dir = \"out\"", 1);
    let path = dir.join("exp.toml");
    fs::write(&path, edit(text)).unwrap();
    path
}

fn stage(cfg: &Path, name: &str) -> Output {
    run(&[name, "--config", cfg.to_str().unwrap()])
}

/// One complete smoke run shared by the read-only tests.
fn smoke_run() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), |t| t);
        let o = stage(&cfg, "all");
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        dir
    })
    .path()
}

#[test]
fn train_before_instruct_is_a_missing_dependency() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |t| t);
    assert_eq!(code(&stage(&cfg, "synth")), 0);
    assert_eq!(code(&stage(&cfg, "annotate")), 0);
    let o = stage(&cfg, "train");
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("`instruct`"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_with_a_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |t| t.replacen("d_model = 16", "d_model = \"wide\"", 1));
    let line = fs::read_to_string(&cfg)
        .unwrap()
        .lines()
        .position(|l| l.starts_with("d_model"))
        .unwrap()
        + 1;
    let o = stage(&cfg, "synth");
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains(&format!("line {line}")), "{}", stderr(&o));

    let missing = run(&["synth", "--config", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn bad_seed_override_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |t| t);
    let c = cfg.to_str().unwrap();
    assert_ne!(code(&run(&["synth", "--config", c, "--seed-override", "synth"])), 0);
    assert_eq!(code(&run(&["synth", "--config", c, "--seed-override", "annotate=3"])), 2);
}

#[test]
fn a_held_lock_blocks_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |t| t);
    fs::create_dir_all(dir.path().join("out")).unwrap();
    fs::write(dir.path().join("out/.lock"), b"").unwrap();
    let o = stage(&cfg, "synth");
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("locked"));
    fs::remove_file(dir.path().join("out/.lock")).unwrap();
    assert_eq!(code(&stage(&cfg, "synth")), 0);
    assert!(!dir.path().join("out/.lock").exists());
}

fn manifest(out: &Path) -> Value {
    serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn stages_rerun_only_when_inputs_change() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), |t| t);
    let c = cfg.to_str().unwrap();
    for s in ["synth", "annotate", "instruct"] {
        assert_eq!(code(&stage(&cfg, s)), 0);
    }
    let first = manifest(&out);

    // Current stages are skipped.
    let again = stage(&cfg, "annotate");
    assert_eq!(code(&again), 0);
    assert!(stderr(&again).contains("up to date"));

    // A tampered upstream output invalidates its stage, so dependents refuse
    // to run until it is rebuilt.
    let train_notes = out.join("synth/source_train.jsonl");
    let original = fs::read(&train_notes).unwrap();
    fs::write(&train_notes, b"{}\n").unwrap();
    assert_eq!(code(&stage(&cfg, "annotate")), 3);
    assert_eq!(code(&stage(&cfg, "synth")), 0);
    assert_eq!(fs::read(&train_notes).unwrap(), original);
    // Rebuilt bytes are identical, so annotate's inputs did not change.
    assert!(stderr(&stage(&cfg, "annotate")).contains("up to date"));

    // A new instruct seed reruns instruct and leaves synth alone.
    let o = run(&["instruct", "--config", c, "--seed-override", "instruct=99"]);
    assert_eq!(code(&o), 0);
    assert!(!stderr(&o).contains("up to date"));
    let after = manifest(&out);
    assert_eq!(after["stages"]["synth"], first["stages"]["synth"]);
    assert_eq!(after["stages"]["instruct"]["seed"], 99);
    assert_ne!(
        after["stages"]["instruct"]["outputs"]["instruct/prompts.jsonl"],
        first["stages"]["instruct"]["outputs"]["instruct/prompts.jsonl"]
    );
}

#[test]
fn empty_results_dir_lists_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["report", "--results", dir.path().to_str().unwrap(), "--format", "json"]);
    assert_eq!(code(&o), 3);
    let doc: Value = serde_json::from_slice(&o.stdout).unwrap();
    let missing: Vec<&str> = doc["missing"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap())
        .collect();
    let rows = ["no-adapt", "source-data", "clone w/o DP", "clone ε=2", "clone ε=4", "clone ε=8"];
    let cols = ["medication", "exam_anatomy", "chem_disease", "disease", "overall"];
    for r in rows {
        for c in cols {
            let cell = format!("{r} / {c}");
            assert!(missing.contains(&cell.as_str()), "{cell} not listed");
        }
    }
    for r in &rows[2..] {
        assert!(missing.contains(&format!("{r} / rMIA AUC").as_str()));
    }
    for r in rows {
        assert!(missing.contains(&format!("{r} / perplexity").as_str()));
    }
}

/// Pull `| name | a | b | ... |` rows of the table under `heading`.
fn md_table(md: &str, heading: &str) -> Vec<Vec<String>> {
    let start = md.find(heading).unwrap_or_else(|| panic!("no {heading}"));
    md[start..]
        .lines()
        .skip_while(|l| !l.starts_with('|'))
        .take_while(|l| l.starts_with('|'))
        .skip(2)
        .map(|l| {
            l.trim_matches('|')
                .split('|')
                .map(|c| c.trim().to_string())
                .collect()
        })
        .collect()
}

#[test]
fn markdown_and_json_carry_identical_numbers() {
    let out = smoke_run().join("out");
    let md = fs::read_to_string(out.join("report/report.md")).unwrap();
    let json: Value = serde_json::from_slice(&fs::read(out.join("report/report.json")).unwrap()).unwrap();
    let rep = &json["report"];
    let tasks: Vec<&str> = rep["tasks"].as_array().unwrap().iter().map(|t| t.as_str().unwrap()).collect();

    let grid = md_table(&md, "## Tagging F1");
    let rows = rep["rows"].as_array().unwrap();
    assert_eq!(grid.len(), rows.len());
    for (line, row) in grid.iter().zip(rows) {
        assert_eq!(line[0], row["name"].as_str().unwrap());
        for (i, t) in tasks.iter().enumerate() {
            let md_val: f64 = line[i + 1].parse().unwrap();
            assert_eq!(md_val, row["f1_by_task"][t].as_f64().unwrap(), "{} {t}", line[0]);
        }
        let overall: f64 = line[tasks.len() + 1].parse().unwrap();
        assert_eq!(overall, row["overall_f1"].as_f64().unwrap());
    }

    let by_name: BTreeMap<&str, &Value> = rows.iter().map(|r| (r["name"].as_str().unwrap(), r)).collect();
    for line in md_table(&md, "## Privacy and utility") {
        let row = by_name[line[0].as_str()];
        match row["epsilon"].as_f64() {
            Some(e) => assert_eq!(line[2].parse::<f64>().unwrap(), e),
            None => assert_eq!(line[2], "inf"),
        }
        assert_eq!(line[4].parse::<f64>().unwrap(), row["mia_auc"].as_f64().unwrap());
    }
    for line in md_table(&md, "## Perplexity") {
        let curve = match by_name.get(line[0].as_str()) {
            Some(r) => &r["perplexity_curve"],
            None => &rep["reference_curves"][&line[0]],
        };
        let pts = curve.as_array().unwrap();
        assert_eq!(line[1].parse::<f64>().unwrap(), pts[0]["ppl"].as_f64().unwrap());
        assert_eq!(line[2].parse::<f64>().unwrap(), pts.last().unwrap()["ppl"].as_f64().unwrap());
        assert!(out.join(&line[4]).is_file(), "{}", line[4]);
    }
}

#[test]
fn report_carries_the_labelled_reference_block() {
    let out = smoke_run().join("out");
    let md = fs::read_to_string(out.join("report/report.md")).unwrap();
    assert!(md.contains("## Reference values (paper-reported, not reproduced)"));
    let refs = md_table(&md, "## Reference values");
    let mimic = refs.iter().find(|r| r[0] == "Original MIMIC data").unwrap();
    assert_eq!(mimic[1], "0.87517");
    assert_eq!(refs.len(), 9);
    assert!(!md.contains("## Missing"));
}

#[test]
fn rendering_from_results_matches_the_written_report() {
    let out = smoke_run().join("out");
    let dir = out.to_str().unwrap();
    for (fmt, file) in [("md", "report/report.md"), ("json", "report/report.json")] {
        let o = run(&["report", "--results", dir, "--format", fmt]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(o.stdout, fs::read(out.join(file)).unwrap());
    }
}

#[test]
fn six_row_grid_with_one_cell_per_task() {
    // Results fabricated by hand, so the expected grid is known exactly.
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let keys = ["no-adapt", "source", "clone-nodp", "clone-eps2", "clone-eps4", "clone-eps8"];
    let tasks = ["medication", "exam_anatomy", "chem_disease", "disease"];
    let value = |r: usize, t: usize| 0.5 + 0.01 * r as f64 + 0.001 * t as f64;
    let mut f1 = serde_json::Map::new();
    for (r, k) in keys.iter().enumerate() {
        let per: serde_json::Map<String, Value> =
            tasks.iter().enumerate().map(|(t, n)| (n.to_string(), value(r, t).into())).collect();
        f1.insert(k.to_string(), serde_json::json!({"tasks": per, "overall": value(r, 9)}));
        fs::create_dir_all(out.join("adapt")).unwrap();
        fs::write(out.join(format!("adapt/{k}_ppl.csv")), "step,ppl\n0,100\n10,90\n").unwrap();
    }
    fs::write(out.join("adapt/babble_ppl.csv"), "step,ppl\n0,100\n10,101\n").unwrap();
    fs::create_dir_all(out.join("tag")).unwrap();
    fs::write(out.join("tag/f1.json"), Value::Object(f1).to_string()).unwrap();
    fs::create_dir_all(out.join("train")).unwrap();
    fs::create_dir_all(out.join("audit")).unwrap();
    let mut audit = serde_json::Map::new();
    for (k, e) in [("clone-nodp", None), ("clone-eps2", Some(2.0)), ("clone-eps4", Some(4.0)), ("clone-eps8", Some(8.0))] {
        let ledger = serde_json::json!({
            "variant": k, "epsilon_target": e, "epsilon_spent": e, "delta": 1e-5,
            "noise_multiplier": 1.0, "clip_norm": 1.0, "sampling_rate": 0.01, "steps": 10
        });
        fs::write(out.join(format!("train/{k}_ledger.json")), ledger.to_string()).unwrap();
        audit.insert(
            k.into(),
            serde_json::json!({"auc": 0.5, "members": 1, "non_members": 1, "population": 1}),
        );
    }
    fs::write(out.join("audit/summary.json"), Value::Object(audit).to_string()).unwrap();

    let o = run(&["report", "--results", out.to_str().unwrap(), "--format", "md"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let md = String::from_utf8(o.stdout).unwrap();
    let header = md.lines().find(|l| l.starts_with("| row |")).unwrap();
    assert_eq!(header, "| row | medication | exam_anatomy | chem_disease | disease | overall |");
    let names = ["no-adapt", "source-data", "clone w/o DP", "clone ε=2", "clone ε=4", "clone ε=8"];
    let expected: Vec<Vec<String>> = names
        .iter()
        .enumerate()
        .map(|(r, n)| {
            let mut line = vec![n.to_string()];
            line.extend((0..4).map(|t| format!("{:.5}", value(r, t))));
            line.push(format!("{:.5}", value(r, 9)));
            line
        })
        .collect();
    assert_eq!(md_table(&md, "## Tagging F1"), expected);
}

#[test]
fn a_partial_run_fails_the_report_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), |t| t);
    let o = stage(&cfg, "report");
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("no-adapt / medication"));
    // The partial report is still written, with the gaps listed.
    let md = fs::read_to_string(dir.path().join("out/report/report.md")).unwrap();
    assert!(md.contains("## Missing"));
}
