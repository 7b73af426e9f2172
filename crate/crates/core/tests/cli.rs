use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reidpc::corpus::{load_corpus, CorpusFormat};
use reidpc::metrics::{EvalReport, EvalSettings, Measure};
use reidpc::subspace::{apply_selection, SubspaceSelection};
use reidpc::synth::{AttributeScope, AttributeSpec, SynthConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reidpc"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A reduced planted-nuisance corpus with one planted attribute.
fn small_corpus(dir: &Path) -> PathBuf {
    let mut config = SynthConfig::benchmark(1);
    config.dimension = 64;
    config.identities = 40;
    config.identity_dim = 16;
    config.attributes = vec![AttributeSpec {
        name: "gender".into(),
        classes: 2,
        effect_norm: 0.5,
        scope: AttributeScope::Identity,
    }];
    let cfg = dir.join("synth.json");
    fs::write(&cfg, serde_json::to_string(&config).unwrap()).unwrap();
    let out = dir.join("synth");
    ok(&["synth", "--config", p(&cfg), "--out", p(&out)]);
    out.join("corpus.emb")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn eval_writes_all_metric_families_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let out = dir.path().join("eval");
    let summary = ok(&["eval", "--corpus", p(&corpus), "--out", p(&out), "--far", "0.01", "--far", "0.1"]);
    assert!(summary.starts_with("eval: rank1="));
    let v = json(&out.join("report.json"));
    for key in ["auc", "map", "cmc", "tar_at_far"] {
        assert!(v["report"].get(key).is_some(), "missing {key}");
    }
    assert_eq!(v["report"]["tar_at_far"].as_array().unwrap().len(), 2);
    assert_eq!(v["config"]["settings"]["templated"], false);
    assert_eq!(v["config"]["settings"]["ks"], serde_json::json!([1, 20]));
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n"));
    assert!(csv.contains("rank20,"));
}

#[test]
fn select_then_eval_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let sel_dir = dir.path().join("sel");
    ok(&["select", "--corpus", p(&corpus), "--out", p(&sel_dir)]);
    let eval_dir = dir.path().join("eval");
    ok(&[
        "eval",
        "--corpus",
        p(&corpus),
        "--selection",
        p(&sel_dir.join("selection.json")),
        "--templated",
        "--out",
        p(&eval_dir),
    ]);
    let from_cli: EvalReport = serde_json::from_value(json(&eval_dir.join("report.json"))["report"].clone()).unwrap();
    let selection: SubspaceSelection =
        serde_json::from_value(json(&sel_dir.join("selection.json"))["selection"].clone()).unwrap();
    let loaded = load_corpus(&corpus, CorpusFormat::Bin).unwrap();
    let settings = EvalSettings {
        templated: true,
        ..EvalSettings::default()
    };
    let in_process = apply_selection(&selection, &loaded, &settings, None).unwrap();
    assert_eq!(from_cli, in_process);
    assert_eq!(
        fs::read(eval_dir.join("report.csv")).unwrap(),
        fs::read(sel_dir.join("report.csv")).unwrap()
    );
}

#[test]
fn oracle_sweep_rank1_is_inverted_u() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let out = dir.path().join("sweep");
    ok(&["oracle-sweep", "--corpus", p(&corpus), "--out", p(&out)]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "k,rank1,map,tar_far_0.001,auc");
    let rank1: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let best = rank1.iter().cloned().fold(0.0, f64::max);
    assert!(best >= rank1[0] + 0.15, "{rank1:?}");
    assert!(*rank1.last().unwrap() <= best - 0.10, "{rank1:?}");
}

#[test]
fn pca_eval_and_probe_commands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let out = dir.path().join("pca");
    ok(&["pca-eval", "--corpus", p(&corpus), "--fit-on", "images", "--measure", "euclidean", "--out", p(&out)]);
    let v = json(&out.join("report.json"));
    assert_eq!(v["config"]["fit_on"], "images");
    assert_eq!(v["report"]["measure"], "negative_euclidean");
    assert_eq!(v["report"]["subspace"], "pca-full");

    let out = dir.path().join("probe");
    let summary = ok(&["probe", "--corpus", p(&corpus), "--attribute", "gender", "--seed", "3", "--out", p(&out)]);
    assert!(summary.starts_with("probe gender: accuracy="));
    let v = json(&out.join("probe_report.json"));
    assert_eq!(v["config"]["seed"], 3);
    assert!(v["report"]["accuracy"].as_f64().unwrap() > 0.9);
}

#[test]
fn csv_corpora_are_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = SynthConfig::benchmark(2);
    config.identities = 10;
    config.dimension = 48;
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, serde_json::to_string(&config).unwrap()).unwrap();
    let s = dir.path().join("s");
    ok(&["synth", "--config", p(&cfg), "--format", "csv", "--out", p(&s)]);
    let csv = s.join("corpus.csv");
    assert!(csv.is_file());
    ok(&["eval", "--corpus", p(&csv), "--out", p(&dir.path().join("e"))]);
}

#[test]
fn exit_codes_distinguish_validation_from_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let out = dir.path().join("x");
    let code = |args: &[&str]| run(args).status.code().unwrap();

    assert_eq!(code(&["eval", "--corpus", "missing.emb", "--out", p(&out)]), 2);
    assert_eq!(code(&["eval", "--corpus", p(&corpus), "--far", "1.5", "--out", p(&out)]), 2);
    assert_eq!(code(&["eval", "--corpus", p(&corpus), "--ks", "0", "--out", p(&out)]), 2);
    assert_eq!(code(&["eval", "--corpus", p(&corpus), "--bogus", "--out", p(&out)]), 2);
    assert_eq!(code(&["probe", "--corpus", p(&corpus), "--attribute", "gender", "--fraction", "1", "--out", p(&out)]), 2);

    let broken = dir.path().join("broken.csv");
    fs::write(&broken, "image_id,identity_id,role,dataset,e0\na,b,gallery,d,notanumber\n").unwrap();
    let out_run = run(&["eval", "--corpus", p(&broken), "--out", p(&out)]);
    assert_eq!(out_run.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out_run.stderr).contains("notanumber"));

    assert_eq!(code(&["probe", "--corpus", p(&corpus), "--attribute", "absent", "--out", p(&out)]), 1);

    let sel = dir.path().join("sel");
    ok(&["select", "--corpus", p(&corpus), "--out", p(&sel)]);
    let mismatch = run(&[
        "eval",
        "--corpus",
        p(&corpus),
        "--selection",
        p(&sel.join("selection.json")),
        "--measure",
        "euclidean",
        "--out",
        p(&out),
    ]);
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("measure"));
}

#[test]
fn help_lists_every_flag() {
    let text = String::from_utf8(run(&["eval", "--help"]).stdout).unwrap();
    for flag in ["--corpus", "--measure", "--templated", "--ks", "--far", "--selection", "--aux-gallery", "--out"] {
        assert!(text.contains(flag), "missing {flag}");
    }
    let text = String::from_utf8(run(&["pca-eval", "--help"]).stdout).unwrap();
    assert!(text.contains("--fit-on"));
    let _ = Measure::default();
}
