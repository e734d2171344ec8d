use std::fs;
use std::path::Path;
use std::process::Command;

use concept_reasoner::alignment::ConceptSet;
use concept_reasoner::formats::{
    save_concept_set, save_manifest, save_tensor, DatasetManifest, LoadedConceptSet, SampleEntry,
};
use concept_reasoner::Tensor;
use serde_json::Value;

fn cli(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_concept-reasoner"))
        .args(args)
        .env_remove("CONCEPT_REASONER_OUT")
        .output()
        .unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) {
    let (code, err) = cli(args);
    assert_eq!(code, 0, "{args:?}: {err}");
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_train_eval_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let run = d.join("train");
    ok(&["gen-synth", "--out", p(&data), "--seed", "3"]);
    let manifest = data.join("manifest.json");
    ok(&["train", "--manifest", p(&manifest), "--out", p(&run), "--seed", "3"]);
    let ckpt = run.join("checkpoint");
    assert!(ckpt.join("checkpoint.json").exists());
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().next().unwrap(), "epoch,L_task,L_c,L_neural,total");
    assert_eq!(loss.lines().count(), 101);

    let eval = d.join("eval");
    ok(&["eval", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--out", p(&eval)]);
    let metrics = json(&eval.join("metrics.json"));
    assert!(metrics["fused"]["accuracy"].as_f64().unwrap() >= 0.95, "{metrics}");
    assert!(metrics["rule_error"]["mean"].as_f64().unwrap() <= 0.05);
    let rules = json(&eval.join("rules.json"));
    assert_eq!(rules["num_classes"], 2);
    let csv = fs::read_to_string(eval.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("head,accuracy,precision,recall,f1,auc\nfused,"));
    assert!(json(&data.join("planted_rules.json"))[1]["text"] == "y_1 ⇐ c0 ∧ ¬c1");

    let explain = d.join("explain");
    ok(&[
        "explain", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--out", p(&explain),
        "--sample", "s0000",
    ]);
    let ex = json(&explain.join("explanations.json"));
    assert_eq!(ex.as_array().unwrap().len(), 1);
    assert!(ex[0]["rule"].as_str().unwrap().starts_with("y_"));

    let stab = d.join("stab");
    ok(&[
        "stability", "--manifest", p(&manifest), "--checkpoint", p(&ckpt), "--out", p(&stab),
        "--eps", "0",
    ]);
    let s = json(&stab.join("stability.json"));
    assert_eq!(s["class_flip_fraction"], 0.0);
    assert_eq!(s["max_indicator_change"], 0.0);
    assert_eq!(s["rule_change_fraction"], 0.0);

    let w = d.join("weights");
    ok(&["report-weights", "--checkpoint", p(&ckpt), "--manifest", p(&manifest), "--out", p(&w)]);
    let weights = fs::read_to_string(w.join("concept_weights.csv")).unwrap();
    assert_eq!(weights.lines().count(), 1 + 4 * 2);
    let counts = json(&w.join("param_counts.json"));
    assert_eq!(counts["encoder"], 4 * (2 * (16 * 16 + 16)) + 33);

    for sub in [&data, &run, &eval, &explain, &stab, &w] {
        assert!(sub.join("resolved_config.json").exists(), "{}", sub.display());
    }
    let cfg = json(&run.join("resolved_config.json"));
    assert_eq!(cfg["subcommand"], "train");
    assert_eq!(cfg["lambda_concept"], 0.1);
    assert_eq!(cfg["lr"], 5e-5);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (a, b) = (d.join("a"), d.join("b"));
    for out in [&a, &b] {
        ok(&["gen-synth", "--out", p(&out.join("data")), "--samples-per-class", "20"]);
    }
    let manifest = a.join("data/manifest.json");
    for out in [&a, &b] {
        ok(&["train", "--manifest", p(&manifest), "--out", p(&out.join("run")), "--epochs", "3"]);
    }
    for rel in [
        "data/manifest.json",
        "data/features.micn",
        "data/concept_labels.csv",
        "run/loss.csv",
        "run/checkpoint/checkpoint.json",
        "run/checkpoint/params/fuse.w.micn",
        "run/checkpoint/adam_second/enc.pos_w.micn",
    ] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn loss_ablation_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["gen-synth", "--out", p(&d.join("data")), "--samples-per-class", "16"]);
    ok(&[
        "train", "--manifest", p(&d.join("data/manifest.json")), "--out", p(&d.join("run")),
        "--epochs", "4", "--no-concept-loss", "--no-neural-loss",
    ]);
    let loss = fs::read_to_string(d.join("run/loss.csv")).unwrap();
    for line in loss.lines().skip(1) {
        let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(f[4], f[1], "{line}");
        assert!(f[2] > 0.0 && f[3] > 0.0);
    }
    let cfg = json(&d.join("run/resolved_config.json"));
    assert_eq!(cfg["no_concept_loss"], true);
}

fn label_fixture(d: &Path) -> std::path::PathBuf {
    // one 1×1 feature map; cosines with the two concepts are 0.7 and 0.6
    save_tensor(d.join("maps/s0.micn"), &Tensor::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
    let emb = Tensor::from_rows(&[[0.7, 0.51f64.sqrt()], [0.6, 0.8]]).unwrap();
    let set = LoadedConceptSet {
        concepts: ConceptSet::new(vec!["GGO".into(), "Consolidation".into()], Some(emb)).unwrap(),
        class_names: None,
        class_embeddings: None,
        provenance: None,
    };
    save_concept_set(d, "concepts", &set).unwrap();
    let m = DatasetManifest {
        version: 1,
        feature_dim: 2,
        num_classes: 2,
        class_names: vec!["neg".into(), "pos".into()],
        concept_set: "concepts.json".into(),
        features: None,
        concept_labels: None,
        samples: vec![SampleEntry {
            id: "s0".into(),
            label: 1,
            feature_map: Some("maps/s0.micn".into()),
        }],
    };
    let path = d.join("manifest.json");
    save_manifest(&path, &m).unwrap();
    path
}

#[test]
fn label_thresholds_pooled_scores() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = label_fixture(d);
    let out = d.join("labels");
    ok(&["label", "--manifest", p(&manifest), "--out", p(&out), "--saliency"]);
    let csv = fs::read_to_string(out.join("concept_labels.csv")).unwrap();
    assert_eq!(csv, "sample_id,GGO,Consolidation\ns0,1,0\n");
    assert!(out.join("saliency/s0/concept000.pgm").exists());
    assert!(out.join("saliency/s0/concept001.micn").exists());
    let cfg = json(&out.join("resolved_config.json"));
    assert_eq!(cfg["tau"], 0.65);
    assert_eq!(cfg["prune_floor"], 0.45);
}

#[test]
fn filter_concepts_writes_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = label_fixture(d);
    let out = d.join("filtered");
    ok(&[
        "filter-concepts", "--concepts", p(&d.join("concepts.json")), "--manifest", p(&manifest),
        "--out", p(&out), "--no-class-similarity-filter",
    ]);
    // the two concept embeddings have cosine 0.99, so the pairwise filter keeps the first
    let prov = json(&out.join("provenance.json"));
    assert_eq!(prov["kept"], serde_json::json!([0]));
    assert_eq!(prov["concepts"][1]["dropped_by"], "pairwise");
    assert_eq!(prov["stages_run"], serde_json::json!(["length", "pairwise", "projection"]));
    assert!(out.join("concepts.json").exists());

    ok(&[
        "filter-concepts", "--concepts", p(&d.join("concepts.json")), "--manifest", p(&manifest),
        "--out", p(&out), "--no-similarity-filter",
    ]);
    let prov = json(&out.join("provenance.json"));
    assert_eq!(prov["kept"], serde_json::json!([0, 1]));
    assert_eq!(prov["stages_run"], serde_json::json!(["length", "projection"]));

    // the class filter needs class embeddings this concept set lacks
    let (code, err) = cli(&[
        "filter-concepts", "--concepts", p(&d.join("concepts.json")), "--out", p(&out),
    ]);
    assert_eq!(code, 1);
    assert!(err.contains("class embeddings"), "{err}");
}

#[test]
fn errors_exit_nonzero_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (code, err) = cli(&["train", "--manifest", p(&d.join("missing.json")), "--out", p(&d.join("o"))]);
    assert_eq!(code, 1);
    assert!(err.contains("missing.json"), "{err}");
    let (code, _) = cli(&["no-such-command"]);
    assert_eq!(code, 1);
    let (code, err) = cli(&["label", "--manifest", "m.json", "--tau", "7", "--out", p(&d.join("o"))]);
    assert_eq!(code, 1);
    assert!(err.contains("--tau"), "{err}");
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_concept-reasoner"))
        .args(["gen-synth", "--samples-per-class", "2"])
        .env("CONCEPT_REASONER_OUT", dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("gen-synth/manifest.json").exists());
}
