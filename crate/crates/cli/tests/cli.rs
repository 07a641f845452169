mod common;

use common::*;
use facestyle_core::checkpoint::Checkpoint;
use facestyle_core::metrics::EvalReport;
use facestyle_core::synthcorpus::read_corpus;
use serde_json::Value;

#[test]
fn config_problems_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["gen-corpus", "--out", "c"]), 2, "missing seed");
    for bad in [
        r#"{"seed": 1, "vq": {"colour": 3}}"#,
        r#"{"seed": 1, "seed": 2}"#,
        r#"{"seed": 1, "molora": {"ranks": [3]}}"#,
        r#"{"seed": "one"}"#,
        r#"{"seed": 1, "gpt": {"codebook_size": 32}}"#,
    ] {
        write_config(d, bad);
        let out = facestyle(d, &["--config", "c.json", "gen-corpus", "--out", "c"]);
        assert_eq!(out.status.code(), Some(2), "{bad}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "), "{bad}");
    }
    write_config(d, r#"{"seed": 1, "vq": {"colour": 3}}"#);
    let msg = String::from_utf8(facestyle(d, &["--config", "c.json", "gen-corpus"]).stderr).unwrap();
    assert!(msg.contains("vq.colour"), "{msg}");
    assert_eq!(code(d, &["--seed", "1", "gen-corpus"]), 2, "no output path anywhere");
    assert_eq!(code(d, &["--config", "missing.json", "gen-corpus"]), 2);
    assert_eq!(code(d, &["no-such-command"]), 2);
}

#[test]
fn missing_or_broken_data_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(d, &["--seed", "1", "pretrain-expr", "--corpus", "nowhere", "--out", "m.admk"]), 3);
    std::fs::write(d.join("junk.admk"), b"ADMK\x01\x00garbage").unwrap();
    assert_eq!(code(d, &["--seed", "1", "train-posegpt", "--corpus", "nowhere", "--vq", "junk.admk", "--out", "g"]), 3);
    write_config(d, SMALL_CONFIG);
    ok(d, &["--config", "c.json", "gen-corpus"]);
    ok(d, &["--config", "c.json", "train-vq"]);
    // A VQ checkpoint is not an expression model.
    assert_eq!(code(d, &["--config", "c.json", "adapt-expr", "--model", "vq.admk", "--ref", "corpus/train/calm_000"]), 3);
    assert_eq!(code(d, &["--config", "c.json", "eval", "--pred", "empty"]), 3);
}

#[test]
fn diverging_training_exits_with_code_4() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, &SMALL_CONFIG.replace(r#""pretrain": {"steps": 5}"#, r#""pretrain": {"steps": 20, "lr": 1e30}"#));
    ok(d, &["--config", "c.json", "gen-corpus"]);
    assert_eq!(code(d, &["--config", "c.json", "pretrain-expr"]), 4);
    assert_eq!(code(d, &["grad-check", "--seeds", "1", "--tol", "1e-300", "--filter", "matmul"]), 4);
}

#[test]
fn full_pipeline_emits_a_complete_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    run_pipeline(d);
    let report: EvalReport = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    let corpus = read_corpus(&d.join("corpus")).unwrap();
    assert_eq!(report.n_samples, corpus.holdout.len());
    assert_eq!(report.seed, 3);
    for (name, v) in [
        ("lve", report.lve),
        ("eve", report.eve),
        ("div_expr", report.div_expr),
        ("div_pose", report.div_pose),
        ("lsd", report.lsd),
        ("fid", report.fid),
        ("fsd", report.fsd),
    ] {
        let v = v.unwrap_or_else(|| panic!("{name} missing"));
        assert!(v.is_finite() && v >= 0.0, "{name} = {v}");
    }
    let text = std::fs::read_to_string(d.join("report.json")).unwrap();
    let keys = ["lve", "eve", "div_expr", "div_pose", "lsd", "fid", "fsd", "n_samples", "seed"];
    let at: Vec<usize> = keys.iter().map(|k| text.find(&format!("\"{k}\":")).unwrap()).collect();
    assert!(at.windows(2).all(|w| w[0] < w[1]), "{text}");

    // Adapted checkpoints keep factors addressable by name.
    let ck = Checkpoint::load(d.join("adapted.admk")).unwrap();
    assert_eq!(ck.kind, "expr_adapted");
    assert!(ck.get("decoder.block0.conv.molora.0.A").is_ok());
    assert!(ck.get("reference.expr").is_ok());
}

#[test]
fn eval_without_pose_predictions_leaves_pose_scores_null() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, SMALL_CONFIG);
    for args in &PIPELINE[..4] {
        ok(d, args);
    }
    let stdout = ok(d, &["--config", "c.json", "eval"]);
    let v: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert!(v["lve"].is_f64() && v["eve"].is_f64());
    for k in ["div_pose", "lsd", "fid", "fsd"] {
        assert!(v[k].is_null(), "{k}");
    }
}

#[test]
fn every_training_sample_retrieves_its_own_style() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, SMALL_CONFIG);
    ok(d, &["--config", "c.json", "gen-corpus"]);
    ok(d, &["--config", "c.json", "train-vq"]);
    ok(d, &["--config", "c.json", "build-styledb"]);
    let corpus = read_corpus(&d.join("corpus")).unwrap();
    for s in &corpus.train {
        let r = format!("corpus/train/{}", s.id);
        let v: Value = serde_json::from_str(ok(d, &["--config", "c.json", "retrieve", "--ref", &r]).trim()).unwrap();
        assert_eq!(v["style_id"], s.style_id, "{}", s.id);
        assert_eq!(v["distance"], 0.0, "{}", s.id);
    }
}

#[test]
fn corpus_bytes_do_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_config(d, SMALL_CONFIG);
    let gen = |out: &str, threads: &str| {
        let o = std::process::Command::new(BIN)
            .current_dir(d)
            .args(["--config", "c.json", "gen-corpus", "--out", out])
            .env("ADAMESH_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
    };
    gen("one", "1");
    gen("three", "3");
    assert_eq!(snapshot(&d.join("one")), snapshot(&d.join("three")));
    let o = std::process::Command::new(BIN)
        .current_dir(d)
        .args(["--config", "c.json", "gen-corpus"])
        .env("ADAMESH_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
