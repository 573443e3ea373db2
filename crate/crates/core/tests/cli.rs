//! Binary-level tests of the four commands, their formats, and their
//! exit codes.

mod common;

use std::path::PathBuf;
use std::process::Output;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use akde::corpus::Vocabulary;
use akde::model::{build_variant, Checkpoint, ModelParams};
use common::overfit_fixture;

fn akde(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_akde"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(output: &Output) -> String {
    String::from_utf8_lossy(&output.stdout).to_string()
}

fn stderr(output: &Output) -> String {
    String::from_utf8_lossy(&output.stderr).to_string()
}

struct TestDir {
    path: PathBuf,
}

impl TestDir {
    fn new(tag: &str) -> Self {
        let path = std::env::temp_dir().join(format!("akde-cli-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&path).unwrap();
        TestDir { path }
    }

    fn file(&self, name: &str, content: &str) -> PathBuf {
        let p = self.path.join(name);
        std::fs::write(&p, content).unwrap();
        p
    }

    fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for TestDir {
    fn drop(&mut self) {
        std::fs::remove_file(&self.path).ok();
        std::fs::remove_dir_all(&self.path).ok();
    }
}

fn write_overfit(dir: &TestDir) -> (PathBuf, PathBuf, PathBuf) {
    let fixture = overfit_fixture(32, 9);
    (
        dir.file("train.tsv", &fixture.train_text),
        dir.file("val.tsv", &fixture.eval_text),
        dir.file("kb.tsv", "use\tapply the named fix\n"),
    )
}

/// Train a small checkpoint for the read-only commands.
fn quick_checkpoint(dir: &TestDir, variant: &str, with_kb: bool) -> PathBuf {
    let (train, val, kb) = write_overfit(dir);
    let ck = dir.join(&format!("ck-{variant}.json"));
    let mut args = vec![
        "train".to_string(),
        "--train".into(),
        train.display().to_string(),
        "--val".into(),
        val.display().to_string(),
        "--checkpoint".into(),
        ck.display().to_string(),
        "--variant".into(),
        variant.to_string(),
        "--hidden".into(),
        "6".into(),
        "--embed-dim".into(),
        "8".into(),
        "--batch".into(),
        "64".into(),
        "--epochs".into(),
        "2".into(),
        "--lr".into(),
        "0.01".into(),
        "--eval-n".into(),
        "2".into(),
        "--seed".into(),
        "3".into(),
    ];
    if with_kb {
        args.push("--kb".into());
        args.push(kb.display().to_string());
    }
    let arg_refs: Vec<&str> = args.iter().map(|s| s.as_str()).collect();
    let output = akde(&arg_refs);
    assert!(output.status.success(), "{}", stderr(&output));
    ck
}

#[test]
fn train_writes_checkpoint_and_history() {
    let dir = TestDir::new("train");
    let (train, val, _) = write_overfit(&dir);
    let ck = dir.join("model.json");
    let hist = dir.join("history.jsonl");
    let output = akde(&[
        "train",
        "--train",
        train.to_str().unwrap(),
        "--val",
        val.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--out",
        hist.to_str().unwrap(),
        "--variant",
        "DE-GRU",
        "--hidden",
        "6",
        "--embed-dim",
        "8",
        "--batch",
        "16",
        "--epochs",
        "20",
        "--lr",
        "0.01",
        "--eval-n",
        "2",
        "--seed",
        "4",
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    assert!(ck.exists() && hist.exists());
    let lines = std::fs::read_to_string(&hist).unwrap();
    let epochs = lines.lines().count();
    assert!((1..=20).contains(&epochs), "{epochs} epochs logged");
    // Every line is a JSON record carrying epoch, loss, and the metrics.
    for line in lines.lines() {
        let record: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(record.get("epoch").is_some());
        assert!(record.get("loss").is_some());
        assert!(record.get("rn_at_1").is_some());
    }
}

#[test]
fn ak_variant_without_kb_is_a_usage_error() {
    let dir = TestDir::new("nokb");
    let (train, val, _) = write_overfit(&dir);
    let ck = dir.join("model.json");
    let output = akde(&[
        "train",
        "--train",
        train.to_str().unwrap(),
        "--val",
        val.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--variant",
        "AK-DE-biGRU",
        "--hidden",
        "6",
        "--embed-dim",
        "8",
        "--eval-n",
        "2",
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(stderr(&output).contains("--kb"), "{}", stderr(&output));
}

#[test]
fn pretrained_embeddings_are_accepted() {
    let dir = TestDir::new("embeddings");
    let (train, val, _) = write_overfit(&dir);
    let vector: Vec<String> = (0..8).map(|i| format!("0.0{i}")).collect();
    let embeddings = dir.file(
        "vectors.txt",
        &format!(
            "please {}\ntopic00 {}\n",
            vector.join(" "),
            vector.join(" ")
        ),
    );
    let ck = dir.join("model.json");
    let output = akde(&[
        "train",
        "--train",
        train.to_str().unwrap(),
        "--val",
        val.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--embeddings",
        embeddings.to_str().unwrap(),
        "--variant",
        "DE-GRU",
        "--hidden",
        "6",
        "--embed-dim",
        "8",
        "--epochs",
        "1",
        "--eval-n",
        "2",
    ]);
    assert!(output.status.success(), "{}", stderr(&output));

    // A wrong-arity embedding file is a usage error.
    let bad = dir.file("bad.txt", "please 1.0 2.0\n");
    let output = akde(&[
        "train",
        "--train",
        train.to_str().unwrap(),
        "--val",
        val.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--embeddings",
        bad.to_str().unwrap(),
        "--variant",
        "DE-GRU",
        "--hidden",
        "6",
        "--embed-dim",
        "8",
        "--epochs",
        "1",
        "--eval-n",
        "2",
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(
        stderr(&output).contains("expected 8"),
        "{}",
        stderr(&output)
    );
}

#[test]
fn unknown_variant_lists_the_valid_names() {
    let dir = TestDir::new("badvariant");
    let (train, val, _) = write_overfit(&dir);
    let output = akde(&[
        "train",
        "--train",
        train.to_str().unwrap(),
        "--val",
        val.to_str().unwrap(),
        "--checkpoint",
        dir.join("x.json").to_str().unwrap(),
        "--variant",
        "DE-LSTM",
    ]);
    assert_eq!(output.status.code(), Some(1));
    let err = stderr(&output);
    assert!(
        err.contains("DE-LSTM") && err.contains("A-DE-biGRU"),
        "{err}"
    );
}

#[test]
fn literal_gate_flag_is_accepted() {
    let dir = TestDir::new("literal");
    let (train, val, kb) = write_overfit(&dir);
    let ck = dir.join("model.json");
    let output = akde(&[
        "train",
        "--train",
        train.to_str().unwrap(),
        "--val",
        val.to_str().unwrap(),
        "--kb",
        kb.to_str().unwrap(),
        "--checkpoint",
        ck.to_str().unwrap(),
        "--variant",
        "AK-DE-biGRU",
        "--literal-eq9",
        "--hidden",
        "6",
        "--embed-dim",
        "8",
        "--epochs",
        "1",
        "--eval-n",
        "2",
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    let archive: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&ck).unwrap()).unwrap();
    assert_eq!(archive["config"]["literal_eq9"], true);
}

#[test]
fn eval_reports_absent_metrics_on_pair_files() {
    let dir = TestDir::new("eval2");
    let ck = quick_checkpoint(&dir, "DE-GRU", false);
    let (_, val, _) = write_overfit(&dir);
    let report_path = dir.join("report.json");
    let output = akde(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--test",
        val.to_str().unwrap(),
        "--eval-n",
        "2",
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    assert!(text.contains("groups 32"), "{text}");
    assert!(text.contains("R2@1 "), "{text}");
    assert!(text.contains("R10@1 absent"), "{text}");
    assert!(text.contains("R10@5 absent"), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["n"], 2);
    assert!(report["rn_at_5"].is_null());
}

#[test]
fn random_checkpoint_scores_at_chance() {
    // An untrained model ranks candidates arbitrarily, so the correct
    // one lands in the top slot a tenth of the time.
    let dir = TestDir::new("chance");
    let mut config = build_variant("DE-GRU").unwrap();
    config.embed_dim = 6;
    config.hidden = 4;
    let mut vocab = Vocabulary::new();
    for i in 0..40 {
        vocab.add(&format!("t{i}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let params = ModelParams::init(&config, vocab.len(), &mut rng, None).unwrap();
    let ck = dir.join("random.json");
    Checkpoint::build(&config, &vocab, &params)
        .save(&ck)
        .unwrap();

    let mut eval_text = String::new();
    for g in 0..10_000 {
        let ctx = format!("t{} t{}", rng.gen_range(0..40), rng.gen_range(0..40));
        for j in 0..10 {
            let label = if j == 0 { 1 } else { 0 };
            let resp = format!("t{} t{}", rng.gen_range(0..40), rng.gen_range(0..40));
            eval_text.push_str(&format!("{label}\t{ctx}\t{resp}\n"));
        }
        let _ = g;
    }
    let test = dir.file("groups.tsv", &eval_text);
    let output = akde(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--test",
        test.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    let r1: f64 = text
        .lines()
        .find(|l| l.starts_with("R10@1 "))
        .and_then(|l| l.split_whitespace().nth(1))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.09..=0.11).contains(&r1), "R10@1 = {r1}");
}

#[test]
fn rank_sorts_by_descending_probability() {
    let dir = TestDir::new("rank");
    let ck = quick_checkpoint(&dir, "DE-GRU", false);
    let input = dir.file(
        "rank.tsv",
        "0\tplease help with topic00\tuse the topic00 fix\n\
         0\tplease help with topic00\tuse the topic07 fix\n\
         0\tplease help with topic00\tuse the topic07 fix\n",
    );
    let run = || {
        let output = akde(&[
            "rank",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--test",
            input.to_str().unwrap(),
        ]);
        assert!(output.status.success(), "{}", stderr(&output));
        stdout(&output)
    };
    let text = run();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    let scores: Vec<f64> = lines
        .iter()
        .map(|l| l.split('\t').next().unwrap().parse().unwrap())
        .collect();
    assert!(
        scores[0] >= scores[1] && scores[1] >= scores[2],
        "{scores:?}"
    );
    // The duplicated candidate ties with itself and keeps input order.
    let dup: Vec<&&str> = lines.iter().filter(|l| l.contains("topic07")).collect();
    assert_eq!(dup.len(), 2);
    assert_eq!(
        dup[0].split('\t').next().unwrap(),
        dup[1].split('\t').next().unwrap()
    );
    // Byte-identical on a second run.
    assert_eq!(text, run());
}

#[test]
fn rank_with_no_candidates_is_a_usage_error() {
    let dir = TestDir::new("rankempty");
    let ck = quick_checkpoint(&dir, "DE-GRU", false);
    let input = dir.file("empty.tsv", "");
    let output = akde(&[
        "rank",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--test",
        input.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(
        stderr(&output).contains("no candidates"),
        "{}",
        stderr(&output)
    );
}

#[test]
fn attn_export_emits_normalized_weights() {
    let dir = TestDir::new("export");
    let ck = quick_checkpoint(&dir, "AK-DE-biGRU", true);
    let kb = dir.join("kb.tsv");
    let input = dir.file(
        "pairs.tsv",
        "1\tplease help with topic00 __eot__ checking topic00 now\tuse the topic00 fix\n\
         0\tplease help with topic01\tuse the topic02 fix\n",
    );
    let output = akde(&[
        "attn-export",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--test",
        input.to_str().unwrap(),
        "--kb",
        kb.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    let text = stdout(&output);
    let records: Vec<serde_json::Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 2);
    for record in &records {
        let sum = |key: &str| -> f64 {
            record[key]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| v.as_f64().unwrap())
                .sum()
        };
        assert!((sum("alpha_context") - 1.0).abs() < 1e-6);
        assert!((sum("alpha_response") - 1.0).abs() < 1e-6);
        assert_eq!(
            record["alpha_context"].as_array().unwrap().len(),
            record["context_tokens"].as_array().unwrap().len()
        );
        assert_eq!(
            record["alpha_response"].as_array().unwrap().len(),
            record["response_tokens"].as_array().unwrap().len()
        );
        // The gated variant reports a mean gate value for keyword tokens
        // ("use" is in the KB) and null elsewhere.
        let beta = record["beta_mean"].as_array().unwrap();
        let tokens = record["response_tokens"].as_array().unwrap();
        for (b, t) in beta.iter().zip(tokens) {
            if t == "use" {
                let v = b.as_f64().unwrap();
                assert!(v > 0.0 && v < 1.0, "{v}");
            } else {
                assert!(b.is_null(), "{b}");
            }
        }
    }
}

#[test]
fn attn_export_without_gating_omits_beta() {
    let dir = TestDir::new("exportplain");
    let ck = quick_checkpoint(&dir, "A-DE-biGRU", false);
    let input = dir.file(
        "pairs.tsv",
        "1\tplease help with topic00\tuse the topic00 fix\n",
    );
    let output = akde(&[
        "attn-export",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--test",
        input.to_str().unwrap(),
    ]);
    assert!(output.status.success(), "{}", stderr(&output));
    let record: serde_json::Value = serde_json::from_str(stdout(&output).trim()).unwrap();
    assert!(record.get("beta_mean").is_none(), "{record}");
}

#[test]
fn attn_export_needs_an_attention_variant() {
    let dir = TestDir::new("exportoff");
    let ck = quick_checkpoint(&dir, "DE-GRU", false);
    let input = dir.file(
        "pairs.tsv",
        "1\tplease help with topic00\tuse the topic00 fix\n",
    );
    let output = akde(&[
        "attn-export",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--test",
        input.to_str().unwrap(),
    ]);
    assert_eq!(output.status.code(), Some(1));
    assert!(
        stderr(&output).contains("no attention"),
        "{}",
        stderr(&output)
    );
}

#[test]
fn corrupt_checkpoint_is_rejected() {
    let dir = TestDir::new("corrupt");
    let ck = quick_checkpoint(&dir, "DE-GRU", false);
    let mut archive: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&ck).unwrap()).unwrap();
    archive["config"]["hidden"] = serde_json::json!(32);
    let bad = dir.file("bad.json", &archive.to_string());
    let (_, val, _) = write_overfit(&dir);
    let output = akde(&[
        "eval",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--test",
        val.to_str().unwrap(),
        "--eval-n",
        "2",
    ]);
    assert_eq!(output.status.code(), Some(1));
}

#[test]
fn help_exits_zero_and_bad_flags_exit_one() {
    let help = akde(&["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(stdout(&help).contains("attn-export"));

    let bad = akde(&["train", "--no-such-flag"]);
    assert_eq!(bad.status.code(), Some(1));
}
