use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[corpus]
seed = 3
vocab_size = 6
num_labeled = 60
num_batches = 2
batch_size = 20
num_eval = 20

[network]
splice = 1
hidden_layers = [16]

[baseline]
max_epochs = 3

[stage]
max_iterations_per_epoch = 2
"#;

fn hypsel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypsel")).args(args).output().unwrap()
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    fs::write(&path, TINY).unwrap();
    path.display().to_string()
}

#[test]
fn corpus_generate_and_inspect_agree() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let archive = dir.path().join("corpus.bin").display().to_string();
    let generated: serde_json::Value = serde_json::from_str(&ok(hypsel(&["corpus", "generate", "--config", &config, "--out", &archive]))).unwrap();
    let inspected: serde_json::Value = serde_json::from_str(&ok(hypsel(&["corpus", "inspect", &archive]))).unwrap();
    assert_eq!(generated, inspected);
    assert_eq!(inspected["labeled"]["utterances"], 60);
    assert_eq!(inspected["large_batches"].as_array().unwrap().len(), 2);
    assert_eq!(inspected["seed"], 3);
}

#[test]
fn campaign_outputs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(hypsel(&["campaign", "run", "--config", &config, "--arm", "both", "--out", out.to_str().unwrap()]));
    }
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 2 * 3);
    for rel in [
        "summary.csv",
        "reports/stage_0.csv",
        "reports/stage_2.csv",
        "plot/eval_wer.tsv",
        "models/rl/RL0.bin",
        "models/rl/RL2.bin",
        "models/unsup/RL2.bin",
        "pairs/rl_stage_1.jsonl",
        "pairs/rl_stage_1.csv",
        "config.toml",
    ] {
        assert_eq!(fs::read(a.join(rel)).unwrap(), fs::read(b.join(rel)).unwrap(), "{rel}");
    }
}

#[test]
fn seed_flag_changes_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let path = dir.path().join("c.bin").display().to_string();
    let first: serde_json::Value = serde_json::from_str(&ok(hypsel(&["corpus", "generate", "--config", &config, "--seed", "11", "--out", &path]))).unwrap();
    assert_eq!(first["seed"], 11);
}

#[test]
fn baseline_file_feeds_campaign_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let model = dir.path().join("base.bin").display().to_string();
    let trained: serde_json::Value = serde_json::from_str(&ok(hypsel(&["train-baseline", "--config", &config, "--out", &model]))).unwrap();
    assert!(trained["eval_wer"]["wer"].is_number());

    let out = dir.path().join("run");
    ok(hypsel(&["campaign", "run", "--config", &config, "--arm", "rl", "--baseline", &model, "--out", out.to_str().unwrap()]));
    assert_eq!(fs::read(out.join("models/rl/RL0.bin")).unwrap(), fs::read(&model).unwrap());

    let sweep_dir = dir.path().join("sweep");
    let pairs = out.join("pairs/rl_stage_0.jsonl");
    let table: serde_json::Value = serde_json::from_str(&ok(hypsel(&[
        "sweep",
        "--config",
        &config,
        "--pairs",
        pairs.to_str().unwrap(),
        "--trials",
        "50",
        "--out",
        sweep_dir.to_str().unwrap(),
    ])))
    .unwrap();
    let rows = table["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 11);
    assert!(sweep_dir.join("sweep.csv").exists());
}

#[test]
fn errors_are_reported_as_json_lines() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[stage]\nstage_learning_rates = [0.004]\n").unwrap();
    let out = hypsel(&["campaign", "run", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let line: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(line["error"], "config");
    assert!(line["message"].as_str().unwrap().contains("stage.stage_learning_rates"));

    fs::write(&bad, "[stage]\nlearning_rates = [0.004]\n").unwrap();
    let out = hypsel(&["corpus", "generate", "--config", bad.to_str().unwrap(), "--out", dir.path().join("x").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rates"));

    let out = hypsel(&["corpus", "inspect", dir.path().join("missing.bin").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let line: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(line["error"], "io");
}

#[test]
fn model_inspect_and_decode_read_a_trained_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let model = dir.path().join("baseline.bin").display().to_string();
    ok(hypsel(&["train-baseline", "--config", &config, "--out", &model]));

    let info: serde_json::Value = serde_json::from_str(&ok(hypsel(&["model", "inspect", &model]))).unwrap();
    let layers = info["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 2);
    assert_eq!(layers[0][1], 16);
    assert_eq!(layers[1][0], 16);
    let params: u64 = layers.iter().map(|l| l[0].as_u64().unwrap() * l[1].as_u64().unwrap() + l[1].as_u64().unwrap()).sum();
    assert_eq!(info["num_parameters"], params);
    assert!(info["prior_min"].as_f64().unwrap() > 0.0);
    assert!(info["prior_min"].as_f64().unwrap() <= info["prior_max"].as_f64().unwrap());

    let text = ok(hypsel(&["decode", "--config", &config, "--model", &model, "--set", "batch2", "--nbest", "3"]));
    let lines: Vec<Vec<&str>> = text.lines().map(|l| l.split('\t').collect()).collect();
    assert!(lines.len() > 20 && lines.len() <= 60);
    let mut last: Option<(&str, f64)> = None;
    for fields in &lines {
        assert_eq!(fields.len(), 5);
        let score: f64 = fields[2].parse().unwrap();
        if let Some((id, prev)) = last.filter(|(id, _)| *id == fields[0]) {
            assert!(score <= prev, "{id}: n-best out of order");
        }
        last = Some((fields[0], score));
        let frames: usize = fields[4].split(' ').map(|run| run.split_once('x').unwrap().1.parse::<usize>().unwrap()).sum();
        assert!(frames > 0);
    }

    let first_best: String = lines.iter().filter(|f| f[1] == "1").map(|f| format!("{} {}\n", f[0], f[3])).collect();
    let hyp = dir.path().join("hyp.txt");
    fs::write(&hyp, &first_best).unwrap();
    let table = ok(hypsel(&["wer", hyp.to_str().unwrap(), hyp.to_str().unwrap()]));
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 1 + 20 + 1);
    assert!(rows.last().unwrap().starts_with("ALL,0,0,0,"));

    let err = hypsel(&["decode", "--config", &config, "--model", &model, "--set", "batch9"]);
    assert_eq!(err.status.code(), Some(2));
}

#[test]
fn wer_table_counts_edits() {
    let dir = tempfile::tempdir().unwrap();
    let (hyp, reference) = (dir.path().join("hyp.txt"), dir.path().join("ref.txt"));
    fs::write(&hyp, "u1 a b c\nu2 x\n").unwrap();
    fs::write(&reference, "u1 a c\n\nu2 x y z\n").unwrap();
    let out = dir.path().join("wer.csv");
    ok(hypsel(&["wer", hyp.to_str().unwrap(), reference.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    let table = fs::read_to_string(&out).unwrap();
    assert_eq!(
        table,
        "utterance_id,substitutions,insertions,deletions,reference_length,wer\n\
         u1,0,1,0,2,0.5\n\
         u2,0,0,2,3,0.6666666666666666\n\
         ALL,0,1,2,5,0.6\n"
    );

    fs::write(&hyp, "u1 a c\n").unwrap();
    let err = hypsel(&["wer", hyp.to_str().unwrap(), reference.to_str().unwrap()]);
    assert_eq!(err.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&err.stderr).contains("u2"));
}
