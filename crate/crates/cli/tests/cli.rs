use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tufa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tufa"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run tufa")
}

fn ok(args: &[&str], cwd: &Path) {
    let out = tufa(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr_line(out: &Output) -> String {
    let text = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(text.trim_end().lines().count(), 1, "expected one error line, got {text:?}");
    text.trim_end().to_string()
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TOY: &str = r#"
overlays = 2
[model]
image_size = [32, 32]
patch_size = [16, 16]
channels = 16
heads = 2
encoder_depth = 1
decoder_depth = 2
head_hidden = 16
"#;

#[test]
fn synth_is_reproducible_and_guards_output() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--scheme", "a", "--count", "8", "--seed", "3", "--out", "one"], d);
    ok(&["synth", "--scheme", "a", "--count", "8", "--seed", "3", "--out", "two"], d);
    let one = files(&d.join("one"));
    assert_eq!(one, files(&d.join("two")));
    assert_eq!(one.iter().filter(|(p, _)| p.extension().is_some_and(|e| e == "png")).count(), 8);
    let ann = fs::read_to_string(d.join("one/annotations.jsonl")).unwrap();
    assert_eq!(ann.lines().count(), 8);

    let again = tufa(&["synth", "--count", "8", "--out", "one"], d);
    assert_eq!(again.status.code(), Some(2));
    assert!(stderr_line(&again).starts_with("error[usage]:"));
    ok(&["synth", "--count", "2", "--out", "one", "--force"], d);
}

#[test]
fn scheme_b_records_have_twelve_points() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--scheme", "B", "--count", "3", "--out", "b"], dir.path());
    let ann = fs::read_to_string(dir.path().join("b/annotations.jsonl")).unwrap();
    for line in ann.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["points"].as_array().unwrap().len(), 12);
    }
}

#[test]
fn usage_data_and_numeric_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bad_scheme = tufa(&["synth", "--scheme", "z", "--count", "2", "--out", "z"], d);
    assert_eq!(bad_scheme.status.code(), Some(2));
    assert!(stderr_line(&bad_scheme).starts_with("error[usage]:"));

    let missing = tufa(&["eval", "--dataset", "x", "--out", "e"], d);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr_line(&missing).contains("--checkpoint"));

    ok(&["synth", "--count", "2", "--out", "data"], d);
    let no_ckpt = tufa(&["eval", "--checkpoint", "nope.json", "--dataset", "data", "--out", "e"], d);
    assert_eq!(no_ckpt.status.code(), Some(3));
    assert!(stderr_line(&no_ckpt).starts_with("error[data]:"));

    // collapsed eye corners make the inter-ocular distance zero
    fs::write(d.join("toy.toml"), format!("{TOY}[train]\nepochs = 1\nmilestones = []\n")).unwrap();
    ok(&["train", "--config", "toy.toml", "--dataset", "data", "--out", "t"], d);
    let ann = fs::read_to_string(d.join("data/annotations.jsonl")).unwrap();
    let mut rec: serde_json::Value = serde_json::from_str(ann.lines().next().unwrap()).unwrap();
    rec["points"][12] = rec["points"][10].clone();
    fs::write(d.join("data/annotations.jsonl"), format!("{rec}\n")).unwrap();
    let degenerate = tufa(&["eval", "--checkpoint", "t/checkpoint.json", "--dataset", "data", "--out", "e"], d);
    assert_eq!(degenerate.status.code(), Some(4));
    assert!(stderr_line(&degenerate).starts_with("error[numeric]:"));
}

#[test]
fn train_eval_zeroshot_plot_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--count", "32", "--seed", "100", "--out", "data"], d);
    let cfg = format!(
        "{TOY}[train]\nepochs = 300\nbase_lr = 0.002\nmilestones = [240, 270]\nbatch_size = 1\nanchors = {{ ratio = 0.0 }}\n"
    );
    fs::write(d.join("run.toml"), cfg).unwrap();
    ok(&["train", "--config", "run.toml", "--dataset", "data", "--seed", "1", "--out", "train"], d);
    let epochs = fs::read_to_string(d.join("train/epochs.jsonl")).unwrap();
    assert_eq!(epochs.lines().count(), 300);

    ok(&["eval", "--checkpoint", "train/checkpoint.json", "--dataset", "data", "--alpha", "0.1", "--out", "eval"], d);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval/report.json")).unwrap()).unwrap();
    let nme = report["nme_percent"].as_f64().unwrap();
    assert!(nme < 2.0, "train-set NME {nme}%");
    for f in ["ced.csv", "predictions.jsonl", "attention.json", "overlays/000.png", "overlays/001.png"] {
        assert!(d.join("eval").join(f).exists(), "missing {f}");
    }

    // same metrics on a re-run
    ok(&["eval", "--checkpoint", "train/checkpoint.json", "--dataset", "data", "--alpha", "0.1", "--out", "eval2"], d);
    assert_eq!(fs::read(d.join("eval/report.json")).unwrap(), fs::read(d.join("eval2/report.json")).unwrap());

    // querying the trained plane points reproduces evaluation
    let zs = [
        "zeroshot", "--checkpoint", "train/checkpoint.json", "--dataset", "data", "--alpha", "0.1",
        "--points-file", "train/plane-synth-a.csv", "--out", "zs",
    ];
    ok(&zs, d);
    assert_eq!(fs::read(d.join("eval/predictions.jsonl")).unwrap(), fs::read(d.join("zs/predictions.jsonl")).unwrap());
    assert_eq!(fs::read(d.join("eval/report.json")).unwrap(), fs::read(d.join("zs/report.json")).unwrap());

    ok(&["plot", "eval/report.json", "zs/ced.csv", "--out", "fig/ced.svg"], d);
    let svg = fs::read_to_string(d.join("fig/ced.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert!(svg.contains(">eval<") && svg.contains(">zs<"));
}

#[test]
fn resolved_config_reproduces_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--count", "6", "--out", "data"], d);
    fs::write(d.join("run.toml"), format!("{TOY}[train]\nepochs = 3\nmilestones = [2]\nbatch_size = 2\n")).unwrap();
    ok(&["train", "--config", "run.toml", "--dataset", "data", "--seed", "5", "--workers", "2", "--out", "a"], d);
    fs::copy(d.join("a/config.resolved.toml"), d.join("resolved.toml")).unwrap();
    ok(&["train", "--config", "resolved.toml", "--out", "b"], d);
    let a = fs::read(d.join("a/checkpoint.json")).unwrap();
    assert_eq!(a, fs::read(d.join("b/checkpoint.json")).unwrap());
    let loss = |p: &str| -> Vec<f64> {
        fs::read_to_string(d.join(p))
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["mean_loss"].as_f64().unwrap())
            .collect()
    };
    assert_eq!(loss("a/epochs.jsonl"), loss("b/epochs.jsonl"));

    ok(&["synth", "--scheme", "b", "--count", "4", "--out", "shots"], d);
    ok(&["fewshot", "--config", "run.toml", "--checkpoint", "a/checkpoint.json", "--dataset", "shots", "--shots", "2", "--out", "fs"], d);
    assert!(d.join("fs/plane-synth-b.csv").exists());
    let too_many = tufa(&["fewshot", "--config", "run.toml", "--checkpoint", "a/checkpoint.json", "--dataset", "shots", "--shots", "9", "--out", "fs2"], d);
    assert_eq!(too_many.status.code(), Some(2));
}
