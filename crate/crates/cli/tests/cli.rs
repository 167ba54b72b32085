use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "dataset.synth.users=300",
    "dataset.synth.items=200",
    "dataset.synth.samples=5000",
    "trainer.epochs=1",
];

fn maskadapt(args: &[&str], sets: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_maskadapt"));
    cmd.args(args).env("RUST_LOG", "warn");
    for s in SMALL.iter().chain(sets) {
        cmd.args(["--set", s]);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn out_arg(dir: &Path) -> String {
    dir.display().to_string()
}

#[test]
fn train_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(maskadapt(&["train", "--out", &out_arg(dir.path())], &[]));
    assert!(text.contains("full"), "{text}");
    for name in ["checkpoint", "train_log", "resolved_config"] {
        assert!(dir.path().join(name).is_file(), "missing {name}");
    }
}

#[test]
fn mask_and_adapter_switches_train_the_base_model() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(maskadapt(
        &["train", "--out", &out_arg(dir.path())],
        &["mask.k=0", "adapter.enabled=false"],
    ));
    assert!(text.contains("base_only"), "{text}");
}

#[test]
fn eval_prints_metrics_and_relative_improvement() {
    let base = tempfile::tempdir().unwrap();
    let full = tempfile::tempdir().unwrap();
    ok(maskadapt(&["train", "--out", &out_arg(base.path())], &["trainer.ablation=\"base_only\""]));
    let base_eval = ok(maskadapt(&["eval", "--out", &out_arg(base.path())], &["trainer.ablation=\"base_only\""]));
    assert!(base_eval.lines().any(|l| l.starts_with("AUC ")), "{base_eval}");
    assert!(base_eval.lines().any(|l| l.starts_with("UAUC ")), "{base_eval}");

    ok(maskadapt(&["train", "--out", &out_arg(full.path())], &[]));
    let baseline = base.path().join("report").display().to_string();
    let text = ok(maskadapt(&["eval", "--out", &out_arg(full.path()), "--baseline", &baseline], &[]));
    assert!(text.contains("RelaImpr AUC"), "{text}");
    assert!(text.contains("RelaImpr UAUC"), "{text}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(full.path().join("report")).unwrap()).unwrap();
    assert!(report["rela_impr"]["auc"].is_number());
}

#[test]
fn analyze_writes_both_heatmaps() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    ok(maskadapt(&["train", "--out", &out], &[]));
    ok(maskadapt(&["analyze", "--out", &out], &[]));
    for (file, groups) in [("heatmap_user.csv", vec!["new", "low", "mid", "high"]), ("heatmap_item.csv", vec!["cold", "warm", "hot"])] {
        let text = std::fs::read_to_string(dir.path().join(file)).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let header: Vec<&str> = lines[0].split(',').collect();
        assert_eq!(&header[..2], &["group", "count"]);
        assert_eq!(header.len(), 2 + 11, "{file}: {}", lines[0]);
        assert_eq!(lines.len(), 1 + groups.len(), "{file}");
        for (line, g) in lines[1..].iter().zip(&groups) {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells[0], *g);
            assert_eq!(cells.len(), header.len());
        }
    }
}

#[test]
fn analyze_without_adapter_fails_clearly() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    let sets = ["adapter.enabled=false"];
    ok(maskadapt(&["train", "--out", &out], &sets));
    let o = maskadapt(&["analyze", "--out", &out], &sets);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no adapter"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let text = ok(maskadapt(&["gradcheck"], &[]));
    assert_eq!(text.lines().filter(|l| l.ends_with("PASS")).count(), 4, "{text}");
    let o = maskadapt(&["gradcheck", "--corrupt-gradient", "1.5"], &[]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn resolved_config_reproduces_the_checkpoint() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    ok(maskadapt(&["train", "--out", &out_arg(first.path()), "--seed", "5"], &["mask.gamma=0.4"]));
    let resolved = first.path().join("resolved_config").display().to_string();
    let o = Command::new(env!("CARGO_BIN_EXE_maskadapt"))
        .args(["train", "--config", &resolved, "--out", &out_arg(second.path())])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(o);
    let a = std::fs::read(first.path().join("checkpoint")).unwrap();
    let b = std::fs::read(second.path().join("checkpoint")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bad_keys_are_reported_with_their_path() {
    let o = maskadapt(&["train"], &["trainer.lr=-1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("trainer.lr"), "{}", stderr(&o));
}

#[test]
fn gen_synth_round_trips_through_columnar_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(maskadapt(&["gen-synth", "--out", &out_arg(&data)], &[]));
    for name in ["schema.toml", "train.tsv", "val.tsv", "test.tsv"] {
        assert!(data.join(name).is_file(), "missing {name}");
    }
    let path = format!("dataset.path=\"{}\"", data.join("train.tsv").display());
    let schema = format!("schema.path=\"{}\"", data.join("schema.toml").display());
    let text = ok(maskadapt(
        &["train", "--out", &out_arg(&dir.path().join("run"))],
        &["dataset.kind=\"columnar\"", &path, &schema, "dataset.channels=[\"impression\", \"comment\", \"like\"]"],
    ));
    assert!(text.contains("val AUC"), "{text}");
}
