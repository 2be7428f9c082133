use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
name = "cli-toy"
seed = 3
repeats = 1
out_dir = "out"
methods = ["tsne_pixels"]
augmentations = ["plus_rot_any"]

[dataset.synthetic]
n_per_class = 10
side = 12
seed = 1

[model]
width = 2
hidden_dim = 16

[train]
stage_epochs = [2, 1, 1]
batch_size = 10

[baselines.tsne]
perplexity = 5.0
n_iter = 250

[figure]
min_cell_count = 2
grid_size = 3
"#;

fn tsimcne(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_tsimcne"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    [&["--config", "experiment.toml"][..], extra].concat()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("experiment.toml"), CONFIG).unwrap();
    dir
}

fn coords(text: &str) -> Vec<String> {
    text.lines().filter(|l| !l.starts_with('#')).map(str::to_string).collect()
}

#[test]
fn verbs_compose_through_files() {
    let dir = setup();
    let d = dir.path();

    tsimcne(d, &with(&["ingest", "--output", "data/toy.safetensors"]));
    assert!(d.join("data/toy.safetensors").exists());

    tsimcne(d, &with(&["--out", "trained", "train", "--dataset", "data/toy.safetensors"]));
    for f in ["embedding.tsv", "record.jsonl", "checkpoints/stage3.ckpt"] {
        assert!(d.join("trained").join(f).exists(), "{f} missing");
    }
    let record = fs::read_to_string(d.join("trained/record.jsonl")).unwrap();
    assert_eq!(record.lines().count(), 4);

    tsimcne(
        d,
        &with(&["--out", "embedded", "embed", "--dataset", "data/toy.safetensors", "--checkpoint", "trained/checkpoints/stage3.ckpt"]),
    );
    let trained = fs::read_to_string(d.join("trained/embedding.tsv")).unwrap();
    let embedded = fs::read_to_string(d.join("embedded/embedding.tsv")).unwrap();
    assert_eq!(coords(&trained), coords(&embedded));

    let eval = tsimcne(d, &with(&["--out", "trained", "eval", "--embedding", "trained/embedding.tsv"]));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("knn_accuracy"));
    assert!(d.join("trained/eval.toml").exists());

    tsimcne(
        d,
        &with(&["--out", "trained", "figure", "--embedding", "trained/embedding.tsv", "--eval", "trained/eval.toml"]),
    );
    let svg = fs::read_to_string(d.join("trained/scatter.svg")).unwrap();
    assert_eq!(svg.matches("class=\"legend-entry\"").count(), 3);
    tsimcne(
        d,
        &with(&["--out", "trained", "figure", "--kind", "grid", "--embedding", "trained/embedding.tsv", "--dataset", "data/toy.safetensors"]),
    );
    assert!(d.join("trained/grid.png").exists());

    tsimcne(d, &with(&["--out", "pixels", "baseline", "--method", "tsne_pixels"]));
    assert!(d.join("pixels/embedding.tsv").exists());
    assert!(d.join("pixels/features.safetensors").exists());
}

#[test]
fn report_runs_the_experiment_and_aggregates() {
    let dir = setup();
    let d = dir.path();
    let run = tsimcne(d, &["--config", "experiment.toml", "report"]);
    let table = String::from_utf8_lossy(&run.stdout).to_string();
    assert_eq!(table.lines().count(), 2);
    assert!(table.contains("tsne_pixels"));
    assert!(d.join("out/results.tsv").exists());
    assert!(d.join("out/resolved_config.toml").exists());

    let agg = tsimcne(d, &["--config", "experiment.toml", "--out", "agg", "report", "--aggregate", "out"]);
    assert_eq!(String::from_utf8_lossy(&agg.stdout), table);
}

#[test]
fn deterministic_training_is_reproducible() {
    let dir = setup();
    let d = dir.path();
    for out in ["a", "b"] {
        tsimcne(d, &["--config", "experiment.toml", "--deterministic", "--seed", "7", "--out", out, "train"]);
    }
    let a = fs::read(d.join("a/embedding.tsv")).unwrap();
    let b = fs::read(d.join("b/embedding.tsv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = setup();
    let d = dir.path();
    let out = Command::new(env!("CARGO_BIN_EXE_tsimcne"))
        .current_dir(d)
        .args(["--config", "experiment.toml", "--repeats", "0", "report"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("repeats"));

    let out = Command::new(env!("CARGO_BIN_EXE_tsimcne"))
        .current_dir(d)
        .args(["eval", "--embedding", "missing.tsv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
