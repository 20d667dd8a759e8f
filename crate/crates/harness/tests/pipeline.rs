use std::fs;
use std::path::Path;

use lethe_harness::report::{read_curve_csv, CURVE_HEADER};
use lethe_harness::{emit_plot, run_experiment, ExperimentConfig, HarnessError};

fn config(out: &Path, attack: &str) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 17
out = "{}"

[data]
source = "synthetic"
classes = 3
per_class = 8
test_per_class = 4
shape = [1, 8, 8]

[arch]
input = [1, 8, 8]
num_classes = 3
trunk = ["conv2d in=1 out=4 kernel=3", "group_norm channels=4", "relu", "conv2d in=4 out=8 kernel=3 stride=2", "group_norm channels=8", "relu"]
main = ["conv2d in=8 out=8 kernel=3", "group_norm channels=8", "relu", "global_avg_pool", "linear in=8 out=3", "softmax_cross_entropy classes=3"]
aux = ["conv2d in=8 out=8 kernel=3", "group_norm channels=8", "relu", "global_avg_pool", "linear in=8 out=4", "softmax_cross_entropy classes=4"]

[pretrain]
epochs = 3
batch_size = 8

[attack]
name = "{attack}"

[eval]
interval = 5

[stop]
accuracy = 0.0
max_steps = 20

[probe]
samples = 6
items = 4
"#,
        out.display()
    );
    ExperimentConfig::parse(&text).unwrap()
}

#[test]
fn smoke_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let arts = run_experiment(&config(dir.path(), "lethean")).unwrap();
    for p in [&arts.checkpoint, &arts.curve_csv, &arts.steps_csv, &arts.probe_csv, &arts.plot_svg, &arts.manifest] {
        assert!(p.exists(), "{}", p.display());
    }
    assert!(arts.history_csv.as_ref().unwrap().exists());
    let curve = fs::read_to_string(&arts.curve_csv).unwrap();
    let mut lines = curve.lines();
    assert_eq!(lines.next().unwrap(), CURVE_HEADER.join(","));
    assert!(lines.next().unwrap().starts_with("0,"));
    let steps = fs::read_to_string(&arts.steps_csv).unwrap();
    assert_eq!(steps.lines().count(), 21);
    let probe = fs::read_to_string(&arts.probe_csv).unwrap();
    for mode in ["hist_main_aux", "hist_aux_aux", "hist_main_main"] {
        assert!(probe.contains(mode), "{probe}");
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    for attack in ["lethean", "fgsm"] {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment(&config(a.path(), attack)).unwrap();
        let rb = run_experiment(&config(b.path(), attack)).unwrap();
        assert_eq!(fs::read(&ra.curve_csv).unwrap(), fs::read(&rb.curve_csv).unwrap());
        assert_eq!(fs::read(&ra.steps_csv).unwrap(), fs::read(&rb.steps_csv).unwrap());
        assert_eq!(fs::read(&ra.checkpoint).unwrap(), fs::read(&rb.checkpoint).unwrap());
    }
}

#[test]
fn manifest_reproduces_the_run() {
    let a = tempfile::tempdir().unwrap();
    let first = run_experiment(&config(a.path(), "random_pixel")).unwrap();
    let mut again = ExperimentConfig::load(&first.manifest).unwrap();
    assert_eq!(again, config(a.path(), "random_pixel"));
    let b = tempfile::tempdir().unwrap();
    again.out = b.path().to_path_buf();
    let second = run_experiment(&again).unwrap();
    assert_eq!(fs::read(&first.curve_csv).unwrap(), fs::read(&second.curve_csv).unwrap());
    let manifest = fs::read_to_string(&first.manifest).unwrap();
    assert!(manifest.contains("config_sha256"));
    assert!(manifest.contains("master_seed = 17"));
}

#[test]
fn checkpoint_source_skips_pretraining() {
    let a = tempfile::tempdir().unwrap();
    let first = run_experiment(&config(a.path(), "corruption")).unwrap();
    let mut cfg = config(a.path(), "corruption");
    cfg.pretrain = None;
    cfg.checkpoint = Some(first.checkpoint.clone());
    let b = tempfile::tempdir().unwrap();
    cfg.out = b.path().to_path_buf();
    let second = run_experiment(&cfg).unwrap();
    assert!(second.history_csv.is_none());
    assert_eq!(fs::read(&first.curve_csv).unwrap(), fs::read(&second.curve_csv).unwrap());
}

#[test]
fn misspelled_attack_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_experiment(&config(dir.path(), "letheon")).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
    let msg = err.to_string();
    for n in ["lethean", "random_pixel", "corruption", "fgsm"] {
        assert!(msg.contains(n), "{msg}");
    }
}

#[test]
fn useless_baseline_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path(), "lethean");
    cfg.stop.accuracy = Some(1.0);
    assert!(matches!(run_experiment(&cfg), Err(HarnessError::UnusableBaseline { .. })));
}

#[test]
fn missing_dataset_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "out = \"{}\"\n[data]\nsource = \"cifar10\"\ndir = \"/nonexistent/cifar\"\n[pretrain]\nepochs = 1\n",
        dir.path().display()
    );
    let cfg = ExperimentConfig::parse(&text).unwrap();
    let err = run_experiment(&cfg).unwrap_err().to_string();
    assert!(err.contains("/nonexistent/cifar"), "{err}");
}

#[test]
fn plots_from_written_curves() {
    let dir = tempfile::tempdir().unwrap();
    let mut csvs = Vec::new();
    for attack in ["lethean", "random_pixel"] {
        let sub = dir.path().join(attack);
        csvs.push(run_experiment(&config(&sub, attack)).unwrap().curve_csv);
    }
    let out = dir.path().join("both.svg");
    let refs: Vec<&Path> = csvs.iter().map(|p| p.as_path()).collect();
    emit_plot(&refs, &out).unwrap();
    let svg = fs::read_to_string(&out).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 2);
    assert_eq!(read_curve_csv(&csvs[0]).unwrap().attack, "lethean");
}

#[test]
fn bad_curve_csvs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, format!("{}\n", CURVE_HEADER.join(","))).unwrap();
    assert!(read_curve_csv(&empty).is_err());
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "step,acc,mean_main_loss,attack,seed\n0,1,0,x,0\n").unwrap();
    let msg = read_curve_csv(&bad).unwrap_err().to_string();
    assert!(msg.contains("acc"), "{msg}");
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    for name in ["configs/desk.toml", "configs/mnist.toml"] {
        ExperimentConfig::load(&root.join(name)).unwrap();
    }
    let readme = fs::read_to_string(root.join("README.md")).unwrap();
    let block = readme.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
    let cfg = ExperimentConfig::parse(block).unwrap();
    assert_eq!(cfg.ttt.confidence, Some(0.9));
    assert!(cfg.ttt.to_policy().unwrap().corr_defense.is_some());
}
