use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ovcal::config::ExperimentConfig;
use ovcal::eval::{evaluate, video_from_bytes};
use ovcal::experiment::{load_dataset, CHECKPOINT_FILE, LOSS_LOG_FILE, TRAIN_FILE, VAL_GT_FILE};
use ovcal::pipeline::StudentModel;

fn ovcal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ovcal"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ovcal(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "train_images = 4\nval_images = 4\nsteps = 20\n";

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gen_is_byte_identical_and_keeps_unseen_out_of_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", SMALL);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["gen", "--config", &cfg, "--out", p(&a)]);
    ok(&["gen", "--config", &cfg, "--out", p(&b)]);
    for entry in fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(
            fs::read(a.join(&name)).unwrap(),
            fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
    let (cfg, ds) = load_dataset(&a).unwrap();
    for batch in &ds.train {
        assert!(batch
            .gt_labels
            .iter()
            .all(|c| !cfg.world.unseen.contains(c)));
    }
    let c = dir.path().join("c");
    ok(&[
        "gen",
        "--config",
        write_config(dir.path(), "c2.txt", SMALL).as_str(),
        "--seed",
        "5",
        "--out",
        p(&c),
    ]);
    assert_ne!(
        fs::read(a.join(TRAIN_FILE)).unwrap(),
        fs::read(c.join(TRAIN_FILE)).unwrap()
    );
}

#[test]
fn zero_steps_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.txt",
        "train_images = 4\nval_images = 4\nsteps = 0\n",
    );
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen", "--config", &cfg, "--out", p(&data)]);
    ok(&["train", "--dataset", p(&data), "--out", p(&run)]);
    let parsed = ExperimentConfig::load(Path::new(&cfg)).unwrap();
    let init = StudentModel::init(parsed.dims(), parsed.seed)
        .unwrap()
        .quantized();
    assert_eq!(
        StudentModel::load(&run.join(CHECKPOINT_FILE)).unwrap(),
        init
    );
}

#[test]
fn distillation_weight_changes_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen",
        "--config",
        &write_config(dir.path(), "c.txt", SMALL),
        "--out",
        p(&data),
    ]);
    let no_kd = write_config(dir.path(), "nokd.txt", &format!("{SMALL}weight_kd = 0\n"));
    ok(&[
        "train",
        "--dataset",
        p(&data),
        "--out",
        p(&dir.path().join("kd")),
    ]);
    ok(&[
        "train",
        "--config",
        &no_kd,
        "--dataset",
        p(&data),
        "--out",
        p(&dir.path().join("nokd")),
    ]);
    let a = fs::read(dir.path().join("kd").join(CHECKPOINT_FILE)).unwrap();
    let b = fs::read(dir.path().join("nokd").join(CHECKPOINT_FILE)).unwrap();
    assert_ne!(a, b);
}

#[test]
fn default_config_loss_descends() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["gen", "--out", p(&data)]);
    ok(&["train", "--dataset", p(&data), "--out", p(&run)]);
    let log = fs::read_to_string(run.join(LOSS_LOG_FILE)).unwrap();
    let totals: Vec<f64> = log
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(totals.len(), ExperimentConfig::default().train.steps);
    assert!(totals.last().unwrap() < totals.first().unwrap());
}

#[test]
fn eval_report_and_ground_truth_ceiling() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&[
        "gen",
        "--config",
        &write_config(dir.path(), "c.txt", SMALL),
        "--out",
        p(&data),
    ]);
    ok(&["train", "--dataset", p(&data), "--out", p(&run)]);
    let report = dir.path().join("report.txt");
    let printed = ok(&[
        "eval",
        "--dataset",
        p(&data),
        "--checkpoint",
        p(&run.join(CHECKPOINT_FILE)),
        "--out",
        p(&report),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    assert_eq!(printed, text);
    for key in [
        "classes", "iou.0", "iou.11", "miou", "seen", "unseen", "harmonic",
    ] {
        assert!(
            text.lines().any(|l| l.starts_with(&format!("{key} = "))),
            "{key}"
        );
    }
    let (cfg, _) = load_dataset(&data).unwrap();
    let gt = video_from_bytes(&fs::read(data.join(VAL_GT_FILE)).unwrap()).unwrap();
    let m = evaluate(&gt, &gt, cfg.world.categories, &cfg.world.seen()).unwrap();
    assert_eq!(m.miou, 100.0);
}

#[test]
fn ablation_has_eight_rows_and_matches_standalone_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen",
        "--config",
        &write_config(dir.path(), "c.txt", SMALL),
        "--out",
        p(&data),
    ]);
    let table = ok(&[
        "ablate",
        "--dataset",
        p(&data),
        "--out",
        p(&dir.path().join("ablate")),
    ]);
    let rows: Vec<Vec<&str>> = table
        .lines()
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(rows.len(), 8);
    assert_eq!(rows[0][0], "baseline");

    let base = write_config(
        dir.path(),
        "base.txt",
        &format!("{SMALL}diversify = none\ndistill = none\n"),
    );
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        &base,
        "--dataset",
        p(&data),
        "--out",
        p(&run),
    ]);
    let report = dir.path().join("report.txt");
    ok(&[
        "eval",
        "--dataset",
        p(&data),
        "--checkpoint",
        p(&run.join(CHECKPOINT_FILE)),
        "--out",
        p(&report),
    ]);
    let text = fs::read_to_string(&report).unwrap();
    let value = |key: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(&format!("{key} = ")))
            .unwrap()
            .to_string()
    };
    assert_eq!(
        rows[0][3..],
        [value("seen"), value("unseen"), value("harmonic")]
    );
}

#[test]
fn divergence_exits_nonzero_with_a_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = write_config(
        dir.path(),
        "c.txt",
        &format!("{SMALL}learning_rate = 1e300\nschedule = constant\n"),
    );
    ok(&["gen", "--config", &cfg, "--out", p(&data)]);
    let out = ovcal(&[
        "train",
        "--config",
        &cfg,
        "--dataset",
        p(&data),
        "--out",
        p(&dir.path().join("run")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn bad_config_and_missing_files_fail() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.txt", "no_such_key = 1\n");
    assert!(!ovcal(&["gen", "--config", &cfg, "--out", p(dir.path())])
        .status
        .success());
    let missing = dir.path().join("missing");
    assert!(
        !ovcal(&["train", "--dataset", p(&missing), "--out", p(dir.path())])
            .status
            .success()
    );
}

#[test]
fn check_grads_reports_every_gradient() {
    let out = ok(&["check-grads", "--points", "5"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 8);
}
