use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "generator.samples_per_class=12",
    "generator.steps=6",
    "generator.bands=3",
    "generator.classes=3",
    "encoder.d_model=8",
    "encoder.n_layers=1",
    "encoder.d_inner=8",
    "head.hidden=8",
    "train.batch_size=16",
    "train.epochs=3",
];

fn tdann(out: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tdann"));
    cmd.arg("--out").arg(out);
    for s in TINY {
        cmd.args(["--set", s]);
    }
    cmd.args(args).output().expect("spawn tdann")
}

fn ok(o: &Output) -> String {
    let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
    assert!(o.status.success(), "stdout:\n{stdout}\nstderr:\n{}", String::from_utf8_lossy(&o.stderr));
    stdout
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in\n{stdout}"))
}

fn run_dirs(stdout: &str) -> Vec<PathBuf> {
    stdout.lines().filter_map(|l| l.strip_prefix("run_dir=")).map(PathBuf::from).collect()
}

fn generated(out: &Path) -> PathBuf {
    let stdout = ok(&tdann(out, &["generate", "--seed", "3"]));
    run_dirs(&stdout)[0].clone()
}

#[test]
fn generate_reports_counts_per_domain() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&tdann(tmp.path(), &["generate", "--seed", "3", "--csv"]));
    let dir = &run_dirs(&stdout)[0];
    assert!(dir.file_name().unwrap().to_str().unwrap().ends_with("-seed3"));
    assert!(stdout.contains("source: domain=0 samples=36"), "{stdout}");
    assert!(stdout.contains("target: domain=1 samples=36"), "{stdout}");
    assert!(stdout.contains("class_counts=12,12,12"));
    for f in ["source.tdds", "target.tdds", "source.csv", "target.csv", "config.resolved"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let snap = fs::read_to_string(dir.join("config.resolved")).unwrap();
    assert!(snap.contains("generator.seed=3\n"));
}

#[test]
fn unknown_keys_and_flags_fail() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tdann(tmp.path(), &["--set", "encoder.depth=2", "generate"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("encoder.depth"));
    assert!(!tdann(tmp.path(), &["generate", "--depth", "2"]).status.success());
}

#[test]
fn resolved_snapshot_reproduces_a_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generated(tmp.path());
    let src = data.join("source.tdds");
    let tgt = data.join("target.tdds");
    let first = ok(&tdann(
        tmp.path(),
        &["train", "--mode", "dann", "--source", src.to_str().unwrap(), "--target", tgt.to_str().unwrap(), "--seed", "5"],
    ));
    let a = run_dirs(&first)[0].clone();
    assert!(a.file_name().unwrap().to_str().unwrap().starts_with("train-dann-"));
    assert_eq!(value(&first, "epochs"), "3");
    value(&first, "target_accuracy");

    // only the snapshot, no shared overrides
    let o = Command::new(env!("CARGO_BIN_EXE_tdann"))
        .arg("--out")
        .arg(tmp.path())
        .arg("--config")
        .arg(a.join("config.resolved"))
        .arg("train")
        .output()
        .unwrap();
    let b = run_dirs(&ok(&o))[0].clone();
    assert_ne!(a, b);
    for f in ["model.tdpt", "runlog.csv", "config.resolved"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let log = fs::read_to_string(a.join("runlog.csv")).unwrap();
    assert!(log.starts_with("epoch,lambda,lr,loss_y,loss_d,acc_train\n"));
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn sweep_and_resume() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generated(tmp.path());
    let src = data.join("source.tdds");
    let tgt = data.join("target.tdds");
    let (s, t) = (src.to_str().unwrap(), tgt.to_str().unwrap());

    let sweep = ok(&tdann(tmp.path(), &["train", "--source", s, "--target", t, "--sweep"]));
    let dirs = run_dirs(&sweep);
    assert_eq!(dirs.len(), 3);
    for (d, l) in dirs.iter().zip(["1", "0.5", "0.2"]) {
        assert!(d.to_str().unwrap().ends_with(&format!("-lmax{l}")), "{}", d.display());
        let snap = fs::read_to_string(d.join("config.resolved")).unwrap();
        assert!(snap.contains(&format!("train.lambda_max={l}\n")));
    }

    let whole = ok(&tdann(tmp.path(), &["train", "--source", s, "--target", t]));
    let whole = run_dirs(&whole)[0].clone();
    let part = ok(&tdann(tmp.path(), &["train", "--source", s, "--target", t, "--stop-after", "1"]));
    let part = run_dirs(&part)[0].clone();
    assert_eq!(fs::read_to_string(part.join("runlog.csv")).unwrap().lines().count(), 2);
    ok(&tdann(tmp.path(), &["train", "--resume", part.to_str().unwrap()]));
    for f in ["model.tdpt", "runlog.csv"] {
        assert_eq!(fs::read(whole.join(f)).unwrap(), fs::read(part.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn evaluate_gap_and_project() {
    let tmp = tempfile::tempdir().unwrap();
    let data = generated(tmp.path());
    let src = data.join("source.tdds");
    let tgt = data.join("target.tdds");
    let trained = ok(&tdann(tmp.path(), &["train", "--mode", "baseline", "--source", src.to_str().unwrap()]));
    let model = run_dirs(&trained)[0].join("model.tdpt");
    let m = model.to_str().unwrap();

    let ev = ok(&tdann(tmp.path(), &["evaluate", "--checkpoint", m, "--data", tgt.to_str().unwrap(), "--features", "20"]));
    for key in ["accuracy", "macro_f1", "kappa"] {
        value(&ev, key);
    }
    assert_eq!(value(&ev, "samples"), "36");
    let tgt_feats = run_dirs(&ev)[0].join("features.csv");
    assert_eq!(fs::read_to_string(&tgt_feats).unwrap().lines().count(), 21);

    let ev = ok(&tdann(tmp.path(), &["evaluate", "--checkpoint", m, "--data", src.to_str().unwrap()]));
    let src_feats = run_dirs(&ev)[0].join("features.csv");
    assert_eq!(fs::read_to_string(&src_feats).unwrap().lines().count(), 37);

    let gap = ok(&tdann(
        tmp.path(),
        &["gap", "--source", src_feats.to_str().unwrap(), "--target", tgt_feats.to_str().unwrap()],
    ));
    assert_eq!(value(&gap, "sigma_mode"), "median");
    assert!(value(&gap, "mmd").parse::<f64>().unwrap().is_finite());
    let fixed = ok(&tdann(
        tmp.path(),
        &["gap", "--source", src_feats.to_str().unwrap(), "--target", tgt_feats.to_str().unwrap(), "--bandwidth", "2.5"],
    ));
    assert_eq!(value(&fixed, "sigma_mode"), "fixed");
    assert_eq!(value(&fixed, "sigma"), "2.5");
    let missing = tdann(tmp.path(), &["gap", "--source", "nope.csv", "--target", tgt_feats.to_str().unwrap()]);
    assert!(!missing.status.success());

    let proj = ok(&tdann(
        tmp.path(),
        &["project", "--features", src_feats.to_str().unwrap(), tgt_feats.to_str().unwrap(), "--dims", "3"],
    ));
    assert_eq!(value(&proj, "rows"), "56");
    assert_eq!(value(&proj, "explained_variance").split(' ').count(), 3);
    let csv = fs::read_to_string(value(&proj, "file")).unwrap();
    assert!(csv.starts_with("domain,class,pc1,pc2,pc3\n"));
    assert!(!tdann(tmp.path(), &["project", "--features", src_feats.to_str().unwrap(), "--dims", "4"])
        .status
        .success());

    // wrong band count for this model
    let other = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_tdann"))
        .arg("--out")
        .arg(other.path())
        .args(["--set", "generator.bands=5", "--set", "generator.samples_per_class=4", "generate"])
        .output()
        .unwrap();
    let wrong = run_dirs(&ok(&o))[0].join("target.tdds");
    let o = tdann(tmp.path(), &["evaluate", "--checkpoint", m, "--data", wrong.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let tmp = tempfile::tempdir().unwrap();
    let good = ok(&tdann(tmp.path(), &["gradcheck", "--seeds", "1"]));
    assert!(good.contains("op/softmax_rows"));
    let bad = tdann(tmp.path(), &["gradcheck", "--seeds", "1", "--inject-fault", "softmax_rows:0.5"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}
