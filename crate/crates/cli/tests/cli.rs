use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn relalign(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relalign"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn error_kind(out: &Output) -> String {
    let v: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    v["error"].as_str().unwrap().to_owned()
}

const SMALL: [&str; 6] = [
    "--set",
    "stream.tasks=2",
    "--set",
    "stream.total_classes=4",
    "--set",
    "train.epochs=3",
];

#[test]
fn missing_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = relalign(dir.path(), &["--config", "/nonexistent.toml", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "config");
}

#[test]
fn unknown_and_invalid_keys_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    for set in ["train.nonsense=1", "stream.tasks=0", "alignment.strategy=\"sideways\""] {
        let out = relalign(dir.path(), &["--set", set, "run"]);
        assert_eq!(out.status.code(), Some(2), "{set}");
        assert_eq!(error_kind(&out), "config");
    }
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ok = relalign(dir.path(), &["--seed", "5", "gradcheck"]);
    assert!(ok.status.success(), "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = relalign(dir.path(), &["--seed", "5", "gradcheck", "--corrupt"]);
    assert_eq!(bad.status.code(), Some(1));
    assert_eq!(error_kind(&bad), "gradcheck");
}

#[test]
fn run_writes_reports_that_reload() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let out = relalign(&first, &SMALL.iter().copied().chain(["run"]).collect::<Vec<_>>());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let accuracy = fs::read_to_string(first.join("accuracy.csv")).unwrap();
    assert_eq!(accuracy.lines().next(), Some("model_task,eval_task,accuracy"));
    assert_eq!(accuracy.lines().count(), 1 + 3);
    let drift = fs::read_to_string(first.join("drift.csv")).unwrap();
    assert!(drift.starts_with("probe_task,model_task,sample_count,mean_relation_drift,mean_feature_drift\n"));

    let second = dir.path().join("second");
    let report = first.join("report.json");
    let out = relalign(&second, &["--config", report.to_str().unwrap(), "run"]);
    assert!(out.status.success());
    assert_eq!(fs::read(second.join("accuracy.csv")).unwrap(), accuracy.as_bytes());
}

#[test]
fn export_round_trips_through_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    assert!(relalign(&a, &SMALL.iter().copied().chain(["export"]).collect::<Vec<_>>()).status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    let tasks = manifest["tasks"].as_array().unwrap();
    assert_eq!(tasks.len(), 2);
    for t in tasks {
        assert!(a.join(t["file"].as_str().unwrap()).exists());
    }

    let b = dir.path().join("b");
    let m = a.join("manifest.json");
    let set = format!("data.manifest=\"{}\"", m.display());
    assert!(relalign(&b, &["--set", &set, "export"]).status.success());
    for t in tasks {
        let f = t["file"].as_str().unwrap();
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }

    let synthetic = dir.path().join("synthetic");
    let loaded = dir.path().join("loaded");
    let args: Vec<&str> = SMALL.iter().copied().chain(["run"]).collect();
    assert!(relalign(&synthetic, &args).status.success());
    let mut with_manifest = args.clone();
    with_manifest.splice(0..0, ["--set", set.as_str()]);
    assert!(relalign(&loaded, &with_manifest).status.success());
    assert_eq!(
        fs::read(synthetic.join("accuracy.csv")).unwrap(),
        fs::read(loaded.join("accuracy.csv")).unwrap()
    );
}

#[test]
fn ablation_has_one_row_per_variant_over_shared_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<&str> = SMALL.to_vec();
    args.extend(["--set", "ablation.seeds=[1, 2]", "ablate"]);
    let out = relalign(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("strategy,seeds,a_last,a_avg,final_forgetting,dataset_hash"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r[1] == "1;2" && r[5] == rows[0][5]));
    let names: Vec<&str> = rows.iter().map(|r| r[0]).collect();
    for v in ["none", "eigen", "p2p", "b_eigen", "feature_last+norm", "feature_all-norm"] {
        assert!(names.contains(&v), "{v}");
    }
}

#[test]
fn theory_writes_a_header_and_records() {
    let dir = tempfile::tempdir().unwrap();
    let mut args: Vec<&str> = SMALL.to_vec();
    args.extend(["--set", "theory.weyl_cases=100", "theory"]);
    let out = relalign(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(dir.path().join("theory.txt")).unwrap();
    assert!(text.starts_with("# weyl_sweep cases=100 violations=0"));
    assert!(text.contains("\nname\ts\tt\tlhs\trhs\tholds\tsamples\tnote\n"));
    assert!(text.contains("residual_identity\t1\t2\t"));
    assert!(dir.path().join("backbone.json").exists());
}
