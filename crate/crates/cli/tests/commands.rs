//! End-to-end runs of the `geomattn` binary on tiny synthetic sets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn geomattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geomattn"))
        .args(args)
        .env_remove("GEOMATTN_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(&o));
    o
}

fn json(o: &Output) -> Value {
    serde_json::from_slice(&o.stdout).expect("stdout is one JSON document")
}

const TINY: [&str; 13] = [
    "--synthetic",
    "--ids",
    "4",
    "--images",
    "8",
    "--size",
    "16",
    "--epochs",
    "2",
    "--set",
    "batch.p=2",
    "--set",
    "augment.pad=2",
];

/// Trains the tiny configuration into `out` with extra flags appended.
fn train_tiny(out: &Path, seed: &str, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec!["train"];
    args.extend(TINY);
    args.extend(["--seed", seed, "--out", out]);
    args.extend(extra);
    geomattn(&args)
}

fn read(path: PathBuf) -> Vec<u8> {
    fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn step_logs(out: &Path) -> Vec<Value> {
    String::from_utf8(read(out.join("train.log.jsonl")))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn generate_data_writes_the_layout() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    ok(geomattn(&["generate-data", "--out", out.to_str().unwrap(), "--ids", "4", "--images", "6", "--size", "16"]));
    for f in ["train.csv", "query.csv", "gallery.csv", "config.echo"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let header = String::from_utf8(read(out.join("gallery.csv"))).unwrap();
    assert!(header.starts_with("path,identity,camera,track"));
}

#[test]
fn training_writes_outputs_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(train_tiny(&a, "3", &[]));
    ok(train_tiny(&b, "3", &[]));
    for f in ["model.ckpt", "train.log.jsonl", "config.echo"] {
        assert!(!read(a.join(f)).is_empty(), "{f}");
    }
    assert_eq!(read(a.join("model.ckpt")), read(b.join("model.ckpt")));
    assert_eq!(read(a.join("train.log.jsonl")), read(b.join("train.log.jsonl")));

    let c = dir.path().join("c");
    ok(train_tiny(&c, "4", &[]));
    assert_ne!(read(a.join("model.ckpt")), read(c.join("model.ckpt")));
}

#[test]
fn echoed_configuration_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    ok(train_tiny(&first, "5", &[]));
    let again = dir.path().join("again");
    let echo = first.join("config.echo");
    ok(geomattn(&["train", "--config", echo.to_str().unwrap(), "--out", again.to_str().unwrap()]));
    assert_eq!(read(first.join("model.ckpt")), read(again.join("model.ckpt")));
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let flag = dir.path().join("flag");
    ok(train_tiny(&flag, "9", &[]));
    let env = dir.path().join("env");
    let mut args = vec!["train"];
    args.extend(TINY);
    args.extend(["--out", env.to_str().unwrap()]);
    ok(Command::new(env!("CARGO_BIN_EXE_geomattn"))
        .args(&args)
        .env("GEOMATTN_SEED", "9")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap());
    assert_eq!(read(flag.join("model.ckpt")), read(env.join("model.ckpt")));
    let echo = String::from_utf8(read(env.join("config.echo"))).unwrap();
    assert!(echo.lines().any(|l| l == "seed = 9"), "{echo}");
}

#[test]
fn zero_rotation_weight_still_logs_the_rotation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r0");
    ok(train_tiny(&out, "2", &["--lambda-rot", "0"]));
    let logs = step_logs(&out);
    assert!(!logs.is_empty());
    for l in &logs {
        let rot = l["L_rot"].as_f64().unwrap();
        assert!(rot.is_finite() && rot > 0.0);
        let want =
            0.5 * ["L_tri_gb", "L_sce_gb", "L_tri_ab", "L_sce_ab"].iter().map(|k| l[k].as_f64().unwrap()).sum::<f64>();
        let total = l["total"].as_f64().unwrap();
        assert!((total - want).abs() <= 1e-12 * want.max(1.0), "{total} vs {want}");
    }
}

#[test]
fn missing_dataset_exits_with_data_code_and_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = geomattn(&["train", "--data", missing.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(missing.to_str().unwrap()), "{}", stderr(&o));
}

#[test]
fn configuration_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let o = geomattn(&["train", "--synthetic", "--out", out.to_str().unwrap(), "--set", "optim.bogus=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("optim.bogus"));
    let o = geomattn(&["train", "--synthetic", "--out", out.to_str().unwrap(), "--preset", "imagenet"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diverging_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(&dir.path().join("nan"), "1", &["--set", "optim.lr0=1e300"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn evaluate_reports_metrics_and_omits_tmap_without_tracks() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(train_tiny(&out, "3", &[]));
    let data = out.join("data");
    let ckpt = out.join("model.ckpt");
    let metrics = dir.path().join("metrics.json");
    let o = ok(geomattn(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--query",
        data.join("query.csv").to_str().unwrap(),
        "--gallery",
        data.join("gallery.csv").to_str().unwrap(),
        "--out",
        metrics.to_str().unwrap(),
    ]));
    let report = json(&o);
    for key in ["imAP", "tmAP", "cmc", "excluded_queries"] {
        assert!(report.get(key).is_some(), "{key} missing: {report}");
    }
    let imap = report["imAP"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&imap));
    assert_eq!(serde_json::from_slice::<Value>(&read(metrics)).unwrap(), report);

    let gallery = String::from_utf8(read(data.join("gallery.csv"))).unwrap();
    let untracked: String = gallery.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n").collect();
    let plain = data.join("gallery_plain.csv");
    fs::write(&plain, untracked).unwrap();
    let o = ok(geomattn(&[
        "evaluate",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--query",
        data.join("query.csv").to_str().unwrap(),
        "--gallery",
        plain.to_str().unwrap(),
    ]));
    let report = json(&o);
    assert!(report.get("tmAP").is_none(), "{report}");
    assert_eq!(report["imAP"].as_f64().unwrap(), imap);
    assert!(stderr(&o).contains("tmAP"), "{}", stderr(&o));
}

#[test]
fn evaluate_rejects_mismatched_sizes_unless_resizing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(train_tiny(&out, "3", &[]));
    let big = dir.path().join("big");
    ok(geomattn(&["generate-data", "--out", big.to_str().unwrap(), "--ids", "4", "--images", "6", "--size", "32"]));
    let args = |resize: bool| {
        let mut a = vec![
            "evaluate".to_string(),
            "--checkpoint".into(),
            out.join("model.ckpt").display().to_string(),
            "--query".into(),
            big.join("query.csv").display().to_string(),
            "--gallery".into(),
            big.join("gallery.csv").display().to_string(),
        ];
        if resize {
            a.push("--resize".into());
        }
        a
    };
    let strict = geomattn(&args(false).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(strict.status.code(), Some(1));
    assert!(stderr(&strict).contains("--resize"));
    ok(geomattn(&args(true).iter().map(String::as_str).collect::<Vec<_>>()));
}

fn pnm_header(path: &Path) -> (String, usize, usize) {
    let bytes = read(path.to_path_buf());
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(32)]).into_owned();
    let mut fields = text.split_ascii_whitespace();
    let magic = fields.next().unwrap().to_string();
    let w = fields.next().unwrap().parse().unwrap();
    let h = fields.next().unwrap().parse().unwrap();
    (magic, w, h)
}

#[test]
fn visualize_attention_writes_masks_at_feature_resolution() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(geomattn(&[
        "train",
        "--synthetic",
        "--ids",
        "4",
        "--images",
        "4",
        "--epochs",
        "1",
        "--seed",
        "1",
        "--set",
        "batch.p=2",
        "--set",
        "batch.k=2",
        "--out",
        out.to_str().unwrap(),
    ]));
    let maps = dir.path().join("maps");
    let o = ok(geomattn(&[
        "visualize-attention",
        "--checkpoint",
        out.join("model.ckpt").to_str().unwrap(),
        "--manifest",
        out.join("data/query.csv").to_str().unwrap(),
        "--out",
        maps.to_str().unwrap(),
    ]));
    let summary = json(&o);
    let consistency = summary["rotation_consistency"].as_f64().unwrap();
    assert!((0.0..=1.0 + 1e-12).contains(&consistency));
    let images = summary["images"].as_array().unwrap();
    assert!(!images.is_empty());
    let files: Vec<PathBuf> =
        images[0]["files"].as_array().unwrap().iter().map(|f| PathBuf::from(f.as_str().unwrap())).collect();
    assert_eq!(files.len(), 6);
    assert_eq!(pnm_header(&files[0]), ("P5".into(), 8, 8));
    let raw = geomattn::checkpoint::load(&files[1]).unwrap();
    assert_eq!(raw[0].0, "mask");
    assert_eq!(raw[0].1.shape(), &[8, 8]);
    assert!((raw[0].1.data().iter().sum::<f64>() - 1.0).abs() < 1e-10);
    for f in &files[2..] {
        assert_eq!(pnm_header(f), ("P6".into(), 64, 64));
    }
}

#[test]
fn gradcheck_prints_a_json_report() {
    let o = ok(geomattn(&["gradcheck", "--seed", "1"]));
    let report = json(&o);
    let checks = report["checks"].as_array().unwrap();
    assert!(checks.iter().any(|c| c["name"] == "overall_loss"));
    for c in checks {
        assert!(c["max_rel_error"].as_f64().unwrap() < 1e-4, "{c}");
    }
}
