use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn csi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csi")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = csi(args);
    assert!(
        out.status.success(),
        "csi {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, seed: &str, workers: &str) -> PathBuf {
    let out = dir.join(format!("data-{seed}-{workers}"));
    ok(&["gen", "--seed", seed, "--workers", workers, "--out", s(&out)]);
    out
}

/// Relative path -> bytes for every file under `root`.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

fn rasters(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    snapshot(root)
        .into_iter()
        .filter(|(p, _)| p.extension().is_some_and(|e| e == "csil" || e == "csif"))
        .collect()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_is_deterministic_across_worker_counts() {
    let tmp = TempDir::new().unwrap();
    let a = generate(tmp.path(), "5", "1");
    let b = generate(tmp.path(), "5", "3");
    let c = generate(tmp.path(), "6", "1");
    assert_eq!(snapshot(&a), snapshot(&b));
    assert_ne!(rasters(&a), rasters(&c));
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let tmp = TempDir::new().unwrap();
    let data = generate(tmp.path(), "1", "1");
    let out = tmp.path().join("eval");
    let gt = data.join("gt");
    ok(&["eval", "--config", s(&data.join("run.toml")), "--pred", s(&gt), "--gt", s(&gt), "--out", s(&out)]);
    let m = json(&out.join("metrics.json"));
    for c in m["per_class"].as_array().unwrap() {
        assert!(c["iou"].is_null() || c["iou"] == 1.0, "{c}");
    }
    assert_eq!(m["means"][0]["value"], 1.0);
}

#[test]
fn relabel_before_start_step_copies_input() {
    let tmp = TempDir::new().unwrap();
    let data = generate(tmp.path(), "2", "1");
    let out = tmp.path().join("early");
    ok(&["relabel", "--config", s(&data.join("run.toml")), "--step", "11999", "--out", s(&out)]);
    assert_eq!(rasters(&out), rasters(&data.join("pseudo")));
    let report = json(&out.join("relabel_report.json"));
    assert_eq!(report["patches_extracted"], 0);
}

#[test]
fn automap_relabel_eval_pipeline() {
    let tmp = TempDir::new().unwrap();
    let data = generate(tmp.path(), "3", "2");
    let run = data.join("run.toml");

    let auto = tmp.path().join("auto");
    let stdout = ok(&["automap", "--config", s(&run), "--out", s(&auto)]);
    assert_eq!(stdout.trim(), "{8->9, 13->14, 15->16}");
    let map = std::fs::read_to_string(auto.join("map.toml")).unwrap();
    assert!(map.contains("# auto-configured\n[[entry]]\nfrom = \"bus\"\nto = \"train\""), "{map}");

    let config = std::fs::read_to_string(&run)
        .unwrap()
        .replace("map = \"map.toml\"", &format!("map = {:?}", s(&auto.join("map.toml"))));
    let full = data.join("full.toml");
    std::fs::write(&full, config).unwrap();

    let once = tmp.path().join("once");
    let twice = tmp.path().join("twice");
    ok(&["relabel", "--config", s(&full), "--step", "12000", "--out", s(&once), "--manifest"]);
    ok(&["relabel", "--config", s(&full), "--step", "12000", "--input", s(&once), "--out", s(&twice)]);
    assert_eq!(rasters(&once), rasters(&twice));
    assert_ne!(rasters(&once), rasters(&data.join("pseudo")));
    assert!(!std::fs::read_to_string(once.join("patches.jsonl")).unwrap().is_empty());

    let eval = tmp.path().join("eval");
    ok(&["eval", "--config", s(&full), "--pred", s(&once), "--out", s(&eval)]);
    assert_eq!(json(&eval.join("metrics.json"))["means"][0]["value"], 1.0);

    let off = tmp.path().join("off");
    ok(&["relabel", "--config", s(&full), "--step", "12000", "--csi", "off", "--out", s(&off)]);
    assert_eq!(rasters(&off), rasters(&data.join("pseudo")));
}

#[test]
fn train_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let config = tmp.path().join("train.toml");
    std::fs::write(&config, "[experiment]\ntotal_steps = 100\neval_every = 50\n").unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&["train", "--config", s(&config), "--seed", "4", "--out", s(&out)]);
        std::fs::read(out.join("report.json")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let report: Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["total_steps"], 100);
    assert_eq!(report["trajectory"].as_array().unwrap().len(), 2);
}

#[test]
fn render_writes_ppm() {
    let tmp = TempDir::new().unwrap();
    let data = generate(tmp.path(), "7", "1");
    let out = tmp.path().join("ppm");
    ok(&["render", "--input", s(&data.join("gt")), "--out", s(&out)]);
    let ppm = std::fs::read(out.join("img-0000.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
    assert_eq!(ppm.len(), b"P6\n64 64\n255\n".len() + 64 * 64 * 3);
}

#[test]
fn errors_are_reported() {
    let tmp = TempDir::new().unwrap();
    let out = csi(&["relabel", "--step", "0", "--out", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[thresholds]\nnms_iou = 0.3\nbogus = 1\n").unwrap();
    let out = csi(&["eval", "--config", s(&bad), "--out", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
}
