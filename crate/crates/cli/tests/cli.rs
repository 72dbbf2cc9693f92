use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tilesparse"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tilesparse")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn trained(dir: &TempDir) -> std::path::PathBuf {
    let model = dir.path().join("m.twml");
    let o = run(&["train", "--epochs", "3", "--out", p(&model)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    model
}

#[test]
fn train_prune_verify_roundtrip() {
    let dir = TempDir::new().unwrap();
    let model = trained(&dir);
    let out = dir.path().join("pruned");
    let o = run(&["prune", "--model", p(&model), "-g", "64", "-s", "0.5", "--schedule", "0.25,0.5", "--epochs", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["layer0.twpt", "layer1.twpt", "model.twml", "summary.csv"] {
        assert!(out.join(f).exists(), "missing {f}");
    }

    let mut rdr = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    let hdr = rdr.headers().unwrap().clone();
    assert_eq!(&hdr[3], "sparsity");
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let s: f64 = r[3].parse().unwrap();
        assert!((s - 0.5).abs() < 0.02, "layer sparsity {s}");
    }

    let o = run(&["verify", "--model", p(&out.join("model.twml")), "--patterns", p(&out), "--probes", "4"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("PASS"));
}

#[test]
fn dense_pattern_verifies_exactly() {
    let dir = TempDir::new().unwrap();
    let model = trained(&dir);
    let out = dir.path().join("dense");
    let o = run(&["prune", "--model", p(&model), "-s", "0", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["verify", "--model", p(&model), "--patterns", p(&out.join("layer0.twpt")), p(&out.join("layer1.twpt"))]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("worst diff 0e0"), "{}", stdout(&o));
}

#[test]
fn corrupted_checkpoint_is_a_format_error() {
    let dir = TempDir::new().unwrap();
    let model = trained(&dir);
    let mut bytes = fs::read(&model).unwrap();
    bytes[0] ^= 0xff;
    let bad = dir.path().join("bad.twml");
    fs::write(&bad, &bytes).unwrap();
    let o = run(&["prune", "--model", p(&bad), "--out", p(&dir.path().join("x"))]);
    assert_eq!(code(&o), 3);

    bytes = fs::read(&model).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&bad, &bytes).unwrap();
    let o = run(&["verify", "--model", p(&bad), "--patterns", p(dir.path())]);
    assert_eq!(code(&o), 3);
}

#[test]
fn missing_file_is_io_error() {
    let o = run(&["verify", "--model", "/nonexistent/m.twml", "--patterns", "/nonexistent"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let model = trained(&dir);
    let out = dir.path().join("o");
    // Granularity must be a multiple of 8.
    let o = run(&["prune", "--model", p(&model), "-g", "12", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    // Apriori counts columns; the layers are 256 wide.
    let o = run(&["prune", "--model", p(&model), "--apriori", "200,57", "--out", p(&out)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    // Schedule must end at the target.
    let o = run(&["prune", "--model", p(&model), "-s", "0.5", "--schedule", "0.2,0.4", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["prune", "--model", p(&model), "--apriori", "3", "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    let o = run(&["bench", "--shapes", "8x8"]);
    assert_eq!(code(&o), 2);
    let o = run(&["frobnicate"]);
    assert_eq!(code(&o), 2);
    let o = run(&["--help"]);
    assert_eq!(code(&o), 0);
}

#[test]
fn config_file_supplies_flags_and_cli_wins() {
    let dir = TempDir::new().unwrap();
    let conf = dir.path().join("bench.conf");
    fs::write(&conf, "# small sweep\nshapes = 16x32x64\ngranularity = 16\nsparsity = 0,0.5\nrepeats = 5\n").unwrap();
    let csv_path = dir.path().join("b.csv");
    let o = run(&["bench", "--config", p(&conf), "-s", "0.75", "--out", p(&csv_path)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(&csv_path).unwrap();
    assert_eq!(rdr.headers().unwrap().len(), 20);
    let rows: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][0], "16");
    assert_eq!(&rows[0][4], "0.75");

    fs::write(&conf, "granularity 16\n").unwrap();
    let o = run(&["bench", "--config", p(&conf)]);
    assert_eq!(code(&o), 2);
    let o = run(&["bench", "--config", p(&dir.path().join("nope.conf"))]);
    assert_eq!(code(&o), 3);
}

#[test]
fn analyze_writes_both_tables() {
    let dir = TempDir::new().unwrap();
    let model = trained(&dir);
    let out = dir.path().join("an");
    let o = run(&["analyze", "--model", p(&model), "-g", "16", "--blocks", "4", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let layers = fs::read_to_string(out.join("layers.csv")).unwrap();
    assert_eq!(layers.lines().count(), 3);
    let mut rdr = csv::Reader::from_path(out.join("cdf.csv")).unwrap();
    let last: Vec<_> = rdr.records().map(|r| r.unwrap()).collect();
    // Each unit shape's CDF ends at 1.
    for unit in ["1x16", "4x4"] {
        let tail = last.iter().rev().find(|r| &r[0] == unit).unwrap();
        assert!((tail[5].parse::<f64>().unwrap() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn overlay_prune_under_global_ranking() {
    let dir = TempDir::new().unwrap();
    let model = trained(&dir);
    let out = dir.path().join("tew");
    let o = run(&["prune", "--model", p(&model), "-s", "0.6", "--ranking", "global", "--delta", "0.02", "--epochs", "1", "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("summary.csv")).unwrap();
    let (mut kept, mut total) = (0.0, 0.0);
    for r in rdr.records().map(|r| r.unwrap()) {
        assert!(out.join(format!("layer{}.twcs", &r[0])).exists());
        let n: f64 = r[1].parse::<f64>().unwrap() * r[2].parse::<f64>().unwrap();
        let s: f64 = r[3].parse().unwrap();
        let tile: f64 = r[4].parse().unwrap();
        // Each layer restores 2% of its own elements.
        assert!((tile - s - 0.02).abs() < 1.0 / n + 1e-6, "{s} vs {tile}");
        kept += (1.0 - s) * n;
        total += n;
    }
    assert!((1.0 - kept / total - 0.6).abs() < 0.01);
}
