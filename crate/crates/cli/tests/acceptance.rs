//! Acceptance criterion 10: two invocations of `run` with identical config
//! and seed produce byte-identical `results_matrix.csv` and `metrics.json`.

use std::path::{Path, PathBuf};
use std::process::Command;

fn run_once(config: &Path, seed: u64, out: &Path) {
    let status = Command::new(env!("CARGO_BIN_EXE_fcit"))
        .args(["run", "--config"])
        .arg(config)
        .args(["--seed", &seed.to_string(), "--out"])
        .arg(out)
        .status()
        .expect("spawning the run binary");
    assert!(status.success(), "run exited with {status}");
}

#[test]
fn criterion_10_repeated_runs_are_byte_identical() {
    let scratch = std::env::temp_dir().join(format!("fcit-acceptance-{}", std::process::id()));
    std::fs::create_dir_all(&scratch).unwrap();
    let config = scratch.join("config.json");
    std::fs::write(&config, "{}\n").unwrap();

    let first: PathBuf = scratch.join("first");
    let second: PathBuf = scratch.join("second");
    run_once(&config, 7, &first);
    run_once(&config, 7, &second);

    for artifact in ["results_matrix.csv", "metrics.json"] {
        let a = std::fs::read(first.join(artifact)).unwrap();
        let b = std::fs::read(second.join(artifact)).unwrap();
        assert_eq!(a, b, "{artifact} differs between identical runs");
        assert!(!a.is_empty(), "{artifact} is empty");
    }

    std::fs::remove_dir_all(&scratch).unwrap();
    println!("[acceptance] criterion 10 (byte-identical artifacts): PASS");
}
