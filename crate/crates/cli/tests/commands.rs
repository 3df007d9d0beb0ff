//! End-to-end checks of the report and sweep subcommands.

use std::path::Path;
use std::process::Command;

fn fcit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fcit"))
}

fn small_config(path: &Path) {
    std::fs::write(
        path,
        r#"{
  "scenario": {
    "client_pool": 6,
    "clients_per_round": 2,
    "rounds_per_stage": 3,
    "family": {"tasks": 2, "train_per_task": 40, "test_per_task": 20}
  },
  "epochs": 3
}
"#,
    )
    .unwrap();
}

#[test]
fn report_prints_the_metrics_of_a_finished_run() {
    let scratch = std::env::temp_dir().join(format!("fcit-report-{}", std::process::id()));
    std::fs::create_dir_all(&scratch).unwrap();
    let config = scratch.join("config.json");
    small_config(&config);
    let out = scratch.join("run");

    let status = fcit()
        .args(["run", "--config"])
        .arg(&config)
        .args(["--seed", "3", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());

    let report = fcit().args(["report", "--run"]).arg(&out).output().unwrap();
    assert!(report.status.success());
    let stdout = String::from_utf8(report.stdout).unwrap();
    assert!(stdout.contains("last:"), "missing last metric in: {stdout}");
    assert!(stdout.contains("avg:"), "missing avg metric in: {stdout}");
    assert!(stdout.contains("forgetting"), "missing forgetting in: {stdout}");

    std::fs::remove_dir_all(&scratch).unwrap();
}

#[test]
fn sweep_runs_the_beta_grid_and_writes_per_run_artifacts() {
    let scratch = std::env::temp_dir().join(format!("fcit-sweep-{}", std::process::id()));
    std::fs::create_dir_all(&scratch).unwrap();
    let config = scratch.join("config.json");
    small_config(&config);
    let out = scratch.join("grid");

    let output = fcit()
        .args(["sweep", "--config"])
        .arg(&config)
        .args(["--betas", "0.5,5.0", "--seeds", "2", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("mean"), "missing summary rows in: {stdout}");

    for beta in ["0.5", "5"] {
        for seed in ["1", "2"] {
            let metrics = out
                .join(format!("beta-{beta}"))
                .join(format!("seed-{seed}"))
                .join("metrics.json");
            assert!(metrics.exists(), "missing {}", metrics.display());
        }
    }

    std::fs::remove_dir_all(&scratch).unwrap();
}
