//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.
//!
//! Criteria 1-7 run in process at the full budget. Criterion 8 runs the
//! `entdyn verify` binary several times with the same seed and different
//! worker counts and compares the outputs byte for byte. It uses the quick
//! budget unless `ENTDYN_DETERMINISM_BUDGET=full` is set; the code paths are
//! the same, only the sample counts differ.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use entdyn::acceptance::{Budget, CRITERIA};

const SEED: u64 = 20_260_115;

fn run_verify(out: &Path, workers: usize, quick: bool) -> Result<(Vec<u8>, serde_json::Value), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_entdyn"));
    cmd.args(["--seed", &SEED.to_string(), "--workers", &workers.to_string(), "--out"])
        .arg(out)
        .arg("verify");
    if quick {
        cmd.arg("--quick");
    }
    let status = cmd.output().map_err(|e| e.to_string())?;
    // exit 3 means some check failed; the outputs are still written
    if !matches!(status.status.code(), Some(0) | Some(3)) {
        return Err(format!(
            "verify exited with {:?}: {}",
            status.status.code(),
            String::from_utf8_lossy(&status.stderr)
        ));
    }
    let report = std::fs::read(out.join("verify.json")).map_err(|e| e.to_string())?;
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    Ok((report, manifest))
}

fn determinism() -> (bool, String) {
    let start = Instant::now();
    let quick = std::env::var("ENTDYN_DETERMINISM_BUDGET").as_deref() != Ok("full");
    let dir = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => return (false, format!("no temp dir: {e}")),
    };
    let mut runs = Vec::new();
    for (k, workers) in [1, 2, 4, 1].into_iter().enumerate() {
        match run_verify(&dir.path().join(format!("run{k}")), workers, quick) {
            Ok(r) => runs.push((workers, r)),
            Err(e) => return (false, e),
        }
    }
    let (_, (bytes0, manifest0)) = &runs[0];
    let mut problems = Vec::new();
    for (workers, (bytes, manifest)) in &runs[1..] {
        if bytes != bytes0 {
            problems.push(format!("verify.json differs at {workers} workers"));
        }
        for key in ["outputs", "config_sha256", "root_seed"] {
            if manifest[key] != manifest0[key] {
                problems.push(format!("manifest `{key}` differs at {workers} workers"));
            }
        }
    }
    let detail = format!(
        "{} runs at workers 1/2/4/1, {} budget, {:.1}s{}",
        runs.len(),
        if quick { "quick" } else { "full" },
        start.elapsed().as_secs_f64(),
        if problems.is_empty() {
            String::new()
        } else {
            format!("; {}", problems.join(", "))
        }
    );
    (problems.is_empty(), detail)
}

fn main() -> ExitCode {
    // `cargo test -- --list` and friends: nothing to enumerate
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut all = true;
    for &(id, criterion) in CRITERIA.iter() {
        match criterion(SEED, Budget::Full) {
            Ok(report) => {
                all &= report.passed && report.within_time();
                println!("{}", report.line());
                for c in &report.checks {
                    println!("    {} {} = {:e} ({})", if c.passed { "ok  " } else { "FAIL" }, c.name, c.value, c.bound);
                }
            }
            Err(e) => {
                all = false;
                println!("FAIL [{id}] error: {e}");
            }
        }
    }
    let (ok, detail) = determinism();
    all &= ok;
    println!(
        "{} [8] determinism of verify across worker counts ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
