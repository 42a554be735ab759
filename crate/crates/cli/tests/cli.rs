use std::path::Path;
use std::process::{Command, Output};

fn entdyn(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_entdyn"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("ENTDYN_OUT")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.toml");
    std::fs::write(&path, format!("schema_version = 1\n{body}")).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stderr).unwrap_or_else(|_| panic!("{}", String::from_utf8_lossy(&o.stderr)))
}

#[test]
fn negative_tau_names_the_field_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[simulate]\ntau = -0.5\n");
    let out = dir.path().join("out");
    let o = entdyn(&["--config", &cfg, "simulate"], &out);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr_json(&o);
    assert_eq!(err["kind"], "config");
    assert!(err["details"][0].as_str().unwrap().starts_with("simulate.tau"), "{err}");
    assert!(!out.exists());
}

#[test]
fn all_violations_are_reported_together() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[simulate]\ntau = 0.0\ntrajectories = 0\n[fpe]\ncells = [2]\n[verify]\ncriteria = [9]\n",
    );
    let o = entdyn(&["--config", &cfg, "onsager"], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    let details: Vec<String> = stderr_json(&o)["details"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    for field in ["simulate.tau", "simulate.trajectories", "fpe.cells[0]", "verify.criteria[0]"] {
        assert!(details.iter().any(|d| d.starts_with(field)), "{field} missing from {details:?}");
    }
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[moments]\nsamples = 10\n");
    let o = entdyn(&["--config", &cfg, "moments"], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr_json(&o)["details"][0].as_str().unwrap().contains("samples"));
}

#[test]
fn unsupported_schema_version_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.toml");
    std::fs::write(&path, "schema_version = 2\n").unwrap();
    let o = entdyn(&["--config", path.to_str().unwrap(), "geometry"], &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["--seed", "7", "simulate", "--trajectories", "40", "--steps", "25"];
    let mut digests = Vec::new();
    for (k, workers) in ["1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("run{k}"));
        let mut a = vec!["--workers", workers];
        a.extend(args);
        let o = entdyn(&a, &out);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let csv = std::fs::read_to_string(out.join("trajectories.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("trajectory_id,step,time,A_1"));
        assert_eq!(lines.count(), 40 * 26);
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["root_seed"], 7);
        digests.push((csv, manifest["outputs"].clone(), manifest["config_sha256"].clone()));
    }
    assert_eq!(digests[0], digests[1]);
}

#[test]
fn different_seeds_give_different_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let read = |seed: &str| {
        let out = dir.path().join(seed);
        let o = entdyn(&["--seed", seed, "simulate", "--trajectories", "5", "--steps", "5"], &out);
        assert!(o.status.success());
        std::fs::read(out.join("trajectories.csv")).unwrap()
    };
    assert_ne!(read("1"), read("2"));
}

#[test]
fn csv_values_round_trip_at_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = entdyn(&["simulate", "--trajectories", "2", "--steps", "3"], &out);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(out.join("trajectories.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let a = line.split(',').nth(3).unwrap();
        let mantissa = a.split('e').next().unwrap();
        assert_eq!(mantissa.chars().filter(|c| c.is_ascii_digit()).count(), 17, "{a}");
    }
}

#[test]
fn every_subcommand_runs_on_small_settings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
[kernel_check]
ks_samples = 2000
[moments]
samples_per_tau = 4000
max_relative_se = 1e9
[reciprocity]
samples_per_tau = 4000
[fpe]
cells = [60]
t_end = 0.2
snapshots = [0.0, 0.1]
ensemble = { trajectories = 2000, tau = 0.01 }
"#,
    );
    let cases: [(&str, &[&str]); 7] = [
        ("geometry", &["geometry.json"]),
        ("kernel-check", &["kernel_check.json"]),
        ("simulate", &["trajectories.csv"]),
        ("moments", &["moments.json"]),
        ("reciprocity", &["reciprocity.json"]),
        ("fpe", &["fpe_snapshots.csv", "fpe_report.json"]),
        ("onsager", &["onsager.json"]),
    ];
    for (cmd, files) in cases {
        let out = dir.path().join(cmd);
        let o = entdyn(&["--config", &cfg, cmd], &out);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
        let listed: Vec<&str> = manifest["outputs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|f| f["file"].as_str().unwrap())
            .collect();
        assert_eq!(listed, files, "{cmd}");
        // nothing besides the declared files and the manifest
        let mut present: Vec<String> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        present.sort();
        let mut expected: Vec<String> = files.iter().map(|s| s.to_string()).collect();
        expected.push("manifest.json".into());
        expected.sort();
        assert_eq!(present, expected, "{cmd}");
    }

    let onsager: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("onsager/onsager.json")).unwrap()).unwrap();
    assert!(onsager["identity_error"].as_f64().unwrap() < 1e-6);
    let fpe: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("fpe/fpe_report.json")).unwrap()).unwrap();
    let snaps = fpe["snapshots"].as_array().unwrap();
    assert_eq!(snaps.len(), 3);
    assert!(snaps[2]["ensemble"]["total_variation"].as_f64().unwrap() < 0.1);
}

#[test]
fn shipped_config_runs_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/default.toml");
    let o = entdyn(&["--config", cfg, "geometry"], &dir.path().join("out"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}
