use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--toy",
    "--set",
    "radar.n_pulses=1024",
    "--set",
    "radar.n_channels=1",
    "--set",
    "dataset.per_class=5",
    "--set",
    "train.epochs=1",
    "--set",
    "bench.samples=3",
    "--set",
    "robustness.noise_seeds=1",
    "--set",
    "ablate.seeds=1",
    "--threads",
    "1",
];

fn hmdd(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hmdd"))
        .args(SMALL)
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn hash_line(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn end_to_end_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&hmdd(&["simulate"], &d.join("cubes")));
    let cubes = d.join("cubes/manifest.json");
    assert!(cubes.exists());

    ok(&hmdd(&["preprocess", "--manifest", cubes.to_str().unwrap(), "--with-augment"], &d.join("dtm")));
    let dtms = d.join("dtm/dtm_manifest.json");
    let m = dtms.to_str().unwrap();
    assert!(d.join("dtm/dtm/cube_00000_000deg.pgm").exists());
    assert!(d.join("dtm/aug/cube_00039_330deg.dtm").exists());
    assert!(!d.join("dtm/failures.csv").exists());

    ok(&hmdd(&["augment", "--manifest", m], &d.join("aug")));
    assert!(d.join("aug/aug_manifest.json").exists());

    ok(&hmdd(&["train", "--manifest", m], &d.join("train")));
    let model = d.join("train/model.hmd");
    let hash = hash_line(&d.join("train/curves.csv"));
    assert!(hash.starts_with("# config_hash="));
    assert_eq!(hash_line(&d.join("train/confusion.csv")), hash);

    let model = model.to_str().unwrap();
    ok(&hmdd(&["eval", "--model", model, "--manifest", m], &d.join("eval")));
    assert_eq!(hash_line(&d.join("eval/confusion.csv")), hash);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval/metrics.json")).unwrap()).unwrap();
    assert!((0.0..=1.0).contains(&metrics["accuracy"].as_f64().unwrap()));

    ok(&hmdd(&["robustness", "--model", model, "--manifest", m], &d.join("rob")));
    let rob = std::fs::read_to_string(d.join("rob/robustness.csv")).unwrap();
    assert_eq!(rob.lines().count(), 2 + 4);

    ok(&hmdd(&["bench", "--model", model, "--manifest", m], &d.join("bench")));
    let bench = std::fs::read_to_string(d.join("bench/bench.csv")).unwrap();
    assert!(bench.contains("end_to_end,") && bench.contains("accuracy,"));

    ok(&hmdd(&["ablate", "--manifest", m], &d.join("ablate")));
    let ab = std::fs::read_to_string(d.join("ablate/ablation.csv")).unwrap();
    assert!(ab.contains("hmdd,raw,") && ab.contains("hmdd,augmented,"));
}

#[test]
fn corrupt_sample_gives_partial_exit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&hmdd(&["simulate"], &d.join("cubes")));
    std::fs::write(d.join("cubes/cube_00003_000deg.rcb"), b"RCB1 truncated").unwrap();
    let m = d.join("cubes/manifest.json");
    let o = hmdd(&["preprocess", "--manifest", m.to_str().unwrap()], &d.join("dtm"));
    assert_eq!(o.status.code(), Some(2));
    let failures = std::fs::read_to_string(d.join("dtm/failures.csv")).unwrap();
    assert_eq!(failures.lines().count(), 2);
    assert!(failures.contains("cube_00003_000deg.rcb"));
    let written = std::fs::read_to_string(d.join("dtm/dtm_manifest.json")).unwrap();
    assert_eq!(written.matches("\"path\"").count(), 39);
}

#[test]
fn bad_configuration_is_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let o = hmdd(&["--set", "flm.alpha=-1", "simulate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("invalid configuration"));
    let o = hmdd(&["--set", "no.such_key=1", "simulate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none(), "nothing written");
}

#[test]
fn print_default_round_trips_through_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hmdd")).args(["config", "--print-default"]).output().unwrap();
    ok(&o);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("flm.beta = 0.2"));
    let path = dir.path().join("exp.txt");
    std::fs::write(&path, &text).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hmdd"))
        .args(["config", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    ok(&o);
    assert!(String::from_utf8(o.stdout).unwrap().contains(&text));
}
