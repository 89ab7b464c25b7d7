use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
frame_ms = 166.0
lag_count = 400

[room]
dims = [4.0, 4.5, 3.0]
rt60 = 0.3
max_order = 2

[array.circle]
center = [2.0, 2.2, 0.73]
radius = 0.1
count = 8

[grid]
min = [0.4, 0.4, 0.73]
max = [3.6, 4.1, 2.33]
resolution = 0.4

[simulation]
duration = 0.5
sequences = 3
excitation = "white_noise"
snr_db = 30.0
source_min = [0.5, 0.5, 1.0]
source_max = [3.5, 4.0, 2.0]

[training]
batch_size = 20
"#;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_deepgcc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn setup(root: &Path, config: &str) -> std::path::PathBuf {
    let cfg = root.join("exp.toml");
    std::fs::write(&cfg, config).unwrap();
    cfg
}

fn simulate(root: &Path, cfg: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    let out = run(&["simulate", "--config", s(cfg), "--seed", "1", "--out", s(&data)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    data
}

#[test]
fn deepgcc_without_checkpoint_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), CONFIG);
    let data = simulate(dir.path(), &cfg);
    let res = dir.path().join("res");
    let out = run(&[
        "localize",
        "--config",
        s(&cfg),
        "--audio",
        s(&data.join("seq000.wav")),
        "--ground-truth",
        s(&data.join("seq000_gt.csv")),
        "--engine",
        "deepgcc",
        "--out",
        s(&res),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!res.join("results.csv").exists());
}

#[test]
fn zero_duration_simulation_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), &CONFIG.replace("duration = 0.5", "duration = 0.0"));
    let data = dir.path().join("data");
    let out = run(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    assert!(!out.status.success());
    let wavs = std::fs::read_dir(&data)
        .map(|d| {
            d.filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "wav"))
                .count()
        })
        .unwrap_or(0);
    assert_eq!(wavs, 0);
}

#[test]
fn ten_second_recording_has_expected_length() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(
        dir.path(),
        &CONFIG
            .replace("duration = 0.5", "duration = 10.0")
            .replace("sequences = 3", "sequences = 1")
            .replace("max_order = 2", "max_order = 0"),
    );
    let data = simulate(dir.path(), &cfg);
    let audio = deepgcc::dataio::read_wav(&data.join("seq000.wav")).unwrap();
    assert_eq!(audio.channel_count(), 8);
    assert_eq!(audio.len(), 960_000);
}

#[test]
fn train_writes_history_and_localize_dumps_maps() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), CONFIG);
    let data = simulate(dir.path(), &cfg);
    let ck = dir.path().join("model.dgcc");
    let out = run(&[
        "train",
        "--config",
        s(&cfg),
        "--manifest",
        s(&data.join("manifest.toml")),
        "--checkpoint",
        s(&ck),
        "--max-epochs",
        "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let hist = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 3);

    let info = run(&["inspect-model", "--checkpoint", s(&ck)]);
    assert!(info.status.success());
    let text = String::from_utf8(info.stdout).unwrap();
    assert!(text.contains("36025"), "{text}");
    assert!(text.contains("35599"), "{text}");

    let res = dir.path().join("res");
    let out = run(&[
        "localize",
        "--config",
        s(&cfg),
        "--audio",
        s(&data.join("seq000.wav")),
        "--ground-truth",
        s(&data.join("seq000_gt.csv")),
        "--engine",
        "deepgcc",
        "--checkpoint",
        s(&ck),
        "--dump-apm",
        "--out",
        s(&res),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = deepgcc::dataio::read_results(&res.join("results.csv")).unwrap();
    assert!(!rows.is_empty());
    let maps = std::fs::read_dir(res.join("maps")).unwrap().count();
    assert_eq!(maps, rows.len());
}

#[test]
fn eval_compares_two_result_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), CONFIG);
    let data = simulate(dir.path(), &cfg);
    let res = dir.path().join("res");
    let out = run(&[
        "localize",
        "--config",
        s(&cfg),
        "--audio",
        s(&data.join("seq001.wav")),
        "--ground-truth",
        s(&data.join("seq001_gt.csv")),
        "--out",
        s(&res),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = res.join("results.csv");
    let summary = dir.path().join("summary");
    let out = run(&["eval", "--baseline", s(&csv), "--method", s(&csv), "--out", s(&summary)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(summary.join("summary.txt").exists());
    assert!(summary.join("summary.csv").exists());
}

#[test]
fn missing_checkpoint_file_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["inspect-model", "--checkpoint", s(&dir.path().join("nope.dgcc"))]);
    assert_eq!(out.status.code(), Some(3));
}
