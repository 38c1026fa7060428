use serde_json::{json, Value};
use std::path::Path;
use std::process::{Command, Output};

fn convfocus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convfocus"))
        .args(args)
        .output()
        .unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = convfocus(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_manifest(dir: &Path) -> std::path::PathBuf {
    let m = json!({
        "sample_rate": 16000.0,
        "duration_s": 3.0,
        "seed": 3,
        "frame_len": 512,
        "hop": 256,
        "n_directions": 162,
        "n_plane_waves": 128,
        "snr_db": 0.0,
        "target": {
            "participant_id": "talker",
            "waypoints": [{"time_s": 0.0, "azimuth_deg": 0.0, "inclination_deg": 90.0}],
            "activity": [[0.2, 2.8]]
        }
    });
    let p = dir.join("scene.json");
    std::fs::write(&p, m.to_string()).unwrap();
    p
}

#[test]
fn simulate_enhance_evaluate_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let manifest = write_manifest(tmp.path());
    let sim = ok_json(&["simulate", "--manifest", s(&manifest), "--dir", s(&scene)]);
    assert!((sim["channel0_snr_db"].as_f64().unwrap()).abs() < 0.1);

    let enhanced = tmp.path().join("enhanced.wav");
    let report_path = tmp.path().join("enhance.json");
    let out = convfocus(&[
        "--out",
        s(&report_path),
        "enhance",
        "--data-root",
        s(&scene),
        "--atf-path",
        "atf.bin",
        "--pose-path",
        "poses.csv",
        "--input-path",
        "mixture.wav",
        "--output-path",
        s(&enhanced),
        "--target-id",
        "talker",
        "--wearer-id",
        "wearer",
        "--frame-len",
        "512",
        "--hop",
        "256",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(out.stdout.is_empty());
    let rep: Value = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(rep["weight_computations"], 1);
    assert!(enhanced.exists());

    let eval = ok_json(&[
        "evaluate",
        "--enhanced",
        s(&enhanced),
        "--reference",
        s(&scene.join("target.wav")),
        "--mixture",
        s(&scene.join("mixture.wav")),
        "--va-path",
        s(&scene.join("va.json")),
        "--target-id",
        "talker",
        "--wearer-id",
        "wearer",
    ]);
    let gain = eval["enhanced"]["snr_db"].as_f64().unwrap()
        - eval["reference_mic"]["snr_db"].as_f64().unwrap();
    assert!(gain > 3.0, "beamformer gain {gain} dB");
}

#[test]
fn config_file_with_flag_override() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let manifest = write_manifest(tmp.path());
    ok_json(&[
        "simulate",
        "--manifest",
        s(&manifest),
        "--dir",
        s(&scene),
        "--seed",
        "9",
    ]);
    let cfg = json!({
        "data_root": s(&scene),
        "atf_path": "atf.bin",
        "pose_path": "poses.csv",
        "input_path": "mixture.wav",
        "output_path": "out.wav",
        "target_id": "talker",
        "wearer_id": "wearer",
        "frame_len": 512,
        "hop": 256,
        "ref_channel": 0
    });
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, cfg.to_string()).unwrap();
    let rep = ok_json(&[
        "enhance",
        "--config",
        s(&cfg_path),
        "--ref-channel",
        "2",
        "--bypass",
    ]);
    assert_eq!(rep["ref_channel"], 2);
    assert_eq!(rep["bypass"], true);
    assert_eq!(rep["weight_computations"], 0);
}

#[test]
fn errors_exit_nonzero_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let manifest = write_manifest(tmp.path());
    ok_json(&["simulate", "--manifest", s(&manifest), "--dir", s(&scene)]);
    let enhanced = tmp.path().join("never.wav");
    let out = convfocus(&[
        "enhance",
        "--data-root",
        s(&scene),
        "--atf-path",
        "atf.bin",
        "--pose-path",
        "poses.csv",
        "--input-path",
        "mixture.wav",
        "--output-path",
        s(&enhanced),
        "--target-id",
        "nobody",
        "--wearer-id",
        "wearer",
        "--frame-len",
        "512",
        "--hop",
        "256",
    ]);
    assert!(!out.status.success());
    assert!(!enhanced.exists());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nobody"));

    let bad_cfg = tmp.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"frame_length": 512}"#).unwrap();
    assert!(!convfocus(&["enhance", "--config", s(&bad_cfg)])
        .status
        .success());
    assert!(
        !convfocus(&["atf", "info", s(&tmp.path().join("missing.bin"))])
            .status
            .success()
    );
}

#[test]
fn track_links_and_suppresses() {
    let tmp = tempfile::tempdir().unwrap();
    let mut lines = String::new();
    for f in 0..10 {
        lines += &format!(
            "{}\n",
            json!({"frame": f, "x1": 100, "y1": 100, "x2": 150, "y2": 160, "feature": [1.0, 0.0]})
        );
    }
    for f in 0..4 {
        lines += &format!(
            "{}\n",
            json!({"frame": f, "x1": 400, "y1": 100, "x2": 450, "y2": 160, "feature": [0.0, 1.0]})
        );
    }
    let det = tmp.path().join("det.jsonl");
    std::fs::write(&det, lines).unwrap();
    let faces = tmp.path().join("faces.jsonl");
    std::fs::write(
        &faces,
        format!(
            "{}\n",
            json!({"frame": 3, "x1": 105, "y1": 105, "x2": 145, "y2": 150, "face_id": 7})
        ),
    )
    .unwrap();
    let tracks = ok_json(&["track", "--detections", s(&det), "--faces", s(&faces)]);
    let tracks = tracks.as_array().unwrap();
    assert_eq!(tracks.len(), 1);
    assert_eq!(tracks[0]["frames"].as_array().unwrap().len(), 10);
    assert_eq!(tracks[0]["face_id"], 7);

    let short = ok_json(&["track", "--detections", s(&det), "--min-track-len", "4"]);
    assert_eq!(short.as_array().unwrap().len(), 2);
}

#[test]
fn atf_convert_roundtrip() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let manifest = write_manifest(tmp.path());
    ok_json(&["simulate", "--manifest", s(&manifest), "--dir", s(&scene)]);
    let bin = scene.join("atf.bin");
    let info = ok_json(&["atf", "info", s(&bin)]);
    assert_eq!(info["n_channels"], 6);
    assert_eq!(info["n_bins"], 257);
    assert_eq!(info["n_directions"], 162);

    let json_path = tmp.path().join("atf.json");
    let back = tmp.path().join("back.bin");
    ok_json(&["atf", "convert", s(&bin), s(&json_path)]);
    ok_json(&["atf", "convert", s(&json_path), s(&back)]);
    assert_eq!(std::fs::read(&bin).unwrap(), std::fs::read(&back).unwrap());
}
