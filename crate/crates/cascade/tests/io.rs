use cascade::config_io::{load_config, to_toml, ConfigError};
use cascade::harness::{run_scenario, write_pcm, write_report, Mode};
use cascade::trace_io::{load_trace, save_trace, LoadError};
use cascade::wav;
use cascade_core::{PipelineConfig, ScenarioTrace, StageSelection};
use std::fs;

fn reference() -> String {
    format!("{}/../../scenarios/reference.json", env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn bad_json_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.json");
    fs::write(&p, "{\"schema_version\": 1, \"user_turns\": [").unwrap();
    assert!(matches!(load_trace(&p), Err(LoadError::Parse { .. })));
}

#[test]
fn overlapping_words_are_an_invalid_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.json");
    let text = r#"{"schema_version": 1, "user_turns": [{"words": [
        {"text": "a", "start_ms": 0, "end_ms": 300}, {"text": "b", "start_ms": 200, "end_ms": 400}]}]}"#;
    fs::write(&p, text).unwrap();
    assert!(matches!(load_trace(&p), Err(LoadError::InvalidTimeline { .. })));
}

#[test]
fn trace_survives_a_round_trip() {
    let t = load_trace(reference()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("copy.json");
    save_trace(&t, &p).unwrap();
    assert_eq!(load_trace(&p).unwrap(), t);
}

#[test]
fn recorded_audio_is_loaded_next_to_the_trace() {
    let dir = tempfile::tempdir().unwrap();
    let samples: Vec<f32> = (0..16_000).map(|i| (i as f32 * 0.01).sin() * 0.5).collect();
    wav::write_mono(&dir.path().join("a.wav"), &samples, 16_000).unwrap();
    let p = dir.path().join("t.json");
    fs::write(&p, r#"{"schema_version": 1, "audio_path": "a.wav"}"#).unwrap();
    let t = load_trace(&p).unwrap();
    let got = t.audio.unwrap();
    assert_eq!(got.len(), 16_000);
    assert!(got.iter().zip(&samples).all(|(a, b)| (a - b).abs() < 1e-4));

    wav::write_mono(&dir.path().join("a.wav"), &samples, 8_000).unwrap();
    assert!(matches!(load_trace(&p), Err(LoadError::Audio { .. })));
}

#[test]
fn config_round_trips_through_toml() {
    let mut cfg = PipelineConfig::default();
    cfg.asr.pause_ms = 300;
    cfg.dialog.reset_turns = 4;
    cfg.jitter = true;
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    fs::write(&p, to_toml(&cfg)).unwrap();
    assert_eq!(load_config(&p).unwrap(), cfg);
}

#[test]
fn config_typos_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    fs::write(&p, "[asr]\npause_msec = 300\n").unwrap();
    assert!(matches!(load_config(&p), Err(ConfigError::Parse { .. })));
    fs::write(&p, "[asr]\npause_ms = 300\n").unwrap();
    assert_eq!(load_config(&p).unwrap().asr.pause_ms, 300);
}

#[test]
fn run_artifacts_are_written() {
    let trace: ScenarioTrace = load_trace(reference()).unwrap();
    let cfg = PipelineConfig::default();
    let out = run_scenario(&trace, &cfg, Mode::Sim, StageSelection::Full).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_report(&out, dir.path()).unwrap();
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert!(json.is_object());
    assert!(fs::read_to_string(dir.path().join("report.txt")).unwrap().contains("asr"));
    let log = fs::read_to_string(dir.path().join("events.log")).unwrap();
    assert_eq!(log, out.log.serialize());

    let files = write_pcm(&out, &dir.path().join("pcm"), cfg.vocoder.output_rate).unwrap();
    assert_eq!(files.len(), out.pcm.len());
    for (path, samples) in files.iter().zip(out.pcm.values()) {
        let r = hound::WavReader::open(path).unwrap();
        assert_eq!(r.spec().sample_rate, 24_000);
        assert_eq!(r.len() as usize, samples.len());
        assert_eq!(samples.len() % 600, 0);
    }
}
