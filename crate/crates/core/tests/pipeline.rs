use cascade_core::pipeline::FEED_STAGE;
use cascade_core::runtime::diff_logs;
use cascade_core::script::{AgentScript, TimedWord, UserUtterance};
use cascade_core::telemetry::{Reference, SampleKind, ROW_ORDER};
use cascade_core::{run_sim, PipelineConfig, ScenarioTrace, StageSelection};
use proptest::prelude::*;

fn scenario(name: &str) -> ScenarioTrace {
    let path = format!("{}/../../scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"));
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Boundary time when every inference latency is zero: the end of the
/// 16-frame batch holding the last frame of the required pause.
fn zero_latency_boundary_ms(last_word_end_ms: u64, pause_ms: u64) -> u64 {
    let pause_done = last_word_end_ms.div_ceil(10) + pause_ms / 10 - 1;
    let batch = pause_done / 16;
    // frame k completes once the chunk holding sample 10k + 25 ms has arrived
    10 * (16 * batch + 15) + 30
}

#[test]
fn zero_latency_rows_are_the_sum_of_waits() {
    let trace = scenario("reference");
    let cfg = PipelineConfig::zero_latency();
    let out = run_sim(&trace, &cfg, StageSelection::Full).unwrap();
    let expect = [
        ("mic", 0.0),
        ("mel", 10.0),
        ("asr", 160.0),
        ("llm-state", 0.0),
        ("llm", 0.0),
        ("tts", 0.0),
        ("vocoder", 0.0),
        ("player", 0.0),
    ];
    for (row, want) in expect {
        let stats = out.ledger.stats(row, SampleKind::Cumulative).unwrap_or_else(|| panic!("no {row} row"));
        assert_eq!((stats.min, stats.max), (want, want), "{row}");
    }
    for (k, utt) in trace.user_turns.iter().enumerate() {
        let turn = 2 * k as u32 + 2;
        let end = utt.words.last().unwrap().end_ms;
        let tb = zero_latency_boundary_ms(end, cfg.asr.pause_ms);
        let got = out.ledger.time_to_first_audio(turn, Reference::LastUserWord).unwrap();
        assert!((got - (tb - end) as f64).abs() < 1e-9, "turn {turn}: {got}");
        assert_eq!(out.ledger.time_to_first_audio(turn, Reference::TurnBoundary).unwrap(), 0.0);
    }
}

#[test]
fn every_subset_logs_only_its_own_stages() {
    for name in ["reference", "barge_in"] {
        let trace = scenario(name);
        for sel in StageSelection::ALL {
            let out = run_sim(&trace, &PipelineConfig::default(), sel).unwrap();
            let mut allowed = sel.stages();
            allowed.push("runtime");
            if sel.needs_feed() {
                allowed.push(FEED_STAGE);
            }
            for e in out.log.iter() {
                assert!(allowed.contains(&e.stage.as_str()), "{sel}: {} logged {}", e.stage, e.kind);
            }
            assert_eq!(out.log.iter().last().unwrap().kind, "run.end", "{sel}");
            let has = |prefix: &str| out.log.iter().any(|e| e.kind.starts_with(prefix) && e.stage != FEED_STAGE);
            let stages = sel.stages();
            assert_eq!(has("llm."), stages.contains(&"dialog-core"), "{sel}");
            assert_eq!(has("tts."), stages.contains(&"tts-stream"), "{sel}");
            assert_eq!(has("pcm."), stages.contains(&"audio-out.vocoder"), "{sel}");
            assert_eq!(has("mel."), stages.contains(&"mel"), "{sel}");
        }
    }
}

#[test]
fn asr_only_hands_the_floor_straight_back() {
    let out = run_sim(&scenario("reference"), &PipelineConfig::default(), StageSelection::Asr).unwrap();
    let tbs: Vec<u32> = out.log.of_kind("control.turn_boundary").map(|e| e.turn_id).collect();
    assert_eq!(tbs, [2, 4]);
    let tokens = out.log.of_kind("asr.token").count();
    assert_eq!(tokens, 8);
}

#[test]
fn same_inputs_same_log() {
    for name in ["reference", "barge_in"] {
        let trace = scenario(name);
        for jitter in [false, true] {
            let cfg = PipelineConfig { jitter, ..PipelineConfig::default() };
            for sel in StageSelection::ALL {
                let a = run_sim(&trace, &cfg, sel).unwrap();
                let b = run_sim(&trace, &cfg, sel).unwrap();
                assert_eq!(a.log.serialize(), b.log.serialize(), "{name} {sel}");
                assert!(diff_logs(&a.log, &b.log).is_empty());
            }
        }
    }
}

#[test]
fn jitter_depends_on_the_seed() {
    let mut trace = scenario("reference");
    let cfg = PipelineConfig { jitter: true, ..PipelineConfig::default() };
    let a = run_sim(&trace, &cfg, StageSelection::Full).unwrap();
    trace.seed += 1;
    let b = run_sim(&trace, &cfg, StageSelection::Full).unwrap();
    assert!(!diff_logs(&a.log, &b.log).is_empty());
}

#[test]
fn longer_pause_first_diverges_at_the_boundary() {
    let trace = scenario("reference");
    let short = run_sim(&trace, &PipelineConfig::default(), StageSelection::Full).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.asr.pause_ms = 400;
    let long = run_sim(&trace, &cfg, StageSelection::Full).unwrap();
    let diffs = diff_logs(&short.log, &long.log);
    let first = diffs[0].left.as_ref().unwrap();
    assert_eq!((first.stage.as_str(), first.kind.as_str()), ("asr", "control.turn_boundary"));
    let tb_short = short.log.of_kind("control.turn_boundary").next().unwrap().time;
    let tb_long = long.log.of_kind("control.turn_boundary").next().unwrap().time;
    assert_eq!(tb_long - tb_short, 320_000_000, "pause grows by two batches");
}

#[test]
fn empty_trace_only_brackets_the_run() {
    let out = run_sim(&ScenarioTrace::default(), &PipelineConfig::default(), StageSelection::Full).unwrap();
    let kinds: Vec<&str> = out.log.iter().map(|e| e.kind.as_str()).collect();
    assert_eq!(kinds, ["run.start", "run.end"]);
}

fn utterances() -> impl Strategy<Value = ScenarioTrace> {
    // gaps stay under the 100 ms pause so each utterance is one user turn
    let utt = prop::collection::vec((10u64..90, 80u64..400), 1..5);
    (prop::collection::vec((utt, 0usize..3), 1..3), 0u64..1000).prop_map(|(turns, seed)| {
        let mut t = 200;
        let mut user_turns = Vec::new();
        let mut agent_turns = Vec::new();
        for (k, (words, state_fields)) in turns.into_iter().enumerate() {
            let words = words
                .into_iter()
                .enumerate()
                .map(|(i, (gap, len))| {
                    let start = t + gap;
                    t = start + len;
                    TimedWord { text: format!("u{k}w{i}"), start_ms: start, end_ms: t }
                })
                .collect();
            user_turns.push(UserUtterance { speaker: "user".into(), words });
            let mut reply =
                AgentScript { response: "Sure thing, here is a short answer for you.".into(), ..Default::default() };
            if state_fields > 0 {
                reply.state =
                    Some(cascade_core::message::StateBlock { user_emotion: "calm".into(), ..Default::default() });
            }
            agent_turns.push(reply);
            // leave room for the agent to finish speaking
            t += 6_000;
        }
        ScenarioTrace { seed, user_turns, agent_turns, ..Default::default() }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_sessions_keep_protocol_order(trace in utterances()) {
        let out = run_sim(&trace, &PipelineConfig::default(), StageSelection::Full).unwrap();
        let from_asr: Vec<u32> = out.log.of_kind("control.turn_boundary").filter(|e| e.stage == "asr").map(|e| e.turn_id).collect();
        let want: Vec<u32> = (0..trace.user_turns.len() as u32).map(|k| 2 * k + 2).collect();
        prop_assert_eq!(from_asr, want.clone());
        for turn in want {
            let state = out.log.iter().position(|e| e.kind == "llm.state" && e.turn_id == turn);
            let words = out.log.iter().position(|e| e.kind == "llm.words" && e.turn_id == turn);
            prop_assert!(state.is_some() && state < words, "turn {}", turn);
            prop_assert!(out.ledger.time_to_first_audio(turn, Reference::LastUserWord).unwrap() < 1000.0);
        }
        // cumulative grows along the pipeline within each reference frame
        let mean = |row: &str| out.ledger.stats(row, SampleKind::Cumulative).map(|s| s.mean);
        for pair in ROW_ORDER[..3].windows(2).chain(ROW_ORDER[3..].windows(2)) {
            let (a, b) = (mean(pair[0]).unwrap(), mean(pair[1]).unwrap());
            prop_assert!(a <= b, "{} {} > {} {}", pair[0], a, pair[1], b);
        }
    }
}
