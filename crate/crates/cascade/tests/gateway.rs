use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use cascade::gateway::{Frame, Gateway};
use cascade::harness::{run_scenario, Mode};
use cascade_core::script::{TimedWord, UserUtterance};
use cascade_core::time::to_ms;
use cascade_core::{PipelineConfig, ScenarioTrace, StageSelection};
use serde_json::{json, Value};
use tungstenite::stream::MaybeTlsStream;
use tungstenite::{Message, WebSocket};

fn server() -> SocketAddr {
    let gw = Gateway::bind("127.0.0.1:0".parse().unwrap(), PipelineConfig::default(), None).unwrap();
    gw.spawn().0
}

struct Client {
    ws: WebSocket<MaybeTlsStream<TcpStream>>,
    seen: Vec<Frame>,
}

impl Client {
    fn connect(addr: SocketAddr) -> Self {
        let (ws, _) = tungstenite::connect(format!("ws://{addr}/")).unwrap();
        if let MaybeTlsStream::Plain(s) = ws.get_ref() {
            s.set_read_timeout(Some(Duration::from_millis(20))).unwrap();
        }
        Client { ws, seen: Vec::new() }
    }

    fn send(&mut self, kind: &str, payload: Value) {
        self.send_raw(&json!({ "kind": kind, "payload": payload }).to_string());
    }

    fn send_raw(&mut self, text: &str) {
        self.ws.send(Message::text(text)).unwrap();
    }

    /// Next frame, or None after `timeout`.
    fn next(&mut self, timeout: Duration) -> Option<Frame> {
        let end = Instant::now() + timeout;
        while Instant::now() < end {
            match self.ws.read() {
                Ok(Message::Text(t)) => {
                    let f: Frame = serde_json::from_str(&t).unwrap();
                    self.seen.push(f.clone());
                    return Some(f);
                }
                Ok(Message::Close(_)) => return None,
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(_) => return None,
            }
        }
        None
    }

    fn wait_for(&mut self, kind: &str, timeout: Duration) -> Frame {
        let end = Instant::now() + timeout;
        while Instant::now() < end {
            if let Some(f) = self.next(end - Instant::now()) {
                if f.kind == kind {
                    return f;
                }
            }
        }
        panic!("no {kind} frame within {timeout:?}; saw {:?}", self.seen.iter().map(|f| &f.kind).collect::<Vec<_>>());
    }

    fn of_kind(&self, kind: &str) -> Vec<&Frame> {
        self.seen.iter().filter(|f| f.kind == kind).collect()
    }

    fn finish(mut self) -> (Frame, Vec<Frame>) {
        self.send("end_session", Value::Null);
        let summary = self.wait_for("summary", Duration::from_secs(10));
        (summary, self.seen)
    }
}

const SECS: Duration = Duration::from_secs(5);

/// Placed words from an `aligned` frame as (text, start ms, end ms).
fn placed(f: &Frame) -> Vec<(String, f64, f64)> {
    f.payload["words"]
        .as_array()
        .unwrap()
        .iter()
        .map(|w| {
            (w["text"].as_str().unwrap().to_string(), w["start_ms"].as_f64().unwrap(), w["end_ms"].as_f64().unwrap())
        })
        .collect()
}

/// The same words as a recorded trace, simulated.
fn oracle(words: &[(String, f64, f64)], cfg: &PipelineConfig) -> cascade_core::RunOutput {
    let words: Vec<TimedWord> = words
        .iter()
        .map(|(t, s, e)| TimedWord { text: t.clone(), start_ms: s.round() as u64, end_ms: e.round() as u64 })
        .collect();
    let end = words.last().unwrap().end_ms;
    let trace = ScenarioTrace {
        duration_ms: Some(end + 3000),
        user_turns: vec![UserUtterance { speaker: "user".into(), words }],
        agent_turns: vec![cascade::gateway::default_reply()],
        ..Default::default()
    };
    run_scenario(&trace, cfg, Mode::Sim, StageSelection::Full).unwrap()
}

#[test]
fn session_opens_with_the_prompt_already_encoded() {
    let mut c = Client::connect(server());
    let ready = c.next(SECS).unwrap();
    assert_eq!(ready.kind, "ready");
    let prompt = PipelineConfig::default().dialog.system_prompt;
    assert!(!prompt.is_empty());
    assert_eq!(ready.payload["prompt_tokens"].as_u64().unwrap() as usize, prompt.split_whitespace().count());
    assert!(ready.payload["prompt_encode_ms"].as_f64().unwrap() > 0.0);
    assert_eq!(ready.payload["pause_ms"], 100);
    c.finish();
}

#[test]
fn hello_there_is_recognized_like_a_recorded_trace() {
    let mut c = Client::connect(server());
    c.wait_for("ready", SECS);
    c.send(
        "user_words",
        json!({ "words": [{ "text": "hello", "at_ms": 70_000 }, { "text": "there", "at_ms": 70_400 }] }),
    );
    let words = placed(&c.wait_for("aligned", SECS));
    assert_eq!(words.iter().map(|w| w.0.as_str()).collect::<Vec<_>>(), ["hello", "there"]);
    assert!((words[1].1 - words[0].1 - 400.0).abs() < 1e-6, "client gap kept");
    let tb = c.wait_for("turn_boundary", SECS);
    let tokens: Vec<(String, f64)> = c
        .of_kind("token")
        .iter()
        .map(|f| (f.payload["text"].as_str().unwrap().to_string(), f.at_ms().unwrap()))
        .collect();
    let sim = oracle(&words, &PipelineConfig::default());
    let expect: Vec<(String, f64)> = sim
        .log
        .iter()
        .filter(|e| e.kind == "asr.token")
        .map(|e| e.time)
        .zip(["hello", "there"])
        .map(|(t, w)| (w.to_string(), to_ms(t)))
        .collect();
    assert_eq!(tokens.len(), 2);
    for ((w, live), (v, want)) in tokens.iter().zip(&expect) {
        assert_eq!(w, v);
        assert!((live - want).abs() < 20.0, "{w}: live {live} ms, trace {want} ms");
    }
    let sim_tb = to_ms(sim.log.of_kind("control.turn_boundary").next().unwrap().time);
    assert!((tb.at_ms().unwrap() - sim_tb).abs() < 20.0);
    assert_eq!(tb.turn_id, 2);
    c.finish();
}

#[test]
fn longer_pause_holds_the_floor_longer() {
    let mut c = Client::connect(server());
    c.wait_for("ready", SECS);
    c.send("set_param", json!({ "pause_ms": 400 }));
    assert_eq!(c.wait_for("param", SECS).payload["pause_ms"], 400);
    c.send("user_words", json!({ "words": [{ "text": "hello" }, { "text": "there" }] }));
    let words = placed(&c.wait_for("aligned", SECS));
    let tb = c.wait_for("turn_boundary", SECS).at_ms().unwrap();
    let last_end = words[1].2;
    assert!(tb - last_end >= 400.0, "boundary {tb} only {} ms after speech", tb - last_end);
    let mut cfg = PipelineConfig::default();
    cfg.asr.pause_ms = 400;
    let want = to_ms(oracle(&words, &cfg).log.of_kind("control.turn_boundary").next().unwrap().time);
    assert!((tb - want).abs() < 20.0, "live {tb} trace {want}");
    c.finish();
}

#[test]
fn barge_in_halts_within_one_recognizer_batch() {
    let mut c = Client::connect(server());
    c.wait_for("ready", SECS);
    let long = (0..60).map(|i| format!("word{i}")).collect::<Vec<_>>().join(" ");
    c.send("user_words", json!({ "words": [{ "text": "talk" }], "reply": { "response": long } }));
    c.wait_for("speaking", SECS);
    c.send("barge_in", json!({}));
    let barge = placed(&c.wait_for("aligned", SECS));
    let halt = c.wait_for("halt", SECS);
    assert_eq!(halt.turn_id, 2);
    // the batch holding the word's last frame completes at most one batch
    // plus one chunk and one analysis window later, then inference runs
    let cfg = PipelineConfig::default();
    let batch_ms = (cfg.asr.batch_frames as u32 * cfg.mel.hop_ms) as f64;
    let bound = batch_ms + cfg.chunk_ms as f64 + cfg.mel.window_ms as f64 + cfg.asr.inference_ms + 15.0;
    let delay = halt.at_ms().unwrap() - barge[0].2;
    assert!(delay > 0.0 && delay <= bound, "halt {delay} ms after the barge-in word, bound {bound}");
    let feedback = c.wait_for("feedback", SECS);
    let spoken: Vec<i64> = c
        .of_kind("speaking")
        .iter()
        .filter(|f| f.turn_id == 2)
        .map(|f| f.payload["ngram_index"].as_i64().unwrap())
        .collect();
    assert_eq!(feedback.payload["ngram_index"].as_i64(), spoken.last().copied());
    assert!(spoken.len() < 60, "playback stopped early");
    c.finish();
}

#[test]
fn bad_frames_get_errors_and_the_session_goes_on() {
    let mut c = Client::connect(server());
    c.wait_for("ready", SECS);
    c.send_raw("{not json");
    assert_eq!(c.wait_for("error", SECS).payload["code"], "malformed_frame");
    c.send("dance", json!({}));
    assert_eq!(c.wait_for("error", SECS).payload["code"], "unknown_event_kind");
    c.send("set_param", json!({ "pause_ms": 50 }));
    assert_eq!(c.wait_for("error", SECS).payload["code"], "invalid_param");
    c.send("user_words", json!({ "words": [{ "text": "still" }, { "text": "here" }] }));
    c.wait_for("turn_boundary", SECS);
    assert_eq!(c.of_kind("token").len(), 2);
    c.finish();
}

#[test]
fn concurrent_sessions_do_not_share_state() {
    let addr = server();
    let mut a = Client::connect(addr);
    let mut b = Client::connect(addr);
    a.wait_for("ready", SECS);
    b.wait_for("ready", SECS);
    b.send("set_param", json!({ "pause_ms": 300 }));
    b.wait_for("param", SECS);
    a.send("user_words", json!({ "words": [{ "text": "only" }, { "text": "mine" }] }));
    a.wait_for("turn_boundary", SECS);
    // an idle session still streams latency rows, so drain for a fixed time
    let until = Instant::now() + Duration::from_millis(300);
    while Instant::now() < until {
        b.next(Duration::from_millis(20));
    }
    assert!(b.of_kind("token").is_empty());
    let (_, frames) = a.finish();
    assert!(frames.iter().all(|f| f.kind != "param"));
    b.finish();
}

#[test]
fn frames_follow_the_event_log_and_end_with_a_summary() {
    let mut c = Client::connect(server());
    c.wait_for("ready", SECS);
    let reply = json!({
        "state": { "user_motivation": "ask", "user_emotion": "curious", "agent_motivation": "help", "agent_emotion": "warm" },
        "response": "Happy to help with that today."
    });
    c.send("user_words", json!({ "words": [{ "text": "help" }, { "text": "me" }], "reply": reply }));
    // the player hands the floor back once the reply has been spoken
    let back = c.wait_for("turn_boundary", SECS);
    let back = if back.turn_id == 2 { c.wait_for("turn_boundary", SECS) } else { back };
    assert_eq!(back.turn_id, 3);
    let (summary, frames) = c.finish();

    let pipeline: Vec<&Frame> =
        frames.iter().filter(|f| !matches!(f.kind.as_str(), "ready" | "aligned" | "param" | "summary")).collect();
    let times: Vec<f64> = pipeline.iter().map(|f| f.at_ms().unwrap()).collect();
    assert!(times.windows(2).all(|w| w[0] <= w[1]), "frames out of log order");
    let pos = |kind: &str| pipeline.iter().position(|f| f.kind == kind && f.turn_id == 2).unwrap();
    assert!(pos("state") < pos("words"));
    assert!(pos("words") < pos("speaking"));
    assert_eq!(pipeline[pos("state")].payload["agent_emotion"], "warm");

    let turns = summary.payload["turns"].as_array().unwrap();
    assert_eq!(turns.len(), 1);
    assert_eq!(turns[0]["turn_id"], 2);
    let ttfa = turns[0]["ttfa_ms"].as_f64().unwrap();
    assert!(ttfa > 0.0 && ttfa < 1000.0, "{ttfa}");
    assert!(summary.payload["report"]["rows"].is_array() || summary.payload["report"].is_object());
}

#[test]
fn plain_http_serves_the_console_page() {
    use std::io::{Read, Write};
    let addr = server();
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET / HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
    let mut body = String::new();
    s.read_to_string(&mut body).unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET /missing.js HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
    body.clear();
    s.read_to_string(&mut body).unwrap();
    assert!(body.starts_with("HTTP/1.1 404"));
}

#[test]
fn taken_address_is_a_bind_failure() {
    let gw = Gateway::bind("127.0.0.1:0".parse().unwrap(), PipelineConfig::default(), None).unwrap();
    let err = Gateway::bind(gw.local_addr(), PipelineConfig::default(), None).err().unwrap();
    assert_eq!(err.code(), "bind_failure");
}
