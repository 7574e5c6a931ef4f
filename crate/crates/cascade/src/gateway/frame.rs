//! Wire frames. Every frame, in both directions, is one JSON text message:
//!
//! ```json
//! {"kind": "token", "turn_id": 1, "payload": {"text": "hello", "at_ms": 1312.4}}
//! ```
//!
//! Server frames carry `at_ms`, the session time of the underlying event.
//!
//! | kind            | payload |
//! |-----------------|---------|
//! | `ready`         | `prompt_tokens`, `prompt_encode_ms`, `pause_ms`, `reset_turns` |
//! | `aligned`       | `words: [{text, start_ms, end_ms}]` placed on the session clock |
//! | `token`         | recognized user word: `text`, `frame_index` |
//! | `state`         | the four motivation and emotion fields |
//! | `words`         | agent n-gram: `words`, `ngram_index`, `end_of_turn` |
//! | `speaking`      | playback of n-gram `ngram_index` started |
//! | `latency`       | `row`, `kind` (wait, inference, cumulative), `ms` |
//! | `speaker`       | one diarization window |
//! | `turn_boundary` | `origin` |
//! | `halt`          | `origin` |
//! | `feedback`      | last spoken `ngram_index` of a halted turn |
//! | `param`         | current `pause_ms` and `reset_turns` |
//! | `summary`       | `turns: [{turn_id, ttfa_ms, ttfa_boundary_ms}]` and the latency `report` |
//! | `error`         | `code`, `message` |
//!
//! Client frames use the same envelope; `turn_id` is ignored.
//!
//! | kind          | payload |
//! |---------------|---------|
//! | `user_words`  | `words: [{text, at_ms?, duration_ms?}]`, optional `reply` for the next agent turn |
//! | `barge_in`    | optional `text` |
//! | `set_param`   | `pause_ms?`, `reset_turns?` |
//! | `end_session` | none |

use cascade_core::message::TurnId;
use cascade_core::runtime::LogEvent;
use cascade_core::script::AgentScript;
use cascade_core::telemetry::TelemetrySample;
use cascade_core::time::to_ms;
use cascade_core::{ControlKind, Envelope, Payload};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::live::ClientWord;
use super::GatewayError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub kind: String,
    #[serde(default)]
    pub turn_id: TurnId,
    #[serde(default)]
    pub payload: Value,
}

impl Frame {
    pub fn new(kind: &str, turn_id: TurnId, payload: Value) -> Self {
        Self { kind: kind.into(), turn_id, payload }
    }

    pub fn error(err: &GatewayError) -> Self {
        Self::new("error", 0, json!({ "code": err.code(), "message": err.to_string() }))
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("frame serializes")
    }

    /// Session time of the event, when the frame carries one.
    pub fn at_ms(&self) -> Option<f64> {
        self.payload.get("at_ms").and_then(Value::as_f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientEvent {
    UserWords { words: Vec<ClientWord>, reply: Option<AgentScript> },
    BargeIn { text: Option<String> },
    SetParam { pause_ms: Option<u64>, reset_turns: Option<u32> },
    EndSession,
}

#[derive(Deserialize)]
struct UserWords {
    words: Vec<ClientWord>,
    #[serde(default)]
    reply: Option<AgentScript>,
}

#[derive(Deserialize, Default)]
struct BargeIn {
    #[serde(default)]
    text: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SetParam {
    #[serde(default)]
    pause_ms: Option<u64>,
    #[serde(default)]
    reset_turns: Option<u32>,
}

impl ClientEvent {
    pub fn parse(text: &str) -> Result<Self, GatewayError> {
        let frame: Frame = serde_json::from_str(text).map_err(|e| GatewayError::MalformedFrame(e.to_string()))?;
        let payload = |v: Value| if v.is_null() { json!({}) } else { v };
        let bad = |e: serde_json::Error| GatewayError::MalformedFrame(format!("{}: {e}", frame.kind));
        Ok(match frame.kind.as_str() {
            "user_words" => {
                let u: UserWords = serde_json::from_value(payload(frame.payload.clone())).map_err(bad)?;
                if u.words.iter().any(|w| w.text.split_whitespace().count() != 1) {
                    return Err(GatewayError::MalformedFrame("each word must be a single non-empty token".into()));
                }
                ClientEvent::UserWords { words: u.words, reply: u.reply }
            }
            "barge_in" => {
                let b: BargeIn = serde_json::from_value(payload(frame.payload.clone())).map_err(bad)?;
                ClientEvent::BargeIn { text: b.text }
            }
            "set_param" => {
                let s: SetParam = serde_json::from_value(payload(frame.payload.clone())).map_err(bad)?;
                ClientEvent::SetParam { pause_ms: s.pause_ms, reset_turns: s.reset_turns }
            }
            "end_session" => ClientEvent::EndSession,
            other => return Err(GatewayError::UnknownEventKind(other.into())),
        })
    }
}

/// The client frame for a published envelope, if clients care about it.
pub fn push_event(ev: &LogEvent, env: &Envelope) -> Option<Frame> {
    let at_ms = to_ms(ev.time);
    let turn = env.turn_id;
    let frame = |kind: &str, mut payload: Value| {
        payload["at_ms"] = json!(at_ms);
        Some(Frame::new(kind, turn, payload))
    };
    match &env.payload {
        Payload::Token(t) if !t.is_blank => frame("token", json!({ "text": t.text, "frame_index": t.frame_index })),
        Payload::State(s) => frame("state", serde_json::to_value(s).ok()?),
        Payload::Words(w) => {
            frame("words", json!({ "words": w.words, "ngram_index": w.ngram_index, "end_of_turn": w.end_of_turn }))
        }
        Payload::Control(c) => match c.kind {
            ControlKind::TurnBoundary => frame("turn_boundary", json!({ "origin": c.origin })),
            ControlKind::Halt => frame("halt", json!({ "origin": c.origin })),
            ControlKind::PlaybackFeedback => frame("feedback", json!({ "ngram_index": c.ngram_index })),
            ControlKind::CacheReset => None,
        },
        Payload::Telemetry(TelemetrySample::Latency { row, kind, ms, turn_id }) => {
            let mut f = frame("latency", json!({ "row": row, "kind": kind, "ms": ms }))?;
            f.turn_id = *turn_id;
            Some(f)
        }
        Payload::Telemetry(TelemetrySample::PlayStart { turn_id, ngram_index, .. }) => {
            let mut f = frame("speaking", json!({ "ngram_index": ngram_index }))?;
            f.turn_id = *turn_id;
            Some(f)
        }
        Payload::Telemetry(TelemetrySample::Speaker(s)) => frame("speaker", serde_json::to_value(s).ok()?),
        _ => None,
    }
}
