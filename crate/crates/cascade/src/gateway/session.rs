//! One client connection driving one realtime pipeline.

use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver};
use std::sync::Arc;
use std::time::Duration;

use cascade_core::config::Tunables;
use cascade_core::dialog::DialogCore;
use cascade_core::pipeline::build_stages;
use cascade_core::telemetry::Reference;
use cascade_core::time::{ms, to_ms};
use cascade_core::{Bus, PipelineConfig, ScenarioTrace, StageSelection};
use serde_json::json;
use tungstenite::{Message, WebSocket};

use super::frame::{push_event, ClientEvent, Frame};
use super::live::{ClientWord, LiveScript};
use super::GatewayError;
use crate::realtime::{RealtimeOutput, RealtimeRunner, RunningSession, StopHandle};

/// How far ahead of the session clock typed words are placed.
pub const LEAD_MS: u64 = 20;
/// A barge-in is a single short word starting immediately.
pub const BARGE_IN_MS: u64 = 40;
pub const PAUSE_RANGE_MS: std::ops::RangeInclusive<u64> = 100..=400;

const POLL: Duration = Duration::from_millis(5);

enum Ending {
    Requested,
    Closed,
}

struct Session {
    ws: WebSocket<TcpStream>,
    frames: Receiver<Frame>,
    script: Arc<LiveScript>,
    tunables: Arc<Tunables>,
    clock: StopHandle,
}

impl Session {
    fn send(&mut self, f: &Frame) -> Result<(), GatewayError> {
        self.ws.send(Message::text(f.to_text())).map_err(|_| GatewayError::ClientGone)
    }

    fn forward(&mut self) -> Result<(), GatewayError> {
        while let Ok(f) = self.frames.try_recv() {
            self.send(&f)?;
        }
        Ok(())
    }

    fn param_frame(&self) -> Frame {
        Frame::new(
            "param",
            0,
            json!({ "pause_ms": self.tunables.pause_ms(), "reset_turns": self.tunables.reset_turns() }),
        )
    }

    fn aligned(&self, words: &[cascade_core::script::ScriptWord]) -> Frame {
        let words: Vec<_> = words
            .iter()
            .map(|w| json!({ "text": w.text, "start_ms": to_ms(w.start), "end_ms": to_ms(w.end) }))
            .collect();
        Frame::new("aligned", 0, json!({ "words": words, "at_ms": to_ms(self.clock.now()) }))
    }

    fn on_event(&mut self, ev: ClientEvent) -> Result<Option<Frame>, GatewayError> {
        let now = self.clock.now();
        Ok(Some(match ev {
            ClientEvent::UserWords { words, reply } => {
                if let Some(r) = reply {
                    self.script.queue_reply(r);
                }
                let placed = self.script.append(now + ms(LEAD_MS), &words);
                self.aligned(&placed)
            }
            ClientEvent::BargeIn { text } => {
                let word = ClientWord {
                    text: text.unwrap_or_else(|| "wait".into()),
                    at_ms: None,
                    duration_ms: Some(BARGE_IN_MS),
                };
                let placed = self.script.append(now, &[word]);
                self.aligned(&placed)
            }
            ClientEvent::SetParam { pause_ms, reset_turns } => {
                if let Some(p) = pause_ms {
                    if !PAUSE_RANGE_MS.contains(&p) {
                        return Err(GatewayError::InvalidParam(format!("pause_ms {p} outside 100..=400")));
                    }
                }
                if reset_turns == Some(0) {
                    return Err(GatewayError::InvalidParam("reset_turns must be at least 1".into()));
                }
                if let Some(p) = pause_ms {
                    self.tunables.set_pause_ms(p);
                }
                if let Some(n) = reset_turns {
                    self.tunables.set_reset_turns(n);
                }
                self.param_frame()
            }
            ClientEvent::EndSession => return Ok(None),
        }))
    }

    /// Pumps frames both ways until the client ends or leaves.
    fn pump(&mut self) -> Result<Ending, GatewayError> {
        loop {
            self.forward()?;
            match self.ws.read() {
                Ok(Message::Text(text)) => match ClientEvent::parse(&text).and_then(|ev| self.on_event(ev)) {
                    Ok(Some(reply)) => self.send(&reply)?,
                    Ok(None) => return Ok(Ending::Requested),
                    Err(e) => {
                        log::debug!("client frame rejected: {e}");
                        self.send(&Frame::error(&e))?;
                    }
                },
                Ok(Message::Close(_)) => return Ok(Ending::Closed),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) =>
                {
                    // flushes any pending pong
                    let _ = self.ws.flush();
                }
                Err(_) => return Err(GatewayError::ClientGone),
            }
        }
    }

    fn summary(&self, out: &RealtimeOutput) -> Frame {
        let turns: Vec<_> = out
            .ledger
            .agent_turns()
            .into_iter()
            .map(|t| {
                json!({
                    "turn_id": t,
                    "ttfa_ms": out.ledger.time_to_first_audio(t, Reference::LastUserWord).ok(),
                    "ttfa_boundary_ms": out.ledger.time_to_first_audio(t, Reference::TurnBoundary).ok(),
                })
            })
            .collect();
        let report = out.ledger.render_report();
        Frame::new("summary", 0, json!({ "turns": turns, "report": report, "at_ms": to_ms(self.clock.now()) }))
    }
}

/// Runs one session to completion on an upgraded connection.
pub fn run(ws: WebSocket<TcpStream>, cfg: &PipelineConfig) -> Result<(), GatewayError> {
    ws.get_ref().set_read_timeout(Some(POLL))?;
    let script = Arc::new(LiveScript::new());
    let tunables = Arc::new(Tunables::new(cfg));
    let (tx, frames) = mpsc::channel();

    // the dialog stage pre-encodes the prompt as it is built, before any user event
    let stages =
        build_stages(&ScenarioTrace::default(), script.clone(), cfg, StageSelection::Full, Some(tunables.clone()))
            .map_err(|e| GatewayError::Session(e.to_string()))?;
    let mut runner = RealtimeRunner::new(Bus::with_pipeline_topics(cfg.bus_capacity), 0, cfg.jitter);
    for s in stages {
        runner.register_stage(s).map_err(|e| GatewayError::Session(e.to_string()))?;
    }
    runner.set_observer(Box::new(move |ev, env| {
        if let Some(f) = push_event(ev, env) {
            let _ = tx.send(f);
        }
    }));

    let prompt = &cfg.dialog.system_prompt;
    let encode_ms = DialogCore::new(cfg.dialog.clone()).preencode_prompt(prompt).unwrap_or(0.0);
    let ready = Frame::new(
        "ready",
        0,
        json!({
            "prompt_tokens": prompt.split_whitespace().count(),
            "prompt_encode_ms": encode_ms,
            "pause_ms": tunables.pause_ms(),
            "reset_turns": tunables.reset_turns(),
            "at_ms": 0.0,
        }),
    );

    let running: RunningSession = runner.start().map_err(|e| GatewayError::Session(e.to_string()))?;
    let mut s = Session { ws, frames, script, tunables, clock: running.handle() };
    s.send(&ready)?;
    let ending = s.pump();
    s.clock.stop();
    let out = running.wait(None).map_err(|e| GatewayError::Session(e.to_string()))?;
    match ending {
        Ok(Ending::Requested) => {
            s.forward()?;
            let summary = s.summary(&out);
            s.send(&summary)?;
            let _ = s.ws.close(None);
            // let the close handshake finish so the client sees a clean end
            while s.ws.read().is_ok() {}
            Ok(())
        }
        Ok(Ending::Closed) => Ok(()),
        Err(e) => Err(e),
    }
}
