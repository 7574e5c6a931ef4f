//! Single-threaded discrete-event driver.
//!
//! Events execute in `(time, stage registration order, seq)` order, so a run
//! is a pure function of the registered stages and their inputs.

use alloc::boxed::Box;
use alloc::collections::BinaryHeap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Reverse;
use core::fmt;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::{Context, EventLog, Output, Stage, Step};
use crate::bus::{Bus, BusError, Topic};
use crate::message::{Envelope, Payload, TurnId};
use crate::telemetry::Ledger;
use crate::time::Nanos;

pub const RUNTIME_STAGE: &str = "runtime";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunError {
    DuplicateStage(String),
    UnknownTopic(Topic),
    NoSourceStage,
    Bus(BusError),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::DuplicateStage(s) => write!(f, "stage {s} registered twice"),
            RunError::UnknownTopic(t) => write!(f, "unknown topic {t}"),
            RunError::NoSourceStage => f.write_str("no source stage registered"),
            RunError::Bus(e) => write!(f, "bus: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for RunError {}

impl From<BusError> for RunError {
    fn from(e: BusError) -> Self {
        RunError::Bus(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotState {
    Idle,
    Busy,
    Sleeping,
    Blocked,
    Done,
}

struct Slot {
    stage: Box<dyn Stage>,
    name: String,
    state: SlotState,
    pending: Vec<Output>,
    wake_at: Option<Nanos>,
    log_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    Complete,
    Wake,
}

pub struct Simulator {
    bus: Bus,
    slots: Vec<Slot>,
    queue: BinaryHeap<Reverse<(Nanos, usize, u64, EventKind)>>,
    next_event: u64,
    now: Nanos,
    log: EventLog,
    ledger: Ledger,
    rng: ChaCha8Rng,
    jitter: bool,
    runtime_seq: u64,
}

impl Simulator {
    pub fn new(bus: Bus, seed: u64, jitter: bool) -> Self {
        Self {
            bus,
            slots: Vec::new(),
            queue: BinaryHeap::new(),
            next_event: 0,
            now: 0,
            log: EventLog::default(),
            ledger: Ledger::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            jitter,
            runtime_seq: 0,
        }
    }

    /// Adds a stage and subscribes it to its input topics. Returns its id,
    /// which is also its tie-break rank.
    pub fn register_stage(&mut self, stage: Box<dyn Stage>) -> Result<usize, RunError> {
        let spec = stage.spec().clone();
        if self.slots.iter().any(|s| s.name == spec.name) {
            return Err(RunError::DuplicateStage(spec.name));
        }
        if let Some(t) = spec.inputs.iter().chain(&spec.outputs).find(|t| !self.bus.has_topic(**t)) {
            return Err(RunError::UnknownTopic(*t));
        }
        for t in &spec.inputs {
            self.bus.subscribe(*t, &spec.name)?;
        }
        self.slots.push(Slot {
            stage,
            name: spec.name,
            state: SlotState::Idle,
            pending: Vec::new(),
            wake_at: None,
            log_seq: 0,
        });
        Ok(self.slots.len() - 1)
    }

    pub fn stage_names(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.name.as_str()).collect()
    }

    pub fn stage(&self, name: &str) -> Option<&dyn Stage> {
        self.slots.iter().find(|s| s.name == name).map(|s| s.stage.as_ref())
    }

    pub fn now(&self) -> Nanos {
        self.now
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    /// Runs until no events remain or the next event lies beyond `until`.
    pub fn run(&mut self, until: Nanos) -> Result<(), RunError> {
        if !self.slots.iter().any(|s| s.stage.spec().source) {
            return Err(RunError::NoSourceStage);
        }
        self.ledger.begin();
        self.runtime_event("run.start");
        for i in 0..self.slots.len() {
            self.schedule(0, i, EventKind::Wake);
        }
        while let Some(Reverse((t, idx, _, kind))) = self.queue.pop() {
            if t > until {
                break;
            }
            self.now = t;
            match kind {
                EventKind::Complete => self.complete(idx)?,
                EventKind::Wake => {
                    if self.slots[idx].wake_at != Some(t) {
                        continue;
                    }
                    self.slots[idx].wake_at = None;
                    match self.slots[idx].state {
                        SlotState::Idle | SlotState::Sleeping => self.poll(idx)?,
                        SlotState::Blocked => self.complete(idx)?,
                        SlotState::Busy | SlotState::Done => {}
                    }
                }
            }
        }
        self.runtime_event("run.end");
        self.ledger.finish();
        Ok(())
    }

    /// Consumes the simulator, returning the log and ledger.
    pub fn into_parts(self) -> (EventLog, Ledger, Bus) {
        (self.log, self.ledger, self.bus)
    }

    fn runtime_event(&mut self, kind: &str) {
        self.log.push(self.now, RUNTIME_STAGE, kind, 0, self.runtime_seq);
        self.runtime_seq += 1;
    }

    fn schedule(&mut self, t: Nanos, idx: usize, kind: EventKind) {
        if kind == EventKind::Wake {
            let slot = &mut self.slots[idx];
            if matches!(slot.wake_at, Some(w) if w <= t) {
                return;
            }
            slot.wake_at = Some(t);
        }
        self.next_event += 1;
        self.queue.push(Reverse((t, idx, self.next_event, kind)));
    }

    fn poll(&mut self, idx: usize) -> Result<(), RunError> {
        let step = {
            let slot = &mut self.slots[idx];
            let mut cx = SimContext {
                now: self.now,
                bus: &mut self.bus,
                name: &slot.name,
                log: &mut self.log,
                log_seq: &mut slot.log_seq,
                rng: &mut self.rng,
                jitter: self.jitter,
            };
            slot.stage.poll(&mut cx)
        };
        match step {
            Step::Idle => {
                self.slots[idx].state = SlotState::Idle;
                if self.bus.pending(&self.slots[idx].name) > 0 {
                    self.schedule(self.now, idx, EventKind::Wake);
                }
            }
            Step::Busy { duration, outputs } => {
                let slot = &mut self.slots[idx];
                slot.state = SlotState::Busy;
                slot.pending = outputs;
                self.schedule(self.now + duration, idx, EventKind::Complete);
            }
            Step::SleepUntil(t) => {
                self.slots[idx].state = SlotState::Sleeping;
                self.schedule(t.max(self.now), idx, EventKind::Wake);
            }
            Step::Done => self.slots[idx].state = SlotState::Done,
        }
        self.retry_blocked();
        Ok(())
    }

    /// Publishes the outputs of a finished step, then polls the stage again.
    fn complete(&mut self, idx: usize) -> Result<(), RunError> {
        let outputs = core::mem::take(&mut self.slots[idx].pending);
        let mut rest = outputs.into_iter();
        while let Some(out) = rest.next() {
            match self.publish(idx, &out) {
                Ok(()) => {}
                Err(RunError::Bus(BusError::WouldBlock { .. })) => {
                    let slot = &mut self.slots[idx];
                    slot.pending = core::iter::once(out).chain(rest).collect();
                    slot.state = SlotState::Blocked;
                    self.runtime_event("bus.blocked");
                    return Ok(());
                }
                Err(e) => return Err(e),
            }
        }
        self.slots[idx].state = SlotState::Idle;
        self.poll(idx)
    }

    fn publish(&mut self, idx: usize, out: &Output) -> Result<(), RunError> {
        let name = self.slots[idx].name.clone();
        let seq = self.bus.next_seq(out.topic, &name);
        let env = Envelope::new(out.topic, &name, seq, self.now, out.turn_id, out.payload.clone());
        self.bus.publish(env)?;
        self.log.push(self.now, &name, out.payload.kind(), out.turn_id, seq);
        if let Payload::Telemetry(sample) = &out.payload {
            // the ledger only rejects samples outside a run
            let _ = self.ledger.ingest(sample);
        }
        let targets: Vec<usize> = {
            let subs = self.bus.subscribers(out.topic);
            self.slots
                .iter()
                .enumerate()
                .filter(|(i, s)| *i != idx && subs.contains(&s.name.as_str()))
                .map(|(i, _)| i)
                .collect()
        };
        for i in targets {
            if matches!(self.slots[i].state, SlotState::Idle | SlotState::Sleeping) {
                self.schedule(self.now, i, EventKind::Wake);
            }
        }
        Ok(())
    }

    fn retry_blocked(&mut self) {
        let blocked: Vec<usize> =
            self.slots.iter().enumerate().filter(|(_, s)| s.state == SlotState::Blocked).map(|(i, _)| i).collect();
        for i in blocked {
            let out = &self.slots[i].pending[0];
            if !self.bus.would_block(out.topic, &self.slots[i].name) {
                self.schedule(self.now, i, EventKind::Wake);
            }
        }
    }
}

struct SimContext<'a> {
    now: Nanos,
    bus: &'a mut Bus,
    name: &'a str,
    log: &'a mut EventLog,
    log_seq: &'a mut u64,
    rng: &'a mut ChaCha8Rng,
    jitter: bool,
}

impl Context for SimContext<'_> {
    fn now(&self) -> Nanos {
        self.now
    }

    fn recv(&mut self) -> Option<Envelope> {
        self.bus.recv(self.name)
    }

    fn log(&mut self, kind: &str, turn_id: TurnId) {
        self.log.push(self.now, self.name, kind, turn_id, *self.log_seq);
        *self.log_seq += 1;
    }

    fn latency(&mut self, nominal: Nanos) -> Nanos {
        apply_jitter(nominal, self.jitter, self.rng)
    }
}

/// Uniform ±10% around `nominal` when enabled.
pub fn apply_jitter(nominal: Nanos, enabled: bool, rng: &mut impl RngCore) -> Nanos {
    if !enabled || nominal == 0 {
        return nominal;
    }
    let u = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    let factor = 0.9 + 0.2 * u;
    libm::round(nominal as f64 * factor) as Nanos
}
