//! Wall-clock driver: one worker thread per stage, all sharing one bus.
//!
//! Stages are the same objects the simulator runs. A `Busy` step sleeps for
//! its duration before publishing, `SleepUntil` waits on the wall clock, and
//! `Idle` blocks until something arrives for the stage.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use cascade_core::bus::{Bus, BusError};
use cascade_core::message::{Envelope, Payload, TurnId};
use cascade_core::runtime::{apply_jitter, Context, EventLog, LogEvent, Output, RunError, Stage, Step, RUNTIME_STAGE};
use cascade_core::telemetry::Ledger;
use cascade_core::Nanos;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;

/// Called under the bus lock for every published envelope, in log order.
pub type Observer = Box<dyn FnMut(&LogEvent, &Envelope) + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Worker {
    Running,
    Idle,
    Sleeping,
    Busy,
    Blocked,
    Done,
}

struct Inner {
    bus: Bus,
    log: EventLog,
    ledger: Ledger,
    names: Vec<String>,
    workers: Vec<Worker>,
    log_seq: Vec<u64>,
    runtime_seq: u64,
    observer: Option<Observer>,
    error: Option<RunError>,
}

impl Inner {
    fn runtime_event(&mut self, now: Nanos, kind: &str) {
        self.log.push(now, RUNTIME_STAGE, kind, 0, self.runtime_seq);
        self.runtime_seq += 1;
    }

    fn quiescent(&self) -> bool {
        self.workers.iter().zip(&self.names).all(|(w, n)| match w {
            Worker::Done => true,
            Worker::Idle => self.bus.pending(n) == 0,
            _ => false,
        })
    }

    fn publish(&mut self, idx: usize, now: Nanos, out: &Output) -> Result<(), RunError> {
        let name = &self.names[idx];
        let seq = self.bus.next_seq(out.topic, name);
        let env = Envelope::new(out.topic, name, seq, now, out.turn_id, out.payload.clone());
        self.bus.publish(env.clone())?;
        self.log.push(now, name, out.payload.kind(), out.turn_id, seq);
        if let Payload::Telemetry(sample) = &out.payload {
            let _ = self.ledger.ingest(sample);
        }
        if let (Some(obs), Some(ev)) = (self.observer.as_mut(), self.log.events.last()) {
            obs(ev, &env);
        }
        Ok(())
    }
}

struct Shared {
    inner: Mutex<Inner>,
    cv: Condvar,
    start: Instant,
    stop: AtomicBool,
}

impl Shared {
    fn now(&self) -> Nanos {
        self.start.elapsed().as_nanos() as Nanos
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn stopped(&self) -> bool {
        self.stop.load(Ordering::Acquire)
    }

    fn wait_until<'a>(&'a self, guard: MutexGuard<'a, Inner>, deadline: Option<Nanos>) -> MutexGuard<'a, Inner> {
        match deadline {
            None => self.cv.wait(guard).unwrap_or_else(|p| p.into_inner()),
            Some(d) => {
                let left = Duration::from_nanos(d.saturating_sub(self.now()));
                self.cv.wait_timeout(guard, left).unwrap_or_else(|p| p.into_inner()).0
            }
        }
    }
}

/// Lets another thread end a running session.
#[derive(Clone)]
pub struct StopHandle(Arc<Shared>);

impl StopHandle {
    pub fn stop(&self) {
        self.0.stop.store(true, Ordering::Release);
        let _guard = self.0.lock();
        self.0.cv.notify_all();
    }

    /// Session time on the wall clock.
    pub fn now(&self) -> Nanos {
        self.0.now()
    }
}

pub struct RealtimeRunner {
    bus: Bus,
    stages: Vec<Box<dyn Stage>>,
    seed: u64,
    jitter: bool,
    observer: Option<Observer>,
}

impl RealtimeRunner {
    pub fn new(bus: Bus, seed: u64, jitter: bool) -> Self {
        Self { bus, stages: Vec::new(), seed, jitter, observer: None }
    }

    pub fn register_stage(&mut self, stage: Box<dyn Stage>) -> Result<usize, RunError> {
        let spec = stage.spec().clone();
        if self.stages.iter().any(|s| s.spec().name == spec.name) {
            return Err(RunError::DuplicateStage(spec.name));
        }
        if let Some(t) = spec.inputs.iter().chain(&spec.outputs).find(|t| !self.bus.has_topic(**t)) {
            return Err(RunError::UnknownTopic(*t));
        }
        for t in &spec.inputs {
            self.bus.subscribe(*t, &spec.name)?;
        }
        self.stages.push(stage);
        Ok(self.stages.len() - 1)
    }

    pub fn set_observer(&mut self, obs: Observer) {
        self.observer = Some(obs);
    }

    /// Spawns the workers. The session clock starts now.
    pub fn start(self) -> Result<RunningSession, RunError> {
        if !self.stages.iter().any(|s| s.spec().source) {
            return Err(RunError::NoSourceStage);
        }
        let names: Vec<String> = self.stages.iter().map(|s| s.spec().name.clone()).collect();
        let n = names.len();
        let mut ledger = Ledger::new();
        ledger.begin();
        let shared = Arc::new(Shared {
            inner: Mutex::new(Inner {
                bus: self.bus,
                log: EventLog::default(),
                ledger,
                names: names.clone(),
                workers: vec![Worker::Running; n],
                log_seq: vec![0; n],
                runtime_seq: 0,
                observer: self.observer,
                error: None,
            }),
            cv: Condvar::new(),
            start: Instant::now(),
            stop: AtomicBool::new(false),
        });
        shared.lock().runtime_event(0, "run.start");
        let handles = self
            .stages
            .into_iter()
            .enumerate()
            .map(|(idx, stage)| {
                let shared = shared.clone();
                let rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(idx as u64));
                let jitter = self.jitter;
                thread::Builder::new()
                    .name(format!("stage-{}", names[idx]))
                    .spawn(move || work(shared, idx, stage, rng, jitter))
                    .expect("spawn stage worker")
            })
            .collect();
        Ok(RunningSession { shared, handles })
    }
}

pub struct RunningSession {
    shared: Arc<Shared>,
    handles: Vec<JoinHandle<Box<dyn Stage>>>,
}

pub struct RealtimeOutput {
    pub log: EventLog,
    pub ledger: Ledger,
    pub stale_dropped: BTreeMap<String, u64>,
    pub stages: Vec<Box<dyn Stage>>,
}

impl RealtimeOutput {
    pub fn stage(&self, name: &str) -> Option<&dyn Stage> {
        self.stages.iter().find(|s| s.spec().name == name).map(|s| s.as_ref())
    }
}

impl RunningSession {
    pub fn handle(&self) -> StopHandle {
        StopHandle(self.shared.clone())
    }

    /// Blocks until every stage is done or idle with nothing queued, until
    /// `until` passes, or until stopped. Then joins the workers.
    pub fn wait(self, until: Option<Nanos>) -> Result<RealtimeOutput, RunError> {
        {
            let mut g = self.shared.lock();
            loop {
                let late = until.is_some_and(|u| self.shared.now() >= u);
                if g.quiescent() || late || self.shared.stopped() || g.error.is_some() {
                    break;
                }
                // workers notify on every state change; the timeout covers `until`
                g = self.shared.wait_until(g, Some(self.shared.now() + 50_000_000));
            }
            self.shared.stop.store(true, Ordering::Release);
            self.shared.cv.notify_all();
        }
        let mut stages = Vec::with_capacity(self.handles.len());
        for h in self.handles {
            match h.join() {
                Ok(s) => stages.push(s),
                Err(panic) => std::panic::resume_unwind(panic),
            }
        }
        // stop handles may outlive the session, so take the results out in place
        let mut inner = self.shared.lock();
        let now = self.shared.now();
        inner.runtime_event(now, "run.end");
        inner.ledger.finish();
        if let Some(e) = inner.error.take() {
            return Err(e);
        }
        let stale_dropped =
            inner.names.iter().map(|n| (n.clone(), inner.bus.stale_dropped(n))).filter(|(_, c)| *c > 0).collect();
        inner.observer = None;
        let log = std::mem::take(&mut inner.log);
        let ledger = std::mem::take(&mut inner.ledger);
        Ok(RealtimeOutput { log, ledger, stale_dropped, stages })
    }
}

struct RtContext<'a> {
    shared: &'a Shared,
    idx: usize,
    rng: &'a mut ChaCha8Rng,
    jitter: bool,
}

impl Context for RtContext<'_> {
    fn now(&self) -> Nanos {
        self.shared.now()
    }

    fn recv(&mut self) -> Option<Envelope> {
        let mut g = self.shared.lock();
        let name = g.names[self.idx].clone();
        g.bus.recv(&name)
    }

    fn log(&mut self, kind: &str, turn_id: TurnId) {
        let mut g = self.shared.lock();
        let now = self.shared.now();
        let seq = g.log_seq[self.idx];
        g.log_seq[self.idx] += 1;
        let name = g.names[self.idx].clone();
        g.log.push(now, &name, kind, turn_id, seq);
    }

    fn latency(&mut self, nominal: Nanos) -> Nanos {
        apply_jitter(nominal, self.jitter, self.rng)
    }
}

fn set_state(shared: &Shared, g: &mut Inner, idx: usize, w: Worker) {
    g.workers[idx] = w;
    shared.cv.notify_all();
}

fn work(
    shared: Arc<Shared>,
    idx: usize,
    mut stage: Box<dyn Stage>,
    mut rng: ChaCha8Rng,
    jitter: bool,
) -> Box<dyn Stage> {
    let name = stage.spec().name.clone();
    while !shared.stopped() {
        let t0 = shared.now();
        let step = stage.poll(&mut RtContext { shared: &shared, idx, rng: &mut rng, jitter });
        match step {
            Step::Idle => {
                let mut g = shared.lock();
                set_state(&shared, &mut g, idx, Worker::Idle);
                while g.bus.pending(&name) == 0 && !shared.stopped() {
                    g = shared.wait_until(g, None);
                }
                g.workers[idx] = Worker::Running;
            }
            Step::SleepUntil(t) => {
                let mut g = shared.lock();
                set_state(&shared, &mut g, idx, Worker::Sleeping);
                while shared.now() < t && g.bus.pending(&name) == 0 && !shared.stopped() {
                    g = shared.wait_until(g, Some(t));
                }
                g.workers[idx] = Worker::Running;
            }
            Step::Busy { duration, outputs } => {
                set_state(&shared, &mut shared.lock(), idx, Worker::Busy);
                let deadline = t0 + duration;
                let now = shared.now();
                if deadline > now {
                    thread::sleep(Duration::from_nanos(deadline - now));
                }
                if !publish_all(&shared, idx, &outputs) {
                    break;
                }
                set_state(&shared, &mut shared.lock(), idx, Worker::Running);
            }
            Step::Done => break,
        }
    }
    set_state(&shared, &mut shared.lock(), idx, Worker::Done);
    stage
}

/// Publishes in order, waiting out full lanes. False if the run must end.
fn publish_all(shared: &Shared, idx: usize, outputs: &[Output]) -> bool {
    let mut g = shared.lock();
    for out in outputs {
        loop {
            let now = shared.now();
            match g.publish(idx, now, out) {
                Ok(()) => break,
                Err(RunError::Bus(BusError::WouldBlock { .. })) => {
                    if shared.stopped() {
                        return false;
                    }
                    g.workers[idx] = Worker::Blocked;
                    g = shared.wait_until(g, Some(now + 10_000_000));
                }
                Err(e) => {
                    g.error = Some(e);
                    shared.cv.notify_all();
                    return false;
                }
            }
        }
    }
    shared.cv.notify_all();
    true
}
