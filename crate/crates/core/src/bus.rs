//! Topic-based publish/subscribe transport with a control lane.
//!
//! Every subscription owns two queues. Data envelopes go into a bounded FIFO;
//! a full data lane refuses the publish (`WouldBlock`) and nothing is enqueued
//! anywhere, so a blocked publisher can retry the same envelope later. Control
//! signals go into an unbounded lane that is always drained first.
//!
//! Halts also drive stale-turn filtering: once a stage has dequeued a Halt for
//! turn `T`, data envelopes tagged `T` are discarded at that stage's dequeue.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::message::{ControlKind, ControlSignal, Envelope, Payload, TurnId};
use crate::time::Nanos;

pub const DEFAULT_DATA_CAPACITY: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Topic {
    #[serde(rename = "audio.chunks")]
    AudioChunks,
    #[serde(rename = "mel.frames")]
    MelFrames,
    #[serde(rename = "asr.tokens")]
    AsrTokens,
    #[serde(rename = "llm.tokens")]
    LlmTokens,
    #[serde(rename = "tts.frames")]
    TtsFrames,
    #[serde(rename = "pcm.chunks")]
    PcmChunks,
    #[serde(rename = "control.signals")]
    ControlSignals,
    #[serde(rename = "telemetry.samples")]
    TelemetrySamples,
}

impl Topic {
    pub const ALL: [Topic; 8] = [
        Topic::AudioChunks,
        Topic::MelFrames,
        Topic::AsrTokens,
        Topic::LlmTokens,
        Topic::TtsFrames,
        Topic::PcmChunks,
        Topic::ControlSignals,
        Topic::TelemetrySamples,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Topic::AudioChunks => "audio.chunks",
            Topic::MelFrames => "mel.frames",
            Topic::AsrTokens => "asr.tokens",
            Topic::LlmTokens => "llm.tokens",
            Topic::TtsFrames => "tts.frames",
            Topic::PcmChunks => "pcm.chunks",
            Topic::ControlSignals => "control.signals",
            Topic::TelemetrySamples => "telemetry.samples",
        }
    }

    pub fn parse(s: &str) -> Option<Topic> {
        Topic::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BusError {
    UnknownTopic(Topic),
    UnknownStage(String),
    SequenceRegression {
        topic: Topic,
        producer: String,
        last: u64,
        got: u64,
    },
    SequenceGap {
        topic: Topic,
        producer: String,
        expected: u64,
        got: u64,
    },
    /// A subscriber's data lane is full; nothing was enqueued.
    WouldBlock {
        stage: String,
    },
    DuplicateSubscription {
        topic: Topic,
        stage: String,
    },
    NoActiveAgentTurn,
}

impl fmt::Display for BusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BusError::UnknownTopic(t) => write!(f, "unknown topic {t}"),
            BusError::UnknownStage(s) => write!(f, "stage {s} has no subscriptions"),
            BusError::SequenceRegression { topic, producer, last, got } => {
                write!(f, "sequence regression on {topic} from {producer}: {got} after {last}")
            }
            BusError::SequenceGap { topic, producer, expected, got } => {
                write!(f, "sequence gap on {topic} from {producer}: expected {expected}, got {got}")
            }
            BusError::WouldBlock { stage } => write!(f, "data lane of {stage} is full"),
            BusError::DuplicateSubscription { topic, stage } => write!(f, "{stage} already subscribed to {topic}"),
            BusError::NoActiveAgentTurn => f.write_str("no active agent turn to halt"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for BusError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SubscriptionId(pub usize);

#[derive(Debug)]
struct Subscription {
    stage: String,
    topic: Topic,
    capacity: usize,
    control: VecDeque<Envelope>,
    data: VecDeque<(u64, Envelope)>,
}

#[derive(Debug, Default)]
struct StageInbox {
    subs: Vec<usize>,
    halted: BTreeSet<TurnId>,
    stale_dropped: u64,
}

#[derive(Debug)]
pub struct Bus {
    capacity: usize,
    topics: BTreeMap<Topic, Vec<usize>>,
    subs: Vec<Subscription>,
    stages: BTreeMap<String, StageInbox>,
    last_seq: BTreeMap<(Topic, String), u64>,
    arrival: u64,
}

impl Default for Bus {
    fn default() -> Self {
        Self::new(DEFAULT_DATA_CAPACITY)
    }
}

impl Bus {
    /// Creates a bus with the given data-lane capacity and no topics.
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            topics: BTreeMap::new(),
            subs: Vec::new(),
            stages: BTreeMap::new(),
            last_seq: BTreeMap::new(),
            arrival: 0,
        }
    }

    /// Bus with all pipeline topics registered.
    pub fn with_pipeline_topics(capacity: usize) -> Self {
        let mut bus = Self::new(capacity);
        for t in Topic::ALL {
            bus.register_topic(t);
        }
        bus
    }

    pub fn register_topic(&mut self, topic: Topic) {
        self.topics.entry(topic).or_default();
    }

    pub fn has_topic(&self, topic: Topic) -> bool {
        self.topics.contains_key(&topic)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn subscribe(&mut self, topic: Topic, stage: &str) -> Result<SubscriptionId, BusError> {
        self.subscribe_with_capacity(topic, stage, self.capacity)
    }

    pub fn subscribe_with_capacity(
        &mut self,
        topic: Topic,
        stage: &str,
        capacity: usize,
    ) -> Result<SubscriptionId, BusError> {
        let subs = self.topics.get(&topic).ok_or(BusError::UnknownTopic(topic))?;
        if subs.iter().any(|&i| self.subs[i].stage == stage) {
            return Err(BusError::DuplicateSubscription { topic, stage: stage.into() });
        }
        let id = self.subs.len();
        self.subs.push(Subscription {
            stage: stage.into(),
            topic,
            capacity: capacity.max(1),
            control: VecDeque::new(),
            data: VecDeque::new(),
        });
        self.topics.get_mut(&topic).expect("checked above").push(id);
        self.stages.entry(stage.into()).or_default().subs.push(id);
        Ok(SubscriptionId(id))
    }

    /// Stages subscribed to `topic`, in subscription order.
    pub fn subscribers(&self, topic: Topic) -> Vec<&str> {
        self.topics.get(&topic).map(|v| v.iter().map(|&i| self.subs[i].stage.as_str()).collect()).unwrap_or_default()
    }

    /// Next sequence number `producer` must use on `topic`.
    pub fn next_seq(&self, topic: Topic, producer: &str) -> u64 {
        self.last_seq.get(&(topic, producer.to_string())).map_or(0, |s| s + 1)
    }

    /// Whether a data publish on `topic` from `producer` would currently block.
    pub fn would_block(&self, topic: Topic, producer: &str) -> bool {
        self.topics.get(&topic).is_some_and(|subs| {
            subs.iter().any(|&i| {
                let s = &self.subs[i];
                s.stage != producer && s.data.len() >= s.capacity
            })
        })
    }

    /// Enqueues `env` for every subscriber of its topic except the producer.
    /// Returns the number of subscriber queues reached.
    pub fn publish(&mut self, env: Envelope) -> Result<usize, BusError> {
        let topic = env.topic;
        let subs = self.topics.get(&topic).ok_or(BusError::UnknownTopic(topic))?;
        let key = (topic, env.producer.clone());
        match self.last_seq.get(&key) {
            Some(&last) if env.seq <= last => {
                return Err(BusError::SequenceRegression { topic, producer: env.producer, last, got: env.seq });
            }
            Some(&last) if env.seq != last + 1 => {
                return Err(BusError::SequenceGap { topic, producer: env.producer, expected: last + 1, got: env.seq });
            }
            _ => {}
        }
        let targets: Vec<usize> = subs.iter().copied().filter(|&i| self.subs[i].stage != env.producer).collect();
        let control = env.is_control();
        if !control {
            if let Some(&full) = targets.iter().find(|&&i| self.subs[i].data.len() >= self.subs[i].capacity) {
                return Err(BusError::WouldBlock { stage: self.subs[full].stage.clone() });
            }
        }
        self.last_seq.insert(key, env.seq);
        for &i in &targets {
            self.arrival += 1;
            let sub = &mut self.subs[i];
            if control {
                sub.control.push_back(env.clone());
            } else {
                sub.data.push_back((self.arrival, env.clone()));
            }
        }
        Ok(targets.len())
    }

    /// Publishes a Halt for the active agent turn on the control topic.
    /// Returns the stages reached.
    pub fn broadcast_halt(
        &mut self,
        origin: &str,
        turn_id: TurnId,
        active_agent_turn: Option<TurnId>,
        now: Nanos,
    ) -> Result<Vec<String>, BusError> {
        if active_agent_turn != Some(turn_id) {
            return Err(BusError::NoActiveAgentTurn);
        }
        let topic = Topic::ControlSignals;
        let seq = self.next_seq(topic, origin);
        let env =
            Envelope::new(topic, origin, seq, now, turn_id, Payload::Control(ControlSignal::halt(origin, turn_id)));
        self.publish(env)?;
        Ok(self.subscribers(topic).into_iter().filter(|s| *s != origin).map(String::from).collect())
    }

    /// Dequeues the next envelope for `stage`: control lanes first, then the
    /// oldest data envelope across the stage's subscriptions. Data of halted
    /// turns is discarded here.
    pub fn recv(&mut self, stage: &str) -> Option<Envelope> {
        let inbox = self.stages.get_mut(stage)?;
        for &i in &inbox.subs {
            if let Some(env) = self.subs[i].control.pop_front() {
                if let Some(c) = env.control() {
                    if c.kind == ControlKind::Halt {
                        inbox.halted.insert(c.turn_id);
                    }
                }
                return Some(env);
            }
        }
        loop {
            let best =
                inbox.subs.iter().copied().filter_map(|i| self.subs[i].data.front().map(|(a, _)| (*a, i))).min()?;
            let (_, env) = self.subs[best.1].data.pop_front().expect("front exists");
            if inbox.halted.contains(&env.turn_id) {
                inbox.stale_dropped += 1;
                continue;
            }
            return Some(env);
        }
    }

    /// Envelopes waiting for `stage` (both lanes, before stale filtering).
    pub fn pending(&self, stage: &str) -> usize {
        self.stages
            .get(stage)
            .map(|inbox| inbox.subs.iter().map(|&i| self.subs[i].control.len() + self.subs[i].data.len()).sum())
            .unwrap_or(0)
    }

    pub fn queue_len(&self, id: SubscriptionId) -> usize {
        let s = &self.subs[id.0];
        s.control.len() + s.data.len()
    }

    pub fn subscription_topic(&self, id: SubscriptionId) -> Topic {
        self.subs[id.0].topic
    }

    /// Data envelopes discarded at `stage` because their turn was halted.
    pub fn stale_dropped(&self, stage: &str) -> u64 {
        self.stages.get(stage).map_or(0, |s| s.stale_dropped)
    }

    pub fn is_halted(&self, stage: &str, turn: TurnId) -> bool {
        self.stages.get(stage).is_some_and(|s| s.halted.contains(&turn))
    }
}
