use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::message::TurnId;
use crate::time::Nanos;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEvent {
    pub time: Nanos,
    pub stage: String,
    pub kind: String,
    pub turn_id: TurnId,
    pub seq: u64,
}

/// Ordered record of everything that happened in a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventLog {
    pub events: Vec<LogEvent>,
}

impl EventLog {
    pub fn push(&mut self, time: Nanos, stage: &str, kind: &str, turn_id: TurnId, seq: u64) {
        debug_assert!(self.events.last().is_none_or(|e| e.time <= time), "log must stay time-ordered");
        self.events.push(LogEvent { time, stage: stage.into(), kind: kind.into(), turn_id, seq });
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &LogEvent> {
        self.events.iter()
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a LogEvent> + 'a {
        self.events.iter().filter(move |e| e.kind == kind)
    }

    pub fn first(&self, stage: &str, kind: &str) -> Option<&LogEvent> {
        self.events.iter().find(|e| e.stage == stage && e.kind == kind)
    }

    /// One line per event: `time stage kind turn seq`.
    pub fn serialize(&self) -> String {
        let mut out = String::with_capacity(self.events.len() * 40);
        for e in &self.events {
            let _ = writeln!(out, "{} {} {} {} {}", e.time, e.stage, e.kind, e.turn_id, e.seq);
        }
        out
    }

    pub fn parse(text: &str) -> Option<EventLog> {
        let mut events = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut it = line.split_whitespace();
            events.push(LogEvent {
                time: it.next()?.parse().ok()?,
                stage: it.next()?.into(),
                kind: it.next()?.into(),
                turn_id: it.next()?.parse().ok()?,
                seq: it.next()?.parse().ok()?,
            });
        }
        Some(EventLog { events })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogDiff {
    pub index: usize,
    pub left: Option<LogEvent>,
    pub right: Option<LogEvent>,
}

impl LogDiff {
    pub fn describe(&self) -> String {
        let show = |e: &Option<LogEvent>| match e {
            Some(e) => format!("{} {} {} turn={} seq={}", e.time, e.stage, e.kind, e.turn_id, e.seq),
            None => "<missing>".into(),
        };
        format!("#{}: {} | {}", self.index, show(&self.left), show(&self.right))
    }
}

/// Positional structural diff. Empty means the logs are identical.
pub fn diff_logs(a: &EventLog, b: &EventLog) -> Vec<LogDiff> {
    let n = a.events.len().max(b.events.len());
    (0..n)
        .filter_map(|i| {
            let (l, r) = (a.events.get(i), b.events.get(i));
            (l != r).then(|| LogDiff { index: i, left: l.cloned(), right: r.cloned() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialize_round_trip_and_self_diff() {
        let mut log = EventLog::default();
        log.push(0, "runtime", "run.start", 0, 0);
        log.push(10, "mic", "audio.chunk", 0, 0);
        let parsed = EventLog::parse(&log.serialize()).unwrap();
        assert_eq!(parsed, log);
        assert!(diff_logs(&log, &log).is_empty());

        let mut other = log.clone();
        other.push(20, "mel", "mel.frame", 0, 0);
        let d = diff_logs(&log, &other);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].index, 2);
        assert!(d[0].left.is_none());
    }
}
