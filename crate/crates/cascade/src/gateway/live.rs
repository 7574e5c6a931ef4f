//! A script that grows while the session runs. Client words are placed on the
//! session clock slightly ahead of capture so no audio chunk has passed them.

use std::collections::VecDeque;
use std::sync::RwLock;

use cascade_core::message::StateBlock;
use cascade_core::script::{AgentScript, ScriptWord};
use cascade_core::time::{ms, Nanos};
use cascade_core::Script;

/// Length of a word whose client gave no duration.
pub const DEFAULT_WORD_MS: u64 = 250;
/// Minimum silence kept between consecutive words.
pub const MIN_GAP_MS: u64 = 10;

pub const SPEAKER: &str = "user";

#[derive(Default)]
struct World {
    words: Vec<ScriptWord>,
    replies: VecDeque<(usize, AgentScript)>,
    next_free: usize,
    /// Agent turns that already asked for their reply.
    answered: usize,
}

#[derive(Default)]
pub struct LiveScript {
    world: RwLock<World>,
}

/// One word as sent by a client: its text and the client clock, in
/// milliseconds, at which it started.
#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct ClientWord {
    pub text: String,
    #[serde(default)]
    pub at_ms: Option<u64>,
    #[serde(default)]
    pub duration_ms: Option<u64>,
}

pub fn default_reply() -> AgentScript {
    AgentScript {
        state: Some(StateBlock {
            user_motivation: "share".into(),
            user_emotion: "neutral".into(),
            agent_motivation: "listen".into(),
            agent_emotion: "calm".into(),
        }),
        response: "Got it. Tell me a little more about that.".into(),
        ..Default::default()
    }
}

impl LiveScript {
    pub fn new() -> Self {
        Self::default()
    }

    /// Places `words` starting no earlier than `at`, keeping the client's gaps
    /// between them, and returns the placed words.
    pub fn append(&self, at: Nanos, words: &[ClientWord]) -> Vec<ScriptWord> {
        let mut w = self.world.write().unwrap_or_else(|p| p.into_inner());
        let mut start = at.max(w.words.last().map_or(0, |l| l.end + ms(MIN_GAP_MS)));
        let base_client = words.first().and_then(|x| x.at_ms);
        let first_start = start;
        let mut placed = Vec::with_capacity(words.len());
        for (i, cw) in words.iter().enumerate() {
            if let (Some(b), Some(a)) = (base_client, cw.at_ms) {
                start = start.max(first_start + ms(a.saturating_sub(b)));
            }
            let next_gap = match (cw.at_ms, words.get(i + 1).and_then(|n| n.at_ms)) {
                (Some(a), Some(n)) => Some(n.saturating_sub(a).saturating_sub(MIN_GAP_MS)),
                _ => None,
            };
            let len =
                cw.duration_ms.or(next_gap.map(|g| g.min(DEFAULT_WORD_MS))).unwrap_or(DEFAULT_WORD_MS).max(MIN_GAP_MS);
            let word = ScriptWord { text: cw.text.clone(), start, end: start + ms(len), speaker: SPEAKER.into() };
            start = word.end + ms(MIN_GAP_MS);
            placed.push(word.clone());
            w.words.push(word);
        }
        placed
    }

    /// Queues the reply for the next agent turn that has not started and has
    /// none queued yet.
    pub fn queue_reply(&self, reply: AgentScript) {
        let mut w = self.world.write().unwrap_or_else(|p| p.into_inner());
        let ordinal = w.next_free.max(w.answered);
        w.next_free = ordinal + 1;
        w.replies.push_back((ordinal, reply));
    }

    pub fn words(&self) -> Vec<ScriptWord> {
        self.world.read().unwrap_or_else(|p| p.into_inner()).words.clone()
    }

    fn select(&self, keep: impl Fn(&ScriptWord) -> bool) -> Vec<ScriptWord> {
        self.world.read().unwrap_or_else(|p| p.into_inner()).words.iter().filter(|w| keep(w)).cloned().collect()
    }
}

impl Script for LiveScript {
    fn words_ending_in(&self, from: Nanos, to: Nanos) -> Vec<ScriptWord> {
        self.select(|w| w.end >= from && w.end < to)
    }

    fn words_overlapping(&self, from: Nanos, to: Nanos) -> Vec<ScriptWord> {
        self.select(|w| w.start < to && w.end > from)
    }

    fn majority_speaker(&self, from: Nanos, to: Nanos) -> Option<String> {
        self.is_speech(from, to).then(|| SPEAKER.to_string())
    }

    fn speaker_index(&self, _label: &str) -> usize {
        0
    }

    fn agent_reply(&self, ordinal: usize) -> AgentScript {
        let mut w = self.world.write().unwrap_or_else(|p| p.into_inner());
        w.answered = w.answered.max(ordinal + 1);
        w.replies.iter().find(|(o, _)| *o == ordinal).map_or_else(default_reply, |(_, r)| r.clone())
    }

    fn audio_end(&self) -> Option<Nanos> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word(text: &str, at_ms: Option<u64>) -> ClientWord {
        ClientWord { text: text.into(), at_ms, duration_ms: None }
    }

    #[test]
    fn client_gaps_survive_placement() {
        let s = LiveScript::new();
        let placed = s.append(ms(1000), &[word("hello", Some(5000)), word("there", Some(5600))]);
        assert_eq!(placed[0].start, ms(1000));
        assert_eq!(placed[0].end, ms(1250));
        assert_eq!(placed[1].start, ms(1600));
    }

    #[test]
    fn fast_typing_shortens_words_instead_of_overlapping() {
        let s = LiveScript::new();
        let placed = s.append(0, &[word("a", Some(0)), word("b", Some(100))]);
        assert_eq!(placed[0].end, ms(90));
        assert!(placed[1].start >= placed[0].end + ms(MIN_GAP_MS));
    }

    #[test]
    fn later_batches_never_overlap_earlier_ones() {
        let s = LiveScript::new();
        s.append(ms(100), &[word("one", None)]);
        let second = s.append(ms(120), &[word("two", None)]);
        assert_eq!(second[0].start, ms(360));
    }

    #[test]
    fn replies_fall_back_to_the_default() {
        let s = LiveScript::new();
        s.queue_reply(AgentScript { response: "first".into(), ..Default::default() });
        assert_eq!(s.agent_reply(0).response, "first");
        assert_eq!(s.agent_reply(1), default_reply());
        // turn 2 has started, so a new reply goes to turn 3
        s.queue_reply(AgentScript { response: "third".into(), ..Default::default() });
        assert_eq!(s.agent_reply(2).response, "third");
    }
}
