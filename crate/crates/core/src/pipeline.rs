//! Pipeline assembly: which stages run, what stands in for the missing ones,
//! and a one-call simulated run.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::any::Any;
use core::fmt;

use crate::asr::{self, AsrStage};
use crate::audio_out::{PlaybackState, PlayerStage, VocoderStage, PLAYER_STAGE, VOCODER_STAGE};
use crate::bus::{Bus, Topic};
use crate::config::{PipelineConfig, Tunables};
use crate::dialog::{self, response_chunks, DialogCore, DialogStage};
use crate::dsp::{DspError, MelStage, MicStage};
use crate::message::{ControlSignal, Payload, TokenEvent, TurnId};
use crate::runtime::{Context, EventLog, Output, RunError, Simulator, Stage, StageSpec, Step, WaitPolicy};
use crate::script::{ScenarioTrace, Script, TraceError};
use crate::telemetry::{LatencyReport, Ledger, TelemetrySample};
use crate::time::{ms, ms_f, Nanos};
use crate::tts::{self, TtsStage, TtsState};

pub const FEED_STAGE: &str = "trace-feed";

/// Deployable subsets of the seven stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelection {
    Full,
    Asr,
    AsrLlm,
    Llm,
    TtsVocoder,
    LlmTtsVocoder,
    Vocoder,
}

impl StageSelection {
    pub const ALL: [StageSelection; 7] = [
        StageSelection::Full,
        StageSelection::Asr,
        StageSelection::AsrLlm,
        StageSelection::Llm,
        StageSelection::TtsVocoder,
        StageSelection::LlmTtsVocoder,
        StageSelection::Vocoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageSelection::Full => "full",
            StageSelection::Asr => "asr",
            StageSelection::AsrLlm => "asr+llm",
            StageSelection::Llm => "llm",
            StageSelection::TtsVocoder => "tts+vocoder",
            StageSelection::LlmTtsVocoder => "llm+tts+vocoder",
            StageSelection::Vocoder => "vocoder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s)
    }

    fn has_frontend(self) -> bool {
        matches!(self, StageSelection::Full | StageSelection::Asr | StageSelection::AsrLlm)
    }

    fn has_dialog(self) -> bool {
        matches!(
            self,
            StageSelection::Full | StageSelection::AsrLlm | StageSelection::Llm | StageSelection::LlmTtsVocoder
        )
    }

    fn has_tts(self) -> bool {
        matches!(self, StageSelection::Full | StageSelection::TtsVocoder | StageSelection::LlmTtsVocoder)
    }

    fn has_audio_out(self) -> bool {
        matches!(
            self,
            StageSelection::Full | StageSelection::TtsVocoder | StageSelection::LlmTtsVocoder | StageSelection::Vocoder
        )
    }

    /// Pipeline stages that run, in registration order.
    pub fn stages(self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if self.has_frontend() {
            v.extend([MicStage::NAME, MelStage::NAME, asr::STAGE]);
        }
        if self.has_dialog() {
            v.push(dialog::STAGE);
        }
        if self.has_tts() {
            v.push(tts::STAGE);
        }
        if self.has_audio_out() {
            v.extend([VOCODER_STAGE, PLAYER_STAGE]);
        }
        v
    }

    /// Whether a trace feed stands in for the missing upstream stages.
    pub fn needs_feed(self) -> bool {
        !self.has_frontend()
    }
}

impl fmt::Display for StageSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PipelineError {
    Trace(TraceError),
    Dsp(DspError),
    Run(RunError),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PipelineError::Trace(e) => write!(f, "trace: {e}"),
            PipelineError::Dsp(e) => write!(f, "audio: {e}"),
            PipelineError::Run(e) => write!(f, "run: {e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for PipelineError {}

impl From<TraceError> for PipelineError {
    fn from(e: TraceError) -> Self {
        PipelineError::Trace(e)
    }
}

impl From<DspError> for PipelineError {
    fn from(e: DspError) -> Self {
        PipelineError::Dsp(e)
    }
}

impl From<RunError> for PipelineError {
    fn from(e: RunError) -> Self {
        PipelineError::Run(e)
    }
}

/// Source stage replaying precomputed upstream traffic for partial pipelines.
pub struct TraceFeed {
    spec: StageSpec,
    events: Vec<(Nanos, Output)>,
    next: usize,
}

impl TraceFeed {
    pub fn new(mut events: Vec<(Nanos, Output)>) -> Self {
        events.sort_by_key(|e| e.0);
        let mut outputs: Vec<Topic> = events.iter().map(|e| e.1.topic).collect();
        outputs.sort();
        outputs.dedup();
        Self {
            spec: StageSpec {
                name: FEED_STAGE.into(),
                inputs: vec![],
                outputs,
                wait: WaitPolicy::Nothing,
                inference_ms: 0.0,
                source: true,
            },
            events,
            next: 0,
        }
    }

    /// Upstream traffic the selected subset would have received.
    pub fn for_selection(trace: &ScenarioTrace, cfg: &PipelineConfig, sel: StageSelection) -> Self {
        let mut events = Vec::new();
        let token_ns = ms_f(cfg.dialog.token_ms);
        let frame_ns = ms_f(cfg.tts.frame_ms);
        for (i, utt) in trace.user_turns.iter().enumerate() {
            let user = 2 * i as TurnId + 1;
            let agent = user + 1;
            let Some(last) = utt.words.last() else { continue };
            let tb_at = ms(last.end_ms + cfg.asr.pause_ms);
            if sel.has_dialog() {
                for w in &utt.words {
                    let tok = TokenEvent {
                        text: w.text.clone(),
                        frame_index: w.end_ms / cfg.mel.hop_ms as u64,
                        emitted_at: ms(w.end_ms),
                        is_blank: false,
                        turn_id: user,
                    };
                    events.push((ms(w.end_ms), Output::new(Topic::AsrTokens, user, Payload::Token(tok))));
                }
            }
            events.push((
                tb_at,
                Output::telemetry(TelemetrySample::LastUserWord { turn_id: agent, at: ms(last.end_ms) }, agent),
            ));
            events.push((tb_at, Output::telemetry(TelemetrySample::Boundary { turn_id: agent, at: tb_at }, agent)));
            let tb = ControlSignal::turn_boundary(asr::STAGE, agent);
            events.push((tb_at, Output::new(Topic::ControlSignals, agent, Payload::Control(tb))));
            if sel.has_dialog() {
                continue;
            }
            let reply = trace.agent_turns.get(i).cloned().unwrap_or_default();
            let chunks = response_chunks(&reply);
            if sel.has_tts() {
                let mut t = tb_at;
                for c in chunks {
                    t += token_ns * c.words.len() as Nanos;
                    events.push((t, Output::new(Topic::LlmTokens, agent, Payload::Words(c))));
                }
            } else {
                let mut st = TtsState::new(cfg.tts.clone());
                st.begin_turn(agent);
                for c in &chunks {
                    st.buffer_word(c);
                }
                let frames = st.synthesize().unwrap_or_default();
                for (j, f) in frames.into_iter().enumerate() {
                    let at = tb_at + frame_ns * (j as Nanos + 1);
                    events.push((at, Output::new(Topic::TtsFrames, agent, Payload::Speech(f))));
                }
            }
        }
        Self::new(events)
    }

    pub fn last_event(&self) -> Nanos {
        self.events.last().map_or(0, |e| e.0)
    }
}

impl Stage for TraceFeed {
    fn spec(&self) -> &StageSpec {
        &self.spec
    }

    fn poll(&mut self, cx: &mut dyn Context) -> Step {
        let Some((at, _)) = self.events.get(self.next) else { return Step::Done };
        if *at > cx.now() {
            return Step::SleepUntil(*at);
        }
        let now = cx.now();
        let mut outputs = Vec::new();
        while let Some((at, out)) = self.events.get(self.next) {
            if *at > now {
                break;
            }
            outputs.push(out.clone());
            self.next += 1;
        }
        Step::emit(outputs)
    }
}

/// Stages for `sel`, in registration order, feed first.
pub fn build_stages(
    trace: &ScenarioTrace,
    script: Arc<dyn Script>,
    cfg: &PipelineConfig,
    sel: StageSelection,
    tunables: Option<Arc<Tunables>>,
) -> Result<Vec<Box<dyn Stage>>, PipelineError> {
    let mut stages: Vec<Box<dyn Stage>> = Vec::new();
    if sel.needs_feed() {
        stages.push(Box::new(TraceFeed::for_selection(trace, cfg, sel)));
    }
    if sel.has_frontend() {
        stages.push(Box::new(MicStage::new(cfg, script.clone())?));
        stages.push(Box::new(MelStage::new(cfg)));
        let mut asr = AsrStage::new(cfg, script.clone(), sel.has_dialog());
        if let Some(t) = &tunables {
            asr = asr.with_tunables(t.clone());
        }
        stages.push(Box::new(asr));
    }
    if sel.has_dialog() {
        let mut dialog = DialogStage::new(cfg, script.clone(), sel.has_audio_out());
        if let Some(t) = &tunables {
            dialog = dialog.with_tunables(t.clone());
        }
        stages.push(Box::new(dialog));
    }
    if sel.has_tts() {
        stages.push(Box::new(TtsStage::new(cfg)));
    }
    if sel.has_audio_out() {
        stages.push(Box::new(VocoderStage::new(cfg)));
        stages.push(Box::new(PlayerStage::new(cfg)));
    }
    Ok(stages)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: EventLog,
    pub report: LatencyReport,
    pub ledger: Ledger,
    /// Played samples per agent turn at the output rate.
    pub pcm: BTreeMap<TurnId, Vec<f32>>,
    pub playback: Option<PlaybackState>,
    pub dialog: Option<DialogCore>,
    /// Data envelopes dropped at dequeue because their turn was halted.
    pub stale_dropped: BTreeMap<String, u64>,
}

fn downcast<T: 'static>(stage: Option<&dyn Stage>) -> Option<&T> {
    stage.and_then(|s| (s as &dyn Any).downcast_ref::<T>())
}

/// Simulates `trace` through the selected stages with the configured seed.
pub fn run_sim(trace: &ScenarioTrace, cfg: &PipelineConfig, sel: StageSelection) -> Result<RunOutput, PipelineError> {
    trace.validate()?;
    let script: Arc<dyn Script> = Arc::new(trace.compile(cfg.tail_ms).with_recorded_length(cfg.sample_rate));
    run_script(trace, script, cfg, sel)
}

/// Like [`run_sim`] with an explicit script for the recorded world.
pub fn run_script(
    trace: &ScenarioTrace,
    script: Arc<dyn Script>,
    cfg: &PipelineConfig,
    sel: StageSelection,
) -> Result<RunOutput, PipelineError> {
    let mut sim = Simulator::new(Bus::with_pipeline_topics(cfg.bus_capacity), trace.seed, cfg.jitter);
    let stages = build_stages(trace, script.clone(), cfg, sel, None)?;
    let names: Vec<String> = stages.iter().map(|s| s.spec().name.clone()).collect();
    for s in stages {
        sim.register_stage(s)?;
    }
    // generous horizon; the run normally ends when every stage is idle
    let horizon = script.audio_end().unwrap_or(0) + ms(600_000);
    sim.run(horizon)?;

    let artifacts = Artifacts::collect(|name| sim.stage(name));
    let stale_dropped: BTreeMap<String, u64> =
        names.iter().map(|n| (n.clone(), sim.bus().stale_dropped(n))).filter(|(_, c)| *c > 0).collect();
    let (log, ledger, _) = sim.into_parts();
    Ok(RunOutput::assemble(log, ledger, stale_dropped, artifacts))
}

/// Typed state recovered from stages after a run.
#[derive(Debug, Clone, Default)]
pub struct Artifacts {
    pub pcm: BTreeMap<TurnId, Vec<f32>>,
    pub playback: Option<PlaybackState>,
    pub dialog: Option<DialogCore>,
}

impl Artifacts {
    pub fn collect<'a>(lookup: impl Fn(&str) -> Option<&'a dyn Stage>) -> Self {
        let player = downcast::<PlayerStage>(lookup(PLAYER_STAGE));
        Self {
            pcm: player.map(|p| p.played().clone()).unwrap_or_default(),
            playback: player.map(|p| p.state().clone()),
            dialog: downcast::<DialogStage>(lookup(dialog::STAGE)).map(|d| d.core().clone()),
        }
    }
}

impl RunOutput {
    pub fn assemble(log: EventLog, ledger: Ledger, stale_dropped: BTreeMap<String, u64>, artifacts: Artifacts) -> Self {
        let mut report = ledger.render_report();
        for (stage, n) in &stale_dropped {
            *report.stale_drops.entry(stage.clone()).or_default() += n;
        }
        let Artifacts { pcm, playback, dialog } = artifacts;
        RunOutput { log, report, ledger, pcm, playback, dialog, stale_dropped }
    }
}
