use cascade_core::message::TokenEvent;
use cascade_core::{Bus, BusError, ControlSignal, Envelope, Payload, Topic, TurnId};
use proptest::prelude::*;

fn token(turn: TurnId, text: &str) -> Payload {
    Payload::Token(TokenEvent { text: text.into(), frame_index: 0, emitted_at: 0, is_blank: false, turn_id: turn })
}

fn publish(bus: &mut Bus, topic: Topic, producer: &str, turn: TurnId, payload: Payload) -> Result<usize, BusError> {
    let seq = bus.next_seq(topic, producer);
    bus.publish(Envelope::new(topic, producer, seq, 0, turn, payload))
}

#[derive(Debug, Clone)]
enum Op {
    Data { producer: u8, topic: bool },
    Control,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => (0u8..2, any::<bool>()).prop_map(|(producer, topic)| Op::Data { producer, topic }),
        1 => Just(Op::Control),
    ]
}

proptest! {
    #[test]
    fn control_overtakes_data_and_each_lane_stays_fifo(ops in prop::collection::vec(op(), 1..80)) {
        let mut bus = Bus::with_pipeline_topics(1024);
        for t in [Topic::AsrTokens, Topic::LlmTokens, Topic::ControlSignals] {
            bus.subscribe(t, "sink").unwrap();
        }
        let mut sent_data = Vec::new();
        let mut sent_control = Vec::new();
        for (i, o) in ops.iter().enumerate() {
            match o {
                Op::Data { producer, topic } => {
                    let topic = if *topic { Topic::AsrTokens } else { Topic::LlmTokens };
                    let name = format!("p{producer}");
                    publish(&mut bus, topic, &name, 1, token(1, &i.to_string())).unwrap();
                    sent_data.push((topic, i.to_string()));
                }
                Op::Control => {
                    publish(&mut bus, Topic::ControlSignals, "ctl", 2, Payload::Control(ControlSignal::turn_boundary("ctl", 2))).unwrap();
                    sent_control.push(i);
                }
            }
        }
        let mut got = Vec::new();
        while let Some(env) = bus.recv("sink") {
            got.push(env);
        }
        prop_assert_eq!(got.len(), sent_data.len() + sent_control.len());
        let (control, data) = got.split_at(sent_control.len());
        prop_assert!(control.iter().all(Envelope::is_control));
        let seqs: Vec<u64> = control.iter().map(|e| e.seq).collect();
        prop_assert_eq!(seqs, (0..sent_control.len() as u64).collect::<Vec<_>>());
        for topic in [Topic::AsrTokens, Topic::LlmTokens] {
            let want: Vec<&String> = sent_data.iter().filter(|(t, _)| *t == topic).map(|(_, s)| s).collect();
            let have: Vec<String> = data
                .iter()
                .filter(|e| e.topic == topic)
                .map(|e| match &e.payload { Payload::Token(t) => t.text.clone(), _ => unreachable!() })
                .collect();
            prop_assert_eq!(have.iter().collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn full_lane_refuses_without_dropping(cap in 1usize..8, n in 1usize..30, drain_every in 1usize..5) {
        let mut bus = Bus::with_pipeline_topics(cap);
        bus.subscribe(Topic::AsrTokens, "sink").unwrap();
        let mut accepted = 0usize;
        let mut received = 0usize;
        for i in 0..n {
            // a refused publish must leave both the queue and the sequence untouched
            let before = bus.pending("sink");
            let seq = bus.next_seq(Topic::AsrTokens, "src");
            match publish(&mut bus, Topic::AsrTokens, "src", 1, token(1, "w")) {
                Ok(_) => accepted += 1,
                Err(BusError::WouldBlock { .. }) => {
                    prop_assert_eq!(bus.pending("sink"), before);
                    prop_assert_eq!(bus.next_seq(Topic::AsrTokens, "src"), seq);
                    prop_assert_eq!(before, cap);
                }
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
            if i % drain_every == 0 && bus.recv("sink").is_some() {
                received += 1;
            }
        }
        while bus.recv("sink").is_some() {
            received += 1;
        }
        prop_assert_eq!(accepted, received);
    }

    #[test]
    fn nothing_of_a_halted_turn_follows_its_halt(
        turns in prop::collection::vec(2u32..5, 1..60),
        halt_at in 0usize..60,
        halted in 2u32..5,
        recv_every in 1usize..6,
    ) {
        let mut bus = Bus::with_pipeline_topics(1024);
        bus.subscribe(Topic::LlmTokens, "sink").unwrap();
        bus.subscribe(Topic::ControlSignals, "sink").unwrap();
        let mut seen_halt = false;
        let check = |bus: &mut Bus, seen_halt: &mut bool| -> Result<(), TestCaseError> {
            while let Some(env) = bus.recv("sink") {
                if env.is_control() {
                    *seen_halt = true;
                } else {
                    prop_assert!(!(*seen_halt && env.turn_id == halted));
                }
            }
            Ok(())
        };
        for (i, t) in turns.iter().enumerate() {
            if i == halt_at.min(turns.len() - 1) {
                publish(&mut bus, Topic::ControlSignals, "asr", halted, Payload::Control(ControlSignal::halt("asr", halted))).unwrap();
            }
            publish(&mut bus, Topic::LlmTokens, "dialog", *t, token(*t, "x")).unwrap();
            if i % recv_every == 0 {
                check(&mut bus, &mut seen_halt)?;
            }
        }
        check(&mut bus, &mut seen_halt)?;
        prop_assert!(seen_halt);
    }

    #[test]
    fn sequences_must_advance_by_one(skip in 2u64..10) {
        let mut bus = Bus::with_pipeline_topics(16);
        bus.subscribe(Topic::AsrTokens, "sink").unwrap();
        publish(&mut bus, Topic::AsrTokens, "src", 1, token(1, "a")).unwrap();
        let gap = bus.publish(Envelope::new(Topic::AsrTokens, "src", skip, 0, 1, token(1, "b")));
        let gap_is_rejected = matches!(gap, Err(BusError::SequenceGap { .. }));
        prop_assert!(gap_is_rejected);
        let again = bus.publish(Envelope::new(Topic::AsrTokens, "src", 0, 0, 1, token(1, "c")));
        let regression_is_rejected = matches!(again, Err(BusError::SequenceRegression { .. }));
        prop_assert!(regression_is_rejected);
    }
}

#[test]
fn producer_does_not_hear_itself() {
    let mut bus = Bus::with_pipeline_topics(4);
    bus.subscribe(Topic::ControlSignals, "asr").unwrap();
    bus.subscribe(Topic::ControlSignals, "player").unwrap();
    let reached =
        publish(&mut bus, Topic::ControlSignals, "asr", 2, Payload::Control(ControlSignal::halt("asr", 2))).unwrap();
    assert_eq!(reached, 1);
    assert!(bus.recv("asr").is_none());
    assert!(bus.recv("player").is_some());
}

#[test]
fn halt_needs_the_active_turn() {
    let mut bus = Bus::with_pipeline_topics(4);
    bus.subscribe(Topic::ControlSignals, "tts").unwrap();
    assert_eq!(bus.broadcast_halt("asr", 2, None, 0), Err(BusError::NoActiveAgentTurn));
    assert_eq!(bus.broadcast_halt("asr", 2, Some(4), 0), Err(BusError::NoActiveAgentTurn));
    assert_eq!(bus.broadcast_halt("asr", 2, Some(2), 0).unwrap(), vec!["tts".to_string()]);
}
