mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use common::*;
use proptest::prelude::*;
use taps_core::{ConnectionState, Event, EventKind, ProtocolId, SelectionProperty, TransportProperties};

#[derive(Debug, Clone, Copy)]
enum Step {
    Receive,
    Arrive,
}

fn step() -> impl Strategy<Value = Step> {
    prop_oneof![Just(Step::Receive), Just(Step::Arrive)]
}

fn run(steps: &[Step], protocol: ProtocolId) -> Result<(), TestCaseError> {
    let s = sim(&[protocol], &[protocol]);
    let mut tp = TransportProperties::new();
    tp.ignore(SelectionProperty::PreserveOrder);
    let (_l, accepted) = listen(&s.server, tp.clone());
    let client = initiate(&s.client, tp);
    s.settle();
    prop_assert_eq!(client.state(), ConnectionState::Established);
    let server = accepted.lock().unwrap()[0].clone();

    let calls = Arc::new(AtomicUsize::new(0));
    let received = Arc::new(AtomicUsize::new(0));
    let mut arrived = 0usize;
    let mut seq = 0u32;
    for st in steps {
        match st {
            Step::Receive => {
                calls.fetch_add(1, Ordering::SeqCst);
                let (calls, received) = (calls.clone(), received.clone());
                server
                    .receive(move |_, _| {
                        let n = received.fetch_add(1, Ordering::SeqCst) + 1;
                        assert!(
                            n <= calls.load(Ordering::SeqCst),
                            "more Received events than receive calls"
                        );
                    })
                    .unwrap();
            }
            Step::Arrive => {
                seq += 1;
                client.send(seq.to_be_bytes()).unwrap();
                arrived += 1;
            }
        }
        s.settle();
        let calls = calls.load(Ordering::SeqCst);
        let got = received.load(Ordering::SeqCst);
        prop_assert_eq!(got, calls.min(arrived));
        prop_assert_eq!(server.pending_receives(), calls - got);
        prop_assert_eq!(server.buffered_messages(), arrived - got);
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn received_events_match_receive_calls(steps in proptest::collection::vec(step(), 0..12)) {
        run(&steps, ProtocolId::SimMsg)?;
    }
}

#[test]
fn byte_stream_without_framer_delivers_chunks_one_to_one() {
    let steps = [
        Step::Receive,
        Step::Receive,
        Step::Arrive,
        Step::Arrive,
        Step::Arrive,
        Step::Receive,
    ];
    run(&steps, ProtocolId::SimStream).unwrap();
}

#[test]
fn two_calls_three_messages() {
    let s = sim(&[ProtocolId::SimMsg], &[ProtocolId::SimMsg]);
    let mut tp = TransportProperties::new();
    tp.ignore(SelectionProperty::PreserveOrder);
    let (_l, accepted) = listen(&s.server, tp.clone());
    let client = initiate(&s.client, tp);
    s.settle();
    let server = accepted.lock().unwrap()[0].clone();
    let got = Arc::new(AtomicUsize::new(0));
    for _ in 0..2 {
        let got = got.clone();
        server
            .receive(move |_, _| {
                got.fetch_add(1, Ordering::SeqCst);
            })
            .unwrap();
    }
    for m in [b"a", b"b", b"c"] {
        client.send(m).unwrap();
    }
    s.settle();
    assert_eq!(got.load(Ordering::SeqCst), 2);
    assert_eq!(server.buffered_messages(), 1);
    let received = events(&s.server, server.id())
        .iter()
        .filter(|e| e.kind() == EventKind::Received)
        .count();
    assert_eq!(received, 2);
    assert!(events(&s.server, server.id()).contains(&Event::Received { len: 1 }));
}

#[test]
fn receive_on_closed_connection_is_rejected() {
    let s = sim(&[ProtocolId::SimStream], &[ProtocolId::SimStream]);
    let (_l, _accepted) = listen(&s.server, TransportProperties::new());
    let client = initiate(&s.client, TransportProperties::new());
    s.settle();
    client.abort();
    assert!(matches!(
        client.receive(|_, _| {}),
        Err(taps_core::Error::NotEstablished)
    ));
}
