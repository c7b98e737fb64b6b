mod common;

use common::*;
use proptest::prelude::*;
use taps_core::netsim::PacketKind;
use taps_core::properties::CAPACITY_PROFILE;
use taps_core::{CapacityProfile, Connection, ConnectionState, Error, Event, ProtocolId, TransportProperties};

fn group_of(size: usize) -> (Sim, Vec<Connection>) {
    let protocols = [ProtocolId::Tcp, ProtocolId::Msgmux];
    let s = sim(&protocols, &protocols);
    let (_l, _accepted) = listen(&s.server, TransportProperties::new());
    let first = initiate(&s.client, TransportProperties::new());
    s.settle();
    assert_eq!(first.protocol(), Some(ProtocolId::Msgmux));
    let mut members = vec![first.clone()];
    for _ in 1..size {
        members.push(first.clone_connection(|_, e| panic!("clone failed: {e}")).unwrap());
    }
    s.settle();
    (s, members)
}

#[test]
fn every_property_entangled_for_group_sizes_one_to_four() {
    let keys = [CAPACITY_PROFILE, "note", "priority"];
    for size in 1..=4 {
        let (_s, members) = group_of(size);
        for m in &members {
            assert_eq!(m.group_members().len(), size);
        }
        for (w, writer) in members.iter().enumerate() {
            for key in keys {
                let values: Vec<String> = if key == CAPACITY_PROFILE {
                    CapacityProfile::ALL.iter().map(|p| p.as_str().to_owned()).collect()
                } else {
                    vec![format!("v{w}"), String::new()]
                };
                for v in values {
                    writer.set_property(key, &v).unwrap();
                    for reader in &members {
                        assert_eq!(
                            reader.get_property(key).as_deref(),
                            Some(v.as_str()),
                            "size {size} key {key}"
                        );
                    }
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn writes_through_any_member_read_back_everywhere(
        size in 1usize..=4,
        writes in proptest::collection::vec((0usize..4, "[a-z]{1,6}", "[ -~]{0,8}"), 1..8),
    ) {
        let (_s, members) = group_of(size);
        for (i, key, value) in writes {
            members[i % size].set_property(&key, &value).unwrap();
            for m in &members {
                prop_assert_eq!(m.get_property(&key), Some(value.clone()));
            }
        }
    }
}

#[test]
fn separate_connections_are_not_entangled() {
    let protocols = [ProtocolId::Tcp, ProtocolId::Msgmux];
    let s = sim(&protocols, &protocols);
    let (_l, _a) = listen(&s.server, TransportProperties::new());
    let a = initiate(&s.client, TransportProperties::new());
    let b = initiate(&s.client, TransportProperties::new());
    s.settle();
    a.set_property(CAPACITY_PROFILE, "scavenger").unwrap();
    assert_eq!(a.get_property(CAPACITY_PROFILE).as_deref(), Some("scavenger"));
    assert_eq!(b.get_property(CAPACITY_PROFILE).as_deref(), Some("default"));
    assert_ne!(a.group(), b.group());
}

#[test]
fn unknown_profile_and_closed_connection_are_rejected() {
    let (s, members) = group_of(1);
    assert!(matches!(
        members[0].set_property(CAPACITY_PROFILE, "turbo"),
        Err(Error::Config(_))
    ));
    members[0].abort();
    s.settle();
    assert_eq!(members[0].state(), ConnectionState::Closed);
    assert!(matches!(members[0].set_property("x", "y"), Err(Error::Closed)));
}

#[test]
fn capacity_profile_sets_dscp_on_later_packets() {
    let (s, members) = group_of(2);
    members[1]
        .set_property(CAPACITY_PROFILE, "lowLatencyInteractive")
        .unwrap();
    let mark = s.world.packet_log().len();
    members[0].send(b"after").unwrap();
    s.settle();
    let log = s.world.packet_log();
    let data: Vec<_> = log[mark..]
        .iter()
        .filter(|p| p.src.ip() == CLIENT && p.kind == PacketKind::Data)
        .collect();
    assert!(!data.is_empty());
    assert!(data.iter().all(|p| p.dscp == 46));
    assert!(log[..mark].iter().filter(|p| p.src.ip() == CLIENT).all(|p| p.dscp == 0));
}

#[test]
fn clone_over_msgmux_reuses_the_carrier() {
    let (s, members) = group_of(3);
    let syns = s
        .world
        .packet_log()
        .iter()
        .filter(|p| p.kind == PacketKind::Syn)
        .count();
    assert_eq!(syns, 1);
    assert!(members.iter().all(|m| m.protocol() == Some(ProtocolId::Msgmux)));
    let g = members[0].group();
    assert!(members
        .iter()
        .all(|m| m.group() == g && m.state() == ConnectionState::Established));
    for m in &members[1..] {
        assert_eq!(events(&s.client, m.id()).first(), Some(&Event::Ready));
    }
}

#[test]
fn clone_over_tcp_opens_a_second_connection() {
    let s = sim(&[ProtocolId::Tcp], &[ProtocolId::Tcp]);
    let (_l, accepted) = listen(&s.server, TransportProperties::new());
    let first = initiate(&s.client, TransportProperties::new());
    s.settle();
    let second = first.clone_connection(|_, e| panic!("clone failed: {e}")).unwrap();
    s.settle();
    assert_eq!(second.state(), ConnectionState::Established);
    assert_eq!(second.protocol(), Some(ProtocolId::Tcp));
    assert_eq!(first.group(), second.group());
    let syns = s
        .world
        .packet_log()
        .iter()
        .filter(|p| p.kind == PacketKind::Syn)
        .count();
    assert_eq!(syns, 2);
    assert_eq!(accepted.lock().unwrap().len(), 2);
}

#[test]
fn clone_of_closed_connection_reports_clone_error() {
    let (s, members) = group_of(1);
    members[0].close();
    s.settle();
    let seen = std::sync::Arc::new(std::sync::Mutex::new(None));
    let sink = seen.clone();
    let c = members[0]
        .clone_connection(move |_, cause| *sink.lock().unwrap() = Some(cause.to_owned()))
        .unwrap();
    s.settle();
    assert!(seen.lock().unwrap().is_some());
    assert_eq!(c.state(), ConnectionState::Closed);
    assert!(matches!(events(&s.client, c.id()).as_slice(), [Event::CloneError(_)]));
}
