//! Codec properties: every message round-trips, and no input makes
//! decoding panic.

use edgekv::ring::Identifier;
use edgekv::wire::*;
use proptest::collection::vec;
use proptest::option;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bytes() -> impl Strategy<Value = Vec<u8>> {
    vec(any::<u8>(), 0..24)
}

fn name() -> impl Strategy<Value = String> {
    "[a-z0-9:.#-]{1,12}"
}

fn scope() -> impl Strategy<Value = Scope> {
    prop_oneof![Just(Scope::Local), Just(Scope::Global)]
}

fn mode() -> impl Strategy<Value = ReadMode> {
    prop_oneof![Just(ReadMode::Linearizable), Just(ReadMode::Serializable)]
}

fn rid() -> impl Strategy<Value = RequestId> {
    (any::<u64>(), any::<u64>()).prop_map(|(client, seq)| RequestId { client, seq })
}

fn status() -> impl Strategy<Value = Status> {
    prop_oneof![
        Just(Status::Ok),
        Just(Status::NotFound),
        Just(Status::Redirect),
        Just(Status::Unavailable),
        Just(Status::Timeout),
        Just(Status::InvalidArgument),
        Just(Status::GatewayUnavailable),
        Just(Status::GlobalUnavailable),
        Just(Status::GroupUnavailable),
        Just(Status::NotOwner),
        Just(Status::LookupFailed),
    ]
}

fn ident() -> impl Strategy<Value = Identifier> {
    any::<u64>().prop_map(Identifier)
}

fn node_ref() -> impl Strategy<Value = NodeRef> {
    (ident(), name(), ident()).prop_map(|(id, address, physical_id)| NodeRef { id, address, physical_id })
}

fn member() -> impl Strategy<Value = Member> {
    (name(), name()).prop_map(|(id, address)| Member { id, address })
}

fn command() -> impl Strategy<Value = Command> {
    prop_oneof![
        (scope(), bytes(), bytes(), rid()).prop_map(|(s, k, v, r)| Command::put(s, k, v, r)),
        (scope(), bytes(), rid()).prop_map(|(s, k, r)| Command::delete(s, k, r)),
    ]
}

fn entry() -> impl Strategy<Value = LogEntry> {
    let payload = prop_oneof![
        Just(EntryPayload::Noop),
        command().prop_map(EntryPayload::Command),
        vec(member(), 0..3).prop_map(|members| EntryPayload::SetLearners { members }),
    ];
    (any::<u64>(), any::<u64>(), payload).prop_map(|(term, index, payload)| LogEntry { term, index, payload })
}

fn message() -> impl Strategy<Value = Message> {
    let client = prop_oneof![
        (scope(), bytes(), mode()).prop_map(|(scope, key, mode)| Message::from(ClientGet { scope, key, mode })),
        (scope(), bytes(), bytes(), rid())
            .prop_map(|(scope, key, value, request_id)| ClientPut { scope, key, value, request_id }.into()),
        (scope(), bytes(), rid()).prop_map(|(scope, key, request_id)| ClientDelete { scope, key, request_id }.into()),
        (status(), option::of(bytes()), any::<u64>(), option::of(any::<u64>()), option::of(name())).prop_map(
            |(status, value, elapsed_us, retry_after_ms, message)| {
                ClientResponse { status, value, elapsed_us, retry_after_ms, message }.into()
            }
        ),
    ];
    let raft = prop_oneof![
        (name(), any::<u64>(), name(), any::<u64>(), any::<u64>()).prop_map(|(group, term, candidate, i, t)| {
            RequestVote { group, term, candidate, last_log_index: i, last_log_term: t }.into()
        }),
        (name(), any::<u64>(), name(), any::<bool>())
            .prop_map(|(group, term, voter, granted)| RequestVoteResp { group, term, voter, granted }.into()),
        (name(), any::<u64>(), name(), any::<(u64, u64, u64)>(), vec(entry(), 0..4), option::of(any::<u64>())).prop_map(
            |(group, term, leader, (pi, pt, c), entries, read_ctx)| {
                AppendEntries { group, term, leader, prev_log_index: pi, prev_log_term: pt, entries, leader_commit: c, read_ctx }
                    .into()
            }
        ),
        (name(), any::<u64>(), name(), any::<bool>(), any::<(u64, u64)>(), option::of(any::<u64>())).prop_map(
            |(group, term, from, success, (m, l), read_ctx)| {
                AppendEntriesResp { group, term, from, success, match_index: m, last_log_index: l, read_ctx }.into()
            }
        ),
    ];
    let chord = prop_oneof![
        (ident(), ident(), node_ref(), any::<u32>())
            .prop_map(|(target, id, origin, hops)| FindSuccessor { target, id, origin, hops }.into()),
        (ident(), ident(), node_ref(), any::<u32>())
            .prop_map(|(target, id, successor, hops)| FindSuccessorResp { target, id, successor, hops }.into()),
        ident().prop_map(|target| GetPredecessor { target }.into()),
        (node_ref(), option::of(node_ref()), vec(node_ref(), 0..3))
            .prop_map(|(from, predecessor, successors)| GetPredecessorResp { from, predecessor, successors }.into()),
        (ident(), node_ref()).prop_map(|(target, candidate)| Notify { target, candidate }.into()),
        option::of(ident()).prop_map(|target| Ping { target }.into()),
        (option::of(node_ref()), option::of((name(), vec(member(), 0..3)))).prop_map(|(from, group)| {
            Pong { from, group: group.map(|(group, members)| GroupInfo { group, members }) }.into()
        }),
    ];
    let proposal = prop_oneof![
        command().prop_map(Proposal::Command),
        vec(member(), 0..3).prop_map(|members| Proposal::SetLearners { members }),
    ];
    let global = prop_oneof![
        (bytes(), bytes(), rid()).prop_map(|(key, value, request_id)| GlobalPut { key, value, request_id }.into()),
        (bytes(), mode(), option::of(name())).prop_map(|(key, mode, backup_of)| GlobalGet { key, mode, backup_of }.into()),
        (bytes(), rid()).prop_map(|(key, request_id)| GlobalDelete { key, request_id }.into()),
        (status(), option::of(bytes()), option::of(name()), any::<bool>(), any::<u32>()).prop_map(
            |(status, value, served_by, from_backup, hops)| {
                GlobalResponse { status, value, served_by, from_backup, hops }.into()
            }
        ),
        (name(), proposal).prop_map(|(group, proposal)| GroupPropose { group, proposal }.into()),
        (name(), scope(), bytes(), mode()).prop_map(|(group, scope, key, mode)| GroupRead { group, scope, key, mode }.into()),
        (status(), option::of(bytes()), option::of(name()))
            .prop_map(|(status, value, leader_hint)| GroupResponse { status, value, leader_hint }.into()),
    ];
    prop_oneof![client, raft, chord, global]
}

fn envelope() -> impl Strategy<Value = Envelope> {
    (any::<u64>(), message(), option::of(name())).prop_map(|(id, m, reply_to)| Envelope { id, message: m, reply_to })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn every_envelope_round_trips(env in envelope()) {
        let frame = encode(&env).unwrap();
        prop_assert_eq!(
            decode(&frame).unwrap(),
            Decoded::Frame { envelope: env.clone(), consumed: frame.len() }
        );
        // Encoding is a function of the value alone.
        prop_assert_eq!(encode(&env).unwrap(), frame);
    }

    #[test]
    fn back_to_back_frames_split_anywhere(a in envelope(), b in envelope(), cut in any::<prop::sample::Index>()) {
        let mut stream = encode(&a).unwrap();
        let first = stream.len();
        stream.extend(encode(&b).unwrap());
        let cut = cut.index(stream.len());
        if cut < first {
            prop_assert_eq!(decode(&stream[..cut]).unwrap(), Decoded::Incomplete);
        }
        match decode(&stream).unwrap() {
            Decoded::Frame { envelope, consumed } => {
                prop_assert_eq!(envelope, a);
                prop_assert_eq!(consumed, first);
                prop_assert_eq!(
                    decode(&stream[consumed..]).unwrap(),
                    Decoded::Frame { envelope: b, consumed: stream.len() - first }
                );
            }
            Decoded::Incomplete => prop_assert!(false, "whole frame reported incomplete"),
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(buf in vec(any::<u8>(), 0..256)) {
        let _ = decode(&buf);
        let _ = decode_payload(&buf);
    }
}

/// Random and mutated frames; decoding may fail but must return.
#[test]
fn hundred_thousand_hostile_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let seeds: Vec<Vec<u8>> = [
        Envelope::new(1, Ping { target: None }),
        Envelope::new(
            2,
            ClientPut { scope: Scope::Global, key: b"k".to_vec(), value: b"v".to_vec(), request_id: RequestId { client: 1, seq: 1 } },
        ),
        Envelope::new(
            3,
            GroupPropose { group: "g1".into(), proposal: Proposal::SetLearners { members: vec![Member::new("a", "b")] } },
        ),
    ]
    .iter()
    .map(|e| encode(e).unwrap())
    .collect();
    let mut decoded = 0;
    for i in 0..100_000 {
        let buf: Vec<u8> = if i % 2 == 0 {
            let n = rng.random_range(0..64usize);
            let mut b: Vec<u8> = (0..n).map(|_| rng.random()).collect();
            if n >= 4 {
                // A plausible length so the body reaches the parser.
                b[..4].copy_from_slice(&((n - 4) as u32).to_be_bytes());
            }
            b
        } else {
            let mut b = seeds[i % seeds.len()].clone();
            for _ in 0..rng.random_range(1..4) {
                let at = rng.random_range(4..b.len());
                b[at] = rng.random();
            }
            b
        };
        if let Ok(Decoded::Frame { .. }) = decode(&buf) {
            decoded += 1;
        }
    }
    // Mutations that only touch string contents still decode.
    assert!(decoded > 0);
}
