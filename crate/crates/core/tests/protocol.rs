use std::io::{self, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

use homefl::client::{self, round_seed, ClientConfig, LocalData};
use homefl::data::{self, SynthSpec};
use homefl::dp::DpConfig;
use homefl::nn::{ModelParams, ParamDelta};
use homefl::seed;
use homefl::server::{self, ServerConfig};
use homefl::session::{ClientAction, ClientEvent, ClientSession, ClientState, PeerAction, PeerEvent, PeerSession, PeerState};
use homefl::train::{run_round_schedule, Optimizer, SchedulePlan};
use homefl::transport::Connection;
use homefl::wire::{self, Decoded, Kind, LocalMetrics, Message, Payload};
use proptest::prelude::*;

fn small_model(seed_v: u64, dims: &[usize]) -> ModelParams {
    ModelParams::glorot(dims, &mut seed::rng(seed_v)).quantized()
}

fn small_delta(seed_v: u64, dims: &[usize], round: u32) -> ParamDelta {
    let model = small_model(seed_v, dims);
    let mut d = ParamDelta::zeros_like(&model, round);
    for (dl, ml) in d.layers.iter_mut().zip(&model.layers) {
        dl.weights.clone_from(&ml.weights);
        dl.bias = ml.bias.iter().map(|b| b - 0.25).collect();
    }
    d
}

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::vec(1usize..6, 2..5)
}

fn id_strategy() -> impl Strategy<Value = String> {
    "[A-Za-z0-9._-]{1,64}"
}

fn payload_strategy() -> impl Strategy<Value = (u32, Payload)> {
    let round = 1u32..1000;
    prop_oneof![
        any::<bool>().prop_map(|tl| (0, Payload::Hello { tl_enabled: tl })),
        any::<u32>().prop_map(|n| (0, Payload::Welcome { total_rounds: n })),
        (round.clone(), any::<u64>(), dims_strategy(), proptest::option::of((0.0f64..5.0, 0.01f64..5.0))).prop_map(
            |(r, s, dims, dp)| {
                let model = small_model(s, &dims);
                let schedule = SchedulePlan::default().for_round(r, model.num_layers());
                let dp = dp.map(|(sigma, c)| DpConfig::new(sigma, c));
                (r, Payload::GlobalModel { model, schedule, dp })
            }
        ),
        (round.clone(), any::<u64>(), dims_strategy(), 1u64..u64::MAX, 0.0f64..100.0, 0.0f64..=1.0).prop_map(
            |(r, s, dims, n, loss, acc)| {
                (
                    r,
                    Payload::LocalUpdate {
                        delta: small_delta(s, &dims, r),
                        sample_count: n,
                        metrics: LocalMetrics { loss, accuracy: acc },
                    },
                )
            }
        ),
        (round.clone(), proptest::option::of(0.0f64..=1.0))
            .prop_map(|(r, a)| (r, Payload::RoundDone { global_accuracy: a })),
        (any::<u32>(), id_strategy(), ".{0,200}")
            .prop_map(|(r, code, detail)| (r, Payload::Error { code, detail })),
        (any::<u32>(), ".{0,200}").prop_map(|(r, reason)| (r, Payload::Bye { reason })),
    ]
}

fn message_strategy() -> impl Strategy<Value = Message> {
    (id_strategy(), payload_strategy()).prop_map(|(id, (round, payload))| Message::new(round, id, payload))
}

fn decode_one(frame: &[u8]) -> Option<Message> {
    match wire::decode(frame) {
        Ok(Decoded::Frame { message, consumed }) => {
            assert_eq!(consumed, frame.len());
            Some(message)
        }
        _ => None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1200))]

    #[test]
    fn every_generated_message_round_trips(msg in message_strategy()) {
        let frame = wire::encode(&msg).unwrap();
        prop_assert_eq!(decode_one(&frame).unwrap(), msg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn single_byte_corruption_never_goes_unnoticed(msg in message_strategy(), pos in any::<prop::sample::Index>(), mask in 1u8..=255) {
        let mut frame = wire::encode(&msg).unwrap();
        let i = 4 + pos.index(frame.len() - 4);
        frame[i] ^= mask;
        if let Some(back) = decode_one(&frame) {
            prop_assert_ne!(back, msg);
        }
    }

    #[test]
    fn truncated_frames_need_more(msg in message_strategy(), cut in any::<prop::sample::Index>()) {
        let frame = wire::encode(&msg).unwrap();
        let keep = cut.index(frame.len());
        prop_assert_eq!(wire::decode(&frame[..keep]).unwrap(), Decoded::NeedMore);
    }

    #[test]
    fn peer_rejects_future_rounds_and_ignores_past_ones(t in 2u32..500, k in 1u32..50) {
        let model = small_model(0, &[3, 2]);
        let update = |r: u32| Message::new(r, "c1", Payload::LocalUpdate {
            delta: ParamDelta::zeros_like(&model, r),
            sample_count: 1,
            metrics: LocalMetrics { loss: 0.0, accuracy: 0.0 },
        });
        let mut peer = PeerSession::new();
        peer.step(PeerEvent::Received(Message::new(0, "c1", Payload::Hello { tl_enabled: true }))).unwrap();
        peer.step(PeerEvent::Broadcast(t)).unwrap();
        let past = peer.step(PeerEvent::Received(update(t.saturating_sub(k).max(1)))).unwrap();
        prop_assert!(matches!(past.as_slice(), [PeerAction::Warn(_)]));
        prop_assert_eq!(&peer.state, &PeerState::AwaitUpdate(t));
        prop_assert!(peer.step(PeerEvent::Received(update(t + k))).is_err());
        prop_assert_eq!(&peer.state, &PeerState::Closed);
    }

    #[test]
    fn client_rejects_skipped_rounds(t in 1u32..500, k in 2u32..50) {
        let global = |r: u32| {
            let model = small_model(0, &[3, 2]);
            Message::new(r, "server", Payload::GlobalModel {
                schedule: SchedulePlan::default().for_round(r, 1),
                model,
                dp: None,
            })
        };
        let mut s = ClientSession::new();
        s.step(ClientEvent::Received(Message::new(0, "server", Payload::Welcome { total_rounds: 1000 }))).unwrap();
        s.step(ClientEvent::Received(global(t))).unwrap();
        s.step(ClientEvent::TrainingDone(t)).unwrap();
        prop_assert_eq!(s.state, ClientState::AwaitGlobal(t));
        prop_assert!(s.step(ClientEvent::Received(global(t + k))).is_err());
        prop_assert_eq!(s.state, ClientState::Closed);
    }

    #[test]
    fn sessions_never_panic_on_arbitrary_input(msgs in proptest::collection::vec(message_strategy(), 1..8), rounds in proptest::collection::vec(0u32..5, 1..8)) {
        let mut peer = PeerSession::new();
        let mut client = ClientSession::new();
        for (m, r) in msgs.into_iter().zip(rounds) {
            let p = peer.step(PeerEvent::Received(m.clone()));
            let _ = peer.step(PeerEvent::Broadcast(r));
            let c = client.step(ClientEvent::Received(m));
            let _ = client.step(ClientEvent::TrainingDone(r));
            if p.is_err() {
                prop_assert_eq!(&peer.state, &PeerState::Closed);
            }
            if c.is_err() {
                prop_assert_eq!(client.state, ClientState::Closed);
            }
        }
    }
}

#[test]
fn client_session_happy_path() {
    let model = small_model(1, &[3, 2]);
    let global = |r: u32| {
        Message::new(
            r,
            "server",
            Payload::GlobalModel {
                model: model.clone(),
                schedule: SchedulePlan::default().for_round(r, 1),
                dp: None,
            },
        )
    };
    let mut s = ClientSession::new();
    assert!(s
        .step(ClientEvent::Received(Message::new(0, "server", Payload::Welcome { total_rounds: 2 })))
        .unwrap()
        .is_empty());
    assert_eq!(s.step(ClientEvent::Received(global(1))).unwrap(), vec![ClientAction::StartTraining(1)]);
    assert_eq!(s.step(ClientEvent::TrainingDone(1)).unwrap(), vec![ClientAction::SendUpdate(1)]);
    let done = Message::new(1, "server", Payload::RoundDone { global_accuracy: Some(0.5) });
    assert_eq!(
        s.step(ClientEvent::Received(done)).unwrap(),
        vec![ClientAction::RoundFinished { round: 1, global_accuracy: Some(0.5) }]
    );
    assert_eq!(s.step(ClientEvent::Received(global(2))).unwrap(), vec![ClientAction::StartTraining(2)]);
    let bye = Message::new(2, "server", Payload::Bye { reason: "done".into() });
    assert_eq!(s.step(ClientEvent::Received(bye)).unwrap(), vec![ClientAction::Finished]);
    assert_eq!(s.state, ClientState::Closed);
}

#[test]
fn peer_rejects_impostor_and_duplicate_hello() {
    let hello = |id: &str| Message::new(0, id, Payload::Hello { tl_enabled: false });
    let mut peer = PeerSession::new();
    peer.step(PeerEvent::Received(hello("c1"))).unwrap();
    assert!(peer.step(PeerEvent::Received(hello("c1"))).is_err());
    let mut peer = PeerSession::new();
    peer.step(PeerEvent::Received(hello("c1"))).unwrap();
    assert!(peer.step(PeerEvent::Received(hello("c2"))).is_err());
}

#[test]
fn round_numbers_are_enforced_per_kind() {
    assert!(wire::encode(&Message::new(3, "c1", Payload::Hello { tl_enabled: true })).is_err());
    assert!(wire::encode(&Message::new(0, "s", Payload::RoundDone { global_accuracy: None })).is_err());
    assert!(wire::encode(&Message::new(7, "s", Payload::Bye { reason: String::new() })).is_ok());
    assert!(wire::encode(&Message::new(0, "bad id", Payload::Bye { reason: String::new() })).is_err());
}

// ---- privacy contract -------------------------------------------------------

fn sample_message(kind: Kind) -> Message {
    let model = small_model(2, &[4, 3]);
    let payload = match kind {
        Kind::Hello => Payload::Hello { tl_enabled: true },
        Kind::Welcome => Payload::Welcome { total_rounds: 3 },
        Kind::GlobalModel => Payload::GlobalModel {
            schedule: SchedulePlan::default().for_round(1, 1),
            model,
            dp: None,
        },
        Kind::LocalUpdate => Payload::LocalUpdate {
            delta: ParamDelta::zeros_like(&model, 1),
            sample_count: 10,
            metrics: LocalMetrics { loss: 1.0, accuracy: 0.5 },
        },
        Kind::RoundDone => Payload::RoundDone { global_accuracy: None },
        Kind::Error => Payload::Error { code: "e".into(), detail: String::new() },
        Kind::Bye => Payload::Bye { reason: String::new() },
    };
    let round = if matches!(kind, Kind::Hello | Kind::Welcome) { 0 } else { 1 };
    Message::new(round, "c1", payload)
}

#[test]
fn no_message_kind_accepts_feature_rows() {
    let rows = serde_json::json!([[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]);
    for kind in Kind::ALL {
        let body = wire::to_json(&sample_message(kind)).unwrap();
        let clean: serde_json::Value = serde_json::from_slice(&body).unwrap();
        for key in ["features", "rows", "data", "samples", "labels"] {
            let mut in_payload = clean.clone();
            in_payload["payload"][key] = rows.clone();
            let bytes = serde_json::to_vec(&in_payload).unwrap();
            assert!(wire::from_json(&bytes).is_err(), "{kind:?} accepted payload.{key}");

            let mut in_envelope = clean.clone();
            in_envelope[key] = rows.clone();
            let bytes = serde_json::to_vec(&in_envelope).unwrap();
            assert!(wire::from_json(&bytes).is_err(), "{kind:?} accepted envelope {key}");
        }
    }
}

#[test]
fn feature_matrix_disguised_as_delta_fails_validation() {
    // A bare n x d matrix with no bias is not a layered parameter set.
    let features = homefl::nn::LayerTensors { weights: vec![0.5; 6 * 32], bias: vec![] };
    let msg = Message::new(
        1,
        "c1",
        Payload::LocalUpdate {
            delta: ParamDelta { round: 1, layers: vec![features] },
            sample_count: 6,
            metrics: LocalMetrics { loss: 0.0, accuracy: 0.0 },
        },
    );
    assert!(msg.validate().is_err());
    assert!(wire::encode(&msg).is_err());

    // Anything that does validate must still match the global model to be aggregated.
    let global = small_model(3, &[32, 8, 5]);
    let rows_as_layer = homefl::nn::LayerTensors { weights: vec![0.5; 6 * 32], bias: vec![0.0; 6] };
    let update = homefl::client::ClientUpdate {
        client_id: "c1".into(),
        round: 1,
        delta: ParamDelta { round: 1, layers: vec![rows_as_layer] },
        sample_count: 6,
        metrics: LocalMetrics { loss: 0.0, accuracy: 0.0 },
    };
    assert!(server::aggregate(&global, &[update]).unwrap_err().is_protocol());
}

struct Recorder {
    inner: TcpStream,
    log: Arc<Mutex<Vec<u8>>>,
}

impl Write for Recorder {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.log.lock().unwrap().extend_from_slice(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn tiny_plan() -> SchedulePlan {
    SchedulePlan {
        head_epochs: 1,
        finetune_epochs: 1,
        later_epochs: 1,
        ..SchedulePlan::default()
    }
}

#[test]
fn client_writes_only_protocol_messages_and_no_features() {
    let parts = data::generate(&SynthSpec::default()).unwrap();
    let local = LocalData::from_partition(&parts["B"]);
    let initial = small_model(4, &[32, 64, 32, 5]);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let eval = data::pooled_test(&parts);
    let server_cfg = ServerConfig {
        rounds: 2,
        plan: tiny_plan(),
        ..ServerConfig::default()
    };
    let server = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        server::run_rounds(&server_cfg, &initial, &eval, vec![Connection::tcp(stream).unwrap()]).unwrap()
    });

    let log = Arc::new(Mutex::new(Vec::new()));
    let stream = TcpStream::connect(addr).unwrap();
    let conn = Connection::new(
        stream.try_clone().unwrap(),
        Recorder {
            inner: stream,
            log: log.clone(),
        },
        "server",
    );
    let cfg = ClientConfig {
        client_id: "b".into(),
        data_partition: "B".into(),
        dp: None,
        tl_enabled: true,
        seed: 5,
    };
    client::run_client(&cfg, &local, conn).unwrap();
    let report = server.join().unwrap();
    assert_eq!(report.rounds.len(), 2);

    let bytes = log.lock().unwrap().clone();
    let mut rest = bytes.as_slice();
    let mut kinds = Vec::new();
    while !rest.is_empty() {
        let Decoded::Frame { message, consumed } = wire::decode(rest).unwrap() else {
            panic!("client wrote a partial frame");
        };
        kinds.push(message.kind());
        rest = &rest[consumed..];
    }
    assert_eq!(kinds, [Kind::Hello, Kind::LocalUpdate, Kind::LocalUpdate]);
    let text = String::from_utf8(bytes).unwrap_or_default();
    for i in 0..local.train.len() {
        assert!(!text.contains(&wire::encode_f32(local.train.row(i))));
    }
}

// ---- single client vs local training -----------------------------------------

#[test]
fn single_client_federation_equals_local_training() {
    let parts = data::generate(&SynthSpec::default()).unwrap();
    let local = LocalData::from_partition(&parts["A"]);
    let plan = SchedulePlan {
        head_epochs: 2,
        finetune_epochs: 2,
        later_epochs: 2,
        ..SchedulePlan::default()
    };
    let rounds = 3;
    let client_seed = 77;
    let init = ModelParams::glorot(&[32, 64, 32, 5], &mut seed::rng(13));

    let server_cfg = ServerConfig {
        rounds,
        plan: plan.clone(),
        tl_enabled: false,
        ..ServerConfig::default()
    };
    let cfg = ClientConfig {
        client_id: "a".into(),
        data_partition: "A".into(),
        dp: None,
        tl_enabled: false,
        seed: client_seed,
    };
    let eval = data::pooled_test(&parts);
    let (report, _) = server::run_local(&server_cfg, &init, &eval, vec![(cfg, local.clone())]).unwrap();
    let federated = report.final_model;

    let mut g = init.quantized();
    for r in 1..=rounds {
        let out = run_round_schedule(
            &g,
            &local.train,
            &plan.for_round(r, 3),
            r,
            &Optimizer::Sgd,
            round_seed(client_seed, r),
        )
        .unwrap();
        g = g.apply_delta(&out.delta.quantized()).unwrap().quantized();
    }
    for (a, b) in federated.layers.iter().zip(&g.layers) {
        for (x, y) in a.weights.iter().chain(&a.bias).zip(b.weights.iter().chain(&b.bias)) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
