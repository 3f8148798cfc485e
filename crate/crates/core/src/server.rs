//! FL server: sample-weighted FedAvg over client deltas and round
//! orchestration across client connections.
//!
//! Each connection gets a reader thread that forwards decoded messages to a
//! single aggregator loop (the caller's thread) over a channel. Only the
//! aggregator touches round state and writes to clients.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::client::{error_code, run_client, truncate, ClientConfig, ClientReport, ClientUpdate, LocalData};
use crate::dp::DpConfig;
use crate::error::{Error, Result};
use crate::nn::{self, LabeledBatch, ModelParams};
use crate::session::{PeerAction, PeerEvent, PeerSession};
use crate::train::SchedulePlan;
use crate::transport::{duplex, Connection, MessageWriter};
use crate::wire::{Message, Payload};

/// `global + Σ (n_i / Σn) · delta_i`, summed in client-id order.
pub fn aggregate(global: &ModelParams, updates: &[ClientUpdate]) -> Result<ModelParams> {
    if updates.is_empty() {
        return Err(Error::config("cannot aggregate an empty update list"));
    }
    let round = updates[0].round;
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    for pair in sorted.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(Error::config(format!(
                "client '{}' appears twice in one aggregation",
                pair[0].client_id
            )));
        }
    }
    for u in &sorted {
        if u.round != round || u.delta.round != round {
            return Err(Error::protocol(format!(
                "update from '{}' is for round {} but round {round} is being aggregated",
                u.client_id, u.round
            )));
        }
        if !u.delta.matches(global) {
            return Err(Error::protocol(format!(
                "update from '{}' does not match the global model's shape",
                u.client_id
            )));
        }
        if u.sample_count == 0 {
            return Err(Error::protocol(format!("update from '{}' has zero samples", u.client_id)));
        }
        if !u.delta.is_finite() {
            return Err(Error::protocol(format!("update from '{}' is not finite", u.client_id)));
        }
    }
    let total: u64 = sorted.iter().map(|u| u.sample_count).sum();
    let mut sum = nn::ParamDelta::zeros_like(global, round);
    for u in &sorted {
        let w = u.sample_count as f64 / total as f64;
        for (acc, d) in sum.layers.iter_mut().zip(&u.delta.layers) {
            for (a, x) in acc.weights.iter_mut().zip(&d.weights) {
                *a += w * x;
            }
            for (a, x) in acc.bias.iter_mut().zip(&d.bias) {
                *a += w * x;
            }
        }
    }
    let mut out = global.apply_delta(&sum)?;
    out.version = round;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub server_id: String,
    pub rounds: u32,
    pub plan: SchedulePlan,
    /// DP setting broadcast with every global model.
    pub dp: Option<DpConfig>,
    /// Clients must agree with this when they say hello.
    pub tl_enabled: bool,
    /// Longest wait for registrations or for one round's updates.
    pub round_timeout_secs: f64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            server_id: "server".into(),
            rounds: 10,
            plan: SchedulePlan::default(),
            dp: None,
            tl_enabled: true,
            round_timeout_secs: 600.0,
        }
    }
}

impl ServerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.round_timeout_secs > 0.0 && self.round_timeout_secs.is_finite()) {
            return Err(Error::config("round_timeout_secs must be a positive number"));
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }

    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.round_timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: u32,
    pub participants: usize,
    pub global_accuracy: f64,
    pub global_loss: f64,
    pub mean_client_loss: f64,
    pub mean_client_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Dropout {
    pub round: u32,
    pub client_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingReport {
    pub clients: Vec<String>,
    pub rounds: Vec<RoundRecord>,
    pub dropouts: Vec<Dropout>,
    pub initial_accuracy: f64,
    pub wall_seconds: f64,
    #[serde(skip)]
    pub final_model: ModelParams,
}

impl TrainingReport {
    /// Per-round CSV. Wall times are left out so reruns are byte-identical.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
        out.write_record([
            "round",
            "participants",
            "global_accuracy",
            "global_loss",
            "mean_client_loss",
            "mean_client_accuracy",
        ])
        .map_err(csv_err)?;
        for r in &self.rounds {
            out.write_record([
                r.round.to_string(),
                r.participants.to_string(),
                format!("{:.6}", r.global_accuracy),
                format!("{:.6}", r.global_loss),
                format!("{:.6}", r.mean_client_loss),
                format!("{:.6}", r.mean_client_accuracy),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

enum Inbound {
    Message(Message),
    Closed,
    Failed(Error),
}

struct Peer {
    session: PeerSession,
    writer: Option<MessageWriter>,
    client_id: Option<String>,
}

impl Peer {
    fn live(&self) -> bool {
        self.writer.is_some()
    }

    fn send(&mut self, msg: &Message) -> Result<()> {
        match self.writer.as_mut() {
            Some(w) => w.send(msg),
            None => Err(Error::protocol("peer is disconnected")),
        }
    }

    fn drop_with(&mut self, server_id: &str, err: Option<&Error>) {
        let Some(mut w) = self.writer.take() else {
            return;
        };
        if let Some(e) = err {
            let _ = w.send(&Message::new(
                0,
                server_id,
                Payload::Error {
                    code: error_code(e).into(),
                    detail: truncate(&e.to_string()),
                },
            ));
        }
        w.close();
    }
}

/// Runs registration and `config.rounds` rounds of federated training.
///
/// A client that disconnects or violates the protocol is dropped and the
/// round completes with the remaining clients. Because client training is
/// deterministic, this gives the same result as aborting the round and
/// re-running it without that client. A second failure within the same
/// round, or a round left with no clients, ends the run with an error.
pub fn run_rounds(
    config: &ServerConfig,
    initial: &ModelParams,
    eval: &LabeledBatch,
    connections: Vec<Connection>,
) -> Result<TrainingReport> {
    config.validate()?;
    initial.validate()?;
    if connections.is_empty() {
        return Err(Error::config("no client connections"));
    }
    eval.check_for(initial)?;
    let started = Instant::now();

    let (tx, rx) = mpsc::channel::<(usize, Inbound)>();
    let mut peers = Vec::with_capacity(connections.len());
    for (i, conn) in connections.into_iter().enumerate() {
        let (mut reader, writer) = conn.split();
        let tx = tx.clone();
        thread::spawn(move || loop {
            let item = match reader.recv() {
                Ok(Some(m)) => Inbound::Message(m),
                Ok(None) => Inbound::Closed,
                Err(e) => Inbound::Failed(e),
            };
            let stop = !matches!(item, Inbound::Message(_));
            if tx.send((i, item)).is_err() || stop {
                break;
            }
        });
        peers.push(Peer {
            session: PeerSession::new(),
            writer: Some(writer),
            client_id: None,
        });
    }
    drop(tx);

    let result = orchestrate(config, initial, eval, &mut peers, &rx, started);
    for p in &mut peers {
        if p.live() {
            let _ = p.send(&Message::new(
                0,
                config.server_id.clone(),
                Payload::Bye {
                    reason: if result.is_ok() { "done".into() } else { "run failed".into() },
                },
            ));
        }
        p.drop_with(&config.server_id, None);
    }
    // Reader threads exit once their stream ends or the channel is gone;
    // they are not joined so a stalled peer cannot hold up the caller.
    drop(rx);
    result
}

fn orchestrate(
    config: &ServerConfig,
    initial: &ModelParams,
    eval: &LabeledBatch,
    peers: &mut [Peer],
    rx: &mpsc::Receiver<(usize, Inbound)>,
    started: Instant,
) -> Result<TrainingReport> {
    let sid = config.server_id.as_str();
    let mut dropouts = Vec::new();

    // Registration: every connection must say hello.
    let deadline = Instant::now() + config.timeout();
    let mut ids = BTreeSet::new();
    while peers.iter().any(|p| p.live() && p.client_id.is_none()) {
        let Some((i, item)) = recv_until(rx, deadline) else {
            for p in peers.iter_mut().filter(|p| p.live() && p.client_id.is_none()) {
                p.drop_with(sid, Some(&Error::protocol("no hello before the timeout")));
            }
            break;
        };
        let peer = &mut peers[i];
        if !peer.live() {
            continue;
        }
        let outcome = match item {
            Inbound::Message(m) => peer.session.step(PeerEvent::Received(m)),
            Inbound::Closed => Err(Error::protocol("closed before hello")),
            Inbound::Failed(e) => Err(e),
        };
        let result = outcome.and_then(|actions| {
            for a in actions {
                if let PeerAction::Register { client_id, tl_enabled } = a {
                    if tl_enabled != config.tl_enabled {
                        return Err(Error::config(format!(
                            "client '{client_id}' has tl_enabled={tl_enabled}, server has {}",
                            config.tl_enabled
                        )));
                    }
                    if !ids.insert(client_id.clone()) {
                        return Err(Error::protocol(format!("duplicate client id '{client_id}'")));
                    }
                    peer.client_id = Some(client_id);
                }
            }
            Ok(())
        });
        if let Err(e) = result {
            log::warn!("registration failed on connection {i}: {e}");
            dropouts.push(Dropout {
                round: 0,
                client_id: peer.client_id.clone().unwrap_or_else(|| format!("connection-{i}")),
                reason: e.to_string(),
            });
            peer.drop_with(sid, Some(&e));
        }
    }
    let clients: Vec<String> = peers.iter().filter_map(|p| p.client_id.clone()).collect();
    if clients.is_empty() {
        return Err(Error::run("no client registered"));
    }
    for p in peers.iter_mut().filter(|p| p.live()) {
        p.send(&Message::new(
            0,
            sid,
            Payload::Welcome {
                total_rounds: config.rounds,
            },
        ))?;
    }

    let mut global = initial.quantized();
    let initial_accuracy = nn::accuracy(&global, eval)?;
    let mut records = Vec::new();

    for round in 1..=config.rounds {
        let round_start = Instant::now();
        let schedule = config.plan.for_round(round, global.num_layers());
        let broadcast = Message::new(
            round,
            sid,
            Payload::GlobalModel {
                model: global.clone(),
                schedule,
                dp: config.dp,
            },
        );
        let mut failures = 0usize;
        let mut fail = |peer: &mut Peer, e: Error, dropouts: &mut Vec<Dropout>| -> Result<()> {
            let id = peer.client_id.clone().unwrap_or_default();
            log::warn!("round {round}: dropping client '{id}': {e}");
            dropouts.push(Dropout {
                round,
                client_id: id,
                reason: e.to_string(),
            });
            peer.drop_with(sid, Some(&e));
            failures += 1;
            if failures >= 2 {
                return Err(Error::run(format!(
                    "round {round} had a second client failure: {e}"
                )));
            }
            Ok(())
        };

        for peer in peers.iter_mut().filter(|p| p.live()) {
            let sent = peer
                .session
                .step(PeerEvent::Broadcast(round))
                .and_then(|_| peer.send(&broadcast));
            if let Err(e) = sent {
                fail(peer, e, &mut dropouts)?;
            }
        }

        let mut received: BTreeMap<String, ClientUpdate> = BTreeMap::new();
        let deadline = Instant::now() + config.timeout();
        loop {
            let pending = peers
                .iter()
                .filter(|p| p.live())
                .filter(|p| p.client_id.as_ref().is_some_and(|id| !received.contains_key(id)))
                .count();
            if pending == 0 {
                break;
            }
            let Some((i, item)) = recv_until(rx, deadline) else {
                for peer in peers.iter_mut().filter(|p| p.live()) {
                    if peer.client_id.as_ref().is_some_and(|id| !received.contains_key(id)) {
                        fail(peer, Error::protocol(format!("no update for round {round} before the timeout")), &mut dropouts)?;
                    }
                }
                break;
            };
            let peer = &mut peers[i];
            if !peer.live() {
                continue;
            }
            let outcome = match item {
                Inbound::Message(m) => peer.session.step(PeerEvent::Received(m)),
                Inbound::Closed => Err(Error::protocol("connection closed mid-round")),
                Inbound::Failed(e) => Err(e),
            };
            let accepted = outcome.and_then(|actions| {
                for a in actions {
                    match a {
                        PeerAction::Accept(msg) => {
                            let update = ClientUpdate::from_message(msg)?;
                            if !update.delta.matches(&global) {
                                return Err(Error::protocol("update shape does not match the global model"));
                            }
                            received.insert(update.client_id.clone(), update);
                        }
                        PeerAction::Warn(w) => log::warn!("round {round}: {w}"),
                        PeerAction::Left => return Err(Error::protocol("client left mid-run")),
                        PeerAction::Register { .. } => {}
                    }
                }
                Ok(())
            });
            if let Err(e) = accepted {
                if let Some(id) = &peer.client_id {
                    received.remove(id);
                }
                fail(peer, e, &mut dropouts)?;
            }
        }

        let updates: Vec<ClientUpdate> = received.into_values().collect();
        if updates.is_empty() {
            return Err(Error::run(format!("round {round} ended with no client updates")));
        }
        global = aggregate(&global, &updates)?.quantized();
        let global_accuracy = nn::accuracy(&global, eval)?;
        let global_loss = nn::mean_loss(&global, eval)?;
        let n = updates.len() as f64;
        records.push(RoundRecord {
            round,
            participants: updates.len(),
            global_accuracy,
            global_loss,
            mean_client_loss: updates.iter().map(|u| u.metrics.loss).sum::<f64>() / n,
            mean_client_accuracy: updates.iter().map(|u| u.metrics.accuracy).sum::<f64>() / n,
            wall_seconds: round_start.elapsed().as_secs_f64(),
        });
        let done = Message::new(
            round,
            sid,
            Payload::RoundDone {
                global_accuracy: Some(global_accuracy),
            },
        );
        for peer in peers.iter_mut().filter(|p| p.live()) {
            if let Err(e) = peer.send(&done) {
                log::warn!("round {round}: could not deliver RoundDone: {e}");
                peer.drop_with(sid, None);
            }
        }
    }

    Ok(TrainingReport {
        clients,
        rounds: records,
        dropouts,
        initial_accuracy,
        wall_seconds: started.elapsed().as_secs_f64(),
        final_model: global,
    })
}

fn recv_until<T>(rx: &mpsc::Receiver<T>, deadline: Instant) -> Option<T> {
    let wait = deadline.saturating_duration_since(Instant::now());
    match rx.recv_timeout(wait) {
        Ok(v) => Some(v),
        Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => None,
    }
}

/// Runs a server and one thread per client over in-process pipes.
pub fn run_local(
    config: &ServerConfig,
    initial: &ModelParams,
    eval: &LabeledBatch,
    clients: Vec<(ClientConfig, LocalData)>,
) -> Result<(TrainingReport, Vec<ClientReport>)> {
    let mut server_ends = Vec::with_capacity(clients.len());
    let mut handles = Vec::with_capacity(clients.len());
    for (cfg, data) in clients {
        let (server_end, client_end) = duplex(&config.server_id, &cfg.client_id);
        server_ends.push(server_end);
        handles.push(thread::spawn(move || run_client(&cfg, &data, client_end)));
    }
    let report = run_rounds(config, initial, eval, server_ends);
    let mut client_reports = Vec::new();
    let mut client_error = None;
    for h in handles {
        match h.join() {
            Ok(Ok(r)) => client_reports.push(r),
            Ok(Err(e)) => client_error = client_error.or(Some(e)),
            Err(_) => client_error = client_error.or(Some(Error::run("client thread panicked"))),
        }
    }
    let report = report?;
    if report.dropouts.is_empty() {
        if let Some(e) = client_error {
            return Err(e);
        }
    }
    Ok((report, client_reports))
}
