//! Per-connection session state machines.
//!
//! Both machines are pure: `step` takes an event and returns the actions the
//! runtime must perform. A message for a round that is already finished is
//! ignored with a warning; a message for a round that has not started yet is
//! a protocol error.

use crate::error::{Error, Result};
use crate::wire::{Kind, Message, Payload};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientState {
    /// Hello sent, waiting for Welcome.
    Connecting,
    Registered,
    Training(u32),
    AwaitGlobal(u32),
    Closed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientEvent {
    Received(Message),
    TrainingDone(u32),
    Timeout,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClientAction {
    /// Run local training for the round on the model carried by the message.
    StartTraining(u32),
    /// Upload the finished round's update.
    SendUpdate(u32),
    RoundFinished {
        round: u32,
        global_accuracy: Option<f64>,
    },
    Warn(String),
    /// The server ended the session normally.
    Finished,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientSession {
    pub state: ClientState,
    pub total_rounds: Option<u32>,
}

impl Default for ClientSession {
    fn default() -> Self {
        Self::new()
    }
}

impl ClientSession {
    pub fn new() -> Self {
        Self {
            state: ClientState::Connecting,
            total_rounds: None,
        }
    }

    /// Advances the machine. On error the session is closed.
    pub fn step(&mut self, event: ClientEvent) -> Result<Vec<ClientAction>> {
        let out = self.transition(event);
        if out.is_err() {
            self.state = ClientState::Closed;
        }
        out
    }

    fn transition(&mut self, event: ClientEvent) -> Result<Vec<ClientAction>> {
        use ClientState::*;
        if self.state == Closed {
            return Err(Error::protocol("session is closed"));
        }
        let msg = match event {
            ClientEvent::Timeout => {
                return Err(Error::protocol(format!("timed out in state {:?}", self.state)))
            }
            ClientEvent::TrainingDone(r) => {
                return match self.state {
                    Training(t) if t == r => {
                        self.state = AwaitGlobal(r);
                        Ok(vec![ClientAction::SendUpdate(r)])
                    }
                    s => Err(Error::protocol(format!("training for round {r} finished in state {s:?}"))),
                };
            }
            ClientEvent::Received(m) => m,
        };
        let r = msg.round;
        match (&msg.payload, self.state) {
            (Payload::Bye { .. }, _) => {
                self.state = Closed;
                Ok(vec![ClientAction::Finished])
            }
            (Payload::Error { code, detail }, _) => Err(Error::protocol(format!(
                "server reported {code}: {detail}"
            ))),
            (Payload::Welcome { total_rounds }, Connecting) => {
                self.total_rounds = Some(*total_rounds);
                self.state = Registered;
                Ok(vec![])
            }
            (Payload::GlobalModel { .. }, Registered) => {
                self.state = Training(r);
                Ok(vec![ClientAction::StartTraining(r)])
            }
            (Payload::GlobalModel { .. }, Training(t)) => {
                if r > t {
                    Err(Error::protocol(format!(
                        "global model for round {r} arrived before the round-{t} update was sent"
                    )))
                } else {
                    Ok(vec![stale(Kind::GlobalModel, r, t)])
                }
            }
            (Payload::GlobalModel { .. }, AwaitGlobal(t)) => {
                if r == t + 1 {
                    self.state = Training(r);
                    Ok(vec![ClientAction::StartTraining(r)])
                } else if r > t + 1 {
                    Err(Error::protocol(format!(
                        "global model jumped from round {t} to {r}"
                    )))
                } else {
                    Ok(vec![stale(Kind::GlobalModel, r, t)])
                }
            }
            (Payload::RoundDone { global_accuracy }, AwaitGlobal(t)) => {
                if r == t {
                    Ok(vec![ClientAction::RoundFinished {
                        round: r,
                        global_accuracy: *global_accuracy,
                    }])
                } else if r > t {
                    Err(Error::protocol(format!(
                        "round {r} finished while this client is on round {t}"
                    )))
                } else {
                    Ok(vec![stale(Kind::RoundDone, r, t)])
                }
            }
            (Payload::RoundDone { .. }, Training(t)) if r < t => {
                Ok(vec![stale(Kind::RoundDone, r, t)])
            }
            (_, s) => Err(Error::protocol(format!(
                "unexpected {} (round {r}) in client state {s:?}",
                msg.kind().as_str()
            ))),
        }
    }
}

fn stale(kind: Kind, got: u32, current: u32) -> ClientAction {
    ClientAction::Warn(format!(
        "ignoring {} for past round {got} (current round {current})",
        kind.as_str()
    ))
}

/// Server-side view of one client connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PeerState {
    AwaitHello,
    Registered,
    AwaitUpdate(u32),
    Reported(u32),
    Closed,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeerEvent {
    Received(Message),
    /// The server sent the global model for this round.
    Broadcast(u32),
    Timeout,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PeerAction {
    /// Hello accepted: reply with Welcome and register the client.
    Register { client_id: String, tl_enabled: bool },
    /// A LocalUpdate for the current round, ready for aggregation.
    Accept(Message),
    Warn(String),
    /// The client left with Bye.
    Left,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeerSession {
    pub state: PeerState,
    pub client_id: Option<String>,
}

impl Default for PeerSession {
    fn default() -> Self {
        Self::new()
    }
}

impl PeerSession {
    pub fn new() -> Self {
        Self {
            state: PeerState::AwaitHello,
            client_id: None,
        }
    }

    /// Advances the machine. On error the session is closed.
    pub fn step(&mut self, event: PeerEvent) -> Result<Vec<PeerAction>> {
        let out = self.transition(event);
        if out.is_err() {
            self.state = PeerState::Closed;
        }
        out
    }

    fn transition(&mut self, event: PeerEvent) -> Result<Vec<PeerAction>> {
        use PeerState::*;
        if self.state == Closed {
            return Err(Error::protocol("peer session is closed"));
        }
        let msg = match event {
            PeerEvent::Timeout => {
                return Err(Error::protocol(format!("peer timed out in state {:?}", self.state)))
            }
            PeerEvent::Broadcast(r) => {
                return match self.state {
                    Registered => {
                        self.state = AwaitUpdate(r);
                        Ok(vec![])
                    }
                    Reported(t) if r == t + 1 => {
                        self.state = AwaitUpdate(r);
                        Ok(vec![])
                    }
                    ref s => Err(Error::protocol(format!("cannot broadcast round {r} in peer state {s:?}"))),
                };
            }
            PeerEvent::Received(m) => m,
        };
        if let Some(id) = &self.client_id {
            if &msg.sender_id != id {
                return Err(Error::protocol(format!(
                    "message from '{}' on the connection registered to '{id}'",
                    msg.sender_id
                )));
            }
        }
        let r = msg.round;
        match (&msg.payload, self.state.clone()) {
            (Payload::Bye { .. }, _) => {
                self.state = Closed;
                Ok(vec![PeerAction::Left])
            }
            (Payload::Error { code, detail }, _) => Err(Error::protocol(format!(
                "client reported {code}: {detail}"
            ))),
            (Payload::Hello { tl_enabled }, AwaitHello) => {
                self.client_id = Some(msg.sender_id.clone());
                self.state = Registered;
                Ok(vec![PeerAction::Register {
                    client_id: msg.sender_id.clone(),
                    tl_enabled: *tl_enabled,
                }])
            }
            (Payload::LocalUpdate { .. }, AwaitUpdate(t)) => {
                if r == t {
                    self.state = Reported(t);
                    Ok(vec![PeerAction::Accept(msg)])
                } else if r > t {
                    Err(Error::protocol(format!(
                        "update for future round {r} during round {t}"
                    )))
                } else {
                    Ok(vec![PeerAction::Warn(format!(
                        "ignoring update for past round {r} (current round {t})"
                    ))])
                }
            }
            (Payload::LocalUpdate { .. }, Reported(t)) => {
                if r > t {
                    Err(Error::protocol(format!(
                        "update for future round {r} after reporting round {t}"
                    )))
                } else {
                    Ok(vec![PeerAction::Warn(format!(
                        "ignoring repeated update for round {r} (already reported round {t})"
                    ))])
                }
            }
            (_, s) => Err(Error::protocol(format!(
                "unexpected {} (round {r}) in peer state {s:?}",
                msg.kind().as_str()
            ))),
        }
    }
}
