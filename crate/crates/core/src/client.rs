//! FL client: local training on private data and the client side of the
//! session loop. Only [`ParamDelta`]s and aggregate metrics ever leave
//! [`local_round`].

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ActivityLabel, Partition};
use crate::dp::DpConfig;
use crate::error::{Error, Result};
use crate::nn::{self, LabeledBatch, Matrix, ModelParams, ParamDelta};
use crate::seed;
use crate::session::{ClientAction, ClientEvent, ClientSession};
use crate::train::{run_round_schedule, Optimizer, RoundSchedule};
use crate::transport::Connection;
use crate::wire::{LocalMetrics, Message, Payload};

/// Below this confidence a classification triggers no device action.
pub const ACTION_CONFIDENCE_THRESHOLD: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub client_id: String,
    /// User whose data this client holds (`A`, `B`, `C`, ...).
    pub data_partition: String,
    /// Local DP setting; when absent the server's per-round setting applies.
    #[serde(default)]
    pub dp: Option<DpConfig>,
    #[serde(default)]
    pub tl_enabled: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.client_id.is_empty() {
            return Err(Error::config("client_id must not be empty"));
        }
        if let Some(dp) = &self.dp {
            dp.validate()?;
        }
        Ok(())
    }
}

/// A client's private data: the training set and a held-out split used only
/// for local metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalData {
    pub train: LabeledBatch,
    pub holdout: LabeledBatch,
}

impl LocalData {
    /// Uses the partition's own test split as the held-out set.
    pub fn from_partition(p: &Partition) -> Self {
        Self {
            train: p.train.clone(),
            holdout: p.test.clone(),
        }
    }

    /// Shuffles `data` with `seed` and keeps the last 20% as the held-out set.
    pub fn split(data: &LabeledBatch, seed: u64) -> Result<Self> {
        if data.len() < 2 {
            return Err(Error::config("need at least two examples to split"));
        }
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut seed::rng(seed::derive(seed, &[seed::tag("holdout")])));
        let held = (data.len() / 5).max(1);
        let cut = data.len() - held;
        Ok(Self {
            train: data.select(&idx[..cut]),
            holdout: data.select(&idx[cut..]),
        })
    }
}

/// What a client reports for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: String,
    pub round: u32,
    pub delta: ParamDelta,
    pub sample_count: u64,
    pub metrics: LocalMetrics,
}

impl ClientUpdate {
    pub fn to_message(&self) -> Message {
        Message::new(
            self.round,
            self.client_id.clone(),
            Payload::LocalUpdate {
                delta: self.delta.clone(),
                sample_count: self.sample_count,
                metrics: self.metrics,
            },
        )
    }

    pub fn from_message(msg: Message) -> Result<Self> {
        match msg.payload {
            Payload::LocalUpdate {
                delta,
                sample_count,
                metrics,
            } => Ok(Self {
                client_id: msg.sender_id,
                round: msg.round,
                delta,
                sample_count,
                metrics,
            }),
            other => Err(Error::protocol(format!(
                "expected LocalUpdate, got {}",
                other.kind().as_str()
            ))),
        }
    }
}

/// Seed for a client's training in one round.
pub fn round_seed(client_seed: u64, round: u32) -> u64 {
    seed::derive(client_seed, &[u64::from(round)])
}

/// Runs the round's schedule on local data and packages the delta.
pub fn local_round(
    global: &ModelParams,
    round: u32,
    schedule: &RoundSchedule,
    data: &LocalData,
    config: &ClientConfig,
) -> Result<ClientUpdate> {
    if data.train.is_empty() {
        return Err(Error::config("client has no training data"));
    }
    let optimizer = Optimizer::from_dp(config.dp);
    if let Some(dp) = &config.dp {
        for phase in &schedule.phases {
            dp.validate_for(data.train.len(), phase.batch_size)?;
        }
    }
    let outcome = run_round_schedule(
        global,
        &data.train,
        schedule,
        round,
        &optimizer,
        round_seed(config.seed, round),
    )?;
    let metrics = if data.holdout.is_empty() {
        LocalMetrics {
            loss: outcome.last_epoch_loss.unwrap_or(0.0),
            accuracy: nn::accuracy(&outcome.params, &data.train)?,
        }
    } else {
        LocalMetrics {
            loss: nn::mean_loss(&outcome.params, &data.holdout)?,
            accuracy: nn::accuracy(&outcome.params, &data.holdout)?,
        }
    };
    Ok(ClientUpdate {
        client_id: config.client_id.clone(),
        round,
        delta: outcome.delta,
        sample_count: data.train.len() as u64,
        metrics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Classification {
    pub label: ActivityLabel,
    pub confidence: f64,
}

impl Classification {
    /// Whether the prediction is confident enough to drive a device.
    pub fn should_act(&self) -> bool {
        self.confidence >= ACTION_CONFIDENCE_THRESHOLD
    }
}

/// Most probable activity for one feature vector; ties go to the lowest
/// class index.
pub fn classify(model: Option<&ModelParams>, features: &[f64]) -> Result<Classification> {
    let model = model.ok_or_else(|| Error::NotReady("no trained model on this client".into()))?;
    if model.num_classes() != ActivityLabel::COUNT {
        return Err(Error::shape(format!(
            "model predicts {} classes, expected {}",
            model.num_classes(),
            ActivityLabel::COUNT
        )));
    }
    let probs = nn::forward(model, &Matrix::new(1, features.len(), features.to_vec())?)?;
    let row = probs.row(0);
    let k = nn::argmax(row);
    Ok(Classification {
        label: ActivityLabel::from_index(k).expect("five classes"),
        confidence: row[k],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LocalRoundRecord {
    pub round: u32,
    pub loss: f64,
    pub accuracy: f64,
    pub global_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ClientReport {
    pub client_id: String,
    pub rounds: Vec<LocalRoundRecord>,
    /// The locally trained model from the last round, used for classification.
    pub model: Option<ModelParams>,
}

/// Drives one client session to completion over `conn`.
pub fn run_client(config: &ClientConfig, data: &LocalData, conn: Connection) -> Result<ClientReport> {
    config.validate()?;
    let (mut reader, mut writer) = conn.split();
    let mut session = ClientSession::new();
    let mut report = ClientReport {
        client_id: config.client_id.clone(),
        rounds: Vec::new(),
        model: None,
    };
    writer.send(&Message::new(
        0,
        config.client_id.clone(),
        Payload::Hello {
            tl_enabled: config.tl_enabled,
        },
    ))?;

    let result = (|| -> Result<()> {
        loop {
            let Some(msg) = reader.recv()? else {
                return Err(Error::protocol("server closed the connection mid-session"));
            };
            let incoming = msg.clone();
            for action in session.step(ClientEvent::Received(msg))? {
                match action {
                    ClientAction::StartTraining(r) => {
                        let Payload::GlobalModel { model, schedule, dp } = &incoming.payload else {
                            unreachable!("training starts only on a global model");
                        };
                        let mut effective = config.clone();
                        if effective.dp.is_none() {
                            effective.dp = *dp;
                        } else if dp.is_some() && *dp != config.dp {
                            log::warn!("{}: using local DP settings instead of the server's", config.client_id);
                        }
                        let update = local_round(model, r, schedule, data, &effective)?;
                        report.model = Some(model.apply_delta(&update.delta)?);
                        report.rounds.push(LocalRoundRecord {
                            round: r,
                            loss: update.metrics.loss,
                            accuracy: update.metrics.accuracy,
                            global_accuracy: None,
                        });
                        for a in session.step(ClientEvent::TrainingDone(r))? {
                            if let ClientAction::SendUpdate(_) = a {
                                writer.send(&update.to_message())?;
                            }
                        }
                    }
                    ClientAction::RoundFinished {
                        round,
                        global_accuracy,
                    } => {
                        if let Some(rec) = report.rounds.iter_mut().find(|x| x.round == round) {
                            rec.global_accuracy = global_accuracy;
                        }
                    }
                    ClientAction::Warn(w) => log::warn!("{}: {w}", config.client_id),
                    ClientAction::Finished => return Ok(()),
                    ClientAction::SendUpdate(_) => {}
                }
            }
        }
    })();

    if let Err(e) = &result {
        let _ = writer.send(&Message::new(
            0,
            config.client_id.clone(),
            Payload::Error {
                code: error_code(e).into(),
                detail: truncate(&e.to_string()),
            },
        ));
    }
    writer.close();
    result.map(|()| report)
}

pub(crate) fn error_code(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::Shape(_) => "config",
        Error::SchemaMismatch { .. } => "schema_version",
        Error::UnknownKind(_) => "unknown_kind",
        Error::Protocol(_) | Error::FrameLimit { .. } => "protocol",
        _ => "run",
    }
}

pub(crate) fn truncate(s: &str) -> String {
    let mut end = s.len().min(1000);
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    s[..end].to_string()
}
