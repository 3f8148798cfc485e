//! Framed JSON wire format between the FL server and its clients.
//!
//! A frame is a 4-byte big-endian body length followed by a UTF-8 JSON
//! object. Tensors travel as base64 strings of little-endian `f32` values.
//! Every payload type rejects unknown fields, so a message cannot smuggle
//! anything (such as raw feature rows) beyond its declared schema.

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dp::DpConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, Dense, LayerTensors, ModelParams, ParamDelta};
use crate::train::RoundSchedule;

pub const SCHEMA_VERSION: u32 = 1;

/// Largest accepted frame body.
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

const MAX_ID_LEN: usize = 64;
const MAX_TEXT_LEN: usize = 1024;

/// Message kinds in the order they normally appear in a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Kind {
    Hello,
    Welcome,
    GlobalModel,
    LocalUpdate,
    RoundDone,
    Error,
    Bye,
}

impl Kind {
    pub const ALL: [Kind; 7] = [
        Kind::Hello,
        Kind::Welcome,
        Kind::GlobalModel,
        Kind::LocalUpdate,
        Kind::RoundDone,
        Kind::Error,
        Kind::Bye,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Hello => "Hello",
            Kind::Welcome => "Welcome",
            Kind::GlobalModel => "GlobalModel",
            Kind::LocalUpdate => "LocalUpdate",
            Kind::RoundDone => "RoundDone",
            Kind::Error => "Error",
            Kind::Bye => "Bye",
        }
    }

    fn parse(s: &str) -> Option<Kind> {
        Kind::ALL.into_iter().find(|k| k.as_str() == s)
    }
}

/// Loss and accuracy measured on a client's held-out split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Hello {
        tl_enabled: bool,
    },
    Welcome {
        total_rounds: u32,
    },
    GlobalModel {
        model: ModelParams,
        schedule: RoundSchedule,
        dp: Option<DpConfig>,
    },
    LocalUpdate {
        delta: ParamDelta,
        sample_count: u64,
        metrics: LocalMetrics,
    },
    RoundDone {
        global_accuracy: Option<f64>,
    },
    Error {
        code: String,
        detail: String,
    },
    Bye {
        reason: String,
    },
}

impl Payload {
    pub fn kind(&self) -> Kind {
        match self {
            Payload::Hello { .. } => Kind::Hello,
            Payload::Welcome { .. } => Kind::Welcome,
            Payload::GlobalModel { .. } => Kind::GlobalModel,
            Payload::LocalUpdate { .. } => Kind::LocalUpdate,
            Payload::RoundDone { .. } => Kind::RoundDone,
            Payload::Error { .. } => Kind::Error,
            Payload::Bye { .. } => Kind::Bye,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub round: u32,
    pub sender_id: String,
    pub payload: Payload,
}

impl Message {
    pub fn new(round: u32, sender_id: impl Into<String>, payload: Payload) -> Self {
        Self {
            round,
            sender_id: sender_id.into(),
            payload,
        }
    }

    pub fn kind(&self) -> Kind {
        self.payload.kind()
    }

    /// Per-kind structural checks applied before encoding and after decoding.
    pub fn validate(&self) -> Result<()> {
        validate_id(&self.sender_id)?;
        match &self.payload {
            Payload::Hello { .. } | Payload::Welcome { .. } => {
                if self.round != 0 {
                    return Err(Error::protocol(format!(
                        "{} must carry round 0, got {}",
                        self.kind().as_str(),
                        self.round
                    )));
                }
            }
            Payload::GlobalModel { model, schedule, dp } => {
                self.require_round()?;
                model.validate().map_err(as_protocol)?;
                schedule
                    .validate(self.round, model.num_layers())
                    .map_err(as_protocol)?;
                if let Some(dp) = dp {
                    dp.validate().map_err(as_protocol)?;
                }
            }
            Payload::LocalUpdate {
                delta,
                sample_count,
                metrics,
            } => {
                self.require_round()?;
                if delta.round != self.round {
                    return Err(Error::protocol(format!(
                        "delta is tagged round {} inside a round-{} message",
                        delta.round, self.round
                    )));
                }
                validate_delta_layout(delta)?;
                if !delta.is_finite() {
                    return Err(Error::protocol("delta contains non-finite values"));
                }
                if *sample_count == 0 {
                    return Err(Error::protocol("sample_count must be >= 1"));
                }
                if !(metrics.loss.is_finite() && metrics.accuracy.is_finite()) {
                    return Err(Error::protocol("metrics must be finite"));
                }
                if !(0.0..=1.0).contains(&metrics.accuracy) {
                    return Err(Error::protocol("accuracy must be in [0,1]"));
                }
            }
            Payload::RoundDone { global_accuracy } => {
                self.require_round()?;
                if let Some(a) = global_accuracy {
                    if !(0.0..=1.0).contains(a) {
                        return Err(Error::protocol("global accuracy must be in [0,1]"));
                    }
                }
            }
            Payload::Error { code, detail } => {
                validate_id(code)?;
                validate_text(detail)?;
            }
            Payload::Bye { reason } => validate_text(reason)?,
        }
        Ok(())
    }

    fn require_round(&self) -> Result<()> {
        if self.round == 0 {
            return Err(Error::protocol(format!(
                "{} needs a round >= 1",
                self.kind().as_str()
            )));
        }
        Ok(())
    }
}

fn as_protocol(e: Error) -> Error {
    match e {
        Error::Protocol(_) => e,
        other => Error::protocol(other.to_string()),
    }
}

fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= MAX_ID_LEN
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(Error::protocol(format!(
            "identifier must be 1-{MAX_ID_LEN} characters of [A-Za-z0-9._-], got {id:?}"
        )))
    }
}

fn validate_text(text: &str) -> Result<()> {
    if text.len() > MAX_TEXT_LEN {
        return Err(Error::protocol(format!(
            "text field exceeds {MAX_TEXT_LEN} bytes"
        )));
    }
    Ok(())
}

/// A delta must look like the parameters of a layered model: consecutive
/// layers chain (`inputs[k+1] == outputs[k]`) and every layer has a bias.
fn validate_delta_layout(delta: &ParamDelta) -> Result<()> {
    if delta.layers.is_empty() {
        return Err(Error::protocol("delta has no layers"));
    }
    let mut prev_out: Option<usize> = None;
    for (k, layer) in delta.layers.iter().enumerate() {
        let outputs = layer.bias.len();
        if outputs == 0 || layer.weights.is_empty() || layer.weights.len() % outputs != 0 {
            return Err(Error::protocol(format!("delta layer {k} is malformed")));
        }
        let inputs = layer.weights.len() / outputs;
        if let Some(p) = prev_out {
            if p != inputs {
                return Err(Error::protocol(format!(
                    "delta layer {k} takes {inputs} inputs but layer {} has {p} outputs",
                    k - 1
                )));
            }
        }
        prev_out = Some(outputs);
    }
    Ok(())
}

// ---- JSON representation -------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    schema_version: u32,
    kind: String,
    round: u32,
    sender_id: String,
    payload: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HelloBody {
    tl_enabled: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WelcomeBody {
    total_rounds: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireLayer {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weights: String,
    bias: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireModel {
    version: u32,
    layers: Vec<WireLayer>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireTensors {
    inputs: usize,
    outputs: usize,
    weights: String,
    bias: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GlobalModelBody {
    model: WireModel,
    schedule: RoundSchedule,
    dp: Option<DpConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LocalUpdateBody {
    delta: Vec<WireTensors>,
    sample_count: u64,
    metrics: LocalMetrics,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RoundDoneBody {
    global_accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ErrorBody {
    code: String,
    detail: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ByeBody {
    reason: String,
}

/// Encodes values as little-endian `f32`, base64.
pub fn encode_f32(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    B64.encode(bytes)
}

/// Inverse of [`encode_f32`], checking the element count.
pub fn decode_f32(text: &str, expected: usize) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(text)
        .map_err(|e| Error::protocol(format!("bad base64 tensor: {e}")))?;
    if bytes.len() != expected * 4 {
        return Err(Error::protocol(format!(
            "tensor has {} bytes, expected {} values",
            bytes.len(),
            expected
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn wire_model(model: &ModelParams) -> WireModel {
    WireModel {
        version: model.version,
        layers: model
            .layers
            .iter()
            .map(|l| WireLayer {
                inputs: l.inputs,
                outputs: l.outputs,
                activation: l.activation,
                weights: encode_f32(&l.weights),
                bias: encode_f32(&l.bias),
            })
            .collect(),
    }
}

fn checked_area(inputs: usize, outputs: usize) -> Result<usize> {
    inputs
        .checked_mul(outputs)
        .filter(|n| *n <= MAX_FRAME_BYTES / 4)
        .ok_or_else(|| Error::protocol(format!("tensor shape {outputs}x{inputs} is too large")))
}

fn model_from_wire(w: WireModel) -> Result<ModelParams> {
    let layers = w
        .layers
        .into_iter()
        .map(|l| {
            let area = checked_area(l.inputs, l.outputs)?;
            Ok(Dense {
                inputs: l.inputs,
                outputs: l.outputs,
                weights: decode_f32(&l.weights, area)?,
                bias: decode_f32(&l.bias, l.outputs)?,
                activation: l.activation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::new(layers, w.version).map_err(as_protocol)
}

fn wire_delta(delta: &ParamDelta) -> Vec<WireTensors> {
    delta
        .layers
        .iter()
        .map(|t| {
            let outputs = t.bias.len();
            WireTensors {
                inputs: t.weights.len().checked_div(outputs).unwrap_or(0),
                outputs,
                weights: encode_f32(&t.weights),
                bias: encode_f32(&t.bias),
            }
        })
        .collect()
}

fn delta_from_wire(layers: Vec<WireTensors>, round: u32) -> Result<ParamDelta> {
    let layers = layers
        .into_iter()
        .map(|t| {
            let area = checked_area(t.inputs, t.outputs)?;
            Ok(LayerTensors {
                weights: decode_f32(&t.weights, area)?,
                bias: decode_f32(&t.bias, t.outputs)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ParamDelta { round, layers })
}

fn to_value<T: Serialize>(body: T) -> serde_json::Value {
    serde_json::to_value(body).expect("payload bodies are plain data")
}

fn from_value<T: for<'de> Deserialize<'de>>(kind: Kind, v: serde_json::Value) -> Result<T> {
    serde_json::from_value(v)
        .map_err(|e| Error::protocol(format!("invalid {} payload: {e}", kind.as_str())))
}

/// Serializes a validated message to its JSON body (no length prefix).
pub fn to_json(msg: &Message) -> Result<Vec<u8>> {
    msg.validate()?;
    let payload = match &msg.payload {
        Payload::Hello { tl_enabled } => to_value(HelloBody {
            tl_enabled: *tl_enabled,
        }),
        Payload::Welcome { total_rounds } => to_value(WelcomeBody {
            total_rounds: *total_rounds,
        }),
        Payload::GlobalModel { model, schedule, dp } => to_value(GlobalModelBody {
            model: wire_model(model),
            schedule: schedule.clone(),
            dp: *dp,
        }),
        Payload::LocalUpdate {
            delta,
            sample_count,
            metrics,
        } => to_value(LocalUpdateBody {
            delta: wire_delta(delta),
            sample_count: *sample_count,
            metrics: *metrics,
        }),
        Payload::RoundDone { global_accuracy } => to_value(RoundDoneBody {
            global_accuracy: *global_accuracy,
        }),
        Payload::Error { code, detail } => to_value(ErrorBody {
            code: code.clone(),
            detail: detail.clone(),
        }),
        Payload::Bye { reason } => to_value(ByeBody {
            reason: reason.clone(),
        }),
    };
    let env = Envelope {
        schema_version: SCHEMA_VERSION,
        kind: msg.kind().as_str().to_string(),
        round: msg.round,
        sender_id: msg.sender_id.clone(),
        payload,
    };
    serde_json::to_vec(&env).map_err(|e| Error::protocol(format!("serialize: {e}")))
}

/// Parses and validates a JSON body.
pub fn from_json(body: &[u8]) -> Result<Message> {
    let text = std::str::from_utf8(body).map_err(|_| Error::protocol("frame body is not UTF-8"))?;
    let env: Envelope =
        serde_json::from_str(text).map_err(|e| Error::protocol(format!("malformed message: {e}")))?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(Error::SchemaMismatch {
            got: env.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let kind = Kind::parse(&env.kind).ok_or_else(|| Error::UnknownKind(env.kind.clone()))?;
    let payload = match kind {
        Kind::Hello => {
            let b: HelloBody = from_value(kind, env.payload)?;
            Payload::Hello {
                tl_enabled: b.tl_enabled,
            }
        }
        Kind::Welcome => {
            let b: WelcomeBody = from_value(kind, env.payload)?;
            Payload::Welcome {
                total_rounds: b.total_rounds,
            }
        }
        Kind::GlobalModel => {
            let b: GlobalModelBody = from_value(kind, env.payload)?;
            Payload::GlobalModel {
                model: model_from_wire(b.model)?,
                schedule: b.schedule,
                dp: b.dp,
            }
        }
        Kind::LocalUpdate => {
            let b: LocalUpdateBody = from_value(kind, env.payload)?;
            Payload::LocalUpdate {
                delta: delta_from_wire(b.delta, env.round)?,
                sample_count: b.sample_count,
                metrics: b.metrics,
            }
        }
        Kind::RoundDone => {
            let b: RoundDoneBody = from_value(kind, env.payload)?;
            Payload::RoundDone {
                global_accuracy: b.global_accuracy,
            }
        }
        Kind::Error => {
            let b: ErrorBody = from_value(kind, env.payload)?;
            Payload::Error {
                code: b.code,
                detail: b.detail,
            }
        }
        Kind::Bye => {
            let b: ByeBody = from_value(kind, env.payload)?;
            Payload::Bye { reason: b.reason }
        }
    };
    let msg = Message {
        round: env.round,
        sender_id: env.sender_id,
        payload,
    };
    msg.validate()?;
    Ok(msg)
}

/// Encodes a message as a complete frame.
pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let body = to_json(msg)?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(Error::FrameLimit {
            size: body.len(),
            limit: MAX_FRAME_BYTES,
        });
    }
    let mut frame = Vec::with_capacity(4 + body.len());
    frame.extend_from_slice(&(body.len() as u32).to_be_bytes());
    frame.extend_from_slice(&body);
    Ok(frame)
}

/// Result of trying to decode a frame from the front of a buffer.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoded {
    /// More bytes are needed before a frame is complete.
    NeedMore,
    Frame { message: Message, consumed: usize },
}

/// Decodes the first frame in `bytes`, if complete.
pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    let Some(len) = frame_len(bytes)? else {
        return Ok(Decoded::NeedMore);
    };
    if bytes.len() < 4 + len {
        return Ok(Decoded::NeedMore);
    }
    let message = from_json(&bytes[4..4 + len])?;
    Ok(Decoded::Frame {
        message,
        consumed: 4 + len,
    })
}

/// Reads the length prefix, enforcing the frame limit.
pub fn frame_len(bytes: &[u8]) -> Result<Option<usize>> {
    if bytes.len() < 4 {
        return Ok(None);
    }
    let len = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    if len > MAX_FRAME_BYTES {
        return Err(Error::FrameLimit {
            size: len,
            limit: MAX_FRAME_BYTES,
        });
    }
    Ok(Some(len))
}
