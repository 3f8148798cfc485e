//! The detect → authenticate → act pipeline over a virtual clock.
//!
//! Stage durations come from a [`LatencyProfile`]: capture (T_C), image
//! transfer to the cloud (T_F), detection including authentication (T_A),
//! the cloud control-message hop (T_M) and the device reaction (T_R).
//! Local paths have no T_F or T_M.

use std::fmt;
use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::auth::{AuthDecision, AuthRegistry, DenyReason, Token};
use super::devices::{device_endpoint, Effect, HomeState, ScenarioRule};
use crate::client::ACTION_CONFIDENCE_THRESHOLD;
use crate::data::ActivityLabel;
use crate::error::{Error, Result};

/// Simulated time in whole microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VirtualClock {
    now_us: u64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now_us(&self) -> u64 {
        self.now_us
    }

    pub fn advance(&mut self, us: u64) {
        self.now_us += us;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlPath {
    /// Classification, authentication and control all on the home server.
    LocalFl,
    /// FL classification at home, control through a remote server.
    RemoteFl,
    /// Images go to a cloud classifier, which also controls the device.
    RemoteCl,
    /// As `RemoteCl`, with authentication and triggering via a third-party
    /// trigger-action service.
    RemoteClIfttt,
}

impl ControlPath {
    pub const ALL: [ControlPath; 4] = [
        ControlPath::LocalFl,
        ControlPath::RemoteFl,
        ControlPath::RemoteCl,
        ControlPath::RemoteClIfttt,
    ];

    pub fn is_remote(self) -> bool {
        self != ControlPath::LocalFl
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ControlPath::LocalFl => "local_fl",
            ControlPath::RemoteFl => "remote_fl",
            ControlPath::RemoteCl => "remote_cl",
            ControlPath::RemoteClIfttt => "remote_cl_ifttt",
        }
    }
}

impl fmt::Display for ControlPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    Capture,
    Transfer,
    Detect,
    Message,
    React,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::Capture, Stage::Transfer, Stage::Detect, Stage::Message, Stage::React];

    pub fn field(self) -> &'static str {
        match self {
            Stage::Capture => "t_capture",
            Stage::Transfer => "t_transfer",
            Stage::Detect => "t_detect",
            Stage::Message => "t_message",
            Stage::React => "t_react",
        }
    }

    pub fn column(self) -> &'static str {
        match self {
            Stage::Capture => "T_C",
            Stage::Transfer => "T_F",
            Stage::Detect => "T_A",
            Stage::Message => "T_M",
            Stage::React => "T_R",
        }
    }

    /// Position in [`PipelineTrace::stages_us`].
    pub fn index(self) -> usize {
        self as usize
    }
}

/// Optional per-stage jitter standard deviations, in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Jitter {
    pub t_capture: f64,
    pub t_transfer: f64,
    pub t_detect: f64,
    pub t_message: f64,
    pub t_react: f64,
}

impl Jitter {
    fn get(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Capture => self.t_capture,
            Stage::Transfer => self.t_transfer,
            Stage::Detect => self.t_detect,
            Stage::Message => self.t_message,
            Stage::React => self.t_react,
        }
    }
}

/// Configured stage durations in seconds. `t_transfer` and `t_message`
/// must be set for remote paths and absent or zero for the local path.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProfile {
    pub t_capture: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_transfer: Option<f64>,
    pub t_detect: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_message: Option<f64>,
    pub t_react: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jitter_std: Option<Jitter>,
}

impl LatencyProfile {
    pub fn new(t_capture: f64, t_transfer: Option<f64>, t_detect: f64, t_message: Option<f64>, t_react: f64) -> Self {
        Self {
            t_capture,
            t_transfer,
            t_detect,
            t_message,
            t_react,
            jitter_std: None,
        }
    }

    pub fn zero(path: ControlPath) -> Self {
        let remote = path.is_remote().then_some(0.0);
        Self::new(0.0, remote, 0.0, remote, 0.0)
    }

    pub fn stage(&self, stage: Stage) -> Option<f64> {
        match stage {
            Stage::Capture => Some(self.t_capture),
            Stage::Transfer => self.t_transfer,
            Stage::Detect => Some(self.t_detect),
            Stage::Message => self.t_message,
            Stage::React => Some(self.t_react),
        }
    }

    pub fn set_stage(&mut self, stage: Stage, value: f64) {
        match stage {
            Stage::Capture => self.t_capture = value,
            Stage::Transfer => self.t_transfer = Some(value),
            Stage::Detect => self.t_detect = value,
            Stage::Message => self.t_message = Some(value),
            Stage::React => self.t_react = value,
        }
    }

    /// Stage durations in microseconds for `path`.
    pub fn durations_us(&self, path: ControlPath) -> Result<[u64; 5]> {
        let mut out = [0u64; 5];
        for stage in Stage::ALL {
            let remote_only = matches!(stage, Stage::Transfer | Stage::Message);
            let value = match (self.stage(stage), remote_only, path.is_remote()) {
                (Some(v), _, _) => v,
                (None, true, false) => 0.0,
                (None, _, _) => {
                    return Err(Error::config(format!(
                        "latency profile for {path} is missing stage {} ({})",
                        stage.field(),
                        stage.column()
                    )))
                }
            };
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::config(format!(
                    "stage {} must be a finite number >= 0, got {value}",
                    stage.field()
                )));
            }
            if remote_only && !path.is_remote() && value != 0.0 {
                return Err(Error::config(format!(
                    "{path} has no {} stage but the profile sets {} = {value}",
                    stage.column(),
                    stage.field()
                )));
            }
            out[stage.index()] = seconds_to_us(value);
        }
        if let Some(j) = &self.jitter_std {
            for stage in Stage::ALL {
                let s = j.get(stage);
                if !(s >= 0.0 && s.is_finite()) {
                    return Err(Error::config(format!("jitter for {} must be >= 0", stage.field())));
                }
            }
        }
        Ok(out)
    }

    pub fn validate_for(&self, path: ControlPath) -> Result<()> {
        self.durations_us(path).map(|_| ())
    }
}

fn seconds_to_us(s: f64) -> u64 {
    (s * 1e6).round() as u64
}

/// What the camera saw, as classified, and who is asking.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivityInput {
    pub activity: ActivityLabel,
    pub confidence: f64,
    pub user: String,
    pub token: Token,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Dispatched,
    LowConfidence,
    NoRule,
    Denied(DenyReason),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineTrace {
    pub path: ControlPath,
    pub activity: ActivityLabel,
    /// Measured stage durations in microseconds, in [`Stage`] order.
    pub stages_us: [u64; 5],
    pub user: String,
    pub decision: Option<AuthDecision>,
    pub outcome: Outcome,
    pub dispatched: Vec<Effect>,
    pub started_us: u64,
    pub finished_us: u64,
}

impl PipelineTrace {
    pub fn stage_seconds(&self, stage: Stage) -> f64 {
        self.stages_us[stage.index()] as f64 / 1e6
    }

    pub fn total_us(&self) -> u64 {
        self.stages_us.iter().sum()
    }

    pub fn total_seconds(&self) -> f64 {
        self.total_us() as f64 / 1e6
    }
}

/// Everything a pipeline run needs besides its input.
pub struct Home<'a> {
    pub registry: &'a AuthRegistry,
    pub rules: &'a [ScenarioRule],
    pub state: &'a mut HomeState,
    pub clock: &'a mut VirtualClock,
}

/// Runs one activity through `path`. Device state changes only when every
/// device the rule touches has authorised the user.
pub fn run_pipeline<R: Rng + ?Sized>(
    input: &ActivityInput,
    path: ControlPath,
    profile: &LatencyProfile,
    home: Home<'_>,
    rng: Option<&mut R>,
) -> Result<PipelineTrace> {
    let planned = profile.durations_us(path)?;
    let jittered = match (profile.jitter_std, rng) {
        (Some(j), Some(rng)) => {
            let mut out = planned;
            for stage in Stage::ALL {
                let std = j.get(stage);
                if std > 0.0 && out[stage.index()] > 0 {
                    let z: f64 = rng.sample(StandardNormal);
                    let s = (out[stage.index()] as f64 / 1e6 + std * z).max(0.0);
                    out[stage.index()] = seconds_to_us(s);
                }
            }
            out
        }
        _ => planned,
    };

    let started_us = home.clock.now_us();
    let mut stages_us = [0u64; 5];
    let mut run_stage = |stage: Stage, clock: &mut VirtualClock| {
        let d = jittered[stage.index()];
        clock.advance(d);
        stages_us[stage.index()] = d;
    };

    run_stage(Stage::Capture, home.clock);
    if path.is_remote() {
        run_stage(Stage::Transfer, home.clock);
    }
    run_stage(Stage::Detect, home.clock);

    let rule = home.rules.iter().find(|r| r.activity == input.activity);
    let (outcome, decision) = if input.confidence < ACTION_CONFIDENCE_THRESHOLD {
        (Outcome::LowConfidence, None)
    } else if let Some(rule) = rule {
        let decision = rule
            .effects
            .iter()
            .map(|e| home.registry.authenticate(&input.user, e.device, &input.token))
            .find(|d| !d.is_allow())
            .unwrap_or(AuthDecision::Allow);
        match decision {
            AuthDecision::Allow => (Outcome::Dispatched, Some(decision)),
            AuthDecision::Deny(r) => (Outcome::Denied(r), Some(decision)),
        }
    } else {
        (Outcome::NoRule, None)
    };

    let mut dispatched = Vec::new();
    if outcome == Outcome::Dispatched {
        if path.is_remote() {
            run_stage(Stage::Message, home.clock);
        }
        run_stage(Stage::React, home.clock);
        let effects = &rule.expect("dispatch implies a rule").effects;
        // Apply to a copy so a failing effect leaves the home untouched.
        let mut next = home.state.clone();
        for e in effects {
            device_endpoint(e.device, &e.action, &mut next, &input.user, home.clock.now_us())?;
        }
        *home.state = next;
        dispatched = effects.clone();
    }

    Ok(PipelineTrace {
        path,
        activity: input.activity,
        stages_us,
        user: input.user.clone(),
        decision,
        outcome,
        dispatched,
        started_us,
        finished_us: home.clock.now_us(),
    })
}

/// Trace CSV: `path,activity,T_C,T_F,T_A,T_M,T_R,total` in seconds.
pub fn write_traces_csv<W: Write>(traces: &[PipelineTrace], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header = vec!["path", "activity"];
    header.extend(Stage::ALL.iter().map(|s| s.column()));
    header.push("total");
    out.write_record(&header).map_err(csv_err)?;
    for t in traces {
        let mut row = vec![t.path.to_string(), t.activity.to_string()];
        row.extend(Stage::ALL.iter().map(|s| format_seconds(t.stages_us[s.index()])));
        row.push(format_seconds(t.total_us()));
        out.write_record(&row).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Microseconds as seconds, shortest exact decimal.
pub fn format_seconds(us: u64) -> String {
    format!("{}", us as f64 / 1e6)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iot::devices::{default_rules, DeviceId};

    fn home_fixture() -> (AuthRegistry, Vec<ScenarioRule>, Token) {
        let token = Token::from_bytes([7; 16]);
        let mut reg = AuthRegistry::new();
        reg.register("alice", token.clone(), DeviceId::ALL);
        (reg, default_rules(), token)
    }

    fn run(
        input: &ActivityInput,
        path: ControlPath,
        profile: &LatencyProfile,
        reg: &AuthRegistry,
        rules: &[ScenarioRule],
        state: &mut HomeState,
    ) -> PipelineTrace {
        let mut clock = VirtualClock::new();
        let home = Home {
            registry: reg,
            rules,
            state,
            clock: &mut clock,
        };
        run_pipeline::<rand_chacha::ChaCha8Rng>(input, path, profile, home, None).unwrap()
    }

    #[test]
    fn local_reading_total() {
        let (reg, rules, token) = home_fixture();
        let input = ActivityInput {
            activity: ActivityLabel::Reading,
            confidence: 0.9,
            user: "alice".into(),
            token,
        };
        let mut state = HomeState::default();
        let p = LatencyProfile::new(0.37, None, 0.38, None, 0.06);
        let t = run(&input, ControlPath::LocalFl, &p, &reg, &rules, &mut state);
        assert_eq!(t.total_seconds(), 0.81);
        assert_eq!(t.stages_us[Stage::Transfer.index()], 0);
        assert!(state.light.on);
    }

    #[test]
    fn remote_washing_dishes_total() {
        let (reg, rules, token) = home_fixture();
        let input = ActivityInput {
            activity: ActivityLabel::WashingDishes,
            confidence: 0.9,
            user: "alice".into(),
            token,
        };
        let mut state = HomeState::default();
        let p = LatencyProfile::new(0.39, Some(0.64), 0.38, Some(0.01), 12.63);
        let t = run(&input, ControlPath::RemoteCl, &p, &reg, &rules, &mut state);
        assert_eq!(t.total_seconds(), 14.05);
    }

    #[test]
    fn denied_request_changes_nothing() {
        let (reg, rules, _) = home_fixture();
        let input = ActivityInput {
            activity: ActivityLabel::Reading,
            confidence: 0.9,
            user: "alice".into(),
            token: Token::from_bytes([0; 16]),
        };
        let mut state = HomeState::default();
        let p = LatencyProfile::new(0.37, None, 0.38, None, 0.06);
        let t = run(&input, ControlPath::LocalFl, &p, &reg, &rules, &mut state);
        assert_eq!(t.outcome, Outcome::Denied(DenyReason::BadToken));
        assert!(t.dispatched.is_empty());
        assert_eq!(state, HomeState::default());
    }

    #[test]
    fn missing_remote_stage_is_named() {
        let p = LatencyProfile::new(0.37, None, 0.38, Some(0.1), 0.06);
        let err = p.validate_for(ControlPath::RemoteFl).unwrap_err().to_string();
        assert!(err.contains("t_transfer"), "{err}");
        let local = LatencyProfile::new(0.37, Some(0.2), 0.38, None, 0.06);
        assert!(local.validate_for(ControlPath::LocalFl).is_err());
    }
}
