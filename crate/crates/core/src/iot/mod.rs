//! Simulated smart home: scenario rules, user authentication, device
//! endpoints, the four control paths and the latency harness.

pub mod auth;
pub mod devices;
pub mod pipeline;
pub mod scaling;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::client::ACTION_CONFIDENCE_THRESHOLD;
use crate::data::ActivityLabel;
use crate::error::{Error, Result};
use crate::seed;
use auth::{AuthRegistry, Token};
use devices::{HomeState, ScenarioRule};
use pipeline::{run_pipeline, ActivityInput, ControlPath, Home, LatencyProfile, PipelineTrace, VirtualClock};
use scaling::{scaling_model, ScalingCalibration};

/// The configuration shipped with the crate.
pub const DEFAULT_CONFIG_TOML: &str = include_str!("../../assets/iot_default.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub path: ControlPath,
    pub activity: ActivityLabel,
    pub stages: LatencyProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BreakdownRow {
    pub activity: ActivityLabel,
    pub path: ControlPath,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub activity: ActivityLabel,
    pub paths: Vec<ControlPath>,
}

/// Who the harness acts as.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarnessUser {
    pub user: String,
    pub token: Token,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
}

fn default_confidence() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IotConfig {
    #[serde(default)]
    pub seed: u64,
    pub harness: HarnessUser,
    pub users: AuthRegistry,
    pub rules: Vec<ScenarioRule>,
    pub profiles: Vec<ProfileEntry>,
    pub breakdown: Vec<BreakdownRow>,
    pub comparison: Comparison,
    #[serde(default)]
    pub scaling: ScalingCalibration,
    #[serde(default = "default_max_clients")]
    pub max_clients: u32,
}

fn default_max_clients() -> u32 {
    100
}

impl Default for IotConfig {
    fn default() -> Self {
        Self::from_toml(DEFAULT_CONFIG_TOML).expect("shipped IoT config is valid")
    }
}

impl IotConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: IotConfig = toml::from_str(text).map_err(|e| Error::config(format!("IoT config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("IoT config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.rules {
            r.validate()?;
        }
        for (i, a) in self.rules.iter().enumerate() {
            if self.rules[..i].iter().any(|b| b.activity == a.activity) {
                return Err(Error::config(format!("two rules for {}", a.activity)));
            }
        }
        for (i, p) in self.profiles.iter().enumerate() {
            p.stages
                .validate_for(p.path)
                .map_err(|e| Error::config(format!("profile {}/{}: {e}", p.path, p.activity)))?;
            if self.profiles[..i].iter().any(|q| q.path == p.path && q.activity == p.activity) {
                return Err(Error::config(format!("two profiles for {}/{}", p.path, p.activity)));
            }
        }
        for row in &self.breakdown {
            self.profile(row.path, row.activity)?;
        }
        for &path in &self.comparison.paths {
            self.profile(path, self.comparison.activity)?;
        }
        if !(0.0..=1.0).contains(&self.harness.confidence) {
            return Err(Error::config("harness confidence must be in [0,1]"));
        }
        if self.max_clients < 1 {
            return Err(Error::config("max_clients must be >= 1"));
        }
        self.scaling.validate()
    }

    pub fn profile(&self, path: ControlPath, activity: ActivityLabel) -> Result<&LatencyProfile> {
        self.profiles
            .iter()
            .find(|p| p.path == path && p.activity == activity)
            .map(|p| &p.stages)
            .ok_or_else(|| Error::config(format!("no latency profile for {path}/{activity}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingRow {
    pub clients: u32,
    pub fl_seconds: f64,
    pub cl_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct LatencyReport {
    /// One trace per configured breakdown row.
    pub breakdown: Vec<PipelineTrace>,
    /// The comparison activity on each configured path.
    pub comparison: Vec<PipelineTrace>,
    pub scaling: Vec<ScalingRow>,
    pub home: HomeState,
}

/// Runs every configured scenario on one simulated home and virtual clock.
pub fn run_latency(config: &IotConfig) -> Result<LatencyReport> {
    config.validate()?;
    if config.harness.confidence < ACTION_CONFIDENCE_THRESHOLD {
        log::warn!("harness confidence is below the action threshold; no device will react");
    }
    let mut rng = seed::rng(seed::derive(config.seed, &[seed::tag("jitter")]));
    let mut clock = VirtualClock::new();
    let mut home = HomeState::default();
    let mut run = |activity: ActivityLabel, path: ControlPath| -> Result<PipelineTrace> {
        let input = ActivityInput {
            activity,
            confidence: config.harness.confidence,
            user: config.harness.user.clone(),
            token: config.harness.token.clone(),
        };
        run_pipeline(
            &input,
            path,
            config.profile(path, activity)?,
            Home {
                registry: &config.users,
                rules: &config.rules,
                state: &mut home,
                clock: &mut clock,
            },
            Some(&mut rng),
        )
    };
    let breakdown = config
        .breakdown
        .iter()
        .map(|r| run(r.activity, r.path))
        .collect::<Result<Vec<_>>>()?;
    let comparison = config
        .comparison
        .paths
        .iter()
        .map(|&p| run(config.comparison.activity, p))
        .collect::<Result<Vec<_>>>()?;
    let scaling = (1..=config.max_clients)
        .map(|n| {
            Ok(ScalingRow {
                clients: n,
                fl_seconds: scaling_model(ControlPath::LocalFl, n, &config.scaling)?,
                cl_seconds: scaling_model(ControlPath::RemoteCl, n, &config.scaling)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatencyReport {
        breakdown,
        comparison,
        scaling,
        home,
    })
}

/// Scaling CSV: `clients,fl_seconds,cl_seconds`.
pub fn write_scaling_csv<W: Write>(rows: &[ScalingRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(["clients", "fl_seconds", "cl_seconds"]).map_err(csv_err)?;
    for r in rows {
        out.write_record([r.clients.to_string(), r.fl_seconds.to_string(), r.cl_seconds.to_string()])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_parses_and_round_trips() {
        let cfg = IotConfig::default();
        assert_eq!(cfg.rules, devices::default_rules());
        let again = IotConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("{DEFAULT_CONFIG_TOML}\nbogus = 1\n");
        assert!(IotConfig::from_toml(&text).is_err());
    }
}
