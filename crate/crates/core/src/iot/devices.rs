//! Simulated home devices, their commands, and the activity → action rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::ActivityLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceId {
    SmartLight,
    SmartSpeaker,
    WifiRouter,
    LocalDatabase,
}

impl DeviceId {
    pub const ALL: [DeviceId; 4] = [
        DeviceId::SmartLight,
        DeviceId::SmartSpeaker,
        DeviceId::WifiRouter,
        DeviceId::LocalDatabase,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DeviceId::SmartLight => "smart_light",
            DeviceId::SmartSpeaker => "smart_speaker",
            DeviceId::WifiRouter => "wifi_router",
            DeviceId::LocalDatabase => "local_database",
        }
    }
}

impl fmt::Display for DeviceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A device command in `name` or `name(argument)` form, e.g. `light.on` or
/// `router.block_url(example.com)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Action {
    LightOn,
    LightOff,
    LightColor(String),
    SpeakerNotify(String),
    SpeakerPlayMedia(String),
    RouterBlockUrl(String),
    RouterShapeTraffic(String),
    DbRecordIntake,
}

impl Action {
    /// The device type that understands this command.
    pub fn device(&self) -> DeviceId {
        match self {
            Action::LightOn | Action::LightOff | Action::LightColor(_) => DeviceId::SmartLight,
            Action::SpeakerNotify(_) | Action::SpeakerPlayMedia(_) => DeviceId::SmartSpeaker,
            Action::RouterBlockUrl(_) | Action::RouterShapeTraffic(_) => DeviceId::WifiRouter,
            Action::DbRecordIntake => DeviceId::LocalDatabase,
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::LightOn => f.write_str("light.on"),
            Action::LightOff => f.write_str("light.off"),
            Action::LightColor(c) => write!(f, "light.color({c})"),
            Action::SpeakerNotify(m) => write!(f, "speaker.notify({m})"),
            Action::SpeakerPlayMedia(m) => write!(f, "speaker.play_media({m})"),
            Action::RouterBlockUrl(u) => write!(f, "router.block_url({u})"),
            Action::RouterShapeTraffic(t) => write!(f, "router.shape_traffic({t})"),
            Action::DbRecordIntake => f.write_str("db.record_intake"),
        }
    }
}

impl FromStr for Action {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, arg) = match s.find('(') {
            Some(open) if s.ends_with(')') => (&s[..open], Some(s[open + 1..s.len() - 1].trim())),
            Some(_) => return Err(Error::config(format!("malformed action '{s}'"))),
            None => (s, None),
        };
        let need = |arg: Option<&str>| -> Result<String> {
            match arg {
                Some(a) if !a.is_empty() => Ok(a.to_string()),
                _ => Err(Error::config(format!("action '{name}' needs an argument"))),
            }
        };
        let none = |arg: Option<&str>, a: Action| -> Result<Action> {
            match arg {
                None => Ok(a),
                Some(_) => Err(Error::config(format!("action '{name}' takes no argument"))),
            }
        };
        match name {
            "light.on" => none(arg, Action::LightOn),
            "light.off" => none(arg, Action::LightOff),
            "light.color" => Ok(Action::LightColor(need(arg)?)),
            "speaker.notify" => Ok(Action::SpeakerNotify(need(arg)?)),
            "speaker.play_media" => Ok(Action::SpeakerPlayMedia(need(arg)?)),
            "router.block_url" => Ok(Action::RouterBlockUrl(need(arg)?)),
            "router.shape_traffic" => Ok(Action::RouterShapeTraffic(need(arg)?)),
            "db.record_intake" => none(arg, Action::DbRecordIntake),
            _ => Err(Error::config(format!("unknown action '{name}'"))),
        }
    }
}

impl Serialize for Action {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Action {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LightState {
    pub on: bool,
    pub color: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SpeakerState {
    pub notifications: Vec<String>,
    pub now_playing: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RouterState {
    pub blocklist: BTreeSet<String>,
    /// Traffic class → number of times shaping was requested.
    pub shaping: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntakeRecord {
    pub user: String,
    pub timestamp_us: u64,
}

/// State of every device in one simulated home.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HomeState {
    pub light: LightState,
    pub speaker: SpeakerState,
    pub router: RouterState,
    pub intake_log: Vec<IntakeRecord>,
}

/// Applies `action` on `device`. Fails without touching the state if the
/// device does not understand the action.
pub fn device_endpoint(
    device: DeviceId,
    action: &Action,
    state: &mut HomeState,
    user: &str,
    now_us: u64,
) -> Result<()> {
    if action.device() != device {
        return Err(Error::Dispatch(format!("{device} does not support '{action}'")));
    }
    match action {
        Action::LightOn => state.light.on = true,
        Action::LightOff => state.light.on = false,
        Action::LightColor(c) => {
            state.light.on = true;
            state.light.color = Some(c.clone());
        }
        Action::SpeakerNotify(m) => state.speaker.notifications.push(m.clone()),
        Action::SpeakerPlayMedia(m) => state.speaker.now_playing = Some(m.clone()),
        Action::RouterBlockUrl(u) => {
            state.router.blocklist.insert(u.clone());
        }
        Action::RouterShapeTraffic(t) => *state.router.shaping.entry(t.clone()).or_default() += 1,
        Action::DbRecordIntake => state.intake_log.push(IntakeRecord {
            user: user.to_string(),
            timestamp_us: now_us,
        }),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Effect {
    pub device: DeviceId,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioRule {
    pub activity: ActivityLabel,
    pub effects: Vec<Effect>,
}

impl ScenarioRule {
    pub fn validate(&self) -> Result<()> {
        if self.effects.is_empty() {
            return Err(Error::config(format!("rule for {} has no effects", self.activity)));
        }
        for e in &self.effects {
            if e.action.device() != e.device {
                return Err(Error::config(format!(
                    "rule for {}: {} does not support '{}'",
                    self.activity, e.device, e.action
                )));
            }
        }
        Ok(())
    }
}

fn effect(device: DeviceId, action: Action) -> Effect {
    Effect { device, action }
}

/// One rule per activity: reading lamp, water intake log plus reminder,
/// harmful-site blocking, phone traffic management, and media while
/// washing dishes.
pub fn default_rules() -> Vec<ScenarioRule> {
    use ActivityLabel::*;
    vec![
        ScenarioRule {
            activity: Reading,
            effects: vec![effect(DeviceId::SmartLight, Action::LightOn)],
        },
        ScenarioRule {
            activity: DrinkingWater,
            effects: vec![
                effect(DeviceId::LocalDatabase, Action::DbRecordIntake),
                effect(DeviceId::SmartSpeaker, Action::SpeakerNotify("water intake recorded".into())),
            ],
        },
        ScenarioRule {
            activity: UsingLaptop,
            effects: vec![effect(DeviceId::WifiRouter, Action::RouterBlockUrl("harmful.example".into()))],
        },
        ScenarioRule {
            activity: UsingMobilePhone,
            effects: vec![effect(DeviceId::WifiRouter, Action::RouterShapeTraffic("mobile".into()))],
        },
        ScenarioRule {
            activity: WashingDishes,
            effects: vec![effect(DeviceId::SmartSpeaker, Action::SpeakerPlayMedia("video".into()))],
        },
    ]
}
