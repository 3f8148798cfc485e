//! Local user authentication: per-user 128-bit shared secrets and
//! per-user device permissions. Unknown users are denied by default.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use subtle::ConstantTimeEq;

use super::devices::DeviceId;
use crate::error::{Error, Result};

/// A 128-bit shared secret, written as 32 hex digits.
#[derive(Clone, PartialEq, Eq)]
pub struct Token([u8; 16]);

impl Token {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 16];
        rng.fill(&mut bytes);
        Token(bytes)
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Token(bytes)
    }

    fn matches(&self, other: &Token) -> bool {
        self.0.ct_eq(&other.0).into()
    }
}

// Secrets stay out of logs.
impl fmt::Debug for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Token(..)")
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for Token {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut bytes = [0u8; 16];
        hex::decode_to_slice(s, &mut bytes)
            .map_err(|e| Error::config(format!("token must be 32 hex digits: {e}")))?;
        Ok(Token(bytes))
    }
}

impl Serialize for Token {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserEntry {
    pub user: String,
    pub token: Token,
    pub devices: BTreeSet<DeviceId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenyReason {
    UnknownUser,
    BadToken,
    NoPermission,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::UnknownUser => "unknown_user",
            DenyReason::BadToken => "bad_token",
            DenyReason::NoPermission => "no_permission",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuthDecision {
    Allow,
    Deny(DenyReason),
}

impl AuthDecision {
    pub fn is_allow(self) -> bool {
        self == AuthDecision::Allow
    }
}

impl fmt::Display for AuthDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuthDecision::Allow => f.write_str("allow"),
            AuthDecision::Deny(r) => write!(f, "deny({})", r.as_str()),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuthRegistry {
    users: BTreeMap<String, UserEntry>,
}

impl AuthRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<UserEntry>) -> Result<Self> {
        let mut reg = Self::new();
        for e in entries {
            if reg.users.contains_key(&e.user) {
                return Err(Error::config(format!("user '{}' is registered twice", e.user)));
            }
            reg.users.insert(e.user.clone(), e);
        }
        Ok(reg)
    }

    pub fn entries(&self) -> impl Iterator<Item = &UserEntry> {
        self.users.values()
    }

    pub fn register(&mut self, user: impl Into<String>, token: Token, devices: impl IntoIterator<Item = DeviceId>) {
        let user = user.into();
        self.users.insert(
            user.clone(),
            UserEntry {
                user,
                token,
                devices: devices.into_iter().collect(),
            },
        );
    }

    /// The token is checked before the device so a wrong token never
    /// reveals which devices a user may control.
    pub fn authenticate(&self, user: &str, device: DeviceId, token: &Token) -> AuthDecision {
        let Some(entry) = self.users.get(user) else {
            return AuthDecision::Deny(DenyReason::UnknownUser);
        };
        if !entry.token.matches(token) {
            return AuthDecision::Deny(DenyReason::BadToken);
        }
        if !entry.devices.contains(&device) {
            return AuthDecision::Deny(DenyReason::NoPermission);
        }
        AuthDecision::Allow
    }
}

impl Serialize for AuthRegistry {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.users.values())
    }
}

impl<'de> Deserialize<'de> for AuthRegistry {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let entries = Vec::<UserEntry>::deserialize(d)?;
        AuthRegistry::from_entries(entries).map_err(serde::de::Error::custom)
    }
}
