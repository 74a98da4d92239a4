// SPDX-License-Identifier: Apache-2.0

//! Trusted third party: UAV and CI registries, and invasion verification
//! with conditional disclosure of true positions.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{open_location_report, TtpKeyPair, TtpPublicKey};
use crate::geo::{distance_3d, to_enu, EnuPosition, GeoPosition};
use crate::messages::RemoteIdMessage;

#[derive(Debug, Error)]
pub enum TtpError {
    #[error("invalid registration: {0}")]
    Validation(String),
    #[error("operator {0} is not registered")]
    UnregisteredOperator(CiId),
    #[error("no messages to verify")]
    EmptyReport,
    #[error("registry I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("registry format: {0}")]
    Format(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CiId(pub u64);

impl std::fmt::Display for CiId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UavRecord {
    pub id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CiRecord {
    pub ci_id: CiId,
    pub pos: GeoPosition,
    pub delta_m: f64,
}

/// The UAV and CI tables. Serialized as `{"uavs": [...], "cis": [...]}`,
/// each array sorted by key.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    uavs: BTreeMap<String, UavRecord>,
    cis: BTreeMap<CiId, CiRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryFile {
    uavs: Vec<UavRecord>,
    cis: Vec<CiRecord>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    /// Inserts or refreshes a UAV entry.
    pub fn register_uav(&mut self, id: &str) -> Result<(), TtpError> {
        if id.is_empty() {
            return Err(TtpError::Validation("empty UAV identifier".into()));
        }
        self.uavs.insert(id.to_string(), UavRecord { id: id.to_string() });
        Ok(())
    }

    pub fn register_ci(&mut self, pos: GeoPosition, delta_m: f64) -> Result<CiId, TtpError> {
        if !(delta_m.is_finite() && delta_m > 0.0) {
            return Err(TtpError::Validation(format!("no-fly radius must be > 0, got {delta_m}")));
        }
        let ci_id = CiId(self.cis.keys().next_back().map_or(1, |k| k.0 + 1));
        self.cis.insert(ci_id, CiRecord { ci_id, pos, delta_m });
        Ok(ci_id)
    }

    pub fn uav(&self, id: &str) -> Option<&UavRecord> {
        self.uavs.get(id)
    }

    pub fn ci(&self, ci_id: CiId) -> Option<&CiRecord> {
        self.cis.get(&ci_id)
    }

    pub fn uav_count(&self) -> usize {
        self.uavs.len()
    }

    pub fn ci_count(&self) -> usize {
        self.cis.len()
    }

    pub fn to_json(&self) -> String {
        let f = RegistryFile {
            uavs: self.uavs.values().cloned().collect(),
            cis: self.cis.values().cloned().collect(),
        };
        serde_json::to_string_pretty(&f).expect("registry always serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TtpError> {
        let f: RegistryFile = serde_json::from_str(text)?;
        let mut reg = Registry::new();
        for u in f.uavs {
            reg.register_uav(&u.id)?;
        }
        for c in f.cis {
            if !(c.delta_m.is_finite() && c.delta_m > 0.0) {
                return Err(TtpError::Validation(format!("CI {} has radius {}", c.ci_id, c.delta_m)));
            }
            if reg.cis.insert(c.ci_id, c.clone()).is_some() {
                return Err(TtpError::Validation(format!("duplicate CI id {}", c.ci_id)));
            }
        }
        Ok(reg)
    }

    pub fn load(path: &Path) -> Result<Self, TtpError> {
        Registry::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TtpError> {
        let mut s = self.to_json();
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }
}

/// One disclosed true fix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisclosedFix {
    /// Position of the message in the submitted list.
    pub message_index: usize,
    pub id: String,
    pub position: GeoPosition,
}

/// Outcome of a verification request. The negative carries nothing, so it
/// looks the same whichever check failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum Disclosure {
    Confirmed { fixes: Vec<DisclosedFix> },
    NotVerified,
}

impl Disclosure {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("disclosure always serializes")
    }
}

/// Registries plus the deployment key pair.
#[derive(Debug, Clone)]
pub struct Ttp {
    registry: Registry,
    keys: TtpKeyPair,
}

impl Ttp {
    pub fn new(registry: Registry, keys: TtpKeyPair) -> Self {
        Ttp { registry, keys }
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn into_registry(self) -> Registry {
        self.registry
    }

    pub fn public_key(&self) -> TtpPublicKey {
        self.keys.public()
    }

    /// Registers (or refreshes) a UAV and hands back the key its reports
    /// must be sealed for.
    pub fn register_uav(&mut self, id: &str) -> Result<TtpPublicKey, TtpError> {
        self.registry.register_uav(id)?;
        Ok(self.keys.public())
    }

    pub fn register_ci(&mut self, pos: GeoPosition, delta_m: f64) -> Result<CiId, TtpError> {
        self.registry.register_ci(pos, delta_m)
    }

    pub fn verify_report(
        &self,
        ci_id: CiId,
        messages: &[RemoteIdMessage],
    ) -> Result<Disclosure, TtpError> {
        verify_report(&self.registry, &self.keys, ci_id, messages)
    }
}

/// Checks an invasion claim in three gates: the operator is registered, the
/// broadcast (obfuscated) position is inside its no-fly zone, and the
/// decrypted true position is inside it too. Only messages passing all three
/// are disclosed.
pub fn verify_report(
    registry: &Registry,
    keys: &TtpKeyPair,
    ci_id: CiId,
    messages: &[RemoteIdMessage],
) -> Result<Disclosure, TtpError> {
    let ci = registry.ci(ci_id).ok_or(TtpError::UnregisteredOperator(ci_id))?;
    if messages.is_empty() {
        return Err(TtpError::EmptyReport);
    }
    let inside = |p: &GeoPosition| {
        distance_3d(&to_enu(p, &ci.pos), &EnuPosition::ORIGIN) < ci.delta_m
    };

    let mut fixes = Vec::new();
    for (i, msg) in messages.iter().enumerate() {
        if !inside(&msg.position()) {
            continue;
        }
        let (id, true_pos) = match open_location_report(msg.report(), keys) {
            Ok(v) => v,
            Err(e) => {
                log::warn!("dropping message {i} from CI {ci_id}: {e}");
                continue;
            }
        };
        if inside(&true_pos) {
            fixes.push(DisclosedFix { message_index: i, id, position: true_pos });
        }
    }
    Ok(if fixes.is_empty() { Disclosure::NotVerified } else { Disclosure::Confirmed { fixes } })
}
