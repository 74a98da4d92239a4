// SPDX-License-Identifier: Apache-2.0

//! RemoteID broadcast records and the `.rid` newline-delimited JSON codec.
//!
//! One record per line, fields in a fixed order:
//!
//! ```text
//! {"pseudonym":"..","timestamp_us":..,"lat_deg":..,"lon_deg":..,"alt_m":..,
//!  "v_x":..,"v_y":..,"v_z":..,"emergency":false,
//!  "report":{"wrapped_key":"<base64>","ciphertext":"<base64>"}}
//! ```
//!
//! Positions live on a fixed-point grid (micro-degrees, millimetres), so a
//! decoded record compares equal to the one that was encoded.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::EncryptedLocationReport;
use crate::geo::GeoPosition;

/// Longest allowed gap between consecutive broadcasts of one flight.
pub const MAX_BROADCAST_PERIOD_US: u64 = 1_000_000;

#[derive(Debug, Error)]
pub enum MessageError {
    #[error("invalid message: {0}")]
    Validation(String),
    #[error("decode error at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One RemoteID broadcast.
#[derive(Debug, Clone, PartialEq)]
pub struct RemoteIdMessage {
    pseudonym: String,
    timestamp_us: u64,
    lat_udeg: i64,
    lon_udeg: i64,
    alt_mm: i64,
    velocity: [f64; 3],
    emergency: bool,
    report: EncryptedLocationReport,
}

impl RemoteIdMessage {
    /// Validates a single record in isolation. Cross-message rules live in
    /// [`FlightValidator`].
    pub fn new(
        pseudonym: impl Into<String>,
        timestamp_us: u64,
        position: &GeoPosition,
        velocity: [f64; 3],
        emergency: bool,
        report: EncryptedLocationReport,
    ) -> Result<Self, MessageError> {
        let pseudonym = pseudonym.into();
        if pseudonym.is_empty() {
            return Err(MessageError::Validation("empty pseudonym".into()));
        }
        if velocity.iter().any(|v| !v.is_finite()) {
            return Err(MessageError::Validation(format!("non-finite velocity {velocity:?}")));
        }
        let (lat_udeg, lon_udeg, alt_mm) = position.to_fixed();
        // Rounding onto the grid can step past +/-90 or onto -180.
        GeoPosition::from_fixed(lat_udeg, lon_udeg, alt_mm)
            .map_err(|e| MessageError::Validation(e.to_string()))?;
        let lon_udeg = if lon_udeg == -180_000_000 { 180_000_000 } else { lon_udeg };
        Ok(RemoteIdMessage {
            pseudonym,
            timestamp_us,
            lat_udeg,
            lon_udeg,
            alt_mm,
            velocity,
            emergency,
            report,
        })
    }

    pub fn pseudonym(&self) -> &str {
        &self.pseudonym
    }

    pub fn timestamp_us(&self) -> u64 {
        self.timestamp_us
    }

    pub fn position(&self) -> GeoPosition {
        GeoPosition::from_fixed(self.lat_udeg, self.lon_udeg, self.alt_mm)
            .expect("validated at construction")
    }

    pub fn velocity(&self) -> [f64; 3] {
        self.velocity
    }

    pub fn emergency(&self) -> bool {
        self.emergency
    }

    pub fn report(&self) -> &EncryptedLocationReport {
        &self.report
    }
}

/// Enforces per-pseudonym ordering and the broadcast cadence while a
/// flight's messages are assembled.
#[derive(Debug, Default)]
pub struct FlightValidator {
    last: HashMap<String, u64>,
    max_period_us: Option<u64>,
}

impl FlightValidator {
    /// Strictly increasing timestamps and at most one second between
    /// consecutive broadcasts of the same pseudonym.
    pub fn broadcast() -> Self {
        FlightValidator { last: HashMap::new(), max_period_us: Some(MAX_BROADCAST_PERIOD_US) }
    }

    /// Strictly increasing timestamps only. Received traces have gaps.
    pub fn ordering_only() -> Self {
        FlightValidator::default()
    }

    pub fn check(&mut self, msg: &RemoteIdMessage) -> Result<(), MessageError> {
        if let Some(&prev) = self.last.get(msg.pseudonym()) {
            if msg.timestamp_us <= prev {
                return Err(MessageError::Validation(format!(
                    "timestamp {} of {} does not advance past {prev}",
                    msg.timestamp_us, msg.pseudonym
                )));
            }
            if let Some(max) = self.max_period_us {
                if msg.timestamp_us - prev > max {
                    return Err(MessageError::Validation(format!(
                        "gap of {} us for {} exceeds the {max} us broadcast period",
                        msg.timestamp_us - prev,
                        msg.pseudonym
                    )));
                }
            }
        }
        self.last.insert(msg.pseudonym.clone(), msg.timestamp_us);
        Ok(())
    }
}

/// Assembles and validates a broadcast.
pub fn build_message(
    validator: &mut FlightValidator,
    pseudonym: &str,
    t_us: u64,
    obfuscated: &GeoPosition,
    velocity: [f64; 3],
    emergency: bool,
    report: EncryptedLocationReport,
) -> Result<RemoteIdMessage, MessageError> {
    let msg = RemoteIdMessage::new(pseudonym, t_us, obfuscated, velocity, emergency, report)?;
    validator.check(&msg)?;
    Ok(msg)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireReport {
    #[serde(with = "b64")]
    wrapped_key: Vec<u8>,
    #[serde(with = "b64")]
    ciphertext: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireMessage {
    pseudonym: String,
    timestamp_us: u64,
    lat_deg: f64,
    lon_deg: f64,
    alt_m: f64,
    v_x: f64,
    v_y: f64,
    v_z: f64,
    emergency: bool,
    report: WireReport,
}

mod b64 {
    use super::*;
    use serde::{de::Error, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s.as_bytes()).map_err(|e| D::Error::custom(format!("bad base64: {e}")))
    }
}

fn fixed_to_deg(v: i64) -> f64 {
    v as f64 / 1e6
}

fn fixed_to_m(v: i64) -> f64 {
    v as f64 / 1e3
}

/// One JSON record, without the trailing newline.
pub fn encode(msg: &RemoteIdMessage) -> String {
    let wire = WireMessage {
        pseudonym: msg.pseudonym.clone(),
        timestamp_us: msg.timestamp_us,
        lat_deg: fixed_to_deg(msg.lat_udeg),
        lon_deg: fixed_to_deg(msg.lon_udeg),
        alt_m: fixed_to_m(msg.alt_mm),
        v_x: msg.velocity[0],
        v_y: msg.velocity[1],
        v_z: msg.velocity[2],
        emergency: msg.emergency,
        report: WireReport {
            wrapped_key: msg.report.wrapped_key().to_vec(),
            ciphertext: msg.report.ciphertext().to_vec(),
        },
    };
    serde_json::to_string(&wire).expect("wire records always serialize")
}

fn json_offset(text: &str, e: &serde_json::Error) -> usize {
    // serde_json reports 1-based line/column; column counts bytes.
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        if i + 1 == e.line() {
            return offset + e.column().saturating_sub(1);
        }
        offset += line.len();
    }
    text.len()
}

/// Decodes exactly one record. Trailing whitespace is allowed.
pub fn decode(text: &str) -> Result<RemoteIdMessage, MessageError> {
    let wire: WireMessage = serde_json::from_str(text).map_err(|e| MessageError::Decode {
        offset: json_offset(text, &e),
        reason: e.to_string(),
    })?;
    let invalid = |reason: String| MessageError::Decode { offset: 0, reason };
    let pos = GeoPosition::new(wire.lat_deg, wire.lon_deg, wire.alt_m)
        .map_err(|e| invalid(e.to_string()))?;
    let report = EncryptedLocationReport::from_parts(
        wire.report.wrapped_key,
        wire.report.ciphertext,
    )
    .map_err(|e| invalid(e.to_string()))?;
    RemoteIdMessage::new(
        wire.pseudonym,
        wire.timestamp_us,
        &pos,
        [wire.v_x, wire.v_y, wire.v_z],
        wire.emergency,
        report,
    )
    .map_err(|e| invalid(e.to_string()))
}

pub fn encode_bytes(msg: &RemoteIdMessage) -> Vec<u8> {
    let mut s = encode(msg);
    s.push('\n');
    s.into_bytes()
}

pub fn decode_bytes(bytes: &[u8]) -> Result<RemoteIdMessage, MessageError> {
    let text = std::str::from_utf8(bytes).map_err(|e| MessageError::Decode {
        offset: e.valid_up_to(),
        reason: "record is not UTF-8".into(),
    })?;
    decode(text)
}

/// Writes one record per line.
pub fn write_trace<W: Write>(mut w: W, msgs: &[RemoteIdMessage]) -> std::io::Result<()> {
    for m in msgs {
        w.write_all(&encode_bytes(m))?;
    }
    w.flush()
}

/// Reads a `.rid` trace. Blank lines are skipped; offsets in errors are
/// relative to the start of the stream. Timestamps must increase per
/// pseudonym.
pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<RemoteIdMessage>, MessageError> {
    let mut out = Vec::new();
    let mut validator = FlightValidator::ordering_only();
    let mut offset = 0usize;
    for line in r.split(b'\n') {
        let line = line?;
        let start = offset;
        offset += line.len() + 1;
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let msg = decode_bytes(&line).map_err(|e| match e {
            MessageError::Decode { offset, reason } => {
                MessageError::Decode { offset: start + offset, reason }
            }
            other => other,
        })?;
        validator.check(&msg).map_err(|e| MessageError::Decode {
            offset: start,
            reason: e.to_string(),
        })?;
        out.push(msg);
    }
    Ok(out)
}
