// SPDX-License-Identifier: Apache-2.0

//! Encrypted location reports.
//!
//! Each report carries a fresh 128-bit one-time key `K`. The true identity
//! and position are sealed under `K` with AES-128-GCM, and `K` itself is
//! wrapped for the trusted third party with an ephemeral-static X25519
//! exchange.
//!
//! Wire layout (all lengths in bytes):
//!
//! ```text
//! wrapped_key = eph_pub[32] || AES-128-GCM(KEK, nonce = 0^12, K)[16 + 16]
//!   KEK       = HKDF-SHA256(ikm = X25519(eph, ttp_pub),
//!                           salt = eph_pub || ttp_pub,
//!                           info = "diprid/key-wrap/v1")[..16]
//! ciphertext  = nonce[12] || AES-128-GCM(K, nonce, plaintext, aad = "diprid/report/v1")
//! plaintext   = id_len u16 BE || id || lat_udeg i64 BE || lon_udeg i64 BE || alt_mm i64 BE
//! ```
//!
//! The KEK is derived from a single-use ephemeral secret, so the all-zero
//! nonce in the wrap never repeats under one key.

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Key, Nonce};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use crate::geo::GeoPosition;

/// Longest identifier a report can carry.
pub const MAX_ID_LEN: usize = 256;

const KEY_LEN: usize = 16;
const TAG_LEN: usize = 16;
const NONCE_LEN: usize = 12;
const PUB_LEN: usize = 32;
const WRAPPED_LEN: usize = PUB_LEN + KEY_LEN + TAG_LEN;
const WRAP_INFO: &[u8] = b"diprid/key-wrap/v1";
const REPORT_AAD: &[u8] = b"diprid/report/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("cannot encode report: {0}")]
    Encode(String),
    #[error("key unwrap failed: report not addressed to this key")]
    Unauthorized,
    #[error("report ciphertext failed authentication")]
    Integrity,
    #[error("malformed report: {0}")]
    Malformed(String),
    #[error("cannot decode report plaintext: {0}")]
    Decode(String),
    #[error("bad key encoding: {0}")]
    KeyEncoding(String),
}

/// The TTP public key.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct TtpPublicKey(PublicKey);

impl std::fmt::Debug for TtpPublicKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "TtpPublicKey({})", self.to_base64())
    }
}

impl TtpPublicKey {
    pub fn as_bytes(&self) -> &[u8; 32] {
        self.0.as_bytes()
    }

    pub fn to_base64(&self) -> String {
        B64.encode(self.0.as_bytes())
    }

    pub fn from_base64(s: &str) -> Result<Self, CryptoError> {
        Ok(TtpPublicKey(PublicKey::from(decode_key32(s)?)))
    }
}

/// The TTP key pair.
#[derive(Clone)]
pub struct TtpKeyPair {
    secret: StaticSecret,
    public: TtpPublicKey,
}

impl std::fmt::Debug for TtpKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TtpKeyPair").field("public", &self.public).finish_non_exhaustive()
    }
}

/// On-disk form of a key pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyPairFile {
    pub public_key: String,
    pub private_key: String,
}

impl TtpKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let secret = StaticSecret::random_from_rng(rng);
        let public = TtpPublicKey(PublicKey::from(&secret));
        TtpKeyPair { secret, public }
    }

    pub fn public(&self) -> TtpPublicKey {
        self.public
    }

    pub fn to_file(&self) -> KeyPairFile {
        KeyPairFile {
            public_key: self.public.to_base64(),
            private_key: B64.encode(self.secret.to_bytes()),
        }
    }

    pub fn from_file(f: &KeyPairFile) -> Result<Self, CryptoError> {
        let secret = StaticSecret::from(decode_key32(&f.private_key)?);
        let public = TtpPublicKey(PublicKey::from(&secret));
        if public.to_base64() != f.public_key.trim() {
            return Err(CryptoError::KeyEncoding(
                "public key does not match private key".into(),
            ));
        }
        Ok(TtpKeyPair { secret, public })
    }
}

fn decode_key32(s: &str) -> Result<[u8; 32], CryptoError> {
    let bytes = B64
        .decode(s.trim())
        .map_err(|e| CryptoError::KeyEncoding(e.to_string()))?;
    bytes
        .try_into()
        .map_err(|b: Vec<u8>| CryptoError::KeyEncoding(format!("expected 32 bytes, got {}", b.len())))
}

/// A wrapped one-time key and the sealed `(id, position)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncryptedLocationReport {
    wrapped_key: Vec<u8>,
    ciphertext: Vec<u8>,
}

impl EncryptedLocationReport {
    /// Accepts any non-empty pair; structural checks happen on open.
    pub fn from_parts(wrapped_key: Vec<u8>, ciphertext: Vec<u8>) -> Result<Self, CryptoError> {
        if wrapped_key.is_empty() || ciphertext.is_empty() {
            return Err(CryptoError::Malformed("empty report field".into()));
        }
        Ok(EncryptedLocationReport { wrapped_key, ciphertext })
    }

    pub fn wrapped_key(&self) -> &[u8] {
        &self.wrapped_key
    }

    pub fn ciphertext(&self) -> &[u8] {
        &self.ciphertext
    }

    /// Mutable ciphertext access for fault-injection tests.
    #[doc(hidden)]
    pub fn ciphertext_mut(&mut self) -> &mut [u8] {
        &mut self.ciphertext
    }
}

fn derive_kek(shared: &[u8; 32], eph_pub: &[u8; 32], ttp_pub: &[u8; 32]) -> Aes128Gcm {
    let mut salt = [0u8; 64];
    salt[..32].copy_from_slice(eph_pub);
    salt[32..].copy_from_slice(ttp_pub);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut kek = [0u8; KEY_LEN];
    hk.expand(WRAP_INFO, &mut kek).expect("16 bytes is a valid HKDF output length");
    Aes128Gcm::new(Key::<Aes128Gcm>::from_slice(&kek))
}

fn encode_plaintext(id: &str, pos: &GeoPosition) -> Result<Vec<u8>, CryptoError> {
    let idb = id.as_bytes();
    if idb.is_empty() || idb.len() > MAX_ID_LEN {
        return Err(CryptoError::Encode(format!(
            "identifier length {} not in 1..={MAX_ID_LEN}",
            idb.len()
        )));
    }
    let (lat, lon, alt) = pos.to_fixed();
    let mut out = Vec::with_capacity(2 + idb.len() + 24);
    out.extend_from_slice(&(idb.len() as u16).to_be_bytes());
    out.extend_from_slice(idb);
    for v in [lat, lon, alt] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    Ok(out)
}

fn decode_plaintext(buf: &[u8]) -> Result<(String, GeoPosition), CryptoError> {
    let err = |m: &str| CryptoError::Decode(m.to_string());
    let len_bytes: [u8; 2] = buf.get(..2).ok_or_else(|| err("short header"))?.try_into().unwrap();
    let n = u16::from_be_bytes(len_bytes) as usize;
    if n == 0 || n > MAX_ID_LEN || buf.len() != 2 + n + 24 {
        return Err(err("length mismatch"));
    }
    let id = std::str::from_utf8(&buf[2..2 + n]).map_err(|_| err("identifier is not UTF-8"))?;
    let mut fixed = [0i64; 3];
    for (i, chunk) in buf[2 + n..].chunks_exact(8).enumerate() {
        fixed[i] = i64::from_be_bytes(chunk.try_into().unwrap());
    }
    let pos = GeoPosition::from_fixed(fixed[0], fixed[1], fixed[2])
        .map_err(|e| CryptoError::Decode(e.to_string()))?;
    Ok((id.to_string(), pos))
}

/// Seals `(id, true_pos)` for the TTP. The position is carried in
/// fixed point (micro-degrees, millimetres).
pub fn make_location_report<R: RngCore + CryptoRng>(
    id: &str,
    true_pos: &GeoPosition,
    ttp_pub: &TtpPublicKey,
    rng: &mut R,
) -> Result<EncryptedLocationReport, CryptoError> {
    let plaintext = encode_plaintext(id, true_pos)?;

    let mut one_time = [0u8; KEY_LEN];
    rng.fill_bytes(&mut one_time);
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);

    let sealed = Aes128Gcm::new(Key::<Aes128Gcm>::from_slice(&one_time))
        .encrypt(Nonce::from_slice(&nonce), Payload { msg: &plaintext, aad: REPORT_AAD })
        .map_err(|_| CryptoError::Encode("AEAD encryption failed".into()))?;
    let mut ciphertext = Vec::with_capacity(NONCE_LEN + sealed.len());
    ciphertext.extend_from_slice(&nonce);
    ciphertext.extend_from_slice(&sealed);

    let eph = StaticSecret::random_from_rng(&mut *rng);
    let eph_pub = PublicKey::from(&eph);
    let shared = eph.diffie_hellman(&ttp_pub.0);
    let kek = derive_kek(shared.as_bytes(), eph_pub.as_bytes(), ttp_pub.as_bytes());
    let wrapped = kek
        .encrypt(Nonce::from_slice(&[0u8; NONCE_LEN]), one_time.as_slice())
        .map_err(|_| CryptoError::Encode("key wrap failed".into()))?;
    let mut wrapped_key = Vec::with_capacity(WRAPPED_LEN);
    wrapped_key.extend_from_slice(eph_pub.as_bytes());
    wrapped_key.extend_from_slice(&wrapped);

    Ok(EncryptedLocationReport { wrapped_key, ciphertext })
}

/// Unwraps the one-time key with the TTP private key and opens the report.
pub fn open_location_report(
    report: &EncryptedLocationReport,
    keys: &TtpKeyPair,
) -> Result<(String, GeoPosition), CryptoError> {
    if report.wrapped_key.len() != WRAPPED_LEN {
        return Err(CryptoError::Malformed(format!(
            "wrapped key is {} bytes, expected {WRAPPED_LEN}",
            report.wrapped_key.len()
        )));
    }
    if report.ciphertext.len() < NONCE_LEN + TAG_LEN {
        return Err(CryptoError::Malformed("ciphertext too short".into()));
    }
    let eph_bytes: [u8; 32] = report.wrapped_key[..PUB_LEN].try_into().unwrap();
    let eph_pub = PublicKey::from(eph_bytes);
    let shared = keys.secret.diffie_hellman(&eph_pub);
    let kek = derive_kek(shared.as_bytes(), &eph_bytes, keys.public.as_bytes());
    let one_time = kek
        .decrypt(Nonce::from_slice(&[0u8; NONCE_LEN]), &report.wrapped_key[PUB_LEN..])
        .map_err(|_| CryptoError::Unauthorized)?;
    if one_time.len() != KEY_LEN {
        return Err(CryptoError::Unauthorized);
    }

    let (nonce, sealed) = report.ciphertext.split_at(NONCE_LEN);
    let plaintext = Aes128Gcm::new(Key::<Aes128Gcm>::from_slice(&one_time))
        .decrypt(Nonce::from_slice(nonce), Payload { msg: sealed, aad: REPORT_AAD })
        .map_err(|_| CryptoError::Integrity)?;
    decode_plaintext(&plaintext)
}
