// SPDX-License-Identifier: Apache-2.0

//! Privacy-preserving drone Remote ID: location obfuscation, encrypted
//! true-location reports, windowed no-fly-zone detection, a trusted-party
//! verifier and a Monte-Carlo harness.

pub mod crypto;
pub mod cli;
pub mod geo;
pub mod icarus;
pub mod messages;
pub mod par;
pub mod privacy;
pub mod sim;
pub mod ttp;

pub use geo::{EnuPosition, GeoPosition};
pub use par::Execution;
