// SPDX-License-Identifier: Apache-2.0

//! Flight logs: CSV ingestion and synthetic generation.

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::geo::{from_enu, to_enu, EnuPosition, GeoError, GeoPosition};
use crate::messages::MAX_BROADCAST_PERIOD_US;

pub const TRAJECTORY_HEADER: [&str; 7] = ["t_us", "lat_deg", "lon_deg", "alt_m", "vx", "vy", "vz"];
pub const RECEIVERS_HEADER: [&str; 4] = ["id", "lat_deg", "lon_deg", "alt_m"];

/// Default speed cap for synthetic flights, 70 km/h.
pub const MAX_SPEED_MPS: f64 = 70.0 / 3.6;

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("line {line}: {reason}")]
    Row { line: u64, reason: String },
    #[error("bad header: {0}")]
    Header(String),
    #[error("invalid trajectory: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySample {
    pub t_us: u64,
    pub position: GeoPosition,
    /// East, north, up in m/s.
    pub velocity: [f64; 3],
}

/// Time-ordered true fixes of one UAV.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    samples: Vec<TrajectorySample>,
}

impl Trajectory {
    /// Requires at least one sample, strictly increasing timestamps and no
    /// gap longer than the broadcast period.
    pub fn new(samples: Vec<TrajectorySample>) -> Result<Self, TrajectoryError> {
        if samples.is_empty() {
            return Err(TrajectoryError::Validation("no samples".into()));
        }
        for (i, w) in samples.windows(2).enumerate() {
            check_step(w[0].t_us, w[1].t_us).map_err(|reason| TrajectoryError::Validation(
                format!("sample {}: {reason}", i + 1),
            ))?;
        }
        Ok(Trajectory { samples })
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn start_us(&self) -> u64 {
        self.samples[0].t_us
    }

    pub fn end_us(&self) -> u64 {
        self.samples[self.samples.len() - 1].t_us
    }
}

fn check_step(prev: u64, next: u64) -> Result<(), String> {
    if next <= prev {
        return Err(format!("timestamp {next} does not advance past {prev}"));
    }
    if next - prev > MAX_BROADCAST_PERIOD_US {
        return Err(format!("gap of {} us exceeds {MAX_BROADCAST_PERIOD_US} us", next - prev));
    }
    Ok(())
}

fn check_header(
    rdr: &mut csv::Reader<impl Read>,
    expected: &[&str],
) -> Result<(), TrajectoryError> {
    let headers = rdr.headers().map_err(|e| TrajectoryError::Header(e.to_string()))?;
    let got: Vec<&str> = headers.iter().map(str::trim).collect();
    for name in expected {
        if !got.contains(name) {
            return Err(TrajectoryError::Header(format!("missing column `{name}`")));
        }
    }
    if got.len() != expected.len() {
        return Err(TrajectoryError::Header(format!(
            "expected columns {}, got {}",
            expected.join(","),
            got.join(",")
        )));
    }
    Ok(())
}

#[derive(Deserialize)]
struct TrajRow {
    t_us: u64,
    lat_deg: f64,
    lon_deg: f64,
    alt_m: f64,
    vx: f64,
    vy: f64,
    vz: f64,
}

/// Reads a CSV with the given header, skipping `#` comment lines, and
/// hands each row to `f` with its physical line number.
fn for_each_row<R, T, F>(r: R, expected: &[&str], mut f: F) -> Result<(), TrajectoryError>
where
    R: Read,
    T: for<'de> Deserialize<'de>,
    F: FnMut(u64, T) -> Result<(), String>,
{
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(r);
    check_header(&mut rdr, expected)?;
    let headers = rdr.headers().map_err(|e| TrajectoryError::Header(e.to_string()))?.clone();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| TrajectoryError::Row {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row: T = rec
            .deserialize(Some(&headers))
            .map_err(|e| TrajectoryError::Row { line, reason: e.to_string() })?;
        f(line, row).map_err(|reason| TrajectoryError::Row { line, reason })?;
    }
    Ok(())
}

pub fn read_trajectory<R: Read>(r: R) -> Result<Trajectory, TrajectoryError> {
    let mut samples: Vec<TrajectorySample> = Vec::new();
    for_each_row(r, &TRAJECTORY_HEADER, |_, row: TrajRow| {
        let position = GeoPosition::new(row.lat_deg, row.lon_deg, row.alt_m)
            .map_err(|e| e.to_string())?;
        let velocity = [row.vx, row.vy, row.vz];
        if velocity.iter().any(|v| !v.is_finite()) {
            return Err("non-finite velocity".into());
        }
        if let Some(prev) = samples.last() {
            check_step(prev.t_us, row.t_us)?;
        }
        samples.push(TrajectorySample { t_us: row.t_us, position, velocity });
        Ok(())
    })?;
    Trajectory::new(samples)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, TrajectoryError> {
    read_trajectory(std::fs::File::open(path)?)
}

pub fn write_trajectory<W: Write>(w: W, traj: &Trajectory) -> Result<(), TrajectoryError> {
    let mut wtr = csv::Writer::from_writer(w);
    let err = |e: csv::Error| TrajectoryError::Io(std::io::Error::other(e));
    wtr.write_record(TRAJECTORY_HEADER).map_err(err)?;
    for s in traj.samples() {
        wtr.write_record([
            s.t_us.to_string(),
            s.position.lat_deg().to_string(),
            s.position.lon_deg().to_string(),
            s.position.alt_m().to_string(),
            s.velocity[0].to_string(),
            s.velocity[1].to_string(),
            s.velocity[2].to_string(),
        ])
        .map_err(err)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Deserialize)]
struct ReceiverRow {
    id: String,
    lat_deg: f64,
    lon_deg: f64,
    alt_m: f64,
}

/// Reads `id,lat_deg,lon_deg,alt_m` rows.
pub fn read_receivers<R: Read>(r: R) -> Result<Vec<(String, GeoPosition)>, TrajectoryError> {
    let mut out = Vec::new();
    for_each_row(r, &RECEIVERS_HEADER, |_, row: ReceiverRow| {
        let pos = GeoPosition::new(row.lat_deg, row.lon_deg, row.alt_m).map_err(|e| e.to_string())?;
        out.push((row.id, pos));
        Ok(())
    })?;
    if out.is_empty() {
        return Err(TrajectoryError::Validation("no receivers".into()));
    }
    Ok(out)
}

pub fn write_receivers<W: Write>(w: W, receivers: &[(String, GeoPosition)]) -> std::io::Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(RECEIVERS_HEADER)?;
    for (id, p) in receivers {
        wtr.write_record([
            id.clone(),
            p.lat_deg().to_string(),
            p.lon_deg().to_string(),
            p.alt_m().to_string(),
        ])?;
    }
    wtr.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    /// Straight pass; `offset_m` is the closest approach to the centre.
    Line,
    /// Orbit of radius `offset_m` around the centre.
    Circle,
    /// Straight pass that enters and leaves the no-fly zone exactly once.
    FlyThrough,
}

impl std::str::FromStr for Pattern {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "line" => Ok(Pattern::Line),
            "circle" => Ok(Pattern::Circle),
            "fly-through" => Ok(Pattern::FlyThrough),
            other => Err(format!("unknown pattern `{other}` (line, circle, fly-through)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub pattern: Pattern,
    pub duration_s: f64,
    pub period_s: f64,
    pub speed_mps: f64,
    pub offset_m: f64,
    /// Height above the centre, constant over the flight.
    pub altitude_m: f64,
    pub start_us: u64,
    pub max_speed_mps: f64,
}

impl TrajectorySpec {
    pub fn new(pattern: Pattern, duration_s: f64, period_s: f64, speed_mps: f64) -> Self {
        TrajectorySpec {
            pattern,
            duration_s,
            period_s,
            speed_mps,
            offset_m: 0.0,
            altitude_m: 0.0,
            start_us: 0,
            max_speed_mps: MAX_SPEED_MPS,
        }
    }

    pub fn with_offset(mut self, offset_m: f64) -> Self {
        self.offset_m = offset_m;
        self
    }
}

/// The protected site a synthetic flight is laid out around.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Arena {
    pub center: GeoPosition,
    pub delta_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedTrajectory {
    pub trajectory: Trajectory,
    /// Seconds after the first sample during which the UAV is strictly
    /// inside `delta_m` of the centre.
    pub invasion_interval_s: Option<(f64, f64)>,
}

fn validate_spec(spec: &TrajectorySpec, arena: &Arena) -> Result<(), TrajectoryError> {
    let bad = |m: String| Err(TrajectoryError::Validation(m));
    if !(spec.period_s > 0.0 && spec.period_s <= 1.0) {
        return bad(format!("period {} s not in (0, 1]", spec.period_s));
    }
    if !(spec.duration_s.is_finite() && spec.duration_s > 0.0) {
        return bad(format!("duration {} s must be > 0", spec.duration_s));
    }
    if !(spec.speed_mps >= 0.0 && spec.speed_mps <= spec.max_speed_mps) {
        return bad(format!("speed {} m/s not in [0, {}]", spec.speed_mps, spec.max_speed_mps));
    }
    if !(spec.offset_m.is_finite() && spec.offset_m >= 0.0 && spec.altitude_m.is_finite()) {
        return bad("offset and altitude must be finite, offset >= 0".into());
    }
    if !(arena.delta_m.is_finite() && arena.delta_m > 0.0) {
        return bad(format!("arena radius {} must be > 0", arena.delta_m));
    }
    if spec.pattern == Pattern::Circle && (spec.offset_m <= 0.0 || spec.speed_mps <= 0.0) {
        return bad("a circle needs a positive radius and speed".into());
    }
    Ok(())
}

/// Lays out a synthetic flight around `arena.center`. Straight patterns
/// take a random heading and reach their closest approach at mid-flight;
/// circles start at a random phase.
pub fn gen_trajectory<R: Rng + ?Sized>(
    spec: &TrajectorySpec,
    arena: &Arena,
    rng: &mut R,
) -> Result<GeneratedTrajectory, TrajectoryError> {
    validate_spec(spec, arena)?;
    let n = (spec.duration_s / spec.period_s + 1e-9).floor() as u64 + 1;
    let half = spec.duration_s / 2.0;
    let z = spec.altitude_m;
    let phase = rng.gen::<f64>() * TAU;

    type PathFn = Box<dyn Fn(f64) -> EnuPosition>;
    type VelFn = Box<dyn Fn(f64) -> [f64; 3]>;
    let (pos_at, vel_at): (PathFn, VelFn) =
        match spec.pattern {
            Pattern::Line | Pattern::FlyThrough => {
                let (s, c) = phase.sin_cos();
                let (off, v) = (spec.offset_m, spec.speed_mps);
                (
                    Box::new(move |t| {
                        let along = v * (t - half);
                        EnuPosition::new(-s * off + c * along, c * off + s * along, z)
                    }),
                    Box::new(move |_| [v * c, v * s, 0.0]),
                )
            }
            Pattern::Circle => {
                let (r, w) = (spec.offset_m, spec.speed_mps / spec.offset_m);
                let p = move |t: f64| {
                    let a = phase + w * t;
                    EnuPosition::new(r * a.cos(), r * a.sin(), z)
                };
                let dt = spec.period_s;
                (
                    Box::new(p),
                    // Secant velocity over the next period.
                    Box::new(move |t| {
                        let (a, b) = (p(t), p(t + dt));
                        [(b.x_m - a.x_m) / dt, (b.y_m - a.y_m) / dt, 0.0]
                    }),
                )
            }
        };

    let mut samples = Vec::with_capacity(n as usize);
    for k in 0..n {
        let t_us = spec.start_us + (k as f64 * spec.period_s * 1e6).round() as u64;
        let t = (t_us - spec.start_us) as f64 / 1e6;
        let position = from_enu(&pos_at(t), &arena.center)?;
        samples.push(TrajectorySample { t_us, position, velocity: vel_at(t) });
    }
    let end_s = (samples[samples.len() - 1].t_us - spec.start_us) as f64 / 1e6;

    let d2 = arena.delta_m.powi(2) - spec.offset_m.powi(2) - z * z;
    let invasion_interval_s = match spec.pattern {
        Pattern::Circle => (d2 > 0.0).then_some((0.0, end_s)),
        Pattern::Line | Pattern::FlyThrough => {
            if d2 > 0.0 && spec.speed_mps > 0.0 {
                let h = d2.sqrt() / spec.speed_mps;
                let (t_in, t_out) = (half - h, half + h);
                if spec.pattern == Pattern::FlyThrough && !(t_in > 0.0 && t_out < end_s) {
                    return Err(TrajectoryError::Validation(format!(
                        "flight of {} s does not start and end outside the zone",
                        spec.duration_s
                    )));
                }
                (t_out > 0.0 && t_in < end_s).then_some((t_in.max(0.0), t_out.min(end_s)))
            } else if spec.pattern == Pattern::FlyThrough {
                return Err(TrajectoryError::Validation(format!(
                    "offset {} m never enters the {} m zone",
                    spec.offset_m, arena.delta_m
                )));
            } else {
                None
            }
        }
    };

    Ok(GeneratedTrajectory { trajectory: Trajectory::new(samples)?, invasion_interval_s })
}

/// ENU offsets of every sample about `origin`.
pub fn enu_track(traj: &Trajectory, origin: &GeoPosition) -> Vec<EnuPosition> {
    traj.samples().iter().map(|s| to_enu(&s.position, origin)).collect()
}
