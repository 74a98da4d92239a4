// SPDX-License-Identifier: Apache-2.0

//! Monte-Carlo harness: obfuscate a flight, gate it by reception range,
//! replay it through one detector per receiver and score the windows.

pub mod trajectory;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::geo::{distance_3d, planar_distance, to_enu, EnuPosition, GeoPosition};
use crate::icarus::{replay, DetectorConfig, DetectorError, Observation, Verdict, WindowSummary};
use crate::par::Execution;
use crate::privacy::{AdmissibleRegion, LaplaceParams, Obfuscator, PrivacyError, RandomDraws};

pub use trajectory::{
    gen_trajectory, load_trajectory, read_receivers, read_trajectory, write_receivers,
    write_trajectory, Arena, GeneratedTrajectory, Pattern, Trajectory, TrajectoryError,
    TrajectorySample, TrajectorySpec,
};

pub const DEFAULT_DELTA_M: f64 = 700.0;
pub const DEFAULT_R_MAX_M: f64 = 705.0;
pub const DEFAULT_WINDOW_S: f64 = 15.0;
/// Run count for full-scale studies; desk runs use `DESK_RUNS`.
pub const FULL_RUNS: u64 = 10_000;
pub const DESK_RUNS: u64 = 200;
/// Altitude noise used when none is configured.
pub const DEFAULT_ALT_EPSILON: f64 = 0.5;
pub const DEFAULT_ALT_D: f64 = 5.0;
pub const DEFAULT_REGION_HALF_M: f64 = 100_000.0;

const PSEUDONYM: &str = "sim";

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum NoiseMode {
    #[default]
    Laplace,
    /// Every draw is `RandomDraws::ZERO_NOISE`; the detector sees the truth.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub receivers: Vec<GeoPosition>,
    /// Frame of the emitter's obfuscation; the first sample when `None`.
    pub origin: Option<GeoPosition>,
    pub delta_m: f64,
    pub r_max_m: f64,
    pub window_s: f64,
    pub guessing: bool,
    pub planar: LaplaceParams,
    pub altitude: LaplaceParams,
    pub region: AdmissibleRegion,
    pub noise: NoiseMode,
    pub runs: u64,
    pub master_seed: u64,
    pub execution: Execution,
}

impl Scenario {
    /// Desk-scale defaults around the given receivers.
    pub fn new(receivers: Vec<GeoPosition>, planar: LaplaceParams) -> Self {
        Scenario {
            receivers,
            origin: None,
            delta_m: DEFAULT_DELTA_M,
            r_max_m: DEFAULT_R_MAX_M,
            window_s: DEFAULT_WINDOW_S,
            guessing: false,
            planar,
            altitude: LaplaceParams::new(DEFAULT_ALT_EPSILON, DEFAULT_ALT_D)
                .expect("default altitude parameters are valid"),
            region: AdmissibleRegion::square(DEFAULT_REGION_HALF_M)
                .expect("default region is valid"),
            noise: NoiseMode::Laplace,
            runs: DESK_RUNS,
            master_seed: 0,
            execution: Execution::default(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.runs == 0 {
            return Err(SimError::Config("runs must be >= 1".into()));
        }
        if self.receivers.is_empty() {
            return Err(SimError::Config("no receivers".into()));
        }
        for r in &self.receivers {
            self.detector_config(r)?;
        }
        Ok(())
    }

    fn detector_config(&self, receiver: &GeoPosition) -> Result<DetectorConfig, SimError> {
        DetectorConfig::new(*receiver, self.delta_m, self.r_max_m, self.window_s, self.guessing)
            .map_err(|e| SimError::Config(e.to_string()))
    }
}

/// True when the transmitter at `true_pos` is heard: strictly inside range.
pub fn reception_filter(true_pos: &GeoPosition, receiver: &GeoPosition, r_max_m: f64) -> bool {
    to_enu(true_pos, receiver).norm() < r_max_m
}

/// Mixes a master seed and run index into an independent stream seed.
pub fn derive_seed(master: u64, run: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(master ^ splitmix(run))
}

/// Run-independent view of the flight from one receiver.
#[derive(Debug, Clone)]
struct ReceiverPlan {
    config: DetectorConfig,
    received: Vec<usize>,
    in_zone: Vec<bool>,
    /// Seconds at which the true path first enters the zone.
    crossing_s: Option<f64>,
}

fn t_s(t_us: u64) -> f64 {
    t_us as f64 / 1e6
}

/// First instant the linearly interpolated path enters the `delta` sphere.
fn first_crossing(track: &[EnuPosition], times: &[u64], delta: f64) -> Option<f64> {
    let first = track.iter().position(|p| p.norm() < delta)?;
    if first == 0 {
        return Some(t_s(times[0]));
    }
    let (a, b) = (track[first - 1], track[first]);
    let d = [b.x_m - a.x_m, b.y_m - a.y_m, b.z_m - a.z_m];
    // |a + s d|^2 = delta^2, outside at s = 0 and inside at s = 1.
    let qa = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
    let qb = 2.0 * (a.x_m * d[0] + a.y_m * d[1] + a.z_m * d[2]);
    let qc = a.norm().powi(2) - delta * delta;
    let disc = (qb * qb - 4.0 * qa * qc).max(0.0);
    let s = ((-qb - disc.sqrt()) / (2.0 * qa)).clamp(0.0, 1.0);
    let (t0, t1) = (t_s(times[first - 1]), t_s(times[first]));
    Some(t0 + s * (t1 - t0))
}

fn plan_receivers(traj: &Trajectory, scenario: &Scenario) -> Result<Vec<ReceiverPlan>, SimError> {
    let times: Vec<u64> = traj.samples().iter().map(|s| s.t_us).collect();
    scenario
        .receivers
        .iter()
        .map(|r| {
            let config = scenario.detector_config(r)?;
            let track = trajectory::enu_track(traj, r);
            let received = (0..track.len()).filter(|&i| track[i].norm() < scenario.r_max_m).collect();
            let in_zone = track.iter().map(|p| p.norm() < scenario.delta_m).collect();
            let crossing_s = first_crossing(&track, &times, scenario.delta_m);
            Ok(ReceiverPlan { config, received, in_zone, crossing_s })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl Confusion {
    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fn_ += o.fn_;
        self.fp += o.fp;
        self.tn += o.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn tpr(&self) -> Option<f64> {
        (self.positives() > 0).then(|| self.tp as f64 / self.positives() as f64)
    }

    pub fn fpr(&self) -> Option<f64> {
        let neg = self.fp + self.tn;
        (neg > 0).then(|| self.fp as f64 / neg as f64)
    }
}

/// One receiver's view of one run.
#[derive(Debug, Clone)]
pub struct ReceiverRun {
    pub windows: Vec<WindowSummary>,
    /// Ground truth for each entry of `windows`.
    pub truth: Vec<bool>,
    pub confusion: Confusion,
    pub delay_s: Option<f64>,
}

/// Everything one run produced, kept for oracle checks.
#[derive(Debug, Clone)]
pub struct RunTrace {
    pub obfuscated: Vec<GeoPosition>,
    /// Sum of planar displacements, in the emitter frame.
    pub displacement_sum_m: f64,
    pub receivers: Vec<ReceiverRun>,
}

fn obfuscate_run(
    traj: &Trajectory,
    scenario: &Scenario,
    origin: &GeoPosition,
    run: u64,
) -> Result<(Vec<GeoPosition>, f64), SimError> {
    let ob = Obfuscator::new(*origin, scenario.planar, scenario.altitude, scenario.region);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scenario.master_seed, run));
    let mut out = Vec::with_capacity(traj.len());
    let mut sum = 0.0;
    for s in traj.samples() {
        let draws = match scenario.noise {
            NoiseMode::Laplace => RandomDraws::sample(&mut rng),
            NoiseMode::Zero => RandomDraws::ZERO_NOISE,
        };
        let p = ob.obfuscate(&s.position, draws)?;
        sum += planar_distance(&to_enu(&s.position, origin), &to_enu(&p, origin));
        out.push(p);
    }
    Ok((out, sum))
}

fn score_receiver(
    traj: &Trajectory,
    plan: &ReceiverPlan,
    obfuscated: &[GeoPosition],
) -> Result<ReceiverRun, SimError> {
    let samples = traj.samples();
    let obs = plan.received.iter().map(|&i| Observation {
        index: i,
        pseudonym: PSEUDONYM,
        t_us: samples[i].t_us,
        position: obfuscated[i],
        velocity: samples[i].velocity,
    });
    let rep = replay(plan.config, traj.start_us(), obs, Some(traj.end_us()))?;

    let mut confusion = Confusion::default();
    let mut truth = Vec::with_capacity(rep.windows.len());
    for w in &rep.windows {
        let actual = w.message_indices.iter().any(|&i| plan.in_zone[i]);
        let flagged = w.verdict == Verdict::Invasion;
        match (actual, flagged) {
            (true, true) => confusion.tp += 1,
            (true, false) => confusion.fn_ += 1,
            (false, true) => confusion.fp += 1,
            (false, false) => confusion.tn += 1,
        }
        truth.push(actual);
    }
    let delay_s = plan.crossing_s.and_then(|c| {
        rep.outcomes
            .iter()
            .filter(|o| o.verdict == Verdict::Invasion)
            .map(|o| t_s(o.decision_time_us))
            .find(|&t| t >= c)
            .map(|t| t - c)
    });
    Ok(ReceiverRun { windows: rep.windows, truth, confusion, delay_s })
}

fn origin_of(traj: &Trajectory, scenario: &Scenario) -> GeoPosition {
    scenario.origin.unwrap_or(traj.samples()[0].position)
}

fn run_once(
    traj: &Trajectory,
    scenario: &Scenario,
    plans: &[ReceiverPlan],
    run: u64,
) -> Result<RunTrace, SimError> {
    let origin = origin_of(traj, scenario);
    let (obfuscated, displacement_sum_m) = obfuscate_run(traj, scenario, &origin, run)?;
    let receivers = plans
        .iter()
        .map(|p| score_receiver(traj, p, &obfuscated))
        .collect::<Result<_, _>>()?;
    Ok(RunTrace { obfuscated, displacement_sum_m, receivers })
}

/// Replays run `run` of `scenario` in full.
pub fn simulate_run(traj: &Trajectory, scenario: &Scenario, run: u64) -> Result<RunTrace, SimError> {
    scenario.validate()?;
    let plans = plan_receivers(traj, scenario)?;
    run_once(traj, scenario, &plans, run)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimMetrics {
    pub ad_mean_m: f64,
    /// `None` when no receiver saw a true-invasion window.
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub delay_mean_s: Option<f64>,
    pub delay_ci95_s: Option<f64>,
    pub windows_total: u64,
    pub windows_true_invasion: u64,
}

/// Mean and 1.96 standard errors; the interval is 0 below two samples.
fn mean_ci(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, 1.96 * (var / n).sqrt()))
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Runs every seed and averages each metric over the receivers for which it
/// is defined.
pub fn run_simulation(traj: &Trajectory, scenario: &Scenario) -> Result<SimMetrics, SimError> {
    scenario.validate()?;
    let plans = plan_receivers(traj, scenario)?;
    let traces = scenario
        .execution
        .map_range(scenario.runs as usize, |run| run_once(traj, scenario, &plans, run as u64));

    let mut displacement = 0.0;
    let mut confusion = vec![Confusion::default(); plans.len()];
    let mut delays = vec![Vec::new(); plans.len()];
    for t in traces {
        let t = t?;
        displacement += t.displacement_sum_m;
        for (k, r) in t.receivers.iter().enumerate() {
            confusion[k].add(&r.confusion);
            delays[k].extend(r.delay_s);
        }
    }
    let stats: Vec<Option<(f64, f64)>> = delays.iter().map(|d| mean_ci(d)).collect();
    Ok(SimMetrics {
        ad_mean_m: displacement / (scenario.runs as f64 * traj.len() as f64),
        tpr: mean_defined(confusion.iter().map(Confusion::tpr)),
        fpr: mean_defined(confusion.iter().map(Confusion::fpr)),
        delay_mean_s: mean_defined(stats.iter().map(|s| s.map(|s| s.0))),
        delay_ci95_s: mean_defined(stats.iter().map(|s| s.map(|s| s.1))),
        windows_total: confusion.iter().map(Confusion::total).sum(),
        windows_true_invasion: confusion.iter().map(Confusion::positives).sum(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepGrid {
    pub epsilons: Vec<f64>,
    pub d_scales: Vec<f64>,
    pub windows: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub epsilon: f64,
    pub d_scale: f64,
    pub window_s: f64,
    pub metrics: SimMetrics,
}

fn sorted_unique(xs: &[f64], name: &str) -> Result<Vec<f64>, SimError> {
    if xs.is_empty() {
        return Err(SimError::Config(format!("empty {name} grid")));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(SimError::Config(format!("non-finite value in {name} grid")));
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v.dedup();
    Ok(v)
}

/// Evaluates the cartesian product of the grid, rows sorted by
/// `(epsilon, D, W)`.
pub fn sweep(
    traj: &Trajectory,
    scenario: &Scenario,
    grid: &SweepGrid,
) -> Result<Vec<SweepRow>, SimError> {
    let eps = sorted_unique(&grid.epsilons, "epsilon")?;
    let ds = sorted_unique(&grid.d_scales, "D")?;
    let ws = sorted_unique(&grid.windows, "W")?;
    let mut points = Vec::with_capacity(eps.len() * ds.len() * ws.len());
    for &e in &eps {
        for &d in &ds {
            for &w in &ws {
                let mut s = scenario.clone();
                s.planar = LaplaceParams::new(e, d)?;
                s.window_s = w;
                s.validate()?;
                points.push((e, d, w, s));
            }
        }
    }
    scenario
        .execution
        .map_slice(&points, |(e, d, w, s)| {
            run_simulation(traj, s).map(|metrics| SweepRow {
                epsilon: *e,
                d_scale: *d,
                window_s: *w,
                metrics,
            })
        })
        .into_iter()
        .collect()
}

pub const METRICS_HEADER: &str = "epsilon,D,W,ad_mean_m,tpr,fpr,delay_mean_s,delay_ci95_s,windows_total,windows_true_invasion";

/// Marker written for metrics with no defined value.
pub const UNDEFINED: &str = "NaN";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |x| x.to_string())
}

pub fn format_metrics_row(row: &SweepRow) -> String {
    let m = &row.metrics;
    format!(
        "{},{},{},{},{},{},{},{},{},{}",
        row.epsilon,
        row.d_scale,
        row.window_s,
        m.ad_mean_m,
        cell(m.tpr),
        cell(m.fpr),
        cell(m.delay_mean_s),
        cell(m.delay_ci95_s),
        m.windows_total,
        m.windows_true_invasion
    )
}

/// Metrics CSV with a leading `# seed=S runs=R` comment line.
pub fn write_metrics_csv<W: Write>(
    mut w: W,
    seed: u64,
    runs: u64,
    rows: &[SweepRow],
) -> std::io::Result<()> {
    writeln!(w, "# seed={seed} runs={runs}")?;
    writeln!(w, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", format_metrics_row(r))?;
    }
    w.flush()
}

/// Distance of `p` from `receiver` in 3-D.
pub fn range_to(p: &GeoPosition, receiver: &GeoPosition) -> f64 {
    distance_3d(&to_enu(p, receiver), &EnuPosition::ORIGIN)
}
