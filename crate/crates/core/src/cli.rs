// SPDX-License-Identifier: Apache-2.0

//! Command-line front end. Every input is parsed and checked before any
//! output file is touched; outputs are built in memory and written last.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::rngs::OsRng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::crypto::{make_location_report, KeyPairFile, TtpKeyPair, TtpPublicKey};
use crate::geo::GeoPosition;
use crate::icarus::{replay, DetectorConfig, Observation};
use crate::messages::{build_message, read_trace, write_trace, FlightValidator, MessageError};
use crate::par::{with_jobs, Execution};
use crate::privacy::{
    sample_radius, AdmissibleRegion, LaplaceParams, Obfuscator, RandomDraws,
};
use crate::sim::{
    derive_seed, gen_trajectory, read_receivers, read_trajectory, run_simulation, sweep,
    write_metrics_csv, write_trajectory, Arena, NoiseMode, Pattern, Scenario, SimError,
    SweepGrid, SweepRow, TrajectoryError, TrajectorySpec, DEFAULT_ALT_D, DEFAULT_ALT_EPSILON,
    DEFAULT_DELTA_M, DEFAULT_REGION_HALF_M, DEFAULT_R_MAX_M, DEFAULT_WINDOW_S, DESK_RUNS,
};
use crate::ttp::{CiId, Registry, Ttp, TtpError};

const FORMATS: &str = "\
File formats:
  trajectory CSV   t_us,lat_deg,lon_deg,alt_m,vx,vy,vz (velocity east/north/up in m/s)
  receivers CSV    id,lat_deg,lon_deg,alt_m
  trace (.rid)     one JSON RemoteID message per line
  metrics CSV      # seed=S runs=R, then
                   epsilon,D,W,ad_mean_m,tpr,fpr,delay_mean_s,delay_ci95_s,windows_total,windows_true_invasion
                   (undefined rates are written as NaN)
  registry JSON    {\"uavs\":[{\"id\":..}],\"cis\":[{\"ci_id\":..,\"pos\":{..},\"delta_m\":..}]}
  key pair JSON    {\"public_key\":base64,\"private_key\":base64}
  public key file  base64 X25519 public key, or a key pair JSON

Exit codes: 0 success, 1 invalid input, 2 I/O failure.";

#[derive(Parser, Debug)]
#[command(name = "diprid", version, about = "Private drone Remote ID toolkit", after_help = FORMATS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print planar Laplace radii, one per line.
    Sample {
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        d_scale: f64,
        #[arg(long)]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Obfuscate a trajectory into a RemoteID trace with encrypted reports.
    Obfuscate(ObfuscateArgs),
    /// Generate a synthetic trajectory CSV.
    GenTrajectory(GenArgs),
    /// Monte-Carlo evaluation of one parameter point.
    Simulate(SimArgs),
    /// Evaluate a grid of (epsilon, D, W) points.
    Sweep(SweepArgs),
    /// Run the detector over a trace and write one JSON line per window.
    Detect(DetectArgs),
    /// Trusted third party registry and verification.
    #[command(subcommand)]
    Ttp(TtpCommand),
}

#[derive(Args, Debug)]
struct ObfuscateArgs {
    /// Trajectory CSV.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[arg(long)]
    d_scale: f64,
    #[arg(long, default_value_t = DEFAULT_ALT_EPSILON)]
    alt_epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_ALT_D)]
    alt_d: f64,
    /// Admissible box x0,x1,y0,y1 in metres around the origin.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    region: Option<Vec<f64>>,
    /// Admissible altitude band z0,z1 in metres relative to the origin.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    alt_range: Option<Vec<f64>>,
    /// Obfuscation frame lat,lon,alt; defaults to the first sample.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    origin: Option<Vec<f64>>,
    /// TTP public key file.
    #[arg(long)]
    ttp_pub: PathBuf,
    /// Identifier sealed in the reports.
    #[arg(long, default_value = "uav-1")]
    uav_id: String,
    /// Broadcast pseudonym; derived from the seed when absent.
    #[arg(long)]
    pseudonym: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// line, circle or fly-through.
    #[arg(long)]
    pattern: Pattern,
    #[arg(long)]
    duration: f64,
    #[arg(long)]
    period: f64,
    #[arg(long)]
    speed: f64,
    /// Closest approach for straight passes, radius for circles.
    #[arg(long, default_value_t = 0.0)]
    offset: f64,
    /// Height above the centre.
    #[arg(long, default_value_t = 0.0)]
    altitude: f64,
    /// Centre lat,lon,alt.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "45,9,0")]
    center: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_DELTA_M)]
    delta: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long)]
    traj: PathBuf,
    #[arg(long)]
    receivers: PathBuf,
    /// TOML file with defaults for any of the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    rmax: Option<f64>,
    #[arg(long)]
    window: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    d_scale: Option<f64>,
    #[arg(long)]
    alt_epsilon: Option<f64>,
    #[arg(long)]
    alt_d: Option<f64>,
    /// Admissible box x0,x1,y0,y1 in metres around the first sample.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    region: Option<Vec<f64>>,
    #[arg(long)]
    runs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extrapolate reports beyond the reception range.
    #[arg(long)]
    guessing: bool,
    /// Broadcast true positions.
    #[arg(long)]
    zero_noise: bool,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, value_delimiter = ',')]
    epsilon_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    d_grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    w_grid: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Receiver lat,lon,alt.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    receiver: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_DELTA_M)]
    delta: f64,
    #[arg(long, default_value_t = DEFAULT_R_MAX_M)]
    rmax: f64,
    #[arg(long, default_value_t = DEFAULT_WINDOW_S)]
    window: f64,
    #[arg(long)]
    guessing: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum TtpCommand {
    /// Create an empty registry and a fresh key pair.
    Init {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        /// Derive the key pair from a seed (test fixtures only).
        #[arg(long)]
        seed: Option<u64>,
        /// Replace existing files.
        #[arg(long)]
        force: bool,
    },
    /// Register a UAV and print the TTP public key.
    RegisterUav {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        id: String,
        /// Also write the public key to this file.
        #[arg(long)]
        pub_out: Option<PathBuf>,
    },
    /// Register a critical-infrastructure operator and print its id.
    RegisterCi {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long, allow_negative_numbers = true)]
        lat: f64,
        #[arg(long, allow_negative_numbers = true)]
        lon: f64,
        #[arg(long, allow_negative_numbers = true)]
        alt: f64,
        #[arg(long)]
        delta: f64,
    },
    /// Check a trace against an operator's zone and print the disclosure.
    Verify {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long)]
        keys: PathBuf,
        #[arg(long)]
        ci: u64,
        #[arg(long)]
        trace: PathBuf,
    },
}

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (kind, m) = match self {
            CliError::Validation(m) => ("validation", m),
            CliError::Io(m) => ("io", m),
        };
        // Keep the message on one line.
        write!(f, "error: {kind}: {}", m.replace('\n', " "))
    }
}

fn invalid(m: impl std::fmt::Display) -> CliError {
    CliError::Validation(m.to_string())
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Trajectory(t) => t.into(),
            other => invalid(other),
        }
    }
}

impl From<TrajectoryError> for CliError {
    fn from(e: TrajectoryError) -> Self {
        match e {
            TrajectoryError::Io(io) => CliError::Io(io.to_string()),
            other => invalid(other),
        }
    }
}

impl From<TtpError> for CliError {
    fn from(e: TtpError) -> Self {
        match e {
            TtpError::Io(io) => CliError::Io(io.to_string()),
            other => invalid(other),
        }
    }
}

impl From<MessageError> for CliError {
    fn from(e: MessageError) -> Self {
        match e {
            MessageError::Io(io) => CliError::Io(io.to_string()),
            other => invalid(other),
        }
    }
}

fn read_file(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn with_path<E: Into<CliError>>(path: &Path) -> impl Fn(E) -> CliError + '_ {
    move |e| match e.into() {
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        CliError::Io(m) => CliError::Io(m),
    }
}

fn geo_triple(v: &[f64], flag: &str) -> Result<GeoPosition, CliError> {
    match v {
        [lat, lon, alt] => GeoPosition::new(*lat, *lon, *alt).map_err(|e| invalid(format!("--{flag}: {e}"))),
        _ => Err(invalid(format!("--{flag} takes lat,lon,alt"))),
    }
}

fn region_from(
    v: Option<&[f64]>,
    alt: Option<&[f64]>,
) -> Result<AdmissibleRegion, CliError> {
    let region = match v {
        None => AdmissibleRegion::square(DEFAULT_REGION_HALF_M),
        Some([x0, x1, y0, y1]) => AdmissibleRegion::new(*x0, *x1, *y0, *y1),
        Some(_) => return Err(invalid("--region takes x0,x1,y0,y1")),
    }
    .map_err(|e| invalid(format!("--region: {e}")))?;
    match alt {
        None => Ok(region),
        Some([z0, z1]) => region.with_altitude(*z0, *z1).map_err(|e| invalid(format!("--alt-range: {e}"))),
        Some(_) => Err(invalid("--alt-range takes z0,z1")),
    }
}

fn laplace(eps: f64, d: f64, flags: &str) -> Result<LaplaceParams, CliError> {
    LaplaceParams::new(eps, d).map_err(|e| invalid(format!("{flags}: {e}")))
}

fn load_public_key(path: &Path) -> Result<TtpPublicKey, CliError> {
    let text = read_file(path)?;
    let b64 = match serde_json::from_str::<KeyPairFile>(&text) {
        Ok(f) => f.public_key,
        Err(_) => text.trim().to_string(),
    };
    TtpPublicKey::from_base64(&b64).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_keys(path: &Path) -> Result<TtpKeyPair, CliError> {
    let f: KeyPairFile = serde_json::from_str(&read_file(path)?)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    TtpKeyPair::from_file(&f).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_registry(path: &Path) -> Result<Registry, CliError> {
    Registry::from_json(&read_file(path)?).map_err(with_path(path))
}

fn load_trace(path: &Path) -> Result<Vec<crate::messages::RemoteIdMessage>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    read_trace(std::io::BufReader::new(f)).map_err(with_path(path))
}

fn cmd_sample(
    epsilon: f64,
    d_scale: f64,
    count: u64,
    seed: u64,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let params = laplace(epsilon, d_scale, "--epsilon/--d-scale")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = format!("# seed={seed}\n");
    for _ in 0..count {
        let p: f64 = rand::Rng::gen(&mut rng);
        let r = sample_radius(&params, p).map_err(invalid)?;
        text.push_str(&format!("{r}\n"));
    }
    out.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}

fn cmd_obfuscate(a: &ObfuscateArgs) -> Result<(), CliError> {
    let planar = laplace(a.epsilon, a.d_scale, "--epsilon/--d-scale")?;
    let altitude = laplace(a.alt_epsilon, a.alt_d, "--alt-epsilon/--alt-d")?;
    let region = region_from(a.region.as_deref(), a.alt_range.as_deref())?;
    let origin = a.origin.as_deref().map(|v| geo_triple(v, "origin")).transpose()?;
    let key = load_public_key(&a.ttp_pub)?;
    let traj = read_trajectory(read_file(&a.trace)?.as_bytes()).map_err(with_path(&a.trace))?;

    let origin = origin.unwrap_or(traj.samples()[0].position);
    let pseudonym = a
        .pseudonym
        .clone()
        .unwrap_or_else(|| format!("p{:016x}", derive_seed(a.seed, u64::MAX)));
    let ob = Obfuscator::new(origin, planar, altitude, region);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut validator = FlightValidator::broadcast();
    let mut msgs = Vec::with_capacity(traj.len());
    for s in traj.samples() {
        let shown = ob.obfuscate(&s.position, RandomDraws::sample(&mut noise_rng)).map_err(invalid)?;
        // One-time keys and nonces never come from the seed.
        let report = make_location_report(&a.uav_id, &s.position, &key, &mut OsRng).map_err(invalid)?;
        msgs.push(build_message(&mut validator, &pseudonym, s.t_us, &shown, s.velocity, false, report)?);
    }
    let mut buf = Vec::new();
    write_trace(&mut buf, &msgs).map_err(|e| CliError::Io(e.to_string()))?;
    write_file(&a.out, &buf)
}

fn cmd_gen(a: &GenArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let center = geo_triple(&a.center, "center")?;
    let mut spec = TrajectorySpec::new(a.pattern, a.duration, a.period, a.speed).with_offset(a.offset);
    spec.altitude_m = a.altitude;
    let arena = Arena { center, delta_m: a.delta };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let g = gen_trajectory(&spec, &arena, &mut rng)?;
    let mut buf = format!("# seed={}\n", a.seed).into_bytes();
    write_trajectory(&mut buf, &g.trajectory)?;
    write_file(&a.out, &buf)?;
    let line = match g.invasion_interval_s {
        Some((t0, t1)) => format!("invasion_interval_s={t0},{t1}\n"),
        None => "invasion_interval_s=none\n".to_string(),
    };
    out.write_all(line.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SimConfigFile {
    delta: Option<f64>,
    rmax: Option<f64>,
    window: Option<f64>,
    epsilon: Option<f64>,
    d_scale: Option<f64>,
    alt_epsilon: Option<f64>,
    alt_d: Option<f64>,
    region: Option<Vec<f64>>,
    runs: Option<u64>,
    seed: Option<u64>,
    guessing: Option<bool>,
    zero_noise: Option<bool>,
    epsilon_grid: Option<Vec<f64>>,
    d_grid: Option<Vec<f64>>,
    w_grid: Option<Vec<f64>>,
}

struct SimSetup {
    traj: crate::sim::Trajectory,
    scenario: Scenario,
    config: SimConfigFile,
}

/// Flag, then config file, then built-in default.
fn pick<T: Copy>(flag: Option<T>, file: Option<T>) -> Option<T> {
    flag.or(file)
}

fn sim_setup(a: &SimArgs, grid_mode: bool) -> Result<SimSetup, CliError> {
    let config: SimConfigFile = match &a.config {
        Some(p) => toml::from_str(&read_file(p)?).map_err(|e| invalid(format!("{}: {}", p.display(), e.message())))?,
        None => SimConfigFile::default(),
    };
    let eps = pick(a.epsilon, config.epsilon);
    let d = pick(a.d_scale, config.d_scale);
    // A sweep may take its planar parameters from the grids alone.
    let (eps, d) = match (eps, d, grid_mode) {
        (Some(e), Some(d), _) => (e, d),
        (None, _, false) => return Err(invalid("missing --epsilon")),
        (_, None, false) => return Err(invalid("missing --d-scale")),
        (e, d, true) => (e.unwrap_or(1.0), d.unwrap_or(1.0)),
    };
    let planar = laplace(eps, d, "--epsilon/--d-scale")?;
    let altitude = laplace(
        pick(a.alt_epsilon, config.alt_epsilon).unwrap_or(DEFAULT_ALT_EPSILON),
        pick(a.alt_d, config.alt_d).unwrap_or(DEFAULT_ALT_D),
        "--alt-epsilon/--alt-d",
    )?;
    let region = region_from(a.region.as_deref().or(config.region.as_deref()), None)?;

    let receivers = read_receivers(read_file(&a.receivers)?.as_bytes()).map_err(with_path(&a.receivers))?;
    let traj = read_trajectory(read_file(&a.traj)?.as_bytes()).map_err(with_path(&a.traj))?;

    let mut scenario = Scenario::new(receivers.into_iter().map(|r| r.1).collect(), planar);
    scenario.altitude = altitude;
    scenario.region = region;
    scenario.delta_m = pick(a.delta, config.delta).unwrap_or(DEFAULT_DELTA_M);
    scenario.r_max_m = pick(a.rmax, config.rmax).unwrap_or(DEFAULT_R_MAX_M);
    scenario.window_s = pick(a.window, config.window).unwrap_or(DEFAULT_WINDOW_S);
    scenario.runs = pick(a.runs, config.runs).unwrap_or(DESK_RUNS);
    scenario.master_seed = pick(a.seed, config.seed).unwrap_or(0);
    scenario.guessing = a.guessing || config.guessing.unwrap_or(false);
    if a.zero_noise || config.zero_noise.unwrap_or(false) {
        scenario.noise = NoiseMode::Zero;
    }
    scenario.execution = Execution::Parallel;
    if a.jobs == Some(0) {
        return Err(invalid("--jobs must be >= 1"));
    }
    scenario.validate()?;
    Ok(SimSetup { traj, scenario, config })
}

fn metrics_bytes(s: &Scenario, rows: &[SweepRow]) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    write_metrics_csv(&mut buf, s.master_seed, s.runs, rows).map_err(|e| CliError::Io(e.to_string()))?;
    Ok(buf)
}

fn cmd_simulate(a: &SimArgs) -> Result<(), CliError> {
    let SimSetup { traj, scenario, .. } = sim_setup(a, false)?;
    let metrics = with_jobs(a.jobs, || run_simulation(&traj, &scenario))?;
    let row = SweepRow {
        epsilon: scenario.planar.epsilon(),
        d_scale: scenario.planar.d_scale(),
        window_s: scenario.window_s,
        metrics,
    };
    write_file(&a.out, &metrics_bytes(&scenario, &[row])?)
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), CliError> {
    let SimSetup { traj, scenario, config } = sim_setup(&a.sim, true)?;
    let axis = |flag: &Option<Vec<f64>>, file: Option<Vec<f64>>, single: Option<f64>, name: &str| {
        flag.clone()
            .or(file)
            .or(single.map(|v| vec![v]))
            .ok_or_else(|| invalid(format!("missing --{name}")))
    };
    let grid = SweepGrid {
        epsilons: axis(&a.epsilon_grid, config.epsilon_grid, pick(a.sim.epsilon, config.epsilon), "epsilon-grid")?,
        d_scales: axis(&a.d_grid, config.d_grid, pick(a.sim.d_scale, config.d_scale), "d-grid")?,
        windows: axis(&a.w_grid, config.w_grid, Some(scenario.window_s), "w-grid")?,
    };
    // Reject bad grid points before the long run starts.
    for &e in &grid.epsilons {
        for &d in &grid.d_scales {
            laplace(e, d, "--epsilon-grid/--d-grid")?;
        }
    }
    for &w in &grid.windows {
        let mut s = scenario.clone();
        s.window_s = w;
        s.validate().map_err(|e| invalid(format!("--w-grid: {e}")))?;
    }
    let rows = with_jobs(a.sim.jobs, || sweep(&traj, &scenario, &grid))?;
    write_file(&a.sim.out, &metrics_bytes(&scenario, &rows)?)
}

fn cmd_detect(a: &DetectArgs) -> Result<(), CliError> {
    let receiver = geo_triple(&a.receiver, "receiver")?;
    let config = DetectorConfig::new(receiver, a.delta, a.rmax, a.window, a.guessing).map_err(invalid)?;
    let msgs = load_trace(&a.trace)?;
    let mut buf = Vec::new();
    if let (Some(first), Some(last)) = (msgs.first(), msgs.last()) {
        let obs = msgs.iter().enumerate().map(|(i, m)| Observation::from_message(i, m));
        let rep = replay(config, first.timestamp_us(), obs, Some(last.timestamp_us())).map_err(invalid)?;
        for w in &rep.windows {
            serde_json::to_writer(&mut buf, w).map_err(|e| CliError::Io(e.to_string()))?;
            buf.push(b'\n');
        }
    }
    write_file(&a.out, &buf)
}

fn save_registry(path: &Path, reg: &Registry) -> Result<(), CliError> {
    reg.save(path).map_err(|e| match e {
        TtpError::Io(io) => io_err(path, io),
        other => invalid(other),
    })
}

fn cmd_ttp(c: &TtpCommand, out: &mut dyn Write) -> Result<(), CliError> {
    let print = |out: &mut dyn Write, s: String| {
        writeln!(out, "{s}").map_err(|e| CliError::Io(e.to_string()))
    };
    match c {
        TtpCommand::Init { registry, keys, seed, force } => {
            for p in [registry, keys] {
                if p.exists() && !force {
                    return Err(invalid(format!("{} exists (use --force)", p.display())));
                }
            }
            let pair = match seed {
                Some(s) => TtpKeyPair::generate(&mut ChaCha8Rng::seed_from_u64(*s)),
                None => TtpKeyPair::generate(&mut OsRng),
            };
            let json = serde_json::to_string_pretty(&pair.to_file()).map_err(|e| CliError::Io(e.to_string()))?;
            write_file(keys, json.as_bytes())?;
            save_registry(registry, &Registry::new())?;
            print(out, pair.public().to_base64())
        }
        TtpCommand::RegisterUav { registry, keys, id, pub_out } => {
            let reg = load_registry(registry)?;
            let mut ttp = Ttp::new(reg, load_keys(keys)?);
            let key = ttp.register_uav(id)?;
            save_registry(registry, ttp.registry())?;
            if let Some(p) = pub_out {
                write_file(p, format!("{}\n", key.to_base64()).as_bytes())?;
            }
            print(out, key.to_base64())
        }
        TtpCommand::RegisterCi { registry, lat, lon, alt, delta } => {
            let pos = GeoPosition::new(*lat, *lon, *alt).map_err(invalid)?;
            let mut reg = load_registry(registry)?;
            let id = reg.register_ci(pos, *delta)?;
            save_registry(registry, &reg)?;
            print(out, id.to_string())
        }
        TtpCommand::Verify { registry, keys, ci, trace } => {
            let ttp = Ttp::new(load_registry(registry)?, load_keys(keys)?);
            let msgs = load_trace(trace)?;
            let d = ttp.verify_report(CiId(*ci), &msgs)?;
            print(out, d.to_json())
        }
    }
}

/// Parses `argv` (program name first) and runs the subcommand, writing
/// normal output to `out`.
pub fn run<I, T>(argv: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version.
            return out.write_all(e.to_string().as_bytes()).map_err(|e| CliError::Io(e.to_string()));
        }
        Err(e) => {
            // Clap's report spans several lines; keep the part before the usage hint.
            let text = e.to_string();
            let msg: Vec<&str> = text
                .lines()
                .take_while(|l| !l.trim().is_empty() && !l.starts_with("Usage:"))
                .map(str::trim)
                .collect();
            return Err(invalid(msg.join(" ").trim_start_matches("error: ")));
        }
    };
    match &cli.command {
        Command::Sample { epsilon, d_scale, count, seed } => cmd_sample(*epsilon, *d_scale, *count, *seed, out),
        Command::Obfuscate(a) => cmd_obfuscate(a),
        Command::GenTrajectory(a) => cmd_gen(a, out),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Ttp(c) => cmd_ttp(c, out),
    }
}

/// Entry point for the binary: runs and maps the result to an exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(argv, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_str(args: &[&str]) -> Result<String, CliError> {
        let mut out = Vec::new();
        run(std::iter::once("diprid").chain(args.iter().copied()), &mut out)?;
        Ok(String::from_utf8(out).unwrap())
    }

    #[test]
    fn sample_is_deterministic() {
        let args = ["sample", "--epsilon", "1", "--d-scale", "1", "--count", "3", "--seed", "7"];
        let a = run_str(&args).unwrap();
        assert_eq!(a, run_str(&args).unwrap());
        let lines: Vec<&str> = a.lines().collect();
        assert_eq!(lines[0], "# seed=7");
        assert_eq!(lines.len(), 4);
        for l in &lines[1..] {
            assert!(l.parse::<f64>().unwrap() >= 0.0);
        }
    }

    #[test]
    fn errors_map_to_exit_codes() {
        let e = run_str(&["simulate", "--receivers", "r.csv", "--out", "m.csv"]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        assert!(e.to_string().contains("--traj"), "{e}");
        assert!(!e.to_string().contains('\n'));

        let e = run_str(&["sample", "--epsilon", "0", "--d-scale", "1", "--count", "1"]).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = run_str(&["sample", "--bogus"]).unwrap_err();
        assert_eq!(e.exit_code(), 1);

        let e = run_str(&[
            "simulate", "--traj", "/nonexistent/t.csv", "--receivers", "/nonexistent/r.csv",
            "--epsilon", "1", "--d-scale", "1", "--out", "/nonexistent/m.csv",
        ])
        .unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn help_is_not_an_error() {
        let h = run_str(&["--help"]).unwrap();
        assert!(h.contains("File formats"));
        assert!(run_str(&["ttp", "verify", "--help"]).unwrap().contains("--ci"));
    }
}
