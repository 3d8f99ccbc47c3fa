//! Command-line front end: offline batch calibration, dataset simulation and
//! guided sessions.
//!
//! Exit codes: 0 success, 1 session aborted or other failure, 2 the data
//! cannot constrain the calibration, 3 I/O or schema errors.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vical::calib::{calibrate_cameras, calibrate_imu, CalibError, CalibResult};
use vical::config::{ConfigError, SessionConfig};
use vical::session::driver::SimSession;
use vical::session::server::{self, ServeOptions};
use vical::session::{replay, run_simulated, DriverOptions, Event, SessionError, SessionOutcome, SessionPlan, SessionRecord};
use vical::sim::{Dataset, DatasetError, RigSpec, Script, SimOptions};

#[derive(Parser)]
#[command(name = "calib", version, about = "Guided visual-inertial calibration")]
struct Cli {
    /// Log filter, e.g. `info` or `vical=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Batch camera calibration of a dataset.
    Camera {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Batch camera-IMU calibration given a camera result.
    Imu {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        camera_result: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Record a dataset by playing a motion script through the simulator.
    Simulate {
        /// JSON motion script; a static recording when omitted.
        #[arg(long)]
        script: Option<PathBuf>,
        #[command(flatten)]
        sim: SimArgs,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Guided calibration sessions.
    Session {
        #[command(subcommand)]
        command: SessionCmd,
    },
}

#[derive(Subcommand)]
enum SessionCmd {
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sim,
    Replay,
}

#[derive(Clone, Copy, ValueEnum)]
enum Plan {
    Full,
    CameraOnly,
}

#[derive(Args)]
struct SimArgs {
    /// JSON rig description; the default stereo rig when omitted.
    #[arg(long)]
    rig: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "full")]
    plan: Plan,
    /// Skip the camera stage and use this camera result.
    #[arg(long, conflicts_with = "plan")]
    camera_result: Option<PathBuf>,
    /// Recorded session to replay (replay mode).
    #[arg(long, required_if_eq("mode", "replay"))]
    dataset: Option<PathBuf>,
    /// Write the recording of the session here.
    #[arg(long)]
    record: Option<PathBuf>,
    /// Write the protocol events here as NDJSON.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Directory for `camera_result.json` and `imu_result.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Serve the protocol over WebSocket at this address (sim mode).
    #[arg(long)]
    serve: Option<SocketAddr>,
    /// Follow suggestions automatically in serve mode.
    #[arg(long)]
    autopilot: bool,
    /// Pace a served simulation to wall-clock time.
    #[arg(long)]
    realtime: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {msg}")]
    File { path: PathBuf, msg: String },
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("session aborted: {0}")]
    Aborted(String),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn file(path: &Path, msg: impl ToString) -> Self {
        Self::File {
            path: path.to_path_buf(),
            msg: msg.to_string(),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            Self::Calib(e) if e.is_unobservable() => 2,
            Self::Session(e) if e.is_unobservable() => 2,
            Self::Config(_) | Self::Dataset(_) | Self::File { .. } | Self::Usage(_) => 3,
            Self::Session(SessionError::Dataset(_) | SessionError::Record { .. } | SessionError::Config(_)) => 3,
            _ => 1,
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<SessionConfig, CliError> {
    Ok(match path {
        Some(p) => SessionConfig::load(p)?,
        None => SessionConfig::default(),
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::file(path, e))
}

fn load_rig(args: &SimArgs) -> Result<RigSpec, CliError> {
    let rig = match &args.rig {
        Some(p) => read_json(p)?,
        None => RigSpec::default_stereo(),
    };
    rig.validate().map_err(CliError::Usage)?;
    Ok(rig)
}

fn write_result(result: &CalibResult, path: &Path) -> Result<(), CliError> {
    result.write(path).map_err(|e| CliError::file(path, e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Cmd::Camera { dataset, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let ds = Dataset::read(&dataset)?;
            let res = calibrate_cameras(&cfg.target, &ds.frames(), ds.camera_count(), &cfg)?;
            write_result(&res, &out)
        }
        Cmd::Imu {
            dataset,
            camera_result,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = Dataset::read(&dataset)?;
            let camera = CalibResult::read(&camera_result).map_err(|e| CliError::file(&camera_result, e))?;
            let res = calibrate_imu(&cfg.target, &ds.frames(), &ds.imu, &camera, &cfg)?;
            write_result(&res, &out)
        }
        Cmd::Simulate { script, sim, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let rig = load_rig(&sim)?;
            let script: Script = match &script {
                Some(p) => read_json(p)?,
                None => Script::default(),
            };
            let ds = script.run(&rig, &cfg.nbt, SimOptions::default(), sim.seed);
            ds.write(&out)?;
            Ok(())
        }
        Cmd::Session {
            command: SessionCmd::Run(args),
        } => run_session(args),
    }
}

struct EventLog(Option<BufWriter<File>>);

impl EventLog {
    fn create(path: Option<&Path>) -> Result<Self, CliError> {
        let file = path
            .map(|p| File::create(p).map_err(|e| CliError::file(p, e)))
            .transpose()?;
        Ok(Self(file.map(BufWriter::new)))
    }

    fn push(&mut self, e: &Event) {
        if let Some(w) = &mut self.0 {
            if let Err(err) = writeln!(w, "{}", e.to_line()) {
                log::error!("event log: {err}");
                self.0 = None;
            }
        }
    }

    fn finish(mut self, path: Option<&Path>) -> Result<(), CliError> {
        match (&mut self.0, path) {
            (Some(w), Some(p)) => w.flush().map_err(|e| CliError::file(p, e)),
            _ => Ok(()),
        }
    }
}

fn run_session(args: RunArgs) -> Result<(), CliError> {
    let mut log = EventLog::create(args.events.as_deref())?;
    let outcome = match args.mode {
        Mode::Replay => {
            let dir = args.dataset.as_deref().expect("clap requires --dataset in replay mode");
            let record = SessionRecord::read(dir)?;
            let data = Dataset::read(dir)?;
            replay(&record, &data, |e| log.push(e))?
        }
        Mode::Sim => {
            let cfg = load_config(args.config.as_deref())?;
            let rig = load_rig(&args.sim)?;
            let plan = match (&args.camera_result, args.plan) {
                (Some(p), _) => SessionPlan::ImuOnly {
                    camera: Box::new(CalibResult::read(p).map_err(|e| CliError::file(p, e))?),
                },
                (None, Plan::Full) => SessionPlan::Full,
                (None, Plan::CameraOnly) => SessionPlan::CameraOnly,
            };
            let opts = DriverOptions {
                seed: args.sim.seed,
                ..Default::default()
            };
            match args.serve {
                Some(addr) => serve(cfg, rig, plan, opts, &args, addr)?,
                None => run_simulated(cfg, rig, plan, opts, |e| log.push(e))?,
            }
        }
    };
    log.finish(args.events.as_deref())?;
    if let Some(dir) = &args.record {
        outcome.record.write(dir)?;
        outcome.dataset.write(dir)?;
    }
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::file(dir, e))?;
        if let Some(r) = &outcome.camera {
            write_result(r, &dir.join("camera_result.json"))?;
        }
        if let Some(r) = &outcome.imu {
            write_result(r, &dir.join("imu_result.json"))?;
        }
    }
    match outcome.aborted {
        Some(reason) => Err(CliError::Aborted(reason)),
        None => Ok(()),
    }
}

fn serve(
    cfg: SessionConfig,
    rig: RigSpec,
    plan: SessionPlan,
    opts: DriverOptions,
    args: &RunArgs,
    addr: SocketAddr,
) -> Result<SessionOutcome, CliError> {
    let session = SimSession::new(cfg, rig, plan, opts, args.autopilot)?;
    let handle = server::spawn(
        session,
        ServeOptions {
            addr,
            realtime: args.realtime,
            linger: Duration::from_secs(1),
        },
    )
    .map_err(|e| CliError::Usage(format!("cannot serve on {addr}: {e}")))?;
    eprintln!("serving ws://{}/ws", handle.local_addr);
    Ok(handle.join()?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
