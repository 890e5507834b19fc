use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mlio_core::dataset::{read_dataset, read_manifest, read_pose_csv, write_manifest, write_pose_csv};
use mlio_core::Posed;
use mlio_pipeline::{
    calibrate_dataset, evaluate, run_pipeline, write_ply, Mode, PipelineConfig, RunReport,
};
use mlio_simkit::scene::{SceneKind, Scenario};

#[derive(Parser)]
#[command(name = "mlio", version, about = "Multi-modal LiDAR-inertial odometry and mapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set swo.tau=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<Mode>,
    /// Run every stage on one thread.
    #[arg(long)]
    serial: bool,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: mlio_pipeline::PipelineError| e.to_string())
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        cfg.apply(self.set.iter().map(String::as_str))?;
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if self.serial {
            cfg.serial = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        #[arg(long, default_value = "office")]
        scene: SceneKind,
        #[arg(long)]
        out: PathBuf,
        /// Seed for LiDAR range noise and IMU noise.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Keep only the first seconds of the trajectory.
        #[arg(long)]
        duration: Option<f64>,
        /// LiDAR range noise standard deviation (m).
        #[arg(long)]
        range_noise: Option<f64>,
        /// Disable every noise source.
        #[arg(long)]
        noiseless: bool,
    },
    /// Estimate the spinning→solid-state extrinsic from the stationary prefix.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Store the estimate in the dataset manifest.
        #[arg(long)]
        write: bool,
    },
    /// Run odometry and mapping on a dataset.
    Run {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// JSON report path (stdout summary only when absent).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Trajectory CSV path.
        #[arg(long)]
        trajectory: Option<PathBuf>,
        /// PLY map path.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Pose-graph text export path.
        #[arg(long)]
        graph: Option<PathBuf>,
    },
    /// Score a trajectory CSV against ground truth.
    Evaluate {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        groundtruth: PathBuf,
    },
    /// Run a dataset and write only the world map.
    ExportMap {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn summary(report: &RunReport) -> String {
    let mut s = format!(
        "{} mode={} frames={} keyframes={} bad_frames={} loops={}",
        report.dataset,
        report.mode,
        report.frames_seen,
        report.keyframes,
        report.bad_frames,
        report.loop_closures.len()
    );
    if let Some(m) = report.metrics {
        s += &format!(" end_to_end_m={:.4} ate_rmse_m={:.4}", m.end_to_end_error_m, m.ate_rmse_m);
    }
    if let Some(d) = &report.diverged {
        s += &format!(" DIVERGED at frame {} (t={:.3}): {}", d.frame, d.t, d.reason);
    }
    s
}

fn simulate(
    scene: SceneKind,
    out: &Path,
    seed: u64,
    duration: Option<f64>,
    range_noise: Option<f64>,
    noiseless: bool,
) -> Result<()> {
    let mut sc = Scenario::preset(scene)?.with_seed(seed);
    if noiseless {
        sc = sc.noiseless();
    }
    if let Some(s) = range_noise {
        sc = sc.with_range_noise(s);
    }
    if let Some(d) = duration {
        sc = sc.truncated(d)?;
    }
    let m = sc.write(out)?;
    let count = |k: Option<&mlio_core::dataset::StreamManifest>| k.map_or(0, |s| s.scans.len());
    println!(
        "wrote {} to {}: {} spinning, {} solid-state sweeps",
        m.name,
        out.display(),
        count(m.spinning.as_ref()),
        count(m.solid_state.as_ref())
    );
    Ok(())
}

fn execute(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Simulate { scene, out, seed, duration, range_noise, noiseless } => {
            simulate(scene, &out, seed, duration, range_noise, noiseless)?;
        }
        Command::Calibrate { data, cfg, write } => {
            let cfg = cfg.resolve()?;
            let ds = read_dataset(&data)?;
            let (set, res) = calibrate_dataset(&ds, &cfg)?;
            let record = mlio_pipeline::ExtrinsicRecord::new(&set, Some(res.fitness));
            println!("{}", serde_json::to_string_pretty(&record)?);
            if write {
                let mut m = read_manifest(&data)?;
                m.extrinsic_v_to_h = Some(set.v_to_h().to_record());
                write_manifest(&data, &m)?;
            }
        }
        Command::Run { data, cfg, out, trajectory, map, graph } => {
            let cfg = cfg.resolve()?;
            let ds = read_dataset(&data)?;
            let res = run_pipeline(&ds, &cfg)?;
            if let Some(p) = out {
                write_text(&p, &res.report.to_json()?)?;
            }
            if let Some(p) = trajectory {
                write_pose_csv(&p, &res.report.poses())?;
            }
            if let Some(p) = map {
                write_ply(&p, &res.map)?;
            }
            if let Some(p) = graph {
                write_text(&p, &res.graph.to_text())?;
            }
            println!("{}", summary(&res.report));
            if res.report.is_diverged() {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Evaluate { trajectory, groundtruth } => {
            let est: Vec<(f64, Posed)> = read_pose_csv(&trajectory)?;
            let gt = read_pose_csv(&groundtruth)?;
            let m = evaluate(&est, &gt)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::ExportMap { data, cfg, out } => {
            let cfg = cfg.resolve()?;
            let ds = read_dataset(&data)?;
            let res = run_pipeline(&ds, &cfg)?;
            if res.map.is_empty() {
                bail!("run produced an empty map");
            }
            write_ply(&out, &res.map)?;
            println!("wrote {} points to {}", res.map.len(), out.display());
            if res.report.is_diverged() {
                return Ok(ExitCode::from(2));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// The error and its causes, skipping causes already quoted by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut msg = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !msg.ends_with(&c) {
            msg = format!("{msg}: {c}");
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::from(1)
        }
    }
}
