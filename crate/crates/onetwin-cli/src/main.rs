//! `onetwin` binary: generate synthetic worlds, pretrain the radiance field,
//! run online twinning in any comparison mode, and evaluate checkpoints.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use onetwin_cli::config::{Mode, Profile, RunConfig, WorldPreset};
use onetwin_cli::harness;

#[derive(Parser)]
#[command(name = "onetwin", version, about = "Online digital network twin for RSRP prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    world_file: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    world_preset: Option<WorldPreset>,
    #[arg(long)]
    world_seed: Option<u64>,
    /// "reducible" or "irreducible".
    #[arg(long)]
    world_mode: Option<String>,
    #[arg(long)]
    noise_sigma_db: Option<f64>,
    #[arg(long)]
    arrivals: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    pretrain_iterations: Option<usize>,
    #[arg(long)]
    pretrain_batch: Option<usize>,
    #[arg(long)]
    pretrain_grid_points: Option<usize>,
    #[arg(long)]
    steps_per_arrival: Option<usize>,
    #[arg(long)]
    batch_online: Option<usize>,
    #[arg(long)]
    batch_simulated: Option<usize>,
    #[arg(long)]
    ewc_lambda: Option<f64>,
    #[arg(long)]
    eval_period: Option<u64>,
    #[arg(long)]
    render_azimuth: Option<usize>,
    #[arg(long)]
    render_elevation: Option<usize>,
    #[arg(long)]
    render_radial: Option<usize>,
    #[arg(long)]
    tuning_enabled: Option<bool>,
    /// Simulated tuning-episode latency in seconds (0 = synchronous).
    #[arg(long)]
    tuning_delay: Option<f64>,
    #[arg(long)]
    tuning_budget: Option<usize>,
    /// Reduced involved-object tuning (true) or global episodes (false).
    #[arg(long)]
    reduced_tuning: Option<bool>,
    /// Restrict the tuner to the first K materials of the space.
    #[arg(long)]
    material_space_limit: Option<usize>,
    /// Write per-location trace results as JSON lines to this file.
    #[arg(long)]
    dump_paths: Option<PathBuf>,
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    match s.to_ascii_lowercase().as_str() {
        "desk" => Ok(Profile::Desk),
        "paper" => Ok(Profile::Paper),
        other => Err(format!("unknown profile '{other}'")),
    }
}

fn parse_preset(s: &str) -> Result<WorldPreset, String> {
    match s.to_ascii_lowercase().as_str() {
        "small" => Ok(WorldPreset::Small),
        "medium" => Ok(WorldPreset::Medium),
        "large" => Ok(WorldPreset::Large),
        other => Err(format!("unknown world preset '{other}'")),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig, String> {
        let mut cfg: RunConfig = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| format!("cannot read config {path:?}: {e}"))?;
                serde_json::from_str(&text).map_err(|e| format!("bad config: {e}"))?
            }
            None => RunConfig::default(),
        };
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            };
        }
        take!(mode);
        take!(profile);
        take!(seed);
        take!(out_dir);
        take!(world_preset);
        take!(world_seed);
        take!(world_mode);
        take!(noise_sigma_db);
        take!(arrivals);
        take!(pretrain_iterations);
        take!(pretrain_batch);
        take!(pretrain_grid_points);
        take!(steps_per_arrival);
        take!(batch_online);
        take!(batch_simulated);
        take!(ewc_lambda);
        take!(eval_period);
        take!(tuning_budget);
        if let Some(v) = self.world_file.clone() {
            cfg.world_file = Some(v);
        }
        if let Some(v) = self.checkpoint.clone() {
            cfg.checkpoint = Some(v);
        }
        if let Some(v) = self.render_azimuth {
            cfg.render_azimuth = Some(v);
        }
        if let Some(v) = self.render_elevation {
            cfg.render_elevation = Some(v);
        }
        if let Some(v) = self.render_radial {
            cfg.render_radial = Some(v);
        }
        if let Some(v) = self.tuning_enabled {
            cfg.tuning_enabled = v;
        }
        if let Some(v) = self.tuning_delay {
            cfg.tuning_delay_s = v;
        }
        if let Some(v) = self.reduced_tuning {
            cfg.reduced_tuning = v;
        }
        if let Some(v) = self.material_space_limit {
            cfg.material_space_limit = Some(v);
        }
        if let Some(v) = self.dump_paths.clone() {
            cfg.dump_paths = Some(v);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world file (scene plus sealed truth block).
    GenWorld {
        #[command(flatten)]
        args: ConfigArgs,
        /// Output world file path.
        #[arg(long, default_value = "world.json")]
        out: PathBuf,
    },
    /// Pretrain the radiance field on calibrated-simulator samples.
    Pretrain {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Run online digital twinning in the configured mode.
    Run {
        #[command(flatten)]
        args: ConfigArgs,
    },
    /// Evaluate a checkpoint on a world split and print the gap report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world_file: PathBuf,
        /// IND, EXT, or OOD.
        #[arg(long, default_value = "IND")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a single tuning episode for debugging.
    TuneOnce {
        #[command(flatten)]
        args: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Runtime(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

enum AppError {
    Config(String),
    Runtime(anyhow::Error),
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::GenWorld { args, out } => {
            let cfg = args.resolve().map_err(AppError::Config)?;
            let path = harness::cmd_gen_world(&cfg, &out).map_err(AppError::Runtime)?;
            println!("world written to {}", path.display());
        }
        Command::Pretrain { args } => {
            let cfg = args.resolve().map_err(AppError::Config)?;
            let ckpt = harness::cmd_pretrain(&cfg).map_err(AppError::Runtime)?;
            println!("checkpoint written to {}", ckpt.display());
        }
        Command::Run { args } => {
            let cfg = args.resolve().map_err(AppError::Config)?;
            let outcome = harness::cmd_run(&cfg).map_err(AppError::Runtime)?;
            println!(
                "final gaps: IND {:.3} dB, OOD {:.3} dB ({} tuning episodes); artifacts in {}",
                outcome.final_ind_gap,
                outcome.final_ood_gap,
                outcome.episode_count,
                cfg.out_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            world_file,
            split,
            out,
        } => {
            let report =
                harness::cmd_eval(&checkpoint, &world_file, &split, out.as_deref())
                    .map_err(AppError::Runtime)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("serializable report")
            );
        }
        Command::TuneOnce { args } => {
            let cfg = args.resolve().map_err(AppError::Config)?;
            let outcome = harness::cmd_tune_once(&cfg).map_err(AppError::Runtime)?;
            println!(
                "sim gap {:.3} dB -> {:.3} dB in {} evaluations over {} dimensions",
                outcome.initial_ind_gap,
                outcome.final_ind_gap,
                outcome.total_evaluations,
                outcome.max_dims
            );
        }
    }
    Ok(())
}
