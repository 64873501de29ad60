//! Run configuration: JSON config files with CLI-flag overrides. Defaults
//! follow the paper profile where one is stated; the desk profile shrinks the
//! networks and render grid so everything runs on a laptop CPU.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use onetwin_core::nrrf::{EncodingConfig, NetConfig, RenderConfig};
use onetwin_core::worldbench::{MaterialMode, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[serde(alias = "oneTwin", alias = "onetwin")]
    OneTwin,
    BaselineSim,
    Nerf2Style,
    NrrfIl,
    NrrfBase,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "onetwin" => Ok(Mode::OneTwin),
            "baseline-sim" => Ok(Mode::BaselineSim),
            "nerf2-style" => Ok(Mode::Nerf2Style),
            "nrrf-il" => Ok(Mode::NrrfIl),
            "nrrf-base" => Ok(Mode::NrrfBase),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorldPreset {
    Small,
    Medium,
    Large,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub mode: Mode,
    pub profile: Profile,
    /// Seed for model init, batch sampling, and tuning episodes.
    pub seed: u64,
    pub out_dir: PathBuf,

    // World source: an exported world file, or a generated preset.
    pub world_file: Option<PathBuf>,
    pub world_preset: WorldPreset,
    pub world_seed: u64,
    pub world_mode: String,
    pub noise_sigma_db: f64,
    pub arrivals: usize,

    // Pretraining.
    pub checkpoint: Option<PathBuf>,
    pub pretrain_iterations: usize,
    pub pretrain_batch: usize,
    pub pretrain_grid_points: usize,
    pub pretrain_seed: u64,

    // Online learning.
    pub steps_per_arrival: usize,
    pub batch_online: usize,
    pub batch_simulated: usize,
    pub proximal_radius_m: f64,
    pub replay_capacity: usize,
    pub ewc_lambda: f64,
    pub fisher_period: u64,
    pub fisher_sample: usize,
    pub eval_period: u64,
    pub learning_rate: f64,
    pub lr_decay: f64,

    // Render overrides (None = profile default).
    pub render_azimuth: Option<usize>,
    pub render_elevation: Option<usize>,
    pub render_radial: Option<usize>,

    // Material tuning.
    pub tuning_enabled: bool,
    pub tuning_delay_s: f64,
    pub tuning_budget: usize,
    pub tuning_warm_start: usize,
    pub tuning_threshold_db: f64,
    pub tuning_cap: usize,
    /// Reduced (involved-objects) tuning; false switches to global episodes.
    pub reduced_tuning: bool,
    /// Restrict the tuner to the first k materials of the space.
    pub material_space_limit: Option<usize>,

    // Evaluation splits.
    pub ind_count: usize,
    pub ood_count: usize,
    pub ood_margin_m: f64,

    /// Debug dump of trace results (JSON lines), one per labeled location.
    pub dump_paths: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::OneTwin,
            profile: Profile::Desk,
            seed: 0,
            out_dir: PathBuf::from("out"),
            world_file: None,
            world_preset: WorldPreset::Medium,
            world_seed: 1,
            world_mode: "irreducible".into(),
            noise_sigma_db: 1.0,
            arrivals: 300,
            checkpoint: None,
            pretrain_iterations: 2000,
            pretrain_batch: 256,
            pretrain_grid_points: 2000,
            pretrain_seed: 7,
            steps_per_arrival: 25,
            batch_online: 16,
            batch_simulated: 16,
            proximal_radius_m: 30.0,
            replay_capacity: 4096,
            ewc_lambda: 0.4,
            fisher_period: 50,
            fisher_sample: 512,
            eval_period: 25,
            learning_rate: 1e-3,
            lr_decay: 5e-5,
            render_azimuth: None,
            render_elevation: None,
            render_radial: None,
            tuning_enabled: true,
            tuning_delay_s: 0.0,
            tuning_budget: 25,
            tuning_warm_start: 10,
            tuning_threshold_db: 25.0,
            tuning_cap: 4,
            reduced_tuning: true,
            material_space_limit: None,
            ind_count: 80,
            ood_count: 40,
            ood_margin_m: 80.0,
            dump_paths: None,
        }
    }
}

impl RunConfig {
    pub fn world_config(&self) -> Result<WorldConfig, String> {
        let mode = match self.world_mode.as_str() {
            "reducible" => MaterialMode::Reducible,
            "irreducible" => MaterialMode::Irreducible,
            other => return Err(format!("unknown world mode '{other}'")),
        };
        let mut cfg = match self.world_preset {
            WorldPreset::Small => WorldConfig::small(self.world_seed, mode),
            WorldPreset::Medium => WorldConfig::medium(self.world_seed, mode),
            WorldPreset::Large => WorldConfig::large(self.world_seed, mode),
        };
        cfg.noise_sigma_db = self.noise_sigma_db;
        Ok(cfg)
    }

    pub fn net_config(&self) -> NetConfig {
        match self.profile {
            Profile::Desk => NetConfig::desk(),
            Profile::Paper => NetConfig::paper(),
        }
    }

    pub fn encoding_config(&self) -> EncodingConfig {
        EncodingConfig::default()
    }

    pub fn render_config(&self, d_max: f64) -> RenderConfig {
        let mut r = match self.profile {
            Profile::Desk => RenderConfig::desk(d_max),
            Profile::Paper => RenderConfig {
                azimuth_steps: 32,
                elevation_steps: 8,
                radial_samples: 64,
                d_max,
                azimuth_offset: 0.0,
            },
        };
        if let Some(a) = self.render_azimuth {
            r.azimuth_steps = a;
        }
        if let Some(e) = self.render_elevation {
            r.elevation_steps = e;
        }
        if let Some(n) = self.render_radial {
            r.radial_samples = n;
        }
        r
    }
}
