//! Experiment harness: wires worlds, streams, models, and the twinning loop
//! together for every run mode, and writes the run artifacts (CSV logs,
//! reports, timings, episode logs).
//!
//! Every mode shares one evaluation code path (`gap_against_truth`), so gap
//! numbers are comparable across modes.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use onetwin_core::geometry::Vec3;
use onetwin_core::nrrf::{
    load_checkpoint, pretrain, save_checkpoint, NormBox, NrrfModel, PretrainConfig,
};
use onetwin_core::online::{
    run_twinning, BatchConfig, BatchStrategy, Measurement, OnlineLearner, RunLog, TwinningConfig,
    TuningRunConfig,
};
use onetwin_core::raytracer;
use onetwin_core::scene::{assignment_from_scene, Scene};
use onetwin_core::tuner::{GeometryCache, MaterialAssignment, TunerConfig};
use onetwin_core::worldbench::{
    evaluate_gap, generate_world, load_world, make_splits, make_stream, truth_for_split,
    SplitConfig, Splits, SyntheticWorld, TrajectoryConfig, TwinGapReport,
};

use crate::config::{Mode, RunConfig};

pub struct PreparedWorld {
    pub world: SyntheticWorld,
    pub stream: Vec<Measurement>,
    pub splits: Splits,
    pub truth_ind: Vec<f64>,
    pub truth_ood: Vec<f64>,
}

pub fn prepare_world(cfg: &RunConfig) -> Result<PreparedWorld> {
    let world = match &cfg.world_file {
        Some(path) => load_world(path).with_context(|| format!("loading world {path:?}"))?,
        None => generate_world(&cfg.world_config().map_err(anyhow::Error::msg)?)?,
    };
    let stream = make_stream(&world, &TrajectoryConfig::road(cfg.arrivals.max(2)))?;
    let splits = make_splits(
        &world,
        &stream,
        &SplitConfig {
            ind_count: cfg.ind_count,
            ood_count: cfg.ood_count,
            ood_margin_m: cfg.ood_margin_m,
            seed: cfg.world_seed,
        },
    )?;
    let truth_ind = truth_for_split(&world, &splits.ind)?;
    let truth_ood = truth_for_split(&world, &splits.ood)?;
    Ok(PreparedWorld {
        world,
        stream,
        splits,
        truth_ind,
        truth_ood,
    })
}

/// Fresh model sized for the scene, before any training.
pub fn build_model(cfg: &RunConfig, scene: &Scene, seed: u64) -> NrrfModel {
    let max_h = scene
        .objects
        .iter()
        .map(|o| o.height)
        .fold(scene.tx.position.z, f64::max);
    let norm_box = NormBox {
        min: Vec3::new(scene.bounds.min.x, scene.bounds.min.y, 0.0),
        max: Vec3::new(scene.bounds.max.x, scene.bounds.max.y, max_h + 10.0),
    };
    NrrfModel::new(
        cfg.net_config(),
        cfg.encoding_config(),
        cfg.render_config(scene.d_max),
        (-150.0, -40.0),
        norm_box,
        scene.tx.position,
        seed,
    )
}

/// Evenly spaced grid over the scene bounds at receiver height, labeled by
/// the calibrated (public) simulator.
pub fn pretrain_dataset(scene: &Scene, rx_height: f64, points: usize) -> Vec<(Vec3, f64)> {
    use rayon::prelude::*;
    let assignment = assignment_from_scene(scene);
    let aspect = scene.bounds.width() / scene.bounds.depth();
    let ny = ((points as f64 / aspect).sqrt().round() as usize).max(2);
    let nx = (points / ny).max(2);
    let mut locs = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let fx = (ix as f64 + 0.5) / nx as f64;
            let fy = (iy as f64 + 0.5) / ny as f64;
            locs.push(Vec3::new(
                scene.bounds.min.x + fx * scene.bounds.width(),
                scene.bounds.min.y + fy * scene.bounds.depth(),
                rx_height,
            ));
        }
    }
    locs.par_iter()
        .map(|&loc| {
            let rsrp = raytracer::trace(scene, &assignment, loc)
                .map(|r| r.rsrp_dbm)
                .unwrap_or(raytracer::RSRP_FLOOR_DBM);
            (loc, rsrp)
        })
        .collect()
}

/// Pretrains a model for the prepared world, or loads the checkpoint when
/// one is configured.
pub fn pretrained_model(cfg: &RunConfig, prep: &PreparedWorld) -> Result<NrrfModel> {
    if let Some(path) = &cfg.checkpoint {
        return Ok(load_checkpoint(path)?);
    }
    let model = build_model(cfg, &prep.world.scene, cfg.pretrain_seed);
    let dataset = pretrain_dataset(
        &prep.world.scene,
        prep.world.rx_height_m,
        cfg.pretrain_grid_points,
    );
    let pcfg = PretrainConfig {
        iterations: cfg.pretrain_iterations,
        batch_size: cfg.pretrain_batch,
        learning_rate: cfg.learning_rate,
        lr_decay: cfg.lr_decay,
        holdout_every: 50,
    };
    let (model, _curve) = pretrain(model, &dataset, &pcfg, cfg.pretrain_seed)?;
    Ok(model)
}

fn mean_abs_gap(predicted: &[f64], truth: &[f64]) -> f64 {
    predicted
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / truth.len() as f64
}

fn model_gaps(model: &NrrfModel, prep: &PreparedWorld) -> (f64, f64) {
    let ind = model.predict_batch(&prep.splits.ind);
    let ood = model.predict_batch(&prep.splits.ood);
    (
        mean_abs_gap(&ind, &prep.truth_ind),
        mean_abs_gap(&ood, &prep.truth_ood),
    )
}

fn sim_gaps(scene: &Scene, assignment: &MaterialAssignment, prep: &PreparedWorld) -> (f64, f64) {
    use rayon::prelude::*;
    let predict = |locs: &[Vec3]| -> Vec<f64> {
        locs.par_iter()
            .map(|&l| {
                raytracer::trace(scene, assignment, l)
                    .map(|r| r.rsrp_dbm)
                    .unwrap_or(raytracer::RSRP_FLOOR_DBM)
            })
            .collect()
    };
    (
        mean_abs_gap(&predict(&prep.splits.ind), &prep.truth_ind),
        mean_abs_gap(&predict(&prep.splits.ood), &prep.truth_ood),
    )
}

pub struct RunOutcome {
    pub rows: Vec<onetwin_core::online::RunRow>,
    pub final_ind_gap: f64,
    pub final_ood_gap: f64,
    /// Mean of the IND gap over all logged rows (the run-long average).
    pub mean_ind_gap: f64,
    pub reports: Vec<TwinGapReport>,
    pub episode_count: usize,
    pub max_episode_dims: usize,
}

fn twinning_config(cfg: &RunConfig, strategy: BatchStrategy, ewc_lambda: f64, tuning: bool) -> TwinningConfig {
    TwinningConfig {
        steps_per_arrival: cfg.steps_per_arrival,
        batch: BatchConfig {
            online_count: cfg.batch_online,
            simulated_count: cfg.batch_simulated,
            proximal_radius_m: cfg.proximal_radius_m,
            rx_height_m: 1.0,
        },
        strategy,
        replay_capacity: cfg.replay_capacity,
        fisher_period: cfg.fisher_period,
        fisher_sample: cfg.fisher_sample,
        ewc_lambda,
        eval_period: cfg.eval_period,
        tuning: tuning.then(|| TuningRunConfig {
            tuner: TunerConfig {
                total_iterations: cfg.tuning_budget,
                warm_start: cfg.tuning_warm_start,
                threshold_db: cfg.tuning_threshold_db,
                cap: cfg.tuning_cap,
                space_limit: cfg.material_space_limit,
                ..TunerConfig::default()
            },
            delay_s: cfg.tuning_delay_s,
        }),
        seed: cfg.seed,
    }
}

/// Executes one run in the configured mode and writes all artifacts.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunOutcome> {
    let prep = prepare_world(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_config_echo(cfg)?;
    write_stream_csv(&cfg.out_dir.join("stream.csv"), &prep.stream)?;
    write_split_csvs(cfg, &prep)?;
    if let Some(path) = &cfg.dump_paths {
        dump_stream_paths(&prep, path)?;
    }

    let outcome = match cfg.mode {
        Mode::BaselineSim => run_baseline_sim(cfg, &prep)?,
        Mode::OneTwin => run_neural(cfg, &prep, BatchStrategy::Hybrid, cfg.ewc_lambda, cfg.tuning_enabled, true)?,
        Mode::Nerf2Style => run_neural(cfg, &prep, BatchStrategy::LatestOnlineOnly, 0.0, false, false)?,
        Mode::NrrfIl => run_neural(cfg, &prep, BatchStrategy::SimulatedOnly, cfg.ewc_lambda, cfg.tuning_enabled, true)?,
        Mode::NrrfBase => run_neural(cfg, &prep, BatchStrategy::SimulatedPool, 0.0, cfg.tuning_enabled, true)?,
    };

    write_reports(&cfg.out_dir.join("final_reports.json"), &outcome.reports)?;
    Ok(outcome)
}

fn run_baseline_sim(cfg: &RunConfig, prep: &PreparedWorld) -> Result<RunOutcome> {
    let scene = &prep.world.scene;
    let assignment = assignment_from_scene(scene);
    // The static simulator never changes, so its gap is computed once and
    // logged at the shared cadence.
    let (g_ind, g_ood) = sim_gaps(scene, &assignment, prep);
    let mut rows = vec![onetwin_core::online::RunRow {
        arrival_seq: 0,
        gap_ind_db: g_ind,
        gap_ood_db: g_ood,
        tuning_episode_id: None,
        assignment_version: 0,
    }];
    for (idx, m) in prep.stream.iter().enumerate() {
        let is_last = idx + 1 == prep.stream.len();
        if (idx as u64 + 1) % cfg.eval_period == 0 || is_last {
            rows.push(onetwin_core::online::RunRow {
                arrival_seq: m.sequence,
                gap_ind_db: g_ind,
                gap_ood_db: g_ood,
                tuning_episode_id: None,
                assignment_version: 0,
            });
        }
    }
    write_run_log(&cfg.out_dir.join("run_log.csv"), &rows)?;
    write_timings(&cfg.out_dir.join("timings.json"), &[], &[])?;
    std::fs::write(cfg.out_dir.join("episodes.jsonl"), "")?;

    let reports = vec![
        report_for(prep, &prep.splits.ind, "IND", |l| sim_predict(scene, &assignment, l))?,
        report_for(prep, &prep.splits.ext, "EXT", |l| sim_predict(scene, &assignment, l))?,
        report_for(prep, &prep.splits.ood, "OOD", |l| sim_predict(scene, &assignment, l))?,
    ];
    let mean_ind = rows.iter().map(|r| r.gap_ind_db).sum::<f64>() / rows.len() as f64;
    Ok(RunOutcome {
        final_ind_gap: g_ind,
        final_ood_gap: g_ood,
        mean_ind_gap: mean_ind,
        rows,
        reports,
        episode_count: 0,
        max_episode_dims: 0,
    })
}

fn sim_predict(scene: &Scene, assignment: &MaterialAssignment, l: Vec3) -> f64 {
    raytracer::trace(scene, assignment, l)
        .map(|r| r.rsrp_dbm)
        .unwrap_or(raytracer::RSRP_FLOOR_DBM)
}

fn run_neural(
    cfg: &RunConfig,
    prep: &PreparedWorld,
    strategy: BatchStrategy,
    ewc_lambda: f64,
    tuning: bool,
    start_pretrained: bool,
) -> Result<RunOutcome> {
    let scene = &prep.world.scene;
    let model = if start_pretrained {
        pretrained_model(cfg, prep)?
    } else {
        build_model(cfg, scene, cfg.seed)
    };
    let mut learner = OnlineLearner::new(model, cfg.learning_rate, cfg.lr_decay);
    let assignment = assignment_from_scene(scene);
    let tcfg = twinning_config(cfg, strategy, ewc_lambda, tuning);

    let log: RunLog = run_twinning(
        &prep.stream,
        scene,
        assignment,
        &mut learner,
        &tcfg,
        |model, _assignment| model_gaps(model, prep),
    )?;

    write_run_log(&cfg.out_dir.join("run_log.csv"), &log.rows)?;
    write_episodes(&cfg.out_dir.join("episodes.jsonl"), &log.episodes)?;
    write_timings(
        &cfg.out_dir.join("timings.json"),
        &log.timings.update_wall_ms,
        &log.timings.episode_wall_ms,
    )?;

    let model = &learner.model;
    let reports = vec![
        report_for(prep, &prep.splits.ind, "IND", |l| model.predict_rsrp(l))?,
        report_for(prep, &prep.splits.ext, "EXT", |l| model.predict_rsrp(l))?,
        report_for(prep, &prep.splits.ood, "OOD", |l| model.predict_rsrp(l))?,
    ];

    let last = log.rows.last().expect("at least the initial row");
    let mean_ind = log.rows.iter().map(|r| r.gap_ind_db).sum::<f64>() / log.rows.len() as f64;
    Ok(RunOutcome {
        final_ind_gap: last.gap_ind_db,
        final_ood_gap: last.gap_ood_db,
        mean_ind_gap: mean_ind,
        episode_count: log.episodes.len(),
        max_episode_dims: log.episodes.iter().map(|e| e.log.dimensions).max().unwrap_or(0),
        rows: log.rows,
        reports,
    })
}

fn report_for(
    prep: &PreparedWorld,
    split: &[Vec3],
    name: &str,
    predictor: impl FnMut(Vec3) -> f64,
) -> Result<TwinGapReport> {
    Ok(evaluate_gap(predictor, &prep.world, split, name)?)
}

// ── Simulator-only tuning benchmark (reduced vs global) ────────────────────

pub struct SimTuneOutcome {
    pub final_ind_gap: f64,
    pub initial_ind_gap: f64,
    pub episode_count: usize,
    pub max_dims: usize,
    pub total_evaluations: usize,
}

/// Streams measurements through tuning episodes only (no neural model) and
/// reports the enhanced simulator's gap on the IND split.
pub fn sim_tuning_benchmark(
    prep: &PreparedWorld,
    reduced: bool,
    tuner_cfg: &TunerConfig,
    episode_every: usize,
    seed: u64,
) -> Result<SimTuneOutcome> {
    use onetwin_core::tuner::{tune, tune_global};
    let scene = &prep.world.scene;
    let mut assignment = assignment_from_scene(scene);
    let mut cache = GeometryCache::new();
    let (initial, _) = sim_gaps(scene, &assignment, prep);
    let mut episode_count = 0;
    let mut max_dims = 0;
    let mut total_evals = 0;
    let mut history: Vec<Measurement> = Vec::new();
    for (idx, m) in prep.stream.iter().enumerate() {
        history.push(m.clone());
        if (idx + 1) % episode_every != 0 {
            continue;
        }
        let dataset: Vec<Measurement> = history
            .iter()
            .rev()
            .take(tuner_cfg.dataset_cap)
            .rev()
            .cloned()
            .collect();
        let episode_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(idx as u64);
        let (tuned, log) = if reduced {
            tune(scene, &assignment, &dataset, m, tuner_cfg, &mut cache, episode_seed)?
        } else {
            tune_global(scene, &assignment, &dataset, tuner_cfg, &mut cache, episode_seed)?
        };
        if !log.evals.is_empty() {
            episode_count += 1;
            max_dims = max_dims.max(log.dimensions);
            total_evals += log.evals.len();
            assignment = tuned;
        }
    }
    let (final_gap, _) = sim_gaps(scene, &assignment, prep);
    Ok(SimTuneOutcome {
        final_ind_gap: final_gap,
        initial_ind_gap: initial,
        episode_count,
        max_dims,
        total_evaluations: total_evals,
    })
}

// ── Artifact writers ───────────────────────────────────────────────────────

fn fmt_f64(v: f64) -> String {
    // Shortest round-trip formatting; deterministic for a given binary.
    format!("{v}")
}

pub fn write_config_echo(cfg: &RunConfig) -> Result<()> {
    let mut echo = serde_json::to_value(cfg)?;
    echo["version"] = serde_json::json!(env!("CARGO_PKG_VERSION"));
    std::fs::write(
        cfg.out_dir.join("config.json"),
        serde_json::to_string_pretty(&echo)?,
    )?;
    Ok(())
}

pub fn write_run_log(path: &Path, rows: &[onetwin_core::online::RunRow]) -> Result<()> {
    let mut out = String::from("arrival_seq,gap_ind_db,gap_ood_db,tuning_episode_id,assignment_version\n");
    for r in rows {
        let ep = r
            .tuning_episode_id
            .map(|v| v.to_string())
            .unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.arrival_seq,
            fmt_f64(r.gap_ind_db),
            fmt_f64(r.gap_ood_db),
            ep,
            r.assignment_version
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_stream_csv(path: &Path, stream: &[Measurement]) -> Result<()> {
    let mut out = String::from("seq,x,y,z,rsrp_dbm\n");
    for m in stream {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            m.sequence,
            fmt_f64(m.location.x),
            fmt_f64(m.location.y),
            fmt_f64(m.location.z),
            fmt_f64(m.rsrp_dbm)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn write_split_csvs(cfg: &RunConfig, prep: &PreparedWorld) -> Result<()> {
    for (name, locs) in [
        ("ind", &prep.splits.ind),
        ("ext", &prep.splits.ext),
        ("ood", &prep.splits.ood),
    ] {
        let truth = truth_for_split(&prep.world, locs)?;
        let mut out = String::from("seq,x,y,z,rsrp_dbm\n");
        for (i, (l, t)) in locs.iter().zip(&truth).enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                i,
                fmt_f64(l.x),
                fmt_f64(l.y),
                fmt_f64(l.z),
                fmt_f64(*t)
            ));
        }
        std::fs::write(cfg.out_dir.join(format!("split_{name}.csv")), out)?;
    }
    Ok(())
}

pub fn write_episodes(path: &Path, episodes: &[onetwin_core::online::EpisodeRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for ep in episodes {
        for eval in &ep.log.evals {
            let line = serde_json::json!({
                "episode_id": ep.episode_id,
                "started_seq": ep.started_seq,
                "adopted_seq": ep.adopted_seq,
                "iter": eval.iter,
                "candidate": eval.candidate,
                "objective": eval.objective,
                "best_so_far": eval.best_so_far,
                "wall_ms": eval.wall_ms,
            });
            writeln!(f, "{line}")?;
        }
    }
    Ok(())
}

#[derive(serde::Serialize)]
struct TimingStats {
    count: usize,
    mean_ms: f64,
    max_ms: f64,
}

fn stats(values: &[f64]) -> TimingStats {
    if values.is_empty() {
        return TimingStats {
            count: 0,
            mean_ms: 0.0,
            max_ms: 0.0,
        };
    }
    TimingStats {
        count: values.len(),
        mean_ms: values.iter().sum::<f64>() / values.len() as f64,
        max_ms: values.iter().cloned().fold(0.0, f64::max),
    }
}

/// Wall-clock statistics live outside the CSV logs so repeated runs with the
/// same seed produce byte-identical CSVs.
pub fn write_timings(path: &Path, update_ms: &[f64], episode_ms: &[f64]) -> Result<()> {
    let v = serde_json::json!({
        "online_update": stats(update_ms),
        "tuning_episode": stats(episode_ms),
    });
    std::fs::write(path, serde_json::to_string_pretty(&v)?)?;
    Ok(())
}

pub fn write_reports(path: &Path, reports: &[TwinGapReport]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(reports)?)?;
    Ok(())
}

fn dump_stream_paths(prep: &PreparedWorld, path: &Path) -> Result<()> {
    let scene = &prep.world.scene;
    let assignment = assignment_from_scene(scene);
    let mut f = std::fs::File::create(path)?;
    for m in &prep.stream {
        let r = raytracer::trace(scene, &assignment, m.location)
            .map_err(|e| anyhow::anyhow!("trace failed: {e}"))?;
        writeln!(f, "{}", serde_json::to_string(&r)?)?;
    }
    Ok(())
}

// ── Other commands ─────────────────────────────────────────────────────────

pub fn cmd_gen_world(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let world = generate_world(&cfg.world_config().map_err(anyhow::Error::msg)?)?;
    std::fs::create_dir_all(out.parent().unwrap_or(Path::new(".")))?;
    onetwin_core::worldbench::save_world(&world, out)?;
    Ok(out.to_path_buf())
}

pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let prep = prepare_world(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_config_echo(cfg)?;
    let model = build_model(cfg, &prep.world.scene, cfg.pretrain_seed);
    let dataset = pretrain_dataset(
        &prep.world.scene,
        prep.world.rx_height_m,
        cfg.pretrain_grid_points,
    );
    let pcfg = PretrainConfig {
        iterations: cfg.pretrain_iterations,
        batch_size: cfg.pretrain_batch,
        learning_rate: cfg.learning_rate,
        lr_decay: cfg.lr_decay,
        holdout_every: 50,
    };
    let (model, curve) = pretrain(model, &dataset, &pcfg, cfg.pretrain_seed)?;
    let ckpt = cfg.out_dir.join("checkpoint.json");
    save_checkpoint(&model, &ckpt)?;
    let mut csv = String::from("iteration,train_loss,holdout_mse\n");
    for p in &curve {
        csv.push_str(&format!(
            "{},{},{}\n",
            p.iteration,
            fmt_f64(p.train_loss),
            p.holdout_mse.map(fmt_f64).unwrap_or_default()
        ));
    }
    std::fs::write(cfg.out_dir.join("pretrain_curve.csv"), csv)?;
    Ok(ckpt)
}

pub fn cmd_eval(checkpoint: &Path, world_file: &Path, split: &str, out: Option<&Path>) -> Result<TwinGapReport> {
    let model = load_checkpoint(checkpoint)?;
    let world = load_world(world_file)?;
    let stream = make_stream(&world, &TrajectoryConfig::road(200))?;
    let splits = make_splits(&world, &stream, &SplitConfig::default())?;
    let locs = match split.to_ascii_uppercase().as_str() {
        "IND" => &splits.ind,
        "EXT" => &splits.ext,
        "OOD" => &splits.ood,
        other => bail!("unknown split '{other}' (expected IND, EXT, or OOD)"),
    };
    let report = evaluate_gap(
        |l| model.predict_rsrp(l),
        &world,
        locs,
        &split.to_ascii_uppercase(),
    )?;
    if let Some(path) = out {
        write_reports(path, std::slice::from_ref(&report))?;
    }
    Ok(report)
}

pub fn cmd_tune_once(cfg: &RunConfig) -> Result<SimTuneOutcome> {
    let prep = prepare_world(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let tuner_cfg = TunerConfig {
        total_iterations: cfg.tuning_budget,
        warm_start: cfg.tuning_warm_start,
        threshold_db: cfg.tuning_threshold_db,
        cap: cfg.tuning_cap,
        space_limit: cfg.material_space_limit,
        ..TunerConfig::default()
    };
    // One episode at the last stream point.
    let scene = &prep.world.scene;
    let assignment = assignment_from_scene(scene);
    let mut cache = GeometryCache::new();
    let latest = prep.stream.last().expect("nonempty stream").clone();
    let (tuned, log) = if cfg.reduced_tuning {
        onetwin_core::tuner::tune(
            scene,
            &assignment,
            &prep.stream,
            &latest,
            &tuner_cfg,
            &mut cache,
            cfg.seed,
        )?
    } else {
        onetwin_core::tuner::tune_global(
            scene,
            &assignment,
            &prep.stream,
            &tuner_cfg,
            &mut cache,
            cfg.seed,
        )?
    };
    let episodes = vec![onetwin_core::online::EpisodeRecord {
        episode_id: 1,
        started_seq: latest.sequence,
        adopted_seq: None,
        log: log.clone(),
    }];
    write_episodes(&cfg.out_dir.join("episodes.jsonl"), &episodes)?;
    if let Some(path) = &cfg.dump_paths {
        dump_stream_paths(&prep, path)?;
    }
    let (before, _) = sim_gaps(scene, &assignment, &prep);
    let (after, _) = sim_gaps(scene, &tuned, &prep);
    Ok(SimTuneOutcome {
        final_ind_gap: after,
        initial_ind_gap: before,
        episode_count: if log.evals.is_empty() { 0 } else { 1 },
        max_dims: log.dimensions,
        total_evaluations: log.evals.len(),
    })
}
