//! Online neural learning: the replay buffer, hybrid batch construction,
//! Fisher/EWC state, and the per-arrival twinning loop that coordinates with
//! asynchronous material tuning.
//!
//! One logical learner owns the model. Tuning episodes read an immutable
//! snapshot of (scene, assignment, dataset) and publish a complete new
//! assignment; the loop adopts a finished episode atomically before the next
//! batch is built. Episode latency is accounted on the measurement clock, so
//! runs with the same seed are bit-reproducible regardless of host timing.

use std::collections::VecDeque;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;
use crate::nrrf::{loss_and_gradient, mlp::Adam, NrrfModel};
use crate::raytracer;
use crate::scene::Scene;
use crate::tuner::{self, EpisodeLog, GeometryCache, MaterialAssignment, TuneError, TunerConfig};

/// One location-to-RSRP pair from the (synthetic) real network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub location: Vec3,
    pub rsrp_dbm: f64,
    pub sequence: u64,
    pub timestamp: f64,
}

/// Fixed-size FIFO of observed measurements; full pushes evict the oldest.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: VecDeque<Measurement>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        ReplayBuffer {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, m: Measurement) {
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(m);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn front(&self) -> Option<&Measurement> {
        self.entries.front()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Measurement> {
        self.entries.iter()
    }

    /// The most recent `n` entries, oldest first.
    pub fn recent(&self, n: usize) -> Vec<Measurement> {
        let skip = self.entries.len().saturating_sub(n);
        self.entries.iter().skip(skip).cloned().collect()
    }
}

/// Anchor weights, diagonal Fisher information, and the penalty strength.
#[derive(Debug, Clone)]
pub struct EwcState {
    pub anchor_weights: Vec<f64>,
    pub fisher_diag: Vec<f64>,
    pub lambda: f64,
}

/// The per-arrival training batch: replayed online points plus simulator
/// samples near the latest measurement.
#[derive(Debug, Clone)]
pub struct HybridBatch {
    pub online_points: Vec<Measurement>,
    pub simulated_points: Vec<(Vec3, f64)>,
}

impl HybridBatch {
    pub fn as_training_pairs(&self) -> Vec<(Vec3, f64)> {
        self.online_points
            .iter()
            .map(|m| (m.location, m.rsrp_dbm))
            .chain(self.simulated_points.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BatchConfig {
    pub online_count: usize,
    pub simulated_count: usize,
    pub proximal_radius_m: f64,
    pub rx_height_m: f64,
}

impl Default for BatchConfig {
    fn default() -> Self {
        BatchConfig {
            online_count: 16,
            simulated_count: 16,
            proximal_radius_m: 30.0,
            rx_height_m: 1.0,
        }
    }
}

/// Builds the hybrid batch: the latest point once, a uniform draw over the
/// rest of the buffer, and simulator-labeled locations inside a disc around
/// the latest point (clipped to bounds).
pub fn build_hybrid_batch(
    buffer: &ReplayBuffer,
    scene: &Scene,
    assignment: &MaterialAssignment,
    latest: &Measurement,
    config: &BatchConfig,
    rng: &mut ChaCha8Rng,
) -> HybridBatch {
    assert!(!buffer.is_empty(), "hybrid batch needs a nonempty buffer");
    let mut online_points = Vec::with_capacity(config.online_count);
    online_points.push(latest.clone());
    let others: Vec<&Measurement> = buffer
        .iter()
        .filter(|m| m.sequence != latest.sequence)
        .collect();
    while online_points.len() < config.online_count {
        if others.is_empty() {
            online_points.push(latest.clone());
        } else {
            online_points.push(others[rng.gen_range(0..others.len())].clone());
        }
    }

    let locations: Vec<Vec3> = (0..config.simulated_count)
        .map(|_| {
            let angle = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
            let radius = config.proximal_radius_m * rng.gen_range(0.0f64..1.0).sqrt();
            let raw = Vec3::new(
                latest.location.x + radius * angle.cos(),
                latest.location.y + radius * angle.sin(),
                config.rx_height_m,
            );
            let clipped = scene.bounds.clamp(raw.xy());
            Vec3::new(clipped.x, clipped.y, config.rx_height_m)
        })
        .collect();
    let simulated_points: Vec<(Vec3, f64)> = locations
        .par_iter()
        .map(|&loc| {
            let rsrp = raytracer::trace(scene, assignment, loc)
                .map(|r| r.rsrp_dbm)
                .unwrap_or(raytracer::RSRP_FLOOR_DBM);
            (loc, rsrp)
        })
        .collect();

    HybridBatch {
        online_points,
        simulated_points,
    }
}

/// Diagonal Fisher information over a buffer sample: the expected squared
/// gradient of the model's Gaussian log-likelihood, which for unit variance
/// on normalized targets is the mean squared prediction gradient. The anchor
/// is set to the current weights.
pub fn update_fisher(
    model: &NrrfModel,
    buffer: &ReplayBuffer,
    sample_size: usize,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> EwcState {
    assert!(!buffer.is_empty(), "fisher update needs a nonempty buffer");
    let all: Vec<&Measurement> = buffer.iter().collect();
    let picked: Vec<Vec3> = if all.len() <= sample_size {
        all.iter().map(|m| m.location).collect()
    } else {
        rand::seq::index::sample(rng, all.len(), sample_size)
            .into_iter()
            .map(|i| all[i].location)
            .collect()
    };
    let grads: Vec<Vec<f64>> = picked
        .par_iter()
        .map(|&loc| model.prediction_gradient(loc))
        .collect();
    let mut fisher = vec![0.0; model.num_params()];
    for g in &grads {
        for (f, v) in fisher.iter_mut().zip(g) {
            *f += v * v;
        }
    }
    let n = picked.len() as f64;
    for f in fisher.iter_mut() {
        *f /= n;
    }
    EwcState {
        anchor_weights: model.flatten_params(),
        fisher_diag: fisher,
        lambda,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub wall_ms: f64,
    pub final_loss: f64,
    pub aborted: bool,
}

/// Owns the model and its optimizer state across arrivals.
pub struct OnlineLearner {
    pub model: NrrfModel,
    pub adam: Adam,
    pub ewc: Option<EwcState>,
    pub anomalies: u64,
}

impl OnlineLearner {
    pub fn new(model: NrrfModel, learning_rate: f64, lr_decay: f64) -> OnlineLearner {
        let adam = Adam::new(model.num_params(), learning_rate, lr_decay);
        OnlineLearner {
            model,
            adam,
            ewc: None,
            anomalies: 0,
        }
    }

    /// Runs `steps` gradient updates on the batch. A non-finite loss restores
    /// the weights from before the offending step and stops early.
    pub fn online_step(&mut self, batch: &[(Vec3, f64)], steps: usize) -> StepStats {
        let started = Instant::now();
        let mut params = self.model.flatten_params();
        let mut final_loss = f64::NAN;
        let mut aborted = false;
        for _ in 0..steps {
            let snapshot = params.clone();
            let (loss, grad) = loss_and_gradient(&self.model, batch, self.ewc.as_ref());
            if !loss.is_finite() {
                self.model.set_params(&snapshot);
                self.anomalies += 1;
                aborted = true;
                break;
            }
            self.adam.step(&mut params, &grad);
            self.model.set_params(&params);
            final_loss = loss;
        }
        StepStats {
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            final_loss,
            aborted,
        }
    }
}

// ── The twinning loop ──────────────────────────────────────────────────────

/// How each arrival's training batch is assembled. `Hybrid` is the full
/// system; the others implement the comparison baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchStrategy {
    /// Replayed online points plus proximal enhanced-simulator samples.
    Hybrid,
    /// Only the latest `online+simulated` online points, no simulator data.
    LatestOnlineOnly,
    /// Only fresh proximal simulator samples (no online points).
    SimulatedOnly,
    /// Batches drawn from the entire pool of simulator samples accumulated
    /// over all arrivals.
    SimulatedPool,
}

#[derive(Debug, Clone)]
pub struct TuningRunConfig {
    pub tuner: TunerConfig,
    /// Simulated episode latency on the measurement clock, seconds.
    pub delay_s: f64,
}

#[derive(Debug, Clone)]
pub struct TwinningConfig {
    pub steps_per_arrival: usize,
    pub batch: BatchConfig,
    pub strategy: BatchStrategy,
    pub replay_capacity: usize,
    pub fisher_period: u64,
    pub fisher_sample: usize,
    pub ewc_lambda: f64,
    pub eval_period: u64,
    pub tuning: Option<TuningRunConfig>,
    pub seed: u64,
}

impl Default for TwinningConfig {
    fn default() -> Self {
        TwinningConfig {
            steps_per_arrival: 25,
            batch: BatchConfig::default(),
            strategy: BatchStrategy::Hybrid,
            replay_capacity: 4096,
            fisher_period: 50,
            fisher_sample: 512,
            ewc_lambda: 0.4,
            eval_period: 25,
            tuning: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRow {
    pub arrival_seq: u64,
    pub gap_ind_db: f64,
    pub gap_ood_db: f64,
    pub tuning_episode_id: Option<u64>,
    pub assignment_version: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpisodeRecord {
    pub episode_id: u64,
    pub started_seq: u64,
    pub adopted_seq: Option<u64>,
    pub log: EpisodeLog,
}

#[derive(Debug, Default, Clone, Serialize)]
pub struct RunTimings {
    pub update_wall_ms: Vec<f64>,
    pub episode_wall_ms: Vec<f64>,
}

pub struct RunLog {
    pub rows: Vec<RunRow>,
    pub episodes: Vec<EpisodeRecord>,
    pub timings: RunTimings,
    pub final_assignment: MaterialAssignment,
    pub anomalies: u64,
}

struct PendingEpisode {
    episode_id: u64,
    result: MaterialAssignment,
    ready_at: f64,
}

/// Streams measurements through the learner: push to the replay buffer,
/// build a batch against the current assignment snapshot, update the model,
/// refresh Fisher on its cadence, and run at most one tuning episode at a
/// time whose result is adopted once its simulated latency has elapsed.
///
/// `evaluate` maps the current model to (IND gap, OOD gap) for the log.
pub fn run_twinning(
    stream: &[Measurement],
    scene: &Scene,
    initial_assignment: MaterialAssignment,
    learner: &mut OnlineLearner,
    config: &TwinningConfig,
    mut evaluate: impl FnMut(&NrrfModel, &MaterialAssignment) -> (f64, f64),
) -> Result<RunLog, TuneError> {
    let mut buffer = ReplayBuffer::new(config.replay_capacity);
    let mut assignment = initial_assignment;
    let mut assignment_version = 0u64;
    let mut cache = GeometryCache::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x6c3a_9d41));
    let mut rows = Vec::new();
    let mut episodes: Vec<EpisodeRecord> = Vec::new();
    let mut timings = RunTimings::default();
    let mut pending: Option<PendingEpisode> = None;
    let mut sim_pool: Vec<(Vec3, f64)> = Vec::new();
    let mut next_episode_id = 1u64;

    let (g_ind, g_ood) = evaluate(&learner.model, &assignment);
    rows.push(RunRow {
        arrival_seq: 0,
        gap_ind_db: g_ind,
        gap_ood_db: g_ood,
        tuning_episode_id: None,
        assignment_version,
    });

    for (idx, m) in stream.iter().enumerate() {
        buffer.push(m.clone());
        let mut adopted_id = None;

        // Adopt a completed episode before anything touches the assignment.
        if let Some(p) = &pending {
            if m.timestamp >= p.ready_at {
                assignment = p.result.clone();
                assignment_version += 1;
                adopted_id = Some(p.episode_id);
                if let Some(rec) = episodes.iter_mut().find(|e| e.episode_id == p.episode_id) {
                    rec.adopted_seq = Some(m.sequence);
                }
                pending = None;
            }
        }

        // Synchronous tuning (zero delay) completes before this arrival's
        // batch is built.
        if let Some(tcfg) = &config.tuning {
            if tcfg.delay_s == 0.0 && pending.is_none() {
                if let Some((id, new_assignment)) = run_episode_now(
                    scene,
                    &assignment,
                    &buffer,
                    m,
                    tcfg,
                    &mut cache,
                    config.seed,
                    &mut next_episode_id,
                    &mut episodes,
                    &mut timings,
                )? {
                    assignment = new_assignment;
                    assignment_version += 1;
                    adopted_id = Some(id);
                    if let Some(rec) = episodes.iter_mut().find(|e| e.episode_id == id) {
                        rec.adopted_seq = Some(m.sequence);
                    }
                }
            }
        }

        // Build the training batch against the current assignment snapshot.
        let pairs: Vec<(Vec3, f64)> = match config.strategy {
            BatchStrategy::Hybrid => {
                build_hybrid_batch(&buffer, scene, &assignment, m, &config.batch, &mut rng)
                    .as_training_pairs()
            }
            BatchStrategy::LatestOnlineOnly => {
                let n = config.batch.online_count + config.batch.simulated_count;
                buffer
                    .recent(n)
                    .iter()
                    .map(|m| (m.location, m.rsrp_dbm))
                    .collect()
            }
            BatchStrategy::SimulatedOnly => {
                let sized = BatchConfig {
                    online_count: 1,
                    simulated_count: config.batch.online_count + config.batch.simulated_count,
                    ..config.batch
                };
                build_hybrid_batch(&buffer, scene, &assignment, m, &sized, &mut rng)
                    .simulated_points
            }
            BatchStrategy::SimulatedPool => {
                let sized = BatchConfig {
                    online_count: 1,
                    simulated_count: config.batch.simulated_count,
                    ..config.batch
                };
                let fresh = build_hybrid_batch(&buffer, scene, &assignment, m, &sized, &mut rng)
                    .simulated_points;
                sim_pool.extend(fresh);
                let want = config.batch.online_count + config.batch.simulated_count;
                (0..want)
                    .map(|_| sim_pool[rng.gen_range(0..sim_pool.len())])
                    .collect()
            }
        };

        let stats = learner.online_step(&pairs, config.steps_per_arrival);
        timings.update_wall_ms.push(stats.wall_ms);

        // Fisher refresh: at the first arrival and then on the period, so the
        // penalty protects pretrained knowledge from the start.
        if config.ewc_lambda > 0.0 && (idx as u64) % config.fisher_period == 0 {
            learner.ewc = Some(update_fisher(
                &learner.model,
                &buffer,
                config.fisher_sample,
                config.ewc_lambda,
                &mut rng,
            ));
        }

        // Launch an asynchronous episode if none is in flight.
        if let Some(tcfg) = &config.tuning {
            if tcfg.delay_s > 0.0 && pending.is_none() {
                if let Some((id, result)) = run_episode_now(
                    scene,
                    &assignment,
                    &buffer,
                    m,
                    tcfg,
                    &mut cache,
                    config.seed,
                    &mut next_episode_id,
                    &mut episodes,
                    &mut timings,
                )? {
                    pending = Some(PendingEpisode {
                        episode_id: id,
                        result,
                        ready_at: m.timestamp + tcfg.delay_s,
                    });
                }
            }
        }

        let seq = m.sequence;
        let is_last = idx + 1 == stream.len();
        if (idx as u64 + 1) % config.eval_period == 0 || is_last {
            let (g_ind, g_ood) = evaluate(&learner.model, &assignment);
            rows.push(RunRow {
                arrival_seq: seq,
                gap_ind_db: g_ind,
                gap_ood_db: g_ood,
                tuning_episode_id: adopted_id,
                assignment_version,
            });
        }
    }

    Ok(RunLog {
        rows,
        episodes,
        timings,
        final_assignment: assignment,
        anomalies: learner.anomalies,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_episode_now(
    scene: &Scene,
    assignment: &MaterialAssignment,
    buffer: &ReplayBuffer,
    latest: &Measurement,
    tcfg: &TuningRunConfig,
    cache: &mut GeometryCache,
    run_seed: u64,
    next_episode_id: &mut u64,
    episodes: &mut Vec<EpisodeRecord>,
    timings: &mut RunTimings,
) -> Result<Option<(u64, MaterialAssignment)>, TuneError> {
    let dataset = buffer.recent(tcfg.tuner.dataset_cap);
    let started = Instant::now();
    let episode_seed = run_seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(*next_episode_id);
    let (tuned, log) = tuner::tune(
        scene,
        assignment,
        &dataset,
        latest,
        &tcfg.tuner,
        cache,
        episode_seed,
    )?;
    if log.evals.is_empty() {
        return Ok(None);
    }
    let id = *next_episode_id;
    *next_episode_id += 1;
    timings.episode_wall_ms.push(started.elapsed().as_secs_f64() * 1e3);
    episodes.push(EpisodeRecord {
        episode_id: id,
        started_seq: latest.sequence,
        adopted_seq: None,
        log,
    });
    Ok(Some((id, tuned)))
}
