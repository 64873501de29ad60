//! Automatic material tuning: reduce the full assignment problem to the
//! objects involved at the latest measurement, then search the categorical
//! space with GP/EI Bayesian optimization.
//!
//! Episodes evaluate the mean absolute simulator error over the accumulated
//! measurement window. Path geometry never depends on materials, so each
//! location is traced once and every candidate assignment is re-scored
//! through [`rsrp_from_paths`].

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{FaceOwner, Vec3};
use crate::online::Measurement;
use crate::raytracer::{self, PathSegmentChain, TraceError};
use crate::scene::Scene;
use crate::surrogate::{
    expected_improvement, GpModel, KernelConfig, KernelFamily, OneHotCodec, SurrogateError,
};

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("objective needs a nonempty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

/// The decision variable: a material index per object plus the ground.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaterialAssignment {
    pub object_materials: BTreeMap<u32, usize>,
    pub ground_material: usize,
}

impl MaterialAssignment {
    pub fn covers(&self, scene: &Scene) -> bool {
        scene.objects.len() == self.object_materials.len()
            && scene.objects.iter().all(|o| {
                self.object_materials
                    .get(&o.id)
                    .is_some_and(|&m| m < scene.material_space.len())
            })
            && self.ground_material < scene.material_space.len()
    }
}

/// A tunable slot: one object's material or the ground's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Slot {
    Object(u32),
    Ground,
}

#[derive(Debug, Clone)]
pub struct TunerConfig {
    pub total_iterations: usize,
    pub warm_start: usize,
    pub threshold_db: f64,
    pub cap: usize,
    pub dataset_cap: usize,
    /// Enumerate the whole candidate space when it has at most this many points.
    pub enum_limit: usize,
    /// Pool size when the space is too large to enumerate.
    pub pool_samples: usize,
    pub epsilon: f64,
    pub kernel: KernelFamily,
    pub noise_variance: f64,
    pub include_ground: bool,
    /// Restrict candidates to the first `k` materials of the space when set.
    pub space_limit: Option<usize>,
}

impl Default for TunerConfig {
    fn default() -> Self {
        TunerConfig {
            total_iterations: 25,
            warm_start: 10,
            threshold_db: 25.0,
            cap: 4,
            dataset_cap: 200,
            enum_limit: 4096,
            pool_samples: 4096,
            epsilon: 0.01,
            kernel: KernelFamily::Matern52,
            noise_variance: 1e-6,
            include_ground: false,
            space_limit: None,
        }
    }
}

/// One evaluated candidate in an episode log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub iter: usize,
    pub candidate: BTreeMap<String, usize>,
    pub objective: f64,
    pub best_so_far: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub focus: Vec<Slot>,
    pub evals: Vec<EpisodeEval>,
    pub best_objective: f64,
    /// Encoded search dimensionality |K| * B.
    pub dimensions: usize,
}

/// Per-location path geometry, traced once and shared across candidates and
/// episodes of a run.
#[derive(Debug, Default)]
pub struct GeometryCache {
    entries: BTreeMap<(u64, u64, u64), Vec<PathSegmentChain>>,
}

impl GeometryCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn paths(
        &mut self,
        scene: &Scene,
        assignment: &MaterialAssignment,
        location: Vec3,
    ) -> Result<&Vec<PathSegmentChain>, TraceError> {
        let key = (
            location.x.to_bits(),
            location.y.to_bits(),
            location.z.to_bits(),
        );
        if !self.entries.contains_key(&key) {
            let result = raytracer::trace(scene, assignment, location)?;
            self.entries.insert(key, result.paths);
        }
        Ok(&self.entries[&key])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Mean absolute error between the simulator under `assignment` and the
/// measured RSRPs, over the (capped) dataset.
pub fn objective(
    scene: &Scene,
    assignment: &MaterialAssignment,
    dataset: &[Measurement],
    cache: &mut GeometryCache,
) -> Result<f64, TuneError> {
    if dataset.is_empty() {
        return Err(TuneError::EmptyDataset);
    }
    let mut total = 0.0;
    for m in dataset {
        let paths = cache.paths(scene, assignment, m.location)?;
        let sim = raytracer::rsrp_from_paths(paths, assignment, &scene.material_space, &scene.tx);
        total += (sim - m.rsrp_dbm).abs();
    }
    Ok(total / dataset.len() as f64)
}

/// Trace at the latest measurement and keep the strongest involved objects.
/// An empty result means no tuning is possible at this point.
pub fn reduce(
    scene: &Scene,
    assignment: &MaterialAssignment,
    latest: &Measurement,
    threshold_db: f64,
    cap: usize,
) -> Result<Vec<u32>, TuneError> {
    let result = raytracer::trace(scene, assignment, latest.location)?;
    Ok(raytracer::involved_objects(&result, threshold_db, cap))
}

fn reduce_slots(
    scene: &Scene,
    assignment: &MaterialAssignment,
    latest: &Measurement,
    config: &TunerConfig,
) -> Result<Vec<Slot>, TuneError> {
    let result = raytracer::trace(scene, assignment, latest.location)?;
    let ranked = raytracer::ranked_reflectors(
        &result.paths,
        &result.path_powers_dbm,
        config.threshold_db,
        config.cap + 1,
    );
    let mut slots = Vec::new();
    for owner in ranked {
        match owner {
            FaceOwner::Object { id, .. } => slots.push(Slot::Object(id)),
            FaceOwner::Ground if config.include_ground => slots.push(Slot::Ground),
            FaceOwner::Ground => {}
        }
        if slots.len() == config.cap {
            break;
        }
    }
    Ok(slots)
}

fn merge_candidate(
    base: &MaterialAssignment,
    slots: &[Slot],
    candidate: &[usize],
) -> MaterialAssignment {
    let mut out = base.clone();
    for (slot, &mat) in slots.iter().zip(candidate) {
        match slot {
            Slot::Object(id) => {
                out.object_materials.insert(*id, mat);
            }
            Slot::Ground => out.ground_material = mat,
        }
    }
    out
}

fn incumbent_candidate(base: &MaterialAssignment, slots: &[Slot]) -> Vec<usize> {
    slots
        .iter()
        .map(|s| match s {
            Slot::Object(id) => base.object_materials[id],
            Slot::Ground => base.ground_material,
        })
        .collect()
}

fn candidate_pool(
    slots: usize,
    num_materials: usize,
    incumbent: &[usize],
    enum_limit: usize,
    pool_samples: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let space_size = (num_materials as f64).powi(slots as i32);
    if space_size <= enum_limit as f64 {
        // Exhaustive lexicographic enumeration.
        let total = num_materials.pow(slots as u32);
        let mut pool = Vec::with_capacity(total);
        for mut idx in 0..total {
            let mut cand = vec![0usize; slots];
            for c in cand.iter_mut().rev() {
                *c = idx % num_materials;
                idx /= num_materials;
            }
            pool.push(cand);
        }
        return pool;
    }
    let mut pool: Vec<Vec<usize>> = Vec::with_capacity(pool_samples + 1 + slots * num_materials);
    pool.push(incumbent.to_vec());
    for (k, &cur) in incumbent.iter().enumerate() {
        for b in 0..num_materials {
            if b != cur {
                let mut c = incumbent.to_vec();
                c[k] = b;
                pool.push(c);
            }
        }
    }
    for _ in 0..pool_samples {
        pool.push((0..slots).map(|_| rng.gen_range(0..num_materials)).collect());
    }
    pool
}

fn episode_dataset<'a>(dataset: &'a [Measurement], cap: usize) -> &'a [Measurement] {
    if dataset.len() > cap {
        &dataset[dataset.len() - cap..]
    } else {
        dataset
    }
}

/// Runs one tuning episode over the given slots with the 10-warm-start /
/// 25-total-evaluation budget. Returns the merged assignment and the log.
fn run_episode(
    scene: &Scene,
    base: &MaterialAssignment,
    dataset: &[Measurement],
    slots: Vec<Slot>,
    config: &TunerConfig,
    cache: &mut GeometryCache,
    seed: u64,
) -> Result<(MaterialAssignment, EpisodeLog), TuneError> {
    if slots.is_empty() || dataset.is_empty() {
        return Ok((base.clone(), EpisodeLog::default()));
    }
    let dataset = episode_dataset(dataset, config.dataset_cap);
    let num_materials = config
        .space_limit
        .map_or(scene.material_space.len(), |k| k.min(scene.material_space.len()));
    let codec = OneHotCodec {
        num_objects: slots.len(),
        num_materials,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = EpisodeLog {
        focus: slots.clone(),
        evals: Vec::new(),
        best_objective: f64::INFINITY,
        dimensions: codec.encoded_len(),
    };

    let incumbent = incumbent_candidate(base, &slots);
    let pool = candidate_pool(
        slots.len(),
        num_materials,
        &incumbent,
        config.enum_limit,
        config.pool_samples,
        &mut rng,
    );

    let mut evaluated: BTreeMap<Vec<usize>, f64> = BTreeMap::new();
    let mut best = (incumbent.clone(), f64::INFINITY);
    let mut gp = GpModel::new(
        KernelConfig::for_dim(config.kernel, codec.encoded_len()),
        config.noise_variance,
    );

    let evaluate = |candidate: Vec<usize>,
                        iter: usize,
                        gp: &mut GpModel,
                        evaluated: &mut BTreeMap<Vec<usize>, f64>,
                        best: &mut (Vec<usize>, f64),
                        log: &mut EpisodeLog,
                        cache: &mut GeometryCache|
     -> Result<(), TuneError> {
        let started = Instant::now();
        let merged = merge_candidate(base, &slots, &candidate);
        let value = objective(scene, &merged, dataset, cache)?;
        // GP is trained on the negated objective so EI keeps its
        // maximization form.
        *gp = gp.fit(codec.encode(&candidate)?, -value)?;
        evaluated.insert(candidate.clone(), value);
        if value < best.1 {
            *best = (candidate.clone(), value);
        }
        log.evals.push(EpisodeEval {
            iter,
            candidate: slots
                .iter()
                .zip(&candidate)
                .map(|(s, &m)| {
                    let key = match s {
                        Slot::Object(id) => format!("obj:{id}"),
                        Slot::Ground => "ground".to_string(),
                    };
                    (key, m)
                })
                .collect(),
            objective: value,
            best_so_far: best.1,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        Ok(())
    };

    // Warm start: the incumbent plus uniform-random candidates.
    let mut warm: Vec<Vec<usize>> = vec![incumbent.clone()];
    let mut guard = 0;
    while warm.len() < config.warm_start.min(config.total_iterations) && guard < 10_000 {
        let cand: Vec<usize> = (0..slots.len())
            .map(|_| rng.gen_range(0..num_materials))
            .collect();
        if !warm.contains(&cand) {
            warm.push(cand);
        }
        guard += 1;
    }
    for (i, cand) in warm.into_iter().enumerate() {
        evaluate(cand, i, &mut gp, &mut evaluated, &mut best, &mut log, cache)?;
    }

    // Guided iterations: pick the pool candidate maximizing EI.
    while evaluated.len() < config.total_iterations {
        let f_best = -best.1;
        let mut chosen: Option<(f64, &Vec<usize>)> = None;
        for cand in &pool {
            if evaluated.contains_key(cand) {
                continue;
            }
            let ei = expected_improvement(&gp, &codec.encode(cand)?, f_best, config.epsilon)?;
            let better = match chosen {
                None => true,
                Some((best_ei, _)) => ei > best_ei,
            };
            if better {
                chosen = Some((ei, cand));
            }
        }
        let Some((_, next)) = chosen else {
            break; // pool exhausted
        };
        let next = next.clone();
        let iter = evaluated.len();
        evaluate(next, iter, &mut gp, &mut evaluated, &mut best, &mut log, cache)?;
    }

    log.best_objective = best.1;
    Ok((merge_candidate(base, &slots, &best.0), log))
}

/// Reduced tuning: focus on the objects involved at the latest measurement.
/// Returns the input unchanged when nothing is involved.
pub fn tune(
    scene: &Scene,
    assignment: &MaterialAssignment,
    dataset: &[Measurement],
    latest: &Measurement,
    config: &TunerConfig,
    cache: &mut GeometryCache,
    seed: u64,
) -> Result<(MaterialAssignment, EpisodeLog), TuneError> {
    let slots = reduce_slots(scene, assignment, latest, config)?;
    run_episode(scene, assignment, dataset, slots, config, cache, seed)
}

/// Global tuning over every object, used by the benchmark harness for the
/// reduced-vs-global comparison.
pub fn tune_global(
    scene: &Scene,
    assignment: &MaterialAssignment,
    dataset: &[Measurement],
    config: &TunerConfig,
    cache: &mut GeometryCache,
    seed: u64,
) -> Result<(MaterialAssignment, EpisodeLog), TuneError> {
    let mut slots: Vec<Slot> = scene.objects.iter().map(|o| Slot::Object(o.id)).collect();
    if config.include_ground {
        slots.push(Slot::Ground);
    }
    run_episode(scene, assignment, dataset, slots, config, cache, seed)
}
