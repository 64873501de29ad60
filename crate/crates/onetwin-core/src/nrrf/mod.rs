//! Neural radio radiance field: an attenuation network and a radiance network
//! queried along directional rays from the receiver, with emission-absorption
//! compositing turning per-voxel (attenuation, signal) pairs into received
//! power.
//!
//! Inference over a model snapshot is read-only and safe to run concurrently;
//! training owns the model exclusively for the duration of a step.

pub mod mlp;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Vec3;
use crate::online::EwcState;
use mlp::{
    linear_backward, sigmoid, softplus, stack_backward, stack_forward, Adam, Dense, StackCache,
};

#[derive(Debug, Error)]
pub enum NrrfError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("checkpoint tensor '{name}' has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint version {0} unsupported")]
    BadVersion(u32),
    #[error("pretraining needs a nonempty dataset")]
    EmptyDataset,
}

/// Fourier feature counts for positions and ray directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    pub position_frequencies: usize,
    pub direction_frequencies: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        EncodingConfig {
            position_frequencies: 10,
            direction_frequencies: 4,
        }
    }
}

impl EncodingConfig {
    pub fn position_len(&self) -> usize {
        // Two 3D positions (TX and voxel), sin+cos per frequency per coordinate.
        2 * 3 * 2 * self.position_frequencies
    }

    pub fn direction_len(&self) -> usize {
        2 * 2 * self.direction_frequencies
    }
}

/// Direction grid and radial sampling of the renderer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub azimuth_steps: usize,
    pub elevation_steps: usize,
    pub radial_samples: usize,
    pub d_max: f64,
    pub azimuth_offset: f64,
}

impl RenderConfig {
    pub fn desk(d_max: f64) -> RenderConfig {
        RenderConfig {
            azimuth_steps: 16,
            elevation_steps: 4,
            radial_samples: 32,
            d_max,
            azimuth_offset: 0.0,
        }
    }

    pub fn directions(&self) -> Vec<(f64, f64, f64)> {
        // (azimuth, elevation, solid-angle weight), weights normalized to 1.
        let mut dirs = Vec::with_capacity(self.azimuth_steps * self.elevation_steps);
        let mut total = 0.0;
        for j in 0..self.elevation_steps {
            let beta = -std::f64::consts::FRAC_PI_2
                + (j as f64 + 0.5) * std::f64::consts::PI / self.elevation_steps as f64;
            for i in 0..self.azimuth_steps {
                let alpha = self.azimuth_offset
                    + i as f64 * 2.0 * std::f64::consts::PI / self.azimuth_steps as f64;
                let w = beta.cos();
                dirs.push((alpha, beta, w));
                total += w;
            }
        }
        for d in dirs.iter_mut() {
            d.2 /= total;
        }
        dirs
    }
}

/// Network widths (attenuation stack and radiance stack).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub attenuation_widths: Vec<usize>,
    pub radiance_widths: Vec<usize>,
}

impl NetConfig {
    /// Small profile sized so full gradient checks run in seconds.
    pub fn desk() -> NetConfig {
        NetConfig {
            attenuation_widths: vec![64; 4],
            radiance_widths: vec![64, 32],
        }
    }

    /// Full-size profile: eight 256-unit attenuation layers, 256/128 radiance.
    pub fn paper() -> NetConfig {
        NetConfig {
            attenuation_widths: vec![256; 8],
            radiance_widths: vec![256, 128],
        }
    }
}

/// Axis-aligned box that normalizes positions to [-1, 1] per coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl NormBox {
    fn normalize(&self, p: Vec3) -> Vec3 {
        Vec3::new(
            2.0 * (p.x - self.min.x) / (self.max.x - self.min.x) - 1.0,
            2.0 * (p.y - self.min.y) / (self.max.y - self.min.y) - 1.0,
            2.0 * (p.z - self.min.z) / (self.max.z - self.min.z) - 1.0,
        )
    }
}

/// One field query: transmitter, voxel position, and ray direction angles.
#[derive(Debug, Clone, Copy)]
pub struct FieldQuery {
    pub tx_position: Vec3,
    pub voxel_position: Vec3,
    /// (azimuth in [0, 2pi), elevation in [-pi/2, pi/2]).
    pub direction: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct NrrfModel {
    pub attenuation: Vec<Dense>,
    pub delta_head: Dense,
    pub radiance: Vec<Dense>,
    pub signal_head: Dense,
    pub encoding: EncodingConfig,
    pub render: RenderConfig,
    pub net: NetConfig,
    pub rsrp_range: (f64, f64),
    pub norm_box: NormBox,
    pub tx_position: Vec3,
}

impl NrrfModel {
    pub fn new(
        net: NetConfig,
        encoding: EncodingConfig,
        render: RenderConfig,
        rsrp_range: (f64, f64),
        norm_box: NormBox,
        tx_position: Vec3,
        seed: u64,
    ) -> NrrfModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut attenuation = Vec::new();
        let mut inputs = encoding.position_len();
        for &w in &net.attenuation_widths {
            attenuation.push(Dense::new_random(inputs, w, &mut rng));
            inputs = w;
        }
        let feature = inputs;
        let delta_head = Dense::new_random(feature, 1, &mut rng);
        let mut radiance = Vec::new();
        let mut inputs = feature + encoding.direction_len();
        for &w in &net.radiance_widths {
            radiance.push(Dense::new_random(inputs, w, &mut rng));
            inputs = w;
        }
        let signal_head = Dense::new_random(inputs, 1, &mut rng);
        NrrfModel {
            attenuation,
            delta_head,
            radiance,
            signal_head,
            encoding,
            render,
            net,
            rsrp_range,
            norm_box,
            tx_position,
        }
    }

    pub fn normalize_rsrp(&self, dbm: f64) -> f64 {
        (dbm - self.rsrp_range.0) / (self.rsrp_range.1 - self.rsrp_range.0)
    }

    pub fn denormalize_rsrp(&self, v: f64) -> f64 {
        self.rsrp_range.0 + v * (self.rsrp_range.1 - self.rsrp_range.0)
    }

    // ── Parameter flattening ───────────────────────────────────────────────

    /// Canonical tensor order used by the flat parameter vector, checkpoints,
    /// Adam state, Fisher diagonals, and gradient checks.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, l) in self.attenuation.iter().enumerate() {
            out.push((format!("attenuation.{i}.w"), l.w.shape().to_vec()));
            out.push((format!("attenuation.{i}.b"), l.b.shape().to_vec()));
        }
        out.push(("delta_head.w".into(), self.delta_head.w.shape().to_vec()));
        out.push(("delta_head.b".into(), self.delta_head.b.shape().to_vec()));
        for (i, l) in self.radiance.iter().enumerate() {
            out.push((format!("radiance.{i}.w"), l.w.shape().to_vec()));
            out.push((format!("radiance.{i}.b"), l.b.shape().to_vec()));
        }
        out.push(("signal_head.w".into(), self.signal_head.w.shape().to_vec()));
        out.push(("signal_head.b".into(), self.signal_head.b.shape().to_vec()));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensor_layout().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        let mut push_dense = |d: &Dense| {
            out.extend(d.w.iter());
            out.extend(d.b.iter());
        };
        for l in &self.attenuation {
            push_dense(l);
        }
        push_dense(&self.delta_head);
        for l in &self.radiance {
            push_dense(l);
        }
        push_dense(&self.signal_head);
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params());
        let mut offset = 0;
        let mut pull = |d: &mut Dense| {
            for v in d.w.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
            for v in d.b.iter_mut() {
                *v = flat[offset];
                offset += 1;
            }
        };
        for l in &mut self.attenuation {
            pull(l);
        }
        pull(&mut self.delta_head);
        for l in &mut self.radiance {
            pull(l);
        }
        pull(&mut self.signal_head);
    }

    // ── Encoding ───────────────────────────────────────────────────────────

    fn encode_positions(&self, tx_position: Vec3, voxels: &[Vec3]) -> Array2<f64> {
        let lp = self.encoding.position_frequencies;
        let tx = self.norm_box.normalize(tx_position);
        let tx_coords = [tx.x, tx.y, tx.z];
        let mut m = Array2::zeros((voxels.len(), self.encoding.position_len()));
        for (row, p) in voxels.iter().enumerate() {
            let pn = self.norm_box.normalize(*p);
            let coords = [
                tx_coords[0], tx_coords[1], tx_coords[2], pn.x, pn.y, pn.z,
            ];
            let mut col = 0;
            for c in coords {
                let mut freq = std::f64::consts::PI;
                for _ in 0..lp {
                    m[(row, col)] = (freq * c).sin();
                    m[(row, col + 1)] = (freq * c).cos();
                    col += 2;
                    freq *= 2.0;
                }
            }
        }
        m
    }

    fn encode_direction_row(&self, alpha: f64, beta: f64) -> Vec<f64> {
        let ld = self.encoding.direction_frequencies;
        let mut row = Vec::with_capacity(self.encoding.direction_len());
        for angle in [alpha, beta] {
            let mut freq = 1.0;
            for _ in 0..ld {
                row.push((freq * angle).sin());
                row.push((freq * angle).cos());
                freq *= 2.0;
            }
        }
        row
    }

    // ── Field evaluation ───────────────────────────────────────────────────

    fn field_forward(
        &self,
        pos_enc: &Array2<f64>,
        dir_enc: &Array2<f64>,
        cache: Option<&mut FieldCache>,
    ) -> (Array1<f64>, Array1<f64>) {
        let mut keep = cache;
        let feature = stack_forward(
            &self.attenuation,
            pos_enc,
            keep.as_deref_mut().map(|c| &mut c.attenuation),
        );
        let delta_raw = self.delta_head.forward(&feature);
        let mut rad_in = Array2::zeros((pos_enc.nrows(), feature.ncols() + dir_enc.ncols()));
        rad_in.slice_mut(ndarray::s![.., ..feature.ncols()]).assign(&feature);
        rad_in.slice_mut(ndarray::s![.., feature.ncols()..]).assign(dir_enc);
        let rad_out = stack_forward(
            &self.radiance,
            &rad_in,
            keep.as_deref_mut().map(|c| &mut c.radiance),
        );
        let signal_raw = self.signal_head.forward(&rad_out);
        let n = pos_enc.nrows();
        let mut delta = Array1::zeros(n);
        let mut signal = Array1::zeros(n);
        let mut delta_sig = Array1::zeros(n);
        let mut signal_sig = Array1::zeros(n);
        for i in 0..n {
            let (sp, sg) = mlp::softplus_and_sigmoid(delta_raw[(i, 0)]);
            delta[i] = sp;
            delta_sig[i] = sg;
            let (sp, sg) = mlp::softplus_and_sigmoid(signal_raw[(i, 0)]);
            signal[i] = sp;
            signal_sig[i] = sg;
        }
        if let Some(c) = keep {
            c.feature = feature;
            c.rad_out = rad_out;
            c.delta_sig = delta_sig;
            c.signal_sig = signal_sig;
        }
        (delta, signal)
    }

    /// Evaluates the field at one query: (attenuation, retransmitted signal).
    pub fn field_eval(&self, query: &FieldQuery) -> (f64, f64) {
        let pos_enc = self.encode_positions(query.tx_position, &[query.voxel_position]);
        let dir_row = self.encode_direction_row(query.direction.0, query.direction.1);
        let dir_enc = Array2::from_shape_vec((1, dir_row.len()), dir_row).unwrap();
        let (d, s) = self.field_forward(&pos_enc, &dir_enc, None);
        (d[0], s[0])
    }

    // ── Rendering ──────────────────────────────────────────────────────────

    fn radial_samples(&self) -> (Vec<f64>, f64) {
        let n = self.render.radial_samples;
        let dr = self.render.d_max / n as f64;
        ((1..=n).map(|i| i as f64 * dr).collect(), dr)
    }

    /// Received-power contribution of one direction (linear scale).
    pub fn render_direction(&self, rx: Vec3, alpha: f64, beta: f64) -> f64 {
        let (rs, dr) = self.radial_samples();
        let dir = direction_vector(alpha, beta);
        let voxels: Vec<Vec3> = rs.iter().map(|&r| rx + dir * r).collect();
        let pos_enc = self.encode_positions(self.tx_position, &voxels);
        let (ra, rb) = opposite_direction(alpha, beta);
        let dir_row = self.encode_direction_row(ra, rb);
        let mut dir_enc = Array2::zeros((voxels.len(), dir_row.len()));
        for mut row in dir_enc.rows_mut() {
            row.assign(&Array1::from_vec(dir_row.clone()));
        }
        let (delta, signal) = self.field_forward(&pos_enc, &dir_enc, None);
        composite_ray(delta.as_slice().unwrap(), signal.as_slice().unwrap(), dr)
    }

    /// Full directional render: weighted sum over the grid, denormalized.
    pub fn predict_rsrp(&self, rx: Vec3) -> f64 {
        let (totals, _) = self.forward_chunk(&[rx], false);
        self.denormalize_rsrp(totals[0])
    }

    pub fn predict_batch(&self, rxs: &[Vec3]) -> Vec<f64> {
        let rows_per_point = self.render.directions().len() * self.render.radial_samples;
        let chunk_points = (8192 / rows_per_point.max(1)).max(1);
        rxs.par_chunks(chunk_points)
            .flat_map(|chunk| {
                let (totals, _) = self.forward_chunk(chunk, false);
                totals
                    .into_iter()
                    .map(|t| self.denormalize_rsrp(t))
                    .collect::<Vec<f64>>()
            })
            .collect()
    }

    /// Forward pass for a chunk of receivers through one batched matrix;
    /// returns normalized predictions and, when requested, backprop caches.
    fn forward_chunk(&self, rxs: &[Vec3], want_cache: bool) -> (Vec<f64>, Option<ChunkCache>) {
        let dirs = self.render.directions();
        let (rs, dr) = self.radial_samples();
        let n_r = rs.len();
        let n_dirs = dirs.len();
        let rows_per_point = n_dirs * n_r;
        let rows = rxs.len() * rows_per_point;

        // Per-direction retransmission encodings, shared by every receiver.
        let dir_rows: Vec<Vec<f64>> = dirs
            .iter()
            .map(|&(alpha, beta, _)| {
                let (ra, rb) = opposite_direction(alpha, beta);
                self.encode_direction_row(ra, rb)
            })
            .collect();

        let mut voxels = Vec::with_capacity(rows);
        let mut dir_enc = Array2::zeros((rows, self.encoding.direction_len()));
        for (p_idx, &rx) in rxs.iter().enumerate() {
            for (d_idx, &(alpha, beta, _w)) in dirs.iter().enumerate() {
                let dir = direction_vector(alpha, beta);
                let base = p_idx * rows_per_point + d_idx * n_r;
                for (s_idx, &r) in rs.iter().enumerate() {
                    voxels.push(rx + dir * r);
                    let mut row = dir_enc.row_mut(base + s_idx);
                    for (col, v) in dir_rows[d_idx].iter().enumerate() {
                        row[col] = *v;
                    }
                }
            }
        }
        let pos_enc = self.encode_positions(self.tx_position, &voxels);

        let mut cache = want_cache.then(FieldCache::default);
        let (delta, signal) = self.field_forward(&pos_enc, &dir_enc, cache.as_mut());

        let weights: Vec<f64> = dirs.iter().map(|d| d.2).collect();
        let deltas = delta.as_slice().unwrap();
        let signals = signal.as_slice().unwrap();
        let totals: Vec<f64> = (0..rxs.len())
            .map(|p_idx| {
                let mut total = 0.0;
                for (d_idx, w) in weights.iter().enumerate() {
                    let lo = p_idx * rows_per_point + d_idx * n_r;
                    total += w * composite_ray(&deltas[lo..lo + n_r], &signals[lo..lo + n_r], dr);
                }
                total
            })
            .collect();

        let chunk_cache = cache.map(|field| ChunkCache {
            field,
            delta,
            signal,
            dr,
            n_r,
            n_dirs,
            weights,
        });
        (totals, chunk_cache)
    }

    /// Backprop from per-receiver d(normalized prediction) values to one flat
    /// parameter gradient for the whole chunk.
    fn backward_chunk(&self, cache: &ChunkCache, d_totals: &[f64]) -> Vec<f64> {
        let rows = cache.delta.len();
        let rows_per_point = cache.n_dirs * cache.n_r;
        debug_assert_eq!(rows, d_totals.len() * rows_per_point);
        let mut d_delta = Array1::<f64>::zeros(rows);
        let mut d_signal = Array1::<f64>::zeros(rows);
        {
            let deltas = cache.delta.as_slice().unwrap();
            let signals = cache.signal.as_slice().unwrap();
            let dd = d_delta.as_slice_mut().unwrap();
            let ds = d_signal.as_slice_mut().unwrap();
            for (p_idx, &d_total) in d_totals.iter().enumerate() {
                for (d_idx, w) in cache.weights.iter().enumerate() {
                    let lo = p_idx * rows_per_point + d_idx * cache.n_r;
                    composite_backward(
                        &deltas[lo..lo + cache.n_r],
                        &signals[lo..lo + cache.n_r],
                        cache.dr,
                        d_total * w,
                        &mut dd[lo..lo + cache.n_r],
                        &mut ds[lo..lo + cache.n_r],
                    );
                }
            }
        }

        // Through the softplus output maps (derivatives cached at forward).
        let d_delta_raw = (&d_delta * &cache.field.delta_sig).insert_axis(ndarray::Axis(1));
        let d_signal_raw = (&d_signal * &cache.field.signal_sig).insert_axis(ndarray::Axis(1));

        let (sig_head_grad, d_rad_out) =
            linear_backward(&self.signal_head, &cache.field.rad_out, &d_signal_raw);
        let (rad_grads, d_rad_in) = stack_backward(&self.radiance, &cache.field.radiance, &d_rad_out);
        let feature_cols = cache.field.feature.ncols();
        let d_feature_from_rad = d_rad_in.slice(ndarray::s![.., ..feature_cols]).to_owned();

        let (delta_head_grad, d_feature_from_head) =
            linear_backward(&self.delta_head, &cache.field.feature, &d_delta_raw);
        let d_feature = &d_feature_from_rad + &d_feature_from_head;
        let (att_grads, _) = stack_backward(&self.attenuation, &cache.field.attenuation, &d_feature);

        // Flatten in canonical order.
        let mut flat = Vec::with_capacity(self.num_params());
        for (dw, db) in &att_grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        flat.extend(delta_head_grad.0.iter());
        flat.extend(delta_head_grad.1.iter());
        for (dw, db) in &rad_grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        flat.extend(sig_head_grad.0.iter());
        flat.extend(sig_head_grad.1.iter());
        flat
    }

    /// Gradient of the normalized prediction at `rx` w.r.t. all parameters.
    pub fn prediction_gradient(&self, rx: Vec3) -> Vec<f64> {
        let (_, cache) = self.forward_chunk(&[rx], true);
        self.backward_chunk(&cache.unwrap(), &[1.0])
    }
}

#[derive(Debug, Default)]
struct FieldCache {
    attenuation: StackCache,
    radiance: StackCache,
    feature: Array2<f64>,
    rad_out: Array2<f64>,
    delta_sig: Array1<f64>,
    signal_sig: Array1<f64>,
}

struct ChunkCache {
    field: FieldCache,
    delta: Array1<f64>,
    signal: Array1<f64>,
    dr: f64,
    n_r: usize,
    n_dirs: usize,
    weights: Vec<f64>,
}

pub fn direction_vector(alpha: f64, beta: f64) -> Vec3 {
    Vec3::new(beta.cos() * alpha.cos(), beta.cos() * alpha.sin(), beta.sin())
}

fn opposite_direction(alpha: f64, beta: f64) -> (f64, f64) {
    let two_pi = 2.0 * std::f64::consts::PI;
    (((alpha + std::f64::consts::PI) % two_pi + two_pi) % two_pi, -beta)
}

/// Emission-absorption compositing: alpha_i = 1 - exp(-delta_i * dr),
/// T_i = prod_{j<i} (1 - alpha_j), R = sum_i T_i * alpha_i * S_i.
pub fn composite_ray(deltas: &[f64], signals: &[f64], dr: f64) -> f64 {
    let mut trans = 1.0;
    let mut acc = 0.0;
    for (&d, &s) in deltas.iter().zip(signals) {
        let passthrough = (-d * dr).exp();
        acc += trans * (1.0 - passthrough) * s;
        trans *= passthrough;
    }
    acc
}

/// Gradients of `composite_ray` with respect to each delta and signal:
/// dR/dS_i = T_i alpha_i, dR/ddelta_i = dr * (T_i (1-alpha_i) S_i - Q_i)
/// with Q_i the accumulated contribution of samples beyond i.
fn composite_backward(
    deltas: &[f64],
    signals: &[f64],
    dr: f64,
    d_ray: f64,
    d_deltas: &mut [f64],
    d_signals: &mut [f64],
) {
    let n = deltas.len();
    let mut trans = vec![0.0; n];
    let mut alphas = vec![0.0; n];
    let mut t = 1.0;
    for i in 0..n {
        trans[i] = t;
        let passthrough = (-deltas[i] * dr).exp();
        alphas[i] = 1.0 - passthrough;
        t *= passthrough;
    }
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        d_signals[i] += d_ray * trans[i] * alphas[i];
        d_deltas[i] += d_ray * dr * (trans[i] * (1.0 - alphas[i]) * signals[i] - suffix);
        suffix += trans[i] * alphas[i] * signals[i];
    }
}

// ── Loss and training ──────────────────────────────────────────────────────

/// Mean squared error over normalized RSRP plus the optional EWC penalty;
/// returns the loss and the flat gradient over all parameters.
pub fn loss_and_gradient(
    model: &NrrfModel,
    batch: &[(Vec3, f64)],
    ewc: Option<&EwcState>,
) -> (f64, Vec<f64>) {
    assert!(!batch.is_empty(), "loss needs a nonempty batch");
    let n = batch.len() as f64;
    let rows_per_point = model.render.directions().len() * model.render.radial_samples;
    let threads = rayon::current_num_threads().max(1);
    let by_memory = (4096 / rows_per_point.max(1)).max(1);
    let chunk_points = batch.len().div_ceil(threads).clamp(1, by_memory);

    let per_chunk: Vec<(f64, Vec<f64>)> = batch
        .par_chunks(chunk_points)
        .map(|chunk| {
            let rxs: Vec<Vec3> = chunk.iter().map(|&(rx, _)| rx).collect();
            let (totals, cache) = model.forward_chunk(&rxs, true);
            let mut loss = 0.0;
            let mut d_totals = Vec::with_capacity(chunk.len());
            for (&(_, target_dbm), total) in chunk.iter().zip(&totals) {
                let err = total - model.normalize_rsrp(target_dbm);
                loss += err * err / n;
                d_totals.push(2.0 * err / n);
            }
            let grad = model.backward_chunk(&cache.unwrap(), &d_totals);
            (loss, grad)
        })
        .collect();

    let mut loss = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    for (l, g) in per_chunk {
        loss += l;
        for (acc, v) in grad.iter_mut().zip(g) {
            *acc += v;
        }
    }

    if let Some(state) = ewc {
        if state.lambda > 0.0 {
            let params = model.flatten_params();
            let mut penalty = 0.0;
            for i in 0..params.len() {
                let diff = params[i] - state.anchor_weights[i];
                penalty += state.fisher_diag[i] * diff * diff;
                grad[i] += state.lambda * state.fisher_diag[i] * diff;
            }
            loss += 0.5 * state.lambda * penalty;
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub holdout_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            iterations: 2000,
            batch_size: 256,
            learning_rate: 1e-3,
            lr_decay: 5e-5,
            holdout_every: 50,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainCurvePoint {
    pub iteration: usize,
    pub train_loss: f64,
    pub holdout_mse: Option<f64>,
}

fn holdout_mse(model: &NrrfModel, points: &[(Vec3, f64)]) -> f64 {
    let locs: Vec<Vec3> = points.iter().map(|&(rx, _)| rx).collect();
    let preds = model.predict_batch(&locs);
    let err: f64 = points
        .iter()
        .zip(&preds)
        .map(|(&(_, t), &p)| {
            let e = model.normalize_rsrp(p) - model.normalize_rsrp(t);
            e * e
        })
        .sum();
    err / points.len() as f64
}

/// Offline pretraining on simulator-sampled data. Every tenth point is held
/// out; the returned model is the snapshot with the lowest held-out MSE.
pub fn pretrain(
    mut model: NrrfModel,
    dataset: &[(Vec3, f64)],
    config: &PretrainConfig,
    seed: u64,
) -> Result<(NrrfModel, Vec<PretrainCurvePoint>), NrrfError> {
    if dataset.is_empty() {
        return Err(NrrfError::EmptyDataset);
    }
    let mut train: Vec<(Vec3, f64)> = Vec::new();
    let mut holdout: Vec<(Vec3, f64)> = Vec::new();
    for (i, p) in dataset.iter().enumerate() {
        if i % 10 == 9 {
            holdout.push(*p);
        } else {
            train.push(*p);
        }
    }
    if holdout.is_empty() {
        holdout.push(train[0]);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(model.num_params(), config.learning_rate, config.lr_decay);
    let mut params = model.flatten_params();
    let mut best = (f64::INFINITY, params.clone());
    let mut curve = Vec::new();

    for iter in 0..config.iterations {
        let batch: Vec<(Vec3, f64)> = rand::seq::index::sample(
            &mut rng,
            train.len(),
            config.batch_size.min(train.len()),
        )
        .into_iter()
        .map(|i| train[i])
        .collect();
        let (loss, grad) = loss_and_gradient(&model, &batch, None);
        adam.step(&mut params, &grad);
        model.set_params(&params);

        let record_holdout =
            iter % config.holdout_every == 0 || iter + 1 == config.iterations;
        let h = record_holdout.then(|| holdout_mse(&model, &holdout));
        if let Some(h) = h {
            if h < best.0 {
                best = (h, params.clone());
            }
        }
        curve.push(PretrainCurvePoint {
            iteration: iter,
            train_loss: loss,
            holdout_mse: h,
        });
    }
    model.set_params(&best.1);
    Ok((model, curve))
}

// ── Checkpoints ────────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    encoding: EncodingConfig,
    render: RenderConfig,
    net: NetConfig,
    rsrp_range: (f64, f64),
    norm_box: NormBox,
    tx_position: Vec3,
    tensors: Vec<CheckpointTensor>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn save_checkpoint(model: &NrrfModel, path: &std::path::Path) -> Result<(), NrrfError> {
    let layout = model.tensor_layout();
    let flat = model.flatten_params();
    let mut tensors = Vec::with_capacity(layout.len());
    let mut offset = 0;
    for (name, shape) in layout {
        let len: usize = shape.iter().product();
        tensors.push(CheckpointTensor {
            name,
            shape,
            data: flat[offset..offset + len].to_vec(),
        });
        offset += len;
    }
    let ckpt = Checkpoint {
        version: 1,
        encoding: model.encoding,
        render: model.render,
        net: model.net.clone(),
        rsrp_range: model.rsrp_range,
        norm_box: model.norm_box,
        tx_position: model.tx_position,
        tensors,
    };
    std::fs::write(path, serde_json::to_string(&ckpt).expect("serializable"))?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<NrrfModel, NrrfError> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if ckpt.version != 1 {
        return Err(NrrfError::BadVersion(ckpt.version));
    }
    let mut model = NrrfModel::new(
        ckpt.net,
        ckpt.encoding,
        ckpt.render,
        ckpt.rsrp_range,
        ckpt.norm_box,
        ckpt.tx_position,
        0,
    );
    let layout = model.tensor_layout();
    if ckpt.tensors.len() != layout.len() {
        return Err(NrrfError::ShapeMismatch {
            name: "<tensor count>".into(),
            got: vec![ckpt.tensors.len()],
            expected: vec![layout.len()],
        });
    }
    let mut flat = Vec::with_capacity(model.num_params());
    for (tensor, (name, shape)) in ckpt.tensors.iter().zip(&layout) {
        let expected_len: usize = shape.iter().product();
        if &tensor.name != name || &tensor.shape != shape || tensor.data.len() != expected_len {
            return Err(NrrfError::ShapeMismatch {
                name: tensor.name.clone(),
                got: tensor.shape.clone(),
                expected: shape.clone(),
            });
        }
        flat.extend(&tensor.data);
    }
    model.set_params(&flat);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_model(seed: u64) -> NrrfModel {
        NrrfModel::new(
            NetConfig {
                attenuation_widths: vec![16, 16],
                radiance_widths: vec![16, 8],
            },
            EncodingConfig {
                position_frequencies: 4,
                direction_frequencies: 2,
            },
            RenderConfig {
                azimuth_steps: 4,
                elevation_steps: 2,
                radial_samples: 6,
                d_max: 120.0,
                azimuth_offset: 0.0,
            },
            (-150.0, -40.0),
            NormBox {
                min: Vec3::new(-100.0, -100.0, 0.0),
                max: Vec3::new(100.0, 100.0, 50.0),
            },
            Vec3::new(-50.0, 0.0, 30.0),
            seed,
        )
    }

    #[test]
    fn zero_weight_network_is_constant() {
        let mut m = tiny_model(0);
        m.set_params(&vec![0.0; m.num_params()]);
        let q1 = FieldQuery {
            tx_position: m.tx_position,
            voxel_position: Vec3::new(1.0, 2.0, 3.0),
            direction: (0.4, 0.1),
        };
        let q2 = FieldQuery {
            tx_position: m.tx_position,
            voxel_position: Vec3::new(-7.0, 4.0, 1.0),
            direction: (2.5, -0.6),
        };
        let (d1, s1) = m.field_eval(&q1);
        let (d2, s2) = m.field_eval(&q2);
        assert_relative_eq!(d1, softplus(0.0), epsilon = 1e-12);
        assert_relative_eq!(s1, softplus(0.0), epsilon = 1e-12);
        assert_eq!((d1, s1), (d2, s2));
    }

    #[test]
    fn field_eval_is_deterministic_and_nonnegative() {
        let m = tiny_model(9);
        let q = FieldQuery {
            tx_position: m.tx_position,
            voxel_position: Vec3::new(10.0, -20.0, 5.0),
            direction: (1.0, 0.3),
        };
        let a = m.field_eval(&q);
        let b = m.field_eval(&q);
        assert_eq!(a, b);
        assert!(a.0 >= 0.0 && a.1 >= 0.0);
    }

    #[test]
    fn compositing_matches_hand_arithmetic() {
        // Three samples, dr = 1: hand-evaluated emission-absorption sum.
        let deltas = [0.5, 1.0, 2.0];
        let signals = [3.0, 2.0, 1.0];
        let a1 = 1.0 - (-0.5f64).exp();
        let a2 = 1.0 - (-1.0f64).exp();
        let a3 = 1.0 - (-2.0f64).exp();
        let expect = a1 * 3.0 + (1.0 - a1) * a2 * 2.0 + (1.0 - a1) * (1.0 - a2) * a3 * 1.0;
        assert_relative_eq!(composite_ray(&deltas, &signals, 1.0), expect, epsilon = 1e-12);
    }

    #[test]
    fn compositing_edge_cases() {
        assert_eq!(composite_ray(&[0.0, 0.0, 0.0], &[5.0, 5.0, 5.0], 1.0), 0.0);
        // Fully opaque first sample contributes exactly its signal.
        let r = composite_ray(&[1e9, 1.0], &[4.0, 100.0], 1.0);
        assert_relative_eq!(r, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn transmittance_is_monotone_and_occlusion_blocks_later_samples() {
        let signals = [1.0, 1.0, 1.0, 1.0];
        let base = [0.1, 0.1, 0.1, 0.1];
        let mut blocked = base;
        blocked[1] = 5.0;
        // Raising delta at sample 1 must not increase the contribution of
        // samples 2 and 3.
        let contrib = |deltas: &[f64], upto: usize| {
            let mut trans = 1.0;
            let mut acc = 0.0;
            for i in 0..deltas.len() {
                let pt = (-deltas[i]).exp();
                if i >= upto {
                    acc += trans * (1.0 - pt) * signals[i];
                }
                trans *= pt;
            }
            acc
        };
        assert!(contrib(&blocked, 2) <= contrib(&base, 2) + 1e-15);
    }

    #[test]
    fn rsrp_normalization_round_trips() {
        let m = tiny_model(1);
        for v in [-150.0, -123.4, -77.0, -40.0] {
            assert_relative_eq!(m.denormalize_rsrp(m.normalize_rsrp(v)), v, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_radiance_field_predicts_range_minimum() {
        let mut m = tiny_model(2);
        // Large negative signal-head bias drives S to ~0 everywhere.
        let mut flat = m.flatten_params();
        let n = flat.len();
        flat[n - 1] = -60.0;
        m.set_params(&flat);
        let p = m.predict_rsrp(Vec3::new(3.0, 4.0, 1.0));
        assert_relative_eq!(p, -150.0, epsilon = 1e-9);
    }

    #[test]
    fn predict_is_weighted_sum_of_rendered_directions() {
        let m = tiny_model(5);
        let rx = Vec3::new(12.0, -9.0, 1.0);
        let mut total = 0.0;
        for (alpha, beta, w) in m.render.directions() {
            total += w * m.render_direction(rx, alpha, beta);
        }
        assert_relative_eq!(m.predict_rsrp(rx), m.denormalize_rsrp(total), epsilon = 1e-9);
    }

    #[test]
    fn grid_rotation_changes_prediction_only_mildly() {
        let m = tiny_model(6);
        let mut rotated = m.clone();
        rotated.render.azimuth_offset =
            2.0 * std::f64::consts::PI / m.render.azimuth_steps as f64;
        let rx = Vec3::new(5.0, 5.0, 1.0);
        let a = m.predict_rsrp(rx);
        let b = rotated.predict_rsrp(rx);
        assert!((a - b).abs() < 3.0, "rotation shifted prediction by {}", (a - b).abs());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let model = tiny_model(7);
        let batch = vec![
            (Vec3::new(10.0, 5.0, 1.0), -85.0),
            (Vec3::new(-20.0, 14.0, 1.0), -99.0),
            (Vec3::new(3.0, -30.0, 1.0), -70.0),
        ];
        let (_, grad) = loss_and_gradient(&model, &batch, None);
        let mut probe = model.clone();
        let mut params = probe.flatten_params();
        let layout = model.tensor_layout();
        let mut offset = 0;
        let h = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        use rand::Rng;
        for (name, shape) in &layout {
            let len: usize = shape.iter().product();
            for _ in 0..3.min(len) {
                let idx = offset + rng.gen_range(0..len);
                let orig = params[idx];
                params[idx] = orig + h;
                probe.set_params(&params);
                let (up, _) = loss_and_gradient(&probe, &batch, None);
                params[idx] = orig - h;
                probe.set_params(&params);
                let (down, _) = loss_and_gradient(&probe, &batch, None);
                params[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let denom = grad[idx].abs().max(fd.abs());
                if denom > 1e-7 {
                    let rel = (grad[idx] - fd).abs() / denom;
                    assert!(rel < 1e-3, "{name}[{idx}] rel err {rel}: {} vs {fd}", grad[idx]);
                }
            }
            offset += len;
        }
        probe.set_params(&params);
    }

    #[test]
    fn perfect_predictions_give_zero_loss_and_gradient() {
        let m = tiny_model(8);
        let rx = Vec3::new(1.0, 1.0, 1.0);
        let target = m.predict_rsrp(rx);
        let (loss, grad) = loss_and_gradient(&m, &[(rx, target)], None);
        assert!(loss < 1e-20);
        assert!(grad.iter().all(|g| g.abs() < 1e-10));
    }

    #[test]
    fn pretraining_descends_and_fits_constants() {
        let m = tiny_model(10);
        let dataset: Vec<(Vec3, f64)> = (0..60)
            .map(|i| {
                let frac = i as f64 / 59.0;
                (Vec3::new(-80.0 + 160.0 * frac, 10.0 * (i % 5) as f64, 1.0), -95.0)
            })
            .collect();
        let cfg = PretrainConfig {
            iterations: 120,
            batch_size: 16,
            learning_rate: 3e-3,
            lr_decay: 0.0,
            holdout_every: 20,
        };
        let (trained, curve) = pretrain(m, &dataset, &cfg, 3).unwrap();
        assert!(curve.last().unwrap().train_loss < curve[0].train_loss);
        let mse = holdout_mse(&trained, &dataset);
        assert!(mse < 1e-4, "constant fit reached only {mse}");
        assert!(matches!(
            pretrain(tiny_model(0), &[], &cfg, 0),
            Err(NrrfError::EmptyDataset)
        ));
    }

    #[test]
    fn checkpoint_round_trip_and_shape_rejection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = tiny_model(11);
        save_checkpoint(&m, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        let rx = Vec3::new(8.0, -3.0, 1.0);
        assert_eq!(m.predict_rsrp(rx), loaded.predict_rsrp(rx));

        // Corrupt a tensor shape.
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["tensors"][0]["shape"] = serde_json::json!([1, 1]);
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(NrrfError::ShapeMismatch { .. })
        ));
    }
}
