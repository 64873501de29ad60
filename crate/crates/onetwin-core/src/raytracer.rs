//! Image-method ray tracer: line-of-sight plus reflections up to depth two,
//! Fresnel-weighted per-path gains, and the involved-object report that feeds
//! problem reduction in the material tuner.
//!
//! Path geometry depends only on the scene, never on the material assignment;
//! materials scale amplitudes. Callers exploit this by tracing once per
//! location and re-scoring candidate assignments with [`rsrp_from_paths`].
//! `trace` is pure, so receivers can be traced in parallel.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{point_in_polygon, Box3, Face, FaceOwner, Vec3, GEOM_EPS};
use crate::scene::{Material, MaterialSpace, Scene, TxConfig};
use crate::tuner::MaterialAssignment;

/// RSRP reported when no propagation path reaches the receiver.
pub const RSRP_FLOOR_DBM: f64 = -150.0;

const VACUUM_PERMITTIVITY: f64 = 8.854_187_8128e-12;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("receiver outside scene bounds")]
    RxOutOfBounds,
    #[error("receiver coincides with transmitter")]
    CoincidentTxRx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathKind {
    Los,
    Reflect1,
    Reflect2,
}

/// One reflection event along a path.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Reflection {
    pub face: FaceOwner,
    pub incidence_rad: f64,
}

/// An ordered propagation path from TX to RX with its reflection points.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathSegmentChain {
    pub kind: PathKind,
    pub vertices: Vec<Vec3>,
    pub reflections: Vec<Reflection>,
    pub total_length: f64,
    /// Extra loss from attenuating clutter boxes crossed by the path (dB).
    pub clutter_db: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceResult {
    pub paths: Vec<PathSegmentChain>,
    /// Per-path received power under the assignment used at trace time.
    pub path_powers_dbm: Vec<f64>,
    pub rsrp_dbm: f64,
    /// All reflector object ids, strongest path first.
    pub involved_objects: Vec<u32>,
}

/// An axis-aligned box that attenuates (but does not reflect) crossing paths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClutterBox {
    pub shape: Box3,
    pub attenuation_db: f64,
}

// ── Fresnel reflection ─────────────────────────────────────────────────────

/// Power reflectance |Γ|² averaged over TE and TM polarizations for an
/// air-to-material interface; `cos_theta` is the cosine of the incidence
/// angle measured from the surface normal.
pub fn fresnel_power_reflectance(material: &Material, frequency_hz: f64, cos_theta: f64) -> f64 {
    if material.is_perfect_conductor() {
        return 1.0;
    }
    let omega = 2.0 * std::f64::consts::PI * frequency_hz;
    let eta = Complex64::new(
        material.rel_permittivity,
        -material.conductivity / (omega * VACUUM_PERMITTIVITY),
    );
    let cos_t = cos_theta.clamp(0.0, 1.0);
    let sin2 = 1.0 - cos_t * cos_t;
    let root = (eta - sin2).sqrt();
    let gamma_te = (cos_t - root) / (cos_t + root);
    let gamma_tm = (eta * cos_t - root) / (eta * cos_t + root);
    0.5 * (gamma_te.norm_sqr() + gamma_tm.norm_sqr())
}

fn material_for(face: FaceOwner, assignment: &MaterialAssignment) -> usize {
    match face {
        FaceOwner::Object { id, .. } => assignment.object_materials[&id],
        FaceOwner::Ground => assignment.ground_material,
    }
}

/// Received power of a single path in dBm: Friis over the unfolded length
/// times the reflectance product, minus clutter losses.
pub fn path_power_dbm(
    path: &PathSegmentChain,
    assignment: &MaterialAssignment,
    space: &MaterialSpace,
    tx: &TxConfig,
) -> f64 {
    let lambda = tx.wavelength_m();
    let fspl_db = 20.0 * (4.0 * std::f64::consts::PI * path.total_length / lambda).log10();
    let mut refl_db = 0.0;
    for r in &path.reflections {
        let mat = space.get(material_for(r.face, assignment));
        let g2 = fresnel_power_reflectance(mat, tx.frequency_hz, r.incidence_rad.cos());
        refl_db += 10.0 * g2.log10();
    }
    tx.link_budget_db() - fspl_db + refl_db - path.clutter_db
}

/// Incoherent power sum over paths, clamped to the floor; empty input gives
/// the floor.
pub fn rsrp_from_paths(
    paths: &[PathSegmentChain],
    assignment: &MaterialAssignment,
    space: &MaterialSpace,
    tx: &TxConfig,
) -> f64 {
    let mut total_mw = 0.0;
    for p in paths {
        total_mw += 10f64.powf(path_power_dbm(p, assignment, space, tx) / 10.0);
    }
    if total_mw <= 0.0 {
        return RSRP_FLOOR_DBM;
    }
    (10.0 * total_mw.log10()).max(RSRP_FLOOR_DBM)
}

/// Reflector object ids on paths within `threshold_db` of the strongest
/// path, deduplicated strongest-first and truncated to `cap`.
pub fn involved_objects(result: &TraceResult, threshold_db: f64, cap: usize) -> Vec<u32> {
    ranked_reflectors(&result.paths, &result.path_powers_dbm, threshold_db, cap)
        .into_iter()
        .filter_map(|owner| match owner {
            FaceOwner::Object { id, .. } => Some(id),
            FaceOwner::Ground => None,
        })
        .collect()
}

/// Same ranking, but keeping the ground as a candidate slot.
pub fn ranked_reflectors(
    paths: &[PathSegmentChain],
    powers_dbm: &[f64],
    threshold_db: f64,
    cap: usize,
) -> Vec<FaceOwner> {
    let best = powers_dbm.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut order: Vec<usize> = (0..paths.len()).collect();
    order.sort_by(|&a, &b| powers_dbm[b].partial_cmp(&powers_dbm[a]).unwrap());
    let mut out: Vec<FaceOwner> = Vec::new();
    for idx in order {
        if powers_dbm[idx] < best - threshold_db {
            break;
        }
        for r in &paths[idx].reflections {
            let key = match r.face {
                FaceOwner::Object { id, .. } => FaceOwner::Object { id, edge: 0 },
                FaceOwner::Ground => FaceOwner::Ground,
            };
            if !out.contains(&key) {
                out.push(key);
            }
        }
    }
    out.truncate(cap);
    out
}

// ── Image-method tracing ───────────────────────────────────────────────────

struct OcclusionScene<'a> {
    objects: &'a [crate::scene::SceneObject],
    faces_per_object: Vec<Vec<Face>>,
    clutter: &'a [ClutterBox],
}

impl<'a> OcclusionScene<'a> {
    fn new(scene: &'a Scene, clutter: &'a [ClutterBox]) -> Self {
        OcclusionScene {
            objects: &scene.objects,
            faces_per_object: scene.objects.iter().map(|o| o.wall_faces()).collect(),
            clutter,
        }
    }

    /// True when the open segment `p`..`q` passes through any building.
    /// Crossings within `GEOM_EPS` of either endpoint are ignored so that
    /// reflection points sitting exactly on a face do not self-occlude.
    fn occluded(&self, p: Vec3, q: Vec3) -> bool {
        let seg_len = p.dist(q);
        for (obj, faces) in self.objects.iter().zip(&self.faces_per_object) {
            if !aabb_may_intersect(obj, p, q) {
                continue;
            }
            // Wall crossings.
            for f in faces {
                if let Some((hit, _t)) = f.intersect_segment_plane(p, q) {
                    if f.contains_point(hit)
                        && hit.dist(p) > GEOM_EPS
                        && hit.dist(q) > GEOM_EPS
                    {
                        return true;
                    }
                }
            }
            // Roof crossing.
            if (p.z - obj.height) * (q.z - obj.height) < 0.0 {
                let t = (obj.height - p.z) / (q.z - p.z);
                if t * seg_len > GEOM_EPS && (1.0 - t) * seg_len > GEOM_EPS {
                    let hit = p + (q - p) * t;
                    if point_in_polygon(hit.xy(), &obj.footprint) {
                        return true;
                    }
                }
            }
            // Both endpoints strictly inside the prism (no face crossed).
            if self.strictly_inside(obj, p) && self.strictly_inside(obj, q) {
                return true;
            }
        }
        false
    }

    fn strictly_inside(&self, obj: &crate::scene::SceneObject, p: Vec3) -> bool {
        p.z > GEOM_EPS && p.z < obj.height - GEOM_EPS && point_in_polygon(p.xy(), &obj.footprint)
    }

    /// Total clutter attenuation across all sub-segments of a vertex chain.
    fn clutter_db(&self, vertices: &[Vec3]) -> f64 {
        let mut total = 0.0;
        for w in vertices.windows(2) {
            for c in self.clutter {
                if c.shape.segment_intersects(w[0], w[1]) {
                    total += c.attenuation_db;
                }
            }
        }
        total
    }
}

fn aabb_may_intersect(obj: &crate::scene::SceneObject, p: Vec3, q: Vec3) -> bool {
    let (mut minx, mut miny) = (f64::INFINITY, f64::INFINITY);
    let (mut maxx, mut maxy) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for v in &obj.footprint {
        minx = minx.min(v.x);
        miny = miny.min(v.y);
        maxx = maxx.max(v.x);
        maxy = maxy.max(v.y);
    }
    let b = Box3 {
        min: Vec3::new(minx - GEOM_EPS, miny - GEOM_EPS, -GEOM_EPS),
        max: Vec3::new(maxx + GEOM_EPS, maxy + GEOM_EPS, obj.height + GEOM_EPS),
    };
    b.segment_intersects(p, q) || b.contains(p) || b.contains(q)
}

/// Cosine of the incidence angle from the face normal for incoming unit
/// direction `d` (TX side), plus the sign checks that reject paths hitting
/// the back of a face.
fn reflection_is_front_side(face: &Face, incoming: Vec3, outgoing: Vec3) -> Option<f64> {
    let cos_in = -incoming.normalized().dot(face.normal);
    let cos_out = outgoing.normalized().dot(face.normal);
    if cos_in > 1e-9 && cos_out > 1e-9 {
        Some(cos_in.clamp(0.0, 1.0))
    } else {
        None
    }
}

/// Enumerates LoS and depth-1/depth-2 specular paths to `rx`, scores them
/// under `assignment`, and reports the involved objects.
pub fn trace(
    scene: &Scene,
    assignment: &MaterialAssignment,
    rx: Vec3,
) -> Result<TraceResult, TraceError> {
    trace_with_obstructions(scene, assignment, rx, &[])
}

/// `trace` plus attenuating clutter boxes that are part of occlusion geometry
/// but never reflect. The synthetic world uses this for its hidden scene.
pub fn trace_with_obstructions(
    scene: &Scene,
    assignment: &MaterialAssignment,
    rx: Vec3,
    clutter: &[ClutterBox],
) -> Result<TraceResult, TraceError> {
    if !scene.bounds.contains(rx.xy()) {
        return Err(TraceError::RxOutOfBounds);
    }
    let tx = scene.tx.position;
    if tx.dist(rx) < GEOM_EPS {
        return Err(TraceError::CoincidentTxRx);
    }

    let faces = scene.reflecting_faces();
    let occ = OcclusionScene::new(scene, clutter);
    let mut paths: Vec<PathSegmentChain> = Vec::new();

    // Line of sight.
    if tx.dist(rx) <= scene.d_max && !occ.occluded(tx, rx) {
        let vertices = vec![tx, rx];
        let clutter_db = occ.clutter_db(&vertices);
        paths.push(PathSegmentChain {
            kind: PathKind::Los,
            vertices,
            reflections: vec![],
            total_length: tx.dist(rx),
            clutter_db,
        });
    }

    // First-order reflections.
    let images: Vec<Vec3> = faces.iter().map(|f| f.mirror(tx)).collect();
    for (i, f) in faces.iter().enumerate() {
        let chain = build_chain(&[(f, images[i])], tx, rx, scene.d_max, &occ);
        if let Some(c) = chain {
            paths.push(c);
        }
    }

    // Second-order reflections: mirror the first image across the second face.
    for (i, f1) in faces.iter().enumerate() {
        for (j, f2) in faces.iter().enumerate() {
            if i == j {
                continue;
            }
            let img2 = f2.mirror(images[i]);
            if img2.dist(rx) > scene.d_max {
                continue;
            }
            let chain = build_chain(&[(f1, images[i]), (f2, img2)], tx, rx, scene.d_max, &occ);
            if let Some(c) = chain {
                paths.push(c);
            }
        }
    }

    let path_powers_dbm: Vec<f64> = paths
        .iter()
        .map(|p| path_power_dbm(p, assignment, &scene.material_space, &scene.tx))
        .collect();
    let rsrp_dbm = rsrp_from_paths(&paths, assignment, &scene.material_space, &scene.tx);
    let involved = ranked_reflectors(&paths, &path_powers_dbm, f64::INFINITY, usize::MAX)
        .into_iter()
        .filter_map(|owner| match owner {
            FaceOwner::Object { id, .. } => Some(id),
            FaceOwner::Ground => None,
        })
        .collect();

    Ok(TraceResult {
        paths,
        path_powers_dbm,
        rsrp_dbm,
        involved_objects: involved,
    })
}

/// Walks image points back from RX to TX, validating face containment,
/// front-side incidence, length, and occlusion of every sub-segment.
fn build_chain(
    mirrors: &[(&Face, Vec3)],
    tx: Vec3,
    rx: Vec3,
    d_max: f64,
    occ: &OcclusionScene,
) -> Option<PathSegmentChain> {
    let depth = mirrors.len();
    let (_, last_image) = mirrors[depth - 1];
    let total_length = last_image.dist(rx);
    if total_length > d_max || total_length < GEOM_EPS {
        return None;
    }

    // Reflection points, found from the RX side backwards.
    let mut points = vec![Vec3::new(0.0, 0.0, 0.0); depth];
    let mut target = rx;
    for k in (0..depth).rev() {
        let (face, image) = mirrors[k];
        let (hit, _t) = face.intersect_segment_plane(image, target)?;
        if !face.contains_point(hit) {
            return None;
        }
        points[k] = hit;
        target = hit;
    }

    let mut vertices = Vec::with_capacity(depth + 2);
    vertices.push(tx);
    vertices.extend_from_slice(&points);
    vertices.push(rx);

    // Front-side checks and incidence angles.
    let mut reflections = Vec::with_capacity(depth);
    for k in 0..depth {
        let (face, _) = mirrors[k];
        let incoming = vertices[k + 1] - vertices[k];
        let outgoing = vertices[k + 2] - vertices[k + 1];
        if incoming.norm() < GEOM_EPS || outgoing.norm() < GEOM_EPS {
            return None;
        }
        let cos_in = reflection_is_front_side(face, incoming, outgoing)?;
        reflections.push(Reflection {
            face: face.owner,
            incidence_rad: cos_in.acos(),
        });
    }

    // Occlusion of every sub-segment.
    for w in vertices.windows(2) {
        if occ.occluded(w[0], w[1]) {
            return None;
        }
    }

    let clutter_db = occ.clutter_db(&vertices);
    Some(PathSegmentChain {
        kind: if depth == 1 {
            PathKind::Reflect1
        } else {
            PathKind::Reflect2
        },
        vertices,
        reflections,
        total_length,
        clutter_db,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Rect, Vec2};
    use crate::scene::{default_material_space, MaterialSpace, Scene, SceneObject};
    use approx::assert_relative_eq;

    fn tx_at(p: Vec3) -> TxConfig {
        TxConfig {
            position: p,
            tx_power_dbm: 37.0,
            tx_gain_dbi: 12.0,
            tx_losses_db: 15.0,
            misc_losses_db: 18.0,
            rx_gain_dbi: 1.0,
            rx_losses_db: 18.0,
            frequency_hz: 2.14e9,
        }
    }

    fn scene_with(objects: Vec<SceneObject>, tx: TxConfig, half: f64) -> Scene {
        let s = Scene {
            bounds: Rect::new(Vec2::new(-half, -half), Vec2::new(half, half)),
            d_max: 4.0 * half,
            tx,
            ground_material: default_material_space().index_of("itu-concrete").unwrap(),
            objects,
            material_space: default_material_space(),
        };
        s.validate().unwrap();
        s
    }

    fn rect_object(id: u32, x0: f64, y0: f64, x1: f64, y1: f64, h: f64) -> SceneObject {
        SceneObject {
            id,
            footprint: vec![
                Vec2::new(x0, y0),
                Vec2::new(x1, y0),
                Vec2::new(x1, y1),
                Vec2::new(x0, y1),
            ],
            height: h,
            material: 0,
        }
    }

    fn friis_rsrp(tx: &TxConfig, dist: f64) -> f64 {
        tx.link_budget_db()
            - 20.0 * (4.0 * std::f64::consts::PI * dist / tx.wavelength_m()).log10()
    }

    #[test]
    fn free_space_los_matches_friis_budget() {
        // TX high enough that the ground reflection is out of half-space? No:
        // ground exists, so place TX and RX at the same height and far from
        // the ground bounce by raising both; instead verify the LoS component.
        let tx = tx_at(Vec3::new(0.0, 0.0, 500.0));
        let scene = scene_with(vec![], tx.clone(), 300.0);
        let a = crate::scene::default_assignment(&scene).unwrap();
        let rx = Vec3::new(100.0, 0.0, 500.0);
        let res = trace(&scene, &a, rx).unwrap();
        let los: Vec<_> = res.paths.iter().filter(|p| p.kind == PathKind::Los).collect();
        assert_eq!(los.len(), 1);
        let expected = friis_rsrp(&tx, 100.0);
        let los_power = path_power_dbm(los[0], &a, &scene.material_space, &scene.tx);
        assert_relative_eq!(los_power, expected, epsilon = 1e-9);
        // Hand-check of the budget value quoted for 100 m at 2.14 GHz.
        assert!((expected - (-80.05)).abs() < 0.01);
    }

    #[test]
    fn single_wall_image_geometry() {
        // Long near-infinite metal wall along y = 0; TX and RX 10 m in front,
        // 20 m apart. Mirror image path length is sqrt(20^2 + 20^2).
        let tx = tx_at(Vec3::new(0.0, 10.0, 10.0));
        let mut wall = rect_object(1, -1000.0, -1.0, 1000.0, 0.0, 60.0);
        let metal = default_material_space().index_of("itu-metal").unwrap();
        wall.material = metal;
        let scene = scene_with(vec![wall], tx, 1500.0);
        let mut a = crate::scene::default_assignment(&scene).unwrap();
        a.object_materials.insert(1, metal);
        let rx = Vec3::new(20.0, 10.0, 10.0);
        let res = trace(&scene, &a, rx).unwrap();

        let los = res.paths.iter().filter(|p| p.kind == PathKind::Los).count();
        assert_eq!(los, 1);
        let wall_refl: Vec<_> = res
            .paths
            .iter()
            .filter(|p| {
                p.kind == PathKind::Reflect1
                    && matches!(p.reflections[0].face, FaceOwner::Object { id: 1, .. })
            })
            .collect();
        assert_eq!(wall_refl.len(), 1);
        let expect_len = (20.0f64 * 20.0 + 20.0 * 20.0).sqrt();
        assert_relative_eq!(wall_refl[0].total_length, expect_len, epsilon = 1e-9);
        // Specular point at the midpoint on the wall face.
        let p = wall_refl[0].vertices[1];
        assert_relative_eq!(p.x, 10.0, epsilon = 1e-9);
        assert_relative_eq!(p.y, 0.0, epsilon = 1e-9);
        // Perfect conductor: reflected power equals Friis over the unfolded length.
        let got = path_power_dbm(wall_refl[0], &a, &scene.material_space, &scene.tx);
        assert_relative_eq!(got, friis_rsrp(&scene.tx, expect_len), epsilon = 1e-9);
    }

    #[test]
    fn enclosed_receiver_has_no_paths() {
        let tx = tx_at(Vec3::new(-80.0, 0.0, 34.0));
        let hull = rect_object(5, -10.0, -10.0, 10.0, 10.0, 12.0);
        let scene = scene_with(vec![hull], tx, 200.0);
        let a = crate::scene::default_assignment(&scene).unwrap();
        let res = trace(&scene, &a, Vec3::new(0.0, 0.0, 1.0)).unwrap();
        assert!(res.paths.is_empty());
        assert_eq!(res.rsrp_dbm, RSRP_FLOOR_DBM);
        assert!(res.involved_objects.is_empty());
    }

    #[test]
    fn two_equal_paths_add_three_db() {
        let tx = tx_at(Vec3::new(0.0, 0.0, 50.0));
        let p = PathSegmentChain {
            kind: PathKind::Los,
            vertices: vec![tx.position, Vec3::new(100.0, 0.0, 50.0)],
            reflections: vec![],
            total_length: 100.0,
            clutter_db: 0.0,
        };
        let space = default_material_space();
        let a = MaterialAssignment {
            object_materials: Default::default(),
            ground_material: 0,
        };
        let one = rsrp_from_paths(std::slice::from_ref(&p), &a, &space, &tx);
        let two = rsrp_from_paths(&[p.clone(), p], &a, &space, &tx);
        assert_relative_eq!(two - one, 10.0 * 2.0f64.log10(), epsilon = 1e-12);
    }

    #[test]
    fn geometry_is_independent_of_assignment() {
        let tx = tx_at(Vec3::new(-60.0, 5.0, 20.0));
        let objs = vec![
            rect_object(1, 20.0, -30.0, 40.0, 30.0, 25.0),
            rect_object(2, -30.0, 40.0, 30.0, 55.0, 18.0),
        ];
        let scene = scene_with(objs, tx, 200.0);
        let a1 = crate::scene::default_assignment(&scene).unwrap();
        let mut a2 = a1.clone();
        let metal = scene.material_space.index_of("itu-metal").unwrap();
        for v in a2.object_materials.values_mut() {
            *v = metal;
        }
        let rx = Vec3::new(-10.0, 0.0, 1.0);
        let r1 = trace(&scene, &a1, rx).unwrap();
        let r2 = trace(&scene, &a2, rx).unwrap();
        assert_eq!(r1.paths.len(), r2.paths.len());
        for (p1, p2) in r1.paths.iter().zip(&r2.paths) {
            assert_eq!(p1.vertices.len(), p2.vertices.len());
            for (v1, v2) in p1.vertices.iter().zip(&p2.vertices) {
                assert!(v1.dist(*v2) < 1e-9);
            }
        }
        assert!(r2.rsrp_dbm >= r1.rsrp_dbm - 1e-9, "metal never weakens paths");
    }

    #[test]
    fn reciprocity_of_path_geometry() {
        let txp = Vec3::new(-40.0, 8.0, 12.0);
        let rxp = Vec3::new(45.0, -6.0, 3.0);
        let objs = vec![rect_object(1, -10.0, 25.0, 25.0, 40.0, 20.0)];
        let fwd_scene = scene_with(objs.clone(), tx_at(txp), 150.0);
        let rev_scene = scene_with(objs, tx_at(rxp), 150.0);
        let a = crate::scene::default_assignment(&fwd_scene).unwrap();
        let fwd = trace(&fwd_scene, &a, rxp).unwrap();
        let rev = trace(&rev_scene, &a, txp).unwrap();
        assert_eq!(fwd.paths.len(), rev.paths.len());
        let mut rev_reversed: Vec<Vec<Vec3>> = rev
            .paths
            .iter()
            .map(|p| p.vertices.iter().rev().cloned().collect())
            .collect();
        for p in &fwd.paths {
            let found = rev_reversed.iter().position(|verts| {
                verts.len() == p.vertices.len()
                    && verts
                        .iter()
                        .zip(&p.vertices)
                        .all(|(a, b)| a.dist(*b) < 1e-7)
            });
            let idx = found.expect("matching reversed path");
            rev_reversed.remove(idx);
        }
    }

    #[test]
    fn involved_objects_threshold_and_cap() {
        let mk = |id: u32, power: f64| {
            (
                PathSegmentChain {
                    kind: PathKind::Reflect1,
                    vertices: vec![],
                    reflections: vec![Reflection {
                        face: FaceOwner::Object { id, edge: 0 },
                        incidence_rad: 0.3,
                    }],
                    total_length: 10.0,
                    clutter_db: 0.0,
                },
                power,
            )
        };
        let (paths, powers): (Vec<_>, Vec<_>) =
            [mk(1, -60.0), mk(2, -95.0)].into_iter().unzip();
        let res = TraceResult {
            paths,
            path_powers_dbm: powers,
            rsrp_dbm: -60.0,
            involved_objects: vec![],
        };
        assert_eq!(involved_objects(&res, 25.0, 4), vec![1]);

        let (paths, powers): (Vec<_>, Vec<_>) = (0..5u32)
            .map(|i| mk(i, -60.0 - i as f64))
            .unzip();
        let res = TraceResult {
            paths,
            path_powers_dbm: powers,
            rsrp_dbm: -60.0,
            involved_objects: vec![],
        };
        assert_eq!(involved_objects(&res, 25.0, 4), vec![0, 1, 2, 3]);

        // LoS-only: nothing to tune.
        let los = TraceResult {
            paths: vec![PathSegmentChain {
                kind: PathKind::Los,
                vertices: vec![],
                reflections: vec![],
                total_length: 5.0,
                clutter_db: 0.0,
            }],
            path_powers_dbm: vec![-70.0],
            rsrp_dbm: -70.0,
            involved_objects: vec![],
        };
        assert!(involved_objects(&los, 25.0, 4).is_empty());
    }

    #[test]
    fn fresnel_limits() {
        let space = default_material_space();
        let concrete = space.get(space.index_of("itu-concrete").unwrap());
        // Normal incidence agrees with ((1-sqrt(eta))/(1+sqrt(eta)))^2 magnitude.
        let omega = 2.0 * std::f64::consts::PI * 2.14e9;
        let eta = Complex64::new(
            concrete.rel_permittivity,
            -concrete.conductivity / (omega * VACUUM_PERMITTIVITY),
        );
        let g = (Complex64::new(1.0, 0.0) - eta.sqrt()) / (Complex64::new(1.0, 0.0) + eta.sqrt());
        let expect = g.norm_sqr();
        assert_relative_eq!(
            fresnel_power_reflectance(concrete, 2.14e9, 1.0),
            expect,
            epsilon = 1e-12
        );
        // Grazing incidence reflects everything.
        assert!(fresnel_power_reflectance(concrete, 2.14e9, 0.0) > 0.999);
        // Perfect conductor reflects everything at every angle.
        let metal = space.get(space.index_of("itu-metal").unwrap());
        for c in [0.0, 0.3, 0.7, 1.0] {
            assert_eq!(fresnel_power_reflectance(metal, 2.14e9, c), 1.0);
        }
    }

    #[test]
    fn clutter_attenuates_los() {
        let tx = tx_at(Vec3::new(-50.0, 0.0, 10.0));
        let scene = scene_with(vec![], tx, 100.0);
        let a = crate::scene::default_assignment(&scene).unwrap();
        let rx = Vec3::new(50.0, 0.0, 10.0);
        let clear = trace(&scene, &a, rx).unwrap();
        let clutter = [ClutterBox {
            shape: Box3 {
                min: Vec3::new(-5.0, -5.0, 0.0),
                max: Vec3::new(5.0, 5.0, 30.0),
            },
            attenuation_db: 10.0,
        }];
        let blocked = trace_with_obstructions(&scene, &a, rx, &clutter).unwrap();
        assert!(blocked.rsrp_dbm < clear.rsrp_dbm);
    }

    #[test]
    fn rx_outside_bounds_is_an_error() {
        let scene = scene_with(vec![], tx_at(Vec3::new(0.0, 0.0, 34.0)), 100.0);
        let a = crate::scene::default_assignment(&scene).unwrap();
        assert!(matches!(
            trace(&scene, &a, Vec3::new(500.0, 0.0, 1.0)),
            Err(TraceError::RxOutOfBounds)
        ));
        assert!(matches!(
            trace(&scene, &a, Vec3::new(0.0, 0.0, 34.0)),
            Err(TraceError::CoincidentTxRx)
        ));
    }
}
