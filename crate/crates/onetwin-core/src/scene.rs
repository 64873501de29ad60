//! Scene model: extruded-polygon buildings, radio materials, transmitter and
//! link-budget configuration, plus the canonical JSON scene file format.
//!
//! Buildings are 2.5D: a counter-clockwise footprint extruded to a flat roof.
//! Wall faces are derived one per footprint edge with outward normals.
//! Scenes and material spaces are immutable after load and safe to share
//! across threads.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    polygon_is_simple, polygon_signed_area2, Face, FaceOwner, Rect, Vec2, Vec3,
};
use crate::tuner::MaterialAssignment;

/// Band-66 downlink center frequency used to evaluate the shipped ITU table.
pub const DEFAULT_FREQUENCY_HZ: f64 = 2.14e9;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("scene parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("material '{0}': rel_permittivity must be >= 1 or the perfect-conductor sentinel")]
    BadPermittivity(String),
    #[error("material '{0}': conductivity must be >= 0")]
    BadConductivity(String),
    #[error("duplicate material name '{0}' in material space")]
    DuplicateMaterialName(String),
    #[error("material space must contain at least 2 materials")]
    MaterialSpaceTooSmall,
    #[error("unknown material name '{0}'")]
    UnknownMaterial(String),
    #[error("tx frequency must be > 0")]
    BadFrequency,
    #[error("tx field '{0}' is not finite")]
    NonFiniteTxField(&'static str),
    #[error("bounds are empty or inverted")]
    BadBounds,
    #[error("d_max {d_max} is smaller than the bounds diameter {diameter}")]
    DMaxTooSmall { d_max: f64, diameter: f64 },
    #[error("object {0}: duplicate id")]
    DuplicateObjectId(u32),
    #[error("object {0}: footprint needs at least 3 vertices")]
    DegeneratePolygon(u32),
    #[error("object {0}: footprint is self-intersecting")]
    SelfIntersectingPolygon(u32),
    #[error("object {0}: footprint must be counter-clockwise")]
    NotCounterClockwise(u32),
    #[error("object {0}: height must be > 0")]
    BadHeight(u32),
    #[error("object {0}: footprint leaves scene bounds")]
    OutOfBounds(u32),
}

/// A radio material: relative permittivity and conductivity at the scene
/// frequency. `rel_permittivity = f64::INFINITY` marks a perfect conductor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub name: String,
    #[serde(with = "permittivity_serde")]
    pub rel_permittivity: f64,
    pub conductivity: f64,
}

impl Material {
    pub fn is_perfect_conductor(&self) -> bool {
        self.rel_permittivity.is_infinite()
    }
}

/// JSON has no infinity literal, so the perfect-conductor sentinel is encoded
/// as the string "inf"; everything else stays a plain decimal number.
mod permittivity_serde {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) if t == "inf" || t == "Infinity" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(de::Error::custom(format!(
                "invalid permittivity value '{t}'"
            ))),
        }
    }
}

/// Ordered, finite set of candidate materials; index `b` identifies a
/// material for the whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpace {
    pub materials: Vec<Material>,
}

impl MaterialSpace {
    pub fn len(&self) -> usize {
        self.materials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.materials.is_empty()
    }

    pub fn get(&self, index: usize) -> &Material {
        &self.materials[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.materials.iter().position(|m| m.name == name)
    }

    fn validate(&self) -> Result<(), SceneError> {
        if self.materials.len() < 2 {
            return Err(SceneError::MaterialSpaceTooSmall);
        }
        let mut seen = BTreeSet::new();
        for m in &self.materials {
            if !m.is_perfect_conductor() && !(m.rel_permittivity >= 1.0) {
                return Err(SceneError::BadPermittivity(m.name.clone()));
            }
            if !(m.conductivity >= 0.0) {
                return Err(SceneError::BadConductivity(m.name.clone()));
            }
            if !seen.insert(m.name.clone()) {
                return Err(SceneError::DuplicateMaterialName(m.name.clone()));
            }
        }
        Ok(())
    }
}

/// An extruded building: CCW footprint, flat roof at `height`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub id: u32,
    pub footprint: Vec<Vec2>,
    pub height: f64,
    pub material: usize,
}

impl SceneObject {
    /// One vertical wall face per footprint edge, outward normals.
    pub fn wall_faces(&self) -> Vec<Face> {
        let n = self.footprint.len();
        (0..n)
            .map(|i| {
                Face::wall(
                    FaceOwner::Object {
                        id: self.id,
                        edge: i,
                    },
                    self.footprint[i],
                    self.footprint[(i + 1) % n],
                    self.height,
                )
            })
            .collect()
    }
}

/// Transmitter placement and the scalar link budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TxConfig {
    pub position: Vec3,
    pub tx_power_dbm: f64,
    pub tx_gain_dbi: f64,
    pub tx_losses_db: f64,
    pub misc_losses_db: f64,
    pub rx_gain_dbi: f64,
    pub rx_losses_db: f64,
    pub frequency_hz: f64,
}

impl TxConfig {
    pub fn wavelength_m(&self) -> f64 {
        SPEED_OF_LIGHT / self.frequency_hz
    }

    /// All gains and losses collapsed into one dB term added to TX power.
    pub fn link_budget_db(&self) -> f64 {
        self.tx_power_dbm + self.tx_gain_dbi + self.rx_gain_dbi
            - self.tx_losses_db
            - self.misc_losses_db
            - self.rx_losses_db
    }

    fn validate(&self) -> Result<(), SceneError> {
        if !(self.frequency_hz > 0.0) {
            return Err(SceneError::BadFrequency);
        }
        for (name, v) in [
            ("position.x", self.position.x),
            ("position.y", self.position.y),
            ("position.z", self.position.z),
            ("tx_power_dbm", self.tx_power_dbm),
            ("tx_gain_dbi", self.tx_gain_dbi),
            ("tx_losses_db", self.tx_losses_db),
            ("misc_losses_db", self.misc_losses_db),
            ("rx_gain_dbi", self.rx_gain_dbi),
            ("rx_losses_db", self.rx_losses_db),
        ] {
            if !v.is_finite() {
                return Err(SceneError::NonFiniteTxField(name));
            }
        }
        Ok(())
    }
}

/// The full static scene: geometry, materials, transmitter, extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub bounds: Rect,
    pub d_max: f64,
    pub tx: TxConfig,
    pub ground_material: usize,
    pub objects: Vec<SceneObject>,
    pub material_space: MaterialSpace,
}

impl Scene {
    /// All reflecting faces: every wall of every object plus the ground.
    pub fn reflecting_faces(&self) -> Vec<Face> {
        let mut faces: Vec<Face> = self.objects.iter().flat_map(|o| o.wall_faces()).collect();
        faces.push(Face::ground(&self.bounds));
        faces
    }

    pub fn object(&self, id: u32) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        self.material_space.validate()?;
        self.tx.validate()?;
        if !(self.bounds.width() > 0.0 && self.bounds.depth() > 0.0) {
            return Err(SceneError::BadBounds);
        }
        let diameter = self.bounds.diameter();
        if self.d_max < diameter - 1e-9 {
            return Err(SceneError::DMaxTooSmall {
                d_max: self.d_max,
                diameter,
            });
        }
        if self.ground_material >= self.material_space.len() {
            return Err(SceneError::UnknownMaterial(format!(
                "ground index {}",
                self.ground_material
            )));
        }
        let mut ids = BTreeSet::new();
        for o in &self.objects {
            if !ids.insert(o.id) {
                return Err(SceneError::DuplicateObjectId(o.id));
            }
            if o.footprint.len() < 3 {
                return Err(SceneError::DegeneratePolygon(o.id));
            }
            if !polygon_is_simple(&o.footprint) {
                return Err(SceneError::SelfIntersectingPolygon(o.id));
            }
            if polygon_signed_area2(&o.footprint) <= 0.0 {
                return Err(SceneError::NotCounterClockwise(o.id));
            }
            if !(o.height > 0.0) {
                return Err(SceneError::BadHeight(o.id));
            }
            if o.footprint.iter().any(|v| !self.bounds.contains(*v)) {
                return Err(SceneError::OutOfBounds(o.id));
            }
            if o.material >= self.material_space.len() {
                return Err(SceneError::UnknownMaterial(format!(
                    "object {} material index {}",
                    o.id, o.material
                )));
            }
        }
        Ok(())
    }
}

// ── Scene file format ──────────────────────────────────────────────────────
//
// Materials are referenced by name in the file and resolved to indices on
// load. Unknown top-level keys are rejected so a sealed world export cannot
// be mistaken for a plain scene.

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    bounds: Rect,
    d_max: f64,
    tx: TxConfig,
    ground_material: String,
    objects: Vec<SceneObjectFile>,
    material_space: Vec<Material>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneObjectFile {
    id: u32,
    footprint: Vec<[f64; 2]>,
    height: f64,
    material: String,
}

pub fn scene_from_json(text: &str) -> Result<Scene, SceneError> {
    let file: SceneFile = serde_json::from_str(text)?;
    let space = MaterialSpace {
        materials: file.material_space,
    };
    space.validate()?;
    let ground = space
        .index_of(&file.ground_material)
        .ok_or_else(|| SceneError::UnknownMaterial(file.ground_material.clone()))?;
    let mut objects = Vec::with_capacity(file.objects.len());
    for o in file.objects {
        let material = space
            .index_of(&o.material)
            .ok_or_else(|| SceneError::UnknownMaterial(o.material.clone()))?;
        objects.push(SceneObject {
            id: o.id,
            footprint: o.footprint.iter().map(|v| Vec2::new(v[0], v[1])).collect(),
            height: o.height,
            material,
        });
    }
    let scene = Scene {
        bounds: file.bounds,
        d_max: file.d_max,
        tx: file.tx,
        ground_material: ground,
        objects,
        material_space: space,
    };
    scene.validate()?;
    Ok(scene)
}

pub fn scene_to_json(scene: &Scene) -> String {
    let file = SceneFile {
        bounds: scene.bounds,
        d_max: scene.d_max,
        tx: scene.tx.clone(),
        ground_material: scene.material_space.get(scene.ground_material).name.clone(),
        objects: scene
            .objects
            .iter()
            .map(|o| SceneObjectFile {
                id: o.id,
                footprint: o.footprint.iter().map(|v| [v.x, v.y]).collect(),
                height: o.height,
                material: scene.material_space.get(o.material).name.clone(),
            })
            .collect(),
        material_space: scene.material_space.materials.clone(),
    };
    serde_json::to_string_pretty(&file).expect("scene serialization cannot fail")
}

pub fn load_scene(path: &Path) -> Result<Scene, SceneError> {
    let text = std::fs::read_to_string(path)?;
    scene_from_json(&text)
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<(), SceneError> {
    std::fs::write(path, scene_to_json(scene))?;
    Ok(())
}

// ── Default material space ─────────────────────────────────────────────────

#[derive(Deserialize)]
struct ItuTable {
    #[allow(dead_code)]
    comment: String,
    materials: Vec<ItuEntry>,
}

#[derive(Deserialize)]
struct ItuEntry {
    name: String,
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    perfect_conductor: bool,
}

const ITU_TABLE_JSON: &str = include_str!("../data/itu_materials.json");

/// Evaluates the shipped ITU power-law table at the given frequency.
pub fn material_space_at(frequency_hz: f64) -> MaterialSpace {
    let table: ItuTable = serde_json::from_str(ITU_TABLE_JSON).expect("shipped table is valid");
    let f_ghz = frequency_hz / 1e9;
    MaterialSpace {
        materials: table
            .materials
            .into_iter()
            .map(|e| Material {
                name: e.name,
                rel_permittivity: if e.perfect_conductor {
                    f64::INFINITY
                } else {
                    e.a * f_ghz.powf(e.b)
                },
                conductivity: e.c * f_ghz.powf(e.d),
            })
            .collect(),
    }
}

/// The nine-material default space evaluated at the band-66 center frequency.
pub fn default_material_space() -> MaterialSpace {
    material_space_at(DEFAULT_FREQUENCY_HZ)
}

/// Every building starts as marble over a concrete ground.
pub fn default_assignment(scene: &Scene) -> Result<MaterialAssignment, SceneError> {
    let marble = scene
        .material_space
        .index_of("itu-marble")
        .ok_or_else(|| SceneError::UnknownMaterial("itu-marble".into()))?;
    let concrete = scene
        .material_space
        .index_of("itu-concrete")
        .ok_or_else(|| SceneError::UnknownMaterial("itu-concrete".into()))?;
    Ok(MaterialAssignment {
        object_materials: scene.objects.iter().map(|o| (o.id, marble)).collect(),
        ground_material: concrete,
    })
}

/// The assignment a scene file carries inline.
pub fn assignment_from_scene(scene: &Scene) -> MaterialAssignment {
    MaterialAssignment {
        object_materials: scene.objects.iter().map(|o| (o.id, o.material)).collect(),
        ground_material: scene.ground_material,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn test_tx() -> TxConfig {
        TxConfig {
            position: Vec3::new(0.0, 0.0, 34.0),
            tx_power_dbm: 37.0,
            tx_gain_dbi: 12.0,
            tx_losses_db: 15.0,
            misc_losses_db: 18.0,
            rx_gain_dbi: 1.0,
            rx_losses_db: 18.0,
            frequency_hz: DEFAULT_FREQUENCY_HZ,
        }
    }

    fn empty_scene() -> Scene {
        Scene {
            bounds: Rect::new(Vec2::new(-200.0, -200.0), Vec2::new(200.0, 200.0)),
            d_max: 600.0,
            tx: test_tx(),
            ground_material: default_material_space().index_of("itu-concrete").unwrap(),
            objects: vec![],
            material_space: default_material_space(),
        }
    }

    fn box_object(id: u32, cx: f64, cy: f64, w: f64, d: f64, h: f64, material: usize) -> SceneObject {
        SceneObject {
            id,
            footprint: vec![
                Vec2::new(cx - w / 2.0, cy - d / 2.0),
                Vec2::new(cx + w / 2.0, cy - d / 2.0),
                Vec2::new(cx + w / 2.0, cy + d / 2.0),
                Vec2::new(cx - w / 2.0, cy + d / 2.0),
            ],
            height: h,
            material,
        }
    }

    #[test]
    fn default_space_matches_expected_contents() {
        let space = default_material_space();
        assert_eq!(space.len(), 9);
        for name in ["itu-marble", "itu-metal", "itu-glass", "itu-concrete"] {
            assert!(space.index_of(name).is_some(), "missing {name}");
        }
        for m in &space.materials {
            assert!(m.conductivity >= 0.0);
            assert!(m.is_perfect_conductor() || m.rel_permittivity >= 1.0);
        }
        assert!(space.get(space.index_of("itu-metal").unwrap()).is_perfect_conductor());
    }

    #[test]
    fn empty_scene_round_trips() {
        let s = empty_scene();
        let json = scene_to_json(&s);
        let back = scene_from_json(&json).unwrap();
        assert_eq!(s, back);
        assert!(back.objects.is_empty());
    }

    #[test]
    fn three_object_round_trip_preserves_everything() {
        let mut s = empty_scene();
        for i in 0..3 {
            s.objects.push(box_object(
                i,
                -50.0 + 40.0 * i as f64,
                30.0,
                10.0,
                12.0,
                8.0 + i as f64,
                (i as usize) % s.material_space.len(),
            ));
        }
        let back = scene_from_json(&scene_to_json(&s)).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn perfect_conductor_sentinel_survives_round_trip() {
        let mut s = empty_scene();
        let metal = s.material_space.index_of("itu-metal").unwrap();
        s.objects.push(box_object(7, 0.0, 50.0, 10.0, 10.0, 5.0, metal));
        let back = scene_from_json(&scene_to_json(&s)).unwrap();
        assert!(back.material_space.get(metal).is_perfect_conductor());
        assert_eq!(s, back);
    }

    #[test]
    fn two_vertex_footprint_is_rejected() {
        let mut s = empty_scene();
        s.objects.push(SceneObject {
            id: 0,
            footprint: vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0)],
            height: 3.0,
            material: 0,
        });
        match scene_from_json(&scene_to_json(&s)) {
            Err(SceneError::DegeneratePolygon(0)) => {}
            other => panic!("expected degenerate polygon error, got {other:?}"),
        }
    }

    #[test]
    fn default_assignment_is_marble_over_concrete() {
        let mut s = empty_scene();
        for i in 0..3 {
            s.objects.push(box_object(i, -60.0 + 50.0 * i as f64, 40.0, 8.0, 8.0, 6.0, 0));
        }
        let a = default_assignment(&s).unwrap();
        let marble = s.material_space.index_of("itu-marble").unwrap();
        let concrete = s.material_space.index_of("itu-concrete").unwrap();
        assert_eq!(a.object_materials.len(), 3);
        assert!(a.object_materials.values().all(|&m| m == marble));
        assert_eq!(a.ground_material, concrete);

        let empty = default_assignment(&empty_scene()).unwrap();
        assert!(empty.object_materials.is_empty());
        assert_eq!(empty.ground_material, concrete);
    }

    #[test]
    fn default_assignment_fails_without_marble() {
        let mut s = empty_scene();
        s.material_space.materials.retain(|m| m.name != "itu-marble");
        s.ground_material = s.material_space.index_of("itu-concrete").unwrap();
        match default_assignment(&s) {
            Err(SceneError::UnknownMaterial(name)) => assert_eq!(name, "itu-marble"),
            other => panic!("expected unknown material, got {other:?}"),
        }
    }

    #[test]
    fn sealed_world_files_are_refused() {
        let mut v: serde_json::Value = serde_json::from_str(&scene_to_json(&empty_scene())).unwrap();
        v["sealed"] = serde_json::json!({"hidden": true});
        assert!(scene_from_json(&v.to_string()).is_err());
    }

    proptest! {
        #[test]
        fn out_of_bounds_objects_are_rejected(cx in -400.0f64..400.0, cy in -400.0f64..400.0) {
            let mut s = empty_scene();
            s.objects.push(box_object(0, cx, cy, 10.0, 10.0, 5.0, 0));
            let fully_inside = s.objects[0].footprint.iter().all(|v| s.bounds.contains(*v));
            match s.validate() {
                Ok(()) => prop_assert!(fully_inside),
                Err(SceneError::OutOfBounds(0)) => prop_assert!(!fully_inside),
                Err(e) => prop_assert!(false, "unexpected error {e:?}"),
            }
        }

        #[test]
        fn material_indices_always_below_space_len(idx in 0usize..20) {
            let mut s = empty_scene();
            s.objects.push(box_object(0, 0.0, 0.0, 10.0, 10.0, 5.0, idx));
            let ok = idx < s.material_space.len();
            prop_assert_eq!(s.validate().is_ok(), ok);
        }
    }
}
