//! Small 3D/2D geometry kernel shared by the scene model and the ray tracer.
//!
//! Everything here is plain `f64` value types: points, axis-aligned rectangles,
//! simple polygons, and the planar faces the image method reflects against.

use serde::{Deserialize, Serialize};

/// Tolerance (meters) for point-on-face and occlusion tie-breaking.
pub const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm2(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm2().sqrt()
    }

    pub fn normalized(self) -> Vec3 {
        let n = self.norm();
        Vec3::new(self.x / n, self.y / n, self.z / n)
    }

    pub fn dist(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn xy(self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

impl std::ops::Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl std::ops::Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl std::ops::Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl std::ops::Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// 2D cross product (z-component of the 3D cross).
    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist(self, o: Vec2) -> f64 {
        Vec2::new(self.x - o.x, self.y - o.y).norm()
    }
}

impl std::ops::Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl std::ops::Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl std::ops::Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

/// Axis-aligned rectangle in the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn new(min: Vec2, max: Vec2) -> Self {
        Rect { min, max }
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn depth(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn diameter(&self) -> f64 {
        self.min.dist(self.max)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x - GEOM_EPS
            && p.x <= self.max.x + GEOM_EPS
            && p.y >= self.min.y - GEOM_EPS
            && p.y <= self.max.y + GEOM_EPS
    }

    /// Clamps a point into the rectangle.
    pub fn clamp(&self, p: Vec2) -> Vec2 {
        Vec2::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
        )
    }
}

/// Twice the signed area of a polygon; positive for counter-clockwise winding.
pub fn polygon_signed_area2(verts: &[Vec2]) -> f64 {
    let n = verts.len();
    let mut acc = 0.0;
    for i in 0..n {
        let a = verts[i];
        let b = verts[(i + 1) % n];
        acc += a.cross(b);
    }
    acc
}

/// True when no two non-adjacent edges intersect and no vertices coincide.
pub fn polygon_is_simple(verts: &[Vec2]) -> bool {
    let n = verts.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && verts[i].dist(verts[j]) < GEOM_EPS {
                return false;
            }
        }
    }
    for i in 0..n {
        let (a1, a2) = (verts[i], verts[(i + 1) % n]);
        for j in (i + 1)..n {
            // Skip adjacent edges (they share a vertex).
            if j == i || (j + 1) % n == i || (i + 1) % n == j {
                continue;
            }
            let (b1, b2) = (verts[j], verts[(j + 1) % n]);
            if segments_intersect_2d(a1, a2, b1, b2) {
                return false;
            }
        }
    }
    true
}

fn segments_intersect_2d(a1: Vec2, a2: Vec2, b1: Vec2, b2: Vec2) -> bool {
    let d1 = (b2 - b1).cross(a1 - b1);
    let d2 = (b2 - b1).cross(a2 - b1);
    let d3 = (a2 - a1).cross(b1 - a1);
    let d4 = (a2 - a1).cross(b2 - a1);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Even-odd point-in-polygon test in the plane.
pub fn point_in_polygon(p: Vec2, verts: &[Vec2]) -> bool {
    let n = verts.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (vi, vj) = (verts[i], verts[j]);
        if ((vi.y > p.y) != (vj.y > p.y))
            && (p.x < (vj.x - vi.x) * (p.y - vi.y) / (vj.y - vi.y) + vi.x)
        {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Who owns a reflecting face: a scene object's wall or the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FaceOwner {
    Object { id: u32, edge: usize },
    Ground,
}

/// A planar rectangular face: base corner plus two orthonormal in-plane axes.
///
/// Walls use the footprint edge as the `u` axis and vertical `z` as `v`;
/// the ground face uses the world `x`/`y` axes over the scene bounds.
#[derive(Debug, Clone)]
pub struct Face {
    pub owner: FaceOwner,
    pub origin: Vec3,
    pub u_dir: Vec3,
    pub v_dir: Vec3,
    pub u_len: f64,
    pub v_len: f64,
    pub normal: Vec3,
}

impl Face {
    pub fn wall(owner: FaceOwner, a: Vec2, b: Vec2, height: f64) -> Face {
        let edge = b - a;
        let len = edge.norm();
        let u_dir = Vec3::new(edge.x / len, edge.y / len, 0.0);
        // Outward normal of a CCW footprint edge points to the right of travel.
        let normal = Vec3::new(edge.y / len, -edge.x / len, 0.0);
        Face {
            owner,
            origin: Vec3::new(a.x, a.y, 0.0),
            u_dir,
            v_dir: Vec3::new(0.0, 0.0, 1.0),
            u_len: len,
            v_len: height,
            normal,
        }
    }

    pub fn ground(bounds: &Rect) -> Face {
        Face {
            owner: FaceOwner::Ground,
            origin: Vec3::new(bounds.min.x, bounds.min.y, 0.0),
            u_dir: Vec3::new(1.0, 0.0, 0.0),
            v_dir: Vec3::new(0.0, 1.0, 0.0),
            u_len: bounds.width(),
            v_len: bounds.depth(),
            normal: Vec3::new(0.0, 0.0, 1.0),
        }
    }

    /// Signed distance of a point from the face plane along the outward normal.
    pub fn signed_dist(&self, p: Vec3) -> f64 {
        self.normal.dot(p - self.origin)
    }

    /// Mirrors a point across the face plane.
    pub fn mirror(&self, p: Vec3) -> Vec3 {
        p - self.normal * (2.0 * self.signed_dist(p))
    }

    /// Intersects segment `p`..`q` with the face plane; returns the point and
    /// the segment parameter when the plane is crossed within the segment.
    pub fn intersect_segment_plane(&self, p: Vec3, q: Vec3) -> Option<(Vec3, f64)> {
        let denom = self.normal.dot(q - p);
        if denom.abs() < 1e-15 {
            return None;
        }
        let t = -self.signed_dist(p) / denom;
        if !(-1e-12..=1.0 + 1e-12).contains(&t) {
            return None;
        }
        Some((p + (q - p) * t, t))
    }

    /// True when `p` lies on the face rectangle within `GEOM_EPS`, including
    /// points within the tolerance of an edge.
    pub fn contains_point(&self, p: Vec3) -> bool {
        let rel = p - self.origin;
        if rel.dot(self.normal).abs() > 1e-6 {
            return false;
        }
        let u = rel.dot(self.u_dir);
        let v = rel.dot(self.v_dir);
        u >= -GEOM_EPS && u <= self.u_len + GEOM_EPS && v >= -GEOM_EPS && v <= self.v_len + GEOM_EPS
    }
}

/// Axis-aligned box used for attenuating clutter in synthetic worlds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub min: Vec3,
    pub max: Vec3,
}

impl Box3 {
    pub fn contains(&self, p: Vec3) -> bool {
        p.x >= self.min.x
            && p.x <= self.max.x
            && p.y >= self.min.y
            && p.y <= self.max.y
            && p.z >= self.min.z
            && p.z <= self.max.z
    }

    /// Slab test: does the open segment `p`..`q` pass through the box interior?
    pub fn segment_intersects(&self, p: Vec3, q: Vec3) -> bool {
        let d = q - p;
        let mut tmin = 0.0f64;
        let mut tmax = 1.0f64;
        for (p0, d0, lo, hi) in [
            (p.x, d.x, self.min.x, self.max.x),
            (p.y, d.y, self.min.y, self.max.y),
            (p.z, d.z, self.min.z, self.max.z),
        ] {
            if d0.abs() < 1e-15 {
                if p0 < lo || p0 > hi {
                    return false;
                }
            } else {
                let mut t1 = (lo - p0) / d0;
                let mut t2 = (hi - p0) / d0;
                if t1 > t2 {
                    std::mem::swap(&mut t1, &mut t2);
                }
                tmin = tmin.max(t1);
                tmax = tmax.min(t2);
                if tmin > tmax {
                    return false;
                }
            }
        }
        // Require a real interior crossing, not an endpoint graze.
        tmax - tmin > 1e-12 && tmax > 1e-9 && tmin < 1.0 - 1e-9
    }
}
