//! Oriented boxes on the ground plane, their 9-keypoint form, exact 3D
//! overlap, and rigid transforms between the world frame and a track frame
//! centered on a reference box.

use thiserror::Error;

/// Flattened keypoint dimensionality: 9 points × (x, y, z).
pub const KEYPOINT_DIM: usize = 27;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("box size must be strictly positive, got ({0}, {1}, {2})")]
    NonPositiveSize(f64, f64, f64),
    #[error("history needs at least 2 boxes, got {0}")]
    InsufficientHistory(usize),
}

/// Wraps an angle into the half-open interval (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let r = a.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r - two_pi
    } else {
        r
    }
}

/// A 3D box with yaw-only orientation (ground-plane assumption): no roll
/// or pitch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox3D {
    /// Center (x, y, z) in meters.
    pub center: [f64; 3],
    /// Full extents (l, w, h) in meters, along the box's local x, y, z.
    pub size: [f64; 3],
    /// Rotation about +z, radians in (−π, π].
    pub yaw: f64,
}

impl OrientedBox3D {
    pub fn new(center: [f64; 3], size: [f64; 3], yaw: f64) -> Result<Self, GeometryError> {
        if size.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(GeometryError::NonPositiveSize(size[0], size[1], size[2]));
        }
        Ok(OrientedBox3D { center, size, yaw: wrap_angle(yaw) })
    }

    pub fn volume(&self) -> f64 {
        self.size[0] * self.size[1] * self.size[2]
    }

    /// The 8 corners in the canonical sign order over local (x, y, z):
    /// (+++), (++−), (+−+), (+−−), (−++), (−+−), (−−+), (−−−).
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let [hx, hy, hz] = [self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0];
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            let sx = if i & 4 == 0 { 1.0 } else { -1.0 };
            let sy = if i & 2 == 0 { 1.0 } else { -1.0 };
            let sz = if i & 1 == 0 { 1.0 } else { -1.0 };
            let (lx, ly, lz) = (sx * hx, sy * hy, sz * hz);
            *corner = [
                self.center[0] + c * lx - s * ly,
                self.center[1] + s * lx + c * ly,
                self.center[2] + lz,
            ];
        }
        out
    }

    /// Footprint corners in the xy plane, counter-clockwise.
    pub fn bev_corners(&self) -> [[f64; 2]; 4] {
        let (c, s) = (self.yaw.cos(), self.yaw.sin());
        let (hx, hy) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let local = [[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]];
        local.map(|[lx, ly]| [self.center[0] + c * lx - s * ly, self.center[1] + s * lx + c * ly])
    }

    pub fn keypoints(&self) -> KeypointVector {
        let mut flat = [0.0; KEYPOINT_DIM];
        flat[..3].copy_from_slice(&self.center);
        for (i, corner) in self.corners().iter().enumerate() {
            flat[3 + 3 * i..6 + 3 * i].copy_from_slice(corner);
        }
        KeypointVector(flat)
    }

    /// Whether a world-frame point lies inside the box (boundary inclusive).
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let local = rotate_z(-self.yaw, sub3(p, self.center));
        local[0].abs() <= self.size[0] / 2.0 + 1e-12
            && local[1].abs() <= self.size[1] / 2.0 + 1e-12
            && local[2].abs() <= self.size[2] / 2.0 + 1e-12
    }
}

/// Center plus the 8 canonical corners, flattened point-major to ℝ^27.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeypointVector(pub [f64; KEYPOINT_DIM]);

impl KeypointVector {
    pub fn point(&self, i: usize) -> [f64; 3] {
        [self.0[3 * i], self.0[3 * i + 1], self.0[3 * i + 2]]
    }

    pub fn as_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&v| v as f32).collect()
    }
}

/// Adjacent-frame keypoint differences over a box history, each entry the
/// older frame minus the newer one.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointOffsetSequence {
    pub offsets: Vec<[f64; KEYPOINT_DIM]>,
}

/// Offsets over a history ordered oldest → newest; entry `j` is
/// `keypoints(boxes[j]) − keypoints(boxes[j+1])`.
pub fn offsets_of_history(boxes: &[OrientedBox3D]) -> Result<KeypointOffsetSequence, GeometryError> {
    if boxes.len() < 2 {
        return Err(GeometryError::InsufficientHistory(boxes.len()));
    }
    let kps: Vec<KeypointVector> = boxes.iter().map(|b| b.keypoints()).collect();
    let offsets = kps
        .windows(2)
        .map(|w| {
            let mut d = [0.0; KEYPOINT_DIM];
            for i in 0..KEYPOINT_DIM {
                d[i] = w[0].0[i] - w[1].0[i];
            }
            d
        })
        .collect();
    Ok(KeypointOffsetSequence { offsets })
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn rotate_z(yaw: f64, p: [f64; 3]) -> [f64; 3] {
    let (c, s) = (yaw.cos(), yaw.sin());
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Expresses a world point in the frame of `reference` (reference center at
/// the origin, reference yaw rotated away).
pub fn world_to_track_point(p: [f64; 3], reference: &OrientedBox3D) -> [f64; 3] {
    rotate_z(-reference.yaw, sub3(p, reference.center))
}

pub fn track_to_world_point(p: [f64; 3], reference: &OrientedBox3D) -> [f64; 3] {
    let r = rotate_z(reference.yaw, p);
    [r[0] + reference.center[0], r[1] + reference.center[1], r[2] + reference.center[2]]
}

pub fn world_to_track_box(b: &OrientedBox3D, reference: &OrientedBox3D) -> OrientedBox3D {
    OrientedBox3D {
        center: world_to_track_point(b.center, reference),
        size: b.size,
        yaw: wrap_angle(b.yaw - reference.yaw),
    }
}

pub fn track_to_world_box(b: &OrientedBox3D, reference: &OrientedBox3D) -> OrientedBox3D {
    OrientedBox3D {
        center: track_to_world_point(b.center, reference),
        size: b.size,
        yaw: wrap_angle(b.yaw + reference.yaw),
    }
}

// ── Exact 3D overlap ────────────────────────────────────────────────────

fn cross2(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn line_intersection(p1: [f64; 2], p2: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let d = [b[0] - a[0], b[1] - a[1]];
    let e = [p2[0] - p1[0], p2[1] - p1[1]];
    let denom = d[0] * e[1] - d[1] * e[0];
    let t = (d[0] * (a[1] - p1[1]) - d[1] * (a[0] - p1[0])) / denom;
    [p1[0] + t * e[0], p1[1] + t * e[1]]
}

/// Clips `subject` against one directed edge (a → b) of a counter-clockwise
/// convex window, keeping the left half-plane.
fn clip_against_edge(subject: &[[f64; 2]], a: [f64; 2], b: [f64; 2]) -> Vec<[f64; 2]> {
    const EPS: f64 = 1e-12;
    let mut out = Vec::with_capacity(subject.len() + 1);
    for i in 0..subject.len() {
        let cur = subject[i];
        let prev = subject[(i + subject.len() - 1) % subject.len()];
        let cur_in = cross2(a, b, cur) >= -EPS;
        let prev_in = cross2(a, b, prev) >= -EPS;
        if cur_in {
            if !prev_in {
                out.push(line_intersection(prev, cur, a, b));
            }
            out.push(cur);
        } else if prev_in {
            out.push(line_intersection(prev, cur, a, b));
        }
    }
    out
}

fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let j = (i + 1) % poly.len();
        acc += poly[i][0] * poly[j][1] - poly[j][0] * poly[i][1];
    }
    acc.abs() / 2.0
}

/// Exact intersection-over-union of two boxes: polygon-clipped footprint
/// overlap times vertical overlap, over the union of volumes.
pub fn iou3d(a: &OrientedBox3D, b: &OrientedBox3D) -> f64 {
    let mut poly: Vec<[f64; 2]> = a.bev_corners().to_vec();
    let window = b.bev_corners();
    for i in 0..4 {
        if poly.is_empty() {
            break;
        }
        poly = clip_against_edge(&poly, window[i], window[(i + 1) % 4]);
    }
    let bev_inter = polygon_area(&poly);
    let z_lo = (a.center[2] - a.size[2] / 2.0).max(b.center[2] - b.size[2] / 2.0);
    let z_hi = (a.center[2] + a.size[2] / 2.0).min(b.center[2] + b.size[2] / 2.0);
    let inter = bev_inter * (z_hi - z_lo).max(0.0);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Sampling-based overlap estimate (points drawn uniformly inside `a`,
/// tested against `b`). Slow; used to cross-check [`iou3d`].
pub fn monte_carlo_iou(a: &OrientedBox3D, b: &OrientedBox3D, samples: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let local = [
            rng.gen_range(-0.5..0.5) * a.size[0],
            rng.gen_range(-0.5..0.5) * a.size[1],
            rng.gen_range(-0.5..0.5) * a.size[2],
        ];
        let world = track_to_world_point(rotate_z(0.0, local), a);
        let world = [world[0], world[1], world[2] + 0.0];
        if b.contains(world) {
            hits += 1;
        }
    }
    let inter = a.volume() * hits as f64 / samples as f64;
    let union = a.volume() + b.volume() - inter;
    inter / union
}
