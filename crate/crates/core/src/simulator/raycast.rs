use rayon::prelude::*;

use super::scene::{Primitive, Scene, Shape};
use crate::cloud::{LabeledCloud, PointCloud};
use crate::error::{PctError, Result};
use crate::projection::BeamModel;

/// Hits closer than this are treated as self-intersections and skipped.
const MIN_HIT: f64 = 1e-9;

pub const DEFAULT_SENSOR_HEIGHT: f64 = 1.8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorPose {
    pub position: [f64; 3],
    /// Heading about +z, radians.
    pub yaw: f64,
}

impl Default for SensorPose {
    fn default() -> Self {
        Self {
            position: [0.0, 0.0, DEFAULT_SENSOR_HEIGHT],
            yaw: 0.0,
        }
    }
}

impl SensorPose {
    pub fn new(position: [f64; 3], yaw: f64) -> Result<Self> {
        if !position.iter().all(|v| v.is_finite()) || !yaw.is_finite() {
            return Err(PctError::parameter("pose", "position and yaw must be finite"));
        }
        Ok(Self { position, yaw })
    }

    fn to_world(&self, d: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * d[0] - s * d[1], s * d[0] + c * d[1], d[2]]
    }
}

/// Parses a trajectory, one `x y z yaw` pose per line; `#` starts a comment.
pub fn parse_trajectory(text: &str) -> Result<Vec<SensorPose>> {
    let mut poses = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| PctError::Parse { line: idx + 1, message };
        let v = content
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| err(format!("`{s}` is not a number"))))
            .collect::<Result<Vec<_>>>()?;
        if v.len() != 4 {
            return Err(err(format!("expected `x y z yaw`, found {} fields", v.len())));
        }
        poses.push(SensorPose::new([v[0], v[1], v[2]], v[3]).map_err(|e| err(e.to_string()))?);
    }
    Ok(poses)
}

/// Closed-form intensity surrogate `ρ · max(0, cos θ) · exp(−r / λ_att)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityModel {
    pub attenuation_length: f64,
}

impl Default for IntensityModel {
    fn default() -> Self {
        Self {
            attenuation_length: 80.0,
        }
    }
}

impl IntensityModel {
    pub fn new(attenuation_length: f64) -> Result<Self> {
        if !(attenuation_length > 0.0) || !attenuation_length.is_finite() {
            return Err(PctError::parameter("attenuation_length", "must be positive"));
        }
        Ok(Self { attenuation_length })
    }
}

pub fn intensity_predict(model: &IntensityModel, reflectance: f64, incidence_cos: f64, range: f64) -> f64 {
    let v = reflectance * incidence_cos.max(0.0) * (-range.max(0.0) / model.attenuation_length).exp();
    v.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub range: f64,
    pub primitive: usize,
    pub class_id: u32,
    /// `|cos|` of the angle between the ray and the surface normal.
    pub incidence_cos: f64,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Smallest root above `MIN_HIT` of `a t² + b t + c`.
fn quadratic(a: f64, b: f64, c: f64) -> Option<f64> {
    if a == 0.0 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let (t0, t1) = ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a));
    [t0.min(t1), t0.max(t1)].into_iter().find(|&t| t > MIN_HIT)
}

/// Distance and unit normal of the first intersection with a primitive.
pub(crate) fn intersect(shape: &Shape, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
    match *shape {
        Shape::Plane { z } => {
            if d[2] == 0.0 {
                return None;
            }
            let t = (z - o[2]) / d[2];
            (t > MIN_HIT).then_some((t, [0.0, 0.0, 1.0]))
        }
        Shape::Box { center, size } => {
            let (mut t_near, mut t_far) = (f64::NEG_INFINITY, f64::INFINITY);
            let (mut near_axis, mut far_axis) = (0, 0);
            for a in 0..3 {
                let (lo, hi) = (center[a] - size[a] / 2.0, center[a] + size[a] / 2.0);
                if d[a] == 0.0 {
                    if o[a] < lo || o[a] > hi {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = ((lo - o[a]) / d[a], (hi - o[a]) / d[a]);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                if t0 > t_near {
                    t_near = t0;
                    near_axis = a;
                }
                if t1 < t_far {
                    t_far = t1;
                    far_axis = a;
                }
            }
            if t_near > t_far {
                return None;
            }
            let (t, axis) = if t_near > MIN_HIT {
                (t_near, near_axis)
            } else if t_far > MIN_HIT {
                (t_far, far_axis)
            } else {
                return None;
            };
            let mut n = [0.0; 3];
            n[axis] = 1.0;
            Some((t, n))
        }
        Shape::Sphere { center, radius } => {
            let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
            let t = quadratic(dot(d, d), 2.0 * dot(oc, d), dot(oc, oc) - radius * radius)?;
            let p = [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]];
            let n = [(p[0] - center[0]) / radius, (p[1] - center[1]) / radius, (p[2] - center[2]) / radius];
            Some((t, n))
        }
        Shape::Cylinder { base, radius, height } => {
            let (z0, z1) = (base[2], base[2] + height);
            let mut best: Option<(f64, [f64; 3])> = None;
            let mut consider = |t: f64, n: [f64; 3]| {
                if t > MIN_HIT && best.is_none_or(|b| t < b.0) {
                    best = Some((t, n));
                }
            };
            let (ox, oy) = (o[0] - base[0], o[1] - base[1]);
            let a = d[0] * d[0] + d[1] * d[1];
            if a > 0.0 {
                let b = 2.0 * (ox * d[0] + oy * d[1]);
                let c = ox * ox + oy * oy - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
                        let z = o[2] + t * d[2];
                        if (z0..=z1).contains(&z) {
                            let (px, py) = (ox + t * d[0], oy + t * d[1]);
                            consider(t, [px / radius, py / radius, 0.0]);
                        }
                    }
                }
            }
            if d[2] != 0.0 {
                for z in [z0, z1] {
                    let t = (z - o[2]) / d[2];
                    let (px, py) = (ox + t * d[0], oy + t * d[1]);
                    if px * px + py * py <= radius * radius {
                        consider(t, [0.0, 0.0, 1.0]);
                    }
                }
            }
            best
        }
    }
}

/// First primitive hit by the ray `origin + t · dir` with `t ≤ max_range`;
/// ties go to the earlier primitive. `dir` must be a unit vector.
pub fn cast_ray(scene: &Scene, origin: [f64; 3], dir: [f64; 3], max_range: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, p) in scene.primitives().iter().enumerate() {
        let Some((t, n)) = intersect(&p.shape, origin, dir) else { continue };
        if t <= max_range && best.is_none_or(|b| t < b.range) {
            best = Some(Hit {
                range: t,
                primitive: i,
                class_id: p.class_id,
                incidence_cos: dot(n, dir).abs().min(1.0),
            });
        }
    }
    best
}

/// One ray per pixel center; hits come out in row-major pixel order, in the
/// sensor frame, with labels and surrogate intensities.
pub fn raycast_scan(scene: &Scene, pose: &SensorPose, beam: &BeamModel) -> Result<LabeledCloud> {
    raycast_scan_with(scene, pose, beam, &IntensityModel::default())
}

pub fn raycast_scan_with(
    scene: &Scene,
    pose: &SensorPose,
    beam: &BeamModel,
    model: &IntensityModel,
) -> Result<LabeledCloud> {
    if scene.is_empty() {
        return Err(PctError::EmptyScene);
    }
    beam.validate()?;
    let hits: Vec<Option<([f64; 3], u32, f32)>> = (0..beam.rows * beam.cols)
        .into_par_iter()
        .map(|k| {
            let (row, col) = (k / beam.cols, k % beam.cols);
            let local = beam.ray_direction(row, col);
            let hit = cast_ray(scene, pose.position, pose.to_world(local), beam.max_range)?;
            let prim: &Primitive = &scene.primitives()[hit.primitive];
            let p = [local[0] * hit.range, local[1] * hit.range, local[2] * hit.range];
            let i = intensity_predict(model, prim.reflectance, hit.incidence_cos, hit.range);
            Some((p, hit.class_id, i as f32))
        })
        .collect();
    let mut points = Vec::new();
    let mut labels = Vec::new();
    let mut intensity = Vec::new();
    for (p, c, i) in hits.into_iter().flatten() {
        points.push(p);
        labels.push(c);
        intensity.push(i);
    }
    LabeledCloud::new(PointCloud::from_f64(&points, Some(intensity))?, labels)
}
