//! Point cloud value types and the on-disk scan, label, and PLY formats.
//!
//! Scans are stored as consecutive 16-byte records of four little-endian
//! `f32` values (x, y, z, intensity). Labels are consecutive little-endian
//! `u32` values whose lower 16 bits carry the semantic class; the upper
//! 16 bits (instance id) are discarded on read.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{PctError, Result};

pub const POINT_RECORD_BYTES: usize = 16;
pub const LABEL_RECORD_BYTES: usize = 4;

/// A set of 3D points in meters with optional per-point intensity in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<[f32; 3]>,
    intensity: Option<Vec<f32>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>, intensity: Option<Vec<f32>>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(PctError::Decode { index: i });
        }
        if let Some(values) = &intensity {
            if values.len() != points.len() {
                return Err(PctError::InvalidCloud(format!(
                    "intensity length {} does not match point count {}",
                    values.len(),
                    points.len()
                )));
            }
            if let Some(i) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
                return Err(PctError::InvalidCloud(format!(
                    "intensity {} at point {i} outside [0, 1]",
                    values[i]
                )));
            }
        }
        Ok(Self { points, intensity })
    }

    /// Builds a cloud without intensity. Panics on non-finite coordinates.
    pub fn from_points(points: Vec<[f32; 3]>) -> Self {
        Self::new(points, None).expect("finite coordinates")
    }

    /// Converts `f64` coordinates, rounding to the storage precision.
    pub fn from_f64(points: &[[f64; 3]], intensity: Option<Vec<f32>>) -> Result<Self> {
        let pts = points
            .iter()
            .map(|p| [p[0] as f32, p[1] as f32, p[2] as f32])
            .collect();
        Self::new(pts, intensity)
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f32; 3]] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f32]> {
        self.intensity.as_deref()
    }

    pub fn point(&self, i: usize) -> [f64; 3] {
        let p = self.points[i];
        [p[0] as f64, p[1] as f64, p[2] as f64]
    }

    pub fn to_f64(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Sub-cloud of the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            intensity: self
                .intensity
                .as_ref()
                .map(|v| indices.iter().map(|&i| v[i]).collect()),
        }
    }

    pub fn into_parts(self) -> (Vec<[f32; 3]>, Option<Vec<f32>>) {
        (self.points, self.intensity)
    }
}

/// A point cloud with one semantic class id per point.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledCloud {
    pub cloud: PointCloud,
    labels: Vec<u32>,
}

impl LabeledCloud {
    pub fn new(cloud: PointCloud, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != cloud.len() {
            return Err(PctError::CountMismatch {
                expected: cloud.len(),
                found: labels.len(),
            });
        }
        Ok(Self { cloud, labels })
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            cloud: self.cloud.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Checks every label is either mapped or the ignore id.
    pub fn validate(&self, map: &SemanticClassMap) -> Result<()> {
        match self.labels.iter().position(|&l| !map.contains(l)) {
            Some(i) => Err(PctError::InvalidCloud(format!(
                "label {} at point {i} is not in the class map",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    pub color: [u8; 3],
}

/// Ordered class table with a designated ignore id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticClassMap {
    entries: Vec<ClassEntry>,
    ignore_id: u32,
}

impl SemanticClassMap {
    pub fn new(entries: Vec<ClassEntry>, ignore_id: u32) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for e in &entries {
            if !seen.insert(e.id) {
                return Err(PctError::Format(format!("duplicate class id {}", e.id)));
            }
        }
        if !seen.contains(&ignore_id) {
            return Err(PctError::Format(format!(
                "ignore id {ignore_id} missing from class map"
            )));
        }
        Ok(Self { entries, ignore_id })
    }

    /// Parses `id name r g b` lines; `#` starts a comment. Ignore id is 0.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let err = |message: String| PctError::Parse {
                line: n + 1,
                message,
            };
            if fields.len() != 5 {
                return Err(err(format!(
                    "expected `id name r g b`, found {} fields",
                    fields.len()
                )));
            }
            let id = fields[0]
                .parse::<u32>()
                .map_err(|_| err(format!("bad class id `{}`", fields[0])))?;
            let mut color = [0u8; 3];
            for (c, f) in color.iter_mut().zip(&fields[2..]) {
                *c = f
                    .parse::<u8>()
                    .map_err(|_| err(format!("bad color component `{f}`")))?;
            }
            entries.push(ClassEntry {
                id,
                name: fields[1].to_string(),
                color,
            });
        }
        Self::new(entries, 0)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let [r, g, b] = e.color;
            let _ = writeln!(out, "{} {} {r} {g} {b}", e.id, e.name);
        }
        out
    }

    pub fn entries(&self) -> &[ClassEntry] {
        &self.entries
    }

    pub fn ignore_id(&self) -> u32 {
        self.ignore_id
    }

    pub fn contains(&self, id: u32) -> bool {
        self.entries.iter().any(|e| e.id == id)
    }

    pub fn get(&self, id: u32) -> Option<&ClassEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.id)
    }

    /// Largest class id, used to size confusion matrices.
    pub fn max_id(&self) -> u32 {
        self.entries.iter().map(|e| e.id).max().unwrap_or(0)
    }

    pub fn color(&self, id: u32) -> [u8; 3] {
        self.get(id)
            .or_else(|| self.get(self.ignore_id))
            .map(|e| e.color)
            .unwrap_or([0, 0, 0])
    }
}

impl Default for SemanticClassMap {
    /// Small outdoor taxonomy used by the bundled toy scenes.
    fn default() -> Self {
        let table: [(u32, &str, [u8; 3]); 8] = [
            (0, "unlabeled", [0, 0, 0]),
            (1, "ground", [255, 0, 255]),
            (2, "building", [0, 200, 255]),
            (3, "car", [100, 150, 245]),
            (4, "pole", [150, 240, 255]),
            (5, "vegetation", [0, 175, 0]),
            (6, "person", [255, 30, 30]),
            (7, "trunk", [135, 60, 0]),
        ];
        let entries = table
            .iter()
            .map(|&(id, name, color)| ClassEntry {
                id,
                name: name.to_string(),
                color,
            })
            .collect();
        Self::new(entries, 0).expect("static class table is valid")
    }
}

pub fn read_point_bin(bytes: &[u8]) -> Result<PointCloud> {
    if !bytes.len().is_multiple_of(POINT_RECORD_BYTES) {
        return Err(PctError::MalformedRecord {
            len: bytes.len(),
            record: POINT_RECORD_BYTES,
        });
    }
    let n = bytes.len() / POINT_RECORD_BYTES;
    let mut points = Vec::with_capacity(n);
    let mut intensity = Vec::with_capacity(n);
    for (i, rec) in bytes.chunks_exact(POINT_RECORD_BYTES).enumerate() {
        let f = |k: usize| f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
        let p = [f(0), f(1), f(2)];
        if p.iter().any(|c| !c.is_finite()) {
            return Err(PctError::Decode { index: i });
        }
        points.push(p);
        intensity.push(f(3));
    }
    // Raw scans in the wild carry intensities outside [0, 1]; keep them as read
    // so the round trip stays bit-exact.
    Ok(PointCloud {
        points,
        intensity: Some(intensity),
    })
}

pub fn write_point_bin(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(cloud.len() * POINT_RECORD_BYTES);
    for (i, p) in cloud.points.iter().enumerate() {
        let inten = cloud.intensity.as_ref().map_or(0.0, |v| v[i]);
        for v in [p[0], p[1], p[2], inten] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_labels(bytes: &[u8], map: &SemanticClassMap, expected_count: usize) -> Result<Vec<u32>> {
    if !bytes.len().is_multiple_of(LABEL_RECORD_BYTES) {
        return Err(PctError::MalformedRecord {
            len: bytes.len(),
            record: LABEL_RECORD_BYTES,
        });
    }
    let found = bytes.len() / LABEL_RECORD_BYTES;
    if found != expected_count {
        return Err(PctError::CountMismatch {
            expected: expected_count,
            found,
        });
    }
    Ok(bytes
        .chunks_exact(LABEL_RECORD_BYTES)
        .map(|rec| {
            let semantic = u32::from_le_bytes(rec.try_into().unwrap()) & 0xFFFF;
            if map.contains(semantic) {
                semantic
            } else {
                map.ignore_id()
            }
        })
        .collect())
}

pub fn write_labels(labels: &[u32]) -> Vec<u8> {
    labels.iter().flat_map(|l| l.to_le_bytes()).collect()
}

/// ASCII PLY with per-vertex position and class color.
pub fn export_ply(cloud: &LabeledCloud, map: &SemanticClassMap) -> String {
    let mut out = String::with_capacity(128 + cloud.len() * 40);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    for prop in ["float x", "float y", "float z", "uchar red", "uchar green", "uchar blue"] {
        let _ = writeln!(out, "property {prop}");
    }
    out.push_str("end_header\n");
    for (p, &l) in cloud.cloud.points().iter().zip(cloud.labels()) {
        let [r, g, b] = map.color(l);
        let _ = writeln!(out, "{} {} {} {r} {g} {b}", p[0], p[1], p[2]);
    }
    out
}
