//! Spherical projection between 3D clouds and range images.
//!
//! A point at range `r`, yaw `atan2(y, x)` and pitch `asin(z / r)` maps to
//!
//! ```text
//! col = floor(0.5 * (1 - yaw / pi) * W)                       clamped to [0, W-1]
//! row = floor((1 - (pitch - fov_down) / (fov_up - fov_down)) * H)
//! ```
//!
//! Rows outside `[0, H-1]`, ranges beyond `max_range`, and points at the
//! sensor origin are dropped and counted. When several points share a pixel
//! the nearest wins, then the lowest index.

use std::f64::consts::PI;
use std::fmt::Write as _;

use crate::cloud::PointCloud;
use crate::error::{PctError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamModel {
    pub rows: usize,
    pub cols: usize,
    /// Upper edge of the vertical field of view, radians.
    pub fov_up: f64,
    /// Lower edge of the vertical field of view, radians.
    pub fov_down: f64,
    pub max_range: f64,
}

impl Default for BeamModel {
    fn default() -> Self {
        Self {
            rows: 64,
            cols: 1024,
            fov_up: 3f64.to_radians(),
            fov_down: (-25f64).to_radians(),
            max_range: 120.0,
        }
    }
}

impl BeamModel {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 {
            return Err(PctError::parameter("beam.rows", "must be at least 1"));
        }
        if self.cols == 0 {
            return Err(PctError::parameter("beam.cols", "must be at least 1"));
        }
        if !(self.fov_up > self.fov_down) || !self.fov_up.is_finite() || !self.fov_down.is_finite() {
            return Err(PctError::parameter("beam.fov_up", "must exceed beam.fov_down"));
        }
        if !(self.max_range > 0.0) || !self.max_range.is_finite() {
            return Err(PctError::parameter("beam.max_range", "must be positive"));
        }
        Ok(())
    }

    fn fov(&self) -> f64 {
        self.fov_up - self.fov_down
    }

    pub fn pixel_yaw(&self, col: usize) -> f64 {
        PI * (1.0 - 2.0 * (col as f64 + 0.5) / self.cols as f64)
    }

    pub fn pixel_pitch(&self, row: usize) -> f64 {
        self.fov_down + (1.0 - (row as f64 + 0.5) / self.rows as f64) * self.fov()
    }

    /// Unit ray through the center of pixel `(row, col)`, sensor frame.
    pub fn ray_direction(&self, row: usize, col: usize) -> [f64; 3] {
        let (yaw, pitch) = (self.pixel_yaw(col), self.pixel_pitch(row));
        [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), pitch.sin()]
    }

    /// Pixel and range for a point, or `None` when it falls outside the
    /// field of view, beyond `max_range`, or at the origin.
    pub fn pixel_of(&self, p: [f64; 3]) -> Option<(usize, usize, f64)> {
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if r == 0.0 || r > self.max_range {
            return None;
        }
        let yaw = p[1].atan2(p[0]);
        let pitch = (p[2] / r).clamp(-1.0, 1.0).asin();
        let col = (0.5 * (1.0 - yaw / PI) * self.cols as f64).floor();
        let col = col.clamp(0.0, (self.cols - 1) as f64) as usize;
        let row = ((1.0 - (pitch - self.fov_down) / self.fov()) * self.rows as f64).floor();
        if row < 0.0 || row >= self.rows as f64 {
            return None;
        }
        Some((row as usize, col, r))
    }
}

/// H×W depth grid; depth 0 marks an empty pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    rows: usize,
    cols: usize,
    depth: Vec<f32>,
    occupancy: Vec<bool>,
    index_map: Vec<Option<u32>>,
    pub out_of_fov_count: usize,
}

impl RangeImage {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            depth: vec![0.0; rows * cols],
            occupancy: vec![false; rows * cols],
            index_map: vec![None; rows * cols],
            out_of_fov_count: 0,
        }
    }

    /// Builds an image from a row-major depth grid without source indices.
    pub fn from_depth(rows: usize, cols: usize, depth: Vec<f32>) -> Result<Self> {
        if depth.len() != rows * cols {
            return Err(PctError::shape(
                "range image",
                format!("{} depth values for a {rows}x{cols} grid", depth.len()),
            ));
        }
        if depth.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(PctError::Format("depth values must be finite and non-negative".into()));
        }
        let occupancy = depth.iter().map(|&d| d > 0.0).collect();
        Ok(Self {
            rows,
            cols,
            depth,
            occupancy,
            index_map: vec![None; rows * cols],
            out_of_fov_count: 0,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn depth(&self) -> &[f32] {
        &self.depth
    }

    pub fn occupancy(&self) -> &[bool] {
        &self.occupancy
    }

    pub fn index_map(&self) -> &[Option<u32>] {
        &self.index_map
    }

    pub fn depth_at(&self, row: usize, col: usize) -> f32 {
        self.depth[row * self.cols + col]
    }

    pub fn is_occupied(&self, row: usize, col: usize) -> bool {
        self.occupancy[row * self.cols + col]
    }

    /// Sets a pixel; a non-positive depth empties it.
    pub fn set(&mut self, row: usize, col: usize, depth: f32, index: Option<u32>) {
        let k = row * self.cols + col;
        if depth > 0.0 {
            self.depth[k] = depth;
            self.occupancy[k] = true;
            self.index_map[k] = index;
        } else {
            self.clear(row, col);
        }
    }

    pub fn clear(&mut self, row: usize, col: usize) {
        let k = row * self.cols + col;
        self.depth[k] = 0.0;
        self.occupancy[k] = false;
        self.index_map[k] = None;
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn occupied_fraction(&self) -> f64 {
        self.occupied_count() as f64 / (self.rows * self.cols) as f64
    }

    /// Fraction of occupied pixels in each row.
    pub fn row_profile(&self) -> Vec<f64> {
        self.occupancy
            .chunks(self.cols)
            .map(|row| row.iter().filter(|&&o| o).count() as f64 / self.cols as f64)
            .collect()
    }
}

pub fn project(cloud: &PointCloud, beam: &BeamModel) -> Result<RangeImage> {
    if cloud.is_empty() {
        return Err(PctError::EmptyInput("cannot project an empty cloud"));
    }
    beam.validate()?;
    let mut img = RangeImage::empty(beam.rows, beam.cols);
    let mut best = vec![f64::INFINITY; beam.rows * beam.cols];
    for i in 0..cloud.len() {
        let Some((row, col, r)) = beam.pixel_of(cloud.point(i)) else {
            img.out_of_fov_count += 1;
            continue;
        };
        let k = row * beam.cols + col;
        // Strict comparison keeps the earlier (lower) index on equal range.
        if r < best[k] {
            best[k] = r;
            img.set(row, col, r as f32, Some(i as u32));
        }
    }
    Ok(img)
}

pub fn backproject(image: &RangeImage, beam: &BeamModel) -> Result<PointCloud> {
    let mut pts = Vec::with_capacity(image.occupied_count());
    for row in 0..image.rows {
        for col in 0..image.cols {
            if !image.is_occupied(row, col) {
                continue;
            }
            let d = image.depth_at(row, col) as f64;
            let dir = beam.ray_direction(row, col);
            pts.push([d * dir[0], d * dir[1], d * dir[2]]);
        }
    }
    PointCloud::from_f64(&pts, None)
}

/// Serializes an image as a text header followed by row-major `f32` LE depths.
pub fn write_range_image(image: &RangeImage, beam: &BeamModel) -> Vec<u8> {
    let mut header = String::new();
    let _ = writeln!(header, "PCTRANGE 1");
    let _ = writeln!(header, "rows {}", image.rows);
    let _ = writeln!(header, "cols {}", image.cols);
    let _ = writeln!(header, "fov_up {:?}", beam.fov_up);
    let _ = writeln!(header, "fov_down {:?}", beam.fov_down);
    let _ = writeln!(header, "max_range {:?}", beam.max_range);
    let _ = writeln!(header, "out_of_fov {}", image.out_of_fov_count);
    let _ = writeln!(header, "end");
    let mut out = header.into_bytes();
    for d in &image.depth {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out
}

pub fn read_range_image(bytes: &[u8]) -> Result<(RangeImage, BeamModel)> {
    let bad = |m: &str| PctError::Format(format!("range image: {m}"));
    let mut pos = 0;
    let mut fields = std::collections::HashMap::new();
    let mut first = true;
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("unterminated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("header is not UTF-8"))?;
        pos += nl + 1;
        if first {
            if line != "PCTRANGE 1" {
                return Err(bad("missing PCTRANGE magic"));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let (k, v) = line.split_once(' ').ok_or_else(|| bad("malformed header line"))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| fields.get(k).ok_or_else(|| bad(&format!("missing `{k}`")));
    let usize_of = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(&format!("bad `{k}`")));
    let f64_of = |k: &str| get(k)?.parse::<f64>().map_err(|_| bad(&format!("bad `{k}`")));
    let beam = BeamModel {
        rows: usize_of("rows")?,
        cols: usize_of("cols")?,
        fov_up: f64_of("fov_up")?,
        fov_down: f64_of("fov_down")?,
        max_range: f64_of("max_range")?,
    };
    beam.validate()?;
    let body = &bytes[pos..];
    if body.len() != beam.rows * beam.cols * 4 {
        return Err(bad("depth grid size does not match header"));
    }
    let depth = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut img = RangeImage::from_depth(beam.rows, beam.cols, depth)?;
    img.out_of_fov_count = usize_of("out_of_fov")?;
    Ok((img, beam))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn forward_axis_lands_in_row_6_col_512() {
        let img = project(&PointCloud::from_points(vec![[10.0, 0.0, 0.0]]), &BeamModel::default()).unwrap();
        assert_eq!(img.depth_at(6, 512), 10.0);
        assert_eq!(img.index_map()[6 * 1024 + 512], Some(0));
        assert_eq!(img.occupied_count(), 1);
    }

    #[test]
    fn nearer_point_wins() {
        let c = PointCloud::from_points(vec![[10.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let img = project(&c, &BeamModel::default()).unwrap();
        assert_eq!(img.depth_at(6, 512), 5.0);
        assert_eq!(img.index_map()[6 * 1024 + 512], Some(1));
    }

    #[test]
    fn equal_range_tie_keeps_lower_index() {
        let c = PointCloud::from_points(vec![[5.0, 0.0, 0.0], [5.0, 0.0, 0.0]]);
        let img = project(&c, &BeamModel::default()).unwrap();
        assert_eq!(img.index_map()[6 * 1024 + 512], Some(0));
    }

    #[test]
    fn zenith_point_is_out_of_fov() {
        let img = project(&PointCloud::from_points(vec![[0.0, 0.0, 10.0]]), &BeamModel::default()).unwrap();
        assert_eq!(img.out_of_fov_count, 1);
        assert_eq!(img.occupied_count(), 0);
    }

    #[test]
    fn beyond_max_range_is_counted() {
        let img = project(&PointCloud::from_points(vec![[200.0, 0.0, 0.0]]), &BeamModel::default()).unwrap();
        assert_eq!(img.out_of_fov_count, 1);
    }

    #[test]
    fn empty_cloud_errors() {
        assert!(matches!(
            project(&PointCloud::empty(), &BeamModel::default()),
            Err(PctError::EmptyInput(_))
        ));
    }

    #[test]
    fn backproject_empty_and_single() {
        let beam = BeamModel::default();
        assert!(backproject(&RangeImage::empty(64, 1024), &beam).unwrap().is_empty());
        let mut img = RangeImage::empty(64, 1024);
        img.set(20, 300, 7.5, None);
        let c = backproject(&img, &beam).unwrap();
        assert_eq!(c.len(), 1);
        let p = c.point(0);
        let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        assert!((r - 7.5).abs() < 1e-5);
    }

    #[test]
    fn serialization_round_trip() {
        let beam = BeamModel { rows: 4, cols: 8, ..BeamModel::default() };
        let mut img = RangeImage::empty(4, 8);
        img.set(1, 2, 3.25, None);
        img.set(3, 7, 100.0, None);
        img.out_of_fov_count = 5;
        let (back, beam_back) = read_range_image(&write_range_image(&img, &beam)).unwrap();
        assert_eq!(beam_back, beam);
        assert_eq!(back, img);
        assert!(read_range_image(b"garbage\n").is_err());
    }

    proptest! {
        #[test]
        fn conservation_of_points(pts in prop::collection::vec(prop::array::uniform3(-60.0f32..60.0), 1..200)) {
            let beam = BeamModel { rows: 16, cols: 64, ..BeamModel::default() };
            let cloud = PointCloud::from_points(pts);
            let img = project(&cloud, &beam).unwrap();
            let projected = img.occupied_count();
            let in_fov = cloud.len() - img.out_of_fov_count;
            // every in-FOV point either owns a pixel or lost a collision
            let lost = (0..cloud.len())
                .filter(|&i| beam.pixel_of(cloud.point(i)).is_some())
                .filter(|&i| !img.index_map().contains(&Some(i as u32)))
                .count();
            prop_assert_eq!(projected + img.out_of_fov_count + lost, cloud.len());
            prop_assert!(projected <= in_fov);
            for (k, d) in img.depth().iter().enumerate() {
                prop_assert_eq!(*d > 0.0, img.occupancy()[k]);
                prop_assert_eq!(img.index_map()[k].is_some(), img.occupancy()[k]);
                prop_assert!(*d as f64 <= beam.max_range);
            }
        }

        #[test]
        fn reconstruction_stays_within_pixel_extent(pts in prop::collection::vec(prop::array::uniform3(-40.0f32..40.0), 1..100)) {
            let beam = BeamModel { rows: 32, cols: 128, ..BeamModel::default() };
            let cloud = PointCloud::from_points(pts);
            let img = project(&cloud, &beam).unwrap();
            let rec = backproject(&img, &beam).unwrap();
            let ang = (2.0 * PI / beam.cols as f64).max((beam.fov_up - beam.fov_down) / beam.rows as f64);
            let mut k = 0;
            for src in img.index_map().iter().flatten() {
                let q = rec.point(k);
                let p = cloud.point(*src as usize);
                let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                let d = crate::kdtree::dist_sq(&p, &q).sqrt();
                prop_assert!(d <= 2.0 * ang * r + 1e-4, "d {} r {}", d, r);
                k += 1;
            }
        }

        #[test]
        fn permutation_changes_only_tied_winners(pts in prop::collection::vec(prop::array::uniform3(-30.0f32..30.0), 1..80), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let beam = BeamModel { rows: 8, cols: 32, ..BeamModel::default() };
            let cloud = PointCloud::from_points(pts.clone());
            let mut shuffled = pts;
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = project(&cloud, &beam).unwrap();
            let b = project(&PointCloud::from_points(shuffled), &beam).unwrap();
            prop_assert_eq!(a.depth(), b.depth());
        }
    }
}
