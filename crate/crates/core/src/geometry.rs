//! Range-view geometry: spherical projection of point clouds into depth
//! images (RVP), the exact inverse back-projection (RRVP), and the radial
//! offset algebra used by rectification.
//!
//! Conventions, all in 64-bit floats:
//!
//! - elevation `θ = atan2(p_z, sqrt(p_x² + p_y²))`
//! - azimuth `φ = atan2(-p_y, p_x)` in `(-π, π]`
//! - back-projection `p = d (cos θ cos φ, -cos θ sin φ, sin θ)`
//!
//! The forward azimuth is chosen so that it inverts the back-projection
//! exactly. Row 0 is the top of the image for the uniform elevation map;
//! column `floor((φ / 2π + 0.5) W) mod W`, so `φ = 0` lands in column `W / 2`.

use std::f64::consts::{FRAC_PI_2, PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Lower bound on depth after applying radial offsets, in meters.
pub const EPS_DEPTH: f64 = 1e-3;

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// An ordered set of points in the sensor frame, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    intensity: Option<Vec<f64>>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates and points at the origin.
    pub fn new(points: Vec<Vec3>, intensity: Option<Vec<f64>>) -> Result<Self> {
        if let Some(int) = &intensity {
            if int.len() != points.len() {
                return Err(Error::Shape(format!(
                    "{} intensities for {} points",
                    int.len(),
                    points.len()
                )));
            }
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::Domain(format!("point {i} has non-finite coordinates")));
            }
            if norm(p) <= 0.0 {
                return Err(Error::Domain(format!("point {i} lies at the sensor origin")));
            }
        }
        Ok(Self { points, intensity })
    }

    pub fn empty() -> Self {
        Self {
            points: Vec::new(),
            intensity: None,
        }
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn intensity(&self) -> Option<&[f64]> {
        self.intensity.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Maps image rows to laser elevation angles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ElevationMap {
    /// Equally spaced lasers: `sigma_u` pixels per radian, centered on `center` radians.
    Uniform { sigma_u: f64, center: f64 },
    /// Per-row elevation of each laser, strictly monotone.
    Table(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub height: usize,
    pub width: usize,
    pub elevation: ElevationMap,
}

impl ProjectionConfig {
    /// Uniform elevation map spanning `[fov_down, fov_up]` radians.
    pub fn uniform(height: usize, width: usize, fov_up: f64, fov_down: f64) -> Result<Self> {
        if !(fov_up > fov_down) {
            return Err(Error::InvalidParam(format!(
                "fov_up {fov_up} must exceed fov_down {fov_down}"
            )));
        }
        let cfg = Self {
            height,
            width,
            elevation: ElevationMap::Uniform {
                sigma_u: height as f64 / (fov_up - fov_down),
                center: 0.5 * (fov_up + fov_down),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn table(width: usize, elevations: Vec<f64>) -> Result<Self> {
        let cfg = Self {
            height: elevations.len(),
            width,
            elevation: ElevationMap::Table(elevations),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// 64 x 1024 with a +3 / -25 degree field of view.
    pub fn kitti() -> Self {
        Self::uniform(64, 1024, 3f64.to_radians(), (-25f64).to_radians())
            .expect("static config is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidParam("image dimensions must be positive".into()));
        }
        match &self.elevation {
            ElevationMap::Uniform { sigma_u, center } => {
                if !(sigma_u.is_finite() && *sigma_u > 0.0 && center.is_finite()) {
                    return Err(Error::InvalidParam(format!(
                        "uniform elevation map needs sigma_u > 0, got {sigma_u}"
                    )));
                }
                let half = 0.5 * self.height as f64 / sigma_u;
                if center + half >= FRAC_PI_2 || center - half <= -FRAC_PI_2 {
                    return Err(Error::InvalidParam(
                        "elevation range must lie inside (-pi/2, pi/2)".into(),
                    ));
                }
            }
            ElevationMap::Table(rows) => {
                if rows.len() != self.height {
                    return Err(Error::Shape(format!(
                        "elevation table has {} rows, image has {}",
                        rows.len(),
                        self.height
                    )));
                }
                if rows.len() < 2 {
                    return Err(Error::InvalidParam(
                        "elevation table needs at least two rows".into(),
                    ));
                }
                let increasing = rows[1] > rows[0];
                for w in rows.windows(2) {
                    let ok = if increasing { w[1] > w[0] } else { w[1] < w[0] };
                    if !ok {
                        return Err(Error::InvalidParam(
                            "elevation table must be strictly monotone".into(),
                        ));
                    }
                }
                let (lo, hi) = self.elevation_bounds();
                if hi >= FRAC_PI_2 || lo <= -FRAC_PI_2 || !lo.is_finite() || !hi.is_finite() {
                    return Err(Error::InvalidParam(
                        "elevation range must lie inside (-pi/2, pi/2)".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Azimuth pixels per radian; always `W / 2π`.
    pub fn sigma_v(&self) -> f64 {
        self.width as f64 / TAU
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    /// Elevation of the center of `row`.
    pub fn row_elevation(&self, row: usize) -> f64 {
        match &self.elevation {
            ElevationMap::Uniform { sigma_u, center } => {
                center + (0.5 * self.height as f64 - row as f64 - 0.5) / sigma_u
            }
            ElevationMap::Table(rows) => rows[row],
        }
    }

    /// Azimuth of the center of `col`.
    pub fn col_azimuth(&self, col: usize) -> f64 {
        ((col as f64 + 0.5) / self.width as f64 - 0.5) * TAU
    }

    /// `(min, max)` elevation covered by the rows' intervals.
    pub fn elevation_bounds(&self) -> (f64, f64) {
        match &self.elevation {
            ElevationMap::Uniform { sigma_u, center } => {
                let half = 0.5 * self.height as f64 / sigma_u;
                (center - half, center + half)
            }
            ElevationMap::Table(rows) => {
                let n = rows.len();
                let first = rows[0] - 0.5 * (rows[1] - rows[0]);
                let last = rows[n - 1] + 0.5 * (rows[n - 1] - rows[n - 2]);
                (first.min(last), first.max(last))
            }
        }
    }

    /// Row whose elevation interval contains `theta`, if any.
    pub fn row_of(&self, theta: f64) -> Option<usize> {
        match &self.elevation {
            ElevationMap::Uniform { sigma_u, center } => {
                let top = center + 0.5 * self.height as f64 / sigma_u;
                let r = ((top - theta) * sigma_u).floor();
                if r >= 0.0 && r < self.height as f64 {
                    Some(r as usize)
                } else {
                    None
                }
            }
            ElevationMap::Table(rows) => {
                // Interval boundaries sit halfway between neighbouring lasers.
                let n = rows.len();
                let increasing = rows[1] > rows[0];
                let key = |v: f64| if increasing { v } else { -v };
                let t = key(theta);
                let lo = key(rows[0] - 0.5 * (rows[1] - rows[0]));
                let hi = key(rows[n - 1] + 0.5 * (rows[n - 1] - rows[n - 2]));
                if t < lo || t >= hi {
                    return None;
                }
                // row = number of interior boundaries <= t
                let (mut a, mut b) = (1, n);
                while a < b {
                    let mid = (a + b) / 2;
                    if key(0.5 * (rows[mid - 1] + rows[mid])) <= t {
                        a = mid + 1;
                    } else {
                        b = mid;
                    }
                }
                Some(a - 1)
            }
        }
    }

    pub fn col_of(&self, phi: f64) -> usize {
        let w = self.width as f64;
        let c = ((phi / TAU + 0.5) * w).floor() as i64;
        c.rem_euclid(self.width as i64) as usize
    }
}

/// Elevation, azimuth and depth of one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayAngles {
    pub elevation: f64,
    pub azimuth: f64,
    pub depth: f64,
}

pub fn rvp_angles(p: &Vec3) -> Result<RayAngles> {
    let horiz = (p[0] * p[0] + p[1] * p[1]).sqrt();
    let depth = norm(p);
    if !(depth > 0.0) {
        return Err(Error::Domain("zero-length point has no direction".into()));
    }
    if !(horiz > 0.0) {
        return Err(Error::Domain(format!(
            "point {p:?} lies on the vertical axis, azimuth undefined"
        )));
    }
    let mut azimuth = (-p[1]).atan2(p[0]);
    // atan2 returns [-π, π]; fold -π onto π
    if azimuth <= -PI {
        azimuth += TAU;
    }
    Ok(RayAngles {
        elevation: p[2].atan2(horiz),
        azimuth,
        depth,
    })
}

/// Unit direction of the ray through elevation `theta` and azimuth `phi`.
pub fn ray_direction(theta: f64, phi: f64) -> Vec3 {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [ct * cp, -ct * sp, st]
}

/// H x W depth image with a no-return mask. Unmasked pixels hold depth 0.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeImage {
    config: ProjectionConfig,
    depth: Vec<f64>,
    mask: Vec<bool>,
}

impl RangeImage {
    pub fn empty(config: ProjectionConfig) -> Self {
        let n = config.len();
        Self {
            config,
            depth: vec![0.0; n],
            mask: vec![false; n],
        }
    }

    /// Builds an image from row-major depths; positive entries are returns, zero is no return.
    pub fn from_depths(config: ProjectionConfig, depth: Vec<f64>) -> Result<Self> {
        if depth.len() != config.len() {
            return Err(Error::Shape(format!(
                "{} depths for a {}x{} image",
                depth.len(),
                config.height,
                config.width
            )));
        }
        let mut mask = Vec::with_capacity(depth.len());
        for (i, &d) in depth.iter().enumerate() {
            if !d.is_finite() || d < 0.0 {
                return Err(Error::Domain(format!("pixel {i} has invalid depth {d}")));
            }
            mask.push(d > 0.0);
        }
        Ok(Self {
            config,
            depth,
            mask,
        })
    }

    pub fn config(&self) -> &ProjectionConfig {
        &self.config
    }

    pub fn height(&self) -> usize {
        self.config.height
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn depths(&self) -> &[f64] {
        &self.depth
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.config.width + col
    }

    #[inline]
    pub fn depth(&self, row: usize, col: usize) -> f64 {
        self.depth[self.index(row, col)]
    }

    #[inline]
    pub fn is_masked(&self, row: usize, col: usize) -> bool {
        self.mask[self.index(row, col)]
    }

    /// Sets a return at `(row, col)`; non-positive depth clears the pixel.
    pub fn set(&mut self, row: usize, col: usize, depth: f64) {
        let i = self.index(row, col);
        self.set_index(i, depth);
    }

    pub fn set_index(&mut self, i: usize, depth: f64) {
        if depth > 0.0 && depth.is_finite() {
            self.depth[i] = depth;
            self.mask[i] = true;
        } else {
            self.depth[i] = 0.0;
            self.mask[i] = false;
        }
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// True if both images share a projection config and mask.
    pub fn same_layout(&self, other: &RangeImage) -> bool {
        self.config == other.config && self.mask == other.mask
    }
}

/// Point-to-pixel correspondence produced by projection and back-projection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IndexMap {
    pub pixel_of_point: Vec<Option<(usize, usize)>>,
    pub point_of_pixel: Vec<Option<usize>>,
    /// Points outside the elevation range or on the vertical axis.
    pub dropped_out_of_range: Vec<usize>,
    /// Points that lost a pixel to a nearer return.
    pub dropped_collision: Vec<usize>,
}

impl IndexMap {
    pub fn survivors(&self) -> usize {
        self.pixel_of_point.iter().filter(|p| p.is_some()).count()
    }

    pub fn dropped(&self) -> usize {
        self.dropped_out_of_range.len() + self.dropped_collision.len()
    }

    /// Checks `point_of_pixel[pixel_of_point[i]] == i` for every survivor and the converse.
    pub fn is_consistent(&self, width: usize) -> bool {
        let forward = self.pixel_of_point.iter().enumerate().all(|(i, px)| match px {
            Some((r, c)) => self.point_of_pixel.get(r * width + c) == Some(&Some(i)),
            None => true,
        });
        let backward = self.point_of_pixel.iter().enumerate().all(|(k, pt)| match pt {
            Some(i) => self.pixel_of_point.get(*i) == Some(&Some((k / width, k % width))),
            None => true,
        });
        forward && backward
    }

    /// Every point has a pixel and the map is consistent.
    pub fn is_full_bijection(&self, width: usize) -> bool {
        self.dropped() == 0
            && self.pixel_of_point.iter().all(|p| p.is_some())
            && self.is_consistent(width)
    }
}

/// Range view projection. Collisions keep the nearest return; ties keep the lower index.
pub fn rvp(cloud: &PointCloud, config: &ProjectionConfig) -> Result<(RangeImage, IndexMap)> {
    config.validate()?;
    if cloud.is_empty() {
        return Err(Error::Empty("cannot project an empty point cloud".into()));
    }
    let mut image = RangeImage::empty(config.clone());
    let n = cloud.len();
    let mut map = IndexMap {
        pixel_of_point: vec![None; n],
        point_of_pixel: vec![None; config.len()],
        ..Default::default()
    };
    let mut pixel = vec![None; n];
    for (i, p) in cloud.points().iter().enumerate() {
        let Ok(angles) = rvp_angles(p) else {
            map.dropped_out_of_range.push(i);
            continue;
        };
        let Some(row) = config.row_of(angles.elevation) else {
            map.dropped_out_of_range.push(i);
            continue;
        };
        let col = config.col_of(angles.azimuth);
        let k = row * config.width + col;
        pixel[i] = Some((row, col, angles.depth));
        match map.point_of_pixel[k] {
            Some(j) => {
                let (_, _, dj) = pixel[j].expect("occupant has a pixel");
                if angles.depth < dj {
                    map.point_of_pixel[k] = Some(i);
                }
            }
            None => map.point_of_pixel[k] = Some(i),
        }
    }
    for (i, px) in pixel.iter().enumerate() {
        let Some((row, col, d)) = *px else { continue };
        let k = row * config.width + col;
        if map.point_of_pixel[k] == Some(i) {
            map.pixel_of_point[i] = Some((row, col));
            image.set_index(k, d);
        } else {
            map.dropped_collision.push(i);
        }
    }
    Ok((image, map))
}

/// Reverse range view projection; one point per masked pixel in row-major order.
pub fn rrvp(image: &RangeImage) -> (PointCloud, IndexMap) {
    let cfg = image.config();
    let mut points = Vec::with_capacity(image.masked_count());
    let mut map = IndexMap {
        point_of_pixel: vec![None; cfg.len()],
        ..Default::default()
    };
    for row in 0..cfg.height {
        let theta = cfg.row_elevation(row);
        for col in 0..cfg.width {
            let k = image.index(row, col);
            if !image.mask[k] {
                continue;
            }
            let d = image.depth[k];
            let dir = ray_direction(theta, cfg.col_azimuth(col));
            map.point_of_pixel[k] = Some(points.len());
            map.pixel_of_point.push(Some((row, col)));
            points.push([d * dir[0], d * dir[1], d * dir[2]]);
        }
    }
    (
        PointCloud {
            points,
            intensity: None,
        },
        map,
    )
}

/// Per-point offsets together with their projection onto each point's ray.
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetField {
    pub raw: Vec<Vec3>,
    pub radial: Vec<Vec3>,
    pub signed: Vec<f64>,
}

impl OffsetField {
    /// Purely radial field with signed magnitudes `s` along each point's ray.
    pub fn from_signed(cloud: &PointCloud, signed: Vec<f64>) -> Result<Self> {
        if signed.len() != cloud.len() {
            return Err(Error::Shape(format!(
                "{} magnitudes for {} points",
                signed.len(),
                cloud.len()
            )));
        }
        let radial: Vec<Vec3> = cloud
            .points()
            .iter()
            .zip(&signed)
            .map(|(p, &s)| {
                let d = norm(p);
                [s * p[0] / d, s * p[1] / d, s * p[2] / d]
            })
            .collect();
        Ok(Self {
            raw: radial.clone(),
            radial,
            signed,
        })
    }
}

/// Orthogonal projection of each offset onto its point's unit ray.
pub fn radial_project(cloud: &PointCloud, raw: &[Vec3]) -> Result<OffsetField> {
    if raw.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "{} offsets for {} points",
            raw.len(),
            cloud.len()
        )));
    }
    let mut radial = Vec::with_capacity(raw.len());
    let mut signed = Vec::with_capacity(raw.len());
    for (i, (p, o)) in cloud.points().iter().zip(raw).enumerate() {
        let d = norm(p);
        if !(d > 0.0) {
            return Err(Error::Domain(format!("point {i} has zero length")));
        }
        let s = dot(p, o) / d;
        signed.push(s);
        radial.push([s * p[0] / d, s * p[1] / d, s * p[2] / d]);
    }
    Ok(OffsetField {
        raw: raw.to_vec(),
        radial,
        signed,
    })
}

/// Result of moving points along their rays.
#[derive(Debug, Clone, PartialEq)]
pub struct Displaced {
    pub cloud: PointCloud,
    /// Indices whose offset was clamped to keep depth at least [`EPS_DEPTH`].
    pub clamped: Vec<usize>,
}

/// Adds the radial offsets to the cloud. Intensity passes through.
pub fn apply_offsets(cloud: &PointCloud, field: &OffsetField) -> Result<Displaced> {
    if field.signed.len() != cloud.len() || field.radial.len() != cloud.len() {
        return Err(Error::Shape(format!(
            "offset field of {} for {} points",
            field.signed.len(),
            cloud.len()
        )));
    }
    let mut clamped = Vec::new();
    let points = cloud
        .points()
        .iter()
        .zip(field.radial.iter().zip(&field.signed))
        .enumerate()
        .map(|(i, (p, (r, &s)))| {
            let d = norm(p);
            if d + s >= EPS_DEPTH {
                [p[0] + r[0], p[1] + r[1], p[2] + r[2]]
            } else {
                clamped.push(i);
                let scale = EPS_DEPTH / d;
                [p[0] * scale, p[1] * scale, p[2] * scale]
            }
        })
        .collect();
    Ok(Displaced {
        cloud: PointCloud {
            points,
            intensity: cloud.intensity.clone(),
        },
        clamped,
    })
}
