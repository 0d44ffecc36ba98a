//! Procedural LiDAR scenes and controlled range-view artifacts.
//!
//! [`synth_scene`] ray-casts a ground plane plus boxes and vertical cylinders
//! into a clean range image. The injectors then reproduce the two error
//! regimes a range-view generator leaves behind:
//!
//! - small, local *variance* artifacts: depth bleeding across edges, wavy
//!   surfaces and rounded edges
//! - coherent *bias* regions: rectangular chunks carrying one large depth shift
//!
//! Every injector leaves the mask untouched and records per-pixel labels in a
//! [`CorruptionReport`]. A bias label overrides a variance label.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ray_direction, ProjectionConfig, RangeImage, Vec3};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    /// Axis-aligned box in world coordinates.
    Box { center: Vec3, size: Vec3 },
    /// Vertical cylinder standing on `z_min`.
    Cylinder {
        center: [f64; 2],
        radius: f64,
        z_min: f64,
        z_max: f64,
    },
}

/// A static scene. World z is up, the sensor sits at `(0, 0, sensor_height)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub ground_z: f64,
    pub sensor_height: f64,
    /// Returns beyond this range are dropped, meters.
    pub max_range: f64,
    pub primitives: Vec<Primitive>,
}

/// Knobs for [`SceneSpec::random`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneParams {
    pub ground_z: f64,
    pub sensor_height: f64,
    pub max_range: f64,
    pub boxes: usize,
    pub walls: usize,
    pub cylinders: usize,
}

impl Default for SceneParams {
    fn default() -> Self {
        Self {
            ground_z: 0.0,
            sensor_height: 1.73,
            max_range: 80.0,
            boxes: 14,
            walls: 4,
            cylinders: 10,
        }
    }
}

impl SceneSpec {
    /// Scatters boxes, long walls and poles around the sensor, deterministically per seed.
    pub fn random(seed: u64, params: &SceneParams) -> Result<Self> {
        if !(params.max_range > 12.0) {
            return Err(Error::InvalidParam(format!(
                "max_range {} too small for scene generation",
                params.max_range
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = params.ground_z;
        let reach = params.max_range - 5.0;
        let mut primitives = Vec::new();
        let place = |rng: &mut ChaCha8Rng, min_r: f64| {
            let r = rng.random_range(min_r..reach);
            let a = rng.random_range(0.0..std::f64::consts::TAU);
            [r * a.cos(), r * a.sin()]
        };
        for _ in 0..params.boxes {
            let c = place(&mut rng, 6.0);
            let size = [
                rng.random_range(1.0..5.0),
                rng.random_range(1.0..5.0),
                rng.random_range(1.2..3.5),
            ];
            primitives.push(Primitive::Box {
                center: [c[0], c[1], g + 0.5 * size[2]],
                size,
            });
        }
        for _ in 0..params.walls {
            let c = place(&mut rng, 10.0);
            let long = rng.random_range(8.0..30.0);
            let h = rng.random_range(3.0..7.0);
            let size = if rng.random_bool(0.5) {
                [long, 0.5, h]
            } else {
                [0.5, long, h]
            };
            primitives.push(Primitive::Box {
                center: [c[0], c[1], g + 0.5 * h],
                size,
            });
        }
        for _ in 0..params.cylinders {
            let c = place(&mut rng, 5.0);
            primitives.push(Primitive::Cylinder {
                center: c,
                radius: rng.random_range(0.15..0.8),
                z_min: g,
                z_max: g + rng.random_range(2.0..8.0),
            });
        }
        // keep the sensor outside every primitive
        primitives.retain(|p| !contains_sensor_column(p, 1.5));
        Ok(Self {
            seed,
            ground_z: g,
            sensor_height: params.sensor_height,
            max_range: params.max_range,
            primitives,
        })
    }
}

fn contains_sensor_column(p: &Primitive, margin: f64) -> bool {
    match p {
        Primitive::Box { center, size } => {
            center[0].abs() < 0.5 * size[0] + margin && center[1].abs() < 0.5 * size[1] + margin
        }
        Primitive::Cylinder { center, radius, .. } => {
            (center[0] * center[0] + center[1] * center[1]).sqrt() < radius + margin
        }
    }
}

/// Nearest positive hit distance of a ray from the origin, sensor frame.
fn intersect(p: &Primitive, dir: &Vec3, dz: f64) -> Option<f64> {
    match p {
        Primitive::Box { center, size } => {
            let c = [center[0], center[1], center[2] - dz];
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            for a in 0..3 {
                let lo = c[a] - 0.5 * size[a];
                let hi = c[a] + 0.5 * size[a];
                if dir[a].abs() < 1e-15 {
                    if 0.0 < lo || 0.0 > hi {
                        return None;
                    }
                    continue;
                }
                let (mut t0, mut t1) = (lo / dir[a], hi / dir[a]);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                t_near = t_near.max(t0);
                t_far = t_far.min(t1);
            }
            if t_near <= t_far && t_near > 0.0 {
                Some(t_near)
            } else {
                None
            }
        }
        Primitive::Cylinder {
            center,
            radius,
            z_min,
            z_max,
        } => {
            let (z0, z1) = (z_min - dz, z_max - dz);
            let mut best: Option<f64> = None;
            let a = dir[0] * dir[0] + dir[1] * dir[1];
            if a > 1e-15 {
                let b = -2.0 * (dir[0] * center[0] + dir[1] * center[1]);
                let c = center[0] * center[0] + center[1] * center[1] - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / (2.0 * a);
                    let z = t * dir[2];
                    if t > 0.0 && z >= z0 && z <= z1 {
                        best = Some(t);
                    }
                }
            }
            // top cap
            if dir[2].abs() > 1e-15 {
                for zc in [z1, z0] {
                    let t = zc / dir[2];
                    if t > 0.0 {
                        let x = t * dir[0] - center[0];
                        let y = t * dir[1] - center[1];
                        if x * x + y * y <= radius * radius {
                            best = Some(best.map_or(t, |b| b.min(t)));
                        }
                    }
                }
            }
            best
        }
    }
}

/// Ray-casts every pixel center against the ground plane and the primitives.
pub fn synth_scene(spec: &SceneSpec, config: &ProjectionConfig) -> Result<RangeImage> {
    config.validate()?;
    let mut image = RangeImage::empty(config.clone());
    let plane = spec.ground_z - spec.sensor_height;
    for row in 0..config.height {
        let theta = config.row_elevation(row);
        for col in 0..config.width {
            let dir = ray_direction(theta, config.col_azimuth(col));
            let mut best = f64::INFINITY;
            if dir[2] < 0.0 && plane < 0.0 {
                best = plane / dir[2];
            }
            for p in &spec.primitives {
                if let Some(t) = intersect(p, &dir, spec.sensor_height) {
                    best = best.min(t);
                }
            }
            if best.is_finite() && best <= spec.max_range {
                image.set(row, col, best);
            }
        }
    }
    Ok(image)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BleedSpec {
    /// Azimuth-adjacent depth gaps above this are edges, meters.
    pub edge_threshold: f64,
    /// Gaps above this are left intact, meters.
    pub max_gap: f64,
    pub width: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WavySpec {
    pub amplitude: f64,
    pub azimuth_period: f64,
    pub elevation_period: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundSpec {
    pub kernel_sigma: f64,
    pub edge_band: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiasSpec {
    pub count: usize,
    pub min_area: usize,
    pub shift_min: f64,
    pub shift_max: f64,
}

impl Default for BleedSpec {
    fn default() -> Self {
        Self {
            edge_threshold: 2.0,
            max_gap: 2.5,
            width: 2,
            probability: 0.5,
        }
    }
}

impl Default for WavySpec {
    fn default() -> Self {
        Self {
            amplitude: 0.15,
            azimuth_period: 64.0,
            elevation_period: 16.0,
        }
    }
}

impl Default for RoundSpec {
    fn default() -> Self {
        Self {
            kernel_sigma: 1.0,
            edge_band: 3,
        }
    }
}

impl Default for BiasSpec {
    fn default() -> Self {
        Self {
            count: 4,
            min_area: 200,
            shift_min: 3.0,
            shift_max: 8.0,
        }
    }
}

/// Artifact parameters. Edges for every injector are azimuth-adjacent
/// gaps in `(bleed.edge_threshold, bleed.max_gap]`; wavy surfaces avoid any
/// gap above `bleed.edge_threshold`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSpec {
    pub bleed: BleedSpec,
    pub wavy: WavySpec,
    pub round: RoundSpec,
    pub bias: BiasSpec,
    pub rng_seed: u64,
}

impl CorruptionSpec {
    /// Every magnitude zero: the injectors become identities.
    pub fn none() -> Self {
        Self {
            bleed: BleedSpec {
                probability: 0.0,
                ..Default::default()
            },
            wavy: WavySpec {
                amplitude: 0.0,
                ..Default::default()
            },
            round: RoundSpec {
                kernel_sigma: 0.0,
                ..Default::default()
            },
            bias: BiasSpec {
                count: 0,
                ..Default::default()
            },
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bleed;
        if !(b.edge_threshold >= 0.0 && b.max_gap >= b.edge_threshold) {
            return Err(Error::InvalidParam(
                "bleed needs 0 <= edge_threshold <= max_gap".into(),
            ));
        }
        if !(0.0..=1.0).contains(&b.probability) {
            return Err(Error::InvalidParam(format!(
                "bleed probability {} outside [0, 1]",
                b.probability
            )));
        }
        let w = &self.wavy;
        if !(w.amplitude >= 0.0 && w.azimuth_period > 0.0 && w.elevation_period > 0.0) {
            return Err(Error::InvalidParam(
                "wavy needs amplitude >= 0 and positive periods".into(),
            ));
        }
        if !(self.round.kernel_sigma >= 0.0) {
            return Err(Error::InvalidParam("kernel_sigma must be >= 0".into()));
        }
        let s = &self.bias;
        if !(s.shift_min >= 0.0 && s.shift_max >= s.shift_min) {
            return Err(Error::InvalidParam(
                "bias needs 0 <= shift_min <= shift_max".into(),
            ));
        }
        if s.count > 0 && s.shift_min < 3.0 * w.amplitude {
            return Err(Error::InvalidParam(format!(
                "bias shift_min {} must be at least 3 x wavy amplitude {}",
                s.shift_min, w.amplitude
            )));
        }
        Ok(())
    }

    /// Whether bias shifts are guaranteed to exceed every variance artifact
    /// (`shift_min >= 3 amplitude + max_gap`).
    pub fn regimes_separated(&self) -> bool {
        self.bias.shift_min >= 3.0 * self.wavy.amplitude + self.bleed.max_gap
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    NoReturn,
    Clean,
    VarianceArtifact,
    BiasRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    fn overlaps(&self, o: &Rect) -> bool {
        self.row < o.row + o.height
            && o.row < self.row + self.height
            && self.col < o.col + o.width
            && o.col < self.col + self.width
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasChunk {
    pub rect: Rect,
    pub shift: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub no_return: usize,
    pub clean: usize,
    pub variance_artifact: usize,
    pub bias_region: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptionReport {
    pub width: usize,
    pub labels: Vec<Label>,
    pub chunks: Vec<BiasChunk>,
    pub chunks_requested: usize,
}

impl CorruptionReport {
    pub fn clean(image: &RangeImage) -> Self {
        Self {
            width: image.width(),
            labels: image
                .mask()
                .iter()
                .map(|&m| if m { Label::Clean } else { Label::NoReturn })
                .collect(),
            chunks: Vec::new(),
            chunks_requested: 0,
        }
    }

    pub fn label(&self, row: usize, col: usize) -> Label {
        self.labels[row * self.width + col]
    }

    fn mark(&mut self, i: usize, label: Label) {
        let cur = &mut self.labels[i];
        match (label, *cur) {
            (_, Label::NoReturn) => {}
            (Label::BiasRegion, _) => *cur = Label::BiasRegion,
            (Label::VarianceArtifact, Label::Clean) => *cur = Label::VarianceArtifact,
            _ => {}
        }
    }

    /// Folds a later pass into this one, bias taking precedence.
    pub fn merge(&mut self, later: &CorruptionReport) {
        for (i, &l) in later.labels.iter().enumerate() {
            if l == Label::VarianceArtifact || l == Label::BiasRegion {
                self.mark(i, l);
            }
        }
        self.chunks.extend_from_slice(&later.chunks);
        self.chunks_requested += later.chunks_requested;
    }

    pub fn counts(&self) -> LabelCounts {
        let mut c = LabelCounts::default();
        for l in &self.labels {
            match l {
                Label::NoReturn => c.no_return += 1,
                Label::Clean => c.clean += 1,
                Label::VarianceArtifact => c.variance_artifact += 1,
                Label::BiasRegion => c.bias_region += 1,
            }
        }
        c
    }

    /// Labels exactly the masked pixels of `image` with a non-`NoReturn` label.
    pub fn partitions(&self, image: &RangeImage) -> bool {
        self.labels.len() == image.mask().len()
            && self
                .labels
                .iter()
                .zip(image.mask())
                .all(|(l, &m)| m == (*l != Label::NoReturn))
    }

    pub fn indices_with(&self, label: Label) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

#[inline]
fn right_of(col: usize, w: usize) -> usize {
    (col + 1) % w
}

/// Columns `c` such that pixels `c` and `c + 1` (wrapping) form an edge with gap in `(lo, hi]`.
fn horizontal_edges(image: &RangeImage, lo: f64, hi: f64) -> Vec<(usize, usize)> {
    let (h, w) = (image.height(), image.width());
    let mut edges = Vec::new();
    if w < 2 {
        return edges;
    }
    for row in 0..h {
        for col in 0..w {
            let c2 = right_of(col, w);
            if !(image.is_masked(row, col) && image.is_masked(row, c2)) {
                continue;
            }
            let gap = (image.depth(row, col) - image.depth(row, c2)).abs();
            if gap > lo && gap <= hi {
                edges.push((row, col));
            }
        }
    }
    edges
}

/// Replaces up to `width` pixels on the far side of artifact-scale edges by a
/// linear ramp from the near depth to the next far-side depth.
pub fn inject_depth_bleed(
    image: &RangeImage,
    spec: &CorruptionSpec,
    rng: &mut impl Rng,
) -> (RangeImage, CorruptionReport) {
    let mut out = image.clone();
    let mut report = CorruptionReport::clean(image);
    let b = &spec.bleed;
    if b.probability <= 0.0 || b.width == 0 {
        return (out, report);
    }
    let w = image.width() as i64;
    let edges = horizontal_edges(image, b.edge_threshold, b.max_gap);
    let mut touched = vec![false; image.mask().len()];
    for (row, col) in edges {
        if !rng.random_bool(b.probability) {
            continue;
        }
        let c2 = right_of(col, image.width());
        let (near, far, step) = if image.depth(row, col) < image.depth(row, c2) {
            (col as i64, c2 as i64, 1)
        } else {
            (c2 as i64, col as i64, -1)
        };
        let at = |k: i64| (far + step * k).rem_euclid(w) as usize;
        // run of far-side pixels, then a masked anchor beyond it
        let mut run = 0usize;
        while run < b.width {
            let next = at(run as i64 + 1);
            let prev = at(run as i64);
            if next == near as usize
                || !image.is_masked(row, next)
                || (image.depth(row, next) - image.depth(row, prev)).abs() > b.edge_threshold
            {
                break;
            }
            run += 1;
        }
        if run == 0 {
            continue;
        }
        let idx: Vec<usize> = (0..run).map(|k| image.index(row, at(k as i64))).collect();
        if idx.iter().any(|&i| touched[i]) || touched[image.index(row, near as usize)] {
            continue;
        }
        let d_near = image.depth(row, near as usize);
        let d_anchor = image.depth(row, at(run as i64));
        for (k, &i) in idx.iter().enumerate() {
            let f = (k + 1) as f64 / (run + 1) as f64;
            out.set_index(i, d_near + (d_anchor - d_near) * f);
            touched[i] = true;
            report.mark(i, Label::VarianceArtifact);
        }
    }
    (out, report)
}

/// Pixels that sit next to any 4-neighbour gap above `threshold`.
fn near_any_edge(image: &RangeImage, threshold: f64) -> Vec<bool> {
    let (h, w) = (image.height(), image.width());
    let mut near = vec![false; h * w];
    for row in 0..h {
        for col in 0..w {
            if !image.is_masked(row, col) {
                continue;
            }
            let d = image.depth(row, col);
            let mut check = |r: usize, c: usize| {
                if image.is_masked(r, c) && (image.depth(r, c) - d).abs() > threshold {
                    near[row * w + col] = true;
                }
            };
            check(row, right_of(col, w));
            check(row, (col + w - 1) % w);
            if row > 0 {
                check(row - 1, col);
            }
            if row + 1 < h {
                check(row + 1, col);
            }
        }
    }
    near
}

/// Sinusoidal displacement `A·sin(2π col / P_az)·sin(2π row / P_el)`.
pub fn wavy_delta(spec: &WavySpec, row: usize, col: usize) -> f64 {
    use std::f64::consts::TAU;
    spec.amplitude
        * (TAU * col as f64 / spec.azimuth_period).sin()
        * (TAU * row as f64 / spec.elevation_period).sin()
}

/// Adds the wavy-surface pattern to masked pixels away from edges.
pub fn inject_wavy(image: &RangeImage, spec: &CorruptionSpec) -> (RangeImage, CorruptionReport) {
    let mut out = image.clone();
    let mut report = CorruptionReport::clean(image);
    if spec.wavy.amplitude <= 0.0 {
        return (out, report);
    }
    let near = near_any_edge(image, spec.bleed.edge_threshold);
    for row in 0..image.height() {
        for col in 0..image.width() {
            let i = image.index(row, col);
            if !image.mask()[i] || near[i] {
                continue;
            }
            let d = image.depths()[i] + wavy_delta(&spec.wavy, row, col);
            // amplitude is far below any synthetic depth; keep the return regardless
            out.set_index(i, d.max(crate::geometry::EPS_DEPTH));
            report.mark(i, Label::VarianceArtifact);
        }
    }
    (out, report)
}

/// Blurs along azimuth within `edge_band` columns of artifact-scale edges.
///
/// The Gaussian support stops at unmasked pixels and at gaps above
/// `bleed.max_gap`, and the kernel is renormalized over what remains.
pub fn inject_round_corners(
    image: &RangeImage,
    spec: &CorruptionSpec,
) -> (RangeImage, CorruptionReport) {
    let mut out = image.clone();
    let mut report = CorruptionReport::clean(image);
    let sigma = spec.round.kernel_sigma;
    let radius = (3.0 * sigma).ceil() as usize;
    if sigma < 1e-6 || radius == 0 {
        return (out, report);
    }
    let (h, w) = (image.height(), image.width());
    let kernel: Vec<f64> = (0..=radius)
        .map(|k| (-(k as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let band = spec.round.edge_band as i64;
    let mut in_band = vec![false; h * w];
    for (row, col) in horizontal_edges(image, spec.bleed.edge_threshold, spec.bleed.max_gap) {
        let c2 = right_of(col, w) as i64;
        let c1 = col as i64;
        for k in 0..band {
            for c in [c1 - k, c2 + k] {
                let cc = c.rem_euclid(w as i64) as usize;
                if image.is_masked(row, cc) {
                    in_band[row * w + cc] = true;
                }
            }
        }
    }
    let max_gap = spec.bleed.max_gap;
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            if !in_band[i] {
                continue;
            }
            let mut sum = kernel[0] * image.depth(row, col);
            let mut norm = kernel[0];
            for dir in [1i64, -1] {
                let mut prev = image.depth(row, col);
                for k in 1..=radius {
                    if k >= w {
                        break;
                    }
                    let c = (col as i64 + dir * k as i64).rem_euclid(w as i64) as usize;
                    if !image.is_masked(row, c) {
                        break;
                    }
                    let d = image.depth(row, c);
                    if (d - prev).abs() > max_gap {
                        break;
                    }
                    sum += kernel[k] * d;
                    norm += kernel[k];
                    prev = d;
                }
            }
            out.set_index(i, sum / norm);
            report.mark(i, Label::VarianceArtifact);
        }
    }
    (out, report)
}

/// Sets every pixel of `rect` to `base + shift`. All pixels must be masked in both images.
pub fn shift_region(
    image: &mut RangeImage,
    base: &RangeImage,
    rect: Rect,
    shift: f64,
    report: &mut CorruptionReport,
) {
    for r in rect.row..rect.row + rect.height {
        for c in rect.col..rect.col + rect.width {
            let i = image.index(r, c);
            image.set_index(i, base.depths()[i] + shift);
            report.mark(i, Label::BiasRegion);
        }
    }
}

/// Bias chunks shifted relative to the image itself.
pub fn inject_bias_chunks(
    image: &RangeImage,
    spec: &CorruptionSpec,
    rng: &mut impl Rng,
) -> (RangeImage, CorruptionReport) {
    inject_bias_chunks_over(image, image, spec, rng)
}

/// Places up to `bias.count` fully masked, non-overlapping rectangles with
/// area in `[min_area, 3 min_area]` and sets each to `base + shift`, one shift
/// per chunk. Fewer chunks are placed when the masked area runs out.
pub fn inject_bias_chunks_over(
    image: &RangeImage,
    base: &RangeImage,
    spec: &CorruptionSpec,
    rng: &mut impl Rng,
) -> (RangeImage, CorruptionReport) {
    let mut out = image.clone();
    let mut report = CorruptionReport::clean(image);
    let s = &spec.bias;
    report.chunks_requested = s.count;
    if s.count == 0 {
        return (out, report);
    }
    let (h, w) = (image.height(), image.width());
    let min_area = s.min_area.max(1);
    let max_h = h.min(24).max(1);
    let min_h = 3.min(max_h);
    let mut placed: Vec<Rect> = Vec::new();
    for _ in 0..s.count * 200 {
        if placed.len() == s.count {
            break;
        }
        let area = rng.random_range(min_area..=3 * min_area);
        let rh = rng.random_range(min_h..=max_h);
        let rw = area.div_ceil(rh);
        if rw > w || rh > h {
            continue;
        }
        let rect = Rect {
            row: rng.random_range(0..=h - rh),
            col: rng.random_range(0..=w - rw),
            height: rh,
            width: rw,
        };
        let magnitude = rng.random_range(s.shift_min..=s.shift_max);
        let negative = rng.random_bool(0.5);
        if placed.iter().any(|p| p.overlaps(&rect)) {
            continue;
        }
        let mut ok = true;
        let mut min_base = f64::INFINITY;
        'scan: for r in rect.row..rect.row + rect.height {
            for c in rect.col..rect.col + rect.width {
                if !image.is_masked(r, c) || !base.is_masked(r, c) {
                    ok = false;
                    break 'scan;
                }
                min_base = min_base.min(base.depth(r, c));
            }
        }
        if !ok {
            continue;
        }
        // pulling a chunk through the sensor is not a plausible hallucination
        let shift = if negative && min_base - magnitude > 1.0 {
            -magnitude
        } else {
            magnitude
        };
        shift_region(&mut out, base, rect, shift, &mut report);
        placed.push(rect);
        report.chunks.push(BiasChunk { rect, shift });
    }
    (out, report)
}

/// Clean ground truth and its corrupted counterpart.
#[derive(Debug, Clone)]
pub struct Pair {
    pub gt: RangeImage,
    pub gen: RangeImage,
    pub report: CorruptionReport,
}

/// Applies bleed, wavy, round corners and bias chunks (in that order) to a clean image.
pub fn corrupt(gt: &RangeImage, spec: &CorruptionSpec) -> Result<(RangeImage, CorruptionReport)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let mut report = CorruptionReport::clean(gt);
    let (img, r) = inject_depth_bleed(gt, spec, &mut rng);
    report.merge(&r);
    let (img, r) = inject_wavy(&img, spec);
    report.merge(&r);
    let (img, r) = inject_round_corners(&img, spec);
    report.merge(&r);
    let (img, r) = inject_bias_chunks_over(&img, gt, spec, &mut rng);
    report.merge(&r);
    Ok((img, report))
}

pub fn make_pair(
    scene: &SceneSpec,
    spec: &CorruptionSpec,
    config: &ProjectionConfig,
) -> Result<Pair> {
    let gt = synth_scene(scene, config)?;
    let (gen, report) = corrupt(&gt, spec)?;
    Ok(Pair { gt, gen, report })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ProjectionConfig {
        ProjectionConfig::uniform(32, 256, 0.2, -0.4).unwrap()
    }

    fn flat(depth: f64, h: usize, w: usize) -> RangeImage {
        let c = ProjectionConfig::uniform(h, w, 0.2, -0.2).unwrap();
        RangeImage::from_depths(c, vec![depth; h * w]).unwrap()
    }

    fn step(h: usize, w: usize, near: f64, far: f64, at: usize) -> RangeImage {
        let c = ProjectionConfig::uniform(h, w, 0.2, -0.2).unwrap();
        let d = (0..h * w).map(|i| if i % w < at { near } else { far }).collect();
        RangeImage::from_depths(c, d).unwrap()
    }

    #[test]
    fn ground_plane_depths() {
        let spec = SceneSpec {
            seed: 0,
            ground_z: -2.0,
            sensor_height: 0.0,
            max_range: 1e6,
            primitives: vec![],
        };
        let c = cfg();
        let img = synth_scene(&spec, &c).unwrap();
        for row in 0..c.height {
            let theta = c.row_elevation(row);
            for col in [0, 77, 255] {
                if theta >= 0.0 {
                    assert!(!img.is_masked(row, col));
                } else {
                    let expect = 2.0 / (-theta).sin();
                    assert!((img.depth(row, col) - expect).abs() < 1e-9 * expect);
                }
            }
        }
    }

    #[test]
    fn box_occludes_ground() {
        let c = cfg();
        // a wall 10 m ahead along +x, column W/2 looks along +x
        let spec = SceneSpec {
            seed: 0,
            ground_z: -2.0,
            sensor_height: 0.0,
            max_range: 100.0,
            primitives: vec![Primitive::Box {
                center: [10.5, 0.0, 0.0],
                size: [1.0, 20.0, 10.0],
            }],
        };
        let img = synth_scene(&spec, &c).unwrap();
        let row = c.row_of(-0.01).unwrap();
        let theta = c.row_elevation(row);
        let phi = c.col_azimuth(128);
        let expect = 10.0 / (theta.cos() * phi.cos());
        assert!((img.depth(row, 128) - expect).abs() < 1e-9);
    }

    #[test]
    fn cylinder_hit_distance() {
        let c = cfg();
        let spec = SceneSpec {
            seed: 0,
            ground_z: -2.0,
            sensor_height: 0.0,
            max_range: 100.0,
            primitives: vec![Primitive::Cylinder {
                center: [10.0, 0.0],
                radius: 1.0,
                z_min: -2.0,
                z_max: 5.0,
            }],
        };
        let img = synth_scene(&spec, &c).unwrap();
        let row = c.row_of(-0.01).unwrap();
        let dir = ray_direction(c.row_elevation(row), c.col_azimuth(128));
        // |t·dir_xy - (10, 0)| = 1
        let a = dir[0] * dir[0] + dir[1] * dir[1];
        let b = -20.0 * dir[0];
        let t = (-b - (b * b - 4.0 * a * 99.0).sqrt()) / (2.0 * a);
        assert!((img.depth(row, 128) - t).abs() < 1e-9);
    }

    #[test]
    fn random_scene_is_deterministic() {
        let p = SceneParams::default();
        let a = SceneSpec::random(7, &p).unwrap();
        let b = SceneSpec::random(7, &p).unwrap();
        assert_eq!(a, b);
        let c = ProjectionConfig::uniform(16, 128, 0.05, -0.4).unwrap();
        assert_eq!(synth_scene(&a, &c).unwrap(), synth_scene(&b, &c).unwrap());
        assert_ne!(a, SceneSpec::random(8, &p).unwrap());
    }

    #[test]
    fn bleed_ramps_across_step() {
        let img = step(1, 16, 5.0, 20.0, 8);
        let mut spec = CorruptionSpec::none();
        spec.bleed = BleedSpec {
            edge_threshold: 2.0,
            max_gap: 100.0,
            width: 2,
            probability: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (out, rep) = inject_depth_bleed(&img, &spec, &mut rng);
        let inside: Vec<usize> = (0..16)
            .filter(|&c| out.depth(0, c) > 5.0 && out.depth(0, c) < 20.0)
            .collect();
        // two pixels on the far side of each edge; the ring wraps, so 15|0 is an edge too
        assert_eq!(inside, vec![8, 9, 14, 15]);
        assert!(out.depth(0, 8) < out.depth(0, 9));
        assert_eq!(rep.counts().variance_artifact, 4);
        assert_eq!(out.mask(), img.mask());
    }

    #[test]
    fn bleed_noops() {
        let img = step(2, 16, 5.0, 20.0, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut spec = CorruptionSpec::none();
        spec.bleed.probability = 1.0;
        spec.bleed.max_gap = 1000.0;
        spec.bleed.edge_threshold = 100.0;
        assert_eq!(inject_depth_bleed(&img, &spec, &mut rng).0, img);
        spec.bleed.edge_threshold = 2.0;
        spec.bleed.probability = 0.0;
        assert_eq!(inject_depth_bleed(&img, &spec, &mut rng).0, img);
    }

    #[test]
    fn wavy_matches_closed_form() {
        let img = flat(10.0, 16, 64);
        let mut spec = CorruptionSpec::none();
        assert_eq!(inject_wavy(&img, &spec).0, img);
        spec.wavy.amplitude = 0.15;
        let (out, rep) = inject_wavy(&img, &spec);
        let mut max_abs: f64 = 0.0;
        let mut sum = 0.0;
        for r in 0..16 {
            for c in 0..64 {
                let delta = out.depth(r, c) - 10.0;
                assert!((delta - wavy_delta(&spec.wavy, r, c)).abs() < 1e-12);
                max_abs = max_abs.max(delta.abs());
                sum += delta;
            }
        }
        // sin(2π·4/16)·sin(2π·16/64) = 1
        assert!((max_abs - 0.15).abs() < 1e-12);
        assert!((sum / (16.0 * 64.0)).abs() < 1e-12);
        assert_eq!(rep.counts().variance_artifact, 16 * 64);
    }

    #[test]
    fn round_corners_identity_cases() {
        let img = flat(7.0, 4, 32);
        let spec = CorruptionSpec::default();
        assert_eq!(inject_round_corners(&img, &spec).0, img);

        let s = step(1, 32, 5.0, 7.0, 16);
        let mut tiny = CorruptionSpec::default();
        tiny.round.kernel_sigma = 1e-9;
        let (out, _) = inject_round_corners(&s, &tiny);
        for (a, b) in out.depths().iter().zip(s.depths()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn round_corners_smooths_step_monotonically() {
        let s = step(1, 32, 5.0, 7.25, 16);
        let spec = CorruptionSpec::default();
        let (out, rep) = inject_round_corners(&s, &spec);
        // discrete convolution oracle for the pixel left of the edge
        let k: Vec<f64> = (0..=3).map(|i| (-(i as f64).powi(2) / 2.0).exp()).collect();
        let total = k[0] + 2.0 * (k[1] + k[2] + k[3]);
        let oracle = (5.0 * (k[0] + k[1] + k[2] + k[3]) + 7.25 * (k[1] + k[2] + k[3])) / total;
        assert!((out.depth(0, 15) - oracle).abs() < 1e-12);
        // 5 → 7.25 ramp between the flat ends
        let row: Vec<f64> = (8..24).map(|c| out.depth(0, c)).collect();
        assert!(row.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(out.depth(0, 8), 5.0);
        assert_eq!(out.depth(0, 23), 7.25);
        assert!(out.depth(0, 15) > 5.0 && out.depth(0, 16) < 7.25);
        assert!(rep.counts().variance_artifact > 0);
    }

    #[test]
    fn bias_chunk_shifts_exactly() {
        let img = flat(20.0, 32, 64);
        let mut out = img.clone();
        let mut rep = CorruptionReport::clean(&img);
        let rect = Rect {
            row: 4,
            col: 10,
            height: 20,
            width: 40,
        };
        shift_region(&mut out, &img, rect, 5.0, &mut rep);
        let shifted = out
            .depths()
            .iter()
            .zip(img.depths())
            .filter(|(a, b)| (*a - *b - 5.0).abs() < 1e-12)
            .count();
        assert_eq!(shifted, 800);
        assert_eq!(rep.counts().bias_region, 800);
    }

    #[test]
    fn bias_count_zero_and_shortfall() {
        let img = flat(20.0, 8, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut spec = CorruptionSpec::none();
        assert_eq!(inject_bias_chunks(&img, &spec, &mut rng).0, img);
        spec.bias.count = 3;
        spec.bias.min_area = 10_000;
        let (out, rep) = inject_bias_chunks(&img, &spec, &mut rng);
        assert_eq!(out, img);
        assert_eq!(rep.chunks.len(), 0);
        assert_eq!(rep.chunks_requested, 3);
    }

    #[test]
    fn bias_overrides_variance_labels() {
        let img = flat(20.0, 32, 128);
        let mut spec = CorruptionSpec::default();
        spec.bias.min_area = 50;
        let (_, rep) = corrupt(&img, &spec).unwrap();
        assert!(rep.partitions(&img));
        for chunk in &rep.chunks {
            let r = chunk.rect;
            for row in r.row..r.row + r.height {
                for col in r.col..r.col + r.width {
                    assert_eq!(rep.label(row, col), Label::BiasRegion);
                }
            }
        }
        assert!(rep.counts().bias_region > 0 && rep.counts().variance_artifact > 0);
    }

    #[test]
    fn zero_corruption_is_identity() {
        let c = ProjectionConfig::uniform(32, 256, 0.05, -0.4).unwrap();
        let scene = SceneSpec::random(11, &SceneParams::default()).unwrap();
        let pair = make_pair(&scene, &CorruptionSpec::none(), &c).unwrap();
        assert_eq!(pair.gt, pair.gen);
        assert!(pair.report.partitions(&pair.gt));
    }

    #[test]
    fn validate_rejects_inseparable_bias() {
        let mut spec = CorruptionSpec::default();
        spec.bias.shift_min = 0.4;
        spec.bias.shift_max = 1.0;
        assert!(spec.validate().is_err());
        spec = CorruptionSpec::default();
        spec.bleed.probability = 1.5;
        assert!(spec.validate().is_err());
        assert!(CorruptionSpec::default().validate().is_ok());
        assert!(CorruptionSpec::default().regimes_separated());
    }
}
