//! Set-level distribution metrics: BEV occupancy JSD and MMD, and the
//! distribution of range-image gradient norms.

use serde::{Deserialize, Serialize};

use crate::diffusion::spatial_grad;
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, RangeImage};

pub const BEV_VOXEL: f64 = 0.5;
pub const BEV_EXTENT: f64 = 40.0;

pub const GRAD_MIN: f64 = 0.3;
pub const GRAD_MAX: f64 = 10.0;
pub const GRAD_BINS: usize = 64;

/// Ground-plane occupancy over `[-extent, extent)²`, z accumulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BevHistogram {
    pub extent: f64,
    /// Bins per axis.
    pub bins: usize,
    /// `counts[ix * bins + iy]`.
    pub counts: Vec<u64>,
    /// `None` when no point fell inside the extent.
    pub normalized: Option<Vec<f64>>,
}

impl BevHistogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn count(&self, ix: usize, iy: usize) -> u64 {
        self.counts[ix * self.bins + iy]
    }
}

pub fn bev_bin(coord: f64, extent: f64, bins: usize) -> Option<usize> {
    let b = ((coord + extent) / BEV_VOXEL).floor();
    (b >= 0.0 && b < bins as f64).then_some(b as usize)
}

pub fn bev_histogram(cloud: &PointCloud, extent: f64) -> Result<BevHistogram> {
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::InvalidParam(format!("bev extent must be > 0, got {extent}")));
    }
    let bins = (2.0 * extent / BEV_VOXEL).ceil() as usize;
    let mut counts = vec![0u64; bins * bins];
    for p in cloud.points() {
        if let (Some(ix), Some(iy)) = (bev_bin(p[0], extent, bins), bev_bin(p[1], extent, bins)) {
            counts[ix * bins + iy] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let normalized = (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect());
    Ok(BevHistogram {
        extent,
        bins,
        counts,
        normalized,
    })
}

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::Domain(format!("{name} has negative or non-finite mass")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// Base-2 Jensen-Shannon divergence, in `[0, 1]`.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("{} bins vs {}", p.len(), q.len())));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        let term = |x: f64| if x > 0.0 { x * (x / m).log2() } else { 0.0 };
        // one sum per bin keeps jsd(p, q) and jsd(q, p) bit-identical
        acc += term(a) + term(b);
    }
    Ok((0.5 * acc).clamp(0.0, 1.0))
}

fn mean_bev(set: &[PointCloud], extent: f64, name: &str) -> Result<Vec<f64>> {
    if set.is_empty() {
        return Err(Error::Empty(format!("{name} is empty")));
    }
    let mut mean: Vec<f64> = Vec::new();
    for (i, cloud) in set.iter().enumerate() {
        let h = bev_histogram(cloud, extent)?;
        let p = h
            .normalized
            .ok_or_else(|| Error::Domain(format!("{name}[{i}] has no points inside the extent")))?;
        if mean.is_empty() {
            mean = vec![0.0; p.len()];
        }
        for (m, v) in mean.iter_mut().zip(&p) {
            *m += v;
        }
    }
    let n = set.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

/// JSD between the mean normalized BEV maps of two sets.
pub fn jsd_sets(a: &[PointCloud], b: &[PointCloud], extent: f64) -> Result<f64> {
    let pa = mean_bev(a, extent, "first set")?;
    let pb = mean_bev(b, extent, "second set")?;
    let (sa, sb): (f64, f64) = (pa.iter().sum(), pb.iter().sum());
    // renormalize the rounding of the mean
    let pa: Vec<f64> = pa.iter().map(|v| v / sa).collect();
    let pb: Vec<f64> = pb.iter().map(|v| v / sb).collect();
    jsd(&pa, &pb)
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over `gen` of the minimum squared distance to any of `gt`.
pub fn mmd_grids(gen: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    if gen.is_empty() || gt.is_empty() {
        return Err(Error::Empty("mmd needs nonempty sets".into()));
    }
    let len = gt[0].len();
    if gen.iter().chain(gt).any(|g| g.len() != len) {
        return Err(Error::Shape("grids of different sizes".into()));
    }
    let total: f64 = gen
        .iter()
        .map(|g| gt.iter().map(|t| squared_distance(g, t)).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(total / gen.len() as f64)
}

/// [`mmd_grids`] over normalized BEV maps.
pub fn mmd(gen: &[PointCloud], gt: &[PointCloud], extent: f64) -> Result<f64> {
    let maps = |set: &[PointCloud], name: &str| -> Result<Vec<Vec<f64>>> {
        set.iter()
            .enumerate()
            .map(|(i, c)| {
                bev_histogram(c, extent)?
                    .normalized
                    .ok_or_else(|| Error::Domain(format!("{name}[{i}] has no points inside the extent")))
            })
            .collect()
    };
    mmd_grids(&maps(gen, "generated")?, &maps(gt, "ground truth")?)
}

/// Log-spaced histogram of gradient norms in `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    /// Number of in-range gradients (the total weight before normalization).
    pub in_range: u64,
    /// Mean of the in-range gradient norms.
    pub mean: Option<f64>,
}

impl GradHistogram {
    pub fn empty(bins: usize, lo: f64, hi: f64) -> Result<Self> {
        if bins == 0 || !(lo > 0.0 && hi > lo) {
            return Err(Error::InvalidParam(format!(
                "need bins > 0 and 0 < lo < hi, got {bins}, {lo}, {hi}"
            )));
        }
        let ratio = (hi / lo).ln();
        let mut edges: Vec<f64> = (0..=bins).map(|i| lo * (ratio * i as f64 / bins as f64).exp()).collect();
        edges[0] = lo;
        edges[bins] = hi;
        Ok(Self {
            edges,
            counts: vec![0; bins],
            in_range: 0,
            mean: None,
        })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.in_range == 0
    }

    pub fn bin_of(&self, v: f64) -> Option<usize> {
        let (lo, hi) = (self.edges[0], self.edges[self.bins()]);
        if !(v >= lo && v <= hi) {
            return None;
        }
        let b = (self.bins() as f64 * (v / lo).ln() / (hi / lo).ln()).floor() as usize;
        Some(b.min(self.bins() - 1))
    }

    fn push_all(&mut self, values: impl IntoIterator<Item = f64>) {
        let mut sum = self.mean.unwrap_or(0.0) * self.in_range as f64;
        for v in values {
            if let Some(b) = self.bin_of(v) {
                self.counts[b] += 1;
                self.in_range += 1;
                sum += v;
            }
        }
        self.mean = (self.in_range > 0).then(|| sum / self.in_range as f64);
    }

    /// Normalized mass; `None` when flagged empty.
    pub fn mass(&self) -> Option<Vec<f64>> {
        (self.in_range > 0).then(|| {
            self.counts.iter().map(|&c| c as f64 / self.in_range as f64).collect()
        })
    }
}

pub fn grad_histogram_with(images: &[RangeImage], bins: usize, lo: f64, hi: f64) -> Result<GradHistogram> {
    if images.is_empty() {
        return Err(Error::Empty("no images for the gradient histogram".into()));
    }
    let mut h = GradHistogram::empty(bins, lo, hi)?;
    for img in images {
        h.push_all(spatial_grad(img).into_iter().flatten());
    }
    Ok(h)
}

pub fn grad_histogram(images: &[RangeImage]) -> Result<GradHistogram> {
    grad_histogram_with(images, GRAD_BINS, GRAD_MIN, GRAD_MAX)
}

pub fn grad_jsd(a: &GradHistogram, b: &GradHistogram) -> Result<f64> {
    if a.edges != b.edges {
        return Err(Error::Shape("gradient histograms use different bins".into()));
    }
    let pa = a.mass().ok_or_else(|| Error::Empty("first gradient histogram is empty".into()))?;
    let pb = b.mass().ok_or_else(|| Error::Empty("second gradient histogram is empty".into()))?;
    jsd(&pa, &pb)
}
