//! Welsch and squared losses over range-image residuals.
//!
//! Rectification moves each point along its own ray, so projecting the
//! rectified cloud back into the image changes only the depth at a fixed
//! pixel. The per-pixel residual is therefore `d_gen + s - d_gt`, and the
//! loss is a mean over pixels with a return in both images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RangeImage;

/// Width parameter of the Welsch function, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelschParams {
    pub nu: f64,
}

impl WelschParams {
    pub fn new(nu: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::InvalidParam(format!("welsch nu must be > 0, got {nu}")));
        }
        Ok(Self { nu })
    }
}

impl Default for WelschParams {
    fn default() -> Self {
        Self { nu: 0.5 }
    }
}

/// `1 - exp(-x² / 2ν²)`
#[inline]
pub fn welsch(x: f64, p: WelschParams) -> f64 {
    -(-x * x / (2.0 * p.nu * p.nu)).exp_m1()
}

/// `(x / ν²) exp(-x² / 2ν²)`
#[inline]
pub fn welsch_grad(x: f64, p: WelschParams) -> f64 {
    let v2 = p.nu * p.nu;
    x / v2 * (-x * x / (2.0 * v2)).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossKind {
    Welsch(WelschParams),
    Mse,
}

impl LossKind {
    #[inline]
    pub fn value(&self, r: f64) -> f64 {
        match self {
            LossKind::Welsch(p) => welsch(r, *p),
            LossKind::Mse => r * r,
        }
    }

    #[inline]
    pub fn deriv(&self, r: f64) -> f64 {
        match self {
            LossKind::Welsch(p) => welsch_grad(r, *p),
            LossKind::Mse => 2.0 * r,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Welsch(_) => "welsch",
            LossKind::Mse => "mse",
        }
    }
}

/// Pixels with a return in both images.
pub fn joint_mask(gen: &RangeImage, gt: &RangeImage) -> Result<Vec<usize>> {
    if gen.config() != gt.config() {
        return Err(Error::Shape(
            "generated and ground-truth images use different projections".into(),
        ));
    }
    let idx: Vec<usize> = gen
        .mask()
        .iter()
        .zip(gt.mask())
        .enumerate()
        .filter(|(_, (a, b))| **a && **b)
        .map(|(i, _)| i)
        .collect();
    if idx.is_empty() {
        return Err(Error::Domain("images share no returns".into()));
    }
    Ok(idx)
}

fn check_len(s: &[f64], gen: &RangeImage) -> Result<()> {
    if s.len() != gen.depths().len() {
        return Err(Error::Shape(format!(
            "{} radial magnitudes for {} pixels",
            s.len(),
            gen.depths().len()
        )));
    }
    Ok(())
}

/// Mean of `loss(d_gen + s - d_gt)` over the joint mask.
pub fn pixel_loss(s: &[f64], gen: &RangeImage, gt: &RangeImage, loss: LossKind) -> Result<f64> {
    check_len(s, gen)?;
    let idx = joint_mask(gen, gt)?;
    let (dg, dt) = (gen.depths(), gt.depths());
    let total: f64 = idx.iter().map(|&i| loss.value(dg[i] + s[i] - dt[i])).sum();
    Ok(total / idx.len() as f64)
}

/// Per-pixel `∂L/∂s`; zero off the joint mask.
pub fn pixel_loss_grad(
    s: &[f64],
    gen: &RangeImage,
    gt: &RangeImage,
    loss: LossKind,
) -> Result<Vec<f64>> {
    check_len(s, gen)?;
    let idx = joint_mask(gen, gt)?;
    let m = idx.len() as f64;
    let (dg, dt) = (gen.depths(), gt.depths());
    let mut g = vec![0.0; s.len()];
    for i in idx {
        g[i] = loss.deriv(dg[i] + s[i] - dt[i]) / m;
    }
    Ok(g)
}

pub fn rrn_loss(s: &[f64], gen: &RangeImage, gt: &RangeImage, p: WelschParams) -> Result<f64> {
    pixel_loss(s, gen, gt, LossKind::Welsch(p))
}

pub fn rrn_loss_grad(
    s: &[f64],
    gen: &RangeImage,
    gt: &RangeImage,
    p: WelschParams,
) -> Result<Vec<f64>> {
    pixel_loss_grad(s, gen, gt, LossKind::Welsch(p))
}

pub fn mse_loss(s: &[f64], gen: &RangeImage, gt: &RangeImage) -> Result<f64> {
    pixel_loss(s, gen, gt, LossKind::Mse)
}

pub fn mse_loss_grad(s: &[f64], gen: &RangeImage, gt: &RangeImage) -> Result<Vec<f64>> {
    pixel_loss_grad(s, gen, gt, LossKind::Mse)
}
