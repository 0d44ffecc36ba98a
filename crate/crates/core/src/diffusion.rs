//! DDIM sampling with pluggable noise predictors and an empirical check of the
//! spatial-Lipschitz bound on sampled images.
//!
//! With `ᾱ` the cumulative schedule product, one deterministic step is
//!
//! ```text
//! x̂_0     = (x_t - sqrt(1 - ᾱ_t) ε) / sqrt(ᾱ_t)
//! x_{t-1} = sqrt(ᾱ_{t-1}) x̂_0 + sqrt(1 - ᾱ_{t-1}) ε  =  a_t x_t + b_t ε
//! ```
//!
//! If `ε` never amplifies spatial differences by more than `L_θ[t]`, one step
//! amplifies them by at most `a_t + |b_t| L_θ[t]`, and the sampler by the product.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RangeImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    /// `beta[t - 1]` is `β_t` for `t = 1..=T`.
    pub beta: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`; `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

/// Linearly spaced `β` from `beta_start` to `beta_end`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidParam("schedule needs at least one step".into()));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParam(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for b in &beta {
        let prev = *alpha_bar.last().unwrap();
        alpha_bar.push(prev * (1.0 - b));
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).unwrap()
    }
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `(a_t, b_t)` with `x_{t-1} = a_t x_t + b_t ε`.
    pub fn step_coefficients(&self, t: usize) -> (f64, f64) {
        let (ab, prev) = (self.alpha_bar[t], self.alpha_bar[t - 1]);
        let a = (prev / ab).sqrt();
        let b = (1.0 - prev).sqrt() - prev.sqrt() * (1.0 - ab).sqrt() / ab.sqrt();
        (a, b)
    }
}

/// Row-major image without a mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn gaussian(height: usize, width: usize, rng: &mut impl rand::Rng) -> Self {
        let data = (0..height * width).map(|_| StandardNormal.sample(rng)).collect();
        Self {
            height,
            width,
            data,
        }
    }

    fn same_shape(&self, other: &Grid) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub t: usize,
    pub x: Grid,
}

pub fn forward_sample(x0: &Grid, t: usize, noise: &Grid, schedule: &NoiseSchedule) -> Result<Grid> {
    if t > schedule.steps() {
        return Err(Error::InvalidParam(format!(
            "t = {t} outside 0..={}",
            schedule.steps()
        )));
    }
    x0.same_shape(noise)?;
    let ab = schedule.alpha_bar[t];
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0.data.iter().zip(&noise.data).map(|(x, n)| sa * x + sn * n).collect();
    Ok(Grid {
        data,
        ..x0.clone()
    })
}

/// Noise predictor `ε_θ(x_t, t)`.
pub trait EpsilonPredictor {
    fn predict(&self, x: &Grid, t: usize) -> Grid;

    /// Bound on `max ‖∇ε‖ / max ‖∇x‖` at step `t`, if one is known.
    fn spatial_lipschitz(&self, t: usize) -> Option<f64>;

    fn name(&self) -> String;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl EpsilonPredictor for ZeroPredictor {
    fn predict(&self, x: &Grid, _t: usize) -> Grid {
        Grid::zeros(x.height, x.width)
    }

    fn spatial_lipschitz(&self, _t: usize) -> Option<f64> {
        Some(0.0)
    }

    fn name(&self) -> String {
        "zero".into()
    }
}

/// `ε = c · x`.
#[derive(Debug, Clone, Copy)]
pub struct ScaledIdentity {
    pub c: f64,
}

impl EpsilonPredictor for ScaledIdentity {
    fn predict(&self, x: &Grid, _t: usize) -> Grid {
        Grid {
            data: x.data.iter().map(|v| self.c * v).collect(),
            ..x.clone()
        }
    }

    fn spatial_lipschitz(&self, _t: usize) -> Option<f64> {
        Some(self.c.abs())
    }

    fn name(&self) -> String {
        format!("scaled-identity(c={})", self.c)
    }
}

/// Circular convolution along azimuth with a fixed centred kernel, applied
/// to each row. Commutes with both difference operators, so its gain on
/// gradient fields is at most `‖k‖₁`.
#[derive(Debug, Clone)]
pub struct CircularKernel {
    pub kernel: Vec<f64>,
}

impl CircularKernel {
    pub fn new(kernel: Vec<f64>) -> Result<Self> {
        if kernel.is_empty() || kernel.len() % 2 == 0 {
            return Err(Error::InvalidParam("kernel length must be odd".into()));
        }
        if kernel.iter().any(|k| !k.is_finite()) {
            return Err(Error::InvalidParam("kernel must be finite".into()));
        }
        Ok(Self { kernel })
    }

    /// Normalized binomial smoother `[1, 4, 6, 4, 1] / 16` scaled by `scale`.
    pub fn binomial5(scale: f64) -> Self {
        Self {
            kernel: [1.0, 4.0, 6.0, 4.0, 1.0].iter().map(|k| scale * k / 16.0).collect(),
        }
    }
}

impl EpsilonPredictor for CircularKernel {
    fn predict(&self, x: &Grid, _t: usize) -> Grid {
        let (h, w) = (x.height, x.width);
        let half = self.kernel.len() / 2;
        let mut out = vec![0.0; h * w];
        for r in 0..h {
            let row = &x.data[r * w..(r + 1) * w];
            for c in 0..w {
                let mut acc = 0.0;
                for (j, k) in self.kernel.iter().enumerate() {
                    let src = (c + w * (half + 1) + j - half) % w;
                    acc += k * row[src];
                }
                out[r * w + c] = acc;
            }
        }
        Grid {
            height: h,
            width: w,
            data: out,
        }
    }

    fn spatial_lipschitz(&self, _t: usize) -> Option<f64> {
        Some(self.kernel.iter().map(|k| k.abs()).sum())
    }

    fn name(&self) -> String {
        format!("circular-kernel({:?})", self.kernel)
    }
}

/// Returns the noise that produced `x_t` from a known `x_0`.
#[derive(Debug, Clone)]
pub struct OraclePredictor {
    pub x0: Grid,
    pub schedule: NoiseSchedule,
}

impl EpsilonPredictor for OraclePredictor {
    fn predict(&self, x: &Grid, t: usize) -> Grid {
        let ab = self.schedule.alpha_bar[t];
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Grid {
            data: x.data.iter().zip(&self.x0.data).map(|(xt, x0)| (xt - sa * x0) / sn).collect(),
            ..x.clone()
        }
    }

    fn spatial_lipschitz(&self, _t: usize) -> Option<f64> {
        None
    }

    fn name(&self) -> String {
        "oracle".into()
    }
}

/// `x̂_0` implied by `x_t` and a noise estimate.
pub fn predict_x0(x_t: &Grid, eps: &Grid, t: usize, schedule: &NoiseSchedule) -> Grid {
    let ab = schedule.alpha_bar[t];
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    Grid {
        data: x_t.data.iter().zip(&eps.data).map(|(x, e)| (x - sn * e) / sa).collect(),
        ..x_t.clone()
    }
}

pub fn ddim_step(
    x_t: &Grid,
    t: usize,
    predictor: &dyn EpsilonPredictor,
    schedule: &NoiseSchedule,
) -> Result<Grid> {
    if t == 0 || t > schedule.steps() {
        return Err(Error::InvalidParam(format!(
            "ddim step t = {t} outside 1..={}",
            schedule.steps()
        )));
    }
    let eps = predictor.predict(x_t, t);
    x_t.same_shape(&eps)?;
    let x0 = predict_x0(x_t, &eps, t, schedule);
    let prev = schedule.alpha_bar[t - 1];
    let (sa, sn) = (prev.sqrt(), (1.0 - prev).sqrt());
    Ok(Grid {
        data: x0.data.iter().zip(&eps.data).map(|(x, e)| sa * x + sn * e).collect(),
        ..x0
    })
}

pub fn ddim_sample(
    x_t: &Grid,
    predictor: &dyn EpsilonPredictor,
    schedule: &NoiseSchedule,
) -> Result<Grid> {
    let mut state = DiffusionState {
        t: schedule.steps(),
        x: x_t.clone(),
    };
    while state.t > 0 {
        state.x = ddim_step(&state.x, state.t, predictor, schedule)?;
        state.t -= 1;
    }
    Ok(state.x)
}

/// Per-pixel `‖∇x‖` from forward differences; azimuth wraps, elevation does
/// not. A difference is used only when both pixels are valid. `None` where
/// the pixel is invalid or has no usable neighbour.
pub fn spatial_grad_grid(grid: &Grid, mask: Option<&[bool]>) -> Vec<Option<f64>> {
    let (h, w) = (grid.height, grid.width);
    let ok = |i: usize| mask.is_none_or(|m| m[i]);
    let d = &grid.data;
    let mut out = vec![None; h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            if !ok(i) {
                continue;
            }
            let right = r * w + (c + 1) % w;
            let gh = (w > 1 && ok(right)).then(|| d[right] - d[i]);
            let gv = (r + 1 < h && ok(i + w)).then(|| d[i + w] - d[i]);
            out[i] = match (gh, gv) {
                (None, None) => None,
                (a, b) => Some(a.unwrap_or(0.0).hypot(b.unwrap_or(0.0))),
            };
        }
    }
    out
}

/// Gradient norms over the mask of a range image, in meters.
pub fn spatial_grad(image: &RangeImage) -> Vec<Option<f64>> {
    let grid = Grid {
        height: image.height(),
        width: image.width(),
        data: image.depths().to_vec(),
    };
    spatial_grad_grid(&grid, Some(image.mask()))
}

pub fn max_grad(norms: &[Option<f64>]) -> f64 {
    norms.iter().flatten().fold(0.0, |m: f64, v| m.max(*v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub predictor: String,
    /// `a_t = sqrt(ᾱ_{t-1} / ᾱ_t)`, the gain on the `x_t` path.
    pub l_eps: Vec<f64>,
    /// `|b_t|`, the gain on the `ε` path.
    pub eps_coeff: Vec<f64>,
    pub l_theta: Vec<f64>,
    /// `a_t + |b_t| L_θ[t]`.
    pub per_step: Vec<f64>,
    pub bound: f64,
}

/// Index `i` of each vector is step `t = i + 1`.
pub fn lipschitz_bound(
    predictor: &dyn EpsilonPredictor,
    schedule: &NoiseSchedule,
) -> Result<LipschitzReport> {
    let steps = schedule.steps();
    let mut r = LipschitzReport {
        predictor: predictor.name(),
        l_eps: Vec::with_capacity(steps),
        eps_coeff: Vec::with_capacity(steps),
        l_theta: Vec::with_capacity(steps),
        per_step: Vec::with_capacity(steps),
        bound: 1.0,
    };
    for t in 1..=steps {
        let l = predictor.spatial_lipschitz(t).ok_or_else(|| {
            Error::InvalidParam(format!("{} declares no Lipschitz constant", predictor.name()))
        })?;
        let (a, b) = schedule.step_coefficients(t);
        let s = a + b.abs() * l;
        r.l_eps.push(a);
        r.eps_coeff.push(b.abs());
        r.l_theta.push(l);
        r.per_step.push(s);
        r.bound *= s;
    }
    Ok(r)
}

/// Per-trial seed from the root seed.
pub fn splitmix64(state: u64) -> u64 {
    let mut z = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn trial_seed(root: u64, trial: usize) -> u64 {
    splitmix64(root ^ splitmix64(trial as u64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub predictor: String,
    pub trials: usize,
    pub height: usize,
    pub width: usize,
    pub bound: f64,
    /// `max ‖∇x_0‖ / max ‖∇x_T‖` per trial.
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
    pub max_ratio_over_bound: f64,
    /// Seeds of trials exceeding the bound.
    pub violations: Vec<u64>,
}

impl BoundCheck {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Relative slack allowed for rounding when comparing against the bound.
pub const BOUND_RTOL: f64 = 1e-12;

pub fn verify_lipschitz_bound(
    predictor: &dyn EpsilonPredictor,
    schedule: &NoiseSchedule,
    trials: usize,
    shape: (usize, usize),
    rng_seed: u64,
) -> Result<BoundCheck> {
    let lip = lipschitz_bound(predictor, schedule)?;
    let (h, w) = shape;
    let mut report = BoundCheck {
        predictor: predictor.name(),
        trials,
        height: h,
        width: w,
        bound: lip.bound,
        ratios: Vec::with_capacity(trials),
        max_ratio: 0.0,
        max_ratio_over_bound: 0.0,
        violations: Vec::new(),
    };
    for trial in 0..trials {
        let seed = trial_seed(rng_seed, trial);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_t = Grid::gaussian(h, w, &mut rng);
        let x0 = ddim_sample(&x_t, predictor, schedule)?;
        let g_in = max_grad(&spatial_grad_grid(&x_t, None));
        let g_out = max_grad(&spatial_grad_grid(&x0, None));
        let ratio = if g_in > 0.0 { g_out / g_in } else { 0.0 };
        if g_out > lip.bound * g_in * (1.0 + BOUND_RTOL) {
            report.violations.push(seed);
        }
        report.max_ratio = report.max_ratio.max(ratio);
        report.ratios.push(ratio);
    }
    report.max_ratio_over_bound = report.max_ratio / lip.bound;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharpnessReport {
    pub smooth_max: f64,
    pub smooth_mean: f64,
    pub rectified_max: f64,
    pub rectified_mean: f64,
    /// `rectified_max - smooth_max`.
    pub contrast: f64,
    pub rectified_sharper: bool,
}

fn grad_stats(images: &[RangeImage]) -> (f64, f64) {
    let (mut max, mut sum, mut n) = (0.0f64, 0.0, 0usize);
    for img in images {
        for g in spatial_grad(img).into_iter().flatten() {
            max = max.max(g);
            sum += g;
            n += 1;
        }
    }
    (max, if n > 0 { sum / n as f64 } else { 0.0 })
}

pub fn contrast_3d_sharpness(smooth: &[RangeImage], rectified: &[RangeImage]) -> Result<SharpnessReport> {
    if smooth.len() != rectified.len() {
        return Err(Error::Shape(format!(
            "{} smooth images vs {} rectified",
            smooth.len(),
            rectified.len()
        )));
    }
    for (a, b) in smooth.iter().zip(rectified) {
        if a.config() != b.config() {
            return Err(Error::Shape("image sets use different projections".into()));
        }
    }
    let (smooth_max, smooth_mean) = grad_stats(smooth);
    let (rectified_max, rectified_mean) = grad_stats(rectified);
    Ok(SharpnessReport {
        smooth_max,
        smooth_mean,
        rectified_max,
        rectified_mean,
        contrast: rectified_max - smooth_max,
        rectified_sharper: rectified_max > smooth_max,
    })
}

/// Horizontal Gaussian blur over masked pixels (unmasked pixels stay empty).
pub fn blur_horizontal(image: &RangeImage, sigma: f64) -> RangeImage {
    let (h, w) = (image.height(), image.width());
    let rad = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-rad..=rad)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut out = image.clone();
    for r in 0..h {
        for c in 0..w {
            if !image.is_masked(r, c) {
                continue;
            }
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (j, k) in (-rad..=rad).enumerate() {
                let cc = (c as isize + k).rem_euclid(w as isize) as usize;
                if image.is_masked(r, cc) {
                    acc += weights[j] * image.depth(r, cc);
                    wsum += weights[j];
                }
            }
            out.set(r, c, acc / wsum);
        }
    }
    out
}
