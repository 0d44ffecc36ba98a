//! Full-batch gradient descent for the radial regressor.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{extract_features, FeatureSchema};
use super::loss::{joint_mask, LossKind};
use super::model::{ModelKind, Regressor};
use super::{label_rmse, LabelRmse};
use crate::error::{Error, Result};
use crate::geometry::RangeImage;
use crate::scene::{CorruptionReport, Pair};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub kind: ModelKind,
    pub hidden: usize,
    pub schema: FeatureSchema,
    pub epochs: usize,
    pub step: f64,
    /// Multiplies the step after every epoch.
    pub decay: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            kind: ModelKind::Linear,
            hidden: 16,
            schema: FeatureSchema::default(),
            epochs: 500,
            step: 0.05,
            decay: 0.999,
            seed: 0,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.kind == ModelKind::Mlp && self.hidden == 0 {
            return Err(Error::InvalidParam("mlp needs at least one hidden unit".into()));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::InvalidParam(format!("step must be > 0, got {}", self.step)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidParam(format!("decay must be in (0, 1], got {}", self.decay)));
        }
        if !(self.schema.edge_cutoff > 0.0) {
            return Err(Error::InvalidParam("edge_cutoff must be > 0".into()));
        }
        Ok(())
    }
}

/// One training example: generated image, target, and optionally its labels.
#[derive(Debug, Clone, Copy)]
pub struct TrainPair<'a> {
    pub gen: &'a RangeImage,
    pub gt: &'a RangeImage,
    pub report: Option<&'a CorruptionReport>,
}

impl<'a> From<&'a Pair> for TrainPair<'a> {
    fn from(p: &'a Pair) -> Self {
        Self {
            gen: &p.gen,
            gt: &p.gt,
            report: Some(&p.report),
        }
    }
}

impl<'a> From<&'a (RangeImage, RangeImage)> for TrainPair<'a> {
    fn from(p: &'a (RangeImage, RangeImage)) -> Self {
        Self {
            gen: &p.0,
            gt: &p.1,
            report: None,
        }
    }
}

/// Jointly masked pixels of all pairs, pooled. Pixels without valid features
/// keep `s = 0` and contribute a constant to the loss.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub schema: FeatureSchema,
    /// Raw feature rows of pixels with valid features.
    pub features: Vec<f64>,
    /// `d_gen - d_gt` for those pixels.
    pub residuals: Vec<f64>,
    /// `d_gen - d_gt` for jointly masked pixels without valid features.
    pub fixed_residuals: Vec<f64>,
}

impl TrainingSet {
    pub fn build(pairs: &[TrainPair<'_>], schema: FeatureSchema) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty("no training pairs".into()));
        }
        let cfg = pairs[0].gen.config();
        let n = schema.len();
        let mut set = Self {
            schema,
            features: Vec::new(),
            residuals: Vec::new(),
            fixed_residuals: Vec::new(),
        };
        for p in pairs {
            if p.gen.config() != cfg {
                return Err(Error::Shape("training pairs use different projections".into()));
            }
            let idx = joint_mask(p.gen, p.gt)?;
            let grid = extract_features(p.gen, schema);
            let (dg, dt) = (p.gen.depths(), p.gt.depths());
            for i in idx {
                let r = dg[i] - dt[i];
                if grid.is_valid(i) {
                    set.features.extend_from_slice(grid.get(i));
                    set.residuals.push(r);
                } else {
                    set.fixed_residuals.push(r);
                }
            }
        }
        debug_assert_eq!(set.features.len(), set.residuals.len() * n);
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.residuals.len() + self.fixed_residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-feature mean and standard deviation over valid rows; a constant
    /// feature gets std 1.
    pub fn standardization(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.schema.len();
        let rows = self.residuals.len();
        let mut mean = vec![0.0; n];
        let mut std = vec![1.0; n];
        if rows == 0 {
            return (mean, std);
        }
        for row in self.features.chunks_exact(n) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; n];
        for row in self.features.chunks_exact(n) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        for (s, v) in std.iter_mut().zip(&var) {
            let sd = (v / rows as f64).sqrt();
            if sd > 1e-12 {
                *s = sd;
            }
        }
        (mean, std)
    }

    /// Mean loss over all pooled pixels and its gradient in parameter order.
    pub fn loss_and_grad(&self, model: &Regressor, loss: LossKind) -> (f64, Vec<f64>) {
        let n = self.schema.len();
        let m = self.len() as f64;
        let mut grad = vec![0.0; model.n_params()];
        let mut z = vec![0.0; n];
        let mut total: f64 = self.fixed_residuals.iter().map(|&r| loss.value(r)).sum();
        for (row, &r) in self.features.chunks_exact(n).zip(&self.residuals) {
            model.standardize(row, &mut z);
            let s = model.forward(&z);
            let e = r + s;
            total += loss.value(e);
            let up = loss.deriv(e) / m;
            if up != 0.0 {
                model.forward_backward(&z, up, &mut grad);
            }
        }
        (total / m, grad)
    }

    pub fn loss(&self, model: &Regressor, loss: LossKind) -> f64 {
        let n = self.schema.len();
        let mut z = vec![0.0; n];
        let mut total: f64 = self.fixed_residuals.iter().map(|&r| loss.value(r)).sum();
        for (row, &r) in self.features.chunks_exact(n).zip(&self.residuals) {
            model.standardize(row, &mut z);
            total += loss.value(r + model.forward(&z));
        }
        total / self.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss: String,
    /// Loss before each update, one entry per epoch.
    pub loss_trace: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub final_loss: f64,
    /// Pooled over the pairs that carry labels, after rectification.
    pub rmse_by_label: Option<LabelRmse>,
}

pub fn train_regressor(
    pairs: &[TrainPair<'_>],
    loss: LossKind,
    hyper: &TrainHyper,
) -> Result<(Regressor, TrainReport)> {
    hyper.validate()?;
    let set = TrainingSet::build(pairs, hyper.schema)?;
    let (mean, std) = set.standardization();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut model = Regressor::init(hyper.schema, hyper.kind, hyper.hidden, mean, std, &mut rng);
    let mut params = model.params();
    let mut step = hyper.step;
    let mut loss_trace = Vec::with_capacity(hyper.epochs);
    let mut grad_norms = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let (value, grad) = set.loss_and_grad(&model, loss);
        let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !value.is_finite() || !gnorm.is_finite() {
            return Err(Error::Divergence { epoch, loss: value });
        }
        loss_trace.push(value);
        grad_norms.push(gnorm);
        for (p, g) in params.iter_mut().zip(&grad) {
            *p -= step * g;
        }
        model.set_params(&params);
        step *= hyper.decay;
    }
    let final_loss = set.loss(&model, loss);
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            epoch: hyper.epochs,
            loss: final_loss,
        });
    }
    let labelled: Vec<_> = pairs.iter().filter(|p| p.report.is_some()).collect();
    let rmse_by_label = if labelled.is_empty() {
        None
    } else {
        let mut acc = LabelRmse::default();
        for p in labelled {
            let (rect, _) = super::rectify(p.gen, &model)?;
            acc.accumulate(&label_rmse(&rect, p.gt, p.report.unwrap())?);
        }
        Some(acc)
    };
    Ok((
        model,
        TrainReport {
            loss: loss.name().into(),
            loss_trace,
            grad_norms,
            final_loss,
            rmse_by_label,
        },
    ))
}
