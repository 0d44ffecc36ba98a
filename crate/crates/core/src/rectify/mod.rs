//! Robust radial rectification: losses, features, regressors, training and
//! the inference pipeline.

pub mod features;
pub mod loss;
pub mod model;
pub mod train;

use serde::{Deserialize, Serialize};

pub use features::{extract_features, FeatureGrid, FeatureSchema};
pub use loss::{
    mse_loss, mse_loss_grad, rrn_loss, rrn_loss_grad, welsch, welsch_grad, LossKind, WelschParams,
};
pub use model::{ModelKind, Network, Regressor};
pub use train::{train_regressor, TrainHyper, TrainPair, TrainReport, TrainingSet};

use crate::error::{Error, Result};
use crate::geometry::{apply_offsets, rrvp, rvp, OffsetField, PointCloud, RangeImage};
use crate::scene::{CorruptionReport, Label};

/// Applies the regressor to `image`. The returned image is the projection of
/// the returned cloud, so both agree pixel for pixel.
pub fn rectify(image: &RangeImage, model: &Regressor) -> Result<(RangeImage, PointCloud)> {
    let grid = extract_features(image, model.schema);
    let s = model.predict(&grid)?;
    let (cloud, map) = rrvp(image);
    if cloud.is_empty() {
        return Ok((image.clone(), cloud));
    }
    let signed: Vec<f64> = map
        .pixel_of_point
        .iter()
        .map(|px| {
            let (r, c) = px.expect("back-projection maps every point");
            s[r * image.width() + c]
        })
        .collect();
    let field = OffsetField::from_signed(&cloud, signed)?;
    let moved = apply_offsets(&cloud, &field)?;
    let (out, out_map) = rvp(&moved.cloud, image.config())?;
    if out_map.dropped() != 0 || out.mask() != image.mask() {
        return Err(Error::Domain("radial offsets moved a point off its pixel".into()));
    }
    Ok((out, moved.cloud))
}

/// Running sum of squared residuals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RmseAcc {
    pub sum_sq: f64,
    pub count: usize,
}

impl RmseAcc {
    pub fn push(&mut self, r: f64) {
        self.sum_sq += r * r;
        self.count += 1;
    }

    pub fn add(&mut self, other: &RmseAcc) {
        self.sum_sq += other.sum_sq;
        self.count += other.count;
    }

    pub fn rmse(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.sum_sq / self.count as f64).sqrt())
    }
}

/// Depth RMSE against ground truth, split by corruption label.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelRmse {
    pub clean: RmseAcc,
    pub variance_artifact: RmseAcc,
    pub bias_region: RmseAcc,
}

impl LabelRmse {
    pub fn accumulate(&mut self, other: &LabelRmse) {
        self.clean.add(&other.clean);
        self.variance_artifact.add(&other.variance_artifact);
        self.bias_region.add(&other.bias_region);
    }

    pub fn all(&self) -> RmseAcc {
        let mut a = self.clean;
        a.add(&self.variance_artifact);
        a.add(&self.bias_region);
        a
    }
}

/// Residuals `image - gt` over jointly masked pixels, grouped by `report`'s labels.
pub fn label_rmse(image: &RangeImage, gt: &RangeImage, report: &CorruptionReport) -> Result<LabelRmse> {
    if report.labels.len() != image.depths().len() {
        return Err(Error::Shape("report does not match image size".into()));
    }
    let idx = loss::joint_mask(image, gt)?;
    let mut out = LabelRmse::default();
    let (d, t) = (image.depths(), gt.depths());
    for i in idx {
        let r = d[i] - t[i];
        match report.labels[i] {
            Label::Clean => out.clean.push(r),
            Label::VarianceArtifact => out.variance_artifact.push(r),
            Label::BiasRegion => out.bias_region.push(r),
            Label::NoReturn => {}
        }
    }
    Ok(out)
}
