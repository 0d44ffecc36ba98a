//! TOML run configuration. Every section is optional; unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [projection]
//! height = 64
//! width = 1024
//! fov_up_deg = 3.0
//! fov_down_deg = -25.0
//! # elevations_deg = [2.0, 1.5, ...]   # per-row table, top row first, overrides the fov
//!
//! [training]
//! loss = "welsch"
//! nu = 0.5
//! ```
//!
//! The remaining sections are `scene`, `corruption`, `metrics` and `diffusion`.
//! All randomness derives from the root `seed` via [`derive_seed`].

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{make_schedule, splitmix64, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::ProjectionConfig;
use crate::metrics::{BEV_EXTENT, GRAD_BINS, GRAD_MAX, GRAD_MIN};
use crate::rectify::{FeatureSchema, LossKind, ModelKind, TrainHyper, WelschParams};
use crate::scene::{CorruptionSpec, SceneParams};

pub const CONFIG_ECHO: &str = "run_config.toml";

/// ν values visited by the sweep, meters.
pub const NU_GRID: [f64; 5] = [0.01, 0.05, 0.1, 0.5, 1.0];

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub projection: ProjectionSection,
    pub scene: SceneParams,
    /// `rng_seed` must stay 0 here; per-frame seeds come from the root seed.
    pub corruption: CorruptionSpec,
    pub training: TrainingSection,
    pub metrics: MetricsSection,
    pub diffusion: DiffusionSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionSection {
    pub height: usize,
    pub width: usize,
    pub fov_up_deg: f64,
    pub fov_down_deg: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elevations_deg: Option<Vec<f64>>,
}

impl Default for ProjectionSection {
    fn default() -> Self {
        Self {
            height: 64,
            width: 1024,
            fov_up_deg: 3.0,
            fov_down_deg: -25.0,
            elevations_deg: None,
        }
    }
}

impl ProjectionSection {
    pub fn to_config(&self) -> Result<ProjectionConfig> {
        match &self.elevations_deg {
            Some(t) => {
                if t.len() != self.height {
                    return Err(Error::Config(format!(
                        "projection.height {} differs from the {} table rows",
                        self.height,
                        t.len()
                    )));
                }
                ProjectionConfig::table(self.width, t.iter().map(|d| d.to_radians()).collect())
            }
            None => ProjectionConfig::uniform(
                self.height,
                self.width,
                self.fov_up_deg.to_radians(),
                self.fov_down_deg.to_radians(),
            ),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Welsch,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub loss: LossName,
    pub nu: f64,
    pub kind: ModelKind,
    pub hidden: usize,
    pub radius: usize,
    pub edge_cutoff: f64,
    pub epochs: usize,
    pub step: f64,
    pub decay: f64,
    /// Scenes synthesized when `train` or `nu-sweep` get no input directories.
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let h = TrainHyper::default();
        Self {
            loss: LossName::Welsch,
            nu: 0.5,
            kind: h.kind,
            hidden: h.hidden,
            radius: h.schema.radius,
            edge_cutoff: h.schema.edge_cutoff,
            epochs: h.epochs,
            step: h.step,
            decay: h.decay,
            train_scenes: 4,
            eval_scenes: 20,
        }
    }
}

impl TrainingSection {
    pub fn loss_kind(&self) -> Result<LossKind> {
        Ok(match self.loss {
            LossName::Welsch => LossKind::Welsch(WelschParams::new(self.nu)?),
            LossName::Mse => LossKind::Mse,
        })
    }

    pub fn hyper(&self, seed: u64) -> TrainHyper {
        TrainHyper {
            kind: self.kind,
            hidden: self.hidden,
            schema: FeatureSchema {
                radius: self.radius,
                edge_cutoff: self.edge_cutoff,
            },
            epochs: self.epochs,
            step: self.step,
            decay: self.decay,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    /// Half-width of the BEV grid, meters.
    pub bev_extent: f64,
    pub grad_bins: usize,
    pub grad_min: f64,
    pub grad_max: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            bev_extent: BEV_EXTENT,
            grad_bins: GRAD_BINS,
            grad_min: GRAD_MIN,
            grad_max: GRAD_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub trials: usize,
    pub height: usize,
    pub width: usize,
    pub identity_scales: Vec<f64>,
    /// Gain applied to the 5-tap binomial kernel predictor.
    pub kernel_scale: f64,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        Self {
            steps: crate::diffusion::DEFAULT_STEPS,
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: crate::diffusion::DEFAULT_BETA_END,
            trials: 200,
            height: 16,
            width: 128,
            identity_scales: vec![0.5, 1.0],
            kernel_scale: 1.0,
        }
    }
}

impl DiffusionSection {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }
}

/// Independent seed streams derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Scene,
    Corruption,
    Training,
    TrainScene,
    EvalScene,
    Diffusion,
}

impl Stream {
    fn salt(self) -> u64 {
        match self {
            Stream::Scene => 0x5c3e_0001,
            Stream::Corruption => 0x5c3e_0002,
            Stream::Training => 0x5c3e_0003,
            Stream::TrainScene => 0x5c3e_0004,
            Stream::EvalScene => 0x5c3e_0005,
            Stream::Diffusion => 0x5c3e_0006,
        }
    }
}

pub fn derive_seed(root: u64, stream: Stream, index: u64) -> u64 {
    splitmix64(splitmix64(root ^ stream.salt()) ^ index)
}

/// FNV-1a, used to key per-frame seeds by file stem.
pub fn name_key(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the effective config as `run_config.toml` in `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, self.to_toml()).map_err(|e| Error::file(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.to_config()?;
        if self.corruption.rng_seed != 0 {
            return Err(Error::Config(
                "corruption.rng_seed is derived from the root seed; set `seed` instead".into(),
            ));
        }
        self.corruption.validate()?;
        if !(self.scene.max_range > 12.0) {
            return Err(Error::Config(format!("scene.max_range {} too small", self.scene.max_range)));
        }
        let t = &self.training;
        t.loss_kind()?;
        positive("training.step", t.step)?;
        positive("training.decay", t.decay)?;
        positive("training.edge_cutoff", t.edge_cutoff)?;
        t.hyper(0).validate()?;
        if t.train_scenes == 0 || t.eval_scenes == 0 {
            return Err(Error::Config("training scene counts must be at least 1".into()));
        }
        let m = &self.metrics;
        positive("metrics.bev_extent", m.bev_extent)?;
        positive("metrics.grad_min", m.grad_min)?;
        if m.grad_bins == 0 || !(m.grad_max > m.grad_min) {
            return Err(Error::Config("metrics gradient bins must be non-empty and ordered".into()));
        }
        let d = &self.diffusion;
        d.schedule()?;
        if d.trials == 0 || d.height < 2 || d.width < 2 {
            return Err(Error::Config("diffusion needs trials > 0 and a grid of at least 2x2".into()));
        }
        if !d.kernel_scale.is_finite() || d.identity_scales.iter().any(|c| !c.is_finite()) {
            return Err(Error::Config("diffusion predictor gains must be finite".into()));
        }
        Ok(())
    }
}
