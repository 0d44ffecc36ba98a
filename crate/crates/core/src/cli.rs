//! Batch command line. Each subcommand loads a [`RunConfig`], writes its
//! artifacts, echoes the effective config as `run_config.toml` next to them and
//! appends one report record per result (by default to `report.jsonl` in the
//! output directory).
//!
//! Exit codes: 0 success, 1 runtime error, 2 validation or configuration
//! failure, 64 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{derive_seed, name_key, LossName, RunConfig, Stream, NU_GRID};
use crate::diffusion::{
    verify_lipschitz_bound, CircularKernel, EpsilonPredictor, ScaledIdentity, ZeroPredictor,
};
use crate::error::{Error, Result};
use crate::geometry::{rrvp, rvp, PointCloud, RangeImage};
use crate::io;
use crate::metrics::{grad_histogram_with, grad_jsd, jsd_sets, mmd, GradHistogram};
use crate::rectify::{label_rmse, rectify, train_regressor, LabelRmse, LossKind, TrainPair, WelschParams};
use crate::report::{Record, ReportWriter};
use crate::scene::{corrupt, make_pair, synth_scene, CorruptionReport, Label, Pair, SceneSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

pub const REPORT_FILE: &str = "report.jsonl";

#[derive(Debug, Parser)]
#[command(name = "rvrect", version, about = "Range-view LiDAR synthesis, rectification and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the root seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Report file to append to (default: report.jsonl in the output directory).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Do not echo report records to stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Welsch,
    Mse,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render clean range images of procedural scenes.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        frames: usize,
        /// A `.rvimg` file, or a directory that receives `0000.rvimg`, `0001.rvimg`, ...
        #[arg(long)]
        out: PathBuf,
    },
    /// Inject artifacts; writes `<name>.rvimg` plus `<name>.labels`.
    Corrupt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Project KITTI `.bin` clouds to range images.
    Project {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Back-project range images to KITTI `.bin` clouds.
    Backproject {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the radial regressor. Without --gen/--gt, trains on synthesized scenes.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corrupted frames, paired with --gt by file stem.
        #[arg(long, requires = "gt")]
        gen: Option<PathBuf>,
        /// Clean reference frames.
        #[arg(long, requires = "gen")]
        gt: Option<PathBuf>,
        /// Directory or file holding `.labels` matching the generated frames.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Overrides `training.loss`.
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        /// Welsch width in meters; overrides `training.nu`.
        #[arg(long)]
        nu: Option<f64>,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a trained model to range images.
    Rectify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Set-level BEV JSD/MMD and gradient JSD; per-label RMSE when labels are given.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        gen: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the DDIM spatial-Lipschitz bound for every shipped predictor.
    DdimVerify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Histogram of spatial gradient norms.
    Gradhist {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        /// Reference set for a gradient JSD record.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a Welsch regressor per ν on synthesized scenes and report artifact RMSE.
    NuSweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (program name first), runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::Config(_) | Error::InvalidParam(_) => EXIT_VALIDATION,
        _ => EXIT_ERROR,
    }
}

struct Ctx {
    cfg: RunConfig,
    command: &'static str,
    report: ReportWriter,
}

impl Ctx {
    fn new(common: &Common, command: &'static str, out_dir: &Path) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        cfg.echo(out_dir)?;
        let path = common.report.clone().unwrap_or_else(|| out_dir.join(REPORT_FILE));
        let report = ReportWriter::append(&path, !common.quiet)?;
        Ok(Self { cfg, command, report })
    }

    fn record(&self, metric: &str, value: f64) -> Record {
        Record::new(self.command, metric, value)
    }

    fn push(&mut self, r: Record) -> Result<()> {
        self.report.push(&r)
    }

    fn seed(&self, stream: Stream, index: u64) -> u64 {
        derive_seed(self.cfg.seed, stream, index)
    }
}

/// Where per-frame outputs go: into a directory, or a single named file.
enum Dest {
    Dir(PathBuf),
    File(PathBuf),
}

impl Dest {
    fn for_input(input_is_dir: bool, out: &Path) -> Self {
        if input_is_dir {
            Dest::Dir(out.to_path_buf())
        } else {
            Dest::File(out.to_path_buf())
        }
    }

    fn dir(&self) -> PathBuf {
        match self {
            Dest::Dir(d) => d.clone(),
            Dest::File(f) => parent_dir(f),
        }
    }

    fn target(&self, name: &str, ext: &str) -> PathBuf {
        match self {
            Dest::Dir(d) => d.join(format!("{name}.{ext}")),
            Dest::File(f) => f.with_extension(ext),
        }
    }

    fn prepare(&self) -> Result<()> {
        let d = self.dir();
        fs::create_dir_all(&d).map_err(|e| Error::file(&d, e))
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

struct Frame {
    name: String,
    path: PathBuf,
}

fn has_ext(p: &Path, exts: &[&str]) -> bool {
    p.extension().and_then(|e| e.to_str()).is_some_and(|e| exts.contains(&e))
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Frames under a directory (sorted, filtered by extension) or a single file.
fn list_frames(input: &Path, exts: &[&str]) -> Result<(Vec<Frame>, bool)> {
    if input.is_dir() {
        let mut frames = Vec::new();
        for entry in fs::read_dir(input).map_err(|e| Error::file(input, e))? {
            let path = entry.map_err(|e| Error::file(input, e))?.path();
            if path.is_file() && has_ext(&path, exts) {
                frames.push(Frame { name: stem(&path), path });
            }
        }
        frames.sort_by(|a, b| a.name.cmp(&b.name).then_with(|| a.path.cmp(&b.path)));
        if let Some(w) = frames.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(Error::Config(format!("{}: frame {} appears twice", input.display(), w[0].name)));
        }
        if frames.is_empty() {
            return Err(Error::Empty(format!("{}: no {} files", input.display(), exts.join("/"))));
        }
        Ok((frames, true))
    } else if input.is_file() {
        Ok((vec![Frame { name: stem(input), path: input.to_path_buf() }], false))
    } else {
        Err(Error::file(input, std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory")))
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { common, frames, out } => cmd_synth(&common, frames, &out),
        Command::Corrupt { common, input, out } => cmd_corrupt(&common, &input, &out),
        Command::Project { common, input, out } => cmd_project(&common, &input, &out),
        Command::Backproject { common, input, out } => cmd_backproject(&common, &input, &out),
        Command::Train { common, gen, gt, labels, loss, nu, out } => {
            cmd_train(&common, gen.as_deref().zip(gt.as_deref()), labels.as_deref(), loss, nu, &out)
        }
        Command::Rectify { common, model, input, out } => cmd_rectify(&common, &model, &input, &out),
        Command::Eval { common, gen, gt, labels, out } => cmd_eval(&common, &gen, &gt, labels.as_deref(), &out),
        Command::DdimVerify { common, trials, out } => cmd_ddim_verify(&common, trials, &out),
        Command::Gradhist { common, input, gt, out } => cmd_gradhist(&common, &input, gt.as_deref(), &out),
        Command::NuSweep { common, out } => cmd_nu_sweep(&common, &out),
    }
}

fn cmd_synth(common: &Common, frames: usize, out: &Path) -> Result<()> {
    if frames == 0 {
        return Err(Error::InvalidParam("--frames must be at least 1".into()));
    }
    let single = has_ext(out, &["rvimg"]);
    if single && frames > 1 {
        return Err(Error::InvalidParam("--out must be a directory when --frames > 1".into()));
    }
    let dest = Dest::for_input(!single, out);
    dest.prepare()?;
    let mut ctx = Ctx::new(common, "synth", &dest.dir())?;
    let proj = ctx.cfg.projection.to_config()?;
    for i in 0..frames {
        let name = format!("{i:04}");
        let seed = ctx.seed(Stream::Scene, i as u64);
        let scene = SceneSpec::random(seed, &ctx.cfg.scene)?;
        let img = synth_scene(&scene, &proj)?;
        io::write_rvimg(&dest.target(&name, "rvimg"), &img)?;
        let r = ctx.record("returns", img.masked_count() as f64).with("frame", name).with("scene_seed", seed);
        ctx.push(r)?;
    }
    Ok(())
}

fn cmd_corrupt(common: &Common, input: &Path, out: &Path) -> Result<()> {
    let (frames, is_dir) = list_frames(input, &["rvimg"])?;
    let dest = Dest::for_input(is_dir, out);
    dest.prepare()?;
    let mut ctx = Ctx::new(common, "corrupt", &dest.dir())?;
    for f in &frames {
        let gt = io::read_rvimg(&f.path)?;
        let mut spec = ctx.cfg.corruption.clone();
        spec.rng_seed = ctx.seed(Stream::Corruption, name_key(&f.name));
        let (gen, rep) = corrupt(&gt, &spec)?;
        io::write_rvimg(&dest.target(&f.name, "rvimg"), &gen)?;
        io::write_labels(&dest.target(&f.name, "labels"), &rep)?;
        let counts = |l: Label| rep.labels.iter().filter(|&&x| x == l).count() as f64;
        for (metric, v) in [
            ("variance_artifact_pixels", counts(Label::VarianceArtifact)),
            ("bias_region_pixels", counts(Label::BiasRegion)),
            ("bias_chunks", rep.chunks.len() as f64),
        ] {
            let r = ctx.record(metric, v).with("frame", f.name.clone());
            ctx.push(r)?;
        }
    }
    Ok(())
}

fn cmd_project(common: &Common, input: &Path, out: &Path) -> Result<()> {
    let (frames, is_dir) = list_frames(input, &["bin"])?;
    let dest = Dest::for_input(is_dir, out);
    dest.prepare()?;
    let mut ctx = Ctx::new(common, "project", &dest.dir())?;
    let proj = ctx.cfg.projection.to_config()?;
    for f in &frames {
        let cloud = io::read_kitti_bin(&f.path)?;
        let (img, map) = rvp(&cloud, &proj)?;
        io::write_rvimg(&dest.target(&f.name, "rvimg"), &img)?;
        let r = ctx.record("pixels", img.masked_count() as f64).with("frame", f.name.clone());
        ctx.push(r)?;
        let r = ctx.record("dropped_points", map.dropped() as f64).with("frame", f.name.clone());
        ctx.push(r)?;
    }
    Ok(())
}

fn cmd_backproject(common: &Common, input: &Path, out: &Path) -> Result<()> {
    let (frames, is_dir) = list_frames(input, &["rvimg"])?;
    let dest = Dest::for_input(is_dir, out);
    dest.prepare()?;
    let mut ctx = Ctx::new(common, "backproject", &dest.dir())?;
    for f in &frames {
        let (cloud, _) = rrvp(&io::read_rvimg(&f.path)?);
        io::write_kitti_bin(&dest.target(&f.name, "bin"), &cloud)?;
        let r = ctx.record("points", cloud.len() as f64).with("frame", f.name.clone());
        ctx.push(r)?;
    }
    Ok(())
}

struct LoadedPair {
    gen: RangeImage,
    gt: RangeImage,
    report: Option<CorruptionReport>,
}

fn find_labels(labels: &Path, name: &str, single: bool) -> PathBuf {
    if single && labels.is_file() {
        labels.to_path_buf()
    } else {
        labels.join(format!("{name}.labels"))
    }
}

/// Generated and ground-truth frames matched by name.
fn load_pairs(gen: &Path, gt: &Path, labels: Option<&Path>) -> Result<Vec<LoadedPair>> {
    let (gen_frames, gen_dir) = list_frames(gen, &["rvimg"])?;
    let (gt_frames, _) = list_frames(gt, &["rvimg"])?;
    let gt_by_name: BTreeMap<_, _> = gt_frames.iter().map(|f| (f.name.as_str(), &f.path)).collect();
    let mut out = Vec::with_capacity(gen_frames.len());
    for f in &gen_frames {
        let gt_path = if !gen_dir && gt_frames.len() == 1 {
            &gt_frames[0].path
        } else {
            gt_by_name
                .get(f.name.as_str())
                .ok_or_else(|| Error::Shape(format!("no ground truth for frame {}", f.name)))?
        };
        let report = labels
            .map(|l| io::read_labels(&find_labels(l, &f.name, !gen_dir)))
            .transpose()?;
        out.push(LoadedPair {
            gen: io::read_rvimg(&f.path)?,
            gt: io::read_rvimg(gt_path)?,
            report,
        });
    }
    Ok(out)
}

/// Scene/corruption pairs synthesized from the config for one seed stream.
fn synth_pairs(cfg: &RunConfig, stream: Stream, n: usize) -> Result<Vec<Pair>> {
    let proj = cfg.projection.to_config()?;
    (0..n as u64)
        .map(|i| {
            let seed = derive_seed(cfg.seed, stream, i);
            let scene = SceneSpec::random(seed, &cfg.scene)?;
            let mut spec = cfg.corruption.clone();
            spec.rng_seed = derive_seed(cfg.seed, Stream::Corruption, seed);
            make_pair(&scene, &spec, &proj)
        })
        .collect()
}

fn push_label_rmse(ctx: &mut Ctx, rmse: &LabelRmse, extra: &[(&str, serde_json::Value)]) -> Result<()> {
    for (metric, acc) in [
        ("clean_rmse", rmse.clean),
        ("variance_artifact_rmse", rmse.variance_artifact),
        ("bias_region_rmse", rmse.bias_region),
        ("rmse", rmse.all()),
    ] {
        if let Some(v) = acc.rmse() {
            let mut r = ctx.record(metric, v).with("pixels", acc.count);
            for (k, x) in extra {
                r = r.with(k, x.clone());
            }
            ctx.push(r)?;
        }
    }
    Ok(())
}

fn cmd_train(
    common: &Common,
    inputs: Option<(&Path, &Path)>,
    labels: Option<&Path>,
    loss: Option<LossArg>,
    nu: Option<f64>,
    out: &Path,
) -> Result<()> {
    let out_dir = parent_dir(out);
    fs::create_dir_all(&out_dir).map_err(|e| Error::file(&out_dir, e))?;
    let mut ctx = Ctx::new(common, "train", &out_dir)?;
    if let Some(l) = loss {
        ctx.cfg.training.loss = match l {
            LossArg::Welsch => LossName::Welsch,
            LossArg::Mse => LossName::Mse,
        };
    }
    if let Some(v) = nu {
        ctx.cfg.training.nu = v;
    }
    ctx.cfg.validate()?;
    ctx.cfg.echo(&out_dir)?;

    let loaded;
    let synthesized;
    let pairs: Vec<TrainPair<'_>> = match inputs {
        Some((gen, gt)) => {
            loaded = load_pairs(gen, gt, labels)?;
            loaded
                .iter()
                .map(|p| TrainPair { gen: &p.gen, gt: &p.gt, report: p.report.as_ref() })
                .collect()
        }
        None => {
            synthesized = synth_pairs(&ctx.cfg, Stream::TrainScene, ctx.cfg.training.train_scenes)?;
            synthesized.iter().map(TrainPair::from).collect()
        }
    };
    let loss = ctx.cfg.training.loss_kind()?;
    let hyper = ctx.cfg.training.hyper(ctx.seed(Stream::Training, 0));
    let (model, rep) = train_regressor(&pairs, loss, &hyper)?;
    io::write_model(out, &model)?;

    let base = |ctx: &Ctx, metric: &str, v: f64| ctx.record(metric, v).with("loss", rep.loss.clone());
    let r = base(&ctx, "initial_loss", rep.loss_trace.first().copied().unwrap_or(rep.final_loss));
    ctx.push(r)?;
    let r = base(&ctx, "final_loss", rep.final_loss).with("epochs", hyper.epochs).with("pairs", pairs.len());
    ctx.push(r)?;
    if let Some(rmse) = &rep.rmse_by_label {
        push_label_rmse(&mut ctx, rmse, &[("loss", rep.loss.clone().into())])?;
    }
    Ok(())
}

fn cmd_rectify(common: &Common, model: &Path, input: &Path, out: &Path) -> Result<()> {
    let (frames, is_dir) = list_frames(input, &["rvimg"])?;
    let dest = Dest::for_input(is_dir, out);
    dest.prepare()?;
    let mut ctx = Ctx::new(common, "rectify", &dest.dir())?;
    let model = io::read_model(model)?;
    for f in &frames {
        let img = io::read_rvimg(&f.path)?;
        let (fixed, _) = rectify(&img, &model)?;
        io::write_rvimg(&dest.target(&f.name, "rvimg"), &fixed)?;
        let (n, sum) = img
            .depths()
            .iter()
            .zip(fixed.depths())
            .zip(img.mask())
            .filter(|(_, &m)| m)
            .fold((0usize, 0.0), |(n, s), ((a, b), _)| (n + 1, s + (b - a).abs()));
        let r = ctx
            .record("mean_abs_offset", if n > 0 { sum / n as f64 } else { 0.0 })
            .with("frame", f.name.clone());
        ctx.push(r)?;
    }
    Ok(())
}

/// A frame read as a range image (`.rvimg`) or a raw cloud (`.bin`).
struct SetFrame {
    name: String,
    image: Option<RangeImage>,
    cloud: PointCloud,
}

fn load_set(input: &Path) -> Result<Vec<SetFrame>> {
    let (frames, _) = list_frames(input, &["rvimg", "bin"])?;
    frames
        .into_iter()
        .map(|f| {
            if has_ext(&f.path, &["bin"]) {
                Ok(SetFrame { name: f.name, image: None, cloud: io::read_kitti_bin(&f.path)? })
            } else {
                let img = io::read_rvimg(&f.path)?;
                let (cloud, _) = rrvp(&img);
                Ok(SetFrame { name: f.name, image: Some(img), cloud })
            }
        })
        .collect()
}

fn set_histogram(cfg: &RunConfig, set: &[SetFrame]) -> Result<Option<GradHistogram>> {
    let images: Option<Vec<RangeImage>> = set.iter().map(|f| f.image.clone()).collect();
    let m = &cfg.metrics;
    images
        .map(|imgs| grad_histogram_with(&imgs, m.grad_bins, m.grad_min, m.grad_max))
        .transpose()
}

fn cmd_eval(common: &Common, gen: &Path, gt: &Path, labels: Option<&Path>, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let mut ctx = Ctx::new(common, "eval", out)?;
    let gen_set = load_set(gen)?;
    let gt_set = load_set(gt)?;
    let extent = ctx.cfg.metrics.bev_extent;
    let clouds = |s: &[SetFrame]| s.iter().map(|f| f.cloud.clone()).collect::<Vec<_>>();
    let (gc, tc) = (clouds(&gen_set), clouds(&gt_set));
    let sizes = |r: Record| r.with("gen_frames", gen_set.len()).with("gt_frames", gt_set.len());
    let r = sizes(ctx.record("jsd", jsd_sets(&gc, &tc, extent)?));
    ctx.push(r)?;
    let r = sizes(ctx.record("mmd", mmd(&gc, &tc, extent)?));
    ctx.push(r)?;

    if let (Some(hg), Some(ht)) = (set_histogram(&ctx.cfg, &gen_set)?, set_histogram(&ctx.cfg, &gt_set)?) {
        if !hg.is_empty() && !ht.is_empty() {
            let r = ctx.record("grad_jsd", grad_jsd(&hg, &ht)?);
            ctx.push(r)?;
        }
        for (metric, h) in [("grad_mean_gen", &hg), ("grad_mean_gt", &ht)] {
            if let Some(m) = h.mean {
                let r = ctx.record(metric, m).with("in_range", h.in_range);
                ctx.push(r)?;
            }
        }
    }

    if let Some(labels) = labels {
        let (lframes, _) = list_frames(labels, &["labels"])?;
        let gt_by: BTreeMap<_, _> = gt_set.iter().map(|f| (f.name.as_str(), f)).collect();
        let lab_by: BTreeMap<_, _> = lframes.iter().map(|f| (f.name.as_str(), &f.path)).collect();
        let mut total = LabelRmse::default();
        for g in &gen_set {
            let (Some(gi), Some(t), Some(lp)) = (g.image.as_ref(), gt_by.get(g.name.as_str()), lab_by.get(g.name.as_str())) else {
                return Err(Error::Shape(format!("frame {} lacks a matching image, ground truth or labels", g.name)));
            };
            let ti = t.image.as_ref().ok_or_else(|| Error::Shape(format!("ground truth {} is not a range image", g.name)))?;
            total.accumulate(&label_rmse(gi, ti, &io::read_labels(lp)?)?);
        }
        push_label_rmse(&mut ctx, &total, &[])?;
    }
    Ok(())
}

fn cmd_ddim_verify(common: &Common, trials: Option<usize>, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let mut ctx = Ctx::new(common, "ddim-verify", out)?;
    let d = ctx.cfg.diffusion.clone();
    let trials = trials.unwrap_or(d.trials);
    if trials == 0 {
        return Err(Error::InvalidParam("--trials must be at least 1".into()));
    }
    let schedule = d.schedule()?;
    let mut predictors: Vec<Box<dyn EpsilonPredictor>> = vec![Box::new(ZeroPredictor)];
    for &c in &d.identity_scales {
        predictors.push(Box::new(ScaledIdentity { c }));
    }
    predictors.push(Box::new(CircularKernel::binomial5(d.kernel_scale)));

    let tight = 1.0 / schedule.alpha_bar[schedule.steps()].sqrt();
    let mut failed = Vec::new();
    for (i, p) in predictors.iter().enumerate() {
        let seed = ctx.seed(Stream::Diffusion, i as u64);
        let rep = verify_lipschitz_bound(p.as_ref(), &schedule, trials, (d.height, d.width), seed)?;
        let tag = |r: Record| r.with("predictor", rep.predictor.clone()).with("trials", trials);
        for (metric, v) in [
            ("bound", rep.bound),
            ("max_ratio", rep.max_ratio),
            ("max_ratio_over_bound", rep.max_ratio_over_bound),
            ("violations", rep.violations.len() as f64),
        ] {
            let r = tag(ctx.record(metric, v));
            ctx.push(r)?;
        }
        if i == 0 {
            let dev = rep.ratios.iter().map(|r| (r - tight).abs()).fold(0.0, f64::max);
            let r = tag(ctx.record("tightness_error", dev)).with("expected_ratio", tight);
            ctx.push(r)?;
        }
        if !rep.holds() {
            failed.push(rep.predictor.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!("bound violated for {}", failed.join(", "))))
    }
}

fn cmd_gradhist(common: &Common, input: &Path, gt: Option<&Path>, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let mut ctx = Ctx::new(common, "gradhist", out)?;
    let require = |set: &[SetFrame], p: &Path| -> Result<GradHistogram> {
        set_histogram(&ctx.cfg, set)?
            .ok_or_else(|| Error::InvalidParam(format!("{}: gradients need .rvimg inputs", p.display())))
    };
    let h = require(&load_set(input)?, input)?;
    let href = gt.map(|g| load_set(g).and_then(|s| require(&s, g))).transpose()?;

    let r = ctx.record("in_range", h.in_range as f64);
    ctx.push(r)?;
    if let Some(m) = h.mean {
        let r = ctx.record("mean", m);
        ctx.push(r)?;
    }
    let mass = h.mass();
    for b in 0..h.bins() {
        let r = ctx
            .record("bin_fraction", mass.as_ref().map_or(0.0, |m| m[b]))
            .with("lo", h.edges[b])
            .with("hi", h.edges[b + 1])
            .with("count", h.counts[b]);
        ctx.push(r)?;
    }
    if let Some(href) = href {
        if !h.is_empty() && !href.is_empty() {
            let r = ctx.record("grad_jsd", grad_jsd(&h, &href)?);
            ctx.push(r)?;
        }
    }
    Ok(())
}

fn cmd_nu_sweep(common: &Common, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::file(out, e))?;
    let mut ctx = Ctx::new(common, "nu-sweep", out)?;
    let train = synth_pairs(&ctx.cfg, Stream::TrainScene, ctx.cfg.training.train_scenes)?;
    let eval = synth_pairs(&ctx.cfg, Stream::EvalScene, ctx.cfg.training.eval_scenes)?;
    let train_pairs: Vec<TrainPair<'_>> = train.iter().map(TrainPair::from).collect();

    let mut base = LabelRmse::default();
    for p in &eval {
        base.accumulate(&label_rmse(&p.gen, &p.gt, &p.report)?);
    }
    push_label_rmse(&mut ctx, &base, &[("model", "uncorrected".into())])?;

    let hyper = ctx.cfg.training.hyper(ctx.seed(Stream::Training, 0));
    for nu in NU_GRID {
        let loss = LossKind::Welsch(WelschParams::new(nu)?);
        let (model, rep) = train_regressor(&train_pairs, loss, &hyper)?;
        let mut acc = LabelRmse::default();
        for p in &eval {
            let (fixed, _) = rectify(&p.gen, &model)?;
            acc.accumulate(&label_rmse(&fixed, &p.gt, &p.report)?);
        }
        let r = ctx.record("final_loss", rep.final_loss).with("nu", nu);
        ctx.push(r)?;
        push_label_rmse(&mut ctx, &acc, &[("nu", nu.into())])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_and_help_codes() {
        assert_eq!(run(["rvrect", "--help"]), EXIT_OK);
        assert_eq!(run(["rvrect", "--version"]), EXIT_OK);
        assert_eq!(run(["rvrect", "explode"]), EXIT_USAGE);
        assert_eq!(run(["rvrect", "synth", "--out", "x.rvimg", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["rvrect"]), EXIT_USAGE);
    }

    #[test]
    fn error_classes() {
        assert_eq!(exit_code(&Error::Validation("x".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::Empty("x".into())), EXIT_ERROR);
    }

    #[test]
    fn config_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.toml");
        fs::write(&cfg, "nonsense = 1\n").unwrap();
        let out = dir.path().join("s.rvimg");
        let code = run(["rvrect", "synth", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_VALIDATION);
        let missing = dir.path().join("nope");
        let code = run(["rvrect", "corrupt", "--input", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(code, EXIT_ERROR);
    }
}
