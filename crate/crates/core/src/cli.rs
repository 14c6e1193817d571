//! The `denet` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::dataset::{self, Scene};
use crate::density::{generate_density_map, DotAnnotation, KernelMode};
use crate::error::{DenetError, Result};
use crate::eval::{self, EvalItem};
use crate::fusion::{apply_masks, filter_detections, fuse_count, mock_detect, DetectionSet};
use crate::imageio;
use crate::model::{gradcheck_end_to_end, DensityEstimator, EnetModel};
use crate::synth;
use crate::tensor::gradcheck::{self, DEFAULT_STEP};
use crate::train::{self, build_training_set, prepare_sample, TrainState};

/// Per-op bound of the finite-difference suite.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Bound for the whole network under the combined loss.
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "denet", version, about = "Detection + density-estimation crowd counting")]
pub struct Cli {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Directory for every output of the run (created if missing).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KernelArg {
    Fixed,
    Adaptive,
}

/// Flags that override single config fields.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// Counting-loss weight (`loss.alpha`).
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub alpha: Option<f64>,
    /// Run seed (`train.seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Fixed Gaussian width; also selects the fixed kernel.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub sigma: Option<f64>,
    /// Ground-truth kernel mode.
    #[arg(long, global = true, value_enum)]
    pub kernel: Option<KernelArg>,
    /// Minimum detection score kept.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub score_threshold: Option<f64>,
    /// Minimum box height as a fraction of image height.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub min_box_frac: Option<f64>,
    /// Fraction of dots the mock detector covers.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub recall: Option<f64>,
    /// Mock detection box height in pixels.
    #[arg(long, global = true)]
    pub box_h: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Initial learning rate.
    #[arg(long, global = true, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    /// Directory of `<id>.json` annotations with `<id>.png` or `<id>.pgm` images.
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Directory of `<id>.json` detection records.
    #[arg(long, global = true)]
    pub detections: Option<PathBuf>,
    /// Weights file for eval and infer.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        macro_rules! set {
            ($flag:expr, $field:expr) => {
                if let Some(v) = $flag.clone() {
                    $field = v;
                }
            };
        }
        set!(self.alpha, cfg.loss.alpha);
        set!(self.seed, cfg.train.seed);
        set!(self.score_threshold, cfg.fusion.score_threshold);
        set!(self.min_box_frac, cfg.fusion.min_box_height_frac);
        set!(self.recall, cfg.mock.recall);
        set!(self.box_h, cfg.mock.box_h);
        set!(self.epochs, cfg.train.epochs);
        set!(self.lr, cfg.train.lr_initial);
        if let Some(k) = self.kernel {
            cfg.kernel.mode = match k {
                KernelArg::Fixed => KernelMode::Fixed,
                KernelArg::Adaptive => KernelMode::Adaptive,
            };
        }
        if let Some(s) = self.sigma {
            cfg.kernel.mode = KernelMode::Fixed;
            cfg.kernel.sigma_fixed = s;
        }
        if self.dataset.is_some() {
            cfg.dataset = self.dataset.clone();
        }
        if self.detections.is_some() {
            cfg.detections = self.detections.clone();
        }
        if self.checkpoint.is_some() {
            cfg.checkpoint = self.checkpoint.clone();
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Density grids (and previews) from dot annotations.
    GenGt {
        /// Annotation files; defaults to every annotation in the dataset.
        #[arg(long)]
        annotation: Vec<PathBuf>,
    },
    /// Stand-in detections covering a `recall` fraction of each image's dots.
    MockDetect,
    /// Train the estimation network on masked scenes.
    Train {
        /// Continue from the state saved in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Count every dataset image and report MAE / MSE.
    Eval {
        /// Train and evaluate with k-fold cross-validation instead of a checkpoint.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Estimate one image end to end.
    Infer {
        /// RGB PNG or PGM image.
        #[arg(long)]
        image: PathBuf,
        /// Detection set to mask out before estimation.
        #[arg(long)]
        detection_file: Option<PathBuf>,
    },
    /// Finite-difference check of every op and of the full network.
    Gradcheck {
        /// Seeds 0..n for both the op suite and the network.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Parameter entries checked per seed in the end-to-end test.
        #[arg(long, default_value_t = 50)]
        entries: usize,
    },
    /// Write synthetic scenes (annotations + rendered images).
    Synth {
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenGt { .. } => "gen-gt",
            Command::MockDetect => "mock-detect",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Infer { .. } => "infer",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Synth { .. } => "synth",
        }
    }
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if cli.verbose {
        let _ = env_logger::Builder::new().filter_level(log::LevelFilter::Info).try_init();
    }
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cli.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    let dir = cli.out.as_deref().ok_or_else(|| DenetError::Input("--out is required".into()))?;
    std::fs::create_dir_all(dir).map_err(|e| DenetError::io(dir, e))?;
    Ok(dir)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| DenetError::Input(format!("{what} is not set (config field or --{what} flag)")))
}

/// Runs a parsed command; `argv` is echoed into the manifest.
pub fn execute(cli: &Cli, argv: &[String]) -> Result<()> {
    let cfg = resolve(cli)?;
    let out = out_dir(cli)?;
    let results = match &cli.command {
        Command::GenGt { annotation } => gen_gt(&cfg, annotation, out)?,
        Command::MockDetect => mock_detect_cmd(&cfg, out)?,
        Command::Train { resume } => train_cmd(&cfg, *resume, out)?,
        Command::Eval { folds } => eval_cmd(&cfg, *folds, out)?,
        Command::Infer { image, detection_file } => infer_cmd(&cfg, image, detection_file.as_deref(), out)?,
        Command::Gradcheck { seeds, entries } => gradcheck_cmd(&cfg, *seeds, *entries)?,
        Command::Synth { count } => synth_cmd(&cfg, *count, out)?,
    };
    let manifest = json!({
        "command": cli.command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.train.seed,
        "config": cfg,
        "argv": argv,
        "results": results,
    });
    write_json(&out.join(dataset::MANIFEST_FILE), &manifest)?;
    if let Some(Value::Bool(false)) = manifest["results"].get("passed") {
        return Err(DenetError::Runtime("gradient check failed".into()));
    }
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v).expect("json")).map_err(|e| DenetError::io(path, e))
}

fn gen_gt(cfg: &RunConfig, files: &[PathBuf], out: &Path) -> Result<Value> {
    let anns: Vec<DotAnnotation> = if files.is_empty() {
        let dir = required(&cfg.dataset, "dataset")?;
        dataset::list_ids(dir)?.iter().map(|id| DotAnnotation::load(&dir.join(format!("{id}.json")))).collect::<Result<_>>()?
    } else {
        files.iter().map(|f| DotAnnotation::load(f)).collect::<Result<_>>()?
    };
    let mut sums = serde_json::Map::new();
    for ann in &anns {
        let grid = generate_density_map(ann, &cfg.kernel)?;
        grid.save(&out.join(format!("{}.grid", ann.image_id)))?;
        imageio::save_density_visual(&grid, &out.join(format!("{}_density.png", ann.image_id)))?;
        println!("{}: {} dots, grid sum {:.6}", ann.image_id, ann.count(), grid.sum());
        sums.insert(ann.image_id.clone(), json!({ "dots": ann.count(), "sum": grid.sum() }));
    }
    Ok(Value::Object(sums))
}

fn mock_detect_cmd(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let dir = required(&cfg.dataset, "dataset")?;
    let mut counts = serde_json::Map::new();
    for id in dataset::list_ids(dir)? {
        let ann = DotAnnotation::load(&dir.join(format!("{id}.json")))?;
        let ds = mock_detect(&ann, cfg.mock.recall, cfg.mock.box_h, cfg.train.seed)?;
        ds.save(&out.join(format!("{id}.json")))?;
        println!("{id}: {} of {} dots detected", ds.detections.len(), ann.count());
        counts.insert(id, json!(ds.detections.len()));
    }
    Ok(Value::Object(counts))
}

fn detections_for(cfg: &RunConfig, id: &str, required_record: bool) -> Result<Option<DetectionSet>> {
    match &cfg.detections {
        Some(dir) => {
            let ds = dataset::load_detections(dir, id)?;
            if ds.is_none() && required_record {
                return Err(DenetError::Input(format!("no detection record for image `{id}` in {}", dir.display())));
            }
            Ok(ds)
        }
        None => Ok(None),
    }
}

fn training_samples(cfg: &RunConfig, scenes: &[&Scene]) -> Result<Vec<train::TrainSample>> {
    if cfg.detections.is_none() {
        warn!("no detections directory; training on unmasked images");
    }
    let base = scenes
        .iter()
        .map(|s| {
            let id = &s.annotation.image_id;
            let ds = detections_for(cfg, id, true)?.unwrap_or_else(|| DetectionSet::empty(id.clone()));
            prepare_sample(&s.image, &s.annotation, &ds, &cfg.fusion, &cfg.kernel)
        })
        .collect::<Result<Vec<_>>>()?;
    build_training_set(&base, &cfg.kernel, cfg.train.seed)
}

fn train_model(cfg: &RunConfig, scenes: &[&Scene], resume: bool, out: &Path) -> Result<(EnetModel, Value)> {
    let samples = training_samples(cfg, scenes)?;
    let (mut model, mut state) = if resume {
        TrainState::load(cfg.model.clone(), out)?
    } else {
        let model = EnetModel::build(cfg.model.clone(), cfg.train.seed)?;
        let state = TrainState::new(&model, &cfg.train);
        (model, state)
    };
    info!("training on {} samples, {} parameters", samples.len(), model.parameter_count());
    let curve = train::train(&mut model, &samples, &cfg.loss, &cfg.train, &mut state, Some(out))?;
    let summary = json!({
        "samples": samples.len(),
        "steps": state.step,
        "epochs": state.epoch,
        "first_loss": curve.first().map(|r| r.loss_total),
        "last_loss": curve.last().map(|r| r.loss_total),
        "checkpoint": out.join(train::CHECKPOINT_FILE),
    });
    Ok((model, summary))
}

fn train_cmd(cfg: &RunConfig, resume: bool, out: &Path) -> Result<Value> {
    let scenes = dataset::load_dir(required(&cfg.dataset, "dataset")?)?;
    let refs: Vec<&Scene> = scenes.iter().collect();
    let (_, summary) = train_model(cfg, &refs, resume, out)?;
    println!("trained {} steps; final loss {}", summary["steps"], summary["last_loss"]);
    Ok(summary)
}

fn eval_items(cfg: &RunConfig, scenes: Vec<Scene>) -> Result<Vec<EvalItem>> {
    required(&cfg.detections, "detections")?;
    scenes
        .into_iter()
        .map(|s| {
            let detections = detections_for(cfg, &s.annotation.image_id, true)?;
            Ok(EvalItem { image: s.image, annotation: s.annotation, detections })
        })
        .collect()
}

fn eval_cmd(cfg: &RunConfig, folds: Option<usize>, out: &Path) -> Result<Value> {
    let scenes = dataset::load_dir(required(&cfg.dataset, "dataset")?)?;
    let report = match folds {
        None => {
            let model = EnetModel::load(cfg.model.clone(), required(&cfg.checkpoint, "checkpoint")?)?;
            let items = eval_items(cfg, scenes)?;
            eval::evaluate(&model, &items, &cfg.fusion)?
        }
        Some(k) => {
            let items = eval_items(cfg, scenes.clone())?;
            eval::cross_validate(&items, k, cfg.train.seed, &cfg.fusion, |f, train_idx| {
                let dir = out.join(format!("fold_{f}"));
                std::fs::create_dir_all(&dir).map_err(|e| DenetError::io(&dir, e))?;
                let subset: Vec<&Scene> = train_idx.iter().map(|&i| &scenes[i]).collect();
                Ok(train_model(cfg, &subset, false, &dir)?.0)
            })?
        }
    };
    report.save(out)?;
    println!("{}", report.summary());
    Ok(json!({ "mae": report.mae, "mse": report.mse, "rmse": report.rmse, "images": report.per_image.len() }))
}

fn infer_cmd(cfg: &RunConfig, image_path: &Path, detection_file: Option<&Path>, out: &Path) -> Result<Value> {
    let model = EnetModel::load(cfg.model.clone(), required(&cfg.checkpoint, "checkpoint")?)?;
    let image = imageio::load_rgb(image_path)?;
    let (_, h, w) = image.chw()?;
    let stem = image_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    let (input, n_d) = match detection_file {
        Some(p) => {
            let ds = DetectionSet::load(p)?;
            let retained = filter_detections(&ds, &cfg.fusion, (w, h))?;
            let blank = DotAnnotation::new(ds.image_id.clone(), w, h, Vec::new());
            let scene = apply_masks(&image, &blank, &retained, &cfg.fusion)?;
            (scene.masked_image, scene.n_d)
        }
        None => (image, 0),
    };
    let pred = model.estimate(&input)?;
    let rec = fuse_count(n_d, &pred);
    let grid = crate::density::DensityGrid::from_tensor(&pred)?;
    grid.save(&out.join(format!("{stem}.grid")))?;
    imageio::save_density_visual(&grid, &out.join(format!("{stem}_density.png")))?;
    println!("{stem}: {}x{} density, n_d {} + n_e {:.4} = {:.4}", grid.width, grid.height, rec.n_d, rec.n_e, rec.c);
    Ok(json!({ "width": grid.width, "height": grid.height, "n_d": rec.n_d, "n_e": rec.n_e, "c": rec.c }))
}

fn gradcheck_cmd(cfg: &RunConfig, seeds: u64, entries: usize) -> Result<Value> {
    let mut op_worst = 0.0f64;
    let mut e2e_worst = 0.0f64;
    for seed in 0..seeds {
        for r in gradcheck::op_suite(seed, DEFAULT_STEP)? {
            op_worst = op_worst.max(r.max_rel_err);
            info!("seed {seed} {}: {:.3e}", r.name, r.max_rel_err);
        }
        let r = gradcheck_end_to_end(&cfg.model, seed, entries, DEFAULT_STEP)?;
        info!("seed {seed} end to end: {:.3e} ({} kinks skipped)", r.max_rel_err, r.kinks);
        e2e_worst = e2e_worst.max(r.max_rel_err);
    }
    let passed = op_worst < OP_TOLERANCE && e2e_worst < END_TO_END_TOLERANCE;
    println!("ops: max relative error {op_worst:.3e} (bound {OP_TOLERANCE:e})");
    println!("end to end: max relative error {e2e_worst:.3e} (bound {END_TO_END_TOLERANCE:e})");
    Ok(json!({ "seeds": seeds, "op_max_rel_err": op_worst, "e2e_max_rel_err": e2e_worst, "passed": passed }))
}

fn synth_cmd(cfg: &RunConfig, count: usize, out: &Path) -> Result<Value> {
    let scenes = synth::generate(count, &cfg.synth, cfg.train.seed)?;
    let mut ids = Vec::new();
    for s in scenes {
        let scene = Scene { annotation: s.annotation, image: s.image };
        dataset::save_scene(out, &scene)?;
        println!("{}: {} dots", scene.annotation.image_id, scene.annotation.count());
        ids.push(json!({ "image_id": scene.annotation.image_id, "dots": scene.annotation.count() }));
    }
    Ok(json!(ids))
}
