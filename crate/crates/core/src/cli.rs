//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
//! Every command writes into `--out-dir` and finishes by writing
//! `run-manifest.txt` with the resolved configuration, its hash and the
//! hash of every output file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use crate::anomaly::{self, AdConfig, Normalization};
use crate::encoder::{self, Backbone, EncoderKind, EncoderSpec, Source};
use crate::fusion::{self, concat_layers, fuse, FusedFeatureMap};
use crate::head::{self, Loss, Prediction, Targets, Task, TrainConfig, TrainingSet};
use crate::metrics::{self, ConfusionMatrix, ProSample};
use crate::pyramid::ScaleSet;
use crate::tensorio::{self, DatasetManifest, ManifestEntry, Split, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "murf", version, about = "Multi-resolution feature fusion toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode one image at several scales and write the fused feature map.
    Fuse(FuseArgs),
    /// Train a linear segmentation or depth head on fused features.
    TrainHead(TrainHeadArgs),
    /// Run a trained head over a manifest split.
    Predict(PredictArgs),
    /// Build per-scale anomaly memory banks from the train split.
    AdBuild(AdBuildArgs),
    /// Score the test split against per-scale memory banks.
    AdScore(AdScoreArgs),
    /// Evaluate predictions or anomaly maps against manifest ground truth.
    Eval(EvalArgs),
    /// Render the top principal components of fused features as an image.
    PcaViz(PcaVizArgs),
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// Comma-separated relative factors (0.5,1.0) or absolute sides (266px,518px).
    #[arg(long)]
    pub scales: String,
    /// Encoder spec, e.g. toy:patch=14,dim=8,seed=7,layers=0+2 or file:patch=14,dim=768,layers=12.
    #[arg(long)]
    pub encoder: String,
    /// Fused grid size as HxW; defaults to the largest per-scale grid.
    #[arg(long)]
    pub target: Option<String>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Input image (.png or .mrft).
    #[arg(long)]
    pub image: PathBuf,
    /// Output file name inside --out-dir.
    #[arg(long, default_value = "fused.mrft")]
    pub out: PathBuf,
    /// Directory receiving all outputs.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Segmentation,
    Depth,
}

#[derive(Debug, Args)]
pub struct TrainHeadArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Dataset manifest; train entries need mask= targets.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Prediction task.
    #[arg(long, value_enum)]
    pub task: TaskArg,
    /// Number of classes (segmentation).
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Label value excluded from the loss (segmentation).
    #[arg(long)]
    pub ignore: Option<u32>,
    /// SGD learning rate; defaults to 1e-2 (segmentation) or 1e-3 (depth).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Number of SGD updates.
    #[arg(long, default_value_t = 10_000)]
    pub steps: usize,
    /// Grid cells per step.
    #[arg(long, default_value_t = 256)]
    pub batch: usize,
    /// Seed for the minibatch order.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Append every scale's global token to each position.
    #[arg(long)]
    pub cls: bool,
    /// Regress depth directly instead of in log space.
    #[arg(long)]
    pub linear_depth: bool,
    /// Directory receiving all outputs.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory written by train-head.
    #[arg(long)]
    pub head_dir: PathBuf,
    /// Manifest split to process.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Directory receiving all outputs.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct BankArgs {
    /// Fraction of each bank kept by greedy k-center selection, in (0, 1].
    #[arg(long, default_value_t = 1.0)]
    pub coreset: f64,
    /// L2-normalize bank and query vectors.
    #[arg(long)]
    pub l2_norm: bool,
}

#[derive(Debug, Args)]
pub struct AdBuildArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated relative factors or absolute sides.
    #[arg(long)]
    pub scales: String,
    /// Encoder spec string.
    #[arg(long)]
    pub encoder: String,
    #[command(flatten)]
    pub bank: BankArgs,
    /// Directory receiving all outputs.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AdScoreArgs {
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Banks written by ad-build; when absent, banks are built from the train split.
    #[arg(long, conflicts_with_all = ["scales", "encoder"])]
    pub bank_dir: Option<PathBuf>,
    /// Scales for on-the-fly banks.
    #[arg(long, required_unless_present = "bank_dir")]
    pub scales: Option<String>,
    /// Encoder spec for on-the-fly banks.
    #[arg(long, required_unless_present = "bank_dir")]
    pub encoder: Option<String>,
    #[command(flatten)]
    pub bank: BankArgs,
    /// Gaussian smoothing of the fused map (pixels); off by default.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Directory receiving all outputs.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Miou,
    Rmse,
    AuPro,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Metric to compute.
    #[arg(long, value_enum)]
    pub metric: MetricArg,
    /// Dataset manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory with pred_<k>.mrft (miou, rmse) or score_<k>.mrft (au-pro).
    #[arg(long)]
    pub pred_dir: PathBuf,
    /// Manifest split to process.
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Number of classes (miou).
    #[arg(long, default_value_t = 2)]
    pub classes: usize,
    /// Ignored label value (miou).
    #[arg(long)]
    pub ignore: Option<u32>,
    /// FPR integration limit (au-pro).
    #[arg(long, default_value_t = 0.05)]
    pub fpr_limit: f64,
    /// Directory receiving all outputs.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct PcaVizArgs {
    #[command(flatten)]
    pub features: FeatureArgs,
    /// Input image (.png or .mrft).
    #[arg(long)]
    pub image: PathBuf,
    /// Principal components to render (1 to 3).
    #[arg(long, default_value_t = 3)]
    pub components: usize,
    /// Foreground mask; nonzero pixels are kept.
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Directory receiving all outputs.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Numeric(m) => m,
        }
    }
}

impl From<crate::Error> for CliError {
    fn from(e: crate::Error) -> Self {
        if e.is_numeric() {
            CliError::Numeric(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

macro_rules! impl_from_module_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                crate::Error::from(e).into()
            }
        }
    )*};
}

impl_from_module_error!(
    tensorio::TensorIoError,
    crate::pyramid::PyramidError,
    encoder::EncoderError,
    fusion::FusionError,
    head::HeadError,
    anomaly::AnomalyError,
    metrics::MetricsError
);

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `argv` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    EXIT_OK
                }
                _ => {
                    eprint!("{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message().replace('\n', " "));
            e.exit_code()
        }
    }
}

/// Help text of one subcommand, as printed by `murf <name> --help`.
pub fn subcommand_help(name: &str) -> Option<String> {
    let mut cmd = Cli::command();
    cmd.build();
    let sub = cmd.find_subcommand_mut(name)?;
    Some(sub.render_help().to_string())
}

pub fn subcommand_names() -> Vec<String> {
    Cli::command()
        .get_subcommands()
        .map(|s| s.get_name().to_string())
        .collect()
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fuse(a) => cmd_fuse(a),
        Command::TrainHead(a) => cmd_train_head(a),
        Command::Predict(a) => cmd_predict(a),
        Command::AdBuild(a) => cmd_ad_build(a),
        Command::AdScore(a) => cmd_ad_score(a),
        Command::Eval(a) => cmd_eval(a),
        Command::PcaViz(a) => cmd_pca_viz(a),
    }
}

/// Resolved settings and produced files of one command invocation.
struct RunRecord {
    command: &'static str,
    config: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    out_dir: PathBuf,
}

impl RunRecord {
    fn new(command: &'static str, out_dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(out_dir).map_err(|e| CliError::Data(format!("{}: {e}", out_dir.display())))?;
        Ok(Self {
            command,
            config: BTreeMap::new(),
            outputs: Vec::new(),
            out_dir: out_dir.to_path_buf(),
        })
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    fn output(&mut self, name: impl AsRef<Path>) -> PathBuf {
        let name = name.as_ref();
        self.outputs.push(name.to_path_buf());
        self.out_dir.join(name)
    }

    fn finish(self) -> CliResult<()> {
        let mut body = format!("command={}\n", self.command);
        for (k, v) in &self.config {
            let _ = writeln!(body, "{k}={v}");
        }
        let config_hash = hex::encode(Sha256::digest(body.as_bytes()));
        let mut text = format!("config_hash={config_hash}\n{body}");
        let mut outputs = self.outputs.clone();
        outputs.sort();
        outputs.dedup();
        for name in &outputs {
            let bytes = fs::read(self.out_dir.join(name))?;
            let _ = writeln!(
                text,
                "output={} sha256={}",
                name.display(),
                hex::encode(Sha256::digest(&bytes))
            );
        }
        fs::write(self.out_dir.join("run-manifest.txt"), text)?;
        Ok(())
    }
}

fn parse_scales(s: &str) -> CliResult<ScaleSet> {
    s.parse().map_err(|e: crate::pyramid::PyramidError| CliError::Usage(e.to_string()))
}

fn parse_encoder(s: &str) -> CliResult<EncoderSpec> {
    s.parse().map_err(|e: encoder::EncoderError| CliError::Usage(e.to_string()))
}

fn parse_target(s: Option<&str>) -> CliResult<Option<(usize, usize)>> {
    let Some(s) = s else { return Ok(None) };
    let parsed = s
        .split_once('x')
        .and_then(|(h, w)| Some((h.parse::<usize>().ok()?, w.parse::<usize>().ok()?)));
    match parsed {
        Some((h, w)) if h > 0 && w > 0 => Ok(Some((h, w))),
        _ => Err(CliError::Usage(format!("--target expects HxW, got {s:?}"))),
    }
}

fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Data(format!("file not found: {}", path.display())))
    }
}

fn load_manifest_checked(path: &Path, spec: Option<&EncoderSpec>, scales: Option<&ScaleSet>) -> CliResult<DatasetManifest> {
    require_file(path)?;
    let manifest = tensorio::load_manifest(path)?;
    for p in manifest.referenced_paths() {
        require_file(&p)?;
    }
    if let (Some(spec), Some(scales)) = (spec, scales) {
        if spec.kind == EncoderKind::File {
            for entry in &manifest.entries {
                for &s in scales.scales() {
                    for &l in &spec.layers {
                        require_file(&encoder::feature_file_path(entry, &manifest.base_dir, s, l)?)?;
                    }
                }
            }
        }
    }
    Ok(manifest)
}

fn fused_features(
    backbone: &Backbone,
    source: Source<'_>,
    scales: &ScaleSet,
    target: Option<(usize, usize)>,
) -> CliResult<FusedFeatureMap> {
    let per_scale = backbone.extract(source, scales)?;
    let maps = per_scale
        .into_iter()
        .map(|sf| Ok((sf.scale, concat_layers(&sf.layers)?)))
        .collect::<Result<Vec<_>, fusion::FusionError>>()?;
    Ok(fuse(&maps, target)?)
}

fn cmd_fuse(a: FuseArgs) -> CliResult<()> {
    let scales = parse_scales(&a.features.scales)?;
    let spec = parse_encoder(&a.features.encoder)?;
    let target = parse_target(a.features.target.as_deref())?;
    if spec.kind != EncoderKind::Toy {
        return Err(CliError::Usage("fuse reads an image and needs a toy encoder; use manifests for file features".into()));
    }
    require_file(&a.image)?;
    let mut rec = RunRecord::new("fuse", &a.out_dir)?;
    rec.set("scales", &scales);
    rec.set("encoder", &spec);
    rec.set("target", a.features.target.as_deref().unwrap_or("auto"));
    rec.set("image", a.image.display());

    let image = encoder::load_image(&a.image)?;
    let backbone = Backbone::from_spec(spec)?;
    let fused = fused_features(&backbone, Source::Image(&image), &scales, target)?;
    let out = rec.output(&a.out);
    fusion::write_fused(&out, &fused)?;
    rec.output(sidecar_name(&a.out, "blocks"));
    if fused.global_tokens.is_some() {
        rec.output(sidecar_name(&a.out, "cls"));
    }
    rec.set("total_dim", fused.total_dim);
    rec.finish()
}

fn sidecar_name(name: &Path, ext: &str) -> PathBuf {
    let mut s = name.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn sources<'a>(manifest: &'a DatasetManifest, split: Split) -> Vec<(&'a ManifestEntry, Source<'a>)> {
    manifest
        .split(split)
        .map(|entry| (entry, Source::Entry { entry, manifest }))
        .collect()
}

fn cmd_train_head(a: TrainHeadArgs) -> CliResult<()> {
    let scales = parse_scales(&a.features.scales)?;
    let spec = parse_encoder(&a.features.encoder)?;
    let target = parse_target(a.features.target.as_deref())?;
    let task = match a.task {
        TaskArg::Segmentation => Task::Segmentation,
        TaskArg::Depth => Task::Depth,
    };
    if task == Task::Segmentation && a.classes < 2 {
        return Err(CliError::Usage("--classes must be at least 2".into()));
    }
    if let Some(lr) = a.lr {
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(CliError::Usage(format!("--lr {lr} must be finite and non-negative")));
        }
    }
    if a.steps == 0 || a.batch == 0 {
        return Err(CliError::Usage("--steps and --batch must be at least 1".into()));
    }
    let manifest = load_manifest_checked(&a.manifest, Some(&spec), Some(&scales))?;
    let train = sources(&manifest, Split::Train);
    if train.is_empty() {
        return Err(CliError::Data("manifest has no train entries".into()));
    }
    for (entry, _) in &train {
        if entry.mask_path.is_none() {
            return Err(CliError::Data(format!(
                "train entry on line {} has no mask= target",
                entry.line
            )));
        }
    }

    let mut config = match task {
        Task::Segmentation => TrainConfig::segmentation(),
        Task::Depth => TrainConfig::depth(),
    };
    if let Some(lr) = a.lr {
        config.learning_rate = lr;
    }
    config.steps = a.steps;
    config.batch = a.batch;
    config.seed = a.seed;
    config.cls_concat = a.cls;
    config.log_depth = task == Task::Depth && !a.linear_depth;
    config.loss = match task {
        Task::Segmentation => Loss::CrossEntropy,
        Task::Depth => Loss::Mse,
    };

    let mut rec = RunRecord::new("train-head", &a.out_dir)?;
    rec.set("scales", &scales);
    rec.set("encoder", &spec);
    rec.set("target", a.features.target.as_deref().unwrap_or("auto"));
    rec.set("task", task);
    rec.set("classes", a.classes);
    rec.set("ignore", a.ignore.map_or("none".to_string(), |v| v.to_string()));
    rec.set("lr", config.learning_rate);
    rec.set("steps", config.steps);
    rec.set("batch", config.batch);
    rec.set("seed", config.seed);
    rec.set("cls", config.cls_concat);
    rec.set("log_depth", config.log_depth);
    rec.set("manifest", a.manifest.display());

    let backbone = Backbone::from_spec(spec.clone())?;
    let mut samples = Vec::with_capacity(train.len());
    for (entry, source) in &train {
        let fused = fused_features(&backbone, *source, &scales, target)?;
        let mask_path = manifest.resolve(entry.mask_path.as_ref().unwrap());
        let targets = match task {
            Task::Segmentation => {
                let (h, w, labels) = tensorio::read_labels(&mask_path)?;
                let grid = head::downsample_nearest(&labels, h, w, fused.grid_h, fused.grid_w);
                Targets::Labels(grid.into_iter().map(|l| (Some(l) != a.ignore).then_some(l)).collect())
            }
            Task::Depth => {
                let (h, w, c, values) = tensorio::read_raster(&mask_path)?;
                if c != 1 {
                    return Err(CliError::Data(format!("{}: depth map must have one channel", mask_path.display())));
                }
                let grid = head::downsample_nearest(&values, h, w, fused.grid_h, fused.grid_w);
                Targets::Values(
                    grid.into_iter()
                        .map(|v| (v.is_finite() && v > 0.0).then_some(v as f64))
                        .collect(),
                )
            }
        };
        samples.push((fused, targets));
    }
    let set = TrainingSet::from_fused(&samples, config.cls_concat)?;
    let out_dim = match task {
        Task::Segmentation => a.classes,
        Task::Depth => 1,
    };
    let (trained, report) = head::train_head(&set, task, out_dim, &config)?;

    let mut extra = BTreeMap::new();
    extra.insert("scales".to_string(), scales.to_string());
    extra.insert("encoder".to_string(), spec.to_string());
    extra.insert("target".to_string(), a.features.target.clone().unwrap_or_else(|| "auto".into()));
    head::save_head(&a.out_dir, &trained, &extra)?;
    for name in ["head.weights.mrft", "head.bias.mrft", "head.meta.txt"] {
        rec.output(name);
    }
    let loss_path = rec.output("train-loss.txt");
    let mut text = String::new();
    let every = (report.losses.len() / 100).max(1);
    for (step, loss) in report.losses.iter().enumerate() {
        if step % every == 0 || step + 1 == report.losses.len() {
            let _ = writeln!(text, "step={step} loss={loss:.9e}");
        }
    }
    fs::write(loss_path, text)?;
    rec.finish()
}

fn cmd_predict(a: PredictArgs) -> CliResult<()> {
    let (head, meta) = head::load_head(&a.head_dir)?;
    let meta_get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| CliError::Data(format!("head metadata lacks `{k}`")))
    };
    let scales = parse_scales(&meta_get("scales")?)?;
    let spec = parse_encoder(&meta_get("encoder")?)?;
    let target_text = meta_get("target")?;
    let target = parse_target((target_text != "auto").then_some(target_text.as_str()))?;
    let manifest = load_manifest_checked(&a.manifest, Some(&spec), Some(&scales))?;
    let split: Split = a.split.into();

    let mut rec = RunRecord::new("predict", &a.out_dir)?;
    rec.set("head_layout", &head.layout_hash);
    rec.set("scales", &scales);
    rec.set("encoder", &spec);
    rec.set("split", split.as_str());
    rec.set("manifest", a.manifest.display());

    let backbone = Backbone::from_spec(spec)?;
    for (k, (_, source)) in sources(&manifest, split).into_iter().enumerate() {
        let fused = fused_features(&backbone, source, &scales, target)?;
        let pred = head::head_forward(&head, &fused)?;
        let (h, w) = source.image_size()?;
        match head::upsample_prediction(&pred, h, w, head.task)? {
            Prediction::Labels { labels, .. } => {
                let data = labels.iter().map(|&l| l as f32).collect();
                tensorio::write_tensor(rec.output(format!("pred_{k}.mrft")), &Tensor::new(vec![h, w], data)?)?;
                let png: Vec<u8> = labels.iter().map(|&l| l.min(255) as u8).collect();
                tensorio::write_gray_png(rec.output(format!("pred_{k}.png")), h, w, png)?;
            }
            Prediction::Depth { values, .. } => {
                tensorio::write_tensor(rec.output(format!("pred_{k}.mrft")), &Tensor::new(vec![h, w], values)?)?;
            }
        }
    }
    rec.finish()
}

fn bank_meta(scales: &ScaleSet, spec: &EncoderSpec) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("scales".to_string(), scales.to_string());
    m.insert("encoder".to_string(), spec.to_string());
    m
}

fn ad_config(scales: ScaleSet, bank: &BankArgs, sigma: Option<f64>) -> AdConfig {
    AdConfig {
        scales,
        coreset_fraction: bank.coreset,
        normalization: if bank.l2_norm {
            Normalization::L2
        } else {
            Normalization::None
        },
        smoothing_sigma: sigma,
    }
}

fn cmd_ad_build(a: AdBuildArgs) -> CliResult<()> {
    let scales = parse_scales(&a.scales)?;
    let spec = parse_encoder(&a.encoder)?;
    if !(a.bank.coreset > 0.0 && a.bank.coreset <= 1.0) {
        return Err(CliError::Usage(format!("--coreset {} must be in (0, 1]", a.bank.coreset)));
    }
    let manifest = load_manifest_checked(&a.manifest, Some(&spec), Some(&scales))?;
    let config = ad_config(scales.clone(), &a.bank, None);

    let mut rec = RunRecord::new("ad-build", &a.out_dir)?;
    rec.set("scales", &scales);
    rec.set("encoder", &spec);
    rec.set("coreset", a.bank.coreset);
    rec.set("l2_norm", a.bank.l2_norm);
    rec.set("manifest", a.manifest.display());

    let backbone = Backbone::from_spec(spec.clone())?;
    let train: Vec<Source> = sources(&manifest, Split::Train).into_iter().map(|(_, s)| s).collect();
    if train.is_empty() {
        return Err(CliError::Data("manifest has no train entries".into()));
    }
    let banks = anomaly::build_banks(&backbone, &train, &config)?;
    let meta = bank_meta(&scales, &spec);
    for (i, bank) in banks.iter().enumerate() {
        anomaly::save_bank(&a.out_dir, i, bank, &meta)?;
        rec.output(format!("bank_{i}.mrft"));
        rec.output(format!("bank_{i}.meta.txt"));
        rec.set(&format!("bank_{i}_size"), bank.active_len());
    }
    rec.finish()
}

fn load_banks(dir: &Path) -> CliResult<(Vec<anomaly::MemoryBank>, ScaleSet, EncoderSpec)> {
    let (first, meta) = anomaly::load_bank(dir, 0)?;
    let get = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| CliError::Data(format!("bank metadata lacks `{k}`")))
    };
    let scales = parse_scales(&get("scales")?)?;
    let spec = parse_encoder(&get("encoder")?)?;
    let mut banks = vec![first];
    for i in 1..scales.len() {
        banks.push(anomaly::load_bank(dir, i)?.0);
    }
    Ok((banks, scales, spec))
}

fn cmd_ad_score(a: AdScoreArgs) -> CliResult<()> {
    if let Some(s) = a.sigma {
        if !(s.is_finite() && s > 0.0) {
            return Err(CliError::Usage(format!("--sigma {s} must be positive")));
        }
    }
    let (banks, scales, spec) = match &a.bank_dir {
        Some(dir) => {
            let (banks, scales, spec) = load_banks(dir)?;
            (Some(banks), scales, spec)
        }
        None => (
            None,
            parse_scales(a.scales.as_deref().unwrap())?,
            parse_encoder(a.encoder.as_deref().unwrap())?,
        ),
    };
    if !(a.bank.coreset > 0.0 && a.bank.coreset <= 1.0) {
        return Err(CliError::Usage(format!("--coreset {} must be in (0, 1]", a.bank.coreset)));
    }
    let manifest = load_manifest_checked(&a.manifest, Some(&spec), Some(&scales))?;
    let config = ad_config(scales.clone(), &a.bank, a.sigma);
    let backbone = Backbone::from_spec(spec.clone())?;

    let mut rec = RunRecord::new("ad-score", &a.out_dir)?;
    rec.set("scales", &scales);
    rec.set("encoder", &spec);
    rec.set("sigma", a.sigma.map_or("none".to_string(), |s| s.to_string()));
    rec.set("manifest", a.manifest.display());

    let banks = match banks {
        Some(b) => {
            rec.set("banks", "loaded");
            b
        }
        None => {
            rec.set("banks", "built");
            rec.set("coreset", a.bank.coreset);
            rec.set("l2_norm", a.bank.l2_norm);
            let train: Vec<Source> = sources(&manifest, Split::Train).into_iter().map(|(_, s)| s).collect();
            if train.is_empty() {
                return Err(CliError::Data("manifest has no train entries".into()));
            }
            anomaly::build_banks(&backbone, &train, &config)?
        }
    };

    let test = sources(&manifest, Split::Test);
    let mut outcomes = Vec::with_capacity(test.len());
    for (_, source) in &test {
        outcomes.push(anomaly::score_source(&backbone, &banks, *source, &config)?);
    }
    let mut listing = String::new();
    for (k, ((entry, _), outcome)) in test.iter().zip(&outcomes).enumerate() {
        let map = &outcome.map;
        tensorio::write_tensor(
            rec.output(format!("score_{k}.mrft")),
            &Tensor::new(vec![map.height, map.width], map.scores.clone())?,
        )?;
        tensorio::write_gray_png(
            rec.output(format!("score_{k}.png")),
            map.height,
            map.width,
            map.to_gray8(map.max()),
        )?;
        let _ = writeln!(
            listing,
            "index={k} image={} score={:.9e}",
            entry.image_path.display(),
            outcome.image_score
        );
    }
    fs::write(rec.output("image_scores.txt"), listing)?;
    rec.finish()
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    if !(a.fpr_limit > 0.0 && a.fpr_limit <= 1.0) {
        return Err(CliError::Usage(format!("--fpr-limit {} must be in (0, 1]", a.fpr_limit)));
    }
    let manifest = load_manifest_checked(&a.manifest, None, None)?;
    let split: Split = a.split.into();
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(CliError::Data(format!("manifest has no {} entries", split.as_str())));
    }
    let prefix = match a.metric {
        MetricArg::AuPro => "score",
        _ => "pred",
    };
    let pred_path = |k: usize| a.pred_dir.join(format!("{prefix}_{k}.mrft"));
    for k in 0..entries.len() {
        require_file(&pred_path(k))?;
    }
    let mut rec = RunRecord::new("eval", &a.out_dir)?;
    rec.set("split", split.as_str());
    rec.set("manifest", a.manifest.display());

    let mut kv = BTreeMap::new();
    match a.metric {
        MetricArg::Miou => {
            rec.set("metric", "miou");
            rec.set("classes", a.classes);
            rec.set("ignore", a.ignore.map_or("none".to_string(), |v| v.to_string()));
            let mut cm = ConfusionMatrix::new(a.classes, a.ignore);
            for (k, entry) in entries.iter().enumerate() {
                let gt_path = manifest.resolve(entry.mask_path.as_ref().ok_or_else(|| {
                    CliError::Data(format!("entry on line {} has no mask", entry.line))
                })?);
                let (h, w, gt) = tensorio::read_labels(&gt_path)?;
                let (ph, pw, pred) = tensorio::read_labels(pred_path(k))?;
                if (h, w) != (ph, pw) {
                    return Err(CliError::Data(format!("prediction {k} is {ph}x{pw}, truth is {h}x{w}")));
                }
                cm.add(&pred, &gt)?;
            }
            kv.insert("miou".to_string(), format!("{:.6}", cm.miou()?));
            for (c, iou) in cm.ious().iter().enumerate() {
                if let Some(v) = iou {
                    kv.insert(format!("iou_{c}"), format!("{:.6}", 100.0 * v));
                }
            }
        }
        MetricArg::Rmse => {
            rec.set("metric", "rmse");
            let mut preds = Vec::new();
            let mut gts = Vec::new();
            let mut valid = Vec::new();
            for (k, entry) in entries.iter().enumerate() {
                let gt_path = manifest.resolve(entry.mask_path.as_ref().ok_or_else(|| {
                    CliError::Data(format!("entry on line {} has no depth map", entry.line))
                })?);
                let (h, w, _, gt) = tensorio::read_raster(&gt_path)?;
                let (ph, pw, _, pred) = tensorio::read_raster(pred_path(k))?;
                if (h, w) != (ph, pw) {
                    return Err(CliError::Data(format!("prediction {k} is {ph}x{pw}, truth is {h}x{w}")));
                }
                valid.extend(gt.iter().map(|v| v.is_finite() && *v > 0.0));
                preds.extend(pred);
                gts.extend(gt);
            }
            kv.insert("rmse".to_string(), format!("{:.6}", metrics::rmse(&preds, &gts, Some(&valid))?));
        }
        MetricArg::AuPro => {
            rec.set("metric", "au-pro");
            rec.set("fpr_limit", a.fpr_limit);
            let mut maps = Vec::new();
            for (k, entry) in entries.iter().enumerate() {
                let (h, w, _, scores) = tensorio::read_raster(pred_path(k))?;
                let defect = match &entry.mask_path {
                    Some(m) => {
                        let (mh, mw, labels) = tensorio::read_labels(manifest.resolve(m))?;
                        if (mh, mw) != (h, w) {
                            return Err(CliError::Data(format!("score map {k} is {h}x{w}, mask is {mh}x{mw}")));
                        }
                        labels.iter().map(|&l| l > 0).collect()
                    }
                    None => vec![false; h * w],
                };
                maps.push((h, w, scores, defect));
            }
            let samples: Vec<ProSample> = maps
                .iter()
                .map(|(h, w, s, d)| ProSample {
                    height: *h,
                    width: *w,
                    scores: s,
                    defect: d,
                })
                .collect();
            let v = metrics::au_pro(&samples, a.fpr_limit)?;
            kv.insert("au_pro".to_string(), format!("{:.6}", 100.0 * v));
        }
    }
    let text: String = kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
    fs::write(rec.output("metrics.kv"), &text)?;
    let mut report = format!("metric report over {} {} images\n", entries.len(), split.as_str());
    for (k, v) in &kv {
        let _ = writeln!(report, "  {k:<10} {v}");
    }
    fs::write(rec.output("report.txt"), &report)?;
    print!("{report}");
    rec.finish()
}

fn cmd_pca_viz(a: PcaVizArgs) -> CliResult<()> {
    let scales = parse_scales(&a.features.scales)?;
    let spec = parse_encoder(&a.features.encoder)?;
    let target = parse_target(a.features.target.as_deref())?;
    if spec.kind != EncoderKind::Toy {
        return Err(CliError::Usage("pca-viz needs a toy encoder".into()));
    }
    if !(1..=3).contains(&a.components) {
        return Err(CliError::Usage("--components must be 1, 2 or 3".into()));
    }
    require_file(&a.image)?;
    if let Some(m) = &a.mask {
        require_file(m)?;
    }
    let mut rec = RunRecord::new("pca-viz", &a.out_dir)?;
    rec.set("scales", &scales);
    rec.set("encoder", &spec);
    rec.set("components", a.components);
    rec.set("image", a.image.display());
    rec.set("mask", a.mask.as_ref().map_or("none".to_string(), |m| m.display().to_string()));

    let image = encoder::load_image(&a.image)?;
    let backbone = Backbone::from_spec(spec)?;
    let fused = fused_features(&backbone, Source::Image(&image), &scales, target)?;
    let mask = match &a.mask {
        Some(path) => {
            let (h, w, labels) = tensorio::read_labels(path)?;
            let labels = head::downsample_nearest(&labels, h, w, fused.grid_h, fused.grid_w);
            Some(labels.into_iter().map(|l| l > 0).collect::<Vec<bool>>())
        }
        None => None,
    };
    let img = fusion::pca_project_fused(&fused, a.components, mask.as_deref())?;
    tensorio::write_tensor(
        rec.output("pca.mrft"),
        &Tensor::new(vec![img.height(), img.width(), img.channels()], img.data().to_vec())?,
    )?;
    let pixels: Vec<u8> = img.data().iter().map(|v| (v * 255.0).round() as u8).collect();
    if img.channels() == 1 {
        tensorio::write_gray_png(rec.output("pca.png"), img.height(), img.width(), pixels)?;
    } else {
        tensorio::write_rgb_png(rec.output("pca.png"), img.height(), img.width(), pixels)?;
    }
    rec.finish()
}
