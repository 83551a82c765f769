//! Command-line front end. Each subcommand resolves a flat TOML config from
//! `--config FILE`, then `--set key=value` pairs, then explicit flags, and
//! writes the resolved config next to its outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dti::{fit_volume, DiffusionScheme, FitOptions};
use crate::dunet::{build_dunet, build_unet, DUNetConfig, Network};
use crate::eval::{evaluate_subject, sweep_dropout, sweep_npredictions, sweep_training_size, EvalReport, SweepContext, SweepTable, SweepVariable};
use crate::mcdropout::{clamp_fa, infer_volume, InferOptions, DEFAULT_EPSILON};
use crate::nifti;
use crate::nn::derive_seed;
use crate::phantom::{generate_phantom, inject_letter_artifact, ArtifactSpec, PhantomDataset, PhantomSpec, Polarity};
use crate::train::{train, TrainConfig, TrainError};
use crate::volume::{BlockSpec, Mask};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INTERNAL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys or values.
    Usage(String),
    /// Missing or malformed input files.
    Input(String),
    Internal(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) => EXIT_USAGE,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Internal(m) => write!(f, "error: {m}"),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn input(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliError {
    CliError::Internal(e.to_string())
}

#[derive(Parser, Debug)]
#[command(name = "mcdqmri", version, about = "MC-dropout uncertainty for deep-learning DTI parameter maps")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Flat TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic phantom dataset directory.
    Phantom(PhantomArgs),
    /// Fit diffusion tensors and write FA/MD maps.
    Fit(FitArgs),
    /// Train a network on phantom dataset directories.
    Train(TrainArgs),
    /// Monte Carlo dropout inference on an input volume.
    Infer(InferArgs),
    /// Compare predicted maps with phantom ground truth.
    Eval(EvalArgs),
    /// Dropout-rate, prediction-count or training-size sweep.
    Sweep(SweepArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[command(flatten)]
    common: Common,
    /// Cubic grid size (sets nx, ny, nz).
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Inject the letter "M" into the input volumes: bright or dark.
    #[arg(long)]
    artifact: Option<String>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    dwi: Option<PathBuf>,
    #[arg(long)]
    scheme: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    weighted: bool,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Phantom dataset directory (repeatable).
    #[arg(long)]
    data: Vec<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    dropout_rate: Option<f64>,
    /// Train a U-Net without dropout sites.
    #[arg(long)]
    plain: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    n_passes: Option<usize>,
    #[arg(long)]
    dropout_override: Option<f64>,
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Inference output directory (fa_mean.nii, md_mean.nii, optional CoV maps).
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    fa: Option<PathBuf>,
    #[arg(long)]
    md: Option<PathBuf>,
    /// Phantom dataset directory with the ground truth.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    artifact_mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    /// dropout_rate, n_predictions or n_training_subjects.
    #[arg(long)]
    variable: Option<String>,
    /// Comma-separated values of the swept variable.
    #[arg(long, value_delimiter = ',')]
    values: Vec<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_passes: Option<usize>,
}

// ---- config resolution ----

fn parse_set(pair: &str) -> Result<(String, toml::Value), CliError> {
    let (k, v) = pair.split_once('=').ok_or_else(|| usage(format!("--set expects KEY=VALUE, got {pair:?}")))?;
    let k = k.trim().to_string();
    let v = v.trim();
    // TOML literal when it parses, bare string otherwise
    let value = toml::from_str::<toml::Table>(&format!("v = {v}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k, value))
}

struct Resolver {
    table: toml::Table,
}

impl Resolver {
    fn new(common: &Common) -> Result<Self, CliError> {
        let mut table = match &common.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| input(format!("config {}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| usage(format!("config {}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in &common.set {
            let (k, v) = parse_set(s)?;
            table.insert(k, v);
        }
        let mut r = Self { table };
        r.opt("seed", common.seed.map(|s| s as i64));
        r.opt("out", common.out.as_ref().map(path_str));
        Ok(r)
    }

    fn opt<V: Into<toml::Value>>(&mut self, key: &str, v: Option<V>) {
        if let Some(v) = v {
            self.table.insert(key.to_string(), v.into());
        }
    }

    fn resolve<T: DeserializeOwned>(self) -> Result<T, CliError> {
        toml::Value::Table(self.table).try_into().map_err(usage)
    }
}

fn path_str(p: &PathBuf) -> String {
    p.display().to_string()
}

fn write_snapshot<T: Serialize>(dir: &Path, name: &str, cfg: &T) -> Result<(), CliError> {
    let text = toml::to_string(cfg).map_err(internal)?;
    std::fs::write(dir.join(name), text).map_err(|e| internal(format!("writing {name}: {e}")))
}

fn make_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| input(format!("cannot create {}: {e}", out.display())))
}

// ---- phantom ----

/// Artifact keys accepted next to the phantom geometry keys.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ArtifactKeys {
    pub artifact: Option<Polarity>,
    pub artifact_raster_scale: usize,
    pub artifact_slices: usize,
    pub artifact_intensity: f32,
}

impl Default for ArtifactKeys {
    fn default() -> Self {
        Self { artifact: None, artifact_raster_scale: 2, artifact_slices: 4, artifact_intensity: 3.0 }
    }
}

const ARTIFACT_KEYS: [&str; 4] = ["artifact", "artifact_raster_scale", "artifact_slices", "artifact_intensity"];

fn cmd_phantom(a: PhantomArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(&a.common)?;
    let out = match r.table.remove("out") {
        Some(toml::Value::String(s)) => PathBuf::from(s),
        _ => return Err(usage("missing output directory (--out or `out` key)")),
    };
    if let Some(n) = a.size {
        for k in ["nx", "ny", "nz"] {
            r.table.insert(k.into(), toml::Value::Integer(n as i64));
        }
    }
    r.opt("noise_sigma", a.noise_sigma);
    r.opt("artifact", a.artifact);
    let mut art = toml::Table::new();
    for k in ARTIFACT_KEYS {
        if let Some(v) = r.table.remove(k) {
            art.insert(k.into(), v);
        }
    }
    let spec: PhantomSpec = r.resolve()?;
    let art: ArtifactKeys = toml::Value::Table(art).try_into().map_err(usage)?;
    log::info!("phantom seed {}", spec.seed);
    let mut ds = generate_phantom(&spec).map_err(usage)?;
    make_out_dir(&out)?;
    let mut artifact_mask = None;
    if let Some(polarity) = art.artifact {
        let mut aspec = ArtifactSpec::centered(spec.dims(), polarity, art.artifact_raster_scale, art.artifact_slices);
        aspec.scale_bright = art.artifact_intensity;
        let (vol, mask) = inject_letter_artifact(&ds.input_dwi, &aspec).map_err(usage)?;
        ds.input_dwi = vol;
        artifact_mask = Some(mask);
    }
    ds.write_dir(&out).map_err(internal)?;
    if let Some(m) = artifact_mask {
        nifti::write_mask(out.join("artifact_mask.nii"), &m, ds.voxel_size()).map_err(internal)?;
    }
    let mut snapshot = spec.to_toml();
    snapshot.push_str(&toml::to_string(&art).map_err(internal)?);
    std::fs::write(out.join("phantom.toml"), snapshot).map_err(internal)?;
    Ok(())
}

// ---- fit ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FitRun {
    pub dwi: PathBuf,
    pub scheme: PathBuf,
    pub mask: Option<PathBuf>,
    pub out: PathBuf,
    #[serde(default)]
    pub weighted: bool,
    #[serde(default = "default_floor")]
    pub floor_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_floor() -> f64 {
    FitOptions::default().floor_fraction
}

fn cmd_fit(a: FitArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(&a.common)?;
    r.opt("dwi", a.dwi.as_ref().map(path_str));
    r.opt("scheme", a.scheme.as_ref().map(path_str));
    r.opt("mask", a.mask.as_ref().map(path_str));
    if a.weighted {
        r.opt("weighted", Some(true));
    }
    let cfg: FitRun = r.resolve()?;
    if !cfg.scheme.exists() {
        return Err(input(format!("scheme file {} not found", cfg.scheme.display())));
    }
    let scheme = DiffusionScheme::read(&cfg.scheme).map_err(input)?;
    let dwi = nifti::read_volume(&cfg.dwi).map_err(|e| input(format!("{}: {e}", cfg.dwi.display())))?;
    let mask = match &cfg.mask {
        Some(p) => nifti::read_mask(p).map_err(|e| input(format!("{}: {e}", p.display())))?,
        None => Mask::filled(dwi.dims(), true),
    };
    let opts = FitOptions { floor_fraction: cfg.floor_fraction, weighted: cfg.weighted };
    let fit = fit_volume(&dwi, &mask, &scheme, opts).map_err(input)?;
    make_out_dir(&cfg.out)?;
    nifti::write_volume(cfg.out.join("fa.nii"), &fit.fa).map_err(internal)?;
    nifti::write_volume(cfg.out.join("md.nii"), &fit.md).map_err(internal)?;
    write_snapshot(&cfg.out, "config.toml", &cfg)?;
    log::info!(
        "fitted {} voxels, {} clamped signals, {} flagged voxels",
        fit.summary.fitted_voxels,
        fit.summary.clamped_signals,
        fit.summary.flagged_voxels
    );
    Ok(())
}

// ---- train ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRun {
    pub data: Vec<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub plain: bool,
    pub depth: usize,
    pub base_kernels: usize,
    pub block_size: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub blocks_per_epoch: usize,
    pub val_fraction: f64,
    pub patience: usize,
    pub lr: f64,
    pub block_stride: usize,
}

impl Default for TrainRun {
    fn default() -> Self {
        let n = DUNetConfig::desk();
        let t = TrainConfig::default();
        Self {
            data: Vec::new(),
            out: PathBuf::new(),
            seed: 0,
            plain: false,
            depth: n.depth,
            base_kernels: n.base_kernels,
            block_size: n.block_size,
            dropout_rate: n.dropout_rate,
            epochs: t.epochs,
            blocks_per_epoch: t.blocks_per_epoch,
            val_fraction: t.val_fraction,
            patience: t.patience,
            lr: t.lr,
            block_stride: t.block_stride,
        }
    }
}

impl TrainRun {
    pub fn net_config(&self) -> DUNetConfig {
        DUNetConfig {
            depth: self.depth,
            base_kernels: self.base_kernels,
            block_size: self.block_size,
            dropout_rate: self.dropout_rate,
            ..DUNetConfig::desk()
        }
    }

    /// Seeds for weight init and for the training loop.
    pub fn derived_seeds(&self) -> (u64, u64) {
        (derive_seed(self.seed, 0), derive_seed(self.seed, 1))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            blocks_per_epoch: self.blocks_per_epoch,
            val_fraction: self.val_fraction,
            seed: self.derived_seeds().1,
            patience: self.patience,
            lr: self.lr,
            block_stride: self.block_stride,
        }
    }
}

fn read_datasets(dirs: &[PathBuf]) -> Result<Vec<PhantomDataset>, CliError> {
    dirs.iter().map(|d| PhantomDataset::read_dir(d).map_err(|e| input(format!("{}: {e}", d.display())))).collect()
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(&a.common)?;
    if !a.data.is_empty() {
        r.opt("data", Some(toml::Value::Array(a.data.iter().map(|p| toml::Value::String(path_str(p))).collect())));
    }
    r.opt("epochs", a.epochs.map(|v| v as i64));
    r.opt("dropout_rate", a.dropout_rate);
    if a.plain {
        r.opt("plain", Some(true));
    }
    let cfg: TrainRun = r.resolve()?;
    if cfg.out.as_os_str().is_empty() {
        return Err(usage("missing output directory (--out or `out` key)"));
    }
    if cfg.data.is_empty() {
        return Err(usage("no training data (--data DIR)"));
    }
    let datasets = read_datasets(&cfg.data)?;
    let (init_seed, loop_seed) = cfg.derived_seeds();
    log::info!("seed {} -> init seed {init_seed}, training seed {loop_seed}", cfg.seed);
    let net_cfg = cfg.net_config();
    let init: Network<f32> = if cfg.plain { build_unet(net_cfg, init_seed) } else { build_dunet(net_cfg, init_seed) }.map_err(usage)?;
    make_out_dir(&cfg.out)?;
    write_snapshot(&cfg.out, "config.toml", &cfg)?;
    let save = |name: &str, net: &Network<f32>| net.save(cfg.out.join(name)).map_err(internal);
    match train(init, &datasets, &cfg.train_config()) {
        Ok(outcome) => {
            std::fs::write(cfg.out.join("history.csv"), outcome.history.to_csv()).map_err(internal)?;
            save("best.ckpt", &outcome.best)?;
            save("final.ckpt", &outcome.last)?;
            log::info!("best epoch {} of {}", outcome.history.best_epoch, outcome.history.epochs.len());
            Ok(())
        }
        Err(TrainError::Diverged { epoch, last_good, history }) => {
            std::fs::write(cfg.out.join("history.csv"), history.to_csv()).map_err(internal)?;
            save("best.ckpt", &last_good)?;
            Err(internal(format!("training diverged at epoch {epoch}; last good weights saved to best.ckpt")))
        }
        Err(e @ (TrainError::Config(_) | TrainError::NoBlocks)) => Err(usage(e)),
        Err(e) => Err(internal(e)),
    }
}

// ---- infer ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InferRun {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub mask: PathBuf,
    pub out: PathBuf,
    #[serde(default = "default_passes")]
    pub n_passes: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub dropout_override: Option<f64>,
    /// Block stride; 0 means half the block size.
    #[serde(default)]
    pub stride: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_passes() -> usize {
    100
}

fn default_workers() -> usize {
    1
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}

fn cmd_infer(a: InferArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(&a.common)?;
    r.opt("checkpoint", a.checkpoint.as_ref().map(path_str));
    r.opt("input", a.input.as_ref().map(path_str));
    r.opt("mask", a.mask.as_ref().map(path_str));
    r.opt("n_passes", a.n_passes.map(|v| v as i64));
    r.opt("dropout_override", a.dropout_override);
    r.opt("workers", a.workers.map(|v| v as i64));
    let cfg: InferRun = r.resolve()?;
    if cfg.n_passes == 0 || cfg.workers == 0 {
        return Err(usage("n_passes and workers must be at least 1"));
    }
    let mut net = Network::load(&cfg.checkpoint).map_err(|e| input(format!("{}: {e}", cfg.checkpoint.display())))?;
    if let Some(p) = cfg.dropout_override {
        net.set_dropout_rate(p).map_err(usage)?;
    }
    let dwi = nifti::read_volume(&cfg.input).map_err(|e| input(format!("{}: {e}", cfg.input.display())))?;
    let mask = nifti::read_mask(&cfg.mask).map_err(|e| input(format!("{}: {e}", cfg.mask.display())))?;
    if dwi.channels() != net.config().in_channels {
        return Err(input(format!("input has {} channels, network expects {}", dwi.channels(), net.config().in_channels)));
    }
    if dwi.dims() != mask.dims() {
        return Err(input(format!("input dims {:?} differ from mask dims {:?}", dwi.dims(), mask.dims())));
    }
    let b = net.config().block_size;
    let stride = if cfg.stride == 0 { (b / 2).max(1) } else { cfg.stride };
    let spec = BlockSpec::cubic(b, stride).map_err(usage)?;
    if cfg.workers > 1 {
        // ignore failure when a pool already exists in this process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    let opts = InferOptions { seed: cfg.seed, workers: cfg.workers, epsilon: cfg.epsilon };
    let (res, manifest) = infer_volume(&net, &dwi, &mask, &spec, cfg.n_passes, opts).map_err(internal)?;
    make_out_dir(&cfg.out)?;
    let fa = clamp_fa(&res.mean.extract_channel(0).map_err(internal)?);
    let md = res.mean.extract_channel(1).map_err(internal)?;
    nifti::write_volume(cfg.out.join("fa_mean.nii"), &fa).map_err(internal)?;
    nifti::write_volume(cfg.out.join("md_mean.nii"), &md).map_err(internal)?;
    let mut outputs = vec!["fa_mean.nii", "md_mean.nii"];
    let mut extra = serde_json::Map::new();
    if let Some(u) = &res.uncertainty {
        nifti::write_volume(cfg.out.join("fa_cov.nii"), &u.cov.extract_channel(0).map_err(internal)?).map_err(internal)?;
        nifti::write_volume(cfg.out.join("md_cov.nii"), &u.cov.extract_channel(1).map_err(internal)?).map_err(internal)?;
        outputs.extend(["fa_cov.nii", "md_cov.nii"]);
        extra.insert("epsilon".into(), u.epsilon.into());
    } else {
        let why = "uncertainty maps need at least 2 passes; n_passes = 1";
        log::info!("{why}: CoV maps not written");
        extra.insert("cov_omitted".into(), why.into());
    }
    extra.insert("outputs".into(), outputs.into());
    let mut doc = serde_json::to_value(&manifest).map_err(internal)?;
    doc.as_object_mut().expect("manifest is an object").extend(extra);
    std::fs::write(cfg.out.join("manifest.json"), serde_json::to_string_pretty(&doc).map_err(internal)? + "\n").map_err(internal)?;
    write_snapshot(&cfg.out, "config.toml", &cfg)?;
    Ok(())
}

// ---- eval ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalRun {
    pub fa: PathBuf,
    pub md: PathBuf,
    pub fa_cov: Option<PathBuf>,
    pub md_cov: Option<PathBuf>,
    pub truth: PathBuf,
    pub artifact_mask: Option<PathBuf>,
    pub out: PathBuf,
    #[serde(default = "default_subject")]
    pub subject: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_subject() -> String {
    "subject".into()
}

/// Eval config plus inference bookkeeping found next to the predictions.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalFingerprint {
    pub config: EvalRun,
    pub inference: Option<serde_json::Value>,
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(&a.common)?;
    if let Some(dir) = &a.pred {
        r.opt("fa", Some(path_str(&dir.join("fa_mean.nii"))));
        r.opt("md", Some(path_str(&dir.join("md_mean.nii"))));
        for k in ["fa_cov", "md_cov"] {
            let p = dir.join(format!("{k}.nii"));
            if p.exists() {
                r.opt(k, Some(path_str(&p)));
            }
        }
    }
    r.opt("fa", a.fa.as_ref().map(path_str));
    r.opt("md", a.md.as_ref().map(path_str));
    r.opt("truth", a.truth.as_ref().map(path_str));
    r.opt("artifact_mask", a.artifact_mask.as_ref().map(path_str));
    let cfg: EvalRun = r.resolve()?;
    let read = |p: &Path| nifti::read_volume(p).map_err(|e| input(format!("{}: {e}", p.display())));
    let ds = PhantomDataset::read_dir(&cfg.truth).map_err(|e| input(format!("{}: {e}", cfg.truth.display())))?;
    let fa = read(&cfg.fa)?;
    let md = read(&cfg.md)?;
    let mean = crate::volume::Volume::stack(&[&fa, &md]).map_err(input)?;
    let cov = match (&cfg.fa_cov, &cfg.md_cov) {
        (Some(f), Some(m)) => Some(crate::volume::Volume::stack(&[&read(f)?, &read(m)?]).map_err(input)?),
        _ => None,
    };
    let artifact = match &cfg.artifact_mask {
        Some(p) => Some(nifti::read_mask(p).map_err(|e| input(format!("{}: {e}", p.display())))?),
        None => None,
    };
    let subject = evaluate_subject(&cfg.subject, &mean, cov.as_ref(), &ds, artifact.as_ref()).map_err(input)?;
    let manifest = cfg.fa.parent().map(|d| d.join("manifest.json")).filter(|p| p.exists());
    let inference = match manifest {
        Some(p) => {
            let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p).map_err(input)?).map_err(input)?;
            let keep = ["seed", "n_passes", "dropout_rate", "dropout_sites"];
            Some(serde_json::Value::Object(v.as_object().into_iter().flatten().filter(|(k, _)| keep.contains(&k.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect()))
        }
        None => None,
    };
    let report = EvalReport { subjects: vec![subject], fingerprint: EvalFingerprint { config: cfg.clone(), inference } };
    make_out_dir(&cfg.out)?;
    report.write(&cfg.out).map_err(internal)?;
    write_snapshot(&cfg.out, "config.toml", &cfg)?;
    Ok(())
}

// ---- sweep ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SweepRun {
    pub variable: String,
    pub values: Vec<f64>,
    pub out: PathBuf,
    pub seed: u64,
    /// Training phantom directories; generated from `seed` when empty.
    pub data: Vec<PathBuf>,
    /// Held-out phantom directory; generated when absent.
    pub test: Option<PathBuf>,
    pub n_train_phantoms: usize,
    pub phantom_size: usize,
    pub n_passes: usize,
    pub depth: usize,
    pub base_kernels: usize,
    pub block_size: usize,
    pub dropout_rate: f64,
    pub epochs: usize,
    pub blocks_per_epoch: usize,
    pub patience: usize,
    pub lr: f64,
    pub block_stride: usize,
    pub infer_stride: usize,
    /// Checkpoint cache; defaults to `<out>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for SweepRun {
    fn default() -> Self {
        let t = TrainRun::default();
        Self {
            variable: "dropout_rate".into(),
            values: Vec::new(),
            out: PathBuf::new(),
            seed: 0,
            data: Vec::new(),
            test: None,
            n_train_phantoms: 2,
            phantom_size: 32,
            n_passes: 100,
            depth: t.depth,
            base_kernels: t.base_kernels,
            block_size: t.block_size,
            dropout_rate: t.dropout_rate,
            epochs: t.epochs,
            blocks_per_epoch: t.blocks_per_epoch,
            patience: t.patience,
            lr: t.lr,
            block_stride: t.block_stride,
            infer_stride: 0,
            cache_dir: None,
        }
    }
}

#[derive(Serialize)]
struct SweepDoc<'a> {
    table: &'a SweepTable,
    fingerprint: &'a SweepRun,
    cache_hits: usize,
}

fn generated_phantom(cfg: &SweepRun, index: u64) -> Result<PhantomDataset, CliError> {
    let n = cfg.phantom_size;
    let spec = PhantomSpec { nx: n, ny: n, nz: n, ..PhantomSpec::default() }.with_seed(derive_seed(cfg.seed, 100 + index));
    log::info!("phantom {index}: seed {}", spec.seed);
    generate_phantom(&spec).map_err(usage)
}

fn cmd_sweep(a: SweepArgs) -> Result<(), CliError> {
    let mut r = Resolver::new(&a.common)?;
    r.opt("variable", a.variable);
    if !a.values.is_empty() {
        r.opt("values", Some(toml::Value::Array(a.values.iter().map(|&v| toml::Value::Float(v)).collect())));
    }
    r.opt("epochs", a.epochs.map(|v| v as i64));
    r.opt("n_passes", a.n_passes.map(|v| v as i64));
    let cfg: SweepRun = r.resolve()?;
    if cfg.out.as_os_str().is_empty() {
        return Err(usage("missing output directory (--out or `out` key)"));
    }
    let var: SweepVariable = cfg.variable.parse().map_err(usage)?;
    if cfg.values.is_empty() {
        return Err(usage("no sweep values (--values)"));
    }
    let needed = match var {
        SweepVariable::NTrainingSubjects => cfg.values.iter().fold(0.0f64, |m, &v| m.max(v)) as usize,
        _ => cfg.n_train_phantoms,
    };
    let train_sets = if cfg.data.is_empty() {
        (0..needed as u64).map(|i| generated_phantom(&cfg, i + 1)).collect::<Result<Vec<_>, _>>()?
    } else {
        read_datasets(&cfg.data)?
    };
    let test_set = match &cfg.test {
        Some(p) => PhantomDataset::read_dir(p).map_err(|e| input(format!("{}: {e}", p.display())))?,
        None => generated_phantom(&cfg, 0)?,
    };
    let train = TrainRun {
        data: cfg.data.clone(),
        out: cfg.out.clone(),
        seed: cfg.seed,
        plain: false,
        depth: cfg.depth,
        base_kernels: cfg.base_kernels,
        block_size: cfg.block_size,
        dropout_rate: cfg.dropout_rate,
        epochs: cfg.epochs,
        blocks_per_epoch: cfg.blocks_per_epoch,
        val_fraction: 0.2,
        patience: cfg.patience,
        lr: cfg.lr,
        block_stride: cfg.block_stride,
    };
    let (init_seed, _) = train.derived_seeds();
    let cache_dir = cfg.cache_dir.clone().unwrap_or_else(|| cfg.out.join("cache"));
    let ctx = SweepContext {
        train_sets: &train_sets,
        test_set: &test_set,
        net: train.net_config(),
        train: train.train_config(),
        init_seed,
        infer_seed: derive_seed(cfg.seed, 2),
        n_passes: cfg.n_passes,
        infer_stride: cfg.infer_stride,
        cache_dir: Some(cache_dir),
    };
    ctx.net.validate().map_err(usage)?;
    let as_counts = |vals: &[f64]| -> Result<Vec<usize>, CliError> {
        vals.iter()
            .map(|&v| if v >= 1.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(usage(format!("{v} is not a positive integer"))) })
            .collect()
    };
    make_out_dir(&cfg.out)?;
    write_snapshot(&cfg.out, "config.toml", &cfg)?;
    let mut hits = 0;
    let table = match var {
        SweepVariable::DropoutRate => sweep_dropout(&cfg.values, &ctx),
        SweepVariable::NPredictions => {
            let t = ctx.trained(ctx.net, false, train_sets.len()).map_err(internal)?;
            hits += t.cache_hit as usize;
            sweep_npredictions(&as_counts(&cfg.values)?, &t.net, &ctx)
        }
        SweepVariable::NTrainingSubjects => sweep_training_size(&as_counts(&cfg.values)?, &ctx),
    }
    .map_err(internal)?;
    let name = var.name();
    std::fs::write(cfg.out.join(format!("sweep_{name}.csv")), table.to_csv().map_err(internal)?).map_err(internal)?;
    let doc = SweepDoc { table: &table, fingerprint: &cfg, cache_hits: hits };
    std::fs::write(cfg.out.join(format!("sweep_{name}.json")), serde_json::to_string_pretty(&doc).map_err(internal)? + "\n")
        .map_err(internal)?;
    Ok(())
}

/// Parse arguments, run one subcommand, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.cmd {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.code()
        }
    }
}
