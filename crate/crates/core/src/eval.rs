//! Error metrics, tissue and artifact uncertainty statistics, parameter
//! sweeps and report files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dunet::{build_dunet, build_unet, DUNetConfig, DunetError, Network};
use crate::mcdropout::{clamp_fa, infer_deterministic, infer_volume_prefixes, InferOptions, McError};
use crate::phantom::PhantomDataset;
use crate::train::{train, TrainConfig, TrainError};
use crate::volume::{BlockSpec, Mask, Tissue, TissueLabels, Volume, VolumeError};

/// Tissue means are reported only above this voxel count.
pub const MIN_TISSUE_VOXELS: usize = 100;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    Dims([usize; 3], [usize; 3]),
    #[error("expected a single-channel volume, got {0} channels")]
    Channels(usize),
    #[error("empty {0} list")]
    EmptyList(&'static str),
    #[error("sweep needs {needed} training phantoms, only {have} available")]
    NotEnoughSubjects { needed: usize, have: usize },
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Mc(#[from] McError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] DunetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn check_pair(a: &Volume, b: &Volume, mask: &Mask) -> Result<(), EvalError> {
    if a.dims() != b.dims() {
        return Err(EvalError::Dims(a.dims(), b.dims()));
    }
    if a.dims() != mask.dims() {
        return Err(EvalError::Dims(a.dims(), mask.dims()));
    }
    for v in [a, b] {
        if v.channels() != 1 {
            return Err(EvalError::Channels(v.channels()));
        }
    }
    Ok(())
}

/// Mean absolute difference over masked voxels of two single-channel maps.
pub fn mae(pred: &Volume, gt: &Volume, mask: &Mask) -> Result<f64, EvalError> {
    check_pair(pred, gt, mask)?;
    let n = mask.count();
    if n == 0 {
        return Err(EvalError::EmptyMask);
    }
    let s: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .zip(mask.bits())
        .filter(|(_, &m)| m)
        .map(|((&a, &b), _)| (a as f64 - b as f64).abs())
        .sum();
    Ok(s / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TissueStat {
    pub tissue: String,
    pub label: u8,
    pub voxels: usize,
    /// `None` below [`MIN_TISSUE_VOXELS`].
    pub mean: Option<f64>,
}

/// Mean of a single-channel map per foreground tissue label.
pub fn tissue_uncertainty(cov: &Volume, labels: &TissueLabels) -> Result<Vec<TissueStat>, EvalError> {
    if cov.dims() != labels.dims() {
        return Err(EvalError::Dims(cov.dims(), labels.dims()));
    }
    if cov.channels() != 1 {
        return Err(EvalError::Channels(cov.channels()));
    }
    let mut out = Vec::new();
    for t in Tissue::FOREGROUND {
        let (mut s, mut n) = (0.0f64, 0usize);
        for (&v, &l) in cov.data().iter().zip(labels.labels()) {
            if l == t as u8 {
                s += v as f64;
                n += 1;
            }
        }
        let mean = (n >= MIN_TISSUE_VOXELS).then(|| s / n as f64);
        out.push(TissueStat { tissue: t.name().to_string(), label: t as u8, voxels: n, mean });
    }
    Ok(out)
}

pub fn tissue_mean(stats: &[TissueStat], tissue: Tissue) -> Option<f64> {
    stats.iter().find(|s| s.label == tissue as u8).and_then(|s| s.mean)
}

/// Mean CoV inside `artifact ∩ parenchyma` over mean CoV in
/// `parenchyma ∖ artifact`.
pub fn artifact_contrast(cov: &Volume, artifact: &Mask, parenchyma: &Mask) -> Result<f64, EvalError> {
    if cov.channels() != 1 {
        return Err(EvalError::Channels(cov.channels()));
    }
    let inside = artifact.and(parenchyma)?;
    let outside = parenchyma.and_not(artifact)?;
    let mean = |m: &Mask| -> Result<f64, EvalError> {
        if cov.dims() != m.dims() {
            return Err(EvalError::Dims(cov.dims(), m.dims()));
        }
        let n = m.count();
        if n == 0 {
            return Err(EvalError::EmptyMask);
        }
        let s: f64 = cov.data().iter().zip(m.bits()).filter(|(_, &b)| b).map(|(&v, _)| v as f64).sum();
        Ok(s / n as f64)
    };
    Ok(mean(&inside)? / mean(&outside)?)
}

// ---- report ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectEval {
    pub subject: String,
    pub mae_fa: f64,
    pub mae_md: f64,
    pub tissue_cov_fa: Vec<TissueStat>,
    pub tissue_cov_md: Vec<TissueStat>,
    /// (FA, MD) artifact contrast, when an artifact mask was given.
    pub artifact_contrast: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport<C> {
    pub subjects: Vec<SubjectEval>,
    /// Resolved configuration of the run that produced the maps.
    pub fingerprint: C,
}

pub const REPORT_CSV_HEADER: [&str; 6] = ["subject", "mae_fa", "mae_md", "cov_fa_wm", "cov_fa_cortical_gm", "cov_fa_cc"];

impl<C: Serialize> EvalReport<C> {
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(REPORT_CSV_HEADER)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.subjects {
            w.write_record([
                s.subject.clone(),
                s.mae_fa.to_string(),
                s.mae_md.to_string(),
                opt(tissue_mean(&s.tissue_cov_fa, Tissue::WhiteMatter)),
                opt(tissue_mean(&s.tissue_cov_fa, Tissue::CorticalGray)),
                opt(tissue_mean(&s.tissue_cov_fa, Tissue::CorpusCallosum)),
            ])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8"))
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        std::fs::write(dir.join("report.csv"), self.to_csv()?)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Evaluate predicted (FA, MD) maps against a phantom's ground truth.
pub fn evaluate_subject(
    subject: &str,
    mean: &Volume,
    cov: Option<&Volume>,
    ds: &PhantomDataset,
    artifact: Option<&Mask>,
) -> Result<SubjectEval, EvalError> {
    let fa = clamp_fa(&mean.extract_channel(0)?);
    let md = mean.extract_channel(1)?;
    let mae_fa = mae(&fa, &ds.gt_fa, &ds.mask)?;
    let mae_md = mae(&md, &ds.gt_md, &ds.mask)?;
    let (mut tissue_cov_fa, mut tissue_cov_md, mut contrast) = (Vec::new(), Vec::new(), None);
    if let Some(cov) = cov {
        let (cf, cm) = (cov.extract_channel(0)?, cov.extract_channel(1)?);
        tissue_cov_fa = tissue_uncertainty(&cf, &ds.labels)?;
        tissue_cov_md = tissue_uncertainty(&cm, &ds.labels)?;
        if let Some(a) = artifact {
            contrast = Some([artifact_contrast(&cf, a, &ds.mask)?, artifact_contrast(&cm, a, &ds.mask)?]);
        }
    }
    Ok(SubjectEval { subject: subject.to_string(), mae_fa, mae_md, tissue_cov_fa, tissue_cov_md, artifact_contrast: contrast })
}

// ---- sweeps ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariable {
    DropoutRate,
    NPredictions,
    NTrainingSubjects,
}

impl SweepVariable {
    pub fn name(self) -> &'static str {
        match self {
            SweepVariable::DropoutRate => "dropout_rate",
            SweepVariable::NPredictions => "n_predictions",
            SweepVariable::NTrainingSubjects => "n_training_subjects",
        }
    }
}

impl std::str::FromStr for SweepVariable {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dropout_rate" | "dropout" => Ok(Self::DropoutRate),
            "n_predictions" | "npredictions" => Ok(Self::NPredictions),
            "n_training_subjects" | "training_size" => Ok(Self::NTrainingSubjects),
            _ => Err(format!("unknown sweep variable {s:?} (dropout_rate, n_predictions, n_training_subjects)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variable: String,
    pub value: f64,
    pub variant: String,
    pub mae_fa: f64,
    pub mae_md: f64,
    /// Published values for the same setting (real data), where available.
    pub paper_mae_fa: Option<f64>,
    pub paper_mae_md: Option<f64>,
}

pub const SWEEP_CSV_HEADER: [&str; 7] = ["variable", "value", "variant", "mae_fa", "mae_md", "paper_mae_fa", "paper_mae_md"];

/// Long-format sweep results, sorted by value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

/// Published MAE (FA, MD) by dropout rate, 100 predictions averaged, 16
/// training subjects.
pub const REFERENCE_DROPOUT: [(f64, f64, f64); 8] = [
    (0.0, 0.0498, 0.0524),
    (0.1, 0.0442, 0.0491),
    (0.2, 0.0438, 0.0496),
    (0.3, 0.0440, 0.0502),
    (0.4, 0.0442, 0.0506),
    (0.5, 0.0460, 0.0524),
    (0.6, 0.0479, 0.0537),
    (0.7, 0.0494, 0.0569),
];

/// Published MAE (FA, MD) by number of averaged predictions at rate 0.2.
pub const REFERENCE_NPRED: [(f64, f64, f64); 7] = [
    (1.0, 0.0460, 0.0529),
    (2.0, 0.0449, 0.0513),
    (5.0, 0.0442, 0.0503),
    (10.0, 0.0440, 0.0499),
    (20.0, 0.0439, 0.0497),
    (50.0, 0.0438, 0.0496),
    (100.0, 0.0438, 0.0496),
];

/// Published mean FA uncertainty by tissue (white matter, cortical gray
/// matter, corpus callosum).
pub const REFERENCE_TISSUE_COV: [(Tissue, f64); 3] =
    [(Tissue::WhiteMatter, 0.0478), (Tissue::CorticalGray, 0.0756), (Tissue::CorpusCallosum, 0.0288)];

fn reference(var: SweepVariable, value: f64) -> (Option<f64>, Option<f64>) {
    let table: &[(f64, f64, f64)] = match var {
        SweepVariable::DropoutRate => &REFERENCE_DROPOUT,
        SweepVariable::NPredictions => &REFERENCE_NPRED,
        SweepVariable::NTrainingSubjects => &[],
    };
    table.iter().find(|r| (r.0 - value).abs() < 1e-9).map_or((None, None), |r| (Some(r.1), Some(r.2)))
}

impl SweepTable {
    pub fn push(&mut self, var: SweepVariable, value: f64, variant: &str, mae_fa: f64, mae_md: f64) {
        let (paper_mae_fa, paper_mae_md) = if variant == "dunet_avg" { reference(var, value) } else { (None, None) };
        self.rows.push(SweepRow { variable: var.name().to_string(), value, variant: variant.to_string(), mae_fa, mae_md, paper_mae_fa, paper_mae_md });
    }

    /// Stable sort by value, keeping variant insertion order within a value.
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| a.value.total_cmp(&b.value));
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(SWEEP_CSV_HEADER)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("utf-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<Result<Vec<SweepRow>, _>>()?;
        Ok(Self { rows })
    }

    pub fn variant(&self, variant: &str) -> Vec<&SweepRow> {
        self.rows.iter().filter(|r| r.variant == variant).collect()
    }
}

/// Everything a sweep needs besides the swept variable.
#[derive(Debug, Clone)]
pub struct SweepContext<'a> {
    pub train_sets: &'a [PhantomDataset],
    pub test_set: &'a PhantomDataset,
    pub net: DUNetConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub infer_seed: u64,
    pub n_passes: usize,
    /// Inference stride; 0 means half the block size.
    pub infer_stride: usize,
    pub cache_dir: Option<PathBuf>,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn dataset_digest(sets: &[PhantomDataset]) -> u64 {
    let mut bytes = Vec::new();
    for d in sets {
        for v in [&d.input_dwi, &d.gt_fa, &d.gt_md] {
            for x in v.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        bytes.extend(d.mask.bits().iter().map(|&b| b as u8));
    }
    fnv1a(&bytes)
}

#[derive(Serialize)]
struct CacheKey<'a> {
    net: &'a DUNetConfig,
    train: &'a TrainConfig,
    plain: bool,
    init_seed: u64,
    data: u64,
}

/// Outcome of a cached training request.
pub struct Trained {
    pub net: Network<f32>,
    pub cache_hit: bool,
    pub key: u64,
}

impl SweepContext<'_> {
    fn spec(&self) -> Result<BlockSpec, EvalError> {
        let b = self.net.block_size;
        let s = if self.infer_stride == 0 { (b / 2).max(1) } else { self.infer_stride };
        Ok(BlockSpec::cubic(b, s)?)
    }

    /// Train (or load from the cache) one variant on the first `n_subjects`
    /// training phantoms.
    pub fn trained(&self, net_cfg: DUNetConfig, plain: bool, n_subjects: usize) -> Result<Trained, EvalError> {
        if n_subjects == 0 || n_subjects > self.train_sets.len() {
            return Err(EvalError::NotEnoughSubjects { needed: n_subjects, have: self.train_sets.len() });
        }
        let sets = &self.train_sets[..n_subjects];
        let key_json = serde_json::to_vec(&CacheKey { net: &net_cfg, train: &self.train, plain, init_seed: self.init_seed, data: dataset_digest(sets) })?;
        let key = fnv1a(&key_json);
        let path = self.cache_dir.as_ref().map(|d| d.join(format!("{key:016x}.ckpt")));
        if let Some(p) = path.as_ref().filter(|p| p.exists()) {
            log::info!("cache hit: {} (skipping training)", p.display());
            return Ok(Trained { net: Network::load(p)?, cache_hit: true, key });
        }
        let init = if plain { build_unet(net_cfg, self.init_seed)? } else { build_dunet(net_cfg, self.init_seed)? };
        log::info!("training {} p={} on {n_subjects} subject(s)", if plain { "unet" } else { "dunet" }, net_cfg.dropout_rate);
        let net = train(init, sets, &self.train)?.best;
        if let Some(p) = path {
            std::fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
            net.save(&p)?;
        }
        Ok(Trained { net, cache_hit: false, key })
    }

    /// (FA MAE, MD MAE) of MC averages over prefix pass counts `ns`.
    pub fn mc_maes(&self, net: &Network<f32>, ns: &[usize]) -> Result<Vec<(f64, f64)>, EvalError> {
        let t = self.test_set;
        let opts = InferOptions { seed: self.infer_seed, ..InferOptions::default() };
        let (results, _) = infer_volume_prefixes(net, &t.input_dwi, &t.mask, &self.spec()?, ns, opts)?;
        results.iter().map(|r| maes(&r.mean, t)).collect()
    }

    pub fn deterministic_mae(&self, net: &Network<f32>) -> Result<(f64, f64), EvalError> {
        let t = self.test_set;
        let mean = infer_deterministic(net, &t.input_dwi, &t.mask, &self.spec()?)?;
        maes(&mean, t)
    }
}

fn maes(mean: &Volume, ds: &PhantomDataset) -> Result<(f64, f64), EvalError> {
    let fa = clamp_fa(&mean.extract_channel(0)?);
    Ok((mae(&fa, &ds.gt_fa, &ds.mask)?, mae(&mean.extract_channel(1)?, &ds.gt_md, &ds.mask)?))
}

/// Train one DU-Net per rate and average `n_passes` predictions.
pub fn sweep_dropout(rates: &[f64], ctx: &SweepContext) -> Result<SweepTable, EvalError> {
    if rates.is_empty() {
        return Err(EvalError::EmptyList("dropout rate"));
    }
    let mut table = SweepTable::default();
    for &p in rates {
        let cfg = DUNetConfig { dropout_rate: p, ..ctx.net };
        let t = ctx.trained(cfg, false, ctx.train_sets.len())?;
        let (fa, md) = ctx.mc_maes(&t.net, &[ctx.n_passes])?[0];
        table.push(SweepVariable::DropoutRate, p, "dunet_avg", fa, md);
    }
    table.sort();
    Ok(table)
}

/// One trained network; MAE of the average of the first `n` passes for each
/// `n` in `ns`.
pub fn sweep_npredictions(ns: &[usize], net: &Network<f32>, ctx: &SweepContext) -> Result<SweepTable, EvalError> {
    if ns.is_empty() {
        return Err(EvalError::EmptyList("prediction count"));
    }
    let mut sorted = ns.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let maes = ctx.mc_maes(net, &sorted)?;
    let mut table = SweepTable::default();
    for (&n, &(fa, md)) in sorted.iter().zip(&maes) {
        table.push(SweepVariable::NPredictions, n as f64, "dunet_avg", fa, md);
    }
    Ok(table)
}

/// Per subject count: plain U-Net, DU-Net single pass and DU-Net average,
/// all from the same initialization seed.
pub fn sweep_training_size(counts: &[usize], ctx: &SweepContext) -> Result<SweepTable, EvalError> {
    if counts.is_empty() {
        return Err(EvalError::EmptyList("training subject count"));
    }
    let mut table = SweepTable::default();
    for &n in counts {
        let unet = ctx.trained(ctx.net, true, n)?;
        let (fa, md) = ctx.deterministic_mae(&unet.net)?;
        table.push(SweepVariable::NTrainingSubjects, n as f64, "unet", fa, md);
        let dunet = ctx.trained(ctx.net, false, n)?;
        let m = ctx.mc_maes(&dunet.net, &[1, ctx.n_passes])?;
        table.push(SweepVariable::NTrainingSubjects, n as f64, "dunet_single", m[0].0, m[0].1);
        table.push(SweepVariable::NTrainingSubjects, n as f64, "dunet_avg", m[1].0, m[1].1);
    }
    table.sort();
    Ok(table)
}

/// Relative MAE improvement of `better` over `baseline` per metric.
pub fn relative_improvement(baseline: (f64, f64), better: (f64, f64)) -> (f64, f64) {
    ((baseline.0 - better.0) / baseline.0, (baseline.1 - better.1) / baseline.1)
}

/// Per-tissue summary for reports keyed by tissue name.
pub fn tissue_summary(stats: &[TissueStat]) -> BTreeMap<String, Option<f64>> {
    stats.iter().map(|s| (s.tissue.clone(), s.mean)).collect()
}
