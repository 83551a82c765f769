//! Block-level training of the network with Adam on the masked L1 loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dunet::{masked_l1, normalize_input, volume_to_array, DunetError, Mode, Network, PassRng};
use crate::nn::{derive_seed, NdArray, Param, Real};
use crate::phantom::PhantomDataset;
use crate::volume::{extract_blocks, BlockSpec, Mask, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("NaN gradient in parameter {0}")]
    NanGradient(String),
    #[error("training diverged at epoch {epoch} (loss is NaN); returning the last good network")]
    Diverged { epoch: usize, last_good: Box<Network<f32>>, history: TrainHistory },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no training blocks: every block is outside the mask")]
    NoBlocks,
    #[error(transparent)]
    Net(#[from] DunetError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments for every parameter, in registry order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub cfg: AdamConfig,
    pub m: Vec<NdArray<T>>,
    pub v: Vec<NdArray<T>>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(cfg: AdamConfig, params: &[&mut Param<T>]) -> Self {
        let zeros = || params.iter().map(|p| NdArray::zeros(p.value.shape())).collect();
        Self { cfg, m: zeros(), v: zeros(), t: 0 }
    }
}

/// One bias-corrected Adam update followed by zeroing the gradients. A NaN
/// gradient aborts before any parameter changes.
pub fn adam_step<T: Real>(params: &mut [&mut Param<T>], state: &mut AdamState<T>) -> Result<(), TrainError> {
    assert_eq!(params.len(), state.m.len(), "optimizer state does not match parameter list");
    if let Some(p) = params.iter().find(|p| p.grad.has_nan()) {
        return Err(TrainError::NanGradient(p.name.clone()));
    }
    state.t += 1;
    let c = state.cfg;
    let t = state.t as i32;
    let bc1 = T::of(1.0 - c.beta1.powi(t));
    let bc2 = T::of(1.0 - c.beta2.powi(t));
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one, lr, eps) = (T::one(), T::of(c.lr), T::of(c.eps));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data();
        let w = p.value.data_mut();
        for (((w, &g), m), v) in w.iter_mut().zip(g).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
        p.zero_grad();
    }
    Ok(())
}

/// Seeded shuffle split into (train, validation). The validation share is
/// `round(n · val_fraction)`, at least one item when `n ≥ 2` and never all.
pub fn split_dataset<T>(mut items: Vec<T>, val_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), TrainError> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(TrainError::Config(format!("val_fraction {val_fraction} outside (0, 1)")));
    }
    let n = items.len();
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if n >= 2 {
        n_val = n_val.clamp(1, n - 1);
    } else {
        n_val = 0;
    }
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = items.split_off(n - n_val);
    Ok((items, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Steps per epoch; 0 means one pass over every training block.
    pub blocks_per_epoch: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub patience: usize,
    pub lr: f64,
    /// Block extraction stride; 0 means half the block size.
    pub block_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 50, blocks_per_epoch: 0, val_fraction: 0.2, seed: 0, patience: 20, lr: 1e-3, block_stride: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were returned; 0 for the initial weights.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    /// Equal losses epoch by epoch, ignoring wall time.
    pub fn same_losses(&self, other: &TrainHistory) -> bool {
        self.best_epoch == other.best_epoch
            && self.epochs.len() == other.epochs.len()
            && self
                .epochs
                .iter()
                .zip(&other.epochs)
                .all(|(a, b)| a.train_loss.to_bits() == b.train_loss.to_bits() && a.val_loss.to_bits() == b.val_loss.to_bits())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["epoch", "train_loss", "val_loss", "seconds"]).expect("in-memory write");
        for r in &self.epochs {
            w.serialize((r.epoch, r.train_loss, r.val_loss, r.seconds)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
    }
}

/// One training example: normalized input, target maps and loss mask.
#[derive(Debug, Clone)]
pub struct Sample {
    pub input: NdArray<f32>,
    pub target: NdArray<f32>,
    pub mask: Mask,
}

/// All mask-overlapping blocks of a dataset, with inputs scaled by the
/// in-mask mean b0.
pub fn dataset_blocks(ds: &PhantomDataset, spec: &BlockSpec) -> Result<Vec<Sample>, TrainError> {
    let input = normalize_input(&ds.input_dwi, &ds.mask);
    let target = Volume::stack(&[&ds.gt_fa, &ds.gt_md])?;
    let inputs = extract_blocks(&input, &ds.mask, spec, true)?;
    let targets = extract_blocks(&target, &ds.mask, spec, true)?;
    Ok(inputs
        .into_iter()
        .zip(targets)
        .map(|(i, t)| Sample { input: volume_to_array(&i.volume), target: volume_to_array(&t.volume), mask: i.mask })
        .collect())
}

pub fn block_spec(net_block: usize, stride: usize) -> Result<BlockSpec, TrainError> {
    let stride = if stride == 0 { (net_block / 2).max(1) } else { stride };
    Ok(BlockSpec::cubic(net_block, stride)?)
}

/// Mean deterministic-mode loss over `samples`.
pub fn evaluate_loss(net: &Network<f32>, samples: &[Sample]) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in samples {
        let y = net.forward(&s.input, Mode::Deterministic, PassRng::new(0, 0))?;
        total += masked_l1(&y, &s.target, &s.mask)?.0;
    }
    Ok(total / samples.len().max(1) as f64)
}

pub struct TrainOutcome {
    /// Weights with the lowest validation loss.
    pub best: Network<f32>,
    pub last: Network<f32>,
    pub history: TrainHistory,
}

/// Train on every mask-overlapping block of `datasets`.
pub fn train(net: Network<f32>, datasets: &[PhantomDataset], cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if datasets.is_empty() {
        return Err(TrainError::Config("at least one dataset is required".into()));
    }
    let spec = block_spec(net.config().block_size, cfg.block_stride)?;
    let mut blocks = Vec::new();
    for ds in datasets {
        blocks.extend(dataset_blocks(ds, &spec)?);
    }
    train_on_blocks(net, blocks, cfg)
}

pub fn train_on_blocks(mut net: Network<f32>, blocks: Vec<Sample>, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if blocks.is_empty() {
        return Err(TrainError::NoBlocks);
    }
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(TrainError::Config(format!("learning rate {} must be finite and non-negative", cfg.lr)));
    }
    let (train_set, val_set) = split_dataset(blocks, cfg.val_fraction, derive_seed(cfg.seed, 0))?;
    let val_set = if val_set.is_empty() { train_set.clone() } else { val_set };
    let mut state = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &net.params_mut());
    let dropout_seed = derive_seed(cfg.seed, 1);
    let steps = if cfg.blocks_per_epoch == 0 { train_set.len() } else { cfg.blocks_per_epoch };

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Network<f32>)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = Vec::new();
    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2 + epoch as u64));
        let mut loss_sum = 0.0;
        for k in 0..steps {
            if k % train_set.len() == 0 {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
            }
            let s = &train_set[order[k % train_set.len()]];
            let (y, cache) = net.forward_train(&s.input, Mode::Train, PassRng::new(dropout_seed, step))?;
            step += 1;
            let (loss, grad) = masked_l1(&y, &s.target, &s.mask)?;
            if !loss.is_finite() {
                return Err(diverged(epoch, best, net, history));
            }
            loss_sum += loss;
            net.backward(&cache, &grad)?;
            match adam_step(&mut net.params_mut(), &mut state) {
                Ok(()) => {}
                Err(TrainError::NanGradient(name)) => {
                    log::warn!("NaN gradient in {name} at epoch {epoch}");
                    return Err(diverged(epoch, best, net, history));
                }
                Err(e) => return Err(e),
            }
        }
        let val_loss = evaluate_loss(&net, &val_set)?;
        let train_loss = loss_sum / steps as f64;
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss, seconds: start.elapsed().as_secs_f64() });
        log::debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        if !val_loss.is_finite() {
            return Err(diverged(epoch, best, net, history));
        }
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, net.clone()));
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    let best = best.map(|(_, n)| n).unwrap_or_else(|| net.clone());
    Ok(TrainOutcome { best, last: net, history })
}

fn diverged(epoch: usize, best: Option<(f64, Network<f32>)>, current: Network<f32>, history: TrainHistory) -> TrainError {
    // the current weights may already hold NaN; fall back to the best snapshot
    let last_good = best.map(|(_, n)| n).unwrap_or(current);
    TrainError::Diverged { epoch, last_good: Box::new(last_good), history }
}
