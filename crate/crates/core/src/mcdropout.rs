//! Monte Carlo dropout inference: repeated stochastic passes, streaming
//! mean/variance, averaged maps and coefficient-of-variation maps.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dunet::{normalize_input, volume_to_array, DunetError, Mode, Network, PassRng};
use crate::nn::{derive_seed, NdArray, MAX_SITES};
use crate::volume::{stitch_blocks, BlockSpec, Dims, Mask, Volume, VolumeError};

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum McError {
    #[error("uncertainty needs at least 2 passes, got {0}")]
    TooFewPasses(usize),
    #[error("n_passes must be at least 1")]
    NoPasses,
    #[error("ensemble shape {expected:?} does not match sample shape {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Net(#[from] DunetError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Per-element running mean and sum of squared deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    shape: Vec<usize>,
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Ensemble {
    pub fn new(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), n: 0, mean: vec![0.0; len], m2: vec![0.0; len] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn m2(&self) -> &[f64] {
        &self.m2
    }

    /// Welford update with one sample.
    pub fn update(&mut self, sample: &[f32]) -> Result<(), McError> {
        if sample.len() != self.mean.len() {
            return Err(McError::Shape { expected: self.shape.clone(), got: vec![sample.len()] });
        }
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(&mut self.m2).zip(sample) {
            let x = x as f64;
            let d = x - *m;
            *m += d / n;
            *s += d * (x - *m);
        }
        Ok(())
    }

    pub fn update_array(&mut self, sample: &NdArray<f32>) -> Result<(), McError> {
        if sample.shape() != self.shape.as_slice() {
            return Err(McError::Shape { expected: self.shape.clone(), got: sample.shape().to_vec() });
        }
        self.update(sample.data())
    }

    /// Combine two ensembles over disjoint pass sets (pairwise update).
    pub fn merge(&self, other: &Ensemble) -> Result<Ensemble, McError> {
        if self.shape != other.shape {
            return Err(McError::Shape { expected: self.shape.clone(), got: other.shape.clone() });
        }
        if other.n == 0 {
            return Ok(self.clone());
        }
        if self.n == 0 {
            return Ok(other.clone());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let n = na + nb;
        let mut out = Ensemble { shape: self.shape.clone(), n: self.n + other.n, mean: self.mean.clone(), m2: self.m2.clone() };
        for i in 0..out.mean.len() {
            let d = other.mean[i] - self.mean[i];
            out.mean[i] = self.mean[i] + d * nb / n;
            out.m2[i] = self.m2[i] + other.m2[i] + d * d * na * nb / n;
        }
        Ok(out)
    }

    /// Sample variance `M2 / (n − 1)`.
    pub fn variance(&self) -> Result<Vec<f64>, McError> {
        if self.n < 2 {
            return Err(McError::TooFewPasses(self.n));
        }
        let d = (self.n - 1) as f64;
        Ok(self.m2.iter().map(|v| v / d).collect())
    }
}

/// `n_passes` stochastic passes over one block. The encoder runs once;
/// pass `k` reads dropout masks from streams keyed by `(base_seed, k)`.
/// With `workers > 1` passes are split into contiguous chunks whose partial
/// ensembles are merged in chunk order.
pub fn mc_predict(net: &Network<f32>, x: &NdArray<f32>, n_passes: usize, base_seed: u64, workers: usize) -> Result<Ensemble, McError> {
    if n_passes == 0 {
        return Err(McError::NoPasses);
    }
    let enc = net.encode(x)?;
    let run = |range: std::ops::Range<usize>| -> Result<Ensemble, McError> {
        let mut ens: Option<Ensemble> = None;
        for k in range {
            let y = net.decode(&enc, Mode::McInfer, PassRng::new(base_seed, k as u64))?;
            ens.get_or_insert_with(|| Ensemble::new(y.shape())).update_array(&y)?;
        }
        Ok(ens.expect("non-empty range"))
    };
    let workers = workers.clamp(1, n_passes);
    if workers == 1 {
        return run(0..n_passes);
    }
    let chunk = n_passes.div_ceil(workers);
    let ranges: Vec<_> = (0..n_passes).step_by(chunk).map(|s| s..(s + chunk).min(n_passes)).collect();
    let parts: Vec<Ensemble> = ranges.into_par_iter().map(run).collect::<Result<_, _>>()?;
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc = acc.merge(p)?;
    }
    Ok(acc)
}

/// Like [`mc_predict`] on a single worker, returning a snapshot after each
/// pass count in `ns` (ascending). Every snapshot is a prefix of one pass
/// sequence.
pub fn mc_predict_prefixes(net: &Network<f32>, x: &NdArray<f32>, ns: &[usize], base_seed: u64) -> Result<Vec<Ensemble>, McError> {
    let max = ns.iter().copied().max().unwrap_or(0);
    if max == 0 || ns.contains(&0) {
        return Err(McError::NoPasses);
    }
    let enc = net.encode(x)?;
    let mut ens: Option<Ensemble> = None;
    let mut snaps = vec![None; ns.len()];
    for k in 0..max {
        let y = net.decode(&enc, Mode::McInfer, PassRng::new(base_seed, k as u64))?;
        let e = ens.get_or_insert_with(|| Ensemble::new(y.shape()));
        e.update_array(&y)?;
        for (i, &n) in ns.iter().enumerate() {
            if n == k + 1 {
                snaps[i] = Some(e.clone());
            }
        }
    }
    Ok(snaps.into_iter().map(|s| s.expect("every n reached")).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    /// One CoV channel per output channel.
    pub cov: Volume,
    pub epsilon: f64,
    /// Voxels inside the mask whose |mean| fell below epsilon, per channel.
    pub low_mean: Vec<usize>,
}

fn ensemble_dims(ens: &Ensemble) -> Result<(usize, Dims), McError> {
    match ens.shape() {
        [1, c, x, y, z] | [c, x, y, z] => Ok((*c, [*x, *y, *z])),
        s => Err(McError::Shape { expected: vec![1, 2, 0, 0, 0], got: s.to_vec() }),
    }
}

/// `std / max(|mean|, epsilon)` per voxel and channel, zero outside `mask`.
pub fn uncertainty_map(ens: &Ensemble, mask: &Mask, epsilon: f64, voxel_size: [f32; 3]) -> Result<UncertaintyMap, McError> {
    let (c, dims) = ensemble_dims(ens)?;
    if mask.dims() != dims {
        return Err(McError::Shape { expected: dims.to_vec(), got: mask.dims().to_vec() });
    }
    let var = ens.variance()?;
    let p = dims.iter().product::<usize>();
    let mut data = vec![0.0f32; c * p];
    let mut low_mean = vec![0; c];
    for ch in 0..c {
        for (i, &m) in mask.bits().iter().enumerate() {
            if !m {
                continue;
            }
            let k = ch * p + i;
            let mean = ens.mean()[k].abs();
            if mean < epsilon {
                low_mean[ch] += 1;
            }
            data[k] = (var[k].sqrt() / mean.max(epsilon)) as f32;
        }
    }
    Ok(UncertaintyMap { cov: Volume::new(c, dims, voxel_size, data)?, epsilon, low_mean })
}

/// Ensemble mean as a volume (no clamping).
pub fn averaged_prediction(ens: &Ensemble, voxel_size: [f32; 3]) -> Result<Volume, McError> {
    let (c, dims) = ensemble_dims(ens)?;
    Ok(Volume::new(c, dims, voxel_size, ens.mean().iter().map(|&v| v as f32).collect())?)
}

/// FA map clipped to `[0, 1]` for export and evaluation.
pub fn clamp_fa(fa: &Volume) -> Volume {
    let mut out = fa.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassRecord {
    pub block: usize,
    pub origin: Dims,
    pub pass: usize,
    pub seed: u64,
    /// Stream id of dropout site 0; site `s` uses `stream + s`.
    pub stream: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub n_passes: usize,
    pub dropout_rate: f64,
    pub dropout_sites: usize,
    pub n_blocks: usize,
    pub skipped_blocks: Vec<Dims>,
    pub low_mean_voxels: Vec<usize>,
    pub passes: Vec<PassRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub n_passes: usize,
    /// Stitched ensemble mean, channels (FA, MD), FA unclamped.
    pub mean: Volume,
    /// Stitched CoV maps; `None` for a single pass.
    pub uncertainty: Option<UncertaintyMap>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub seed: u64,
    pub workers: usize,
    pub epsilon: f64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self { seed: 0, workers: 1, epsilon: DEFAULT_EPSILON }
    }
}

/// Whole-volume MC inference with one result per pass count in `ns`
/// (prefixes of the same pass sequence). `input` is the raw 4-channel DWI;
/// it is scaled by its in-mask mean b0 before entering the network.
pub fn infer_volume_prefixes(
    net: &Network<f32>,
    input: &Volume,
    mask: &Mask,
    spec: &BlockSpec,
    ns: &[usize],
    opts: InferOptions,
) -> Result<(Vec<InferenceResult>, Manifest), McError> {
    if ns.is_empty() || ns.contains(&0) {
        return Err(McError::NoPasses);
    }
    let b = net.config().block_size;
    if spec.block_size != [b, b, b] {
        return Err(McError::Shape { expected: vec![b, b, b], got: spec.block_size.to_vec() });
    }
    let dims = input.dims();
    let vs = input.voxel_size();
    let normalized = normalize_input(input, mask);
    let origins = spec.origins(dims);
    let n_out = net.config().out_channels;
    let max_n = *ns.iter().max().expect("non-empty");
    let zero_block = Volume::zeros(n_out, spec.block_size, vs)?;

    let mut means: Vec<Vec<(Volume, Dims)>> = vec![Vec::with_capacity(origins.len()); ns.len()];
    let mut covs: Vec<Vec<(Volume, Dims)>> = vec![Vec::with_capacity(origins.len()); ns.len()];
    let mut low_mean = vec![vec![0usize; n_out]; ns.len()];
    let mut manifest = Manifest {
        seed: opts.seed,
        n_passes: max_n,
        dropout_rate: net.config().dropout_rate,
        dropout_sites: net.n_dropout_sites(),
        n_blocks: origins.len(),
        skipped_blocks: Vec::new(),
        low_mean_voxels: Vec::new(),
        passes: Vec::new(),
    };

    for (bi, &origin) in origins.iter().enumerate() {
        let bmask = mask.crop_padded(origin, spec.block_size);
        if !bmask.any() {
            manifest.skipped_blocks.push(origin);
            for i in 0..ns.len() {
                means[i].push((zero_block.clone(), origin));
                covs[i].push((zero_block.clone(), origin));
            }
            continue;
        }
        let block_seed = derive_seed(opts.seed, bi as u64);
        for pass in 0..max_n {
            manifest.passes.push(PassRecord { block: bi, origin, pass, seed: block_seed, stream: pass as u64 * MAX_SITES });
        }
        let x = volume_to_array(&normalized.crop_padded(origin, spec.block_size));
        let snaps = if ns.len() == 1 {
            vec![mc_predict(net, &x, ns[0], block_seed, opts.workers)?]
        } else {
            mc_predict_prefixes(net, &x, ns, block_seed)?
        };
        for (i, ens) in snaps.iter().enumerate() {
            means[i].push((averaged_prediction(ens, vs)?, origin));
            if ens.count() >= 2 {
                let u = uncertainty_map(ens, &bmask, opts.epsilon, vs)?;
                for (acc, v) in low_mean[i].iter_mut().zip(&u.low_mean) {
                    *acc += v;
                }
                covs[i].push((u.cov, origin));
            }
        }
    }

    let mut results = Vec::with_capacity(ns.len());
    for (i, &n) in ns.iter().enumerate() {
        let mean = stitch_blocks(&means[i], dims)?;
        let uncertainty = if n >= 2 {
            let mut cov = stitch_blocks(&covs[i], dims)?;
            for ch in 0..n_out {
                for (v, &m) in cov.channel_mut(ch)?.iter_mut().zip(mask.bits()) {
                    if !m {
                        *v = 0.0;
                    }
                }
            }
            Some(UncertaintyMap { cov, epsilon: opts.epsilon, low_mean: low_mean[i].clone() })
        } else {
            None
        };
        results.push(InferenceResult { n_passes: n, mean, uncertainty });
    }
    let last = ns.iter().position(|&n| n == max_n).expect("max present");
    manifest.low_mean_voxels = low_mean[last].clone();
    Ok((results, manifest))
}

pub fn infer_volume(
    net: &Network<f32>,
    input: &Volume,
    mask: &Mask,
    spec: &BlockSpec,
    n_passes: usize,
    opts: InferOptions,
) -> Result<(InferenceResult, Manifest), McError> {
    let (mut r, m) = infer_volume_prefixes(net, input, mask, spec, &[n_passes], opts)?;
    Ok((r.remove(0), m))
}

/// Single deterministic pass (dropout off) over the whole volume.
pub fn infer_deterministic(net: &Network<f32>, input: &Volume, mask: &Mask, spec: &BlockSpec) -> Result<Volume, McError> {
    let dims = input.dims();
    let vs = input.voxel_size();
    let normalized = normalize_input(input, mask);
    let n_out = net.config().out_channels;
    let mut blocks = Vec::new();
    for origin in spec.origins(dims) {
        if !mask.crop_padded(origin, spec.block_size).any() {
            blocks.push((Volume::zeros(n_out, spec.block_size, vs)?, origin));
            continue;
        }
        let x = volume_to_array(&normalized.crop_padded(origin, spec.block_size));
        let y = net.forward(&x, Mode::Deterministic, PassRng::new(0, 0))?;
        blocks.push((crate::dunet::array_to_volume(&y, vs)?, origin));
    }
    Ok(stitch_blocks(&blocks, dims)?)
}
