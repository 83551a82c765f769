//! 3D U-Net with dropout on the decoding path.
//!
//! Encoder level `i` has two `3³` conv + ReLU layers with `base·2^i` output
//! channels, followed by 2³ max pooling except at the deepest level. Each
//! decoder level upsamples with a stride-2 transposed conv, concatenates the
//! skip connection and applies two conv + ReLU + dropout layers. A linear
//! `1³` conv maps to the two outputs (FA, MD).

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::gradcheck::Signature;
use crate::nn::{
    concat_channels, dropout, dropout_backward, maxpool3d, maxpool3d_backward, relu_backward, split_channels, Conv3d,
    ConvTranspose3d, DropoutConfig, DropoutMask, NdArray, Param, Real, RngStream, ShapeError,
};
use crate::volume::{Mask, Volume};

pub const FA_CHANNEL: usize = 0;
pub const MD_CHANNEL: usize = 1;
pub const OUTPUT_NAMES: [&str; 2] = ["fa", "md"];
pub const MAX_DEPTH: usize = 8;

#[derive(Debug, Error)]
pub enum DunetError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("mask is empty")]
    EmptyMask,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DUNetConfig {
    pub depth: usize,
    pub base_kernels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub dropout_rate: f64,
    pub block_size: usize,
}

impl Default for DUNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DUNetConfig {
    /// Small configuration that trains on a single CPU core.
    pub fn desk() -> Self {
        Self { depth: 3, base_kernels: 8, in_channels: 4, out_channels: 2, dropout_rate: 0.2, block_size: 16 }
    }

    pub fn paper_scale() -> Self {
        Self { depth: 5, base_kernels: 32, block_size: 64, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<(), DunetError> {
        if self.depth == 0 || self.depth > MAX_DEPTH {
            return Err(DunetError::Config(format!("depth {} outside 1..={MAX_DEPTH}", self.depth)));
        }
        if self.base_kernels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(DunetError::Config("channel counts must be positive".into()));
        }
        let factor = 1usize << (self.depth - 1);
        if self.block_size == 0 || self.block_size % factor != 0 {
            return Err(DunetError::Config(format!(
                "block size {} is not divisible by 2^(depth-1) = {factor}",
                self.block_size
            )));
        }
        DropoutConfig::new(self.dropout_rate).map_err(|e| DunetError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn width(&self, level: usize) -> usize {
        self.base_kernels << level
    }

    /// Number of learnable scalars, from the layer list alone.
    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k * k + o;
        let mut n = 0;
        for level in 0..self.depth {
            let cin = if level == 0 { self.in_channels } else { self.width(level - 1) };
            n += conv(cin, self.width(level), 3) + conv(self.width(level), self.width(level), 3);
        }
        for level in (0..self.depth - 1).rev() {
            let w = self.width(level);
            n += self.width(level + 1) * w * 8 + w;
            n += conv(2 * w, w, 3) + conv(w, w, 3);
        }
        n + conv(self.base_kernels, self.out_channels, 1)
    }
}

/// Execution mode. Dropout samples masks in `Train` and `McInfer` and is the
/// identity in `Deterministic`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    McInfer,
    Deterministic,
}

impl Mode {
    fn stochastic(self) -> bool {
        !matches!(self, Mode::Deterministic)
    }
}

/// Which RNG keystream a forward pass reads its dropout masks from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PassRng {
    pub seed: u64,
    pub pass: u64,
}

impl PassRng {
    pub fn new(seed: u64, pass: u64) -> Self {
        Self { seed, pass }
    }

    pub fn site(&self, site: usize) -> RngStream {
        RngStream::for_site(self.seed, self.pass, site)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EncLevel<T> {
    conv1: Conv3d<T>,
    conv2: Conv3d<T>,
}

#[derive(Debug, Clone, PartialEq)]
struct DecLevel<T> {
    up: ConvTranspose3d<T>,
    conv1: Conv3d<T>,
    conv2: Conv3d<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    cfg: DUNetConfig,
    with_dropout: bool,
    enc: Vec<EncLevel<T>>,
    /// Deepest decoder level first.
    dec: Vec<DecLevel<T>>,
    head: Conv3d<T>,
}

/// Encoder activations reused by every MC pass over the same block.
#[derive(Debug, Clone)]
pub struct Encoded<T> {
    skips: Vec<NdArray<T>>,
    bottom: NdArray<T>,
}

#[derive(Debug, Clone)]
struct EncCache<T> {
    input: NdArray<T>,
    a1: NdArray<T>,
    a2: NdArray<T>,
    argmax: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
struct DecCache<T> {
    up_in: NdArray<T>,
    cat: NdArray<T>,
    h1: NdArray<T>,
    m1: DropoutMask,
    d1: NdArray<T>,
    h2: NdArray<T>,
    m2: DropoutMask,
}

/// Activations saved by [`Network::forward_train`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    enc: Vec<EncCache<T>>,
    dec: Vec<DecCache<T>>,
    head_in: NdArray<T>,
}

impl<T: Real> ForwardCache<T> {
    /// Hash of every ReLU sign pattern and pooling winner.
    pub fn kink_signature(&self) -> u64 {
        let mut s = Signature::default();
        let mut push = |a: &NdArray<T>| {
            let v: Vec<f64> = a.data().iter().map(|x| x.f64()).collect();
            s.push_positive(&v);
        };
        for e in &self.enc {
            push(&e.a1);
            push(&e.a2);
        }
        for d in &self.dec {
            push(&d.h1);
            push(&d.h2);
        }
        for e in &self.enc {
            if let Some(a) = &e.argmax {
                for &i in a {
                    s.push(i as u64);
                }
            }
        }
        s.finish()
    }
}

fn conv_relu<T: Real>(conv: &Conv3d<T>, x: &NdArray<T>) -> Result<NdArray<T>, ShapeError> {
    let mut y = conv.forward(x)?;
    crate::nn::relu_inplace(&mut y);
    Ok(y)
}

/// He-initialized DU-Net with two dropout sites per decoder level.
pub fn build_dunet<T: Real>(cfg: DUNetConfig, init_seed: u64) -> Result<Network<T>, DunetError> {
    Network::build(cfg, init_seed, true)
}

/// Same architecture and initialization without dropout sites.
pub fn build_unet<T: Real>(cfg: DUNetConfig, init_seed: u64) -> Result<Network<T>, DunetError> {
    Network::build(cfg, init_seed, false)
}

impl<T: Real> Network<T> {
    fn build(cfg: DUNetConfig, init_seed: u64, with_dropout: bool) -> Result<Self, DunetError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut enc = Vec::with_capacity(cfg.depth);
        for level in 0..cfg.depth {
            let cin = if level == 0 { cfg.in_channels } else { cfg.width(level - 1) };
            let w = cfg.width(level);
            enc.push(EncLevel {
                conv1: Conv3d::new(&format!("enc{level}.conv1"), cin, w, 3, &mut rng),
                conv2: Conv3d::new(&format!("enc{level}.conv2"), w, w, 3, &mut rng),
            });
        }
        let mut dec = Vec::with_capacity(cfg.depth - 1);
        for level in (0..cfg.depth - 1).rev() {
            let w = cfg.width(level);
            dec.push(DecLevel {
                up: ConvTranspose3d::new(&format!("dec{level}.up"), cfg.width(level + 1), w, &mut rng),
                conv1: Conv3d::new(&format!("dec{level}.conv1"), 2 * w, w, 3, &mut rng),
                conv2: Conv3d::new(&format!("dec{level}.conv2"), w, w, 3, &mut rng),
            });
        }
        let head = Conv3d::new("head", cfg.base_kernels, cfg.out_channels, 1, &mut rng);
        Ok(Self { cfg, with_dropout, enc, dec, head })
    }

    pub fn config(&self) -> &DUNetConfig {
        &self.cfg
    }

    pub fn has_dropout(&self) -> bool {
        self.with_dropout
    }

    /// Dropout sites on the decoding path, in forward order.
    pub fn n_dropout_sites(&self) -> usize {
        if self.with_dropout {
            2 * self.dec.len()
        } else {
            0
        }
    }

    /// Sites that actually sample masks (zero when the rate is zero).
    pub fn n_active_sites(&self) -> usize {
        if self.cfg.dropout_rate > 0.0 {
            self.n_dropout_sites()
        } else {
            0
        }
    }

    /// Change the dropout rate without touching weights.
    pub fn set_dropout_rate(&mut self, p: f64) -> Result<(), DunetError> {
        DropoutConfig::new(p).map_err(|e| DunetError::Config(e.to_string()))?;
        self.cfg.dropout_rate = p;
        Ok(())
    }

    fn dropout_cfg(&self) -> DropoutConfig {
        DropoutConfig::new(self.cfg.dropout_rate).expect("validated at build")
    }

    fn dropout_active(&self, mode: Mode) -> bool {
        self.with_dropout && mode.stochastic()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut v = Vec::new();
        for e in &self.enc {
            v.extend(e.conv1.params());
            v.extend(e.conv2.params());
        }
        for d in &self.dec {
            v.extend(d.up.params());
            v.extend(d.conv1.params());
            v.extend(d.conv2.params());
        }
        v.extend(self.head.params());
        v
    }

    /// Parameters in registry order.
    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut v = Vec::new();
        for e in &mut self.enc {
            v.extend(e.conv1.params_mut());
            v.extend(e.conv2.params_mut());
        }
        for d in &mut self.dec {
            v.extend(d.up.params_mut());
            v.extend(d.conv1.params_mut());
            v.extend(d.conv2.params_mut());
        }
        v.extend(self.head.params_mut());
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(|p| p.zero_grad());
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        let conv = |c: &Conv3d<T>| Conv3d { weight: c.weight.cast(), bias: c.bias.cast() };
        Network {
            cfg: self.cfg,
            with_dropout: self.with_dropout,
            enc: self.enc.iter().map(|e| EncLevel { conv1: conv(&e.conv1), conv2: conv(&e.conv2) }).collect(),
            dec: self
                .dec
                .iter()
                .map(|d| DecLevel {
                    up: ConvTranspose3d { weight: d.up.weight.cast(), bias: d.up.bias.cast() },
                    conv1: conv(&d.conv1),
                    conv2: conv(&d.conv2),
                })
                .collect(),
            head: conv(&self.head),
        }
    }

    fn check_input(&self, x: &NdArray<T>) -> Result<(), DunetError> {
        let [_, c, nx, ny, nz] = x.dims5("dunet forward")?;
        let b = self.cfg.block_size;
        if c != self.cfg.in_channels || [nx, ny, nz] != [b, b, b] {
            return Err(ShapeError::Mismatch {
                op: "dunet forward",
                expected: vec![x.shape()[0], self.cfg.in_channels, b, b, b],
                got: x.shape().to_vec(),
            }
            .into());
        }
        Ok(())
    }

    /// Run the encoder once; the result can feed any number of decoder passes.
    pub fn encode(&self, x: &NdArray<T>) -> Result<Encoded<T>, DunetError> {
        self.check_input(x)?;
        let mut skips = Vec::with_capacity(self.enc.len() - 1);
        let mut h = x.clone();
        for (level, e) in self.enc.iter().enumerate() {
            let a1 = conv_relu(&e.conv1, &h)?;
            let a2 = conv_relu(&e.conv2, &a1)?;
            if level + 1 < self.enc.len() {
                h = maxpool3d(&a2)?.0;
                skips.push(a2);
            } else {
                h = a2;
            }
        }
        Ok(Encoded { skips, bottom: h })
    }

    pub fn decode(&self, enc: &Encoded<T>, mode: Mode, rng: PassRng) -> Result<NdArray<T>, DunetError> {
        let active = self.dropout_active(mode);
        let cfg = self.dropout_cfg();
        let mut h = enc.bottom.clone();
        for (j, d) in self.dec.iter().enumerate() {
            let skip = &enc.skips[enc.skips.len() - 1 - j];
            let up = d.up.forward(&h)?;
            let cat = concat_channels(&up, skip)?;
            let h1 = conv_relu(&d.conv1, &cat)?;
            let d1 = if active { dropout(&h1, cfg, &rng.site(2 * j), true).0 } else { h1 };
            let h2 = conv_relu(&d.conv2, &d1)?;
            h = if active { dropout(&h2, cfg, &rng.site(2 * j + 1), true).0 } else { h2 };
        }
        Ok(self.head.forward(&h)?)
    }

    /// Forward pass without saving activations. Output is `[n, 2, b, b, b]`.
    pub fn forward(&self, x: &NdArray<T>, mode: Mode, rng: PassRng) -> Result<NdArray<T>, DunetError> {
        let enc = self.encode(x)?;
        self.decode(&enc, mode, rng)
    }

    /// Forward pass that records what [`Network::backward`] needs.
    pub fn forward_train(&self, x: &NdArray<T>, mode: Mode, rng: PassRng) -> Result<(NdArray<T>, ForwardCache<T>), DunetError> {
        self.check_input(x)?;
        let active = self.dropout_active(mode);
        let cfg = self.dropout_cfg();
        let mut enc_cache = Vec::with_capacity(self.enc.len());
        let mut h = x.clone();
        for (level, e) in self.enc.iter().enumerate() {
            let a1 = conv_relu(&e.conv1, &h)?;
            let a2 = conv_relu(&e.conv2, &a1)?;
            let input = std::mem::replace(&mut h, NdArray::zeros(&[0]));
            let argmax = if level + 1 < self.enc.len() {
                let (p, arg) = maxpool3d(&a2)?;
                h = p;
                Some(arg)
            } else {
                h = a2.clone();
                None
            };
            enc_cache.push(EncCache { input, a1, a2, argmax });
        }
        let mut dec_cache = Vec::with_capacity(self.dec.len());
        for (j, d) in self.dec.iter().enumerate() {
            let skip = &enc_cache[self.enc.len() - 2 - j].a2;
            let up = d.up.forward(&h)?;
            let cat = concat_channels(&up, skip)?;
            let h1 = conv_relu(&d.conv1, &cat)?;
            let (d1, m1) = dropout(&h1, cfg, &rng.site(2 * j), active);
            let h2 = conv_relu(&d.conv2, &d1)?;
            let (d2, m2) = dropout(&h2, cfg, &rng.site(2 * j + 1), active);
            let up_in = std::mem::replace(&mut h, d2.clone());
            dec_cache.push(DecCache { up_in, cat, h1, m1, d1, h2, m2 });
        }
        let y = self.head.forward(&h)?;
        Ok((y, ForwardCache { enc: enc_cache, dec: dec_cache, head_in: h }))
    }

    /// Accumulate parameter gradients for output gradient `dy`; returns the
    /// input gradient.
    pub fn backward(&mut self, cache: &ForwardCache<T>, dy: &NdArray<T>) -> Result<NdArray<T>, DunetError> {
        let mut g = self.head.backward(&cache.head_in, dy)?;
        let n_dec = self.dec.len();
        let mut skip_grads = vec![None; n_dec];
        for j in (0..n_dec).rev() {
            let c = &cache.dec[j];
            let d = &mut self.dec[j];
            g = dropout_backward(&g, &c.m2);
            g = relu_backward(&g, &c.h2);
            g = d.conv2.backward(&c.d1, &g)?;
            g = dropout_backward(&g, &c.m1);
            g = relu_backward(&g, &c.h1);
            g = d.conv1.backward(&c.cat, &g)?;
            let up_c = d.up.weight.value.shape()[1];
            let (g_up, g_skip) = split_channels(&g, up_c)?;
            skip_grads[j] = Some(g_skip);
            g = d.up.backward(&c.up_in, &g_up)?;
        }
        let depth = self.enc.len();
        for level in (0..depth).rev() {
            let c = &cache.enc[level];
            if let Some(arg) = &c.argmax {
                let mut gp = maxpool3d_backward(&g, arg, c.a2.shape())?;
                let j = depth - 2 - level;
                gp.add_assign(skip_grads[j].as_ref().expect("decoder visited"));
                g = gp;
            }
            let e = &mut self.enc[level];
            g = relu_backward(&g, &c.a2);
            g = e.conv2.backward(&c.a1, &g)?;
            g = relu_backward(&g, &c.a1);
            g = e.conv1.backward(&c.input, &g)?;
        }
        Ok(g)
    }
}

/// Masked L1 over both output channels: `Σ_mask |pred − target| / (2·|mask|)`,
/// and its subgradient (0 where the residual is 0). Arrays are `[1, 2, x, y, z]`.
pub fn masked_l1<T: Real>(pred: &NdArray<T>, target: &NdArray<T>, mask: &Mask) -> Result<(f64, NdArray<T>), DunetError> {
    if pred.shape() != target.shape() {
        return Err(ShapeError::Mismatch { op: "masked_l1", expected: pred.shape().to_vec(), got: target.shape().to_vec() }.into());
    }
    let [n, c, x, y, z] = pred.dims5("masked_l1")?;
    let p = x * y * z;
    if mask.dims() != [x, y, z] || n != 1 {
        return Err(ShapeError::Mismatch { op: "masked_l1 mask", expected: vec![1, c, x, y, z], got: vec![n, c, mask.dims()[0], mask.dims()[1], mask.dims()[2]] }.into());
    }
    let count = mask.count();
    if count == 0 {
        return Err(DunetError::EmptyMask);
    }
    let denom = (c * count) as f64;
    let g = T::of(1.0 / denom);
    let mut grad = NdArray::zeros(pred.shape());
    let mut total = 0.0f64;
    for ch in 0..c {
        for (i, &m) in mask.bits().iter().enumerate() {
            if !m {
                continue;
            }
            let k = ch * p + i;
            let r = pred.data()[k] - target.data()[k];
            total += r.f64().abs();
            grad.data_mut()[k] = if r > T::zero() {
                g
            } else if r < T::zero() {
                -g
            } else {
                T::zero()
            };
        }
    }
    Ok((total / denom, grad))
}

/// Scale for network inputs: the mean of the b0 channel (channel 0) inside
/// the mask. Returns 1 for an empty mask or a non-positive mean.
pub fn input_scale(dwi: &Volume, mask: &Mask) -> f32 {
    let b0 = dwi.channel(0).expect("at least one channel");
    let (mut s, mut n) = (0.0f64, 0usize);
    for (&v, &m) in b0.iter().zip(mask.bits()) {
        if m {
            s += v as f64;
            n += 1;
        }
    }
    let mean = if n > 0 { s / n as f64 } else { 0.0 };
    if mean > 0.0 && mean.is_finite() {
        mean as f32
    } else {
        1.0
    }
}

/// Divide every channel by [`input_scale`].
pub fn normalize_input(dwi: &Volume, mask: &Mask) -> Volume {
    let s = input_scale(dwi, mask);
    let mut out = dwi.clone();
    out.data_mut().iter_mut().for_each(|v| *v /= s);
    out
}

/// Volume `[c, x, y, z]` to a batch-of-one array.
pub fn volume_to_array(v: &Volume) -> NdArray<f32> {
    let [x, y, z] = v.dims();
    NdArray::new(vec![1, v.channels(), x, y, z], v.data().to_vec()).expect("volume data length")
}

pub fn array_to_volume(a: &NdArray<f32>, voxel_size: [f32; 3]) -> Result<Volume, DunetError> {
    let [n, c, x, y, z] = a.dims5("array_to_volume")?;
    if n != 1 {
        return Err(ShapeError::Mismatch { op: "array_to_volume", expected: vec![1, c, x, y, z], got: a.shape().to_vec() }.into());
    }
    Volume::new(c, [x, y, z], voxel_size, a.data().to_vec()).map_err(|e| DunetError::Config(e.to_string()))
}

// ---- checkpoints ----

const CHECKPOINT_MAGIC: &[u8; 8] = b"MCDQNET\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: DUNetConfig,
    dropout_sites: bool,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DunetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| DunetError::Checkpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DunetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

impl Network<f32> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let header = serde_json::to_vec(&CheckpointHeader { config: self.cfg, dropout_sites: self.with_dropout }).expect("serializable");
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(&header);
        let params = self.params();
        put_u32(&mut out, params.len() as u32);
        for p in params {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.shape().len() as u32);
            for &d in p.value.shape() {
                put_u32(&mut out, d as u32);
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DunetError> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(DunetError::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(DunetError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(hlen)?).map_err(|e| DunetError::Checkpoint(format!("header: {e}")))?;
        let mut net = Network::<f32>::build(header.config, 0, header.dropout_sites)?;
        let count = r.u32()? as usize;
        let mut params = net.params_mut();
        if count != params.len() {
            return Err(DunetError::Checkpoint(format!("expected {} tensors, found {count}", params.len())));
        }
        for p in params.iter_mut() {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| DunetError::Checkpoint("tensor name not utf-8".into()))?;
            if name != p.name {
                return Err(DunetError::Checkpoint(format!("expected tensor {}, found {name}", p.name)));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim.min(8) {
                shape.push(r.u32()? as usize);
            }
            if shape != p.value.shape() {
                return Err(DunetError::Checkpoint(format!("tensor {name}: shape {shape:?}, expected {:?}", p.value.shape())));
            }
            let bytes = r.take(p.value.len() * 4)?;
            for (v, b) in p.value.data_mut().iter_mut().zip(bytes.chunks_exact(4)) {
                *v = f32::from_le_bytes(b.try_into().expect("4 bytes"));
            }
        }
        if r.pos != buf.len() {
            return Err(DunetError::Checkpoint("trailing bytes".into()));
        }
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DunetError> {
        std::fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DunetError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
