#![allow(dead_code)]

use mcdqmri_core::dunet::{build_dunet, DUNetConfig, ForwardCache, Mode, Network, PassRng};
use mcdqmri_core::nn::gradcheck::{Graph, Signature};
use mcdqmri_core::nn::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_array(shape: &[usize], seed: u64) -> NdArray<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    NdArray::from_fn(shape, |_| r.random_range(-1.0..1.0))
}

type Fwd = Box<dyn Fn(&[NdArray<f64>]) -> (NdArray<f64>, u64)>;
type Bwd = Box<dyn Fn(&[NdArray<f64>], &NdArray<f64>) -> Vec<NdArray<f64>>>;

/// A graph given by closures over a flat list of named tensors.
pub struct FnGraph {
    names: Vec<&'static str>,
    tensors: Vec<NdArray<f64>>,
    fwd: Fwd,
    bwd: Bwd,
}

impl FnGraph {
    pub fn new(names: Vec<&'static str>, tensors: Vec<NdArray<f64>>, fwd: Fwd, bwd: Bwd) -> Self {
        Self { names, tensors, fwd, bwd }
    }
}

impl Graph for FnGraph {
    fn tensors(&self) -> Vec<(&str, &NdArray<f64>)> {
        self.names.iter().copied().zip(self.tensors.iter()).collect()
    }
    fn tensor_mut(&mut self, i: usize) -> &mut NdArray<f64> {
        &mut self.tensors[i]
    }
    fn forward(&mut self) -> (NdArray<f64>, u64) {
        (self.fwd)(&self.tensors)
    }
    fn backward(&mut self, dy: &NdArray<f64>) -> Vec<NdArray<f64>> {
        (self.bwd)(&self.tensors, dy)
    }
}

pub fn conv_graph(n: usize, cin: usize, cout: usize, k: usize, dims: [usize; 3], seed: u64) -> FnGraph {
    let x = rand_array(&[n, cin, dims[0], dims[1], dims[2]], seed);
    let w = rand_array(&[cout, cin, k, k, k], seed + 1);
    let b = rand_array(&[cout], seed + 2);
    FnGraph::new(
        vec!["x", "w", "b"],
        vec![x, w, b],
        Box::new(|t| (conv3d(&t[0], &t[1], &t[2]).unwrap(), 0)),
        Box::new(|t, dy| {
            let (dx, dw, db) = conv3d_backward(dy, &t[0], &t[1]).unwrap();
            vec![dx, dw, db]
        }),
    )
}

pub fn conv_transpose_graph(n: usize, cin: usize, cout: usize, dims: [usize; 3], seed: u64) -> FnGraph {
    let x = rand_array(&[n, cin, dims[0], dims[1], dims[2]], seed);
    let w = rand_array(&[cin, cout, 2, 2, 2], seed + 1);
    let b = rand_array(&[cout], seed + 2);
    FnGraph::new(
        vec!["x", "w", "b"],
        vec![x, w, b],
        Box::new(|t| (conv_transpose3d(&t[0], &t[1], &t[2]).unwrap(), 0)),
        Box::new(|t, dy| {
            let (dx, dw, db) = conv_transpose3d_backward(dy, &t[0], &t[1]).unwrap();
            vec![dx, dw, db]
        }),
    )
}

pub fn relu_graph(shape: &[usize], seed: u64) -> FnGraph {
    FnGraph::new(
        vec!["x"],
        vec![rand_array(shape, seed)],
        Box::new(|t| {
            let mut s = Signature::default();
            s.push_positive(t[0].data());
            (relu(&t[0]), s.finish())
        }),
        Box::new(|t, dy| vec![relu_backward(dy, &relu(&t[0]))]),
    )
}

pub fn maxpool_graph(shape: &[usize], seed: u64) -> FnGraph {
    let shape = shape.to_vec();
    FnGraph::new(
        vec!["x"],
        vec![rand_array(&shape, seed)],
        Box::new(|t| {
            let (y, arg) = maxpool3d(&t[0]).unwrap();
            let mut s = Signature::default();
            arg.iter().for_each(|&i| s.push(i as u64));
            (y, s.finish())
        }),
        Box::new(move |t, dy| {
            let (_, arg) = maxpool3d(&t[0]).unwrap();
            vec![maxpool3d_backward(dy, &arg, &shape).unwrap()]
        }),
    )
}

/// Concat followed by a 3³ conv so the gradient check is not trivially linear
/// in a single operand.
pub fn concat_graph(ca: usize, cb: usize, dims: [usize; 3], seed: u64) -> FnGraph {
    let a = rand_array(&[1, ca, dims[0], dims[1], dims[2]], seed);
    let b = rand_array(&[1, cb, dims[0], dims[1], dims[2]], seed + 1);
    let w = rand_array(&[2, ca + cb, 3, 3, 3], seed + 2);
    FnGraph::new(
        vec!["a", "b", "w"],
        vec![a, b, w],
        Box::new(move |t| {
            let cat = concat_channels(&t[0], &t[1]).unwrap();
            (conv3d(&cat, &t[2], &NdArray::zeros(&[2])).unwrap(), 0)
        }),
        Box::new(move |t, dy| {
            let cat = concat_channels(&t[0], &t[1]).unwrap();
            let (dcat, dw, _) = conv3d_backward(dy, &cat, &t[2]).unwrap();
            let (da, db) = split_channels(&dcat, t[0].shape()[1]).unwrap();
            vec![da, db, dw]
        }),
    )
}

/// Dropout with a mask frozen at construction.
pub fn frozen_dropout_graph(shape: &[usize], p: f64, seed: u64) -> FnGraph {
    let x = rand_array(shape, seed);
    let cfg = DropoutConfig::new(p).unwrap();
    let (_, mask) = dropout(&x, cfg, &RngStream::new(seed, 0), true);
    let m2 = mask.clone();
    FnGraph::new(
        vec!["x"],
        vec![x],
        Box::new(move |t| (dropout_with_mask(&t[0], &mask), 0)),
        Box::new(move |_, dy| vec![dropout_backward(dy, &m2)]),
    )
}

/// Whole network in 64-bit mode with dropout masks fixed by a constant
/// pass seed; tensors are the input followed by every parameter.
pub struct NetGraph {
    pub net: Network<f64>,
    pub x: NdArray<f64>,
    pub rng: PassRng,
    cache: Option<ForwardCache<f64>>,
}

impl NetGraph {
    pub fn new(net: Network<f64>, x: NdArray<f64>, rng: PassRng) -> Self {
        Self { net, x, rng, cache: None }
    }

    /// Depth 2, two base kernels, 8³ blocks, p = 0.2.
    pub fn small_dunet(seed: u64) -> Self {
        let cfg = DUNetConfig { depth: 2, base_kernels: 2, block_size: 8, dropout_rate: 0.2, ..DUNetConfig::desk() };
        let net = build_dunet::<f64>(cfg, seed).unwrap();
        let x = rand_array(&[1, 4, 8, 8, 8], seed + 1);
        Self::new(net, x, PassRng::new(seed + 2, 0))
    }
}

impl Graph for NetGraph {
    fn tensors(&self) -> Vec<(&str, &NdArray<f64>)> {
        let mut v: Vec<(&str, &NdArray<f64>)> = vec![("input", &self.x)];
        v.extend(self.net.params().into_iter().map(|p| (p.name.as_str(), &p.value)));
        v
    }
    fn tensor_mut(&mut self, i: usize) -> &mut NdArray<f64> {
        if i == 0 {
            &mut self.x
        } else {
            &mut self.net.params_mut().into_iter().nth(i - 1).unwrap().value
        }
    }
    fn forward(&mut self) -> (NdArray<f64>, u64) {
        let (y, cache) = self.net.forward_train(&self.x, Mode::Train, self.rng).unwrap();
        let sig = cache.kink_signature();
        self.cache = Some(cache);
        (y, sig)
    }
    fn backward(&mut self, dy: &NdArray<f64>) -> Vec<NdArray<f64>> {
        let (_, cache) = self.net.forward_train(&self.x, Mode::Train, self.rng).unwrap();
        self.net.zero_grad();
        let dx = self.net.backward(&cache, dy).unwrap();
        let mut out = vec![dx];
        out.extend(self.net.params().into_iter().map(|p| p.grad.clone()));
        out
    }
}

/// Every layer graph the engine offers, on small random shapes.
pub fn layer_graphs(seed: u64) -> Vec<(&'static str, FnGraph)> {
    vec![
        ("conv3d k3", conv_graph(2, 2, 3, 3, [4, 3, 4], seed)),
        ("conv3d k1", conv_graph(1, 3, 2, 1, [3, 2, 2], seed + 10)),
        ("conv_transpose3d", conv_transpose_graph(2, 2, 3, [2, 3, 2], seed + 20)),
        ("relu", relu_graph(&[1, 2, 3, 3, 3], seed + 30)),
        ("maxpool3d", maxpool_graph(&[1, 2, 4, 4, 2], seed + 40)),
        ("concat", concat_graph(2, 1, [3, 3, 3], seed + 50)),
        ("dropout (frozen mask)", frozen_dropout_graph(&[1, 3, 4, 4, 4], 0.3, seed + 60)),
    ]
}

/// Ensemble of `n` passes of the linear net `y = W · dropout(x) + b`, built
/// from a 1³ convolution on a single voxel. Returns (ensemble, mean, variance)
/// with the analytic moments per output coordinate.
pub fn linear_dropout_ensemble(p: f64, n: usize, seed: u64) -> (mcdqmri_core::mcdropout::Ensemble, Vec<f64>, Vec<f64>) {
    let (cin, cout) = (6, 3);
    let x = rand_array(&[1, cin, 1, 1, 1], seed).cast::<f32>();
    let w = rand_array(&[cout, cin, 1, 1, 1], seed + 1).cast::<f32>();
    let b = rand_array(&[cout], seed + 2).cast::<f32>();
    let cfg = DropoutConfig::new(p).unwrap();
    let mut ens = mcdqmri_core::mcdropout::Ensemble::new(&[1, cout, 1, 1, 1]);
    for k in 0..n {
        let (d, _) = dropout(&x, cfg, &RngStream::for_site(seed, k as u64, 0), true);
        ens.update_array(&conv3d(&d, &w, &b).unwrap()).unwrap();
    }
    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let mut mean = vec![0.0; cout];
    let mut var = vec![0.0; cout];
    for o in 0..cout {
        mean[o] = b.data()[o] as f64;
        for i in 0..cin {
            let wi = w.data()[o * cin + i] as f64;
            mean[o] += wi * xs[i];
            var[o] += wi * wi * xs[i] * xs[i] * p / (1.0 - p);
        }
    }
    (ens, mean, var)
}

/// Naive two-pass mean and (n−1) variance per coordinate.
pub fn two_pass(samples: &[Vec<f32>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let len = samples[0].len();
    let mut mean = vec![0.0; len];
    for s in samples {
        for (m, &v) in mean.iter_mut().zip(s) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; len];
    for s in samples {
        for ((q, &v), m) in var.iter_mut().zip(s).zip(&mean) {
            *q += (v as f64 - m).powi(2);
        }
    }
    var.iter_mut().for_each(|q| *q /= n - 1.0);
    (mean, var)
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

/// Uniformly random rotation from a normalized random quaternion.
pub fn random_rotation(r: &mut impl Rng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = loop {
        let q = [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
        let n2: f64 = q.iter().map(|v| v * v).sum();
        if n2 > 1e-3 && n2 <= 1.0 {
            let n = n2.sqrt();
            break [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
        }
    };
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Random PSD tensor with eigenvalues in [0, 3] μm²/ms and random orientation.
pub fn random_psd_tensor(r: &mut impl Rng) -> mcdqmri_core::dti::DiffTensor {
    let d = mcdqmri_core::dti::DiffTensor::diag(r.random_range(0.0..3.0), r.random_range(0.0..3.0), r.random_range(0.0..3.0));
    d.rotated(&random_rotation(r))
}

/// One b=0 volume plus six non-collinear directions at b = 1 ms/μm².
pub fn six_direction_scheme() -> mcdqmri_core::dti::DiffusionScheme {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let dirs = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [s, s, 0.0], [s, 0.0, s], [0.0, s, s]];
    mcdqmri_core::dti::DiffusionScheme::new(vec![0.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0], dirs).unwrap()
}
