//! Central finite-difference gradient checking in 64-bit mode.
//!
//! The scalar loss is `Σ r ⊙ y` for a fixed random projection `r`, so the
//! output gradient fed to backward is `r` itself.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::NdArray;

/// A differentiable computation over a list of named `f64` tensors
/// (inputs and parameters alike).
pub trait Graph {
    fn tensors(&self) -> Vec<(&str, &NdArray<f64>)>;
    fn tensor_mut(&mut self, i: usize) -> &mut NdArray<f64>;
    /// Output plus a signature of every non-smooth decision taken (ReLU
    /// signs, pooling winners). Equal signatures mean the same linear piece.
    fn forward(&mut self) -> (NdArray<f64>, u64);
    /// Gradient of `Σ dy ⊙ y` with respect to each tensor, in `tensors()` order.
    fn backward(&mut self, dy: &NdArray<f64>) -> Vec<NdArray<f64>>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorError {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub per_tensor: Vec<TensorError>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_tensor.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }

    pub fn skipped(&self) -> usize {
        self.per_tensor.iter().map(|t| t.skipped).sum()
    }

    pub fn checked(&self) -> usize {
        self.per_tensor.iter().map(|t| t.checked).sum()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub eps: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { eps: 1e-4, floor: 1e-3, seed: 0, max_coords: usize::MAX }
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn loss(y: &NdArray<f64>, r: &NdArray<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Compare analytic gradients with central differences. Coordinates whose
/// perturbation crosses a kink (signature change) are skipped and counted.
pub fn grad_check(g: &mut impl Graph, opts: CheckOptions) -> GradReport {
    let (y0, sig0) = g.forward();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = NdArray::from_fn(y0.shape(), |_| rng.random_range(-1.0..1.0));
    let analytic = g.backward(&r);
    let names: Vec<String> = g.tensors().iter().map(|(n, _)| n.to_string()).collect();
    let mut per_tensor = Vec::new();
    for (ti, name) in names.into_iter().enumerate() {
        let len = analytic[ti].len();
        let step = len.div_ceil(opts.max_coords.max(1)).max(1);
        let mut report = TensorError { name, max_rel_err: 0.0, checked: 0, skipped: 0 };
        for k in (0..len).step_by(step) {
            let orig = g.tensor_mut(ti).data()[k];
            g.tensor_mut(ti).data_mut()[k] = orig + opts.eps;
            let (yp, sp) = g.forward();
            g.tensor_mut(ti).data_mut()[k] = orig - opts.eps;
            let (ym, sm) = g.forward();
            g.tensor_mut(ti).data_mut()[k] = orig;
            if sp != sig0 || sm != sig0 {
                report.skipped += 1;
                continue;
            }
            let numeric = (loss(&yp, &r) - loss(&ym, &r)) / (2.0 * opts.eps);
            let e = rel_err(analytic[ti].data()[k], numeric, opts.floor);
            report.max_rel_err = report.max_rel_err.max(e);
            report.checked += 1;
        }
        per_tensor.push(report);
    }
    per_tensor.retain(|t| t.checked + t.skipped > 0);
    GradReport { per_tensor }
}

/// Hash a sequence of booleans / indices into a kink signature.
#[derive(Debug, Clone, Copy)]
pub struct Signature(u64);

impl Default for Signature {
    fn default() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }
}

impl Signature {
    pub fn push(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100_0000_01b3);
        }
    }

    pub fn push_positive(&mut self, xs: &[f64]) {
        let mut word = 0u64;
        for (i, &x) in xs.iter().enumerate() {
            word = (word << 1) | (x > 0.0) as u64;
            if i % 64 == 63 {
                self.push(word);
                word = 0;
            }
        }
        self.push(word);
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}
