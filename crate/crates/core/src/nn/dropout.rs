use rand::RngCore;
use thiserror::Error;

use super::array::{NdArray, Real};
use super::rng::RngStream;

pub const MAX_DROPOUT_RATE: f64 = 0.95;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("dropout rate {0} outside [0, {MAX_DROPOUT_RATE}]")]
pub struct RateError(pub f64);

/// Element-wise inverted dropout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutConfig {
    p: f64,
}

impl DropoutConfig {
    pub fn new(p: f64) -> Result<Self, RateError> {
        if !(0.0..=MAX_DROPOUT_RATE).contains(&p) {
            return Err(RateError(p));
        }
        Ok(Self { p })
    }

    pub fn rate(&self) -> f64 {
        self.p
    }

    /// A draw `u` from a uniform `u32` keeps the unit iff `u < threshold`.
    fn keep_threshold(&self) -> u64 {
        ((1.0 - self.p) * 4_294_967_296.0).round() as u64
    }
}

/// Keep pattern of one dropout application and its rate.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub p: f64,
}

impl DropoutMask {
    pub fn all_keep(len: usize) -> Self {
        Self { keep: vec![true; len], p: 0.0 }
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Apply dropout with a mask drawn from `rng`. When `active` is false or the
/// rate is zero the input is returned unchanged and no random numbers are
/// consumed.
pub fn dropout<T: Real>(x: &NdArray<T>, cfg: DropoutConfig, rng: &RngStream, active: bool) -> (NdArray<T>, DropoutMask) {
    if !active || cfg.p == 0.0 {
        return (x.clone(), DropoutMask::all_keep(x.len()));
    }
    let threshold = cfg.keep_threshold();
    let mut r = rng.rng();
    let keep: Vec<bool> = (0..x.len()).map(|_| (r.next_u32() as u64) < threshold).collect();
    let mask = DropoutMask { keep, p: cfg.p };
    let y = dropout_with_mask(x, &mask);
    (y, mask)
}

/// `y = x · keep / (1 − p)`.
pub fn dropout_with_mask<T: Real>(x: &NdArray<T>, mask: &DropoutMask) -> NdArray<T> {
    assert_eq!(x.len(), mask.keep.len(), "dropout mask length");
    if mask.p == 0.0 {
        return x.clone();
    }
    let scale = T::of(1.0 / (1.0 - mask.p));
    let mut y = x.clone();
    for (v, &k) in y.data_mut().iter_mut().zip(&mask.keep) {
        *v = if k { *v * scale } else { T::zero() };
    }
    y
}

/// The backward pass is the same linear map as the forward.
pub fn dropout_backward<T: Real>(dy: &NdArray<T>, mask: &DropoutMask) -> NdArray<T> {
    dropout_with_mask(dy, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rate_bounds() {
        assert!(DropoutConfig::new(0.95).is_ok());
        assert!(DropoutConfig::new(0.96).is_err());
        assert!(DropoutConfig::new(-0.1).is_err());
        assert!(DropoutConfig::new(f64::NAN).is_err());
    }

    #[test]
    fn zero_rate_is_identity() {
        let x = NdArray::<f32>::from_fn(&[7], |i| i as f32 - 3.0);
        for s in 0..5 {
            let (y, m) = dropout(&x, DropoutConfig::new(0.0).unwrap(), &RngStream::new(s, s), true);
            assert_eq!(y, x);
            assert_eq!(m.kept(), 7);
        }
        let (y, _) = dropout(&x, DropoutConfig::new(0.5).unwrap(), &RngStream::new(1, 1), false);
        assert_eq!(y, x);
    }

    #[test]
    fn forced_mask_scales_kept_units() {
        let x = NdArray::<f32>::full(&[4], 1.0);
        let m = DropoutMask { keep: vec![true, false, true, false], p: 0.5 };
        assert_eq!(dropout_with_mask(&x, &m).data(), &[2.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn exhaustive_expectation_is_identity() {
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let xa = NdArray::new(vec![10], x.clone()).unwrap();
        let p: f64 = 0.3;
        let mut mean = vec![0.0; 10];
        for bits in 0u32..1024 {
            let keep: Vec<bool> = (0..10).map(|i| bits >> i & 1 == 1).collect();
            let k = keep.iter().filter(|&&v| v).count() as i32;
            let w = (1.0 - p).powi(k) * p.powi(10 - k);
            let y = dropout_with_mask(&xa, &DropoutMask { keep, p });
            for (m, v) in mean.iter_mut().zip(y.data()) {
                *m += w * v;
            }
        }
        for (m, v) in mean.iter().zip(&x) {
            assert!((m - v).abs() < 1e-12);
        }
    }

    #[test]
    fn same_stream_same_mask() {
        let x = NdArray::<f32>::full(&[64], 1.0);
        let cfg = DropoutConfig::new(0.4).unwrap();
        let (a, _) = dropout(&x, cfg, &RngStream::new(9, 3), true);
        let (b, _) = dropout(&x, cfg, &RngStream::new(9, 3), true);
        let (c, _) = dropout(&x, cfg, &RngStream::new(9, 4), true);
        assert_eq!(a, b);
        assert_ne!(a, c);
        // mask depends on the stream only, not on the float type
        let (_, m32) = dropout(&x, cfg, &RngStream::new(9, 3), true);
        let (_, m64) = dropout(&x.cast::<f64>(), cfg, &RngStream::new(9, 3), true);
        assert_eq!(m32, m64);
    }
}
