mod common;

use common::*;
use mcdqmri_core::dunet::*;
use mcdqmri_core::mcdropout::*;
use mcdqmri_core::phantom::{generate_phantom, PhantomSpec};
use mcdqmri_core::volume::{BlockSpec, Mask};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn from_samples(shape: &[usize], samples: &[Vec<f32>]) -> Ensemble {
    let mut e = Ensemble::new(shape);
    for s in samples {
        e.update(s).unwrap();
    }
    e
}

fn random_samples(n: usize, len: usize, seed: u64) -> Vec<Vec<f32>> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let offset: f32 = r.random_range(-5.0..5.0);
    (0..n).map(|_| (0..len).map(|_| offset + r.random_range(-1.0f32..1.0)).collect()).collect()
}

#[test]
fn welford_small_examples() {
    let e = from_samples(&[3], &[vec![1.0, -2.0, 0.5]]);
    assert_eq!(e.mean(), &[1.0, -2.0, 0.5]);
    assert_eq!(e.m2(), &[0.0; 3]);
    assert!(matches!(e.variance(), Err(McError::TooFewPasses(1))));

    let e = from_samples(&[1], &[vec![1.0], vec![3.0]]);
    assert_eq!(e.mean(), &[2.0]);
    assert_eq!(e.m2(), &[2.0]);
    assert_eq!(e.variance().unwrap(), vec![2.0]);
    assert!(Ensemble::new(&[2]).update(&[1.0]).is_err());
}

#[test]
fn welford_matches_two_pass_on_1000_samples() {
    let s = random_samples(1000, 50, 3);
    let e = from_samples(&[50], &s);
    let (m, v) = two_pass(&s);
    let var = e.variance().unwrap();
    for i in 0..50 {
        assert!(rel_close(e.mean()[i], m[i], 1e-6));
        assert!(rel_close(var[i], v[i], 1e-6));
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, ..ProptestConfig::default() })]

    #[test]
    fn welford_equals_two_pass(n in 2usize..200, len in 1usize..40, seed in any::<u64>()) {
        let s = random_samples(n, len, seed);
        let e = from_samples(&[len], &s);
        let (m, v) = two_pass(&s);
        let var = e.variance().unwrap();
        for i in 0..len {
            prop_assert!(rel_close(e.mean()[i], m[i], 1e-6));
            prop_assert!(rel_close(var[i], v[i], 1e-6), "{} vs {}", var[i], v[i]);
        }
    }

    #[test]
    fn merge_is_order_insensitive(n in 4usize..80, len in 1usize..10, cuts in prop::collection::vec(any::<prop::sample::Index>(), 3), seed in any::<u64>()) {
        let s = random_samples(n, len, seed);
        let mut idx: Vec<usize> = cuts.iter().map(|c| c.index(n)).collect();
        idx.sort();
        let parts: Vec<Ensemble> = [0, idx[0], idx[1], idx[2], n].windows(2).map(|w| from_samples(&[len], &s[w[0]..w[1]])).collect();
        let left = parts[0].merge(&parts[1]).unwrap().merge(&parts[2]).unwrap().merge(&parts[3]).unwrap();
        let right = parts[3].merge(&parts[2].merge(&parts[1].merge(&parts[0]).unwrap()).unwrap()).unwrap();
        let whole = from_samples(&[len], &s);
        prop_assert_eq!(left.count(), n);
        let (vl, vr, vw) = (left.variance().unwrap(), right.variance().unwrap(), whole.variance().unwrap());
        for i in 0..len {
            prop_assert!(rel_close(left.mean()[i], right.mean()[i], 1e-6));
            prop_assert!(rel_close(left.mean()[i], whole.mean()[i], 1e-6));
            prop_assert!(rel_close(vl[i], vr[i], 1e-6));
            prop_assert!(rel_close(vl[i], vw[i], 1e-6));
        }
    }
}

#[test]
fn linear_dropout_mean_converges() {
    let n = 10_000;
    let (ens, mean, var) = linear_dropout_ensemble(0.2, n, 4);
    for o in 0..mean.len() {
        let se = (var[o] / n as f64).sqrt();
        assert!((ens.mean()[o] - mean[o]).abs() < 4.0 * se, "coord {o}");
        let sample = ens.variance().unwrap()[o];
        assert!((sample / var[o] - 1.0).abs() < 0.1, "coord {o}: {sample} vs {}", var[o]);
    }
}

fn tiny(p: f64) -> DUNetConfig {
    DUNetConfig { depth: 2, base_kernels: 4, block_size: 8, dropout_rate: p, ..DUNetConfig::desk() }
}

fn block_input(seed: u64) -> mcdqmri_core::nn::NdArray<f32> {
    rand_array(&[1, 4, 8, 8, 8], seed).cast()
}

#[test]
fn zero_rate_gives_exactly_zero_variance() {
    let net = build_dunet::<f32>(tiny(0.0), 1).unwrap();
    let e = mc_predict(&net, &block_input(2), 20, 3, 1).unwrap();
    assert!(e.variance().unwrap().iter().all(|&v| v == 0.0));
    assert!(e.m2().iter().all(|&v| v == 0.0));
}

#[test]
fn single_pass_cannot_make_an_uncertainty_map() {
    let net = build_dunet::<f32>(tiny(0.2), 1).unwrap();
    let e = mc_predict(&net, &block_input(2), 1, 3, 1).unwrap();
    let mask = Mask::filled([8, 8, 8], true);
    assert!(matches!(uncertainty_map(&e, &mask, 1e-6, [1.0; 3]), Err(McError::TooFewPasses(1))));
    assert!(matches!(mc_predict(&net, &block_input(2), 0, 3, 1), Err(McError::NoPasses)));
    // n = 1 average is the single prediction
    let y = net.forward(&block_input(2), Mode::McInfer, PassRng::new(3, 0)).unwrap();
    assert_eq!(averaged_prediction(&e, [1.0; 3]).unwrap().data(), y.data());
}

#[test]
fn uncertainty_map_examples() {
    let shape = [1, 2, 2, 1, 1];
    let mask = Mask::filled([2, 1, 1], true);
    let constant = from_samples(&shape, &vec![vec![0.5, 0.7, 1.0, 2.0]; 4]);
    let u = uncertainty_map(&constant, &mask, 1e-6, [1.0; 3]).unwrap();
    assert!(u.cov.data().iter().all(|&v| v == 0.0));

    // channel 0 voxel 0 gets {1, 3}; channel 0 voxel 1 has mean 0 and spread
    let e = from_samples(&shape, &[vec![1.0, -1.0, 2.0, 2.0], vec![3.0, 1.0, 2.0, 2.0]]);
    let u = uncertainty_map(&e, &mask, 1e-6, [1.0; 3]).unwrap();
    assert!((u.cov.data()[0] as f64 - 2f64.sqrt() / 2.0).abs() < 1e-6);
    assert!((u.cov.data()[1] as f64 - 2f64.sqrt() / 1e-6).abs() < 1.0);
    assert_eq!(u.low_mean, vec![1, 0]);
    assert!(u.cov.data().iter().all(|v| v.is_finite() && *v >= 0.0));

    let half = Mask::from_fn([2, 1, 1], |x, _, _| x == 0);
    let u = uncertainty_map(&e, &half, 1e-6, [1.0; 3]).unwrap();
    assert_eq!(u.cov.data()[1], 0.0);
    assert_eq!(u.low_mean, vec![0, 0]);
}

#[test]
fn average_of_copies_is_the_copy() {
    let s = random_samples(1, 16, 7).remove(0);
    let e = from_samples(&[1, 2, 2, 2, 2], &vec![s.clone(); 9]);
    let v = averaged_prediction(&e, [1.0; 3]).unwrap();
    assert_eq!(v.data(), s.as_slice());
}

#[test]
fn streamed_mean_matches_retained_passes() {
    let net = build_dunet::<f32>(tiny(0.3), 5).unwrap();
    let x = block_input(6);
    let e = mc_predict(&net, &x, 100, 11, 1).unwrap();
    let kept: Vec<Vec<f32>> =
        (0..100).map(|k| net.forward(&x, Mode::McInfer, PassRng::new(11, k)).unwrap().into_data()).collect();
    let (m, v) = two_pass(&kept);
    let var = e.variance().unwrap();
    for i in 0..m.len() {
        assert!((e.mean()[i] - m[i]).abs() < 1e-6);
        assert!(rel_close(var[i], v[i], 1e-6));
    }
}

#[test]
fn pass_order_and_worker_count_do_not_matter() {
    let net = build_dunet::<f32>(tiny(0.3), 5).unwrap();
    let x = block_input(6);
    let one = mc_predict(&net, &x, 30, 2, 1).unwrap();
    let many = mc_predict(&net, &x, 30, 2, 4).unwrap();
    let mut rev = Ensemble::new(one.shape());
    for k in (0..30).rev() {
        rev.update_array(&net.forward(&x, Mode::McInfer, PassRng::new(2, k)).unwrap()).unwrap();
    }
    let (v1, vm, vr) = (one.variance().unwrap(), many.variance().unwrap(), rev.variance().unwrap());
    for i in 0..v1.len() {
        assert!((one.mean()[i] - many.mean()[i]).abs() < 1e-6);
        assert!((one.mean()[i] - rev.mean()[i]).abs() < 1e-6);
        assert!(rel_close(v1[i], vm[i], 1e-6) && rel_close(v1[i], vr[i], 1e-6));
    }
    let prefixes = mc_predict_prefixes(&net, &x, &[30, 5], 2).unwrap();
    assert_eq!(prefixes[0], one);
    assert_eq!(prefixes[1], mc_predict(&net, &x, 5, 2, 1).unwrap());
}

#[test]
fn volume_inference_contracts() {
    let ds = generate_phantom(&PhantomSpec { nx: 16, ny: 16, nz: 16, ..PhantomSpec::default() }.with_seed(2)).unwrap();
    let spec = BlockSpec::cubic(8, 8).unwrap();
    let opts = InferOptions { seed: 4, ..InferOptions::default() };

    let zero = build_dunet::<f32>(tiny(0.0), 3).unwrap();
    let (r, _) = infer_volume(&zero, &ds.input_dwi, &ds.mask, &spec, 100, opts).unwrap();
    let det = infer_deterministic(&zero, &ds.input_dwi, &ds.mask, &spec).unwrap();
    assert_eq!(r.mean.data(), det.data());
    assert!(r.uncertainty.unwrap().cov.data().iter().all(|&v| v == 0.0));

    let net = build_dunet::<f32>(tiny(0.2), 3).unwrap();
    let (a, ma) = infer_volume(&net, &ds.input_dwi, &ds.mask, &spec, 6, opts).unwrap();
    let (b, mb) = infer_volume(&net, &ds.input_dwi, &ds.mask, &spec, 6, opts).unwrap();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let active = ma.n_blocks - ma.skipped_blocks.len();
    assert_eq!(ma.passes.len(), 6 * active);
    let cov = a.uncertainty.unwrap().cov;
    for ch in 0..2 {
        for (v, &m) in cov.channel(ch).unwrap().iter().zip(ds.mask.bits()) {
            assert!(v.is_finite() && *v >= 0.0);
            if !m {
                assert_eq!(*v, 0.0);
            }
        }
    }

    let (one, _) = infer_volume(&net, &ds.input_dwi, &ds.mask, &spec, 1, opts).unwrap();
    assert!(one.uncertainty.is_none());
    let (pre, _) = infer_volume_prefixes(&net, &ds.input_dwi, &ds.mask, &spec, &[1, 6], opts).unwrap();
    assert_eq!(pre[0].mean, one.mean);
    assert_eq!(pre[1].mean, a.mean);
}

#[test]
fn fa_clamp_bounds_values() {
    let v = mcdqmri_core::volume::Volume::new(1, [3, 1, 1], [1.0; 3], vec![-0.2, 0.4, 1.3]).unwrap();
    assert_eq!(clamp_fa(&v).data(), &[0.0, 0.4, 1.0]);
}
