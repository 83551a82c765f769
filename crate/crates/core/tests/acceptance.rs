//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line.
//! Criteria 7 to 10 share one trained experiment over ten seeds.

mod common;

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use mcdqmri_core::dti::{eig_sym3, fa, fit_tensor, md, synthesize};
use mcdqmri_core::dunet::*;
use mcdqmri_core::eval::{artifact_contrast, mae, tissue_mean, tissue_uncertainty};
use mcdqmri_core::mcdropout::*;
use mcdqmri_core::nifti::{decode, encode, NiftiImage, VoxelData};
use mcdqmri_core::nn::gradcheck::{grad_check, CheckOptions};
use mcdqmri_core::nn::*;
use mcdqmri_core::phantom::*;
use mcdqmri_core::train::{train, TrainConfig};
use mcdqmri_core::volume::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!("{} criterion {id}: {name} | {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

#[test]
fn criterion_01_dti_oracle_exactness() {
    let t = Instant::now();
    let scheme = six_direction_scheme();
    let mut r = ChaCha8Rng::seed_from_u64(101);
    let (mut fit_err, mut rot_err) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let d = random_psd_tensor(&mut r);
        let (got, _) = fit_tensor(&synthesize(&d, r.random_range(200.0..2000.0), &scheme), &scheme).unwrap();
        for (a, b) in got.as_array().iter().zip(d.as_array()) {
            fit_err = fit_err.max((a - b).abs());
        }
        let e = eig_sym3(&d);
        let er = eig_sym3(&d.rotated(&random_rotation(&mut r)));
        rot_err = rot_err.max((fa(&e) - fa(&er)).abs()).max((md(&e) - md(&er)).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = fit_err < 1e-8 && rot_err < 1e-8 && secs < 5.0;
    verdict(1, "DTI oracle exactness", pass, &format!("max component err {fit_err:.2e}, max FA/MD rotation err {rot_err:.2e}, {secs:.2}s"));
}

#[test]
fn criterion_02_gradient_integrity() {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for (name, mut g) in layer_graphs(202) {
        let rep = grad_check(&mut g, CheckOptions::default());
        assert!(rep.checked() > 0, "{name}");
        worst = worst.max(rep.max_rel_err());
        lines.push(format!("{name} {:.1e}", rep.max_rel_err()));
    }
    let mut net = NetGraph::small_dunet(203);
    let rep = grad_check(&mut net, CheckOptions::default());
    assert!(rep.checked() > rep.skipped());
    worst = worst.max(rep.max_rel_err());
    lines.push(format!("dunet {:.1e} ({} skipped at kinks)", rep.max_rel_err(), rep.skipped()));
    let secs = t.elapsed().as_secs_f64();
    let pass = worst < 1e-4 && secs < 120.0;
    verdict(2, "gradient integrity", pass, &format!("max rel err {worst:.2e} [{}], {secs:.1}s", lines.join(", ")));
}

#[test]
fn criterion_03_dropout_expectation_and_variance() {
    let t = Instant::now();
    let x: Vec<f64> = (0..10).map(|i| -1.2 + 0.27 * i as f64).collect();
    let xa = NdArray::new(vec![10], x.clone()).unwrap();
    let mut exact_err = 0.0f64;
    for p in [0.2f64, 0.5] {
        let mut e = vec![0.0f64; 10];
        for bits in 0u32..1024 {
            let keep: Vec<bool> = (0..10).map(|i| bits >> i & 1 == 1).collect();
            let kept = keep.iter().filter(|&&k| k).count() as i32;
            let prob = (1.0 - p).powi(kept) * p.powi(10 - kept);
            let y = dropout_with_mask(&xa, &DropoutMask { keep, p });
            for (acc, v) in e.iter_mut().zip(y.data()) {
                *acc += prob * v;
            }
        }
        for (a, b) in e.iter().zip(&x) {
            exact_err = exact_err.max((a - b).abs());
        }
    }
    let mut var_err = 0.0f64;
    for p in [0.2, 0.5] {
        let cfg = DropoutConfig::new(p).unwrap();
        let n = 100_000u64;
        let (mut s, mut s2) = (vec![0.0; 10], vec![0.0; 10]);
        for i in 0..n {
            let (y, _) = dropout(&xa, cfg, &RngStream::new(303, i), true);
            for (k, &v) in y.data().iter().enumerate() {
                s[k] += v;
                s2[k] += v * v;
            }
        }
        for k in 0..10 {
            let mean = s[k] / n as f64;
            let var = (s2[k] - n as f64 * mean * mean) / (n as f64 - 1.0);
            let want = x[k] * x[k] * p / (1.0 - p);
            var_err = var_err.max((var / want - 1.0).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = exact_err < 1e-12 && var_err < 0.05 && secs < 30.0;
    verdict(3, "dropout expectation/variance", pass, &format!("enumerated |E[y]-x| {exact_err:.1e}, worst relative variance error {:.2}%, {secs:.1}s", 100.0 * var_err));
}

#[test]
fn criterion_04_mc_convergence_linear_net() {
    let t = Instant::now();
    let n = 10_000;
    let (ens, mean, var) = linear_dropout_ensemble(0.2, n, 404);
    let worst = (0..mean.len()).map(|o| (ens.mean()[o] - mean[o]).abs() / (var[o] / n as f64).sqrt()).fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    let pass = worst < 4.0 && secs < 30.0;
    verdict(4, "MC convergence on a linear net", pass, &format!("worst deviation {worst:.2} standard errors, {secs:.2}s"));
}

#[test]
fn criterion_05_zero_rate_equivalence() {
    let t = Instant::now();
    let cfg = DUNetConfig { dropout_rate: 0.0, ..DUNetConfig::desk() };
    let d = build_dunet::<f32>(cfg, 505).unwrap();
    let u = build_unet::<f32>(cfg, 505).unwrap();
    let x = rand_array(&[1, 4, 16, 16, 16], 506).cast::<f32>();
    let same = d.forward(&x, Mode::McInfer, PassRng::new(1, 0)).unwrap().data() == u.forward(&x, Mode::McInfer, PassRng::new(1, 0)).unwrap().data();
    let ens = mc_predict(&d, &x, 10, 507, 1).unwrap();
    let max_var = ens.variance().unwrap().iter().fold(0.0f64, |m, &v| m.max(v));
    let secs = t.elapsed().as_secs_f64();
    let pass = same && max_var == 0.0 && secs < 10.0;
    verdict(5, "p = 0 equivalence", pass, &format!("bit-identical to U-Net: {same}, max MC variance {max_var:e}, {secs:.2}s"));
}

#[test]
fn criterion_06_online_statistics() {
    let t = Instant::now();
    let mut r = ChaCha8Rng::seed_from_u64(606);
    let (mut stat_err, mut merge_err) = (0.0f64, 0.0f64);
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-12);
    for _ in 0..50 {
        let shape: Vec<usize> = (0..r.random_range(1..5)).map(|_| r.random_range(1..6)).collect();
        let len: usize = shape.iter().product();
        let n = r.random_range(2..120);
        let offset: f32 = r.random_range(-10.0..10.0);
        let samples: Vec<Vec<f32>> = (0..n).map(|_| (0..len).map(|_| offset + r.random_range(-1.0f32..1.0)).collect()).collect();
        let mut whole = Ensemble::new(&shape);
        samples.iter().for_each(|s| whole.update(s).unwrap());
        let (m, v) = two_pass(&samples);
        let wv = whole.variance().unwrap();
        for i in 0..len {
            stat_err = stat_err.max(rel(whole.mean()[i], m[i])).max(rel(wv[i], v[i]));
        }
        // split a shuffled pass order into chunks and merge in both directions
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let chunks: Vec<Ensemble> = order
            .chunks(n.div_ceil(4))
            .map(|c| {
                let mut e = Ensemble::new(&shape);
                c.iter().for_each(|&k| e.update(&samples[k]).unwrap());
                e
            })
            .collect();
        let left = chunks[1..].iter().fold(chunks[0].clone(), |acc, c| acc.merge(c).unwrap());
        let right = chunks[..chunks.len() - 1].iter().rev().fold(chunks[chunks.len() - 1].clone(), |acc, c| c.merge(&acc).unwrap());
        let (lv, rv) = (left.variance().unwrap(), right.variance().unwrap());
        for i in 0..len {
            merge_err = merge_err.max(rel(left.mean()[i], whole.mean()[i])).max(rel(lv[i], wv[i])).max(rel(rv[i], lv[i])).max(rel(right.mean()[i], left.mean()[i]));
        }
    }
    let secs = t.elapsed().as_secs_f64();
    let pass = stat_err < 1e-6 && merge_err < 1e-6 && secs < 10.0;
    verdict(6, "Welford and merge statistics", pass, &format!("Welford vs two-pass {stat_err:.1e}, permuted merges {merge_err:.1e}, {secs:.2}s"));
}

// ---- shared experiment for criteria 7 to 10 ----

const SEEDS: u64 = 10;
const EPOCHS: usize = 40;
const LR: f64 = 1e-3;
const INFER_STRIDE: usize = 8;
const PASSES: [usize; 4] = [1, 2, 50, 100];

struct SeedRun {
    /// FA MAE of the MC average at each entry of `PASSES`.
    mae: [f64; 4],
    unet_mae: f64,
    /// Masked mean FA CoV at n = 2 and n = 100.
    mean_cov: [f64; 2],
    cov_cc: f64,
    cov_gm: f64,
    /// Artifact contrast in the FA and MD CoV maps.
    artifact: [f64; 2],
    artifact_time: Duration,
}

struct Experiment {
    runs: Vec<SeedRun>,
    total: Duration,
}

fn masked_mean(v: &Volume, mask: &Mask) -> f64 {
    let vals = masked_values(v, mask, 0).unwrap();
    vals.iter().map(|&x| x as f64).sum::<f64>() / vals.len() as f64
}

fn run_seed(seed: u64) -> SeedRun {
    let ph = |i: u64| generate_phantom(&PhantomSpec::default().with_seed(derive_seed(seed, i))).unwrap();
    let train_sets = vec![ph(1), ph(2)];
    let test = ph(3);
    let cfg = TrainConfig { epochs: EPOCHS, lr: LR, seed: derive_seed(seed, 10), ..TrainConfig::default() };
    let net_cfg = DUNetConfig::desk();
    let init = derive_seed(seed, 20);
    let dunet = train(build_dunet(net_cfg, init).unwrap(), &train_sets, &cfg).unwrap().best;
    let unet = train(build_unet(net_cfg, init).unwrap(), &train_sets, &cfg).unwrap().best;

    let spec = BlockSpec::cubic(net_cfg.block_size, INFER_STRIDE).unwrap();
    let opts = InferOptions { seed: derive_seed(seed, 30), ..Default::default() };
    let fa_mae = |v: &Volume| mae(&clamp_fa(&v.extract_channel(0).unwrap()), &test.gt_fa, &test.mask).unwrap();
    let (res, _) = infer_volume_prefixes(&dunet, &test.input_dwi, &test.mask, &spec, &PASSES, opts).unwrap();
    let mae: Vec<f64> = res.iter().map(|r| fa_mae(&r.mean)).collect();
    let unet_mae = fa_mae(&infer_deterministic(&unet, &test.input_dwi, &test.mask, &spec).unwrap());
    let fa_cov = |r: &InferenceResult| r.uncertainty.as_ref().unwrap().cov.extract_channel(0).unwrap();
    let cov100 = fa_cov(&res[3]);
    let tissue = tissue_uncertainty(&cov100, &test.labels).unwrap();

    let t = Instant::now();
    let aspec = ArtifactSpec::centered(test.input_dwi.dims(), Polarity::Bright, 2, 4);
    let (art, amask) = inject_letter_artifact(&test.input_dwi, &aspec).unwrap();
    let aopts = InferOptions { seed: derive_seed(seed, 31), ..Default::default() };
    let (ares, _) = infer_volume(&dunet, &art, &test.mask, &spec, 100, aopts).unwrap();
    let acov = ares.uncertainty.unwrap().cov;
    let contrast = |c| artifact_contrast(&acov.extract_channel(c).unwrap(), &amask, &test.mask).unwrap();

    let run = SeedRun {
        mae: [mae[0], mae[1], mae[2], mae[3]],
        unet_mae,
        mean_cov: [masked_mean(&fa_cov(&res[1]), &test.mask), masked_mean(&cov100, &test.mask)],
        cov_cc: tissue_mean(&tissue, Tissue::CorpusCallosum).unwrap(),
        cov_gm: tissue_mean(&tissue, Tissue::CorticalGray).unwrap(),
        artifact: [contrast(0), contrast(1)],
        artifact_time: t.elapsed(),
    };
    println!(
        "seed {seed}: MAE(FA) n1 {:.4} n2 {:.4} n50 {:.4} n100 {:.4} unet {:.4} | mean CoV n2 {:.4} n100 {:.4} | CoV cc {:.4} gm {:.4} | artifact FA {:.2} MD {:.2}",
        run.mae[0], run.mae[1], run.mae[2], run.mae[3], run.unet_mae, run.mean_cov[0], run.mean_cov[1], run.cov_cc, run.cov_gm, run.artifact[0], run.artifact[1]
    );
    run
}

fn experiment() -> &'static Experiment {
    static EXP: OnceLock<Experiment> = OnceLock::new();
    EXP.get_or_init(|| {
        let t = Instant::now();
        let runs = (0..SEEDS).map(run_seed).collect();
        Experiment { runs, total: t.elapsed() }
    })
}

fn count(runs: &[SeedRun], f: impl Fn(&SeedRun) -> bool) -> usize {
    runs.iter().filter(|r| f(r)).count()
}

#[test]
fn criterion_07_averaging_benefit() {
    let e = experiment();
    let avg = count(&e.runs, |r| r.mae[3] <= r.mae[0]);
    let vs_unet = count(&e.runs, |r| r.mae[3] <= r.unet_mae);
    let mins = e.total.as_secs_f64() / 60.0;
    let pass = avg >= 9 && vs_unet >= 7 && mins < 30.0;
    verdict(7, "averaging benefit", pass, &format!("100-pass <= single pass in {avg}/10 (need 9), DU-Net 100-avg <= U-Net in {vs_unet}/10 (need 7), {mins:.1} min"));
}

#[test]
fn criterion_08_saturation() {
    let e = experiment();
    let n = count(&e.runs, |r| r.mae[2] - r.mae[3] <= r.mae[0] - r.mae[1]);
    verdict(8, "saturation", n >= 8, &format!("gain 50->100 <= gain 1->2 in {n}/10 (need 8)"));
}

#[test]
fn criterion_09_artifact_sensitivity() {
    let e = experiment();
    let n = count(&e.runs, |r| r.artifact[0] > 1.5 || r.artifact[1] > 1.5);
    let mins = e.runs.iter().map(|r| r.artifact_time.as_secs_f64()).sum::<f64>() / 60.0;
    let pass = n >= 8 && mins < 5.0;
    verdict(9, "artifact sensitivity", pass, &format!("contrast > 1.5 in FA or MD in {n}/10 (need 8), {mins:.1} min"));
}

#[test]
fn criterion_10_tissue_ordering() {
    let e = experiment();
    let n = count(&e.runs, |r| r.cov_cc < r.cov_gm);
    verdict(10, "tissue ordering", n >= 8, &format!("CoV(CC) < CoV(cortical GM) in {n}/10 (need 8)"));
}

#[test]
fn mean_uncertainty_does_not_grow_with_passes() {
    let e = experiment();
    let n = count(&e.runs, |r| r.mean_cov[1] <= r.mean_cov[0]);
    let pass = n >= 9;
    println!("{} mcdropout example: masked mean CoV n=100 <= n=2 in {n}/10 (need 9)", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "mean CoV decreased in only {n}/10 seeds");
}

// ---- criterion 11 ----

fn cli(dir: &Path, args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_mcdqmri")).args(args).current_dir(dir).env("RUST_LOG", "warn").output().unwrap();
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn pipeline(dir: &Path) {
    cli(dir, &["phantom", "--seed", "11", "--out", "train"]);
    cli(dir, &["phantom", "--seed", "12", "--artifact", "bright", "--out", "test"]);
    cli(dir, &["train", "--data", "train", "--epochs", "2", "--seed", "13", "--out", "model"]);
    cli(dir, &["infer", "--checkpoint", "model/best.ckpt", "--input", "test/dwi_input.nii", "--mask", "test/mask.nii", "--n-passes", "8", "--workers", "1", "--seed", "14", "--out", "pred"]);
    cli(dir, &["eval", "--pred", "pred", "--truth", "test", "--artifact-mask", "test/artifact_mask.nii", "--out", "eval"]);
}

fn files(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for sub in ["train", "test", "model", "pred", "eval"] {
        let mut names: Vec<String> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| format!("{sub}/{}", e.unwrap().file_name().to_string_lossy())).collect();
        names.sort();
        out.extend(names);
    }
    out
}

/// History rows without the wall-clock column.
fn history_without_time(text: &str) -> Vec<String> {
    text.lines().map(|l| l.rsplit_once(',').map(|(a, _)| a.to_string()).unwrap_or_default()).collect()
}

#[test]
fn criterion_11_determinism_and_formats() {
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let names = files(a.path());
    let mut mismatched = Vec::new();
    if names != files(b.path()) {
        mismatched.push("file list".to_string());
    }
    for f in &names {
        let (x, y) = (std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        let same = if f.ends_with("history.csv") {
            history_without_time(&String::from_utf8_lossy(&x)) == history_without_time(&String::from_utf8_lossy(&y))
        } else {
            x == y
        };
        if !same {
            mismatched.push(f.clone());
        }
    }

    let mut r = ChaCha8Rng::seed_from_u64(1111);
    let dims = [5, 4, 3];
    let images = [
        NiftiImage::from_volume(&Volume::new(2, dims, [1.25; 3], (0..120).map(|_| r.random_range(-1e3f32..1e3)).collect()).unwrap()),
        NiftiImage::from_mask(&Mask::from_fn(dims, |x, y, z| (x + 2 * y + z) % 3 == 0), [1.25; 3]),
        NiftiImage { channels: 1, dims, voxel_size: [2.0; 3], scl_slope: 1.0, scl_inter: 0.0, data: VoxelData::I16((0..60).map(|_| r.random()).collect()) },
    ];
    let nifti_ok = images.iter().all(|img| {
        let b1 = encode(img).unwrap();
        let b2 = encode(&decode(&b1).unwrap().0).unwrap();
        b1 == b2
    });
    let ckpt_ok = [build_dunet::<f32>(DUNetConfig::desk(), 1112).unwrap(), build_unet::<f32>(DUNetConfig::desk(), 1113).unwrap()]
        .iter()
        .all(|n| {
            let b = n.to_bytes();
            Network::<f32>::from_bytes(&b).unwrap().to_bytes() == b
        });
    let ckpt_file_ok = std::fs::read(a.path().join("model/best.ckpt")).map(|b| Network::<f32>::from_bytes(&b).unwrap().to_bytes() == b).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let pass = mismatched.is_empty() && nifti_ok && ckpt_ok && ckpt_file_ok && secs < 600.0;
    verdict(
        11,
        "determinism and formats",
        pass,
        &format!("{} pipeline files compared, mismatches {mismatched:?}, NIfTI double round trip {nifti_ok}, checkpoint round trip {}, {secs:.0}s", names.len(), ckpt_ok && ckpt_file_ok),
    );
}
