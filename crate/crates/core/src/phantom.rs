//! Synthetic brain-like diffusion phantoms with known tensors and tissue labels.
//!
//! Geometry is analytic: an outer ellipsoid bounds the brain, a cortical
//! gray-matter shell lines it, white matter fills the interior and carries
//! straight fibre tracts, two lateral ventricles hold CSF, two deep gray
//! nuclei sit beside them, and an arched corpus callosum crosses the midline.
//! Coordinates below are normalized to [-1, 1] per axis.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dti::{self, DiffTensor, DiffusionScheme, DtiError, FitOptions};
use crate::nifti::{self, NiftiError};
use crate::volume::{Dims, Mask, Tissue, TissueLabels, Volume, VolumeError};

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("phantom dims {0:?} below the 16^3 minimum")]
    TooSmall(Dims),
    #[error("tissue region '{0}' is empty for this geometry")]
    EmptyTissue(&'static str),
    #[error("letter raster {size}x{size} at ({x0}, {y0}) over slices {z0}..{z1} exceeds volume {dims:?}")]
    ArtifactExtent { size: usize, x0: usize, y0: usize, z0: usize, z1: usize, dims: Dims },
    #[error("invalid phantom parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Dti(#[from] DtiError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Phantom parameters. Serialized as flat `key = value` TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub voxel_size_mm: f32,
    pub seed: u64,

    /// Outer brain ellipsoid radii, as fractions of the half field of view.
    pub brain_rx: f64,
    pub brain_ry: f64,
    pub brain_rz: f64,
    /// Cortical shell thickness as a fraction of the brain radii.
    pub cortex_thickness: f64,
    pub tract_count: usize,
    pub tract_radius: f64,
    pub ventricle_rx: f64,
    pub ventricle_ry: f64,
    pub ventricle_rz: f64,
    pub ventricle_offset_x: f64,
    pub deep_gray_radius: f64,
    pub deep_gray_offset_x: f64,
    pub cc_height: f64,
    pub cc_curvature: f64,
    pub cc_half_length: f64,
    pub cc_radius: f64,
    /// Relative per-seed jitter of the geometry parameters.
    pub geometry_jitter: f64,

    pub wm_axial_min: f64,
    pub wm_axial_max: f64,
    pub wm_radial_min: f64,
    pub wm_radial_max: f64,
    pub gm_min: f64,
    pub gm_max: f64,
    pub deep_gray_min: f64,
    pub deep_gray_max: f64,
    /// Upper bound on deep gray FA.
    pub deep_gray_max_fa: f64,
    pub csf_min: f64,
    pub csf_max: f64,
    pub cc_axial_min: f64,
    pub cc_axial_max: f64,
    pub cc_radial_min: f64,
    pub cc_radial_max: f64,

    pub s0_wm: f64,
    pub s0_gm: f64,
    pub s0_deep_gray: f64,
    pub s0_csf: f64,
    pub s0_cc: f64,
    pub noise_sigma: f64,

    /// Scheme: `n_b0` unweighted volumes, the three axis directions, and
    /// `n_directions` further directions, all at `b_value` ms/µm².
    pub n_b0: usize,
    pub n_directions: usize,
    pub b_value: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            nx: 32,
            ny: 32,
            nz: 32,
            voxel_size_mm: 1.25,
            seed: 0,
            brain_rx: 0.9,
            brain_ry: 0.92,
            brain_rz: 0.85,
            cortex_thickness: 0.2,
            tract_count: 3,
            tract_radius: 0.13,
            ventricle_rx: 0.12,
            ventricle_ry: 0.3,
            ventricle_rz: 0.15,
            ventricle_offset_x: 0.16,
            deep_gray_radius: 0.16,
            deep_gray_offset_x: 0.42,
            cc_height: 0.3,
            cc_curvature: 0.6,
            cc_half_length: 0.5,
            cc_radius: 0.11,
            geometry_jitter: 0.08,
            wm_axial_min: 1.4,
            wm_axial_max: 1.8,
            wm_radial_min: 0.2,
            wm_radial_max: 0.4,
            gm_min: 0.7,
            gm_max: 0.9,
            deep_gray_min: 0.6,
            deep_gray_max: 0.8,
            deep_gray_max_fa: 0.25,
            csf_min: 2.5,
            csf_max: 3.0,
            cc_axial_min: 1.6,
            cc_axial_max: 1.9,
            cc_radial_min: 0.15,
            cc_radial_max: 0.3,
            s0_wm: 800.0,
            s0_gm: 1000.0,
            s0_deep_gray: 900.0,
            s0_csf: 1600.0,
            s0_cc: 760.0,
            noise_sigma: 10.0,
            n_b0: 2,
            n_directions: 30,
            b_value: 1.0,
        }
    }
}

impl PhantomSpec {
    pub fn dims(&self) -> Dims {
        [self.nx, self.ny, self.nz]
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat spec always serializes")
    }

    /// Scheme used by [`generate_phantom`]: b0 first, then x, y, z, then the
    /// remaining b0s and spread directions.
    pub fn scheme(&self) -> Result<DiffusionScheme, DtiError> {
        let mut bvals = vec![0.0, self.b_value, self.b_value, self.b_value];
        let mut bvecs = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        for _ in 1..self.n_b0 {
            bvals.push(0.0);
            bvecs.push([0.0; 3]);
        }
        for g in dti::fibonacci_directions(self.n_directions) {
            bvals.push(self.b_value);
            bvecs.push(g);
        }
        DiffusionScheme::new(bvals, bvecs)
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if self.nx < 16 || self.ny < 16 || self.nz < 16 {
            return Err(PhantomError::TooSmall(self.dims()));
        }
        let ranges = [
            ("wm_axial", self.wm_axial_min, self.wm_axial_max),
            ("wm_radial", self.wm_radial_min, self.wm_radial_max),
            ("gm", self.gm_min, self.gm_max),
            ("deep_gray", self.deep_gray_min, self.deep_gray_max),
            ("csf", self.csf_min, self.csf_max),
            ("cc_axial", self.cc_axial_min, self.cc_axial_max),
            ("cc_radial", self.cc_radial_min, self.cc_radial_max),
        ];
        for (name, lo, hi) in ranges {
            if !(lo > 0.0 && hi >= lo) {
                return Err(PhantomError::Invalid(format!("{name} prior [{lo}, {hi}] must be positive and ordered")));
            }
        }
        if !(self.voxel_size_mm > 0.0) || self.noise_sigma < 0.0 || !(self.b_value > 0.0) {
            return Err(PhantomError::Invalid("voxel size, noise sigma, or b-value out of range".into()));
        }
        if !(0.0..1.0).contains(&self.deep_gray_max_fa) {
            return Err(PhantomError::Invalid("deep_gray_max_fa must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomDataset {
    /// All scheme volumes, with noise.
    pub full_dwi: Volume,
    /// First b0 plus the x, y, z weighted volumes, with noise.
    pub input_dwi: Volume,
    pub gt_fa: Volume,
    pub gt_md: Volume,
    pub labels: TissueLabels,
    pub mask: Mask,
    pub scheme: DiffusionScheme,
    /// Tensors used to synthesize the signal, layout order; zero in background.
    pub tensors: Vec<DiffTensor>,
}

#[derive(Debug, Clone)]
struct Tract {
    point: [f64; 3],
    dir: [f64; 3],
    radius: f64,
}

#[derive(Debug, Clone)]
struct Geometry {
    brain: [f64; 3],
    inner: [f64; 3],
    ventricle: [f64; 3],
    ventricle_x: f64,
    deep_r: f64,
    deep_x: f64,
    cc_height: f64,
    cc_curv: f64,
    cc_half: f64,
    cc_r: f64,
    tracts: Vec<Tract>,
    deep_dir: [f64; 3],
    field_phase: [f64; 3],
}

fn jitter(rng: &mut ChaCha8Rng, v: f64, rel: f64) -> f64 {
    if rel == 0.0 {
        return v;
    }
    v * (1.0 + rng.random_range(-rel..=rel))
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            return dti::normalize3(v);
        }
    }
}

impl Geometry {
    fn sample(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let j = spec.geometry_jitter;
        let brain = [
            jitter(rng, spec.brain_rx, j / 2.0),
            jitter(rng, spec.brain_ry, j / 2.0),
            jitter(rng, spec.brain_rz, j / 2.0),
        ];
        let t = jitter(rng, spec.cortex_thickness, j);
        let inner = brain.map(|r| r * (1.0 - t));
        let ventricle = [
            jitter(rng, spec.ventricle_rx, j),
            jitter(rng, spec.ventricle_ry, j),
            jitter(rng, spec.ventricle_rz, j),
        ];
        let tracts = (0..spec.tract_count)
            .map(|_| Tract {
                point: [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.4..0.0)],
                dir: random_unit(rng),
                radius: jitter(rng, spec.tract_radius, j),
            })
            .collect();
        Geometry {
            brain,
            inner,
            ventricle,
            ventricle_x: jitter(rng, spec.ventricle_offset_x, j),
            deep_r: jitter(rng, spec.deep_gray_radius, j),
            deep_x: jitter(rng, spec.deep_gray_offset_x, j),
            cc_height: jitter(rng, spec.cc_height, j),
            cc_curv: jitter(rng, spec.cc_curvature, j),
            cc_half: jitter(rng, spec.cc_half_length, j),
            cc_r: jitter(rng, spec.cc_radius, j),
            tracts,
            deep_dir: random_unit(rng),
            field_phase: [
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ],
        }
    }

    fn label(&self, p: [f64; 3]) -> Tissue {
        let ell = |c: [f64; 3], r: [f64; 3]| {
            ((p[0] - c[0]) / r[0]).powi(2) + ((p[1] - c[1]) / r[1]).powi(2) + ((p[2] - c[2]) / r[2]).powi(2) <= 1.0
        };
        if !ell([0.0; 3], self.brain) {
            return Tissue::Background;
        }
        if ell([self.ventricle_x, 0.0, 0.0], self.ventricle) || ell([-self.ventricle_x, 0.0, 0.0], self.ventricle) {
            return Tissue::Csf;
        }
        if self.in_cc(p) {
            return Tissue::CorpusCallosum;
        }
        let dr = [self.deep_r; 3];
        if ell([self.deep_x, 0.0, -0.1], dr) || ell([-self.deep_x, 0.0, -0.1], dr) {
            return Tissue::DeepGray;
        }
        if !ell([0.0; 3], self.inner) {
            return Tissue::CorticalGray;
        }
        Tissue::WhiteMatter
    }

    fn in_cc(&self, p: [f64; 3]) -> bool {
        if p[0].abs() > self.cc_half {
            return false;
        }
        let zc = self.cc_height - self.cc_curv * p[0] * p[0];
        p[1] * p[1] + (p[2] - zc).powi(2) <= self.cc_r * self.cc_r
    }

    fn cc_direction(&self, p: [f64; 3]) -> [f64; 3] {
        dti::normalize3([1.0, 0.0, -2.0 * self.cc_curv * p[0]])
    }

    fn wm_direction(&self, p: [f64; 3]) -> [f64; 3] {
        for t in &self.tracts {
            let d = [p[0] - t.point[0], p[1] - t.point[1], p[2] - t.point[2]];
            let along = d[0] * t.dir[0] + d[1] * t.dir[1] + d[2] * t.dir[2];
            let perp2 = d.iter().map(|x| x * x).sum::<f64>() - along * along;
            if perp2 <= t.radius * t.radius {
                return t.dir;
            }
        }
        // smooth background orientation field
        let f = self.field_phase;
        dti::normalize3([
            (2.0 * p[1] + f[0]).cos() + 0.3,
            (2.0 * p[2] + f[1]).sin(),
            (2.0 * p[0] + f[2]).cos(),
        ])
    }
}

fn normalized_coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Build a seeded phantom. Ground-truth FA/MD come from fitting the noiseless
/// full-scheme signal, the same protocol used for real data.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<PhantomDataset, PhantomError> {
    spec.validate()?;
    let dims = spec.dims();
    let vs = [spec.voxel_size_mm; 3];
    let scheme = spec.scheme()?;
    let mut geo_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    geo_rng.set_stream(1);
    let geo = Geometry::sample(spec, &mut geo_rng);
    let mut tensor_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    tensor_rng.set_stream(2);

    let n = dims.iter().product::<usize>();
    let mut labels = vec![0u8; n];
    let mut tensors = vec![DiffTensor::default(); n];
    let mut s0 = vec![0.0f64; n];
    // deep gray anisotropy a gives FA = a / sqrt((1 + a)^2 + 2); invert for the cap
    let fa_cap = spec.deep_gray_max_fa;
    let deep_a_max = {
        let f2 = fa_cap * fa_cap;
        (f2 + (f2 * f2 + 3.0 * f2 * (1.0 - f2)).sqrt()) / (1.0 - f2)
    };
    let mut idx = 0;
    for x in 0..dims[0] {
        for y in 0..dims[1] {
            for z in 0..dims[2] {
                let p = [normalized_coord(x, dims[0]), normalized_coord(y, dims[1]), normalized_coord(z, dims[2])];
                let tissue = geo.label(p);
                labels[idx] = tissue as u8;
                let (d, s) = match tissue {
                    Tissue::Background => (DiffTensor::default(), 0.0),
                    Tissue::WhiteMatter => {
                        let ax = uniform(&mut tensor_rng, spec.wm_axial_min, spec.wm_axial_max);
                        let rad = uniform(&mut tensor_rng, spec.wm_radial_min, spec.wm_radial_max);
                        (DiffTensor::cylinder(geo.wm_direction(p), ax, rad), spec.s0_wm)
                    }
                    Tissue::CorpusCallosum => {
                        let ax = uniform(&mut tensor_rng, spec.cc_axial_min, spec.cc_axial_max);
                        let rad = uniform(&mut tensor_rng, spec.cc_radial_min, spec.cc_radial_max);
                        (DiffTensor::cylinder(geo.cc_direction(p), ax, rad), spec.s0_cc)
                    }
                    Tissue::CorticalGray => {
                        let d = uniform(&mut tensor_rng, spec.gm_min, spec.gm_max);
                        (DiffTensor::diag(d, d, d), spec.s0_gm)
                    }
                    Tissue::DeepGray => {
                        let d = uniform(&mut tensor_rng, spec.deep_gray_min, spec.deep_gray_max);
                        let a = uniform(&mut tensor_rng, 0.0, deep_a_max * 0.999);
                        (DiffTensor::cylinder(geo.deep_dir, d * (1.0 + a), d), spec.s0_deep_gray)
                    }
                    Tissue::Csf => {
                        let d = uniform(&mut tensor_rng, spec.csf_min, spec.csf_max);
                        (DiffTensor::diag(d, d, d), spec.s0_csf)
                    }
                };
                tensors[idx] = d;
                s0[idx] = s;
                idx += 1;
            }
        }
    }
    let labels = TissueLabels::new(dims, labels)?;
    for t in Tissue::FOREGROUND {
        if labels.count(t) == 0 {
            return Err(PhantomError::EmptyTissue(t.name()));
        }
    }
    let mask = labels.foreground();

    let m = scheme.n_volumes();
    let mut clean = vec![0.0f32; m * n];
    for i in 0..n {
        if s0[i] == 0.0 {
            continue;
        }
        for (c, (&b, g)) in scheme.bvals().iter().zip(scheme.bvecs()).enumerate() {
            clean[c * n + i] = dti::signal(&tensors[i], s0[i], b, g) as f32;
        }
    }
    let clean = Volume::new(m, dims, vs, clean)?;
    let gt = dti::fit_volume(&clean, &mask, &scheme, FitOptions::default())?;

    let mut noise_seed = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_seed.set_stream(3);
    let full_dwi = add_rician_noise(&clean, spec.noise_sigma, noise_seed.random());
    let input_idx = input_indices(&scheme)?;
    let input_dwi = full_dwi.select_channels(&input_idx)?;

    Ok(PhantomDataset { full_dwi, input_dwi, gt_fa: gt.fa, gt_md: gt.md, labels, mask, scheme, tensors })
}

/// Channel indices of the first b0 and the x, y, z weighted volumes.
pub fn input_indices(scheme: &DiffusionScheme) -> Result<Vec<usize>, DtiError> {
    let missing = |what: &str| DtiError::Deficient(format!("scheme has no {what} volume"));
    Ok(vec![
        scheme.first_b0().ok_or_else(|| missing("b=0"))?,
        scheme.find_direction([1.0, 0.0, 0.0]).ok_or_else(|| missing("x-direction"))?,
        scheme.find_direction([0.0, 1.0, 0.0]).ok_or_else(|| missing("y-direction"))?,
        scheme.find_direction([0.0, 0.0, 1.0]).ok_or_else(|| missing("z-direction"))?,
    ])
}

/// Magnitude of a complex Gaussian perturbation: `sqrt((x + n1)² + n2²)`.
pub fn add_rician_noise(vol: &Volume, sigma: f64, seed: u64) -> Volume {
    if sigma == 0.0 {
        return vol.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma is finite and nonnegative");
    let mut out = vol.clone();
    for v in out.data_mut() {
        let re = *v as f64 + normal.sample(&mut rng);
        let im = normal.sample(&mut rng);
        *v = (re * re + im * im).sqrt() as f32;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Bright,
    Dark,
}

impl std::str::FromStr for Polarity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bright" => Ok(Polarity::Bright),
            "dark" => Ok(Polarity::Dark),
            other => Err(format!("unknown polarity {other:?} (expected bright or dark)")),
        }
    }
}

/// The letter "M": two full columns and two diagonals meeting mid-height.
pub const LETTER_M: [[u8; 7]; 7] = [
    [1, 0, 0, 0, 0, 0, 1],
    [1, 1, 0, 0, 0, 1, 1],
    [1, 0, 1, 0, 1, 0, 1],
    [1, 0, 0, 1, 0, 0, 1],
    [1, 0, 0, 0, 0, 0, 1],
    [1, 0, 0, 0, 0, 0, 1],
    [1, 0, 0, 0, 0, 0, 1],
];

pub fn letter_popcount() -> usize {
    LETTER_M.iter().flatten().filter(|&&b| b == 1).count()
}

/// Placement and intensity of an injected letter artifact.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArtifactSpec {
    pub polarity: Polarity,
    /// Upscaling factor of the 7x7 bitmap (voxels per bitmap cell).
    pub raster_scale: usize,
    /// Lower-left corner of the letter in the x-y plane.
    pub origin_xy: [usize; 2],
    /// Half-open slice range along z.
    pub slices: (usize, usize),
    /// Bright value as a multiple of the 99th-percentile in-letter intensity.
    pub scale_bright: f32,
    pub scale_dark: f32,
}

impl ArtifactSpec {
    /// Letter centered in-plane, spanning `n_slices` central slices.
    pub fn centered(dims: Dims, polarity: Polarity, raster_scale: usize, n_slices: usize) -> Self {
        let size = 7 * raster_scale;
        let ox = dims[0].saturating_sub(size) / 2;
        let oy = dims[1].saturating_sub(size) / 2;
        let z0 = dims[2].saturating_sub(n_slices) / 2;
        Self {
            polarity,
            raster_scale,
            origin_xy: [ox, oy],
            slices: (z0, z0 + n_slices),
            scale_bright: 3.0,
            scale_dark: 0.0,
        }
    }

    pub fn raster_mask(&self, dims: Dims) -> Result<Mask, PhantomError> {
        let s = self.raster_scale;
        let size = 7 * s;
        let [x0, y0] = self.origin_xy;
        let (z0, z1) = self.slices;
        if s == 0 || x0 + size > dims[0] || y0 + size > dims[1] || z1 > dims[2] || z0 >= z1 {
            return Err(PhantomError::ArtifactExtent { size, x0, y0, z0, z1, dims });
        }
        Ok(Mask::from_fn(dims, |x, y, z| {
            if x < x0 || x >= x0 + size || y < y0 || y >= y0 + size || z < z0 || z >= z1 {
                return false;
            }
            let col = (x - x0) / s;
            let row = 6 - (y - y0) / s; // top row of the bitmap at high y
            LETTER_M[row][col] == 1
        }))
    }
}

fn percentile_99(mut values: Vec<f32>) -> f32 {
    if values.is_empty() {
        return 0.0;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = 0.99 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let t = (rank - lo as f64) as f32;
    values[lo] * (1.0 - t) + values[hi] * t
}

/// Overwrite the letter-shaped region of every channel. Bright voxels get
/// `scale_bright` times the channel's 99th percentile over the letter region;
/// dark voxels get `scale_dark`.
pub fn inject_letter_artifact(vol: &Volume, spec: &ArtifactSpec) -> Result<(Volume, Mask), PhantomError> {
    let mask = spec.raster_mask(vol.dims())?;
    let mut out = vol.clone();
    for c in 0..vol.channels() {
        let value = match spec.polarity {
            Polarity::Bright => spec.scale_bright * percentile_99(crate::volume::masked_values(vol, &mask, c)?),
            Polarity::Dark => spec.scale_dark,
        };
        let ch = out.channel_mut(c)?;
        for (v, &m) in ch.iter_mut().zip(mask.bits()) {
            if m {
                *v = value;
            }
        }
    }
    Ok((out, mask))
}

pub const DATASET_FILES: [&str; 7] =
    ["dwi_full.nii", "dwi_input.nii", "fa_gt.nii", "md_gt.nii", "labels.nii", "mask.nii", "scheme.txt"];

impl PhantomDataset {
    pub fn voxel_size(&self) -> [f32; 3] {
        self.full_dwi.voxel_size()
    }

    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), PhantomError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|source| PhantomError::Io { path: dir.display().to_string(), source })?;
        let vs = self.voxel_size();
        nifti::write_volume(dir.join("dwi_full.nii"), &self.full_dwi)?;
        nifti::write_volume(dir.join("dwi_input.nii"), &self.input_dwi)?;
        nifti::write_volume(dir.join("fa_gt.nii"), &self.gt_fa)?;
        nifti::write_volume(dir.join("md_gt.nii"), &self.gt_md)?;
        nifti::write_labels(dir.join("labels.nii"), &self.labels, vs)?;
        nifti::write_mask(dir.join("mask.nii"), &self.mask, vs)?;
        let p = dir.join("scheme.txt");
        std::fs::write(&p, self.scheme.to_text()).map_err(|source| PhantomError::Io { path: p.display().to_string(), source })?;
        Ok(())
    }

    /// Load a dataset directory. Generating tensors are not stored on disk,
    /// so `tensors` is empty.
    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self, PhantomError> {
        let dir = dir.as_ref();
        Ok(Self {
            full_dwi: nifti::read_volume(dir.join("dwi_full.nii"))?,
            input_dwi: nifti::read_volume(dir.join("dwi_input.nii"))?,
            gt_fa: nifti::read_volume(dir.join("fa_gt.nii"))?,
            gt_md: nifti::read_volume(dir.join("md_gt.nii"))?,
            labels: nifti::read_labels(dir.join("labels.nii"))?,
            mask: nifti::read_mask(dir.join("mask.nii"))?,
            scheme: DiffusionScheme::read(dir.join("scheme.txt"))?,
            tensors: Vec::new(),
        })
    }
}
