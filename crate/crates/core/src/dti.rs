//! Diffusion tensor model: signal synthesis, log-linear least-squares fitting,
//! symmetric 3x3 eigendecomposition, and FA/MD.
//!
//! Units: diffusivity in µm²/ms and b in ms/µm², so b = 1000 s/mm² is 1.0.

use std::f64::consts::PI;
use std::path::Path;

use thiserror::Error;

use crate::volume::{Mask, Volume, VolumeError};

const UNIT_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DtiError {
    #[error("scheme lists {bvals} b-values but {bvecs} directions")]
    SchemeLength { bvals: usize, bvecs: usize },
    #[error("volume {index}: gradient direction {dir:?} is not unit length")]
    NotUnit { index: usize, dir: [f64; 3] },
    #[error("volume {index}: negative or non-finite b-value {b}")]
    BadBValue { index: usize, b: f64 },
    #[error("scheme deficiency: {0}")]
    Deficient(String),
    #[error("expected {expected} signals, got {got}")]
    SignalCount { expected: usize, got: usize },
    #[error("scheme file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("reading scheme {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Per-volume b-values and unit gradient directions.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionScheme {
    bvals: Vec<f64>,
    bvecs: Vec<[f64; 3]>,
}

impl DiffusionScheme {
    /// Construct and check per-volume invariants. Fit-readiness (enough
    /// b=0 and weighted volumes, full rank) is checked by [`TensorFitter::new`].
    pub fn new(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> Result<Self, DtiError> {
        if bvals.len() != bvecs.len() {
            return Err(DtiError::SchemeLength { bvals: bvals.len(), bvecs: bvecs.len() });
        }
        for (index, (&b, g)) in bvals.iter().zip(&bvecs).enumerate() {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(DtiError::BadBValue { index, b });
            }
            if b > 0.0 && (norm3(g) - 1.0).abs() > UNIT_TOL {
                return Err(DtiError::NotUnit { index, dir: *g });
            }
        }
        Ok(Self { bvals, bvecs })
    }

    pub fn n_volumes(&self) -> usize {
        self.bvals.len()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[[f64; 3]] {
        &self.bvecs
    }

    pub fn n_b0(&self) -> usize {
        self.bvals.iter().filter(|&&b| b == 0.0).count()
    }

    pub fn first_b0(&self) -> Option<usize> {
        self.bvals.iter().position(|&b| b == 0.0)
    }

    /// First weighted volume whose direction is parallel (or antiparallel) to `dir`.
    pub fn find_direction(&self, dir: [f64; 3]) -> Option<usize> {
        let d = normalize3(dir);
        self.bvals
            .iter()
            .zip(&self.bvecs)
            .position(|(&b, g)| b > 0.0 && (dot3(g, &d).abs() - 1.0).abs() < 1e-6)
    }

    pub fn select(&self, indices: &[usize]) -> Result<DiffusionScheme, DtiError> {
        DiffusionScheme::new(
            indices.iter().map(|&i| self.bvals[i]).collect(),
            indices.iter().map(|&i| self.bvecs[i]).collect(),
        )
    }

    /// Parse `b gx gy gz` lines. Blank lines are skipped; anything else
    /// that is not exactly four decimals is an error.
    pub fn parse(text: &str) -> Result<Self, DtiError> {
        let mut bvals = Vec::new();
        let mut bvecs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 {
                return Err(DtiError::Parse { line: i + 1, msg: format!("expected 4 fields, found {}", fields.len()) });
            }
            let mut v = [0.0; 4];
            for (slot, f) in v.iter_mut().zip(&fields) {
                *slot = f
                    .parse::<f64>()
                    .map_err(|e| DtiError::Parse { line: i + 1, msg: format!("{f:?}: {e}") })?;
            }
            bvals.push(v[0]);
            bvecs.push([v[1], v[2], v[3]]);
        }
        Self::new(bvals, bvecs)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (b, g) in self.bvals.iter().zip(&self.bvecs) {
            s.push_str(&format!("{} {} {} {}\n", b, g[0], g[1], g[2]));
        }
        s
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DtiError> {
        let p = path.as_ref();
        let text = std::fs::read_to_string(p).map_err(|source| DtiError::Io { path: p.display().to_string(), source })?;
        Self::parse(&text)
    }
}

/// Symmetric diffusion tensor, µm²/ms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiffTensor {
    pub xx: f64,
    pub yy: f64,
    pub zz: f64,
    pub xy: f64,
    pub xz: f64,
    pub yz: f64,
}

impl DiffTensor {
    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        Self { xx: a, yy: b, zz: c, ..Default::default() }
    }

    pub fn from_matrix(m: &[[f64; 3]; 3]) -> Self {
        Self { xx: m[0][0], yy: m[1][1], zz: m[2][2], xy: m[0][1], xz: m[0][2], yz: m[1][2] }
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        [[self.xx, self.xy, self.xz], [self.xy, self.yy, self.yz], [self.xz, self.yz, self.zz]]
    }

    /// Tensor with eigenvalues `evals` and orthonormal eigenvectors `evecs` (columns).
    pub fn from_eigen(evals: [f64; 3], evecs: &[[f64; 3]; 3]) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| evecs[i][k] * evals[k] * evecs[j][k]).sum();
            }
        }
        Self::from_matrix(&m)
    }

    /// Cylindrically symmetric tensor with principal axis `dir`.
    pub fn cylinder(dir: [f64; 3], axial: f64, radial: f64) -> Self {
        let u = normalize3(dir);
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let delta = if i == j { 1.0 } else { 0.0 };
                *v = radial * delta + (axial - radial) * u[i] * u[j];
            }
        }
        Self::from_matrix(&m)
    }

    /// `R D Rᵀ`.
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> Self {
        let d = self.to_matrix();
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for k in 0..3 {
                    for l in 0..3 {
                        s += r[i][k] * d[k][l] * r[j][l];
                    }
                }
                *v = s;
            }
        }
        Self::from_matrix(&out)
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { xx: c * self.xx, yy: c * self.yy, zz: c * self.zz, xy: c * self.xy, xz: c * self.xz, yz: c * self.yz }
    }

    pub fn trace(&self) -> f64 {
        self.xx + self.yy + self.zz
    }

    pub fn frobenius(&self) -> f64 {
        (self.xx * self.xx + self.yy * self.yy + self.zz * self.zz
            + 2.0 * (self.xy * self.xy + self.xz * self.xz + self.yz * self.yz))
            .sqrt()
    }

    /// `gᵀ D g`.
    pub fn quadratic(&self, g: &[f64; 3]) -> f64 {
        self.xx * g[0] * g[0]
            + self.yy * g[1] * g[1]
            + self.zz * g[2] * g[2]
            + 2.0 * (self.xy * g[0] * g[1] + self.xz * g[0] * g[2] + self.yz * g[1] * g[2])
    }

    pub fn is_psd(&self) -> bool {
        eig_sym3(self).values[2] >= -1e-9
    }

    pub fn as_array(&self) -> [f64; 6] {
        [self.xx, self.yy, self.zz, self.xy, self.xz, self.yz]
    }
}

/// Eigenvalues in descending order and matching eigenvectors (`vectors[k]` pairs with `values[k]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenTriple {
    pub values: [f64; 3],
    pub vectors: [[f64; 3]; 3],
}

impl EigenTriple {
    /// `V diag(λ) Vᵀ`.
    pub fn reconstruct(&self) -> DiffTensor {
        let v = &self.vectors;
        let cols = [[v[0][0], v[1][0], v[2][0]], [v[0][1], v[1][1], v[2][1]], [v[0][2], v[1][2], v[2][2]]];
        DiffTensor::from_eigen(self.values, &cols)
    }
}

/// Monoexponential signal `s0 · exp(-b · gᵀDg)`.
pub fn signal(d: &DiffTensor, s0: f64, b: f64, g: &[f64; 3]) -> f64 {
    if b == 0.0 {
        return s0;
    }
    s0 * (-b * d.quadratic(g)).exp()
}

pub fn synthesize(d: &DiffTensor, s0: f64, scheme: &DiffusionScheme) -> Vec<f64> {
    scheme.bvals.iter().zip(&scheme.bvecs).map(|(&b, g)| signal(d, s0, b, g)).collect()
}

fn dot3(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm3(a: &[f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn normalize3(a: [f64; 3]) -> [f64; 3] {
    let n = norm3(&a);
    if n == 0.0 {
        return a;
    }
    [a[0] / n, a[1] / n, a[2] / n]
}

fn cross3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Eigendecomposition of a symmetric 3x3 tensor.
///
/// Eigenvalues come from the closed-form trigonometric solution of the
/// characteristic cubic; eigenvectors from cross products of the rows of
/// `D - λI`. When eigenvalues are (nearly) repeated the cross products lose
/// accuracy, so cyclic Jacobi rotations are used instead.
pub fn eig_sym3(d: &DiffTensor) -> EigenTriple {
    let scale = d.frobenius();
    if scale == 0.0 {
        return EigenTriple { values: [0.0; 3], vectors: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]] };
    }
    let m = d.to_matrix();
    let q = d.trace() / 3.0;
    let p1 = d.xy * d.xy + d.xz * d.xz + d.yz * d.yz;
    let p2 = (d.xx - q).powi(2) + (d.yy - q).powi(2) + (d.zz - q).powi(2) + 2.0 * p1;
    // p2 is the squared spread of the eigenvalues; near zero the cubic is degenerate
    if p2 / (scale * scale) < 1e-12 {
        return jacobi_eig3(&m);
    }
    let p = (p2 / 6.0).sqrt();
    let mut b = m;
    for (i, row) in b.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1]) - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let l1 = q + 2.0 * p * phi.cos();
    let l3 = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    let l2 = 3.0 * q - l1 - l3;
    let values = [l1, l2, l3];

    let gap = (l1 - l2).min(l2 - l3);
    if gap < 1e-5 * scale {
        return jacobi_eig3(&m);
    }
    let mut vectors = [[0.0; 3]; 3];
    for (k, &lam) in values.iter().enumerate() {
        let rows = [
            [m[0][0] - lam, m[0][1], m[0][2]],
            [m[1][0], m[1][1] - lam, m[1][2]],
            [m[2][0], m[2][1], m[2][2] - lam],
        ];
        let cands = [cross3(&rows[0], &rows[1]), cross3(&rows[0], &rows[2]), cross3(&rows[1], &rows[2])];
        let best = cands
            .iter()
            .max_by(|a, b| norm3(a).partial_cmp(&norm3(b)).unwrap())
            .copied()
            .unwrap();
        vectors[k] = normalize3(best);
    }
    // re-orthogonalize the last vector against the first two
    vectors[2] = normalize3(cross3(&vectors[0], &vectors[1]));
    let out = EigenTriple { values, vectors };
    let resid = frob_diff(&out.reconstruct(), d);
    if resid > 1e-9 * (1.0 + scale) {
        return jacobi_eig3(&m);
    }
    out
}

fn frob_diff(a: &DiffTensor, b: &DiffTensor) -> f64 {
    let diff = DiffTensor {
        xx: a.xx - b.xx,
        yy: a.yy - b.yy,
        zz: a.zz - b.zz,
        xy: a.xy - b.xy,
        xz: a.xz - b.xz,
        yz: a.yz - b.yz,
    };
    diff.frobenius()
}

/// Cyclic Jacobi eigenvalue iteration for a symmetric 3x3 matrix.
pub fn jacobi_eig3(m: &[[f64; 3]; 3]) -> EigenTriple {
    let mut a = *m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    for _sweep in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        let diag = a[0][0].powi(2) + a[1][1].powi(2) + a[2][2].powi(2);
        if off <= 1e-32 * diag || off == 0.0 {
            break;
        }
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in v.iter_mut() {
                let vkp = row[p];
                let vkq = row[q];
                row[p] = c * vkp - s * vkq;
                row[q] = s * vkp + c * vkq;
            }
        }
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = [a[order[0]][order[0]], a[order[1]][order[1]], a[order[2]][order[2]]];
    let vectors = [
        [v[0][order[0]], v[1][order[0]], v[2][order[0]]],
        [v[0][order[1]], v[1][order[1]], v[2][order[1]]],
        [v[0][order[2]], v[1][order[2]], v[2][order[2]]],
    ];
    EigenTriple { values, vectors }
}

/// Fractional anisotropy, clamped to [0, 1]; 0 for the zero tensor.
pub fn fa(e: &EigenTriple) -> f64 {
    let [l1, l2, l3] = e.values;
    let norm = (l1 * l1 + l2 * l2 + l3 * l3).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return 0.0;
    }
    // pairwise form: exactly zero when all eigenvalues are equal
    let num = (l1 - l2).powi(2) + (l2 - l3).powi(2) + (l3 - l1).powi(2);
    let v = (0.5 * num).sqrt() / norm;
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}

/// Mean diffusivity.
pub fn md(e: &EigenTriple) -> f64 {
    (e.values[0] + e.values[1] + e.values[2]) / 3.0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Non-positive signals are clamped to `floor_fraction · s0_ref`, where
    /// `s0_ref` is the mean b=0 signal of the voxel.
    pub floor_fraction: f64,
    /// Weighted least squares with weights `S²` instead of OLS.
    pub weighted: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { floor_fraction: 1e-6, weighted: false }
    }
}

const N_PARAMS: usize = 7;

/// Householder QR least-squares solver for an `m x 7` system.
#[derive(Debug, Clone)]
struct Qr {
    m: usize,
    // column-major Householder-reflected matrix
    a: Vec<f64>,
    tau: Vec<f64>,
    rdiag: [f64; N_PARAMS],
}

impl Qr {
    fn factor(rows: &[[f64; N_PARAMS]]) -> Self {
        let m = rows.len();
        let mut a = vec![0.0; m * N_PARAMS];
        for (i, r) in rows.iter().enumerate() {
            for j in 0..N_PARAMS {
                a[j * m + i] = r[j];
            }
        }
        let mut tau = vec![0.0; N_PARAMS];
        let mut rdiag = [0.0; N_PARAMS];
        for k in 0..N_PARAMS.min(m) {
            let col = &mut a[k * m..(k + 1) * m];
            let norm = col[k..].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                rdiag[k] = 0.0;
                continue;
            }
            let alpha = if col[k] > 0.0 { -norm } else { norm };
            col[k] -= alpha;
            let vnorm2: f64 = col[k..].iter().map(|x| x * x).sum();
            tau[k] = if vnorm2 == 0.0 { 0.0 } else { 2.0 / vnorm2 };
            rdiag[k] = alpha;
            let v: Vec<f64> = col[k..].to_vec();
            for j in k + 1..N_PARAMS {
                let cj = &mut a[j * m + k..(j + 1) * m];
                let s: f64 = v.iter().zip(cj.iter()).map(|(x, y)| x * y).sum::<f64>() * tau[k];
                for (c, x) in cj.iter_mut().zip(&v) {
                    *c -= s * x;
                }
            }
        }
        Qr { m, a, tau, rdiag }
    }

    fn rank_ok(&self) -> bool {
        let max = self.rdiag.iter().fold(0.0f64, |acc, r| acc.max(r.abs()));
        self.m >= N_PARAMS && self.rdiag.iter().all(|r| r.abs() > 1e-10 * max)
    }

    fn solve(&self, y: &[f64]) -> [f64; N_PARAMS] {
        let m = self.m;
        let mut y = y.to_vec();
        for k in 0..N_PARAMS {
            let v = &self.a[k * m + k..(k + 1) * m];
            let s: f64 = v.iter().zip(&y[k..]).map(|(a, b)| a * b).sum::<f64>() * self.tau[k];
            for (yi, vi) in y[k..].iter_mut().zip(v) {
                *yi -= s * vi;
            }
        }
        let mut x = [0.0; N_PARAMS];
        for k in (0..N_PARAMS).rev() {
            let mut s = y[k];
            for (j, xj) in x.iter().enumerate().skip(k + 1) {
                s -= self.a[j * m + k] * xj;
            }
            x[k] = s / self.rdiag[k];
        }
        x
    }
}

/// Reusable fitter for one scheme; the design matrix is factored once.
#[derive(Debug, Clone)]
pub struct TensorFitter {
    scheme: DiffusionScheme,
    design: Vec<[f64; N_PARAMS]>,
    qr: Qr,
    b0: Vec<usize>,
    options: FitOptions,
}

/// Result of fitting a single voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelFit {
    pub tensor: DiffTensor,
    pub s0: f64,
    /// Number of non-positive signals that were clamped.
    pub clamped: usize,
}

fn design_row(b: f64, g: &[f64; 3]) -> [f64; N_PARAMS] {
    [
        -b * g[0] * g[0],
        -b * g[1] * g[1],
        -b * g[2] * g[2],
        -2.0 * b * g[0] * g[1],
        -2.0 * b * g[0] * g[2],
        -2.0 * b * g[1] * g[2],
        1.0,
    ]
}

impl TensorFitter {
    pub fn new(scheme: &DiffusionScheme, options: FitOptions) -> Result<Self, DtiError> {
        let n_b0 = scheme.n_b0();
        let n_dw = scheme.n_volumes() - n_b0;
        if n_b0 < 1 {
            return Err(DtiError::Deficient("no b=0 volume".into()));
        }
        if n_dw < 6 {
            return Err(DtiError::Deficient(format!("{n_dw} diffusion-weighted volumes, need at least 6")));
        }
        let design: Vec<_> = scheme.bvals.iter().zip(&scheme.bvecs).map(|(&b, g)| design_row(b, g)).collect();
        let qr = Qr::factor(&design);
        if !qr.rank_ok() {
            return Err(DtiError::Deficient(
                "gradient directions do not span the six tensor components (need 6 non-collinear, non-coplanar-degenerate directions)"
                    .into(),
            ));
        }
        let b0 = (0..scheme.n_volumes()).filter(|&i| scheme.bvals[i] == 0.0).collect();
        Ok(Self { scheme: scheme.clone(), design, qr, b0, options })
    }

    pub fn scheme(&self) -> &DiffusionScheme {
        &self.scheme
    }

    pub fn fit(&self, signals: &[f64]) -> Result<VoxelFit, DtiError> {
        let m = self.scheme.n_volumes();
        if signals.len() != m {
            return Err(DtiError::SignalCount { expected: m, got: signals.len() });
        }
        let s0_ref = self.b0.iter().map(|&i| signals[i]).sum::<f64>() / self.b0.len() as f64;
        let floor = if s0_ref > 0.0 { self.options.floor_fraction * s0_ref } else { self.options.floor_fraction };
        let mut clamped = 0;
        let logs: Vec<f64> = signals
            .iter()
            .map(|&s| {
                if s > 0.0 && s.is_finite() {
                    s.ln()
                } else {
                    clamped += 1;
                    floor.ln()
                }
            })
            .collect();
        let x = if self.options.weighted {
            let w: Vec<f64> = logs.iter().map(|l| l.exp()).collect();
            let rows: Vec<[f64; N_PARAMS]> =
                self.design.iter().zip(&w).map(|(r, &wi)| r.map(|v| v * wi)).collect();
            let y: Vec<f64> = logs.iter().zip(&w).map(|(l, wi)| l * wi).collect();
            let qr = Qr::factor(&rows);
            if qr.rank_ok() {
                qr.solve(&y)
            } else {
                self.qr.solve(&logs)
            }
        } else {
            self.qr.solve(&logs)
        };
        let tensor = DiffTensor { xx: x[0], yy: x[1], zz: x[2], xy: x[3], xz: x[4], yz: x[5] };
        Ok(VoxelFit { tensor, s0: x[6].exp(), clamped })
    }
}

/// One-off fit of a single voxel.
pub fn fit_tensor(signals: &[f64], scheme: &DiffusionScheme) -> Result<(DiffTensor, f64), DtiError> {
    let f = TensorFitter::new(scheme, FitOptions::default())?.fit(signals)?;
    Ok((f.tensor, f.s0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FitSummary {
    pub fitted_voxels: usize,
    /// Total number of clamped non-positive signals.
    pub clamped_signals: usize,
    /// Voxels with at least one clamped signal.
    pub flagged_voxels: usize,
}

#[derive(Debug, Clone)]
pub struct VolumeFit {
    pub fa: Volume,
    pub md: Volume,
    /// Per-voxel tensors in volume layout order; zero outside the mask.
    pub tensors: Vec<DiffTensor>,
    pub summary: FitSummary,
}

/// Fit every masked voxel of a multi-channel DWI volume.
pub fn fit_volume(dwi: &Volume, mask: &Mask, scheme: &DiffusionScheme, options: FitOptions) -> Result<VolumeFit, DtiError> {
    crate::volume::check_dims(dwi.dims(), mask.dims())?;
    if dwi.channels() != scheme.n_volumes() {
        return Err(DtiError::SignalCount { expected: scheme.n_volumes(), got: dwi.channels() });
    }
    let fitter = TensorFitter::new(scheme, options)?;
    let n = dwi.n_voxels();
    let mut fa_map = vec![0.0f32; n];
    let mut md_map = vec![0.0f32; n];
    let mut tensors = vec![DiffTensor::default(); n];
    let mut summary = FitSummary::default();
    let mut signals = vec![0.0f64; scheme.n_volumes()];
    for (i, &inside) in mask.bits().iter().enumerate() {
        if !inside {
            continue;
        }
        for (c, s) in signals.iter_mut().enumerate() {
            *s = dwi.data()[c * n + i] as f64;
        }
        let fit = fitter.fit(&signals)?;
        let eig = eig_sym3(&fit.tensor);
        fa_map[i] = fa(&eig) as f32;
        md_map[i] = md(&eig) as f32;
        tensors[i] = fit.tensor;
        summary.fitted_voxels += 1;
        summary.clamped_signals += fit.clamped;
        summary.flagged_voxels += (fit.clamped > 0) as usize;
    }
    if summary.clamped_signals > 0 {
        log::warn!(
            "clamped {} non-positive signals in {} voxels",
            summary.clamped_signals,
            summary.flagged_voxels
        );
    }
    Ok(VolumeFit {
        fa: Volume::new(1, dwi.dims(), dwi.voxel_size(), fa_map)?,
        md: Volume::new(1, dwi.dims(), dwi.voxel_size(), md_map)?,
        tensors,
        summary,
    })
}

/// Unit vectors spread over the sphere by the golden-angle spiral.
pub fn fibonacci_directions(n: usize) -> Vec<[f64; 3]> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (i as f64 + 0.5) * 2.0 / n as f64;
            let r = (1.0 - z * z).sqrt();
            let t = golden * i as f64;
            normalize3([r * t.cos(), r * t.sin(), z])
        })
        .collect()
}
