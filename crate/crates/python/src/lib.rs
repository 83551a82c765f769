//! Python bindings: volumes, masks, tensor fitting, phantoms, the DU-Net,
//! training, MC-dropout inference and evaluation.

use std::path::PathBuf;

use mcdqmri_core::dti::{self, DiffTensor, DiffusionScheme, FitOptions};
use mcdqmri_core::dunet::{build_dunet, build_unet, DUNetConfig, Network};
use mcdqmri_core::eval;
use mcdqmri_core::mcdropout::{self, InferOptions};
use mcdqmri_core::nifti;
use mcdqmri_core::phantom::{self, ArtifactSpec, PhantomSpec, Polarity};
use mcdqmri_core::train::{self, TrainConfig};
use mcdqmri_core::volume::{self, BlockSpec};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

/// Multi-channel 3D float volume, channel-major with z fastest.
#[pyclass(name = "Volume", module = "mcdqmri", skip_from_py_object)]
#[derive(Clone)]
pub struct PyVolume {
    inner: volume::Volume,
}

#[pymethods]
impl PyVolume {
    #[new]
    #[pyo3(signature = (channels, dims, data, voxel_size = (1.25, 1.25, 1.25)))]
    fn new(channels: usize, dims: (usize, usize, usize), data: Vec<f32>, voxel_size: (f32, f32, f32)) -> PyResult<Self> {
        let inner = volume::Volume::new(channels, [dims.0, dims.1, dims.2], [voxel_size.0, voxel_size.1, voxel_size.2], data).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims();
        (d[0], d[1], d[2])
    }

    #[getter]
    fn voxel_size(&self) -> (f32, f32, f32) {
        let v = self.inner.voxel_size();
        (v[0], v[1], v[2])
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn get(&self, c: usize, x: usize, y: usize, z: usize) -> PyResult<f32> {
        let d = self.inner.dims();
        if c >= self.inner.channels() || x >= d[0] || y >= d[1] || z >= d[2] {
            return Err(value_err("index out of range"));
        }
        Ok(self.inner.get(c, x, y, z))
    }

    fn channel(&self, c: usize) -> PyResult<PyVolume> {
        Ok(PyVolume { inner: self.inner.extract_channel(c).map_err(value_err)? })
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }

    fn __eq__(&self, other: &PyVolume) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Volume(channels={}, dims={:?})", self.inner.channels(), self.inner.dims())
    }
}

/// Boolean voxel mask.
#[pyclass(name = "Mask", module = "mcdqmri", skip_from_py_object)]
#[derive(Clone)]
pub struct PyMask {
    inner: volume::Mask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(dims: (usize, usize, usize), bits: Vec<bool>) -> PyResult<Self> {
        Ok(Self { inner: volume::Mask::new([dims.0, dims.1, dims.2], bits).map_err(value_err)? })
    }

    #[staticmethod]
    fn filled(dims: (usize, usize, usize), value: bool) -> Self {
        Self { inner: volume::Mask::filled([dims.0, dims.1, dims.2], value) }
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims();
        (d[0], d[1], d[2])
    }

    fn count(&self) -> usize {
        self.inner.count()
    }

    fn bits(&self) -> Vec<bool> {
        self.inner.bits().to_vec()
    }

    fn __eq__(&self, other: &PyMask) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!("Mask(dims={:?}, count={})", self.inner.dims(), self.inner.count())
    }
}

#[pyfunction]
fn read_volume(path: PathBuf) -> PyResult<PyVolume> {
    Ok(PyVolume { inner: nifti::read_volume(path).map_err(io_err)? })
}

#[pyfunction]
fn write_volume(path: PathBuf, vol: &PyVolume) -> PyResult<usize> {
    nifti::write_volume(path, &vol.inner).map_err(io_err)
}

#[pyfunction]
fn read_mask(path: PathBuf) -> PyResult<PyMask> {
    Ok(PyMask { inner: nifti::read_mask(path).map_err(io_err)? })
}

#[pyfunction]
#[pyo3(signature = (path, mask, voxel_size = (1.25, 1.25, 1.25)))]
fn write_mask(path: PathBuf, mask: &PyMask, voxel_size: (f32, f32, f32)) -> PyResult<usize> {
    nifti::write_mask(path, &mask.inner, [voxel_size.0, voxel_size.1, voxel_size.2]).map_err(io_err)
}

type Tensor6 = (f64, f64, f64, f64, f64, f64);

fn tensor_from(t: Tensor6) -> DiffTensor {
    DiffTensor::from_matrix(&[[t.0, t.3, t.4], [t.3, t.1, t.5], [t.4, t.5, t.2]])
}

fn tensor_to(d: &DiffTensor) -> Tensor6 {
    let m = d.to_matrix();
    (m[0][0], m[1][1], m[2][2], m[0][1], m[0][2], m[1][2])
}

fn scheme_from(bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> PyResult<DiffusionScheme> {
    DiffusionScheme::new(bvals, bvecs).map_err(value_err)
}

/// Signals `s0·exp(−b gᵀDg)` for tensor (Dxx, Dyy, Dzz, Dxy, Dxz, Dyz).
#[pyfunction]
fn synthesize(tensor: Tensor6, s0: f64, bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> PyResult<Vec<f64>> {
    Ok(dti::synthesize(&tensor_from(tensor), s0, &scheme_from(bvals, bvecs)?))
}

/// Least-squares tensor fit; returns (tensor, s0).
#[pyfunction]
fn fit_tensor(signals: Vec<f64>, bvals: Vec<f64>, bvecs: Vec<[f64; 3]>) -> PyResult<(Tensor6, f64)> {
    let (d, s0) = dti::fit_tensor(&signals, &scheme_from(bvals, bvecs)?).map_err(value_err)?;
    Ok((tensor_to(&d), s0))
}

/// (FA, MD) of a tensor.
#[pyfunction]
fn fa_md(tensor: Tensor6) -> (f64, f64) {
    let e = dti::eig_sym3(&tensor_from(tensor));
    (dti::fa(&e), dti::md(&e))
}

/// Fit every masked voxel of a DWI volume; returns (fa, md) volumes.
#[pyfunction]
#[pyo3(signature = (dwi, mask, bvals, bvecs, weighted = false))]
fn fit_volume(dwi: &PyVolume, mask: &PyMask, bvals: Vec<f64>, bvecs: Vec<[f64; 3]>, weighted: bool) -> PyResult<(PyVolume, PyVolume)> {
    let opts = FitOptions { weighted, ..FitOptions::default() };
    let fit = dti::fit_volume(&dwi.inner, &mask.inner, &scheme_from(bvals, bvecs)?, opts).map_err(value_err)?;
    Ok((PyVolume { inner: fit.fa }, PyVolume { inner: fit.md }))
}

/// Synthetic phantom with ground-truth FA/MD maps.
#[pyclass(name = "Phantom", module = "mcdqmri", skip_from_py_object)]
#[derive(Clone)]
pub struct PyPhantom {
    inner: phantom::PhantomDataset,
}

#[pymethods]
impl PyPhantom {
    #[new]
    #[pyo3(signature = (seed = 0, size = 32, noise_sigma = None))]
    fn new(seed: u64, size: usize, noise_sigma: Option<f64>) -> PyResult<Self> {
        let mut spec = PhantomSpec { nx: size, ny: size, nz: size, ..PhantomSpec::default() }.with_seed(seed);
        if let Some(s) = noise_sigma {
            spec.noise_sigma = s;
        }
        Ok(Self { inner: phantom::generate_phantom(&spec).map_err(value_err)? })
    }

    #[staticmethod]
    fn read(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: phantom::PhantomDataset::read_dir(dir).map_err(io_err)? })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.write_dir(dir).map_err(io_err)
    }

    #[getter]
    fn full_dwi(&self) -> PyVolume {
        PyVolume { inner: self.inner.full_dwi.clone() }
    }

    #[getter]
    fn input_dwi(&self) -> PyVolume {
        PyVolume { inner: self.inner.input_dwi.clone() }
    }

    #[getter]
    fn gt_fa(&self) -> PyVolume {
        PyVolume { inner: self.inner.gt_fa.clone() }
    }

    #[getter]
    fn gt_md(&self) -> PyVolume {
        PyVolume { inner: self.inner.gt_md.clone() }
    }

    #[getter]
    fn mask(&self) -> PyMask {
        PyMask { inner: self.inner.mask.clone() }
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.labels.labels().to_vec()
    }

    #[getter]
    fn bvals(&self) -> Vec<f64> {
        self.inner.scheme.bvals().to_vec()
    }

    #[getter]
    fn bvecs(&self) -> Vec<[f64; 3]> {
        self.inner.scheme.bvecs().to_vec()
    }

    /// Copy of the input volumes with the letter "M" burned in; returns
    /// (input, artifact mask).
    #[pyo3(signature = (polarity = "bright", raster_scale = 2, slices = 4))]
    fn with_artifact(&self, polarity: &str, raster_scale: usize, slices: usize) -> PyResult<(PyVolume, PyMask)> {
        let polarity: Polarity = polarity.parse().map_err(value_err)?;
        let spec = ArtifactSpec::centered(self.inner.input_dwi.dims(), polarity, raster_scale, slices);
        let (v, m) = phantom::inject_letter_artifact(&self.inner.input_dwi, &spec).map_err(value_err)?;
        Ok((PyVolume { inner: v }, PyMask { inner: m }))
    }

    fn __repr__(&self) -> String {
        format!("Phantom(dims={:?}, volumes={})", self.inner.full_dwi.dims(), self.inner.full_dwi.channels())
    }
}

/// DU-Net (or plain U-Net) with f32 weights.
#[pyclass(name = "Network", module = "mcdqmri", skip_from_py_object)]
#[derive(Clone)]
pub struct PyNetwork {
    inner: Network<f32>,
}

fn net_config(depth: usize, base_kernels: usize, block_size: usize, dropout_rate: f64) -> DUNetConfig {
    DUNetConfig { depth, base_kernels, block_size, dropout_rate, ..DUNetConfig::desk() }
}

#[pymethods]
impl PyNetwork {
    #[staticmethod]
    #[pyo3(signature = (seed = 0, depth = 3, base_kernels = 8, block_size = 16, dropout_rate = 0.2))]
    fn dunet(seed: u64, depth: usize, base_kernels: usize, block_size: usize, dropout_rate: f64) -> PyResult<Self> {
        Ok(Self { inner: build_dunet(net_config(depth, base_kernels, block_size, dropout_rate), seed).map_err(value_err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (seed = 0, depth = 3, base_kernels = 8, block_size = 16))]
    fn unet(seed: u64, depth: usize, base_kernels: usize, block_size: usize) -> PyResult<Self> {
        Ok(Self { inner: build_unet(net_config(depth, base_kernels, block_size, 0.0), seed).map_err(value_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Network::load(path).map_err(io_err)? })
    }

    #[staticmethod]
    fn from_bytes(data: Vec<u8>) -> PyResult<Self> {
        Ok(Self { inner: Network::from_bytes(&data).map_err(value_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(path).map_err(io_err)
    }

    fn to_bytes(&self) -> std::borrow::Cow<'static, [u8]> {
        self.inner.to_bytes().into()
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn dropout_rate(&self) -> f64 {
        self.inner.config().dropout_rate
    }

    #[getter]
    fn block_size(&self) -> usize {
        self.inner.config().block_size
    }

    #[getter]
    fn dropout_sites(&self) -> usize {
        self.inner.n_dropout_sites()
    }

    fn set_dropout_rate(&mut self, p: f64) -> PyResult<()> {
        self.inner.set_dropout_rate(p).map_err(value_err)
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!("Network(depth={}, base_kernels={}, block_size={}, dropout_rate={})", c.depth, c.base_kernels, c.block_size, c.dropout_rate)
    }
}

/// Train on phantoms; returns (best, last, history) where history rows are
/// (epoch, train_loss, val_loss).
#[pyfunction]
#[pyo3(signature = (net, phantoms, epochs = 50, lr = 1e-3, seed = 0, patience = 20, blocks_per_epoch = 0))]
fn train_network(
    py: Python<'_>,
    net: &PyNetwork,
    phantoms: Vec<PyRef<'_, PyPhantom>>,
    epochs: usize,
    lr: f64,
    seed: u64,
    patience: usize,
    blocks_per_epoch: usize,
) -> PyResult<(PyNetwork, PyNetwork, Vec<(usize, f64, f64)>)> {
    let data: Vec<phantom::PhantomDataset> = phantoms.iter().map(|p| p.inner.clone()).collect();
    let cfg = TrainConfig { epochs, lr, seed, patience, blocks_per_epoch, ..TrainConfig::default() };
    let init = net.inner.clone();
    let out = py.detach(move || train::train(init, &data, &cfg)).map_err(value_err)?;
    let hist = out.history.epochs.iter().map(|r| (r.epoch, r.train_loss, r.val_loss)).collect();
    Ok((PyNetwork { inner: out.best }, PyNetwork { inner: out.last }, hist))
}

/// MC-dropout inference over a whole volume. Returns (mean, cov) where mean
/// has channels (FA, MD) with FA clamped to [0, 1] and cov is None for one pass.
#[pyfunction]
#[pyo3(signature = (net, dwi, mask, n_passes = 100, seed = 0, stride = 0))]
fn infer(py: Python<'_>, net: &PyNetwork, dwi: &PyVolume, mask: &PyMask, n_passes: usize, seed: u64, stride: usize) -> PyResult<(PyVolume, Option<PyVolume>)> {
    let b = net.inner.config().block_size;
    let spec = BlockSpec::cubic(b, if stride == 0 { (b / 2).max(1) } else { stride }).map_err(value_err)?;
    let opts = InferOptions { seed, ..InferOptions::default() };
    let (res, _) = py
        .detach(|| mcdropout::infer_volume(&net.inner, &dwi.inner, &mask.inner, &spec, n_passes, opts))
        .map_err(value_err)?;
    let fa = mcdropout::clamp_fa(&res.mean.extract_channel(0).map_err(value_err)?);
    let md = res.mean.extract_channel(1).map_err(value_err)?;
    let mean = volume::Volume::stack(&[&fa, &md]).map_err(value_err)?;
    Ok((PyVolume { inner: mean }, res.uncertainty.map(|u| PyVolume { inner: u.cov })))
}

/// Mean absolute error of the first channel over the mask.
#[pyfunction]
fn mae(pred: &PyVolume, truth: &PyVolume, mask: &PyMask) -> PyResult<f64> {
    eval::mae(&pred.inner, &truth.inner, &mask.inner).map_err(value_err)
}

/// Mean CoV inside the artifact mask over the mean outside it, within the parenchyma.
#[pyfunction]
fn artifact_contrast(cov: &PyVolume, artifact: &PyMask, parenchyma: &PyMask) -> PyResult<f64> {
    eval::artifact_contrast(&cov.inner, &artifact.inner, &parenchyma.inner).map_err(value_err)
}

/// Run the command-line interface with `args` (without the program name).
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("mcdqmri".to_string()).chain(args).collect();
    py.detach(move || mcdqmri_core::cli::run(argv))
}

#[pymodule]
fn mcdqmri(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyVolume>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyPhantom>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(read_volume, m)?)?;
    m.add_function(wrap_pyfunction!(write_volume, m)?)?;
    m.add_function(wrap_pyfunction!(read_mask, m)?)?;
    m.add_function(wrap_pyfunction!(write_mask, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(fit_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(fa_md, m)?)?;
    m.add_function(wrap_pyfunction!(fit_volume, m)?)?;
    m.add_function(wrap_pyfunction!(train_network, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(artifact_contrast, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
