use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::array::{Mat, NdArray, Param, Real, ShapeError};

/// Columns per im2col tile, sized so a tile stays cache resident.
const TILE_FLOATS: usize = 1 << 17;

/// Unfold x-slabs `x0..x1` of one sample `[c, x, y, z]` into a
/// `[c·k³, (x1−x0)·y·z]` patch matrix for a stride-1 zero-padded ("same")
/// convolution with odd kernel size `k`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(x: &[T], c: usize, dims: [usize; 3], k: usize, x0: usize, x1: usize, cols: &mut [T]) {
    let [nx, ny, nz] = dims;
    let p = nx * ny * nz;
    let q = (x1 - x0) * ny * nz;
    let pad = (k / 2) as isize;
    let k3 = k * k * k;
    cols[..c * k3 * q].iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..c {
        let src = &x[ci * p..(ci + 1) * p];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = ci * k3 + (kx * k + ky) * k + kz;
                    let dst = &mut cols[row * q..(row + 1) * q];
                    let (ox, oy, oz) = (kx as isize - pad, ky as isize - pad, kz as isize - pad);
                    let z0 = (-oz).max(0) as usize;
                    let z1 = (nz as isize - oz).min(nz as isize).max(0) as usize;
                    if z0 >= z1 {
                        continue;
                    }
                    for ix in x0..x1 {
                        let sx = ix as isize + ox;
                        if sx < 0 || sx >= nx as isize {
                            continue;
                        }
                        for iy in 0..ny {
                            let sy = iy as isize + oy;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let d = ((ix - x0) * ny + iy) * nz;
                            let s = ((sx as usize) * ny + sy as usize) * nz;
                            let so = (z0 as isize + oz) as usize;
                            dst[d + z0..d + z1].copy_from_slice(&src[s + so..s + so + (z1 - z0)]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a patch tile back onto `[c, x, y, z]`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], c: usize, dims: [usize; 3], k: usize, x0: usize, x1: usize, x: &mut [T]) {
    let [nx, ny, nz] = dims;
    let p = nx * ny * nz;
    let q = (x1 - x0) * ny * nz;
    let pad = (k / 2) as isize;
    let k3 = k * k * k;
    for ci in 0..c {
        let dst = &mut x[ci * p..(ci + 1) * p];
        for kx in 0..k {
            for ky in 0..k {
                for kz in 0..k {
                    let row = ci * k3 + (kx * k + ky) * k + kz;
                    let src = &cols[row * q..(row + 1) * q];
                    let (ox, oy, oz) = (kx as isize - pad, ky as isize - pad, kz as isize - pad);
                    let z0 = (-oz).max(0) as usize;
                    let z1 = (nz as isize - oz).min(nz as isize).max(0) as usize;
                    if z0 >= z1 {
                        continue;
                    }
                    for ix in x0..x1 {
                        let sx = ix as isize + ox;
                        if sx < 0 || sx >= nx as isize {
                            continue;
                        }
                        for iy in 0..ny {
                            let sy = iy as isize + oy;
                            if sy < 0 || sy >= ny as isize {
                                continue;
                            }
                            let d = ((ix - x0) * ny + iy) * nz;
                            let s = ((sx as usize) * ny + sy as usize) * nz;
                            let so = (z0 as isize + oz) as usize;
                            for (o, &v) in dst[s + so..s + so + (z1 - z0)].iter_mut().zip(&src[d + z0..d + z1]) {
                                *o += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Split the x axis into slabs whose patch tile holds about `TILE_FLOATS`.
fn x_tiles(ck: usize, dims: [usize; 3]) -> Vec<(usize, usize)> {
    let slab = dims[1] * dims[2];
    let per = (TILE_FLOATS / (ck * slab).max(1)).max(1);
    (0..dims[0]).step_by(per).map(|x0| (x0, (x0 + per).min(dims[0]))).collect()
}

fn conv_dims<T: Real>(x: &NdArray<T>, w: &NdArray<T>, b: &NdArray<T>) -> Result<([usize; 5], usize, usize), ShapeError> {
    let [n, c, nx, ny, nz] = x.dims5("conv3d")?;
    let ws = w.shape();
    if ws.len() != 5 || ws[2] != ws[3] || ws[3] != ws[4] || ws[2] % 2 == 0 {
        return Err(ShapeError::Mismatch { op: "conv3d weight", expected: vec![0, c, 3, 3, 3], got: ws.to_vec() });
    }
    if ws[1] != c {
        return Err(ShapeError::Channels { op: "conv3d", expected: ws[1], got: c });
    }
    if b.shape() != [ws[0]] {
        return Err(ShapeError::Mismatch { op: "conv3d bias", expected: vec![ws[0]], got: b.shape().to_vec() });
    }
    Ok(([n, c, nx, ny, nz], ws[0], ws[2]))
}

/// Stride-1 "same" 3D convolution. `w` is `[out, in, k, k, k]` with odd `k`
/// and zero padding `k/2`; `b` is `[out]`.
pub fn conv3d<T: Real>(x: &NdArray<T>, w: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>, ShapeError> {
    let ([n, c, nx, ny, nz], out_c, k) = conv_dims(x, w, b)?;
    let dims = [nx, ny, nz];
    let p = nx * ny * nz;
    let ck = c * k * k * k;
    let mut y = NdArray::zeros(&[n, out_c, nx, ny, nz]);
    let tiles = x_tiles(ck, dims);
    let mut cols = if k == 1 { Vec::new() } else { vec![T::zero(); ck * (tiles[0].1 - tiles[0].0) * ny * nz] };
    let wm = Mat { data: w.data(), rs: ck as isize, cs: 1 };
    for s in 0..n {
        let xs = &x.data()[s * c * p..(s + 1) * c * p];
        let ys = &mut y.data_mut()[s * out_c * p..(s + 1) * out_c * p];
        for (o, row) in ys.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = b.data()[o]);
        }
        if k == 1 {
            T::gemm(out_c, ck, p, w.data(), false, xs, false, T::one(), ys);
            continue;
        }
        for &(x0, x1) in &tiles {
            let q = (x1 - x0) * ny * nz;
            im2col(xs, c, dims, k, x0, x1, &mut cols);
            let bm = Mat { data: &cols[..ck * q], rs: q as isize, cs: 1 };
            T::gemm_strided(out_c, ck, q, wm, bm, T::one(), &mut ys[x0 * ny * nz..], p);
        }
    }
    Ok(y)
}

/// Gradients of [`conv3d`] with respect to input, weight and bias.
pub fn conv3d_backward<T: Real>(
    dy: &NdArray<T>,
    x: &NdArray<T>,
    w: &NdArray<T>,
) -> Result<(NdArray<T>, NdArray<T>, NdArray<T>), ShapeError> {
    let bias_shape = NdArray::zeros(&[w.shape()[0]]);
    let ([n, c, nx, ny, nz], out_c, k) = conv_dims(x, w, &bias_shape)?;
    if dy.shape() != [n, out_c, nx, ny, nz] {
        return Err(ShapeError::Mismatch { op: "conv3d_backward", expected: vec![n, out_c, nx, ny, nz], got: dy.shape().to_vec() });
    }
    let dims = [nx, ny, nz];
    let p = nx * ny * nz;
    let ck = c * k * k * k;
    let mut dx = NdArray::zeros(x.shape());
    let mut dw = NdArray::zeros(w.shape());
    let mut db = NdArray::zeros(&[out_c]);
    let tiles = x_tiles(ck, dims);
    let tile_len = ck * (tiles[0].1 - tiles[0].0) * ny * nz;
    let (mut cols, mut dcols) = if k == 1 { (Vec::new(), Vec::new()) } else { (vec![T::zero(); tile_len], vec![T::zero(); tile_len]) };
    // Wᵀ as a [ck, out] view
    let wt = Mat { data: w.data(), rs: 1, cs: ck as isize };
    for s in 0..n {
        let xs = &x.data()[s * c * p..(s + 1) * c * p];
        let dys = &dy.data()[s * out_c * p..(s + 1) * out_c * p];
        for (o, row) in dys.chunks(p).enumerate() {
            db.data_mut()[o] += row.iter().copied().sum::<T>();
        }
        let dxs = &mut dx.data_mut()[s * c * p..(s + 1) * c * p];
        if k == 1 {
            // dW += dY · Xᵀ, dX = Wᵀ · dY
            T::gemm(out_c, p, ck, dys, false, xs, true, T::one(), dw.data_mut());
            T::gemm_strided(ck, out_c, p, wt, Mat { data: dys, rs: p as isize, cs: 1 }, T::zero(), dxs, p);
            continue;
        }
        for &(x0, x1) in &tiles {
            let q = (x1 - x0) * ny * nz;
            let dyt = Mat { data: &dys[x0 * ny * nz..], rs: p as isize, cs: 1 };
            im2col(xs, c, dims, k, x0, x1, &mut cols);
            // dW[o, ck] += dY[o, q] · colsᵀ[q, ck]
            let colst = Mat { data: &cols[..ck * q], rs: 1, cs: q as isize };
            T::gemm_strided(out_c, q, ck, dyt, colst, T::one(), dw.data_mut(), ck);
            // dcols[ck, q] = Wᵀ[ck, o] · dY[o, q]
            T::gemm_strided(ck, out_c, q, wt, dyt, T::zero(), &mut dcols[..ck * q], q);
            col2im(&dcols, c, dims, k, x0, x1, dxs);
        }
    }
    Ok((dx, dw, db))
}

/// Transposed convolution with a `2³` kernel and stride 2. Each input voxel
/// paints its own disjoint `2³` output block. `w` is `[in, out, 2, 2, 2]`.
pub fn conv_transpose3d<T: Real>(x: &NdArray<T>, w: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>, ShapeError> {
    let [n, c, nx, ny, nz] = x.dims5("conv_transpose3d")?;
    let ws = w.shape();
    if ws.len() != 5 || ws[0] != c || ws[2..] != [2, 2, 2] {
        return Err(ShapeError::Mismatch { op: "conv_transpose3d weight", expected: vec![c, 0, 2, 2, 2], got: ws.to_vec() });
    }
    let out_c = ws[1];
    if b.shape() != [out_c] {
        return Err(ShapeError::Mismatch { op: "conv_transpose3d bias", expected: vec![out_c], got: b.shape().to_vec() });
    }
    let p = nx * ny * nz;
    let (mx, my, mz) = (2 * nx, 2 * ny, 2 * nz);
    let q = mx * my * mz;
    let mut y = NdArray::zeros(&[n, out_c, mx, my, mz]);
    let mut z = vec![T::zero(); out_c * 8 * p];
    for s in 0..n {
        let xs = &x.data()[s * c * p..(s + 1) * c * p];
        // Z[o·8, p] = Wᵀ[o·8, c] · X[c, p]
        T::gemm(out_c * 8, c, p, w.data(), true, xs, false, T::zero(), &mut z);
        let ys = &mut y.data_mut()[s * out_c * q..(s + 1) * out_c * q];
        for o in 0..out_c {
            let bias = b.data()[o];
            for off in 0..8 {
                let (a, bb, cc) = (off >> 2, (off >> 1) & 1, off & 1);
                let zr = &z[(o * 8 + off) * p..(o * 8 + off + 1) * p];
                for ix in 0..nx {
                    for iy in 0..ny {
                        let src = (ix * ny + iy) * nz;
                        let dst = o * q + ((2 * ix + a) * my + 2 * iy + bb) * mz + cc;
                        for iz in 0..nz {
                            ys[dst + 2 * iz] = zr[src + iz] + bias;
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}

pub fn conv_transpose3d_backward<T: Real>(
    dy: &NdArray<T>,
    x: &NdArray<T>,
    w: &NdArray<T>,
) -> Result<(NdArray<T>, NdArray<T>, NdArray<T>), ShapeError> {
    let [n, c, nx, ny, nz] = x.dims5("conv_transpose3d_backward")?;
    let out_c = w.shape()[1];
    let (mx, my, mz) = (2 * nx, 2 * ny, 2 * nz);
    if dy.shape() != [n, out_c, mx, my, mz] {
        return Err(ShapeError::Mismatch {
            op: "conv_transpose3d_backward",
            expected: vec![n, out_c, mx, my, mz],
            got: dy.shape().to_vec(),
        });
    }
    let p = nx * ny * nz;
    let q = mx * my * mz;
    let mut dx = NdArray::zeros(x.shape());
    let mut dw = NdArray::zeros(w.shape());
    let mut db = NdArray::zeros(&[out_c]);
    let mut dz = vec![T::zero(); out_c * 8 * p];
    for s in 0..n {
        let dys = &dy.data()[s * out_c * q..(s + 1) * out_c * q];
        for o in 0..out_c {
            db.data_mut()[o] += dys[o * q..(o + 1) * q].iter().copied().sum::<T>();
            for off in 0..8 {
                let (a, bb, cc) = (off >> 2, (off >> 1) & 1, off & 1);
                let zr = &mut dz[(o * 8 + off) * p..(o * 8 + off + 1) * p];
                for ix in 0..nx {
                    for iy in 0..ny {
                        let dst = (ix * ny + iy) * nz;
                        let src = o * q + ((2 * ix + a) * my + 2 * iy + bb) * mz + cc;
                        for iz in 0..nz {
                            zr[dst + iz] = dys[src + 2 * iz];
                        }
                    }
                }
            }
        }
        let xs = &x.data()[s * c * p..(s + 1) * c * p];
        // dX[c, p] = W[c, o·8] · dZ[o·8, p]
        T::gemm(c, out_c * 8, p, w.data(), false, &dz, false, T::zero(), &mut dx.data_mut()[s * c * p..(s + 1) * c * p]);
        // dW[c, o·8] += X[c, p] · dZᵀ[p, o·8]
        T::gemm(c, p, out_c * 8, xs, false, &dz, true, T::one(), dw.data_mut());
    }
    Ok((dx, dw, db))
}

fn he_normal<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> NdArray<T> {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    NdArray::from_fn(shape, |_| T::of(normal.sample(rng)))
}

/// Convolution layer with He-initialized weights and zero bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv3d<T> {
    pub fn new(name: &str, in_c: usize, out_c: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = in_c * kernel * kernel * kernel;
        Self {
            weight: Param::new(format!("{name}.weight"), he_normal(rng, &[out_c, in_c, kernel, kernel, kernel], fan_in)),
            bias: Param::new(format!("{name}.bias"), NdArray::zeros(&[out_c])),
        }
    }

    pub fn forward(&self, x: &NdArray<T>) -> Result<NdArray<T>, ShapeError> {
        conv3d(x, &self.weight.value, &self.bias.value)
    }

    /// Accumulate parameter gradients; returns the input gradient.
    pub fn backward(&mut self, x: &NdArray<T>, dy: &NdArray<T>) -> Result<NdArray<T>, ShapeError> {
        let (dx, dw, db) = conv3d_backward(dy, x, &self.weight.value)?;
        self.weight.grad.add_assign(&dw);
        self.bias.grad.add_assign(&db);
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}

/// `2³`, stride-2 transposed convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTranspose3d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> ConvTranspose3d<T> {
    pub fn new(name: &str, in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), he_normal(rng, &[in_c, out_c, 2, 2, 2], in_c)),
            bias: Param::new(format!("{name}.bias"), NdArray::zeros(&[out_c])),
        }
    }

    pub fn forward(&self, x: &NdArray<T>) -> Result<NdArray<T>, ShapeError> {
        conv_transpose3d(x, &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, x: &NdArray<T>, dy: &NdArray<T>) -> Result<NdArray<T>, ShapeError> {
        let (dx, dw, db) = conv_transpose3d_backward(dy, x, &self.weight.value)?;
        self.weight.grad.add_assign(&dw);
        self.bias.grad.add_assign(&db);
        Ok(dx)
    }

    pub fn params_mut(&mut self) -> [&mut Param<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Param<T>; 2] {
        [&self.weight, &self.bias]
    }
}
