use super::array::{NdArray, Real, ShapeError};

/// 2³ max pooling with stride 2. Returns the pooled array and, for each
/// output element, the flat input index of its maximum. Ties resolve to the
/// first index in (x, y, z) scan order.
pub fn maxpool3d<T: Real>(x: &NdArray<T>) -> Result<(NdArray<T>, Vec<usize>), ShapeError> {
    let [n, c, nx, ny, nz] = x.dims5("maxpool3d")?;
    for d in [nx, ny, nz] {
        if d % 2 != 0 {
            return Err(ShapeError::OddDim { op: "maxpool3d", dim: d });
        }
    }
    let (mx, my, mz) = (nx / 2, ny / 2, nz / 2);
    let mut y = NdArray::zeros(&[n, c, mx, my, mz]);
    let mut arg = vec![0usize; n * c * mx * my * mz];
    let xd = x.data();
    let yd = y.data_mut();
    let mut o = 0;
    for nc in 0..n * c {
        let base = nc * nx * ny * nz;
        for i in 0..mx {
            for j in 0..my {
                for l in 0..mz {
                    let mut best = base + ((2 * i) * ny + 2 * j) * nz + 2 * l;
                    let mut bv = xd[best];
                    for a in 0..2 {
                        for b in 0..2 {
                            for cc in 0..2 {
                                let idx = base + ((2 * i + a) * ny + 2 * j + b) * nz + 2 * l + cc;
                                if xd[idx] > bv {
                                    bv = xd[idx];
                                    best = idx;
                                }
                            }
                        }
                    }
                    yd[o] = bv;
                    arg[o] = best;
                    o += 1;
                }
            }
        }
    }
    Ok((y, arg))
}

/// Route each output gradient to its stored argmax.
pub fn maxpool3d_backward<T: Real>(dy: &NdArray<T>, argmax: &[usize], input_shape: &[usize]) -> Result<NdArray<T>, ShapeError> {
    if dy.len() != argmax.len() {
        return Err(ShapeError::Length { expected: argmax.len(), got: dy.len() });
    }
    let mut dx = NdArray::zeros(input_shape);
    let dxd = dx.data_mut();
    for (&g, &a) in dy.data().iter().zip(argmax) {
        dxd[a] += g;
    }
    Ok(dx)
}

pub fn relu<T: Real>(x: &NdArray<T>) -> NdArray<T> {
    let mut y = x.clone();
    relu_inplace(&mut y);
    y
}

pub(crate) fn relu_inplace<T: Real>(x: &mut NdArray<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if !(*v > T::zero()) {
            *v = T::zero()
        }
    });
}

/// Mask `dy` where the ReLU output `y` is not positive (equivalently `x ≤ 0`).
pub fn relu_backward<T: Real>(dy: &NdArray<T>, y: &NdArray<T>) -> NdArray<T> {
    assert_eq!(dy.shape(), y.shape());
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
        if !(v > T::zero()) {
            *g = T::zero();
        }
    }
    dx
}

/// Concatenate two `[n, c, x, y, z]` arrays along the channel axis.
pub fn concat_channels<T: Real>(a: &NdArray<T>, b: &NdArray<T>) -> Result<NdArray<T>, ShapeError> {
    let [n, ca, x, y, z] = a.dims5("concat_channels")?;
    let [nb, cb, xb, yb, zb] = b.dims5("concat_channels")?;
    if [n, x, y, z] != [nb, xb, yb, zb] {
        return Err(ShapeError::Mismatch { op: "concat_channels", expected: vec![n, cb, x, y, z], got: b.shape().to_vec() });
    }
    let p = x * y * z;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for s in 0..n {
        data.extend_from_slice(&a.data()[s * ca * p..(s + 1) * ca * p]);
        data.extend_from_slice(&b.data()[s * cb * p..(s + 1) * cb * p]);
    }
    NdArray::new(vec![n, ca + cb, x, y, z], data)
}

/// Inverse of [`concat_channels`]: the first `ca` channels and the rest.
pub fn split_channels<T: Real>(v: &NdArray<T>, ca: usize) -> Result<(NdArray<T>, NdArray<T>), ShapeError> {
    let [n, c, x, y, z] = v.dims5("split_channels")?;
    if ca > c {
        return Err(ShapeError::Channels { op: "split_channels", expected: c, got: ca });
    }
    let cb = c - ca;
    let p = x * y * z;
    let (mut a, mut b) = (Vec::with_capacity(n * ca * p), Vec::with_capacity(n * cb * p));
    for s in 0..n {
        let d = &v.data()[s * c * p..(s + 1) * c * p];
        a.extend_from_slice(&d[..ca * p]);
        b.extend_from_slice(&d[ca * p..]);
    }
    Ok((NdArray::new(vec![n, ca, x, y, z], a)?, NdArray::new(vec![n, cb, x, y, z], b)?))
}
