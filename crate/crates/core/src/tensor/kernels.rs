//! Batched NCHW kernels on raw slices. Every loop has a fixed summation order
//! so results are bit-reproducible for identical inputs.

use super::{gemm, Real};
use crate::error::{Error, Result};

/// Geometry of a square-kernel 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::shape("convolution stride must be at least 1"));
        }
        if k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::shape(format!(
                "kernel {k}x{k} does not fit input {h}x{w} with padding {pad}"
            )));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds one sample `[c_in, h, w]` into `[c_in*k*k, oh*ow]`.
fn im2col<T: Real>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.c_in {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, slot) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[c_in*k*k, oh*ow]` into `[c_in, h, w]`.
fn col2im<T: Real>(g: &ConvGeom, col: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    let mut row = 0;
    for c in 0..g.c_in {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `out[b] = weight * im2col(x[b]) + bias` for every sample in the batch.
pub fn conv2d_forward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    out: &mut [T],
) {
    let in_len = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_len = g.c_out * plane;
    let mut col = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.patch_len() * plane]
    };
    for s in 0..batch {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let os = &mut out[s * out_len..(s + 1) * out_len];
        for (co, chunk) in os.chunks_exact_mut(plane).enumerate() {
            chunk.fill(bias[co]);
        }
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(g, xs, &mut col);
            &col
        };
        gemm(g.c_out, g.patch_len(), plane, weight, false, cols, false, T::one(), os);
    }
}

/// Accumulates weight/bias gradients and, when `dx` is given, writes the
/// input gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Real>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    dout: &[T],
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    mut dx: Option<&mut [T]>,
) {
    let in_len = g.c_in * g.h * g.w;
    let plane = g.out_plane();
    let out_len = g.c_out * plane;
    let kk = g.patch_len();
    let mut col = vec![T::zero(); kk * plane];
    let mut dcol = vec![T::zero(); kk * plane];
    if let Some(db) = dbias {
        for s in 0..batch {
            let ds = &dout[s * out_len..(s + 1) * out_len];
            for (co, chunk) in ds.chunks_exact(plane).enumerate() {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
    }
    let mut dweight = dweight;
    for s in 0..batch {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let ds = &dout[s * out_len..(s + 1) * out_len];
        if let Some(dw) = dweight.as_deref_mut() {
            let cols: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(g, xs, &mut col);
                &col
            };
            // dW[co, kk] += dY[co, p] * col[kk, p]^T
            gemm(g.c_out, plane, kk, ds, false, cols, true, T::one(), dw);
        }
        if let Some(dxa) = dx.as_deref_mut() {
            let dxs = &mut dxa[s * in_len..(s + 1) * in_len];
            if g.is_pointwise() {
                gemm(kk, g.c_out, plane, weight, true, ds, false, T::zero(), dxs);
            } else {
                gemm(kk, g.c_out, plane, weight, true, ds, false, T::zero(), &mut dcol);
                dxs.fill(T::zero());
                col2im(g, &dcol, dxs);
            }
        }
    }
}

/// Max pooling geometry; windows use the floor rule for partial coverage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(Error::shape("pool window and stride must be at least 1"));
        }
        if k > h || k > w {
            return Err(Error::shape(format!(
                "pool window {k}x{k} exceeds input {h}x{w}"
            )));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            stride,
            oh: (h - k) / stride + 1,
            ow: (w - k) / stride + 1,
        })
    }
}

/// Writes window maxima and the flat input index of the first maximal element
/// (row-major scan) of each window.
pub fn maxpool_forward<T: Real>(
    g: &PoolGeom,
    batch: usize,
    x: &[T],
    out: &mut [T],
    argmax: &mut [usize],
) {
    let mut o = 0;
    for plane in 0..batch * g.c {
        let base = plane * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best_idx = base + oy * g.stride * g.w + ox * g.stride;
                let mut best = x[best_idx];
                for ky in 0..g.k {
                    let row = base + (oy * g.stride + ky) * g.w + ox * g.stride;
                    for kx in 0..g.k {
                        let v = x[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out[o] = best;
                argmax[o] = best_idx;
                o += 1;
            }
        }
    }
}

pub fn maxpool_backward<T: Real>(dout: &[T], argmax: &[usize], dx: &mut [T]) {
    for (&d, &i) in dout.iter().zip(argmax) {
        dx[i] = dx[i] + d;
    }
}

/// Spatial mean of each `plane`-sized map.
pub fn gap_forward<T: Real>(x: &[T], plane: usize, out: &mut [T]) {
    let inv = T::one() / T::from_usize(plane).unwrap();
    for (o, chunk) in out.iter_mut().zip(x.chunks_exact(plane)) {
        *o = chunk.iter().copied().sum::<T>() * inv;
    }
}

pub fn gap_backward<T: Real>(dout: &[T], plane: usize, dx: &mut [T]) {
    let inv = T::one() / T::from_usize(plane).unwrap();
    for (d, chunk) in dout.iter().zip(dx.chunks_exact_mut(plane)) {
        let v = *d * inv;
        for slot in chunk {
            *slot = *slot + v;
        }
    }
}

/// `out[b, o] = sum_d weight[o, d] * x[b, d] + bias[o]`.
pub fn linear_forward<T: Real>(
    batch: usize,
    d_in: usize,
    d_out: usize,
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    out: &mut [T],
) {
    for row in out.chunks_exact_mut(d_out) {
        match bias {
            Some(b) => row.copy_from_slice(b),
            None => row.fill(T::zero()),
        }
    }
    gemm(batch, d_in, d_out, x, false, weight, true, T::one(), out);
}

#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    batch: usize,
    d_in: usize,
    d_out: usize,
    x: &[T],
    weight: &[T],
    dout: &[T],
    dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    if let Some(dw) = dweight {
        gemm(d_out, batch, d_in, dout, true, x, false, T::one(), dw);
    }
    if let Some(db) = dbias {
        for row in dout.chunks_exact(d_out) {
            for (acc, &v) in db.iter_mut().zip(row) {
                *acc = *acc + v;
            }
        }
    }
    if let Some(dx) = dx {
        gemm(batch, d_out, d_in, dout, false, weight, false, T::one(), dx);
    }
}

/// Block-diagonal map: output `g` is the dot product of `weight[g]` with the
/// `g`-th contiguous block of the input.
pub fn group_linear_forward<T: Real>(
    batch: usize,
    groups: usize,
    block: usize,
    x: &[T],
    weight: &[T],
    out: &mut [T],
) {
    for s in 0..batch {
        let xs = &x[s * groups * block..(s + 1) * groups * block];
        for g in 0..groups {
            let w = &weight[g * block..(g + 1) * block];
            let xb = &xs[g * block..(g + 1) * block];
            out[s * groups + g] = w.iter().zip(xb).map(|(&a, &b)| a * b).sum();
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn group_linear_backward<T: Real>(
    batch: usize,
    groups: usize,
    block: usize,
    x: &[T],
    weight: &[T],
    dout: &[T],
    mut dweight: Option<&mut [T]>,
    mut dx: Option<&mut [T]>,
) {
    for s in 0..batch {
        let base = s * groups * block;
        for g in 0..groups {
            let d = dout[s * groups + g];
            let off = base + g * block;
            if let Some(dw) = dweight.as_deref_mut() {
                for i in 0..block {
                    dw[g * block + i] = dw[g * block + i] + d * x[off + i];
                }
            }
            if let Some(dxa) = dx.as_deref_mut() {
                for i in 0..block {
                    dxa[off + i] = dxa[off + i] + d * weight[g * block + i];
                }
            }
        }
    }
}

/// Align-corners bilinear resampling of `[c, h, w]` planes to `[c, th, tw]`.
pub fn bilinear_resize<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    th: usize,
    tw: usize,
) -> Vec<T> {
    fn axis(src: usize, dst: usize, i: usize) -> (usize, usize, f64) {
        if src == 1 || dst == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    }
    let mut out = Vec::with_capacity(c * th * tw);
    let cols: Vec<_> = (0..tw).map(|x| axis(w, tw, x)).collect();
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for y in 0..th {
            let (y0, y1, fy) = axis(h, th, y);
            for &(x0, x1, fx) in &cols {
                let at = |yy: usize, xx: usize| plane[yy * w + xx].to_f64_lossy();
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(T::from_f64_lossy(top * (1.0 - fy) + bot * fy));
            }
        }
    }
    out
}

/// `max(z, 0) - z*y + ln(1 + e^{-|z|})`, the stable form of sigmoid
/// cross-entropy.
pub fn bce_with_logit<T: Real>(z: T, y: T) -> T {
    z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; g.c_out * g.oh * g.ow];
        for co in 0..g.c_out {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = b[co];
                    for ci in 0..g.c_in {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                    acc += w[((co * g.c_in + ci) * g.k + ki) * g.k + kj]
                                        * x[(ci * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 0), (1, 1, 0), (2, 2, 1), (5, 1, 2)] {
            let g = ConvGeom::new(2, 7, 6, 3, k, stride, pad).unwrap();
            let x: Vec<f64> = (0..2 * 7 * 6).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
            let w: Vec<f64> = (0..3 * 2 * k * k).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.7).collect();
            let b = vec![0.5, -1.0, 2.0];
            let mut out = vec![0.0; 3 * g.oh * g.ow];
            conv2d_forward(&g, 1, &x, &w, &b, &mut out);
            let want = naive_conv(&g, &x, &w, &b);
            for (a, e) in out.iter().zip(&want) {
                assert!((a - e).abs() < 1e-12, "k={k} s={stride} p={pad}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn conv_geometry_rejects_oversized_kernel() {
        assert!(ConvGeom::new(1, 2, 2, 1, 5, 1, 1).is_err());
        assert!(ConvGeom::new(1, 2, 2, 1, 3, 0, 1).is_err());
        assert_eq!(ConvGeom::new(1, 5, 5, 1, 3, 2, 1).unwrap().oh, 3);
    }

    #[test]
    fn pool_rejects_window_larger_than_input() {
        assert!(PoolGeom::new(1, 2, 4, 3, 1).is_err());
    }

    #[test]
    fn pool_tie_goes_to_first_in_row_major_order() {
        let g = PoolGeom::new(1, 2, 2, 2, 2).unwrap();
        let x = [7.0f64, 7.0, 7.0, 7.0];
        let mut out = [0.0];
        let mut arg = [9];
        maxpool_forward(&g, 1, &x, &mut out, &mut arg);
        assert_eq!(arg[0], 0);
        let y = [1.0f64, 7.0, 7.0, 3.0];
        maxpool_forward(&g, 1, &y, &mut out, &mut arg);
        assert_eq!(arg[0], 1);
    }

    #[test]
    fn bce_stable_at_extremes() {
        assert!(bce_with_logit(1000.0f64, 1.0) < 1e-300);
        assert!((bce_with_logit(-1000.0f64, 1.0) - 1000.0).abs() < 1e-9);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
    }
}
