//! Single-sample functional forms of the layer set (`[C, H, W]` images,
//! `[D]` vectors). Differentiable versions live on [`Graph`](super::Graph).

use super::kernels::{self, ConvGeom, PoolGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

fn chw<T: Real>(t: &Tensor<T>, op: &str) -> Result<(usize, usize, usize)> {
    match *t.dims() {
        [c, h, w] => Ok((c, h, w)),
        ref d => Err(Error::shape(format!("{op} expects [C,H,W], got {d:?}"))),
    }
}

pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = chw(input, "conv2d")?;
    let [c_out, c_in, k, k2] = *weights.dims() else {
        return Err(Error::shape(format!(
            "conv2d weights must be [C_out,C_in,k,k], got {:?}",
            weights.dims()
        )));
    };
    if c != c_in || k != k2 {
        return Err(Error::shape(format!(
            "conv2d input {:?} does not match weights {:?}",
            input.dims(),
            weights.dims()
        )));
    }
    if bias.dims() != [c_out] {
        return Err(Error::shape(format!("conv2d bias {:?} for {c_out} outputs", bias.dims())));
    }
    let g = ConvGeom::new(c, h, w, c_out, k, stride, pad)?;
    let mut out = vec![T::zero(); c_out * g.oh * g.ow];
    kernels::conv2d_forward(&g, 1, input.data(), weights.data(), bias.data(), &mut out);
    Tensor::new(vec![c_out, g.oh, g.ow], out)
}

pub fn maxpool2d<T: Real>(input: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    let (c, h, w) = chw(input, "maxpool2d")?;
    let g = PoolGeom::new(c, h, w, k, stride)?;
    let n = c * g.oh * g.ow;
    let mut out = vec![T::zero(); n];
    let mut arg = vec![0; n];
    kernels::maxpool_forward(&g, 1, input.data(), &mut out, &mut arg);
    Tensor::new(vec![c, g.oh, g.ow], out)
}

pub fn gap<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = chw(input, "gap")?;
    let mut out = vec![T::zero(); c];
    kernels::gap_forward(input.data(), h * w, &mut out);
    Tensor::new(vec![c], out)
}

pub fn linear<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [o, d] = *weights.dims() else {
        return Err(Error::shape(format!("linear weights must be [O,D], got {:?}", weights.dims())));
    };
    if input.dims() != [d] || bias.dims() != [o] {
        return Err(Error::shape(format!(
            "linear input {:?} / bias {:?} inconsistent with weights {:?}",
            input.dims(),
            bias.dims(),
            weights.dims()
        )));
    }
    let mut out = vec![T::zero(); o];
    kernels::linear_forward(1, d, o, input.data(), weights.data(), Some(bias.data()), &mut out);
    Tensor::new(vec![o], out)
}

pub fn group_linear<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, group_count: usize) -> Result<Tensor<T>> {
    let [g, d] = *weights.dims() else {
        return Err(Error::shape(format!("group weights must be [G,D], got {:?}", weights.dims())));
    };
    if g != group_count || input.dims().len() != 1 || input.len() != g * d {
        return Err(Error::shape(format!(
            "cannot partition input {:?} into {group_count} groups of weights {:?}",
            input.dims(),
            weights.dims()
        )));
    }
    let mut out = vec![T::zero(); g];
    kernels::group_linear_forward(1, g, d, input.data(), weights.data(), &mut out);
    Tensor::new(vec![g], out)
}

/// Align-corners bilinear upsampling; downsampling is rejected.
pub fn bilinear_upsample<T: Real>(input: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    let (c, h, w) = chw(input, "bilinear_upsample")?;
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::shape(format!(
            "bilinear_upsample target {th}x{tw} is smaller than source {h}x{w}"
        )));
    }
    Tensor::new(vec![c, th, tw], kernels::bilinear_resize(input.data(), c, h, w, th, tw))
}
