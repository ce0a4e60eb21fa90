//! Differentiable helpers built from candle primitives.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;

/// 2x nearest-neighbour upsampling of an NCHW tensor.
///
/// Built from reshape and broadcast so the backward pass accumulates correctly.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let y = x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?
        .reshape((b, c, 2 * h, 2 * w))?;
    Ok(y)
}

pub fn avg_pool2x(x: &Tensor) -> Result<Tensor> {
    Ok(x.avg_pool2d(2)?)
}

pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, padding: usize, groups: usize) -> Result<Tensor> {
    Ok(x.conv2d(w, padding, stride, 1, groups)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-wise L2 normalisation of a (B, D) tensor.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(1)? + eps)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Channel-wise layer norm for NCHW input with affine (1, C, 1, 1) parameters.
pub fn layer_norm_channels(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(1)?;
    let centred = x.broadcast_sub(&mean)?;
    let var = centred.sqr()?.mean_keepdim(1)?;
    let normed = centred.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(gamma)?.broadcast_add(beta)?)
}

/// Scalar value of a single-element tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
}

/// Builds an (N, 1, H, W) tensor from per-sample f32 images.
pub fn stack_images(images: &[&[f32]], side: usize, dtype: DType) -> Result<Tensor> {
    let mut flat = Vec::with_capacity(images.len() * side * side);
    for img in images {
        if img.len() != side * side {
            return crate::error::invalid(format!("image has {} pixels, expected {}", img.len(), side * side));
        }
        flat.extend_from_slice(img);
    }
    Ok(Tensor::from_vec(flat, (images.len(), 1, side, side), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Per-sample flattened f32 images from an (N, 1, H, W) tensor.
pub fn unstack_images(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    let n = t.dim(0)?;
    let flat = t.to_dtype(DType::F32)?.reshape((n, ()))?.to_vec2::<f32>()?;
    Ok(flat)
}
