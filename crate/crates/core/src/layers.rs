//! Neural-network layers with hand-derived backward passes.
//!
//! Valid-mode (no padding) cross-correlation, fully-connected affine maps,
//! 2x2 max pooling, ReLU, and softmax cross-entropy. Convolutions are
//! stride-1 in every architecture this crate builds, but the stride is kept
//! as an argument for the shape checks.

use crate::error::{Error, Result};
use crate::tensor::{idx4, Tensor};
use nalgebra::{DMatrixView, DMatrixViewMut};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Which kind of parameterized layer a [`LayerParams`] block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Weights shaped `(out_channels, in_channels, k, k)`.
    Conv,
    /// Weights shaped `(out_features, in_features)`.
    FullyConnected,
}

/// Learnable weights and bias of one layer, plus their gradient accumulators.
#[derive(Debug, Clone)]
pub struct LayerParams {
    pub kind: ParamKind,
    pub weights: Tensor,
    pub bias: Tensor,
    pub grad_weights: Tensor,
    pub grad_bias: Tensor,
}

impl LayerParams {
    pub fn conv(out_channels: usize, in_channels: usize, k: usize) -> Self {
        let w = Tensor::zeros(&[out_channels, in_channels, k, k]);
        let b = Tensor::zeros(&[out_channels]);
        LayerParams {
            kind: ParamKind::Conv,
            grad_weights: w.clone(),
            grad_bias: b.clone(),
            weights: w,
            bias: b,
        }
    }

    pub fn fully_connected(out_features: usize, in_features: usize) -> Self {
        let w = Tensor::zeros(&[out_features, in_features]);
        let b = Tensor::zeros(&[out_features]);
        LayerParams {
            kind: ParamKind::FullyConnected,
            grad_weights: w.clone(),
            grad_bias: b.clone(),
            weights: w,
            bias: b,
        }
    }

    /// He-style init: zero-mean Gaussian weights with std sqrt(2 / fan_in),
    /// zero bias.
    pub fn init_he<R: Rng>(&mut self, rng: &mut R) {
        let fan_in: usize = match self.kind {
            ParamKind::Conv => {
                let s = self.weights.shape();
                s[1] * s[2] * s[3]
            }
            ParamKind::FullyConnected => self.weights.shape()[1],
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        for w in self.weights.data_mut() {
            *w = dist.sample(rng);
        }
        self.bias.fill(0.0);
        self.zero_grads();
    }

    /// All-zero weights and bias (the init used for the last layer of every
    /// geometric predictor, so the untrained warp update is exactly zero).
    pub fn init_zero(&mut self) {
        self.weights.fill(0.0);
        self.bias.fill(0.0);
        self.zero_grads();
    }

    pub fn zero_grads(&mut self) {
        self.grad_weights.fill(0.0);
        self.grad_bias.fill(0.0);
    }

    /// Number of learnable scalars (weights + bias).
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Fold another gradient block into this one: `grad += scale * other`.
    pub fn accumulate_grads(&mut self, other: &LayerParams, scale: f64) {
        self.grad_weights.add_scaled(&other.grad_weights, scale);
        self.grad_bias.add_scaled(&other.grad_bias, scale);
    }
}

/// Output spatial extent of a valid convolution.
pub fn conv_out_extent(input: usize, k: usize, stride: usize) -> Result<usize> {
    if k > input {
        return Err(Error::Config(format!(
            "kernel {k} larger than input extent {input}"
        )));
    }
    Ok((input - k) / stride + 1)
}

/// Valid cross-correlation plus bias. Input `[N, C, H, W]`, output
/// `[N, C', H-k+1, W-k+1]` at stride 1.
pub fn conv2d_forward(input: &Tensor, params: &LayerParams, stride: usize) -> Result<Tensor> {
    let ishape = input.shape();
    let wshape = params.weights.shape();
    if ishape.len() != 4 || wshape.len() != 4 {
        return Err(Error::Config("conv2d expects 4-D input and weights".into()));
    }
    let (n, in_c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (out_c, k) = (wshape[0], wshape[2]);
    if wshape[1] != in_c {
        return Err(Error::Config(format!(
            "conv2d input has {} channels, kernel expects {}",
            in_c, wshape[1]
        )));
    }
    let oh = conv_out_extent(h, k, stride)?;
    let ow = conv_out_extent(w, k, stride)?;

    let mut out = Tensor::zeros(&[n, out_c, oh, ow]);
    let oshape = [n, out_c, oh, ow];
    let wdata = params.weights.data();
    let bdata = params.bias.data();
    let idata = input.data();
    let odata = out.data_mut();

    for ni in 0..n {
        for oc in 0..out_c {
            // Bias first, then accumulate one scalar-weight row-axpy at a
            // time; the inner loop over `x` vectorizes.
            let b = bdata[oc];
            let out_plane = idx4(&oshape, ni, oc, 0, 0);
            odata[out_plane..out_plane + oh * ow].iter_mut().for_each(|v| *v = b);
            for ic in 0..in_c {
                for kh in 0..k {
                    for kw in 0..k {
                        let wv = wdata[((oc * in_c + ic) * k + kh) * k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        for y in 0..oh {
                            let in_row = idx4(ishape, ni, ic, y * stride + kh, kw);
                            let out_row = out_plane + y * ow;
                            if stride == 1 {
                                let src = &idata[in_row..in_row + ow];
                                let dst = &mut odata[out_row..out_row + ow];
                                for (d, s) in dst.iter_mut().zip(src) {
                                    *d += wv * s;
                                }
                            } else {
                                for x in 0..ow {
                                    odata[out_row + x] += wv * idata[in_row + x * stride];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d_forward`] (stride 1). Accumulates weight and
/// bias gradients into `params` and returns the gradient w.r.t. the input.
pub fn conv2d_backward(
    grad_out: &Tensor,
    cached_input: &Tensor,
    params: &mut LayerParams,
) -> Result<Tensor> {
    let ishape = cached_input.shape().to_vec();
    let oshape = grad_out.shape().to_vec();
    let wshape = params.weights.shape().to_vec();
    let (n, in_c, _h, _w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let (out_c, k) = (wshape[0], wshape[2]);
    let (oh, ow) = (oshape[2], oshape[3]);
    if oshape[0] != n || oshape[1] != out_c {
        return Err(Error::Config("conv2d_backward shape mismatch".into()));
    }

    let mut grad_in = Tensor::zeros(&ishape);
    let gdata = grad_out.data();
    let idata = cached_input.data();
    let wdata = params.weights.data();
    let gw = params.grad_weights.data_mut();
    let gb = params.grad_bias.data_mut();
    let gi = grad_in.data_mut();

    for ni in 0..n {
        for oc in 0..out_c {
            let gplane = idx4(&oshape, ni, oc, 0, 0);
            gb[oc] += gdata[gplane..gplane + oh * ow].iter().sum::<f64>();
            for ic in 0..in_c {
                for kh in 0..k {
                    for kw in 0..k {
                        let widx = ((oc * in_c + ic) * k + kh) * k + kw;
                        let wv = wdata[widx];
                        let mut wacc = 0.0;
                        for y in 0..oh {
                            let grow = gplane + y * ow;
                            let irow = idx4(&ishape, ni, ic, y + kh, kw);
                            let g = &gdata[grow..grow + ow];
                            let i = &idata[irow..irow + ow];
                            let gi_row = &mut gi[irow..irow + ow];
                            let mut dot = 0.0;
                            for x in 0..ow {
                                dot += g[x] * i[x];
                                gi_row[x] += wv * g[x];
                            }
                            wacc += dot;
                        }
                        gw[widx] += wacc;
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

/// Affine map `y = W x + b`. Input `[N, F]`, output `[N, F']`.
pub fn fc_forward(input: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let ishape = input.shape();
    let wshape = params.weights.shape();
    if ishape.len() != 2 {
        return Err(Error::Config("fc expects 2-D input".into()));
    }
    let (n, in_f) = (ishape[0], ishape[1]);
    let (out_f, w_in) = (wshape[0], wshape[1]);
    if in_f != w_in {
        return Err(Error::Config(format!(
            "fc input has {in_f} features, weights expect {w_in}"
        )));
    }
    let mut out = Tensor::zeros(&[n, out_f]);
    // Row-major [r, c] data reads as the column-major transpose [c, r], so
    // Y^T = W X^T lands straight in the output buffer via one gemm.
    let x_t = DMatrixView::from_slice(input.data(), in_f, n);
    let w_t = DMatrixView::from_slice(params.weights.data(), in_f, out_f);
    let mut y_t = DMatrixViewMut::from_slice(out.data_mut(), out_f, n);
    y_t.gemm_tr(1.0, &w_t, &x_t, 0.0);
    let bdata = params.bias.data();
    let odata = out.data_mut();
    for ni in 0..n {
        for (o, b) in bdata.iter().enumerate() {
            odata[ni * out_f + o] += b;
        }
    }
    Ok(out)
}

/// Backward pass of [`fc_forward`]: accumulates `grad_W += g xᵀ`,
/// `grad_b += g`, returns `Wᵀ g`.
pub fn fc_backward(
    grad_out: &Tensor,
    cached_input: &Tensor,
    params: &mut LayerParams,
) -> Result<Tensor> {
    let (n, in_f) = (cached_input.shape()[0], cached_input.shape()[1]);
    let out_f = params.weights.shape()[0];
    if grad_out.shape() != [n, out_f] {
        return Err(Error::Config("fc_backward shape mismatch".into()));
    }
    let mut grad_in = Tensor::zeros(&[n, in_f]);
    let gdata = grad_out.data();
    let g_t = DMatrixView::from_slice(gdata, out_f, n);
    // grad_W^T += X^T G needs G column-major; it is tiny, so copy it.
    let g_cm = g_t.transpose();
    let x_t = DMatrixView::from_slice(cached_input.data(), in_f, n);
    let mut gw_t = DMatrixViewMut::from_slice(params.grad_weights.data_mut(), in_f, out_f);
    gw_t.gemm(1.0, &x_t, &g_cm, 1.0);
    let w_t = DMatrixView::from_slice(params.weights.data(), in_f, out_f);
    let mut gi_t = DMatrixViewMut::from_slice(grad_in.data_mut(), in_f, n);
    gi_t.gemm(1.0, &w_t, &g_t, 0.0);
    let gb = params.grad_bias.data_mut();
    for ni in 0..n {
        for (o, gbo) in gb.iter_mut().enumerate() {
            *gbo += gdata[ni * out_f + o];
        }
    }
    Ok(grad_in)
}

/// Winning input offsets of a max-pool forward pass, consumed by the
/// backward pass to route gradients.
#[derive(Debug, Clone)]
pub struct PoolArgmax {
    input_shape: Vec<usize>,
    /// Flat input offset of the maximum for each output site, in output
    /// row-major order.
    winners: Vec<usize>,
}

/// Non-overlapping 2x2 max pooling. Spatial extents must be even.
/// Ties go to the first occurrence in row-major window order.
pub fn maxpool2x2_forward(input: &Tensor) -> Result<(Tensor, PoolArgmax)> {
    let shape = input.shape();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "maxpool2x2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut winners = vec![0usize; n * c * oh * ow];
    let idata = input.data();
    let odata = out.data_mut();
    let mut oi = 0;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = idx4(shape, ni, ci, 2 * y, 2 * x);
                    let candidates = [base, base + 1, base + w, base + w + 1];
                    let mut best = candidates[0];
                    let mut best_v = idata[best];
                    for &cand in &candidates[1..] {
                        if idata[cand] > best_v {
                            best_v = idata[cand];
                            best = cand;
                        }
                    }
                    odata[oi] = best_v;
                    winners[oi] = best;
                    oi += 1;
                }
            }
        }
    }
    Ok((
        out,
        PoolArgmax {
            input_shape: shape.to_vec(),
            winners,
        },
    ))
}

/// Scatter pooled gradients back to the recorded argmax positions.
pub fn maxpool2x2_backward(grad_out: &Tensor, argmax: &PoolArgmax) -> Result<Tensor> {
    if grad_out.len() != argmax.winners.len() {
        return Err(Error::Config("maxpool backward shape mismatch".into()));
    }
    let mut grad_in = Tensor::zeros(&argmax.input_shape);
    let gi = grad_in.data_mut();
    for (g, &widx) in grad_out.data().iter().zip(argmax.winners.iter()) {
        gi[widx] += g;
    }
    Ok(grad_in)
}

/// Elementwise max(x, 0). Returns the output and the activation mask.
pub fn relu_forward(input: &Tensor) -> (Tensor, Vec<bool>) {
    let mut out = input.clone();
    let mask: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
    for (v, &m) in out.data_mut().iter_mut().zip(mask.iter()) {
        if !m {
            *v = 0.0;
        }
    }
    (out, mask)
}

pub fn relu_backward(grad_out: &Tensor, mask: &[bool]) -> Tensor {
    let mut grad_in = grad_out.clone();
    for (g, &m) in grad_in.data_mut().iter_mut().zip(mask.iter()) {
        if !m {
            *g = 0.0;
        }
    }
    grad_in
}

/// Row-wise softmax probabilities (numerically stabilized).
pub fn softmax(logits: &Tensor) -> Tensor {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    let mut out = Tensor::zeros(&[n, k]);
    let ld = logits.data();
    let od = out.data_mut();
    for ni in 0..n {
        let row = &ld[ni * k..(ni + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut od[ni * k..(ni + 1) * k];
        let mut sum = 0.0;
        for (o, &l) in orow.iter_mut().zip(row) {
            *o = (l - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits,
/// `grad = (softmax - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (n, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != n {
        return Err(Error::Data(format!(
            "{} labels for batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range 0..{k}")));
    }
    let mut grad = softmax(logits);
    let gd = grad.data_mut();
    let ld = logits.data();
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    for (ni, &label) in labels.iter().enumerate() {
        let row = &ld[ni * k..(ni + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logsum = row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln() + max;
        loss += logsum - row[label];
        gd[ni * k + label] -= 1.0;
    }
    for g in gd.iter_mut() {
        *g *= inv_n;
    }
    Ok((loss * inv_n, grad))
}
