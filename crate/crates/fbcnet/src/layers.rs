//! Differentiable layers: depthwise spatial convolution, batch norm,
//! activations, the windowed variance/average/max temporal layers, log
//! activation, the fully connected classifier head, max-norm projection
//! and the softmax cross-entropy loss.
//!
//! Layers are fused autodiff ops (one graph node each) with analytic
//! backward rules. The variance layer's backward is the closed form
//! `upstream * (2/w) * (x - mean)` per window, computed exactly, not via
//! composition.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Log-activation clamp range: symmetric decades around 1. Gradient is
/// exactly zero outside.
pub const LOG_CLAMP_MIN: f64 = 1e-6;
pub const LOG_CLAMP_MAX: f64 = 1e6;

/// Spatial-block nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Swish,
    Elu,
    Relu,
    LeakyRelu,
}

impl Default for Activation {
    fn default() -> Self {
        Activation::Swish
    }
}

/// Temporal feature-extraction layer choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemporalKind {
    Variance,
    Average,
    Max,
}

impl Default for TemporalKind {
    fn default() -> Self {
        TemporalKind::Variance
    }
}

// ---------------------------------------------------------------------------
// Depthwise spatial convolution
// ---------------------------------------------------------------------------

/// Depthwise convolution parameters: `m` spatial filters per band, kernel
/// spanning all C channels. Filter `j` reads input view `j / m` only.
#[derive(Debug, Clone)]
pub struct DepthwiseConv {
    /// Shape (m*N_b, 1, C, 1); row `j` holds the C channel weights.
    pub weights: Tensor,
    /// Shape (m*N_b,).
    pub bias: Tensor,
    pub depth_multiplier: usize,
    pub max_norm: f64,
}

/// Forward pass: x (B, N_b, C, T) -> (B, m*N_b, 1, T) with
/// `out[b,j,0,t] = bias[j] + sum_c weights[j,c] * x[b, j/m, c, t]`.
pub fn depthwise_conv_forward(x: &Tensor, conv: &DepthwiseConv) -> Result<Tensor> {
    let xs = x.shape().to_vec();
    if xs.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv",
            lhs: xs,
            rhs: conv.weights.shape().to_vec(),
        });
    }
    let (batch, views, channels, t) = (xs[0], xs[1], xs[2], xs[3]);
    let m = conv.depth_multiplier;
    let filters = m * views;
    let ws = conv.weights.shape();
    if ws != [filters, 1, channels, 1] || conv.bias.shape() != [filters] {
        return Err(Error::ShapeMismatch {
            op: "depthwise_conv",
            lhs: xs,
            rhs: ws.to_vec(),
        });
    }

    let xd = x.data();
    let wd = conv.weights.data();
    let bd = conv.bias.data();
    let mut out = vec![0.0; batch * filters * t];
    for b in 0..batch {
        for j in 0..filters {
            let v = j / m;
            let dst = (b * filters + j) * t;
            let bias = bd[j];
            out[dst..dst + t].iter_mut().for_each(|o| *o = bias);
            for c in 0..channels {
                let w = wd[j * channels + c];
                let src = ((b * views + v) * channels + c) * t;
                for i in 0..t {
                    out[dst + i] += w * xd[src + i];
                }
            }
        }
    }
    drop(xd);
    drop(wd);
    drop(bd);

    let x_c = x.clone();
    let w_c = conv.weights.clone();
    Ok(Tensor::from_op(
        out,
        vec![batch, filters, 1, t],
        vec![x.clone(), conv.weights.clone(), conv.bias.clone()],
        Box::new(move |up| {
            let xd = x_c.data();
            let wd = w_c.data();
            let mut gx = vec![0.0; batch * views * channels * t];
            let mut gw = vec![0.0; filters * channels];
            let mut gb = vec![0.0; filters];
            for b in 0..batch {
                for j in 0..filters {
                    let v = j / m;
                    let urow = &up[(b * filters + j) * t..(b * filters + j + 1) * t];
                    gb[j] += urow.iter().sum::<f64>();
                    for c in 0..channels {
                        let src = ((b * views + v) * channels + c) * t;
                        let w = wd[j * channels + c];
                        let mut acc = 0.0;
                        for i in 0..t {
                            acc += urow[i] * xd[src + i];
                            gx[src + i] += urow[i] * w;
                        }
                        gw[j * channels + c] += acc;
                    }
                }
            }
            vec![gx, gw, gb]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Batch normalization along the feature-map dimension of a
/// (B, F, 1, T) tensor. Running statistics live behind a `RefCell` so the
/// train-mode forward can update them; one model instance is owned by one
/// training run.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: RefCell<Vec<f64>>,
    pub running_var: RefCell<Vec<f64>>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(features: usize, momentum: f64, eps: f64) -> BatchNorm {
        BatchNorm {
            gamma: Tensor::leaf(vec![1.0; features], vec![features]),
            beta: Tensor::leaf(vec![0.0; features], vec![features]),
            running_mean: RefCell::new(vec![0.0; features]),
            running_var: RefCell::new(vec![1.0; features]),
            momentum,
            eps,
        }
    }
}

/// Train/eval switch shared by batch norm and the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn batchnorm(x: &Tensor, bn: &BatchNorm, mode: Mode) -> Result<Tensor> {
    let xs = x.shape().to_vec();
    if xs.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: xs,
            rhs: bn.gamma.shape().to_vec(),
        });
    }
    let (batch, features, t) = (xs[0], xs[1], xs[3]);
    if bn.gamma.shape() != [features] {
        return Err(Error::ShapeMismatch {
            op: "batchnorm",
            lhs: xs,
            rhs: bn.gamma.shape().to_vec(),
        });
    }
    let n = batch * t;

    match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::InvalidConfig(
                    "batch norm in train mode needs batch*T > 1".into(),
                ));
            }
            let xd = x.data();
            let mut mean = vec![0.0; features];
            let mut var = vec![0.0; features];
            for f in 0..features {
                let mut s = 0.0;
                for b in 0..batch {
                    let row = &xd[(b * features + f) * t..(b * features + f + 1) * t];
                    s += row.iter().sum::<f64>();
                }
                let mu = s / n as f64;
                let mut sq = 0.0;
                for b in 0..batch {
                    let row = &xd[(b * features + f) * t..(b * features + f + 1) * t];
                    sq += row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
                }
                mean[f] = mu;
                var[f] = sq / n as f64;
            }

            // Exponential moving average; running variance uses the
            // unbiased estimate.
            {
                let mut rm = bn.running_mean.borrow_mut();
                let mut rv = bn.running_var.borrow_mut();
                let unbias = n as f64 / (n as f64 - 1.0);
                for f in 0..features {
                    rm[f] = (1.0 - bn.momentum) * rm[f] + bn.momentum * mean[f];
                    rv[f] = (1.0 - bn.momentum) * rv[f] + bn.momentum * var[f] * unbias;
                }
            }

            let gd = bn.gamma.data();
            let bd = bn.beta.data();
            let mut out = vec![0.0; xd.len()];
            for b in 0..batch {
                for f in 0..features {
                    let inv = 1.0 / (var[f] + bn.eps).sqrt();
                    let base = (b * features + f) * t;
                    for i in 0..t {
                        out[base + i] = gd[f] * (xd[base + i] - mean[f]) * inv + bd[f];
                    }
                }
            }
            drop(xd);
            drop(gd);
            drop(bd);

            let x_c = x.clone();
            let g_c = bn.gamma.clone();
            let eps = bn.eps;
            Ok(Tensor::from_op(
                out,
                xs.clone(),
                vec![x.clone(), bn.gamma.clone(), bn.beta.clone()],
                Box::new(move |up| {
                    let xd = x_c.data();
                    let gd = g_c.data();
                    let nf = n as f64;
                    let mut gx = vec![0.0; xd.len()];
                    let mut gg = vec![0.0; features];
                    let mut gb = vec![0.0; features];
                    for f in 0..features {
                        let inv = 1.0 / (var[f] + eps).sqrt();
                        let mut sum_u = 0.0;
                        let mut sum_ux = 0.0;
                        for b in 0..batch {
                            let base = (b * features + f) * t;
                            for i in 0..t {
                                let xh = (xd[base + i] - mean[f]) * inv;
                                let u = up[base + i];
                                sum_u += u;
                                sum_ux += u * xh;
                            }
                        }
                        gg[f] = sum_ux;
                        gb[f] = sum_u;
                        let mu_u = sum_u / nf;
                        let mu_ux = sum_ux / nf;
                        for b in 0..batch {
                            let base = (b * features + f) * t;
                            for i in 0..t {
                                let xh = (xd[base + i] - mean[f]) * inv;
                                gx[base + i] = gd[f] * inv * (up[base + i] - mu_u - xh * mu_ux);
                            }
                        }
                    }
                    vec![gx, gg, gb]
                }),
            ))
        }
        Mode::Eval => {
            let rm = bn.running_mean.borrow().clone();
            let rv = bn.running_var.borrow().clone();
            let xd = x.data();
            let gd = bn.gamma.data();
            let bd = bn.beta.data();
            let mut out = vec![0.0; xd.len()];
            for b in 0..batch {
                for f in 0..features {
                    let inv = 1.0 / (rv[f] + bn.eps).sqrt();
                    let base = (b * features + f) * t;
                    for i in 0..t {
                        out[base + i] = gd[f] * (xd[base + i] - rm[f]) * inv + bd[f];
                    }
                }
            }
            drop(xd);
            drop(gd);
            drop(bd);

            let x_c = x.clone();
            let g_c = bn.gamma.clone();
            let eps = bn.eps;
            Ok(Tensor::from_op(
                out,
                xs.clone(),
                vec![x.clone(), bn.gamma.clone(), bn.beta.clone()],
                Box::new(move |up| {
                    let xd = x_c.data();
                    let gd = g_c.data();
                    let mut gx = vec![0.0; xd.len()];
                    let mut gg = vec![0.0; features];
                    let mut gb = vec![0.0; features];
                    for b in 0..batch {
                        for f in 0..features {
                            let inv = 1.0 / (rv[f] + eps).sqrt();
                            let base = (b * features + f) * t;
                            for i in 0..t {
                                let u = up[base + i];
                                gx[base + i] = u * gd[f] * inv;
                                gg[f] += u * (xd[base + i] - rm[f]) * inv;
                                gb[f] += u;
                            }
                        }
                    }
                    vec![gx, gg, gb]
                }),
            ))
        }
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn activation_value(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Swish => x * sigmoid(x),
        Activation::Elu => {
            if x > 0.0 {
                x
            } else {
                x.exp() - 1.0
            }
        }
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu => {
            if x > 0.0 {
                x
            } else {
                0.01 * x
            }
        }
    }
}

pub fn activation_derivative(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Swish => {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        }
        Activation::Elu => {
            if x > 0.0 {
                1.0
            } else {
                x.exp()
            }
        }
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::LeakyRelu => {
            if x > 0.0 {
                1.0
            } else {
                0.01
            }
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    let out: Vec<f64> = x.data().iter().map(|&v| activation_value(kind, v)).collect();
    let shape = x.shape().to_vec();
    let x_c = x.clone();
    Tensor::from_op(
        out,
        shape,
        vec![x.clone()],
        Box::new(move |up| {
            let xd = x_c.data();
            vec![up
                .iter()
                .enumerate()
                .map(|(i, &g)| g * activation_derivative(kind, xd[i]))
                .collect()]
        }),
    )
}

/// `ln(clamp(x, 1e-6, 1e6))`; gradient is exactly zero outside the clamp
/// range.
pub fn log_activation(x: &Tensor) -> Tensor {
    x.max_scalar(LOG_CLAMP_MIN).min_scalar(LOG_CLAMP_MAX).ln()
}

// ---------------------------------------------------------------------------
// Temporal layers
// ---------------------------------------------------------------------------

fn window_geometry(shape: &[usize], w: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            op: "temporal_layer",
            lhs: shape.to_vec(),
            rhs: vec![w],
        });
    }
    let series = shape[0] * shape[1] * shape[2];
    let t = shape[3];
    if w == 0 || t % w != 0 {
        return Err(Error::InvalidConfig(format!(
            "window {w} does not divide series length {t}"
        )));
    }
    Ok((series, t, t / w))
}

/// Per-window population variance: (B, F, 1, T) -> (B, F, 1, T/w).
///
/// Backward is the exact closed form `upstream * (2/w) * (x - mean)` per
/// window.
pub fn variance_layer(x: &Tensor, w: usize) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (series, t, k) = window_geometry(&shape, w)?;
    let xd = x.data();
    let mut out = vec![0.0; series * k];
    let mut means = vec![0.0; series * k];
    for s in 0..series {
        for j in 0..k {
            let base = s * t + j * w;
            let win = &xd[base..base + w];
            let mu = win.iter().sum::<f64>() / w as f64;
            let var = win.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / w as f64;
            means[s * k + j] = mu;
            out[s * k + j] = var;
        }
    }
    drop(xd);

    let mut out_shape = shape.clone();
    out_shape[3] = k;
    let x_c = x.clone();
    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![x.clone()],
        Box::new(move |up| {
            let xd = x_c.data();
            let scale = 2.0 / w as f64;
            let mut gx = vec![0.0; xd.len()];
            for s in 0..series {
                for j in 0..k {
                    let u = up[s * k + j];
                    let mu = means[s * k + j];
                    let base = s * t + j * w;
                    for i in 0..w {
                        gx[base + i] = u * scale * (xd[base + i] - mu);
                    }
                }
            }
            vec![gx]
        }),
    ))
}

/// Per-window mean: (B, F, 1, T) -> (B, F, 1, T/w).
pub fn average_layer(x: &Tensor, w: usize) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (series, t, k) = window_geometry(&shape, w)?;
    let xd = x.data();
    let mut out = vec![0.0; series * k];
    for s in 0..series {
        for j in 0..k {
            let base = s * t + j * w;
            out[s * k + j] = xd[base..base + w].iter().sum::<f64>() / w as f64;
        }
    }
    drop(xd);
    let mut out_shape = shape.clone();
    out_shape[3] = k;
    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![x.clone()],
        Box::new(move |up| {
            let inv = 1.0 / w as f64;
            let mut gx = vec![0.0; series * t];
            for s in 0..series {
                for j in 0..k {
                    let u = up[s * k + j] * inv;
                    let base = s * t + j * w;
                    for g in &mut gx[base..base + w] {
                        *g = u;
                    }
                }
            }
            vec![gx]
        }),
    ))
}

/// Per-window max; gradient routes to the first maximal element.
pub fn max_layer(x: &Tensor, w: usize) -> Result<Tensor> {
    let shape = x.shape().to_vec();
    let (series, t, k) = window_geometry(&shape, w)?;
    let xd = x.data();
    let mut out = vec![0.0; series * k];
    let mut arg = vec![0usize; series * k];
    for s in 0..series {
        for j in 0..k {
            let base = s * t + j * w;
            let mut best = f64::NEG_INFINITY;
            let mut bi = 0;
            for (i, &v) in xd[base..base + w].iter().enumerate() {
                if v > best {
                    best = v;
                    bi = i;
                }
            }
            out[s * k + j] = best;
            arg[s * k + j] = bi;
        }
    }
    drop(xd);
    let mut out_shape = shape.clone();
    out_shape[3] = k;
    Ok(Tensor::from_op(
        out,
        out_shape,
        vec![x.clone()],
        Box::new(move |up| {
            let mut gx = vec![0.0; series * t];
            for s in 0..series {
                for j in 0..k {
                    gx[s * t + j * w + arg[s * k + j]] = up[s * k + j];
                }
            }
            vec![gx]
        }),
    ))
}

pub fn temporal_layer(x: &Tensor, kind: TemporalKind, w: usize) -> Result<Tensor> {
    match kind {
        TemporalKind::Variance => variance_layer(x, w),
        TemporalKind::Average => average_layer(x, w),
        TemporalKind::Max => max_layer(x, w),
    }
}

// ---------------------------------------------------------------------------
// Fully connected head
// ---------------------------------------------------------------------------

/// Linear layer: x (B, D) with weights (N_c, D) and bias (N_c,) ->
/// logits (B, N_c).
pub fn linear_forward(x: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let xs = x.shape().to_vec();
    let ws = weights.shape().to_vec();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] || bias.shape() != [ws[0]] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            lhs: xs,
            rhs: ws,
        });
    }
    let (batch, d) = (xs[0], xs[1]);
    let classes = ws[0];
    let xd = x.data();
    let wd = weights.data();
    let bd = bias.data();
    let mut out = vec![0.0; batch * classes];
    for i in 0..batch {
        for c in 0..classes {
            let mut acc = bd[c];
            let wrow = &wd[c * d..(c + 1) * d];
            let xrow = &xd[i * d..(i + 1) * d];
            for j in 0..d {
                acc += wrow[j] * xrow[j];
            }
            out[i * classes + c] = acc;
        }
    }
    drop(xd);
    drop(wd);
    drop(bd);

    let x_c = x.clone();
    let w_c = weights.clone();
    Ok(Tensor::from_op(
        out,
        vec![batch, classes],
        vec![x.clone(), weights.clone(), bias.clone()],
        Box::new(move |up| {
            let xd = x_c.data();
            let wd = w_c.data();
            let mut gx = vec![0.0; batch * d];
            let mut gw = vec![0.0; classes * d];
            let mut gb = vec![0.0; classes];
            for i in 0..batch {
                for c in 0..classes {
                    let u = up[i * classes + c];
                    gb[c] += u;
                    let wrow = &wd[c * d..(c + 1) * d];
                    let xrow = &xd[i * d..(i + 1) * d];
                    for j in 0..d {
                        gx[i * d + j] += u * wrow[j];
                        gw[c * d + j] += u * xrow[j];
                    }
                }
            }
            vec![gx, gw, gb]
        }),
    ))
}

// ---------------------------------------------------------------------------
// Max-norm projection
// ---------------------------------------------------------------------------

/// Rescale every contiguous group of `group_len` values whose L2 norm
/// exceeds `limit` down to exactly `limit`. Conv filters group per output
/// filter, FC weights per output row.
pub fn max_norm_project(weights: &Tensor, limit: f64, group_len: usize) {
    assert!(limit > 0.0 && group_len > 0);
    weights.update_data(|data| {
        debug_assert_eq!(data.len() % group_len, 0);
        for group in data.chunks_mut(group_len) {
            let norm = group.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > limit {
                let scale = limit / norm;
                for v in group {
                    *v *= scale;
                }
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Row softmax of raw logit data.
pub fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, orow) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut z = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        for o in orow.iter_mut() {
            *o /= z;
        }
    }
    out
}

/// Mean negative log-likelihood of the labels under row-softmax of the
/// logits, computed with max-subtraction stabilization.
pub fn softmax_nll_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let shape = logits.shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "softmax_nll",
            lhs: shape,
            rhs: vec![labels.len()],
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    for &y in labels {
        if y >= classes {
            return Err(Error::LabelOutOfRange {
                label: y as i64,
                classes,
            });
        }
    }
    let zd = logits.data();
    let probs = softmax_rows(&zd, classes);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &zd[i * classes..(i + 1) * classes];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    drop(zd);
    let loss = total / batch as f64;

    let labels = labels.to_vec();
    Ok(Tensor::from_op(
        vec![loss],
        vec![],
        vec![logits.clone()],
        Box::new(move |up| {
            let u = up[0] / batch as f64;
            let mut g = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                g[i * classes + y] -= 1.0;
            }
            for v in &mut g {
                *v *= u;
            }
            vec![g]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn conv_params(filters: usize, channels: usize, m: usize, w: Vec<f64>, b: Vec<f64>) -> DepthwiseConv {
        DepthwiseConv {
            weights: Tensor::leaf(w, vec![filters, 1, channels, 1]),
            bias: Tensor::leaf(b, vec![filters]),
            depth_multiplier: m,
            max_norm: 2.0,
        }
    }

    #[test]
    fn conv_one_hot_selects_channel() {
        // m=1, weight one-hot on channel 3: output equals that channel.
        let (views, c, t) = (2usize, 5usize, 7usize);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::leaf(rand_vec(&mut rng, views * c * t), vec![1, views, c, t]);
        let mut w = vec![0.0; views * c];
        w[3] = 1.0; // filter 0 (view 0), channel 3
        w[c + 3] = 1.0; // filter 1 (view 1), channel 3
        let conv = conv_params(views, c, 1, w, vec![0.0; views]);
        let y = depthwise_conv_forward(&x, &conv).unwrap();
        let xd = x.data();
        let yd = y.data();
        for v in 0..views {
            for i in 0..t {
                assert_eq!(yd[v * t + i], xd[(v * c + 3) * t + i]);
            }
        }
    }

    #[test]
    fn conv_zero_input_yields_bias() {
        let (views, c, t, m) = (2usize, 3usize, 4usize, 2usize);
        let bias: Vec<f64> = (0..m * views).map(|j| j as f64 * 0.5).collect();
        let conv = conv_params(m * views, c, m, vec![0.3; m * views * c], bias.clone());
        let x = Tensor::zeros(vec![1, views, c, t]);
        let y = depthwise_conv_forward(&x, &conv).unwrap();
        let yd = y.data();
        for j in 0..m * views {
            for i in 0..t {
                assert_eq!(yd[j * t + i], bias[j]);
            }
        }
    }

    #[test]
    fn conv_matches_triple_loop_oracle() {
        let (views, c, t, m, batch) = (2usize, 3usize, 5usize, 2usize, 2usize);
        let filters = m * views;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = rand_vec(&mut rng, batch * views * c * t);
        let wv = rand_vec(&mut rng, filters * c);
        let bv = rand_vec(&mut rng, filters);
        let x = Tensor::leaf(xv.clone(), vec![batch, views, c, t]);
        let conv = conv_params(filters, c, m, wv.clone(), bv.clone());
        let y = depthwise_conv_forward(&x, &conv).unwrap();
        let yd = y.data();
        for b in 0..batch {
            for j in 0..filters {
                for i in 0..t {
                    let v = j / m;
                    let mut expect = bv[j];
                    for ch in 0..c {
                        expect += wv[j * c + ch] * xv[((b * views + v) * c + ch) * t + i];
                    }
                    let got = yd[(b * filters + j) * t + i];
                    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let (views, c, t, m, batch) = (2usize, 3usize, 4usize, 2usize, 2usize);
        let filters = m * views;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xv = rand_vec(&mut rng, batch * views * c * t);
        let wv = rand_vec(&mut rng, filters * c);
        let bv = rand_vec(&mut rng, filters);

        // With respect to weights.
        let r = gradient_check(
            |w| {
                let conv = DepthwiseConv {
                    weights: w.reshape(vec![filters, 1, c, 1])?,
                    bias: Tensor::leaf(bv.clone(), vec![filters]),
                    depth_multiplier: m,
                    max_norm: 2.0,
                };
                let x = Tensor::leaf(xv.clone(), vec![batch, views, c, t]);
                Ok(depthwise_conv_forward(&x, &conv)?
                    .pow_scalar(2.0)
                    .sum_all())
            },
            &Tensor::leaf(wv.clone(), vec![filters * c]),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "weights: {}", r.max_rel_error);

        // With respect to the input.
        let r = gradient_check(
            |x| {
                let conv = conv_params(filters, c, m, wv.clone(), bv.clone());
                Ok(depthwise_conv_forward(&x.reshape(vec![batch, views, c, t])?, &conv)?
                    .pow_scalar(2.0)
                    .sum_all())
            },
            &Tensor::leaf(xv.clone(), vec![batch * views * c * t]),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "input: {}", r.max_rel_error);
    }

    #[test]
    fn conv_gradient_respects_depthwise_structure() {
        // Loss through filter j only: input gradient confined to view j/m.
        let (views, c, t, m) = (3usize, 2usize, 4usize, 2usize);
        let filters = m * views;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::leaf(rand_vec(&mut rng, views * c * t), vec![1, views, c, t]);
        let conv = conv_params(
            filters,
            c,
            m,
            rand_vec(&mut rng, filters * c),
            vec![0.0; filters],
        );
        let y = depthwise_conv_forward(&x, &conv).unwrap();
        let j = 3usize; // belongs to view 1
        let mask: Vec<f64> = (0..filters)
            .flat_map(|f| vec![if f == j { 1.0 } else { 0.0 }; t])
            .collect();
        let masked = y
            .mul(&Tensor::leaf(mask, vec![1, filters, 1, t]))
            .unwrap();
        masked.sum_all().backward().unwrap();
        let gx = x.grad().unwrap();
        for v in 0..views {
            let slice = &gx[v * c * t..(v + 1) * c * t];
            let nonzero = slice.iter().any(|&g| g != 0.0);
            assert_eq!(nonzero, v == j / m, "view {v}");
        }
    }

    #[test]
    fn batchnorm_train_standardizes_each_feature() {
        let (batch, f, t) = (4usize, 3usize, 10usize);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xv: Vec<f64> = (0..batch * f * t).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let x = Tensor::leaf(xv, vec![batch, f, 1, t]);
        let bn = BatchNorm::new(f, 0.1, 1e-5);
        let y = batchnorm(&x, &bn, Mode::Train).unwrap();
        let yd = y.data();
        let n = (batch * t) as f64;
        for feat in 0..f {
            let mut s = 0.0;
            let mut sq = 0.0;
            for b in 0..batch {
                for i in 0..t {
                    let v = yd[(b * f + feat) * t + i];
                    s += v;
                    sq += v * v;
                }
            }
            let mean = s / n;
            let var = sq / n - mean * mean;
            assert!(mean.abs() <= 1e-9, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "var {var}");
        }
    }

    #[test]
    fn batchnorm_gamma_beta_scale_and_shift() {
        let (batch, f, t) = (8usize, 2usize, 16usize);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xv: Vec<f64> = (0..batch * f * t).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let x = Tensor::leaf(xv, vec![batch, f, 1, t]);
        let bn = BatchNorm::new(f, 0.1, 1e-12);
        bn.gamma.set_data(&vec![2.0; f]);
        bn.beta.set_data(&vec![3.0; f]);
        let y = batchnorm(&x, &bn, Mode::Train).unwrap();
        let yd = y.data();
        let n = (batch * t) as f64;
        for feat in 0..f {
            let mut s = 0.0;
            let mut sq = 0.0;
            for b in 0..batch {
                for i in 0..t {
                    let v = yd[(b * f + feat) * t + i];
                    s += v;
                    sq += v * v;
                }
            }
            let mean = s / n;
            let std = (sq / n - mean * mean).sqrt();
            assert!((mean - 3.0).abs() < 1e-6, "mean {mean}");
            assert!((std - 2.0).abs() < 1e-6, "std {std}");
        }
    }

    #[test]
    fn batchnorm_eval_with_unit_stats_is_identity() {
        let x = Tensor::leaf(vec![0.4, -1.0, 2.5, 0.0], vec![1, 2, 1, 2]);
        let bn = BatchNorm::new(2, 0.1, 1e-12);
        let y = batchnorm(&x, &bn, Mode::Eval).unwrap();
        for (a, b) in x.data().iter().zip(y.data().iter()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn batchnorm_single_value_in_train_mode_errors() {
        let x = Tensor::leaf(vec![1.0], vec![1, 1, 1, 1]);
        let bn = BatchNorm::new(1, 0.1, 1e-5);
        assert!(batchnorm(&x, &bn, Mode::Train).is_err());
    }

    #[test]
    fn batchnorm_train_gradients_match_finite_differences() {
        let (batch, f, t) = (3usize, 2usize, 4usize);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xv = rand_vec(&mut rng, batch * f * t);
        let r = gradient_check(
            |x| {
                let bn = BatchNorm::new(f, 0.1, 1e-5);
                bn.gamma.set_data(&[1.3, 0.7]);
                bn.beta.set_data(&[0.2, -0.4]);
                let y = batchnorm(&x.reshape(vec![batch, f, 1, t])?, &bn, Mode::Train)?;
                // Nonlinear readout so the mean/var paths matter.
                Ok(y.pow_scalar(3.0).sum_all())
            },
            &Tensor::leaf(xv, vec![batch * f * t]),
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.pass, "max rel err {}", r.max_rel_error);
    }

    #[test]
    fn swish_values_and_gradient() {
        let z = activation(&Tensor::scalar(0.0), Activation::Swish);
        assert_eq!(z.item(), 0.0);
        let big = activation(&Tensor::scalar(20.0), Activation::Swish).item();
        assert!((19.99..=20.0).contains(&big), "{big}");

        let x = Tensor::leaf(vec![-2.0, -0.3, 0.0, 0.7, 3.0], vec![5]);
        let r = gradient_check(
            |x| Ok(activation(x, Activation::Swish).sum_all()),
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "{}", r.max_rel_error);
    }

    #[test]
    fn other_activations_gradcheck() {
        // Stay away from the kink at 0 for relu/leaky.
        let x = Tensor::leaf(vec![-2.0, -0.5, 0.4, 1.7], vec![4]);
        for kind in [Activation::Elu, Activation::Relu, Activation::LeakyRelu] {
            let r = gradient_check(|x| Ok(activation(x, kind).sum_all()), &x, 1e-5, 1e-6).unwrap();
            assert!(r.pass, "{kind:?}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn variance_layer_values() {
        let x = Tensor::leaf(vec![2.0, 2.0, 2.0, 2.0], vec![1, 1, 1, 4]);
        assert_eq!(variance_layer(&x, 4).unwrap().item(), 0.0);

        let x = Tensor::leaf(vec![1.0, -1.0, 1.0, -1.0], vec![1, 1, 1, 4]);
        assert_eq!(variance_layer(&x, 4).unwrap().item(), 1.0);
    }

    #[test]
    fn variance_layer_output_length() {
        let x = Tensor::zeros(vec![1, 2, 1, 1000]);
        let y = variance_layer(&x, 250).unwrap();
        assert_eq!(y.shape(), &[1, 2, 1, 4]);
    }

    #[test]
    fn variance_layer_rejects_non_divisor() {
        let x = Tensor::zeros(vec![1, 1, 1, 10]);
        assert!(variance_layer(&x, 3).is_err());
    }

    #[test]
    fn variance_backward_closed_form() {
        let x = Tensor::leaf(vec![1.0, -1.0, 1.0, -1.0], vec![1, 1, 1, 4]);
        let y = variance_layer(&x, 4).unwrap();
        y.sum_all().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.5, -0.5, 0.5, -0.5]);

        let c = Tensor::leaf(vec![3.0; 4], vec![1, 1, 1, 4]);
        let y = variance_layer(&c, 4).unwrap();
        y.sum_all().backward().unwrap();
        assert_eq!(c.grad().unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn variance_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xv = rand_vec(&mut rng, 2 * 12);
        let r = gradient_check(
            |x| {
                let y = variance_layer(&x.reshape(vec![1, 2, 1, 12])?, 4)?;
                Ok(y.pow_scalar(2.0).sum_all())
            },
            &Tensor::leaf(xv, vec![24]),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "{}", r.max_rel_error);
    }

    #[test]
    fn temporal_dispatch_values() {
        let x = Tensor::leaf(vec![1.0, -1.0, 1.0, -1.0], vec![1, 1, 1, 4]);
        assert_eq!(temporal_layer(&x, TemporalKind::Average, 4).unwrap().item(), 0.0);
        assert_eq!(temporal_layer(&x, TemporalKind::Variance, 4).unwrap().item(), 1.0);

        let y = temporal_layer(&x, TemporalKind::Max, 4).unwrap();
        assert_eq!(y.item(), 1.0);
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn log_activation_values_and_gradient() {
        assert_eq!(log_activation(&Tensor::scalar(1.0)).item(), 0.0);
        let floor = log_activation(&Tensor::scalar(0.0)).item();
        assert!((floor - (1e-6f64).ln()).abs() < 1e-12);
        assert!((floor + 13.8155).abs() < 1e-3);

        let x = Tensor::scalar(0.5);
        log_activation(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);

        // Zero gradient below the floor.
        let x = Tensor::scalar(-1.0);
        log_activation(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn linear_identity_and_bias() {
        let n = 3usize;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let x = Tensor::leaf(vec![0.5, -1.0, 2.0], vec![1, n]);
        let y = linear_forward(
            &x,
            &Tensor::leaf(w, vec![n, n]),
            &Tensor::leaf(vec![0.0; n], vec![n]),
        )
        .unwrap();
        assert_eq!(y.to_vec(), x.to_vec());

        let b = vec![1.0, 2.0];
        let y = linear_forward(
            &Tensor::zeros(vec![1, 4]),
            &Tensor::leaf(vec![0.1; 8], vec![2, 4]),
            &Tensor::leaf(b.clone(), vec![2]),
        )
        .unwrap();
        assert_eq!(y.to_vec(), b);
    }

    #[test]
    fn linear_matches_loop_oracle() {
        let (batch, d, c) = (2usize, 4usize, 3usize);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xv = rand_vec(&mut rng, batch * d);
        let wv = rand_vec(&mut rng, c * d);
        let bv = rand_vec(&mut rng, c);
        let y = linear_forward(
            &Tensor::leaf(xv.clone(), vec![batch, d]),
            &Tensor::leaf(wv.clone(), vec![c, d]),
            &Tensor::leaf(bv.clone(), vec![c]),
        )
        .unwrap();
        let yd = y.data();
        for i in 0..batch {
            for k in 0..c {
                let mut expect = bv[k];
                for j in 0..d {
                    expect += wv[k * d + j] * xv[i * d + j];
                }
                assert!((yd[i * c + k] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn max_norm_projection_behaviour() {
        let w = Tensor::leaf(vec![0.6, 0.8, 3.0, 4.0], vec![2, 2]);
        max_norm_project(&w, 2.0, 2);
        let d = w.to_vec();
        assert_eq!(&d[..2], &[0.6, 0.8]); // norm 1.0, untouched
        assert!((d[2] - 1.2).abs() < 1e-12 && (d[3] - 1.6).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = Tensor::leaf(
            (0..30).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            vec![6, 5],
        );
        max_norm_project(&w, 0.5, 5);
        for group in w.to_vec().chunks(5) {
            let norm = group.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm <= 0.5 + 1e-12, "norm {norm}");
        }
    }

    #[test]
    fn nll_uniform_logits_is_ln_classes() {
        let logits = Tensor::zeros(vec![2, 4]);
        let loss = softmax_nll_loss(&logits, &[0, 3]).unwrap();
        assert!((loss.item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_saturated_logit_is_stable() {
        let logits = Tensor::leaf(vec![1000.0, 0.0, 0.0, 0.0], vec![1, 4]);
        let loss = softmax_nll_loss(&logits, &[0]).unwrap();
        assert!(loss.item().is_finite());
        assert!(loss.item() < 1e-9);
    }

    #[test]
    fn nll_rejects_out_of_range_label() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(matches!(
            softmax_nll_loss(&logits, &[3]),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
    }

    #[test]
    fn nll_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let zv = rand_vec(&mut rng, 3 * 4);
        let r = gradient_check(
            |z| softmax_nll_loss(&z.reshape(vec![3, 4])?, &[1, 0, 3]),
            &Tensor::leaf(zv, vec![12]),
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(r.pass, "{}", r.max_rel_error);
    }
}
