//! Binary-constrained training.
//!
//! Full-precision reference weights are held for every layer; binary layers
//! forward with their sign-binarized copies and receive gradients taken at
//! the binarized values (straight-through). The sign activation passes
//! gradients inside |x| <= 1 and blocks them outside; reference weights of
//! binary layers are clipped back into [-1, 1] after every optimizer step.

use crate::data::{bitsliced_batch, full_precision_batch, LabeledDataset};
use crate::error::{Error, Result};
use crate::network::{
    conv_weights_gemm_order, flatten_channel_major, maxpool_forward, ArchitectureSpec,
    InferenceModel, LayerInfo, LayerParams, LayerSpec, ParamStore, Precision, BN_EPS,
};
use crate::rng::derive_rng;
use crate::tensor::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, DenseTensor};
use rand::seq::SliceRandom;
use rand::Rng;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Regularization weight of the binary/non-binary weight penalty.
    pub lambda: f64,
    pub learning_rate: f64,
    /// Multiplicative learning-rate decay applied per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-5,
            learning_rate: 1e-3,
            lr_decay: 0.97,
            epochs: 10,
            batch_size: 128,
            seed: 0,
        }
    }
}

/// How raw dataset images are turned into network inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InputMode {
    /// int2b expansion, optionally with the given slices pruned.
    BitSliced { prune: Vec<usize> },
    /// Pixel values scaled to [0, 1].
    FullPrecision,
}

impl InputMode {
    pub fn batch(
        &self,
        ds: &LabeledDataset,
        indices: &[usize],
    ) -> Result<(DenseTensor, Vec<usize>)> {
        match self {
            InputMode::BitSliced { prune } => bitsliced_batch(ds, indices, None, prune),
            InputMode::FullPrecision => full_precision_batch(ds, indices),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Moments { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

#[derive(Debug, Clone)]
enum LayerMoments {
    Weights(Moments),
    Bn { gamma: Moments, beta: Moments },
    None,
}

/// Mutable training state: reference weights, batchnorm statistics,
/// optimizer moments, step/epoch counters.
pub struct TrainState {
    pub params: ParamStore,
    moments: Vec<LayerMoments>,
    pub step: u64,
    pub epoch: usize,
    pub seed: u64,
}

impl TrainState {
    pub fn new(arch: &ArchitectureSpec, seed: u64) -> Result<Self> {
        let params = init_params(arch, seed)?;
        let moments = params
            .layers
            .iter()
            .map(|p| match p {
                LayerParams::Conv { weights } | LayerParams::Dense { weights } => {
                    LayerMoments::Weights(Moments::new(weights.len()))
                }
                LayerParams::BatchNorm { scale, .. } => LayerMoments::Bn {
                    gamma: Moments::new(scale.len()),
                    beta: Moments::new(scale.len()),
                },
                LayerParams::None => LayerMoments::None,
            })
            .collect();
        Ok(TrainState {
            params,
            moments,
            step: 0,
            epoch: 0,
            seed,
        })
    }
}

/// Glorot-uniform initialization; weights are materialized as f32 so the
/// in-memory values survive checkpoint serialization bit-exactly.
pub fn init_params(arch: &ArchitectureSpec, seed: u64) -> Result<ParamStore> {
    arch.validate()?;
    let mut rng = derive_rng(seed, 0x11117);
    let layers = arch
        .layers
        .iter()
        .map(|l| match *l {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let limit = (6.0 / ((in_channels + out_channels) * kernel * kernel) as f64).sqrt();
                LayerParams::Conv {
                    weights: (0..l.weight_count())
                        .map(|_| (rng.random_range(-limit..limit)) as f32)
                        .collect(),
                }
            }
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => {
                let limit = (6.0 / (in_features + out_features) as f64).sqrt();
                LayerParams::Dense {
                    weights: (0..l.weight_count())
                        .map(|_| (rng.random_range(-limit..limit)) as f32)
                        .collect(),
                }
            }
            LayerSpec::BatchNorm { channels } => LayerParams::BatchNorm {
                scale: vec![1.0; channels],
                shift: vec![0.0; channels],
                mean: vec![0.0; channels],
                var: vec![1.0; channels],
            },
            _ => LayerParams::None,
        })
        .collect();
    Ok(ParamStore { layers })
}

/// One-vs-all squared hinge loss, mean over the batch, plus its gradient
/// with respect to the logits.
pub fn hinge_loss(logits: &DenseTensor, labels: &[usize]) -> Result<(f64, DenseTensor)> {
    let (batch, classes) = (logits.shape[0], logits.shape[1]);
    if batch != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{batch} logit rows vs {} labels",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0f64; logits.values.len()];
    for (b, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        let row = &logits.values[b * classes..(b + 1) * classes];
        let zy = row[y];
        for j in 0..classes {
            if j == y {
                continue;
            }
            let margin = 1.0 - (zy - row[j]);
            if margin > 0.0 {
                loss += margin * margin;
                grad[b * classes + j] += 2.0 * margin;
                grad[b * classes + y] -= 2.0 * margin;
            }
        }
    }
    let scale = 1.0 / batch as f64;
    loss *= scale;
    for g in grad.iter_mut() {
        *g *= scale;
    }
    Ok((loss, DenseTensor::from_vec(&[batch, classes], grad)?))
}

/// The two regularizer terms: elementwise mean of (1 - w^2) over all
/// binary-layer weights, and elementwise mean of w^2 over the first
/// (non-binary) layer's weights.
pub fn regularizer_terms(arch: &ArchitectureSpec, params: &ParamStore) -> (f64, f64) {
    let mut bin_sum = 0.0;
    let mut bin_n = 0usize;
    let mut first_sum = 0.0;
    let mut first_n = 0usize;
    for (spec, p) in arch.layers.iter().zip(&params.layers) {
        let weights = match p {
            LayerParams::Conv { weights } | LayerParams::Dense { weights } => weights,
            _ => continue,
        };
        match spec.precision() {
            Some(Precision::Binary) => {
                bin_sum += weights.iter().map(|&w| 1.0 - (w as f64) * (w as f64)).sum::<f64>();
                bin_n += weights.len();
            }
            Some(Precision::Full) => {
                first_sum += weights.iter().map(|&w| (w as f64) * (w as f64)).sum::<f64>();
                first_n += weights.len();
            }
            None => {}
        }
    }
    (
        if bin_n > 0 { bin_sum / bin_n as f64 } else { 0.0 },
        if first_n > 0 { first_sum / first_n as f64 } else { 0.0 },
    )
}

/// Training objective J = L + lambda * (binary term + first-layer L2 term).
pub fn objective(loss: f64, arch: &ArchitectureSpec, params: &ParamStore, lambda: f64) -> f64 {
    let (bin, first) = regularizer_terms(arch, params);
    loss + lambda * (bin + first)
}

struct Cache {
    /// im2col patches of the conv input (conv layers).
    cols: Option<DenseTensor>,
    /// Channel-major flattened input (dense layers).
    flat: Option<Vec<f64>>,
    /// (xhat, inv_std) per element / per channel (batchnorm).
    bn: Option<(Vec<f64>, Vec<f64>)>,
    /// Pre-activation values (sign layers).
    pre: Option<Vec<f64>>,
    /// Winner indices (maxpool).
    pool_arg: Option<Vec<usize>>,
}

impl Cache {
    fn empty() -> Self {
        Cache {
            cols: None,
            flat: None,
            bn: None,
            pre: None,
            pool_arg: None,
        }
    }
}

fn expand_weights(spec: &LayerSpec, weights: &[f32]) -> Vec<f64> {
    match *spec {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            precision,
            ..
        } => {
            let mut w = conv_weights_gemm_order(weights, out_channels, in_channels, kernel);
            if precision == Precision::Binary {
                for v in w.iter_mut() {
                    *v = if *v >= 0.0 { 1.0 } else { -1.0 };
                }
            }
            w
        }
        LayerSpec::Dense { precision, .. } => weights
            .iter()
            .map(|&v| {
                if precision == Precision::Binary {
                    if v >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                } else {
                    v as f64
                }
            })
            .collect(),
        _ => unreachable!(),
    }
}

/// Training-mode forward pass. Caches everything the backward pass needs.
/// When `update_running` is set, batchnorm running statistics are refreshed.
fn forward_train(
    arch: &ArchitectureSpec,
    infos: &[LayerInfo],
    params: &mut ParamStore,
    input: &DenseTensor,
    update_running: bool,
) -> Result<(Vec<Cache>, DenseTensor)> {
    let batch = input.shape[0];
    let mut act = input.values.clone();
    let mut caches = Vec::with_capacity(arch.layers.len());
    for (i, (spec, info)) in arch.layers.iter().zip(infos).enumerate() {
        let (h, w, c) = info.in_shape;
        let mut cache = Cache::empty();
        act = match spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                padding,
                ..
            } => {
                let weights = match &params.layers[i] {
                    LayerParams::Conv { weights } => weights,
                    _ => return Err(Error::MissingParams(i)),
                };
                let wg = expand_weights(spec, weights);
                let pad_value = if info.input_binary { -1.0 } else { 0.0 };
                let cols = im2col(&act, batch, h, w, c, *kernel, *padding, pad_value)?;
                let out = gemm_nt(&cols.values, cols.shape[0], cols.shape[1], &wg, *out_channels);
                cache.cols = Some(cols);
                out
            }
            LayerSpec::Dense { in_features, out_features, .. } => {
                let weights = match &params.layers[i] {
                    LayerParams::Dense { weights } => weights,
                    _ => return Err(Error::MissingParams(i)),
                };
                let wg = expand_weights(spec, weights);
                let flat = flatten_channel_major(&act, batch, h, w, c);
                let out = gemm_nt(&flat, batch, *in_features, &wg, *out_features);
                cache.flat = Some(flat);
                out
            }
            LayerSpec::BatchNorm { channels } => {
                let c = *channels;
                let n = act.len() / c;
                let (mut mean, mut var) = (vec![0.0f64; c], vec![0.0f64; c]);
                for row in act.chunks(c) {
                    for (ch, &x) in row.iter().enumerate() {
                        mean[ch] += x;
                    }
                }
                for m in mean.iter_mut() {
                    *m /= n as f64;
                }
                for row in act.chunks(c) {
                    for (ch, &x) in row.iter().enumerate() {
                        let d = x - mean[ch];
                        var[ch] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= n as f64;
                }
                let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let (scale, shift) = match &mut params.layers[i] {
                    LayerParams::BatchNorm { scale, shift, mean: rm, var: rv } => {
                        if update_running {
                            for ch in 0..c {
                                rm[ch] = (BN_MOMENTUM * rm[ch] as f64
                                    + (1.0 - BN_MOMENTUM) * mean[ch]) as f32;
                                rv[ch] = (BN_MOMENTUM * rv[ch] as f64
                                    + (1.0 - BN_MOMENTUM) * var[ch]) as f32;
                            }
                        }
                        (scale.clone(), shift.clone())
                    }
                    _ => return Err(Error::MissingParams(i)),
                };
                let mut xhat = act;
                let mut out = vec![0.0f64; xhat.len()];
                for (row, orow) in xhat.chunks_mut(c).zip(out.chunks_mut(c)) {
                    for ch in 0..c {
                        row[ch] = (row[ch] - mean[ch]) * inv_std[ch];
                        orow[ch] = scale[ch] as f64 * row[ch] + shift[ch] as f64;
                    }
                }
                cache.bn = Some((xhat, inv_std));
                out
            }
            LayerSpec::MaxPool { window } => {
                let (out, arg) = maxpool_forward(&act, batch, h, w, c, *window);
                cache.pool_arg = Some(arg);
                out
            }
            LayerSpec::SignActivation => {
                let out: Vec<f64> = act
                    .iter()
                    .map(|&x| if x >= 0.0 { 1.0 } else { -1.0 })
                    .collect();
                cache.pre = Some(act);
                out
            }
        };
        caches.push(cache);
    }
    let classes = infos.last().map(|i| i.out_shape.2).unwrap_or(0);
    let logits = DenseTensor::from_vec(&[batch, classes], act)?;
    Ok((caches, logits))
}

/// Per-layer parameter gradients.
#[derive(Debug, Clone)]
pub enum LayerGrads {
    /// Canonical weight order (conv: out,in,kh,kw; dense: out,in).
    Weights(Vec<f64>),
    Bn { gamma: Vec<f64>, beta: Vec<f64> },
    None,
}

fn conv_grads_canonical(grad_gemm: &[f64], out_c: usize, in_c: usize, kernel: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; grad_gemm.len()];
    let patch = kernel * kernel * in_c;
    for o in 0..out_c {
        for ci in 0..in_c {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let dst = ((o * in_c + ci) * kernel + ky) * kernel + kx;
                    let src = o * patch + (ky * kernel + kx) * in_c + ci;
                    out[dst] = grad_gemm[src];
                }
            }
        }
    }
    out
}

fn unflatten_channel_major(
    flat: &[f64],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
) -> Vec<f64> {
    if h == 1 && w == 1 {
        return flat.to_vec();
    }
    let mut out = vec![0.0f64; flat.len()];
    let per = h * w * c;
    for b in 0..batch {
        let src = &flat[b * per..(b + 1) * per];
        let dst = &mut out[b * per..(b + 1) * per];
        let mut k = 0;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    dst[(y * w + x) * c + ch] = src[k];
                    k += 1;
                }
            }
        }
    }
    out
}

/// Backward pass through the cached forward. Gradients with respect to
/// binary weights are evaluated at the binarized values; the sign activation
/// applies the straight-through window 1{|x| <= 1}.
fn backward_pass(
    arch: &ArchitectureSpec,
    infos: &[LayerInfo],
    params: &ParamStore,
    caches: &[Cache],
    dlogits: &DenseTensor,
) -> Result<Vec<LayerGrads>> {
    let batch = dlogits.shape[0];
    let mut grads: Vec<LayerGrads> = vec![LayerGrads::None; arch.layers.len()];
    let mut dact = dlogits.values.clone();
    for (i, (spec, info)) in arch.layers.iter().zip(infos).enumerate().rev() {
        let cache = &caches[i];
        let (h, w, c) = info.in_shape;
        dact = match spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                padding,
                ..
            } => {
                let weights = match &params.layers[i] {
                    LayerParams::Conv { weights } => weights,
                    _ => return Err(Error::MissingParams(i)),
                };
                let wg = expand_weights(spec, weights);
                let cols = cache.cols.as_ref().expect("conv cache");
                let rows = cols.shape[0];
                let patch = cols.shape[1];
                let dw_gemm = gemm_tn(&dact, rows, *out_channels, &cols.values, patch);
                grads[i] = LayerGrads::Weights(conv_grads_canonical(
                    &dw_gemm,
                    *out_channels,
                    *in_channels,
                    *kernel,
                ));
                let dcols = gemm_nn(&dact, rows, *out_channels, &wg, patch);
                col2im(&dcols, batch, h, w, c, *kernel, *padding)
            }
            LayerSpec::Dense { in_features, out_features, .. } => {
                let weights = match &params.layers[i] {
                    LayerParams::Dense { weights } => weights,
                    _ => return Err(Error::MissingParams(i)),
                };
                let wg = expand_weights(spec, weights);
                let flat = cache.flat.as_ref().expect("dense cache");
                grads[i] = LayerGrads::Weights(gemm_tn(&dact, batch, *out_features, flat, *in_features));
                let dflat = gemm_nn(&dact, batch, *out_features, &wg, *in_features);
                unflatten_channel_major(&dflat, batch, h, w, c)
            }
            LayerSpec::BatchNorm { channels } => {
                let c = *channels;
                let (xhat, inv_std) = cache.bn.as_ref().expect("bn cache");
                let n = dact.len() / c;
                let scale = match &params.layers[i] {
                    LayerParams::BatchNorm { scale, .. } => scale,
                    _ => return Err(Error::MissingParams(i)),
                };
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut sum_dxhat = vec![0.0f64; c];
                let mut sum_dxhat_xhat = vec![0.0f64; c];
                for (drow, xrow) in dact.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        dgamma[ch] += drow[ch] * xrow[ch];
                        dbeta[ch] += drow[ch];
                        let dxh = drow[ch] * scale[ch] as f64;
                        sum_dxhat[ch] += dxh;
                        sum_dxhat_xhat[ch] += dxh * xrow[ch];
                    }
                }
                let mut dx = vec![0.0f64; dact.len()];
                let nf = n as f64;
                for ((drow, xrow), dxrow) in
                    dact.chunks(c).zip(xhat.chunks(c)).zip(dx.chunks_mut(c))
                {
                    for ch in 0..c {
                        let dxh = drow[ch] * scale[ch] as f64;
                        dxrow[ch] = inv_std[ch] / nf
                            * (nf * dxh - sum_dxhat[ch] - xrow[ch] * sum_dxhat_xhat[ch]);
                    }
                }
                grads[i] = LayerGrads::Bn { gamma: dgamma, beta: dbeta };
                dx
            }
            LayerSpec::MaxPool { .. } => {
                let arg = cache.pool_arg.as_ref().expect("pool cache");
                let mut dx = vec![0.0f64; batch * h * w * c];
                for (&src, &g) in arg.iter().zip(dact.iter()) {
                    dx[src] += g;
                }
                dx
            }
            LayerSpec::SignActivation => {
                let pre = cache.pre.as_ref().expect("sign cache");
                pre.iter()
                    .zip(dact.iter())
                    .map(|(&x, &g)| if x.abs() <= 1.0 { g } else { 0.0 })
                    .collect()
            }
        };
    }
    Ok(grads)
}

/// Adds the gradient of the lambda-scaled regularizer onto loss gradients.
fn add_regularizer_grads(
    arch: &ArchitectureSpec,
    params: &ParamStore,
    grads: &mut [LayerGrads],
    lambda: f64,
) {
    let mut bin_n = 0usize;
    let mut first_n = 0usize;
    for (spec, p) in arch.layers.iter().zip(&params.layers) {
        if let LayerParams::Conv { weights } | LayerParams::Dense { weights } = p {
            match spec.precision() {
                Some(Precision::Binary) => bin_n += weights.len(),
                Some(Precision::Full) => first_n += weights.len(),
                None => {}
            }
        }
    }
    for ((spec, p), g) in arch.layers.iter().zip(&params.layers).zip(grads.iter_mut()) {
        let (weights, dw) = match (p, g) {
            (
                LayerParams::Conv { weights } | LayerParams::Dense { weights },
                LayerGrads::Weights(dw),
            ) => (weights, dw),
            _ => continue,
        };
        match spec.precision() {
            // d/dw of lambda * mean(1 - w^2) = -2 lambda w / count
            Some(Precision::Binary) => {
                let k = -2.0 * lambda / bin_n as f64;
                for (d, &w) in dw.iter_mut().zip(weights) {
                    *d += k * w as f64;
                }
            }
            // d/dw of lambda * mean(w^2) = 2 lambda w / count
            Some(Precision::Full) => {
                let k = 2.0 * lambda / first_n as f64;
                for (d, &w) in dw.iter_mut().zip(weights) {
                    *d += k * w as f64;
                }
            }
            None => {}
        }
    }
}

/// Forward + loss + backward over one prepared batch. Returns the batch
/// objective value and per-layer gradients (regularizer included).
pub fn backward(
    arch: &ArchitectureSpec,
    state: &mut TrainState,
    inputs: &DenseTensor,
    labels: &[usize],
    lambda: f64,
) -> Result<(f64, Vec<LayerGrads>)> {
    let infos = arch.validate()?;
    let (caches, logits) = forward_train(arch, &infos, &mut state.params, inputs, false)?;
    let (loss, dlogits) = hinge_loss(&logits, labels)?;
    let mut grads = backward_pass(arch, &infos, &state.params, &caches, &dlogits)?;
    add_regularizer_grads(arch, &state.params, &mut grads, lambda);
    Ok((objective(loss, arch, &state.params, lambda), grads))
}

/// Objective evaluated in training mode without touching running statistics;
/// the quantity finite-difference checks differentiate.
pub fn objective_at(
    arch: &ArchitectureSpec,
    params: &ParamStore,
    inputs: &DenseTensor,
    labels: &[usize],
    lambda: f64,
) -> Result<f64> {
    let infos = arch.validate()?;
    let mut scratch = params.clone();
    let (_, logits) = forward_train(arch, &infos, &mut scratch, inputs, false)?;
    let (loss, _) = hinge_loss(&logits, labels)?;
    Ok(objective(loss, arch, params, lambda))
}

fn adam_update(w: &mut [f32], g: &[f64], mom: &mut Moments, lr: f64, t: u64, clip: bool) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..w.len() {
        mom.m[i] = ADAM_BETA1 * mom.m[i] + (1.0 - ADAM_BETA1) * g[i];
        mom.v[i] = ADAM_BETA2 * mom.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
        let mhat = mom.m[i] / bc1;
        let vhat = mom.v[i] / bc2;
        let mut nw = w[i] as f64 - lr * mhat / (vhat.sqrt() + ADAM_EPS);
        if clip {
            nw = nw.clamp(-1.0, 1.0);
        }
        w[i] = nw as f32;
    }
}

/// Applies one optimizer step; binary-layer reference weights are clipped to
/// [-1, 1] afterwards.
pub fn apply_step(
    arch: &ArchitectureSpec,
    state: &mut TrainState,
    grads: &[LayerGrads],
    lr: f64,
) {
    state.step += 1;
    let t = state.step;
    for ((spec, p), (g, m)) in arch
        .layers
        .iter()
        .zip(&mut state.params.layers)
        .zip(grads.iter().zip(&mut state.moments))
    {
        match (p, g, m) {
            (
                LayerParams::Conv { weights } | LayerParams::Dense { weights },
                LayerGrads::Weights(dw),
                LayerMoments::Weights(mom),
            ) => {
                let clip = spec.precision() == Some(Precision::Binary);
                adam_update(weights, dw, mom, lr, t, clip);
            }
            (
                LayerParams::BatchNorm { scale, shift, .. },
                LayerGrads::Bn { gamma, beta },
                LayerMoments::Bn { gamma: mg, beta: mb },
            ) => {
                adam_update(scale, gamma, mg, lr, t, false);
                adam_update(shift, beta, mb, lr, t, false);
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStat {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_err: f64,
}

pub struct TrainResult {
    pub state: TrainState,
    pub history: Vec<EpochStat>,
}

/// Full training loop: shuffled minibatches, Adam with per-epoch learning
/// rate decay, weight clipping, per-epoch validation error. Deterministic
/// given the config seed.
pub fn train(
    arch: &ArchitectureSpec,
    config: &TrainConfig,
    train_ds: &LabeledDataset,
    val_ds: &LabeledDataset,
    mode: &InputMode,
) -> Result<TrainResult> {
    if train_ds.is_empty() || val_ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let infos = arch.validate()?;
    let mut state = TrainState::new(arch, config.seed)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut indices: Vec<usize> = (0..train_ds.len()).collect();
    for epoch in 0..config.epochs {
        state.epoch = epoch;
        let lr = config.learning_rate * config.lr_decay.powi(epoch as i32);
        let mut rng = derive_rng(config.seed, 0xe90c ^ epoch as u64);
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(config.batch_size) {
            let (inputs, labels) = mode.batch(train_ds, chunk)?;
            let (caches, logits) =
                forward_train(arch, &infos, &mut state.params, &inputs, true)?;
            let (loss, dlogits) = hinge_loss(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            let mut grads = backward_pass(arch, &infos, &state.params, &caches, &dlogits)?;
            add_regularizer_grads(arch, &state.params, &mut grads, config.lambda);
            apply_step(arch, &mut state, &grads, lr);
            epoch_loss += loss;
            batches += 1;
        }
        let val_err = evaluate_dataset(arch, &state.params, val_ds, mode)?;
        history.push(EpochStat {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_err,
        });
    }
    Ok(TrainResult { state, history })
}

/// Packed-inference error rate of the current parameters on a dataset.
pub fn evaluate_dataset(
    arch: &ArchitectureSpec,
    params: &ParamStore,
    ds: &LabeledDataset,
    mode: &InputMode,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model = InferenceModel::from_params(arch, params)?;
    let classes = model.class_count();
    let mut wrong = 0usize;
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(256) {
        let (inputs, labels) = mode.batch(ds, chunk)?;
        let logits = model.forward_batch(&inputs)?;
        for (row, &label) in logits.values.chunks(classes).zip(&labels) {
            if crate::network::argmax(row) != label {
                wrong += 1;
            }
        }
    }
    Ok(100.0 * wrong as f64 / ds.len() as f64)
}

/// Writes the per-epoch history as `epoch,train_loss,val_err` rows.
pub fn history_csv(history: &[EpochStat]) -> String {
    let mut out = String::from("epoch,train_loss,val_err\n");
    for h in history {
        out.push_str(&format!("{},{:.6},{:.4}\n", h.epoch, h.train_loss, h.val_err));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_bit_task;
    use crate::network::{ArchitectureSpec, LayerSpec, Precision};

    fn toy_arch() -> ArchitectureSpec {
        ArchitectureSpec {
            name: "toy".into(),
            input_shape: (3, 3, 2),
            layers: vec![
                LayerSpec::Dense { in_features: 18, out_features: 8, precision: Precision::Full },
                LayerSpec::BatchNorm { channels: 8 },
                LayerSpec::SignActivation,
                LayerSpec::Dense { in_features: 8, out_features: 3, precision: Precision::Binary },
                LayerSpec::BatchNorm { channels: 3 },
            ],
        }
    }

    fn toy_batch(seed: u64) -> (DenseTensor, Vec<usize>) {
        let ds = synth_bit_task(16, 3, 3, 2, 1, &[1], 3, seed).unwrap();
        crate::data::bitsliced_batch(&ds, &(0..16).collect::<Vec<_>>(), None, &[]).unwrap()
    }

    #[test]
    fn hinge_loss_zero_when_margins_satisfied() {
        let logits = DenseTensor::from_vec(&[1, 3], vec![3.0, 1.5, 0.0]).unwrap();
        let (loss, grad) = hinge_loss(&logits, &[0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hinge_loss_two_class_tie_is_one() {
        let logits = DenseTensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        let (loss, _) = hinge_loss(&logits, &[0]).unwrap();
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn hinge_loss_matches_scalar_reference() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(5, 0);
        let (batch, classes) = (4, 5);
        let vals: Vec<f64> = (0..batch * classes).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let logits = DenseTensor::from_vec(&[batch, classes], vals.clone()).unwrap();
        let (loss, _) = hinge_loss(&logits, &labels).unwrap();
        let mut want = 0.0;
        for b in 0..batch {
            for j in 0..classes {
                if j != labels[b] {
                    let m = (1.0 - (vals[b * classes + labels[b]] - vals[b * classes + j])).max(0.0);
                    want += m * m;
                }
            }
        }
        want /= batch as f64;
        assert!((loss - want).abs() < 1e-6);
    }

    #[test]
    fn hinge_loss_rejects_bad_label() {
        let logits = DenseTensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap();
        assert!(hinge_loss(&logits, &[2]).is_err());
    }

    #[test]
    fn regularizer_examples() {
        let arch = ArchitectureSpec {
            name: "r".into(),
            input_shape: (1, 1, 2),
            layers: vec![LayerSpec::Dense { in_features: 2, out_features: 2, precision: Precision::Binary }],
        };
        let mut params = ParamStore::zeros(&arch).unwrap();
        // all +-1 -> binary term 0
        if let LayerParams::Dense { weights } = &mut params.layers[0] {
            weights.copy_from_slice(&[1.0, -1.0, 1.0, -1.0]);
        }
        assert_eq!(regularizer_terms(&arch, &params).0, 0.0);
        // all zero -> binary term 1
        if let LayerParams::Dense { weights } = &mut params.layers[0] {
            weights.fill(0.0);
        }
        assert_eq!(regularizer_terms(&arch, &params).0, 1.0);
        // +-0.5 -> 1 - 0.25 = 0.75
        if let LayerParams::Dense { weights } = &mut params.layers[0] {
            weights.copy_from_slice(&[0.5, -0.5, 0.5, -0.5]);
        }
        assert!((regularizer_terms(&arch, &params).0 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn ste_window_masks_outside_unit_interval() {
        let arch = ArchitectureSpec {
            name: "s".into(),
            input_shape: (1, 1, 4),
            layers: vec![
                LayerSpec::Dense { in_features: 4, out_features: 4, precision: Precision::Full },
                LayerSpec::SignActivation,
                LayerSpec::Dense { in_features: 4, out_features: 2, precision: Precision::Binary },
            ],
        };
        let infos = arch.validate().unwrap();
        let mut params = ParamStore::zeros(&arch).unwrap();
        // identity first layer so pre-activations equal the input
        if let LayerParams::Dense { weights } = &mut params.layers[0] {
            for i in 0..4 {
                weights[i * 4 + i] = 1.0;
            }
        }
        let input =
            DenseTensor::from_vec(&[1, 1, 1, 4], vec![0.5, 2.0, -1.0, -3.0]).unwrap();
        let (caches, _) = forward_train(&arch, &infos, &mut params.clone(), &input, false).unwrap();
        let dlogits = DenseTensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let grads = backward_pass(&arch, &infos, &params, &caches, &dlogits).unwrap();
        // gradient reaches first-layer output o exactly where |pre[o]| <= 1
        if let LayerGrads::Weights(dw) = &grads[0] {
            let row_nonzero: Vec<bool> = (0..4)
                .map(|o| (0..4).any(|j| dw[o * 4 + j] != 0.0))
                .collect();
            assert_eq!(row_nonzero, vec![true, false, true, false]);
        } else {
            panic!("missing first-layer grads");
        }
    }

    #[test]
    fn objective_decomposition_recomputes() {
        let arch = toy_arch();
        let params = init_params(&arch, 3).unwrap();
        let (inputs, labels) = toy_batch(1);
        let lambda = 0.01;
        let j = objective_at(&arch, &params, &inputs, &labels, lambda).unwrap();
        let infos = arch.validate().unwrap();
        let (_, logits) =
            forward_train(&arch, &infos, &mut params.clone(), &inputs, false).unwrap();
        let (loss, _) = hinge_loss(&logits, &labels).unwrap();
        let (bin, first) = regularizer_terms(&arch, &params);
        let rel = ((j - loss) - lambda * (bin + first)).abs() / (j - loss).abs().max(1e-12);
        assert!(rel < 1e-6);
    }

    /// Two weighted layers, no sign activation in between: the paths from the
    /// first-layer weights and the batchnorm affine parameters to the loss are
    /// differentiable, so central differences are a valid oracle.
    fn gradcheck_arch() -> ArchitectureSpec {
        ArchitectureSpec {
            name: "gradcheck".into(),
            input_shape: (3, 3, 2),
            layers: vec![
                LayerSpec::Dense { in_features: 18, out_features: 8, precision: Precision::Full },
                LayerSpec::BatchNorm { channels: 8 },
                LayerSpec::Dense { in_features: 8, out_features: 3, precision: Precision::Binary },
                LayerSpec::BatchNorm { channels: 3 },
            ],
        }
    }

    #[test]
    fn finite_difference_gradcheck_first_layer_and_batchnorm() {
        let arch = gradcheck_arch();
        let mut state = TrainState::new(&arch, 11).unwrap();
        let (inputs, labels) = toy_batch(2);
        let lambda = 1e-3;
        let (_, grads) = backward(&arch, &mut state, &inputs, &labels, lambda).unwrap();
        let check = |analytic: f64, fd: f64| {
            let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-3, "analytic {analytic} vs fd {fd} (rel {rel})");
        };
        // first (full-precision) layer weights
        let dw = match &grads[0] {
            LayerGrads::Weights(dw) => dw.clone(),
            _ => panic!(),
        };
        for idx in [0usize, 7, 33, 100, 143] {
            let fd = fd_weight(&arch, &state.params, &inputs, &labels, lambda, 0, idx);
            check(dw[idx], fd);
        }
        // batchnorm scale/shift of layer 1
        let (dg, db) = match &grads[1] {
            LayerGrads::Bn { gamma, beta } => (gamma.clone(), beta.clone()),
            _ => panic!(),
        };
        for ch in 0..8 {
            let fd = fd_bn(&arch, &state.params, &inputs, &labels, lambda, 1, ch, true);
            check(dg[ch], fd);
            let fd = fd_bn(&arch, &state.params, &inputs, &labels, lambda, 1, ch, false);
            check(db[ch], fd);
        }
    }

    fn fd_weight(
        arch: &ArchitectureSpec,
        params: &ParamStore,
        inputs: &DenseTensor,
        labels: &[usize],
        lambda: f64,
        layer: usize,
        idx: usize,
    ) -> f64 {
        let h = 1e-3f32;
        let mut up = params.clone();
        let mut down = params.clone();
        let (wu, wd) = match (&mut up.layers[layer], &mut down.layers[layer]) {
            (LayerParams::Dense { weights: a }, LayerParams::Dense { weights: b }) => (a, b),
            _ => panic!(),
        };
        let w0 = wu[idx];
        wu[idx] = w0 + h;
        wd[idx] = w0 - h;
        let span = (wu[idx] - wd[idx]) as f64; // achieved step after f32 rounding
        let ju = objective_at(arch, &up, inputs, labels, lambda).unwrap();
        let jd = objective_at(arch, &down, inputs, labels, lambda).unwrap();
        (ju - jd) / span
    }

    fn fd_bn(
        arch: &ArchitectureSpec,
        params: &ParamStore,
        inputs: &DenseTensor,
        labels: &[usize],
        lambda: f64,
        layer: usize,
        ch: usize,
        gamma: bool,
    ) -> f64 {
        let h = 1e-3f32;
        let mut up = params.clone();
        let mut down = params.clone();
        let pick = |p: &mut ParamStore| match &mut p.layers[layer] {
            LayerParams::BatchNorm { scale, shift, .. } => {
                if gamma {
                    scale.as_mut_ptr()
                } else {
                    shift.as_mut_ptr()
                }
            }
            _ => panic!(),
        };
        let (pu, pd) = (pick(&mut up), pick(&mut down));
        // SAFETY: raw pointers index live Vec storage owned by up/down
        let span = unsafe {
            let w0 = *pu.add(ch);
            *pu.add(ch) = w0 + h;
            *pd.add(ch) = w0 - h;
            (*pu.add(ch) - *pd.add(ch)) as f64
        };
        let ju = objective_at(arch, &up, inputs, labels, lambda).unwrap();
        let jd = objective_at(arch, &down, inputs, labels, lambda).unwrap();
        (ju - jd) / span
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let arch = toy_arch();
        let ds = synth_bit_task(32, 3, 3, 2, 1, &[1], 3, 4).unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.0,
            seed: 7,
            ..TrainConfig::default()
        };
        let init = init_params(&arch, 7).unwrap();
        let result = train(&arch, &config, &ds, &ds, &InputMode::BitSliced { prune: vec![] }).unwrap();
        for (a, b) in init.layers.iter().zip(&result.state.params.layers) {
            match (a, b) {
                (LayerParams::Dense { weights: wa }, LayerParams::Dense { weights: wb }) => {
                    assert_eq!(wa, wb)
                }
                (
                    LayerParams::BatchNorm { scale: sa, shift: ha, .. },
                    LayerParams::BatchNorm { scale: sb, shift: hb, .. },
                ) => {
                    assert_eq!(sa, sb);
                    assert_eq!(ha, hb);
                }
                _ => {}
            }
        }
    }

    #[test]
    fn clip_invariant_holds_after_steps() {
        let arch = toy_arch();
        let ds = synth_bit_task(64, 3, 3, 2, 1, &[1], 3, 4).unwrap();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 0.05,
            seed: 7,
            ..TrainConfig::default()
        };
        let result = train(&arch, &config, &ds, &ds, &InputMode::BitSliced { prune: vec![] }).unwrap();
        if let LayerParams::Dense { weights } = &result.state.params.layers[3] {
            assert!(weights.iter().all(|w| (-1.0..=1.0).contains(w)));
        } else {
            panic!();
        }
    }

    #[test]
    fn same_seed_trains_identically() {
        let arch = toy_arch();
        let ds = synth_bit_task(32, 3, 3, 2, 1, &[1], 3, 4).unwrap();
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 9,
            ..TrainConfig::default()
        };
        let mode = InputMode::BitSliced { prune: vec![] };
        let a = train(&arch, &config, &ds, &ds, &mode).unwrap();
        let b = train(&arch, &config, &ds, &ds, &mode).unwrap();
        assert_eq!(a.state.params, b.state.params);
        assert_eq!(a.history, b.history);
    }
}
