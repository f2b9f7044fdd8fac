//! Layer definitions, architecture descriptors, packed forward inference and
//! the analytic network-size / GOPs cost model.

use crate::bitslice::BitSlicedTensor;
use crate::error::{Error, Result};
use crate::tensor::{
    binary_gemm, gemm_nt, im2col, im2col_packed, BitPackedMatrix, DenseTensor,
};

pub const BN_EPS: f64 = 1e-5;

/// Weight precision of a conv/dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Binary,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
        precision: Precision,
    },
    Dense {
        in_features: usize,
        out_features: usize,
        precision: Precision,
    },
    MaxPool {
        window: usize,
    },
    BatchNorm {
        channels: usize,
    },
    SignActivation,
}

impl LayerSpec {
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => in_channels * out_channels * kernel * kernel,
            LayerSpec::Dense {
                in_features,
                out_features,
                ..
            } => in_features * out_features,
            _ => 0,
        }
    }

    pub fn precision(&self) -> Option<Precision> {
        match self {
            LayerSpec::Conv { precision, .. } | LayerSpec::Dense { precision, .. } => {
                Some(*precision)
            }
            _ => None,
        }
    }
}

/// Ordered layer descriptors defining a network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub name: String,
    /// (width, height, channels) of a single input.
    pub input_shape: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

/// Per-layer shape bookkeeping produced by [`ArchitectureSpec::validate`].
#[derive(Debug, Clone)]
pub struct LayerInfo {
    /// (h, w, c) entering the layer.
    pub in_shape: (usize, usize, usize),
    /// (h, w, c) leaving the layer.
    pub out_shape: (usize, usize, usize),
    /// Whether the incoming activations are guaranteed to be in {-1,+1}.
    pub input_binary: bool,
}

impl ArchitectureSpec {
    /// Walks the layer list, checking shape compatibility and the supported
    /// kernel/padding set, and returns per-layer shape info.
    pub fn validate(&self) -> Result<Vec<LayerInfo>> {
        let (w0, h0, c0) = self.input_shape;
        if w0 == 0 || h0 == 0 || c0 == 0 {
            return Err(Error::InvalidArchitecture("zero-sized input".into()));
        }
        let mut shape = (h0, w0, c0);
        let mut binary = false;
        let mut seen_weighted = false;
        let mut infos = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let in_shape = shape;
            let input_binary = binary;
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                    precision,
                } => {
                    if in_channels != shape.2 {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {i}: conv expects {in_channels} channels, input has {}",
                            shape.2
                        )));
                    }
                    if out_channels == 0 {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {i}: conv with zero output channels"
                        )));
                    }
                    if !matches!(kernel, 1 | 3) || padding > 1 {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {i}: unsupported kernel {kernel}/padding {padding}"
                        )));
                    }
                    let oh = (shape.0 + 2 * padding).checked_sub(kernel - 1).filter(|&v| v > 0);
                    let ow = (shape.1 + 2 * padding).checked_sub(kernel - 1).filter(|&v| v > 0);
                    let (oh, ow) = match (oh, ow) {
                        (Some(a), Some(b)) => (a, b),
                        _ => {
                            return Err(Error::InvalidArchitecture(format!(
                                "layer {i}: kernel larger than padded input"
                            )))
                        }
                    };
                    if precision == Precision::Full && seen_weighted {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {i}: only the first weighted layer may be full-precision"
                        )));
                    }
                    seen_weighted = true;
                    shape = (oh, ow, out_channels);
                    binary = false;
                }
                LayerSpec::Dense {
                    in_features,
                    out_features,
                    precision,
                } => {
                    let flat = shape.0 * shape.1 * shape.2;
                    if in_features != flat {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {i}: dense expects {in_features} inputs, flatten gives {flat}"
                        )));
                    }
                    if out_features == 0 {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {i}: dense with zero outputs"
                        )));
                    }
                    if precision == Precision::Full && seen_weighted {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {i}: only the first weighted layer may be full-precision"
                        )));
                    }
                    seen_weighted = true;
                    shape = (1, 1, out_features);
                    binary = false;
                }
                LayerSpec::MaxPool { window } => {
                    if window != 2 {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {i}: only 2x2 pooling windows are supported"
                        )));
                    }
                    shape = (shape.0.div_ceil(window), shape.1.div_ceil(window), shape.2);
                }
                LayerSpec::BatchNorm { channels } => {
                    if channels != shape.2 {
                        return Err(Error::InvalidArchitecture(format!(
                            "layer {i}: batchnorm over {channels} channels, input has {}",
                            shape.2
                        )));
                    }
                    binary = false;
                }
                LayerSpec::SignActivation => {
                    binary = true;
                }
            }
            infos.push(LayerInfo {
                in_shape,
                out_shape: shape,
                input_binary,
            });
        }
        if !seen_weighted {
            return Err(Error::InvalidArchitecture("no weighted layers".into()));
        }
        Ok(infos)
    }

    /// Output class count: the width of the last dense layer.
    pub fn class_count(&self) -> Result<usize> {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Dense { out_features, .. } => Some(*out_features),
                _ => None,
            })
            .ok_or_else(|| Error::InvalidArchitecture("no dense output layer".into()))
    }

    pub fn weighted_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.weight_count() > 0).count()
    }
}

/// Parameter storage and arithmetic cost of one inference.
#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub size_bits: u64,
    /// `size_bits / 8 / 1e6` (decimal megabytes, the unit used when quoting
    /// network sizes like 1.75 MB).
    pub size_mb: f64,
    pub macs: u64,
    /// `2 * macs / 1e9`: one operation is either an addition or a
    /// multiplication, so each multiply-accumulate counts twice.
    pub gops: f64,
}

/// Analytic size/GOPs accounting. Binary weights cost 1 bit, non-binary
/// weights `nonbinary_weight_bits`; batchnorm and pooling are excluded.
pub fn cost_model(arch: &ArchitectureSpec, nonbinary_weight_bits: u64) -> Result<CostReport> {
    let infos = arch.validate()?;
    let mut size_bits = 0u64;
    let mut macs = 0u64;
    for (layer, info) in arch.layers.iter().zip(&infos) {
        let weights = layer.weight_count() as u64;
        if weights == 0 {
            continue;
        }
        let bits = match layer.precision() {
            Some(Precision::Binary) => 1,
            Some(Precision::Full) => nonbinary_weight_bits,
            None => unreachable!(),
        };
        size_bits += weights * bits;
        macs += match layer {
            LayerSpec::Conv { .. } => weights * (info.out_shape.0 * info.out_shape.1) as u64,
            _ => weights,
        };
    }
    Ok(CostReport {
        size_bits,
        size_mb: size_bits as f64 / 8.0 / 1e6,
        macs,
        gops: 2.0 * macs as f64 / 1e9,
    })
}

/// VGG-style conv ladder shared by the reference architectures: three pairs of
/// 3x3 convolutions with 2x2 pooling after each pair, then two hidden dense
/// layers and a dense classifier, batchnorm after every weighted layer.
pub fn conv_ladder(
    name: &str,
    input_shape: (usize, usize, usize),
    base_depth: usize,
    fc_width: usize,
    classes: usize,
    first_precision: Precision,
    extra_pool: bool,
) -> ArchitectureSpec {
    let (w, h, c) = input_shape;
    let d = [base_depth, base_depth * 2, base_depth * 4];
    let mut layers = Vec::new();
    let mut ch = c;
    let (mut sh, mut sw) = (h, w);
    for (i, &depth) in d.iter().enumerate() {
        for j in 0..2 {
            let precision = if layers.is_empty() { first_precision } else { Precision::Binary };
            layers.push(LayerSpec::Conv {
                in_channels: ch,
                out_channels: depth,
                kernel: 3,
                padding: 1,
                precision,
            });
            ch = depth;
            if j == 1 {
                layers.push(LayerSpec::MaxPool { window: 2 });
                sh = sh.div_ceil(2);
                sw = sw.div_ceil(2);
                if extra_pool && i == d.len() - 1 {
                    layers.push(LayerSpec::MaxPool { window: 2 });
                    sh = sh.div_ceil(2);
                    sw = sw.div_ceil(2);
                }
            }
            layers.push(LayerSpec::BatchNorm { channels: ch });
            layers.push(LayerSpec::SignActivation);
        }
    }
    let mut feat = ch * sh * sw;
    for _ in 0..2 {
        layers.push(LayerSpec::Dense {
            in_features: feat,
            out_features: fc_width,
            precision: Precision::Binary,
        });
        layers.push(LayerSpec::BatchNorm { channels: fc_width });
        layers.push(LayerSpec::SignActivation);
        feat = fc_width;
    }
    layers.push(LayerSpec::Dense {
        in_features: feat,
        out_features: classes,
        precision: Precision::Binary,
    });
    layers.push(LayerSpec::BatchNorm { channels: classes });
    ArchitectureSpec {
        name: name.to_string(),
        input_shape,
        layers,
    }
}

/// The 9-weighted-layer binarized CNN used as the CIFAR-10 baseline:
/// 128,128 / 256,256 / 512,512 convolutions and 1024,1024,10 dense layers,
/// all-binary weights, full-precision (32,32,3) input.
pub fn baseline_cifar_arch() -> ArchitectureSpec {
    conv_ladder("bnn-cifar10", (32, 32, 3), 128, 1024, 10, Precision::Binary, false)
}

/// Reconstructed variant of the CIFAR-10 baseline: bit-sliced (32,32,24)
/// input and a full-precision first conv layer.
pub fn reconstructed_cifar_arch() -> ArchitectureSpec {
    conv_ladder("recon-cifar10", (32, 32, 24), 128, 1024, 10, Precision::Full, false)
}

/// SVHN baseline: half the depth of the CIFAR-10 ladder at every layer.
pub fn svhn_baseline_arch() -> ArchitectureSpec {
    conv_ladder("bnn-svhn", (32, 32, 3), 64, 512, 10, Precision::Binary, false)
}

/// GTSRB baseline: the CIFAR-10 depth ladder over larger 56x56 bit-sliced
/// inputs (43 classes, full-precision first layer, one extra pooling stage so
/// the dense stack still sees a 4x4 map).
pub fn gtsrb_baseline_arch() -> ArchitectureSpec {
    conv_ladder("recon-gtsrb", (56, 56, 24), 128, 1024, 43, Precision::Full, true)
}

/// Parameter blocks for one architecture, aligned with `arch.layers`.
/// Conv weights are stored filter-major (out, in, kh, kw); dense weights as
/// (out, in) with the input enumerated channel-major (c, y, x).
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv { weights: Vec<f32> },
    Dense { weights: Vec<f32> },
    BatchNorm {
        scale: Vec<f32>,
        shift: Vec<f32>,
        mean: Vec<f32>,
        var: Vec<f32>,
    },
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub layers: Vec<LayerParams>,
}

impl ParamStore {
    /// Fresh parameters: identity batchnorm, zero weights.
    pub fn zeros(arch: &ArchitectureSpec) -> Result<Self> {
        arch.validate()?;
        let layers = arch
            .layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv { .. } => LayerParams::Conv {
                    weights: vec![0.0; l.weight_count()],
                },
                LayerSpec::Dense { .. } => LayerParams::Dense {
                    weights: vec![0.0; l.weight_count()],
                },
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
}

/// Reorders canonical conv weights (out, in, kh, kw) into the (out, (kh, kw,
/// in)) rows the im2col GEMM consumes.
pub fn conv_weights_gemm_order(
    weights: &[f32],
    out_c: usize,
    in_c: usize,
    kernel: usize,
) -> Vec<f64> {
    let mut out = vec![0.0f64; weights.len()];
    let patch = kernel * kernel * in_c;
    for o in 0..out_c {
        for ci in 0..in_c {
            for ky in 0..kernel {
                for kx in 0..kernel {
                    let src = ((o * in_c + ci) * kernel + ky) * kernel + kx;
                    let dst = o * patch + (ky * kernel + kx) * in_c + ci;
                    out[dst] = weights[src] as f64;
                }
            }
        }
    }
    out
}

enum InferLayer {
    /// Binary conv over binarized activations: fully packed XNOR route.
    ConvPacked {
        packed: BitPackedMatrix,
        kernel: usize,
        padding: usize,
    },
    /// Conv evaluated densely (full-precision weights, or binary weights over
    /// non-binary activations). Weights are pre-expanded to f64 GEMM order.
    ConvDense {
        weights: Vec<f64>,
        kernel: usize,
        padding: usize,
        out_channels: usize,
    },
    DensePacked { packed: BitPackedMatrix },
    DenseDense { weights: Vec<f64> },
    /// Folded inference batchnorm: y = a*x + b per channel.
    Affine { a: Vec<f64>, b: Vec<f64> },
    MaxPool { window: usize },
    Sign,
}

/// A model frozen for inference: binarized weights packed for XNOR-popcount,
/// batchnorm folded to per-channel affine transforms.
pub struct InferenceModel {
    pub arch: ArchitectureSpec,
    infos: Vec<LayerInfo>,
    layers: Vec<InferLayer>,
}

impl InferenceModel {
    pub fn from_params(arch: &ArchitectureSpec, params: &ParamStore) -> Result<Self> {
        let infos = arch.validate()?;
        if params.layers.len() != arch.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter store has {} layers, architecture {}",
                params.layers.len(),
                arch.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(arch.layers.len());
        for (i, (spec, p)) in arch.layers.iter().zip(&params.layers).enumerate() {
            let info = &infos[i];
            let layer = match (spec, p) {
                (
                    &LayerSpec::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        padding,
                        precision,
                    },
                    LayerParams::Conv { weights },
                ) => {
                    if weights.len() != spec.weight_count() {
                        return Err(Error::MissingParams(i));
                    }
                    let mut w = conv_weights_gemm_order(weights, out_channels, in_channels, kernel);
                    match precision {
                        Precision::Full => InferLayer::ConvDense {
                            weights: w,
                            kernel,
                            padding,
                            out_channels,
                        },
                        Precision::Binary => {
                            for v in w.iter_mut() {
                                *v = if *v >= 0.0 { 1.0 } else { -1.0 };
                            }
                            if info.input_binary {
                                let patch = kernel * kernel * in_channels;
                                InferLayer::ConvPacked {
                                    packed: BitPackedMatrix::from_signs(out_channels, patch, &w)?,
                                    kernel,
                                    padding,
                                }
                            } else {
                                InferLayer::ConvDense {
                                    weights: w,
                                    kernel,
                                    padding,
                                    out_channels,
                                }
                            }
                        }
                    }
                }
                (
                    &LayerSpec::Dense {
                        in_features,
                        out_features,
                        precision,
                    },
                    LayerParams::Dense { weights },
                ) => {
                    if weights.len() != spec.weight_count() {
                        return Err(Error::MissingParams(i));
                    }
                    let mut w: Vec<f64> = weights.iter().map(|&v| v as f64).collect();
                    match precision {
                        Precision::Full => InferLayer::DenseDense { weights: w },
                        Precision::Binary => {
                            for v in w.iter_mut() {
                                *v = if *v >= 0.0 { 1.0 } else { -1.0 };
                            }
                            if info.input_binary {
                                InferLayer::DensePacked {
                                    packed: BitPackedMatrix::from_signs(out_features, in_features, &w)?,
                                }
                            } else {
                                InferLayer::DenseDense { weights: w }
                            }
                        }
                    }
                }
                (LayerSpec::BatchNorm { channels }, LayerParams::BatchNorm { scale, shift, mean, var }) => {
                    if scale.len() != *channels {
                        return Err(Error::MissingParams(i));
                    }
                    let mut a = Vec::with_capacity(*channels);
                    let mut b = Vec::with_capacity(*channels);
                    for ch in 0..*channels {
                        let g = scale[ch] as f64 / (var[ch] as f64 + BN_EPS).sqrt();
                        a.push(g);
                        b.push(shift[ch] as f64 - g * mean[ch] as f64);
                    }
                    InferLayer::Affine { a, b }
                }
                (LayerSpec::MaxPool { window }, LayerParams::None) => {
                    InferLayer::MaxPool { window: *window }
                }
                (LayerSpec::SignActivation, LayerParams::None) => InferLayer::Sign,
                _ => return Err(Error::MissingParams(i)),
            };
            layers.push(layer);
        }
        Ok(InferenceModel {
            arch: arch.clone(),
            infos,
            layers,
        })
    }

    pub fn class_count(&self) -> usize {
        self.infos.last().map(|i| i.out_shape.2).unwrap_or(0)
    }

    /// Deterministic forward pass over a batch laid out as (batch, h, w, c).
    pub fn forward_batch(&self, input: &DenseTensor) -> Result<DenseTensor> {
        let (w0, h0, c0) = self.arch.input_shape;
        if input.shape.len() != 4
            || input.shape[1] != h0
            || input.shape[2] != w0
            || input.shape[3] != c0
        {
            return Err(Error::ShapeMismatch(format!(
                "input shape {:?} does not match architecture input ({h0},{w0},{c0})",
                input.shape
            )));
        }
        let batch = input.shape[0];
        let mut act = input.values.clone();
        let mut shape = (h0, w0, c0);
        for (layer, info) in self.layers.iter().zip(&self.infos) {
            let (h, w, c) = shape;
            act = match layer {
                InferLayer::ConvPacked { packed, kernel, padding } => {
                    let a = im2col_packed(&act, batch, h, w, c, *kernel, *padding)?;
                    binary_gemm(&a, packed)?.values
                }
                InferLayer::ConvDense { weights, kernel, padding, out_channels } => {
                    let pad_value = if info.input_binary { -1.0 } else { 0.0 };
                    let cols = im2col(&act, batch, h, w, c, *kernel, *padding, pad_value)?;
                    gemm_nt(&cols.values, cols.shape[0], cols.shape[1], weights, *out_channels)
                }
                InferLayer::DensePacked { packed } => {
                    let flat = flatten_channel_major(&act, batch, h, w, c);
                    let a = BitPackedMatrix::from_signs(batch, packed.cols, &flat)?;
                    binary_gemm(&a, packed)?.values
                }
                InferLayer::DenseDense { weights } => {
                    let flat = flatten_channel_major(&act, batch, h, w, c);
                    let in_f = h * w * c;
                    gemm_nt(&flat, batch, in_f, weights, weights.len() / in_f)
                }
                InferLayer::Affine { a, b } => {
                    let mut out = act;
                    for v in out.chunks_mut(c) {
                        for (ch, x) in v.iter_mut().enumerate() {
                            *x = a[ch] * *x + b[ch];
                        }
                    }
                    out
                }
                InferLayer::MaxPool { window } => {
                    maxpool_forward(&act, batch, h, w, c, *window).0
                }
                InferLayer::Sign => {
                    let mut out = act;
                    for v in out.iter_mut() {
                        *v = if *v >= 0.0 { 1.0 } else { -1.0 };
                    }
                    out
                }
            };
            shape = info.out_shape;
        }
        DenseTensor::from_vec(&[batch, shape.0 * shape.1 * shape.2], act)
    }
}

/// Flattens (batch, h, w, c) activations channel-major: index (c, y, x).
pub fn flatten_channel_major(act: &[f64], batch: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    if h == 1 && w == 1 {
        return act.to_vec();
    }
    let mut out = Vec::with_capacity(act.len());
    for b in 0..batch {
        let img = &act[b * h * w * c..(b + 1) * h * w * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.push(img[(y * w + x) * c + ch]);
                }
            }
        }
    }
    out
}

/// 2x2 max pooling with ceil semantics (ragged edges pool over the cells that
/// exist). Returns pooled values and the flat argmax index of each winner.
pub fn maxpool_forward(
    act: &[f64],
    batch: usize,
    h: usize,
    w: usize,
    c: usize,
    window: usize,
) -> (Vec<f64>, Vec<usize>) {
    let oh = h.div_ceil(window);
    let ow = w.div_ceil(window);
    let mut out = vec![0.0f64; batch * oh * ow * c];
    let mut arg = vec![0usize; batch * oh * ow * c];
    for b in 0..batch {
        let img = &act[b * h * w * c..(b + 1) * h * w * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for dy in 0..window {
                        for dx in 0..window {
                            let (y, x) = (oy * window + dy, ox * window + dx);
                            if y >= h || x >= w {
                                continue;
                            }
                            let idx = (y * w + x) * c + ch;
                            if img[idx] > best {
                                best = img[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = ((b * oh + oy) * ow + ox) * c + ch;
                    out[o] = best;
                    arg[o] = b * h * w * c + best_idx;
                }
            }
        }
    }
    (out, arg)
}

/// Converts a bit-sliced image into a (1, h, w, c) activation tensor of
/// {0, 1} values ready for [`InferenceModel::forward_batch`].
pub fn bitsliced_input(t: &BitSlicedTensor) -> DenseTensor {
    DenseTensor {
        shape: vec![1, t.height, t.width, t.channel_count()],
        values: t.bits.iter().map(|&b| b as f64).collect(),
    }
}

/// Argmax with lowest-index tie-break.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Classification error rate in percent over pre-built model inputs.
pub fn evaluate(model: &InferenceModel, inputs: &DenseTensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = inputs.shape[0];
    if batch != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{batch} inputs vs {} labels",
            labels.len()
        )));
    }
    let classes = model.class_count();
    for &l in labels {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
    }
    let logits = model.forward_batch(inputs)?;
    let mut wrong = 0usize;
    for (row, &label) in logits.values.chunks(classes).zip(labels) {
        if argmax(row) != label {
            wrong += 1;
        }
    }
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

impl ArchitectureSpec {
    /// Plain-text form: name, input shape, then one `layer =` line per layer.
    /// Fan-in fields are omitted since they follow from shape propagation.
    pub fn to_text(&self) -> String {
        let (w, h, c) = self.input_shape;
        let mut out = format!("name = {}\ninput = {w}x{h}x{c}\n", self.name);
        for l in &self.layers {
            let line = match *l {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    padding,
                    precision,
                    ..
                } => format!(
                    "conv out={out_channels} k={kernel} pad={padding} precision={}",
                    precision_name(precision)
                ),
                LayerSpec::Dense {
                    out_features,
                    precision,
                    ..
                } => format!(
                    "dense out={out_features} precision={}",
                    precision_name(precision)
                ),
                LayerSpec::MaxPool { window } => format!("maxpool w={window}"),
                LayerSpec::BatchNorm { .. } => "batchnorm".to_string(),
                LayerSpec::SignActivation => "sign".to_string(),
            };
            out.push_str("layer = ");
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    /// Parses [`Self::to_text`] output, recomputing fan-in fields by shape
    /// propagation, and validates the result.
    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::MalformedConfig(msg);
        let mut name = None;
        let mut input_shape = None;
        let mut layers = Vec::new();
        // (h, w, c) tracked while parsing, mirroring validate()
        let mut shape: Option<(usize, usize, usize)> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line {}: expected key = value", lineno + 1)))?;
            let value = value.trim();
            match key.trim() {
                "name" => name = Some(value.to_string()),
                "input" => {
                    let dims: Vec<usize> = value
                        .split('x')
                        .map(|d| d.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| bad(format!("line {}: bad input shape", lineno + 1)))?;
                    if dims.len() != 3 {
                        return Err(bad(format!("line {}: input needs WxHxC", lineno + 1)));
                    }
                    input_shape = Some((dims[0], dims[1], dims[2]));
                    shape = Some((dims[1], dims[0], dims[2]));
                }
                "layer" => {
                    let (h, w, c) = shape
                        .ok_or_else(|| bad(format!("line {}: layer before input", lineno + 1)))?;
                    let mut tokens = value.split_whitespace();
                    let kind = tokens.next().unwrap_or("");
                    let mut fields = std::collections::HashMap::new();
                    for t in tokens {
                        let (k, v) = t
                            .split_once('=')
                            .ok_or_else(|| bad(format!("line {}: bad field {t}", lineno + 1)))?;
                        fields.insert(k, v);
                    }
                    let get_num = |k: &str| -> Result<usize> {
                        fields
                            .get(k)
                            .ok_or_else(|| bad(format!("line {}: missing {k}", lineno + 1)))?
                            .parse()
                            .map_err(|_| bad(format!("line {}: bad {k}", lineno + 1)))
                    };
                    let get_prec = || -> Result<Precision> {
                        match fields.get("precision").copied() {
                            Some("binary") => Ok(Precision::Binary),
                            Some("full") => Ok(Precision::Full),
                            other => Err(bad(format!(
                                "line {}: precision must be binary or full, got {other:?}",
                                lineno + 1
                            ))),
                        }
                    };
                    let layer = match kind {
                        "conv" => {
                            let out = get_num("out")?;
                            let kernel = get_num("k")?;
                            let padding = get_num("pad")?;
                            let spec = LayerSpec::Conv {
                                in_channels: c,
                                out_channels: out,
                                kernel,
                                padding,
                                precision: get_prec()?,
                            };
                            if kernel == 0 || h + 2 * padding < kernel {
                                return Err(bad(format!(
                                    "line {}: kernel does not fit input",
                                    lineno + 1
                                )));
                            }
                            shape = Some((
                                h + 2 * padding - kernel + 1,
                                w + 2 * padding - kernel + 1,
                                out,
                            ));
                            spec
                        }
                        "dense" => {
                            let out = get_num("out")?;
                            let spec = LayerSpec::Dense {
                                in_features: h * w * c,
                                out_features: out,
                                precision: get_prec()?,
                            };
                            shape = Some((1, 1, out));
                            spec
                        }
                        "maxpool" => {
                            let window = get_num("w")?;
                            if window == 0 {
                                return Err(bad(format!("line {}: zero window", lineno + 1)));
                            }
                            shape = Some((h.div_ceil(window), w.div_ceil(window), c));
                            LayerSpec::MaxPool { window }
                        }
                        "batchnorm" => LayerSpec::BatchNorm { channels: c },
                        "sign" => LayerSpec::SignActivation,
                        other => {
                            return Err(bad(format!("line {}: unknown layer {other}", lineno + 1)))
                        }
                    };
                    layers.push(layer);
                }
                other => return Err(bad(format!("line {}: unknown key {other}", lineno + 1))),
            }
        }
        let arch = ArchitectureSpec {
            name: name.ok_or_else(|| bad("missing name".into()))?,
            input_shape: input_shape.ok_or_else(|| bad("missing input".into()))?,
            layers,
        };
        arch.validate()?;
        Ok(arch)
    }
}

fn precision_name(p: Precision) -> &'static str {
    match p {
        Precision::Binary => "binary",
        Precision::Full => "full",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn baseline_cifar_cost_matches_published_figures() {
        let arch = baseline_cifar_arch();
        assert_eq!(arch.weighted_layer_count(), 9);
        let cost = cost_model(&arch, 16).unwrap();
        approx(cost.size_mb, 1.75, 0.01);
        approx(cost.gops, 1.23, 0.01);
        let params: u64 = arch.layers.iter().map(|l| l.weight_count() as u64).sum();
        assert_eq!(params, 14_022_016);
    }

    #[test]
    fn svhn_and_gtsrb_baseline_costs() {
        let svhn = cost_model(&svhn_baseline_arch(), 16).unwrap();
        approx(svhn.size_mb, 0.44, 0.01);
        approx(svhn.gops, 0.31, 0.01);
        let gtsrb = cost_model(&gtsrb_baseline_arch(), 16).unwrap();
        approx(gtsrb.size_mb, 1.81, 0.01);
        approx(gtsrb.gops, 3.89, 0.01);
    }

    #[test]
    fn validate_rejects_channel_mismatch() {
        let mut arch = baseline_cifar_arch();
        arch.input_shape = (32, 32, 4);
        assert!(arch.validate().is_err());
    }

    #[test]
    fn validate_rejects_second_full_layer() {
        let arch = ArchitectureSpec {
            name: "bad".into(),
            input_shape: (4, 4, 1),
            layers: vec![
                LayerSpec::Dense { in_features: 16, out_features: 8, precision: Precision::Full },
                LayerSpec::Dense { in_features: 8, out_features: 2, precision: Precision::Full },
            ],
        };
        assert!(arch.validate().is_err());
    }

    #[test]
    fn constant_network_gives_constant_logits() {
        let arch = ArchitectureSpec {
            name: "const".into(),
            input_shape: (2, 2, 1),
            layers: vec![
                LayerSpec::Dense { in_features: 4, out_features: 3, precision: Precision::Full },
                LayerSpec::BatchNorm { channels: 3 },
            ],
        };
        let params = ParamStore::zeros(&arch).unwrap();
        let model = InferenceModel::from_params(&arch, &params).unwrap();
        let a = DenseTensor::from_vec(&[2, 2, 2, 1], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 9.0]).unwrap();
        let logits = model.forward_batch(&a).unwrap();
        assert_eq!(&logits.values[0..3], &logits.values[3..6]);
    }

    #[test]
    fn evaluate_tie_break_picks_class_zero() {
        let arch = ArchitectureSpec {
            name: "const".into(),
            input_shape: (1, 1, 2),
            layers: vec![LayerSpec::Dense { in_features: 2, out_features: 4, precision: Precision::Full }],
        };
        let params = ParamStore::zeros(&arch).unwrap();
        let model = InferenceModel::from_params(&arch, &params).unwrap();
        let inputs = DenseTensor::from_vec(&[4, 1, 1, 2], vec![0.0; 8]).unwrap();
        // constant (all-zero) logits predict class 0 everywhere
        let err = evaluate(&model, &inputs, &[0, 1, 2, 0]).unwrap();
        approx(err, 100.0 * 2.0 / 4.0, 1e-12);
        let err = evaluate(&model, &inputs, &[1, 1, 1, 1]).unwrap();
        approx(err, 100.0, 1e-12);
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        let arch = ArchitectureSpec {
            name: "c".into(),
            input_shape: (1, 1, 2),
            layers: vec![LayerSpec::Dense { in_features: 2, out_features: 2, precision: Precision::Full }],
        };
        let model =
            InferenceModel::from_params(&arch, &ParamStore::zeros(&arch).unwrap()).unwrap();
        let inputs = DenseTensor::from_vec(&[0, 1, 1, 2], vec![]).unwrap();
        assert!(evaluate(&model, &inputs, &[]).is_err());
    }

    #[test]
    fn maxpool_ceil_covers_ragged_edge() {
        // 3x3 single channel pools to 2x2
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let (out, _) = maxpool_forward(&x, 1, 3, 3, 1, 2);
        assert_eq!(out, vec![4.0, 5.0, 7.0, 8.0]);
    }

    #[test]
    fn arch_text_roundtrips_for_presets() {
        for arch in [
            baseline_cifar_arch(),
            reconstructed_cifar_arch(),
            svhn_baseline_arch(),
            gtsrb_baseline_arch(),
        ] {
            let text = arch.to_text();
            let back = ArchitectureSpec::from_text(&text).unwrap();
            assert_eq!(back, arch, "{text}");
        }
    }

    #[test]
    fn arch_text_recomputes_fan_in() {
        let text = "name = t\ninput = 4x4x3\nlayer = conv out=8 k=3 pad=1 precision=full\nlayer = maxpool w=2\nlayer = batchnorm\nlayer = sign\nlayer = dense out=5 precision=binary\nlayer = batchnorm\n";
        let arch = ArchitectureSpec::from_text(text).unwrap();
        assert_eq!(
            arch.layers[4],
            LayerSpec::Dense { in_features: 32, out_features: 5, precision: Precision::Binary }
        );
        assert_eq!(arch.layers[2], LayerSpec::BatchNorm { channels: 8 });
    }

    #[test]
    fn arch_text_rejects_garbage() {
        assert!(ArchitectureSpec::from_text("name = x\n").is_err()); // no input
        assert!(ArchitectureSpec::from_text("name = x\ninput = 4x4\n").is_err());
        assert!(
            ArchitectureSpec::from_text("name = x\ninput = 4x4x3\nlayer = blorp\n").is_err()
        );
        assert!(
            ArchitectureSpec::from_text("name = x\ninput = 4x4x3\nwhatever = 1\n").is_err()
        );
        assert!(ArchitectureSpec::from_text(
            "name = x\ninput = 4x4x3\nlayer = conv out=8 k=3 pad=1 precision=maybe\n"
        )
        .is_err());
    }
}
