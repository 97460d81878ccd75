//! Small feed-forward models (dense, 3×3 conv, ReLU, flatten) with a
//! hand-written backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cross_entropy_with_grad, gemm_into, gemm_tn_into, streams, RngStream, Tensor};
use crate::quantize::{quantize_activation, LayerQuantState, QuantizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
        #[serde(default = "yes")]
        quantized: bool,
    },
    /// 3×3 convolution with padding 1 over a `channels × height × width` input.
    Conv3x3 {
        in_channels: usize,
        out_channels: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "yes")]
        quantized: bool,
    },
    Relu,
    Flatten,
}

fn yes() -> bool {
    true
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstLastPolicy {
    #[default]
    QuantizeAll,
    /// First and last quantized layers stay at their initial precision.
    PinToEightBit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `[features]` or `[channels, height, width]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub first_last: FirstLastPolicy,
}

impl ModelSpec {
    pub fn mlp(widths: &[usize]) -> Self {
        let mut layers = Vec::new();
        for (i, w) in widths.windows(2).enumerate() {
            if i > 0 {
                layers.push(LayerSpec::Relu);
            }
            layers.push(LayerSpec::Dense {
                inputs: w[0],
                outputs: w[1],
                quantized: true,
            });
        }
        Self {
            input: vec![widths[0]],
            layers,
            first_last: FirstLastPolicy::QuantizeAll,
        }
    }

    /// Two stride-2 convolutions and a dense classifier for 28×28 digits.
    pub fn small_cnn() -> Self {
        Self {
            input: vec![1, 28, 28],
            layers: vec![
                LayerSpec::Conv3x3 {
                    in_channels: 1,
                    out_channels: 8,
                    stride: 2,
                    quantized: true,
                },
                LayerSpec::Relu,
                LayerSpec::Conv3x3 {
                    in_channels: 8,
                    out_channels: 16,
                    stride: 2,
                    quantized: true,
                },
                LayerSpec::Relu,
                LayerSpec::Flatten,
                LayerSpec::Dense {
                    inputs: 16 * 7 * 7,
                    outputs: 10,
                    quantized: true,
                },
            ],
            first_last: FirstLastPolicy::QuantizeAll,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Flat(usize),
    Spatial(usize, usize, usize),
}

impl Shape {
    fn size(self) -> usize {
        match self {
            Shape::Flat(n) => n,
            Shape::Spatial(c, h, w) => c * h * w,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    in_c: usize,
    out_c: usize,
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_c * 9
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// `[in_c·9 × ho·wo]` patch matrix of one sample.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let px = self.out_pixels();
        for c in 0..self.in_c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (c * 9 + ky * 3 + kx) * px;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            cols[row + oy * self.wo + ox] =
                                if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                    x[c * self.h * self.w + iy as usize * self.w + ix as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let px = self.out_pixels();
        for c in 0..self.in_c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (c * 9 + ky * 3 + kx) * px;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            dx[c * self.h * self.w + iy as usize * self.w + ix as usize] +=
                                cols[row + oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Dense {
        inputs: usize,
        outputs: usize,
        param: usize,
    },
    Conv {
        geom: ConvGeom,
        param: usize,
    },
    Relu,
    Flatten,
}

/// Where a parametric layer keeps its weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WeightSlot {
    Quantized(usize),
    Full(usize),
}

/// How the forward pass treats weights and activations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForwardPolicy {
    pub quantize_weights: bool,
    pub activation_bits: Option<u8>,
    pub activation_clip: f64,
}

impl Default for ForwardPolicy {
    fn default() -> Self {
        Self {
            quantize_weights: true,
            activation_bits: None,
            activation_clip: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    ops: Vec<Op>,
    slots: Vec<WeightSlot>,
    quantized: Vec<LayerQuantState>,
    full: Vec<Tensor>,
    biases: Vec<Vec<f64>>,
    pub policy: ForwardPolicy,
    classes: usize,
}

/// Gradients of the task loss with respect to the weights actually used in
/// the forward pass, one entry per parametric layer.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub weights: Vec<Tensor>,
    pub biases: Vec<Vec<f64>>,
}

fn compile(spec: &ModelSpec) -> Result<(Vec<Op>, Vec<(usize, usize, bool)>, usize)> {
    if spec.layers.is_empty() {
        return Err(Error::Config("model has no layers".into()));
    }
    let mut shape = match spec.input.as_slice() {
        [n] if *n > 0 => Shape::Flat(*n),
        [c, h, w] if c * h * w > 0 => Shape::Spatial(*c, *h, *w),
        other => return Err(Error::Config(format!("model input shape {other:?} is invalid"))),
    };
    let mut ops = Vec::new();
    // (rows, cols, quantized) of each parametric layer's weight matrix.
    let mut params = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            LayerSpec::Dense {
                inputs,
                outputs,
                quantized,
            } => {
                if shape != Shape::Flat(inputs) || outputs == 0 {
                    return Err(Error::Config(format!(
                        "layer {i}: dense {inputs}->{outputs} does not accept input {shape:?}"
                    )));
                }
                ops.push(Op::Dense {
                    inputs,
                    outputs,
                    param: params.len(),
                });
                params.push((inputs, outputs, quantized));
                shape = Shape::Flat(outputs);
            }
            LayerSpec::Conv3x3 {
                in_channels,
                out_channels,
                stride,
                quantized,
            } => {
                let Shape::Spatial(c, h, w) = shape else {
                    return Err(Error::Config(format!("layer {i}: conv3x3 needs a spatial input")));
                };
                if c != in_channels || out_channels == 0 || stride == 0 {
                    return Err(Error::Config(format!(
                        "layer {i}: conv3x3 {in_channels}->{out_channels} (stride {stride}) does not accept {c} channels"
                    )));
                }
                let geom = ConvGeom {
                    in_c: c,
                    out_c: out_channels,
                    h,
                    w,
                    stride,
                    ho: (h - 1) / stride + 1,
                    wo: (w - 1) / stride + 1,
                };
                ops.push(Op::Conv {
                    geom,
                    param: params.len(),
                });
                params.push((out_channels, c * 9, quantized));
                shape = Shape::Spatial(out_channels, geom.ho, geom.wo);
            }
            LayerSpec::Relu => ops.push(Op::Relu),
            LayerSpec::Flatten => {
                ops.push(Op::Flatten);
                shape = Shape::Flat(shape.size());
            }
        }
    }
    let Shape::Flat(classes) = shape else {
        return Err(Error::Config("model must end in a flat output".into()));
    };
    if !params.iter().any(|p| p.2) {
        return Err(Error::Config("model needs at least one quantized layer".into()));
    }
    Ok((ops, params, classes))
}

impl Model {
    /// Kaiming-uniform weights (fan-in), zero biases; quantized layers start
    /// at `initial_bits` with their scale frozen at `max |w|`.
    pub fn build(
        spec: &ModelSpec,
        seed: u64,
        initial_bits: u8,
        kind: QuantizerKind,
        policy: ForwardPolicy,
    ) -> Result<Self> {
        let (ops, params, classes) = compile(spec)?;
        let mut rng = RngStream::new(seed, streams::WEIGHT_INIT);
        let mut slots = Vec::new();
        let mut quantized = Vec::new();
        let mut full = Vec::new();
        let mut biases = Vec::new();
        for (param, &(rows, cols, is_q)) in params.iter().enumerate() {
            let (fan_in, outputs) = match ops.iter().find_map(|op| match *op {
                Op::Dense { param: p, outputs, .. } if p == param => Some((rows, outputs)),
                Op::Conv { geom, param: p } if p == param => Some((cols, geom.out_c)),
                _ => None,
            }) {
                Some(x) => x,
                None => return Err(Error::Internal("parameter without an op".into())),
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.uniform(-bound, bound)).collect();
            let w = Tensor::new(vec![rows, cols], data)?;
            if is_q {
                slots.push(WeightSlot::Quantized(quantized.len()));
                quantized.push(LayerQuantState::new(w, initial_bits, kind)?);
            } else {
                slots.push(WeightSlot::Full(full.len()));
                full.push(w);
            }
            biases.push(vec![0.0; outputs]);
        }
        if spec.first_last == FirstLastPolicy::PinToEightBit {
            let n = quantized.len();
            for i in [0, n - 1] {
                quantized[i].set_pinned(true);
            }
        }
        Ok(Self {
            spec: spec.clone(),
            ops,
            slots,
            quantized,
            full,
            biases,
            policy,
            classes,
        })
    }

    /// Reassembles a model from stored parameters (checkpoints).
    pub fn from_parts(
        spec: &ModelSpec,
        quantized: Vec<LayerQuantState>,
        full: Vec<Tensor>,
        biases: Vec<Vec<f64>>,
        policy: ForwardPolicy,
    ) -> Result<Self> {
        let (ops, params, classes) = compile(spec)?;
        let mut slots = Vec::new();
        let (mut nq, mut nf) = (0, 0);
        for &(rows, cols, is_q) in &params {
            let shape = if is_q {
                slots.push(WeightSlot::Quantized(nq));
                nq += 1;
                quantized.get(nq - 1).map(|q| q.latent.shape().to_vec())
            } else {
                slots.push(WeightSlot::Full(nf));
                nf += 1;
                full.get(nf - 1).map(|t| t.shape().to_vec())
            };
            if shape.as_deref() != Some(&[rows, cols][..]) {
                return Err(Error::Consistency(format!(
                    "stored weights {shape:?} do not match layer shape [{rows}, {cols}]"
                )));
            }
        }
        if nq != quantized.len() || nf != full.len() || biases.len() != params.len() {
            return Err(Error::Consistency(
                "stored parameter count does not match the model".into(),
            ));
        }
        for (p, b) in biases.iter().enumerate() {
            let outputs = ops.iter().find_map(|op| match *op {
                Op::Dense { param, outputs, .. } if param == p => Some(outputs),
                Op::Conv { geom, param } if param == p => Some(geom.out_c),
                _ => None,
            });
            if outputs != Some(b.len()) {
                return Err(Error::Consistency(format!("stored bias {p} has {} entries", b.len())));
            }
        }
        Ok(Self {
            spec: spec.clone(),
            ops,
            slots,
            quantized,
            full,
            biases,
            policy,
            classes,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_size(&self) -> usize {
        self.spec.input.iter().product()
    }

    pub fn slots(&self) -> &[WeightSlot] {
        &self.slots
    }

    pub fn quant_layers(&self) -> &[LayerQuantState] {
        &self.quantized
    }

    pub fn quant_layers_mut(&mut self) -> &mut [LayerQuantState] {
        &mut self.quantized
    }

    pub fn full_layers(&self) -> &[Tensor] {
        &self.full
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    /// Total parameter count including biases.
    pub fn param_count(&self) -> usize {
        self.quantized.iter().map(|q| q.latent.len()).sum::<usize>()
            + self.full.iter().map(Tensor::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Parametric-layer index of each quantized layer.
    pub fn quantized_param_index(&self, q: usize) -> usize {
        self.slots
            .iter()
            .position(|s| *s == WeightSlot::Quantized(q))
            .expect("quantized layer index in range")
    }

    /// Weights used by the forward pass under the current policy, together
    /// with the STE masks of quantized layers.
    pub fn effective_weights(&self) -> (Vec<Tensor>, Vec<Option<Tensor>>) {
        let mut weights = Vec::with_capacity(self.slots.len());
        let mut masks = Vec::with_capacity(self.slots.len());
        for slot in &self.slots {
            match *slot {
                WeightSlot::Quantized(i) if self.policy.quantize_weights => {
                    let q = self.quantized[i].quantized_forward();
                    weights.push(q.values);
                    masks.push(Some(q.pass));
                }
                WeightSlot::Quantized(i) => {
                    weights.push(self.quantized[i].latent.clone());
                    masks.push(None);
                }
                WeightSlot::Full(i) => {
                    weights.push(self.full[i].clone());
                    masks.push(None);
                }
            }
        }
        (weights, masks)
    }

    /// Logits for a `batch × features` input.
    pub fn forward(&self, weights: &[Tensor], x: &Tensor) -> Result<Tensor> {
        let (out, _) = self.run(weights, x, false)?;
        Ok(out)
    }

    /// Mean cross-entropy and its gradients with respect to `weights`.
    pub fn loss_and_grad(&self, weights: &[Tensor], x: &Tensor, labels: &[usize]) -> Result<(f64, Gradients)> {
        let (logits, caches) = self.run(weights, x, true)?;
        let (loss, grad) = cross_entropy_with_grad(&logits, labels)?;
        let grads = self.backward(weights, caches, grad)?;
        Ok((loss, grads))
    }

    fn run(&self, weights: &[Tensor], x: &Tensor, keep: bool) -> Result<(Tensor, Vec<Cache>)> {
        let (batch, features) = x.dims2()?;
        if features != self.input_size() {
            return Err(Error::Dimension(format!(
                "model expects {} input features, got {features}",
                self.input_size()
            )));
        }
        if weights.len() != self.slots.len() {
            return Err(Error::Internal("weight list does not match the model".into()));
        }
        let mut act = x.data().to_vec();
        let mut caches = Vec::new();
        for op in &self.ops {
            match *op {
                Op::Dense { inputs, outputs, param } => {
                    let mut out = Vec::with_capacity(batch * outputs);
                    for _ in 0..batch {
                        out.extend_from_slice(&self.biases[param]);
                    }
                    gemm_into(&act, weights[param].data(), &mut out, batch, inputs, outputs);
                    let input = std::mem::replace(&mut act, out);
                    if keep {
                        caches.push(Cache::Dense { input });
                    }
                }
                Op::Conv { geom, param } => {
                    let in_size = geom.in_c * geom.h * geom.w;
                    let px = geom.out_pixels();
                    let patch = geom.patch();
                    let mut out = vec![0.0; batch * geom.out_c * px];
                    let mut all_cols = Vec::with_capacity(if keep { batch * patch * px } else { 0 });
                    let mut cols = vec![0.0; patch * px];
                    for b in 0..batch {
                        geom.im2col(&act[b * in_size..(b + 1) * in_size], &mut cols);
                        let y = &mut out[b * geom.out_c * px..(b + 1) * geom.out_c * px];
                        for (oc, bias) in self.biases[param].iter().enumerate() {
                            y[oc * px..(oc + 1) * px].fill(*bias);
                        }
                        gemm_into(weights[param].data(), &cols, y, geom.out_c, patch, px);
                        if keep {
                            all_cols.extend_from_slice(&cols);
                        }
                    }
                    act = out;
                    if keep {
                        caches.push(Cache::Conv { cols: all_cols });
                    }
                }
                Op::Relu => {
                    let mut mask = Vec::with_capacity(if keep { act.len() } else { 0 });
                    for v in act.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    if let Some(bits) = self.policy.activation_bits {
                        let t = Tensor::from_vec(std::mem::take(&mut act));
                        let (q, m) = quantize_activation(&t, Some(bits), self.policy.activation_clip)?;
                        act = q.into_data();
                        if keep {
                            // ReLU output is >= 0, so the clamp mask only cuts the top.
                            mask = m.into_data();
                        }
                    }
                    if keep {
                        caches.push(Cache::Relu {
                            positive: act.iter().map(|&v| v > 0.0).collect(),
                            clip_mask: mask,
                        });
                    }
                }
                Op::Flatten => {
                    if keep {
                        caches.push(Cache::Flatten);
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch, self.classes], act)?;
        Ok((out, caches))
    }

    fn backward(&self, weights: &[Tensor], mut caches: Vec<Cache>, grad: Tensor) -> Result<Gradients> {
        let (batch, _) = grad.dims2()?;
        let mut dweights: Vec<Tensor> = weights.iter().map(|w| Tensor::zeros(w.shape())).collect();
        let mut dbiases: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut delta = grad.into_data();
        for (idx, op) in self.ops.iter().enumerate().rev() {
            let cache = caches.pop().ok_or_else(|| Error::Internal("missing cache".into()))?;
            let first = idx == 0;
            match (*op, cache) {
                (Op::Dense { inputs, outputs, param }, Cache::Dense { input }) => {
                    gemm_tn_into(&input, &delta, dweights[param].data_mut(), batch, inputs, outputs);
                    let db = &mut dbiases[param];
                    for row in delta.chunks_exact(outputs) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    if !first {
                        let wt = weights[param].transpose()?;
                        let mut dx = vec![0.0; batch * inputs];
                        gemm_into(&delta, wt.data(), &mut dx, batch, outputs, inputs);
                        delta = dx;
                    }
                }
                (Op::Conv { geom, param }, Cache::Conv { cols }) => {
                    let px = geom.out_pixels();
                    let patch = geom.patch();
                    let in_size = geom.in_c * geom.h * geom.w;
                    let out_size = geom.out_c * px;
                    let mut dx = vec![0.0; if first { 0 } else { batch * in_size }];
                    let mut dcols = vec![0.0; patch * px];
                    let w = weights[param].data();
                    let dw = dweights[param].data_mut();
                    for b in 0..batch {
                        let dy = &delta[b * out_size..(b + 1) * out_size];
                        let c = &cols[b * patch * px..(b + 1) * patch * px];
                        // dW[oc, r] += Σ_p dy[oc, p] · cols[r, p]
                        for oc in 0..geom.out_c {
                            let dyr = &dy[oc * px..(oc + 1) * px];
                            dbiases[param][oc] += dyr.iter().sum::<f64>();
                            for r in 0..patch {
                                let cr = &c[r * px..(r + 1) * px];
                                let mut acc = 0.0;
                                for (a, b) in dyr.iter().zip(cr) {
                                    acc += a * b;
                                }
                                dw[oc * patch + r] += acc;
                            }
                        }
                        if !first {
                            dcols.fill(0.0);
                            gemm_tn_into(w, dy, &mut dcols, geom.out_c, patch, px);
                            geom.col2im(&dcols, &mut dx[b * in_size..(b + 1) * in_size]);
                        }
                    }
                    delta = dx;
                }
                (Op::Relu, Cache::Relu { positive, clip_mask }) => {
                    for (d, &p) in delta.iter_mut().zip(&positive) {
                        if !p {
                            *d = 0.0;
                        }
                    }
                    if !clip_mask.is_empty() {
                        for (d, m) in delta.iter_mut().zip(&clip_mask) {
                            *d *= m;
                        }
                    }
                }
                (Op::Flatten, Cache::Flatten) => {}
                _ => return Err(Error::Internal("cache does not match op".into())),
            }
            if first {
                break;
            }
        }
        Ok(Gradients {
            weights: dweights,
            biases: dbiases,
        })
    }

    /// Applies a step to every latent/full weight and bias: `param -= update`.
    pub(crate) fn apply_updates(&mut self, weight_updates: &[Tensor], bias_updates: &[Vec<f64>]) -> Result<()> {
        for (slot, upd) in self.slots.iter().zip(weight_updates) {
            let target = match *slot {
                WeightSlot::Quantized(i) => &mut self.quantized[i].latent,
                WeightSlot::Full(i) => &mut self.full[i],
            };
            target.axpy(-1.0, upd)?;
        }
        for (b, u) in self.biases.iter_mut().zip(bias_updates) {
            for (x, d) in b.iter_mut().zip(u) {
                *x -= d;
            }
        }
        Ok(())
    }
}

enum Cache {
    Dense { input: Vec<f64> },
    Conv { cols: Vec<f64> },
    Relu { positive: Vec<bool>, clip_mask: Vec<f64> },
    Flatten,
}
