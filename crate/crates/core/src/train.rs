//! Quantization-aware training with LSB regularization and scheduled bit
//! pruning.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use tracing::{debug, info};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ForwardPolicy, Model, WeightSlot};
use crate::numerics::{argmax_rows, streams, RngStream, Tensor};
use crate::quantize::{QuantizerKind, MAX_BITS};
use crate::regularize::{lsb_l1, lsb_l1_grad, RegularizerConfig};
use crate::schedule::{
    lsb_nonzero_rate, pruning_event, should_fire, BitScheme, Phase, ScheduleConfig, ScheduleState, FULL_PRECISION_BITS,
};
use crate::sensitivity::{hutchinson_trace, SensitivityRecord, DEFAULT_HVP_EPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HessianConfig {
    /// Rademacher probes per layer.
    #[serde(default = "HessianConfig::default_samples")]
    pub samples: usize,
    /// Samples in the fixed batch the Hessian is taken on.
    #[serde(default = "HessianConfig::default_batch")]
    pub batch: usize,
    #[serde(default = "HessianConfig::default_eps")]
    pub eps: f64,
}

impl HessianConfig {
    fn default_samples() -> usize {
        16
    }
    fn default_batch() -> usize {
        512
    }
    fn default_eps() -> f64 {
        DEFAULT_HVP_EPS
    }
}

impl Default for HessianConfig {
    fn default() -> Self {
        Self {
            samples: Self::default_samples(),
            batch: Self::default_batch(),
            eps: Self::default_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    #[serde(default)]
    pub warmup_epochs: usize,
    #[serde(default = "TrainConfig::default_momentum")]
    pub momentum: f64,
    pub seed: u64,
    #[serde(default = "TrainConfig::default_initial_bits")]
    pub initial_bits: u8,
    #[serde(default)]
    pub quantizer: QuantizerKind,
    /// Train the float baseline: no weight quantization, no regularizer,
    /// no pruning.
    #[serde(default)]
    pub full_precision: bool,
    #[serde(default)]
    pub activation_bits: Option<u8>,
    #[serde(default = "TrainConfig::default_activation_clip")]
    pub activation_clip: f64,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub hessian: HessianConfig,
}

impl TrainConfig {
    fn default_momentum() -> f64 {
        0.9
    }
    fn default_initial_bits() -> u8 {
        8
    }
    fn default_activation_clip() -> f64 {
        1.0
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "train.warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "train.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(1..=MAX_BITS).contains(&self.initial_bits) {
            return Err(Error::Config(format!(
                "train.initial_bits {} outside [1, {MAX_BITS}]",
                self.initial_bits
            )));
        }
        if let Some(a) = self.activation_bits {
            if !(1..=MAX_BITS).contains(&a) {
                return Err(Error::Config(format!(
                    "train.activation_bits {a} outside [1, {MAX_BITS}]"
                )));
            }
        }
        if !(self.activation_clip > 0.0) {
            return Err(Error::Config("train.activation_clip must be positive".into()));
        }
        if self.hessian.samples == 0 || self.hessian.batch == 0 || !(self.hessian.eps > 0.0) {
            return Err(Error::Config("train.hessian needs samples, batch and eps > 0".into()));
        }
        if self.quantizer != QuantizerKind::RoundClamp {
            return Err(Error::UnsupportedQuantizer(
                "training needs the round-clamp quantizer; LSB slicing is undefined otherwise".into(),
            ));
        }
        self.schedule.validate(self.epochs)
    }

    pub fn forward_policy(&self) -> ForwardPolicy {
        ForwardPolicy {
            quantize_weights: !self.full_precision,
            activation_bits: self.activation_bits,
            activation_clip: self.activation_clip,
        }
    }
}

/// Learning rate for 0-based `epoch`: linear warmup to the peak, then cosine
/// decay towards zero over the remaining epochs.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let w = cfg.warmup_epochs;
    if epoch < w {
        return cfg.lr * (epoch + 1) as f64 / w as f64;
    }
    let span = (cfg.epochs - w).max(1) as f64;
    let t = (epoch - w) as f64 / span;
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    /// Mean task loss over the epoch's batches.
    pub train_loss: f64,
    /// LSB L1 penalty at the end of the epoch (before any pruning event).
    pub reg_loss: f64,
    pub val_acc: f64,
    /// Size fraction after this epoch's pruning event, if one fired.
    pub gamma: f64,
    pub bits: Vec<u8>,
    /// LSB-nonzero rates at the end of the epoch, before pruning.
    pub betas: Vec<f64>,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySnapshot {
    pub epoch: usize,
    pub records: Vec<SensitivityRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub metrics: Vec<EpochMetrics>,
    /// LSB-nonzero rates of the freshly initialised model.
    pub initial_betas: Vec<f64>,
    pub schedule: ScheduleState,
    pub sensitivity: Vec<SensitivitySnapshot>,
    pub final_val_acc: f64,
    pub scheme: BitScheme,
    pub wall_seconds: f64,
}

/// Builds the model a config describes.
pub fn build_model(spec: &crate::model::ModelSpec, cfg: &TrainConfig) -> Result<Model> {
    Model::build(spec, cfg.seed, cfg.initial_bits, cfg.quantizer, cfg.forward_policy())
}

/// Classification accuracy under the model's forward policy.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty dataset".into()));
    }
    let (weights, _) = model.effective_weights();
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(1000) {
        let (x, labels) = data.batch(chunk);
        let pred = argmax_rows(&model.forward(&weights, &x)?)?;
        correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Per-layer Hessian trace of the task loss with respect to each quantized
/// layer's effective weights, on a fixed batch, and the resulting
/// sensitivities.
pub fn layer_sensitivities(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &HessianConfig,
    seed: u64,
    event: u64,
) -> Result<Vec<SensitivityRecord>> {
    let (weights, _) = model.effective_weights();
    let mut out = Vec::with_capacity(model.quant_layers().len());
    for (q, state) in model.quant_layers().iter().enumerate() {
        let p = model.quantized_param_index(q);
        let mut rng = RngStream::new(seed, streams::hutchinson(event, q as u64));
        let mut probe = weights.clone();
        let trace = hutchinson_trace(
            |w: &Tensor| {
                probe[p] = w.clone();
                let (_, g) = model.loss_and_grad(&probe, x, labels)?;
                Ok(g.weights.into_iter().nth(p).expect("layer gradient"))
            },
            &weights[p],
            cfg.samples,
            &mut rng,
            cfg.eps,
        )?;
        out.push(SensitivityRecord::new(q, trace, &weights[p], &state.latent)?);
    }
    Ok(out)
}

fn size_fraction(model: &Model, cfg: &TrainConfig) -> f64 {
    if cfg.full_precision {
        1.0
    } else {
        BitScheme::from_states(model.quant_layers()).size_fraction()
    }
}

fn reported_bits(model: &Model, cfg: &TrainConfig) -> Vec<u8> {
    model
        .quant_layers()
        .iter()
        .map(|q| {
            if cfg.full_precision {
                FULL_PRECISION_BITS as u8
            } else {
                q.bits()
            }
        })
        .collect()
}

fn betas(model: &Model, cfg: &TrainConfig) -> Result<Vec<f64>> {
    model
        .quant_layers()
        .iter()
        .map(|q| lsb_nonzero_rate(q, cfg.schedule.min_bits))
        .collect()
}

/// Trains `model` in place.
///
/// Each epoch shuffles the training set from a seeded stream, runs SGD with
/// momentum on the task loss plus `λ ·` LSB penalty (STE through the weight
/// quantizer), then evaluates. Pruning events fire at the end of epochs that
/// are multiples of the interval while above the target size.
pub fn train_run(model: &mut Model, train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    if train.feature_count() != model.input_size() || val.feature_count() != model.input_size() {
        return Err(Error::Consistency(format!(
            "model expects {} features, data has {} (train) and {} (val)",
            model.input_size(),
            train.feature_count(),
            val.feature_count()
        )));
    }
    if train.classes() != model.classes() {
        return Err(Error::Consistency(format!(
            "model has {} outputs, data has {} classes",
            model.classes(),
            train.classes()
        )));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input("training and validation sets must be nonempty".into()));
    }
    let started = Instant::now();
    let quantizing = !cfg.full_precision;
    let deadline = cfg.schedule.resolved_deadline(cfg.epochs);
    let mut schedule = ScheduleState::new(
        &model
            .quant_layers()
            .iter()
            .map(crate::schedule::LayerBits::of)
            .collect::<Vec<_>>(),
        &cfg.schedule,
    );
    let mut regularizer = RegularizerConfig::new(cfg.schedule.lambda);

    let mut shuffle = RngStream::new(cfg.seed, streams::DATA_SHUFFLE);
    let mut hessian_rng = RngStream::new(cfg.seed, streams::HESSIAN_BATCH);
    let mut order: Vec<usize> = (0..train.len()).collect();
    hessian_rng.shuffle(&mut order);
    let (hx, hy) = train.batch(&order[..cfg.hessian.batch.min(train.len())]);

    let mut velocity_w: Vec<Tensor> = model
        .slots()
        .iter()
        .map(|s| match *s {
            WeightSlot::Quantized(i) => Tensor::zeros(model.quant_layers()[i].latent.shape()),
            WeightSlot::Full(i) => Tensor::zeros(model.full_layers()[i].shape()),
        })
        .collect();
    let mut velocity_b: Vec<Vec<f64>> = model.biases().iter().map(|b| vec![0.0; b.len()]).collect();

    let initial_betas = betas(model, cfg)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut sensitivity = Vec::new();
    let mut indices: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.epochs {
        let lr = lr_at(epoch - 1, cfg);
        regularizer.active = quantizing && schedule.regularizer_active();
        let lambda = regularizer.effective_lambda();
        shuffle.shuffle(&mut indices);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in indices.chunks(cfg.batch_size).enumerate() {
            let (x, labels) = train.batch(chunk);
            let (weights, masks) = model.effective_weights();
            let (loss, grads) = model.loss_and_grad(&weights, &x, &labels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss });
            }
            loss_sum += loss;
            batches += 1;

            for (p, (mut g, mask)) in grads.weights.into_iter().zip(masks).enumerate() {
                if let Some(mask) = mask {
                    for (gi, m) in g.data_mut().iter_mut().zip(mask.data()) {
                        *gi *= m;
                    }
                }
                if let (WeightSlot::Quantized(q), true) = (model.slots()[p], lambda > 0.0) {
                    g.axpy(lambda, &lsb_l1_grad(&model.quant_layers()[q])?)?;
                }
                let v = &mut velocity_w[p];
                v.scale(cfg.momentum);
                v.axpy(1.0, &g)?;
            }
            for (v, g) in velocity_b.iter_mut().zip(&grads.biases) {
                for (vi, gi) in v.iter_mut().zip(g) {
                    *vi = cfg.momentum * *vi + gi;
                }
            }
            let step_w: Vec<Tensor> = velocity_w.iter().map(|v| v.map(|x| lr * x)).collect();
            let step_b: Vec<Vec<f64>> = velocity_b.iter().map(|v| v.iter().map(|x| lr * x).collect()).collect();
            model.apply_updates(&step_w, &step_b)?;
        }

        let train_loss = loss_sum / batches as f64;
        let reg_loss = if quantizing { lsb_l1(model.quant_layers())? } else { 0.0 };
        let val_acc = evaluate(model, val)?;
        let epoch_betas = betas(model, cfg)?;

        let scheme = BitScheme::from_states(model.quant_layers());
        if quantizing && should_fire(epoch, &cfg.schedule, &schedule, &scheme) {
            let records = if cfg.schedule.hessian_aware {
                let t = Instant::now();
                let r = layer_sensitivities(model, &hx, &hy, &cfg.hessian, cfg.seed, epoch as u64)?;
                debug!(epoch, seconds = t.elapsed().as_secs_f64(), "hessian traces");
                r
            } else {
                Vec::new()
            };
            pruning_event(
                &mut schedule,
                model.quant_layers_mut(),
                &records,
                &cfg.schedule,
                deadline,
                epoch,
            )?;
            if !records.is_empty() {
                sensitivity.push(SensitivitySnapshot { epoch, records });
            }
        }

        let m = EpochMetrics {
            epoch,
            lr,
            train_loss,
            reg_loss,
            val_acc,
            gamma: size_fraction(model, cfg),
            bits: reported_bits(model, cfg),
            betas: epoch_betas,
            phase: schedule.phase,
        };
        info!(
            epoch,
            train_loss = m.train_loss,
            val_acc = m.val_acc,
            gamma = m.gamma,
            bits = ?m.bits,
            "epoch done"
        );
        metrics.push(m);
    }

    let final_val_acc = metrics.last().map_or(0.0, |m| m.val_acc);
    Ok(RunOutcome {
        metrics,
        initial_betas,
        schedule,
        sensitivity,
        final_val_acc,
        scheme: BitScheme::from_states(model.quant_layers()),
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}
