//! The pruning state machine: LSB-nonzero rates, model size fraction,
//! α-gated pruning in ascending-β order, the deadline-forced final pass,
//! prune-speed reassignment and the switch to plain QAT.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::LayerQuantState;
use crate::sensitivity::{assign_prune_speed, SensitivityRecord};

/// Bit width of the full-precision reference the size fraction is taken against.
pub const FULL_PRECISION_BITS: u64 = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    #[serde(default = "ScheduleConfig::default_lambda")]
    pub lambda: f64,
    /// Pruning interval `I` in epochs.
    #[serde(default = "ScheduleConfig::default_interval")]
    pub interval: usize,
    /// Layers whose LSB-nonzero rate is below `alpha` get pruned.
    #[serde(default = "ScheduleConfig::default_alpha")]
    pub alpha: f64,
    /// Target size fraction `Γ` (inverse of the target compression ratio).
    #[serde(default = "ScheduleConfig::default_target")]
    pub target: f64,
    /// First epoch at which the α gate is dropped. `None` picks the last
    /// multiple of the interval strictly before `0.75 T`.
    #[serde(default)]
    pub deadline: Option<usize>,
    #[serde(default = "ScheduleConfig::default_min_bits")]
    pub min_bits: u8,
    /// Reassign prune speeds from Hessian sensitivity after each event.
    /// Disabled, every layer keeps a prune speed of one bit.
    #[serde(default = "ScheduleConfig::default_hessian_aware")]
    pub hessian_aware: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lambda: Self::default_lambda(),
            interval: Self::default_interval(),
            alpha: Self::default_alpha(),
            target: Self::default_target(),
            deadline: None,
            min_bits: Self::default_min_bits(),
            hessian_aware: Self::default_hessian_aware(),
        }
    }
}

impl ScheduleConfig {
    fn default_lambda() -> f64 {
        5e-5
    }
    fn default_interval() -> usize {
        20
    }
    fn default_alpha() -> f64 {
        0.3
    }
    fn default_target() -> f64 {
        0.125
    }
    fn default_min_bits() -> u8 {
        1
    }
    fn default_hessian_aware() -> bool {
        true
    }

    pub fn validate(&self, epochs: usize) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!(
                "schedule.lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if self.interval == 0 {
            return Err(Error::Config("schedule.interval must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "schedule.alpha must be in (0, 1), got {}",
                self.alpha
            )));
        }
        if !(self.target > 0.0 && self.target <= 1.0) {
            return Err(Error::Config(format!(
                "schedule.target must be in (0, 1], got {}",
                self.target
            )));
        }
        if !(1..=crate::quantize::MAX_BITS).contains(&self.min_bits) {
            return Err(Error::Config(format!(
                "schedule.min_bits {} outside [1, 8]",
                self.min_bits
            )));
        }
        if let Some(d) = self.deadline {
            if d > epochs {
                return Err(Error::Config(format!(
                    "schedule.deadline {d} exceeds the {epochs} training epochs"
                )));
            }
        }
        Ok(())
    }

    /// The configured deadline, or the last interval multiple before `0.75 T`.
    pub fn resolved_deadline(&self, epochs: usize) -> usize {
        self.deadline.unwrap_or_else(|| {
            let cutoff = 3 * epochs; // compare e < 0.75 T as 4e < 3T
            let mut d = 0;
            let mut e = self.interval;
            while 4 * e < cutoff {
                d = e;
                e += self.interval;
            }
            if d == 0 {
                self.interval.min(epochs)
            } else {
                d
            }
        })
    }
}

/// Precision bookkeeping the state machine acts on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBits {
    pub bits: u8,
    pub prune_speed: u8,
    pub params: usize,
    #[serde(default)]
    pub pinned: bool,
}

impl LayerBits {
    pub fn of(state: &LayerQuantState) -> Self {
        Self {
            bits: state.bits(),
            prune_speed: state.prune_speed(),
            params: state.latent.len(),
            pinned: state.pinned(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemeEntry {
    pub layer: usize,
    pub bits: u8,
    pub params: usize,
}

/// Per-layer precision assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BitScheme {
    pub layers: Vec<SchemeEntry>,
}

impl BitScheme {
    pub fn from_bits(layers: &[LayerBits]) -> Self {
        Self {
            layers: layers
                .iter()
                .enumerate()
                .map(|(layer, l)| SchemeEntry {
                    layer,
                    bits: l.bits,
                    params: l.params,
                })
                .collect(),
        }
    }

    pub fn from_states(states: &[LayerQuantState]) -> Self {
        let bits: Vec<LayerBits> = states.iter().map(LayerBits::of).collect();
        Self::from_bits(&bits)
    }

    pub fn size_fraction(&self) -> f64 {
        size_fraction(self)
    }

    pub fn compression_ratio(&self) -> f64 {
        1.0 / self.size_fraction()
    }

    pub fn distinct_bit_widths(&self) -> usize {
        let mut bits: Vec<u8> = self.layers.iter().map(|l| l.bits).collect();
        bits.sort_unstable();
        bits.dedup();
        bits.len()
    }
}

/// `Σ q_l N_l / (32 Σ N_l)`.
pub fn size_fraction(scheme: &BitScheme) -> f64 {
    fraction_of(scheme.layers.iter().map(|l| (l.bits, l.params)))
}

fn fraction_of(layers: impl Iterator<Item = (u8, usize)>) -> f64 {
    let (mut num, mut den) = (0u64, 0u64);
    for (bits, params) in layers {
        num += bits as u64 * params as u64;
        den += params as u64;
    }
    num as f64 / (FULL_PRECISION_BITS * den) as f64
}

fn bits_fraction(layers: &[LayerBits]) -> f64 {
    fraction_of(layers.iter().map(|l| (l.bits, l.params)))
}

/// Fraction of weights whose LSB slice at the layer's next prune width is
/// nonzero. Layers that cannot be pruned any further report 1.
pub fn lsb_nonzero_rate(state: &LayerQuantState, min_bits: u8) -> Result<f64> {
    let floor = min_bits.max(1);
    if state.pinned() || state.bits() <= floor {
        return Ok(1.0);
    }
    let k = state.prune_speed().min(state.bits() - floor);
    let slice = state.lsb_slice(k)?;
    let nonzero = slice.codes.iter().filter(|&&c| c != 0).count();
    Ok(nonzero as f64 / slice.codes.len().max(1) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Pruning,
    Finetune,
}

/// One precision change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneRecord {
    pub epoch: usize,
    pub layer: usize,
    pub old_bits: u8,
    pub new_bits: u8,
    pub omega: f64,
    pub beta: f64,
    /// Made during the deadline pass, bypassing the α gate.
    pub forced: bool,
}

/// Everything observed at one fired pruning event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSummary {
    pub epoch: usize,
    pub gamma_before: f64,
    pub gamma_after: f64,
    pub betas: Vec<f64>,
    pub omegas: Vec<f64>,
    pub prune_speeds_before: Vec<u8>,
    pub prune_speeds_after: Vec<u8>,
    pub bits_after: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub phase: Phase,
    pub betas: Vec<f64>,
    pub log: Vec<PruneRecord>,
    pub events: Vec<EventSummary>,
    /// Epoch at which the target size was reached, if it has been.
    pub target_reached_at: Option<usize>,
}

impl ScheduleState {
    /// Starts in the pruning phase unless the initial scheme already meets
    /// the target.
    pub fn new(layers: &[LayerBits], cfg: &ScheduleConfig) -> Self {
        let at_target = bits_fraction(layers) <= cfg.target;
        Self {
            phase: if at_target { Phase::Finetune } else { Phase::Pruning },
            betas: vec![1.0; layers.len()],
            log: Vec::new(),
            events: Vec::new(),
            target_reached_at: at_target.then_some(0),
        }
    }

    pub fn regularizer_active(&self) -> bool {
        self.phase == Phase::Pruning
    }

    /// Runs one pruning event given this event's β and Ω for every layer.
    ///
    /// `deadline` is the resolved deadline epoch; from it on the α gate is
    /// dropped until the target is met or nothing can be pruned.
    pub fn apply_event(
        &mut self,
        layers: &mut [LayerBits],
        betas: &[f64],
        omegas: &[f64],
        cfg: &ScheduleConfig,
        deadline: usize,
        epoch: usize,
    ) -> Result<()> {
        if self.phase == Phase::Finetune {
            return Err(Error::StateMachine(format!(
                "pruning event at epoch {epoch} after the target was reached"
            )));
        }
        if cfg.interval == 0 || epoch % cfg.interval != 0 {
            return Err(Error::StateMachine(format!(
                "epoch {epoch} is not a multiple of the pruning interval {}",
                cfg.interval
            )));
        }
        if betas.len() != layers.len() || omegas.len() != layers.len() {
            return Err(Error::Internal(format!(
                "{} layers but {} betas and {} omegas",
                layers.len(),
                betas.len(),
                omegas.len()
            )));
        }

        let gamma_before = bits_fraction(layers);
        let prune_speeds_before: Vec<u8> = layers.iter().map(|l| l.prune_speed).collect();
        self.betas = betas.to_vec();

        let mut order: Vec<usize> = (0..layers.len()).collect();
        order.sort_by(|&a, &b| betas[a].total_cmp(&betas[b]).then(a.cmp(&b)));

        let mut pruner = Pruner {
            layers,
            betas,
            omegas,
            cfg,
            epoch,
            log: &mut self.log,
        };

        for &l in &order {
            if pruner.at_target() {
                break;
            }
            if betas[l] < cfg.alpha {
                pruner.prune(l, false);
            }
        }

        if epoch >= deadline {
            while !pruner.at_target() {
                let mut progressed = false;
                for &l in &order {
                    if pruner.at_target() {
                        break;
                    }
                    progressed |= pruner.prune(l, true);
                }
                if !progressed {
                    break;
                }
            }
        }

        let layers = pruner.layers;
        if cfg.hessian_aware {
            let speeds = assign_prune_speed(omegas)?;
            for (layer, p) in layers.iter_mut().zip(speeds) {
                layer.prune_speed = p;
            }
        }

        let gamma_after = bits_fraction(layers);
        if gamma_after <= cfg.target {
            self.phase = Phase::Finetune;
            self.target_reached_at = Some(epoch);
        }
        self.events.push(EventSummary {
            epoch,
            gamma_before,
            gamma_after,
            betas: betas.to_vec(),
            omegas: omegas.to_vec(),
            prune_speeds_before,
            prune_speeds_after: layers.iter().map(|l| l.prune_speed).collect(),
            bits_after: layers.iter().map(|l| l.bits).collect(),
        });
        Ok(())
    }
}

struct Pruner<'a> {
    layers: &'a mut [LayerBits],
    betas: &'a [f64],
    omegas: &'a [f64],
    cfg: &'a ScheduleConfig,
    epoch: usize,
    log: &'a mut Vec<PruneRecord>,
}

impl Pruner<'_> {
    fn at_target(&self) -> bool {
        bits_fraction(self.layers) <= self.cfg.target
    }

    fn fraction_with(&self, l: usize, bits: u8) -> f64 {
        fraction_of(
            self.layers
                .iter()
                .enumerate()
                .map(|(i, x)| (if i == l { bits } else { x.bits }, x.params)),
        )
    }

    fn prune(&mut self, l: usize, forced: bool) -> bool {
        let layer = self.layers[l];
        let floor = self.cfg.min_bits.max(1);
        if layer.pinned || layer.bits <= floor {
            return false;
        }
        let mut drop = layer.prune_speed.min(layer.bits - floor);
        if drop == 2
            && self.fraction_with(l, layer.bits - 2) < self.cfg.target
            && self.fraction_with(l, layer.bits - 1) <= self.cfg.target
        {
            drop = 1;
        }
        let new_bits = layer.bits - drop;
        self.layers[l].bits = new_bits;
        self.log.push(PruneRecord {
            epoch: self.epoch,
            layer: l,
            old_bits: layer.bits,
            new_bits,
            omega: self.omegas[l],
            beta: self.betas[l],
            forced,
        });
        true
    }
}

/// Whether a pruning event fires after `epoch` (1-based, counted at the end
/// of the epoch).
pub fn should_fire(epoch: usize, cfg: &ScheduleConfig, state: &ScheduleState, scheme: &BitScheme) -> bool {
    epoch > 0
        && cfg.interval > 0
        && epoch % cfg.interval == 0
        && state.phase == Phase::Pruning
        && scheme.size_fraction() > cfg.target
}

/// Full pruning event on live layer states: computes β, applies the state
/// machine, and writes the new precisions and prune speeds back.
pub fn pruning_event(
    state: &mut ScheduleState,
    layers: &mut [LayerQuantState],
    records: &[SensitivityRecord],
    cfg: &ScheduleConfig,
    deadline: usize,
    epoch: usize,
) -> Result<()> {
    let betas = layers
        .iter()
        .map(|l| lsb_nonzero_rate(l, cfg.min_bits))
        .collect::<Result<Vec<_>>>()?;
    let mut omegas = vec![0.0; layers.len()];
    for r in records {
        let slot = omegas
            .get_mut(r.layer)
            .ok_or_else(|| Error::Internal(format!("sensitivity for unknown layer {}", r.layer)))?;
        *slot = r.omega;
    }
    let mut bits: Vec<LayerBits> = layers.iter().map(LayerBits::of).collect();
    state.apply_event(&mut bits, &betas, &omegas, cfg, deadline, epoch)?;
    for (layer, b) in layers.iter_mut().zip(&bits) {
        let removed = layer.bits() - b.bits;
        layer.reduce_bits(removed, cfg.min_bits);
        if !layer.pinned() {
            layer.set_prune_speed(b.prune_speed)?;
        }
    }
    Ok(())
}
