//! Bit-width selection per client and round.
//!
//! * `feddq`: `N = ⌈log₂(range / resolution)⌉`, so the width follows the
//!   update range and falls as training settles.
//! * `fixed`: the same width every round.
//! * `ascending`: a loss-driven rule `s = ⌈s0 · √(f₀ / f)⌉` whose width grows
//!   as the training loss falls.
//! * `full-precision`: no quantization, 64 bits per coordinate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantizer::{bits_for_levels, MAX_BITS};

/// Default FedDQ resolution, in model-coordinate units.
pub const DEFAULT_RESOLUTION: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("training loss must be positive for the ascending rule, got {0}")]
    NonPositiveLoss(f64),
    #[error("initial loss has not been recorded")]
    MissingInitialLoss,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Feddq,
    Fixed,
    Ascending,
    FullPrecision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Output label; defaults to the kind (and width for `fixed`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default = "default_resolution")]
    pub resolution: f64,
    #[serde(default)]
    pub fixed_bits: Option<u8>,
    #[serde(default = "default_s0")]
    pub s0: u64,
    #[serde(default = "default_bit_min")]
    pub bit_min: u8,
    #[serde(default = "default_bit_max")]
    pub bit_max: u8,
}

fn default_resolution() -> f64 {
    DEFAULT_RESOLUTION
}
fn default_s0() -> u64 {
    1
}
fn default_bit_min() -> u8 {
    1
}
fn default_bit_max() -> u8 {
    MAX_BITS
}

impl PolicyConfig {
    fn base(kind: PolicyKind) -> Self {
        Self {
            kind,
            label: None,
            resolution: DEFAULT_RESOLUTION,
            fixed_bits: None,
            s0: 1,
            bit_min: 1,
            bit_max: MAX_BITS,
        }
    }

    pub fn feddq(resolution: f64) -> Self {
        Self {
            resolution,
            ..Self::base(PolicyKind::Feddq)
        }
    }

    pub fn fixed(bits: u8) -> Self {
        Self {
            fixed_bits: Some(bits),
            ..Self::base(PolicyKind::Fixed)
        }
    }

    pub fn ascending(s0: u64) -> Self {
        Self {
            s0,
            ..Self::base(PolicyKind::Ascending)
        }
    }

    pub fn full_precision() -> Self {
        Self::base(PolicyKind::FullPrecision)
    }

    pub fn with_clamps(mut self, bit_min: u8, bit_max: u8) -> Self {
        self.bit_min = bit_min;
        self.bit_max = bit_max;
        self
    }

    pub fn label(&self) -> String {
        if let Some(l) = &self.label {
            return l.clone();
        }
        match self.kind {
            PolicyKind::Feddq => "feddq".into(),
            PolicyKind::Fixed => format!("fixed-{}", self.fixed_bits.unwrap_or(0)),
            PolicyKind::Ascending => "ascending".into(),
            PolicyKind::FullPrecision => "full-precision".into(),
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        if !(1 <= self.bit_min && self.bit_min <= self.bit_max && self.bit_max <= MAX_BITS) {
            return bad(format!("need 1 <= bit_min <= bit_max <= 16, got {}..{}", self.bit_min, self.bit_max));
        }
        match self.kind {
            PolicyKind::Feddq if !(self.resolution > 0.0 && self.resolution.is_finite()) => {
                bad(format!("resolution must be positive, got {}", self.resolution))
            }
            PolicyKind::Fixed => match self.fixed_bits {
                Some(b) if (1..=MAX_BITS).contains(&b) => Ok(()),
                Some(b) => bad(format!("fixed_bits must be in 1..=16, got {b}")),
                None => bad("fixed policy needs fixed_bits".into()),
            },
            PolicyKind::Ascending if self.s0 == 0 => bad("s0 must be positive".into()),
            _ => Ok(()),
        }
    }

    fn clamp(&self, bits: i64) -> u8 {
        bits.clamp(self.bit_min as i64, self.bit_max as i64) as u8
    }
}

/// How one client's update is sent in one round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    /// Stochastic quantization with this many index bits.
    Bits(u8),
    /// Raw 64-bit coordinates; the quantizer is bypassed.
    Full,
}

impl Precision {
    /// Quantization level `s = 2^N − 1`; `None` for full precision.
    pub fn levels(&self) -> Option<u64> {
        match self {
            Precision::Bits(n) => Some((1u64 << n) - 1),
            Precision::Full => None,
        }
    }

    /// Bits per coordinate for reporting.
    pub fn width(&self) -> u8 {
        match self {
            Precision::Bits(n) => *n,
            Precision::Full => 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BitDecision {
    pub client_id: usize,
    pub round: usize,
    pub precision: Precision,
    pub range: f64,
}

/// Cost of a full-precision update under the accounting model.
pub fn full_precision_bits(d: u64) -> u64 {
    64 * d
}

/// Smallest `n` with `2^n >= ratio`, for finite positive `ratio`.
fn ceil_log2(ratio: f64) -> i64 {
    if ratio <= 0.0 || ratio.is_nan() {
        return i64::MIN;
    }
    if ratio.is_infinite() {
        return i64::MAX;
    }
    let mut n = ratio.log2().ceil() as i64;
    // correct the float log at exact powers of two
    while n > i64::MIN / 2 && pow2(n - 1) >= ratio {
        n -= 1;
    }
    while pow2(n) < ratio {
        n += 1;
    }
    n
}

fn pow2(n: i64) -> f64 {
    2f64.powi(n.clamp(-1100, 1100) as i32)
}

/// Range-driven width, clamped to `[bit_min, bit_max]`.
pub fn decide_bits_feddq(range: f64, cfg: &PolicyConfig) -> u8 {
    if !(range > 0.0) {
        return cfg.bit_min;
    }
    cfg.clamp(ceil_log2(range / cfg.resolution))
}

pub fn decide_bits_fixed(cfg: &PolicyConfig) -> u8 {
    cfg.fixed_bits.unwrap_or(cfg.bit_min)
}

/// Loss-driven baseline: `s = ⌈s0 · √(f₀ / f)⌉`, `N = ⌈log₂(s + 1)⌉`.
pub fn decide_bits_ascending(current_loss: f64, state: &PolicyState, cfg: &PolicyConfig) -> Result<u8, PolicyError> {
    let f0 = state.initial_loss.ok_or(PolicyError::MissingInitialLoss)?;
    if !(current_loss > 0.0) {
        return Err(PolicyError::NonPositiveLoss(current_loss));
    }
    let s = (cfg.s0 as f64 * (f0 / current_loss).sqrt()).ceil();
    let s = if s >= u64::MAX as f64 { u64::MAX - 1 } else { s.max(1.0) as u64 };
    Ok(cfg.clamp(bits_for_levels(s) as i64))
}

pub fn decide_bits_full_precision() -> Precision {
    Precision::Full
}

/// Per-run policy state, written only by the orchestrator between rounds.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyState {
    pub initial_loss: Option<f64>,
    pub round: usize,
    pub history: Vec<BitDecision>,
}

/// A policy together with its run state.
#[derive(Debug, Clone)]
pub struct BitPolicy {
    cfg: PolicyConfig,
    state: PolicyState,
}

impl BitPolicy {
    pub fn new(cfg: PolicyConfig) -> Result<Self, PolicyError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: PolicyState::default(),
        })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.cfg
    }

    pub fn state(&self) -> &PolicyState {
        &self.state
    }

    /// Decide a width for every `(client_id, range)` of one round.
    ///
    /// `train_loss` is the loss the ascending rule reacts to: `f(X₀)` at
    /// round 0 and the previous round's averaged client loss afterwards.
    pub fn decide_round(&mut self, round: usize, ranges: &[(usize, f64)], train_loss: f64) -> Result<Vec<BitDecision>, PolicyError> {
        debug_assert!(round >= self.state.round);
        self.state.round = round;
        let shared = match self.cfg.kind {
            PolicyKind::Ascending => {
                if self.state.initial_loss.is_none() {
                    if !(train_loss > 0.0) {
                        return Err(PolicyError::NonPositiveLoss(train_loss));
                    }
                    self.state.initial_loss = Some(train_loss);
                }
                Some(Precision::Bits(decide_bits_ascending(train_loss, &self.state, &self.cfg)?))
            }
            PolicyKind::Fixed => Some(Precision::Bits(decide_bits_fixed(&self.cfg))),
            PolicyKind::FullPrecision => Some(decide_bits_full_precision()),
            PolicyKind::Feddq => None,
        };
        let decisions: Vec<BitDecision> = ranges
            .iter()
            .map(|&(client_id, range)| BitDecision {
                client_id,
                round,
                precision: shared.unwrap_or_else(|| Precision::Bits(decide_bits_feddq(range, &self.cfg))),
                range,
            })
            .collect();
        self.state.history.extend_from_slice(&decisions);
        Ok(decisions)
    }
}
