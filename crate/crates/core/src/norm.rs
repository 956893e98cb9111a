//! Batch, instance and composite normalization layers.
//!
//! Every variant normalizes first and applies one learnable per-channel
//! affine pair last. The composite variants run their two stages in the
//! order given by their name, sharing that single affine pair.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormVariant {
    #[serde(rename = "BN")]
    Bn,
    #[serde(rename = "IN")]
    In,
    #[serde(rename = "IN-BN")]
    InBn,
    #[serde(rename = "BN-IN")]
    BnIn,
    #[serde(rename = "none")]
    None,
}

impl NormVariant {
    pub const ALL: [NormVariant; 5] = [Self::Bn, Self::In, Self::InBn, Self::BnIn, Self::None];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bn => "BN",
            Self::In => "IN",
            Self::InBn => "IN-BN",
            Self::BnIn => "BN-IN",
            Self::None => "none",
        }
    }

    /// Whether the variant keeps running statistics.
    pub fn uses_batch_stats(self) -> bool {
        matches!(self, Self::Bn | Self::InBn | Self::BnIn)
    }

    pub fn has_affine(self) -> bool {
        self != Self::None
    }
}

impl fmt::Display for NormVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for NormVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().replace('_', "-");
        Self::ALL.into_iter().find(|v| v.as_str().eq_ignore_ascii_case(&key)).ok_or_else(|| {
            Error::config("norm", format!("unknown variant `{s}` (expected BN, IN, IN-BN, BN-IN or none)"))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormConfig {
    pub variant: NormVariant,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self { variant: NormVariant::InBn, eps: 1e-5, momentum: 0.1 }
    }
}

impl NormConfig {
    pub fn new(variant: NormVariant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::config("norm.eps", "must be > 0"));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) {
            return Err(Error::config("norm.momentum", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential moving averages of batch statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    /// Number of train-mode updates folded in so far.
    pub updates: u64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![0.0; channels], var: vec![1.0; channels], updates: 0 }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], count: usize, momentum: f64) {
        let unbias = if count > 1 { count as f64 / (count - 1) as f64 } else { 1.0 };
        for c in 0..self.mean.len() {
            let m = self.mean[c] as f64;
            let v = self.var[c] as f64;
            self.mean[c] = ((1.0 - momentum) * m + momentum * batch_mean[c]) as f32;
            self.var[c] = ((1.0 - momentum) * v + momentum * batch_var[c] * unbias) as f32;
        }
        self.updates += 1;
    }
}

/// Learnable per-channel scale and shift, already recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub scale: Var,
    pub shift: Var,
}

fn apply_affine<T: Scalar>(tape: &mut Tape<T>, x: Var, affine: Option<Affine>) -> Result<Var> {
    match affine {
        Some(a) => tape.channel_affine(x, a.scale, a.shift),
        None => Ok(x),
    }
}

/// Batch normalization stage without the affine transform.
fn batch_stage<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &NormConfig,
    mode: Mode,
    stats: &mut RunningStats,
) -> Result<Var> {
    let [n, c, h, w] = tape.value(x).dims4()?;
    if stats.channels() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm (running stats)",
            left: vec![c],
            right: vec![stats.channels()],
        });
    }
    match mode {
        Mode::Train => {
            let (y, mean, var) = tape.batch_norm_train(x, cfg.eps)?;
            stats.update(&mean, &var, n * h * w, cfg.momentum);
            Ok(y)
        }
        Mode::Eval => {
            if stats.updates == 0 {
                return Err(Error::NoRunningStats);
            }
            let inv: Vec<f64> = stats.var.iter().map(|&v| 1.0 / (v as f64 + cfg.eps).sqrt()).collect();
            let scale: Vec<T> = inv.iter().map(|&s| lit(s)).collect();
            let shift: Vec<T> = stats.mean.iter().zip(&inv).map(|(&m, &s)| lit(-(m as f64) * s)).collect();
            let scale = tape.constant(Tensor::from_vec(&[c], scale)?);
            let shift = tape.constant(Tensor::from_vec(&[c], shift)?);
            tape.channel_affine(x, scale, shift)
        }
    }
}

/// Batch normalization: train mode uses batch statistics and folds them into
/// `stats`; eval mode uses `stats`. The affine pair is applied last.
pub fn batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &NormConfig,
    mode: Mode,
    stats: &mut RunningStats,
    affine: Option<Affine>,
) -> Result<Var> {
    let y = batch_stage(tape, x, cfg, mode, stats)?;
    apply_affine(tape, y, affine)
}

/// Instance normalization; identical in train and eval mode.
pub fn instance_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, cfg: &NormConfig, affine: Option<Affine>) -> Result<Var> {
    let y = tape.instance_norm(x, cfg.eps)?;
    apply_affine(tape, y, affine)
}

/// Applies whichever variant `cfg` selects. `stats` is required for the
/// variants that contain a batch stage.
pub fn composite_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    cfg: &NormConfig,
    mode: Mode,
    stats: Option<&mut RunningStats>,
    affine: Option<Affine>,
) -> Result<Var> {
    let need_stats = || Error::config("norm", format!("variant {} needs running statistics", cfg.variant));
    let y = match cfg.variant {
        NormVariant::None => return Ok(x),
        NormVariant::In => tape.instance_norm(x, cfg.eps)?,
        NormVariant::Bn => batch_stage(tape, x, cfg, mode, stats.ok_or_else(need_stats)?)?,
        NormVariant::InBn => {
            let first = tape.instance_norm(x, cfg.eps)?;
            batch_stage(tape, first, cfg, mode, stats.ok_or_else(need_stats)?)?
        }
        NormVariant::BnIn => {
            let first = batch_stage(tape, x, cfg, mode, stats.ok_or_else(need_stats)?)?;
            tape.instance_norm(first, cfg.eps)?
        }
    };
    apply_affine(tape, y, affine)
}
