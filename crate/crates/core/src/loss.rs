//! Region and edge losses: cross-entropy and the dice family
//! (dice, square dice and their exponential-logarithmic forms).
//!
//! All losses reduce over every element of the probability map, so a batch
//! is treated as one large image. The ratio losses add `smooth_eps` to both
//! numerator and denominator.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tape, Tensor, Var};

/// Probabilities are clamped to `[CE_CLAMP, 1 - CE_CLAMP]` inside cross-entropy.
pub const CE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "CE")]
    Ce,
    #[serde(rename = "dice")]
    Dice,
    #[serde(rename = "square-dice")]
    SquareDice,
    #[serde(rename = "exp-log-dice")]
    ExpLogDice,
    #[serde(rename = "exp-square-dice")]
    ExpSquareDice,
}

impl LossKind {
    pub const ALL: [LossKind; 5] = [Self::Ce, Self::Dice, Self::SquareDice, Self::ExpLogDice, Self::ExpSquareDice];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Ce => "CE",
            Self::Dice => "dice",
            Self::SquareDice => "square-dice",
            Self::ExpLogDice => "exp-log-dice",
            Self::ExpSquareDice => "exp-square-dice",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(&norm))
            .ok_or_else(|| Error::config("loss", format!("unknown loss `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub region_kind: LossKind,
    pub edge_kind: LossKind,
    /// Exponent of the exponential-logarithmic variants.
    pub gamma: f64,
    pub smooth_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { region_kind: LossKind::SquareDice, edge_kind: LossKind::SquareDice, gamma: 0.3, smooth_eps: 1e-6 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::config("loss.gamma", "must be > 0"));
        }
        if !(self.smooth_eps > 0.0) {
            return Err(Error::config("loss.smooth_eps", "must be > 0"));
        }
        Ok(())
    }

    /// Evaluates one loss kind with this config's constants.
    pub fn loss<T: Scalar>(&self, tape: &mut Tape<T>, kind: LossKind, p: Var, t: Var) -> Result<Var> {
        match kind {
            LossKind::Ce => ce_loss(tape, p, t),
            LossKind::Dice => dice_loss(tape, p, t, self.smooth_eps),
            LossKind::SquareDice => square_dice_loss(tape, p, t, self.smooth_eps),
            LossKind::ExpLogDice => exp_log_dice_loss(tape, p, t, self.gamma, self.smooth_eps),
            LossKind::ExpSquareDice => exp_square_dice_loss(tape, p, t, self.gamma, self.smooth_eps),
        }
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, p: Var, t: Var, op: &'static str) -> Result<()> {
    if tape.shape(p) != tape.shape(t) {
        return Err(Error::ShapeMismatch { op, left: tape.shape(p).to_vec(), right: tape.shape(t).to_vec() });
    }
    Ok(())
}

/// Mean binary cross-entropy with clamped probabilities.
pub fn ce_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, t: Var) -> Result<Var> {
    same_shape(tape, p, t, "ce_loss")?;
    let pc = tape.clamp(p, lit(CE_CLAMP), lit(1.0 - CE_CLAMP));
    let log_p = tape.log(pc)?;
    let neg_p = tape.neg(pc);
    let one_minus_p = tape.add_scalar(neg_p, T::one());
    let log_q = tape.log(one_minus_p)?;
    let neg_t = tape.neg(t);
    let one_minus_t = tape.add_scalar(neg_t, T::one());
    let pos = tape.mul(t, log_p)?;
    let neg = tape.mul(one_minus_t, log_q)?;
    let both = tape.add(pos, neg)?;
    let m = tape.mean(both);
    Ok(tape.neg(m))
}

/// `(2 Σ num + ε) / (Σ p² + Σ t² + ε)` with `num = p·t` or `(p·t)²`.
fn dice_ratio<T: Scalar>(tape: &mut Tape<T>, p: Var, t: Var, squared: bool, eps: f64) -> Result<Var> {
    let pt = tape.mul(p, t)?;
    let num = if squared { tape.square(pt) } else { pt };
    let num = tape.sum(num);
    let num = tape.scale(num, lit(2.0));
    let num = tape.add_scalar(num, lit(eps));
    let p2 = tape.square(p);
    let p2 = tape.sum(p2);
    let t2 = tape.square(t);
    let t2 = tape.sum(t2);
    let den = tape.add(p2, t2)?;
    let den = tape.add_scalar(den, lit(eps));
    tape.div(num, den)
}

fn one_minus<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Var {
    let n = tape.neg(x);
    tape.add_scalar(n, T::one())
}

/// `[-log(ratio)]^γ`; the base is clamped at zero against rounding above one.
fn exp_log<T: Scalar>(tape: &mut Tape<T>, ratio: Var, gamma: f64) -> Result<Var> {
    let l = tape.log(ratio)?;
    let base = tape.neg(l);
    let base = tape.clamp(base, T::zero(), T::infinity());
    tape.powf(base, lit(gamma))
}

pub fn dice_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, t: Var, smooth_eps: f64) -> Result<Var> {
    same_shape(tape, p, t, "dice_loss")?;
    let r = dice_ratio(tape, p, t, false, smooth_eps)?;
    Ok(one_minus(tape, r))
}

pub fn square_dice_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, t: Var, smooth_eps: f64) -> Result<Var> {
    same_shape(tape, p, t, "square_dice_loss")?;
    let r = dice_ratio(tape, p, t, true, smooth_eps)?;
    Ok(one_minus(tape, r))
}

pub fn exp_log_dice_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, t: Var, gamma: f64, smooth_eps: f64) -> Result<Var> {
    same_shape(tape, p, t, "exp_log_dice_loss")?;
    let r = dice_ratio(tape, p, t, false, smooth_eps)?;
    exp_log(tape, r, gamma)
}

pub fn exp_square_dice_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, t: Var, gamma: f64, smooth_eps: f64) -> Result<Var> {
    same_shape(tape, p, t, "exp_square_dice_loss")?;
    let r = dice_ratio(tape, p, t, true, smooth_eps)?;
    exp_log(tape, r, gamma)
}

/// Region plus edge loss, unweighted.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, region_loss: Var, edge_loss: Var) -> Result<Var> {
    tape.add(region_loss, edge_loss)
}

/// Closed-form per-pixel derivative of the unsmoothed dice losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradFormula {
    Dice,
    SquareDice,
}

/// `∂L/∂p_j` of the unsmoothed dice (or square dice) loss in closed form.
pub fn analytic_grad(kind: GradFormula, p: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    if p.len() != t.len() {
        return Err(Error::ShapeMismatch { op: "analytic_grad", left: vec![p.len()], right: vec![t.len()] });
    }
    let s: f64 = p.iter().map(|v| v * v).sum::<f64>() + t.iter().map(|v| v * v).sum::<f64>();
    if s == 0.0 {
        return Err(Error::Degenerate("sum of p^2 and t^2 is zero"));
    }
    let s2 = s * s;
    Ok(match kind {
        GradFormula::Dice => {
            let spt: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
            p.iter().zip(t).map(|(&pj, &tj)| -(2.0 * tj * s - 4.0 * pj * spt) / s2).collect()
        }
        GradFormula::SquareDice => {
            let spt2: f64 = p.iter().zip(t).map(|(a, b)| (a * b) * (a * b)).sum();
            p.iter().zip(t).map(|(&pj, &tj)| -4.0 * (pj * tj * tj * s - pj * spt2) / s2).collect()
        }
    })
}

/// Evaluates `kind` on plain slices (f64 tape, no gradients).
pub fn evaluate(cfg: &LossConfig, kind: LossKind, p: &[f64], t: &[f64]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let pv = tape.constant(Tensor::from_vec(&[p.len()], p.to_vec())?);
    let tv = tape.constant(Tensor::from_vec(&[t.len()], t.to_vec())?);
    let l = cfg.loss(&mut tape, kind, pv, tv)?;
    Ok(tape.value(l).item())
}

pub const LOSS_CURVE_HEADER: &str = "p,ce,dice,square_dice,exp_log_dice,exp_square_dice";

/// Single-pixel loss curves for a positive label, p = 0.01 ..= 0.99.
pub fn loss_curve_rows(cfg: &LossConfig) -> Result<Vec<[f64; 6]>> {
    (1..=99)
        .map(|i| {
            let p = i as f64 / 100.0;
            let mut row = [p, 0.0, 0.0, 0.0, 0.0, 0.0];
            for (slot, kind) in row[1..].iter_mut().zip(LossKind::ALL) {
                *slot = evaluate(cfg, kind, &[p], &[1.0])?;
            }
            Ok(row)
        })
        .collect()
}

/// Writes the single-pixel loss curves as CSV with 6-decimal fixed-point values.
pub fn emit_loss_curves(path: &Path, cfg: &LossConfig) -> Result<()> {
    cfg.validate()?;
    let mut out = String::new();
    out.push_str(LOSS_CURVE_HEADER);
    out.push('\n');
    for row in loss_curve_rows(cfg)? {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(())
}
