//! Adversarial, cycle and skeleton consistency losses and their weighted total.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::imgcore::{BinaryGrid, LUMA_WEIGHTS};
use crate::sgce::skeleton_planes;
use crate::tensor::{Element, Tape, Tensor, Var};

/// Scores are clamped to `[LOG_EPS, 1 - LOG_EPS]` before taking logs.
pub const LOG_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cyc: f64,
    pub ske: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cyc: 1.0, ske: 0.001 }
    }
}

impl LossWeights {
    pub fn new(cyc: f64, ske: f64) -> Result<Self> {
        if !(cyc >= 0.0 && ske >= 0.0) || !cyc.is_finite() || !ske.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be finite and non-negative, got cyc={cyc} ske={ske}"
            )));
        }
        Ok(Self { cyc, ske })
    }
}

/// Generator-side adversarial objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GanLoss {
    /// Minimize `-mean ln D(fake)`.
    #[default]
    NonSaturating,
    /// Minimize `mean ln(1 - D(fake))`.
    Minimax,
}

impl FromStr for GanLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nonsat" => Ok(GanLoss::NonSaturating),
            "minimax" => Ok(GanLoss::Minimax),
            other => Err(Error::InvalidConfig(format!(
                "gan loss '{other}' (expected nonsat or minimax)"
            ))),
        }
    }
}

impl fmt::Display for GanLoss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GanLoss::NonSaturating => "nonsat",
            GanLoss::Minimax => "minimax",
        })
    }
}

/// How the skeleton consistency loss reaches the generator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SkeGrad {
    /// Gradients flow through the ink intensity of retained skeleton pixels.
    #[default]
    MaskedIntensity,
    /// The loss is computed for monitoring only.
    None,
}

impl FromStr for SkeGrad {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "masked-intensity" => Ok(SkeGrad::MaskedIntensity),
            "none" => Ok(SkeGrad::None),
            other => Err(Error::InvalidConfig(format!(
                "ske grad '{other}' (expected masked-intensity or none)"
            ))),
        }
    }
}

impl fmt::Display for SkeGrad {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkeGrad::MaskedIntensity => "masked-intensity",
            SkeGrad::None => "none",
        })
    }
}

/// Per-step loss values.
///
/// `adv_x` is the generator's adversarial loss against the discriminator of
/// domain X (judging `G_x(y)`), `adv_y` likewise for domain Y. `cyc` and `ske`
/// are summed over both translation directions.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub adv_x: f64,
    pub adv_y: f64,
    pub cyc: f64,
    pub ske: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const CSV_HEADER: &'static str = "step,adv_x,adv_y,cyc,ske,total";

    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{},{},{},{},{}",
            self.adv_x, self.adv_y, self.cyc, self.ske, self.total
        )
    }

    pub fn all_finite(&self) -> bool {
        [self.adv_x, self.adv_y, self.cyc, self.ske, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `adv_x + adv_y + λ_cyc·cyc + λ_ske·ske`.
pub fn total_loss(adv_x: f64, adv_y: f64, cyc: f64, ske: f64, w: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        adv_x,
        adv_y,
        cyc,
        ske,
        total: adv_x + adv_y + w.cyc * cyc + w.ske * ske,
    }
}

fn clamped_ln<T: Element>(tape: &mut Tape<T>, scores: Var) -> Var {
    let c = tape.clamp(scores, LOG_EPS, 1.0 - LOG_EPS);
    tape.ln(c)
}

fn clamped_ln_complement<T: Element>(tape: &mut Tape<T>, scores: Var) -> Var {
    let c = tape.clamp(scores, LOG_EPS, 1.0 - LOG_EPS);
    let one_minus = tape.affine(c, -1.0, 1.0);
    tape.ln(one_minus)
}

/// `-(mean ln d_real + mean ln(1 - d_fake))`.
pub fn adv_loss_d<T: Element>(tape: &mut Tape<T>, d_real: Var, d_fake: Var) -> Result<Var> {
    let lr = clamped_ln(tape, d_real);
    let real = tape.mean(lr);
    let lf = clamped_ln_complement(tape, d_fake);
    let fake = tape.mean(lf);
    let sum = tape.add(real, fake)?;
    Ok(tape.affine(sum, -1.0, 0.0))
}

pub fn adv_loss_g<T: Element>(tape: &mut Tape<T>, d_fake: Var, kind: GanLoss) -> Var {
    match kind {
        GanLoss::NonSaturating => {
            let l = clamped_ln(tape, d_fake);
            let m = tape.mean(l);
            tape.affine(m, -1.0, 0.0)
        }
        GanLoss::Minimax => {
            let l = clamped_ln_complement(tape, d_fake);
            tape.mean(l)
        }
    }
}

/// Mean absolute difference between an image and its reconstruction.
pub fn cycle_loss<T: Element>(tape: &mut Tape<T>, x: Var, x_rec: Var) -> Result<Var> {
    tape.abs_mean(x, x_rec)
}

/// `[N, 1, H, W]` tensor of 0/1 skeleton masks.
pub fn mask_tensor<T: Element>(grids: &[BinaryGrid]) -> Result<Tensor<T>> {
    let first = grids
        .first()
        .ok_or_else(|| Error::ShapeMismatch("no skeleton masks".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(grids.len() * w * h);
    for g in grids {
        if (g.width(), g.height()) != (w, h) {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} among {}x{} masks",
                g.width(),
                g.height(),
                w,
                h
            )));
        }
        data.extend(g.bits().iter().map(|&b| if b == 1 { T::one() } else { T::zero() }));
    }
    Tensor::new(vec![grids.len(), 1, h, w], data)
}

/// Differentiable ink intensity `1 - gray((x + 1) / 2)` of a `[N, 3, H, W]` batch.
pub fn ink_intensity<T: Element>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let unit = tape.affine(x, 0.5, 0.5);
    let weights = tape.constant(Tensor::from_f64(&[1, 3, 1, 1], &LUMA_WEIGHTS)?);
    let gray = tape.conv2d(unit, weights, None, 1, 0)?;
    Ok(tape.affine(gray, -1.0, 1.0))
}

/// Skeleton consistency between the skeletons of the originals and of the
/// reconstructions `x_rec` (a `[N, 3, H, W]` batch in `[-1, 1]`).
///
/// The reconstruction's skeleton is recomputed from its pixel values and
/// treated as a constant mask over the ink intensity.
pub fn ske_loss<T: Element>(
    tape: &mut Tape<T>,
    target: &[BinaryGrid],
    x_rec: Var,
    threshold: f64,
    grad: SkeGrad,
) -> Result<Var> {
    let (n, _, h, w) = tape.value(x_rec).dims4()?;
    if target.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{} target skeletons for a batch of {}",
            target.len(),
            n
        )));
    }
    let (_, rec_grids) = skeleton_planes(tape.value(x_rec), threshold)?;
    let target_mask = tape.constant(mask_tensor(target)?);
    if tape.value(target_mask).shape() != [n, 1, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "target skeletons {:?} for images {}x{}",
            tape.value(target_mask).shape(),
            w,
            h
        )));
    }
    let rec_mask = tape.constant(mask_tensor(&rec_grids)?);
    let source = match grad {
        SkeGrad::MaskedIntensity => x_rec,
        SkeGrad::None => tape.detach(x_rec),
    };
    let soft = ink_intensity(tape, source)?;
    let masked = tape.mul(rec_mask, soft)?;
    tape.abs_mean(target_mask, masked)
}
