use serde::{Deserialize, Serialize};

use super::NumericsError;

/// How a mask is applied on top of a softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `softmax(logits) ⊙ mask`; surviving mass may be below one.
    Literal,
    /// Renormalised over the allowed entries.
    #[default]
    Normalized,
}

pub fn masked_softmax(
    logits: &[f64],
    mask: &[bool],
    mode: MaskMode,
) -> Result<Vec<f64>, NumericsError> {
    check(logits, mask)?;
    match mode {
        MaskMode::Literal => {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            Ok(exps
                .iter()
                .zip(mask)
                .map(|(e, &m)| if m { e / total } else { 0.0 })
                .collect())
        }
        MaskMode::Normalized => {
            let logp = masked_log_softmax(logits, mask)?;
            Ok(logp
                .iter()
                .zip(mask)
                .map(|(&l, &m)| if m { l.exp() } else { 0.0 })
                .collect())
        }
    }
}

/// Log-probabilities renormalised over allowed entries; masked entries are `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>, NumericsError> {
    check(logits, mask)?;
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| (x - max).exp())
        .sum();
    let lse = max + total.ln();
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { x - lse } else { f64::NEG_INFINITY })
        .collect())
}

fn check(logits: &[f64], mask: &[bool]) -> Result<(), NumericsError> {
    if logits.len() != mask.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "masked_softmax",
            left: (1, logits.len()),
            right: (1, mask.len()),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(NumericsError::AllMasked);
    }
    Ok(())
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ if v.is_nan() => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}
