//! Objective terms on plain values. The training loop builds the same terms
//! on the tape; these versions serve inspection and reporting.

use crate::error::{Error, Result};
use crate::tensor;

/// Per-epoch objective components.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub lb_reg: f64,
    pub lb_stab: f64,
    pub unlb_reg: f64,
    pub unlb_stab: f64,
    pub lambda: f64,
    pub total: f64,
}

pub fn total_loss(lb_reg: f64, lb_stab: f64, unlb_reg: f64, unlb_stab: f64, lambda: f64) -> LossBreakdown {
    LossBreakdown {
        lb_reg,
        lb_stab,
        unlb_reg,
        unlb_stab,
        lambda,
        total: lb_reg + lb_stab + lambda * (unlb_reg + unlb_stab),
    }
}

fn mean(it: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        it.sum::<f64>() / n as f64
    }
}

/// `(s − ŝ)² / (2e^ẑ) + ẑ/2`.
pub fn heteroscedastic_term(s: f64, s_hat: f64, z_hat: f64) -> f64 {
    let r = s - s_hat;
    r * r / (2.0 * z_hat.exp()) + z_hat / 2.0
}

/// Labeled heteroscedastic regression for one model.
pub fn loss_lb_reg(s: &[f64], s_hat: &[f64], z_hat: &[f64]) -> f64 {
    mean(
        s.iter()
            .zip(s_hat)
            .zip(z_hat)
            .map(|((&s, &sh), &zh)| heteroscedastic_term(s, sh, zh)),
        s.len(),
    )
}

/// Labeled heteroscedastic regression averaged over both models.
pub fn loss_lb_reg_pair(s: &[f64], models: [(&[f64], &[f64]); 2]) -> f64 {
    models.iter().map(|(sh, zh)| loss_lb_reg(s, sh, zh)).sum::<f64>() / 2.0
}

pub fn loss_lb_stab(z1: &[f64], z2: &[f64]) -> f64 {
    mean(z1.iter().zip(z2).map(|(a, b)| (a - b) * (a - b)), z1.len())
}

/// `models[i] = (ŝ_i, ẑ_i)` over the pseudo-labeled batch.
pub fn loss_unlb_reg(s_plus: &[f64], models: [(&[f64], &[f64]); 2]) -> f64 {
    mean(
        (0..s_plus.len()).map(|j| {
            models
                .iter()
                .map(|(sh, zh)| heteroscedastic_term(s_plus[j], sh[j], zh[j]))
                .sum::<f64>()
        }),
        s_plus.len(),
    )
}

pub fn loss_unlb_stab(z_plus: &[f64], z: [&[f64]; 2]) -> f64 {
    mean(
        (0..z_plus.len()).map(|j| z.iter().map(|zi| (z_plus[j] - zi[j]).powi(2)).sum::<f64>()),
        z_plus.len(),
    )
}

pub fn loss_homoscedastic_lb(s: &[f64], s_hat: &[f64]) -> f64 {
    mean(s.iter().zip(s_hat).map(|(a, b)| (a - b) * (a - b)), s.len())
}

/// Listwise cross-entropy between softmax-normalized truths and predictions
/// over one sampled set.
pub fn loss_rank(truth: &[f64], pred: &[f64]) -> Result<f64> {
    if truth.len() < 2 || truth.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "ranking set needs at least 2 aligned entries, got {} and {}",
            truth.len(),
            pred.len()
        )));
    }
    let mut t = truth.to_vec();
    tensor::softmax_in_place(&mut t);
    let lp = tensor::log_softmax_rows(&tensor::Tensor::vector(pred.to_vec()).reshaped(&[1, pred.len()])?);
    Ok(-t.iter().zip(lp.data()).map(|(a, b)| a * b).sum::<f64>())
}
