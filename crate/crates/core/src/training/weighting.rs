use ndarray::{ArrayView2, Zip};

use super::config::GammaMode;
use crate::error::{Error, Result};
use crate::tensor::{sigmoid, Tape, Var};

/// Mean over samples of `‖σ(h_real) − σ(h_fake)‖₂`, pairing rows by index.
pub fn gamma(real: ArrayView2<f64>, fake: ArrayView2<f64>) -> Result<f64> {
    if real.dim() != fake.dim() {
        return Err(Error::contract(format!(
            "gamma needs matching hidden batches, got {:?} and {:?}",
            real.dim(),
            fake.dim()
        )));
    }
    if real.nrows() == 0 {
        return Err(Error::contract("gamma on an empty batch"));
    }
    let mut total = 0.0;
    for (r, f) in real.rows().into_iter().zip(fake.rows()) {
        let mut sq = 0.0;
        Zip::from(&r).and(&f).for_each(|&a, &b| {
            let diff = sigmoid(a) - sigmoid(b);
            sq += diff * diff;
        });
        total += sq.sqrt();
    }
    Ok(total / real.nrows() as f64)
}

pub fn gamma_with(mode: GammaMode, real: ArrayView2<f64>, fake: ArrayView2<f64>) -> Result<f64> {
    let dist = gamma(real, fake)?;
    Ok(match mode {
        GammaMode::Divergence => dist,
        GammaMode::Similarity => 1.0 / (1.0 + dist),
    })
}

/// Softmax of `gammas` with max subtraction.
pub fn adaptive_weights(gammas: &[f64]) -> Result<Vec<f64>> {
    if gammas.is_empty() {
        return Err(Error::contract("adaptive weights need at least one gamma"));
    }
    if let Some(g) = gammas.iter().find(|g| !g.is_finite()) {
        return Err(Error::contract(format!("non-finite gamma {g}")));
    }
    let max = gammas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = gammas.iter().map(|g| (g - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    Ok(exp.into_iter().map(|e| e / sum).collect())
}

/// `L_g + Σ λ_i · adv_i`, with the weights entering as constants.
pub fn total_gen_loss(tape: &Tape, predictive: Var, adv: &[Var], lambda: &[f64]) -> Result<Var> {
    if adv.len() != lambda.len() {
        return Err(Error::contract(format!(
            "{} adversarial losses but {} weights",
            adv.len(),
            lambda.len()
        )));
    }
    let mut total = predictive;
    for (&a, &l) in adv.iter().zip(lambda) {
        total = tape.add(total, tape.scale(a, l))?;
    }
    Ok(total)
}

/// Plain-float counterpart of [`total_gen_loss`].
pub fn total_gen_loss_value(predictive: f64, adv: &[f64], lambda: &[f64]) -> Result<f64> {
    if adv.len() != lambda.len() {
        return Err(Error::contract(format!(
            "{} adversarial losses but {} weights",
            adv.len(),
            lambda.len()
        )));
    }
    Ok(predictive + adv.iter().zip(lambda).map(|(a, l)| a * l).sum::<f64>())
}
