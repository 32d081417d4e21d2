//! Agreement metrics and the concordance training objective.
//!
//! The concordance correlation coefficient
//! `rho_c = 2*cov(x,y) / (var(x) + var(y) + (mean(x) - mean(y))^2)`
//! penalizes mean and variance mismatch on top of ordinary correlation, so
//! predictions cannot score well by being correlated but biased or scaled.
//! The loss `1 - rho_c` is differentiable and its analytic gradient is what
//! the trainer backpropagates; `ccc_loss_grad` spells it out exactly,
//! including the `2/N` factor that turns the proportional form into the
//! true derivative (finite differences are the arbiter, see the tests).
//!
//! All moments are population (`1/N`) moments. Only the ratio enters
//! `rho_c`, so any consistent convention cancels; `1/N` keeps the gradient
//! clean.

use crate::error::{AffectError, Result};

/// Below this, `psi` is treated as zero: both tracks constant with equal
/// means, for which no agreement statistic is defined.
const PSI_FLOOR: f64 = 1e-24;

/// A validated (prediction, gold) pair: equal lengths, at least two points,
/// all values finite.
#[derive(Clone, Copy, Debug)]
pub struct PredictionPair<'a> {
    pred: &'a [f64],
    gold: &'a [f64],
}

impl<'a> PredictionPair<'a> {
    pub fn new(pred: &'a [f64], gold: &'a [f64]) -> Result<Self> {
        if pred.len() != gold.len() {
            return Err(AffectError::dim(format!(
                "prediction has {} values, gold {}",
                pred.len(),
                gold.len()
            )));
        }
        if pred.len() < 2 {
            return Err(AffectError::param(format!(
                "need at least 2 values, got {}",
                pred.len()
            )));
        }
        if !pred.iter().chain(gold.iter()).all(|v| v.is_finite()) {
            return Err(AffectError::DegenerateInput(
                "non-finite value in prediction/gold pair".into(),
            ));
        }
        Ok(PredictionPair { pred, gold })
    }

    pub fn pred(&self) -> &'a [f64] {
        self.pred
    }

    pub fn gold(&self) -> &'a [f64] {
        self.gold
    }

    pub fn len(&self) -> usize {
        self.pred.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor enforces len >= 2
    }
}

/// Population moments of a pair, plus `psi`, the denominator of `rho_c`.
#[derive(Clone, Copy, Debug)]
pub struct MomentSet {
    pub mu_x: f64,
    pub mu_y: f64,
    pub var_x: f64,
    pub var_y: f64,
    pub cov_xy: f64,
    pub psi: f64,
}

/// Population (1/N) moments of (pred, gold).
pub fn moments(pair: PredictionPair) -> MomentSet {
    let n = pair.len() as f64;
    let mu_x = pair.pred.iter().sum::<f64>() / n;
    let mu_y = pair.gold.iter().sum::<f64>() / n;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    let mut cov_xy = 0.0;
    for (&x, &y) in pair.pred.iter().zip(pair.gold) {
        let dx = x - mu_x;
        let dy = y - mu_y;
        var_x += dx * dx;
        var_y += dy * dy;
        cov_xy += dx * dy;
    }
    var_x /= n;
    var_y /= n;
    cov_xy /= n;
    let dm = mu_x - mu_y;
    MomentSet {
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov_xy,
        psi: var_x + var_y + dm * dm,
    }
}

fn checked_moments(pred: &[f64], gold: &[f64]) -> Result<(MomentSet, usize)> {
    let pair = PredictionPair::new(pred, gold)?;
    let m = moments(pair);
    if m.psi < PSI_FLOOR {
        return Err(AffectError::DegenerateInput(
            "psi = 0: both tracks constant with equal means".into(),
        ));
    }
    Ok((m, pair.len()))
}

/// Concordance correlation coefficient, in [-1, 1].
pub fn ccc(pred: &[f64], gold: &[f64]) -> Result<f64> {
    let (m, _) = checked_moments(pred, gold)?;
    Ok(2.0 * m.cov_xy / m.psi)
}

/// Concordance loss `1 - rho_c`, in [0, 2].
pub fn ccc_loss(pred: &[f64], gold: &[f64]) -> Result<f64> {
    Ok(1.0 - ccc(pred, gold)?)
}

/// Analytic gradient of `ccc_loss` with respect to the prediction:
/// `d/dx_i = (2/N) * ( 2*cov*(x_i - mu_y)/psi^2 + (mu_y - y_i)/psi )`.
pub fn ccc_loss_grad(pred: &[f64], gold: &[f64]) -> Result<Vec<f64>> {
    let (m, n) = checked_moments(pred, gold)?;
    let scale = 2.0 / n as f64;
    let psi2 = m.psi * m.psi;
    Ok(pred
        .iter()
        .zip(gold)
        .map(|(&x, &y)| scale * (2.0 * m.cov_xy * (x - m.mu_y) / psi2 + (m.mu_y - y) / m.psi))
        .collect())
}

/// Pearson correlation. Errors when either track has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let pair = PredictionPair::new(x, y)?;
    let m = moments(pair);
    if m.var_x < PSI_FLOOR || m.var_y < PSI_FLOOR {
        return Err(AffectError::DegenerateInput(
            "pearson: zero-variance track".into(),
        ));
    }
    Ok(m.cov_xy / (m.var_x.sqrt() * m.var_y.sqrt()))
}

/// Mean squared error.
pub fn mse(pred: &[f64], gold: &[f64]) -> Result<f64> {
    let pair = PredictionPair::new(pred, gold)?;
    let n = pair.len() as f64;
    Ok(pair
        .pred
        .iter()
        .zip(pair.gold)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Combined objective: the mean of the arousal and valence concordance
/// losses.
pub fn combined_loss(
    arousal: (&[f64], &[f64]),
    valence: (&[f64], &[f64]),
) -> Result<f64> {
    Ok((ccc_loss(arousal.0, arousal.1)? + ccc_loss(valence.0, valence.1)?) / 2.0)
}
