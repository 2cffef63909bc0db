use crate::error::{Error, Result};
use crate::nn::{Tape, Tensor, Var};

/// min(r·A, clip(r, 1−ε, 1+ε)·A) for one sample.
pub fn clipped_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Coefficients of the policy loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCoefficients {
    pub clip: f64,
    pub entropy: f64,
    pub penalty: f64,
}

/// Batch data the loss is evaluated on.
pub struct LossBatch<'a> {
    pub actions: &'a [usize],
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    /// Legal-action indicator, B×n.
    pub mask: &'a Tensor,
    /// Per-candidate constraint penalty, B×n; `None` in masked mode.
    pub penalties: Option<&'a Tensor>,
}

/// Scalar pieces of one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossParts {
    pub loss: f64,
    pub surrogate: f64,
    pub entropy: f64,
    pub penalty: f64,
    pub ratios: Vec<f64>,
}

/// −E[clipped surrogate] − c_ent·H(π) + c_pen·E[Σ_a π(a)·penalty(a)].
pub fn ppo_loss(t: &mut Tape, logp: Var, batch: &LossBatch, coef: LossCoefficients) -> Result<(Var, LossParts)> {
    let b = batch.actions.len();
    let (rows, n) = t.shape(logp);
    if rows != b || batch.old_log_probs.len() != b || batch.advantages.len() != b {
        return Err(Error::Shape(format!("loss batch of {b} actions against {rows} rows")));
    }
    if batch.mask.shape() != (b, n) || batch.penalties.is_some_and(|p| p.shape() != (b, n)) {
        return Err(Error::Shape("mask or penalty matrix does not match log-probabilities".into()));
    }
    let taken = t.gather_cols(logp, batch.actions.to_vec())?;
    let old = t.constant(Tensor::from_vec(b, 1, batch.old_log_probs.to_vec())?);
    let diff = t.sub(taken, old)?;
    let ratio = t.exp(diff);
    let adv = t.constant(Tensor::from_vec(b, 1, batch.advantages.to_vec())?);
    let unclipped = t.mul(ratio, adv)?;
    let clipped = t.clamp(ratio, 1.0 - coef.clip, 1.0 + coef.clip);
    let clipped = t.mul(clipped, adv)?;
    let surr = t.min(unclipped, clipped)?;
    let surr = t.mean_all(surr);

    let p = t.exp(logp);
    let mask = t.constant(batch.mask.clone());
    let probs = t.mul(p, mask)?;
    let plogp = t.mul(probs, logp)?;
    let neg_h = t.sum_all(plogp);
    let neg_h = t.scale(neg_h, 1.0 / b as f64);

    let ent_term = t.scale(neg_h, coef.entropy);
    let neg_surr = t.scale(surr, -1.0);
    let mut loss = t.add(neg_surr, ent_term)?;
    let mut penalty = 0.0;
    if let Some(pen) = batch.penalties {
        let pen = t.constant(pen.clone());
        let weighted = t.mul(probs, pen)?;
        let total = t.sum_all(weighted);
        let mean = t.scale(total, 1.0 / b as f64);
        penalty = t.value(mean).data[0];
        let term = t.scale(mean, coef.penalty);
        loss = t.add(loss, term)?;
    }
    let parts = LossParts {
        loss: t.value(loss).data[0],
        surrogate: t.value(surr).data[0],
        entropy: -t.value(neg_h).data[0],
        penalty,
        ratios: t.value(ratio).data.clone(),
    };
    if !parts.loss.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss (surrogate {}, entropy {}, penalty {})",
            parts.surrogate, parts.entropy, parts.penalty
        )));
    }
    Ok((loss, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn clipped_objective_cases() {
        assert_eq!(clipped_objective(1.5, 2.0, 0.2), 2.4);
        assert_eq!(clipped_objective(0.5, 2.0, 0.2), 1.0);
        assert_eq!(clipped_objective(1.5, -2.0, 0.2), -3.0);
        assert_eq!(clipped_objective(0.5, -2.0, 0.2), -1.6);
    }

    #[test]
    fn loss_matches_direct_formula() {
        let ps = ParamStore::new();
        let mut t = Tape::new(&ps);
        let raw = Tensor::from_rows(&[vec![0.3, -1.0, 2.0], vec![1.0, 0.0, -0.5]]).unwrap();
        let maskv = vec![true, false, true, true, true, true];
        let x = t.constant(raw);
        let logp = t.masked_log_softmax(x, Arc::new(maskv.clone())).unwrap();
        let lp = t.value(logp).clone();
        let mask = Tensor::from_vec(2, 3, maskv.iter().map(|&m| m as u8 as f64).collect()).unwrap();
        let pen = Tensor::from_rows(&[vec![1.0, 9.0, 0.0], vec![0.0, 2.0, 4.0]]).unwrap();
        let old = [lp.at(0, 2) - 0.4, lp.at(1, 1) + 0.1];
        let adv = [1.0, -0.5];
        let batch = LossBatch {
            actions: &[2, 1],
            old_log_probs: &old,
            advantages: &adv,
            mask: &mask,
            penalties: Some(&pen),
        };
        let coef = LossCoefficients { clip: 0.2, entropy: 0.01, penalty: 10.0 };
        let (_, parts) = ppo_loss(&mut t, logp, &batch, coef).unwrap();
        let surr = (clipped_objective(0.4f64.exp(), 1.0, 0.2) + clipped_objective((-0.1f64).exp(), -0.5, 0.2)) / 2.0;
        let mut ent = 0.0;
        let mut p = 0.0;
        for r in 0..2 {
            for c in 0..3 {
                if maskv[r * 3 + c] {
                    let pr = lp.at(r, c).exp();
                    ent -= pr * lp.at(r, c);
                    p += pr * pen.at(r, c);
                }
            }
        }
        ent /= 2.0;
        p /= 2.0;
        assert!((parts.surrogate - surr).abs() < 1e-12);
        assert!((parts.entropy - ent).abs() < 1e-12);
        assert!((parts.penalty - p).abs() < 1e-12);
        assert!((parts.loss - (-surr - 0.01 * ent + 10.0 * p)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn clipped_objective_is_pessimistic(r in 0.0f64..3.0, a in -5.0f64..5.0, eps in 0.05f64..0.5) {
            let v = clipped_objective(r, a, eps);
            prop_assert!(v <= r * a + 1e-12);
            prop_assert!(v <= r.clamp(1.0 - eps, 1.0 + eps) * a + 1e-12);
        }
    }
}
