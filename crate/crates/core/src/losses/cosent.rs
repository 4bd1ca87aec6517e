use ndarray::Array1;

use super::{check_tau, LossValueAndGrad, PairScores, TrainEmbedding};
use crate::embed::ScoreMode;
use crate::error::{Error, Result};

/// Two inputs with an optional ground-truth similarity.
#[derive(Debug, Clone)]
pub struct StsPair {
    pub a: TrainEmbedding,
    pub b: TrainEmbedding,
    pub ground_truth: Option<f64>,
}

/// CoSENT over model similarities `scores[i]` with ground truth
/// `truth[i]`:
///
/// ```text
/// ln(1 + Σ_{ζ_i > ζ_j} exp((s_j - s_i) / τ))
/// ```
///
/// Entries whose truth is `None` do not take part (their gradient is 0).
pub fn cosent_from_scores(
    scores: &[f64],
    truth: &[Option<f64>],
    tau: f64,
) -> Result<LossValueAndGrad<Array1<f64>>> {
    check_tau(tau)?;
    if scores.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} ground-truth slots",
            scores.len(),
            truth.len()
        )));
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(Error::NonFinite("CoSENT similarities".into()));
    }
    let labelled: Vec<(usize, f64)> = truth
        .iter()
        .enumerate()
        .filter_map(|(i, z)| z.map(|z| (i, z)))
        .collect();
    if labelled.is_empty() {
        return Err(Error::invalid(
            "CoSENT needs at least one pair with ground truth",
        ));
    }
    if labelled.iter().any(|(_, z)| !z.is_finite()) {
        return Err(Error::NonFinite("CoSENT ground truth".into()));
    }

    // Exponents of every ordered violation term, plus the implicit 0 for the "1 +".
    let mut terms = Vec::new();
    for &(i, zi) in &labelled {
        for &(j, zj) in &labelled {
            if zi > zj {
                terms.push((i, j, (scores[j] - scores[i]) / tau));
            }
        }
    }
    let max = terms.iter().fold(0.0f64, |m, t| m.max(t.2));
    let sum = (-max).exp() + terms.iter().map(|t| (t.2 - max).exp()).sum::<f64>();
    let value = max + sum.ln();

    let mut grad = Array1::zeros(scores.len());
    for &(i, j, x) in &terms {
        let w = (x - value).exp() / tau;
        grad[j] += w;
        grad[i] -= w;
    }
    Ok(LossValueAndGrad { value, grad })
}

/// CoSENT on embedding pairs; `grad` is with respect to each pair's
/// similarity.
pub fn cosent(
    pairs: &[StsPair],
    mode: ScoreMode,
    tau: f64,
) -> Result<LossValueAndGrad<Array1<f64>>> {
    let mut scores = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let ps = PairScores::compute(
            std::slice::from_ref(&pair.a),
            std::slice::from_ref(&pair.b),
            mode,
        )?;
        scores.push(ps.scores[[0, 0]]);
    }
    let truth: Vec<Option<f64>> = pairs.iter().map(|p| p.ground_truth).collect();
    cosent_from_scores(&scores, &truth, tau)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pair_is_zero() {
        let l = cosent_from_scores(&[0.4], &[Some(0.9)], 0.02).unwrap();
        assert_eq!(l.value, 0.0);
        assert_eq!(l.grad[0], 0.0);
    }

    #[test]
    fn ordered_pairs_closed_form() {
        // pair 0 more similar by ground truth and by margin 1 in score.
        let l = cosent_from_scores(&[1.0, 0.0], &[Some(1.0), Some(0.0)], 1.0).unwrap();
        assert!((l.value - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l.value - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn equal_truths_give_zero() {
        let l = cosent_from_scores(&[0.1, 0.9, -0.3], &[Some(0.5); 3], 0.02).unwrap();
        assert_eq!(l.value, 0.0);
    }

    #[test]
    fn unlabelled_entries_are_ignored() {
        let a = cosent_from_scores(&[0.3, 0.8], &[Some(2.0), Some(1.0)], 0.1).unwrap();
        let b = cosent_from_scores(&[0.3, 5.0, 0.8], &[Some(2.0), None, Some(1.0)], 0.1).unwrap();
        assert!((a.value - b.value).abs() < 1e-15);
        assert_eq!(b.grad[1], 0.0);
        assert!(cosent_from_scores(&[0.3], &[None], 0.1).is_err());
    }

    #[test]
    fn shift_invariance() {
        let s = [0.2, -0.4, 0.7, 0.1];
        let z = [Some(3.0), Some(1.0), Some(2.0), Some(0.5)];
        let a = cosent_from_scores(&s, &z, 0.05).unwrap().value;
        let shifted: Vec<f64> = s.iter().map(|v| v + 0.37).collect();
        let b = cosent_from_scores(&shifted, &z, 0.05).unwrap().value;
        assert!((a - b).abs() < 1e-9);
    }
}
