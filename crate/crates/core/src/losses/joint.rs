use super::{
    kl_distillation, matryoshka_wrap, BatchGrad, BatchObjective, LossConfig, PairScores,
    TrainEmbedding,
};
use crate::embed::{ScoreMode, SimilarityMatrix};
use crate::error::{Error, Result};

/// Names of the six joint-loss terms, in weight order.
pub const TERM_NAMES: [&str; 6] = [
    "txt_dense_nce",
    "txt_late_nce",
    "txt_kl",
    "multi_dense_nce",
    "multi_late_nce",
    "multi_kl",
];

/// Queries, passages (columns of the score matrix) and the contrastive
/// objective applied to them.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub queries: Vec<TrainEmbedding>,
    pub passages: Vec<TrainEmbedding>,
    pub objective: BatchObjective,
}

impl PairBatch {
    pub fn new(
        queries: Vec<TrainEmbedding>,
        passages: Vec<TrainEmbedding>,
        objective: BatchObjective,
    ) -> Result<Self> {
        if !queries.is_empty() {
            objective.check_shape(queries.len(), passages.len())?;
        }
        Ok(Self {
            queries,
            passages,
            objective,
        })
    }

    pub fn empty() -> Self {
        Self {
            queries: Vec::new(),
            passages: Vec::new(),
            objective: BatchObjective::InfoNce,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct JointLoss {
    pub value: f64,
    /// Unweighted term values, in [`TERM_NAMES`] order.
    pub terms: [f64; 6],
    pub grad_txt: BatchGrad,
    pub grad_multi: BatchGrad,
}

/// Weighted sum of dense NCE (Matryoshka-wrapped), late NCE and dense/late
/// KL on the text batch and on the multimodal batch. An empty batch
/// contributes nothing. The late side of the KL terms is the teacher and
/// receives no gradient from them.
pub fn joint_loss(txt: &PairBatch, multi: &PairBatch, config: &LossConfig) -> Result<JointLoss> {
    joint_loss_with_teacher(txt, multi, config, [None, None])
}

/// [`joint_loss`] with optional fixed teacher matrices for the two KL
/// terms. `None` uses the current late scores.
pub fn joint_loss_with_teacher(
    txt: &PairBatch,
    multi: &PairBatch,
    config: &LossConfig,
    teachers: [Option<&SimilarityMatrix>; 2],
) -> Result<JointLoss> {
    if txt.is_empty() && multi.is_empty() {
        return Err(Error::invalid("joint loss on two empty batches"));
    }
    let mut terms = [0.0; 6];
    let mut grads = Vec::with_capacity(2);
    for (b, (batch, teacher)) in [txt, multi].into_iter().zip(teachers).enumerate() {
        let w = &config.weights[3 * b..3 * b + 3];
        let mut g = BatchGrad::zeros(&batch.queries, &batch.passages);
        if !batch.is_empty() {
            let (q, p) = (&batch.queries, &batch.passages);

            let dense = matryoshka_wrap(&batch.objective, q, p, config)?;
            terms[3 * b] = dense.value;
            g.add_scaled(&dense.grad, w[0]);

            let late = PairScores::late(q, p)?;
            let l = batch.objective.evaluate(&late.scores, config.tau)?;
            terms[3 * b + 1] = l.value;
            if w[1] != 0.0 {
                late.backward(q, p, &(l.grad * w[1]), &mut g.queries, &mut g.passages);
            }

            let full = PairScores::dense(q, p, q[0].dense.len())?;
            let kl = kl_distillation(&full.scores, teacher.unwrap_or(&late.scores), config.tau)?;
            terms[3 * b + 2] = kl.value;
            if w[2] != 0.0 {
                full.backward(q, p, &(kl.grad * w[2]), &mut g.queries, &mut g.passages);
            }
        }
        grads.push(g);
    }
    let value = terms.iter().zip(&config.weights).map(|(t, w)| t * w).sum();
    let grad_multi = grads.pop().unwrap();
    let grad_txt = grads.pop().unwrap();
    Ok(JointLoss {
        value,
        terms,
        grad_txt,
        grad_multi,
    })
}

/// Late score matrix of a batch, for use as a frozen teacher.
pub fn late_teacher(batch: &PairBatch) -> Result<Option<SimilarityMatrix>> {
    if batch.is_empty() {
        return Ok(None);
    }
    Ok(Some(
        PairScores::compute(&batch.queries, &batch.passages, ScoreMode::Late)?.scores,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::TruncationSchedule;
    use crate::losses::info_nce;
    use ndarray::{Array1, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize, md: usize) -> PairBatch {
        let e = |rng: &mut ChaCha8Rng| {
            let t = rng.random_range(1..4);
            TrainEmbedding::new(
                Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0)),
                Array2::from_shape_fn((t, md), |_| rng.random_range(-1.0..1.0)),
            )
        };
        let q = (0..n).map(|_| e(rng)).collect();
        let p = (0..n).map(|_| e(rng)).collect();
        PairBatch::new(q, p, BatchObjective::InfoNce).unwrap()
    }

    fn config() -> LossConfig {
        LossConfig::default()
            .with_truncation(TruncationSchedule::new(vec![8, 4]).unwrap(), None)
            .unwrap()
            .with_tau(0.1)
            .unwrap()
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, m) = (
            random_batch(&mut rng, 3, 8, 4),
            random_batch(&mut rng, 3, 8, 4),
        );
        let c = config().with_weights([0.0; 6]).unwrap();
        let j = joint_loss(&t, &m, &c).unwrap();
        assert_eq!(j.value, 0.0);
    }

    #[test]
    fn single_term_reduction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = random_batch(&mut rng, 3, 8, 4);
        let c = LossConfig::default()
            .with_truncation(TruncationSchedule::new(vec![8]).unwrap(), None)
            .unwrap()
            .with_weights([1.0, 0.0, 0.0, 0.0, 0.0, 0.0])
            .unwrap();
        let j = joint_loss(&t, &PairBatch::empty(), &c).unwrap();
        let s = PairScores::dense(&t.queries, &t.passages, 8)
            .unwrap()
            .scores;
        assert!((j.value - info_nce(&s, c.tau).unwrap().value).abs() < 1e-12);
    }

    #[test]
    fn equals_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (t, m) = (
            random_batch(&mut rng, 4, 8, 4),
            random_batch(&mut rng, 3, 8, 4),
        );
        let c = config();
        let j = joint_loss(&t, &m, &c).unwrap();
        let mut expected = 0.0;
        for b in [&t, &m] {
            let (q, p) = (&b.queries, &b.passages);
            for &k in &[8, 4] {
                let s = PairScores::dense(q, p, k).unwrap().scores;
                expected += info_nce(&s, c.tau).unwrap().value;
            }
            let late = PairScores::late(q, p).unwrap().scores;
            expected += info_nce(&late, c.tau).unwrap().value;
            let dense = PairScores::dense(q, p, 8).unwrap().scores;
            expected += kl_distillation(&dense, &late, c.tau).unwrap().value;
        }
        assert!((j.value - expected).abs() < 1e-9);
    }

    #[test]
    fn both_empty_is_an_error() {
        assert!(joint_loss(&PairBatch::empty(), &PairBatch::empty(), &config()).is_err());
    }
}
