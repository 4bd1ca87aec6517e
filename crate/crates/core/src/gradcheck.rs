//! Central finite-difference check of every loss gradient.
//!
//! Relative error of one instance is `max|a - f| / max(max|a|, max|f|, 1)`
//! over all differentiated coordinates (analytic `a`, numeric `f`). The
//! unit floor keeps saturated instances, whose gradients shrink below the
//! difference quotient's rounding noise, from reading as failures; such
//! instances are counted in [`LossCheck::floored`].

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embed::{ScoreMode, TruncationSchedule};
use crate::error::Result;
use crate::losses::{
    cosent, info_nce, info_nce_hard_negatives, joint_loss_with_teacher, kl_distillation,
    late_teacher, matryoshka_wrap, min_maxsim_margin, BatchGrad, BatchObjective, HardNegativeBatch,
    HardNegativeEntry, LossConfig, PairBatch, PairScores, StsPair, TrainEmbedding,
};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Late-mode instances closer than this to a MaxSim tie are redrawn.
pub const MIN_MARGIN: f64 = 1e-3;
const FLOOR: f64 = 1.0;

#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub loss: String,
    pub instances: usize,
    pub max_relative_error: f64,
    /// Instances whose gradient norm was below the floor.
    pub floored: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub losses: Vec<LossCheck>,
    pub passed: bool,
    /// Wall time; left out of the JSON so reports stay byte-stable.
    #[serde(skip)]
    pub seconds: f64,
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, f)| m.max((a - f).abs()));
    diff / inf_norm(analytic).max(inf_norm(numeric)).max(FLOOR)
}

/// Outcome of one instance: relative error and whether the floor applied.
#[derive(Debug, Clone, Copy)]
struct Instance {
    error: f64,
    floored: bool,
}

fn compare(analytic: &[f64], numeric: &[f64]) -> Instance {
    Instance {
        error: relative_error(analytic, numeric),
        floored: inf_norm(analytic).max(inf_norm(numeric)) < FLOOR,
    }
}

/// Central differences of `f` around `x`.
pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut y = x.to_vec();
    (0..x.len())
        .map(|i| {
            y[i] = x[i] + STEP;
            let up = f(&y);
            y[i] = x[i] - STEP;
            let dn = f(&y);
            y[i] = x[i];
            (up - dn) / (2.0 * STEP)
        })
        .collect()
}

fn sample_tau(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(0.5) {
        0.02
    } else {
        rng.random_range(0.05..1.0)
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn random_embedding(rng: &mut ChaCha8Rng, d: usize, md: usize) -> TrainEmbedding {
    let t = rng.random_range(1..=4);
    TrainEmbedding::new(
        Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0)),
        random_matrix(rng, t, md),
    )
}

fn random_mode(rng: &mut ChaCha8Rng) -> ScoreMode {
    if rng.random_bool(0.5) {
        ScoreMode::Dense
    } else {
        ScoreMode::Late
    }
}

/// Flattens a list of embeddings into one parameter vector and back.
fn flatten(es: &[&[TrainEmbedding]]) -> Vec<f64> {
    es.iter()
        .flat_map(|list| list.iter())
        .flat_map(|e| {
            e.dense
                .iter()
                .chain(e.multi.iter())
                .copied()
                .collect::<Vec<_>>()
        })
        .collect()
}

fn unflatten(x: &[f64], shapes: &[&[TrainEmbedding]]) -> Vec<Vec<TrainEmbedding>> {
    let mut at = 0;
    shapes
        .iter()
        .map(|list| {
            list.iter()
                .map(|e| {
                    let d = e.dense.len();
                    let dense = Array1::from(x[at..at + d].to_vec());
                    at += d;
                    let n = e.multi.len();
                    let multi = Array2::from_shape_vec(e.multi.raw_dim(), x[at..at + n].to_vec())
                        .expect("shape preserved");
                    at += n;
                    TrainEmbedding::new(dense, multi)
                })
                .collect()
        })
        .collect()
}

fn flatten_grad(g: &BatchGrad) -> Vec<f64> {
    flatten(&[&g.queries, &g.passages])
}

fn check_info_nce(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let n = rng.random_range(1..=6);
    let tau = sample_tau(rng);
    let s = random_matrix(rng, n, n);
    let analytic = info_nce(&s, tau)?.grad;
    let numeric = numeric_gradient(s.as_slice().unwrap(), |x| {
        let m = Array2::from_shape_vec((n, n), x.to_vec()).unwrap();
        info_nce(&m, tau).unwrap().value
    });
    Ok(compare(analytic.as_slice().unwrap(), &numeric))
}

fn check_kl(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let (r, c) = (rng.random_range(1..=5), rng.random_range(2..=6));
    let tau = sample_tau(rng);
    let sd = random_matrix(rng, r, c);
    let sl = random_matrix(rng, r, c);
    let analytic = kl_distillation(&sd, &sl, tau)?.grad;
    let numeric = numeric_gradient(sd.as_slice().unwrap(), |x| {
        let m = Array2::from_shape_vec((r, c), x.to_vec()).unwrap();
        kl_distillation(&m, &sl, tau).unwrap().value
    });
    Ok(compare(analytic.as_slice().unwrap(), &numeric))
}

fn hard_negative_batch(rng: &mut ChaCha8Rng, d: usize, md: usize) -> HardNegativeBatch {
    let k = rng.random_range(1..=4);
    let m = rng.random_range(0..=2);
    let entries = (0..k)
        .map(|_| HardNegativeEntry {
            query: random_embedding(rng, d, md),
            positive: random_embedding(rng, d, md),
            negatives: (0..m).map(|_| random_embedding(rng, d, md)).collect(),
        })
        .collect();
    HardNegativeBatch::new(entries).expect("uniform m")
}

fn rebuild_batch(b: &HardNegativeBatch, x: &[f64]) -> HardNegativeBatch {
    let q = b.queries();
    let p = b.passages();
    let mut parts = unflatten(x, &[&q, &p]);
    let passages = parts.pop().unwrap();
    let queries = parts.pop().unwrap();
    let k = queries.len();
    let m = b.negatives_per_query();
    let entries = queries
        .into_iter()
        .enumerate()
        .map(|(i, query)| HardNegativeEntry {
            query,
            positive: passages[i].clone(),
            negatives: passages[k + i * m..k + (i + 1) * m].to_vec(),
        })
        .collect();
    HardNegativeBatch::new(entries).unwrap()
}

fn check_hard_negatives(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let tau = sample_tau(rng);
    let mode = random_mode(rng);
    let batch = loop {
        let b = hard_negative_batch(rng, 6, 4);
        if mode == ScoreMode::Dense || min_maxsim_margin(&b.queries(), &b.passages()) >= MIN_MARGIN
        {
            break b;
        }
    };
    let l = info_nce_hard_negatives(&batch, mode, tau)?;
    let analytic = flatten_grad(&batch.backward(mode, &l.grad)?);
    let x = flatten(&[&batch.queries(), &batch.passages()]);
    let numeric = numeric_gradient(&x, |x| {
        info_nce_hard_negatives(&rebuild_batch(&batch, x), mode, tau)
            .unwrap()
            .value
    });
    Ok(compare(&analytic, &numeric))
}

fn check_cosent(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let tau = sample_tau(rng);
    let mode = random_mode(rng);
    let n = rng.random_range(2..=6);
    let pairs: Vec<StsPair> = loop {
        let pairs: Vec<StsPair> = (0..n)
            .map(|_| StsPair {
                a: random_embedding(rng, 6, 4),
                b: random_embedding(rng, 6, 4),
                ground_truth: Some(rng.random_range(0..=5) as f64),
            })
            .collect();
        let ok = mode == ScoreMode::Dense
            || pairs.iter().all(|p| {
                min_maxsim_margin(std::slice::from_ref(&p.a), std::slice::from_ref(&p.b))
                    >= MIN_MARGIN
            });
        if ok {
            break pairs;
        }
    };
    let a: Vec<TrainEmbedding> = pairs.iter().map(|p| p.a.clone()).collect();
    let b: Vec<TrainEmbedding> = pairs.iter().map(|p| p.b.clone()).collect();
    let l = cosent(&pairs, mode, tau)?;
    let mut g = BatchGrad::zeros(&a, &b);
    for i in 0..n {
        let ps = PairScores::compute(&a[i..=i], &b[i..=i], mode)?;
        let gi = Array2::from_elem((1, 1), l.grad[i]);
        ps.backward(
            &a[i..=i],
            &b[i..=i],
            &gi,
            &mut g.queries[i..=i],
            &mut g.passages[i..=i],
        );
    }
    let analytic = flatten_grad(&g);
    let x = flatten(&[&a, &b]);
    let numeric = numeric_gradient(&x, |x| {
        let mut parts = unflatten(x, &[&a, &b]);
        let bs = parts.pop().unwrap();
        let r: Vec<StsPair> = parts
            .pop()
            .unwrap()
            .into_iter()
            .zip(bs)
            .zip(&pairs)
            .map(|((a, b), p)| StsPair {
                a,
                b,
                ground_truth: p.ground_truth,
            })
            .collect();
        cosent(&r, mode, tau).unwrap().value
    });
    Ok(compare(&analytic, &numeric))
}

fn random_objective(rng: &mut ChaCha8Rng, k: usize) -> (BatchObjective, usize) {
    match rng.random_range(0..3) {
        0 => (BatchObjective::InfoNce, k),
        1 => {
            let m = rng.random_range(1..=2);
            (BatchObjective::InfoNcePlus { negatives: m }, k * (1 + m))
        }
        _ => {
            let ground_truth = (0..k)
                .map(|_| rng.random_bool(0.5).then(|| rng.random_range(0..=5) as f64))
                .collect();
            (BatchObjective::TextMatching { ground_truth }, k)
        }
    }
}

fn random_pair_batch(rng: &mut ChaCha8Rng, d: usize, md: usize, late: bool) -> PairBatch {
    loop {
        let k = rng.random_range(1..=4);
        let (objective, cols) = random_objective(rng, k);
        let q: Vec<_> = (0..k).map(|_| random_embedding(rng, d, md)).collect();
        let p: Vec<_> = (0..cols).map(|_| random_embedding(rng, d, md)).collect();
        if !late || min_maxsim_margin(&q, &p) >= MIN_MARGIN {
            return PairBatch::new(q, p, objective).expect("shape by construction");
        }
    }
}

fn loss_config(rng: &mut ChaCha8Rng, d: usize) -> LossConfig {
    let schedule = TruncationSchedule::halving(d, 2).expect("valid schedule");
    let mw: Vec<f64> = schedule
        .dims()
        .iter()
        .map(|_| rng.random_range(0.2..1.5))
        .collect();
    LossConfig::default()
        .with_truncation(schedule, Some(mw))
        .and_then(|c| c.with_tau(sample_tau(rng)))
        .expect("valid config")
}

fn check_matryoshka(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let d = 8;
    let config = loss_config(rng, d);
    let batch = random_pair_batch(rng, d, 4, false);
    let (q, p) = (&batch.queries, &batch.passages);
    let analytic = flatten_grad(&matryoshka_wrap(&batch.objective, q, p, &config)?.grad);
    let x = flatten(&[q, p]);
    let numeric = numeric_gradient(&x, |x| {
        let mut parts = unflatten(x, &[q, p]);
        let pp = parts.pop().unwrap();
        let qq = parts.pop().unwrap();
        matryoshka_wrap(&batch.objective, &qq, &pp, &config)
            .unwrap()
            .value
    });
    Ok(compare(&analytic, &numeric))
}

fn check_joint(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let d = 8;
    let weights: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..1.5));
    let config = loss_config(rng, d).with_weights(weights)?;
    let txt = random_pair_batch(rng, d, 4, true);
    let multi = if rng.random_bool(0.2) {
        PairBatch::empty()
    } else {
        random_pair_batch(rng, d, 4, true)
    };
    // The KL teacher is held fixed, so the function differentiated numerically
    // must see the same frozen teacher.
    let t0 = late_teacher(&txt)?;
    let t1 = late_teacher(&multi)?;
    let teachers = [t0.as_ref(), t1.as_ref()];
    let j = joint_loss_with_teacher(&txt, &multi, &config, teachers)?;
    let mut analytic = flatten_grad(&j.grad_txt);
    analytic.extend(flatten_grad(&j.grad_multi));
    let shapes: [&[TrainEmbedding]; 4] =
        [&txt.queries, &txt.passages, &multi.queries, &multi.passages];
    let x = flatten(&shapes);
    let numeric = numeric_gradient(&x, |x| {
        let mut parts = unflatten(x, &shapes).into_iter();
        let mut next = |obj: &BatchObjective| PairBatch {
            queries: parts.next().unwrap(),
            passages: parts.next().unwrap(),
            objective: obj.clone(),
        };
        let a = next(&txt.objective);
        let b = next(&multi.objective);
        joint_loss_with_teacher(&a, &b, &config, teachers)
            .unwrap()
            .value
    });
    Ok(compare(&analytic, &numeric))
}

type Checker = fn(&mut ChaCha8Rng) -> Result<Instance>;

pub const LOSS_NAMES: [&str; 6] = [
    "info_nce",
    "info_nce_hard_negatives",
    "cosent",
    "kl_distillation",
    "matryoshka_wrap",
    "joint_loss",
];

/// Runs `instances` random checks per loss. Each loss draws from its own
/// stream derived from `seed`, so results do not depend on check order.
pub fn run_gradcheck(seed: u64, instances: usize) -> Result<GradcheckReport> {
    let start = Instant::now();
    let checkers: [Checker; 6] = [
        check_info_nce,
        check_hard_negatives,
        check_cosent,
        check_kl,
        check_matryoshka,
        check_joint,
    ];
    let mut losses = Vec::new();
    for (i, (name, check)) in LOSS_NAMES.iter().zip(checkers).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut worst = 0.0f64;
        let mut floored = 0;
        for _ in 0..instances {
            let r = check(&mut rng)?;
            worst = worst.max(r.error);
            floored += r.floored as usize;
        }
        log::debug!("{name}: max relative error {worst:.3e}");
        losses.push(LossCheck {
            loss: name.to_string(),
            instances,
            max_relative_error: worst,
            floored,
            passed: worst < TOLERANCE,
        });
    }
    let passed = losses.iter().all(|l| l.passed);
    Ok(GradcheckReport {
        seed,
        step: STEP,
        tolerance: TOLERANCE,
        losses,
        passed,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_basics() {
        assert_eq!(relative_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((relative_error(&[1.0, 2.0], &[1.0, 2.2]) - 0.2 / 2.2).abs() < 1e-12);
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert!((relative_error(&[1e-3], &[2e-3]) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn numeric_gradient_of_quadratic() {
        let g = numeric_gradient(&[1.0, -2.0], |x| x[0] * x[0] + 3.0 * x[1]);
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn small_run_passes() {
        let r = run_gradcheck(7, 10).unwrap();
        for l in &r.losses {
            assert!(l.passed, "{}: {:e}", l.loss, l.max_relative_error);
        }
    }
}
