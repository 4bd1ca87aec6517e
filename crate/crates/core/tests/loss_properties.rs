use latesim::eval::average_ranks;
use latesim::gradcheck::{run_gradcheck, LOSS_NAMES, TOLERANCE};
use latesim::losses::{
    cosent_from_scores, info_nce, info_nce_plus, kl_distillation, matryoshka_wrap, BatchObjective,
    LossConfig, TrainEmbedding,
};
use latesim::TruncationSchedule;
use ndarray::{Array1, Array2};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-1.0f64..1.0, rows * cols)
        .prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn square() -> impl Strategy<Value = Array2<f64>> {
    (1usize..7).prop_flat_map(|n| matrix(n, n))
}

fn tau() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.02), 0.05f64..1.0]
}

fn row_sums_vanish(g: &Array2<f64>) -> bool {
    g.rows().into_iter().all(|r| r.sum().abs() < 1e-9)
}

proptest! {
    #[test]
    fn info_nce_nonnegative_and_shift_invariant(s in square(), t in tau(), shift in -2.0f64..2.0) {
        let base = info_nce(&s, t).unwrap();
        prop_assert!(base.value >= -1e-12);
        prop_assert!(row_sums_vanish(&base.grad));
        let mut shifted = s.clone();
        shifted.row_mut(0).mapv_inplace(|x| x + shift);
        let moved = info_nce(&shifted, t).unwrap();
        prop_assert!((moved.value - base.value).abs() < 1e-9 * (1.0 + base.value));
    }

    #[test]
    fn info_nce_plus_square_is_info_nce(s in square(), t in tau()) {
        let a = info_nce(&s, t).unwrap();
        let b = info_nce_plus(&s, t).unwrap();
        prop_assert!((a.value - b.value).abs() < 1e-12);
        prop_assert!((&a.grad - &b.grad).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn more_negatives_never_lower_info_nce_plus(
        (k, s) in (1usize..5, 1usize..4).prop_flat_map(|(k, m)| (Just(k), matrix(k, k * (1 + m)))),
        t in tau(),
    ) {
        let full = info_nce_plus(&s, t).unwrap();
        let fewer = info_nce_plus(&s.slice(ndarray::s![.., ..k + k]).to_owned(), t).unwrap();
        prop_assert!(full.value >= fewer.value - 1e-9);
        prop_assert!(row_sums_vanish(&full.grad));
    }

    #[test]
    fn kl_nonnegative_and_zero_on_agreement(
        (s, l) in (1usize..7).prop_flat_map(|n| (matrix(n, n), matrix(n, n))),
        t in tau(),
    ) {
        let kl = kl_distillation(&s, &l, t).unwrap();
        prop_assert!(kl.value >= -1e-12);
        prop_assert!(row_sums_vanish(&kl.grad));
        let same = kl_distillation(&s, &s, t).unwrap();
        prop_assert!(same.value.abs() < 1e-12);
        prop_assert!(same.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn cosent_properties(
        pairs in proptest::collection::vec((-1.0f64..1.0, proptest::option::of(0.0f64..5.0)), 2..8),
        t in tau(),
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<Option<f64>> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(truth.iter().any(Option::is_some));
        let r = cosent_from_scores(&scores, &truth, t).unwrap();
        prop_assert!(r.value >= 0.0);
        prop_assert!(r.grad.sum().abs() < 1e-9);
        for (g, z) in r.grad.iter().zip(&truth) {
            if z.is_none() {
                prop_assert_eq!(*g, 0.0);
            }
        }
        // Scores ordered like the truth with a margin wider than any random
        // score gap can only lower the loss.
        let z: Vec<f64> = truth.iter().map(|z| z.unwrap_or(0.0)).collect();
        let ordered: Vec<f64> = average_ranks(&z).iter().map(|r| 3.0 * r).collect();
        let best = cosent_from_scores(&ordered, &truth, t).unwrap();
        prop_assert!(best.value <= r.value + 1e-9);
    }

    #[test]
    fn single_length_matryoshka_is_plain_objective(
        (n, d, vals) in (2usize..5, 2usize..6).prop_flat_map(|(n, d)| (Just(n), Just(d), proptest::collection::vec(-1.0f64..1.0, 2 * n * d)))
    ) {
        let emb = |i: usize| {
            let dense = Array1::from_vec(vals[i * d..(i + 1) * d].to_vec());
            TrainEmbedding::new(dense.clone(), dense.insert_axis(ndarray::Axis(0)))
        };
        prop_assume!((0..2 * n).all(|i| emb(i).dense.dot(&emb(i).dense) > 1e-3));
        let q: Vec<TrainEmbedding> = (0..n).map(emb).collect();
        let p: Vec<TrainEmbedding> = (n..2 * n).map(emb).collect();
        let cfg = LossConfig::default()
            .with_truncation(TruncationSchedule::new(vec![d]).unwrap(), None)
            .unwrap();
        let wrapped = matryoshka_wrap(&BatchObjective::InfoNce, &q, &p, &cfg).unwrap();
        let mut s = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (&q[i].dense, &p[j].dense);
                s[[i, j]] = a.dot(b) / (a.dot(a).sqrt() * b.dot(b).sqrt());
            }
        }
        let plain = info_nce(&s, cfg.tau).unwrap();
        prop_assert!((wrapped.value - plain.value).abs() < 1e-9 * (1.0 + plain.value));
    }
}

#[test]
fn all_losses_pass_gradcheck_on_100_instances() {
    let report = run_gradcheck(42, 100).unwrap();
    assert_eq!(report.losses.len(), LOSS_NAMES.len());
    for l in &report.losses {
        assert_eq!(l.instances, 100);
        assert!(
            l.max_relative_error < TOLERANCE,
            "{}: {}",
            l.loss,
            l.max_relative_error
        );
    }
    assert!(report.passed);
}

#[test]
fn gradcheck_is_seeded() {
    let a = run_gradcheck(9, 5).unwrap();
    let b = run_gradcheck(9, 5).unwrap();
    let errs = |r: &latesim::gradcheck::GradcheckReport| {
        r.losses
            .iter()
            .map(|l| l.max_relative_error)
            .collect::<Vec<_>>()
    };
    assert_eq!(errs(&a), errs(&b));
}
