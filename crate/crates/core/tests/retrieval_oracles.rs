//! Late-interaction kernel and exhaustive search against naive loops.

use latesim::retrieval::{batch_search, search, EmbeddingStore, SearchMode, SearchRequest};
use latesim::{
    cosine, late_interaction_score, normalized_late_score, truncate, DenseVector, EmbeddingRecord,
    Modality, MultiVector, Role,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| rng.sample::<f32, _>(StandardNormal))
        .collect()
}

fn multi(rng: &mut ChaCha8Rng, t: usize, d: usize) -> MultiVector {
    MultiVector::new(gauss(rng, t * d), d).unwrap()
}

/// Sum over query rows of the best cosine against any document row.
fn naive_late(q: &MultiVector, p: &MultiVector) -> f64 {
    let mut total = 0.0;
    for i in 0..q.len() {
        let mut best = f64::NEG_INFINITY;
        for j in 0..p.len() {
            let (mut dot, mut nq, mut np) = (0.0f64, 0.0f64, 0.0f64);
            for k in 0..q.dim() {
                let (a, b) = (q.row(i)[k] as f64, p.row(j)[k] as f64);
                dot += a * b;
                nq += a * a;
                np += b * b;
            }
            best = best.max(dot / (nq.sqrt() * np.sqrt()));
        }
        total += best;
    }
    total
}

fn naive_cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[test]
fn kernel_matches_naive_on_1000_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..1000 {
        let d = rng.random_range(1..=128);
        let (tq, tp) = (rng.random_range(1..=32), rng.random_range(1..=80));
        let q = multi(&mut rng, tq, d);
        let p = multi(&mut rng, tp, d);
        let fast = late_interaction_score(&q, &p).unwrap();
        let slow = naive_late(&q, &p);
        assert!((fast - slow).abs() < 1e-5, "{fast} vs {slow}");
        let norm = normalized_late_score(&q, &p).unwrap();
        assert!((norm - slow / q.len() as f64).abs() < 1e-5);
    }
}

fn record(rng: &mut ChaCha8Rng, id: String, role: Role, dd: usize, md: usize) -> EmbeddingRecord {
    let t = rng.random_range(1..=12);
    EmbeddingRecord {
        id,
        role,
        modality: if rng.random_bool(0.5) {
            Modality::Text
        } else {
            Modality::Image
        },
        dense: DenseVector::new(gauss(rng, dd)).unwrap(),
        multi: Some(multi(rng, t, md)),
    }
}

/// Ranks every document with `score`, best first, ties by id.
fn naive_rank(
    docs: &[EmbeddingRecord],
    score: impl Fn(&EmbeddingRecord) -> f64,
) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = docs.iter().map(|d| (d.id.clone(), score(d))).collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all
}

fn assert_same(got: &latesim::retrieval::RankedList, want: &[(String, f64)]) {
    assert_eq!(got.len(), want.len());
    for (h, (id, s)) in got.hits.iter().zip(want) {
        assert_eq!(&h.id, id);
        assert!((h.score - s).abs() < 1e-5, "{} vs {s}", h.score);
    }
}

#[test]
fn search_matches_naive_on_50_workloads() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for w in 0..50 {
        let (dd, md) = (32, 16);
        let docs: Vec<EmbeddingRecord> = (0..200)
            .map(|i| record(&mut rng, format!("w{w}-doc{i:03}"), Role::Passage, dd, md))
            .collect();
        let store = EmbeddingStore::from_records(docs.clone()).unwrap();
        let query = record(&mut rng, format!("w{w}-q"), Role::Query, dd, md);
        let qm = query.multi.clone().unwrap();
        let k = rng.random_range(1..=20);

        let dense = naive_rank(&docs, |d| {
            naive_cos(query.dense.as_slice(), d.dense.as_slice())
        });
        let got = search(
            &store,
            &SearchRequest::new(query.clone(), SearchMode::Dense, k),
        )
        .unwrap();
        assert_same(&got, &dense[..k]);

        let late = naive_rank(&docs, |d| naive_late(&qm, d.multi.as_ref().unwrap()));
        let got = search(
            &store,
            &SearchRequest::new(query.clone(), SearchMode::Late, k),
        )
        .unwrap();
        assert_same(&got, &late[..k]);

        let pool = rng.random_range(k..=60);
        let candidates: Vec<EmbeddingRecord> = dense[..pool]
            .iter()
            .map(|(id, _)| store.get(id).unwrap().clone())
            .collect();
        let two = naive_rank(&candidates, |d| naive_late(&qm, d.multi.as_ref().unwrap()));
        let mut req = SearchRequest::new(query.clone(), SearchMode::TwoStage, k);
        req.candidate_pool = Some(pool);
        assert_same(&search(&store, &req).unwrap(), &two[..k]);

        let m = rng.random_range(1..=dd);
        let trunc = naive_rank(&docs, |d| {
            naive_cos(&query.dense.as_slice()[..m], &d.dense.as_slice()[..m])
        });
        let mut req = SearchRequest::new(query.clone(), SearchMode::Dense, k);
        req.truncate_to = Some(m);
        assert_same(&search(&store, &req).unwrap(), &trunc[..k]);
    }
}

#[test]
fn batch_search_equals_sequential() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let docs: Vec<EmbeddingRecord> = (0..300)
        .map(|i| record(&mut rng, format!("d{i}"), Role::Passage, 16, 8))
        .collect();
    let store = EmbeddingStore::from_records(docs).unwrap();
    let reqs: Vec<SearchRequest> = (0..40)
        .map(|i| {
            let mode = [SearchMode::Dense, SearchMode::Late, SearchMode::TwoStage][i % 3];
            SearchRequest::new(
                record(&mut rng, format!("q{i}"), Role::Query, 16, 8),
                mode,
                7,
            )
        })
        .collect();
    let batch = batch_search(&store, &reqs).unwrap();
    for (r, b) in reqs.iter().zip(&batch) {
        assert_eq!(&search(&store, r).unwrap(), b);
    }
}

#[test]
fn ties_break_by_id() {
    let v = DenseVector::new(vec![1.0, 0.0]).unwrap();
    let docs: Vec<EmbeddingRecord> = ["b", "c", "a"]
        .iter()
        .map(|id| EmbeddingRecord {
            id: id.to_string(),
            role: Role::Passage,
            modality: Modality::Text,
            dense: v.clone(),
            multi: None,
        })
        .collect();
    let store = EmbeddingStore::from_records(docs).unwrap();
    let q = EmbeddingRecord {
        id: "q".into(),
        role: Role::Query,
        modality: Modality::Text,
        dense: v,
        multi: None,
    };
    let list = search(&store, &SearchRequest::new(q, SearchMode::Dense, 3)).unwrap();
    assert_eq!(list.ids().collect::<Vec<_>>(), ["a", "b", "c"]);
}

fn vec_strategy(d: usize) -> impl Strategy<Value = Vec<f32>> {
    proptest::collection::vec(-4.0f32..4.0, d)
        .prop_filter("nonzero", |v| v.iter().any(|x| x.abs() > 1e-3))
}

proptest! {
    #[test]
    fn single_token_late_is_cosine((a, b) in (1usize..40).prop_flat_map(|d| (vec_strategy(d), vec_strategy(d)))) {
        let d = a.len();
        let qa = MultiVector::new(a.clone(), d).unwrap();
        let pb = MultiVector::new(b.clone(), d).unwrap();
        let late = late_interaction_score(&qa, &pb).unwrap();
        let cos = cosine(&DenseVector::new(a).unwrap(), &DenseVector::new(b).unwrap()).unwrap();
        prop_assert!((late - cos).abs() < 1e-9, "{} vs {}", late, cos);
    }

    #[test]
    fn normalized_self_similarity_is_one(
        rows in (1usize..24, 1usize..10).prop_flat_map(|(d, t)| proptest::collection::vec(vec_strategy(d), t))
    ) {
        let m = MultiVector::from_rows(&rows).unwrap();
        prop_assert!((normalized_late_score(&m, &m).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn full_truncation_is_identity(v in (1usize..64).prop_flat_map(vec_strategy)) {
        let dv = DenseVector::new(v.clone()).unwrap();
        prop_assert_eq!(truncate(&dv, v.len()).unwrap(), dv);
    }

    #[test]
    fn late_is_bounded_by_query_length(
        (q, p) in (1usize..16).prop_flat_map(|d| (
            proptest::collection::vec(vec_strategy(d), 1..8),
            proptest::collection::vec(vec_strategy(d), 1..8),
        ))
    ) {
        let (q, p) = (MultiVector::from_rows(&q).unwrap(), MultiVector::from_rows(&p).unwrap());
        let s = late_interaction_score(&q, &p).unwrap();
        prop_assert!(s.abs() <= q.len() as f64 + 1e-9);
        // Adding a document token never lowers the score.
        let mut rows: Vec<Vec<f32>> = p.rows().map(<[f32]>::to_vec).collect();
        rows.push(q.row(0).to_vec());
        let grown = MultiVector::from_rows(&rows).unwrap();
        prop_assert!(late_interaction_score(&q, &grown).unwrap() >= s - 1e-12);
    }
}
