use latesim::toy::*;
use latesim::{cosine, Error, Modality, Role};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn dataset(seed: u64) -> Dataset {
    generate_synthetic(seed, &DataConfig::default()).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn generator_class_structure() {
    let d = dataset(7);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = d.items.len();
    let (mut intra, mut sib, mut inter) = (Vec::new(), Vec::new(), Vec::new());
    while intra.len() < 1000 || sib.len() < 1000 || inter.len() < 1000 {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        let (a, b) = (&d.items[i], &d.items[j]);
        if i == j || a.modality != b.modality {
            continue;
        }
        let c = raw_cosine(a, b);
        if a.latent_class == b.latent_class {
            intra.push(c);
        } else if d.siblings[a.latent_class].contains(&b.latent_class) {
            sib.push(c);
        } else {
            inter.push(c);
        }
    }
    let (intra, sib, inter) = (
        mean(&intra[..1000]),
        mean(&sib[..1000]),
        mean(&inter[..1000]),
    );
    assert!(intra - inter > 0.1, "intra {intra} inter {inter}");
    assert!(
        inter < sib && sib < intra,
        "intra {intra} sibling {sib} inter {inter}"
    );
}

#[test]
fn generator_is_deterministic() {
    assert_eq!(dataset(7), dataset(7));
    assert_ne!(dataset(7).items[0].tokens, dataset(8).items[0].tokens);
}

#[test]
fn token_counts_in_range() {
    let d = dataset(3);
    assert!(d
        .items
        .iter()
        .all(|it| (2..=8).contains(&it.tokens.nrows()) && it.tokens.ncols() == 12));
}

#[test]
fn zero_steps_leave_encoder_unchanged() {
    let d = dataset(1);
    let cfg = ToyConfig {
        phase1_steps: 0,
        ..ToyConfig::default()
    };
    let (enc, report) = train_phase1(&d, &cfg, 5).unwrap();
    let (again, _) = train_phase1(&d, &cfg, 5).unwrap();
    assert!(report.steps.is_empty());
    assert_eq!(report.initial_loss, report.final_loss);
    assert_eq!(report.probe.len(), 1);
    assert_eq!(enc, again);
    for t in Task::ALL {
        assert_eq!(enc.head(t), enc.base_head());
    }
}

#[test]
fn phase1_loss_halves() {
    let cfg = ToyConfig::default();
    for seed in 1..=3 {
        let d = dataset(seed);
        let (_, r) = train_phase1(&d, &cfg, seed).unwrap();
        assert_eq!(r.steps.len(), 300);
        assert!(
            r.final_loss < 0.5 * r.initial_loss,
            "seed {seed}: {} -> {}",
            r.initial_loss,
            r.final_loss
        );
    }
}

#[test]
fn phase1_reproducible() {
    let d = dataset(2);
    let cfg = ToyConfig {
        phase1_steps: 40,
        ..ToyConfig::default()
    };
    let (a, ra) = train_phase1(&d, &cfg, 11).unwrap();
    let (b, rb) = train_phase1(&d, &cfg, 11).unwrap();
    assert_eq!(a.base_head().checksum(), b.base_head().checksum());
    assert_eq!(ra, rb);
    assert_eq!(
        serde_json::to_string(&ra).unwrap(),
        serde_json::to_string(&rb).unwrap()
    );
    let (c, _) = train_phase1(&d, &cfg, 12).unwrap();
    assert_ne!(a.base_head().checksum(), c.base_head().checksum());
}

#[test]
fn adapters_start_as_copies() {
    let d = dataset(4);
    let cfg = ToyConfig {
        phase1_steps: 20,
        ..ToyConfig::default()
    };
    let (enc, _) = train_phase1(&d, &cfg, 4).unwrap();
    assert!(enc.has_adapters());
    for t in Task::ALL {
        assert_eq!(enc.head_checksum(t), enc.base_head().checksum());
    }
}

#[test]
fn phase2_frozen_and_isolated_for_every_task() {
    let d = dataset(5);
    let cfg = ToyConfig {
        phase1_steps: 60,
        phase2_steps: 30,
        ..ToyConfig::default()
    };
    let (enc, _) = train_phase1(&d, &cfg, 5).unwrap();
    for task in Task::ALL {
        let data = phase2_data(&d, task, &cfg, 5).unwrap();
        let (after, _) = train_phase2(&enc, task, &d, &data, &cfg, 5).unwrap();
        assert_eq!(after.backbone_checksum(), enc.backbone_checksum());
        for other in Task::ALL.into_iter().filter(|&o| o != task) {
            assert_eq!(
                after.head_checksum(other),
                enc.head_checksum(other),
                "{task} touched {other}"
            );
        }
        assert_ne!(
            after.head_checksum(task),
            enc.head_checksum(task),
            "{task} adapter did not train"
        );
    }
}

#[test]
fn retrieval_phase2_keeps_late_quality() {
    let cfg = ToyConfig::default();
    for seed in 1..=3 {
        let d = dataset(seed);
        let (enc, p1) = train_phase1(&d, &cfg, seed).unwrap();
        let data = phase2_data(&d, Task::Retrieval, &cfg, seed).unwrap();
        let (_, p2) = train_phase2(&enc, Task::Retrieval, &d, &data, &cfg, seed).unwrap();
        let h = p2.held_out;
        assert!(
            h.ndcg10_late >= p1.held_out.ndcg10_late,
            "seed {seed}: {h:?} vs {:?}",
            p1.held_out
        );
        assert!(h.ndcg10_late >= h.ndcg10_dense - 0.02, "seed {seed}: {h:?}");
        assert!(
            h.ndcg10_dense >= 0.85 && h.ndcg10_late >= 0.85,
            "seed {seed}: {h:?}"
        );
    }
}

#[test]
fn role_and_task_witnesses() {
    let cfg = ToyConfig::default();
    let (enc, report) = train_all(&cfg, 3).unwrap();
    assert_eq!(report.phase2.len(), 3);
    let d = dataset(3);
    let item = &d.items[d.held_out[0]];
    let q = enc.encode(item, Task::Retrieval, Role::Query).unwrap();
    let p = enc.encode(item, Task::Retrieval, Role::Passage).unwrap();
    assert_ne!(q.dense, p.dense);
    assert!(cosine(&q.dense, &p.dense).unwrap() < 1.0 - 1e-9);
    let code = enc.encode(item, Task::Code, Role::Passage).unwrap();
    assert_ne!(code.multi, p.multi);
}

#[test]
fn task_data_mismatch_rejected() {
    let d = dataset(6);
    let cfg = ToyConfig {
        phase1_steps: 5,
        ..ToyConfig::default()
    };
    let (enc, _) = train_phase1(&d, &cfg, 6).unwrap();
    let pairs = phase2_data(&d, Task::TextMatching, &cfg, 6).unwrap();
    let triplets = phase2_data(&d, Task::Retrieval, &cfg, 6).unwrap();
    assert!(train_phase2(&enc, Task::Retrieval, &d, &pairs, &cfg, 6).is_err());
    assert!(train_phase2(&enc, Task::Code, &d, &pairs, &cfg, 6).is_err());
    assert!(train_phase2(&enc, Task::TextMatching, &d, &triplets, &cfg, 6).is_err());
    assert!(train_phase2(
        &enc,
        Task::TextMatching,
        &d,
        &Phase2Data::ScoredPairs(vec![]),
        &cfg,
        6
    )
    .is_err());
    // Retrieval triplets contain image positives, which the code task refuses.
    assert!(train_phase2(&enc, Task::Code, &d, &triplets, &cfg, 6).is_err());

    let fresh = ToyEncoder::new(BackboneKind::Shared, 12, 16, 8, 1).unwrap();
    assert!(train_phase2(&fresh, Task::Retrieval, &d, &triplets, &cfg, 6).is_err());
}

#[test]
fn divergence_reports_step_and_term() {
    let d = dataset(1);
    let cfg = ToyConfig {
        phase1_lr: 1e300,
        phase1_steps: 50,
        ..ToyConfig::default()
    };
    match train_phase1(&d, &cfg, 1) {
        Err(e @ Error::Diverged { .. }) => {
            assert!(e.is_numerical());
            let Error::Diverged { step, term, .. } = e else {
                unreachable!()
            };
            assert!(step < 50);
            assert!(!term.is_empty());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configs_rejected() {
    let bad = [
        "batch_size = 1",
        "phase1_lr = 0.0",
        "hidden_dim = 8",
        "scored_fraction = 1.5",
        "unknown_key = 3",
        "batch_size = 17",
    ];
    for text in bad {
        let parsed = ToyConfig::from_toml_str(text);
        assert!(
            parsed.is_err() || parsed.unwrap().validate().is_err(),
            "{text}"
        );
    }
    let ok = ToyConfig::from_toml_str("phase1_steps = 10\n[loss]\ntau = 0.05\n").unwrap();
    assert_eq!(ok.phase1_steps, 10);
    assert_eq!(ok.loss.tau, 0.05);
    ok.validate().unwrap();
    let json = serde_json::to_string(&ToyConfig::default()).unwrap();
    assert_eq!(
        ToyConfig::from_json_str(&json).unwrap(),
        ToyConfig::default()
    );
}

#[test]
fn triplet_negatives_come_from_siblings() {
    let d = dataset(8);
    let ts = mine_triplets(&d, 2, true, 8).unwrap();
    assert!(!ts.is_empty());
    for t in &ts {
        let c = d.items[t.query].latent_class;
        assert_eq!(d.items[t.positive].latent_class, c);
        assert_eq!(d.items[t.query].modality, Modality::Text);
        assert_eq!(t.negatives.len(), 2);
        for &n in &t.negatives {
            assert!(d.siblings[c].contains(&d.items[n].latent_class));
            assert_eq!(d.items[n].modality, d.items[t.positive].modality);
        }
        assert!(d.train.contains(&t.query) && d.train.contains(&t.positive));
    }
    let pairs = make_scored_pairs(&d, 8).unwrap();
    assert!(pairs.iter().any(|p| p.ground_truth.is_none()));
    for z in [0.0, 0.5, 1.0] {
        assert!(pairs.iter().any(|p| p.ground_truth == Some(z)));
    }
}

#[test]
fn shared_encoder_has_smaller_gap() {
    let cfg = ToyConfig::default();
    for seed in 1..=3 {
        let r = modality_gap_experiment(seed, &cfg).unwrap();
        assert!(
            r.shared_smaller,
            "seed {seed}: {} vs {}",
            r.shared.modality_gap.gap, r.two_tower.modality_gap.gap
        );
    }
    let a = serde_json::to_string(&modality_gap_experiment(2, &cfg).unwrap()).unwrap();
    let b = serde_json::to_string(&modality_gap_experiment(2, &cfg).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn no_modality_offset_means_no_shared_gap() {
    let mut cfg = ToyConfig::default();
    cfg.data.modality_offset = 0.0;
    let r = modality_gap_experiment(4, &cfg).unwrap();
    assert!(
        r.shared.modality_gap.gap.abs() < 0.05,
        "{}",
        r.shared.modality_gap.gap
    );
}
