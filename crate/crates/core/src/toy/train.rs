//! Two-phase training of the toy encoder with plain SGD.
//!
//! Phase 1 trains the single base head on text-text and text-image pairs
//! with the joint loss, then copies it into the three task adapters.
//! Phase 2 trains one adapter on task data while the backbone and the other
//! adapters stay bit-identical.

use std::collections::{BTreeMap, HashMap};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{generate_synthetic, DataConfig, Dataset, Split, SyntheticItem};
use super::encoder::{BackboneKind, ForwardCache, Head, Task, ToyEncoder};
use crate::embed::{Modality, Role};
use crate::error::{Error, Result};
use crate::eval::ndcg_at_k;
use crate::losses::{
    joint_loss, BatchGrad, BatchObjective, JointLoss, LossConfig, PairBatch, TrainEmbedding,
    TERM_NAMES,
};
use crate::retrieval::{search, EmbeddingStore, SearchMode, SearchRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub data: DataConfig,
    pub hidden_dim: usize,
    pub multi_dim: usize,
    /// Pairs per batch; each step uses one text batch and one text-image batch.
    pub batch_size: usize,
    pub phase1_steps: usize,
    pub phase1_lr: f64,
    pub phase2_steps: usize,
    pub phase2_lr: f64,
    /// Hard negatives per triplet in phase 2.
    pub hard_negatives: usize,
    /// Share of each text-matching batch that carries a ground-truth score.
    pub scored_fraction: f64,
    /// Probe-loss evaluation interval (the first and last step are always probed).
    pub probe_every: usize,
    pub loss: LossConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            hidden_dim: 16,
            multi_dim: 8,
            batch_size: 16,
            phase1_steps: 300,
            phase1_lr: 0.005,
            phase2_steps: 150,
            phase2_lr: 0.005,
            hard_negatives: 1,
            scored_fraction: 0.5,
            probe_every: 25,
            loss: LossConfig::default(),
        }
    }
}

impl ToyConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.loss.check_trainable()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.multi_dim == 0 {
            return bad("hidden_dim and multi_dim must be >= 1".into());
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2".into());
        }
        if self.loss.truncation.full_dim() != self.hidden_dim {
            return bad(format!(
                "truncation schedule must start at hidden_dim {}, starts at {}",
                self.hidden_dim,
                self.loss.truncation.full_dim()
            ));
        }
        for lr in [self.phase1_lr, self.phase2_lr] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("learning rates must be > 0, got {lr}"));
            }
        }
        if !(0.0..=1.0).contains(&self.scored_fraction) {
            return bad("scored_fraction must lie in [0, 1]".into());
        }
        if self.probe_every == 0 {
            return bad("probe_every must be >= 1".into());
        }
        let groups = self
            .data
            .n_classes
            .div_ceil(self.data.hard_negative_sibling_classes + 1);
        if self.batch_size > groups {
            return bad(format!(
                "batch_size {} exceeds the {groups} sibling groups available for collision-free batches",
                self.batch_size
            ));
        }
        Ok(())
    }
}

/// Loss of one step, total and per term (unweighted).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLoss {
    pub step: usize,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

impl StepLoss {
    fn new(step: usize, j: &JointLoss) -> Self {
        Self {
            step,
            total: j.value,
            terms: TERM_NAMES
                .iter()
                .zip(j.terms)
                .map(|(n, v)| (n.to_string(), v))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeldOutMetrics {
    pub ndcg10_dense: f64,
    pub ndcg10_late: f64,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRunReport {
    pub phase: String,
    pub task: Option<String>,
    pub seed: u64,
    pub config: ToyConfig,
    /// Loss on each training batch.
    pub steps: Vec<StepLoss>,
    /// Loss on a fixed probe batch at regular intervals.
    pub probe: Vec<StepLoss>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub held_out: HeldOutMetrics,
    pub backbone_checksum: String,
    pub head_checksums: BTreeMap<String, String>,
}

/// Independent RNG streams derived from one seed.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_ENCODER: u64 = 1;
const STREAM_BATCHES: u64 = 2;
const STREAM_PROBE: u64 = 3;
const STREAM_PHASE2: u64 = 4;

/// A batch given as item indices plus per-pair roles fixed by position:
/// `queries` are encoded as queries, `passages` as passages.
#[derive(Debug, Clone)]
struct IndexBatch {
    queries: Vec<usize>,
    passages: Vec<usize>,
    objective: BatchObjective,
}

impl IndexBatch {
    fn empty() -> Self {
        Self {
            queries: Vec::new(),
            passages: Vec::new(),
            objective: BatchObjective::InfoNce,
        }
    }
}

struct Encoded {
    batch: PairBatch,
    q_cache: Vec<ForwardCache>,
    p_cache: Vec<ForwardCache>,
}

fn encode_batch(
    enc: &ToyEncoder,
    head: &Head,
    items: &[SyntheticItem],
    b: &IndexBatch,
) -> Result<Encoded> {
    let run = |idx: &[usize], role: Role| -> Result<(Vec<TrainEmbedding>, Vec<ForwardCache>)> {
        let mut out = (Vec::with_capacity(idx.len()), Vec::with_capacity(idx.len()));
        for &i in idx {
            let (e, c) = enc.forward(head, &items[i], role)?;
            out.0.push(e);
            out.1.push(c);
        }
        Ok(out)
    };
    let (q, q_cache) = run(&b.queries, Role::Query)?;
    let (p, p_cache) = run(&b.passages, Role::Passage)?;
    Ok(Encoded {
        batch: PairBatch::new(q, p, b.objective.clone())?,
        q_cache,
        p_cache,
    })
}

fn backprop(enc: &ToyEncoder, head: &Head, e: &Encoded, g: &BatchGrad, acc: &mut Head) {
    for (c, gq) in e.q_cache.iter().zip(&g.queries) {
        enc.backward(head, c, gq, acc);
    }
    for (c, gp) in e.p_cache.iter().zip(&g.passages) {
        enc.backward(head, c, gp, acc);
    }
}

fn check_terms(step: usize, j: &JointLoss) -> Result<()> {
    for (name, v) in TERM_NAMES.iter().zip(j.terms) {
        if !v.is_finite() {
            return Err(Error::Diverged {
                step,
                term: name.to_string(),
                value: v,
            });
        }
    }
    Ok(())
}

/// Turns a numerical failure inside the loss into a divergence report.
fn as_divergence(step: usize, term: &str, e: Error) -> Error {
    match e {
        Error::NonFinite(_) => Error::Diverged {
            step,
            term: term.to_string(),
            value: f64::NAN,
        },
        other => other,
    }
}

/// Loss and head gradient of one (text, multimodal) batch pair.
fn loss_and_grad(
    enc: &ToyEncoder,
    head: &Head,
    items: &[SyntheticItem],
    txt: &IndexBatch,
    multi: &IndexBatch,
    config: &LossConfig,
    step: usize,
) -> Result<(JointLoss, Head)> {
    let t = encode_batch(enc, head, items, txt)?;
    let m = encode_batch(enc, head, items, multi)?;
    let j =
        joint_loss(&t.batch, &m.batch, config).map_err(|e| as_divergence(step, "similarity", e))?;
    check_terms(step, &j)?;
    let mut grad = head.zeros_like();
    backprop(enc, head, &t, &j.grad_txt, &mut grad);
    backprop(enc, head, &m, &j.grad_multi, &mut grad);
    Ok((j, grad))
}

fn sgd_step(head: &mut Head, grad: &Head, lr: f64, step: usize) -> Result<()> {
    head.add_scaled(grad, -lr);
    if head.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            term: "parameters".into(),
            value: f64::NAN,
        })
    }
}

/// One class per sibling group, so no in-batch negative is a hidden
/// positive or a sibling of another row's negatives.
fn sample_group_classes(d: &Dataset, rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let group = d.config.hard_negative_sibling_classes + 1;
    let groups = d.n_classes().div_ceil(group);
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, groups, n.min(groups)).into_vec();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|g| {
            let lo = g * group;
            let hi = ((g + 1) * group).min(d.n_classes());
            rng.random_range(lo..hi)
        })
        .collect()
}

fn pick(rng: &mut ChaCha8Rng, pool: &[usize]) -> usize {
    *pool.choose(rng).expect("nonempty pool")
}

/// Two distinct members.
fn pick_two(rng: &mut ChaCha8Rng, pool: &[usize]) -> (usize, usize) {
    let i = rng.random_range(0..pool.len());
    let mut j = rng.random_range(0..pool.len() - 1);
    if j >= i {
        j += 1;
    }
    (pool[i], pool[j])
}

struct ClassIndex {
    text: Vec<Vec<usize>>,
    image: Vec<Vec<usize>>,
}

impl ClassIndex {
    fn new(d: &Dataset, split: Split) -> Self {
        let per = |m| (0..d.n_classes()).map(|c| d.members(split, c, m)).collect();
        Self {
            text: per(Modality::Text),
            image: per(Modality::Image),
        }
    }
}

fn phase1_batches(
    d: &Dataset,
    idx: &ClassIndex,
    rng: &mut ChaCha8Rng,
    n: usize,
) -> (IndexBatch, IndexBatch) {
    let mut txt = IndexBatch::empty();
    for c in sample_group_classes(d, rng, n) {
        let (q, p) = pick_two(rng, &idx.text[c]);
        txt.queries.push(q);
        txt.passages.push(p);
    }
    let mut multi = IndexBatch::empty();
    for c in sample_group_classes(d, rng, n) {
        multi.queries.push(pick(rng, &idx.text[c]));
        multi.passages.push(pick(rng, &idx.image[c]));
    }
    (txt, multi)
}

fn head_checksums(enc: &ToyEncoder) -> BTreeMap<String, String> {
    if enc.has_adapters() {
        Task::ALL
            .iter()
            .map(|&t| (t.name().to_string(), enc.head_checksum(t)))
            .collect()
    } else {
        BTreeMap::from([("base".to_string(), enc.base_head().checksum())])
    }
}

/// Dense and late nDCG@10 on the held-out split: every held-out text item
/// queries all other held-out items; same-class items are relevant.
pub fn evaluate_held_out(enc: &ToyEncoder, d: &Dataset, task: Task) -> Result<HeldOutMetrics> {
    let held = d.split(Split::HeldOut);
    let passages = held
        .iter()
        .map(|&i| enc.encode(&d.items[i], task, Role::Passage))
        .collect::<Result<Vec<_>>>()?;
    let store = EmbeddingStore::from_records(passages)?;
    let mut dense = Vec::new();
    let mut late = Vec::new();
    for &qi in held
        .iter()
        .filter(|&&i| d.items[i].modality == Modality::Text)
    {
        let item = &d.items[qi];
        let query = enc.encode(item, task, Role::Query)?;
        let judged: BTreeMap<String, u32> = held
            .iter()
            .filter(|&&i| i != qi)
            .map(|&i| {
                (
                    d.items[i].id.clone(),
                    (d.items[i].latent_class == item.latent_class) as u32,
                )
            })
            .collect();
        for (mode, out) in [
            (SearchMode::Dense, &mut dense),
            (SearchMode::Late, &mut late),
        ] {
            // One extra hit, since the query's own passage copy is dropped.
            let list = search(&store, &SearchRequest::new(query.clone(), mode, 11))?;
            let ranked = list.ids().filter(|id| *id != item.id).take(10);
            out.push(ndcg_at_k(ranked, &judged, 10)?.expect("held-out classes have positives"));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(HeldOutMetrics {
        ndcg10_dense: mean(&dense),
        ndcg10_late: mean(&late),
        queries: dense.len(),
    })
}

/// Phase 1 on a fresh encoder. Returns the encoder with its head already
/// duplicated into the three task adapters.
pub fn train_phase1(
    d: &Dataset,
    config: &ToyConfig,
    seed: u64,
) -> Result<(ToyEncoder, TrainRunReport)> {
    train_phase1_with(d, config, seed, BackboneKind::Shared)
}

pub fn train_phase1_with(
    d: &Dataset,
    config: &ToyConfig,
    seed: u64,
    kind: BackboneKind,
) -> Result<(ToyEncoder, TrainRunReport)> {
    config.validate()?;
    if d.config.feature_dim != config.data.feature_dim {
        return Err(Error::DimensionMismatch {
            expected: config.data.feature_dim,
            found: d.config.feature_dim,
        });
    }
    let init_seed = stream(seed, STREAM_ENCODER).random::<u64>();
    let mut enc = ToyEncoder::new(
        kind,
        d.config.feature_dim,
        config.hidden_dim,
        config.multi_dim,
        init_seed,
    )?;
    let idx = ClassIndex::new(d, Split::Train);
    if idx.text.iter().any(|v| v.len() < 2) || idx.image.iter().any(Vec::is_empty) {
        return Err(Error::invalid(
            "phase 1 needs text-text and text-image pairs for every class",
        ));
    }
    let mut rng = stream(seed, STREAM_BATCHES);
    let probe = phase1_batches(d, &idx, &mut stream(seed, STREAM_PROBE), config.batch_size);
    let scale = 1.0 / config.batch_size as f64;

    let probe_loss = |enc: &ToyEncoder, step: usize| -> Result<StepLoss> {
        let (j, _) = loss_and_grad(
            enc,
            enc.base_head(),
            &d.items,
            &probe.0,
            &probe.1,
            &config.loss,
            step,
        )?;
        Ok(StepLoss::new(step, &j))
    };
    let mut probes = vec![probe_loss(&enc, 0)?];
    let mut steps = Vec::with_capacity(config.phase1_steps);
    for step in 0..config.phase1_steps {
        let (txt, multi) = phase1_batches(d, &idx, &mut rng, config.batch_size);
        let (j, grad) = loss_and_grad(
            &enc,
            enc.base_head(),
            &d.items,
            &txt,
            &multi,
            &config.loss,
            step,
        )?;
        steps.push(StepLoss::new(step, &j));
        sgd_step(enc.base_head_mut(), &grad, config.phase1_lr * scale, step)?;
        let done = step + 1;
        if done % config.probe_every == 0 || done == config.phase1_steps {
            probes.push(probe_loss(&enc, done)?);
        }
    }
    enc.duplicate_adapters();
    let held_out = evaluate_held_out(&enc, d, Task::Retrieval)?;
    log::info!(
        "phase 1 ({:?}): probe loss {:.4} -> {:.4}, ndcg@10 dense {:.4} late {:.4}",
        kind,
        probes[0].total,
        probes.last().unwrap().total,
        held_out.ndcg10_dense,
        held_out.ndcg10_late
    );
    let report = TrainRunReport {
        phase: "phase1".into(),
        task: None,
        seed,
        config: config.clone(),
        initial_loss: probes[0].total,
        final_loss: probes.last().unwrap().total,
        steps,
        probe: probes,
        held_out,
        backbone_checksum: enc.backbone_checksum(),
        head_checksums: head_checksums(&enc),
    };
    Ok((enc, report))
}

/// A query, a matching passage and hard negatives from a sibling class in
/// the passage's modality. Fields are item indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub query: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Indices of two items with an optional ground-truth similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredPair {
    pub a: usize,
    pub b: usize,
    pub ground_truth: Option<f64>,
}

/// Task-specific phase-2 data.
#[derive(Debug, Clone, PartialEq)]
pub enum Phase2Data {
    Triplets(Vec<Triplet>),
    ScoredPairs(Vec<ScoredPair>),
}

/// Text queries from the training split with text (and, if requested,
/// image) positives; each positive gets `m` negatives drawn from its
/// class's sibling classes.
pub fn mine_triplets(
    d: &Dataset,
    m: usize,
    include_images: bool,
    seed: u64,
) -> Result<Vec<Triplet>> {
    let mut rng = stream(seed, STREAM_PHASE2);
    let idx = ClassIndex::new(d, Split::Train);
    let mut out = Vec::new();
    for c in 0..d.n_classes() {
        let sib_text: Vec<usize> = d.siblings[c]
            .iter()
            .flat_map(|&s| idx.text[s].clone())
            .collect();
        let sib_image: Vec<usize> = d.siblings[c]
            .iter()
            .flat_map(|&s| idx.image[s].clone())
            .collect();
        if m > 0 && (sib_text.is_empty() || (include_images && sib_image.is_empty())) {
            return Err(Error::invalid(format!(
                "class {c} has no sibling items to mine negatives from"
            )));
        }
        for &q in &idx.text[c] {
            let mut positives: Vec<(usize, &Vec<usize>)> = idx.text[c]
                .iter()
                .filter(|&&p| p != q)
                .map(|&p| (p, &sib_text))
                .collect();
            if include_images {
                positives.extend(idx.image[c].iter().map(|&p| (p, &sib_image)));
            }
            for (p, pool) in positives {
                let negatives = (0..m).map(|_| pick(&mut rng, pool)).collect();
                out.push(Triplet {
                    query: q,
                    positive: p,
                    negatives,
                });
            }
        }
    }
    Ok(out)
}

/// Text pairs from the training split: same class scored 1, sibling class
/// 0.5, unrelated class 0, plus same-class pairs without a score.
pub fn make_scored_pairs(d: &Dataset, seed: u64) -> Result<Vec<ScoredPair>> {
    let mut rng = stream(seed, STREAM_PHASE2);
    let idx = ClassIndex::new(d, Split::Train);
    let group = d.config.hard_negative_sibling_classes + 1;
    let mut out = Vec::new();
    for c in 0..d.n_classes() {
        for &a in &idx.text[c] {
            let same: Vec<usize> = idx.text[c].iter().copied().filter(|&b| b != a).collect();
            out.push(ScoredPair {
                a,
                b: pick(&mut rng, &same),
                ground_truth: Some(1.0),
            });
            out.push(ScoredPair {
                a,
                b: pick(&mut rng, &same),
                ground_truth: None,
            });
            if let Some(&s) = d.siblings[c].first() {
                out.push(ScoredPair {
                    a,
                    b: pick(&mut rng, &idx.text[s]),
                    ground_truth: Some(0.5),
                });
            }
            let other = loop {
                let o = rng.random_range(0..d.n_classes());
                if o / group != c / group {
                    break o;
                }
            };
            out.push(ScoredPair {
                a,
                b: pick(&mut rng, &idx.text[other]),
                ground_truth: Some(0.0),
            });
        }
    }
    Ok(out)
}

/// Builds the phase-2 data a task expects from a dataset.
pub fn phase2_data(d: &Dataset, task: Task, config: &ToyConfig, seed: u64) -> Result<Phase2Data> {
    match task {
        Task::Retrieval => Ok(Phase2Data::Triplets(mine_triplets(
            d,
            config.hard_negatives,
            true,
            seed,
        )?)),
        Task::Code => Ok(Phase2Data::Triplets(mine_triplets(
            d,
            config.hard_negatives,
            false,
            seed,
        )?)),
        Task::TextMatching => Ok(Phase2Data::ScoredPairs(make_scored_pairs(d, seed)?)),
    }
}

struct Phase2Sampler<'a> {
    d: &'a Dataset,
    /// Triplets keyed by (query class, positive modality).
    triplets: HashMap<(usize, Modality), Vec<&'a Triplet>>,
    scored: Vec<&'a ScoredPair>,
    unscored: Vec<Vec<&'a ScoredPair>>,
    negatives: usize,
}

impl<'a> Phase2Sampler<'a> {
    fn new(d: &'a Dataset, task: Task, data: &'a Phase2Data) -> Result<Self> {
        let mismatch = |m: &str| Err(Error::invalid(format!("task `{task}`: {m}")));
        let mut s = Self {
            d,
            triplets: HashMap::new(),
            scored: Vec::new(),
            unscored: vec![Vec::new(); d.n_classes()],
            negatives: 0,
        };
        match (task, data) {
            (Task::TextMatching, Phase2Data::Triplets(_)) => {
                return mismatch("expects scored text pairs, got triplets");
            }
            (Task::Retrieval | Task::Code, Phase2Data::ScoredPairs(_)) => {
                return mismatch("expects triplets with hard negatives, got scored pairs");
            }
            (_, Phase2Data::Triplets(ts)) => {
                let Some(first) = ts.first() else {
                    return mismatch("no triplets");
                };
                s.negatives = first.negatives.len();
                for t in ts {
                    if t.negatives.len() != s.negatives {
                        return mismatch("triplets have differing negative counts");
                    }
                    let pm = d.items[t.positive].modality;
                    if task == Task::Code && pm == Modality::Image {
                        return mismatch("code training is text-only, got an image positive");
                    }
                    if d.items[t.query].modality != Modality::Text {
                        return mismatch("queries must be text items");
                    }
                    s.triplets
                        .entry((d.items[t.query].latent_class, pm))
                        .or_default()
                        .push(t);
                }
            }
            (_, Phase2Data::ScoredPairs(ps)) => {
                if ps.is_empty() {
                    return mismatch("no pairs");
                }
                for p in ps {
                    if d.items[p.a].modality != Modality::Text
                        || d.items[p.b].modality != Modality::Text
                    {
                        return mismatch("text-matching pairs must be text-text");
                    }
                    match p.ground_truth {
                        Some(z) if !z.is_finite() => {
                            return Err(Error::NonFinite(format!("ground truth of pair {}", p.a)));
                        }
                        Some(_) => s.scored.push(p),
                        None => s.unscored[d.items[p.a].latent_class].push(p),
                    }
                }
            }
        }
        Ok(s)
    }

    fn triplet_batch(&self, rng: &mut ChaCha8Rng, n: usize, modality: Modality) -> IndexBatch {
        let mut b = IndexBatch {
            queries: Vec::new(),
            passages: Vec::new(),
            objective: BatchObjective::InfoNcePlus {
                negatives: self.negatives,
            },
        };
        let mut negs: Vec<usize> = Vec::new();
        for c in sample_group_classes(self.d, rng, n) {
            let Some(pool) = self.triplets.get(&(c, modality)) else {
                continue;
            };
            let t = pool.choose(rng).expect("nonempty pool");
            b.queries.push(t.query);
            b.passages.push(t.positive);
            negs.extend(&t.negatives);
        }
        b.passages.extend(negs);
        b
    }

    fn pair_batch(&self, rng: &mut ChaCha8Rng, n: usize, scored_fraction: f64) -> IndexBatch {
        let n_scored = if self.scored.is_empty() {
            0
        } else {
            ((n as f64 * scored_fraction).round() as usize).clamp(1, n)
        };
        let mut b = IndexBatch::empty();
        let mut truth = Vec::new();
        for _ in 0..n_scored {
            let p = self.scored.choose(rng).expect("nonempty");
            b.queries.push(p.a);
            b.passages.push(p.b);
            truth.push(p.ground_truth);
        }
        for c in sample_group_classes(self.d, rng, n - n_scored) {
            if let Some(p) = self.unscored[c].choose(rng) {
                b.queries.push(p.a);
                b.passages.push(p.b);
                truth.push(None);
            }
        }
        b.objective = BatchObjective::TextMatching {
            ground_truth: truth,
        };
        b
    }
}

/// Trains the adapter of `task`; the backbone and other adapters are left
/// untouched, which is verified by checksum before returning.
pub fn train_phase2(
    encoder: &ToyEncoder,
    task: Task,
    d: &Dataset,
    data: &Phase2Data,
    config: &ToyConfig,
    seed: u64,
) -> Result<(ToyEncoder, TrainRunReport)> {
    config.validate()?;
    if !encoder.has_adapters() {
        return Err(Error::invalid(
            "phase 2 needs a phase-1 encoder with task adapters",
        ));
    }
    let sampler = Phase2Sampler::new(d, task, data)?;
    let backbone_before = encoder.backbone_checksum();
    let others_before: Vec<String> = Task::ALL
        .iter()
        .filter(|&&t| t != task)
        .map(|&t| encoder.head_checksum(t))
        .collect();

    let mut enc = encoder.clone();
    let mut rng = stream(seed, STREAM_BATCHES);
    let mut probe_rng = stream(seed, STREAM_PROBE);
    let n = config.batch_size;
    let batches = |rng: &mut ChaCha8Rng| match task {
        Task::Retrieval => (
            sampler.triplet_batch(rng, n, Modality::Text),
            sampler.triplet_batch(rng, n, Modality::Image),
        ),
        Task::Code => (
            sampler.triplet_batch(rng, n, Modality::Text),
            IndexBatch::empty(),
        ),
        Task::TextMatching => (
            sampler.pair_batch(rng, n, config.scored_fraction),
            IndexBatch::empty(),
        ),
    };
    let probe = batches(&mut probe_rng);
    let probe_loss = |enc: &ToyEncoder, step: usize| -> Result<StepLoss> {
        let (j, _) = loss_and_grad(
            enc,
            enc.head(task),
            &d.items,
            &probe.0,
            &probe.1,
            &config.loss,
            step,
        )?;
        Ok(StepLoss::new(step, &j))
    };
    let mut probes = vec![probe_loss(&enc, 0)?];
    let mut steps = Vec::with_capacity(config.phase2_steps);
    for step in 0..config.phase2_steps {
        let (txt, multi) = batches(&mut rng);
        let (j, grad) = loss_and_grad(
            &enc,
            enc.head(task),
            &d.items,
            &txt,
            &multi,
            &config.loss,
            step,
        )?;
        steps.push(StepLoss::new(step, &j));
        let lr = config.phase2_lr / txt.queries.len().max(1) as f64;
        sgd_step(enc.adapter_mut(task)?, &grad, lr, step)?;
        let done = step + 1;
        if done % config.probe_every == 0 || done == config.phase2_steps {
            probes.push(probe_loss(&enc, done)?);
        }
    }

    let others_after: Vec<String> = Task::ALL
        .iter()
        .filter(|&&t| t != task)
        .map(|&t| enc.head_checksum(t))
        .collect();
    if enc.backbone_checksum() != backbone_before || others_after != others_before {
        return Err(Error::invalid("phase 2 modified frozen parameters"));
    }
    let held_out = evaluate_held_out(&enc, d, task)?;
    log::info!(
        "phase 2 ({task}): probe loss {:.4} -> {:.4}, ndcg@10 dense {:.4} late {:.4}",
        probes[0].total,
        probes.last().unwrap().total,
        held_out.ndcg10_dense,
        held_out.ndcg10_late
    );
    let report = TrainRunReport {
        phase: "phase2".into(),
        task: Some(task.name().to_string()),
        seed,
        config: config.clone(),
        initial_loss: probes[0].total,
        final_loss: probes.last().unwrap().total,
        steps,
        probe: probes,
        held_out,
        backbone_checksum: enc.backbone_checksum(),
        head_checksums: head_checksums(&enc),
    };
    Ok((enc, report))
}

/// Both phases for every task, as run by the `train` command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullTrainingReport {
    pub seed: u64,
    pub phase1: TrainRunReport,
    pub phase2: Vec<TrainRunReport>,
}

pub fn train_all(config: &ToyConfig, seed: u64) -> Result<(ToyEncoder, FullTrainingReport)> {
    config.validate()?;
    let d = generate_synthetic(seed, &config.data)?;
    let (mut enc, phase1) = train_phase1(&d, config, seed)?;
    let mut phase2 = Vec::new();
    for task in Task::ALL {
        let data = phase2_data(&d, task, config, seed)?;
        let (next, report) = train_phase2(&enc, task, &d, &data, config, seed)?;
        enc = next;
        phase2.push(report);
    }
    Ok((
        enc,
        FullTrainingReport {
            seed,
            phase1,
            phase2,
        },
    ))
}
