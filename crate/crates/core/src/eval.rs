//! IR and STS metrics, qrels parsing and benchmark aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{cosine, normalized_late_score, EmbeddingRecord, ScoreMode};
use crate::error::{Error, Result};
use crate::retrieval::{
    batch_search, write_trec, EmbeddingStore, RankedList, SearchMode, SearchRequest,
};

/// Relevance judgments: query id → doc id → grade.
pub type Qrels = BTreeMap<String, BTreeMap<String, u32>>;

fn parse_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::invalid(format!("line {line}: {msg}"))
}

/// Reads `query_id<TAB>doc_id<TAB>relevance`. A first line whose third
/// field is not an integer is taken as a header.
pub fn read_qrels<R: BufRead>(r: R) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                n + 1,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let rel = match fields[2].trim().parse::<u32>() {
            Ok(v) => v,
            Err(_) if n == 0 => continue,
            Err(_) => return Err(parse_err(n + 1, format!("bad relevance `{}`", fields[2]))),
        };
        qrels
            .entry(fields[0].to_string())
            .or_default()
            .insert(fields[1].to_string(), rel);
    }
    Ok(qrels)
}

pub fn read_qrels_file(path: &Path) -> Result<Qrels> {
    read_qrels(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// One line of an STS pair file.
#[derive(Debug, Clone, PartialEq)]
pub struct StsJudgment {
    pub a: String,
    pub b: String,
    pub score: f64,
}

/// Reads `id_a<TAB>id_b<TAB>ground_truth`, with the same header rule as
/// [`read_qrels`].
pub fn read_sts<R: BufRead>(r: R) -> Result<Vec<StsJudgment>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                n + 1,
                format!("expected 3 tab-separated fields, got {}", fields.len()),
            ));
        }
        let score = match fields[2].trim().parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            Ok(_) => return Err(Error::NonFinite(format!("ground truth on line {}", n + 1))),
            Err(_) if n == 0 => continue,
            Err(_) => return Err(parse_err(n + 1, format!("bad score `{}`", fields[2]))),
        };
        out.push(StsJudgment {
            a: fields[0].to_string(),
            b: fields[1].to_string(),
            score,
        });
    }
    Ok(out)
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        Err(Error::invalid("metric cutoff k must be >= 1"))
    } else {
        Ok(())
    }
}

fn has_positive(judged: &BTreeMap<String, u32>) -> bool {
    judged.values().any(|&r| r > 0)
}

/// Linear-gain nDCG with a `log2(rank + 1)` discount. `None` when the query
/// has no positive judgment and so cannot be scored.
pub fn ndcg_at_k<'a>(
    ranking: impl IntoIterator<Item = &'a str>,
    judged: &BTreeMap<String, u32>,
    k: usize,
) -> Result<Option<f64>> {
    check_k(k)?;
    if !has_positive(judged) {
        return Ok(None);
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranking
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, id)| judged.get(id).copied().unwrap_or(0) as f64 * discount(i + 1))
        .sum();
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&r| r > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg: f64 = ideal
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &r)| r as f64 * discount(i + 1))
        .sum();
    Ok(Some(dcg / idcg))
}

/// Share of relevant documents found in the top `k`.
pub fn recall_at_k<'a>(
    ranking: impl IntoIterator<Item = &'a str>,
    judged: &BTreeMap<String, u32>,
    k: usize,
) -> Result<Option<f64>> {
    check_k(k)?;
    let relevant = judged.values().filter(|&&r| r > 0).count();
    if relevant == 0 {
        return Ok(None);
    }
    let found: BTreeSet<&str> = ranking
        .into_iter()
        .take(k)
        .filter(|id| judged.get(*id).is_some_and(|&r| r > 0))
        .collect();
    Ok(Some(found.len() as f64 / relevant as f64))
}

/// Ranks starting at 1; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        None
    } else {
        Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
    }
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(model_scores: &[f64], ground_truth: &[f64]) -> Result<f64> {
    if model_scores.len() != ground_truth.len() {
        return Err(Error::invalid(format!(
            "spearman inputs differ in length: {} vs {}",
            model_scores.len(),
            ground_truth.len()
        )));
    }
    if model_scores.len() < 2 {
        return Err(Error::invalid("spearman needs at least two pairs"));
    }
    if model_scores
        .iter()
        .chain(ground_truth)
        .any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite("spearman input".into()));
    }
    pearson(&average_ranks(model_scores), &average_ranks(ground_truth))
        .ok_or_else(|| Error::invalid("spearman is undefined for a constant input"))
}

/// `ndcg@k` or `recall@k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Metric {
    Ndcg(usize),
    Recall(usize),
}

impl Metric {
    pub fn k(self) -> usize {
        match self {
            Metric::Ndcg(k) | Metric::Recall(k) => k,
        }
    }

    pub fn evaluate(
        self,
        list: &RankedList,
        judged: &BTreeMap<String, u32>,
    ) -> Result<Option<f64>> {
        match self {
            Metric::Ndcg(k) => ndcg_at_k(list.ids(), judged, k),
            Metric::Recall(k) => recall_at_k(list.ids(), judged, k),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::invalid(format!(
                "unknown metric `{s}` (expected ndcg@K or recall@K)"
            ))
        };
        let (name, k) = s.split_once('@').ok_or_else(bad)?;
        let k: usize = k.parse().map_err(|_| bad())?;
        check_k(k)?;
        match name.to_ascii_lowercase().as_str() {
            "ndcg" => Ok(Metric::Ndcg(k)),
            "recall" => Ok(Metric::Recall(k)),
            _ => Err(bad()),
        }
    }
}

/// Assigns queries to a task and language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub task: String,
    #[serde(default = "default_name")]
    pub language: String,
    /// Query ids in this split.
    #[serde(default)]
    pub queries: Vec<String>,
    /// Alternatively, every query id starting with this prefix.
    #[serde(default)]
    pub prefix: Option<String>,
}

fn default_name() -> String {
    "default".into()
}

fn default_metrics() -> Vec<String> {
    vec!["ndcg@5".into(), "ndcg@10".into(), "recall@5".into()]
}

fn default_run() -> String {
    "latesim".into()
}

/// Benchmark settings, loadable from TOML/JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    #[serde(default = "default_mode")]
    pub mode: String,
    /// Ranking depth; defaults to the largest metric cutoff.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub candidate_pool: Option<usize>,
    #[serde(default)]
    pub truncate_to: Option<usize>,
    #[serde(default = "default_run")]
    pub run_name: String,
    /// Queries matching no split fall into task `default`.
    #[serde(default)]
    pub splits: Vec<Split>,
}

fn default_mode() -> String {
    "dense".into()
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            metrics: default_metrics(),
            mode: default_mode(),
            k: None,
            candidate_pool: None,
            truncate_to: None,
            run_name: default_run(),
            splits: Vec::new(),
        }
    }
}

impl BenchmarkConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn parsed_metrics(&self) -> Result<Vec<Metric>> {
        if self.metrics.is_empty() {
            return Err(Error::Config("no metrics requested".into()));
        }
        self.metrics.iter().map(|m| m.parse()).collect()
    }

    fn split_of(&self, qid: &str) -> (String, String) {
        for s in &self.splits {
            let hit = s.queries.iter().any(|q| q == qid)
                || s.prefix.as_deref().is_some_and(|p| qid.starts_with(p));
            if hit {
                return (s.task.clone(), s.language.clone());
            }
        }
        (default_name(), default_name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LanguageScores {
    pub task: String,
    pub language: String,
    pub queries: usize,
    pub means: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskScores {
    pub task: String,
    pub languages: usize,
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub mode: String,
    pub metrics: Vec<String>,
    pub evaluated_queries: usize,
    /// Queries without any positive judgment (or absent from the qrels).
    pub skipped_queries: Vec<String>,
    /// Judged doc ids that do not occur in the store.
    pub missing_doc_ids: usize,
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
    pub per_language: Vec<LanguageScores>,
    pub per_task: Vec<TaskScores>,
    /// Mean over tasks of each task score.
    pub aggregate: BTreeMap<String, f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Per-language means, then one score per task (mean over its languages),
/// then the mean over tasks.
pub fn aggregate(
    per_query: &BTreeMap<String, BTreeMap<String, f64>>,
    split_of: impl Fn(&str) -> (String, String),
    metrics: &[String],
) -> (Vec<LanguageScores>, Vec<TaskScores>, BTreeMap<String, f64>) {
    let mut groups: BTreeMap<(String, String), Vec<&BTreeMap<String, f64>>> = BTreeMap::new();
    for (qid, values) in per_query {
        groups.entry(split_of(qid)).or_default().push(values);
    }
    let per_language: Vec<LanguageScores> = groups
        .into_iter()
        .map(|((task, language), rows)| {
            let means = metrics
                .iter()
                .map(|m| {
                    let v: Vec<f64> = rows.iter().map(|r| r[m]).collect();
                    (m.clone(), mean(&v))
                })
                .collect();
            LanguageScores {
                task,
                language,
                queries: rows.len(),
                means,
            }
        })
        .collect();
    let mut tasks: BTreeMap<&str, Vec<&LanguageScores>> = BTreeMap::new();
    for l in &per_language {
        tasks.entry(&l.task).or_default().push(l);
    }
    let per_task: Vec<TaskScores> = tasks
        .into_iter()
        .map(|(task, langs)| TaskScores {
            task: task.to_string(),
            languages: langs.len(),
            scores: metrics
                .iter()
                .map(|m| {
                    let v: Vec<f64> = langs.iter().map(|l| l.means[m]).collect();
                    (m.clone(), mean(&v))
                })
                .collect(),
        })
        .collect();
    let overall = metrics
        .iter()
        .map(|m| {
            let v: Vec<f64> = per_task.iter().map(|t| t.scores[m]).collect();
            (m.clone(), mean(&v))
        })
        .collect();
    (per_language, per_task, overall)
}

/// Searches every query, scores it against the qrels and aggregates.
/// Returns the report and the TREC run text.
pub fn run_benchmark(
    store: &EmbeddingStore,
    queries: &[EmbeddingRecord],
    qrels: &Qrels,
    config: &BenchmarkConfig,
) -> Result<(MetricReport, String)> {
    let metrics = config.parsed_metrics()?;
    let mode: SearchMode = config.mode.parse()?;
    let depth = config
        .k
        .unwrap_or_else(|| metrics.iter().map(|m| m.k()).max().unwrap_or(1));
    let requests: Vec<SearchRequest> = queries
        .iter()
        .map(|q| SearchRequest {
            query: q.clone(),
            mode,
            k: depth,
            candidate_pool: config.candidate_pool,
            truncate_to: config.truncate_to,
        })
        .collect();
    let lists = batch_search(store, &requests)?;

    let mut run = Vec::new();
    let mut per_query = BTreeMap::new();
    let mut skipped = Vec::new();
    for (q, list) in queries.iter().zip(&lists) {
        write_trec(&mut run, &q.id, list, &config.run_name)?;
        let Some(judged) = qrels.get(&q.id).filter(|j| has_positive(j)) else {
            skipped.push(q.id.clone());
            continue;
        };
        let mut values = BTreeMap::new();
        for m in &metrics {
            let v = m.evaluate(list, judged)?.expect("query has positives");
            values.insert(m.to_string(), v);
        }
        per_query.insert(q.id.clone(), values);
    }
    let missing_doc_ids = queries
        .iter()
        .filter_map(|q| qrels.get(&q.id))
        .flat_map(|j| j.keys())
        .filter(|d| !store.contains(d))
        .count();
    if per_query.is_empty() {
        return Err(Error::invalid(format!(
            "no evaluable queries ({} skipped for lack of positive judgments)",
            skipped.len()
        )));
    }
    if !skipped.is_empty() {
        log::warn!("{} queries skipped: no positive judgments", skipped.len());
    }
    let names: Vec<String> = metrics.iter().map(|m| m.to_string()).collect();
    let (per_language, per_task, overall) =
        aggregate(&per_query, |qid| config.split_of(qid), &names);
    let report = MetricReport {
        mode: config.mode.clone(),
        metrics: names,
        evaluated_queries: per_query.len(),
        skipped_queries: skipped,
        missing_doc_ids,
        per_query,
        per_language,
        per_task,
        aggregate: overall,
    };
    Ok((
        report,
        String::from_utf8(run).expect("TREC output is UTF-8"),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StsReport {
    pub mode: String,
    pub pairs: usize,
    pub spearman: f64,
}

/// Spearman between model similarities of each judged pair and the ground
/// truth. Late mode uses the query-length normalized score with `a` as the
/// query side.
pub fn sts_eval(
    store: &EmbeddingStore,
    pairs: &[StsJudgment],
    mode: ScoreMode,
) -> Result<StsReport> {
    let lookup = |id: &str| {
        store
            .get(id)
            .ok_or_else(|| Error::invalid(format!("STS pair references unknown id `{id}`")))
    };
    let mut model = Vec::with_capacity(pairs.len());
    for p in pairs {
        let (a, b) = (lookup(&p.a)?, lookup(&p.b)?);
        model.push(match mode {
            ScoreMode::Dense => cosine(&a.dense, &b.dense)?,
            ScoreMode::Late => normalized_late_score(a.multi_or_err()?, b.multi_or_err()?)?,
        });
    }
    let truth: Vec<f64> = pairs.iter().map(|p| p.score).collect();
    Ok(StsReport {
        mode: match mode {
            ScoreMode::Dense => "dense".into(),
            ScoreMode::Late => "late".into(),
        },
        pairs: pairs.len(),
        spearman: spearman(&model, &truth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn judged(pairs: &[(&str, u32)]) -> BTreeMap<String, u32> {
        pairs.iter().map(|(d, r)| (d.to_string(), *r)).collect()
    }

    #[test]
    fn ndcg_examples() {
        let j = judged(&[("d1", 1), ("d3", 1), ("d2", 0)]);
        let v = ndcg_at_k(["d2", "d1", "d3"], &j, 3).unwrap().unwrap();
        let expected = (1.0 / 3f64.log2() + 0.5) / (1.0 + 1.0 / 3f64.log2());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.69343).abs() < 1e-5);
        assert_eq!(ndcg_at_k(["d1", "d3", "d2"], &j, 3).unwrap(), Some(1.0));
        assert_eq!(ndcg_at_k(["d2", "x"], &j, 2).unwrap(), Some(0.0));
        assert_eq!(ndcg_at_k(["d2"], &judged(&[("d2", 0)]), 2).unwrap(), None);
        assert!(ndcg_at_k(["d1"], &j, 0).is_err());
    }

    #[test]
    fn recall_examples() {
        let two = judged(&[("a", 1), ("b", 1)]);
        assert_eq!(recall_at_k(["a", "x", "b"], &two, 5).unwrap(), Some(1.0));
        assert_eq!(
            recall_at_k(["a", "x", "y", "z", "w", "b"], &two, 5).unwrap(),
            Some(0.5)
        );
        let three = judged(&[("d1", 1), ("d2", 1), ("d3", 1)]);
        let v = recall_at_k(["d1", "x"], &three, 2).unwrap().unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[30.0, 20.0, 10.0]).unwrap() + 1.0).abs() < 1e-12);
        // Average ranks [1, 2.5, 2.5, 4] vs [1, 3, 2, 4] give 3 / sqrt(10).
        let v = spearman(&[1.0, 2.0, 2.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap();
        assert!((v - 3.0 / 10f64.sqrt()).abs() < 1e-12);
        assert!(spearman(&[1.0, 2.0], &[1.0]).is_err());
        assert!(spearman(&[1.0, 2.0], &[3.0, 3.0]).is_err());
    }

    #[test]
    fn average_ranks_ties() {
        assert_eq!(
            average_ranks(&[3.0, 1.0, 3.0, 2.0]),
            vec![3.5, 1.0, 3.5, 2.0]
        );
    }

    #[test]
    fn multilingual_aggregation() {
        let mut per_query = BTreeMap::new();
        let mut put = |q: &str, v: f64| {
            per_query.insert(q.to_string(), BTreeMap::from([("m".to_string(), v)]));
        };
        put("a-en-1", 0.3);
        put("a-en-2", 0.5);
        put("a-ja-1", 0.6);
        put("b-1", 0.8);
        let split = |q: &str| {
            if let Some(rest) = q.strip_prefix("a-") {
                ("a".to_string(), rest[..2].to_string())
            } else {
                ("b".to_string(), "default".to_string())
            }
        };
        let (langs, tasks, overall) = aggregate(&per_query, split, &["m".to_string()]);
        assert_eq!(langs.len(), 3);
        assert!((tasks[0].scores["m"] - 0.5).abs() < 1e-12);
        assert!((overall["m"] - 0.65).abs() < 1e-12);
    }

    #[test]
    fn qrels_parsing() {
        let text = "query\tdoc\trel\nq1\td1\t1\nq1\td2\t0\n\nq2\td9\t2\n";
        let q = read_qrels(text.as_bytes()).unwrap();
        assert_eq!(q["q1"]["d1"], 1);
        assert_eq!(q["q2"]["d9"], 2);
        assert!(read_qrels("q1\td1\n".as_bytes()).is_err());
        assert!(read_qrels("q1\td1\t1\nq1\td2\tx\n".as_bytes()).is_err());
    }

    #[test]
    fn metric_parsing() {
        assert_eq!("ndcg@10".parse::<Metric>().unwrap(), Metric::Ndcg(10));
        assert_eq!("Recall@5".parse::<Metric>().unwrap(), Metric::Recall(5));
        assert!("map@5".parse::<Metric>().is_err());
        assert!("ndcg@0".parse::<Metric>().is_err());
        assert!(BenchmarkConfig::from_toml_str("metric = [\"ndcg@5\"]").is_err());
    }
}
