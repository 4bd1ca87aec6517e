use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use latesim::diagnostics::{diagnose, read_pair_list, write_histogram_csv, Bins};
use latesim::eval::{read_qrels_file, read_sts, run_benchmark, sts_eval, BenchmarkConfig};
use latesim::format::{read_records_file, write_binary_file, write_jsonl};
use latesim::gradcheck::run_gradcheck;
use latesim::retrieval::{
    batch_search, build_store, write_trec, EmbeddingStore, SearchMode, SearchRequest,
};
use latesim::toy::{
    generate_synthetic, modality_gap_experiment, train_all, Dataset, Split, Task, ToyConfig,
    ToyEncoder,
};
use latesim::{EmbeddingRecord, Modality, Role, ScoreMode};
use serde::Serialize;

use crate::{
    Command, DiagnoseArgs, EvalArgs, Failure, GapArgs, GradcheckArgs, IndexArgs, SearchArgs,
    SearchOpts, StsArgs, TrainArgs,
};

type Outcome = Result<(), Failure>;

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Index(a) => index(a),
        Command::Search(a) => search(a),
        Command::Eval(a) => eval(a),
        Command::StsEval(a) => sts(a),
        Command::Diagnose(a) => diagnostics(a),
        Command::Train(a) => train(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::GapExperiment(a) => gap(a),
    }
}

fn io_failure(path: &Path, e: io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn input(path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Data(format!("{}: no such file", path.display())))
    }
}

fn output(path: &Path) -> Outcome {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Failure::Data(format!(
            "{}: output directory does not exist",
            path.display()
        ))),
        _ => Ok(()),
    }
}

fn outputs<'a>(paths: impl IntoIterator<Item = &'a Option<PathBuf>>) -> Outcome {
    paths.into_iter().flatten().try_for_each(|p| output(p))
}

/// Writes `text` to `path`, or stdout when absent.
fn emit(path: Option<&Path>, text: &str) -> Outcome {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| io_failure(p, e)),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Failure::Data(format!("stdout: {e}")))
        }
    }
}

fn emit_json<T: Serialize>(path: Option<&Path>, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).expect("reports serialize");
    text.push('\n');
    emit(path, &text)
}

fn with_context(path: &Path) -> impl Fn(latesim::Error) -> Failure + '_ {
    move |e| {
        let f = Failure::from(e);
        match f {
            Failure::Data(m) => Failure::Data(format!("{}: {m}", path.display())),
            other => other,
        }
    }
}

fn records(path: &Path) -> Result<Vec<EmbeddingRecord>, Failure> {
    read_records_file(path).map_err(with_context(path))
}

fn store(path: &Path) -> Result<EmbeddingStore, Failure> {
    EmbeddingStore::open(path).map_err(with_context(path))
}

fn search_mode(s: &str) -> Result<SearchMode, Failure> {
    s.parse().map_err(|_| {
        Failure::Usage(format!(
            "unknown mode `{s}` (expected dense, late or two-stage)"
        ))
    })
}

fn toy_config(path: Option<&Path>) -> Result<ToyConfig, Failure> {
    let cfg = match path {
        Some(p) => ToyConfig::from_file(p).map_err(|e| match e {
            latesim::Error::Io(e) => io_failure(p, e),
            other => other.into(),
        })?,
        None => ToyConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn index(a: IndexArgs) -> Outcome {
    input(&a.input)?;
    output(&a.out)?;
    let recs = records(&a.input)?;
    let store = build_store(recs, &a.out).map_err(with_context(&a.out))?;
    #[derive(Serialize)]
    struct Summary {
        records: usize,
        dense_dim: usize,
        multi_dim: usize,
        checksum: String,
    }
    emit_json(
        None,
        &Summary {
            records: store.len(),
            dense_dim: store.dense_dim(),
            multi_dim: store.multi_dim(),
            checksum: store.checksum()?,
        },
    )
}

fn requests(
    queries: Vec<EmbeddingRecord>,
    opts: &SearchOpts,
) -> Result<Vec<SearchRequest>, Failure> {
    let mode = search_mode(opts.mode.as_deref().unwrap_or("dense"))?;
    let k = opts.k.unwrap_or(10);
    if k == 0 {
        return Err(Failure::Usage("--k must be >= 1".into()));
    }
    Ok(queries
        .into_iter()
        .map(|q| SearchRequest {
            query: q,
            mode,
            k,
            candidate_pool: opts.candidate_pool,
            truncate_to: opts.truncate_to,
        })
        .collect())
}

fn search(a: SearchArgs) -> Outcome {
    input(&a.store)?;
    input(&a.queries)?;
    outputs([&a.out])?;
    let store = store(&a.store)?;
    let reqs = requests(records(&a.queries)?, &a.opts)?;
    let lists = batch_search(&store, &reqs)?;
    let mut run = Vec::new();
    for (r, list) in reqs.iter().zip(&lists) {
        write_trec(&mut run, &r.query.id, list, &a.run_name)?;
    }
    emit(
        a.out.as_deref(),
        &String::from_utf8(run).expect("TREC output is UTF-8"),
    )
}

fn eval(a: EvalArgs) -> Outcome {
    input(&a.store)?;
    input(&a.queries)?;
    input(&a.qrels)?;
    if let Some(c) = &a.config {
        input(c)?;
    }
    outputs([&a.out, &a.run])?;
    let mut config = match &a.config {
        Some(p) => BenchmarkConfig::from_file(p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(m) = &a.opts.mode {
        search_mode(m)?;
        config.mode = m.clone();
    }
    search_mode(&config.mode)?;
    config.k = a.opts.k.or(config.k);
    config.candidate_pool = a.opts.candidate_pool.or(config.candidate_pool);
    config.truncate_to = a.opts.truncate_to.or(config.truncate_to);
    config.parsed_metrics()?;

    let store = store(&a.store)?;
    let queries = records(&a.queries)?;
    let qrels = read_qrels_file(&a.qrels).map_err(with_context(&a.qrels))?;
    let (report, run) = run_benchmark(&store, &queries, &qrels, &config)?;
    if let Some(p) = &a.run {
        emit(Some(p), &run)?;
    }
    emit_json(a.out.as_deref(), &report)
}

fn sts(a: StsArgs) -> Outcome {
    input(&a.store)?;
    input(&a.pairs)?;
    outputs([&a.out])?;
    let mode = match a.mode.as_str() {
        "dense" => ScoreMode::Dense,
        "late" => ScoreMode::Late,
        other => {
            return Err(Failure::Usage(format!(
                "unknown mode `{other}` (expected dense or late)"
            )))
        }
    };
    let store = store(&a.store)?;
    let file = File::open(&a.pairs).map_err(|e| io_failure(&a.pairs, e))?;
    let pairs = read_sts(BufReader::new(file)).map_err(with_context(&a.pairs))?;
    emit_json(a.out.as_deref(), &sts_eval(&store, &pairs, mode)?)
}

fn diagnostics(a: DiagnoseArgs) -> Outcome {
    input(&a.left)?;
    if let Some(r) = &a.right {
        input(r)?;
    }
    input(&a.pairs)?;
    outputs([&a.out, &a.csv])?;
    let bins = Bins::uniform(a.bins).map_err(|e| Failure::Usage(e.to_string()))?;
    let left = records(&a.left)?;
    let right = match &a.right {
        Some(r) => records(r)?,
        None => left.clone(),
    };
    let file = File::open(&a.pairs).map_err(|e| io_failure(&a.pairs, e))?;
    let pairs = read_pair_list(BufReader::new(file)).map_err(with_context(&a.pairs))?;
    let report = diagnose(&left, &right, &pairs, &bins)?;
    if let Some(p) = &a.csv {
        let (x, y) = report.histograms().ok_or_else(|| {
            Failure::Data("no histogram: pairs carry neither modality nor cone tags".into())
        })?;
        let mut w = BufWriter::new(File::create(p).map_err(|e| io_failure(p, e))?);
        write_histogram_csv(&mut w, x, y)?;
        w.flush().map_err(|e| io_failure(p, e))?;
    }
    emit_json(a.out.as_deref(), &report)
}

fn train(a: TrainArgs) -> Outcome {
    if let Some(c) = &a.config {
        input(c)?;
    }
    outputs([&a.out])?;
    if let Some(dir) = &a.export {
        if !dir.is_dir() {
            return Err(Failure::Data(format!(
                "{}: export directory does not exist",
                dir.display()
            )));
        }
    }
    let config = toy_config(a.config.as_deref())?;
    let (encoder, report) = train_all(&config, a.seed)?;
    if let Some(dir) = &a.export {
        let data = generate_synthetic(a.seed, &config.data)?;
        export(dir, &encoder, &data)?;
    }
    emit_json(a.out.as_deref(), &report)
}

/// Held-out items encoded with the retrieval adapter, plus one training
/// text per class as a query and the files the other commands read.
fn export(dir: &Path, enc: &ToyEncoder, d: &Dataset) -> Outcome {
    let held = d.split(Split::HeldOut);
    let corpus = held
        .iter()
        .map(|&i| enc.encode(&d.items[i], Task::Retrieval, Role::Passage))
        .collect::<latesim::Result<Vec<_>>>()?;
    let mut queries = Vec::new();
    let mut qrels = String::from("query_id\tdoc_id\trelevance\n");
    for c in 0..d.n_classes() {
        let Some(&qi) = d.members(Split::Train, c, Modality::Text).first() else {
            continue;
        };
        let mut q = enc.encode(&d.items[qi], Task::Retrieval, Role::Query)?;
        q.id = format!("q-{}", q.id);
        for &i in held.iter().filter(|&&i| d.items[i].latent_class == c) {
            qrels.push_str(&format!("{}\t{}\t1\n", q.id, d.items[i].id));
        }
        queries.push(q);
    }

    let texts: Vec<usize> = held
        .iter()
        .copied()
        .filter(|&i| d.items[i].modality == Modality::Text)
        .collect();
    let mut sts = String::from("id_a\tid_b\tscore\n");
    let mut pairs = String::from("id_a\tid_b\ttag\n");
    for c in 0..d.n_classes() {
        let text = d.members(Split::HeldOut, c, Modality::Text);
        let image = d.members(Split::HeldOut, c, Modality::Image);
        for (k, &t) in text.iter().enumerate() {
            if let Some(&im) = image.get(k) {
                pairs.push_str(&format!(
                    "{}\t{}\timage-text\n",
                    d.items[t].id, d.items[im].id
                ));
            }
            if text.len() > 1 {
                let next = text[(k + 1) % text.len()];
                pairs.push_str(&format!(
                    "{}\t{}\ttext-text\n",
                    d.items[t].id, d.items[next].id
                ));
                sts.push_str(&format!("{}\t{}\t1\n", d.items[t].id, d.items[next].id));
            }
            let other =
                texts[(texts.iter().position(|&x| x == t).unwrap() + text.len() * 5) % texts.len()];
            let oc = d.items[other].latent_class;
            let z = if oc == c {
                1.0
            } else if d.siblings[c].contains(&oc) {
                0.5
            } else {
                0.0
            };
            sts.push_str(&format!("{}\t{}\t{z}\n", d.items[t].id, d.items[other].id));
            pairs.push_str(&format!(
                "{}\t{}\t{}\n",
                d.items[t].id,
                d.items[other].id,
                if oc == c { "positive" } else { "negative" }
            ));
        }
    }

    let file = |name: &str| dir.join(name);
    write_binary_file(&file("corpus.lsim"), &corpus).map_err(with_context(&file("corpus.lsim")))?;
    let mut jsonl = Vec::new();
    write_jsonl(&mut jsonl, &corpus)?;
    emit(
        Some(&file("corpus.jsonl")),
        &String::from_utf8(jsonl).expect("JSON is UTF-8"),
    )?;
    let mut jsonl = Vec::new();
    write_jsonl(&mut jsonl, &queries)?;
    emit(
        Some(&file("queries.jsonl")),
        &String::from_utf8(jsonl).expect("JSON is UTF-8"),
    )?;
    emit(Some(&file("qrels.tsv")), &qrels)?;
    emit(Some(&file("sts.tsv")), &sts)?;
    emit(Some(&file("pairs.tsv")), &pairs)
}

fn gradcheck(a: GradcheckArgs) -> Outcome {
    outputs([&a.out])?;
    if a.instances == 0 {
        return Err(Failure::Usage("--instances must be >= 1".into()));
    }
    let report = run_gradcheck(a.seed, a.instances)?;
    log::info!("gradcheck finished in {:.2} s", report.seconds);
    emit_json(a.out.as_deref(), &report)?;
    if report.passed {
        Ok(())
    } else {
        let worst: Vec<String> = report
            .losses
            .iter()
            .filter(|l| !l.passed)
            .map(|l| format!("{} ({:.3e})", l.loss, l.max_relative_error))
            .collect();
        Err(Failure::Numerical(format!(
            "gradient check failed for {}",
            worst.join(", ")
        )))
    }
}

fn gap(a: GapArgs) -> Outcome {
    if let Some(c) = &a.config {
        input(c)?;
    }
    outputs([&a.out])?;
    let config = toy_config(a.config.as_deref())?;
    emit_json(a.out.as_deref(), &modality_gap_experiment(a.seed, &config)?)
}
