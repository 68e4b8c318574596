use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use edgecol::bench::{memory_bytes, memory_mib, time_run, MemorySpec};
use edgecol::eval::{
    ndcg_at_k_threads, read_qrels, read_run, write_run, Gain, Run, DEFAULT_RUN_TAG,
};
use edgecol::fixtures::{generate_corpus, SyntheticSpec};
use edgecol::index::{
    build_index, load_index, quantize_matrix, save_index, CandidateList, EmbeddingFile,
};
use edgecol::losses::{KlConfig, KlDirection};
use edgecol::mining::{
    normalize_tuples, read_corpus, read_tuples, write_mined, write_tuples, MiningConfig,
    NegativeMiner, NormalizationScope, TeacherScores, ThresholdMode,
};
use edgecol::projection::{
    init_head, HeadKind, ProjectionConfig, ProjectionHead, DEFAULT_INTERMEDIATE_FACTOR,
};
use edgecol::scoring::SimilarityKind;
use edgecol::train::{mean_tuple_loss, train_projection_toy, TrainerConfig};
use edgecol::types::{DocId, Dtype, QueryId, Seed, TokenMatrix};

/// Late-interaction (multi-vector) retrieval toolkit.
///
/// File formats:
///   *.mve    token embeddings: "MVE1", u8 dtype (0 fp32, 1 fp16), u16 dim, u64 count,
///            then per item u32 id length, id, u32 rows, rows*dim values (little-endian)
///   *.mvix   index: "MVIX", u32 version, u8 dtype, u8 sim (0 dot, 1 cosine), u16 dim,
///            u64 count, u32 metadata length + JSON, records sorted by id
///   *.mvph   projection head parameters
///   qrels    "qid 0 docid relevance" lines
///   run      "qid Q0 docid rank score tag" lines
///   teacher  "qid docid score" lines
///   corpus / queries JSONL: {"id": ..., "text": ...}
#[derive(Debug, Parser)]
#[command(name = "edgecol", version, verbatim_doc_comment)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build an index (.mvix) from token embeddings (.mve).
    Index(IndexArgs),
    /// Exact MaxSim top-k search; writes a TREC run.
    Search(SearchArgs),
    /// Re-score candidate lists from a TREC run with MaxSim.
    Rerank(RerankArgs),
    /// NDCG@k of a TREC run against qrels.
    Eval(EvalArgs),
    /// Mine hard negatives per (query, positive); writes JSONL by source.
    Mine(MineArgs),
    /// Assemble n-way distillation tuples with teacher scores (JSONL).
    Tuples(TuplesArgs),
    /// Create a projection head and/or project embeddings through one.
    Project(ProjectArgs),
    /// Memory of n_docs x tokens x dim stored values, in MiB.
    BenchMem(BenchMemArgs),
    /// Time loading, scoring and search over an index; prints JSON.
    BenchTime(BenchTimeArgs),
    /// Write a deterministic synthetic fixture to a directory.
    GenFixture(GenFixtureArgs),
    /// Train a projection head on distillation tuples with KL loss.
    TrainToy(TrainToyArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SimArg {
    Dot,
    Cosine,
}

impl From<SimArg> for SimilarityKind {
    fn from(s: SimArg) -> Self {
        match s {
            SimArg::Dot => SimilarityKind::Dot,
            SimArg::Cosine => SimilarityKind::Cosine,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DtypeArg {
    Fp16,
    Fp32,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::Fp16 => Dtype::Float16,
            DtypeArg::Fp32 => Dtype::Float32,
        }
    }
}

#[derive(Debug, Args)]
struct IndexArgs {
    /// Document embeddings (.mve).
    #[arg(long)]
    input: PathBuf,
    /// Output index (.mvix).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "cosine")]
    sim: SimArg,
    #[arg(long, value_enum, default_value = "fp16")]
    dtype: DtypeArg,
    /// Metadata entry KEY=VALUE; repeatable.
    #[arg(long = "meta", value_name = "KEY=VALUE")]
    meta: Vec<String>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query embeddings (.mve).
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Output TREC run.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = DEFAULT_RUN_TAG)]
    tag: String,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Args)]
struct RerankArgs {
    #[arg(long)]
    index: PathBuf,
    /// Query embeddings (.mve).
    #[arg(long)]
    queries: PathBuf,
    /// First-stage TREC run supplying candidates per query.
    #[arg(long)]
    candidates: PathBuf,
    /// Output TREC run.
    #[arg(long)]
    run: PathBuf,
    /// Keep at most this many results per query.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value = DEFAULT_RUN_TAG)]
    tag: String,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GainArg {
    Linear,
    Exponential,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, value_enum, default_value = "linear")]
    gain: GainArg,
    /// Also print "qid ndcg" per query.
    #[arg(long)]
    per_query: bool,
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ThresholdArg {
    /// threshold x teacher(query, positive)
    Relative,
    /// threshold as an absolute teacher score
    Absolute,
}

#[derive(Debug, Args)]
struct MiningArgs {
    /// Documents JSONL.
    #[arg(long)]
    corpus: PathBuf,
    /// Queries JSONL.
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Teacher scores ("qid docid score").
    #[arg(long)]
    teacher: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    n_way: usize,
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
    #[arg(long, value_enum, default_value = "relative")]
    threshold_mode: ThresholdArg,
    #[arg(long, default_value_t = 0.35)]
    frac_model: f64,
    #[arg(long, default_value_t = 0.35)]
    frac_bm25: f64,
    #[arg(long, default_value_t = 0.30)]
    frac_random: f64,
    #[arg(long, default_value_t = 0.9)]
    bm25_k1: f64,
    #[arg(long, default_value_t = 0.4)]
    bm25_b: f64,
    /// Keep letter case in texts before tokenizing.
    #[arg(long)]
    keep_case: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl MiningArgs {
    fn config(&self) -> MiningConfig {
        MiningConfig {
            threshold: self.threshold,
            threshold_mode: match self.threshold_mode {
                ThresholdArg::Relative => ThresholdMode::RelativeToPositive,
                ThresholdArg::Absolute => ThresholdMode::Absolute,
            },
            frac_model: self.frac_model,
            frac_bm25: self.frac_bm25,
            frac_random: self.frac_random,
            n_way: self.n_way,
            seed: Seed(self.seed),
            bm25: edgecol::mining::bm25::Bm25Params {
                k1: self.bm25_k1,
                b: self.bm25_b,
            },
        }
    }
}

#[derive(Debug, Args)]
struct MineArgs {
    #[command(flatten)]
    mining: MiningArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormalizeArg {
    None,
    Tuple,
    Dataset,
}

#[derive(Debug, Args)]
struct TuplesArgs {
    #[command(flatten)]
    mining: MiningArgs,
    /// Min-max normalization applied to the written teacher scores.
    #[arg(long, value_enum, default_value = "none")]
    normalize: NormalizeArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KindArg {
    Linear,
    Ffn2,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    /// Head file (.mvph); created when --init is given, read otherwise.
    #[arg(long)]
    head: PathBuf,
    /// Create a freshly initialized head at --head.
    #[arg(long)]
    init: bool,
    #[arg(long, value_enum, default_value = "ffn2")]
    kind: KindArg,
    #[arg(long)]
    d_in: Option<usize>,
    #[arg(long)]
    d_out: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_INTERMEDIATE_FACTOR)]
    intermediate_factor: usize,
    #[arg(long)]
    residual: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Embeddings to project (.mve).
    #[arg(long, requires = "out")]
    input: Option<PathBuf>,
    /// Projected embeddings (.mve).
    #[arg(long, requires = "input")]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fp16")]
    dtype: DtypeArg,
}

#[derive(Debug, Args)]
struct BenchMemArgs {
    #[arg(long)]
    docs: u64,
    #[arg(long)]
    tokens: u64,
    #[arg(long)]
    dim: u64,
    #[arg(long, value_enum, default_value = "fp16")]
    dtype: DtypeArg,
    /// Print the exact byte count instead of MiB.
    #[arg(long)]
    bytes: bool,
}

#[derive(Debug, Args)]
struct BenchTimeArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Include every individual run in the report.
    #[arg(long)]
    verbose: bool,
}

#[derive(Debug, Args)]
struct GenFixtureArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Start from the projection-training preset instead of the small default.
    #[arg(long)]
    toy: bool,
    #[arg(long = "num-queries")]
    num_queries: Option<usize>,
    #[arg(long = "num-docs")]
    num_docs: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    query_tokens: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    signal_dim: Option<usize>,
    #[arg(long)]
    nuisance: Option<f64>,
    #[arg(long)]
    relevant: Option<usize>,
    #[arg(long)]
    hard: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long, value_enum, default_value = "fp32")]
    dtype: DtypeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    /// Initial head (.mvph).
    #[arg(long)]
    head: PathBuf,
    /// Tuples JSONL.
    #[arg(long)]
    tuples: PathBuf,
    /// Query embeddings (.mve).
    #[arg(long)]
    queries: PathBuf,
    /// Document embeddings (.mve).
    #[arg(long)]
    docs: PathBuf,
    /// Trained head (.mvph).
    #[arg(long)]
    out: PathBuf,
    /// Loss trace CSV ("step,loss").
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Use KL(student || teacher) instead of KL(teacher || student).
    #[arg(long)]
    reverse_kl: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn read_embeddings<T: Ord + std::fmt::Display>(
    path: &Path,
    parse: impl Fn(String) -> edgecol::error::Result<T>,
) -> Result<(usize, BTreeMap<T, TokenMatrix>)> {
    let file = EmbeddingFile::read(path).with_context(|| format!("reading {}", path.display()))?;
    let dim = file.dim;
    let mut out = BTreeMap::new();
    for (id, m) in file.typed(parse)? {
        if out.contains_key(&id) {
            bail!("duplicate id {id} in {}", path.display());
        }
        out.insert(id, m);
    }
    Ok((dim, out))
}

fn cmd_index(a: IndexArgs) -> Result<()> {
    let (dim, docs) = read_embeddings(&a.input, DocId::new)?;
    let mut index = build_index(docs, dim, a.dtype.into(), a.sim.into())?;
    for kv in &a.meta {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("metadata {kv:?} is not KEY=VALUE"))?;
        index.set_metadata(k, v);
    }
    save_index(&index, &a.out)?;
    eprintln!(
        "indexed {} documents, {} tokens, dim {}, {} / {}",
        index.len(),
        index.total_tokens(),
        index.dim(),
        index.dtype(),
        index.sim()
    );
    Ok(())
}

fn cmd_search(a: SearchArgs) -> Result<()> {
    let index = load_index(&a.index).with_context(|| format!("reading {}", a.index.display()))?;
    let (_, queries) = read_embeddings(&a.queries, QueryId::new)?;
    let results = index.search_many(&queries, a.k, a.threads)?;
    write_run(&Run::new(results, a.tag)?, &a.run)?;
    eprintln!(
        "searched {} queries over {} documents",
        queries.len(),
        index.len()
    );
    Ok(())
}

fn cmd_rerank(a: RerankArgs) -> Result<()> {
    let index = load_index(&a.index).with_context(|| format!("reading {}", a.index.display()))?;
    let (_, queries) = read_embeddings(&a.queries, QueryId::new)?;
    let first =
        read_run(&a.candidates).with_context(|| format!("reading {}", a.candidates.display()))?;
    let mut out = BTreeMap::new();
    for (q, ranked) in first.rankings() {
        let qm = queries
            .get(q)
            .with_context(|| format!("no embedding for query {q}"))?;
        let list = CandidateList::new(q.clone(), ranked.iter().map(|s| s.doc.clone()).collect())?;
        let mut scored = index.rerank(qm, &list)?;
        if let Some(k) = a.k {
            scored.truncate(k);
        }
        out.insert(q.clone(), scored);
    }
    write_run(&Run::new(out, a.tag)?, &a.run)?;
    eprintln!("reranked {} queries", first.rankings().len());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let run = read_run(&a.run).with_context(|| format!("reading {}", a.run.display()))?;
    let qrels = read_qrels(&a.qrels).with_context(|| format!("reading {}", a.qrels.display()))?;
    let gain = match a.gain {
        GainArg::Linear => Gain::Linear,
        GainArg::Exponential => Gain::Exponential,
    };
    let report = ndcg_at_k_threads(&run, &qrels, a.k, gain, a.threads)?;
    if a.per_query {
        for (q, v) in &report.per_query {
            println!("{q} {v:.4}");
        }
    }
    println!("{:.4}", report.mean);
    eprintln!("ndcg@{} over {} queries", a.k, report.per_query.len());
    Ok(())
}

fn load_mining(
    a: &MiningArgs,
) -> Result<(
    edgecol::mining::TextCorpus,
    edgecol::eval::Qrels,
    TeacherScores,
)> {
    let corpus = read_corpus(&a.corpus, &a.queries)?.normalized(!a.keep_case);
    Ok((
        corpus,
        read_qrels(&a.qrels).with_context(|| format!("reading {}", a.qrels.display()))?,
        TeacherScores::read(&a.teacher)
            .with_context(|| format!("reading {}", a.teacher.display()))?,
    ))
}

fn cmd_mine(a: MineArgs) -> Result<()> {
    let (corpus, qrels, teacher) = load_mining(&a.mining)?;
    let miner = NegativeMiner::new(&corpus, &teacher, a.mining.config())?;
    let mined = miner.mine_all(&qrels)?;
    write_mined(&mined, &a.mining.out)?;
    let [m, b, r] = miner.slots();
    eprintln!(
        "mined {} pairs; slots model={m} bm25={b} random={r}",
        mined.len()
    );
    Ok(())
}

fn cmd_tuples(a: TuplesArgs) -> Result<()> {
    let (corpus, qrels, teacher) = load_mining(&a.mining)?;
    let mut tuples =
        edgecol::mining::assemble_tuples(&corpus, &qrels, &teacher, a.mining.config())?;
    normalize_tuples(
        &mut tuples,
        match a.normalize {
            NormalizeArg::None => NormalizationScope::None,
            NormalizeArg::Tuple => NormalizationScope::PerTuple,
            NormalizeArg::Dataset => NormalizationScope::PerDataset,
        },
    );
    write_tuples(&tuples, &a.mining.out)?;
    eprintln!(
        "wrote {} tuples of {} documents",
        tuples.len(),
        a.mining.n_way
    );
    Ok(())
}

fn cmd_project(a: ProjectArgs) -> Result<()> {
    let head = if a.init {
        let (Some(d_in), Some(d_out)) = (a.d_in, a.d_out) else {
            bail!("--init requires --d-in and --d-out");
        };
        let config = ProjectionConfig {
            d_in,
            d_out,
            kind: match a.kind {
                KindArg::Linear => HeadKind::Linear,
                KindArg::Ffn2 => HeadKind::Ffn2,
            },
            intermediate_factor: a.intermediate_factor,
            residual: a.residual,
        };
        let head = init_head(config, Seed(a.seed))?;
        head.save(&a.head)?;
        eprintln!("created head with {} parameters", head.num_params());
        head
    } else {
        ProjectionHead::load(&a.head).with_context(|| format!("reading {}", a.head.display()))?
    };
    if let (Some(input), Some(out)) = (&a.input, &a.out) {
        let file =
            EmbeddingFile::read(input).with_context(|| format!("reading {}", input.display()))?;
        let dtype: Dtype = a.dtype.into();
        let items = file
            .items
            .iter()
            .map(|(id, m)| Ok((id.clone(), quantize_matrix(&head.forward(m)?, dtype)?)))
            .collect::<edgecol::error::Result<Vec<_>>>()?;
        let n = items.len();
        EmbeddingFile {
            dtype,
            dim: head.config().d_out,
            items,
        }
        .write(out)?;
        eprintln!("projected {n} items to dim {}", head.config().d_out);
    } else if !a.init {
        bail!("nothing to do: pass --init and/or --input with --out");
    }
    Ok(())
}

fn cmd_bench_mem(a: BenchMemArgs) -> Result<()> {
    let spec = MemorySpec::new(a.docs, a.tokens, a.dim, a.dtype.into())?;
    if a.bytes {
        println!("{}", memory_bytes(&spec)?);
    } else {
        println!("{}", memory_mib(&spec)?);
    }
    Ok(())
}

fn cmd_bench_time(a: BenchTimeArgs) -> Result<()> {
    let index = load_index(&a.index).with_context(|| format!("reading {}", a.index.display()))?;
    let (_, queries) = read_embeddings(&a.queries, QueryId::new)?;
    let report = time_run(&index, &queries, a.k, a.repeats, a.threads)?;
    let report = if a.verbose { report } else { report.summary() };
    println!("{}", report.to_json()?);
    Ok(())
}

fn cmd_gen_fixture(a: GenFixtureArgs) -> Result<()> {
    let mut spec = if a.toy {
        SyntheticSpec::toy_distillation(Seed(a.seed))
    } else {
        SyntheticSpec {
            seed: Seed(a.seed),
            ..SyntheticSpec::default()
        }
    };
    if let Some(v) = a.num_queries {
        spec.n_queries = v;
    }
    if let Some(v) = a.num_docs {
        spec.n_docs = v;
    }
    if let Some(v) = a.tokens {
        spec.tokens_per_doc = v;
    }
    if let Some(v) = a.query_tokens {
        spec.tokens_per_query = v;
    }
    if let Some(v) = a.dim {
        spec.dim = v;
        if a.signal_dim.is_none() && spec.signal_dim.is_some_and(|s| s > v) {
            spec.signal_dim = None;
        }
    }
    if a.signal_dim.is_some() {
        spec.signal_dim = a.signal_dim;
    }
    if let Some(v) = a.nuisance {
        spec.nuisance_scale = v;
    }
    if let Some(v) = a.relevant {
        spec.relevant_per_query = v;
    }
    if let Some(v) = a.hard {
        spec.hard_per_query = v;
    }
    if let Some(v) = a.noise {
        spec.noise_scale = v;
    }
    let fixture = generate_corpus(&spec)?;
    fixture.write(&a.out, a.dtype.into())?;
    eprintln!(
        "wrote fixture with {} queries and {} documents to {}",
        spec.n_queries,
        spec.n_docs,
        a.out.display()
    );
    Ok(())
}

fn cmd_train_toy(a: TrainToyArgs) -> Result<()> {
    let head =
        ProjectionHead::load(&a.head).with_context(|| format!("reading {}", a.head.display()))?;
    let tuples =
        read_tuples(&a.tuples).with_context(|| format!("reading {}", a.tuples.display()))?;
    let (_, queries) = read_embeddings(&a.queries, QueryId::new)?;
    let (_, docs) = read_embeddings(&a.docs, DocId::new)?;
    let config = TrainerConfig {
        batch_size: a.batch_size,
        steps: a.steps,
        learning_rate: a.lr,
        momentum: a.momentum,
        seed: Seed(a.seed),
        kl: KlConfig {
            temperature: a.temperature,
            direction: if a.reverse_kl {
                KlDirection::StudentTeacher
            } else {
                KlDirection::TeacherStudent
            },
            ..KlConfig::default()
        },
        sim: SimilarityKind::Cosine,
    };
    let before = mean_tuple_loss(&head, &tuples, &queries, &docs, &config)?;
    let run = train_projection_toy(head, &tuples, &queries, &docs, &config)?;
    let after = mean_tuple_loss(&run.head, &tuples, &queries, &docs, &config)?;
    run.head.save(&a.out)?;
    if let Some(trace) = &a.trace {
        run.write_trace(trace)?;
    }
    println!("{before:.4} {after:.4}");
    eprintln!(
        "mean KL over {} tuples: {before:.4} -> {after:.4} after {} steps (student scores: unscaled cosine MaxSim)",
        tuples.len(),
        a.steps
    );
    Ok(())
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Index(a) => cmd_index(a),
        Command::Search(a) => cmd_search(a),
        Command::Rerank(a) => cmd_rerank(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Mine(a) => cmd_mine(a),
        Command::Tuples(a) => cmd_tuples(a),
        Command::Project(a) => cmd_project(a),
        Command::BenchMem(a) => cmd_bench_mem(a),
        Command::BenchTime(a) => cmd_bench_time(a),
        Command::GenFixture(a) => cmd_gen_fixture(a),
        Command::TrainToy(a) => cmd_train_toy(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
