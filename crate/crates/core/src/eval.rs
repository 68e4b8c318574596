//! TREC-style evaluation: qrels and run files, NDCG@k.
//!
//! Qrels lines are `qid 0 docid rel`; run lines are
//! `qid Q0 docid rank score tag` (1-based rank), whitespace separated.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scoring::ScoredDoc;
use crate::types::{DocId, QueryId};

pub const DEFAULT_RUN_TAG: &str = "edgecol";

/// Relevance judgments.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<QueryId, BTreeMap<DocId, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a judgment, replacing any previous one for the pair.
    pub fn insert(&mut self, query: QueryId, doc: DocId, rel: u32) {
        self.judgments.entry(query).or_default().insert(doc, rel);
    }

    pub fn get(&self, query: &QueryId, doc: &DocId) -> Option<u32> {
        self.judgments.get(query)?.get(doc).copied()
    }

    pub fn contains_query(&self, query: &QueryId) -> bool {
        self.judgments.contains_key(query)
    }

    pub fn queries(&self) -> impl Iterator<Item = &QueryId> {
        self.judgments.keys()
    }

    pub fn judgments_for(&self, query: &QueryId) -> Option<&BTreeMap<DocId, u32>> {
        self.judgments.get(query)
    }

    /// Documents with relevance > 0 for `query`, ascending by id.
    pub fn positives(&self, query: &QueryId) -> Vec<&DocId> {
        self.judgments
            .get(query)
            .map(|m| m.iter().filter(|(_, &r)| r > 0).map(|(d, _)| d).collect())
            .unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&QueryId, &DocId, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, m)| m.iter().map(move |(d, &r)| (q, d, r)))
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }
}

/// Ranked results per query.
#[derive(Debug, Clone, PartialEq)]
pub struct Run {
    rankings: BTreeMap<QueryId, Vec<ScoredDoc>>,
    tag: String,
}

impl Run {
    /// Validates that every ranking has unique documents and non-increasing
    /// scores.
    pub fn new(
        rankings: BTreeMap<QueryId, Vec<ScoredDoc>>,
        tag: impl Into<String>,
    ) -> Result<Self> {
        let tag = tag.into();
        if tag.is_empty() || tag.chars().any(char::is_whitespace) {
            return Err(Error::InvalidId(tag));
        }
        for (q, docs) in &rankings {
            let mut seen = std::collections::BTreeSet::new();
            for (i, s) in docs.iter().enumerate() {
                if !seen.insert(&s.doc) {
                    return Err(Error::DuplicateId(format!("{} in ranking of {q}", s.doc)));
                }
                if !s.score.is_finite() {
                    return Err(Error::NonFinite {
                        value: s.score,
                        position: i,
                    });
                }
                if i > 0 && s.score > docs[i - 1].score {
                    return Err(Error::Format(format!(
                        "scores of query {q} increase at rank {}",
                        i + 1
                    )));
                }
            }
        }
        Ok(Self { rankings, tag })
    }

    pub fn rankings(&self) -> &BTreeMap<QueryId, Vec<ScoredDoc>> {
        &self.rankings
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Gain {
    /// `gain = rel`
    #[default]
    Linear,
    /// `gain = 2^rel - 1`
    Exponential,
}

impl Gain {
    fn of(self, rel: u32) -> f64 {
        match self {
            Gain::Linear => f64::from(rel),
            Gain::Exponential => 2f64.powi(rel as i32) - 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NdcgReport {
    pub k: usize,
    /// Queries that entered the mean.
    pub per_query: BTreeMap<QueryId, f64>,
    pub mean: f64,
}

/// DCG@k of relevance values already in ranked order.
fn dcg(rels: impl Iterator<Item = u32>, k: usize, gain: Gain) -> f64 {
    rels.take(k)
        .enumerate()
        .map(|(i, r)| gain.of(r) / ((i + 2) as f64).log2())
        .sum()
}

fn query_ndcg(
    ranking: Option<&Vec<ScoredDoc>>,
    judged: &BTreeMap<DocId, u32>,
    k: usize,
    gain: Gain,
) -> f64 {
    let mut ideal: Vec<u32> = judged.values().copied().filter(|&r| r > 0).collect();
    ideal.sort_unstable_by(|a, b| b.cmp(a));
    let idcg = dcg(ideal.into_iter(), k, gain);
    let Some(ranking) = ranking else {
        return 0.0;
    };
    let got = dcg(
        ranking
            .iter()
            .map(|s| judged.get(&s.doc).copied().unwrap_or(0)),
        k,
        gain,
    );
    got / idcg
}

/// NDCG@k per query and averaged.
///
/// Queries whose judgments are all zero are skipped; judged queries missing
/// from the run score 0 and count towards the mean.
pub fn ndcg_at_k(run: &Run, qrels: &Qrels, k: usize, gain: Gain) -> Result<NdcgReport> {
    ndcg_at_k_threads(run, qrels, k, gain, 1)
}

pub fn ndcg_at_k_threads(
    run: &Run,
    qrels: &Qrels,
    k: usize,
    gain: Gain,
    threads: usize,
) -> Result<NdcgReport> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if let Some(q) = run.rankings.keys().find(|q| !qrels.contains_query(q)) {
        return Err(Error::QueryNotInQrels(q.to_string()));
    }
    let evaluable: Vec<(&QueryId, &BTreeMap<DocId, u32>)> = qrels
        .judgments
        .iter()
        .filter(|(_, m)| m.values().any(|&r| r > 0))
        .collect();
    let one = |(q, judged): &(&QueryId, &BTreeMap<DocId, u32>)| {
        (
            (*q).clone(),
            query_ndcg(run.rankings.get(*q), judged, k, gain),
        )
    };
    let scores: Vec<(QueryId, f64)> = if threads <= 1 {
        evaluable.iter().map(one).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        pool.install(|| evaluable.par_iter().map(one).collect())
    };
    if scores.is_empty() {
        return Err(Error::EmptyInput("no query has a positive judgment".into()));
    }
    let mean = scores.iter().map(|(_, v)| v).sum::<f64>() / scores.len() as f64;
    Ok(NdcgReport {
        k,
        per_query: scores.into_iter().collect(),
        mean,
    })
}

/// Unweighted mean of per-dataset scores.
pub fn aggregate_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("nothing to average".into()));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

fn parse_err(path: Option<&Path>, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.map(Path::to_path_buf),
        line,
        message: message.into(),
    }
}

pub fn parse_qrels(text: &str, path: Option<&Path>) -> Result<Qrels> {
    let mut qrels = Qrels::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [q, _, d, rel] = fields[..] else {
            return Err(parse_err(
                path,
                n,
                format!("expected 4 fields, found {}", fields.len()),
            ));
        };
        let rel: u32 = rel.parse().map_err(|_| {
            parse_err(
                path,
                n,
                format!("relevance {rel:?} is not a non-negative integer"),
            )
        })?;
        let (q, d) = (QueryId::new(q)?, DocId::new(d)?);
        if qrels.get(&q, &d).is_some() {
            return Err(parse_err(
                path,
                n,
                format!("duplicate judgment for {q} {d}"),
            ));
        }
        qrels.insert(q, d, rel);
    }
    Ok(qrels)
}

pub fn format_qrels(qrels: &Qrels) -> String {
    let mut out = String::new();
    for (q, d, r) in qrels.iter() {
        let _ = writeln!(out, "{q} 0 {d} {r}");
    }
    out
}

pub fn read_qrels(path: &Path) -> Result<Qrels> {
    parse_qrels(&std::fs::read_to_string(path)?, Some(path))
}

pub fn write_qrels(qrels: &Qrels, path: &Path) -> Result<()> {
    std::fs::write(path, format_qrels(qrels))?;
    Ok(())
}

pub fn parse_run(text: &str, path: Option<&Path>) -> Result<Run> {
    let mut raw: BTreeMap<QueryId, Vec<(u64, ScoredDoc, usize)>> = BTreeMap::new();
    let mut tag: Option<String> = None;
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [q, _, d, rank, score, t] = fields[..] else {
            return Err(parse_err(
                path,
                n,
                format!("expected 6 fields, found {}", fields.len()),
            ));
        };
        let rank: u64 = rank.parse().ok().filter(|&r| r >= 1).ok_or_else(|| {
            parse_err(path, n, format!("rank {rank:?} is not a positive integer"))
        })?;
        let score: f64 = score
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| parse_err(path, n, format!("score {score:?} is not a finite number")))?;
        tag.get_or_insert_with(|| t.to_string());
        raw.entry(QueryId::new(q)?).or_default().push((
            rank,
            ScoredDoc::new(DocId::new(d)?, score),
            n,
        ));
    }
    let mut rankings = BTreeMap::new();
    for (q, mut entries) in raw {
        entries.sort_by_key(|(rank, _, _)| *rank);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(parse_err(
                    path,
                    w[1].2,
                    format!("duplicate rank {} for {q}", w[1].0),
                ));
            }
            if w[1].1.score > w[0].1.score {
                return Err(parse_err(
                    path,
                    w[1].2,
                    format!("score increases with rank for {q}"),
                ));
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (_, s, line) in &entries {
            if !seen.insert(s.doc.clone()) {
                return Err(parse_err(
                    path,
                    *line,
                    format!("duplicate document {} for {q}", s.doc),
                ));
            }
        }
        rankings.insert(q, entries.into_iter().map(|(_, s, _)| s).collect());
    }
    Run::new(rankings, tag.unwrap_or_else(|| DEFAULT_RUN_TAG.to_string()))
}

/// Canonical run text: queries ascending, ranks 1..n, shortest round-trip
/// score formatting, LF endings.
pub fn format_run(run: &Run) -> String {
    let mut out = String::new();
    for (q, docs) in &run.rankings {
        for (i, s) in docs.iter().enumerate() {
            let _ = writeln!(out, "{q} Q0 {} {} {} {}", s.doc, i + 1, s.score, run.tag);
        }
    }
    out
}

pub fn read_run(path: &Path) -> Result<Run> {
    parse_run(&std::fs::read_to_string(path)?, Some(path))
}

pub fn write_run(run: &Run, path: &Path) -> Result<()> {
    std::fs::write(path, format_run(run))?;
    Ok(())
}
