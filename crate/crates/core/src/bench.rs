//! Memory accounting and wall-clock timing of index operations.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::index::MultiVectorIndex;
use crate::types::{Dtype, QueryId, TokenMatrix};

const MIB_SHIFT: u32 = 20;

/// Size of a token-vector store: `n_docs × tokens_per_doc × dim` values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MemorySpec {
    pub n_docs: u64,
    pub tokens_per_doc: u64,
    pub dim: u64,
    pub dtype: Dtype,
}

impl MemorySpec {
    pub fn new(n_docs: u64, tokens_per_doc: u64, dim: u64, dtype: Dtype) -> Result<Self> {
        if n_docs == 0 || tokens_per_doc == 0 || dim == 0 {
            return Err(Error::InvalidConfig(
                "memory spec counts must be positive".into(),
            ));
        }
        Ok(Self {
            n_docs,
            tokens_per_doc,
            dim,
            dtype,
        })
    }
}

/// Exact byte count of the stored values. Errors above 2^63.
pub fn memory_bytes(spec: &MemorySpec) -> Result<u64> {
    spec.n_docs
        .checked_mul(spec.tokens_per_doc)
        .and_then(|v| v.checked_mul(spec.dim))
        .and_then(|v| v.checked_mul(spec.dtype.size() as u64))
        .filter(|&b| b <= 1u64 << 63)
        .ok_or_else(|| Error::Overflow(format!("{spec:?} exceeds 2^63 bytes")))
}

/// Bytes in MiB, rounded to nearest with ties away from zero.
pub fn bytes_to_mib(bytes: u64) -> u64 {
    (bytes >> MIB_SHIFT) + u64::from(bytes & ((1 << MIB_SHIFT) - 1) >= 1 << (MIB_SHIFT - 1))
}

pub fn memory_mib(spec: &MemorySpec) -> Result<u64> {
    Ok(bytes_to_mib(memory_bytes(spec)?))
}

/// Mean and per-run wall seconds of one phase.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseTiming {
    pub mean_seconds: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub runs: Vec<f64>,
}

impl PhaseTiming {
    fn from_runs(runs: Vec<f64>) -> Self {
        let mean_seconds = runs.iter().sum::<f64>() / runs.len() as f64;
        Self { mean_seconds, runs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Phases {
    /// Deserializing the index from its persisted bytes.
    pub load: PhaseTiming,
    /// Scoring every document for every query, without ranking.
    pub score: PhaseTiming,
    /// Top-k search for every query.
    pub search: PhaseTiming,
    pub docs_per_second: f64,
    pub queries_per_second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IndexShape {
    pub n_docs: u64,
    pub total_tokens: u64,
    pub dim: u64,
    pub dtype: Dtype,
}

/// Timing report; serializes with keys `spec, bytes, mib, phases, environment`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingReport {
    pub spec: IndexShape,
    pub bytes: u64,
    pub mib: u64,
    pub phases: Phases,
    pub environment: String,
}

impl TimingReport {
    /// Drops per-run records, keeping means.
    pub fn summary(&self) -> Self {
        let mut out = self.clone();
        for p in [
            &mut out.phases.load,
            &mut out.phases.score,
            &mut out.phases.search,
        ] {
            p.runs.clear();
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn environment_description(threads: usize) -> String {
    format!(
        "{} {} {}; threads={threads}; available_parallelism={}",
        env!("CARGO_PKG_NAME"),
        std::env::consts::OS,
        std::env::consts::ARCH,
        std::thread::available_parallelism().map_or(1, |n| n.get()),
    )
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(f64, T)> {
    let start = Instant::now();
    let out = f()?;
    Ok((start.elapsed().as_secs_f64(), out))
}

/// Times loading, scoring and top-`k` search over `repeats` runs after one
/// untimed warm-up.
pub fn time_run(
    index: &MultiVectorIndex,
    queries: &BTreeMap<QueryId, TokenMatrix>,
    k: usize,
    repeats: usize,
    threads: usize,
) -> Result<TimingReport> {
    if repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("no queries to time".into()));
    }
    let bytes = index.to_bytes()?;
    let run_once = || -> Result<(f64, f64, f64)> {
        let (load, loaded) = timed(|| MultiVectorIndex::from_bytes(&bytes))?;
        let (score, _) = timed(|| {
            queries
                .values()
                .map(|q| loaded.score_all(q))
                .collect::<Result<Vec<_>>>()
        })?;
        let (search, _) = timed(|| loaded.search_many(queries, k, threads))?;
        Ok((load, score, search))
    };
    run_once()?;
    let mut load = Vec::with_capacity(repeats);
    let mut score = Vec::with_capacity(repeats);
    let mut search = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let (l, s, r) = run_once()?;
        load.push(l);
        score.push(s);
        search.push(r);
    }
    let score = PhaseTiming::from_runs(score);
    let search = PhaseTiming::from_runs(search);
    let n_docs = index.len() as u64;
    let value_bytes = index.value_bytes();
    Ok(TimingReport {
        spec: IndexShape {
            n_docs,
            total_tokens: index.total_tokens() as u64,
            dim: index.dim() as u64,
            dtype: index.dtype(),
        },
        bytes: value_bytes,
        mib: bytes_to_mib(value_bytes),
        phases: Phases {
            docs_per_second: (n_docs * queries.len() as u64) as f64
                / score.mean_seconds.max(f64::MIN_POSITIVE),
            queries_per_second: queries.len() as f64 / search.mean_seconds.max(f64::MIN_POSITIVE),
            load: PhaseTiming::from_runs(load),
            score,
            search,
        },
        environment: environment_description(threads),
    })
}
