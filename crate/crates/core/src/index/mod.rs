//! Persistent multi-vector index with exact MaxSim search and reranking.
//!
//! File layout (`MVIX`, all little-endian):
//!
//! ```text
//! "MVIX" · u32 version=1 · u8 dtype (0=f32, 1=f16) · u8 sim (0=dot, 1=cosine)
//! · u16 dim · u64 doc count N · u32 metadata length · metadata (UTF-8 JSON)
//! · N records sorted by DocId: u32 id length · id · u32 rows · rows*dim values
//! ```
//!
//! Stored values are kept in memory as the exact `f64` images of their storage
//! dtype, so scoring always runs on decoded 64-bit values and re-saving a
//! loaded index reproduces the file byte for byte.

mod format;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

pub use format::{quantize_matrix, quantize_value, EmbeddingFile};

use crate::error::{Error, Result};
use crate::scoring::{self, normalize_rows, ScoredDoc, SimilarityKind};
use crate::types::{DocId, Dtype, QueryId, TokenMatrix};
use format::{dim_to_u16, write_record, ByteReader};

const INDEX_MAGIC: &[u8; 4] = b"MVIX";
pub const INDEX_VERSION: u32 = 1;

/// Unit-norm tolerance for stored rows of a cosine index.
pub const UNIT_NORM_TOLERANCE: f64 = 1.0 / 1024.0;

/// A first-stage candidate set to be reordered by MaxSim.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateList {
    query: QueryId,
    docs: Vec<DocId>,
}

impl CandidateList {
    pub fn new(query: QueryId, docs: Vec<DocId>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for d in &docs {
            if !seen.insert(d) {
                return Err(Error::DuplicateId(d.to_string()));
            }
        }
        Ok(Self { query, docs })
    }

    pub fn query(&self) -> &QueryId {
        &self.query
    }

    pub fn docs(&self) -> &[DocId] {
        &self.docs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiVectorIndex {
    dim: usize,
    dtype: Dtype,
    sim: SimilarityKind,
    entries: BTreeMap<DocId, TokenMatrix>,
    metadata: BTreeMap<String, String>,
    /// Row-normalized copies of `entries` for cosine indexes.
    normalized: Option<BTreeMap<DocId, TokenMatrix>>,
}

/// Builds an index from `(id, embeddings)` pairs.
///
/// Cosine indexes normalize rows before converting to the storage dtype.
pub fn build_index<I>(
    embeddings: I,
    dim: usize,
    dtype: Dtype,
    sim: SimilarityKind,
) -> Result<MultiVectorIndex>
where
    I: IntoIterator<Item = (DocId, TokenMatrix)>,
{
    dim_to_u16(dim)?;
    let mut entries = BTreeMap::new();
    for (id, m) in embeddings {
        if m.dim() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: m.dim(),
                context: Some(format!("document {id}")),
            });
        }
        if entries.contains_key(&id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        let m = match sim {
            SimilarityKind::Dot => m,
            SimilarityKind::Cosine => normalize_rows(&m)?,
        };
        let stored = quantize_matrix(&m, dtype)?;
        entries.insert(id, stored);
    }
    if entries.is_empty() {
        return Err(Error::EmptyCollection);
    }
    MultiVectorIndex::assemble(dim, dtype, sim, entries, BTreeMap::new())
}

impl MultiVectorIndex {
    fn assemble(
        dim: usize,
        dtype: Dtype,
        sim: SimilarityKind,
        entries: BTreeMap<DocId, TokenMatrix>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        let normalized = match sim {
            SimilarityKind::Dot => None,
            SimilarityKind::Cosine => Some(
                entries
                    .iter()
                    .map(|(id, m)| Ok((id.clone(), normalize_rows(m)?)))
                    .collect::<Result<_>>()?,
            ),
        };
        Ok(Self {
            dim,
            dtype,
            sim,
            entries,
            metadata,
            normalized,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn sim(&self) -> SimilarityKind {
        self.sim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decoded stored values, keyed by document id.
    pub fn entries(&self) -> &BTreeMap<DocId, TokenMatrix> {
        &self.entries
    }

    pub fn get(&self, id: &DocId) -> Option<&TokenMatrix> {
        self.entries.get(id)
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    pub fn total_tokens(&self) -> usize {
        self.entries.values().map(TokenMatrix::rows).sum()
    }

    /// Bytes occupied by stored token values (excluding ids and headers).
    pub fn value_bytes(&self) -> u64 {
        (self.total_tokens() * self.dim * self.dtype.size()) as u64
    }

    fn scoring_view(&self) -> &BTreeMap<DocId, TokenMatrix> {
        self.normalized.as_ref().unwrap_or(&self.entries)
    }

    fn prepare_query(&self, q: &TokenMatrix) -> Result<TokenMatrix> {
        if q.dim() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: q.dim(),
                context: Some("query vs index dimension".into()),
            });
        }
        match self.sim {
            SimilarityKind::Dot => Ok(q.clone()),
            SimilarityKind::Cosine => normalize_rows(q),
        }
    }

    /// MaxSim of every document for `q`, unsorted.
    pub fn score_all(&self, q: &TokenMatrix) -> Result<Vec<ScoredDoc>> {
        let q = self.prepare_query(q)?;
        Ok(self
            .scoring_view()
            .iter()
            .map(|(id, d)| ScoredDoc::new(id.clone(), scoring::maxsim_dot(&q, d)))
            .collect())
    }

    /// Exact top-`k` search.
    pub fn search(&self, q: &TokenMatrix, k: usize) -> Result<Vec<ScoredDoc>> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        Ok(scoring::top_k(self.score_all(q)?, k))
    }

    /// Searches many queries, optionally on a worker pool. Results do not
    /// depend on `threads`.
    pub fn search_many(
        &self,
        queries: &BTreeMap<QueryId, TokenMatrix>,
        k: usize,
        threads: usize,
    ) -> Result<BTreeMap<QueryId, Vec<ScoredDoc>>> {
        let one = |(qid, q): (&QueryId, &TokenMatrix)| Ok((qid.clone(), self.search(q, k)?));
        if threads <= 1 {
            return queries.iter().map(one).collect();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        let results: Vec<Result<(QueryId, Vec<ScoredDoc>)>> =
            pool.install(|| queries.par_iter().map(one).collect());
        results.into_iter().collect()
    }

    /// Reorders `candidates` by MaxSim against `q`.
    pub fn rerank(&self, q: &TokenMatrix, candidates: &CandidateList) -> Result<Vec<ScoredDoc>> {
        let q = self.prepare_query(q)?;
        let view = self.scoring_view();
        let scored = candidates
            .docs()
            .iter()
            .map(|id| {
                let d = view
                    .get(id)
                    .ok_or_else(|| Error::UnknownDoc(id.to_string()))?;
                Ok(ScoredDoc::new(id.clone(), scoring::maxsim_dot(&q, d)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(scoring::top_k(scored, usize::MAX))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + self.value_bytes() as usize);
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.push(self.dtype.code());
        out.push(self.sim.code());
        out.extend_from_slice(&dim_to_u16(self.dim)?.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        let meta = serde_json::to_vec(&self.metadata)?;
        let meta_len =
            u32::try_from(meta.len()).map_err(|_| Error::Format("metadata too long".into()))?;
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(&meta);
        for (id, m) in &self.entries {
            write_record(&mut out, id.as_str(), m, self.dtype)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.magic(INDEX_MAGIC, "MVIX")?;
        let version = r.u32("version")?;
        if version != INDEX_VERSION {
            return Err(Error::VersionMismatch {
                expected: INDEX_VERSION,
                found: version,
            });
        }
        let dtype = Dtype::from_code(r.u8("dtype")?)?;
        let sim = SimilarityKind::from_code(r.u8("similarity")?)?;
        let dim = r.u16("dim")? as usize;
        if dim == 0 {
            return Err(Error::Format("header dim must be at least 1".into()));
        }
        let count = r.u64("doc count")?;
        let meta_len = r.u32("metadata length")? as usize;
        let metadata: BTreeMap<String, String> =
            serde_json::from_slice(r.take(meta_len, "metadata")?)
                .map_err(|e| Error::Format(format!("metadata is not a JSON string map: {e}")))?;
        let mut entries = BTreeMap::new();
        let mut previous: Option<DocId> = None;
        for _ in 0..count {
            let (id, m) = r.record(dim, dtype)?;
            let id = DocId::new(id)?;
            if let Some(prev) = &previous {
                if prev >= &id {
                    return Err(Error::Format(format!(
                        "records not strictly sorted by id: {prev} before {id}"
                    )));
                }
            }
            if sim == SimilarityKind::Cosine {
                for (row, v) in m.iter_rows().enumerate() {
                    let n = scoring::norm(v);
                    if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                        return Err(Error::Format(format!(
                            "cosine index row {row} of {id} has norm {n}"
                        )));
                    }
                }
            }
            previous = Some(id.clone());
            entries.insert(id, m);
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after last record".into()));
        }
        if entries.is_empty() {
            return Err(Error::EmptyCollection);
        }
        Self::assemble(dim, dtype, sim, entries, metadata)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(&self.to_bytes()?)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn save_index(index: &MultiVectorIndex, path: &Path) -> Result<()> {
    index.save(path)
}

pub fn load_index(path: &Path) -> Result<MultiVectorIndex> {
    MultiVectorIndex::load(path)
}
