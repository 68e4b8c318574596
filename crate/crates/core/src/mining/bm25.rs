//! Okapi BM25 over an in-memory inverted index.
//!
//! `score(q, d) = Σ_{t ∈ q} idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·|d|/avgdl))`
//! with the non-negative `idf(t) = ln(1 + (N − df + 0.5) / (df + 0.5))`.
//! Query terms are deduplicated, keeping first-occurrence order.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::mining::text::tokenize;
use crate::scoring::{top_k, ScoredDoc};
use crate::types::DocId;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<()> {
        if !(self.k1 >= 0.0 && self.k1.is_finite()) || !(0.0..=1.0).contains(&self.b) {
            return Err(Error::InvalidConfig(format!(
                "BM25 needs k1 >= 0 and b in [0, 1], got k1={} b={}",
                self.k1, self.b
            )));
        }
        Ok(())
    }
}

/// Collection statistics BM25 needs.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub n_docs: usize,
    pub df: HashMap<String, usize>,
    pub avgdl: f64,
}

impl CorpusStats {
    pub fn from_tokenized<'a>(docs: impl IntoIterator<Item = &'a [String]>) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut n_docs = 0;
        let mut total_len = 0;
        for terms in docs {
            n_docs += 1;
            total_len += terms.len();
            let unique: HashSet<&String> = terms.iter().collect();
            for t in unique {
                *df.entry(t.clone()).or_default() += 1;
            }
        }
        let avgdl = if n_docs == 0 {
            0.0
        } else {
            total_len as f64 / n_docs as f64
        };
        Self { n_docs, df, avgdl }
    }

    pub fn idf(&self, term: &str) -> f64 {
        idf(self.n_docs, self.df.get(term).copied().unwrap_or(0))
    }
}

pub fn idf(n_docs: usize, df: usize) -> f64 {
    (1.0 + (n_docs as f64 - df as f64 + 0.5) / (df as f64 + 0.5)).ln()
}

fn term_weight(idf: f64, tf: f64, doc_len: f64, avgdl: f64, p: Bm25Params) -> f64 {
    let norm = if avgdl > 0.0 { doc_len / avgdl } else { 0.0 };
    idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * norm))
}

fn distinct(terms: &[String]) -> Vec<&String> {
    let mut seen = HashSet::new();
    terms.iter().filter(|t| seen.insert(*t)).collect()
}

/// BM25 of one tokenized document for a tokenized query.
pub fn bm25_score(
    query_terms: &[String],
    doc_terms: &[String],
    stats: &CorpusStats,
    params: Bm25Params,
) -> Result<f64> {
    if query_terms.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let mut tf: HashMap<&String, usize> = HashMap::new();
    for t in doc_terms {
        *tf.entry(t).or_default() += 1;
    }
    let mut score = 0.0;
    for t in distinct(query_terms) {
        if let Some(&f) = tf.get(t) {
            score += term_weight(
                stats.idf(t),
                f as f64,
                doc_terms.len() as f64,
                stats.avgdl,
                params,
            );
        }
    }
    Ok(score)
}

/// Inverted index over a text corpus.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    params: Bm25Params,
    stats: CorpusStats,
    doc_ids: Vec<DocId>,
    doc_lens: Vec<usize>,
    postings: HashMap<String, Vec<(usize, usize)>>,
}

impl Bm25Index {
    pub fn build(corpus: &BTreeMap<DocId, String>, params: Bm25Params) -> Result<Self> {
        params.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCollection);
        }
        let tokenized: Vec<Vec<String>> = corpus.values().map(|t| tokenize(t)).collect();
        let stats = CorpusStats::from_tokenized(tokenized.iter().map(Vec::as_slice));
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (i, terms) in tokenized.iter().enumerate() {
            let mut tf: BTreeMap<&String, usize> = BTreeMap::new();
            for t in terms {
                *tf.entry(t).or_default() += 1;
            }
            for (t, f) in tf {
                postings.entry(t.clone()).or_default().push((i, f));
            }
        }
        Ok(Self {
            params,
            stats,
            doc_ids: corpus.keys().cloned().collect(),
            doc_lens: tokenized.iter().map(Vec::len).collect(),
            postings,
        })
    }

    pub fn stats(&self) -> &CorpusStats {
        &self.stats
    }

    pub fn params(&self) -> Bm25Params {
        self.params
    }

    /// Scores every document; documents sharing no term with the query get 0.
    pub fn score_all(&self, query: &str) -> Result<Vec<ScoredDoc>> {
        let terms = tokenize(query);
        if terms.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let mut scores = vec![0.0; self.doc_ids.len()];
        for t in distinct(&terms) {
            let Some(list) = self.postings.get(t) else {
                continue;
            };
            let w = self.stats.idf(t);
            for &(doc, tf) in list {
                scores[doc] += term_weight(
                    w,
                    tf as f64,
                    self.doc_lens[doc] as f64,
                    self.stats.avgdl,
                    self.params,
                );
            }
        }
        Ok(self
            .doc_ids
            .iter()
            .zip(scores)
            .map(|(id, s)| ScoredDoc::new(id.clone(), s))
            .collect())
    }

    /// Top-`k` documents by BM25, ties by ascending id.
    pub fn top_k(&self, query: &str, k: usize) -> Result<Vec<ScoredDoc>> {
        if k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        Ok(top_k(self.score_all(query)?, k))
    }
}

/// One-shot BM25 retrieval over `corpus`.
pub fn bm25_top_k(
    query: &str,
    corpus: &BTreeMap<DocId, String>,
    k: usize,
    params: Bm25Params,
) -> Result<Vec<ScoredDoc>> {
    Bm25Index::build(corpus, params)?.top_k(query, k)
}
