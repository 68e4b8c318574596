//! Deterministic synthetic corpora with known relevance structure.
//!
//! Every query owns a latent unit direction in a `signal_dim`-dimensional
//! space. A relevant document's first token is that direction perturbed by
//! `noise_scale`; filler tokens keep cosine at most 0.9 to every latent, and
//! "hard" documents carry one token at cosine 0.80..0.98 to some query's
//! latent without being relevant. When `signal_dim < dim` the remaining
//! coordinates are Gaussian nuisance of scale `nuisance_scale`, independent
//! per token. Teacher scores are cosine MaxSim over the signal coordinates.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{write_qrels, Qrels};
use crate::index::EmbeddingFile;
use crate::mining::{write_texts, TeacherScores, TextCorpus};
use crate::rng::DetRng;
use crate::scoring::{dot, maxsim, SimilarityKind};
use crate::types::{DocId, Dtype, QueryId, Seed, TokenMatrix};

const FILLER_MAX_COS: f64 = 0.9;
const LATENT_MAX_COS: f64 = 0.9;
const HARD_COS: (f64, f64) = (0.80, 0.98);
const FILLER_VOCAB: usize = 400;
const MAX_TRIES: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_queries: usize,
    pub n_docs: usize,
    pub tokens_per_doc: usize,
    pub tokens_per_query: usize,
    pub dim: usize,
    /// Leading coordinates carrying relevance; `None` means all of `dim`.
    pub signal_dim: Option<usize>,
    pub nuisance_scale: f64,
    pub relevant_per_query: usize,
    pub hard_per_query: usize,
    pub noise_scale: f64,
    pub seed: Seed,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_queries: 16,
            n_docs: 200,
            tokens_per_doc: 8,
            tokens_per_query: 4,
            dim: 16,
            signal_dim: None,
            nuisance_scale: 0.0,
            relevant_per_query: 2,
            hard_per_query: 2,
            noise_scale: 0.0,
            seed: Seed(0),
        }
    }
}

impl SyntheticSpec {
    /// A corpus whose relevance lives in 8 of 32 coordinates, so a projection
    /// head has something to learn.
    pub fn toy_distillation(seed: Seed) -> Self {
        Self {
            n_queries: 96,
            n_docs: 960,
            tokens_per_doc: 6,
            tokens_per_query: 4,
            dim: 32,
            signal_dim: Some(8),
            nuisance_scale: 0.25,
            relevant_per_query: 2,
            hard_per_query: 3,
            noise_scale: 0.3,
            seed,
        }
    }

    pub fn signal_dim(&self) -> usize {
        self.signal_dim.unwrap_or(self.dim)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_queries == 0
            || self.n_docs == 0
            || self.tokens_per_doc == 0
            || self.tokens_per_query == 0
        {
            return bad("query, document and token counts must be positive".into());
        }
        if self.dim == 0 || self.dim > u16::MAX as usize {
            return bad(format!("dim {} outside 1..=65535", self.dim));
        }
        let s = self.signal_dim();
        if s < 2 || s > self.dim {
            return bad(format!("signal dim {s} must lie in 2..={}", self.dim));
        }
        if self.relevant_per_query == 0 {
            return bad("relevant_per_query must be positive".into());
        }
        let reserved = self
            .n_queries
            .checked_mul(self.relevant_per_query + self.hard_per_query)
            .filter(|&r| r <= self.n_docs);
        if reserved.is_none() {
            return bad(format!(
                "{} docs cannot hold {} queries x ({} relevant + {} hard)",
                self.n_docs, self.n_queries, self.relevant_per_query, self.hard_per_query
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite())
            || !(self.nuisance_scale >= 0.0 && self.nuisance_scale.is_finite())
        {
            return bad("noise and nuisance scales must be finite and non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub spec: SyntheticSpec,
    pub query_embeddings: BTreeMap<QueryId, TokenMatrix>,
    pub doc_embeddings: BTreeMap<DocId, TokenMatrix>,
    pub texts: TextCorpus,
    pub qrels: Qrels,
    pub teacher: TeacherScores,
    /// Per-query latent directions in signal space.
    pub latents: BTreeMap<QueryId, Vec<f64>>,
}

pub fn query_id(i: usize) -> QueryId {
    QueryId::new(format!("q{i:04}")).expect("valid id")
}

pub fn doc_id(i: usize) -> DocId {
    DocId::new(format!("d{i:05}")).expect("valid id")
}

fn max_cos(v: &[f64], latents: &[Vec<f64>]) -> f64 {
    latents
        .iter()
        .map(|u| dot(u, v))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn perturb(rng: &mut DetRng, u: &[f64], scale: f64) -> Vec<f64> {
    if scale == 0.0 {
        return u.to_vec();
    }
    let w = rng.unit_vector(u.len());
    unit(u.iter().zip(&w).map(|(a, b)| a + scale * b).collect())
}

struct Gen<'a> {
    rng: DetRng,
    spec: &'a SyntheticSpec,
    latents: Vec<Vec<f64>>,
}

impl Gen<'_> {
    fn filler(&mut self) -> Result<Vec<f64>> {
        for _ in 0..MAX_TRIES {
            let v = self.rng.unit_vector(self.spec.signal_dim());
            if max_cos(&v, &self.latents) <= FILLER_MAX_COS {
                return Ok(v);
            }
        }
        Err(Error::InvalidConfig(
            "signal dimension too small for the number of queries".into(),
        ))
    }

    fn hard(&mut self, owner: usize) -> Result<Vec<f64>> {
        let u = self.latents[owner].clone();
        for _ in 0..MAX_TRIES {
            let c = self.rng.uniform_in(HARD_COS.0, HARD_COS.1);
            let r = self.rng.unit_vector(u.len());
            let along = dot(&r, &u);
            let orth: Vec<f64> = r.iter().zip(&u).map(|(a, b)| a - along * b).collect();
            let n = dot(&orth, &orth).sqrt();
            if n < 1e-6 {
                continue;
            }
            let s = (1.0 - c * c).sqrt();
            let v: Vec<f64> = u
                .iter()
                .zip(&orth)
                .map(|(a, o)| c * a + s * o / n)
                .collect();
            if max_cos(&v, &self.latents) <= HARD_COS.1 {
                return Ok(v);
            }
        }
        Err(Error::InvalidConfig(
            "could not place a hard-negative token".into(),
        ))
    }

    fn embed(&mut self, signal: &[Vec<f64>]) -> Result<TokenMatrix> {
        let dim = self.spec.dim;
        let extra = dim - self.spec.signal_dim();
        let mut values = Vec::with_capacity(signal.len() * dim);
        for t in signal {
            values.extend_from_slice(t);
            for _ in 0..extra {
                values.push(self.spec.nuisance_scale * self.rng.normal());
            }
        }
        TokenMatrix::new(signal.len(), dim, values)
    }

    fn words(&mut self, n: usize) -> Vec<String> {
        (0..n)
            .map(|_| format!("w{:03}", self.rng.below(FILLER_VOCAB)))
            .collect()
    }
}

fn topic_terms(q: usize) -> [String; 3] {
    [0, 1, 2].map(|j| format!("topic{q:04}t{j}"))
}

/// Generates embeddings, texts, qrels and teacher scores for `spec`.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Fixture> {
    spec.validate()?;
    let s = spec.signal_dim();
    let mut g = Gen {
        rng: DetRng::new(spec.seed),
        spec,
        latents: Vec::with_capacity(spec.n_queries),
    };
    while g.latents.len() < spec.n_queries {
        let mut placed = false;
        for _ in 0..MAX_TRIES {
            let u = g.rng.unit_vector(s);
            if g.latents.is_empty() || max_cos(&u, &g.latents) <= LATENT_MAX_COS {
                g.latents.push(u);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::InvalidConfig(
                "signal dimension too small for the number of queries".into(),
            ));
        }
    }

    let mut slots: Vec<usize> = (0..spec.n_docs).collect();
    g.rng.shuffle(&mut slots);
    // role per document index: Some((query, relevant?))
    let mut role: Vec<Option<(usize, bool)>> = vec![None; spec.n_docs];
    let mut next = slots.into_iter();
    for q in 0..spec.n_queries {
        for _ in 0..spec.relevant_per_query {
            role[next.next().expect("validated")] = Some((q, true));
        }
    }
    for q in 0..spec.n_queries {
        for _ in 0..spec.hard_per_query {
            role[next.next().expect("validated")] = Some((q, false));
        }
    }

    let mut query_signal = Vec::with_capacity(spec.n_queries);
    let mut query_embeddings = BTreeMap::new();
    let mut query_texts = BTreeMap::new();
    for q in 0..spec.n_queries {
        let u = g.latents[q].clone();
        let mut tokens = vec![u.clone()];
        for _ in 1..spec.tokens_per_query {
            tokens.push(perturb(&mut g.rng, &u, spec.noise_scale));
        }
        query_embeddings.insert(query_id(q), g.embed(&tokens)?);
        let mut words = topic_terms(q).to_vec();
        words.extend(g.words(2));
        query_texts.insert(query_id(q), words.join(" "));
        query_signal.push(TokenMatrix::from_rows(&tokens)?);
    }

    let mut doc_signal = Vec::with_capacity(spec.n_docs);
    let mut doc_embeddings = BTreeMap::new();
    let mut doc_texts = BTreeMap::new();
    let mut qrels = Qrels::new();
    for (d, r) in role.iter().enumerate() {
        let mut tokens = Vec::with_capacity(spec.tokens_per_doc);
        let mut words = Vec::new();
        match *r {
            Some((q, true)) => {
                let u = g.latents[q].clone();
                tokens.push(perturb(&mut g.rng, &u, spec.noise_scale));
                words.extend(topic_terms(q));
                qrels.insert(query_id(q), doc_id(d), 1);
            }
            Some((q, false)) => {
                tokens.push(g.hard(q)?);
                words.push(topic_terms(q)[0].clone());
            }
            None => {}
        }
        while tokens.len() < spec.tokens_per_doc {
            tokens.push(g.filler()?);
        }
        let n_words = 12 - words.len();
        words.extend(g.words(n_words));
        doc_embeddings.insert(doc_id(d), g.embed(&tokens)?);
        doc_texts.insert(doc_id(d), words.join(" "));
        doc_signal.push(TokenMatrix::from_rows(&tokens)?);
    }

    let mut teacher = TeacherScores::new();
    for (q, qs) in query_signal.iter().enumerate() {
        for (d, ds) in doc_signal.iter().enumerate() {
            teacher.insert(
                query_id(q),
                doc_id(d),
                maxsim(qs, ds, SimilarityKind::Cosine)?,
            )?;
        }
    }

    Ok(Fixture {
        spec: spec.clone(),
        query_embeddings,
        doc_embeddings,
        texts: TextCorpus::new(doc_texts, query_texts)?,
        qrels,
        teacher,
        latents: g
            .latents
            .into_iter()
            .enumerate()
            .map(|(i, u)| (query_id(i), u))
            .collect(),
    })
}

/// File names written by [`Fixture::write`].
pub mod files {
    pub const DOC_EMBEDDINGS: &str = "docs.mve";
    pub const QUERY_EMBEDDINGS: &str = "queries.mve";
    pub const CORPUS: &str = "corpus.jsonl";
    pub const QUERIES: &str = "queries.jsonl";
    pub const QRELS: &str = "qrels.txt";
    pub const TEACHER: &str = "teacher.txt";
}

impl Fixture {
    /// Qrels restricted to `queries`.
    pub fn qrels_for<'a>(&self, queries: impl IntoIterator<Item = &'a QueryId>) -> Qrels {
        let mut out = Qrels::new();
        for q in queries {
            if let Some(j) = self.qrels.judgments_for(q) {
                for (d, &rel) in j {
                    out.insert(q.clone(), d.clone(), rel);
                }
            }
        }
        out
    }

    /// Writes every artifact into `dir`, embeddings in `dtype`.
    pub fn write(&self, dir: &Path, dtype: Dtype) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let emb = |items: Vec<(String, TokenMatrix)>| EmbeddingFile {
            dtype,
            dim: self.spec.dim,
            items,
        };
        emb(self
            .doc_embeddings
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect())
        .write(&dir.join(files::DOC_EMBEDDINGS))?;
        emb(self
            .query_embeddings
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect())
        .write(&dir.join(files::QUERY_EMBEDDINGS))?;
        write_texts(
            self.texts.docs.iter().map(|(k, v)| (k, v.clone())),
            &dir.join(files::CORPUS),
        )?;
        write_texts(
            self.texts.queries.iter().map(|(k, v)| (k, v.clone())),
            &dir.join(files::QUERIES),
        )?;
        write_qrels(&self.qrels, &dir.join(files::QRELS))?;
        self.teacher.write(&dir.join(files::TEACHER))
    }
}
