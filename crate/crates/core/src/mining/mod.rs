//! Hard-negative mining and n-way distillation tuple assembly.
//!
//! Each `(query, positive)` pair receives `n_way - 1` negatives drawn from
//! three sources, apportioned by largest remainder in the fixed order
//! (model, bm25, random):
//!
//! * **model**: highest teacher-scored documents whose score stays below the
//!   false-negative threshold (by default `0.95 × teacher(q, positive)`),
//! * **bm25**: top lexical matches not already chosen,
//! * **random**: seed-deterministic uniform picks from what remains.
//!
//! Any shortfall in the first two sources is filled from the random pool.

pub mod bm25;
pub mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Qrels;
use crate::rng::{fnv1a, DetRng};
use crate::types::{DocId, QueryId, Seed};
use bm25::{Bm25Index, Bm25Params};
use text::normalize_text;

/// Document and query texts.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextCorpus {
    pub docs: BTreeMap<DocId, String>,
    pub queries: BTreeMap<QueryId, String>,
}

impl TextCorpus {
    pub fn new(docs: BTreeMap<DocId, String>, queries: BTreeMap<QueryId, String>) -> Result<Self> {
        if let Some((id, _)) = docs.iter().find(|(_, t)| t.trim().is_empty()) {
            return Err(Error::Format(format!("document {id} has empty text")));
        }
        if let Some((id, _)) = queries.iter().find(|(_, t)| t.trim().is_empty()) {
            return Err(Error::Format(format!("query {id} has empty text")));
        }
        Ok(Self { docs, queries })
    }

    /// Applies [`normalize_text`] to every text.
    pub fn normalized(&self, lowercase: bool) -> Self {
        Self {
            docs: self
                .docs
                .iter()
                .map(|(k, v)| (k.clone(), normalize_text(v, lowercase)))
                .collect(),
            queries: self
                .queries
                .iter()
                .map(|(k, v)| (k.clone(), normalize_text(v, lowercase)))
                .collect(),
        }
    }
}

/// Teacher relevance scores per `(query, doc)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TeacherScores {
    scores: BTreeMap<QueryId, BTreeMap<DocId, f64>>,
}

impl TeacherScores {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, query: QueryId, doc: DocId, score: f64) -> Result<()> {
        if !score.is_finite() {
            return Err(Error::NonFinite {
                value: score,
                position: 0,
            });
        }
        self.scores.entry(query).or_default().insert(doc, score);
        Ok(())
    }

    pub fn get(&self, query: &QueryId, doc: &DocId) -> Option<f64> {
        self.scores.get(query)?.get(doc).copied()
    }

    pub fn for_query(&self, query: &QueryId) -> Option<&BTreeMap<DocId, f64>> {
        self.scores.get(query)
    }

    pub fn len(&self) -> usize {
        self.scores.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn require(&self, query: &QueryId, doc: &DocId) -> Result<f64> {
        self.get(query, doc)
            .ok_or_else(|| Error::MissingTeacherScore {
                query: query.to_string(),
                doc: doc.to_string(),
            })
    }

    /// Parses `qid docid score` lines.
    pub fn parse(text: &str, path: Option<&Path>) -> Result<Self> {
        let mut out = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse {
                path: path.map(Path::to_path_buf),
                line: i + 1,
                message,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [q, d, s] = fields[..] else {
                return Err(err(format!("expected 3 fields, found {}", fields.len())));
            };
            let score: f64 = s
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| err(format!("score {s:?} is not a finite number")))?;
            out.insert(QueryId::new(q)?, DocId::new(d)?, score)?;
        }
        Ok(out)
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        for (q, docs) in &self.scores {
            for (d, s) in docs {
                let _ = writeln!(out, "{q} {d} {s}");
            }
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?, Some(path))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.format())?;
        Ok(())
    }
}

/// How the hard-negative threshold is interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ThresholdMode {
    /// Keep negatives scoring below `threshold × teacher(q, positive)`.
    #[default]
    RelativeToPositive,
    /// Keep negatives scoring below `threshold` itself.
    Absolute,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiningConfig {
    pub threshold: f64,
    pub threshold_mode: ThresholdMode,
    pub frac_model: f64,
    pub frac_bm25: f64,
    pub frac_random: f64,
    pub n_way: usize,
    pub seed: Seed,
    pub bm25: Bm25Params,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            threshold: 0.95,
            threshold_mode: ThresholdMode::RelativeToPositive,
            frac_model: 0.35,
            frac_bm25: 0.35,
            frac_random: 0.30,
            n_way: 16,
            seed: Seed(0),
            bm25: Bm25Params::default(),
        }
    }
}

impl MiningConfig {
    pub fn fractions(&self) -> [f64; 3] {
        [self.frac_model, self.frac_bm25, self.frac_random]
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.fractions();
        if f.iter().any(|&x| !(0.0..=1.0).contains(&x))
            || (f.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::InvalidConfig(format!(
                "source fractions must lie in [0, 1] and sum to 1, got {f:?}"
            )));
        }
        if self.n_way < 2 {
            return Err(Error::InvalidConfig("n_way must be at least 2".into()));
        }
        match self.threshold_mode {
            ThresholdMode::RelativeToPositive
                if !(self.threshold > 0.0 && self.threshold <= 1.0) =>
            {
                Err(Error::InvalidConfig(format!(
                    "relative threshold must be in (0, 1], got {}",
                    self.threshold
                )))
            }
            _ if !self.threshold.is_finite() => {
                Err(Error::InvalidConfig("threshold must be finite".into()))
            }
            _ => self.bm25.validate(),
        }
    }
}

/// Splits `n_slots` across sources by largest remainder. Ties go to the
/// earlier source.
pub fn apportion_slots(n_slots: usize, fractions: &[f64]) -> Vec<usize> {
    const EPS: f64 = 1e-9;
    let quotas: Vec<f64> = fractions.iter().map(|f| f * n_slots as f64).collect();
    let mut counts: Vec<usize> = quotas
        .iter()
        .map(|q| (q + EPS).floor().max(0.0) as usize)
        .collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    let remainder = |i: usize| quotas[i] - counts[i] as f64;
    order.sort_by(|&a, &b| {
        let (ra, rb) = (remainder(a), remainder(b));
        if (ra - rb).abs() <= EPS {
            a.cmp(&b)
        } else {
            rb.total_cmp(&ra)
        }
    });
    for &i in order.iter().take(n_slots.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Min-max rescaling to `[0, 1]`; all-equal input maps to all zeros.
pub fn minmax_normalize(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|s| (s - min) / range).collect()
}

/// Negatives mined for one `(query, positive)` pair, by source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedNegatives {
    pub query_id: QueryId,
    pub positive_id: DocId,
    pub model: Vec<DocId>,
    pub bm25: Vec<DocId>,
    pub random: Vec<DocId>,
}

impl MinedNegatives {
    /// All negatives in source order (model, bm25, random).
    pub fn all(&self) -> Vec<DocId> {
        self.model
            .iter()
            .chain(&self.bm25)
            .chain(&self.random)
            .cloned()
            .collect()
    }
}

/// One n-way distillation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingTuple {
    pub query_id: QueryId,
    pub positive_id: DocId,
    pub negative_ids: Vec<DocId>,
    /// Aligned as `[positive, negatives...]`.
    pub teacher_scores: Vec<f64>,
}

impl TrainingTuple {
    pub fn validate(&self) -> Result<()> {
        if self.teacher_scores.len() != self.negative_ids.len() + 1 {
            return Err(Error::Format(format!(
                "tuple for {} has {} scores for {} documents",
                self.query_id,
                self.teacher_scores.len(),
                self.negative_ids.len() + 1
            )));
        }
        let mut seen = BTreeSet::from([&self.positive_id]);
        for n in &self.negative_ids {
            if !seen.insert(n) {
                return Err(Error::DuplicateId(format!(
                    "{n} in tuple for {}",
                    self.query_id
                )));
            }
        }
        if let Some(v) = self.teacher_scores.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                value: *v,
                position: 0,
            });
        }
        Ok(())
    }

    /// Positive followed by negatives.
    pub fn doc_ids(&self) -> impl Iterator<Item = &DocId> {
        std::iter::once(&self.positive_id).chain(&self.negative_ids)
    }
}

/// Scope of teacher-score min-max normalization when writing tuples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NormalizationScope {
    /// Keep raw teacher scores.
    #[default]
    None,
    PerTuple,
    /// One min and max over every score in the tuple set.
    PerDataset,
}

pub fn normalize_tuples(tuples: &mut [TrainingTuple], scope: NormalizationScope) {
    match scope {
        NormalizationScope::None => {}
        NormalizationScope::PerTuple => {
            for t in tuples {
                t.teacher_scores = minmax_normalize(&t.teacher_scores);
            }
        }
        NormalizationScope::PerDataset => {
            let all: Vec<f64> = tuples
                .iter()
                .flat_map(|t| t.teacher_scores.iter().copied())
                .collect();
            let min = all.iter().copied().fold(f64::INFINITY, f64::min);
            let max = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for t in tuples {
                for s in &mut t.teacher_scores {
                    *s = if max > min {
                        (*s - min) / (max - min)
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

/// Mines negatives against a fixed corpus, teacher and configuration.
#[derive(Debug)]
pub struct NegativeMiner<'a> {
    corpus: &'a TextCorpus,
    teacher: &'a TeacherScores,
    config: MiningConfig,
    bm25: Bm25Index,
    slots: [usize; 3],
}

impl<'a> NegativeMiner<'a> {
    pub fn new(
        corpus: &'a TextCorpus,
        teacher: &'a TeacherScores,
        config: MiningConfig,
    ) -> Result<Self> {
        config.validate()?;
        let bm25 = Bm25Index::build(&corpus.docs, config.bm25)?;
        let s = apportion_slots(config.n_way - 1, &config.fractions());
        Ok(Self {
            corpus,
            teacher,
            slots: [s[0], s[1], s[2]],
            config,
            bm25,
        })
    }

    pub fn config(&self) -> &MiningConfig {
        &self.config
    }

    /// Slot counts for (model, bm25, random).
    pub fn slots(&self) -> [usize; 3] {
        self.slots
    }

    /// The teacher-score ceiling a model-mined negative must stay below.
    pub fn ceiling(&self, query: &QueryId, positive: &DocId) -> Result<f64> {
        Ok(match self.config.threshold_mode {
            ThresholdMode::RelativeToPositive => {
                self.config.threshold * self.teacher.require(query, positive)?
            }
            ThresholdMode::Absolute => self.config.threshold,
        })
    }

    /// Mines `n_way - 1` negatives for `positive`, never returning it or any
    /// document in `excluded` (typically every judged-relevant document).
    pub fn mine(
        &self,
        query: &QueryId,
        positive: &DocId,
        excluded: &BTreeSet<&DocId>,
    ) -> Result<MinedNegatives> {
        let needed = self.config.n_way - 1;
        let blocked = |d: &DocId| d == positive || excluded.contains(d);
        let mut chosen: BTreeSet<DocId> = BTreeSet::new();

        let ceiling = self.ceiling(query, positive)?;
        let mut pool: Vec<(&DocId, f64)> = self
            .teacher
            .for_query(query)
            .map(|m| {
                m.iter()
                    .filter(|(d, &s)| {
                        !blocked(d) && s < ceiling && self.corpus.docs.contains_key(*d)
                    })
                    .map(|(d, &s)| (d, s))
                    .collect()
            })
            .unwrap_or_default();
        pool.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let model: Vec<DocId> = pool
            .iter()
            .take(self.slots[0])
            .map(|(d, _)| (*d).clone())
            .collect();
        chosen.extend(model.iter().cloned());

        let text = self
            .corpus
            .queries
            .get(query)
            .ok_or_else(|| Error::Format(format!("no text for query {query}")))?;
        let mut bm25 = Vec::with_capacity(self.slots[1]);
        if self.slots[1] > 0 {
            for hit in self.bm25.top_k(text, self.corpus.docs.len())? {
                if bm25.len() == self.slots[1] || hit.score <= 0.0 {
                    break;
                }
                if !blocked(&hit.doc) && !chosen.contains(&hit.doc) {
                    bm25.push(hit.doc);
                }
            }
        }
        chosen.extend(bm25.iter().cloned());

        let want_random = needed - model.len() - bm25.len();
        let mut remainder: Vec<&DocId> = self
            .corpus
            .docs
            .keys()
            .filter(|d| !blocked(d) && !chosen.contains(*d))
            .collect();
        if remainder.len() < want_random {
            return Err(Error::InsufficientNegatives {
                query: query.to_string(),
                needed,
                available: chosen.len() + remainder.len(),
            });
        }
        let stream = fnv1a(&[query.as_str().as_bytes(), positive.as_str().as_bytes()]);
        let mut rng = DetRng::with_stream(self.config.seed, stream);
        let random = rng
            .choose_prefix(&mut remainder, want_random)
            .iter()
            .map(|d| (*d).clone())
            .collect();

        Ok(MinedNegatives {
            query_id: query.clone(),
            positive_id: positive.clone(),
            model,
            bm25,
            random,
        })
    }

    /// Mines every `(query, positive)` pair in `qrels`, ordered by query id
    /// then positive id.
    pub fn mine_all(&self, qrels: &Qrels) -> Result<Vec<MinedNegatives>> {
        let pairs: Vec<(&QueryId, &DocId, BTreeSet<&DocId>)> = qrels
            .queries()
            .flat_map(|q| {
                let positives = qrels.positives(q);
                let excluded: BTreeSet<&DocId> = positives.iter().copied().collect();
                positives.into_iter().map(move |p| (q, p, excluded.clone()))
            })
            .collect();
        pairs
            .par_iter()
            .map(|(q, p, ex)| self.mine(q, p, ex))
            .collect()
    }

    /// Attaches aligned teacher scores to mined negatives.
    pub fn to_tuple(&self, mined: &MinedNegatives) -> Result<TrainingTuple> {
        let negative_ids = mined.all();
        let teacher_scores = std::iter::once(&mined.positive_id)
            .chain(&negative_ids)
            .map(|d| self.teacher.require(&mined.query_id, d))
            .collect::<Result<_>>()?;
        let t = TrainingTuple {
            query_id: mined.query_id.clone(),
            positive_id: mined.positive_id.clone(),
            negative_ids,
            teacher_scores,
        };
        t.validate()?;
        Ok(t)
    }
}

/// Builds one tuple per `(query, positive)` judgment with raw teacher scores.
pub fn assemble_tuples(
    corpus: &TextCorpus,
    qrels: &Qrels,
    teacher: &TeacherScores,
    config: MiningConfig,
) -> Result<Vec<TrainingTuple>> {
    let miner = NegativeMiner::new(corpus, teacher, config)?;
    miner
        .mine_all(qrels)?
        .iter()
        .map(|m| miner.to_tuple(m))
        .collect()
}

fn write_jsonl<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: Some(path.to_path_buf()),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Tuples as JSON lines: `query_id`, `positive_id`, `negative_ids`,
/// `teacher_scores` (positive first).
pub fn write_tuples(tuples: &[TrainingTuple], path: &Path) -> Result<()> {
    write_jsonl(tuples, path)
}

pub fn read_tuples(path: &Path) -> Result<Vec<TrainingTuple>> {
    let tuples: Vec<TrainingTuple> = read_jsonl(path)?;
    for t in &tuples {
        t.validate()?;
    }
    Ok(tuples)
}

pub fn write_mined(mined: &[MinedNegatives], path: &Path) -> Result<()> {
    write_jsonl(mined, path)
}

#[derive(Debug, Serialize, Deserialize)]
struct TextRecord {
    id: String,
    text: String,
}

/// Reads `{"id": ..., "text": ...}` lines.
pub fn read_texts(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(read_jsonl::<TextRecord>(path)?
        .into_iter()
        .map(|r| (r.id, r.text))
        .collect())
}

pub fn write_texts<K: AsRef<str>>(
    items: impl IntoIterator<Item = (K, String)>,
    path: &Path,
) -> Result<()> {
    let records: Vec<TextRecord> = items
        .into_iter()
        .map(|(id, text)| TextRecord {
            id: id.as_ref().to_string(),
            text,
        })
        .collect();
    write_jsonl(&records, path)
}

/// Loads a document corpus and query set from two JSONL files.
pub fn read_corpus(docs: &Path, queries: &Path) -> Result<TextCorpus> {
    let mut d = BTreeMap::new();
    for (id, text) in read_texts(docs)? {
        let id = DocId::new(id)?;
        if d.insert(id.clone(), text).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    let mut q = BTreeMap::new();
    for (id, text) in read_texts(queries)? {
        let id = QueryId::new(id)?;
        if q.insert(id.clone(), text).is_some() {
            return Err(Error::DuplicateId(id.to_string()));
        }
    }
    TextCorpus::new(d, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(s: &str) -> QueryId {
        QueryId::new(s).unwrap()
    }
    fn d(s: &str) -> DocId {
        DocId::new(s).unwrap()
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion_slots(15, &[0.35, 0.35, 0.30]), [5, 5, 5]);
        assert_eq!(apportion_slots(10, &[1.0]), [10]);
        assert_eq!(
            apportion_slots(3, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
            [1, 1, 1]
        );
        // tie on remainders goes to the earlier source
        assert_eq!(apportion_slots(1, &[0.5, 0.5]), [1, 0]);
        assert_eq!(apportion_slots(3, &[0.35, 0.35, 0.30]), [1, 1, 1]);
        assert_eq!(apportion_slots(0, &[0.35, 0.35, 0.30]), [0, 0, 0]);
    }

    proptest! {
        #[test]
        fn apportion_sums_to_slots(n in 1usize..200, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (a, b) = if a + b > 1.0 { (a / 2.0, b / 2.0) } else { (a, b) };
            let fr = [a, b, 1.0 - a - b];
            let c = apportion_slots(n, &fr);
            prop_assert_eq!(c.iter().sum::<usize>(), n);
            for (ci, fi) in c.iter().zip(fr) {
                prop_assert!((*ci as f64 - fi * n as f64).abs() < 1.0 + 1e-9);
            }
        }

        #[test]
        fn minmax_bounds(s in proptest::collection::vec(-100.0f64..100.0, 2..20)) {
            let n = minmax_normalize(&s);
            prop_assert!(n.iter().all(|v| (0.0..=1.0).contains(v)));
            let (imin, imax) = (
                s.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0,
                s.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0,
            );
            if s[imax] > s[imin] {
                prop_assert_eq!(n[imin], 0.0);
                prop_assert_eq!(n[imax], 1.0);
            }
        }

        #[test]
        fn minmax_affine_invariance(s in proptest::collection::vec(-10.0f64..10.0, 2..16), a in 0.01f64..10.0, c in -5.0f64..5.0) {
            let t: Vec<f64> = s.iter().map(|v| a * v + c).collect();
            for (x, y) in minmax_normalize(&s).iter().zip(minmax_normalize(&t)) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn minmax_examples() {
        let n = minmax_normalize(&[0.2, 0.5, 0.8]);
        assert_eq!(n[0], 0.0);
        assert!((n[1] - 0.5).abs() < 1e-15);
        assert_eq!(n[2], 1.0);
        assert_eq!(minmax_normalize(&[0.7, 0.7]), [0.0, 0.0]);
    }

    fn toy_setup(n_docs: usize) -> (TextCorpus, TeacherScores) {
        let docs = (0..n_docs)
            .map(|i| (d(&format!("d{i:02}")), format!("filler{i} common")))
            .collect();
        let queries = [(q("q1"), "needle".to_string())].into();
        let corpus = TextCorpus::new(docs, queries).unwrap();
        let mut teacher = TeacherScores::new();
        for i in 0..n_docs {
            teacher
                .insert(q("q1"), d(&format!("d{i:02}")), i as f64 / n_docs as f64)
                .unwrap();
        }
        (corpus, teacher)
    }

    #[test]
    fn threshold_filters_near_positive_scores() {
        let corpus = TextCorpus::new(
            ["p", "a", "b", "c", "x"]
                .iter()
                .map(|s| (d(s), format!("{s} text")))
                .collect(),
            [(q("q"), "text".to_string())].into(),
        )
        .unwrap();
        let mut teacher = TeacherScores::new();
        for (id, s) in [
            ("p", 1.0),
            ("a", 0.96),
            ("b", 0.94),
            ("c", 0.90),
            ("x", 0.1),
        ] {
            teacher.insert(q("q"), d(id), s).unwrap();
        }
        let config = MiningConfig {
            n_way: 3,
            frac_model: 1.0,
            frac_bm25: 0.0,
            frac_random: 0.0,
            ..MiningConfig::default()
        };
        let miner = NegativeMiner::new(&corpus, &teacher, config.clone()).unwrap();
        let m = miner.mine(&q("q"), &d("p"), &BTreeSet::new()).unwrap();
        assert_eq!(m.model, [d("b"), d("c")]);

        let vacuous = MiningConfig {
            threshold: 1.0,
            ..config
        };
        let miner = NegativeMiner::new(&corpus, &teacher, vacuous).unwrap();
        let m = miner.mine(&q("q"), &d("p"), &BTreeSet::new()).unwrap();
        assert_eq!(m.model, [d("a"), d("b")]);
    }

    #[test]
    fn absolute_threshold_mode() {
        let (corpus, teacher) = toy_setup(20);
        let config = MiningConfig {
            threshold: 0.5,
            threshold_mode: ThresholdMode::Absolute,
            n_way: 4,
            frac_model: 1.0,
            frac_bm25: 0.0,
            frac_random: 0.0,
            ..MiningConfig::default()
        };
        let miner = NegativeMiner::new(&corpus, &teacher, config).unwrap();
        let m = miner.mine(&q("q1"), &d("d19"), &BTreeSet::new()).unwrap();
        // 9/20 = 0.45 is the best score below 0.5
        assert_eq!(m.model, [d("d09"), d("d08"), d("d07")]);
    }

    #[test]
    fn mining_is_deterministic_and_well_formed() {
        let (corpus, teacher) = toy_setup(40);
        let config = MiningConfig {
            seed: Seed(5),
            ..MiningConfig::default()
        };
        let miner = NegativeMiner::new(&corpus, &teacher, config.clone()).unwrap();
        assert_eq!(miner.slots(), [5, 5, 5]);
        let d01 = d("d01");
        let excluded = BTreeSet::from([&d01]);
        let a = miner.mine(&q("q1"), &d("d39"), &excluded).unwrap();
        let b = NegativeMiner::new(&corpus, &teacher, config)
            .unwrap()
            .mine(&q("q1"), &d("d39"), &excluded)
            .unwrap();
        assert_eq!(a, b);
        let all = a.all();
        assert_eq!(all.len(), 15);
        let unique: BTreeSet<_> = all.iter().collect();
        assert_eq!(unique.len(), 15);
        assert!(!all.contains(&d("d39")) && !all.contains(&d("d01")));
        // query text matches nothing, so bm25 slots backfill from random
        assert!(a.bm25.is_empty());
        assert_eq!(a.random.len(), 10);
        let other_seed = MiningConfig {
            seed: Seed(6),
            ..MiningConfig::default()
        };
        let c = NegativeMiner::new(&corpus, &teacher, other_seed)
            .unwrap()
            .mine(&q("q1"), &d("d39"), &excluded)
            .unwrap();
        assert_eq!(a.model, c.model);
        assert_ne!(a.random, c.random);
    }

    #[test]
    fn too_small_corpus_is_an_error() {
        let (corpus, teacher) = toy_setup(10);
        let miner = NegativeMiner::new(&corpus, &teacher, MiningConfig::default()).unwrap();
        assert!(matches!(
            miner.mine(&q("q1"), &d("d00"), &BTreeSet::new()),
            Err(Error::InsufficientNegatives {
                needed: 15,
                available: 9,
                ..
            })
        ));
    }

    #[test]
    fn minimal_two_way_tuple() {
        let corpus = TextCorpus::new(
            [(d("pos"), "alpha".into()), (d("neg"), "beta".into())].into(),
            [(q("q"), "alpha".into())].into(),
        )
        .unwrap();
        let mut teacher = TeacherScores::new();
        teacher.insert(q("q"), d("pos"), 0.9).unwrap();
        teacher.insert(q("q"), d("neg"), 0.2).unwrap();
        let mut qrels = Qrels::new();
        qrels.insert(q("q"), d("pos"), 1);
        let config = MiningConfig {
            n_way: 2,
            ..MiningConfig::default()
        };
        let tuples = assemble_tuples(&corpus, &qrels, &teacher, config.clone()).unwrap();
        assert_eq!(tuples.len(), 1);
        assert_eq!(tuples[0].negative_ids, [d("neg")]);
        assert_eq!(tuples[0].teacher_scores, [0.9, 0.2]);

        let mut partial = TeacherScores::new();
        partial.insert(q("q"), d("pos"), 0.9).unwrap();
        let err = assemble_tuples(&corpus, &qrels, &partial, config).unwrap_err();
        assert!(
            matches!(err, Error::MissingTeacherScore { ref doc, .. } if doc == "neg"),
            "{err}"
        );
    }

    #[test]
    fn config_validation() {
        assert!(MiningConfig::default().validate().is_ok());
        let bad = MiningConfig {
            frac_random: 0.4,
            ..MiningConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MiningConfig {
            n_way: 1,
            ..MiningConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = MiningConfig {
            threshold: 0.0,
            ..MiningConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn teacher_file_round_trip() {
        let text = "q1 d1 0.5\nq1 d2 -1.25\nq2 d1 3\n";
        let t = TeacherScores::parse(text, None).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.get(&q("q1"), &d("d2")), Some(-1.25));
        assert_eq!(TeacherScores::parse(&t.format(), None).unwrap(), t);
        assert!(matches!(
            TeacherScores::parse("q1 d1\n", None),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn tuple_json_shape() {
        let t = TrainingTuple {
            query_id: q("q"),
            positive_id: d("p"),
            negative_ids: vec![d("n")],
            teacher_scores: vec![1.0, 0.5],
        };
        assert_eq!(
            serde_json::to_string(&t).unwrap(),
            r#"{"query_id":"q","positive_id":"p","negative_ids":["n"],"teacher_scores":[1.0,0.5]}"#
        );
    }

    #[test]
    fn normalization_scopes() {
        let mk = |s: Vec<f64>| TrainingTuple {
            query_id: q("q"),
            positive_id: d("p"),
            negative_ids: vec![d("n")],
            teacher_scores: s,
        };
        let mut ts = vec![mk(vec![2.0, 1.0]), mk(vec![4.0, 3.0])];
        let mut per_tuple = ts.clone();
        normalize_tuples(&mut per_tuple, NormalizationScope::PerTuple);
        assert_eq!(per_tuple[1].teacher_scores, [1.0, 0.0]);
        normalize_tuples(&mut ts, NormalizationScope::PerDataset);
        assert_eq!(ts[0].teacher_scores, [1.0 / 3.0, 0.0]);
        assert_eq!(ts[1].teacher_scores, [1.0, 2.0 / 3.0]);
    }
}
