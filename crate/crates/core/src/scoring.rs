//! Late-interaction (MaxSim) scoring.
//!
//! `maxsim(Q, D) = Σ_i max_j sim(q_i, d_j)`: every query token is matched to
//! its best document token and the matches are summed. All accumulation is in
//! `f64` regardless of how the document vectors were stored.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{DocId, QueryId, TokenMatrix};

/// Rows with a norm at or below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

/// Token-to-token similarity used inside MaxSim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum SimilarityKind {
    Dot,
    #[default]
    Cosine,
}

impl SimilarityKind {
    /// On-disk code: 0 = dot, 1 = cosine.
    pub fn code(self) -> u8 {
        match self {
            SimilarityKind::Dot => 0,
            SimilarityKind::Cosine => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(SimilarityKind::Dot),
            1 => Ok(SimilarityKind::Cosine),
            other => Err(Error::Format(format!("unknown similarity code {other}"))),
        }
    }
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityKind::Dot => "dot",
            SimilarityKind::Cosine => "cosine",
        })
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(SimilarityKind::Dot),
            "cosine" | "cos" => Ok(SimilarityKind::Cosine),
            other => Err(Error::InvalidConfig(format!(
                "unknown similarity {other:?}"
            ))),
        }
    }
}

/// A document with its retrieval score.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredDoc {
    pub doc: DocId,
    pub score: f64,
}

impl ScoredDoc {
    pub fn new(doc: DocId, score: f64) -> Self {
        Self { doc, score }
    }
}

/// Ranking order: score descending, then document id ascending (byte order).
pub fn ranking_order(a: &ScoredDoc, b: &ScoredDoc) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.doc.cmp(&b.doc))
}

/// Sorts by [`ranking_order`] and keeps the first `k`.
pub fn top_k(mut scored: Vec<ScoredDoc>, k: usize) -> Vec<ScoredDoc> {
    scored.sort_by(ranking_order);
    scored.truncate(k);
    scored
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Divides every row by its Euclidean norm.
pub fn normalize_rows(x: &TokenMatrix) -> Result<TokenMatrix> {
    let mut values = Vec::with_capacity(x.values().len());
    for (row, r) in x.iter_rows().enumerate() {
        let n = norm(r);
        if n <= MIN_NORM {
            return Err(Error::ZeroNormRow { row });
        }
        values.extend(r.iter().map(|v| v / n));
    }
    TokenMatrix::new(x.rows(), x.dim(), values)
}

fn check_dims(q: &TokenMatrix, d: &TokenMatrix) -> Result<()> {
    if q.dim() != d.dim() {
        return Err(Error::DimMismatch {
            expected: q.dim(),
            found: d.dim(),
            context: Some("query vs document token dimension".into()),
        });
    }
    Ok(())
}

/// MaxSim under plain dot products. Inputs must already agree on dimension.
pub(crate) fn maxsim_dot(q: &TokenMatrix, d: &TokenMatrix) -> f64 {
    let mut total = 0.0;
    for qi in q.iter_rows() {
        let mut best = f64::NEG_INFINITY;
        for dj in d.iter_rows() {
            let s = dot(qi, dj);
            if s > best {
                best = s;
            }
        }
        total += best;
    }
    total
}

/// Late-interaction score of document `d` for query `q`.
///
/// Cosine similarity normalizes the rows of both sides first, so inputs that
/// are already unit-norm score identically up to rounding.
pub fn maxsim(q: &TokenMatrix, d: &TokenMatrix, sim: SimilarityKind) -> Result<f64> {
    check_dims(q, d)?;
    match sim {
        SimilarityKind::Dot => Ok(maxsim_dot(q, d)),
        SimilarityKind::Cosine => Ok(maxsim_dot(&normalize_rows(q)?, &normalize_rows(d)?)),
    }
}

/// Gradients of `upstream * maxsim(q, d, sim)` with respect to `q` and `d`.
///
/// The max is routed to the first best-scoring document token.
pub fn maxsim_backward(
    q: &TokenMatrix,
    d: &TokenMatrix,
    sim: SimilarityKind,
    upstream: f64,
) -> Result<(TokenMatrix, TokenMatrix)> {
    check_dims(q, d)?;
    let (qs, ds) = match sim {
        SimilarityKind::Dot => (q.clone(), d.clone()),
        SimilarityKind::Cosine => (normalize_rows(q)?, normalize_rows(d)?),
    };
    let dim = q.dim();
    let mut gq = vec![0.0; q.values().len()];
    let mut gd = vec![0.0; d.values().len()];
    for (i, qi) in qs.iter_rows().enumerate() {
        let mut best = f64::NEG_INFINITY;
        let mut arg = 0;
        for (j, dj) in ds.iter_rows().enumerate() {
            let s = dot(qi, dj);
            if s > best {
                best = s;
                arg = j;
            }
        }
        let dj = ds.row(arg);
        for c in 0..dim {
            gq[i * dim + c] += upstream * dj[c];
            gd[arg * dim + c] += upstream * qi[c];
        }
    }
    if sim == SimilarityKind::Cosine {
        unnormalize_grad(q, &qs, &mut gq);
        unnormalize_grad(d, &ds, &mut gd);
    }
    Ok((
        TokenMatrix::new(q.rows(), dim, gq)?,
        TokenMatrix::new(d.rows(), dim, gd)?,
    ))
}

/// Back-propagates row gradients through `u = x / |x|`:
/// `dx = (du - u (u . du)) / |x|`.
pub(crate) fn unnormalize_grad(x: &TokenMatrix, unit: &TokenMatrix, grad: &mut [f64]) {
    let dim = x.dim();
    for (i, (xr, ur)) in x.iter_rows().zip(unit.iter_rows()).enumerate() {
        let n = norm(xr);
        let g = &mut grad[i * dim..(i + 1) * dim];
        let proj = dot(ur, g);
        for (gc, uc) in g.iter_mut().zip(ur) {
            *gc = (*gc - uc * proj) / n;
        }
    }
}

/// Exact brute-force retrieval: for every query the `k` best documents by
/// MaxSim under [`ranking_order`].
pub fn maxsim_batch(
    queries: &BTreeMap<QueryId, TokenMatrix>,
    docs: &BTreeMap<DocId, TokenMatrix>,
    sim: SimilarityKind,
    k: usize,
) -> Result<BTreeMap<QueryId, Vec<ScoredDoc>>> {
    maxsim_batch_threads(queries, docs, sim, k, 1)
}

/// [`maxsim_batch`] spread over `threads` workers. Output is independent of
/// the thread count.
pub fn maxsim_batch_threads(
    queries: &BTreeMap<QueryId, TokenMatrix>,
    docs: &BTreeMap<DocId, TokenMatrix>,
    sim: SimilarityKind,
    k: usize,
    threads: usize,
) -> Result<BTreeMap<QueryId, Vec<ScoredDoc>>> {
    if docs.is_empty() {
        return Err(Error::EmptyCollection);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    // Normalize each side once instead of per pair.
    let prepare = |m: &TokenMatrix| match sim {
        SimilarityKind::Dot => Ok(m.clone()),
        SimilarityKind::Cosine => normalize_rows(m),
    };
    let docs: Vec<(&DocId, TokenMatrix)> = docs
        .iter()
        .map(|(id, m)| prepare(m).map(|m| (id, m)))
        .collect::<Result<_>>()?;
    let dim = docs[0].1.dim();
    if let Some((id, m)) = docs.iter().find(|(_, m)| m.dim() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            found: m.dim(),
            context: Some(format!("document {id}")),
        });
    }
    let run_one = |(qid, q): (&QueryId, &TokenMatrix)| -> Result<(QueryId, Vec<ScoredDoc>)> {
        let q = prepare(q)?;
        check_dims(&q, &docs[0].1)?;
        let scored = docs
            .iter()
            .map(|(id, d)| ScoredDoc::new((*id).clone(), maxsim_dot(&q, d)))
            .collect();
        Ok((qid.clone(), top_k(scored, k)))
    };
    if threads <= 1 {
        return queries.iter().map(run_one).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let results: Vec<Result<(QueryId, Vec<ScoredDoc>)>> =
        pool.install(|| queries.par_iter().map(run_one).collect());
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;
    use crate::types::Seed;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> TokenMatrix {
        TokenMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_rows(&m(&[&[3.0, 4.0]])).unwrap();
        assert!((n.values()[0] - 0.6).abs() < 1e-15);
        assert!((n.values()[1] - 0.8).abs() < 1e-15);
        let unit = m(&[&[1.0, 0.0]]);
        assert_eq!(normalize_rows(&unit).unwrap(), unit);
        assert!(matches!(
            normalize_rows(&m(&[&[1.0, 0.0], &[0.0, 0.0]])),
            Err(Error::ZeroNormRow { row: 1 })
        ));
    }

    #[test]
    fn maxsim_examples() {
        let e1 = m(&[&[1.0, 0.0]]);
        let e2 = m(&[&[0.0, 1.0]]);
        assert_eq!(maxsim(&e1, &e1, SimilarityKind::Cosine).unwrap(), 1.0);
        assert_eq!(maxsim(&e1, &e2, SimilarityKind::Dot).unwrap(), 0.0);
        let q = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let d = m(&[&[0.6, 0.8]]);
        assert!((maxsim(&q, &d, SimilarityKind::Dot).unwrap() - 1.4).abs() < 1e-15);
        assert!(maxsim(&q, &m(&[&[1.0, 2.0, 3.0]]), SimilarityKind::Dot).is_err());
    }

    #[test]
    fn batch_tie_rule_and_single_doc() {
        let q: BTreeMap<_, _> = [(QueryId::new("q").unwrap(), m(&[&[1.0, 0.0]]))].into();
        let one: BTreeMap<_, _> = [(DocId::new("z").unwrap(), m(&[&[-1.0, 0.0]]))].into();
        let r = maxsim_batch(&q, &one, SimilarityKind::Dot, 5).unwrap();
        assert_eq!(r[&QueryId::new("q").unwrap()][0].doc.as_str(), "z");

        let docs: BTreeMap<_, _> = [
            (DocId::new("b").unwrap(), m(&[&[0.5, 0.5]])),
            (DocId::new("a").unwrap(), m(&[&[0.5, -0.5]])),
        ]
        .into();
        let r = maxsim_batch(&q, &docs, SimilarityKind::Dot, 2).unwrap();
        let ids: Vec<_> = r
            .values()
            .next()
            .unwrap()
            .iter()
            .map(|s| s.doc.as_str())
            .collect();
        assert_eq!(ids, ["a", "b"]);
        assert!(matches!(
            maxsim_batch(&q, &BTreeMap::new(), SimilarityKind::Dot, 1),
            Err(Error::EmptyCollection)
        ));
    }

    fn random_matrix(rng: &mut DetRng, rows: usize, dim: usize) -> TokenMatrix {
        TokenMatrix::new(rows, dim, (0..rows * dim).map(|_| rng.normal()).collect()).unwrap()
    }

    /// Independent nested-loop scorer: no shared helpers with the code above.
    fn oracle_score(q: &TokenMatrix, d: &TokenMatrix) -> f64 {
        let mut total = 0.0;
        for i in 0..q.rows() {
            let mut best = f64::NEG_INFINITY;
            for j in 0..d.rows() {
                let mut s = 0.0;
                for c in 0..q.dim() {
                    s += q.values()[i * q.dim() + c] * d.values()[j * d.dim() + c];
                }
                if s > best {
                    best = s;
                }
            }
            total += best;
        }
        total
    }

    #[test]
    fn batch_matches_nested_loop_oracle() {
        let mut rng = DetRng::new(Seed(11));
        let dim = 8;
        let queries: BTreeMap<_, _> = (0..5)
            .map(|i| {
                (
                    QueryId::new(format!("q{i}")).unwrap(),
                    random_matrix(&mut rng, 3, dim),
                )
            })
            .collect();
        let docs: BTreeMap<_, _> = (0..50)
            .map(|i| {
                (
                    DocId::new(format!("d{i:02}")).unwrap(),
                    random_matrix(&mut rng, 6, dim),
                )
            })
            .collect();
        let got = maxsim_batch(&queries, &docs, SimilarityKind::Dot, 10).unwrap();
        for (qid, q) in &queries {
            let mut all: Vec<(f64, &DocId)> = docs
                .iter()
                .map(|(id, d)| (oracle_score(q, d), id))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
            let expected: Vec<(f64, &DocId)> = all.into_iter().take(10).collect();
            let actual: Vec<(f64, &DocId)> = got[qid].iter().map(|s| (s.score, &s.doc)).collect();
            assert_eq!(actual, expected);
        }
        let par = maxsim_batch_threads(&queries, &docs, SimilarityKind::Dot, 10, 4).unwrap();
        assert_eq!(par, got);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = DetRng::new(Seed(5));
        for sim in [SimilarityKind::Dot, SimilarityKind::Cosine] {
            let q = random_matrix(&mut rng, 3, 4);
            let d = random_matrix(&mut rng, 5, 4);
            let (gq, gd) = maxsim_backward(&q, &d, sim, 1.0).unwrap();
            let h = 1e-6;
            for (x, g, is_q) in [(&q, &gq, true), (&d, &gd, false)] {
                for idx in 0..x.values().len() {
                    let bump = |delta: f64| {
                        let mut v = x.values().to_vec();
                        v[idx] += delta;
                        let x2 = TokenMatrix::new(x.rows(), x.dim(), v).unwrap();
                        if is_q {
                            maxsim(&x2, &d, sim).unwrap()
                        } else {
                            maxsim(&q, &x2, sim).unwrap()
                        }
                    };
                    let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                    assert!((numeric - g.values()[idx]).abs() < 1e-6, "{sim} {idx}");
                }
            }
        }
    }

    fn arb_matrix(max_rows: usize, dim: usize) -> impl Strategy<Value = TokenMatrix> {
        (1..=max_rows).prop_flat_map(move |rows| {
            proptest::collection::vec(-3.0f64..3.0, rows * dim)
                .prop_map(move |v| TokenMatrix::new(rows, dim, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn appending_doc_tokens_never_decreases(q in arb_matrix(4, 3), d in arb_matrix(4, 3), extra in arb_matrix(2, 3)) {
            let before = maxsim(&q, &d, SimilarityKind::Dot).unwrap();
            let after = maxsim(&q, &d.concat(&extra).unwrap(), SimilarityKind::Dot).unwrap();
            prop_assert!(after >= before);
        }

        #[test]
        fn permutation_invariance(q in arb_matrix(4, 3), d in arb_matrix(5, 3), seed in any::<u64>()) {
            let mut rng = DetRng::new(Seed(seed));
            let mut dp: Vec<usize> = (0..d.rows()).collect();
            rng.shuffle(&mut dp);
            let mut qp: Vec<usize> = (0..q.rows()).collect();
            rng.shuffle(&mut qp);
            let base = maxsim(&q, &d, SimilarityKind::Dot).unwrap();
            let permuted = maxsim(&q.select_rows(&qp).unwrap(), &d.select_rows(&dp).unwrap(), SimilarityKind::Dot).unwrap();
            prop_assert!((base - permuted).abs() <= 1e-12 * (1.0 + base.abs()));
        }

        #[test]
        fn query_additivity(q1 in arb_matrix(3, 3), q2 in arb_matrix(3, 3), d in arb_matrix(4, 3)) {
            let joint = maxsim(&q1.concat(&q2).unwrap(), &d, SimilarityKind::Dot).unwrap();
            let split = maxsim(&q1, &d, SimilarityKind::Dot).unwrap() + maxsim(&q2, &d, SimilarityKind::Dot).unwrap();
            prop_assert!((joint - split).abs() <= 1e-12 * (1.0 + joint.abs()));
        }

        #[test]
        fn cosine_is_bounded(q in arb_matrix(4, 3), d in arb_matrix(4, 3)) {
            prop_assume!(q.iter_rows().all(|r| norm(r) > 1e-6) && d.iter_rows().all(|r| norm(r) > 1e-6));
            let s = maxsim(&q, &d, SimilarityKind::Cosine).unwrap();
            prop_assert!(s.abs() <= q.rows() as f64 + 1e-12);
        }

        #[test]
        fn positive_doc_scaling_scales_dot_score(q in arb_matrix(3, 3), d in arb_matrix(4, 3), c in 0.01f64..10.0) {
            let base = maxsim(&q, &d, SimilarityKind::Dot).unwrap();
            let scaled = maxsim(&q, &d.scaled(c).unwrap(), SimilarityKind::Dot).unwrap();
            prop_assert!((scaled - c * base).abs() <= 1e-9 * (1.0 + (c * base).abs()));
        }
    }

    #[test]
    fn doc_scaling_preserves_ranking() {
        let mut rng = DetRng::new(Seed(9));
        let q: BTreeMap<_, _> =
            [(QueryId::new("q").unwrap(), random_matrix(&mut rng, 3, 4))].into();
        let docs: BTreeMap<_, _> = (0..20)
            .map(|i| {
                (
                    DocId::new(format!("d{i:02}")).unwrap(),
                    random_matrix(&mut rng, 4, 4),
                )
            })
            .collect();
        let scaled: BTreeMap<_, _> = docs
            .iter()
            .map(|(k, v)| (k.clone(), v.scaled(2.5).unwrap()))
            .collect();
        let a = maxsim_batch(&q, &docs, SimilarityKind::Dot, 20).unwrap();
        let b = maxsim_batch(&q, &scaled, SimilarityKind::Dot, 20).unwrap();
        let ids = |r: &BTreeMap<QueryId, Vec<ScoredDoc>>| {
            r.values()
                .next()
                .unwrap()
                .iter()
                .map(|s| s.doc.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&a), ids(&b));
    }
}
