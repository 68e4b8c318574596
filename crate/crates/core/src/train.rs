//! Toy distillation loop for a projection head over frozen token embeddings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{kl_distill_loss, KlConfig};
use crate::mining::TrainingTuple;
use crate::projection::ProjectionHead;
use crate::rng::DetRng;
use crate::scoring::{maxsim, maxsim_backward, SimilarityKind};
use crate::types::{DocId, QueryId, Seed, TokenMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: Seed,
    pub kl: KlConfig,
    pub sim: SimilarityKind,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps: 200,
            learning_rate: 1.0,
            momentum: 0.9,
            seed: Seed(0),
            kl: KlConfig::default(),
            sim: SimilarityKind::Cosine,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::InvalidConfig(
                "batch size and steps must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "bad learning rate {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// Result of [`train_projection_toy`]: the trained head and the mean batch
/// loss before each update.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub head: ProjectionHead,
    pub losses: Vec<f64>,
}

impl TrainingRun {
    /// `step,loss` CSV with a header line.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(out, "{i},{l}");
        }
        out
    }

    pub fn write_trace(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.trace_csv())?;
        Ok(())
    }
}

/// Student scores for one tuple: MaxSim between the projected query and each
/// projected document, positive first.
pub fn student_scores(
    head: &ProjectionHead,
    query: &TokenMatrix,
    docs: &[&TokenMatrix],
    sim: SimilarityKind,
) -> Result<Vec<f64>> {
    let q = head.forward(query)?;
    docs.iter()
        .map(|d| maxsim(&q, &head.forward(d)?, sim))
        .collect()
}

struct Resolved<'a> {
    teacher: &'a [f64],
    query: &'a TokenMatrix,
    docs: Vec<&'a TokenMatrix>,
}

fn tuple_loss_and_grad(
    head: &ProjectionHead,
    t: &Resolved,
    config: &TrainerConfig,
) -> Result<(f64, Vec<f64>)> {
    let q = head.forward(t.query)?;
    let projected: Vec<TokenMatrix> = t
        .docs
        .iter()
        .map(|d| head.forward(d))
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = projected
        .iter()
        .map(|d| maxsim(&q, d, config.sim))
        .collect::<Result<_>>()?;
    let (loss, ds) = kl_distill_loss(t.teacher, &scores, &config.kl)?;

    let mut grad = vec![0.0; head.num_params()];
    let mut gq = vec![0.0; q.values().len()];
    for ((d, x), &g) in projected.iter().zip(&t.docs).zip(&ds) {
        if g == 0.0 {
            continue;
        }
        let (gqk, gdk) = maxsim_backward(&q, d, config.sim, g)?;
        for (a, b) in gq.iter_mut().zip(gqk.values()) {
            *a += b;
        }
        for (a, b) in grad.iter_mut().zip(head.backward(x, &gdk)?.flat()) {
            *a += b;
        }
    }
    let gq = TokenMatrix::new(q.rows(), q.dim(), gq)?;
    for (a, b) in grad.iter_mut().zip(head.backward(t.query, &gq)?.flat()) {
        *a += b;
    }
    Ok((loss, grad))
}

/// Mean KL loss and its gradient wrt the head parameters over `tuples`.
fn batch_loss_and_grad(
    head: &ProjectionHead,
    batch: &[&Resolved],
    config: &TrainerConfig,
) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|t| tuple_loss_and_grad(head, t, config))
        .collect::<Result<_>>()?;
    let n = batch.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; head.num_params()];
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

fn resolve<'a>(
    tuples: &'a [TrainingTuple],
    queries: &'a BTreeMap<QueryId, TokenMatrix>,
    docs: &'a BTreeMap<DocId, TokenMatrix>,
    d_in: usize,
) -> Result<Vec<Resolved<'a>>> {
    let check = |m: &TokenMatrix, id: &str| {
        if m.dim() == d_in {
            Ok(())
        } else {
            Err(Error::DimMismatch {
                expected: d_in,
                found: m.dim(),
                context: Some(format!("embedding {id}")),
            })
        }
    };
    tuples
        .iter()
        .map(|t| {
            t.validate()?;
            let query = queries
                .get(&t.query_id)
                .ok_or_else(|| Error::MissingEmbedding(t.query_id.to_string()))?;
            check(query, t.query_id.as_str())?;
            let docs = t
                .doc_ids()
                .map(|id| {
                    let m = docs
                        .get(id)
                        .ok_or_else(|| Error::MissingEmbedding(id.to_string()))?;
                    check(m, id.as_str())?;
                    Ok(m)
                })
                .collect::<Result<_>>()?;
            Ok(Resolved {
                teacher: &t.teacher_scores,
                query,
                docs,
            })
        })
        .collect()
}

/// Mean KL loss of `head` over all `tuples`.
pub fn mean_tuple_loss(
    head: &ProjectionHead,
    tuples: &[TrainingTuple],
    queries: &BTreeMap<QueryId, TokenMatrix>,
    docs: &BTreeMap<DocId, TokenMatrix>,
    config: &TrainerConfig,
) -> Result<f64> {
    let resolved = resolve(tuples, queries, docs, head.config().d_in)?;
    if resolved.is_empty() {
        return Err(Error::EmptyInput("no training tuples".into()));
    }
    let batch: Vec<&Resolved> = resolved.iter().collect();
    Ok(batch_loss_and_grad(head, &batch, config)?.0)
}

/// Trains `head` with momentum SGD on the KL distillation loss, where student
/// scores are MaxSim over projected frozen embeddings.
///
/// Batches walk a seed-shuffled order of the tuples and reshuffle after each
/// pass. The result depends only on the inputs and the seed.
pub fn train_projection_toy(
    mut head: ProjectionHead,
    tuples: &[TrainingTuple],
    queries: &BTreeMap<QueryId, TokenMatrix>,
    docs: &BTreeMap<DocId, TokenMatrix>,
    config: &TrainerConfig,
) -> Result<TrainingRun> {
    config.validate()?;
    let resolved = resolve(tuples, queries, docs, head.config().d_in)?;
    if resolved.is_empty() {
        return Err(Error::EmptyInput("no training tuples".into()));
    }
    let mut rng = DetRng::new(config.seed);
    let mut order: Vec<usize> = (0..resolved.len()).collect();
    rng.shuffle(&mut order);
    let mut cursor = 0;
    let batch_size = config.batch_size.min(resolved.len());

    let mut params = head.flat_params();
    let mut velocity = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let mut picks = Vec::with_capacity(batch_size);
        while picks.len() < batch_size {
            if cursor == order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        picks.sort_unstable();
        let batch: Vec<&Resolved> = picks.iter().map(|&i| &resolved[i]).collect();
        let (loss, grad) = batch_loss_and_grad(&head, &batch, config)?;
        losses.push(loss);
        if config.learning_rate > 0.0 {
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v + g;
                *p -= config.learning_rate * *v;
            }
            head.set_flat_params(&params)?;
        }
    }
    Ok(TrainingRun { head, losses })
}
