//! Distillation and contrastive objectives with analytic gradients.

use crate::error::{Error, Result};
use crate::mining::minmax_normalize;
use crate::scoring::{dot, normalize_rows, unnormalize_grad};
use crate::types::TokenMatrix;

/// Squared-error distillation of student vectors `ŷ` onto teacher vectors `y`:
/// `mean_i Σ_j (y_ij - ŷ_ij)²`. Returns the loss and its gradient wrt `ŷ`.
pub fn l2_distill_loss(student: &TokenMatrix, teacher: &TokenMatrix) -> Result<(f64, TokenMatrix)> {
    if student.rows() != teacher.rows() || student.dim() != teacher.dim() {
        return Err(Error::DimMismatch {
            expected: teacher.rows() * teacher.dim(),
            found: student.rows() * student.dim(),
            context: Some(format!(
                "student is {}x{}, teacher is {}x{}",
                student.rows(),
                student.dim(),
                teacher.rows(),
                teacher.dim()
            )),
        });
    }
    let b = student.rows() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(student.values().len());
    for (s, t) in student.values().iter().zip(teacher.values()) {
        let diff = s - t;
        loss += diff * diff;
        grad.push(2.0 * diff / b);
    }
    Ok((
        loss / b,
        TokenMatrix::new(student.rows(), student.dim(), grad)?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KlDirection {
    /// `KL(p_teacher ‖ q_student)`.
    #[default]
    TeacherStudent,
    /// `KL(q_student ‖ p_teacher)`.
    StudentTeacher,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlConfig {
    pub temperature: f64,
    /// Min-max normalize raw teacher scores before the softmax.
    pub normalize_teacher: bool,
    pub direction: KlDirection,
}

impl Default for KlConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            normalize_teacher: true,
            direction: KlDirection::TeacherStudent,
        }
    }
}

fn log_softmax(x: &[f64], temperature: f64) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = x.iter().map(|v| (v - max) / temperature).collect();
    let lse = shifted.iter().map(|v| v.exp()).sum::<f64>().ln();
    shifted.iter().map(|v| v - lse).collect()
}

/// KL divergence between the teacher and student score distributions over
/// one tuple. Returns the loss and its gradient wrt the student scores.
pub fn kl_distill_loss(
    teacher: &[f64],
    student: &[f64],
    config: &KlConfig,
) -> Result<(f64, Vec<f64>)> {
    if teacher.len() != student.len() {
        return Err(Error::DimMismatch {
            expected: teacher.len(),
            found: student.len(),
            context: Some("teacher vs student tuple length".into()),
        });
    }
    if teacher.len() < 2 {
        return Err(Error::InvalidConfig(
            "a tuple needs at least 2 scores".into(),
        ));
    }
    let tau = config.temperature;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if let Some(v) = teacher.iter().chain(student).find(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            value: *v,
            position: 0,
        });
    }
    let target = if config.normalize_teacher {
        minmax_normalize(teacher)
    } else {
        teacher.to_vec()
    };
    let log_p = log_softmax(&target, tau);
    let log_q = log_softmax(student, tau);
    let p: Vec<f64> = log_p.iter().map(|v| v.exp()).collect();
    let q: Vec<f64> = log_q.iter().map(|v| v.exp()).collect();
    match config.direction {
        KlDirection::TeacherStudent => {
            let loss = p
                .iter()
                .zip(log_p.iter().zip(&log_q))
                .map(|(pk, (lp, lq))| pk * (lp - lq))
                .sum::<f64>()
                .max(0.0);
            let grad = q.iter().zip(&p).map(|(qk, pk)| (qk - pk) / tau).collect();
            Ok((loss, grad))
        }
        KlDirection::StudentTeacher => {
            let terms: Vec<f64> = log_q.iter().zip(&log_p).map(|(lq, lp)| lq - lp).collect();
            let raw: f64 = q.iter().zip(&terms).map(|(qk, t)| qk * t).sum();
            let grad = q
                .iter()
                .zip(&terms)
                .map(|(qk, t)| qk * (t - raw) / tau)
                .collect();
            Ok((raw.max(0.0), grad))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoNceConfig {
    pub temperature: f64,
    /// Average the query-to-document and document-to-query losses.
    pub symmetric: bool,
}

impl Default for InfoNceConfig {
    fn default() -> Self {
        Self {
            temperature: 0.05,
            symmetric: false,
        }
    }
}

/// In-batch-negative cross-entropy on cosine similarity, where document row
/// `i` is the positive for query row `i`. Returns the loss and gradients wrt
/// the query and document vectors.
pub fn info_nce_loss(
    queries: &TokenMatrix,
    docs: &TokenMatrix,
    config: &InfoNceConfig,
) -> Result<(f64, TokenMatrix, TokenMatrix)> {
    if queries.rows() != docs.rows() || queries.dim() != docs.dim() {
        return Err(Error::DimMismatch {
            expected: queries.rows() * queries.dim(),
            found: docs.rows() * docs.dim(),
            context: Some("query and document batches must have equal shape".into()),
        });
    }
    let tau = config.temperature;
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let b = queries.rows();
    let dim = queries.dim();
    let u = normalize_rows(queries)?;
    let v = normalize_rows(docs)?;
    let logits: Vec<f64> = (0..b)
        .flat_map(|i| (0..b).map(move |j| (i, j)))
        .map(|(i, j)| dot(u.row(i), v.row(j)))
        .collect();

    // dL/dsim accumulated over the row-wise and, if symmetric, column-wise terms
    let mut gsim = vec![0.0; b * b];
    let directions: &[bool] = if config.symmetric {
        &[false, true]
    } else {
        &[false]
    };
    let weight = 1.0 / (b as f64 * directions.len() as f64);
    let mut loss = 0.0;
    for &transpose in directions {
        for i in 0..b {
            let at = |j: usize| if transpose { j * b + i } else { i * b + j };
            let row: Vec<f64> = (0..b).map(|j| logits[at(j)]).collect();
            let lsm = log_softmax(&row, tau);
            loss -= weight * lsm[i];
            for j in 0..b {
                let target = if i == j { 1.0 } else { 0.0 };
                gsim[at(j)] += weight * (lsm[j].exp() - target) / tau;
            }
        }
    }

    let mut gu = vec![0.0; b * dim];
    let mut gv = vec![0.0; b * dim];
    for i in 0..b {
        for j in 0..b {
            let g = gsim[i * b + j];
            if g == 0.0 {
                continue;
            }
            for c in 0..dim {
                gu[i * dim + c] += g * v.row(j)[c];
                gv[j * dim + c] += g * u.row(i)[c];
            }
        }
    }
    unnormalize_grad(queries, &u, &mut gu);
    unnormalize_grad(docs, &v, &mut gv);
    Ok((
        loss.max(0.0),
        TokenMatrix::new(b, dim, gu)?,
        TokenMatrix::new(b, dim, gv)?,
    ))
}
