//! Supervised grid loss, confidence-guided mask (CGM) consistency and the
//! combined objective.
//!
//! All norms are squared L2 over the compared channels, summed over cells.
//! The q-vector is channels 1..9: `(x, y, cos θ₁, sin θ₁, cos θ₂, sin θ₂, s, t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{PredictionGrid, CHANNELS, CH_CONF};

/// Which consistency variant to use on unlabeled data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyMode {
    /// Confidence-weighted q-term, masked below τ.
    #[default]
    Cgm,
    /// Confidence-weighted q-term on every cell.
    Cg,
    /// Plain squared error on every channel of every cell.
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sup: f64,
    pub unsup: f64,
    pub beta: f64,
    pub total: f64,
    /// Fraction of unlabeled cells whose teacher confidence fell below τ.
    pub masked_cell_fraction: f64,
}

fn q_sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a[1..].iter().zip(&b[1..]).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Supervised loss of one prediction against an encoded ground-truth grid.
pub fn supervised_loss(pred: &PredictionGrid, target: &PredictionGrid) -> Result<f64> {
    supervised_loss_grad(pred, target).map(|(v, _)| v)
}

/// Supervised loss and its gradient with respect to `pred`.
pub fn supervised_loss_grad(pred: &PredictionGrid, target: &PredictionGrid) -> Result<(f64, PredictionGrid)> {
    pred.check_same_shape(target)?;
    let mut grad = PredictionGrid::zeros(pred.grid_size, pred.image_size);
    let mut loss = 0.0;
    for i in 0..pred.num_cells() {
        let p = pred.cell(i);
        let t = target.cell(i);
        let g = grad.cell_mut(i);
        if t[CH_CONF] == 0.0 {
            loss += p[CH_CONF] * p[CH_CONF];
            g[CH_CONF] = 2.0 * p[CH_CONF];
        } else {
            loss += (p[CH_CONF] - 1.0).powi(2) + q_sq_dist(p, t);
            g[CH_CONF] = 2.0 * (p[CH_CONF] - 1.0);
            for ch in 1..CHANNELS {
                g[ch] = 2.0 * (p[ch] - t[ch]);
            }
        }
    }
    Ok((loss, grad))
}

/// Output of [`consistency_loss_grad`].
#[derive(Debug, Clone)]
pub struct ConsistencyLoss {
    pub value: f64,
    /// Gradient with respect to the student grid only; the teacher is a constant.
    pub grad: PredictionGrid,
    pub masked_cell_fraction: f64,
}

/// CGM consistency between a student and a (constant) teacher grid.
pub fn cgm_consistency_loss(student: &PredictionGrid, teacher: &PredictionGrid, tau: f64) -> Result<f64> {
    consistency_loss_grad(student, teacher, tau, ConsistencyMode::Cgm).map(|l| l.value)
}

pub fn consistency_loss_grad(
    student: &PredictionGrid,
    teacher: &PredictionGrid,
    tau: f64,
    mode: ConsistencyMode,
) -> Result<ConsistencyLoss> {
    student.check_same_shape(teacher)?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("tau {tau} outside [0, 1]")));
    }
    let mut grad = PredictionGrid::zeros(student.grid_size, student.image_size);
    let mut value = 0.0;
    let mut masked = 0usize;
    for i in 0..student.num_cells() {
        let s = student.cell(i);
        let t = teacher.cell(i);
        let g = grad.cell_mut(i);
        let conf_t = t[CH_CONF];
        let dc = s[CH_CONF] - conf_t;
        value += dc * dc;
        g[CH_CONF] = 2.0 * dc;
        if conf_t < tau {
            masked += 1;
        }
        let weight = match mode {
            ConsistencyMode::Cgm if conf_t < tau => continue,
            ConsistencyMode::Cgm | ConsistencyMode::Cg => conf_t,
            ConsistencyMode::C => 1.0,
        };
        value += q_sq_dist(s, t) * weight;
        for ch in 1..CHANNELS {
            g[ch] = 2.0 * (s[ch] - t[ch]) * weight;
        }
    }
    Ok(ConsistencyLoss {
        value,
        grad,
        masked_cell_fraction: masked as f64 / student.num_cells() as f64,
    })
}

/// `total = sup + β · unsup` with `β = n_unlabeled / n_labeled`.
pub fn total_loss(sup: f64, unsup: f64, n_unlabeled: usize, n_labeled: usize) -> Result<LossBreakdown> {
    if n_labeled == 0 {
        return Err(Error::ZeroLabeled);
    }
    let beta = n_unlabeled as f64 / n_labeled as f64;
    Ok(LossBreakdown {
        sup,
        unsup,
        beta,
        total: sup + beta * unsup,
        masked_cell_fraction: 0.0,
    })
}
