//! Retrieval metrics (R@K, median rank, multiple choice) and
//! representation-space diagnostics (alignment, uniformity).

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Text queries against video candidates.
    T2v,
    /// Video queries against text candidates.
    V2t,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    /// Mean of R@1, R@5 and R@10.
    pub aver: f64,
    pub med_r: usize,
}

impl RetrievalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        match k {
            1 => Some(self.r1),
            5 => Some(self.r5),
            10 => Some(self.r10),
            _ => None,
        }
    }
}

/// 1-based rank of each query's true match. Candidates are ordered by
/// descending dot product; equal scores rank by ascending index.
pub fn true_ranks(queries: ArrayView2<f64>, candidates: ArrayView2<f64>) -> Vec<usize> {
    let scores = queries.dot(&candidates.t());
    scores
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, row)| {
            let target = row[i];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > target || (s == target && j < i))
                .count()
        })
        .collect()
}

pub fn retrieval_eval(
    z_t: ArrayView2<f64>,
    z_v: ArrayView2<f64>,
    direction: Direction,
) -> Result<RetrievalReport> {
    ensure!(
        z_t.dim() == z_v.dim(),
        Validation,
        "text {:?} and video {:?} matrices differ in shape",
        z_t.dim(),
        z_v.dim()
    );
    ensure!(z_t.nrows() > 0, Validation, "retrieval evaluation needs at least one pair");
    let mut ranks = match direction {
        Direction::T2v => true_ranks(z_t, z_v),
        Direction::V2t => true_ranks(z_v, z_t),
    };
    let m = ranks.len() as f64;
    let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / m;
    let (r1, r5, r10) = (recall(1), recall(5), recall(10));
    ranks.sort_unstable();
    let med_r = ranks[(ranks.len() - 1) / 2];
    Ok(RetrievalReport {
        r1,
        r5,
        r10,
        aver: (r1 + r5 + r10) / 3.0,
        med_r,
    })
}

pub const MULTICHOICE_OPTIONS: usize = 5;

/// Whether the highest-scoring of five text candidates is the answer. Ties go
/// to the lowest candidate index.
pub fn multichoice_eval(
    z_v: ArrayView1<f64>,
    candidates: ArrayView2<f64>,
    answer_index: usize,
) -> Result<bool> {
    ensure!(
        candidates.nrows() == MULTICHOICE_OPTIONS,
        Validation,
        "multiple choice needs {MULTICHOICE_OPTIONS} candidates, got {}",
        candidates.nrows()
    );
    ensure!(
        candidates.ncols() == z_v.len(),
        Validation,
        "candidate width {} differs from query width {}",
        candidates.ncols(),
        z_v.len()
    );
    ensure!(
        answer_index < MULTICHOICE_OPTIONS,
        Validation,
        "answer index {answer_index} out of range"
    );
    let scores = candidates.dot(&z_v);
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    Ok(best == answer_index)
}

/// Mean over paired rows of `|z_v - z_t|^alpha`.
pub fn alignment(z_t: ArrayView2<f64>, z_v: ArrayView2<f64>, alpha: f64) -> Result<f64> {
    ensure!(z_t.dim() == z_v.dim(), Validation, "paired matrices differ in shape");
    ensure!(z_t.nrows() > 0, Validation, "alignment of an empty set");
    ensure!(alpha > 0.0, Validation, "alpha must be positive");
    let total: f64 = z_t
        .rows()
        .into_iter()
        .zip(z_v.rows())
        .map(|(t, v)| {
            let d2: f64 = t.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt().powf(alpha)
        })
        .sum();
    Ok(total / z_t.nrows() as f64)
}

/// Log of the mean Gaussian potential `exp(-beta |z_i - z_j|^2)` over ordered
/// pairs `i != j`.
pub fn uniformity(z: ArrayView2<f64>, beta: f64) -> Result<f64> {
    let m = z.nrows();
    ensure!(m >= 2, Validation, "uniformity needs at least two points, got {m}");
    ensure!(beta > 0.0, Validation, "beta must be positive");
    // Unordered pairs suffice: the potential is symmetric.
    let mut exponents = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            let d2: f64 = z
                .row(i)
                .iter()
                .zip(z.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            exponents.push(-beta * d2);
        }
    }
    let max = exponents.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = exponents.iter().map(|e| (e - max).exp()).sum();
    Ok(max + (sum / exponents.len() as f64).ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceReport {
    pub alpha: f64,
    pub beta: f64,
    pub align: f64,
    pub unif_txt: f64,
    pub unif_vis: f64,
}

pub fn space_report(
    z_t: ArrayView2<f64>,
    z_v: ArrayView2<f64>,
    alpha: f64,
    beta: f64,
) -> Result<SpaceReport> {
    Ok(SpaceReport {
        alpha,
        beta,
        align: alignment(z_t, z_v, alpha)?,
        unif_txt: uniformity(z_t, beta)?,
        unif_vis: uniformity(z_v, beta)?,
    })
}
