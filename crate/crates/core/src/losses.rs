//! Structural-knowledge prediction loss (multi-label binary cross-entropy on
//! logits) and the symmetric hinge triplet loss over a batch of paired
//! embeddings. Both return exact gradients.

use ndarray::{Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Tolerance on `|z| = 1` accepted by the triplet loss.
pub const UNIT_NORM_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin_delta: f64,
    pub skp_weight: f64,
    pub kcl_weight: f64,
    /// Pick one enabled task at random per batch instead of summing them.
    pub random_task_switch: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin_delta: 0.2,
            skp_weight: 1.0,
            kcl_weight: 1.0,
            random_task_switch: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.margin_delta > 0.0 && self.margin_delta <= 2.0,
            Config,
            "margin_delta must lie in (0, 2]"
        );
        ensure!(
            self.skp_weight >= 0.0 && self.kcl_weight >= 0.0,
            Config,
            "loss weights must be non-negative"
        );
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub skp_loss: f64,
    pub kcl_loss: f64,
    pub t2v_terms: usize,
    pub v2t_terms: usize,
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_probs(logits: &ndarray::Array1<f64>) -> ndarray::Array1<f64> {
    logits.mapv(sigmoid)
}

/// Binary cross-entropy summed over labels, averaged over the batch.
///
/// Each term is evaluated as `softplus(l) - y * l`, which equals
/// `-[y log σ(l) + (1 - y) log(1 - σ(l))]`. The gradient is `(σ(l) - y) / N`.
pub fn skp_loss(logits: ArrayView2<f64>, labels: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    ensure!(
        logits.dim() == labels.dim(),
        Validation,
        "logits {:?} and labels {:?} differ in shape",
        logits.dim(),
        labels.dim()
    );
    let n = logits.nrows();
    ensure!(n > 0, Validation, "empty batch");
    ensure!(
        labels.iter().all(|&y| y == 0.0 || y == 1.0),
        Validation,
        "labels must be 0 or 1"
    );
    let mut total = 0.0;
    let mut grad = Array2::zeros(logits.dim());
    Zip::from(&mut grad)
        .and(logits)
        .and(labels)
        .for_each(|g, &l, &y| {
            total += softplus(l) - y * l;
            *g = (sigmoid(l) - y) / n as f64;
        });
    Ok((total / n as f64, grad))
}

#[derive(Clone, Debug)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad_zv: Array2<f64>,
    pub grad_zt: Array2<f64>,
    pub t2v_terms: usize,
    pub v2t_terms: usize,
}

/// Symmetric hinge triplet loss over a batch where row `i` of `z_v` and row
/// `i` of `z_t` form the positive pair and every other row is a negative:
///
/// ```text
/// t2v(i,j) = max(0, δ + <t_i, v_j> - <t_i, v_i>)
/// v2t(i,j) = max(0, δ + <v_i, t_j> - <v_i, t_i>)
/// L = (1/N) Σ_i Σ_{j≠i} t2v(i,j) + v2t(i,j)
/// ```
///
/// A hinge at exactly zero contributes no gradient.
pub fn kcl_triplet_loss(
    z_v: ArrayView2<f64>,
    z_t: ArrayView2<f64>,
    delta: f64,
) -> Result<TripletOutput> {
    ensure!(
        z_v.dim() == z_t.dim(),
        Validation,
        "video {:?} and text {:?} embeddings differ in shape",
        z_v.dim(),
        z_t.dim()
    );
    let n = z_v.nrows();
    ensure!(n >= 2, Validation, "triplet loss needs a batch of at least 2, got {n}");
    for (name, z) in [("video", &z_v), ("text", &z_t)] {
        for (i, row) in z.rows().into_iter().enumerate() {
            let norm = row.dot(&row).sqrt();
            ensure!(
                (norm - 1.0).abs() <= UNIT_NORM_TOL,
                Validation,
                "{name} embedding {i} has norm {norm}, expected 1"
            );
        }
    }

    // sim[i][j] = <t_i, v_j>; coeff = dL/dsim.
    let sim = z_t.dot(&z_v.t());
    let mut coeff = Array2::<f64>::zeros((n, n));
    let scale = 1.0 / n as f64;
    let mut loss = 0.0;
    let (mut t2v_terms, mut v2t_terms) = (0, 0);
    for i in 0..n {
        let positive = sim[[i, i]];
        for j in (0..n).filter(|&j| j != i) {
            let t2v = delta + sim[[i, j]] - positive;
            if t2v > 0.0 {
                loss += t2v;
                t2v_terms += 1;
                coeff[[i, j]] += scale;
                coeff[[i, i]] -= scale;
            }
            let v2t = delta + sim[[j, i]] - positive;
            if v2t > 0.0 {
                loss += v2t;
                v2t_terms += 1;
                coeff[[j, i]] += scale;
                coeff[[i, i]] -= scale;
            }
        }
    }
    Ok(TripletOutput {
        loss: loss * scale,
        grad_zt: coeff.dot(&z_v),
        grad_zv: coeff.t().dot(&z_t),
        t2v_terms,
        v2t_terms,
    })
}
