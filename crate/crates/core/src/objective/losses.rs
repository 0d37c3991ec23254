//! Temperature-softmax cross-entropy losses over cosine classifiers.
//!
//! Features and classifier rows are unit vectors, so every score is a
//! cosine divided by a temperature. Classifier rows of the batch (`V`) and
//! of the memory bank are constants for backprop; the source classifier is
//! learnable and gets its own gradient.

use rayon::prelude::*;

use super::embedder::{Embedder, Embedding};
use crate::data::MultiLabels;
use crate::error::{Error, Result};
use crate::matrix::{axpy, dot, log_sum_exp, normalized, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w1: f64,
    pub w2: f64,
    /// Temperature of the in-batch (SAC) classifier.
    pub beta1: f64,
    /// Temperature of the memory-bank classifier.
    pub beta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w1: 1.0,
            w2: 0.2,
            beta1: 0.1,
            beta2: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w1 >= 0.0 && self.w2 >= 0.0 && self.beta1 > 0.0 && self.beta2 > 0.0) {
            return Err(Error::Argument(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Loss terms of one step; `None` terms are inactive and contribute 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub src: Option<f64>,
    pub local: Option<f64>,
    pub global: Option<f64>,
}

/// `L = L_src + w1·L_local + w2·L_global`.
pub fn total_loss(parts: &LossParts, weights: &LossWeights) -> f64 {
    parts.src.unwrap_or(0.0) + weights.w1 * parts.local.unwrap_or(0.0) + weights.w2 * parts.global.unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient w.r.t. the embedder weight.
    pub grad_weight: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SrcLossGrad {
    pub loss: f64,
    pub grad_weight: Matrix,
    /// Gradient w.r.t. the raw (unnormalised) source classifier rows.
    pub grad_classifier: Matrix,
}

/// A target batch: `n_T` originals, each followed by its `k` augmented copies.
///
/// Row `i·(k+1)` is original `i`; rows `i·(k+1)+1 ..= i·(k+1)+k` are its copies.
#[derive(Debug, Clone, PartialEq)]
pub struct SacBatch {
    pub inputs: Matrix,
    pub k: usize,
}

impl SacBatch {
    pub fn new(inputs: Matrix, k: usize) -> Result<Self> {
        if inputs.rows() == 0 || !inputs.rows().is_multiple_of(k + 1) {
            return Err(Error::Dimension(format!(
                "{} rows is not a positive multiple of k+1 = {}",
                inputs.rows(),
                k + 1
            )));
        }
        Ok(SacBatch { inputs, k })
    }

    /// Build from originals and their copies (`augments[i].len() == k` for all `i`).
    pub fn from_parts(originals: &[Vec<f64>], augments: &[Vec<Vec<f64>>]) -> Result<Self> {
        let k = augments.first().map_or(0, Vec::len);
        if augments.len() != originals.len() || augments.iter().any(|a| a.len() != k) {
            return Err(Error::Dimension("every original needs exactly k augments".into()));
        }
        let mut rows = Vec::with_capacity(originals.len() * (k + 1));
        for (o, a) in originals.iter().zip(augments) {
            rows.push(o.clone());
            rows.extend(a.iter().cloned());
        }
        Self::new(Matrix::from_rows(&rows)?, k)
    }

    pub fn num_classes(&self) -> usize {
        self.inputs.rows() / (self.k + 1)
    }

    pub fn class_of(&self, row: usize) -> usize {
        row / (self.k + 1)
    }
}

/// Per-row contribution: loss, gradient w.r.t. the pre-norm vector.
type RowTerm = (f64, Vec<f64>);

/// Evaluate `term` on every row in parallel and reduce in row order.
fn reduce_rows(
    inputs: &Matrix,
    rows: &[usize],
    out_dim: usize,
    term: impl Fn(usize) -> Result<RowTerm> + Sync,
) -> Result<LossGrad> {
    let terms = rows.par_iter().map(|&r| term(r)).collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / rows.len() as f64;
    let mut grad = Matrix::zeros(out_dim, inputs.cols());
    let mut loss = 0.0;
    for (&r, (l, g_z)) in rows.iter().zip(&terms) {
        loss += l;
        Embedder::accumulate(&mut grad, g_z, inputs.row(r), scale);
    }
    Ok(LossGrad {
        loss: loss * scale,
        grad_weight: grad,
    })
}

/// Cross-entropy of `feature` against `target` under `softmax(classifier·f / beta)`.
/// Returns the loss and its gradient w.r.t. the feature.
fn softmax_xent(classifier: &Matrix, f: &[f64], targets: &[usize], beta: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let scores: Vec<f64> = classifier.iter_rows().map(|v| dot(v, f) / beta).collect();
    let lse = log_sum_exp(&scores);
    let probs = softmax(&scores);
    let inv = 1.0 / targets.len() as f64;
    let loss = targets.iter().map(|&t| lse - scores[t]).sum::<f64>() * inv;
    // ∂L/∂f = (Σ_n P_n c_n − mean_t c_t) / β
    let mut g = classifier.tr_mul_vec(&probs);
    for &t in targets {
        axpy(-inv, classifier.row(t), &mut g);
    }
    for v in &mut g {
        *v /= beta;
    }
    (loss, g, probs)
}

fn check_finite(loss: f64, g: &[f64], what: &str, row: usize) -> Result<()> {
    if loss.is_finite() && g.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what}: row {row} produced loss {loss}")))
    }
}

/// Classifier rows `v_i`: the normalised mean embedding of original `i` and its copies.
pub fn build_sac_classifier(batch: &SacBatch, emb: &Embedder) -> Result<Matrix> {
    let group = batch.k + 1;
    let mut v = Matrix::zeros(batch.num_classes(), emb.out_dim());
    for i in 0..batch.num_classes() {
        let mut mean = vec![0.0; emb.out_dim()];
        for r in i * group..(i + 1) * group {
            axpy(1.0 / group as f64, &emb.forward(batch.inputs.row(r))?.feature, &mut mean);
        }
        let unit = normalized(&mean)
            .ok_or_else(|| Error::NonFinite(format!("SAC classifier row {i} vanished")))?;
        v.row_mut(i).copy_from_slice(&unit);
    }
    Ok(v)
}

/// In-batch one-hot classification loss with temperature `beta1`, averaged
/// over all `n_T·(k+1)` rows. `v` is held constant.
pub fn sac_loss(batch: &SacBatch, v: &Matrix, emb: &Embedder, beta1: f64) -> Result<LossGrad> {
    if v.rows() != batch.num_classes() || v.cols() != emb.out_dim() {
        return Err(Error::Dimension(format!(
            "classifier is {}x{}, batch needs {}x{}",
            v.rows(),
            v.cols(),
            batch.num_classes(),
            emb.out_dim()
        )));
    }
    let rows: Vec<usize> = (0..batch.inputs.rows()).collect();
    reduce_rows(&batch.inputs, &rows, emb.out_dim(), |r| {
        let e = emb.forward(batch.inputs.row(r))?;
        let (loss, g_f, _) = softmax_xent(v, &e.feature, &[batch.class_of(r)], beta1);
        check_finite(loss, &g_f, "sac_loss", r)?;
        Ok((loss, Embedder::backprop_pre_norm(&e, &g_f)))
    })
}

/// Multi-label memory-bank loss of one sample: the mean negative log
/// probability of its positives under `softmax(K·f / beta2)`.
/// Returns the loss, the embedding and the gradient w.r.t. the pre-norm vector.
pub fn global_loss_single(
    x: &[f64],
    emb: &Embedder,
    bank: &Matrix,
    positives: &[usize],
    beta2: f64,
) -> Result<(f64, Embedding, Vec<f64>)> {
    if positives.is_empty() {
        return Err(Error::Argument("empty positive set".into()));
    }
    if let Some(&j) = positives.iter().find(|&&j| j >= bank.rows()) {
        return Err(Error::Argument(format!("positive {j} outside bank of {}", bank.rows())));
    }
    let e = emb.forward(x)?;
    let (loss, g_f, _) = softmax_xent(bank, &e.feature, positives, beta2);
    let g_z = Embedder::backprop_pre_norm(&e, &g_f);
    Ok((loss, e, g_z))
}

/// Batch mean of [`global_loss_single`]; `inputs.row(r)` is the raw feature
/// of sample `indices[r]`.
pub fn global_loss(
    inputs: &Matrix,
    indices: &[usize],
    emb: &Embedder,
    bank: &Matrix,
    labels: &MultiLabels,
    beta2: f64,
) -> Result<LossGrad> {
    if inputs.rows() != indices.len() || indices.is_empty() {
        return Err(Error::Dimension(format!("{} inputs for {} indices", inputs.rows(), indices.len())));
    }
    let rows: Vec<usize> = (0..indices.len()).collect();
    reduce_rows(inputs, &rows, emb.out_dim(), |r| {
        let (loss, _, g_z) = global_loss_single(inputs.row(r), emb, bank, labels.positives(indices[r]), beta2)?;
        check_finite(loss, &g_z, "global_loss", r)?;
        Ok((loss, g_z))
    })
}

/// Supervised cross-entropy on labelled source samples over a learnable
/// cosine classifier with temperature `beta`.
pub fn src_loss(
    inputs: &Matrix,
    labels: &[usize],
    emb: &Embedder,
    classifier: &Matrix,
    beta: f64,
) -> Result<SrcLossGrad> {
    if inputs.rows() != labels.len() || labels.is_empty() {
        return Err(Error::Dimension(format!("{} inputs for {} labels", inputs.rows(), labels.len())));
    }
    if classifier.cols() != emb.out_dim() {
        return Err(Error::Dimension("source classifier width differs from embedding dim".into()));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classifier.rows()) {
        return Err(Error::Argument(format!("class index {y} out of range for {} classes", classifier.rows())));
    }
    let mut unit = classifier.clone();
    let mut norms = Vec::with_capacity(classifier.rows());
    for c in 0..classifier.rows() {
        let row = classifier.row(c);
        let n = dot(row, row).sqrt();
        let u = normalized(row).ok_or_else(|| Error::NonFinite(format!("source classifier row {c} is zero")))?;
        unit.row_mut(c).copy_from_slice(&u);
        norms.push(n);
    }

    let terms = (0..labels.len())
        .into_par_iter()
        .map(|r| {
            let e = emb.forward(inputs.row(r))?;
            let (loss, g_f, probs) = softmax_xent(&unit, &e.feature, &[labels[r]], beta);
            check_finite(loss, &g_f, "src_loss", r)?;
            Ok((loss, Embedder::backprop_pre_norm(&e, &g_f), e.feature, probs))
        })
        .collect::<Result<Vec<_>>>()?;

    let scale = 1.0 / labels.len() as f64;
    let mut grad_w = Matrix::zeros(emb.out_dim(), inputs.cols());
    // gradient w.r.t. the unit classifier rows: Σ_r (P_rc − [y_r = c]) f_r / β
    let mut grad_unit = Matrix::zeros(classifier.rows(), classifier.cols());
    let mut loss = 0.0;
    for (r, (l, g_z, f, probs)) in terms.iter().enumerate() {
        loss += l;
        Embedder::accumulate(&mut grad_w, g_z, inputs.row(r), scale);
        for (c, p) in probs.iter().enumerate() {
            let coef = (p - f64::from(u8::from(c == labels[r]))) * scale / beta;
            axpy(coef, f, grad_unit.row_mut(c));
        }
    }
    let mut grad_c = Matrix::zeros(classifier.rows(), classifier.cols());
    for c in 0..classifier.rows() {
        let (u, g) = (unit.row(c), grad_unit.row(c));
        let proj = dot(u, g);
        for ((out, gi), ui) in grad_c.row_mut(c).iter_mut().zip(g).zip(u) {
            *out = (gi - ui * proj) / norms[c];
        }
    }
    Ok(SrcLossGrad {
        loss: loss * scale,
        grad_weight: grad_w,
        grad_classifier: grad_c,
    })
}
