//! Visual (cosine) similarity, joint visual-temporal fusion, and dense
//! pairwise similarity matrices.

use rayon::prelude::*;

use crate::data::SampleMeta;
use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};
use crate::memory::MemoryBank;
use crate::temporal::TemporalModel;

/// Default largest N for which dense N×N matrices are built.
pub const DEFAULT_MAX_N: usize = 20_000;

/// Sigmoid fusion constants: `λ` are smoothing factors, `γ` shrinking factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionParams {
    pub lambda0: f64,
    pub lambda1: f64,
    pub gamma0: f64,
    pub gamma1: f64,
}

impl Default for FusionParams {
    fn default() -> Self {
        FusionParams {
            lambda0: 1.0,
            lambda1: 2.0,
            gamma0: 5.0,
            gamma1: 5.0,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x > 0.0 && x.is_finite();
        if ok(self.lambda0) && ok(self.lambda1) && ok(self.gamma0) && ok(self.gamma1) {
            Ok(())
        } else {
            Err(Error::Argument(format!("fusion parameters must be positive and finite: {self:?}")))
        }
    }
}

/// Cosine similarity of two bank slots.
pub fn visual_sim(bank: &MemoryBank, i: usize, j: usize) -> f64 {
    dot(bank.slot(i), bank.slot(j))
}

/// `1/(1 + λ0·e^(−γ0·vs)) · 1/(1 + λ1·e^(−γ1·ts))`.
pub fn joint_sim(vs: f64, ts: f64, p: &FusionParams) -> f64 {
    let visual = 1.0 / (1.0 + p.lambda0 * (-p.gamma0 * vs).exp());
    let temporal = 1.0 / (1.0 + p.lambda1 * (-p.gamma1 * ts).exp());
    visual * temporal
}

fn check_capacity(n: usize, cap: usize) -> Result<()> {
    if n > cap {
        Err(Error::Capacity { n, cap })
    } else {
        Ok(())
    }
}

/// Fill a symmetric matrix from `entry(i, j)` for `i < j`, with a constant diagonal.
fn fill_symmetric(n: usize, diagonal: f64, entry: impl Fn(usize, usize) -> f64 + Sync) -> Matrix {
    let upper: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).map(|j| entry(i, j)).collect())
        .collect();
    let mut m = Matrix::zeros(n, n);
    for (i, row) in upper.into_iter().enumerate() {
        m[(i, i)] = diagonal;
        for (off, v) in row.into_iter().enumerate() {
            let j = i + 1 + off;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Pairwise cosine similarity of unit-norm rows; diagonal is 1.
pub fn pairwise_visual_rows(rows: &Matrix, max_n: usize) -> Result<Matrix> {
    check_capacity(rows.rows(), max_n)?;
    Ok(fill_symmetric(rows.rows(), 1.0, |i, j| dot(rows.row(i), rows.row(j))))
}

pub fn pairwise_visual(bank: &MemoryBank, max_n: usize) -> Result<Matrix> {
    pairwise_visual_rows(bank.slots(), max_n)
}

/// Pairwise joint similarity of unit-norm rows; diagonal is `joint_sim(1, 1)`.
pub fn pairwise_joint_rows(
    rows: &Matrix,
    metas: &[SampleMeta],
    tm: &TemporalModel,
    p: &FusionParams,
    max_n: usize,
) -> Result<Matrix> {
    p.validate()?;
    if rows.rows() != metas.len() {
        return Err(Error::Dimension(format!(
            "{} feature rows but {} metadata entries",
            rows.rows(),
            metas.len()
        )));
    }
    check_capacity(rows.rows(), max_n)?;
    Ok(fill_symmetric(rows.rows(), joint_sim(1.0, 1.0, p), |i, j| {
        joint_sim(dot(rows.row(i), rows.row(j)), tm.ts(&metas[i], &metas[j]), p)
    }))
}

pub fn pairwise_joint(
    bank: &MemoryBank,
    metas: &[SampleMeta],
    tm: &TemporalModel,
    p: &FusionParams,
    max_n: usize,
) -> Result<Matrix> {
    pairwise_joint_rows(bank.slots(), metas, tm, p, max_n)
}
