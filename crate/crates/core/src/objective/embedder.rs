use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Linear map followed by L2 normalisation: `f(x) = W·x / ‖W·x‖`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    /// `d × D_in`
    pub weight: Matrix,
}

/// Output of a forward pass, keeping what backprop needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub feature: Vec<f64>,
    pub pre_norm: f64,
}

impl Embedder {
    pub fn new(weight: Matrix) -> Result<Self> {
        if !weight.is_finite() {
            return Err(Error::NonFinite("embedder weight".into()));
        }
        Ok(Embedder { weight })
    }

    /// Gaussian initialisation with variance `1/D_in`.
    pub fn random(out_dim: usize, in_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (in_dim as f64).sqrt();
        let mut w = Matrix::zeros(out_dim, in_dim);
        for v in w.as_mut_slice() {
            *v = rng.sample::<f64, _>(StandardNormal) * scale;
        }
        Embedder { weight: w }
    }

    pub fn identity(dim: usize) -> Self {
        Embedder {
            weight: Matrix::identity(dim),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Embedding> {
        if x.len() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "input has {} dims, embedder expects {}",
                x.len(),
                self.in_dim()
            )));
        }
        let z = self.weight.mul_vec(x);
        let n = dot(&z, &z).sqrt();
        if !(n > 0.0 && n.is_finite()) {
            return Err(Error::NonFinite(format!("embedding pre-norm {n}")));
        }
        Ok(Embedding {
            feature: z.into_iter().map(|v| v / n).collect(),
            pre_norm: n,
        })
    }

    /// Embed every row of `raw`.
    pub fn embed_all(&self, raw: &Matrix) -> Result<Matrix> {
        let rows = (0..raw.rows())
            .into_par_iter()
            .map(|i| self.forward(raw.row(i)).map(|e| e.feature))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(Matrix::zeros(0, self.out_dim()));
        }
        Matrix::from_rows(&rows)
    }

    /// Gradient of a loss w.r.t. the pre-normalisation vector `z = W·x`,
    /// given its gradient `g_f` w.r.t. the unit output.
    pub fn backprop_pre_norm(emb: &Embedding, g_f: &[f64]) -> Vec<f64> {
        let proj = dot(&emb.feature, g_f);
        g_f.iter()
            .zip(&emb.feature)
            .map(|(g, f)| (g - f * proj) / emb.pre_norm)
            .collect()
    }

    /// `grad += scale · g_z ⊗ x`.
    pub fn accumulate(grad: &mut Matrix, g_z: &[f64], x: &[f64], scale: f64) {
        for (r, &gz) in g_z.iter().enumerate() {
            let a = scale * gz;
            if a != 0.0 {
                for (g, xi) in grad.row_mut(r).iter_mut().zip(x) {
                    *g += a * xi;
                }
            }
        }
    }

    /// Plain gradient-descent step.
    pub fn step(&mut self, grad: &Matrix, lr: f64) {
        for (w, g) in self.weight.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *w -= lr * g;
        }
    }

    /// Checkpoint in the binary matrix format with header `(d, D_in)`.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.weight.write_bin(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::new(Matrix::read_bin(path)?)
    }
}
