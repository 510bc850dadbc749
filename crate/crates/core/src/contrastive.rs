//! Bidirectional InfoNCE over image/text embeddings.
//!
//! With `s = I·Tᵀ/τ`, `P_i2t = softmax_rows(s)`, `P_t2i = softmax_rows(sᵀ)`
//! and the coefficient matrix
//!
//! ```text
//! G_jk = (P_i2t − Y_i2t)_jk + (P_t2i − Y_t2i)_kj
//! ```
//!
//! the loss `L = −(1/2N)[Σ Y_i2t ⊙ log P_i2t + Σ Y_t2i ⊙ log P_t2i]` has
//! gradients `dI = G·T / (2Nτ)`, `dT = Gᵀ·I / (2Nτ)` and
//! `dτ = −Σ G ⊙ s / (2Nτ)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, invalid, Result};
use crate::numerics::{log_softmax_rows, softmax_rows, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub s: Matrix,
    pub tau: f64,
}

/// Row-stochastic target matrix. One-hot rows for plain InfoNCE; mixup uses
/// convex combinations of one-hot rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix(Matrix);

impl LabelMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        for i in 0..m.rows() {
            let row = m.row(i);
            if row.iter().any(|&y| !(0.0..=1.0).contains(&y)) {
                return Err(contract(format!("label row {i} has entries outside [0, 1]")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(contract(format!("label row {i} sums to {total}, expected 1")));
            }
        }
        Ok(Self(m))
    }

    /// Positive pair (j, j).
    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    /// Positive pair (j, N−1−j).
    pub fn mirror(n: usize) -> Self {
        Self(Matrix::from_fn(n, n, |j, k| if k == n - 1 - j { 1.0 } else { 0.0 }))
    }

    /// `λ·a + (1−λ)·b`
    pub fn blend(a: &LabelMatrix, b: &LabelMatrix, lambda: f64) -> Result<Self> {
        if a.0.shape() != b.0.shape() {
            return Err(contract("label blend shape mismatch"));
        }
        Self::new(a.0.zip_map(&b.0, |x, y| lambda * x + (1.0 - lambda) * y))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn is_one_hot(&self) -> bool {
        self.0.data().iter().all(|&y| y == 0.0 || y == 1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityPair {
    pub i2t: Matrix,
    pub t2i: Matrix,
}

/// Gradients w.r.t. the normalized image/text embeddings and τ.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_img: Matrix,
    pub d_txt: Matrix,
    pub d_tau: f64,
}

impl GradientSet {
    pub fn zeros(n: usize, m: usize, d: usize) -> Self {
        Self {
            d_img: Matrix::zeros(n, d),
            d_txt: Matrix::zeros(m, d),
            d_tau: 0.0,
        }
    }

    /// `self − other`
    pub fn minus(&self, other: &GradientSet) -> GradientSet {
        GradientSet {
            d_img: self.d_img.zip_map(&other.d_img, |a, b| a - b),
            d_txt: self.d_txt.zip_map(&other.d_txt, |a, b| a - b),
            d_tau: self.d_tau - other.d_tau,
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.d_img.data().to_vec();
        v.extend_from_slice(self.d_txt.data());
        v.push(self.d_tau);
        v
    }

    pub fn max_abs(&self) -> f64 {
        self.d_img.max_abs().max(self.d_txt.max_abs()).max(self.d_tau.abs())
    }
}

pub fn similarity_matrix(img: &Matrix, txt: &Matrix, tau: f64) -> Result<SimilarityMatrix> {
    if !(tau > 0.0) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    if img.cols() != txt.cols() {
        return Err(contract(format!(
            "image embeddings have {} dims, text embeddings {}",
            img.cols(),
            txt.cols()
        )));
    }
    let s = img.matmul_t(txt).scaled(1.0 / tau);
    s.ensure_finite("similarity matrix")?;
    Ok(SimilarityMatrix { s, tau })
}

fn check_labels(s: &Matrix, y_i2t: &LabelMatrix, y_t2i: &LabelMatrix) -> Result<()> {
    let (n, m) = s.shape();
    if n != m {
        return Err(contract(format!("similarity matrix must be square, got {n}x{m}")));
    }
    if y_i2t.0.shape() != (n, m) || y_t2i.0.shape() != (m, n) {
        return Err(contract(format!(
            "label shapes {:?}/{:?} do not match similarity {n}x{m}",
            y_i2t.0.shape(),
            y_t2i.0.shape()
        )));
    }
    Ok(())
}

/// `(1/2N) [Σ_j NLL(P_i2t[j], Y_i2t[j]) + Σ_j NLL(P_t2i[j], Y_t2i[j])]`
pub fn infonce_loss(sim: &SimilarityMatrix, y_i2t: &LabelMatrix, y_t2i: &LabelMatrix) -> Result<f64> {
    check_labels(&sim.s, y_i2t, y_t2i)?;
    let n = sim.s.rows() as f64;
    let log_i2t = log_softmax_rows(&sim.s)?;
    let log_t2i = log_softmax_rows(&sim.s.transpose())?;
    let nll = -(log_i2t.inner(&y_i2t.0) + log_t2i.inner(&y_t2i.0));
    Ok(nll / (2.0 * n))
}

pub fn probability_matrices(sim: &SimilarityMatrix) -> Result<ProbabilityPair> {
    Ok(ProbabilityPair {
        i2t: softmax_rows(&sim.s)?,
        t2i: softmax_rows(&sim.s.transpose())?,
    })
}

/// `G_jk = (P_i2t − Y_i2t)_jk + (P_t2i − Y_t2i)_kj`
pub fn coefficient_matrix(p: &ProbabilityPair, y_i2t: &LabelMatrix, y_t2i: &LabelMatrix) -> Result<Matrix> {
    check_labels(&p.i2t, y_i2t, y_t2i)?;
    let n = p.i2t.rows();
    Ok(Matrix::from_fn(n, n, |j, k| {
        p.i2t[(j, k)] - y_i2t.0[(j, k)] + p.t2i[(k, j)] - y_t2i.0[(k, j)]
    }))
}

fn gradients_from_coefficients(g: &Matrix, img: &Matrix, txt: &Matrix, tau: f64) -> Result<GradientSet> {
    let n = g.rows();
    if img.rows() != n || txt.rows() != n {
        return Err(contract(format!(
            "embedding rows {}/{} do not match batch {n}",
            img.rows(),
            txt.rows()
        )));
    }
    let scale = 1.0 / (2.0 * n as f64 * tau);
    let d_img = g.matmul(txt).scaled(scale);
    let d_txt = g.t_matmul(img).scaled(scale);
    let s = img.matmul_t(txt).scaled(1.0 / tau);
    let d_tau = -scale * g.inner(&s);
    Ok(GradientSet { d_img, d_txt, d_tau })
}

pub fn analytic_gradients(
    p: &ProbabilityPair,
    y_i2t: &LabelMatrix,
    y_t2i: &LabelMatrix,
    img: &Matrix,
    txt: &Matrix,
    tau: f64,
) -> Result<GradientSet> {
    let g = coefficient_matrix(p, y_i2t, y_t2i)?;
    gradients_from_coefficients(&g, img, txt, tau)
}

fn check_partition(shards: &[Vec<usize>], n: usize) -> Result<Vec<usize>> {
    let mut owner = vec![usize::MAX; n];
    for (w, shard) in shards.iter().enumerate() {
        for &i in shard {
            if i >= n {
                return Err(contract(format!("shard {w} holds row {i}, batch has {n}")));
            }
            if owner[i] != usize::MAX {
                return Err(contract(format!("row {i} appears in shards {} and {w}", owner[i])));
            }
            owner[i] = w;
        }
    }
    if let Some(i) = owner.iter().position(|&o| o == usize::MAX) {
        return Err(contract(format!("row {i} is not covered by any shard")));
    }
    Ok(owner)
}

/// Contiguous equal shards `[w·N/W, (w+1)·N/W)`.
pub fn contiguous_shards(n: usize, workers: usize) -> Result<Vec<Vec<usize>>> {
    if workers == 0 || n % workers != 0 {
        return Err(invalid(format!("{workers} workers do not divide batch size {n}")));
    }
    let per = n / workers;
    Ok((0..workers).map(|w| (w * per..(w + 1) * per).collect()).collect())
}

/// Gradient of one worker's local loss share: I2T rows and T2I rows it owns,
/// normalized by the global batch size, differentiated w.r.t. every
/// (gathered) embedding.
pub fn local_share_gradients(
    shard: &[usize],
    p: &ProbabilityPair,
    y_i2t: &LabelMatrix,
    y_t2i: &LabelMatrix,
    img: &Matrix,
    txt: &Matrix,
    tau: f64,
) -> Result<GradientSet> {
    check_labels(&p.i2t, y_i2t, y_t2i)?;
    let n = p.i2t.rows();
    let mut local = vec![false; n];
    for &i in shard {
        if i >= n {
            return Err(contract(format!("shard row {i} outside batch of {n}")));
        }
        local[i] = true;
    }
    let g = Matrix::from_fn(n, n, |j, k| {
        let i2t = if local[j] { p.i2t[(j, k)] - y_i2t.0[(j, k)] } else { 0.0 };
        let t2i = if local[k] { p.t2i[(k, j)] - y_t2i.0[(k, j)] } else { 0.0 };
        i2t + t2i
    });
    gradients_from_coefficients(&g, img, txt, tau)
}

/// Gradient produced when every worker treats gathered remote embeddings as
/// constants, and its deficit `analytic − detached`.
///
/// For a cross-worker pair (j, k) the terms `(P_i2t − Y_i2t)_jk · i_j ∇t_k`
/// and `(P_t2i − Y_t2i)_kj · t_k ∇i_j` are lost. τ is replicated on every
/// worker, so its gradient survives intact.
pub fn detached_gather_gradient(
    shards: &[Vec<usize>],
    p: &ProbabilityPair,
    y_i2t: &LabelMatrix,
    y_t2i: &LabelMatrix,
    img: &Matrix,
    txt: &Matrix,
    tau: f64,
) -> Result<(GradientSet, GradientSet)> {
    let n = p.i2t.rows();
    check_partition(shards, n)?;
    let mut wrong = GradientSet::zeros(n, n, img.cols());
    for shard in shards {
        let share = local_share_gradients(shard, p, y_i2t, y_t2i, img, txt, tau)?;
        for &r in shard {
            for (d, &v) in wrong.d_img.row_mut(r).iter_mut().zip(share.d_img.row(r)) {
                *d += v;
            }
            for (d, &v) in wrong.d_txt.row_mut(r).iter_mut().zip(share.d_txt.row(r)) {
                *d += v;
            }
        }
        wrong.d_tau += share.d_tau;
    }
    let full = analytic_gradients(p, y_i2t, y_t2i, img, txt, tau)?;
    let deficit = full.minus(&wrong);
    Ok((wrong, deficit))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NegativeLogpStats {
    /// Mean log p̄ over negative pairs whose query comes from the source.
    pub per_source: BTreeMap<u32, f64>,
    /// Sources present in the batch that had no negative pairs.
    pub omitted: Vec<u32>,
}

/// Per-source mean of `log p̄_jk` over pairs with `y_jk = 0`, computed for
/// each direction separately and then averaged.
pub fn negative_logp_stats(
    p: &ProbabilityPair,
    y_i2t: &LabelMatrix,
    y_t2i: &LabelMatrix,
    source_tags: &[u32],
) -> Result<NegativeLogpStats> {
    check_labels(&p.i2t, y_i2t, y_t2i)?;
    let n = p.i2t.rows();
    if source_tags.len() != n {
        return Err(contract(format!("{} source tags for a batch of {n}", source_tags.len())));
    }
    // source -> [(sum, count) for i2t, (sum, count) for t2i]
    let mut acc: BTreeMap<u32, [(f64, usize); 2]> = BTreeMap::new();
    for (j, &src) in source_tags.iter().enumerate() {
        let entry = acc.entry(src).or_insert([(0.0, 0); 2]);
        for (dir, (probs, labels)) in [(&p.i2t, &y_i2t.0), (&p.t2i, &y_t2i.0)].into_iter().enumerate() {
            for k in 0..n {
                if labels[(j, k)] == 0.0 {
                    entry[dir].0 += probs[(j, k)].ln();
                    entry[dir].1 += 1;
                }
            }
        }
    }
    let mut stats = NegativeLogpStats::default();
    for (src, dirs) in acc {
        let means: Vec<f64> = dirs.iter().filter(|(_, c)| *c > 0).map(|(s, c)| s / *c as f64).collect();
        if means.is_empty() {
            stats.omitted.push(src);
        } else {
            stats.per_source.insert(src, means.iter().sum::<f64>() / means.len() as f64);
        }
    }
    Ok(stats)
}
