//! Coin-flipping mixup.
//!
//! One coin per batch picks the modality to mix (image when γ > 0.5), one
//! λ ~ Beta(α, α) per batch sets the mixing weight, and row j is mixed with
//! its mirror partner `r(j) = N−1−j`. The loss is
//! `λ·L(identity labels) + (1−λ)·L(mirror labels)`, which equals InfoNCE
//! with the blended label matrix `λ·Y_id + (1−λ)·Y_mirror`.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::contrastive::{
    analytic_gradients, infonce_loss, similarity_matrix, GradientSet, LabelMatrix, ProbabilityPair,
};
use crate::encoders::{EmbeddingBatch, ImageBatch};
use crate::error::{contract, invalid, Result};
use crate::numerics::SeedContext;

pub const DEFAULT_ALPHA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    /// Image when γ > 0.5, text otherwise.
    pub fn from_coin(gamma: f64) -> Self {
        if gamma > 0.5 {
            Modality::Image
        } else {
            Modality::Text
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixupDecision {
    pub gamma: f64,
    pub modality: Modality,
    pub lambda: f64,
    pub alpha: f64,
    pub n: usize,
}

impl MixupDecision {
    /// Builds a decision with an explicit coin and weight.
    pub fn fixed(gamma: f64, lambda: f64, n: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
            return Err(invalid(format!("γ={gamma} and λ={lambda} must lie in [0, 1]")));
        }
        Ok(Self {
            gamma,
            modality: Modality::from_coin(gamma),
            lambda,
            alpha: f64::NAN,
            n,
        })
    }

    pub fn partner(&self, j: usize) -> usize {
        self.n - 1 - j
    }

    pub fn labels(&self) -> Result<(LabelMatrix, LabelMatrix)> {
        let y = LabelMatrix::blend(&LabelMatrix::identity(self.n), &LabelMatrix::mirror(self.n), self.lambda)?;
        Ok((y.clone(), y))
    }
}

pub fn sample_mixup_decision(alpha: f64, n: usize, ctx: &SeedContext) -> Result<MixupDecision> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(invalid(format!("Beta concentration must be positive, got {alpha}")));
    }
    if n == 0 {
        return Err(invalid("mixup needs a non-empty batch"));
    }
    let mut rng = ctx.rng();
    let gamma: f64 = rng.random();
    let beta = Beta::new(alpha, alpha).map_err(|e| invalid(format!("Beta({alpha}, {alpha}): {e}")))?;
    let lambda = beta.sample(&mut rng).clamp(0.0, 1.0);
    Ok(MixupDecision {
        gamma,
        modality: Modality::from_coin(gamma),
        lambda,
        alpha,
        n,
    })
}

/// `x̃_j = λ·x_j + (1−λ)·x_r(j)` on raw patch features.
pub fn apply_input_mixup(x: &ImageBatch, d: &MixupDecision) -> Result<ImageBatch> {
    if d.modality != Modality::Image {
        return Err(contract("input mixup requested with a text-modality decision"));
    }
    if d.n != x.len() {
        return Err(contract(format!("decision is for {} rows, batch has {}", d.n, x.len())));
    }
    let samples = x.samples();
    let mixed = (0..x.len())
        .map(|j| samples[j].zip_map(&samples[d.partner(j)], |a, b| d.lambda * a + (1.0 - d.lambda) * b))
        .collect();
    ImageBatch::with_keys(mixed, x.keys().to_vec())
}

fn split_by_modality<'a>(
    mixed: &'a EmbeddingBatch,
    plain: &'a EmbeddingBatch,
    d: &MixupDecision,
) -> Result<(&'a EmbeddingBatch, &'a EmbeddingBatch)> {
    if mixed.rows() != plain.rows() || mixed.rows() != d.n {
        return Err(contract(format!(
            "mixup embeddings have {}/{} rows, decision expects {}",
            mixed.rows(),
            plain.rows(),
            d.n
        )));
    }
    Ok(match d.modality {
        Modality::Image => (mixed, plain),
        Modality::Text => (plain, mixed),
    })
}

/// `λ·L_id + (1−λ)·L_mirror`, both directions, normalized by 2N.
pub fn mixup_loss(emb_mixed: &EmbeddingBatch, emb_plain: &EmbeddingBatch, d: &MixupDecision, tau: f64) -> Result<f64> {
    let (img, txt) = split_by_modality(emb_mixed, emb_plain, d)?;
    let sim = similarity_matrix(img, txt, tau)?;
    let id = LabelMatrix::identity(d.n);
    let mirror = LabelMatrix::mirror(d.n);
    let l_id = if d.lambda > 0.0 { infonce_loss(&sim, &id, &id)? } else { 0.0 };
    let l_mirror = if d.lambda < 1.0 { infonce_loss(&sim, &mirror, &mirror)? } else { 0.0 };
    Ok(d.lambda * l_id + (1.0 - d.lambda) * l_mirror)
}

/// Gradients of [`mixup_loss`] w.r.t. the embeddings actually fed to the loss.
/// `img`/`txt` are the (possibly mixed) image and text embeddings.
pub fn mixup_gradients(
    p: &ProbabilityPair,
    d: &MixupDecision,
    img: &EmbeddingBatch,
    txt: &EmbeddingBatch,
    tau: f64,
) -> Result<GradientSet> {
    let (y_i2t, y_t2i) = d.labels()?;
    analytic_gradients(p, &y_i2t, &y_t2i, img, txt, tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contrastive::probability_matrices;
    use crate::numerics::{l2_normalize_rows, Matrix};

    fn unit_rows(n: usize, d: usize, seed: u64) -> Matrix {
        l2_normalize_rows(&Matrix::random_uniform(n, d, 1.0, &SeedContext::new(seed, "emb"))).unwrap().0
    }

    fn images(n: usize) -> ImageBatch {
        ImageBatch::new((0..n).map(|i| Matrix::filled(2, 3, i as f64 + 1.0)).collect()).unwrap()
    }

    #[test]
    fn huge_alpha_concentrates_lambda() {
        let d = sample_mixup_decision(1e6, 8, &SeedContext::new(42, "mix")).unwrap();
        assert!((0.49..=0.51).contains(&d.lambda), "λ = {}", d.lambda);
    }

    #[test]
    fn coin_above_half_selects_image() {
        assert_eq!(Modality::from_coin(0.7), Modality::Image);
        assert_eq!(Modality::from_coin(0.5), Modality::Text);
        assert_eq!(Modality::from_coin(0.2), Modality::Text);
    }

    #[test]
    fn sampling_is_deterministic() {
        let ctx = SeedContext::new(5, "mix");
        assert_eq!(
            sample_mixup_decision(0.1, 4, &ctx).unwrap(),
            sample_mixup_decision(0.1, 4, &ctx).unwrap()
        );
    }

    #[test]
    fn nonpositive_alpha_is_rejected() {
        assert!(sample_mixup_decision(0.0, 4, &SeedContext::new(0, "m")).is_err());
        assert!(sample_mixup_decision(-1.0, 4, &SeedContext::new(0, "m")).is_err());
    }

    #[test]
    fn partner_is_an_involution() {
        let d = MixupDecision::fixed(0.9, 0.5, 7).unwrap();
        for j in 0..7 {
            assert_eq!(d.partner(d.partner(j)), j);
        }
        assert_eq!(d.partner(3), 3);
    }

    #[test]
    fn input_mixup_edge_weights() {
        let x = images(4);
        let one = apply_input_mixup(&x, &MixupDecision::fixed(0.9, 1.0, 4).unwrap()).unwrap();
        assert_eq!(one, x);
        let zero = apply_input_mixup(&x, &MixupDecision::fixed(0.9, 0.0, 4).unwrap()).unwrap();
        for j in 0..4 {
            assert_eq!(zero.samples()[j], x.samples()[3 - j]);
        }
        let half = apply_input_mixup(&x, &MixupDecision::fixed(0.9, 0.5, 4).unwrap()).unwrap();
        assert_eq!(half.samples()[0], Matrix::filled(2, 3, 2.5));
        assert_eq!(half.samples()[3], Matrix::filled(2, 3, 2.5));
    }

    #[test]
    fn input_mixup_rejects_text_decision() {
        let x = images(2);
        assert!(apply_input_mixup(&x, &MixupDecision::fixed(0.1, 0.5, 2).unwrap()).is_err());
    }

    #[test]
    fn loss_collapses_at_extreme_lambda() {
        let i = unit_rows(5, 4, 1);
        let t = unit_rows(5, 4, 2);
        let sim = similarity_matrix(&i, &t, 0.1).unwrap();
        let id = LabelMatrix::identity(5);
        let mirror = LabelMatrix::mirror(5);
        let d1 = MixupDecision::fixed(0.9, 1.0, 5).unwrap();
        assert_eq!(mixup_loss(&i, &t, &d1, 0.1).unwrap(), infonce_loss(&sim, &id, &id).unwrap());
        let d0 = MixupDecision::fixed(0.9, 0.0, 5).unwrap();
        assert_eq!(mixup_loss(&i, &t, &d0, 0.1).unwrap(), infonce_loss(&sim, &mirror, &mirror).unwrap());
    }

    #[test]
    fn loss_is_affine_in_lambda() {
        let i = unit_rows(6, 4, 3);
        let t = unit_rows(6, 4, 4);
        let sim = similarity_matrix(&i, &t, 0.1).unwrap();
        let id = LabelMatrix::identity(6);
        let mirror = LabelMatrix::mirror(6);
        let l_id = infonce_loss(&sim, &id, &id).unwrap();
        let l_m = infonce_loss(&sim, &mirror, &mirror).unwrap();
        // Text modality: mixed embeddings are the text side.
        let d = MixupDecision::fixed(0.2, 0.3, 6).unwrap();
        let l = mixup_loss(&t, &i, &d, 0.1).unwrap();
        assert!((l - (0.3 * l_id + 0.7 * l_m)).abs() < 1e-12);
        // Same value through the blended label matrix.
        let (ya, yb) = d.labels().unwrap();
        assert!((infonce_loss(&sim, &ya, &yb).unwrap() - l).abs() < 1e-12);
    }

    #[test]
    fn lambda_one_gradients_match_standard() {
        let i = unit_rows(4, 3, 5);
        let t = unit_rows(4, 3, 6);
        let p = probability_matrices(&similarity_matrix(&i, &t, 0.2).unwrap()).unwrap();
        let d = MixupDecision::fixed(0.9, 1.0, 4).unwrap();
        let id = LabelMatrix::identity(4);
        assert_eq!(
            mixup_gradients(&p, &d, &i, &t, 0.2).unwrap(),
            analytic_gradients(&p, &id, &id, &i, &t, 0.2).unwrap()
        );
    }

    /// N=2, λ=½: every label row is [½, ½], so G_jk = p_i2t[j,k] + p_t2i[k,j] − 1.
    #[test]
    fn half_lambda_two_by_two_closed_form() {
        let i = unit_rows(2, 3, 7);
        let t = unit_rows(2, 3, 8);
        let tau = 0.25;
        let p = probability_matrices(&similarity_matrix(&i, &t, tau).unwrap()).unwrap();
        let d = MixupDecision::fixed(0.9, 0.5, 2).unwrap();
        let (y, _) = d.labels().unwrap();
        assert!(y.matrix().data().iter().all(|&v| v == 0.5));
        let g = mixup_gradients(&p, &d, &i, &t, tau).unwrap();
        for j in 0..2 {
            for c in 0..3 {
                let mut expected = 0.0;
                for k in 0..2 {
                    expected += (p.i2t[(j, k)] + p.t2i[(k, j)] - 1.0) * t[(k, c)];
                }
                expected /= 4.0 * tau;
                assert!((g.d_img[(j, c)] - expected).abs() < 1e-14);
            }
        }
    }
}
