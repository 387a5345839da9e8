//! Focal loss for the segmentation head and the NT-Xent contrastive loss for
//! the classification arm, with closed-form gradients.

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::domain::{Mask, ProbabilityMap};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before `ln`.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct FocalParams {
    /// Weight of the fiber class; background is weighted `1 - alpha`.
    pub alpha: f64,
    pub gamma: f64,
    /// When set, both classes get weight 1 (together with `gamma = 0`
    /// this is plain binary cross-entropy).
    #[serde(default)]
    pub unit_alpha: bool,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
            unit_alpha: false,
        }
    }
}

impl FocalParams {
    pub fn cross_entropy() -> Self {
        FocalParams {
            alpha: 1.0,
            gamma: 0.0,
            unit_alpha: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Invalid(format!("focal alpha must be in (0,1], got {}", self.alpha)));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::Invalid(format!("focal gamma must be >= 0, got {}", self.gamma)));
        }
        Ok(())
    }

    #[inline]
    fn alpha_t(&self, positive: bool) -> f64 {
        match (self.unit_alpha, positive) {
            (true, _) => 1.0,
            (false, true) => self.alpha,
            (false, false) => 1.0 - self.alpha,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default)]
pub struct ContrastiveParams {
    pub tau: f64,
    /// Weight of the contrastive term in the combined objective.
    pub lambda_weight: f64,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        ContrastiveParams {
            tau: 0.5,
            lambda_weight: 1.0,
        }
    }
}

impl ContrastiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Invalid(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.lambda_weight >= 0.0) {
            return Err(Error::Invalid("lambda_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-pixel focal term and its derivative with respect to `p`.
#[inline]
pub fn focal_term_grad(p: f64, positive: bool, fp: &FocalParams) -> (f64, f64) {
    let clamped = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let pt = if positive { clamped } else { 1.0 - clamped };
    let a = fp.alpha_t(positive);
    let q = 1.0 - pt;
    let ln_pt = pt.ln();
    let loss = -a * q.powf(fp.gamma) * ln_pt;
    // d/dpt of -a q^g ln(pt) = a [g q^(g-1) ln(pt) - q^g / pt]
    let d_pt = if fp.gamma == 0.0 {
        -a / pt
    } else {
        a * (fp.gamma * q.powf(fp.gamma - 1.0) * ln_pt - q.powf(fp.gamma) / pt)
    };
    let inside = p > PROB_EPS && p < 1.0 - PROB_EPS;
    let d_p = if !inside {
        0.0
    } else if positive {
        d_pt
    } else {
        -d_pt
    };
    (loss, d_p)
}

/// Mean focal loss over pixels.
pub fn focal_loss_values(probs: &[f64], targets: &[u8], fp: &FocalParams) -> Result<f64> {
    if probs.len() != targets.len() {
        return Err(Error::shape(probs.len(), targets.len()));
    }
    if probs.is_empty() {
        return Err(Error::Empty("focal loss over zero pixels".into()));
    }
    let s: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| focal_term_grad(p, y != 0, fp).0)
        .sum();
    Ok(s / probs.len() as f64)
}

/// Mean focal loss and its gradient with respect to each probability.
pub fn focal_loss_grad(probs: &[f64], targets: &[u8], fp: &FocalParams) -> Result<(f64, Vec<f64>)> {
    if probs.len() != targets.len() {
        return Err(Error::shape(probs.len(), targets.len()));
    }
    if probs.is_empty() {
        return Err(Error::Empty("focal loss over zero pixels".into()));
    }
    let n = probs.len() as f64;
    let mut total = 0.0;
    let grads = probs
        .iter()
        .zip(targets)
        .map(|(&p, &y)| {
            let (l, g) = focal_term_grad(p, y != 0, fp);
            total += l;
            g / n
        })
        .collect();
    Ok((total / n, grads))
}

pub fn focal_loss(prob_map: &ProbabilityMap, target: &Mask, fp: &FocalParams) -> Result<f64> {
    if prob_map.dims() != target.dims() {
        return Err(Error::shape(format!("{:?}", prob_map.dims()), format!("{:?}", target.dims())));
    }
    let probs: Vec<f64> = prob_map.values.as_slice().iter().map(|&v| v as f64).collect();
    focal_loss_values(&probs, target.as_slice(), fp)
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean focal loss of `sigmoid(logits)` and the gradient with respect to the
/// logits, as used by the trainer.
pub fn focal_loss_logits(logits: &[f32], targets: &[u8], fp: &FocalParams) -> Result<(f64, Vec<f32>)> {
    if logits.len() != targets.len() {
        return Err(Error::shape(logits.len(), targets.len()));
    }
    if logits.is_empty() {
        return Err(Error::Empty("focal loss over zero pixels".into()));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let grads = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            let p = sigmoid(z as f64);
            let (l, g) = focal_term_grad(p, y != 0, fp);
            total += l;
            (g * p * (1.0 - p) / n) as f32
        })
        .collect();
    Ok((total / n, grads))
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `xᵀy / (‖x‖‖y‖)`.
pub fn cosine_similarity(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::shape(x.len(), y.len()));
    }
    let (nx, ny) = (norm(x), norm(y));
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Invalid("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Maps every embedding index to its positive partner.
fn partner_table(n_embeddings: usize, pairs: &[(usize, usize)]) -> Result<Vec<usize>> {
    if n_embeddings < 4 || n_embeddings % 2 != 0 {
        return Err(Error::Invalid(format!(
            "contrastive loss needs an even number >= 4 of embeddings, got {n_embeddings}"
        )));
    }
    if pairs.len() * 2 != n_embeddings {
        return Err(Error::Invalid(format!(
            "{} pairs do not cover {n_embeddings} embeddings",
            pairs.len()
        )));
    }
    let mut partner = vec![usize::MAX; n_embeddings];
    for &(i, j) in pairs {
        if i == j || i >= n_embeddings || j >= n_embeddings {
            return Err(Error::Invalid(format!("invalid positive pair ({i}, {j})")));
        }
        if partner[i] != usize::MAX || partner[j] != usize::MAX {
            return Err(Error::Invalid(format!("embedding in more than one pair: ({i}, {j})")));
        }
        partner[i] = j;
        partner[j] = i;
    }
    if let Some(k) = partner.iter().position(|&p| p == usize::MAX) {
        return Err(Error::Invalid(format!("embedding {k} is unpaired")));
    }
    Ok(partner)
}

/// Mean over all 2N anchors of
/// `-ln( exp(sim(i,j)/τ) / Σ_{k≠i} exp(sim(i,k)/τ) )`.
pub fn contrastive_loss(embeddings: &[Vec<f64>], pairs: &[(usize, usize)], cp: &ContrastiveParams) -> Result<f64> {
    contrastive_loss_grad(embeddings, pairs, cp).map(|(l, _)| l)
}

/// Contrastive loss and its gradient with respect to each raw embedding.
pub fn contrastive_loss_grad(
    embeddings: &[Vec<f64>],
    pairs: &[(usize, usize)],
    cp: &ContrastiveParams,
) -> Result<(f64, Vec<Vec<f64>>)> {
    cp.validate()?;
    let partner = partner_table(embeddings.len(), pairs)?;
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::Invalid("embeddings differ in dimension".into()));
    }
    let norms: Vec<f64> = embeddings.iter().map(|e| norm(e)).collect();
    if norms.iter().any(|&n| n == 0.0) {
        return Err(Error::Invalid("zero embedding vector".into()));
    }
    Ok(nt_xent(embeddings, &norms, &partner, cp.tau))
}

fn nt_xent(embeddings: &[Vec<f64>], norms: &[f64], partner: &[usize], tau: f64) -> (f64, Vec<Vec<f64>>) {
    let m = embeddings.len();
    let dim = embeddings[0].len();
    let unit: Vec<Vec<f64>> = embeddings
        .iter()
        .zip(norms)
        .map(|(e, &n)| e.iter().map(|v| v / n).collect())
        .collect();
    let mut logits = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..m {
            logits[i * m + k] = unit[i].iter().zip(&unit[k]).map(|(a, b)| a * b).sum::<f64>() / tau;
        }
    }
    // coef[i][k] = dL/dlogit(i,k), zero on the diagonal.
    let mut coef = vec![0.0; m * m];
    let mut total = 0.0;
    for i in 0..m {
        let row = &logits[i * m..(i + 1) * m];
        let max = (0..m).filter(|&k| k != i).map(|k| row[k]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..m).filter(|&k| k != i).map(|k| (row[k] - max).exp()).sum();
        let log_denom = denom.ln() + max;
        total += log_denom - row[partner[i]];
        for k in 0..m {
            if k != i {
                let softmax = (row[k] - log_denom).exp();
                coef[i * m + k] = (softmax - f64::from(u8::from(k == partner[i]))) / m as f64;
            }
        }
    }
    let loss = total / m as f64;
    let mut grads = vec![vec![0.0; dim]; m];
    for i in 0..m {
        // dL/du_i = (1/τ) Σ_k (coef[i][k] + coef[k][i]) u_k
        let mut du = vec![0.0; dim];
        for k in 0..m {
            let c = coef[i * m + k] + coef[k * m + i];
            if c != 0.0 {
                for d in 0..dim {
                    du[d] += c * unit[k][d] / tau;
                }
            }
        }
        // Project through the normalization: (I - u uᵀ) / ‖f‖.
        let proj: f64 = du.iter().zip(&unit[i]).map(|(a, b)| a * b).sum();
        for d in 0..dim {
            grads[i][d] = (du[d] - proj * unit[i][d]) / norms[i];
        }
    }
    (loss, grads)
}

/// Training-path variant on a flat `[2N, dim]` f32 buffer where anchor `i`
/// pairs with `i + N`. Near-zero vectors are floored instead of rejected.
pub fn contrastive_loss_batch(flat: &[f32], dim: usize, cp: &ContrastiveParams) -> Result<(f64, Vec<f32>)> {
    cp.validate()?;
    if dim == 0 || flat.len() % dim != 0 {
        return Err(Error::shape(format!("multiple of {dim}"), flat.len()));
    }
    let m = flat.len() / dim;
    let half = m / 2;
    let pairs: Vec<(usize, usize)> = (0..half).map(|i| (i, i + half)).collect();
    let partner = partner_table(m, &pairs)?;
    let emb: Vec<Vec<f64>> = flat.chunks(dim).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
    let norms: Vec<f64> = emb.iter().map(|e| norm(e).max(1e-12)).collect();
    let (loss, grads) = nt_xent(&emb, &norms, &partner, cp.tau);
    Ok((loss, grads.into_iter().flatten().map(|g| g as f32).collect()))
}

/// `seg + λ · contrastive`.
pub fn combined_loss(seg_term: f64, contrastive_term: f64, cp: &ContrastiveParams) -> f64 {
    seg_term + cp.lambda_weight * contrastive_term
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn focal_single_pixel_value() {
        let l = focal_loss_values(&[0.5], &[1], &FocalParams::default()).unwrap();
        assert_abs_diff_eq!(l, 0.25 * 0.25 * std::f64::consts::LN_2, epsilon = 1e-9);
        assert_abs_diff_eq!(l, 0.0433217, epsilon = 1e-7);
    }

    #[test]
    fn focal_reduces_to_cross_entropy() {
        let l = focal_loss_values(&[0.5], &[1], &FocalParams::cross_entropy()).unwrap();
        assert_abs_diff_eq!(l, 0.693147, epsilon = 1e-6);
    }

    #[test]
    fn focal_perfect_prediction_limit() {
        let l = focal_loss_values(&[1.0 - 1e-9], &[1], &FocalParams::default()).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn focal_shape_mismatch() {
        assert!(focal_loss_values(&[0.5, 0.5], &[1], &FocalParams::default()).is_err());
    }

    #[test]
    fn cosine_examples() {
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_abs_diff_eq!(
            cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap(),
            0.974632,
            epsilon = 1e-6
        );
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let cp = ContrastiveParams::default();
        let same = vec![vec![1.0, 2.0]; 4];
        let pairs = [(0, 1), (2, 3)];
        assert_abs_diff_eq!(contrastive_loss(&same, &pairs, &cp).unwrap(), 3f64.ln(), epsilon = 1e-12);

        let e1 = vec![1.0, 0.0];
        let e2 = vec![0.0, 1.0];
        let emb = vec![e1.clone(), e1, e2.clone(), e2];
        // -ln(e^2 / (e^2 + 2)) evaluates to 0.2395448.
        let want = -(2f64.exp() / (2f64.exp() + 2.0)).ln();
        assert_abs_diff_eq!(contrastive_loss(&emb, &pairs, &cp).unwrap(), want, epsilon = 1e-6);
        assert_abs_diff_eq!(want, 0.2395448, epsilon = 1e-7);

        let scaled: Vec<Vec<f64>> = emb.iter().map(|e| e.iter().map(|v| v * 7.0).collect()).collect();
        assert_abs_diff_eq!(
            contrastive_loss(&scaled, &pairs, &cp).unwrap(),
            contrastive_loss(&emb, &pairs, &cp).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn contrastive_rejects_bad_pairing() {
        let cp = ContrastiveParams::default();
        let emb = vec![vec![1.0, 0.5]; 4];
        assert!(contrastive_loss(&emb, &[(0, 1), (1, 2)], &cp).is_err());
        assert!(contrastive_loss(&emb, &[(0, 1)], &cp).is_err());
        assert!(contrastive_loss(&emb[..2], &[(0, 1)], &cp).is_err());
        let mut z = emb.clone();
        z[3] = vec![0.0, 0.0];
        assert!(contrastive_loss(&z, &[(0, 1), (2, 3)], &cp).is_err());
    }

    #[test]
    fn combined_examples() {
        let mut cp = ContrastiveParams::default();
        assert_abs_diff_eq!(combined_loss(0.3, 0.7, &cp), 1.0);
        cp.lambda_weight = 0.0;
        assert_eq!(combined_loss(0.3, 0.7, &cp), 0.3);
    }

    #[test]
    fn batch_variant_matches_general_form() {
        let flat: Vec<f32> = (0..24).map(|i| ((i * 37 % 11) as f32 - 5.0) / 3.0).collect();
        let cp = ContrastiveParams::default();
        let (lb, gb) = contrastive_loss_batch(&flat, 4, &cp).unwrap();
        let emb: Vec<Vec<f64>> = flat.chunks(4).map(|c| c.iter().map(|&v| v as f64).collect()).collect();
        let (lg, gg) = contrastive_loss_grad(&emb, &[(0, 3), (1, 4), (2, 5)], &cp).unwrap();
        assert_abs_diff_eq!(lb, lg, epsilon = 1e-9);
        for (a, b) in gb.iter().zip(gg.iter().flatten()) {
            assert_abs_diff_eq!(*a as f64, *b, epsilon = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn focal_decreasing_in_p_for_positive(a in 0.001f64..0.998, d in 0.0005f64..0.001) {
            let fp = FocalParams::default();
            let l1 = focal_term_grad(a, true, &fp).0;
            let l2 = focal_term_grad(a + d, true, &fp).0;
            prop_assert!(l2 < l1);
        }

        #[test]
        fn combined_is_linear(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let cp = ContrastiveParams { tau: 0.5, lambda_weight: 2.0 };
            prop_assert!((combined_loss(a, b, &cp) - (a + 2.0 * b)).abs() < 1e-12);
        }

        #[test]
        fn cosine_scale_invariant(x in prop::collection::vec(-5.0f64..5.0, 3), a in 0.1f64..10.0, b in 0.1f64..10.0) {
            prop_assume!(norm(&x) > 1e-3);
            let y: Vec<f64> = x.iter().rev().cloned().collect();
            let xa: Vec<f64> = x.iter().map(|v| v * a).collect();
            let yb: Vec<f64> = y.iter().map(|v| v * b).collect();
            prop_assert!((cosine_similarity(&xa, &yb).unwrap() - cosine_similarity(&x, &y).unwrap()).abs() < 1e-12);
            prop_assert!((cosine_similarity(&x, &y).unwrap() - cosine_similarity(&y, &x).unwrap()).abs() < 1e-15);
            prop_assert!((cosine_similarity(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
