//! Pairwise matching heads: per-ROI inner-product similarity, cross-ROI
//! bilinear similarity, the classification head, and the regularized
//! cross-entropy pair loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{uniform_mat, SeededRng};
use crate::numerics::{dot, softmax_unchecked, Mat};

/// Which matching layer the model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Inner,
    Bilinear,
}

impl std::str::FromStr for MatchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(MatchKind::Inner),
            "bilinear" => Ok(MatchKind::Bilinear),
            other => Err(Error::validation(format!(
                "unknown matching kind `{other}` (expected inner or bilinear)"
            ))),
        }
    }
}

/// Output of a matching layer.
#[derive(Debug, Clone)]
pub enum MatchOutput {
    /// Per-ROI similarities, one per vertex.
    Inner(Vec<f64>),
    /// Cross-ROI similarity matrix.
    Bilinear(Mat),
}

impl MatchOutput {
    pub fn flat(&self) -> &[f64] {
        match self {
            MatchOutput::Inner(v) => v,
            MatchOutput::Bilinear(m) => m.as_slice(),
        }
    }

    pub fn len(&self) -> usize {
        self.flat().len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat().is_empty()
    }
}

/// Classification head: hidden rectified layer, two logits, and (in bilinear
/// mode) the matching matrix `M`.
#[derive(Debug, Clone)]
pub struct HeadParams {
    /// `h_head x flat_dim`
    pub w1: Mat,
    /// `2 x h_head`
    pub w2: Mat,
    /// `d x d` bilinear matrix, present only in bilinear mode.
    pub m: Option<Mat>,
}

impl HeadParams {
    /// Fan-scaled uniform `w1`/`w2`; `m` starts at identity so bilinear
    /// matching begins exactly equivalent to inner matching.
    pub fn init(
        flat_dim: usize,
        h_head: usize,
        kind: MatchKind,
        d: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if h_head < 1 || flat_dim < 1 {
            return Err(Error::validation("head dimensions must be at least 1"));
        }
        let s1 = (6.0 / (flat_dim + h_head) as f64).sqrt();
        let s2 = (6.0 / (h_head + 2) as f64).sqrt();
        Ok(HeadParams {
            w1: uniform_mat(rng, h_head, flat_dim, -s1, s1),
            w2: uniform_mat(rng, 2, h_head, -s2, s2),
            m: match kind {
                MatchKind::Inner => None,
                MatchKind::Bilinear => Some(Mat::identity(d)),
            },
        })
    }
}

/// L2-normalize each row; zero rows are left as zero. Returns the normalized
/// matrix and the original row norms (0 for zero rows).
pub fn normalize_rows(y: &Mat) -> (Mat, Vec<f64>) {
    let mut out = y.clone();
    let mut norms = Vec::with_capacity(y.rows());
    for i in 0..y.rows() {
        let norm = dot(y.row(i), y.row(i)).sqrt();
        norms.push(norm);
        if norm > 0.0 {
            for v in out.row_mut(i) {
                *v /= norm;
            }
        }
    }
    (out, norms)
}

/// Per-ROI inner-product similarity of row-normalized feature maps.
pub fn inner_matching(ya: &Mat, yb: &Mat) -> Result<Vec<f64>> {
    if ya.rows() != yb.rows() || ya.cols() != yb.cols() {
        return Err(Error::validation(format!(
            "inner matching: shapes {}x{} and {}x{} differ",
            ya.rows(),
            ya.cols(),
            yb.rows(),
            yb.cols()
        )));
    }
    let (na, _) = normalize_rows(ya);
    let (nb, _) = normalize_rows(yb);
    Ok((0..na.rows()).map(|i| dot(na.row(i), nb.row(i))).collect())
}

/// Cross-ROI bilinear similarity `sim[i][j] = ya_i^T M yb_j` on row-normalized
/// features. With `M = I` the diagonal equals `inner_matching` exactly (same
/// normalization and same accumulation order).
pub fn bilinear_matching(ya: &Mat, yb: &Mat, m: &Mat) -> Result<Mat> {
    if ya.cols() != yb.cols() {
        return Err(Error::validation("bilinear matching: feature dims differ"));
    }
    if m.rows() != ya.cols() || m.cols() != ya.cols() {
        return Err(Error::validation(format!(
            "bilinear matrix must be {0}x{0}, got {1}x{2}",
            ya.cols(),
            m.rows(),
            m.cols()
        )));
    }
    let (na, _) = normalize_rows(ya);
    let (nb, _) = normalize_rows(yb);
    Ok(na.matmul(m).matmul_nt(&nb))
}

/// Intermediates of a head forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub flat: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub probs: [f64; 2],
}

/// Head forward: `p = softmax(W2 relu(W1 flat(match)))`.
///
/// `probs[1]` is the matching-class probability.
pub fn classify_head(match_out: &MatchOutput, head: &HeadParams) -> Result<[f64; 2]> {
    Ok(classify_head_cached(match_out, head)?.probs)
}

pub fn classify_head_cached(match_out: &MatchOutput, head: &HeadParams) -> Result<HeadCache> {
    let flat = match_out.flat();
    if flat.len() != head.w1.cols() {
        return Err(Error::validation(format!(
            "head expects {} inputs, match output has {}",
            head.w1.cols(),
            flat.len()
        )));
    }
    let hidden_pre: Vec<f64> = (0..head.w1.rows()).map(|i| dot(head.w1.row(i), flat)).collect();
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
    let logits: Vec<f64> = (0..2).map(|i| dot(head.w2.row(i), &hidden)).collect();
    let p = softmax_unchecked(&logits);
    Ok(HeadCache {
        flat: flat.to_vec(),
        hidden_pre,
        hidden,
        probs: [p[0], p[1]],
    })
}

/// Backward through the head given the gradient on the two logits. Returns
/// `(grad_w1, grad_w2, grad_flat)`.
pub fn head_backward(head: &HeadParams, cache: &HeadCache, g_logits: [f64; 2]) -> (Mat, Mat, Vec<f64>) {
    let h_head = head.w2.cols();
    let mut grad_w2 = Mat::zeros(2, h_head);
    for i in 0..2 {
        for j in 0..h_head {
            grad_w2.set(i, j, g_logits[i] * cache.hidden[j]);
        }
    }
    let mut g_hidden = vec![0.0; h_head];
    for (j, g) in g_hidden.iter_mut().enumerate() {
        *g = g_logits[0] * head.w2.get(0, j) + g_logits[1] * head.w2.get(1, j);
    }
    for (g, &pre) in g_hidden.iter_mut().zip(&cache.hidden_pre) {
        if pre <= 0.0 {
            *g = 0.0;
        }
    }
    let flat_dim = head.w1.cols();
    let mut grad_w1 = Mat::zeros(h_head, flat_dim);
    for i in 0..h_head {
        if g_hidden[i] == 0.0 {
            continue;
        }
        let row = grad_w1.row_mut(i);
        for (r, &f) in row.iter_mut().zip(&cache.flat) {
            *r = g_hidden[i] * f;
        }
    }
    let mut grad_flat = vec![0.0; flat_dim];
    for i in 0..h_head {
        if g_hidden[i] == 0.0 {
            continue;
        }
        for (g, &w) in grad_flat.iter_mut().zip(head.w1.row(i)) {
            *g += g_hidden[i] * w;
        }
    }
    (grad_w1, grad_w2, grad_flat)
}

/// Probability clamp applied before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Mean regularized cross-entropy over a batch.
///
/// `p_match[k]` is the matching-class probability for pair `k`; labels are
/// 1 for matching pairs. `theta_sq_norm` is the squared L2 norm of all
/// trainable parameters; the regularizer `gamma * theta_sq_norm` is added
/// once, outside the mean.
pub fn pair_loss(p_match: &[f64], labels: &[u8], theta_sq_norm: f64, gamma: f64) -> Result<f64> {
    if p_match.len() != labels.len() {
        return Err(Error::validation("probability and label batches differ in length"));
    }
    if p_match.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    if gamma < 0.0 {
        return Err(Error::validation("regularization weight must be nonnegative"));
    }
    let mut total = 0.0;
    for (&p, &label) in p_match.iter().zip(labels) {
        if label > 1 {
            return Err(Error::validation(format!("label must be 0 or 1, got {label}")));
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= if label == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(total / p_match.len() as f64 + gamma * theta_sq_norm)
}

// --- matching-layer backward passes ------------------------------------

/// Gradient of row normalization: given the gradient on the normalized rows,
/// return the gradient on the raw rows. Zero rows get zero gradient.
pub fn normalize_rows_backward(normalized: &Mat, norms: &[f64], g_normalized: &Mat) -> Mat {
    let mut out = Mat::zeros(normalized.rows(), normalized.cols());
    for i in 0..normalized.rows() {
        if norms[i] == 0.0 {
            continue;
        }
        let nh = normalized.row(i);
        let g = g_normalized.row(i);
        let inner = dot(nh, g);
        for (o, (&gv, &nv)) in out.row_mut(i).iter_mut().zip(g.iter().zip(nh)) {
            *o = (gv - inner * nv) / norms[i];
        }
    }
    out
}

/// Backward through inner matching. Returns `(g_ya, g_yb)` on the raw
/// (unnormalized) feature maps.
pub fn inner_matching_backward(ya: &Mat, yb: &Mat, g_sim: &[f64]) -> (Mat, Mat) {
    let (na, norms_a) = normalize_rows(ya);
    let (nb, norms_b) = normalize_rows(yb);
    let mut g_na = Mat::zeros(na.rows(), na.cols());
    let mut g_nb = Mat::zeros(nb.rows(), nb.cols());
    for i in 0..na.rows() {
        for ((ga, gb), (&a, &b)) in g_na
            .row_mut(i)
            .iter_mut()
            .zip(g_nb.row_mut(i).iter_mut())
            .zip(na.row(i).iter().zip(nb.row(i)))
        {
            *ga = g_sim[i] * b;
            *gb = g_sim[i] * a;
        }
    }
    (
        normalize_rows_backward(&na, &norms_a, &g_na),
        normalize_rows_backward(&nb, &norms_b, &g_nb),
    )
}

/// Backward through bilinear matching. Returns `(g_ya, g_yb, grad_m)`.
pub fn bilinear_matching_backward(ya: &Mat, yb: &Mat, m: &Mat, g_sim: &Mat) -> (Mat, Mat, Mat) {
    let (na, norms_a) = normalize_rows(ya);
    let (nb, norms_b) = normalize_rows(yb);
    let grad_m = na.matmul_tn(&g_sim.matmul(&nb));
    let g_na = g_sim.matmul(&nb).matmul_nt(m);
    let g_nb = g_sim.matmul_tn(&na.matmul(m));
    (
        normalize_rows_backward(&na, &norms_a, &g_na),
        normalize_rows_backward(&nb, &norms_b, &g_nb),
        grad_m,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{seeded_rng, uniform_mat};

    #[test]
    fn self_match_is_all_ones() {
        let y = uniform_mat(&mut seeded_rng(1), 4, 3, 0.5, 1.5);
        let sims = inner_matching(&y, &y).unwrap();
        for s in sims {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_rows_match_to_zero() {
        let mut ya = Mat::zeros(2, 2);
        ya.set(0, 0, 2.0);
        ya.set(1, 1, 3.0);
        let mut yb = Mat::zeros(2, 2);
        yb.set(0, 1, 5.0);
        yb.set(1, 0, 0.5);
        let sims = inner_matching(&ya, &yb).unwrap();
        assert_eq!(sims, vec![0.0, 0.0]);
    }

    #[test]
    fn inner_matches_distance_identity() {
        // sim = 1 - ||a_hat - b_hat||^2 / 2 on normalized rows
        let ya = uniform_mat(&mut seeded_rng(2), 5, 4, -1.0, 1.0);
        let yb = uniform_mat(&mut seeded_rng(3), 5, 4, -1.0, 1.0);
        let sims = inner_matching(&ya, &yb).unwrap();
        let (na, _) = normalize_rows(&ya);
        let (nb, _) = normalize_rows(&yb);
        for i in 0..5 {
            let dist_sq: f64 = na
                .row(i)
                .iter()
                .zip(nb.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            assert!((sims[i] - (1.0 - dist_sq / 2.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn inner_scale_invariance() {
        let ya = uniform_mat(&mut seeded_rng(4), 4, 3, -1.0, 1.0);
        let yb = uniform_mat(&mut seeded_rng(5), 4, 3, -1.0, 1.0);
        let base = inner_matching(&ya, &yb).unwrap();
        let scaled = inner_matching(&ya.scale(37.5), &yb).unwrap();
        for (a, b) in base.iter().zip(&scaled) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn inner_is_symmetric() {
        let ya = uniform_mat(&mut seeded_rng(6), 4, 3, -1.0, 1.0);
        let yb = uniform_mat(&mut seeded_rng(7), 4, 3, -1.0, 1.0);
        let ab = inner_matching(&ya, &yb).unwrap();
        let ba = inner_matching(&yb, &ya).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_identity_diagonal_equals_inner_exactly() {
        let ya = uniform_mat(&mut seeded_rng(8), 6, 4, -1.0, 1.0);
        let yb = uniform_mat(&mut seeded_rng(9), 6, 4, -1.0, 1.0);
        let inner = inner_matching(&ya, &yb).unwrap();
        let bil = bilinear_matching(&ya, &yb, &Mat::identity(4)).unwrap();
        for i in 0..6 {
            assert_eq!(bil.get(i, i), inner[i]);
        }
    }

    #[test]
    fn bilinear_zero_matrix_gives_zero() {
        let ya = uniform_mat(&mut seeded_rng(10), 3, 2, -1.0, 1.0);
        let yb = uniform_mat(&mut seeded_rng(11), 3, 2, -1.0, 1.0);
        let bil = bilinear_matching(&ya, &yb, &Mat::zeros(2, 2)).unwrap();
        assert_eq!(bil.max_abs(), 0.0);
    }

    #[test]
    fn bilinear_matches_recomputation() {
        let ya = uniform_mat(&mut seeded_rng(12), 4, 3, -1.0, 1.0);
        let yb = uniform_mat(&mut seeded_rng(13), 4, 3, -1.0, 1.0);
        let m = uniform_mat(&mut seeded_rng(14), 3, 3, -1.0, 1.0);
        let bil = bilinear_matching(&ya, &yb, &m).unwrap();
        let (na, _) = normalize_rows(&ya);
        let (nb, _) = normalize_rows(&yb);
        for i in 0..4 {
            for j in 0..4 {
                let mut expect = 0.0;
                for a in 0..3 {
                    for b in 0..3 {
                        expect += na.get(i, a) * m.get(a, b) * nb.get(j, b);
                    }
                }
                assert!((bil.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_transpose_symmetry() {
        let ya = uniform_mat(&mut seeded_rng(15), 4, 3, -1.0, 1.0);
        let yb = uniform_mat(&mut seeded_rng(16), 4, 3, -1.0, 1.0);
        let m = uniform_mat(&mut seeded_rng(17), 3, 3, -1.0, 1.0);
        let ab = bilinear_matching(&ya, &yb, &m).unwrap();
        let ba_t = bilinear_matching(&yb, &ya, &m.transpose()).unwrap().transpose();
        assert!(ab.sub(&ba_t).max_abs() < 1e-12);
    }

    #[test]
    fn zero_logits_give_half_half() {
        let head = HeadParams {
            w1: Mat::zeros(4, 3),
            w2: Mat::zeros(2, 4),
            m: None,
        };
        let p = classify_head(&MatchOutput::Inner(vec![0.3, -0.2, 0.9]), &head).unwrap();
        assert_eq!(p, [0.5, 0.5]);
    }

    #[test]
    fn head_rejects_dimension_mismatch() {
        let head = HeadParams {
            w1: Mat::zeros(4, 3),
            w2: Mat::zeros(2, 4),
            m: None,
        };
        assert!(classify_head(&MatchOutput::Inner(vec![0.0; 5]), &head).is_err());
    }

    #[test]
    fn loss_of_uninformative_probability_is_ln_two() {
        let loss = pair_loss(&[0.5, 0.5], &[0, 1], 0.0, 0.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_of_perfect_prediction_is_tiny() {
        let loss = pair_loss(&[1.0, 0.0], &[1, 0], 0.0, 0.0).unwrap();
        assert!(loss >= 0.0 && loss <= 1e-11);
    }

    #[test]
    fn loss_matches_scalar_recomputation() {
        let probs = [0.9, 0.2, 0.65, 0.5];
        let labels = [1u8, 0, 1, 0];
        let sq_norm = 3.7;
        let gamma = 0.01;
        let loss = pair_loss(&probs, &labels, sq_norm, gamma).unwrap();
        let mut expect = 0.0;
        for (p, l) in probs.iter().zip(&labels) {
            expect -= if *l == 1 { p.ln() } else { (1.0 - p).ln() };
        }
        expect = expect / 4.0 + gamma * sq_norm;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_labels() {
        assert!(pair_loss(&[0.5], &[2], 0.0, 0.0).is_err());
    }

    #[test]
    fn loss_decreases_toward_label() {
        let worse = pair_loss(&[0.6], &[1], 0.0, 0.0).unwrap();
        let better = pair_loss(&[0.9], &[1], 0.0, 0.0).unwrap();
        assert!(better < worse);
        assert!(better >= 0.0);
    }
}
