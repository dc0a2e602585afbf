//! Clinical-sequence memory: input/output embeddings, per-ROI attention over
//! memory slots, context retrieval, and the stacked multi-hop forward and
//! backward passes.

use crate::chebnet;
use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::model::{Activation, ModelConfig, ModelGrads, ModelParams};
use crate::numerics::rng::{gaussian_mat, uniform_mat, SeededRng};
use crate::numerics::{softmax_unchecked, Mat};

/// One acquisition's clinical history: `t` memory slots of `D` binary
/// features, oldest first, with all-zero padding rows at the front.
#[derive(Debug, Clone)]
pub struct ClinicalSequence {
    s: Mat,
    pad_count: usize,
}

impl ClinicalSequence {
    /// Wrap a `t x D` slot matrix. The first `pad_count` rows must be zero.
    pub fn new(s: Mat, pad_count: usize) -> Result<Self> {
        if pad_count > s.rows() {
            return Err(Error::validation(format!(
                "pad_count {pad_count} exceeds {} slots",
                s.rows()
            )));
        }
        s.check_finite("clinical sequence")?;
        for i in 0..pad_count {
            if s.row(i).iter().any(|&v| v != 0.0) {
                return Err(Error::validation(format!("padded slot {i} is not all-zero")));
            }
        }
        Ok(ClinicalSequence { s, pad_count })
    }

    pub fn slots(&self) -> &Mat {
        &self.s
    }

    /// Memory size `t`.
    pub fn t(&self) -> usize {
        self.s.rows()
    }

    /// Binary feature dimension `D`.
    pub fn feature_dim(&self) -> usize {
        self.s.cols()
    }

    pub fn pad_count(&self) -> usize {
        self.pad_count
    }
}

/// Shared memory embeddings and the per-hop linear maps.
///
/// `a` and `b` are single matrices used by every hop (layer-wise tying); `h`
/// holds one `d x d` update map per hop.
#[derive(Debug, Clone)]
pub struct MemoryParams {
    pub a: Mat,
    pub b: Mat,
    pub h: Vec<Mat>,
}

impl MemoryParams {
    /// `a`, `b` fan-scaled uniform; each `h` starts at identity plus small
    /// noise so the first hops behave like residual updates.
    pub fn init(d: usize, feature_dim: usize, hops: usize, rng: &mut SeededRng) -> Self {
        let s = (6.0 / (d + feature_dim) as f64).sqrt();
        let a = uniform_mat(rng, d, feature_dim, -s, s);
        let b = uniform_mat(rng, d, feature_dim, -s, s);
        let h = (0..hops)
            .map(|_| {
                let mut m = gaussian_mat(rng, d, d, 0.0, 0.01);
                for i in 0..d {
                    m.set(i, i, m.get(i, i) + 1.0);
                }
                m
            })
            .collect();
        MemoryParams { a, b, h }
    }

    /// All-zero embeddings (memory ablation); `h` still starts at identity.
    pub fn zeros(d: usize, feature_dim: usize, hops: usize) -> Self {
        MemoryParams {
            a: Mat::zeros(d, feature_dim),
            b: Mat::zeros(d, feature_dim),
            h: (0..hops).map(|_| Mat::identity(d)).collect(),
        }
    }
}

/// Per-hop attention matrices in `t x n` layout (memory position by ROI);
/// every ROI column sums to 1.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub per_hop: Vec<Mat>,
}

/// Embed a sequence into input memory `z = S A^T` and output memory
/// `e = S B^T`, one row per slot. Padded slots embed to zero.
pub fn read_memories(seq: &ClinicalSequence, a: &Mat, b: &Mat) -> Result<(Mat, Mat)> {
    if a.cols() != seq.feature_dim() || b.cols() != seq.feature_dim() {
        return Err(Error::validation(format!(
            "embedding width {} / {} does not match feature dimension {}",
            a.cols(),
            b.cols(),
            seq.feature_dim()
        )));
    }
    if a.rows() != b.rows() {
        return Err(Error::validation("input and output embeddings must share d"));
    }
    Ok((seq.slots().matmul_nt(a), seq.slots().matmul_nt(b)))
}

/// Attention weights `alpha[i][j] = softmax_j <y_i, z_j>`: each ROI row is a
/// probability vector over memory slots.
pub fn attend(y: &Mat, z: &Mat) -> Result<Mat> {
    attend_masked(y, z, 0)
}

/// `attend` with the first `pad_count` slots masked out of the softmax.
/// A fully padded sequence (`pad_count >= t`) falls back to unmasked
/// attention so the weights stay defined.
pub fn attend_masked(y: &Mat, z: &Mat, pad_count: usize) -> Result<Mat> {
    if y.cols() != z.cols() {
        return Err(Error::validation(format!(
            "attention requires matching embedding dims, got {} and {}",
            y.cols(),
            z.cols()
        )));
    }
    y.check_finite("attention ROI features")?;
    z.check_finite("attention memory")?;
    let mut logits = y.matmul_nt(z);
    let t = z.rows();
    if pad_count > 0 && pad_count < t {
        for i in 0..logits.rows() {
            for j in 0..pad_count {
                logits.set(i, j, f64::NEG_INFINITY);
            }
        }
    }
    let mut alpha = Mat::zeros(logits.rows(), t);
    for i in 0..logits.rows() {
        let row = softmax_unchecked(logits.row(i));
        alpha.row_mut(i).copy_from_slice(&row);
    }
    Ok(alpha)
}

/// Context rows `c_i = sum_j alpha[i][j] e_j` — a convex combination of
/// output-memory rows per ROI.
pub fn retrieve_context(alpha: &Mat, e: &Mat) -> Result<Mat> {
    if alpha.cols() != e.rows() {
        return Err(Error::validation(format!(
            "context: {} attention columns vs {} memory slots",
            alpha.cols(),
            e.rows()
        )));
    }
    for i in 0..alpha.rows() {
        let sum: f64 = alpha.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::validation(format!(
                "attention row {i} sums to {sum}, expected 1"
            )));
        }
    }
    Ok(alpha.matmul(e))
}

/// Hop update `out_i = H y_i + c_i`.
pub fn hop_update(y: &Mat, c: &Mat, h: &Mat) -> Result<Mat> {
    if y.rows() != c.rows() || y.cols() != c.cols() {
        return Err(Error::validation("hop update: feature and context shapes differ"));
    }
    if h.rows() != h.cols() || h.cols() != y.cols() {
        return Err(Error::validation(format!(
            "hop update: H must be {0}x{0}, got {1}x{2}",
            y.cols(),
            h.rows(),
            h.cols()
        )));
    }
    Ok(y.matmul_nt(h).add(c))
}

/// Intermediates of one hop, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HopCache {
    /// Chebyshev basis terms of the hop input (`basis[0]` is the input).
    pub basis: Vec<Mat>,
    /// Pre-activation convolution output.
    pub conv_out: Mat,
    /// Activated ROI features fed to attention and the hop update.
    pub activated: Mat,
    /// `n x t` attention weights.
    pub alpha: Mat,
    /// Retrieved context.
    pub context: Mat,
    /// Hop output.
    pub output: Mat,
}

/// Full forward intermediates for one acquisition.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub z: Mat,
    pub e: Mat,
    pub hops: Vec<HopCache>,
}

impl ForwardCache {
    pub fn output(&self) -> &Mat {
        &self.hops.last().expect("at least one hop").output
    }

    pub fn trace(&self) -> AttentionTrace {
        AttentionTrace {
            per_hop: self.hops.iter().map(|h| h.alpha.transpose()).collect(),
        }
    }
}

/// The L-hop forward pass: graph convolution, activation, memory attention,
/// context retrieval, and linear update per hop. Returns the final feature
/// map and the per-hop attention trace.
pub fn memgcn_forward(
    x: &Mat,
    seq: &ClinicalSequence,
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SpatialGraph,
) -> Result<(Mat, AttentionTrace)> {
    let cache = memgcn_forward_cached(x, seq, params, config, graph)?;
    let trace = cache.trace();
    Ok((cache.hops.last().expect("hops >= 1").output.clone(), trace))
}

/// Forward pass that keeps every intermediate for `memgcn_backward`.
pub fn memgcn_forward_cached(
    x: &Mat,
    seq: &ClinicalSequence,
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SpatialGraph,
) -> Result<ForwardCache> {
    if x.rows() != graph.n() || x.cols() != graph.n() {
        return Err(Error::validation(format!(
            "connectivity must be {0}x{0} to match the graph, got {1}x{2}",
            graph.n(),
            x.rows(),
            x.cols()
        )));
    }
    if seq.feature_dim() != config.feature_dim || seq.t() != config.t {
        return Err(Error::validation(format!(
            "sequence is {}x{}, model expects {}x{}",
            seq.t(),
            seq.feature_dim(),
            config.t,
            config.feature_dim
        )));
    }
    let (z, e) = read_memories(seq, &params.memory.a, &params.memory.b)?;
    let pad = if config.mask_padding { seq.pad_count() } else { 0 };

    let mut hops = Vec::with_capacity(params.banks.len());
    let mut input = x.clone();
    for (l, bank) in params.banks.iter().enumerate() {
        let h_map = &params.memory.h[config.hop_map_index(l)];
        if input.cols() != bank.f_in {
            return Err(Error::validation(format!(
                "hop input has {} channels, filter bank expects {}",
                input.cols(),
                bank.f_in
            )));
        }
        let basis = chebnet::cheb_basis_apply(&graph.delta_tilde, &input, bank.order)?;
        let conv_out = chebnet::forward_from_basis(bank, &basis);
        let activated = match config.activation {
            Activation::Relu => {
                let mut m = conv_out.clone();
                for v in m.as_mut_slice() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                m
            }
            Activation::None => conv_out.clone(),
        };
        let alpha = attend_masked(&activated, &z, pad)?;
        let context = alpha.matmul(&e);
        let output = hop_update(&activated, &context, h_map)?;
        input = output.clone();
        hops.push(HopCache {
            basis,
            conv_out,
            activated,
            alpha,
            context,
            output,
        });
    }
    Ok(ForwardCache { z, e, hops })
}

/// Backpropagate `g_out` (gradient on the final feature map) through all
/// hops, accumulating parameter gradients in place.
pub fn memgcn_backward(
    seq: &ClinicalSequence,
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SpatialGraph,
    cache: &ForwardCache,
    g_out: &Mat,
    grads: &mut ModelGrads,
) {
    let hops = params.banks.len();
    let mut g_z = Mat::zeros(cache.z.rows(), cache.z.cols());
    let mut g_e = Mat::zeros(cache.e.rows(), cache.e.cols());
    let mut g_h = g_out.clone();

    for l in (0..hops).rev() {
        let hop = &cache.hops[l];
        let h_idx = config.hop_map_index(l);

        // output = activated H^T + context
        grads.memory.h[h_idx].add_scaled(&g_h.matmul_tn(&hop.activated), 1.0);
        let mut g_activated = g_h.matmul(&params.memory.h[h_idx]);
        let g_context = g_h; // moved

        // context = alpha e
        let g_alpha = g_context.matmul_nt(&cache.e);
        g_e.add_scaled(&hop.alpha.matmul_tn(&g_context), 1.0);

        // alpha = softmax rows of (activated z^T)
        let mut g_logits = Mat::zeros(g_alpha.rows(), g_alpha.cols());
        for i in 0..g_alpha.rows() {
            let a_row = hop.alpha.row(i);
            let g_row = g_alpha.row(i);
            let inner: f64 = a_row.iter().zip(g_row).map(|(a, g)| a * g).sum();
            for (j, out) in g_logits.row_mut(i).iter_mut().enumerate() {
                *out = a_row[j] * (g_row[j] - inner);
            }
        }
        g_activated.add_scaled(&g_logits.matmul(&cache.z), 1.0);
        g_z.add_scaled(&g_logits.matmul_tn(&hop.activated), 1.0);

        // activation
        let g_conv = match config.activation {
            Activation::Relu => {
                let mut g = g_activated;
                for (g_v, &pre) in g.as_mut_slice().iter_mut().zip(hop.conv_out.as_slice()) {
                    if pre <= 0.0 {
                        *g_v = 0.0;
                    }
                }
                g
            }
            Activation::None => g_activated,
        };

        // graph convolution
        if l == 0 {
            // no gradient needed with respect to the raw connectivity input
            for (p, term) in hop.basis.iter().enumerate() {
                grads.banks[l][p].add_scaled(&term.matmul_tn(&g_conv), 1.0);
            }
            g_h = Mat::zeros(1, 1); // unused past this point
        } else {
            let (grad_theta, g_input) = chebnet::backward_from_basis(
                &params.banks[l],
                &graph.delta_tilde,
                &hop.basis,
                &g_conv,
            );
            for (acc, g) in grads.banks[l].iter_mut().zip(&grad_theta) {
                acc.add_scaled(g, 1.0);
            }
            g_h = g_input;
        }
    }

    // z = S A^T, e = S B^T
    grads.memory.a.add_scaled(&g_z.matmul_tn(seq.slots()), 1.0);
    grads.memory.b.add_scaled(&g_e.matmul_tn(seq.slots()), 1.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{seeded_rng, uniform_mat};

    fn toy_sequence(t: usize, dim: usize, seed: u64) -> ClinicalSequence {
        let mut rng = seeded_rng(seed);
        let mut s = Mat::zeros(t, dim);
        for i in 0..t {
            for j in 0..dim {
                if rand::Rng::gen_bool(&mut rng, 0.4) {
                    s.set(i, j, 1.0);
                }
            }
        }
        ClinicalSequence::new(s, 0).unwrap()
    }

    #[test]
    fn zero_sequence_embeds_to_zero() {
        let seq = ClinicalSequence::new(Mat::zeros(4, 6), 4).unwrap();
        let a = uniform_mat(&mut seeded_rng(1), 3, 6, -1.0, 1.0);
        let b = uniform_mat(&mut seeded_rng(2), 3, 6, -1.0, 1.0);
        let (z, e) = read_memories(&seq, &a, &b).unwrap();
        assert_eq!(z.max_abs(), 0.0);
        assert_eq!(e.max_abs(), 0.0);
    }

    #[test]
    fn identity_embedding_preserves_one_hot_rows() {
        let mut s = Mat::zeros(3, 3);
        s.set(0, 1, 1.0);
        s.set(1, 0, 1.0);
        s.set(2, 2, 1.0);
        let seq = ClinicalSequence::new(s.clone(), 0).unwrap();
        let eye = Mat::identity(3);
        let (z, _) = read_memories(&seq, &eye, &eye).unwrap();
        assert_eq!(z.as_slice(), s.as_slice());
    }

    #[test]
    fn read_memories_matches_recomputation() {
        let seq = toy_sequence(5, 8, 3);
        let a = uniform_mat(&mut seeded_rng(4), 4, 8, -1.0, 1.0);
        let b = uniform_mat(&mut seeded_rng(5), 4, 8, -1.0, 1.0);
        let (z, e) = read_memories(&seq, &a, &b).unwrap();
        for j in 0..5 {
            for k in 0..4 {
                let zx: f64 = (0..8).map(|m| seq.slots().get(j, m) * a.get(k, m)).sum();
                let ex: f64 = (0..8).map(|m| seq.slots().get(j, m) * b.get(k, m)).sum();
                assert!((z.get(j, k) - zx).abs() < 1e-12);
                assert!((e.get(j, k) - ex).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_nonzero_padding() {
        let mut s = Mat::zeros(3, 2);
        s.set(0, 1, 1.0);
        assert!(ClinicalSequence::new(s, 1).is_err());
    }

    #[test]
    fn equal_logits_give_uniform_attention() {
        let y = Mat::zeros(4, 3);
        let z = uniform_mat(&mut seeded_rng(6), 5, 3, -1.0, 1.0);
        let alpha = attend(&y, &z).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                assert!((alpha.get(i, j) - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dominant_logit_saturates() {
        // one slot aligned with y and scaled up by 50 in logit space
        let mut y = Mat::zeros(1, 2);
        y.set(0, 0, 1.0);
        let mut z = Mat::zeros(3, 2);
        z.set(1, 0, 50.0);
        let alpha = attend(&y, &z).unwrap();
        // the competing weights are ~e^-50, far below one ulp of 1.0
        assert!(alpha.get(0, 1) >= 1.0 - 1e-15);
        assert!(alpha.get(0, 1) <= 1.0);
    }

    #[test]
    fn attention_matches_hand_expanded_softmax() {
        let y = uniform_mat(&mut seeded_rng(7), 2, 3, -1.0, 1.0);
        let z = uniform_mat(&mut seeded_rng(8), 3, 3, -1.0, 1.0);
        let alpha = attend(&y, &z).unwrap();
        for i in 0..2 {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..3).map(|k| y.get(i, k) * z.get(j, k)).sum())
                .collect();
            let exps: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
            let total: f64 = exps.iter().sum();
            for j in 0..3 {
                assert!((alpha.get(i, j) - exps[j] / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_attention_zeroes_padded_slots() {
        let y = uniform_mat(&mut seeded_rng(9), 3, 2, -1.0, 1.0);
        let z = uniform_mat(&mut seeded_rng(10), 4, 2, -1.0, 1.0);
        let alpha = attend_masked(&y, &z, 2).unwrap();
        for i in 0..3 {
            assert_eq!(alpha.get(i, 0), 0.0);
            assert_eq!(alpha.get(i, 1), 0.0);
            let sum: f64 = alpha.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_attention_selects_memory_row() {
        let mut alpha = Mat::zeros(2, 3);
        alpha.set(0, 2, 1.0);
        alpha.set(1, 0, 1.0);
        let e = uniform_mat(&mut seeded_rng(11), 3, 4, -1.0, 1.0);
        let c = retrieve_context(&alpha, &e).unwrap();
        assert_eq!(c.row(0), e.row(2));
        assert_eq!(c.row(1), e.row(0));
    }

    #[test]
    fn zero_memory_gives_zero_context() {
        let mut alpha = Mat::zeros(2, 2);
        for i in 0..2 {
            alpha.set(i, 0, 0.5);
            alpha.set(i, 1, 0.5);
        }
        let c = retrieve_context(&alpha, &Mat::zeros(2, 3)).unwrap();
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn context_rejects_unnormalized_rows() {
        let mut alpha = Mat::zeros(1, 2);
        alpha.set(0, 0, 0.9);
        assert!(retrieve_context(&alpha, &Mat::zeros(2, 2)).is_err());
    }

    #[test]
    fn identity_hop_with_zero_context() {
        let y = uniform_mat(&mut seeded_rng(12), 3, 2, -1.0, 1.0);
        let out = hop_update(&y, &Mat::zeros(3, 2), &Mat::identity(2)).unwrap();
        for (a, b) in out.as_slice().iter().zip(y.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_features_pass_context_through() {
        let c = uniform_mat(&mut seeded_rng(13), 3, 2, -1.0, 1.0);
        let h = uniform_mat(&mut seeded_rng(14), 2, 2, -1.0, 1.0);
        let out = hop_update(&Mat::zeros(3, 2), &c, &h).unwrap();
        assert_eq!(out.as_slice(), c.as_slice());
    }

    #[test]
    fn hop_update_matches_recomputation() {
        let y = uniform_mat(&mut seeded_rng(15), 4, 3, -1.0, 1.0);
        let c = uniform_mat(&mut seeded_rng(16), 4, 3, -1.0, 1.0);
        let h = uniform_mat(&mut seeded_rng(17), 3, 3, -1.0, 1.0);
        let out = hop_update(&y, &c, &h).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let expect: f64 =
                    (0..3).map(|k| h.get(j, k) * y.get(i, k)).sum::<f64>() + c.get(i, j);
                assert!((out.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }
}
