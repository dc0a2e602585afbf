//! Model assembly: the full parameter set, the pair-level forward pass
//! (two feature-map branches, matching, head), its backward pass, and a
//! whole-model gradient check.

use serde::{Deserialize, Serialize};

use crate::chebnet::ChebFilterBank;
use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::matching::{
    bilinear_matching, bilinear_matching_backward, classify_head_cached, head_backward,
    inner_matching, inner_matching_backward, pair_loss, HeadCache, HeadParams, MatchKind,
    MatchOutput,
};
use crate::memory::{
    memgcn_backward, memgcn_forward_cached, ClinicalSequence, ForwardCache, MemoryParams,
};
use crate::numerics::rng::SeededRng;
use crate::numerics::{grad_check, Mat};

/// Nonlinearity applied to each hop's convolution output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl std::str::FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "none" => Ok(Activation::None),
            other => Err(Error::validation(format!(
                "unknown activation `{other}` (expected relu or none)"
            ))),
        }
    }
}

/// Dimensions and switches that fully determine the model architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Vertices in the spatial graph (and rows of each connectivity matrix).
    pub n_roi: usize,
    /// Binary clinical feature dimension `D`.
    pub feature_dim: usize,
    /// Memory slots per sequence.
    pub t: usize,
    /// Embedding dimension: both the convolution output width and the memory
    /// dimension (they attend to each other, so they must be equal).
    pub d: usize,
    /// Chebyshev polynomial order `r`.
    pub order: usize,
    /// Number of hops `L`.
    pub hops: usize,
    /// Hidden units in the classification head.
    pub h_head: usize,
    pub matching: MatchKind,
    pub activation: Activation,
    /// Mask padded memory slots out of the attention softmax.
    pub mask_padding: bool,
    /// Freeze both memory embeddings at zero (pure-GCN baseline).
    pub ablate_memory: bool,
    /// Share one hop-update map across all hops instead of one per hop.
    pub tie_hop_maps: bool,
    /// Divide each connectivity matrix by its max entry before the first hop.
    pub normalize_connectivity: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_roi", self.n_roi),
            ("feature_dim", self.feature_dim),
            ("t", self.t),
            ("d", self.d),
            ("order", self.order),
            ("hops", self.hops),
            ("h_head", self.h_head),
        ] {
            if v < 1 {
                return Err(Error::config(format!("{name} must be at least 1, got {v}")));
            }
        }
        Ok(())
    }

    /// Flattened matching-output dimension seen by the head.
    pub fn head_input_dim(&self) -> usize {
        match self.matching {
            MatchKind::Inner => self.n_roi,
            MatchKind::Bilinear => self.n_roi * self.n_roi,
        }
    }

    pub(crate) fn hop_map_count(&self) -> usize {
        if self.tie_hop_maps {
            1
        } else {
            self.hops
        }
    }

    /// Index into `memory.h` for a given hop (0 when the maps are tied).
    pub(crate) fn hop_map_index(&self, hop: usize) -> usize {
        if self.tie_hop_maps {
            0
        } else {
            hop
        }
    }
}

/// Every trainable parameter: per-hop filter banks, the shared memory
/// embeddings with their hop-update maps, and the head.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub banks: Vec<ChebFilterBank>,
    pub memory: MemoryParams,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut banks = Vec::with_capacity(config.hops);
        for hop in 0..config.hops {
            let f_in = if hop == 0 { config.n_roi } else { config.d };
            banks.push(ChebFilterBank::init(config.order, f_in, config.d, rng)?);
        }
        let memory = if config.ablate_memory {
            MemoryParams::zeros(config.d, config.feature_dim, config.hop_map_count())
        } else {
            MemoryParams::init(config.d, config.feature_dim, config.hop_map_count(), rng)
        };
        let head = HeadParams::init(
            config.head_input_dim(),
            config.h_head,
            config.matching,
            config.d,
            rng,
        )?;
        Ok(ModelParams { banks, memory, head })
    }

    /// All parameter matrices with stable names, in the canonical flat order.
    pub fn named_mats(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (l, bank) in self.banks.iter().enumerate() {
            for (p, theta) in bank.theta.iter().enumerate() {
                out.push((format!("theta.hop{l}.p{p}"), theta));
            }
        }
        out.push(("memory.A".to_string(), &self.memory.a));
        out.push(("memory.B".to_string(), &self.memory.b));
        for (l, h) in self.memory.h.iter().enumerate() {
            out.push((format!("memory.H.hop{l}"), h));
        }
        out.push(("head.W1".to_string(), &self.head.w1));
        out.push(("head.W2".to_string(), &self.head.w2));
        if let Some(m) = &self.head.m {
            out.push(("head.M".to_string(), m));
        }
        out
    }

    /// Overwrite parameters from matrices in `named_mats` order.
    pub fn copy_from_mats(&mut self, mats: &[Mat]) {
        let mut idx = 0;
        for bank in &mut self.banks {
            for theta in &mut bank.theta {
                *theta = mats[idx].clone();
                idx += 1;
            }
        }
        self.memory.a = mats[idx].clone();
        idx += 1;
        self.memory.b = mats[idx].clone();
        idx += 1;
        for h in &mut self.memory.h {
            *h = mats[idx].clone();
            idx += 1;
        }
        self.head.w1 = mats[idx].clone();
        idx += 1;
        self.head.w2 = mats[idx].clone();
        idx += 1;
        if let Some(m) = &mut self.head.m {
            *m = mats[idx].clone();
            idx += 1;
        }
        debug_assert_eq!(idx, mats.len());
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.named_mats()
            .iter()
            .map(|(_, m)| m.as_slice().len())
            .sum()
    }

    /// Squared L2 norm of all parameters (the `Theta` regularizer term).
    pub fn sq_l2(&self) -> f64 {
        self.named_mats()
            .iter()
            .map(|(_, m)| m.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_mats().iter().all(|(_, m)| m.is_finite())
    }

    /// Concatenate all parameters into one flat vector (canonical order).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, m) in self.named_mats() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }

    /// Overwrite all parameters from a flat vector (canonical order).
    pub fn copy_from_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::validation(format!(
                "flat parameter vector has {} entries, model has {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for (_, m) in self.named_mats_mut() {
            let len = m.as_slice().len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        Ok(())
    }

    pub fn named_mats_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = Vec::new();
        for (l, bank) in self.banks.iter_mut().enumerate() {
            for (p, theta) in bank.theta.iter_mut().enumerate() {
                out.push((format!("theta.hop{l}.p{p}"), theta));
            }
        }
        out.push(("memory.A".to_string(), &mut self.memory.a));
        out.push(("memory.B".to_string(), &mut self.memory.b));
        for (l, h) in self.memory.h.iter_mut().enumerate() {
            out.push((format!("memory.H.hop{l}"), h));
        }
        out.push(("head.W1".to_string(), &mut self.head.w1));
        out.push(("head.W2".to_string(), &mut self.head.w2));
        if let Some(m) = &mut self.head.m {
            out.push(("head.M".to_string(), m));
        }
        out
    }
}

/// Logical parameter group of a named matrix: the per-hop coefficient
/// matrices collapse into one group per hop.
pub fn group_of(name: &str) -> String {
    if let Some(rest) = name.strip_prefix("theta.") {
        let hop = rest.split('.').next().unwrap_or(rest);
        format!("theta.{hop}")
    } else {
        name.to_string()
    }
}

/// Gradient accumulator mirroring [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub banks: Vec<Vec<Mat>>,
    pub memory: MemoryGrads,
    pub head: HeadGrads,
}

#[derive(Debug, Clone)]
pub struct MemoryGrads {
    pub a: Mat,
    pub b: Mat,
    pub h: Vec<Mat>,
}

#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub w1: Mat,
    pub w2: Mat,
    pub m: Option<Mat>,
}

impl ModelGrads {
    pub fn zeros_like(params: &ModelParams) -> Self {
        ModelGrads {
            banks: params.banks.iter().map(ChebFilterBank::zeros_like).collect(),
            memory: MemoryGrads {
                a: Mat::zeros(params.memory.a.rows(), params.memory.a.cols()),
                b: Mat::zeros(params.memory.b.rows(), params.memory.b.cols()),
                h: params
                    .memory
                    .h
                    .iter()
                    .map(|h| Mat::zeros(h.rows(), h.cols()))
                    .collect(),
            },
            head: HeadGrads {
                w1: Mat::zeros(params.head.w1.rows(), params.head.w1.cols()),
                w2: Mat::zeros(params.head.w2.rows(), params.head.w2.cols()),
                m: params
                    .head
                    .m
                    .as_ref()
                    .map(|m| Mat::zeros(m.rows(), m.cols())),
            },
        }
    }

    /// `self += other`, matrix by matrix.
    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (mine, theirs) in self.banks.iter_mut().zip(&other.banks) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                a.add_scaled(b, 1.0);
            }
        }
        self.memory.a.add_scaled(&other.memory.a, 1.0);
        self.memory.b.add_scaled(&other.memory.b, 1.0);
        for (a, b) in self.memory.h.iter_mut().zip(&other.memory.h) {
            a.add_scaled(b, 1.0);
        }
        self.head.w1.add_scaled(&other.head.w1, 1.0);
        self.head.w2.add_scaled(&other.head.w2, 1.0);
        if let (Some(a), Some(b)) = (&mut self.head.m, &other.head.m) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for (_, m) in self.named_mats_mut() {
            for v in m.as_mut_slice() {
                *v *= s;
            }
        }
    }

    /// `self += s * params` (used for the L2 regularizer gradient).
    pub fn add_params_scaled(&mut self, params: &ModelParams, s: f64) {
        let mats = params.named_mats();
        for ((_, g), (_, p)) in self.named_mats_mut().into_iter().zip(mats) {
            g.add_scaled(p, s);
        }
    }

    /// Gradient matrices in the same order and naming as
    /// [`ModelParams::named_mats`].
    pub fn named_mats(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (l, bank) in self.banks.iter().enumerate() {
            for (p, theta) in bank.iter().enumerate() {
                out.push((format!("theta.hop{l}.p{p}"), theta));
            }
        }
        out.push(("memory.A".to_string(), &self.memory.a));
        out.push(("memory.B".to_string(), &self.memory.b));
        for (l, h) in self.memory.h.iter().enumerate() {
            out.push((format!("memory.H.hop{l}"), h));
        }
        out.push(("head.W1".to_string(), &self.head.w1));
        out.push(("head.W2".to_string(), &self.head.w2));
        if let Some(m) = &self.head.m {
            out.push(("head.M".to_string(), m));
        }
        out
    }

    pub fn named_mats_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = Vec::new();
        for (l, bank) in self.banks.iter_mut().enumerate() {
            for (p, theta) in bank.iter_mut().enumerate() {
                out.push((format!("theta.hop{l}.p{p}"), theta));
            }
        }
        out.push(("memory.A".to_string(), &mut self.memory.a));
        out.push(("memory.B".to_string(), &mut self.memory.b));
        for (l, h) in self.memory.h.iter_mut().enumerate() {
            out.push((format!("memory.H.hop{l}"), h));
        }
        out.push(("head.W1".to_string(), &mut self.head.w1));
        out.push(("head.W2".to_string(), &mut self.head.w2));
        if let Some(m) = &mut self.head.m {
            out.push(("head.M".to_string(), m));
        }
        out
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, m) in self.named_mats() {
            out.extend_from_slice(m.as_slice());
        }
        out
    }
}

/// Scale a connectivity matrix by its largest entry when the config asks for
/// input normalization.
pub fn prepare_input(x: &Mat, config: &ModelConfig) -> Mat {
    if config.normalize_connectivity {
        let m = x.max_abs();
        if m > 0.0 {
            return x.scale(1.0 / m);
        }
    }
    x.clone()
}

/// Forward intermediates for one pair.
#[derive(Debug, Clone)]
pub struct PairCache {
    pub fwd_a: ForwardCache,
    pub fwd_b: ForwardCache,
    pub match_out: MatchOutput,
    pub head: HeadCache,
}

impl PairCache {
    pub fn prob_match(&self) -> f64 {
        self.head.probs[1]
    }
}

/// Run both branches, the matching layer, and the head for one pair of
/// prepared inputs.
pub fn pair_forward(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SpatialGraph,
    xa: &Mat,
    sa: &ClinicalSequence,
    xb: &Mat,
    sb: &ClinicalSequence,
) -> Result<PairCache> {
    let fwd_a = memgcn_forward_cached(xa, sa, params, config, graph)?;
    let fwd_b = memgcn_forward_cached(xb, sb, params, config, graph)?;
    let match_out = match_features(fwd_a.output(), fwd_b.output(), params, config)?;
    let head = classify_head_cached(&match_out, &params.head)?;
    Ok(PairCache {
        fwd_a,
        fwd_b,
        match_out,
        head,
    })
}

/// Matching layer on two final feature maps.
pub fn match_features(
    ya: &Mat,
    yb: &Mat,
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<MatchOutput> {
    match config.matching {
        MatchKind::Inner => Ok(MatchOutput::Inner(inner_matching(ya, yb)?)),
        MatchKind::Bilinear => {
            let m = params
                .head
                .m
                .as_ref()
                .ok_or_else(|| Error::config("bilinear matching requires the M matrix"))?;
            Ok(MatchOutput::Bilinear(bilinear_matching(ya, yb, m)?))
        }
    }
}

/// Cross-entropy gradient for one pair, accumulated into `grads`.
///
/// The gradient is of `-log p_target` (no regularizer; the caller adds
/// `2 gamma * params` at the batch level).
pub fn pair_backward(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SpatialGraph,
    sa: &ClinicalSequence,
    sb: &ClinicalSequence,
    cache: &PairCache,
    label: u8,
    grads: &mut ModelGrads,
) {
    let p = cache.head.probs;
    let target = usize::from(label == 1);
    let g_logits = [
        p[0] - if target == 0 { 1.0 } else { 0.0 },
        p[1] - if target == 1 { 1.0 } else { 0.0 },
    ];
    let (grad_w1, grad_w2, g_flat) = head_backward(&params.head, &cache.head, g_logits);
    grads.head.w1.add_scaled(&grad_w1, 1.0);
    grads.head.w2.add_scaled(&grad_w2, 1.0);

    let ya = cache.fwd_a.output();
    let yb = cache.fwd_b.output();
    let (g_ya, g_yb) = match (&cache.match_out, &params.head.m) {
        (MatchOutput::Inner(_), _) => inner_matching_backward(ya, yb, &g_flat),
        (MatchOutput::Bilinear(_), Some(m)) => {
            let g_sim = Mat::from_vec(ya.rows(), yb.rows(), g_flat).expect("head dims checked");
            let (g_ya, g_yb, grad_m) = bilinear_matching_backward(ya, yb, m, &g_sim);
            if let Some(gm) = &mut grads.head.m {
                gm.add_scaled(&grad_m, 1.0);
            }
            (g_ya, g_yb)
        }
        (MatchOutput::Bilinear(_), None) => unreachable!("bilinear cache without M"),
    };

    memgcn_backward(sa, params, config, graph, &cache.fwd_a, &g_ya, grads);
    memgcn_backward(sb, params, config, graph, &cache.fwd_b, &g_yb, grads);

    if config.ablate_memory {
        // embeddings are frozen at zero for the pure-GCN baseline
        for v in grads.memory.a.as_mut_slice() {
            *v = 0.0;
        }
        for v in grads.memory.b.as_mut_slice() {
            *v = 0.0;
        }
    }
}

/// Matching-class probabilities for a list of pairs, computing each
/// acquisition's feature map exactly once.
pub fn evaluate_pairs(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SpatialGraph,
    inputs: &[Mat],
    seqs: &[ClinicalSequence],
    pairs: &[(usize, usize)],
) -> Result<Vec<f64>> {
    let mut needed: Vec<usize> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    needed.sort_unstable();
    needed.dedup();

    let mut features: Vec<Option<Mat>> = vec![None; inputs.len()];
    for &idx in &needed {
        let fwd = memgcn_forward_cached(&inputs[idx], &seqs[idx], params, config, graph)?;
        features[idx] = Some(fwd.output().clone());
    }
    let mut probs = Vec::with_capacity(pairs.len());
    for &(a, b) in pairs {
        let ya = features[a].as_ref().expect("computed above");
        let yb = features[b].as_ref().expect("computed above");
        let match_out = match_features(ya, yb, params, config)?;
        let head = classify_head_cached(&match_out, &params.head)?;
        probs.push(head.probs[1]);
    }
    Ok(probs)
}

/// [`model_grad_check`] on a self-built random spatial graph (unit-cube
/// coordinates, 2-nearest-neighbor).
pub fn model_grad_check_default(
    config: &ModelConfig,
    step: f64,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    use crate::graph::{RoiCoordinates, SigmaPolicy};
    use rand::Rng;

    let mut rng = crate::numerics::seeded_rng(seed.wrapping_add(0x9e3779b9));
    let coords = RoiCoordinates::new(
        (0..config.n_roi)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect(),
    )?;
    let k = 2.min(config.n_roi.saturating_sub(1)).max(1);
    let graph = SpatialGraph::build(&coords, k, SigmaPolicy::MeanKthNeighbor, seed)?;
    model_grad_check(config, &graph, step, seed)
}

/// Check every analytic gradient of the full pair objective against central
/// differences on a randomly generated instance; returns the max relative
/// error per logical parameter group.
pub fn model_grad_check(
    config: &ModelConfig,
    graph: &SpatialGraph,
    step: f64,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    use crate::numerics::rng::{seeded_rng, uniform_mat};

    let mut rng = seeded_rng(seed);
    let n = config.n_roi;
    let params = ModelParams::init(config, &mut rng)?;

    // random symmetric nonnegative connectivity inputs
    let make_x = |rng: &mut SeededRng| {
        let raw = uniform_mat(rng, n, n, 0.0, 1.0);
        let mut x = Mat::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (raw.get(i, j) + raw.get(j, i));
                x.set(i, j, v);
                x.set(j, i, v);
            }
        }
        x
    };
    let xa = make_x(&mut rng);
    let xb = make_x(&mut rng);
    let make_seq = |rng: &mut SeededRng| {
        let mut s = Mat::zeros(config.t, config.feature_dim);
        for v in s.as_mut_slice() {
            if rand::Rng::gen_bool(rng, 0.4) {
                *v = 1.0;
            }
        }
        ClinicalSequence::new(s, 0).expect("no padding")
    };
    let sa = make_seq(&mut rng);
    let sb = make_seq(&mut rng);
    let label = 1u8;

    // analytic gradients
    let cache = pair_forward(&params, config, graph, &xa, &sa, &xb, &sb)?;
    let mut grads = ModelGrads::zeros_like(&params);
    pair_backward(&params, config, graph, &sa, &sb, &cache, label, &mut grads);

    let names: Vec<String> = params.named_mats().iter().map(|(n, _)| n.clone()).collect();
    let param_mats: Vec<Mat> = params.named_mats().iter().map(|(_, m)| (*m).clone()).collect();
    let grad_mats: Vec<Mat> = grads.named_mats().iter().map(|(_, m)| (*m).clone()).collect();

    // finite differences, one named matrix at a time, aggregated per group
    let mut group_errors: Vec<(String, f64)> = Vec::new();
    for i in 0..names.len() {
        let mut probe = vec![param_mats[i].clone()];
        let analytic = vec![grad_mats[i].clone()];
        let mut work = params.clone();
        let all_mats = param_mats.clone();
        let objective = |mats: &[Mat]| -> Result<f64> {
            let mut full = all_mats.clone();
            full[i] = mats[0].clone();
            work.copy_from_mats(&full);
            let cache = pair_forward(&work, config, graph, &xa, &sa, &xb, &sb)?;
            pair_loss(&[cache.prob_match()], &[label], 0.0, 0.0)
        };
        let report = grad_check(objective, &mut probe, &analytic, step)?;
        let group = group_of(&names[i]);
        match group_errors.iter_mut().find(|(g, _)| *g == group) {
            Some((_, e)) => *e = e.max(report.max_rel_error),
            None => group_errors.push((group, report.max_rel_error)),
        }
    }
    Ok(group_errors)
}
