//! Non-graph baselines trained under the same pairwise architecture:
//! raw connectivity rows, and a per-acquisition MLP encoder.

use crate::data::Cohort;
use crate::error::{Error, Result};
use crate::eval::{accuracy, auc};
use crate::matching::{
    classify_head_cached, head_backward, inner_matching, inner_matching_backward, pair_loss,
    HeadCache, HeadParams, MatchOutput,
};
use crate::numerics::rng::{seeded_rng, shuffle, uniform_mat, SeededRng};
use crate::numerics::Mat;
use crate::training::{
    adam_step, AdamState, EpochStats, Pair, PairDataset, TrainConfig,
};

/// Baseline families from the comparison suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineKind {
    /// Match the raw connectivity rows directly (no trainable encoder).
    RawEdges,
    /// Encode each flattened connectivity matrix with a fully connected
    /// stack, then match the embeddings.
    Mlp,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw_edges" => Ok(BaselineKind::RawEdges),
            "mlp" => Ok(BaselineKind::Mlp),
            other => Err(Error::validation(format!(
                "unknown baseline `{other}` (expected raw_edges or mlp)"
            ))),
        }
    }
}

/// Baseline parameters: the encoder stack (empty for raw edges) plus the
/// shared classification head.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    /// Fully connected weights, applied as `v <- relu(W v)` in order.
    pub layers: Vec<Mat>,
    pub head: HeadParams,
}

impl BaselineModel {
    pub fn init(
        kind: BaselineKind,
        n_roi: usize,
        mlp_hidden: &[usize],
        h_head: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let (layers, match_dim) = match kind {
            BaselineKind::RawEdges => (Vec::new(), n_roi),
            BaselineKind::Mlp => {
                if mlp_hidden.is_empty() {
                    return Err(Error::config("mlp baseline needs at least one hidden layer"));
                }
                let mut layers = Vec::with_capacity(mlp_hidden.len());
                let mut prev = n_roi * n_roi;
                for &width in mlp_hidden {
                    if width < 1 {
                        return Err(Error::config("mlp layer widths must be at least 1"));
                    }
                    let s = (6.0 / (prev + width) as f64).sqrt();
                    layers.push(uniform_mat(rng, width, prev, -s, s));
                    prev = width;
                }
                // the embedding is one pseudo-ROI row, so matching yields a
                // single similarity
                (layers, 1)
            }
        };
        let head = HeadParams::init(match_dim, h_head, crate::matching::MatchKind::Inner, 1, rng)?;
        Ok(BaselineModel { kind, layers, head })
    }

    fn named_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.as_slice());
        }
        out.extend_from_slice(self.head.w1.as_slice());
        out.extend_from_slice(self.head.w2.as_slice());
        out
    }

    fn copy_from_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for layer in &mut self.layers {
            let len = layer.as_slice().len();
            layer.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        let len = self.head.w1.as_slice().len();
        self.head.w1.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
        offset += len;
        let len = self.head.w2.as_slice().len();
        self.head.w2.as_mut_slice().copy_from_slice(&flat[offset..offset + len]);
        offset += len;
        debug_assert_eq!(offset, flat.len());
    }

    fn sq_l2(&self) -> f64 {
        self.named_flat().iter().map(|v| v * v).sum()
    }

    /// Per-acquisition feature map plus the per-layer (pre, post)
    /// activations needed for backprop.
    fn encode(&self, x: &Mat) -> (Mat, Vec<(Vec<f64>, Vec<f64>)>) {
        match self.kind {
            BaselineKind::RawEdges => (x.clone(), Vec::new()),
            BaselineKind::Mlp => {
                let mut v: Vec<f64> = x.as_slice().to_vec();
                let mut caches = Vec::with_capacity(self.layers.len());
                for layer in &self.layers {
                    let pre: Vec<f64> = (0..layer.rows())
                        .map(|i| crate::numerics::dot(layer.row(i), &v))
                        .collect();
                    let post: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
                    caches.push((pre, post.clone()));
                    v = post;
                }
                let width = v.len();
                (Mat::from_vec(1, width, v).expect("row vector"), caches)
            }
        }
    }
}

struct BaselineCache {
    feat_a: Mat,
    feat_b: Mat,
    layers_a: Vec<(Vec<f64>, Vec<f64>)>,
    layers_b: Vec<(Vec<f64>, Vec<f64>)>,
    head: HeadCache,
}

/// Matching probability for one pair through a baseline.
pub fn baseline_forward(model: &BaselineModel, xa: &Mat, xb: &Mat) -> Result<[f64; 2]> {
    Ok(forward_cached(model, xa, xb)?.head.probs)
}

fn forward_cached(model: &BaselineModel, xa: &Mat, xb: &Mat) -> Result<BaselineCache> {
    let (feat_a, layers_a) = model.encode(xa);
    let (feat_b, layers_b) = model.encode(xb);
    let sims = inner_matching(&feat_a, &feat_b)?;
    let head = classify_head_cached(&MatchOutput::Inner(sims), &model.head)?;
    Ok(BaselineCache {
        feat_a,
        feat_b,
        layers_a,
        layers_b,
        head,
    })
}

struct BaselineGrads {
    layers: Vec<Mat>,
    w1: Mat,
    w2: Mat,
}

impl BaselineGrads {
    fn zeros_like(model: &BaselineModel) -> Self {
        BaselineGrads {
            layers: model
                .layers
                .iter()
                .map(|l| Mat::zeros(l.rows(), l.cols()))
                .collect(),
            w1: Mat::zeros(model.head.w1.rows(), model.head.w1.cols()),
            w2: Mat::zeros(model.head.w2.rows(), model.head.w2.cols()),
        }
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.as_slice());
        }
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(self.w2.as_slice());
        out
    }

    fn add_flat_scaled(mut self, other: &BaselineGrads, s: f64) -> Self {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled(b, s);
        }
        self.w1.add_scaled(&other.w1, s);
        self.w2.add_scaled(&other.w2, s);
        self
    }
}

fn backward(
    model: &BaselineModel,
    cache: &BaselineCache,
    xa: &Mat,
    xb: &Mat,
    label: u8,
) -> BaselineGrads {
    let mut grads = BaselineGrads::zeros_like(model);
    let p = cache.head.probs;
    let target = usize::from(label == 1);
    let g_logits = [
        p[0] - if target == 0 { 1.0 } else { 0.0 },
        p[1] - if target == 1 { 1.0 } else { 0.0 },
    ];
    let (g_w1, g_w2, g_sim) = head_backward(&model.head, &cache.head, g_logits);
    grads.w1.add_scaled(&g_w1, 1.0);
    grads.w2.add_scaled(&g_w2, 1.0);

    if model.kind == BaselineKind::RawEdges {
        return grads; // connectivity is not trainable
    }

    let (g_fa, g_fb) = inner_matching_backward(&cache.feat_a, &cache.feat_b, &g_sim);
    for (branch_grad, layers_cache, x) in [
        (g_fa, &cache.layers_a, xa),
        (g_fb, &cache.layers_b, xb),
    ] {
        let mut g_v: Vec<f64> = branch_grad.as_slice().to_vec();
        for i in (0..model.layers.len()).rev() {
            let (pre, _) = &layers_cache[i];
            let mut g_pre = g_v.clone();
            for (g, &p) in g_pre.iter_mut().zip(pre) {
                if p <= 0.0 {
                    *g = 0.0;
                }
            }
            let input: Vec<f64> = if i == 0 {
                x.as_slice().to_vec()
            } else {
                layers_cache[i - 1].1.clone()
            };
            for (row, &gp) in g_pre.iter().enumerate() {
                if gp == 0.0 {
                    continue;
                }
                for (g, &inp) in grads.layers[i].row_mut(row).iter_mut().zip(&input) {
                    *g += gp * inp;
                }
            }
            let layer = &model.layers[i];
            let mut g_prev = vec![0.0; layer.cols()];
            for (row, &gp) in g_pre.iter().enumerate() {
                if gp == 0.0 {
                    continue;
                }
                for (g, &w) in g_prev.iter_mut().zip(layer.row(row)) {
                    *g += gp * w;
                }
            }
            g_v = g_prev;
        }
    }
    grads
}

/// A trained baseline with its history.
#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub model: BaselineModel,
    pub history: Vec<EpochStats>,
}

/// Train a baseline on one fold with the same loss, optimizer, split, and
/// early-stopping rules as the main model. Sequences are ignored; only the
/// connectivity matrices are used.
pub fn train_baseline(
    config: &TrainConfig,
    cohort: &Cohort,
    dataset: &PairDataset,
    fold: usize,
    kind: BaselineKind,
) -> Result<BaselineOutcome> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed);
    let (train_pairs, val_pairs) = super::fold_split_with_validation(config, dataset, fold, &mut rng)?;

    let inputs: Vec<Mat> = cohort
        .acquisitions
        .iter()
        .map(|a| {
            if config.normalize_connectivity {
                let m = a.x.max_abs();
                if m > 0.0 {
                    return a.x.scale(1.0 / m);
                }
            }
            a.x.clone()
        })
        .collect();

    let mut model = BaselineModel::init(
        kind,
        cohort.n_roi(),
        &config.mlp_hidden,
        config.h_head,
        &mut rng,
    )?;
    let mut adam = AdamState::new(model.named_flat().len());

    let eval = |model: &BaselineModel, pairs: &[Pair]| -> Result<(f64, f64, f64)> {
        let mut probs = Vec::with_capacity(pairs.len());
        let mut labels = Vec::with_capacity(pairs.len());
        for p in pairs {
            probs.push(baseline_forward(model, &inputs[p.a], &inputs[p.b])?[1]);
            labels.push(p.label);
        }
        let loss = pair_loss(&probs, &labels, model.sq_l2(), config.gamma)?;
        let acc = accuracy(&probs, &labels, 0.5)?;
        let both = labels.iter().any(|&l| l == 1) && labels.iter().any(|&l| l == 0);
        let a = if both { auc(&probs, &labels)? } else { f64::NAN };
        Ok((loss, acc, a))
    };

    let (loss0, _, _) = eval(&model, &train_pairs)?;
    let (val_loss0, val_acc0, val_auc0) = eval(&model, &val_pairs)?;
    let mut history = vec![EpochStats {
        epoch: 0,
        train_loss: loss0,
        val_loss: val_loss0,
        val_acc: val_acc0,
        val_auc: val_auc0,
    }];
    let mut best_val = val_loss0;
    let mut best_model = model.clone();
    let mut stale = 0usize;

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        shuffle(&mut rng, &mut order);

        let mut epoch_loss = 0.0;
        let mut batch_count = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let mut grads = BaselineGrads::zeros_like(&model);
            let mut ce_sum = 0.0;
            for &idx in chunk {
                let pair = train_pairs[idx];
                let cache = forward_cached(&model, &inputs[pair.a], &inputs[pair.b])?;
                let g = backward(&model, &cache, &inputs[pair.a], &inputs[pair.b], pair.label);
                grads = grads.add_flat_scaled(&g, 1.0);
                ce_sum += pair_loss(&[cache.head.probs[1]], &[pair.label], 0.0, 0.0)?;
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut flat_grads = grads.to_flat();
            let flat_params = model.named_flat();
            for (g, p) in flat_grads.iter_mut().zip(&flat_params) {
                *g = *g * scale + 2.0 * config.gamma * p;
            }
            let mut flat = flat_params;
            adam.step += 1;
            let step = adam.step;
            adam_step(&mut flat, &flat_grads, &mut adam, step, config.learning_rate)?;
            model.copy_from_flat(&flat);

            epoch_loss += ce_sum * scale + config.gamma * model.sq_l2();
            batch_count += 1;
        }
        let train_loss = epoch_loss / batch_count.max(1) as f64;
        let (val_loss, val_acc, val_auc) = eval(&model, &val_pairs)?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            val_auc,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_model = model.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    Ok(BaselineOutcome {
        model: best_model,
        history,
    })
}

/// Accuracy and AUC of a trained baseline on the held-out fold.
pub fn baseline_test_metrics(
    outcome: &BaselineOutcome,
    config: &TrainConfig,
    cohort: &Cohort,
    dataset: &PairDataset,
    fold: usize,
) -> Result<(f64, f64)> {
    let test = dataset.test_pairs(fold)?;
    if test.is_empty() {
        return Err(Error::validation(format!("fold {fold} has no internal test pairs")));
    }
    let inputs: Vec<Mat> = cohort
        .acquisitions
        .iter()
        .map(|a| {
            if config.normalize_connectivity {
                let m = a.x.max_abs();
                if m > 0.0 {
                    return a.x.scale(1.0 / m);
                }
            }
            a.x.clone()
        })
        .collect();
    let mut probs = Vec::with_capacity(test.len());
    let mut labels = Vec::with_capacity(test.len());
    for p in &test {
        probs.push(baseline_forward(&outcome.model, &inputs[p.a], &inputs[p.b])?[1]);
        labels.push(p.label);
    }
    Ok((accuracy(&probs, &labels, 0.5)?, auc(&probs, &labels)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded_rng;

    #[test]
    fn identical_pair_through_raw_edges_has_unit_similarities() {
        let mut rng = seeded_rng(1);
        let model = BaselineModel::init(BaselineKind::RawEdges, 4, &[], 8, &mut rng).unwrap();
        let x = uniform_mat(&mut rng, 4, 4, 0.1, 1.0);
        let (feat, _) = model.encode(&x);
        let sims = inner_matching(&feat, &feat).unwrap();
        for s in sims {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_mlp_outputs_half_half() {
        let mut rng = seeded_rng(2);
        let mut model = BaselineModel::init(BaselineKind::Mlp, 3, &[6, 4], 5, &mut rng).unwrap();
        for layer in &mut model.layers {
            for v in layer.as_mut_slice() {
                *v = 0.0;
            }
        }
        for v in model.head.w1.as_mut_slice() {
            *v = 0.0;
        }
        for v in model.head.w2.as_mut_slice() {
            *v = 0.0;
        }
        let x = uniform_mat(&mut rng, 3, 3, 0.0, 1.0);
        let p = baseline_forward(&model, &x, &x).unwrap();
        assert_eq!(p, [0.5, 0.5]);
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        use crate::numerics::{grad_check, DEFAULT_STEP};
        let mut rng = seeded_rng(3);
        let model = BaselineModel::init(BaselineKind::Mlp, 3, &[5, 4], 4, &mut rng).unwrap();
        let xa = uniform_mat(&mut rng, 3, 3, 0.0, 1.0);
        let xb = uniform_mat(&mut rng, 3, 3, 0.0, 1.0);
        let label = 1u8;

        let cache = forward_cached(&model, &xa, &xb).unwrap();
        let analytic_struct = backward(&model, &cache, &xa, &xb, label);
        let mut params: Vec<Mat> = model.layers.clone();
        params.push(model.head.w1.clone());
        params.push(model.head.w2.clone());
        let mut analytic: Vec<Mat> = analytic_struct.layers.clone();
        analytic.push(analytic_struct.w1.clone());
        analytic.push(analytic_struct.w2.clone());

        let base = model.clone();
        let report = grad_check(
            move |p: &[Mat]| {
                let mut probe = base.clone();
                probe.layers = p[..2].to_vec();
                probe.head.w1 = p[2].clone();
                probe.head.w2 = p[3].clone();
                let probs = baseline_forward(&probe, &xa, &xb)?;
                pair_loss(&[probs[1]], &[label], 0.0, 0.0)
            },
            &mut params,
            &analytic,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "error {}", report.max_rel_error);
    }

    #[test]
    fn unknown_baseline_name_is_rejected() {
        assert!("pca".parse::<BaselineKind>().is_err());
        assert_eq!("raw_edges".parse::<BaselineKind>().unwrap(), BaselineKind::RawEdges);
    }
}
