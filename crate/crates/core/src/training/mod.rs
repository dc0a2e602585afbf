//! Pair enumeration, fold splitting, the mini-batch Adam training loop with
//! early stopping, the non-graph baselines, and checkpointing.

mod adam;
mod baseline;
mod checkpoint;

pub use adam::{adam_step, adam_step_model, AdamState, BETA1, BETA2, EPS};
pub use baseline::{
    baseline_forward, baseline_test_metrics, train_baseline, BaselineKind, BaselineModel,
    BaselineOutcome,
};
pub use checkpoint::{load_checkpoint, save_checkpoint};

use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Cohort, Group};
use crate::error::{Error, Result};
use crate::eval::{accuracy, auc};
use crate::graph::SpatialGraph;
use crate::matching::{pair_loss, MatchKind};
use crate::memory::ClinicalSequence;
use crate::model::{
    evaluate_pairs, pair_backward, pair_forward, prepare_input, Activation, ModelConfig,
    ModelGrads, ModelParams,
};
use crate::numerics::rng::{seeded_rng, shuffle, SeededRng};
use crate::numerics::Mat;

/// One unordered acquisition pair with its matching label (`1` = same group).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pair {
    pub a: usize,
    pub b: usize,
    pub label: u8,
}

/// All enumerated pairs plus the acquisition-level fold assignment.
#[derive(Debug, Clone)]
pub struct PairDataset {
    pub pairs: Vec<Pair>,
    fold_of: Vec<usize>,
    n_acq: usize,
}

/// Every unordered acquisition pair, labeled matching iff same group.
pub fn enumerate_pairs(groups: &[Group]) -> Result<PairDataset> {
    let m = groups.len();
    if m < 2 {
        return Err(Error::validation("pair enumeration needs at least 2 acquisitions"));
    }
    let mut pairs = Vec::with_capacity(m * (m - 1) / 2);
    for a in 0..m {
        for b in (a + 1)..m {
            pairs.push(Pair {
                a,
                b,
                label: u8::from(groups[a] == groups[b]),
            });
        }
    }
    Ok(PairDataset {
        pairs,
        fold_of: Vec::new(),
        n_acq: m,
    })
}

/// Seeded shuffle followed by round-robin assignment; fold sizes differ by at
/// most one. Folds are assigned at the acquisition level, never per pair.
pub fn kfold_split(acq_count: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::validation("k-fold split needs k >= 2"));
    }
    if acq_count < k {
        return Err(Error::validation(format!(
            "cannot split {acq_count} acquisitions into {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..acq_count).collect();
    let mut rng = seeded_rng(seed);
    shuffle(&mut rng, &mut order);
    let mut folds = vec![0usize; acq_count];
    for (position, &acq) in order.iter().enumerate() {
        folds[acq] = position % k;
    }
    Ok(folds)
}

impl PairDataset {
    pub fn n_acquisitions(&self) -> usize {
        self.n_acq
    }

    pub fn total(&self) -> usize {
        self.pairs.len()
    }

    pub fn matching_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.label == 1).count()
    }

    pub fn non_matching_count(&self) -> usize {
        self.pairs.iter().filter(|p| p.label == 0).count()
    }

    pub fn assign_folds(&mut self, folds: Vec<usize>) -> Result<()> {
        if folds.len() != self.n_acq {
            return Err(Error::validation(format!(
                "fold assignment covers {} acquisitions, dataset has {}",
                folds.len(),
                self.n_acq
            )));
        }
        self.fold_of = folds;
        Ok(())
    }

    pub fn fold_of(&self) -> &[usize] {
        &self.fold_of
    }

    fn require_folds(&self, fold: usize) -> Result<()> {
        if self.fold_of.is_empty() {
            return Err(Error::validation("fold assignment has not been set"));
        }
        let k = self.fold_of.iter().max().copied().unwrap_or(0) + 1;
        if fold >= k {
            return Err(Error::validation(format!("fold {fold} out of range (k={k})")));
        }
        Ok(())
    }

    /// Pairs with both endpoints outside the held-out fold. Pairs straddling
    /// the fold boundary belong to neither side.
    pub fn train_pairs(&self, fold: usize) -> Result<Vec<Pair>> {
        self.require_folds(fold)?;
        Ok(self
            .pairs
            .iter()
            .filter(|p| self.fold_of[p.a] != fold && self.fold_of[p.b] != fold)
            .copied()
            .collect())
    }

    /// Pairs with both endpoints inside the held-out fold.
    pub fn test_pairs(&self, fold: usize) -> Result<Vec<Pair>> {
        self.require_folds(fold)?;
        Ok(self
            .pairs
            .iter()
            .filter(|p| self.fold_of[p.a] == fold && self.fold_of[p.b] == fold)
            .copied()
            .collect())
    }
}

/// Hyperparameters and switches for a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// L2-regularization weight.
    pub gamma: f64,
    /// Chebyshev polynomial order.
    pub order: usize,
    /// Convolution output channels.
    pub f_out: usize,
    /// Memory slots.
    pub t: usize,
    /// Embedding dimension (must equal `f_out`).
    pub d: usize,
    pub hops: usize,
    pub matching: MatchKind,
    pub activation: Activation,
    pub mask_padding: bool,
    /// Epoch cap.
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub k_folds: usize,
    /// Fraction of training-fold acquisitions carved out for validation.
    pub val_fraction: f64,
    pub h_head: usize,
    /// Worker threads for batch evaluation; results are identical for any
    /// thread count (per-pair gradients merge in a fixed order).
    pub threads: usize,
    pub ablate_memory: bool,
    pub tie_hop_maps: bool,
    pub normalize_connectivity: bool,
    /// Draw batches with equal matching / non-matching halves.
    pub balanced_batches: bool,
    /// Hidden widths of the MLP baseline.
    pub mlp_hidden: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 5e-3,
            gamma: 1e-2,
            order: 30,
            f_out: 32,
            t: 12,
            d: 32,
            hops: 3,
            matching: MatchKind::Inner,
            activation: Activation::Relu,
            mask_padding: false,
            epochs: 100,
            patience: 10,
            seed: 0,
            k_folds: 5,
            val_fraction: 0.1,
            h_head: 64,
            threads: 1,
            ablate_memory: false,
            tie_hop_maps: false,
            normalize_connectivity: false,
            balanced_batches: false,
            mlp_hidden: vec![1024, 256, 64],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d != self.f_out {
            return Err(Error::config(format!(
                "memory dimension d={} must equal f_out={} (ROI features and memory slots attend to each other)",
                self.d, self.f_out
            )));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("order", self.order),
            ("f_out", self.f_out),
            ("t", self.t),
            ("d", self.d),
            ("hops", self.hops),
            ("patience", self.patience),
            ("k_folds", self.k_folds),
            ("h_head", self.h_head),
            ("threads", self.threads),
        ] {
            if v < 1 {
                return Err(Error::config(format!("{name} must be at least 1, got {v}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::config("gamma must be nonnegative"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn model_config(&self, n_roi: usize, feature_dim: usize) -> ModelConfig {
        ModelConfig {
            n_roi,
            feature_dim,
            t: self.t,
            d: self.d,
            order: self.order,
            hops: self.hops,
            h_head: self.h_head,
            matching: self.matching,
            activation: self.activation,
            mask_padding: self.mask_padding,
            ablate_memory: self.ablate_memory,
            tie_hop_maps: self.tie_hop_maps,
            normalize_connectivity: self.normalize_connectivity,
        }
    }
}

/// One history row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_auc: f64,
}

/// Result of a single-fold training run: the best-validation parameters and
/// the per-epoch history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub model_config: ModelConfig,
    pub history: Vec<EpochStats>,
}

/// `epoch,train_loss,val_loss,val_acc,val_auc` rows.
pub fn write_history_csv(history: &[EpochStats], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,val_acc,val_auc")?;
        for row in history {
            writeln!(
                w,
                "{},{:.12e},{:.12e},{:.12e},{:.12e}",
                row.epoch, row.train_loss, row.val_loss, row.val_acc, row.val_auc
            )?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

fn batch_pairs(order: &[usize], pairs: &[Pair], batch_size: usize) -> Vec<Vec<Pair>> {
    order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| pairs[i]).collect())
        .collect()
}

/// Compose balanced batches: equal halves from the shuffled matching and
/// non-matching lists, truncated to the smaller class.
fn balanced_batches(
    rng: &mut SeededRng,
    pairs: &[Pair],
    batch_size: usize,
) -> Vec<Vec<Pair>> {
    let mut pos: Vec<Pair> = pairs.iter().filter(|p| p.label == 1).copied().collect();
    let mut neg: Vec<Pair> = pairs.iter().filter(|p| p.label == 0).copied().collect();
    shuffle(rng, &mut pos);
    shuffle(rng, &mut neg);
    let per_class = pos.len().min(neg.len());
    let half = (batch_size / 2).max(1);
    let mut batches = Vec::new();
    let mut i = 0;
    while i < per_class {
        let end = (i + half).min(per_class);
        let mut batch: Vec<Pair> = Vec::with_capacity(2 * (end - i));
        batch.extend_from_slice(&pos[i..end]);
        batch.extend_from_slice(&neg[i..end]);
        batches.push(batch);
        i = end;
    }
    batches
}

/// Carve a seeded validation subset out of the training folds and return
/// `(training pairs, validation pairs)`. Training pairs have both endpoints
/// outside the held-out fold and outside the carve-out; validation pairs are
/// internal to the carve-out. Pairs across any boundary are dropped.
pub(crate) fn fold_split_with_validation(
    config: &TrainConfig,
    dataset: &PairDataset,
    fold: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<Pair>, Vec<Pair>)> {
    dataset.require_folds(fold)?;
    let mut train_acqs: Vec<usize> = (0..dataset.n_acquisitions())
        .filter(|&i| dataset.fold_of()[i] != fold)
        .collect();
    shuffle(rng, &mut train_acqs);
    let val_count = ((train_acqs.len() as f64 * config.val_fraction).round() as usize)
        .clamp(2, train_acqs.len().saturating_sub(2));
    let is_val = {
        let mut flags = vec![false; dataset.n_acquisitions()];
        for &i in &train_acqs[..val_count] {
            flags[i] = true;
        }
        flags
    };
    let train_pairs: Vec<Pair> = dataset
        .pairs
        .iter()
        .filter(|p| {
            dataset.fold_of()[p.a] != fold
                && dataset.fold_of()[p.b] != fold
                && !is_val[p.a]
                && !is_val[p.b]
        })
        .copied()
        .collect();
    let val_pairs: Vec<Pair> = dataset
        .pairs
        .iter()
        .filter(|p| is_val[p.a] && is_val[p.b])
        .copied()
        .collect();
    if train_pairs.is_empty() {
        return Err(Error::validation("empty training set after fold and validation split"));
    }
    if val_pairs.is_empty() {
        return Err(Error::validation("empty validation set; cohort too small for the split"));
    }
    Ok((train_pairs, val_pairs))
}

struct EvalSet {
    pairs: Vec<(usize, usize)>,
    labels: Vec<u8>,
}

impl EvalSet {
    fn new(pairs: &[Pair]) -> Self {
        EvalSet {
            pairs: pairs.iter().map(|p| (p.a, p.b)).collect(),
            labels: pairs.iter().map(|p| p.label).collect(),
        }
    }
}

fn evaluate_set(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SpatialGraph,
    inputs: &[Mat],
    seqs: &[ClinicalSequence],
    set: &EvalSet,
    gamma: f64,
) -> Result<(f64, f64, f64)> {
    let probs = evaluate_pairs(params, config, graph, inputs, seqs, &set.pairs)?;
    let loss = pair_loss(&probs, &set.labels, params.sq_l2(), gamma)?;
    let acc = accuracy(&probs, &set.labels, 0.5)?;
    let both_classes = set.labels.iter().any(|&l| l == 1) && set.labels.iter().any(|&l| l == 0);
    let auc_value = if both_classes {
        auc(&probs, &set.labels)?
    } else {
        f64::NAN
    };
    Ok((loss, acc, auc_value))
}

/// Train one fold.
///
/// The held-out fold's pairs are never touched. A seeded 10% (by default)
/// acquisition-level carve-out of the training folds provides validation
/// pairs (pairs internal to the carve-out); training pairs are the pairs
/// internal to the remainder. Randomness order: validation carve-out,
/// parameter initialization, then one shuffle per epoch — all from
/// `config.seed`.
pub fn train(
    config: &TrainConfig,
    graph: &SpatialGraph,
    cohort: &Cohort,
    dataset: &PairDataset,
    fold: usize,
) -> Result<TrainOutcome> {
    config.validate()?;
    if cohort.len() != dataset.n_acquisitions() {
        return Err(Error::validation("pair dataset does not match the cohort"));
    }
    if cohort.n_roi() != graph.n() {
        return Err(Error::validation("cohort and graph disagree on ROI count"));
    }
    if cohort.t() != config.t {
        return Err(Error::config(format!(
            "cohort memory size {} differs from configured t={}; re-pad the cohort first",
            cohort.t(),
            config.t
        )));
    }
    dataset.require_folds(fold)?;

    let model_config = config.model_config(cohort.n_roi(), cohort.feature_dim());
    let mut rng = seeded_rng(config.seed);
    let (train_pairs, val_pairs) = fold_split_with_validation(config, dataset, fold, &mut rng)?;

    let inputs: Vec<Mat> = cohort
        .acquisitions
        .iter()
        .map(|a| prepare_input(&a.x, &model_config))
        .collect();
    let seqs: Vec<ClinicalSequence> = cohort
        .acquisitions
        .iter()
        .map(|a| a.sequence.clone())
        .collect();

    let mut params = ModelParams::init(&model_config, &mut rng)?;
    let mut adam = AdamState::new(params.param_count());

    let pool = if config.threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(config.threads)
                .build()
                .map_err(|e| Error::config(format!("thread pool: {e}")))?,
        )
    } else {
        None
    };

    let train_eval = EvalSet::new(&train_pairs);
    let val_eval = EvalSet::new(&val_pairs);

    // epoch 0: initialized model, no updates yet
    let (loss0, _, _) = evaluate_set(
        &params,
        &model_config,
        graph,
        &inputs,
        &seqs,
        &train_eval,
        config.gamma,
    )?;
    let (val_loss0, val_acc0, val_auc0) = evaluate_set(
        &params,
        &model_config,
        graph,
        &inputs,
        &seqs,
        &val_eval,
        config.gamma,
    )?;
    let mut history = vec![EpochStats {
        epoch: 0,
        train_loss: loss0,
        val_loss: val_loss0,
        val_acc: val_acc0,
        val_auc: val_auc0,
    }];

    let mut best_val = val_loss0;
    let mut best_params = params.clone();
    let mut stale_epochs = 0usize;

    for epoch in 1..=config.epochs {
        let batches = if config.balanced_batches {
            balanced_batches(&mut rng, &train_pairs, config.batch_size)
        } else {
            let mut order: Vec<usize> = (0..train_pairs.len()).collect();
            shuffle(&mut rng, &mut order);
            batch_pairs(&order, &train_pairs, config.batch_size)
        };

        let mut epoch_loss = 0.0;
        for batch in &batches {
            let per_pair = |pair: &Pair| -> Result<(ModelGrads, f64)> {
                let cache = pair_forward(
                    &params,
                    &model_config,
                    graph,
                    &inputs[pair.a],
                    &seqs[pair.a],
                    &inputs[pair.b],
                    &seqs[pair.b],
                )?;
                let mut grads = ModelGrads::zeros_like(&params);
                pair_backward(
                    &params,
                    &model_config,
                    graph,
                    &seqs[pair.a],
                    &seqs[pair.b],
                    &cache,
                    pair.label,
                    &mut grads,
                );
                let ce = pair_loss(&[cache.prob_match()], &[pair.label], 0.0, 0.0)?;
                Ok((grads, ce))
            };
            let results: Vec<(ModelGrads, f64)> = match &pool {
                Some(pool) => pool.install(|| {
                    use rayon::prelude::*;
                    batch.par_iter().map(per_pair).collect::<Result<Vec<_>>>()
                })?,
                None => batch.iter().map(per_pair).collect::<Result<Vec<_>>>()?,
            };

            // fixed-order merge keeps any thread count bit-identical
            let mut grads = ModelGrads::zeros_like(&params);
            let mut ce_sum = 0.0;
            for (g, ce) in &results {
                grads.add_assign(g);
                ce_sum += ce;
            }
            grads.scale_in_place(1.0 / batch.len() as f64);
            grads.add_params_scaled(&params, 2.0 * config.gamma);
            if model_config.ablate_memory {
                for v in grads.memory.a.as_mut_slice() {
                    *v = 0.0;
                }
                for v in grads.memory.b.as_mut_slice() {
                    *v = 0.0;
                }
            }
            adam_step_model(&mut params, &grads, &mut adam, config.learning_rate)?;

            epoch_loss += ce_sum / batch.len() as f64 + config.gamma * params.sq_l2();
        }
        let train_loss = epoch_loss / batches.len().max(1) as f64;

        let (val_loss, val_acc, val_auc) = evaluate_set(
            &params,
            &model_config,
            graph,
            &inputs,
            &seqs,
            &val_eval,
            config.gamma,
        )?;
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            val_auc,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_params = params.clone();
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= config.patience {
                log::info!("early stop at epoch {epoch} (no validation improvement for {stale_epochs} epochs)");
                break;
            }
        }
    }

    Ok(TrainOutcome {
        params: best_params,
        model_config,
        history,
    })
}

/// Accuracy and AUC of a trained model on the held-out fold's internal pairs.
pub fn evaluate_test_fold(
    outcome: &TrainOutcome,
    graph: &SpatialGraph,
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
        .map(|a| prepare_input(&a.x, &outcome.model_config))
        .collect();
    let seqs: Vec<ClinicalSequence> = cohort
        .acquisitions
        .iter()
        .map(|a| a.sequence.clone())
        .collect();
    let set = EvalSet::new(&test);
    let probs = evaluate_pairs(
        &outcome.params,
        &outcome.model_config,
        graph,
        &inputs,
        &seqs,
        &set.pairs,
    )?;
    let acc = accuracy(&probs, &set.labels, 0.5)?;
    let auc_value = auc(&probs, &set.labels)?;
    Ok((acc, auc_value))
}
