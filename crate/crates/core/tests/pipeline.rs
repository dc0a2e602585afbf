//! End-to-end training pipeline tests on small synthetic cohorts.

use memgcn::data::{generate_synthetic_cohort, SynthSpec};
use memgcn::graph::{SigmaPolicy, SpatialGraph};
use memgcn::matching::MatchKind;
use memgcn::training::{
    enumerate_pairs, evaluate_test_fold, kfold_split, train, train_baseline, BaselineKind,
    TrainConfig,
};

/// Bitwise history equality; `val_auc` can legitimately be NaN when a tiny
/// validation carve-out is single-class, and NaN != NaN under PartialEq.
fn assert_history_identical(a: &[memgcn::training::EpochStats], b: &[memgcn::training::EpochStats]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.epoch, y.epoch);
        for (va, vb) in [
            (x.train_loss, y.train_loss),
            (x.val_loss, y.val_loss),
            (x.val_acc, y.val_acc),
            (x.val_auc, y.val_auc),
        ] {
            assert_eq!(va.to_bits(), vb.to_bits());
        }
    }
}

fn small_cohort(seed: u64) -> (memgcn::data::Cohort, SpatialGraph) {
    let spec = SynthSpec {
        n_roi: 10,
        n_case: 12,
        n_control: 12,
        conn_signal: 1.2,
        seq_signal: 0.5,
        noise_sd: 0.1,
        t: 4,
        d_features: 10,
        seed,
    };
    let cohort = generate_synthetic_cohort(&spec).unwrap();
    let graph = SpatialGraph::build(&cohort.coords, 3, SigmaPolicy::MeanKthNeighbor, spec.seed).unwrap();
    (cohort, graph)
}

fn small_config() -> TrainConfig {
    TrainConfig {
        order: 3,
        f_out: 6,
        d: 6,
        t: 4,
        hops: 2,
        h_head: 8,
        epochs: 5,
        patience: 3,
        batch_size: 16,
        k_folds: 3,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[test]
fn training_reduces_loss_and_records_history() {
    let (cohort, graph) = small_cohort(1);
    let mut dataset = enumerate_pairs(&cohort.groups()).unwrap();
    dataset.assign_folds(kfold_split(cohort.len(), 3, 7).unwrap()).unwrap();
    let config = small_config();

    let outcome = train(&config, &graph, &cohort, &dataset, 0).unwrap();
    assert_eq!(outcome.history[0].epoch, 0);
    assert!(outcome.history.len() >= 2, "at least one training epoch");
    let first = outcome.history.first().unwrap().train_loss;
    let last = outcome.history.last().unwrap().train_loss;
    assert!(last < first, "training loss should drop: {first} -> {last}");
    assert!(outcome.params.is_finite());

    let (acc, auc) = evaluate_test_fold(&outcome, &graph, &cohort, &dataset, 0).unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn zero_epoch_cap_returns_initialized_params() {
    let (cohort, graph) = small_cohort(2);
    let mut dataset = enumerate_pairs(&cohort.groups()).unwrap();
    dataset.assign_folds(kfold_split(cohort.len(), 3, 7).unwrap()).unwrap();
    let mut config = small_config();
    config.epochs = 0;

    let outcome = train(&config, &graph, &cohort, &dataset, 0).unwrap();
    assert_eq!(outcome.history.len(), 1);
    assert_eq!(outcome.history[0].epoch, 0);
}

#[test]
fn same_seed_gives_identical_history_and_params() {
    let (cohort, graph) = small_cohort(3);
    let mut dataset = enumerate_pairs(&cohort.groups()).unwrap();
    dataset.assign_folds(kfold_split(cohort.len(), 3, 7).unwrap()).unwrap();
    let config = small_config();

    let a = train(&config, &graph, &cohort, &dataset, 1).unwrap();
    let b = train(&config, &graph, &cohort, &dataset, 1).unwrap();
    assert_history_identical(&a.history, &b.history);
    let fa = a.params.to_flat();
    let fb = b.params.to_flat();
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn parallel_batches_match_serial_bitwise() {
    let (cohort, graph) = small_cohort(4);
    let mut dataset = enumerate_pairs(&cohort.groups()).unwrap();
    dataset.assign_folds(kfold_split(cohort.len(), 3, 7).unwrap()).unwrap();
    let mut config = small_config();
    config.epochs = 3;

    let serial = train(&config, &graph, &cohort, &dataset, 0).unwrap();
    config.threads = 2;
    let parallel = train(&config, &graph, &cohort, &dataset, 0).unwrap();
    assert_history_identical(&serial.history, &parallel.history);
    let fa = serial.params.to_flat();
    let fb = parallel.params.to_flat();
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn bilinear_mode_trains() {
    let (cohort, graph) = small_cohort(5);
    let mut dataset = enumerate_pairs(&cohort.groups()).unwrap();
    dataset.assign_folds(kfold_split(cohort.len(), 3, 7).unwrap()).unwrap();
    let mut config = small_config();
    config.matching = MatchKind::Bilinear;
    config.epochs = 3;

    let outcome = train(&config, &graph, &cohort, &dataset, 0).unwrap();
    assert!(outcome.params.head.m.is_some());
    assert!(outcome.params.is_finite());
}

#[test]
fn memory_ablation_trains_and_evaluates() {
    let (cohort, graph) = small_cohort(6);
    let mut dataset = enumerate_pairs(&cohort.groups()).unwrap();
    dataset.assign_folds(kfold_split(cohort.len(), 3, 7).unwrap()).unwrap();
    let mut config = small_config();
    config.ablate_memory = true;
    config.epochs = 3;

    let outcome = train(&config, &graph, &cohort, &dataset, 0).unwrap();
    // embeddings stay frozen at zero
    assert_eq!(outcome.params.memory.a.max_abs(), 0.0);
    assert_eq!(outcome.params.memory.b.max_abs(), 0.0);
}

#[test]
fn baselines_train_and_score() {
    let (cohort, graph) = small_cohort(7);
    let _ = &graph; // baselines ignore the graph
    let mut dataset = enumerate_pairs(&cohort.groups()).unwrap();
    dataset.assign_folds(kfold_split(cohort.len(), 3, 7).unwrap()).unwrap();
    let mut config = small_config();
    config.epochs = 3;
    config.mlp_hidden = vec![32, 16, 8];

    for kind in [BaselineKind::RawEdges, BaselineKind::Mlp] {
        let outcome = train_baseline(&config, &cohort, &dataset, 0, kind).unwrap();
        let (acc, auc) = memgcn::training::baseline_test_metrics(
            &outcome, &config, &cohort, &dataset, 0,
        )
        .unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert!((0.0..=1.0).contains(&auc));
    }
}

#[test]
fn checkpoint_round_trip_preserves_training_state() {
    let (cohort, graph) = small_cohort(8);
    let mut dataset = enumerate_pairs(&cohort.groups()).unwrap();
    dataset.assign_folds(kfold_split(cohort.len(), 3, 7).unwrap()).unwrap();
    let mut config = small_config();
    config.epochs = 2;

    let outcome = train(&config, &graph, &cohort, &dataset, 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("fold0.bin");
    memgcn::training::save_checkpoint(&bin, &outcome.params, &outcome.model_config, &config).unwrap();
    let (params, model_config, train_config) = memgcn::training::load_checkpoint(&bin).unwrap();
    assert_eq!(model_config, outcome.model_config);
    assert_eq!(train_config, config);
    for (x, y) in outcome.params.to_flat().iter().zip(params.to_flat()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn reports_run_on_trained_models() {
    use memgcn::eval::{attention_trace_export, edge_pattern_report, roi_similarity_report};

    let (cohort, graph) = small_cohort(9);
    let mut dataset = enumerate_pairs(&cohort.groups()).unwrap();
    dataset.assign_folds(kfold_split(cohort.len(), 3, 7).unwrap()).unwrap();
    let mut config = small_config();
    config.epochs = 2;

    let inner = train(&config, &graph, &cohort, &dataset, 0).unwrap();
    let roi = roi_similarity_report(&inner.params, &inner.model_config, &graph, &cohort, None).unwrap();
    assert_eq!(roi.identical.len(), cohort.n_roi());
    assert_eq!(roi.discriminative.len(), cohort.n_roi());
    for (_, score) in roi.identical.iter().chain(&roi.discriminative) {
        assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(score));
    }
    // mode guard
    assert!(edge_pattern_report(&inner.params, &inner.model_config, &graph, &cohort, 5, None).is_err());

    config.matching = MatchKind::Bilinear;
    let bilinear = train(&config, &graph, &cohort, &dataset, 0).unwrap();
    let edges = edge_pattern_report(&bilinear.params, &bilinear.model_config, &graph, &cohort, 5, None).unwrap();
    assert_eq!(edges.identical.len(), 5);
    assert!(roi_similarity_report(&bilinear.params, &bilinear.model_config, &graph, &cohort, None).is_err());

    // attention export: column-stochastic files, one per hop
    let dir = tempfile::tempdir().unwrap();
    let paths = attention_trace_export(
        &inner.params,
        &inner.model_config,
        &graph,
        &cohort,
        &cohort.acquisitions[0].id,
        dir.path(),
    )
    .unwrap();
    assert_eq!(paths.len(), config.hops);
    for path in paths {
        let text = std::fs::read_to_string(path).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("roi_0,"));
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), config.t);
        for col in 0..cohort.n_roi() {
            let sum: f64 = rows.iter().map(|r| r[col]).sum();
            assert!((sum - 1.0).abs() < 1e-9, "column {col} sums to {sum}");
        }
    }
}

#[test]
fn subsampled_report_is_stable() {
    use memgcn::eval::{roi_similarity_report, ReportSample};

    let (cohort, graph) = small_cohort(10);
    let mut dataset = enumerate_pairs(&cohort.groups()).unwrap();
    dataset.assign_folds(kfold_split(cohort.len(), 3, 7).unwrap()).unwrap();
    let mut config = small_config();
    config.epochs = 2;
    let outcome = train(&config, &graph, &cohort, &dataset, 0).unwrap();

    let full = roi_similarity_report(&outcome.params, &outcome.model_config, &graph, &cohort, None).unwrap();
    let sampled = roi_similarity_report(
        &outcome.params,
        &outcome.model_config,
        &graph,
        &cohort,
        Some(ReportSample { max_pairs: 40, seed: 3 }),
    )
    .unwrap();
    assert!(sampled.case_case_pairs.0 <= 40);
    // per-ROI means from a large subsample stay close to the full evaluation
    let full_scores: std::collections::HashMap<usize, f64> = full.identical.iter().copied().collect();
    for (roi, score) in &sampled.identical {
        let delta = (score - full_scores[roi]).abs();
        assert!(delta <= 0.05, "ROI {roi} subsample drift {delta}");
    }
}
