//! Subcommand implementations. Data goes to files under `--out`; progress
//! goes to standard error.

use std::io::Write;
use std::path::Path;

use memgcn::data::{generate_synthetic_cohort, load_cohort, write_cohort, Cohort};
use memgcn::error::{Error, Result};
use memgcn::eval::{
    attention_trace_export, edge_pattern_report, roi_similarity_report, MetricsReport,
    ReportSample,
};
use memgcn::graph::{SigmaPolicy, SpatialGraph};
use memgcn::matching::MatchKind;
use memgcn::model::{model_grad_check_default, ModelConfig};
use memgcn::training::{
    baseline_test_metrics, enumerate_pairs, evaluate_test_fold, kfold_split, load_checkpoint,
    save_checkpoint, train, train_baseline, write_history_csv, BaselineKind, PairDataset,
    TrainConfig,
};

use crate::config::{
    synth_spec_lines, train_config_lines, write_effective_config, FileConfig, SynthOverrides,
    TrainOverrides,
};

/// Default neighbor count of the spatial graph (10-nearest-neighbor).
const SPATIAL_KNN: usize = 10;

fn spatial_graph(cohort: &Cohort, seed: u64) -> Result<SpatialGraph> {
    // clamp k for very small cohorts so toy runs still build a graph
    let k = SPATIAL_KNN.min(cohort.n_roi().saturating_sub(1)).max(1);
    SpatialGraph::build(&cohort.coords, k, SigmaPolicy::MeanKthNeighbor, seed)
}

pub fn cmd_synth(config: Option<&Path>, out: &Path, overrides: &SynthOverrides) -> Result<()> {
    let file = FileConfig::load(config)?;
    let spec = overrides.resolve(&file)?;
    let cohort = generate_synthetic_cohort(&spec)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = write_cohort(&cohort, out)?;
    write_effective_config(&out.join("effective_config.txt"), &synth_spec_lines(&spec))?;
    log::info!(
        "wrote {} acquisitions ({} case / {} control) to {}",
        cohort.len(),
        spec.n_case,
        spec.n_control,
        manifest.display()
    );
    for note in &cohort.load_report {
        log::warn!("{note}");
    }
    Ok(())
}

pub fn cmd_pairs(
    config: Option<&Path>,
    manifest: &Path,
    out: &Path,
    k_folds: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let file = FileConfig::load(config)?;
    let k = match k_folds {
        Some(k) => k,
        None => file.get::<usize>("k_folds")?.unwrap_or(5),
    };
    let seed = match seed {
        Some(s) => s,
        None => file.get::<u64>("seed")?.unwrap_or(0),
    };
    let cohort = load_cohort(manifest)?;
    let mut dataset = enumerate_pairs(&cohort.groups())?;
    dataset.assign_folds(kfold_split(cohort.len(), k, seed)?)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("pairs.csv");
    let file_out = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file_out);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "# acquisitions: {}", cohort.len())?;
        writeln!(
            w,
            "# total: {}; matching: {}; non_matching: {}",
            dataset.total(),
            dataset.matching_count(),
            dataset.non_matching_count()
        )?;
        writeln!(w, "a,b,label,fold_a,fold_b")?;
        for p in &dataset.pairs {
            writeln!(
                w,
                "{},{},{},{},{}",
                p.a,
                p.b,
                p.label,
                dataset.fold_of()[p.a],
                dataset.fold_of()[p.b]
            )?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(&path, e))?;
    write_effective_config(
        &out.join("effective_config.txt"),
        &[("k_folds", k.to_string()), ("seed", seed.to_string())],
    )?;
    log::info!(
        "{} pairs ({} matching / {} non-matching) -> {}",
        dataset.total(),
        dataset.matching_count(),
        dataset.non_matching_count(),
        path.display()
    );
    Ok(())
}

fn prepared_cohort_and_pairs(
    manifest: &Path,
    config: &TrainConfig,
) -> Result<(Cohort, SpatialGraph, PairDataset)> {
    let mut cohort = load_cohort(manifest)?;
    for note in &cohort.load_report {
        log::warn!("{note}");
    }
    if cohort.t() != config.t {
        log::info!(
            "re-padding sequences from {} to {} slots to match the configuration",
            cohort.t(),
            config.t
        );
        cohort.repad(config.t)?;
    }
    let graph = spatial_graph(&cohort, config.seed)?;
    log::info!(
        "spatial graph: {} vertices, {} edges, lambda_max {:.6}",
        graph.n(),
        graph.edge_count,
        graph.lambda_max
    );
    let mut dataset = enumerate_pairs(&cohort.groups())?;
    dataset.assign_folds(kfold_split(cohort.len(), config.k_folds, config.seed)?)?;
    Ok((cohort, graph, dataset))
}

pub fn cmd_train(
    config_path: Option<&Path>,
    manifest: &Path,
    out: &Path,
    fold: Option<usize>,
    baseline: Option<BaselineKind>,
    overrides: &TrainOverrides,
) -> Result<()> {
    let file = FileConfig::load(config_path)?;
    let config = overrides.resolve(&file)?;
    let (cohort, graph, dataset) = prepared_cohort_and_pairs(manifest, &config)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_effective_config(&out.join("effective_config.txt"), &train_config_lines(&config))?;

    let folds: Vec<usize> = match fold {
        Some(f) => {
            if f >= config.k_folds {
                return Err(Error::validation(format!(
                    "fold {f} out of range (k_folds = {})",
                    config.k_folds
                )));
            }
            vec![f]
        }
        None => (0..config.k_folds).collect(),
    };

    let mut per_fold = Vec::with_capacity(folds.len());
    for &f in &folds {
        log::info!("training fold {f}");
        let (acc, auc) = match baseline {
            Some(kind) => {
                let outcome = train_baseline(&config, &cohort, &dataset, f, kind)?;
                write_history_csv(&outcome.history, &out.join(format!("history_fold{f}.csv")))?;
                baseline_test_metrics(&outcome, &config, &cohort, &dataset, f)?
            }
            None => {
                let outcome = train(&config, &graph, &cohort, &dataset, f)?;
                write_history_csv(&outcome.history, &out.join(format!("history_fold{f}.csv")))?;
                save_checkpoint(
                    &out.join(format!("fold{f}.bin")),
                    &outcome.params,
                    &outcome.model_config,
                    &config,
                )?;
                evaluate_test_fold(&outcome, &graph, &cohort, &dataset, f)?
            }
        };
        log::info!("fold {f}: test accuracy {acc:.4}, test auc {auc:.4}");
        per_fold.push((acc, auc));
    }

    let report = MetricsReport::new(per_fold);
    report.write_csv(
        &out.join("metrics.csv"),
        &[
            format!("manifest: {}", manifest.display()),
            format!("seed: {}", config.seed),
            format!("folds: {folds:?}"),
            format!(
                "test pairs per fold are internal to the held-out fold; straddling pairs dropped"
            ),
        ],
    )?;
    log::info!(
        "summary: accuracy {:.4} ({:.4}), auc {:.4} ({:.4})",
        report.mean_accuracy(),
        report.sd_accuracy(),
        report.mean_auc(),
        report.sd_auc()
    );
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, manifest: &Path, out: &Path, fold: usize) -> Result<()> {
    let (params, model_config, train_config) = load_checkpoint(checkpoint)?;
    let mut cohort = load_cohort(manifest)?;
    if cohort.t() != model_config.t {
        cohort.repad(model_config.t)?;
    }
    if cohort.n_roi() != model_config.n_roi {
        return Err(Error::validation(format!(
            "checkpoint was trained on {} ROIs, cohort has {}",
            model_config.n_roi,
            cohort.n_roi()
        )));
    }
    let graph = spatial_graph(&cohort, train_config.seed)?;
    let mut dataset = enumerate_pairs(&cohort.groups())?;
    dataset.assign_folds(kfold_split(cohort.len(), train_config.k_folds, train_config.seed)?)?;

    let outcome = memgcn::training::TrainOutcome {
        params,
        model_config,
        history: Vec::new(),
    };
    let (acc, auc) = evaluate_test_fold(&outcome, &graph, &cohort, &dataset, fold)?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let report = MetricsReport::new(vec![(acc, auc)]);
    report.write_csv(
        &out.join("metrics.csv"),
        &[
            format!("checkpoint: {}", checkpoint.display()),
            format!("manifest: {}", manifest.display()),
            format!("fold: {fold}"),
        ],
    )?;
    log::info!("fold {fold}: accuracy {acc:.4}, auc {auc:.4}");
    Ok(())
}

/// Tiny-model full gradient check; prints one line per parameter group.
pub fn cmd_gradcheck(h: f64, seed: u64, threshold: f64) -> Result<bool> {
    let mut all_pass = true;
    for matching in [MatchKind::Inner, MatchKind::Bilinear] {
        let config = ModelConfig {
            n_roi: 6,
            feature_dim: 8,
            t: 3,
            d: 4,
            order: 3,
            hops: 2,
            h_head: 5,
            matching,
            activation: memgcn::model::Activation::Relu,
            mask_padding: false,
            ablate_memory: false,
            tie_hop_maps: false,
            normalize_connectivity: false,
        };
        let label = match matching {
            MatchKind::Inner => "inner",
            MatchKind::Bilinear => "bilinear",
        };
        let report = model_grad_check_default(&config, h, seed)?;
        for (group, err) in report {
            let status = if err <= threshold { "pass" } else { "FAIL" };
            if err > threshold {
                all_pass = false;
            }
            println!("{label:9} {group:16} max_rel_error {err:.3e}  {status}");
        }
    }
    Ok(all_pass)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum InterpretMode {
    Roi,
    Edges,
    Attention,
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_interpret(
    checkpoint: &Path,
    manifest: &Path,
    out: &Path,
    mode: InterpretMode,
    acquisition: Option<&str>,
    top_k: usize,
    max_pairs: Option<usize>,
    sample_seed: u64,
) -> Result<()> {
    let (params, model_config, train_config) = load_checkpoint(checkpoint)?;
    let mut cohort = load_cohort(manifest)?;
    if cohort.t() != model_config.t {
        cohort.repad(model_config.t)?;
    }
    if cohort.n_roi() != model_config.n_roi {
        return Err(Error::validation(format!(
            "checkpoint was trained on {} ROIs, cohort has {}",
            model_config.n_roi,
            cohort.n_roi()
        )));
    }
    let graph = spatial_graph(&cohort, train_config.seed)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let sample = max_pairs.map(|max_pairs| ReportSample {
        max_pairs,
        seed: sample_seed,
    });
    let notes = vec![
        format!("checkpoint: {}", checkpoint.display()),
        format!("manifest: {}", manifest.display()),
        format!("sample_seed: {sample_seed}"),
    ];

    match mode {
        InterpretMode::Roi => {
            let report = roi_similarity_report(&params, &model_config, &graph, &cohort, sample)?;
            let path = out.join("roi_similarity.csv");
            report.write_csv(&path, &notes)?;
            log::info!("wrote {}", path.display());
        }
        InterpretMode::Edges => {
            let report =
                edge_pattern_report(&params, &model_config, &graph, &cohort, top_k, sample)?;
            let path = out.join("edge_patterns.csv");
            report.write_csv(&path, &notes)?;
            log::info!("wrote {}", path.display());
        }
        InterpretMode::Attention => {
            let id = acquisition.ok_or_else(|| {
                Error::validation("attention mode needs --acquisition <id>")
            })?;
            let paths = attention_trace_export(&params, &model_config, &graph, &cohort, id, out)?;
            for p in paths {
                log::info!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

