//! Metrics and interpretability reports: accuracy, rank-based AUC,
//! cross-validated aggregation, per-ROI similarity rankings, bilinear edge
//! patterns, and attention-trace export.

use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::{Cohort, Group};
use crate::error::{Error, Result};
use crate::graph::SpatialGraph;
use crate::matching::MatchKind;
use crate::memory::memgcn_forward_cached;
use crate::model::{match_features, prepare_input, ModelConfig, ModelParams};
use crate::numerics::rng::{seeded_rng, shuffle};
use crate::numerics::Mat;

/// Fraction of pairs whose thresholded matching probability equals the label.
/// Probabilities at the threshold count as predicting the matching class.
pub fn accuracy(probs: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::validation("accuracy needs equal-length, non-empty inputs"));
    }
    let mut correct = 0usize;
    for (&p, &label) in probs.iter().zip(labels) {
        if label > 1 {
            return Err(Error::validation(format!("label must be 0 or 1, got {label}")));
        }
        let predicted = u8::from(p >= threshold);
        if predicted == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / probs.len() as f64)
}

/// Area under the ROC curve via the Mann-Whitney rank statistic, with tied
/// scores contributing half weight: the probability that a random positive
/// outscores a random negative.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::validation("auc needs equal-length inputs"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.iter().filter(|&&l| l == 0).count();
    if pos + neg != labels.len() {
        return Err(Error::validation("labels must be 0 or 1"));
    }
    if pos == 0 || neg == 0 {
        return Err(Error::validation("auc needs both classes present"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("auc scores must be finite"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].partial_cmp(&scores[j]).expect("finite scores"));

    // average ranks over tie groups (1-based)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let n = neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Per-fold accuracy/AUC pairs with their aggregates.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub per_fold: Vec<(f64, f64)>,
}

impl MetricsReport {
    pub fn new(per_fold: Vec<(f64, f64)>) -> Self {
        MetricsReport { per_fold }
    }

    pub fn mean_accuracy(&self) -> f64 {
        mean(self.per_fold.iter().map(|f| f.0))
    }

    pub fn mean_auc(&self) -> f64 {
        mean(self.per_fold.iter().map(|f| f.1))
    }

    pub fn sd_accuracy(&self) -> f64 {
        sd(self.per_fold.iter().map(|f| f.0))
    }

    pub fn sd_auc(&self) -> f64 {
        sd(self.per_fold.iter().map(|f| f.1))
    }

    /// `fold,accuracy,auc` rows plus mean/sd summary rows.
    pub fn write_csv(&self, path: &Path, header_notes: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            for note in header_notes {
                writeln!(w, "# {note}")?;
            }
            writeln!(w, "fold,accuracy,auc")?;
            for (i, (acc, auc)) in self.per_fold.iter().enumerate() {
                writeln!(w, "{i},{acc:.6},{auc:.6}")?;
            }
            writeln!(w, "mean,{:.6},{:.6}", self.mean_accuracy(), self.mean_auc())?;
            writeln!(w, "sd,{:.6},{:.6}", self.sd_accuracy(), self.sd_auc())?;
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (the usual "mean (sd)" presentation).
fn sd(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Optional seeded subsampling of the report pair lists.
#[derive(Debug, Clone, Copy)]
pub struct ReportSample {
    pub max_pairs: usize,
    pub seed: u64,
}

/// Ranked ROI lists from the inner-matching similarity vectors.
#[derive(Debug, Clone)]
pub struct RoiReport {
    /// Descending mean case-case similarity.
    pub identical: Vec<(usize, f64)>,
    /// Ascending mean case-control similarity.
    pub discriminative: Vec<(usize, f64)>,
    /// (used, total) case-case pairs.
    pub case_case_pairs: (usize, usize),
    /// (used, total) case-control pairs.
    pub case_control_pairs: (usize, usize),
}

fn group_pairs(groups: &[Group]) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let mut case_case = Vec::new();
    let mut case_control = Vec::new();
    for i in 0..groups.len() {
        for j in (i + 1)..groups.len() {
            match (groups[i], groups[j]) {
                (Group::Case, Group::Case) => case_case.push((i, j)),
                (Group::Case, Group::Control) => case_control.push((i, j)),
                (Group::Control, Group::Case) => case_control.push((j, i)),
                (Group::Control, Group::Control) => {}
            }
        }
    }
    (case_case, case_control)
}

fn subsample(pairs: Vec<(usize, usize)>, sample: Option<ReportSample>, salt: u64) -> (Vec<(usize, usize)>, usize) {
    let total = pairs.len();
    match sample {
        Some(s) if total > s.max_pairs => {
            let mut pairs = pairs;
            let mut rng = seeded_rng(s.seed.wrapping_add(salt));
            shuffle(&mut rng, &mut pairs);
            pairs.truncate(s.max_pairs);
            (pairs, total)
        }
        _ => (pairs, total),
    }
}

/// Final feature maps for every acquisition referenced by the given pairs,
/// computed once each.
fn feature_maps(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SpatialGraph,
    cohort: &Cohort,
    pairs: &[&[(usize, usize)]],
) -> Result<Vec<Option<Mat>>> {
    let mut needed = vec![false; cohort.len()];
    for list in pairs {
        for &(a, b) in *list {
            needed[a] = true;
            needed[b] = true;
        }
    }
    let mut features: Vec<Option<Mat>> = vec![None; cohort.len()];
    for (idx, acq) in cohort.acquisitions.iter().enumerate() {
        if !needed[idx] {
            continue;
        }
        let x = prepare_input(&acq.x, config);
        let fwd = memgcn_forward_cached(&x, &acq.sequence, params, config, graph)?;
        features[idx] = Some(fwd.output().clone());
    }
    Ok(features)
}

/// Mean per-ROI similarity over case-case pairs (identical ROIs, descending)
/// and case-control pairs (discriminative ROIs, ascending). Rank ties break
/// toward the smaller ROI index.
pub fn roi_similarity_report(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SpatialGraph,
    cohort: &Cohort,
    sample: Option<ReportSample>,
) -> Result<RoiReport> {
    if config.matching != MatchKind::Inner {
        return Err(Error::validation(
            "ROI similarity report needs an inner-matching model; use the edge pattern report for bilinear models",
        ));
    }
    let groups = cohort.groups();
    let (case_case, case_control) = group_pairs(&groups);
    if case_case.is_empty() || case_control.is_empty() {
        return Err(Error::validation("report needs both case-case and case-control pairs"));
    }
    let (cc_pairs, cc_total) = subsample(case_case, sample, 0);
    let (cx_pairs, cx_total) = subsample(case_control, sample, 1);

    let features = feature_maps(params, config, graph, cohort, &[&cc_pairs, &cx_pairs])?;
    let n = config.n_roi;

    let mean_sims = |pairs: &[(usize, usize)]| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; n];
        for &(a, b) in pairs {
            let ya = features[a].as_ref().expect("computed");
            let yb = features[b].as_ref().expect("computed");
            let sims = crate::matching::inner_matching(ya, yb)?;
            for (s, v) in acc.iter_mut().zip(&sims) {
                *s += v;
            }
        }
        for s in &mut acc {
            *s /= pairs.len() as f64;
        }
        Ok(acc)
    };

    let cc_mean = mean_sims(&cc_pairs)?;
    let cx_mean = mean_sims(&cx_pairs)?;

    let mut identical: Vec<(usize, f64)> = cc_mean.iter().copied().enumerate().collect();
    identical.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite").then(a.0.cmp(&b.0)));
    let mut discriminative: Vec<(usize, f64)> = cx_mean.iter().copied().enumerate().collect();
    discriminative.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite").then(a.0.cmp(&b.0)));

    Ok(RoiReport {
        identical,
        discriminative,
        case_case_pairs: (cc_pairs.len(), cc_total),
        case_control_pairs: (cx_pairs.len(), cx_total),
    })
}

impl RoiReport {
    pub fn write_csv(&self, path: &Path, header_notes: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            for note in header_notes {
                writeln!(w, "# {note}")?;
            }
            writeln!(
                w,
                "# case_case_pairs: {} of {}; case_control_pairs: {} of {}",
                self.case_case_pairs.0,
                self.case_case_pairs.1,
                self.case_control_pairs.0,
                self.case_control_pairs.1
            )?;
            writeln!(w, "rank,identical_roi,identical_score,discriminative_roi,discriminative_score")?;
            for (rank, (id, disc)) in self.identical.iter().zip(&self.discriminative).enumerate() {
                writeln!(w, "{},{},{:.6},{},{:.6}", rank + 1, id.0, id.1, disc.0, disc.1)?;
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

/// Ranked ROI-pair lists from the bilinear similarity matrices.
#[derive(Debug, Clone)]
pub struct EdgeReport {
    /// Descending mean case-case similarity.
    pub identical: Vec<(usize, usize, f64)>,
    /// Ascending mean case-control similarity.
    pub discriminative: Vec<(usize, usize, f64)>,
    pub case_case_pairs: (usize, usize),
    pub case_control_pairs: (usize, usize),
}

/// Average the bilinear similarity matrices per group pairing and return the
/// `top_k` strongest identical cells and most negative discriminative cells.
pub fn edge_pattern_report(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SpatialGraph,
    cohort: &Cohort,
    top_k: usize,
    sample: Option<ReportSample>,
) -> Result<EdgeReport> {
    if config.matching != MatchKind::Bilinear {
        return Err(Error::validation(
            "edge pattern report needs a bilinear-matching model; use the ROI similarity report for inner models",
        ));
    }
    let groups = cohort.groups();
    let (case_case, case_control) = group_pairs(&groups);
    if case_case.is_empty() || case_control.is_empty() {
        return Err(Error::validation("report needs both case-case and case-control pairs"));
    }
    let (cc_pairs, cc_total) = subsample(case_case, sample, 0);
    let (cx_pairs, cx_total) = subsample(case_control, sample, 1);

    let features = feature_maps(params, config, graph, cohort, &[&cc_pairs, &cx_pairs])?;
    let n = config.n_roi;

    let mean_matrix = |pairs: &[(usize, usize)]| -> Result<Mat> {
        let mut acc = Mat::zeros(n, n);
        for &(a, b) in pairs {
            let ya = features[a].as_ref().expect("computed");
            let yb = features[b].as_ref().expect("computed");
            let sim = match match_features(ya, yb, params, config)? {
                crate::matching::MatchOutput::Bilinear(m) => m,
                crate::matching::MatchOutput::Inner(_) => unreachable!("bilinear checked"),
            };
            acc.add_scaled(&sim, 1.0);
        }
        Ok(acc.scale(1.0 / pairs.len() as f64))
    };

    let cc_mean = mean_matrix(&cc_pairs)?;
    let cx_mean = mean_matrix(&cx_pairs)?;
    let k = top_k.min(n * n);

    let ranked = |m: &Mat, ascending: bool| -> Vec<(usize, usize, f64)> {
        let mut cells: Vec<(usize, usize, f64)> = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, m.get(i, j)))
            .collect();
        cells.sort_by(|a, b| {
            let ord = a.2.partial_cmp(&b.2).expect("finite");
            let ord = if ascending { ord } else { ord.reverse() };
            ord.then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
        });
        cells.truncate(k);
        cells
    };

    Ok(EdgeReport {
        identical: ranked(&cc_mean, false),
        discriminative: ranked(&cx_mean, true),
        case_case_pairs: (cc_pairs.len(), cc_total),
        case_control_pairs: (cx_pairs.len(), cx_total),
    })
}

impl EdgeReport {
    pub fn write_csv(&self, path: &Path, header_notes: &[String]) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            for note in header_notes {
                writeln!(w, "# {note}")?;
            }
            writeln!(
                w,
                "# case_case_pairs: {} of {}; case_control_pairs: {} of {}",
                self.case_case_pairs.0,
                self.case_case_pairs.1,
                self.case_control_pairs.0,
                self.case_control_pairs.1
            )?;
            writeln!(w, "list,rank,roi_i,roi_j,score")?;
            for (rank, (i, j, s)) in self.identical.iter().enumerate() {
                writeln!(w, "identical,{},{i},{j},{s:.6}", rank + 1)?;
            }
            for (rank, (i, j, s)) in self.discriminative.iter().enumerate() {
                writeln!(w, "discriminative,{},{i},{j},{s:.6}", rank + 1)?;
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

/// Write one `t x n` attention CSV per hop for a single acquisition. Each
/// column (one ROI) sums to 1. Returns the written paths.
pub fn attention_trace_export(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &SpatialGraph,
    cohort: &Cohort,
    acquisition_id: &str,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let acq = cohort
        .acquisitions
        .iter()
        .find(|a| a.id == acquisition_id)
        .ok_or_else(|| Error::validation(format!("no acquisition with id `{acquisition_id}`")))?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let x = prepare_input(&acq.x, config);
    let fwd = memgcn_forward_cached(&x, &acq.sequence, params, config, graph)?;
    let trace = fwd.trace();

    let mut paths = Vec::with_capacity(trace.per_hop.len());
    for (hop, m) in trace.per_hop.iter().enumerate() {
        let path = out_dir.join(format!("attention_hop{}.csv", hop + 1));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            let header: Vec<String> = (0..m.cols()).map(|c| format!("roi_{c}")).collect();
            writeln!(w, "{}", header.join(","))?;
            for i in 0..m.rows() {
                let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:.12e}")).collect();
                writeln!(w, "{}", row.join(","))?;
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
