//! Cohort ingestion and generation: manifest-driven loading of connectivity
//! and clinical-sequence files, one-hot binarization of categorical records,
//! front padding, and a seeded synthetic two-modality cohort for desk-scale
//! experiments.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::RoiCoordinates;
use crate::memory::ClinicalSequence;
use crate::numerics::rng::{seeded_rng, shuffle, standard_normal};
use crate::numerics::Mat;
use rand::Rng;

/// Diagnostic group of an acquisition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Case,
    Control,
}

/// One sample: a connectivity matrix, its aligned clinical sequence, and the
/// group label.
#[derive(Debug, Clone)]
pub struct Acquisition {
    pub id: String,
    pub x: Mat,
    pub sequence: ClinicalSequence,
    pub group: Group,
}

/// A loaded or generated cohort.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub coords: RoiCoordinates,
    pub acquisitions: Vec<Acquisition>,
    /// Human-readable notes collected during ingestion (unknown categories,
    /// clamped probabilities).
    pub load_report: Vec<String>,
}

impl Cohort {
    pub fn n_roi(&self) -> usize {
        self.coords.len()
    }

    pub fn len(&self) -> usize {
        self.acquisitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.acquisitions.is_empty()
    }

    pub fn groups(&self) -> Vec<Group> {
        self.acquisitions.iter().map(|a| a.group).collect()
    }

    /// Memory size shared by all sequences.
    pub fn t(&self) -> usize {
        self.acquisitions.first().map_or(0, |a| a.sequence.t())
    }

    pub fn feature_dim(&self) -> usize {
        self.acquisitions.first().map_or(0, |a| a.sequence.feature_dim())
    }

    /// Re-pad every sequence to a different memory size (keeps the most
    /// recent records when shrinking).
    pub fn repad(&mut self, t: usize) -> Result<()> {
        let dim = self.feature_dim();
        for acq in &mut self.acquisitions {
            let seq = &acq.sequence;
            let rows: Vec<Vec<f64>> = (seq.pad_count()..seq.t())
                .map(|i| seq.slots().row(i).to_vec())
                .collect();
            acq.sequence = pad_sequence(&rows, t, dim)?;
        }
        Ok(())
    }
}

// --- manifest loading ----------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    coords: String,
    acquisitions: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    connectivity: String,
    sequence: String,
    group: Group,
}

/// Load a cohort from a JSON manifest. Connectivity matrices are
/// symmetrized as `(x + x^T) / 2`; all sequences are padded to the longest
/// record count in the cohort.
pub fn load_cohort(manifest_path: &Path) -> Result<Cohort> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("manifest {}: {e}", manifest_path.display())))?;
    if manifest.acquisitions.is_empty() {
        return Err(Error::validation("manifest lists no acquisitions"));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let coords = RoiCoordinates::read_csv(&base.join(&manifest.coords))?;
    let n = coords.len();

    let schema = match &manifest.schema {
        Some(rel) => Some(Schema::read_json(&base.join(rel))?),
        None => None,
    };

    let mut report = Vec::new();
    let mut raw: Vec<(String, Mat, Vec<Vec<f64>>, Group)> = Vec::new();
    let mut feature_dim: Option<usize> = None;
    for entry in &manifest.acquisitions {
        let conn_path = base.join(&entry.connectivity);
        let x = read_matrix_csv(&conn_path)?;
        if x.rows() != n || x.cols() != n {
            return Err(Error::validation(format!(
                "acquisition {}: connectivity is {}x{}, expected {n}x{n} from the coordinate file",
                entry.id,
                x.rows(),
                x.cols()
            )));
        }
        let x = symmetrize(&x);
        for v in x.as_slice() {
            if *v < 0.0 {
                return Err(Error::validation(format!(
                    "acquisition {}: connectivity has negative entries",
                    entry.id
                )));
            }
        }

        let seq_path = base.join(&entry.sequence);
        let rows = match &schema {
            Some(schema) => {
                let (names, records) = read_categorical_csv(&seq_path)?;
                let (rows, warnings) = binarize_features(&names, &records, schema)?;
                for w in warnings {
                    report.push(format!("{}: {w}", entry.id));
                }
                rows
            }
            None => read_binary_rows_csv(&seq_path)?,
        };
        if let Some(first) = rows.first() {
            match feature_dim {
                None => feature_dim = Some(first.len()),
                Some(d) if d != first.len() => {
                    return Err(Error::validation(format!(
                        "acquisition {}: sequence width {} differs from cohort width {d}",
                        entry.id,
                        first.len()
                    )))
                }
                _ => {}
            }
        }
        raw.push((entry.id.clone(), x, rows, entry.group));
    }

    let dim = feature_dim
        .ok_or_else(|| Error::validation("no acquisition carries any sequence rows"))?;
    let t = raw.iter().map(|(_, _, rows, _)| rows.len()).max().unwrap_or(0);
    if t == 0 {
        return Err(Error::validation("all sequences are empty"));
    }

    let mut acquisitions = Vec::with_capacity(raw.len());
    for (id, x, rows, group) in raw {
        let sequence = pad_sequence(&rows, t, dim)?;
        acquisitions.push(Acquisition { id, x, sequence, group });
    }
    Ok(Cohort {
        coords,
        acquisitions,
        load_report: report,
    })
}

fn symmetrize(x: &Mat) -> Mat {
    let n = x.rows();
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, 0.5 * (x.get(i, j) + x.get(j, i)));
        }
    }
    out
}

// --- schema and binarization ----------------------------------------------

/// Ordered mapping from feature name to its category list. The binary layout
/// is one block per feature, block width = category count, in schema order.
#[derive(Debug, Clone)]
pub struct Schema {
    pub features: Vec<(String, Vec<String>)>,
}

impl Schema {
    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
            .map_err(|e| Error::validation(format!("schema {}: {e}", path.display())))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let map: serde_json::Map<String, serde_json::Value> = serde_json::from_str(text)
            .map_err(|e| Error::validation(format!("schema is not a JSON object: {e}")))?;
        let mut features = Vec::with_capacity(map.len());
        for (name, value) in map {
            let cats = value
                .as_array()
                .ok_or_else(|| Error::validation(format!("schema feature {name}: categories must be an array")))?
                .iter()
                .map(|v| {
                    v.as_str()
                        .map(str::to_string)
                        .ok_or_else(|| Error::validation(format!("schema feature {name}: categories must be strings")))
                })
                .collect::<Result<Vec<String>>>()?;
            if cats.is_empty() {
                return Err(Error::validation(format!("schema feature {name} has no categories")));
            }
            features.push((name, cats));
        }
        Ok(Schema { features })
    }

    /// Total binary dimension `D` (sum of category counts).
    pub fn feature_dim(&self) -> usize {
        self.features.iter().map(|(_, cats)| cats.len()).sum()
    }
}

/// One-hot expansion of categorical records. `feature_names` gives the
/// column order of `records`; the output layout follows the schema order.
/// Unknown categories produce an all-zero block and a warning note.
pub fn binarize_features(
    feature_names: &[String],
    records: &[Vec<String>],
    schema: &Schema,
) -> Result<(Vec<Vec<f64>>, Vec<String>)> {
    // every schema feature must appear exactly once in the record header
    let mut column_of = Vec::with_capacity(schema.features.len());
    for (name, _) in &schema.features {
        let col = feature_names
            .iter()
            .position(|f| f == name)
            .ok_or_else(|| Error::validation(format!("records are missing schema feature `{name}`")))?;
        column_of.push(col);
    }
    for name in feature_names {
        if !schema.features.iter().any(|(f, _)| f == name) {
            return Err(Error::validation(format!("record feature `{name}` is not in the schema")));
        }
    }

    let dim = schema.feature_dim();
    let mut rows = Vec::with_capacity(records.len());
    let mut warnings = Vec::new();
    for (row_idx, record) in records.iter().enumerate() {
        if record.len() != feature_names.len() {
            return Err(Error::validation(format!(
                "record {row_idx} has {} values, header has {}",
                record.len(),
                feature_names.len()
            )));
        }
        let mut row = vec![0.0; dim];
        let mut offset = 0;
        for ((name, cats), &col) in schema.features.iter().zip(&column_of) {
            let value = record[col].trim();
            match cats.iter().position(|c| c == value) {
                Some(k) => row[offset + k] = 1.0,
                None => warnings.push(format!(
                    "row {row_idx}, feature `{name}`: unknown category `{value}` encoded as zero block"
                )),
            }
            offset += cats.len();
        }
        rows.push(row);
    }
    Ok((rows, warnings))
}

/// Front-pad (or truncate to the most recent `t`) a list of binary rows into
/// a fixed-size sequence.
pub fn pad_sequence(rows: &[Vec<f64>], t: usize, feature_dim: usize) -> Result<ClinicalSequence> {
    if t == 0 {
        return Err(Error::validation("memory size t must be at least 1"));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != feature_dim {
            return Err(Error::validation(format!(
                "sequence row {i} has {} entries, expected {feature_dim}",
                row.len()
            )));
        }
    }
    let keep = if rows.len() > t { &rows[rows.len() - t..] } else { rows };
    let pad_count = t - keep.len();
    let mut s = Mat::zeros(t, feature_dim);
    for (i, row) in keep.iter().enumerate() {
        s.row_mut(pad_count + i).copy_from_slice(row);
    }
    ClinicalSequence::new(s, pad_count)
}

// --- synthetic cohort ------------------------------------------------------

/// Parameters of the planted-signal synthetic cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_roi: usize,
    pub n_case: usize,
    pub n_control: usize,
    /// Connectivity added on the planted ROI block for case acquisitions.
    pub conn_signal: f64,
    /// Extra Bernoulli probability (ramped over slots) on the planted
    /// feature columns for case sequences.
    pub seq_signal: f64,
    /// Standard deviation of the symmetric connectivity noise.
    pub noise_sd: f64,
    /// Memory slots per sequence.
    pub t: usize,
    /// Binary feature dimension.
    pub d_features: usize,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_roi < 2 {
            return Err(Error::validation("synthetic cohort needs at least 2 ROIs"));
        }
        if self.n_case < 1 || self.n_control < 1 {
            return Err(Error::validation("synthetic cohort needs at least 1 case and 1 control"));
        }
        if self.t < 1 || self.d_features < 1 {
            return Err(Error::validation("t and feature dimension must be at least 1"));
        }
        for (name, v) in [
            ("conn_signal", self.conn_signal),
            ("seq_signal", self.seq_signal),
            ("noise_sd", self.noise_sd),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::validation(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// ROI indices of the planted connectivity block (~15% of ROIs, at least
    /// 2 so the block contains an edge).
    pub fn planted_block(&self) -> Vec<usize> {
        let size = ((self.n_roi as f64 * 0.15).ceil() as usize).clamp(2, self.n_roi);
        let mut order: Vec<usize> = (0..self.n_roi).collect();
        let mut rng = seeded_rng(self.seed.wrapping_add(1));
        shuffle(&mut rng, &mut order);
        let mut block = order[..size].to_vec();
        block.sort_unstable();
        block
    }

    /// Feature columns carrying the sequence signal (~20% of columns).
    pub fn planted_columns(&self) -> Vec<usize> {
        let size = ((self.d_features as f64 * 0.2).ceil() as usize).clamp(1, self.d_features);
        let mut order: Vec<usize> = (0..self.d_features).collect();
        let mut rng = seeded_rng(self.seed.wrapping_add(2));
        shuffle(&mut rng, &mut order);
        let mut cols = order[..size].to_vec();
        cols.sort_unstable();
        cols
    }
}

const BASE_EVENT_PROB: f64 = 0.1;

/// Deterministic synthetic cohort: shared base connectivity, a case-only
/// connectivity boost on a planted ROI block, and a case-only upward drift on
/// a planted subset of sequence columns.
pub fn generate_synthetic_cohort(spec: &SynthSpec) -> Result<Cohort> {
    spec.validate()?;
    let n = spec.n_roi;
    let mut rng = seeded_rng(spec.seed);
    let mut report = Vec::new();

    let coords = RoiCoordinates::new(
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..1.0),
                ]
            })
            .collect(),
    )?;

    // shared base connectivity
    let mut base = Mat::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = rng.gen_range(0.0..1.0);
            base.set(i, j, v);
            base.set(j, i, v);
        }
    }

    let block = spec.planted_block();
    let in_block = {
        let mut flags = vec![false; n];
        for &i in &block {
            flags[i] = true;
        }
        flags
    };
    let signal_cols = spec.planted_columns();
    let is_signal_col = {
        let mut flags = vec![false; spec.d_features];
        for &c in &signal_cols {
            flags[c] = true;
        }
        flags
    };

    let mut clamped = false;
    let mut acquisitions = Vec::with_capacity(spec.n_case + spec.n_control);
    for idx in 0..(spec.n_case + spec.n_control) {
        let group = if idx < spec.n_case { Group::Case } else { Group::Control };

        let mut x = Mat::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let mut v = base.get(i, j) + spec.noise_sd * standard_normal(&mut rng);
                if group == Group::Case && in_block[i] && in_block[j] {
                    v += spec.conn_signal;
                }
                let v = v.max(0.0);
                x.set(i, j, v);
                x.set(j, i, v);
            }
        }

        let mut s = Mat::zeros(spec.t, spec.d_features);
        for slot in 0..spec.t {
            let ramp = ((slot + 1) as f64 / spec.t as f64).min(1.0);
            for col in 0..spec.d_features {
                let mut p = BASE_EVENT_PROB;
                if group == Group::Case && is_signal_col[col] {
                    p += spec.seq_signal * ramp;
                }
                if p > 1.0 {
                    p = 1.0;
                    clamped = true;
                }
                if rng.gen_bool(p) {
                    s.set(slot, col, 1.0);
                }
            }
        }

        let id = match group {
            Group::Case => format!("case_{:03}", idx),
            Group::Control => format!("control_{:03}", idx - spec.n_case),
        };
        acquisitions.push(Acquisition {
            id,
            x,
            sequence: ClinicalSequence::new(s, 0)?,
            group,
        });
    }
    if clamped {
        log::warn!("seq_signal pushed event probability above 1; clamped");
        report.push("seq_signal clamped at probability 1".to_string());
    }
    Ok(Cohort {
        coords,
        acquisitions,
        load_report: report,
    })
}

// --- writing a cohort to disk ----------------------------------------------

/// Write a cohort in the manifest layout that `load_cohort` reads back.
/// Floats are written with full round-trip precision, so two writes of the
/// same cohort are byte-identical.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cohort.coords.write_csv(&dir.join("coords.csv"))?;

    let mut entries = Vec::with_capacity(cohort.len());
    for acq in &cohort.acquisitions {
        let conn = format!("{}.conn.csv", acq.id);
        let seq = format!("{}.seq.csv", acq.id);
        write_matrix_csv(&acq.x, &dir.join(&conn))?;
        write_binary_rows_csv(acq.sequence.slots(), acq.sequence.pad_count(), &dir.join(&seq))?;
        entries.push(ManifestEntry {
            id: acq.id.clone(),
            connectivity: conn,
            sequence: seq,
            group: acq.group,
        });
    }
    let manifest = Manifest {
        coords: "coords.csv".to_string(),
        acquisitions: entries,
        schema: None,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::validation(format!("manifest serialization: {e}")))?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

// --- CSV primitives ----------------------------------------------------------

/// Dense headerless numeric CSV.
pub fn read_matrix_csv(path: &Path) -> Result<Mat> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (row_idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col_idx, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|e: std::num::ParseFloatError| Error::Parse {
                path: path.into(),
                row: row_idx,
                col: col_idx,
                message: e.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.into(),
                    row: row_idx,
                    col: col_idx,
                    message: "non-finite value".to_string(),
                });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::Parse {
                    path: path.into(),
                    row: row_idx,
                    col: row.len(),
                    message: format!("expected {} columns, got {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            row: 0,
            col: 0,
            message: "empty matrix file".to_string(),
        });
    }
    Mat::from_rows(&rows)
}

pub fn write_matrix_csv(m: &Mat, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        for i in 0..m.rows() {
            let row = m.row(i);
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    write!(w, ",")?;
                }
                write!(w, "{v:.17e}")?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

/// Headerless 0/1 rows.
fn read_binary_rows_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut rows = Vec::new();
    for (row_idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col_idx, field) in line.split(',').enumerate() {
            match field.trim() {
                "0" => row.push(0.0),
                "1" => row.push(1.0),
                other => {
                    return Err(Error::Parse {
                        path: path.into(),
                        row: row_idx,
                        col: col_idx,
                        message: format!("expected 0 or 1, got `{other}`"),
                    })
                }
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Non-padded slots as 0/1 rows (padding rows are not written; `load_cohort`
/// re-pads to the cohort maximum).
fn write_binary_rows_csv(s: &Mat, pad_count: usize, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        for i in pad_count..s.rows() {
            let row = s.row(i);
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    write!(w, ",")?;
                }
                write!(w, "{}", if *v != 0.0 { 1 } else { 0 })?;
            }
            writeln!(w)?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

/// Categorical CSV with a header row of feature names.
fn read_categorical_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = std::io::BufReader::new(file);
    let mut names: Vec<String> = Vec::new();
    let mut records: Vec<Vec<String>> = Vec::new();
    for (row_idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split(',').map(|f| f.trim().to_string()).collect();
        if row_idx == 0 {
            names = fields;
        } else {
            records.push(fields);
        }
    }
    if names.is_empty() {
        return Err(Error::Parse {
            path: path.into(),
            row: 0,
            col: 0,
            message: "missing header row".to_string(),
        });
    }
    Ok((names, records))
}
