//! Shared ROI spatial graph: k-nearest-neighbor Gaussian adjacency over 3-D
//! region coordinates, plus the normalized and rescaled Laplacians every
//! graph convolution operates on.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{lambda_max, Mat};

/// 3-D center coordinates for each ROI, in a common anatomical space.
#[derive(Debug, Clone)]
pub struct RoiCoordinates {
    coords: Vec<[f64; 3]>,
}

impl RoiCoordinates {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self> {
        if coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("ROI coordinates must be finite"));
        }
        Ok(RoiCoordinates { coords })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn get(&self, i: usize) -> [f64; 3] {
        self.coords[i]
    }

    /// Squared Euclidean distance between two ROI centers.
    pub fn dist_sq(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coords[i], self.coords[j]);
        (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
    }

    /// Read a `roi_id,x,y,z` CSV (header required, ids dense `0..n-1`).
    pub fn read_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let reader = std::io::BufReader::new(file);
        let mut coords = Vec::new();
        for (line_no, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let line = line.trim();
            if line_no == 0 {
                if line != "roi_id,x,y,z" {
                    return Err(Error::Parse {
                        path: path.into(),
                        row: 0,
                        col: 0,
                        message: format!("expected header `roi_id,x,y,z`, got `{line}`"),
                    });
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    path: path.into(),
                    row: line_no,
                    col: fields.len(),
                    message: "expected 4 comma-separated fields".into(),
                });
            }
            let parse = |col: usize| -> Result<f64> {
                fields[col].trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: path.into(),
                    row: line_no,
                    col,
                    message: e.to_string(),
                })
            };
            let id = fields[0].trim().parse::<usize>().map_err(|e| Error::Parse {
                path: path.into(),
                row: line_no,
                col: 0,
                message: e.to_string(),
            })?;
            if id != coords.len() {
                return Err(Error::Parse {
                    path: path.into(),
                    row: line_no,
                    col: 0,
                    message: format!("roi ids must be dense and ordered; expected {}, got {id}", coords.len()),
                });
            }
            coords.push([parse(1)?, parse(2)?, parse(3)?]);
        }
        RoiCoordinates::new(coords)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut emit = || -> std::io::Result<()> {
            writeln!(w, "roi_id,x,y,z")?;
            for (i, c) in self.coords.iter().enumerate() {
                writeln!(w, "{i},{:.17e},{:.17e},{:.17e}", c[0], c[1], c[2])?;
            }
            w.flush()
        };
        emit().map_err(|e| Error::io(path, e))
    }
}

/// How the Gaussian kernel width is chosen when building the k-NN graph.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaPolicy {
    /// Mean over vertices of the distance to their k-th nearest neighbor.
    /// Self-scaling: keeps edge weights well spread for arbitrary coordinate
    /// units.
    MeanKthNeighbor,
    /// A fixed positive width.
    Fixed(f64),
}

impl Default for SigmaPolicy {
    fn default() -> Self {
        SigmaPolicy::MeanKthNeighbor
    }
}

/// The shared spatial graph with its Laplacians.
#[derive(Debug, Clone)]
pub struct SpatialGraph {
    /// Symmetric nonnegative adjacency with zero diagonal.
    pub w: Mat,
    /// Normalized Laplacian `I - D^{-1/2} W D^{-1/2}`.
    pub delta: Mat,
    /// `(2 / lambda_max) * delta - I`; spectrum in `[-1, 1]`.
    pub delta_tilde: Mat,
    /// Largest eigenvalue of `delta` used for the rescaling.
    pub lambda_max: f64,
    /// Number of unordered vertex pairs with positive weight.
    pub edge_count: usize,
}

impl SpatialGraph {
    /// Build adjacency, Laplacian, and rescaled Laplacian in one shot.
    pub fn build(coords: &RoiCoordinates, k: usize, sigma: SigmaPolicy, seed: u64) -> Result<Self> {
        let w = build_knn_graph(coords, k, sigma)?;
        Self::from_adjacency(w, seed)
    }

    /// Build the Laplacians from an existing adjacency.
    pub fn from_adjacency(w: Mat, seed: u64) -> Result<Self> {
        let delta = normalized_laplacian(&w)?;
        let lm = lambda_max(&delta, seed)?;
        // An all-isolated graph has delta == I and lambda_max == 1; a
        // genuinely zero lambda_max cannot occur since diagonals are 1.
        let delta_tilde = rescale_laplacian(&delta, lm)?;
        let n = w.rows();
        let mut edge_count = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if w.get(i, j) > 0.0 {
                    edge_count += 1;
                }
            }
        }
        Ok(SpatialGraph {
            w,
            delta,
            delta_tilde,
            lambda_max: lm,
            edge_count,
        })
    }

    pub fn n(&self) -> usize {
        self.w.rows()
    }
}

/// Mean ROI coordinates across subjects, per axis.
pub fn aggregate_coordinates(per_subject: &[Vec<[f64; 3]>]) -> Result<RoiCoordinates> {
    if per_subject.is_empty() {
        return Err(Error::validation("coordinate aggregation needs at least one subject"));
    }
    let n = per_subject[0].len();
    for (s, coords) in per_subject.iter().enumerate() {
        if coords.len() != n {
            return Err(Error::validation(format!(
                "subject {s} has {} ROIs, expected {n}",
                coords.len()
            )));
        }
    }
    let m = per_subject.len() as f64;
    let mut mean = vec![[0.0f64; 3]; n];
    for coords in per_subject {
        for (acc, c) in mean.iter_mut().zip(coords) {
            acc[0] += c[0];
            acc[1] += c[1];
            acc[2] += c[2];
        }
    }
    for acc in &mut mean {
        acc[0] /= m;
        acc[1] /= m;
        acc[2] /= m;
    }
    RoiCoordinates::new(mean)
}

/// Gaussian-weighted union k-NN adjacency.
///
/// `w_ij = exp(-||v_i - v_j||^2 / (2 sigma^2))` whenever `i` is among the k
/// nearest neighbors of `j` or vice versa, 0 otherwise. A vertex is never its
/// own neighbor; neighbor ties break toward the smaller index. The output is
/// exactly symmetric: each unordered pair is computed once and mirrored.
pub fn build_knn_graph(coords: &RoiCoordinates, k: usize, sigma: SigmaPolicy) -> Result<Mat> {
    let n = coords.len();
    if n == 0 {
        return Err(Error::validation("cannot build a graph over zero ROIs"));
    }
    if k < 1 || k >= n {
        return Err(Error::validation(format!(
            "neighbor count must satisfy 1 <= k < n, got k={k}, n={n}"
        )));
    }

    // k nearest neighbors per vertex, ties by smaller index (sort_by on
    // (distance, index) is total because coordinates are finite).
    let mut neighbor_sets: Vec<Vec<usize>> = Vec::with_capacity(n);
    let mut kth_dist_sum = 0.0;
    for j in 0..n {
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&i| i != j)
            .map(|i| (coords.dist_sq(i, j), i))
            .collect();
        others.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        others.truncate(k);
        kth_dist_sum += others.last().expect("k >= 1").0.sqrt();
        neighbor_sets.push(others.into_iter().map(|(_, i)| i).collect());
    }

    let sigma = match sigma {
        SigmaPolicy::Fixed(s) => {
            if s <= 0.0 || !s.is_finite() {
                return Err(Error::validation(format!("sigma must be positive, got {s}")));
            }
            s
        }
        SigmaPolicy::MeanKthNeighbor => kth_dist_sum / n as f64,
    };

    let mut w = Mat::zeros(n, n);
    for j in 0..n {
        for &i in &neighbor_sets[j] {
            let d2 = coords.dist_sq(i, j);
            // Coincident ROIs get weight exp(0) = 1 regardless of sigma;
            // sigma can only be 0 under the self-scaling policy when every
            // neighbor distance is 0, so no positive distance reaches here
            // with sigma == 0.
            let weight = if d2 == 0.0 {
                1.0
            } else {
                (-d2 / (2.0 * sigma * sigma)).exp()
            };
            w.set(i, j, weight);
            w.set(j, i, weight);
        }
    }
    Ok(w)
}

/// Normalized graph Laplacian `I - D^{-1/2} W D^{-1/2}`.
///
/// Zero-degree vertices get a zero `D^{-1/2}` entry, so their row reduces to
/// the identity row. The output is exactly symmetric by construction.
pub fn normalized_laplacian(w: &Mat) -> Result<Mat> {
    w.check_symmetric(1e-12, "adjacency")?;
    w.check_finite("adjacency")?;
    let n = w.rows();
    for i in 0..n {
        if w.get(i, i) != 0.0 {
            return Err(Error::validation(format!("adjacency diagonal must be zero (vertex {i})")));
        }
        for j in 0..n {
            if w.get(i, j) < 0.0 {
                return Err(Error::validation(format!(
                    "adjacency weights must be nonnegative, got {} at ({i},{j})",
                    w.get(i, j)
                )));
            }
        }
    }
    let inv_sqrt_deg: Vec<f64> = (0..n)
        .map(|i| {
            let d: f64 = w.row(i).iter().sum();
            if d > 0.0 {
                1.0 / d.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut delta = Mat::identity(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = -w.get(i, j) * inv_sqrt_deg[i] * inv_sqrt_deg[j];
            delta.set(i, j, v);
            delta.set(j, i, v);
        }
    }
    Ok(delta)
}

/// `delta_tilde = (2 / lambda_max) * delta - I`.
pub fn rescale_laplacian(delta: &Mat, lambda_max: f64) -> Result<Mat> {
    if !(lambda_max > 0.0) || !lambda_max.is_finite() {
        return Err(Error::validation(format!(
            "lambda_max must be positive and finite, got {lambda_max}"
        )));
    }
    delta.check_symmetric(1e-10, "laplacian")?;
    let n = delta.rows();
    let s = 2.0 / lambda_max;
    let mut out = delta.scale(s);
    for i in 0..n {
        out.set(i, i, out.get(i, i) - 1.0);
    }
    Ok(out)
}
