//! Tabular ingestion and preprocessing: standardization, PCA projection,
//! shuffled splits, and optional partition labels carried through to
//! evaluation.

use std::path::Path;

use ndarray::prelude::*;
use ndarray_linalg::{Eigh, UPLO};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A tabular regression dataset: row-major features, targets, and optional
/// per-row partition labels used for stratified error tables.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array1<f64>,
    pub partition_labels: Option<Vec<String>>,
    pub feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        x: Array2<f64>,
        y: Array1<f64>,
        partition_labels: Option<Vec<String>>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        if y.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: y.len(),
            });
        }
        if let Some(labels) = &partition_labels {
            if labels.len() != n {
                return Err(Error::LengthMismatch {
                    left: n,
                    right: labels.len(),
                });
            }
        }
        if !feature_names.is_empty() && feature_names.len() != x.ncols() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                x.ncols()
            )));
        }
        Ok(Dataset {
            x,
            y,
            partition_labels,
            feature_names,
        })
    }

    /// Convenience constructor without labels; feature names are generated.
    pub fn from_xy(x: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let names = (0..x.ncols()).map(|i| format!("x{i}")).collect();
        Dataset::new(x, y, None, names)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    /// Rows at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let x = self.x.select(Axis(0), indices);
        let y = self.y.select(Axis(0), indices);
        let labels = self
            .partition_labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i].clone()).collect());
        Dataset {
            x,
            y,
            partition_labels: labels,
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Which CSV columns hold features, the target, and optional labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Feature columns; `None` means every column except target and label.
    pub features: Option<Vec<String>>,
    pub target: String,
    pub label: Option<String>,
    /// Field delimiter, comma by default.
    pub delimiter: Option<char>,
}

impl CsvSchema {
    pub fn new(target: impl Into<String>) -> Self {
        CsvSchema {
            features: None,
            target: target.into(),
            label: None,
            delimiter: None,
        }
    }
}

/// Result of CSV ingestion; rows containing non-finite values are dropped
/// and counted rather than poisoning the dataset.
#[derive(Debug)]
pub struct IngestReport {
    pub dataset: Dataset,
    pub rejected_rows: usize,
}

/// Reads a UTF-8, headered CSV file according to `schema`.
pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<IngestReport> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter.unwrap_or(',') as u8)
        .from_path(path.as_ref())?;
    let headers: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let col_of = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::SchemaMismatch(format!("column '{name}' not found in header")))
    };

    let target_col = col_of(&schema.target)?;
    let label_col = match &schema.label {
        Some(l) => Some(col_of(l)?),
        None => None,
    };
    let feature_cols: Vec<usize> = match &schema.features {
        Some(list) => list
            .iter()
            .map(|f| col_of(f))
            .collect::<Result<Vec<_>>>()?,
        None => (0..headers.len())
            .filter(|&i| i != target_col && Some(i) != label_col)
            .collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::SchemaMismatch("no feature columns".into()));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<f64> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    let mut rejected = 0usize;

    for record in reader.records() {
        let record = record?;
        let parse = |idx: usize| -> Option<f64> {
            record
                .get(idx)
                .and_then(|f| f.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
        };
        let feats: Option<Vec<f64>> = feature_cols.iter().map(|&c| parse(c)).collect();
        let target = parse(target_col);
        match (feats, target) {
            (Some(f), Some(t)) => {
                rows.push(f);
                targets.push(t);
                if let Some(lc) = label_col {
                    labels.push(record.get(lc).unwrap_or("").trim().to_string());
                }
            }
            _ => rejected += 1,
        }
    }

    if rows.is_empty() {
        return Err(Error::EmptyAfterFiltering);
    }
    let n = rows.len();
    let d = feature_cols.len();
    let mut x = Array2::zeros((n, d));
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            x[[i, j]] = *v;
        }
    }
    let dataset = Dataset::new(
        x,
        Array1::from_vec(targets),
        label_col.map(|_| labels),
        feature_cols.iter().map(|&c| headers[c].clone()).collect(),
    )?;
    Ok(IngestReport {
        dataset,
        rejected_rows: rejected,
    })
}

/// Per-feature and target location/scale transform. Uses the population
/// variance (divisor n). Constant columns map to zero with unit scale and
/// are flagged.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    pub feature_means: Vec<f64>,
    pub feature_scales: Vec<f64>,
    pub constant_features: Vec<bool>,
    pub target_mean: f64,
    pub target_scale: f64,
    pub target_constant: bool,
}

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone, n: usize) -> (f64, f64, bool) {
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let sd = var.sqrt();
    if sd > 0.0 {
        (mean, sd, false)
    } else {
        (mean, 1.0, true)
    }
}

/// Fits a [`Standardizer`] on `d` (needs at least two rows).
pub fn fit_standardize(d: &Dataset) -> Result<Standardizer> {
    let n = d.n();
    if n < 2 {
        return Err(Error::TooFewPoints { needed: 2, got: n });
    }
    let mut feature_means = Vec::with_capacity(d.dim());
    let mut feature_scales = Vec::with_capacity(d.dim());
    let mut constant_features = Vec::with_capacity(d.dim());
    for j in 0..d.dim() {
        let col = d.x.column(j);
        let (m, s, c) = mean_and_scale(col.iter().copied(), n);
        feature_means.push(m);
        feature_scales.push(s);
        constant_features.push(c);
    }
    let (target_mean, target_scale, target_constant) = mean_and_scale(d.y.iter().copied(), n);
    Ok(Standardizer {
        feature_means,
        feature_scales,
        constant_features,
        target_mean,
        target_scale,
        target_constant,
    })
}

impl Standardizer {
    pub fn apply_features(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for j in 0..out.ncols() {
            let (m, s) = (self.feature_means[j], self.feature_scales[j]);
            out.column_mut(j).mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    pub fn invert_features(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for j in 0..out.ncols() {
            let (m, s) = (self.feature_means[j], self.feature_scales[j]);
            out.column_mut(j).mapv_inplace(|v| v * s + m);
        }
        out
    }

    pub fn apply_target(&self, y: &Array1<f64>) -> Array1<f64> {
        y.mapv(|v| (v - self.target_mean) / self.target_scale)
    }

    pub fn invert_target(&self, y: &Array1<f64>) -> Array1<f64> {
        y.mapv(|v| v * self.target_scale + self.target_mean)
    }

    /// Maps a predictive mean from standardized to original target units.
    pub fn invert_target_mean(&self, mean: f64) -> f64 {
        mean * self.target_scale + self.target_mean
    }

    /// Maps a predictive variance from standardized to original units.
    pub fn invert_target_variance(&self, variance: f64) -> f64 {
        variance * self.target_scale * self.target_scale
    }

    pub fn apply(&self, d: &Dataset) -> Dataset {
        Dataset {
            x: self.apply_features(&d.x),
            y: self.apply_target(&d.y),
            partition_labels: d.partition_labels.clone(),
            feature_names: d.feature_names.clone(),
        }
    }

    pub fn invert(&self, d: &Dataset) -> Dataset {
        Dataset {
            x: self.invert_features(&d.x),
            y: self.invert_target(&d.y),
            partition_labels: d.partition_labels.clone(),
            feature_names: d.feature_names.clone(),
        }
    }
}

/// Projection onto the leading principal components of the training
/// features, with a deterministic sign convention.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaTransform {
    /// Column means the basis was fitted around.
    pub center: Vec<f64>,
    /// D x k orthonormal basis (flattened row-major), columns sorted by
    /// descending variance.
    pub basis_flat: Vec<f64>,
    pub input_dim: usize,
    pub components: usize,
    /// Variance captured by each kept component.
    pub component_variances: Vec<f64>,
}

/// Fits a PCA projection onto the top `k` components via an
/// eigendecomposition of the D x D sample covariance (divisor n).
/// Sign convention: the largest-magnitude entry of each component is
/// positive.
pub fn fit_pca(d: &Dataset, k: usize) -> Result<PcaTransform> {
    let (n, dim) = (d.n(), d.dim());
    let max_k = n.min(dim);
    if k == 0 || k > max_k {
        return Err(Error::KTooLarge { k, max: max_k });
    }
    let center: Vec<f64> = (0..dim).map(|j| d.x.column(j).sum() / n as f64).collect();
    let mut centered = d.x.clone();
    for j in 0..dim {
        let m = center[j];
        centered.column_mut(j).mapv_inplace(|v| v - m);
    }
    let cov = centered.t().dot(&centered) / n as f64;
    let (eigvals, eigvecs) = cov
        .eigh(UPLO::Lower)
        .map_err(|_| Error::DimensionMismatch("eigendecomposition failed".into()))?;

    // eigh returns ascending eigenvalues; take the trailing k, reversed.
    let mut basis = Array2::zeros((dim, k));
    let mut variances = Vec::with_capacity(k);
    for out_c in 0..k {
        let src = dim - 1 - out_c;
        let mut col = eigvecs.column(src).to_owned();
        let mut max_idx = 0;
        for i in 1..dim {
            if col[i].abs() > col[max_idx].abs() {
                max_idx = i;
            }
        }
        if col[max_idx] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
        basis.column_mut(out_c).assign(&col);
        variances.push(eigvals[src].max(0.0));
    }

    Ok(PcaTransform {
        center,
        basis_flat: basis.iter().copied().collect(),
        input_dim: dim,
        components: k,
        component_variances: variances,
    })
}

impl PcaTransform {
    pub fn basis(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.input_dim, self.components), self.basis_flat.clone())
            .expect("stored basis shape")
    }

    pub fn apply_features(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut centered = x.clone();
        for j in 0..self.input_dim {
            let m = self.center[j];
            centered.column_mut(j).mapv_inplace(|v| v - m);
        }
        centered.dot(&self.basis())
    }

    pub fn apply(&self, d: &Dataset) -> Dataset {
        Dataset {
            x: self.apply_features(&d.x),
            y: d.y.clone(),
            partition_labels: d.partition_labels.clone(),
            feature_names: (0..self.components)
                .map(|i| format!("pc{}", i + 1))
                .collect(),
        }
    }
}

/// A fitted preprocessing step; chains are applied in order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Standardize(Standardizer),
    Pca(PcaTransform),
}

impl Transform {
    pub fn apply(&self, d: &Dataset) -> Dataset {
        match self {
            Transform::Standardize(s) => s.apply(d),
            Transform::Pca(p) => p.apply(d),
        }
    }

    pub fn apply_features(&self, x: &Array2<f64>) -> Array2<f64> {
        match self {
            Transform::Standardize(s) => s.apply_features(x),
            Transform::Pca(p) => p.apply_features(x),
        }
    }
}

/// Picks `k` cluster centers from the rows of `x`: k-means++ seeding
/// followed by a few Lloyd rounds. Deterministic under `seed`; falls back
/// to the rows themselves when `k >= n`.
pub fn kmeans_centers(x: &Array2<f64>, k: usize, seed: u64) -> Array2<f64> {
    let n = x.nrows();
    if k >= n {
        return x.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centers.row_mut(0).assign(&x.row(first));

    let sq_dist = |a: ArrayView1<f64>, b: ArrayView1<f64>| -> f64 {
        a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
    };

    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let idx = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        centers.row_mut(c).assign(&x.row(idx));
        for i in 0..n {
            let d = sq_dist(x.row(i), centers.row(c));
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }

    // A few Lloyd rounds; empty clusters keep their previous center.
    let mut assignment = vec![0usize; n];
    for _ in 0..10 {
        for (i, a) in assignment.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..k {
                let d = sq_dist(x.row(i), centers.row(c));
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            *a = best;
        }
        for c in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..x.ncols() {
                let mean = members.iter().map(|&i| x[[i, j]]).sum::<f64>() / members.len() as f64;
                centers[[c, j]] = mean;
            }
        }
    }
    centers
}

/// Requested sizes for a train/test split.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SplitSpec {
    Counts { train: usize, test: Option<usize> },
    Fractions { train_frac: f64, test_frac: f64 },
}

/// Splits into disjoint shuffled train/test sets, reproducibly under
/// `seed`.
pub fn split(d: &Dataset, spec: SplitSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = d.n();
    let (n_train, n_test) = match spec {
        SplitSpec::Counts { train, test } => {
            let test = test.unwrap_or(n.saturating_sub(train));
            (train, test)
        }
        SplitSpec::Fractions {
            train_frac,
            test_frac,
        } => {
            if !(0.0..=1.0).contains(&train_frac) || !(0.0..=1.0).contains(&test_frac) {
                return Err(Error::InfeasibleSplit(format!(
                    "fractions ({train_frac}, {test_frac}) out of range"
                )));
            }
            let tr = (train_frac * n as f64).round() as usize;
            let te = if (train_frac + test_frac - 1.0).abs() < 1e-12 {
                n - tr
            } else {
                (test_frac * n as f64).round() as usize
            };
            (tr, te)
        }
    };
    if n_train + n_test > n || n_train == 0 {
        return Err(Error::InfeasibleSplit(format!(
            "requested {n_train} + {n_test} from {n} rows"
        )));
    }
    let mut indices: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    indices.shuffle(&mut rng);
    let train = d.select(&indices[..n_train]);
    let test = d.select(&indices[n_train..n_train + n_test]);
    Ok((train, test))
}
