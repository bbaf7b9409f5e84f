//! Dataset ingestion, standardization and the two split protocols.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;
use crate::{seeded_rng, RngStream};

pub const LABEL_COLUMN: &str = "label";
pub const DEFAULT_MAX_ROWS: usize = 50_000;

/// Labeled feature matrix. Labels are 0 (normal) or 1 (anomaly).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    pub name: String,
    pub feature_names: Vec<String>,
    pub features: Matrix<F>,
    pub labels: Vec<u8>,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(name: impl Into<String>, features: Matrix<F>, labels: Vec<u8>) -> Result<Self> {
        let feature_names = (0..features.cols()).map(|j| format!("x{j}")).collect();
        Self::with_feature_names(name, feature_names, features, labels)
    }

    pub fn with_feature_names(
        name: impl Into<String>,
        feature_names: Vec<String>,
        features: Matrix<F>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        if features.cols() == 0 {
            return Err(Error::data("dataset has no feature columns"));
        }
        if feature_names.len() != features.cols() {
            return Err(Error::data("feature name count differs from column count"));
        }
        if labels.len() != features.rows() {
            return Err(Error::data(format!("{} labels for {} rows", labels.len(), features.rows())));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::data("labels must be 0 or 1"));
        }
        if !features.all_finite() {
            return Err(Error::data("features contain NaN or infinity"));
        }
        Ok(Self { name: name.into(), feature_names, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn anomaly_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// Keeps at most `max_rows` rows: a uniformly random subset drawn with a
    /// fixed seed, original order preserved, so every run seed sees the same
    /// capped dataset.
    pub fn capped(&self, max_rows: usize) -> Self {
        if self.len() <= max_rows {
            return self.clone();
        }
        let mut rng = seeded_rng(0, RngStream::RowCap);
        let mut keep = index::sample(&mut rng, self.len(), max_rows).into_vec();
        keep.sort_unstable();
        Self {
            name: self.name.clone(),
            feature_names: self.feature_names.clone(),
            features: self.features.select_rows(&keep),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Writes the dataset as CSV with the feature columns followed by `label`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = self.feature_names.clone();
        header.push(LABEL_COLUMN.to_owned());
        w.write_record(&header)?;
        for (row, label) in self.features.iter_rows().zip(&self.labels) {
            let mut rec: Vec<String> = row.iter().map(|v| v.as_f64().to_string()).collect();
            rec.push(label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads a headered CSV with a `label` column (any position) holding 0/1 and
/// numeric feature columns.
pub fn load_csv<F: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<F>> {
    let path = path.as_ref();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let table = read_table(path, true)?;
    let labels = table.labels.unwrap_or_default();
    Dataset::with_feature_names(name, table.feature_names, table.features, labels)
}

/// Reads feature columns only. A `label` column, if present, is validated and
/// dropped. Returns the feature names and the feature matrix.
pub fn load_features_csv<F: Scalar>(path: impl AsRef<Path>) -> Result<(Vec<String>, Matrix<F>)> {
    let table = read_table(path.as_ref(), false)?;
    Ok((table.feature_names, table.features))
}

struct Table<F> {
    feature_names: Vec<String>,
    features: Matrix<F>,
    labels: Option<Vec<u8>>,
}

fn read_table<F: Scalar>(path: &Path, require_label: bool) -> Result<Table<F>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() {
        return Err(Error::data(format!("{}: empty file", path.display())));
    }
    let label_col = headers.iter().position(|h| h == LABEL_COLUMN);
    if require_label && label_col.is_none() {
        return Err(Error::data(format!("{}: missing column '{LABEL_COLUMN}'", path.display())));
    }
    let feature_names: Vec<String> =
        headers.iter().enumerate().filter(|&(j, _)| Some(j) != label_col).map(|(_, h)| h.to_owned()).collect();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        if rec.len() != headers.len() {
            return Err(Error::data(format!("row {row}: {} fields, header has {}", rec.len(), headers.len())));
        }
        for (j, cell) in rec.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| {
                Error::data(format!("row {row}, column '{}': cannot parse '{cell}' as a number", &headers[j]))
            })?;
            if !value.is_finite() {
                return Err(Error::data(format!("row {row}, column '{}': non-finite value", &headers[j])));
            }
            if Some(j) == label_col {
                let label = match value {
                    0.0 => 0,
                    1.0 => 1,
                    _ => {
                        return Err(Error::data(format!("row {row}, column '{LABEL_COLUMN}': label must be 0 or 1, got '{cell}'")))
                    }
                };
                labels.push(label);
            } else {
                data.push(F::of(value));
            }
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }
    if feature_names.is_empty() {
        return Err(Error::data(format!("{}: no feature columns", path.display())));
    }
    let features = Matrix::from_vec(rows, feature_names.len(), data)?;
    Ok(Table { feature_names, features, labels: label_col.map(|_| labels) })
}

/// Per-feature affine map `(x - mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits population mean and standard deviation; zero-variance features get
    /// `std = 1`.
    pub fn fit<F: Scalar>(train: &Matrix<F>) -> Result<Self> {
        if train.rows() == 0 {
            return Err(Error::data("cannot fit a standardizer on zero rows"));
        }
        let n = train.rows() as f64;
        let d = train.cols();
        let mut mean = vec![0.0; d];
        for row in train.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v.as_f64();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in train.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v.as_f64() - m).powi(2);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt()).map(|s| if s > 0.0 { s } else { 1.0 }).collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, width: usize) -> Result<()> {
        if width != self.dim() {
            return Err(Error::dim(format!("width {width} does not match standardizer width {}", self.dim())));
        }
        Ok(())
    }

    pub fn apply<F: Scalar>(&self, m: &Matrix<F>) -> Result<Matrix<F>> {
        self.check(m.cols())?;
        let mut out = m.clone();
        for i in 0..out.rows() {
            self.apply_row_in_place(out.row_mut(i));
        }
        Ok(out)
    }

    pub fn apply_row<F: Scalar>(&self, x: &[F]) -> Result<Vec<F>> {
        self.check(x.len())?;
        let mut out = x.to_vec();
        self.apply_row_in_place(&mut out);
        Ok(out)
    }

    fn apply_row_in_place<F: Scalar>(&self, x: &mut [F]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = F::of((v.as_f64() - m) / s);
        }
    }

    pub fn invert<F: Scalar>(&self, m: &Matrix<F>) -> Result<Matrix<F>> {
        self.check(m.cols())?;
        let mut out = m.clone();
        for i in 0..out.rows() {
            let row = self.invert_row(out.row(i))?;
            out.row_mut(i).copy_from_slice(&row);
        }
        Ok(out)
    }

    pub fn invert_row<F: Scalar>(&self, x: &[F]) -> Result<Vec<F>> {
        self.check(x.len())?;
        Ok(x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| F::of(v.as_f64() * s + m)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// Train on half of the normal rows; test on the other half plus every anomaly.
    Semi,
    /// Train on a bootstrap resample of all rows; test on the full dataset.
    Unsup,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semi" => Ok(SplitMode::Semi),
            "unsup" => Ok(SplitMode::Unsup),
            other => Err(Error::config(format!("unknown split mode '{other}' (expected semi or unsup)"))),
        }
    }
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitMode::Semi => "semi",
            SplitMode::Unsup => "unsup",
        })
    }
}

/// Standardized train/test matrices. `train_rows`/`test_rows` are row indices
/// into the source dataset.
#[derive(Debug, Clone)]
pub struct DatasetSplit<F> {
    pub train: Matrix<F>,
    pub test: Matrix<F>,
    pub test_labels: Vec<u8>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
    pub standardizer: Standardizer,
    pub mode: SplitMode,
    pub seed: u64,
}

fn finish_split<F: Scalar>(
    ds: &Dataset<F>,
    train_rows: Vec<usize>,
    test_rows: Vec<usize>,
    mode: SplitMode,
    seed: u64,
) -> Result<DatasetSplit<F>> {
    let raw_train = ds.features.select_rows(&train_rows);
    let standardizer = Standardizer::fit(&raw_train)?;
    let train = standardizer.apply(&raw_train)?;
    let test = standardizer.apply(&ds.features.select_rows(&test_rows))?;
    let test_labels = test_rows.iter().map(|&i| ds.labels[i]).collect();
    Ok(DatasetSplit { train, test, test_labels, train_rows, test_rows, standardizer, mode, seed })
}

pub fn split_semi_supervised<F: Scalar>(ds: &Dataset<F>, seed: u64) -> Result<DatasetSplit<F>> {
    let mut normals: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == 0).collect();
    if normals.len() < 2 {
        return Err(Error::data(format!("semi-supervised split needs at least 2 normal rows, found {}", normals.len())));
    }
    let mut rng = seeded_rng(seed, RngStream::Split);
    normals.shuffle(&mut rng);
    let half = normals.len() / 2;
    let mut train_rows = normals[..half].to_vec();
    train_rows.sort_unstable();
    let mut test_rows: Vec<usize> = normals[half..].to_vec();
    test_rows.extend((0..ds.len()).filter(|&i| ds.labels[i] == 1));
    test_rows.sort_unstable();
    finish_split(ds, train_rows, test_rows, SplitMode::Semi, seed)
}

pub fn split_unsupervised_bootstrap<F: Scalar>(ds: &Dataset<F>, seed: u64) -> Result<DatasetSplit<F>> {
    if ds.is_empty() {
        return Err(Error::data("cannot bootstrap an empty dataset"));
    }
    let mut rng = seeded_rng(seed, RngStream::Split);
    let n = ds.len();
    let train_rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
    finish_split(ds, train_rows, (0..n).collect(), SplitMode::Unsup, seed)
}

pub fn split<F: Scalar>(ds: &Dataset<F>, mode: SplitMode, seed: u64) -> Result<DatasetSplit<F>> {
    match mode {
        SplitMode::Semi => split_semi_supervised(ds, seed),
        SplitMode::Unsup => split_unsupervised_bootstrap(ds, seed),
    }
}

impl<F: Scalar> DatasetSplit<F> {
    /// Writes `train.csv` and `test.csv` (standardized values, original row ids)
    /// into `dir` for auditing.
    pub fn export_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let write = |name: &str, m: &Matrix<F>, rows: &[usize], labels: Option<&[u8]>| -> Result<()> {
            let mut w = csv::Writer::from_path(dir.join(name))?;
            let mut header = vec!["row_id".to_owned()];
            header.extend((0..m.cols()).map(|j| format!("x{j}")));
            if labels.is_some() {
                header.push(LABEL_COLUMN.to_owned());
            }
            w.write_record(&header)?;
            for (i, row) in m.iter_rows().enumerate() {
                let mut rec = vec![rows[i].to_string()];
                rec.extend(row.iter().map(|v| v.as_f64().to_string()));
                if let Some(l) = labels {
                    rec.push(l[i].to_string());
                }
                w.write_record(&rec)?;
            }
            w.flush()?;
            Ok(())
        };
        write("train.csv", &self.train, &self.train_rows, None)?;
        write("test.csv", &self.test, &self.test_rows, Some(&self.test_labels))
    }
}
