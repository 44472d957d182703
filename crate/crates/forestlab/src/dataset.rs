//! Numeric dataset container, deterministic RNG streams, train/test
//! splitting, and bootstrap resampling.
//!
//! Feature columns are stored column-major: split search scans one feature
//! at a time. Datasets are immutable after construction and shareable across
//! workers; randomness flows through single-owner [`RngStream`] values that
//! are forked with [`RngStream::child`], never shared.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Column-major feature matrix with response vector and optional noiseless
/// target.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    columns: Vec<Vec<T>>,
    response: Vec<T>,
    truth: Option<Vec<T>>,
    feature_names: Vec<String>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        columns: Vec<Vec<T>>,
        response: Vec<T>,
        truth: Option<Vec<T>>,
        feature_names: Vec<String>,
    ) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::invalid("dataset needs at least one feature"));
        }
        let n = response.len();
        if n == 0 {
            return Err(Error::invalid("dataset needs at least one row"));
        }
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::invalid(format!(
                    "feature column {j} has {} rows, expected {n}",
                    col.len()
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!(
                    "feature column {j} contains a non-finite value"
                )));
            }
        }
        if response.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("response contains a non-finite value"));
        }
        if let Some(t) = &truth {
            if t.len() != n {
                return Err(Error::invalid(format!(
                    "truth column has {} rows, expected {n}",
                    t.len()
                )));
            }
        }
        if feature_names.len() != columns.len() {
            return Err(Error::invalid(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                columns.len()
            )));
        }
        Ok(Dataset {
            columns,
            response,
            truth,
            feature_names,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.response.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn feature(&self, j: usize) -> &[T] {
        &self.columns[j]
    }

    pub fn value(&self, row: usize, j: usize) -> T {
        self.columns[j][row]
    }

    pub fn row(&self, i: usize) -> Vec<T> {
        self.columns.iter().map(|c| c[i]).collect()
    }

    pub fn response(&self) -> &[T] {
        &self.response
    }

    pub fn truth(&self) -> Option<&[T]> {
        self.truth.as_deref()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// New dataset holding the given rows (in the given order).
    pub fn subset(&self, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid("subset needs at least one row"));
        }
        let n = self.n_rows();
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::invalid(format!("row index {bad} out of range (n={n})")));
        }
        let columns = self
            .columns
            .iter()
            .map(|c| rows.iter().map(|&r| c[r]).collect())
            .collect();
        let response = rows.iter().map(|&r| self.response[r]).collect();
        let truth = self
            .truth
            .as_ref()
            .map(|t| rows.iter().map(|&r| t[r]).collect());
        Dataset::new(columns, response, truth, self.feature_names.clone())
    }

    /// Read a dataset from CSV: feature columns, a `y` column, and an
    /// optional `f_true` column. The header row is required.
    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()?
            .iter()
            .map(|h| h.trim().to_string())
            .collect();
        let y_pos = headers
            .iter()
            .position(|h| h == "y")
            .ok_or_else(|| Error::format("CSV is missing the response column `y`"))?;
        let truth_pos = headers.iter().position(|h| h == "f_true");
        let feature_pos: Vec<usize> = (0..headers.len())
            .filter(|&j| j != y_pos && Some(j) != truth_pos)
            .collect();
        if feature_pos.is_empty() {
            return Err(Error::format("CSV has no feature columns"));
        }
        let feature_names: Vec<String> =
            feature_pos.iter().map(|&j| headers[j].clone()).collect();

        let mut columns: Vec<Vec<T>> = vec![Vec::new(); feature_pos.len()];
        let mut response = Vec::new();
        let mut truth: Vec<T> = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let parse = |j: usize| -> Result<T> {
                record
                    .get(j)
                    .ok_or_else(|| Error::format(format!("row {i}: missing field {j}")))?
                    .trim()
                    .parse::<T>()
                    .map_err(|e| Error::format(format!("row {i}, column {}: {e}", headers[j])))
            };
            for (k, &j) in feature_pos.iter().enumerate() {
                columns[k].push(parse(j)?);
            }
            response.push(parse(y_pos)?);
            if let Some(j) = truth_pos {
                truth.push(parse(j)?);
            }
        }
        Dataset::new(
            columns,
            response,
            truth_pos.map(|_| truth),
            feature_names,
        )
    }

    pub fn from_csv_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_csv(std::io::BufReader::new(file))
    }

    /// Write the dataset as CSV: feature columns, `y`, then `f_true` when
    /// present.
    pub fn to_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = self.feature_names.clone();
        header.push("y".to_string());
        if self.truth.is_some() {
            header.push("f_true".to_string());
        }
        wtr.write_record(&header)?;
        for i in 0..self.n_rows() {
            let mut record: Vec<String> =
                self.columns.iter().map(|c| c[i].to_string()).collect();
            record.push(self.response[i].to_string());
            if let Some(t) = &self.truth {
                record.push(t[i].to_string());
            }
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn to_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.to_csv(std::io::BufWriter::new(file))
    }
}

const MIX_CONST: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(MIX_CONST);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Splittable random stream keyed by `(master_seed, stream_path)`.
///
/// Two streams with identical key and path yield identical draws; deriving
/// child streams (one per experiment, trial, tree, ...) keeps parallel
/// execution off the critical path of reproducibility.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    master_seed: u64,
    path: Vec<u64>,
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        RngStream {
            master_seed,
            path: Vec::new(),
        }
    }

    pub fn child(&self, index: u64) -> Self {
        let mut path = self.path.clone();
        path.push(index);
        RngStream {
            master_seed: self.master_seed,
            path,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.path
    }

    /// 64-bit key identifying this stream; also used as provenance in
    /// result tables.
    pub fn key(&self) -> u64 {
        let mut k = splitmix64(self.master_seed);
        for &e in &self.path {
            k = splitmix64(k ^ splitmix64(e.wrapping_add(1)));
        }
        splitmix64(k ^ (self.path.len() as u64).wrapping_mul(MIX_CONST))
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.key())
    }
}

/// Disjoint train/test index partition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Draw `n` indices i.i.d. uniformly with replacement from `0..n`.
pub fn bootstrap_sample<T: Scalar>(data: &Dataset<T>, stream: &RngStream) -> Result<Vec<usize>> {
    let n = data.n_rows();
    if n == 0 {
        return Err(Error::invalid("cannot bootstrap an empty dataset"));
    }
    let mut rng = stream.rng();
    Ok((0..n).map(|_| rng.gen_range(0..n)).collect())
}

/// Uniform random partition into train and test indices, with
/// `|train| = round(train_fraction * n)`. Both index lists are sorted.
pub fn train_test_split<T: Scalar>(
    data: &Dataset<T>,
    train_fraction: f64,
    stream: &RngStream,
) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "train_fraction must lie in (0,1), got {train_fraction}"
        )));
    }
    let n = data.n_rows();
    if n < 2 {
        return Err(Error::invalid("train/test split needs at least 2 rows"));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut stream.rng());
    let k = (train_fraction * n as f64).round() as usize;
    let mut train: Vec<usize> = perm[..k].to_vec();
    let mut test: Vec<usize> = perm[k..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}
