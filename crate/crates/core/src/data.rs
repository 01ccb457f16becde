//! Datasets, vertical feature partitions and aligned mini-batches.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::{self, rng_stream, standard_normal, SERVER};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Features scaled to `[0, 1]` plus class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if features.rows() == 0 {
            return Err(Error::InvalidArgument("dataset has no samples".into()));
        }
        if features.rows() != labels.len() {
            return Err(Error::CountMismatch {
                images: features.rows(),
                labels: labels.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            name: name.into(),
        })
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

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "split point {n} outside 1..{}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        Ok((self.subset(&head, "train"), self.subset(&tail, "test")))
    }

    pub fn subset(&self, indices: &[usize], suffix: &str) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            name: format!("{}-{suffix}", self.name),
        }
    }

    /// Append copies of `columns` as new trailing columns.
    pub fn with_duplicated_columns(&self, columns: &[usize]) -> Dataset {
        let copies = self.features.select_columns(columns);
        Dataset {
            features: Matrix::hconcat(&[&self.features, &copies]).expect("same row count"),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            name: format!("{}-dup", self.name),
        }
    }

    /// Persist as CSV: header `f0,...,f{d-1},label`, one sample per line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let write = |w: &mut BufWriter<fs::File>| -> std::io::Result<()> {
            let header: Vec<String> = (0..self.dim()).map(|c| format!("f{c}")).collect();
            writeln!(w, "{},label", header.join(","))?;
            for r in 0..self.len() {
                for v in self.features.row(r) {
                    write!(w, "{v},")?;
                }
                writeln!(w, "{}", self.labels[r])?;
            }
            w.flush()
        };
        write(&mut w).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, num_classes: usize) -> Result<Dataset> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::InvalidArgument(format!("{}: empty CSV", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let d = header.split(',').count().saturating_sub(1);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(Error::InvalidArgument(format!(
                    "{}:{}: expected {} fields, found {}",
                    path.display(),
                    n + 2,
                    d + 1,
                    fields.len()
                )));
            }
            let bad = |f: &str| Error::InvalidArgument(format!("{}:{}: bad value {f:?}", path.display(), n + 2));
            for f in &fields[..d] {
                data.push(f.parse::<f64>().map_err(|_| bad(f))?);
            }
            labels.push(fields[d].parse::<usize>().map_err(|_| bad(fields[d]))?);
        }
        let m = labels.len();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Dataset::new(Matrix::from_vec(m, d, data)?, labels, num_classes, name)
    }
}

#[derive(Debug, Clone)]
pub struct MnistSplits {
    pub train: Dataset,
    pub test: Dataset,
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated { path: path.into() })
}

/// Read an IDX3 image file; pixels are divided by 255.
pub fn read_idx_images(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            found: magic,
            expected: IMAGE_MAGIC,
        });
    }
    let count = read_u32(&bytes, 4, path)? as usize;
    let rows = read_u32(&bytes, 8, path)? as usize;
    let cols = read_u32(&bytes, 12, path)? as usize;
    let d = rows * cols;
    let body = &bytes[16..];
    if body.len() < count * d {
        return Err(Error::Truncated { path: path.into() });
    }
    let data = body[..count * d].iter().map(|&p| f64::from(p) / 255.0).collect();
    Matrix::from_vec(count, d, data)
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let magic = read_u32(&bytes, 0, path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            found: magic,
            expected: LABEL_MAGIC,
        });
    }
    let count = read_u32(&bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Truncated { path: path.into() });
    }
    Ok(body[..count].iter().map(|&b| b as usize).collect())
}

/// Load the four standard MNIST IDX files from `dir`.
pub fn load_mnist(dir: &Path) -> Result<MnistSplits> {
    let load = |images: &str, labels: &str, name: &str| -> Result<Dataset> {
        let x = read_idx_images(&dir.join(images))?;
        let y = read_idx_labels(&dir.join(labels))?;
        if x.rows() != y.len() {
            return Err(Error::CountMismatch {
                images: x.rows(),
                labels: y.len(),
            });
        }
        Dataset::new(x, y, 10, name)
    };
    Ok(MnistSplits {
        train: load("train-images-idx3-ubyte", "train-labels-idx1-ubyte", "mnist-train")?,
        test: load("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", "mnist-test")?,
    })
}

/// Uniform `[0,1]` features with labels from a random linear teacher that
/// only reads `informative_cols`. The remaining columns are independent of
/// the labels.
pub fn synthetic_dataset(
    m: usize,
    d: usize,
    num_classes: usize,
    informative_cols: &[usize],
    seed: u64,
) -> Result<Dataset> {
    if m == 0 || d == 0 || num_classes == 0 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs m, d, classes > 0".into(),
        ));
    }
    if informative_cols.is_empty() && num_classes > 1 {
        return Err(Error::InvalidArgument(
            "synthetic dataset needs at least one informative column".into(),
        ));
    }
    if let Some(&c) = informative_cols.iter().find(|&&c| c >= d) {
        return Err(Error::InvalidArgument(format!("informative column {c} >= d = {d}")));
    }
    let mut teacher_rng = rng_stream(seed, "synthetic-teacher", SERVER, rng::NO_ROUND);
    let teacher = Matrix::from_fn(informative_cols.len(), num_classes, |_, _| {
        standard_normal(&mut teacher_rng)
    });
    let mut feature_rng = rng_stream(seed, "synthetic-features", SERVER, rng::NO_ROUND);
    let features = Matrix::from_fn(m, d, |_, _| feature_rng.random::<f64>());
    let centered = features.select_columns(informative_cols).map(|v| v - 0.5);
    let labels = if informative_cols.is_empty() {
        vec![0; m]
    } else {
        centered.matmul(&teacher)?.argmax_rows()
    };
    Dataset::new(features, labels, num_classes, format!("synthetic-{seed}"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Contiguous,
    Strided,
    Explicit(Vec<Vec<usize>>),
}

/// Disjoint, covering assignment of feature columns to clients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerticalPartition {
    client_columns: Vec<Vec<usize>>,
}

impl VerticalPartition {
    pub fn num_clients(&self) -> usize {
        self.client_columns.len()
    }

    pub fn columns(&self, client: usize) -> &[usize] {
        &self.client_columns[client]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.client_columns.iter().map(Vec::len).collect()
    }

    pub fn dim(&self) -> usize {
        self.client_columns.iter().map(Vec::len).sum()
    }

    /// Client owning `column`, if any.
    pub fn owner(&self, column: usize) -> Option<usize> {
        self.client_columns.iter().position(|cols| cols.contains(&column))
    }

    /// Features of `rows` split per client.
    pub fn split_features(&self, features: &Matrix) -> Vec<Matrix> {
        self.client_columns
            .iter()
            .map(|cols| features.select_columns(cols))
            .collect()
    }

    /// Inverse of [`split_features`](Self::split_features).
    pub fn reassemble(&self, parts: &[Matrix]) -> Result<Matrix> {
        if parts.len() != self.num_clients() {
            return Err(Error::shape("reassemble parts", self.num_clients(), parts.len()));
        }
        let rows = parts[0].rows();
        let mut out = Matrix::zeros(rows, self.dim());
        for (cols, part) in self.client_columns.iter().zip(parts) {
            if part.cols() != cols.len() || part.rows() != rows {
                return Err(Error::shape("reassemble part", cols.len(), part.cols()));
            }
            for r in 0..rows {
                for (k, &c) in cols.iter().enumerate() {
                    out.set(r, c, part.get(r, k));
                }
            }
        }
        Ok(out)
    }
}

pub fn partition(d: usize, n: usize, scheme: &PartitionScheme) -> Result<VerticalPartition> {
    if n < 2 {
        return Err(Error::Partition(format!("need at least 2 clients, got {n}")));
    }
    if d < n {
        return Err(Error::Partition(format!(
            "{d} columns cannot be split among {n} clients"
        )));
    }
    let client_columns = match scheme {
        PartitionScheme::Contiguous => {
            let (base, extra) = (d / n, d % n);
            let mut start = 0;
            (0..n)
                .map(|i| {
                    let len = base + usize::from(i < extra);
                    let cols = (start..start + len).collect();
                    start += len;
                    cols
                })
                .collect()
        }
        PartitionScheme::Strided => (0..n).map(|i| (i..d).step_by(n).collect()).collect(),
        PartitionScheme::Explicit(lists) => {
            if lists.len() != n {
                return Err(Error::Partition(format!(
                    "explicit partition lists {} clients, expected {n}",
                    lists.len()
                )));
            }
            let mut owner = vec![None; d];
            for (i, cols) in lists.iter().enumerate() {
                if cols.is_empty() {
                    return Err(Error::Partition(format!("client {i} has no columns")));
                }
                for &c in cols {
                    if c >= d {
                        return Err(Error::Partition(format!("column {c} out of range (d = {d})")));
                    }
                    if let Some(prev) = owner[c].replace(i) {
                        return Err(Error::Partition(format!(
                            "column {c} assigned to both client {prev} and client {i}"
                        )));
                    }
                }
            }
            if let Some(c) = owner.iter().position(Option::is_none) {
                return Err(Error::Partition(format!("column {c} is not assigned to any client")));
            }
            lists.clone()
        }
    };
    Ok(VerticalPartition { client_columns })
}

/// One aligned mini-batch: row `k` of every client matrix is sample
/// `sample_indices[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub sample_indices: Vec<usize>,
    pub per_client_features: Vec<Matrix>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn assemble(dataset: &Dataset, partition: &VerticalPartition, indices: &[usize]) -> Batch {
        let rows = dataset.features.select_rows(indices);
        Batch {
            sample_indices: indices.to_vec(),
            per_client_features: partition.split_features(&rows),
            labels: indices.iter().map(|&i| dataset.labels[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Epoch-wise sampling without replacement; each epoch is reshuffled from
/// its own named stream.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    seed: u64,
    batch_size: usize,
    samples: usize,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(samples: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if batch_size == 0 || batch_size > samples {
            return Err(Error::InvalidArgument(format!(
                "batch size {batch_size} must be in 1..={samples}"
            )));
        }
        let mut sampler = Self {
            seed,
            batch_size,
            samples,
            epoch: 0,
            order: Vec::new(),
            cursor: 0,
        };
        sampler.reshuffle();
        Ok(sampler)
    }

    fn reshuffle(&mut self) {
        let mut rng = rng_stream(self.seed, "batch-order", SERVER, self.epoch);
        self.order = rng::permutation(self.samples, &mut rng);
        self.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.div_ceil(self.batch_size)
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Sample indices of the next batch. The final batch of an epoch may be
    /// short so that every sample appears exactly once per epoch.
    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.cursor >= self.samples {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.samples);
        let idx = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        idx
    }

    pub fn next_batch(&mut self, dataset: &Dataset, partition: &VerticalPartition) -> Batch {
        let idx = self.next_indices();
        Batch::assemble(dataset, partition, &idx)
    }
}
