//! Client partitioning and the synthetic stand-in dataset.
//!
//! Partitioning splits every class into train/test first, then deals each
//! class's train (and, separately, test) indices round-robin over the clients.
//! The dealing cursor starts at a seed-dependent client and carries over from
//! one class to the next, so per-client totals differ by at most one.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::{ImageEncoder, ImageEncoding};
use crate::error::{Error, Result};
use crate::linalg::{gaussian_vector, unit_vector};
use crate::rng::child_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    FedOptimal,
    FedUcmerced,
    FedNwpu,
    Synthetic,
}

impl Preset {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "fed-optimal" => Ok(Self::FedOptimal),
            "fed-ucmerced" => Ok(Self::FedUcmerced),
            "fed-nwpu" => Ok(Self::FedNwpu),
            "synthetic" => Ok(Self::Synthetic),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected fed-optimal, fed-ucmerced, fed-nwpu or synthetic)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::FedOptimal => "fed-optimal",
            Self::FedUcmerced => "fed-ucmerced",
            Self::FedNwpu => "fed-nwpu",
            Self::Synthetic => "synthetic",
        }
    }

    /// `(classes, images per class, train fraction)`.
    pub fn shape(self) -> (usize, usize, f64) {
        match self {
            Self::FedOptimal => (31, 60, 0.5),
            Self::FedUcmerced => (21, 100, 0.5),
            Self::FedNwpu => (45, 700, 0.2),
            Self::Synthetic => (8, 40, 0.5),
        }
    }

    pub fn spec(self, n_clients: usize, seed: u64) -> PartitionSpec {
        let (n_classes, images_per_class, train_fraction) = self.shape();
        PartitionSpec {
            n_classes,
            images_per_class,
            train_fraction,
            n_clients,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub n_classes: usize,
    pub images_per_class: usize,
    pub train_fraction: f64,
    pub n_clients: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn train_per_class(&self) -> usize {
        (self.images_per_class as f64 * self.train_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::range("clients", "need at least 1 client"));
        }
        if self.n_classes < 2 {
            return Err(Error::range("n_classes", "need at least 2 classes"));
        }
        if self.images_per_class == 0 {
            return Err(Error::range("images_per_class", "must be at least 1"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::range(
                "train_fraction",
                "must lie strictly inside (0, 1)",
            ));
        }
        let train = self.train_per_class();
        if train == 0 || train == self.images_per_class {
            return Err(Error::range(
                "train_fraction",
                format!(
                    "{} of {} images per class leaves an empty split",
                    self.train_fraction, self.images_per_class
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub clients: Vec<ClientSplit>,
    /// `class_counts[client][class] = (train, test)`.
    pub class_counts: Vec<Vec<(usize, usize)>>,
}

impl PartitionResult {
    /// `(train, test)` per client.
    pub fn counts(&self) -> Vec<(usize, usize)> {
        self.clients
            .iter()
            .map(|c| (c.train.len(), c.test.len()))
            .collect()
    }
}

/// Sample index layout is class-major: `class * images_per_class + j`.
#[allow(clippy::needless_range_loop)]
pub fn partition(spec: &PartitionSpec) -> Result<PartitionResult> {
    spec.validate()?;
    let n = spec.n_clients;
    let per_class = spec.images_per_class;
    let n_train = spec.train_per_class();
    let mut rng = child_rng(spec.seed, "partition");
    let offset = rng.random_range(0..n);
    let mut clients = vec![ClientSplit::default(); n];
    let mut class_counts = vec![vec![(0, 0); spec.n_classes]; n];
    let (mut train_cursor, mut test_cursor) = (offset, offset);
    for class in 0..spec.n_classes {
        let mut idx: Vec<usize> = (class * per_class..(class + 1) * per_class).collect();
        idx.shuffle(&mut rng);
        let (train, test) = idx.split_at(n_train);
        for &i in train {
            clients[train_cursor].train.push(i);
            class_counts[train_cursor][class].0 += 1;
            train_cursor = (train_cursor + 1) % n;
        }
        for &i in test {
            clients[test_cursor].test.push(i);
            class_counts[test_cursor][class].1 += 1;
            test_cursor = (test_cursor + 1) % n;
        }
    }
    for c in &mut clients {
        c.train.sort_unstable();
        c.test.sort_unstable();
    }
    Ok(PartitionResult {
        clients,
        class_counts,
    })
}

/// Writes `indices.csv` (client_id, split, index) and `counts.csv`
/// (client_id, train, test) into `dir`.
pub fn write_partition_csv(result: &PartitionResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut indices = csv::Writer::from_path(dir.join("indices.csv"))?;
    indices.write_record(["client_id", "split", "index"])?;
    for (id, client) in result.clients.iter().enumerate() {
        for (split, list) in [("train", &client.train), ("test", &client.test)] {
            for i in list {
                indices.write_record([id.to_string(), split.to_string(), i.to_string()])?;
            }
        }
    }
    indices.flush()?;
    let mut counts = csv::Writer::from_path(dir.join("counts.csv"))?;
    counts.write_record(["client_id", "train", "test"])?;
    for (id, (train, test)) in result.counts().into_iter().enumerate() {
        counts.write_record([id.to_string(), train.to_string(), test.to_string()])?;
    }
    counts.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// One raw sample per row, class-major order.
    pub samples: Array2<f64>,
    pub labels: Vec<usize>,
    /// Unit-norm class prototypes, one per row.
    pub prototypes: Array2<f64>,
    pub sigma: f64,
}

/// Samples are `prototype + N(0, sigma^2 I)`; prototypes are seeded unit vectors.
pub fn gen_synthetic(
    n_classes: usize,
    per_class: usize,
    dim: usize,
    sigma: f64,
    seed: u64,
) -> Result<SyntheticDataset> {
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::range("sigma", "must be finite and >= 0"));
    }
    if n_classes < 2 {
        return Err(Error::range("n_classes", "need at least 2 classes"));
    }
    if per_class == 0 || dim == 0 {
        return Err(Error::range(
            "per_class",
            "samples per class and dim must be >= 1",
        ));
    }
    let mut rng = child_rng(seed, "synthetic/prototypes");
    let mut prototypes = Array2::zeros((n_classes, dim));
    for mut row in prototypes.axis_iter_mut(Axis(0)) {
        row.assign(&unit_vector(&mut rng, dim));
    }
    let mut rng = child_rng(seed, "synthetic/noise");
    let mut samples = Array2::zeros((n_classes * per_class, dim));
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for class in 0..n_classes {
        for j in 0..per_class {
            let noise: Array1<f64> = gaussian_vector(&mut rng, dim, 1.0);
            let x = &prototypes.row(class) + &(noise * sigma);
            samples.row_mut(class * per_class + j).assign(&x);
            labels.push(class);
        }
    }
    Ok(SyntheticDataset {
        samples,
        labels,
        prototypes,
        sigma,
    })
}

impl SyntheticDataset {
    pub fn n_classes(&self) -> usize {
        self.prototypes.nrows()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Class-token embeddings this dataset binds to a prompt set: each class
    /// is named by its prototype.
    pub fn class_embeddings(&self) -> Array2<f64> {
        self.prototypes.clone()
    }
}

#[derive(Debug, Clone)]
pub struct EncodedSample {
    pub image: ImageEncoding,
    pub label: usize,
}

/// Runs every sample through the frozen image encoder once.
pub fn encode_dataset(
    data: &SyntheticDataset,
    encoder: &ImageEncoder,
) -> Result<Vec<EncodedSample>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            Ok(EncodedSample {
                image: encoder.encode(data.samples.row(i))?,
                label: data.labels[i],
            })
        })
        .collect()
}
