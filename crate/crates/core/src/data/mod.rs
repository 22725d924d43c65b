//! Datasets, generators and deterministic batching.

pub mod idx;
pub mod synthetic;

pub use idx::{load_idx, Binarize};
pub use synthetic::{gen_bimodal_toy, gen_linear_gaussian, BimodalToy, BimodalToyConfig, LinearGaussian};

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Real,
    Binary,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Source {
    Bimodal(BimodalToy),
    LinearGaussian(LinearGaussian),
    Idx { height: usize, width: usize },
}

/// Row indices of each named split.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[N × d_x]`.
    pub x: Tensor,
    pub domain: Domain,
    pub splits: Splits,
    pub labels: Option<Vec<u8>>,
    pub source: Source,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_x(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn rows(&self, idx: &[usize]) -> Tensor {
        self.x.select_rows(idx)
    }

    /// Checks split disjointness, bounds and the binary value domain.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let mut seen = vec![false; n];
        for &i in self
            .splits
            .train
            .iter()
            .chain(&self.splits.val)
            .chain(&self.splits.test)
        {
            if i >= n || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Data(format!("split index {i} is out of range or repeated")));
            }
        }
        if self.domain == Domain::Binary && self.x.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data("binary dataset holds values outside {0, 1}".into()));
        }
        Ok(())
    }
}

/// Selects a dataset in a run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    BimodalToy {
        n: usize,
        seed: u64,
        #[serde(default)]
        geometry: BimodalToyConfig,
    },
    LinearGaussian {
        n: usize,
        seed: u64,
        d_x: usize,
        d_z: usize,
        w: Vec<f64>,
        b: Vec<f64>,
        noise_var: f64,
    },
    Idx {
        images: PathBuf,
        #[serde(default)]
        labels: Option<PathBuf>,
        #[serde(default)]
        test_images: Option<PathBuf>,
        #[serde(default)]
        binarize: Binarize,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::BimodalToy {
            n: 2000,
            seed: 0,
            geometry: BimodalToyConfig::default(),
        }
    }
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        let ds = match self {
            Self::BimodalToy { n, seed, geometry } => geometry.generate(*n, *seed),
            Self::LinearGaussian {
                n,
                seed,
                d_x,
                d_z,
                w,
                b,
                noise_var,
            } => LinearGaussian::new(*d_x, *d_z, w.clone(), b.clone(), *noise_var)?.generate(*n, *seed),
            Self::Idx {
                images,
                labels,
                test_images,
                binarize,
                seed,
            } => {
                let mut train = load_idx(images, labels.as_deref(), *binarize, *seed)?;
                if let Some(test) = test_images {
                    let test = load_idx(test, None, *binarize, seed.wrapping_add(1))?;
                    if test.d_x() != train.d_x() {
                        return Err(Error::Data("train and test images differ in size".into()));
                    }
                    let n_train = train.len();
                    let mut data = train.x.into_data();
                    data.extend_from_slice(test.x.data());
                    let n = n_train + test.len();
                    train.x = Tensor::new(vec![n, test.d_x()], data)?;
                    train.splits.test = (n_train..n).collect();
                    train.labels = None;
                }
                train
            }
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Train/validation/test views with per-epoch shuffled training batches.
#[derive(Debug, Clone)]
pub struct SplitView {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub batch_size: usize,
    seed: u64,
}

/// Holds out `val_fraction` of the training rows (shuffled by `seed`).
pub fn split_and_batch(ds: &Dataset, val_fraction: f64, batch_size: usize, seed: u64) -> Result<SplitView> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let mut pool = ds.splits.train.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let n_val = (pool.len() as f64 * val_fraction).round() as usize;
    let val = pool.split_off(pool.len() - n_val);
    let mut val_all = ds.splits.val.clone();
    val_all.extend(val);
    Ok(SplitView {
        train: pool,
        val: val_all,
        test: ds.splits.test.clone(),
        batch_size,
        seed,
    })
}

impl SplitView {
    /// Training batches for `epoch`; the last batch may be partial.
    pub fn epoch_batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order = self.train.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        order.chunks(self.batch_size).map(<[usize]>::to_vec).collect()
    }

    /// Fixed-order chunks of an evaluation split.
    pub fn chunks(idx: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
        idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
    }
}
