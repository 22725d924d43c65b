//! IDX (MNIST-style) files: big-endian magic `0x0000_08NN` where `NN` is the
//! number of dimensions, big-endian `u32` extents, then a `u8` payload.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Domain, Source, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Upper bound on the element count accepted from a header.
const MAX_ELEMENTS: usize = 1 << 34;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Binarize {
    /// Pixel `> 0.5` becomes 1.
    #[default]
    Threshold,
    /// One Bernoulli(pixel) draw per pixel, fixed at load time.
    Stochastic,
    None,
}

/// Decoded IDX tensor of unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub fn parse(bytes: &[u8], path: &Path) -> Result<IdxArray> {
    let bad = |reason: String| Error::Idx {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 4 {
        return Err(bad("truncated header".into()));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != IMAGES_MAGIC && magic != LABELS_MAGIC {
        return Err(bad(format!("bad magic {magic:#010x}")));
    }
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < header {
        return Err(bad("truncated dimension list".into()));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c <= MAX_ELEMENTS)
        .ok_or_else(|| bad(format!("dimension overflow {dims:?}")))?;
    let payload = &bytes[header..];
    if payload.len() < count {
        return Err(bad(format!(
            "truncated payload: {} bytes for {count} elements",
            payload.len()
        )));
    }
    if payload.len() > count {
        return Err(bad(format!("{} trailing bytes", payload.len() - count)));
    }
    Ok(IdxArray {
        dims,
        data: payload.to_vec(),
    })
}

pub fn serialize(array: &IdxArray) -> Vec<u8> {
    let magic = 0x0000_0800u32 | array.dims.len() as u32;
    let mut out = Vec::with_capacity(4 + 4 * array.dims.len() + array.data.len());
    out.extend_from_slice(&magic.to_be_bytes());
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    out
}

fn read(path: &Path) -> Result<IdxArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(&bytes, path)
}

/// Loads a 3-D image file (and optionally labels) as `[N × H·W]` in `[0, 1]`.
pub fn load_idx(images: &Path, labels: Option<&Path>, binarize: Binarize, seed: u64) -> Result<Dataset> {
    let img = read(images)?;
    if img.dims.len() != 3 {
        return Err(Error::Idx {
            path: images.to_path_buf(),
            reason: format!("expected a 3-D image tensor, got dims {:?}", img.dims),
        });
    }
    let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = img
        .data
        .iter()
        .map(|&b| {
            let v = b as f64 / 255.0;
            match binarize {
                Binarize::None => v,
                Binarize::Threshold => f64::from(u8::from(v > 0.5)),
                Binarize::Stochastic => f64::from(u8::from(rng.random::<f64>() < v)),
            }
        })
        .collect();
    let labels = match labels {
        Some(p) => {
            let l = read(p)?;
            if l.dims.len() != 1 || l.dims[0] != n {
                return Err(Error::Idx {
                    path: p.to_path_buf(),
                    reason: format!("label dims {:?} do not match {n} images", l.dims),
                });
            }
            Some(l.data)
        }
        None => None,
    };
    Ok(Dataset {
        x: Tensor::new(vec![n, h * w], data)?,
        domain: if binarize == Binarize::None {
            Domain::Real
        } else {
            Domain::Binary
        },
        splits: Splits {
            train: (0..n).collect(),
            val: Vec::new(),
            test: Vec::new(),
        },
        labels,
        source: Source::Idx { height: h, width: w },
    })
}
