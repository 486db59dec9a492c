//! Unlabeled calibration data.
//!
//! A calibration container holds image batches `batch/<i>` and nothing that
//! looks like labels; loading one with `labels/` tensors is refused.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::repair::RepairConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    batches: Vec<Tensor>,
    id: String,
}

impl CalibrationSet {
    pub fn new(batches: Vec<Tensor>) -> Result<Self> {
        let first = batches.first().ok_or(Error::Empty("calibration set"))?;
        if first.ndim() < 2 {
            return Err(Error::InvalidTensor(
                "calibration batches need a batch dimension".into(),
            ));
        }
        let tail = first.shape()[1..].to_vec();
        if let Some(b) = batches.iter().find(|b| b.shape()[1..] != tail[..]) {
            return Err(Error::InvalidTensor(format!(
                "calibration batch {:?} differs from {:?}",
                b.shape(),
                first.shape()
            )));
        }
        let id = fingerprint(&batches);
        Ok(Self { batches, id })
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if let Some(name) = c.tensors.keys().find(|k| k.starts_with("labels/")) {
            return Err(Error::Config(format!(
                "calibration container carries label tensor `{name}`; calibration data must be unlabeled"
            )));
        }
        Self::new(c.indexed_f32("batch/")?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push_indexed("batch/", &self.batches);
        c
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().write(path)
    }

    /// SHA-256 over batch shapes and payloads, hex encoded.
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn batches(&self) -> &[Tensor] {
        &self.batches
    }

    pub fn num_images(&self) -> usize {
        self.batches.iter().map(|b| b.shape()[0]).sum()
    }

    /// The first `n` images, keeping the original batch boundaries.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.num_images() {
            return Err(Error::Config(format!(
                "prefix of {n} images from a set of {}",
                self.num_images()
            )));
        }
        let mut out = Vec::new();
        let mut left = n;
        for b in &self.batches {
            if left == 0 {
                break;
            }
            let take = left.min(b.shape()[0]);
            out.push(if take == b.shape()[0] {
                b.clone()
            } else {
                b.slice_batch(0, take)?
            });
            left -= take;
        }
        Self::new(out)
    }

    /// `cfg.bn_batches` batches of `cfg.bn_batch_size` images drawn from the
    /// pooled set by seeded reshuffling, cycling when the pool is exhausted.
    pub fn bn_stream(&self, cfg: &RepairConfig, seed: u64) -> Result<Vec<Tensor>> {
        let pool = Tensor::concat_batch(&self.batches)?;
        let total = pool.shape()[0];
        let row: usize = pool.shape()[1..].iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = Vec::new();
        let mut next = 0;
        let mut stream = Vec::with_capacity(cfg.bn_batches);
        for _ in 0..cfg.bn_batches {
            let mut data = Vec::with_capacity(cfg.bn_batch_size * row);
            for _ in 0..cfg.bn_batch_size {
                if next == order.len() {
                    order = (0..total).collect();
                    order.shuffle(&mut rng);
                    next = 0;
                }
                let i = order[next];
                next += 1;
                data.extend_from_slice(&pool.data()[i * row..(i + 1) * row]);
            }
            let mut shape = pool.shape().to_vec();
            shape[0] = cfg.bn_batch_size;
            stream.push(Tensor::new(shape, data)?);
        }
        Ok(stream)
    }
}

fn fingerprint(batches: &[Tensor]) -> String {
    let mut h = Sha256::new();
    for b in batches {
        h.update((b.ndim() as u64).to_le_bytes());
        for &d in b.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in b.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
