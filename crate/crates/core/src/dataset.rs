//! Seeded datasets of steering-angle samples and their file formats.
//!
//! The binary layout is a fixed header followed by `size·K` little-endian
//! `f64` angles:
//!
//! | bytes | field |
//! |-------|-------|
//! | 8 | magic `FASDSET\0` |
//! | 4 | format version (u32) |
//! | 4 | N (u32) |
//! | 4 | K (u32) |
//! | 8 | seed (u64) |
//! | 8 | size (u64) |
//! | 32 | SHA-256 of the system configuration |

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::ChannelSample;
use crate::config::SystemConfig;
use crate::error::{FasError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"FASDSET\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_antennas: usize,
    pub n_users: usize,
    pub seed: u64,
    pub config_hash: [u8; 32],
    pub samples: Vec<ChannelSample>,
}

/// Draws sample `index` of the stream keyed by `seed`.
pub fn draw_sample(n_users: usize, seed: u64, index: u64) -> ChannelSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let angles = (0..n_users).map(|_| rng.random_range(0.0..PI)).collect();
    ChannelSample { angles }
}

/// `size` i.i.d. samples with angles uniform on `[0, π)`. Sample `i` only
/// depends on `(seed, i)`, so parallel generation is order independent.
pub fn sample_dataset(cfg: &SystemConfig, size: usize, seed: u64) -> Dataset {
    let samples = (0..size as u64)
        .into_par_iter()
        .map(|i| draw_sample(cfg.n_users, seed, i))
        .collect();
    Dataset {
        n_antennas: cfg.n_antennas,
        n_users: cfg.n_users,
        seed,
        config_hash: cfg.hash(),
        samples,
    }
}

/// Index ranges of a deterministic train/validation/test split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: std::ops::Range<usize>,
    pub validation: std::ops::Range<usize>,
    pub test: std::ops::Range<usize>,
}

impl Split {
    /// Contiguous split with the given train and validation fractions; the
    /// remainder is the test set.
    pub fn fractions(size: usize, train: f64, validation: f64) -> Self {
        let n_train = ((size as f64) * train).round() as usize;
        let n_val = ((size as f64) * validation).round() as usize;
        let n_train = n_train.min(size);
        let n_val = n_val.min(size - n_train);
        Self {
            train: 0..n_train,
            validation: n_train..n_train + n_val,
            test: n_train + n_val..size,
        }
    }

    /// The 90/5/5 split.
    pub fn standard(size: usize) -> Self {
        Self::fractions(size, 0.9, 0.05)
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Dataset {
        Dataset {
            samples: self.samples[range].to_vec(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Dataset {
        Dataset {
            n_antennas: self.n_antennas,
            n_users: self.n_users,
            seed: self.seed,
            config_hash: self.config_hash,
            samples: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(68 + self.len() * self.n_users * 8);
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.n_antennas as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_users as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        for s in &self.samples {
            for a in &s.angles {
                out.extend_from_slice(&a.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(FasError::Format("dataset truncated".into()));
            }
            let (head, tail) = r.split_at(n);
            r = tail;
            Ok(head)
        };
        if take(8)? != DATASET_MAGIC {
            return Err(FasError::Format("not a dataset file".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != DATASET_VERSION {
            return Err(FasError::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let n_antennas = u32_at(take(4)?) as usize;
        let n_users = u32_at(take(4)?) as usize;
        let seed = u64_at(take(8)?);
        let size = u64_at(take(8)?) as usize;
        let config_hash: [u8; 32] = take(32)?.try_into().unwrap();
        let body = take(size * n_users * 8)?;
        let mut samples = Vec::with_capacity(size);
        for rec in body.chunks_exact(8 * n_users.max(1)).take(size) {
            let angles = rec
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            samples.push(ChannelSample::new(angles)?);
        }
        if take(1).is_ok() {
            return Err(FasError::Format(
                "trailing bytes after dataset records".into(),
            ));
        }
        Ok(Self {
            n_antennas,
            n_users,
            seed,
            config_hash,
            samples,
        })
    }

    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&self.to_bytes())?;
        f.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// One row per sample with columns `theta_1..theta_K`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record((1..=self.n_users).map(|k| format!("theta_{k}")))?;
        for s in &self.samples {
            w.write_record(s.angles.iter().map(|a| format!("{a:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads angles written by [`Dataset::write_csv`]; header metadata comes
    /// from `cfg` and `seed`.
    pub fn read_csv<R: Read>(input: R, cfg: &SystemConfig, seed: u64) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut samples = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let angles = rec
                .iter()
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| FasError::Format(format!("bad angle `{v}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            if angles.len() != cfg.n_users {
                return Err(FasError::Dimension(format!(
                    "row with {} angles for K={}",
                    angles.len(),
                    cfg.n_users
                )));
            }
            samples.push(ChannelSample::new(angles)?);
        }
        Ok(Self {
            n_antennas: cfg.n_antennas,
            n_users: cfg.n_users,
            seed,
            config_hash: cfg.hash(),
            samples,
        })
    }

    /// SHA-256 of the binary encoding.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dataset() {
        let d = sample_dataset(&SystemConfig::reference(4, 2), 0, 1);
        assert!(d.is_empty());
        assert_eq!(Dataset::from_bytes(&d.to_bytes()).unwrap(), d);
    }

    #[test]
    fn split_sizes() {
        let s = Split::standard(20_000);
        assert_eq!(
            (s.train.len(), s.validation.len(), s.test.len()),
            (18_000, 1_000, 1_000)
        );
        let s = Split::standard(3);
        assert_eq!(s.train.len() + s.validation.len() + s.test.len(), 3);
    }

    #[test]
    fn rejects_corruption() {
        let d = sample_dataset(&SystemConfig::reference(4, 2), 3, 1);
        let bytes = d.to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Dataset::from_bytes(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Dataset::from_bytes(&magic).is_err());
    }
}
