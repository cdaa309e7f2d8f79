//! Dataset file I/O and feature normalization.
//!
//! File layout (little-endian):
//!
//! ```text
//! "TWDS" | u32 version | u32 k | u32 J | u32 sample_count
//!        | u32 input_dim | u32 target_dim | u32 aux_dim
//!        | per sample: input, target, aux as f32
//!        | u32 CRC32 of the sample payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::features::{build_samples, FeatureLayout, TrainingSample};
use super::MotionClip;
use crate::par::{self, Execution};

pub const DATASET_MAGIC: &[u8; 4] = b"TWDS";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 7 * 4;

pub const STD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub layout: FeatureLayout,
    pub samples: Vec<TrainingSample>,
}

impl Dataset {
    pub fn new(layout: FeatureLayout, samples: Vec<TrainingSample>) -> Self {
        Dataset { layout, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        if self.samples.is_empty() {
            return Err(Error::Format("refusing to write an empty dataset".into()));
        }
        let l = &self.layout;
        let dims = [l.input_dim(), l.target_dim(), l.aux_dim()];
        let mut payload = Vec::with_capacity(self.samples.len() * dims.iter().sum::<usize>() * 4);
        for (i, s) in self.samples.iter().enumerate() {
            for (part, &dim) in [&s.input, &s.target, &s.aux].into_iter().zip(&dims) {
                if part.len() != dim {
                    return Err(Error::Shape(format!(
                        "sample {i}: block of length {} where layout expects {dim}",
                        part.len()
                    )));
                }
                for v in part {
                    payload.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + 4);
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            DATASET_VERSION,
            l.k as u32,
            l.joints as u32,
            self.samples.len() as u32,
            dims[0] as u32,
            dims[1] as u32,
            dims[2] as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&payload);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                offset: bytes.len() as u64,
            });
        }
        if &bytes[..4] != DATASET_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                offset: bytes.len() as u64,
            });
        }
        let word = |i: usize| {
            let s = 4 + 4 * i;
            u32::from_le_bytes(bytes[s..s + 4].try_into().unwrap())
        };
        let version = word(0);
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let layout = FeatureLayout::new(word(1) as usize, word(2) as usize);
        let count = word(3) as usize;
        let dims = [word(4) as usize, word(5) as usize, word(6) as usize];
        let expected = [layout.input_dim(), layout.target_dim(), layout.aux_dim()];
        if dims != expected {
            return Err(Error::Format(format!(
                "feature dims {dims:?} do not match k = {}, J = {} (expected {expected:?})",
                layout.k, layout.joints
            )));
        }
        let per_sample = dims.iter().sum::<usize>() * 4;
        let payload_end = HEADER_LEN + count * per_sample;
        if bytes.len() < payload_end + 4 {
            return Err(Error::Truncated {
                offset: bytes.len() as u64,
            });
        }
        let payload = &bytes[HEADER_LEN..payload_end];
        let stored = u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap());
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
        let samples = (0..count)
            .map(|_| {
                let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<f64>>();
                TrainingSample {
                    input: take(dims[0]),
                    target: take(dims[1]),
                    aux: take(dims[2]),
                }
            })
            .collect();
        Ok(Dataset { layout, samples })
    }
}

/// Samples of every clip, in clip order. All clips must share one skeleton.
pub fn build_dataset(clips: &[MotionClip], k: usize, exec: Execution) -> Result<Dataset> {
    let first = clips
        .first()
        .ok_or_else(|| Error::Config("no clips to build a dataset from".into()))?;
    if let Some(c) = clips.iter().find(|c| c.skeleton() != first.skeleton()) {
        return Err(Error::Shape(format!(
            "clip '{}' has a different skeleton than '{}'",
            c.name, first.name
        )));
    }
    let layout = FeatureLayout::new(k, first.skeleton().joint_count());
    let samples = par::map(exec, clips, |c| build_samples(c, k)).into_iter().flatten().collect();
    Ok(Dataset { layout, samples })
}

pub fn serialize_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = dataset.to_bytes()?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Dataset::from_bytes(&bytes)
}

/// Per-feature mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Stats {
    pub fn identity(dim: usize) -> Self {
        Stats {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn compute<'a>(rows: impl Iterator<Item = &'a [f64]> + Clone) -> Self {
        let mut n = 0usize;
        let mut mean: Vec<f64> = Vec::new();
        for row in rows.clone() {
            if mean.is_empty() {
                mean = vec![0.0; row.len()];
            }
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
            n += 1;
        }
        let inv = 1.0 / n.max(1) as f64;
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut var = vec![0.0; mean.len()];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.iter().map(|s| (s * inv).sqrt().max(STD_FLOOR)).collect();
        Stats { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Features whose spread sat at the floor carried no information in the
    /// training data; they normalize to zero instead of amplifying noise.
    pub fn is_constant(&self, i: usize) -> bool {
        self.std[i] <= STD_FLOOR
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| {
                if self.is_constant(i) {
                    0.0
                } else {
                    (v - self.mean[i]) / self.std[i]
                }
            })
            .collect()
    }

    pub fn denormalize(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i] + self.mean[i])
            .collect()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Stats {
        Stats {
            mean: self.mean[range.clone()].to_vec(),
            std: self.std[range].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub input: Stats,
    pub target: Stats,
}

impl Normalization {
    pub fn identity(layout: &FeatureLayout) -> Self {
        Normalization {
            input: Stats::identity(layout.input_dim()),
            target: Stats::identity(layout.target_dim()),
        }
    }
}

pub fn compute_normalization(samples: &[TrainingSample]) -> Result<Normalization> {
    if samples.len() < 2 {
        return Err(Error::Config(format!(
            "normalization needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    Ok(Normalization {
        input: Stats::compute(samples.iter().map(|s| s.input.as_slice())),
        target: Stats::compute(samples.iter().map(|s| s.target.as_slice())),
    })
}
