//! Synthetic Gaussian-mixture classification data with controllable
//! covariate shift, plus the binary sample-file format used by the CLI.
//!
//! Sample file layout (little-endian):
//!
//! ```text
//! "LCDS" | version u32 (1) | count u32 | input_dim u32
//! | count x (label u32, input_dim x f64)
//! ```
//!
//! A label of `u32::MAX` marks an unlabeled sample.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Reader;
use crate::error::{Error, Result};
use crate::scheduler::Sample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    None,
    /// `x + s·z`, `z ~ N(0, I)`.
    AdditiveNoise,
    /// Blend with a 3-tap moving average over neighboring coordinates,
    /// weight `s / (1 + s)`.
    Smoothing,
    /// Contrast reduction `x / (1 + s)`.
    Scaling,
    /// Rotates consecutive coordinate pairs by `s · π/6`.
    RotationMix,
}

impl ShiftKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShiftKind::None => "none",
            ShiftKind::AdditiveNoise => "additive_noise",
            ShiftKind::Smoothing => "smoothing",
            ShiftKind::Scaling => "scaling",
            ShiftKind::RotationMix => "rotation_mix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub severity: f64,
}

impl ShiftSpec {
    pub fn none() -> Self {
        ShiftSpec {
            kind: ShiftKind::None,
            severity: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.severity >= 0.0 && self.severity.is_finite()) {
            return Err(Error::Config(format!(
                "shift severity must be finite and >= 0, got {}",
                self.severity
            )));
        }
        Ok(())
    }

    /// Applies the corruption to one input in place.
    pub fn apply<R: Rng + ?Sized>(&self, x: &mut [f64], rng: &mut R) {
        let s = self.severity;
        match self.kind {
            ShiftKind::None => {}
            ShiftKind::AdditiveNoise => {
                for v in x.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *v += s * z;
                }
            }
            ShiftKind::Smoothing => {
                let w = s / (1.0 + s);
                let n = x.len();
                let orig = x.to_vec();
                for i in 0..n {
                    let l = orig[if i == 0 { 0 } else { i - 1 }];
                    let r = orig[(i + 1).min(n - 1)];
                    let avg = (l + orig[i] + r) / 3.0;
                    x[i] = (1.0 - w) * orig[i] + w * avg;
                }
            }
            ShiftKind::Scaling => {
                x.iter_mut().for_each(|v| *v /= 1.0 + s);
            }
            ShiftKind::RotationMix => {
                let (sin, cos) = (s * std::f64::consts::PI / 6.0).sin_cos();
                for pair in x.chunks_exact_mut(2) {
                    let (a, b) = (pair[0], pair[1]);
                    pair[0] = cos * a - sin * b;
                    pair[1] = sin * a + cos * b;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_split: usize,
    /// One center per class.
    pub class_means: Vec<Vec<f64>>,
    pub noise_sigma: f64,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl DatasetSpec {
    /// Class centers drawn from `N(0, separation²)` per coordinate.
    pub fn gaussian_mixture(
        num_classes: usize,
        input_dim: usize,
        samples_per_split: usize,
        separation: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EE_DC1A_55E5);
        let class_means = (0..num_classes)
            .map(|_| {
                (0..input_dim)
                    .map(|_| { let z: f64 = StandardNormal.sample(&mut rng); separation * z })
                    .collect()
            })
            .collect();
        DatasetSpec {
            num_classes,
            input_dim,
            samples_per_split,
            class_means,
            noise_sigma,
            shift: ShiftSpec::none(),
            seed,
        }
    }

    pub fn with_shift(mut self, kind: ShiftKind, severity: f64) -> Self {
        self.shift = ShiftSpec { kind, severity };
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.shift.validate()?;
        if self.num_classes < 2 || self.input_dim == 0 || self.samples_per_split == 0 {
            return Err(Error::Config(
                "dataset needs >= 2 classes, input_dim >= 1 and samples_per_split >= 1".into(),
            ));
        }
        if self.class_means.len() != self.num_classes
            || self.class_means.iter().any(|m| m.len() != self.input_dim)
        {
            return Err(Error::Config("class_means must be num_classes x input_dim".into()));
        }
        for (i, a) in self.class_means.iter().enumerate() {
            if self.class_means[i + 1..].iter().any(|b| a == b) {
                return Err(Error::Config("class means must be pairwise distinct".into()));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Inputs with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Split> {
        if start >= end || end > self.len() {
            return Err(Error::Config(format!(
                "split has {} samples, cannot take {start}..{end}",
                self.len()
            )));
        }
        let idx: Vec<usize> = (start..end).collect();
        Ok(Split {
            inputs: self.inputs.select_rows(&idx)?,
            labels: self.labels[start..end].to_vec(),
        })
    }

    pub fn samples(&self) -> Vec<Sample> {
        (0..self.len())
            .map(|i| Sample {
                input: self.inputs.row(i).to_vec(),
                label: Some(self.labels[i]),
            })
            .collect()
    }

    pub fn from_samples(samples: &[Sample]) -> Result<Split> {
        let rows: Vec<&[f64]> = samples.iter().map(|s| s.input.as_slice()).collect();
        let labels = samples
            .iter()
            .map(|s| s.label.ok_or_else(|| Error::Config("sample has no label".into())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Split {
            inputs: Tensor::from_rows(&rows)?,
            labels,
        })
    }
}

fn draw_split(spec: &DatasetSpec, rng: &mut ChaCha8Rng, shift: Option<&ShiftSpec>) -> Result<Split> {
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    // balanced classes in a shuffled order
    let mut labels: Vec<usize> = (0..spec.samples_per_split).map(|i| i % spec.num_classes).collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(spec.samples_per_split * spec.input_dim);
    for &label in &labels {
        let mut x: Vec<f64> = spec.class_means[label]
            .iter()
            .map(|m| m + if spec.noise_sigma > 0.0 { normal.sample(rng) } else { 0.0 })
            .collect();
        if let Some(s) = shift {
            s.apply(&mut x, rng);
        }
        data.extend(x);
    }
    Ok(Split {
        inputs: Tensor::matrix(spec.samples_per_split, spec.input_dim, data)?,
        labels,
    })
}

/// Clean training split and shifted test split. Labels are drawn before the
/// corruption, so the label function is unchanged.
pub fn make_dataset(spec: &DatasetSpec) -> Result<(Split, Split)> {
    spec.validate()?;
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(0x7E57));
    let train = draw_split(spec, &mut train_rng, None)?;
    let test = draw_split(spec, &mut test_rng, Some(&spec.shift))?;
    Ok((train, test))
}

pub const SAMPLES_MAGIC: &[u8; 4] = b"LCDS";
const UNLABELED: u32 = u32::MAX;

pub fn encode_samples(samples: &[Sample]) -> Result<Vec<u8>> {
    let dim = samples.first().map(|s| s.input.len()).unwrap_or(0);
    if samples.iter().any(|s| s.input.len() != dim) {
        return Err(Error::Dimension("samples have differing input widths".into()));
    }
    let mut out = Vec::with_capacity(16 + samples.len() * (4 + 8 * dim));
    out.extend_from_slice(SAMPLES_MAGIC);
    for v in [1u32, samples.len() as u32, dim as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for s in samples {
        let label = s.label.map(|l| l as u32).unwrap_or(UNLABELED);
        out.extend_from_slice(&label.to_le_bytes());
        for v in &s.input {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_samples(bytes: &[u8]) -> Result<Vec<Sample>> {
    let mut r = Reader::new(bytes, "sample file");
    r.magic(SAMPLES_MAGIC)?;
    let version = r.u32()?;
    if version != 1 {
        return Err(Error::format("sample file", format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let record = dim.checked_mul(8).and_then(|n| n.checked_add(4));
    if record.and_then(|n| n.checked_mul(count)) != Some(r.remaining()) {
        return Err(Error::format("sample file", "payload size does not match header"));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let label = r.u32()?;
        let input = r.f64s(dim)?;
        out.push(Sample {
            input,
            label: (label != UNLABELED).then_some(label as usize),
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn save_samples(samples: &[Sample], path: &Path) -> Result<()> {
    std::fs::write(path, encode_samples(samples)?)?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    decode_samples(&std::fs::read(path)?)
}
