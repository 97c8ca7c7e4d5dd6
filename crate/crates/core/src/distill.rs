//! Fine-tuning a pruned student by mimicking the teacher's final feature map.
//!
//! The teacher is queried once per fine-tuning sample to build a
//! [`PseudoLabelCache`]; training then reads labels from the cache only.
//! [`distill_live`] is the reference path that re-queries the teacher for
//! every mini-batch. Given the same seed both paths see identical batches and
//! identical labels, so they produce bitwise-identical students.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Reader};
use crate::error::{Error, Result};
use crate::network::{self, ResidualNetwork, SkipSet};
use crate::tensor::{self, Tensor};

/// Which teacher feature map becomes the pseudo-label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// The full final-block feature map (`P_n = width`).
    FinalBlock,
    /// Its mean over all positions (`P_n = 1`).
    Pooled,
}

impl FeatureSource {
    pub fn pixels(&self, width: usize) -> usize {
        match self {
            FeatureSource::FinalBlock => width,
            FeatureSource::Pooled => 1,
        }
    }

    pub fn project(&self, features: &Tensor) -> Tensor {
        match self {
            FeatureSource::FinalBlock => features.clone(),
            FeatureSource::Pooled => {
                let rows = features.rows();
                let means = (0..rows)
                    .map(|r| {
                        let row = features.row(r);
                        row.iter().sum::<f64>() / row.len() as f64
                    })
                    .collect();
                Tensor::matrix(rows, 1, means).expect("rows > 0")
            }
        }
    }

    /// Pulls a gradient w.r.t. the projection back to the features.
    fn project_grad(&self, features: &Tensor, grad: Tensor) -> Tensor {
        match self {
            FeatureSource::FinalBlock => grad,
            FeatureSource::Pooled => {
                let width = features.cols();
                let data = (0..features.rows())
                    .flat_map(|r| std::iter::repeat_n(grad.data()[r] / width as f64, width))
                    .collect();
                Tensor::new(features.shape().to_vec(), data).expect("same shape")
            }
        }
    }

    fn tag(&self) -> u32 {
        match self {
            FeatureSource::FinalBlock => 0,
            FeatureSource::Pooled => 1,
        }
    }

    fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(FeatureSource::FinalBlock),
            1 => Ok(FeatureSource::Pooled),
            t => Err(Error::format("cache", format!("unknown feature source {t}"))),
        }
    }
}

/// Required fine-tuning set size, `ceil(kappa · |M̄| / P_n)`, at least 1.
pub fn required_dataset_size(student_param_count: usize, pixels: usize, kappa: f64) -> Result<usize> {
    if pixels == 0 {
        return Err(Error::Config("P_n must be at least 1".into()));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::Config(format!("kappa must be positive, got {kappa}")));
    }
    let size = (kappa * student_param_count as f64 / pixels as f64).ceil();
    Ok((size as usize).max(1))
}

/// Teacher pseudo-labels for a fixed set of inputs, generated once.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelCache {
    /// `[N x input_dim]`
    pub inputs: Tensor,
    /// `[N x P_n]`
    pub labels: Tensor,
    pub feature_source: FeatureSource,
    pub teacher_fingerprint: u64,
    /// Teacher evaluations spent building the cache.
    pub teacher_query_count: u64,
}

pub const CACHE_MAGIC: &[u8; 4] = b"LCCH";
pub const CACHE_VERSION: u32 = 1;

impl PseudoLabelCache {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.labels.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    /// Cache file layout (`u32`/`u64`/`f64` little-endian):
    ///
    /// ```text
    /// "LCCH" | version u32 | count u32 | input_dim u32 | P_n u32 | source u32
    /// | count x (input_dim f64, P_n f64) | teacher fingerprint u64
    /// ```
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        for v in [
            CACHE_VERSION,
            self.len() as u32,
            self.input_dim() as u32,
            self.pixels() as u32,
            self.feature_source.tag(),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..self.len() {
            for v in self.inputs.row(i).iter().chain(self.labels.row(i)) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.teacher_fingerprint.to_le_bytes());
        out
    }

    /// The teacher query count is not stored and decodes as zero.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "cache");
        r.magic(CACHE_MAGIC)?;
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::format("cache", format!("unsupported version {version}")));
        }
        let count = r.u32()? as usize;
        let input_dim = r.u32()? as usize;
        let pixels = r.u32()? as usize;
        let source = FeatureSource::from_tag(r.u32()?)?;
        if count == 0 || input_dim == 0 || pixels == 0 {
            return Err(Error::format("cache", "count, input_dim and P_n must be positive"));
        }
        let record = input_dim
            .checked_add(pixels)
            .and_then(|n| n.checked_mul(count))
            .and_then(|n| n.checked_mul(8))
            .and_then(|n| n.checked_add(8));
        if record != Some(r.remaining()) {
            return Err(Error::format("cache", "payload size does not match header"));
        }
        let mut inputs = Vec::with_capacity(count * input_dim);
        let mut labels = Vec::with_capacity(count * pixels);
        for _ in 0..count {
            inputs.extend(r.f64s(input_dim)?);
            labels.extend(r.f64s(pixels)?);
        }
        let teacher_fingerprint = r.u64()?;
        r.finish()?;
        Ok(PseudoLabelCache {
            inputs: Tensor::matrix(count, input_dim, inputs)?,
            labels: Tensor::matrix(count, pixels, labels)?,
            feature_source: source,
            teacher_fingerprint,
            teacher_query_count: 0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Checks that the cache was generated by `teacher`.
    pub fn verify_teacher(&self, teacher: &ResidualNetwork) -> Result<()> {
        let fp = checkpoint::fingerprint(teacher);
        if fp != self.teacher_fingerprint {
            return Err(Error::Config(format!(
                "cache fingerprint {:016x} does not match teacher {fp:016x}",
                self.teacher_fingerprint
            )));
        }
        Ok(())
    }
}

/// Runs the teacher once per sample and stores its (projected) final features.
pub fn build_cache(teacher: &ResidualNetwork, samples: &Tensor, source: FeatureSource) -> Result<PseudoLabelCache> {
    if samples.is_empty() || samples.shape().len() != 2 {
        return Err(Error::Config("cache needs a non-empty [N x input_dim] sample matrix".into()));
    }
    let mut labels = Vec::with_capacity(samples.rows() * source.pixels(teacher.width()));
    for i in 0..samples.rows() {
        let x = samples.select_rows(&[i])?;
        let f = teacher.features(&x, &SkipSet::empty())?;
        labels.extend_from_slice(source.project(&f).data());
    }
    let pixels = source.pixels(teacher.width());
    Ok(PseudoLabelCache {
        inputs: samples.clone(),
        labels: Tensor::matrix(samples.rows(), pixels, labels)?,
        feature_source: source,
        teacher_fingerprint: checkpoint::fingerprint(teacher),
        teacher_query_count: samples.rows() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every_fraction: f64,
    pub freeze_classifier: bool,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            steps: 500,
            batch_size: 64,
            lr0: 0.02,
            decay_factor: 0.1,
            decay_every_fraction: 0.4,
            freeze_classifier: true,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("distillation needs steps >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.decay_every_fraction > 0.0) {
            return Err(Error::Config("decay_every_fraction must be positive".into()));
        }
        Ok(())
    }

    /// The batch equals the dataset when the dataset is smaller.
    pub fn effective_batch(&self, dataset_len: usize) -> usize {
        self.batch_size.min(dataset_len)
    }
}

/// Step schedule: `lr0 · decay^⌊step / (fraction · steps)⌋`.
pub fn lr_at(step: usize, config: &DistillConfig) -> f64 {
    let period = config.decay_every_fraction * config.steps as f64;
    let decays = if period > 0.0 {
        (step as f64 / period).floor() as usize
    } else {
        0
    };
    // repeated multiplication keeps 0.02 -> 0.002 -> 0.0002 exact in f64
    (0..decays).fold(config.lr0, |lr, _| lr * config.decay_factor)
}

/// Shuffled epochs over `0..n`, reshuffled each epoch from a per-epoch seed.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = EpochSampler {
            n,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        s.order = s.shuffled();
        s
    }

    fn shuffled(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n).collect();
        let epoch_seed = self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        order
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.epoch += 1;
                self.order = self.shuffled();
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub loss_trace: Vec<f64>,
    pub wall_time: f64,
    pub teacher_query_count: u64,
    pub final_loss: f64,
}

/// Where a step's pseudo-labels come from.
pub enum LabelSource<'a> {
    Cached(&'a PseudoLabelCache),
    Live {
        teacher: &'a ResidualNetwork,
        samples: &'a Tensor,
        source: FeatureSource,
    },
}

impl LabelSource<'_> {
    fn len(&self) -> usize {
        match self {
            LabelSource::Cached(c) => c.len(),
            LabelSource::Live { samples, .. } => samples.rows(),
        }
    }

    fn feature_source(&self) -> FeatureSource {
        match self {
            LabelSource::Cached(c) => c.feature_source,
            LabelSource::Live { source, .. } => *source,
        }
    }

    /// Inputs and labels of one mini-batch, plus teacher evaluations spent.
    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor, u64)> {
        match self {
            LabelSource::Cached(c) => Ok((c.inputs.select_rows(idx)?, c.labels.select_rows(idx)?, 0)),
            LabelSource::Live {
                teacher,
                samples,
                source,
            } => {
                let x = samples.select_rows(idx)?;
                let f = teacher.features(&x, &SkipSet::empty())?;
                Ok((x, source.project(&f), idx.len() as u64))
            }
        }
    }
}

/// Distillation loss of a student on one batch and its gradients.
pub fn distillation_grads(
    student: &ResidualNetwork,
    skip: &SkipSet,
    inputs: &Tensor,
    labels: &Tensor,
    source: FeatureSource,
    freeze_classifier: bool,
) -> Result<(f64, network::GradientSet)> {
    let trace = student.trace(inputs, skip)?;
    let projected = source.project(trace.features());
    let loss = tensor::feature_mse(&projected, labels)?;
    let grad = network::feature_mse_grad(&projected, labels);
    let grad = source.project_grad(trace.features(), grad);
    let grads = student.backward(&trace, &grad, None, freeze_classifier)?;
    Ok((loss, grads))
}

/// Incremental distillation: one SGD step per [`DistillSession::step`], so a
/// scheduler can interleave the work with serving.
#[derive(Debug, Clone)]
pub struct DistillSession {
    student: ResidualNetwork,
    skip: SkipSet,
    config: DistillConfig,
    sampler: EpochSampler,
    batch: usize,
    step: usize,
    loss_trace: Vec<f64>,
    teacher_queries: u64,
}

impl DistillSession {
    pub fn new(student: ResidualNetwork, skip: SkipSet, config: DistillConfig, dataset_len: usize) -> Result<Self> {
        config.validate()?;
        if dataset_len == 0 {
            return Err(Error::Config("fine-tuning set is empty".into()));
        }
        student.check_skip(&skip)?;
        Ok(DistillSession {
            sampler: EpochSampler::new(dataset_len, config.seed),
            batch: config.effective_batch(dataset_len),
            student,
            skip,
            config,
            step: 0,
            loss_trace: Vec::new(),
            teacher_queries: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.steps
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn student(&self) -> &ResidualNetwork {
        &self.student
    }

    pub fn step(&mut self, labels: &LabelSource<'_>) -> Result<f64> {
        if labels.len() != self.sampler.n {
            return Err(Error::Config("label source size changed mid-run".into()));
        }
        let idx = self.sampler.next_batch(self.batch);
        let (x, y, queries) = labels.batch(&idx)?;
        self.teacher_queries += queries;
        let (loss, grads) = distillation_grads(
            &self.student,
            &self.skip,
            &x,
            &y,
            labels.feature_source(),
            self.config.freeze_classifier,
        )?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {}", self.step)));
        }
        let lr = lr_at(self.step, &self.config);
        self.student
            .sgd_step(&grads, lr)
            .map_err(|e| Error::Numeric(format!("step {}: {e}", self.step)))?;
        self.loss_trace.push(loss);
        self.step += 1;
        Ok(loss)
    }

    pub fn finish(self, wall_time: f64, cache_queries: u64) -> (ResidualNetwork, DistillReport) {
        let final_loss = self.loss_trace.last().copied().unwrap_or(0.0);
        (
            self.student,
            DistillReport {
                loss_trace: self.loss_trace,
                wall_time,
                teacher_query_count: self.teacher_queries + cache_queries,
                final_loss,
            },
        )
    }
}

fn check_label_shape(student: &ResidualNetwork, source: FeatureSource, pixels: usize, input_dim: usize) -> Result<()> {
    if source.pixels(student.width()) != pixels {
        return Err(Error::Dimension(format!(
            "labels have {pixels} pixels, student produces {}",
            source.pixels(student.width())
        )));
    }
    if input_dim != student.input_dim() {
        return Err(Error::Dimension(format!(
            "samples have {input_dim} features, student expects {}",
            student.input_dim()
        )));
    }
    Ok(())
}

/// Fine-tunes `student` (with `skip` removed) against cached pseudo-labels.
/// The teacher is not evaluated here; the report counts the queries spent
/// building the cache.
pub fn distill(
    student: ResidualNetwork,
    skip: &SkipSet,
    cache: &PseudoLabelCache,
    config: &DistillConfig,
) -> Result<(ResidualNetwork, DistillReport)> {
    check_label_shape(&student, cache.feature_source, cache.pixels(), cache.input_dim())?;
    let start = Instant::now();
    let mut session = DistillSession::new(student, skip.clone(), config.clone(), cache.len())?;
    let labels = LabelSource::Cached(cache);
    while !session.is_done() {
        session.step(&labels)?;
    }
    Ok(session.finish(start.elapsed().as_secs_f64(), cache.teacher_query_count))
}

/// Same optimization as [`distill`], but labels come from a teacher forward
/// pass on every mini-batch.
pub fn distill_live(
    student: ResidualNetwork,
    skip: &SkipSet,
    teacher: &ResidualNetwork,
    samples: &Tensor,
    source: FeatureSource,
    config: &DistillConfig,
) -> Result<(ResidualNetwork, DistillReport)> {
    check_label_shape(&student, source, source.pixels(teacher.width()), samples.cols())?;
    let start = Instant::now();
    let mut session = DistillSession::new(student, skip.clone(), config.clone(), samples.rows())?;
    let labels = LabelSource::Live {
        teacher,
        samples,
        source,
    };
    while !session.is_done() {
        session.step(&labels)?;
    }
    Ok(session.finish(start.elapsed().as_secs_f64(), 0))
}

/// Distillation loss of `student` over the whole cache.
pub fn cache_loss(student: &ResidualNetwork, skip: &SkipSet, cache: &PseudoLabelCache) -> Result<f64> {
    let f = student.features(&cache.inputs, skip)?;
    tensor::feature_mse(&cache.feature_source.project(&f), &cache.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Architecture, InitScale};
    use crate::meter;
    use rand::Rng;

    fn net(seed: u64, arch: &Architecture) -> ResidualNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ResidualNetwork::random(arch, InitScale::default(), &mut rng).unwrap()
    }

    fn samples(seed: u64, n: usize, d: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn lr_schedule_values() {
        let cfg = DistillConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.02);
        assert_eq!(lr_at(199, &cfg), 0.02);
        assert_eq!(lr_at(200, &cfg), 0.002);
        assert_eq!(lr_at(400, &cfg), 0.0002);
        assert_eq!(lr_at(499, &cfg), 0.0002);
        let short = DistillConfig { steps: 10, ..cfg };
        assert_eq!(lr_at(3, &short), 0.02);
        assert_eq!(lr_at(9, &short), 0.02 * 0.1 * 0.1);
    }

    #[test]
    fn lr_schedule_has_two_decays() {
        for steps in 5..60 {
            let cfg = DistillConfig { steps, ..Default::default() };
            let lrs: Vec<f64> = (0..steps).map(|s| lr_at(s, &cfg)).collect();
            assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
            let drops = lrs.windows(2).filter(|w| w[1] < w[0]).count();
            assert_eq!(drops, 2, "steps={steps}");
        }
    }

    #[test]
    fn dataset_sizing() {
        assert_eq!(required_dataset_size(10_000, 100, 1.0).unwrap(), 100);
        assert_eq!(required_dataset_size(10_000, 200, 1.0).unwrap(), 50);
        assert_eq!(required_dataset_size(10_001, 200, 1.0).unwrap(), 51);
        assert_eq!(required_dataset_size(0, 7, 1.0).unwrap(), 1);
        assert!(required_dataset_size(10, 0, 1.0).is_err());
        assert!(required_dataset_size(10, 1, 0.0).is_err());
    }

    #[test]
    fn cache_matches_teacher_and_counts_queries() {
        let arch = Architecture::uniform(3, 4, 2, 2);
        let teacher = net(1, &arch);
        let x = samples(2, 5, 3);
        let (cache, ops) = meter::measure(|| build_cache(&teacher, &x, FeatureSource::FinalBlock).unwrap());
        assert_eq!(ops.forward_samples, 5);
        assert_eq!(cache.teacher_query_count, 5);
        let f = teacher.features(&x.select_rows(&[3]).unwrap(), &SkipSet::empty()).unwrap();
        assert_eq!(cache.labels.row(3), f.data());
        assert!(build_cache(&teacher, &Tensor::zeros(&[0]), FeatureSource::FinalBlock).is_err());
    }

    #[test]
    fn pooled_projection() {
        let f = Tensor::matrix(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = FeatureSource::Pooled.project(&f);
        assert_eq!(p.shape(), &[1, 1]);
        assert_eq!(p.data(), &[2.5]);
    }

    #[test]
    fn cache_file_roundtrip_and_rejects_garbage() {
        let arch = Architecture::uniform(3, 4, 2, 2);
        let teacher = net(1, &arch);
        let cache = build_cache(&teacher, &samples(2, 4, 3), FeatureSource::Pooled).unwrap();
        let bytes = cache.encode();
        assert_eq!(&bytes[..4], b"LCCH");
        let back = PseudoLabelCache::decode(&bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        back.verify_teacher(&teacher).unwrap();
        assert!(back.verify_teacher(&net(2, &arch)).is_err());
        assert!(PseudoLabelCache::decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(PseudoLabelCache::decode(&bad).is_err());
    }

    #[test]
    fn teacher_as_student_is_fixed_point() {
        let arch = Architecture::uniform(3, 4, 2, 2);
        let teacher = net(3, &arch);
        let cache = build_cache(&teacher, &samples(4, 8, 3), FeatureSource::FinalBlock).unwrap();
        let cfg = DistillConfig { steps: 5, ..Default::default() };
        let (student, report) = distill(teacher.clone(), &SkipSet::empty(), &cache, &cfg).unwrap();
        assert_eq!(report.loss_trace[0], 0.0);
        assert_eq!(student, teacher);
    }

    #[test]
    fn cached_and_live_match_bitwise() {
        let arch = Architecture::uniform(3, 5, 3, 2);
        let teacher = net(5, &arch);
        let x = samples(6, 20, 3);
        let cfg = DistillConfig { steps: 30, batch_size: 8, seed: 7, ..Default::default() };
        let skip = SkipSet::single(2);
        for source in [FeatureSource::FinalBlock, FeatureSource::Pooled] {
            let cache = build_cache(&teacher, &x, source).unwrap();
            let (a, ra) = distill(teacher.clone(), &skip, &cache, &cfg).unwrap();
            let (b, rb) = distill_live(teacher.clone(), &skip, &teacher, &x, source, &cfg).unwrap();
            assert_eq!(a, b);
            assert_eq!(ra.loss_trace, rb.loss_trace);
            assert_eq!(ra.teacher_query_count, 20);
            assert_eq!(rb.teacher_query_count, 30 * 8);
        }
    }

    #[test]
    fn distillation_reduces_loss() {
        let arch = Architecture::uniform(4, 6, 3, 3);
        let teacher = net(8, &arch);
        let cache = build_cache(&teacher, &samples(9, 64, 4), FeatureSource::FinalBlock).unwrap();
        let cfg = DistillConfig { steps: 500, seed: 1, ..Default::default() };
        let skip = SkipSet::single(2);
        let before = cache_loss(&teacher, &skip, &cache).unwrap();
        let (student, report) = distill(teacher.clone(), &skip, &cache, &cfg).unwrap();
        let after = cache_loss(&student, &skip, &cache).unwrap();
        assert_eq!(report.loss_trace.len(), 500);
        assert!(after < before, "{after} !< {before}");
        assert!(report.final_loss < report.loss_trace[0]);
        // classifier untouched
        assert_eq!(student.classifier, teacher.classifier);
    }

    #[test]
    fn batch_clamped_to_dataset() {
        let cfg = DistillConfig::default();
        assert_eq!(cfg.effective_batch(10), 10);
        assert_eq!(cfg.effective_batch(1000), 64);
    }

    #[test]
    fn sampler_covers_each_epoch() {
        let mut s = EpochSampler::new(7, 3);
        let mut seen = s.next_batch(7);
        seen.sort();
        assert_eq!(seen, (0..7).collect::<Vec<_>>());
        let mut next = s.next_batch(7);
        next.sort();
        assert_eq!(next, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn shape_mismatch_rejected() {
        let teacher = net(1, &Architecture::uniform(3, 4, 2, 2));
        let other = net(1, &Architecture::uniform(3, 5, 2, 2));
        let cache = build_cache(&teacher, &samples(2, 4, 3), FeatureSource::FinalBlock).unwrap();
        let cfg = DistillConfig { steps: 1, ..Default::default() };
        assert!(matches!(
            distill(other, &SkipSet::empty(), &cache, &cfg),
            Err(Error::Dimension(_))
        ));
    }
}
