//! Test-time serving loop that interleaves inference with pruning and
//! distillation.
//!
//! Time advances in ticks. Each tick first answers every sample that arrived
//! in it with the active model, then spends up to `budget_per_tick` units of
//! background work:
//!
//! * `Pruning`: one unit computes the reference features of the prune batch,
//!   then one unit scores one block. The pretrained model serves.
//! * `Distilling`: one unit labels one cache sample with the teacher, then
//!   one unit runs one SGD step. The pretrained model still serves.
//! * `Serving`: the pruned, fine-tuned model serves and the pretrained model
//!   is dropped. An optional adaptation hook sees every served batch.
//!
//! The first `prune_batch_size` samples of the stream form the prune batch and
//! the next `cache_size` samples form the fine-tuning set. Work that needs
//! samples which have not arrived yet waits.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::distill::{self, DistillConfig, DistillSession, FeatureSource, LabelSource, PseudoLabelCache};
use crate::error::{Error, Result};
use crate::latency::{self, CostModel, LatencyProfile, ProfileConfig};
use crate::network::{ResidualNetwork, SkipSet};
use crate::pruning::{self, BlockProfile, PruneDecision};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Phase {
    Pruning,
    Distilling,
    Serving,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelId {
    /// The pretrained model `M`.
    #[serde(rename = "M")]
    Pretrained,
    /// The pruned, fine-tuned model.
    #[serde(rename = "M_pruned")]
    Pruned,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub input: Vec<f64>,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub tick: u64,
    pub sample: Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServingRecord {
    pub index: usize,
    pub tick: u64,
    pub phase: Phase,
    pub model: ModelId,
    pub predicted_class: usize,
    pub correct: Option<bool>,
    /// Modeled per-sample inference cost of the serving model (MACs).
    pub latency: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ServingTimeline {
    pub records: Vec<ServingRecord>,
}

impl ServingTimeline {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Fraction of labeled records served correctly, if any are labeled.
    pub fn accuracy(&self) -> Option<f64> {
        let labeled: Vec<bool> = self.records.iter().filter_map(|r| r.correct).collect();
        (!labeled.is_empty()).then(|| labeled.iter().filter(|&&c| c).count() as f64 / labeled.len() as f64)
    }
}

/// Per-sample extension point run on every batch served in the `Serving`
/// phase, e.g. entropy-minimizing test-time adaptation.
pub trait AdaptationHook {
    fn adapt(&mut self, model: &mut ResidualNetwork, skip: &SkipSet, batch: &Tensor) -> Result<()>;
}

/// The shipped hook: leaves the model untouched.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoAdaptation;

impl AdaptationHook for NoAdaptation {
    fn adapt(&mut self, _: &mut ResidualNetwork, _: &SkipSet, _: &Tensor) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServeConfig {
    pub n_p: usize,
    pub prune_batch_size: usize,
    pub cache_size: usize,
    pub distill: DistillConfig,
    pub budget_per_tick: usize,
    pub feature_source: FeatureSource,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            n_p: 1,
            prune_batch_size: pruning::DEFAULT_PRUNE_BATCH,
            cache_size: 256,
            distill: DistillConfig::default(),
            budget_per_tick: 4,
            feature_source: FeatureSource::FinalBlock,
        }
    }
}

impl ServeConfig {
    fn validate(&self, net: &ResidualNetwork) -> Result<()> {
        if self.prune_batch_size == 0 {
            return Err(Error::Config("prune batch must hold at least one sample".into()));
        }
        if self.budget_per_tick == 0 {
            return Err(Error::Config("budget_per_tick must be positive".into()));
        }
        if self.n_p > net.n_blocks() {
            return Err(Error::Config(format!(
                "cannot prune {} of {} blocks",
                self.n_p,
                net.n_blocks()
            )));
        }
        if self.distill.steps > 0 {
            if self.cache_size == 0 {
                return Err(Error::Config("distillation needs cache_size >= 1".into()));
            }
            self.distill.validate()?;
        }
        Ok(())
    }

    /// Samples that must arrive before the run can reach `Serving`.
    pub fn required_samples(&self) -> usize {
        self.prune_batch_size + if self.distill.steps > 0 { self.cache_size } else { 0 }
    }
}

/// Counters and timings of background work.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentTimings {
    pub prune_done_tick: Option<u64>,
    pub distill_done_tick: Option<u64>,
    pub prune_seconds: f64,
    pub distill_seconds: f64,
    pub inference_seconds: f64,
    /// Batched teacher forward passes spent ranking blocks.
    pub teacher_prune_passes: u64,
    /// Teacher evaluations spent labeling cache samples.
    pub teacher_label_queries: u64,
    pub distill_steps: u64,
}

impl ExperimentTimings {
    pub fn teacher_queries(&self) -> u64 {
        self.teacher_prune_passes + self.teacher_label_queries
    }
}

/// A network together with the blocks removed from it.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel {
    pub network: ResidualNetwork,
    pub skip: SkipSet,
}

impl PrunedModel {
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        self.network.predict(batch, &self.skip)
    }

    /// The network with the skipped blocks physically removed and the
    /// remaining blocks renumbered from 1.
    pub fn compact(&self) -> ResidualNetwork {
        let mut net = self.network.clone();
        net.blocks.retain(|b| !self.skip.contains(b.block_id));
        for (i, b) in net.blocks.iter_mut().enumerate() {
            b.block_id = i + 1;
        }
        net
    }
}

enum Work {
    Pruning {
        reference: Option<Tensor>,
        rows: Vec<BlockProfile>,
    },
    Distilling {
        session: Option<DistillSession>,
    },
    Serving,
}

enum Progress {
    Done,
    Blocked,
}

/// The serving state machine; drive it with [`Server::tick`].
pub struct Server<H: AdaptationHook = NoAdaptation> {
    config: ServeConfig,
    teacher: Option<ResidualNetwork>,
    latency: LatencyProfile,
    work: Work,
    decision: Option<PruneDecision>,
    pruned: Option<PrunedModel>,
    hook: H,
    prune_rows: Vec<Vec<f64>>,
    cache_rows: Vec<Vec<f64>>,
    cache_labels: Vec<f64>,
    cache: Option<PseudoLabelCache>,
    served: usize,
    tick: u64,
    timings: ExperimentTimings,
}

impl Server<NoAdaptation> {
    pub fn new(pretrained: ResidualNetwork, config: ServeConfig) -> Result<Self> {
        Server::with_hook(pretrained, config, NoAdaptation)
    }
}

impl<H: AdaptationHook> Server<H> {
    pub fn with_hook(pretrained: ResidualNetwork, config: ServeConfig, hook: H) -> Result<Self> {
        config.validate(&pretrained)?;
        let latency = latency::profile(&pretrained, &ProfileConfig::modeled(config.prune_batch_size))?;
        Ok(Server {
            config,
            teacher: Some(pretrained),
            latency,
            work: Work::Pruning {
                reference: None,
                rows: Vec::new(),
            },
            decision: None,
            pruned: None,
            hook,
            prune_rows: Vec::new(),
            cache_rows: Vec::new(),
            cache_labels: Vec::new(),
            cache: None,
            served: 0,
            tick: 0,
            timings: ExperimentTimings::default(),
        })
    }

    pub fn phase(&self) -> Phase {
        match self.work {
            Work::Pruning { .. } => Phase::Pruning,
            Work::Distilling { .. } => Phase::Distilling,
            Work::Serving => Phase::Serving,
        }
    }

    pub fn current_tick(&self) -> u64 {
        self.tick
    }

    pub fn timings(&self) -> &ExperimentTimings {
        &self.timings
    }

    pub fn latency_profile(&self) -> &LatencyProfile {
        &self.latency
    }

    /// The ranking, once pruning has finished.
    pub fn decision(&self) -> Option<&PruneDecision> {
        self.decision.as_ref()
    }

    fn pruned_set(&self) -> SkipSet {
        self.decision.as_ref().map(|d| d.pruned.clone()).unwrap_or_default()
    }

    pub fn pruned_model(&self) -> Option<&PrunedModel> {
        self.pruned.as_ref()
    }

    pub fn into_parts(self) -> (Option<PrunedModel>, Option<PruneDecision>, ExperimentTimings) {
        (self.pruned, self.decision, self.timings)
    }

    fn active(&self) -> (&ResidualNetwork, SkipSet, ModelId) {
        match (&self.pruned, &self.teacher) {
            (Some(p), _) => (&p.network, p.skip.clone(), ModelId::Pruned),
            (None, Some(t)) => (t, SkipSet::empty(), ModelId::Pretrained),
            (None, None) => unreachable!("teacher is only dropped once the pruned model exists"),
        }
    }

    /// Serves `arrivals` with the active model, then advances background work.
    pub fn tick(&mut self, arrivals: &[Sample]) -> Result<Vec<ServingRecord>> {
        let records = self.serve_arrivals(arrivals)?;
        let mut budget = self.config.budget_per_tick;
        while budget > 0 && self.phase() != Phase::Serving {
            match self.work_unit()? {
                Progress::Done => budget -= 1,
                Progress::Blocked => break,
            }
        }
        // a phase whose remaining work is free completes without spending budget
        if self.phase() != Phase::Serving {
            self.advance_free()?;
        }
        self.tick += 1;
        Ok(records)
    }

    fn serve_arrivals(&mut self, arrivals: &[Sample]) -> Result<Vec<ServingRecord>> {
        if arrivals.is_empty() {
            return Ok(Vec::new());
        }
        let batch = Tensor::from_rows(&arrivals.iter().map(|s| s.input.as_slice()).collect::<Vec<_>>())?;
        let phase = self.phase();
        let start = Instant::now();
        let (net, skip, model) = self.active();
        let cost = CostModel { batch: 1 }.network_cost(net, &skip);
        let predictions = tensor::argmax_rows(&net.forward(&batch, &skip)?.logits);
        self.timings.inference_seconds += start.elapsed().as_secs_f64();
        if let Some(p) = self.pruned.as_mut() {
            self.hook.adapt(&mut p.network, &p.skip, &batch)?;
        }

        let mut records = Vec::with_capacity(arrivals.len());
        for (sample, predicted) in arrivals.iter().zip(predictions) {
            records.push(ServingRecord {
                index: self.served,
                tick: self.tick,
                phase,
                model,
                predicted_class: predicted,
                correct: sample.label.map(|l| l == predicted),
                latency: cost,
            });
            if self.prune_rows.len() < self.config.prune_batch_size {
                self.prune_rows.push(sample.input.clone());
            } else if self.cache_rows.len() < self.config.cache_size {
                self.cache_rows.push(sample.input.clone());
            }
            self.served += 1;
        }
        Ok(records)
    }

    fn work_unit(&mut self) -> Result<Progress> {
        let start = Instant::now();
        let phase = self.phase();
        let progress = match &mut self.work {
            Work::Pruning { reference, rows } => {
                if self.prune_rows.len() < self.config.prune_batch_size {
                    return Ok(Progress::Blocked);
                }
                let teacher = self.teacher.as_ref().expect("teacher alive while pruning");
                let batch = Tensor::from_rows(&self.prune_rows)?;
                match reference {
                    None => *reference = Some(teacher.features(&batch, &SkipSet::empty())?),
                    Some(r) => {
                        let id = rows.len() + 1;
                        rows.push(pruning::score_block(teacher, &batch, r, &self.latency, id)?);
                    }
                }
                self.timings.teacher_prune_passes += 1;
                Progress::Done
            }
            Work::Distilling { session } => match session {
                None => {
                    let next = self.cache_labels.len() / self.label_width();
                    if next >= self.cache_rows.len() {
                        return Ok(Progress::Blocked);
                    }
                    let teacher = self.teacher.as_ref().expect("teacher alive while distilling");
                    let x = Tensor::from_rows(&[&self.cache_rows[next]])?;
                    let f = teacher.features(&x, &SkipSet::empty())?;
                    self.cache_labels
                        .extend_from_slice(self.config.feature_source.project(&f).data());
                    self.timings.teacher_label_queries += 1;
                    Progress::Done
                }
                Some(s) => {
                    let cache = self.cache.as_ref().expect("cache built before the session");
                    s.step(&LabelSource::Cached(cache))?;
                    self.timings.distill_steps += 1;
                    Progress::Done
                }
            },
            Work::Serving => Progress::Blocked,
        };
        let elapsed = start.elapsed().as_secs_f64();
        match phase {
            Phase::Pruning => self.timings.prune_seconds += elapsed,
            Phase::Distilling => self.timings.distill_seconds += elapsed,
            Phase::Serving => {}
        }
        self.advance_free()?;
        Ok(progress)
    }

    fn label_width(&self) -> usize {
        let width = self.teacher.as_ref().map(|t| t.width()).unwrap_or(1);
        self.config.feature_source.pixels(width)
    }

    /// Performs transitions that need no budget: finishing a ranking once every
    /// block is scored, starting distillation once the cache is labeled, and
    /// switching models once the last step is done.
    fn advance_free(&mut self) -> Result<()> {
        let pixels = self.label_width();
        loop {
            match &mut self.work {
                Work::Pruning { reference, rows } => {
                    let n = self.teacher.as_ref().map(|t| t.n_blocks()).unwrap_or(0);
                    if reference.is_none() || rows.len() < n {
                        return Ok(());
                    }
                    let decision = pruning::decision_from_rows(std::mem::take(rows), self.config.n_p);
                    self.decision = Some(decision);
                    self.timings.prune_done_tick = Some(self.tick);
                    self.work = Work::Distilling { session: None };
                }
                Work::Distilling { session } => {
                    if self.config.distill.steps == 0 {
                        self.finish_distillation(None);
                        continue;
                    }
                    match session {
                        None => {
                            let labeled = self.cache_labels.len() / pixels;
                            if labeled < self.config.cache_size {
                                return Ok(());
                            }
                            let teacher = self.teacher.as_ref().expect("teacher alive");
                            let cache = PseudoLabelCache {
                                inputs: Tensor::from_rows(&self.cache_rows)?,
                                labels: Tensor::matrix(labeled, pixels, self.cache_labels.clone())?,
                                feature_source: self.config.feature_source,
                                teacher_fingerprint: crate::checkpoint::fingerprint(teacher),
                                teacher_query_count: labeled as u64,
                            };
                            let skip = self.decision.as_ref().map(|d| d.pruned.clone()).unwrap_or_default();
                            *session = Some(DistillSession::new(
                                teacher.clone(),
                                skip,
                                self.config.distill.clone(),
                                cache.len(),
                            )?);
                            self.cache = Some(cache);
                        }
                        Some(s) if s.is_done() => {
                            let s = session.take();
                            self.finish_distillation(s);
                        }
                        Some(_) => return Ok(()),
                    }
                }
                Work::Serving => return Ok(()),
            }
        }
    }

    fn finish_distillation(&mut self, session: Option<DistillSession>) {
        let skip = self.pruned_set();
        let teacher = self.teacher.take().expect("teacher alive until distillation ends");
        let network = match session {
            Some(s) => s.finish(self.timings.distill_seconds, 0).0,
            None => teacher,
        };
        self.pruned = Some(PrunedModel { network, skip });
        self.cache = None;
        self.timings.distill_done_tick = Some(self.tick);
        self.work = Work::Serving;
    }

    /// True when background work cannot continue without more samples.
    pub fn is_blocked(&self) -> bool {
        match &self.work {
            Work::Pruning { .. } => self.prune_rows.len() < self.config.prune_batch_size,
            Work::Distilling { session: None, .. } => {
                self.config.distill.steps > 0
                    && self.cache_labels.len() / self.label_width() >= self.cache_rows.len()
                    && self.cache_rows.len() < self.config.cache_size
            }
            _ => false,
        }
    }
}

/// Output of a complete serving run.
#[derive(Debug, Clone)]
pub struct ServeOutcome {
    pub model: PrunedModel,
    pub decision: PruneDecision,
    pub timeline: ServingTimeline,
    pub timings: ExperimentTimings,
}

/// Runs the serving loop over a stream of arrivals (ticks must be
/// non-decreasing) until the stream is drained and the pruned model serves.
pub fn serve<I, H>(stream: I, pretrained: ResidualNetwork, config: ServeConfig, hook: H) -> Result<ServeOutcome>
where
    I: IntoIterator<Item = Arrival>,
    H: AdaptationHook,
{
    let mut server = Server::with_hook(pretrained, config, hook)?;
    let mut timeline = ServingTimeline::default();
    let mut stream = stream.into_iter().peekable();
    let mut last_tick = 0u64;
    loop {
        let mut arrivals = Vec::new();
        while let Some(a) = stream.next_if(|a| a.tick <= server.current_tick()) {
            if a.tick < last_tick {
                return Err(Error::Config("stream ticks must be non-decreasing".into()));
            }
            last_tick = a.tick;
            arrivals.push(a.sample);
        }
        timeline.records.extend(server.tick(&arrivals)?);

        let idle = server.phase() == Phase::Serving || server.is_blocked();
        match stream.peek() {
            None if server.phase() == Phase::Serving => break,
            None if server.is_blocked() => {
                return Err(Error::PartialRun {
                    phase: server.phase().to_string(),
                    served: timeline.records.len(),
                    timeline: Box::new(timeline),
                });
            }
            // nothing can happen before the next arrival; jump to it
            Some(next) if idle && next.tick > server.current_tick() => server.tick = next.tick,
            _ => {}
        }
    }
    let (model, decision, timings) = server.into_parts();
    Ok(ServeOutcome {
        model: model.expect("serving phase has a pruned model"),
        decision: decision.expect("pruning finished before serving"),
        timeline,
        timings,
    })
}

/// Convenience stream: `per_tick` samples arrive each tick, in order.
pub fn uniform_stream(samples: Vec<Sample>, per_tick: usize) -> Vec<Arrival> {
    let per_tick = per_tick.max(1);
    samples
        .into_iter()
        .enumerate()
        .map(|(i, sample)| Arrival {
            tick: (i / per_tick) as u64,
            sample,
        })
        .collect()
}

/// Distillation loss of a served model against a cache (diagnostics only).
pub fn served_cache_loss(model: &PrunedModel, cache: &PseudoLabelCache) -> Result<f64> {
    distill::cache_loss(&model.network, &model.skip, cache)
}
