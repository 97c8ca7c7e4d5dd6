//! End-to-end runs on the synthetic testbed: generate data, pretrain the
//! source model, then profile, prune, fine-tune and evaluate on the held-out
//! remainder of the test split.
//!
//! The first `prune_batch` rows of the adaptation split form the prune batch
//! and the next `cache_size` rows the fine-tuning set. The adaptation split is
//! the (shifted) test split for test-time runs and the clean train split for
//! train-time runs. Evaluation always uses test rows from
//! `prune_batch + cache_size` on, so both variants score the same samples and
//! never a sample that was seen during pruning or fine-tuning.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{self, DatasetSpec, ShiftKind, ShiftSpec, Split};
use crate::distill::{self, DistillConfig, FeatureSource};
use crate::error::{Error, Result};
use crate::latency::{self, LatencyMode, ProfileConfig};
use crate::network::{ResidualNetwork, SkipSet};
use crate::pruning::{self, PruneDecision, PruneMethod};
use crate::train::{self, PretrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_split: usize,
    /// Spread of the class centers and of the within-class noise. Both are
    /// rescaled so each input coordinate has unit variance before the shift;
    /// only their ratio sets the difficulty.
    pub separation: f64,
    pub noise_sigma: f64,
    pub shift: ShiftSpec,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            num_classes: 8,
            input_dim: 8,
            samples_per_split: 4000,
            separation: 2.0,
            noise_sigma: 1.0,
            shift: ShiftSpec {
                kind: ShiftKind::RotationMix,
                severity: 1.0,
            },
        }
    }
}

impl DatasetConfig {
    pub fn spec(&self, seed: u64) -> DatasetSpec {
        let total = (self.separation.powi(2) + self.noise_sigma.powi(2)).sqrt();
        let norm = if total > 0.0 { total } else { 1.0 };
        DatasetSpec::gaussian_mixture(
            self.num_classes,
            self.input_dim,
            self.samples_per_split,
            self.separation / norm,
            self.noise_sigma / norm,
            seed,
        )
        .with_shift(self.shift.kind, self.shift.severity)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistillMode {
    Cached,
    Live,
}

/// Which split supplies the prune batch and fine-tuning samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptationData {
    Test,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    /// `seed` is ignored; runs derive it from [`ExperimentConfig::seed`].
    pub pretrain: PretrainConfig,
    pub method: PruneMethod,
    pub n_p: usize,
    pub prune_batch: usize,
    /// Fine-tuning set size; `None` sizes it from the pruned student with
    /// [`distill::required_dataset_size`] and `kappa`.
    pub cache_size: Option<usize>,
    pub kappa: f64,
    /// `seed` is ignored; runs derive it from [`ExperimentConfig::seed`].
    pub distill: DistillConfig,
    pub distill_mode: DistillMode,
    pub feature_source: FeatureSource,
    pub latency_mode: LatencyMode,
    pub adaptation_data: AdaptationData,
    /// Fine-tuning steps per candidate for the oracle method.
    pub oracle_steps: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetConfig::default(),
            pretrain: PretrainConfig::default(),
            method: PruneMethod::Proposed,
            n_p: 1,
            prune_batch: pruning::DEFAULT_PRUNE_BATCH,
            cache_size: None,
            kappa: 1.0,
            distill: DistillConfig::default(),
            distill_mode: DistillMode::Cached,
            feature_source: FeatureSource::FinalBlock,
            latency_mode: LatencyMode::Modeled,
            adaptation_data: AdaptationData::Test,
            oracle_steps: 100,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: ExperimentConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.spec(self.seed).validate()?;
        if self.prune_batch == 0 {
            return Err(Error::Config("prune_batch must be positive".into()));
        }
        if self.cache_size == Some(0) {
            return Err(Error::Config("cache_size must be positive".into()));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config("kappa must be positive".into()));
        }
        if self.pretrain.n_blocks == 0 || self.pretrain.width == 0 {
            return Err(Error::Config("model needs at least one block and positive width".into()));
        }
        if self.n_p >= self.pretrain.n_blocks {
            return Err(Error::Config(format!(
                "n_p = {} must be below the block count {}",
                self.n_p, self.pretrain.n_blocks
            )));
        }
        if self.distill.steps > 0 {
            self.distill.validate()?;
        }
        Ok(())
    }

    fn profile_config(&self) -> ProfileConfig {
        ProfileConfig {
            mode: self.latency_mode,
            batch_size: self.prune_batch,
            seed: self.seed,
            ..ProfileConfig::default()
        }
    }
}

/// Data and source model shared by every run with the same seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Split,
    pub test: Split,
    pub source: ResidualNetwork,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let (train, test) = data::make_dataset(&config.dataset.spec(config.seed))?;
    let pretrain = PretrainConfig {
        seed: config.seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(1),
        ..config.pretrain.clone()
    };
    let source = train::pretrain_source(&train, &pretrain)?;
    Ok(Prepared { train, test, source })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Elapsed {
    pub prune_done: f64,
    pub finetune_done: f64,
    pub inference_done: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub method: PruneMethod,
    pub n_p: usize,
    pub seed: u64,
    pub shift_kind: String,
    pub severity: f64,
    pub adaptation_data: AdaptationData,
    /// Held-out accuracy of the pruned, fine-tuned model, percent.
    pub accuracy: f64,
    /// Held-out accuracy of the unpruned source model, percent.
    pub source_accuracy: f64,
    /// Held-out predictions equal to the source model's, percent.
    pub teacher_agreement: f64,
    /// Latency saving, percent.
    pub ls: f64,
    /// Pruning plus fine-tuning wall time.
    pub pf_seconds: f64,
    /// `pf_seconds` relative to the proposed method at the same seed and
    /// `n_p`, percent. Only set by [`compare_methods`].
    pub pf_normalized: Option<f64>,
    pub elapsed: Elapsed,
    pub pruned: SkipSet,
    pub cache_size: usize,
    /// Distillation loss over the whole fine-tuning set after the last step.
    pub train_loss: Option<f64>,
    pub eval_samples: usize,
}

impl ExperimentReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Prune-batch rows, fine-tuning rows and held-out evaluation rows.
pub fn partition(config: &ExperimentConfig, prepared: &Prepared, cache_size: usize) -> Result<(Split, Split, Split)> {
    let pb = config.prune_batch;
    let used = pb + cache_size;
    if used >= prepared.test.len() {
        return Err(Error::Config(format!(
            "prune batch ({pb}) plus fine-tuning set ({cache_size}) leave no held-out samples out of {}",
            prepared.test.len()
        )));
    }
    let adapt = match config.adaptation_data {
        AdaptationData::Test => &prepared.test,
        AdaptationData::Train => &prepared.train,
    };
    if used > adapt.len() {
        return Err(Error::Config(format!("adaptation split has only {} samples", adapt.len())));
    }
    Ok((
        adapt.slice(0, pb)?,
        adapt.slice(pb, used)?,
        prepared.test.slice(used, prepared.test.len())?,
    ))
}

fn cache_size_for(config: &ExperimentConfig, source: &ResidualNetwork, skip: &SkipSet) -> Result<usize> {
    match config.cache_size {
        Some(n) => Ok(n),
        None => distill::required_dataset_size(
            source.parameter_count(skip),
            config.feature_source.pixels(source.width()),
            config.kappa,
        ),
    }
}

fn decide(
    config: &ExperimentConfig,
    source: &ResidualNetwork,
    prune_split: &Split,
    finetune_split: &Split,
    latency: &latency::LatencyProfile,
) -> Result<(PruneDecision, Option<distill::PseudoLabelCache>)> {
    let batch = &prune_split.inputs;
    let n_p = config.n_p;
    Ok(match config.method {
        PruneMethod::Proposed => (pruning::rank_and_prune(source, batch, latency, n_p)?, None),
        PruneMethod::Random => (pruning::baseline_random(source, n_p, config.seed)?, None),
        PruneMethod::L2Ratio => (pruning::baseline_l2_ratio(source, batch, n_p)?, None),
        PruneMethod::Curl => (pruning::baseline_curl(source, batch, n_p)?, None),
        PruneMethod::Oracle => {
            let cache = distill::build_cache(source, &finetune_split.inputs, config.feature_source)?;
            let d = pruning::baseline_finetune_oracle(source, &cache, latency, n_p, config.oracle_steps, config.seed)?;
            (d, Some(cache))
        }
    })
}

/// Profile, prune, fine-tune and evaluate one configuration.
pub fn run_prepared(config: &ExperimentConfig, prepared: &Prepared) -> Result<ExperimentReport> {
    config.validate()?;
    let source = &prepared.source;
    // Every method except the oracle can size the fine-tuning set after
    // pruning; the oracle needs it up front, so size it for a generic n_p
    // removal of the smallest blocks.
    let provisional = {
        let mut ids: Vec<usize> = source.block_ids().collect();
        ids.sort_by_key(|&id| (source.blocks[id - 1].param_count(), id));
        ids.into_iter().take(config.n_p).collect::<SkipSet>()
    };
    let oracle_cache_size = cache_size_for(config, source, &provisional)?;
    let (prune_split, oracle_split, _) = partition(config, prepared, oracle_cache_size)?;

    let start = Instant::now();
    let latency = latency::profile(source, &config.profile_config())?;
    let (decision, oracle_cache) = decide(config, source, &prune_split, &oracle_split, &latency)?;
    let prune_done = start.elapsed().as_secs_f64();

    let skip = decision.pruned.clone();
    let cache_size = match oracle_cache {
        Some(_) => oracle_cache_size,
        None => cache_size_for(config, source, &skip)?,
    };
    let (_, finetune_split, eval) = partition(config, prepared, cache_size)?;
    let distill_cfg = DistillConfig {
        seed: config.seed,
        ..config.distill.clone()
    };
    let (student, cache) = if config.distill.steps == 0 {
        (source.clone(), None)
    } else {
        match config.distill_mode {
            DistillMode::Cached => {
                let cache = match oracle_cache {
                    Some(c) => c,
                    None => distill::build_cache(source, &finetune_split.inputs, config.feature_source)?,
                };
                let (s, _) = distill::distill(source.clone(), &skip, &cache, &distill_cfg)?;
                (s, Some(cache))
            }
            DistillMode::Live => {
                let (s, _) = distill::distill_live(
                    source.clone(),
                    &skip,
                    source,
                    &finetune_split.inputs,
                    config.feature_source,
                    &distill_cfg,
                )?;
                (s, None)
            }
        }
    };
    let finetune_done = start.elapsed().as_secs_f64();

    let accuracy = train::accuracy(&student, &eval, &skip)?;
    let inference_done = start.elapsed().as_secs_f64();
    let source_pred = source.predict(&eval.inputs, &SkipSet::empty())?;
    let student_pred = student.predict(&eval.inputs, &skip)?;
    let hits = |pred: &[usize], other: &[usize]| pred.iter().zip(other).filter(|(a, b)| a == b).count();
    let source_accuracy = hits(&source_pred, &eval.labels) as f64 / eval.len() as f64;
    let teacher_agreement = hits(&student_pred, &source_pred) as f64 / eval.len() as f64;

    let train_loss = if config.distill.steps == 0 {
        None
    } else {
        let cache = match cache {
            Some(c) => c,
            None => distill::build_cache(source, &finetune_split.inputs, config.feature_source)?,
        };
        Some(distill::cache_loss(&student, &skip, &cache)?)
    };

    // saving of the model actually served, from a fresh profile
    let final_profile = latency::profile(&student, &config.profile_config())?;
    let ls = latency::remeasure_saving(&final_profile, &student, &skip)?;

    Ok(ExperimentReport {
        method: config.method,
        n_p: config.n_p,
        seed: config.seed,
        shift_kind: config.dataset.shift.kind.name().to_string(),
        severity: config.dataset.shift.severity,
        adaptation_data: config.adaptation_data,
        accuracy: 100.0 * accuracy,
        source_accuracy: 100.0 * source_accuracy,
        teacher_agreement: 100.0 * teacher_agreement,
        ls: 100.0 * ls,
        pf_seconds: finetune_done,
        pf_normalized: None,
        elapsed: Elapsed {
            prune_done,
            finetune_done,
            inference_done,
        },
        pruned: skip,
        cache_size,
        train_loss,
        eval_samples: eval.len(),
    })
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    run_prepared(config, &prepare(config)?)
}

/// Held-out accuracy for each fine-tuning set size, for calibrating `kappa`.
pub fn cache_size_sweep(config: &ExperimentConfig, prepared: &Prepared, sizes: &[usize]) -> Result<Vec<(usize, f64)>> {
    sizes
        .iter()
        .map(|&n| {
            let cfg = ExperimentConfig {
                cache_size: Some(n),
                ..config.clone()
            };
            Ok((n, run_prepared(&cfg, prepared)?.accuracy))
        })
        .collect()
}

/// Smallest size whose accuracy is within `tolerance` points of the best.
pub fn saturation_knee(points: &[(usize, f64)], tolerance: f64) -> Option<usize> {
    let best = points.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    points
        .iter()
        .filter(|p| p.1 >= best - tolerance)
        .map(|p| p.0)
        .min()
}

/// A base configuration swept over methods, removal counts and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    #[serde(default)]
    pub base: ExperimentConfig,
    pub methods: Vec<PruneMethod>,
    pub n_p: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl ExperimentGrid {
    pub fn from_json(s: &str) -> Result<Self> {
        let g: ExperimentGrid = serde_json::from_str(s)?;
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.n_p.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid needs at least one method, n_p and seed".into()));
        }
        for &n_p in &self.n_p {
            ExperimentConfig {
                n_p,
                ..self.base.clone()
            }
            .validate()?;
        }
        Ok(())
    }

    pub fn configs(&self) -> impl Iterator<Item = ExperimentConfig> + '_ {
        self.seeds.iter().flat_map(move |&seed| {
            self.n_p.iter().flat_map(move |&n_p| {
                self.methods.iter().map(move |&method| ExperimentConfig {
                    method,
                    n_p,
                    seed,
                    ..self.base.clone()
                })
            })
        })
    }
}

/// Runs every grid cell with identical fine-tuning, one row per
/// `(method, n_p, seed)`. The source model is trained once per seed.
pub fn compare_methods(grid: &ExperimentGrid) -> Result<Vec<ExperimentReport>> {
    compare_methods_with(grid, |_, _| Ok(()))
}

/// [`compare_methods`], calling `on_prepared` once per seed before that
/// seed's runs.
pub fn compare_methods_with(
    grid: &ExperimentGrid,
    mut on_prepared: impl FnMut(u64, &Prepared) -> Result<()>,
) -> Result<Vec<ExperimentReport>> {
    grid.validate()?;
    let mut reports = Vec::new();
    for &seed in &grid.seeds {
        let prepared = prepare(&ExperimentConfig {
            seed,
            ..grid.base.clone()
        })?;
        on_prepared(seed, &prepared)?;
        for config in grid.configs().filter(|c| c.seed == seed) {
            reports.push(run_prepared(&config, &prepared)?);
        }
    }
    normalize_pf(&mut reports);
    Ok(reports)
}

/// Fills `pf_normalized` against the proposed row with the same seed and
/// `n_p`, where one exists.
pub fn normalize_pf(reports: &mut [ExperimentReport]) {
    let baselines: Vec<(u64, usize, f64)> = reports
        .iter()
        .filter(|r| r.method == PruneMethod::Proposed)
        .map(|r| (r.seed, r.n_p, r.pf_seconds))
        .collect();
    for r in reports.iter_mut() {
        r.pf_normalized = baselines
            .iter()
            .find(|(s, n, _)| *s == r.seed && *n == r.n_p)
            .filter(|(_, _, t)| *t > 0.0)
            .map(|(_, _, t)| 100.0 * (r.pf_seconds / t));
    }
}

/// Column order of [`results_csv`].
pub const CSV_COLUMNS: [&str; 12] = [
    "method",
    "n_p",
    "seed",
    "shift_kind",
    "severity",
    "accuracy",
    "ls",
    "pf_seconds",
    "pf_normalized",
    "elapsed_prune",
    "elapsed_finetune",
    "elapsed_infer",
];

/// One header line, then one line per report. A missing `pf_normalized` is
/// an empty field.
pub fn results_csv(reports: &[ExperimentReport]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        let fields = [
            r.method.name().to_string(),
            r.n_p.to_string(),
            r.seed.to_string(),
            r.shift_kind.clone(),
            r.severity.to_string(),
            r.accuracy.to_string(),
            r.ls.to_string(),
            r.pf_seconds.to_string(),
            r.pf_normalized.map(|v| v.to_string()).unwrap_or_default(),
            r.elapsed.prune_done.to_string(),
            r.elapsed.finetune_done.to_string(),
            r.elapsed.inference_done.to_string(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn quick() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetConfig {
                samples_per_split: 500,
                input_dim: 8,
                ..DatasetConfig::default()
            },
            pretrain: PretrainConfig {
                width: 8,
                n_blocks: 3,
                epochs: 8,
                ..PretrainConfig::default()
            },
            prune_batch: 32,
            distill: DistillConfig {
                steps: 40,
                ..DistillConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn ls_matches_profiler() {
        let cfg = quick();
        let prepared = prepare(&cfg).unwrap();
        let r = run_prepared(&cfg, &prepared).unwrap();
        let p = latency::profile(&prepared.source, &latency::ProfileConfig::modeled(cfg.prune_batch)).unwrap();
        let expect = 100.0 * p.latency_saving(&r.pruned).unwrap();
        assert!((r.ls - expect).abs() < 1e-12);
        assert_eq!(r.pruned.len(), 1);
        assert_eq!(r.eval_samples, 500 - 32 - r.cache_size);
    }

    #[test]
    fn deterministic_in_modeled_mode() {
        let cfg = quick();
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.accuracy.to_bits(), b.accuracy.to_bits());
        assert_eq!(a.train_loss.map(f64::to_bits), b.train_loss.map(f64::to_bits));
        assert_eq!(a.pruned, b.pruned);
        assert_eq!(a.ls.to_bits(), b.ls.to_bits());
    }

    #[test]
    fn random_rows_repeat() {
        let cfg = ExperimentConfig {
            method: PruneMethod::Random,
            seed: 9,
            ..quick()
        };
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!((a.accuracy, &a.pruned, a.ls), (b.accuracy, &b.pruned, b.ls));
    }

    #[test]
    fn partition_excludes_adaptation_rows() {
        let cfg = quick();
        let prepared = prepare(&cfg).unwrap();
        let (pb, ft, eval) = partition(&cfg, &prepared, 50).unwrap();
        assert_eq!((pb.len(), ft.len(), eval.len()), (32, 50, 500 - 82));
        assert_eq!(eval.inputs.row(0), prepared.test.inputs.row(82));
        let too_big = partition(&cfg, &prepared, 500);
        assert!(matches!(too_big, Err(Error::Config(_))));
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = quick();
        cfg.n_p = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = quick();
        cfg.dataset.shift.severity = -1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn csv_schema() {
        let grid = ExperimentGrid {
            base: quick(),
            methods: vec![PruneMethod::Proposed, PruneMethod::Random],
            n_p: vec![1],
            seeds: vec![1],
        };
        let rows = compare_methods(&grid).unwrap();
        let csv = results_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], CSV_COLUMNS.join(","));
        assert_eq!(lines.len(), 3);
        for line in &lines[1..] {
            assert_eq!(line.split(',').count(), CSV_COLUMNS.len());
        }
        assert_eq!(rows[0].pf_normalized, Some(100.0));
        assert!(rows[1].pf_normalized.is_some());
    }

    #[test]
    fn knee_rule() {
        let pts = [(10, 80.0), (20, 85.0), (40, 89.6), (80, 90.0), (160, 89.9)];
        assert_eq!(saturation_knee(&pts, 0.5), Some(40));
        assert_eq!(saturation_knee(&pts, 0.0), Some(80));
        assert_eq!(saturation_knee(&[], 0.5), None);
    }

    #[test]
    fn grid_json_defaults() {
        let g = ExperimentGrid::from_json(r#"{"methods":["proposed","curl"],"n_p":[1,2],"seeds":[0,1,2]}"#).unwrap();
        assert_eq!(g.configs().count(), 12);
        assert!(ExperimentGrid::from_json(r#"{"methods":[],"n_p":[1],"seeds":[0]}"#).is_err());
    }
}
