use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use latecut::distill::{self, DistillConfig, FeatureSource, PseudoLabelCache};
use latecut::experiment::{self, ExperimentConfig, ExperimentGrid, ExperimentReport};
use latecut::latency::{self, LatencyMode, LatencyProfile, ProfileConfig};
use latecut::pruning::{self, PruneDecision, PruneMethod};
use latecut::scheduler::{self, NoAdaptation, PrunedModel, ServeConfig};
use latecut::{data, Error, SkipSet, Tensor};
use log::LevelFilter;
use serde::{Deserialize, Serialize};

use crate::output::{self, load_checkpoint, load_inputs, log_resolved, write_checkpoint, write_json};
use crate::{output_dir, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Measured,
    Modeled,
}

impl From<Mode> for LatencyMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Measured => LatencyMode::Measured,
            Mode::Modeled => LatencyMode::Modeled,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Proposed,
    Random,
    #[value(name = "l2ratio")]
    L2Ratio,
    Curl,
    Oracle,
}

impl From<Method> for PruneMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Proposed => PruneMethod::Proposed,
            Method::Random => PruneMethod::Random,
            Method::L2Ratio => PruneMethod::L2Ratio,
            Method::Curl => PruneMethod::Curl,
            Method::Oracle => PruneMethod::Oracle,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Cached,
    Live,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Features {
    /// The full final-block feature vector.
    Final,
    /// Its mean, one value per sample.
    Pooled,
}

impl From<Features> for FeatureSource {
    fn from(f: Features) -> Self {
        match f {
            Features::Final => FeatureSource::FinalBlock,
            Features::Pooled => FeatureSource::Pooled,
        }
    }
}

#[derive(Serialize)]
struct Resolved<'a, T> {
    command: &'a str,
    log_level: String,
    #[serde(flatten)]
    args: &'a T,
}

fn resolved<T: Serialize>(dir: &Path, command: &str, args: &T) -> CliResult<()> {
    let r = Resolved {
        command,
        log_level: log::max_level().to_string().to_lowercase(),
        args,
    };
    log_resolved(dir, command, &r)
}

fn first_rows(inputs: &Tensor, n: usize, what: &str) -> CliResult<Tensor> {
    if inputs.rows() < n {
        return Err(CliError::data(format!(
            "{what} needs {n} samples, the sample file has {}",
            inputs.rows()
        )));
    }
    Ok(inputs.select_rows(&(0..n).collect::<Vec<_>>())?)
}

#[derive(Debug, Args, Serialize)]
pub struct ProfileArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Modeled)]
    mode: Mode,
    /// Untimed runs before measuring.
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Timed runs; the median is kept.
    #[arg(long, default_value_t = 15)]
    runs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, env = "LATECUT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn profile(args: ProfileArgs) -> CliResult<()> {
    resolved(&output_dir(&args.out), "profile", &args)?;
    let net = load_checkpoint(&args.checkpoint)?;
    let config = ProfileConfig {
        mode: args.mode.into(),
        batch_size: args.batch,
        warmup_runs: args.warmup,
        timed_runs: args.runs,
        seed: args.seed,
    };
    let profile = latency::profile(&net, &config)?;
    write_atomic_text(&args.out, &profile.to_json()?)?;
    for b in &profile.per_block {
        println!("block {:>3}  delta_t {:.6}", b.block_id, b.delta_t);
    }
    Ok(())
}

fn write_atomic_text(path: &Path, text: &str) -> CliResult<()> {
    let mut text = text.to_string();
    text.push('\n');
    output::write_atomic(path, text.as_bytes())
}

#[derive(Debug, Args, Serialize)]
pub struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Proposed)]
    method: Method,
    /// Number of blocks to remove.
    #[arg(long = "np", default_value_t = 1)]
    n_p: usize,
    #[arg(long, default_value_t = pruning::DEFAULT_PRUNE_BATCH)]
    prune_batch: usize,
    /// Sample file; the first `--prune-batch` rows form the prune batch and
    /// the oracle fine-tunes on the rows after them. Not needed for random.
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Fine-tuning steps per candidate block for the oracle.
    #[arg(long, default_value_t = 100)]
    oracle_steps: usize,
    #[arg(long, env = "LATECUT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

pub fn prune(args: PruneArgs) -> CliResult<()> {
    resolved(&output_dir(&args.out), "prune", &args)?;
    let net = load_checkpoint(&args.checkpoint)?;
    let profile = LatencyProfile::from_json(&output::read_text(&args.profile)?)
        .map_err(|e| output::with_path(&args.profile, e))?;
    if profile.per_block.len() != net.n_blocks() {
        return Err(CliError::data(format!(
            "profile has {} blocks, checkpoint has {}",
            profile.per_block.len(),
            net.n_blocks()
        )));
    }
    let inputs = match (&args.samples, args.method) {
        (Some(path), _) => Some(load_inputs(path)?),
        (None, Method::Random) => None,
        (None, m) => {
            return Err(CliError::usage(format!(
                "--samples is required for method {}",
                PruneMethod::from(m)
            )))
        }
    };
    let batch = || -> CliResult<Tensor> {
        first_rows(inputs.as_ref().expect("checked above"), args.prune_batch, "the prune batch")
    };
    let decision = match args.method {
        Method::Proposed => pruning::rank_and_prune(&net, &batch()?, &profile, args.n_p)?,
        Method::Random => pruning::baseline_random(&net, args.n_p, args.seed)?,
        Method::L2Ratio => pruning::baseline_l2_ratio(&net, &batch()?, args.n_p)?,
        Method::Curl => pruning::baseline_curl(&net, &batch()?, args.n_p)?,
        Method::Oracle => {
            let all = inputs.as_ref().expect("checked above");
            if all.rows() <= args.prune_batch {
                return Err(CliError::data("the oracle needs samples beyond the prune batch"));
            }
            let rest = all.select_rows(&(args.prune_batch..all.rows()).collect::<Vec<_>>())?;
            let cache = distill::build_cache(&net, &rest, FeatureSource::FinalBlock)?;
            pruning::baseline_finetune_oracle(&net, &cache, &profile, args.n_p, args.oracle_steps, args.seed)?
        }
    };
    write_atomic_text(&args.out, &decision.to_json()?)?;
    let ids: Vec<String> = decision.pruned.iter().map(|id| id.to_string()).collect();
    println!("pruned blocks: {}", ids.join(" "));
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct DistillArgs {
    /// Network to fine-tune; the decision's blocks are removed from it.
    #[arg(long)]
    student: PathBuf,
    #[arg(long)]
    decision: PathBuf,
    /// Pseudo-label cache file (cached mode).
    #[arg(long, conflicts_with = "samples")]
    cache: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Teacher inputs; labels in the file are ignored.
    #[arg(long)]
    samples: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, env = "LATECUT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = LabelMode::Cached)]
    mode: LabelMode,
    /// Pseudo-labels built from `--samples`; a loaded cache keeps its own.
    #[arg(long, value_enum, default_value_t = Features::Final)]
    features: Features,
    /// Also write the cache built from `--samples`.
    #[arg(long)]
    save_cache: Option<PathBuf>,
    /// Fine-tuned network with the removed blocks dropped.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Serialize)]
struct DistillOutput {
    mode: LabelMode,
    pruned: SkipSet,
    feature_source: FeatureSource,
    samples: usize,
    #[serde(flatten)]
    report: distill::DistillReport,
}

pub fn distill(args: DistillArgs) -> CliResult<()> {
    resolved(&output_dir(&args.out), "distill", &args)?;
    let student = load_checkpoint(&args.student)?;
    let decision = PruneDecision::from_json(&output::read_text(&args.decision)?)
        .map_err(|e| output::with_path(&args.decision, e))?;
    student.check_skip(&decision.pruned)?;
    let skip = decision.pruned.clone();
    let config = DistillConfig {
        steps: args.steps,
        batch_size: args.batch,
        lr0: args.lr,
        seed: args.seed,
        ..DistillConfig::default()
    };
    config.validate()?;
    let teacher = args.teacher.as_deref().map(load_checkpoint).transpose()?;

    let (network, report, source, samples) = match args.mode {
        LabelMode::Cached => {
            let cache = match (&args.cache, &teacher, &args.samples) {
                (Some(path), _, _) => {
                    let cache = PseudoLabelCache::load(path).map_err(|e| output::with_path(path, e))?;
                    if let Some(t) = &teacher {
                        cache.verify_teacher(t)?;
                    }
                    cache
                }
                (None, Some(t), Some(path)) => {
                    let cache = distill::build_cache(t, &load_inputs(path)?, args.features.into())?;
                    if let Some(out) = &args.save_cache {
                        output::write_atomic(out, &cache.encode())?;
                    }
                    cache
                }
                _ => return Err(CliError::usage("cached mode needs --cache, or --teacher with --samples")),
            };
            let (net, report) = distill::distill(student, &skip, &cache, &config)?;
            (net, report, cache.feature_source, cache.len())
        }
        LabelMode::Live => {
            let (Some(t), Some(path)) = (&teacher, &args.samples) else {
                return Err(CliError::usage("live mode needs --teacher and --samples"));
            };
            let inputs = load_inputs(path)?;
            let source = args.features.into();
            let (net, report) = distill::distill_live(student, &skip, t, &inputs, source, &config)?;
            (net, report, source, inputs.rows())
        }
    };
    let pruned = PrunedModel { network, skip };
    write_checkpoint(&args.out, &pruned.compact())?;
    println!(
        "distilled {} steps in {:.3}s, final batch loss {:.6}",
        report.loss_trace.len(),
        report.wall_time,
        report.final_loss
    );
    write_json(
        &args.report,
        &DistillOutput {
            mode: args.mode,
            pruned: pruned.skip,
            feature_source: source,
            samples,
            report,
        },
    )
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample file replayed as the arrival stream.
    #[arg(long)]
    stream: PathBuf,
    #[arg(long = "np", default_value_t = 1)]
    n_p: usize,
    #[arg(long, default_value_t = pruning::DEFAULT_PRUNE_BATCH)]
    prune_batch: usize,
    #[arg(long, default_value_t = 256)]
    cache_size: usize,
    /// Distillation steps; 0 serves the pruned network without fine-tuning.
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.02)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Background work units per tick.
    #[arg(long, default_value_t = 4)]
    budget: usize,
    /// Samples arriving per tick.
    #[arg(long, default_value_t = 1)]
    per_tick: usize,
    #[arg(long, value_enum, default_value_t = Features::Final)]
    features: Features,
    #[arg(long, env = "LATECUT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    timeline: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

pub fn serve(args: ServeArgs) -> CliResult<()> {
    resolved(&output_dir(&args.out), "serve", &args)?;
    let net = load_checkpoint(&args.checkpoint)?;
    let samples = output::load_samples(&args.stream)?;
    let config = ServeConfig {
        n_p: args.n_p,
        prune_batch_size: args.prune_batch,
        cache_size: args.cache_size,
        distill: DistillConfig {
            steps: args.steps,
            batch_size: args.batch,
            lr0: args.lr,
            seed: args.seed,
            ..DistillConfig::default()
        },
        budget_per_tick: args.budget,
        feature_source: args.features.into(),
    };
    let stream = scheduler::uniform_stream(samples, args.per_tick);
    let outcome = match scheduler::serve(stream, net, config, NoAdaptation) {
        Ok(outcome) => outcome,
        Err(Error::PartialRun {
            phase,
            served,
            timeline,
        }) => {
            // keep what was served so the run can be inspected
            write_atomic_text(&args.timeline, &timeline.to_json()?)?;
            return Err(CliError::data(format!(
                "stream exhausted in phase {phase} after {served} samples; partial timeline written"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    write_atomic_text(&args.timeline, &outcome.timeline.to_json()?)?;
    write_checkpoint(&args.out, &outcome.model.compact())?;
    let t = &outcome.timings;
    println!(
        "served {} samples; pruning done at tick {}, distillation done at tick {}",
        outcome.timeline.records.len(),
        t.prune_done_tick.map_or("-".into(), |v| v.to_string()),
        t.distill_done_tick.map_or("-".into(), |v| v.to_string()),
    );
    if let Some(acc) = outcome.timeline.accuracy() {
        println!("stream accuracy {:.2}%", 100.0 * acc);
    }
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct ExperimentArgs {
    /// Grid (`{base, methods, n_p, seeds}`) or single-run config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Results directory.
    #[arg(long)]
    out: PathBuf,
    /// Replaces every seed of the config.
    #[arg(long, env = "LATECUT_SEED")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    latency_mode: Option<Mode>,
    /// Save each seed's source checkpoint and data splits under `seed-<s>/`.
    #[arg(long)]
    keep_artifacts: bool,
}

#[derive(Serialize)]
struct ExperimentResolved<'a> {
    command: &'static str,
    log_level: String,
    seed: Option<u64>,
    latency_mode: LatencyMode,
    output_dir: &'a Path,
    grid: &'a ExperimentGrid,
}

fn load_grid(path: &Path) -> CliResult<ExperimentGrid> {
    let text = output::read_text(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| CliError::at(path, e))?;
    let grid = if value.get("methods").is_some() {
        ExperimentGrid::from_json(&text)
    } else {
        ExperimentConfig::from_json(&text).map(|c| ExperimentGrid {
            methods: vec![c.method],
            n_p: vec![c.n_p],
            seeds: vec![c.seed],
            base: c,
        })
    };
    grid.map_err(|e| output::with_path(path, e))
}

pub fn run_dir_name(r: &ExperimentReport) -> String {
    format!("{}-np{}-seed{}", r.method, r.n_p, r.seed)
}

pub fn experiment(args: ExperimentArgs, log_level: LevelFilter) -> CliResult<()> {
    let mut grid = load_grid(&args.config)?;
    if let Some(seed) = args.seed {
        grid.seeds = vec![seed];
        grid.base.seed = seed;
    }
    if let Some(mode) = args.latency_mode {
        grid.base.latency_mode = mode.into();
    }
    grid.validate()?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::at(&args.out, e))?;
    write_json(
        &args.out.join("config.json"),
        &ExperimentResolved {
            command: "experiment",
            log_level: log_level.to_string().to_lowercase(),
            seed: args.seed,
            latency_mode: grid.base.latency_mode,
            output_dir: &args.out,
            grid: &grid,
        },
    )?;
    let runs = grid.configs().count();
    log::info!("running {runs} configurations over {} seeds", grid.seeds.len());

    let mut artifact_error = None;
    let reports = experiment::compare_methods_with(&grid, |seed, prepared| {
        log::info!("seed {seed}: source model ready");
        if !args.keep_artifacts {
            return Ok(());
        }
        let dir = args.out.join(format!("seed-{seed}"));
        let saved = write_checkpoint(&dir.join("source.ckpt"), &prepared.source)
            .and_then(|_| save_split(&dir.join("train.bin"), &prepared.train))
            .and_then(|_| save_split(&dir.join("test.bin"), &prepared.test));
        saved.map_err(|e| {
            let msg = e.message.clone();
            artifact_error = Some(e);
            Error::Config(msg)
        })
    });
    let reports = match (reports, artifact_error) {
        (_, Some(e)) => return Err(e),
        (r, None) => r?,
    };

    for r in &reports {
        write_json(&args.out.join("runs").join(run_dir_name(r)).join("report.json"), r)?;
        log::info!(
            "{} n_p={} seed={}: accuracy {:.2}% ls {:.2}% pf {:.3}s",
            r.method,
            r.n_p,
            r.seed,
            r.accuracy,
            r.ls,
            r.pf_seconds
        );
    }
    output::write_atomic(&args.out.join("results.csv"), experiment::results_csv(&reports).as_bytes())?;
    println!("{} runs written to {}", reports.len(), args.out.display());
    Ok(())
}

fn save_split(path: &Path, split: &data::Split) -> CliResult<()> {
    output::write_atomic(path, &data::encode_samples(&split.samples())?)
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Directory written by `experiment`.
    #[arg(long)]
    results: PathBuf,
    /// Also write the summary as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: PruneMethod,
    pub n_p: usize,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub ls_mean: f64,
    pub pf_seconds_mean: f64,
    pub pf_normalized_mean: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn summarize(reports: &[ExperimentReport]) -> Vec<MethodSummary> {
    let mut groups: BTreeMap<(usize, usize), Vec<&ExperimentReport>> = BTreeMap::new();
    for r in reports {
        let order = PruneMethod::ALL.iter().position(|&m| m == r.method).unwrap_or(usize::MAX);
        groups.entry((r.n_p, order)).or_default().push(r);
    }
    groups
        .into_values()
        .map(|rows| {
            let acc: Vec<f64> = rows.iter().map(|r| r.accuracy).collect();
            let m = mean(&acc);
            let var = acc.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / acc.len() as f64;
            let norm: Vec<f64> = rows.iter().filter_map(|r| r.pf_normalized).collect();
            MethodSummary {
                method: rows[0].method,
                n_p: rows[0].n_p,
                runs: rows.len(),
                accuracy_mean: m,
                accuracy_std: var.sqrt(),
                ls_mean: mean(&rows.iter().map(|r| r.ls).collect::<Vec<_>>()),
                pf_seconds_mean: mean(&rows.iter().map(|r| r.pf_seconds).collect::<Vec<_>>()),
                pf_normalized_mean: (!norm.is_empty()).then(|| mean(&norm)),
            }
        })
        .collect()
}

fn load_reports(results: &Path) -> CliResult<Vec<ExperimentReport>> {
    let runs = results.join("runs");
    let entries = std::fs::read_dir(&runs).map_err(|e| CliError::at(&runs, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path().join("report.json"))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| serde_json::from_str(&output::read_text(p)?).map_err(|e| CliError::at(p, e)))
        .collect()
}

pub fn report(args: ReportArgs) -> CliResult<()> {
    let reports = load_reports(&args.results)?;
    if reports.is_empty() {
        return Err(CliError::data(format!("no run reports under {}", args.results.display())));
    }
    let summary = summarize(&reports);
    println!(
        "{:<10} {:>4} {:>5} {:>10} {:>8} {:>8} {:>10} {:>8}",
        "method", "n_p", "runs", "accuracy", "std", "ls", "pf_s", "pf_norm"
    );
    for s in &summary {
        println!(
            "{:<10} {:>4} {:>5} {:>10.2} {:>8.2} {:>8.2} {:>10.4} {:>8}",
            s.method.name(),
            s.n_p,
            s.runs,
            s.accuracy_mean,
            s.accuracy_std,
            s.ls_mean,
            s.pf_seconds_mean,
            s.pf_normalized_mean.map_or("-".into(), |v| format!("{v:.1}"))
        );
    }
    if let Some(out) = &args.out {
        write_json(out, &summary)?;
    }
    Ok(())
}
