//! Inference latency of the full network and of each single-block removal,
//! and the normalized saving `ΔT = (T - T_skip) / T`.
//!
//! Two modes:
//! * `Modeled` counts multiply-accumulates of every affine map. It is exact
//!   and additive, so savings of disjoint removals add up.
//! * `Measured` times real forward passes on a seeded noise batch and takes
//!   medians. Wall-clock savings are not additive, so multi-block savings
//!   are re-measured instead of summed.

use std::sync::Mutex;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ResidualBlock, ResidualNetwork, SkipSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatencyMode {
    Measured,
    Modeled,
}

impl std::str::FromStr for LatencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "measured" => Ok(LatencyMode::Measured),
            "modeled" => Ok(LatencyMode::Modeled),
            other => Err(Error::Config(format!("unknown latency mode {other:?}"))),
        }
    }
}

/// MAC counts for a batch of `batch` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub batch: usize,
}

impl CostModel {
    pub fn block_cost(&self, block: &ResidualBlock) -> f64 {
        (2 * block.width() * block.hidden() * self.batch) as f64
    }

    pub fn stem_cost(&self, net: &ResidualNetwork) -> f64 {
        (net.input_dim() * net.width() * self.batch) as f64
    }

    pub fn classifier_cost(&self, net: &ResidualNetwork) -> f64 {
        (net.width() * net.num_classes() * self.batch) as f64
    }

    pub fn network_cost(&self, net: &ResidualNetwork, skip: &SkipSet) -> f64 {
        self.stem_cost(net)
            + net
                .blocks
                .iter()
                .filter(|b| !skip.contains(b.block_id))
                .map(|b| self.block_cost(b))
                .sum::<f64>()
            + self.classifier_cost(net)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLatency {
    pub block_id: usize,
    /// Latency of the network with only this block removed.
    pub latency: f64,
    pub delta_t: f64,
}

/// Profile JSON: `{mode, T, per_block: [{block_id, latency, delta_t}]}` plus
/// the run parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyProfile {
    pub mode: LatencyMode,
    #[serde(rename = "T")]
    pub full_latency: f64,
    pub per_block: Vec<BlockLatency>,
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub warmup_runs: usize,
    #[serde(default)]
    pub timed_runs: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileConfig {
    pub mode: LatencyMode,
    pub batch_size: usize,
    pub warmup_runs: usize,
    pub timed_runs: usize,
    pub seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            mode: LatencyMode::Modeled,
            batch_size: 64,
            warmup_runs: 3,
            timed_runs: 15,
            seed: 0,
        }
    }
}

impl ProfileConfig {
    pub fn modeled(batch_size: usize) -> Self {
        ProfileConfig {
            mode: LatencyMode::Modeled,
            batch_size,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("profile batch size must be positive".into()));
        }
        if self.mode == LatencyMode::Measured {
            if self.warmup_runs < 1 {
                return Err(Error::Config("measured profiling needs warmup_runs >= 1".into()));
            }
            if self.timed_runs < 3 {
                return Err(Error::Config("measured profiling needs timed_runs >= 3".into()));
            }
        }
        Ok(())
    }
}

// Measured profiling holds this for its whole run so no two profilers in the
// process time concurrently.
static PROFILER_TOKEN: Mutex<()> = Mutex::new(());

pub fn profile(net: &ResidualNetwork, config: &ProfileConfig) -> Result<LatencyProfile> {
    config.validate()?;
    let (full, skipped) = match config.mode {
        LatencyMode::Modeled => {
            let cost = CostModel {
                batch: config.batch_size,
            };
            let full = cost.network_cost(net, &SkipSet::empty());
            let skipped = net
                .blocks
                .iter()
                .map(|b| full - cost.block_cost(b))
                .collect::<Vec<_>>();
            (full, skipped)
        }
        LatencyMode::Measured => measure(net, config)?,
    };
    if full <= 0.0 {
        return Err(Error::Numeric(format!("full latency {full} is not positive")));
    }
    let per_block = net
        .block_ids()
        .zip(skipped)
        .map(|(block_id, latency)| BlockLatency {
            block_id,
            latency,
            delta_t: (full - latency) / full,
        })
        .collect();
    Ok(LatencyProfile {
        mode: config.mode,
        full_latency: full,
        per_block,
        batch_size: config.batch_size,
        warmup_runs: config.warmup_runs,
        timed_runs: config.timed_runs,
        seed: config.seed,
    })
}

fn noise_batch(net: &ResidualNetwork, batch: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..batch * net.input_dim())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::matrix(batch, net.input_dim(), data).expect("positive dims")
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Median wall time of each configuration; configurations are interleaved per
/// round so slow drift affects all of them alike.
fn time_configs(
    net: &ResidualNetwork,
    batch: &Tensor,
    configs: &[SkipSet],
    warmup: usize,
    runs: usize,
) -> Result<Vec<f64>> {
    let _token = PROFILER_TOKEN.lock().unwrap_or_else(|e| e.into_inner());
    for _ in 0..warmup {
        for skip in configs {
            std::hint::black_box(net.forward(batch, skip)?);
        }
    }
    let mut samples = vec![Vec::with_capacity(runs); configs.len()];
    for _ in 0..runs {
        for (skip, out) in configs.iter().zip(samples.iter_mut()) {
            let start = Instant::now();
            std::hint::black_box(net.forward(batch, skip)?);
            out.push(start.elapsed().as_secs_f64());
        }
    }
    Ok(samples.into_iter().map(median).collect())
}

fn measure(net: &ResidualNetwork, config: &ProfileConfig) -> Result<(f64, Vec<f64>)> {
    let batch = noise_batch(net, config.batch_size, config.seed);
    let mut configs = vec![SkipSet::empty()];
    configs.extend(net.block_ids().map(SkipSet::single));
    let medians = time_configs(net, &batch, &configs, config.warmup_runs, config.timed_runs)?;
    Ok((medians[0], medians[1..].to_vec()))
}

impl LatencyProfile {
    pub fn block(&self, block_id: usize) -> Result<&BlockLatency> {
        self.per_block
            .iter()
            .find(|b| b.block_id == block_id)
            .ok_or(Error::InvalidBlock {
                block_id,
                n_blocks: self.per_block.len(),
            })
    }

    /// `ΔT` of removing every block in `skip`.
    ///
    /// Modeled profiles sum per-block savings. Measured profiles answer
    /// single-block removals directly; larger sets need [`remeasure_saving`].
    pub fn latency_saving(&self, skip: &SkipSet) -> Result<f64> {
        let rows = skip.iter().map(|id| self.block(id)).collect::<Result<Vec<_>>>()?;
        match (self.mode, rows.as_slice()) {
            (_, []) => Ok(0.0),
            (_, [one]) => Ok(one.delta_t),
            (LatencyMode::Modeled, rows) => {
                let saved: f64 = rows.iter().map(|r| self.full_latency - r.latency).sum();
                Ok(saved / self.full_latency)
            }
            (LatencyMode::Measured, _) => Err(Error::Config(
                "multi-block saving of a measured profile must be re-measured".into(),
            )),
        }
    }

    /// Copy with every latency multiplied by `c`.
    pub fn scaled(&self, c: f64) -> LatencyProfile {
        let mut p = self.clone();
        p.full_latency *= c;
        for b in &mut p.per_block {
            b.latency *= c;
            b.delta_t = (p.full_latency - b.latency) / p.full_latency;
        }
        p
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: LatencyProfile = serde_json::from_str(s)?;
        if !(p.full_latency.is_finite() && p.full_latency > 0.0) {
            return Err(Error::format("profile", "T must be positive and finite"));
        }
        if p.per_block.iter().any(|b| !b.latency.is_finite() || !b.delta_t.is_finite()) {
            return Err(Error::format("profile", "non-finite block latency"));
        }
        Ok(p)
    }
}

/// Measured-mode saving of a multi-block removal: times the full and the
/// pruned network afresh with the profile's settings.
pub fn remeasure_saving(profile: &LatencyProfile, net: &ResidualNetwork, skip: &SkipSet) -> Result<f64> {
    net.check_skip(skip)?;
    if profile.mode == LatencyMode::Modeled || skip.len() <= 1 {
        return profile.latency_saving(skip);
    }
    let batch = noise_batch(net, profile.batch_size.max(1), profile.seed);
    let medians = time_configs(
        net,
        &batch,
        &[SkipSet::empty(), skip.clone()],
        profile.warmup_runs.max(1),
        profile.timed_runs.max(3),
    )?;
    Ok((medians[0] - medians[1]) / medians[0])
}
