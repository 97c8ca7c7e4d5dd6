//! Block importance and pruning decisions.
//!
//! The proposed criterion scores block `j` by
//!
//! ```text
//! I_j = ε_j · G_j / ΔT_j
//! ```
//!
//! where `ε_j` is the feature-map MSE between the full network and the
//! network with block `j` removed (on a prune batch), `G_j` is the fraction of
//! parameters that block holds, and `ΔT_j` is its normalized latency saving.
//! Blocks with the lowest `I` go first. Ranking `n` blocks costs one shared
//! reference forward pass plus one pass per block.
//!
//! Baselines for comparison: random, l2 ratio, a CURL-style KL criterion and
//! a fine-tune oracle that actually distills every candidate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{self, DistillConfig, PseudoLabelCache};
use crate::error::{Error, Result};
use crate::latency::LatencyProfile;
use crate::network::{ResidualNetwork, SkipSet};
use crate::tensor::{self, Tensor};

pub const DEFAULT_PRUNE_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PruneMethod {
    Proposed,
    Random,
    L2Ratio,
    Curl,
    Oracle,
}

impl PruneMethod {
    pub const ALL: [PruneMethod; 5] = [
        PruneMethod::Proposed,
        PruneMethod::Random,
        PruneMethod::L2Ratio,
        PruneMethod::Curl,
        PruneMethod::Oracle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PruneMethod::Proposed => "proposed",
            PruneMethod::Random => "random",
            PruneMethod::L2Ratio => "l2ratio",
            PruneMethod::Curl => "curl",
            PruneMethod::Oracle => "oracle",
        }
    }
}

impl std::fmt::Display for PruneMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for PruneMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PruneMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown prune method {s:?}")))
    }
}

/// One ranked row. Baselines fill only `importance` (their own score).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockProfile {
    pub block_id: usize,
    #[serde(rename = "epsilon")]
    pub epsilon_ini: Option<f64>,
    #[serde(rename = "G")]
    pub capacity_gap: Option<f64>,
    pub delta_t: Option<f64>,
    pub importance: f64,
    #[serde(default)]
    pub param_count: usize,
}

/// Decision JSON: `{method, n_p, ranked: [...], pruned: [ids]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub method: PruneMethod,
    pub n_p: usize,
    pub ranked: Vec<BlockProfile>,
    pub pruned: SkipSet,
    #[serde(default)]
    pub seed: u64,
}

impl PruneDecision {
    fn from_scores(method: PruneMethod, mut ranked: Vec<BlockProfile>, n_p: usize, seed: u64) -> Self {
        // ascending score, ties to the lower block id
        ranked.sort_by(|a, b| {
            a.importance
                .total_cmp(&b.importance)
                .then(a.block_id.cmp(&b.block_id))
        });
        let pruned = ranked.iter().take(n_p).map(|r| r.block_id).collect();
        PruneDecision {
            method,
            n_p,
            ranked,
            pruned,
            seed,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let d: PruneDecision = serde_json::from_str(s)?;
        if d.pruned.len() != d.n_p {
            return Err(Error::format("decision", "pruned set size differs from n_p"));
        }
        if d.pruned.iter().any(|id| id == 0) {
            return Err(Error::format("decision", "block ids start at 1"));
        }
        Ok(d)
    }
}

fn check_n_p(net: &ResidualNetwork, n_p: usize) -> Result<()> {
    if n_p > net.n_blocks() {
        return Err(Error::Config(format!(
            "cannot prune {n_p} blocks from a network with {} removable blocks",
            net.n_blocks()
        )));
    }
    Ok(())
}

/// `ε` of removing `block_id`, against precomputed full-network features.
pub fn initial_noise_against(
    net: &ResidualNetwork,
    prune_batch: &Tensor,
    reference: &Tensor,
    block_id: usize,
) -> Result<f64> {
    net.check_block(block_id)?;
    let skipped = net.features(prune_batch, &SkipSet::single(block_id))?;
    tensor::feature_mse(reference, &skipped)
}

/// Prune-induced noise of `block_id`: MSE between the final features of the
/// full network and of the network with that block removed.
pub fn initial_noise(net: &ResidualNetwork, prune_batch: &Tensor, block_id: usize) -> Result<f64> {
    net.check_block(block_id)?;
    let reference = net.features(prune_batch, &SkipSet::empty())?;
    initial_noise_against(net, prune_batch, &reference, block_id)
}

/// Fraction of all parameters held by `block_id`: `(|M| - |M_j|) / |M|`.
pub fn capacity_gap(net: &ResidualNetwork, block_id: usize) -> Result<f64> {
    let block = net.block(block_id)?;
    Ok(block.param_count() as f64 / net.parameter_count(&SkipSet::empty()) as f64)
}

/// `ε · G / ΔT`; zero latency saving is reported as a degenerate block.
pub fn importance(row: &BlockProfile) -> Result<f64> {
    let (Some(eps), Some(g), Some(dt)) = (row.epsilon_ini, row.capacity_gap, row.delta_t) else {
        return Err(Error::Config(format!(
            "block {} is missing one of epsilon, G, delta_t",
            row.block_id
        )));
    };
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::DegenerateBlock {
            block_id: row.block_id,
            delta_t: dt,
        });
    }
    Ok(eps * g / dt)
}

/// Scores every block once against the unpruned network and removes the
/// `n_p` least important ones.
pub fn rank_and_prune(
    net: &ResidualNetwork,
    prune_batch: &Tensor,
    latency: &LatencyProfile,
    n_p: usize,
) -> Result<PruneDecision> {
    check_n_p(net, n_p)?;
    let reference = net.features(prune_batch, &SkipSet::empty())?;
    let ranked = net
        .block_ids()
        .map(|id| score_block(net, prune_batch, &reference, latency, id))
        .collect::<Result<Vec<_>>>()?;
    Ok(PruneDecision::from_scores(PruneMethod::Proposed, ranked, n_p, 0))
}

/// One unit of ranking work: the full profile row of a single block.
pub fn score_block(
    net: &ResidualNetwork,
    prune_batch: &Tensor,
    reference: &Tensor,
    latency: &LatencyProfile,
    block_id: usize,
) -> Result<BlockProfile> {
    let mut row = BlockProfile {
        block_id,
        epsilon_ini: Some(initial_noise_against(net, prune_batch, reference, block_id)?),
        capacity_gap: Some(capacity_gap(net, block_id)?),
        delta_t: Some(latency.latency_saving(&SkipSet::single(block_id))?),
        importance: 0.0,
        param_count: net.block(block_id)?.param_count(),
    };
    row.importance = importance(&row)?;
    Ok(row)
}

/// Ranking assembled from rows scored one at a time (see [`score_block`]).
pub fn decision_from_rows(rows: Vec<BlockProfile>, n_p: usize) -> PruneDecision {
    PruneDecision::from_scores(PruneMethod::Proposed, rows, n_p, 0)
}

fn score_only(net: &ResidualNetwork, block_id: usize, score: f64) -> BlockProfile {
    BlockProfile {
        block_id,
        epsilon_ini: None,
        capacity_gap: None,
        delta_t: None,
        importance: score,
        param_count: net.blocks[block_id - 1].param_count(),
    }
}

/// Uniformly random order, seeded.
pub fn baseline_random(net: &ResidualNetwork, n_p: usize, seed: u64) -> Result<PruneDecision> {
    check_n_p(net, n_p)?;
    let mut ids: Vec<usize> = net.block_ids().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let ranked = ids
        .into_iter()
        .enumerate()
        .map(|(pos, id)| score_only(net, id, pos as f64))
        .collect();
    Ok(PruneDecision::from_scores(PruneMethod::Random, ranked, n_p, seed))
}

/// `‖out_j - in_j‖ / ‖in_j‖` over the whole prune batch, from one forward pass.
pub fn l2_ratios(net: &ResidualNetwork, prune_batch: &Tensor) -> Result<Vec<(usize, f64)>> {
    let trace = net.trace(prune_batch, &SkipSet::empty())?;
    net.block_ids()
        .map(|id| {
            let (input, output) = trace.block_io(id).expect("no block skipped");
            let in_norm = input.sum_squares().sqrt();
            if in_norm == 0.0 || !in_norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "block {id} input has norm {in_norm}"
                )));
            }
            let diff: f64 = output
                .data()
                .iter()
                .zip(input.data())
                .map(|(o, i)| (o - i) * (o - i))
                .sum();
            Ok((id, diff.sqrt() / in_norm))
        })
        .collect()
}

pub fn baseline_l2_ratio(net: &ResidualNetwork, prune_batch: &Tensor, n_p: usize) -> Result<PruneDecision> {
    check_n_p(net, n_p)?;
    let ranked = l2_ratios(net, prune_batch)?
        .into_iter()
        .map(|(id, r)| score_only(net, id, r))
        .collect();
    Ok(PruneDecision::from_scores(PruneMethod::L2Ratio, ranked, n_p, 0))
}

/// Batch-mean `KL(p_full ‖ p_skip)` of the softmax outputs.
pub fn mean_kl(full_logits: &Tensor, skipped_logits: &Tensor) -> Result<f64> {
    full_logits.ensure_same_shape(skipped_logits, "kl")?;
    let lp = tensor::log_softmax_rows(full_logits);
    let lq = tensor::log_softmax_rows(skipped_logits);
    let mut total = 0.0;
    for r in 0..lp.rows() {
        total += lp
            .row(r)
            .iter()
            .zip(lq.row(r))
            .map(|(a, b)| a.exp() * (a - b))
            .sum::<f64>();
    }
    // rounding can leave tiny negatives for identical distributions
    Ok((total / lp.rows() as f64).max(0.0))
}

pub fn curl_scores(net: &ResidualNetwork, prune_batch: &Tensor) -> Result<Vec<(usize, f64)>> {
    let full = net.forward(prune_batch, &SkipSet::empty())?.logits;
    net.block_ids()
        .map(|id| {
            let skipped = net.forward(prune_batch, &SkipSet::single(id))?.logits;
            Ok((id, mean_kl(&full, &skipped)?))
        })
        .collect()
}

pub fn baseline_curl(net: &ResidualNetwork, prune_batch: &Tensor, n_p: usize) -> Result<PruneDecision> {
    check_n_p(net, n_p)?;
    let ranked = curl_scores(net, prune_batch)?
        .into_iter()
        .map(|(id, s)| score_only(net, id, s))
        .collect();
    Ok(PruneDecision::from_scores(PruneMethod::Curl, ranked, n_p, 0))
}

/// Fine-tuned loss of each single-block removal: distill for `k_steps`
/// against the cache, then the feature MSE over the whole cache.
pub fn finetuned_losses(
    net: &ResidualNetwork,
    cache: &PseudoLabelCache,
    k_steps: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if k_steps == 0 {
        return Err(Error::Config("oracle needs k_steps >= 1".into()));
    }
    let config = DistillConfig {
        steps: k_steps,
        seed,
        ..DistillConfig::default()
    };
    net.block_ids()
        .map(|id| {
            let skip = SkipSet::single(id);
            let (student, _) = distill::distill(net.clone(), &skip, cache, &config)?;
            Ok((id, distill::cache_loss(&student, &skip, cache)?))
        })
        .collect()
}

/// Expensive reference ranking: fine-tuned loss divided by latency saving.
pub fn baseline_finetune_oracle(
    net: &ResidualNetwork,
    cache: &PseudoLabelCache,
    latency: &LatencyProfile,
    n_p: usize,
    k_steps: usize,
    seed: u64,
) -> Result<PruneDecision> {
    check_n_p(net, n_p)?;
    let ranked = finetuned_losses(net, cache, k_steps, seed)?
        .into_iter()
        .map(|(id, loss)| {
            let dt = latency.latency_saving(&SkipSet::single(id))?;
            if dt <= 0.0 {
                return Err(Error::DegenerateBlock { block_id: id, delta_t: dt });
            }
            let mut row = score_only(net, id, loss / dt);
            row.delta_t = Some(dt);
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PruneDecision::from_scores(PruneMethod::Oracle, ranked, n_p, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::{profile, ProfileConfig};
    use crate::network::{Architecture, InitScale};

    fn random_net(seed: u64, n_blocks: usize) -> ResidualNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ResidualNetwork::random(&Architecture::uniform(3, 4, n_blocks, 3), InitScale::default(), &mut rng).unwrap()
    }

    fn batch(seed: u64, rows: usize) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, 3, (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_branch(net: &mut ResidualNetwork, id: usize) {
        let b = net.block_mut(id).unwrap();
        b.weight2.data_mut().fill(0.0);
        b.bias2.data_mut().fill(0.0);
    }

    #[test]
    fn identity_block_has_zero_noise() {
        let mut net = random_net(1, 3);
        zero_branch(&mut net, 2);
        assert_eq!(initial_noise(&net, &batch(0, 5), 2).unwrap(), 0.0);
        assert!(initial_noise(&net, &batch(0, 5), 1).unwrap() > 0.0);
    }

    #[test]
    fn noise_by_hand() {
        // features with the block: [6.5, 6]; without: [2, 1]
        // mse = (4.5² + 5²) / 2 = (20.25 + 25) / 2
        let mut net = ResidualNetwork::zeros(&Architecture::uniform(2, 2, 1, 2)).unwrap();
        net.stem.weight = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = &mut net.blocks[0];
        b.weight1 = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        b.bias1 = Tensor::vector(vec![0.0, -1.0]).unwrap();
        b.weight2 = Tensor::matrix(2, 2, vec![2.0, 1.0, -1.0, 3.0]).unwrap();
        b.bias2 = Tensor::vector(vec![0.5, 0.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap();
        assert_eq!(initial_noise(&net, &x, 1).unwrap(), 22.625);
    }

    #[test]
    fn noise_permutation_invariant() {
        let net = random_net(3, 2);
        let x = batch(4, 6);
        let perm = x.select_rows(&[5, 2, 0, 1, 4, 3]).unwrap();
        let a = initial_noise(&net, &x, 1).unwrap();
        let b = initial_noise(&net, &perm, 1).unwrap();
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
    }

    #[test]
    fn capacity_gap_values() {
        let net = random_net(0, 3);
        let total = net.parameter_count(&SkipSet::empty()) as f64;
        let g = capacity_gap(&net, 1).unwrap();
        assert_eq!(g, 40.0 / total);
        assert_eq!(g, capacity_gap(&net, 3).unwrap());
        let sum: f64 = (1..=3).map(|j| capacity_gap(&net, j).unwrap()).sum();
        assert!(sum < 1.0);
        assert!(capacity_gap(&net, 4).is_err());
    }

    #[test]
    fn importance_arithmetic() {
        let row = |eps, g, dt| BlockProfile {
            block_id: 1,
            epsilon_ini: Some(eps),
            capacity_gap: Some(g),
            delta_t: Some(dt),
            importance: 0.0,
            param_count: 0,
        };
        assert!((importance(&row(0.2, 0.1, 0.25)).unwrap() - 0.08).abs() < 1e-15);
        assert_eq!(importance(&row(0.0, 0.7, 0.3)).unwrap(), 0.0);
        assert!(matches!(
            importance(&row(0.1, 0.1, 0.0)),
            Err(Error::DegenerateBlock { .. })
        ));
    }

    #[test]
    fn zero_block_pruned_first_and_np_zero() {
        let mut net = random_net(2, 3);
        zero_branch(&mut net, 3);
        let lat = profile(&net, &ProfileConfig::modeled(8)).unwrap();
        let d = rank_and_prune(&net, &batch(1, 8), &lat, 1).unwrap();
        assert_eq!(d.ranked[0].block_id, 3);
        assert_eq!(d.pruned, SkipSet::single(3));
        let none = rank_and_prune(&net, &batch(1, 8), &lat, 0).unwrap();
        assert!(none.pruned.is_empty());
        assert!(matches!(
            rank_and_prune(&net, &batch(1, 8), &lat, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn random_baseline_reproducible_and_complete() {
        let net = random_net(0, 5);
        assert_eq!(baseline_random(&net, 2, 9).unwrap(), baseline_random(&net, 2, 9).unwrap());
        let all = baseline_random(&net, 5, 1).unwrap();
        assert_eq!(all.pruned, (1..=5).collect());
        assert!(baseline_random(&net, 6, 1).is_err());
    }

    #[test]
    fn l2_ratio_zero_branch_and_scaling() {
        let mut net = random_net(5, 3);
        zero_branch(&mut net, 2);
        let d = baseline_l2_ratio(&net, &batch(2, 4), 1).unwrap();
        assert_eq!(d.pruned, SkipSet::single(2));
        assert_eq!(d.ranked[0].importance, 0.0);

        // bias-free network is positively homogeneous, so the ratio is scale-free
        let mut net = random_net(6, 3);
        net.stem.bias.data_mut().fill(0.0);
        for b in &mut net.blocks {
            b.bias1.data_mut().fill(0.0);
            b.bias2.data_mut().fill(0.0);
        }
        let x = batch(3, 4);
        let mut scaled = x.clone();
        scaled.scale(3.5);
        let a = l2_ratios(&net, &x).unwrap();
        let b = l2_ratios(&net, &scaled).unwrap();
        for ((_, ra), (_, rb)) in a.iter().zip(&b) {
            assert!((ra - rb).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_ratio_by_hand() {
        // block input [2, 1], output [6.5, 6]: sqrt(4.5² + 5²) / sqrt(5)
        let mut net = ResidualNetwork::zeros(&Architecture::uniform(2, 2, 1, 2)).unwrap();
        net.stem.weight = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = &mut net.blocks[0];
        b.weight1 = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        b.bias1 = Tensor::vector(vec![0.0, -1.0]).unwrap();
        b.weight2 = Tensor::matrix(2, 2, vec![2.0, 1.0, -1.0, 3.0]).unwrap();
        b.bias2 = Tensor::vector(vec![0.5, 0.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap();
        let r = l2_ratios(&net, &x).unwrap();
        assert!((r[0].1 - (45.25f64).sqrt() / 5f64.sqrt()).abs() < 1e-14);

        let zero_in = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        net.stem.bias.data_mut().fill(0.0);
        assert!(matches!(l2_ratios(&net, &zero_in), Err(Error::Numeric(_))));
    }

    #[test]
    fn kl_by_hand() {
        // p = softmax([0, 0]) = [1/2, 1/2]; q = softmax([ln 3, 0]) = [3/4, 1/4]
        // KL = 1/2 ln(2/3) + 1/2 ln(2)
        let p = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        let q = Tensor::matrix(1, 2, vec![3f64.ln(), 0.0]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert!((mean_kl(&p, &q).unwrap() - expected).abs() < 1e-15);
        assert_eq!(mean_kl(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn curl_zero_branch_and_nonnegative() {
        let mut net = random_net(8, 4);
        zero_branch(&mut net, 4);
        let scores = curl_scores(&net, &batch(5, 6)).unwrap();
        assert!(scores.iter().all(|(_, s)| *s >= 0.0));
        assert_eq!(scores[3].1, 0.0);
        let d = baseline_curl(&net, &batch(5, 6), 1).unwrap();
        assert_eq!(d.pruned, SkipSet::single(4));
    }

    #[test]
    fn decision_json_schema() {
        let net = random_net(2, 3);
        let lat = profile(&net, &ProfileConfig::modeled(8)).unwrap();
        let d = rank_and_prune(&net, &batch(1, 8), &lat, 2).unwrap();
        let v: serde_json::Value = serde_json::from_str(&d.to_json().unwrap()).unwrap();
        assert_eq!(v["method"], "proposed");
        assert_eq!(v["n_p"], 2);
        for key in ["block_id", "epsilon", "G", "delta_t", "importance"] {
            assert!(!v["ranked"][0][key].is_null(), "{key}");
        }
        assert_eq!(v["pruned"].as_array().unwrap().len(), 2);
        assert_eq!(PruneDecision::from_json(&d.to_json().unwrap()).unwrap(), d);
    }
}
