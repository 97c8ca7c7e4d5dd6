//! Cross-entropy pretraining of the source model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::distill::EpochSampler;
use crate::error::{Error, Result};
use crate::network::{self, Architecture, InitScale, ResidualNetwork, SkipSet};

/// Minimum train accuracy a run with `epochs > 0` must reach.
pub const MIN_TRAIN_ACCURACY: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub width: usize,
    pub n_blocks: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Initial gain of the residual branches relative to the stem.
    pub residual_scale: f64,
    /// L2 penalty, applied as `w ← (1 − lr·λ)·w` before every step.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            width: 16,
            n_blocks: 3,
            epochs: 20,
            lr: 0.05,
            batch_size: 32,
            residual_scale: 1.0,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

pub fn accuracy(net: &ResidualNetwork, split: &Split, skip: &SkipSet) -> Result<f64> {
    let pred = net.predict(&split.inputs, skip)?;
    let hits = pred.iter().zip(&split.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / split.len() as f64)
}

/// Trains a fresh network on `train` with plain mini-batch SGD.
///
/// The classifier starts at zero, so an untrained model predicts class 0 for
/// every input.
pub fn pretrain_source(train: &Split, config: &PretrainConfig) -> Result<ResidualNetwork> {
    if train.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("pretraining needs samples and a positive batch size".into()));
    }
    let num_classes = train.labels.iter().max().map(|m| m + 1).unwrap_or(0).max(2);
    let arch = Architecture::uniform(train.inputs.cols(), config.width, config.n_blocks, num_classes);
    let scale = InitScale {
        stem: 1.0,
        residual: config.residual_scale,
        classifier: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = ResidualNetwork::random(&arch, scale, &mut rng)?;
    if config.epochs == 0 {
        return Ok(net);
    }

    let skip = SkipSet::empty();
    let batch = config.batch_size.min(train.len());
    let steps_per_epoch = train.len().div_ceil(batch);
    let mut sampler = EpochSampler::new(train.len(), config.seed);
    for _ in 0..config.epochs * steps_per_epoch {
        let idx = sampler.next_batch(batch);
        let x = train.inputs.select_rows(&idx)?;
        let y: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let (loss, grads) = network::backward_cross_entropy(&net, &x, &y, &skip)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("pretraining loss became {loss}")));
        }
        if config.weight_decay > 0.0 {
            let keep = 1.0 - config.lr * config.weight_decay;
            net.tensors_mut().into_iter().for_each(|t| t.scale(keep));
        }
        net.sgd_step(&grads, config.lr)?;
    }

    let acc = accuracy(&net, train, &skip)?;
    if acc < MIN_TRAIN_ACCURACY {
        return Err(Error::TrainingDiverged {
            accuracy: acc,
            threshold: MIN_TRAIN_ACCURACY,
        });
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint;
    use crate::data::{make_dataset, DatasetSpec};

    fn small() -> PretrainConfig {
        PretrainConfig {
            width: 8,
            n_blocks: 2,
            epochs: 10,
            ..Default::default()
        }
    }

    #[test]
    fn separable_two_class() {
        let spec = DatasetSpec {
            class_means: vec![vec![3.0, 0.0, 0.0, 0.0], vec![-3.0, 0.0, 0.0, 0.0]],
            ..DatasetSpec::gaussian_mixture(2, 4, 400, 1.0, 0.5, 1)
        };
        let (train, _) = make_dataset(&spec).unwrap();
        let net = pretrain_source(&train, &small()).unwrap();
        assert!(accuracy(&net, &train, &SkipSet::empty()).unwrap() >= 0.99);
    }

    #[test]
    fn zero_epochs_is_chance() {
        let spec = DatasetSpec::gaussian_mixture(4, 8, 800, 2.0, 1.0, 3);
        let (train, _) = make_dataset(&spec).unwrap();
        let net = pretrain_source(&train, &PretrainConfig { epochs: 0, ..small() }).unwrap();
        let acc = accuracy(&net, &train, &SkipSet::empty()).unwrap();
        assert!((acc - 0.25).abs() <= 0.05, "{acc}");
    }

    #[test]
    fn same_seed_same_checkpoint() {
        let spec = DatasetSpec::gaussian_mixture(3, 6, 300, 2.0, 1.0, 5);
        let (train, _) = make_dataset(&spec).unwrap();
        let a = pretrain_source(&train, &small()).unwrap();
        let b = pretrain_source(&train, &small()).unwrap();
        assert_eq!(checkpoint::encode(&a), checkpoint::encode(&b));
    }

    #[test]
    fn unlearnable_labels_diverge() {
        // identical inputs with alternating labels cannot exceed 50%
        let spec = DatasetSpec {
            class_means: vec![vec![0.0; 4], vec![1e-9, 0.0, 0.0, 0.0]],
            noise_sigma: 0.0,
            ..DatasetSpec::gaussian_mixture(2, 4, 200, 1.0, 0.0, 2)
        };
        let (mut train, _) = make_dataset(&spec).unwrap();
        train.inputs.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let err = pretrain_source(&train, &small()).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { .. }), "{err}");
    }
}
