mod common;

use latecut::distill::{self, FeatureSource};
use latecut::network::{self, SkipSet};
use latecut::Tensor;

use common::*;

fn naive_cross_entropy(net: &latecut::ResidualNetwork, batch: &Tensor, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for r in 0..batch.rows() {
        let f = naive_features(net, batch.row(r), &SkipSet::empty());
        let w = &net.classifier.weight;
        let logits: Vec<f64> = (0..net.num_classes())
            .map(|c| net.classifier.bias.data()[c] + (0..f.len()).map(|i| w.data()[c * f.len() + i] * f[i]).sum::<f64>())
            .collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
        total += lse - logits[labels[r]];
    }
    total / batch.rows() as f64
}

#[test]
fn cross_entropy_gradients_include_classifier() {
    for seed in 0..5 {
        let net = random_net(seed, 3, 5, &[4, 6], 4, &[1.0, 0.7]);
        let batch = gaussian_batch(seed + 10, 6, 3);
        let labels: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 4).collect();
        let (loss, grads) = network::backward_cross_entropy(&net, &batch, &labels, &SkipSet::empty()).unwrap();
        assert!((loss - naive_cross_entropy(&net, &batch, &labels)).abs() < 1e-12);
        let g = gradient_check(&net, &grads.tensors(), true, &batch, &SkipSet::empty(), |n| {
            naive_cross_entropy(n, &batch, &labels)
        });
        assert!(g.worst_relative_error < 1e-4, "seed {seed}: {}", g.worst_relative_error);
    }
}

#[test]
fn pooled_distillation_gradients() {
    for seed in 0..5 {
        let net = random_net(seed, 4, 6, &[5, 3, 7], 2, &[1.0, 1.0, 1.0]);
        let batch = gaussian_batch(seed + 20, 7, 4);
        let labels = gaussian_batch(seed + 30, 7, 1);
        let skip = SkipSet::single(2);
        let (_, grads) = distill::distillation_grads(&net, &skip, &batch, &labels, FeatureSource::Pooled, true).unwrap();
        let loss = |n: &latecut::ResidualNetwork| {
            (0..7)
                .map(|r| {
                    let f = naive_features(n, batch.row(r), &skip);
                    let mean = f.iter().sum::<f64>() / f.len() as f64;
                    (mean - labels.row(r)[0]).powi(2)
                })
                .sum::<f64>()
                / 7.0
        };
        let g = gradient_check(&net, &grads.tensors(), false, &batch, &skip, loss);
        assert!(g.worst_relative_error < 1e-4, "seed {seed}: {}", g.worst_relative_error);
        // frozen classifier receives nothing
        let n = grads.tensors().len();
        assert!(grads.tensors()[n - 2..].iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }
}

#[test]
fn skipped_blocks_get_zero_gradient() {
    let net = random_net(3, 4, 4, &[4, 4, 4], 2, &[1.0; 3]);
    let batch = gaussian_batch(1, 5, 4);
    let target = gaussian_batch(2, 5, 4);
    let (_, grads) = network::backward_feature_mse(&net, &batch, &target, &SkipSet::single(2), true).unwrap();
    // stem W, b, then 4 tensors per block
    for t in &grads.tensors()[6..10] {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
    assert!(grads.tensors()[2].data().iter().any(|&v| v != 0.0));
}
