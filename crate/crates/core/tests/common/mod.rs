//! Helpers shared by the integration and acceptance tests. The naive routines
//! here deliberately avoid the library's tensor kernels so they can serve as
//! independent references.

#![allow(dead_code)]

use latecut::network::{Architecture, InitScale, ResidualNetwork, SkipSet};
use latecut::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_batch(seed: u64, rows: usize, cols: usize) -> Tensor {
    let mut r = rng(seed);
    let data = (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Random network whose blocks have the given hidden widths; each residual
/// branch output is multiplied by the matching gain.
pub fn random_net(
    seed: u64,
    input_dim: usize,
    width: usize,
    hidden: &[usize],
    num_classes: usize,
    gains: &[f64],
) -> ResidualNetwork {
    let arch = Architecture {
        input_dim,
        width,
        hidden: hidden.to_vec(),
        num_classes,
    };
    let mut r = rng(seed);
    let mut net = ResidualNetwork::random(&arch, InitScale::default(), &mut r).unwrap();
    for (block, &g) in net.blocks.iter_mut().zip(gains) {
        block.weight2.scale(g);
        block.bias2.scale(g);
    }
    // nonzero biases so the reference paths exercise them
    for t in net.tensors_mut() {
        if t.shape().len() == 1 {
            for v in t.data_mut() {
                *v = 0.1 * r.random_range(-1.0..1.0);
            }
        }
    }
    net
}

/// 4-block toy with random hidden widths and random branch gains.
pub fn toy_network(seed: u64) -> ResidualNetwork {
    let mut r = rng(seed ^ 0xA11CE);
    let hidden: Vec<usize> = (0..4).map(|_| [4, 8, 16][r.random_range(0..3)]).collect();
    let gains: Vec<f64> = (0..4).map(|_| r.random_range(0.2..1.5)).collect();
    random_net(seed, 8, 8, &hidden, 4, &gains)
}

fn naive_affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), inp);
    (0..out)
        .map(|o| {
            let mut s = b.data()[o];
            for i in 0..inp {
                s += w.data()[o * inp + i] * x[i];
            }
            s
        })
        .collect()
}

/// Final features of one input, skipping the blocks in `skip`.
pub fn naive_features(net: &ResidualNetwork, x: &[f64], skip: &SkipSet) -> Vec<f64> {
    let mut h = naive_affine(x, &net.stem.weight, &net.stem.bias);
    for block in &net.blocks {
        if skip.contains(block.block_id) {
            continue;
        }
        let a: Vec<f64> = naive_affine(&h, &block.weight1, &block.bias1)
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        let r = naive_affine(&a, &block.weight2, &block.bias2);
        for (hv, rv) in h.iter_mut().zip(r) {
            *hv += rv;
        }
    }
    h
}

/// Mean over the batch of the per-sample mean squared feature difference.
pub fn naive_noise(net: &ResidualNetwork, batch: &Tensor, block_id: usize) -> f64 {
    let skip = SkipSet::single(block_id);
    let mut total = 0.0;
    for r in 0..batch.rows() {
        let full = naive_features(net, batch.row(r), &SkipSet::empty());
        let cut = naive_features(net, batch.row(r), &skip);
        let per_sample: f64 = full.iter().zip(&cut).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / full.len() as f64;
        total += per_sample;
    }
    total / batch.rows() as f64
}

/// MAC count of one batch through the network with `skip` removed.
pub fn naive_macs(net: &ResidualNetwork, batch: usize, skip: &SkipSet) -> f64 {
    let w = net.width();
    let mut macs = net.input_dim() * w + w * net.num_classes();
    for b in &net.blocks {
        if !skip.contains(b.block_id) {
            macs += 2 * w * b.hidden();
        }
    }
    (macs * batch) as f64
}

pub fn naive_params(net: &ResidualNetwork) -> usize {
    let w = net.width();
    let mut p = net.input_dim() * w + w + w * net.num_classes() + net.num_classes();
    for b in &net.blocks {
        p += 2 * w * b.hidden() + b.hidden() + w;
    }
    p
}

/// `(block_id, importance)` from first principles, sorted ascending with
/// ties to the lower id.
pub fn naive_ranking(net: &ResidualNetwork, batch: &Tensor) -> Vec<(usize, f64)> {
    let total_params = naive_params(net) as f64;
    let t_full = naive_macs(net, batch.rows(), &SkipSet::empty());
    let mut rows: Vec<(usize, f64)> = net
        .blocks
        .iter()
        .map(|b| {
            let id = b.block_id;
            let eps = naive_noise(net, batch, id);
            let g = (2 * net.width() * b.hidden() + b.hidden() + net.width()) as f64 / total_params;
            let t_cut = naive_macs(net, batch.rows(), &SkipSet::single(id));
            let dt = (t_full - t_cut) / t_full;
            (id, eps * g / dt)
        })
        .collect();
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    rows
}

/// Distillation loss from first principles: mean over samples of the mean
/// squared difference to `target`.
pub fn naive_distill_loss(net: &ResidualNetwork, batch: &Tensor, target: &Tensor, skip: &SkipSet) -> f64 {
    let mut total = 0.0;
    for r in 0..batch.rows() {
        let f = naive_features(net, batch.row(r), skip);
        total += f
            .iter()
            .zip(target.row(r))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / f.len() as f64;
    }
    total / batch.rows() as f64
}

/// Signs of every ReLU pre-activation over the batch.
pub fn relu_pattern(net: &ResidualNetwork, batch: &Tensor, skip: &SkipSet) -> Vec<bool> {
    let mut out = Vec::new();
    for r in 0..batch.rows() {
        let mut h = naive_affine(batch.row(r), &net.stem.weight, &net.stem.bias);
        for block in &net.blocks {
            if skip.contains(block.block_id) {
                continue;
            }
            let pre = naive_affine(&h, &block.weight1, &block.bias1);
            out.extend(pre.iter().map(|&v| v > 0.0));
            let a: Vec<f64> = pre.into_iter().map(|v| v.max(0.0)).collect();
            for (hv, rv) in h.iter_mut().zip(naive_affine(&a, &block.weight2, &block.bias2)) {
                *hv += rv;
            }
        }
    }
    out
}

pub struct GradCheck {
    pub worst_relative_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a ReLU kink, where central
    /// differences do not estimate the derivative.
    pub skipped_at_kinks: usize,
}

/// Per-coordinate relative error `|a - n| / max(|a|, |n|, floor)` between
/// analytic gradients and central differences of `loss`.
pub fn gradient_check(
    net: &ResidualNetwork,
    analytic: &[&Tensor],
    include_classifier: bool,
    batch: &Tensor,
    skip: &SkipSet,
    loss: impl Fn(&ResidualNetwork) -> f64,
) -> GradCheck {
    let h = 1e-5;
    let floor = 1e-4;
    let n_tensors = net.tensors().len() - if include_classifier { 0 } else { 2 };
    let mut out = GradCheck {
        worst_relative_error: 0.0,
        checked: 0,
        skipped_at_kinks: 0,
    };
    for t in 0..n_tensors {
        for i in 0..net.tensors()[t].len() {
            let mut plus = net.clone();
            plus.tensors_mut()[t].data_mut()[i] += h;
            let mut minus = net.clone();
            minus.tensors_mut()[t].data_mut()[i] -= h;
            if relu_pattern(&plus, batch, skip) != relu_pattern(&minus, batch, skip) {
                out.skipped_at_kinks += 1;
                continue;
            }
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let a = analytic[t].data()[i];
            let denom = a.abs().max(numeric.abs()).max(floor);
            out.worst_relative_error = out.worst_relative_error.max((a - numeric).abs() / denom);
            out.checked += 1;
        }
    }
    out
}
