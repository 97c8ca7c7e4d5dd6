//! Residual MLP family: an affine stem, removable residual blocks
//! `x + W2·relu(W1·x + b1) + b2`, and an affine classifier head.
//!
//! Blocks are numbered `1..=n` in forward order. A [`SkipSet`] names blocks
//! to bypass; a bypassed block contributes the identity, which is exactly what
//! removing it from the network does.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meter;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out x in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[output, input]),
            bias: Tensor::zeros(&[output]),
        }
    }

    fn random<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        let std = gain / (input as f64).sqrt();
        let mut l = Linear::zeros(input, output);
        for w in l.weight.data_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *w = z * std;
        }
        l
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        tensor::affine(x, &self.weight, &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub block_id: usize,
    /// `[hidden x width]`
    pub weight1: Tensor,
    /// `[hidden]`
    pub bias1: Tensor,
    /// `[width x hidden]`
    pub weight2: Tensor,
    /// `[width]`
    pub bias2: Tensor,
}

impl ResidualBlock {
    pub fn zeros(block_id: usize, width: usize, hidden: usize) -> Self {
        ResidualBlock {
            block_id,
            weight1: Tensor::zeros(&[hidden, width]),
            bias1: Tensor::zeros(&[hidden]),
            weight2: Tensor::zeros(&[width, hidden]),
            bias2: Tensor::zeros(&[width]),
        }
    }

    pub fn width(&self) -> usize {
        self.weight1.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.weight1.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.weight1.len() + self.bias1.len() + self.weight2.len() + self.bias2.len()
    }

    /// True when the residual branch is identically zero, so the block is the identity.
    pub fn is_identity(&self) -> bool {
        self.weight2.data().iter().all(|&v| v == 0.0) && self.bias2.data().iter().all(|&v| v == 0.0)
    }

    /// Applies the block and returns `(pre_activation, activation, output)`.
    fn apply_traced(&self, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let pre = tensor::affine(x, &self.weight1, &self.bias1)?;
        let act = tensor::relu(&pre);
        let mut out = tensor::affine(&act, &self.weight2, &self.bias2)?;
        for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
            *o += v;
        }
        Ok((pre, act, out))
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.apply_traced(x)?.2)
    }
}

/// Shape of a network: `hidden[j]` is the hidden width of block `j + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub width: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    /// Square blocks (`hidden == width`).
    pub fn uniform(input_dim: usize, width: usize, n_blocks: usize, num_classes: usize) -> Self {
        Architecture {
            input_dim,
            width,
            hidden: vec![width; n_blocks],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.width == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "input_dim, width and num_classes must be positive".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("block hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Initialization gains; the residual branch is scaled separately so deep
/// stacks start close to the identity.
#[derive(Debug, Clone, Copy)]
pub struct InitScale {
    pub stem: f64,
    pub residual: f64,
    pub classifier: f64,
}

impl Default for InitScale {
    fn default() -> Self {
        InitScale {
            stem: 1.0,
            residual: 0.5,
            classifier: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkipSet(BTreeSet<usize>);

impl SkipSet {
    pub fn empty() -> Self {
        SkipSet::default()
    }

    pub fn single(block_id: usize) -> Self {
        SkipSet(BTreeSet::from([block_id]))
    }

    pub fn contains(&self, block_id: usize) -> bool {
        self.0.contains(&block_id)
    }

    pub fn insert(&mut self, block_id: usize) -> bool {
        self.0.insert(block_id)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn union(&self, other: &SkipSet) -> SkipSet {
        SkipSet(self.0.union(&other.0).copied().collect())
    }

    pub fn is_disjoint(&self, other: &SkipSet) -> bool {
        self.0.is_disjoint(&other.0)
    }
}

impl FromIterator<usize> for SkipSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        SkipSet(iter.into_iter().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub features: Tensor,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    input: Tensor,
    pre: Tensor,
    act: Tensor,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    input: Tensor,
    blocks: Vec<Option<BlockTrace>>,
    features: Tensor,
}

impl Trace {
    pub fn features(&self) -> &Tensor {
        &self.features
    }

    /// Input and output of block `block_id` (1-based), when it was not skipped.
    pub fn block_io(&self, block_id: usize) -> Option<(&Tensor, Tensor)> {
        let bt = self.blocks.get(block_id.checked_sub(1)?)?.as_ref()?;
        // output is the next block's input, or the final features
        let out = self.blocks[block_id..]
            .iter()
            .flatten()
            .map(|b| b.input.clone())
            .next()
            .unwrap_or_else(|| self.features.clone());
        Some((&bt.input, out))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNetwork {
    pub stem: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub classifier: Linear,
}

impl ResidualNetwork {
    pub fn zeros(arch: &Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(ResidualNetwork {
            stem: Linear::zeros(arch.input_dim, arch.width),
            blocks: arch
                .hidden
                .iter()
                .enumerate()
                .map(|(i, &h)| ResidualBlock::zeros(i + 1, arch.width, h))
                .collect(),
            classifier: Linear::zeros(arch.width, arch.num_classes),
        })
    }

    pub fn random<R: Rng + ?Sized>(arch: &Architecture, scale: InitScale, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let stem = Linear::random(arch.input_dim, arch.width, scale.stem, rng);
        let blocks = arch
            .hidden
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let l1 = Linear::random(arch.width, h, std::f64::consts::SQRT_2, rng);
                let l2 = Linear::random(h, arch.width, scale.residual, rng);
                ResidualBlock {
                    block_id: i + 1,
                    weight1: l1.weight,
                    bias1: l1.bias,
                    weight2: l2.weight,
                    bias2: l2.bias,
                }
            })
            .collect();
        let classifier = Linear::random(arch.width, arch.num_classes, scale.classifier, rng);
        Ok(ResidualNetwork {
            stem,
            blocks,
            classifier,
        })
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim(),
            width: self.width(),
            hidden: self.blocks.iter().map(|b| b.hidden()).collect(),
            num_classes: self.num_classes(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.stem.input_dim()
    }

    pub fn width(&self) -> usize {
        self.stem.output_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.blocks.iter().map(|b| b.block_id)
    }

    pub fn block(&self, block_id: usize) -> Result<&ResidualBlock> {
        self.check_block(block_id)?;
        Ok(&self.blocks[block_id - 1])
    }

    pub fn block_mut(&mut self, block_id: usize) -> Result<&mut ResidualBlock> {
        self.check_block(block_id)?;
        Ok(&mut self.blocks[block_id - 1])
    }

    pub fn check_block(&self, block_id: usize) -> Result<()> {
        if block_id == 0 || block_id > self.blocks.len() {
            return Err(Error::InvalidBlock {
                block_id,
                n_blocks: self.blocks.len(),
            });
        }
        Ok(())
    }

    pub fn check_skip(&self, skip: &SkipSet) -> Result<()> {
        skip.iter().try_for_each(|id| self.check_block(id))
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "batch shape {:?} does not match input_dim {}",
                batch.shape(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Total parameter elements, excluding skipped blocks.
    pub fn parameter_count(&self, skip: &SkipSet) -> usize {
        self.stem.param_count()
            + self
                .blocks
                .iter()
                .filter(|b| !skip.contains(b.block_id))
                .map(|b| b.param_count())
                .sum::<usize>()
            + self.classifier.param_count()
    }

    /// Final (pre-classifier) features with skipped blocks replaced by the identity.
    pub fn features(&self, batch: &Tensor, skip: &SkipSet) -> Result<Tensor> {
        self.check_batch(batch)?;
        self.check_skip(skip)?;
        meter::record_forward(batch.rows());
        let mut h = self.stem.apply(batch)?;
        for block in &self.blocks {
            if !skip.contains(block.block_id) {
                h = block.apply(&h)?;
            }
        }
        Ok(h)
    }

    pub fn forward(&self, batch: &Tensor, skip: &SkipSet) -> Result<ForwardOutput> {
        let features = self.features(batch, skip)?;
        let logits = self.classifier.apply(&features)?;
        Ok(ForwardOutput { logits, features })
    }

    pub fn predict(&self, batch: &Tensor, skip: &SkipSet) -> Result<Vec<usize>> {
        Ok(tensor::argmax_rows(&self.forward(batch, skip)?.logits))
    }

    /// Forward pass that keeps the activations needed by [`Self::backward`].
    pub fn trace(&self, batch: &Tensor, skip: &SkipSet) -> Result<Trace> {
        self.check_batch(batch)?;
        self.check_skip(skip)?;
        meter::record_forward(batch.rows());
        let mut h = self.stem.apply(batch)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            if skip.contains(block.block_id) {
                blocks.push(None);
                continue;
            }
            let (pre, act, out) = block.apply_traced(&h)?;
            blocks.push(Some(BlockTrace { input: h, pre, act }));
            h = out;
        }
        Ok(Trace {
            input: batch.clone(),
            blocks,
            features: h,
        })
    }

    /// Backpropagates `grad_features` (dL/d final features) and, optionally,
    /// `grad_logits` (dL/d logits) through the network.
    pub fn backward(
        &self,
        trace: &Trace,
        grad_features: &Tensor,
        grad_logits: Option<&Tensor>,
        freeze_classifier: bool,
    ) -> Result<GradientSet> {
        trace.features.ensure_same_shape(grad_features, "backward feature gradient")?;
        meter::record_backward();
        let mut grads = GradientSet::zeros_like(self);
        grads.classifier_frozen = freeze_classifier;
        let mut g = grad_features.clone();
        if let Some(gl) = grad_logits {
            if !freeze_classifier {
                tensor::accumulate_affine_grads(
                    gl,
                    &trace.features,
                    &mut grads.classifier.weight,
                    &mut grads.classifier.bias,
                );
            }
            let through = tensor::affine_input_grad(gl, &self.classifier.weight);
            for (a, b) in g.data_mut().iter_mut().zip(through.data()) {
                *a += b;
            }
        }
        for (block, (bt, bg)) in self
            .blocks
            .iter()
            .zip(trace.blocks.iter().zip(grads.blocks.iter_mut()))
            .rev()
        {
            let Some(bt) = bt else { continue };
            tensor::accumulate_affine_grads(&g, &bt.act, &mut bg.weight2, &mut bg.bias2);
            let mut g_pre = tensor::affine_input_grad(&g, &block.weight2);
            for (d, &z) in g_pre.data_mut().iter_mut().zip(bt.pre.data()) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
            tensor::accumulate_affine_grads(&g_pre, &bt.input, &mut bg.weight1, &mut bg.bias1);
            let through = tensor::affine_input_grad(&g_pre, &block.weight1);
            for (a, b) in g.data_mut().iter_mut().zip(through.data()) {
                *a += b;
            }
        }
        tensor::accumulate_affine_grads(&g, &trace.input, &mut grads.stem.weight, &mut grads.stem.bias);
        Ok(grads)
    }

    /// Parameter tensors in declaration order: stem, blocks (`W1 b1 W2 b2`), classifier.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.stem.weight, &self.stem.bias];
        for b in &self.blocks {
            v.extend([&b.weight1, &b.bias1, &b.weight2, &b.bias2]);
        }
        v.extend([&self.classifier.weight, &self.classifier.bias]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.stem.weight, &mut self.stem.bias];
        for b in &mut self.blocks {
            v.extend([&mut b.weight1, &mut b.bias1, &mut b.weight2, &mut b.bias2]);
        }
        v.extend([&mut self.classifier.weight, &mut self.classifier.bias]);
        v
    }

    /// Plain SGD: `p <- p - lr * grad(p)` for every parameter not frozen.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<()> {
        if grads.architecture() != self.architecture() {
            return Err(Error::Dimension(
                "gradient set is not congruent with the network".into(),
            ));
        }
        if let Some(bad) = grads.tensors().iter().position(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in parameter tensor {bad}"
            )));
        }
        let frozen = grads.classifier_frozen;
        let n = self.tensors().len();
        for (i, (p, g)) in self.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
            if frozen && i >= n - 2 {
                continue;
            }
            for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                *pv -= lr * gv;
            }
        }
        Ok(())
    }
}

/// Gradients shaped exactly like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub stem: Linear,
    pub blocks: Vec<ResidualBlock>,
    pub classifier: Linear,
    pub classifier_frozen: bool,
}

impl GradientSet {
    pub fn zeros_like(net: &ResidualNetwork) -> Self {
        let z = ResidualNetwork::zeros(&net.architecture()).expect("valid architecture");
        GradientSet {
            stem: z.stem,
            blocks: z.blocks,
            classifier: z.classifier,
            classifier_frozen: false,
        }
    }

    fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.stem.input_dim(),
            width: self.stem.output_dim(),
            hidden: self.blocks.iter().map(|b| b.hidden()).collect(),
            num_classes: self.classifier.output_dim(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.stem.weight, &self.stem.bias];
        for b in &self.blocks {
            v.extend([&b.weight1, &b.bias1, &b.weight2, &b.bias2]);
        }
        v.extend([&self.classifier.weight, &self.classifier.bias]);
        v
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Gradient of [`tensor::feature_mse`] w.r.t. its first argument.
pub(crate) fn feature_mse_grad(features: &Tensor, target: &Tensor) -> Tensor {
    let scale = 2.0 / (features.rows() as f64 * features.cols() as f64);
    let data = features
        .data()
        .iter()
        .zip(target.data())
        .map(|(f, t)| scale * (f - t))
        .collect();
    Tensor::new(features.shape().to_vec(), data).expect("same shape as features")
}

/// Feature-MSE distillation loss of `student` against `target_features` and
/// its exact gradients.
pub fn backward_feature_mse(
    student: &ResidualNetwork,
    batch: &Tensor,
    target_features: &Tensor,
    skip: &SkipSet,
    freeze_classifier: bool,
) -> Result<(f64, GradientSet)> {
    let trace = student.trace(batch, skip)?;
    let loss = tensor::feature_mse(trace.features(), target_features)?;
    let g = feature_mse_grad(trace.features(), target_features);
    let grads = student.backward(&trace, &g, None, freeze_classifier)?;
    Ok((loss, grads))
}

/// Mean softmax cross-entropy against integer labels, with gradients for
/// every parameter (classifier included).
pub fn backward_cross_entropy(
    net: &ResidualNetwork,
    batch: &Tensor,
    labels: &[usize],
    skip: &SkipSet,
) -> Result<(f64, GradientSet)> {
    if labels.len() != batch.rows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} samples",
            labels.len(),
            batch.rows()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= net.num_classes()) {
        return Err(Error::Dimension(format!(
            "label {bad} out of range for {} classes",
            net.num_classes()
        )));
    }
    let trace = net.trace(batch, skip)?;
    let logits = net.classifier.apply(trace.features())?;
    let log_p = tensor::log_softmax_rows(&logits);
    let n = labels.len() as f64;
    let loss = -labels
        .iter()
        .enumerate()
        .map(|(r, &l)| log_p.row(r)[l])
        .sum::<f64>()
        / n;
    let mut grad_logits = tensor::softmax_rows(&logits);
    for (r, &l) in labels.iter().enumerate() {
        grad_logits.row_mut(r)[l] -= 1.0;
    }
    grad_logits.scale(1.0 / n);
    let zero = Tensor::zeros(trace.features().shape());
    let grads = net.backward(&trace, &zero, Some(&grad_logits), false)?;
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Width-2, one block, input_dim 2, 2 classes with hand-picked weights.
    pub(crate) fn hand_net() -> ResidualNetwork {
        let mut net = ResidualNetwork::zeros(&Architecture::uniform(2, 2, 1, 2)).unwrap();
        // identity stem
        net.stem.weight = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = &mut net.blocks[0];
        b.weight1 = Tensor::matrix(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
        b.bias1 = Tensor::vector(vec![0.0, -1.0]).unwrap();
        b.weight2 = Tensor::matrix(2, 2, vec![2.0, 1.0, -1.0, 3.0]).unwrap();
        b.bias2 = Tensor::vector(vec![0.5, 0.0]).unwrap();
        net.classifier.weight = Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        net.classifier.bias = Tensor::vector(vec![0.0, 0.25]).unwrap();
        net
    }

    #[test]
    fn hand_evaluated_forward() {
        // x = [2, 1]
        // W1 x + b1 = [2 - 1, 1 + 2 - 1] = [1, 2] -> relu [1, 2]
        // W2 a + b2 = [2 + 2 + 0.5, -1 + 6] = [4.5, 5]
        // h = x + branch = [6.5, 6]
        // logits = [12.5, 0.5 + 0.25]
        let net = hand_net();
        let x = Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap();
        let out = net.forward(&x, &SkipSet::empty()).unwrap();
        assert_eq!(out.features.data(), &[6.5, 6.0]);
        assert_eq!(out.logits.data(), &[12.5, 0.75]);

        let skipped = net.forward(&x, &SkipSet::single(1)).unwrap();
        assert_eq!(skipped.features.data(), &[2.0, 1.0]);
    }

    #[test]
    fn zero_branch_block_skip_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = ResidualNetwork::random(&Architecture::uniform(3, 4, 3, 2), InitScale::default(), &mut rng).unwrap();
        let b = net.block_mut(2).unwrap();
        b.weight2 = Tensor::zeros(&[4, 4]);
        b.bias2 = Tensor::zeros(&[4]);
        let x = Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 1.0, 0.0, -0.5]).unwrap();
        let a = net.features(&x, &SkipSet::empty()).unwrap();
        let b = net.features(&x, &SkipSet::single(2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_skip_and_shape() {
        let net = hand_net();
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(matches!(
            net.forward(&x, &SkipSet::single(2)),
            Err(Error::InvalidBlock { block_id: 2, .. })
        ));
        assert!(matches!(
            net.forward(&x, &SkipSet::single(0)),
            Err(Error::InvalidBlock { .. })
        ));
        let bad = Tensor::matrix(1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(net.forward(&bad, &SkipSet::empty()), Err(Error::Dimension(_))));
    }

    #[test]
    fn parameter_counts() {
        let net = ResidualNetwork::zeros(&Architecture::uniform(3, 4, 3, 5)).unwrap();
        assert_eq!(net.blocks[0].param_count(), 2 * 4 * 4 + 2 * 4);
        let stem = 3 * 4 + 4;
        let head = 4 * 5 + 5;
        assert_eq!(net.parameter_count(&SkipSet::empty()), stem + 3 * 40 + head);
        assert_eq!(
            net.parameter_count(&SkipSet::empty()) - net.parameter_count(&SkipSet::single(2)),
            40
        );
        let total: usize = net.tensors().iter().map(|t| t.len()).sum();
        assert_eq!(total, net.parameter_count(&SkipSet::empty()));
    }

    #[test]
    fn self_target_gives_zero_loss_and_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = ResidualNetwork::random(&Architecture::uniform(3, 4, 2, 3), InitScale::default(), &mut rng).unwrap();
        let x = Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap();
        let target = net.features(&x, &SkipSet::empty()).unwrap();
        let (loss, grads) = backward_feature_mse(&net, &x, &target, &SkipSet::empty(), true).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn frozen_classifier_grads_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = ResidualNetwork::random(&Architecture::uniform(2, 3, 2, 2), InitScale::default(), &mut rng).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.7, -0.2]).unwrap();
        let target = Tensor::matrix(1, 3, vec![1.0, 0.0, -1.0]).unwrap();
        let (_, g) = backward_feature_mse(&net, &x, &target, &SkipSet::empty(), true).unwrap();
        assert!(g.classifier.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.classifier.bias.data().iter().all(|&v| v == 0.0));
        assert!(g.stem.weight.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn sgd_zero_lr_is_noop_and_definition_holds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = ResidualNetwork::random(&Architecture::uniform(2, 2, 1, 2), InitScale::default(), &mut rng).unwrap();
        let x = Tensor::matrix(1, 2, vec![0.7, -0.2]).unwrap();
        let target = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let (_, g) = backward_feature_mse(&net, &x, &target, &SkipSet::empty(), true).unwrap();
        let mut same = net.clone();
        same.sgd_step(&g, 0.0).unwrap();
        assert_eq!(same, net);

        // single scalar coordinate: p = 1, grad = 2, lr = 0.1 -> 0.8
        let mut one = ResidualNetwork::zeros(&Architecture::uniform(1, 1, 1, 1)).unwrap();
        one.stem.weight.data_mut()[0] = 1.0;
        let mut g = GradientSet::zeros_like(&one);
        g.stem.weight.data_mut()[0] = 2.0;
        one.sgd_step(&g, 0.1).unwrap();
        assert_eq!(one.stem.weight.data()[0], 0.8);
    }

    #[test]
    fn sgd_rejects_non_finite() {
        let mut net = ResidualNetwork::zeros(&Architecture::uniform(1, 1, 1, 1)).unwrap();
        let mut g = GradientSet::zeros_like(&net);
        g.blocks[0].bias1.data_mut()[0] = f64::NAN;
        assert!(matches!(net.sgd_step(&g, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn loss_decreases_under_sgd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let arch = Architecture::uniform(3, 4, 2, 2);
        let teacher = ResidualNetwork::random(&arch, InitScale::default(), &mut rng).unwrap();
        let mut student = ResidualNetwork::random(&arch, InitScale::default(), &mut rng).unwrap();
        let x = Tensor::matrix(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let target = teacher.features(&x, &SkipSet::empty()).unwrap();
        let mut losses = Vec::new();
        for _ in 0..10 {
            let (loss, g) = backward_feature_mse(&student, &x, &target, &SkipSet::empty(), true).unwrap();
            losses.push(loss);
            student.sgd_step(&g, 0.01).unwrap();
        }
        assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");
    }

    #[test]
    fn trace_block_io() {
        let net = hand_net();
        let x = Tensor::matrix(1, 2, vec![2.0, 1.0]).unwrap();
        let t = net.trace(&x, &SkipSet::empty()).unwrap();
        let (input, output) = t.block_io(1).unwrap();
        assert_eq!(input.data(), &[2.0, 1.0]);
        assert_eq!(output.data(), &[6.5, 6.0]);
    }
}
