//! Convolution, batch normalization, classifier and block building units.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::Window;
use crate::tensor::{Graph, Param, Scalar, Tensor, Var};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How a forward pass treats stateful layers: the mode, and which set of
/// BN running statistics to read and update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pass {
    pub mode: Mode,
    pub stats_slot: usize,
}

impl Pass {
    pub fn train() -> Self {
        Pass {
            mode: Mode::Train,
            stats_slot: 0,
        }
    }

    pub fn eval() -> Self {
        Pass {
            mode: Mode::Eval,
            stats_slot: 0,
        }
    }

    pub fn new(mode: Mode) -> Self {
        Pass { mode, stats_slot: 0 }
    }

    pub fn with_slot(self, stats_slot: usize) -> Self {
        Pass { stats_slot, ..self }
    }
}

/// Visitor over named parameters and buffers.
pub type ParamVisitor<'a, T> = dyn FnMut(String, &Param<T>) + 'a;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub struct Conv2d<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// Kaiming-normal (fan-out) initialised convolution without bias.
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, rng: &mut impl Rng) -> Self {
        let fan_out = (out_ch * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("valid std");
        let data = (0..out_ch * in_ch * kernel * kernel)
            .map(|_| T::from_f64(normal.sample(rng)))
            .collect();
        let weight = Tensor::new(vec![out_ch, in_ch, kernel, kernel], data).expect("sized buffer");
        Self::from_weight(weight, None, stride, padding)
    }

    pub fn from_weight(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Self {
        Conv2d {
            weight: Param::new(weight),
            bias: bias.map(Param::new),
            stride,
            padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.shape();
        (s[2], s[3])
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        Window {
            kh,
            kw,
            stride: self.stride,
            pad: self.padding,
        }
        .output_hw(h, w)
    }

    /// Multiply-accumulates for one image of spatial size `h×w`.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.output_hw(h, w).unwrap_or((0, 0));
        let (kh, kw) = self.kernel();
        (self.out_channels() * oh * ow * self.in_channels() * kh * kw) as u64
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight)?;
        let y = g.conv2d(x, w, self.stride, self.padding)?;
        match &self.bias {
            None => Ok(y),
            Some(b) => {
                let o = self.out_channels();
                let bv = g.param(b)?;
                let bv = g.reshape(bv, &[1, o, 1, 1])?;
                let shape = g.shape(y).to_vec();
                let bb = g.broadcast(bv, &shape)?;
                g.add(y, bb)
            }
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    pub fn deep_clone(&self) -> Self {
        Conv2d {
            weight: self.weight.deep_clone(),
            bias: self.bias.as_ref().map(Param::deep_clone),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// Running statistics of one BN layer for one statistics slot.
pub struct RunningStats<T: Scalar> {
    pub mean: Param<T>,
    pub var: Param<T>,
}

pub struct BatchNorm<T: Scalar> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub stats: Vec<RunningStats<T>>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self::with_slots(channels, 1)
    }

    /// BN with `slots` independent sets of running statistics.
    pub fn with_slots(channels: usize, slots: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::ones(vec![channels])),
            beta: Param::new(Tensor::zeros(vec![channels])),
            stats: (0..slots.max(1))
                .map(|_| RunningStats {
                    mean: Param::buffer(Tensor::zeros(vec![channels])),
                    var: Param::buffer(Tensor::ones(vec![channels])),
                })
                .collect(),
            momentum: BN_MOMENTUM,
            eps: BN_EPSILON,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn slot(&self, pass: Pass) -> &RunningStats<T> {
        &self.stats[pass.stats_slot.min(self.stats.len() - 1)]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, pass: Pass) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.channels() {
            return Err(Error::shape(
                "batch_norm",
                format!("expected N×{}×H×W input, got {shape:?}", self.channels()),
            ));
        }
        let c = shape[1];
        let axes = [0, 2, 3];
        let normed = match pass.mode {
            Mode::Train => {
                if shape[0] < 2 {
                    return Err(Error::Invalid(format!(
                        "batch_norm: train mode needs a batch of at least 2, got {}",
                        shape[0]
                    )));
                }
                let mean = g.mean_axes(x, &axes, true)?;
                let mb = g.broadcast(mean, &shape)?;
                let xc = g.sub(x, mb)?;
                let sq = g.mul(xc, xc)?;
                let var = g.mean_axes(sq, &axes, true)?;
                let ve = g.add_scalar(var, self.eps)?;
                let inv = g.powf(ve, -0.5)?;
                let ib = g.broadcast(inv, &shape)?;
                let normed = g.mul(xc, ib)?;
                self.update_running(g.value(mean), g.value(var), pass);
                normed
            }
            Mode::Eval => {
                let stats = self.slot(pass);
                let rm = stats.mean.value().clone().reshape(vec![1, c, 1, 1])?;
                let eps = T::from_f64(self.eps);
                let inv = stats
                    .var
                    .value()
                    .map(|v| T::one() / (v + eps).sqrt())
                    .reshape(vec![1, c, 1, 1])?;
                let rm = g.constant(rm)?;
                let mb = g.broadcast(rm, &shape)?;
                let xc = g.sub(x, mb)?;
                let inv = g.constant(inv)?;
                let ib = g.broadcast(inv, &shape)?;
                g.mul(xc, ib)?
            }
        };
        let gamma = g.param(&self.gamma)?;
        let gamma = g.reshape(gamma, &[1, c, 1, 1])?;
        let gamma = g.broadcast(gamma, &shape)?;
        let beta = g.param(&self.beta)?;
        let beta = g.reshape(beta, &[1, c, 1, 1])?;
        let beta = g.broadcast(beta, &shape)?;
        let scaled = g.mul(normed, gamma)?;
        g.add(scaled, beta)
    }

    // running ← (1 − momentum)·running + momentum·batch, with the biased
    // batch variance used for normalisation
    fn update_running(&self, mean: &Tensor<T>, var: &Tensor<T>, pass: Pass) {
        let stats = self.slot(pass);
        let m = T::from_f64(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in stats.mean.value_mut().data_mut().iter_mut().zip(mean.data()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in stats.var.value_mut().data_mut().iter_mut().zip(var.data()) {
            *r = keep * *r + m * b;
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
        for (i, s) in self.stats.iter().enumerate() {
            let suffix = if i == 0 { String::new() } else { format!(".{i}") };
            f(join(prefix, &format!("running_mean{suffix}")), &s.mean);
            f(join(prefix, &format!("running_var{suffix}")), &s.var);
        }
    }

    pub fn deep_clone(&self) -> Self {
        BatchNorm {
            gamma: self.gamma.deep_clone(),
            beta: self.beta.deep_clone(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.deep_clone(),
                    var: s.var.deep_clone(),
                })
                .collect(),
            momentum: self.momentum,
            eps: self.eps,
        }
    }

    /// Copy holding only the statistics of `slot`.
    pub fn project_slot(&self, slot: usize) -> Self {
        let s = &self.stats[slot.min(self.stats.len() - 1)];
        BatchNorm {
            gamma: self.gamma.deep_clone(),
            beta: self.beta.deep_clone(),
            stats: vec![RunningStats {
                mean: s.mean.deep_clone(),
                var: s.var.deep_clone(),
            }],
            momentum: self.momentum,
            eps: self.eps,
        }
    }
}

/// Fully connected classifier producing logits.
pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    /// Uniform(±1/√fan_in) initialisation.
    pub fn new(features: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (features as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let w = (0..classes * features).map(|_| T::from_f64(dist.sample(rng))).collect();
        let b = (0..classes).map(|_| T::from_f64(dist.sample(rng))).collect();
        Linear {
            weight: Param::new(Tensor::new(vec![classes, features], w).expect("sized buffer")),
            bias: Param::new(Tensor::new(vec![classes], b).expect("sized buffer")),
        }
    }

    pub fn features(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.features() {
            return Err(Error::shape(
                "linear",
                format!("expected N×{} input, got {shape:?}", self.features()),
            ));
        }
        let w = g.param(&self.weight)?;
        let wt = g.permute(w, &[1, 0])?;
        let y = g.matmul(x, wt)?;
        let b = g.param(&self.bias)?;
        let bb = g.broadcast(b, &[shape[0], self.classes()])?;
        g.add(y, bb)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    pub fn deep_clone(&self) -> Self {
        Linear {
            weight: self.weight.deep_clone(),
            bias: self.bias.deep_clone(),
        }
    }
}

/// Spatial mean: N×C×H×W → N×C.
pub fn global_avg_pool<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    let shape = g.shape(x);
    if shape.len() != 4 || shape[2] == 0 || shape[3] == 0 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("expected non-empty N×C×H×W, got {shape:?}"),
        ));
    }
    g.mean_axes(x, &[2, 3], false)
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

/// Where BN and ReLU sit relative to the convolutions of a residual block.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockOrder {
    /// conv → BN → ReLU, with ReLU after the residual sum.
    PostActivation,
    /// BN → ReLU → conv; the residual sum is left unactivated.
    PreActivation,
}

pub const BOTTLENECK_EXPANSION: usize = 4;

/// Which bottleneck convolution carries the stride of a downsampling block.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StrideAt {
    /// The first 1×1 convolution (original ResNet).
    Conv1x1,
    /// The 3×3 convolution (torchvision ResNet).
    Conv3x3,
}

/// Residual unit `relu(F(x) + shortcut(x))` (post-activation), where the
/// shortcut is the identity or a strided 1×1 projection.
pub struct ResidualBlock<T: Scalar> {
    pub kind: BlockKind,
    pub order: BlockOrder,
    pub convs: Vec<Conv2d<T>>,
    pub bns: Vec<BatchNorm<T>>,
    pub downsample: Option<(Conv2d<T>, Option<BatchNorm<T>>)>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn basic(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        order: BlockOrder,
        slots: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let convs = vec![
            Conv2d::new(in_ch, out_ch, 3, stride, 1, rng),
            Conv2d::new(out_ch, out_ch, 3, 1, 1, rng),
        ];
        let bn_channels = match order {
            BlockOrder::PostActivation => [out_ch, out_ch],
            BlockOrder::PreActivation => [in_ch, out_ch],
        };
        let bns = bn_channels.iter().map(|&c| BatchNorm::with_slots(c, slots)).collect();
        let downsample = Self::projection(in_ch, out_ch, stride, order, slots, rng);
        ResidualBlock {
            kind: BlockKind::Basic,
            order,
            convs,
            bns,
            downsample,
        }
    }

    /// 1×1 → 3×3 → 1×1 bottleneck with `planes` inner channels and
    /// `4·planes` outputs.
    pub fn bottleneck(
        in_ch: usize,
        planes: usize,
        stride: usize,
        stride_at: StrideAt,
        order: BlockOrder,
        slots: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let out_ch = planes * BOTTLENECK_EXPANSION;
        let (s1, s3) = match stride_at {
            StrideAt::Conv1x1 => (stride, 1),
            StrideAt::Conv3x3 => (1, stride),
        };
        let convs = vec![
            Conv2d::new(in_ch, planes, 1, s1, 0, rng),
            Conv2d::new(planes, planes, 3, s3, 1, rng),
            Conv2d::new(planes, out_ch, 1, 1, 0, rng),
        ];
        let bn_channels = match order {
            BlockOrder::PostActivation => [planes, planes, out_ch],
            BlockOrder::PreActivation => [in_ch, planes, planes],
        };
        let bns = bn_channels.iter().map(|&c| BatchNorm::with_slots(c, slots)).collect();
        let downsample = Self::projection(in_ch, out_ch, stride, order, slots, rng);
        ResidualBlock {
            kind: BlockKind::Bottleneck,
            order,
            convs,
            bns,
            downsample,
        }
    }

    fn projection(
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        order: BlockOrder,
        slots: usize,
        rng: &mut impl Rng,
    ) -> Option<(Conv2d<T>, Option<BatchNorm<T>>)> {
        (stride != 1 || in_ch != out_ch).then(|| {
            let bn = match order {
                BlockOrder::PostActivation => Some(BatchNorm::with_slots(out_ch, slots)),
                BlockOrder::PreActivation => None,
            };
            (Conv2d::new(in_ch, out_ch, 1, stride, 0, rng), bn)
        })
    }

    pub fn in_channels(&self) -> usize {
        self.convs[0].in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().unwrap().out_channels()
    }

    pub fn stride(&self) -> usize {
        self.convs.iter().map(|c| c.stride).product()
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, pass: Pass) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels() {
            return Err(Error::shape(
                "residual_block",
                format!("input has {c} channels, block expects {}", self.in_channels()),
            ));
        }
        match self.order {
            BlockOrder::PostActivation => self.forward_post(g, x, pass),
            BlockOrder::PreActivation => self.forward_pre(g, x, pass),
        }
    }

    fn forward_post(&self, g: &mut Graph<T>, x: Var, pass: Pass) -> Result<Var> {
        let last = self.convs.len() - 1;
        let mut h = x;
        for (i, (conv, bn)) in self.convs.iter().zip(&self.bns).enumerate() {
            h = conv.forward(g, h)?;
            h = bn.forward(g, h, pass)?;
            if i < last {
                h = g.relu(h)?;
            }
        }
        let shortcut = match &self.downsample {
            None => x,
            Some((conv, bn)) => {
                let s = conv.forward(g, x)?;
                match bn {
                    Some(bn) => bn.forward(g, s, pass)?,
                    None => s,
                }
            }
        };
        let sum = g.add(h, shortcut)?;
        g.relu(sum)
    }

    fn forward_pre(&self, g: &mut Graph<T>, x: Var, pass: Pass) -> Result<Var> {
        let mut h = x;
        let mut shortcut = x;
        for (i, (conv, bn)) in self.convs.iter().zip(&self.bns).enumerate() {
            h = bn.forward(g, h, pass)?;
            h = g.relu(h)?;
            if i == 0 {
                if let Some((proj, _)) = &self.downsample {
                    shortcut = proj.forward(g, h)?;
                }
            }
            h = conv.forward(g, h)?;
        }
        g.add(h, shortcut)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        for (i, conv) in self.convs.iter().enumerate() {
            conv.visit(&join(prefix, &format!("conv{}", i + 1)), f);
        }
        for (i, bn) in self.bns.iter().enumerate() {
            bn.visit(&join(prefix, &format!("bn{}", i + 1)), f);
        }
        if let Some((conv, bn)) = &self.downsample {
            conv.visit(&join(prefix, "downsample.conv"), f);
            if let Some(bn) = bn {
                bn.visit(&join(prefix, "downsample.bn"), f);
            }
        }
    }

    /// Multiply-accumulates for one input of spatial size `h×w`; returns the
    /// count and the output spatial size.
    pub fn macs(&self, h: usize, w: usize) -> (u64, (usize, usize)) {
        let mut total = 0;
        let (mut ch, mut cw) = (h, w);
        for conv in &self.convs {
            total += conv.macs(ch, cw);
            (ch, cw) = conv.output_hw(ch, cw).unwrap_or((0, 0));
        }
        if let Some((conv, _)) = &self.downsample {
            total += conv.macs(h, w);
        }
        (total, (ch, cw))
    }

    pub fn map_layers(
        &self,
        conv: impl Fn(&Conv2d<T>) -> Conv2d<T>,
        bn: impl Fn(&BatchNorm<T>) -> BatchNorm<T>,
    ) -> Self {
        ResidualBlock {
            kind: self.kind,
            order: self.order,
            convs: self.convs.iter().map(&conv).collect(),
            bns: self.bns.iter().map(&bn).collect(),
            downsample: self.downsample.as_ref().map(|(c, b)| (conv(c), b.as_ref().map(&bn))),
        }
    }
}

/// The VGG unit: conv3×3 → BN → ReLU.
pub struct ConvBnRelu<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(in_ch: usize, out_ch: usize, slots: usize, rng: &mut impl Rng) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(in_ch, out_ch, 3, 1, 1, rng),
            bn: BatchNorm::with_slots(out_ch, slots),
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, x: Var, pass: Pass) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.conv.in_channels() {
            return Err(Error::shape(
                "conv_bn_relu",
                format!("input has {c} channels, unit expects {}", self.conv.in_channels()),
            ));
        }
        let h = self.conv.forward(g, x)?;
        let h = self.bn.forward(g, h, pass)?;
        g.relu(h)
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor<'_, T>) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn zero_convs(block: &ResidualBlock<f64>) {
        for c in &block.convs {
            c.weight.value_mut().fill(0.0);
        }
    }

    #[test]
    fn zeroed_basic_block_is_relu() {
        let block = ResidualBlock::<f64>::basic(2, 2, 1, BlockOrder::PostActivation, 1, &mut rng());
        zero_convs(&block);
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut g = Graph::new();
        let x = g
            .constant(Tensor::new(vec![2, 2, 3, 3], data.clone()).unwrap())
            .unwrap();
        let y = block.forward(&mut g, x, Pass::eval()).unwrap();
        let want: Vec<f64> = data.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(g.value(y).data(), &want[..]);
    }

    #[test]
    fn strided_bottleneck_halves_spatial() {
        for at in [StrideAt::Conv1x1, StrideAt::Conv3x3] {
            let block = ResidualBlock::<f32>::bottleneck(8, 2, 2, at, BlockOrder::PostActivation, 1, &mut rng());
            let mut g = Graph::new();
            let x = g.constant(Tensor::ones(vec![1, 8, 8, 8])).unwrap();
            let y = block.forward(&mut g, x, Pass::eval()).unwrap();
            assert_eq!(g.shape(y), &[1, 8, 4, 4]);
            assert!(block.downsample.is_some());
        }
    }

    #[test]
    fn block_rejects_channel_mismatch() {
        let block = ResidualBlock::<f32>::basic(4, 4, 1, BlockOrder::PostActivation, 1, &mut rng());
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![1, 3, 4, 4])).unwrap();
        assert!(block.forward(&mut g, x, Pass::eval()).is_err());
    }

    #[test]
    fn batchnorm_constant_channel_trains_to_zero() {
        let bn = BatchNorm::<f64>::new(2);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![3, 2, 2, 2], 4.5)).unwrap();
        let y = bn.forward(&mut g, x, Pass::train()).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn batchnorm_eval_closed_form() {
        let bn = BatchNorm::<f64>::new(1);
        bn.gamma.value_mut().fill(2.0);
        bn.beta.value_mut().fill(1.0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 1, 1])).unwrap();
        let y = bn.forward(&mut g, x, Pass::eval()).unwrap();
        let want = 1.0 + 2.0 / (1.0 + BN_EPSILON).sqrt();
        assert!((g.value(y).data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn batchnorm_train_mean_equals_beta() {
        let bn = BatchNorm::<f64>::new(3);
        bn.beta.value_mut().data_mut().copy_from_slice(&[0.5, -1.0, 2.0]);
        let data: Vec<f64> = (0..4 * 3 * 5 * 5).map(|i| ((i * 37 % 101) as f64).sqrt()).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 3, 5, 5], data).unwrap()).unwrap();
        let y = bn.forward(&mut g, x, Pass::train()).unwrap();
        let m = g.mean_axes(y, &[0, 2, 3], false).unwrap();
        for (got, want) in g.value(m).data().iter().zip([0.5, -1.0, 2.0]) {
            assert!((got - want).abs() < 1e-5);
        }
    }

    #[test]
    fn batchnorm_train_needs_two_samples() {
        let bn = BatchNorm::<f32>::new(1);
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 2, 2])).unwrap();
        assert!(bn.forward(&mut g, x, Pass::train()).is_err());
        assert!(bn.forward(&mut g, x, Pass::eval()).is_ok());
    }

    #[test]
    fn batchnorm_full_momentum_makes_eval_match_train() {
        let mut bn = BatchNorm::<f64>::new(2);
        bn.momentum = 1.0;
        bn.gamma.value_mut().data_mut().copy_from_slice(&[1.5, 0.7]);
        let data: Vec<f64> = (0..3 * 2 * 4 * 4).map(|i| (i as f64 * 1.3).cos() * 3.0).collect();
        let input = Tensor::new(vec![3, 2, 4, 4], data).unwrap();
        let mut g = Graph::new();
        let x = g.constant(input).unwrap();
        let train = bn.forward(&mut g, x, Pass::train()).unwrap();
        let eval = bn.forward(&mut g, x, Pass::eval()).unwrap();
        assert!(g.value(train).max_abs_diff(g.value(eval)) < 1e-5);
    }

    #[test]
    fn eval_forward_is_pure() {
        let bn = BatchNorm::<f32>::new(2);
        bn.stats[0].mean.value_mut().data_mut().copy_from_slice(&[0.3, -0.2]);
        let before = bn.stats[0].mean.value().clone();
        let input = Tensor::new(vec![2, 2, 2, 2], (0..16).map(|i| i as f32).collect()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(input).unwrap();
        let a = bn.forward(&mut g, x, Pass::eval()).unwrap();
        let b = bn.forward(&mut g, x, Pass::eval()).unwrap();
        assert_eq!(g.value(a), g.value(b));
        assert_eq!(*bn.stats[0].mean.value(), before);
    }

    #[test]
    fn global_avg_pool_means() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::ones(vec![1, 1, 4, 4])).unwrap();
        let y = global_avg_pool(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);
        let x = g
            .constant(Tensor::from_f64(vec![1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]).unwrap())
            .unwrap();
        let y = global_avg_pool(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
    }
}
