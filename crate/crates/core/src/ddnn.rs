//! Depth-level dynamic networks: one full net whose stages can be cut short
//! to give weight-sharing sub-nets.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    global_avg_pool, BatchNorm, BlockOrder, Conv2d, ConvBnRelu, Linear, Mode, Pass, ResidualBlock, StrideAt,
    BOTTLENECK_EXPANSION,
};
use crate::tensor::{Graph, Param, Scalar, Var};

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Family {
    ResnetBasic,
    ResnetBottleneck,
    Vgg,
}

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::ResnetBasic => "resnet-basic",
            Family::ResnetBottleneck => "resnet-bottleneck",
            Family::Vgg => "vgg",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "resnet-basic" => Some(Family::ResnetBasic),
            "resnet-bottleneck" => Some(Family::ResnetBottleneck),
            "vgg" => Some(Family::Vgg),
            _ => None,
        }
    }
}

/// Input stem of ResNet families.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stem {
    /// 3×3 stride-1 convolution (CIFAR-style).
    Small,
    /// 7×7 stride-2 convolution followed by 3×3 stride-2 max pooling.
    Large,
}

impl Stem {
    pub fn as_str(self) -> &'static str {
        match self {
            Stem::Small => "small",
            Stem::Large => "large",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "small" => Some(Stem::Small),
            "large" => Some(Stem::Large),
            _ => None,
        }
    }
}

/// Architecture of the full net.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct NetConfig {
    pub family: Family,
    pub stage_blocks: Vec<usize>,
    /// Per-stage width. For bottleneck stages this is the inner width; the
    /// stage outputs four times as many channels.
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
    /// C×H×W of one input image.
    pub input_shape: [usize; 3],
    pub stem: Stem,
    pub block_order: BlockOrder,
    /// Only meaningful for bottleneck nets.
    pub stride_at: StrideAt,
}

impl NetConfig {
    /// CIFAR-style ResNet with basic blocks and widths 16/32/64.
    pub fn resnet_cifar(stage_blocks: &[usize], num_classes: usize) -> Self {
        NetConfig {
            family: Family::ResnetBasic,
            stage_blocks: stage_blocks.to_vec(),
            stage_channels: vec![16, 32, 64],
            num_classes,
            input_shape: [3, 32, 32],
            stem: Stem::Small,
            block_order: BlockOrder::PostActivation,
            stride_at: StrideAt::Conv3x3,
        }
    }

    /// ImageNet-style ResNet (widths 64..512, 7×7 stem, 224×224 input).
    pub fn resnet_imagenet(family: Family, stage_blocks: &[usize]) -> Self {
        NetConfig {
            family,
            stage_blocks: stage_blocks.to_vec(),
            stage_channels: vec![64, 128, 256, 512],
            num_classes: 1000,
            input_shape: [3, 224, 224],
            stem: Stem::Large,
            block_order: BlockOrder::PostActivation,
            stride_at: StrideAt::Conv3x3,
        }
    }

    /// CIFAR-style VGG with [Conv-BN-ReLU] units and widths 64..512.
    pub fn vgg_cifar(stage_blocks: &[usize], num_classes: usize) -> Self {
        NetConfig {
            family: Family::Vgg,
            stage_blocks: stage_blocks.to_vec(),
            stage_channels: vec![64, 128, 256, 512, 512],
            num_classes,
            input_shape: [3, 32, 32],
            stem: Stem::Small,
            block_order: BlockOrder::PostActivation,
            stride_at: StrideAt::Conv3x3,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_blocks.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_blocks.is_empty() {
            return Err(Error::Config("stage_blocks must not be empty".into()));
        }
        if self.stage_blocks.len() != self.stage_channels.len() {
            return Err(Error::Config(format!(
                "stage_blocks has {} stages but stage_channels has {}",
                self.stage_blocks.len(),
                self.stage_channels.len()
            )));
        }
        if self.stage_blocks.contains(&0) {
            return Err(Error::Config("every stage needs at least one block".into()));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::Config("input_shape extents must be positive".into()));
        }
        Ok(())
    }

    /// Same architecture with different per-stage block counts.
    pub fn with_blocks(&self, stage_blocks: &[usize]) -> Self {
        NetConfig {
            stage_blocks: stage_blocks.to_vec(),
            ..self.clone()
        }
    }

    /// Weighted layer count, as in "ResNet-20" or "VGG-16".
    pub fn depth(&self) -> usize {
        let blocks: usize = self.stage_blocks.iter().sum();
        match self.family {
            Family::ResnetBasic => 2 * blocks + 2,
            Family::ResnetBottleneck => 3 * blocks + 2,
            Family::Vgg => blocks + 3,
        }
    }

    pub fn name(&self) -> String {
        match self.family {
            Family::Vgg => format!("VGG-{}", self.depth()),
            _ => format!("ResNet-{}", self.depth()),
        }
    }

    /// Channels leaving stage `i`.
    pub fn stage_out_channels(&self, i: usize) -> usize {
        match self.family {
            Family::ResnetBottleneck => self.stage_channels[i] * BOTTLENECK_EXPANSION,
            _ => self.stage_channels[i],
        }
    }

    /// Channels entering stage 0.
    pub fn stem_channels(&self) -> usize {
        match self.family {
            Family::Vgg => self.input_shape[0],
            _ => self.stage_channels[0],
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_out_channels(self.num_stages() - 1)
    }
}

#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ClassifierMode {
    /// Sub-nets reuse the full net's classifier.
    Shared,
    /// Each sub-net owns a classifier of the same shape.
    Private,
}

impl ClassifierMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierMode::Shared => "shared",
            ClassifierMode::Private => "private",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shared" => Some(ClassifierMode::Shared),
            "private" => Some(ClassifierMode::Private),
            _ => None,
        }
    }
}

/// A sub-net runs the first `prefix_blocks[i]` blocks of every stage `i`.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq, Hash)]
pub struct SubnetSpec {
    pub prefix_blocks: Vec<usize>,
    pub classifier_mode: ClassifierMode,
}

impl SubnetSpec {
    pub fn new(prefix_blocks: &[usize]) -> Self {
        SubnetSpec {
            prefix_blocks: prefix_blocks.to_vec(),
            classifier_mode: ClassifierMode::Shared,
        }
    }

    pub fn private(prefix_blocks: &[usize]) -> Self {
        SubnetSpec {
            prefix_blocks: prefix_blocks.to_vec(),
            classifier_mode: ClassifierMode::Private,
        }
    }

    fn validate(&self, full: &[usize]) -> Result<()> {
        if self.prefix_blocks.len() != full.len() {
            return Err(Error::Config(format!(
                "sub-net {:?} has {} stages, full net has {}",
                self.prefix_blocks,
                self.prefix_blocks.len(),
                full.len()
            )));
        }
        for (i, (&p, &f)) in self.prefix_blocks.iter().zip(full).enumerate() {
            if p == 0 || p > f {
                return Err(Error::Config(format!(
                    "sub-net {:?}: stage {} keeps {p} blocks, must be in 1..={f}",
                    self.prefix_blocks,
                    i + 1
                )));
            }
        }
        if self.prefix_blocks == full {
            return Err(Error::Config(format!(
                "sub-net {:?} is the full net",
                self.prefix_blocks
            )));
        }
        Ok(())
    }
}

/// Which stages feed the attention loss.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub enum TapPolicy {
    /// Every stage where some sub-net skips blocks.
    SplitStages,
    /// Explicit 0-based stage indices.
    Stages(Vec<usize>),
}

/// Whether BN running statistics are shared by all nets or kept per net.
#[derive(Serialize, Deserialize, Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BnStats {
    Shared,
    PerNet,
}

impl BnStats {
    pub fn as_str(self) -> &'static str {
        match self {
            BnStats::Shared => "shared",
            BnStats::PerNet => "per_net",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "shared" => Some(BnStats::Shared),
            "per_net" => Some(BnStats::PerNet),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DdnnOptions {
    pub tap_policy: TapPolicy,
    pub bn_stats: BnStats,
    pub seed: u64,
}

impl Default for DdnnOptions {
    fn default() -> Self {
        DdnnOptions {
            tap_policy: TapPolicy::SplitStages,
            bn_stats: BnStats::Shared,
            seed: 0,
        }
    }
}

/// Everything needed to rebuild a [`Ddnn`]'s structure.
#[derive(Serialize, Deserialize, Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub net: NetConfig,
    pub subnets: Vec<SubnetSpec>,
    pub tap_stages: Vec<usize>,
    pub bn_stats: BnStats,
}

/// One block of a stage.
pub enum Unit<T: Scalar> {
    Residual(ResidualBlock<T>),
    Vgg(ConvBnRelu<T>),
}

impl<T: Scalar> Unit<T> {
    fn forward(&self, g: &mut Graph<T>, x: Var, pass: Pass) -> Result<Var> {
        match self {
            Unit::Residual(b) => b.forward(g, x, pass),
            Unit::Vgg(u) => u.forward(g, x, pass),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<T>)) {
        match self {
            Unit::Residual(b) => b.visit(prefix, f),
            Unit::Vgg(u) => u.visit(prefix, f),
        }
    }

    fn project(&self, slot: Option<usize>) -> Self {
        let bn = |b: &BatchNorm<T>| match slot {
            Some(s) => b.project_slot(s),
            None => b.deep_clone(),
        };
        match self {
            Unit::Residual(b) => Unit::Residual(b.map_layers(Conv2d::deep_clone, bn)),
            Unit::Vgg(u) => Unit::Vgg(ConvBnRelu {
                conv: u.conv.deep_clone(),
                bn: bn(&u.bn),
            }),
        }
    }
}

struct StemLayers<T: Scalar> {
    conv: Conv2d<T>,
    // absent for pre-activation nets, which normalise at the head instead
    bn: Option<BatchNorm<T>>,
    max_pool: bool,
}

/// Logits and tapped stage outputs of one net.
#[derive(Clone, Debug)]
pub struct NetOutput {
    pub logits: Var,
    /// Outputs of the tap stages, in stage order.
    pub features: Vec<Var>,
}

/// A full net plus `K` sub-net views over the same parameters. Net index 0
/// is the full net; index `k ≥ 1` is `subnets[k - 1]`.
pub struct Ddnn<T: Scalar> {
    config: NetConfig,
    subnets: Vec<SubnetSpec>,
    tap_stages: Vec<usize>,
    bn_stats: BnStats,
    stem: Option<StemLayers<T>>,
    stages: Vec<Vec<Unit<T>>>,
    head_bn: Option<BatchNorm<T>>,
    classifier: Linear<T>,
    private_classifiers: Vec<Option<Linear<T>>>,
}

impl<T: Scalar> Ddnn<T> {
    pub fn build(config: NetConfig, subnets: Vec<SubnetSpec>, options: &DdnnOptions) -> Result<Self> {
        config.validate()?;
        let mut seen = BTreeSet::new();
        for s in &subnets {
            s.validate(&config.stage_blocks)?;
            if !seen.insert(s.prefix_blocks.clone()) {
                return Err(Error::Config(format!("duplicate sub-net {:?}", s.prefix_blocks)));
            }
        }
        let split_stages: Vec<usize> = (0..config.num_stages())
            .filter(|&i| subnets.iter().any(|s| s.prefix_blocks[i] < config.stage_blocks[i]))
            .collect();
        let tap_stages = match &options.tap_policy {
            TapPolicy::SplitStages => split_stages,
            TapPolicy::Stages(stages) => {
                let mut stages = stages.clone();
                stages.sort_unstable();
                stages.dedup();
                if let Some(bad) = stages.iter().find(|s| !split_stages.contains(s)) {
                    return Err(Error::Config(format!(
                        "tap stage {} has no split point (split stages: {:?})",
                        bad + 1,
                        split_stages.iter().map(|s| s + 1).collect::<Vec<_>>()
                    )));
                }
                stages
            }
        };

        let slots = match options.bn_stats {
            BnStats::Shared => 1,
            BnStats::PerNet => subnets.len() + 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let post = config.block_order == BlockOrder::PostActivation;
        let in_ch = config.input_shape[0];

        let stem = match config.family {
            Family::Vgg => None,
            _ => {
                let c0 = config.stem_channels();
                let (conv, max_pool) = match config.stem {
                    Stem::Small => (Conv2d::new(in_ch, c0, 3, 1, 1, &mut rng), false),
                    Stem::Large => (Conv2d::new(in_ch, c0, 7, 2, 3, &mut rng), true),
                };
                Some(StemLayers {
                    conv,
                    bn: post.then(|| BatchNorm::with_slots(c0, slots)),
                    max_pool,
                })
            }
        };

        let mut stages = Vec::with_capacity(config.num_stages());
        let mut ch = config.stem_channels();
        for (i, &blocks) in config.stage_blocks.iter().enumerate() {
            let width = config.stage_channels[i];
            let mut units = Vec::with_capacity(blocks);
            for j in 0..blocks {
                let stride = if i > 0 && j == 0 && config.family != Family::Vgg {
                    2
                } else {
                    1
                };
                let unit = match config.family {
                    Family::ResnetBasic => Unit::Residual(ResidualBlock::basic(
                        ch,
                        width,
                        stride,
                        config.block_order,
                        slots,
                        &mut rng,
                    )),
                    Family::ResnetBottleneck => Unit::Residual(ResidualBlock::bottleneck(
                        ch,
                        width,
                        stride,
                        config.stride_at,
                        config.block_order,
                        slots,
                        &mut rng,
                    )),
                    Family::Vgg => Unit::Vgg(ConvBnRelu::new(ch, width, slots, &mut rng)),
                };
                ch = config.stage_out_channels(i);
                units.push(unit);
            }
            stages.push(units);
        }
        let head_bn = (!post && config.family != Family::Vgg).then(|| BatchNorm::with_slots(ch, slots));
        let classifier = Linear::new(ch, config.num_classes, &mut rng);
        let private_classifiers = subnets
            .iter()
            .map(|s| {
                (s.classifier_mode == ClassifierMode::Private).then(|| Linear::new(ch, config.num_classes, &mut rng))
            })
            .collect();

        Ok(Ddnn {
            config,
            subnets,
            tap_stages,
            bn_stats: options.bn_stats,
            stem,
            stages,
            head_bn,
            classifier,
            private_classifiers,
        })
    }

    pub fn from_architecture(arch: &Architecture) -> Result<Self> {
        Self::build(
            arch.net.clone(),
            arch.subnets.clone(),
            &DdnnOptions {
                tap_policy: TapPolicy::Stages(arch.tap_stages.clone()),
                bn_stats: arch.bn_stats,
                seed: 0,
            },
        )
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            net: self.config.clone(),
            subnets: self.subnets.clone(),
            tap_stages: self.tap_stages.clone(),
            bn_stats: self.bn_stats,
        }
    }

    /// A plain net (no sub-nets).
    pub fn plain(config: NetConfig, seed: u64) -> Result<Self> {
        Self::build(
            config,
            Vec::new(),
            &DdnnOptions {
                seed,
                ..Default::default()
            },
        )
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn subnets(&self) -> &[SubnetSpec] {
        &self.subnets
    }

    /// Number of sub-nets `K`.
    pub fn num_subnets(&self) -> usize {
        self.subnets.len()
    }

    pub fn num_nets(&self) -> usize {
        self.subnets.len() + 1
    }

    pub fn tap_stages(&self) -> &[usize] {
        &self.tap_stages
    }

    pub fn bn_stats(&self) -> BnStats {
        self.bn_stats
    }

    /// Per-stage block counts run by net `net`.
    pub fn prefix(&self, net: usize) -> &[usize] {
        if net == 0 {
            &self.config.stage_blocks
        } else {
            &self.subnets[net - 1].prefix_blocks
        }
    }

    /// Standalone architecture of net `net`.
    pub fn net_config(&self, net: usize) -> NetConfig {
        self.config.with_blocks(self.prefix(net))
    }

    pub fn net_name(net: usize) -> String {
        if net == 0 {
            "full".to_string()
        } else {
            format!("sub{net}")
        }
    }

    fn check_net(&self, net: usize) -> Result<()> {
        if net > self.subnets.len() {
            return Err(Error::Invalid(format!(
                "net index {net} out of range (K = {})",
                self.subnets.len()
            )));
        }
        Ok(())
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != self.config.input_shape {
            return Err(Error::shape(
                "forward_net",
                format!("expected N×{:?} input, got {shape:?}", self.config.input_shape),
            ));
        }
        Ok(())
    }

    fn stats_slot(&self, net: usize) -> usize {
        match self.bn_stats {
            BnStats::Shared => 0,
            BnStats::PerNet => net,
        }
    }

    fn classifier_for(&self, net: usize) -> &Linear<T> {
        if net == 0 {
            return &self.classifier;
        }
        self.private_classifiers[net - 1].as_ref().unwrap_or(&self.classifier)
    }

    /// Forward pass of one net.
    pub fn forward_net(&self, g: &mut Graph<T>, net: usize, x: Var, mode: Mode) -> Result<NetOutput> {
        Ok(self.forward_nets(g, &[net], x, mode, false)?.remove(0))
    }

    /// Forward passes of several nets on the same batch. With `reuse_prefix`,
    /// a block whose input is computed identically for an earlier net in
    /// `nets` is not run again; its recorded output is reused.
    pub fn forward_nets(
        &self,
        g: &mut Graph<T>,
        nets: &[usize],
        x: Var,
        mode: Mode,
        reuse_prefix: bool,
    ) -> Result<Vec<NetOutput>> {
        self.check_input(g, x)?;
        for &net in nets {
            self.check_net(net)?;
        }
        if reuse_prefix && self.bn_stats == BnStats::PerNet && mode == Mode::Train {
            return Err(Error::Invalid(
                "prefix reuse needs shared BN statistics in train mode".into(),
            ));
        }
        // key: (block counts of earlier stages, stage, block); block usize::MAX
        // marks the stage-boundary pooling
        let mut cache: HashMap<(Vec<usize>, usize, usize), Var> = HashMap::new();
        let mut stem_out: Option<Var> = None;
        let mut outputs = Vec::with_capacity(nets.len());
        for &net in nets {
            let pass = Pass::new(mode).with_slot(self.stats_slot(net));
            let mut h = match (reuse_prefix, stem_out) {
                (true, Some(v)) => v,
                _ => {
                    let v = self.forward_stem(g, x, pass)?;
                    stem_out = Some(v);
                    v
                }
            };
            let prefix = self.prefix(net).to_vec();
            let mut features = Vec::with_capacity(self.tap_stages.len());
            let last_stage = self.stages.len() - 1;
            for (i, units) in self.stages.iter().enumerate() {
                for (j, unit) in units.iter().take(prefix[i]).enumerate() {
                    let key = (prefix[..i].to_vec(), i, j);
                    h = match cache.get(&key) {
                        Some(&v) if reuse_prefix => v,
                        _ => {
                            let v = unit.forward(g, h, pass)?;
                            cache.insert(key, v);
                            v
                        }
                    };
                }
                if self.tap_stages.contains(&i) {
                    features.push(h);
                }
                if self.config.family == Family::Vgg && i < last_stage {
                    let key = (prefix[..=i].to_vec(), i, usize::MAX);
                    h = match cache.get(&key) {
                        Some(&v) if reuse_prefix => v,
                        _ => {
                            let v = g.max_pool2d(h, 2, 2, 0)?;
                            cache.insert(key, v);
                            v
                        }
                    };
                }
            }
            if let Some(bn) = &self.head_bn {
                h = bn.forward(g, h, pass)?;
                h = g.relu(h)?;
            }
            let pooled = global_avg_pool(g, h)?;
            let logits = self.classifier_for(net).forward(g, pooled)?;
            outputs.push(NetOutput { logits, features });
        }
        Ok(outputs)
    }

    fn forward_stem(&self, g: &mut Graph<T>, x: Var, pass: Pass) -> Result<Var> {
        let Some(stem) = &self.stem else {
            return Ok(x);
        };
        let mut h = stem.conv.forward(g, x)?;
        if let Some(bn) = &stem.bn {
            h = bn.forward(g, h, pass)?;
            h = g.relu(h)?;
        }
        if stem.max_pool {
            h = g.max_pool2d(h, 3, 2, 1)?;
        }
        Ok(h)
    }

    /// Calls `f` for every parameter and buffer, with its canonical name.
    pub fn visit_params(&self, f: &mut dyn FnMut(String, &Param<T>)) {
        if let Some(stem) = &self.stem {
            stem.conv.visit("stem.conv", f);
            if let Some(bn) = &stem.bn {
                bn.visit("stem.bn", f);
            }
        }
        for (i, units) in self.stages.iter().enumerate() {
            for (j, unit) in units.iter().enumerate() {
                unit.visit(&format!("stages.{i}.{j}"), f);
            }
        }
        if let Some(bn) = &self.head_bn {
            bn.visit("head.bn", f);
        }
        self.classifier.visit("classifier", f);
        for (k, c) in self.private_classifiers.iter().enumerate() {
            if let Some(c) = c {
                c.visit(&format!("classifier_sub{}", k + 1), f);
            }
        }
    }

    /// Every parameter and buffer, sorted by name.
    pub fn named_params(&self) -> Vec<(String, Param<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| out.push((name, p.clone())));
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn trainable_params(&self) -> Vec<Param<T>> {
        let mut out = Vec::new();
        self.visit_params(&mut |_, p| {
            if p.requires_grad() {
                out.push(p.clone())
            }
        });
        out
    }

    /// Names of the parameters net `net` reads.
    pub fn net_param_names(&self, net: usize) -> Vec<String> {
        let prefix = self.prefix(net);
        let classifier = if net > 0 && self.private_classifiers[net - 1].is_some() {
            format!("classifier_sub{net}.")
        } else {
            "classifier.".to_string()
        };
        let mut names = Vec::new();
        self.visit_params(&mut |name, _| {
            let keep = if let Some(rest) = name.strip_prefix("stages.") {
                let mut it = rest.split('.');
                let i: usize = it.next().unwrap().parse().unwrap();
                let j: usize = it.next().unwrap().parse().unwrap();
                j < prefix[i]
            } else if name.starts_with("classifier") {
                name.starts_with(&classifier)
            } else {
                true
            };
            if keep {
                names.push(name);
            }
        });
        names.sort();
        names
    }

    /// Distinct trainable scalars in the registry, counting shared storage once.
    pub fn distinct_trainable_scalars(&self) -> u64 {
        let mut seen = BTreeSet::new();
        let mut total = 0u64;
        self.visit_params(&mut |_, p| {
            if p.requires_grad() && seen.insert(p.id()) {
                total += p.numel() as u64;
            }
        });
        total
    }

    /// Standalone copy of net `net`: only the blocks and classifier it uses,
    /// with independent storage. Index 0 copies the full net without
    /// sub-nets.
    pub fn extract(&self, net: usize) -> Result<Ddnn<T>> {
        self.check_net(net)?;
        let prefix = self.prefix(net).to_vec();
        let slot = match self.bn_stats {
            BnStats::Shared => None,
            BnStats::PerNet => Some(net),
        };
        let bn = |b: &BatchNorm<T>| match slot {
            Some(s) => b.project_slot(s),
            None => b.deep_clone(),
        };
        let stem = self.stem.as_ref().map(|s| StemLayers {
            conv: s.conv.deep_clone(),
            bn: s.bn.as_ref().map(bn),
            max_pool: s.max_pool,
        });
        let stages = self
            .stages
            .iter()
            .zip(&prefix)
            .map(|(units, &p)| units.iter().take(p).map(|u| u.project(slot)).collect())
            .collect();
        Ok(Ddnn {
            config: self.config.with_blocks(&prefix),
            subnets: Vec::new(),
            tap_stages: Vec::new(),
            bn_stats: BnStats::Shared,
            stem,
            stages,
            head_bn: self.head_bn.as_ref().map(bn),
            classifier: self.classifier_for(net).deep_clone(),
            private_classifiers: Vec::new(),
        })
    }

    /// Blocks of the full net that net `net` skips, as (stage, block) pairs.
    pub fn dropped_blocks(&self, net: usize) -> Vec<(usize, usize)> {
        let prefix = self.prefix(net);
        self.config
            .stage_blocks
            .iter()
            .zip(prefix)
            .enumerate()
            .flat_map(|(i, (&full, &p))| (p..full).map(move |j| (i, j)))
            .collect()
    }
}

impl<T: Scalar> fmt::Debug for Ddnn<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ddnn")
            .field("config", &self.config)
            .field("subnets", &self.subnets)
            .field("tap_stages", &self.tap_stages)
            .finish()
    }
}

/// Formats dropped blocks as `stage3:{5,6}` with 1-based indices.
pub fn format_dropped(dropped: &[(usize, usize)]) -> String {
    let mut by_stage: Vec<(usize, Vec<usize>)> = Vec::new();
    for &(i, j) in dropped {
        match by_stage.last_mut() {
            Some((s, blocks)) if *s == i => blocks.push(j + 1),
            _ => by_stage.push((i, vec![j + 1])),
        }
    }
    by_stage
        .iter()
        .map(|(i, blocks)| {
            let list: Vec<String> = blocks.iter().map(|b| b.to_string()).collect();
            format!("stage{}:{{{}}}", i + 1, list.join(","))
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny() -> NetConfig {
        NetConfig {
            family: Family::ResnetBasic,
            stage_blocks: vec![3, 3, 3],
            stage_channels: vec![4, 8, 8],
            num_classes: 3,
            input_shape: [3, 8, 8],
            stem: Stem::Small,
            block_order: BlockOrder::PostActivation,
            stride_at: StrideAt::Conv3x3,
        }
    }

    #[test]
    fn rejects_bad_subnets() {
        let opts = DdnnOptions::default();
        for bad in [vec![3, 0, 2], vec![3, 4, 2], vec![3, 3], vec![3, 3, 3]] {
            assert!(
                Ddnn::<f32>::build(tiny(), vec![SubnetSpec::new(&bad)], &opts).is_err(),
                "{bad:?}"
            );
        }
        let dup = vec![SubnetSpec::new(&[3, 2, 2]), SubnetSpec::new(&[3, 2, 2])];
        assert!(Ddnn::<f32>::build(tiny(), dup, &opts).is_err());
    }

    #[test]
    fn split_stage_taps() {
        let d = Ddnn::<f32>::build(
            tiny(),
            vec![SubnetSpec::new(&[3, 2, 2]), SubnetSpec::new(&[3, 3, 1])],
            &DdnnOptions::default(),
        )
        .unwrap();
        assert_eq!(d.tap_stages(), &[1, 2]);
        let bad = DdnnOptions {
            tap_policy: TapPolicy::Stages(vec![0]),
            ..Default::default()
        };
        assert!(Ddnn::<f32>::build(tiny(), vec![SubnetSpec::new(&[3, 2, 2])], &bad).is_err());
    }

    #[test]
    fn names_and_dropped_blocks() {
        let cfg = NetConfig::resnet_imagenet(Family::ResnetBottleneck, &[3, 4, 6, 3]);
        assert_eq!(cfg.name(), "ResNet-50");
        assert_eq!(cfg.with_blocks(&[3, 4, 4, 3]).name(), "ResNet-44");
        assert_eq!(NetConfig::resnet_cifar(&[3, 2, 2], 10).name(), "ResNet-16");
        assert_eq!(NetConfig::vgg_cifar(&[1, 1, 2, 2, 2], 10).name(), "VGG-11");
        let d = Ddnn::<f32>::build(tiny(), vec![SubnetSpec::new(&[3, 2, 1])], &DdnnOptions::default()).unwrap();
        assert_eq!(format_dropped(&d.dropped_blocks(1)), "stage2:{3} stage3:{2,3}");
    }

    #[test]
    fn forward_shapes_and_index_errors() {
        let d = Ddnn::<f32>::build(tiny(), vec![SubnetSpec::new(&[3, 2, 2])], &DdnnOptions::default()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(vec![2, 3, 8, 8])).unwrap();
        let out = d.forward_net(&mut g, 1, x, Mode::Eval).unwrap();
        assert_eq!(g.shape(out.logits), &[2, 3]);
        assert_eq!(out.features.len(), 2);
        assert_eq!(g.shape(out.features[0]), &[2, 8, 4, 4]);
        assert!(d.forward_net(&mut g, 2, x, Mode::Eval).is_err());
        let bad = g.constant(Tensor::ones(vec![2, 3, 7, 8])).unwrap();
        assert!(d.forward_net(&mut g, 0, bad, Mode::Eval).is_err());
    }
}
