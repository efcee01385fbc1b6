//! Joint training of a full net and its sub-nets, evaluation, and the
//! per-epoch experiment loop.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::{epoch_batches, make_batch, Dataset, Normalization};
use crate::ddnn::{BnStats, Ddnn, DdnnOptions, NetConfig, NetOutput, SubnetSpec};
use crate::ekd::{
    attention_map, attention_mse, cross_entropy, kl_from_logits, Combination, EkdLossReport, EkdWeights, LossTerms,
};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::tensor::{zero_grad, Graph, Param, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Every net trained on its own, without weight sharing.
    Individual,
    /// Shared weights, hard-label cross-entropy only.
    DdnnHard,
    /// Shared weights with KL distillation and attention matching.
    DdnnEkd,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Individual => "individual",
            Regime::DdnnHard => "ddnn_hard",
            Regime::DdnnEkd => "ddnn_ekd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "individual" => Some(Regime::Individual),
            "ddnn_hard" => Some(Regime::DdnnHard),
            "ddnn_ekd" => Some(Regime::DdnnEkd),
            _ => None,
        }
    }
}

/// Piecewise-constant learning rate: `initial / factor^d` after `d` drops.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub drops: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let d = self.drops.iter().filter(|&&e| epoch >= e).count();
        self.initial / self.factor.powi(d as i32)
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            initial: 0.1,
            drops: vec![150, 250],
            factor: 10.0,
        }
    }
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    schedule.lr_at(epoch)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lr: LrSchedule,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub weights: EkdWeights,
    pub teacher_grad: bool,
    pub combination: Combination,
    pub reforward_each_net: bool,
    pub augment: bool,
    pub normalize: bool,
    /// Write zero instead of elapsed time so metrics files are reproducible.
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn new(regime: Regime, k: usize) -> Self {
        TrainConfig {
            regime,
            lr: LrSchedule::default(),
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 300,
            seed: 0,
            weights: EkdWeights::uniform(k, crate::ekd::DEFAULT_KL_WEIGHT, crate::ekd::DEFAULT_ATT_WEIGHT),
            teacher_grad: false,
            combination: Combination::default(),
            reforward_each_net: false,
            augment: true,
            normalize: true,
            deterministic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr.initial.is_nan() || self.lr.initial <= 0.0 {
            return Err(Error::Config("lr must be > 0".into()));
        }
        if self.lr.factor.is_nan() || self.lr.factor <= 1.0 {
            return Err(Error::Config("lr drop factor must be > 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be ≥ 2 for batch norm".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Config("momentum must be in [0, 1) and weight_decay ≥ 0".into()));
        }
        Ok(())
    }

    /// KL/attention weights actually applied under the regime.
    pub fn effective_weights(&self, k: usize) -> EkdWeights {
        match self.regime {
            Regime::DdnnEkd => self.weights.clone(),
            _ => EkdWeights::zero(k),
        }
    }
}

/// Momentum SGD with L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
pub struct SgdState<T: Scalar> {
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn new(params: &[Param<T>]) -> Self {
        SgdState {
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor<T>] {
        &self.velocity
    }

    pub fn step(&mut self, params: &[Param<T>], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
        if params.len() != self.velocity.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.velocity.len(),
                params.len()
            )));
        }
        let (lr, mu, wd) = (T::from_f64(lr), T::from_f64(momentum), T::from_f64(weight_decay));
        for (p, v) in params.iter().zip(&mut self.velocity) {
            let g = p.grad_or_zeros();
            let mut w = p.value_mut();
            for ((vi, &gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
                *vi = mu * *vi + (gi + wd * *wi);
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Per-net training statistics of one step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: EkdLossReport,
    /// Correct top-1 predictions per net on this batch.
    pub correct: Vec<usize>,
}

fn top1_correct<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let m = logits.shape()[1];
    logits
        .data()
        .chunks(m)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best == y
        })
        .count()
}

fn use_prefix_reuse<T: Scalar>(net: &Ddnn<T>, reforward: bool) -> bool {
    !reforward && net.bn_stats() == BnStats::Shared
}

fn loss_terms<T: Scalar>(
    g: &mut Graph<T>,
    outs: &[NetOutput],
    labels: &[usize],
    with_distillation: bool,
    teacher_grad: bool,
) -> Result<LossTerms> {
    let full = &outs[0];
    let ce_full = cross_entropy(g, full.logits, labels)?;
    let mut terms = LossTerms {
        ce_full,
        ce_sub: Vec::new(),
        kl_sub: Vec::new(),
        att_sub: Vec::new(),
    };
    for sub in &outs[1..] {
        terms.ce_sub.push(cross_entropy(g, sub.logits, labels)?);
        if with_distillation {
            terms
                .kl_sub
                .push(kl_from_logits(g, full.logits, sub.logits, teacher_grad)?);
            terms
                .att_sub
                .push(attention_term(g, &full.features, &sub.features, teacher_grad)?);
        } else {
            let zero = g.constant(Tensor::scalar(T::zero()))?;
            terms.kl_sub.push(zero);
            terms.att_sub.push(zero);
        }
    }
    Ok(terms)
}

/// Mean over tapped stages of the attention-map MSE.
fn attention_term<T: Scalar>(g: &mut Graph<T>, teacher: &[Var], student: &[Var], teacher_grad: bool) -> Result<Var> {
    if teacher.is_empty() {
        return g.constant(Tensor::scalar(T::zero()));
    }
    let mut acc: Option<Var> = None;
    for (&ft, &fs) in teacher.iter().zip(student) {
        let at = attention_map(g, ft)?;
        let a_s = attention_map(g, fs)?;
        let mse = attention_mse(g, a_s, at, teacher_grad)?;
        acc = Some(match acc {
            None => mse,
            Some(a) => g.add(a, mse)?,
        });
    }
    g.scale(acc.unwrap(), 1.0 / teacher.len() as f64)
}

fn non_finite_term(report: &EkdLossReport) -> Option<String> {
    if !report.ce_full.is_finite() {
        return Some("ce_full".into());
    }
    for (name, vals) in [
        ("ce_sub", &report.ce_sub),
        ("kl_sub", &report.kl_sub),
        ("att_sub", &report.att_sub),
    ] {
        if let Some(i) = vals.iter().position(|v| !v.is_finite()) {
            return Some(format!("{name}[{}]", i + 1));
        }
    }
    (!report.total.is_finite()).then(|| "total".into())
}

/// The differentiable objective of one step: every net's forward pass (the
/// full net first) and the combined loss for the regime.
pub struct Objective {
    pub total: Var,
    pub terms: LossTerms,
    pub outputs: Vec<NetOutput>,
    pub weights: EkdWeights,
}

pub fn build_objective<T: Scalar>(
    g: &mut Graph<T>,
    net: &Ddnn<T>,
    x: Var,
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Objective> {
    let k = match cfg.regime {
        Regime::Individual => 0,
        _ => net.num_subnets(),
    };
    let nets: Vec<usize> = (0..=k).collect();
    let outputs = net.forward_nets(g, &nets, x, Mode::Train, use_prefix_reuse(net, cfg.reforward_each_net))?;
    let weights = cfg.effective_weights(k);
    let terms = loss_terms(g, &outputs, labels, cfg.regime == Regime::DdnnEkd, cfg.teacher_grad)?;
    let total = terms.total(g, &weights, cfg.combination)?;
    Ok(Objective {
        total,
        terms,
        outputs,
        weights,
    })
}

/// One optimization step on a batch: zero gradients, forward every net (the
/// full net first), build the total loss, one backward pass, one SGD update.
/// The report's `total` is the value that was backpropagated.
pub fn train_step<T: Scalar>(
    net: &Ddnn<T>,
    x: Tensor<T>,
    labels: &[usize],
    cfg: &TrainConfig,
    lr: f64,
    sgd: &mut SgdState<T>,
) -> Result<StepOutput> {
    let params = net.trainable_params();
    zero_grad(&params);
    let mut g = Graph::single_use();
    let x = g.constant(x)?;
    let obj = build_objective(&mut g, net, x, labels, cfg)?;
    let mut report = obj.terms.report(&g, &obj.weights, cfg.combination)?;
    report.total = g.value(obj.total).item()?.as_f64();
    if let Some(term) = non_finite_term(&report) {
        return Err(Error::NonFinite {
            op: "train_step",
            what: format!("loss term {term} is not finite"),
        });
    }
    let correct = obj
        .outputs
        .iter()
        .map(|o| top1_correct(g.value(o.logits), labels))
        .collect();
    g.backward(obj.total)?;
    sgd.step(&params, lr, cfg.momentum, cfg.weight_decay)?;
    Ok(StepOutput { report, correct })
}

/// Test-split result of one net.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub net: usize,
    pub net_name: String,
    /// Top-1 error in percent.
    pub top1_err: f64,
    pub ce: f64,
    pub kl: f64,
    pub att_mse: f64,
}

/// Eval-mode top-1 error and loss terms of every net over a whole split.
/// Nothing is mutated.
pub fn evaluate<T: Scalar>(
    net: &Ddnn<T>,
    data: &Dataset,
    norm: Option<&Normalization>,
    batch_size: usize,
) -> Result<Vec<EvalResult>> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty split".into()));
    }
    let n_nets = net.num_nets();
    let nets: Vec<usize> = (0..n_nets).collect();
    let mut correct = vec![0usize; n_nets];
    let mut sums = vec![[0.0f64; 3]; n_nets];
    for batch in epoch_batches(data.len(), batch_size.max(1), None) {
        let (x, labels) = make_batch::<T>(data, &batch, None, norm)?;
        let mut g = Graph::new();
        let x = g.constant(x)?;
        let outs = net.forward_nets(&mut g, &nets, x, Mode::Eval, use_prefix_reuse(net, false))?;
        let terms = loss_terms(&mut g, &outs, &labels, true, false)?;
        let n = batch.len() as f64;
        for (i, o) in outs.iter().enumerate() {
            correct[i] += top1_correct(g.value(o.logits), &labels);
            let ce = if i == 0 { terms.ce_full } else { terms.ce_sub[i - 1] };
            sums[i][0] += n * g.value(ce).item()?.as_f64();
            if i > 0 {
                sums[i][1] += n * g.value(terms.kl_sub[i - 1]).item()?.as_f64();
                sums[i][2] += n * g.value(terms.att_sub[i - 1]).item()?.as_f64();
            }
        }
    }
    let total = data.len() as f64;
    Ok((0..n_nets)
        .map(|i| EvalResult {
            net: i,
            net_name: Ddnn::<T>::net_name(i),
            top1_err: 100.0 * (1.0 - correct[i] as f64 / total),
            ce: sums[i][0] / total,
            kl: sums[i][1] / total,
            att_mse: sums[i][2] / total,
        })
        .collect())
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub net_name: String,
    pub split: &'static str,
    pub top1_err: f64,
    pub ce: f64,
    pub kl: f64,
    pub att_mse: f64,
    pub total: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

pub const METRICS_HEADER: &str = "epoch,net_name,split,top1_err,ce,kl,att_mse,total,lr,wall_secs";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.net_name,
            self.split,
            self.top1_err,
            self.ce,
            self.kl,
            self.att_mse,
            self.total,
            self.lr,
            self.wall_secs
        )
    }

    pub fn parse_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 10 {
            return Err(Error::Data(format!("metrics row needs 10 fields: {line:?}")));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse::<f64>()
                .map_err(|_| Error::Data(format!("bad number {:?} in metrics row", f[i])))
        };
        Ok(MetricsRow {
            epoch: f[0].parse().map_err(|_| Error::Data(format!("bad epoch {:?}", f[0])))?,
            net_name: f[1].to_string(),
            split: match f[2] {
                "train" => "train",
                "test" => "test",
                other => return Err(Error::Data(format!("unknown split {other:?}"))),
            },
            top1_err: num(3)?,
            ce: num(4)?,
            kl: num(5)?,
            att_mse: num(6)?,
            total: num(7)?,
            lr: num(8)?,
            wall_secs: num(9)?,
        })
    }
}

/// Architecture plus training settings of one run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub net: NetConfig,
    pub subnets: Vec<SubnetSpec>,
    pub ddnn: DdnnOptions,
    pub train: TrainConfig,
}

/// Where a run writes its metrics and checkpoints.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
    /// Copied into every checkpoint's metadata.
    pub metadata: BTreeMap<String, String>,
}

/// Final state of a run.
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub final_eval: Vec<EvalResult>,
    /// Best test error per net, with the epoch it was reached.
    pub best: Vec<(String, f64, usize)>,
    /// Trained models: one DDNN, or one plain net per net in the individual regime.
    pub models: Vec<Ddnn<f32>>,
}

impl RunOutput {
    pub fn test_error(&self, net_name: &str) -> Option<f64> {
        self.final_eval
            .iter()
            .find(|e| e.net_name == net_name)
            .map(|e| e.top1_err)
    }
}

struct Model {
    net: Ddnn<f32>,
    sgd: SgdState<f32>,
    // names of the nets this model covers (one for plain nets)
    names: Vec<String>,
}

fn build_models(exp: &Experiment) -> Result<Vec<Model>> {
    let model = |net: Ddnn<f32>, names: Vec<String>| Model {
        sgd: SgdState::new(&net.trainable_params()),
        net,
        names,
    };
    match exp.train.regime {
        Regime::Individual => {
            let mut out = Vec::with_capacity(exp.subnets.len() + 1);
            let configs = std::iter::once(exp.net.clone())
                .chain(exp.subnets.iter().map(|s| exp.net.with_blocks(&s.prefix_blocks)));
            for (i, cfg) in configs.enumerate() {
                let opts = DdnnOptions {
                    seed: exp.ddnn.seed.wrapping_add(i as u64),
                    ..exp.ddnn.clone()
                };
                out.push(model(
                    Ddnn::build(cfg, Vec::new(), &opts)?,
                    vec![Ddnn::<f32>::net_name(i)],
                ));
            }
            Ok(out)
        }
        _ => {
            let net = Ddnn::build(exp.net.clone(), exp.subnets.clone(), &exp.ddnn)?;
            let names = (0..net.num_nets()).map(Ddnn::<f32>::net_name).collect();
            Ok(vec![model(net, names)])
        }
    }
}

fn open_metrics(dir: &Path) -> Result<fs::File> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("metrics.csv");
    let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
    Ok(f)
}

/// Trains for `cfg.epochs` epochs, evaluating every net on the test split
/// after each epoch. With `artifacts`, writes `metrics.csv`, `best_<net>.ckpt`
/// whenever a net reaches a new best test error, and `last.ckpt` (plus
/// `last_<net>.ckpt` per model in the individual regime).
pub fn run_experiment(
    exp: &Experiment,
    train: &Dataset,
    test: &Dataset,
    artifacts: Option<&Artifacts>,
) -> Result<RunOutput> {
    run_experiment_with(exp, train, test, artifacts, &mut |_| {})
}

/// [`run_experiment`], calling `on_epoch` with each epoch's metrics rows.
pub fn run_experiment_with(
    exp: &Experiment,
    train: &Dataset,
    test: &Dataset,
    artifacts: Option<&Artifacts>,
    on_epoch: &mut dyn FnMut(&[MetricsRow]),
) -> Result<RunOutput> {
    let cfg = &exp.train;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    if train.shape != exp.net.input_shape || test.shape != exp.net.input_shape {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the net expects {:?}",
            train.shape, exp.net.input_shape
        )));
    }
    if train.num_classes != exp.net.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the net has {}",
            train.num_classes, exp.net.num_classes
        )));
    }
    let k = exp.subnets.len();
    if cfg.regime == Regime::DdnnEkd {
        cfg.weights.validate(k)?;
    }
    let norm = if cfg.normalize {
        Some(Normalization::fit(train)?)
    } else {
        None
    };
    let mut models = build_models(exp)?;
    let mut metrics = match artifacts {
        Some(a) => Some(open_metrics(&a.dir)?),
        None => None,
    };
    let metrics_path = artifacts.map(|a| a.dir.join("metrics.csv"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut best: Vec<(String, f64, usize)> = models
        .iter()
        .flat_map(|m| m.names.iter().map(|n| (n.clone(), f64::INFINITY, 0)))
        .collect();
    let mut final_eval = Vec::new();

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr.lr_at(epoch);
        let n_names = best.len();
        let mut sums = vec![[0.0f64; 4]; n_names];
        let mut correct = vec![0usize; n_names];
        let mut seen = 0usize;
        let mut steps = 0usize;
        for batch in epoch_batches(train.len(), cfg.batch_size, Some(&mut rng)) {
            let aug = cfg.augment.then_some(&mut rng);
            let (x, labels) = make_batch::<f32>(train, &batch, aug, norm.as_ref())?;
            let mut slot = 0;
            for m in &mut models {
                let out = train_step(&m.net, x.clone(), &labels, cfg, lr, &mut m.sgd)?;
                let r = &out.report;
                for (j, c) in out.correct.iter().enumerate() {
                    let (ce, kl, att) = if j == 0 {
                        (r.ce_full, 0.0, 0.0)
                    } else {
                        (r.ce_sub[j - 1], r.kl_sub[j - 1], r.att_sub[j - 1])
                    };
                    let s = &mut sums[slot + j];
                    s[0] += ce;
                    s[1] += kl;
                    s[2] += att;
                    s[3] += r.total;
                    correct[slot + j] += c;
                }
                slot += m.names.len();
            }
            seen += batch.len();
            steps += 1;
        }
        let wall = if cfg.deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };

        let mut epoch_rows = Vec::new();
        for (i, (name, _, _)) in best.iter().enumerate() {
            let s = sums[i];
            let d = steps as f64;
            epoch_rows.push(MetricsRow {
                epoch,
                net_name: name.clone(),
                split: "train",
                top1_err: 100.0 * (1.0 - correct[i] as f64 / seen as f64),
                ce: s[0] / d,
                kl: s[1] / d,
                att_mse: s[2] / d,
                total: s[3] / d,
                lr,
                wall_secs: wall,
            });
        }

        final_eval.clear();
        let mut slot = 0;
        for m in &models {
            let evals = evaluate(&m.net, test, norm.as_ref(), cfg.batch_size.max(64))?;
            let eval_k = evals.len() - 1;
            let ce_sub: Vec<f64> = evals[1..].iter().map(|e| e.ce).collect();
            let kl_sub: Vec<f64> = evals[1..].iter().map(|e| e.kl).collect();
            let att_sub: Vec<f64> = evals[1..].iter().map(|e| e.att_mse).collect();
            let weights = cfg.effective_weights(eval_k);
            let total =
                crate::ekd::total_loss(evals[0].ce, &ce_sub, &kl_sub, &att_sub, &weights, cfg.combination)?.total;
            for (j, e) in evals.into_iter().enumerate() {
                let name = m.names[j].clone();
                epoch_rows.push(MetricsRow {
                    epoch,
                    net_name: name.clone(),
                    split: "test",
                    top1_err: e.top1_err,
                    ce: e.ce,
                    kl: e.kl,
                    att_mse: e.att_mse,
                    total,
                    lr,
                    wall_secs: wall,
                });
                let b = &mut best[slot + j];
                if e.top1_err < b.1 {
                    b.1 = e.top1_err;
                    b.2 = epoch;
                    if let Some(a) = artifacts {
                        save_checkpoint(
                            &m.net,
                            a,
                            norm.as_ref(),
                            epoch,
                            &a.dir.join(format!("best_{name}.ckpt")),
                        )?;
                    }
                }
                final_eval.push(EvalResult {
                    net_name: name,
                    net: slot + j,
                    ..e
                });
            }
            slot += m.names.len();
        }

        if let (Some(f), Some(path)) = (metrics.as_mut(), metrics_path.as_ref()) {
            for r in &epoch_rows {
                writeln!(f, "{}", r.to_csv()).map_err(|e| Error::io(path, e))?;
            }
            f.flush().map_err(|e| Error::io(path, e))?;
        }
        on_epoch(&epoch_rows);
        rows.extend(epoch_rows);
    }

    if let Some(a) = artifacts {
        let last = cfg.epochs - 1;
        if models.len() == 1 {
            save_checkpoint(&models[0].net, a, norm.as_ref(), last, &a.dir.join("last.ckpt"))?;
        } else {
            for m in &models {
                save_checkpoint(
                    &m.net,
                    a,
                    norm.as_ref(),
                    last,
                    &a.dir.join(format!("last_{}.ckpt", m.names[0])),
                )?;
            }
        }
    }

    Ok(RunOutput {
        rows,
        final_eval,
        best,
        models: models.into_iter().map(|m| m.net).collect(),
    })
}

fn save_checkpoint(
    net: &Ddnn<f32>,
    a: &Artifacts,
    norm: Option<&Normalization>,
    epoch: usize,
    path: &Path,
) -> Result<()> {
    let mut meta = a.metadata.clone();
    meta.insert("epoch".into(), epoch.to_string());
    let mut ckpt = Checkpoint::from_ddnn(net, meta)?;
    if let Some(n) = norm {
        ckpt.set_normalization(n)?;
    }
    ckpt.save(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_examples() {
        let s = LrSchedule::default();
        assert_eq!(lr_at(&s, 0), 0.1);
        assert!((lr_at(&s, 149) - 0.1).abs() < 1e-15);
        assert!((lr_at(&s, 150) - 0.01).abs() < 1e-15);
        assert!((lr_at(&s, 299) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn plain_sgd_when_momentum_and_decay_vanish() {
        let p = Param::new(Tensor::<f32>::from_vec(vec![1.0, -2.0, 0.5]));
        p.accumulate_grad(&Tensor::from_vec(vec![0.3, 0.1, -0.7]));
        let mut sgd = SgdState::new(std::slice::from_ref(&p));
        sgd.step(std::slice::from_ref(&p), 0.1, 0.0, 0.0).unwrap();
        let want: Vec<f32> = [1.0f32, -2.0, 0.5]
            .iter()
            .zip([0.3f32, 0.1, -0.7])
            .map(|(w, g)| w - 0.1 * g)
            .collect();
        assert_eq!(p.value().data(), &want[..]);
    }

    #[test]
    fn momentum_update_rule() {
        let p = Param::new(Tensor::<f64>::from_vec(vec![1.0]));
        let mut sgd = SgdState::new(std::slice::from_ref(&p));
        p.accumulate_grad(&Tensor::from_vec(vec![2.0]));
        sgd.step(std::slice::from_ref(&p), 0.5, 0.9, 0.1).unwrap();
        // v = 2 + 0.1, w = 1 - 0.5·2.1
        assert!((p.value().data()[0] - (1.0 - 0.5 * 2.1)).abs() < 1e-15);
        sgd.step(std::slice::from_ref(&p), 0.5, 0.9, 0.1).unwrap();
        let w1 = 1.0 - 0.5 * 2.1;
        let v2 = 0.9 * 2.1 + (2.0 + 0.1 * w1);
        assert!((p.value().data()[0] - (w1 - 0.5 * v2)).abs() < 1e-15);
    }

    #[test]
    fn metrics_rows_round_trip() {
        let r = MetricsRow {
            epoch: 2,
            net_name: "sub1".into(),
            split: "test",
            top1_err: 12.5,
            ce: 0.1234567891,
            kl: 0.0,
            att_mse: 3.0,
            total: 1.5,
            lr: 0.01,
            wall_secs: 0.0,
        };
        assert_eq!(MetricsRow::parse_csv(&r.to_csv()).unwrap(), r);
        assert_eq!(METRICS_HEADER.split(',').count(), 10);
    }
}
