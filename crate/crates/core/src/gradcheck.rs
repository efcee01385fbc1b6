//! Finite-difference gradient checks in f64.
//!
//! Each case builds a scalar objective from a few parameters. Non-scalar
//! outputs are contracted with a fixed random tensor so the whole Jacobian is
//! exercised. Analytic gradients from one backward pass are compared with
//! central differences; parameters marked as detached must receive exactly
//! zero gradient.

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ddnn::{Ddnn, DdnnOptions, NetConfig, SubnetSpec};
use crate::ekd::{
    attention_map, attention_mse, cross_entropy, kl_distillation, kl_from_logits, log_softmax, softmax, Combination,
    EkdWeights, LossTerms,
};
use crate::error::{Error, Result};
use crate::layers::{global_avg_pool, BatchNorm, BlockOrder, Conv2d, Linear, Pass, ResidualBlock, StrideAt};
use crate::tensor::{Graph, Param, Tensor, Var};
use crate::trainer::{build_objective, Regime, TrainConfig};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Seeds per case.
pub const SEEDS: u64 = 10;
/// Central-difference steps. An element is retried with the smaller steps
/// when the first disagrees, which happens when a perturbation crosses a
/// ReLU or |x| kink somewhere inside a network.
pub const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
/// Denominator floor of the relative error; smaller gradients are compared
/// absolutely against this scale.
pub const FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Role {
    Checked,
    /// Must receive an all-zero gradient.
    Detached,
}

type Objective = Box<dyn Fn(&mut Graph<f64>) -> Result<Var>>;

struct Case {
    params: Vec<(Param<f64>, Role)>,
    f: Objective,
}

/// Result of one case over all seeds.
#[derive(Clone, Debug)]
pub struct CaseReport {
    pub name: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub worst_seed: u64,
    /// Largest |gradient| seen on a detached input (must be 0).
    pub detached_leak: f64,
}

impl CaseReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE && self.detached_leak == 0.0
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized buffer")
}

/// Normal values pushed at least `gap` away from zero, for inputs of kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    normal(rng, shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized buffer")
}

/// Distinct values on a grid with spacing well above the step, shuffled.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 + rng.gen_range(0.0..0.01)).collect();
    data.shuffle(rng);
    Tensor::new(shape.to_vec(), data).expect("sized buffer")
}

fn probs(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(n * m);
    for _ in 0..n {
        let row: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::new(vec![n, m], data).expect("sized buffer")
}

fn labels(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..m)).collect()
}

fn trainable(visit: impl FnOnce(&mut dyn FnMut(String, &Param<f64>))) -> Vec<(Param<f64>, Role)> {
    let mut out = Vec::new();
    visit(&mut |_, p: &Param<f64>| {
        if p.requires_grad() {
            out.push((p.clone(), Role::Checked));
        }
    });
    out
}

/// Unary elementwise op on one checked input.
fn unary(x: Tensor<f64>, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Case {
    let p = Param::new(x);
    let q = p.clone();
    Case {
        params: vec![(p, Role::Checked)],
        f: Box::new(move |g| {
            let x = g.param(&q)?;
            op(g, x)
        }),
    }
}

fn binary(a: Tensor<f64>, b: Tensor<f64>, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Case {
    let (pa, pb) = (Param::new(a), Param::new(b));
    let (qa, qb) = (pa.clone(), pb.clone());
    Case {
        params: vec![(pa, Role::Checked), (pb, Role::Checked)],
        f: Box::new(move |g| {
            let a = g.param(&qa)?;
            let b = g.param(&qb)?;
            op(g, a, b)
        }),
    }
}

/// Names of every case, in suite order.
pub const CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "exp",
    "log",
    "abs",
    "sqrt",
    "powf",
    "scale",
    "add_scalar",
    "clamp_min",
    "matmul",
    "conv2d",
    "conv2d_strided",
    "max_pool2d",
    "sum_axes",
    "mean_axes",
    "sum_all",
    "mean_all",
    "max_axis",
    "pad",
    "slice",
    "reshape",
    "broadcast",
    "permute",
    "conv_layer",
    "batch_norm_train",
    "batch_norm_eval",
    "linear",
    "global_avg_pool",
    "basic_block",
    "basic_block_pre",
    "bottleneck_block",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "kl_distillation",
    "kl_from_logits",
    "kl_teacher_grad",
    "attention_map",
    "attention_mse",
    "attention_features",
    "total_loss",
    "ddnn_ekd_objective",
    "ddnn_hard_objective",
];

fn build(name: &str, rng: &mut ChaCha8Rng) -> Result<Case> {
    let s = [2, 3, 4];
    Ok(match name {
        "add" => binary(normal(rng, &s), normal(rng, &s), Graph::add),
        "sub" => binary(normal(rng, &s), normal(rng, &s), Graph::sub),
        "mul" => binary(normal(rng, &s), normal(rng, &s), Graph::mul),
        "div" => binary(normal(rng, &s), uniform(rng, &s, 0.5, 2.0), Graph::div),
        "neg" => unary(normal(rng, &s), Graph::neg),
        "relu" => unary(away_from_zero(rng, &s, 0.1), Graph::relu),
        "exp" => unary(normal(rng, &s), Graph::exp),
        "log" => unary(uniform(rng, &s, 0.2, 3.0), Graph::log),
        "abs" => unary(away_from_zero(rng, &s, 0.1), Graph::abs),
        "sqrt" => unary(uniform(rng, &s, 0.2, 3.0), Graph::sqrt),
        "powf" => unary(uniform(rng, &s, 0.2, 3.0), |g, x| g.powf(x, -0.5)),
        "scale" => unary(normal(rng, &s), |g, x| g.scale(x, -1.7)),
        "add_scalar" => unary(normal(rng, &s), |g, x| g.add_scalar(x, 0.3)),
        "clamp_min" => unary(away_from_zero(rng, &s, 0.1).map(|v| v + 0.2), |g, x| {
            g.clamp_min(x, 0.2)
        }),
        "matmul" => binary(normal(rng, &[3, 4]), normal(rng, &[4, 5]), Graph::matmul),
        "conv2d" => binary(normal(rng, &[2, 3, 5, 5]), normal(rng, &[4, 3, 3, 3]), |g, x, w| {
            g.conv2d(x, w, 1, 1)
        }),
        "conv2d_strided" => binary(normal(rng, &[2, 2, 6, 6]), normal(rng, &[3, 2, 3, 3]), |g, x, w| {
            g.conv2d(x, w, 2, 1)
        }),
        "max_pool2d" => unary(distinct(rng, &[2, 2, 5, 5]), |g, x| g.max_pool2d(x, 3, 2, 1)),
        "sum_axes" => unary(normal(rng, &s), |g, x| g.sum_axes(x, &[0, 2], true)),
        "mean_axes" => unary(normal(rng, &s), |g, x| g.mean_axes(x, &[1], false)),
        "sum_all" => unary(normal(rng, &s), Graph::sum_all),
        "mean_all" => unary(normal(rng, &s), Graph::mean_all),
        "max_axis" => unary(distinct(rng, &s), |g, x| g.max_axis(x, 2, false)),
        "pad" => unary(normal(rng, &s), |g, x| g.pad(x, &[(0, 0), (1, 2), (2, 0)])),
        "slice" => unary(normal(rng, &s), |g, x| g.slice(x, &[(0, 2), (1, 3), (0, 3)])),
        "reshape" => unary(normal(rng, &s), |g, x| g.reshape(x, &[6, 4])),
        "broadcast" => unary(normal(rng, &[2, 1, 4]), |g, x| g.broadcast(x, &[2, 3, 4])),
        "permute" => unary(normal(rng, &s), |g, x| g.permute(x, &[2, 0, 1])),
        "conv_layer" => {
            let conv = Conv2d::from_weight(normal(rng, &[3, 2, 3, 3]), Some(normal(rng, &[3])), 1, 1);
            let x = Param::new(normal(rng, &[2, 2, 4, 4]));
            let mut params = trainable(|f| conv.visit("", f));
            params.push((x.clone(), Role::Checked));
            Case {
                params,
                f: Box::new(move |g| {
                    let x = g.param(&x)?;
                    conv.forward(g, x)
                }),
            }
        }
        "batch_norm_train" | "batch_norm_eval" => {
            let bn = BatchNorm::<f64>::new(3);
            bn.gamma.set_value(uniform(rng, &[3], 0.5, 1.5));
            bn.beta.set_value(normal(rng, &[3]));
            bn.stats[0].mean.set_value(normal(rng, &[3]));
            bn.stats[0].var.set_value(uniform(rng, &[3], 0.5, 2.0));
            let pass = if name == "batch_norm_train" {
                Pass::train()
            } else {
                Pass::eval()
            };
            let x = Param::new(normal(rng, &[4, 3, 2, 2]));
            let mut params = trainable(|f| bn.visit("", f));
            params.push((x.clone(), Role::Checked));
            Case {
                params,
                f: Box::new(move |g| {
                    let x = g.param(&x)?;
                    bn.forward(g, x, pass)
                }),
            }
        }
        "linear" => {
            let lin = Linear::<f64>::new(5, 3, rng);
            let x = Param::new(normal(rng, &[4, 5]));
            let mut params = trainable(|f| lin.visit("", f));
            params.push((x.clone(), Role::Checked));
            Case {
                params,
                f: Box::new(move |g| {
                    let x = g.param(&x)?;
                    lin.forward(g, x)
                }),
            }
        }
        "global_avg_pool" => unary(normal(rng, &[2, 3, 3, 3]), global_avg_pool),
        "basic_block" | "basic_block_pre" | "bottleneck_block" => {
            let order = if name == "basic_block_pre" {
                BlockOrder::PreActivation
            } else {
                BlockOrder::PostActivation
            };
            let block = if name == "bottleneck_block" {
                ResidualBlock::bottleneck(4, 2, 2, StrideAt::Conv3x3, order, 1, rng)
            } else {
                ResidualBlock::basic(2, 3, 2, order, 1, rng)
            };
            let x = Param::new(normal(rng, &[3, block.in_channels(), 4, 4]));
            let mut params = trainable(|f| block.visit("", f));
            params.push((x.clone(), Role::Checked));
            Case {
                params,
                f: Box::new(move |g| {
                    let x = g.param(&x)?;
                    block.forward(g, x, Pass::train())
                }),
            }
        }
        "softmax" => unary(normal(rng, &[3, 4]), softmax),
        "log_softmax" => unary(normal(rng, &[3, 4]), log_softmax),
        "cross_entropy" => {
            let y = labels(rng, 5, 4);
            let p = Param::new(normal(rng, &[5, 4]));
            let q = p.clone();
            Case {
                params: vec![(p, Role::Checked)],
                f: Box::new(move |g| {
                    let x = g.param(&q)?;
                    cross_entropy(g, x, &y)
                }),
            }
        }
        "kl_distillation" => {
            let (pt, ps) = (Param::new(probs(rng, 4, 3)), Param::new(probs(rng, 4, 3)));
            let (qt, qs) = (pt.clone(), ps.clone());
            Case {
                params: vec![(pt, Role::Detached), (ps, Role::Checked)],
                f: Box::new(move |g| {
                    let t = g.param(&qt)?;
                    let s = g.param(&qs)?;
                    kl_distillation(g, t, s, false)
                }),
            }
        }
        "kl_from_logits" | "kl_teacher_grad" => {
            let teacher_grad = name == "kl_teacher_grad";
            let (pt, ps) = (Param::new(normal(rng, &[4, 3])), Param::new(normal(rng, &[4, 3])));
            let (qt, qs) = (pt.clone(), ps.clone());
            let role = if teacher_grad { Role::Checked } else { Role::Detached };
            Case {
                params: vec![(pt, role), (ps, Role::Checked)],
                f: Box::new(move |g| {
                    let t = g.param(&qt)?;
                    let s = g.param(&qs)?;
                    kl_from_logits(g, t, s, teacher_grad)
                }),
            }
        }
        "attention_map" => unary(away_from_zero(rng, &[2, 3, 3, 3], 0.1), attention_map),
        "attention_mse" => {
            let (a_s, a_t) = (
                Param::new(normal(rng, &[2, 1, 3, 3])),
                Param::new(normal(rng, &[2, 1, 3, 3])),
            );
            let (qs, qt) = (a_s.clone(), a_t.clone());
            Case {
                params: vec![(a_s, Role::Checked), (a_t, Role::Detached)],
                f: Box::new(move |g| {
                    let s = g.param(&qs)?;
                    let t = g.param(&qt)?;
                    attention_mse(g, s, t, false)
                }),
            }
        }
        "attention_features" => {
            let fs = Param::new(away_from_zero(rng, &[2, 3, 2, 2], 0.1));
            let ft = Param::new(away_from_zero(rng, &[2, 4, 2, 2], 0.1));
            let (qs, qt) = (fs.clone(), ft.clone());
            Case {
                params: vec![(fs, Role::Checked), (ft, Role::Detached)],
                f: Box::new(move |g| {
                    let s = g.param(&qs)?;
                    let t = g.param(&qt)?;
                    let a_s = attention_map(g, s)?;
                    let a_t = attention_map(g, t)?;
                    attention_mse(g, a_s, a_t, false)
                }),
            }
        }
        "total_loss" => total_loss_case(rng),
        "ddnn_ekd_objective" => ddnn_case(rng, Regime::DdnnEkd)?,
        "ddnn_hard_objective" => ddnn_case(rng, Regime::DdnnHard)?,
        other => return Err(Error::Invalid(format!("unknown gradient-check case {other:?}"))),
    })
}

/// The weighted combination of full-net CE and, for two sub-nets, CE, KL
/// and attention terms, from raw logits and features. The teacher side of KL
/// and attention is a separate detached input, since a detached path has no
/// finite-difference counterpart.
fn total_loss_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, m, k) = (4, 3, 2);
    let y = labels(rng, n, m);
    let logits: Vec<Param<f64>> = (0..=k).map(|_| Param::new(normal(rng, &[n, m]))).collect();
    let feats: Vec<Param<f64>> = (0..=k)
        .map(|_| Param::new(away_from_zero(rng, &[n, 2, 2, 2], 0.1)))
        .collect();
    let teacher = Param::new(normal(rng, &[n, m]));
    let weights = EkdWeights {
        w: vec![0.7, 1.3],
        alpha: vec![0.05, 0.2],
    };
    let mut params = vec![
        (logits[0].clone(), Role::Checked),
        (teacher.clone(), Role::Detached),
        (feats[0].clone(), Role::Detached),
    ];
    for i in 1..=k {
        params.push((logits[i].clone(), Role::Checked));
        params.push((feats[i].clone(), Role::Checked));
    }
    Case {
        params,
        f: Box::new(move |g| {
            let l: Vec<Var> = logits.iter().map(|p| g.param(p)).collect::<Result<_>>()?;
            let f: Vec<Var> = feats.iter().map(|p| g.param(p)).collect::<Result<_>>()?;
            let t = g.param(&teacher)?;
            let at = attention_map(g, f[0])?;
            let mut terms = LossTerms {
                ce_full: cross_entropy(g, l[0], &y)?,
                ce_sub: Vec::new(),
                kl_sub: Vec::new(),
                att_sub: Vec::new(),
            };
            for i in 1..=k {
                terms.ce_sub.push(cross_entropy(g, l[i], &y)?);
                terms.kl_sub.push(kl_from_logits(g, t, l[i], false)?);
                let a_s = attention_map(g, f[i])?;
                terms.att_sub.push(attention_mse(g, a_s, at, false)?);
            }
            terms.total(g, &weights, Combination::default())
        }),
    }
}

/// The full training objective of a tiny DDNN with respect to every weight.
/// Distillation gradients reach the teacher here so the objective is an
/// ordinary function of the weights.
fn ddnn_case(rng: &mut ChaCha8Rng, regime: Regime) -> Result<Case> {
    let mut cfg = NetConfig::resnet_cifar(&[2, 2], 3);
    cfg.stage_channels = vec![2, 3];
    cfg.input_shape = [2, 4, 4];
    let opts = DdnnOptions {
        seed: rng.gen(),
        ..DdnnOptions::default()
    };
    let net = Ddnn::<f64>::build(cfg, vec![SubnetSpec::new(&[1, 1]), SubnetSpec::private(&[2, 1])], &opts)?;
    let x = normal(rng, &[4, 2, 4, 4]);
    let y = labels(rng, 4, 3);
    let mut train = TrainConfig::new(regime, 2);
    train.teacher_grad = true;
    train.weights = EkdWeights {
        w: vec![1.0, 0.5],
        alpha: vec![0.1, 0.3],
    };
    let params = net.trainable_params().into_iter().map(|p| (p, Role::Checked)).collect();
    Ok(Case {
        params,
        f: Box::new(move |g| {
            let x = g.constant(x.clone())?;
            Ok(build_objective(g, &net, x, &y, &train)?.total)
        }),
    })
}

/// Scalar objective: the output itself, or its contraction with `proj`.
fn evaluate(case: &Case, proj: &RefCell<Option<Tensor<f64>>>, seed: u64, backward: bool) -> Result<f64> {
    let mut g = Graph::new();
    let out = (case.f)(&mut g)?;
    let loss = if g.value(out).numel() == 1 && g.shape(out).iter().all(|&d| d == 1) {
        out
    } else {
        let mut slot = proj.borrow_mut();
        let r = slot.get_or_insert_with(|| normal(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), g.shape(out)));
        let r = g.constant(r.clone())?;
        let prod = g.mul(out, r)?;
        g.sum_all(prod)?
    };
    let v = g.value(loss).item()?;
    if backward {
        g.backward(loss)?;
    }
    Ok(v)
}

fn check_once(case: &Case, seed: u64) -> Result<(f64, f64)> {
    let proj = RefCell::new(None);
    for (p, _) in &case.params {
        p.zero_grad();
    }
    evaluate(case, &proj, seed, true)?;
    let mut worst = 0.0f64;
    let mut leak = 0.0f64;
    for (p, role) in &case.params {
        let analytic = p.grad_or_zeros();
        if *role == Role::Detached {
            leak = leak.max(analytic.data().iter().fold(0.0, |m, v| m.max(v.abs())));
            continue;
        }
        let base = p.value().clone();
        let mut probe = base.clone();
        for i in 0..base.numel() {
            let a = analytic.data()[i];
            let mut best = f64::INFINITY;
            for h in STEPS {
                let orig = base.data()[i];
                probe.data_mut()[i] = orig + h;
                p.set_value(probe.clone());
                let plus = evaluate(case, &proj, seed, false)?;
                probe.data_mut()[i] = orig - h;
                p.set_value(probe.clone());
                let minus = evaluate(case, &proj, seed, false)?;
                probe.data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                best = best.min((a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR));
                if best <= TOLERANCE {
                    break;
                }
            }
            worst = worst.max(best);
        }
        p.set_value(base);
    }
    Ok((worst, leak))
}

/// Runs one case over `seeds` seeds.
pub fn run_case(name: &'static str, seeds: u64) -> Result<CaseReport> {
    let mut report = CaseReport {
        name,
        seeds,
        max_rel_err: 0.0,
        worst_seed: 0,
        detached_leak: 0.0,
    };
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let case = build(name, &mut rng)?;
        let (err, leak) = check_once(&case, seed)?;
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_seed = seed;
        }
        report.detached_leak = report.detached_leak.max(leak);
    }
    Ok(report)
}

/// Every case whose name contains `filter` (all when `None`).
pub fn run_suite(filter: Option<&str>, seeds: u64) -> Result<Vec<CaseReport>> {
    CASES
        .iter()
        .filter(|n| filter.is_none_or(|f| n.contains(f)))
        .map(|n| run_case(n, seeds))
        .collect()
}
