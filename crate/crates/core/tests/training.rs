use ddnn_core::data::{make_batch, Dataset, LabeledImage, SyntheticSpec};
use ddnn_core::ddnn::{Ddnn, DdnnOptions, NetConfig, SubnetSpec};
use ddnn_core::ekd::{cross_entropy, EkdWeights};
use ddnn_core::layers::Mode;
use ddnn_core::tensor::zero_grad;
use ddnn_core::trainer::{
    build_objective, evaluate, run_experiment, train_step, Artifacts, Experiment, Regime, SgdState, TrainConfig,
    METRICS_HEADER,
};
use ddnn_core::{Graph, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn net_config() -> NetConfig {
    let mut cfg = NetConfig::resnet_cifar(&[3, 3, 3], 4);
    cfg.stage_channels = vec![4, 6, 8];
    cfg.input_shape = [3, 8, 8];
    cfg
}

fn build<T: Scalar>(seed: u64) -> Ddnn<T> {
    let opts = DdnnOptions {
        seed,
        ..DdnnOptions::default()
    };
    Ddnn::build(
        net_config(),
        vec![SubnetSpec::new(&[3, 2, 2]), SubnetSpec::new(&[1, 1, 1])],
        &opts,
    )
    .unwrap()
}

fn batch<T: Scalar>(seed: u64, n: usize) -> (Tensor<T>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * 3 * 64).map(|_| StandardNormal.sample(&mut rng)).collect();
    let labels = (0..n).map(|i| (i * 7 + seed as usize) % 4).collect();
    (Tensor::from_f64(vec![n, 3, 8, 8], &data).unwrap(), labels)
}

fn snapshot<T: Scalar>(net: &Ddnn<T>) -> Vec<Vec<T>> {
    net.named_params()
        .iter()
        .map(|(_, p)| p.value().data().to_vec())
        .collect()
}

fn train_cfg(regime: Regime) -> TrainConfig {
    let mut cfg = TrainConfig::new(regime, 2);
    cfg.weights = EkdWeights::uniform(2, 1.0, 1e-3);
    cfg
}

fn logits<T: Scalar>(net: &Ddnn<T>, k: usize, x: &Tensor<T>) -> Tensor<T> {
    let mut g = Graph::new();
    let x = g.constant(x.clone()).unwrap();
    let out = net.forward_net(&mut g, k, x, Mode::Eval).unwrap();
    g.value(out.logits).clone()
}

/// Plain single-net SGD written out by hand.
fn reference_step(
    net: &Ddnn<f32>,
    x: Tensor<f32>,
    labels: &[usize],
    velocity: &mut [Vec<f32>],
    cfg: &TrainConfig,
    lr: f64,
) {
    let params = net.trainable_params();
    for p in &params {
        p.zero_grad();
    }
    let mut g = Graph::new();
    let x = g.constant(x).unwrap();
    let out = net.forward_net(&mut g, 0, x, Mode::Train).unwrap();
    let loss = cross_entropy(&mut g, out.logits, labels).unwrap();
    g.backward(loss).unwrap();
    let (lr, mu, wd) = (lr as f32, cfg.momentum as f32, cfg.weight_decay as f32);
    for (p, v) in params.iter().zip(velocity.iter_mut()) {
        let grad = p.grad_or_zeros();
        let mut w = p.value_mut();
        for ((vi, wi), gi) in v.iter_mut().zip(w.data_mut()).zip(grad.data()) {
            *vi = mu * *vi + (gi + wd * *wi);
            *wi -= lr * *vi;
        }
    }
}

#[test]
fn individual_regime_matches_a_plain_trainer_bit_exactly() {
    let ddnn = build::<f32>(3);
    let plain = Ddnn::<f32>::plain(net_config(), 3).unwrap();
    let plain_params: Vec<(String, Vec<f32>)> = plain
        .named_params()
        .iter()
        .map(|(n, p)| (n.clone(), p.value().data().to_vec()))
        .collect();
    let shared: Vec<(String, Vec<f32>)> = ddnn
        .named_params()
        .iter()
        .map(|(n, p)| (n.clone(), p.value().data().to_vec()))
        .collect();
    assert_eq!(plain_params, shared, "same seed must give the same initial weights");

    let cfg = train_cfg(Regime::Individual);
    let mut sgd = SgdState::new(&ddnn.trainable_params());
    let mut velocity: Vec<Vec<f32>> = plain.trainable_params().iter().map(|p| vec![0.0; p.numel()]).collect();
    for step in 0..10 {
        let (x, y) = batch::<f32>(step, 8);
        let out = train_step(&ddnn, x.clone(), &y, &cfg, 0.1, &mut sgd).unwrap();
        assert_eq!(out.report.k(), 0);
        reference_step(&plain, x, &y, &mut velocity, &cfg, 0.1);
        assert_eq!(snapshot(&ddnn), snapshot(&plain), "diverged at step {step}");
    }
}

#[test]
fn zero_weight_ekd_is_hard_label_training() {
    let a = build::<f32>(5);
    let b = build::<f32>(5);
    let mut ekd = train_cfg(Regime::DdnnEkd);
    ekd.weights = EkdWeights::zero(2);
    let hard = train_cfg(Regime::DdnnHard);
    let (mut sa, mut sb) = (
        SgdState::new(&a.trainable_params()),
        SgdState::new(&b.trainable_params()),
    );
    for step in 0..6 {
        let (x, y) = batch::<f32>(step, 8);
        let ra = train_step(&a, x.clone(), &y, &ekd, 0.1, &mut sa).unwrap().report;
        let rb = train_step(&b, x, &y, &hard, 0.1, &mut sb).unwrap().report;
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        assert_eq!(snapshot(&a), snapshot(&b));
        assert!(rb.kl_sub.iter().chain(&rb.att_sub).all(|&v| v == 0.0));
    }
}

#[test]
fn report_total_matches_the_recombined_parts_every_step() {
    let net = build::<f32>(7);
    for regime in [Regime::DdnnEkd, Regime::DdnnHard] {
        let mut cfg = train_cfg(regime);
        for unnormalized in [false, true] {
            cfg.combination.unnormalized_subnet_ce = unnormalized;
            let mut sgd = SgdState::new(&net.trainable_params());
            for step in 0..5 {
                let (x, y) = batch::<f32>(step, 8);
                let r = train_step(&net, x, &y, &cfg, 0.05, &mut sgd).unwrap().report;
                let again = r.recombine(&cfg.effective_weights(2), cfg.combination).unwrap();
                assert!((again - r.total).abs() <= 1e-6, "{again} vs {}", r.total);
            }
        }
    }
}

#[test]
fn one_step_moves_every_net() {
    let net = build::<f32>(11);
    let (probe, _) = batch::<f32>(99, 4);
    let before: Vec<Tensor<f32>> = (0..3).map(|k| logits(&net, k, &probe)).collect();
    let (x, y) = batch::<f32>(0, 8);
    let cfg = train_cfg(Regime::DdnnEkd);
    train_step(&net, x, &y, &cfg, 0.1, &mut SgdState::new(&net.trainable_params())).unwrap();
    for (k, b) in before.iter().enumerate() {
        assert!(logits(&net, k, &probe).max_abs_diff(b) > 0.0, "net {k} unchanged");
    }
}

#[test]
fn distillation_never_reaches_teacher_only_weights() {
    let (x, y) = batch::<f64>(1, 6);
    for teacher_grad in [false, true] {
        let net = build::<f64>(13);
        let mut cfg = train_cfg(Regime::DdnnEkd);
        cfg.teacher_grad = teacher_grad;
        zero_grad(&net.trainable_params());
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let obj = build_objective(&mut g, &net, xv, &y, &cfg).unwrap();
        // isolate the distillation terms
        let mut acc = None;
        for (&kl, &att) in obj.terms.kl_sub.iter().zip(&obj.terms.att_sub) {
            let s = g.add(kl, att).unwrap();
            acc = Some(match acc {
                None => s,
                Some(a) => g.add(a, s).unwrap(),
            });
        }
        g.backward(acc.unwrap()).unwrap();
        // stage 2, block 3 is run only by the full net
        let teacher_only: Vec<_> = net
            .named_params()
            .into_iter()
            .filter(|(n, p)| n.starts_with("stages.2.2.") && p.requires_grad())
            .collect();
        assert!(!teacher_only.is_empty());
        let leak = teacher_only
            .iter()
            .map(|(_, p)| p.grad_or_zeros().data().iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .fold(0.0, f64::max);
        if teacher_grad {
            assert!(leak > 0.0);
        } else {
            assert_eq!(leak, 0.0);
        }
    }
}

#[test]
fn combined_backward_equals_sum_of_per_term_backwards() {
    let (x, y) = batch::<f64>(2, 6);
    let net = build::<f64>(17);
    let cfg = train_cfg(Regime::DdnnEkd);
    let params = net.trainable_params();

    zero_grad(&params);
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let obj = build_objective(&mut g, &net, xv, &y, &cfg).unwrap();
    g.backward(obj.total).unwrap();
    let combined: Vec<Tensor<f64>> = params.iter().map(|p| p.grad_or_zeros()).collect();

    // one fresh graph and backward per weighted term, gradients accumulating
    zero_grad(&params);
    let k = 2.0;
    let n_terms = 1 + 3 * 2;
    for term in 0..n_terms {
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let obj = build_objective(&mut g, &net, xv, &y, &cfg).unwrap();
        let t = &obj.terms;
        let (var, coef) = match term {
            0 => (t.ce_full, 1.0),
            1 | 2 => (t.ce_sub[term - 1], 1.0 / k),
            3 | 4 => (t.kl_sub[term - 3], cfg.weights.w[term - 3] / k),
            _ => (t.att_sub[term - 5], cfg.weights.alpha[term - 5] / k),
        };
        let scaled = g.scale(var, coef).unwrap();
        g.backward(scaled).unwrap();
    }
    for (p, c) in params.iter().zip(&combined) {
        let s = p.grad_or_zeros();
        for (a, b) in s.data().iter().zip(c.data()) {
            assert!((a - b).abs() <= 1e-10 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn same_seed_gives_identical_loss_sequences() {
    let run = || {
        let net = build::<f32>(21);
        let cfg = train_cfg(Regime::DdnnEkd);
        let mut sgd = SgdState::new(&net.trainable_params());
        (0..5)
            .map(|s| {
                let (x, y) = batch::<f32>(s, 8);
                train_step(&net, x, &y, &cfg, 0.1, &mut sgd)
                    .unwrap()
                    .report
                    .total
                    .to_bits()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn non_finite_loss_names_the_term() {
    let net = build::<f32>(1);
    let classifier = net
        .named_params()
        .into_iter()
        .find(|(n, _)| n == "classifier.bias")
        .unwrap()
        .1;
    classifier.set_value(Tensor::full(vec![4], f32::NAN));
    let (x, y) = batch::<f32>(0, 8);
    let cfg = train_cfg(Regime::DdnnEkd);
    let err = train_step(&net, x, &y, &cfg, 0.1, &mut SgdState::new(&net.trainable_params()))
        .unwrap_err()
        .to_string();
    assert!(err.contains("ce_full"), "{err}");
}

#[test]
fn evaluation_is_pure_and_untrained_nets_sit_at_chance() {
    let mut cfg = net_config();
    cfg.num_classes = 10;
    let net = Ddnn::<f32>::build(cfg, vec![SubnetSpec::new(&[2, 2, 2])], &DdnnOptions::default()).unwrap();
    // pixels independent of labels, so any fixed predictor is right 1 time in 10
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let images = (0..1000)
        .map(|i| LabeledImage {
            pixels: (0..3 * 64)
                .map(|_| rand::Rng::gen_range(&mut rng, 0.0f32..1.0))
                .collect(),
            label: i % 10,
            coarse_label: None,
        })
        .collect();
    let data = Dataset {
        shape: [3, 8, 8],
        num_classes: 10,
        images,
    };
    let before = snapshot(&net);
    let a = evaluate(&net, &data, None, 64).unwrap();
    let b = evaluate(&net, &data, None, 64).unwrap();
    assert_eq!(a, b);
    assert_eq!(snapshot(&net), before);
    for e in &a {
        assert!((e.top1_err - 90.0).abs() <= 3.0, "{e:?}");
        assert!((0.0..=100.0).contains(&e.top1_err));
    }
    assert!(evaluate(&net, &data.clone().truncated(0), None, 64).is_err());
}

#[test]
fn smoke_runs_write_one_schema_for_every_regime() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::new(4, (8, 8), 2);
    let train = spec.generate(8, 0).unwrap();
    let test = spec.generate(4, 1).unwrap();
    let mut headers = Vec::new();
    for regime in [Regime::Individual, Regime::DdnnHard, Regime::DdnnEkd] {
        let mut tc = TrainConfig::new(regime, 1);
        tc.epochs = 1;
        tc.batch_size = 16;
        tc.augment = false;
        let exp = Experiment {
            net: net_config(),
            subnets: vec![SubnetSpec::new(&[2, 2, 1])],
            ddnn: DdnnOptions::default(),
            train: tc,
        };
        let out_dir = dir.path().join(regime.as_str());
        let art = Artifacts {
            dir: out_dir.clone(),
            metadata: Default::default(),
        };
        let out = run_experiment(&exp, &train, &test, Some(&art)).unwrap();
        assert!(!out.rows.is_empty());
        let csv = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
        let mut lines = csv.lines();
        headers.push(lines.next().unwrap().to_string());
        assert_eq!(lines.count(), out.rows.len());
        assert!(out_dir.join("best_sub1.ckpt").exists());
    }
    assert!(headers.iter().all(|h| h == METRICS_HEADER));
}

#[test]
fn batches_feed_training_without_touching_labels() {
    let data = SyntheticSpec::new(4, (8, 8), 0).generate(3, 0).unwrap();
    let (x, y) = make_batch::<f32>(&data, &[0, 5, 2], None, None).unwrap();
    assert_eq!(x.shape(), &[3, 3, 8, 8]);
    assert_eq!(y, vec![0, 1, 2]);
}
