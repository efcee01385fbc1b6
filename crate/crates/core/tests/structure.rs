use ddnn_core::accounting::{count_flops, count_params};
use ddnn_core::ddnn::{ClassifierMode, Ddnn, DdnnOptions, Family, NetConfig, SubnetSpec};
use ddnn_core::layers::StrideAt;

fn table_rows() -> Vec<(&'static str, NetConfig, f64, f64)> {
    let basic = |b: &[usize]| NetConfig::resnet_imagenet(Family::ResnetBasic, b);
    let bottle = |b: &[usize]| NetConfig::resnet_imagenet(Family::ResnetBottleneck, b);
    vec![
        ("ResNet-18", basic(&[2, 2, 2, 2]), 11.7e6, 1.8e9),
        ("ResNet-34", basic(&[3, 4, 6, 3]), 21.8e6, 3.6e9),
        ("ResNet-50", bottle(&[3, 4, 6, 3]), 25.6e6, 3.8e9),
        ("ResNet-26", bottle(&[2, 2, 2, 2]), 16.0e6, 2.3e9),
        ("ResNet-32", bottle(&[2, 3, 3, 2]), 17.4e6, 2.8e9),
        ("ResNet-38", bottle(&[3, 3, 3, 3]), 21.9e6, 3.2e9),
        ("ResNet-41", bottle(&[3, 4, 4, 2]), 18.9e6, 3.4e9),
        ("ResNet-44", bottle(&[3, 4, 4, 3]), 23.3e6, 3.7e9),
    ]
}

#[test]
fn imagenet_param_and_flop_columns() {
    for (name, cfg, params, flops) in table_rows() {
        assert_eq!(cfg.name(), name);
        let p = count_params(&cfg) as f64;
        let f = count_flops(&cfg) as f64;
        println!("{name}: {:.2}M params, {:.3}G MACs", p / 1e6, f / 1e9);
        assert!((p - params).abs() / params <= 0.01, "{name} params {p}");
        if name == "ResNet-50" {
            // the published figure belongs to the stride-on-1×1 design
            assert!((f - flops).abs() / flops > 0.05);
            let mut alt = cfg.clone();
            alt.stride_at = StrideAt::Conv1x1;
            let f = count_flops(&alt) as f64;
            assert!((f - flops).abs() / flops <= 0.05, "{name} flops {f}");
        } else {
            assert!((f - flops).abs() / flops <= 0.05, "{name} flops {f}");
        }
    }
}

#[test]
fn closed_form_matches_registry() {
    let cfgs = [
        NetConfig::resnet_cifar(&[3, 3, 3], 10),
        NetConfig::resnet_cifar(&[3, 2, 2], 100),
        NetConfig::vgg_cifar(&[1, 1, 2, 2, 2], 10),
        NetConfig::resnet_imagenet(Family::ResnetBasic, &[2, 2, 2, 2]),
        NetConfig::resnet_imagenet(Family::ResnetBottleneck, &[2, 3, 3, 2]),
        {
            let mut c = NetConfig::resnet_cifar(&[2, 2, 2], 10);
            c.block_order = ddnn_core::layers::BlockOrder::PreActivation;
            c
        },
        {
            let mut c = NetConfig::resnet_imagenet(Family::ResnetBottleneck, &[1, 2, 1]);
            c.stage_channels = vec![8, 16, 32];
            c.input_shape = [3, 32, 32];
            c.block_order = ddnn_core::layers::BlockOrder::PreActivation;
            c
        },
    ];
    for cfg in cfgs {
        let net = Ddnn::<f32>::plain(cfg.clone(), 1).unwrap();
        let brute: u64 = net
            .named_params()
            .iter()
            .filter(|(_, p)| p.requires_grad())
            .map(|(_, p)| p.numel() as u64)
            .sum();
        assert_eq!(brute, count_params(&cfg), "{cfg:?}");
    }
}

#[test]
fn ddnn_shares_every_weight() {
    let cfg = NetConfig::resnet_cifar(&[3, 3, 3], 10);
    let subs = vec![SubnetSpec::new(&[3, 2, 2]), SubnetSpec::new(&[2, 2, 1])];
    let d = Ddnn::<f32>::build(cfg.clone(), subs, &DdnnOptions::default()).unwrap();
    assert_eq!(d.distinct_trainable_scalars(), count_params(&cfg));

    let subs = vec![SubnetSpec::private(&[3, 2, 2]), SubnetSpec::new(&[2, 2, 1])];
    let d = Ddnn::<f32>::build(cfg.clone(), subs, &DdnnOptions::default()).unwrap();
    assert_eq!(d.distinct_trainable_scalars(), count_params(&cfg) + 64 * 10 + 10);
    assert_eq!(d.subnets()[0].classifier_mode, ClassifierMode::Private);
}

#[test]
fn extracted_subnet_is_resnet18_shaped() {
    let cfg = NetConfig::resnet_imagenet(Family::ResnetBasic, &[3, 4, 6, 3]);
    let d = Ddnn::<f32>::build(cfg, vec![SubnetSpec::new(&[2, 2, 2, 2])], &DdnnOptions::default()).unwrap();
    let sub = d.extract(1).unwrap();
    assert_eq!(sub.config().name(), "ResNet-18");
    assert_eq!(sub.distinct_trainable_scalars(), count_params(sub.config()));
    let again = sub.extract(0).unwrap();
    assert_eq!(again.config(), sub.config());
    let a: Vec<_> = sub
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.value().clone()))
        .collect();
    let b: Vec<_> = again
        .named_params()
        .into_iter()
        .map(|(n, p)| (n, p.value().clone()))
        .collect();
    assert!(a == b);
}
