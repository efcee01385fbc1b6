//! Plain-text run configuration.
//!
//! One `key = value` pair per line; `#` starts a comment. Every key has a
//! default, unknown keys are rejected, and `--set key=value` overrides are
//! applied after the file. [`RunConfig::resolved_text`] lists every effective
//! value and parses back to the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::fnv1a64;
use crate::data::{load_cifar, CifarVariant, Dataset, SyntheticSpec};
use crate::ddnn::{BnStats, ClassifierMode, DdnnOptions, Family, NetConfig, Stem, SubnetSpec, TapPolicy};
use crate::ekd::{Combination, EkdWeights, DEFAULT_ATT_WEIGHT, DEFAULT_KL_WEIGHT};
use crate::error::{Error, Result};
use crate::layers::{BlockOrder, StrideAt};
use crate::trainer::{Experiment, LrSchedule, Regime, TrainConfig};

/// Environment variable consulted when `data_dir` is empty.
pub const DATA_DIR_ENV: &str = "DDNN_DATA_DIR";

/// `(key, default, description)` for every accepted key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("family", "resnet-basic", "resnet-basic | resnet-bottleneck | vgg"),
    ("stage_blocks", "3,3,3", "blocks per stage of the full net"),
    (
        "stage_channels",
        "16,32,64",
        "width per stage (inner width for bottlenecks)",
    ),
    ("num_classes", "10", "number of classes"),
    ("input_shape", "3,32,32", "C,H,W of one image"),
    ("stem", "small", "small (3x3) | large (7x7 + max pool)"),
    ("block_order", "post", "post | pre activation"),
    ("stride_at", "conv3x3", "bottleneck stride placement: conv1x1 | conv3x3"),
    ("subnets", "", "sub-net block prefixes, e.g. 3,2,2;2,2,2"),
    ("classifier_mode", "shared", "shared | private, or one per sub-net"),
    ("tap_stages", "auto", "auto (split stages) or 1-based stage list"),
    ("bn_stats", "shared", "shared | per_net running statistics"),
    ("regime", "ddnn_ekd", "individual | ddnn_hard | ddnn_ekd"),
    ("kl_weight", "", "KL weight w_k, one value or one per sub-net"),
    (
        "att_weight",
        "",
        "attention weight alpha_k, one value or one per sub-net",
    ),
    ("teacher_grad", "false", "let distillation gradients reach the teacher"),
    (
        "unnormalized_subnet_ce",
        "false",
        "weight sub-net CE by 1 instead of 1/K",
    ),
    ("reforward_each_net", "false", "re-run every net from the input"),
    ("lr", "0.1", "initial learning rate"),
    ("lr_drops", "150,250", "epochs at which the rate is divided"),
    ("lr_factor", "10", "divisor applied at each drop"),
    ("momentum", "0.9", "SGD momentum"),
    ("weight_decay", "0.0001", "L2 weight decay"),
    ("batch_size", "128", "minibatch size"),
    ("epochs", "300", "training epochs"),
    ("seed", "0", "seed for initialization, shuffling and augmentation"),
    ("augment", "true", "pad-and-crop plus mirror augmentation"),
    (
        "normalize",
        "true",
        "per-channel normalization fitted on the train split",
    ),
    (
        "deterministic",
        "false",
        "record zero wall time so metrics are reproducible",
    ),
    ("checked", "false", "abort on non-finite values"),
    ("dataset", "cifar10", "synthetic | cifar10 | cifar100"),
    (
        "data_dir",
        "",
        "directory with CIFAR binaries (falls back to DDNN_DATA_DIR)",
    ),
    ("train_limit", "0", "use at most this many training images (0 = all)"),
    ("test_limit", "0", "use at most this many test images (0 = all)"),
    (
        "synthetic_train_per_class",
        "500",
        "synthetic training images per class",
    ),
    ("synthetic_test_per_class", "100", "synthetic test images per class"),
    ("synthetic_noise", "0.6", "pixel noise std of synthetic images"),
    ("synthetic_seed", "1000", "seed of the synthetic class templates"),
    ("out_dir", "runs/ddnn", "output directory"),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
    Cifar100,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub kind: DatasetKind,
    pub data_dir: Option<PathBuf>,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    pub synthetic: SyntheticSpec,
    pub synthetic_train_per_class: usize,
    pub synthetic_test_per_class: usize,
}

impl DataConfig {
    /// `data_dir`, else `$DDNN_DATA_DIR`.
    pub fn resolve_dir(&self) -> Option<PathBuf> {
        self.data_dir.clone().or_else(|| {
            std::env::var_os(DATA_DIR_ENV)
                .filter(|v| !v.is_empty())
                .map(PathBuf::from)
        })
    }

    /// Train and test splits.
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        let (train, test) = match self.kind {
            DatasetKind::Synthetic => (
                self.synthetic.generate(self.synthetic_train_per_class, 0)?,
                self.synthetic.generate(self.synthetic_test_per_class, 1)?,
            ),
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => {
                let variant = if self.kind == DatasetKind::Cifar10 {
                    CifarVariant::Cifar10
                } else {
                    CifarVariant::Cifar100
                };
                let dir = self
                    .resolve_dir()
                    .ok_or_else(|| Error::Config(format!("dataset needs data_dir or ${DATA_DIR_ENV}")))?;
                (
                    load_cifar(&dir, variant, true, self.train_limit)?,
                    load_cifar(&dir, variant, false, self.test_limit)?,
                )
            }
        };
        let cut = |d: Dataset, n: Option<usize>| match n {
            Some(n) => d.truncated(n),
            None => d,
        };
        Ok((cut(train, self.train_limit), cut(test, self.test_limit)))
    }
}

/// A fully resolved run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    /// Effective value of every key.
    pub values: BTreeMap<String, String>,
    pub experiment: Experiment,
    pub data: DataConfig,
    pub checked: bool,
    pub out_dir: PathBuf,
}

/// Parses config text into raw pairs. Duplicate and unknown keys are errors.
pub fn parse_pairs(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key = value, got {line:?}", i + 1)))?;
        let k = k.trim();
        check_key(k)?;
        if out.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(Error::Config(format!("{origin}:{}: duplicate key {k}", i + 1)));
        }
    }
    Ok(out)
}

fn check_key(k: &str) -> Result<()> {
    if KEYS.iter().any(|(name, _, _)| *name == k) {
        Ok(())
    } else {
        Err(Error::Config(format!("unknown config key {k:?}")))
    }
}

/// Parses one `key=value` override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let k = k.trim();
    check_key(k)?;
    Ok((k.to_string(), v.trim().to_string()))
}

impl RunConfig {
    /// Defaults, then the file (if any), then overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                parse_pairs(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        for (k, v) in overrides {
            check_key(k)?;
            pairs.insert(k.clone(), v.clone());
        }
        Self::from_pairs(&pairs)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text, "<text>")?)
    }

    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        for k in pairs.keys() {
            check_key(k)?;
        }
        let mut values: BTreeMap<String, String> =
            KEYS.iter().map(|(k, d, _)| (k.to_string(), d.to_string())).collect();
        values.extend(pairs.iter().map(|(k, v)| (k.clone(), v.clone())));
        let r = Reader { values: &values };

        let net = NetConfig {
            family: r.parse_with("family", Family::parse)?,
            stage_blocks: r.list("stage_blocks")?,
            stage_channels: r.list("stage_channels")?,
            num_classes: r.num("num_classes")?,
            input_shape: {
                let v: Vec<usize> = r.list("input_shape")?;
                <[usize; 3]>::try_from(v).map_err(|_| bad("input_shape", "expected C,H,W"))?
            },
            stem: r.parse_with("stem", Stem::parse)?,
            block_order: r.parse_with("block_order", |s| match s {
                "post" => Some(BlockOrder::PostActivation),
                "pre" => Some(BlockOrder::PreActivation),
                _ => None,
            })?,
            stride_at: r.parse_with("stride_at", |s| match s {
                "conv1x1" => Some(StrideAt::Conv1x1),
                "conv3x3" => Some(StrideAt::Conv3x3),
                _ => None,
            })?,
        };
        net.validate()?;

        let prefixes: Vec<Vec<usize>> = r
            .get("subnets")
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse_list(s).map_err(|e| bad("subnets", &e)))
            .collect::<Result<_>>()?;
        let k = prefixes.len();
        let modes: Vec<ClassifierMode> = r.per_subnet("classifier_mode", k, ClassifierMode::Shared, |s| {
            ClassifierMode::parse(s).ok_or_else(|| format!("unknown classifier mode {s:?}"))
        })?;
        let subnets: Vec<SubnetSpec> = prefixes
            .into_iter()
            .zip(modes)
            .map(|(prefix_blocks, classifier_mode)| SubnetSpec {
                prefix_blocks,
                classifier_mode,
            })
            .collect();

        let tap_policy = match r.get("tap_stages") {
            "auto" => TapPolicy::SplitStages,
            s => {
                let stages = parse_list(s).map_err(|e| bad("tap_stages", &e))?;
                if stages.contains(&0) {
                    return Err(bad("tap_stages", "stages are numbered from 1"));
                }
                TapPolicy::Stages(stages.into_iter().map(|s| s - 1).collect())
            }
        };
        let ddnn = DdnnOptions {
            tap_policy,
            bn_stats: r.parse_with("bn_stats", BnStats::parse)?,
            seed: r.num("seed")?,
        };

        let regime = r.parse_with("regime", Regime::parse)?;
        let kl = r.per_subnet("kl_weight", k, DEFAULT_KL_WEIGHT, parse_f64)?;
        let att = r.per_subnet("att_weight", k, DEFAULT_ATT_WEIGHT, parse_f64)?;
        let train = TrainConfig {
            regime,
            lr: LrSchedule {
                initial: r.num("lr")?,
                drops: r.list("lr_drops")?,
                factor: r.num("lr_factor")?,
            },
            momentum: r.num("momentum")?,
            weight_decay: r.num("weight_decay")?,
            batch_size: r.num("batch_size")?,
            epochs: r.num("epochs")?,
            seed: r.num("seed")?,
            weights: EkdWeights { w: kl, alpha: att },
            teacher_grad: r.flag("teacher_grad")?,
            combination: Combination {
                unnormalized_subnet_ce: r.flag("unnormalized_subnet_ce")?,
            },
            reforward_each_net: r.flag("reforward_each_net")?,
            augment: r.flag("augment")?,
            normalize: r.flag("normalize")?,
            deterministic: r.flag("deterministic")?,
        };
        train.validate()?;
        train.weights.validate(k)?;

        let kind = r.parse_with("dataset", |s| match s {
            "synthetic" => Some(DatasetKind::Synthetic),
            "cifar10" => Some(DatasetKind::Cifar10),
            "cifar100" => Some(DatasetKind::Cifar100),
            _ => None,
        })?;
        let limit = |key: &str| -> Result<Option<usize>> {
            let n: usize = r.num(key)?;
            Ok((n > 0).then_some(n))
        };
        let [_, h, w] = net.input_shape;
        let mut synthetic = SyntheticSpec::new(net.num_classes, (h, w), r.num("synthetic_seed")?);
        synthetic.noise = r.num("synthetic_noise")?;
        let data = DataConfig {
            kind,
            data_dir: Some(r.get("data_dir")).filter(|s| !s.is_empty()).map(PathBuf::from),
            train_limit: limit("train_limit")?,
            test_limit: limit("test_limit")?,
            synthetic,
            synthetic_train_per_class: r.num("synthetic_train_per_class")?,
            synthetic_test_per_class: r.num("synthetic_test_per_class")?,
        };
        let checked = r.flag("checked")?;
        let out_dir = PathBuf::from(r.get("out_dir"));

        // Record the weights actually in force rather than an empty default.
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        values.insert("kl_weight".into(), join(&train.weights.w));
        values.insert("att_weight".into(), join(&train.weights.alpha));

        Ok(RunConfig {
            values,
            experiment: Experiment {
                net,
                subnets,
                ddnn,
                train,
            },
            data,
            checked,
            out_dir,
        })
    }

    /// Every effective value, one `key = value` line each, in key order.
    pub fn resolved_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// FNV-1a fingerprint of every effective value except `out_dir`, as 16
    /// hex digits. Runs of one experiment written to different places share it.
    pub fn hash(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.values.iter().filter(|(k, _)| k.as_str() != "out_dir") {
            let _ = writeln!(s, "{k} = {v}");
        }
        format!("{:016x}", fnv1a64(s.as_bytes()))
    }
}

struct Reader<'a> {
    values: &'a BTreeMap<String, String>,
}

fn bad(key: &str, why: &str) -> Error {
    Error::Config(format!("{key}: {why}"))
}

fn parse_list<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, String> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("cannot parse {t:?}")))
        .collect()
}

fn parse_f64(s: &str) -> std::result::Result<f64, String> {
    s.parse().map_err(|_| format!("cannot parse {s:?} as a number"))
}

impl Reader<'_> {
    fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse().map_err(|_| bad(key, &format!("cannot parse {v:?}")))
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            v => Err(bad(key, &format!("expected true or false, got {v:?}"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        parse_list(self.get(key)).map_err(|e| bad(key, &e))
    }

    fn parse_with<T>(&self, key: &str, f: impl Fn(&str) -> Option<T>) -> Result<T> {
        let v = self.get(key);
        f(v).ok_or_else(|| bad(key, &format!("unknown value {v:?}")))
    }

    /// Empty → `default` for every sub-net; one value → broadcast; otherwise
    /// exactly `k` values.
    fn per_subnet<T: Clone>(
        &self,
        key: &str,
        k: usize,
        default: T,
        f: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> Result<Vec<T>> {
        let items: Vec<&str> = self
            .get(key)
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .collect();
        let parsed: Vec<T> = items
            .iter()
            .map(|s| f(s))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(key, &e))?;
        match parsed.len() {
            0 => Ok(vec![default; k]),
            1 => Ok(vec![parsed[0].clone(); k]),
            n if n == k => Ok(parsed),
            n => Err(bad(key, &format!("{n} values given for {k} sub-nets"))),
        }
    }
}
