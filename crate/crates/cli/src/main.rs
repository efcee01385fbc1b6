mod plot;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use ddnn_core::accounting::{count_flops, count_params};
use ddnn_core::checkpoint::Checkpoint;
use ddnn_core::config::{parse_override, RunConfig};
use ddnn_core::ddnn::{format_dropped, Ddnn};
use ddnn_core::gradcheck::{self, run_suite};
use ddnn_core::tensor::set_checked_mode;
use ddnn_core::trainer::{evaluate, run_experiment_with, Artifacts, MetricsRow};

/// Depth-level dynamic networks: train, evaluate and slice nested sub-nets.
#[derive(Parser, Debug)]
#[command(name = "ddnn", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Run directory (the `out_dir` key).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded, wall-clock-free run.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Check every op's inputs and outputs for non-finite values.
    #[arg(long, global = true)]
    checked: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a DDNN (or the baselines) and write a run directory.
    Train,
    /// Evaluate a checkpoint on the test split of the configured dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write a standalone checkpoint holding one net of a DDNN.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// 0 is the full net, 1..=K the sub-nets.
        #[arg(long)]
        subnet: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print parameter and FLOP counts of the configured nets.
    Count,
    /// Compare analytic gradients against central differences.
    Gradcheck {
        /// `all`, or a substring of case names.
        #[arg(default_value = "all")]
        scope: String,
        #[arg(long, default_value_t = gradcheck::SEEDS)]
        seeds: u64,
        /// List the case names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Render test (or train) error curves of a metrics CSV as SVG.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Only plot this split.
        #[arg(long)]
        split: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", message(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

// The core's I/O errors already include their cause in the message.
fn message(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    for cause in e.chain().skip(1) {
        let c = cause.to_string();
        if !out.contains(&c) {
            out.push_str(": ");
            out.push_str(&c);
        }
    }
    out
}

/// 2 for anything the user can fix in the command line or config, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    let usage = e.chain().any(|c| {
        matches!(
            c.downcast_ref::<ddnn_core::Error>(),
            Some(ddnn_core::Error::Config(_) | ddnn_core::Error::Invalid(_))
        ) || c.downcast_ref::<UsageError>().is_some()
    });
    if usage {
        2
    } else {
        1
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn load_config(g: &Global) -> anyhow::Result<RunConfig> {
    let mut overrides = Vec::new();
    for s in &g.set {
        overrides.push(parse_override(s)?);
    }
    if let Some(seed) = g.seed {
        overrides.push(("seed".into(), seed.to_string()));
    }
    if g.deterministic {
        overrides.push(("deterministic".into(), "true".into()));
    }
    if g.checked {
        overrides.push(("checked".into(), "true".into()));
    }
    if let Some(out) = &g.out {
        overrides.push(("out_dir".into(), out.display().to_string()));
    }
    let cfg = RunConfig::load(g.config.as_deref(), &overrides)?;
    set_checked_mode(cfg.checked);
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Train => train(&load_config(&cli.global)?),
        Command::Eval { checkpoint } => eval(&load_config(&cli.global)?, &checkpoint),
        Command::Extract {
            checkpoint,
            subnet,
            output,
        } => extract(&checkpoint, subnet, &output),
        Command::Count => count(&load_config(&cli.global)?),
        Command::Gradcheck { scope, seeds, list } => grad_check(&scope, seeds, list),
        Command::Plot { metrics, output, split } => {
            plot::plot_file(&metrics, &output, split.as_deref())?;
            println!("wrote {}", output.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn train(cfg: &RunConfig) -> anyhow::Result<ExitCode> {
    let (train, test) = cfg.data.load()?;
    let dir = cfg.out_dir.clone();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join("resolved.cfg"), cfg.resolved_text()).context("writing resolved.cfg")?;
    let mut metadata = BTreeMap::new();
    metadata.insert("config_hash".to_string(), cfg.hash());
    metadata.insert("seed".to_string(), cfg.experiment.train.seed.to_string());
    metadata.insert("regime".to_string(), cfg.experiment.train.regime.as_str().to_string());
    let artifacts = Artifacts {
        dir: dir.clone(),
        metadata,
    };
    eprintln!(
        "training {} ({}) on {} train / {} test images, config {}",
        cfg.experiment.net.name(),
        cfg.experiment.train.regime.as_str(),
        train.len(),
        test.len(),
        cfg.hash()
    );
    let epochs = cfg.experiment.train.epochs;
    let mut progress = |rows: &[MetricsRow]| {
        let Some(first) = rows.first() else { return };
        let errs: Vec<String> = rows
            .iter()
            .filter(|r| r.split == "test")
            .map(|r| format!("{} {:.2}%", r.net_name, r.top1_err))
            .collect();
        eprintln!(
            "epoch {}/{} lr {:.4} | test err {}",
            first.epoch + 1,
            epochs,
            first.lr,
            errs.join(", ")
        );
    };
    let out = run_experiment_with(&cfg.experiment, &train, &test, Some(&artifacts), &mut progress)?;
    println!("net\tfinal_err\tbest_err\tbest_epoch");
    for (name, best, epoch) in &out.best {
        let last = out.test_error(name).unwrap_or(f64::NAN);
        println!("{name}\t{last:.2}\t{best:.2}\t{}", epoch + 1);
    }
    println!("run directory: {}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(cfg: &RunConfig, path: &Path) -> anyhow::Result<ExitCode> {
    let ckpt = Checkpoint::load(path)?;
    let net: Ddnn<f32> = ckpt.to_ddnn()?;
    let norm = ckpt.normalization()?;
    let (_, test) = cfg.data.load()?;
    if test.shape != net.config().input_shape || test.num_classes != net.config().num_classes {
        return Err(UsageError(format!(
            "checkpoint expects {:?} images and {} classes, dataset has {:?} and {}",
            net.config().input_shape,
            net.config().num_classes,
            test.shape,
            test.num_classes
        ))
        .into());
    }
    let results = evaluate(&net, &test, norm.as_ref(), cfg.experiment.train.batch_size.max(64))?;
    println!("net\tdepth\ttop1_err\tce");
    for r in results {
        let depth = net.net_config(r.net).name();
        println!("{}\t{}\t{:.2}\t{:.4}", r.net_name, depth, r.top1_err, r.ce);
    }
    Ok(ExitCode::SUCCESS)
}

fn extract(path: &Path, subnet: usize, output: &Path) -> anyhow::Result<ExitCode> {
    let ckpt = Checkpoint::load(path)?;
    let net: Ddnn<f32> = ckpt.to_ddnn()?;
    if subnet >= net.num_nets() {
        return Err(UsageError(format!(
            "--subnet {subnet} out of range: the checkpoint holds sub-nets 1..={}",
            net.num_subnets()
        ))
        .into());
    }
    let sub = net.extract(subnet)?;
    let mut meta = ckpt.metadata.clone();
    meta.insert("extracted_net".into(), Ddnn::<f32>::net_name(subnet));
    let mut out = Checkpoint::from_ddnn(&sub, meta)?;
    if let Some(norm) = ckpt.normalization()? {
        out.set_normalization(&norm)?;
    }
    out.save(output)?;

    let full_cfg = net.config();
    let sub_cfg = sub.config();
    let dropped = net.dropped_blocks(subnet);
    let (p_full, p_sub) = (count_params(full_cfg), count_params(sub_cfg));
    let (f_full, f_sub) = (count_flops(full_cfg), count_flops(sub_cfg));
    println!(
        "extracted {} ({}) -> {}",
        Ddnn::<f32>::net_name(subnet),
        sub_cfg.name(),
        output.display()
    );
    println!(
        "dropped blocks: {}",
        if dropped.is_empty() {
            "none".into()
        } else {
            format_dropped(&dropped)
        }
    );
    println!(
        "params: {} -> {} ({})",
        human(p_full as f64),
        human(p_sub as f64),
        delta(p_full, p_sub)
    );
    println!(
        "flops:  {} -> {} ({})",
        human(f_full as f64),
        human(f_sub as f64),
        delta(f_full, f_sub)
    );
    Ok(ExitCode::SUCCESS)
}

fn count(cfg: &RunConfig) -> anyhow::Result<ExitCode> {
    let exp = &cfg.experiment;
    exp.net.validate()?;
    println!("net\tdepth\tblocks\tparams\tflops\tdropped");
    let nets =
        std::iter::once(exp.net.clone()).chain(exp.subnets.iter().map(|s| exp.net.with_blocks(&s.prefix_blocks)));
    for (i, c) in nets.enumerate() {
        let dropped: Vec<(usize, usize)> = exp
            .net
            .stage_blocks
            .iter()
            .zip(&c.stage_blocks)
            .enumerate()
            .flat_map(|(s, (&full, &p))| (p..full).map(move |b| (s, b)))
            .collect();
        let blocks: Vec<String> = c.stage_blocks.iter().map(|b| b.to_string()).collect();
        println!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            Ddnn::<f32>::net_name(i),
            c.name(),
            blocks.join(","),
            human(count_params(&c) as f64),
            human(count_flops(&c) as f64),
            if dropped.is_empty() {
                "-".into()
            } else {
                format_dropped(&dropped)
            }
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn grad_check(scope: &str, seeds: u64, list: bool) -> anyhow::Result<ExitCode> {
    if list {
        for name in gradcheck::CASES {
            println!("{name}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let filter = (scope != "all").then_some(scope);
    let reports = run_suite(filter, seeds)?;
    if reports.is_empty() {
        return Err(UsageError(format!("no gradcheck case matches {scope:?}")).into());
    }
    let mut failed = 0;
    for r in &reports {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:<22} max_rel_err {:.2e} (seed {}){}",
            r.name,
            r.max_rel_err,
            r.worst_seed,
            if r.detached_leak > 0.0 {
                format!(" detached leak {:.2e}", r.detached_leak)
            } else {
                String::new()
            }
        );
        failed += usize::from(!r.passed());
    }
    println!(
        "{} cases, {} failed, tolerance {:.0e}, {seeds} seeds",
        reports.len(),
        failed,
        gradcheck::TOLERANCE
    );
    if failed > 0 {
        bail!("{failed} gradcheck case(s) failed");
    }
    Ok(ExitCode::SUCCESS)
}

fn human(v: f64) -> String {
    if v >= 1e9 {
        format!("{:.2}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.2}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.2}K", v / 1e3)
    } else {
        format!("{v}")
    }
}

fn delta(full: u64, sub: u64) -> String {
    let d = sub as f64 - full as f64;
    let pct = if full == 0 { 0.0 } else { 100.0 * d / full as f64 };
    let sign = if d < 0.0 { "-" } else { "+" };
    format!("{sign}{}, {pct:+.1}%", human(d.abs()))
}
