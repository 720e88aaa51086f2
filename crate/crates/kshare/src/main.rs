use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use kshare::checkpoint::Checkpoint;
use kshare::config::{apply_sharing, Overrides, RunConfig};
use kshare::data::{Source, Split};
use kshare::sweep::{load_sweep_file, sweep, SweepGrid};
use kshare::train::{evaluate_checkpoint, train, TrainOptions};
use kshare::{verify, Result};
use kshare_core::accounting::cost_report;
use kshare_core::models::build;
use kshare_core::{DType, ModelConfig};
use serde_json::json;

#[derive(Parser)]
#[command(name = "kshare", version, about = "Train and inspect CNNs with inter-layer kernel sharing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and checkpoints
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split
    Eval(EvalArgs),
    /// Count trainable parameters
    Count(CostArgs),
    /// Count forward-pass FLOPs
    Flops(CostArgs),
    /// Compare analytic and finite-difference gradients of small models
    Gradcheck(GradcheckArgs),
    /// Run a grid of configurations
    Sweep(SweepArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Convmixer,
    SeResnet,
}

#[derive(Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "convmixer")]
    family: FamilyArg,
    /// ConvMixer width, or three comma-separated SE-ResNet stage widths
    #[arg(long, value_delimiter = ',')]
    channels: Vec<usize>,
    /// ConvMixer blocks or SE-ResNet blocks per stage
    #[arg(long)]
    depth: Option<usize>,
    /// none, two_kernel, four_kernel, eight_kernel; or all_stages, stage3, stage2+stage3
    #[arg(long, default_value = "none")]
    sharing: String,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    dw_kernel: Option<usize>,
    /// Input height and width
    #[arg(long)]
    resolution: Option<usize>,
}

impl ModelArgs {
    fn model(&self) -> Result<ModelConfig> {
        let mut m = match self.family {
            FamilyArg::Convmixer => ModelConfig::convmixer(256, self.depth.unwrap_or(8)),
            FamilyArg::SeResnet => ModelConfig::se_resnet(self.depth.unwrap_or(2)),
        };
        if !self.channels.is_empty() {
            m.channels = self.channels.clone();
        }
        apply_sharing(&mut m, &self.sharing)?;
        if let Some(c) = self.classes {
            m.num_classes = c;
        }
        if let Some(p) = self.patch_size {
            m.patch_size = p;
        }
        if let Some(k) = self.dw_kernel {
            m.dw_kernel = k;
        }
        if let Some(r) = self.resolution {
            m.input = [3, r, r];
        }
        m.validate()?;
        Ok(m)
    }
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// CIFAR data directory
    #[arg(long, env = "KSHARE_DATA")]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    precision: Option<Precision>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            out: self.out.clone(),
            precision: self.precision.map(|p| match p {
                Precision::F32 => DType::F32,
                Precision::F64 => DType::F64,
            }),
            data: self.data.clone(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Model to train when no --config is given
    #[command(flatten)]
    model: ModelArgs,
    /// Data source when no --config is given
    #[arg(long, value_enum)]
    source: Option<SourceArg>,
    /// Synthetic training set size
    #[arg(long)]
    train_size: Option<usize>,
    /// Continue from last.ckpt in the output directory
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate
    checkpoint: PathBuf,
    /// Expected run configuration; its model must match the checkpoint
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, env = "KSHARE_DATA")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct CostArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Take the model from a run configuration instead
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the per-layer breakdown
    #[arg(long)]
    layers: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradcheckTarget {
    Convmixer,
    SeResnet,
    Both,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "both")]
    model: GradcheckTarget,
    #[arg(long, default_value_t = 1e-5)]
    tol: f64,
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML run configuration with a [sweep] table
    #[arg(long)]
    config: PathBuf,
    #[arg(long, env = "KSHARE_DATA")]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Only compute parameter and FLOP columns
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    quiet: bool,
}

fn load_run(path: Option<&PathBuf>, fallback: impl FnOnce() -> Result<RunConfig>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_toml_file(p),
        None => fallback(),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_run(a.run.config.as_ref(), || {
        let mut cfg = RunConfig::for_model(a.model.model()?);
        match a.source {
            Some(SourceArg::Synthetic) => {
                cfg = RunConfig::synthetic(cfg.model, cfg.epochs, a.train_size.unwrap_or(512), 256);
            }
            Some(SourceArg::Cifar10) => cfg.data.source = Source::Cifar10,
            Some(SourceArg::Cifar100) => cfg.data.source = Source::Cifar100,
            None => {}
        }
        Ok(cfg)
    })?;
    cfg.apply(&a.run.overrides());
    if a.run.out.is_none() {
        cfg.out_dir = cfg.out_dir.join(&cfg.name);
    }
    let opts = TrainOptions {
        resume: a.resume,
        stop_after: None,
        verbose: !a.quiet,
    };
    let metrics = train(&cfg, &opts)?;
    let summary = json!({
        "out_dir": cfg.out_dir,
        "epochs": metrics.epochs.len(),
        "params": metrics.params,
        "flops": metrics.flops,
        "best_test_acc": metrics.best_test_acc,
        "best_epoch": metrics.best_epoch,
        "final": metrics.last(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let expected = a.config.as_ref().map(|p| RunConfig::from_toml_file(p)).transpose()?;
    let mut data = ckpt.doc.run.data.clone();
    if a.data.is_some() && data.source != Source::Synthetic {
        data.path = a.data;
    }
    let run = &ckpt.doc.run;
    let (_, test) = data.load(run.seed, run.model.input, run.model.num_classes)?;
    let (loss, acc) = evaluate_checkpoint(&ckpt, expected.as_ref(), &test)?;
    let out = json!({
        "checkpoint": a.checkpoint,
        "epoch": ckpt.doc.epoch,
        "split": Split::Test,
        "samples": test.len(),
        "loss": loss,
        "accuracy": acc,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn cmd_cost(a: CostArgs, flops: bool) -> Result<()> {
    let model = match &a.config {
        Some(p) => RunConfig::from_toml_file(p)?.model,
        None => a.model.model()?,
    };
    let (graph, plan) = build(&model)?;
    let report = cost_report(&graph, &plan)?;
    if a.json {
        let mut out = json!({
            "model": model.to_string(),
            "params": report.trainable_params,
            "flops": report.flops,
            "gflops": report.gflops(),
            "shared_groups": plan.shared_groups().count(),
        });
        if a.layers {
            out["layers"] = serde_json::to_value(&report.layers)?;
        }
        println!("{}", serde_json::to_string_pretty(&out)?);
    } else if a.layers {
        print!("{model}\n{}", report.to_table());
    } else if flops {
        println!("{} {:.4} GFLOPs", report.flops, report.gflops());
    } else {
        println!("{}", report.trainable_params);
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let models = match a.model {
        GradcheckTarget::Convmixer => vec![verify::tiny_convmixer()],
        GradcheckTarget::SeResnet => vec![verify::tiny_seresnet()],
        GradcheckTarget::Both => vec![verify::tiny_convmixer(), verify::tiny_seresnet()],
    };
    let mut failure = None;
    let mut reports = Vec::new();
    for cfg in &models {
        let report = verify::check_model(cfg, a.seed, a.batch, a.step)?;
        if !a.json {
            println!("{cfg}");
            for p in &report.params {
                println!(
                    "  {:<32} sites {:>2}  rel {:.3e}  abs {:.3e}{}",
                    p.name,
                    p.sites,
                    p.rel_err,
                    p.max_abs_err,
                    if p.kinked > 0 { format!("  ({} kinked)", p.kinked) } else { String::new() }
                );
            }
            if let Some(w) = report.worst() {
                println!("  worst {} {:.3e} (tolerance {:.1e})", w.name, w.rel_err, a.tol);
            }
        }
        if let Err(e) = verify::require(&report, a.tol) {
            failure.get_or_insert(e);
        }
        reports.push(json!({ "model": cfg.to_string(), "report": report }));
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
    }
    failure.map_or(Ok(()), Err)
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let (mut base, mut grid): (RunConfig, SweepGrid) = load_sweep_file(&a.config)?;
    base.apply(&Overrides {
        epochs: a.epochs,
        out: a.out.clone(),
        data: a.data.clone(),
        ..Default::default()
    });
    if a.out.is_none() {
        base.out_dir = base.out_dir.join("sweep");
    }
    grid.dry_run |= a.dry_run;
    let rows = sweep(&base, &grid, !a.quiet)?;
    let failed = rows.iter().filter(|r| r.status.starts_with("failed")).count();
    println!(
        "{}",
        serde_json::to_string_pretty(&json!({
            "rows": rows.len(),
            "failed": failed,
            "csv": base.out_dir.join("sweep.csv"),
        }))?
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Count(a) => cmd_cost(a, false),
        Command::Flops(a) => cmd_cost(a, true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
