use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use warpformer::dataio::DataDir;
use warpformer::harness::export::export_alignment;
use warpformer::harness::gradsuite::{run_suite, TOLERANCE};
use warpformer::harness::train::{evaluate, load_run, save_run, summary_line, train, RunConfig};
use warpformer::harness::{MetricsReport, SyntheticSpec};

#[derive(Parser)]
#[command(name = "warpformer", version, about = "Train and inspect multi-scale warping models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history and summary into OUT.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint on the validation and test splits of DATA.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Write a synthetic multi-scale parity dataset.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write per-layer, per-variate alignment matrices for one instance.
    ExportAlignment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        instance: String,
        #[arg(long)]
        out: PathBuf,
        /// Dataset holding the instance; defaults to the one used in training.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fmt(x: Option<f64>) -> String {
    x.map_or_else(|| "na".into(), |v| format!("{v:.6}"))
}

fn metrics_fields(prefix: &str, r: &MetricsReport) -> String {
    format!(
        "{prefix}_auroc={} {prefix}_auprc={} {prefix}_accuracy={}",
        fmt(r.auroc),
        fmt(r.auprc),
        fmt(r.accuracy)
    )
}

fn cmd_train(config: &Path, data: &Path, out: &Path, seed: u64) -> Result<()> {
    let mut cfg = RunConfig::load(config)?;
    cfg.train.seed = seed;
    let dataset = DataDir::load(data).with_context(|| format!("loading {}", data.display()))?;
    let trained = train(&cfg, &dataset, |r| {
        eprintln!(
            "epoch {:>3} loss {:.5} val_auroc {} val_accuracy {}{}",
            r.epoch,
            r.train_loss,
            fmt(r.val_auroc),
            fmt(r.val_accuracy),
            if r.improved { " *" } else { "" }
        );
    })?;
    let test = if dataset.test.is_empty() {
        None
    } else {
        let mut test = dataset.test.clone();
        trained.norm.apply_all(&mut test);
        Some(evaluate(&trained.model, &trained.store, &test, cfg.train.batch_size)?)
    };
    let line = summary_line(&trained, seed, test.as_ref());
    save_run(out, &cfg, &trained, Some(data), &line)?;
    println!("{line}");
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path) -> Result<()> {
    let run = load_run(checkpoint)?;
    let dataset = DataDir::load(data).with_context(|| format!("loading {}", data.display()))?;
    if dataset.meta.num_variates != run.record.dims.num_variates
        || dataset.meta.num_classes != run.record.dims.num_classes
        || dataset.meta.task != run.record.dims.task
    {
        bail!("dataset {} does not match the checkpoint's shape", data.display());
    }
    let batch = run.record.config.train.batch_size;
    let mut fields = Vec::new();
    for (name, split) in [("val", &dataset.val), ("test", &dataset.test)] {
        if split.is_empty() {
            continue;
        }
        let mut split = split.clone();
        run.norm.apply_all(&mut split);
        let report = evaluate(&run.model, &run.store, &split, batch)?;
        fields.push(metrics_fields(name, &report));
    }
    println!("{}", fields.join(" "));
    Ok(())
}

fn cmd_generate(spec: &Path, out: &Path, seed: u64) -> Result<()> {
    let spec = SyntheticSpec::load(spec)?;
    let data = spec.generate(seed)?;
    data.save(out)?;
    println!(
        "wrote train={} val={} test={} to {}",
        data.train.len(),
        data.val.len(),
        data.test.len(),
        out.display()
    );
    Ok(())
}

fn cmd_export(checkpoint: &Path, instance: &str, out: &Path, data: Option<&Path>) -> Result<()> {
    let run = load_run(checkpoint)?;
    let root = match (data, run.record.data.as_deref()) {
        (Some(d), _) | (None, Some(d)) => d.to_path_buf(),
        (None, None) => bail!("checkpoint does not record its dataset; pass --data"),
    };
    let dataset = DataDir::load(&root).with_context(|| format!("loading {}", root.display()))?;
    let Some(inst) = dataset.find(instance) else {
        bail!("instance {instance:?} not found in {}", root.display());
    };
    let files = export_alignment(&run, inst, out)?;
    for f in &files {
        println!("layer={} variate={} shape={}x{} {}", f.layer, f.variate, f.rows, f.cols, f.matrix.display());
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<bool> {
    let cases = run_suite(seed)?;
    let mut ok = true;
    for c in &cases {
        let status = if c.passed() { "PASS" } else { "FAIL" };
        ok &= c.passed();
        println!("{status} {:<36} max_rel_error={:.3e} coords={} seconds={:.2}", c.name, c.max_rel_error, c.coords, c.seconds);
    }
    let total: f64 = cases.iter().map(|c| c.seconds).sum();
    println!("checks={} tolerance={TOLERANCE:e} seconds={total:.2} passed={ok}", cases.len());
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, data, out, seed } => cmd_train(&config, &data, &out, seed).map(|_| true),
        Command::Eval { checkpoint, data } => cmd_eval(&checkpoint, &data).map(|_| true),
        Command::Generate { spec, out, seed } => cmd_generate(&spec, &out, seed).map(|_| true),
        Command::ExportAlignment {
            checkpoint,
            instance,
            out,
            data,
        } => cmd_export(&checkpoint, &instance, &out, data.as_deref()).map(|_| true),
        Command::Gradcheck { seed } => cmd_gradcheck(seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
