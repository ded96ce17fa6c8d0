//! `ksynth`: verification, synthetic data, training, grid search and fusion
//! heatmap export.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ksynth::config::RunConfig;
use ksynth::fusion::FusionMatrix;
use ksynth::model::build_network;
use ksynth::params::ParamStore;
use ksynth::train::{self, evaluate, grid_csv, grid_search_rfs};
use ksynth::verify::{self, Fault, VerifyOptions};

/// Environment variable capping the worker thread count.
const THREADS_ENV: &str = "KSYNTH_THREADS";

#[derive(Parser, Debug)]
#[command(name = "ksynth", version, about = "Kernel synthesizer toolkit for small video networks")]
struct Cli {
    /// Run configuration in key = value form.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the property suites and report every check.
    Verify {
        /// Perturb one kernel weight so that the suite must fail.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Generate the synthetic benchmark into OUT/data.
    GenData,
    /// Train a network; writes the log, checkpoint and evaluation into OUT.
    Train,
    /// Train one network per maximum-RFS candidate and rank them.
    Grid,
    /// Write the l1 importance of every fusion matrix in a checkpoint.
    ExportHeatmap {
        /// Checkpoint directory written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("{THREADS_ENV} must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn cmd_verify(cfg: &RunConfig, inject_fault: bool) -> Result<bool> {
    let rows = verify::run_all(VerifyOptions {
        seed: cfg.seed,
        fault: inject_fault.then_some(Fault::KernelWeight),
    })?;
    verify::write_report_text(&rows, io::stdout().lock())?;
    fs::create_dir_all(&cfg.out)?;
    let csv = cfg.out.join("verify.csv");
    verify::write_report_csv(&rows, BufWriter::new(fs::File::create(&csv)?))?;
    cfg.write_snapshot(&cfg.out)?;
    Ok(verify::all_passed(&rows))
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let data = cfg.dataset()?;
    let dir = cfg.out.join("data");
    data.save(&dir)?;
    cfg.write_snapshot(&cfg.out)?;
    println!("wrote {} train and {} val clips to {}", data.train.len(), data.val.len(), dir.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = cfg.dataset()?;
    let (net, mut store) = build_network(&cfg.model, cfg.seed)?;
    fs::create_dir_all(&cfg.out)?;
    cfg.write_snapshot(&cfg.out)?;
    let log_path = cfg.out.join("train_log.csv");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    train::train(&net, &mut store, &data, &cfg.train, Some(&mut log))?;
    log.flush()?;
    let ckpt = cfg.out.join("checkpoint");
    store.save(&ckpt)?;
    cfg.write_snapshot(&ckpt)?;

    let report = evaluate(&net, &store, &data.val, data.classes)?;
    let mut eval = String::from("class,accuracy\n");
    for (k, a) in report.per_class.iter().enumerate() {
        eval.push_str(&format!("{k},{a:.6}\n"));
    }
    eval.push_str(&format!("all,{:.6}\n", report.top1));
    eval.push_str(&format!("reversal_pair,{:.6}\n", report.pair_accuracy(0, 1)));
    fs::write(cfg.out.join("eval.csv"), eval)?;
    println!(
        "val top-1 {:.4}, reversal pair {:.4}; log {}, checkpoint {}",
        report.top1,
        report.pair_accuracy(0, 1),
        log_path.display(),
        ckpt.display()
    );
    Ok(())
}

fn cmd_grid(cfg: &RunConfig) -> Result<()> {
    let data = cfg.dataset()?;
    let rows = grid_search_rfs(&cfg.grid, &cfg.model, &cfg.train, &data)?;
    fs::create_dir_all(&cfg.out)?;
    cfg.write_snapshot(&cfg.out)?;
    let table = grid_csv(&rows);
    fs::write(cfg.out.join("grid.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_export_heatmap(checkpoint: &Path, out: &Path) -> Result<()> {
    if !checkpoint.is_dir() {
        bail!("checkpoint directory {} does not exist", checkpoint.display());
    }
    let store = ParamStore::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    fs::create_dir_all(out)?;
    let mut written = 0;
    for id in store.ids() {
        let Some(block) = store.name(id).strip_suffix(".fusion") else {
            continue;
        };
        let matrix = FusionMatrix::from_tensor(store.get(id), store.is_trainable(id))?;
        let path = out.join(format!("heatmap_{block}.csv"));
        let mut f = BufWriter::new(fs::File::create(&path)?);
        matrix.write_l1_csv(&mut f)?;
        f.flush()?;
        println!("{}: {}x{} -> {}", block, matrix.groups(), matrix.groups(), path.display());
        written += 1;
    }
    if written == 0 {
        bail!("checkpoint {} holds no fusion matrices", checkpoint.display());
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<bool> {
    configure_threads()?;
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Verify { inject_fault } => return cmd_verify(&cfg, *inject_fault),
        Command::GenData => cmd_gen_data(&cfg)?,
        Command::Train => cmd_train(&cfg)?,
        Command::Grid => cmd_grid(&cfg)?,
        Command::ExportHeatmap { checkpoint } => cmd_export_heatmap(checkpoint, &cfg.out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
