//! `pcsr`: generate synthetic datasets, train, evaluate and inspect the division.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pcsr::data::{generate_synthetic, inject_noise_into, load_dataset, save_dataset, SyntheticConfig};
use pcsr::encoders::{load_checkpoint, save_checkpoint};
use pcsr::eval::evaluate;
use pcsr::trainer::{train_with, EpochReport, TrainConfig};
use pcsr::{ModelParams, PairDataset, PcsrError, SplitName};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pcsr", version, about = "Consistency-guided sample refinement for noisy image-text pairs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML training config; every field is optional
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Config override as key=value, applied after the config file
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Directory that receives every output file
    #[arg(long, global = true, default_value = ".")]
    output_dir: PathBuf,
    /// Seed for generation and training
    #[arg(long, global = true, env = "PCSR_SEED")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with injected correspondence noise
    Generate(GenerateArgs),
    /// Train on a dataset file, writing epoch reports and checkpoints
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split of a dataset
    Eval(EvalArgs),
    /// Summarize the per-epoch division of a finished training run
    InspectDivision(InspectArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    classes: usize,
    /// Fraction of training pairs to mismatch
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 64)]
    d_img: usize,
    #[arg(long, default_value_t = 48)]
    d_txt: usize,
    /// Standard deviation of within-class jitter
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1)]
    captions_per_image: usize,
    /// Dataset file name, relative to the output directory
    #[arg(short, long, default_value = "dataset.bin")]
    output: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset file written by `generate`
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Print a plain-text table instead of JSON
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct InspectArgs {
    /// Output directory of a `train` run
    #[arg(long)]
    run: PathBuf,
    /// Print a plain-text table instead of JSON
    #[arg(long)]
    table: bool,
}

/// A failure carrying the exit code it maps to.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if let Some(exit) = err.downcast_ref::<Exit>() {
        return exit.code;
    }
    match err.downcast_ref::<PcsrError>() {
        Some(PcsrError::Numeric(_) | PcsrError::Degenerate(_) | PcsrError::Training(_) | PcsrError::Logic(_)) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    fs::create_dir_all(&cli.common.output_dir)
        .with_context(|| format!("creating {}", cli.common.output_dir.display()))?;
    match &cli.command {
        Command::Generate(args) => generate(&cli.common, args),
        Command::Train(args) => train(&cli.common, args),
        Command::Eval(args) => eval(&cli.common, args),
        Command::InspectDivision(args) => inspect(args),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn generate(common: &Common, args: &GenerateArgs) -> Result<()> {
    let seed = common.seed.unwrap_or(42);
    let cfg = SyntheticConfig {
        n_pairs: args.n,
        n_classes: args.classes,
        d_img: args.d_img,
        d_txt: args.d_txt,
        intra_class_noise: args.sigma,
        captions_per_image: args.captions_per_image,
        seed,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&cfg)?;
    let train_idx = ds.split.train.clone();
    let ds = inject_noise_into(&ds, &train_idx, args.noise, seed)?;
    let path = common.output_dir.join(&args.output);
    save_dataset(&ds, &path)?;
    let manifest = json!({
        "file": args.output,
        "n_pairs": cfg.n_pairs,
        "n_classes": cfg.n_classes,
        "noise_ratio": args.noise,
        "seed": seed,
        "d_img": cfg.d_img,
        "d_txt": cfg.d_txt,
        "intra_class_noise": cfg.intra_class_noise,
        "latent_dim": cfg.latent_dim,
        "caption_noise": cfg.caption_noise,
        "captions_per_image": cfg.captions_per_image,
        "train": ds.split.train.len(),
        "val": ds.split.val.len(),
        "test": ds.split.test.len(),
        "corrupted": ds.corruption_mask().iter().filter(|&&c| c).count(),
    });
    let mut manifest_path = path.clone().into_os_string();
    manifest_path.push(".json");
    write_json(Path::new(&manifest_path), &manifest)?;
    println!("wrote {} ({} pairs, {} corrupted)", path.display(), ds.len(), manifest["corrupted"]);
    Ok(())
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let base = match &common.config {
        Some(path) => TrainConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => TrainConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(path: &Path) -> Result<PairDataset> {
    load_dataset(path).with_context(|| format!("loading {}", path.display()))
}

fn train(common: &Common, args: &TrainArgs) -> Result<()> {
    let cfg = train_config(common)?;
    let ds = load_data(&args.data)?;
    let out = &common.output_dir;
    let reports_dir = out.join("reports");
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&reports_dir)?;
    fs::create_dir_all(&ckpt_dir)?;
    write_json(&out.join("config.json"), &cfg)?;

    let mut last_good: Option<(usize, ModelParams)> = None;
    let mut last_stage = 0;
    let result = train_with(&cfg, &ds, |report, params| {
        if report.stage != last_stage {
            println!("epoch {:>3}: entering stage {}", report.epoch, report.stage);
            last_stage = report.stage;
        }
        println!(
            "epoch {:>3}: tau {:.4} lambda {} target {:.3} sizes {}/{}/{} val rsum {:.2}",
            report.epoch,
            report.tau,
            report
                .lambda_current
                .map_or_else(|| "-".to_owned(), |l| format!("{l:.3}")),
            report.lambda_target,
            report.sizes.clean,
            report.sizes.refinable,
            report.sizes.ambiguous,
            report.val.rsum
        );
        let path = reports_dir.join(format!("epoch_{:03}.json", report.epoch));
        write_json(&path, report).map_err(|e| PcsrError::Io(std::io::Error::other(format!("{e:#}"))))?;
        if cfg.checkpoint_every > 0 && report.epoch % cfg.checkpoint_every == 0 {
            save_checkpoint(params, cfg.seed, report.epoch, ckpt_dir.join(format!("epoch_{:03}.ckpt", report.epoch)))?;
        }
        last_good = Some((report.epoch, params.clone()));
        Ok(())
    });
    let run = match result {
        Ok(run) => run,
        Err(err @ PcsrError::Numeric(_)) => {
            let saved = match &last_good {
                Some((epoch, params)) => {
                    let path = ckpt_dir.join("last_good.ckpt");
                    save_checkpoint(params, cfg.seed, *epoch, &path)?;
                    format!("last good checkpoint (epoch {epoch}): {}", path.display())
                }
                None => "no epoch completed, no checkpoint written".to_owned(),
            };
            return Err(Exit {
                code: 3,
                message: format!("training aborted: {err}; {saved}"),
            }
            .into());
        }
        Err(err) => return Err(err.into()),
    };
    write_json(&out.join("history.json"), &run.reports)?;
    let final_path = out.join("final.ckpt");
    save_checkpoint(&run.params, cfg.seed, cfg.total_epochs, &final_path)?;
    println!("wrote {} epoch reports and {}", run.reports.len(), final_path.display());
    Ok(())
}

fn eval(_common: &Common, args: &EvalArgs) -> Result<()> {
    let ds = load_data(&args.data)?;
    let (params, header) =
        load_checkpoint(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    if (header.d_img, header.d_txt) != (ds.d_img(), ds.d_txt()) {
        bail!(Exit {
            code: 2,
            message: format!(
                "checkpoint expects {}/{} image/text dims but the dataset has {}/{}",
                header.d_img,
                header.d_txt,
                ds.d_img(),
                ds.d_txt()
            ),
        });
    }
    let split: SplitName = args.split.parse()?;
    let report = evaluate(&params, &ds, split)?;
    report.check_invariants()?;
    if args.table {
        print!("{}", report.to_table());
    } else {
        println!("{}", serde_json::to_string_pretty(&report)?);
    }
    Ok(())
}

fn read_reports(run_dir: &Path) -> Result<Vec<EpochReport>> {
    let dir = run_dir.join("reports");
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|entry| entry.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == "json"));
    paths.sort();
    if paths.is_empty() {
        bail!(Exit {
            code: 2,
            message: format!("no epoch reports under {}", dir.display()),
        });
    }
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        })
        .collect()
}

fn inspect(args: &InspectArgs) -> Result<()> {
    let reports = read_reports(&args.run)?;
    if args.table {
        println!(
            "{:>5} {:>5} {:>8} {:>7} {:>7} {:>6} {:>6} {:>6} {:>9} {:>9}",
            "epoch", "stage", "tau", "lambda", "target", "clean", "refin", "ambig", "precision", "recall"
        );
        for r in &reports {
            println!(
                "{:>5} {:>5} {:>8.4} {:>7} {:>7.3} {:>6} {:>6} {:>6} {:>9.4} {:>9.4}",
                r.epoch,
                r.stage,
                r.tau,
                r.lambda_current.map_or_else(|| "-".to_owned(), |l| format!("{l:.3}")),
                r.lambda_target,
                r.sizes.clean,
                r.sizes.refinable,
                r.sizes.ambiguous,
                r.division.clean_precision,
                r.division.clean_recall
            );
        }
        return Ok(());
    }
    let rows: Vec<_> = reports
        .iter()
        .map(|r| {
            json!({
                "epoch": r.epoch,
                "stage": r.stage,
                "tau": r.tau,
                "lambda_target": r.lambda_target,
                "lambda_current": r.lambda_current,
                "sizes": r.sizes,
                "clean_precision": r.division.clean_precision,
                "clean_recall": r.division.clean_recall,
                "corrupted_in_refinable": r.division.corrupted_in_refinable,
                "corrupted_in_ambiguous": r.division.corrupted_in_ambiguous,
            })
        })
        .collect();
    println!("{}", serde_json::to_string_pretty(&rows)?);
    Ok(())
}
