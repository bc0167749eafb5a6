//! Operator entry point: dataset generation, training, evaluation,
//! single-example separation, and the four-variant ablation study.
//!
//! Configuration merges three layers in increasing precedence: a TOML
//! config file (`--config`), `AVSEP_*` environment variables, and command
//! line flags. Unknown keys are rejected, and every artifact embeds the
//! fully resolved configuration.

mod config;
mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avsep::dsp;
use avsep::metrics;
use avsep::separation::{self, Conditioning, Model, TrainConfig, Variant};
use avsep::synthdata::{self, CorpusConfig, Split};

#[derive(Parser)]
#[command(name = "avsep", version, about = "Visually conditioned sound source separation")]
struct Cli {
    /// TOML config file; flags and AVSEP_* env vars override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic audio-visual corpus.
    GenData(GenDataArgs),
    /// Train a separation model.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or the IBM oracle) on a corpus split.
    Eval(EvalArgs),
    /// Separate one mixture conditioned on an image or category.
    Separate(SeparateArgs),
    /// Train and evaluate all four variants over several seeds.
    Ablation(AblationArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    categories: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_per_category: Option<usize>,
    #[arg(long)]
    val_per_category: Option<usize>,
    #[arg(long)]
    test_per_category: Option<usize>,
    #[arg(long)]
    image_size: Option<usize>,
    /// Overwrite an existing corpus directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory (from gen-data).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for the checkpoint and training log.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = Variant::parse)]
    variant: Option<Variant>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_parser = avsep::nets::SoundNetKind::parse)]
    sound_net: Option<avsep::nets::SoundNetKind>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    mixtures_per_epoch: Option<usize>,
    #[arg(long)]
    val_mixtures: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Model checkpoint; omit with --oracle ibm.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Report output path (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Corpus split to score.
    #[arg(long, default_value = "test")]
    split: String,
    /// Cap the number of mixtures scored.
    #[arg(long)]
    limit: Option<usize>,
    /// "ibm" runs the ideal-binary-mask upper bound instead of a model.
    #[arg(long)]
    oracle: Option<String>,
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Mixture waveform (16-bit mono WAV at 11025 Hz).
    #[arg(long)]
    mixture: PathBuf,
    /// Conditioning image (PNG); mutually exclusive with --category.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Conditioning category id (catemb checkpoints only).
    #[arg(long)]
    category: Option<usize>,
    /// Output directory for estimate.wav, mask.png, heatmap.png.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated training seeds.
    #[arg(long, default_value = "1,2,3")]
    seeds: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    mixtures_per_epoch: Option<usize>,
    /// Mixtures scored per evaluation.
    #[arg(long)]
    limit: Option<usize>,
}

fn parse_split(s: &str) -> avsep::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(avsep::AvsepError::Config(format!(
            "unknown split {other:?}; expected train, val, or test"
        ))),
    }
}

fn cmd_gen_data(cfg_path: Option<&Path>, args: &GenDataArgs) -> avsep::Result<()> {
    let mut layer = config::load_layers(cfg_path, "gen-data")?;
    config::set_opt(&mut layer, "categories", args.categories);
    config::set_opt(&mut layer, "seed", args.seed);
    config::set_opt(&mut layer, "train_per_category", args.train_per_category);
    config::set_opt(&mut layer, "val_per_category", args.val_per_category);
    config::set_opt(&mut layer, "test_per_category", args.test_per_category);
    config::set_opt(&mut layer, "image_size", args.image_size);
    let corpus_config: CorpusConfig = config::finish(layer)?;
    let corpus = synthdata::make_corpus(&corpus_config, &args.out, args.force)?;
    println!(
        "wrote {} samples across {} categories to {}",
        corpus.rows.len(),
        corpus_config.categories,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(cfg_path: Option<&Path>, args: &TrainArgs) -> avsep::Result<()> {
    let mut layer = config::load_layers(cfg_path, "train")?;
    config::set_opt(&mut layer, "variant", args.variant.map(|v| v.name().to_string()));
    config::set_opt(&mut layer, "seed", args.seed);
    config::set_opt(&mut layer, "epochs", args.epochs);
    config::set_opt(&mut layer, "k", args.k);
    config::set_opt(&mut layer, "sound_net", args.sound_net.map(|s| s.name().to_string()));
    config::set_opt(&mut layer, "batch_size", args.batch_size);
    config::set_opt(&mut layer, "learning_rate", args.learning_rate);
    config::set_opt(&mut layer, "momentum", args.momentum);
    config::set_opt(&mut layer, "mixtures_per_epoch", args.mixtures_per_epoch);
    config::set_opt(&mut layer, "val_mixtures", args.val_mixtures);
    config::set_opt(&mut layer, "data", args.data.as_ref().map(|p| p.display().to_string()));
    config::set_opt(&mut layer, "out", args.out.as_ref().map(|p| p.display().to_string()));

    let data = config::take_path(&mut layer, "data")?;
    let out = config::take_path(&mut layer, "out")?;
    let train_config: TrainConfig = config::finish(layer)?;

    let corpus = synthdata::load_corpus(&data)?;
    let outcome = separation::train(&corpus, &train_config, &out)?;
    std::fs::write(
        out.join("run_config.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "command": "train",
            "data": data.display().to_string(),
            "config": train_config,
        }))?,
    )?;
    println!(
        "trained {} for {} epochs; best val SDR {:.2} dB at epoch {} -> {}",
        train_config.variant.name(),
        train_config.epochs,
        outcome.best_val_sdr,
        outcome.best_epoch,
        outcome.checkpoint.display()
    );
    Ok(())
}

fn cmd_eval(cfg_path: Option<&Path>, args: &EvalArgs) -> avsep::Result<()> {
    let _ = config::load_layers(cfg_path, "eval")?; // eval takes flags only; file presence still validated
    let corpus = synthdata::load_corpus(&args.data)?;
    let split = parse_split(&args.split)?;

    let (report, default_name) = match args.oracle.as_deref() {
        Some("ibm") => {
            let map = dsp::FreqMap::new();
            let mut predict = metrics::ibm_oracle(&map);
            let echo = serde_json::json!({
                "command": "eval", "oracle": "ibm", "split": args.split, "limit": args.limit,
                "data": args.data.display().to_string(),
            });
            (
                metrics::evaluate_mixtures(&corpus, split, args.limit, echo, "oracle:ibm", &mut predict)?,
                "report_ibm.json",
            )
        }
        Some(other) => {
            return Err(avsep::AvsepError::Config(format!(
                "unknown oracle {other:?}; expected ibm"
            )))
        }
        None => {
            let ckpt = args.checkpoint.as_ref().ok_or_else(|| {
                avsep::AvsepError::Config("--checkpoint required unless --oracle ibm".into())
            })?;
            let model = Model::load(ckpt)?;
            let echo = serde_json::json!({
                "command": "eval", "split": args.split, "limit": args.limit,
                "checkpoint": ckpt.display().to_string(),
                "data": args.data.display().to_string(),
                "train_config": model.config,
            });
            (
                separation::evaluate_model(&model, &corpus, split, args.limit, echo)?,
                "report.json",
            )
        }
    };

    let mut out = args
        .out
        .clone()
        .unwrap_or_else(|| args.data.join(default_name));
    if out.is_dir() {
        out = out.join(default_name);
    }
    std::fs::write(&out, serde_json::to_vec_pretty(&report)?)?;
    print!("{}", report.table());
    println!("report: {}", out.display());
    Ok(())
}

fn cmd_separate(cfg_path: Option<&Path>, args: &SeparateArgs) -> avsep::Result<()> {
    let _ = config::load_layers(cfg_path, "separate")?;
    let model = Model::load(&args.checkpoint)?;
    let mixture = dsp::read_wav(&args.mixture)?;
    let image = args.image.as_ref().map(|p| synthdata::read_png(p)).transpose()?;

    let cond = match (&image, args.category) {
        (Some(img), None) => Conditioning::Image(img),
        (None, Some(c)) => Conditioning::Category(c),
        _ => {
            return Err(avsep::AvsepError::Config(
                "provide exactly one of --image or --category".into(),
            ))
        }
    };
    let separated = separation::separate(&model, cond, &mixture)?;

    std::fs::create_dir_all(&args.out)?;
    dsp::write_wav(args.out.join("estimate.wav"), &separated.estimate)?;
    render::write_mask_png(&args.out.join("mask.png"), &separated.mask.binary)?;
    let base = image.unwrap_or_else(|| ndarray::Array3::zeros((3, 64, 64)));
    render::write_heatmap_overlay(&args.out.join("heatmap.png"), &base, &separated.heatmap)?;
    std::fs::write(
        args.out.join("separate_config.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "command": "separate",
            "checkpoint": args.checkpoint.display().to_string(),
            "mixture": args.mixture.display().to_string(),
            "category": args.category,
            "train_config": model.config,
        }))?,
    )?;
    println!("wrote estimate.wav, mask.png, heatmap.png to {}", args.out.display());
    Ok(())
}

fn median(xs: &mut Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if xs.is_empty() {
        f64::NAN
    } else if xs.len() % 2 == 1 {
        xs[xs.len() / 2]
    } else {
        0.5 * (xs[xs.len() / 2 - 1] + xs[xs.len() / 2])
    }
}

fn cmd_ablation(cfg_path: Option<&Path>, args: &AblationArgs) -> avsep::Result<ExitCode> {
    let _ = config::load_layers(cfg_path, "ablation")?;
    let corpus = synthdata::load_corpus(&args.data)?;
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| avsep::AvsepError::Config(format!("bad seed {s:?}")))
        })
        .collect::<avsep::Result<_>>()?;
    std::fs::create_dir_all(&args.out)?;

    let mut rows = Vec::new();
    let mut any_failed = false;
    for variant in separation::VARIANTS {
        let mut sdrs = Vec::new();
        let mut sirs = Vec::new();
        let mut sars = Vec::new();
        let mut error: Option<String> = None;
        for &seed in &seeds {
            let mut cfg = TrainConfig { variant, seed, ..TrainConfig::default() };
            if let Some(e) = args.epochs {
                cfg.epochs = e;
            }
            if let Some(m) = args.mixtures_per_epoch {
                cfg.mixtures_per_epoch = m;
            }
            let run_dir = args.out.join(format!("{}-seed{}", variant.name(), seed));
            let cell = separation::train(&corpus, &cfg, &run_dir).and_then(|outcome| {
                let model = Model::load(&outcome.checkpoint)?;
                let echo = serde_json::json!({
                    "command": "ablation", "variant": variant.name(), "seed": seed, "config": cfg,
                });
                separation::evaluate_model(&model, &corpus, Split::Test, args.limit, echo)
            });
            match cell {
                Ok(report) => {
                    std::fs::write(
                        run_dir.join("report.json"),
                        serde_json::to_vec_pretty(&report)?,
                    )?;
                    sdrs.push(report.mean_sdr);
                    sirs.push(report.mean_sir);
                    sars.push(report.mean_sar);
                }
                Err(e) => {
                    any_failed = true;
                    error = Some(e.to_string());
                    eprintln!("ablation cell {}/seed {} failed: {e}", variant.name(), seed);
                }
            }
        }
        let failed = error.is_some();
        rows.push(serde_json::json!({
            "variant": variant.name(),
            "seeds_completed": sdrs.len(),
            "median_sdr": median(&mut sdrs),
            "median_sir": median(&mut sirs),
            "median_sar": median(&mut sars),
            "failed": failed,
            "error": error,
        }));
    }

    let table = {
        let mut t = format!(
            "ablation over seeds {:?} (median of per-seed mean test scores)\n{:<12} {:>10} {:>10} {:>10}  status\n",
            seeds, "variant", "SDR", "SIR", "SAR"
        );
        for row in &rows {
            t.push_str(&format!(
                "{:<12} {:>10.2} {:>10.2} {:>10.2}  {}\n",
                row["variant"].as_str().unwrap(),
                row["median_sdr"].as_f64().unwrap_or(f64::NAN),
                row["median_sir"].as_f64().unwrap_or(f64::NAN),
                row["median_sar"].as_f64().unwrap_or(f64::NAN),
                if row["failed"].as_bool().unwrap() { "FAILED" } else { "ok" },
            ));
        }
        t
    };
    print!("{table}");
    std::fs::write(args.out.join("ablation_table.txt"), &table)?;
    std::fs::write(
        args.out.join("ablation.json"),
        serde_json::to_vec_pretty(&serde_json::json!({
            "command": "ablation",
            "seeds": seeds,
            "data": args.data.display().to_string(),
            "base_config": TrainConfig::default(),
            "epochs": args.epochs,
            "mixtures_per_epoch": args.mixtures_per_epoch,
            "rows": rows,
        }))?,
    )?;
    let sdr_bars: Vec<(String, f64)> = rows
        .iter()
        .map(|r| {
            (
                r["variant"].as_str().unwrap().to_string(),
                r["median_sdr"].as_f64().unwrap_or(0.0),
            )
        })
        .collect();
    render::write_bar_chart(&args.out.join("ablation_sdr.png"), &sdr_bars)?;

    Ok(if any_failed { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = cli.config.as_deref();
    let result = match &cli.command {
        Command::GenData(args) => cmd_gen_data(cfg, args).map(|()| ExitCode::SUCCESS),
        Command::Train(args) => cmd_train(cfg, args).map(|()| ExitCode::SUCCESS),
        Command::Eval(args) => cmd_eval(cfg, args).map(|()| ExitCode::SUCCESS),
        Command::Separate(args) => cmd_separate(cfg, args).map(|()| ExitCode::SUCCESS),
        Command::Ablation(args) => cmd_ablation(cfg, args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
