use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rank1cnn::data::{load_checkpoint, save_checkpoint};
use rank1cnn::hankel::{rank_bound_experiment, FilterFamily, RankExperiment};
use rank1cnn::layers::ConvMode;
use rank1cnn::train::{evaluate, train_network};
use rank1cnn::{network::Network, verify};

mod config;

use config::{cap_threads, ensure_dir, is_usage_error, parse_arch, DataSource, RunConfig, UsageError};

#[derive(Parser)]
#[command(name = "rank1cnn", version, about = "Rank-1 convolutional network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a `key = value` config file.
    Train { config: PathBuf },
    /// Report test accuracy of a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// IDX prefix or `synth:...` description.
        #[arg(long)]
        data: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Run the built-in numerical self checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rank bound experiment on random circular conv layers.
    Hankel {
        #[arg(long, default_value_t = 4)]
        channels: usize,
        #[arg(long, default_value_t = 8)]
        filters: usize,
        #[arg(long, default_value = "6x6", value_parser = parse_pair)]
        size: (usize, usize),
        #[arg(long, default_value = "3x3", value_parser = parse_pair)]
        kernel: (usize, usize),
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Filter families to sample, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "rank1,rank1-shared,dense")]
        families: Vec<FilterFamily>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print factored and dense parameter counts for an architecture.
    Params {
        /// Preset name or inline `input CxHxW; ...` description.
        arch: String,
        #[arg(long, default_value = "rank1")]
        mode: ConvMode,
    },
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once('x').ok_or_else(|| format!("expected AxB, got `{s}`"))?;
    let num = |v: &str| v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| format!("bad extent `{v}`"));
    Ok((num(a)?, num(b)?))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => run_train(&config),
        Command::Eval { checkpoint, data, limit } => run_eval(&checkpoint, &data, limit),
        Command::Verify { seed } => run_verify(seed),
        Command::Hankel {
            channels,
            filters,
            size,
            kernel,
            trials,
            seed,
            families,
            out,
        } => {
            let mut params = RankExperiment::new(channels, filters, size, trials, seed);
            params.kernel = kernel;
            run_hankel(params, &families, out.as_deref())
        }
        Command::Params { arch, mode } => run_params(&arch, mode),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_usage_error(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

fn run_train(path: &Path) -> Result<ExitCode> {
    let mut cfg = RunConfig::load(path)?;
    let env = std::env::var("RANK1_THREADS").ok();
    cfg.train.threads = cap_threads(cfg.train.threads, env.as_deref()).map_err(|e| UsageError(e.to_string()))?;

    let mut train_data = cfg.train_data.load().context("training data")?;
    let mut test_data = cfg.test_data.load().context("test data")?;
    if let Some(n) = cfg.train_limit {
        train_data = train_data.take(n)?;
    }
    if let Some(n) = cfg.test_limit {
        test_data = test_data.take(n)?;
    }
    let (c, h, w) = train_data.sample_shape();
    if (c, h, w) != cfg.arch.input {
        bail!(UsageError(format!(
            "architecture expects {}x{}x{} inputs but the data is {c}x{h}x{w}",
            cfg.arch.input.0, cfg.arch.input.1, cfg.arch.input.2
        )));
    }
    ensure_dir(&cfg.out_dir)?;

    let mut network = Network::new(&cfg.arch, cfg.train.mode, cfg.train.seed)?;
    let report = network.param_report();
    println!("architecture: {}", cfg.arch_name);
    println!("mode: {}", cfg.train.mode.as_str());
    println!("{report}");
    println!(
        "conv parameters: factored {} dense {} (ratio {:.4})",
        report.conv_factored(),
        report.conv_dense(),
        report.conv_factored() as f64 / report.conv_dense().max(1) as f64
    );
    println!("trainable parameters: {}", report.trainable(cfg.train.mode));

    eprintln!(
        "training on {} samples, testing on {}, {} epochs",
        train_data.len(),
        test_data.len(),
        cfg.train.epochs
    );
    let started = Instant::now();
    let per_epoch = train_data.len().div_ceil(cfg.train.batch_size);
    let run = train_network(&mut network, &train_data, Some(&test_data), &cfg.train, |step| {
        if step.iteration % per_epoch == 0 {
            eprintln!("epoch {} done, loss {:.4}", step.epoch, step.loss);
        }
        Ok(())
    })?;

    let metrics = cfg.out_dir.join("metrics.csv");
    let checkpoint = cfg.out_dir.join("model.ckpt");
    run.save_csv(&metrics).with_context(|| format!("writing {}", metrics.display()))?;
    save_checkpoint(&checkpoint, &network, cfg.train.seed).with_context(|| format!("writing {}", checkpoint.display()))?;
    if let Some(acc) = run.final_accuracy() {
        println!("final test accuracy: {acc:.4}");
    }
    eprintln!(
        "finished in {:.1}s; wrote {} and {}",
        started.elapsed().as_secs_f64(),
        metrics.display(),
        checkpoint.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_eval(checkpoint: &Path, data: &str, limit: Option<usize>) -> Result<ExitCode> {
    let mut ckpt = load_checkpoint(checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
    let mut dataset = DataSource::parse(data, Path::new("."))?.load()?;
    if let Some(n) = limit {
        dataset = dataset.take(n)?;
    }
    let acc = evaluate(&mut ckpt.network, &dataset)?;
    eprintln!(
        "{} mode network, {} samples",
        ckpt.network.mode().as_str(),
        dataset.len()
    );
    println!("accuracy: {acc:.6}");
    Ok(ExitCode::SUCCESS)
}

fn run_verify(seed: u64) -> Result<ExitCode> {
    let outcomes = verify::run_all(seed)?;
    for o in &outcomes {
        println!("{o}");
    }
    if verify::all_passed(&outcomes) {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("verification failed");
        Ok(ExitCode::FAILURE)
    }
}

fn run_hankel(params: RankExperiment, families: &[FilterFamily], out: Option<&Path>) -> Result<ExitCode> {
    if families.is_empty() {
        bail!(UsageError("no filter families selected".into()));
    }
    let report = rank_bound_experiment(params, families)?;
    match out {
        Some(path) => report.save_csv(path).with_context(|| format!("writing {}", path.display()))?,
        None => report.write_csv(std::io::stdout().lock())?,
    }
    let mut err = std::io::stderr().lock();
    for &family in families {
        writeln!(
            err,
            "{:<13} rank_Y <= min(rank_H, N, q) in {:5.1}% of {} trials",
            family.as_str(),
            100.0 * report.satisfied_fraction(family),
            params.trials
        )?;
    }
    Ok(ExitCode::SUCCESS)
}

fn run_params(arch: &str, mode: ConvMode) -> Result<ExitCode> {
    let spec = parse_arch(arch)?;
    let report = spec.param_report()?;
    println!("{report}");
    println!("trainable parameters ({}): {}", mode.as_str(), report.trainable(mode));
    Ok(ExitCode::SUCCESS)
}
