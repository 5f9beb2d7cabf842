//! `ea`: generate benchmarks, train, evaluate, sweep and export feature maps.
//!
//! Exit status is 0 on success, 2 for configuration errors (including bad
//! flags), 3 when training diverges and 1 for anything else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use earth_adapter::bench::{make_benchmark, Benchmark, BenchmarkSpec};
use earth_adapter::checkpoint::Checkpoint;
use earth_adapter::config::Mode;
use earth_adapter::experiment::{
    evaluate_checkpoint, export_pca, run, split_freq_cmd, sweep, worker_limit, write_pca, SweepAxis,
};
use earth_adapter::{pnm, Error, Result, TrainConfig};

#[derive(Parser)]
#[command(name = "ea", version, about = "Frequency-split mixture-of-adapters experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-domain benchmark to disk.
    GenData {
        /// Preset: da-analog or dg-analog.
        #[arg(long, default_value = "da-analog")]
        name: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised pretraining of backbone and decoder on the source domain.
    Pretrain(RunArgs),
    /// Domain generalization: adapters and decoder on labeled source data.
    TrainDg(RunArgs),
    /// Unsupervised adaptation with an EMA teacher and ClassMix.
    TrainDa(RunArgs),
    /// Evaluate a checkpoint on the validation splits.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Benchmark directory; defaults to the one in the checkpoint's config.
        #[arg(long)]
        benchmark: Option<PathBuf>,
    },
    /// One run per value along an axis; writes sweep-<axis>.csv.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// cutoff, dim or freq_layers.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; layer sets are separated by ';'.
        #[arg(long)]
        values: String,
    },
    /// Render PCA maps of the adapter deltas at one layer.
    PcaExport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// P6 image with the model's input size.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
        /// Pixel enlargement of the token grid.
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    /// Split an image into low and high frequency parts.
    SplitFreq {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        rho: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides out.dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self, mode: Mode) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        c.mode = mode;
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        if let Some(o) = &self.out {
            c.out.dir = o.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn train(args: &RunArgs, mode: Mode) -> Result<()> {
    let config = args.config(mode)?;
    let out = run(&config, args.resume.as_deref())?;
    println!("{}", out.summary);
    Ok(())
}

fn eval(checkpoint: &Path, benchmark: Option<&Path>) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let config = ckpt.train_config()?;
    let dir = benchmark.map(Path::to_path_buf).or(config.data.benchmark).ok_or_else(|| Error::Config {
        key: "data.benchmark".into(),
        reason: "not in the checkpoint config; pass --benchmark".into(),
    })?;
    println!("{}", evaluate_checkpoint(&ckpt, &Benchmark::load(&dir)?)?);
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { name, seed, out } => {
            let manifest = make_benchmark(&BenchmarkSpec::preset(&name, seed)?, &out)?;
            println!("{}", manifest.display());
        }
        Command::Pretrain(a) => train(&a, Mode::Pretrain)?,
        Command::TrainDg(a) => train(&a, Mode::Dg)?,
        Command::TrainDa(a) => train(&a, Mode::Da)?,
        Command::Eval { checkpoint, benchmark } => eval(&checkpoint, benchmark.as_deref())?,
        Command::Sweep { run, axis, values } => {
            let mut base = match &run.config {
                Some(p) => TrainConfig::load(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = run.seed {
                base.train.seed = s;
            }
            if let Some(o) = &run.out {
                base.out.dir = o.clone();
            }
            let values = SweepAxis::parse(&axis)?.parse_values(&values)?;
            let bench = earth_adapter::experiment::load_benchmark(&base)?;
            let pretrained = earth_adapter::experiment::load_pretrained(&base)?;
            for row in sweep(&base, &values, &bench, pretrained.as_ref(), worker_limit())? {
                match row.summary {
                    Some(s) => println!("{}: {s}", row.value.label()),
                    None => println!("{}: {}", row.value.label(), row.status),
                }
            }
        }
        Command::PcaExport {
            checkpoint,
            image,
            layer,
            out,
            scale,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let trainer = ckpt.restore(&ckpt.train_config()?)?;
            let img = pnm::read_ppm(&image)?;
            let maps = export_pca(&trainer.net, &trainer.params, &img, layer)?;
            for path in write_pca(&maps, &out, scale)? {
                println!("{}", path.display());
            }
        }
        Command::SplitFreq { image, rho, out } => {
            split_freq_cmd(&image, rho, &out)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                2
            } else if e.is_numeric() {
                3
            } else {
                1
            })
        }
    }
}
