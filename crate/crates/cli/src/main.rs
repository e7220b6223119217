use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use fghash::dataset::Split;
use fghash::retrieval::write_rankings;
use fghash::SynthConfig;
use fghash_cli::commands::{self, BenchArgs, BenchMode, EncodeArgs, Overrides, QueryArgs};
use fghash_cli::{exit_code, RunConfig};

#[derive(Parser)]
#[command(name = "fghash", version, about = "Fine-grained image hashing: train, index, query, evaluate")]
struct Cli {
    /// Worker threads for encoding and scans.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long)]
    parts: Option<usize>,
    /// Disable the part exchange during training.
    #[arg(long)]
    no_exchange: bool,
    #[arg(long)]
    topn: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        Overrides {
            seed: self.seed,
            bits: self.bits,
            parts: self.parts,
            no_exchange: self.no_exchange,
            top_n: self.topn,
            top_k: self.topk,
        }
        .apply(&mut cfg)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the checkpoint, database codes and index.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a per-iteration checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Encode the images of a manifest into a code file.
    Encode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write `id,label` rows.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Also write the real-valued features.
        #[arg(long)]
        features: Option<PathBuf>,
        /// Expected code length; must match the model.
        #[arg(long)]
        bits: Option<usize>,
        /// Keep only rows of this split (`train-db` or `query`).
        #[arg(long)]
        split: Option<Split>,
    },
    /// Assemble an index directory from code, label and feature files.
    Index {
        #[arg(long)]
        codes: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank the index for every manifest image; CSV on stdout.
    Query {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        split: Option<Split>,
        #[arg(long, default_value_t = 100)]
        topn: usize,
        #[arg(long, default_value_t = 10)]
        topk: usize,
    },
    /// MAP and precision of trained runs, or of fresh runs per seed.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Trained output directory to score; repeatable.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        /// Train and score once per seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Time exhaustive scans and report memory per representation.
    Bench {
        #[arg(long, default_value_t = 101_000)]
        n: usize,
        #[arg(long, default_value_t = 32)]
        bits: usize,
        #[arg(long, default_value_t = 512)]
        dim: usize,
        #[arg(long, default_value_t = 10)]
        queries: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 10)]
        topk: usize,
        #[arg(long, value_delimiter = ',', default_value = "linear,hamming")]
        modes: Vec<BenchMode>,
        #[arg(long, default_value_t = 8)]
        pq_m: usize,
        #[arg(long, default_value_t = 256)]
        pq_k: usize,
        #[arg(long, default_value_t = 5_000)]
        pq_train: usize,
        #[arg(long, default_value_t = 8)]
        pq_iters: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Scan a saved index instead of random data.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Write the synthetic dataset as PPM images and a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Take generator settings from a run config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = common.load()?;
            let s = commands::train(&cfg, resume.as_deref())?;
            writeln!(
                out,
                "trained on {} images in {:.1}s; objective {:.6e} -> {:.6e}; outputs in {}",
                s.db_size,
                s.seconds,
                s.initial.total,
                s.last.total,
                cfg.output_dir.display()
            )?;
        }
        Command::Encode {
            model,
            manifest,
            out: path,
            labels,
            features,
            bits,
            split,
        } => {
            let n = commands::encode(&EncodeArgs {
                model: &model,
                manifest: &manifest,
                out: &path,
                labels_out: labels.as_deref(),
                features_out: features.as_deref(),
                bits,
                split,
            })?;
            log::info!("encoded {n} images into {}", path.display());
        }
        Command::Index {
            codes,
            labels,
            features,
            out: dir,
        } => {
            let idx = commands::index(&codes, &labels, features.as_deref(), &dir)?;
            log::info!("indexed {} codes into {}", idx.len(), dir.display());
        }
        Command::Query {
            index,
            model,
            manifest,
            split,
            topn,
            topk,
        } => {
            let ranked = commands::query(&QueryArgs {
                index: &index,
                model: &model,
                manifest: &manifest,
                split,
                top_n: topn,
                top_k: topk,
            })?;
            write_rankings(&mut out, &ranked)?;
        }
        Command::Eval {
            common,
            runs,
            seeds,
            csv,
        } => {
            let cfg = common.load()?;
            let rows = commands::eval(&cfg, &runs, &seeds)?;
            commands::write_eval_table(&mut out, &rows, cfg.top_k)?;
            if let Some(p) = csv {
                commands::write_eval_csv(&p, &rows)?;
            }
        }
        Command::Bench {
            n,
            bits,
            dim,
            queries,
            reps,
            topk,
            modes,
            pq_m,
            pq_k,
            pq_train,
            pq_iters,
            seed,
            index,
            csv,
        } => {
            let rows = commands::bench(&BenchArgs {
                n,
                bits,
                dim,
                queries,
                reps,
                k: topk,
                modes,
                pq_m,
                pq_k,
                pq_train,
                pq_iters,
                seed,
                index,
            })?;
            commands::write_bench_table(&mut out, &rows)?;
            if let Some(p) = csv {
                commands::write_bench_csv(&p, &rows)?;
            }
        }
        Command::Synth { out: dir, config, seed } => {
            let mut synth = match config {
                Some(p) => RunConfig::load(&p)?.synth,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                synth.seed = s;
            }
            let manifest = commands::synth(&synth, &dir)?;
            writeln!(out, "{}", manifest.display())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.workers.max(1))
        .build_global()
    {
        log::warn!("could not size the worker pool: {e}");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
