use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use vice::commands;
use vice::config::{EvalMode, RunConfig};
use vice::{Result, ViceError};

#[derive(Parser)]
#[command(name = "vice", version, about = "Dense self-supervised concept embeddings over superpixel regions")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `data.dir`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Cluster,
    Linear,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset into `data.dir`.
    GenDataset {
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Train on the train split, logging to `output.dir/metrics.jsonl`.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        epochs: Option<u64>,
    },
    /// Evaluate a checkpoint on the validation split.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        k_eval: Option<usize>,
    },
    /// Input | cluster colors | PCA triptychs.
    Visualize {
        checkpoint: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long)]
        k_eval: Option<usize>,
    },
    /// Time superpixel and grid decomposition; writes a CSV.
    BenchDecompose {
        #[arg(long, value_delimiter = ',', default_value = "8,16")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        images: usize,
    },
    /// Dump the generated views of one training image.
    DumpViews {
        image: String,
        #[arg(long, default_value_t = 0)]
        step: u64,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.data {
        cfg.data.dir = d;
    }
    if let Some(o) = cli.out {
        cfg.output.dir = o;
    }
    match &cli.command {
        Command::GenDataset { images, size, classes } => {
            cfg.dataset.images = images.unwrap_or(cfg.dataset.images);
            cfg.dataset.size = size.unwrap_or(cfg.dataset.size);
            cfg.dataset.classes = classes.unwrap_or(cfg.dataset.classes);
        }
        Command::Train { steps, epochs, .. } => {
            if steps.is_some() || epochs.is_some() {
                cfg.train.steps = *steps;
                cfg.train.epochs = *epochs;
            }
        }
        Command::Eval { k_eval, .. } | Command::Visualize { k_eval, .. } => {
            cfg.eval.k_eval = k_eval.unwrap_or(cfg.eval.k_eval);
        }
        _ => {}
    }
    cfg.validate()?;
    match cli.command {
        Command::GenDataset { .. } => {
            let m = commands::gen_dataset(&cfg)?;
            println!("wrote {} train + {} val images to {}", m.train.len(), m.val.len(), cfg.data.dir.display());
        }
        Command::Train { resume, .. } => {
            let out = commands::train(&cfg, resume.as_deref())?;
            if let Some(last) = out.records.last() {
                println!("step {} loss {:.4}", last.step, last.loss);
            }
            println!("checkpoint {}", out.final_checkpoint.display());
        }
        Command::Eval { checkpoint, mode, .. } => {
            let mode = match mode {
                Some(Mode::Cluster) => EvalMode::Cluster,
                Some(Mode::Linear) => EvalMode::Linear,
                Some(Mode::Both) => EvalMode::Both,
                None => cfg.eval.mode,
            };
            let r = commands::eval(&cfg, &checkpoint, mode)?;
            if let Some(c) = r.cluster {
                println!(
                    "cluster k={} greedy mIoU {:.4} acc {:.4} | hungarian mIoU {:.4} acc {:.4} | random baseline {:.4}",
                    c.k_eval, c.greedy.miou, c.greedy.accuracy, c.hungarian.miou, c.hungarian.accuracy, c.random_baseline_miou
                );
            }
            if let Some(l) = r.linear {
                println!("linear mIoU {:.4} acc {:.4}", l.metrics.miou, l.metrics.accuracy);
            }
        }
        Command::Visualize { checkpoint, images, .. } => {
            for p in commands::visualize(&cfg, &checkpoint, &images)? {
                println!("{}", p.display());
            }
        }
        Command::BenchDecompose { sizes, images } => {
            let rows = commands::bench_decompose(&cfg, &sizes, images)?;
            println!("{} rows -> {}", rows.len(), cfg.output.dir.join("bench_decompose.csv").display());
        }
        Command::DumpViews { image, step } => {
            let files = commands::dump_views(&cfg, &image, step)?;
            println!("{} files", files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            report_chain(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn report_chain(e: &ViceError) {
    let mut src = std::error::Error::source(e);
    while let Some(s) = src {
        eprintln!("  caused by: {s}");
        src = s.source();
    }
}
