//! Command-line entry point for the slide grading pipeline.

mod config;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::load_config;
use stages::{Layout, StageFailure};

#[derive(Parser)]
#[command(
    name = "histograde",
    about = "Whole-slide-image activity grading: synthetic slides, patch embedding, \
             transformer training, evaluation, rank statistics, and attention heatmaps",
    version
)]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Global seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker thread cap for parallel stages.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory holding all stage artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic slide dataset and manifest.
    Synth,
    /// Compute tissue masks and extract patch grids.
    Preprocess,
    /// Embed patches (or import externally computed embeddings).
    Embed {
        /// Directory of `{slide_id}.emb` files to ingest instead of running
        /// the reference embedder.
        #[arg(long)]
        import: Option<PathBuf>,
    },
    /// Patient-grouped cross-validation training.
    Train,
    /// Metrics report with bootstrap confidence intervals.
    Evaluate,
    /// Cell counting and Mann-Whitney statistics.
    Stats {
        /// Pre-computed cell count table (JSONL) to analyze instead of
        /// running the palette detector.
        #[arg(long)]
        counts: Option<PathBuf>,
        /// Comparison pairs, e.g. `mild:inactive,moderate:mild`; overrides
        /// the config.
        #[arg(long)]
        pairs: Option<String>,
    },
    /// Attention heatmap panels from a trained checkpoint.
    Visualize,
    /// All stages in order.
    Pipeline,
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = cli.threads {
        // Ignore the error if a global pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
    let mut cfg = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&cli.out)?;
    let layout = Layout::new(&cli.out);

    match cli.command {
        Command::Synth => stages::run_synth(&cfg, &layout),
        Command::Preprocess => stages::run_preprocess(&cfg, &layout),
        Command::Embed { import } => stages::run_embed(&cfg, &layout, import.as_deref()),
        Command::Train => stages::run_train(&cfg, &layout),
        Command::Evaluate => stages::run_evaluate(&cfg, &layout),
        Command::Stats { counts, pairs } => {
            if let Some(pairs) = pairs {
                cfg.stats.pairs = pairs;
            }
            stages::run_stats(&cfg, &layout, counts.as_deref())
        }
        Command::Visualize => stages::run_visualize(&cfg, &layout),
        Command::Pipeline => stages::run_pipeline(&cfg, &layout),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let kind = err
                .downcast_ref::<StageFailure>()
                .map(|f| f.kind)
                .unwrap_or("runtime");
            let payload = serde_json::json!({
                "error": kind,
                "message": format!("{err:#}"),
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}
