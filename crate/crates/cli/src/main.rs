//! `nsn`: reproducible experiment commands over a TOML run config.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nsn_core::config::RunConfig;
use nsn_core::data::load_checkpoint;
use nsn_core::experiments::{
    run_ablation, run_analysis, run_baseline, run_surgery, run_train, write_ablation, write_baseline, write_outputs,
    write_train, AnalysisKind, BaselineKind, RUNLOG_FILE,
};
use nsn_core::{NsnError, Result};

const DEFAULT_OUT: &str = "nsn-out";

#[derive(Parser, Debug)]
#[command(name = "nsn", version, about = "Nested subspace network experiments")]
struct Cli {
    /// Run config (TOML). Without it the built-in default recipe is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed and analysis.seed; for `ablate`, replaces the seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `out_dir` in the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print nothing on success
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one NSN model; writes checkpoint, run log, frontier and summary.
    Train,
    /// Native per-rank specialists or a truncated full-rank model.
    Baseline {
        #[arg(long, value_enum)]
        kind: Kind,
    },
    /// One run per (mode, seed); writes per-run and aggregated tables.
    Ablate,
    /// Replace dense layers of a checkpoint with SVD-initialized NSN layers.
    Surgery {
        #[arg(long)]
        input: PathBuf,
        /// Defaults to `<out>/surgery.nsnc`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run one analysis (or all) on a checkpoint.
    Analyze {
        /// Checkpoint to analyze
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        which: Which,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Native,
    Truncate,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Which {
    Containment,
    Energy,
    Lemma,
    Bound,
    Similarity,
    Frontier,
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.analysis.seed = seed;
        cfg.ablate.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli, &cfg);
    let say = |msg: String| {
        if !cli.quiet {
            println!("{msg}");
        }
    };
    match &cli.command {
        Command::Train => {
            std::fs::create_dir_all(&out)?;
            let run = run_train(&cfg, Some(&out.join(RUNLOG_FILE)))?;
            write_train(&run, &out, true)?;
            let s = &run.summary;
            say(format!(
                "{}: highest {:.4}  avg ID {:.4}  avg OOD {:.4}",
                s.mode, s.highest_accuracy, s.avg_id_accuracy, s.avg_ood_accuracy
            ));
        }
        Command::Baseline { kind } => {
            let kind = match kind {
                Kind::Native => BaselineKind::Native,
                Kind::Truncate => BaselineKind::Truncate,
            };
            let run = run_baseline(&cfg, kind)?;
            write_baseline(&run, &out)?;
            for row in &run.table.rows {
                say(format!("rank {:>3}  flops {:>8}  acc {:.4}", row.rank, row.flops, row.accuracy));
            }
        }
        Command::Ablate => {
            let table = run_ablation(&cfg)?;
            write_ablation(&table, &out)?;
            for r in table.summary() {
                say(format!(
                    "{:<22} highest {:.4}  avg ID {:.4}  avg OOD {:.4}",
                    r.mode.name(),
                    r.highest_mean,
                    r.avg_id_mean,
                    r.avg_ood_mean
                ));
            }
        }
        Command::Surgery { input, output } => {
            let output = output.clone().unwrap_or_else(|| out.join("surgery.nsnc"));
            let report = run_surgery(&cfg, input, &output)?;
            for l in &report.layers {
                say(format!(
                    "layer {}: R {}  relative error {:.3e}",
                    l.index, l.max_rank, l.relative_truncation_error
                ));
            }
        }
        Command::Analyze { checkpoint, which } => analyze(&cfg, checkpoint, *which, &out, &say)?,
    }
    Ok(())
}

fn analyze(cfg: &RunConfig, checkpoint: &Path, which: Which, out: &Path, say: &dyn Fn(String)) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let kinds: Vec<AnalysisKind> = match which {
        Which::Containment => vec![AnalysisKind::Containment],
        Which::Energy => vec![AnalysisKind::Energy],
        Which::Lemma => vec![AnalysisKind::Lemma],
        Which::Bound => vec![AnalysisKind::Bound],
        Which::Similarity => vec![AnalysisKind::Similarity],
        Which::Frontier => vec![AnalysisKind::Frontier],
        Which::All => AnalysisKind::ALL.to_vec(),
    };
    for kind in kinds {
        match run_analysis(cfg, &ckpt, kind) {
            Ok(outputs) => {
                write_outputs(&outputs, out)?;
                for (name, _) in &outputs {
                    say(format!("wrote {}", out.join(name).display()));
                }
            }
            // `all` skips analyses that do not apply to this checkpoint
            Err(NsnError::Unsupported(msg)) if matches!(which, Which::All) => say(format!("skipped {kind:?}: {msg}")),
            Err(e) => return Err(e),
        }
    }
    Ok(())
}
