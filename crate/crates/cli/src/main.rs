//! `wsseg`: generate synthetic data, build confidence maps, train, score
//! and sweep.
//!
//! Errors are printed as one line, `<category>: <message>`, and map to
//! exit codes 2 (usage), 3 (data or format) and 4 (numeric failure).

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use wsseg::config::KeyValue;
use wsseg::error::Category;
use wsseg::synthdata::DatasetSpec;
use wsseg::weakmodels::InaccuracyModel;

use run_config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "wsseg", version, about = "Weakly supervised lesion segmentation on synthetic phantoms")]
struct Cli {
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate phantoms, masks and one oval-corrupted manifest per subset.
    Gen {
        /// Number of samples.
        #[arg(long, default_value_t = 40)]
        n: usize,
        /// Image side in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Oval-corrupted samples per subset.
        #[arg(long, default_value_t = 8)]
        k: usize,
        /// Disjoint corrupted subsets.
        #[arg(long, default_value_t = 5)]
        subsets: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a confidence map for every record of a manifest.
    Weights {
        #[arg(long)]
        manifest: PathBuf,
        /// moi1 (Euclidean) or moi2 (Mahalanobis).
        #[arg(long, default_value = "moi1")]
        model: InaccuracyModel,
        /// Exponent applied to oval confidences.
        #[arg(long, default_value_t = 1.0)]
        power: f64,
        /// Offset in the confidence normalisation.
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        /// Write the updated manifest here instead of in place.
        #[arg(long)]
        out_manifest: Option<PathBuf>,
    },
    /// Train one network and write model.ckpt, train.log and run.cfg.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Train on the training part of this cross-validation fold.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Score a checkpoint's averaged weights on accurately labelled records.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Score only this fold's test part.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        /// Also write eval.csv here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-validated comparison of the weighting models over all subsets.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Runs trained concurrently.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the default run configuration.
    Defaults,
}

#[derive(clap::Args, Debug)]
struct RunArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self, mut extra: Vec<String>) -> wsseg::Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(o) = &self.out {
            extra.push(format!("out={}", o.display()));
        }
        overrides.append(&mut extra);
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

fn defaults_help() -> String {
    let mut s = String::from("Config keys and defaults (file or --set KEY=VALUE):\n");
    for (k, v) in RunConfig::default().entries() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}

fn exit_code(c: Category) -> u8 {
    match c {
        Category::Usage => 2,
        Category::Data => 3,
        Category::Numeric => 4,
    }
}

fn run(cli: Cli) -> wsseg::Result<()> {
    let verbose = !cli.quiet;
    match cli.cmd {
        Cmd::Gen {
            n,
            size,
            k,
            subsets,
            seed,
            out,
        } => {
            let spec = DatasetSpec {
                samples: n,
                size,
                k,
                subsets,
                seed,
            };
            spec.validate()?;
            commands::gen(&spec, &out)?;
            if verbose {
                eprintln!("wrote {n} samples and {subsets} manifests to {}", out.display());
            }
        }
        Cmd::Weights {
            manifest,
            model,
            power,
            epsilon,
            out_manifest,
        } => {
            let fallbacks = commands::weights(&commands::WeightsArgs {
                manifest: &manifest,
                model,
                power,
                epsilon,
                out_manifest: out_manifest.as_deref(),
            })?;
            if verbose && fallbacks > 0 {
                eprintln!("{fallbacks} oval masks used a fallback map");
            }
        }
        Cmd::Train { run, manifest, fold } => {
            let mut extra = Vec::new();
            if let Some(m) = manifest {
                extra.push(format!("manifest={}", m.display()));
            }
            if let Some(f) = fold {
                extra.push(format!("fold={f}"));
            }
            let cfg = run.load(extra)?;
            commands::train(&cfg, verbose)?;
        }
        Cmd::Eval {
            checkpoint,
            manifest,
            fold,
            folds,
            split_seed,
            out,
        } => {
            let report = commands::eval(&commands::EvalArgs {
                checkpoint: &checkpoint,
                manifest: &manifest,
                fold,
                folds,
                split_seed,
                out: out.as_deref(),
            })?;
            print!("{}", report.to_text());
        }
        Cmd::Sweep { run, workers } => {
            let extra = workers.map(|w| vec![format!("workers={w}")]).unwrap_or_default();
            let cfg = run.load(extra)?;
            let report = commands::sweep(&cfg, verbose)?;
            print!("{}", report.to_table());
        }
        Cmd::Defaults => print!("{}", RunConfig::default().to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let help = defaults_help();
    let cmd = Cli::command()
        .mut_subcommand("train", |c| c.after_help(help.clone()))
        .mut_subcommand("sweep", |c| c.after_help(help.clone()));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let c = e.category();
            eprintln!("{}: {}", c.as_str(), e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(c))
        }
    }
}
