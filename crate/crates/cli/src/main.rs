use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use sonotag::data::{synth_dataset, DatasetIndex, RelabelMode, Split, SynthOptions, ANNOTATIONS};
use sonotag::taxonomy::Taxonomy;
use sonotag::train::{self, RunConfig};

#[derive(Parser)]
#[command(name = "sonotag", version, about = "Hierarchical urban sound tagging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic tone dataset (annotations.csv + audio/).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        clips: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Clip length in seconds.
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
    },
    /// Compute log-mel features for every clip into a cache directory.
    Featurize {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Train a model from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides data.root.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Overrides train.out_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides model.system.
        #[arg(long)]
        system: Option<u32>,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides train.selection_metric.
        #[arg(long)]
        select: Option<String>,
        /// Continue from <out>/last.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint; writes predictions.csv and report.json.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Splits to evaluate, comma separated.
        #[arg(long, default_value = "validate", value_delimiter = ',')]
        split: Vec<Split>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Replace unprotected training labels with a checkpoint's predictions.
    Relabel {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output annotation file.
        #[arg(long)]
        out: PathBuf,
        /// Clip ids kept as they are, one per line; verified clips when absent.
        #[arg(long)]
        protected: Option<PathBuf>,
        /// Threshold the predictions instead of writing soft labels.
        #[arg(long)]
        hard: Option<f64>,
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Finite-difference check of every primitive and the tiny models.
    Gradcheck,
}

fn taxonomy(path: Option<&Path>) -> Result<Taxonomy> {
    Ok(match path {
        Some(p) => Taxonomy::load(p)?,
        None => Taxonomy::bundled(),
    })
}

fn load_index(data: &Path, annotations: Option<&Path>, tax: &Taxonomy) -> Result<(DatasetIndex, PathBuf)> {
    let ann = annotations.map_or_else(|| data.join(ANNOTATIONS), Path::to_path_buf);
    let index = DatasetIndex::load_with(data, &ann, tax)?;
    Ok((index, ann))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            clips,
            seed,
            duration,
        } => {
            let opts = SynthOptions {
                duration_secs: duration,
                ..SynthOptions::default()
            };
            let ann = synth_dataset(&out, clips, seed, &Taxonomy::bundled(), &opts)?;
            println!("wrote {clips} clips ({} annotation rows) to {}", ann.rows.len(), out.display());
        }
        Command::Featurize { data, out, taxonomy: t } => {
            let tax = taxonomy(t.as_deref())?;
            let index = DatasetIndex::load(&data, &tax)?;
            let feats = train::featurize(&index, Some(&out))?;
            println!("cached {} feature files in {}", feats.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            system,
            seed,
            select,
            resume,
        } => {
            let mut cfg = RunConfig::load(&config).with_context(|| format!("reading {}", config.display()))?;
            if let Some(d) = data {
                cfg.data.root = d;
            }
            if let Some(o) = out {
                cfg.train.out_dir = o;
            }
            if let Some(s) = system {
                cfg.model.system = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = select {
                cfg.train.selection_metric = m;
            }
            cfg.train.resume |= resume;
            let started = Instant::now();
            let s = train::cmd_train(&cfg)?;
            println!(
                "trained {} epochs in {:.1}s; best epoch {} ({} = {:.4}); checkpoints in {}",
                s.epochs_run,
                started.elapsed().as_secs_f64(),
                s.best_epoch,
                cfg.train.selection_metric,
                s.best_metric,
                s.out_dir.display()
            );
        }
        Command::Eval {
            ckpt,
            data,
            out,
            split,
            annotations,
            taxonomy: t,
            threshold,
        } => {
            let tax = taxonomy(t.as_deref())?;
            let (index, _) = load_index(&data, annotations.as_deref(), &tax)?;
            let report = train::cmd_eval(&ckpt, &index, &tax, &split, None, &out, threshold)?;
            for (k, v) in report.headline() {
                println!("{k:<20} {v:.4}");
            }
        }
        Command::Relabel {
            ckpt,
            data,
            out,
            protected,
            hard,
            annotations,
            taxonomy: t,
        } => {
            let tax = taxonomy(t.as_deref())?;
            let (index, ann) = load_index(&data, annotations.as_deref(), &tax)?;
            let protected = protected.as_deref().map(train::read_protected).transpose()?;
            let mode = hard.map_or(RelabelMode::Soft, RelabelMode::Hard);
            let s = train::cmd_relabel(&ckpt, &index, &ann, &tax, protected.as_ref(), mode, None, &out)?;
            println!(
                "relabeled {} clips, kept {} protected; wrote {}",
                s.relabeled,
                s.protected,
                out.display()
            );
        }
        Command::Gradcheck => {
            let started = Instant::now();
            let rows = train::cmd_gradcheck()?;
            let mut failed = 0;
            for r in &rows {
                let status = if r.passed() { "ok" } else { "FAIL" };
                if !r.passed() {
                    failed += 1;
                }
                println!(
                    "{:<28} {:>10.3e} < {:.0e} {:>6} elems  {status}",
                    r.name, r.max_rel_error, r.tolerance, r.checked
                );
            }
            println!("{} checks, {failed} failed, {:.1}s", rows.len(), started.elapsed().as_secs_f64());
            if failed > 0 {
                bail!("{failed} gradient checks failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
