use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use prunemem::checkpoint;
use prunemem::corpus;
use prunemem::experiment::{self, ExperimentConfig, PruneArtifacts};
use prunemem::pruning::{PruneSpec, PruneStrategy};
use prunemem::report::AuditReport;

/// Magnitude pruning versus verbatim memorization on a tiny decoder.
#[derive(Debug, Parser)]
#[command(name = "prunemem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the training corpus and held-out set as JSONL.
    GenCorpus {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<output_dir>/data`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the baseline model on a generated corpus.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training records (`train.jsonl`).
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the per-step loss history as JSON.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Magnitude-prune a checkpoint. Also writes `<out>.mask.json`,
    /// `<out>.mask.bin` and `<out>.sparsity.json` beside the output.
    Prune {
        #[arg(long)]
        strategy: PruneStrategy,
        #[arg(long)]
        fraction: f64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit the baseline and every pruned variant in a checkpoint directory.
    Audit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        heldout: PathBuf,
        /// Directory holding `baseline.ckpt` and `<strategy>-l<n>.ckpt`.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Audit report JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render an audit report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline from one config.
    RunAll {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Csv,
    Json,
}

enum Failure {
    /// Bad invocation, malformed config or missing input: exit 2.
    Usage(anyhow::Error),
    /// Anything that went wrong while doing the work: exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<prunemem::Error> for Failure {
    fn from(e: prunemem::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn require_file(path: &Path) -> CliResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(anyhow!("no such file: {}", path.display())))
    }
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    require_file(path)?;
    ExperimentConfig::load(path)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(Failure::Usage)
}

fn ensure_parent(path: &Path) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult {
    match cli.command {
        Command::GenCorpus { config, out_dir } => {
            let cfg = load_config(&config)?;
            let dir = out_dir.unwrap_or_else(|| cfg.layout().data());
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let (train, held) = (dir.join("train.jsonl"), dir.join("heldout.jsonl"));
            let (corpus, heldout) = experiment::gen_corpus_files(&cfg.corpus, &train, &held)?;
            println!(
                "wrote {} records ({} training sequences) to {} and {} held-out sequences to {}",
                corpus.records.len(),
                corpus.stream.len(),
                train.display(),
                heldout.len(),
                held.display()
            );
        }
        Command::Train { config, corpus, out, history } => {
            let cfg = load_config(&config)?;
            require_file(&corpus)?;
            let data = experiment::load_corpus(&corpus, cfg.corpus.seed)?;
            ensure_parent(&out)?;
            let hist = experiment::train_to_file(&cfg.model, &cfg.train, &data, &out)?;
            if let Some(path) = history {
                ensure_parent(&path)?;
                experiment::write_json(&path, &hist)?;
            }
            let last = hist.epoch_means.last().copied().unwrap_or(f64::NAN);
            println!("trained {} steps, final epoch mean loss {last:.4}; wrote {}", hist.steps.len(), out.display());
        }
        Command::Prune { strategy, fraction, input, out } => {
            let spec = PruneSpec::new(strategy, fraction).map_err(|e| Failure::Usage(e.into()))?;
            require_file(&input)?;
            let base = checkpoint::load(&input)?;
            ensure_parent(&out)?;
            let artifacts = PruneArtifacts::beside(&out);
            let outcome = experiment::prune_to_files(&base, &spec, &artifacts)?;
            println!(
                "{strategy} at {fraction}: zeroed {} of {} in-scope weights; wrote {}, {}, {}, {}",
                outcome.report.scope_zeros,
                outcome.report.scope_size,
                artifacts.checkpoint.display(),
                artifacts.mask_json.display(),
                artifacts.mask_bin.display(),
                artifacts.sparsity.display()
            );
        }
        Command::Audit { config, corpus, heldout, checkpoints, out } => {
            let cfg = load_config(&config)?;
            require_file(&corpus)?;
            require_file(&heldout)?;
            if !checkpoints.is_dir() {
                return Err(Failure::Usage(anyhow!("no such directory: {}", checkpoints.display())));
            }
            let records = corpus::read_records_jsonl(&corpus)?;
            let held = corpus::read_heldout_jsonl(&heldout)?;
            let report = experiment::audit_checkpoints(&cfg, &records, &held, &checkpoints)?;
            ensure_parent(&out)?;
            fs::write(&out, report.to_json()?).with_context(|| format!("writing {}", out.display()))?;
            for m in &report.missing {
                eprintln!("warning: missing variant {m}");
            }
            println!("wrote {}", out.display());
        }
        Command::Report { input, format, out } => {
            require_file(&input)?;
            let text = fs::read_to_string(&input).with_context(|| format!("reading {}", input.display()))?;
            let report = AuditReport::from_json(&text)
                .with_context(|| format!("malformed report {}", input.display()))
                .map_err(Failure::Usage)?;
            let rendered = match format {
                Format::Text => report.render_text(),
                Format::Csv => report.to_csv(),
                Format::Json => report.to_json()?,
            };
            match out {
                Some(path) => {
                    ensure_parent(&path)?;
                    fs::write(&path, rendered).with_context(|| format!("writing {}", path.display()))?;
                }
                None => print!("{rendered}"),
            }
        }
        Command::RunAll { config, output_dir } => {
            let mut cfg = load_config(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let (manifest, report) = experiment::run_experiment(&cfg)?;
            print!("{}", report.render_text());
            println!(
                "\nconfig {} complete; artifacts under {}",
                &manifest.config_hash[..12],
                cfg.output_dir.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
