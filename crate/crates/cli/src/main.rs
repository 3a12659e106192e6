use std::error::Error;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evklab::evkalign::AlignConfig;
use evklab::experiment::{self, ExperimentConfig, ExperimentError};

#[derive(Parser, Debug)]
#[command(name = "evklab", version, about = "Knowledge editing experiments on a toy transformer")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Toggle the drift-aware alignment term during value optimization.
    #[arg(long, global = true)]
    align: Option<Switch>,
    /// Alignment weight; turns alignment on. Rejected together with `--align off`.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Drift strength of the stability benchmark.
    #[arg(long, global = true)]
    sigma: Option<f64>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    /// Requests per editing round.
    #[arg(long, global = true)]
    batch: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic fact corpus.
    GenCorpus,
    /// Train the toy model on the corpus facts.
    Train {
        /// Continue from the existing pre-edit checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Run the sequential editing rounds.
    Edit {
        /// Pre-edit checkpoint (default: <out>/model_pre.evkm).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Requests as JSON: tokenized requests or Counterfact records.
        #[arg(long)]
        requests: Option<PathBuf>,
    },
    /// Measure embedding and text stability between checkpoints.
    Bench {
        #[arg(long)]
        pre: Option<PathBuf>,
        #[arg(long)]
        post: Option<PathBuf>,
    },
    /// Compute efficacy, generalization, specificity, fluency and consistency.
    Eval {
        #[arg(long)]
        pre: Option<PathBuf>,
        #[arg(long)]
        post: Option<PathBuf>,
        #[arg(long)]
        requests: Option<PathBuf>,
    },
    /// Merge the JSON artifacts into summary.md and summary.csv.
    Report,
    /// Every command in order.
    Run,
}

fn resolve_config(o: &Overrides) -> Result<ExperimentConfig, ExperimentError> {
    let mut cfg = match &o.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(out) = &o.out {
        cfg.output_dir = out.clone();
    }
    match (o.align, o.lambda) {
        (Some(Switch::Off), Some(_)) => {
            return Err(ExperimentError::InvalidConfig("--lambda conflicts with --align off".into()))
        }
        (Some(Switch::Off), None) => cfg.edit.align = None,
        (align, lambda) => {
            if align == Some(Switch::On) || lambda.is_some() {
                let a = cfg.edit.align.get_or_insert_with(AlignConfig::default);
                if let Some(l) = lambda {
                    a.lambda = l;
                }
            }
        }
    }
    if let Some(s) = o.sigma {
        cfg.bench.sigma = s;
    }
    if let Some(r) = o.rounds {
        cfg.rounds = r;
    }
    if let Some(b) = o.batch {
        cfg.batch = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("EVKLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("EVKLAB_THREADS must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn run(cli: &Cli) -> Result<(), Box<dyn Error>> {
    init_threads()?;
    let cfg = resolve_config(&cli.overrides)?;
    match &cli.command {
        Command::GenCorpus => {
            let c = experiment::gen_corpus(&cfg)?;
            println!(
                "{} facts, {} requests, vocabulary of {}",
                c.facts.len(),
                c.requests.len(),
                c.vocabulary.len()
            );
        }
        Command::Train { resume } => {
            let log = experiment::train_model(&cfg, *resume)?;
            println!("steps {} accuracy {:.4}", log.steps_run, log.final_accuracy);
        }
        Command::Edit { checkpoint, requests } => {
            let rec = experiment::edit(&cfg, checkpoint.as_deref(), requests.as_deref())?;
            for r in &rec.rounds {
                println!(
                    "round {} batch efficacy {:.3} cumulative {:.3}",
                    r.snapshot.round, r.snapshot.batch_efficacy, r.snapshot.cumulative_efficacy
                );
            }
        }
        Command::Bench { pre, post } => {
            let b = experiment::bench(&cfg, pre.as_deref(), post.as_deref())?;
            println!(
                "ES {:.2} TS {}",
                b.post.es_score,
                b.post.ts_score.map_or("n/a".into(), |t| format!("{t:.2}"))
            );
        }
        Command::Eval { pre, post, requests } => {
            for r in experiment::eval(&cfg, pre.as_deref(), post.as_deref(), requests.as_deref())? {
                let x = &r.report;
                println!(
                    "{} {}: eff {:.3} gen {:.3} spe {:.3} flu {:.3} consis {:.3}",
                    r.model,
                    x.style.as_str(),
                    x.efficacy,
                    x.generalization,
                    x.specificity,
                    x.fluency,
                    x.consistency
                );
            }
        }
        Command::Report => print_summary(&experiment::report(&cfg.output_dir)?),
        Command::Run => print_summary(&experiment::run_all(&cfg)?),
    }
    Ok(())
}

fn print_summary(s: &experiment::Summary) {
    for w in &s.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {} summary rows", s.rows.len());
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = e.source();
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
