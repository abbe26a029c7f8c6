use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fimoda::config::RunConfig;
use fimoda::pipeline::{self, AttributeSummary, ReportSummary};
use fimoda::Error;

/// Further-training gold standard and gradient attribution pipeline.
#[derive(Parser, Debug)]
#[command(name = "fimoda", version)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, short, global = true, default_value = "fimoda.toml")]
    config: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override the number of further-training seeds.
    #[arg(long, global = true)]
    seed_count: Option<usize>,
    /// Override the output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the final model.
    Train,
    /// Run the leave-one-out further-training sweep.
    Gold {
        /// Model file (default: models/final.model in the output directory).
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Score the training subset with every configured method.
    Attribute {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Similarity curves, seed-group curves, top-k and mislabel tables.
    Report,
    /// train, gold, attribute and report.
    All,
}

fn load(cli: &Cli) -> fimoda::Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&cli.config)?.with_seed_count(cli.seed_count);
    if let Some(out) = &cli.output {
        cfg.output = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_attribute(s: &AttributeSummary) {
    for m in &s.written {
        println!("attributed {m}");
    }
    for (m, e) in &s.failures {
        println!("FAILED {m}: {e}");
    }
}

fn print_report(s: &ReportSummary) {
    for c in &s.curves {
        let first = c.points.first().map_or(f64::NAN, |p| p.mean);
        let last = c.points.last().map_or(f64::NAN, |p| p.mean);
        let best = c.max_mean().map_or(f64::NAN, |p| p.mean);
        println!(
            "{} {}: first {first:.4} max {best:.4} final {last:.4}",
            c.method, c.metric
        );
    }
    for (step, auc) in &s.mislabel_auc {
        println!("mislabel auc at step {step}: {auc:.4}");
    }
    for m in &s.missing_methods {
        println!("no attributions for {m}");
    }
}

fn run(cli: &Cli) -> fimoda::Result<()> {
    let cfg = load(cli)?;
    match &cli.command {
        Command::Train => {
            let s = pipeline::cmd_train(&cfg)?;
            println!("final train loss {:.6e}", s.final_loss);
            println!("model written to {}", s.model_path.display());
        }
        Command::Gold { model } => {
            let s = pipeline::cmd_gold(&cfg, model.as_deref())?;
            println!("{} runs", s.runs);
            if s.retrain_runs > 0 {
                println!("{} retraining runs", s.retrain_runs);
            }
        }
        Command::Attribute { model } => {
            let s = pipeline::cmd_attribute(&cfg, model.as_deref())?;
            print_attribute(&s);
            s.into_result()?;
        }
        Command::Report => print_report(&pipeline::cmd_report(&cfg)?),
        Command::All => {
            let s = pipeline::cmd_all(&cfg)?;
            println!("final train loss {:.6e}", s.train.final_loss);
            println!("{} runs", s.gold.runs);
            print_attribute(&s.attribute);
            print_report(&s.report);
            s.attribute.into_result()?;
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers {
        pool = pool.num_threads(w.max(1));
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
