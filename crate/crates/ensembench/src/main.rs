use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ensembench::config::{parse_config, ExperimentConfig};
use ensembench::run::{self, Options, RunDir};
use ensembench::suites::{self, Scale, Suite};
use ensembench::{Error, Result};

#[derive(Parser)]
#[command(
    name = "ensembench",
    version,
    about = "Budget-matched ensembles vs deeper or wider networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Recompute outputs that already exist.
    #[arg(long, global = true)]
    force: bool,
    /// Parallel training or evaluation tasks.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output root; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset root used when the config has no `data_path`.
    #[arg(long, global = true, env = "ENSEMBENCH_DATA")]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Print the budget-matched designs and write plan.csv.
    Plan,
    /// Train every job of the config.
    Train {
        /// Train the embedding oracle instead.
        #[arg(long)]
        oracle: bool,
    },
    /// Test accuracy, results.csv and summary.json.
    Eval,
    /// Per-sample input-output Jacobian norms.
    Sensitivity,
    /// t-SNE of oracle features, colored by class and by sensitivity.
    Embed,
    /// Run a named suite end to end.
    Reproduce {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value = "desk")]
        scale: String,
    },
}

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Usage("this command needs --config <file>".into()))?;
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    let mut cfg = parse_config(&text)?;
    apply_flags(cli, &mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn apply_flags(cli: &Cli, cfg: &mut ExperimentConfig) {
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if cfg.data_path.is_none() {
        cfg.data_path = cli.data.clone();
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let opts = Options {
        force: cli.force,
        workers: cli.workers,
    };
    match &cli.command {
        Command::Plan => {
            let cfg = load(cli)?;
            let (_, table) = run::cmd_plan(&cfg)?;
            print!("{}", table);
            println!("wrote {}", RunDir::path_for(&cfg).join("plan.csv").display());
        }
        Command::Train { oracle: true } => {
            let cfg = load(cli)?;
            let trained = run::cmd_train_oracle(&cfg, opts)?;
            println!("oracle {}", if trained { "trained" } else { "already trained" });
        }
        Command::Train { oracle: false } => {
            let cfg = load(cli)?;
            let o = run::cmd_train(&cfg, opts)?;
            println!("trained {} jobs, skipped {}", o.trained.len(), o.skipped.len());
        }
        Command::Eval => {
            let cfg = load(cli)?;
            let rows = run::cmd_eval(&cfg, opts)?;
            println!(
                "{} rows in {}",
                rows.len(),
                RunDir::path_for(&cfg).join("results.csv").display()
            );
        }
        Command::Sensitivity => {
            let cfg = load(cli)?;
            let done = run::cmd_sensitivity(&cfg, opts)?;
            println!("{} sensitivity reports written", done.len());
        }
        Command::Embed => {
            let cfg = load(cli)?;
            for p in run::cmd_embed(&cfg, opts)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Reproduce { suite, scale } => {
            let suite: Suite = suite.parse()?;
            let scale: Scale = scale.parse()?;
            let mut overrides = match &cli.config {
                Some(p) => std::fs::read_to_string(p).map_err(|source| Error::Io {
                    path: p.clone(),
                    source,
                })?,
                None => String::new(),
            };
            if let Some(out) = &cli.out {
                overrides.push_str(&format!("\nout = {}\n", out.display()));
            }
            if let Some(d) = &cli.data {
                if !overrides.lines().any(|l| l.trim_start().starts_with("data_path")) {
                    overrides.push_str(&format!("\ndata_path = {}\n", d.display()));
                }
            }
            let o = suites::reproduce(suite, scale, Some(&overrides), opts)?;
            println!("results in {}", o.run_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            match e {
                Error::Usage(_) | Error::Config { .. } | Error::MissingKeys(_) => ExitCode::from(2),
                Error::Prerequisite(_) => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
