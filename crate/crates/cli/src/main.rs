//! `fedprompt` — train, evaluate and inspect federated prompt-learning runs.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedprompt::dataset::{partition, write_partition_csv, Preset};
use fedprompt::gradcheck::{run_gradcheck, GradCase};
use fedprompt::ot::{solve_problem_file, ProblemFile};
use fedprompt::runner::{evaluate, load_manifest, run_experiment};
use fedprompt::{load_config, Error, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "fedprompt", version, about)]
struct Cli {
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run federated training and write history, manifest and checkpoints.
    Train {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        clients: Option<usize>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        local_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        /// Train a single (shared) prompt only.
        #[arg(long)]
        single_prompt: bool,
        #[arg(long)]
        no_dpac: bool,
        /// Use the cosine-softmax head instead of transport alignment.
        #[arg(long)]
        no_cmfac: bool,
    },
    /// Test accuracy of every client from saved checkpoints.
    Evaluate {
        /// Checkpoint directory (defaults to the output directory).
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Split a preset across clients and write index lists and counts as CSV.
    Partition {
        #[arg(long, default_value = "synthetic")]
        preset: String,
        #[arg(long, default_value_t = 5)]
        clients: usize,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        configs: usize,
    },
    /// Solve one partial transport problem given as JSON (`-` reads stdin).
    OtSolve { problem: PathBuf },
}

fn experiment_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        // a closed pipe (e.g. `| head`) is not a failure
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn read_problem(path: &Path) -> Result<ProblemFile> {
    let text = if path == Path::new("-") {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        s
    } else {
        std::fs::read_to_string(path)?
    };
    serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train {
            dataset,
            clients,
            rounds,
            local_epochs,
            lr,
            single_prompt,
            no_dpac,
            no_cmfac,
        } => {
            let mut cfg = experiment_config(&cli)?;
            if let Some(name) = dataset {
                cfg.dataset = Preset::parse(name)?;
            }
            cfg.clients = clients.unwrap_or(cfg.clients);
            cfg.rounds = rounds.unwrap_or(cfg.rounds);
            cfg.local_epochs = local_epochs.unwrap_or(cfg.local_epochs);
            cfg.lr = lr.unwrap_or(cfg.lr);
            cfg.dual_prompt &= !single_prompt;
            cfg.dpac &= !no_dpac;
            cfg.cmfac &= !no_cmfac;
            cfg.validate()?;
            let out = cfg.out_dir.clone();
            let outcome = run_experiment(&cfg, &out)?;
            let last = outcome.history.final_mean_accuracy();
            print_json(&serde_json::json!({
                "out_dir": out,
                "rounds": outcome.server.round,
                "final_mean_accuracy": last,
                "bytes_up": outcome.server.bytes_up,
                "bytes_down": outcome.server.bytes_down,
            }))
        }
        Command::Evaluate { checkpoints } => {
            let mut cfg = experiment_config(&cli)?;
            let dir = checkpoints.clone().unwrap_or_else(|| cfg.out_dir.clone());
            // Without an explicit config, evaluate with the one the run was trained with.
            if cli.config.is_none() && dir.join("manifest.json").exists() {
                cfg = load_manifest(&dir)?.config;
            }
            print_json(&serde_json::to_value(evaluate(&cfg, &dir)?)?)
        }
        Command::Partition { preset, clients } => {
            let seed = match (&cli.config, cli.seed) {
                (_, Some(s)) => s,
                (Some(_), None) => experiment_config(&cli)?.seed,
                (None, None) => 0,
            };
            let result = partition(&Preset::parse(preset)?.spec(*clients, seed))?;
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("partition"));
            write_partition_csv(&result, &out)?;
            println!("client_id,train,test");
            for (id, (train, test)) in result.counts().into_iter().enumerate() {
                println!("{id},{train},{test}");
            }
            Ok(())
        }
        Command::Gradcheck { configs } => {
            let reports = run_gradcheck(cli.seed.unwrap_or(0), *configs)?;
            let mut worst_case = None;
            for case in GradCase::ALL {
                let of_case: Vec<_> = reports.iter().filter(|r| r.case == case).collect();
                let block = |f: fn(&fedprompt::gradcheck::GradReport) -> Option<f64>| {
                    of_case
                        .iter()
                        .filter_map(|r| f(r))
                        .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
                };
                let shared = block(|r| r.shared);
                let private = block(|r| r.private);
                let fmt = |x: Option<f64>| x.map_or("-".to_string(), |x| format!("{x:.3e}"));
                let worst = shared.unwrap_or(0.0).max(private.unwrap_or(0.0));
                let ok = worst <= case.tolerance();
                println!(
                    "{:<11} shared {:>10}  private {:>10}  tol {:.0e}  {}",
                    case.name(),
                    fmt(shared),
                    fmt(private),
                    case.tolerance(),
                    if ok { "ok" } else { "FAIL" }
                );
                if !ok {
                    worst_case = Some((case, worst));
                }
            }
            match worst_case {
                Some((case, err)) => Err(Error::GradCheck(format!(
                    "`{}` max relative error {err:.3e} exceeds tolerance",
                    case.name()
                ))),
                None => Ok(()),
            }
        }
        Command::OtSolve { problem } => print_json(&serde_json::to_value(solve_problem_file(
            read_problem(problem)?,
        )?)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            eprintln!("error [{}]: {e}", cat.name());
            ExitCode::from(cat.exit_code() as u8)
        }
    }
}
