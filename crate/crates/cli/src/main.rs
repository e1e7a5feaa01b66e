use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::Context;
use clap::{Parser, Subcommand};
use ringwarden_core::om::{om_decide, OmParams, Order, RandomStrategy};
use ringwarden_core::scenario::{
    write_outputs, ScenarioError, ScenarioFile, ScoreHistory, ScoreQueryError,
};

#[derive(Parser)]
#[command(
    name = "ringwarden",
    version,
    about = "Token-ring Byzantine fault detection simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenario files and write trace.jsonl, metrics.json and scores.csv.
    Run {
        /// Scenario file; repeat to run several (outputs go to OUT/<file stem>).
        #[arg(long = "scenario", required = true)]
        scenarios: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Replaces protocol.run_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print a node's honest-majority score from a run directory.
    Score {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        node: u32,
        /// Defaults to the last recorded epoch.
        #[arg(long)]
        epoch: Option<u64>,
    },
    /// Run OM(m) against a seeded traitor strategy.
    Om {
        #[arg(long)]
        n: u32,
        #[arg(long)]
        m: u32,
        #[arg(long, default_value = "attack")]
        value: Order,
        /// Comma-separated traitor ids, e.g. 0,3.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        traitors: Vec<u32>,
        #[arg(long, default_value_t = 0)]
        commander: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    /// Bad input: exit status 2.
    Invalid(String),
    /// Anything else: exit status 1.
    Internal(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Internal(e)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            scenarios,
            out,
            seed,
            jobs,
        } => cmd_run(&scenarios, &out, seed, jobs),
        Command::Score { trace, node, epoch } => cmd_score(&trace, node, epoch),
        Command::Om {
            n,
            m,
            value,
            traitors,
            commander,
            seed,
        } => cmd_om(n, m, value, &traitors, commander, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run_one(path: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut scenario = ScenarioFile::load(path).map_err(|e| {
        if e.is_validation() {
            Failure::Invalid(match e {
                ScenarioError::Io { .. } => e.to_string(),
                _ => format!("{}: {e}", path.display()),
            })
        } else {
            Failure::Internal(anyhow::Error::new(e))
        }
    })?;
    if let Some(s) = seed {
        scenario.protocol.run_seed = s;
    }
    let (trace, metrics) = scenario
        .run()
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    write_outputs(out, &trace, &metrics, scenario.protocol.n)
        .with_context(|| format!("writing outputs to {}", out.display()))?;
    Ok(())
}

fn cmd_run(
    scenarios: &[PathBuf],
    out: &Path,
    seed: Option<u64>,
    jobs: usize,
) -> Result<(), Failure> {
    if let [only] = scenarios {
        return run_one(only, out, seed);
    }
    let dirs: Vec<PathBuf> = scenarios
        .iter()
        .map(|p| out.join(p.file_stem().unwrap_or(p.as_os_str())))
        .collect();
    for (i, d) in dirs.iter().enumerate() {
        if dirs[..i].contains(d) {
            return Err(Failure::Invalid(format!(
                "two scenarios would write to {}",
                d.display()
            )));
        }
    }
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<(usize, Failure)>> = Mutex::new(Vec::new());
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, scenarios.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(path) = scenarios.get(i) else { break };
                if let Err(f) = run_one(path, &dirs[i], seed) {
                    failures.lock().expect("no poisoned lock").push((i, f));
                }
            });
        }
    });
    let mut failures = failures.into_inner().expect("no poisoned lock");
    failures.sort_by_key(|f| f.0);
    // Report every failure; the last one returned decides the exit status,
    // with internal errors taking precedence.
    failures.sort_by_key(|(_, f)| matches!(f, Failure::Internal(_)));
    let last = failures.pop();
    for (_, f) in &failures {
        report(f);
    }
    last.map_or(Ok(()), |(_, f)| Err(f))
}

fn report(f: &Failure) {
    match f {
        Failure::Invalid(m) => eprintln!("error: {m}"),
        Failure::Internal(e) => eprintln!("error: {e:#}"),
    }
}

fn cmd_score(dir: &Path, node: u32, epoch: Option<u64>) -> Result<(), Failure> {
    let history = ScoreHistory::load(dir).map_err(|e| match e {
        ScoreQueryError::Io { ref source, .. } if source.kind() != std::io::ErrorKind::NotFound => {
            Failure::Internal(e.into())
        }
        e => Failure::Invalid(e.to_string()),
    })?;
    let score = history
        .score(node, epoch)
        .map_err(|e| Failure::Invalid(e.to_string()))?;
    println!("{score:?}");
    Ok(())
}

fn cmd_om(
    n: u32,
    m: u32,
    value: Order,
    traitors: &[u32],
    commander: u32,
    seed: u64,
) -> Result<(), Failure> {
    let params = OmParams::new(n, m, commander, value, traitors.iter().copied());
    let outcome = om_decide(&params, &mut RandomStrategy { seed })
        .map_err(|e| Failure::Invalid(e.to_string()))?;
    let role = if params.commander_loyal() {
        "loyal"
    } else {
        "traitor"
    };
    println!("commander {commander} ({role}) orders {value}");
    for (l, d) in &outcome.decisions {
        println!("lieutenant {l}: {d}");
    }
    println!("messages {}", outcome.messages);
    println!("ic1 {}", outcome.consistency.ic1);
    println!("ic2 {}", outcome.consistency.ic2);
    Ok(())
}
