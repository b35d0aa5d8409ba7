mod checks;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use checks::{run_group, table, write_summary, CheckRow, Context};
use config::Group;

/// Lower and upper values of BSDE-driven differential games: value
/// iteration, Isaacs PDE, certification and oracle checks.
#[derive(Parser)]
#[command(name = "isaacs-lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lower and upper fields by value iteration.
    Value(RunArgs),
    /// Lower and upper fields by the explicit Isaacs scheme.
    Pde(RunArgs),
    /// Value iteration against the PDE scheme, base and refined.
    Agree(RunArgs),
    /// Localization identity, ODE self-check, sup-inf reduction and rates.
    Certify(RunArgs),
    /// Brute-force, comparison and moment oracles.
    Oracle(RunArgs),
    /// Every group listed in `run.checks`.
    All(RunArgs),
    /// Built-in game families and their parameters.
    ListGames,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, env = "ISAACS_LAB_OUT")]
    out: Option<PathBuf>,
}

fn list_games() -> String {
    let mut s = String::new();
    for f in isaacs_core::games::families() {
        s.push_str(&format!("{}\n    {}\n", f.name, f.summary));
        for p in f.params {
            s.push_str(&format!("    {:<8} = {:<6} {}\n", p.name, p.default, p.doc));
        }
    }
    s
}

fn run(args: RunArgs, groups: Option<Vec<Group>>) -> Result<Vec<CheckRow>, String> {
    let mut cfg = config::load(&args.config).map_err(|e| e.to_string())?;
    if let Some(seed) = args.seed {
        cfg.run.seed = seed;
    }
    let groups = groups.unwrap_or_else(|| {
        let mut g = cfg.run.checks.clone();
        g.sort();
        g.dedup();
        g
    });
    let out = args.out.unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&out).map_err(|e| format!("cannot create output directory {}: {e}", out.display()))?;
    let ctx = Context::new(cfg, out.clone()).map_err(|e| e.to_string())?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = args.threads {
        pool = pool.num_threads(n.max(1));
    }
    let pool = pool.build().map_err(|e| e.to_string())?;

    let mut rows = Vec::new();
    for g in groups {
        rows.extend(pool.install(|| run_group(&ctx, g)));
        // keep whatever finished on disk even if a later group fails
        write_summary(&rows, &out.join("summary.csv")).map_err(|e| e.to_string())?;
    }
    std::fs::write(out.join("summary.txt"), table(&rows)).map_err(|e| e.to_string())?;
    Ok(rows)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (args, groups) = match cli.command {
        Command::ListGames => {
            print!("{}", list_games());
            return ExitCode::SUCCESS;
        }
        Command::Value(a) => (a, Some(vec![Group::Value])),
        Command::Pde(a) => (a, Some(vec![Group::Pde])),
        Command::Agree(a) => (a, Some(vec![Group::Agree])),
        Command::Certify(a) => (a, Some(vec![Group::Certify])),
        Command::Oracle(a) => (a, Some(vec![Group::Oracle])),
        Command::All(a) => (a, None),
    };
    match run(args, groups) {
        Ok(rows) => {
            print!("{}", table(&rows));
            if rows.iter().all(|r| r.passed) {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("isaacs-lab: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn listing_names_every_family_in_order() {
        let s = list_games();
        let names: Vec<&str> = s.lines().filter(|l| !l.starts_with(' ')).collect();
        assert_eq!(names, ["bilinear", "cancellation", "constants", "heat", "sine"]);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
