//! `ipp`: build graphs, generate scenarios, run and score planners, train
//! and evaluate the learned policy, sweep prior mismatch, render episodes.
//!
//! Exit status is 0 on success, 1 for configuration or usage errors and 2
//! when a run fails.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ipp_core::bench::{
    kl_sweep, render_trajectory, run_matrix, run_paired, scenario_seed_of, write_scenarios,
    ExperimentConfig, RenderOptions,
};
use ipp_core::episode::EpisodeLog;
use ipp_core::envgen::Scenario;
use ipp_core::learn::{curve_csv, train};
use ipp_core::Error;

#[derive(Parser, Debug)]
#[command(name = "ipp", version, about = "Informative path planning experiments")]
struct Cli {
    /// Experiment configuration (TOML). Built-in desk defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configuration seed, including the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for episode runs and training rollouts.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the motion-primitive graph; writes graph.bin and graph.csv.
    BuildGraph,
    /// Generate the scenario suite; writes scenarios/ and scenarios.csv.
    GenScenarios,
    /// Run every planner on every scenario; writes results.csv,
    /// episodes.csv and logs/.
    Run,
    /// Train the actor-critic policy; writes policy.ckpt and curve.csv.
    Train,
    /// Score a policy checkpoint next to the configured baselines; writes
    /// eval.csv and eval_episodes.csv.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Search efficiency per prior-mismatch bucket; writes klsweep.csv and
    /// klsweep_scenarios.csv.
    KlSweep,
    /// Draw a logged episode as SVG.
    Render {
        /// Episode log (JSON lines) written by `run`.
        #[arg(long)]
        log: PathBuf,
        /// Scenario seed; recovered from the log header when omitted.
        #[arg(long)]
        scenario_seed: Option<u64>,
        /// Remaining-budget fractions to snapshot.
        #[arg(long, value_delimiter = ',', default_values_t = [0.7, 0.3, 0.0])]
        snapshots: Vec<f64>,
        #[arg(long, default_value_t = 12)]
        scale: usize,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownPlanner(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => ExperimentConfig::desk(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
        c.learning.seed = s;
    }
    if let Some(o) = &cli.out {
        c.out_dir = o.clone();
    }
    if cli.jobs == 0 {
        return Err(Failure::Config("--jobs must be at least 1".into()));
    }
    c.validate().map_err(|e| Failure::Config(e.to_string()))?;
    Ok(c)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = load_config(cli)?;
    let out = cfg.out_dir.clone();
    match &cli.command {
        Command::BuildGraph => {
            let g = cfg.build_graph()?;
            let mut bin = Vec::new();
            g.write_binary(&mut bin)?;
            write(&out.join("graph.bin"), bin)?;
            write(&out.join("graph.csv"), g.to_csv())?;
            println!(
                "{} nodes, {} edges, mean edge cost {:.3}",
                g.node_count(),
                g.edge_count(),
                g.mean_edge_cost()
            );
        }
        Command::GenScenarios => {
            let scs = write_scenarios(&cfg, &out)?;
            println!("{} scenarios in {}", scs.len(), out.join("scenarios").display());
        }
        Command::Run => {
            let m = run_matrix(&cfg, cli.jobs)?;
            m.write(&out, "results")?;
            print!("{}", m.results_csv());
        }
        Command::Train => {
            let episode = cfg.episode_config()?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cli.jobs)
                .build()
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            let t = pool.install(|| train(&cfg.learning, &episode, &cfg.scenario_config()?))?;
            let mut bin = Vec::new();
            t.net.write_checkpoint(&mut bin)?;
            write(&out.join("policy.ckpt"), bin)?;
            write(&out.join("curve.csv"), curve_csv(&t.curve))?;
            println!(
                "{} rounds, {} sampled actions, final mean reward {:.4}",
                t.curve.len(),
                t.sampled_actions,
                t.curve.last().map_or(0.0, |p| p.mean_reward)
            );
        }
        Command::Eval { checkpoint } => {
            if let Some(c) = checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
            if cfg.checkpoint.is_none() {
                return Err(Failure::Config("eval needs --checkpoint or `checkpoint`".into()));
            }
            let mut planners = vec!["rl".to_string()];
            planners.extend(cfg.planners.iter().filter(|p| *p != "rl").cloned());
            let policy = cfg.load_policy()?;
            let episode = cfg.episode_config()?;
            let scenarios = (0..cfg.scenario_count)
                .map(|i| cfg.scenario(i))
                .collect::<Result<Vec<_>, _>>()?;
            let m = run_paired(&episode, &scenarios, &planners, &cfg.planner, policy, cli.jobs)?;
            write(&out.join("eval.csv"), m.results_csv())?;
            write(&out.join("eval_episodes.csv"), m.episodes_csv())?;
            print!("{}", m.results_csv());
        }
        Command::KlSweep => {
            let k = kl_sweep(&cfg, cli.jobs)?;
            write(&out.join("klsweep.csv"), k.to_csv())?;
            write(&out.join("klsweep_scenarios.csv"), k.scenarios_csv())?;
            println!(
                "{} of {} buckets populated after {} draws",
                k.populated_buckets(),
                k.buckets.len(),
                k.attempts
            );
        }
        Command::Render {
            log,
            scenario_seed,
            snapshots,
            scale,
        } => {
            let f = fs::File::open(log)
                .map_err(|e| Failure::Config(format!("cannot open {}: {e}", log.display())))?;
            let parsed = EpisodeLog::read_jsonl(BufReader::new(f))?;
            let seed = scenario_seed.unwrap_or_else(|| scenario_seed_of(parsed.header.seed));
            let scenario = Scenario::from_seed(seed, &cfg.scenario_config()?)?;
            let episode = cfg.episode_config()?;
            let opts = RenderOptions {
                scale: *scale,
                snapshots: snapshots.clone(),
                ..RenderOptions::default()
            };
            let svg = render_trajectory(&episode, &scenario, &parsed, &opts)?;
            let stem = log.file_stem().map_or("episode".into(), |s| s.to_string_lossy());
            write(&out.join(format!("{stem}.svg")), svg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("configuration error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
