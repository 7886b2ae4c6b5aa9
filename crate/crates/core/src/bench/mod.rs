//! Configuration-driven experiments: paired planner-by-scenario runs,
//! result tables, the prior-mismatch sweep, and trajectory rendering.
//!
//! Every random quantity is derived from the experiment seed, so a rerun of
//! the same configuration reproduces every output file byte for byte.

mod klsweep;
mod render;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envgen::{Scenario, ScenarioConfig};
use crate::episode::{EpisodeConfig, EpisodeLog, EpisodeParams, Metrics};
use crate::error::{Error, Result};
use crate::learn::{ActorCriticNet, MetricTable, TrainConfig};
use crate::planners::{make_planner, run_episode, PlannerSettings, PLANNER_NAMES};
use crate::primitives::{GraphParams, PrimitiveGraph};
use crate::sensor::SensorModel;

pub use klsweep::{kl_sweep, quartiles, BoxStats, KlBucket, KlRow, KlSweepConfig, KlSweepOutput};
pub use render::{render_trajectory, RenderOptions};

/// Stream index of the per-run scenario seeds.
const SCENARIO_STREAM: u64 = 1;

/// Episode noise seeds are the scenario seed with these bits flipped, so a
/// log header identifies the scenario it was run on.
pub const EPISODE_SALT: u64 = 0xa5a5_5eed_0000_0001;

/// Independent 64-bit seed number `index` of stream `stream` under `base`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(base);
    r.set_stream(stream);
    r.set_word_pos(2 * index as u128);
    r.random()
}

pub fn scenario_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, SCENARIO_STREAM, index as u64)
}

pub fn episode_seed_for(scenario_seed: u64) -> u64 {
    scenario_seed ^ EPISODE_SALT
}

pub fn scenario_seed_of(episode_seed: u64) -> u64 {
    episode_seed ^ EPISODE_SALT
}

/// Everything an experiment needs, read from one TOML file. Missing keys
/// take the defaults of the corresponding module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scenario_count: usize,
    pub planners: Vec<String>,
    pub out_dir: PathBuf,
    /// Policy checkpoint used by the `rl` planner.
    pub checkpoint: Option<PathBuf>,
    /// Map size and scenario generator.
    pub grid: ScenarioConfig,
    pub sensor: SensorModel,
    pub graph: GraphParams,
    pub episode: EpisodeParams,
    pub planner: PlannerSettings,
    pub learning: TrainConfig,
    pub kl: KlSweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// Desk-scale experiment: 32x32 maps, 20 scenarios, a budget of about 60
    /// primitives of the default graph.
    pub fn desk() -> Self {
        let grid = ScenarioConfig {
            width: 32,
            height: 32,
            n_targets: (4, 8),
            ..ScenarioConfig::default()
        };
        Self {
            seed: 0,
            scenario_count: 20,
            planners: PLANNER_NAMES[..5].iter().map(|s| s.to_string()).collect(),
            out_dir: PathBuf::from("out"),
            checkpoint: None,
            grid,
            sensor: SensorModel::default(),
            graph: GraphParams::default(),
            episode: EpisodeParams {
                budget: 2800.0,
                ..EpisodeParams::default()
            },
            planner: PlannerSettings::default(),
            learning: TrainConfig::default(),
            kl: KlSweepConfig::default(),
        }
    }

    /// Parses a configuration; keys missing from `text` keep their
    /// [`ExperimentConfig::desk`] values and unknown keys are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg = |e: &dyn std::fmt::Display| Error::Config(e.to_string());
        let user: toml::Table = toml::from_str(text).map_err(|e| cfg(&e))?;
        let mut merged = toml::Table::try_from(Self::desk()).map_err(|e| cfg(&e))?;
        merge(&mut merged, &user);
        let parsed: Self = merged.try_into().map_err(|e| cfg(&e))?;
        let back = toml::Table::try_from(&parsed).map_err(|e| cfg(&e))?;
        if let Some(key) = unknown_key(&user, &back, "") {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        Ok(parsed)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Static checks that need no graph construction.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scenario_count == 0 {
            return bad("scenario_count must be at least 1".into());
        }
        if self.planners.is_empty() {
            return bad("at least one planner is required".into());
        }
        for (i, p) in self.planners.iter().enumerate() {
            if !PLANNER_NAMES.contains(&p.as_str()) {
                return Err(Error::UnknownPlanner(p.clone()));
            }
            if self.planners[..i].contains(p) {
                return bad(format!("planner `{p}` listed twice"));
            }
        }
        if self.planners.iter().any(|p| p == "rl") && self.checkpoint.is_none() {
            return bad("planner `rl` needs `checkpoint`".into());
        }
        if (self.graph.cell_size - self.grid.cell_size).abs() > 1e-12 {
            return bad(format!(
                "graph.cell_size {} differs from grid.cell_size {}",
                self.graph.cell_size, self.grid.cell_size
            ));
        }
        self.grid.dims()?;
        self.kl.validate()?;
        let wrap = |e: Error| Error::Config(e.to_string());
        self.sensor.validate().map_err(wrap)?;
        self.episode.validate().map_err(wrap)?;
        self.learning.validate().map_err(wrap)?;
        Ok(())
    }

    pub fn build_graph(&self) -> Result<PrimitiveGraph> {
        PrimitiveGraph::generate(&self.graph)
    }

    pub fn episode_config(&self) -> Result<EpisodeConfig> {
        self.episode_config_with(Arc::new(self.build_graph()?))
    }

    pub fn episode_config_with(&self, graph: Arc<PrimitiveGraph>) -> Result<EpisodeConfig> {
        EpisodeConfig::new(self.grid.dims()?, self.sensor, graph, self.episode.clone())
    }

    pub fn scenario(&self, index: usize) -> Result<Scenario> {
        Scenario::from_seed(scenario_seed(self.seed, index), &self.scenario_config()?)
    }

    /// The `[grid]` table with obstacles kept off the episode start cell
    /// unless it names a cell itself.
    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        let mut grid = self.grid.clone();
        if grid.keep_clear.is_none() {
            grid.keep_clear = Some(self.episode.start_cell_in(&self.grid.dims()?, &self.sensor));
        }
        Ok(grid)
    }

    pub fn load_policy(&self) -> Result<Option<Arc<ActorCriticNet>>> {
        match &self.checkpoint {
            None => Ok(None),
            Some(path) => {
                let f = fs::File::open(path).map_err(|e| {
                    Error::Config(format!("cannot open checkpoint {}: {e}", path.display()))
                })?;
                let net = ActorCriticNet::read_checkpoint(std::io::BufReader::new(f))?;
                Ok(Some(Arc::new(net)))
            }
        }
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn unknown_key(user: &toml::Table, known: &toml::Table, prefix: &str) -> Option<String> {
    for (k, v) in user {
        let path = format!("{prefix}{k}");
        match (known.get(k), v) {
            (None, _) => return Some(path),
            (Some(toml::Value::Table(kt)), toml::Value::Table(ut)) => {
                if let Some(p) = unknown_key(ut, kt, &format!("{path}.")) {
                    return Some(p);
                }
            }
            _ => {}
        }
    }
    None
}

/// One planner's aggregate over every scenario of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub planner: String,
    pub metrics: MetricTable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub planner: String,
    pub scenario: usize,
    pub scenario_seed: u64,
    pub kl: f64,
    pub metrics: Metrics,
    pub log: EpisodeLog,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatrixOutput {
    pub rows: Vec<ResultRow>,
    /// Ordered by planner, then scenario.
    pub episodes: Vec<EpisodeRecord>,
}

pub const RESULTS_HEADER: &str = "planner,episodes,coverage_mean,coverage_std,\
entropy_reduction_mean,entropy_reduction_std,search_efficiency_mean,search_efficiency_std";

impl MatrixOutput {
    pub fn row(&self, planner: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.planner == planner)
    }

    pub fn results_csv(&self) -> String {
        let mut s = format!("{RESULTS_HEADER}\n");
        for r in &self.rows {
            let m = &r.metrics;
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.planner,
                m.episodes,
                m.coverage.mean,
                m.coverage.std,
                m.entropy_reduction.mean,
                m.entropy_reduction.std,
                m.search_efficiency.mean,
                m.search_efficiency.std
            )
            .unwrap();
        }
        s
    }

    pub fn episodes_csv(&self) -> String {
        let mut s = String::from(
            "planner,scenario,scenario_seed,kl,steps,coverage,entropy_reduction,search_efficiency\n",
        );
        for e in &self.episodes {
            writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                e.planner,
                e.scenario,
                e.scenario_seed,
                e.kl,
                e.log.steps.len(),
                e.metrics.coverage,
                e.metrics.entropy_reduction,
                e.metrics.search_efficiency
            )
            .unwrap();
        }
        s
    }

    pub fn log_file_name(e: &EpisodeRecord) -> String {
        format!("{}_{:03}.jsonl", e.planner, e.scenario)
    }

    /// Writes `<prefix>.csv`, `episodes.csv` and `logs/*.jsonl` under `dir`.
    pub fn write(&self, dir: &Path, prefix: &str) -> Result<()> {
        fs::create_dir_all(dir.join("logs"))?;
        fs::write(dir.join(format!("{prefix}.csv")), self.results_csv())?;
        fs::write(dir.join("episodes.csv"), self.episodes_csv())?;
        for e in &self.episodes {
            fs::write(dir.join("logs").join(Self::log_file_name(e)), e.log.to_jsonl())?;
        }
        Ok(())
    }
}

/// Runs `planners` on the scenarios with the given seeds, paired: each
/// planner sees the same world, prior and episode seed. `jobs` bounds the
/// worker threads; results do not depend on it.
pub fn run_paired(
    config: &EpisodeConfig,
    scenarios: &[Scenario],
    planners: &[String],
    settings: &PlannerSettings,
    policy: Option<Arc<ActorCriticNet>>,
    jobs: usize,
) -> Result<MatrixOutput> {
    // reject bad names before any episode runs
    for p in planners {
        make_planner(p, settings, policy.clone())?;
    }
    let pairs: Vec<(usize, usize)> = (0..planners.len())
        .flat_map(|p| (0..scenarios.len()).map(move |s| (p, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let episodes: Vec<EpisodeRecord> = pool.install(|| {
        pairs
            .par_iter()
            .map(|&(p, s)| {
                let sc = &scenarios[s];
                let mut planner = make_planner(&planners[p], settings, policy.clone())?;
                let state = run_episode(
                    config,
                    &sc.world,
                    &sc.prior,
                    &sc.obstacles,
                    episode_seed_for(sc.seed),
                    planner.as_mut(),
                )?;
                Ok(EpisodeRecord {
                    planner: planners[p].clone(),
                    scenario: s,
                    scenario_seed: sc.seed,
                    kl: sc.kl,
                    metrics: state.metrics()?,
                    log: state.log(config),
                })
            })
            .collect::<Result<_>>()
    })?;
    let rows = planners
        .iter()
        .enumerate()
        .map(|(p, name)| {
            let ms: Vec<Metrics> = episodes[p * scenarios.len()..(p + 1) * scenarios.len()]
                .iter()
                .map(|e| e.metrics)
                .collect();
            ResultRow {
                planner: name.clone(),
                metrics: MetricTable::from_metrics(&ms),
            }
        })
        .collect();
    Ok(MatrixOutput { rows, episodes })
}

/// Every configured planner on every configured scenario.
pub fn run_matrix(config: &ExperimentConfig, jobs: usize) -> Result<MatrixOutput> {
    config.validate()?;
    let policy = config.load_policy()?;
    let episode = config.episode_config()?;
    let scenarios = (0..config.scenario_count)
        .map(|i| config.scenario(i))
        .collect::<Result<Vec<_>>>()?;
    run_paired(
        &episode,
        &scenarios,
        &config.planners,
        &config.planner,
        policy,
        jobs,
    )
}

/// Writes one JSON dump per scenario plus an index CSV.
pub fn write_scenarios(config: &ExperimentConfig, dir: &Path) -> Result<Vec<Scenario>> {
    fs::create_dir_all(dir.join("scenarios"))?;
    let mut index = String::from("index,seed,kl,targets\n");
    let mut out = Vec::new();
    for i in 0..config.scenario_count {
        let sc = config.scenario(i)?;
        fs::write(
            dir.join("scenarios").join(format!("scenario_{i:03}.json")),
            sc.dump()?,
        )?;
        writeln!(index, "{i},{},{},{}", sc.seed, sc.kl, sc.world.target_count()).unwrap();
        out.push(sc);
    }
    fs::write(dir.join("scenarios.csv"), index)?;
    Ok(out)
}

#[cfg(test)]
mod tests;
