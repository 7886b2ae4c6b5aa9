//! Baseline planners behind a common [`Planner`] interface.
//!
//! Each planner sees the episode state, the current observation and the
//! valid mask and returns a non-empty sequence of edge indices. Single-step
//! planners return one edge; CMA-ES returns its whole decoded horizon, which
//! the runner executes before asking again. Lookahead always works on a copy
//! of the belief, never on the episode itself.

mod cmaes;

pub use cmaes::{cma_es_minimize, default_population, CmaesOptions, CmaesResult};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{EpisodeConfig, EpisodeState, Observation};
use crate::error::{Error, Result};
use crate::grid::{binary_entropy, BinaryMeasurement, Cell, OccupancyGrid, ProbField, WorldMap};

/// Names accepted by [`make_planner`].
pub const PLANNER_NAMES: [&str; 6] = ["greedy", "dp", "cmaes", "coverage", "pcoverage", "rl"];

pub trait Planner: Send {
    fn name(&self) -> &str;

    /// Next edges to execute from the current state; never empty, and the
    /// first entry always satisfies `mask`.
    fn plan(
        &mut self,
        state: &EpisodeState,
        obs: &Observation,
        mask: &[bool],
        config: &EpisodeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>>;
}

/// Planner hyperparameters as they appear in an experiment file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerSettings {
    /// Weight on belief mass in the information utility.
    pub f1: f64,
    /// Weight on cell entropy in the information utility.
    pub f2: f64,
    pub dp_horizon: usize,
    pub cmaes_horizon: usize,
    pub cmaes_max_evals: usize,
    pub cmaes_population: Option<usize>,
    pub cmaes_sigma0: f64,
}

impl Default for PlannerSettings {
    fn default() -> Self {
        Self {
            f1: 0.5,
            f2: 0.5,
            dp_horizon: 3,
            cmaes_horizon: 6,
            cmaes_max_evals: 2000,
            cmaes_population: None,
            cmaes_sigma0: 1.0,
        }
    }
}

/// `sum f1 p + f2 H(p)` over `cells` under `belief`.
pub fn info_utility(belief: &OccupancyGrid, cells: &[Cell], f1: f64, f2: f64) -> f64 {
    let dims = *belief.dims();
    cells
        .iter()
        .map(|&(x, y)| {
            let p = belief.posterior_at(y * dims.width + x);
            f1 * p + f2 * binary_entropy(p)
        })
        .sum()
}

/// Applies the most likely measurement (`z = 1` iff posterior >= 0.5) to
/// each cell of a belief copy.
pub fn simulate_ml_update(belief: &mut OccupancyGrid, cells: &[Cell], p_correct: f64) -> Result<()> {
    for &c in cells {
        let z = belief.posterior(c)? >= 0.5;
        belief.update_cell(&BinaryMeasurement::new(c, z, p_correct)?)?;
    }
    Ok(())
}

/// Like [`simulate_ml_update`] but returns the overwritten log-odds so the
/// caller can undo the update with [`restore`].
fn simulate_saving(belief: &mut OccupancyGrid, cells: &[Cell], p_correct: f64) -> Result<Vec<(usize, f64)>> {
    let dims = *belief.dims();
    let mut saved = Vec::with_capacity(cells.len());
    for &c in cells {
        saved.push((dims.index(c)?, belief.logodds(c)?));
    }
    simulate_ml_update(belief, cells, p_correct)?;
    Ok(saved)
}

fn restore(belief: &mut OccupancyGrid, saved: &[(usize, f64)]) {
    for &(i, l) in saved.iter().rev() {
        belief.set_logodds_at(i, l);
    }
}

fn check_mask(mask: &[bool]) -> Result<()> {
    if mask.iter().any(|&v| v) {
        Ok(())
    } else {
        Err(Error::NoValidAction)
    }
}

/// Argmax of `score` over valid edges; ties go to the lowest index.
fn argmax_valid(mask: &[bool], mut score: impl FnMut(usize) -> f64) -> Result<usize> {
    check_mask(mask)?;
    let mut best: Option<(usize, f64)> = None;
    for (e, &ok) in mask.iter().enumerate() {
        if !ok {
            continue;
        }
        let s = score(e);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((e, s));
        }
    }
    Ok(best.expect("mask has a valid edge").0)
}

/// Pose reached by taking `edge` from `(agent, node)`.
fn advance(config: &EpisodeConfig, agent: Cell, node: usize, edge: usize) -> (Cell, usize, f64) {
    let prim = &config.graph.edges[node][edge];
    let end = config.geometry(node, edge).end;
    (
        (
            (agent.0 as i64 + end.0) as usize,
            (agent.1 as i64 + end.1) as usize,
        ),
        prim.end_node,
        prim.cost,
    )
}

pub fn greedy_plan(
    state: &EpisodeState,
    config: &EpisodeConfig,
    mask: &[bool],
    f1: f64,
    f2: f64,
) -> Result<usize> {
    argmax_valid(mask, |e| {
        let cells = config.sensed_cells(state.agent_cell, state.node, e);
        info_utility(&state.belief, &cells, f1, f2)
    })
}

/// Depth-limited exhaustive search over primitive sequences scored by
/// cumulative utility under maximum-likelihood simulated measurements.
/// Returns the best sequence; ties go to the lexicographically smallest.
pub fn dp_sequence(
    state: &EpisodeState,
    config: &EpisodeConfig,
    mask: &[bool],
    horizon: usize,
    f1: f64,
    f2: f64,
) -> Result<(f64, Vec<usize>)> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    check_mask(mask)?;
    let mut belief = state.belief.clone();
    let search = Search {
        state,
        config,
        f1,
        f2,
        p_correct: config.sensor.accuracy(),
    };
    search.run(
        &mut belief,
        state.agent_cell,
        state.node,
        state.budget_left,
        horizon,
        Some(mask),
    )
}

pub fn dp_plan(
    state: &EpisodeState,
    config: &EpisodeConfig,
    mask: &[bool],
    horizon: usize,
    f1: f64,
    f2: f64,
) -> Result<usize> {
    Ok(dp_sequence(state, config, mask, horizon, f1, f2)?.1[0])
}

struct Search<'a> {
    state: &'a EpisodeState,
    config: &'a EpisodeConfig,
    f1: f64,
    f2: f64,
    p_correct: f64,
}

impl Search<'_> {
    fn run(
        &self,
        belief: &mut OccupancyGrid,
        agent: Cell,
        node: usize,
        budget: f64,
        depth: usize,
        mask: Option<&[bool]>,
    ) -> Result<(f64, Vec<usize>)> {
        let owned;
        let mask = match mask {
            Some(m) => m,
            None => {
                owned = self.state.mask_from(self.config, agent, node, budget);
                &owned
            }
        };
        let mut best: Option<(f64, Vec<usize>)> = None;
        for (e, &ok) in mask.iter().enumerate() {
            if !ok {
                continue;
            }
            let cells = self.config.sensed_cells(agent, node, e);
            let u = info_utility(belief, &cells, self.f1, self.f2);
            let (sub, tail) = if depth > 1 {
                let saved = simulate_saving(belief, &cells, self.p_correct)?;
                let (next, next_node, cost) = advance(self.config, agent, node, e);
                let r = self.run(belief, next, next_node, budget - cost, depth - 1, None)?;
                restore(belief, &saved);
                r
            } else {
                (0.0, Vec::new())
            };
            let score = u + sub;
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                let mut seq = Vec::with_capacity(tail.len() + 1);
                seq.push(e);
                seq.extend(tail);
                best = Some((score, seq));
            }
        }
        Ok(best.unwrap_or((0.0, Vec::new())))
    }
}

/// Decodes a CMA-ES decision vector into an edge sequence: step `k` takes
/// the valid edge with the largest entry in slice `k` (lowest index on
/// ties) and the sequence stops at the first step with no valid edge. The
/// first step is restricted to `mask`.
/// Returns the cumulative simulated utility alongside.
pub fn decode_sequence(
    state: &EpisodeState,
    config: &EpisodeConfig,
    mask: &[bool],
    belief: &mut OccupancyGrid,
    x: &[f64],
    horizon: usize,
    f1: f64,
    f2: f64,
) -> Result<(f64, Vec<usize>)> {
    let a_max = config.max_out_degree();
    let p_correct = config.sensor.accuracy();
    let (mut agent, mut node, mut budget) = (state.agent_cell, state.node, state.budget_left);
    let mut total = 0.0;
    let mut seq = Vec::with_capacity(horizon);
    let mut undo = Vec::new();
    for k in 0..horizon {
        let owned;
        let mask = if k == 0 {
            mask
        } else {
            owned = state.mask_from(config, agent, node, budget);
            &owned[..]
        };
        if !mask.iter().any(|&v| v) {
            break;
        }
        let slice = &x[k * a_max..(k + 1) * a_max];
        let e = argmax_valid(&mask, |e| slice[e])?;
        let cells = config.sensed_cells(agent, node, e);
        total += info_utility(belief, &cells, f1, f2);
        undo.push(simulate_saving(belief, &cells, p_correct)?);
        let (next, next_node, cost) = advance(config, agent, node, e);
        agent = next;
        node = next_node;
        budget -= cost;
        seq.push(e);
    }
    for saved in undo.iter().rev() {
        restore(belief, saved);
    }
    Ok((total, seq))
}

/// Optimizes a horizon of edge choices with CMA-ES and returns the decoded
/// best sequence (length between 1 and `horizon`).
pub fn cmaes_plan(
    state: &EpisodeState,
    config: &EpisodeConfig,
    mask: &[bool],
    horizon: usize,
    opts: &CmaesOptions,
    f1: f64,
    f2: f64,
) -> Result<Vec<usize>> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    check_mask(mask)?;
    let dim = horizon * config.max_out_degree();
    let mut belief = state.belief.clone();
    let mut failure = None;
    let result = cma_es_minimize(
        |x| match decode_sequence(state, config, mask, &mut belief, x, horizon, f1, f2) {
            Ok((u, _)) => -u,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        &vec![0.0; dim],
        opts,
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    let (_, seq) = decode_sequence(state, config, mask, &mut belief, &result.x, horizon, f1, f2)?;
    if seq.is_empty() {
        return Err(Error::NoValidAction);
    }
    Ok(seq)
}

fn uncovered(state: &EpisodeState, config: &EpisodeConfig, e: usize) -> Vec<usize> {
    let dims = config.dims;
    config
        .sensed_cells(state.agent_cell, state.node, e)
        .into_iter()
        .map(|(x, y)| y * dims.width + x)
        .filter(|&i| !state.coverage[i])
        .collect()
}

/// When no valid edge reaches an uncovered cell, the edge whose end cell is
/// closest to any uncovered free cell (ties to the lowest index). `None` if
/// the map is fully covered.
fn toward_uncovered(state: &EpisodeState, config: &EpisodeConfig, mask: &[bool]) -> Result<Option<usize>> {
    let dims = config.dims;
    let open: Vec<Cell> = (0..dims.len())
        .filter(|&i| !state.coverage[i] && !state.obstacles.get(i).copied().unwrap_or(false))
        .map(|i| dims.cell(i))
        .collect();
    if open.is_empty() {
        return Ok(None);
    }
    let e = argmax_valid(mask, |e| {
        let (end, _, _) = advance(config, state.agent_cell, state.node, e);
        let d2 = open
            .iter()
            .map(|&(x, y)| {
                let dx = x as i64 - end.0 as i64;
                let dy = y as i64 - end.1 as i64;
                dx * dx + dy * dy
            })
            .min()
            .expect("open is non-empty");
        -(d2 as f64)
    })?;
    Ok(Some(e))
}

/// Runs the one-step coverage argmax and falls back to
/// [`toward_uncovered`] when every valid edge scores zero.
fn coverage_argmax(
    state: &EpisodeState,
    config: &EpisodeConfig,
    mask: &[bool],
    mut score: impl FnMut(usize) -> f64,
) -> Result<usize> {
    let mut best = f64::NEG_INFINITY;
    let e = argmax_valid(mask, |e| {
        let s = score(e);
        best = best.max(s);
        s
    })?;
    if best > 0.0 {
        return Ok(e);
    }
    Ok(toward_uncovered(state, config, mask)?.unwrap_or(e))
}

/// Edge sensing the most cells not yet covered.
pub fn coverage_plan(state: &EpisodeState, config: &EpisodeConfig, mask: &[bool]) -> Result<usize> {
    coverage_argmax(state, config, mask, |e| uncovered(state, config, e).len() as f64)
}

/// Edge sensing the most belief mass over cells not yet covered.
pub fn prioritized_coverage_plan(
    state: &EpisodeState,
    config: &EpisodeConfig,
    mask: &[bool],
) -> Result<usize> {
    coverage_argmax(state, config, mask, |e| {
        uncovered(state, config, e)
            .into_iter()
            .map(|i| state.belief.posterior_at(i))
            .sum()
    })
}

pub struct Greedy {
    pub f1: f64,
    pub f2: f64,
}

impl Planner for Greedy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn plan(
        &mut self,
        state: &EpisodeState,
        _obs: &Observation,
        mask: &[bool],
        config: &EpisodeConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        Ok(vec![greedy_plan(state, config, mask, self.f1, self.f2)?])
    }
}

pub struct RecedingHorizon {
    pub horizon: usize,
    pub f1: f64,
    pub f2: f64,
}

impl Planner for RecedingHorizon {
    fn name(&self) -> &str {
        "dp"
    }

    fn plan(
        &mut self,
        state: &EpisodeState,
        _obs: &Observation,
        mask: &[bool],
        config: &EpisodeConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        Ok(vec![dp_plan(state, config, mask, self.horizon, self.f1, self.f2)?])
    }
}

pub struct Cmaes {
    pub horizon: usize,
    pub options: CmaesOptions,
    pub f1: f64,
    pub f2: f64,
}

impl Planner for Cmaes {
    fn name(&self) -> &str {
        "cmaes"
    }

    fn plan(
        &mut self,
        state: &EpisodeState,
        _obs: &Observation,
        mask: &[bool],
        config: &EpisodeConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        let opts = CmaesOptions {
            seed: rng.random(),
            ..self.options.clone()
        };
        cmaes_plan(state, config, mask, self.horizon, &opts, self.f1, self.f2)
    }
}

pub struct Coverage;

impl Planner for Coverage {
    fn name(&self) -> &str {
        "coverage"
    }

    fn plan(
        &mut self,
        state: &EpisodeState,
        _obs: &Observation,
        mask: &[bool],
        config: &EpisodeConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        Ok(vec![coverage_plan(state, config, mask)?])
    }
}

pub struct PrioritizedCoverage;

impl Planner for PrioritizedCoverage {
    fn name(&self) -> &str {
        "pcoverage"
    }

    fn plan(
        &mut self,
        state: &EpisodeState,
        _obs: &Observation,
        mask: &[bool],
        config: &EpisodeConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        Ok(vec![prioritized_coverage_plan(state, config, mask)?])
    }
}

/// Builds a planner by its registered name. `"rl"` needs a trained network.
pub fn make_planner(
    name: &str,
    settings: &PlannerSettings,
    policy: Option<std::sync::Arc<crate::learn::ActorCriticNet>>,
) -> Result<Box<dyn Planner>> {
    let s = settings;
    Ok(match name {
        "greedy" => Box::new(Greedy { f1: s.f1, f2: s.f2 }),
        "dp" => Box::new(RecedingHorizon {
            horizon: s.dp_horizon,
            f1: s.f1,
            f2: s.f2,
        }),
        "cmaes" => Box::new(Cmaes {
            horizon: s.cmaes_horizon,
            options: CmaesOptions {
                population: s.cmaes_population,
                sigma0: s.cmaes_sigma0,
                max_evals: s.cmaes_max_evals,
                seed: 0,
            },
            f1: s.f1,
            f2: s.f2,
        }),
        "coverage" => Box::new(Coverage),
        "pcoverage" => Box::new(PrioritizedCoverage),
        "rl" => match policy {
            Some(net) => Box::new(crate::learn::PolicyPlanner::new(net)),
            None => {
                return Err(Error::Config(
                    "planner \"rl\" needs a policy checkpoint".into(),
                ))
            }
        },
        other => return Err(Error::UnknownPlanner(other.to_string())),
    })
}

/// Runs one episode to completion. Planners see the valid edges that keep
/// the agent in a viable pose (see [`EpisodeState::viable_poses`]); each
/// returned plan runs in full unless its next edge stops being safe, in
/// which case the planner is asked again.
pub fn run_episode(
    config: &EpisodeConfig,
    world: &WorldMap,
    prior: &ProbField,
    obstacles: &[bool],
    seed: u64,
    planner: &mut dyn Planner,
) -> Result<EpisodeState> {
    let (mut state, mut obs) = EpisodeState::reset(config, world, prior, obstacles, seed)?;
    let viable = state.viable_poses(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    while !state.done {
        let mask = state.safe_actions(config, &viable);
        let plan = planner.plan(&state, &obs, &mask, config, &mut rng)?;
        match plan.first() {
            None => return Err(Error::NoValidAction),
            Some(&a) if !mask.get(a).copied().unwrap_or(false) => {
                return Err(Error::InvalidAction { action: a })
            }
            _ => {}
        }
        for (k, a) in plan.into_iter().enumerate() {
            if k > 0 {
                let safe = state.safe_actions(config, &viable);
                if state.done || !safe.get(a).copied().unwrap_or(false) {
                    break;
                }
            }
            obs = state.step(config, a)?.observation;
        }
    }
    Ok(state)
}
