//! The search episode: state, action masking, execution with in-flight
//! sensing, the four-part reward, observations, and terminal metrics.
//!
//! An episode owns its belief, coverage and obstacle maps plus a seeded rng
//! for measurement noise. The primitive graph is shared read-only through
//! [`EpisodeConfig`], so any number of episodes can run side by side.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{binary_entropy, Cell, GridDims, OccupancyGrid, ProbField, WorldMap};
use crate::primitives::PrimitiveGraph;
use crate::sensor::SensorModel;

/// Tunable episode settings. Everything here is plain data so it can live in
/// a configuration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeParams {
    /// Total primitive cost allowed per episode.
    pub budget: f64,
    pub w_entropy: f64,
    pub w_coverage: f64,
    pub w_target: f64,
    pub w_cost: f64,
    /// Bonus shared evenly among the targets of a world.
    pub target_bonus_total: f64,
    pub found_threshold: f64,
    /// Side of the egocentric window in pooled cells; odd.
    pub obs_window: usize,
    /// Pooling factors, strictly ascending.
    pub obs_scales: Vec<usize>,
    /// Sensing points per executed primitive.
    pub sense_points: usize,
    /// Defaults to the map corner offset by the footprint half-width.
    pub start_cell: Option<Cell>,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self {
            budget: 2000.0,
            w_entropy: 1.0,
            w_coverage: 1.0,
            w_target: 1.0,
            w_cost: 0.01,
            target_bonus_total: 100.0,
            found_threshold: crate::grid::FOUND_THRESHOLD,
            obs_window: 11,
            obs_scales: vec![1, 2, 4],
            sense_points: 3,
            start_cell: None,
        }
    }
}

impl EpisodeParams {
    pub fn start_cell_in(&self, dims: &GridDims, sensor: &SensorModel) -> Cell {
        self.start_cell.unwrap_or_else(|| {
            let hw = sensor.half_width(dims.cell_size);
            (hw.min(dims.width - 1), hw.min(dims.height - 1))
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return bad(format!("budget must be positive, got {}", self.budget));
        }
        if self.obs_window % 2 == 0 {
            return bad(format!("obs_window must be odd, got {}", self.obs_window));
        }
        if self.obs_scales.is_empty()
            || self.obs_scales[0] == 0
            || self.obs_scales.windows(2).any(|w| w[0] >= w[1])
        {
            return bad(format!(
                "obs_scales must be non-empty, positive and ascending, got {:?}",
                self.obs_scales
            ));
        }
        if self.sense_points == 0 {
            return bad("sense_points must be at least 1".into());
        }
        if !(self.found_threshold > 0.5 && self.found_threshold < 1.0) {
            return bad(format!(
                "found_threshold must lie in (0.5, 1), got {}",
                self.found_threshold
            ));
        }
        Ok(())
    }
}

/// Per-edge geometry relative to the edge's start cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGeometry {
    pub end: (i64, i64),
    /// Distinct cells on the sampled path.
    pub swept: Vec<(i64, i64)>,
    /// Union of sensor footprints at the sensing points, first-seen order.
    pub sensed: Vec<(i64, i64)>,
}

/// Immutable episode setup shared by every episode of a run.
#[derive(Clone, Debug)]
pub struct EpisodeConfig {
    pub dims: GridDims,
    pub sensor: SensorModel,
    pub graph: Arc<PrimitiveGraph>,
    pub params: EpisodeParams,
    geometry: Vec<Vec<EdgeGeometry>>,
    hash: String,
}

impl EpisodeConfig {
    pub fn new(
        dims: GridDims,
        sensor: SensorModel,
        graph: Arc<PrimitiveGraph>,
        params: EpisodeParams,
    ) -> Result<Self> {
        params.validate()?;
        sensor.validate()?;
        graph.validate()?;
        if (graph.cell_size - dims.cell_size).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "graph cell size {} differs from map cell size {}",
                graph.cell_size, dims.cell_size
            )));
        }
        let hw = sensor.half_width(dims.cell_size) as i64;
        let geometry = graph
            .edges
            .iter()
            .map(|list| {
                list.iter()
                    .map(|p| {
                        let mut sensed = Vec::new();
                        for (sx, sy) in p.sense_offsets(params.sense_points) {
                            for y in sy - hw..=sy + hw {
                                for x in sx - hw..=sx + hw {
                                    if !sensed.contains(&(x, y)) {
                                        sensed.push((x, y));
                                    }
                                }
                            }
                        }
                        EdgeGeometry {
                            end: (p.displacement.0 as i64, p.displacement.1 as i64),
                            swept: p.swept_offsets(),
                            sensed,
                        }
                    })
                    .collect()
            })
            .collect();

        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&(&dims, &sensor, &params))?);
        let mut g = Vec::new();
        graph.write_binary(&mut g)?;
        h.update(&g);
        let hash = hex::encode(h.finalize());

        Ok(Self {
            dims,
            sensor,
            graph,
            params,
            geometry,
            hash,
        })
    }

    pub fn geometry(&self, node: usize, edge: usize) -> &EdgeGeometry {
        &self.geometry[node][edge]
    }

    /// SHA-256 over the map, sensor, episode settings and graph bytes.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn max_out_degree(&self) -> usize {
        self.graph.max_out_degree()
    }

    pub fn start_cell(&self) -> Cell {
        self.params.start_cell_in(&self.dims, &self.sensor)
    }

    /// Length of [`Observation::features`].
    pub fn feature_len(&self) -> usize {
        let w = self.params.obs_window;
        self.params.obs_scales.len() * 3 * w * w
            + 2
            + self.max_out_degree()
            + self.graph.node_count()
            + 1
    }

    /// In-bounds cells an edge would sense from `agent`.
    pub fn sensed_cells(&self, agent: Cell, node: usize, edge: usize) -> Vec<Cell> {
        offset_cells(&self.dims, agent, &self.geometry[node][edge].sensed)
    }
}

fn offset_cells(dims: &GridDims, agent: Cell, offsets: &[(i64, i64)]) -> Vec<Cell> {
    offsets
        .iter()
        .filter_map(|&(dx, dy)| {
            let (x, y) = (agent.0 as i64 + dx, agent.1 as i64 + dy);
            dims.contains(x, y).then_some((x as usize, y as usize))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// Entropy removed from the map this step, in nats.
    pub entropy: f64,
    /// Belief mass over cells covered for the first time.
    pub coverage: f64,
    pub target: f64,
    pub cost: f64,
    pub total: f64,
}

/// Policy input: a multi-resolution egocentric stack plus proprioception.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    /// `scale, channel, row, column` order; channels are posterior, cell
    /// entropy and coverage.
    pub ego: Vec<f64>,
    pub pos_norm: [f64; 2],
    pub last_action: Vec<f64>,
    pub node: Vec<f64>,
    pub budget_frac: f64,
}

impl Observation {
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(
            self.ego.len() + 3 + self.last_action.len() + self.node.len(),
        );
        f.extend_from_slice(&self.ego);
        f.extend_from_slice(&self.pos_norm);
        f.extend_from_slice(&self.last_action);
        f.extend_from_slice(&self.node);
        f.push(self.budget_frac);
        f
    }

    /// Little-endian bytes of [`Observation::features`].
    pub fn to_bytes(&self) -> Vec<u8> {
        self.features().iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Table-style summary of a finished episode, all in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub coverage: f64,
    pub entropy_reduction: f64,
    pub search_efficiency: f64,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub observation: Observation,
    pub reward: RewardBreakdown,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub t: usize,
    /// Node the edge was taken from.
    pub node: usize,
    pub edge: usize,
    /// Cell after the step.
    pub agent_cell: Cell,
    pub reward: RewardBreakdown,
    pub budget_left: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogHeader {
    pub config_hash: String,
    pub seed: u64,
    pub start_cell: Cell,
    pub start_node: usize,
    pub budget: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Header(LogHeader),
    Step(StepRecord),
}

/// One header record followed by one record per step.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeLog {
    pub header: LogHeader,
    pub steps: Vec<StepRecord>,
}

impl EpisodeLog {
    pub fn actions(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.edge).collect()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(&mut w, &LogLine::Header(self.header.clone()))?;
        w.write_all(b"\n")?;
        for s in &self.steps {
            serde_json::to_writer(&mut w, &LogLine::Step(s.clone()))?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = Vec::new();
        self.write_jsonl(&mut out)
            .expect("writing to memory cannot fail");
        String::from_utf8(out).expect("serde_json emits UTF-8")
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut header = None;
        let mut steps = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let n = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: LogLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: n,
                message: e.to_string(),
            })?;
            match (parsed, header.is_some()) {
                (LogLine::Header(h), false) => header = Some(h),
                (LogLine::Step(s), true) => {
                    if s.t != steps.len() {
                        return Err(Error::Parse {
                            line: n,
                            message: format!("expected step {}, found {}", steps.len(), s.t),
                        });
                    }
                    steps.push(s)
                }
                (LogLine::Header(_), true) => {
                    return Err(Error::Parse {
                        line: n,
                        message: "duplicate header".into(),
                    })
                }
                (LogLine::Step(_), false) => {
                    return Err(Error::Parse {
                        line: n,
                        message: "step before header".into(),
                    })
                }
            }
        }
        let header = header.ok_or(Error::Parse {
            line: 0,
            message: "log has no header".into(),
        })?;
        Ok(Self { header, steps })
    }
}

/// Full mutable state of one episode.
#[derive(Clone, Debug)]
pub struct EpisodeState {
    pub agent_cell: Cell,
    pub node: usize,
    pub belief: OccupancyGrid,
    pub coverage: Vec<bool>,
    pub obstacles: Vec<bool>,
    pub world: WorldMap,
    /// Target cells in row-major order, parallel to `found`.
    pub targets: Vec<Cell>,
    pub found: Vec<bool>,
    pub budget_left: f64,
    pub t: usize,
    pub last_action: Option<usize>,
    pub initial_entropy: f64,
    pub entropy: f64,
    pub done: bool,
    pub seed: u64,
    pub start_cell: Cell,
    pub start_node: usize,
    pub history: Vec<StepRecord>,
    rng: ChaCha8Rng,
}

impl EpisodeState {
    /// Starts an episode. `obstacles` may be empty for an obstacle-free map.
    pub fn reset(
        config: &EpisodeConfig,
        world: &WorldMap,
        prior: &ProbField,
        obstacles: &[bool],
        seed: u64,
    ) -> Result<(Self, Observation)> {
        let dims = config.dims;
        dims.check_shape(&prior.dims)?;
        dims.check_shape(&world.dims)?;
        let obstacles = if obstacles.is_empty() {
            vec![false; dims.len()]
        } else if obstacles.len() == dims.len() {
            obstacles.to_vec()
        } else {
            return Err(Error::DimensionMismatch {
                expected: format!("{} obstacle cells", dims.len()),
                got: obstacles.len().to_string(),
            });
        };
        let start = config.start_cell();
        if obstacles[dims.index(start)?] {
            return Err(Error::InvalidArgument(format!(
                "start cell {start:?} is an obstacle"
            )));
        }
        let belief = OccupancyGrid::from_field(prior)?;
        let entropy = belief.total_entropy();
        let targets = world.targets();
        let node = config.graph.rest_node();
        let mut state = Self {
            agent_cell: start,
            node,
            belief,
            coverage: vec![false; dims.len()],
            obstacles,
            world: world.clone(),
            found: vec![false; targets.len()],
            targets,
            budget_left: config.params.budget,
            t: 0,
            last_action: None,
            initial_entropy: entropy,
            entropy,
            done: false,
            seed,
            start_cell: start,
            start_node: node,
            history: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        state.done = !state.valid_actions(config).iter().any(|&v| v);
        let obs = state.observation(config);
        Ok((state, obs))
    }

    /// Whether `edge` of the current node is executable from `agent` with
    /// `budget` remaining.
    pub fn edge_valid_from(
        &self,
        config: &EpisodeConfig,
        agent: Cell,
        node: usize,
        edge: usize,
        budget: f64,
    ) -> bool {
        let Some(prim) = config.graph.edges[node].get(edge) else {
            return false;
        };
        if prim.cost > budget {
            return false;
        }
        let dims = &config.dims;
        let geo = config.geometry(node, edge);
        let free = |(dx, dy): (i64, i64)| {
            let (x, y) = (agent.0 as i64 + dx, agent.1 as i64 + dy);
            dims.contains(x, y) && !self.obstacles[y as usize * dims.width + x as usize]
        };
        free(geo.end) && geo.swept.iter().all(|&o| free(o))
    }

    /// Valid mask over the edges of an arbitrary pose.
    pub fn mask_from(&self, config: &EpisodeConfig, agent: Cell, node: usize, budget: f64) -> Vec<bool> {
        (0..config.graph.edges[node].len())
            .map(|e| self.edge_valid_from(config, agent, node, e, budget))
            .collect()
    }

    /// Valid mask over the current node's edges.
    pub fn valid_actions(&self, config: &EpisodeConfig) -> Vec<bool> {
        self.mask_from(config, self.agent_cell, self.node, self.budget_left)
    }

    /// Poses `(cell, node)`, indexed `cell_index * nodes + node`, from which
    /// an endless chain of valid edges exists when the budget is ignored.
    /// Flying fast at a wall can leave no way to stay on the map; such poses
    /// are not viable.
    pub fn viable_poses(&self, config: &EpisodeConfig) -> Vec<bool> {
        let dims = config.dims;
        let nodes = config.graph.nodes.len();
        let mut viable: Vec<bool> = (0..dims.len() * nodes)
            .map(|p| !self.obstacles[p / nodes])
            .collect();
        let mut changed = true;
        while changed {
            changed = false;
            for p in 0..viable.len() {
                if !viable[p] {
                    continue;
                }
                let (agent, node) = (dims.cell(p / nodes), p % nodes);
                let keeps_going = (0..config.graph.edges[node].len()).any(|e| {
                    self.edge_valid_from(config, agent, node, e, f64::INFINITY) && {
                        let geo = config.geometry(node, e);
                        let end = (agent.0 as i64 + geo.end.0) as usize
                            + (agent.1 as i64 + geo.end.1) as usize * dims.width;
                        viable[end * nodes + config.graph.edges[node][e].end_node]
                    }
                });
                if !keeps_going {
                    viable[p] = false;
                    changed = true;
                }
            }
        }
        viable
    }

    /// Valid edges that end in a viable pose, or every valid edge if none
    /// does.
    pub fn safe_actions(&self, config: &EpisodeConfig, viable: &[bool]) -> Vec<bool> {
        let valid = self.valid_actions(config);
        let nodes = config.graph.nodes.len();
        let safe: Vec<bool> = valid
            .iter()
            .enumerate()
            .map(|(e, &ok)| {
                ok && {
                    let geo = config.geometry(self.node, e);
                    let end = (self.agent_cell.0 as i64 + geo.end.0) as usize
                        + (self.agent_cell.1 as i64 + geo.end.1) as usize * config.dims.width;
                    viable[end * nodes + config.graph.edges[self.node][e].end_node]
                }
            })
            .collect();
        if safe.iter().any(|&v| v) {
            safe
        } else {
            valid
        }
    }

    /// Executes `edge`. On error the state is left untouched.
    pub fn step(&mut self, config: &EpisodeConfig, edge: usize) -> Result<StepOutcome> {
        if self.done || !self.edge_valid_from(config, self.agent_cell, self.node, edge, self.budget_left) {
            return Err(Error::InvalidAction { action: edge });
        }
        let dims = config.dims;
        let prim = &config.graph.edges[self.node][edge];
        let cells = config.sensed_cells(self.agent_cell, self.node, edge);

        let mut coverage_reward = 0.0;
        for &c in &cells {
            let i = dims.index(c)?;
            if !self.coverage[i] {
                coverage_reward += self.belief.posterior_at(i);
            }
        }
        config.sensor.observe_cells(
            &mut self.belief,
            &mut self.coverage,
            &self.world,
            &cells,
            &mut self.rng,
        )?;

        let before = self.entropy;
        self.entropy = self.belief.total_entropy();
        let entropy_reward = before - self.entropy;

        let mut newly_found = 0usize;
        for (k, &c) in self.targets.iter().enumerate() {
            if !self.found[k] && self.belief.posterior(c)? > config.params.found_threshold {
                self.found[k] = true;
                newly_found += 1;
            }
        }
        let target_reward = if self.targets.is_empty() {
            0.0
        } else {
            config.params.target_bonus_total * newly_found as f64 / self.targets.len() as f64
        };

        let geo = config.geometry(self.node, edge);
        let from_node = self.node;
        self.agent_cell = (
            (self.agent_cell.0 as i64 + geo.end.0) as usize,
            (self.agent_cell.1 as i64 + geo.end.1) as usize,
        );
        self.node = prim.end_node;
        self.budget_left = (self.budget_left - prim.cost).max(0.0);
        self.last_action = Some(edge);

        let p = &config.params;
        let reward = RewardBreakdown {
            entropy: entropy_reward,
            coverage: coverage_reward,
            target: target_reward,
            cost: prim.cost,
            total: p.w_entropy * entropy_reward + p.w_coverage * coverage_reward
                + p.w_target * target_reward
                - p.w_cost * prim.cost,
        };
        self.history.push(StepRecord {
            t: self.t,
            node: from_node,
            edge,
            agent_cell: self.agent_cell,
            reward,
            budget_left: self.budget_left,
        });
        self.t += 1;

        let all_found = !self.found.is_empty() && self.found.iter().all(|&f| f);
        self.done = all_found || !self.valid_actions(config).iter().any(|&v| v);
        Ok(StepOutcome {
            observation: self.observation(config),
            reward,
            done: self.done,
        })
    }

    pub fn observation(&self, config: &EpisodeConfig) -> Observation {
        let dims = config.dims;
        let p = &config.params;
        let w = p.obs_window as i64;
        let half = w / 2;
        let (ax, ay) = (self.agent_cell.0 as i64, self.agent_cell.1 as i64);
        let mut ego = Vec::with_capacity(p.obs_scales.len() * 3 * (w * w) as usize);
        for &s in &p.obs_scales {
            let s = s as i64;
            let mut chans = [
                Vec::with_capacity((w * w) as usize),
                Vec::with_capacity((w * w) as usize),
                Vec::with_capacity((w * w) as usize),
            ];
            for r in 0..w {
                for c in 0..w {
                    let x0 = ax + (c - half) * s - s / 2;
                    let y0 = ay + (r - half) * s - s / 2;
                    let mut acc = [0.0; 3];
                    for y in y0..y0 + s {
                        for x in x0..x0 + s {
                            if dims.contains(x, y) {
                                let i = y as usize * dims.width + x as usize;
                                let q = self.belief.posterior_at(i);
                                acc[0] += q;
                                acc[1] += binary_entropy(q);
                                acc[2] += if self.coverage[i] { 1.0 } else { 0.0 };
                            } else {
                                acc[0] += 0.5;
                                acc[1] += std::f64::consts::LN_2;
                            }
                        }
                    }
                    let n = (s * s) as f64;
                    for k in 0..3 {
                        chans[k].push(acc[k] / n);
                    }
                }
            }
            for ch in chans {
                ego.extend(ch);
            }
        }
        let mut last_action = vec![0.0; config.max_out_degree()];
        if let Some(a) = self.last_action {
            last_action[a] = 1.0;
        }
        let mut node = vec![0.0; config.graph.node_count()];
        node[self.node] = 1.0;
        Observation {
            ego,
            pos_norm: [
                self.agent_cell.0 as f64 / dims.width as f64,
                self.agent_cell.1 as f64 / dims.height as f64,
            ],
            last_action,
            node,
            budget_frac: self.budget_left / p.budget,
        }
    }

    pub fn targets_found(&self) -> usize {
        self.found.iter().filter(|&&f| f).count()
    }

    pub fn spent(&self, config: &EpisodeConfig) -> f64 {
        config.params.budget - self.budget_left
    }

    /// Coverage, entropy reduction and search efficiency of a finished
    /// episode. A world without targets reports zero search efficiency.
    pub fn metrics(&self) -> Result<Metrics> {
        if !self.done {
            return Err(Error::EpisodeNotDone);
        }
        Ok(self.current_metrics())
    }

    /// Same as [`EpisodeState::metrics`] without the terminal check.
    pub fn current_metrics(&self) -> Metrics {
        let n = self.coverage.len() as f64;
        let covered = self.coverage.iter().filter(|&&c| c).count() as f64;
        let entropy_reduction = if self.initial_entropy > 0.0 {
            100.0 * (self.initial_entropy - self.entropy) / self.initial_entropy
        } else {
            0.0
        };
        let search_efficiency = if self.targets.is_empty() {
            0.0
        } else {
            100.0 * self.targets_found() as f64 / self.targets.len() as f64
        };
        Metrics {
            coverage: 100.0 * covered / n,
            entropy_reduction,
            search_efficiency,
        }
    }

    pub fn log(&self, config: &EpisodeConfig) -> EpisodeLog {
        EpisodeLog {
            header: LogHeader {
                config_hash: config.hash().to_string(),
                seed: self.seed,
                start_cell: self.start_cell,
                start_node: self.start_node,
                budget: config.params.budget,
            },
            steps: self.history.clone(),
        }
    }
}

/// Re-executes `actions` from a fresh reset and returns the final state.
pub fn replay(
    config: &EpisodeConfig,
    world: &WorldMap,
    prior: &ProbField,
    obstacles: &[bool],
    seed: u64,
    actions: &[usize],
) -> Result<EpisodeState> {
    let (mut state, _) = EpisodeState::reset(config, world, prior, obstacles, seed)?;
    for &a in actions {
        state.step(config, a)?;
    }
    Ok(state)
}
