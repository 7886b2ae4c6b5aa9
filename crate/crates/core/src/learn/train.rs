use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::math::{gae, lambda_returns, loss_and_grad, masked_policy, normalize, Batch, LossConfig, Losses};
use super::net::ActorCriticNet;
use crate::envgen::{Scenario, ScenarioConfig};
use crate::episode::{EpisodeConfig, EpisodeState, Metrics, Observation};
use crate::error::{Error, Result};
use crate::planners::Planner;

/// Supplies training and evaluation worlds by seed.
pub trait ScenarioSource: Sync {
    fn scenario(&self, seed: u64) -> Result<Scenario>;
}

impl ScenarioSource for ScenarioConfig {
    fn scenario(&self, seed: u64) -> Result<Scenario> {
        Scenario::from_seed(seed, self)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub loss: LossConfig,
    pub learning_rate: f64,
    pub rollout_length: usize,
    pub workers: usize,
    pub total_steps: usize,
    pub hidden: Vec<usize>,
    /// Global gradient-norm clip.
    pub max_grad_norm: f64,
    /// Multiplies every reward before returns are computed.
    pub reward_scale: f64,
    pub optimizer: Optimizer,
    /// Adam moment decay rates.
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub seed: u64,
}

/// Update rule applied to the averaged, clipped gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Per-parameter optimizer state.
struct Stepper {
    kind: Optimizer,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Stepper {
    fn new(kind: Optimizer, n: usize) -> Self {
        let n = if kind == Optimizer::Adam { n } else { 0 };
        Self {
            kind,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn apply(&mut self, tc: &TrainConfig, params: &mut [f64], grad: &[f64], scale: f64) {
        match self.kind {
            Optimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= tc.learning_rate * scale * g;
                }
            }
            Optimizer::Adam => {
                let (b1, b2) = tc.adam_betas;
                self.t += 1;
                let c1 = 1.0 - b1.powi(self.t);
                let c2 = 1.0 - b2.powi(self.t);
                for i in 0..params.len() {
                    let g = scale * grad[i];
                    self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
                    self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
                    let mh = self.m[i] / c1;
                    let vh = self.v[i] / c2;
                    params[i] -= tc.learning_rate * mh / (vh.sqrt() + tc.adam_eps);
                }
            }
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            learning_rate: 3e-4,
            rollout_length: 20,
            workers: 4,
            total_steps: 200_000,
            hidden: vec![256, 256],
            max_grad_norm: 40.0,
            reward_scale: 0.01,
            optimizer: Optimizer::Adam,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let l = &self.loss;
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(unit(l.gamma) && unit(l.lambda_ret) && unit(l.lambda_gae)) {
            return Err(Error::Config("gamma and lambdas must lie in [0, 1]".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && self.adam_eps > 0.0) {
            return Err(Error::Config(
                "adam betas must lie in [0, 1) and adam_eps must be positive".into(),
            ));
        }
        if self.workers == 0 || self.rollout_length == 0 {
            return Err(Error::Config(
                "workers and rollout length must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn rounds(&self) -> usize {
        self.total_steps / (self.workers * self.rollout_length)
    }
}

/// One row of the training curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub round: usize,
    /// Mean unscaled reward per step over all workers.
    pub mean_reward: f64,
    /// Losses averaged over workers.
    pub losses: Losses,
    pub grad_norm: f64,
    pub episodes_finished: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub net: ActorCriticNet,
    pub curve: Vec<CurvePoint>,
    /// Actions drawn from the masked policy; every one was checked against
    /// the valid mask before execution.
    pub sampled_actions: usize,
}

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from(
        "round,mean_reward,critic_loss,actor_loss,entropy,valid_loss,policy_loss,grad_norm,episodes\n",
    );
    for p in curve {
        writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            p.round,
            p.mean_reward,
            p.losses.critic,
            p.losses.actor,
            p.losses.entropy,
            p.losses.valid,
            p.losses.policy,
            p.grad_norm,
            p.episodes_finished
        )
        .expect("writing to a String cannot fail");
    }
    s
}

/// Valid mask padded with `false` to the network's action count.
pub fn padded_mask(state: &EpisodeState, config: &EpisodeConfig) -> Vec<bool> {
    let mut m = state.valid_actions(config);
    m.resize(config.max_out_degree(), false);
    m
}

/// Index of the largest valid entry, lowest index on ties.
pub fn masked_argmax(values: &[f64], mask: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, (&v, &m)) in values.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|b| v > values[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::NoValidAction)
}

/// Draws an index from a probability vector by inverse CDF.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

struct Worker {
    index: usize,
    rng: ChaCha8Rng,
    episodes: u64,
    state: EpisodeState,
    obs: Observation,
}

/// Training episodes draw from streams at and above this index so they never
/// coincide with the low-numbered streams evaluation scenarios use.
const TRAIN_STREAM_BASE: u64 = 1 << 32;

/// Per-worker seed of the `j`th episode.
fn episode_seed(base: u64, worker: usize, j: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(base);
    r.set_stream(TRAIN_STREAM_BASE + worker as u64);
    r.set_word_pos(2 * j as u128);
    r.random()
}

impl Worker {
    fn new(
        index: usize,
        base: u64,
        config: &EpisodeConfig,
        scenarios: &dyn ScenarioSource,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(base ^ 0x5eed);
        rng.set_stream(index as u64 + 1);
        let mut episodes = 0;
        let (state, obs) = fresh_episode(base, index, &mut episodes, config, scenarios)?;
        Ok(Self {
            index,
            rng,
            episodes,
            state,
            obs,
        })
    }

    fn next_episode(
        &mut self,
        base: u64,
        config: &EpisodeConfig,
        scenarios: &dyn ScenarioSource,
    ) -> Result<()> {
        let (s, o) = fresh_episode(base, self.index, &mut self.episodes, config, scenarios)?;
        self.state = s;
        self.obs = o;
        Ok(())
    }
}

/// Next episode of a worker that has at least one valid first move.
fn fresh_episode(
    base: u64,
    worker: usize,
    counter: &mut u64,
    config: &EpisodeConfig,
    scenarios: &dyn ScenarioSource,
) -> Result<(EpisodeState, Observation)> {
    for _ in 0..1000 {
        let seed = episode_seed(base, worker, *counter);
        *counter += 1;
        let (s, o) = start_episode(config, scenarios, seed)?;
        if !s.done {
            return Ok((s, o));
        }
    }
    Err(Error::NoValidAction)
}

fn start_episode(
    config: &EpisodeConfig,
    scenarios: &dyn ScenarioSource,
    seed: u64,
) -> Result<(EpisodeState, Observation)> {
    let sc = scenarios.scenario(seed)?;
    EpisodeState::reset(config, &sc.world, &sc.prior, &sc.obstacles, seed)
}

struct Rollout {
    batch: Batch,
    reward_sum: f64,
    episodes_finished: usize,
    sampled: usize,
}

fn rollout(
    worker: &mut Worker,
    net: &ActorCriticNet,
    config: &EpisodeConfig,
    tc: &TrainConfig,
    scenarios: &dyn ScenarioSource,
) -> Result<Rollout> {
    let t_len = tc.rollout_length;
    let mut batch = Batch::default();
    let mut rewards = Vec::with_capacity(t_len);
    let mut values = Vec::with_capacity(t_len);
    let mut dones = Vec::with_capacity(t_len);
    let mut reward_sum = 0.0;
    let mut finished = 0;
    for _ in 0..t_len {
        let features = worker.obs.features();
        let out = net.forward(&features)?;
        let mask = padded_mask(&worker.state, config);
        let probs = masked_policy(&out.logits, &mask)?;
        let a = sample_index(&probs, &mut worker.rng);
        if !mask[a] {
            return Err(Error::InvalidAction { action: a });
        }
        let step = worker.state.step(config, a)?;
        reward_sum += step.reward.total;
        rewards.push(step.reward.total * tc.reward_scale);
        values.push(out.value);
        dones.push(step.done);
        batch.features.push(features);
        batch.actions.push(a);
        batch.masks.push(mask);
        if step.done {
            finished += 1;
            worker.next_episode(tc.seed, config, scenarios)?;
        } else {
            worker.obs = step.observation;
        }
    }
    let bootstrap = if *dones.last().expect("rollout length >= 1") {
        0.0
    } else {
        net.forward(&worker.obs.features())?.value
    };
    let l = &tc.loss;
    batch.returns = lambda_returns(&rewards, &values, &dones, bootstrap, l.gamma, l.lambda_ret)?;
    let adv = gae(&rewards, &values, &dones, bootstrap, l.gamma, l.lambda_gae)?;
    batch.advantages = if l.normalize_advantages {
        normalize(&adv)
    } else {
        adv
    };
    Ok(Rollout {
        batch,
        reward_sum,
        episodes_finished: finished,
        sampled: t_len,
    })
}

/// Synchronous multi-worker actor-critic training.
///
/// Each round every worker rolls out `rollout_length` steps from the same
/// parameter snapshot with actions sampled from the masked policy; worker
/// gradients are averaged in worker order, clipped to `max_grad_norm`, and
/// applied with one optimizer step. Output is bit-identical for a fixed config.
pub fn train(
    tc: &TrainConfig,
    config: &EpisodeConfig,
    scenarios: &dyn ScenarioSource,
) -> Result<TrainOutput> {
    train_from(tc, config, scenarios, None)
}

/// [`train`] starting from `initial` instead of a fresh network.
pub fn train_from(
    tc: &TrainConfig,
    config: &EpisodeConfig,
    scenarios: &dyn ScenarioSource,
    initial: Option<ActorCriticNet>,
) -> Result<TrainOutput> {
    tc.validate()?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut net = match initial {
        Some(n) => n,
        None => ActorCriticNet::init(
            config.feature_len(),
            &tc.hidden,
            config.max_out_degree(),
            &mut init_rng,
        )?,
    };
    if net.input_len() != config.feature_len() || net.action_count() != config.max_out_degree() {
        return Err(Error::DimensionMismatch {
            expected: format!(
                "{} inputs and {} actions",
                config.feature_len(),
                config.max_out_degree()
            ),
            got: format!("{} inputs and {} actions", net.input_len(), net.action_count()),
        });
    }
    let mut workers = (0..tc.workers)
        .map(|k| Worker::new(k, tc.seed, config, scenarios))
        .collect::<Result<Vec<_>>>()?;
    let mut stepper = Stepper::new(tc.optimizer, net.param_count());
    let mut curve = Vec::new();
    let mut sampled = 0;
    for round in 0..tc.rounds() {
        let snapshot = &net;
        let results: Vec<Result<(Rollout, Losses, Vec<f64>)>> = workers
            .par_iter_mut()
            .map(|w| {
                let r = rollout(w, snapshot, config, tc, scenarios)?;
                let (losses, grad) = loss_and_grad(snapshot, &r.batch, &tc.loss)?;
                Ok((r, losses, grad))
            })
            .collect();
        let mut grad = vec![0.0; net.param_count()];
        let mut losses = Losses::default();
        let mut reward_sum = 0.0;
        let mut finished = 0;
        for res in results {
            let (r, l, g) = res.map_err(|e| match e {
                Error::NonFinite { context, value } => Error::NonFinite {
                    context: format!("{context} in round {round}"),
                    value,
                },
                other => other,
            })?;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
            losses.critic += l.critic;
            losses.actor += l.actor;
            losses.entropy += l.entropy;
            losses.valid += l.valid;
            losses.policy += l.policy;
            reward_sum += r.reward_sum;
            finished += r.episodes_finished;
            sampled += r.sampled;
        }
        let k = tc.workers as f64;
        grad.iter_mut().for_each(|g| *g /= k);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient norm in round {round}"),
                value: norm,
            });
        }
        let scale = if norm > tc.max_grad_norm {
            tc.max_grad_norm / norm
        } else {
            1.0
        };
        let mut flat = net.flat();
        stepper.apply(tc, &mut flat, &grad, scale);
        net.set_flat(&flat)?;
        curve.push(CurvePoint {
            round,
            mean_reward: reward_sum / (k * tc.rollout_length as f64),
            losses: Losses {
                critic: losses.critic / k,
                actor: losses.actor / k,
                entropy: losses.entropy / k,
                valid: losses.valid / k,
                policy: losses.policy / k,
            },
            grad_norm: norm,
            episodes_finished: finished,
        });
    }
    Ok(TrainOutput {
        net,
        curve,
        sampled_actions: sampled,
    })
}

/// Acts greedily with respect to a trained network's masked policy.
pub struct PolicyPlanner {
    net: Arc<ActorCriticNet>,
}

impl PolicyPlanner {
    pub fn new(net: Arc<ActorCriticNet>) -> Self {
        Self { net }
    }
}

impl Planner for PolicyPlanner {
    fn name(&self) -> &str {
        "rl"
    }

    fn plan(
        &mut self,
        _state: &EpisodeState,
        obs: &Observation,
        mask: &[bool],
        config: &EpisodeConfig,
        _rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        let out = self.net.forward(&obs.features())?;
        let mut m = mask.to_vec();
        m.resize(config.max_out_degree(), false);
        Ok(vec![masked_argmax(&out.logits, &m)?])
    }
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len();
        if n == 0 {
            return Stat { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

/// Coverage, entropy reduction and search efficiency summarized over
/// episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub coverage: Stat,
    pub entropy_reduction: Stat,
    pub search_efficiency: Stat,
    pub episodes: usize,
}

impl MetricTable {
    pub fn from_metrics(ms: &[Metrics]) -> Self {
        let col = |f: fn(&Metrics) -> f64| Stat::of(&ms.iter().map(f).collect::<Vec<_>>());
        Self {
            coverage: col(|m| m.coverage),
            entropy_reduction: col(|m| m.entropy_reduction),
            search_efficiency: col(|m| m.search_efficiency),
            episodes: ms.len(),
        }
    }
}

/// Runs the greedy policy of `net` on every scenario seed, repeating each
/// `episodes_per_scenario` times with distinct sensor-noise seeds.
pub fn evaluate(
    net: &ActorCriticNet,
    config: &EpisodeConfig,
    scenarios: &dyn ScenarioSource,
    scenario_seeds: &[u64],
    episodes_per_scenario: usize,
) -> Result<MetricTable> {
    let net = Arc::new(net.clone());
    let mut metrics = Vec::new();
    for &seed in scenario_seeds {
        let sc = scenarios.scenario(seed)?;
        for k in 0..episodes_per_scenario {
            let mut planner = PolicyPlanner::new(net.clone());
            let s = crate::planners::run_episode(
                config,
                &sc.world,
                &sc.prior,
                &sc.obstacles,
                seed.wrapping_add(k as u64),
                &mut planner,
            )?;
            metrics.push(s.metrics()?);
        }
    }
    Ok(MetricTable::from_metrics(&metrics))
}
