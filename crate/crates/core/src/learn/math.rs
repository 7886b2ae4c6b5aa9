use serde::{Deserialize, Serialize};

use super::net::{ActorCriticNet, NetCache};
use crate::error::{Error, Result};

/// Softmax over the entries where `mask` is true; masked entries get
/// exactly zero.
pub fn masked_policy(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} mask entries", logits.len()),
            got: mask.len().to_string(),
        });
    }
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoValidAction);
    }
    let mut p: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 })
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Ok(p)
}

/// `ln softmax` over valid entries; invalid entries are `-inf`.
pub fn masked_log_policy(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoValidAction);
    }
    let lse = max
        + logits
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(&l, _)| (l - max).exp())
            .sum::<f64>()
            .ln();
    Ok(logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { l - lse } else { f64::NEG_INFINITY })
        .collect())
}

fn check_lengths(rewards: &[f64], values: &[f64], dones: &[bool]) -> Result<()> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} values and done flags", rewards.len()),
            got: format!("{} values, {} flags", values.len(), dones.len()),
        });
    }
    Ok(())
}

/// `G_t = r_t + gamma [(1 - lambda) V_{t+1} + lambda G_{t+1}]`, where the
/// step after the last uses `bootstrap` for both `V` and `G`, and a done
/// flag at step `t` zeroes everything after `r_t`.
pub fn lambda_returns(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_lengths(rewards, values, dones)?;
    let t_len = rewards.len();
    let mut out = vec![0.0; t_len];
    let mut next_g = bootstrap;
    let mut next_v = bootstrap;
    for t in (0..t_len).rev() {
        let tail = if dones[t] {
            0.0
        } else {
            (1.0 - lambda) * next_v + lambda * next_g
        };
        out[t] = rewards[t] + gamma * tail;
        next_g = out[t];
        next_v = values[t];
    }
    Ok(out)
}

/// Generalized advantage estimates with the same terminal handling as
/// [`lambda_returns`].
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    check_lengths(rewards, values, dones)?;
    let t_len = rewards.len();
    let mut out = vec![0.0; t_len];
    let mut next_a = 0.0;
    let mut next_v = bootstrap;
    for t in (0..t_len).rev() {
        let cont = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * cont * next_v - values[t];
        out[t] = delta + gamma * lambda * cont * next_a;
        next_a = out[t];
        next_v = values[t];
    }
    Ok(out)
}

/// Loss weights and return parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub gamma: f64,
    /// Lambda of the critic's regression target.
    pub lambda_ret: f64,
    pub lambda_gae: f64,
    /// Entropy bonus weight.
    pub alpha1: f64,
    /// Actor term weight.
    pub alpha2: f64,
    /// Weight on invalid-edge terms of the valid-head loss.
    pub beta1: f64,
    /// Weight on valid-edge terms of the valid-head loss.
    pub beta2: f64,
    /// Multiplies the critic loss in the combined objective.
    pub value_coef: f64,
    pub normalize_advantages: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda_ret: 0.8,
            lambda_gae: 0.95,
            alpha1: 0.01,
            alpha2: 1.0,
            beta1: 0.7,
            beta2: 0.3,
            value_coef: 0.5,
            normalize_advantages: true,
        }
    }
}

/// Training targets for one rollout, already reduced to constants.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    /// `sum (G - V)^2`.
    pub critic: f64,
    /// `sum ln pi(a) A`.
    pub actor: f64,
    /// `sum H(pi)`.
    pub entropy: f64,
    /// Weighted binary cross-entropy of the valid head.
    pub valid: f64,
    /// `-alpha1 entropy - alpha2 actor + valid`.
    pub policy: f64,
}

impl Losses {
    /// Objective whose gradient training descends.
    pub fn objective(&self, cfg: &LossConfig) -> f64 {
        cfg.value_coef * self.critic + self.policy
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Shifts advantages to zero mean and unit variance when there is more than
/// one sample and the spread is non-zero.
pub fn normalize(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    if adv.len() < 2 {
        return adv.to_vec();
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        return adv.iter().map(|a| a - mean).collect();
    }
    adv.iter().map(|a| (a - mean) / sd).collect()
}

struct StepTerms {
    losses: Losses,
    d_logits: Vec<f64>,
    d_value: f64,
    d_valid: Vec<f64>,
}

fn step_terms(
    cache: &NetCache,
    action: usize,
    mask: &[bool],
    ret: f64,
    adv: f64,
    cfg: &LossConfig,
) -> Result<StepTerms> {
    let out = &cache.output;
    let logp = masked_log_policy(&out.logits, mask)?;
    if !mask.get(action).copied().unwrap_or(false) {
        return Err(Error::InvalidAction { action });
    }
    let p: Vec<f64> = logp
        .iter()
        .map(|&l| if l.is_finite() { l.exp() } else { 0.0 })
        .collect();
    let entropy: f64 = -p
        .iter()
        .zip(&logp)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &l)| pi * l)
        .sum::<f64>();
    let actor = logp[action] * adv;
    let critic = (ret - out.value).powi(2);

    let mut valid = 0.0;
    let mut d_valid = vec![0.0; out.valid_logits.len()];
    for (j, &v) in out.valid_logits.iter().enumerate() {
        let y = mask.get(j).copied().unwrap_or(false);
        if y {
            valid += cfg.beta2 * softplus(-v);
            d_valid[j] = cfg.beta2 * (sigmoid(v) - 1.0);
        } else {
            valid += cfg.beta1 * softplus(v);
            d_valid[j] = cfg.beta1 * sigmoid(v);
        }
    }

    // d/dz of -alpha1 H - alpha2 A ln pi(a)
    let mut d_logits = vec![0.0; p.len()];
    for j in 0..p.len() {
        if p[j] == 0.0 && !mask[j] {
            continue;
        }
        let dh = -p[j] * (logp[j] + entropy);
        let dlogpa = if j == action { 1.0 } else { 0.0 } - p[j];
        d_logits[j] = -cfg.alpha1 * dh - cfg.alpha2 * adv * dlogpa;
    }
    let d_value = -2.0 * cfg.value_coef * (ret - out.value);

    Ok(StepTerms {
        losses: Losses {
            critic,
            actor,
            entropy,
            valid,
            policy: -cfg.alpha1 * entropy - cfg.alpha2 * actor + valid,
        },
        d_logits,
        d_value,
        d_valid,
    })
}

fn accumulate(total: &mut Losses, s: &Losses) {
    total.critic += s.critic;
    total.actor += s.actor;
    total.entropy += s.entropy;
    total.valid += s.valid;
    total.policy += s.policy;
}

fn check_batch(batch: &Batch) -> Result<()> {
    let n = batch.len();
    if batch.features.len() != n
        || batch.masks.len() != n
        || batch.returns.len() != n
        || batch.advantages.len() != n
    {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} entries in every batch column"),
            got: "ragged batch".into(),
        });
    }
    Ok(())
}

fn check_finite(l: &Losses, step: usize) -> Result<()> {
    for (name, v) in [
        ("critic", l.critic),
        ("actor", l.actor),
        ("entropy", l.entropy),
        ("valid", l.valid),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("{name} loss at step {step}"),
                value: v,
            });
        }
    }
    Ok(())
}

/// Summed losses over a batch without gradients.
pub fn losses(net: &ActorCriticNet, batch: &Batch, cfg: &LossConfig) -> Result<Losses> {
    check_batch(batch)?;
    let mut total = Losses::default();
    for t in 0..batch.len() {
        let cache = net.forward_cached(&batch.features[t])?;
        let s = step_terms(
            &cache,
            batch.actions[t],
            &batch.masks[t],
            batch.returns[t],
            batch.advantages[t],
            cfg,
        )?;
        check_finite(&s.losses, t)?;
        accumulate(&mut total, &s.losses);
    }
    Ok(total)
}

/// Summed losses and the flat gradient of [`Losses::objective`]. Returns
/// and advantages are treated as constants.
pub fn loss_and_grad(
    net: &ActorCriticNet,
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<(Losses, Vec<f64>)> {
    check_batch(batch)?;
    let mut grad = vec![0.0; net.param_count()];
    let mut total = Losses::default();
    for t in 0..batch.len() {
        let cache = net.forward_cached(&batch.features[t])?;
        let s = step_terms(
            &cache,
            batch.actions[t],
            &batch.masks[t],
            batch.returns[t],
            batch.advantages[t],
            cfg,
        )?;
        check_finite(&s.losses, t)?;
        accumulate(&mut total, &s.losses);
        net.backward(&cache, &s.d_logits, s.d_value, &s.d_valid, &mut grad);
    }
    Ok((total, grad))
}
