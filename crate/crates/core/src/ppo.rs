//! Rollout storage and the clipped-surrogate PPO update.
//!
//! The objective maximised per epoch is
//! `mean_t[min(r_t A_t, clip(r_t, 1-eps, 1+eps) A_t)] - c1 * mean_t[(V(s_t) - G_t)^2] + c2 * mean_t[H(pi(.|s_t))]`
//! where `r_t` is the probability ratio against the behaviour policy and `G_t`
//! the discounted reward-to-go within the epoch. Actor and critic are
//! separate networks, so each receives only the gradient of its own terms.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{forward_actor, forward_critic, ActionDistribution, Adam, Mlp};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub clip_epsilon: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Full-batch gradient passes per epoch.
    pub update_passes: u32,
    pub normalize_advantages: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            gamma: 0.9,
            clip_epsilon: 0.2,
            value_coef: 0.5,
            entropy_coef: 0.01,
            actor_lr: 1e-3,
            critic_lr: 5e-4,
            update_passes: 4,
            normalize_advantages: true,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::config(format!("trainer.gamma = {} must lie in [0, 1)", self.gamma)));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::config("trainer.clip_epsilon must be positive"));
        }
        if self.update_passes == 0 {
            return Err(Error::config("trainer.update_passes must be at least 1"));
        }
        if !(self.actor_lr > 0.0 && self.critic_lr > 0.0) {
            return Err(Error::config("trainer learning rates must be positive"));
        }
        if !(self.value_coef >= 0.0 && self.entropy_coef >= 0.0) {
            return Err(Error::config("trainer coefficients must be non-negative"));
        }
        Ok(())
    }
}

/// Actor and critic networks with their optimizers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyModel {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl PolicyModel {
    pub fn new<R: Rng + ?Sized>(observation_size: usize, action_count: usize, rng: &mut R) -> Self {
        let actor = Mlp::new(observation_size, action_count, rng);
        let critic = Mlp::new(observation_size, 1, rng);
        PolicyModel {
            actor_opt: Adam::new(&actor),
            critic_opt: Adam::new(&critic),
            actor,
            critic,
        }
    }

    pub fn distribution(&self, obs: &[f64]) -> Result<ActionDistribution> {
        forward_actor(&self.actor, obs)
    }

    pub fn value(&self, obs: &[f64]) -> Result<f64> {
        forward_critic(&self.critic, obs)
    }

    /// Samples an action; returns `(action, log-prob, value estimate)`.
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(usize, f64, f64)> {
        let (action, logp) = self.distribution(obs)?.sample(rng)?;
        Ok((action, logp, self.value(obs)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBuffer {
    obs_dim: usize,
    observations: Vec<f64>,
    actions: Vec<usize>,
    log_probs: Vec<f64>,
    rewards: Vec<f64>,
    values: Vec<f64>,
    terminals: Vec<bool>,
}

impl RolloutBuffer {
    pub fn new(obs_dim: usize) -> Self {
        RolloutBuffer {
            obs_dim,
            observations: Vec::new(),
            actions: Vec::new(),
            log_probs: Vec::new(),
            rewards: Vec::new(),
            values: Vec::new(),
            terminals: Vec::new(),
        }
    }

    pub fn store(&mut self, obs: &[f64], action: usize, log_prob: f64, reward: f64, value: f64) -> Result<()> {
        if obs.len() != self.obs_dim {
            return Err(Error::Dimension {
                expected: self.obs_dim,
                got: obs.len(),
            });
        }
        if !(log_prob.is_finite() && reward.is_finite() && value.is_finite())
            || obs.iter().any(|v| !v.is_finite())
        {
            return Err(Error::training("non-finite transition"));
        }
        self.observations.extend_from_slice(obs);
        self.actions.push(action);
        self.log_probs.push(log_prob);
        self.rewards.push(reward);
        self.values.push(value);
        self.terminals.push(false);
        Ok(())
    }

    /// Marks the most recent transition as the end of an episode.
    pub fn mark_terminal(&mut self) {
        if let Some(t) = self.terminals.last_mut() {
            *t = true;
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn clear(&mut self) {
        self.observations.clear();
        self.actions.clear();
        self.log_probs.clear();
        self.rewards.clear();
        self.values.clear();
        self.terminals.clear();
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn observations(&self) -> &[f64] {
        &self.observations
    }

    pub fn observation(&self, t: usize) -> &[f64] {
        &self.observations[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn actions(&self) -> &[usize] {
        &self.actions
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminals
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSet {
    pub returns: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Discounted reward-to-go (zero bootstrap after terminals) and
/// `advantage = return - stored value`, optionally standardised.
pub fn compute_returns_advantages(buffer: &RolloutBuffer, config: &TrainerConfig) -> Result<AdvantageSet> {
    if buffer.is_empty() {
        return Err(Error::training("cannot compute returns for an empty buffer"));
    }
    let n = buffer.len();
    let mut returns = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if buffer.terminals[t] {
            running = 0.0;
        }
        running = buffer.rewards[t] + config.gamma * running;
        returns[t] = running;
    }
    let mut advantages: Vec<f64> = returns.iter().zip(&buffer.values).map(|(g, v)| g - v).collect();
    if config.normalize_advantages && n > 1 {
        let mean = advantages.iter().sum::<f64>() / n as f64;
        let var = advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for a in &mut advantages {
            *a = (*a - mean) / (std + 1e-8);
        }
    }
    Ok(AdvantageSet { returns, advantages })
}

/// `min(r A, clip(r, 1-eps, 1+eps) A)` for one step.
pub fn clipped_contribution(ratio: f64, advantage: f64, epsilon: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    unclipped.min(clipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Negated objective; this is what the optimizer minimises.
    pub total: f64,
    pub clip: f64,
    pub value: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
}

struct LossGrads {
    breakdown: LossBreakdown,
    actor: Mlp,
    critic: Mlp,
}

fn check_aligned(buffer: &RolloutBuffer, advantages: &AdvantageSet) -> Result<()> {
    if advantages.advantages.len() != buffer.len() || advantages.returns.len() != buffer.len() {
        return Err(Error::Dimension {
            expected: buffer.len(),
            got: advantages.advantages.len(),
        });
    }
    Ok(())
}

fn loss_and_grads(
    model: &PolicyModel,
    buffer: &RolloutBuffer,
    adv: &AdvantageSet,
    config: &TrainerConfig,
) -> Result<LossGrads> {
    check_aligned(buffer, adv)?;
    let n = buffer.len();
    let inv_n = 1.0 / n as f64;
    let actor_cache = model.actor.forward_batch(buffer.observations(), n)?;
    let critic_cache = model.critic.forward_batch(buffer.observations(), n)?;
    let k = model.actor.output_size();
    let logits = actor_cache.output();
    let values = critic_cache.output();

    let (mut clip_sum, mut value_sum, mut entropy_sum, mut ratio_sum) = (0.0, 0.0, 0.0, 0.0);
    let mut actor_up = vec![0.0; n * k];
    let mut critic_up = vec![0.0; n];
    let eps = config.clip_epsilon;
    for t in 0..n {
        let dist = ActionDistribution::from_logits(&logits[t * k..(t + 1) * k]);
        let a = buffer.actions[t];
        let ratio = (dist.log_prob(a) - buffer.log_probs[t]).exp();
        let advantage = adv.advantages[t];
        let unclipped = ratio * advantage;
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps) * advantage;
        // d(contribution)/d(logp_new): r*A on the unclipped branch, 0 when clipping binds.
        let d_logp = if unclipped <= clipped { unclipped } else { 0.0 };
        let entropy = dist.entropy();
        clip_sum += unclipped.min(clipped);
        entropy_sum += entropy;
        ratio_sum += ratio;

        let up = &mut actor_up[t * k..(t + 1) * k];
        for (j, u) in up.iter_mut().enumerate() {
            let p = dist.prob(j);
            let d_logp_dz = if j == a { 1.0 - p } else { -p };
            let d_entropy_dz = if p > 0.0 { -p * (dist.log_prob(j) + entropy) } else { 0.0 };
            // Loss is the negated objective.
            *u = -inv_n * (d_logp * d_logp_dz + config.entropy_coef * d_entropy_dz);
        }

        let err = values[t] - adv.returns[t];
        value_sum += err * err;
        critic_up[t] = inv_n * config.value_coef * 2.0 * err;
    }
    let clip = clip_sum * inv_n;
    let value = value_sum * inv_n;
    let entropy = entropy_sum * inv_n;
    let total = -(clip - config.value_coef * value + config.entropy_coef * entropy);
    if !total.is_finite() {
        return Err(Error::training("non-finite PPO loss"));
    }
    Ok(LossGrads {
        breakdown: LossBreakdown {
            total,
            clip,
            value,
            entropy,
            mean_ratio: ratio_sum * inv_n,
        },
        actor: model.actor.backward_batch(&actor_cache, &actor_up)?,
        critic: model.critic.backward_batch(&critic_cache, &critic_up)?,
    })
}

/// Evaluates the loss components without touching the model.
pub fn ppo_loss(
    model: &PolicyModel,
    buffer: &RolloutBuffer,
    advantages: &AdvantageSet,
    config: &TrainerConfig,
) -> Result<LossBreakdown> {
    check_aligned(buffer, advantages)?;
    let n = buffer.len();
    let mut clip = 0.0;
    let mut value = 0.0;
    let mut entropy = 0.0;
    let mut ratio_sum = 0.0;
    for t in 0..n {
        let obs = buffer.observation(t);
        let dist = model.distribution(obs)?;
        let ratio = (dist.log_prob(buffer.actions[t]) - buffer.log_probs[t]).exp();
        clip += clipped_contribution(ratio, advantages.advantages[t], config.clip_epsilon);
        value += (model.value(obs)? - advantages.returns[t]).powi(2);
        entropy += dist.entropy();
        ratio_sum += ratio;
    }
    let inv_n = 1.0 / n as f64;
    let (clip, value, entropy) = (clip * inv_n, value * inv_n, entropy * inv_n);
    let total = -(clip - config.value_coef * value + config.entropy_coef * entropy);
    if !total.is_finite() {
        return Err(Error::training("non-finite PPO loss"));
    }
    Ok(LossBreakdown {
        total,
        clip,
        value,
        entropy,
        mean_ratio: ratio_sum * inv_n,
    })
}

/// Gradients of `ppo_loss(..).total` with respect to the actor and critic.
pub fn ppo_gradients(
    model: &PolicyModel,
    buffer: &RolloutBuffer,
    advantages: &AdvantageSet,
    config: &TrainerConfig,
) -> Result<(Mlp, Mlp)> {
    let g = loss_and_grads(model, buffer, advantages, config)?;
    Ok((g.actor, g.critic))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub steps: usize,
    pub clip: f64,
    pub value: f64,
    pub entropy: f64,
    pub mean_ratio: f64,
}

/// Runs the configured number of full-batch passes and clears the buffer.
///
/// An empty buffer is a no-op and yields `None`. The reported components come
/// from the last pass, evaluated just before its parameter update.
pub fn train_on_epoch(
    model: &mut PolicyModel,
    buffer: &mut RolloutBuffer,
    config: &TrainerConfig,
) -> Result<Option<TrainStats>> {
    if buffer.is_empty() {
        return Ok(None);
    }
    let adv = compute_returns_advantages(buffer, config)?;
    let mut last = None;
    for _ in 0..config.update_passes {
        let g = loss_and_grads(model, buffer, &adv, config)?;
        model.actor_opt.step(&mut model.actor, &g.actor, config.actor_lr)?;
        model.critic_opt.step(&mut model.critic, &g.critic, config.critic_lr)?;
        last = Some(g.breakdown);
    }
    let b = last.unwrap();
    let stats = TrainStats {
        steps: buffer.len(),
        clip: b.clip,
        value: b.value,
        entropy: b.entropy,
        mean_ratio: b.mean_ratio,
    };
    buffer.clear();
    Ok(Some(stats))
}
