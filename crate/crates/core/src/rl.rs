//! RL trainers: PPO with GAE and a separate linear value function, and ReMax
//! (REINFORCE with the greedy rollout as baseline).
//!
//! The sequence-level shaped reward is `clip(r_RM, c) - alpha * L` placed at
//! the terminal step, minus the KL term `beta * (log pi - log pi_sft)` which
//! is applied at the sequence level by default (a per-token variant is
//! exposed as a flag). Advantages and returns are recomputed from stored
//! rewards and values once per outer iteration, never carried across policy
//! updates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::policy::{
    greedy_response, policy_logprob_steps, sample_response, state_features, step_states,
    PolicyParams, STATE_DIM,
};
use crate::rm::{selected_reward, HeadSelector, RmMode, RmParams};
use crate::rng;
use crate::synthdata::{true_quality, Prompt, Response, TokenSpace};

/// Linear value function over policy state features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub w: Vec<f64>,
}

impl ValueParams {
    pub fn zeros() -> Self {
        Self {
            w: vec![0.0; STATE_DIM],
        }
    }

    pub fn predict(&self, h: &[f64]) -> f64 {
        self.w.iter().zip(h).map(|(w, x)| w * x).sum()
    }
}

/// RL configuration shared by PPO and ReMax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RlConfig {
    /// KL coefficient.
    pub beta: f64,
    /// PPO clipping threshold.
    pub epsilon: f64,
    /// Reward clipping threshold; `None` disables clipping.
    pub clip_c: Option<f64>,
    /// Length-penalty coefficient.
    pub alpha: f64,
    /// Experience batch size N.
    pub n_experience: usize,
    /// Minibatch size b.
    pub minibatch: usize,
    /// Inner epochs K.
    pub inner_epochs: usize,
    /// Outer iterations M.
    pub iterations: usize,
    pub gamma: f64,
    pub lambda_gae: f64,
    /// Learning rate shared by the actor and the critic.
    pub lr: f64,
    pub sample_temperature: f64,
    pub sample_top_p: f64,
    /// Standardize advantages over each experience batch.
    pub adv_norm: bool,
    /// Subtract the KL term per token instead of at the sequence level.
    pub per_token_kl: bool,
    /// Optional PPO-style clipped value loss threshold.
    pub value_clip: Option<f64>,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            beta: 5e-3,
            epsilon: 0.2,
            clip_c: None,
            alpha: 0.0,
            n_experience: 32,
            minibatch: 32,
            inner_epochs: 1,
            iterations: 600,
            gamma: 1.0,
            lambda_gae: 0.95,
            lr: 3e-3,
            sample_temperature: 1.0,
            sample_top_p: 0.9,
            adv_norm: true,
            per_token_kl: false,
            value_clip: None,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.minibatch == 0 || self.minibatch > self.n_experience {
            return Err(Error::Config(format!(
                "minibatch {} must be in [1, N = {}]",
                self.minibatch, self.n_experience
            )));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::Config("gamma must be in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_gae) {
            return Err(Error::Config("lambda_gae must be in [0, 1]".into()));
        }
        if self.beta < 0.0 || self.alpha < 0.0 {
            return Err(Error::Config("beta and alpha must be >= 0".into()));
        }
        if let Some(c) = self.clip_c {
            if c <= 0.0 {
                return Err(Error::Config("reward clip threshold must be positive".into()));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("need at least one iteration".into()));
        }
        Ok(())
    }

    /// PPO clipping cannot bite when every minibatch is the whole on-policy
    /// batch and there is a single inner epoch.
    pub fn clip_inactive(&self) -> bool {
        self.n_experience == self.minibatch && self.inner_epochs == 1
    }
}

/// Generalized advantage estimation. `values` holds one estimate per step;
/// the value after the final step is `bootstrap` (0 for terminal states).
/// Returns per-step advantages and returns `R_t = A_t + V_t`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.is_empty() {
        return Err(Error::Input("empty trajectory".into()));
    }
    if rewards.len() != values.len() {
        return Err(Error::Input(format!(
            "rewards ({}) and values ({}) differ in length",
            rewards.len(),
            values.len()
        )));
    }
    let t_len = rewards.len();
    let mut advantages = vec![0.0; t_len];
    let mut acc = 0.0;
    for t in (0..t_len).rev() {
        let next_value = if t + 1 < t_len { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_value - values[t];
        acc = delta + gamma * lambda * acc;
        advantages[t] = acc;
    }
    let returns = advantages
        .iter()
        .zip(values)
        .map(|(a, v)| a + v)
        .collect();
    Ok((advantages, returns))
}

/// PPO clipped surrogate for one sample, to be maximized.
pub fn ppo_clip_loss(ratio: f64, adv: f64, epsilon: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon);
    (ratio * adv).min(clipped * adv)
}

/// Reward shaping pipeline: reward-model head selection, reward clipping,
/// length penalty, KL regularization.
pub struct RewardShaper<'a> {
    rm: &'a RmParams,
    head: HeadSelector,
    tokens: TokenSpace,
    t_max: usize,
    clip_c: Option<f64>,
    alpha: f64,
    beta: f64,
}

/// Shaped-reward components of one response.
#[derive(Debug, Clone, Copy)]
pub struct ShapedReward {
    pub rm_reward: f64,
    /// After clipping and length penalty, before the KL term.
    pub penalized: f64,
    /// Sequence-level total including the KL term.
    pub total: f64,
    /// `log pi(y|x) - log pi_sft(y|x)`.
    pub log_ratio: f64,
}

impl<'a> RewardShaper<'a> {
    pub fn new(
        rm: &'a RmParams,
        head: HeadSelector,
        tokens: TokenSpace,
        t_max: usize,
        config: &RlConfig,
    ) -> Result<Self> {
        if head == HeadSelector::Quality && rm.mode == RmMode::SingleHead {
            return Err(Error::Config(
                "quality head requested but the reward model has a single head".into(),
            ));
        }
        if head == HeadSelector::Length {
            return Err(Error::Config(
                "the length head is diagnostic only and cannot drive RL".into(),
            ));
        }
        if let Some(c) = config.clip_c {
            if c <= 0.0 {
                return Err(Error::Config("reward clip threshold must be positive".into()));
            }
        }
        Ok(Self {
            rm,
            head,
            tokens,
            t_max,
            clip_c: config.clip_c,
            alpha: config.alpha,
            beta: config.beta,
        })
    }

    pub fn rm_reward(&self, prompt: &Prompt, response: &Response) -> Result<f64> {
        let features = crate::rm::feature_vector(prompt, response, &self.tokens, self.t_max);
        selected_reward(self.rm, &features, self.head)
    }

    /// Clip-then-penalize composition, KL subtracted at the sequence level.
    pub fn shaped(
        &self,
        prompt: &Prompt,
        response: &Response,
        logp_policy: f64,
        logp_sft: f64,
    ) -> Result<ShapedReward> {
        let rm_reward = self.rm_reward(prompt, response)?;
        let clipped = match self.clip_c {
            Some(c) => crate::policy::clip_reward(rm_reward, c)?,
            None => rm_reward,
        };
        let penalized =
            crate::policy::length_penalized_reward(clipped, self.alpha, response.len(&self.tokens));
        let log_ratio = logp_policy - logp_sft;
        let total = crate::policy::aux_reward(penalized, logp_policy, logp_sft, self.beta);
        Ok(ShapedReward {
            rm_reward,
            penalized,
            total,
            log_ratio,
        })
    }

    pub fn tokens(&self) -> &TokenSpace {
        &self.tokens
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }
}

/// One rollout with everything the PPO inner loop needs.
#[derive(Debug, Clone)]
pub struct Experience {
    pub prompt: Prompt,
    pub response: Response,
    pub states: Vec<Vec<f64>>,
    pub old_logps: Vec<f64>,
    /// Per-step shaped rewards (terminal-placed sequence reward, plus the
    /// per-token KL term when enabled).
    pub rewards: Vec<f64>,
    /// Value estimates at experience-construction time.
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub shaped: ShapedReward,
    pub true_quality: f64,
}

/// Per-iteration log row.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunLogRow {
    pub iter: usize,
    pub mean_shaped_reward: f64,
    pub mean_rm_reward: f64,
    pub mean_true_quality: f64,
    pub mean_length: f64,
    pub kl_estimate: f64,
    /// Fraction of minibatch samples consumed after at least one parameter
    /// update within the same outer iteration.
    pub off_policy_frac: f64,
    /// Largest `|ratio - 1|` seen at update time this iteration.
    pub max_ratio_dev: f64,
    pub clip_inactive: bool,
}

pub type RunLog = Vec<RunLogRow>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointTag {
    Mid,
    Final,
    Best,
}

/// Policy snapshots taken during training: a mid-run checkpoint at a fixed
/// fraction (500/702) of the run, the final step, and the iteration whose
/// rollouts scored the highest mean shaped reward.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    pub tag: CheckpointTag,
    pub iteration: usize,
    pub policy: PolicyParams,
}

pub struct TrainOutcome {
    pub policy: PolicyParams,
    pub value: Option<ValueParams>,
    pub log: RunLog,
    pub snapshots: Vec<PolicySnapshot>,
}

fn mid_iteration(total: usize) -> usize {
    ((total as f64 * 500.0 / 702.0).round() as usize).clamp(1, total) - 1
}

fn sample_prompts(prompts: &[Prompt], n: usize, seed: u64, iter: usize) -> Vec<&Prompt> {
    let mut r = rng::stream_n(seed, "rl/prompts", &[iter as u64]);
    (0..n).map(|_| &prompts[r.gen_range(0..prompts.len())]).collect()
}

struct Rollout {
    experience: Experience,
}

#[allow(clippy::too_many_arguments)]
fn collect_rollout(
    actor: &PolicyParams,
    sft: &PolicyParams,
    shaper: &RewardShaper,
    value: Option<&ValueParams>,
    prompt: &Prompt,
    config: &RlConfig,
    seed: u64,
    iter: usize,
    slot: usize,
) -> Result<Rollout> {
    let space = shaper.tokens();
    let t_max = shaper.t_max();
    let mut rollout_rng = rng::stream_n(seed, "rl/rollout", &[iter as u64, slot as u64]);
    let response = sample_response(
        actor,
        prompt,
        space,
        t_max,
        config.sample_temperature,
        config.sample_top_p,
        &mut rollout_rng,
    );
    let states = step_states(prompt, &response, space, t_max);
    let old_logps = policy_logprob_steps(actor, prompt, &response, space, t_max)?;
    let sft_logps = policy_logprob_steps(sft, prompt, &response, space, t_max)?;
    let logp = old_logps.iter().sum::<f64>();
    let logp_sft = sft_logps.iter().sum::<f64>();
    let shaped = shaper.shaped(prompt, &response, logp, logp_sft)?;

    let steps = states.len();
    let mut rewards = vec![0.0; steps];
    if config.per_token_kl {
        for t in 0..steps {
            rewards[t] = -config.beta * (old_logps[t] - sft_logps[t]);
        }
        rewards[steps - 1] += shaped.penalized;
    } else {
        rewards[steps - 1] = shaped.total;
    }
    let values: Vec<f64> = match value {
        Some(v) => states.iter().map(|h| v.predict(h)).collect(),
        None => vec![0.0; steps],
    };
    let (advantages, returns) = gae(&rewards, &values, 0.0, config.gamma, config.lambda_gae)?;
    let quality = true_quality(prompt, &response, space, t_max);
    Ok(Rollout {
        experience: Experience {
            prompt: prompt.clone(),
            response,
            states,
            old_logps,
            rewards,
            values,
            advantages,
            returns,
            shaped,
            true_quality: quality,
        },
    })
}

fn standardize_advantages(batch: &mut [Experience]) {
    let mut all: Vec<f64> = batch.iter().flat_map(|e| e.advantages.clone()).collect();
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    all.clear();
    for e in batch.iter_mut() {
        for a in e.advantages.iter_mut() {
            *a = (*a - mean) / std;
        }
    }
}

/// Statistics of one PPO policy-gradient minibatch.
#[derive(Debug, Clone, Copy, Default)]
pub struct MinibatchStats {
    pub max_ratio_dev: f64,
    /// Tokens whose gradient was zeroed by the clip (ratio outside the band
    /// on the saturated side).
    pub clipped: usize,
    pub tokens: usize,
}

/// Policy gradient (for descent on the negated clip objective) of one
/// minibatch of experiences, averaged per token.
pub fn ppo_policy_minibatch_grad(
    actor: &PolicyParams,
    batch: &[&Experience],
    epsilon: f64,
) -> Result<(Vec<f64>, MinibatchStats)> {
    let vocab = actor.vocab_size();
    let mut grad = vec![0.0; vocab * STATE_DIM];
    let mut stats = MinibatchStats::default();
    let total_tokens: usize = batch.iter().map(|e| e.states.len()).sum();
    if total_tokens == 0 {
        return Err(Error::Input("empty minibatch".into()));
    }
    let scale = 1.0 / total_tokens as f64;
    for exp in batch {
        for (t, h) in exp.states.iter().enumerate() {
            let token = exp.response.tokens[t];
            let logp = crate::policy::log_softmax(&actor.logits(h));
            let log_ratio = (logp[token] - exp.old_logps[t]).clamp(-20.0, 20.0);
            let ratio = log_ratio.exp();
            let adv = exp.advantages[t];
            stats.max_ratio_dev = stats.max_ratio_dev.max((ratio - 1.0).abs());
            stats.tokens += 1;
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - epsilon, 1.0 + epsilon) * adv;
            if unclipped > clipped {
                // min picks the clipped branch, whose derivative is zero
                // outside the band.
                stats.clipped += 1;
                continue;
            }
            // d(ratio * adv)/d logits = ratio * adv * (onehot - softmax);
            // negated for gradient descent.
            let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
            let coeff = scale * ratio * adv;
            for (v, &p) in probs.iter().enumerate() {
                let indicator = if v == token { 1.0 } else { 0.0 };
                let g = -coeff * (indicator - p);
                if g == 0.0 {
                    continue;
                }
                let row = v * STATE_DIM;
                for (j, &x) in h.iter().enumerate() {
                    grad[row + j] += g * x;
                }
            }
        }
    }
    Ok((grad, stats))
}

/// Mean squared error between predicted values and stored GAE returns.
pub fn value_loss(value: &ValueParams, batch: &[&Experience]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for exp in batch {
        for (h, &ret) in exp.states.iter().zip(&exp.returns) {
            let diff = value.predict(h) - ret;
            total += diff * diff;
            count += 1;
        }
    }
    total / count.max(1) as f64
}

/// Gradient of [`value_loss`], with optional PPO-style clipping against the
/// value estimates stored in the experiences.
pub fn value_minibatch_grad(
    value: &ValueParams,
    batch: &[&Experience],
    value_clip: Option<f64>,
) -> Vec<f64> {
    let mut grad = vec![0.0; STATE_DIM];
    let total_tokens: usize = batch.iter().map(|e| e.states.len()).sum();
    let scale = 2.0 / total_tokens.max(1) as f64;
    for exp in batch {
        for (t, h) in exp.states.iter().enumerate() {
            let ret = exp.returns[t];
            let v = value.predict(h);
            let coeff = match value_clip {
                None => v - ret,
                Some(c) => {
                    let v_old = exp.values[t];
                    let v_clipped = v_old + (v - v_old).clamp(-c, c);
                    let raw = (v - ret) * (v - ret);
                    let clipped = (v_clipped - ret) * (v_clipped - ret);
                    if raw >= clipped {
                        v - ret
                    } else if (v - v_old).abs() < c {
                        v_clipped - ret
                    } else {
                        0.0
                    }
                }
            };
            for (j, &x) in h.iter().enumerate() {
                grad[j] += scale * coeff * x;
            }
        }
    }
    grad
}

/// Rolling snapshot bookkeeping: the policy after the mid-run iteration and
/// the pre-update policy whose rollouts scored the highest mean shaped
/// reward.
struct SnapshotTracker {
    mid_iter: usize,
    mid: Option<PolicyParams>,
    best: Option<(f64, usize, PolicyParams)>,
}

impl SnapshotTracker {
    fn new(total_iterations: usize) -> Self {
        Self {
            mid_iter: mid_iteration(total_iterations),
            mid: None,
            best: None,
        }
    }

    fn observe(
        &mut self,
        iter: usize,
        reward: f64,
        rollout_policy: &PolicyParams,
        updated_policy: &PolicyParams,
    ) {
        if iter == self.mid_iter {
            self.mid = Some(updated_policy.clone());
        }
        if self.best.as_ref().is_none_or(|(r, _, _)| reward > *r) {
            self.best = Some((reward, iter, rollout_policy.clone()));
        }
    }

    fn finish(self, final_policy: &PolicyParams, total_iterations: usize) -> Vec<PolicySnapshot> {
        let (_, best_iter, best_policy) = self
            .best
            .unwrap_or_else(|| (0.0, total_iterations - 1, final_policy.clone()));
        vec![
            PolicySnapshot {
                tag: CheckpointTag::Mid,
                iteration: self.mid_iter,
                policy: self.mid.unwrap_or_else(|| final_policy.clone()),
            },
            PolicySnapshot {
                tag: CheckpointTag::Final,
                iteration: total_iterations - 1,
                policy: final_policy.clone(),
            },
            PolicySnapshot {
                tag: CheckpointTag::Best,
                iteration: best_iter,
                policy: best_policy,
            },
        ]
    }
}

fn log_row(
    iter: usize,
    batch: &[Experience],
    space: &TokenSpace,
    off_policy_frac: f64,
    max_ratio_dev: f64,
    clip_inactive: bool,
) -> RunLogRow {
    let n = batch.len() as f64;
    RunLogRow {
        iter,
        mean_shaped_reward: batch.iter().map(|e| e.shaped.total).sum::<f64>() / n,
        mean_rm_reward: batch.iter().map(|e| e.shaped.rm_reward).sum::<f64>() / n,
        mean_true_quality: batch.iter().map(|e| e.true_quality).sum::<f64>() / n,
        mean_length: batch.iter().map(|e| e.response.len(space) as f64).sum::<f64>() / n,
        kl_estimate: batch.iter().map(|e| e.shaped.log_ratio).sum::<f64>() / n,
        off_policy_frac,
        max_ratio_dev,
        clip_inactive,
    }
}

/// PPO: M outer iterations of N rollouts from the pre-update policy, then K
/// inner epochs of clipped policy updates and value regression on size-b
/// minibatches, sharing one learning rate.
pub fn train_ppo(
    policy: &PolicyParams,
    value: &ValueParams,
    sft: &PolicyParams,
    shaper: &RewardShaper,
    prompts: &[Prompt],
    config: &RlConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Config("prompt set is empty".into()));
    }
    let mut actor = policy.clone();
    let mut critic = value.clone();
    let mut actor_opt = Adam::new(config.lr, actor.vocab_size() * STATE_DIM);
    let mut critic_opt = Adam::new(config.lr, STATE_DIM);
    let mut log = Vec::with_capacity(config.iterations);
    let mut tracker = SnapshotTracker::new(config.iterations);

    for iter in 0..config.iterations {
        let old = actor.clone();
        let picks = sample_prompts(prompts, config.n_experience, seed, iter);
        let mut batch = Vec::with_capacity(config.n_experience);
        for (slot, prompt) in picks.iter().enumerate() {
            let rollout = collect_rollout(
                &old,
                sft,
                shaper,
                Some(&critic),
                prompt,
                config,
                seed,
                iter,
                slot,
            )?;
            batch.push(rollout.experience);
        }
        if config.adv_norm {
            standardize_advantages(&mut batch);
        }

        let mut updates_done = 0usize;
        let mut off_policy_samples = 0usize;
        let mut consumed = 0usize;
        let mut max_ratio_dev = 0.0_f64;
        for k in 0..config.inner_epochs {
            let mut order: Vec<usize> = (0..batch.len()).collect();
            let mut shuffle_rng = rng::stream_n(seed, "rl/shuffle", &[iter as u64, k as u64]);
            for i in (1..order.len()).rev() {
                let j = shuffle_rng.gen_range(0..=i);
                order.swap(i, j);
            }
            for chunk in order.chunks(config.minibatch) {
                let minibatch: Vec<&Experience> = chunk.iter().map(|&i| &batch[i]).collect();
                if updates_done > 0 {
                    off_policy_samples += minibatch.len();
                }
                consumed += minibatch.len();
                let (pol_grad, stats) =
                    ppo_policy_minibatch_grad(&actor, &minibatch, config.epsilon)?;
                max_ratio_dev = max_ratio_dev.max(stats.max_ratio_dev);
                if pol_grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged(format!(
                        "non-finite policy gradient at iteration {iter}, update {updates_done}"
                    )));
                }
                let mut flat: Vec<f64> = actor.u.iter().flatten().copied().collect();
                actor_opt.step(&mut flat, &pol_grad);
                let mut idx = 0;
                for row in &mut actor.u {
                    row.copy_from_slice(&flat[idx..idx + STATE_DIM]);
                    idx += STATE_DIM;
                }

                let val_grad = value_minibatch_grad(&critic, &minibatch, config.value_clip);
                if val_grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged(format!(
                        "non-finite value gradient at iteration {iter}, update {updates_done}"
                    )));
                }
                critic_opt.step(&mut critic.w, &val_grad);
                updates_done += 1;
            }
        }

        let off_frac = off_policy_samples as f64 / consumed.max(1) as f64;
        let row = log_row(
            iter,
            &batch,
            shaper.tokens(),
            off_frac,
            max_ratio_dev,
            config.clip_inactive(),
        );
        tracker.observe(iter, row.mean_shaped_reward, &old, &actor);
        log.push(row);
    }

    let snapshots = tracker.finish(&actor, config.iterations);
    Ok(TrainOutcome {
        policy: actor,
        value: Some(critic),
        log,
        snapshots,
    })
}

/// Gradient (for descent) of the ReMax surrogate: the negated average of
/// `weight * grad log pi(y | x)` over the batch.
pub fn remax_surrogate_grad(
    actor: &PolicyParams,
    items: &[(&Prompt, &Response, f64)],
    space: &TokenSpace,
    t_max: usize,
) -> Result<Vec<f64>> {
    let vocab = actor.vocab_size();
    let mut grad = vec![0.0; vocab * STATE_DIM];
    if items.is_empty() {
        return Err(Error::Input("empty ReMax batch".into()));
    }
    let scale = 1.0 / items.len() as f64;
    for (prompt, response, weight) in items {
        if *weight == 0.0 {
            continue;
        }
        for (t, _) in response.tokens.iter().enumerate() {
            let h = state_features(prompt, &response.tokens[..t], space, t_max);
            let token = response.tokens[t];
            if token >= vocab {
                return Err(Error::Input(format!("token id {token} out of vocabulary")));
            }
            let probs = crate::policy::softmax(&actor.logits(&h));
            for (v, &p) in probs.iter().enumerate() {
                let indicator = if v == token { 1.0 } else { 0.0 };
                let g = -scale * weight * (indicator - p);
                if g == 0.0 {
                    continue;
                }
                let row = v * STATE_DIM;
                for (j, &x) in h.iter().enumerate() {
                    grad[row + j] += g * x;
                }
            }
        }
    }
    Ok(grad)
}

/// ReMax: one ascent step per iteration on `(r(y) - r(greedy)) log pi(y|x)`
/// averaged over N sampled prompts.
pub fn train_remax(
    policy: &PolicyParams,
    sft: &PolicyParams,
    shaper: &RewardShaper,
    prompts: &[Prompt],
    config: &RlConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::Config("prompt set is empty".into()));
    }
    let space = *shaper.tokens();
    let t_max = shaper.t_max();
    let mut actor = policy.clone();
    let mut opt = Adam::new(config.lr, actor.vocab_size() * STATE_DIM);
    let mut log = Vec::with_capacity(config.iterations);
    let mut tracker = SnapshotTracker::new(config.iterations);

    for iter in 0..config.iterations {
        let rollout_policy = actor.clone();
        let picks = sample_prompts(prompts, config.n_experience, seed, iter);
        let mut batch = Vec::with_capacity(picks.len());
        let mut items: Vec<(Prompt, Response, f64)> = Vec::with_capacity(picks.len());
        for (slot, prompt) in picks.iter().enumerate() {
            let rollout = collect_rollout(
                &actor, sft, shaper, None, prompt, config, seed, iter, slot,
            )?;
            let sampled = rollout.experience;
            let baseline = greedy_response(&actor, prompt, &space, t_max);
            let base_logp: f64 =
                policy_logprob_steps(&actor, prompt, &baseline, &space, t_max)?
                    .iter()
                    .sum();
            let base_sft: f64 = policy_logprob_steps(sft, prompt, &baseline, &space, t_max)?
                .iter()
                .sum();
            let base_shaped = shaper.shaped(prompt, &baseline, base_logp, base_sft)?;
            let weight = sampled.shaped.total - base_shaped.total;
            items.push(((*prompt).clone(), sampled.response.clone(), weight));
            batch.push(sampled);
        }
        let item_refs: Vec<(&Prompt, &Response, f64)> =
            items.iter().map(|(p, r, w)| (p, r, *w)).collect();
        let grad = remax_surrogate_grad(&actor, &item_refs, &space, t_max)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!(
                "non-finite ReMax gradient at iteration {iter}"
            )));
        }
        let mut flat: Vec<f64> = actor.u.iter().flatten().copied().collect();
        opt.step(&mut flat, &grad);
        let mut idx = 0;
        for row in &mut actor.u {
            row.copy_from_slice(&flat[idx..idx + STATE_DIM]);
            idx += STATE_DIM;
        }

        let row = log_row(iter, &batch, &space, 0.0, 0.0, true);
        tracker.observe(iter, row.mean_shaped_reward, &rollout_policy, &actor);
        log.push(row);
    }

    let snapshots = tracker.finish(&actor, config.iterations);
    Ok(TrainOutcome {
        policy: actor,
        value: None,
        log,
        snapshots,
    })
}
