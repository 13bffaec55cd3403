//! Toy autoregressive token policy.
//!
//! The policy is a linear map from per-step state features to vocabulary
//! logits. State features track which prompt keywords are covered so far,
//! the normalized position, and the class of the previous token, which is
//! enough for a behavior-cloned policy to imitate the scripted demonstrator
//! and for RL to trade off coverage, repetition, and verbosity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng;
use crate::synthdata::{Prompt, Response, TokenSpace, MAX_KEYWORDS};

/// State feature dimension: covered indicators (padded), position, last-token
/// class one-hot, constant one.
pub const STATE_DIM: usize = MAX_KEYWORDS + 1 + 4 + 1;

/// Per-step state features for the token at position `tokens.len()`.
///
/// Covered indicators are indexed by keyword id (the keyword vocabulary has
/// exactly [`MAX_KEYWORDS`] entries): 0 marks a prompt keyword not yet
/// emitted, 1 marks anything else (emitted, or not requested and therefore
/// vacuously covered). This keeps "everything covered" at an indicator sum
/// of [`MAX_KEYWORDS`] for every prompt size while letting the policy target
/// specific uncovered keywords.
pub fn state_features(
    prompt: &Prompt,
    tokens: &[usize],
    space: &TokenSpace,
    t_max: usize,
) -> Vec<f64> {
    debug_assert!(
        space.keyword_vocab <= MAX_KEYWORDS,
        "covered indicators are indexed by keyword id"
    );
    let mut f = vec![0.0; STATE_DIM];
    for (id, slot) in f.iter_mut().enumerate().take(MAX_KEYWORDS) {
        let uncovered = prompt.keywords.contains(&id) && !tokens.contains(&id);
        *slot = if uncovered { 0.0 } else { 1.0 };
    }
    f[MAX_KEYWORDS] = tokens.len() as f64 / t_max as f64;
    let class = match tokens.last() {
        None => 3, // start
        Some(&t) if prompt.keywords.contains(&t) => 0,
        Some(&t) if space.is_keyword(t) => 1,
        _ => 2, // filler
    };
    f[MAX_KEYWORDS + 1 + class] = 1.0;
    f[STATE_DIM - 1] = 1.0;
    f
}

/// Policy parameters: `logits = U h`, one row of `U` per vocabulary token
/// (EOS included).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub u: Vec<Vec<f64>>,
}

impl PolicyParams {
    /// Uniform policy: all logits zero.
    pub fn zeros(space: &TokenSpace) -> Self {
        Self {
            u: vec![vec![0.0; STATE_DIM]; space.vocab_size()],
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.u.len()
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        self.u
            .iter()
            .map(|row| row.iter().zip(h).map(|(w, x)| w * x).sum())
            .collect()
    }

    /// Flat row-major view of `U`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.u.iter().flatten().copied().collect()
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        let mut i = 0;
        for row in &mut self.u {
            row.copy_from_slice(&flat[i..i + STATE_DIM]);
            i += STATE_DIM;
        }
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|l| l - log_z).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    exp.iter().map(|e| e / z).collect()
}

/// State features for every step of a stored response, including the EOS
/// step when present.
pub fn step_states(
    prompt: &Prompt,
    response: &Response,
    space: &TokenSpace,
    t_max: usize,
) -> Vec<Vec<f64>> {
    (0..response.tokens.len())
        .map(|t| state_features(prompt, &response.tokens[..t], space, t_max))
        .collect()
}

/// Per-step conditional log-probabilities of a stored response.
pub fn policy_logprob_steps(
    params: &PolicyParams,
    prompt: &Prompt,
    response: &Response,
    space: &TokenSpace,
    t_max: usize,
) -> Result<Vec<f64>> {
    let vocab = params.vocab_size();
    let mut out = Vec::with_capacity(response.tokens.len());
    for (t, &token) in response.tokens.iter().enumerate() {
        if token >= vocab {
            return Err(Error::Input(format!(
                "token id {token} outside vocabulary of size {vocab}"
            )));
        }
        let h = state_features(prompt, &response.tokens[..t], space, t_max);
        let logp = log_softmax(&params.logits(&h));
        out.push(logp[token]);
    }
    Ok(out)
}

/// Sequence log-probability: the sum over per-step conditionals.
pub fn policy_logprob(
    params: &PolicyParams,
    prompt: &Prompt,
    response: &Response,
    space: &TokenSpace,
    t_max: usize,
) -> Result<f64> {
    Ok(policy_logprob_steps(params, prompt, response, space, t_max)?
        .iter()
        .sum())
}

/// Nucleus sampling: smallest set of tokens with cumulative probability at
/// least `top_p`, renormalized. Stops at EOS or `t_max` content tokens.
pub fn sample_response(
    params: &PolicyParams,
    prompt: &Prompt,
    space: &TokenSpace,
    t_max: usize,
    temperature: f64,
    top_p: f64,
    rng: &mut ChaCha8Rng,
) -> Response {
    assert!(temperature > 0.0, "temperature must be positive");
    assert!(top_p > 0.0 && top_p <= 1.0, "top_p must be in (0, 1]");
    let mut tokens = Vec::new();
    while tokens.len() < t_max {
        let h = state_features(prompt, &tokens, space, t_max);
        let scaled: Vec<f64> = params.logits(&h).iter().map(|l| l / temperature).collect();
        let probs = softmax(&scaled);
        let token = nucleus_pick(&probs, top_p, rng);
        tokens.push(token);
        if token == space.eos() {
            break;
        }
    }
    Response { tokens }
}

fn nucleus_pick(probs: &[f64], top_p: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    // Ties broken by token id so the candidate set is deterministic.
    order.sort_by(|&a, &b| {
        probs[b]
            .partial_cmp(&probs[a])
            .expect("non-finite probability")
            .then(a.cmp(&b))
    });
    let mut kept = 0;
    let mut mass = 0.0;
    for &idx in &order {
        kept += 1;
        mass += probs[idx];
        if mass >= top_p {
            break;
        }
    }
    let candidates = &order[..kept];
    let u: f64 = rng.gen::<f64>() * mass;
    let mut acc = 0.0;
    for &idx in candidates {
        acc += probs[idx];
        if u < acc {
            return idx;
        }
    }
    candidates[kept - 1]
}

/// Greedy decoding: argmax token each step, ties broken by lowest token id.
pub fn greedy_response(
    params: &PolicyParams,
    prompt: &Prompt,
    space: &TokenSpace,
    t_max: usize,
) -> Response {
    let mut tokens = Vec::new();
    while tokens.len() < t_max {
        let h = state_features(prompt, &tokens, space, t_max);
        let logits = params.logits(&h);
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        tokens.push(best);
        if best == space.eos() {
            break;
        }
    }
    Response { tokens }
}

/// Behavior-cloning configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 25,
            lr: 0.05,
            batch: 256,
            seed: 0,
        }
    }
}

/// Maximizes demonstration log-likelihood with minibatch Adam. Aborts if the
/// epoch loss increases for five consecutive epochs.
pub fn bc_pretrain(
    demos: &[(Prompt, Response)],
    space: &TokenSpace,
    t_max: usize,
    config: &BcConfig,
) -> Result<PolicyParams> {
    Ok(bc_pretrain_traced(demos, space, t_max, config)?.0)
}

/// [`bc_pretrain`] plus the mean negative log-likelihood per epoch.
pub fn bc_pretrain_traced(
    demos: &[(Prompt, Response)],
    space: &TokenSpace,
    t_max: usize,
    config: &BcConfig,
) -> Result<(PolicyParams, Vec<f64>)> {
    if demos.is_empty() {
        return Err(Error::Config("behavior cloning needs demonstrations".into()));
    }
    let mut params = PolicyParams::zeros(space);
    if config.epochs == 0 {
        return Ok((params, Vec::new()));
    }
    // Flatten demonstrations into supervised (state, token) steps.
    let mut states = Vec::new();
    let mut targets = Vec::new();
    for (prompt, response) in demos {
        for (t, &token) in response.tokens.iter().enumerate() {
            if token >= space.vocab_size() {
                return Err(Error::Input(format!("demo token id {token} out of vocabulary")));
            }
            states.push(state_features(prompt, &response.tokens[..t], space, t_max));
            targets.push(token);
        }
    }

    let mut opt = Adam::new(config.lr, params.to_flat().len());
    let mut best_loss = f64::INFINITY;
    let mut rising = 0;
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..states.len()).collect();
        let mut shuffle_rng = rng::stream_n(config.seed, "bc/shuffle", &[epoch as u64]);
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch) {
            let mut grad = vec![0.0; params.to_flat().len()];
            let mut loss = 0.0;
            for &idx in chunk {
                let h = &states[idx];
                let target = targets[idx];
                let probs = softmax(&params.logits(h));
                loss -= probs[target].max(f64::MIN_POSITIVE).ln();
                let scale = 1.0 / chunk.len() as f64;
                for (v, &p) in probs.iter().enumerate() {
                    let coeff = scale * (p - if v == target { 1.0 } else { 0.0 });
                    if coeff == 0.0 {
                        continue;
                    }
                    let row = v * STATE_DIM;
                    for (j, &x) in h.iter().enumerate() {
                        grad[row + j] += coeff * x;
                    }
                }
            }
            let mut flat = params.to_flat();
            opt.step(&mut flat, &grad);
            params.set_from_flat(&flat);
            epoch_loss += loss;
            steps += chunk.len();
        }
        epoch_loss /= steps as f64;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite behavior-cloning loss at epoch {epoch}"
            )));
        }
        // Divergence guard: five consecutive epochs clearly above the best
        // loss seen so far. The 5% band keeps minibatch noise on a
        // high-entropy plateau from tripping it.
        if epoch_loss > 1.05 * best_loss {
            rising += 1;
            if rising >= 5 {
                return Err(Error::Diverged(format!(
                    "behavior-cloning loss rose for {rising} consecutive epochs \
                     (epoch {epoch}, loss {epoch_loss:.6}, best {best_loss:.6})"
                )));
            }
        } else {
            rising = 0;
        }
        best_loss = best_loss.min(epoch_loss);
        trace.push(epoch_loss);
    }
    Ok((params, trace))
}

/// KL-shaped auxiliary reward: `r - beta * (log pi - log pi_sft)` at the
/// sequence level.
pub fn aux_reward(r: f64, logp_policy: f64, logp_sft: f64, beta: f64) -> f64 {
    debug_assert!(beta >= 0.0);
    r - beta * (logp_policy - logp_sft)
}

/// Symmetric reward clipping to `[-c, c]`. `c` may be infinite (no clipping).
pub fn clip_reward(r: f64, c: f64) -> Result<f64> {
    if c <= 0.0 || c.is_nan() {
        return Err(Error::Config(format!("clip threshold must be positive, got {c}")));
    }
    Ok(r.clamp(-c, c))
}

/// Length penalty: `r - alpha * L`.
pub fn length_penalized_reward(r: f64, alpha: f64, length: usize) -> f64 {
    debug_assert!(alpha >= 0.0);
    r - alpha * length as f64
}

/// Versioned policy checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub version: u32,
    pub params: PolicyParams,
    pub tokens: TokenSpace,
    pub t_max: usize,
    /// Hash of the configuration that produced this checkpoint.
    pub config_hash: String,
}

pub const POLICY_CHECKPOINT_VERSION: u32 = 1;

impl PolicyCheckpoint {
    pub fn new(params: PolicyParams, tokens: TokenSpace, t_max: usize, config_hash: String) -> Self {
        Self {
            version: POLICY_CHECKPOINT_VERSION,
            params,
            tokens,
            t_max,
            config_hash,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(json)?;
        if ckpt.version != POLICY_CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported policy checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
