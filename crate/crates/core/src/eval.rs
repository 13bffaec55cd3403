//! Evaluation: a programmable pairwise judge with order-swap aggregation,
//! the win-score metric, correlation reports, and Pareto-front extraction
//! over (mean length, win score) points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{sample_response, PolicyParams};
use crate::rm::{feature_vector, selected_reward, HeadSelector, RmParams};
use crate::rng;
use crate::stats;
use crate::synthdata::{true_quality, PreferencePair, Prompt, Response, TokenSpace};

/// Programmable judge standing in for a model-based evaluator. Zero biases
/// and zero noise make it an oracle on ground-truth quality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeConfig {
    /// Score bonus per unit of normalized length.
    pub length_bias: f64,
    /// Additive bonus for the response listed first in an order.
    pub position_bias: f64,
    /// Per-order score margin below which the order is a tie.
    pub tie_margin: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            length_bias: 0.0,
            position_bias: 0.0,
            tie_margin: 0.02,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

/// Verdict for the first argument of a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Win,
    Tie,
    Lose,
}

/// Aggregates the two per-order outcomes for a response: it wins overall iff
/// it received at least one win and at most one tie across the orders, loses
/// by the symmetric rule, and ties otherwise.
pub fn aggregate_orders(first: Verdict, second: Verdict) -> Verdict {
    use Verdict::*;
    match (first, second) {
        (Win, Win) | (Win, Tie) | (Tie, Win) => Win,
        (Lose, Lose) | (Lose, Tie) | (Tie, Lose) => Lose,
        _ => Tie,
    }
}

fn per_order(score_a: f64, score_b: f64, tie_margin: f64) -> Verdict {
    let diff = score_a - score_b;
    if diff > tie_margin {
        Verdict::Win
    } else if diff < -tie_margin {
        Verdict::Lose
    } else {
        Verdict::Tie
    }
}

/// Judges `y_a` against `y_b`, evaluating both presentation orders and
/// aggregating with [`aggregate_orders`]. Noise draws are independent per
/// response and order, derived from the judge seed and the prompt id.
pub fn judge_pair(
    cfg: &JudgeConfig,
    prompt: &Prompt,
    y_a: &Response,
    y_b: &Response,
    space: &TokenSpace,
    t_max: usize,
) -> Verdict {
    let base = |resp: &Response| -> f64 {
        true_quality(prompt, resp, space, t_max)
            + cfg.length_bias * resp.len(space) as f64 / t_max as f64
    };
    let base_a = base(y_a);
    let base_b = base(y_b);
    let mut noise_rng = rng::stream_n(cfg.seed, "eval/judge", &[prompt.id]);
    let mut noise = || -> f64 {
        if cfg.noise_std > 0.0 {
            use rand::Rng;
            let u1: f64 = noise_rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = noise_rng.gen::<f64>();
            cfg.noise_std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        } else {
            0.0
        }
    };
    // Order 1: y_a listed first.
    let o1 = per_order(
        base_a + cfg.position_bias + noise(),
        base_b + noise(),
        cfg.tie_margin,
    );
    // Order 2: y_b listed first.
    let o2 = per_order(
        base_a + noise(),
        base_b + cfg.position_bias + noise(),
        cfg.tie_margin,
    );
    aggregate_orders(o1, o2)
}

/// `50 + 100 (n_win - n_lose) / n`.
pub fn win_score(n: usize, n_win: usize, n_lose: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::Input("win score needs at least one example".into()));
    }
    if n_win + n_lose > n {
        return Err(Error::Input(format!(
            "wins ({n_win}) plus losses ({n_lose}) exceed total ({n})"
        )));
    }
    Ok(50.0 + 100.0 * (n_win as f64 - n_lose as f64) / n as f64)
}

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    stats::spearman(xs, ys)
}

/// Kendall tau (pairwise sign comparison).
pub fn kendall(xs: &[f64], ys: &[f64]) -> Result<f64> {
    stats::kendall(xs, ys)
}

/// All three correlation coefficients for one pair of samples.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
}

impl CorrelationReport {
    pub fn compute(xs: &[f64], ys: &[f64]) -> Result<Self> {
        Ok(Self {
            pearson: stats::pearson(xs, ys)?,
            spearman: stats::spearman(xs, ys)?,
            kendall: stats::kendall(xs, ys)?,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.pearson
            .abs()
            .max(self.spearman.abs())
            .max(self.kendall.abs())
    }
}

/// One evaluated run configuration on the score-versus-length plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub mean_length: f64,
    pub win_score: f64,
    pub run_id: String,
    pub checkpoint: String,
}

/// Extracts the Pareto front: a point stays iff no other point is at most as
/// long and at least as good with one of the two strict. Output is sorted by
/// length.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let dominated = |p: &ParetoPoint| {
        points.iter().any(|q| {
            q.mean_length <= p.mean_length
                && q.win_score >= p.win_score
                && (q.mean_length < p.mean_length || q.win_score > p.win_score)
        })
    };
    let mut front: Vec<ParetoPoint> = points.iter().filter(|p| !dominated(p)).cloned().collect();
    front.sort_by(|a, b| {
        a.mean_length
            .partial_cmp(&b.mean_length)
            .expect("finite lengths")
            .then(
                a.win_score
                    .partial_cmp(&b.win_score)
                    .expect("finite scores"),
            )
    });
    front
}

/// Aggregated judgment of a test policy against a baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub n_win: usize,
    pub n_lose: usize,
    pub n_tie: usize,
    pub win_score: f64,
    /// Mean content length of the test policy's responses.
    pub mean_length: f64,
    pub verdicts: Vec<Verdict>,
}

/// Sampling configuration for evaluation rollouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSampling {
    pub temperature: f64,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for EvalSampling {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            top_p: 0.8,
            seed: 0,
        }
    }
}

/// Samples one response per prompt from each policy and judges them. Both
/// policies consume identical per-prompt generator states, so evaluating a
/// policy against itself yields ties on every prompt.
pub fn eval_policy(
    policy: &PolicyParams,
    baseline: &PolicyParams,
    judge: &JudgeConfig,
    sampling: &EvalSampling,
    prompts: &[Prompt],
    space: &TokenSpace,
    t_max: usize,
) -> Result<EvalReport> {
    if prompts.is_empty() {
        return Err(Error::Config("evaluation prompt set is empty".into()));
    }
    let mut verdicts = Vec::with_capacity(prompts.len());
    let mut length_sum = 0.0;
    let (mut wins, mut loses, mut ties) = (0usize, 0usize, 0usize);
    for prompt in prompts {
        let mut rng_test = rng::stream_n(sampling.seed, "eval/sample", &[prompt.id]);
        let mut rng_base = rng::stream_n(sampling.seed, "eval/sample", &[prompt.id]);
        let y_test = sample_response(
            policy,
            prompt,
            space,
            t_max,
            sampling.temperature,
            sampling.top_p,
            &mut rng_test,
        );
        let y_base = sample_response(
            baseline,
            prompt,
            space,
            t_max,
            sampling.temperature,
            sampling.top_p,
            &mut rng_base,
        );
        length_sum += y_test.len(space) as f64;
        let verdict = judge_pair(judge, prompt, &y_test, &y_base, space, t_max);
        match verdict {
            Verdict::Win => wins += 1,
            Verdict::Lose => loses += 1,
            Verdict::Tie => ties += 1,
        }
        verdicts.push(verdict);
    }
    Ok(EvalReport {
        n: prompts.len(),
        n_win: wins,
        n_lose: loses,
        n_tie: ties,
        win_score: win_score(prompts.len(), wins, loses)?,
        mean_length: length_sum / prompts.len() as f64,
        verdicts,
    })
}

/// Correlations between the selected head's rewards and response lengths
/// over every response in the corpus (chosen and rejected).
pub fn rm_length_report(
    params: &RmParams,
    corpus: &[PreferencePair],
    space: &TokenSpace,
    t_max: usize,
    head: HeadSelector,
) -> Result<CorrelationReport> {
    if corpus.is_empty() {
        return Err(Error::Input("corpus is empty".into()));
    }
    let mut rewards = Vec::with_capacity(2 * corpus.len());
    let mut lengths = Vec::with_capacity(2 * corpus.len());
    for pair in corpus {
        for resp in [&pair.chosen, &pair.rejected] {
            let f = feature_vector(&pair.prompt, resp, space, t_max);
            rewards.push(selected_reward(params, &f, head)?);
            lengths.push(resp.len(space) as f64);
        }
    }
    CorrelationReport::compute(&rewards, &lengths)
}
