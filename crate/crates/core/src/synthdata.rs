//! Synthetic preference corpus.
//!
//! Prompts ask for a set of keyword tokens to be covered; responses are token
//! sequences over a small vocabulary of keywords and fillers. A scripted
//! demonstrator produces responses of varying quality and length, and a
//! synthetic annotator with a tunable length bias turns pairs of responses
//! into preference data. The bias coefficient can be calibrated so that a
//! target fraction of pairs prefers the longer response.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Repetition penalty weight in the ground-truth quality score.
pub const C_REP: f64 = 0.5;

/// Smallest and largest keyword count per prompt.
pub const MIN_KEYWORDS: usize = 2;
pub const MAX_KEYWORDS: usize = 5;

/// Token-id layout: keywords first, then fillers, then a single EOS id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpace {
    pub keyword_vocab: usize,
    pub filler_vocab: usize,
}

impl TokenSpace {
    pub fn vocab_size(&self) -> usize {
        self.keyword_vocab + self.filler_vocab + 1
    }

    pub fn eos(&self) -> usize {
        self.keyword_vocab + self.filler_vocab
    }

    pub fn is_keyword(&self, token: usize) -> bool {
        token < self.keyword_vocab
    }

    pub fn is_filler(&self, token: usize) -> bool {
        token >= self.keyword_vocab && token < self.eos()
    }

    pub fn filler(&self, index: usize) -> usize {
        debug_assert!(index < self.filler_vocab);
        self.keyword_vocab + index
    }
}

/// A prompt: an ordered set of distinct keyword tokens the response should
/// cover.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub id: u64,
    pub keywords: Vec<usize>,
}

impl Prompt {
    pub fn k(&self) -> usize {
        self.keywords.len()
    }
}

/// A token sequence ending at EOS or truncated at `t_max`. `length` excludes
/// the EOS token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub tokens: Vec<usize>,
}

impl Response {
    pub fn new(tokens: Vec<usize>, space: &TokenSpace) -> Result<Self> {
        let eos = space.eos();
        for (i, &t) in tokens.iter().enumerate() {
            if t >= space.vocab_size() {
                return Err(Error::Input(format!("token id {t} out of vocabulary")));
            }
            if t == eos && i + 1 != tokens.len() {
                return Err(Error::Input("EOS not in final position".into()));
            }
        }
        Ok(Self { tokens })
    }

    /// Token count excluding EOS.
    pub fn len(&self, space: &TokenSpace) -> usize {
        match self.tokens.last() {
            Some(&t) if t == space.eos() => self.tokens.len() - 1,
            _ => self.tokens.len(),
        }
    }

    pub fn is_empty(&self, space: &TokenSpace) -> bool {
        self.len(space) == 0
    }

    pub fn ends_with_eos(&self, space: &TokenSpace) -> bool {
        self.tokens.last() == Some(&space.eos())
    }

    /// Content tokens (everything before EOS).
    pub fn content<'a>(&'a self, space: &TokenSpace) -> &'a [usize] {
        &self.tokens[..self.len(space)]
    }
}

/// A preference pair plus the annotator utilities that produced the label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Prompt,
    pub chosen: Response,
    pub rejected: Response,
    /// (chosen, rejected) annotator utilities at generation time.
    pub true_utilities: (f64, f64),
}

/// Knobs of one perturbed demonstrator.
///
/// The scripted demonstrator walks the prompt keywords in order, emitting
/// geometric runs of filler between them; perturbations skip or repeat
/// keywords, which is what creates quality and length variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoParams {
    /// Probability of emitting another filler token before the next keyword.
    pub filler_continue: f64,
    /// Probability of dropping a keyword entirely.
    pub skip_prob: f64,
    /// Probability of emitting an extra copy of a just-emitted keyword
    /// (applied repeatedly, so repeats are geometric too).
    pub repeat_prob: f64,
    /// Probability of emitting another trailing filler token after the last
    /// keyword.
    pub tail_continue: f64,
    /// Half-width of the uniform per-prompt multiplier `1 +/- spread` on
    /// the mean filler-run length. Both responses of a pair share the draw,
    /// so prompts differ widely in typical length with no quality
    /// difference.
    pub filler_spread: f64,
    /// Continue probability of a small per-response filler run added after
    /// each planned run. This is length variation invisible to every other
    /// feature, which is what lets a length-biased annotator leave a
    /// fittable trace in the labels.
    pub filler_jitter: f64,
}

impl Default for DemoParams {
    fn default() -> Self {
        Self {
            filler_continue: 0.8,
            skip_prob: 0.44,
            repeat_prob: 0.3,
            tail_continue: 0.8,
            filler_spread: 0.85,
            filler_jitter: 0.06,
        }
    }
}

impl DemoParams {
    /// The unperturbed demonstrator used for behavior-cloning demos.
    pub fn scripted() -> Self {
        Self {
            filler_continue: 0.5,
            skip_prob: 0.0,
            repeat_prob: 0.0,
            tail_continue: 0.3,
            filler_spread: 0.0,
            filler_jitter: 0.0,
        }
    }

    /// Verbosity-shifted copy for one prompt: the mean filler-run length is
    /// scaled by `1 + delta` (a geometric run with continue probability `p`
    /// has mean `p / (1 - p)`).
    fn with_verbosity_shift(&self, delta: f64) -> Self {
        let shift = |p: f64| {
            let mean = (p / (1.0 - p)) * (1.0 + delta).max(0.05);
            (mean / (1.0 + mean)).clamp(0.01, 0.9)
        };
        Self {
            filler_continue: shift(self.filler_continue),
            tail_continue: shift(self.tail_continue),
            ..*self
        }
    }
}

/// Corpus generation configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub n_pairs: usize,
    pub tokens: TokenSpace,
    pub t_max: usize,
    /// Annotator length-bias coefficient applied to L(y)/t_max.
    pub annotator_length_bias: f64,
    pub annotator_noise_std: f64,
    pub seed: u64,
    /// Resample attempts before a prompt with identical responses is skipped.
    pub retry_cap: usize,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 {
            return Err(Error::Config("n_pairs must be positive".into()));
        }
        if self.tokens.keyword_vocab < MAX_KEYWORDS {
            return Err(Error::Config(format!(
                "keyword vocab {} smaller than max keyword count {}",
                self.tokens.keyword_vocab, MAX_KEYWORDS
            )));
        }
        if self.tokens.filler_vocab == 0 {
            return Err(Error::Config("filler vocab must be non-empty".into()));
        }
        if self.t_max < 8 {
            return Err(Error::Config("t_max must be at least 8".into()));
        }
        if self.annotator_noise_std < 0.0 {
            return Err(Error::Config("annotator noise std must be >= 0".into()));
        }
        Ok(())
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_pairs: 10000,
            tokens: TokenSpace {
                keyword_vocab: 5,
                filler_vocab: 10,
            },
            t_max: 128,
            annotator_length_bias: 0.0,
            annotator_noise_std: 0.15,
            seed: 0,
            retry_cap: 8,
        }
    }
}

/// Generates `n` prompts, each with a uniform keyword count in
/// [`MIN_KEYWORDS`, `MAX_KEYWORDS`] and distinct keyword ids.
pub fn gen_prompts(config: &CorpusConfig, n: usize) -> Result<Vec<Prompt>> {
    if n == 0 {
        return Err(Error::Config("prompt count must be positive".into()));
    }
    config.validate()?;
    Ok((0..n as u64)
        .map(|id| gen_prompt(config, "data/prompt", id))
        .collect())
}

fn gen_prompt(config: &CorpusConfig, stream_name: &str, id: u64) -> Prompt {
    let mut rng = rng::stream_n(config.seed, stream_name, &[id]);
    let k = rng.gen_range(MIN_KEYWORDS..=MAX_KEYWORDS);
    // Partial Fisher-Yates over the keyword vocabulary keeps ids distinct.
    let mut pool: Vec<usize> = (0..config.tokens.keyword_vocab).collect();
    let mut keywords = Vec::with_capacity(k);
    for i in 0..k {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
        keywords.push(pool[i]);
    }
    Prompt { id, keywords }
}

/// Ground-truth quality: keyword coverage minus a repetition penalty.
///
/// `coverage` is the fraction of prompt keywords present in the response;
/// repeats are prompt-keyword occurrences beyond the first, normalized by
/// `t_max`. The score saturates at full coverage, so verbosity alone never
/// raises it.
pub fn true_quality(prompt: &Prompt, response: &Response, space: &TokenSpace, t_max: usize) -> f64 {
    true_quality_with(prompt, response, space, t_max, C_REP)
}

pub fn true_quality_with(
    prompt: &Prompt,
    response: &Response,
    space: &TokenSpace,
    t_max: usize,
    c_rep: f64,
) -> f64 {
    let k = prompt.k();
    let mut occurrences = vec![0usize; k];
    for &t in response.content(space) {
        if let Some(slot) = prompt.keywords.iter().position(|&kw| kw == t) {
            occurrences[slot] += 1;
        }
    }
    let distinct = occurrences.iter().filter(|&&c| c > 0).count();
    let total: usize = occurrences.iter().sum();
    let coverage = distinct as f64 / k as f64;
    let repeats_norm = (total - distinct) as f64 / t_max as f64;
    coverage - c_rep * repeats_norm
}

/// Filler-run lengths for each keyword slot plus the tail. Preference pairs
/// share one plan between their two responses, so within-pair length
/// differences come from skips and repeats rather than filler noise.
struct FillerPlan {
    runs: Vec<usize>,
    repeat_runs: Vec<usize>,
}

fn geometric_run(continue_prob: f64, rng: &mut ChaCha8Rng) -> usize {
    let mut n = 0;
    while rng.gen::<f64>() < continue_prob {
        n += 1;
    }
    n
}

fn draw_plan(k: usize, params: &DemoParams, rng: &mut ChaCha8Rng) -> FillerPlan {
    let mut runs: Vec<usize> = (0..k)
        .map(|_| geometric_run(params.filler_continue, rng))
        .collect();
    runs.push(geometric_run(params.tail_continue, rng));
    let repeat_runs = (0..k)
        .map(|_| geometric_run(params.repeat_prob, rng))
        .collect();
    FillerPlan { runs, repeat_runs }
}

fn demo_response_planned(
    prompt: &Prompt,
    config: &CorpusConfig,
    params: &DemoParams,
    plan: &FillerPlan,
    rng: &mut ChaCha8Rng,
) -> Response {
    let space = &config.tokens;
    let mut tokens = Vec::new();
    let room = |tokens: &Vec<usize>| tokens.len() < config.t_max;
    for (slot, &kw) in prompt.keywords.iter().enumerate() {
        let run = plan.runs[slot] + geometric_run(params.filler_jitter, rng);
        for _ in 0..run {
            if !room(&tokens) {
                break;
            }
            tokens.push(space.filler(rng.gen_range(0..space.filler_vocab)));
        }
        // A skip drops exactly the keyword token. The planned repeat run is
        // emitted either way (as filler babble when the keyword is absent),
        // so the within-pair length footprint of a skip is one token.
        let skipped = rng.gen::<f64>() < params.skip_prob;
        if !skipped && room(&tokens) {
            tokens.push(kw);
        }
        for _ in 0..plan.repeat_runs[slot] {
            if !room(&tokens) {
                break;
            }
            if skipped {
                tokens.push(space.filler(rng.gen_range(0..space.filler_vocab)));
            } else {
                tokens.push(kw);
            }
        }
    }
    let tail = plan.runs[prompt.k()] + geometric_run(params.filler_jitter, rng);
    for _ in 0..tail {
        if !room(&tokens) {
            break;
        }
        tokens.push(space.filler(rng.gen_range(0..space.filler_vocab)));
    }
    if room(&tokens) {
        tokens.push(space.eos());
    }
    Response { tokens }
}

/// One demonstrator rollout with its own filler plan.
pub fn demo_response(
    prompt: &Prompt,
    config: &CorpusConfig,
    params: &DemoParams,
    rng: &mut ChaCha8Rng,
) -> Response {
    let plan = draw_plan(prompt.k(), params, rng);
    demo_response_planned(prompt, config, params, &plan, rng)
}

/// A response pair with everything the annotator needs except the bias
/// coefficient. Factoring the bias out keeps the chosen-longer fraction a
/// monotone function of it, which the calibration bisection relies on.
struct PairDraft {
    prompt: Prompt,
    responses: [Response; 2],
    qualities: [f64; 2],
    lengths: [usize; 2],
    noise: [f64; 2],
}

impl PairDraft {
    fn utility(&self, index: usize, bias: f64, t_max: usize) -> f64 {
        self.qualities[index] + bias * self.lengths[index] as f64 / t_max as f64 + self.noise[index]
    }

    /// True iff the annotator prefers the strictly longer response at `bias`.
    fn chooses_longer(&self, bias: f64, t_max: usize) -> bool {
        let (ua, ub) = (self.utility(0, bias, t_max), self.utility(1, bias, t_max));
        // Ties go to the first-sampled response.
        let chosen = usize::from(ub > ua);
        self.lengths[chosen] > self.lengths[1 - chosen]
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one value per call is plenty at this scale.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn draft_pairs(config: &CorpusConfig, samplers: &[DemoParams; 2]) -> Vec<PairDraft> {
    let mut drafts = Vec::with_capacity(config.n_pairs);
    for id in 0..config.n_pairs as u64 {
        let prompt = gen_prompt(config, "data/prompt", id);
        let mut resp_rng = rng::stream_n(config.seed, "data/response", &[id]);
        let mut noise_rng = rng::stream_n(config.seed, "data/noise", &[id]);
        // One verbosity shift per prompt, shared by both samplers.
        let spread = 0.5 * (samplers[0].filler_spread + samplers[1].filler_spread);
        let delta = if spread > 0.0 {
            let mut verbosity_rng = rng::stream_n(config.seed, "data/verbosity", &[id]);
            verbosity_rng.gen_range(-spread..=spread)
        } else {
            0.0
        };
        let shifted = [
            samplers[0].with_verbosity_shift(delta),
            samplers[1].with_verbosity_shift(delta),
        ];
        // The filler plan is a prompt property: both responses of the pair
        // share it.
        let mut plan_rng = rng::stream_n(config.seed, "data/plan", &[id]);
        let plan = draw_plan(prompt.k(), &shifted[0], &mut plan_rng);
        let mut found = None;
        for _ in 0..=config.retry_cap {
            let a = demo_response_planned(&prompt, config, &shifted[0], &plan, &mut resp_rng);
            let b = demo_response_planned(&prompt, config, &shifted[1], &plan, &mut resp_rng);
            if a != b {
                found = Some([a, b]);
                break;
            }
        }
        let Some(responses) = found else {
            continue; // degenerate sampler for this prompt; skip it
        };
        let qualities = [
            true_quality(&prompt, &responses[0], &config.tokens, config.t_max),
            true_quality(&prompt, &responses[1], &config.tokens, config.t_max),
        ];
        let lengths = [
            responses[0].len(&config.tokens),
            responses[1].len(&config.tokens),
        ];
        let noise = if config.annotator_noise_std > 0.0 {
            [
                config.annotator_noise_std * gaussian(&mut noise_rng),
                config.annotator_noise_std * gaussian(&mut noise_rng),
            ]
        } else {
            [0.0, 0.0]
        };
        drafts.push(PairDraft {
            prompt,
            responses,
            qualities,
            lengths,
            noise,
        });
    }
    drafts
}

fn drafts_to_pairs(drafts: Vec<PairDraft>, bias: f64, t_max: usize) -> Vec<PreferencePair> {
    drafts
        .into_iter()
        .map(|d| {
            let ua = d.utility(0, bias, t_max);
            let ub = d.utility(1, bias, t_max);
            let [a, b] = d.responses;
            if ub > ua {
                PreferencePair {
                    prompt: d.prompt,
                    chosen: b,
                    rejected: a,
                    true_utilities: (ub, ua),
                }
            } else {
                PreferencePair {
                    prompt: d.prompt,
                    chosen: a,
                    rejected: b,
                    true_utilities: (ua, ub),
                }
            }
        })
        .collect()
}

/// Generates the preference corpus under `config.annotator_length_bias`.
pub fn gen_preference_corpus(
    config: &CorpusConfig,
    samplers: &[DemoParams; 2],
) -> Result<Vec<PreferencePair>> {
    config.validate()?;
    let drafts = draft_pairs(config, samplers);
    Ok(drafts_to_pairs(
        drafts,
        config.annotator_length_bias,
        config.t_max,
    ))
}

/// Fraction of pairs whose chosen response is strictly longer.
pub fn chosen_longer_fraction(corpus: &[PreferencePair], space: &TokenSpace) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let longer = corpus
        .iter()
        .filter(|p| p.chosen.len(space) > p.rejected.len(space))
        .count();
    longer as f64 / corpus.len() as f64
}

/// Calibration tolerance on the chosen-longer fraction.
pub const CALIBRATION_TOL: f64 = 0.03;

/// Bisection bound on the annotator bias coefficient.
const BIAS_BOUND: f64 = 100.0;

/// Finds an annotator bias whose corpus has a chosen-longer fraction within
/// [`CALIBRATION_TOL`] of `target_frac`, bisecting on a fixed-seed corpus.
pub fn calibrate_length_bias(
    config: &CorpusConfig,
    samplers: &[DemoParams; 2],
    target_frac: f64,
) -> Result<f64> {
    config.validate()?;
    if !(target_frac > 0.0 && target_frac < 1.0) {
        return Err(Error::Config(format!(
            "target fraction must lie in (0, 1), got {target_frac}"
        )));
    }
    let drafts = draft_pairs(config, samplers);
    if drafts.is_empty() {
        return Err(Error::Config("corpus generation produced no pairs".into()));
    }
    let frac_at = |bias: f64| -> f64 {
        let longer = drafts
            .iter()
            .filter(|d| d.chooses_longer(bias, config.t_max))
            .count();
        longer as f64 / drafts.len() as f64
    };
    let (min, max) = (frac_at(-BIAS_BOUND), frac_at(BIAS_BOUND));
    if target_frac < min - CALIBRATION_TOL || target_frac > max + CALIBRATION_TOL {
        return Err(Error::Calibration {
            target: target_frac,
            min,
            max,
        });
    }
    let (mut lo, mut hi) = (-BIAS_BOUND, BIAS_BOUND);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if frac_at(mid) < target_frac {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let bias = 0.5 * (lo + hi);
    let achieved = frac_at(bias);
    if (achieved - target_frac).abs() > CALIBRATION_TOL {
        return Err(Error::Calibration {
            target: target_frac,
            min,
            max,
        });
    }
    Ok(bias)
}

/// Splits the corpus by which side is longer; equal-length pairs appear in
/// neither sublist.
pub fn split_by_length<'a>(
    corpus: &'a [PreferencePair],
    space: &TokenSpace,
) -> (Vec<&'a PreferencePair>, Vec<&'a PreferencePair>) {
    let mut chosen_longer = Vec::new();
    let mut rejected_longer = Vec::new();
    for pair in corpus {
        let (lc, lr) = (pair.chosen.len(space), pair.rejected.len(space));
        if lc > lr {
            chosen_longer.push(pair);
        } else if lr > lc {
            rejected_longer.push(pair);
        }
    }
    (chosen_longer, rejected_longer)
}

/// One line of the corpus JSONL format.
#[derive(Debug, Serialize, Deserialize)]
struct CorpusRecord {
    prompt: Prompt,
    chosen_tokens: Vec<usize>,
    rejected_tokens: Vec<usize>,
    lengths: [usize; 2],
    true_utilities: (f64, f64),
}

/// Writes the corpus as line-delimited JSON.
pub fn write_corpus<W: Write>(
    corpus: &[PreferencePair],
    space: &TokenSpace,
    mut out: W,
) -> Result<()> {
    for pair in corpus {
        let record = CorpusRecord {
            prompt: pair.prompt.clone(),
            chosen_tokens: pair.chosen.tokens.clone(),
            rejected_tokens: pair.rejected.tokens.clone(),
            lengths: [pair.chosen.len(space), pair.rejected.len(space)],
            true_utilities: pair.true_utilities,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a corpus written by [`write_corpus`].
pub fn read_corpus<R: BufRead>(input: R) -> Result<Vec<PreferencePair>> {
    let mut corpus = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line)?;
        corpus.push(PreferencePair {
            prompt: record.prompt,
            chosen: Response {
                tokens: record.chosen_tokens,
            },
            rejected: Response {
                tokens: record.rejected_tokens,
            },
            true_utilities: record.true_utilities,
        });
    }
    Ok(corpus)
}
