//! Reward models.
//!
//! A small tanh body maps hand-designed response features to a hidden
//! representation; one or two weight-normalized linear heads project it to
//! scalar rewards. The two-head variant trains a quality head to decorrelate
//! from response length and a length head to absorb the length signal, with
//! an optional orthogonality penalty between the head directions. Gradients
//! are computed analytically, including through the weight normalization and
//! through the batch Pearson statistics.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::rng;
use crate::stats;
use crate::synthdata::{PreferencePair, Prompt, Response, TokenSpace, MAX_KEYWORDS};

/// Feature dimension, padded with trailing zeros to a round size.
pub const FEATURE_DIM: usize = 16;

const LENGTH_BUCKETS: usize = 4;

/// Extracts the fixed response feature vector:
/// coverage fraction, per-keyword presence (padded), normalized repeat count,
/// filler fraction, normalized length, length-bucket one-hots, constant one.
pub fn feature_vector(
    prompt: &Prompt,
    response: &Response,
    space: &TokenSpace,
    t_max: usize,
) -> Vec<f64> {
    let k = prompt.k();
    let mut occurrences = vec![0usize; k];
    let mut fillers = 0usize;
    let content = response.content(space);
    for &t in content {
        if let Some(slot) = prompt.keywords.iter().position(|&kw| kw == t) {
            occurrences[slot] += 1;
        }
        if space.is_filler(t) {
            fillers += 1;
        }
    }
    let distinct = occurrences.iter().filter(|&&c| c > 0).count();
    let total: usize = occurrences.iter().sum();
    let len = content.len();

    let mut f = vec![0.0; FEATURE_DIM];
    f[0] = distinct as f64 / k as f64;
    for (slot, &c) in occurrences.iter().enumerate().take(MAX_KEYWORDS) {
        f[1 + slot] = if c > 0 { 1.0 } else { 0.0 };
    }
    f[6] = (total - distinct) as f64 / t_max as f64;
    f[7] = fillers as f64 / len.max(1) as f64;
    f[8] = len as f64 / t_max as f64;
    let bucket = ((LENGTH_BUCKETS * len) / t_max).min(LENGTH_BUCKETS - 1);
    f[9 + bucket] = 1.0;
    f[13] = 1.0;
    f
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmMode {
    SingleHead,
    TwoHead,
}

/// Which reward signal to read out of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSelector {
    /// Sum of both heads in two-head mode, the only head otherwise.
    Full,
    Quality,
    Length,
}

/// Reward-model parameters. Head predictions always use the normalized
/// directions `W / |W|` scaled by the positive gains, so only the direction
/// of the raw head vectors matters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RmParams {
    pub mode: RmMode,
    /// Hidden-layer weights, `hidden x FEATURE_DIM`, followed by tanh.
    pub body: Vec<Vec<f64>>,
    pub w_q: Vec<f64>,
    pub w_l: Vec<f64>,
    pub g_q: f64,
    pub g_l: f64,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    use rand::Rng;
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    v.iter().map(|x| x / n).collect()
}

impl RmParams {
    pub fn init(mode: RmMode, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (FEATURE_DIM as f64).sqrt();
        let body = (0..hidden)
            .map(|_| (0..FEATURE_DIM).map(|_| scale * gaussian(rng)).collect())
            .collect();
        let head = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            loop {
                let w: Vec<f64> = (0..hidden).map(|_| gaussian(rng)).collect();
                if norm(&w) > 1e-6 {
                    return w;
                }
            }
        };
        Self {
            mode,
            body,
            w_q: head(rng),
            w_l: head(rng),
            g_q: 1.0,
            g_l: 1.0,
        }
    }

    pub fn hidden(&self) -> usize {
        self.body.len()
    }

    fn body_forward(&self, f: &[f64]) -> Vec<f64> {
        self.body
            .iter()
            .map(|row| dot(row, f).tanh())
            .collect()
    }

    /// The single-head projection equivalent to summing both heads, used to
    /// check that two heads add no capacity beyond one effective head.
    pub fn effective_projection(&self) -> Vec<f64> {
        let uq = unit(&self.w_q);
        let ul = unit(&self.w_l);
        (0..self.hidden())
            .map(|i| self.g_q * uq[i] + self.g_l * ul[i])
            .collect()
    }

    /// Keeps raw head norms in a sane range and the gains positive. The
    /// renormalization leaves every prediction unchanged because only
    /// `W / |W|` enters the forward pass.
    fn renormalize(&mut self) {
        for w in [&mut self.w_q, &mut self.w_l] {
            let n = norm(w);
            assert!(n > 0.0, "head norm collapsed");
            if !(0.1..=10.0).contains(&n) {
                for x in w.iter_mut() {
                    *x /= n;
                }
            }
        }
        self.g_q = self.g_q.max(1e-6);
        self.g_l = self.g_l.max(1e-6);
    }
}

/// Forward pass: `(r_Q, r_L)`. In single-head mode `r_L = 0` and `r_Q` is the
/// sole reward.
pub fn rm_forward(params: &RmParams, f: &[f64]) -> Result<(f64, f64)> {
    if f.len() != FEATURE_DIM {
        return Err(Error::Input(format!(
            "feature dimension {} does not match {}",
            f.len(),
            FEATURE_DIM
        )));
    }
    if f.iter().any(|x| !x.is_finite()) {
        return Err(Error::Input("non-finite feature values".into()));
    }
    let a = params.body_forward(f);
    let r_q = params.g_q * dot(&unit(&params.w_q), &a);
    let r_l = match params.mode {
        RmMode::SingleHead => 0.0,
        RmMode::TwoHead => params.g_l * dot(&unit(&params.w_l), &a),
    };
    Ok((r_q, r_l))
}

/// Reward under a head selector.
pub fn selected_reward(params: &RmParams, f: &[f64], head: HeadSelector) -> Result<f64> {
    let (r_q, r_l) = rm_forward(params, f)?;
    match head {
        HeadSelector::Full => Ok(r_q + r_l),
        HeadSelector::Quality => Ok(r_q),
        HeadSelector::Length => match params.mode {
            RmMode::TwoHead => Ok(r_l),
            RmMode::SingleHead => Err(Error::UnsupportedMode(
                "length head requires a two-head model".into(),
            )),
        },
    }
}

/// Feature view of a preference pair, the unit the trainer consumes.
#[derive(Debug, Clone)]
pub struct PairFeatures {
    pub chosen: Vec<f64>,
    pub rejected: Vec<f64>,
    pub chosen_len: f64,
    pub rejected_len: f64,
}

pub fn pair_features(pair: &PreferencePair, space: &TokenSpace, t_max: usize) -> PairFeatures {
    PairFeatures {
        chosen: feature_vector(&pair.prompt, &pair.chosen, space, t_max),
        rejected: feature_vector(&pair.prompt, &pair.rejected, space, t_max),
        chosen_len: pair.chosen.len(space) as f64,
        rejected_len: pair.rejected.len(space) as f64,
    }
}

pub fn corpus_features(
    corpus: &[PreferencePair],
    space: &TokenSpace,
    t_max: usize,
) -> Vec<PairFeatures> {
    corpus
        .iter()
        .map(|p| pair_features(p, space, t_max))
        .collect()
}

/// `softplus(x) = log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Bradley-Terry ranking loss: mean `-log sigma(delta)` over the batch, where
/// `delta` is the full chosen-minus-rejected reward.
pub fn ranking_loss(params: &RmParams, batch: &[PairFeatures]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("ranking loss needs a non-empty batch".into()));
    }
    let mut total = 0.0;
    for pair in batch {
        let (cq, cl) = rm_forward(params, &pair.chosen)?;
        let (rq, rl) = rm_forward(params, &pair.rejected)?;
        let delta = (cq + cl) - (rq + rl);
        total += softplus(-delta);
    }
    Ok(total / batch.len() as f64)
}

/// Pearson correlation over a global minibatch; see [`stats::pearson`] for
/// the degenerate-batch rule.
pub fn pearson_batch(xs: &[f64], ys: &[f64]) -> Result<f64> {
    stats::pearson(xs, ys)
}

/// Length-correlation loss `|rho(r_Q, L)| - rho(r_L, L)` with a flag marking
/// a degenerate (constant-length) batch.
pub fn length_corr_loss(r_q: &[f64], r_l: &[f64], lengths: &[f64]) -> Result<(f64, bool)> {
    if r_q.len() < 2 {
        return Err(Error::Input(
            "length correlation needs at least 2 samples".into(),
        ));
    }
    let rho_q = pearson_batch(r_q, lengths)?;
    let rho_l = pearson_batch(r_l, lengths)?;
    let degenerate = {
        let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
        lengths.iter().all(|&l| (l - mean).abs() < 1e-12)
    };
    Ok((rho_q.abs() - rho_l, degenerate))
}

/// `|unit(W_Q) . unit(W_L)|`; two-head models only.
pub fn orthogonality_loss(params: &RmParams) -> Result<f64> {
    if params.mode != RmMode::TwoHead {
        return Err(Error::UnsupportedMode(
            "orthogonality loss requires a two-head model".into(),
        ));
    }
    Ok(dot(&unit(&params.w_q), &unit(&params.w_l)).abs())
}

/// Training hyperparameters. The correlation and orthogonality weights
/// default to 1; the optimizer schedule is a desk-scale Adam setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RmHyper {
    pub lambda_l: f64,
    pub lambda_o: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub hidden: usize,
    pub freeze_gains: bool,
    pub val_fraction: f64,
}

impl Default for RmHyper {
    fn default() -> Self {
        Self {
            lambda_l: 1.0,
            lambda_o: 1.0,
            lr: 2e-2,
            batch: 256,
            epochs: 40,
            seed: 0,
            hidden: 32,
            freeze_gains: false,
            val_fraction: 0.1,
        }
    }
}

/// Loss components of one batch.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossParts {
    pub ranking: f64,
    pub corr: f64,
    pub orth: f64,
}

impl LossParts {
    pub fn total(&self, hyper: &RmHyper) -> f64 {
        self.ranking + hyper.lambda_l * self.corr + hyper.lambda_o * self.orth
    }
}

/// Combined two-head loss: ranking plus the length-correlation loss of the
/// chosen batch and of the rejected batch, plus the orthogonality penalty.
pub fn odin_total_loss(params: &RmParams, batch: &[PairFeatures], hyper: &RmHyper) -> Result<f64> {
    let parts = loss_parts(params, batch)?;
    Ok(parts.total(hyper))
}

fn loss_parts(params: &RmParams, batch: &[PairFeatures]) -> Result<LossParts> {
    if params.mode != RmMode::TwoHead {
        return Err(Error::UnsupportedMode(
            "combined loss requires a two-head model".into(),
        ));
    }
    if batch.len() < 2 {
        return Err(Error::Input("combined loss needs at least 2 pairs".into()));
    }
    let ranking = ranking_loss(params, batch)?;
    let mut corr = 0.0;
    for side in [Side::Chosen, Side::Rejected] {
        let (r_q, r_l, lengths) = side_rewards(params, batch, side)?;
        let (loss, _) = length_corr_loss(&r_q, &r_l, &lengths)?;
        corr += loss;
    }
    let orth = orthogonality_loss(params)?;
    Ok(LossParts {
        ranking,
        corr,
        orth,
    })
}

#[derive(Clone, Copy)]
enum Side {
    Chosen,
    Rejected,
}

fn side_rewards(
    params: &RmParams,
    batch: &[PairFeatures],
    side: Side,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let mut r_q = Vec::with_capacity(batch.len());
    let mut r_l = Vec::with_capacity(batch.len());
    let mut lengths = Vec::with_capacity(batch.len());
    for pair in batch {
        let (f, len) = match side {
            Side::Chosen => (&pair.chosen, pair.chosen_len),
            Side::Rejected => (&pair.rejected, pair.rejected_len),
        };
        let (q, l) = rm_forward(params, f)?;
        r_q.push(q);
        r_l.push(l);
        lengths.push(len);
    }
    Ok((r_q, r_l, lengths))
}

/// Gradient structure mirroring [`RmParams`].
#[derive(Debug, Clone)]
pub struct RmGrads {
    pub body: Vec<Vec<f64>>,
    pub w_q: Vec<f64>,
    pub w_l: Vec<f64>,
    pub g_q: f64,
    pub g_l: f64,
}

impl RmGrads {
    fn zeros(hidden: usize) -> Self {
        Self {
            body: vec![vec![0.0; FEATURE_DIM]; hidden],
            w_q: vec![0.0; hidden],
            w_l: vec![0.0; hidden],
            g_q: 0.0,
            g_l: 0.0,
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Analytic gradient of the training loss: the combined loss in two-head
/// mode, the plain ranking loss in single-head mode. Returns the loss parts
/// alongside the gradients.
pub fn rm_grad(
    params: &RmParams,
    batch: &[PairFeatures],
    hyper: &RmHyper,
) -> Result<(LossParts, RmGrads)> {
    if batch.is_empty() {
        return Err(Error::Input("gradient needs a non-empty batch".into()));
    }
    let two_head = params.mode == RmMode::TwoHead;
    if two_head && batch.len() < 2 {
        return Err(Error::Input(
            "two-head gradient needs at least 2 pairs".into(),
        ));
    }
    let n = batch.len();
    let hidden = params.hidden();
    let uq = unit(&params.w_q);
    let ul = unit(&params.w_l);

    // Forward pass, keeping activations for the backward sweep.
    // Index layout: responses 0..n are chosen, n..2n are rejected.
    let mut acts = Vec::with_capacity(2 * n);
    let mut r_q = Vec::with_capacity(2 * n);
    let mut r_l = Vec::with_capacity(2 * n);
    let mut lengths = Vec::with_capacity(2 * n);
    let mut feats: Vec<&[f64]> = Vec::with_capacity(2 * n);
    for side in [Side::Chosen, Side::Rejected] {
        for pair in batch {
            let (f, len) = match side {
                Side::Chosen => (&pair.chosen, pair.chosen_len),
                Side::Rejected => (&pair.rejected, pair.rejected_len),
            };
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input("non-finite feature values".into()));
            }
            let a = params.body_forward(f);
            r_q.push(params.g_q * dot(&uq, &a));
            r_l.push(if two_head {
                params.g_l * dot(&ul, &a)
            } else {
                0.0
            });
            acts.push(a);
            lengths.push(len);
            feats.push(f);
        }
    }

    let mut d_rq = vec![0.0; 2 * n];
    let mut d_rl = vec![0.0; 2 * n];
    let mut parts = LossParts::default();

    // Ranking term.
    let mut ranking = 0.0;
    for i in 0..n {
        let delta = (r_q[i] + r_l[i]) - (r_q[n + i] + r_l[n + i]);
        ranking += softplus(-delta);
        let d_delta = -sigmoid(-delta) / n as f64;
        d_rq[i] += d_delta;
        d_rq[n + i] -= d_delta;
        if two_head {
            d_rl[i] += d_delta;
            d_rl[n + i] -= d_delta;
        }
    }
    parts.ranking = ranking / n as f64;

    // Length-correlation terms, one per side of the batch.
    if two_head {
        for (side, range) in [(Side::Chosen, 0..n), (Side::Rejected, n..2 * n)] {
            let _ = side;
            let rq_side = &r_q[range.clone()];
            let rl_side = &r_l[range.clone()];
            let len_side = &lengths[range.clone()];
            let (rho_q, grad_q) = stats::pearson_with_grad(rq_side, len_side)?;
            let (rho_l, grad_l) = stats::pearson_with_grad(rl_side, len_side)?;
            parts.corr += rho_q.abs() - rho_l;
            if let Some(g) = grad_q {
                let s = sign(rho_q);
                for (k, gi) in g.iter().enumerate() {
                    d_rq[range.start + k] += hyper.lambda_l * s * gi;
                }
            }
            if let Some(g) = grad_l {
                for (k, gi) in g.iter().enumerate() {
                    d_rl[range.start + k] -= hyper.lambda_l * gi;
                }
            }
        }
    }

    // Backward through the heads and body.
    let mut grads = RmGrads::zeros(hidden);
    let mut d_uq = vec![0.0; hidden];
    let mut d_ul = vec![0.0; hidden];
    for i in 0..2 * n {
        let a = &acts[i];
        let mut d_a = vec![0.0; hidden];
        if d_rq[i] != 0.0 {
            for k in 0..hidden {
                d_a[k] += d_rq[i] * params.g_q * uq[k];
                d_uq[k] += d_rq[i] * params.g_q * a[k];
            }
            grads.g_q += d_rq[i] * dot(&uq, a);
        }
        if two_head && d_rl[i] != 0.0 {
            for k in 0..hidden {
                d_a[k] += d_rl[i] * params.g_l * ul[k];
                d_ul[k] += d_rl[i] * params.g_l * a[k];
            }
            grads.g_l += d_rl[i] * dot(&ul, a);
        }
        let f = feats[i];
        for k in 0..hidden {
            if d_a[k] == 0.0 {
                continue;
            }
            let d_z = d_a[k] * (1.0 - a[k] * a[k]);
            let row = &mut grads.body[k];
            for (c, fi) in f.iter().enumerate() {
                row[c] += d_z * fi;
            }
        }
    }

    // Orthogonality term acts on the unit directions only.
    if two_head {
        let cos = dot(&uq, &ul);
        parts.orth = cos.abs();
        let s = sign(cos);
        for k in 0..hidden {
            d_uq[k] += hyper.lambda_o * s * ul[k];
            d_ul[k] += hyper.lambda_o * s * uq[k];
        }
    }

    // Weight-normalization backprop: project out the component parallel to
    // the raw vector and rescale by its norm.
    let project = |d_u: &[f64], u: &[f64], raw: &[f64]| -> Vec<f64> {
        let parallel = dot(d_u, u);
        let raw_norm = norm(raw);
        d_u.iter()
            .zip(u)
            .map(|(&g, &ui)| (g - parallel * ui) / raw_norm)
            .collect()
    };
    grads.w_q = project(&d_uq, &uq, &params.w_q);
    if two_head {
        grads.w_l = project(&d_ul, &ul, &params.w_l);
    }
    if hyper.freeze_gains {
        grads.g_q = 0.0;
        grads.g_l = 0.0;
    }
    if !two_head {
        grads.g_l = 0.0;
        grads.w_l = vec![0.0; hidden];
    }

    Ok((parts, grads))
}

impl RmParams {
    /// Flat parameter vector: body rows, w_q, w_l, g_q, g_l.
    pub fn to_flat(&self) -> Vec<f64> {
        flatten(self)
    }

    pub fn set_from_flat(&mut self, flat: &[f64]) {
        unflatten(self, flat)
    }
}

impl RmGrads {
    /// Same layout as [`RmParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        flatten_grads(self)
    }
}

// Flat parameter layout used by the optimizer: body rows, w_q, w_l, g_q, g_l.
fn flatten(params: &RmParams) -> Vec<f64> {
    let mut flat = Vec::new();
    for row in &params.body {
        flat.extend_from_slice(row);
    }
    flat.extend_from_slice(&params.w_q);
    flat.extend_from_slice(&params.w_l);
    flat.push(params.g_q);
    flat.push(params.g_l);
    flat
}

fn unflatten(params: &mut RmParams, flat: &[f64]) {
    let mut i = 0;
    for row in &mut params.body {
        row.copy_from_slice(&flat[i..i + FEATURE_DIM]);
        i += FEATURE_DIM;
    }
    let hidden = params.w_q.len();
    params.w_q.copy_from_slice(&flat[i..i + hidden]);
    i += hidden;
    params.w_l.copy_from_slice(&flat[i..i + hidden]);
    i += hidden;
    params.g_q = flat[i];
    params.g_l = flat[i + 1];
}

fn flatten_grads(grads: &RmGrads) -> Vec<f64> {
    let mut flat = Vec::new();
    for row in &grads.body {
        flat.extend_from_slice(row);
    }
    flat.extend_from_slice(&grads.w_q);
    flat.extend_from_slice(&grads.w_l);
    flat.push(grads.g_q);
    flat.push(grads.g_l);
    flat
}

/// Per-epoch training diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ranking_loss: f64,
    pub corr_loss: f64,
    pub orth_loss: f64,
    pub val_acc: f64,
    pub pearson: f64,
    pub spearman: f64,
    pub kendall: f64,
}

pub type TrainHistory = Vec<EpochStats>;

/// Trains a reward model with minibatch Adam, returning the checkpoint with
/// the highest validation accuracy and the per-epoch history.
///
/// The validation split is a seeded 90/10 shuffle of the corpus; the reported
/// correlation statistics relate the quality-head reward (the sole head in
/// single-head mode) to response length over all validation responses.
pub fn train_rm(
    corpus: &[PreferencePair],
    space: &TokenSpace,
    t_max: usize,
    hyper: &RmHyper,
    mode: RmMode,
) -> Result<(RmParams, TrainHistory)> {
    if corpus.len() < 4 {
        return Err(Error::Config("corpus too small to split".into()));
    }
    if hyper.batch < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    let features = corpus_features(corpus, space, t_max);
    let mut order: Vec<usize> = (0..features.len()).collect();
    shuffle(&mut order, &mut rng::stream(hyper.seed, "rm/split"));
    let n_val = ((features.len() as f64) * hyper.val_fraction).round().max(1.0) as usize;
    let (val_idx, train_idx) = order.split_at(n_val);
    let train: Vec<PairFeatures> = train_idx.iter().map(|&i| features[i].clone()).collect();
    let val: Vec<PairFeatures> = val_idx.iter().map(|&i| features[i].clone()).collect();

    let mut params = RmParams::init(mode, hyper.hidden, &mut rng::stream(hyper.seed, "rm/init"));
    let mut opt = Adam::new(hyper.lr, flatten(&params).len());
    let mut history = Vec::with_capacity(hyper.epochs);
    let mut best: Option<(f64, RmParams)> = None;

    // Checkpoints are selected by the accuracy of the head that is used
    // downstream: the quality head for two-head models, the full reward
    // otherwise. Full-head accuracy can stay high while the quality head
    // degenerates, so selecting on it would mask a collapse.
    let head = match mode {
        RmMode::TwoHead => HeadSelector::Quality,
        RmMode::SingleHead => HeadSelector::Full,
    };

    for epoch in 0..hyper.epochs {
        // Linear learning-rate decay to a tenth of the initial rate keeps
        // the late epochs (where checkpoints are usually picked) stable.
        let frac = epoch as f64 / hyper.epochs.max(1) as f64;
        opt.set_lr(hyper.lr * (1.0 - 0.9 * frac));
        let mut idx: Vec<usize> = (0..train.len()).collect();
        shuffle(
            &mut idx,
            &mut rng::stream_n(hyper.seed, "rm/shuffle", &[epoch as u64]),
        );
        let mut sums = LossParts::default();
        let mut batches = 0usize;
        for chunk in idx.chunks(hyper.batch) {
            if chunk.len() < 2 {
                continue; // a trailing singleton cannot carry the correlation terms
            }
            let batch: Vec<PairFeatures> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (parts, grads) = rm_grad(&params, &batch, hyper)?;
            let total = parts.total(hyper);
            if !total.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch}: ranking {} corr {} orth {}",
                    parts.ranking, parts.corr, parts.orth
                )));
            }
            let mut flat = flatten(&params);
            opt.step(&mut flat, &flatten_grads(&grads));
            unflatten(&mut params, &flat);
            params.renormalize();
            sums.ranking += parts.ranking;
            sums.corr += parts.corr;
            sums.orth += parts.orth;
            batches += 1;
        }
        let val_acc = rm_validation_accuracy(&params, &val, head)?;
        let (rewards, lengths) = validation_rewards(&params, &val, head)?;
        let stats_row = EpochStats {
            epoch,
            ranking_loss: sums.ranking / batches.max(1) as f64,
            corr_loss: sums.corr / batches.max(1) as f64,
            orth_loss: sums.orth / batches.max(1) as f64,
            val_acc,
            pearson: stats::pearson(&rewards, &lengths)?,
            spearman: stats::spearman(&rewards, &lengths)?,
            kendall: stats::kendall(&rewards, &lengths)?,
        };
        if best.as_ref().is_none_or(|(acc, _)| val_acc > *acc) {
            best = Some((val_acc, params.clone()));
        }
        history.push(stats_row);
    }

    let (_, best_params) = best.expect("at least one epoch");
    Ok((best_params, history))
}

fn validation_rewards(
    params: &RmParams,
    val: &[PairFeatures],
    head: HeadSelector,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rewards = Vec::with_capacity(2 * val.len());
    let mut lengths = Vec::with_capacity(2 * val.len());
    for pair in val {
        rewards.push(selected_reward(params, &pair.chosen, head)?);
        lengths.push(pair.chosen_len);
        rewards.push(selected_reward(params, &pair.rejected, head)?);
        lengths.push(pair.rejected_len);
    }
    Ok((rewards, lengths))
}

fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..indices.len()).rev() {
        let j = rng.gen_range(0..=i);
        indices.swap(i, j);
    }
}

/// Fraction of pairs whose selected reward is strictly higher for the chosen
/// response; exact ties count half.
pub fn rm_validation_accuracy(
    params: &RmParams,
    pairs: &[PairFeatures],
    head: HeadSelector,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut score = 0.0;
    for pair in pairs {
        let c = selected_reward(params, &pair.chosen, head)?;
        let r = selected_reward(params, &pair.rejected, head)?;
        if c > r {
            score += 1.0;
        } else if c == r {
            score += 0.5;
        }
    }
    Ok(score / pairs.len() as f64)
}

/// Versioned checkpoint.
#[derive(Debug, Serialize, Deserialize)]
pub struct RmCheckpoint {
    pub version: u32,
    pub params: RmParams,
    pub tokens: TokenSpace,
    pub t_max: usize,
}

pub const RM_CHECKPOINT_VERSION: u32 = 1;

impl RmCheckpoint {
    pub fn new(params: RmParams, tokens: TokenSpace, t_max: usize) -> Self {
        Self {
            version: RM_CHECKPOINT_VERSION,
            params,
            tokens,
            t_max,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(json)?;
        if ckpt.version != RM_CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported reward-model checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}
