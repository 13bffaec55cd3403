//! Property tests and independent-oracle checks for invariants that cut
//! across modules.

use proptest::prelude::*;

use rlhf_lab::eval::{pareto_front, ParetoPoint};
use rlhf_lab::policy::{log_softmax, policy_logprob, PolicyParams, STATE_DIM};
use rlhf_lab::rm::{
    length_corr_loss, odin_total_loss, rm_forward, rm_grad, PairFeatures, RmHyper, RmMode,
    RmParams, FEATURE_DIM,
};
use rlhf_lab::rng;
use rlhf_lab::stats;
use rlhf_lab::synthdata::{Prompt, Response, TokenSpace};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_batch(rng: &mut ChaCha8Rng, n: usize) -> Vec<PairFeatures> {
    (0..n)
        .map(|_| {
            let feat =
                |rng: &mut ChaCha8Rng| (0..FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
            PairFeatures {
                chosen: feat(rng),
                rejected: feat(rng),
                chosen_len: rng.gen_range(0..128) as f64,
                rejected_len: rng.gen_range(0..128) as f64,
            }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Scaling the raw head vectors by any positive constant leaves both the
    // forward pass and the combined loss unchanged to 1e-12.
    #[test]
    fn weight_norm_scale_invariance(scale_q in 1e-3..1e3_f64, scale_l in 1e-3..1e3_f64, seed in 0u64..1000) {
        let mut r = rng::stream_n(seed, "prop/wn", &[]);
        let params = RmParams::init(RmMode::TwoHead, 8, &mut r);
        let batch = random_batch(&mut r, 4);
        let mut scaled = params.clone();
        for x in scaled.w_q.iter_mut() { *x *= scale_q; }
        for x in scaled.w_l.iter_mut() { *x *= scale_l; }
        let hyper = RmHyper::default();
        let a = odin_total_loss(&params, &batch, &hyper).unwrap();
        let b = odin_total_loss(&scaled, &batch, &hyper).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let fa = rm_forward(&params, &batch[0].chosen).unwrap();
        let fb = rm_forward(&scaled, &batch[0].chosen).unwrap();
        prop_assert!((fa.0 - fb.0).abs() < 1e-12 && (fa.1 - fb.1).abs() < 1e-12);
    }

    // The Pareto front is idempotent and every kept point is undominated.
    #[test]
    fn pareto_idempotent_and_undominated(points in proptest::collection::vec((0.0..100.0_f64, -50.0..150.0_f64), 1..24)) {
        let points: Vec<ParetoPoint> = points
            .into_iter()
            .enumerate()
            .map(|(i, (len, win))| ParetoPoint {
                mean_length: len,
                win_score: win,
                run_id: format!("r{i}"),
                checkpoint: "final".into(),
            })
            .collect();
        let front = pareto_front(&points);
        prop_assert!(!front.is_empty());
        prop_assert_eq!(pareto_front(&front), front.clone());
        for p in &front {
            let dominated = points.iter().any(|q| {
                q.mean_length <= p.mean_length
                    && q.win_score >= p.win_score
                    && (q.mean_length < p.mean_length || q.win_score > p.win_score)
            });
            prop_assert!(!dominated);
        }
    }

    // Rank statistics are invariant under strictly increasing transforms of
    // either input.
    #[test]
    fn rank_metrics_transform_invariant(xs in proptest::collection::vec(-50.0..50.0_f64, 5..20), ys in proptest::collection::vec(-50.0..50.0_f64, 5..20)) {
        let n = xs.len().min(ys.len());
        let xs = &xs[..n];
        let ys = &ys[..n];
        let exp_xs: Vec<f64> = xs.iter().map(|x| (x / 25.0).exp()).collect();
        let cubed_ys: Vec<f64> = ys.iter().map(|y| y.powi(3) + 2.0 * y).collect();
        let rs = stats::spearman(xs, ys).unwrap();
        let tau = stats::kendall(xs, ys).unwrap();
        prop_assert!((stats::spearman(&exp_xs, ys).unwrap() - rs).abs() < 1e-12);
        prop_assert!((stats::spearman(xs, &cubed_ys).unwrap() - rs).abs() < 1e-12);
        prop_assert!((stats::kendall(&exp_xs, &cubed_ys).unwrap() - tau).abs() < 1e-12);
    }

    // Pearson over a batch is invariant to any sharding-then-gathering of
    // that batch (the correlation is always computed on the gathered whole).
    #[test]
    fn length_corr_loss_sharding_invariant(seed in 0u64..1000, split in 1usize..7) {
        let mut r = rng::stream_n(seed, "prop/gather", &[]);
        let n = 8;
        let r_q: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let r_l: Vec<f64> = (0..n).map(|_| r.gen_range(-1.0..1.0)).collect();
        let lens: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..64.0)).collect();
        let (loss, _) = length_corr_loss(&r_q, &r_l, &lens).unwrap();
        // Shard at an arbitrary boundary, then gather in the same order.
        let gather = |v: &[f64]| -> Vec<f64> {
            let (a, b) = v.split_at(split.min(v.len() - 1));
            a.iter().chain(b.iter()).copied().collect()
        };
        let (loss2, _) = length_corr_loss(&gather(&r_q), &gather(&r_l), &gather(&lens)).unwrap();
        prop_assert!((loss - loss2).abs() < 1e-15);
    }
}

// An independent high-precision forward-pass oracle for the reward model:
// the same mathematical definition, recomputed with a different code path
// (explicit loops, two-pass normalization).
#[test]
fn rm_forward_matches_reference_oracle() {
    let mut r = rng::stream(77, "oracle/forward");
    for _ in 0..25 {
        let params = RmParams::init(RmMode::TwoHead, 12, &mut r);
        let features: Vec<f64> = (0..FEATURE_DIM).map(|_| r.gen_range(-2.0..2.0)).collect();
        let (r_q, r_l) = rm_forward(&params, &features).unwrap();

        let mut hidden = vec![0.0_f64; params.hidden()];
        for (unit, row) in hidden.iter_mut().zip(&params.body) {
            let mut acc = 0.0_f64;
            for (w, x) in row.iter().zip(&features) {
                acc += w * x;
            }
            *unit = acc.tanh();
        }
        let head = |w: &[f64], gain: f64| -> f64 {
            let norm = w.iter().fold(0.0_f64, |acc, x| acc + x * x).sqrt();
            let mut dot = 0.0;
            for (wi, hi) in w.iter().zip(&hidden) {
                dot += wi / norm * hi;
            }
            gain * dot
        };
        assert!((r_q - head(&params.w_q, params.g_q)).abs() < 1e-14);
        assert!((r_l - head(&params.w_l, params.g_l)).abs() < 1e-14);
    }
}

// Sequence log-probability equals an independent per-step recomputation
// through a naive softmax.
#[test]
fn policy_logprob_matches_reference_oracle() {
    let space = TokenSpace {
        keyword_vocab: 5,
        filler_vocab: 10,
    };
    let mut r = rng::stream(78, "oracle/logprob");
    let mut policy = PolicyParams::zeros(&space);
    let mut flat = policy.to_flat();
    for w in flat.iter_mut() {
        *w = r.gen_range(-1.0..1.0);
    }
    policy.set_from_flat(&flat);
    let prompt = Prompt {
        id: 0,
        keywords: vec![0, 2, 4],
    };
    let response = Response {
        tokens: vec![0, 7, 2, 9, 4, space.eos()],
    };
    let ours = policy_logprob(&policy, &prompt, &response, &space, 64).unwrap();
    let mut expected = 0.0_f64;
    for t in 0..response.tokens.len() {
        let h = rlhf_lab::policy::state_features(&prompt, &response.tokens[..t], &space, 64);
        let mut logits = vec![0.0_f64; space.vocab_size()];
        for (v, logit) in logits.iter_mut().enumerate() {
            for (j, &x) in h.iter().enumerate() {
                *logit += policy.u[v][j] * x;
            }
        }
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        expected += (logits[response.tokens[t]].exp() / z).ln();
    }
    assert!((ours - expected).abs() < 1e-10, "{ours} vs {expected}");
    // The stable log-softmax agrees with the naive one on benign inputs.
    let h = rlhf_lab::policy::state_features(&prompt, &[], &space, 64);
    let logits = policy.logits(&h);
    let stable = log_softmax(&logits);
    let z: f64 = logits.iter().map(|l| l.exp()).sum();
    for (v, &l) in logits.iter().enumerate() {
        assert!((stable[v] - (l.exp() / z).ln()).abs() < 1e-12);
    }
}

// A degenerate correlation batch (all lengths equal) contributes neither
// loss nor gradient: the combined gradient collapses to the ranking-only
// gradient.
#[test]
fn degenerate_lengths_zero_the_correlation_gradient() {
    let mut r = rng::stream(79, "oracle/degenerate");
    let params = RmParams::init(RmMode::TwoHead, 8, &mut r);
    let mut batch = random_batch(&mut r, 5);
    for pair in batch.iter_mut() {
        pair.chosen_len = 20.0;
        pair.rejected_len = 20.0;
    }
    let with_corr = RmHyper {
        lambda_l: 1.0,
        lambda_o: 0.0,
        ..RmHyper::default()
    };
    let without = RmHyper {
        lambda_l: 0.0,
        lambda_o: 0.0,
        ..RmHyper::default()
    };
    let (parts_a, grads_a) = rm_grad(&params, &batch, &with_corr).unwrap();
    let (parts_b, grads_b) = rm_grad(&params, &batch, &without).unwrap();
    assert_eq!(parts_a.corr, 0.0);
    assert_eq!(parts_a.ranking, parts_b.ranking);
    for (a, b) in grads_a.to_flat().iter().zip(grads_b.to_flat()) {
        assert!((a - b).abs() < 1e-15);
    }
}
