//! Correlation statistics shared by the reward-model losses and the
//! evaluation reports.
//!
//! All three coefficients declare a batch with (near-)zero variance on either
//! side degenerate and return 0 for it, so constant rewards correlate with
//! nothing instead of producing NaNs.

use crate::error::{Error, Result};

/// Sample standard deviation below which a batch counts as degenerate.
pub const DEGENERATE_STD: f64 = 1e-8;

fn check_lengths(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Input(format!(
            "correlation inputs differ in length: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Input("correlation needs at least 2 samples".into()));
    }
    Ok(())
}

fn centered_sums(xs: &[f64], ys: &[f64]) -> (Vec<f64>, Vec<f64>, f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let cx: Vec<f64> = xs.iter().map(|x| x - mx).collect();
    let cy: Vec<f64> = ys.iter().map(|y| y - my).collect();
    let sxy = cx.iter().zip(&cy).map(|(a, b)| a * b).sum::<f64>();
    let sxx = cx.iter().map(|a| a * a).sum::<f64>();
    let syy = cy.iter().map(|b| b * b).sum::<f64>();
    (cx, cy, sxy, sxx, syy)
}

fn is_degenerate(sqsum: f64, n: usize) -> bool {
    (sqsum / (n as f64 - 1.0)).sqrt() < DEGENERATE_STD
}

/// Pearson correlation coefficient; 0 when either side is degenerate.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_lengths(xs, ys)?;
    let (_, _, sxy, sxx, syy) = centered_sums(xs, ys);
    if is_degenerate(sxx, xs.len()) || is_degenerate(syy, xs.len()) {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Pearson correlation plus its gradient with respect to `xs`; the gradient
/// is `None` for degenerate batches (treated as zero by callers).
pub fn pearson_with_grad(xs: &[f64], ys: &[f64]) -> Result<(f64, Option<Vec<f64>>)> {
    check_lengths(xs, ys)?;
    let (cx, cy, sxy, sxx, syy) = centered_sums(xs, ys);
    if is_degenerate(sxx, xs.len()) || is_degenerate(syy, xs.len()) {
        return Ok((0.0, None));
    }
    let denom = (sxx * syy).sqrt();
    let rho = sxy / denom;
    let grad = cx
        .iter()
        .zip(&cy)
        .map(|(&c, &d)| d / denom - rho * c / sxx)
        .collect();
    Ok((rho.clamp(-1.0, 1.0), Some(grad)))
}

/// Average ranks (midranks for ties), 1-based.
pub fn midranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("non-finite rank input"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // Positions i..=j share the average of ranks i+1..=j+1.
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation via the rank-difference formula on midranks.
/// Degenerate (constant) sides yield 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_lengths(xs, ys)?;
    let constant = |v: &[f64]| v.iter().all(|&x| x == v[0]);
    if constant(xs) || constant(ys) {
        return Ok(0.0);
    }
    let rx = midranks(xs);
    let ry = midranks(ys);
    let n = xs.len() as f64;
    let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((1.0 - 6.0 * d2 / (n * (n * n - 1.0))).clamp(-1.0, 1.0))
}

/// Kendall tau via direct pairwise sign comparison, O(n^2).
pub fn kendall(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check_lengths(xs, ys)?;
    let n = xs.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += sgn(xs[i] - xs[j]) * sgn(ys[i] - ys[j]);
        }
    }
    Ok((2.0 * total / (n as f64 * (n as f64 - 1.0))).clamp(-1.0, 1.0))
}

fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
