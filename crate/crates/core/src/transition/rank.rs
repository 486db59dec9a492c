use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankCorrResult {
    pub spearman_rho: f64,
    pub kendall_tau: f64,
    pub n: usize,
}

fn check(xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::Config(format!(
            "series lengths differ: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(Error::Config(
            "rank correlation needs at least two points".into(),
        ));
    }
    if xs.iter().chain(ys).any(|v| v.is_nan()) {
        return Err(Error::Config("rank correlation input contains NaN".into()));
    }
    Ok(())
}

/// 1-based ranks with ties sharing their average rank.
fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's ρ: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check(xs, ys)?;
    let (rx, ry) = (average_ranks(xs), average_ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Config(
            "rank correlation of a constant series is undefined".into(),
        ));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Kendall's τ-b from integer pair counts.
pub fn kendall(xs: &[f64], ys: &[f64]) -> Result<f64> {
    check(xs, ys)?;
    let n = xs.len();
    let (mut concordant, mut discordant, mut tie_x, mut tie_y) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let dx = xs[i].total_cmp(&xs[j]) as i64;
            let dy = ys[i].total_cmp(&ys[j]) as i64;
            if xs[i] == xs[j] {
                tie_x += 1;
            }
            if ys[i] == ys[j] {
                tie_y += 1;
            }
            if xs[i] != xs[j] && ys[i] != ys[j] {
                if dx == dy {
                    concordant += 1;
                } else {
                    discordant += 1;
                }
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as i64;
    let denom = ((pairs - tie_x) as f64 * (pairs - tie_y) as f64).sqrt();
    if denom == 0.0 {
        return Err(Error::Config(
            "rank correlation of a constant series is undefined".into(),
        ));
    }
    Ok((concordant - discordant) as f64 / denom)
}

pub fn rank_correlation(xs: &[f64], ys: &[f64]) -> Result<RankCorrResult> {
    Ok(RankCorrResult {
        spearman_rho: spearman(xs, ys)?,
        kendall_tau: kendall(xs, ys)?,
        n: xs.len(),
    })
}
