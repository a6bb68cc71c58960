//! Independent reference implementations shared by the integration tests
//! and the acceptance runner. They favour obviousness over speed.

#![allow(dead_code)]

use std::collections::BTreeMap;

/// Every sequence over `0..symbols` of length `0..=max_len`.
pub fn all_sequences(max_len: usize, symbols: u8) -> Vec<Vec<u8>> {
    let mut out = vec![vec![]];
    let mut frontier: Vec<Vec<u8>> = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..symbols {
                let mut t = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Best local alignment score by brute force: for every pair of start
/// positions, a global (Needleman-Wunsch) pass gives the score of every
/// pair of substrings starting there; the answer is the best of those and 0.
pub fn local_alignment_oracle<T: PartialEq>(a: &[T], b: &[T], matched: i64, mismatch: i64, gap: i64) -> i64 {
    let (n, m) = (a.len(), b.len());
    let mut best = 0;
    let mut g = vec![vec![0i64; m + 1]; n + 1];
    for i0 in 0..n {
        for k0 in 0..m {
            let (rn, rm) = (n - i0, m - k0);
            for i in 0..=rn {
                for k in 0..=rm {
                    g[i][k] = if i == 0 {
                        gap * k as i64
                    } else if k == 0 {
                        gap * i as i64
                    } else {
                        let s = if a[i0 + i - 1] == b[k0 + k - 1] { matched } else { mismatch };
                        (g[i - 1][k - 1] + s).max(g[i - 1][k] + gap).max(g[i][k - 1] + gap)
                    };
                    if i > 0 && k > 0 {
                        best = best.max(g[i][k]);
                    }
                }
            }
        }
    }
    best
}

pub fn brier_oracle(p: &[f64], y: &[u8]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let d = p[i] - y[i] as f64;
        s += d * d;
    }
    s / p.len() as f64
}

/// ECE over `bins` equal-width bins, last bin right-inclusive.
pub fn ece_oracle(p: &[f64], y: &[u8], bins: usize) -> f64 {
    let mut total = 0.0;
    for b in 0..bins {
        let (lo, hi) = (b as f64 / bins as f64, (b + 1) as f64 / bins as f64);
        let idx: Vec<usize> = (0..p.len()).filter(|&i| p[i] >= lo && (p[i] < hi || (b == bins - 1 && p[i] <= hi))).collect();
        if idx.is_empty() {
            continue;
        }
        let conf: f64 = idx.iter().map(|&i| p[i]).sum::<f64>() / idx.len() as f64;
        let freq: f64 = idx.iter().map(|&i| y[i] as f64).sum::<f64>() / idx.len() as f64;
        total += idx.len() as f64 / p.len() as f64 * (conf - freq).abs();
    }
    total
}

pub fn cohen_oracle(a: &[&str], b: &[&str]) -> f64 {
    let mut labels: Vec<&str> = a.iter().chain(b).copied().collect();
    labels.sort();
    labels.dedup();
    let n = a.len() as f64;
    let mut table: BTreeMap<(&str, &str), f64> = BTreeMap::new();
    for i in 0..a.len() {
        *table.entry((a[i], b[i])).or_default() += 1.0;
    }
    let po: f64 = labels.iter().map(|l| table.get(&(*l, *l)).copied().unwrap_or(0.0)).sum::<f64>() / n;
    let mut pe = 0.0;
    for l in &labels {
        let ra = a.iter().filter(|x| *x == l).count() as f64 / n;
        let rb = b.iter().filter(|x| *x == l).count() as f64 / n;
        pe += ra * rb;
    }
    (po - pe) / (1.0 - pe)
}

pub fn fleiss_oracle(counts: &[Vec<usize>], raters: usize) -> f64 {
    let n = counts.len() as f64;
    let r = raters as f64;
    let k = counts[0].len();
    let mut p_bar = 0.0;
    for row in counts {
        let agree: f64 = row.iter().map(|&c| (c * c) as f64).sum::<f64>();
        p_bar += (agree - r) / (r * (r - 1.0));
    }
    p_bar /= n;
    let mut pe = 0.0;
    for j in 0..k {
        let pj = counts.iter().map(|row| row[j] as f64).sum::<f64>() / (n * r);
        pe += pj * pj;
    }
    (p_bar - pe) / (1.0 - pe)
}

pub fn anova_oracle(groups: &[Vec<f64>]) -> f64 {
    let all: Vec<f64> = groups.iter().flatten().copied().collect();
    let grand = all.iter().sum::<f64>() / all.len() as f64;
    let mut ssb = 0.0;
    let mut ssw = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ssb += g.len() as f64 * (m - grand) * (m - grand);
        for x in g {
            ssw += (x - m) * (x - m);
        }
    }
    let dfb = (groups.len() - 1) as f64;
    let dfw = (all.len() - groups.len()) as f64;
    (ssb / dfb) / (ssw / dfw)
}

pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let sxx: f64 = x.iter().map(|a| a * a).sum();
    let syy: f64 = y.iter().map(|b| b * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}

pub fn mae_oracle(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64
}

/// Relative difference with an absolute floor for values near zero.
pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
