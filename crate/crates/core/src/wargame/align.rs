//! Smith-Waterman local alignment of action traces.

use crate::error::{bail, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignmentScoring {
    pub match_score: i64,
    pub mismatch: i64,
    pub gap: i64,
}

impl Default for AlignmentScoring {
    fn default() -> Self {
        Self { match_score: 2, mismatch: -1, gap: -1 }
    }
}

impl AlignmentScoring {
    pub fn validate(&self) -> Result<()> {
        if self.match_score <= 0 || self.mismatch > 0 || self.gap > 0 {
            bail!(Input, "need match > 0 and mismatch, gap <= 0");
        }
        Ok(())
    }

    fn pair<T: PartialEq>(&self, a: &T, b: &T) -> i64 {
        if a == b {
            self.match_score
        } else {
            self.mismatch
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alignment {
    pub score: i64,
    /// Aligned columns as `(index in a, index in b)`; `None` marks a gap.
    pub columns: Vec<(Option<usize>, Option<usize>)>,
}

impl Alignment {
    /// Half-open spans of `a` and `b` covered by the alignment.
    pub fn spans(&self) -> Option<((usize, usize), (usize, usize))> {
        let ia: Vec<usize> = self.columns.iter().filter_map(|c| c.0).collect();
        let ib: Vec<usize> = self.columns.iter().filter_map(|c| c.1).collect();
        Some(((*ia.first()?, ia.last()? + 1), (*ib.first()?, ib.last()? + 1)))
    }
}

/// Best local alignment. The end cell is the first maximum in row-major
/// order; traceback prefers diagonal, then up, then left.
pub fn smith_waterman<T: PartialEq>(a: &[T], b: &[T], scoring: &AlignmentScoring) -> Result<Alignment> {
    scoring.validate()?;
    let (n, m) = (a.len(), b.len());
    let w = m + 1;
    let mut h = vec![0i64; (n + 1) * w];
    let mut best = (0i64, 0usize, 0usize);
    for i in 1..=n {
        for j in 1..=m {
            let diag = h[(i - 1) * w + j - 1] + scoring.pair(&a[i - 1], &b[j - 1]);
            let up = h[(i - 1) * w + j] + scoring.gap;
            let left = h[i * w + j - 1] + scoring.gap;
            let v = diag.max(up).max(left).max(0);
            h[i * w + j] = v;
            if v > best.0 {
                best = (v, i, j);
            }
        }
    }
    let (score, mut i, mut j) = best;
    let mut columns = Vec::new();
    while i > 0 && j > 0 && h[i * w + j] > 0 {
        let v = h[i * w + j];
        if v == h[(i - 1) * w + j - 1] + scoring.pair(&a[i - 1], &b[j - 1]) {
            columns.push((Some(i - 1), Some(j - 1)));
            i -= 1;
            j -= 1;
        } else if v == h[(i - 1) * w + j] + scoring.gap {
            columns.push((Some(i - 1), None));
            i -= 1;
        } else {
            columns.push((None, Some(j - 1)));
            j -= 1;
        }
    }
    columns.reverse();
    Ok(Alignment { score, columns })
}

/// Local score divided by `match × min(|a|, |b|)`, in `[0, 1]`.
pub fn normalized_alignment<T: PartialEq>(a: &[T], b: &[T], scoring: &AlignmentScoring) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        bail!(Input, "cannot normalise an alignment with an empty trace");
    }
    let s = smith_waterman(a, b, scoring)?.score;
    Ok(s as f64 / (scoring.match_score * a.len().min(b.len()) as i64) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chars(s: &str) -> Vec<char> {
        s.chars().collect()
    }

    #[test]
    fn hand_example() {
        let sc = AlignmentScoring::default();
        let al = smith_waterman(&chars("AGC"), &chars("AAC"), &sc).unwrap();
        assert_eq!(al.score, 3);
        // 3 / (2 × 3); identical traces must normalise to exactly 1
        assert_eq!(normalized_alignment(&chars("AGC"), &chars("AAC"), &sc).unwrap(), 0.5);
        assert_eq!(normalized_alignment(&chars("AGC"), &chars("AGC"), &sc).unwrap(), 1.0);
    }

    #[test]
    fn trivial_cases() {
        let unit = AlignmentScoring { match_score: 1, mismatch: -1, gap: -1 };
        let a = chars("ABCAB");
        assert_eq!(smith_waterman(&a, &a, &unit).unwrap().score, 5);
        assert_eq!(smith_waterman(&a, &[], &unit).unwrap().score, 0);
        assert_eq!(normalized_alignment(&a, &a, &unit).unwrap(), 1.0);
        assert_eq!(normalized_alignment(&chars("AAA"), &chars("XYZ"), &unit).unwrap(), 0.0);
        assert!(normalized_alignment(&a, &[], &unit).is_err());
        assert!(smith_waterman(&a, &a, &AlignmentScoring { match_score: 0, ..unit }).is_err());
    }

    #[test]
    fn traceback_reproduces_score() {
        let sc = AlignmentScoring::default();
        let (a, b) = (chars("XXABCDYY"), chars("ZABDZ"));
        let al = smith_waterman(&a, &b, &sc).unwrap();
        let rescored: i64 = al
            .columns
            .iter()
            .map(|c| match c {
                (Some(i), Some(j)) => sc.pair(&a[*i], &b[*j]),
                _ => sc.gap,
            })
            .sum();
        assert_eq!(rescored, al.score);
        assert_eq!(al.spans(), Some(((2, 6), (1, 4))));
    }
}
