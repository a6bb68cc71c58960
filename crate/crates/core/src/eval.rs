//! Evaluation statistics: perplexity, forecast scoring and calibration,
//! rater agreement, one-way ANOVA, correlation and verdict quality.

use crate::dedup::TokenScorer;
use crate::error::{bail, Result};
use crate::model::{forward, temporal_coherence_loss, InferenceModel, Model, PackedContext};
use crate::strategic::VerdictKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

/// `exp` of the mean of per-token negative log-likelihoods.
pub fn perplexity_from_nlls(nlls: &[f64]) -> Result<f64> {
    if nlls.is_empty() {
        bail!(Input, "perplexity of an empty corpus");
    }
    Ok((nlls.iter().sum::<f64>() / nlls.len() as f64).exp())
}

/// Token-weighted perplexity of a scorer over several sequences.
pub fn corpus_perplexity<S: TokenScorer + ?Sized>(scorer: &S, sequences: &[Vec<usize>]) -> Result<f64> {
    let mut all = Vec::new();
    for s in sequences {
        all.extend(scorer.token_nlls(s)?);
    }
    perplexity_from_nlls(&all)
}

/// Mean attention mass on strictly later-dated keys, averaged over layers,
/// heads, queries and contexts.
pub fn anachronism_mass(model: &Model, contexts: &[PackedContext]) -> Result<f64> {
    if contexts.is_empty() {
        bail!(Input, "no contexts to measure");
    }
    let parts: Vec<f64> = contexts
        .par_iter()
        .map(|c| {
            let out = forward(model, c)?;
            let weights: Vec<_> = out.attention.iter().flatten().map(|a| a.weights.clone()).collect();
            temporal_coherence_loss(&weights, &c.temporal)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.iter().sum::<f64>() / parts.len() as f64)
}

/// Perplexity of the model over every target position of `contexts`.
/// Contexts are scored in parallel and summed in input order.
pub fn model_perplexity(model: &InferenceModel, contexts: &[PackedContext]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = contexts.par_iter().map(|c| model.nll(c)).collect::<Result<Vec<_>>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0usize), |(s, n), (a, b)| (s + a, n + b));
    if n == 0 {
        bail!(Input, "perplexity of an empty corpus");
    }
    Ok((sum / n as f64).exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub probability: f64,
    pub outcome: u8,
    pub horizon_months: u32,
}

impl ForecastRecord {
    pub fn new(probability: f64, outcome: u8, horizon_months: u32) -> Result<Self> {
        let r = Self { probability, outcome, horizon_months };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            bail!(Input, "forecast probability {} outside [0, 1]", self.probability);
        }
        if self.outcome > 1 || self.horizon_months == 0 {
            bail!(Input, "outcome must be 0 or 1 and horizon positive");
        }
        Ok(())
    }

    /// Thresholded prediction; exactly 0.5 predicts the event.
    pub fn predicts_event(&self) -> bool {
        self.probability >= 0.5
    }
}

/// Mean squared error between forecast probabilities and outcomes.
pub fn brier_score(records: &[ForecastRecord]) -> Result<f64> {
    if records.is_empty() {
        bail!(Input, "Brier score of no forecasts");
    }
    let s: f64 = records.iter().map(|r| (r.probability - r.outcome as f64).powi(2)).sum();
    Ok(s / records.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// `None` for empty bins.
    pub mean_predicted: Option<f64>,
    pub frequency: Option<f64>,
}

impl ReliabilityBin {
    pub fn gap(&self) -> Option<f64> {
        Some((self.mean_predicted? - self.frequency?).abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub bins: Vec<ReliabilityBin>,
    pub ece: f64,
    pub brier: f64,
    pub n: usize,
}

impl ReliabilityReport {
    pub fn edges(&self) -> Vec<f64> {
        let mut e: Vec<f64> = self.bins.iter().map(|b| b.lower).collect();
        e.extend(self.bins.last().map(|b| b.upper));
        e
    }

    /// Unweighted mean `|mean_predicted − frequency|` over non-empty bins.
    pub fn mean_abs_gap(&self) -> f64 {
        let gaps: Vec<f64> = self.bins.iter().filter_map(ReliabilityBin::gap).collect();
        gaps.iter().sum::<f64>() / gaps.len() as f64
    }
}

/// Equal-width bins over `[0, 1]`; each bin is `[lo, hi)` except the last,
/// which also holds `p = 1`. Empty bins carry no weight in the ECE.
pub fn reliability_report(records: &[ForecastRecord], n_bins: usize) -> Result<ReliabilityReport> {
    if n_bins == 0 {
        bail!(Input, "need at least one bin");
    }
    let brier = brier_score(records)?;
    let mut sum_p = vec![0.0; n_bins];
    let mut sum_y = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for r in records {
        let b = ((r.probability * n_bins as f64) as usize).min(n_bins - 1);
        sum_p[b] += r.probability;
        sum_y[b] += r.outcome as f64;
        count[b] += 1;
    }
    let n = records.len();
    let mut ece = 0.0;
    let bins = (0..n_bins)
        .map(|b| {
            let c = count[b];
            let (mp, fq) = if c == 0 { (None, None) } else { (Some(sum_p[b] / c as f64), Some(sum_y[b] / c as f64)) };
            if let (Some(p), Some(f)) = (mp, fq) {
                ece += c as f64 / n as f64 * (p - f).abs();
            }
            ReliabilityBin { lower: b as f64 / n_bins as f64, upper: (b + 1) as f64 / n_bins as f64, count: c, mean_predicted: mp, frequency: fq }
        })
        .collect();
    Ok(ReliabilityReport { bins, ece, brier, n })
}

/// Forecasts with `p ~ U[0,1]` and `y ~ Bernoulli(p)`.
pub fn simulate_calibrated(n: usize, horizon_months: u32, seed: u64) -> Vec<ForecastRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let p: f64 = rng.gen();
            let y = u8::from(rng.gen::<f64>() < p);
            ForecastRecord { probability: p, outcome: y, horizon_months }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonAccuracy {
    pub accuracy: f64,
    pub count: usize,
}

/// Accuracy of thresholded predictions per horizon. Horizons with no
/// records do not appear.
pub fn accuracy_by_horizon(records: &[ForecastRecord]) -> BTreeMap<u32, HorizonAccuracy> {
    let mut tally: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for r in records {
        let e = tally.entry(r.horizon_months).or_default();
        e.0 += usize::from(r.predicts_event() == (r.outcome == 1));
        e.1 += 1;
    }
    tally.into_iter().map(|(h, (ok, n))| (h, HorizonAccuracy { accuracy: ok as f64 / n as f64, count: n })).collect()
}

/// Cohen's κ for two raters. When chance agreement is 1 (both raters
/// constant on the same label) κ is defined as 1.
pub fn cohen_kappa<T: Ord>(a: &[T], b: &[T]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        bail!(Input, "Cohen's kappa needs two equal-length label sequences of at least 2 items");
    }
    let n = a.len() as f64;
    let mut ma: BTreeMap<&T, f64> = BTreeMap::new();
    let mut mb: BTreeMap<&T, f64> = BTreeMap::new();
    let mut agree = 0.0;
    for (x, y) in a.iter().zip(b) {
        *ma.entry(x).or_default() += 1.0;
        *mb.entry(y).or_default() += 1.0;
        if x == y {
            agree += 1.0;
        }
    }
    let po = agree / n;
    let pe: f64 = ma.iter().map(|(k, ca)| ca / n * mb.get(k).copied().unwrap_or(0.0) / n).sum();
    if pe == 1.0 {
        if po == 1.0 {
            return Ok(1.0);
        }
        bail!(Numeric, "Cohen's kappa undefined: chance agreement is 1");
    }
    Ok((po - pe) / (1.0 - pe))
}

/// Fleiss' κ from an items × categories count matrix; every row sums to
/// `raters`.
pub fn fleiss_kappa(counts: &[Vec<usize>], raters: usize) -> Result<f64> {
    if raters < 2 || counts.is_empty() {
        bail!(Input, "Fleiss' kappa needs at least one item and two raters");
    }
    let k = counts[0].len();
    let n = raters as f64;
    let mut cat = vec![0.0; k];
    let mut p_bar = 0.0;
    for (i, row) in counts.iter().enumerate() {
        if row.len() != k || row.iter().sum::<usize>() != raters {
            bail!(Input, "item {i} does not sum to {raters} ratings over {k} categories");
        }
        let sq: f64 = row.iter().map(|&c| (c * c) as f64).sum();
        p_bar += (sq - n) / (n * (n - 1.0));
        row.iter().zip(cat.iter_mut()).for_each(|(&c, t)| *t += c as f64);
    }
    let items = counts.len() as f64;
    p_bar /= items;
    let pe: f64 = cat.iter().map(|t| (t / (items * n)).powi(2)).sum();
    if pe >= 1.0 {
        bail!(Numeric, "Fleiss' kappa undefined: every rating falls in one category");
    }
    Ok((p_bar - pe) / (1.0 - pe))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnovaResult {
    pub f: f64,
    pub df_between: usize,
    pub df_within: usize,
    /// Set when the within-group mean square is zero. `f` is then +∞ if
    /// group means differ and 0 otherwise.
    pub zero_within_variance: bool,
}

/// One-way ANOVA F statistic.
pub fn anova_f(groups: &[Vec<f64>]) -> Result<AnovaResult> {
    if groups.len() < 2 || groups.iter().any(|g| g.len() < 2) {
        bail!(Input, "ANOVA needs at least 2 groups of at least 2 samples");
    }
    let n: usize = groups.iter().map(Vec::len).sum();
    let grand = groups.iter().flatten().sum::<f64>() / n as f64;
    let mut ss_between = 0.0;
    let mut ss_within = 0.0;
    for g in groups {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        ss_between += g.len() as f64 * (m - grand).powi(2);
        ss_within += g.iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let df_between = groups.len() - 1;
    let df_within = n - groups.len();
    let ms_b = ss_between / df_between as f64;
    let ms_w = ss_within / df_within as f64;
    if ms_w == 0.0 {
        let f = if ms_b > 0.0 { f64::INFINITY } else { 0.0 };
        return Ok(AnovaResult { f, df_between, df_within, zero_within_variance: true });
    }
    Ok(AnovaResult { f: ms_b / ms_w, df_between, df_within, zero_within_variance: false })
}

fn paired(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() || x.len() < 2 {
        bail!(Input, "need two equal-length samples of at least 2 values");
    }
    Ok(())
}

pub fn pearson_r(x: &[f64], y: &[f64]) -> Result<f64> {
    paired(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        bail!(Numeric, "correlation undefined for a zero-variance sample");
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    paired(x, y)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// Precision, recall and F1 over the violation class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrfReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Set when a ratio had a zero denominator and was reported as 0.
    pub zero_division: bool,
}

pub fn precision_recall_f1(verdicts: &[VerdictKind], gold: &[VerdictKind]) -> Result<PrfReport> {
    if verdicts.len() != gold.len() {
        bail!(Input, "{} verdicts for {} gold labels", verdicts.len(), gold.len());
    }
    let v = VerdictKind::Violation;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in verdicts.iter().zip(gold) {
        match (*p == v, *g == v) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { None } else { Some(a as f64 / b as f64) };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let (p, r) = (precision.unwrap_or(0.0), recall.unwrap_or(0.0));
    let f1 = if p + r == 0.0 { None } else { Some(2.0 * p * r / (p + r)) };
    Ok(PrfReport {
        precision: p,
        recall: r,
        f1: f1.unwrap_or(0.0),
        tp,
        fp,
        fn_,
        zero_division: precision.is_none() || recall.is_none() || f1.is_none(),
    })
}

/// Distinct labels across both raters, for relabelling checks.
pub fn label_set<T: Ord + Clone>(a: &[T], b: &[T]) -> BTreeSet<T> {
    a.iter().chain(b).cloned().collect()
}

/// Reads `probability,outcome,horizon_months` rows.
pub fn read_forecasts(path: &Path) -> Result<Vec<ForecastRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let r: ForecastRecord = row.map_err(csv_err)?;
        r.validate()?;
        out.push(r);
    }
    Ok(out)
}

pub fn write_forecasts(path: &Path, comment: &str, records: &[ForecastRecord]) -> Result<()> {
    let mut buf = format!("{comment}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for r in records {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush()?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Reads a header-less numeric CSV; `#` lines are comments.
pub fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).comment(Some(b'#')).flexible(true).from_path(path).map_err(csv_err)?;
    rdr.records()
        .map(|r| r.map(|rec| rec.iter().map(|s| s.trim().to_string()).collect()).map_err(csv_err))
        .collect()
}

pub(crate) fn csv_err(e: csv::Error) -> crate::Error {
    crate::Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dedup::UniformScorer;

    fn rec(p: f64, y: u8, h: u32) -> ForecastRecord {
        ForecastRecord::new(p, y, h).unwrap()
    }

    #[test]
    fn perplexity_cases() {
        assert!((corpus_perplexity(&UniformScorer { vocab: 37 }, &[vec![1, 2, 3, 4]]).unwrap() - 37.0).abs() < 1e-12);
        assert_eq!(perplexity_from_nlls(&[0.0, 0.0]).unwrap(), 1.0);
        let nll = [0.5, 1.25, 2.0];
        assert!((perplexity_from_nlls(&nll).unwrap() - (3.75f64 / 3.0).exp()).abs() < 1e-12);
        assert!(perplexity_from_nlls(&[]).is_err());
    }

    #[test]
    fn brier_cases() {
        assert!((brier_score(&[rec(0.8, 1, 12), rec(0.3, 0, 12)]).unwrap() - 0.065).abs() < 1e-12);
        assert_eq!(brier_score(&[rec(0.5, 1, 12), rec(0.5, 0, 12), rec(0.5, 0, 24)]).unwrap(), 0.25);
        assert_eq!(brier_score(&[rec(1.0, 1, 1), rec(0.0, 0, 1)]).unwrap(), 0.0);
        assert!(ForecastRecord::new(1.1, 1, 12).is_err());
    }

    #[test]
    fn reliability_bins() {
        let r = reliability_report(&[rec(0.25, 1, 1), rec(0.25, 0, 1), rec(1.0, 1, 1), rec(0.0, 0, 1)], 10).unwrap();
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 4);
        assert_eq!(r.bins[9].count, 1);
        assert_eq!(r.bins[2].count, 2);
        assert!((r.ece - 0.5 * 0.25).abs() < 1e-12);
        assert_eq!(r.edges().len(), 11);
        let one = reliability_report(&[rec(0.2, 1, 1), rec(0.6, 0, 1)], 1).unwrap();
        assert!((one.ece - (0.4f64 - 0.5).abs()).abs() < 1e-12);
        assert!(reliability_report(&[rec(0.2, 1, 1)], 0).is_err());
    }

    #[test]
    fn calibrated_simulation_shrinks() {
        let e: Vec<f64> =
            [1_000, 10_000, 100_000].iter().map(|&n| reliability_report(&simulate_calibrated(n, 12, 7), 10).unwrap().ece).collect();
        assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
    }

    #[test]
    fn horizon_accuracy() {
        let m = accuracy_by_horizon(&[rec(0.5, 1, 12), rec(0.2, 1, 12), rec(0.9, 1, 24), rec(0.4, 0, 24)]);
        assert_eq!(m[&12], HorizonAccuracy { accuracy: 0.5, count: 2 });
        assert_eq!(m[&24].accuracy, 1.0);
        assert!(!m.contains_key(&36));
    }

    #[test]
    fn cohen_cases() {
        assert_eq!(cohen_kappa(&[0, 1, 1, 0], &[0, 1, 1, 0]).unwrap(), 1.0);
        // 2x2 table [[1,1],[1,1]]: p_o = 0.5 = p_e
        assert_eq!(cohen_kappa(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), 0.0);
        // table [[20,5],[10,15]]: p_o = 0.7, p_e = 0.5*0.6 + 0.5*0.4 = 0.5
        let a: Vec<u8> = [vec![0; 25], vec![1; 25]].concat();
        let b: Vec<u8> = [vec![0; 20], vec![1; 5], vec![0; 10], vec![1; 15]].concat();
        assert!((cohen_kappa(&a, &b).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(cohen_kappa(&[3, 3], &[3, 3]).unwrap(), 1.0);
        assert!(cohen_kappa(&[1], &[1]).is_err());
    }

    #[test]
    fn fleiss_cases() {
        assert_eq!(fleiss_kappa(&[vec![3, 0], vec![0, 3]], 3).unwrap(), 1.0);
        // items [[1,1],[2,0]] with 2 raters: P = (0, 1), P̄ = 0.5; p = (0.75, 0.25), P_e = 0.625
        let k = fleiss_kappa(&[vec![1, 1], vec![2, 0]], 2).unwrap();
        assert!((k - (0.5 - 0.625) / 0.375).abs() < 1e-12);
        assert!(fleiss_kappa(&[vec![2, 0], vec![2, 0]], 2).is_err());
        assert!(fleiss_kappa(&[vec![2, 1]], 2).is_err());
    }

    #[test]
    fn anova_cases() {
        let r = anova_f(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!((r.f, r.df_between, r.df_within), (13.5, 1, 4));
        assert_eq!(anova_f(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap().f, 0.0);
        let z = anova_f(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        assert!(z.zero_within_variance && z.f.is_infinite());
        assert!(anova_f(&[vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn correlation_cases() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson_r(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson_r(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        let r = pearson_r(&x, &[2.0, 4.0, 7.0]).unwrap();
        assert!((r - 5.0 / (2.0f64 * 12.6666666666666667).sqrt()).abs() < 1e-12);
        assert!((r - 0.9934).abs() < 1e-4);
        assert!((mae(&x, &[2.0, 4.0, 7.0]).unwrap() - 7.0 / 3.0).abs() < 1e-15);
        assert!(pearson_r(&x, &[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn prf_cases() {
        use VerdictKind::*;
        let mut pred = vec![Violation; 10];
        pred.extend(vec![Consistent; 10]);
        let mut gold = vec![Violation; 9];
        gold.push(Consistent);
        gold.extend(vec![Violation; 3]);
        gold.extend(vec![Consistent; 7]);
        let r = precision_recall_f1(&pred, &gold).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_), (9, 1, 3));
        assert!((r.precision - 0.9).abs() < 1e-15 && (r.recall - 0.75).abs() < 1e-15);
        assert!((r.f1 - 2.0 * 0.9 * 0.75 / 1.65).abs() < 1e-15);
        let none = precision_recall_f1(&[Consistent, Consistent], &[Violation, Consistent]).unwrap();
        assert!(none.zero_division && none.precision == 0.0);
        let same = precision_recall_f1(&gold, &gold).unwrap();
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn forecast_csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        let recs = vec![rec(0.8, 1, 12), rec(0.3, 0, 24)];
        write_forecasts(&path, "# seed=0", &recs).unwrap();
        assert_eq!(read_forecasts(&path).unwrap(), recs);
    }
}
