//! Dice scoring, tumor region composition, Monte-Carlo splits and the
//! exact Wilcoxon signed-rank test used to compare two methods.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{tumor, LabelMap, Taxonomy};
use crate::error::{Error, Result};
use crate::rng::{rng_from, tag};

/// `2|A∩B| / (|A| + |B|)`; two empty masks score 1.
pub fn binary_dice(pred: &[bool], truth: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!("mask lengths {} and {}", pred.len(), truth.len())));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        a += p as usize;
        b += t as usize;
        both += (p && t) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    WT,
    TC,
    ET,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::WT, Region::TC, Region::ET];

    pub fn name(self) -> &'static str {
        match self {
            Region::WT => "WT",
            Region::TC => "TC",
            Region::ET => "ET",
        }
    }

    fn contains(self, label: i8) -> bool {
        match self {
            Region::WT => label != tumor::BACKGROUND,
            Region::TC => label == tumor::NON_ENHANCING || label == tumor::ENHANCING,
            Region::ET => label == tumor::ENHANCING,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMasks {
    pub wt: Vec<bool>,
    pub tc: Vec<bool>,
    pub et: Vec<bool>,
}

impl RegionMasks {
    pub fn get(&self, r: Region) -> &[bool] {
        match r {
            Region::WT => &self.wt,
            Region::TC => &self.tc,
            Region::ET => &self.et,
        }
    }
}

/// WT = {edema, non-enhancing, enhancing}, TC = {non-enhancing, enhancing},
/// ET = {enhancing}.
pub fn compose_tumor_regions(labels: &LabelMap) -> Result<RegionMasks> {
    if labels.taxonomy() != Taxonomy::Tumor {
        return Err(Error::InvalidArgument("region composition needs tumor labels".into()));
    }
    let mask = |r: Region| labels.data().iter().map(|&l| r.contains(l)).collect();
    Ok(RegionMasks {
        wt: mask(Region::WT),
        tc: mask(Region::TC),
        et: mask(Region::ET),
    })
}

// ----------------------------------------------------------------- splits

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 7,
            val: 1,
            test: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub repeat_index: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

pub const MIN_SPLIT_CASES: usize = 10;

/// Independent shuffles per repeat (sub-seed derived from `seed` and the
/// repeat index), partitioned with floor sizes for val and test and the
/// remainder in train. The result does not depend on the input order.
pub fn monte_carlo_splits(
    case_ids: &[String],
    seed: u64,
    ratios: SplitRatios,
    repeats: usize,
) -> Result<Vec<SplitPlan>> {
    let n = case_ids.len();
    if n < MIN_SPLIT_CASES {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SPLIT_CASES} cases for a split, got {n}"
        )));
    }
    let total = ratios.train + ratios.val + ratios.test;
    if total == 0 || ratios.train == 0 {
        return Err(Error::InvalidArgument(format!("invalid split ratios {ratios:?}")));
    }
    let mut sorted = case_ids.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != n {
        return Err(Error::InvalidArgument("duplicate case ids".into()));
    }
    let n_val = n * ratios.val / total;
    let n_test = n * ratios.test / total;
    Ok((0..repeats)
        .map(|r| {
            let mut ids = sorted.clone();
            ids.shuffle(&mut rng_from(seed, &[tag("monte-carlo-split"), r as u64]));
            let test = ids.split_off(n - n_test);
            let val = ids.split_off(ids.len() - n_val);
            SplitPlan {
                repeat_index: r,
                train: ids,
                val,
                test,
            }
        })
        .collect())
}

// --------------------------------------------------------------- wilcoxon

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Number of non-zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(W+, W−)`
    pub w: f64,
    pub p_two_sided: f64,
}

pub const WILCOXON_MAX_N: usize = 25;

/// Average ranks of `values` (1-based); tied values share their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Exact two-sided signed-rank test. The null distribution is taken over
/// all `2^n` sign assignments of the realized (possibly tied) ranks:
/// `p = #{patterns with min(W+, W−) ≤ W_obs} / 2^n`.
pub fn wilcoxon_signed_rank_exact(diffs: &[f64]) -> Result<WilcoxonResult> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::NonFinite("wilcoxon differences".into()));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Err(Error::UndefinedTest("all differences are zero".into()));
    }
    if n > WILCOXON_MAX_N {
        return Err(Error::InvalidArgument(format!(
            "exact test limited to {WILCOXON_MAX_N} non-zero differences, got {n}"
        )));
    }
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    // Average ranks are multiples of 1/2, so doubled ranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let w_plus2: usize = nz.iter().zip(&doubled).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let w2 = w_plus2.min(total - w_plus2);

    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] > 0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let extreme: u64 = counts
        .iter()
        .enumerate()
        .filter(|&(s, _)| s.min(total - s) <= w2)
        .map(|(_, c)| c)
        .sum();
    let w_plus = w_plus2 as f64 / 2.0;
    let w_minus = (total - w_plus2) as f64 / 2.0;
    Ok(WilcoxonResult {
        n,
        w_plus,
        w_minus,
        w: w2 as f64 / 2.0,
        p_two_sided: extreme as f64 / (1u64 << n) as f64,
    })
}

// ---------------------------------------------------------------- reports

/// Type-7 (linear interpolation) sample quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let mean = if s.is_empty() {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Summary {
            n: s.len(),
            mean,
            min: s.first().copied().unwrap_or(f64::NAN),
            q1: quantile_sorted(&s, 0.25),
            median: quantile_sorted(&s, 0.5),
            q3: quantile_sorted(&s, 0.75),
            max: s.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseDice {
    pub case_id: String,
    pub wt: f64,
    pub tc: f64,
    pub et: f64,
}

impl CaseDice {
    pub fn get(&self, r: Region) -> f64 {
        match r {
            Region::WT => self.wt,
            Region::TC => self.tc,
            Region::ET => self.et,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub repeat_index: usize,
    pub config_hash: String,
    pub test_cases: Vec<String>,
    pub per_case: Vec<CaseDice>,
    /// Per-region summary over test cases, keyed by region name.
    pub regions: BTreeMap<Region, Summary>,
}

impl MetricsReport {
    pub fn mean(&self, r: Region) -> f64 {
        self.regions[&r].mean
    }
}

/// Scores each test case of `split` on WT, TC and ET.
pub fn evaluate_split(
    predictions: &BTreeMap<String, LabelMap>,
    truths: &BTreeMap<String, LabelMap>,
    split: &SplitPlan,
    method: &str,
    config_hash: &str,
) -> Result<MetricsReport> {
    let mut per_case = Vec::with_capacity(split.test.len());
    for id in &split.test {
        let pred = predictions
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no prediction for test case {id}")))?;
        let truth = truths
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("no ground truth for test case {id}")))?;
        if pred.dims() != truth.dims() {
            return Err(Error::Shape(format!("case {id}: prediction and truth shapes differ")));
        }
        let p = compose_tumor_regions(pred)?;
        let t = compose_tumor_regions(truth)?;
        per_case.push(CaseDice {
            case_id: id.clone(),
            wt: binary_dice(&p.wt, &t.wt)?,
            tc: binary_dice(&p.tc, &t.tc)?,
            et: binary_dice(&p.et, &t.et)?,
        });
    }
    let regions = Region::ALL
        .iter()
        .map(|&r| {
            let v: Vec<f64> = per_case.iter().map(|c| c.get(r)).collect();
            (r, Summary::of(&v))
        })
        .collect();
    Ok(MetricsReport {
        method: method.to_string(),
        repeat_index: split.repeat_index,
        config_hash: config_hash.to_string(),
        test_cases: split.test.clone(),
        per_case,
        regions,
    })
}

pub const TEST_NAME: &str = "wilcoxon signed-rank, exact, two-sided";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionComparison {
    pub region: Region,
    pub baseline_mean: f64,
    pub proposed_mean: f64,
    /// proposed − baseline, per repeat.
    pub diffs: Vec<f64>,
    pub mean_diff: f64,
    pub proposed_not_worse: usize,
    /// True when every difference is zero and the test is undefined.
    pub degenerate: bool,
    pub wilcoxon: Option<WilcoxonResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub test: String,
    pub baseline_method: String,
    pub proposed_method: String,
    pub repeats: Vec<usize>,
    pub regions: Vec<RegionComparison>,
}

/// Pairs per-repeat mean Dice of two methods evaluated on identical
/// splits and tests the differences per region.
pub fn compare_methods(baseline: &[MetricsReport], proposed: &[MetricsReport]) -> Result<ComparisonReport> {
    if baseline.is_empty() || baseline.len() != proposed.len() {
        return Err(Error::InvalidArgument(format!(
            "need equal, non-zero repeat counts (baseline {}, proposed {})",
            baseline.len(),
            proposed.len()
        )));
    }
    for (b, p) in baseline.iter().zip(proposed) {
        if b.repeat_index != p.repeat_index || b.test_cases != p.test_cases {
            return Err(Error::InvalidArgument(format!(
                "unpaired comparison: repeat {} vs {} cover different test cases",
                b.repeat_index, p.repeat_index
            )));
        }
    }
    let mut regions = Vec::new();
    for r in Region::ALL {
        let bm: Vec<f64> = baseline.iter().map(|m| m.mean(r)).collect();
        let pm: Vec<f64> = proposed.iter().map(|m| m.mean(r)).collect();
        let diffs: Vec<f64> = pm.iter().zip(&bm).map(|(p, b)| p - b).collect();
        let n = diffs.len() as f64;
        let (wilcoxon, degenerate) = match wilcoxon_signed_rank_exact(&diffs) {
            Ok(w) => (Some(w), false),
            Err(Error::UndefinedTest(_)) => (None, true),
            Err(e) => return Err(e),
        };
        regions.push(RegionComparison {
            region: r,
            baseline_mean: bm.iter().sum::<f64>() / n,
            proposed_mean: pm.iter().sum::<f64>() / n,
            mean_diff: diffs.iter().sum::<f64>() / n,
            proposed_not_worse: diffs.iter().filter(|d| **d >= 0.0).count(),
            diffs,
            degenerate,
            wilcoxon,
        });
    }
    Ok(ComparisonReport {
        test: TEST_NAME.to_string(),
        baseline_method: baseline[0].method.clone(),
        proposed_method: proposed[0].method.clone(),
        repeats: baseline.iter().map(|m| m.repeat_index).collect(),
        regions,
    })
}

impl ComparisonReport {
    pub fn region(&self, r: Region) -> &RegionComparison {
        self.regions.iter().find(|c| c.region == r).expect("all regions present")
    }

    /// Plain-text table: one row per method with WT/TC/ET means, then
    /// p-values.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>7} {:>7} {:>7}", "method", "WT", "TC", "ET");
        for (name, base) in [(&self.baseline_method, true), (&self.proposed_method, false)] {
            let v: Vec<f64> = self
                .regions
                .iter()
                .map(|c| if base { c.baseline_mean } else { c.proposed_mean })
                .collect();
            let _ = writeln!(s, "{:<12} {:>7.3} {:>7.3} {:>7.3}", name, v[0], v[1], v[2]);
        }
        let p: Vec<String> = self
            .regions
            .iter()
            .map(|c| match c.wilcoxon {
                Some(w) => format!("{:.4}", w.p_two_sided),
                None => "n/a".into(),
            })
            .collect();
        let _ = writeln!(s, "{:<12} {:>7} {:>7} {:>7}", "p", p[0], p[1], p[2]);
        s
    }
}

/// Box-plot source data: one row per (method, region) over per-repeat
/// mean Dice.
pub fn boxplot_csv(methods: &[(&str, &[MetricsReport])]) -> String {
    let mut s = String::from("method,region,n,min,q1,median,q3,max,mean\n");
    for (name, reports) in methods {
        for r in Region::ALL {
            let v: Vec<f64> = reports.iter().map(|m| m.mean(r)).collect();
            let x = Summary::of(&v);
            let _ = writeln!(
                s,
                "{name},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.name(),
                x.n,
                x.min,
                x.q1,
                x.median,
                x.q3,
                x.max,
                x.mean
            );
        }
    }
    s
}

/// SHA-256 over the canonical JSON encoding of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)?;
    let bytes = serde_json::to_vec(&v)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dims;

    #[test]
    fn dice_examples() {
        let m = [true, true, false, false];
        assert_eq!(binary_dice(&m, &m).unwrap(), 1.0);
        assert_eq!(binary_dice(&[true, false], &[false, true]).unwrap(), 0.0);
        assert_eq!(binary_dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        let mut pred = vec![false; 16];
        let mut truth = vec![false; 16];
        pred[..8].iter_mut().for_each(|v| *v = true);
        truth[6..10].iter_mut().for_each(|v| *v = true);
        assert!((binary_dice(&pred, &truth).unwrap() - 4.0 / 12.0).abs() < 1e-15);
        assert!(binary_dice(&[true], &[true, false]).is_err());
    }

    #[test]
    fn regions_from_labels() {
        let dims: Dims = [1, 1, 4];
        let l = LabelMap::new(vec![0, 1, 2, 3], dims, Taxonomy::Tumor).unwrap();
        let r = compose_tumor_regions(&l).unwrap();
        let count = |m: &[bool]| m.iter().filter(|v| **v).count();
        assert_eq!((count(&r.wt), count(&r.tc), count(&r.et)), (3, 2, 1));
        let bg = compose_tumor_regions(&LabelMap::zeros(dims, Taxonomy::Tumor)).unwrap();
        assert!(bg.wt.iter().chain(&bg.tc).chain(&bg.et).all(|v| !v));
        assert!(compose_tumor_regions(&LabelMap::zeros(dims, Taxonomy::Tissue)).is_err());
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("c{i:02}")).collect()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let plans = monte_carlo_splits(&ids(10), 3, SplitRatios::default(), 11).unwrap();
        assert_eq!(plans.len(), 11);
        for p in &plans {
            assert_eq!((p.train.len(), p.val.len(), p.test.len()), (7, 1, 2));
        }
        assert_eq!(plans, monte_carlo_splits(&ids(10), 3, SplitRatios::default(), 11).unwrap());
        let distinct: std::collections::BTreeSet<_> = plans.iter().map(|p| p.test.clone()).collect();
        assert!(distinct.len() > 1);
        let mut rev = ids(10);
        rev.reverse();
        assert_eq!(plans, monte_carlo_splits(&rev, 3, SplitRatios::default(), 11).unwrap());
        assert!(monte_carlo_splits(&ids(9), 3, SplitRatios::default(), 1).is_err());
        let p40 = monte_carlo_splits(&ids(40), 1, SplitRatios::default(), 1).unwrap();
        assert_eq!((p40[0].train.len(), p40[0].val.len(), p40[0].test.len()), (28, 4, 8));
    }

    #[test]
    fn wilcoxon_examples() {
        let r = wilcoxon_signed_rank_exact(&[0.1, 0.2, 0.3, 0.4, 0.5]).unwrap();
        assert_eq!((r.w, r.p_two_sided), (0.0, 2.0 / 32.0));
        let r = wilcoxon_signed_rank_exact(&[1.0, 2.0, 3.0, -4.0]).unwrap();
        assert_eq!((r.w_plus, r.w_minus, r.w), (6.0, 4.0, 4.0));
        // Sums over {1,2,3,4} with min(s, 10 - s) <= 4: every subset except
        // those summing to 5 ({1,4}, {2,3}).
        assert_eq!(r.p_two_sided, 14.0 / 16.0);
        let r = wilcoxon_signed_rank_exact(&[0.01; 11]).unwrap();
        assert_eq!(r.p_two_sided, 2.0 / 2048.0);
        assert!(matches!(wilcoxon_signed_rank_exact(&[0.0, 0.0]), Err(Error::UndefinedTest(_))));
        assert!(wilcoxon_signed_rank_exact(&[1.0; 26]).is_err());
    }

    #[test]
    fn ties_get_average_ranks() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn quantiles_type7() {
        let s = Summary::of(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
        assert_eq!(s.mean, 2.5);
    }

    fn report(method: &str, repeat: usize, wt: f64) -> MetricsReport {
        let per_case = vec![CaseDice {
            case_id: "a".into(),
            wt,
            tc: 0.5,
            et: 0.25,
        }];
        let regions = Region::ALL
            .iter()
            .map(|&r| (r, Summary::of(&[per_case[0].get(r)])))
            .collect();
        MetricsReport {
            method: method.into(),
            repeat_index: repeat,
            config_hash: String::new(),
            test_cases: vec!["a".into()],
            per_case,
            regions,
        }
    }

    #[test]
    fn compare_identical_is_degenerate() {
        let a: Vec<_> = (0..3).map(|r| report("base", r, 0.7)).collect();
        let c = compare_methods(&a, &a).unwrap();
        assert!(c.regions.iter().all(|r| r.degenerate && r.wilcoxon.is_none()));
        assert!(c.table().contains("n/a"));
    }

    #[test]
    fn compare_rejects_unpaired() {
        let a: Vec<_> = (0..3).map(|r| report("base", r, 0.7)).collect();
        let mut b = a.clone();
        b[1].test_cases = vec!["z".into()];
        assert!(compare_methods(&a, &b).is_err());
        assert!(compare_methods(&a, &a[..2]).is_err());
    }

    #[test]
    fn compare_all_positive() {
        let a: Vec<_> = (0..11).map(|r| report("base", r, 0.5)).collect();
        let b: Vec<_> = (0..11).map(|r| report("ind", r, 0.5 + 0.01 * (r + 1) as f64)).collect();
        let c = compare_methods(&a, &b).unwrap();
        let wt = c.region(Region::WT);
        assert!(wt.wilcoxon.unwrap().p_two_sided < 0.01);
        assert_eq!(wt.proposed_not_worse, 11);
        assert!(c.region(Region::TC).degenerate);
        let csv = boxplot_csv(&[("base", &a), ("ind", &b)]);
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn hash_is_stable() {
        let h = config_hash(&SplitRatios::default()).unwrap();
        assert_eq!(h.len(), 64);
        assert_eq!(h, config_hash(&SplitRatios::default()).unwrap());
        assert_ne!(h, config_hash(&SplitRatios { train: 8, ..Default::default() }).unwrap());
    }
}
