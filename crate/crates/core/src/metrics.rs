//! Confusion matrices, macro metrics, tissue ratios, operation counts and
//! the label-noise variance trial.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tiling::TileGrid;
use crate::{TissueClass, NUM_CLASSES};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange(truth));
        }
        if pred >= NUM_CLASSES {
            return Err(Error::LabelOutOfRange(pred));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }

    /// One-vs-rest counts for class `c`.
    pub fn one_vs_rest(&self, c: usize) -> BinaryCounts {
        let tp = self.counts[c][c];
        let row: u64 = self.counts[c].iter().sum();
        let col: u64 = self.counts.iter().map(|r| r[c]).sum();
        let fn_ = row - tp;
        let fp = col - tp;
        BinaryCounts {
            tp,
            fp,
            fn_,
            tn: self.total() - tp - fp - fn_,
        }
    }
}

pub fn confusion(truth: &[usize], pred: &[usize]) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::invalid(format!(
            "{} true labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(pred) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// One-vs-rest scores of a class. `None` marks an empty denominator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub accuracy: Option<f64>,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub specificity: Option<f64>,
    pub dsc: Option<f64>,
    pub iou: Option<f64>,
}

impl ClassMetrics {
    pub fn from_counts(b: &BinaryCounts) -> Self {
        let BinaryCounts { tp, fp, fn_, tn } = *b;
        ClassMetrics {
            accuracy: ratio(tp + tn, tp + tn + fp + fn_),
            recall: ratio(tp, tp + fn_),
            precision: ratio(tp, tp + fp),
            specificity: ratio(tn, tn + fp),
            dsc: ratio(2 * tp, 2 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
        }
    }

    fn get(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Accuracy => self.accuracy,
            Metric::Recall => self.recall,
            Metric::Precision => self.precision,
            Metric::Specificity => self.specificity,
            Metric::Dsc => self.dsc,
            Metric::Iou => self.iou,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    Recall,
    Precision,
    Specificity,
    Dsc,
    Iou,
}

impl Metric {
    pub const ALL: [Metric; 6] = [
        Metric::Accuracy,
        Metric::Recall,
        Metric::Precision,
        Metric::Specificity,
        Metric::Dsc,
        Metric::Iou,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Recall => "recall",
            Metric::Precision => "precision",
            Metric::Specificity => "specificity",
            Metric::Dsc => "dsc",
            Metric::Iou => "iou",
        }
    }
}

/// Unweighted mean, summed in ascending order so the result does not depend
/// on the order of the inputs.
pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub per_class: [ClassMetrics; NUM_CLASSES],
    /// Indexed like [`Metric::ALL`].
    pub macro_avg: [f64; 6],
}

impl MetricsReport {
    pub fn macro_value(&self, m: Metric) -> f64 {
        self.macro_avg[Metric::ALL.iter().position(|&x| x == m).unwrap()]
    }

    /// Per-class values that enter the macro mean for `m`. An empty
    /// denominator counts as 0 when the class occurs in the ground truth
    /// and is left out otherwise.
    pub fn contributions(&self, m: Metric) -> Vec<f64> {
        (0..NUM_CLASSES)
            .filter_map(|c| {
                let present = self.confusion.counts[c].iter().sum::<u64>() > 0;
                match self.per_class[c].get(m) {
                    Some(v) => Some(v),
                    None if present => Some(0.0),
                    None => None,
                }
            })
            .collect()
    }

    /// `class,accuracy,...` table with one row per class and a macro row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class");
        for m in Metric::ALL {
            s.push(',');
            s.push_str(m.name());
        }
        s.push('\n');
        for c in TissueClass::ALL {
            s.push_str(c.name());
            for m in Metric::ALL {
                match self.per_class[c.index()].get(m) {
                    Some(v) => s.push_str(&format!(",{v:.6}")),
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s.push_str("macro");
        for v in self.macro_avg {
            s.push_str(&format!(",{v:.6}"));
        }
        s.push('\n');
        s
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "tiles evaluated: {}", self.confusion.total())?;
        writeln!(f, "confusion (rows true, cols predicted: tumor stroma fat):")?;
        for (c, row) in TissueClass::ALL.iter().zip(&self.confusion.counts) {
            writeln!(f, "  {:<7}{:>6}{:>7}{:>6}", c.name(), row[0], row[1], row[2])?;
        }
        for (m, v) in Metric::ALL.iter().zip(self.macro_avg) {
            writeln!(f, "macro {:<12}{:.4}", m.name(), v)?;
        }
        Ok(())
    }
}

pub fn macro_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let per_class = core::array::from_fn(|c| ClassMetrics::from_counts(&cm.one_vs_rest(c)));
    let mut report = MetricsReport {
        confusion: *cm,
        per_class,
        macro_avg: [0.0; 6],
    };
    for (i, m) in Metric::ALL.iter().enumerate() {
        report.macro_avg[i] = mean(&report.contributions(*m));
    }
    Ok(report)
}

/// Class shares in hundredths of a percent; always sums to 10000.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TissueRatios {
    pub counts: [u64; NUM_CLASSES],
    pub hundredths: [u64; NUM_CLASSES],
}

impl TissueRatios {
    pub fn from_counts(counts: [u64; NUM_CLASSES]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Empty("labeled tiles"));
        }
        // Largest remainder: floor every share, then hand the leftover
        // hundredths to the largest remainders (lowest class on ties).
        let mut hundredths = counts.map(|c| c * 10_000 / total);
        let rems = counts.map(|c| c * 10_000 % total);
        let short = 10_000 - hundredths.iter().sum::<u64>();
        let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
        order.sort_by(|&a, &b| rems[b].cmp(&rems[a]).then(a.cmp(&b)));
        for &c in order.iter().take(short as usize) {
            hundredths[c] += 1;
        }
        Ok(TissueRatios { counts, hundredths })
    }

    pub fn percent(&self, class: TissueClass) -> f64 {
        self.hundredths[class.index()] as f64 / 100.0
    }
}

impl fmt::Display for TissueRatios {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in TissueClass::ALL.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            let h = self.hundredths[i];
            write!(f, "{}: {}.{:02}%", c.display_name(), h / 100, h % 100)?;
        }
        Ok(())
    }
}

/// Tissue composition of the included, labeled tiles of `grid`.
pub fn tissue_ratios(grid: &TileGrid) -> Result<TissueRatios> {
    let mut counts = [0u64; NUM_CLASSES];
    for l in grid.included_labels() {
        *counts.get_mut(l).ok_or(Error::LabelOutOfRange(l))? += 1;
    }
    TissueRatios::from_counts(counts)
}

/// Pixel-level versus tile-level operation counts for one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexityReport {
    pub width: usize,
    pub height: usize,
    /// Tile side.
    pub k: usize,
    /// Token count of the classifier.
    pub m: usize,
    /// Embedding width of the classifier.
    pub d: usize,
    pub pixel_ops: u64,
    pub unit_ops: u64,
    pub ratio: f64,
    /// M²·D/k².
    pub unit_cost: f64,
}

pub fn complexity_report(width: usize, height: usize, k: usize, m: usize, d: usize) -> Result<ComplexityReport> {
    if k == 0 || width < k || height < k {
        return Err(Error::invalid(format!(
            "{width}×{height} image does not hold a {k}×{k} tile"
        )));
    }
    let pixel_ops = (width * height) as u64;
    let unit_ops = ((width / k) * (height / k)) as u64;
    Ok(ComplexityReport {
        width,
        height,
        k,
        m,
        d,
        pixel_ops,
        unit_ops,
        ratio: pixel_ops as f64 / unit_ops as f64,
        unit_cost: (m * m * d) as f64 / (k * k) as f64,
    })
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "image: {}x{}, tile: {}x{}", self.width, self.height, self.k, self.k)?;
        writeln!(f, "pixel ops (N): {}", self.pixel_ops)?;
        writeln!(f, "unit ops: {}", self.unit_ops)?;
        writeln!(f, "ratio: {}", fmt_number(self.ratio))?;
        writeln!(
            f,
            "unit cost M^2*D/k^2: {} (M={}, D={}, k={})",
            fmt_number(self.unit_cost),
            self.m,
            self.d,
            self.k
        )
    }
}

fn fmt_number(v: f64) -> String {
    if v == libm::trunc(v) && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.4}")
    }
}

/// Outcome of simulating noisy pixel labels that are pooled into tiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceTrial {
    pub k: usize,
    pub p: f64,
    pub trials: u64,
    /// Fraction of flipped pixel labels.
    pub pixel_error_rate: f64,
    /// Fraction of tiles whose majority vote is wrong (ties count as wrong).
    pub tile_error_rate: f64,
    /// Variance of a single pixel's error indicator.
    pub pixel_variance: f64,
    /// Variance of the per-tile mean error indicator.
    pub averaged_variance: f64,
    /// Standard error of `averaged_variance`.
    pub averaged_variance_se: f64,
}

impl VarianceTrial {
    /// `pixel_variance / k²`.
    pub fn bound(&self) -> f64 {
        self.pixel_variance / (self.k * self.k) as f64
    }
}

/// Flips each of the k² pixel labels of a tile independently with
/// probability `p`, `trials` times.
pub fn variance_reduction_trial(k: usize, p: f64, trials: u64, seed: u64) -> Result<VarianceTrial> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if !(0.0..0.5).contains(&p) {
        return Err(Error::invalid(format!("flip probability {p} must lie in [0, 0.5)")));
    }
    if trials < 2 {
        return Err(Error::invalid("need at least two trials"));
    }
    let n = (k * k) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut flips_total = 0u64;
    let mut tile_errors = 0u64;
    // Histogram of flips per tile; all moments come from it.
    let mut hist = alloc::vec![0u64; n as usize + 1];
    for _ in 0..trials {
        let flips = (0..n).filter(|_| rng.gen::<f64>() < p).count() as u64;
        flips_total += flips;
        if 2 * flips >= n {
            tile_errors += 1;
        }
        hist[flips as usize] += 1;
    }
    let t = trials as f64;
    let pixel_rate = flips_total as f64 / (t * n as f64);
    let pixel_samples = t * n as f64;
    let pixel_variance = pixel_rate * (1.0 - pixel_rate) * pixel_samples / (pixel_samples - 1.0);

    let avg_mean = pixel_rate;
    let (mut m2, mut m4) = (0.0, 0.0);
    for (f, &count) in hist.iter().enumerate() {
        let d = f as f64 / n as f64 - avg_mean;
        m2 += count as f64 * d * d;
        m4 += count as f64 * d * d * d * d;
    }
    let averaged_variance = m2 / (t - 1.0);
    let (m2p, m4p) = (m2 / t, m4 / t);
    let averaged_variance_se = libm::sqrt(((m4p - m2p * m2p) / t).max(0.0));
    Ok(VarianceTrial {
        k,
        p,
        trials,
        pixel_error_rate: pixel_rate,
        tile_error_rate: tile_errors as f64 / t,
        pixel_variance,
        averaged_variance,
        averaged_variance_se,
    })
}

impl fmt::Display for VarianceTrial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "k={} p={} trials={}", self.k, self.p, self.trials)?;
        writeln!(f, "pixel error rate: {:.5}", self.pixel_error_rate)?;
        writeln!(f, "tile majority error rate: {:.5}", self.tile_error_rate)?;
        writeln!(f, "pixel variance: {:.6}", self.pixel_variance)?;
        writeln!(
            f,
            "averaged-label variance: {:.6} (se {:.6}), bound pixel/k^2: {:.6}",
            self.averaged_variance,
            self.averaged_variance_se,
            self.bound()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::TILE_SIZE;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn confusion_examples() {
        let cm = confusion(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(cm.counts, [[1, 0, 0], [0, 1, 0], [0, 0, 2]]);
        assert_eq!(confusion(&[], &[]).unwrap(), ConfusionMatrix::default());
        let cm = confusion(&[0, 0, 1, 2, 2, 1], &[0, 1, 1, 0, 2, 2]).unwrap();
        assert_eq!(cm.counts, [[1, 1, 0], [0, 1, 1], [1, 0, 1]]);
        assert!(confusion(&[0, 3], &[0, 0]).is_err());
        assert!(confusion(&[0], &[]).is_err());
    }

    #[test]
    fn perfect_diagonal_scores_one() {
        let r = macro_metrics(&confusion(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap()).unwrap();
        assert!(r.macro_avg.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_prediction_recall_third() {
        let r = macro_metrics(&confusion(&[0, 1, 2, 0, 1, 2], &[1; 6]).unwrap()).unwrap();
        assert!((r.macro_value(Metric::Recall) - 1.0 / 3.0).abs() < 1e-15);
        // Tumor and fat are present but never predicted: precision 0 for both.
        assert_eq!(r.contributions(Metric::Precision), vec![0.0, 1.0 / 3.0, 0.0]);
    }

    #[test]
    fn iou_against_set_oracle() {
        let cm = ConfusionMatrix {
            counts: [[4, 1, 0], [1, 3, 1], [0, 1, 4]],
        };
        // Expand to labelled items and compute IoU with explicit sets.
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for t in 0..3 {
            for p in 0..3 {
                for _ in 0..cm.counts[t][p] {
                    truth.push(t);
                    pred.push(p);
                }
            }
        }
        let mut ious = Vec::new();
        for c in 0..3 {
            let a: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
            let b: Vec<usize> = (0..pred.len()).filter(|&i| pred[i] == c).collect();
            let inter = a.iter().filter(|i| b.contains(i)).count();
            let union = a.len() + b.len() - inter;
            ious.push(inter as f64 / union as f64);
        }
        let r = macro_metrics(&cm).unwrap();
        let want = (ious[0] + ious[1] + ious[2]) / 3.0;
        assert!((r.macro_value(Metric::Iou) - want).abs() < 1e-15);
        assert!((ious[0] - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_excluded_from_mean() {
        // No fat in truth or predictions.
        let cm = confusion(&[0, 0, 1], &[0, 1, 1]).unwrap();
        let r = macro_metrics(&cm).unwrap();
        assert_eq!(r.per_class[2].recall, None);
        assert_eq!(r.contributions(Metric::Recall).len(), 2);
        assert!((r.macro_value(Metric::Recall) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_rejected() {
        assert!(macro_metrics(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn csv_has_header_class_rows_and_macro() {
        let r = macro_metrics(&confusion(&[0, 1, 2], &[0, 1, 1]).unwrap()).unwrap();
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "class,accuracy,recall,precision,specificity,dsc,iou");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("fat,"));
        assert!(lines[4].starts_with("macro,"));
    }

    #[test]
    fn ratio_examples() {
        let r = TissueRatios::from_counts([2, 1, 1]).unwrap();
        assert_eq!(r.to_string(), "Tumor: 50.00%, Stroma: 25.00%, Fat: 25.00%");
        let r = TissueRatios::from_counts([0, 0, 7]).unwrap();
        assert_eq!(r.to_string(), "Tumor: 0.00%, Stroma: 0.00%, Fat: 100.00%");
        let r = TissueRatios { counts: [0; 3], hundredths: [5171, 1222, 3607] };
        assert_eq!(r.to_string(), "Tumor: 51.71%, Stroma: 12.22%, Fat: 36.07%");
        let r = TissueRatios::from_counts([1, 1, 1]).unwrap();
        assert_eq!(r.hundredths, [3334, 3333, 3333]);
        assert!(TissueRatios::from_counts([0; 3]).is_err());
    }

    #[test]
    fn ratios_skip_excluded_tiles() {
        let mut g = TileGrid::new(128, 32, TILE_SIZE).unwrap();
        g.set_labels(&[0, 0, 1, 2]).unwrap();
        g.tiles[1].excluded = true;
        let r = tissue_ratios(&g).unwrap();
        assert_eq!(r.counts, [1, 1, 1]);
        g.tiles.iter_mut().for_each(|t| t.excluded = true);
        assert!(tissue_ratios(&g).is_err());
    }

    #[test]
    fn complexity_examples() {
        let r = complexity_report(512, 512, 32, 16, 64).unwrap();
        assert_eq!((r.pixel_ops, r.unit_ops, r.ratio), (262_144, 256, 1024.0));
        assert_eq!(r.unit_cost, 16.0);
        let r = complexity_report(32, 32, 32, 16, 64).unwrap();
        assert_eq!((r.pixel_ops, r.unit_ops, r.ratio), (1024, 1, 1024.0));
        let r = complexity_report(96, 96, 32, 16, 64).unwrap();
        assert_eq!((r.unit_ops, r.ratio), (9, 1024.0));
        assert!(r.to_string().contains("ratio: 1024\n"));
        assert!(complexity_report(16, 16, 32, 1, 1).is_err());
    }

    #[test]
    fn trial_degenerate_cases() {
        let t = variance_reduction_trial(3, 0.0, 1000, 1).unwrap();
        assert_eq!((t.pixel_error_rate, t.tile_error_rate, t.averaged_variance), (0.0, 0.0, 0.0));
        let t = variance_reduction_trial(1, 0.2, 100_000, 2).unwrap();
        assert_eq!(t.pixel_error_rate, t.tile_error_rate);
        assert!((t.pixel_error_rate - 0.2).abs() < 0.005);
        assert!(variance_reduction_trial(3, 0.5, 10, 0).is_err());
        assert!(variance_reduction_trial(0, 0.1, 10, 0).is_err());
    }

    /// P(at least ceil(n/2) of n flips), matching the tie rule.
    fn majority_error_oracle(n: u64, p: f64) -> f64 {
        let mut total = 0.0;
        for j in 0..=n {
            if 2 * j < n {
                continue;
            }
            let mut binom = 1.0;
            for i in 0..j {
                binom = binom * (n - i) as f64 / (i + 1) as f64;
            }
            total += binom * libm::pow(p, j as f64) * libm::pow(1.0 - p, (n - j) as f64);
        }
        total
    }

    #[test]
    fn trial_matches_binomial_tail() {
        let oracle = majority_error_oracle(9, 0.3);
        assert!((oracle - 0.0988).abs() < 1e-4);
        let t = variance_reduction_trial(3, 0.3, 100_000, 7).unwrap();
        assert!((t.tile_error_rate - oracle).abs() <= 0.005);
        assert!(t.averaged_variance <= t.bound() + 3.0 * t.averaged_variance_se);
        assert!(t.tile_error_rate < t.pixel_error_rate);
    }

    fn arb_cm() -> impl Strategy<Value = ConfusionMatrix> {
        proptest::array::uniform3(proptest::array::uniform3(0u64..50))
            .prop_filter("non-empty", |c| c.iter().flatten().any(|&v| v > 0))
            .prop_map(|counts| ConfusionMatrix { counts })
    }

    proptest! {
        #[test]
        fn dsc_iou_identity(cm in arb_cm()) {
            let r = macro_metrics(&cm).unwrap();
            for c in &r.per_class {
                if let (Some(d), Some(i)) = (c.dsc, c.iou) {
                    prop_assert!((d - 2.0 * i / (1.0 + i)).abs() <= 1e-12);
                }
                prop_assert_eq!(c.dsc.is_some(), c.iou.is_some());
            }
            for (i, m) in Metric::ALL.iter().enumerate() {
                let v = r.contributions(*m);
                prop_assert_eq!(r.macro_avg[i], mean(&v));
                prop_assert!((0.0..=1.0).contains(&r.macro_avg[i]));
            }
        }

        #[test]
        fn class_permutation_invariance(cm in arb_cm(), perm_idx in 0usize..6) {
            const PERMS: [[usize; 3]; 6] = [[0,1,2],[0,2,1],[1,0,2],[1,2,0],[2,0,1],[2,1,0]];
            let perm = PERMS[perm_idx];
            let mut permuted = ConfusionMatrix::default();
            for t in 0..3 {
                for p in 0..3 {
                    permuted.counts[perm[t]][perm[p]] = cm.counts[t][p];
                }
            }
            let a = macro_metrics(&cm).unwrap();
            let b = macro_metrics(&permuted).unwrap();
            prop_assert_eq!(a.macro_avg, b.macro_avg);
        }

        #[test]
        fn ratios_sum_to_hundred(counts in proptest::array::uniform3(0u64..10_000)) {
            prop_assume!(counts.iter().sum::<u64>() > 0);
            let r = TissueRatios::from_counts(counts).unwrap();
            prop_assert_eq!(r.hundredths.iter().sum::<u64>(), 10_000);
            let total: u64 = counts.iter().sum();
            for c in 0..3 {
                let exact = counts[c] as f64 * 10_000.0 / total as f64;
                prop_assert!((r.hundredths[c] as f64 - exact).abs() < 1.0);
            }
        }
    }
}
