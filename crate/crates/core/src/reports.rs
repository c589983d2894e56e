//! Evaluation metrics and figure data: confusion matrix, RMSE and the
//! per-bin quantile table behind a functional box plot.

use std::fmt::Write as _;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("length mismatch: {preds} predictions vs {labels} targets")]
    Length { preds: usize, labels: usize },
    #[error("no samples")]
    Empty,
    #[error("class {value} out of range 0..{k}")]
    LabelRange { value: usize, k: usize },
    #[error("bin width {0}° must be positive and divide 120° evenly")]
    BinWidth(f64),
}

fn check_lengths(a: usize, b: usize) -> Result<(), ReportError> {
    if a != b {
        return Err(ReportError::Length { preds: a, labels: b });
    }
    if a == 0 {
        return Err(ReportError::Empty);
    }
    Ok(())
}

/// Rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.k).map(|i| self.get(i, i)).sum();
        trace as f64 / self.total() as f64
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        (0..self.k).map(|j| self.get(truth, j)).sum()
    }

    /// Fraction of class `truth` predicted correctly; `None` when the class
    /// never occurs.
    pub fn recall(&self, truth: usize) -> Option<f64> {
        let n = self.row_total(truth);
        (n > 0).then(|| self.get(truth, truth) as f64 / n as f64)
    }

    /// `true\pred,0,1,…` header then one row per true class.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred");
        for j in 0..self.k {
            let _ = write!(s, ",{j}");
        }
        s.push('\n');
        for i in 0..self.k {
            let _ = write!(s, "{i}");
            for j in 0..self.k {
                let _ = write!(s, ",{}", self.get(i, j));
            }
            s.push('\n');
        }
        s
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Result<ConfusionMatrix, ReportError> {
    check_lengths(preds.len(), labels.len())?;
    let mut counts = vec![0; k * k];
    for (&p, &t) in preds.iter().zip(labels) {
        for value in [p, t] {
            if value >= k {
                return Err(ReportError::LabelRange { value, k });
            }
        }
        counts[t * k + p] += 1;
    }
    Ok(ConfusionMatrix { k, counts })
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64, ReportError> {
    check_lengths(preds.len(), targets.len())?;
    let sq: f64 = preds.iter().zip(targets).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sq / preds.len() as f64).sqrt())
}

/// Percentile `q` (0..=100) of sorted data, interpolating linearly between
/// order statistics at rank `q/100·(n − 1)`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub const BOX_QUANTILES: [f64; 5] = [2.5, 25.0, 50.0, 75.0, 97.5];

#[derive(Debug, Clone, PartialEq)]
pub struct BoxplotBin {
    pub center: f64,
    pub n: usize,
    /// Prediction percentiles at [`BOX_QUANTILES`]; `None` for an empty bin.
    pub quantiles: Option<[f64; 5]>,
}

/// Groups predictions by true orientation into `bin_width` bins over
/// [−60°, 60°] and summarizes each bin by its prediction percentiles.
/// Targets outside the range are clamped into the edge bins.
pub fn functional_boxplot(preds: &[f64], targets: &[f64], bin_width: f64) -> Result<Vec<BoxplotBin>, ReportError> {
    check_lengths(preds.len(), targets.len())?;
    let bins = 120.0 / bin_width;
    if !(bin_width > 0.0) || (bins - bins.round()).abs() > 1e-9 {
        return Err(ReportError::BinWidth(bin_width));
    }
    let bins = bins.round() as usize;
    let mut grouped: Vec<Vec<f64>> = vec![Vec::new(); bins];
    for (&p, &t) in preds.iter().zip(targets) {
        let b = (((t + 60.0) / bin_width).floor().max(0.0) as usize).min(bins - 1);
        grouped[b].push(p);
    }
    Ok(grouped
        .into_iter()
        .enumerate()
        .map(|(b, mut v)| {
            v.sort_by(f64::total_cmp);
            BoxplotBin {
                center: -60.0 + (b as f64 + 0.5) * bin_width,
                n: v.len(),
                quantiles: (!v.is_empty()).then(|| BOX_QUANTILES.map(|q| percentile(&v, q))),
            }
        })
        .collect())
}

/// `bin_center,q025,q25,q50,q75,q975,n`; empty bins leave the quantile
/// fields blank.
pub fn boxplot_csv(bins: &[BoxplotBin]) -> String {
    let mut s = String::from("bin_center,q025,q25,q50,q75,q975,n\n");
    for b in bins {
        let _ = write!(s, "{}", b.center);
        match &b.quantiles {
            Some(q) => q.iter().for_each(|v| {
                let _ = write!(s, ",{v}");
            }),
            None => s.push_str(",,,,,"),
        }
        let _ = writeln!(s, ",{}", b.n);
    }
    s
}

/// Per-class recall rows `class,n,recall`.
pub fn recall_csv(cm: &ConfusionMatrix) -> String {
    let mut s = String::from("class,n,recall\n");
    for i in 0..cm.k() {
        let r = cm.recall(i).map(|r| r.to_string()).unwrap_or_default();
        let _ = writeln!(s, "{i},{},{r}", cm.row_total(i));
    }
    s
}
