//! Slide-level evaluation metrics for binary classification.

use std::fmt::Write as _;

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidArgument(format!("label {l} is not binary")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Indices sorted by score, ascending, with runs of equal scores.
fn tie_groups(scores: &[f64], descending: bool) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match groups.last_mut() {
            Some(g) if scores[g[0]] == scores[i] => g.push(i),
            _ => groups.push(vec![i]),
        }
    }
    groups
}

/// Area under the ROC curve via the rank-sum (Mann–Whitney) statistic with
/// average ranks for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::Degenerate("roc_auc needs both classes".into()));
    }
    // Ranks are doubled to stay in integers: a tie group spanning ranks
    // start+1..=start+len has doubled average rank 2·start + len + 1.
    let mut rank_sum2: u64 = 0;
    let mut start = 0u64;
    for g in tie_groups(scores, false) {
        let len = g.len() as u64;
        let positives = g.iter().filter(|&&i| labels[i] == 1).count() as u64;
        rank_sum2 += positives * (2 * start + len + 1);
        start += len;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Average precision `Σ (Rₖ − Rₖ₋₁)·Pₖ` over descending score thresholds;
/// equal scores form a single threshold.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels)?;
    if pos == 0 {
        return Err(Error::Degenerate("average_precision needs a positive".into()));
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    for g in tie_groups(scores, true) {
        let new_tp = g.iter().filter(|&&i| labels[i] == 1).count();
        tp += new_tp;
        fp += g.len() - new_tp;
        if new_tp > 0 {
            ap += (new_tp as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdMetrics {
    pub f1: f64,
    pub recall: f64,
    pub kappa: f64,
    pub confusion: Confusion,
}

pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_inputs(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s > threshold, l == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// F1, recall and Cohen's kappa from a confusion matrix. Each value is one
/// division of exact integer expressions.
pub fn metrics_from_confusion(c: Confusion) -> ThresholdMetrics {
    let recall = if c.tp + c.fn_ == 0 {
        0.0
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    };
    // 2PR/(P+R) = 2TP/(2TP+FP+FN); zero when P+R = 0.
    let f1 = if c.tp == 0 {
        0.0
    } else {
        (2 * c.tp) as f64 / (2 * c.tp + c.fp + c.fn_) as f64
    };
    // kappa = (p_o − p_e)/(1 − p_e) = (n·agree − S)/(n² − S) with
    // S = Σ_class predicted·actual.
    let n = c.total() as i128;
    let agree = (c.tp + c.tn) as i128;
    let s = ((c.tp + c.fp) * (c.tp + c.fn_) + (c.tn + c.fn_) * (c.tn + c.fp)) as i128;
    let kappa = if n == 0 || n * n == s {
        0.0
    } else {
        (n * agree - s) as f64 / (n * n - s) as f64
    };
    ThresholdMetrics {
        f1,
        recall,
        kappa,
        confusion: c,
    }
}

/// Metrics of the decisions `score > threshold`.
pub fn threshold_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ThresholdMetrics> {
    Ok(metrics_from_confusion(confusion(scores, labels, threshold)?))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub auc: f64,
    pub auprc: f64,
    pub f1: f64,
    pub recall: f64,
    pub kappa: f64,
    pub confusion: Confusion,
}

impl FoldMetrics {
    pub fn compute(fold: usize, scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let auc = roc_auc(scores, labels)?;
        let auprc = average_precision(scores, labels)?;
        let t = threshold_metrics(scores, labels, threshold)?;
        Ok(FoldMetrics {
            fold,
            auc,
            auprc,
            f1: t.f1,
            recall: t.recall,
            kappa: t.kappa,
            confusion: t.confusion,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (n − 1); std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: f64::NAN, std: f64::NAN };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub folds: Vec<FoldMetrics>,
    /// `(fold, reason)` for folds left out of the summary.
    pub skipped: Vec<(usize, String)>,
}

impl EvalReport {
    fn column(&self, f: impl Fn(&FoldMetrics) -> f64) -> MeanStd {
        mean_std(&self.folds.iter().map(f).collect::<Vec<_>>())
    }

    pub fn auc(&self) -> MeanStd {
        self.column(|m| m.auc)
    }

    pub fn auprc(&self) -> MeanStd {
        self.column(|m| m.auprc)
    }

    pub fn f1(&self) -> MeanStd {
        self.column(|m| m.f1)
    }

    pub fn recall(&self) -> MeanStd {
        self.column(|m| m.recall)
    }

    pub fn kappa(&self) -> MeanStd {
        self.column(|m| m.kappa)
    }

    /// Tab-separated table: header, one row per evaluated fold, then a
    /// `mean±std` summary row. Skipped folds are listed as `#` comments.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("fold\tauc\tauprc\tf1\trecall\tkappa\ttp\tfp\ttn\tfn\n");
        for m in &self.folds {
            let c = m.confusion;
            let _ = writeln!(
                out,
                "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\t{}\t{}",
                m.fold, m.auc, m.auprc, m.f1, m.recall, m.kappa, c.tp, c.fp, c.tn, c.fn_
            );
        }
        let cell = |s: MeanStd| format!("{:.4}±{:.4}", s.mean, s.std);
        let _ = writeln!(
            out,
            "mean±std\t{}\t{}\t{}\t{}\t{}\t\t\t\t",
            cell(self.auc()),
            cell(self.auprc()),
            cell(self.f1()),
            cell(self.recall()),
            cell(self.kappa())
        );
        for (fold, reason) in &self.skipped {
            let _ = writeln!(out, "# skipped fold {fold}: {reason}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.3; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
    }

    #[test]
    fn auc_needs_both_classes() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert!(average_precision(&[0.5, 0.2], &[0, 0]).is_err());
    }

    #[test]
    fn kappa_worked_example_is_exact() {
        let m = metrics_from_confusion(Confusion {
            tp: 40,
            tn: 40,
            fp: 10,
            fn_: 10,
        });
        assert_eq!(m.kappa, 0.6);
        assert_eq!(m.recall, 0.8);
        assert_eq!(m.f1, 0.8);
    }

    #[test]
    fn perfect_and_all_positive() {
        let m = threshold_metrics(&[0.9, 0.7, 0.2, 0.1], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!((m.f1, m.recall, m.kappa), (1.0, 1.0, 1.0));
        let m = threshold_metrics(&[0.9, 0.7, 0.8, 0.6], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!(m.recall, 1.0);
        assert_eq!(m.kappa, 0.0);
    }

    #[test]
    fn threshold_is_strict() {
        let c = confusion(&[0.5, 0.5], &[1, 0], 0.5).unwrap();
        assert_eq!((c.tp, c.fn_, c.tn), (0, 1, 1));
    }

    #[test]
    fn f1_zero_when_no_true_positives() {
        let m = threshold_metrics(&[0.1, 0.9], &[1, 0], 0.5).unwrap();
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn report_rows() {
        let mk = |fold| FoldMetrics {
            fold,
            auc: 0.9,
            auprc: 0.8,
            f1: 0.7,
            recall: 0.6,
            kappa: 0.5,
            confusion: Confusion::default(),
        };
        let r = EvalReport {
            folds: vec![mk(0), mk(2)],
            skipped: vec![(1, "single class".into())],
        };
        let tsv = r.to_tsv();
        let rows: Vec<_> = tsv.lines().skip(1).filter(|l| !l.starts_with('#')).collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[2].starts_with("mean±std\t0.9000±0.0000"));
    }
}
