use crate::error::{Error, Result};

/// Threshold metrics plus ROC AUC for one set of scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    /// Mean of the four metrics; `None` when AUC is undefined.
    pub avg: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion at `threshold` (a score at or above it is called positive) and
/// trapezoidal AUC. Rates with an empty denominator are reported as 0.
pub fn compute_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    if scores.len() != labels.len() {
        return Err(Error::dim("compute_metrics", (scores.len(), 1), (labels.len(), 1)));
    }
    if scores.is_empty() {
        return Err(Error::Config("no scores to evaluate".into()));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score {s}")));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let sensitivity = ratio(tp, tp + fn_);
    let specificity = ratio(tn, tn + fp);
    let accuracy = ratio(tp + tn, scores.len());
    let auc = match roc_auc(scores, labels) {
        Ok(a) => Some(a),
        Err(Error::AucUndefined) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        sensitivity,
        specificity,
        accuracy,
        auc,
        avg: auc.map(|a| (sensitivity + specificity + accuracy + a) / 4.0),
        tp,
        fp,
        tn,
        fn_,
    })
}

/// Area under the ROC curve by trapezoids over tied-score groups.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("roc_auc", (scores.len(), 1), (labels.len(), 1)));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // Twice the area in units of one (pos, neg) pair, kept integral.
    let mut twice_area: u128 = 0;
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dp, mut dn) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                dp += 1;
            } else {
                dn += 1;
            }
            i += 1;
        }
        twice_area += dn * (2 * tp + dp);
        tp += dp;
        fp += dn;
    }
    debug_assert_eq!((tp, fp), (pos as u128, neg as u128));
    Ok(twice_area as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Brute-force pairwise AUC: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let mut wins = 0.0;
    let mut pairs = 0usize;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 1 {
                continue;
            }
            pairs += 1;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Err(Error::AucUndefined);
    }
    Ok(wins / pairs as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_separation() {
        let r = compute_metrics(&[0.9, 0.8, 0.1], &[1, 1, 0], 0.5).unwrap();
        assert_eq!(r.auc, Some(1.0));
        assert_eq!(r.accuracy, 1.0);
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (2, 0, 1, 0));
        assert_eq!(r.avg, Some(1.0));
    }

    #[test]
    fn tie_counts_half() {
        assert_eq!(roc_auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        let r = compute_metrics(&[0.5, 0.5], &[1, 0], 0.5).unwrap();
        assert_eq!((r.tp, r.fp), (1, 1));
    }

    #[test]
    fn single_class_keeps_threshold_metrics() {
        assert!(matches!(roc_auc(&[0.2, 0.7], &[1, 1]), Err(Error::AucUndefined)));
        let r = compute_metrics(&[0.2, 0.7], &[1, 1], 0.5).unwrap();
        assert_eq!(r.auc, None);
        assert_eq!(r.avg, None);
        assert_eq!(r.sensitivity, 0.5);
        assert_eq!(r.specificity, 0.0);
    }

    #[test]
    fn hand_checked_confusion() {
        let scores = [0.9, 0.4, 0.6, 0.2, 0.55];
        let labels = [1, 1, 0, 0, 1];
        let r = compute_metrics(&scores, &labels, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.tn, r.fn_), (2, 1, 1, 1));
        assert_eq!(r.sensitivity, 2.0 / 3.0);
        assert_eq!(r.specificity, 0.5);
        assert_eq!(r.accuracy, 0.6);
        // pos {0.9,0.4,0.55} vs neg {0.6,0.2}: wins 2 + 1 + 1 = 4 of 6.
        assert_eq!(r.auc, Some(4.0 / 6.0));
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            compute_metrics(&[0.1], &[0, 1], 0.5),
            Err(Error::Dimension { .. })
        ));
    }
}
