//! Heatmap AUC, normalised distances and average precision.

use std::fmt;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::nn::Resampler;
use crate::{Error, Result, Scalar};

/// Side of the square grid AUC is computed on.
pub const AUC_GRID: usize = 64;

/// ROC AUC with tied scores sharing their mean rank.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Binary label grid with one positive pixel per annotated gaze point.
pub fn gaze_label_grid(points: &[(f64, f64)], shape: (usize, usize)) -> Array2<bool> {
    let (h, w) = shape;
    let mut labels = Array2::from_elem(shape, false);
    for &(x, y) in points {
        let c = ((x * w as f64).floor().max(0.0) as usize).min(w - 1);
        let r = ((y * h as f64).floor().max(0.0) as usize).min(h - 1);
        labels[(r, c)] = true;
    }
    labels
}

/// Heatmap AUC after bilinear resizing to `eval_shape`.
pub fn auc<T: Scalar>(heatmap: ArrayView2<'_, T>, gt_points: &[(f64, f64)], eval_shape: (usize, usize)) -> Result<f64> {
    if gt_points.is_empty() {
        return Err(Error::UndefinedMetric("AUC needs at least one gaze point".into()));
    }
    let src = heatmap.mapv(|v| v.as_f64());
    let resized = if src.dim() == eval_shape {
        src
    } else {
        let r = Resampler::<f64>::bilinear(src.dim(), eval_shape);
        r.rows.dot(&src).dot(&r.cols.t())
    };
    let labels = gaze_label_grid(gt_points, eval_shape);
    roc_auc(
        resized.as_slice().expect("standard layout"),
        labels.as_slice().expect("standard layout"),
    )
}

/// Minimum and mean Euclidean distance from the prediction to the
/// annotations, in normalised image units.
pub fn distances(decoded: (f64, f64), gt_points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if gt_points.is_empty() {
        return Err(Error::UndefinedMetric("distance needs at least one gaze point".into()));
    }
    let d: Vec<f64> = gt_points
        .iter()
        .map(|&(x, y)| ((x - decoded.0).powi(2) + (y - decoded.1).powi(2)).sqrt())
        .collect();
    let min = d.iter().copied().fold(f64::INFINITY, f64::min);
    Ok((min, d.iter().sum::<f64>() / d.len() as f64))
}

/// Average precision: `Σ (R_k − R_{k−1}) · P_k` over distinct score thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    let total_pos = labels.iter().filter(|&&l| l).count();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap)
}

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricEntry {
    pub name: String,
    pub value: f64,
    pub count: usize,
}

/// Plain-text report, one `name value count` line per metric.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub entries: Vec<MetricEntry>,
}

impl MetricsReport {
    pub fn push(&mut self, name: &str, value: f64, count: usize) {
        self.entries.push(MetricEntry {
            name: name.to_string(),
            value,
            count,
        });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|e| e.name == name).map(|e| e.value)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut report = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |m: &str| Error::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 3 {
                return Err(parse_err("expected `name value count`"));
            }
            let value = f[1].parse().map_err(|_| parse_err("bad value"))?;
            let count = f[2].parse().map_err(|_| parse_err("bad count"))?;
            report.push(f[0], value, count);
        }
        Ok(report)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{} {} {}", e.name, e.value, e.count)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn perfect_and_constant_heatmaps() {
        let mut m = Array2::<f64>::zeros((64, 64));
        m[(10, 20)] = 1.0;
        assert_eq!(auc(m.view(), &[(20.5 / 64.0, 10.5 / 64.0)], (64, 64)).unwrap(), 1.0);
        let c = Array2::<f64>::from_elem((64, 64), 0.3);
        assert_eq!(auc(c.view(), &[(0.5, 0.5)], (64, 64)).unwrap(), 0.5);
    }

    #[test]
    fn ties_match_pairwise_oracle() {
        let s = [0.1, 0.4, 0.4, 0.9, 0.4, 0.2, 0.9, 0.0];
        let l = [false, true, false, true, false, false, false, true];
        assert!((roc_auc(&s, &l).unwrap() - brute_auc(&s, &l)).abs() < 1e-12);
    }

    #[test]
    fn undefined_auc() {
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distances((0.3, 0.3), &[(0.3, 0.3)]).unwrap(), (0.0, 0.0));
        let (a, b) = distances((0.0, 0.0), &[(1.0, 1.0)]).unwrap();
        assert!((a - 2f64.sqrt()).abs() < 1e-15 && (b - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(distances((0.25, 0.0), &[(0.0, 0.0), (1.0, 0.0)]).unwrap(), (0.25, 0.5));
        assert!(distances((0.0, 0.0), &[]).is_err());
    }

    #[test]
    fn ap_examples() {
        assert!((average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(average_precision(&[0.2], &[true]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert!(average_precision(&[0.9], &[false]).is_err());
    }

    #[test]
    fn report_round_trip() {
        let mut r = MetricsReport::default();
        r.push("auc", 0.912345678901, 10);
        r.push("min_dist", 0.05, 10);
        assert_eq!(MetricsReport::parse(&r.to_string()).unwrap(), r);
    }

    proptest! {
        #[test]
        fn auc_matches_oracle_and_is_monotone_invariant(
            scores in proptest::collection::vec(0u8..6, 16),
            labels in proptest::collection::vec(any::<bool>(), 16),
        ) {
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 5.0).collect();
            let a = roc_auc(&s, &labels).unwrap();
            prop_assert!((a - brute_auc(&s, &labels)).abs() < 1e-12);
            let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert!((roc_auc(&t, &labels).unwrap() - a).abs() < 1e-12);
        }

        #[test]
        fn ap_is_scale_invariant(
            scores in proptest::collection::vec(0.0f64..1.0, 1..20),
            k in 0.1f64..10.0,
            seed in any::<u64>(),
        ) {
            let labels: Vec<bool> = (0..scores.len()).map(|i| (seed >> (i % 64)) & 1 == 1 || i == 0).collect();
            let scaled: Vec<f64> = scores.iter().map(|v| v * k).collect();
            let a = average_precision(&scores, &labels).unwrap();
            let b = average_precision(&scaled, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn min_never_exceeds_mean(px in 0.0f64..1.0, py in 0.0f64..1.0,
                                  pts in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..10)) {
            let (mn, avg) = distances((px, py), &pts).unwrap();
            prop_assert!(mn <= avg + 1e-15);
        }
    }
}
