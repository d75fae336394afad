//! Localisation metrics: class-aware IoU, success rates, AUC over a fixed
//! threshold grid and all-points-interpolated average precision.

use std::fmt::Write as _;

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataio::GtBox;
use crate::error::{ensure, Error, Result};

/// Thresholds `k / 20` for `k = 0..20`.
pub const AUC_STEPS: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapPrediction {
    /// (K, H, W) maps at image resolution.
    pub per_source: Array3<f64>,
    /// Predicted class of each map.
    pub class_assignments: Vec<String>,
}

impl HeatmapPrediction {
    pub fn new(per_source: Array3<f64>, class_assignments: Vec<String>) -> Result<Self> {
        if per_source.dim().0 != class_assignments.len() {
            return Err(Error::Dimension(format!(
                "{} maps but {} class assignments",
                per_source.dim().0,
                class_assignments.len()
            )));
        }
        ensure(per_source.iter().all(|v| v.is_finite()), || "heatmap contains non-finite values".into())?;
        Ok(Self {
            per_source,
            class_assignments,
        })
    }
}

/// `map >= frac * max(map)`; empty when the maximum is not positive.
pub fn binarize(map: ArrayView2<f64>, frac: f64) -> Array2<bool> {
    let mx = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if mx <= 0.0 {
        return Array2::from_elem(map.dim(), false);
    }
    map.mapv(|v| v >= frac * mx)
}

/// Rasterises a half-open box onto an (H, W) grid.
pub fn box_mask(b: &GtBox, h: usize, w: usize) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (x, y) = (x as f64, y as f64);
        x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1
    })
}

pub fn mask_iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-source class-aware IoU. Each map is binarised at `threshold_frac`
/// of its maximum and scored against the ground-truth boxes of its
/// assigned class; with several such boxes the best score is kept, and a
/// class without boxes scores 0.
pub fn ciou(pred: &HeatmapPrediction, gt_boxes: &[GtBox], threshold_frac: f64) -> Vec<f64> {
    let (_, h, w) = pred.per_source.dim();
    pred.per_source
        .outer_iter()
        .zip(&pred.class_assignments)
        .map(|(map, class)| {
            let bin = binarize(map, threshold_frac);
            gt_boxes
                .iter()
                .filter(|b| &b.class == class)
                .map(|b| mask_iou(&bin, &box_mask(b, h, w)))
                .fold(0.0, f64::max)
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MultiSourceRule {
    /// A sample succeeds only if every source passes.
    #[default]
    AllSources,
    /// Every source counts as its own sample.
    PerSource,
}

/// Reduces per-source scores to the flat list scored by
/// [`success_rate`]. Under [`MultiSourceRule::AllSources`] a sample is
/// represented by its worst source, which passes a threshold exactly when
/// all sources do.
pub fn flatten_scores(per_sample: &[Vec<f64>], rule: MultiSourceRule) -> Vec<f64> {
    match rule {
        MultiSourceRule::AllSources => per_sample
            .iter()
            .map(|s| s.iter().cloned().fold(f64::INFINITY, f64::min))
            .map(|m| if m.is_finite() { m } else { 0.0 })
            .collect(),
        MultiSourceRule::PerSource => per_sample.iter().flatten().cloned().collect(),
    }
}

/// Fraction of scores `>= thr`.
pub fn success_rate(scores: &[f64], thr: f64) -> Result<f64> {
    ensure(!scores.is_empty(), || "no scores to aggregate".into())?;
    Ok(scores.iter().filter(|&&s| s >= thr).count() as f64 / scores.len() as f64)
}

/// Mean success rate over thresholds 0.00, 0.05, ..., 0.95.
pub fn auc(scores: &[f64]) -> Result<f64> {
    ensure(!scores.is_empty(), || "no scores to aggregate".into())?;
    let mut total = 0.0;
    for k in 0..AUC_STEPS {
        total += success_rate(scores, k as f64 / AUC_STEPS as f64)?;
    }
    Ok(total / AUC_STEPS as f64)
}

/// All-points interpolated area under the precision-recall curve, ranking
/// predictions by descending confidence (ties keep input order).
pub fn average_precision(confidences: &[f64], successes: &[bool]) -> Result<f64> {
    if confidences.len() != successes.len() {
        return Err(Error::Dimension(format!(
            "{} confidences for {} outcomes",
            confidences.len(),
            successes.len()
        )));
    }
    let positives = successes.iter().filter(|&&s| s).count();
    if positives == 0 {
        log::warn!("average precision requested with no successful predictions; reporting 0");
        return Ok(0.0);
    }
    let mut order: Vec<usize> = (0..confidences.len()).collect();
    order.sort_by(|&a, &b| confidences[b].total_cmp(&confidences[a]));
    let mut precision = Vec::with_capacity(order.len());
    let mut recall = Vec::with_capacity(order.len());
    let mut tp = 0usize;
    for (rank, &i) in order.iter().enumerate() {
        tp += successes[i] as usize;
        precision.push(tp as f64 / (rank + 1) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Single,
    Multi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub clip_id: String,
    pub scores: Vec<f64>,
    /// Maximum of each source map.
    pub confidences: Vec<f64>,
    pub flagged: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: EvalMode,
    pub n_samples: usize,
    pub n_flagged: usize,
    pub ap: Option<f64>,
    pub iou_at_05: Option<f64>,
    pub cap: Option<f64>,
    pub ciou_at_03: Option<f64>,
    pub auc: f64,
    pub per_sample: Vec<SampleRecord>,
}

impl MetricReport {
    /// Aggregates per-sample records; flagged samples count as failures
    /// with score 0.
    pub fn from_samples(mode: EvalMode, per_sample: Vec<SampleRecord>, rule: MultiSourceRule) -> Result<Self> {
        ensure(!per_sample.is_empty(), || "no samples to evaluate".into())?;
        let scores: Vec<Vec<f64>> = per_sample
            .iter()
            .map(|s| if s.flagged.is_some() { vec![0.0] } else { s.scores.clone() })
            .collect();
        let n_flagged = per_sample.iter().filter(|s| s.flagged.is_some()).count();
        let flat = flatten_scores(&scores, rule);
        let auc_v = auc(&flat)?;
        let (thr, ap_entries): (f64, Vec<(f64, bool)>) = match mode {
            EvalMode::Single => (
                0.5,
                per_sample
                    .iter()
                    .zip(&flat)
                    .map(|(s, &sc)| (s.confidences.first().cloned().unwrap_or(0.0), sc >= 0.5))
                    .collect(),
            ),
            EvalMode::Multi => (
                0.3,
                per_sample
                    .iter()
                    .zip(&scores)
                    .flat_map(|(s, sc)| {
                        sc.iter()
                            .enumerate()
                            .map(|(k, &v)| (s.confidences.get(k).cloned().unwrap_or(0.0), v >= 0.3))
                            .collect::<Vec<_>>()
                    })
                    .collect(),
            ),
        };
        let (conf, succ): (Vec<f64>, Vec<bool>) = ap_entries.into_iter().unzip();
        let ap_v = average_precision(&conf, &succ)?;
        let rate = success_rate(&flat, thr)?;
        let (ap, iou_at_05, cap, ciou_at_03) = match mode {
            EvalMode::Single => (Some(ap_v), Some(rate), None, None),
            EvalMode::Multi => (None, None, Some(ap_v), Some(rate)),
        };
        Ok(Self {
            mode,
            n_samples: per_sample.len(),
            n_flagged,
            ap,
            iou_at_05,
            cap,
            ciou_at_03,
            auc: auc_v,
            per_sample,
        })
    }

    /// Headline metric: IoU@0.5 in single mode, CIoU@0.3 in multi mode.
    pub fn headline(&self) -> f64 {
        self.iou_at_05.or(self.ciou_at_03).unwrap_or(0.0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let pct = |v: Option<f64>| v.map(|x| format!("{:6.1}", 100.0 * x)).unwrap_or_else(|| "     -".into());
        let _ = writeln!(out, "{:<10} {:>6} {:>8} {:>6} {:>9} {:>6}", "mode", "AP", "IoU@0.5", "CAP", "CIoU@0.3", "AUC");
        let _ = writeln!(
            out,
            "{:<10} {} {:>8} {} {:>9} {}",
            format!("{:?}", self.mode).to_lowercase(),
            pct(self.ap),
            pct(self.iou_at_05),
            pct(self.cap),
            pct(self.ciou_at_03),
            pct(Some(self.auc))
        );
        let _ = writeln!(out, "samples: {} (flagged {})", self.n_samples, self.n_flagged);
        out
    }

    /// One row per sample: clip id, source index, score, confidence, flag.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,source,score,confidence,flag\n");
        for s in &self.per_sample {
            let flag = s.flagged.as_deref().unwrap_or("").replace(',', ";");
            if s.scores.is_empty() {
                let _ = writeln!(out, "{},,,,{}", s.clip_id, flag);
            }
            for (k, sc) in s.scores.iter().enumerate() {
                let conf = s.confidences.get(k).cloned().unwrap_or(f64::NAN);
                let _ = writeln!(out, "{},{k},{sc},{conf},{flag}", s.clip_id);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gt(class: &str, x0: f64, y0: f64, x1: f64, y1: f64) -> GtBox {
        GtBox {
            class: class.into(),
            x0,
            y0,
            x1,
            y1,
        }
    }

    fn box_map(b: &GtBox, h: usize, w: usize) -> Array3<f64> {
        box_mask(b, h, w).mapv(|v| v as u8 as f64).insert_axis(ndarray::Axis(0))
    }

    #[test]
    fn ciou_cases() {
        let target = gt("a", 0.0, 0.0, 2.0, 2.0);
        let pred = HeatmapPrediction::new(box_map(&target, 4, 4), vec!["a".into()]).unwrap();
        assert_eq!(ciou(&pred, &[target.clone()], 0.5), vec![1.0]);

        let far = HeatmapPrediction::new(box_map(&gt("a", 3.0, 3.0, 4.0, 4.0), 4, 4), vec!["a".into()]).unwrap();
        assert_eq!(ciou(&far, &[target.clone()], 0.5), vec![0.0]);

        let shifted = HeatmapPrediction::new(box_map(&gt("a", 1.0, 0.0, 3.0, 2.0), 4, 4), vec!["a".into()]).unwrap();
        assert!((ciou(&shifted, &[target.clone()], 0.5)[0] - 1.0 / 3.0).abs() < 1e-15);

        let wrong_class = HeatmapPrediction::new(box_map(&target, 4, 4), vec!["b".into()]).unwrap();
        assert_eq!(ciou(&wrong_class, &[target], 0.5), vec![0.0]);
    }

    #[test]
    fn success_rate_cases() {
        assert_eq!(success_rate(&[1.0, 1.0, 1.0], 0.3).unwrap(), 1.0);
        assert_eq!(success_rate(&[0.2, 0.4], 0.3).unwrap(), 0.5);
        assert!(success_rate(&[], 0.3).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[1.0; 4]).unwrap(), 1.0);
        assert!((auc(&[0.0; 4]).unwrap() - 0.05).abs() < 1e-15);
        assert!((auc(&[0.5]).unwrap() - 0.55).abs() < 1e-15);
        assert!(auc(&[]).is_err());
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[0.3, 0.9, 0.1], &[true, true, true]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.3, 0.9], &[false, false]).unwrap(), 0.0);
        // Ranks: T (P=1, R=.5), F (P=.5), T (P=2/3, R=1).
        let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn all_sources_rule_uses_worst_source() {
        let s = vec![vec![0.9, 0.2], vec![0.5, 0.6]];
        assert_eq!(flatten_scores(&s, MultiSourceRule::AllSources), vec![0.2, 0.5]);
        assert_eq!(flatten_scores(&s, MultiSourceRule::PerSource).len(), 4);
    }

    #[test]
    fn report_serialisations() {
        let samples = vec![
            SampleRecord {
                clip_id: "a".into(),
                scores: vec![0.7],
                confidences: vec![0.9],
                flagged: None,
            },
            SampleRecord {
                clip_id: "b".into(),
                scores: vec![],
                confidences: vec![],
                flagged: Some("K mismatch".into()),
            },
        ];
        let r = MetricReport::from_samples(EvalMode::Single, samples, MultiSourceRule::AllSources).unwrap();
        assert_eq!(r.iou_at_05, Some(0.5));
        assert_eq!(r.n_flagged, 1);
        let back: MetricReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("IoU@0.5"));
        assert_eq!(r.to_csv().lines().count(), 3);
    }

    proptest! {
        #[test]
        fn auc_is_mean_of_success_rates(scores in prop::collection::vec(0.0f64..=1.0, 1..30)) {
            let mean: f64 = (0..AUC_STEPS).map(|k| success_rate(&scores, k as f64 / 20.0).unwrap()).sum::<f64>() / 20.0;
            prop_assert_eq!(auc(&scores).unwrap(), mean);
        }

        #[test]
        fn improving_a_score_never_hurts(scores in prop::collection::vec(0.0f64..=1.0, 1..20), idx in 0usize..20, bump in 0.0f64..0.5) {
            let i = idx % scores.len();
            let mut better = scores.clone();
            better[i] = (better[i] + bump).min(1.0);
            prop_assert!(auc(&better).unwrap() >= auc(&scores).unwrap());
            prop_assert!(success_rate(&better, 0.3).unwrap() >= success_rate(&scores, 0.3).unwrap());
        }

        #[test]
        fn metrics_in_unit_interval(scores in prop::collection::vec(0.0f64..=1.0, 1..20), conf in prop::collection::vec(0.0f64..1.0, 20)) {
            let succ: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
            let ap = average_precision(&conf[..scores.len()], &succ).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!((0.0..=1.0).contains(&auc(&scores).unwrap()));
        }
    }
}
