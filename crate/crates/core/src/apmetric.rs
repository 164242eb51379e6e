//! Exact average precision and target assignment.
//!
//! Three independent routes to the same number:
//!
//! * [`ap_ranked`] counts, for every positive, the negatives and all
//!   predictions scored strictly above it;
//! * [`ap_reformulated`] gates the same sums with step functions of the
//!   localization score instead of explicit labels;
//! * [`ap_pr_area`] sorts, greedily matches against ground truths and
//!   integrates the precision-recall curve.
//!
//! Ties in score never count as "ranked above" (strict step `x > 0`).

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::geometry::{self, BBox};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Positive(usize),
    Negative,
}

impl Label {
    pub fn is_positive(&self) -> bool {
        matches!(self, Label::Positive(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Measurement {
    Iou,
    #[default]
    Giou,
    L1,
}

impl std::str::FromStr for Measurement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "iou" => Ok(Self::Iou),
            "giou" => Ok(Self::Giou),
            "l1" => Ok(Self::L1),
            other => Err(invalid(format!("unknown measurement `{other}`"))),
        }
    }
}

impl Measurement {
    /// Localization score rescaled to `[0, 1]` and its gradient with respect
    /// to the predicted box.
    pub fn score_with_grad(self, pred: &BBox, gt: &BBox) -> Result<(f64, [f64; 4])> {
        match self {
            Self::Iou => geometry::overlap_with_grad(gt, pred, false),
            Self::Giou => {
                let (g, grad) = geometry::overlap_with_grad(gt, pred, true)?;
                Ok((((g + 1.0) / 2.0).clamp(0.0, 1.0), grad.map(|v| v / 2.0)))
            }
            Self::L1 => geometry::l1_with_grad(gt, pred),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Predictions of one (mini-)batch with their target assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionBatch {
    predictions: Vec<Detection>,
    ground_truths: Vec<BBox>,
    labels: Vec<Label>,
}

impl DetectionBatch {
    pub fn new(predictions: Vec<Detection>, ground_truths: Vec<BBox>, labels: Vec<Label>) -> Result<Self> {
        if predictions.len() != labels.len() {
            return Err(invalid(format!(
                "{} predictions but {} labels",
                predictions.len(),
                labels.len()
            )));
        }
        for d in &predictions {
            d.bbox.validate()?;
            if !d.score.is_finite() {
                return Err(invalid("non-finite score"));
            }
        }
        for g in &ground_truths {
            g.validate()?;
        }
        for l in &labels {
            if let Label::Positive(g) = l {
                if *g >= ground_truths.len() {
                    return Err(invalid(format!("label points at missing ground truth {g}")));
                }
            }
        }
        Ok(Self { predictions, ground_truths, labels })
    }

    pub fn predictions(&self) -> &[Detection] {
        &self.predictions
    }

    pub fn ground_truths(&self) -> &[BBox] {
        &self.ground_truths
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|l| l.is_positive()).count()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.predictions.iter().map(|d| d.score).collect()
    }
}

/// Anchor-style assignment: positive to the argmax-IoU ground truth when that
/// IoU reaches `iou_threshold`. Several candidates may share a ground truth.
pub fn assign(candidates: &[BBox], ground_truths: &[BBox], iou_threshold: f64) -> Result<Vec<Label>> {
    if candidates.is_empty() {
        return Err(invalid("no candidate boxes to assign"));
    }
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(invalid(format!("iou threshold {iou_threshold} outside (0, 1)")));
    }
    candidates
        .iter()
        .map(|c| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in ground_truths.iter().enumerate() {
                let v = geometry::iou(c, gt)?;
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((g, v));
                }
            }
            Ok(match best {
                Some((g, v)) if v >= iou_threshold => Label::Positive(g),
                _ => Label::Negative,
            })
        })
        .collect()
}

/// Localization score of prediction `i`: zero for negatives, otherwise the
/// measurement against the assigned ground truth rescaled to `[0, 1]`.
pub fn loc_score(batch: &DetectionBatch, i: usize, measurement: Measurement) -> Result<f64> {
    let label = batch
        .labels
        .get(i)
        .ok_or_else(|| invalid(format!("prediction index {i} out of range")))?;
    match label {
        Label::Negative => Ok(0.0),
        Label::Positive(g) => Ok(measurement
            .score_with_grad(&batch.predictions[i].bbox, &batch.ground_truths[*g])?
            .0),
    }
}

/// AP from ranks: mean over positives of `1 - rank_neg / rank`.
pub fn ap_ranked(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(invalid("scores and labels differ in length"));
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    if n_pos == 0 {
        return Err(Error::EmptyPositive);
    }
    let mut total = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        let (mut above, mut neg_above) = (0usize, 0usize);
        for (j, &sj) in scores.iter().enumerate() {
            if j != i && sj > si {
                above += 1;
                if !positive[j] {
                    neg_above += 1;
                }
            }
        }
        total += 1.0 - neg_above as f64 / (1 + above) as f64;
    }
    Ok(total / n_pos as f64)
}

fn step(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// AP written purely in terms of scores and localization scores, with the
/// positive set recovered as `H(l_i)`.
pub fn ap_reformulated(scores: &[f64], loc_scores: &[f64]) -> Result<f64> {
    if scores.len() != loc_scores.len() {
        return Err(invalid("scores and localization scores differ in length"));
    }
    let n_pos: f64 = loc_scores.iter().map(|&l| step(l)).sum();
    if n_pos == 0.0 {
        return Err(Error::EmptyPositive);
    }
    let mut total = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        let (mut num, mut den) = (0.0, 1.0);
        for (j, &sj) in scores.iter().enumerate() {
            if j == i {
                continue;
            }
            let h = step(sj - si);
            num += h * (1.0 - step(loc_scores[j]));
            den += h;
        }
        let gate = step(loc_scores[i]);
        total += gate - num / den * gate;
    }
    Ok(total / n_pos)
}

/// All-points area under the precision-recall curve, averaged over
/// `iou_thresholds`.
pub fn ap_pr_area(predictions: &[Detection], ground_truths: &[BBox], iou_thresholds: &[f64]) -> Result<f64> {
    if ground_truths.is_empty() {
        return Err(invalid("AP needs at least one ground truth"));
    }
    if iou_thresholds.is_empty() {
        return Err(invalid("AP needs at least one IoU threshold"));
    }
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        predictions[b]
            .score
            .partial_cmp(&predictions[a].score)
            .unwrap_or(Ordering::Equal)
    });
    let ious = order
        .iter()
        .map(|&p| {
            ground_truths
                .iter()
                .map(|g| geometry::iou(&predictions[p].bbox, g))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sum = 0.0;
    for &thr in iou_thresholds {
        sum += pr_area_at(&ious, ground_truths.len(), thr);
    }
    Ok(sum / iou_thresholds.len() as f64)
}

/// `ious[r][g]`: IoU of the rank-`r` prediction with ground truth `g`.
fn pr_area_at(ious: &[Vec<f64>], n_gt: usize, thr: f64) -> f64 {
    let mut matched = vec![false; n_gt];
    let mut tp = 0usize;
    let mut area = 0.0;
    for (rank, row) in ious.iter().enumerate() {
        let best = row
            .iter()
            .enumerate()
            .filter(|(g, v)| !matched[*g] && **v >= thr)
            .fold(None::<(usize, f64)>, |acc, (g, &v)| match acc {
                Some((_, bv)) if bv >= v => acc,
                _ => Some((g, v)),
            });
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
            area += tp as f64 / (rank + 1) as f64;
        }
    }
    area / n_gt as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn assign_examples() {
        let gt = bx(0.0, 0.0, 1.0, 1.0);
        // iou 0.6: width 0.6 fully inside
        let c = bx(0.0, 0.0, 0.6, 1.0);
        assert_eq!(assign(&[c], &[gt], 0.5).unwrap(), vec![Label::Positive(0)]);
        let far = bx(3.0, 3.0, 4.0, 4.0);
        assert_eq!(assign(&[far], &[gt], 0.5).unwrap(), vec![Label::Negative]);

        let cand = bx(0.0, 0.0, 1.0, 1.0);
        let g0 = bx(0.0, 0.0, 0.4, 1.0);
        let g1 = bx(0.0, 0.0, 1.0 / 0.7, 1.0);
        assert_relative_eq!(geometry::iou(&cand, &g0).unwrap(), 0.4);
        assert_relative_eq!(geometry::iou(&cand, &g1).unwrap(), 0.7, epsilon = 1e-12);
        assert_eq!(assign(&[cand], &[g0, g1], 0.5).unwrap(), vec![Label::Positive(1)]);

        assert_eq!(assign(&[cand], &[], 0.5).unwrap(), vec![Label::Negative]);
        assert!(assign(&[], &[gt], 0.5).is_err());
        assert!(assign(&[cand], &[gt], 1.0).is_err());
    }

    #[test]
    fn loc_score_examples() {
        let gt = bx(0.0, 0.0, 1.0, 1.0);
        let preds = vec![
            Detection { bbox: gt, score: 0.9 },
            Detection { bbox: bx(0.5, 0.0, 1.5, 1.0), score: 0.8 },
            Detection { bbox: bx(2.0, 2.0, 3.0, 3.0), score: 0.7 },
        ];
        let labels = vec![Label::Positive(0), Label::Positive(0), Label::Negative];
        let batch = DetectionBatch::new(preds, vec![gt], labels).unwrap();
        assert_eq!(loc_score(&batch, 0, Measurement::Giou).unwrap(), 1.0);
        assert_relative_eq!(loc_score(&batch, 1, Measurement::Giou).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(loc_score(&batch, 1, Measurement::Iou).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        for m in [Measurement::Iou, Measurement::Giou, Measurement::L1] {
            assert_eq!(loc_score(&batch, 2, m).unwrap(), 0.0);
        }
        assert!(loc_score(&batch, 3, Measurement::Iou).is_err());
    }

    #[test]
    fn batch_validation() {
        let gt = bx(0.0, 0.0, 1.0, 1.0);
        let d = Detection { bbox: gt, score: 0.5 };
        assert!(DetectionBatch::new(vec![d], vec![gt], vec![Label::Positive(1)]).is_err());
        assert!(DetectionBatch::new(vec![d], vec![gt], vec![]).is_err());
        let nan = Detection { bbox: gt, score: f64::NAN };
        assert!(DetectionBatch::new(vec![nan], vec![gt], vec![Label::Negative]).is_err());
    }

    #[test]
    fn ap_ranked_examples() {
        assert_eq!(ap_ranked(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_relative_eq!(
            ap_ranked(&[0.9, 0.7, 0.5], &[true, false, true]).unwrap(),
            5.0 / 6.0,
            epsilon = 1e-15
        );
        assert_eq!(ap_ranked(&[0.5, 0.9], &[true, false]).unwrap(), 0.5);
        assert_eq!(ap_ranked(&[0.5], &[false]), Err(Error::EmptyPositive));
    }

    #[test]
    fn ap_reformulated_examples() {
        assert_relative_eq!(
            ap_reformulated(&[0.9, 0.7, 0.5], &[0.8, 0.0, 0.6]).unwrap(),
            5.0 / 6.0,
            epsilon = 1e-15
        );
        assert_eq!(ap_reformulated(&[0.3], &[0.9]).unwrap(), 1.0);
        assert_eq!(ap_reformulated(&[0.3, 0.2], &[0.0, 0.0]), Err(Error::EmptyPositive));
    }

    #[test]
    fn ties_do_not_count_as_above() {
        // equal scores: neither outranks the other
        assert_eq!(ap_ranked(&[0.5, 0.5], &[true, false]).unwrap(), 1.0);
        assert_eq!(ap_reformulated(&[0.5, 0.5], &[0.7, 0.0]).unwrap(), 1.0);
    }

    #[test]
    fn pr_area_examples() {
        let gt = bx(0.1, 0.1, 0.4, 0.5);
        let hit = |s| Detection { bbox: gt, score: s };
        let miss = |s| Detection { bbox: bx(0.6, 0.6, 0.9, 0.9), score: s };
        assert_eq!(ap_pr_area(&[hit(0.9)], &[gt], &[0.5]).unwrap(), 1.0);
        assert_eq!(ap_pr_area(&[hit(0.9), hit(0.8)], &[gt], &[0.5]).unwrap(), 1.0);
        assert_eq!(ap_pr_area(&[miss(0.9), hit(0.7)], &[gt], &[0.5]).unwrap(), 0.5);
        assert_eq!(ap_pr_area(&[], &[gt], &[0.5]).unwrap(), 0.0);
        assert!(ap_pr_area(&[hit(0.9)], &[], &[0.5]).is_err());
        assert!(ap_pr_area(&[hit(0.9)], &[gt], &[]).is_err());
    }

    #[test]
    fn pr_area_averages_thresholds() {
        let gt = bx(0.0, 0.0, 1.0, 1.0);
        // iou 0.7: matches below 0.7 only -> 5 of 10 COCO thresholds (0.50..0.70)
        let d = Detection { bbox: bx(0.0, 0.0, 0.7, 1.0), score: 0.9 };
        assert_relative_eq!(ap_pr_area(&[d], &[gt], &coco_thresholds()).unwrap(), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn thresholds() {
        let t = coco_thresholds();
        assert_eq!(t.len(), 10);
        assert_eq!(t[0], 0.5);
        assert_eq!(t[9], 0.95);
    }
}
