//! Reference implementations used by the integration tests. Nothing here
//! calls into the library's math; only its data types are shared.
#![allow(dead_code)]

use apsearch::{BBox, Detection, DetectionBatch, Label};
use rand::Rng;

pub const KNOT_MARGIN: f64 = 1e-3;

/// Linear interpolation through control points, `x = 1` in the last segment.
pub fn interp(points: &[[f64; 2]], x: f64) -> f64 {
    if x >= 1.0 {
        return 1.0;
    }
    for w in points.windows(2) {
        let ([x0, y0], [x1, y1]) = (w[0], w[1]);
        if x >= x0 && x < x1 {
            return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
        }
    }
    unreachable!("x = {x} outside [0, 1]")
}

pub fn near_knot(points: &[[f64; 2]], x: f64) -> bool {
    points[1..points.len() - 1].iter().any(|p| (p[0] - x).abs() < KNOT_MARGIN)
}

fn area(b: &[f64; 4]) -> f64 {
    (b[2] - b[0]) * (b[3] - b[1])
}

/// GIoU from first principles on raw corner arrays.
pub fn giou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    let hull = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    inter / union - (hull - union) / hull
}

pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    inter / (area(a) + area(b) - inter)
}

pub fn norm_diff(sj: f64, si: f64) -> f64 {
    ((sj - si).clamp(-1.0, 1.0) + 1.0) / 2.0
}

/// Loss value straight from its definition. With `frozen` the per-term
/// denominators are taken from that slice instead of recomputed.
pub fn loss(fns: &[Vec<[f64; 2]>; 5], scores: &[f64], locs: &[f64], frozen: Option<&[f64]>) -> (f64, Vec<f64>) {
    let n = scores.len();
    let n_pos = locs.iter().filter(|l| **l > 0.0).count() as f64;
    let f = |k: usize, x: f64| interp(&fns[k], x);
    let mut total = 0.0;
    let mut denoms = vec![1.0; n];
    for i in 0..n {
        let (mut num, mut den) = (0.0, 1.0);
        for j in (0..n).filter(|&j| j != i) {
            let d = norm_diff(scores[j], scores[i]);
            num += f(1, d) * (1.0 - f(2, locs[j]));
            den += f(3, d);
        }
        denoms[i] = den;
        let den = frozen.map_or(den, |m| m[i]);
        total += f(0, locs[i]) - num / den * f(4, locs[i]);
    }
    (-total / n_pos, denoms)
}

/// Rank-form AP by sorting: mean precision at each positive.
pub fn ap_by_sorting(scores: &[f64], positive: &[bool]) -> f64 {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut sum) = (0.0, 0.0);
    for (rank, &i) in idx.iter().enumerate() {
        if positive[i] {
            tp += 1.0;
            sum += tp / (rank + 1) as f64;
        }
    }
    sum / positive.iter().filter(|p| **p).count() as f64
}

pub fn distinct_scores<R: Rng>(rng: &mut R, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    loop {
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        let mut sorted = s.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).all(|w| w[1] - w[0] > 1e-9) {
            return s;
        }
    }
}

pub fn random_box<R: Rng>(rng: &mut R) -> [f64; 4] {
    let w = rng.gen_range(0.1..0.4);
    let h = rng.gen_range(0.1..0.4);
    let x1 = rng.gen_range(0.0..1.0 - w);
    let y1 = rng.gen_range(0.0..1.0 - h);
    [x1, y1, x1 + w, y1 + h]
}

pub fn jitter<R: Rng>(rng: &mut R, b: &[f64; 4], scale: f64) -> [f64; 4] {
    let (w, h) = (b[2] - b[0], b[3] - b[1]);
    let mut out = [
        b[0] + rng.gen_range(-scale..scale) * w,
        b[1] + rng.gen_range(-scale..scale) * h,
        b[2] + rng.gen_range(-scale..scale) * w,
        b[3] + rng.gen_range(-scale..scale) * h,
    ];
    for c in &mut out {
        *c = c.clamp(0.0, 1.0);
    }
    out
}

/// Random detection instance for gradient checks: `n` predictions, about half
/// of them positive jitters of a ground truth.
pub struct GradInstance {
    pub boxes: Vec<[f64; 4]>,
    pub scores: Vec<f64>,
    pub gts: Vec<[f64; 4]>,
    pub labels: Vec<Label>,
}

impl GradInstance {
    pub fn random<R: Rng>(rng: &mut R, n: usize) -> Self {
        let n_gt = rng.gen_range(1..=3);
        let gts: Vec<[f64; 4]> = (0..n_gt).map(|_| random_box(rng)).collect();
        let mut boxes = Vec::new();
        let mut labels = Vec::new();
        for k in 0..n {
            if k == 0 || rng.gen_bool(0.5) {
                let g = rng.gen_range(0..n_gt);
                boxes.push(jitter(rng, &gts[g], 0.2));
                labels.push(Label::Positive(g));
            } else {
                boxes.push(random_box(rng));
                labels.push(Label::Negative);
            }
        }
        let scores = distinct_scores(rng, n, -0.5, 1.5);
        Self { boxes, scores, gts, labels }
    }

    pub fn batch(&self) -> DetectionBatch {
        let dets = self
            .boxes
            .iter()
            .zip(&self.scores)
            .map(|(b, &s)| Detection { bbox: BBox::from_array(*b).unwrap(), score: s })
            .collect();
        let gts = self.gts.iter().map(|g| BBox::from_array(*g).unwrap()).collect();
        DetectionBatch::new(dets, gts, self.labels.clone()).unwrap()
    }

    /// GIoU localization scores rescaled to [0, 1], zero for negatives.
    pub fn locs_with(&self, boxes: &[[f64; 4]]) -> Vec<f64> {
        boxes
            .iter()
            .zip(&self.labels)
            .map(|(b, l)| match l {
                Label::Positive(g) => (giou(b, &self.gts[*g]) + 1.0) / 2.0,
                Label::Negative => 0.0,
            })
            .collect()
    }

    /// True when every function input sits at least `KNOT_MARGIN` away from
    /// knots and from the score-difference clip points, and no box edge
    /// coincides with a ground-truth edge.
    pub fn well_separated(&self, fns: &[Vec<[f64; 2]>; 5]) -> bool {
        let locs = self.locs_with(&self.boxes);
        let n = self.scores.len();
        for i in 0..n {
            if locs[i] > 0.0 && (near_knot(&fns[0], locs[i]) || near_knot(&fns[2], locs[i]) || near_knot(&fns[4], locs[i])) {
                return false;
            }
            for j in (0..n).filter(|&j| j != i) {
                let diff = self.scores[j] - self.scores[i];
                if (diff.abs() - 1.0).abs() < KNOT_MARGIN {
                    return false;
                }
                let d = norm_diff(self.scores[j], self.scores[i]);
                if near_knot(&fns[1], d) || near_knot(&fns[3], d) {
                    return false;
                }
            }
            if let Label::Positive(g) = self.labels[i] {
                let (b, t) = (&self.boxes[i], &self.gts[g]);
                for p in 0..4 {
                    for q in [p % 2, p % 2 + 2] {
                        if (b[p] - t[q]).abs() < KNOT_MARGIN {
                            return false;
                        }
                    }
                    if b[p] < KNOT_MARGIN || b[p] > 1.0 - KNOT_MARGIN {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// `|a - b| <= rel * max(|a|, |b|)`, or `<= abs_floor` when the analytic value
/// is below the floor.
pub fn close(analytic: f64, fd: f64, rel: f64, abs_floor: f64) -> bool {
    if analytic.abs() < abs_floor {
        return (analytic - fd).abs() <= abs_floor;
    }
    (analytic - fd).abs() <= rel * analytic.abs().max(fd.abs())
}

pub fn control_points(params: &apsearch::LossParams) -> [Vec<[f64; 2]>; 5] {
    let fns = params.functions().unwrap();
    std::array::from_fn(|k| fns[k].points().to_vec())
}

pub const FD_STEP: f64 = 1e-5;

/// Compares the library's score and box gradients with central differences
/// of the reference loss. Blocked denominators are frozen at their value on
/// the unperturbed instance. Returns the number of entries compared.
pub fn check_gradients(params: &apsearch::LossParams, inst: &GradInstance) -> Result<usize, String> {
    let fns = control_points(params);
    let loss = apsearch::PapLoss::new(params).map_err(|e| e.to_string())?;
    let got = loss.compute(&inst.batch()).map_err(|e| e.to_string())?;
    let locs = inst.locs_with(&inst.boxes);
    let (value, denoms) = self::loss(&fns, &inst.scores, &locs, None);
    if (value - got.value).abs() > 1e-12 * value.abs().max(1.0) {
        return Err(format!("value {} vs reference {value}", got.value));
    }
    let frozen = params.block_denominator.then_some(denoms.as_slice());
    let h = FD_STEP;
    let mut compared = 0;

    for k in 0..inst.scores.len() {
        let (mut up, mut dn) = (inst.scores.clone(), inst.scores.clone());
        up[k] += h;
        dn[k] -= h;
        let fd = (self::loss(&fns, &up, &locs, frozen).0 - self::loss(&fns, &dn, &locs, frozen).0) / (2.0 * h);
        if !close(got.score_grads[k], fd, 1e-4, 1e-6) {
            return Err(format!("score grad {k}: analytic {} fd {fd}", got.score_grads[k]));
        }
        compared += 1;
    }
    let lambda = params.lambda();
    for k in 0..inst.boxes.len() {
        for c in 0..4 {
            let (mut up, mut dn) = (inst.boxes.clone(), inst.boxes.clone());
            up[k][c] += h;
            dn[k][c] -= h;
            let lu = self::loss(&fns, &inst.scores, &inst.locs_with(&up), frozen).0;
            let ld = self::loss(&fns, &inst.scores, &inst.locs_with(&dn), frozen).0;
            let fd = lambda * (lu - ld) / (2.0 * h);
            if !close(got.box_grads[k][c], fd, 1e-4, 1e-6) {
                return Err(format!("box grad {k}/{c}: analytic {} fd {fd}", got.box_grads[k][c]));
            }
            compared += 1;
        }
    }
    Ok(compared)
}

/// Random valid loss parameters with every scalar in `[0.05, 0.95]`.
pub fn random_params<R: Rng>(rng: &mut R, block: bool) -> apsearch::LossParams {
    let d = apsearch::LossParams::dim_for(5);
    let flat: Vec<f64> = (0..d).map(|_| rng.gen_range(0.05..0.95)).collect();
    apsearch::LossParams::from_flat(&flat, 5, apsearch::Measurement::Giou, block).unwrap()
}

/// Draws instances until one clears every margin.
pub fn separated_instance<R: Rng>(rng: &mut R, params: &apsearch::LossParams, max_n: usize) -> GradInstance {
    let fns = control_points(params);
    loop {
        let n = rng.gen_range(2..=max_n);
        let inst = GradInstance::random(rng, n);
        if inst.well_separated(&fns) {
            return inst;
        }
    }
}
