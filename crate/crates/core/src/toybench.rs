//! Synthetic single-class detection task used as the inner training loop.
//!
//! Each scene holds a few ground-truth boxes and a fixed set of candidate
//! (anchor) boxes: jittered copies of the ground truths plus uniform
//! background boxes. A candidate's feature vector is laid out as
//!
//! ```text
//! [x1, y1, x2, y2, iou~, tx~, ty~, tw~, th~, z_1, z_2, ...]
//! ```
//!
//! where `iou~` is a noisy copy of the candidate's best IoU, `t*~` are noisy
//! regression targets towards the best-overlapping ground truth, and `z_k`
//! are Gaussian distractors. The vector is truncated to the configured width.
//!
//! The "detector" is a one-hidden-layer network mapping features to a score
//! logit and four box deltas that refine the anchor.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::apmetric::{self, assign, Detection, DetectionBatch, Label};
use crate::error::{invalid, Error, Result};
use crate::geometry::{self, BBox};
use crate::optim::Adam;
use crate::paploss::PapLoss;
use crate::seed;

/// Smallest width/height a refined box may take.
pub const MIN_BOX_SIZE: f64 = 1e-3;
const MAX_CENTER_SHIFT: f64 = 1.0;
const MAX_LOG_SCALE: f64 = 2.0;
const N_OUTPUTS: usize = 5;
const MIN_FEATURES: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub scenes: usize,
    #[serde(alias = "G_max")]
    pub g_max: usize,
    /// Candidates per scene.
    #[serde(alias = "A")]
    pub anchors: usize,
    /// Feature width.
    #[serde(alias = "F")]
    pub features: usize,
    /// Jitter standard deviation relative to the ground-truth size.
    pub noise: f64,
    pub seed: u64,
    pub eval_fraction: f64,
    pub iou_threshold: f64,
    /// Standard deviation of the noise on the IoU and regression-hint features.
    pub feature_noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            scenes: 200,
            g_max: 3,
            anchors: 16,
            features: 12,
            noise: 0.15,
            seed: 0,
            eval_fraction: 0.25,
            iou_threshold: apmetric::DEFAULT_IOU_THRESHOLD,
            feature_noise: 0.1,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.scenes < 2 {
            return bad(format!("need at least 2 scenes, got {}", self.scenes));
        }
        if self.g_max == 0 {
            return bad("G_max must be positive".into());
        }
        if self.anchors < self.g_max {
            return bad(format!("{} anchors cannot cover {} ground truths", self.anchors, self.g_max));
        }
        if self.features < MIN_FEATURES {
            return bad(format!("feature width must be at least {MIN_FEATURES}"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be non-negative", self.noise));
        }
        if !(self.feature_noise >= 0.0 && self.feature_noise.is_finite()) {
            return bad(format!("feature noise {} must be non-negative", self.feature_noise));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad(format!("eval fraction {} outside (0, 1)", self.eval_fraction));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return bad(format!("iou threshold {} outside (0, 1)", self.iou_threshold));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub ground_truths: Vec<BBox>,
    pub candidates: Vec<BBox>,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<Label>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub train: Vec<Scene>,
    pub eval: Vec<Scene>,
}

impl Dataset {
    pub fn feature_dim(&self) -> usize {
        self.config.features
    }
}

fn uniform_box(rng: &mut ChaCha8Rng, min_size: f64, max_size: f64) -> BBox {
    let w = rng.gen_range(min_size..max_size);
    let h = rng.gen_range(min_size..max_size);
    let x1 = rng.gen_range(0.0..1.0 - w);
    let y1 = rng.gen_range(0.0..1.0 - h);
    BBox { x1, y1, x2: x1 + w, y2: y1 + h }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn jitter(src: &BBox, noise: f64, rng: &mut ChaCha8Rng) -> Option<BBox> {
    let (w, h) = (src.width(), src.height());
    let mut c = src.to_array();
    for (k, v) in c.iter_mut().enumerate() {
        let scale = if k % 2 == 0 { w } else { h };
        *v = (*v + noise * scale * gauss(rng)).clamp(0.0, 1.0);
    }
    let b = BBox { x1: c[0], y1: c[1], x2: c[2], y2: c[3] };
    (b.width() >= 0.02 && b.height() >= 0.02).then_some(b)
}

/// Regression targets from `anchor` to `gt`: centre offsets in anchor units
/// and log size ratios.
fn regression_targets(anchor: &BBox, gt: &BBox) -> [f64; 4] {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (gw, gh) = (gt.width(), gt.height());
    let acx = (anchor.x1 + anchor.x2) / 2.0;
    let acy = (anchor.y1 + anchor.y2) / 2.0;
    let gcx = (gt.x1 + gt.x2) / 2.0;
    let gcy = (gt.y1 + gt.y2) / 2.0;
    [(gcx - acx) / aw, (gcy - acy) / ah, (gw / aw).ln(), (gh / ah).ln()]
}

fn generate_scene(cfg: &DatasetConfig, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let n_gt = rng.gen_range(1..=cfg.g_max);
    let ground_truths: Vec<BBox> = (0..n_gt).map(|_| uniform_box(rng, 0.1, 0.4)).collect();

    let n_jittered = (cfg.anchors / 2).max(n_gt).min(cfg.anchors);
    let mut candidates = Vec::with_capacity(cfg.anchors);
    for c in 0..n_jittered {
        let src = &ground_truths[c % n_gt];
        let mut chosen = None;
        for _ in 0..64 {
            if let Some(b) = jitter(src, cfg.noise, rng) {
                // the first copy of every ground truth must be assignable
                if c >= n_gt || geometry::iou(&b, src)? >= cfg.iou_threshold {
                    chosen = Some(b);
                    break;
                }
            }
        }
        candidates.push(chosen.unwrap_or(*src));
    }
    while candidates.len() < cfg.anchors {
        candidates.push(uniform_box(rng, 0.05, 0.5));
    }
    candidates.shuffle(rng);

    let labels = assign(&candidates, &ground_truths, cfg.iou_threshold)?;
    let mut features = Vec::with_capacity(candidates.len());
    for cand in &candidates {
        let mut best = (0usize, 0.0f64);
        for (g, gt) in ground_truths.iter().enumerate() {
            let v = geometry::iou(cand, gt)?;
            if v > best.1 {
                best = (g, v);
            }
        }
        let targets = if best.1 > 0.0 {
            regression_targets(cand, &ground_truths[best.0]).map(|t| t.clamp(-2.0, 2.0))
        } else {
            [0.0; 4]
        };
        let mut f = Vec::with_capacity(cfg.features.max(9));
        f.extend_from_slice(&cand.to_array());
        f.push(best.1 + cfg.feature_noise * gauss(rng));
        for t in targets {
            f.push(t + cfg.feature_noise * gauss(rng));
        }
        while f.len() < cfg.features {
            f.push(gauss(rng));
        }
        f.truncate(cfg.features);
        features.push(f);
    }
    Ok(Scene { ground_truths, candidates, features, labels })
}

/// Every ground truth must have a candidate at or above the assignment
/// threshold.
pub fn check_learnable(scene: &Scene, iou_threshold: f64) -> Result<()> {
    for (g, gt) in scene.ground_truths.iter().enumerate() {
        let mut covered = false;
        for c in &scene.candidates {
            if geometry::iou(c, gt)? >= iou_threshold {
                covered = true;
                break;
            }
        }
        if !covered {
            return Err(Error::Config(format!("ground truth {g} has no assignable candidate")));
        }
    }
    Ok(())
}

/// Deterministic train/eval datasets from `cfg.seed`.
pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seed::rng(cfg.seed);
    let mut scenes = Vec::with_capacity(cfg.scenes);
    for _ in 0..cfg.scenes {
        let s = generate_scene(cfg, &mut rng)?;
        check_learnable(&s, cfg.iou_threshold)?;
        scenes.push(s);
    }
    let n_eval = ((cfg.scenes as f64 * cfg.eval_fraction).round() as usize).clamp(1, cfg.scenes - 1);
    let eval = scenes.split_off(cfg.scenes - n_eval);
    Ok(Dataset { config: cfg.clone(), train: scenes, eval })
}

/// One-hidden-layer network: features -> tanh(hidden) -> (logit, 4 deltas).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    features: usize,
    hidden: usize,
    /// `w1 (hidden x features) | b1 (hidden) | w2 (5 x hidden) | b2 (5)`
    params: Vec<f64>,
}

/// Per-candidate intermediates needed to backpropagate into the weights.
struct Trace {
    hidden: Vec<f64>,
    score: f64,
    /// `d box_coord / d delta`, rows indexed by coordinate.
    box_jac: [[f64; 4]; 4],
}

impl ToyModel {
    pub fn zeros(features: usize, hidden: usize) -> Self {
        let n = hidden * features + hidden + N_OUTPUTS * hidden + N_OUTPUTS;
        Self { features, hidden, params: vec![0.0; n] }
    }

    pub fn init(features: usize, hidden: usize, seed: u64) -> Self {
        let mut m = Self::zeros(features, hidden);
        let mut rng = seed::rng(seed);
        let s1 = 1.0 / (features as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        let (w1, w2) = (m.w1_range(), m.w2_range());
        for p in &mut m.params[w1] {
            *p = s1 * gauss(&mut rng);
        }
        for (k, p) in m.params[w2].iter_mut().enumerate() {
            // score row starts moderate, box rows start near the anchors
            let scale = if k < hidden { 0.1 } else { 0.01 };
            *p = scale * s2 * gauss(&mut rng);
        }
        m
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.features
    }

    fn w1_range(&self) -> std::ops::Range<usize> {
        0..self.hidden * self.features
    }

    fn b1_range(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.features;
        s..s + self.hidden
    }

    fn w2_range(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.features + self.hidden;
        s..s + N_OUTPUTS * self.hidden
    }

    fn b2_range(&self) -> std::ops::Range<usize> {
        let s = self.hidden * self.features + self.hidden + N_OUTPUTS * self.hidden;
        s..s + N_OUTPUTS
    }

    fn candidate_forward(&self, x: &[f64], anchor: &BBox) -> (Detection, Trace) {
        let (w1, b1) = (&self.params[self.w1_range()], &self.params[self.b1_range()]);
        let (w2, b2) = (&self.params[self.w2_range()], &self.params[self.b2_range()]);
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &w1[h * self.features..(h + 1) * self.features];
                (b1[h] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()).tanh()
            })
            .collect();
        let mut out = [0.0; N_OUTPUTS];
        for (o, v) in out.iter_mut().enumerate() {
            let row = &w2[o * self.hidden..(o + 1) * self.hidden];
            *v = b2[o] + row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
        }
        let score = 1.0 / (1.0 + (-out[0]).exp());
        let (bbox, box_jac) = decode(anchor, [out[1], out[2], out[3], out[4]]);
        (Detection { bbox, score }, Trace { hidden, score, box_jac })
    }

    fn check_dim(&self, scene: &Scene) -> Result<()> {
        if let Some(f) = scene.features.iter().find(|f| f.len() != self.features) {
            return Err(invalid(format!(
                "feature width {} does not match model width {}",
                f.len(),
                self.features
            )));
        }
        if scene.features.len() != scene.candidates.len() || scene.labels.len() != scene.candidates.len() {
            return Err(invalid("scene candidates, features and labels differ in length"));
        }
        Ok(())
    }
}

/// Applies centre/size deltas to an anchor and clamps the result into the
/// unit square. Returns the box and `d coord / d delta`.
fn decode(anchor: &BBox, delta: [f64; 4]) -> (BBox, [[f64; 4]; 4]) {
    let (w, h) = (anchor.width(), anchor.height());
    let cx = (anchor.x1 + anchor.x2) / 2.0;
    let cy = (anchor.y1 + anchor.y2) / 2.0;

    let clip = |v: f64, lim: f64| if v.abs() > lim { (v.clamp(-lim, lim), 0.0) } else { (v, 1.0) };
    let (dx, gx) = clip(delta[0], MAX_CENTER_SHIFT);
    let (dy, gy) = clip(delta[1], MAX_CENTER_SHIFT);
    let (dw, gw) = clip(delta[2], MAX_LOG_SCALE);
    let (dh, gh) = clip(delta[3], MAX_LOG_SCALE);

    let (pcx, pcy) = (cx + dx * w, cy + dy * h);
    let (pw, ph) = (w * dw.exp(), h * dh.exp());
    let mut c = [pcx - pw / 2.0, pcy - ph / 2.0, pcx + pw / 2.0, pcy + ph / 2.0];
    let mut jac = [
        [w * gx, 0.0, -pw / 2.0 * gw, 0.0],
        [0.0, h * gy, 0.0, -ph / 2.0 * gh],
        [w * gx, 0.0, pw / 2.0 * gw, 0.0],
        [0.0, h * gy, 0.0, ph / 2.0 * gh],
    ];
    for k in 0..4 {
        if !(0.0..=1.0).contains(&c[k]) {
            c[k] = c[k].clamp(0.0, 1.0);
            jac[k] = [0.0; 4];
        }
    }
    for (lo, hi) in [(0, 2), (1, 3)] {
        if c[hi] - c[lo] < MIN_BOX_SIZE {
            if c[lo] + MIN_BOX_SIZE <= 1.0 {
                c[hi] = c[lo] + MIN_BOX_SIZE;
            } else {
                c[lo] = c[hi] - MIN_BOX_SIZE;
            }
            jac[lo] = [0.0; 4];
            jac[hi] = [0.0; 4];
        }
    }
    (BBox { x1: c[0], y1: c[1], x2: c[2], y2: c[3] }, jac)
}

/// Runs the detector on every candidate of `scene`; labels are the scene's
/// precomputed assignment.
pub fn model_forward(model: &ToyModel, scene: &Scene) -> Result<DetectionBatch> {
    Ok(forward_with_trace(model, scene)?.0)
}

fn forward_with_trace(model: &ToyModel, scene: &Scene) -> Result<(DetectionBatch, Vec<Trace>)> {
    model.check_dim(scene)?;
    let (dets, traces): (Vec<_>, Vec<_>) = scene
        .features
        .iter()
        .zip(&scene.candidates)
        .map(|(x, a)| model.candidate_forward(x, a))
        .unzip();
    let batch = DetectionBatch::new(dets, scene.ground_truths.clone(), scene.labels.clone())?;
    Ok((batch, traces))
}

/// Concatenates several scenes into one loss batch.
fn merged_forward<'s>(model: &ToyModel, scenes: &[&'s Scene]) -> Result<(DetectionBatch, Vec<Trace>, Vec<&'s [f64]>)> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    let mut labels = Vec::new();
    let mut traces = Vec::new();
    let mut inputs = Vec::new();
    for scene in scenes {
        model.check_dim(scene)?;
        let offset = gts.len();
        for ((x, a), l) in scene.features.iter().zip(&scene.candidates).zip(&scene.labels) {
            let (d, t) = model.candidate_forward(x, a);
            dets.push(d);
            traces.push(t);
            inputs.push(x.as_slice());
            labels.push(match l {
                Label::Positive(g) => Label::Positive(g + offset),
                Label::Negative => Label::Negative,
            });
        }
        gts.extend_from_slice(&scene.ground_truths);
    }
    Ok((DetectionBatch::new(dets, gts, labels)?, traces, inputs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_scenes: usize,
    pub lr: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch_scenes: 8, lr: 0.01, hidden: 16, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_scenes == 0 || self.hidden == 0 {
            return Err(Error::Config("batch size and hidden width must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ToyModel,
    /// Mean loss over the training set before the first step.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Steps skipped because their mini-batch had no positives.
    pub skipped_steps: usize,
}

/// Mean loss over consecutive chunks of `batch_scenes` scenes; chunks without
/// positives are left out.
pub fn dataset_loss(model: &ToyModel, loss: &PapLoss, scenes: &[Scene], batch_scenes: usize) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in scenes.chunks(batch_scenes.max(1)) {
        let refs: Vec<&Scene> = chunk.iter().collect();
        let (batch, _, _) = merged_forward(model, &refs)?;
        match loss.forward(&batch) {
            Ok(c) => {
                total += c.value;
                count += 1;
            }
            Err(Error::EmptyPositive) => {}
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(Error::EmptyPositive);
    }
    Ok(total / count as f64)
}

fn diverged(step: usize, reason: impl std::fmt::Display) -> Error {
    Error::TrainingDiverged { step, reason: reason.to_string() }
}

/// Trains a freshly seeded model for `cfg.steps` Adam steps under `loss`.
pub fn train_inner(loss: &PapLoss, train_set: &[Scene], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = train_set.first().ok_or_else(|| invalid("empty training set"))?;
    let features = first.features.first().map_or(0, Vec::len);
    let mut model = ToyModel::init(features, cfg.hidden, cfg.seed);
    let initial_loss = dataset_loss(&model, loss, train_set, cfg.batch_scenes).map_err(|e| diverged(0, e))?;
    if cfg.steps == 0 {
        return Ok(TrainOutcome { model, initial_loss, final_loss: initial_loss, skipped_steps: 0 });
    }

    let mut rng = seed::rng(seed::derive(cfg.seed, 0xDA7A));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut adam = Adam::new(model.params.len());
    let mut grads = vec![0.0; model.params.len()];
    let mut skipped = 0;

    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch_scenes);
        while picked.len() < cfg.batch_scenes.min(train_set.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picked.push(&train_set[order[cursor]]);
            cursor += 1;
        }
        let (batch, traces, inputs) = merged_forward(&model, &picked).map_err(|e| diverged(step, e))?;
        let result = match loss.compute(&batch) {
            Ok(r) => r,
            Err(Error::EmptyPositive) => {
                skipped += 1;
                continue;
            }
            Err(e) => return Err(diverged(step, e)),
        };
        if !result.value.is_finite() {
            return Err(diverged(step, "non-finite loss"));
        }

        grads.iter_mut().for_each(|g| *g = 0.0);
        backprop(&model, &traces, &inputs, &result.score_grads, &result.box_grads, &mut grads);
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged(step, "non-finite weight gradient"));
        }
        adam.step(&mut model.params, &grads, cfg.lr, false);
        if model.params.iter().any(|p| !p.is_finite()) {
            return Err(diverged(step, "non-finite weights"));
        }
    }
    let final_loss = dataset_loss(&model, loss, train_set, cfg.batch_scenes).map_err(|e| diverged(cfg.steps, e))?;
    Ok(TrainOutcome { model, initial_loss, final_loss, skipped_steps: skipped })
}

fn backprop(
    model: &ToyModel,
    traces: &[Trace],
    inputs: &[&[f64]],
    score_grads: &[f64],
    box_grads: &[[f64; 4]],
    grads: &mut [f64],
) {
    let (nh, nf) = (model.hidden, model.features);
    let (r_w1, r_b1, r_w2, r_b2) = (model.w1_range(), model.b1_range(), model.w2_range(), model.b2_range());
    let w2 = &model.params[r_w2.clone()];
    let mut dh = vec![0.0; nh];
    for ((t, x), (&sg, bg)) in traces.iter().zip(inputs).zip(score_grads.iter().zip(box_grads)) {
        let mut dout = [0.0; N_OUTPUTS];
        dout[0] = sg * t.score * (1.0 - t.score);
        for c in 0..4 {
            dout[c + 1] = (0..4).map(|k| bg[k] * t.box_jac[k][c]).sum();
        }
        if dout.iter().all(|v| *v == 0.0) {
            continue;
        }
        dh.iter_mut().for_each(|v| *v = 0.0);
        for (o, &go) in dout.iter().enumerate() {
            if go == 0.0 {
                continue;
            }
            grads[r_b2.start + o] += go;
            for h in 0..nh {
                grads[r_w2.start + o * nh + h] += go * t.hidden[h];
                dh[h] += go * w2[o * nh + h];
            }
        }
        for h in 0..nh {
            let g = dh[h] * (1.0 - t.hidden[h] * t.hidden[h]);
            grads[r_b1.start + h] += g;
            let row = &mut grads[r_w1.start + h * nf..r_w1.start + (h + 1) * nf];
            for (w, v) in row.iter_mut().zip(x.iter()) {
                *w += g * v;
            }
        }
    }
}

/// Mean per-scene AP over `thresholds` on the evaluation scenes.
pub fn reward(model: &ToyModel, eval_set: &[Scene], thresholds: &[f64]) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let mut total = 0.0;
    for scene in eval_set {
        let batch = model_forward(model, scene)?;
        total += apmetric::ap_pr_area(batch.predictions(), &scene.ground_truths, thresholds)?;
    }
    Ok(total / eval_set.len() as f64)
}

/// Mean per-scene AP at each threshold separately.
pub fn ap_per_threshold(model: &ToyModel, eval_set: &[Scene], thresholds: &[f64]) -> Result<Vec<f64>> {
    thresholds
        .iter()
        .map(|t| reward(model, eval_set, std::slice::from_ref(t)))
        .collect()
}
