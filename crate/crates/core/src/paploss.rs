//! The parameterized AP loss.
//!
//! For predictions `B` with scores `s` and localization scores `l`, and five
//! monotone unit functions `f1..f5`:
//!
//! ```text
//! L = -1/|P| * sum_i [ f1(l_i) - n_i / m_i * f5(l_i) ]
//! n_i = sum_{j != i} f2(d_ji) * (1 - f3(l_j))
//! m_i = 1 + sum_{j != i} f4(d_ji)
//! d_ji = (clip(s_j - s_i, -1, 1) + 1) / 2
//! ```
//!
//! Replacing every `f` by the exact step function recovers AP, so `-L` is a
//! smooth surrogate of it. The denominator can be held constant in the
//! backward pass, and box gradients are multiplied by a separate scale
//! `lambda` before they leave the loss.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::apmetric::{DetectionBatch, Label, Measurement};
use crate::error::{invalid, Error, Result};
use crate::piecewise::{identity_params, PiecewiseFn, RatioParams, UnitFunction, DEFAULT_SEGMENTS};

/// Number of substituted step functions.
pub const N_FUNCTIONS: usize = 5;

/// `(clip(s_j - s_i, -1, 1) + 1) / 2`.
pub fn normalize_score_diff(s_j: f64, s_i: f64) -> f64 {
    ((s_j - s_i).clamp(-1.0, 1.0) + 1.0) / 2.0
}

/// Gradient scale `lambda = 10^(2 theta - 1)`, `theta` in `(0, 1)`.
pub fn lambda_from_theta(theta_lambda: f64) -> Result<f64> {
    if !(theta_lambda > 0.0 && theta_lambda < 1.0) {
        return Err(Error::ConstraintViolation(format!(
            "theta_lambda {theta_lambda} outside (0, 1)"
        )));
    }
    Ok(10f64.powf(2.0 * theta_lambda - 1.0))
}

pub fn theta_from_lambda(lambda: f64) -> Result<f64> {
    if !(lambda > 0.1 && lambda < 10.0) {
        return Err(Error::ConstraintViolation(format!("lambda {lambda} outside (0.1, 10)")));
    }
    Ok((lambda.log10() + 1.0) / 2.0)
}

/// The searched parameter set: five ratio vectors and the gradient-scale
/// parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossParamsRepr", into = "LossParamsRepr")]
pub struct LossParams {
    pub thetas: [RatioParams; N_FUNCTIONS],
    pub theta_lambda: f64,
    pub segments: usize,
    pub measurement: Measurement,
    pub block_denominator: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LossParamsRepr {
    theta1: RatioParams,
    theta2: RatioParams,
    theta3: RatioParams,
    theta4: RatioParams,
    theta5: RatioParams,
    theta_lambda: f64,
    #[serde(rename = "M")]
    m: usize,
    #[serde(default)]
    measurement: Measurement,
    #[serde(default = "default_true")]
    block_denominator: bool,
}

fn default_true() -> bool {
    true
}

impl TryFrom<LossParamsRepr> for LossParams {
    type Error = Error;

    fn try_from(r: LossParamsRepr) -> Result<Self> {
        let p = LossParams {
            thetas: [r.theta1, r.theta2, r.theta3, r.theta4, r.theta5],
            theta_lambda: r.theta_lambda,
            segments: r.m,
            measurement: r.measurement,
            block_denominator: r.block_denominator,
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<LossParams> for LossParamsRepr {
    fn from(p: LossParams) -> Self {
        let [theta1, theta2, theta3, theta4, theta5] = p.thetas;
        LossParamsRepr {
            theta1,
            theta2,
            theta3,
            theta4,
            theta5,
            theta_lambda: p.theta_lambda,
            m: p.segments,
            measurement: p.measurement,
            block_denominator: p.block_denominator,
        }
    }
}

impl LossParams {
    /// All five functions the identity, `lambda = 1`.
    pub fn identity(segments: usize, measurement: Measurement) -> Result<Self> {
        let id = identity_params(segments)?;
        Ok(Self {
            thetas: std::array::from_fn(|_| id.clone()),
            theta_lambda: 0.5,
            segments,
            measurement,
            block_denominator: true,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for t in &self.thetas {
            t.validate(self.segments)?;
        }
        lambda_from_theta(self.theta_lambda)?;
        Ok(())
    }

    /// Flat search dimension `10 (M - 1) + 1`.
    pub fn dim_for(segments: usize) -> usize {
        2 * N_FUNCTIONS * (segments - 1) + 1
    }

    pub fn dim(&self) -> usize {
        Self::dim_for(self.segments)
    }

    pub fn lambda(&self) -> f64 {
        lambda_from_theta(self.theta_lambda).expect("validated theta_lambda")
    }

    /// Layout: `theta1` pairs, ..., `theta5` pairs, `theta_lambda`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim());
        for t in &self.thetas {
            t.flatten_into(&mut out);
        }
        out.push(self.theta_lambda);
        out
    }

    pub fn from_flat(values: &[f64], segments: usize, measurement: Measurement, block_denominator: bool) -> Result<Self> {
        if segments < 1 {
            return Err(invalid("segments must be positive"));
        }
        let dim = Self::dim_for(segments);
        if values.len() != dim {
            return Err(invalid(format!("expected {dim} parameters, got {}", values.len())));
        }
        let per = 2 * (segments - 1);
        let mut thetas = Vec::with_capacity(N_FUNCTIONS);
        for k in 0..N_FUNCTIONS {
            thetas.push(RatioParams::from_flat(&values[k * per..(k + 1) * per])?);
        }
        let p = Self {
            thetas: thetas.try_into().expect("five chunks"),
            theta_lambda: values[dim - 1],
            segments,
            measurement,
            block_denominator,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn functions(&self) -> Result<[PiecewiseFn; N_FUNCTIONS]> {
        let built = self
            .thetas
            .iter()
            .map(|t| PiecewiseFn::build(t, self.segments))
            .collect::<Result<Vec<_>>>()?;
        Ok(built.try_into().expect("five functions"))
    }

    /// Every function uses `theta1`.
    pub fn shared(&self) -> Self {
        let mut p = self.clone();
        let first = p.thetas[0].clone();
        p.thetas = std::array::from_fn(|_| first.clone());
        p
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        let mut p = self.clone();
        p.theta_lambda = theta_from_lambda(lambda)?;
        Ok(p)
    }
}

impl Default for LossParams {
    fn default() -> Self {
        Self::identity(DEFAULT_SEGMENTS, Measurement::Giou).expect("default segments are valid")
    }
}

/// Hand-designed replacements for the step function.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Substitution {
    Sigmoid,
    Sqrt,
    Linear,
    Square,
}

/// Temperature of the rescaled logistic.
pub const SIGMOID_TEMPERATURE: f64 = 0.25;

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Substitution {
    pub const ALL: [Substitution; 4] = [Self::Sigmoid, Self::Sqrt, Self::Linear, Self::Square];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sigmoid => "sigmoid",
            Self::Sqrt => "sqrt",
            Self::Linear => "linear",
            Self::Square => "square",
        }
    }
}

impl FromStr for Substitution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "sqrt" => Ok(Self::Sqrt),
            "linear" => Ok(Self::Linear),
            "square" => Ok(Self::Square),
            other => Err(invalid(format!("unknown substitution `{other}`"))),
        }
    }
}

impl UnitFunction for Substitution {
    fn value_at(&self, x: f64) -> f64 {
        match self {
            Self::Linear => x,
            Self::Square => x * x,
            Self::Sqrt => x.sqrt(),
            Self::Sigmoid => {
                let t = SIGMOID_TEMPERATURE;
                let lo = logistic(-0.5 / t);
                let hi = logistic(0.5 / t);
                (logistic((x - 0.5) / t) - lo) / (hi - lo)
            }
        }
    }

    fn slope_at(&self, x: f64) -> f64 {
        match self {
            Self::Linear => 1.0,
            Self::Square => 2.0 * x,
            Self::Sqrt => 0.5 / x.sqrt(),
            Self::Sigmoid => {
                let t = SIGMOID_TEMPERATURE;
                let lo = logistic(-0.5 / t);
                let hi = logistic(0.5 / t);
                let s = logistic((x - 0.5) / t);
                s * (1.0 - s) / t / (hi - lo)
            }
        }
    }
}

/// One of the five functions plugged into the loss.
#[derive(Debug, Clone, PartialEq)]
pub enum Surrogate {
    Piecewise(PiecewiseFn),
    Handcrafted(Substitution),
    /// Exact step `x > threshold` on the normalized input; zero slope.
    Step { threshold: f64 },
}

impl UnitFunction for Surrogate {
    fn value_at(&self, x: f64) -> f64 {
        match self {
            Self::Piecewise(f) => f.value_at(x),
            Self::Handcrafted(s) => s.value_at(x),
            Self::Step { threshold } => {
                if x > *threshold {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn slope_at(&self, x: f64) -> f64 {
        match self {
            Self::Piecewise(f) => f.slope_at(x),
            Self::Handcrafted(s) => s.slope_at(x),
            Self::Step { .. } => 0.0,
        }
    }
}

impl Surrogate {
    fn hash_into(&self, h: &mut DefaultHasher) {
        match self {
            Self::Piecewise(f) => {
                0u8.hash(h);
                for [x, y] in f.points() {
                    x.to_bits().hash(h);
                    y.to_bits().hash(h);
                }
            }
            Self::Handcrafted(s) => {
                1u8.hash(h);
                s.hash(h);
            }
            Self::Step { threshold } => {
                2u8.hash(h);
                threshold.to_bits().hash(h);
            }
        }
    }
}

/// Output of a forward + backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub score_grads: Vec<f64>,
    pub box_grads: Vec<[f64; 4]>,
    pub positives_count: usize,
}

/// Gradients of the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub score_grads: Vec<f64>,
    pub box_grads: Vec<[f64; 4]>,
}

/// Intermediates kept by [`PapLoss::forward`] for the backward pass.
///
/// `d` is stored densely (`n * n`), so memory grows quadratically in the
/// batch size.
#[derive(Debug, Clone)]
pub struct LossCache {
    fingerprint: u64,
    scores: Vec<f64>,
    positive: Vec<bool>,
    /// `d[i * n + j] = normalize_score_diff(s_j, s_i)`
    d: Vec<f64>,
    l: Vec<f64>,
    /// Gradient of `l_k` with respect to the predicted box `k`.
    l_grad: Vec<[f64; 4]>,
    numer: Vec<f64>,
    denom: Vec<f64>,
    n_pos: usize,
    pub value: f64,
}

impl LossCache {
    pub fn loc_scores(&self) -> &[f64] {
        &self.l
    }

    pub fn numerators(&self) -> &[f64] {
        &self.numer
    }

    pub fn denominators(&self) -> &[f64] {
        &self.denom
    }
}

/// A ready-to-use loss: five unit functions, the box-gradient scale and the
/// localization measurement.
#[derive(Debug, Clone)]
pub struct PapLoss {
    fns: [Surrogate; N_FUNCTIONS],
    lambda: f64,
    measurement: Measurement,
    block_denominator: bool,
    fingerprint: u64,
}

impl PapLoss {
    pub fn new(params: &LossParams) -> Result<Self> {
        params.validate()?;
        let fns = params.functions()?.map(Surrogate::Piecewise);
        Ok(Self::from_parts(fns, params.lambda(), params.measurement, params.block_denominator))
    }

    /// All five functions replaced by one handcrafted substitution.
    pub fn handcrafted(kind: Substitution, measurement: Measurement, lambda: f64, block_denominator: bool) -> Self {
        let fns = std::array::from_fn(|_| Surrogate::Handcrafted(kind));
        Self::from_parts(fns, lambda, measurement, block_denominator)
    }

    /// Exact step functions on the raw inputs: `H(s_j - s_i)` becomes a step
    /// at 0.5 of the normalized difference, `H(l)` a step at 0. The loss value
    /// is then exactly `-AP`.
    pub fn heaviside(measurement: Measurement) -> Self {
        let at = |threshold| Surrogate::Step { threshold };
        let fns = [at(0.0), at(0.5), at(0.0), at(0.5), at(0.0)];
        Self::from_parts(fns, 1.0, measurement, true)
    }

    pub fn from_parts(fns: [Surrogate; N_FUNCTIONS], lambda: f64, measurement: Measurement, block_denominator: bool) -> Self {
        let mut h = DefaultHasher::new();
        for f in &fns {
            f.hash_into(&mut h);
        }
        lambda.to_bits().hash(&mut h);
        measurement.hash(&mut h);
        block_denominator.hash(&mut h);
        Self {
            fns,
            lambda,
            measurement,
            block_denominator,
            fingerprint: h.finish(),
        }
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn block_denominator(&self) -> bool {
        self.block_denominator
    }

    pub fn functions(&self) -> &[Surrogate; N_FUNCTIONS] {
        &self.fns
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self::from_parts(self.fns.clone(), lambda, self.measurement, self.block_denominator)
    }

    pub fn with_blocking(&self, block_denominator: bool) -> Self {
        Self::from_parts(self.fns.clone(), self.lambda, self.measurement, block_denominator)
    }

    pub fn forward(&self, batch: &DetectionBatch) -> Result<LossCache> {
        let n = batch.len();
        let n_pos = batch.positives();
        if n_pos == 0 {
            return Err(Error::EmptyPositive);
        }
        let [f1, f2, f3, f4, f5] = &self.fns;

        let scores = batch.scores();
        let positive: Vec<bool> = batch.labels().iter().map(Label::is_positive).collect();
        let mut l = vec![0.0; n];
        let mut l_grad = vec![[0.0; 4]; n];
        for (k, label) in batch.labels().iter().enumerate() {
            if let Label::Positive(g) = label {
                let (v, grad) = self
                    .measurement
                    .score_with_grad(&batch.predictions()[k].bbox, &batch.ground_truths()[*g])?;
                l[k] = v;
                l_grad[k] = grad;
            }
        }

        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                d[i * n + j] = normalize_score_diff(scores[j], scores[i]);
            }
        }

        let not_f3: Vec<f64> = l.iter().map(|&x| 1.0 - f3.value_at(x)).collect();
        let mut numer = vec![0.0; n];
        let mut denom = vec![1.0; n];
        let mut total = 0.0;
        for i in 0..n {
            let (a, b) = (f1.value_at(l[i]), f5.value_at(l[i]));
            if a == 0.0 && b == 0.0 && !positive[i] {
                // the term vanishes whatever the sums are
                continue;
            }
            let row = &d[i * n..(i + 1) * n];
            let (mut num, mut den) = (0.0, 1.0);
            for j in (0..n).filter(|&j| j != i) {
                num += f2.value_at(row[j]) * not_f3[j];
                den += f4.value_at(row[j]);
            }
            numer[i] = num;
            denom[i] = den;
            total += a - num / den * b;
        }
        let value = -total / n_pos as f64;
        if !value.is_finite() {
            return Err(invalid(format!("non-finite loss value {value}")));
        }

        Ok(LossCache {
            fingerprint: self.fingerprint,
            scores,
            positive,
            d,
            l,
            l_grad,
            numer,
            denom,
            n_pos,
            value,
        })
    }

    pub fn backward(&self, cache: &LossCache) -> Result<LossGrads> {
        if cache.fingerprint != self.fingerprint {
            return Err(invalid("loss cache was produced by a different loss"));
        }
        let n = cache.scores.len();
        if cache.d.len() != n * n || cache.l.len() != n || cache.numer.len() != n {
            return Err(invalid("inconsistent loss cache"));
        }
        let [f1, f2, f3, f4, f5] = &self.fns;
        let inv_p = 1.0 / cache.n_pos as f64;
        let s = &cache.scores;
        let inside = |j: usize, i: usize| (s[j] - s[i]).abs() < 1.0;

        let f5l: Vec<f64> = cache.l.iter().map(|&x| f5.value_at(x)).collect();
        let not_f3: Vec<f64> = cache.l.iter().map(|&x| 1.0 - f3.value_at(x)).collect();

        // dL/ds_k = 1/|P| sum_i f5(l_i) * d(n_i / m_i)/ds_k
        let mut score_grads = vec![0.0; n];
        for i in 0..n {
            if f5l[i] == 0.0 {
                continue;
            }
            let row = &cache.d[i * n..(i + 1) * n];
            let m = cache.denom[i];
            let coef_n = inv_p * f5l[i] / m;
            let coef_m = inv_p * f5l[i] * cache.numer[i] / (m * m);
            for j in (0..n).filter(|&j| j != i && inside(j, i)) {
                let mut g = coef_n * f2.slope_at(row[j]) * not_f3[j];
                if !self.block_denominator {
                    g -= coef_m * f4.slope_at(row[j]);
                }
                // d(d_ji)/ds_j = 1/2, d(d_ji)/ds_i = -1/2
                score_grads[j] += 0.5 * g;
                score_grads[i] -= 0.5 * g;
            }
        }

        let mut box_grads = vec![[0.0; 4]; n];
        for k in (0..n).filter(|&k| cache.positive[k]) {
            let lk = cache.l[k];
            let mut cross = 0.0;
            for i in (0..n).filter(|&i| i != k && f5l[i] != 0.0) {
                cross += f5l[i] / cache.denom[i] * f2.value_at(cache.d[i * n + k]);
            }
            let dl = -inv_p
                * (f1.slope_at(lk) - cache.numer[k] / cache.denom[k] * f5.slope_at(lk) + cross * f3.slope_at(lk));
            let scaled = self.lambda * dl;
            box_grads[k] = cache.l_grad[k].map(|g| scaled * g);
        }

        if score_grads.iter().any(|g| !g.is_finite()) || box_grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(invalid("non-finite loss gradient"));
        }
        Ok(LossGrads { score_grads, box_grads })
    }

    /// Forward and backward in one call.
    pub fn compute(&self, batch: &DetectionBatch) -> Result<LossResult> {
        let cache = self.forward(batch)?;
        let grads = self.backward(&cache)?;
        Ok(LossResult {
            value: cache.value,
            score_grads: grads.score_grads,
            box_grads: grads.box_grads,
            positives_count: cache.n_pos,
        })
    }
}
