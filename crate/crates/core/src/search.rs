//! Outer loop of the bi-level search.
//!
//! Each round draws `S` parameter vectors from a normal distribution
//! truncated to `[0, 1]^D`, scores every sample with an inner training run, and
//! moves the distribution mean by maximizing a clipped importance-ratio
//! surrogate:
//!
//! ```text
//! J(mu) = 1/S sum_i 1/D sum_c min(rho_ic A_i, clip(rho_ic, 1-eps, 1+eps) A_i)
//! rho_ic = p(theta_ic; mu_c, sigma) / p(theta_ic; mu_t,c, sigma)
//! A_i = R_i - mean(R)
//! ```
//!
//! Ratios and clipping are taken per component.

use std::time::Instant;

use rand::distributions::{Distribution, Open01};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erf_inv};

use crate::apmetric::Measurement;
use crate::error::{invalid, Error, Result};
use crate::optim::Adam;
use crate::paploss::LossParams;
use crate::piecewise::DEFAULT_SEGMENTS;
use crate::seed;

/// Margin kept between the mean and the edges of the unit cube.
pub const MU_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UpdateConfig {
    pub iterations: usize,
    pub lr: f64,
    pub warmup: usize,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self { iterations: 100, lr: 0.01, warmup: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    #[serde(alias = "T")]
    pub rounds: usize,
    #[serde(alias = "S")]
    pub samples: usize,
    pub sigma0: f64,
    pub epsilon: f64,
    pub update: UpdateConfig,
    #[serde(alias = "M")]
    pub segments: usize,
    pub measurement: Measurement,
    pub block_denominator: bool,
    pub seed: u64,
    /// Inner trainings run concurrently within a round.
    pub jobs: usize,
    /// Fill `wall_ms` in sample records (otherwise 0, keeping histories
    /// byte-reproducible).
    pub record_timing: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            rounds: 40,
            samples: 8,
            sigma0: 0.2,
            epsilon: 0.1,
            update: UpdateConfig::default(),
            segments: DEFAULT_SEGMENTS,
            measurement: Measurement::Giou,
            block_denominator: true,
            seed: 0,
            jobs: 1,
            record_timing: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.rounds == 0 || self.samples == 0 {
            return bad("rounds and samples must be at least 1");
        }
        if !(self.sigma0 >= 0.0 && self.sigma0.is_finite()) {
            return bad("sigma0 must be non-negative");
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad("epsilon must lie in (0, 1)");
        }
        if self.segments < 2 {
            return bad("search needs at least two segments per function");
        }
        if self.jobs == 0 {
            return bad("jobs must be at least 1");
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        LossParams::dim_for(self.segments)
    }

    /// `sigma_t = sigma0 * (1 - (t - 1) / T)` for rounds `t = 1..=T`.
    pub fn sigma_at(&self, round: usize) -> f64 {
        self.sigma0 * (1.0 - (round - 1) as f64 / self.rounds as f64)
    }

    pub fn params_from_flat(&self, theta: &[f64]) -> Result<LossParams> {
        LossParams::from_flat(theta, self.segments, self.measurement, self.block_denominator)
    }

    pub fn initial_mean(&self) -> Result<Vec<f64>> {
        let mut p = LossParams::identity(self.segments, self.measurement)?;
        p.block_denominator = self.block_denominator;
        Ok(p.to_flat())
    }
}

/// Scores one parameter set (typically: train, then evaluate AP).
pub trait RewardFn: Sync {
    fn reward(&self, params: &LossParams) -> Result<f64>;
}

impl<F> RewardFn for F
where
    F: Fn(&LossParams) -> Result<f64> + Sync,
{
    fn reward(&self, params: &LossParams) -> Result<f64> {
        self(params)
    }
}

/// One line of the history stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryRecord {
    /// Distribution used to draw the samples of `round`.
    Round { round: usize, mu: Vec<f64>, sigma: f64 },
    Sample {
        round: usize,
        sample_index: usize,
        theta: Vec<f64>,
        reward: f64,
        diverged: bool,
        wall_ms: u64,
    },
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    /// Highest-reward non-diverged sample, first one on ties.
    pub best: Option<(LossParams, f64)>,
    pub history: Vec<HistoryRecord>,
    pub final_mu: Vec<f64>,
}

impl SearchOutcome {
    pub fn samples(&self) -> impl Iterator<Item = &HistoryRecord> {
        self.history.iter().filter(|r| matches!(r, HistoryRecord::Sample { .. }))
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

fn std_normal_inv_cdf(p: f64) -> f64 {
    std::f64::consts::SQRT_2 * erf_inv(2.0 * p - 1.0)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn nudge_inside(x: f64) -> f64 {
    x.clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Independent inverse-CDF draws from `N(mu_c, sigma^2)` truncated to `[0, 1]`.
pub fn sample_truncnorm<R: Rng + ?Sized>(mu: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    mu.iter()
        .map(|&m| {
            if sigma <= 0.0 {
                return m;
            }
            let lo = std_normal_cdf(-m / sigma);
            let hi = std_normal_cdf((1.0 - m) / sigma);
            let u: f64 = Open01.sample(rng);
            let z = std_normal_inv_cdf(lo + u * (hi - lo));
            nudge_inside(m + sigma * z)
        })
        .collect()
}

/// Per-component log-density of the truncated normal.
pub fn truncnorm_logpdf(x: &[f64], mu: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("sigma {sigma} must be positive")));
    }
    if x.len() != mu.len() {
        return Err(invalid("sample and mean differ in dimension"));
    }
    Ok(x.iter().zip(mu).map(|(&v, &m)| logpdf_1d(v, m, sigma)).collect())
}

fn logpdf_1d(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    let mass = std_normal_cdf((1.0 - mu) / sigma) - std_normal_cdf(-mu / sigma);
    -0.5 * z * z - 0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln() - mass.ln()
}

/// `d log p(x; mu, sigma) / d mu` for one component.
fn dlogpdf_dmu(x: f64, mu: f64, sigma: f64) -> f64 {
    let (a, b) = (-mu / sigma, (1.0 - mu) / sigma);
    let mass = std_normal_cdf(b) - std_normal_cdf(a);
    (x - mu) / (sigma * sigma) + (std_normal_pdf(b) - std_normal_pdf(a)) / (sigma * mass)
}

/// Samples and centred rewards of one round.
pub struct Round<'a> {
    pub samples: &'a [Vec<f64>],
    pub advantages: &'a [f64],
    pub mu_old: &'a [f64],
    pub sigma: f64,
    pub epsilon: f64,
}

impl Round<'_> {
    fn ratio(&self, i: usize, c: usize, mu_c: f64) -> f64 {
        let x = self.samples[i][c];
        (logpdf_1d(x, mu_c, self.sigma) - logpdf_1d(x, self.mu_old[c], self.sigma)).exp()
    }

    /// Clipped surrogate objective at `mu`.
    pub fn objective(&self, mu: &[f64]) -> f64 {
        let (s, d) = (self.samples.len() as f64, mu.len() as f64);
        let mut total = 0.0;
        for (i, &a) in self.advantages.iter().enumerate() {
            for (c, &m) in mu.iter().enumerate() {
                let rho = self.ratio(i, c, m);
                let clipped = rho.clamp(1.0 - self.epsilon, 1.0 + self.epsilon);
                total += (rho * a).min(clipped * a);
            }
        }
        total / (s * d)
    }

    /// Gradient of [`Self::objective`]; the clipped branch contributes nothing.
    pub fn gradient(&self, mu: &[f64]) -> Vec<f64> {
        let (s, d) = (self.samples.len() as f64, mu.len() as f64);
        let mut grad = vec![0.0; mu.len()];
        for (i, &a) in self.advantages.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            for (c, &m) in mu.iter().enumerate() {
                let rho = self.ratio(i, c, m);
                let active = (a > 0.0 && rho < 1.0 + self.epsilon) || (a < 0.0 && rho > 1.0 - self.epsilon);
                if active {
                    grad[c] += a * rho * dlogpdf_dmu(self.samples[i][c], m, self.sigma);
                }
            }
        }
        grad.iter_mut().for_each(|g| *g /= s * d);
        grad
    }
}

/// Learning rate of Adam iteration `it` (0-based) under linear warmup from 0.
pub fn warmup_lr(cfg: &UpdateConfig, it: usize) -> f64 {
    if it < cfg.warmup {
        cfg.lr * it as f64 / cfg.warmup as f64
    } else {
        cfg.lr
    }
}

/// One distribution-mean update; returns `mu_{t+1}`.
pub fn ppo2_update(
    samples: &[Vec<f64>],
    rewards: &[f64],
    mu_t: &[f64],
    sigma: f64,
    epsilon: f64,
    update: &UpdateConfig,
) -> Result<Vec<f64>> {
    if samples.len() < 2 {
        return Err(invalid("the update needs at least two samples"));
    }
    if samples.len() != rewards.len() {
        return Err(invalid("samples and rewards differ in length"));
    }
    if samples.iter().any(|s| s.len() != mu_t.len()) {
        return Err(invalid("sample dimension does not match the mean"));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let advantages: Vec<f64> = rewards.iter().map(|r| r - mean).collect();
    if advantages.iter().all(|a| *a == 0.0) || sigma <= 0.0 {
        return Ok(mu_t.to_vec());
    }

    let round = Round { samples, advantages: &advantages, mu_old: mu_t, sigma, epsilon };
    let mut mu = mu_t.to_vec();
    let mut adam = Adam::new(mu.len());
    for it in 0..update.iterations {
        let grad = round.gradient(&mu);
        adam.step(&mut mu, &grad, warmup_lr(update, it), true);
        for m in &mut mu {
            *m = m.clamp(MU_MARGIN, 1.0 - MU_MARGIN);
        }
    }
    Ok(mu)
}

struct Evaluated {
    reward: f64,
    diverged: bool,
    wall_ms: u64,
}

fn evaluate_samples<E: RewardFn>(cfg: &SearchConfig, evaluator: &E, thetas: &[Vec<f64>]) -> Result<Vec<Evaluated>> {
    let run = |theta: &Vec<f64>| -> Result<Evaluated> {
        let start = Instant::now();
        let outcome = cfg.params_from_flat(theta).and_then(|p| evaluator.reward(&p));
        let wall_ms = if cfg.record_timing { start.elapsed().as_millis() as u64 } else { 0 };
        match outcome {
            Ok(r) if r.is_finite() => Ok(Evaluated { reward: r, diverged: false, wall_ms }),
            Ok(_) => Ok(Evaluated { reward: 0.0, diverged: true, wall_ms }),
            Err(Error::Config(m)) => Err(Error::Config(m)),
            Err(_) => Ok(Evaluated { reward: 0.0, diverged: true, wall_ms }),
        }
    };
    if cfg.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| thetas.par_iter().map(run).collect())
    } else {
        thetas.iter().map(run).collect()
    }
}

fn pick_best(cfg: &SearchConfig, history: &[HistoryRecord]) -> Result<Option<(LossParams, f64)>> {
    let mut best: Option<(&Vec<f64>, f64)> = None;
    for r in history {
        if let HistoryRecord::Sample { theta, reward, diverged: false, .. } = r {
            if best.is_none_or(|(_, b)| *reward > b) {
                best = Some((theta, *reward));
            }
        }
    }
    best.map(|(t, r)| Ok((cfg.params_from_flat(t)?, r))).transpose()
}

/// Distribution search over loss parameters.
pub fn run_search<E: RewardFn>(cfg: &SearchConfig, evaluator: &E) -> Result<SearchOutcome> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::streams::SEARCH));
    let mut mu = cfg.initial_mean()?;
    let mut history = Vec::new();

    for round in 1..=cfg.rounds {
        let sigma = cfg.sigma_at(round);
        history.push(HistoryRecord::Round { round, mu: mu.clone(), sigma });
        let thetas: Vec<Vec<f64>> = (0..cfg.samples).map(|_| sample_truncnorm(&mu, sigma, &mut rng)).collect();
        let evaluated = evaluate_samples(cfg, evaluator, &thetas)?;
        let rewards: Vec<f64> = evaluated.iter().map(|e| e.reward).collect();
        for (i, (theta, e)) in thetas.iter().zip(evaluated).enumerate() {
            history.push(HistoryRecord::Sample {
                round,
                sample_index: i,
                theta: theta.clone(),
                reward: e.reward,
                diverged: e.diverged,
                wall_ms: e.wall_ms,
            });
        }
        if cfg.samples >= 2 {
            mu = ppo2_update(&thetas, &rewards, &mu, sigma, cfg.epsilon, &cfg.update)?;
        }
    }
    let best = pick_best(cfg, &history)?;
    Ok(SearchOutcome { best, history, final_mu: mu })
}

/// Baseline with the same evaluation budget: samples uniform on `(0, 1)^D`,
/// no distribution update. Sample records are grouped `cfg.samples` per round.
pub fn random_search<E: RewardFn>(cfg: &SearchConfig, budget: usize, evaluator: &E) -> Result<SearchOutcome> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(cfg.seed, seed::streams::RANDOM_SEARCH));
    let dim = cfg.dim();
    let mut history = Vec::with_capacity(budget);
    let mut done = 0;
    let mut round = 0;
    while done < budget {
        round += 1;
        let n = cfg.samples.min(budget - done);
        let thetas: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| Open01.sample(&mut rng)).collect())
            .collect();
        let evaluated = evaluate_samples(cfg, evaluator, &thetas)?;
        for (i, (theta, e)) in thetas.into_iter().zip(evaluated).enumerate() {
            history.push(HistoryRecord::Sample {
                round,
                sample_index: i,
                theta,
                reward: e.reward,
                diverged: e.diverged,
                wall_ms: e.wall_ms,
            });
        }
        done += n;
    }
    let best = pick_best(cfg, &history)?;
    Ok(SearchOutcome { best, history, final_mu: Vec::new() })
}

/// `(round, best reward so far)` for every round that has samples.
pub fn best_so_far(history: &[HistoryRecord]) -> Vec<(usize, f64)> {
    let mut curve: Vec<(usize, f64)> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for r in history {
        if let HistoryRecord::Sample { round, reward, .. } = r {
            best = best.max(*reward);
            match curve.last_mut() {
                Some((last, v)) if *last == *round => *v = best,
                _ => curve.push((*round, best)),
            }
        }
    }
    curve
}
