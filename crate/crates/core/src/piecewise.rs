//! Monotone piecewise-linear functions on `[0, 1]`.
//!
//! A function with `M` segments is described by `M + 1` control points whose
//! first and last entries are pinned to `(0, 0)` and `(1, 1)`. The `M - 1` free
//! points are encoded as independent ratios in `(0, 1)`:
//!
//! ```text
//! x_k = x_{k-1} + rx_k * (1 - x_{k-1})
//! y_k = y_{k-1} + ry_k * (1 - y_{k-1})
//! ```
//!
//! so every ratio vector in the open unit cube yields a valid, monotone
//! function and the search can treat each scalar independently.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default number of segments.
pub const DEFAULT_SEGMENTS: usize = 5;

/// A monotone map of `[0, 1]` onto itself that can stand in for a step function.
pub trait UnitFunction {
    /// Value at `x`; callers guarantee `x` is in `[0, 1]`.
    fn value_at(&self, x: f64) -> f64;
    /// Derivative at `x` under the half-open segment convention.
    fn slope_at(&self, x: f64) -> f64;
}

/// Independent ratio parameters, `M - 1` pairs `(rx, ry)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RatioParams {
    pub ratios: Vec<[f64; 2]>,
}

impl RatioParams {
    pub fn new(ratios: Vec<[f64; 2]>) -> Self {
        Self { ratios }
    }

    /// Number of segments these ratios describe.
    pub fn segments(&self) -> usize {
        self.ratios.len() + 1
    }

    pub fn validate(&self, segments: usize) -> Result<()> {
        if segments == 0 {
            return Err(invalid("piecewise function needs at least one segment"));
        }
        if self.ratios.len() != segments - 1 {
            return Err(invalid(format!(
                "expected {} ratio pairs for {} segments, got {}",
                segments - 1,
                segments,
                self.ratios.len()
            )));
        }
        for (k, pair) in self.ratios.iter().enumerate() {
            for &r in pair {
                if !(r > 0.0 && r < 1.0) {
                    return Err(Error::ConstraintViolation(format!(
                        "ratio {r} at position {} is outside (0, 1)",
                        k + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for [rx, ry] in &self.ratios {
            out.push(*rx);
            out.push(*ry);
        }
    }

    pub fn from_flat(values: &[f64]) -> Result<Self> {
        if !values.len().is_multiple_of(2) {
            return Err(invalid("flat ratio vector must have even length"));
        }
        Ok(Self {
            ratios: values.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        })
    }
}

/// Ratios whose function is the identity, with knots evenly spaced at `k / M`.
pub fn identity_params(segments: usize) -> Result<RatioParams> {
    if segments < 2 {
        return Err(invalid("identity parameters need at least two segments"));
    }
    let m = segments as f64;
    let ratios = (1..segments)
        .map(|k| {
            let prev = (k - 1) as f64 / m;
            let r = (k as f64 / m - prev) / (1.0 - prev);
            [r, r]
        })
        .collect();
    Ok(RatioParams { ratios })
}

/// Control points `(x_k, y_k)`, `k = 0..=M`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct PiecewiseFn {
    points: Vec<[f64; 2]>,
    /// `(1 - x_k, 1 - y_k)` kept as running products when built from ratios,
    /// so the ratios stay recoverable when the points crowd against 1.
    remaining: Vec<[f64; 2]>,
}

impl PartialEq for PiecewiseFn {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points
    }
}

impl PiecewiseFn {
    pub fn build(params: &RatioParams, segments: usize) -> Result<Self> {
        params.validate(segments)?;
        let mut points = Vec::with_capacity(segments + 1);
        points.push([0.0, 0.0]);
        let mut remaining = Vec::with_capacity(segments + 1);
        remaining.push([1.0, 1.0]);
        let (mut x, mut y) = (0.0f64, 0.0f64);
        let (mut tx, mut ty) = (1.0f64, 1.0f64);
        for [rx, ry] in &params.ratios {
            x += rx * (1.0 - x);
            y += ry * (1.0 - y);
            tx *= 1.0 - rx;
            ty *= 1.0 - ry;
            points.push([x, y]);
            remaining.push([tx, ty]);
        }
        points.push([1.0, 1.0]);
        remaining.push([0.0, 0.0]);
        let mut f = Self::from_points(points)?;
        f.remaining = remaining;
        Ok(f)
    }

    /// Validates a list of control points against the end-point and
    /// monotonicity constraints.
    pub fn from_points(points: Vec<[f64; 2]>) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("need at least two control points"));
        }
        if points[0] != [0.0, 0.0] || points[points.len() - 1] != [1.0, 1.0] {
            return Err(Error::ConstraintViolation(
                "end points must be (0, 0) and (1, 1)".into(),
            ));
        }
        for w in points.windows(2) {
            let ([x0, y0], [x1, y1]) = (w[0], w[1]);
            if !(x0.is_finite() && y0.is_finite() && x1.is_finite() && y1.is_finite()) {
                return Err(invalid("non-finite control point"));
            }
            if !(x1 > x0) {
                return Err(Error::ConstraintViolation(format!(
                    "knots must be strictly increasing, got {x0} then {x1}"
                )));
            }
            if y1 < y0 {
                return Err(Error::ConstraintViolation(format!(
                    "function must be non-decreasing, got {y0} then {y1}"
                )));
            }
        }
        let remaining = points.iter().map(|[x, y]| [1.0 - x, 1.0 - y]).collect();
        Ok(Self { points, remaining })
    }

    pub fn identity(segments: usize) -> Self {
        match identity_params(segments) {
            Ok(p) => Self::build(&p, segments).expect("identity ratios are valid"),
            Err(_) => Self::from_points(vec![[0.0, 0.0], [1.0, 1.0]]).expect("unit diagonal is valid"),
        }
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn segments(&self) -> usize {
        self.points.len() - 1
    }

    /// Recovers the ratio parameters this function was built from.
    pub fn to_ratios(&self) -> RatioParams {
        let m = self.segments();
        let ratios = (1..m)
            .map(|k| {
                let [px, py] = self.remaining[k - 1];
                let [x, y] = self.remaining[k];
                [1.0 - x / px, 1.0 - y / py]
            })
            .collect();
        RatioParams { ratios }
    }

    /// Segment index owning `x`: `x_k <= x < x_{k+1}`, with `x = 1` in the last.
    fn segment_of(&self, x: f64) -> usize {
        let idx = self.points.partition_point(|p| p[0] <= x);
        idx.saturating_sub(1).min(self.segments() - 1)
    }

    fn segment_slope(&self, k: usize) -> f64 {
        let ([x0, y0], [x1, y1]) = (self.points[k], self.points[k + 1]);
        (y1 - y0) / (x1 - x0)
    }

    pub fn eval(&self, x: f64) -> Result<f64> {
        check_domain(x)?;
        Ok(self.value_at(x))
    }

    pub fn slope(&self, x: f64) -> Result<f64> {
        check_domain(x)?;
        Ok(self.slope_at(x))
    }

    pub fn max_slope(&self) -> f64 {
        (0..self.segments()).map(|k| self.segment_slope(k)).fold(0.0, f64::max)
    }
}

impl UnitFunction for PiecewiseFn {
    fn value_at(&self, x: f64) -> f64 {
        let k = self.segment_of(x);
        if x >= 1.0 {
            return 1.0;
        }
        let [x0, y0] = self.points[k];
        y0 + self.segment_slope(k) * (x - x0)
    }

    fn slope_at(&self, x: f64) -> f64 {
        self.segment_slope(self.segment_of(x))
    }
}

impl TryFrom<Vec<[f64; 2]>> for PiecewiseFn {
    type Error = Error;

    fn try_from(points: Vec<[f64; 2]>) -> Result<Self> {
        Self::from_points(points)
    }
}

impl From<PiecewiseFn> for Vec<[f64; 2]> {
    fn from(f: PiecewiseFn) -> Self {
        f.points
    }
}

fn check_domain(x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Domain(x))
    }
}
