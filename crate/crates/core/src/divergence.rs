//! Burg-entropy divergence geometry around the uniform empirical weights.
//!
//! For weights `w` on `n` points the ball statistic is `−2 Σ log(n w_i)`,
//! i.e. `2n` times the Burg-entropy divergence `−(1/n) Σ log(n w_i)` from
//! `w` to the uniform weights. A weight vector with a zero entry has infinite
//! statistic; this is reported as `f64::INFINITY`, never as an error.

use crate::error::{Error, Result};
use crate::stats::chi2_quantile;

/// Tolerance on the simplex equality `Σ w_i = 1`.
pub const SIMPLEX_TOL: f64 = 1e-10;
/// Slack allowed on the divergence constraint when testing membership.
pub const BALL_TOL: f64 = 1e-8;

/// A point of the probability simplex over the sample indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityWeights(Vec<f64>);

impl ProbabilityWeights {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::Domain("weight vector is empty".into()));
        }
        if let Some(i) = w.iter().position(|&x| !(x >= 0.0) || !x.is_finite()) {
            return Err(Error::Domain(format!(
                "weight {i} is {} (must be >= 0)",
                w[i]
            )));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain(format!("weights sum to {total}, expected 1")));
        }
        Ok(ProbabilityWeights(w))
    }

    /// Rescales a nonnegative vector onto the simplex.
    pub fn normalized(mut w: Vec<f64>) -> Result<Self> {
        let total: f64 = w.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::Domain(
                "cannot normalize weights with zero total".into(),
            ));
        }
        for x in w.iter_mut() {
            *x /= total;
        }
        Self::new(w)
    }

    pub fn uniform(n: usize) -> Self {
        ProbabilityWeights(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `Σ w_i c_i`.
    pub fn dot(&self, c: &[f64]) -> f64 {
        self.0.iter().zip(c).map(|(w, c)| w * c).sum()
    }

    /// Exact total-variation distance to the uniform weights.
    pub fn tv_to_uniform(&self) -> f64 {
        let u = 1.0 / self.0.len() as f64;
        0.5 * self.0.iter().map(|w| (w - u).abs()).sum::<f64>()
    }
}

impl AsRef<[f64]> for ProbabilityWeights {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// The set `{w : −2 Σ log(n w_i) ≤ threshold}` on the `n`-simplex, with the
/// threshold set to the `1 − beta` χ² quantile with `df` degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceBall {
    pub df: u32,
    pub beta: f64,
    pub threshold: f64,
    pub n: usize,
}

impl DivergenceBall {
    pub fn calibrated(df: u32, beta: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Domain(format!(
                "need at least two observations, got {n}"
            )));
        }
        Ok(DivergenceBall {
            df,
            beta,
            threshold: chi2_quantile(df, beta)?,
            n,
        })
    }

    /// A ball with an explicit threshold, bypassing χ² calibration
    /// (`df = 0`, `beta = NaN` mark it as uncalibrated).
    pub fn with_threshold(threshold: f64, n: usize) -> Result<Self> {
        if !(threshold >= 0.0) || !threshold.is_finite() {
            return Err(Error::Domain(format!(
                "threshold must be finite and >= 0, got {threshold}"
            )));
        }
        if n < 2 {
            return Err(Error::Domain(format!(
                "need at least two observations, got {n}"
            )));
        }
        Ok(DivergenceBall {
            df: 0,
            beta: f64::NAN,
            threshold,
            n,
        })
    }

    /// Radius in divergence units, `threshold / (2n)`.
    pub fn radius(&self) -> f64 {
        self.threshold / (2.0 * self.n as f64)
    }
}

/// `−2 Σ log(n w_i)`, or `+∞` if any weight is zero.
pub fn burg_statistic(w: &ProbabilityWeights) -> f64 {
    burg_statistic_raw(w.as_slice())
}

pub(crate) fn burg_statistic_raw(w: &[f64]) -> f64 {
    let n = w.len() as f64;
    let mut s = 0.0;
    for &wi in w {
        if wi <= 0.0 {
            return f64::INFINITY;
        }
        s -= 2.0 * (n * wi).ln();
    }
    s
}

/// Membership test with [`BALL_TOL`] slack; also returns
/// `threshold − statistic` (negative outside, `−∞` on the boundary of the simplex).
pub fn ball_contains(w: &ProbabilityWeights, ball: &DivergenceBall) -> Result<(bool, f64)> {
    if w.len() != ball.n {
        return Err(Error::Dimension {
            what: "weights vs ball size",
            expected: ball.n,
            got: w.len(),
        });
    }
    let slack = ball.threshold - burg_statistic(w);
    Ok((slack >= -BALL_TOL, slack))
}

/// Pinsker upper bound on the total-variation distance to uniform weights:
/// `sqrt(KL / 2)` with `KL = −(1/n) Σ log(n w_i)`.
pub fn pinsker_tv_bound(w: &ProbabilityWeights) -> f64 {
    let kl = burg_statistic(w) / (2.0 * w.len() as f64);
    // Rounding can push the statistic a hair below zero near uniform weights.
    (kl.max(0.0) / 2.0).sqrt()
}

/// Checks the Pinsker inequality `TV(w, uniform) ≤ bound + 1e-10`.
pub fn pinsker_holds(w: &ProbabilityWeights) -> bool {
    w.tv_to_uniform() <= pinsker_tv_bound(w) + 1e-10
}
