//! Linear objectives over the divergence ball.
//!
//! `max Σ w_i c_i` subject to `−2 Σ log(n w_i) ≤ τ`, `Σ w_i = 1` has the
//! stationarity condition `w_i = 2λ / (μ − c_i)` with `μ > max_i c_i` and
//! `λ ≥ 0`. For fixed `λ` the simplex equation `Σ 2λ/(μ − c_i) = 1` is
//! monotone in `μ` and is solved by Newton iteration (bisection as a
//! fallback); the outer equation `−2 Σ log(n w_i(λ)) = τ` is monotone in
//! `λ` and is solved by safeguarded Newton on `log λ` inside a bracket.
//!
//! Costs are shifted and scaled to `d_i = (max c − c_i) / range(c) ∈ [0, 1]`
//! before solving so the answer is exactly equivariant under `a·c + b`.

use crate::divergence::{burg_statistic_raw, DivergenceBall, ProbabilityWeights};
use crate::error::{Error, Result};

/// Target accuracy on both the simplex and the divergence residual.
pub const DUAL_TOL: f64 = 1e-9;
const MAX_OUTER: usize = 300;
const MAX_INNER: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSolution {
    pub value: f64,
    pub weights: ProbabilityWeights,
    /// Multiplier of the divergence constraint.
    pub dual_lambda: f64,
    /// Multiplier of the simplex constraint.
    pub dual_mu: f64,
    pub kkt_residual: f64,
}

impl InnerSolution {
    fn uniform(c: &[f64]) -> Self {
        let weights = ProbabilityWeights::uniform(c.len());
        InnerSolution {
            value: weights.dot(c),
            weights,
            dual_lambda: 0.0,
            dual_mu: 0.0,
            kkt_residual: 0.0,
        }
    }

    /// True when the divergence constraint is binding (nonzero multiplier).
    pub fn is_active(&self) -> bool {
        self.dual_lambda > 0.0
    }
}

fn validate(c: &[f64], ball: &DivergenceBall) -> Result<()> {
    if c.len() < 2 {
        return Err(Error::Domain(format!(
            "need at least two cost entries, got {}",
            c.len()
        )));
    }
    if c.len() != ball.n {
        return Err(Error::Dimension {
            what: "cost vector vs ball size",
            expected: ball.n,
            got: c.len(),
        });
    }
    if c.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("cost vector has non-finite entries".into()));
    }
    Ok(())
}

/// Solves `Σ 2λ/(m + d_i) = 1` for `m ∈ [2λ, 2λn]` (here `m = μ − max c` in
/// scaled units). Newton from the left end increases monotonically to the
/// root since the left-hand side is convex and decreasing.
fn solve_simplex_multiplier(lambda: f64, d: &[f64]) -> f64 {
    let n = d.len() as f64;
    let two_l = 2.0 * lambda;
    let mut lo = two_l;
    let mut hi = two_l * n;
    let mut m = lo;
    for _ in 0..MAX_INNER {
        let mut g = -1.0;
        let mut dg = 0.0;
        for &di in d {
            let r = 1.0 / (m + di);
            g += two_l * r;
            dg -= two_l * r * r;
        }
        if g.abs() <= 1e-15 {
            break;
        }
        if g > 0.0 {
            lo = m;
        } else {
            hi = m;
        }
        let mut next = m - g / dg;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - m).abs() <= 1e-16 * m.abs() {
            m = next;
            break;
        }
        m = next;
    }
    m
}

struct DualPoint {
    weights: Vec<f64>,
    m: f64,
    statistic: f64,
    /// d statistic / d log λ
    slope: f64,
    /// Σ of the unnormalized weights.
    total: f64,
}

fn dual_point(lambda: f64, d: &[f64]) -> DualPoint {
    let n = d.len() as f64;
    let m = solve_simplex_multiplier(lambda, d);
    let mut weights: Vec<f64> = d.iter().map(|&di| 2.0 * lambda / (m + di)).collect();
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    let sum_w2: f64 = weights.iter().map(|w| w * w).sum();
    DualPoint {
        statistic: burg_statistic_raw(&weights),
        // (Σ r)² / Σ r² equals 1 / Σ w² once normalized.
        slope: -2.0 * (n - 1.0 / sum_w2),
        total,
        weights,
        m,
    }
}

/// `max Σ w_i c_i` over the ball.
pub fn max_linear_over_ball(c: &[f64], ball: &DivergenceBall) -> Result<InnerSolution> {
    validate(c, ball)?;
    let tau = ball.threshold;
    let cmax = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let cmin = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = c.iter().sum::<f64>() / c.len() as f64;
    let range = cmax - cmin;
    if tau == 0.0 || range < 1e-12 * (1.0 + mean.abs()) {
        return Ok(InnerSolution::uniform(c));
    }
    let d: Vec<f64> = c.iter().map(|&ci| (cmax - ci) / range).collect();
    let target = |p: &DualPoint| p.statistic - tau;

    // Bracket: statistic decreases from +∞ (λ → 0) to 0 (λ → ∞).
    let mut lo = 1e-12_f64;
    let mut p_lo = dual_point(lo, &d);
    while target(&p_lo) < 0.0 && lo > 1e-300 {
        lo *= 1e-6;
        p_lo = dual_point(lo, &d);
    }
    let mut hi = 1.0_f64;
    let mut p_hi = dual_point(hi, &d);
    while target(&p_hi) > 0.0 {
        hi *= 10.0;
        p_hi = dual_point(hi, &d);
        if hi > 1e300 {
            return Err(Error::NonConvergence {
                what: "divergence-ball dual bracket",
                iterations: 0,
                residual: target(&p_hi),
            });
        }
    }
    if target(&p_lo) < 0.0 {
        // The statistic stays below τ even with all mass on the maximizers;
        // only possible when the maximizers carry nearly all indices.
        return finish(c, cmax, range, lo, p_lo, tau);
    }

    let (mut t_lo, mut t_hi) = (lo.ln(), hi.ln());
    let mut t = t_hi;
    let mut p = p_hi;
    let mut iterations = 0;
    loop {
        let f = target(&p);
        if f.abs() <= DUAL_TOL * 0.1 * (1.0 + tau) && f <= 0.0 {
            break;
        }
        if f > 0.0 {
            t_lo = t;
        } else {
            t_hi = t;
        }
        iterations += 1;
        if iterations > MAX_OUTER || t_hi - t_lo < 1e-15 * (1.0 + t.abs()) {
            // Settle on the feasible end of the bracket.
            let p_feasible = dual_point(t_hi.exp(), &d);
            let f_feasible = target(&p_feasible);
            if f_feasible.abs() > DUAL_TOL * (1.0 + tau) {
                return Err(Error::NonConvergence {
                    what: "divergence-ball dual",
                    iterations,
                    residual: f_feasible.abs(),
                });
            }
            t = t_hi;
            p = p_feasible;
            break;
        }
        let mut next = if p.slope < 0.0 {
            t - f / p.slope
        } else {
            f64::NAN
        };
        if !(next > t_lo && next < t_hi) {
            next = 0.5 * (t_lo + t_hi);
        }
        t = next;
        p = dual_point(t.exp(), &d);
    }
    finish(c, cmax, range, t.exp(), p, tau)
}

fn finish(
    c: &[f64],
    cmax: f64,
    range: f64,
    lambda: f64,
    p: DualPoint,
    tau: f64,
) -> Result<InnerSolution> {
    let weights = ProbabilityWeights::new(p.weights)?;
    let value = weights.dot(c);
    // Renormalizing w rescales the stationarity constant 2λ by 1/Σ.
    let lambda_scaled = lambda / p.total;
    let kkt_residual = (p.total - 1.0)
        .abs()
        .max((p.statistic - tau).abs() / (1.0 + tau));
    if kkt_residual > 1e-7 {
        return Err(Error::NonConvergence {
            what: "divergence-ball dual",
            iterations: MAX_OUTER,
            residual: kkt_residual,
        });
    }
    let n = c.len() as f64;
    // w_i (μ − c_i) = 2λ after the rescaling to original units.
    let lambda_orig = lambda_scaled * range;
    let mu_orig = cmax + p.m * range;
    let mu_orig = if mu_orig.is_finite() {
        mu_orig
    } else {
        cmax + range * n
    };
    Ok(InnerSolution {
        value,
        weights,
        dual_lambda: lambda_orig,
        dual_mu: mu_orig,
        kkt_residual,
    })
}

/// `min Σ w_i c_i` over the ball, via `−max(−c)`.
pub fn min_linear_over_ball(c: &[f64], ball: &DivergenceBall) -> Result<InnerSolution> {
    let neg: Vec<f64> = c.iter().map(|x| -x).collect();
    let mut sol = max_linear_over_ball(&neg, ball)?;
    sol.value = sol.weights.dot(c);
    sol.dual_mu = -sol.dual_mu;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{ball_contains, pinsker_holds};
    use proptest::prelude::*;

    fn ball(tau: f64, n: usize) -> DivergenceBall {
        DivergenceBall::with_threshold(tau, n).unwrap()
    }

    // Frozen from an independent simplex-grid search (step 1e-3) followed by
    // SLSQP refinement.
    const FIXTURE_MAX: f64 = 1.148_445_568_488_298_8;
    const FIXTURE_MIN: f64 = 0.851_554_431_514_460_2;

    #[test]
    fn constant_costs() {
        for tau in [0.0, 0.1, 5.0] {
            let s = max_linear_over_ball(&[5.0, 5.0, 5.0], &ball(tau, 3)).unwrap();
            assert_eq!(s.value, 5.0);
            assert_eq!(s.weights, ProbabilityWeights::uniform(3));
            let s = min_linear_over_ball(&[5.0, 5.0, 5.0], &ball(tau, 3)).unwrap();
            assert_eq!(s.value, 5.0);
        }
    }

    #[test]
    fn zero_threshold_gives_mean() {
        let c = [3.0, -1.0, 7.0, 0.5];
        let s = max_linear_over_ball(&c, &ball(0.0, 4)).unwrap();
        assert!((s.value - 2.375).abs() < 1e-15);
        let s = min_linear_over_ball(&c, &ball(0.0, 4)).unwrap();
        assert!((s.value - 2.375).abs() < 1e-15);
    }

    #[test]
    fn three_point_fixture() {
        let c = [0.0, 1.0, 2.0];
        let hi = max_linear_over_ball(&c, &ball(0.1, 3)).unwrap();
        let lo = min_linear_over_ball(&c, &ball(0.1, 3)).unwrap();
        assert!((hi.value - FIXTURE_MAX).abs() < 1e-7, "{}", hi.value);
        assert!((lo.value - FIXTURE_MIN).abs() < 1e-7, "{}", lo.value);
        for s in [&hi, &lo] {
            assert!(s.kkt_residual <= 1e-7);
            assert!(ball_contains(&s.weights, &ball(0.1, 3)).unwrap().0);
            assert!(pinsker_holds(&s.weights));
            assert!((s.value - s.weights.dot(&c)).abs() < 1e-9);
        }
    }

    #[test]
    fn stationarity_in_original_units() {
        let c = [0.3, -2.0, 4.5, 1.0, 1.0];
        let s = max_linear_over_ball(&c, &ball(0.7, 5)).unwrap();
        for (w, ci) in s.weights.as_slice().iter().zip(&c) {
            let lhs = w * (s.dual_mu - ci);
            assert!((lhs - 2.0 * s.dual_lambda).abs() < 1e-9 * (1.0 + s.dual_lambda));
        }
        let m = min_linear_over_ball(&c, &ball(0.7, 5)).unwrap();
        for (w, ci) in m.weights.as_slice().iter().zip(&c) {
            let lhs = w * (ci - m.dual_mu);
            assert!((lhs - 2.0 * m.dual_lambda).abs() < 1e-9 * (1.0 + m.dual_lambda));
        }
    }

    #[test]
    fn tied_maximizers() {
        let c = [1.0, 1.0, 0.0, 0.0];
        let s = max_linear_over_ball(&c, &ball(2.0, 4)).unwrap();
        let w = s.weights.as_slice();
        assert!((w[0] - w[1]).abs() < 1e-12);
        assert!(s.value > 0.5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(max_linear_over_ball(&[1.0], &ball(0.1, 2)).is_err());
        assert!(matches!(
            max_linear_over_ball(&[1.0, 2.0, 3.0], &ball(0.1, 2)),
            Err(Error::Dimension { .. })
        ));
        assert!(max_linear_over_ball(&[1.0, f64::NAN], &ball(0.1, 2)).is_err());
    }

    fn costs() -> impl Strategy<Value = Vec<f64>> {
        (2usize..40).prop_flat_map(|n| prop::collection::vec(-10.0f64..10.0, n))
    }

    proptest! {
        #[test]
        fn sandwich_and_membership(c in costs(), tau in 0.0f64..8.0) {
            let b = ball(tau, c.len());
            let hi = max_linear_over_ball(&c, &b).unwrap();
            let lo = min_linear_over_ball(&c, &b).unwrap();
            let mean = c.iter().sum::<f64>() / c.len() as f64;
            prop_assert!(lo.value <= mean + 1e-12 && mean <= hi.value + 1e-12);
            for s in [&hi, &lo] {
                prop_assert!(ball_contains(&s.weights, &b).unwrap().0);
                prop_assert!(pinsker_holds(&s.weights));
                prop_assert!(s.kkt_residual <= 1e-7);
                prop_assert!((s.value - s.weights.dot(&c)).abs() < 1e-9);
            }
        }

        #[test]
        fn monotone_in_radius(c in costs(), t1 in 0.0f64..4.0, extra in 0.0f64..4.0) {
            let t2 = t1 + extra;
            let n = c.len();
            let hi1 = max_linear_over_ball(&c, &ball(t1, n)).unwrap().value;
            let hi2 = max_linear_over_ball(&c, &ball(t2, n)).unwrap().value;
            let lo1 = min_linear_over_ball(&c, &ball(t1, n)).unwrap().value;
            let lo2 = min_linear_over_ball(&c, &ball(t2, n)).unwrap().value;
            prop_assert!(hi1 <= hi2 + 1e-9);
            prop_assert!(lo1 + 1e-9 >= lo2);
        }

        #[test]
        fn affine_equivariance(c in costs(), tau in 0.01f64..5.0, a in 0.1f64..10.0, shift in -50.0f64..50.0) {
            let b = ball(tau, c.len());
            let base = max_linear_over_ball(&c, &b).unwrap().value;
            let moved: Vec<f64> = c.iter().map(|x| a * x + shift).collect();
            let v = max_linear_over_ball(&moved, &b).unwrap().value;
            prop_assert!((v - (a * base + shift)).abs() < 1e-9 * (1.0 + v.abs()));
        }
    }
}
