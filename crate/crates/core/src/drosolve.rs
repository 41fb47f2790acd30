//! Outer solvers for the distributionally robust pair
//!
//! `max_{w ∈ W} φ(w)` and `min_{w ∈ W} φ(w)`, with `φ(w) = min_x Σ w_i H(x; ξ_i)`
//!
//! over the divergence ball `W`, optionally restricted to `Σ w_i F_k(x; ξ_i) ≤ 0`.
//!
//! `φ` is concave, so the max side runs Kelley cutting planes. Each master
//! problem `max_w min_k a_k·w` (subject to feasibility cuts `g_j·w ≤ 0`) is
//! solved through its dual `min_{θ ∈ Δ, ν ≥ 0} ψ(Σ θ_k a_k − Σ ν_j g_j)` with
//! `ψ(c) = max_{w ∈ W} c·w`, by a log-barrier Newton method. Any dual point
//! gives an upper bound, so the reported gap is a certificate.
//!
//! The min side is nonconvex. It runs alternating minimization from the
//! uniform weights and from `restarts` random starts, and keeps the best. The
//! result is an upper estimate of the true minimum without a global
//! guarantee.

use nalgebra::{DMatrix, DVector};

use crate::divergence::{burg_statistic_raw, DivergenceBall, ProbabilityWeights};
use crate::elweights::{max_linear_over_ball, min_linear_over_ball, InnerSolution};
use crate::error::{Error, Result};
use crate::problems::{
    check_samples, solve_weighted_saa, weighted_objective, InnerSolverTag, StochasticProgram,
    WeightedSaaSolution, CONSTRAINT_TOL,
};
use crate::sample::SampleSet;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DroSettings {
    /// Relative stopping gap of the cutting-plane method.
    pub gap_tol: f64,
    pub max_cuts: usize,
    /// Random restarts of the min side, besides the uniform start.
    pub restarts: usize,
    /// Relative improvement below which alternating minimization stops.
    pub alternating_tol: f64,
    pub max_alternations: usize,
    /// Base seed of the restart weights.
    pub seed: u64,
}

impl Default for DroSettings {
    fn default() -> Self {
        DroSettings {
            gap_tol: 1e-6,
            max_cuts: 200,
            restarts: 10,
            alternating_tol: 1e-8,
            max_alternations: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SideSolution {
    pub value: f64,
    pub weights: ProbabilityWeights,
    /// Inner decision attaining `value` under `weights`.
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MaxDiagnostics {
    pub iterations: usize,
    pub optimality_cuts: usize,
    pub feasibility_cuts: usize,
    /// Model upper bound minus the best value found.
    pub gap: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MinDiagnostics {
    /// Starts attempted, including the uniform one.
    pub starts: usize,
    /// Starts whose inner problem was infeasible or failed.
    pub failed_starts: usize,
    pub iterations: usize,
    /// Value reached from each successful start, in start order.
    pub start_values: Vec<f64>,
    /// Largest minus smallest entry of `start_values`.
    pub spread: f64,
    /// Index of the start that produced the reported value.
    pub best_start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroDiagnostics {
    pub upper: MaxDiagnostics,
    pub lower: MinDiagnostics,
    pub inner_solver: InnerSolverTag,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DroBounds {
    pub lower: f64,
    pub upper: f64,
    pub lower_weights: ProbabilityWeights,
    pub upper_weights: ProbabilityWeights,
    pub diagnostics: DroDiagnostics,
}

fn check_inputs(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    ball: &DivergenceBall,
) -> Result<()> {
    check_samples(program, samples)?;
    if samples.len() < 2 {
        return Err(Error::Domain(format!(
            "need at least two observations, got {}",
            samples.len()
        )));
    }
    if ball.n != samples.len() {
        return Err(Error::Dimension {
            what: "ball size vs sample count",
            expected: samples.len(),
            got: ball.n,
        });
    }
    Ok(())
}

fn costs(program: &dyn StochasticProgram, samples: &SampleSet, x: &[f64]) -> Vec<f64> {
    samples.rows().map(|xi| program.objective(x, xi)).collect()
}

fn constraint_rows(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    x: &[f64],
) -> Vec<Vec<f64>> {
    (0..program.num_stochastic_constraints())
        .map(|k| {
            samples
                .rows()
                .map(|xi| program.stochastic_constraint(k, x, xi))
                .collect()
        })
        .collect()
}

/// `φ(w)`, or `None` when the weighted inner problem is infeasible.
fn evaluate(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    w: &[f64],
) -> Result<Option<WeightedSaaSolution>> {
    match solve_weighted_saa(program, samples, w) {
        Ok(sol) if sol.feasibility_residual <= 1e-6 => Ok(Some(sol)),
        Ok(_) | Err(Error::Infeasible(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// `max_{w ∈ W} min_k a_k·w` subject to `g_j·w ≤ 0`.
struct Master<'a> {
    ball: &'a DivergenceBall,
    cuts: Vec<Vec<f64>>,
    feasibility: Vec<Vec<f64>>,
}

struct MasterSolution {
    /// Upper bound on the master value.
    bound: f64,
    weights: ProbabilityWeights,
}

const BARRIER_START: f64 = 0.1;
const BARRIER_SHRINK: f64 = 0.1;
/// Final `μ · (number of barrier terms)` in scaled units.
const BARRIER_END: f64 = 1e-10;
const MAX_NEWTON: usize = 100;
const START_MIX: f64 = 0.1;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Interior state of the barrier problem
/// `max t` s.t. `a_k·w − t > 0`, `τ − S(w) > 0`, `−g_j·w > 0`, `Σ w = 1`,
/// where `S(w) = −2 Σ log(n w_i)`.
struct PathPoint {
    w: Vec<f64>,
    t: f64,
}

struct BarrierProblem<'a> {
    cuts: &'a [Vec<f64>],
    feasibility: &'a [Vec<f64>],
    threshold: f64,
}

impl BarrierProblem<'_> {
    fn terms(&self) -> usize {
        self.cuts.len() + 1 + self.feasibility.len()
    }

    /// `−t/μ − Σ log s_k − log r − Σ log q_j`, or `None` outside the domain.
    fn value(&self, p: &PathPoint, mu: f64) -> Option<f64> {
        if p.w.iter().any(|&v| !(v > 0.0)) {
            return None;
        }
        let r = self.threshold - burg_statistic_raw(&p.w);
        if !(r > 0.0) {
            return None;
        }
        let mut f = -p.t / mu - r.ln();
        for a in self.cuts {
            let s = dot(a, &p.w) - p.t;
            if !(s > 0.0) {
                return None;
            }
            f -= s.ln();
        }
        for g in self.feasibility {
            let q = -dot(g, &p.w);
            if !(q > 0.0) {
                return None;
            }
            f -= q.ln();
        }
        Some(f)
    }

    /// Newton step for fixed `μ` and its decrement. The `w` block of the
    /// Hessian is `diag(2/(r w_i²)) + U Uᵀ`, inverted by Woodbury; `t` and the
    /// simplex multiplier are eliminated through a 2×2 system.
    fn newton_step(&self, p: &PathPoint, mu: f64) -> Option<(Vec<f64>, f64, f64)> {
        let n = p.w.len();
        let r = self.threshold - burg_statistic_raw(&p.w);
        let m = self.terms();
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut g_w = vec![0.0; n];
        let mut g_t = -1.0 / mu;
        let mut h_wt = vec![0.0; n];
        let mut h_tt = 0.0;
        for a in self.cuts {
            let s = dot(a, &p.w) - p.t;
            for i in 0..n {
                g_w[i] -= a[i] / s;
                h_wt[i] -= a[i] / (s * s);
            }
            g_t += 1.0 / s;
            h_tt += 1.0 / (s * s);
            cols.push(a.iter().map(|v| v / s).collect());
        }
        let grad_s: Vec<f64> = p.w.iter().map(|v| -2.0 / v).collect();
        for i in 0..n {
            g_w[i] += grad_s[i] / r;
        }
        cols.push(grad_s.iter().map(|v| v / r).collect());
        for g in self.feasibility {
            let q = -dot(g, &p.w);
            for i in 0..n {
                g_w[i] += g[i] / q;
            }
            cols.push(g.iter().map(|v| v / q).collect());
        }
        let d_inv: Vec<f64> = p.w.iter().map(|v| r * v * v / 2.0).collect();

        let mut cap = DMatrix::<f64>::identity(m, m);
        for a in 0..m {
            for b in 0..=a {
                let v: f64 = (0..n).map(|i| cols[a][i] * d_inv[i] * cols[b][i]).sum();
                cap[(a, b)] += v;
                if a != b {
                    cap[(b, a)] += v;
                }
            }
        }
        let chol = cap.cholesky()?;
        let apply = |x: &[f64]| -> Vec<f64> {
            let y: Vec<f64> = x.iter().zip(&d_inv).map(|(a, b)| a * b).collect();
            let uty = DVector::from_iterator(m, cols.iter().map(|c| dot(c, &y)));
            let z = chol.solve(&uty);
            let mut out = y;
            for (k, c) in cols.iter().enumerate() {
                for i in 0..n {
                    out[i] -= d_inv[i] * c[i] * z[k];
                }
            }
            out
        };
        let p0 = apply(&g_w);
        let p1 = apply(&h_wt);
        let p2 = apply(&vec![1.0; n]);
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        // [h_tt − h_wtᵀp1, −h_wtᵀp2; −1ᵀp1, −1ᵀp2] (dt, λ) = (−g_t + h_wtᵀp0, 1ᵀp0)
        let (a11, a12) = (h_tt - dot(&h_wt, &p1), -dot(&h_wt, &p2));
        let (a21, a22) = (-sum(&p1), -sum(&p2));
        let (b1, b2) = (-g_t + dot(&h_wt, &p0), sum(&p0));
        let det = a11 * a22 - a12 * a21;
        if !(det.abs() > 0.0) || !det.is_finite() {
            return None;
        }
        let dt = (b1 * a22 - a12 * b2) / det;
        let lambda = (a11 * b2 - a21 * b1) / det;
        let dw: Vec<f64> = (0..n)
            .map(|i| -p0[i] - p1[i] * dt - p2[i] * lambda)
            .collect();
        let decrement = -(dot(&g_w, &dw) + g_t * dt);
        Some((dw, dt, decrement))
    }

    /// Follows the central path from a strictly feasible `w`. With
    /// `stop_when_positive`, returns as soon as `t > 0`.
    fn follow(&self, w: Vec<f64>, stop_when_positive: bool) -> Result<(PathPoint, f64)> {
        let spread = self
            .cuts
            .iter()
            .map(|a| dot(a, &w))
            .fold(f64::INFINITY, f64::min);
        let mut p = PathPoint { t: spread - 1.0, w };
        let mut mu = BARRIER_START;
        let m = self.terms() as f64;
        loop {
            for _ in 0..MAX_NEWTON {
                if stop_when_positive && p.t > 0.0 {
                    return Ok((p, mu));
                }
                let f0 = self.value(&p, mu).ok_or_else(|| Error::NonConvergence {
                    what: "cutting-plane master (left the interior)",
                    iterations: 0,
                    residual: f64::NAN,
                })?;
                let Some((dw, dt, decrement)) = self.newton_step(&p, mu) else {
                    break;
                };
                if !(decrement > 1e-12) {
                    break;
                }
                let mut alpha = 1.0;
                let mut moved = false;
                for _ in 0..60 {
                    let trial = PathPoint {
                        w: p.w.iter().zip(&dw).map(|(a, b)| a + alpha * b).collect(),
                        t: p.t + alpha * dt,
                    };
                    if let Some(f1) = self.value(&trial, mu) {
                        if f1 <= f0 - 0.25 * alpha * decrement {
                            p = trial;
                            moved = true;
                            break;
                        }
                    }
                    alpha *= 0.5;
                }
                if !moved || decrement < 1e-9 {
                    break;
                }
            }
            if mu * m <= BARRIER_END {
                break;
            }
            mu *= BARRIER_SHRINK;
        }
        Ok((p, mu))
    }
}

impl<'a> Master<'a> {
    fn new(ball: &'a DivergenceBall) -> Self {
        Master {
            ball,
            cuts: Vec::new(),
            feasibility: Vec::new(),
        }
    }

    /// Cuts shifted by their smallest entry and divided by their range, and
    /// feasibility rows divided by their largest magnitude.
    fn scaled_rows(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, f64, f64) {
        let lo = self
            .cuts
            .iter()
            .flatten()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        let hi = self
            .cuts
            .iter()
            .flatten()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi - lo > 1e-300 { hi - lo } else { 1.0 };
        let cuts = self
            .cuts
            .iter()
            .map(|a| a.iter().map(|v| (v - lo) / scale).collect())
            .collect();
        let feasibility = self
            .feasibility
            .iter()
            .map(|g| {
                let norm = g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                let norm = if norm > 0.0 { norm } else { 1.0 };
                g.iter().map(|v| v / norm).collect()
            })
            .collect();
        (cuts, feasibility, lo, scale)
    }

    /// A point strictly inside the ball and strictly satisfying every
    /// feasibility row: `start` or the uniform weights pulled toward the
    /// centre, else the first positive point of the phase-one problem
    /// `max_w min_j −g_j·w`.
    fn interior_start(&self, feasibility: &[Vec<f64>], start: Option<&[f64]>) -> Result<Vec<f64>> {
        let n = self.ball.n;
        let u = 1.0 / n as f64;
        let strict = |w: &[f64]| feasibility.iter().all(|g| dot(g, w) < 0.0);
        let mut candidates: Vec<Vec<f64>> = Vec::new();
        if let Some(w) = start {
            candidates.push(
                w.iter()
                    .map(|v| (1.0 - START_MIX) * v + START_MIX * u)
                    .collect(),
            );
        }
        candidates.push(vec![u; n]);
        for w in candidates {
            if strict(&w) && burg_statistic_raw(&w) < self.ball.threshold {
                return Ok(w);
            }
        }
        let negated: Vec<Vec<f64>> = feasibility
            .iter()
            .map(|g| g.iter().map(|v| -v).collect())
            .collect();
        let phase_one = BarrierProblem {
            cuts: &negated,
            feasibility: &[],
            threshold: self.ball.threshold,
        };
        let (p, _) = phase_one.follow(vec![u; n], true)?;
        if p.t > 0.0 && strict(&p.w) {
            Ok(p.w)
        } else {
            Err(Error::Infeasible(
                "feasibility cuts leave no weights inside the ball".into(),
            ))
        }
    }

    fn solve(&self, start: Option<&[f64]>) -> Result<MasterSolution> {
        let k = self.cuts.len();
        let j = self.feasibility.len();
        let (cuts, feasibility, offset, scale) = self.scaled_rows();
        let to_original = |v: f64| offset + scale * v;

        if self.ball.threshold == 0.0 {
            let weights = ProbabilityWeights::uniform(self.ball.n);
            let value = cuts
                .iter()
                .map(|a| weights.dot(a))
                .fold(f64::INFINITY, f64::min);
            return Ok(MasterSolution {
                bound: to_original(value),
                weights,
            });
        }
        if k == 1 && j == 0 {
            let inner = max_linear_over_ball(&cuts[0], self.ball)?;
            return Ok(MasterSolution {
                bound: to_original(inner.value),
                weights: inner.weights,
            });
        }
        if k == 1 && j == 1 {
            let h: Vec<f64> = feasibility[0].iter().map(|v| -v).collect();
            let inner = self.single_constraint(&cuts[0], &h)?;
            return Ok(MasterSolution {
                bound: to_original(inner.value),
                weights: inner.weights,
            });
        }
        let w0 = self.interior_start(&feasibility, start)?;
        let problem = BarrierProblem {
            cuts: &cuts,
            feasibility: &feasibility,
            threshold: self.ball.threshold,
        };
        let (p, mu) = problem.follow(w0, false)?;
        let weights = ProbabilityWeights::normalized(p.w)?;
        // On the central path the duality gap is μ times the number of
        // barrier terms.
        let model = cuts
            .iter()
            .map(|a| weights.dot(a))
            .fold(f64::INFINITY, f64::min);
        let bound = (p.t + mu * problem.terms() as f64).max(model);
        Ok(MasterSolution {
            bound: to_original(bound),
            weights,
        })
    }

    /// `min_{ν ≥ 0} ψ(a + ν h)` with `ψ(c) = max_{w ∈ W} c·w`: the derivative
    /// `h·w(ν)` is nondecreasing, so the minimizer is `ν = 0` or its root.
    /// The returned weights satisfy `h·w ≥ 0` up to the bisection tolerance.
    fn single_constraint(&self, a: &[f64], h: &[f64]) -> Result<InnerSolution> {
        let at = |nu: f64| -> Result<(f64, InnerSolution)> {
            let c: Vec<f64> = a.iter().zip(h).map(|(x, y)| x + nu * y).collect();
            let inner = max_linear_over_ball(&c, self.ball)?;
            Ok((inner.weights.dot(h), inner))
        };
        let (slope0, inner0) = at(0.0)?;
        if slope0 >= 0.0 {
            return Ok(inner0);
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut upper = at(hi)?;
        while upper.0 < 0.0 {
            lo = hi;
            hi *= 4.0;
            if hi > 1e12 {
                return Err(Error::Infeasible(
                    "no weights in the ball satisfy the constraint row".into(),
                ));
            }
            upper = at(hi)?;
        }
        let mut best = upper.1;
        for _ in 0..200 {
            if hi - lo <= 1e-13 * (1.0 + hi) {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let (slope, inner) = at(mid)?;
            if slope < 0.0 {
                lo = mid;
            } else {
                hi = mid;
                best = inner;
                if slope <= 1e-13 {
                    break;
                }
            }
        }
        // `value` is the Lagrangian ψ(a + νh), an upper bound on the master.
        Ok(best)
    }
}

const FEASIBILITY_ROUNDS: usize = 20;

/// Weights in the ball whose weighted inner problem is feasible: the uniform
/// weights when they qualify, otherwise the first success of alternating
/// between the least-violating decision and the weights most favourable to
/// it.
fn feasible_start(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    ball: &DivergenceBall,
) -> Result<(Vec<f64>, WeightedSaaSolution)> {
    let n = samples.len();
    let mut w = vec![1.0 / n as f64; n];
    if let Some(sol) = evaluate(program, samples, &w)? {
        return Ok((w, sol));
    }
    if ball.threshold > 0.0 && program.num_stochastic_constraints() > 0 {
        for _ in 0..FEASIBILITY_ROUNDS {
            let Some(x) = program.least_violating_decision(samples, &w)? else {
                break;
            };
            let rows = constraint_rows(program, samples, &x);
            let total: Vec<f64> = (0..n).map(|i| rows.iter().map(|r| r[i]).sum()).collect();
            w = min_linear_over_ball(&total, ball)?.weights.into_vec();
            if let Some(sol) = evaluate(program, samples, &w)? {
                return Ok((w, sol));
            }
        }
    }
    Err(Error::Infeasible(
        "no weights in the ball give a feasible weighted problem".into(),
    ))
}

/// Upper endpoint: `max_{w ∈ W} φ(w)` by cutting planes.
pub fn maximize_minvalue(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    ball: &DivergenceBall,
    settings: &DroSettings,
) -> Result<(SideSolution, MaxDiagnostics)> {
    check_inputs(program, samples, ball)?;
    let (w0, start) = feasible_start(program, samples, ball)?;
    let mut best = SideSolution {
        value: start.value,
        weights: ProbabilityWeights::normalized(w0)?,
        x: start.x,
    };
    let mut diag = MaxDiagnostics::default();
    if ball.threshold == 0.0 {
        diag.converged = true;
        return Ok((best, diag));
    }

    let mut master = Master::new(ball);
    master.cuts.push(costs(program, samples, &best.x));
    diag.optimality_cuts = 1;
    let mut warm: Option<ProbabilityWeights> = None;
    for iteration in 1..=settings.max_cuts {
        diag.iterations = iteration;
        let sol = match master.solve(warm.as_ref().map(|w| w.as_slice())) {
            Ok(sol) => sol,
            // Feasibility cuts closed off the interior; keep the best point.
            Err(Error::Infeasible(_)) => break,
            Err(e) => return Err(e),
        };
        diag.gap = (sol.bound - best.value).max(0.0);
        if diag.gap <= settings.gap_tol * (1.0 + best.value.abs()) {
            diag.converged = true;
            break;
        }
        let w = sol.weights.as_slice();
        match evaluate(program, samples, w)? {
            Some(inner) => {
                if inner.value > best.value {
                    best = SideSolution {
                        value: inner.value,
                        weights: sol.weights.clone(),
                        x: inner.x.clone(),
                    };
                }
                master.cuts.push(costs(program, samples, &inner.x));
                diag.optimality_cuts += 1;
            }
            None => {
                let anchor = program.separating_decision(samples, w, best.weights.as_slice())?;
                let Some(xf) = anchor else {
                    // No cut separates this point; stop with the gap as is.
                    break;
                };
                let mut added = false;
                for row in constraint_rows(program, samples, &xf) {
                    let violation: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum();
                    if violation > CONSTRAINT_TOL {
                        master.feasibility.push(row);
                        added = true;
                    }
                }
                if !added {
                    break;
                }
                diag.feasibility_cuts += 1;
            }
        }
        warm = Some(sol.weights);
    }
    Ok((best, diag))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Random start weights. Each weight is an exponential draw keyed by the
/// observation's values, so permuting the rows permutes the start.
fn start_weights(samples: &SampleSet, seed: u64, start: usize) -> Vec<f64> {
    let key = splitmix64(seed ^ splitmix64(start as u64));
    let raw: Vec<f64> = samples
        .rows()
        .map(|row| {
            let mut h = key;
            for v in row {
                h = splitmix64(h ^ v.to_bits());
            }
            let u = ((h >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
            -u.ln()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Moves `w` toward the uniform weights until it lies inside the ball.
fn shrink_into_ball(w: &[f64], ball: &DivergenceBall) -> Vec<f64> {
    let n = w.len() as f64;
    let mix = |t: f64| -> Vec<f64> { w.iter().map(|v| (1.0 - t) / n + t * v).collect() };
    let target = 0.999 * ball.threshold;
    if burg_statistic_raw(w) <= target {
        return w.to_vec();
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if burg_statistic_raw(&mix(mid)) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mix(lo)
}

/// `min Σ w_i c_i` over the ball subject to `Σ w_i g_i ≤ 0` for each row `g`,
/// started from weights that satisfy the rows.
fn min_linear_constrained(
    c: &[f64],
    rows: Vec<Vec<f64>>,
    ball: &DivergenceBall,
    start: &[f64],
) -> Result<ProbabilityWeights> {
    if rows.is_empty() {
        return Ok(min_linear_over_ball(c, ball)?.weights);
    }
    let mut master = Master::new(ball);
    master.cuts.push(c.iter().map(|v| -v).collect());
    master.feasibility = rows;
    Ok(master.solve(Some(start))?.weights)
}

struct Descent {
    best: SideSolution,
    iterations: usize,
}

fn alternate(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    ball: &DivergenceBall,
    start: Vec<f64>,
    settings: &DroSettings,
) -> Result<Option<Descent>> {
    let Some(first) = evaluate(program, samples, &start)? else {
        return Ok(None);
    };
    let mut best = SideSolution {
        value: first.value,
        weights: ProbabilityWeights::normalized(start)?,
        x: first.x,
    };
    let mut iterations = 0;
    while iterations < settings.max_alternations {
        iterations += 1;
        let c = costs(program, samples, &best.x);
        let rows = constraint_rows(program, samples, &best.x);
        let w = min_linear_constrained(&c, rows, ball, best.weights.as_slice())?;
        let Some(next) = evaluate(program, samples, w.as_slice())? else {
            break;
        };
        let improvement = best.value - next.value;
        if improvement > 0.0 {
            best = SideSolution {
                value: next.value,
                weights: w,
                x: next.x,
            };
        }
        if improvement <= settings.alternating_tol * (1.0 + best.value.abs()) {
            break;
        }
    }
    Ok(Some(Descent { best, iterations }))
}

/// Lower endpoint: `min_{w ∈ W} φ(w)` by alternating minimization with
/// restarts. Ties between starts go to the lowest start index.
pub fn minimize_minvalue(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    ball: &DivergenceBall,
    settings: &DroSettings,
) -> Result<(SideSolution, MinDiagnostics)> {
    check_inputs(program, samples, ball)?;
    let mut diag = MinDiagnostics::default();
    let starts = if ball.threshold == 0.0 {
        1
    } else {
        1 + settings.restarts
    };
    let mut best: Option<SideSolution> = None;
    for s in 0..starts {
        diag.starts += 1;
        let w0 = if s == 0 {
            feasible_start(program, samples, ball)?.0
        } else {
            shrink_into_ball(&start_weights(samples, settings.seed, s), ball)
        };
        let outcome = match alternate(program, samples, ball, w0, settings) {
            Ok(o) => o,
            Err(e) if e.is_solver_failure() && s > 0 => None,
            Err(e) => return Err(e),
        };
        let Some(descent) = outcome else {
            if s == 0 {
                return Err(Error::Infeasible(
                    "the sample-average problem has no feasible decision".into(),
                ));
            }
            diag.failed_starts += 1;
            continue;
        };
        diag.iterations += descent.iterations;
        diag.start_values.push(descent.best.value);
        if best.as_ref().is_none_or(|b| descent.best.value < b.value) {
            best = Some(descent.best);
            diag.best_start = s;
        }
    }
    let lo = diag
        .start_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = diag
        .start_values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    diag.spread = hi - lo;
    Ok((best.expect("uniform start succeeded"), diag))
}

/// Both endpoints of the robust pair.
pub fn dro_bounds(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    ball: &DivergenceBall,
    settings: &DroSettings,
) -> Result<DroBounds> {
    let (upper, upper_diag) = maximize_minvalue(program, samples, ball, settings)?;
    let (lower, lower_diag) = minimize_minvalue(program, samples, ball, settings)?;
    Ok(DroBounds {
        lower: lower.value,
        upper: upper.value,
        lower_weights: lower.weights,
        upper_weights: upper.weights,
        diagnostics: DroDiagnostics {
            upper: upper_diag,
            lower: lower_diag,
            inner_solver: program.solver_tag(),
        },
    })
}

/// The program with objective `H(x; ξ) − H(x̂; ξ)`.
struct ShiftedProgram<'a> {
    base: &'a dyn StochasticProgram,
    reference: &'a [f64],
}

impl StochasticProgram for ShiftedProgram<'_> {
    fn name(&self) -> String {
        format!("{} (shifted)", self.base.name())
    }

    fn decision_dim(&self) -> usize {
        self.base.decision_dim()
    }

    fn data_dim(&self) -> Option<usize> {
        self.base.data_dim()
    }

    fn num_stochastic_constraints(&self) -> usize {
        self.base.num_stochastic_constraints()
    }

    fn num_deterministic_constraints(&self) -> usize {
        self.base.num_deterministic_constraints()
    }

    fn objective(&self, x: &[f64], xi: &[f64]) -> f64 {
        self.base.objective(x, xi) - self.base.objective(self.reference, xi)
    }

    fn stochastic_constraint(&self, k: usize, x: &[f64], xi: &[f64]) -> f64 {
        self.base.stochastic_constraint(k, x, xi)
    }

    fn deterministic_constraint(&self, k: usize, x: &[f64]) -> f64 {
        self.base.deterministic_constraint(k, x)
    }

    fn solver_tag(&self) -> InnerSolverTag {
        self.base.solver_tag()
    }

    fn solve_weighted(&self, samples: &SampleSet, w: &[f64]) -> Result<WeightedSaaSolution> {
        let mut sol = self.base.solve_weighted(samples, w)?;
        sol.value -= weighted_objective(self.base, samples, w, self.reference);
        Ok(sol)
    }

    fn least_violating_decision(&self, samples: &SampleSet, w: &[f64]) -> Result<Option<Vec<f64>>> {
        self.base.least_violating_decision(samples, w)
    }

    fn separating_decision(
        &self,
        samples: &SampleSet,
        w_bad: &[f64],
        w_good: &[f64],
    ) -> Result<Option<Vec<f64>>> {
        self.base.separating_decision(samples, w_bad, w_good)
    }
}

/// Bounds on the optimality gap of `x_hat`: the robust pair of the shifted
/// objective `H(x̂; ξ) − H(x; ξ)`. `x_hat` must not be computed from
/// `samples`, otherwise the interval loses its coverage guarantee.
pub fn gap_bounds(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    ball: &DivergenceBall,
    x_hat: &[f64],
    settings: &DroSettings,
) -> Result<DroBounds> {
    if x_hat.len() != program.decision_dim() {
        return Err(Error::Dimension {
            what: "candidate solution",
            expected: program.decision_dim(),
            got: x_hat.len(),
        });
    }
    if x_hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(
            "candidate solution has non-finite entries".into(),
        ));
    }
    for k in 0..program.num_deterministic_constraints() {
        let g = program.deterministic_constraint(k, x_hat);
        if g > 1e-6 {
            return Err(Error::Domain(format!(
                "candidate solution violates deterministic constraint {k} by {g:.3e}"
            )));
        }
    }
    let shifted = ShiftedProgram {
        base: program,
        reference: x_hat,
    };
    // gap(w) = Σ w H(x̂) − φ(w) = −φ_shifted(w)
    let b = dro_bounds(&shifted, samples, ball, settings)?;
    Ok(DroBounds {
        lower: -b.upper,
        upper: -b.lower,
        lower_weights: b.upper_weights,
        upper_weights: b.lower_weights,
        diagnostics: b.diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{ball_contains, pinsker_holds};
    use crate::problems::{cvar_problem, portfolio_problem, quadratic_problem, GenericProgram};
    use crate::stats::{sample_mvnormal, RandomSource};

    // Simplex grid (step 1e-3) polished by SLSQP, data (−1, 0, 1), τ = 0.1.
    const FIXTURE_MAX: f64 = 0.7483941492888283;
    const FIXTURE_MIN: f64 = 0.5776067795081403;

    fn ball(tau: f64, n: usize) -> DivergenceBall {
        DivergenceBall::with_threshold(tau, n).unwrap()
    }

    fn normal_data(seed: u64, n: usize) -> SampleSet {
        let mut rng = RandomSource::new(seed);
        SampleSet::from_scalars(&(0..n).map(|_| rng.standard_normal()).collect::<Vec<_>>()).unwrap()
    }

    fn saa_value(program: &dyn StochasticProgram, samples: &SampleSet) -> f64 {
        let u = vec![1.0 / samples.len() as f64; samples.len()];
        solve_weighted_saa(program, samples, &u).unwrap().value
    }

    fn assert_valid(b: &DroBounds, ball: &DivergenceBall) {
        for w in [&b.lower_weights, &b.upper_weights] {
            assert!(ball_contains(w, ball).unwrap().0);
            assert!(pinsker_holds(w));
        }
        assert!(b.lower <= b.upper + 1e-7);
    }

    #[test]
    fn quadratic_three_point_fixture() {
        let data = SampleSet::from_scalars(&[-1.0, 0.0, 1.0]).unwrap();
        let b = dro_bounds(
            &quadratic_problem(),
            &data,
            &ball(0.1, 3),
            &DroSettings::default(),
        )
        .unwrap();
        assert!((b.upper - FIXTURE_MAX).abs() < 1e-6, "{}", b.upper);
        assert!((b.lower - FIXTURE_MIN).abs() < 1e-6, "{}", b.lower);
        assert!(b.diagnostics.upper.converged);
        assert_valid(&b, &ball(0.1, 3));
    }

    #[test]
    fn zero_threshold_collapses_to_saa() {
        let data = normal_data(1, 20);
        let q = quadratic_problem();
        let b = dro_bounds(&q, &data, &ball(0.0, 20), &DroSettings::default()).unwrap();
        let v = saa_value(&q, &data);
        assert!((b.lower - v).abs() < 1e-12 && (b.upper - v).abs() < 1e-12);

        let x_hat = solve_weighted_saa(&q, &data, &[0.05; 20]).unwrap().x;
        let g = gap_bounds(&q, &data, &ball(0.0, 20), &x_hat, &DroSettings::default()).unwrap();
        assert!(g.lower.abs() < 1e-12 && g.upper.abs() < 1e-12);
    }

    /// For convex `H` without stochastic constraints the max side equals
    /// `min_x ψ(H(x; ξ))`, a one-dimensional convex problem for `p = 1`.
    fn minimax_oracle(
        program: &dyn StochasticProgram,
        samples: &SampleSet,
        ball: &DivergenceBall,
        lo: f64,
        hi: f64,
    ) -> f64 {
        let f = |x: f64| {
            max_linear_over_ball(&costs(program, samples, &[x]), ball)
                .unwrap()
                .value
        };
        let (mut a, mut b) = (lo, hi);
        let r = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..200 {
            let c = b - r * (b - a);
            let d = a + r * (b - a);
            if f(c) < f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        f(0.5 * (a + b))
    }

    #[test]
    fn max_side_matches_minimax_oracle() {
        let q = quadratic_problem();
        let cv = cvar_problem(0.9).unwrap();
        for seed in 0..6 {
            let data = normal_data(100 + seed, 40);
            let bl = ball(3.841, 40);
            let (side, diag) = maximize_minvalue(&q, &data, &bl, &DroSettings::default()).unwrap();
            assert!(diag.converged);
            let oracle = minimax_oracle(&q, &data, &bl, -3.0, 3.0);
            assert!(
                (side.value - oracle).abs() < 2e-6 * (1.0 + oracle),
                "{} vs {oracle}",
                side.value
            );
            let (side, _) = maximize_minvalue(&cv, &data, &bl, &DroSettings::default()).unwrap();
            let oracle = minimax_oracle(&cv, &data, &bl, -4.0, 4.0);
            assert!(
                (side.value - oracle).abs() < 1e-5 * (1.0 + oracle),
                "{} vs {oracle}",
                side.value
            );
        }
    }

    #[test]
    fn sandwich_on_random_instances() {
        let q = quadratic_problem();
        let cv = cvar_problem(0.9).unwrap();
        for seed in 0..10 {
            let n = 10 + 7 * seed as usize;
            let data = normal_data(seed, n);
            let bl = DivergenceBall::calibrated(2, 0.05, n).unwrap();
            for program in [&q as &dyn StochasticProgram, &cv] {
                let b = dro_bounds(program, &data, &bl, &DroSettings::default()).unwrap();
                let v = saa_value(program, &data);
                assert!(b.lower <= v + 1e-7 && v <= b.upper + 1e-7);
                assert_valid(&b, &bl);
            }
        }
    }

    #[test]
    fn portfolio_bounds_bracket_saa() {
        let p = portfolio_problem(0.9, 1.0, 2).unwrap();
        let cov = vec![vec![1.0, 0.0], vec![0.0, 4.0]];
        let bl = DivergenceBall::calibrated(5, 0.05, 50).unwrap();
        for seed in 0..3 {
            let data =
                sample_mvnormal(&mut RandomSource::new(seed), &[0.8, 1.2], &cov, 50).unwrap();
            let b = dro_bounds(&p, &data, &bl, &DroSettings::default()).unwrap();
            let v = saa_value(&p, &data);
            assert!(
                b.lower <= v + 1e-7 && v <= b.upper + 1e-7,
                "{} {v} {}",
                b.lower,
                b.upper
            );
            assert_valid(&b, &bl);
        }
    }

    #[test]
    fn gap_bounds_contain_sample_gap() {
        let q = quadratic_problem();
        let data = normal_data(9, 60);
        let bl = DivergenceBall::calibrated(2, 0.05, 60).unwrap();
        let g = gap_bounds(&q, &data, &bl, &[0.62], &DroSettings::default()).unwrap();
        let u = vec![1.0 / 60.0; 60];
        let sample_gap = weighted_objective(&q, &data, &u, &[0.62]) - saa_value(&q, &data);
        assert!(g.lower <= sample_gap + 1e-7 && sample_gap <= g.upper + 1e-7);
        assert_valid(&g, &bl);
    }

    #[test]
    fn restarts_are_permutation_equivariant() {
        let data = normal_data(4, 15);
        let order: Vec<usize> = (0..15).rev().collect();
        let permuted = data.permuted(&order);
        let a = start_weights(&data, 7, 3);
        let b = start_weights(&permuted, 7, 3);
        for (i, &o) in order.iter().enumerate() {
            assert_eq!(b[i], a[o]);
        }
    }

    #[test]
    fn shrinking_lands_inside() {
        let data = normal_data(2, 30);
        let bl = ball(1.0, 30);
        let w = shrink_into_ball(&start_weights(&data, 0, 1), &bl);
        let s = burg_statistic_raw(&w);
        assert!(s <= bl.threshold && s > 0.99 * bl.threshold);
    }

    #[test]
    fn rejects_single_observation_and_bad_candidates() {
        let q = quadratic_problem();
        let one = SampleSet::from_scalars(&[1.0]).unwrap();
        let fake = DivergenceBall {
            df: 2,
            beta: 0.05,
            threshold: 1.0,
            n: 1,
        };
        assert!(matches!(
            dro_bounds(&q, &one, &fake, &DroSettings::default()),
            Err(Error::Domain(_))
        ));
        let data = normal_data(0, 5);
        let bl = ball(1.0, 5);
        assert!(matches!(
            gap_bounds(&q, &data, &bl, &[0.0, 1.0], &DroSettings::default()),
            Err(Error::Dimension { .. })
        ));
        let p = portfolio_problem(0.9, 1.0, 2).unwrap();
        let two = SampleSet::from_rows(&vec![vec![1.0, 1.0]; 5]).unwrap();
        assert!(matches!(
            gap_bounds(&p, &two, &bl, &[0.7, 0.7, 0.0], &DroSettings::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn generic_program_brackets_saa() {
        let g = GenericProgram::new("abs", 1, |x, xi| (x[0] - xi[0]).abs())
            .unwrap()
            .with_box(vec![-5.0], vec![5.0])
            .unwrap();
        let data = normal_data(3, 12);
        let bl = DivergenceBall::calibrated(2, 0.05, 12).unwrap();
        let settings = DroSettings {
            restarts: 2,
            ..DroSettings::default()
        };
        let b = dro_bounds(&g, &data, &bl, &settings).unwrap();
        let v = saa_value(&g, &data);
        assert!(b.lower <= v + 1e-7 && v <= b.upper + 1e-7);
        assert_eq!(b.diagnostics.inner_solver, InnerSolverTag::Generic);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn robust_pair_sandwiches_saa(seed in 0u64..1_000_000, n in 6usize..30, cvar in proptest::bool::ANY, tau in 0.1f64..8.0) {
            let program: Box<dyn StochasticProgram> = if cvar {
                Box::new(cvar_problem(0.8).unwrap())
            } else {
                Box::new(quadratic_problem())
            };
            let data = normal_data(seed, n);
            let b = dro_bounds(program.as_ref(), &data, &ball(tau, n), &DroSettings::default()).unwrap();
            let saa = saa_value(program.as_ref(), &data);
            proptest::prop_assert!(b.lower <= saa + 1e-7 && saa <= b.upper + 1e-7);
            assert_valid(&b, &ball(tau, n));
        }
    }
}
