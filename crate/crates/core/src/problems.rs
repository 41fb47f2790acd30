//! Stochastic programs `min_x E[H(x; ξ)]` subject to `E[F_k(x; ξ)] ≤ 0` and
//! `g_k(x) ≤ 0`, together with their weighted sample-average solvers.
//!
//! Three benchmark programs ship with closed-form or LP solvers:
//! the quadratic `E[(x − ξ)²]`, CVaR estimation `x + E[(ξ − x)⁺]/(1 − α)`,
//! and mean-CVaR portfolio selection. User programs implement
//! [`StochasticProgram`] or use [`GenericProgram`], whose inner solver is a
//! penalized projected subgradient method with random restarts and no global
//! optimality guarantee.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lp::{solve_lp, LinearProgram, LpStatus};
use crate::sample::SampleSet;
use crate::stats::RandomSource;

/// Tolerance on weighted stochastic and deterministic constraints.
pub const CONSTRAINT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InnerSolverTag {
    ClosedForm,
    LpReducible,
    Generic,
}

impl fmt::Display for InnerSolverTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InnerSolverTag::ClosedForm => "closed-form",
            InnerSolverTag::LpReducible => "lp-reducible",
            InnerSolverTag::Generic => "generic",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSaaSolution {
    pub x: Vec<f64>,
    /// `Σ w_i H(x; ξ_i)`
    pub value: f64,
    /// Largest violation among weighted stochastic and deterministic
    /// constraints (0 when all hold).
    pub feasibility_residual: f64,
    /// False when the solution comes from the best-effort generic solver.
    pub exact: bool,
}

pub trait StochasticProgram: Send + Sync {
    fn name(&self) -> String;

    /// Decision dimension `p`.
    fn decision_dim(&self) -> usize;

    /// Dimension of one observation, when the program fixes it.
    fn data_dim(&self) -> Option<usize> {
        None
    }

    /// Number `m` of stochastic constraints `E[F_k] ≤ 0`.
    fn num_stochastic_constraints(&self) -> usize {
        0
    }

    /// Number `s` of deterministic constraints `g_k ≤ 0`.
    fn num_deterministic_constraints(&self) -> usize {
        0
    }

    fn objective(&self, x: &[f64], xi: &[f64]) -> f64;

    fn stochastic_constraint(&self, _k: usize, _x: &[f64], _xi: &[f64]) -> f64 {
        0.0
    }

    fn deterministic_constraint(&self, _k: usize, _x: &[f64]) -> f64 {
        0.0
    }

    fn solver_tag(&self) -> InnerSolverTag;

    /// `min_x Σ w_i H(x; ξ_i)` subject to the weighted stochastic and the
    /// deterministic constraints. An empty feasible set is
    /// [`Error::Infeasible`].
    fn solve_weighted(&self, samples: &SampleSet, w: &[f64]) -> Result<WeightedSaaSolution>;

    /// A decision that is feasible under weights `w_good` and violates some
    /// weighted stochastic constraint under `w_bad` by as much as possible.
    /// Used to cut infeasible weights away from the outer maximization.
    /// A decision satisfying the deterministic constraints that makes the
    /// largest weighted stochastic constraint under `w` as small as possible.
    /// Used to search for weights with a feasible inner problem.
    fn least_violating_decision(
        &self,
        _samples: &SampleSet,
        _w: &[f64],
    ) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }

    fn separating_decision(
        &self,
        _samples: &SampleSet,
        _w_bad: &[f64],
        _w_good: &[f64],
    ) -> Result<Option<Vec<f64>>> {
        Ok(None)
    }
}

/// `Σ w_i H(x; ξ_i)`
pub fn weighted_objective(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    w: &[f64],
    x: &[f64],
) -> f64 {
    samples
        .rows()
        .zip(w)
        .filter(|(_, &wi)| wi != 0.0)
        .map(|(xi, wi)| wi * program.objective(x, xi))
        .sum()
}

/// `Σ w_i F_k(x; ξ_i)`
pub fn weighted_constraint(
    program: &dyn StochasticProgram,
    k: usize,
    samples: &SampleSet,
    w: &[f64],
    x: &[f64],
) -> f64 {
    samples
        .rows()
        .zip(w)
        .filter(|(_, &wi)| wi != 0.0)
        .map(|(xi, wi)| wi * program.stochastic_constraint(k, x, xi))
        .sum()
}

/// Largest violation of the weighted stochastic and deterministic constraints.
pub fn feasibility_residual(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    w: &[f64],
    x: &[f64],
) -> f64 {
    let stochastic = (0..program.num_stochastic_constraints())
        .map(|k| weighted_constraint(program, k, samples, w, x));
    let deterministic = (0..program.num_deterministic_constraints())
        .map(|k| program.deterministic_constraint(k, x));
    stochastic
        .chain(deterministic)
        .fold(0.0, |acc, v| acc.max(v))
}

/// Validates dimensions, dispatches to the program's inner solver and
/// recomputes the reported value from the returned decision.
pub fn solve_weighted_saa(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    w: &[f64],
) -> Result<WeightedSaaSolution> {
    check_samples(program, samples)?;
    if w.len() != samples.len() {
        return Err(Error::Dimension {
            what: "weights vs sample count",
            expected: samples.len(),
            got: w.len(),
        });
    }
    let mut sol = program.solve_weighted(samples, w)?;
    if sol.x.len() != program.decision_dim() {
        return Err(Error::Dimension {
            what: "inner solution dimension",
            expected: program.decision_dim(),
            got: sol.x.len(),
        });
    }
    sol.value = weighted_objective(program, samples, w, &sol.x);
    sol.feasibility_residual = feasibility_residual(program, samples, w, &sol.x);
    Ok(sol)
}

pub fn check_samples(program: &dyn StochasticProgram, samples: &SampleSet) -> Result<()> {
    if let Some(d) = program.data_dim() {
        if samples.dim() != d {
            return Err(Error::Dimension {
                what: "observation dimension",
                expected: d,
                got: samples.dim(),
            });
        }
    }
    Ok(())
}

/// `H(x; ξ) = (x − ξ)²`; the weighted solution is the weighted mean and the
/// optimal value the weighted variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct QuadraticProblem;

pub fn quadratic_problem() -> QuadraticProblem {
    QuadraticProblem
}

impl StochasticProgram for QuadraticProblem {
    fn name(&self) -> String {
        "quadratic".into()
    }

    fn decision_dim(&self) -> usize {
        1
    }

    fn data_dim(&self) -> Option<usize> {
        Some(1)
    }

    fn objective(&self, x: &[f64], xi: &[f64]) -> f64 {
        (x[0] - xi[0]).powi(2)
    }

    fn solver_tag(&self) -> InnerSolverTag {
        InnerSolverTag::ClosedForm
    }

    fn solve_weighted(&self, samples: &SampleSet, w: &[f64]) -> Result<WeightedSaaSolution> {
        let mean: f64 = samples.rows().zip(w).map(|(xi, wi)| wi * xi[0]).sum();
        let value = samples
            .rows()
            .zip(w)
            .map(|(xi, wi)| wi * (xi[0] - mean).powi(2))
            .sum();
        Ok(WeightedSaaSolution {
            x: vec![mean],
            value,
            feasibility_residual: 0.0,
            exact: true,
        })
    }
}

/// `H(x; ξ) = x + (ξ − x)⁺ / (1 − α)`, whose minimum is the α-level CVaR.
#[derive(Debug, Clone, Copy)]
pub struct CvarProblem {
    alpha: f64,
}

pub fn cvar_problem(alpha: f64) -> Result<CvarProblem> {
    check_alpha(alpha)?;
    Ok(CvarProblem { alpha })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "alpha must lie in (0,1), got {alpha}"
        )))
    }
}

/// Smallest value whose cumulative weight (in sorted order) reaches `level`.
pub fn weighted_quantile(values: &[f64], w: &[f64], level: f64) -> f64 {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut cumulative = 0.0;
    for &i in &order {
        cumulative += w[i];
        if cumulative >= level - 1e-12 {
            return values[i];
        }
    }
    values[*order.last().expect("nonempty sample")]
}

impl CvarProblem {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Analytic CVaR of the standard normal: `φ(z_α) / (1 − α)`.
    pub fn standard_normal_value(&self) -> Result<f64> {
        let z = crate::stats::normal_quantile(self.alpha)?;
        let density = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        Ok(density / (1.0 - self.alpha))
    }
}

impl StochasticProgram for CvarProblem {
    fn name(&self) -> String {
        "cvar".into()
    }

    fn decision_dim(&self) -> usize {
        1
    }

    fn data_dim(&self) -> Option<usize> {
        Some(1)
    }

    fn objective(&self, x: &[f64], xi: &[f64]) -> f64 {
        x[0] + (xi[0] - x[0]).max(0.0) / (1.0 - self.alpha)
    }

    fn solver_tag(&self) -> InnerSolverTag {
        InnerSolverTag::ClosedForm
    }

    fn solve_weighted(&self, samples: &SampleSet, w: &[f64]) -> Result<WeightedSaaSolution> {
        let values: Vec<f64> = samples.rows().map(|r| r[0]).collect();
        let x = vec![weighted_quantile(&values, w, self.alpha)];
        Ok(WeightedSaaSolution {
            value: weighted_objective(self, samples, w, &x),
            x,
            feasibility_residual: 0.0,
            exact: true,
        })
    }
}

/// Mean-CVaR portfolio selection over `d` assets without short sales.
///
/// Decision `(x_1, …, x_d, c)`; `H = c + (−ξᵀx − c)⁺ / (1 − α)`; one
/// stochastic constraint `F = r_b − ξᵀx`; deterministic constraints
/// `Σ x_i ≤ 1`, `Σ x_i ≥ 1` and `x_i ≥ 0`.
#[derive(Debug, Clone, Copy)]
pub struct PortfolioProblem {
    alpha: f64,
    target_return: f64,
    assets: usize,
}

pub fn portfolio_problem(
    alpha: f64,
    target_return: f64,
    assets: usize,
) -> Result<PortfolioProblem> {
    check_alpha(alpha)?;
    if assets == 0 {
        return Err(Error::Domain("portfolio needs at least one asset".into()));
    }
    if !target_return.is_finite() {
        return Err(Error::Domain("target return must be finite".into()));
    }
    Ok(PortfolioProblem {
        alpha,
        target_return,
        assets,
    })
}

impl PortfolioProblem {
    fn returns(x: &[f64], xi: &[f64]) -> f64 {
        x.iter().zip(xi).map(|(a, b)| a * b).sum()
    }

    /// Variables: x (d, ≥ 0), c (free), u_i (≥ 0) for rows with positive weight.
    fn weighted_lp(&self, samples: &SampleSet, w: &[f64]) -> (LinearProgram, Vec<usize>) {
        let d = self.assets;
        let active: Vec<usize> = (0..samples.len()).filter(|&i| w[i] > 0.0).collect();
        let nv = d + 1 + active.len();
        let scale = 1.0 / (1.0 - self.alpha);
        let mut objective = vec![0.0; nv];
        objective[d] = 1.0;
        for (k, &i) in active.iter().enumerate() {
            objective[d + 1 + k] = w[i] * scale;
        }
        let mut lp = LinearProgram::new(objective).bounds(d, f64::NEG_INFINITY, f64::INFINITY);
        // −ξ_iᵀx − c − u_i ≤ 0
        for (k, &i) in active.iter().enumerate() {
            let mut row = vec![0.0; nv];
            for (j, v) in samples.row(i).iter().enumerate() {
                row[j] = -v;
            }
            row[d] = -1.0;
            row[d + 1 + k] = -1.0;
            lp = lp.leq(row, 0.0);
        }
        // Σ w_i (r_b − ξ_iᵀx) ≤ 0
        let mut row = vec![0.0; nv];
        for i in 0..samples.len() {
            for (j, v) in samples.row(i).iter().enumerate() {
                row[j] -= w[i] * v;
            }
        }
        lp = lp.leq(row, -self.target_return);
        let mut budget = vec![0.0; nv];
        budget[..d].iter_mut().for_each(|v| *v = 1.0);
        (lp.eq(budget, 1.0), active)
    }
}

impl StochasticProgram for PortfolioProblem {
    fn name(&self) -> String {
        "portfolio".into()
    }

    fn decision_dim(&self) -> usize {
        self.assets + 1
    }

    fn data_dim(&self) -> Option<usize> {
        Some(self.assets)
    }

    fn num_stochastic_constraints(&self) -> usize {
        1
    }

    fn num_deterministic_constraints(&self) -> usize {
        self.assets + 2
    }

    fn objective(&self, x: &[f64], xi: &[f64]) -> f64 {
        let d = self.assets;
        let loss = -Self::returns(&x[..d], xi);
        x[d] + (loss - x[d]).max(0.0) / (1.0 - self.alpha)
    }

    fn stochastic_constraint(&self, _k: usize, x: &[f64], xi: &[f64]) -> f64 {
        self.target_return - Self::returns(&x[..self.assets], xi)
    }

    fn deterministic_constraint(&self, k: usize, x: &[f64]) -> f64 {
        let d = self.assets;
        let total: f64 = x[..d].iter().sum();
        match k {
            0 => total - 1.0,
            1 => 1.0 - total,
            _ => -x[k - 2],
        }
    }

    fn solver_tag(&self) -> InnerSolverTag {
        InnerSolverTag::LpReducible
    }

    fn solve_weighted(&self, samples: &SampleSet, w: &[f64]) -> Result<WeightedSaaSolution> {
        let (lp, _) = self.weighted_lp(samples, w);
        let sol = solve_lp(&lp)?;
        match sol.status {
            LpStatus::Optimal => {}
            LpStatus::Infeasible => {
                return Err(Error::Infeasible(
                    "no portfolio meets the weighted return constraint".into(),
                ))
            }
            LpStatus::Unbounded => return Err(Error::Unbounded("weighted portfolio LP".into())),
        }
        let d = self.assets;
        let mut x = sol.x[..=d].to_vec();
        for v in x[..d].iter_mut() {
            *v = v.max(0.0);
        }
        // c is any weighted (α)-quantile of the loss; re-centre it exactly.
        let losses: Vec<f64> = samples.rows().map(|r| -Self::returns(&x[..d], r)).collect();
        x[d] = weighted_quantile(&losses, w, self.alpha);
        Ok(WeightedSaaSolution {
            value: weighted_objective(self, samples, w, &x),
            feasibility_residual: feasibility_residual(self, samples, w, &x),
            x,
            exact: true,
        })
    }

    fn least_violating_decision(&self, samples: &SampleSet, w: &[f64]) -> Result<Option<Vec<f64>>> {
        // r_b − (Σ w ξ)ᵀx is smallest with everything in the best asset.
        let d = self.assets;
        let mut mean = vec![0.0; d];
        for (row, wi) in samples.rows().zip(w) {
            for j in 0..d {
                mean[j] += wi * row[j];
            }
        }
        let best = (0..d).fold(0, |b, j| if mean[j] > mean[b] { j } else { b });
        let mut x = vec![0.0; d + 1];
        x[best] = 1.0;
        Ok(Some(x))
    }

    fn separating_decision(
        &self,
        samples: &SampleSet,
        w_bad: &[f64],
        w_good: &[f64],
    ) -> Result<Option<Vec<f64>>> {
        // min_x Σ w_bad (r_b − ξᵀx)  s.t.  Σ w_good (r_b − ξᵀx) ≤ 0, x ∈ simplex
        let d = self.assets;
        let mean_under = |w: &[f64]| -> Vec<f64> {
            let mut m = vec![0.0; d];
            for (row, wi) in samples.rows().zip(w) {
                for j in 0..d {
                    m[j] += wi * row[j];
                }
            }
            m
        };
        let bad = mean_under(w_bad);
        let good = mean_under(w_good);
        let lp = LinearProgram::new(bad.iter().map(|v| -v).collect())
            .leq(good.iter().map(|v| -v).collect(), -self.target_return)
            .eq(vec![1.0; d], 1.0);
        let sol = solve_lp(&lp)?;
        if !sol.is_optimal() || self.target_return + sol.value <= 0.0 {
            return Ok(None);
        }
        let mut x = sol.x;
        x.push(0.0);
        Ok(Some(x))
    }
}

type ObjectiveFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
type ConstraintFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Settings of the projected-subgradient fallback.
#[derive(Debug, Clone, Copy)]
pub struct SubgradientSettings {
    /// Step size numerator `a` in `a / (k + b)`.
    pub step_scale: f64,
    /// Step size offset `b`.
    pub step_offset: f64,
    pub iterations: usize,
    pub restarts: usize,
    /// Exact-penalty weight on constraint violations.
    pub penalty: f64,
    pub seed: u64,
}

impl Default for SubgradientSettings {
    fn default() -> Self {
        SubgradientSettings {
            step_scale: 1.0,
            step_offset: 10.0,
            iterations: 3000,
            restarts: 5,
            penalty: 1e3,
            seed: 0,
        }
    }
}

/// A user-defined program built from evaluator closures. Decisions live in
/// the box `[lower, upper]` (used for projection and restart sampling).
#[derive(Clone)]
pub struct GenericProgram {
    name: String,
    dim: usize,
    data_dim: Option<usize>,
    objective: ObjectiveFn,
    stochastic: Vec<ObjectiveFn>,
    deterministic: Vec<ConstraintFn>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    start: Vec<f64>,
    settings: SubgradientSettings,
}

impl fmt::Debug for GenericProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GenericProgram")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("m", &self.stochastic.len())
            .field("s", &self.deterministic.len())
            .finish()
    }
}

impl GenericProgram {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        objective: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("decision dimension must be >= 1".into()));
        }
        Ok(GenericProgram {
            name: name.into(),
            dim,
            data_dim: None,
            objective: Arc::new(objective),
            stochastic: Vec::new(),
            deterministic: Vec::new(),
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
            start: vec![0.0; dim],
            settings: SubgradientSettings::default(),
        })
    }

    pub fn with_data_dim(mut self, d: usize) -> Self {
        self.data_dim = Some(d);
        self
    }

    /// Adds `E[F(x; ξ)] ≤ 0`.
    pub fn with_stochastic_constraint(
        mut self,
        f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.stochastic.push(Arc::new(f));
        self
    }

    /// Adds `g(x) ≤ 0`.
    pub fn with_deterministic_constraint(
        mut self,
        g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.deterministic.push(Arc::new(g));
        self
    }

    pub fn with_box(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != self.dim || upper.len() != self.dim {
            return Err(Error::Dimension {
                what: "box bounds",
                expected: self.dim,
                got: lower.len().min(upper.len()),
            });
        }
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Err(Error::Domain("box lower bound exceeds upper bound".into()));
        }
        self.lower = lower;
        self.upper = upper;
        Ok(self)
    }

    pub fn with_start(mut self, start: Vec<f64>) -> Result<Self> {
        if start.len() != self.dim {
            return Err(Error::Dimension {
                what: "start point",
                expected: self.dim,
                got: start.len(),
            });
        }
        self.start = start;
        Ok(self)
    }

    pub fn with_settings(mut self, settings: SubgradientSettings) -> Self {
        self.settings = settings;
        self
    }

    fn project(&self, x: &mut [f64]) {
        for ((v, l), u) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*l, *u);
        }
    }

    fn restart_point(&self, rng: &mut RandomSource) -> Vec<f64> {
        (0..self.dim)
            .map(|j| {
                let (l, u) = (self.lower[j], self.upper[j]);
                if l.is_finite() && u.is_finite() {
                    l + (u - l) * rng.uniform()
                } else {
                    self.start[j] + (1.0 + self.start[j].abs()) * rng.standard_normal()
                }
            })
            .collect()
    }

    /// Minimizes `f` over the box by normalized subgradient steps
    /// `a/(k+b)` with central-difference subgradients, keeping the best point.
    fn subgradient_minimize(&self, f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
        let s = &self.settings;
        let mut rng = RandomSource::new(s.seed);
        let mut best_x = self.start.clone();
        self.project(&mut best_x);
        let mut best_f = f(&best_x);
        let mut grad = vec![0.0; self.dim];
        for restart in 0..s.restarts.max(1) {
            let mut x = if restart == 0 {
                best_x.clone()
            } else {
                self.restart_point(&mut rng)
            };
            self.project(&mut x);
            for k in 0..s.iterations {
                for j in 0..self.dim {
                    let h = 1e-6 * (1.0 + x[j].abs());
                    let orig = x[j];
                    x[j] = orig + h;
                    let fp = f(&x);
                    x[j] = orig - h;
                    let fm = f(&x);
                    x[j] = orig;
                    grad[j] = (fp - fm) / (2.0 * h);
                }
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if !(norm > 0.0) || !norm.is_finite() {
                    break;
                }
                let step = s.step_scale / (k as f64 + s.step_offset);
                for j in 0..self.dim {
                    x[j] -= step * grad[j] / norm;
                }
                self.project(&mut x);
                let fx = f(&x);
                if fx < best_f {
                    best_f = fx;
                    best_x.copy_from_slice(&x);
                }
            }
        }
        best_x
    }
}

impl StochasticProgram for GenericProgram {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn decision_dim(&self) -> usize {
        self.dim
    }

    fn data_dim(&self) -> Option<usize> {
        self.data_dim
    }

    fn num_stochastic_constraints(&self) -> usize {
        self.stochastic.len()
    }

    fn num_deterministic_constraints(&self) -> usize {
        self.deterministic.len()
    }

    fn objective(&self, x: &[f64], xi: &[f64]) -> f64 {
        (self.objective)(x, xi)
    }

    fn stochastic_constraint(&self, k: usize, x: &[f64], xi: &[f64]) -> f64 {
        (self.stochastic[k])(x, xi)
    }

    fn deterministic_constraint(&self, k: usize, x: &[f64]) -> f64 {
        (self.deterministic[k])(x)
    }

    fn solver_tag(&self) -> InnerSolverTag {
        InnerSolverTag::Generic
    }

    fn solve_weighted(&self, samples: &SampleSet, w: &[f64]) -> Result<WeightedSaaSolution> {
        let rho = self.settings.penalty;
        let penalized = |x: &[f64]| {
            weighted_objective(self, samples, w, x)
                + rho * feasibility_residual(self, samples, w, x).max(0.0)
        };
        let x = self.subgradient_minimize(&penalized);
        let residual = feasibility_residual(self, samples, w, &x);
        if residual > 1e-6 {
            return Err(Error::Infeasible(format!(
                "generic solver found no feasible decision (best violation {residual:.3e})"
            )));
        }
        Ok(WeightedSaaSolution {
            value: weighted_objective(self, samples, w, &x),
            x,
            feasibility_residual: residual,
            exact: false,
        })
    }

    fn least_violating_decision(&self, samples: &SampleSet, w: &[f64]) -> Result<Option<Vec<f64>>> {
        let rho = self.settings.penalty;
        let score = |x: &[f64]| {
            let worst = (0..self.stochastic.len())
                .map(|k| weighted_constraint(self, k, samples, w, x))
                .fold(f64::NEG_INFINITY, f64::max);
            let det = (0..self.deterministic.len())
                .map(|k| self.deterministic_constraint(k, x).max(0.0))
                .sum::<f64>();
            worst + rho * det
        };
        Ok(Some(self.subgradient_minimize(&score)))
    }

    fn separating_decision(
        &self,
        samples: &SampleSet,
        w_bad: &[f64],
        w_good: &[f64],
    ) -> Result<Option<Vec<f64>>> {
        let rho = self.settings.penalty;
        let score = |x: &[f64]| {
            let bad: f64 = (0..self.stochastic.len())
                .map(|k| weighted_constraint(self, k, samples, w_bad, x).max(0.0))
                .sum();
            bad + rho * feasibility_residual(self, samples, w_good, x)
        };
        let x = self.subgradient_minimize(&score);
        let still_violated = (0..self.stochastic.len())
            .any(|k| weighted_constraint(self, k, samples, w_bad, &x) > CONSTRAINT_TOL);
        if still_violated && feasibility_residual(self, samples, w_good, &x) <= 1e-6 {
            Ok(Some(x))
        } else {
            Ok(None)
        }
    }
}

/// Built-in problem selection as read from a config file or the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub problem: ProblemKind,
    pub alpha: f64,
    pub r_b: f64,
    /// Mean of the normal data-generating distribution.
    pub mean: Vec<f64>,
    /// Covariance of the normal data-generating distribution.
    pub cov: Vec<Vec<f64>>,
    pub dimension: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProblemKind {
    Quadratic,
    Cvar,
    Portfolio,
}

impl std::str::FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(ProblemKind::Quadratic),
            "cvar" => Ok(ProblemKind::Cvar),
            "portfolio" => Ok(ProblemKind::Portfolio),
            other => Err(Error::Config(vec![format!(
                "problem: unknown value '{other}' (expected quadratic, cvar or portfolio)"
            )])),
        }
    }
}

impl fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProblemKind::Quadratic => "quadratic",
            ProblemKind::Cvar => "cvar",
            ProblemKind::Portfolio => "portfolio",
        })
    }
}

pub const PROBLEM_KEYS: [&str; 6] = ["problem", "alpha", "r_b", "mean", "cov", "dimension"];

impl ProblemSpec {
    /// Defaults: standard normal data for quadratic/CVaR (α = 0.9); the
    /// two-asset instance with mean (0.8, 1.2), covariance diag(1, 4),
    /// r_b = 1 and α = 0.9 for the portfolio.
    pub fn defaults(kind: ProblemKind) -> Self {
        match kind {
            ProblemKind::Quadratic | ProblemKind::Cvar => ProblemSpec {
                problem: kind,
                alpha: 0.9,
                r_b: 1.0,
                mean: vec![0.0],
                cov: vec![vec![1.0]],
                dimension: 1,
            },
            ProblemKind::Portfolio => ProblemSpec {
                problem: kind,
                alpha: 0.9,
                r_b: 1.0,
                mean: vec![0.8, 1.2],
                cov: vec![vec![1.0, 0.0], vec![0.0, 4.0]],
                dimension: 2,
            },
        }
    }

    /// Reads a spec from a TOML table, reporting every schema violation.
    /// Unknown keys are errors unless listed in `extra_keys`.
    pub fn from_table(table: &toml::Table, extra_keys: &[&str]) -> Result<Self> {
        let mut errors = Vec::new();
        for key in table.keys() {
            if !PROBLEM_KEYS.contains(&key.as_str()) && !extra_keys.contains(&key.as_str()) {
                errors.push(format!("unknown key '{key}'"));
            }
        }
        let kind = match table.get("problem") {
            None => {
                errors.push("missing key 'problem'".into());
                None
            }
            Some(toml::Value::String(s)) => match s.parse::<ProblemKind>() {
                Ok(k) => Some(k),
                Err(Error::Config(mut e)) => {
                    errors.append(&mut e);
                    None
                }
                Err(e) => {
                    errors.push(e.to_string());
                    None
                }
            },
            Some(_) => {
                errors.push("problem: expected a string".into());
                None
            }
        };
        let mut spec = ProblemSpec::defaults(kind.unwrap_or(ProblemKind::Quadratic));
        let mut number = |key: &str| -> Option<f64> {
            match table.get(key) {
                None => None,
                Some(toml::Value::Float(v)) => Some(*v),
                Some(toml::Value::Integer(v)) => Some(*v as f64),
                Some(_) => {
                    errors.push(format!("{key}: expected a number"));
                    None
                }
            }
        };
        if let Some(a) = number("alpha") {
            spec.alpha = a;
        }
        if let Some(r) = number("r_b") {
            spec.r_b = r;
        }
        if let Some(d) = number("dimension") {
            if d >= 1.0 && d.fract() == 0.0 {
                spec.dimension = d as usize;
                if table.get("mean").is_none() {
                    spec.mean = vec![0.0; spec.dimension];
                }
                if table.get("cov").is_none() {
                    spec.cov = identity(spec.dimension);
                }
            } else {
                errors.push(format!("dimension: expected a positive integer, got {d}"));
            }
        }
        if let Some(v) = table.get("mean") {
            match as_vector(v) {
                Some(m) => spec.mean = m,
                None => errors.push("mean: expected an array of numbers".into()),
            }
        }
        if let Some(v) = table.get("cov") {
            match v
                .as_array()
                .and_then(|rows| rows.iter().map(as_vector).collect::<Option<Vec<_>>>())
            {
                Some(c) => spec.cov = c,
                None => errors.push("cov: expected an array of number arrays".into()),
            }
        }
        if table.get("dimension").is_none() {
            spec.dimension = spec.mean.len();
        }
        errors.extend(spec.check());
        if errors.is_empty() {
            Ok(spec)
        } else {
            Err(Error::Config(errors))
        }
    }

    /// Consistency problems, empty when the spec is usable.
    pub fn check(&self) -> Vec<String> {
        let mut errors = Vec::new();
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            errors.push(format!("alpha: must lie in (0,1), got {}", self.alpha));
        }
        if !self.r_b.is_finite() {
            errors.push("r_b: must be finite".into());
        }
        if self.mean.len() != self.dimension {
            errors.push(format!(
                "mean: has {} entries but dimension is {}",
                self.mean.len(),
                self.dimension
            ));
        }
        if self.cov.len() != self.dimension || self.cov.iter().any(|r| r.len() != self.dimension) {
            errors.push(format!("cov: must be {0}x{0}", self.dimension));
        }
        if matches!(self.problem, ProblemKind::Quadratic | ProblemKind::Cvar) && self.dimension != 1
        {
            errors.push(format!(
                "dimension: {} problem needs dimension 1",
                self.problem
            ));
        }
        errors
    }

    pub fn build(&self) -> Result<Box<dyn StochasticProgram>> {
        let errors = self.check();
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        Ok(match self.problem {
            ProblemKind::Quadratic => Box::new(quadratic_problem()),
            ProblemKind::Cvar => Box::new(cvar_problem(self.alpha)?),
            ProblemKind::Portfolio => {
                Box::new(portfolio_problem(self.alpha, self.r_b, self.dimension)?)
            }
        })
    }
}

fn identity(d: usize) -> Vec<Vec<f64>> {
    (0..d)
        .map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect()
}

fn as_vector(v: &toml::Value) -> Option<Vec<f64>> {
    v.as_array()?
        .iter()
        .map(|x| x.as_float().or_else(|| x.as_integer().map(|i| i as f64)))
        .collect()
}
