//! Confidence intervals for the optimal value and for the optimality gap of a
//! candidate solution.
//!
//! The EL intervals take their endpoints from the robust pair over a
//! χ²-calibrated divergence ball with `p + m + 1` degrees of freedom
//! (`p` decision variables, `m` stochastic constraints). The CLT, split-sample
//! CLT and single-replication (SRP) intervals are the usual normal-theory
//! baselines; for stochastically constrained programs they are heuristics.
//!
//! The SRP point estimate is the plain mean of `H(x̂; ξ_i) − H(x̂*_n; ξ_i)`
//! (no square on the summand), matching the centered variance used for its
//! standard error.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceBall;
use crate::drosolve::{dro_bounds, gap_bounds, DroDiagnostics, DroSettings};
use crate::error::{Error, Result};
use crate::problems::{solve_weighted_saa, StochasticProgram};
use crate::sample::SampleSet;
use crate::stats::normal_quantile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "EL")]
    El,
    #[serde(rename = "CLT")]
    Clt,
    #[serde(rename = "CLT2")]
    Clt2,
    #[serde(rename = "SRP")]
    Srp,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::El, Method::Clt, Method::Clt2, Method::Srp];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::El => "EL",
            Method::Clt => "CLT",
            Method::Clt2 => "CLT2",
            Method::Srp => "SRP",
        }
    }

    /// Methods that produce optimal-value intervals.
    pub fn estimates_value(&self) -> bool {
        !matches!(self, Method::Srp)
    }

    /// Methods that produce optimality-gap intervals.
    pub fn estimates_gap(&self) -> bool {
        matches!(self, Method::El | Method::Srp)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "el" => Ok(Method::El),
            "clt" => Ok(Method::Clt),
            "clt2" => Ok(Method::Clt2),
            "srp" => Ok(Method::Srp),
            _ => Err(Error::Domain(format!(
                "unknown method '{s}' (expected el, clt, clt2 or srp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceInterval {
    pub lower: f64,
    pub upper: f64,
    pub beta: f64,
    pub method: Method,
    /// χ² degrees of freedom, for EL intervals.
    pub df_used: Option<u32>,
    /// True when the sample standard deviation was zero.
    pub degenerate: bool,
    /// Robust-pair solver diagnostics, for EL intervals.
    pub diagnostics: Option<DroDiagnostics>,
}

impl ConfidenceInterval {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("beta must lie in (0,1), got {beta}")))
    }
}

fn check_size(samples: &SampleSet, min: usize, method: Method) -> Result<()> {
    if samples.len() < min {
        return Err(Error::Domain(format!(
            "{method} needs at least {min} observations, got {}",
            samples.len()
        )));
    }
    Ok(())
}

/// `p + 1` without stochastic constraints, `p + m + 1` with them.
pub fn el_degrees_of_freedom(program: &dyn StochasticProgram) -> u32 {
    (program.decision_dim() + program.num_stochastic_constraints() + 1) as u32
}

pub fn el_ball(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    beta: f64,
) -> Result<DivergenceBall> {
    check_beta(beta)?;
    check_size(samples, 2, Method::El)?;
    DivergenceBall::calibrated(el_degrees_of_freedom(program), beta, samples.len())
}

pub fn el_ci_optimal_value(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    beta: f64,
    settings: &DroSettings,
) -> Result<ConfidenceInterval> {
    let ball = el_ball(program, samples, beta)?;
    let b = dro_bounds(program, samples, &ball, settings)?;
    Ok(ConfidenceInterval {
        lower: b.lower,
        upper: b.upper.max(b.lower),
        beta,
        method: Method::El,
        df_used: Some(ball.df),
        degenerate: false,
        diagnostics: Some(b.diagnostics),
    })
}

/// `x_hat` must not depend on `samples`.
pub fn el_ci_gap(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    x_hat: &[f64],
    beta: f64,
    settings: &DroSettings,
) -> Result<ConfidenceInterval> {
    let ball = el_ball(program, samples, beta)?;
    let b = gap_bounds(program, samples, &ball, x_hat, settings)?;
    Ok(ConfidenceInterval {
        lower: b.lower,
        upper: b.upper.max(b.lower),
        beta,
        method: Method::El,
        df_used: Some(ball.df),
        degenerate: false,
        diagnostics: Some(b.diagnostics),
    })
}

/// Mean and `1/(n−1)` standard deviation.
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

fn uniform_saa(program: &dyn StochasticProgram, samples: &SampleSet) -> Result<Vec<f64>> {
    let w = vec![1.0 / samples.len() as f64; samples.len()];
    Ok(solve_weighted_saa(program, samples, &w)?.x)
}

fn objective_values(program: &dyn StochasticProgram, samples: &SampleSet, x: &[f64]) -> Vec<f64> {
    samples.rows().map(|xi| program.objective(x, xi)).collect()
}

/// `ẑ ± z_{1−β/2} σ̂ / √n` around the sample-average optimum.
pub fn clt_ci(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    beta: f64,
) -> Result<ConfidenceInterval> {
    check_beta(beta)?;
    check_size(samples, 2, Method::Clt)?;
    let x = uniform_saa(program, samples)?;
    let (z_hat, sd) = mean_sd(&objective_values(program, samples, &x));
    let half = normal_quantile(1.0 - beta / 2.0)? * sd / (samples.len() as f64).sqrt();
    Ok(ConfidenceInterval {
        lower: z_hat - half,
        upper: z_hat + half,
        beta,
        method: Method::Clt,
        df_used: None,
        degenerate: sd == 0.0,
        diagnostics: None,
    })
}

/// Split-sample interval: the first `⌈n/2⌉` rows give the optimizer and the
/// low-biased lower end, the remaining rows evaluate that optimizer for the
/// high-biased upper end.
pub fn clt2_ci(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    beta: f64,
) -> Result<ConfidenceInterval> {
    check_beta(beta)?;
    check_size(samples, 4, Method::Clt2)?;
    let n = samples.len();
    let split = n.div_ceil(2);
    let first = samples.slice(0, split);
    let second = samples.slice(split, n);
    let x = uniform_saa(program, &first)?;
    let z = normal_quantile(1.0 - beta / 2.0)?;
    let (z_low, sd_low) = mean_sd(&objective_values(program, &first, &x));
    let (z_high, sd_high) = mean_sd(&objective_values(program, &second, &x));
    Ok(ConfidenceInterval {
        lower: z_low - z * sd_low / (first.len() as f64).sqrt(),
        upper: z_high + z * sd_high / (second.len() as f64).sqrt(),
        beta,
        method: Method::Clt2,
        df_used: None,
        degenerate: sd_low == 0.0 || sd_high == 0.0,
        diagnostics: None,
    })
}

/// One-sided `[0, Ĝ + z_{1−β} σ̃ / √n]` for the gap of `x_hat`, with `Ĝ` the
/// mean of `H(x̂; ξ_i) − H(x̂*_n; ξ_i)`. The upper end is clamped at 0.
pub fn srp_gap_ci(
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    x_hat: &[f64],
    beta: f64,
) -> Result<ConfidenceInterval> {
    check_beta(beta)?;
    check_size(samples, 2, Method::Srp)?;
    if x_hat.len() != program.decision_dim() {
        return Err(Error::Dimension {
            what: "candidate solution",
            expected: program.decision_dim(),
            got: x_hat.len(),
        });
    }
    let x_star = uniform_saa(program, samples)?;
    let diffs: Vec<f64> = samples
        .rows()
        .map(|xi| program.objective(x_hat, xi) - program.objective(&x_star, xi))
        .collect();
    let (gap, sd) = mean_sd(&diffs);
    let upper = gap + normal_quantile(1.0 - beta)? * sd / (samples.len() as f64).sqrt();
    Ok(ConfidenceInterval {
        lower: 0.0,
        upper: upper.max(0.0),
        beta,
        method: Method::Srp,
        df_used: None,
        degenerate: sd == 0.0,
        diagnostics: None,
    })
}

/// The optimal-value interval of `method`.
pub fn value_ci(
    method: Method,
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    beta: f64,
    settings: &DroSettings,
) -> Result<ConfidenceInterval> {
    match method {
        Method::El => el_ci_optimal_value(program, samples, beta, settings),
        Method::Clt => clt_ci(program, samples, beta),
        Method::Clt2 => clt2_ci(program, samples, beta),
        Method::Srp => Err(Error::Domain(
            "SRP estimates optimality gaps, not optimal values".into(),
        )),
    }
}

/// The optimality-gap interval of `method`.
pub fn gap_ci(
    method: Method,
    program: &dyn StochasticProgram,
    samples: &SampleSet,
    x_hat: &[f64],
    beta: f64,
    settings: &DroSettings,
) -> Result<ConfidenceInterval> {
    match method {
        Method::El => el_ci_gap(program, samples, x_hat, beta, settings),
        Method::Srp => srp_gap_ci(program, samples, x_hat, beta),
        other => Err(Error::Domain(format!(
            "{other} estimates optimal values, not optimality gaps"
        ))),
    }
}
