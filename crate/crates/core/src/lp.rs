//! Dense two-phase simplex with Bland's anti-cycling rule.
//!
//! Solves `min cᵀx` subject to `A x ≤ b`, `E x = f` and per-variable bounds
//! (infinite bounds allowed). Variables are mapped to nonnegative standard
//! form columns, every row gets a slack or an artificial, and phase one
//! minimizes the sum of artificials.

use crate::error::{Error, Result};

const PIVOT_TOL: f64 = 1e-9;
const FEAS_TOL: f64 = 1e-8;
const MAX_ITERATIONS: usize = 50_000;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearProgram {
    pub objective: Vec<f64>,
    pub ineq_rows: Vec<Vec<f64>>,
    pub ineq_rhs: Vec<f64>,
    pub eq_rows: Vec<Vec<f64>>,
    pub eq_rhs: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LinearProgram {
    /// `nvars` variables with bounds `[0, +∞)` and no rows.
    pub fn new(objective: Vec<f64>) -> Self {
        let n = objective.len();
        LinearProgram {
            objective,
            ineq_rows: Vec::new(),
            ineq_rhs: Vec::new(),
            eq_rows: Vec::new(),
            eq_rhs: Vec::new(),
            lower: vec![0.0; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn leq(mut self, row: Vec<f64>, rhs: f64) -> Self {
        self.ineq_rows.push(row);
        self.ineq_rhs.push(rhs);
        self
    }

    pub fn eq(mut self, row: Vec<f64>, rhs: f64) -> Self {
        self.eq_rows.push(row);
        self.eq_rhs.push(rhs);
        self
    }

    pub fn bounds(mut self, var: usize, lower: f64, upper: f64) -> Self {
        self.lower[var] = lower;
        self.upper[var] = upper;
        self
    }

    fn validate(&self) -> Result<()> {
        let n = self.num_vars();
        if n == 0 {
            return Err(Error::Domain("linear program has no variables".into()));
        }
        let check_len = |what: &'static str, got: usize| {
            if got != n {
                Err(Error::Dimension {
                    what,
                    expected: n,
                    got,
                })
            } else {
                Ok(())
            }
        };
        check_len("lower bounds", self.lower.len())?;
        check_len("upper bounds", self.upper.len())?;
        for r in self.ineq_rows.iter().chain(&self.eq_rows) {
            check_len("constraint row", r.len())?;
        }
        if self.ineq_rows.len() != self.ineq_rhs.len() || self.eq_rows.len() != self.eq_rhs.len() {
            return Err(Error::Domain(
                "row count differs from right-hand side count".into(),
            ));
        }
        let finite = self
            .objective
            .iter()
            .chain(self.ineq_rows.iter().flatten())
            .chain(self.eq_rows.iter().flatten())
            .chain(&self.ineq_rhs)
            .chain(&self.eq_rhs)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Domain(
                "linear program has non-finite coefficients".into(),
            ));
        }
        for j in 0..n {
            if self.lower[j].is_nan()
                || self.upper[j].is_nan()
                || self.lower[j] == f64::INFINITY
                || self.upper[j] == f64::NEG_INFINITY
                || self.lower[j] > self.upper[j]
            {
                return Err(Error::Domain(format!("invalid bounds on variable {j}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Primal point (meaningful only when optimal).
    pub x: Vec<f64>,
    pub value: f64,
    /// Multipliers of the inequality rows followed by the equality rows, in
    /// the sign convention `c = Σ y_r a_r + (bound multipliers)`; inequality
    /// multipliers are `≤ 0` at optimality.
    pub row_duals: Vec<f64>,
    pub iterations: usize,
}

impl LpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == LpStatus::Optimal
    }
}

#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// x = offset + col
    Shift { col: usize, offset: f64 },
    /// x = offset − col
    Mirror { col: usize, offset: f64 },
    /// x = plus − minus
    Free { plus: usize, minus: usize },
}

struct Tableau {
    /// rows × (cols + 1); last column is the right-hand side.
    a: Vec<Vec<f64>>,
    /// reduced costs, last entry is −objective
    obj: Vec<f64>,
    basis: Vec<usize>,
    cols: usize,
    iterations: usize,
}

impl Tableau {
    fn pivot(&mut self, r: usize, c: usize) {
        let p = self.a[r][c];
        for v in self.a[r].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.a[r].clone();
        for (i, row) in self.a.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[c];
            if f != 0.0 {
                for (v, pv) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        let f = self.obj[c];
        if f != 0.0 {
            for (v, pv) in self.obj.iter_mut().zip(&pivot_row) {
                *v -= f * pv;
            }
            self.obj[c] = 0.0;
        }
        self.basis[r] = c;
        self.iterations += 1;
    }

    fn set_objective(&mut self, cost: &[f64]) {
        self.obj = cost.to_vec();
        self.obj.push(0.0);
        for (i, &b) in self.basis.iter().enumerate() {
            let f = self.obj[b];
            if f != 0.0 {
                for (v, av) in self.obj.iter_mut().zip(&self.a[i]) {
                    *v -= f * av;
                }
            }
        }
    }

    /// Runs Bland-rule iterations; `Ok(false)` signals an unbounded ray.
    fn optimize(&mut self, allowed: &[bool]) -> Result<bool> {
        loop {
            if self.iterations > MAX_ITERATIONS {
                return Err(Error::SimplexStalled {
                    iterations: self.iterations,
                    basis: self.basis.clone(),
                });
            }
            let entering = (0..self.cols).find(|&j| allowed[j] && self.obj[j] < -PIVOT_TOL);
            let Some(c) = entering else {
                return Ok(true);
            };
            let rhs = self.cols;
            let mut leave: Option<(usize, f64)> = None;
            for (i, row) in self.a.iter().enumerate() {
                if row[c] > PIVOT_TOL {
                    let ratio = row[rhs] / row[c];
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            let tie = (ratio - lr).abs() <= 1e-12 * (1.0 + lr.abs());
                            if ratio < lr && !tie || tie && self.basis[i] < self.basis[li] {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, c),
                None => return Ok(false),
            }
        }
    }
}

/// Solves the program; infeasible and unbounded programs are reported
/// through [`LpStatus`], only an exhausted iteration budget is an error.
pub fn solve_lp(lp: &LinearProgram) -> Result<LpSolution> {
    lp.validate()?;
    let n = lp.num_vars();

    // Variable substitution into nonnegative columns.
    let mut maps = Vec::with_capacity(n);
    let mut ncols = 0;
    let mut bound_rows: Vec<(usize, f64)> = Vec::new();
    for j in 0..n {
        let (l, u) = (lp.lower[j], lp.upper[j]);
        let m = if l.is_finite() {
            if u.is_finite() {
                bound_rows.push((ncols, u - l));
            }
            VarMap::Shift {
                col: ncols,
                offset: l,
            }
        } else if u.is_finite() {
            VarMap::Mirror {
                col: ncols,
                offset: u,
            }
        } else {
            ncols += 1;
            VarMap::Free {
                plus: ncols - 1,
                minus: ncols,
            }
        };
        ncols += 1;
        maps.push(m);
    }
    let struct_cols = ncols;

    let translate = |row: &[f64], rhs: f64| -> (Vec<f64>, f64) {
        let mut out = vec![0.0; struct_cols];
        let mut rhs = rhs;
        for (j, &a) in row.iter().enumerate() {
            match maps[j] {
                VarMap::Shift { col, offset } => {
                    out[col] += a;
                    rhs -= a * offset;
                }
                VarMap::Mirror { col, offset } => {
                    out[col] -= a;
                    rhs -= a * offset;
                }
                VarMap::Free { plus, minus } => {
                    out[plus] += a;
                    out[minus] -= a;
                }
            }
        }
        (out, rhs)
    };

    // (coefficients, rhs, is_inequality)
    let mut rows: Vec<(Vec<f64>, f64, bool)> = Vec::new();
    for (r, &b) in lp.ineq_rows.iter().zip(&lp.ineq_rhs) {
        let (c, b) = translate(r, b);
        rows.push((c, b, true));
    }
    for (r, &f) in lp.eq_rows.iter().zip(&lp.eq_rhs) {
        let (c, f) = translate(r, f);
        rows.push((c, f, false));
    }
    for &(col, width) in &bound_rows {
        let mut c = vec![0.0; struct_cols];
        c[col] = 1.0;
        rows.push((c, width, true));
    }
    let m = rows.len();
    let n_ineq = rows.iter().filter(|r| r.2).count();

    // Column layout: structural | slacks | artificials
    let slack_start = struct_cols;
    let art_start = slack_start + n_ineq;
    let mut needs_art = vec![false; m];
    let mut row_sign = vec![1.0; m];
    let mut slack_of_row = vec![usize::MAX; m];
    let mut k = 0;
    for (i, row) in rows.iter().enumerate() {
        if row.2 {
            slack_of_row[i] = slack_start + k;
            k += 1;
        }
        if row.1 < 0.0 {
            row_sign[i] = -1.0;
        }
        needs_art[i] = !row.2 || row.1 < 0.0;
    }
    let n_art = needs_art.iter().filter(|&&b| b).count();
    let cols = art_start + n_art;

    let mut a = vec![vec![0.0; cols + 1]; m];
    let mut basis = vec![0; m];
    let mut art_of_row = vec![usize::MAX; m];
    let mut next_art = art_start;
    for (i, (coef, rhs, ineq)) in rows.iter().enumerate() {
        let s = row_sign[i];
        for (j, &v) in coef.iter().enumerate() {
            a[i][j] = s * v;
        }
        if *ineq {
            a[i][slack_of_row[i]] = s;
        }
        a[i][cols] = s * rhs;
        if needs_art[i] {
            a[i][next_art] = 1.0;
            art_of_row[i] = next_art;
            basis[i] = next_art;
            next_art += 1;
        } else {
            basis[i] = slack_of_row[i];
        }
    }

    let mut tab = Tableau {
        a,
        obj: Vec::new(),
        basis,
        cols,
        iterations: 0,
    };

    let mut allowed = vec![true; cols];
    if n_art > 0 {
        let mut phase1 = vec![0.0; cols];
        for c in phase1.iter_mut().skip(art_start) {
            *c = 1.0;
        }
        tab.set_objective(&phase1);
        tab.optimize(&allowed)?;
        let infeasibility = -tab.obj[cols];
        if infeasibility > FEAS_TOL * (1.0 + rows.iter().map(|r| r.1.abs()).fold(0.0, f64::max)) {
            return Ok(LpSolution {
                status: LpStatus::Infeasible,
                x: vec![f64::NAN; n],
                value: f64::NAN,
                row_duals: Vec::new(),
                iterations: tab.iterations,
            });
        }
        // Drive remaining artificials out of the basis where possible.
        for i in 0..m {
            if tab.basis[i] >= art_start {
                if let Some(j) = (0..art_start).find(|&j| tab.a[i][j].abs() > PIVOT_TOL) {
                    tab.pivot(i, j);
                }
            }
        }
        for flag in allowed.iter_mut().skip(art_start) {
            *flag = false;
        }
    }

    let mut cost = vec![0.0; cols];
    for (j, &cj) in lp.objective.iter().enumerate() {
        match maps[j] {
            VarMap::Shift { col, .. } => cost[col] += cj,
            VarMap::Mirror { col, .. } => cost[col] -= cj,
            VarMap::Free { plus, minus } => {
                cost[plus] += cj;
                cost[minus] -= cj;
            }
        }
    }
    tab.set_objective(&cost);
    if !tab.optimize(&allowed)? {
        return Ok(LpSolution {
            status: LpStatus::Unbounded,
            x: vec![f64::NAN; n],
            value: f64::NEG_INFINITY,
            row_duals: Vec::new(),
            iterations: tab.iterations,
        });
    }

    let mut std_x = vec![0.0; cols];
    for (i, &b) in tab.basis.iter().enumerate() {
        std_x[b] = tab.a[i][cols];
    }
    let x: Vec<f64> = maps
        .iter()
        .map(|m| match *m {
            VarMap::Shift { col, offset } => offset + std_x[col],
            VarMap::Mirror { col, offset } => offset - std_x[col],
            VarMap::Free { plus, minus } => std_x[plus] - std_x[minus],
        })
        .collect();
    let value = lp.objective.iter().zip(&x).map(|(c, x)| c * x).sum();

    // Tableau row i is the original row scaled by s_i, so the original
    // multiplier is y_i = s_i ỹ_i. A slack column (entry s_i, cost 0) has
    // reduced cost −ỹ_i s_i = −y_i; an artificial (entry 1) has −ỹ_i.
    let n_user_rows = lp.ineq_rows.len() + lp.eq_rows.len();
    let row_duals = (0..n_user_rows)
        .map(|i| {
            if rows[i].2 {
                -tab.obj[slack_of_row[i]]
            } else {
                -row_sign[i] * tab.obj[art_of_row[i]]
            }
        })
        .collect();

    Ok(LpSolution {
        status: LpStatus::Optimal,
        x,
        value,
        row_duals,
        iterations: tab.iterations,
    })
}
