//! Dense two-phase simplex over f64 with deterministic pivoting.
//!
//! Problems are stated as: minimize c.x subject to ge-rows (a.x >= b),
//! eq-rows (a.x = b), and per-variable bounds (either side optional).
//! Internally variables are shifted or split to be nonnegative, rows get
//! slack/surplus variables plus an artificial on every row, and phase 1
//! minimizes artificial mass. Keeping an artificial on every row makes the
//! final artificial block equal B^-1, which is where row duals are read from.
//!
//! Pivoting uses Bland's rule (lowest eligible index, lowest basic index on
//! ratio ties), so runs are deterministic and cycling is impossible.

use thiserror::Error;

/// Entries smaller than this are treated as zero when choosing pivots.
pub const PIVOT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum LpError {
    #[error("lp input invalid: {0}")]
    BadInput(String),
    #[error("simplex iteration limit reached ({0} pivots)")]
    IterationLimit(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
    Infeasible,
    Unbounded,
}

#[derive(Debug, Clone)]
pub struct LpSolution {
    pub status: LpStatus,
    /// Values of the original variables; empty unless `Optimal`.
    pub primal: Vec<f64>,
    /// Duals of the ge rows, in the order added. Nonnegative at an optimum
    /// of a minimization.
    pub dual_ge: Vec<f64>,
    /// Duals of the eq rows, in the order added; unrestricted in sign.
    pub dual_eq: Vec<f64>,
    /// c.x at the reported primal point.
    pub objective: f64,
    /// Objective of the dual solution, bound terms included. Matches
    /// `objective` at an optimum up to solver arithmetic.
    pub dual_objective: f64,
    /// Reduced cost of each original variable with respect to the row duals:
    /// c_j - sum_i dual_i * a_ij.
    pub reduced_costs: Vec<f64>,
    /// For `Unbounded`: a recession direction d with c.d < 0 that keeps all
    /// rows and bounds satisfied from any feasible point.
    pub ray: Option<Vec<f64>>,
    /// Total simplex pivots across both phases.
    pub iterations: usize,
}

impl LpSolution {
    fn non_optimal(status: LpStatus, iterations: usize) -> LpSolution {
        LpSolution {
            status,
            primal: Vec::new(),
            dual_ge: Vec::new(),
            dual_eq: Vec::new(),
            objective: f64::NAN,
            dual_objective: f64::NAN,
            reduced_costs: Vec::new(),
            ray: None,
            iterations,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LpProblem {
    num_vars: usize,
    objective: Vec<f64>,
    ge_rows: Vec<(Vec<f64>, f64)>,
    eq_rows: Vec<(Vec<f64>, f64)>,
    lower: Vec<Option<f64>>,
    upper: Vec<Option<f64>>,
}

/// How an original variable maps into the nonnegative transformed space.
#[derive(Debug, Clone, Copy)]
enum VarMap {
    /// x = shift + sign * y, one transformed variable.
    Shifted { t: usize, shift: f64, sign: f64 },
    /// x = y_plus - y_minus, two transformed variables.
    Split { t_plus: usize, t_minus: usize },
}

impl LpProblem {
    pub fn new(num_vars: usize) -> LpProblem {
        LpProblem {
            num_vars,
            objective: vec![0.0; num_vars],
            ge_rows: Vec::new(),
            eq_rows: Vec::new(),
            lower: vec![None; num_vars],
            upper: vec![None; num_vars],
        }
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_ge_rows(&self) -> usize {
        self.ge_rows.len()
    }

    pub fn num_eq_rows(&self) -> usize {
        self.eq_rows.len()
    }

    pub fn ge_row(&self, i: usize) -> (&[f64], f64) {
        (&self.ge_rows[i].0, self.ge_rows[i].1)
    }

    pub fn eq_row(&self, i: usize) -> (&[f64], f64) {
        (&self.eq_rows[i].0, self.eq_rows[i].1)
    }

    pub fn objective_coefs(&self) -> &[f64] {
        &self.objective
    }

    pub fn set_objective(&mut self, c: Vec<f64>) {
        assert_eq!(c.len(), self.num_vars);
        self.objective = c;
    }

    pub fn set_objective_coef(&mut self, j: usize, c: f64) {
        self.objective[j] = c;
    }

    pub fn add_ge(&mut self, row: Vec<f64>, rhs: f64) {
        assert_eq!(row.len(), self.num_vars);
        self.ge_rows.push((row, rhs));
    }

    pub fn add_eq(&mut self, row: Vec<f64>, rhs: f64) {
        assert_eq!(row.len(), self.num_vars);
        self.eq_rows.push((row, rhs));
    }

    pub fn set_lower(&mut self, j: usize, l: f64) {
        self.lower[j] = Some(l);
    }

    pub fn set_upper(&mut self, j: usize, u: f64) {
        self.upper[j] = Some(u);
    }

    pub fn set_bounds(&mut self, j: usize, l: f64, u: f64) {
        self.lower[j] = Some(l);
        self.upper[j] = Some(u);
    }

    fn validate(&self) -> Result<(), LpError> {
        let check = |v: f64, what: &str| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(LpError::BadInput(format!("non-finite {}: {}", what, v)))
            }
        };
        for &c in &self.objective {
            check(c, "objective coefficient")?;
        }
        for (row, rhs) in self.ge_rows.iter().chain(self.eq_rows.iter()) {
            for &a in row {
                check(a, "row coefficient")?;
            }
            check(*rhs, "rhs")?;
        }
        for j in 0..self.num_vars {
            if let Some(l) = self.lower[j] {
                check(l, "lower bound")?;
            }
            if let Some(u) = self.upper[j] {
                check(u, "upper bound")?;
            }
        }
        Ok(())
    }

    /// Solves the problem. Deterministic: identical inputs produce identical
    /// pivot sequences and outputs.
    pub fn solve(&self) -> Result<LpSolution, LpError> {
        self.validate()?;
        for j in 0..self.num_vars {
            if let (Some(l), Some(u)) = (self.lower[j], self.upper[j]) {
                if l > u + PIVOT_TOL {
                    return Ok(LpSolution::non_optimal(LpStatus::Infeasible, 0));
                }
            }
        }

        // Map variables into nonnegative transformed space. Finite two-sided
        // bounds become a shift plus an extra `y <= u - l` row.
        let mut maps = Vec::with_capacity(self.num_vars);
        let mut n_trans = 0usize;
        let mut le_bound_rows: Vec<(usize, f64)> = Vec::new(); // (transformed var, width)
        for j in 0..self.num_vars {
            match (self.lower[j], self.upper[j]) {
                (Some(l), Some(u)) => {
                    maps.push(VarMap::Shifted { t: n_trans, shift: l, sign: 1.0 });
                    le_bound_rows.push((n_trans, u - l));
                    n_trans += 1;
                }
                (Some(l), None) => {
                    maps.push(VarMap::Shifted { t: n_trans, shift: l, sign: 1.0 });
                    n_trans += 1;
                }
                (None, Some(u)) => {
                    maps.push(VarMap::Shifted { t: n_trans, shift: u, sign: -1.0 });
                    n_trans += 1;
                }
                (None, None) => {
                    maps.push(VarMap::Split { t_plus: n_trans, t_minus: n_trans + 1 });
                    n_trans += 2;
                }
            }
        }

        // Transformed objective and the constant the substitution adds.
        let mut c_trans = vec![0.0; n_trans];
        let mut obj_shift = 0.0;
        for j in 0..self.num_vars {
            let c = self.objective[j];
            match maps[j] {
                VarMap::Shifted { t, shift, sign } => {
                    c_trans[t] = c * sign;
                    obj_shift += c * shift;
                }
                VarMap::Split { t_plus, t_minus } => {
                    c_trans[t_plus] = c;
                    c_trans[t_minus] = -c;
                }
            }
        }

        // Assemble equality rows over transformed variables plus one
        // slack/surplus each for inequality rows. Row order: ge rows, eq
        // rows, bound rows; duals are read back in the same order.
        let n_ge = self.ge_rows.len();
        let n_eq = self.eq_rows.len();
        let n_rows = n_ge + n_eq + le_bound_rows.len();
        let n_slack = n_ge + le_bound_rows.len();
        let n_real = n_trans + n_slack;
        let width = n_real + n_rows + 1; // + artificials + rhs
        let rhs_col = n_real + n_rows;

        let mut a = vec![0.0; n_rows * width];
        let mut row_sign = vec![1.0; n_rows];
        let transform_row = |row: &[f64], rhs: f64, out: &mut [f64]| -> f64 {
            let mut b = rhs;
            for j in 0..self.num_vars {
                let coef = row[j];
                if coef == 0.0 {
                    continue;
                }
                match maps[j] {
                    VarMap::Shifted { t, shift, sign } => {
                        out[t] += coef * sign;
                        b -= coef * shift;
                    }
                    VarMap::Split { t_plus, t_minus } => {
                        out[t_plus] += coef;
                        out[t_minus] -= coef;
                    }
                }
            }
            b
        };

        let mut slack_idx = n_trans;
        for (i, (row, rhs)) in self.ge_rows.iter().enumerate() {
            let r = &mut a[i * width..(i + 1) * width];
            let b = transform_row(row, *rhs, r);
            r[slack_idx] = -1.0; // surplus
            slack_idx += 1;
            r[rhs_col] = b;
        }
        for (k, (row, rhs)) in self.eq_rows.iter().enumerate() {
            let i = n_ge + k;
            let r = &mut a[i * width..(i + 1) * width];
            let b = transform_row(row, *rhs, r);
            r[rhs_col] = b;
        }
        for (k, &(t, w)) in le_bound_rows.iter().enumerate() {
            let i = n_ge + n_eq + k;
            let r = &mut a[i * width..(i + 1) * width];
            r[t] = 1.0;
            r[slack_idx] = 1.0;
            slack_idx += 1;
            r[rhs_col] = w;
        }
        debug_assert_eq!(slack_idx, n_real);

        // Normalize rhs nonnegative, then give every row its artificial.
        // The normalized rhs is kept for the dual objective; the tableau's
        // rhs column gets rewritten by pivoting.
        let mut b_max = 0.0f64;
        let mut b_norm = vec![0.0; n_rows];
        for i in 0..n_rows {
            let r = &mut a[i * width..(i + 1) * width];
            if r[rhs_col] < 0.0 {
                row_sign[i] = -1.0;
                for v in r.iter_mut() {
                    *v = -*v;
                }
            }
            b_norm[i] = r[rhs_col];
            b_max = b_max.max(r[rhs_col]);
            r[n_real + i] = 1.0;
        }

        let mut basis: Vec<usize> = (0..n_rows).map(|i| n_real + i).collect();
        let mut iterations = 0usize;
        let cap = 50 * (n_rows + width + 10);

        // Phase 1: minimize artificial mass. Reduced-cost row starts as the
        // artificial costs minus the sum of all rows (each basic artificial
        // has cost 1).
        let mut cost = vec![0.0; width];
        for jj in n_real..n_real + n_rows {
            cost[jj] = 1.0;
        }
        for i in 0..n_rows {
            for jj in 0..width {
                cost[jj] -= a[i * width + jj];
            }
        }
        match run_phase(&mut a, &mut cost, &mut basis, n_rows, width, n_real, &mut iterations, cap, false)? {
            PhaseEnd::Optimal => {}
            PhaseEnd::Unbounded(_) => {
                // Phase-1 objective is bounded below by zero; unreachable.
                return Err(LpError::BadInput("phase 1 reported unbounded".to_string()));
            }
        }
        let phase1_mass = -cost[rhs_col];
        if phase1_mass > 1e-7 * (1.0 + b_max) {
            return Ok(LpSolution::non_optimal(LpStatus::Infeasible, iterations));
        }

        // Drive artificials out of the basis where a real pivot exists;
        // rows without one are redundant and keep their artificial basic
        // at zero.
        for i in 0..n_rows {
            if basis[i] >= n_real {
                let pivot_col = (0..n_real).find(|&jj| a[i * width + jj].abs() > PIVOT_TOL);
                if let Some(jj) = pivot_col {
                    pivot(&mut a, &mut cost, &mut basis, n_rows, width, i, jj);
                }
            }
        }

        // Phase 2: recompute reduced costs for the real objective.
        for jj in 0..width {
            cost[jj] = 0.0;
        }
        cost[..n_trans].copy_from_slice(&c_trans);
        for i in 0..n_rows {
            let cb = if basis[i] < n_trans { c_trans[basis[i]] } else { 0.0 };
            if cb != 0.0 {
                for jj in 0..width {
                    cost[jj] -= cb * a[i * width + jj];
                }
            }
        }
        let unbounded_col =
            match run_phase(&mut a, &mut cost, &mut basis, n_rows, width, n_real, &mut iterations, cap, true)? {
                PhaseEnd::Optimal => None,
                PhaseEnd::Unbounded(jj) => Some(jj),
            };

        if let Some(enter) = unbounded_col {
            // Recession direction in transformed space: entering column 1,
            // basic variables move by minus the column.
            let mut d_trans = vec![0.0; n_real];
            if enter < n_real {
                d_trans[enter] = 1.0;
            }
            for i in 0..n_rows {
                if basis[i] < n_real {
                    d_trans[basis[i]] = -a[i * width + enter];
                }
            }
            let mut ray = vec![0.0; self.num_vars];
            for j in 0..self.num_vars {
                ray[j] = match maps[j] {
                    VarMap::Shifted { t, sign, .. } => sign * d_trans[t],
                    VarMap::Split { t_plus, t_minus } => d_trans[t_plus] - d_trans[t_minus],
                };
            }
            let mut sol = LpSolution::non_optimal(LpStatus::Unbounded, iterations);
            sol.ray = Some(ray);
            return Ok(sol);
        }

        // Read the primal point back through the variable maps.
        let mut y_trans = vec![0.0; n_real];
        for i in 0..n_rows {
            if basis[i] < n_real {
                y_trans[basis[i]] = a[i * width + rhs_col];
            }
        }
        let mut primal = vec![0.0; self.num_vars];
        for j in 0..self.num_vars {
            primal[j] = match maps[j] {
                VarMap::Shifted { t, shift, sign } => shift + sign * y_trans[t],
                VarMap::Split { t_plus, t_minus } => y_trans[t_plus] - y_trans[t_minus],
            };
        }
        let objective: f64 = (0..self.num_vars).map(|j| self.objective[j] * primal[j]).sum();

        // Duals: with zero phase-2 cost on artificials, the reduced cost of
        // artificial i is -y_i for the normalized row; undo the sign flip.
        let mut dual_norm = vec![0.0; n_rows];
        let mut dual_objective = obj_shift;
        for i in 0..n_rows {
            dual_norm[i] = -cost[n_real + i];
            dual_objective += dual_norm[i] * b_norm[i];
        }
        let dual_ge: Vec<f64> = (0..n_ge).map(|i| row_sign[i] * dual_norm[i]).collect();
        let dual_eq: Vec<f64> = (0..n_eq).map(|k| row_sign[n_ge + k] * dual_norm[n_ge + k]).collect();

        let mut reduced_costs = vec![0.0; self.num_vars];
        for j in 0..self.num_vars {
            let mut r = self.objective[j];
            for (i, (row, _)) in self.ge_rows.iter().enumerate() {
                r -= dual_ge[i] * row[j];
            }
            for (k, (row, _)) in self.eq_rows.iter().enumerate() {
                r -= dual_eq[k] * row[j];
            }
            reduced_costs[j] = r;
        }

        Ok(LpSolution {
            status: LpStatus::Optimal,
            primal,
            dual_ge,
            dual_eq,
            objective,
            dual_objective,
            reduced_costs,
            ray: None,
            iterations,
        })
    }
}

enum PhaseEnd {
    Optimal,
    Unbounded(usize),
}

/// Runs simplex pivots until optimal or unbounded. Entering: lowest-index
/// non-artificial column with reduced cost below -PIVOT_TOL. Leaving: minimum
/// ratio, ties broken by lowest basic variable index.
#[allow(clippy::too_many_arguments)]
fn run_phase(
    a: &mut [f64],
    cost: &mut [f64],
    basis: &mut [usize],
    n_rows: usize,
    width: usize,
    n_real: usize,
    iterations: &mut usize,
    cap: usize,
    can_be_unbounded: bool,
) -> Result<PhaseEnd, LpError> {
    let rhs_col = width - 1;
    // Most-negative pricing needs far fewer pivots than Bland, which keeps
    // roundoff from piling up in the tableau; a long degenerate stall flips
    // to Bland's rule, which restores the anti-cycling guarantee.
    let mut bland = false;
    let mut stall = 0usize;
    let stall_limit = 4 * (n_rows + n_real) + 40;
    let mut skipped = vec![false; n_real];
    loop {
        for s in skipped.iter_mut() {
            *s = false;
        }
        let pivoted = loop {
            let mut enter: Option<usize> = None;
            for jj in 0..n_real {
                if skipped[jj] || cost[jj] >= -PIVOT_TOL {
                    continue;
                }
                match enter {
                    _ if bland => {
                        enter = Some(jj);
                        break;
                    }
                    Some(e) if cost[jj] >= cost[e] => {}
                    _ => enter = Some(jj),
                }
            }
            let Some(enter) = enter else { break false };

            // Ratio test: strictly smaller wins; within the tolerance window
            // prefer the largest pivot element for stability, then the
            // smallest basis index. Under Bland's rule the basis index
            // decides alone.
            let mut leave: Option<(usize, f64, f64)> = None;
            for i in 0..n_rows {
                let coef = a[i * width + enter];
                if coef > PIVOT_TOL {
                    let ratio = (a[i * width + rhs_col]).max(0.0) / coef;
                    let better = match leave {
                        None => true,
                        Some((li, lr, lc)) => {
                            let w = PIVOT_TOL * (1.0 + lr.abs());
                            ratio < lr - w
                                || (ratio < lr + w
                                    && if bland {
                                        basis[i] < basis[li]
                                    } else {
                                        coef > lc + PIVOT_TOL
                                            || (coef > lc - PIVOT_TOL && basis[i] < basis[li])
                                    })
                        }
                    };
                    if better {
                        leave = Some((i, ratio, coef));
                    }
                }
            }
            let Some((leave_row, _, _)) = leave else {
                if can_be_unbounded {
                    return Ok(PhaseEnd::Unbounded(enter));
                }
                // An objective bounded below by construction cannot have a
                // true descent ray; a fractionally negative reduced cost on
                // a pivotless column is roundoff, so pass the column over.
                skipped[enter] = true;
                continue;
            };
            *iterations += 1;
            if *iterations > cap {
                return Err(LpError::IterationLimit(*iterations));
            }
            let before = cost[rhs_col];
            pivot(a, cost, basis, n_rows, width, leave_row, enter);
            if (cost[rhs_col] - before).abs() <= 1e-12 * (1.0 + before.abs()) {
                stall += 1;
                if stall > stall_limit {
                    bland = true;
                }
            } else {
                stall = 0;
            }
            break true;
        };
        if !pivoted {
            return Ok(PhaseEnd::Optimal);
        }
    }
}

fn pivot(
    a: &mut [f64],
    cost: &mut [f64],
    basis: &mut [usize],
    n_rows: usize,
    width: usize,
    row: usize,
    col: usize,
) {
    let p = a[row * width + col];
    debug_assert!(p.abs() > PIVOT_TOL);
    let inv = 1.0 / p;
    for jj in 0..width {
        a[row * width + jj] *= inv;
    }
    a[row * width + col] = 1.0;
    for i in 0..n_rows {
        if i == row {
            continue;
        }
        let f = a[i * width + col];
        if f != 0.0 {
            for jj in 0..width {
                a[i * width + jj] -= f * a[row * width + jj];
            }
            a[i * width + col] = 0.0;
        }
    }
    let f = cost[col];
    if f != 0.0 {
        for jj in 0..width {
            cost[jj] -= f * a[row * width + jj];
        }
        cost[col] = 0.0;
    }
    basis[row] = col;
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64) {
        assert!((a - b).abs() <= 1e-7 * (1.0 + a.abs().max(b.abs())), "{} vs {}", a, b);
    }

    #[test]
    fn single_ge_constraint() {
        let mut lp = LpProblem::new(1);
        lp.set_objective(vec![1.0]);
        lp.add_ge(vec![1.0], 3.0);
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_close(s.primal[0], 3.0);
        assert_close(s.objective, 3.0);
        assert_close(s.dual_ge[0], 1.0);
        assert_close(s.dual_objective, 3.0);
    }

    #[test]
    fn equality_duals_and_reduced_costs() {
        let mut lp = LpProblem::new(2);
        lp.set_objective(vec![2.0, 3.0]);
        lp.add_eq(vec![1.0, 1.0], 1.0);
        lp.set_lower(0, 0.0);
        lp.set_lower(1, 0.0);
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_close(s.primal[0], 1.0);
        assert_close(s.primal[1], 0.0);
        assert_close(s.objective, 2.0);
        assert_close(s.dual_eq[0], 2.0);
        assert_close(s.reduced_costs[0], 0.0);
        assert_close(s.reduced_costs[1], 1.0);
    }

    #[test]
    fn unbounded_gives_improving_ray() {
        let mut lp = LpProblem::new(2);
        lp.set_objective(vec![-1.0, -1.0]);
        lp.add_eq(vec![1.0, -1.0], 0.0);
        lp.set_lower(0, 0.0);
        lp.set_lower(1, 0.0);
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Unbounded);
        let d = s.ray.unwrap();
        let cd = -d[0] - d[1];
        assert!(cd < -1e-9, "ray does not improve: {:?}", d);
        assert!((d[0] - d[1]).abs() <= 1e-9, "ray leaves the equality: {:?}", d);
        assert!(d[0] >= -1e-9 && d[1] >= -1e-9);
    }

    #[test]
    fn infeasible_detected() {
        let mut lp = LpProblem::new(1);
        lp.set_objective(vec![0.0]);
        lp.add_ge(vec![1.0], 2.0);
        lp.add_ge(vec![-1.0], -1.0);
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Infeasible);
    }

    #[test]
    fn textbook_two_var_optimum() {
        // max 3x + 5y s.t. x <= 4, 2y <= 12, 3x + 2y <= 18 -> (2, 6), 36
        let mut lp = LpProblem::new(2);
        lp.set_objective(vec![-3.0, -5.0]);
        lp.add_ge(vec![-1.0, 0.0], -4.0);
        lp.add_ge(vec![0.0, -2.0], -12.0);
        lp.add_ge(vec![-3.0, -2.0], -18.0);
        lp.set_lower(0, 0.0);
        lp.set_lower(1, 0.0);
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_close(s.primal[0], 2.0);
        assert_close(s.primal[1], 6.0);
        assert_close(s.objective, -36.0);
        assert_close(s.dual_objective, -36.0);
        // complementary slackness: first row is slack (x = 2 < 4)
        assert_close(s.dual_ge[0], 0.0);
    }

    #[test]
    fn box_bound_hits_upper() {
        let mut lp = LpProblem::new(1);
        lp.set_objective(vec![-1.0]);
        lp.set_bounds(0, 0.0, 5.0);
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_close(s.primal[0], 5.0);
        assert_close(s.objective, -5.0);
        assert_close(s.dual_objective, -5.0);
        // no rows, so the reduced cost is the raw objective coefficient
        assert_close(s.reduced_costs[0], -1.0);
    }

    #[test]
    fn degenerate_box_pins_value() {
        let mut lp = LpProblem::new(1);
        lp.set_objective(vec![-1.0]);
        lp.set_bounds(0, 2.0, 2.0);
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_close(s.primal[0], 2.0);
    }

    #[test]
    fn crossing_bounds_infeasible() {
        let mut lp = LpProblem::new(1);
        lp.set_bounds(0, 3.0, 1.0);
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Infeasible);
    }

    #[test]
    fn free_variable_through_equality() {
        // min x s.t. x - y = 3, y >= 0, x free
        let mut lp = LpProblem::new(2);
        lp.set_objective(vec![1.0, 0.0]);
        lp.add_eq(vec![1.0, -1.0], 3.0);
        lp.set_lower(1, 0.0);
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_close(s.primal[0], 3.0);
        assert_close(s.objective, 3.0);
        assert_close(s.dual_eq[0], 1.0);
        assert_close(s.reduced_costs[1], 1.0);
    }

    #[test]
    fn negative_lower_bound() {
        let mut lp = LpProblem::new(1);
        lp.set_objective(vec![1.0]);
        lp.set_lower(0, -4.0);
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_close(s.primal[0], -4.0);
    }

    #[test]
    fn beale_cycling_example_terminates() {
        // Classic cycling instance; Bland's rule must reach -1/20.
        let mut lp = LpProblem::new(4);
        lp.set_objective(vec![-0.75, 150.0, -0.02, 6.0]);
        lp.add_ge(vec![-0.25, 60.0, 0.04, -9.0], 0.0);
        lp.add_ge(vec![-0.5, 90.0, 0.02, -3.0], 0.0);
        lp.add_ge(vec![0.0, 0.0, -1.0, 0.0], -1.0);
        for j in 0..4 {
            lp.set_lower(j, 0.0);
        }
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_close(s.objective, -0.05);
        assert_close(s.dual_objective, -0.05);
    }

    #[test]
    fn redundant_rows_keep_duals_consistent() {
        // Duplicate equality: one redundant row pins a zero artificial.
        let mut lp = LpProblem::new(2);
        lp.set_objective(vec![1.0, 2.0]);
        lp.add_eq(vec![1.0, 1.0], 2.0);
        lp.add_eq(vec![1.0, 1.0], 2.0);
        lp.set_lower(0, 0.0);
        lp.set_lower(1, 0.0);
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_close(s.objective, 2.0);
        assert_close(s.dual_objective, 2.0);
        assert_close(s.dual_eq[0] + s.dual_eq[1], 1.0);
    }

    #[test]
    fn no_constraints_zero_objective() {
        let lp = LpProblem::new(0);
        let s = lp.solve().unwrap();
        assert_eq!(s.status, LpStatus::Optimal);
        assert_close(s.objective, 0.0);
    }

    #[test]
    fn solve_is_deterministic() {
        let build = || {
            let mut lp = LpProblem::new(3);
            lp.set_objective(vec![1.0, 1.0, 1.0]);
            lp.add_ge(vec![1.0, 2.0, 0.0], 3.0);
            lp.add_ge(vec![0.0, 1.0, 2.0], 3.0);
            lp.add_ge(vec![2.0, 0.0, 1.0], 3.0);
            for j in 0..3 {
                lp.set_lower(j, 0.0);
            }
            lp
        };
        let a = build().solve().unwrap();
        let b = build().solve().unwrap();
        assert_eq!(a.primal, b.primal);
        assert_eq!(a.dual_ge, b.dual_ge);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
        assert_eq!(a.iterations, b.iterations);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn random_feasible_bounded_lps_satisfy_duality(
            n in 1usize..=4,
            rows in proptest::collection::vec(
                (proptest::collection::vec(-3i32..=3, 4), 0u32..=2),
                0..=4,
            ),
            xhat in proptest::collection::vec(0u32..=3, 4),
            c in proptest::collection::vec(0u32..=4, 4),
        ) {
            let mut lp = LpProblem::new(n);
            lp.set_objective(c.iter().take(n).map(|&v| v as f64).collect());
            for j in 0..n {
                lp.set_lower(j, 0.0);
            }
            let xh: Vec<f64> = xhat.iter().take(n).map(|&v| v as f64).collect();
            let mut kept = Vec::new();
            for (coefs, slack) in &rows {
                let row: Vec<f64> = coefs.iter().take(n).map(|&v| v as f64).collect();
                let rhs: f64 = row.iter().zip(&xh).map(|(a, x)| a * x).sum::<f64>() - *slack as f64;
                kept.push((row.clone(), rhs));
                lp.add_ge(row, rhs);
            }
            let s = lp.solve().unwrap();
            prop_assert_eq!(s.status, LpStatus::Optimal);
            // x-hat is feasible by construction, so the optimum can't exceed its cost
            let ref_cost: f64 = (0..n).map(|j| lp.objective[j] * xh[j]).sum();
            prop_assert!(s.objective <= ref_cost + 1e-7);
            prop_assert!((s.objective - s.dual_objective).abs() <= 1e-7 * (1.0 + s.objective.abs()));
            for (i, (row, rhs)) in kept.iter().enumerate() {
                let ax: f64 = row.iter().zip(&s.primal).map(|(a, x)| a * x).sum();
                prop_assert!(ax >= rhs - 1e-7, "row {} violated: {} < {}", i, ax, rhs);
                prop_assert!(s.dual_ge[i] >= -1e-9);
                prop_assert!(s.dual_ge[i].abs() * (ax - rhs).abs() <= 1e-6);
            }
            for j in 0..n {
                prop_assert!(s.primal[j] >= -1e-9);
                prop_assert!(s.reduced_costs[j] >= -1e-7);
                prop_assert!(s.reduced_costs[j].abs() * s.primal[j].abs() <= 1e-6);
            }
        }
    }
}
