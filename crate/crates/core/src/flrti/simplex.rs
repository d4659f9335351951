//! Dense two-phase primal simplex for `min cᵀx  s.t.  A x = b, x ≥ 0`.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("linear program is infeasible (phase-one residual {0:.3e})")]
    Infeasible(f64),
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("simplex stopped after {0} pivots")]
    IterationLimit(usize),
}

const EPS: f64 = 1e-9;
/// Consecutive degenerate pivots before switching to Bland's rule.
const STALL: usize = 50;

struct Tableau {
    rows: usize,
    width: usize,
    /// rows × width, last column is the right-hand side
    t: Vec<f64>,
    basis: Vec<usize>,
    /// reduced costs, last entry is minus the objective
    obj: Vec<f64>,
}

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.width + j]
    }

    fn rhs(&self, i: usize) -> f64 {
        self.at(i, self.width - 1)
    }

    fn pivot(&mut self, r: usize, c: usize) {
        let w = self.width;
        let p = self.t[r * w + c];
        for j in 0..w {
            self.t[r * w + j] /= p;
        }
        let pivot_row: Vec<f64> = self.t[r * w..(r + 1) * w].to_vec();
        for i in 0..self.rows {
            if i == r {
                continue;
            }
            let f = self.t[i * w + c];
            if f != 0.0 {
                let row = &mut self.t[i * w..(i + 1) * w];
                for (x, pv) in row.iter_mut().zip(&pivot_row) {
                    *x -= f * pv;
                }
                row[c] = 0.0;
            }
        }
        let f = self.obj[c];
        if f != 0.0 {
            for (x, pv) in self.obj.iter_mut().zip(&pivot_row) {
                *x -= f * pv;
            }
            self.obj[c] = 0.0;
        }
        self.basis[r] = c;
    }

    fn set_costs(&mut self, costs: &[f64]) {
        self.obj = vec![0.0; self.width];
        self.obj[..costs.len()].copy_from_slice(costs);
        for i in 0..self.rows {
            let cb = costs.get(self.basis[i]).copied().unwrap_or(0.0);
            if cb != 0.0 {
                for j in 0..self.width {
                    self.obj[j] -= cb * self.at(i, j);
                }
            }
        }
    }

    /// Minimize the current cost row over columns `< allowed`.
    fn optimize(&mut self, allowed: usize, budget: &mut usize) -> Result<(), LpError> {
        let mut degenerate = 0;
        loop {
            let bland = degenerate >= STALL;
            let mut enter = None;
            let mut best = -EPS;
            for j in 0..allowed {
                let rc = self.obj[j];
                if rc < -EPS {
                    if bland {
                        enter = Some(j);
                        break;
                    }
                    if rc < best {
                        best = rc;
                        enter = Some(j);
                    }
                }
            }
            let Some(c) = enter else { return Ok(()) };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..self.rows {
                let a = self.at(i, c);
                if a > EPS {
                    let ratio = self.rhs(i) / a;
                    let better = match leave {
                        None => true,
                        Some((l, r)) => ratio < r - EPS || (ratio <= r + EPS && self.basis[i] < self.basis[l]),
                    };
                    if better {
                        leave = Some((i, ratio));
                    }
                }
            }
            let Some((r, ratio)) = leave else { return Err(LpError::Unbounded) };
            if *budget == 0 {
                return Err(LpError::IterationLimit(0));
            }
            *budget -= 1;
            degenerate = if ratio <= EPS { degenerate + 1 } else { 0 };
            self.pivot(r, c);
        }
    }
}

/// Solve `min cᵀx` subject to `A x = b`, `x ≥ 0`. `a` is row-major `m × n`.
pub fn solve(a: &[Vec<f64>], b: &[f64], c: &[f64], max_pivots: usize) -> Result<Vec<f64>, LpError> {
    let m = a.len();
    let n = c.len();
    // rows with a ready-made unit column keep it as their starting basis
    let mut unit_col = vec![None; m];
    for j in 0..n {
        let mut hit = None;
        let mut clean = true;
        for (i, row) in a.iter().enumerate() {
            let v = row[j];
            if v != 0.0 {
                if v == 1.0 && hit.is_none() {
                    hit = Some(i);
                } else {
                    clean = false;
                    break;
                }
            }
        }
        if let (true, Some(i)) = (clean, hit) {
            if b[i] >= 0.0 && unit_col[i].is_none() {
                unit_col[i] = Some(j);
            }
        }
    }
    let artificial_rows: Vec<usize> = (0..m).filter(|&i| unit_col[i].is_none()).collect();
    let n_art = artificial_rows.len();
    let width = n + n_art + 1;
    let mut t = vec![0.0; m * width];
    let mut basis = vec![0; m];
    for i in 0..m {
        let sign = if unit_col[i].is_none() && b[i] < 0.0 { -1.0 } else { 1.0 };
        for j in 0..n {
            t[i * width + j] = sign * a[i][j];
        }
        t[i * width + width - 1] = sign * b[i];
    }
    for (k, &i) in artificial_rows.iter().enumerate() {
        t[i * width + n + k] = 1.0;
        basis[i] = n + k;
    }
    for i in 0..m {
        if let Some(j) = unit_col[i] {
            basis[i] = j;
        }
    }
    let mut tab = Tableau {
        rows: m,
        width,
        t,
        basis,
        obj: vec![],
    };
    let mut budget = max_pivots;
    let limit = |e: LpError| match e {
        LpError::IterationLimit(_) => LpError::IterationLimit(max_pivots),
        other => other,
    };

    if n_art > 0 {
        let mut phase1 = vec![0.0; n + n_art];
        for v in phase1.iter_mut().skip(n) {
            *v = 1.0;
        }
        tab.set_costs(&phase1);
        tab.optimize(n + n_art, &mut budget).map_err(limit)?;
        let residual = -tab.obj[width - 1];
        let scale = 1.0 + b.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if residual > 1e-7 * scale {
            return Err(LpError::Infeasible(residual));
        }
        // drive remaining artificials out of the basis
        for i in 0..m {
            if tab.basis[i] >= n {
                if let Some(j) = (0..n).find(|&j| tab.at(i, j).abs() > EPS) {
                    tab.pivot(i, j);
                }
            }
        }
    }
    tab.set_costs(c);
    tab.optimize(n, &mut budget).map_err(limit)?;
    let mut x = vec![0.0; n];
    for i in 0..m {
        if tab.basis[i] < n {
            x[tab.basis[i]] = tab.rhs(i).max(0.0);
        }
    }
    Ok(x)
}
