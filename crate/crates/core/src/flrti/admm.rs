//! Generalized lasso `½ηᵀMη − gᵀη + σ‖Pη‖₁` by ADMM, with a polishing step
//! that solves the problem exactly on the face identified by the iterates.
//!
//! `P` stacks weighted identity rows (zero-order penalty) over weighted
//! second-difference rows (curvature penalty).

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

/// Structured penalty operator.
#[derive(Debug, Clone)]
pub struct Penalty {
    pub p: usize,
    /// weight of `|η_j|`, one per grid point (empty when unused)
    pub zero_w: Vec<f64>,
    /// weight of `|η_{j-1} - 2η_j + η_{j+1}|`, `j = 1..p-1` (0 when unused)
    pub curv_w: f64,
}

impl Penalty {
    pub fn rows(&self) -> usize {
        self.zero_w.len() + if self.curv_w > 0.0 { self.p - 2 } else { 0 }
    }

    pub fn apply(&self, eta: &[f64], out: &mut [f64]) {
        let z = self.zero_w.len();
        for j in 0..z {
            out[j] = self.zero_w[j] * eta[j];
        }
        if self.curv_w > 0.0 {
            for j in 1..self.p - 1 {
                out[z + j - 1] = self.curv_w * (eta[j - 1] - 2.0 * eta[j] + eta[j + 1]);
            }
        }
    }

    pub fn apply_t(&self, v: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        let z = self.zero_w.len();
        for j in 0..z {
            out[j] += self.zero_w[j] * v[j];
        }
        if self.curv_w > 0.0 {
            for j in 1..self.p - 1 {
                let x = self.curv_w * v[z + j - 1];
                out[j - 1] += x;
                out[j] -= 2.0 * x;
                out[j + 1] += x;
            }
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let m = self.rows();
        let mut d = DMatrix::zeros(m, self.p);
        let mut e = vec![0.0; self.p];
        let mut col = vec![0.0; m];
        for j in 0..self.p {
            e.iter_mut().for_each(|x| *x = 0.0);
            e[j] = 1.0;
            self.apply(&e, &mut col);
            for i in 0..m {
                d[(i, j)] = col[i];
            }
        }
        d
    }

    pub fn norm1(&self, eta: &[f64]) -> f64 {
        let mut out = vec![0.0; self.rows()];
        self.apply(eta, &mut out);
        out.iter().map(|x| x.abs()).sum()
    }
}

/// Quadratic part: `½ηᵀMη − gᵀη`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub m: DMatrix<f64>,
    pub g: DVector<f64>,
    /// constant `½yᵀy/n`, so the objective equals the mean squared loss
    pub c: f64,
}

impl Quadratic {
    pub fn objective(&self, eta: &[f64], sigma: f64, pen: &Penalty) -> f64 {
        let e = DVector::from_column_slice(eta);
        0.5 * e.dot(&(&self.m * &e)) - self.g.dot(&e) + self.c + sigma * pen.norm1(eta)
    }
}

#[derive(Debug, Clone)]
pub struct AdmmState {
    pub eta: Vec<f64>,
    pub z: Vec<f64>,
    /// unscaled dual variable
    pub y: Vec<f64>,
    pub rho: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmReport {
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdmmSettings {
    pub max_iter: usize,
    pub abs_tol: f64,
    pub rel_tol: f64,
}

impl Default for AdmmSettings {
    fn default() -> Self {
        AdmmSettings {
            max_iter: 1_000,
            abs_tol: 1e-10,
            rel_tol: 1e-7,
        }
    }
}

fn factor(q: &Quadratic, ptp: &DMatrix<f64>, rho: f64) -> Cholesky<f64, nalgebra::Dyn> {
    let p = q.m.nrows();
    let mut a = &q.m + ptp * rho;
    let ridge = 1e-12 * (a.trace() / p as f64).max(1e-300);
    for i in 0..p {
        a[(i, i)] += ridge;
    }
    Cholesky::new(a).expect("M + ρPᵀP + ridge is positive definite")
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Run ADMM from `start` (or from zero).
pub fn admm(
    q: &Quadratic,
    pen: &Penalty,
    ptp: &DMatrix<f64>,
    sigma: f64,
    start: Option<AdmmState>,
    settings: &AdmmSettings,
) -> (AdmmState, AdmmReport) {
    let p = pen.p;
    let m = pen.rows();
    let mut st = start.unwrap_or_else(|| AdmmState {
        eta: vec![0.0; p],
        z: vec![0.0; m],
        y: vec![0.0; m],
        rho: (q.m.trace() / ptp.trace().max(1e-300)).max(1e-12),
    });
    let mut chol = factor(q, ptp, st.rho);
    let alpha = 1.6;
    let mut pe = vec![0.0; m];
    let mut rhs_t = vec![0.0; p];
    let mut z_old = vec![0.0; m];
    let mut tmp = vec![0.0; m];
    let mut report = AdmmReport {
        iterations: 0,
        converged: false,
        primal_residual: f64::INFINITY,
        dual_residual: f64::INFINITY,
    };
    let g_norm = q.g.norm();
    for it in 1..=settings.max_iter {
        // η-update
        for k in 0..m {
            tmp[k] = st.rho * st.z[k] - st.y[k];
        }
        pen.apply_t(&tmp, &mut rhs_t);
        let mut rhs = q.g.clone();
        for j in 0..p {
            rhs[j] += rhs_t[j];
        }
        let eta = chol.solve(&rhs);
        st.eta.copy_from_slice(eta.as_slice());
        pen.apply(&st.eta, &mut pe);
        // z-update with over-relaxation
        z_old.copy_from_slice(&st.z);
        let thr = sigma / st.rho;
        for k in 0..m {
            let relaxed = alpha * pe[k] + (1.0 - alpha) * z_old[k];
            let v = relaxed + st.y[k] / st.rho;
            st.z[k] = if v > thr {
                v - thr
            } else if v < -thr {
                v + thr
            } else {
                0.0
            };
            st.y[k] += st.rho * (relaxed - st.z[k]);
        }
        // residuals
        for k in 0..m {
            tmp[k] = pe[k] - st.z[k];
        }
        let r = norm(&tmp);
        for k in 0..m {
            tmp[k] = st.z[k] - z_old[k];
        }
        pen.apply_t(&tmp, &mut rhs_t);
        let s = st.rho * norm(&rhs_t);
        pen.apply_t(&st.y, &mut rhs_t);
        let eps_pri = (m as f64).sqrt() * settings.abs_tol + settings.rel_tol * norm(&pe).max(norm(&st.z));
        // scaled like the linear term too, so a small σ does not shrink the target
        let eps_dual = (p as f64).sqrt() * settings.abs_tol + settings.rel_tol * norm(&rhs_t).max(g_norm);
        report = AdmmReport {
            iterations: it,
            converged: false,
            primal_residual: r,
            dual_residual: s,
        };
        if r <= eps_pri && s <= eps_dual {
            report.converged = true;
            break;
        }
        if it % 25 == 0 {
            let new_rho = if r > 10.0 * s {
                st.rho * 2.0
            } else if s > 10.0 * r {
                st.rho / 2.0
            } else {
                st.rho
            };
            if new_rho != st.rho {
                st.rho = new_rho;
                chol = factor(q, ptp, st.rho);
            }
        }
    }
    (st, report)
}

/// Exact minimizer on the face `{(Pη)_k = 0, k ∈ zero set}` with the signs of
/// the remaining rows fixed. Returns `None` when the reduced problem is
/// singular along a descent direction.
pub fn polish(q: &Quadratic, pen: &Penalty, sigma: f64, z: &[f64]) -> Option<Vec<f64>> {
    let p = pen.p;
    let nz = pen.zero_w.len();
    let mut fixed_zero = vec![false; p];
    for j in 0..nz {
        if z[j] == 0.0 && pen.zero_w[j] > 0.0 {
            fixed_zero[j] = true;
        }
    }
    let free: Vec<usize> = (0..p).filter(|&j| !fixed_zero[j]).collect();
    if free.is_empty() {
        return Some(vec![0.0; p]);
    }
    let f = free.len();
    let mut pos = vec![usize::MAX; p];
    for (k, &j) in free.iter().enumerate() {
        pos[j] = k;
    }
    // linear term from the sign-fixed nonzero rows
    let signs: Vec<f64> = z.iter().map(|v| if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 }).collect();
    let mut lin = vec![0.0; p];
    pen.apply_t(&signs, &mut lin);
    // curvature rows forced to zero, restricted to the free coordinates
    let mut cons: Vec<Vec<(usize, f64)>> = Vec::new();
    if pen.curv_w > 0.0 {
        for j in 1..p - 1 {
            if z[nz + j - 1] == 0.0 {
                let row: Vec<(usize, f64)> = [(j - 1, 1.0), (j, -2.0), (j + 1, 1.0)]
                    .into_iter()
                    .filter(|(c, _)| !fixed_zero[*c])
                    .map(|(c, v)| (pos[c], v))
                    .collect();
                if !row.is_empty() {
                    cons.push(row);
                }
            }
        }
    }
    let basis = if cons.is_empty() {
        DMatrix::identity(f, f)
    } else {
        let mut ctc = DMatrix::zeros(f, f);
        for row in &cons {
            for &(a, va) in row {
                for &(b, vb) in row {
                    ctc[(a, b)] += va * vb;
                }
            }
        }
        let eig = SymmetricEigen::new(ctc);
        let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let null: Vec<usize> = (0..f).filter(|&i| eig.eigenvalues[i] <= 1e-10 * top.max(1.0)).collect();
        if null.is_empty() {
            return Some(vec![0.0; p]);
        }
        DMatrix::from_fn(f, null.len(), |r, c| eig.eigenvectors[(r, null[c])])
    };
    let m_ff = DMatrix::from_fn(f, f, |a, b| q.m[(free[a], free[b])]);
    let r_f = DVector::from_fn(f, |a, _| q.g[free[a]] - sigma * lin[free[a]]);
    let h = basis.transpose() * &m_ff * &basis;
    let rhs = basis.transpose() * r_f;
    let theta = match Cholesky::new(h.clone()) {
        Some(ch) => ch.solve(&rhs),
        None => {
            let svd = h.clone().try_svd(true, true, f64::EPSILON, 1000)?;
            let th = svd.solve(&rhs, 1e-12 * svd.singular_values.max()).ok()?;
            if (&h * &th - &rhs).norm() > 1e-8 * (1.0 + rhs.norm()) {
                return None;
            }
            th
        }
    };
    let eta_f = basis * theta;
    let mut eta = vec![0.0; p];
    for (k, &j) in free.iter().enumerate() {
        eta[j] = eta_f[k];
    }
    Some(eta)
}

/// Polish on the face of `z`; rows whose sign flips on the polished point
/// join the zero set and the face is solved again. `Some` only with a
/// certificate.
pub fn refine(q: &Quadratic, pen: &Penalty, sigma: f64, z: &[f64], tol: f64) -> Option<Vec<f64>> {
    let mut z = z.to_vec();
    let mut pe = vec![0.0; pen.rows()];
    for _ in 0..pen.rows() {
        let eta = polish(q, pen, sigma, &z)?;
        pen.apply(&eta, &mut pe);
        let mut flipped = false;
        for k in 0..z.len() {
            if z[k] != 0.0 && pe[k] * z[k] < 0.0 {
                z[k] = 0.0;
                flipped = true;
            }
        }
        if !flipped {
            return certify(q, pen, sigma, &eta, tol).then_some(eta);
        }
    }
    None
}

/// Whether `eta` satisfies the optimality conditions up to `tol`: a
/// subgradient with entries in `[-1, 1]` on the zero rows balances the
/// gradient of the quadratic part.
pub fn certify(q: &Quadratic, pen: &Penalty, sigma: f64, eta: &[f64], tol: f64) -> bool {
    let p = pen.p;
    let m = pen.rows();
    let mut pe = vec![0.0; m];
    pen.apply(eta, &mut pe);
    let scale = pe.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    let zero: Vec<usize> = (0..m).filter(|&k| pe[k].abs() <= 1e-9 * scale).collect();
    let signs: Vec<f64> = (0..m)
        .map(|k| if zero.contains(&k) { 0.0 } else { pe[k].signum() })
        .collect();
    let e = DVector::from_column_slice(eta);
    let grad = &q.m * &e - &q.g;
    let mut lin = vec![0.0; p];
    pen.apply_t(&signs, &mut lin);
    // need P_Zᵀ v = -(grad/σ + P_Nᵀ s)
    let target = DVector::from_fn(p, |j, _| -(grad[j] / sigma + lin[j]));
    if zero.is_empty() {
        return target.norm() <= tol * (1.0 + grad.norm() / sigma);
    }
    let dense = pen.dense();
    let pz_t = DMatrix::from_fn(p, zero.len(), |j, c| dense[(zero[c], j)]);
    let Some(svd) = pz_t.clone().try_svd(true, true, f64::EPSILON, 1000) else {
        return false;
    };
    let Ok(v) = svd.solve(&target, 1e-12) else { return false };
    let resid = (&pz_t * &v - &target).norm();
    if resid > tol * (1.0 + target.norm()) {
        return false;
    }
    let c0 = v.amax();
    if c0 <= 1.0 + tol {
        return true;
    }
    // dependent zero rows leave a family of subgradients; the minimum-norm
    // one may leave the box while another stays inside
    min_sup_norm(&pz_t, &v, c0).is_some_and(|t| t <= 1.0 + tol)
}

/// `min ‖v0 + Nθ‖∞` over the null space `N` of `pz_t`, as an LP in
/// `t = c0 − τ` so every right-hand side is non-negative.
fn min_sup_norm(pz_t: &DMatrix<f64>, v0: &DVector<f64>, c0: f64) -> Option<f64> {
    let z = v0.len();
    let gram = pz_t.transpose() * pz_t;
    let eig = SymmetricEigen::new(gram);
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let null: Vec<usize> = (0..z).filter(|&i| eig.eigenvalues[i] <= 1e-10 * top.max(1e-300)).collect();
    if null.is_empty() {
        return Some(c0);
    }
    let d = null.len();
    // columns: θ+ (d), θ− (d), τ, s1 (z), s2 (z)
    let n = 2 * d + 1 + 2 * z;
    let mut a = Vec::with_capacity(2 * z);
    let mut b = Vec::with_capacity(2 * z);
    for k in 0..z {
        for sign in [1.0, -1.0] {
            let mut row = vec![0.0; n];
            for (c, &i) in null.iter().enumerate() {
                let nk = eig.eigenvectors[(k, i)];
                row[c] = sign * nk;
                row[d + c] = -sign * nk;
            }
            row[2 * d] = 1.0;
            let slack = if sign > 0.0 { 2 * d + 1 + k } else { 2 * d + 1 + z + k };
            row[slack] = 1.0;
            a.push(row);
            b.push(c0 - sign * v0[k]);
        }
    }
    let mut c = vec![0.0; n];
    c[2 * d] = -1.0;
    let x = super::simplex::solve(&a, &b, &c, 20 * (2 * z + n)).ok()?;
    Some(c0 - x[2 * d])
}
