//! Primal-dual interior point for `½ηᵀMη − gᵀη + σ‖Pη‖₁`, written as the
//! QP `min ½ηᵀMη − gᵀη + σ Σt  s.t. −t ≤ Pη ≤ t`.
//!
//! Used when ADMM stalls; slower per solve but insensitive to the
//! conditioning of `M` and `P`.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::admm::{Penalty, Quadratic};

#[derive(Debug, Clone, Copy)]
pub struct IpmSettings {
    pub max_iter: usize,
    /// Stop when the average complementarity and the stationarity residual
    /// fall below this, relative to the problem scale.
    pub tol: f64,
}

impl Default for IpmSettings {
    fn default() -> Self {
        IpmSettings { max_iter: 200, tol: 1e-10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpmReport {
    pub iterations: usize,
    pub gap: f64,
    pub stationarity: f64,
}

fn step_to_boundary(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(f64::INFINITY, f64::min)
}

/// Returns the minimizer, or the report of the failed run.
pub fn solve(q: &Quadratic, pen: &Penalty, sigma: f64, settings: &IpmSettings) -> Result<Vec<f64>, IpmReport> {
    let p = pen.p;
    let pm = pen.dense();
    let m = pm.nrows();
    let mut eta = DVector::zeros(p);
    let mut t = DVector::from_element(m, 1.0);
    let mut l1 = DVector::from_element(m, sigma / 2.0);
    let mut l2 = DVector::from_element(m, sigma / 2.0);
    let scale = 1.0 + q.g.norm();
    let ridge = 1e-14 * (q.m.trace() + (pm.transpose() * &pm).trace()).max(1e-300);
    let mut report = IpmReport {
        iterations: 0,
        gap: f64::INFINITY,
        stationarity: f64::INFINITY,
    };
    for it in 1..=settings.max_iter {
        let pe = &pm * &eta;
        let s1 = &t - &pe;
        let s2 = &t + &pe;
        let gap = (l1.dot(&s1) + l2.dot(&s2)) / (2 * m) as f64;
        let r_eta = &q.m * &eta - &q.g + pm.transpose() * (&l1 - &l2);
        let r_t = DVector::from_fn(m, |k, _| sigma - l1[k] - l2[k]);
        report = IpmReport {
            iterations: it,
            gap,
            stationarity: r_eta.norm(),
        };
        let done = |tol: f64| gap <= tol * sigma.max(1e-300) && r_eta.norm() <= tol * scale && r_t.norm() <= tol * scale;
        if done(settings.tol) {
            return Ok(eta.iter().copied().collect());
        }
        // past this point a breakdown of the Newton system still leaves a usable point
        let usable = done(1e-7).then(|| eta.iter().copied().collect::<Vec<f64>>());
        let fail = |report: IpmReport| usable.clone().ok_or(report);
        let mu = 0.1 * gap;
        let a = l1.component_div(&s1);
        let b = l2.component_div(&s2);
        let c1 = DVector::from_fn(m, |k, _| mu / s1[k] - l1[k]);
        let c2 = DVector::from_fn(m, |k, _| mu / s2[k] - l2[k]);
        let d = DVector::from_fn(m, |k, _| 4.0 * a[k] * b[k] / (a[k] + b[k]));
        let e = DVector::from_fn(m, |k, _| {
            c1[k] - c2[k] - (a[k] - b[k]) * (c1[k] + c2[k] - r_t[k]) / (a[k] + b[k])
        });
        let mut h = q.m.clone();
        for k in 0..m {
            let row = pm.row(k);
            let w = d[k];
            for i in 0..p {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in 0..p {
                    h[(i, j)] += w * ri * row[j];
                }
            }
        }
        for i in 0..p {
            h[(i, i)] += ridge;
        }
        let rhs = -(&r_eta + pm.transpose() * &e);
        if !h.iter().chain(rhs.iter()).all(|v| v.is_finite()) {
            return fail(report);
        }
        let deta = match Cholesky::new(h.clone()) {
            Some(ch) => ch.solve(&rhs),
            None => {
                let Some(svd) = DMatrix::try_svd(h, true, true, f64::EPSILON, 1000) else {
                    return fail(report);
                };
                let tol = 1e-14 * svd.singular_values.max();
                match svd.solve(&rhs, tol) {
                    Ok(x) => x,
                    Err(_) => return fail(report),
                }
            }
        };
        let pd = &pm * &deta;
        let dt = DVector::from_fn(m, |k, _| (c1[k] + c2[k] - r_t[k] + (a[k] - b[k]) * pd[k]) / (a[k] + b[k]));
        let ds1 = &dt - &pd;
        let ds2 = &dt + &pd;
        let dl1 = DVector::from_fn(m, |k, _| c1[k] - a[k] * ds1[k]);
        let dl2 = DVector::from_fn(m, |k, _| c2[k] - b[k] * ds2[k]);
        let alpha = [
            step_to_boundary(&s1, &ds1),
            step_to_boundary(&s2, &ds2),
            step_to_boundary(&l1, &dl1),
            step_to_boundary(&l2, &dl2),
        ]
        .into_iter()
        .fold(1.0f64, |acc, x| acc.min(0.99 * x));
        if !(alpha > 0.0) || !alpha.is_finite() {
            return fail(report);
        }
        eta += alpha * deta;
        t += alpha * dt;
        l1 += alpha * dl1;
        l2 += alpha * dl2;
    }
    Err(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn plain_lasso_matches_soft_threshold() {
        // M = I: η_j = soft(g_j, σ w_j)
        let p = 5;
        let pen = Penalty {
            p,
            zero_w: vec![1.0; p],
            curv_w: 0.0,
        };
        let q = Quadratic {
            m: DMatrix::identity(p, p),
            g: DVector::from_vec(vec![2.0, -0.3, 0.7, -1.5, 0.1]),
            c: 0.0,
        };
        let eta = solve(&q, &pen, 0.5, &IpmSettings::default()).unwrap();
        let want = [1.5, 0.0, 0.2, -1.0, 0.0];
        for (a, b) in eta.iter().zip(want) {
            assert!((a - b).abs() < 1e-8, "{eta:?}");
        }
    }

    #[test]
    fn agrees_with_admm_on_a_curvature_penalty() {
        let p = 12;
        let pen = Penalty {
            p,
            zero_w: vec![],
            curv_w: 1.0,
        };
        let m = DMatrix::from_fn(p, p, |i, j| 1.0 / (1.0 + (i as f64 - j as f64).abs()));
        let g = DVector::from_fn(p, |i, _| ((i as f64) * 0.7).sin());
        let q = Quadratic { m, g, c: 0.0 };
        let sigma = 0.05;
        let eta = solve(&q, &pen, sigma, &IpmSettings::default()).unwrap();
        let d = pen.dense();
        let ptp = d.transpose() * &d;
        let (st, rep) = super::super::admm::admm(&q, &pen, &ptp, sigma, None, &Default::default());
        assert!(rep.converged);
        let f_ipm = q.objective(&eta, sigma, &pen);
        let f_admm = q.objective(&st.eta, sigma, &pen);
        assert!((f_ipm - f_admm).abs() < 1e-8 * (1.0 + f_admm.abs()), "{f_ipm} {f_admm}");
    }
}
