//! Synthetic scalar-on-function data with a known coefficient curve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vinestress::flrti::{uniform_grid, FlrtiModel, FunctionalData, FunctionalSample};

fn tri(s: f64, a: f64, m: f64, b: f64) -> f64 {
    if s <= a || s >= b {
        0.0
    } else if s <= m {
        (s - a) / (m - a)
    } else {
        (b - s) / (b - m)
    }
}

/// Two positive peaks then a negative trough on `[0, 1]`, zero elsewhere.
pub fn two_peaks_one_trough(s: f64) -> f64 {
    3.0 * tri(s, 0.10, 0.20, 0.30) + 2.0 * tri(s, 0.40, 0.475, 0.55) - 3.0 * tri(s, 0.70, 0.80, 0.90)
}

pub const REGIONS: [(f64, f64); 3] = [(0.10, 0.30), (0.40, 0.55), (0.70, 0.90)];

/// Smooth random curves: random level plus a Fourier series with slowly
/// decaying amplitudes.
pub fn curves(n: usize, p: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|_| {
            let level = normal.sample(rng);
            let coef: Vec<(f64, f64)> = (1..=25)
                .map(|k| {
                    let a = 1.0 / (k as f64).powf(0.6);
                    (a * normal.sample(rng), a * normal.sample(rng))
                })
                .collect();
            (0..p)
                .map(|j| {
                    let s = j as f64 / (p - 1) as f64;
                    level
                        + coef
                            .iter()
                            .enumerate()
                            .map(|(k, (a, b))| {
                                let w = std::f64::consts::PI * (k + 1) as f64 * s;
                                a * w.sin() + b * w.cos()
                            })
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

fn trapeze(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(a, b)| 0.5 * (a[1] - a[0]) * (b[0] + b[1])).sum()
}

/// `y = 1 + ∫ x β + noise` on a uniform grid of `p` points.
pub fn simulate(n: usize, p: usize, beta: impl Fn(f64) -> f64, noise: f64, seed: u64) -> FunctionalData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = uniform_grid(0.0, 1.0, p);
    let b: Vec<f64> = grid.iter().map(|&s| beta(s)).collect();
    let normal = Normal::new(0.0, noise).unwrap();
    let xs = curves(n, p, &mut rng);
    let samples = xs
        .into_iter()
        .map(|x| {
            let prod: Vec<f64> = x.iter().zip(&b).map(|(a, c)| a * c).collect();
            let y = 1.0 + trapeze(&grid, &prod) + normal.sample(&mut rng);
            FunctionalSample { x, y }
        })
        .collect();
    FunctionalData::new(grid, samples).unwrap()
}

/// Sum of the estimated coefficient over each of the three true regions.
pub fn region_sums(model: &FlrtiModel) -> [f64; 3] {
    let mut sums = [0.0; 3];
    for (t, b) in model.grid.iter().zip(&model.beta) {
        if let Some(k) = REGIONS.iter().position(|(a, z)| t > a && t < z) {
            sums[k] += b;
        }
    }
    sums
}

/// Fraction of grid points where the truth is zero and the estimate is
/// exactly zero.
pub fn exact_zero_recovery(model: &FlrtiModel, truth: impl Fn(f64) -> f64) -> f64 {
    let zeros: Vec<f64> = model
        .grid
        .iter()
        .zip(&model.beta)
        .filter(|(t, _)| truth(**t) == 0.0)
        .map(|(_, b)| *b)
        .collect();
    zeros.iter().filter(|b| **b == 0.0).count() as f64 / zeros.len() as f64
}

#[derive(Debug)]
pub struct Recovery {
    pub signs: [f64; 3],
    pub zero_fraction: f64,
    pub sigma: f64,
    pub omega: f64,
    pub paper_point_in_grid: bool,
    pub elapsed: std::time::Duration,
}

impl Recovery {
    pub fn signs_recovered(&self) -> bool {
        self.signs[0] > 0.0 && self.signs[1] > 0.0 && self.signs[2] < 0.0
    }
}

/// Cross-validated fit on the reference design: 100 curves on 100 points.
pub fn cv_recovery() -> Recovery {
    use vinestress::flrti::{fit_cv, Selector, DEFAULT_GRID_POINTS, DEFAULT_OMEGAS, DEFAULT_SIGMAS};
    let start = std::time::Instant::now();
    let data = simulate(100, DEFAULT_GRID_POINTS, two_peaks_one_trough, 0.1, 4);
    let (m, cv) = fit_cv(&data, &DEFAULT_SIGMAS, &DEFAULT_OMEGAS, 10, 2012, Selector::Lasso).expect("cv fit");
    Recovery {
        signs: region_sums(&m),
        zero_fraction: exact_zero_recovery(&m, two_peaks_one_trough),
        sigma: cv.best_sigma,
        omega: cv.best_omega,
        paper_point_in_grid: DEFAULT_SIGMAS.contains(&0.05) && DEFAULT_OMEGAS.contains(&0.95),
        elapsed: start.elapsed(),
    }
}
