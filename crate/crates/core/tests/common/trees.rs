//! Exhaustive root-split search and pure-noise pruning runs.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vinestress::cart::{best_root_split, fit, Column, ColumnValues, Dataset, Node, SplitRule, TreeParams};

pub fn random_dataset(seed: u64, noise_only: bool) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).unwrap();
    let n = rng.random_range(8..=200usize);
    let p = rng.random_range(1..=4usize);
    let mut y: Vec<f64> = (0..n).map(|_| unit.sample(&mut rng)).collect();
    let mut columns = Vec::new();
    for j in 0..p {
        let name = format!("x{j}");
        if rng.random_bool(0.3) {
            let levels = rng.random_range(2..=6usize);
            let effect: Vec<f64> = (0..levels).map(|_| unit.sample(&mut rng)).collect();
            let c: Vec<usize> = (0..n).map(|_| rng.random_range(0..levels)).collect();
            if !noise_only {
                for (yi, ci) in y.iter_mut().zip(&c) {
                    *yi += effect[*ci];
                }
            }
            columns.push(Column::categorical(name, c.iter().map(|l| format!("L{l}")).collect()));
        } else {
            // coarse rounding on some columns to force tied values
            let digits = if rng.random_bool(0.5) { 1.0 } else { 1e6 };
            let x: Vec<f64> = (0..n).map(|_| (unit.sample(&mut rng) * digits).round() / digits).collect();
            if !noise_only {
                let cut = unit.sample(&mut rng) * 0.5;
                let jump = 2.0 * unit.sample(&mut rng);
                for (yi, xi) in y.iter_mut().zip(&x) {
                    if *xi > cut {
                        *yi += jump;
                    }
                }
            }
            columns.push(Column::numeric(name, x));
        }
    }
    Dataset::new(columns, y).unwrap()
}

fn sse(ys: &[f64]) -> f64 {
    if ys.is_empty() {
        return 0.0;
    }
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    ys.iter().map(|y| (y - m) * (y - m)).sum()
}

/// Every threshold between distinct values and every category subset.
pub fn brute_force(data: &Dataset, min_leaf: usize) -> Option<(usize, Vec<bool>, f64)> {
    let n = data.len();
    let total = sse(&data.y);
    let mut best: Option<(usize, Vec<bool>, f64)> = None;
    for (var, col) in data.columns.iter().enumerate() {
        let partitions: Vec<Vec<bool>> = match &col.values {
            ColumnValues::Numeric(x) => {
                let mut sorted: Vec<f64> = x.clone();
                sorted.sort_by(f64::total_cmp);
                sorted.dedup();
                sorted
                    .windows(2)
                    .map(|w| 0.5 * (w[0] + w[1]))
                    .map(|t| x.iter().map(|v| *v <= t).collect())
                    .collect()
            }
            ColumnValues::Categorical(c) => {
                let levels: Vec<&String> = c.iter().collect::<BTreeSet<_>>().into_iter().collect();
                let l = levels.len();
                (1..(1u32 << l) - 1)
                    .map(|mask| c.iter().map(|v| mask >> levels.iter().position(|x| *x == v).unwrap() & 1 == 1).collect())
                    .collect()
            }
        };
        for left in partitions {
            let l: Vec<f64> = (0..n).filter(|&i| left[i]).map(|i| data.y[i]).collect();
            let r: Vec<f64> = (0..n).filter(|&i| !left[i]).map(|i| data.y[i]).collect();
            if l.len() < min_leaf || r.len() < min_leaf {
                continue;
            }
            let red = total - sse(&l) - sse(&r);
            if best.as_ref().is_none_or(|b| red > b.2 * (1.0 + 1e-9)) {
                best = Some((var, left, red));
            }
        }
    }
    best.filter(|b| b.2 > 1e-9 * total.max(1e-300))
}

fn left_mask(data: &Dataset, var: usize, rule: &SplitRule) -> Vec<bool> {
    match (&data.columns[var].values, rule) {
        (ColumnValues::Numeric(x), SplitRule::Threshold(t)) => x.iter().map(|v| v <= t).collect(),
        (ColumnValues::Categorical(c), SplitRule::Categories(set)) => c.iter().map(|v| set.contains(v)).collect(),
        _ => panic!("rule does not match the column kind"),
    }
}

#[derive(Debug, Default)]
pub struct TreeOutcome {
    pub datasets: usize,
    pub root_mismatches: Vec<u64>,
    pub noise_runs: usize,
    pub noise_root_leaves: usize,
}

impl TreeOutcome {
    pub fn root_rate(&self) -> f64 {
        self.noise_root_leaves as f64 / self.noise_runs as f64
    }

    pub fn passed(&self) -> bool {
        self.root_mismatches.is_empty() && self.root_rate() >= 0.95
    }
}

/// Same variable and the same partition of the cases (either side left).
pub fn root_split_agrees(data: &Dataset) -> bool {
    let ours = best_root_split(data, 1);
    let brute = brute_force(data, 1);
    match (ours, brute) {
        (None, None) => true,
        (Some(o), Some((var, left, red))) => {
            let mask = left_mask(data, o.variable, &o.rule);
            let flipped: Vec<bool> = left.iter().map(|b| !b).collect();
            o.variable == var && (mask == left || mask == flipped) && (o.reduction - red).abs() <= 1e-9 * red.max(1.0)
        }
        _ => false,
    }
}

pub fn tree_checks(datasets: u64, noise_runs: u64) -> TreeOutcome {
    let mut out = TreeOutcome::default();
    for seed in 0..datasets {
        out.datasets += 1;
        if !root_split_agrees(&random_dataset(seed, false)) {
            out.root_mismatches.push(seed);
        }
    }
    for seed in 0..noise_runs {
        let data = random_dataset(10_000 + seed, true);
        let tree = fit(&data, &TreeParams::default(), 10, seed).unwrap();
        out.noise_runs += 1;
        if matches!(tree.root, Node::Leaf { .. }) {
            out.noise_root_leaves += 1;
        }
    }
    out
}
