//! Regression trees with cost-complexity pruning.
//!
//! Splits maximize the between-group sum of squares. Numeric thresholds sit at
//! midpoints of consecutive distinct values and cases with `x <= threshold` go
//! left. Categorical predictors are split by ordering categories on their mean
//! response, which is exact for the squared-error criterion. The grown tree is
//! pruned by weakest-link cost complexity, the complexity being chosen by
//! k-fold cross-validation with the one-standard-error rule.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum CartError {
    #[error("dataset has no rows")]
    Empty,
    #[error("column '{name}' has {got} values, expected {expected}")]
    Length { name: String, got: usize, expected: usize },
    #[error("non-finite value in '{0}'")]
    NonFinite(String),
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("{folds} folds requested for {n} cases")]
    Folds { folds: usize, n: usize },
    #[error("case lacks variable '{0}' or has the wrong kind")]
    Case(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnValues {
    Numeric(Vec<f64>),
    Categorical(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub values: ColumnValues,
}

impl Column {
    pub fn numeric(name: impl Into<String>, values: Vec<f64>) -> Self {
        Column {
            name: name.into(),
            values: ColumnValues::Numeric(values),
        }
    }

    pub fn categorical(name: impl Into<String>, values: Vec<String>) -> Self {
        Column {
            name: name.into(),
            values: ColumnValues::Categorical(values),
        }
    }

    fn len(&self) -> usize {
        match &self.values {
            ColumnValues::Numeric(v) => v.len(),
            ColumnValues::Categorical(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub columns: Vec<Column>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(columns: Vec<Column>, y: Vec<f64>) -> Result<Self, CartError> {
        if y.is_empty() {
            return Err(CartError::Empty);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CartError::NonFinite("y".into()));
        }
        for c in &columns {
            if c.len() != y.len() {
                return Err(CartError::Length {
                    name: c.name.clone(),
                    got: c.len(),
                    expected: y.len(),
                });
            }
            if let ColumnValues::Numeric(v) = &c.values {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(CartError::NonFinite(c.name.clone()));
                }
            }
        }
        Ok(Dataset { columns, y })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Row `i` as a case for prediction.
    pub fn case(&self, i: usize) -> Vec<Feature> {
        self.columns
            .iter()
            .map(|c| match &c.values {
                ColumnValues::Numeric(v) => Feature::Numeric(v[i]),
                ColumnValues::Categorical(v) => Feature::Categorical(v[i].clone()),
            })
            .collect()
    }

    fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            columns: self
                .columns
                .iter()
                .map(|c| Column {
                    name: c.name.clone(),
                    values: match &c.values {
                        ColumnValues::Numeric(v) => ColumnValues::Numeric(rows.iter().map(|&i| v[i]).collect()),
                        ColumnValues::Categorical(v) => {
                            ColumnValues::Categorical(rows.iter().map(|&i| v[i].clone()).collect())
                        }
                    },
                })
                .collect(),
            y: rows.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Feature {
    Numeric(f64),
    Categorical(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// `x <= threshold` goes left.
    Threshold(f64),
    /// Listed categories go left.
    Categories(BTreeSet<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitChoice {
    pub variable: usize,
    pub rule: SplitRule,
    /// Between-group sum of squares.
    pub reduction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NodeStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation, 0 for a single case.
    pub sd: f64,
    /// Sum of squared deviations from the mean.
    pub deviance: f64,
}

impl NodeStats {
    fn of(ys: impl Iterator<Item = f64> + Clone) -> NodeStats {
        let n = ys.clone().count();
        let mean = ys.clone().sum::<f64>() / n as f64;
        let deviance: f64 = ys.map(|y| (y - mean) * (y - mean)).sum();
        let sd = if n > 1 { (deviance / (n - 1) as f64).sqrt() } else { 0.0 };
        NodeStats { n, mean, sd, deviance }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Leaf {
        #[serde(flatten)]
        stats: NodeStats,
    },
    Split {
        #[serde(flatten)]
        stats: NodeStats,
        variable: String,
        rule: SplitRule,
        /// Side taken by categories absent from training.
        unseen_left: bool,
        left: Box<Node>,
        right: Box<Node>,
    },
}

impl Node {
    pub fn stats(&self) -> &NodeStats {
        match self {
            Node::Leaf { stats } | Node::Split { stats, .. } => stats,
        }
    }

    pub fn leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.leaves() + right.leaves(),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    /// Sum of leaf deviances.
    pub fn risk(&self) -> f64 {
        match self {
            Node::Leaf { stats } => stats.deviance,
            Node::Split { left, right, .. } => left.risk() + right.risk(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Smallest node that may be split.
    pub min_split: usize,
    pub min_leaf: usize,
    /// A split must reduce the deviance by at least `cp` times the root deviance.
    pub cp: f64,
    pub max_depth: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            min_split: 6,
            min_leaf: 2,
            cp: 0.01,
            max_depth: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub variables: Vec<String>,
    pub root: Node,
    /// Complexity parameter of the returned subtree, relative to the root deviance.
    pub cp: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cp_table: Vec<CpRow>,
    /// Categories seen in training, per categorical variable.
    #[serde(default)]
    pub known_categories: BTreeMap<String, BTreeSet<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CpRow {
    pub cp: f64,
    pub leaves: usize,
    pub rel_error: f64,
    pub cv_error: f64,
    pub cv_se: f64,
}

/// Best split of `rows` on one variable, honoring `min_leaf`.
fn split_on(data: &Dataset, rows: &[usize], var: usize, min_leaf: usize) -> Option<(SplitRule, f64)> {
    let n = rows.len();
    if n < 2 * min_leaf.max(1) {
        return None;
    }
    // (key, y) pairs sorted by key; categories keyed by their mean response
    let (keys, order_names): (Vec<(f64, f64)>, Option<Vec<(f64, String)>>) = match &data.columns[var].values {
        ColumnValues::Numeric(x) => {
            let mut v: Vec<(f64, f64)> = rows.iter().map(|&i| (x[i], data.y[i])).collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (v, None)
        }
        ColumnValues::Categorical(c) => {
            let mut acc: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
            for &i in rows {
                let e = acc.entry(c[i].as_str()).or_default();
                e.0 += data.y[i];
                e.1 += 1;
            }
            let mut cats: Vec<(f64, String)> = acc.iter().map(|(k, (s, m))| (s / *m as f64, k.to_string())).collect();
            cats.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            let rank: BTreeMap<&str, f64> = cats.iter().enumerate().map(|(r, (_, k))| (k.as_str(), r as f64)).collect();
            let mut v: Vec<(f64, f64)> = rows.iter().map(|&i| (rank[c[i].as_str()], data.y[i])).collect();
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (v, Some(cats))
        }
    };
    let total: f64 = keys.iter().map(|k| k.1).sum();
    let mut left_sum = 0.0;
    let mut best: Option<(usize, f64)> = None;
    for i in 0..n - 1 {
        left_sum += keys[i].1;
        if keys[i].0 == keys[i + 1].0 {
            continue;
        }
        let nl = i + 1;
        let nr = n - nl;
        if nl < min_leaf || nr < min_leaf {
            continue;
        }
        let ml = left_sum / nl as f64;
        let mr = (total - left_sum) / nr as f64;
        let red = (nl * nr) as f64 / n as f64 * (ml - mr) * (ml - mr);
        if best.is_none_or(|(_, b)| red > b * (1.0 + 1e-12) + 1e-300) {
            best = Some((i, red));
        }
    }
    let (i, red) = best?;
    if red <= 0.0 {
        return None;
    }
    let rule = match order_names {
        None => SplitRule::Threshold(0.5 * (keys[i].0 + keys[i + 1].0)),
        Some(cats) => {
            let cut = keys[i].0 as usize;
            SplitRule::Categories(cats[..=cut].iter().map(|c| c.1.clone()).collect())
        }
    };
    Some((rule, red))
}

/// Best split of the whole dataset on `variable`; `None` when the variable or
/// the response is constant.
pub fn best_split(data: &Dataset, variable: usize) -> Option<(SplitRule, f64)> {
    let rows: Vec<usize> = (0..data.len()).collect();
    split_on(data, &rows, variable, 1)
}

fn best_over_variables(data: &Dataset, rows: &[usize], min_leaf: usize) -> Option<SplitChoice> {
    let mut best: Option<SplitChoice> = None;
    for var in 0..data.columns.len() {
        if let Some((rule, reduction)) = split_on(data, rows, var, min_leaf) {
            if best
                .as_ref()
                .is_none_or(|b| reduction > b.reduction * (1.0 + 1e-12) + 1e-300)
            {
                best = Some(SplitChoice {
                    variable: var,
                    rule,
                    reduction,
                });
            }
        }
    }
    best
}

/// Root split over all variables (first variable on ties).
pub fn best_root_split(data: &Dataset, min_leaf: usize) -> Option<SplitChoice> {
    let rows: Vec<usize> = (0..data.len()).collect();
    best_over_variables(data, &rows, min_leaf)
}

fn partition(data: &Dataset, rows: &[usize], var: usize, rule: &SplitRule) -> (Vec<usize>, Vec<usize>) {
    rows.iter().partition(|&&i| match (&data.columns[var].values, rule) {
        (ColumnValues::Numeric(x), SplitRule::Threshold(t)) => x[i] <= *t,
        (ColumnValues::Categorical(c), SplitRule::Categories(set)) => set.contains(&c[i]),
        _ => unreachable!("rule kind follows column kind"),
    })
}

fn grow_node(data: &Dataset, rows: &[usize], params: &TreeParams, min_gain: f64, depth: usize) -> Node {
    let stats = NodeStats::of(rows.iter().map(|&i| data.y[i]));
    if rows.len() < params.min_split || depth >= params.max_depth || stats.deviance <= 0.0 {
        return Node::Leaf { stats };
    }
    let Some(choice) = best_over_variables(data, rows, params.min_leaf) else {
        return Node::Leaf { stats };
    };
    if choice.reduction < min_gain {
        return Node::Leaf { stats };
    }
    let (l, r) = partition(data, rows, choice.variable, &choice.rule);
    Node::Split {
        stats,
        variable: data.columns[choice.variable].name.clone(),
        unseen_left: l.len() >= r.len(),
        rule: choice.rule,
        left: Box::new(grow_node(data, &l, params, min_gain, depth + 1)),
        right: Box::new(grow_node(data, &r, params, min_gain, depth + 1)),
    }
}

fn check_params(params: &TreeParams) -> Result<(), CartError> {
    if params.min_leaf < 1 {
        return Err(CartError::Params("min_leaf must be at least 1".into()));
    }
    if !(params.cp >= 0.0) {
        return Err(CartError::Params("cp must be non-negative".into()));
    }
    Ok(())
}

/// Grow a tree by recursive best splits.
pub fn grow(data: &Dataset, params: &TreeParams) -> Result<RegressionTree, CartError> {
    check_params(params)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let root_dev = NodeStats::of(data.y.iter().copied()).deviance;
    let root = grow_node(data, &rows, params, params.cp * root_dev, 0);
    let known_categories = data
        .columns
        .iter()
        .filter_map(|c| match &c.values {
            ColumnValues::Categorical(v) => Some((c.name.clone(), v.iter().cloned().collect())),
            _ => None,
        })
        .collect();
    Ok(RegressionTree {
        variables: data.columns.iter().map(|c| c.name.clone()).collect(),
        root,
        cp: params.cp,
        cp_table: Vec::new(),
        known_categories,
    })
}

impl RegressionTree {
    pub fn predict(&self, case: &[Feature]) -> Result<f64, CartError> {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { stats } => return Ok(stats.mean),
                Node::Split {
                    rule,
                    unseen_left,
                    left,
                    right,
                    variable,
                    ..
                } => {
                    let f = self
                        .variables
                        .iter()
                        .position(|v| v == variable)
                        .and_then(|i| case.get(i))
                        .ok_or_else(|| CartError::Case(variable.clone()))?;
                    let go_left = match (rule, f) {
                        (SplitRule::Categories(set), Feature::Categorical(c)) => {
                            let known = self.known_categories.get(variable).is_some_and(|k| k.contains(c));
                            if known {
                                set.contains(c)
                            } else {
                                *unseen_left
                            }
                        }
                        (SplitRule::Threshold(t), Feature::Numeric(x)) => *x <= *t,
                        _ => return Err(CartError::Case(variable.clone())),
                    };
                    node = if go_left { left } else { right };
                }
            }
        }
    }

    /// Indented text rendering.
    pub fn render(&self) -> String {
        fn walk(node: &Node, label: &str, depth: usize, out: &mut String) {
            let s = node.stats();
            let _ = writeln!(
                out,
                "{}{} n={} mean={:.3} sd={:.3}",
                "  ".repeat(depth),
                label,
                s.n,
                s.mean,
                s.sd
            );
            if let Node::Split {
                variable, rule, left, right, ..
            } = node
            {
                let (l, r) = match rule {
                    SplitRule::Threshold(t) => (format!("{variable} <= {t:.4}"), format!("{variable} > {t:.4}")),
                    SplitRule::Categories(set) => {
                        let list = set.iter().cloned().collect::<Vec<_>>().join(",");
                        (format!("{variable} in {{{list}}}"), format!("{variable} not in {{{list}}}"))
                    }
                };
                walk(left, &l, depth + 1, out);
                walk(right, &r, depth + 1, out);
            }
        }
        let mut out = String::new();
        walk(&self.root, "root", 0, &mut out);
        out
    }
}

/// Weakest-link pruning sequence: `(alpha, subtree)` with increasing alpha,
/// starting from the smallest subtree with the full tree's risk and ending
/// at the root leaf.
pub fn cost_complexity_sequence(root: &Node) -> Vec<(f64, Node)> {
    fn prune_zero(node: &Node) -> Node {
        match node {
            Node::Leaf { .. } => node.clone(),
            Node::Split {
                stats,
                variable,
                rule,
                unseen_left,
                left,
                right,
            } => {
                let l = prune_zero(left);
                let r = prune_zero(right);
                if stats.deviance <= l.risk() + r.risk() {
                    Node::Leaf { stats: *stats }
                } else {
                    Node::Split {
                        stats: *stats,
                        variable: variable.clone(),
                        rule: rule.clone(),
                        unseen_left: *unseen_left,
                        left: Box::new(l),
                        right: Box::new(r),
                    }
                }
            }
        }
    }
    fn weakest(node: &Node) -> f64 {
        match node {
            Node::Leaf { .. } => f64::INFINITY,
            Node::Split { stats, left, right, .. } => {
                let g = (stats.deviance - node.risk()) / (node.leaves() - 1) as f64;
                g.min(weakest(left)).min(weakest(right))
            }
        }
    }
    fn collapse(node: &Node, alpha: f64) -> Node {
        match node {
            Node::Leaf { .. } => node.clone(),
            Node::Split {
                stats,
                variable,
                rule,
                unseen_left,
                left,
                right,
            } => {
                let g = (stats.deviance - node.risk()) / (node.leaves() - 1) as f64;
                if g <= alpha * (1.0 + 1e-10) {
                    Node::Leaf { stats: *stats }
                } else {
                    Node::Split {
                        stats: *stats,
                        variable: variable.clone(),
                        rule: rule.clone(),
                        unseen_left: *unseen_left,
                        left: Box::new(collapse(left, alpha)),
                        right: Box::new(collapse(right, alpha)),
                    }
                }
            }
        }
    }
    let mut seq = vec![(0.0, prune_zero(root))];
    loop {
        let current = &seq.last().expect("non-empty").1;
        if matches!(current, Node::Leaf { .. }) {
            break;
        }
        let alpha = weakest(current);
        let next = collapse(current, alpha);
        seq.push((alpha, next));
    }
    seq
}

fn with_root(tree: &RegressionTree, root: Node) -> RegressionTree {
    RegressionTree {
        root,
        ..tree.clone()
    }
}

/// Fixed fold assignment: a seeded shuffle dealt round-robin.
pub fn fold_assignment(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut folds = vec![0; n];
    for (pos, &i) in idx.iter().enumerate() {
        folds[i] = pos % k;
    }
    folds
}

/// Cost-complexity pruning with `k`-fold cross-validation and the
/// one-standard-error rule.
pub fn prune_cv(
    tree: &RegressionTree,
    data: &Dataset,
    params: &TreeParams,
    k: usize,
    seed: u64,
) -> Result<RegressionTree, CartError> {
    let n = data.len();
    if k < 2 || k > n {
        return Err(CartError::Folds { folds: k, n });
    }
    let seq = cost_complexity_sequence(&tree.root);
    let root_dev = tree.root.stats().deviance;
    if seq.len() == 1 || root_dev <= 0.0 {
        let mut t = with_root(tree, seq.into_iter().next().expect("non-empty").1);
        t.cp = 1.0;
        return Ok(t);
    }
    // geometric midpoints of consecutive alphas
    let betas: Vec<f64> = (0..seq.len())
        .map(|i| {
            if i + 1 < seq.len() {
                (seq[i].0 * seq[i + 1].0).sqrt()
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let folds = fold_assignment(n, k, seed);
    let per_fold: Vec<Result<Vec<(usize, Vec<f64>)>, CartError>> = (0..k)
        .into_par_iter()
        .map(|f| {
            let train: Vec<usize> = (0..n).filter(|&i| folds[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| folds[i] == f).collect();
            let sub = data.subset(&train);
            let fitted = grow(&sub, params)?;
            let fseq = cost_complexity_sequence(&fitted.root);
            let mut out = Vec::with_capacity(test.len());
            for &i in &test {
                let case = data.case(i);
                let mut errs = Vec::with_capacity(betas.len());
                for b in &betas {
                    let j = fseq.iter().rposition(|(a, _)| *a <= *b).unwrap_or(0);
                    let pred = with_root(&fitted, fseq[j].1.clone()).predict(&case)?;
                    errs.push((data.y[i] - pred).powi(2));
                }
                out.push((i, errs));
            }
            Ok(out)
        })
        .collect();
    let mut errors = vec![vec![0.0; betas.len()]; n];
    for fold in per_fold {
        for (i, e) in fold? {
            errors[i] = e;
        }
    }
    let mut table = Vec::with_capacity(seq.len());
    for (j, (alpha, sub)) in seq.iter().enumerate() {
        let col: Vec<f64> = errors.iter().map(|e| e[j]).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n as f64;
        table.push(CpRow {
            cp: alpha / root_dev,
            leaves: sub.leaves(),
            rel_error: sub.risk() / root_dev,
            cv_error: mean * n as f64 / root_dev,
            cv_se: (var / n as f64).sqrt() * n as f64 / root_dev,
        });
    }
    let best = table
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.cv_error.total_cmp(&b.1.cv_error))
        .map(|(i, _)| i)
        .expect("non-empty");
    let limit = table[best].cv_error + table[best].cv_se;
    let chosen = (0..table.len())
        .rev()
        .find(|&j| table[j].cv_error <= limit)
        .unwrap_or(best);
    let mut out = with_root(tree, seq[chosen].1.clone());
    out.cp = table[chosen].cp;
    out.cp_table = table;
    Ok(out)
}

/// Grow with `params`, then prune by `k`-fold cross-validation.
pub fn fit(data: &Dataset, params: &TreeParams, k: usize, seed: u64) -> Result<RegressionTree, CartError> {
    let grown = grow(data, params)?;
    prune_cv(&grown, data, params, k.min(data.len()), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn one_var(x: Vec<f64>, y: Vec<f64>) -> Dataset {
        Dataset::new(vec![Column::numeric("x", x)], y).unwrap()
    }

    /// Between-group sum of squares of an explicit partition.
    fn bss(y: &[f64], left: &[bool]) -> f64 {
        let ss = |v: Vec<f64>| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>()
        };
        let all = ss(y.to_vec());
        let l: Vec<f64> = y.iter().zip(left).filter(|(_, &b)| b).map(|(v, _)| *v).collect();
        let r: Vec<f64> = y.iter().zip(left).filter(|(_, &b)| !b).map(|(v, _)| *v).collect();
        all - ss(l) - ss(r)
    }

    #[test]
    fn four_point_example() {
        let data = one_var(vec![1.0, 2.0, 3.0, 4.0], vec![0.0, 0.0, 10.0, 10.0]);
        let (rule, red) = best_split(&data, 0).unwrap();
        assert_eq!(rule, SplitRule::Threshold(2.5));
        assert!((red - 100.0).abs() < 1e-12);
        // brute force over the three cuts
        let cuts = [1.5, 2.5, 3.5];
        let reds: Vec<f64> = cuts
            .iter()
            .map(|c| bss(&data.y, &[1.0, 2.0, 3.0, 4.0].map(|x| x <= *c)))
            .collect();
        assert_eq!(reds.iter().cloned().fold(f64::MIN, f64::max), 100.0);
    }

    #[test]
    fn constant_response_or_variable_gives_no_split() {
        assert!(best_split(&one_var(vec![1.0, 2.0, 3.0], vec![5.0; 3]), 0).is_none());
        assert!(best_split(&one_var(vec![2.0; 3], vec![1.0, 2.0, 3.0]), 0).is_none());
    }

    #[test]
    fn tie_goes_to_smaller_threshold() {
        // cuts at 1.5 and 2.5 both separate one outlier of equal weight
        let data = one_var(vec![1.0, 2.0, 3.0], vec![1.0, 0.0, 1.0]);
        let (rule, _) = best_split(&data, 0).unwrap();
        assert_eq!(rule, SplitRule::Threshold(1.5));
    }

    fn variety_data() -> Dataset {
        let varieties = ["Grenache", "Merlot", "Chardonnay", "Cabernet"];
        let mut v = vec![];
        let mut y = vec![];
        let mut g = vec![];
        for i in 0..32 {
            let name = varieties[i % 4];
            v.push(name.to_string());
            let base = if name == "Grenache" { 1.8 } else { 1.2 };
            y.push(base + 0.02 * ((i * 7) % 5) as f64);
            g.push(400.0 + (i * 37 % 300) as f64);
        }
        Dataset::new(vec![Column::numeric("nou_ver", g), Column::categorical("variety", v)], y).unwrap()
    }

    #[test]
    fn categorical_split_isolates_heavy_variety() {
        let data = variety_data();
        let (rule, _) = best_split(&data, 1).unwrap();
        match rule {
            SplitRule::Categories(left) => {
                // mean ordering puts the light varieties first
                assert_eq!(left.len(), 3);
                assert!(!left.contains("Grenache"));
            }
            other => panic!("{other:?}"),
        }
        let root = best_root_split(&data, 2).unwrap();
        assert_eq!(data.columns[root.variable].name, "variety");
    }

    #[test]
    fn separable_clusters_give_depth_one_tree() {
        let data = one_var(
            vec![1.0, 2.0, 3.0, 4.0, 10.0, 11.0, 12.0, 13.0],
            vec![5.0, 5.0, 5.0, 5.0, 9.0, 9.0, 9.0, 9.0],
        );
        let tree = grow(&data, &TreeParams::default()).unwrap();
        assert_eq!(tree.root.depth(), 1);
        let Node::Split { left, right, rule, .. } = &tree.root else { panic!() };
        assert_eq!(*rule, SplitRule::Threshold(7.0));
        assert_eq!((left.stats().mean, left.stats().sd), (5.0, 0.0));
        assert_eq!((right.stats().mean, right.stats().sd), (9.0, 0.0));
        for i in 0..8 {
            assert_eq!(tree.predict(&data.case(i)).unwrap(), data.y[i]);
        }
        // boundary value goes left
        assert_eq!(tree.predict(&[Feature::Numeric(7.0)]).unwrap(), 5.0);
        assert_eq!(tree.predict(&[Feature::Numeric(7.0001)]).unwrap(), 9.0);
    }

    #[test]
    fn single_case_is_a_leaf() {
        let tree = grow(&one_var(vec![3.0], vec![4.2]), &TreeParams::default()).unwrap();
        assert_eq!(tree.root, Node::Leaf { stats: NodeStats { n: 1, mean: 4.2, sd: 0.0, deviance: 0.0 } });
        assert_eq!(tree.predict(&[Feature::Numeric(-100.0)]).unwrap(), 4.2);
    }

    #[test]
    fn parameters_are_validated() {
        let data = one_var(vec![1.0, 2.0], vec![1.0, 2.0]);
        let bad = TreeParams { min_leaf: 0, ..Default::default() };
        assert!(matches!(grow(&data, &bad), Err(CartError::Params(_))));
        let tree = grow(&data, &TreeParams::default()).unwrap();
        assert_eq!(
            prune_cv(&tree, &data, &TreeParams::default(), 3, 1).unwrap_err(),
            CartError::Folds { folds: 3, n: 2 }
        );
    }

    #[test]
    fn unseen_category_follows_larger_child() {
        let data = variety_data();
        let tree = grow(&data, &TreeParams { min_split: 40, ..Default::default() }).unwrap();
        assert!(matches!(tree.root, Node::Leaf { .. }));
        let tree = grow(&data, &TreeParams::default()).unwrap();
        let Node::Split { unseen_left, left, right, .. } = &tree.root else { panic!() };
        let larger = if *unseen_left { left } else { right };
        assert!(larger.stats().n >= 16);
        let pred = tree
            .predict(&[Feature::Numeric(500.0), Feature::Categorical("Syrah".into())])
            .unwrap();
        let expected = tree.predict(&[Feature::Numeric(500.0), Feature::Categorical("Merlot".into())]).unwrap();
        assert_eq!(pred, expected);
        assert!(tree.predict(&[Feature::Numeric(1.0)]).is_err());
    }

    #[test]
    fn pure_noise_prunes_to_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let n = 60;
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..100.0)).collect();
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| noise.sample(&mut rng)).collect();
        let data = Dataset::new(vec![Column::numeric("x", x), Column::numeric("z", z)], y).unwrap();
        let pruned = fit(&data, &TreeParams::default(), 10, 3).unwrap();
        assert!(matches!(pruned.root, Node::Leaf { .. }), "{}", pruned.render());
    }

    #[test]
    fn strong_split_survives_pruning() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 0.3).unwrap();
        let x: Vec<f64> = (0..40).map(|_| rng.random_range(0.0..10.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| if *v < 5.0 { 1.0 } else { 4.0 } + noise.sample(&mut rng)).collect();
        let data = one_var(x, y);
        let pruned = fit(&data, &TreeParams::default(), 10, 3).unwrap();
        let Node::Split { rule: SplitRule::Threshold(t), .. } = &pruned.root else { panic!("{}", pruned.render()) };
        assert!((*t - 5.0).abs() < 0.6);
        assert!(!pruned.cp_table.is_empty());
    }

    #[test]
    fn leave_one_out_runs() {
        let data = one_var(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![1.0, 1.1, 0.9, 3.0, 3.1, 2.9]);
        let tree = grow(&data, &TreeParams::default()).unwrap();
        let pruned = prune_cv(&tree, &data, &TreeParams::default(), 6, 0).unwrap();
        assert!(pruned.root.leaves() <= tree.root.leaves());
    }

    #[test]
    fn json_and_text_exports() {
        let tree = grow(&variety_data(), &TreeParams::default()).unwrap();
        let json = serde_json::to_value(&tree).unwrap();
        assert_eq!(json["root"]["type"], "split");
        assert_eq!(json["root"]["variable"], "variety");
        assert!(json["root"]["left"]["mean"].is_number());
        let text = tree.render();
        assert!(text.starts_with("root n=32"));
        assert!(text.contains("variety in {"));
    }

    fn brute_root(data: &Dataset, min_leaf: usize) -> f64 {
        let n = data.len();
        let mut best = 0.0f64;
        for c in &data.columns {
            if let ColumnValues::Numeric(x) = &c.values {
                let mut vals = x.clone();
                vals.sort_by(f64::total_cmp);
                vals.dedup();
                for w in vals.windows(2) {
                    let cut = 0.5 * (w[0] + w[1]);
                    let left: Vec<bool> = x.iter().map(|v| *v <= cut).collect();
                    let nl = left.iter().filter(|b| **b).count();
                    if nl >= min_leaf && n - nl >= min_leaf {
                        best = best.max(bss(&data.y, &left));
                    }
                }
            }
        }
        best
    }

    fn check_deviance(node: &Node) -> bool {
        match node {
            Node::Leaf { .. } => true,
            Node::Split { stats, left, right, .. } => {
                stats.deviance + 1e-9 >= left.stats().deviance + right.stats().deviance
                    && check_deviance(left)
                    && check_deviance(right)
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn root_split_matches_brute_force(
            n in 4usize..200,
            p in 1usize..5,
            seed in 0u64..10_000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cols: Vec<Column> = (0..p)
                .map(|j| Column::numeric(format!("x{j}"), (0..n).map(|_| (rng.random_range(0..20) as f64) / 2.0).collect()))
                .collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let data = Dataset::new(cols, y).unwrap();
            let got = best_root_split(&data, 1).map_or(0.0, |c| c.reduction);
            let want = brute_root(&data, 1);
            prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
        }

        #[test]
        fn monotone_transform_keeps_partition(xs in proptest::collection::vec(-3.0f64..3.0, 8..60), ys in proptest::collection::vec(-1.0f64..1.0, 60)) {
            let n = xs.len();
            let y = ys[..n].to_vec();
            let a = one_var(xs.clone(), y.clone());
            let b = one_var(xs.iter().map(|x| x.powi(3) + x.exp()).collect(), y);
            let split_a = best_split(&a, 0);
            let split_b = best_split(&b, 0);
            prop_assert_eq!(split_a.is_some(), split_b.is_some());
            if let (Some((SplitRule::Threshold(ta), _)), Some((SplitRule::Threshold(tb), _))) = (split_a, split_b) {
                let ma: Vec<bool> = xs.iter().map(|x| *x <= ta).collect();
                let mb: Vec<bool> = match &b.columns[0].values { ColumnValues::Numeric(v) => v.iter().map(|x| *x <= tb).collect(), _ => unreachable!() };
                prop_assert_eq!(ma, mb);
            }
        }

        #[test]
        fn deviance_decreases_down_the_tree(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| (6.0 * v).sin() + rng.random_range(-0.2..0.2)).collect();
            let tree = grow(&one_var(x, y), &TreeParams { cp: 0.0, ..Default::default() }).unwrap();
            prop_assert!(check_deviance(&tree.root));
            let seq = cost_complexity_sequence(&tree.root);
            for w in seq.windows(2) {
                prop_assert!(w[0].0 <= w[1].0);
                prop_assert!(w[0].1.leaves() > w[1].1.leaves());
            }
        }
    }
}
