#![allow(dead_code)]

use crowdscope::flow::FlowField;
use crowdscope::forest::{DecisionTree, Node};
use crowdscope::frame::Frame;
use crowdscope::geometry::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bilinear sample with edge clamping.
pub fn bilinear(frame: &Frame, x: f64, y: f64) -> f64 {
    let (w, h) = (frame.width() as f64, frame.height() as f64);
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let (x0, y0) = (x.floor(), y.floor());
    let (x1, y1) = ((x0 + 1.0).min(w - 1.0), (y0 + 1.0).min(h - 1.0));
    let (tx, ty) = (x - x0, y - y0);
    let g = |xx: f64, yy: f64| frame.get(xx as usize, yy as usize);
    let top = g(x0, y0) * (1.0 - tx) + g(x1, y0) * tx;
    let bottom = g(x0, y1) * (1.0 - tx) + g(x1, y1) * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Mean absolute difference between `next` and `prev` warped backwards by `flow`,
/// over pixels at least `margin` from the border.
pub fn warp_residual(prev: &Frame, next: &Frame, flow: &FlowField, margin: usize) -> f64 {
    let (w, h) = (prev.width(), prev.height());
    let mut total = 0.0;
    let mut n = 0usize;
    for y in margin..h - margin {
        for x in margin..w - margin {
            let (u, v) = flow.at(x, y);
            let warped = bilinear(prev, x as f64 - u, y as f64 - v);
            total += (warped - next.get(x, y)).abs();
            n += 1;
        }
    }
    total / n as f64
}

/// Mean endpoint error against a constant true flow over the interior.
pub fn mean_endpoint_error(flow: &FlowField, truth: (f64, f64), margin: usize) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for y in margin..flow.height - margin {
        for x in margin..flow.width - margin {
            let (u, v) = flow.at(x, y);
            total += ((u - truth.0).powi(2) + (v - truth.1).powi(2)).sqrt();
            n += 1;
        }
    }
    total / n as f64
}

/// Eq-style arithmetic written out independently: `(accuracy, precision, recall, f1)`
/// with 0/0 taken as 0.
pub fn metrics_oracle(tp: u64, tn: u64, fp: u64, fn_: u64) -> (f64, f64, f64, f64) {
    let div = |a: f64, b: f64| if b == 0.0 { 0.0 } else { a / b };
    let (tp, tn, fp, fn_) = (tp as f64, tn as f64, fp as f64, fn_ as f64);
    let accuracy = (tp + tn) / (tp + tn + fp + fn_);
    let precision = div(tp, tp + fp);
    let recall = div(tp, tp + fn_);
    let f1 = div(2.0 * precision * recall, precision + recall);
    (accuracy, precision, recall, f1)
}

/// Probability that a random positive outscores a random negative, ties counting half,
/// by direct enumeration of all pairs.
pub fn mann_whitney(scores: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scores.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scores.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut wins = 0.0;
    for p in &pos {
        for n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    wins / (pos.len() * neg.len()) as f64
}

/// IOU by counting cells of a `1/res` grid; exact when box edges lie on the grid.
pub fn raster_iou(a: &BBox, b: &BBox, res: f64) -> f64 {
    let cells = |bx: &BBox| {
        let x0 = (bx.x * res).round() as i64;
        let y0 = (bx.y * res).round() as i64;
        let x1 = ((bx.x + bx.w) * res).round() as i64;
        let y1 = ((bx.y + bx.h) * res).round() as i64;
        (x0, y0, x1, y1)
    };
    let (ax0, ay0, ax1, ay1) = cells(a);
    let (bx0, by0, bx1, by1) = cells(b);
    let mut set = std::collections::HashSet::new();
    let mut inter = 0u64;
    for y in ay0..ay1 {
        for x in ax0..ax1 {
            set.insert((x, y));
        }
    }
    let mut union = set.len() as u64;
    for y in by0..by1 {
        for x in bx0..bx1 {
            if set.contains(&(x, y)) {
                inter += 1;
            } else {
                union += 1;
            }
        }
    }
    inter as f64 / union as f64
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut Vec<bool>, out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                prefix.push(i);
                rec(prefix, used, out);
                prefix.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; n], &mut out);
    out
}

/// Minimum total cost over all square assignments.
pub fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    permutations(cost.len())
        .iter()
        .map(|p| p.iter().enumerate().map(|(r, &c)| cost[r][c]).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
}

/// Two well separated classes in `d` dimensions: class 0 around 0, class 1 around 4.
pub fn separable_set(n: usize, d: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let base = 4.0 * label as f64;
        x.push((0..d).map(|_| base + rng.random_range(-1.0..1.0)).collect());
        y.push(label);
    }
    (x, y)
}

fn gini_oracle(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let sq: usize = counts.iter().map(|c| c * c).sum();
    (n * n - sq) as f64 / (n * n) as f64
}

fn class_counts(rows: &[usize], y: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &r in rows {
        c[y[r]] += 1;
    }
    c
}

/// Best weighted child impurity over every feature and every cut between distinct values,
/// with the left-row sets that achieve it. `None` when all features are constant.
pub fn exhaustive_best_split(
    x: &[Vec<f64>],
    y: &[usize],
    rows: &[usize],
    k: usize,
) -> Option<(f64, Vec<Vec<usize>>)> {
    let mut best: Option<(f64, Vec<Vec<usize>>)> = None;
    for f in 0..x[0].len() {
        let mut values: Vec<f64> = rows.iter().map(|&r| x[r][f]).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for cut in &values[..values.len().saturating_sub(1)] {
            let left: Vec<usize> = rows.iter().copied().filter(|&r| x[r][f] <= *cut).collect();
            let right: Vec<usize> = rows.iter().copied().filter(|&r| x[r][f] > *cut).collect();
            let n = rows.len() as f64;
            let score = left.len() as f64 / n * gini_oracle(&class_counts(&left, y, k))
                + right.len() as f64 / n * gini_oracle(&class_counts(&right, y, k));
            match &mut best {
                Some((b, sets)) if (score - *b).abs() < 1e-12 => sets.push(left),
                Some((b, _)) if score > *b => {}
                _ => best = Some((score, vec![left])),
            }
        }
    }
    best
}

/// Walks a single unbootstrapped all-features tree and checks every node against the
/// exhaustive oracle. Returns a description of the first disagreement.
pub fn check_tree_against_oracle(
    tree: &DecisionTree,
    x: &[Vec<f64>],
    y: &[usize],
    k: usize,
) -> Result<(), String> {
    fn walk(
        tree: &DecisionTree,
        node: usize,
        rows: Vec<usize>,
        x: &[Vec<f64>],
        y: &[usize],
        k: usize,
    ) -> Result<(), String> {
        let counts = class_counts(&rows, y, k);
        let pure = counts.iter().filter(|c| **c > 0).count() <= 1;
        let oracle = if pure {
            None
        } else {
            exhaustive_best_split(x, y, &rows, k)
        };
        match (&tree.nodes[node], oracle) {
            (Node::Leaf { counts: leaf, .. }, None) => {
                let expected: Vec<f64> = counts.iter().map(|c| *c as f64).collect();
                if *leaf != expected {
                    return Err(format!("leaf {node}: counts {leaf:?} != {expected:?}"));
                }
                Ok(())
            }
            (Node::Leaf { .. }, Some((score, _))) => Err(format!(
                "node {node} is a leaf but a split of impurity {score} exists"
            )),
            (Node::Split { .. }, None) => Err(format!("node {node} split where none exists")),
            (
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    split_impurity,
                    ..
                },
                Some((score, sets)),
            ) => {
                if (split_impurity - score).abs() > 1e-12 {
                    return Err(format!(
                        "node {node}: impurity {split_impurity} != oracle {score}"
                    ));
                }
                let l: Vec<usize> = rows
                    .iter()
                    .copied()
                    .filter(|&r| x[r][*feature] <= *threshold)
                    .collect();
                let r: Vec<usize> = rows
                    .iter()
                    .copied()
                    .filter(|&r| x[r][*feature] > *threshold)
                    .collect();
                if !sets.contains(&l) {
                    return Err(format!("node {node}: partition {l:?} is not optimal"));
                }
                walk(tree, *left, l, x, y, k)?;
                walk(tree, *right, r, x, y, k)
            }
        }
    }
    walk(tree, 0, (0..x.len()).collect(), x, y, k)
}

/// Deterministic micro-datasets of 2..=8 rows over a small value alphabet, so ties and
/// constant features are common.
pub fn micro_datasets(count: usize, seed: u64) -> Vec<(Vec<Vec<f64>>, Vec<usize>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=3);
        let k = rng.random_range(2..=3);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(0..4) as f64 * 0.5).collect())
            .collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        if y.iter().all(|l| *l == y[0]) {
            continue;
        }
        out.push((x, y, k));
    }
    out
}

/// Posterior `[p, v]` along one axis of a constant-velocity filter with no process noise,
/// solved in batch: the first measurement starts the track, the velocity prior is
/// `N(0, v_var)`, and the estimate is expressed at the last measurement's time.
pub fn batch_cv_estimate(z: &[f64], r: f64, v_var: f64) -> (f64, f64) {
    // normal equations for s = [p0, v] with z_k = p0 + k v
    let (mut a, mut b, mut c) = (0.0, 0.0, 1.0 / v_var);
    let (mut g0, mut g1) = (0.0, 0.0);
    for (k, zk) in z.iter().enumerate() {
        let k = k as f64;
        a += 1.0 / r;
        b += k / r;
        c += k * k / r;
        g0 += zk / r;
        g1 += k * zk / r;
    }
    let det = a * c - b * b;
    let p0 = (c * g0 - b * g1) / det;
    let v = (a * g1 - b * g0) / det;
    (p0 + (z.len() - 1) as f64 * v, v)
}
