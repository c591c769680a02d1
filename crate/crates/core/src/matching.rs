//! Set matching between predictions and padded ground truth.
//!
//! Predictions are rows, ground-truth boxes are columns. The ground truth is
//! padded with constant-cost "no object" columns until the matrix is square,
//! then the minimum-cost permutation is found with a shortest augmenting
//! path Hungarian solver (O(n³)). Among equal-cost optima the
//! lexicographically smallest permutation is returned.

use std::collections::VecDeque;

use crate::geometry::{ciou, ciou_raw, BBox};

/// Cost of assigning any prediction to a padding column.
pub const PADDING_COST: f64 = 0.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MatchingError {
    #[error("infeasible matching: {gts} ground-truth boxes but only {preds} predictions")]
    Infeasible { preds: usize, gts: usize },
    #[error("cost matrix needs at least one row")]
    Empty,
    #[error("invalid cost matrix: entry ({row}, {col}) is not finite")]
    InvalidCost { row: usize, col: usize },
    #[error("cost matrix has {len} entries, expected {n}x{n}")]
    Shape { len: usize, n: usize },
}

/// Square cost matrix; columns `n_real_gt..n` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    n_real_gt: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    /// A plain square matrix with no padding columns.
    pub fn from_square(n: usize, values: Vec<f64>) -> Result<Self, MatchingError> {
        if n == 0 {
            return Err(MatchingError::Empty);
        }
        if values.len() != n * n {
            return Err(MatchingError::Shape { len: values.len(), n });
        }
        Ok(Self { n, n_real_gt: n, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MatchingError> {
        let n = rows.len();
        let values: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::from_square(n, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_pred(&self) -> usize {
        self.n
    }

    pub fn n_real_gt(&self) -> usize {
        self.n_real_gt
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.n + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.n..(row + 1) * self.n]
    }
}

/// `1 - CIoU` for real columns, [`PADDING_COST`] for the padding.
pub fn build_cost_matrix(preds: &[BBox], gts: &[BBox]) -> Result<CostMatrix, MatchingError> {
    let preds: Vec<[f64; 4]> = preds.iter().map(BBox::cxcywh).collect();
    let gts: Vec<[f64; 4]> = gts.iter().map(BBox::cxcywh).collect();
    build_cost_matrix_raw(&preds, &gts)
}

/// Same as [`build_cost_matrix`] for raw `(cx, cy, w, h)` arrays, which may
/// extend past the unit square.
pub fn build_cost_matrix_raw(preds: &[[f64; 4]], gts: &[[f64; 4]]) -> Result<CostMatrix, MatchingError> {
    let (n, m) = (preds.len(), gts.len());
    if n == 0 {
        return Err(MatchingError::Empty);
    }
    if m > n {
        return Err(MatchingError::Infeasible { preds: n, gts: m });
    }
    let mut values = vec![PADDING_COST; n * n];
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            values[i * n + j] = 1.0 - ciou_raw(p, g, None).0.ciou;
        }
    }
    Ok(CostMatrix { n, n_real_gt: m, values })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `perm[i]` is the column assigned to prediction `i`.
    pub perm: Vec<usize>,
    pub total_cost: f64,
    /// `(prediction, gt)` for every real column, ordered by gt index.
    pub matched_pairs: Vec<(usize, usize)>,
}

impl Assignment {
    fn from_perm(cost: &CostMatrix, perm: Vec<usize>) -> Self {
        let total_cost = perm.iter().enumerate().map(|(i, &j)| cost.get(i, j)).sum();
        let mut matched_pairs: Vec<(usize, usize)> = perm
            .iter()
            .enumerate()
            .filter(|(_, &j)| j < cost.n_real_gt)
            .map(|(i, &j)| (i, j))
            .collect();
        matched_pairs.sort_by_key(|&(_, j)| j);
        Self { perm, total_cost, matched_pairs }
    }

    /// Per-prediction flag: true when matched to a real ground-truth column.
    pub fn positives(&self) -> Vec<bool> {
        let mut flags = vec![false; self.perm.len()];
        for &(i, _) in &self.matched_pairs {
            flags[i] = true;
        }
        flags
    }
}

/// Minimum-cost permutation, lexicographically smallest among ties.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment, MatchingError> {
    let n = cost.n;
    if let Some(pos) = cost.values.iter().position(|v| !v.is_finite()) {
        return Err(MatchingError::InvalidCost { row: pos / n, col: pos % n });
    }
    let solution = solve(cost);
    let perm = lexicographic_refine(cost, &solution);
    Ok(Assignment::from_perm(cost, perm))
}

struct Solution {
    col_of_row: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

const FREE: usize = usize::MAX;

/// Shortest augmenting path solver with row/column potentials.
///
/// Potentials start from a column reduction (`v[j]` = column minimum) and
/// every column whose minimum lies in a still-free row is matched up front.
/// Each remaining row is then inserted along a Dijkstra-style shortest
/// augmenting path over reduced costs, with potentials updated once per path.
fn solve(cost: &CostMatrix) -> Solution {
    let n = cost.n;
    let mut u = vec![0.0; n];
    let mut v = vec![f64::INFINITY; n];
    let mut argmin = vec![0usize; n];
    for i in 0..n {
        for (j, &c) in cost.row(i).iter().enumerate() {
            if c < v[j] {
                v[j] = c;
                argmin[j] = i;
            }
        }
    }
    let mut col_of_row = vec![FREE; n];
    let mut row_of_col = vec![FREE; n];
    for j in 0..n {
        let i = argmin[j];
        if col_of_row[i] == FREE {
            col_of_row[i] = j;
            row_of_col[j] = i;
        }
    }

    let mut path = vec![FREE; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut remaining = vec![0usize; n];
    let mut visited_rows = vec![false; n];
    let mut visited_cols = vec![false; n];
    let mut touched_rows: Vec<usize> = Vec::new();
    let mut touched_cols: Vec<usize> = Vec::new();

    for start in 0..n {
        if col_of_row[start] != FREE {
            continue;
        }
        // Remaining columns, filled in reverse so constant costs give the identity.
        for (k, slot) in remaining.iter_mut().enumerate() {
            *slot = n - k - 1;
        }
        let mut n_remaining = n;
        dist.fill(f64::INFINITY);
        for &r in &touched_rows {
            visited_rows[r] = false;
        }
        for &c in &touched_cols {
            visited_cols[c] = false;
        }
        touched_rows.clear();
        touched_cols.clear();

        let mut min_val = 0.0;
        let mut row = start;
        let sink = loop {
            visited_rows[row] = true;
            touched_rows.push(row);
            let costs = cost.row(row);
            let base = min_val - u[row];
            let mut lowest = f64::INFINITY;
            let mut index = FREE;
            for (k, &j) in remaining[..n_remaining].iter().enumerate() {
                let r = base + costs[j] - v[j];
                if r < dist[j] {
                    path[j] = row;
                    dist[j] = r;
                }
                let d = dist[j];
                if d < lowest || (d == lowest && row_of_col[j] == FREE) {
                    lowest = d;
                    index = k;
                }
            }
            min_val = lowest;
            let j = remaining[index];
            visited_cols[j] = true;
            touched_cols.push(j);
            n_remaining -= 1;
            remaining[index] = remaining[n_remaining];
            if row_of_col[j] == FREE {
                break j;
            }
            row = row_of_col[j];
        };

        u[start] += min_val;
        for &r in &touched_rows {
            if r != start {
                u[r] += min_val - dist[col_of_row[r]];
            }
        }
        for &c in &touched_cols {
            v[c] -= min_val - dist[c];
        }

        let mut j = sink;
        loop {
            let i = path[j];
            row_of_col[j] = i;
            let prev = col_of_row[i];
            col_of_row[i] = j;
            if i == start {
                break;
            }
            j = prev;
        }
    }
    Solution { col_of_row, u, v }
}

/// Rewrites an optimal permutation into the lexicographically smallest
/// optimal one by walking alternating cycles in the equality graph.
///
/// Padding columns are interchangeable, so they are collapsed into one
/// column class with capacity `n - n_real_gt`; all other classes are single
/// columns. Classes are ordered by column index, which keeps lexicographic
/// order on classes equal to lexicographic order on columns.
fn lexicographic_refine(cost: &CostMatrix, sol: &Solution) -> Vec<usize> {
    let n = cost.n;
    let m = cost.n_real_gt;
    let n_classes = if m < n { m + 1 } else { n };
    let class_of_col = |j: usize| j.min(m);
    let scale = cost.values.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let tol = 1e-9 * scale;

    // adj[r]: classes tight for row r, ascending. radj[c]: rows tight to class c.
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut radj: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for r in 0..n {
        let row = cost.row(r);
        for j in 0..m.min(n) {
            if row[j] - sol.u[r] - sol.v[j] <= tol {
                adj[r].push(j);
                radj[j].push(r);
            }
        }
        if m < n {
            let tight = (m..n).any(|j| row[j] - sol.u[r] - sol.v[j] <= tol);
            if tight {
                adj[r].push(m);
                radj[m].push(r);
            }
        }
    }

    let mut class_of_row: Vec<usize> = sol.col_of_row.iter().map(|&j| class_of_col(j)).collect();
    // A row's own class is always tight.
    for r in 0..n {
        let c = class_of_row[r];
        if let Err(pos) = adj[r].binary_search(&c) {
            adj[r].insert(pos, c);
            radj[c].push(r);
        }
    }

    const NONE: usize = usize::MAX;
    let mut fixed = vec![false; n];
    // next_of_class[c] = row the path continues to; next_of_row[r] = class.
    let mut next_of_class = vec![NONE; n_classes];
    let mut next_of_row = vec![NONE; n];
    let mut seen_class = vec![false; n_classes];
    let mut seen_row = vec![false; n];
    let mut queue = VecDeque::new();

    for i in 0..n {
        let home = class_of_row[i];
        let wants_better = adj[i].first().is_some_and(|&c| c < home);
        if wants_better {
            seen_class.fill(false);
            seen_row.fill(false);
            queue.clear();
            seen_class[home] = true;
            queue.push_back(home);
            while let Some(c) = queue.pop_front() {
                for &r in &radj[c] {
                    if fixed[r] || r == i || seen_row[r] {
                        continue;
                    }
                    seen_row[r] = true;
                    next_of_row[r] = c;
                    let rc = class_of_row[r];
                    if !seen_class[rc] {
                        seen_class[rc] = true;
                        next_of_class[rc] = r;
                        queue.push_back(rc);
                    }
                }
            }
            let target = adj[i].iter().copied().find(|&c| c < home && seen_class[c]);
            if let Some(target) = target {
                // Rotate along target -> r1 -> c1 -> ... -> home.
                let mut c = target;
                while c != home {
                    let r = next_of_class[c];
                    let to = next_of_row[r];
                    class_of_row[r] = to;
                    c = to;
                }
                class_of_row[i] = target;
            }
        }
        fixed[i] = true;
    }

    let mut next_pad = m;
    class_of_row
        .iter()
        .map(|&c| {
            if c < m {
                c
            } else {
                next_pad += 1;
                next_pad - 1
            }
        })
        .collect()
}

/// Optimal assignment and the mean `1 - CIoU` over matched real pairs.
/// With no ground truth the loss is 0 and nothing is matched.
pub fn match_and_box_loss(preds: &[BBox], gts: &[BBox]) -> Result<(Assignment, f64), MatchingError> {
    let cost = build_cost_matrix(preds, gts)?;
    let assignment = hungarian(&cost)?;
    if gts.is_empty() {
        return Ok((assignment, 0.0));
    }
    let sum: f64 = assignment
        .matched_pairs
        .iter()
        .map(|&(i, j)| 1.0 - ciou(&preds[i], &gts[j]).ciou)
        .sum();
    let l_box = sum / gts.len() as f64;
    Ok((assignment, l_box))
}
