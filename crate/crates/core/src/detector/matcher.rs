use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(query, target)`, sorted by query.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost assignment of `rows` queries to `cols` targets over a
/// row-major cost matrix, via shortest augmenting paths with potentials in
/// `O(n^2 m)`. `min(rows, cols)` pairs are returned. Among equally cheap
/// augmenting steps the lowest column index wins, so results are
/// deterministic.
pub fn hungarian_match(cost: &[f64], rows: usize, cols: usize) -> Result<MatchResult> {
    if cost.len() != rows * cols {
        return Err(Error::shape("hungarian_match", format!("{} costs for a {rows}x{cols} matrix", cost.len())));
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite { op: "hungarian_match", index: i });
    }
    if rows == 0 || cols == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    // The solver needs at most as many rows as columns.
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transposed { cost[j * cols + i] } else { cost[i * cols + j] };

    // 1-based arrays; column 0 is the virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| {
            let (r, c) = (owner[j] - 1, j - 1);
            if transposed {
                (c, r)
            } else {
                (r, c)
            }
        })
        .collect();
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(q, t)| cost[q * cols + t]).sum();
    Ok(MatchResult { pairs, total_cost })
}

/// Exhaustive minimum over all injections; for testing small instances.
pub fn brute_force_match(cost: &[f64], rows: usize, cols: usize) -> MatchResult {
    fn rec(
        cost: &[f64],
        cols: usize,
        r: usize,
        rows: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        need: usize,
        best: &mut Option<(f64, Vec<(usize, usize)>)>,
    ) {
        if cur.len() == need {
            let c: f64 = cur.iter().map(|&(q, t)| cost[q * cols + t]).sum();
            if best.as_ref().is_none_or(|b| c < b.0) {
                *best = Some((c, cur.clone()));
            }
            return;
        }
        if r == rows || rows - r < need - cur.len() {
            return;
        }
        for t in 0..cols {
            if !used[t] {
                used[t] = true;
                cur.push((r, t));
                rec(cost, cols, r + 1, rows, used, cur, need, best);
                cur.pop();
                used[t] = false;
            }
        }
        rec(cost, cols, r + 1, rows, used, cur, need, best);
    }
    let need = rows.min(cols);
    let mut best = None;
    rec(cost, cols, 0, rows, &mut vec![false; cols], &mut Vec::new(), need, &mut best);
    let (total_cost, pairs) = best.unwrap_or((0.0, Vec::new()));
    MatchResult { pairs, total_cost }
}
