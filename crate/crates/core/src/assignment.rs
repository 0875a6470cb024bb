//! Dense linear assignment by the Jonker–Volgenant method: column reduction,
//! augmenting row reduction, then shortest augmenting paths.

use crate::error::{Error, Result};

const NONE: usize = usize::MAX;

fn validate(cost: &[f64], n: usize) -> Result<()> {
    if cost.len() != n * n {
        return Err(Error::DimensionMismatch {
            context: "assignment cost matrix",
            expected: n * n,
            got: cost.len(),
        });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::Validation("assignment costs must be finite".into()));
    }
    Ok(())
}

/// Minimum-cost perfect matching for a square `n × n` cost matrix stored row-major.
///
/// Returns `(assignment, total)` where `assignment[i]` is the column matched to row `i`.
#[allow(clippy::needless_range_loop, clippy::mut_range_bound)]
pub fn solve(cost: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    validate(cost, n)?;
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }
    let c = |i: usize, j: usize| cost[i * n + j];
    let mut rowsol = vec![NONE; n];
    let mut colsol = vec![NONE; n];
    let mut v = vec![0.0f64; n];

    // Column reduction.
    let mut matches = vec![0usize; n];
    for j in (0..n).rev() {
        let mut imin = 0;
        let mut min = c(0, j);
        for i in 1..n {
            if c(i, j) < min {
                min = c(i, j);
                imin = i;
            }
        }
        v[j] = min;
        matches[imin] += 1;
        if matches[imin] == 1 {
            rowsol[imin] = j;
            colsol[j] = imin;
        } else if v[j] < v[rowsol[imin]] {
            let j1 = rowsol[imin];
            rowsol[imin] = j;
            colsol[j] = imin;
            colsol[j1] = NONE;
        } else {
            colsol[j] = NONE;
        }
    }

    // Reduction transfer.
    let mut free = Vec::with_capacity(n);
    for i in 0..n {
        if matches[i] == 0 {
            free.push(i);
        } else if matches[i] == 1 {
            let j1 = rowsol[i];
            let mut min = f64::INFINITY;
            for j in (0..n).filter(|&j| j != j1) {
                min = min.min(c(i, j) - v[j]);
            }
            if min.is_finite() {
                v[j1] -= min;
            }
        }
    }
    // Rows left assigned to a column that was later taken over.
    for i in 0..n {
        if rowsol[i] != NONE && colsol[rowsol[i]] != i {
            rowsol[i] = NONE;
            if !free.contains(&i) {
                free.push(i);
            }
        }
    }

    // Augmenting row reduction, two passes.
    for _ in 0..2 {
        let pending = std::mem::take(&mut free);
        let mut queue: std::collections::VecDeque<usize> = pending.into();
        let mut budget = 8 * n;
        while let Some(i) = queue.pop_front() {
            let mut umin = c(i, 0) - v[0];
            let mut j1 = 0;
            let mut usubmin = f64::INFINITY;
            let mut j2 = NONE;
            for j in 1..n {
                let h = c(i, j) - v[j];
                if h < usubmin {
                    if h >= umin {
                        usubmin = h;
                        j2 = j;
                    } else {
                        usubmin = umin;
                        umin = h;
                        j2 = j1;
                        j1 = j;
                    }
                }
            }
            let mut i0 = colsol[j1];
            let strict = umin < usubmin;
            if strict {
                v[j1] -= usubmin - umin;
            } else if i0 != NONE && j2 != NONE {
                j1 = j2;
                i0 = colsol[j2];
            }
            if i0 != NONE {
                rowsol[i0] = NONE;
            }
            rowsol[i] = j1;
            colsol[j1] = i;
            if i0 != NONE {
                budget = budget.saturating_sub(1);
                if strict && budget > 0 {
                    queue.push_front(i0);
                } else {
                    free.push(i0);
                }
            }
        }
    }

    // Shortest augmenting paths for the remaining free rows.
    let mut d = vec![0.0f64; n];
    let mut pred = vec![0usize; n];
    let mut collist: Vec<usize> = (0..n).collect();
    for &freerow in &free {
        let row = &cost[freerow * n..(freerow + 1) * n];
        for j in 0..n {
            d[j] = row[j] - v[j];
            pred[j] = freerow;
            collist[j] = j;
        }
        let (mut low, mut up) = (0usize, 0usize);
        let mut last = 0usize;
        let mut min = 0.0f64;
        let endofpath;
        'search: loop {
            if up == low {
                last = low.wrapping_sub(1);
                min = d[collist[up]];
                up += 1;
                for k in up..n {
                    let j = collist[k];
                    let h = d[j];
                    if h <= min {
                        if h < min {
                            up = low;
                            min = h;
                        }
                        collist[k] = collist[up];
                        collist[up] = j;
                        up += 1;
                    }
                }
                for &j in &collist[low..up] {
                    if colsol[j] == NONE {
                        endofpath = j;
                        break 'search;
                    }
                }
            }
            let j1 = collist[low];
            low += 1;
            let i = colsol[j1];
            let row = &cost[i * n..(i + 1) * n];
            let h = row[j1] - v[j1] - min;
            for k in up..n {
                let j = collist[k];
                let v2 = row[j] - v[j] - h;
                if v2 < d[j] {
                    pred[j] = i;
                    if v2 == min {
                        if colsol[j] == NONE {
                            endofpath = j;
                            break 'search;
                        }
                        collist[k] = collist[up];
                        collist[up] = j;
                        up += 1;
                    }
                    d[j] = v2;
                }
            }
        }
        if last != usize::MAX {
            for &j1 in &collist[..=last] {
                v[j1] += d[j1] - min;
            }
        }
        let mut j = endofpath;
        loop {
            let i = pred[j];
            colsol[j] = i;
            let next = rowsol[i];
            rowsol[i] = j;
            if i == freerow {
                break;
            }
            j = next;
        }
    }

    let total = rowsol.iter().enumerate().map(|(i, &j)| c(i, j)).sum();
    Ok((rowsol, total))
}

#[cfg(test)]
pub(crate) fn solve_hungarian(cost: &[f64], n: usize) -> Result<(Vec<usize>, f64)> {
    validate(cost, n)?;
    if n == 0 {
        return Ok((Vec::new(), 0.0));
    }

    // 1-based rows and columns; column 0 is the virtual root of each search.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let ui0 = u[i0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - ui0 - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    Ok((assignment, total))
}
