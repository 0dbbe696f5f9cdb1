//! Minimum-cost perfect matching on dense square cost matrices.

use crate::error::{Error, Result};

/// Optimal assignment by the O(n^3) Hungarian method with row/column potentials.
/// `cost` is row-major `n x n`; returns the column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::shape(format!("cost matrix needs {} entries, got {}", n * n, cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut out = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// Outcome of [`auction`].
#[derive(Debug, Clone, PartialEq)]
pub struct AuctionResult {
    pub assignment: Vec<usize>,
    pub cost: f64,
    /// Dual lower bound on the optimal cost.
    pub lower_bound: f64,
}

impl AuctionResult {
    /// `(cost - lower_bound) / cost`, zero for a zero-cost matching.
    pub fn relative_gap(&self) -> f64 {
        if self.cost > 0.0 {
            (self.cost - self.lower_bound).max(0.0) / self.cost
        } else {
            0.0
        }
    }
}

/// Epsilon-scaling forward auction. Stops once the duality gap certifies a
/// relative suboptimality of at most `rel_gap`, or at machine-level epsilon.
pub fn auction(cost: &[f64], n: usize, rel_gap: f64) -> Result<AuctionResult> {
    if cost.len() != n * n {
        return Err(Error::shape(format!("cost matrix needs {} entries, got {}", n * n, cost.len())));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost".into()));
    }
    if n == 0 {
        return Ok(AuctionResult {
            assignment: vec![],
            cost: 0.0,
            lower_bound: 0.0,
        });
    }
    let max_c = cost.iter().fold(0.0f64, |m, &c| m.max(c.abs()));
    let floor = (max_c.max(1e-300) * 1e-12) / n as f64;
    let mut eps = (max_c / 4.0).max(floor);
    let mut price = vec![0.0f64; n];
    loop {
        let mut owner = vec![usize::MAX; n];
        let mut assigned = vec![usize::MAX; n];
        let mut queue: Vec<usize> = (0..n).rev().collect();
        while let Some(i) = queue.pop() {
            let row = &cost[i * n..(i + 1) * n];
            let (mut b1, mut v1, mut v2) = (0, f64::NEG_INFINITY, f64::NEG_INFINITY);
            for j in 0..n {
                let val = -row[j] - price[j];
                if val > v1 {
                    v2 = v1;
                    v1 = val;
                    b1 = j;
                } else if val > v2 {
                    v2 = val;
                }
            }
            let incr = if v2.is_finite() { v1 - v2 } else { 0.0 };
            price[b1] += incr + eps;
            let prev = owner[b1];
            if prev != usize::MAX {
                assigned[prev] = usize::MAX;
                queue.push(prev);
            }
            owner[b1] = i;
            assigned[i] = b1;
        }
        let total: f64 = (0..n).map(|i| cost[i * n + assigned[i]]).sum();
        // max benefit <= sum_j p_j + sum_i max_j (-c_ij - p_j)
        let upper: f64 = price.iter().sum::<f64>()
            + (0..n)
                .map(|i| {
                    (0..n)
                        .map(|j| -cost[i * n + j] - price[j])
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum::<f64>();
        let res = AuctionResult {
            assignment: assigned,
            cost: total,
            lower_bound: -upper,
        };
        if res.relative_gap() <= rel_gap || eps <= floor {
            return Ok(res);
        }
        eps = (eps / 5.0).max(floor);
    }
}
