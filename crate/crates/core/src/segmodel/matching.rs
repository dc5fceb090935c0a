//! Minimum-cost bipartite assignment (Hungarian method with potentials).

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Assigns every target (column of `cost`, `[queries, targets]`) to a distinct
/// query so the summed cost is minimal. Returns `(query, target)` pairs sorted
/// by target. Requires `targets <= queries`.
pub fn hungarian(cost: &Tensor) -> Vec<(usize, usize)> {
    let (nq, nt) = (cost.rows(), cost.cols());
    assert!(nt <= nq, "more targets ({nt}) than queries ({nq})");
    if nt == 0 {
        return Vec::new();
    }
    // rows = targets (1-based), columns = queries (1-based)
    let (n, m) = (nt, nq);
    let a = |i: usize, j: usize| cost.get2(j - 1, i - 1);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
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
            for j in 0..=m {
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
    let mut out: Vec<(usize, usize)> = (1..=m).filter(|&j| p[j] != 0).map(|j| (j - 1, p[j] - 1)).collect();
    out.sort_by_key(|&(_, t)| t);
    out
}

pub fn assignment_cost(cost: &Tensor, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(q, t)| cost.get2(q, t)).sum()
}
