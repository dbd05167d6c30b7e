//! Dense linear sum assignment by shortest augmenting paths with dual
//! potentials (the Jonker-Volgenant family, without the initialisation
//! heuristics).

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::scalar::Scalar;

/// Returns `sigma` minimising `sum_i cost[i][sigma[i]]`.
pub fn linear_sum_assignment<S: Scalar>(cost: &SquareMatrix<S>) -> Result<Vec<usize>> {
    let n = cost.n();
    if !cost.is_finite() {
        return Err(Error::NonFinite("cost matrix".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based columns; column 0 is the virtual source of each augmentation.
    let inf = S::infinity();
    let mut u = vec![S::zero(); n + 1];
    let mut v = vec![S::zero(); n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut min_slack = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < min_slack[j] {
                    min_slack[j] = cur;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut sigma = vec![0usize; n];
    for j in 1..=n {
        sigma[row_of[j] - 1] = j - 1;
    }
    Ok(sigma)
}
