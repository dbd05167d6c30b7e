//! Maximum-similarity pairing of batch samples.
//!
//! Pairs come from a linear sum assignment on the negated similarity matrix
//! with a large diagonal (no self-pairs). The assignment is a permutation, so
//! only its 2-cycles are pairs directly; indices left on longer cycles are
//! re-matched and the result is polished by pair exchanges. Small batches
//! skip the 2-cycles and are matched exactly.

mod lsa;

use serde::{Deserialize, Serialize};

pub use lsa::linear_sum_assignment;

use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;
use crate::scalar::Scalar;

/// Largest index set matched exactly (bitmask DP); larger sets are matched greedily.
pub const EXACT_REPAIR_LIMIT: usize = 16;
/// Hard cap for exhaustive enumeration.
pub const BRUTE_FORCE_MAX: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingResult<S> {
    /// Unordered pairs stored as `(low, high)`, sorted.
    pub pairs: Vec<(usize, usize)>,
    pub leftover: Option<usize>,
    pub total_similarity: S,
}

impl<S: Scalar> PairingResult<S> {
    fn from_pairs(h: &SquareMatrix<S>, mut pairs: Vec<(usize, usize)>, leftover: Option<usize>) -> Self {
        for p in pairs.iter_mut() {
            if p.0 > p.1 {
                *p = (p.1, p.0);
            }
        }
        pairs.sort_unstable();
        let total_similarity = pairs.iter().map(|&(i, j)| h[(i, j)]).sum();
        Self { pairs, leftover, total_similarity }
    }

    /// Whether the pairs and leftover partition `0..n` with no self-pairs.
    pub fn is_partition_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        let mut mark = |i: usize| i < n && !std::mem::replace(&mut seen[i], true);
        let ok = self.pairs.iter().all(|&(i, j)| i != j && mark(i) && mark(j)) && self.leftover.map_or(true, &mut mark);
        ok && seen.into_iter().all(|s| s)
    }
}

/// `-H` with the diagonal replaced by a finite penalty larger than
/// `n * max|H|`, which no optimal assignment can afford.
pub fn build_cost_matrix<S: Scalar>(h: &SquareMatrix<S>) -> SquareMatrix<S> {
    let n = h.n();
    let penalty = S::lit(n as f64) * h.max_abs() + S::one();
    SquareMatrix::from_fn(n, |i, j| if i == j { penalty } else { -h[(i, j)] })
}

fn validate<S: Scalar>(h: &SquareMatrix<S>) -> Result<()> {
    if h.n() < 2 {
        return Err(Error::InvalidArgument(format!("pairing needs at least two samples, got {}", h.n())));
    }
    if !h.is_finite() {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    Ok(())
}

/// Maximum-total-similarity pairing of the `n` samples behind `h`.
///
/// For odd `n` the leftover is the unmatched index whose best remaining
/// similarity is lowest (ties: lowest index). Ties between equally good
/// matchings resolve towards pairing each index with its smallest partner.
pub fn optimal_pairs<S: Scalar>(h: &SquareMatrix<S>) -> Result<PairingResult<S>> {
    validate(h)?;
    let n = h.n();
    let sigma = linear_sum_assignment(&build_cost_matrix(h))?;
    debug_assert!(sigma.iter().enumerate().all(|(i, &j)| i != j));

    let mut pairs = Vec::with_capacity(n / 2);
    let mut rest = Vec::new();
    for i in 0..n {
        let j = sigma[i];
        if sigma[j] == i {
            if i < j {
                pairs.push((i, j));
            }
        } else {
            rest.push(i);
        }
    }

    let mut leftover = None;
    if rest.len() % 2 == 1 {
        let pick = *rest
            .iter()
            .min_by(|&&a, &&b| {
                let best = |i: usize| rest.iter().filter(|&&j| j != i).map(|&j| h[(i, j)]).fold(S::neg_infinity(), S::max);
                best(a).partial_cmp(&best(b)).unwrap().then(a.cmp(&b))
            })
            .unwrap();
        rest.retain(|&i| i != pick);
        leftover = Some(pick);
    }
    if n - leftover.is_some() as usize <= EXACT_REPAIR_LIMIT {
        let all: Vec<usize> = (0..n).filter(|&i| Some(i) != leftover).collect();
        pairs = exact_matching(h, &all);
    } else if rest.len() <= EXACT_REPAIR_LIMIT {
        pairs.extend(exact_matching(h, &rest));
    } else {
        pairs.extend(greedy_matching(h, rest));
    }
    exchange_pairs(h, &mut pairs);
    Ok(PairingResult::from_pairs(h, pairs, leftover))
}

/// Maximum-weight perfect matching on an even index set by subset DP.
fn exact_matching<S: Scalar>(h: &SquareMatrix<S>, idx: &[usize]) -> Vec<(usize, usize)> {
    let m = idx.len();
    if m == 0 {
        return Vec::new();
    }
    let full = (1usize << m) - 1;
    let mut best = vec![S::neg_infinity(); 1 << m];
    let mut choice = vec![0usize; 1 << m];
    best[0] = S::zero();
    // masks processed in increasing order; a mask's value depends on smaller masks
    for mask in 1..=full {
        if mask.count_ones() % 2 == 1 {
            continue;
        }
        let a = mask.trailing_zeros() as usize;
        let without_a = mask & !(1 << a);
        let mut bits = without_a;
        while bits != 0 {
            let b = bits.trailing_zeros() as usize;
            bits &= bits - 1;
            let sub = without_a & !(1 << b);
            let v = best[sub] + h[(idx[a], idx[b])];
            if v > best[mask] {
                best[mask] = v;
                choice[mask] = b;
            }
        }
    }
    let mut out = Vec::with_capacity(m / 2);
    let mut mask = full;
    while mask != 0 {
        let a = mask.trailing_zeros() as usize;
        let b = choice[mask];
        out.push((idx[a], idx[b]));
        mask &= !(1 << a) & !(1 << b);
    }
    out
}

fn greedy_matching<S: Scalar>(h: &SquareMatrix<S>, mut rest: Vec<usize>) -> Vec<(usize, usize)> {
    rest.sort_unstable();
    let mut out = Vec::with_capacity(rest.len() / 2);
    while rest.len() >= 2 {
        let mut best = (0, 1);
        for a in 0..rest.len() {
            for b in a + 1..rest.len() {
                if h[(rest[a], rest[b])] > h[(rest[best.0], rest[best.1])] {
                    best = (a, b);
                }
            }
        }
        out.push((rest[best.0], rest[best.1]));
        rest.remove(best.1);
        rest.remove(best.0);
    }
    out
}

/// Replaces pairs `{a,b},{c,d}` by `{a,c},{b,d}` or `{a,d},{b,c}` while that
/// strictly raises the total, or keeps it equal and gives the smallest of the
/// four indices a smaller partner.
fn exchange_pairs<S: Scalar>(h: &SquareMatrix<S>, pairs: &mut [(usize, usize)]) {
    let norm = |(i, j): (usize, usize)| if i < j { (i, j) } else { (j, i) };
    for _sweep in 0..1000 {
        let mut changed = false;
        for p in 0..pairs.len() {
            for q in p + 1..pairs.len() {
                let (mut x, mut y) = (norm(pairs[p]), norm(pairs[q]));
                if y.0 < x.0 {
                    std::mem::swap(&mut x, &mut y);
                }
                let (a, b, c, d) = (x.0, x.1, y.0, y.1);
                let current = h[(a, b)] + h[(c, d)];
                let mut best = (current, b, [(a, b), (c, d)]);
                for (partner, cand) in [(c, [(a, c), (b, d)]), (d, [(a, d), (b, c)])] {
                    let total = h[cand[0]] + h[cand[1]];
                    if total > best.0 || (total == best.0 && partner < best.1) {
                        best = (total, partner, cand);
                    }
                }
                if best.1 != b {
                    pairs[p] = norm(best.2[0]);
                    pairs[q] = norm(best.2[1]);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceMatching<S> {
    pub best: PairingResult<S>,
    /// Number of perfect matchings enumerated, `(n - 1)!!`.
    pub enumerated: usize,
}

/// Exhaustive maximum-similarity perfect matching (test oracle).
pub fn brute_force_matching<S: Scalar>(h: &SquareMatrix<S>, max_n: usize) -> Result<BruteForceMatching<S>> {
    validate(h)?;
    let n = h.n();
    if n % 2 == 1 {
        return Err(Error::InvalidArgument(format!("brute-force matching needs even n, got {n}")));
    }
    if n > max_n.min(BRUTE_FORCE_MAX) {
        return Err(Error::InvalidArgument(format!("n = {n} exceeds brute-force limit {}", max_n.min(BRUTE_FORCE_MAX))));
    }

    struct Search<'a, S> {
        h: &'a SquareMatrix<S>,
        used: Vec<bool>,
        current: Vec<(usize, usize)>,
        best: Option<(S, Vec<(usize, usize)>)>,
        count: usize,
    }
    impl<S: Scalar> Search<'_, S> {
        fn run(&mut self, acc: S) {
            let Some(i) = self.used.iter().position(|u| !u) else {
                self.count += 1;
                if self.best.as_ref().map_or(true, |(b, _)| acc > *b) {
                    self.best = Some((acc, self.current.clone()));
                }
                return;
            };
            self.used[i] = true;
            for j in i + 1..self.used.len() {
                if self.used[j] {
                    continue;
                }
                self.used[j] = true;
                self.current.push((i, j));
                self.run(acc + self.h[(i, j)]);
                self.current.pop();
                self.used[j] = false;
            }
            self.used[i] = false;
        }
    }

    let mut s = Search { h, used: vec![false; n], current: Vec::new(), best: None, count: 0 };
    s.run(S::zero());
    let (_, pairs) = s.best.expect("n >= 2 has a matching");
    Ok(BruteForceMatching { best: PairingResult::from_pairs(h, pairs, None), enumerated: s.count })
}
