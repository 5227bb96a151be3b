//! Strictly increasing frame multi-indices stored as bitmasks.
//!
//! Frame directions are numbered factor by factor (factor-1 directions
//! first). A degree-`p` multi-index is a `p`-subset of `0..n`; the
//! canonical storage order enumerates subsets lexicographically by their
//! sorted index tuple. All sign conventions in the crate derive from this
//! order.

use std::sync::{Arc, Mutex, OnceLock};

/// Maximum total dimension supported by the bitmask encoding.
pub const MAX_DIM: usize = 16;

/// Canonical basis of `Λ^p` for an `n`-dimensional coframe.
#[derive(Debug)]
pub struct FormBasis {
    pub n: usize,
    pub p: usize,
    masks: Vec<u32>,
    rank: Vec<u32>,
}

impl FormBasis {
    fn build(n: usize, p: usize) -> Self {
        assert!(n <= MAX_DIM, "total dimension {n} exceeds {MAX_DIM}");
        let mut masks = Vec::new();
        let mut current: Vec<usize> = (0..p).collect();
        if p <= n {
            loop {
                masks.push(current.iter().fold(0u32, |m, &i| m | (1 << i)));
                // advance to the next lexicographic combination
                let mut i = p;
                let mut advanced = false;
                while i > 0 {
                    i -= 1;
                    if current[i] < n - p + i {
                        current[i] += 1;
                        for j in i + 1..p {
                            current[j] = current[j - 1] + 1;
                        }
                        advanced = true;
                        break;
                    }
                }
                if !advanced {
                    break;
                }
            }
        }
        let mut rank = vec![u32::MAX; 1 << n];
        for (r, &m) in masks.iter().enumerate() {
            rank[m as usize] = r as u32;
        }
        FormBasis { n, p, masks, rank }
    }

    /// Shared cached basis for `(n, p)`.
    pub fn get(n: usize, p: usize) -> Arc<FormBasis> {
        static CACHE: OnceLock<Mutex<Vec<Option<Arc<FormBasis>>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(vec![None; (MAX_DIM + 1) * (MAX_DIM + 1)]));
        let mut guard = cache.lock().expect("basis cache poisoned");
        let slot = &mut guard[n * (MAX_DIM + 1) + p.min(MAX_DIM)];
        slot.get_or_insert_with(|| Arc::new(FormBasis::build(n, p))).clone()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[u32] {
        &self.masks
    }

    pub fn mask(&self, r: usize) -> u32 {
        self.masks[r]
    }

    /// Storage position of a multi-index, if it has degree `p`.
    pub fn rank(&self, mask: u32) -> Option<usize> {
        match self.rank.get(mask as usize) {
            Some(&r) if r != u32::MAX => Some(r as usize),
            _ => None,
        }
    }
}

pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc = 1usize;
    for i in 0..k {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Indices of a mask in increasing order.
pub fn indices(mask: u32) -> Vec<usize> {
    (0..32).filter(|i| mask & (1 << i) != 0).collect()
}

pub fn degree(mask: u32) -> usize {
    mask.count_ones() as usize
}

/// Sign `s` with `e^a ∧ e^J = s · e^{a∪J}` for `a ∉ J`.
#[inline]
pub fn insertion_sign(a: usize, mask: u32) -> f64 {
    let below = mask & ((1u32 << a) - 1);
    if below.count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// `e^I ∧ e^J = s · e^{I∪J}`; zero when the index sets overlap.
pub fn wedge_sign(i: u32, j: u32) -> f64 {
    if i & j != 0 {
        return 0.0;
    }
    // count pairs (a ∈ I, b ∈ J) with a > b
    let mut inversions = 0u32;
    let mut rest = j;
    while rest != 0 {
        let b = rest.trailing_zeros();
        rest &= rest - 1;
        inversions += (i >> (b + 1)).count_ones();
    }
    if inversions % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Sign of the permutation sorting a sequence of distinct indices,
/// or zero if an index repeats.
pub fn sort_sign(seq: &[usize]) -> (f64, u32) {
    let mut mask = 0u32;
    let mut inversions = 0usize;
    for (k, &a) in seq.iter().enumerate() {
        if mask & (1 << a) != 0 {
            return (0.0, 0);
        }
        mask |= 1 << a;
        inversions += seq[..k].iter().filter(|&&b| b > a).count();
    }
    (if inversions % 2 == 0 { 1.0 } else { -1.0 }, mask)
}

/// Mask of the first `count` directions starting at `offset`.
pub fn range_mask(offset: usize, count: usize) -> u32 {
    (((1u64 << count) - 1) << offset) as u32
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumerates_lexicographically() {
        let b = FormBasis::get(4, 2);
        let tuples: Vec<Vec<usize>> = b.masks().iter().map(|&m| indices(m)).collect();
        assert_eq!(
            tuples,
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        for (r, &m) in b.masks().iter().enumerate() {
            assert_eq!(b.rank(m), Some(r));
        }
        assert_eq!(b.rank(0b111), None);
    }

    #[test]
    fn sizes_match_binomials() {
        for n in 0..7 {
            for p in 0..=n {
                assert_eq!(FormBasis::get(n, p).len(), binomial(n, p));
            }
        }
    }

    #[test]
    fn wedge_sign_matches_sorting() {
        for i in 0u32..32 {
            for j in 0u32..32 {
                let mut seq = indices(i);
                seq.extend(indices(j));
                let (s, _) = sort_sign(&seq);
                assert_eq!(wedge_sign(i, j), s, "i={i:b} j={j:b}");
            }
        }
    }

    #[test]
    fn insertion_sign_is_single_wedge() {
        for a in 0..5 {
            for m in 0u32..32 {
                if m & (1 << a) == 0 {
                    assert_eq!(insertion_sign(a, m), wedge_sign(1 << a, m));
                }
            }
        }
    }
}
