//! Base-b decomposition of token indices into k-dimensional coordinates.
//!
//! Every token id in `[0, b^k)` maps deterministically to a digit tuple
//! `(i_1, ..., i_k)`, most significant digit first. The digits index the k
//! latent codebooks, so total indexing storage grows as `k * b` rows instead
//! of one row per vocabulary entry.

use crate::error::{Error, Result};

/// Fixed (k, b) coordinate system covering ids `[0, b^k)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordinateMap {
    pub k: u32,
    pub b: u64,
}

impl CoordinateMap {
    pub fn new(k: u32, b: u64) -> Result<Self> {
        if k == 0 || b == 0 {
            return Err(Error::Config(format!("coordinate map needs k >= 1, b >= 1 (got k={k}, b={b})")));
        }
        Ok(CoordinateMap { k, b })
    }

    /// Number of ids covered, `b^k`. Saturates at u64::MAX for absurd configs.
    pub fn capacity(&self) -> u64 {
        pow_saturating(self.b, self.k)
    }
}

fn pow_saturating(b: u64, k: u32) -> u64 {
    let mut acc: u128 = 1;
    for _ in 0..k {
        acc = acc.saturating_mul(b as u128);
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Smallest b with `b^k >= v_raw`. Integer search; never touches floating
/// point, so perfect powers land exactly on their root.
pub fn base_for_vocab(v_raw: u64, k: u32) -> Result<u64> {
    if v_raw == 0 || k == 0 {
        return Err(Error::Config(format!(
            "base_for_vocab needs v_raw >= 1 and k >= 1 (got v_raw={v_raw}, k={k})"
        )));
    }
    let mut lo: u64 = 1;
    let mut hi: u64 = 1;
    while pow_saturating(hi, k) < v_raw {
        lo = hi;
        hi = hi.saturating_mul(2);
    }
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if pow_saturating(mid, k) >= v_raw {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(lo)
}

/// Digits of `i` in base b, most significant first.
pub fn decompose(i: u64, map: CoordinateMap) -> Result<Vec<u64>> {
    if i >= map.capacity() {
        return Err(Error::Index(format!(
            "token id {i} outside [0, {}^{}) coordinate range",
            map.b, map.k
        )));
    }
    let mut digits = vec![0u64; map.k as usize];
    let mut rem = i;
    for r in (0..map.k as usize).rev() {
        digits[r] = rem % map.b;
        rem /= map.b;
    }
    Ok(digits)
}

/// Inverse of [`decompose`].
pub fn recompose(digits: &[u64], map: CoordinateMap) -> Result<u64> {
    if digits.len() != map.k as usize {
        return Err(Error::Index(format!(
            "expected {} digits, got {}",
            map.k,
            digits.len()
        )));
    }
    let mut acc: u64 = 0;
    for &d in digits {
        if d >= map.b {
            return Err(Error::Index(format!("digit {d} out of range for base {}", map.b)));
        }
        acc = acc * map.b + d;
    }
    Ok(acc)
}

/// Total codebook rows across the k codebooks: `k * base_for_vocab(v_raw, k)`.
pub fn indexing_rows(v_raw: u64, k: u32) -> Result<u64> {
    Ok(k as u64 * base_for_vocab(v_raw, k)?)
}
