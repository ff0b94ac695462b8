//! Rotary position embeddings: pairwise rotations of query/key head vectors.
//!
//! Adjacent components `(2i, 2i+1)` form a plane rotated by
//! `pos * base^(-2i/d)`. Rotations are isometries, and the post-rotation dot
//! product of a query at position m with a key at position n depends only on
//! `n - m`.

use crate::error::{Error, Result};

/// Rotate one head vector in place. `head.len()` must be even.
pub fn rotate(head: &mut [f64], pos: usize, base: f64) {
    rotate_signed(head, pos as f64, base)
}

/// Inverse rotation (transpose of the forward Jacobian), used by backward
/// passes.
pub fn rotate_inverse(head: &mut [f64], pos: usize, base: f64) {
    rotate_signed(head, -(pos as f64), base)
}

fn rotate_signed(head: &mut [f64], pos: f64, base: f64) {
    let d = head.len();
    debug_assert!(d % 2 == 0, "head dimension must be even");
    for i in 0..d / 2 {
        let theta = pos * base.powf(-((2 * i) as f64) / d as f64);
        let (sin, cos) = theta.sin_cos();
        let a = head[2 * i];
        let b = head[2 * i + 1];
        head[2 * i] = a * cos - b * sin;
        head[2 * i + 1] = a * sin + b * cos;
    }
}

/// Rotate every row of a `[rows x head_dim]` buffer by its position.
/// `positions.len()` must equal the row count and `head_dim` must be even.
pub fn rotate_rows(data: &mut [f64], head_dim: usize, positions: &[usize], base: f64) -> Result<()> {
    if head_dim == 0 || head_dim % 2 != 0 {
        return Err(Error::Config(format!(
            "RoPE needs an even head dimension, got {head_dim}"
        )));
    }
    if data.len() != head_dim * positions.len() {
        return Err(Error::Dimension(format!(
            "buffer of {} elements does not hold {} rows of {head_dim}",
            data.len(),
            positions.len()
        )));
    }
    for (row, &pos) in data.chunks_exact_mut(head_dim).zip(positions) {
        rotate(row, pos, base);
    }
    Ok(())
}

pub const DEFAULT_BASE: f64 = 10_000.0;
