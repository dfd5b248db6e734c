//! Symmetric Hausdorff distance between mask boundaries.

use ndarray::Array2;

use crate::data::BinaryMask;
use crate::error::{Error, Result};

/// Foreground pixels with at least one 4-neighbour outside the foreground.
/// Pixels outside the image count as background.
pub fn boundary(mask: &BinaryMask) -> Vec<(usize, usize)> {
    let (h, w) = mask.shape();
    let px = &mask.pixels;
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if px[[y, x]] == 0 {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y + 1 == h
                || x + 1 == w
                || px[[y - 1, x]] == 0
                || px[[y + 1, x]] == 0
                || px[[y, x - 1]] == 0
                || px[[y, x + 1]] == 0;
            if edge {
                out.push((y, x));
            }
        }
    }
    out
}

/// 1-D squared distance transform of a sampled function (lower envelope of
/// parabolas).
fn edt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    // first finite sample starts the envelope
    let Some(first) = f.iter().position(|v| v.is_finite()) else {
        out.fill(f64::INFINITY);
        return;
    };
    v[0] = first;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in first + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            // z[0] is -inf, so this always stops at k = 0
            if s <= z[k] {
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest point of `points`.
pub fn squared_distance_field(shape: (usize, usize), points: &[(usize, usize)]) -> Array2<f64> {
    let (h, w) = shape;
    let mut grid = Array2::from_elem((h, w), f64::INFINITY);
    for &(y, x) in points {
        grid[[y, x]] = 0.0;
    }
    let mut col_in = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = grid[[y, x]];
        }
        edt_1d(&col_in, &mut col_out);
        for y in 0..h {
            grid[[y, x]] = col_out[y];
        }
    }
    let mut row_in = vec![0.0; w];
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        for x in 0..w {
            row_in[x] = grid[[y, x]];
        }
        edt_1d(&row_in, &mut row_out);
        for x in 0..w {
            grid[[y, x]] = row_out[x];
        }
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HausdorffResult {
    pub distance: f64,
    /// Set when exactly one mask is empty and `distance` is the image diagonal.
    pub empty_mask: bool,
}

/// Length of the image diagonal, the value reported when one mask is empty.
pub fn image_diagonal((h, w): (usize, usize)) -> f64 {
    ((h * h + w * w) as f64).sqrt()
}

/// `max(h(A, B), h(B, A))` over 4-connected boundaries.
///
/// Both masks empty gives 0; exactly one empty gives the image diagonal with
/// `empty_mask` set.
pub fn hausdorff(pred: &BinaryMask, truth: &BinaryMask) -> Result<HausdorffResult> {
    if pred.shape() != truth.shape() {
        return Err(Error::Dimension(format!(
            "prediction {:?} vs truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let a = boundary(pred);
    let b = boundary(truth);
    match (a.is_empty(), b.is_empty()) {
        (true, true) => {
            return Ok(HausdorffResult {
                distance: 0.0,
                empty_mask: false,
            })
        }
        (true, false) | (false, true) => {
            return Ok(HausdorffResult {
                distance: image_diagonal(pred.shape()),
                empty_mask: true,
            })
        }
        _ => {}
    }
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> f64 {
        let field = squared_distance_field(pred.shape(), to);
        from.iter().map(|&(y, x)| field[[y, x]]).fold(0.0, f64::max)
    };
    let d2 = directed(&a, &b).max(directed(&b, &a));
    Ok(HausdorffResult {
        distance: d2.sqrt(),
        empty_mask: false,
    })
}
