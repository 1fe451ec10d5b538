//! Spatiotemporal smoothness penalty over a `[K, M, N]` prediction.
//!
//! Spatial pairs: every unordered pair of cells in the same frame whose
//! Chebyshev distance is between 1 and the spatial radius. Temporal pairs:
//! the same cell in frames 1..=temporal radius apart. Each pair family is
//! one shifted-difference over the whole tensor, so the cost is a handful of
//! tape ops regardless of grid size.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Offsets `(di, dj)` covering each unordered spatial pair once.
fn spatial_offsets(radius: usize) -> Vec<(usize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for di in 0..=radius {
        for dj in -r..=r {
            if di == 0 && dj <= 0 {
                continue;
            }
            out.push((di, dj));
        }
    }
    out
}

/// Row/column windows `(a_start, b_start, len)` for a shift along one axis.
fn span(extent: usize, shift: isize) -> Option<(usize, usize, usize)> {
    let s = shift.unsigned_abs();
    if s >= extent {
        return None;
    }
    let len = extent - s;
    Some(if shift >= 0 { (0, s, len) } else { (s, 0, len) })
}

fn check(shape: &[usize], active: Option<&[usize]>, spatial: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::dim("spatiotemporal_loss", shape, &[0, 0, 0]));
    }
    let (k, m, n) = (shape[0], shape[1], shape[2]);
    if spatial > 0 && spatial >= m.max(n) {
        return Err(Error::Config(format!(
            "spatial neighbour radius {spatial} exceeds the {m}x{n} grid"
        )));
    }
    if let Some(a) = active {
        if a != [m, n] {
            return Err(Error::dim("spatiotemporal_loss mask", a, &[m, n]));
        }
    }
    Ok((k, m, n))
}

/// Sum of squared neighbour differences. `active` (`[M, N]`, 0/1) limits
/// the pairs to cells that are both active; `None` uses every cell.
pub fn spatiotemporal_loss<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    spatial: usize,
    temporal: usize,
    active: Option<&Tensor<T>>,
) -> Result<Var> {
    let (k, m, n) = check(tape.shape(pred), active.map(|a| a.shape()), spatial)?;
    let weight = |ra: (usize, usize), rb: (usize, usize), h: usize, w: usize, frames: usize| {
        active.map(|a| {
            let plane: Vec<T> = (0..h * w)
                .map(|p| {
                    let (i, j) = (p / w, p % w);
                    a.get(&[ra.0 + i, ra.1 + j]) * a.get(&[rb.0 + i, rb.1 + j])
                })
                .collect();
            let data = (0..frames).flat_map(|_| plane.iter().copied()).collect();
            Tensor::from_parts(vec![frames, h, w], data)
        })
    };
    let mut terms = Vec::new();
    for (di, dj) in spatial_offsets(spatial) {
        let (Some((ar, br, h)), Some((ac, bc, w))) = (span(m, di as isize), span(n, dj)) else {
            continue;
        };
        let a = tape.crop(pred, &[0, ar, ac], &[k, h, w])?;
        let b = tape.crop(pred, &[0, br, bc], &[k, h, w])?;
        let mut d = tape.sub(a, b)?;
        if let Some(wt) = weight((ar, ac), (br, bc), h, w, k) {
            d = tape.mul_const(d, wt)?;
        }
        terms.push(tape.sum_squares(d));
    }
    for dt in 1..=temporal.min(k.saturating_sub(1)) {
        let a = tape.crop(pred, &[0, 0, 0], &[k - dt, m, n])?;
        let b = tape.crop(pred, &[dt, 0, 0], &[k - dt, m, n])?;
        let mut d = tape.sub(a, b)?;
        if let Some(wt) = weight((0, 0), (0, 0), m, n, k - dt) {
            d = tape.mul_const(d, wt)?;
        }
        terms.push(tape.sum_squares(d));
    }
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    tape.add_all(&terms)
}

/// Number of pairs [`spatiotemporal_loss`] sums over.
pub fn st_pair_count(
    shape: [usize; 3],
    spatial: usize,
    temporal: usize,
    active: Option<&Tensor<f64>>,
) -> Result<usize> {
    let (k, m, n) = check(&shape, active.map(|a| a.shape()), spatial)?;
    let on = |i: usize, j: usize| active.is_none_or(|a| a.get(&[i, j]) > 0.5);
    let mut count = 0;
    for (di, dj) in spatial_offsets(spatial) {
        let (Some((ar, br, h)), Some((ac, bc, w))) = (span(m, di as isize), span(n, dj)) else {
            continue;
        };
        for i in 0..h {
            for j in 0..w {
                if on(ar + i, ac + j) && on(br + i, bc + j) {
                    count += k;
                }
            }
        }
    }
    let cells = (0..m * n).filter(|&c| on(c / n, c % n)).count();
    for dt in 1..=temporal.min(k.saturating_sub(1)) {
        count += (k - dt) * cells;
    }
    Ok(count)
}
