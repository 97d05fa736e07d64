//! Surface distances on integer pixel grids.
//!
//! Distances are exact: the fast path is a two-pass squared Euclidean
//! distance transform (column scan, then a lower-envelope-of-parabolas
//! row scan) whose envelope boundaries are compared as exact rationals
//! with integer cross-multiplication. Squared distances therefore come
//! out as the true integer minima, identical to the O(|X|*|Y|) brute
//! force; square roots happen only at the very end.

use crate::error::{Error, Result};
use crate::metrics::{extract_surface, BinaryMask, SurfaceSet};

/// Squared-distance grid: for every pixel, the exact integer squared
/// Euclidean distance to the nearest point of `points`.
pub fn squared_edt(points: &[(i64, i64)], width: usize, height: usize) -> Result<Vec<u64>> {
    if points.is_empty() {
        return Err(Error::Undefined(
            "distance transform of an empty point set".into(),
        ));
    }
    let big = (width + height + 2) as i64;
    let mut col = vec![big; width * height];
    let mut col_has = vec![false; width];
    for &(x, y) in points {
        if x < 0 || y < 0 || x as usize >= width || y as usize >= height {
            return Err(Error::InvalidInput(format!(
                "surface point ({}, {}) outside {}x{} grid",
                x, y, width, height
            )));
        }
        col[y as usize * width + x as usize] = 0;
        col_has[x as usize] = true;
    }

    // per-column vertical distances |dy| to the nearest point in the column
    for x in 0..width {
        if !col_has[x] {
            continue;
        }
        let mut cur = big;
        for y in 0..height {
            let idx = y * width + x;
            cur = if col[idx] == 0 { 0 } else { (cur + 1).min(big) };
            col[idx] = cur;
        }
        let mut cur = big;
        for y in (0..height).rev() {
            let idx = y * width + x;
            cur = if col[idx] == 0 { 0 } else { (cur + 1).min(big) };
            col[idx] = col[idx].min(cur);
        }
    }

    // per-row lower envelope of parabolas x -> (x - v)^2 + f(v)
    let mut out = vec![0u64; width * height];
    let mut cand_v: Vec<i64> = Vec::with_capacity(width);
    let mut cand_f: Vec<i64> = Vec::with_capacity(width);
    let mut cell: Vec<usize> = vec![0; width];
    let mut zn: Vec<i64> = vec![0; width + 1];
    let mut zd: Vec<i64> = vec![1; width + 1];
    for y in 0..height {
        cand_v.clear();
        cand_f.clear();
        for x in 0..width {
            let d = col[y * width + x];
            if d < big {
                cand_v.push(x as i64);
                cand_f.push(d * d);
            }
        }
        debug_assert!(!cand_v.is_empty());

        let mut k = 0usize;
        cell[0] = 0;
        for q in 1..cand_v.len() {
            loop {
                let p = cell[k];
                // parabola intersection as an exact rational num/den, den > 0
                let num = cand_f[q] + cand_v[q] * cand_v[q] - cand_f[p] - cand_v[p] * cand_v[p];
                let den = 2 * (cand_v[q] - cand_v[p]);
                if k > 0 && num * zd[k] <= zn[k] * den {
                    k -= 1;
                } else {
                    k += 1;
                    cell[k] = q;
                    zn[k] = num;
                    zd[k] = den;
                    break;
                }
            }
        }

        let mut j = 0usize;
        for x in 0..width {
            while j < k && zn[j + 1] < (x as i64) * zd[j + 1] {
                j += 1;
            }
            let p = cell[j];
            let dx = x as i64 - cand_v[p];
            out[y * width + x] = (dx * dx + cand_f[p]) as u64;
        }
    }
    Ok(out)
}

/// One-sided squared distances: for each point of `from`, the exact
/// integer squared distance to the nearest point of `to` (input order).
pub fn directed_sq_distances(from: &SurfaceSet, to: &SurfaceSet) -> Result<Vec<u64>> {
    if from.width != to.width || from.height != to.height {
        return Err(Error::ShapeMismatch {
            op: "directed_distances",
            lhs: vec![from.width, from.height],
            rhs: vec![to.width, to.height],
        });
    }
    if to.is_empty() {
        return Err(Error::Undefined(
            "directed distance to an empty surface".into(),
        ));
    }
    let grid = squared_edt(&to.points, to.width, to.height)?;
    Ok(from
        .points
        .iter()
        .map(|&(x, y)| grid[y as usize * from.width + x as usize])
        .collect())
}

/// One-sided Euclidean distance multiset `d(X -> Y)`.
pub fn directed_distances(from: &SurfaceSet, to: &SurfaceSet) -> Result<Vec<f64>> {
    Ok(directed_sq_distances(from, to)?
        .into_iter()
        .map(|d| (d as f64).sqrt())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Hd95Mode {
    /// 95th percentile of the pooled bidirectional multiset (default).
    Pooled,
    /// Max of the two per-direction 95th percentiles.
    PerDirectionMax,
}

/// Nearest-rank percentile on exact squared distances:
/// index `ceil(pct_num * m / 100)`, 1-based, over the sorted multiset.
fn percentile_sq(sorted: &[u64], pct_num: usize) -> u64 {
    debug_assert!(!sorted.is_empty());
    let m = sorted.len();
    let rank = (pct_num * m).div_ceil(100).max(1);
    sorted[rank - 1]
}

/// 95th-percentile bidirectional surface distance. `None` when either
/// mask has no surface (empty mask); callers must record the sentinel.
pub fn hd95(gt: &BinaryMask, agc: &BinaryMask, mode: Hd95Mode) -> Result<Option<f64>> {
    if !gt.same_dims(agc) {
        return Err(Error::ShapeMismatch {
            op: "hd95",
            lhs: vec![gt.width(), gt.height()],
            rhs: vec![agc.width(), agc.height()],
        });
    }
    let sg = extract_surface(gt);
    let sa = extract_surface(agc);
    if sg.is_empty() || sa.is_empty() {
        return Ok(None);
    }
    let fwd = directed_sq_distances(&sg, &sa)?;
    let bwd = directed_sq_distances(&sa, &sg)?;
    let sq = match mode {
        Hd95Mode::Pooled => {
            let mut pool = fwd;
            pool.extend(bwd);
            pool.sort_unstable();
            percentile_sq(&pool, 95)
        }
        Hd95Mode::PerDirectionMax => {
            let mut f = fwd;
            let mut b = bwd;
            f.sort_unstable();
            b.sort_unstable();
            percentile_sq(&f, 95).max(percentile_sq(&b, 95))
        }
    };
    Ok(Some((sq as f64).sqrt()))
}

/// Average bidirectional surface distance, normalized by the total
/// surface point count. `None` when either surface is empty.
pub fn asd(gt: &BinaryMask, agc: &BinaryMask) -> Result<Option<f64>> {
    if !gt.same_dims(agc) {
        return Err(Error::ShapeMismatch {
            op: "asd",
            lhs: vec![gt.width(), gt.height()],
            rhs: vec![agc.width(), agc.height()],
        });
    }
    let sg = extract_surface(gt);
    let sa = extract_surface(agc);
    if sg.is_empty() || sa.is_empty() {
        return Ok(None);
    }
    let fwd = directed_sq_distances(&sg, &sa)?;
    let bwd = directed_sq_distances(&sa, &sg)?;
    // per-direction sums first, so swapping arguments commutes bitwise
    let sum_fwd: f64 = fwd.iter().map(|&d| (d as f64).sqrt()).sum();
    let sum_bwd: f64 = bwd.iter().map(|&d| (d as f64).sqrt()).sum();
    Ok(Some((sum_fwd + sum_bwd) / (sg.len() + sa.len()) as f64))
}
