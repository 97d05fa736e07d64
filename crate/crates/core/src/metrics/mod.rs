//! Segmentation evaluation: DSC over binary masks, HD95/ASD over surface
//! point sets (exact integer squared distances end to end), Wilcoxon
//! signed-rank comparison of paired per-sample metrics, and mean/std
//! aggregation. Every distance-bearing path has an O(n^2) brute-force
//! oracle in the tests that it must match bit-for-bit on squared
//! distances.

pub mod distance;
pub mod wilcoxon;

pub use distance::{asd, directed_distances, directed_sq_distances, hd95, Hd95Mode};
pub use wilcoxon::{wilcoxon_signed_rank, wilcoxon_with_method, WilcoxonMethod, WilcoxonResult};

use crate::error::{Error, Result};

// ── Binary masks ────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::BadShape {
                op: "BinaryMask::new",
                expected: format!("{} pixels", width * height),
                got: vec![bits.len()],
            });
        }
        if let Some(&bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::InvalidInput(format!(
                "mask values must be 0/1, found {}",
                bad
            )));
        }
        Ok(BinaryMask {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(u8::from(f(x, y)));
            }
        }
        BinaryMask {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn same_dims(&self, other: &BinaryMask) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Dice similarity coefficient. Both-empty masks agree perfectly (1.0).
pub fn dsc(gt: &BinaryMask, agc: &BinaryMask) -> Result<f64> {
    if !gt.same_dims(agc) {
        return Err(Error::ShapeMismatch {
            op: "dsc",
            lhs: vec![gt.width, gt.height],
            rhs: vec![agc.width, agc.height],
        });
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (a, b) in gt.bits.iter().zip(&agc.bits) {
        inter += usize::from(*a == 1 && *b == 1);
        total += usize::from(*a == 1) + usize::from(*b == 1);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

// ── Surface extraction ──────────────────────────────────────────────

/// Boundary pixels of a mask (4-connectivity; the image border counts as
/// background). Points come out in raster order without duplicates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurfaceSet {
    pub points: Vec<(i64, i64)>,
    pub width: usize,
    pub height: usize,
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn extract_surface(mask: &BinaryMask) -> SurfaceSet {
    let (w, h) = (mask.width, mask.height);
    let mut points = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let interior = x > 0
                && mask.get(x - 1, y)
                && x + 1 < w
                && mask.get(x + 1, y)
                && y > 0
                && mask.get(x, y - 1)
                && y + 1 < h
                && mask.get(x, y + 1);
            if !interior {
                points.push((x as i64, y as i64));
            }
        }
    }
    SurfaceSet {
        points,
        width: w,
        height: h,
    }
}

/// Sentinel for HD95/ASD on an empty surface: the largest possible
/// pixel-to-pixel distance in the image.
pub fn undefined_sentinel(width: usize, height: usize) -> f64 {
    let dx = (width.saturating_sub(1)) as f64;
    let dy = (height.saturating_sub(1)) as f64;
    (dx * dx + dy * dy).sqrt()
}

// ── Aggregation ─────────────────────────────────────────────────────

/// Mean and population standard deviation (n divisor).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    /// Entries that were undefined and entered at the sentinel value.
    pub n_undefined: usize,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::InvalidInput("aggregate: no samples".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(Aggregate {
        mean,
        std: var.sqrt(),
        n: values.len(),
        n_undefined: 0,
    })
}

/// Aggregate optional metric values; `None` entries count as `sentinel`
/// and are tallied, never dropped.
pub fn aggregate_with_sentinel(values: &[Option<f64>], sentinel: f64) -> Result<Aggregate> {
    let filled: Vec<f64> = values.iter().map(|v| v.unwrap_or(sentinel)).collect();
    let mut agg = aggregate(&filled)?;
    agg.n_undefined = values.iter().filter(|v| v.is_none()).count();
    Ok(agg)
}
