//! Wilcoxon signed-rank test for paired samples.
//!
//! Zero differences are discarded (classic Wilcoxon, not Pratt); absolute
//! differences are ranked with average ranks on ties. The exact two-sided
//! p-value enumerates all 2^n sign assignments for n <= 20; larger n uses
//! the normal approximation with tie and continuity corrections. Ranks
//! are multiples of 0.5, so rank sums are exact in f64 and the exact path
//! is fully deterministic.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WilcoxonMethod {
    Exact,
    NormalApprox,
}

impl WilcoxonMethod {
    pub fn name(self) -> &'static str {
        match self {
            WilcoxonMethod::Exact => "exact",
            WilcoxonMethod::NormalApprox => "normal-approx",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// Pair count after discarding zero differences.
    pub n_effective: usize,
    pub p_two_sided: f64,
    pub method: WilcoxonMethod,
    /// All differences were zero (p fixed at 1.0).
    pub degenerate: bool,
}

const EXACT_LIMIT: usize = 20;

/// Method chosen automatically: exact enumeration up to n = 20.
pub fn wilcoxon_signed_rank(pairs: &[(f64, f64)]) -> Result<WilcoxonResult> {
    let n_eff = nonzero_diffs(pairs)?.len();
    let method = if n_eff <= EXACT_LIMIT {
        WilcoxonMethod::Exact
    } else {
        WilcoxonMethod::NormalApprox
    };
    wilcoxon_with_method(pairs, method)
}

pub fn wilcoxon_with_method(
    pairs: &[(f64, f64)],
    method: WilcoxonMethod,
) -> Result<WilcoxonResult> {
    let diffs = nonzero_diffs(pairs)?;
    if diffs.is_empty() {
        return Ok(WilcoxonResult {
            w_plus: 0.0,
            n_effective: 0,
            p_two_sided: 1.0,
            method,
            degenerate: true,
        });
    }
    let n = diffs.len();
    let ranks = average_ranks(&diffs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|((d, _), _)| *d > 0.0)
        .map(|(_, r)| r)
        .sum();

    let p = match method {
        WilcoxonMethod::Exact => {
            if n > EXACT_LIMIT {
                return Err(Error::InvalidInput(format!(
                    "exact enumeration limited to n <= {}, got {}",
                    EXACT_LIMIT, n
                )));
            }
            exact_two_sided(&ranks, w_plus)
        }
        WilcoxonMethod::NormalApprox => normal_two_sided(&diffs, &ranks, w_plus),
    };

    Ok(WilcoxonResult {
        w_plus,
        n_effective: n,
        p_two_sided: p,
        method,
        degenerate: false,
    })
}

/// `(difference, |difference|)` pairs after discarding zeros.
fn nonzero_diffs(pairs: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("wilcoxon: no pairs".into()));
    }
    Ok(pairs
        .iter()
        .map(|&(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .map(|d| (d, d.abs()))
        .collect())
}

/// Ranks of |d| ascending, average rank across ties.
fn average_ranks(diffs: &[(f64, f64)]) -> Vec<f64> {
    let n = diffs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diffs[i].1.partial_cmp(&diffs[j].1).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && diffs[order[j + 1]].1 == diffs[order[i]].1 {
            j += 1;
        }
        // positions i..=j (0-based) share the average of ranks i+1..=j+1
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Enumerate all 2^n sign assignments; two-sided tail mass of the
/// observed statistic under the symmetric null.
fn exact_two_sided(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len();
    let total: f64 = ranks.iter().sum();
    let w_minus = total - w_plus;
    if w_plus == w_minus {
        return 1.0;
    }
    let lo = w_plus.min(w_minus);
    let hi = w_plus.max(w_minus);
    let mut count_lo = 0u64;
    let mut count_hi = 0u64;
    for mask in 0u64..(1u64 << n) {
        let mut stat = 0.0;
        for (i, r) in ranks.iter().enumerate() {
            if mask >> i & 1 == 1 {
                stat += r;
            }
        }
        if stat <= lo {
            count_lo += 1;
        }
        if stat >= hi {
            count_hi += 1;
        }
    }
    ((count_lo + count_hi) as f64 / (1u64 << n) as f64).min(1.0)
}

/// Normal approximation with tie correction and continuity correction.
fn normal_two_sided(diffs: &[(f64, f64)], ranks: &[f64], w_plus: f64) -> f64 {
    let n = diffs.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    // tie correction: -(t^3 - t)/48 per group of t tied |d|
    let mut sorted: Vec<f64> = diffs.iter().map(|(_, a)| *a).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        if t > 1.0 {
            var -= (t * t * t - t) / 48.0;
        }
        i = j + 1;
    }
    let _ = ranks;
    if var <= 0.0 {
        return 1.0;
    }
    // continuity correction; statistics within half a rank of the center
    // are already as central as possible, so p saturates at 1
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * normal_sf(z)).min(1.0)
}

/// Upper tail of the standard normal via an erf polynomial fit
/// (|error| < 1.5e-7, far inside the approximation-path tolerance).
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    poly * (-x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent recursive enumeration oracle (distinct code path from
    /// the iterative bitmask loop in the implementation).
    fn oracle_exact_p(ranks: &[f64], w_plus: f64) -> f64 {
        fn walk(ranks: &[f64], idx: usize, acc: f64, stats: &mut Vec<f64>) {
            if idx == ranks.len() {
                stats.push(acc);
                return;
            }
            walk(ranks, idx + 1, acc, stats);
            walk(ranks, idx + 1, acc + ranks[idx], stats);
        }
        let mut stats = Vec::new();
        walk(ranks, 0, 0.0, &mut stats);
        let total: f64 = ranks.iter().sum();
        let w_minus = total - w_plus;
        if w_plus == w_minus {
            return 1.0;
        }
        let lo = w_plus.min(w_minus);
        let hi = w_plus.max(w_minus);
        let c = stats.iter().filter(|&&s| s <= lo).count()
            + stats.iter().filter(|&&s| s >= hi).count();
        (c as f64 / stats.len() as f64).min(1.0)
    }

    #[test]
    fn all_positive_n5_fixture() {
        let pairs: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64 * 2.0, i as f64)).collect();
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        assert_eq!(r.w_plus, 15.0);
        assert_eq!(r.n_effective, 5);
        assert_eq!(r.p_two_sided, 2.0 / 32.0);
        assert_eq!(r.method, WilcoxonMethod::Exact);
        assert!(!r.degenerate);
    }

    #[test]
    fn identical_pairs_are_degenerate() {
        let pairs = vec![(0.3, 0.3), (0.9, 0.9), (0.1, 0.1)];
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p_two_sided, 1.0);
        assert_eq!(r.n_effective, 0);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(wilcoxon_signed_rank(&[]).is_err());
    }

    #[test]
    fn exact_path_matches_enumeration_oracle_for_all_n_up_to_12() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in 1..=12usize {
            for _ in 0..5 {
                let pairs: Vec<(f64, f64)> = (0..n)
                    .map(|_| {
                        let a: f64 = rng.gen_range(-1.0..1.0);
                        let b: f64 = rng.gen_range(-1.0..1.0);
                        (a, b)
                    })
                    .collect();
                let diffs = nonzero_diffs(&pairs).unwrap();
                if diffs.is_empty() {
                    continue;
                }
                let ranks = average_ranks(&diffs);
                let w_plus: f64 = diffs
                    .iter()
                    .zip(&ranks)
                    .filter(|((d, _), _)| *d > 0.0)
                    .map(|(_, r)| r)
                    .sum();
                let got = wilcoxon_with_method(&pairs, WilcoxonMethod::Exact).unwrap();
                let want = oracle_exact_p(&ranks, w_plus);
                assert_eq!(got.p_two_sided.to_bits(), want.to_bits(), "n={}", n);
            }
        }
    }

    #[test]
    fn ties_get_average_ranks_and_still_match_oracle() {
        // |d| values with ties: 1, 1, 2, 2, 2
        let pairs = vec![(2.0, 1.0), (0.0, 1.0), (3.0, 1.0), (1.0, 3.0), (5.0, 3.0)];
        let diffs = nonzero_diffs(&pairs).unwrap();
        let ranks = average_ranks(&diffs);
        assert_eq!(ranks, vec![1.5, 1.5, 4.0, 4.0, 4.0]);
        let got = wilcoxon_with_method(&pairs, WilcoxonMethod::Exact).unwrap();
        let w_plus: f64 = 1.5 + 4.0 + 4.0;
        assert_eq!(got.w_plus, w_plus);
        assert_eq!(
            got.p_two_sided.to_bits(),
            oracle_exact_p(&ranks, w_plus).to_bits()
        );
    }

    #[test]
    fn normal_approximation_close_to_exact_at_n12() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let pairs: Vec<(f64, f64)> = (0..12)
                .map(|_| (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)))
                .collect();
            let exact = wilcoxon_with_method(&pairs, WilcoxonMethod::Exact).unwrap();
            let approx = wilcoxon_with_method(&pairs, WilcoxonMethod::NormalApprox).unwrap();
            assert!(
                (exact.p_two_sided - approx.p_two_sided).abs() < 0.02,
                "exact {} vs approx {}",
                exact.p_two_sided,
                approx.p_two_sided
            );
        }
    }

    #[test]
    fn statistic_bounds_and_p_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for n in [1usize, 3, 8, 15] {
            let pairs: Vec<(f64, f64)> = (0..n)
                .map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)))
                .collect();
            let r = wilcoxon_signed_rank(&pairs).unwrap();
            let ne = r.n_effective as f64;
            assert!(r.w_plus >= 0.0 && r.w_plus <= ne * (ne + 1.0) / 2.0);
            assert!(r.p_two_sided > 0.0 && r.p_two_sided <= 1.0);
        }
    }

    #[test]
    fn large_n_uses_normal_approximation_automatically() {
        let pairs: Vec<(f64, f64)> = (0..25)
            .map(|i| (i as f64 + 1.0 + f64::from(i % 3 == 0), i as f64))
            .collect();
        let r = wilcoxon_signed_rank(&pairs).unwrap();
        assert_eq!(r.n_effective, 25);
        assert_eq!(r.method, WilcoxonMethod::NormalApprox);
    }
}
