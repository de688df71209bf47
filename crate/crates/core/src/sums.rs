//! Deterministic reductions over Monte-Carlo samples.
//!
//! Large sample sums are computed by chunked pairwise summation with a fixed
//! chunk size. The evaluation tree depends only on the input length, never on
//! thread scheduling, so parallel callers that produce per-chunk partials in
//! index order get bit-identical totals on every run. Pairwise summation also
//! keeps the rounding error O(log n) instead of O(n), which matters when
//! averaging ~1e5 log-likelihood ratios that nearly cancel.

/// Chunk size for [`pairwise_sum`]; fixed so the summation tree is part of the
/// numerical contract.
pub const CHUNK: usize = 4096;

/// Sum `values` with a fixed-shape pairwise tree.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= CHUNK {
        return values.iter().sum();
    }
    let mid = (values.len() / 2).next_multiple_of(CHUNK);
    pairwise_sum(&values[..mid.min(values.len())]) + pairwise_sum(&values[mid.min(values.len())..])
}

/// Sum of `f(i, x_i)` over a slice, evaluated lazily chunk by chunk with the
/// same fixed tree as [`pairwise_sum`].
pub fn pairwise_sum_by<T>(values: &[T], f: impl Fn(&T) -> f64 + Copy) -> f64 {
    if values.len() <= CHUNK {
        return values.iter().map(f).sum();
    }
    let mid = (values.len() / 2).next_multiple_of(CHUNK).min(values.len());
    pairwise_sum_by(&values[..mid], f) + pairwise_sum_by(&values[mid..], f)
}

/// Mean and (population) variance of a sample in one deterministic pass pair.
pub fn mean_and_variance(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty(), "mean_and_variance of empty slice");
    let n = values.len() as f64;
    let mean = pairwise_sum(values) / n;
    let var = pairwise_sum_by(values, |v| {
        let d = v - mean;
        d * d
    }) / n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matches_naive_sum_on_small_inputs() {
        let v: Vec<f64> = (0..100).map(|i| i as f64 * 0.25).collect();
        assert_relative_eq!(pairwise_sum(&v), 99.0 * 100.0 / 2.0 * 0.25, max_relative = 1e-15);
    }

    #[test]
    fn is_more_accurate_than_sequential_on_large_inputs() {
        // 10^7 copies of 0.1 summed sequentially drifts; pairwise stays tight.
        let v = vec![0.1f64; 1 << 20];
        let exact = (1u64 << 20) as f64 * 0.1;
        assert_relative_eq!(pairwise_sum(&v), exact, max_relative = 1e-13);
    }

    #[test]
    fn split_points_do_not_depend_on_values() {
        let a: Vec<f64> = (0..20000).map(|i| (i as f64).sin()).collect();
        let direct = pairwise_sum(&a);
        let by = pairwise_sum_by(&a, |x| *x);
        assert_eq!(direct.to_bits(), by.to_bits(), "identical trees, identical bits");
    }

    #[test]
    fn variance_of_constant_is_zero() {
        let (m, v) = mean_and_variance(&[2.5; 1000]);
        assert_eq!(m, 2.5);
        assert_eq!(v, 0.0);
    }
}
