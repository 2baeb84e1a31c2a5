//! Summary statistics for evaluation reports.

/// Mean and half-width of the normal-approximation 95% interval,
/// `1.96 · s / √n` with the sample standard deviation `s`.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// `n` evenly spaced points from `lo` to `hi`, both included.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => {
            let step = (hi - lo) / (n - 1) as f64;
            (0..n)
                .map(|i| if i == n - 1 { hi } else { lo + step * i as f64 })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_matches_direct_stderr() {
        let values: Vec<f64> = (0..100).map(|i| ((i * 37 % 101) as f64) / 10.0).collect();
        let n = values.len() as f64;
        let m = values.iter().sum::<f64>() / n;
        let ss: f64 = values.iter().map(|v| (v - m).powi(2)).sum();
        let se = (ss / (n - 1.0)).sqrt() / n.sqrt();
        let (mean, half) = mean_ci95(&values);
        assert!((mean - m).abs() < 1e-12);
        assert!((half - 1.96 * se).abs() < 1e-12);
    }

    #[test]
    fn linspace_endpoints() {
        let g = linspace(-5.0, 5.0, 100);
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], -5.0);
        assert_eq!(g[99], 5.0);
        let step = 10.0 / 99.0;
        for w in g.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-12);
        }
    }
}
