//! Small summary statistics used by the comparison and audit routines.

use std::collections::BTreeMap;

/// Sample mean and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    /// Whether `target` lies within `k` standard errors (inclusive).
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.value - target).abs() <= k * self.stderr
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn mean_estimate(xs: &[f64]) -> Estimate {
    Estimate {
        value: mean(xs),
        stderr: (variance(xs) / xs.len() as f64).sqrt(),
    }
}

/// Sample variance with its standard error, using the fourth central moment.
pub fn variance_estimate(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let m = mean(xs);
    let s2 = variance(xs);
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    let var_of_s2 = (m4 - s2 * s2 * (n - 3.0) / (n - 1.0)) / n;
    Estimate {
        value: s2,
        stderr: var_of_s2.max(0.0).sqrt(),
    }
}

/// Bernoulli frequency with binomial standard error.
pub fn proportion(successes: usize, trials: usize) -> Estimate {
    let p = successes as f64 / trials as f64;
    Estimate {
        value: p,
        stderr: (p * (1.0 - p) / trials as f64).sqrt(),
    }
}

/// Pearson correlation with the large-sample standard error `(1 - ρ²)/√n`.
/// Returns a zero estimate when either sample is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> Estimate {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let (ma, mb) = (mean(a), mean(b));
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Estimate {
            value: 0.0,
            stderr: 1.0 / n.sqrt(),
        };
    }
    let rho = sab / (saa * sbb).sqrt();
    Estimate {
        value: rho,
        stderr: (1.0 - rho * rho) / n.sqrt(),
    }
}

/// Empirical law of a discrete outcome.
pub fn empirical_law<K: Ord + Clone>(samples: &[K]) -> BTreeMap<K, f64> {
    let mut counts: BTreeMap<K, usize> = BTreeMap::new();
    for s in samples {
        *counts.entry(s.clone()).or_default() += 1;
    }
    let n = samples.len() as f64;
    counts.into_iter().map(|(k, c)| (k, c as f64 / n)).collect()
}

/// Total-variation distance `½ Σ |p - q|` between two discrete laws.
pub fn total_variation<K: Ord>(p: &BTreeMap<K, f64>, q: &BTreeMap<K, f64>) -> f64 {
    let mut sum = 0.0;
    for (k, pv) in p {
        sum += (pv - q.get(k).copied().unwrap_or(0.0)).abs();
    }
    for (k, qv) in q {
        if !p.contains_key(k) {
            sum += qv.abs();
        }
    }
    0.5 * sum
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_moments() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
        assert!(proportion(3, 4).within(0.75, 0.0));
    }

    #[test]
    fn tv_distance() {
        let p = empirical_law(&[0, 0, 1, 1]);
        let q = empirical_law(&[0, 0, 0, 2]);
        assert!((total_variation(&p, &q) - 0.5).abs() < 1e-15);
        assert_eq!(total_variation(&p, &p), 0.0);
    }

    #[test]
    fn correlation_limits() {
        let a = [1.0, 2.0, 3.0];
        assert!((correlation(&a, &a).value - 1.0).abs() < 1e-12);
        assert!((correlation(&a, &[3.0, 2.0, 1.0]).value + 1.0).abs() < 1e-12);
        assert_eq!(correlation(&a, &[1.0, 1.0, 1.0]).value, 0.0);
    }
}
