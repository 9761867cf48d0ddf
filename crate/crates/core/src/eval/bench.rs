//! Wall-clock latency statistics.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchStats {
    pub samples: Vec<f64>,
    pub min: f64,
    pub median: f64,
    pub p95: f64,
}

impl BenchStats {
    /// Nearest-rank statistics over seconds.
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("no timing samples".into()));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let rank = |q: f64| sorted[((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1];
        Ok(Self { min: sorted[0], median: rank(0.5), p95: rank(0.95), samples })
    }
}

/// Runs `f` `warmup` times untimed, then `reps` timed times.
pub fn bench<F: FnMut() -> Result<()>>(warmup: usize, reps: usize, mut f: F) -> Result<BenchStats> {
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    BenchStats::from_samples(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample() {
        let s = BenchStats::from_samples(vec![0.25]).unwrap();
        assert_eq!((s.min, s.median, s.p95), (0.25, 0.25, 0.25));
    }

    #[test]
    fn ranks() {
        let s = BenchStats::from_samples((1..=20).rev().map(f64::from).collect()).unwrap();
        assert_eq!((s.min, s.median, s.p95), (1.0, 10.0, 19.0));
        assert!(BenchStats::from_samples(vec![]).is_err());
    }

    #[test]
    fn counts_calls() {
        let mut n = 0;
        let s = bench(2, 3, || {
            n += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(n, 5);
        assert_eq!(s.samples.len(), 3);
    }
}
