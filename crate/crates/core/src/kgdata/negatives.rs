use rand::seq::index;
use rand::Rng;

use crate::error::{KonError, Result};

/// `n` distinct entity ids drawn uniformly without replacement from all
/// entities except `positive`.
pub fn sample_negatives<R: Rng + ?Sized>(
    num_entities: usize,
    positive: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if n == 0 || n + 1 > num_entities {
        return Err(KonError::Config(format!(
            "cannot draw {n} negatives from {num_entities} entities"
        )));
    }
    Ok(index::sample(rng, num_entities - 1, n)
        .into_iter()
        .map(|i| if i >= positive { i + 1 } else { i })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forced_outcome() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = sample_negatives(3, 0, 2, &mut rng).unwrap();
        s.sort_unstable();
        assert_eq!(s, vec![1, 2]);
    }

    #[test]
    fn distinct_and_excludes_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_negatives(200, 17, 128, &mut rng).unwrap();
        let mut u = s.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 128);
        assert!(!s.contains(&17));
    }

    #[test]
    fn too_many_is_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(sample_negatives(5, 0, 5, &mut rng).is_err());
    }

    #[test]
    fn reproducible() {
        let a = sample_negatives(50, 3, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_negatives(50, 3, 10, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_frequencies_within_three_sigma() {
        // each non-positive id appears with probability n / (N - 1) per draw
        let (num, pos, n, draws) = (10usize, 4usize, 3usize, 100_000usize);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut counts = vec![0usize; num];
        for _ in 0..draws {
            for e in sample_negatives(num, pos, n, &mut rng).unwrap() {
                counts[e] += 1;
            }
        }
        assert_eq!(counts[pos], 0);
        let p = n as f64 / (num - 1) as f64;
        let mean = draws as f64 * p;
        let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
        for (e, &c) in counts.iter().enumerate() {
            if e != pos {
                assert!((c as f64 - mean).abs() < 3.0 * sigma, "entity {e}: {c} vs {mean}");
            }
        }
    }
}
