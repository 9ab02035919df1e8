//! Seeded synthetic embedding sets for tests, benches and demos.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::embio::EmbeddingMatrix;

/// `rows` samples from an isotropic Gaussian `N(mean, sigma^2 I)`.
pub fn gaussian_cloud<R: rand::Rng>(
    rng: &mut R,
    rows: usize,
    mean: &[f64],
    sigma: f64,
) -> EmbeddingMatrix {
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    let data = (0..rows)
        .flat_map(|_| {
            mean.iter()
                .map(|&m| (m + normal.sample(rng)) as f32)
                .collect::<Vec<_>>()
        })
        .collect();
    EmbeddingMatrix::new(rows, mean.len(), data).expect("non-empty finite cloud")
}

/// Source and target clouds with unit spread: the source is centred at the
/// origin and the target mean sits `offset` standard deviations away along
/// the first axis.
pub fn two_clouds(
    seed: u64,
    m: usize,
    n: usize,
    dims: usize,
    offset: f64,
) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source_mean = vec![0.0; dims];
    let mut target_mean = source_mean.clone();
    target_mean[0] = offset;
    let x = gaussian_cloud(&mut rng, m, &source_mean, 1.0);
    let y = gaussian_cloud(&mut rng, n, &target_mean, 1.0);
    (x, y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clouds_are_seeded() {
        let (a, b) = two_clouds(7, 10, 12, 4, 3.0);
        let (c, d) = two_clouds(7, 10, 12, 4, 3.0);
        assert_eq!(a, c);
        assert_eq!(b, d);
        assert_eq!((a.rows(), b.rows(), a.dims()), (10, 12, 4));
        let (e, _) = two_clouds(8, 10, 12, 4, 3.0);
        assert_ne!(a, e);
    }
}
