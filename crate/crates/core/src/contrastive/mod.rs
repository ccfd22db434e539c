//! Contrastive head: per-voxel embeddings, box-derived labels and the
//! contrastive pre-training loss.

mod features;
mod head;
mod labels;
mod loss;
mod pretrain;

pub use features::{hand_crafted_features, separable_features, FeatureField, HAND_CRAFTED_CHANNELS};
pub use head::{embed, Adam, EmbeddingField, HeadGrad, HeadParams};
pub use labels::{coarse_labels, refine_labels, LabelField, RefineRule};
pub use loss::{info_nce_loss, info_nce_set, sample_anchors, InfoNceResult};
pub use pretrain::{pretrain_head, PretrainConfig, PretrainOutcome};

/// Dot product of two embedding vectors; a cosine for unit vectors.
#[inline]
pub fn similarity(e1: &[f64], e2: &[f64]) -> f64 {
    debug_assert_eq!(e1.len(), e2.len());
    e1.iter().zip(e2).map(|(a, b)| a * b).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn similarity_basics() {
        let e = [0.6, 0.8, 0.0];
        assert!((similarity(&e, &e) - 1.0).abs() < 1e-15);
        assert_eq!(similarity(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..32).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let (a, b) = (unit(&mut rng), unit(&mut rng));
        let mut direct = 0.0;
        for i in 0..32 {
            direct += a[i] * b[i];
        }
        assert!((similarity(&a, &b) - direct).abs() <= 1e-15);
        assert!(similarity(&a, &b).abs() <= 1.0);
    }
}
