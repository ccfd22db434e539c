use rand::Rng;
use serde::{Deserialize, Serialize};

use super::head::EmbeddingField;
use super::similarity;
use crate::error::{Error, Result};
use crate::volume::{unravel, voxel_count, Box3, Dims};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelField {
    pub dims: Dims,
    pub positive: Vec<bool>,
}

impl LabelField {
    pub fn positives(&self) -> usize {
        self.positive.iter().filter(|&&p| p).count()
    }

    /// Fraction of voxels inside `region` whose label agrees with `truth`.
    pub fn accuracy_within(&self, truth: &[bool], region: &Box3) -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for (v, (&l, &t)) in self.positive.iter().zip(truth).enumerate() {
            let [z, y, x] = unravel(self.dims, v);
            if region.contains(z, y, x) {
                total += 1;
                hits += (l == t) as usize;
            }
        }
        hits as f64 / total.max(1) as f64
    }
}

/// Which side of the majority vote marks a voxel positive during refinement.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineRule {
    /// A voxel similar to more than half of the background referring pixels
    /// becomes negative.
    #[default]
    BackgroundMajority,
    /// A voxel similar to more than half of the referring pixels stays
    /// positive; the opposite polarity.
    Literal,
}

/// Positive inside the box, negative outside.
pub fn coarse_labels(region: &Box3, dims: Dims) -> Result<LabelField> {
    region.check_within(dims)?;
    let positive = (0..voxel_count(dims))
        .map(|v| {
            let [z, y, x] = unravel(dims, v);
            region.contains(z, y, x)
        })
        .collect();
    Ok(LabelField { dims, positive })
}

/// Relabels in-box voxels by their similarity to `k` random background
/// voxels drawn from outside the box.
pub fn refine_labels<R: Rng + ?Sized>(
    embeddings: &EmbeddingField,
    region: &Box3,
    k: usize,
    tau_sim: f64,
    rule: RefineRule,
    rng: &mut R,
) -> Result<LabelField> {
    let dims = embeddings.dims;
    region.check_within(dims)?;
    let outside: Vec<usize> = (0..voxel_count(dims))
        .filter(|&v| {
            let [z, y, x] = unravel(dims, v);
            !region.contains(z, y, x)
        })
        .collect();
    if k == 0 || outside.len() < k {
        return Err(Error::InsufficientBackground {
            needed: k.max(1),
            available: outside.len(),
        });
    }
    let referring: Vec<usize> = rand::seq::index::sample(rng, outside.len(), k)
        .into_iter()
        .map(|i| outside[i])
        .collect();

    let mut positive = vec![false; voxel_count(dims)];
    for z in region.lo[0]..region.hi[0] {
        for y in region.lo[1]..region.hi[1] {
            for x in region.lo[2]..region.hi[2] {
                let v = crate::volume::linear_index(dims, z, y, x);
                let e = embeddings.vector(v);
                let votes = referring
                    .iter()
                    .filter(|&&r| similarity(e, embeddings.vector(r)) >= tau_sim)
                    .count();
                let majority = 2 * votes > k;
                positive[v] = match rule {
                    RefineRule::BackgroundMajority => !majority,
                    RefineRule::Literal => majority,
                };
            }
        }
    }
    Ok(LabelField { dims, positive })
}
