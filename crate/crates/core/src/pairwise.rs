//! Neighbour graph over voxels and the similarity-gated pairwise loss.

use serde::{Deserialize, Serialize};

use crate::contrastive::{similarity, EmbeddingField};
use crate::error::{Error, Result};
use crate::volume::{linear_index, unravel, voxel_count, Box3, Dims, VoxelGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Neighborhood {
    #[default]
    #[serde(rename = "6")]
    Six,
    #[serde(rename = "26")]
    TwentySix,
}

impl Neighborhood {
    /// Offsets `(dz, dy, dx)` that are lexicographically positive, so every
    /// undirected edge is produced exactly once.
    fn forward_offsets(self) -> Vec<[i64; 3]> {
        match self {
            Neighborhood::Six => vec![[0, 0, 1], [0, 1, 0], [1, 0, 0]],
            Neighborhood::TwentySix => {
                let mut v = Vec::with_capacity(13);
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            if (dz, dy, dx) > (0, 0, 0) {
                                v.push([dz, dy, dx]);
                            }
                        }
                    }
                }
                v
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct EdgeGraph {
    pub dims: Dims,
    pub neighborhood: Neighborhood,
    /// Voxels allowed as edge endpoints; `None` means every voxel.
    pub region_mask: Option<Vec<bool>>,
    edges: Vec<[usize; 2]>,
}

impl EdgeGraph {
    /// A graph with no edges, for patches the region never reaches.
    pub fn empty(dims: Dims, neighborhood: Neighborhood) -> Self {
        Self {
            dims,
            neighborhood,
            region_mask: Some(vec![false; voxel_count(dims)]),
            edges: Vec::new(),
        }
    }

    /// Edges with both endpoints inside the region.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }
}

/// Full-grid 6-neighbourhood edge count.
pub fn six_edge_count(dims: Dims) -> usize {
    let [s, h, w] = dims;
    (s - 1) * h * w + s * (h - 1) * w + s * h * (w - 1)
}

pub fn build_edge_graph(
    dims: Dims,
    neighborhood: Neighborhood,
    region: Option<&Box3>,
    dilation: usize,
) -> Result<EdgeGraph> {
    if dims.contains(&0) {
        return Err(Error::OutOfBounds(format!("invalid dims {dims:?}")));
    }
    let region_mask = match region {
        Some(b) => {
            b.check_within(dims)?;
            let grown = b.dilate(dilation, dims);
            Some(
                (0..voxel_count(dims))
                    .map(|v| {
                        let [z, y, x] = unravel(dims, v);
                        grown.contains(z, y, x)
                    })
                    .collect::<Vec<bool>>(),
            )
        }
        None => None,
    };
    let offsets = neighborhood.forward_offsets();
    let inside = |v: usize| region_mask.as_ref().is_none_or(|m| m[v]);
    let mut edges = Vec::new();
    for v in 0..voxel_count(dims) {
        if !inside(v) {
            continue;
        }
        let p = unravel(dims, v);
        for o in &offsets {
            let q = [p[0] as i64 + o[0], p[1] as i64 + o[1], p[2] as i64 + o[2]];
            if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64) {
                continue;
            }
            let u = linear_index(dims, q[0] as usize, q[1] as usize, q[2] as usize);
            if inside(u) {
                edges.push([v, u]);
            }
        }
    }
    Ok(EdgeGraph {
        dims,
        neighborhood,
        region_mask,
        edges,
    })
}

/// Probability that two voxels carry the same label.
#[inline]
pub fn same_label_prob(p1: f64, p2: f64) -> f64 {
    p1 * p2 + (1.0 - p1) * (1.0 - p2)
}

#[derive(Clone, Debug)]
pub struct PairwiseResult {
    pub value: f64,
    /// Gradient with respect to each voxel probability.
    pub grad: Vec<f64>,
    /// Number of edges passing the similarity gate.
    pub gated_edges: usize,
}

/// `-(1/N) Σ log max(P(same), floor)` over the `N` edges whose endpoint
/// embeddings have similarity at least `tau_sim`. The gate carries no gradient.
pub fn pairwise_loss(
    probs: &VoxelGrid,
    embeddings: &EmbeddingField,
    graph: &EdgeGraph,
    tau_sim: f64,
    prob_floor: f64,
) -> Result<PairwiseResult> {
    if probs.dims() != embeddings.dims || probs.dims() != graph.dims {
        return Err(Error::DimensionMismatch(format!(
            "probabilities {:?}, embeddings {:?}, graph {:?}",
            probs.dims(),
            embeddings.dims,
            graph.dims
        )));
    }
    let p = probs.data();
    let gated: Vec<[usize; 2]> = graph
        .edges()
        .iter()
        .copied()
        .filter(|&[a, b]| similarity(embeddings.vector(a), embeddings.vector(b)) >= tau_sim)
        .collect();
    let mut grad = vec![0.0; p.len()];
    if gated.is_empty() {
        return Ok(PairwiseResult {
            value: 0.0,
            grad,
            gated_edges: 0,
        });
    }
    let n = gated.len() as f64;
    let mut sum = 0.0;
    for &[a, b] in &gated {
        let prob = same_label_prob(p[a], p[b]);
        if prob > prob_floor {
            sum += prob.ln();
            grad[a] -= (2.0 * p[b] - 1.0) / (prob * n);
            grad[b] -= (2.0 * p[a] - 1.0) / (prob * n);
        } else {
            sum += prob_floor.ln();
        }
    }
    Ok(PairwiseResult {
        value: -sum / n,
        grad,
        gated_edges: gated.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn edge_counts() {
        assert_eq!(build_edge_graph([2, 2, 2], Neighborhood::Six, None, 0).unwrap().edge_count(), 12);
        assert_eq!(build_edge_graph([3, 3, 3], Neighborhood::Six, None, 0).unwrap().edge_count(), 54);
        assert_eq!(six_edge_count([3, 3, 3]), 54);
        for dims in [[4, 5, 6], [1, 3, 7], [5, 1, 1]] {
            assert_eq!(
                build_edge_graph(dims, Neighborhood::Six, None, 0).unwrap().edge_count(),
                six_edge_count(dims)
            );
        }
        // 26-neighbourhood of a 2-cube is the complete graph on 8 nodes
        assert_eq!(build_edge_graph([2, 2, 2], Neighborhood::TwentySix, None, 0).unwrap().edge_count(), 28);
    }

    #[test]
    fn edges_are_unique_and_not_self() {
        let g = build_edge_graph([3, 4, 3], Neighborhood::TwentySix, None, 0).unwrap();
        let mut seen = std::collections::HashSet::new();
        for &[a, b] in g.edges() {
            assert_ne!(a, b);
            assert!(seen.insert((a.min(b), a.max(b))));
        }
    }

    #[test]
    fn single_voxel_box_has_no_internal_edges() {
        let b = Box3::new([1, 1, 1], [2, 2, 2]).unwrap();
        let g = build_edge_graph([4, 4, 4], Neighborhood::Six, Some(&b), 0).unwrap();
        assert_eq!(g.edge_count(), 0);
        let g = build_edge_graph([4, 4, 4], Neighborhood::Six, Some(&b), 1).unwrap();
        assert_eq!(g.edge_count(), six_edge_count([3, 3, 3]));
    }

    #[test]
    fn same_label_prob_cases() {
        assert_eq!(same_label_prob(1.0, 1.0), 1.0);
        assert_eq!(same_label_prob(1.0, 0.0), 0.0);
        for p in [0.0, 0.1, 0.37, 0.9, 1.0] {
            assert_eq!(same_label_prob(0.5, p), 0.5);
        }
    }

    fn embeddings_from(dims: Dims, rng: &mut impl Rng) -> EmbeddingField {
        let n = voxel_count(dims);
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            let v: [f64; 3] = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..1.0)];
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            data.extend(v.iter().map(|x| x / norm));
        }
        EmbeddingField::new(dims, 3, data).unwrap()
    }

    #[test]
    fn certain_foreground_costs_nothing() {
        let dims = [3, 3, 3];
        let g = build_edge_graph(dims, Neighborhood::Six, None, 0).unwrap();
        let e = EmbeddingField::constant(dims, &[1.0]);
        let r = pairwise_loss(&VoxelGrid::filled(dims, 1.0), &e, &g, 0.5, 1e-6).unwrap();
        assert_eq!(r.value, 0.0);
        // the only remaining pull is further towards agreement
        assert!(r.grad.iter().all(|&v| v <= 0.0));
    }

    #[test]
    fn two_voxel_edge() {
        let dims = [1, 1, 2];
        let g = build_edge_graph(dims, Neighborhood::Six, None, 0).unwrap();
        let e = EmbeddingField::constant(dims, &[1.0]);
        let r = pairwise_loss(&VoxelGrid::filled(dims, 0.5), &e, &g, 0.5, 1e-6).unwrap();
        assert!((r.value - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(r.gated_edges, 1);
    }

    #[test]
    fn no_gated_edges_is_zero() {
        let dims = [1, 1, 2];
        let g = build_edge_graph(dims, Neighborhood::Six, None, 0).unwrap();
        let e = EmbeddingField::new(dims, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let r = pairwise_loss(&VoxelGrid::filled(dims, 0.3), &e, &g, 0.5, 1e-6).unwrap();
        assert_eq!((r.value, r.gated_edges), (0.0, 0));
        assert!(r.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn opposite_signs_on_single_edge() {
        let dims = [1, 1, 2];
        let g = build_edge_graph(dims, Neighborhood::Six, None, 0).unwrap();
        let e = EmbeddingField::constant(dims, &[1.0]);
        let probs = VoxelGrid::new(dims, [1.0; 3], vec![0.8, 0.3]).unwrap();
        let r = pairwise_loss(&probs, &e, &g, 0.5, 1e-6).unwrap();
        assert!(r.grad[0] * r.grad[1] < 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let g = build_edge_graph([2, 2, 2], Neighborhood::Six, None, 0).unwrap();
        let e = EmbeddingField::constant([2, 2, 3], &[1.0]);
        assert!(matches!(
            pairwise_loss(&VoxelGrid::filled([2, 2, 2], 0.5), &e, &g, 0.5, 1e-6),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn gated_count_monotone_in_threshold() {
        let dims = [5, 5, 5];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e = embeddings_from(dims, &mut rng);
        let g = build_edge_graph(dims, Neighborhood::Six, None, 0).unwrap();
        let p = VoxelGrid::filled(dims, 0.4);
        let mut last = 0;
        for tau in [1.0, 0.9, 0.7, 0.5, 0.2, 0.0, -1.0] {
            let n = pairwise_loss(&p, &e, &g, tau, 1e-6).unwrap().gated_edges;
            assert!(n >= last);
            last = n;
        }
        assert_eq!(last, g.edge_count());
    }

    proptest! {
        #[test]
        fn same_label_prob_in_range(p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0) {
            let v = same_label_prob(p1, p2);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, same_label_prob(p2, p1));
        }
    }
}
