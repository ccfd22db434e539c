use crate::volume::{unravel, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Completeness {
    pub complete: bool,
    pub score: f64,
}

/// Geometric completeness score: the share of foreground mass lying more
/// than `border_margin` voxels away from every patch face.
pub fn completeness_gate(probs: &VoxelGrid, threshold: f64, border_margin: usize) -> Completeness {
    let dims = probs.dims();
    let mut total = 0.0;
    let mut border = 0.0;
    for (v, &p) in probs.data().iter().enumerate() {
        total += p;
        let c = unravel(dims, v);
        if (0..3).any(|a| c[a] < border_margin || c[a] + border_margin >= dims[a]) {
            border += p;
        }
    }
    let score = if total < 1e-9 { 0.0 } else { (1.0 - border / total).clamp(0.0, 1.0) };
    Completeness {
        complete: score >= threshold,
        score,
    }
}
