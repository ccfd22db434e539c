//! Slow, obviously-correct reference implementations used by the `check`
//! suite. None of them share code with the fast paths they audit.

use crate::contrastive::EmbeddingField;
use crate::pointcloud::Point;
use crate::volume::{Dims, VoxelGrid};

fn dist(a: &Point, b: &Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Symmetric Chamfer distance by exhaustive nearest-neighbour search.
pub fn chamfer(s: &[Point], t: &[Point]) -> f64 {
    let one_way = |a: &[Point], b: &[Point]| {
        a.iter()
            .map(|p| b.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / a.len() as f64
    };
    one_way(s, t) + one_way(t, s)
}

/// Points emitted by every cell whose mean corner value exceeds `threshold`,
/// visiting cells in `(z, y, x)` order.
pub fn gridding(grid: &VoxelGrid, threshold: f64) -> Vec<Point> {
    let [s, h, w] = grid.dims();
    let mut out = Vec::new();
    for z in 0..s.saturating_sub(1) {
        for y in 0..h.saturating_sub(1) {
            for x in 0..w.saturating_sub(1) {
                let mut sum = 0.0;
                let mut acc = [0.0; 3];
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let c = grid.get(z + dz, y + dy, x + dx);
                            sum += c;
                            acc[0] += c * (x + dx) as f64;
                            acc[1] += c * (y + dy) as f64;
                            acc[2] += c * (z + dz) as f64;
                        }
                    }
                }
                if sum / 8.0 > threshold {
                    out.push([acc[0] / sum, acc[1] / sum, acc[2] / sum]);
                }
            }
        }
    }
    out
}

/// Dice by direct voxel counting; 1 when both masks are empty.
pub fn dice(pred: &VoxelGrid, gt: &VoxelGrid) -> f64 {
    let (mut both, mut a, mut b) = (0usize, 0usize, 0usize);
    for (p, g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (*p >= 0.5, *g >= 0.5);
        both += (p && g) as usize;
        a += p as usize;
        b += g as usize;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * both as f64 / (a + b) as f64
    }
}

/// Foreground voxels on the grid border or with a background face neighbour,
/// as physical `[z, y, x]` positions.
fn surface(mask: &VoxelGrid, spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let d = mask.dims();
    let fg = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d[0]
            && (y as usize) < d[1]
            && (x as usize) < d[2]
            && mask.get(z as usize, y as usize, x as usize) >= 0.5
    };
    let mut out = Vec::new();
    for z in 0..d[0] as isize {
        for y in 0..d[1] as isize {
            for x in 0..d[2] as isize {
                if !fg(z, y, x) {
                    continue;
                }
                let exposed = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                    .iter()
                    .any(|(a, b, c)| !fg(z + a, y + b, x + c));
                if exposed {
                    out.push([z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]);
                }
            }
        }
    }
    out
}

/// Pooled 95th percentile of all-pairs surface distances, with linear
/// interpolation between order statistics. `None` when a mask is empty.
pub fn hd95(pred: &VoxelGrid, gt: &VoxelGrid, spacing: [f64; 3]) -> Option<f64> {
    let a = surface(pred, spacing);
    let b = surface(gt, spacing);
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let nearest = |p: &[f64; 3], set: &[[f64; 3]]| set.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min);
    let mut all: Vec<f64> = a.iter().map(|p| nearest(p, &b)).chain(b.iter().map(|q| nearest(q, &a))).collect();
    all.sort_by(f64::total_cmp);
    let pos = 0.95 * (all.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(all[lo] + (pos - lo as f64) * (all[hi] - all[lo]))
}

/// Pairwise loss over every face-adjacent voxel pair, visited pair by pair.
pub fn pairwise(probs: &VoxelGrid, emb: &EmbeddingField, tau_sim: f64, floor: f64) -> (f64, Vec<f64>) {
    let d: Dims = probs.dims();
    let n = probs.len();
    let idx = |z: usize, y: usize, x: usize| (z * d[1] + y) * d[2] + x;
    let mut edges = Vec::new();
    for z in 0..d[0] {
        for y in 0..d[1] {
            for x in 0..d[2] {
                if z + 1 < d[0] {
                    edges.push((idx(z, y, x), idx(z + 1, y, x)));
                }
                if y + 1 < d[1] {
                    edges.push((idx(z, y, x), idx(z, y + 1, x)));
                }
                if x + 1 < d[2] {
                    edges.push((idx(z, y, x), idx(z, y, x + 1)));
                }
            }
        }
    }
    let p = probs.data();
    let gated: Vec<(usize, usize)> = edges
        .into_iter()
        .filter(|&(a, b)| emb.vector(a).iter().zip(emb.vector(b)).map(|(u, v)| u * v).sum::<f64>() >= tau_sim)
        .collect();
    let mut grad = vec![0.0; n];
    if gated.is_empty() {
        return (0.0, grad);
    }
    let m = gated.len() as f64;
    let mut value = 0.0;
    for (a, b) in gated {
        let same = p[a] * p[b] + (1.0 - p[a]) * (1.0 - p[b]);
        if same > floor {
            value -= same.ln() / m;
            grad[a] -= (p[b] - (1.0 - p[b])) / (same * m);
            grad[b] -= (p[a] - (1.0 - p[a])) / (same * m);
        } else {
            value -= floor.ln() / m;
        }
    }
    (value, grad)
}

/// Largest relative disagreement between two vectors, with `floor` guarding
/// entries that are both near zero.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`, one coordinate at a time. `f` returns
/// the value and a branch key; a coordinate whose probes land on a different
/// branch than the base point is reported as `None`.
pub fn central_differences<K: PartialEq>(x: &[f64], h: f64, f: impl Fn(&[f64]) -> (f64, K)) -> Vec<Option<f64>> {
    let (_, base) = f(x);
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let (plus, kp) = f(&probe);
            probe[i] = x[i] - h;
            let (minus, km) = f(&probe);
            probe[i] = x[i];
            (kp == base && km == base).then(|| (plus - minus) / (2.0 * h))
        })
        .collect()
}

/// Relative-error summary of an analytic gradient against central
/// differences, skipping excluded coordinates. Returns `(max error, compared)`.
pub fn compare_gradient(analytic: &[f64], fd: &[Option<f64>], floor: f64) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut n = 0;
    for (a, f) in analytic.iter().zip(fd) {
        if let Some(f) = f {
            worst = worst.max((a - f).abs() / a.abs().max(f.abs()).max(floor));
            n += 1;
        }
    }
    (worst, n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chamfer_single_pair() {
        assert_eq!(chamfer(&[[0.0; 3]], &[[3.0, 4.0, 0.0]]), 10.0);
    }

    #[test]
    fn gridding_uniform_cell_is_centred() {
        let g = VoxelGrid::filled([2, 2, 2], 0.5);
        assert_eq!(gridding(&g, 0.25), vec![[0.5, 0.5, 0.5]]);
    }

    #[test]
    fn hd95_of_offset_voxels() {
        let a = VoxelGrid::from_fn([1, 1, 8], |_, _, x| (x == 1) as u8 as f64);
        let b = VoxelGrid::from_fn([1, 1, 8], |_, _, x| (x == 6) as u8 as f64);
        assert_eq!(hd95(&a, &b, [1.0; 3]), Some(5.0));
        assert_eq!(hd95(&a, &VoxelGrid::zeros([1, 1, 8]), [1.0; 3]), None);
    }

    #[test]
    fn central_differences_of_a_cubic() {
        let fd = central_differences(&[2.0, -1.0], 1e-5, |v| (v[0].powi(3) + 2.0 * v[1], ()));
        assert!((fd[0].unwrap() - 12.0).abs() < 1e-8);
        assert!((fd[1].unwrap() - 2.0).abs() < 1e-8);
    }

    #[test]
    fn branch_changes_are_excluded() {
        let fd = central_differences(&[0.0, 5.0], 1e-3, |v| (v[0].abs() + v[1], v[0] > 0.0));
        assert_eq!(fd[0], None);
        assert!(fd[1].is_some());
    }
}
