//! Overlap and surface-distance metrics for binary masks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::volume::{unravel, Dims, VoxelGrid};

/// Masks are read as foreground where the value is at least one half.
#[inline]
fn on(v: f64) -> bool {
    v >= 0.5
}

fn same_dims(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `(tp, fp, fn, tn)` with `pred` as the prediction.
pub fn confusion(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<[usize; 4]> {
    same_dims(pred, gt)?;
    let mut c = [0usize; 4];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let slot = match (on(p), on(g)) {
            (true, true) => 0,
            (true, false) => 1,
            (false, true) => 2,
            (false, false) => 3,
        };
        c[slot] += 1;
    }
    Ok(c)
}

fn dice_from_counts([tp, fp, fn_, _]: [usize; 4]) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// `2|A∩B| / (|A|+|B|)`, and 1 when both masks are empty.
pub fn dice(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<f64> {
    Ok(dice_from_counts(confusion(pred, gt)?))
}

/// Foreground voxels with a background 6-neighbour or lying on the grid
/// border, returned as linear indices in ascending order.
pub fn boundary_voxels(mask: &VoxelGrid) -> Vec<usize> {
    let dims = mask.dims();
    let d = mask.data();
    let strides = [dims[1] * dims[2], dims[2], 1];
    (0..d.len())
        .filter(|&v| on(d[v]))
        .filter(|&v| {
            let p = unravel(dims, v);
            (0..3).any(|a| {
                p[a] == 0 || p[a] + 1 == dims[a] || !on(d[v - strides[a]]) || !on(d[v + strides[a]])
            })
        })
        .collect()
}

fn physical(dims: Dims, spacing: [f64; 3], v: usize) -> [f64; 3] {
    let p = unravel(dims, v);
    [p[0] as f64 * spacing[0], p[1] as f64 * spacing[1], p[2] as f64 * spacing[2]]
}

/// Distance from every point in `from` to its nearest neighbour in `to`.
fn directed(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    let tree = KdTree::new(to);
    from.par_iter()
        .map(|q| tree.nearest(q).expect("non-empty target").dist_sq.sqrt())
        .collect()
}

/// Linear interpolation between order statistics at position `q·(n−1)`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hd95Mode {
    /// Percentile over the union of both directed distance sets.
    #[default]
    Pooled,
    /// Larger of the two directed percentiles.
    MaxDirected,
}

pub fn hd95(pred: &VoxelGrid, gt: &VoxelGrid, spacing: [f64; 3]) -> Result<f64> {
    hd95_with(pred, gt, spacing, Hd95Mode::Pooled)
}

pub fn hd95_with(pred: &VoxelGrid, gt: &VoxelGrid, spacing: [f64; 3], mode: Hd95Mode) -> Result<f64> {
    same_dims(pred, gt)?;
    let dims = pred.dims();
    let a: Vec<[f64; 3]> = boundary_voxels(pred).into_iter().map(|v| physical(dims, spacing, v)).collect();
    let b: Vec<[f64; 3]> = boundary_voxels(gt).into_iter().map(|v| physical(dims, spacing, v)).collect();
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut ab = directed(&a, &b);
    let mut ba = directed(&b, &a);
    Ok(match mode {
        Hd95Mode::Pooled => {
            ab.append(&mut ba);
            percentile(&mut ab, 0.95)
        }
        Hd95Mode::MaxDirected => percentile(&mut ab, 0.95).max(percentile(&mut ba, 0.95)),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dice: f64,
    /// Absent when either mask is empty.
    pub hd95: Option<f64>,
    /// `(tp, fp, fn, tn)`.
    pub voxel_counts: [usize; 4],
}

/// Dice, HD95 at the ground truth's spacing, and the confusion counts.
pub fn evaluate(pred: &VoxelGrid, gt: &VoxelGrid) -> Result<MetricReport> {
    let voxel_counts = confusion(pred, gt)?;
    let hd95 = match hd95(pred, gt, gt.spacing()) {
        Ok(v) => Some(v),
        Err(Error::EmptyMask) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        dice: dice_from_counts(voxel_counts),
        hd95,
        voxel_counts,
    })
}
