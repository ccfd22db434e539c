use crate::error::{Error, Result};
use crate::volume::{unravel, voxel_count, Dims, PatchSpec, VoxelGrid};

/// Assembles overlapping patch predictions. Each voxel keeps the value from
/// the covering patch with the largest `|p − 0.5|`, the earliest patch on ties.
pub fn patch_nms(patches: &[(PatchSpec, VoxelGrid)], full_dims: Dims) -> Result<VoxelGrid> {
    let n = voxel_count(full_dims);
    let mut out = vec![0.0; n];
    let mut best = vec![f64::NEG_INFINITY; n];
    for (spec, probs) in patches {
        spec.check_within(full_dims)?;
        if probs.dims() != spec.dims {
            return Err(Error::DimensionMismatch(format!(
                "patch {:?} carries a grid of {:?}",
                spec.dims,
                probs.dims()
            )));
        }
        let d = probs.data();
        for z in 0..spec.dims[0] {
            for y in 0..spec.dims[1] {
                for x in 0..spec.dims[2] {
                    let p = d[probs.index(z, y, x)];
                    let g = crate::volume::linear_index(full_dims, spec.origin[0] + z, spec.origin[1] + y, spec.origin[2] + x);
                    let conf = (p - 0.5).abs();
                    if conf > best[g] {
                        best[g] = conf;
                        out[g] = p;
                    }
                }
            }
        }
    }
    if let Some(g) = best.iter().position(|b| *b == f64::NEG_INFINITY) {
        let [z, y, x] = unravel(full_dims, g);
        return Err(Error::CoverageGap(z, y, x));
    }
    let spacing = patches.first().map_or([1.0; 3], |(_, p)| p.spacing());
    VoxelGrid::new(full_dims, spacing, out)
}
