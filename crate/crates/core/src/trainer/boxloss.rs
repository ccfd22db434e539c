use crate::error::Result;
use crate::volume::{Box3, Dims, VoxelGrid};

#[derive(Clone, Debug)]
pub struct BoxProjectionResult {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Voxel that won each projected cell, projection by projection.
    pub argmax: Vec<usize>,
}

/// Clamped binary cross-entropy between the max-projections of `probs` and
/// of the box-fill indicator along each axis, averaged over projected cells
/// and then over the three projections.
pub fn box_projection_loss(probs: &VoxelGrid, region: &Box3, prob_floor: f64) -> Result<BoxProjectionResult> {
    region.check_within(probs.dims())?;
    Ok(projection_loss(probs, Some(region), prob_floor))
}

/// As [`box_projection_loss`]; `None` means the box misses the patch, so
/// every projected cell targets background.
pub(crate) fn projection_loss(probs: &VoxelGrid, region: Option<&Box3>, prob_floor: f64) -> BoxProjectionResult {
    let dims = probs.dims();
    let p = probs.data();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut grad = vec![0.0; p.len()];
    let mut argmax = Vec::new();
    let mut value = 0.0;
    for axis in 0..3 {
        let (u, w) = other_axes(axis);
        let cells = dims[u] * dims[w];
        let mut sum = 0.0;
        for a in 0..dims[u] {
            for b in 0..dims[w] {
                let base = a * strides[u] + b * strides[w];
                // first maximum along the line wins ties
                let mut best = base;
                for k in 1..dims[axis] {
                    let v = base + k * strides[axis];
                    if p[v] > p[best] {
                        best = v;
                    }
                }
                argmax.push(best);
                let target = region.is_some_and(|r| covers(r, u, a) && covers(r, w, b));
                let m = p[best];
                let scale = 1.0 / (3 * cells) as f64;
                if target {
                    if m > prob_floor {
                        sum -= m.ln();
                        grad[best] -= scale / m;
                    } else {
                        sum -= prob_floor.ln();
                    }
                } else if 1.0 - m > prob_floor {
                    sum -= (1.0 - m).ln();
                    grad[best] += scale / (1.0 - m);
                } else {
                    sum -= prob_floor.ln();
                }
            }
        }
        value += sum / cells as f64;
    }
    BoxProjectionResult {
        value: value / 3.0,
        grad,
        argmax,
    }
}

fn other_axes(axis: usize) -> (usize, usize) {
    match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    }
}

fn covers(r: &Box3, axis: usize, c: usize) -> bool {
    (r.lo[axis]..r.hi[axis]).contains(&c)
}

/// Fraction of projected cells, averaged over the three projections, that a
/// box fills.
pub fn positive_cell_fraction(region: &Box3, dims: Dims) -> f64 {
    let e = region.extent();
    (0..3)
        .map(|axis| {
            let (u, w) = other_axes(axis);
            (e[u] * e[w]) as f64 / (dims[u] * dims[w]) as f64
        })
        .sum::<f64>()
        / 3.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const FLOOR: f64 = 1e-6;

    fn fill(dims: Dims, r: &Box3) -> VoxelGrid {
        VoxelGrid::from_fn(dims, |z, y, x| r.contains(z, y, x) as u8 as f64)
    }

    #[test]
    fn perfect_fill_is_free() {
        let dims = [6, 7, 8];
        let r = Box3::new([1, 2, 3], [4, 6, 5]).unwrap();
        let res = box_projection_loss(&fill(dims, &r), &r, FLOOR).unwrap();
        assert!(res.value.abs() < 1e-12);
    }

    #[test]
    fn zero_field_closed_form() {
        let dims = [6, 7, 8];
        let r = Box3::new([1, 2, 3], [4, 6, 5]).unwrap();
        let res = box_projection_loss(&VoxelGrid::zeros(dims), &r, FLOOR).unwrap();
        let expect = -FLOOR.ln() * positive_cell_fraction(&r, dims);
        assert!((res.value - expect).abs() < 1e-12);
        assert!(res.value > 0.0);
        // only background cells still pull, and only downwards
        assert!(res.grad.iter().all(|&g| g >= 0.0));
    }

    #[test]
    fn out_of_bounds_box() {
        let r = Box3::new([0, 0, 0], [5, 2, 2]).unwrap();
        assert!(matches!(
            box_projection_loss(&VoxelGrid::zeros([4, 4, 4]), &r, FLOOR),
            Err(Error::OutOfBounds(_))
        ));
    }

    #[test]
    fn ties_route_to_lowest_index() {
        let dims = [3, 3, 3];
        let r = Box3::new([0, 0, 0], [3, 3, 3]).unwrap();
        let res = box_projection_loss(&VoxelGrid::filled(dims, 0.5), &r, FLOOR).unwrap();
        // projection along z: cell (y, x) goes to voxel (0, y, x)
        assert_eq!(&res.argmax[..9], &[0, 1, 2, 3, 4, 5, 6, 7, 8]);
        for v in 9..27 {
            let on_face = crate::volume::unravel(dims, v).contains(&0);
            assert_eq!(res.grad[v] != 0.0, on_face, "voxel {v}");
        }
    }

    #[test]
    fn matches_finite_differences() {
        let dims = [4, 4, 4];
        let r = Box3::new([1, 0, 1], [3, 3, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let probs = VoxelGrid::from_fn(dims, |_, _, _| rng.random_range(0.05..0.95));
        let res = box_projection_loss(&probs, &r, FLOOR).unwrap();
        let h = 1e-5;
        for v in 0..64 {
            let probe = |d: f64| {
                let mut data = probs.data().to_vec();
                data[v] += d;
                box_projection_loss(&probs.with_data(data).unwrap(), &r, FLOOR).unwrap()
            };
            let (plus, minus) = (probe(h), probe(-h));
            if plus.argmax != res.argmax || minus.argmax != res.argmax {
                continue;
            }
            let fd = (plus.value - minus.value) / (2.0 * h);
            let err = (fd - res.grad[v]).abs() / fd.abs().max(res.grad[v].abs()).max(1e-6);
            assert!(err < 1e-4, "voxel {v}: {fd} vs {}", res.grad[v]);
        }
    }
}
