//! Point clouds, gridding reverse (grid to points), subsampling and the
//! Chamfer distance with analytic gradients.
//!
//! Points are `[x, y, z]` in voxel-index units, where `x` runs along the last
//! grid axis (W) and `z` along the first (S). Grid values live on lattice
//! nodes; a cell is the unit cube spanned by 8 adjacent nodes.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::volume::{linear_index, unravel, Dims, VoxelGrid};

pub type Point = [f64; 3];

/// The 8 lattice nodes a point was blended from.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSource {
    /// Linear node indices into the source grid.
    pub corners: [usize; 8],
    /// `c_i / sum(c)`.
    pub weights: [f64; 8],
    /// `sum(c)`.
    pub mass: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub dims: Dims,
    pub cells: Vec<CellSource>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point>,
    pub provenance: Option<Provenance>,
}

#[inline]
pub fn node_point(z: usize, y: usize, x: usize) -> Point {
    [x as f64, y as f64, z as f64]
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::InvalidGrid(format!("non-finite point at index {i}")));
        }
        Ok(Self {
            points,
            provenance: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point> {
        if self.points.is_empty() {
            return None;
        }
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        Some([c[0] / n, c[1] / n, c[2] / n])
    }

    /// Translated copy; provenance is dropped.
    pub fn translated(&self, t: Point) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
            provenance: None,
        }
    }
}

const CORNER_OFFSETS: [[usize; 3]; 8] = [
    [0, 0, 0],
    [0, 0, 1],
    [0, 1, 0],
    [0, 1, 1],
    [1, 0, 0],
    [1, 0, 1],
    [1, 1, 0],
    [1, 1, 1],
];

/// Emits one point per cell whose mean corner value exceeds `threshold`, at
/// the corner-value-weighted centroid of the cell's 8 nodes.
pub fn gridding_reverse(probs: &VoxelGrid, threshold: f64) -> PointCloud {
    let dims = probs.dims();
    let data = probs.data();
    let mut points = Vec::new();
    let mut cells = Vec::new();
    if dims.iter().any(|&d| d < 2) {
        return PointCloud {
            points,
            provenance: Some(Provenance { dims, cells }),
        };
    }
    for z in 0..dims[0] - 1 {
        for y in 0..dims[1] - 1 {
            for x in 0..dims[2] - 1 {
                let mut corners = [0usize; 8];
                let mut values = [0.0; 8];
                let mut mass = 0.0;
                for (k, o) in CORNER_OFFSETS.iter().enumerate() {
                    let idx = linear_index(dims, z + o[0], y + o[1], x + o[2]);
                    corners[k] = idx;
                    values[k] = data[idx];
                    mass += data[idx];
                }
                if mass / 8.0 <= threshold || mass <= 0.0 {
                    continue;
                }
                let mut p = [0.0; 3];
                let mut weights = [0.0; 8];
                for (k, o) in CORNER_OFFSETS.iter().enumerate() {
                    let v = node_point(z + o[0], y + o[1], x + o[2]);
                    for a in 0..3 {
                        p[a] += values[k] * v[a];
                    }
                    weights[k] = values[k] / mass;
                }
                points.push([p[0] / mass, p[1] / mass, p[2] / mass]);
                cells.push(CellSource {
                    corners,
                    weights,
                    mass,
                });
            }
        }
    }
    PointCloud {
        points,
        provenance: Some(Provenance { dims, cells }),
    }
}

/// Number of points kept by [`subsample_uniform`] for a cloud of `n` points.
pub fn subsample_count(n: usize, fraction: f64) -> usize {
    (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// Keeps `ceil(fraction * N)` points chosen uniformly without replacement,
/// in their original order.
pub fn subsample_uniform<R: Rng + ?Sized>(
    cloud: &PointCloud,
    fraction: f64,
    rng: &mut R,
) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyCloud);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(
            "sample_fraction",
            format!("must lie in (0, 1], got {fraction}"),
        ));
    }
    let n = cloud.len();
    let k = subsample_count(n, fraction);
    let mut keep = rand::seq::index::sample(rng, n, k).into_vec();
    keep.sort_unstable();
    Ok(PointCloud {
        points: keep.iter().map(|&i| cloud.points[i]).collect(),
        provenance: cloud.provenance.as_ref().map(|p| Provenance {
            dims: p.dims,
            cells: keep.iter().map(|&i| p.cells[i].clone()).collect(),
        }),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChamferMetric {
    /// Mean nearest-neighbour Euclidean distance in both directions.
    #[default]
    Euclidean,
    /// Same with squared distances.
    Squared,
}

#[derive(Clone, Debug)]
pub struct ChamferResult {
    pub value: f64,
    /// Gradient of `value` with respect to each point of the first cloud.
    pub grad_points: Vec<Point>,
    /// Nearest point of the second cloud for each point of the first.
    pub nearest_in_target: Vec<usize>,
    /// Nearest point of the first cloud for each point of the second.
    pub nearest_in_source: Vec<usize>,
}

pub fn chamfer(s: &PointCloud, t: &PointCloud) -> Result<ChamferResult> {
    chamfer_with(s, t, ChamferMetric::Euclidean)
}

pub fn chamfer_with(s: &PointCloud, t: &PointCloud, metric: ChamferMetric) -> Result<ChamferResult> {
    if s.is_empty() || t.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let tree_t = KdTree::new(&t.points);
    let tree_s = KdTree::new(&s.points);
    let fwd: Vec<(usize, f64)> = s
        .points
        .par_iter()
        .map(|p| {
            let n = tree_t.nearest(p).unwrap();
            (n.index, n.dist_sq)
        })
        .collect();
    let bwd: Vec<(usize, f64)> = t
        .points
        .par_iter()
        .map(|p| {
            let n = tree_s.nearest(p).unwrap();
            (n.index, n.dist_sq)
        })
        .collect();

    let ns = s.len() as f64;
    let nt = t.len() as f64;
    let term = |d2: f64| match metric {
        ChamferMetric::Euclidean => d2.sqrt(),
        ChamferMetric::Squared => d2,
    };
    let sum_fwd: f64 = fwd.iter().map(|&(_, d2)| term(d2)).sum();
    let sum_bwd: f64 = bwd.iter().map(|&(_, d2)| term(d2)).sum();
    let value = sum_fwd / ns + sum_bwd / nt;

    // d term / d x for a pair (x, y), scaled by `scale`
    let pair_grad = |x: &Point, y: &Point, d2: f64, scale: f64| -> Point {
        let diff = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
        let k = match metric {
            ChamferMetric::Euclidean => {
                if d2 > 0.0 {
                    scale / d2.sqrt()
                } else {
                    0.0
                }
            }
            ChamferMetric::Squared => 2.0 * scale,
        };
        [diff[0] * k, diff[1] * k, diff[2] * k]
    };

    let mut grad: Vec<Point> = s
        .points
        .iter()
        .zip(&fwd)
        .map(|(x, &(j, d2))| pair_grad(x, &t.points[j], d2, 1.0 / ns))
        .collect();
    for (y, &(i, d2)) in t.points.iter().zip(&bwd) {
        let g = pair_grad(&s.points[i], y, d2, 1.0 / nt);
        for a in 0..3 {
            grad[i][a] += g[a];
        }
    }

    Ok(ChamferResult {
        value,
        grad_points: grad,
        nearest_in_target: fwd.into_iter().map(|(j, _)| j).collect(),
        nearest_in_source: bwd.into_iter().map(|(i, _)| i).collect(),
    })
}

/// Pulls per-point gradients back onto the lattice nodes the points were
/// blended from. The emit/skip decision per cell carries no gradient.
pub fn chamfer_grad_to_grid(result: &ChamferResult, cloud: &PointCloud) -> Result<VoxelGrid> {
    let prov = cloud.provenance.as_ref().ok_or(Error::MissingProvenance)?;
    points_grad_to_grid(&result.grad_points, cloud, prov)
}

pub(crate) fn points_grad_to_grid(
    grad_points: &[Point],
    cloud: &PointCloud,
    prov: &Provenance,
) -> Result<VoxelGrid> {
    if grad_points.len() != cloud.len() || prov.cells.len() != cloud.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} gradients, {} points, {} provenance records",
            grad_points.len(),
            cloud.len(),
            prov.cells.len()
        )));
    }
    let mut out = vec![0.0; prov.dims.iter().product()];
    for ((g, p), cell) in grad_points.iter().zip(&cloud.points).zip(&prov.cells) {
        if g == &[0.0; 3] {
            continue;
        }
        for &node in &cell.corners {
            let [z, y, x] = unravel(prov.dims, node);
            let v = node_point(z, y, x);
            let dot = (v[0] - p[0]) * g[0] + (v[1] - p[1]) * g[1] + (v[2] - p[2]) * g[2];
            out[node] += dot / cell.mass;
        }
    }
    VoxelGrid::new(prov.dims, [1.0; 3], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn uniform_cell_emits_center() {
        let g = VoxelGrid::filled([2, 2, 2], 0.7);
        let c = gridding_reverse(&g, 0.5);
        assert_eq!(c.len(), 1);
        for a in 0..3 {
            assert!((c.points[0][a] - 0.5).abs() < 1e-12);
        }
        let cell = &c.provenance.as_ref().unwrap().cells[0];
        assert_relative_eq!(cell.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn single_corner_cell_emits_node() {
        let mut data = vec![0.0; 8];
        // node (z=1, y=0, x=1)
        data[linear_index([2, 2, 2], 1, 0, 1)] = 1.0;
        let g = VoxelGrid::new([2, 2, 2], [1.0; 3], data).unwrap();
        let c = gridding_reverse(&g, 0.1);
        assert_eq!(c.points, vec![[1.0, 0.0, 1.0]]);
    }

    #[test]
    fn cells_below_threshold_emit_nothing() {
        let g = VoxelGrid::filled([3, 3, 3], 0.2);
        assert!(gridding_reverse(&g, 0.2).is_empty());
        assert_eq!(gridding_reverse(&g, 0.19).len(), 8);
    }

    #[test]
    fn subsample_cardinality_and_membership() {
        let pts: Vec<Point> = (0..100).map(|i| [i as f64, 0.0, 0.0]).collect();
        let c = cloud(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = subsample_uniform(&c, 0.2, &mut rng).unwrap();
        assert_eq!(s.len(), 20);
        assert!(s.points.iter().all(|p| pts.contains(p)));
        let full = subsample_uniform(&c, 1.0, &mut rng).unwrap();
        let mut a = full.points.clone();
        a.sort_by(|x, y| x[0].total_cmp(&y[0]));
        assert_eq!(a, pts);
    }

    #[test]
    fn subsample_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            subsample_uniform(&PointCloud::default(), 0.5, &mut rng),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn subsample_inclusion_probability() {
        let pts: Vec<Point> = (0..10).map(|i| [i as f64, 0.0, 0.0]).collect();
        let c = cloud(&pts);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut hits = [0usize; 10];
        let trials = 10_000;
        for _ in 0..trials {
            for p in subsample_uniform(&c, 0.2, &mut rng).unwrap().points {
                hits[p[0] as usize] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / trials as f64;
            assert!((f - 0.2).abs() < 0.02, "inclusion frequency {f}");
        }
    }

    #[test]
    fn subsample_keeps_provenance() {
        let g = VoxelGrid::from_fn([5, 5, 5], |z, y, x| ((z + y + x) % 3) as f64 / 2.0);
        let c = gridding_reverse(&g, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = subsample_uniform(&c, 0.3, &mut rng).unwrap();
        let prov = s.provenance.unwrap();
        assert_eq!(prov.cells.len(), s.points.len());
        let full = c.provenance.unwrap();
        for (p, cell) in s.points.iter().zip(&prov.cells) {
            let i = c.points.iter().position(|q| q == p).unwrap();
            assert_eq!(&full.cells[i], cell);
        }
    }

    #[test]
    fn chamfer_identical_is_zero() {
        let c = cloud(&[[0.0, 1.0, 2.0], [3.0, 1.0, 0.5], [2.0, 2.0, 2.0]]);
        let r = chamfer(&c, &c).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.grad_points.iter().all(|g| g == &[0.0; 3]));
    }

    #[test]
    fn chamfer_single_pair() {
        let r = chamfer(&cloud(&[[0.0, 0.0, 0.0]]), &cloud(&[[3.0, 4.0, 0.0]])).unwrap();
        assert_eq!(r.value, 10.0);
        // both terms pull the point towards (3, 4, 0)
        assert_relative_eq!(r.grad_points[0][0], -0.6 * 2.0, epsilon = 1e-15);
        assert_relative_eq!(r.grad_points[0][1], -0.8 * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn chamfer_empty() {
        let c = cloud(&[[0.0; 3]]);
        assert!(matches!(chamfer(&c, &PointCloud::default()), Err(Error::EmptyCloud)));
        assert!(matches!(chamfer(&PointCloud::default(), &c), Err(Error::EmptyCloud)));
    }

    #[test]
    fn squared_metric_single_pair() {
        let r = chamfer_with(
            &cloud(&[[0.0, 0.0, 0.0]]),
            &cloud(&[[3.0, 4.0, 0.0]]),
            ChamferMetric::Squared,
        )
        .unwrap();
        assert_eq!(r.value, 50.0);
        assert_eq!(r.grad_points[0], [-12.0, -16.0, 0.0]);
    }

    #[test]
    fn grad_to_grid_needs_provenance() {
        let c = cloud(&[[0.0; 3]]);
        let r = chamfer(&c, &c).unwrap();
        assert!(matches!(chamfer_grad_to_grid(&r, &c), Err(Error::MissingProvenance)));
    }

    #[test]
    fn zero_upstream_gives_zero_grid() {
        let g = VoxelGrid::filled([3, 3, 3], 0.6);
        let c = gridding_reverse(&g, 0.5);
        let r = ChamferResult {
            value: 0.0,
            grad_points: vec![[0.0; 3]; c.len()],
            nearest_in_target: vec![],
            nearest_in_source: vec![],
        };
        let grid = chamfer_grad_to_grid(&r, &c).unwrap();
        assert!(grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corner_gradient_matches_finite_differences() {
        // one cell, symmetric corners, unit upstream gradient on each axis
        for axis in 0..3 {
            let g = VoxelGrid::filled([2, 2, 2], 0.5);
            let c = gridding_reverse(&g, 0.1);
            let mut up = [0.0; 3];
            up[axis] = 1.0;
            let r = ChamferResult {
                value: 0.0,
                grad_points: vec![up],
                nearest_in_target: vec![],
                nearest_in_source: vec![],
            };
            let analytic = chamfer_grad_to_grid(&r, &c).unwrap();
            let h = 1e-5;
            for i in 0..8 {
                let mut p = g.data().to_vec();
                let mut m = g.data().to_vec();
                p[i] += h;
                m[i] -= h;
                let fp = gridding_reverse(&g.with_data(p).unwrap(), 0.1).points[0][axis];
                let fm = gridding_reverse(&g.with_data(m).unwrap(), 0.1).points[0][axis];
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic.data()[i];
                assert!((fd - a).abs() <= 1e-6 * a.abs().max(fd.abs()), "{fd} vs {a}");
            }
        }
    }

    proptest! {
        #[test]
        fn chamfer_symmetric_and_translation_invariant(
            s in prop::collection::vec(prop::array::uniform3(0.0f64..16.0), 1..60),
            t in prop::collection::vec(prop::array::uniform3(0.0f64..16.0), 1..60),
            shift in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let (s, t) = (cloud(&s), cloud(&t));
            let st = chamfer(&s, &t).unwrap().value;
            let ts = chamfer(&t, &s).unwrap().value;
            prop_assert_eq!(st, ts);
            prop_assert!(st >= 0.0);
            let moved = chamfer(&s.translated(shift), &t.translated(shift)).unwrap().value;
            prop_assert!((moved - st).abs() <= 1e-12 * st.max(1e-300) + 1e-13);
        }
    }
}
