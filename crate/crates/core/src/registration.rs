//! Rigid point-to-point ICP registering a template cloud onto a proposal.

use nalgebra::{Matrix3, Vector3, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kdtree::KdTree;
use crate::pointcloud::{subsample_uniform, Point, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    /// Rotation by `angle` radians about `axis` (need not be normalised).
    pub fn from_axis_angle(axis: [f64; 3], angle: f64, translation: [f64; 3]) -> Self {
        let axis = nalgebra::Unit::new_normalize(Vector3::from(axis));
        let r = nalgebra::Rotation3::from_axis_angle(&axis, angle);
        Self::from_parts(*r.matrix(), Vector3::from(translation))
    }

    pub(crate) fn from_parts(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        let mut rotation = [[0.0; 3]; 3];
        for (i, row) in rotation.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = r[(i, j)];
            }
        }
        Self {
            rotation,
            translation: [t[0], t[1], t[2]],
        }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    #[inline]
    pub fn apply(&self, p: &Point) -> Point {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let r = self.rotation_matrix() * other.rotation_matrix();
        let t = self.rotation_matrix() * Vector3::from(other.translation)
            + Vector3::from(self.translation);
        Self::from_parts(r, t)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation_matrix().transpose();
        let t = -(rt * Vector3::from(self.translation));
        Self::from_parts(rt, t)
    }

    /// Geodesic angle in radians between the two rotations.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let m = self.rotation_matrix().transpose() * other.rotation_matrix();
        ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    /// `max |RᵀR − I|` entry.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation_matrix();
        (r.transpose() * r - Matrix3::identity()).abs().max()
    }

    pub fn determinant(&self) -> f64 {
        self.rotation_matrix().determinant()
    }
}

/// Maps every point through `transform`. Provenance is dropped since the
/// registered cloud is treated as a constant target.
pub fn apply_transform(cloud: &PointCloud, transform: &RigidTransform) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|p| transform.apply(p)).collect(),
        provenance: None,
    }
}

/// Least-squares rigid transform taking `source[i]` onto `target[j]` for each
/// `(i, j)` in `pairs`.
pub fn kabsch(source: &[Point], target: &[Point], pairs: &[(usize, usize)]) -> Result<RigidTransform> {
    if pairs.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "need at least 3 correspondences, got {}",
            pairs.len()
        )));
    }
    let n = pairs.len() as f64;
    let mut cs = Vector3::zeros();
    let mut ct = Vector3::zeros();
    for &(i, j) in pairs {
        cs += Vector3::from(source[i]);
        ct += Vector3::from(target[j]);
    }
    cs /= n;
    ct /= n;

    let mut h = Matrix3::zeros();
    let mut scatter_s = Matrix3::zeros();
    let mut scatter_t = Matrix3::zeros();
    for &(i, j) in pairs {
        let s = Vector3::from(source[i]) - cs;
        let t = Vector3::from(target[j]) - ct;
        h += s * t.transpose();
        scatter_s += s * s.transpose();
        scatter_t += t * t.transpose();
    }
    for (name, m) in [("source", scatter_s), ("target", scatter_t)] {
        let sv = m.singular_values();
        let (hi, mid) = (sv.max(), {
            let mut v = [sv[0], sv[1], sv[2]];
            v.sort_by(|a, b| b.total_cmp(a));
            v[1]
        });
        if hi <= 0.0 || mid <= 1e-12 * hi {
            return Err(Error::DegenerateConfiguration(format!(
                "{name} correspondences are collinear or coincident"
            )));
        }
    }

    let svd = SVD::new(h, true, true);
    let u = svd.u.expect("svd u");
    let v = svd.v_t.expect("svd v_t").transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        // reflection repair: flip the direction of the smallest singular value
        let k = (0..3)
            .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
            .unwrap();
        d[(k, k)] = -1.0;
    }
    let r = v * d * u.transpose();
    let t = ct - r * cs;
    Ok(RigidTransform::from_parts(r, t))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop once the correspondence objective changes by less than this.
    pub convergence_eps: f64,
    pub sample_fraction: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            convergence_eps: 1e-6,
            sample_fraction: 0.2,
        }
    }
}

impl IcpParams {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::config("icp.max_iterations", "must be positive"));
        }
        if !(self.convergence_eps > 0.0) {
            return Err(Error::config("icp.convergence_eps", "must be positive"));
        }
        if !(self.sample_fraction > 0.0 && self.sample_fraction <= 1.0) {
            return Err(Error::config("icp.sample_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IcpOutcome {
    /// Maps template coordinates into proposal coordinates.
    pub transform: RigidTransform,
    /// Root-mean-square correspondence distance, one entry per evaluation.
    pub objective: Vec<f64>,
    /// Number of least-squares updates performed.
    pub iterations: usize,
    pub converged: bool,
}

/// Registers `template` onto `proposal`.
///
/// Both clouds are subsampled to `sample_fraction` with index draws from one
/// shared seed, then nearest-neighbour correspondence and [`kabsch`] alternate
/// until the RMS correspondence distance settles.
pub fn icp_register<R: Rng + ?Sized>(
    template: &PointCloud,
    proposal: &PointCloud,
    params: &IcpParams,
    rng: &mut R,
) -> Result<IcpOutcome> {
    params.validate()?;
    if template.is_empty() || proposal.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let seed: u64 = rng.random();
    let src = subsample_uniform(template, params.sample_fraction, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let dst = subsample_uniform(proposal, params.sample_fraction, &mut ChaCha8Rng::seed_from_u64(seed))?;
    if src.len() < 3 || dst.len() < 3 {
        return Err(Error::DegenerateConfiguration(format!(
            "{} template and {} proposal points after subsampling",
            src.len(),
            dst.len()
        )));
    }
    let tree = KdTree::new(&dst.points);

    let mut transform = RigidTransform::identity();
    let mut objective = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        let matches: Vec<(usize, f64)> = src
            .points
            .par_iter()
            .map(|p| {
                let n = tree.nearest(&transform.apply(p)).unwrap();
                (n.index, n.dist_sq)
            })
            .collect();
        let rms = (matches.iter().map(|m| m.1).sum::<f64>() / matches.len() as f64).sqrt();
        if let Some(&prev) = objective.last() {
            debug_assert!(
                rms <= prev + 1e-9 * prev + 1e-12,
                "ICP objective increased: {prev} -> {rms}"
            );
            objective.push(rms);
            if (prev - rms).abs() < params.convergence_eps {
                converged = true;
                break;
            }
        } else {
            objective.push(rms);
        }
        if iterations == params.max_iterations {
            break;
        }
        let pairs: Vec<(usize, usize)> = matches.iter().enumerate().map(|(i, m)| (i, m.0)).collect();
        transform = kabsch(&src.points, &dst.points, &pairs)?;
        iterations += 1;
    }
    Ok(IcpOutcome {
        transform,
        objective,
        iterations,
        converged,
    })
}
