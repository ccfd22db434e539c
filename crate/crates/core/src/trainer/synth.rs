use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::{gridding_reverse, PointCloud};
use crate::registration::RigidTransform;
use crate::volume::{box_from_mask, Box3, Dims, FieldKind, VoxelGrid};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    Sphere,
    #[default]
    HollowSphere,
    TwoLobes,
}

impl std::str::FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(Self::Sphere),
            "hollow_sphere" => Ok(Self::HollowSphere),
            "two_lobes" => Ok(Self::TwoLobes),
            _ => Err(Error::config("dataset.kind", format!("unknown shape {s:?}"))),
        }
    }
}

/// Outer radius as a fraction of the smallest grid extent.
pub const OUTER_RADIUS_FRACTION: f64 = 0.3;
/// Cavity radius as a fraction of the outer radius.
pub const INNER_RADIUS_FRACTION: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub kind: SynthKind,
    pub dims: Dims,
    pub noise_sigma: f64,
    pub contrast: f64,
    /// Bounds of the random rigid perturbation applied to the template.
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    /// Build the template from the shape with any cavity filled in.
    pub filled_template: bool,
    pub template_threshold: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            kind: SynthKind::HollowSphere,
            dims: [48, 48, 48],
            noise_sigma: 0.3,
            contrast: 1.0,
            max_rotation_deg: 10.0,
            max_translation: 1.5,
            filled_template: false,
            template_threshold: 0.125,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::config("dataset.dims", "every extent must be at least 16"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config("dataset.noise_sigma", "must be nonnegative"));
        }
        if !self.contrast.is_finite() {
            return Err(Error::config("dataset.contrast", "must be finite"));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_translation >= 0.0) {
            return Err(Error::config("dataset.max_rotation_deg", "perturbation bounds must be nonnegative"));
        }
        if !(self.template_threshold > 0.0 && self.template_threshold < 1.0) {
            return Err(Error::config("dataset.template_threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthCase {
    pub image: VoxelGrid,
    pub gt_mask: VoxelGrid,
    pub region: Box3,
    pub template: PointCloud,
    /// Maps ground-truth coordinates onto the template.
    pub template_transform: RigidTransform,
}

/// Analytic indicator of a shape, evaluated at `(z, y, x)`.
#[derive(Clone, Copy, Debug)]
struct Shape {
    kind: SynthKind,
    centre: [f64; 3],
    r_out: f64,
    r_in: f64,
    filled: bool,
}

impl Shape {
    fn new(kind: SynthKind, dims: Dims, filled: bool) -> Self {
        let m = *dims.iter().min().unwrap() as f64;
        let r_out = OUTER_RADIUS_FRACTION * m;
        Self {
            kind,
            centre: std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0),
            r_out,
            r_in: INNER_RADIUS_FRACTION * r_out,
            filled,
        }
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        let d = [p[0] - self.centre[0], p[1] - self.centre[1], p[2] - self.centre[2]];
        let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        match self.kind {
            SynthKind::Sphere => r2 <= self.r_out * self.r_out,
            SynthKind::HollowSphere => r2 <= self.r_out * self.r_out && (self.filled || r2 > self.r_in * self.r_in),
            SynthKind::TwoLobes => {
                // two ellipsoids side by side along x, just overlapping
                let a = 0.55 * self.r_out;
                let b = 0.7 * self.r_out;
                [-0.95 * a, 0.95 * a].iter().any(|&off| {
                    let dx = d[2] - off;
                    (d[0] / b).powi(2) + (d[1] / b).powi(2) + (dx / a).powi(2) <= 1.0
                })
            }
        }
    }

    fn rasterize(&self, dims: Dims, to_shape: impl Fn([f64; 3]) -> [f64; 3]) -> VoxelGrid {
        VoxelGrid::from_fn(dims, |z, y, x| self.inside(to_shape([z as f64, y as f64, x as f64])) as u8 as f64)
    }
}

/// Rotation by at most `max_deg` about the shape centre plus a translation of
/// at most `max_t` per axis, in point coordinates.
fn random_perturbation<R: Rng + ?Sized>(centre_zyx: [f64; 3], max_deg: f64, max_t: f64, rng: &mut R) -> RigidTransform {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..=max_deg.max(0.0)).to_radians();
    let t: [f64; 3] = std::array::from_fn(|_| if max_t > 0.0 { rng.random_range(-max_t..=max_t) } else { 0.0 });
    let c = [centre_zyx[2], centre_zyx[1], centre_zyx[0]];
    let rot = RigidTransform::from_axis_angle(axis, angle, [0.0; 3]);
    let rc = rot.apply(&c);
    RigidTransform::from_axis_angle(axis, angle, [c[0] - rc[0] + t[0], c[1] - rc[1] + t[1], c[2] - rc[2] + t[2]])
}

/// Synthetic volume with a known shape, its box and a perturbed template.
pub fn synth_volume<R: Rng + ?Sized>(params: &SynthParams, rng: &mut R) -> Result<SynthCase> {
    params.validate()?;
    let dims = params.dims;
    let shape = Shape::new(params.kind, dims, false);
    let gt_mask = shape.rasterize(dims, |p| p).with_kind(FieldKind::Binary)?;
    let region = box_from_mask(&gt_mask)?;

    let transform = random_perturbation(shape.centre, params.max_rotation_deg, params.max_translation, rng);
    let back = transform.inverse();
    let template_shape = Shape {
        filled: params.filled_template,
        ..shape
    };
    let template_mask = template_shape.rasterize(dims, |[z, y, x]| {
        let q = back.apply(&[x, y, z]);
        [q[2], q[1], q[0]]
    });
    let mut template = gridding_reverse(&template_mask, params.template_threshold);
    template.provenance = None;
    if template.is_empty() {
        return Err(Error::EmptyCloud);
    }

    let noise = Normal::new(0.0, params.noise_sigma).map_err(|e| Error::config("dataset.noise_sigma", e.to_string()))?;
    let image_data: Vec<f64> = gt_mask
        .data()
        .iter()
        .map(|&m| {
            let n = if params.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            params.contrast * m + n
        })
        .collect();
    let image = VoxelGrid::new(dims, [1.0; 3], image_data)?;
    Ok(SynthCase {
        image,
        gt_mask,
        region,
        template,
        template_transform: transform,
    })
}
