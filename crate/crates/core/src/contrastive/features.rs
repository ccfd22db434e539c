use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{unravel, voxel_count, Dims, VoxelGrid};

/// Per-voxel feature vectors, voxel-major (`data[v * channels + c]`).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub dims: Dims,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureField {
    pub fn new(dims: Dims, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::DimensionMismatch("feature field needs at least one channel".into()));
        }
        if data.len() != voxel_count(dims) * channels {
            return Err(Error::DimensionMismatch(format!(
                "{} values for dims {dims:?} with {channels} channels",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("non-finite feature".into()));
        }
        Ok(Self { dims, channels, data })
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    #[inline]
    pub fn voxel(&self, v: usize) -> &[f64] {
        &self.data[v * self.channels..(v + 1) * self.channels]
    }

    /// Features of a sub-block, same channel layout.
    pub fn crop(&self, patch: &crate::volume::PatchSpec) -> Result<Self> {
        patch.check_within(self.dims)?;
        let mut data = Vec::with_capacity(voxel_count(patch.dims) * self.channels);
        for z in 0..patch.dims[0] {
            for y in 0..patch.dims[1] {
                for x in 0..patch.dims[2] {
                    let v = crate::volume::linear_index(
                        self.dims,
                        patch.origin[0] + z,
                        patch.origin[1] + y,
                        patch.origin[2] + x,
                    );
                    data.extend_from_slice(self.voxel(v));
                }
            }
        }
        Self::new(patch.dims, self.channels, data)
    }
}

pub const HAND_CRAFTED_CHANNELS: usize = 6;

/// Intensity, 3×3×3 local mean and variance, and normalised coordinates,
/// each channel standardised to zero mean and unit variance.
pub fn hand_crafted_features(image: &VoxelGrid) -> FeatureField {
    let dims = image.dims();
    let n = voxel_count(dims);
    let mut data = vec![0.0; n * HAND_CRAFTED_CHANNELS];
    let coord = |i: usize, d: usize| {
        if d > 1 {
            2.0 * i as f64 / (d - 1) as f64 - 1.0
        } else {
            0.0
        }
    };
    for v in 0..n {
        let [z, y, x] = unravel(dims, v);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0.0;
        for nz in z.saturating_sub(1)..=(z + 1).min(dims[0] - 1) {
            for ny in y.saturating_sub(1)..=(y + 1).min(dims[1] - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(dims[2] - 1) {
                    let val = image.get(nz, ny, nx);
                    sum += val;
                    sum_sq += val * val;
                    count += 1.0;
                }
            }
        }
        let mean = sum / count;
        let f = &mut data[v * HAND_CRAFTED_CHANNELS..(v + 1) * HAND_CRAFTED_CHANNELS];
        f[0] = image.data()[v];
        f[1] = mean;
        f[2] = (sum_sq / count - mean * mean).max(0.0);
        f[3] = coord(z, dims[0]);
        f[4] = coord(y, dims[1]);
        f[5] = coord(x, dims[2]);
    }
    for c in 0..HAND_CRAFTED_CHANNELS {
        let mean = (0..n).map(|v| data[v * HAND_CRAFTED_CHANNELS + c]).sum::<f64>() / n as f64;
        let var = (0..n)
            .map(|v| (data[v * HAND_CRAFTED_CHANNELS + c] - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let scale = if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 };
        for v in 0..n {
            let e = &mut data[v * HAND_CRAFTED_CHANNELS + c];
            *e = (*e - mean) * scale;
        }
    }
    FeatureField {
        dims,
        channels: HAND_CRAFTED_CHANNELS,
        data,
    }
}

/// Organ voxels get `+mu`, background `-mu`, plus isotropic Gaussian noise.
pub fn separable_features<R: Rng + ?Sized>(
    mask: &VoxelGrid,
    mu: &[f64],
    noise_sigma: f64,
    rng: &mut R,
) -> Result<FeatureField> {
    let noise = Normal::new(0.0, noise_sigma.max(0.0))
        .map_err(|e| Error::config("noise_sigma", e.to_string()))?;
    let mut data = Vec::with_capacity(mask.len() * mu.len());
    for &m in mask.data() {
        let sign = if m != 0.0 { 1.0 } else { -1.0 };
        for &c in mu {
            data.push(sign * c + noise.sample(rng));
        }
    }
    FeatureField::new(mask.dims(), mu.len(), data)
}
