//! Dense voxel grids, axis-aligned boxes, patches and per-voxel transforms.
//!
//! Grids are stored row-major in `(z, y, x)` order, so the linear index of a
//! voxel is `(z * H + y) * W + x` for dims `(S, H, W)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Dims = [usize; 3];

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Scalar,
    Probability,
    Binary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    dims: Dims,
    spacing: [f64; 3],
    data: Vec<f64>,
    kind: FieldKind,
}

#[inline]
pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

#[inline]
pub fn unravel(dims: Dims, idx: usize) -> [usize; 3] {
    let x = idx % dims[2];
    let y = (idx / dims[2]) % dims[1];
    let z = idx / (dims[1] * dims[2]);
    [z, y, x]
}

impl VoxelGrid {
    pub fn new(dims: Dims, spacing: [f64; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if data.len() != voxel_count(dims) {
            return Err(Error::InvalidGrid(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite value at index {i}")));
        }
        Ok(Self {
            dims,
            spacing,
            data,
            kind: FieldKind::Scalar,
        })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "dims must be positive");
        Self {
            dims,
            spacing: [1.0; 3],
            data: vec![value; voxel_count(dims)],
            kind: FieldKind::Scalar,
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(voxel_count(dims));
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self {
            dims,
            spacing: [1.0; 3],
            data,
            kind: FieldKind::Scalar,
        }
    }

    /// Tags the grid, checking the value range the tag promises.
    pub fn with_kind(mut self, kind: FieldKind) -> Result<Self> {
        match kind {
            FieldKind::Scalar => {}
            FieldKind::Probability => {
                if let Some(i) = self.data.iter().position(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::InvalidGrid(format!(
                        "probability field has value {} at index {i}",
                        self.data[i]
                    )));
                }
            }
            FieldKind::Binary => {
                if let Some(i) = self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidGrid(format!(
                        "binary mask has value {} at index {i}",
                        self.data[i]
                    )));
                }
            }
        }
        self.kind = kind;
        Ok(self)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        assert!(spacing.iter().all(|&s| s > 0.0), "spacing must be positive");
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn kind(&self) -> FieldKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        linear_index(self.dims, z, y, x)
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    /// Elementwise map producing an untagged grid with the same geometry.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f(v)).collect(),
            kind: FieldKind::Scalar,
        }
    }

    /// Same geometry, new values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.spacing, data)
    }

    /// Binary mask of voxels with value `>= threshold`.
    pub fn threshold(&self, threshold: f64) -> Self {
        Self {
            dims: self.dims,
            spacing: self.spacing,
            data: self
                .data
                .iter()
                .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
                .collect(),
            kind: FieldKind::Binary,
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Axis-aligned box in voxel indices, `lo` inclusive and `hi` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Box3 {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl Box3 {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        if (0..3).any(|a| lo[a] >= hi[a]) {
            return Err(Error::OutOfBounds(format!(
                "box lo {lo:?} must be below hi {hi:?}"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            lo: [0; 3],
            hi: dims,
        }
    }

    pub fn check_within(&self, dims: Dims) -> Result<()> {
        if (0..3).any(|a| self.lo[a] >= self.hi[a] || self.hi[a] > dims[a]) {
            return Err(Error::OutOfBounds(format!(
                "box {:?}..{:?} does not fit in dims {dims:?}",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z, y, x];
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    pub fn extent(&self) -> [usize; 3] {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn volume(&self) -> usize {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    /// Grows every face by `by` voxels, clipped to `dims`.
    pub fn dilate(&self, by: usize, dims: Dims) -> Self {
        let mut out = *self;
        for a in 0..3 {
            out.lo[a] = self.lo[a].saturating_sub(by);
            out.hi[a] = (self.hi[a] + by).min(dims[a]);
        }
        out
    }

    /// The part of this box inside `patch`, in patch-local coordinates.
    pub fn local_to(&self, patch: &PatchSpec) -> Option<Self> {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            let plo = patch.origin[a];
            let phi = patch.origin[a] + patch.dims[a];
            let l = self.lo[a].max(plo);
            let h = self.hi[a].min(phi);
            if l >= h {
                return None;
            }
            lo[a] = l - plo;
            hi[a] = h - plo;
        }
        Some(Self { lo, hi })
    }
}

/// A sub-block of a parent grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub origin: [usize; 3],
    pub dims: Dims,
    pub stride: [usize; 3],
}

impl PatchSpec {
    pub fn new(origin: [usize; 3], dims: Dims) -> Self {
        Self {
            origin,
            dims,
            stride: dims,
        }
    }

    pub fn whole(dims: Dims) -> Self {
        Self::new([0; 3], dims)
    }

    pub fn check_within(&self, parent: Dims) -> Result<()> {
        if (0..3).any(|a| self.dims[a] == 0 || self.origin[a] + self.dims[a] > parent[a]) {
            return Err(Error::OutOfBounds(format!(
                "patch at {:?} with dims {:?} exceeds grid {parent:?}",
                self.origin, self.dims
            )));
        }
        Ok(())
    }

    pub fn contains(&self, z: usize, y: usize, x: usize) -> bool {
        let p = [z, y, x];
        (0..3).all(|a| p[a] >= self.origin[a] && p[a] < self.origin[a] + self.dims[a])
    }

    /// Sliding-window tiling of `parent`; the last window on each axis is
    /// shifted back so it ends flush with the grid.
    pub fn tile(parent: Dims, dims: Dims, stride: [usize; 3]) -> Result<Vec<Self>> {
        if (0..3).any(|a| dims[a] == 0 || stride[a] == 0 || dims[a] > parent[a]) {
            return Err(Error::OutOfBounds(format!(
                "cannot tile {parent:?} with patches {dims:?} at stride {stride:?}"
            )));
        }
        let axis_origins = |a: usize| {
            let mut v: Vec<usize> = (0..)
                .map(|k| k * stride[a])
                .take_while(|&o| o + dims[a] < parent[a])
                .collect();
            v.push(parent[a] - dims[a]);
            v.dedup();
            v
        };
        let (oz, oy, ox) = (axis_origins(0), axis_origins(1), axis_origins(2));
        let mut out = Vec::with_capacity(oz.len() * oy.len() * ox.len());
        for &z in &oz {
            for &y in &oy {
                for &x in &ox {
                    out.push(Self {
                        origin: [z, y, x],
                        dims,
                        stride,
                    });
                }
            }
        }
        Ok(out)
    }

    /// Uniformly random valid origin for a patch of `dims` inside `parent`.
    pub fn random<R: Rng + ?Sized>(parent: Dims, dims: Dims, rng: &mut R) -> Result<Self> {
        let probe = Self::new([0; 3], dims);
        probe.check_within(parent)?;
        let origin = [
            rng.random_range(0..=parent[0] - dims[0]),
            rng.random_range(0..=parent[1] - dims[1]),
            rng.random_range(0..=parent[2] - dims[2]),
        ];
        Ok(Self::new(origin, dims))
    }
}

/// Tight bound of all nonzero voxels.
pub fn box_from_mask(mask: &VoxelGrid) -> Result<Box3> {
    let dims = mask.dims();
    let mut lo = dims;
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &v) in mask.data().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        any = true;
        let p = unravel(dims, i);
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a] + 1);
        }
    }
    if !any {
        return Err(Error::EmptyMask);
    }
    Ok(Box3 { lo, hi })
}

pub fn crop_patch(grid: &VoxelGrid, patch: &PatchSpec) -> Result<VoxelGrid> {
    patch.check_within(grid.dims())?;
    let [oz, oy, ox] = patch.origin;
    let [s, h, w] = patch.dims;
    let mut data = Vec::with_capacity(s * h * w);
    for z in 0..s {
        for y in 0..h {
            let start = grid.index(oz + z, oy + y, ox);
            data.extend_from_slice(&grid.data()[start..start + w]);
        }
    }
    Ok(VoxelGrid {
        dims: patch.dims,
        spacing: grid.spacing(),
        data,
        kind: grid.kind(),
    })
}

/// Writes `block` back into `grid` at the patch origin.
pub fn embed_patch(grid: &mut VoxelGrid, patch: &PatchSpec, block: &VoxelGrid) -> Result<()> {
    patch.check_within(grid.dims())?;
    if block.dims() != patch.dims {
        return Err(Error::DimensionMismatch(format!(
            "block {:?} vs patch {:?}",
            block.dims(),
            patch.dims
        )));
    }
    let [oz, oy, ox] = patch.origin;
    let [s, h, w] = patch.dims;
    let gdims = grid.dims();
    for z in 0..s {
        for y in 0..h {
            let dst = linear_index(gdims, oz + z, oy + y, ox);
            let src = block.index(z, y, 0);
            grid.data[dst..dst + w].copy_from_slice(&block.data()[src..src + w]);
        }
    }
    grid.kind = FieldKind::Scalar;
    Ok(())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_field(logits: &VoxelGrid) -> VoxelGrid {
    let mut out = logits.map(sigmoid);
    out.kind = FieldKind::Probability;
    out
}

/// Outcome of a two-class Gumbel-Softmax draw over a probability field.
///
/// `sample` holds the forward values (hard or soft), `soft` the relaxed
/// foreground coordinate and `dsoft_dprob` its derivative with respect to the
/// input probability. Hard samples reuse the soft derivative (straight-through).
#[derive(Clone, Debug)]
pub struct GumbelSample {
    pub sample: VoxelGrid,
    pub soft: Vec<f64>,
    pub dsoft_dprob: Vec<f64>,
    pub hard: bool,
}

impl GumbelSample {
    /// Chains an upstream gradient on the sample back to the probabilities.
    pub fn backprop(&self, upstream: &[f64]) -> Vec<f64> {
        assert_eq!(upstream.len(), self.dsoft_dprob.len());
        upstream
            .iter()
            .zip(&self.dsoft_dprob)
            .map(|(g, d)| g * d)
            .collect()
    }
}

/// Standard Gumbel variate.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let mut u: f64 = rng.random();
    if u <= 0.0 {
        u = f64::MIN_POSITIVE;
    }
    -(-u.ln()).ln()
}

pub fn gumbel_binarize<R: Rng + ?Sized>(
    probs: &VoxelGrid,
    temperature: f64,
    hard: bool,
    rng: &mut R,
) -> Result<GumbelSample> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidTemperature(temperature));
    }
    let n = probs.len();
    let mut soft = Vec::with_capacity(n);
    let mut dsoft = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for &p_raw in probs.data() {
        let g1 = gumbel(rng);
        let g0 = gumbel(rng);
        let p = p_raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let fg = (p.ln() + g1) / temperature;
        let bg = ((1.0 - p).ln() + g0) / temperature;
        let y = sigmoid(fg - bg);
        let d = if p_raw > PROB_EPS && p_raw < 1.0 - PROB_EPS {
            y * (1.0 - y) / temperature * (1.0 / p + 1.0 / (1.0 - p))
        } else {
            0.0
        };
        soft.push(y);
        dsoft.push(d);
        out.push(if hard {
            if y >= 0.5 {
                1.0
            } else {
                0.0
            }
        } else {
            y
        });
    }
    let kind = if hard {
        FieldKind::Binary
    } else {
        FieldKind::Probability
    };
    Ok(GumbelSample {
        sample: VoxelGrid {
            dims: probs.dims(),
            spacing: probs.spacing(),
            data: out,
            kind,
        },
        soft,
        dsoft_dprob: dsoft,
        hard,
    })
}
