use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::FeatureField;
use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims};

const ZERO_NORM: f64 = 1e-12;

/// Two-layer pointwise network `normalize(W2ᵀ relu(W1ᵀ f + b1) + b2)`.
///
/// `w1` is `in_dim × hidden` and `w2` is `hidden × out_dim`, both row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "HeadParamsJson", try_from = "HeadParamsJson")]
pub struct HeadParams {
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct HeadParamsJson {
    layer1: LayerJson,
    layer2: LayerJson,
}

impl From<HeadParams> for HeadParamsJson {
    fn from(p: HeadParams) -> Self {
        HeadParamsJson {
            layer1: LayerJson {
                weight: p.w1.chunks(p.hidden).map(|r| r.to_vec()).collect(),
                bias: p.b1,
            },
            layer2: LayerJson {
                weight: p.w2.chunks(p.out_dim).map(|r| r.to_vec()).collect(),
                bias: p.b2,
            },
        }
    }
}

impl TryFrom<HeadParamsJson> for HeadParams {
    type Error = String;

    fn try_from(j: HeadParamsJson) -> std::result::Result<Self, String> {
        let in_dim = j.layer1.weight.len();
        let hidden = j.layer1.bias.len();
        let out_dim = j.layer2.bias.len();
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err("empty layer".into());
        }
        if j.layer1.weight.iter().any(|r| r.len() != hidden) {
            return Err("layer1 rows must match layer1 bias length".into());
        }
        if j.layer2.weight.len() != hidden || j.layer2.weight.iter().any(|r| r.len() != out_dim) {
            return Err("layer2 weight must be hidden × out_dim".into());
        }
        Ok(HeadParams {
            in_dim,
            hidden,
            out_dim,
            w1: j.layer1.weight.concat(),
            b1: j.layer1.bias,
            w2: j.layer2.weight.concat(),
            b2: j.layer2.bias,
        })
    }
}

/// Gradient buffers with the same layout as [`HeadParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrad {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl HeadParams {
    pub fn zeros(in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            hidden,
            out_dim,
            w1: vec![0.0; in_dim * hidden],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * out_dim],
            b2: vec![0.0; out_dim],
        }
    }

    /// Symmetric uniform init with bound `sqrt(6 / (fan_in + fan_out))`; biases zero.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(in_dim, hidden, out_dim);
        let a1 = (6.0 / (in_dim + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + out_dim) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..=a1));
        p.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..=a2));
        p
    }

    fn zero_grad(&self) -> HeadGrad {
        HeadGrad {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.b1.len()],
            w2: vec![0.0; self.w2.len()],
            b2: vec![0.0; self.b2.len()],
        }
    }

    /// Hidden pre-activations and the unnormalised output for one voxel.
    fn forward_raw(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut pre = self.b1.clone();
        for (i, &fi) in f.iter().enumerate() {
            let row = &self.w1[i * self.hidden..(i + 1) * self.hidden];
            for (p, w) in pre.iter_mut().zip(row) {
                *p += fi * w;
            }
        }
        let mut out = self.b2.clone();
        for (j, &pj) in pre.iter().enumerate() {
            let h = pj.max(0.0);
            if h == 0.0 {
                continue;
            }
            let row = &self.w2[j * self.out_dim..(j + 1) * self.out_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += h * w;
            }
        }
        (pre, out)
    }

    /// Accumulates the parameter gradient for `voxels` given `upstream`, the
    /// loss gradient with respect to each voxel's normalised embedding
    /// (`upstream[k]` belongs to `voxels[k]`, `out_dim` entries each).
    pub fn backward(&self, features: &FeatureField, voxels: &[usize], upstream: &[f64]) -> Result<HeadGrad> {
        if features.channels != self.in_dim {
            return Err(Error::DimensionMismatch(format!(
                "features have {} channels, head expects {}",
                features.channels, self.in_dim
            )));
        }
        assert_eq!(upstream.len(), voxels.len() * self.out_dim);
        let mut grad = self.zero_grad();
        for (k, &v) in voxels.iter().enumerate() {
            let g = &upstream[k * self.out_dim..(k + 1) * self.out_dim];
            let f = features.voxel(v);
            let (pre, raw) = self.forward_raw(f);
            let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < ZERO_NORM {
                continue;
            }
            // d/du of u/|u| applied to g: (g - e (e·g)) / |u|
            let e: Vec<f64> = raw.iter().map(|x| x / norm).collect();
            let eg: f64 = e.iter().zip(g).map(|(a, b)| a * b).sum();
            let du: Vec<f64> = g.iter().zip(&e).map(|(gi, ei)| (gi - ei * eg) / norm).collect();
            for (b, d) in grad.b2.iter_mut().zip(&du) {
                *b += d;
            }
            for j in 0..self.hidden {
                if pre[j] <= 0.0 {
                    continue;
                }
                let row = &self.w2[j * self.out_dim..(j + 1) * self.out_dim];
                let grow = &mut grad.w2[j * self.out_dim..(j + 1) * self.out_dim];
                let mut dh = 0.0;
                for o in 0..self.out_dim {
                    grow[o] += pre[j] * du[o];
                    dh += row[o] * du[o];
                }
                grad.b1[j] += dh;
                for (i, &fi) in f.iter().enumerate() {
                    grad.w1[i * self.hidden + j] += fi * dh;
                }
            }
        }
        Ok(grad)
    }

    /// Normalised embeddings for a subset of voxels, `out_dim` entries each.
    pub fn embed_voxels(&self, features: &FeatureField, voxels: &[usize]) -> Vec<f64> {
        let d = self.out_dim;
        let mut out = vec![0.0; voxels.len() * d];
        out.par_chunks_mut(d).zip(voxels).for_each(|(o, &v)| {
            self.write_embedding(features.voxel(v), o);
        });
        out
    }

    /// Writes the unit embedding of `f` into `out`; returns false when the
    /// raw output vanished and the basis vector was substituted.
    fn write_embedding(&self, f: &[f64], out: &mut [f64]) -> bool {
        let (_, raw) = self.forward_raw(f);
        let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < ZERO_NORM {
            out.fill(0.0);
            out[0] = 1.0;
            false
        } else {
            for (o, r) in out.iter_mut().zip(&raw) {
                *o = r / norm;
            }
            true
        }
    }

    pub fn step(&mut self, grad: &HeadGrad, lr: f64) {
        let upd = |p: &mut [f64], g: &[f64]| p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
        upd(&mut self.w1, &grad.w1);
        upd(&mut self.b1, &grad.b1);
        upd(&mut self.w2, &grad.w2);
        upd(&mut self.b2, &grad.b2);
    }
}

/// Adam moment estimates for [`HeadParams`].
#[derive(Clone, Debug)]
pub struct Adam {
    m: HeadGrad,
    v: HeadGrad,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(params: &HeadParams) -> Self {
        Self {
            m: params.zero_grad(),
            v: params.zero_grad(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut HeadParams, grad: &HeadGrad, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let upd = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for i in 0..p.len() {
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g[i];
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        };
        upd(&mut params.w1, &grad.w1, &mut self.m.w1, &mut self.v.w1);
        upd(&mut params.b1, &grad.b1, &mut self.m.b1, &mut self.v.b1);
        upd(&mut params.w2, &grad.w2, &mut self.m.w2, &mut self.v.w2);
        upd(&mut params.b2, &grad.b2, &mut self.m.b2, &mut self.v.b2);
    }
}

/// Unit-norm per-voxel embeddings, voxel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingField {
    pub dims: Dims,
    pub dim: usize,
    pub data: Vec<f64>,
    /// Voxels whose raw output had (near) zero norm and were assigned the
    /// first basis vector instead.
    pub zero_vectors: Vec<usize>,
}

impl EmbeddingField {
    pub fn new(dims: Dims, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != voxel_count(dims) * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for dims {dims:?} and embedding dim {dim}",
                data.len()
            )));
        }
        Ok(Self {
            dims,
            dim,
            data,
            zero_vectors: Vec::new(),
        })
    }

    /// Every voxel mapped to the same vector.
    pub fn constant(dims: Dims, vector: &[f64]) -> Self {
        let n = voxel_count(dims);
        Self {
            dims,
            dim: vector.len(),
            data: vector.repeat(n),
            zero_vectors: Vec::new(),
        }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    #[inline]
    pub fn vector(&self, v: usize) -> &[f64] {
        &self.data[v * self.dim..(v + 1) * self.dim]
    }

    pub fn crop(&self, patch: &crate::volume::PatchSpec) -> Result<Self> {
        patch.check_within(self.dims)?;
        let mut data = Vec::with_capacity(voxel_count(patch.dims) * self.dim);
        for z in 0..patch.dims[0] {
            for y in 0..patch.dims[1] {
                for x in 0..patch.dims[2] {
                    let v = crate::volume::linear_index(
                        self.dims,
                        patch.origin[0] + z,
                        patch.origin[1] + y,
                        patch.origin[2] + x,
                    );
                    data.extend_from_slice(self.vector(v));
                }
            }
        }
        Self::new(patch.dims, self.dim, data)
    }
}

pub fn embed(features: &FeatureField, params: &HeadParams) -> Result<EmbeddingField> {
    if features.channels != params.in_dim {
        return Err(Error::DimensionMismatch(format!(
            "features have {} channels, head expects {}",
            features.channels, params.in_dim
        )));
    }
    let d = params.out_dim;
    let mut data = vec![0.0; features.voxels() * d];
    let zero: Vec<usize> = data
        .par_chunks_mut(d)
        .enumerate()
        .filter_map(|(v, out)| (!params.write_embedding(features.voxel(v), out)).then_some(v))
        .collect();
    if !zero.is_empty() {
        log::warn!("{} voxels embedded to a zero vector; using a fixed basis vector", zero.len());
    }
    Ok(EmbeddingField {
        dims: features.dims,
        dim: d,
        data,
        zero_vectors: zero,
    })
}
