use rand::Rng;
use rayon::prelude::*;

use super::head::EmbeddingField;
use super::labels::LabelField;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct InfoNceResult {
    pub value: f64,
    /// Sampled anchor voxels, ascending.
    pub anchors: Vec<usize>,
    /// Gradient with respect to each anchor's embedding, `dim` entries each.
    pub grad: Vec<f64>,
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    m + values.map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Contrastive loss over an explicit set of vectors (`dim` entries each).
///
/// For each anchor `a`, positives are all set members sharing its label
/// (including `a`) and negatives all others:
/// `L = -(1/n) Σ_a (1/|P(a)|) log(Σ_P exp(s/τ) / Σ_N exp(s/τ))`.
pub fn info_nce_set(vectors: &[f64], dim: usize, labels: &[bool], tau: f64) -> Result<(f64, Vec<f64>)> {
    let n = labels.len();
    assert_eq!(vectors.len(), n * dim);
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 || n_pos == n {
        return Err(Error::SingleClass);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidTemperature(tau));
    }
    let vec = |i: usize| &vectors[i * dim..(i + 1) * dim];
    let dot = |a: usize, b: usize| vec(a).iter().zip(vec(b)).map(|(x, y)| x * y).sum::<f64>();

    // per anchor: loss term and the row of dL/ds_ab
    let rows: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|a| {
            let logits: Vec<f64> = (0..n).map(|b| dot(a, b) / tau).collect();
            let same = |b: &usize| labels[*b] == labels[a];
            let pos = (0..n).filter(same);
            let neg = (0..n).filter(|b| !same(b));
            let size_p = pos.clone().count() as f64;
            let lse_p = log_sum_exp(pos.map(|b| logits[b]));
            let lse_n = log_sum_exp(neg.map(|b| logits[b]));
            let loss = -(lse_p - lse_n) / size_p;
            let scale = 1.0 / (n as f64 * size_p * tau);
            let row = (0..n)
                .map(|b| {
                    if labels[b] == labels[a] {
                        -scale * (logits[b] - lse_p).exp()
                    } else {
                        scale * (logits[b] - lse_n).exp()
                    }
                })
                .collect();
            (loss, row)
        })
        .collect();

    let value = rows.iter().map(|r| r.0).sum::<f64>() / n as f64;
    // dL/de_a = Σ_b (G_ab + G_ba) e_b
    let grad: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|a| {
            let mut g = vec![0.0; dim];
            for b in 0..n {
                let w = rows[a].1[b] + rows[b].1[a];
                if w != 0.0 {
                    for (gi, vi) in g.iter_mut().zip(vec(b)) {
                        *gi += w * vi;
                    }
                }
            }
            g
        })
        .collect();
    Ok((value, grad))
}

/// `sample_size` distinct voxel indices in ascending order, or all of them
/// when the grid is smaller.
pub fn sample_anchors<R: Rng + ?Sized>(total: usize, sample_size: usize, rng: &mut R) -> Vec<usize> {
    if sample_size >= total {
        (0..total).collect()
    } else {
        let mut a = rand::seq::index::sample(rng, total, sample_size).into_vec();
        a.sort_unstable();
        a
    }
}

/// Samples `sample_size` anchors uniformly without replacement (all voxels
/// when the grid is smaller) and evaluates [`info_nce_set`] on them.
pub fn info_nce_loss<R: Rng + ?Sized>(
    embeddings: &EmbeddingField,
    labels: &LabelField,
    tau_temp: f64,
    sample_size: usize,
    rng: &mut R,
) -> Result<InfoNceResult> {
    if labels.dims != embeddings.dims {
        return Err(Error::DimensionMismatch(format!(
            "labels {:?} vs embeddings {:?}",
            labels.dims, embeddings.dims
        )));
    }
    let anchors = sample_anchors(embeddings.voxels(), sample_size, rng);
    let d = embeddings.dim;
    let mut vectors = Vec::with_capacity(anchors.len() * d);
    for &a in &anchors {
        vectors.extend_from_slice(embeddings.vector(a));
    }
    let set_labels: Vec<bool> = anchors.iter().map(|&a| labels.positive[a]).collect();
    let (value, grad) = info_nce_set(&vectors, d, &set_labels, tau_temp)?;
    Ok(InfoNceResult { value, anchors, grad })
}
