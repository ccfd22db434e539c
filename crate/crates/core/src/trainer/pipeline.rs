use serde::{Deserialize, Serialize};

use super::loss::{LossConfig, MaskLossInputs};
use super::nms::patch_nms;
use super::optimize::{derive_seed, optimize_mask, stream_rng, LossTrace};
use crate::contrastive::{embed, hand_crafted_features, pretrain_head, HeadParams, PretrainConfig};
use crate::error::{Error, Result};
use crate::pairwise::{build_edge_graph, EdgeGraph};
use crate::pointcloud::PointCloud;
use crate::registration::RigidTransform;
use crate::volume::{sigmoid_field, Box3, Dims, FieldKind, PatchSpec, VoxelGrid};

/// Random streams of the run seed, one per consumer.
pub(crate) mod streams {
    pub const DATASET: u64 = 1;
    pub const PRETRAIN: u64 = 2;
    /// Patch `k` optimises with seed stream `PATCH_BASE + k`.
    pub const PATCH_BASE: u64 = 1 << 32;
}

/// How the volume is cut into optimisation windows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchConfig {
    /// Window size; the whole volume when absent.
    pub dims: Option<Dims>,
    /// Window step; equal to `dims` when absent.
    pub stride: Option<Dims>,
}

impl PatchConfig {
    pub fn plan(&self, full: Dims) -> Result<Vec<PatchSpec>> {
        match self.dims {
            None => Ok(vec![PatchSpec::whole(full)]),
            Some(d) => PatchSpec::tile(full, d, self.stride.unwrap_or(d)).map_err(|e| match e {
                Error::OutOfBounds(msg) => Error::config("patch.dims", msg),
                other => other,
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PatchResult {
    pub spec: PatchSpec,
    pub trace: LossTrace,
    pub transform: Option<RigidTransform>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub head: HeadParams,
    pub pretrain_trace: Vec<f64>,
    /// Assembled foreground probabilities over the full volume.
    pub probs: VoxelGrid,
    pub patches: Vec<PatchResult>,
}

impl TrainOutcome {
    /// Final segmentation: foreground where `p ≥ 0.5`.
    pub fn mask(&self) -> VoxelGrid {
        binarize(&self.probs)
    }
}

pub fn binarize(probs: &VoxelGrid) -> VoxelGrid {
    probs
        .threshold(0.5)
        .with_kind(FieldKind::Binary)
        .expect("thresholded values are binary")
}

/// Graph whose edge set is the box dilated by `dilation`, seen from `patch`.
fn patch_graph(patch: &PatchSpec, region: &Box3, full: Dims, cfg: &LossConfig) -> Result<EdgeGraph> {
    match region.dilate(cfg.box_dilation, full).local_to(patch) {
        Some(local) => build_edge_graph(patch.dims, cfg.neighborhood, Some(&local), 0),
        None => Ok(EdgeGraph::empty(patch.dims, cfg.neighborhood)),
    }
}

/// Pre-trains the contrastive head on the whole volume, then optimises each
/// patch's logits against the box, template and pairwise terms and merges
/// the patches.
pub fn train_volume(
    image: &VoxelGrid,
    region: &Box3,
    template: &PointCloud,
    contrastive: &PretrainConfig,
    loss: &LossConfig,
    patching: &PatchConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    loss.validate()?;
    let full = image.dims();
    region.check_within(full)?;
    if template.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let features = hand_crafted_features(image);
    let pre = pretrain_head(&features, region, contrastive, &mut stream_rng(seed, streams::PRETRAIN))?;
    let embeddings = embed(&features, &pre.params)?;

    let mut results = Vec::new();
    let mut assembled = Vec::new();
    for (k, spec) in patching.plan(full)?.into_iter().enumerate() {
        let graph = patch_graph(&spec, region, full, loss)?;
        let emb = embeddings.crop(&spec)?;
        let o = spec.origin;
        let local_template = template.translated([-(o[2] as f64), -(o[1] as f64), -(o[0] as f64)]);
        let inputs = MaskLossInputs {
            template: &local_template,
            embeddings: &emb,
            graph: &graph,
            region: region.local_to(&spec),
        };
        let cfg = LossConfig {
            seed: derive_seed(seed, streams::PATCH_BASE + k as u64),
            ..loss.clone()
        };
        let local = inputs.region;
        let init = VoxelGrid::from_fn(spec.dims, |z, y, x| {
            if local.is_some_and(|r| r.contains(z, y, x)) {
                loss.init_inside
            } else {
                loss.init_outside
            }
        })
        .with_spacing(image.spacing());
        let out = optimize_mask(&init, &inputs, &cfg)?;
        assembled.push((spec, sigmoid_field(&out.logits)));
        results.push(PatchResult {
            spec,
            trace: out.trace,
            transform: out.transform,
        });
    }
    let probs = patch_nms(&assembled, full)?;
    let mut pretrain_trace = pre.coarse_trace;
    pretrain_trace.extend(pre.refine_trace);
    Ok(TrainOutcome {
        head: pre.params,
        pretrain_trace,
        probs,
        patches: results,
    })
}
