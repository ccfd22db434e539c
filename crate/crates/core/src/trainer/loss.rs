use std::hash::{DefaultHasher, Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::boxloss::projection_loss;
use super::gate::completeness_gate;
use crate::contrastive::EmbeddingField;
use crate::error::{Error, Result};
use crate::pairwise::{pairwise_loss, EdgeGraph, Neighborhood};
use crate::pointcloud::{chamfer_grad_to_grid, chamfer_with, gridding_reverse, ChamferMetric, PointCloud};
use crate::registration::{apply_transform, icp_register, IcpParams, RigidTransform};
use crate::volume::{gumbel_binarize, sigmoid_field, Box3, VoxelGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub ori: f64,
    pub geo: f64,
    pub cons: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ori: 1.0,
            geo: 1.0,
            cons: 1.0,
        }
    }
}

impl std::str::FromStr for LossWeights {
    type Err = Error;

    /// Parses `ori,geo,cons`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let bad = || Error::config("weights", format!("expected three comma-separated numbers, got {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let v: Vec<f64> = parts.iter().map(|p| p.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        Ok(Self {
            ori: v[0],
            geo: v[1],
            cons: v[2],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub gumbel_temperature: f64,
    /// Straight-through hard samples; soft samples otherwise.
    pub gumbel_hard: bool,
    pub gridding_threshold: f64,
    pub icp: IcpParams,
    /// Re-register every this many optimisation steps.
    pub icp_every: usize,
    pub tau_sim: f64,
    pub prob_floor: f64,
    pub completeness_threshold: f64,
    pub completeness_margin: usize,
    /// When off, the geometric term runs on every patch.
    pub completeness_gate: bool,
    pub neighborhood: Neighborhood,
    /// Growth of the box, per face, that bounds the pairwise edge set.
    pub box_dilation: usize,
    pub chamfer_metric: ChamferMetric,
    pub steps: usize,
    pub lr: f64,
    /// Starting logits inside and outside the box.
    pub init_inside: f64,
    pub init_outside: f64,
    /// Set from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            gumbel_temperature: 1.0,
            gumbel_hard: true,
            gridding_threshold: 0.125,
            icp: IcpParams::default(),
            icp_every: 1,
            tau_sim: 0.6,
            prob_floor: 1e-6,
            completeness_threshold: 0.6,
            completeness_margin: 2,
            completeness_gate: true,
            neighborhood: Neighborhood::Six,
            box_dilation: 2,
            chamfer_metric: ChamferMetric::Euclidean,
            steps: 150,
            lr: 5000.0,
            init_inside: 0.0,
            init_outside: -4.0,
            seed: 0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, w) in [
            ("loss.weights.ori", self.weights.ori),
            ("loss.weights.geo", self.weights.geo),
            ("loss.weights.cons", self.weights.cons),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(key, "must be a nonnegative number"));
            }
        }
        for (key, t) in [
            ("loss.gridding_threshold", self.gridding_threshold),
            ("loss.completeness_threshold", self.completeness_threshold),
            ("loss.prob_floor", self.prob_floor),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::config(key, "must lie in (0, 1)"));
            }
        }
        if !(self.gumbel_temperature > 0.0 && self.gumbel_temperature.is_finite()) {
            return Err(Error::config("loss.gumbel_temperature", "must be positive"));
        }
        if !(-1.0..=1.0).contains(&self.tau_sim) {
            return Err(Error::config("loss.tau_sim", "must lie in [-1, 1]"));
        }
        if self.icp_every == 0 {
            return Err(Error::config("loss.icp_every", "must be positive"));
        }
        if !self.init_inside.is_finite() {
            return Err(Error::config("loss.init_inside", "must be finite"));
        }
        if !self.init_outside.is_finite() {
            return Err(Error::config("loss.init_outside", "must be finite"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("loss.lr", "must be positive"));
        }
        self.icp.validate().map_err(|e| match e {
            Error::InvalidConfig { key, reason } => Error::config(format!("loss.{key}"), reason),
            other => other,
        })
    }
}

/// Everything `mask_loss` needs besides the logits, in patch coordinates.
#[derive(Clone, Copy, Debug)]
pub struct MaskLossInputs<'a> {
    pub template: &'a PointCloud,
    pub embeddings: &'a EmbeddingField,
    pub graph: &'a EdgeGraph,
    /// Box clipped to the patch; `None` when it misses the patch entirely.
    pub region: Option<Box3>,
}

/// How the template is placed before the Chamfer term.
#[derive(Clone, Copy, Debug)]
pub enum Registration<'a> {
    /// Run ICP from the template onto the current proposal.
    Icp,
    /// Reuse a known template-to-proposal transform.
    Fixed(&'a RigidTransform),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ori: f64,
    pub geo: f64,
    pub cons: f64,
    pub total: f64,
    pub completeness: f64,
    /// Whether the geometric term was evaluated this step.
    pub geo_active: bool,
}

#[derive(Clone, Debug)]
pub struct MaskLossOutput {
    pub components: LossComponents,
    /// Gradient of the total with respect to the logits.
    pub grad: Vec<f64>,
    /// Template-to-proposal transform used by the geometric term.
    pub transform: Option<RigidTransform>,
    /// Fingerprint of every discrete choice made on the way (nearest
    /// neighbours, projection winners, active cells, gate and clamps).
    /// Equal keys mean the loss is smooth between two evaluations.
    pub branch_key: u64,
}

struct GeoTerm {
    value: f64,
    grad_p: Vec<f64>,
    transform: RigidTransform,
}

fn geo_term<R: Rng + ?Sized>(
    probs: &VoxelGrid,
    inputs: &MaskLossInputs,
    cfg: &LossConfig,
    registration: Registration,
    rng: &mut R,
    key: &mut DefaultHasher,
) -> Result<Option<GeoTerm>> {
    if inputs.template.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let sample = gumbel_binarize(probs, cfg.gumbel_temperature, cfg.gumbel_hard, rng)?;
    let proposal = gridding_reverse(&sample.sample, cfg.gridding_threshold);
    let cells: Vec<usize> = proposal
        .provenance
        .as_ref()
        .map(|p| p.cells.iter().map(|c| c.corners[0]).collect())
        .unwrap_or_default();
    cells.hash(key);
    if proposal.len() < 3 {
        return Ok(None);
    }
    let transform = match registration {
        Registration::Icp => icp_register(inputs.template, &proposal, &cfg.icp, rng)?.transform,
        Registration::Fixed(t) => *t,
    };
    // the registered template is a constant target
    let registered = apply_transform(inputs.template, &transform);
    let ch = chamfer_with(&proposal, &registered, cfg.chamfer_metric)?;
    ch.nearest_in_target.hash(key);
    ch.nearest_in_source.hash(key);
    let grid_grad = chamfer_grad_to_grid(&ch, &proposal)?;
    Ok(Some(GeoTerm {
        value: ch.value,
        grad_p: sample.backprop(grid_grad.data()),
        transform,
    }))
}

/// Weighted sum of the box-projection, geometric-prior and pairwise terms on
/// `sigmoid(logits)`, with the gradient chained back to the logits.
///
/// Zero-weighted terms are skipped entirely, so they consume no randomness
/// and report zero.
pub fn mask_loss<R: Rng + ?Sized>(
    logits: &VoxelGrid,
    inputs: &MaskLossInputs,
    cfg: &LossConfig,
    registration: Registration,
    rng: &mut R,
) -> Result<MaskLossOutput> {
    let dims = logits.dims();
    if inputs.embeddings.dims != dims || inputs.graph.dims != dims {
        return Err(Error::DimensionMismatch(format!(
            "logits {dims:?}, embeddings {:?}, graph {:?}",
            inputs.embeddings.dims, inputs.graph.dims
        )));
    }
    if let Some(r) = &inputs.region {
        r.check_within(dims)?;
    }
    let probs = sigmoid_field(logits);
    let n = probs.len();
    let mut key = DefaultHasher::new();
    let mut c = LossComponents::default();
    let mut grad_p = vec![0.0; n];
    let mut transform = None;

    if cfg.weights.ori > 0.0 {
        let r = projection_loss(&probs, inputs.region.as_ref(), cfg.prob_floor);
        r.argmax.hash(&mut key);
        c.ori = r.value;
        for (g, d) in grad_p.iter_mut().zip(&r.grad) {
            *g += cfg.weights.ori * d;
        }
    }

    let gate = completeness_gate(&probs, cfg.completeness_threshold, cfg.completeness_margin);
    c.completeness = gate.score;
    if cfg.weights.geo > 0.0 && (gate.complete || !cfg.completeness_gate) {
        if let Some(t) = geo_term(&probs, inputs, cfg, registration, rng, &mut key)? {
            c.geo = t.value;
            c.geo_active = true;
            for (g, d) in grad_p.iter_mut().zip(&t.grad_p) {
                *g += cfg.weights.geo * d;
            }
            transform = Some(t.transform);
        }
    }
    c.geo_active.hash(&mut key);

    if cfg.weights.cons > 0.0 {
        let r = pairwise_loss(&probs, inputs.embeddings, inputs.graph, cfg.tau_sim, cfg.prob_floor)?;
        c.cons = r.value;
        for (g, d) in grad_p.iter_mut().zip(&r.grad) {
            *g += cfg.weights.cons * d;
        }
        // clamped edges contribute no gradient
        let p = probs.data();
        let clamped: Vec<bool> = inputs
            .graph
            .edges()
            .iter()
            .map(|&[a, b]| crate::pairwise::same_label_prob(p[a], p[b]) <= cfg.prob_floor)
            .collect();
        clamped.hash(&mut key);
    }

    c.total = cfg.weights.ori * c.ori + cfg.weights.geo * c.geo + cfg.weights.cons * c.cons;
    let grad = grad_p
        .iter()
        .zip(probs.data())
        .map(|(g, p)| g * p * (1.0 - p))
        .collect();
    Ok(MaskLossOutput {
        components: c,
        grad,
        transform,
        branch_key: key.finish(),
    })
}
