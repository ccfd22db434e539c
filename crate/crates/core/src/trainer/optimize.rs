use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{mask_loss, LossComponents, LossConfig, MaskLossInputs, Registration};
use crate::error::Result;
use crate::registration::RigidTransform;
use crate::volume::VoxelGrid;

/// Independent generator for one `(seed, stream)` pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A fresh seed drawn from one stream of `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    stream_rng(seed, stream).random()
}

/// Per-step loss components, one entry per optimisation step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub ori: Vec<f64>,
    pub geo: Vec<f64>,
    pub cons: Vec<f64>,
    pub total: Vec<f64>,
    pub completeness: Vec<f64>,
    pub geo_active: Vec<bool>,
}

impl LossTrace {
    fn push(&mut self, c: &LossComponents) {
        self.ori.push(c.ori);
        self.geo.push(c.geo);
        self.cons.push(c.cons);
        self.total.push(c.total);
        self.completeness.push(c.completeness);
        self.geo_active.push(c.geo_active);
    }

    pub fn len(&self) -> usize {
        self.total.len()
    }

    pub fn is_empty(&self) -> bool {
        self.total.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct OptimizeOutcome {
    pub logits: VoxelGrid,
    pub trace: LossTrace,
    /// Last template-to-proposal transform found, if any.
    pub transform: Option<RigidTransform>,
}

/// Plain gradient descent on the logit field. Step `k` draws from its own
/// stream of `cfg.seed`, so runs are reproducible step by step.
pub fn optimize_mask(init: &VoxelGrid, inputs: &MaskLossInputs, cfg: &LossConfig) -> Result<OptimizeOutcome> {
    cfg.validate()?;
    let mut logits = init.clone();
    let mut trace = LossTrace::default();
    let mut transform: Option<RigidTransform> = None;
    for step in 0..cfg.steps {
        let mut rng = stream_rng(cfg.seed, step as u64);
        let registration = match &transform {
            Some(t) if step % cfg.icp_every != 0 => Registration::Fixed(t),
            _ => Registration::Icp,
        };
        let out = mask_loss(&logits, inputs, cfg, registration, &mut rng)?;
        trace.push(&out.components);
        if out.transform.is_some() {
            transform = out.transform;
        }
        let data: Vec<f64> = logits.data().iter().zip(&out.grad).map(|(l, g)| l - cfg.lr * g).collect();
        logits = logits.with_data(data)?;
    }
    Ok(OptimizeOutcome {
        logits,
        trace,
        transform,
    })
}
