use rand::Rng;
use serde::{Deserialize, Serialize};

use super::features::FeatureField;
use super::head::{embed, Adam, HeadParams};
use super::labels::{coarse_labels, refine_labels, LabelField, RefineRule};
use super::loss::{info_nce_set, sample_anchors};
use crate::error::{Error, Result};
use crate::volume::Box3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    /// Number of background referring pixels used by label refinement.
    pub k: usize,
    pub tau_sim: f64,
    pub tau_temp: f64,
    pub coarse_steps: usize,
    pub refine_steps: usize,
    pub lr: f64,
    pub sample_size: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub refine_rule: RefineRule,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            k: 64,
            tau_sim: 0.6,
            tau_temp: 0.1,
            coarse_steps: 200,
            refine_steps: 200,
            lr: 1e-2,
            sample_size: 512,
            hidden: 64,
            embed_dim: 32,
            refine_rule: RefineRule::BackgroundMajority,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("contrastive.k", self.k as f64),
            ("contrastive.tau_temp", self.tau_temp),
            ("contrastive.lr", self.lr),
            ("contrastive.sample_size", self.sample_size as f64),
            ("contrastive.hidden", self.hidden as f64),
            ("contrastive.embed_dim", self.embed_dim as f64),
        ];
        for (key, v) in positive {
            if !(v > 0.0) {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !(-1.0..=1.0).contains(&self.tau_sim) {
            return Err(Error::config("contrastive.tau_sim", "must lie in [-1, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: HeadParams,
    /// Loss per coarse step, then per refine step.
    pub coarse_trace: Vec<f64>,
    pub refine_trace: Vec<f64>,
    /// Labels used by the refine stage (absent when it ran zero steps).
    pub refined: Option<LabelField>,
}

const RESAMPLE_ATTEMPTS: usize = 32;

fn descend<R: Rng + ?Sized>(
    params: &mut HeadParams,
    adam: &mut Adam,
    features: &FeatureField,
    labels: &LabelField,
    cfg: &PretrainConfig,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let mut trace = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut attempt = 0;
        let (anchors, set_labels) = loop {
            let anchors = sample_anchors(features.voxels(), cfg.sample_size, rng);
            let set_labels: Vec<bool> = anchors.iter().map(|&a| labels.positive[a]).collect();
            let mixed = set_labels.iter().any(|&l| l) && set_labels.iter().any(|&l| !l);
            if mixed || attempt + 1 >= RESAMPLE_ATTEMPTS {
                break (anchors, set_labels);
            }
            attempt += 1;
        };
        // only the sampled anchors need embedding
        let vectors = params.embed_voxels(features, &anchors);
        let (value, grad) = info_nce_set(&vectors, params.out_dim, &set_labels, cfg.tau_temp)?;
        let grad = params.backward(features, &anchors, &grad)?;
        adam.step(params, &grad, cfg.lr);
        trace.push(value);
    }
    Ok(trace)
}

/// Two-stage pre-training: box labels first, then labels refined with the
/// partially trained embeddings.
pub fn pretrain_head<R: Rng + ?Sized>(
    features: &FeatureField,
    region: &Box3,
    cfg: &PretrainConfig,
    rng: &mut R,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    region.check_within(features.dims)?;
    let mut params = HeadParams::init(features.channels, cfg.hidden, cfg.embed_dim, rng);
    let coarse = coarse_labels(region, features.dims)?;
    let mut adam = Adam::new(&params);
    let coarse_trace = descend(&mut params, &mut adam, features, &coarse, cfg, cfg.coarse_steps, rng)?;
    let mut refined = None;
    let mut refine_trace = Vec::new();
    if cfg.refine_steps > 0 {
        let emb = embed(features, &params)?;
        let labels = refine_labels(&emb, region, cfg.k, cfg.tau_sim, cfg.refine_rule, rng)?;
        refine_trace = descend(&mut params, &mut adam, features, &labels, cfg, cfg.refine_steps, rng)?;
        refined = Some(labels);
    }
    Ok(PretrainOutcome {
        params,
        coarse_trace,
        refine_trace,
        refined,
    })
}
