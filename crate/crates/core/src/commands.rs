//! Subcommand bodies. Each takes a validated [`RunConfig`], reads and writes
//! files under its directories, and returns what it wrote or measured so the
//! binary only has to print.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::check::{run_checks, CheckOutcome};
use crate::config::RunConfig;
use crate::contrastive::{hand_crafted_features, pretrain_head, HeadParams};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{evaluate, MetricReport};
use crate::pointcloud::chamfer;
use crate::registration::{icp_register, IcpOutcome, RigidTransform};
use crate::trainer::streams;
use crate::trainer::{stream_rng, synth_volume, train_volume, LossComponents, LossTrace, SynthKind};
use crate::volume::{Box3, Dims, PatchSpec};

pub const IMAGE: &str = "image.json";
pub const GT: &str = "gt.json";
pub const BOX: &str = "box.json";
pub const TEMPLATE: &str = "template.csv";
pub const MANIFEST: &str = "manifest.json";
pub const HEAD: &str = "head.json";
pub const PRETRAIN_TRACE: &str = "pretrain_trace.csv";
pub const REPORT: &str = "report.json";
pub const TRACE: &str = "trace.csv";
pub const MASK: &str = "mask.json";
pub const TRANSFORM: &str = "transform.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub kind: SynthKind,
    pub dims: Dims,
    /// Paths relative to the manifest's directory.
    pub files: ManifestFiles,
    /// Ground-truth placement of the template over the object.
    pub template_transform: RigidTransform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub image: String,
    pub gt: String,
    #[serde(rename = "box")]
    pub region: String,
    pub template: String,
}

/// Writes one synthetic case into `cfg.out`.
pub fn cmd_generate(cfg: &RunConfig) -> Result<Manifest> {
    cfg.dataset.validate()?;
    let case = synth_volume(&cfg.dataset, &mut stream_rng(cfg.seed, streams::DATASET))?;
    let out = &cfg.out;
    io::create_dir(out)?;
    io::save_volume(&out.join(IMAGE), &case.image)?;
    io::save_volume(&out.join(GT), &case.gt_mask)?;
    io::save_json(&out.join(BOX), &case.region)?;
    io::save_cloud(&out.join(TEMPLATE), &case.template)?;
    let manifest = Manifest {
        seed: cfg.seed,
        kind: cfg.dataset.kind,
        dims: cfg.dataset.dims,
        files: ManifestFiles {
            image: IMAGE.into(),
            gt: GT.into(),
            region: BOX.into(),
            template: TEMPLATE.into(),
        },
        template_transform: case.template_transform,
    };
    io::save_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

/// Pre-trains the embedding head on `image.json` and `box.json` from the data
/// directory and writes the weights plus loss trace into `cfg.out`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<HeadParams> {
    cfg.contrastive.validate()?;
    let data = cfg.data_dir();
    let image = io::load_volume(&data.join(IMAGE))?;
    let region: Box3 = io::load_json(&data.join(BOX))?;
    let features = hand_crafted_features(&image);
    let pre = pretrain_head(&features, &region, &cfg.contrastive, &mut stream_rng(cfg.seed, streams::PRETRAIN))?;
    io::create_dir(&cfg.out)?;
    io::save_json(&cfg.out.join(HEAD), &pre.params)?;
    let trace: Vec<f64> = pre.coarse_trace.iter().chain(&pre.refine_trace).copied().collect();
    io::save_loss_trace(&cfg.out.join(PRETRAIN_TRACE), &trace)?;
    Ok(pre.params)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchReport {
    pub origin: [usize; 3],
    pub dims: Dims,
    pub transform: Option<RigidTransform>,
    pub final_loss: Option<LossComponents>,
    pub trace: LossTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Measured {
    pub metrics: MetricReport,
    pub foreground_voxels: usize,
    pub pretrain_trace: Vec<f64>,
    pub patches: Vec<PatchReport>,
}

/// Published clinical-data figures, echoed for context and never compared
/// against anything measured here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub note: String,
    /// `(dataset, method, DSC %, HD95)`.
    pub rows: Vec<(String, String, f64, f64)>,
}

impl Reference {
    pub fn published() -> Self {
        let rows = [
            ("LiTS17", "full", 79.8, 8.7),
            ("LiTS17", "without geometric prior", 52.9, 10.9),
            ("LiTS17", "without contrastive similarity", 69.7, 9.4),
            ("KiTS21", "full", 80.2, 5.3),
            ("KiTS21", "without geometric prior", 54.2, 10.7),
            ("KiTS21", "without contrastive similarity", 68.5, 9.1),
            ("LPBA40", "full", 65.4, 4.2),
            ("LPBA40", "without geometric prior", 44.9, 7.1),
            ("LPBA40", "without contrastive similarity", 57.3, 4.9),
        ];
        Self {
            note: "clinical-data results of a trained network; not reproduced and not asserted".into(),
            rows: rows.iter().map(|&(d, m, dsc, hd)| (d.into(), m.into(), dsc, hd)).collect(),
        }
    }
}

/// Run-dependent fields, excluded when comparing two reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timestamp {
    pub unix_seconds: u64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub measured: Measured,
    pub reference: Reference,
    pub timestamp: Timestamp,
}

/// Trains on the dataset in the data directory and writes `report.json`,
/// `trace.csv` and the binary mask into `cfg.out`.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunReport> {
    cfg.validate()?;
    let started = Instant::now();
    let data = cfg.data_dir();
    let image = io::load_volume(&data.join(IMAGE))?;
    let gt = io::load_volume(&data.join(GT))?;
    let region: Box3 = io::load_json(&data.join(BOX))?;
    let template = io::load_cloud(&data.join(TEMPLATE))?;
    let outcome = train_volume(&image, &region, &template, &cfg.contrastive, &cfg.loss, &cfg.patch, cfg.seed)?;
    let mask = outcome.mask();
    let metrics = evaluate(&mask, &gt)?;
    let patches: Vec<PatchReport> = outcome
        .patches
        .iter()
        .map(|p| PatchReport {
            origin: p.spec.origin,
            dims: p.spec.dims,
            transform: p.transform,
            final_loss: last_components(&p.trace),
            trace: p.trace.clone(),
        })
        .collect();

    io::create_dir(&cfg.out)?;
    io::save_volume(&cfg.out.join(MASK), &mask)?;
    io::save_text(&cfg.out.join(TRACE), &trace_csv(&outcome.patches.iter().map(|p| (p.spec, &p.trace)).collect::<Vec<_>>()))?;
    let report = RunReport {
        config: cfg.clone(),
        measured: Measured {
            metrics,
            foreground_voxels: mask.count_nonzero(),
            pretrain_trace: outcome.pretrain_trace,
            patches,
        },
        reference: Reference::published(),
        timestamp: Timestamp {
            unix_seconds: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    };
    io::save_json(&cfg.out.join(REPORT), &report)?;
    Ok(report)
}

fn last_components(t: &LossTrace) -> Option<LossComponents> {
    let k = t.len().checked_sub(1)?;
    Some(LossComponents {
        ori: t.ori[k],
        geo: t.geo[k],
        cons: t.cons[k],
        total: t.total[k],
        completeness: t.completeness[k],
        geo_active: t.geo_active[k],
    })
}

/// One row per patch and step.
pub fn trace_csv(patches: &[(PatchSpec, &LossTrace)]) -> String {
    let mut s = String::from("patch,step,ori,geo,cons,total,completeness,geo_active\n");
    for (k, (_, t)) in patches.iter().enumerate() {
        for i in 0..t.len() {
            let _ = writeln!(
                s,
                "{k},{i},{},{},{},{},{},{}",
                t.ori[i], t.geo[i], t.cons[i], t.total[i], t.completeness[i], t.geo_active[i] as u8
            );
        }
    }
    s
}

pub fn cmd_eval(pred: &Path, gt: &Path) -> Result<MetricReport> {
    evaluate(&io::load_volume(pred)?, &io::load_volume(gt)?)
}

/// Fixed-order, fixed-width rendering of a metric report.
pub fn metric_table(m: &MetricReport) -> String {
    let [tp, fp, fn_, tn] = m.voxel_counts;
    let hd = m.hd95.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    let mut s = String::new();
    for (k, v) in [
        ("dice", format!("{:.6}", m.dice)),
        ("hd95", hd),
        ("tp", tp.to_string()),
        ("fp", fp.to_string()),
        ("fn", fn_.to_string()),
        ("tn", tn.to_string()),
    ] {
        let _ = writeln!(s, "{k:<6}{v:>14}");
    }
    s
}

/// Registers the template cloud onto the proposal cloud and writes the
/// transform to `cfg.out`.
pub fn cmd_register(cfg: &RunConfig, template: &Path, proposal: &Path) -> Result<IcpOutcome> {
    let t = io::load_cloud(template)?;
    let p = io::load_cloud(proposal)?;
    let out = icp_register(&t, &p, &cfg.loss.icp, &mut stream_rng(cfg.seed, 0))?;
    io::create_dir(&cfg.out)?;
    io::save_json(&cfg.out.join(TRANSFORM), &out.transform)?;
    Ok(out)
}

pub fn cmd_chamfer(a: &Path, b: &Path) -> Result<f64> {
    Ok(chamfer(&io::load_cloud(a)?, &io::load_cloud(b)?)?.value)
}

pub fn cmd_check(cfg: &RunConfig) -> Vec<CheckOutcome> {
    run_checks(cfg.check.filter.as_deref(), cfg.check.inject_fault, cfg.seed)
}

/// A report's JSON with the timestamp block removed, for run-to-run
/// comparison.
pub fn report_payload(path: &Path) -> Result<String> {
    let mut v: serde_json::Value = io::load_json(path)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timestamp");
    }
    serde_json::to_string_pretty(&v).map_err(|e| Error::parse(path, e))
}
