//! Self-test suite behind `boxprior check`: every fast path against a
//! brute-force or finite-difference reference, one line per check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{info_nce_set, EmbeddingField, FeatureField, HeadParams};
use crate::error::Result;
use crate::metrics;
use crate::oracle;
use crate::pairwise::{build_edge_graph, pairwise_loss, same_label_prob, Neighborhood};
use crate::pointcloud::{chamfer, chamfer_grad_to_grid, gridding_reverse, Point, PointCloud};
use crate::registration::{apply_transform, icp_register, IcpParams, RigidTransform};
use crate::trainer::{box_projection_loss, mask_loss, LossConfig, MaskLossInputs, Registration};
use crate::volume::{gumbel_binarize, Box3, VoxelGrid};

/// Deliberate corruption used to prove that a check can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Negate the analytic Chamfer gradient before it is compared.
    ChamferGradSign,
}

impl std::str::FromStr for Fault {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chamfer_grad_sign" => Ok(Self::ChamferGradSign),
            _ => Err(crate::error::Error::config("check.inject_fault", format!("unknown fault {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: &'static str,
    /// The operation under test.
    pub operation: &'static str,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<22} {:<22} measured {:.3e}  tolerance {:.1e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.operation,
            self.measured,
            self.tolerance,
            self.detail
        )
    }
}

struct Ctx {
    seed: u64,
    fault: Option<Fault>,
}

impl Ctx {
    fn rng(&self, salt: u64) -> ChaCha8Rng {
        let mut r = ChaCha8Rng::seed_from_u64(self.seed);
        r.set_stream(salt);
        r
    }
}

type CheckFn = fn(&Ctx) -> Result<(f64, String)>;

/// `(name, operation, tolerance, check)`; a check passes when its measured
/// error is at most the tolerance (strictly below for gradient errors).
const CHECKS: &[(&str, &str, f64, CheckFn)] = &[
    ("chamfer.oracle", "chamfer", 1e-12, chamfer_oracle),
    ("chamfer.gradient", "chamfer_grad_to_grid", 1e-4, chamfer_gradient),
    ("gridding.centres", "gridding_reverse", 1e-12, gridding_centres),
    ("gridding.oracle", "gridding_reverse", 1e-12, gridding_oracle),
    ("gumbel.frequency", "gumbel_binarize", 0.01, gumbel_frequency),
    ("icp.recovery", "icp_register", 1.0, icp_recovery),
    ("infonce.gradient", "info_nce_loss", 1e-4, info_nce_gradient),
    ("head.gradient", "HeadParams::backward", 1e-4, head_gradient),
    ("pairwise.oracle", "pairwise_loss", 1e-12, pairwise_oracle),
    ("pairwise.gradient", "pairwise_loss", 1e-4, pairwise_gradient),
    ("pairwise.range", "same_label_prob", 0.0, pairwise_range),
    ("boxproj.gradient", "box_projection_loss", 1e-4, box_gradient),
    ("maskloss.gradient", "mask_loss", 5e-3, mask_loss_gradient),
    ("metrics.dice", "dice", 0.0, dice_oracle),
    ("metrics.hd95", "hd95", 1e-9, hd95_oracle),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs every check whose name contains `filter` (all when `None`).
pub fn run_checks(filter: Option<&str>, fault: Option<Fault>, seed: u64) -> Vec<CheckOutcome> {
    let ctx = Ctx { seed, fault };
    CHECKS
        .iter()
        .filter(|(name, ..)| filter.is_none_or(|f| name.contains(f)))
        .map(|&(name, operation, tolerance, run)| {
            log::info!("running {name}");
            match run(&ctx) {
                Ok((measured, detail)) => CheckOutcome {
                    name,
                    operation,
                    measured,
                    tolerance,
                    passed: measured <= tolerance && measured.is_finite(),
                    detail,
                },
                Err(e) => CheckOutcome {
                    name,
                    operation,
                    measured: f64::NAN,
                    tolerance,
                    passed: false,
                    detail: format!("error: {e}"),
                },
            }
        })
        .collect()
}

fn random_cloud(n: usize, extent: f64, rng: &mut impl Rng) -> Vec<Point> {
    (0..n)
        .map(|_| std::array::from_fn(|_| rng.random_range(0.0..extent)))
        .collect()
}

fn random_probs(dims: [usize; 3], lo: f64, hi: f64, rng: &mut impl Rng) -> VoxelGrid {
    VoxelGrid::from_fn(dims, |_, _, _| rng.random_range(lo..hi))
}

fn random_embeddings(dims: [usize; 3], d: usize, rng: &mut impl Rng) -> EmbeddingField {
    let n = dims.iter().product::<usize>();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / norm));
    }
    EmbeddingField::new(dims, d, data).expect("consistent sizes")
}

fn chamfer_oracle(ctx: &Ctx) -> Result<(f64, String)> {
    let mut rng = ctx.rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let s = random_cloud(rng.random_range(1..=512), 32.0, &mut rng);
        let t = random_cloud(rng.random_range(1..=512), 32.0, &mut rng);
        let fast = chamfer(&PointCloud::new(s.clone())?, &PointCloud::new(t.clone())?)?.value;
        let slow = oracle::chamfer(&s, &t);
        worst = worst.max((fast - slow).abs() / slow.abs().max(1e-300));
    }
    Ok((worst, "100 random pairs, up to 512 points".into()))
}

/// Chamfer value of the cloud gridded from `data`, keyed by the discrete
/// choices (active cells and nearest neighbours).
fn gridded_chamfer(grid: &VoxelGrid, data: &[f64], target: &PointCloud) -> (f64, (Vec<usize>, Vec<usize>, Vec<usize>)) {
    let cloud = gridding_reverse(&grid.with_data(data.to_vec()).expect("same size"), 0.125);
    let cells = cloud
        .provenance
        .as_ref()
        .map(|p| p.cells.iter().map(|c| c.corners[0]).collect())
        .unwrap_or_default();
    match chamfer(&cloud, target) {
        Ok(r) => (r.value, (cells, r.nearest_in_target, r.nearest_in_source)),
        Err(_) => (0.0, (cells, vec![], vec![])),
    }
}

fn chamfer_gradient(ctx: &Ctx) -> Result<(f64, String)> {
    let mut rng = ctx.rng(2);
    let grid = random_probs([6, 6, 6], 0.0, 1.0, &mut rng);
    let target = PointCloud::new(random_cloud(40, 5.0, &mut rng))?;
    let cloud = gridding_reverse(&grid, 0.125);
    let mut analytic = chamfer_grad_to_grid(&chamfer(&cloud, &target)?, &cloud)?.into_data();
    if ctx.fault == Some(Fault::ChamferGradSign) {
        analytic.iter_mut().for_each(|g| *g = -*g);
    }
    let fd = oracle::central_differences(grid.data(), 1e-5, |x| gridded_chamfer(&grid, x, &target));
    let (err, n) = oracle::compare_gradient(&analytic, &fd, 1e-6);
    Ok((err, format!("6^3 grid, {n}/216 coordinates off ties")))
}

fn gridding_centres(ctx: &Ctx) -> Result<(f64, String)> {
    let mut rng = ctx.rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let v = rng.random_range(0.2..1.0);
        let grid = VoxelGrid::filled([5, 4, 3], v);
        let cloud = gridding_reverse(&grid, 0.125);
        for p in &cloud.points {
            for c in p {
                // every centre sits at k + 0.5
                worst = worst.max((c - c.floor() - 0.5).abs());
            }
        }
    }
    Ok((worst, "uniform-corner cells".into()))
}

fn gridding_oracle(ctx: &Ctx) -> Result<(f64, String)> {
    let mut rng = ctx.rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let grid = random_probs([8, 8, 8], 0.0, 1.0, &mut rng).map(|v| if v < 0.6 { 0.0 } else { v });
        let fast = gridding_reverse(&grid, 0.125).points;
        let slow = oracle::gridding(&grid, 0.125);
        if fast.len() != slow.len() {
            return Ok((f64::INFINITY, format!("{} points vs {} by cell scan", fast.len(), slow.len())));
        }
        for (a, b) in fast.iter().zip(&slow) {
            for k in 0..3 {
                worst = worst.max((a[k] - b[k]).abs());
            }
        }
    }
    Ok((worst, "100 random 8^3 grids, counts equal".into()))
}

fn gumbel_frequency(ctx: &Ctx) -> Result<(f64, String)> {
    let mut rng = ctx.rng(5);
    let mut worst: f64 = 0.0;
    for p in [0.1, 0.5, 0.9] {
        let grid = VoxelGrid::filled([100, 100, 10], p);
        let s = gumbel_binarize(&grid, 1.0, true, &mut rng)?;
        let freq = s.sample.count_nonzero() as f64 / s.sample.len() as f64;
        worst = worst.max((freq - p).abs());
    }
    Ok((worst, "p in {0.1, 0.5, 0.9}, 1e5 draws each".into()))
}

fn icp_recovery(ctx: &Ctx) -> Result<(f64, String)> {
    let mut rng = ctx.rng(6);
    // worst rotation error in degrees, with translation and iteration limits
    // folded in as failures
    let mut worst_deg: f64 = 0.0;
    let mut worst_t: f64 = 0.0;
    let mut max_iter = 0;
    for _ in 0..50 {
        let pts: Vec<Point> = (0..500)
            .map(|_| [rng.random_range(-8.0..8.0), rng.random_range(-5.0..5.0), rng.random_range(-3.0..3.0)])
            .collect();
        let template = PointCloud::new(pts)?;
        let axis: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let dir: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let dn = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
        let len = rng.random_range(0.0..2.0);
        let truth = RigidTransform::from_axis_angle(
            axis,
            rng.random_range(-15f64..15.0).to_radians(),
            std::array::from_fn(|a| dir[a] / dn * len),
        );
        let out = icp_register(&template, &apply_transform(&template, &truth), &IcpParams::default(), &mut rng)?;
        if out.objective.windows(2).any(|w| w[1] > w[0]) {
            return Ok((f64::INFINITY, "objective increased".into()));
        }
        worst_deg = worst_deg.max(out.transform.angle_to(&truth).to_degrees());
        for a in 0..3 {
            worst_t = worst_t.max((out.transform.translation[a] - truth.translation[a]).abs());
        }
        max_iter = max_iter.max(out.iterations);
    }
    let measured = if worst_t < 0.05 && max_iter <= 50 { worst_deg } else { f64::INFINITY };
    Ok((measured, format!("rotation error in degrees; translation {worst_t:.2e}, {max_iter} iterations max")))
}

fn info_nce_gradient(ctx: &Ctx) -> Result<(f64, String)> {
    let mut rng = ctx.rng(7);
    let emb = random_embeddings([4, 4, 4], 4, &mut rng);
    let labels: Vec<bool> = (0..64).map(|v| v % 3 == 0).collect();
    let (_, analytic) = info_nce_set(&emb.data, 4, &labels, 0.5)?;
    let fd = oracle::central_differences(&emb.data, 1e-5, |x| (info_nce_set(x, 4, &labels, 0.5).expect("two classes").0, ()));
    let (err, n) = oracle::compare_gradient(&analytic, &fd, 1e-6);
    Ok((err, format!("4^3 field, D = 4, {n} coordinates")))
}

fn head_gradient(ctx: &Ctx) -> Result<(f64, String)> {
    let mut rng = ctx.rng(8);
    let feats: Vec<f64> = (0..64 * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
    let features = FeatureField::new([4, 4, 4], 6, feats)?;
    let mut params = HeadParams::init(6, 8, 4, &mut rng);
    // zero biases let a voxel with every unit inactive sit exactly on the
    // zero-norm fallback, where the embedding is discontinuous
    for b in params.b1.iter_mut().chain(params.b2.iter_mut()) {
        *b = rng.random_range(-0.3..0.3);
    }
    let voxels: Vec<usize> = (0..64).collect();
    let labels: Vec<bool> = (0..64).map(|v| v % 2 == 0).collect();
    let loss_at = |p: &HeadParams| -> (f64, Vec<f64>) {
        let e = p.embed_voxels(&features, &voxels);
        info_nce_set(&e, 4, &labels, 0.5).expect("two classes")
    };
    let (_, upstream) = loss_at(&params);
    let g = params.backward(&features, &voxels, &upstream)?;
    let flat = |p: &HeadParams| [p.w1.clone(), p.b1.clone(), p.w2.clone(), p.b2.clone()].concat();
    let analytic = [g.w1, g.b1, g.w2, g.b2].concat();
    let unflat = |x: &[f64]| {
        let mut p = params.clone();
        let (a, rest) = x.split_at(p.w1.len());
        let (b, rest) = rest.split_at(p.b1.len());
        let (c, d) = rest.split_at(p.w2.len());
        p.w1 = a.to_vec();
        p.b1 = b.to_vec();
        p.w2 = c.to_vec();
        p.b2 = d.to_vec();
        p
    };
    let fd = oracle::central_differences(&flat(&params), 1e-5, |x| (loss_at(&unflat(x)).0, ()));
    let (err, n) = oracle::compare_gradient(&analytic, &fd, 1e-6);
    Ok((err, format!("{n} head parameters through normalisation and ReLU")))
}

fn pairwise_setup(ctx: &Ctx, salt: u64) -> (VoxelGrid, EmbeddingField) {
    let mut rng = ctx.rng(salt);
    (random_probs([5, 5, 5], 0.05, 0.95, &mut rng), random_embeddings([5, 5, 5], 4, &mut rng))
}

fn pairwise_oracle(ctx: &Ctx) -> Result<(f64, String)> {
    let (p, e) = pairwise_setup(ctx, 9);
    let graph = build_edge_graph([5, 5, 5], Neighborhood::Six, None, 0)?;
    let fast = pairwise_loss(&p, &e, &graph, 0.0, 1e-6)?;
    let (value, grad) = oracle::pairwise(&p, &e, 0.0, 1e-6);
    let err = oracle::max_relative_error(&fast.grad, &grad, 1e-300).max((fast.value - value).abs() / value.abs());
    Ok((err, format!("5^3 field, {} gated edges", fast.gated_edges)))
}

fn pairwise_gradient(ctx: &Ctx) -> Result<(f64, String)> {
    let (p, e) = pairwise_setup(ctx, 10);
    let graph = build_edge_graph([5, 5, 5], Neighborhood::Six, None, 0)?;
    let analytic = pairwise_loss(&p, &e, &graph, 0.0, 1e-6)?.grad;
    let fd = oracle::central_differences(p.data(), 1e-5, |x| {
        (pairwise_loss(&p.with_data(x.to_vec()).expect("same size"), &e, &graph, 0.0, 1e-6).expect("same dims").value, ())
    });
    let (err, n) = oracle::compare_gradient(&analytic, &fd, 1e-6);
    Ok((err, format!("5^3 field, {n} coordinates")))
}

fn pairwise_range(ctx: &Ctx) -> Result<(f64, String)> {
    let trivial = same_label_prob(1.0, 1.0) == 1.0
        && same_label_prob(1.0, 0.0) == 0.0
        && [0.0, 0.3, 0.77, 1.0].iter().all(|&p| same_label_prob(0.5, p) == 0.5);
    let mut rng = ctx.rng(11);
    let outside = (0..1_000_000)
        .filter(|_| !(0.0..=1.0).contains(&same_label_prob(rng.random(), rng.random())))
        .count();
    let measured = if trivial { outside as f64 } else { f64::INFINITY };
    Ok((measured, "values outside [0, 1] over 1e6 pairs; trivial cases exact".into()))
}

fn box_gradient(ctx: &Ctx) -> Result<(f64, String)> {
    let mut rng = ctx.rng(12);
    let probs = random_probs([4, 4, 4], 0.05, 0.95, &mut rng);
    let region = Box3::new([1, 0, 1], [3, 3, 4])?;
    let base = box_projection_loss(&probs, &region, 1e-6)?;
    let fd = oracle::central_differences(probs.data(), 1e-5, |x| {
        let r = box_projection_loss(&probs.with_data(x.to_vec()).expect("same size"), &region, 1e-6).expect("box fits");
        (r.value, r.argmax)
    });
    let (err, n) = oracle::compare_gradient(&base.grad, &fd, 1e-6);
    Ok((err, format!("4^3 field, {n} coordinates off argmax ties")))
}

fn mask_loss_gradient(ctx: &Ctx) -> Result<(f64, String)> {
    let mut rng = ctx.rng(13);
    let dims = [6, 6, 6];
    let logits: Vec<f64> = VoxelGrid::from_fn(dims, |z, y, x| {
        let inside = (1..5).contains(&z) && (1..5).contains(&y) && (1..5).contains(&x);
        if inside { 1.0 } else { -1.5 }
    })
    .data()
    .iter()
    .map(|v| v + rng.random_range(-0.5..0.5))
    .collect();
    let logits = VoxelGrid::zeros(dims).with_data(logits)?;
    let template = PointCloud::new(random_cloud(60, 5.0, &mut rng))?;
    let emb = random_embeddings(dims, 4, &mut rng);
    let graph = build_edge_graph(dims, Neighborhood::Six, None, 0)?;
    let inputs = MaskLossInputs {
        template: &template,
        embeddings: &emb,
        graph: &graph,
        region: Some(Box3::new([1, 1, 1], [5, 5, 5])?),
    };
    // soft samples keep the geometric term differentiable; the placement is
    // held fixed because registration is not differentiated
    let cfg = LossConfig {
        gumbel_hard: false,
        completeness_gate: false,
        tau_sim: 0.0,
        ..Default::default()
    };
    let fixed = RigidTransform::translation([0.2, -0.1, 0.3]);
    let seed: u64 = rng.random();
    let eval = |x: &[f64]| {
        let l = logits.with_data(x.to_vec()).expect("same size");
        mask_loss(&l, &inputs, &cfg, Registration::Fixed(&fixed), &mut ChaCha8Rng::seed_from_u64(seed)).expect("valid inputs")
    };
    let base = eval(logits.data());
    let fd = oracle::central_differences(logits.data(), 1e-5, |x| {
        let o = eval(x);
        (o.components.total, o.branch_key)
    });
    let (err, n) = oracle::compare_gradient(&base.grad, &fd, 1e-6);
    Ok((err, format!("6^3 patch, replayed seed, {n}/216 coordinates off ties")))
}

fn random_blob(dims: [usize; 3], rng: &mut impl Rng) -> VoxelGrid {
    let c: [f64; 3] = std::array::from_fn(|a| rng.random_range(0.3..0.7) * dims[a] as f64);
    let r = rng.random_range(3.0..8.0);
    let noise = rng.random_range(0.0..0.3);
    VoxelGrid::from_fn(dims, |z, y, x| {
        let d = ((z as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (x as f64 - c[2]).powi(2)).sqrt();
        (d < r * (1.0 + noise * ((x + 2 * y + 3 * z) as f64).sin())) as u8 as f64
    })
}

fn mask_pair(rng: &mut impl Rng) -> (VoxelGrid, VoxelGrid) {
    let n = rng.random_range(24..=32);
    let dims = [n, rng.random_range(24..=32), rng.random_range(24..=32)];
    (random_blob(dims, rng), random_blob(dims, rng))
}

fn dice_oracle(ctx: &Ctx) -> Result<(f64, String)> {
    let mut rng = ctx.rng(14);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (a, b) = mask_pair(&mut rng);
        worst = worst.max((metrics::dice(&a, &b)? - oracle::dice(&a, &b)).abs());
    }
    Ok((worst, "50 random mask pairs, 24^3 to 32^3".into()))
}

fn hd95_oracle(ctx: &Ctx) -> Result<(f64, String)> {
    let mut rng = ctx.rng(15);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (a, b) = mask_pair(&mut rng);
        let spacing = [rng.random_range(0.5..2.0), 1.0, rng.random_range(0.5..2.0)];
        let fast = metrics::hd95(&a, &b, spacing)?;
        let slow = oracle::hd95(&a, &b, spacing).expect("nonempty blobs");
        worst = worst.max((fast - slow).abs());
    }
    let cube = |x0: usize| VoxelGrid::from_fn([4, 4, 12], move |z, y, x| (z < 2 && y < 2 && (x0..x0 + 2).contains(&x)) as u8 as f64);
    let hand = metrics::hd95(&cube(0), &cube(5), [1.0; 3])?;
    if hand != 5.0 {
        return Ok((f64::INFINITY, format!("two-cube case gave {hand}")));
    }
    Ok((worst, "50 random mask pairs; two-cube case exactly 5".into()))
}
