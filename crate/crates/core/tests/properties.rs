//! Property tests for invariants that hold across modules.

use boxprior::config::RunConfig;
use boxprior::contrastive::{
    coarse_labels, embed, info_nce_set, pretrain_head, refine_labels, separable_features, similarity, EmbeddingField,
    FeatureField, HeadParams, PretrainConfig, RefineRule,
};
use boxprior::metrics;
use boxprior::pairwise::{build_edge_graph, pairwise_loss, Neighborhood};
use boxprior::pointcloud::{chamfer, gridding_reverse, Point, PointCloud};
use boxprior::registration::{icp_register, kabsch, apply_transform, IcpParams, RigidTransform};
use boxprior::trainer::{
    box_projection_loss, mask_loss, patch_nms, LossConfig, LossWeights, MaskLossInputs, Registration, SynthKind,
};
use boxprior::volume::{box_from_mask, gumbel_binarize, sigmoid_field, Box3, PatchSpec, VoxelGrid};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_grid(dims: [usize; 3], seed: u64, lo: f64, hi: f64) -> VoxelGrid {
    let mut r = rng(seed);
    VoxelGrid::from_fn(dims, |_, _, _| r.random_range(lo..hi))
}

fn unit_field(dims: [usize; 3], d: usize, seed: u64) -> EmbeddingField {
    let mut r = rng(seed);
    let n = dims.iter().product::<usize>();
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        data.extend(v.iter().map(|x| x / norm));
    }
    EmbeddingField::new(dims, d, data).unwrap()
}

fn small_dims() -> impl Strategy<Value = [usize; 3]> {
    [2usize..7, 2usize..7, 2usize..7]
}

/// Everything `mask_loss` needs for a random patch.
struct Patch {
    logits: VoxelGrid,
    template: PointCloud,
    emb: EmbeddingField,
    graph: boxprior::pairwise::EdgeGraph,
    region: Box3,
}

fn patch(seed: u64) -> Patch {
    let dims = [6, 6, 6];
    let mut r = rng(seed);
    let logits = VoxelGrid::from_fn(dims, |_, _, _| r.random_range(-3.0..3.0));
    let template = PointCloud::new((0..40).map(|_| std::array::from_fn(|_| r.random_range(0.0..5.0))).collect()).unwrap();
    Patch {
        logits,
        template,
        emb: unit_field(dims, 4, seed + 1),
        graph: build_edge_graph(dims, Neighborhood::Six, None, 0).unwrap(),
        region: Box3::new([1, 1, 1], [5, 4, 5]).unwrap(),
    }
}

impl Patch {
    fn inputs(&self) -> MaskLossInputs<'_> {
        MaskLossInputs {
            template: &self.template,
            embeddings: &self.emb,
            graph: &self.graph,
            region: Some(self.region),
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn box_from_mask_is_tight(dims in small_dims(), seed in any::<u64>()) {
        let mut r = rng(seed);
        let mask = VoxelGrid::from_fn(dims, |_, _, _| (r.random::<f64>() < 0.15) as u8 as f64);
        prop_assume!(mask.count_nonzero() > 0);
        let b = box_from_mask(&mask).unwrap();
        let fg: Vec<[usize; 3]> = (0..mask.len())
            .filter(|&v| mask.data()[v] == 1.0)
            .map(|v| [v / (dims[1] * dims[2]), v / dims[2] % dims[1], v % dims[2]])
            .collect();
        prop_assert!(fg.iter().all(|p| b.contains(p[0], p[1], p[2])));
        // shrinking any face loses a foreground voxel
        for a in 0..3 {
            prop_assert!(fg.iter().any(|p| p[a] == b.lo[a]));
            prop_assert!(fg.iter().any(|p| p[a] + 1 == b.hi[a]));
        }
    }

    #[test]
    fn hard_gumbel_samples_are_binary(dims in small_dims(), seed in any::<u64>(), t in 0.1f64..4.0) {
        let probs = random_grid(dims, seed, 0.0, 1.0);
        let s = gumbel_binarize(&probs, t, true, &mut rng(seed)).unwrap();
        prop_assert!(s.sample.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let soft = gumbel_binarize(&probs, t, false, &mut rng(seed)).unwrap();
        // straight-through: the hard path reuses the soft derivative
        prop_assert_eq!(&s.dsoft_dprob, &soft.dsoft_dprob);
        prop_assert_eq!(&s.soft, soft.sample.data());
    }

    #[test]
    fn chamfer_is_zero_exactly_on_mutual_cover(seed in any::<u64>(), n in 1usize..40) {
        let mut r = rng(seed);
        let pts: Vec<Point> = (0..n).map(|_| std::array::from_fn(|_| r.random_range(-5.0..5.0))).collect();
        let mut shuffled = pts.clone();
        shuffled.reverse();
        shuffled.push(pts[0]);
        let a = PointCloud::new(pts.clone()).unwrap();
        let b = PointCloud::new(shuffled.clone()).unwrap();
        prop_assert_eq!(chamfer(&a, &b).unwrap().value, 0.0);
        shuffled.push([9.0, 9.0, 9.0]);
        let c = PointCloud::new(shuffled).unwrap();
        prop_assert!(chamfer(&a, &c).unwrap().value > 0.0);
    }

    #[test]
    fn gridding_count_matches_cell_scan(dims in small_dims(), seed in any::<u64>(), thr in 0.05f64..0.9) {
        let g = random_grid(dims, seed, 0.0, 1.0);
        let mut expected = 0;
        for z in 0..dims[0] - 1 {
            for y in 0..dims[1] - 1 {
                for x in 0..dims[2] - 1 {
                    let mut s = 0.0;
                    for i in 0..8 {
                        s += g.get(z + (i >> 2), y + ((i >> 1) & 1), x + (i & 1));
                    }
                    expected += (s / 8.0 > thr) as usize;
                }
            }
        }
        prop_assert_eq!(gridding_reverse(&g, thr).len(), expected);
    }

    #[test]
    fn kabsch_never_reflects(seed in any::<u64>()) {
        let mut r = rng(seed);
        let src: Vec<Point> = (0..12).map(|_| std::array::from_fn(|_| r.random_range(-4.0..4.0))).collect();
        // the best orthogonal fit to a mirror image is a reflection
        let dst: Vec<Point> = src.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let pairs: Vec<(usize, usize)> = (0..12).map(|i| (i, i)).collect();
        let t = kabsch(&src, &dst, &pairs).unwrap();
        prop_assert!((t.determinant() - 1.0).abs() < 1e-9);
        prop_assert!(t.orthonormality_error() < 1e-9);
    }

    #[test]
    fn icp_objective_never_increases(seed in any::<u64>(), angle in -0.5f64..0.5) {
        let mut r = rng(seed);
        let pts: Vec<Point> = (0..200)
            .map(|_| [r.random_range(-6.0..6.0), r.random_range(-3.0..3.0), r.random_range(-2.0..2.0)])
            .collect();
        let template = PointCloud::new(pts).unwrap();
        let noisy: Vec<Point> = apply_transform(&template, &RigidTransform::from_axis_angle([0.3, 1.0, -0.2], angle, [0.7, -1.1, 0.4]))
            .points
            .iter()
            .map(|p| [p[0] + r.random_range(-0.1..0.1), p[1], p[2] + r.random_range(-0.1..0.1)])
            .collect();
        let out = icp_register(&template, &PointCloud::new(noisy).unwrap(), &IcpParams::default(), &mut r).unwrap();
        prop_assert!(out.objective.windows(2).all(|w| w[1] <= w[0]), "{:?}", out.objective);
    }

    #[test]
    fn embeddings_are_unit_norm(seed in any::<u64>(), channels in 1usize..5, out_dim in 1usize..6) {
        let dims = [3, 4, 2];
        let mut r = rng(seed);
        let f = FeatureField::new(dims, channels, (0..24 * channels).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
        let head = HeadParams::init(channels, 8, out_dim, &mut r);
        let e = embed(&f, &head).unwrap();
        for v in 0..24 {
            let n: f64 = e.vector(v).iter().map(|x| x * x).sum();
            prop_assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn refinement_never_marks_outside_positive(seed in any::<u64>(), tau in -1.0f64..1.0) {
        let dims = [6, 6, 6];
        let region = Box3::new([1, 2, 1], [5, 5, 4]).unwrap();
        let labels = refine_labels(&unit_field(dims, 3, seed), &region, 9, tau, RefineRule::BackgroundMajority, &mut rng(seed)).unwrap();
        for v in 0..216 {
            if labels.positive[v] {
                prop_assert!(region.contains(v / 36, v / 6 % 6, v % 6));
            }
        }
    }

    #[test]
    fn pairwise_is_independent_of_edge_order(seed in any::<u64>(), tau in -1.0f64..0.8) {
        let dims = [4, 3, 5];
        let probs = random_grid(dims, seed, 0.01, 0.99);
        let emb = unit_field(dims, 3, seed ^ 7);
        let graph = build_edge_graph(dims, Neighborhood::Six, None, 0).unwrap();
        let fast = pairwise_loss(&probs, &emb, &graph, tau, 1e-6).unwrap();
        // same edges, summed last to first
        let p = probs.data();
        let gated: Vec<&[usize; 2]> = graph
            .edges()
            .iter()
            .rev()
            .filter(|[a, b]| similarity(emb.vector(*a), emb.vector(*b)) >= tau)
            .collect();
        prop_assert_eq!(gated.len(), fast.gated_edges);
        let m = gated.len().max(1) as f64;
        let value: f64 = gated.iter().map(|[a, b]| -(p[*a] * p[*b] + (1.0 - p[*a]) * (1.0 - p[*b])).max(1e-6).ln() / m).sum();
        prop_assert!((value - fast.value).abs() <= 1e-12 * value.abs().max(1.0));
    }

    #[test]
    fn hd95_never_exceeds_hausdorff(seed in any::<u64>()) {
        let dims = [8, 9, 7];
        let mut r = rng(seed);
        let a = VoxelGrid::from_fn(dims, |_, _, _| (r.random::<f64>() < 0.3) as u8 as f64);
        let b = VoxelGrid::from_fn(dims, |_, _, _| (r.random::<f64>() < 0.3) as u8 as f64);
        prop_assume!(a.count_nonzero() > 0 && b.count_nonzero() > 0);
        let hd = metrics::hd95(&a, &b, [1.0, 1.5, 0.5]).unwrap();
        let pos = |v: usize| [(v / 63) as f64, (v / 7 % 9) as f64 * 1.5, (v % 7) as f64 * 0.5];
        let sa: Vec<usize> = metrics::boundary_voxels(&a);
        let sb: Vec<usize> = metrics::boundary_voxels(&b);
        let d = |u: usize, v: usize| {
            let (p, q) = (pos(u), pos(v));
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        };
        let directed = |x: &[usize], y: &[usize]| x.iter().map(|&u| y.iter().map(|&v| d(u, v)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max);
        let hausdorff = directed(&sa, &sb).max(directed(&sb, &sa));
        prop_assert!(hd <= hausdorff + 1e-12);
    }

    #[test]
    fn loss_components_are_nonnegative_and_sum(seed in any::<u64>(), w in [0.0f64..2.0, 0.0f64..2.0, 0.0f64..2.0]) {
        let p = patch(seed);
        let cfg = LossConfig { weights: LossWeights { ori: w[0], geo: w[1], cons: w[2] }, ..Default::default() };
        let out = mask_loss(&p.logits, &p.inputs(), &cfg, Registration::Icp, &mut rng(seed)).unwrap();
        let c = out.components;
        prop_assert!(c.ori >= 0.0 && c.geo >= 0.0 && c.cons >= 0.0);
        let sum = w[0] * c.ori + w[1] * c.geo + w[2] * c.cons;
        prop_assert!((c.total - sum).abs() <= 1e-12);
    }

    #[test]
    fn zero_weight_removes_its_gradient_bitwise(seed in any::<u64>(), a in 0.1f64..2.0, b in 0.1f64..2.0) {
        let p = patch(seed);
        let cfg = LossConfig { weights: LossWeights { ori: a, geo: 0.0, cons: b }, ..Default::default() };
        let out = mask_loss(&p.logits, &p.inputs(), &cfg, Registration::Icp, &mut rng(seed)).unwrap();
        let probs = sigmoid_field(&p.logits);
        let ori = box_projection_loss(&probs, &p.region, cfg.prob_floor).unwrap();
        let cons = pairwise_loss(&probs, &p.emb, &p.graph, cfg.tau_sim, cfg.prob_floor).unwrap();
        let reduced: Vec<f64> = (0..probs.len())
            .map(|i| {
                let q = probs.data()[i];
                (a * ori.grad[i] + b * cons.grad[i]) * q * (1.0 - q)
            })
            .collect();
        prop_assert_eq!(out.grad, reduced);
        prop_assert_eq!(out.components.geo, 0.0);
        prop_assert!(!out.components.geo_active);
    }

    #[test]
    fn nms_ignores_patch_order(seed in any::<u64>()) {
        let full = [6, 5, 7];
        let specs = [
            PatchSpec::new([0, 0, 0], [6, 5, 4]),
            PatchSpec::new([0, 0, 3], [6, 5, 4]),
            PatchSpec::new([2, 1, 1], [3, 3, 5]),
        ];
        let patches: Vec<(PatchSpec, VoxelGrid)> = specs
            .iter()
            .enumerate()
            .map(|(k, s)| (*s, random_grid(s.dims, seed.wrapping_add(k as u64), 0.0, 1.0)))
            .collect();
        let forward = patch_nms(&patches, full).unwrap();
        let mut reversed = patches.clone();
        reversed.reverse();
        prop_assert_eq!(patch_nms(&reversed, full).unwrap(), forward);
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), w in [0.0f64..3.0, 0.0f64..3.0, 0.0f64..3.0], steps in 0usize..500, kind in 0usize..3, d in 16usize..64) {
        let mut c = RunConfig { seed, ..Default::default() };
        c.loss.weights = LossWeights { ori: w[0], geo: w[1], cons: w[2] };
        c.loss.steps = steps;
        c.dataset.kind = [SynthKind::Sphere, SynthKind::HollowSphere, SynthKind::TwoLobes][kind];
        c.dataset.dims = [d, d + 1, d + 2];
        let once = RunConfig::from_toml(&c.to_toml()).unwrap();
        prop_assert_eq!(&once, &c);
        prop_assert_eq!(RunConfig::from_toml(&once.to_toml()).unwrap(), once);
    }
}

/// Separable organ-in-box features shared by the contrastive checks.
fn separable_case() -> (FeatureField, VoxelGrid, Box3) {
    let dims = [14, 14, 14];
    let mask = VoxelGrid::from_fn(dims, |z, y, x| {
        let d2 = [z, y, x].iter().map(|&c| (c as f64 - 6.5).powi(2)).sum::<f64>();
        (d2 <= 16.0) as u8 as f64
    });
    let region = box_from_mask(&mask).unwrap();
    let f = separable_features(&mask, &[1.0, 0.5, -0.7], 0.2, &mut rng(1)).unwrap();
    (f, mask, region)
}

#[test]
fn info_nce_descends_with_a_small_step() {
    let (f, _, region) = separable_case();
    let labels = coarse_labels(&region, f.dims).unwrap();
    let head = HeadParams::init(3, 16, 8, &mut rng(2));
    let mut r = rng(3);
    let voxels: Vec<usize> = rand::seq::index::sample(&mut r, f.voxels(), 200).into_vec();
    let picked: Vec<bool> = voxels.iter().map(|&v| labels.positive[v]).collect();
    let loss = |h: &HeadParams| info_nce_set(&h.embed_voxels(&f, &voxels), 8, &picked, 0.1).unwrap();
    let (before, upstream) = loss(&head);
    let g = head.backward(&f, &voxels, &upstream).unwrap();
    let mut stepped = head.clone();
    stepped.step(&g, 1e-3);
    assert!(loss(&stepped).0 < before);
}

#[test]
fn pretraining_separates_classes() {
    let (f, mask, region) = separable_case();
    let cfg = PretrainConfig {
        coarse_steps: 60,
        refine_steps: 30,
        ..Default::default()
    };
    let out = pretrain_head(&f, &region, &cfg, &mut rng(4)).unwrap();
    let e = embed(&f, &out.params).unwrap();
    let organ: Vec<usize> = (0..mask.len()).filter(|&v| mask.data()[v] == 1.0).step_by(3).collect();
    let back: Vec<usize> = (0..mask.len()).filter(|&v| mask.data()[v] == 0.0).step_by(17).collect();
    let mean = |a: &[usize], b: &[usize]| {
        let mut s = 0.0;
        for &u in a {
            for &v in b {
                s += similarity(e.vector(u), e.vector(v));
            }
        }
        s / (a.len() * b.len()) as f64
    };
    let within = (mean(&organ, &organ) + mean(&back, &back)) / 2.0;
    let across = mean(&organ, &back);
    assert!(within - across > 0.2, "within {within:.3}, across {across:.3}");
}
