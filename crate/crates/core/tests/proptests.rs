//! Property tests over randomly generated inputs.

mod common;

use drinet::autograd::softmax_rows;
use drinet::checkpoint::{self, CheckpointMeta};
use drinet::eval::{supervision_memory, ConfusionMatrix};
use drinet::network::{argmax_row, init_params, predict_probs};
use drinet::pointcloud::{
    decode_ascii_xyz, decode_kitti_bin, decode_labels, encode_ascii_xyz, encode_kitti_bin, encode_labels,
};
use drinet::scene::{generate_scene, toy_scene_spec};
use drinet::sgfe::{amf, init_sgfe, msp_shifts, SgfeConfig};
use drinet::sparse_conv::{build_rulebook, sparse_conv, ConvMode, ConvParams};
use drinet::sparse_tensor::{avg_pool, upsample_nearest};
use drinet::training::loss::{cross_entropy, lovasz_softmax};
use drinet::training::{augment, AugmentConfig};
use drinet::voxelizer::{interpolate_to_points, voxel_point_ratio, voxelize, Bounds, VoxelGridConfig};
use drinet::{Coord, CoordSet, Label, NetworkConfig, ParameterStore, PointCloud, ScaleSet, SparseVoxelTensor};
use ndarray::{Array1, Array2, Array3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn coords_strategy(max: usize, span: i32) -> impl Strategy<Value = Vec<Coord>> {
    prop::collection::vec((-span..span, -span..span, -span..span), 1..max)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Coord::new(x, y, z)).collect())
}

fn tensor_from(coords: Vec<Coord>, channels: usize, seed: u64) -> SparseVoxelTensor {
    let set = CoordSet::from_unsorted(coords, 0);
    let feats = common::random_matrix(seed, set.len(), channels);
    SparseVoxelTensor::from_parts(set, feats).unwrap()
}

fn cloud_strategy(max: usize) -> impl Strategy<Value = PointCloud> {
    prop::collection::vec(((-5.0..5.0f64, -5.0..5.0f64, -2.0..2.0f64), 0.0..1.0f64, 0u16..4), 1..max).prop_map(|v| {
        let pos = v.iter().map(|((x, y, z), _, _)| [*x, *y, *z]).collect();
        let inten = v.iter().map(|(_, i, _)| *i).collect();
        let labels = v.iter().map(|(_, _, l)| *l).collect();
        PointCloud::new(pos, inten, Some(labels)).unwrap()
    })
}

fn permuted(pc: &PointCloud, seed: u64) -> (PointCloud, Vec<usize>) {
    let mut order: Vec<usize> = (0..pc.len()).collect();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        order.swap(i, r.random_range(0..=i));
    }
    let pos = order.iter().map(|&i| pc.positions()[i]).collect();
    let inten = order.iter().map(|&i| pc.intensity()[i]).collect();
    let labels = pc.labels().map(|l| order.iter().map(|&i| l[i]).collect());
    (PointCloud::new(pos, inten, labels).unwrap(), order)
}

fn max_abs(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn coord_sets_are_sorted_unique_and_indexed(coords in coords_strategy(200, 6)) {
        let set = CoordSet::from_unsorted(coords.clone(), 0);
        prop_assert!(set.coords().windows(2).all(|w| w[0] < w[1]));
        for c in &coords {
            let i = set.lookup(*c).expect("present");
            prop_assert_eq!(set.coords()[i], *c);
        }
        for (i, c) in set.coords().iter().enumerate() {
            prop_assert_eq!(set.lookup(*c), Some(i));
        }
        prop_assert_eq!(set.lookup(Coord::new(100, 100, 100)), None);
    }

    #[test]
    fn pooling_shrinks_and_counts_match(coords in coords_strategy(200, 8), s in 2u32..5, seed in 0u64..1000) {
        let t = tensor_from(coords, 3, seed);
        let p = avg_pool(&t, s).unwrap();
        prop_assert!(p.len() <= t.len());
        let parents: std::collections::BTreeSet<_> = t.coords().iter().map(|c| c.coarsen(s as i32)).collect();
        prop_assert_eq!(p.len(), parents.len());
        prop_assert_eq!(p.len() == t.len(), parents.len() == t.len());
    }

    #[test]
    fn pooling_keeps_mean_of_full_cells(parents in coords_strategy(20, 4), seed in 0u64..1000) {
        let s = 2;
        let mut coords = Vec::new();
        for p in CoordSet::from_unsorted(parents, 0).coords() {
            for d in 0..8 {
                coords.push(Coord::new(2 * p.x + (d & 1), 2 * p.y + ((d >> 1) & 1), 2 * p.z + (d >> 2)));
            }
        }
        let t = tensor_from(coords, 4, seed);
        let pooled = avg_pool(&t, s).unwrap();
        let a = t.feats().mean_axis(ndarray::Axis(0)).unwrap();
        let b = pooled.feats().mean_axis(ndarray::Axis(0)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn upsampling_inverts_pooling_of_cellwise_constants(coords in coords_strategy(200, 8), s in 2u32..5) {
        let set = CoordSet::from_unsorted(coords, 0);
        let feats = Array2::from_shape_fn((set.len(), 2), |(i, j)| {
            let p = set.coords()[i].coarsen(s as i32);
            (p.x * 31 + p.y * 7 + p.z) as f64 + j as f64 * 0.5
        });
        let t = SparseVoxelTensor::from_parts(set.clone(), feats).unwrap();
        let back = upsample_nearest(&avg_pool(&t, s).unwrap(), &set, s).unwrap();
        prop_assert!(max_abs(back.feats(), t.feats()) <= 1e-12);
    }

    #[test]
    fn submanifold_conv_keeps_sites_and_is_linear(
        coords in coords_strategy(80, 4),
        seed in 0u64..1000,
        alpha in -2.0..2.0f64,
        beta in -2.0..2.0f64,
    ) {
        let mode = ConvMode::Submanifold { kernel: 3 };
        let x = tensor_from(coords, 3, seed);
        let y = x.with_feats(common::random_matrix(seed + 1, x.len(), 3)).unwrap();
        let mut p = ConvParams::zeros(mode, 3, 2);
        let mut r = common::rng(seed + 2);
        p.weights = Array3::from_shape_simple_fn((27, 3, 2), || r.random_range(-1.0..1.0));
        let rb = build_rulebook(x.coord_set(), mode).unwrap();

        let cx = sparse_conv(&x, &p, &rb).unwrap();
        prop_assert_eq!(cx.coords(), x.coords());
        let cy = sparse_conv(&y, &p, &rb).unwrap();
        let mix = x.with_feats(x.feats() * alpha + y.feats() * beta).unwrap();
        let cm = sparse_conv(&mix, &p, &rb).unwrap();
        let want = cx.feats() * alpha + cy.feats() * beta;
        prop_assert!(max_abs(cm.feats(), &want) <= 1e-10);
    }

    #[test]
    fn submanifold_conv_is_translation_equivariant(
        coords in coords_strategy(80, 4),
        seed in 0u64..1000,
        shift in (-20i32..20, -20i32..20, -20i32..20),
    ) {
        let mode = ConvMode::Submanifold { kernel: 3 };
        let x = tensor_from(coords, 2, seed);
        let moved: Vec<Coord> = x.coords().iter().map(|c| c.offset([shift.0, shift.1, shift.2])).collect();
        let xm = SparseVoxelTensor::new(moved, x.feats().clone(), 0).unwrap();
        let mut p = ConvParams::zeros(mode, 2, 2);
        let mut r = common::rng(seed);
        p.weights = Array3::from_shape_simple_fn((27, 2, 2), || r.random_range(-1.0..1.0));
        p.bias = Array1::from_vec(vec![0.3, -0.1]);
        let a = sparse_conv(&x, &p, &build_rulebook(x.coord_set(), mode).unwrap()).unwrap();
        let b = sparse_conv(&xm, &p, &build_rulebook(xm.coord_set(), mode).unwrap()).unwrap();
        prop_assert_eq!(a.feats(), b.feats());
    }

    #[test]
    fn msp_shift_vanishes_on_windowwise_constants(coords in coords_strategy(200, 16), seed in 0u64..1000) {
        let set = CoordSet::from_unsorted(coords, 0);
        // constant within the coarsest window, hence within every finer one
        let feats = Array2::from_shape_fn((set.len(), 3), |(i, j)| {
            let p = set.coords()[i].coarsen(16);
            ((p.x * 13 + p.y * 5 + p.z) as f64 + seed as f64) * (j as f64 + 1.0)
        });
        let t = SparseVoxelTensor::from_parts(set, feats).unwrap();
        for o in msp_shifts(&t, &ScaleSet::new(vec![2, 4, 8, 16]).unwrap()).unwrap() {
            prop_assert!(o.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn amf_output_is_bounded_by_slice_magnitudes(coords in coords_strategy(60, 6), seed in 0u64..1000) {
        let cfg = SgfeConfig::new(ScaleSet::new(vec![2, 4]).unwrap(), 4);
        let mut store = ParameterStore::new();
        init_sgfe(&mut store, "s", &cfg, &mut common::rng(seed));
        let t = tensor_from(coords, 4, seed);
        let stack = drinet::sgfe::msp(&t, &cfg, &store, "s").unwrap();
        let out = amf(&stack, &cfg, &store, "s").unwrap();
        prop_assert_eq!(out.coords(), t.coords());
        for ((i, j), v) in out.feats().indexed_iter() {
            let bound: f64 = (0..stack.num_scales()).map(|k| stack.feats()[[i, k, j]].abs()).sum();
            prop_assert!(v.abs() <= bound + 1e-12);
        }
    }

    #[test]
    fn softmax_argmax_ignores_shared_shift(
        row in prop::collection::vec(-10.0..10.0f64, 2..12),
        c in -50.0..50.0f64,
    ) {
        let x = Array2::from_shape_vec((1, row.len()), row).unwrap();
        let p = softmax_rows(x.view());
        let q = softmax_rows((&x + c).view());
        prop_assert_eq!(argmax_row(p.row(0)), argmax_row(q.row(0)));
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cross_entropy_is_nonnegative(seed in 0u64..1000, n in 1usize..30, c in 2usize..6) {
        let logits = common::random_matrix(seed, n, c) * 5.0;
        let mut r = common::rng(seed);
        let labels: Vec<Label> = (0..n).map(|_| r.random_range(0..c as Label)).collect();
        let (v, _) = cross_entropy(logits.view(), &labels, 255).unwrap();
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn lovasz_is_bounded_and_row_order_free(seed in 0u64..1000, n in 1usize..30, c in 2usize..5) {
        let probs = common::random_probs(seed, n, c);
        let mut r = common::rng(seed + 7);
        let labels: Vec<Label> = (0..n).map(|_| r.random_range(0..c as Label)).collect();
        let (v, _) = lovasz_softmax(probs.view(), &labels, 255).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));

        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        order.rotate_left(seed as usize % n);
        let p2 = Array2::from_shape_fn((n, c), |(i, j)| probs[[order[i], j]]);
        let l2: Vec<Label> = order.iter().map(|&i| labels[i]).collect();
        let (v2, _) = lovasz_softmax(p2.view(), &l2, 255).unwrap();
        prop_assert!((v - v2).abs() <= 1e-12);
    }

    #[test]
    fn confusion_matrix_ignores_order(
        pairs in prop::collection::vec((0u16..4, prop_oneof![0u16..4, Just(255u16)]), 1..200),
        split in 0usize..200,
    ) {
        let preds: Vec<Label> = pairs.iter().map(|p| p.0).collect();
        let gts: Vec<Label> = pairs.iter().map(|p| p.1).collect();
        let mut whole = ConfusionMatrix::new(4, 255);
        whole.accumulate(&preds, &gts).unwrap();

        let k = split.min(pairs.len());
        let mut a = ConfusionMatrix::new(4, 255);
        a.accumulate(&preds[k..], &gts[k..]).unwrap();
        a.accumulate(&preds[..k], &gts[..k]).unwrap();
        prop_assert_eq!(&a, &whole);

        let mut rev = ConfusionMatrix::new(4, 255);
        let rp: Vec<Label> = preds.iter().rev().copied().collect();
        let rg: Vec<Label> = gts.iter().rev().copied().collect();
        rev.accumulate(&rp, &rg).unwrap();
        prop_assert_eq!(&rev, &whole);

        if let Ok(s) = whole.scores() {
            for m in [s.miou, s.acc, s.fwiou] {
                prop_assert!((0.0..=1.0).contains(&m));
            }
        }
    }

    #[test]
    fn memory_ratio_is_active_fraction(active in 1u64..10_000, classes in 1usize..30, bytes in 1u64..9) {
        let b = Bounds::new([0.0; 3], [10.0, 10.0, 2.0]).unwrap();
        let r = supervision_memory(&b, 0.2, classes, active, bytes, bytes).unwrap();
        prop_assert_eq!(r.ratio, active as f64 / r.cells as f64);
    }

    #[test]
    fn identity_augmentation_is_exact(pc in cloud_strategy(200), seed in 0u64..1000) {
        prop_assert_eq!(augment(&pc, &AugmentConfig::identity(), seed).unwrap(), pc);
    }

    #[test]
    fn label_codec_round_trips(labels in prop::collection::vec(any::<u16>(), 0..300)) {
        let bytes = encode_labels(&labels);
        prop_assert_eq!(decode_labels(&bytes, Some(labels.len())).unwrap(), labels);
    }

    #[test]
    fn kitti_decode_follows_record_order(
        vals in prop::collection::vec((-100.0..100.0f32, -100.0..100.0f32, -10.0..10.0f32, 0.0..1.0f32), 1..100),
        seed in 0u64..1000,
    ) {
        let pc = PointCloud::new(
            vals.iter().map(|v| [v.0 as f64, v.1 as f64, v.2 as f64]).collect(),
            vals.iter().map(|v| v.3 as f64).collect(),
            None,
        )
        .unwrap();
        let decoded = decode_kitti_bin(&encode_kitti_bin(&pc)).unwrap();
        prop_assert_eq!(&decoded, &pc);
        let (shuffled, order) = permuted(&pc, seed);
        let d2 = decode_kitti_bin(&encode_kitti_bin(&shuffled)).unwrap();
        for (i, &o) in order.iter().enumerate() {
            prop_assert_eq!(d2.positions()[i], pc.positions()[o]);
            prop_assert_eq!(d2.intensity()[i], pc.intensity()[o]);
        }
    }

    #[test]
    fn ascii_codec_round_trips(pc in cloud_strategy(100)) {
        prop_assert_eq!(decode_ascii_xyz(&encode_ascii_xyz(&pc)).unwrap(), pc);
    }

    #[test]
    fn voxelization_ignores_point_order(pc in cloud_strategy(300), seed in 0u64..1000, size in 0.2..1.5f64) {
        let cfg = VoxelGridConfig::new(size).unwrap();
        let (a, _) = voxelize(&pc, &cfg).unwrap();
        let (shuffled, _) = permuted(&pc, seed);
        let (b, _) = voxelize(&shuffled, &cfg).unwrap();
        prop_assert_eq!(a.coords(), b.coords());
        prop_assert!(max_abs(a.feats(), b.feats()) <= 1e-12);
    }

    #[test]
    fn points_read_back_their_own_voxel(pc in cloud_strategy(300), size in 0.2..1.5f64) {
        let cfg = VoxelGridConfig::new(size).unwrap();
        let (t, map) = voxelize(&pc, &cfg).unwrap();
        let per_point = interpolate_to_points(&t, &map).unwrap();
        for (i, p) in pc.positions().iter().enumerate() {
            let v = t.lookup(drinet::voxelizer::quantize(*p, &cfg)).unwrap();
            prop_assert_eq!(per_point.row(i), t.feats().row(v));
        }
    }

    #[test]
    fn voxel_ratio_is_monotone(pc in cloud_strategy(300)) {
        let r = voxel_point_ratio(&pc, &[0.05, 0.1, 0.2, 0.4, 0.8]).unwrap();
        prop_assert!(r.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(r.iter().all(|&v| v > 0.0 && v <= 1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn network_outputs_are_distributions(coords in coords_strategy(60, 6), seed in 0u64..1000) {
        let cfg = NetworkConfig {
            num_blocks: 2,
            channels: 8,
            scales: ScaleSet::new(vec![2, 4]).unwrap(),
            num_classes: 3,
            ..Default::default()
        };
        let store = init_params(&cfg, seed).unwrap();
        let t = tensor_from(coords, 5, seed);
        let p = predict_probs(&t, &cfg, &store).unwrap();
        prop_assert_eq!(p.dim(), (t.len(), 3));
        for row in p.outer_iter() {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn checkpoints_round_trip(seed in 0u64..1000, step in any::<u64>(), voxel in 0.01..2.0f64) {
        let network = NetworkConfig {
            num_blocks: 1,
            channels: 4,
            scales: ScaleSet::new(vec![2]).unwrap(),
            num_classes: 2,
            ..Default::default()
        };
        let store = init_params(&network, seed).unwrap();
        let meta = CheckpointMeta { voxel_size: voxel, step, network };
        let (m2, s2) = checkpoint::decode(&checkpoint::encode(&meta, &store).unwrap()).unwrap();
        prop_assert_eq!(m2, meta);
        prop_assert_eq!(s2, store);
    }

    #[test]
    fn scene_generation_is_pure(seed in 0u64..1000, n in 10usize..500) {
        let a = generate_scene(&toy_scene_spec(seed, n)).unwrap();
        let b = generate_scene(&toy_scene_spec(seed, n)).unwrap();
        prop_assert_eq!(a, b);
    }
}

