//! Randomized properties of the geometry, assignment, loss, network,
//! post-processing, evaluation and file-format layers.

use nnad::assign::{
    assign_targets, write_targets_jsonl, AnchorState, AnchorTarget, AssignConfig,
    GroundTruthObject, TargetRecord,
};
use nnad::eval::{
    average_precision, match_detections, seg_confusion, seg_metrics, Difficulty,
    DifficultyLevel, DifficultyMode, InstanceMap, LabelMap, MatchFlag, MetricsReport,
    SegAccumulator, ScoredBox,
};
use nnad::geom::{
    decode, encode, iou, make_anchor_grid, AnchorTemplate, BBox, BoxDelta, DELTA_CLAMP,
};
use nnad::loss::{
    contrastive_loss, cross_entropy, focal_loss, focal_term, kendall_total, smooth_l1,
    ClassLayout, FocalParams, Objectness,
};
use nnad::net::checkpoint::Checkpoint;
use nnad::net::{
    Conv2d, ConvOptions, DepthwiseSeparableConv, HeadOutputs, Layer, Model, ModelConfig, Tensor,
    TransposedConv2d,
};
use nnad::pipeline::{boxes_from_polygons, AnnotatedObject, AnnotationFile};
use nnad::pipeline::image_io::{
    read_instance_pgm, read_label_pgm, read_ppm, write_instance_pgm, write_label_pgm, write_ppm,
    RgbImage,
};
use nnad::pipeline::ClassTable;
use nnad::post::{
    decode_detections, nms, read_detections_jsonl, write_detections_jsonl, DetectionRecord,
};
use nnad::selftest::{assign_mismatches, random_assign_scene, random_detections};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0..100.0f64, -50.0..100.0f64, 0.0..60.0f64, 0.0..60.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn sized_bbox() -> impl Strategy<Value = BBox> {
    (-50.0..100.0f64, -50.0..100.0f64, 0.5..60.0f64, 0.5..60.0f64)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn random_tensor(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

// geometry

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
    }

    #[test]
    fn iou_with_itself_is_one(a in sized_bbox()) {
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn decode_inverts_encode(a in sized_bbox(), g in sized_bbox()) {
        let d = encode(&a, &g).unwrap();
        let back = decode(&a, &d);
        for (x, y) in [(back.x_min, g.x_min), (back.y_min, g.y_min), (back.x_max, g.x_max), (back.y_max, g.y_max)] {
            prop_assert!(rel(x, y) <= 1e-9, "{:?} vs {:?}", back, g);
        }
    }

    #[test]
    fn templates_reconstruct_their_area(ratio in 0.05..20.0f64, area in 1.0..1e5f64) {
        let t = AnchorTemplate::new(ratio, area).unwrap();
        prop_assert!((t.width() * t.height() - area).abs() <= 1e-9 * area);
    }

    #[test]
    fn anchor_grid_layout(w in 8usize..80, h in 8usize..80, stride in 4usize..12, n in 1usize..5) {
        let ts: Vec<AnchorTemplate> = (0..n).map(|i| AnchorTemplate::new(0.5 + i as f64, 64.0 * (i + 1) as f64).unwrap()).collect();
        let grid = make_anchor_grid(w, h, stride, &ts).unwrap();
        prop_assert_eq!(grid.len(), grid.rows() * grid.cols() * n);
        let mut seen = vec![false; grid.len()];
        for r in 0..grid.rows() {
            for c in 0..grid.cols() {
                for t in 0..n {
                    let i = grid.index(r, c, t);
                    prop_assert!(!seen[i]);
                    seen[i] = true;
                    prop_assert_eq!(grid.locate(i), (r, c, t));
                    let (cx, cy) = grid.boxes()[i].center();
                    prop_assert!((cx - (c as f64 + 0.5) * stride as f64).abs() < 1e-9);
                    prop_assert!((cy - (r as f64 + 0.5) * stride as f64).abs() < 1e-9);
                }
            }
        }
    }
}

// assignment

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn assignment_invariants(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (grid, gts) = random_assign_scene(&mut rng).unwrap();
        let (w, h) = grid.image_size();
        let cfg = AssignConfig::default();
        let targets = assign_targets(&grid, &gts, w, h, &cfg).unwrap();
        prop_assert_eq!(targets.len(), grid.len());
        prop_assert_eq!(assign_mismatches(&grid, &gts).unwrap(), 0);

        for (a, t) in targets.iter().enumerate() {
            let anchor = grid.boxes()[a];
            let mut overlaps: Vec<f64> = gts.iter().map(|g| iou(&anchor, &g.bbox)).collect();
            overlaps.sort_by(|x, y| y.total_cmp(x));
            let b1 = overlaps.first().copied().unwrap_or(0.0);
            let b2 = overlaps.get(1).copied().unwrap_or(0.0);
            let ambiguous = b1 >= cfg.dontcare_iou && b2 >= cfg.dontcare_iou && b1 - b2 < cfg.ambiguity_gap;
            if let AnchorTarget::Active { delta, instance_id, .. } = t {
                prop_assert!(!ambiguous, "active anchor {} is ambiguous", a);
                let g = gts.iter().find(|g| g.instance_id == *instance_id).unwrap();
                let back = decode(&anchor, delta);
                for (x, y) in [(back.x_min, g.bbox.x_min), (back.y_min, g.bbox.y_min), (back.x_max, g.bbox.x_max), (back.y_max, g.bbox.y_max)] {
                    prop_assert!((x - y).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn removing_a_gt_never_makes_ambiguous_anchors_border_dontcare(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (grid, gts) = random_assign_scene(&mut rng).unwrap();
        let (w, h) = grid.image_size();
        let cfg = AssignConfig::default();
        let targets = assign_targets(&grid, &gts, w, h, &cfg).unwrap();
        for k in 0..gts.len() {
            let mut fewer = gts.clone();
            fewer.remove(k);
            let after = assign_targets(&grid, &fewer, w, h, &cfg).unwrap();
            for (a, t) in targets.iter().enumerate() {
                let anchor = grid.boxes()[a];
                let mut ov: Vec<f64> = gts.iter().map(|g| iou(&anchor, &g.bbox)).collect();
                ov.sort_by(|x, y| y.total_cmp(x));
                let rule3 = *t == AnchorTarget::Inactive
                    && ov.len() >= 2
                    && ov[1] >= cfg.dontcare_iou
                    && ov[0] - ov[1] < cfg.ambiguity_gap;
                if rule3 && after[a] == AnchorTarget::DontCare {
                    prop_assert!(!grid.is_outside(a), "anchor {} became border don't care", a);
                }
            }
        }
    }
}

// losses

fn logits(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0..6.0f64, n)
}

fn objectness() -> impl Strategy<Value = Objectness> {
    prop_oneof![
        Just(Objectness::Foreground),
        Just(Objectness::Background),
        Just(Objectness::DontCare)
    ]
}

proptest! {
    #[test]
    fn losses_are_non_negative(
        z in logits(24),
        obj in prop::collection::vec(objectness(), 12),
        cls in prop::collection::vec(prop::option::of(0usize..3), 8),
        emb in logits(12),
        ids in prop::collection::vec(1u32..4, 4),
    ) {
        let f = focal_loss(&z, ClassLayout::rows(2), &obj, &FocalParams::default()).unwrap();
        prop_assert!(f.value >= 0.0);
        let c = cross_entropy(&z, ClassLayout::rows(3), &cls).unwrap();
        prop_assert!(c.value >= 0.0);
        let pred: Vec<BoxDelta> = z.chunks(4).map(|v| BoxDelta::from_array([v[0], v[1], v[2], v[3]])).collect();
        let tgt: Vec<BoxDelta> = z.chunks(4).rev().map(|v| BoxDelta::from_array([v[0], v[1], v[2], v[3]])).collect();
        let s = smooth_l1(&pred, &tgt, &[true; 6]).unwrap();
        prop_assert!(s.value >= 0.0);
        let k = contrastive_loss(&emb, 3, &ids, 1.0).unwrap();
        prop_assert!(k.value >= 0.0);
    }

    #[test]
    fn losses_vanish_at_perfect_predictions(
        d in prop::collection::vec(-3.0..3.0f64, 8),
        centers in prop::collection::vec(0.0..1.0f64, 2),
    ) {
        prop_assert_eq!(focal_term(1.0, &FocalParams::default()), 0.0);
        let deltas: Vec<BoxDelta> = d.chunks(4).map(|v| BoxDelta::from_array([v[0], v[1], v[2], v[3]])).collect();
        prop_assert_eq!(smooth_l1(&deltas, &deltas, &[true, true]).unwrap().value, 0.0);
        // two instances, two anchors each, far apart in embedding space
        let a = centers[0];
        let b = centers[1] + 5.0;
        let emb = [a, a, b, b];
        let out = contrastive_loss(&emb, 1, &[1, 1, 2, 2], 1.0).unwrap();
        prop_assert_eq!(out.value, 0.0);
        prop_assert!(out.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn focal_without_focusing_is_cross_entropy(z in logits(20), obj in prop::collection::vec(objectness(), 10)) {
        let p = FocalParams { alpha: 1.0, gamma: 0.0 };
        let f = focal_loss(&z, ClassLayout::rows(2), &obj, &p).unwrap();
        let t: Vec<Option<usize>> = obj.iter().map(|o| match o {
            Objectness::Foreground => Some(1),
            Objectness::Background => Some(0),
            Objectness::DontCare => None,
        }).collect();
        let c = cross_entropy(&z, ClassLayout::rows(2), &t).unwrap();
        prop_assert!((f.value - c.value).abs() <= 1e-12);
        for (a, b) in f.grad.iter().zip(&c.grad) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn masked_positions_do_not_matter(
        z in logits(20),
        obj in prop::collection::vec(objectness(), 10),
        noise in logits(20),
        active in prop::collection::vec(any::<bool>(), 5),
    ) {
        let params = FocalParams::default();
        let base = focal_loss(&z, ClassLayout::rows(2), &obj, &params).unwrap();
        let mut moved = z.clone();
        for (e, o) in obj.iter().enumerate() {
            if *o == Objectness::DontCare {
                moved[2 * e] += noise[2 * e];
                moved[2 * e + 1] += noise[2 * e + 1];
            }
        }
        let after = focal_loss(&moved, ClassLayout::rows(2), &obj, &params).unwrap();
        prop_assert_eq!(base.value, after.value);
        prop_assert_eq!(&base.grad, &after.grad);

        let pred: Vec<BoxDelta> = z.chunks(4).map(|v| BoxDelta::from_array([v[0], v[1], v[2], v[3]])).collect();
        let tgt = vec![BoxDelta::ZERO; 5];
        let mut shifted = pred.clone();
        for (i, on) in active.iter().enumerate() {
            if !on {
                shifted[i] = BoxDelta::from_array([noise[4 * i], noise[4 * i + 1], noise[4 * i + 2], noise[4 * i + 3]]);
            }
        }
        let a = smooth_l1(&pred, &tgt, &active).unwrap();
        let b = smooth_l1(&shifted, &tgt, &active).unwrap();
        prop_assert_eq!(a.value, b.value);
        prop_assert_eq!(&a.grad, &b.grad);
    }

    #[test]
    fn kendall_with_unit_variances_is_the_plain_sum(losses in prop::collection::vec(0.0..10.0f64, 1..6)) {
        let zeros = vec![0.0; losses.len()];
        let k = kendall_total(&losses, &zeros).unwrap();
        prop_assert_eq!(k.total, losses.iter().sum::<f64>());
    }
}

// network

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn depthwise_separable_is_depthwise_then_pointwise(seed in any::<u64>(), cin in 1usize..5, cout in 1usize..5, dil in 1usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ds = DepthwiseSeparableConv::new("ds", cin, cout, 3, dil, &mut rng).unwrap();
        let mut dw = Conv2d::new("dw", cin, cin, 3, ConvOptions::same(3, dil).groups(cin).bias(false), &mut rng).unwrap();
        let mut pw = Conv2d::new("pw", cin, cout, 1, ConvOptions::same(1, 1), &mut rng).unwrap();
        dw.weight.value = ds.depthwise.weight.value.clone();
        pw.weight.value = ds.pointwise.weight.value.clone();
        pw.bias.as_mut().unwrap().value = ds.pointwise.bias.as_ref().unwrap().value.clone();
        let x = random_tensor(&mut rng, [2, cin, 7, 6]);
        let fused = ds.forward(&x).unwrap();
        let composed = pw.forward(&dw.forward(&x).unwrap()).unwrap();
        prop_assert_eq!(fused, composed);
    }

    #[test]
    fn unit_dilation_is_standard_convolution(seed in any::<u64>(), cin in 1usize..4, cout in 1usize..4, k in prop::sample::select(vec![1usize, 3, 5])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dilated = Conv2d::new("d", cin, cout, k, ConvOptions::same(k, 1), &mut rng).unwrap();
        let plain_opts = ConvOptions { stride: 1, padding: (k - 1) / 2, dilation: 1, groups: 1, bias: true };
        let mut plain = Conv2d::new("p", cin, cout, k, plain_opts, &mut rng).unwrap();
        plain.weight.value = dilated.weight.value.clone();
        plain.bias.as_mut().unwrap().value = dilated.bias.as_ref().unwrap().value.clone();
        let x = random_tensor(&mut rng, [1, cin, 8, 9]);
        prop_assert_eq!(dilated.forward(&x).unwrap(), plain.forward(&x).unwrap());
    }

    #[test]
    fn dilated_conv_is_conv_with_spread_kernel(seed in any::<u64>(), cin in 1usize..4, cout in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dilated = Conv2d::new("d", cin, cout, 3, ConvOptions::same(3, 2).bias(false), &mut rng).unwrap();
        let mut spread = Conv2d::new("s", cin, cout, 5, ConvOptions::same(5, 1).bias(false), &mut rng).unwrap();
        let mut w = Tensor::zeros([cout, cin, 5, 5]);
        for o in 0..cout {
            for i in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        w.set(o, i, 2 * ky, 2 * kx, dilated.weight.value.at(o, i, ky, kx));
                    }
                }
            }
        }
        spread.weight.value = w;
        let x = random_tensor(&mut rng, [1, cin, 9, 8]);
        let (a, b) = (dilated.forward(&x).unwrap(), spread.forward(&x).unwrap());
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn transposed_conv_is_the_adjoint(seed in any::<u64>(), cin in 1usize..4, cout in 1usize..4, h in 2usize..6, w in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = Conv2d::new("c", cin, cout, 4, ConvOptions { stride: 2, padding: 1, dilation: 1, groups: 1, bias: false }, &mut rng).unwrap();
        let mut up = TransposedConv2d::new("t", cout, cin, 4, 2, 1, false, &mut rng).unwrap();
        up.weight.value = conv.weight.value.clone();
        let x = random_tensor(&mut rng, [1, cin, 2 * h, 2 * w]);
        let y = random_tensor(&mut rng, [1, cout, h, w]);
        let lhs = conv.forward(&x).unwrap().dot(&y);
        let rhs = x.dot(&up.forward(&y).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10, "{} vs {}", lhs, rhs);
    }
}

fn small_config(t: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(4, 2, 3, t);
    cfg.stem_channels = 4;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn model_output_geometry(seed in any::<u64>(), h8 in 1usize..5, w8 in 1usize..5, t in 1usize..4) {
        let model = Model::new(small_config(t), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (8 * h8, 8 * w8);
        let x = random_tensor(&mut rng, [1, 3, h, w]);
        let out = model.forward(&x).unwrap();
        prop_assert_eq!(out.seg.shape(), [1, 4, h, w]);
        prop_assert_eq!(out.objectness.shape(), [1, 2 * t, h8, w8]);
        prop_assert_eq!(out.class_scores.shape(), [1, 2 * t, h8, w8]);
        prop_assert_eq!(out.box_deltas.shape(), [1, 4 * t, h8, w8]);
        prop_assert_eq!(out.embeddings.shape(), [1, 3 * t, h8, w8]);
        prop_assert!(out.is_finite());
        let again = Model::new(small_config(t), seed).unwrap().forward(&x).unwrap();
        prop_assert_eq!(out, again);
    }
}

// post-processing

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn nms_properties(seed in any::<u64>(), n in 0usize..60, thr in 0.1..0.9f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dets = random_detections(&mut rng, n);
        let kept = nms(&dets, thr);
        for k in &kept {
            prop_assert!(dets.contains(k));
        }
        for (i, a) in kept.iter().enumerate() {
            for b in &kept[i + 1..] {
                prop_assert!(a.class_id != b.class_id || iou(&a.bbox, &b.bbox) <= thr);
            }
        }
        for class in 0..3 {
            if let Some(top) = dets.iter().filter(|d| d.class_id == class).max_by(|a, b| a.objectness.total_cmp(&b.objectness)) {
                prop_assert!(kept.iter().any(|k| k.class_id == class && k.objectness == top.objectness));
            }
        }
        prop_assert_eq!(nms(&kept, thr), kept);
    }

    #[test]
    fn decoded_detections_re_encode_to_head_deltas(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ts = [AnchorTemplate::new(1.0, 256.0).unwrap(), AnchorTemplate::new(2.0, 400.0).unwrap()];
        let grid = make_anchor_grid(24, 16, 8, &ts).unwrap();
        let (rows, cols) = (grid.rows(), grid.cols());
        let outputs = HeadOutputs {
            seg: Tensor::zeros([1, 4, 16, 24]),
            objectness: random_tensor(&mut rng, [1, 4, rows, cols]),
            class_scores: random_tensor(&mut rng, [1, 4, rows, cols]),
            box_deltas: random_tensor(&mut rng, [1, 8, rows, cols]),
            embeddings: random_tensor(&mut rng, [1, 6, rows, cols]),
        };
        let dets = decode_detections(&outputs, 0, &grid, 0.0).unwrap();
        prop_assert_eq!(dets.len(), grid.len());
        let plane = rows * cols;
        for d in &dets {
            let (r, c, t) = grid.locate(d.anchor_index);
            let cell = r * cols + c;
            let head: Vec<f64> = (0..4).map(|g| outputs.box_deltas.data()[(t * 4 + g) * plane + cell]).collect();
            let back = encode(&grid.boxes()[d.anchor_index], &d.bbox).unwrap().to_array();
            for g in 0..4 {
                let want = if g >= 2 { head[g].clamp(-DELTA_CLAMP, DELTA_CLAMP) } else { head[g] };
                prop_assert!((back[g] - want).abs() <= 1e-9);
            }
            prop_assert!((0.0..=1.0).contains(&d.objectness));
        }
    }
}

// evaluation

fn flags_and_scores() -> impl Strategy<Value = (Vec<MatchFlag>, Vec<f64>, usize)> {
    (1usize..8, prop::collection::vec((any::<bool>(), 0.0..1.0f64), 0..12)).prop_map(|(extra, v)| {
        let flags: Vec<MatchFlag> = v
            .iter()
            .map(|(tp, _)| if *tp { MatchFlag::TruePositive } else { MatchFlag::FalsePositive })
            .collect();
        // distinct scores so ranks are unambiguous
        let scores: Vec<f64> = v.iter().enumerate().map(|(i, (_, s))| s * 0.5 + i as f64 * 1e-3).collect();
        let tps = flags.iter().filter(|f| **f == MatchFlag::TruePositive).count();
        (flags, scores, tps + extra)
    })
}

proptest! {
    #[test]
    fn ap_depends_only_on_rank((flags, scores, gts) in flags_and_scores()) {
        let a = average_precision(&flags, &scores, gts).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.ap));
        let moved: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert_eq!(a.ap, average_precision(&flags, &moved, gts).unwrap().ap);
        for w in a.points.windows(2) {
            prop_assert!(w[1].0 >= w[0].0);
        }
    }

    #[test]
    fn unmatched_detections_never_raise_ap((flags, scores, gts) in flags_and_scores(), s in 0.0..0.6f64) {
        let base = average_precision(&flags, &scores, gts).unwrap().ap;
        let mut f = flags.clone();
        let mut sc = scores.clone();
        f.push(MatchFlag::FalsePositive);
        sc.push(s + 1e-7);
        prop_assert!(average_precision(&f, &sc, gts).unwrap().ap <= base + 1e-12);
    }

    #[test]
    fn top_ranked_true_positives_never_lower_ap((flags, scores, gts) in flags_and_scores()) {
        let base = average_precision(&flags, &scores, gts).unwrap().ap;
        let mut f = vec![MatchFlag::TruePositive];
        f.extend(&flags);
        let mut sc = vec![10.0];
        sc.extend(&scores);
        prop_assert!(average_precision(&f, &sc, gts).unwrap().ap >= base - 1e-12);
    }

    #[test]
    fn difficulty_levels_nest(h in 1.0..200.0f64, w in 1.0..200.0f64) {
        let g = GroundTruthObject::new(0, BBox::new(0.0, 0.0, w, h), 1);
        let [easy, moderate, hard] = DifficultyLevel::all(DifficultyMode::CityscapesAdjusted);
        prop_assert!(!easy.counts(&g) || moderate.counts(&g));
        prop_assert!(!moderate.counts(&g) || hard.counts(&g));
        // an uncounted object is still seen: a matching detection is ignored, not a false positive
        let det = ScoredBox { bbox: g.bbox, score: 0.9, class_id: 0 };
        for level in [easy, moderate, hard] {
            let m = match_detections(&[det], std::slice::from_ref(&g), 0, 0.5, &level);
            let want = if level.counts(&g) { MatchFlag::TruePositive } else { MatchFlag::Ignored };
            prop_assert_eq!(&m.flags, &vec![want]);
        }
        prop_assert_eq!(DifficultyLevel::new(DifficultyMode::CityscapesAdjusted, Difficulty::Hard), hard);
    }
}

fn label_pair() -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (2usize..12, 2usize..12).prop_flat_map(|(w, h)| {
        (
            prop::collection::vec(0u8..4, w * h),
            prop::collection::vec(0u8..4, w * h),
        )
            .prop_map(move |(a, b)| (LabelMap::new(w, h, a).unwrap(), LabelMap::new(w, h, b).unwrap()))
    })
}

proptest! {
    #[test]
    fn segmentation_scores_are_bounded_means((pred, gt) in label_pair()) {
        let table = ClassTable::synthetic();
        let cm = seg_confusion(&pred, &gt, 4).unwrap();
        let m = seg_metrics(&cm, &[], &table).unwrap();
        let present: Vec<f64> = m.classes.iter().filter_map(|c| c.iou).collect();
        for v in &present {
            prop_assert!((0.0..=1.0).contains(v));
        }
        let mean = present.iter().sum::<f64>() / present.len() as f64;
        prop_assert!((m.mean_iou.unwrap() - mean).abs() <= 1e-12);
    }

    #[test]
    fn equal_sized_instances_give_iiou_equal_to_iou(n in 1usize..4, size in 2usize..6, wrong in prop::collection::vec(0usize..36, 0..8)) {
        // n square car instances of equal size side by side on road
        let table = ClassTable::synthetic();
        let (road, car) = (table.id("road").unwrap() as u8, table.id("car").unwrap() as u8);
        let (w, h) = (n * size + 2, size + 2);
        let mut gt = LabelMap::filled(w, h, road);
        let mut inst = InstanceMap::empty(w, h);
        for k in 0..n {
            for y in 1..=size {
                for x in 0..size {
                    gt.set(1 + k * size + x, y, car);
                    inst.set(1 + k * size + x, y, k as u16 + 1);
                }
            }
        }
        let mut pred = gt.clone();
        for p in wrong {
            let (x, y) = (p % w, (p / w) % h);
            pred.set(x, y, if gt.get(x, y) == car { road } else { car });
        }
        let mut acc = SegAccumulator::new(4);
        acc.add(&pred, &gt, Some(&inst), &table).unwrap();
        let m = acc.finish(&table).unwrap();
        let c = &m.classes[car as usize];
        prop_assert!((c.iou.unwrap() - c.iiou.unwrap()).abs() <= 1e-12);
    }
}

// annotations and files

fn polygon() -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec((0.0..60.0f64, 0.0..60.0f64).prop_map(|(x, y)| [x, y]), 3..8)
}

proptest! {
    #[test]
    fn polygon_boxes_ignore_vertex_order_and_repeats(poly in polygon(), shift in 0usize..8, dup in 0usize..8) {
        let table = ClassTable::synthetic();
        let ann = |p: Vec<[f64; 2]>| AnnotationFile {
            width: 64,
            height: 64,
            objects: vec![AnnotatedObject { label: "car".into(), polygon: p, instance_id: None, occlusion: None, truncation: None }],
        };
        let mut other = poly.clone();
        other.rotate_left(shift % poly.len());
        other.reverse();
        other.push(poly[dup % poly.len()]);
        let a = boxes_from_polygons(&ann(poly.clone()), &table).unwrap();
        let b = boxes_from_polygons(&ann(other), &table).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn image_files_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = RgbImage::new(w, h);
        let mut labels = LabelMap::filled(w, h, 0);
        let mut inst = InstanceMap::empty(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, [rng.random(), rng.random(), rng.random()]);
                labels.set(x, y, rng.random_range(0..4));
                inst.set(x, y, rng.random_range(0..1000));
            }
        }
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        prop_assert_eq!(read_ppm(buf.as_slice()).unwrap(), img);
        buf.clear();
        write_label_pgm(&mut buf, &labels).unwrap();
        prop_assert_eq!(read_label_pgm(buf.as_slice()).unwrap(), labels);
        buf.clear();
        write_instance_pgm(&mut buf, &inst).unwrap();
        prop_assert_eq!(read_instance_pgm(buf.as_slice()).unwrap(), inst);
    }

    #[test]
    fn json_lines_round_trip(seed in any::<u64>(), n in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let records: Vec<DetectionRecord> = random_detections(&mut rng, n)
            .iter()
            .enumerate()
            .map(|(i, d)| DetectionRecord::new(&format!("img{}", i % 3), if d.class_id == 0 { "car" } else { "person" }, d))
            .collect();
        let mut buf = Vec::new();
        write_detections_jsonl(&mut buf, &records).unwrap();
        prop_assert_eq!(read_detections_jsonl(buf.as_slice()).unwrap(), records);

        let (grid, gts) = random_assign_scene(&mut rng).unwrap();
        let (w, h) = grid.image_size();
        let targets = assign_targets(&grid, &gts, w, h, &AssignConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_targets_jsonl(&mut buf, &targets).unwrap();
        let back: Vec<AnchorTarget> = std::str::from_utf8(&buf)
            .unwrap()
            .lines()
            .enumerate()
            .map(|(i, l)| {
                let r: TargetRecord = serde_json::from_str(l).unwrap();
                assert_eq!(r.anchor_index, i);
                assert_eq!(r.class_id.is_some(), r.state == AnchorState::Active);
                r.to_target().unwrap()
            })
            .collect();
        prop_assert_eq!(back, targets);
    }

    #[test]
    fn metrics_reports_round_trip((pred, gt) in label_pair()) {
        let table = ClassTable::synthetic();
        let m = seg_metrics(&seg_confusion(&pred, &gt, 4).unwrap(), &[], &table).unwrap();
        let report = MetricsReport::from_seg(&m);
        let text = serde_json::to_string(&report).unwrap();
        prop_assert_eq!(MetricsReport::from_json(&text).unwrap(), report);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(4))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>()) {
        let model = Model::new(small_config(2), seed).unwrap();
        let ck = Checkpoint::from_model(serde_json::json!({ "seed": seed }), &model).unwrap();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(&back, &ck);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, [1, 3, 16, 16]);
        prop_assert_eq!(back.build_model().unwrap().forward(&x).unwrap(), model.forward(&x).unwrap());
    }
}
