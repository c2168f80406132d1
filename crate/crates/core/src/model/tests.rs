use super::*;
use crate::anchors::{generate_anchors, LaneGrid};
use crate::loss::{total_loss, LossConfig};
use crate::matching::assign_targets;
use crate::numerics::{dense, mac_total, reset_mac_counter};
use proptest::prelude::*;

fn random(shape: &[usize], rng: &mut XorShift64Star) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn vertical_anchor(id: usize, x: f64, h_f: usize) -> Anchor {
    Anchor {
        id,
        border: Border::Bottom,
        x_orig: x,
        y_orig: 0.0,
        theta: 90.0,
        start_index: 0,
        feature_cols: vec![x as i64; h_f],
    }
}

/// One stride-2 stage on a 16×16 input: an 8×8 feature map, two anchors.
fn toy_model(use_attention: bool) -> LaneAtt {
    let config = ModelConfig {
        backbone: BackboneConfig {
            input_height: 16,
            input_width: 16,
            stage_channels: vec![3],
            stage_strides: vec![2],
            reduced_channels: 2,
        },
        n_pts: 8,
        num_classes: 1,
        use_attention,
        per_boundary_heads: false,
    };
    let grid = config.lane_grid();
    let set = AnchorSet {
        anchors: vec![vertical_anchor(0, 4.5, 0), vertical_anchor(1, 12.5, 0)],
        config: AnchorConfig::default(),
        grid,
        feature: None,
    };
    LaneAtt::new(config, set, 11).unwrap()
}

fn small_default(per_boundary_heads: bool) -> LaneAtt {
    let config = ModelConfig {
        per_boundary_heads,
        ..Default::default()
    };
    let grid = config.lane_grid();
    let full = generate_anchors(&AnchorConfig::default(), grid).unwrap();
    let picks: Vec<usize> = (0..full.len()).step_by(97).collect();
    LaneAtt::new(config, full.select(&picks), 3).unwrap()
}

#[test]
fn zero_image_zero_biases_give_zero_features() {
    let mut m = small_default(false);
    for (name, p) in m.names.clone().iter().zip(m.params_mut()) {
        if name.ends_with(".bias") {
            p.data_mut().fill(0.0);
        }
    }
    let mut tape = Tape::no_grad();
    let out = m.forward(&mut tape, Tensor::zeros(&[3, 160, 320])).unwrap();
    let f = tape.value(out.features);
    assert_eq!(f.shape(), [16, 10, 20]);
    assert!(f.data().iter().all(|&v| v == 0.0));
}

#[test]
fn counted_macs_match_analytic_sum() {
    for per_boundary in [false, true] {
        let m = small_default(per_boundary);
        let mut tape = Tape::no_grad();
        reset_mac_counter();
        m.forward(&mut tape, Tensor::zeros(&[3, 160, 320])).unwrap();
        assert_eq!(mac_total(), m.analytic_macs());
    }
}

#[test]
fn wrong_image_shape_rejected() {
    let m = toy_model(true);
    let mut tape = Tape::no_grad();
    assert!(matches!(
        m.forward(&mut tape, Tensor::zeros(&[3, 8, 16])),
        Err(Error::Dimension { .. })
    ));
}

#[test]
fn pooling_examples() {
    let map = Tensor::full(&[2, 4, 5], 3.5);
    let inside = vertical_anchor(0, 2.0, 4);
    assert!(pool_features(&map, &inside).unwrap().data().iter().all(|&v| v == 3.5));
    let outside = Anchor {
        feature_cols: vec![-1, 5, 9, -3],
        ..inside.clone()
    };
    assert!(pool_features(&map, &outside).unwrap().data().iter().all(|&v| v == 0.0));
    let short = Anchor {
        feature_cols: vec![1; 3],
        ..inside
    };
    assert!(pool_features(&map, &short).is_err());
}

#[test]
fn pooling_matches_naive_gather() {
    let mut rng = XorShift64Star::new(4);
    let (c, h, w) = (3, 6, 7);
    let map = random(&[c, h, w], &mut rng);
    for _ in 0..20 {
        let cols: Vec<i64> = (0..h).map(|_| rng.range_inclusive(0, 10) as i64 - 2).collect();
        let anchor = Anchor {
            feature_cols: cols.clone(),
            ..vertical_anchor(0, 0.0, 0)
        };
        let pooled = pool_features(&map, &anchor).unwrap();
        let mut expected = Vec::new();
        for j in 0..h {
            // j counts upward; row 0 of the map is the top.
            let row = h - 1 - j;
            for ch in 0..c {
                let x = cols[j];
                expected.push(if (0..w as i64).contains(&x) {
                    map.data()[ch * h * w + row * w + x as usize]
                } else {
                    0.0
                });
            }
        }
        assert_eq!(pooled.data(), &expected[..]);
    }
}

#[test]
fn attention_examples() {
    let w1 = Tensor::zeros(&[1, 3]);
    let b1 = Tensor::zeros(&[1]);
    let a2 = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(attention_weights(&a2, &w1, &b1).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);

    let a3 = Tensor::new(&[3, 3], (0..9).map(f64::from).collect()).unwrap();
    let w = attention_weights(&a3, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2])).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(w.at2(i, j), if i == j { 0.0 } else { 0.5 });
        }
    }

    let single = Tensor::zeros(&[1, 3]);
    assert!(attention_weights(&single, &w1, &b1).is_err());
    assert!(attention_weights(&a3, &w1, &b1).is_err());
}

#[test]
fn attention_matches_case_split() {
    let mut rng = XorShift64Star::new(8);
    let (n, d) = (5, 4);
    let a = random(&[n, d], &mut rng);
    let w = random(&[n - 1, d], &mut rng);
    let b = random(&[n - 1], &mut rng);
    let got = attention_weights(&a, &w, &b).unwrap();
    for i in 0..n {
        let logits: Vec<f64> = (0..n - 1)
            .map(|k| b.data()[k] + (0..d).map(|t| w.at2(k, t) * a.at2(i, t)).sum::<f64>())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..n {
            let expected = if j < i {
                logits[j].exp() / z
            } else if j == i {
                0.0
            } else {
                logits[j - 1].exp() / z
            };
            assert!((got.at2(i, j) - expected).abs() < 1e-12);
        }
    }
}

#[test]
fn global_feature_examples() {
    let swap = Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
    let a = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    assert_eq!(global_features(&swap, &a).unwrap().data(), &[4.0, 5.0, 6.0, 1.0, 2.0, 3.0]);

    let same = Tensor::new(&[3, 2], vec![7.0, -1.0, 7.0, -1.0, 7.0, -1.0]).unwrap();
    let w = attention_weights(&random(&[3, 2], &mut XorShift64Star::new(1)), &random(&[2, 2], &mut XorShift64Star::new(2)), &Tensor::zeros(&[2])).unwrap();
    let g = global_features(&w, &same).unwrap();
    for (x, y) in g.data().iter().zip(same.data()) {
        assert!((x - y).abs() < 1e-12);
    }

    let mut rng = XorShift64Star::new(6);
    let w = random(&[4, 4], &mut rng);
    let a = random(&[4, 3], &mut rng);
    let g = global_features(&w, &a).unwrap();
    for i in 0..4 {
        for c in 0..3 {
            let expected: f64 = (0..4).map(|j| w.at2(i, j) * a.at2(j, c)).sum();
            assert!((g.at2(i, c) - expected).abs() < 1e-12);
        }
    }
    assert!(global_features(&w, &random(&[3, 3], &mut rng)).is_err());
}

#[test]
fn head_examples() {
    let mut rng = XorShift64Star::new(10);
    let (n, d, k1, r) = (3, 4, 2, 6);
    let a_loc = random(&[n, d], &mut rng);
    let a_glob = random(&[n, d], &mut rng);
    let zeros = predict_proposals(
        &a_loc,
        &a_glob,
        (&Tensor::zeros(&[k1, 2 * d]), &Tensor::zeros(&[k1])),
        (&Tensor::zeros(&[r, 2 * d]), &Tensor::zeros(&[r])),
    )
    .unwrap();
    for p in &zeros {
        assert!(p.class_logits.iter().chain(&p.offsets).all(|&v| v == 0.0));
        assert_eq!(p.length, 0.0);
    }

    let (cw, cb) = (random(&[k1, 2 * d], &mut rng), random(&[k1], &mut rng));
    let (rw, rb) = (random(&[r, 2 * d], &mut rng), random(&[r], &mut rng));
    let props = predict_proposals(&a_loc, &a_glob, (&cw, &cb), (&rw, &rb)).unwrap();
    let i = 1;
    let aug = Tensor::from_vec([a_loc.row(i), a_glob.row(i)].concat());
    let cls = dense(&aug, &cw, &cb).unwrap();
    let reg = dense(&aug, &rw, &rb).unwrap();
    assert_eq!(props[i].class_logits, cls.data());
    assert_eq!(props[i].length, reg.data()[0]);
    assert_eq!(props[i].offsets, reg.data()[1..]);
}

#[test]
fn attention_toggle_keeps_shapes() {
    let on = toy_model(true);
    let off = toy_model(false);
    assert_eq!(on.param_names(), off.param_names());
    let image = random(&[3, 16, 16], &mut XorShift64Star::new(2));
    let mut tape = Tape::no_grad();
    let out = off.forward(&mut tape, image.clone()).unwrap();
    assert!(tape.value(out.a_glob).data().iter().all(|&v| v == 0.0));
    assert_eq!(tape.value(out.a_glob).shape(), tape.value(out.a_loc).shape());
    let mut tape2 = Tape::no_grad();
    let out2 = on.forward(&mut tape2, image).unwrap();
    assert_eq!(tape.value(out.regression).shape(), tape2.value(out2.regression).shape());
}

#[test]
fn per_boundary_heads_with_equal_weights_match_shared() {
    let shared = small_default(false);
    let mut split = small_default(true);
    let lookup = |name: &str| {
        let i = shared.param_names().iter().position(|n| n == name).unwrap();
        shared.params()[i].clone()
    };
    for (name, p) in split.names.clone().iter().zip(split.params_mut()) {
        let base = name
            .replace(".left.", ".")
            .replace(".bottom.", ".")
            .replace(".right.", ".");
        *p = lookup(&base);
    }
    let image = random(&[3, 160, 320], &mut XorShift64Star::new(21));
    let a = shared.propose(image.clone()).unwrap();
    let b = split.propose(image).unwrap();
    assert_eq!(a, b);
}

#[test]
fn per_boundary_heads_route_by_border() {
    let mut m = small_default(true);
    // Zero every head except the right-border regressor bias.
    for (name, p) in m.names.clone().iter().zip(m.params_mut()) {
        if name.starts_with("cls") || name.starts_with("reg") {
            p.data_mut().fill(if name == "reg.right.bias" { 1.0 } else { 0.0 });
        }
    }
    let props = m.propose(Tensor::zeros(&[3, 160, 320])).unwrap();
    for (p, a) in props.iter().zip(&m.anchors.anchors) {
        let expected = if a.border == Border::Right { 1.0 } else { 0.0 };
        assert_eq!(p.length, expected);
    }
}

#[test]
fn decode_examples() {
    let grid = LaneGrid::new(72, 160, 320).unwrap();
    let anchor = Anchor {
        id: 0,
        border: Border::Bottom,
        x_orig: 100.0,
        y_orig: grid.y(10),
        theta: 60.0,
        start_index: 10,
        feature_cols: vec![],
    };
    let mut p = Proposal {
        anchor_id: 0,
        class_logits: vec![0.0, 0.0],
        offsets: vec![0.0; 72],
        length: 3.9,
    };
    let lane = decode_proposal(&p, &anchor, &grid);
    assert_eq!((lane.start, lane.end), (10, 12));
    assert_eq!(lane.score, Some(0.5));
    for i in 0..72 {
        assert!((lane.xs[i] - anchor.x_at(grid.y(i))).abs() < 1e-12);
    }
    p.length = 1.0;
    assert_eq!(decode_proposal(&p, &anchor, &grid).end, 10);
    p.length = 500.0;
    assert_eq!(decode_proposal(&p, &anchor, &grid).end, 71);
    for l in [-4.0, 0.2, f64::NAN] {
        p.length = l;
        assert_eq!(decode_proposal(&p, &anchor, &grid).end, 10);
    }
    p.offsets[11] = 2.5;
    let lane = decode_proposal(&p, &anchor, &grid);
    assert!((lane.xs[11] - anchor.x_at(grid.y(11)) - 2.5).abs() < 1e-12);
}

#[test]
fn forward_is_deterministic_and_seeded() {
    let image = random(&[3, 16, 16], &mut XorShift64Star::new(3));
    let a = toy_model(true).propose(image.clone()).unwrap();
    let b = toy_model(true).propose(image).unwrap();
    assert_eq!(a, b);
}

#[test]
fn checkpoint_round_trip() {
    let m = small_default(true);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.latt");
    m.save(&path).unwrap();
    let back = LaneAtt::load(m.config.clone(), &path).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.anchors.anchors, m.anchors.anchors);
    let wrong = ModelConfig {
        n_pts: 36,
        ..m.config.clone()
    };
    assert!(LaneAtt::load(wrong, &path).is_err());
}

#[test]
fn loss_gradient_wrt_image_matches_finite_differences() {
    let model = toy_model(true);
    let anchor_lanes = model.anchors.as_lanes();
    let gt = Lane::new(vec![5.5; 8], 0, 7).unwrap();
    let gts = vec![gt];
    let assignment = assign_targets(&anchor_lanes, &gts, 3.0, 5.0).unwrap();
    assert_eq!(assignment.positives(), 1);
    assert_eq!(assignment.negatives(), 1);
    let cfg = LossConfig::default();

    let loss_at = |image: &Tensor| -> f64 {
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, image.clone()).unwrap();
        let t = total_loss(&mut tape, out.class_logits, out.regression, &anchor_lanes, &gts, &assignment, &cfg).unwrap();
        tape.value(t.total).item()
    };

    let image = random(&[3, 16, 16], &mut XorShift64Star::new(17));
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, image.clone()).unwrap();
    let t = total_loss(&mut tape, out.class_logits, out.regression, &anchor_lanes, &gts, &assignment, &cfg).unwrap();
    tape.backward(t.total).unwrap();
    let grad = tape.grad(out.image).unwrap().to_vec();
    assert!(grad.iter().any(|g| g.abs() > 1e-6));

    let h = 1e-5;
    for i in 0..image.len() {
        let mut plus = image.clone();
        plus.data_mut()[i] += h;
        let mut minus = image.clone();
        minus.data_mut()[i] -= h;
        let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * h);
        let diff = (grad[i] - numeric).abs();
        assert!(
            diff <= 1e-7 || diff <= 1e-4 * grad[i].abs().max(numeric.abs()),
            "pixel {i}: analytic {} numeric {numeric}",
            grad[i]
        );
    }
}

proptest! {
    #[test]
    fn attention_rows_are_distributions(n in 2usize..8, d in 1usize..5, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut rng = XorShift64Star::new(seed);
        let a = random(&[n, d], &mut rng);
        let mut w = random(&[n - 1, d], &mut rng);
        w.data_mut().iter_mut().for_each(|v| *v *= scale);
        let b = random(&[n - 1], &mut rng);
        let att = attention_weights(&a, &w, &b).unwrap();
        for i in 0..n {
            prop_assert_eq!(att.at2(i, i), 0.0);
            let s: f64 = att.row(i).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
        let g = global_features(&att, &a).unwrap();
        prop_assert_eq!(g.shape(), a.shape());
    }

    #[test]
    fn pooling_is_linear(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
        let mut rng = XorShift64Star::new(seed);
        let f1 = random(&[2, 5, 6], &mut rng);
        let f2 = random(&[2, 5, 6], &mut rng);
        let cols: Vec<i64> = (0..5).map(|_| rng.range_inclusive(0, 9) as i64 - 2).collect();
        let anchor = Anchor { feature_cols: cols, ..vertical_anchor(0, 0.0, 0) };
        let mix = Tensor::new(&[2, 5, 6], f1.data().iter().zip(f2.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
        let lhs = pool_features(&mix, &anchor).unwrap();
        let p1 = pool_features(&f1, &anchor).unwrap();
        let p2 = pool_features(&f2, &anchor).unwrap();
        for k in 0..lhs.len() {
            prop_assert!((lhs.data()[k] - (alpha * p1.data()[k] + beta * p2.data()[k])).abs() < 1e-12);
        }
    }
}
