//! Layout and wiring of the assembled detector.

use mrfdet_core::layers::{ConvKind, ConvParams};
use mrfdet_core::losses::LossConfig;
use mrfdet_core::anchors::{BBox, GroundTruth};
use mrfdet_core::net::{build_network, fpn_merge, NetConfig, Objective, SegMode, Toggles};
use mrfdet_core::sws::AreaThresholds;
use mrfdet_core::{ConvSpec, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn all_toggles() -> Vec<Toggles> {
    let mut v = Vec::new();
    for mrf in [false, true] {
        for extra_level in [false, true] {
            for seg in [SegMode::Off, SegMode::Aws, SegMode::Sws] {
                v.push(Toggles { mrf, extra_level, seg });
            }
        }
    }
    v
}

fn image(size: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[3, size, size], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn coarsest_two_levels_never_carry_mrf() {
    for toggles in all_toggles() {
        let net = build_network(&NetConfig::desk(3, toggles), 0).unwrap();
        let n = net.heads.len();
        assert!(net.heads[n - 2..].iter().all(|h| h.mrf.is_none()), "{toggles:?}");
        assert!(net.heads[..n - 2].iter().all(|h| h.mrf.is_some() == toggles.mrf), "{toggles:?}");
        let strides: Vec<usize> = net.heads.iter().map(|h| h.stride).collect();
        assert!(strides.windows(2).all(|w| w[0] < w[1]));
    }
}

#[test]
fn head_shapes_and_anchor_count() {
    for (cfg, nc) in [(NetConfig::desk(3, Toggles::full()), 3), (NetConfig::tiny(2, Toggles::full()), 2)] {
        for toggles in all_toggles() {
            let cfg = NetConfig { toggles, ..cfg.clone() };
            let net = build_network(&cfg, 5).unwrap();
            let size = cfg.image_size();
            let (pyramid, heads) = net.forward(&image(size, 1)).unwrap();
            let mut expected_anchors = 0;
            for ((head, out), level) in net.heads.iter().zip(&heads.levels).zip(&pyramid.levels) {
                let s = size / head.stride;
                let a = head.anchors_per_location;
                assert_eq!(out.loc.shape(), &[a * 4, s, s]);
                assert_eq!(out.conf.shape(), &[a * (nc + 1), s, s]);
                assert_eq!(level.feature.shape(), &[cfg.pyramid_channels, s, s]);
                expected_anchors += s * s * a;
            }
            assert_eq!(cfg.anchors().len(), expected_anchors);
            match heads.seg_logits {
                Some(seg) => {
                    assert_ne!(toggles.seg, SegMode::Off);
                    assert_eq!(seg.shape(), &[2, size, size]);
                }
                None => assert_eq!(toggles.seg, SegMode::Off),
            }
        }
    }
}

#[test]
fn desk_network_size() {
    let cfg = NetConfig::desk(3, Toggles::full());
    assert_eq!(cfg.anchors().len(), 1520);
    assert_eq!(build_network(&cfg, 0).unwrap().num_params(), 362_946);
}

#[test]
fn seg_head_is_a_pure_consumer() {
    for extra_level in [false, true] {
        let on = Toggles { mrf: true, extra_level, seg: SegMode::Sws };
        let off = Toggles { seg: SegMode::Off, ..on };
        let net_on = build_network(&NetConfig::desk(3, on), 9).unwrap();
        let net_off = build_network(&NetConfig::desk(3, off), 9).unwrap();
        assert_eq!(net_on.backbone, net_off.backbone);
        assert_eq!(net_on.heads, net_off.heads);
        let x = image(64, 2);
        let (_, a) = net_on.forward(&x).unwrap();
        let (_, b) = net_off.forward(&x).unwrap();
        assert_eq!(a.levels, b.levels);
    }
}

fn objective(seg_thresholds: AreaThresholds) -> Objective {
    Objective { match_threshold: 0.5, seg_thresholds, loss: LossConfig::default() }
}

fn gts() -> Vec<GroundTruth> {
    vec![
        GroundTruth { bbox: BBox::new(1.0, 2.0, 5.0, 6.0), class_id: 0 },
        GroundTruth { bbox: BBox::new(6.0, 3.0, 15.0, 14.0), class_id: 1 },
    ]
}

#[test]
fn seg_off_leaves_seg_parameters_without_gradient() {
    let net = build_network(&NetConfig::tiny(2, Toggles { seg: SegMode::Off, ..Toggles::full() }), 3).unwrap();
    let g = net
        .image_gradients(&image(16, 4), &gts(), &net.config.anchors(), &objective(AreaThresholds::FULL_SCALE), false)
        .unwrap();
    assert_eq!(g.loss.l_seg, 0.0);
    for conv in net.seg.convs() {
        assert!(g.params.get(&conv.name).is_none(), "{}", conv.name);
    }
    assert!(net.heads.iter().all(|h| g.params.get(&h.conf.name).is_some()));
}

#[test]
fn aws_equals_sws_with_open_thresholds() {
    let aws = build_network(&NetConfig::tiny(2, Toggles { seg: SegMode::Aws, ..Toggles::full() }), 3).unwrap();
    let sws = build_network(&NetConfig::tiny(2, Toggles::full()), 3).unwrap();
    let (x, anchors) = (image(16, 6), sws.config.anchors());
    let a = aws.image_gradients(&x, &gts(), &anchors, &objective(AreaThresholds::all_objects()), true).unwrap();
    let s = sws.image_gradients(&x, &gts(), &anchors, &objective(AreaThresholds::new(0.0, f64::INFINITY).unwrap()), true).unwrap();
    assert_eq!(a, s);
    // With the full-scale thresholds both gts here are too small to paint foreground.
    let full = sws.image_gradients(&x, &gts(), &anchors, &objective(AreaThresholds::FULL_SCALE), true).unwrap();
    assert_ne!(full.loss.l_seg, s.loss.l_seg);
}

#[test]
fn fpn_merge_depends_on_both_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let proj = ConvParams::msra("lat", ConvSpec::new(5, 4, 1), ConvKind::Standard, &mut rng);
    for _ in 0..20 {
        let top = Tensor::randn(&[4, 3, 3], 1.0, &mut rng);
        let lat = Tensor::randn(&[5, 6, 6], 1.0, &mut rng);
        let base = fpn_merge(&top, &lat, &proj).unwrap();
        assert_eq!(base.shape(), &[4, 6, 6]);
        let dt = Tensor::randn(top.shape(), 1e-3, &mut rng);
        let dl = Tensor::randn(lat.shape(), 1e-3, &mut rng);
        let mut t2 = top.clone();
        t2.add_assign(&dt).unwrap();
        let mut l2 = lat.clone();
        l2.add_assign(&dl).unwrap();
        assert_ne!(fpn_merge(&t2, &lat, &proj).unwrap(), base);
        assert_ne!(fpn_merge(&top, &l2, &proj).unwrap(), base);
    }
}

#[test]
fn same_seed_same_network() {
    for toggles in [Toggles::baseline(), Toggles::full()] {
        let cfg = NetConfig::desk(3, toggles);
        let a = build_network(&cfg, 42).unwrap();
        assert_eq!(a, build_network(&cfg, 42).unwrap());
        assert_ne!(a.backbone, build_network(&cfg, 43).unwrap().backbone);
        let x = image(64, 3);
        assert_eq!(a.forward(&x).unwrap(), a.forward(&x).unwrap());
    }
}
