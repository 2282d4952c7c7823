mod common;

use proptest::prelude::*;
use reid_core::autodiff::{ParamStore, Tape};
use reid_core::layers::{Ctx, Mode};
use reid_core::mrfa::{Mrfa, MrfaConfig};
use reid_core::network::{Network, NetworkConfig};
use reid_core::rng::stream;

use common::randn;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masks_stay_strictly_inside_zero_two(
        quarter in 1usize..4, stride in 1usize..3, oh in 1usize..5, ow in 1usize..4,
        std in 0.01f32..50.0, seed in any::<u64>(), train in any::<bool>(),
    ) {
        let c = 4 * quarter;
        let mut store = ParamStore::new();
        let m = Mrfa::new(&mut store, seed, "m", MrfaConfig::doubling(c, stride)).unwrap();
        let x = randn(&[2, c, oh * stride, ow * stride], &mut stream(&[seed, 1]), std);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mode = if train { Mode::Train } else { Mode::Eval };
        let out = m.forward(&mut Ctx { tape: &mut tape, store: &mut store, mode }, xv).unwrap();
        prop_assert_eq!(tape.value(out.mask).shape(), &[2, 2 * c, oh, ow]);
        prop_assert_eq!(tape.value(out.pre_mask).shape(), &[2, c, oh, ow]);
        for &v in tape.value(out.mask).data() {
            prop_assert!(v > 0.0 && v < 2.0, "mask value {}", v);
        }
    }

    #[test]
    fn factorized_fields_keep_the_direct_conv_shape(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let mut rng = stream(&[seed]);
        let mut tape = Tape::new();
        let x = tape.constant(randn(&[1, 2, h, w], &mut rng, 1.0));
        let mut conv = |input, k: (usize, usize)| {
            let wt = tape.constant(randn(&[2, 2, k.0, k.1], &mut rng, 1.0));
            tape.conv2d(input, wt, None, (1, 1), (k.0 / 2, k.1 / 2)).unwrap()
        };
        let a = conv(x, (3, 3));
        let five_stacked = conv(a, (3, 3));
        let five_direct = conv(x, (5, 5));
        let b = conv(x, (1, 7));
        let seven_stacked = conv(b, (7, 1));
        let seven_direct = conv(x, (7, 7));
        let shape = |v| tape.value(v).shape().to_vec();
        prop_assert_eq!(shape(five_stacked), shape(five_direct));
        prop_assert_eq!(shape(seven_stacked), shape(seven_direct));
        prop_assert_eq!(shape(seven_direct), vec![1, 2, h, w]);
    }
}

#[test]
fn disabled_attention_equals_zeroed_attention() {
    let images = randn(&[3, 3, 96, 32], &mut stream(&[21]), 1.0);
    let mut zeroed = Network::build(NetworkConfig::toy(4, 2), 5).unwrap();
    zeroed.zero_attention();
    let mut cfg = NetworkConfig::toy(4, 2);
    cfg.attention_enabled = false;
    cfg.camera_loss_site = reid_core::network::CameraLossSite::None;
    let mut plain = Network::build(cfg, 5).unwrap();
    for train in [false, true] {
        let mut ta = Tape::new();
        let mut tb = Tape::new();
        let mode = if train { Mode::Train } else { Mode::Eval };
        let a = zeroed.forward(&mut ta, &images, mode).unwrap();
        let b = plain.forward(&mut tb, &images, mode).unwrap();
        assert!(b.taps.masks.is_none());
        let pairs = [(a.descriptor, b.descriptor), (a.aux_triplet_feature, b.aux_triplet_feature)];
        for (x, y) in pairs.into_iter().chain(a.id_logits.iter().copied().zip(b.id_logits.iter().copied())) {
            assert_eq!(ta.value(x), tb.value(y));
        }
    }
}

#[test]
fn strips_tile_the_final_map() {
    let mut net = Network::build(NetworkConfig::toy(4, 2), 2).unwrap();
    let (tape, out) = net.forward_eval(&randn(&[2, 3, 96, 32], &mut stream(&[4]), 1.0)).unwrap();
    let fmap = tape.value(out.taps.stage4_masked);
    let (n, c, h, w) = fmap.dims4("test").unwrap();
    let band = h / out.strips.len();
    for (i, &s) in out.strips.iter().enumerate() {
        let strip = tape.value(s);
        assert_eq!(strip.shape(), &[n, c, band, w]);
        for b in 0..n * c {
            let src = &fmap.data()[b * h * w + i * band * w..b * h * w + (i + 1) * band * w];
            assert_eq!(&strip.data()[b * band * w..(b + 1) * band * w], src);
        }
    }
    let d = tape.value(out.descriptor);
    for r in 0..2 {
        let norm = d.row(r).iter().map(|v| (v * v) as f64).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }
}
