use std::path::Path;

use mcunet::autodiff::Tape;
use mcunet::data::{crop, decode_image, encode_pnm, pad_to_multiple, probability_byte, Raster};
use mcunet::nn::{conv2d_with, ConvAlgorithm, ConvSpec};
use mcunet::train::{confusion, roc_auc, scalar_metrics, scored_pixels, trapezoid};
use mcunet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// P(s⁺ > s⁻) + ½·P(s⁺ = s⁻) by enumerating every positive/negative pair.
fn concordance(scored: &[(f64, bool)]) -> f64 {
    let pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    let neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    let mut credit = 0.0;
    for &p in &pos {
        for &n in &neg {
            credit += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    credit / (pos.len() * neg.len()) as f64
}

/// Scores quantized to a few levels so ties are common.
fn scored_strategy() -> impl Strategy<Value = Vec<(f64, bool)>> {
    (1u32..40).prop_flat_map(|levels| {
        prop::collection::vec(
            (
                (0..levels).prop_map(move |l| f64::from(l) / f64::from(levels)),
                any::<bool>(),
            ),
            2..500,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn auc_equals_pairwise_concordance(scored in scored_strategy()) {
        let both = scored.iter().any(|s| s.1) && scored.iter().any(|s| !s.1);
        let roc = roc_auc(&scored).unwrap();
        prop_assert_eq!(roc.is_some(), both);
        if let Some(roc) = roc {
            prop_assert!((roc.auc - concordance(&scored)).abs() < 1e-9);
        }
    }

    #[test]
    fn roc_curve_is_monotone_and_anchored(scored in scored_strategy()) {
        if let Some(roc) = roc_auc(&scored).unwrap() {
            let first = roc.curve.first().unwrap();
            let last = roc.curve.last().unwrap();
            prop_assert_eq!((first.fpr, first.tpr), (0.0, 0.0));
            prop_assert_eq!((last.fpr, last.tpr), (1.0, 1.0));
            for pair in roc.curve.windows(2) {
                prop_assert!(pair[1].fpr >= pair[0].fpr && pair[1].tpr >= pair[0].tpr);
                prop_assert!(pair[1].threshold < pair[0].threshold);
            }
            let pts: Vec<(f64, f64)> = roc.curve.iter().map(|p| (p.fpr, p.tpr)).collect();
            prop_assert!((trapezoid(&pts) - roc.auc).abs() < 1e-12);
        }
    }

    #[test]
    fn confusion_counts_cover_the_mask(
        pixels in prop::collection::vec((0.0f64..1.0, any::<bool>(), any::<bool>()), 1..200),
        t1 in 0.0f64..1.0,
        t2 in 0.0f64..1.0,
    ) {
        let n = pixels.len();
        let pred = Tensor::from_vec([1, 1, 1, n], pixels.iter().map(|p| p.0).collect()).unwrap();
        let label = Tensor::from_vec([1, 1, 1, n], pixels.iter().map(|p| f64::from(u8::from(p.1))).collect()).unwrap();
        let mask = Tensor::from_vec([1, 1, 1, n], pixels.iter().map(|p| f64::from(u8::from(p.2))).collect()).unwrap();
        let inside = pixels.iter().filter(|p| p.2).count() as u64;

        let c = confusion(&pred, &label, Some(&mask), t1).unwrap();
        prop_assert_eq!(c.total(), inside);
        prop_assert_eq!(scored_pixels(&pred, &label, Some(&mask)).unwrap().len() as u64, inside);
        if inside > 0 {
            let acc = scalar_metrics(&c).acc.unwrap();
            prop_assert_eq!(acc, (c.tp + c.tn) as f64 / c.total() as f64);
        }

        let (lo, hi) = (t1.min(t2), t1.max(t2));
        let a = confusion(&pred, &label, Some(&mask), lo).unwrap();
        let b = confusion(&pred, &label, Some(&mask), hi).unwrap();
        prop_assert!(b.tp <= a.tp && b.tn >= a.tn);
    }

    #[test]
    fn confusion_reduction_is_order_free(
        a in (0u64..1000, 0u64..1000, 0u64..1000, 0u64..1000),
        b in (0u64..1000, 0u64..1000, 0u64..1000, 0u64..1000),
    ) {
        let mk = |t: (u64, u64, u64, u64)| mcunet::train::ConfusionCounts { tp: t.0, tn: t.1, fp: t.2, fn_: t.3 };
        prop_assert_eq!(mk(a) + mk(b), mk(b) + mk(a));
        prop_assert_eq!((mk(a) + mk(b)).total(), mk(a).total() + mk(b).total());
    }

    #[test]
    fn direct_and_lowered_conv_agree(
        seed in any::<u64>(),
        cin in 1usize..4, cout in 1usize..4,
        h in 3usize..12, w in 3usize..12,
        rate in prop::sample::select(vec![1usize, 2, 3, 5]),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = ConvSpec::same(cin, cout, 3, rate).unwrap();
        let x = Tensor::<f64>::randn([1, cin, h, w], 1.0, &mut rng);
        let wt = Tensor::<f64>::randn(spec.weight_shape(), 1.0, &mut rng);
        let run = |alg| {
            let mut tape = Tape::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(wt.clone()));
            conv2d_with(&mut tape, &xv, &wv, None, &spec, alg).unwrap().into_value()
        };
        let (d, l) = (run(ConvAlgorithm::Direct), run(ConvAlgorithm::Im2col));
        prop_assert_eq!(d.shape(), l.shape());
        prop_assert!(d.max_abs_diff(&l) <= 1e-12 * d.max_abs().max(1.0));
    }

    #[test]
    fn pad_then_crop_is_identity(seed in any::<u64>(), h in 1usize..30, w in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f32>::randn([1, 3, h, w], 1.0, &mut rng);
        let (padded, record) = pad_to_multiple(&x, 8).unwrap();
        let s = padded.shape();
        prop_assert!(s.h % 8 == 0 && s.w % 8 == 0 && s.h >= h && s.w >= w && s.h < h + 8 && s.w < w + 8);
        prop_assert_eq!(crop(&padded, &record).unwrap(), x);
    }

    #[test]
    fn pnm_round_trip(
        width in 1usize..20, height in 1usize..20,
        gray in any::<bool>(),
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let channels = if gray { 1 } else { 3 };
        let raster = Raster {
            width,
            height,
            channels,
            max_value: 255,
            pixels: (0..width * height * channels).map(|_| rng.gen()).collect(),
        };
        let bytes = encode_pnm(&raster);
        prop_assert_eq!(decode_image(Path::new("x.pnm"), &bytes).unwrap(), raster);
    }

    #[test]
    fn probability_bytes_round_half_up(p in 0.0f64..=1.0) {
        let b = probability_byte(p);
        prop_assert_eq!(f64::from(b), (p * 255.0).round());
        prop_assert_eq!(b == 255, p >= 254.5 / 255.0);
    }
}

#[test]
fn auc_examples() {
    let scored = [(0.1, false), (0.4, false), (0.35, true), (0.8, true)];
    assert_eq!(roc_auc(&scored).unwrap().unwrap().auc, 0.75);
    assert_eq!(concordance(&scored), 0.75);
    let tied = [(0.3, false), (0.3, true), (0.3, true)];
    assert_eq!(roc_auc(&tied).unwrap().unwrap().auc, 0.5);
    assert!(roc_auc(&[(0.2, true), (0.9, true)]).unwrap().is_none());
}
