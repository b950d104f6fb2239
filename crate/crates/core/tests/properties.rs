//! Randomised invariants of the warping, fusion, projection and loss operators.

use fldr_core::fldr::{init_basis_from_image, project, reconstruct};
use fldr_core::fusion::{fuse, softmax_with_temperature, FusionCandidates, Temperature, WeightMap};
use fldr_core::synthetic::make_synthetic_dataset;
use fldr_core::training::{loss_recon, loss_smooth, loss_warp, total_loss, train, LossComponents, TrainConfig};
use fldr_core::warp::{backward_warp, forward_splat_softmax};
use fldr_core::Tensor;
use proptest::prelude::*;

fn tensor(c: usize, h: usize, w: usize, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    prop::collection::vec(lo..hi, c * h * w).prop_map(move |v| Tensor::from_vec(&[c, h, w], v).unwrap())
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    tensor(3, h, w, 0.0, 1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn integer_backward_warp_is_a_shift(src in image(9, 11), dx in -3i32..=3, dy in -3i32..=3) {
        let flow = Tensor::from_fn_chw(2, 9, 11, |c, _, _| if c == 0 { dx as f64 } else { dy as f64 });
        let out = backward_warp(&src, &flow).unwrap();
        for c in 0..3 {
            for y in 0..9i32 {
                for x in 0..11i32 {
                    let (sx, sy) = (x + dx, y + dy);
                    if (0..11).contains(&sx) && (0..9).contains(&sy) {
                        let got = out.channel(c)[(y * 11 + x) as usize];
                        prop_assert_eq!(got, src.channel(c)[(sy * 11 + sx) as usize]);
                    }
                }
            }
        }
    }

    #[test]
    fn backward_warp_stays_in_source_range(src in image(7, 8), flow in tensor(2, 7, 8, -6.0, 6.0)) {
        let out = backward_warp(&src, &flow).unwrap();
        for c in 0..3 {
            let s = src.channel(c);
            let lo = s.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for &v in out.channel(c) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn splat_of_constant_image_is_constant_where_covered(
        value in 0.0f64..1.0,
        flow in tensor(2, 6, 6, -2.0, 2.0),
        z in tensor(1, 6, 6, -3.0, 3.0),
    ) {
        let src = Tensor::full(&[3, 6, 6], value);
        let r = forward_splat_softmax(&src, &flow, Some(&z)).unwrap();
        for (i, &v) in r.image.data().iter().enumerate() {
            if !r.holes[i % 36] {
                prop_assert!((v - value).abs() < 1e-9, "pixel {} = {} vs {}", i, v, value);
            }
        }
    }

    #[test]
    fn softmax_weight_map_sums_to_one(logits in tensor(6, 5, 4, -30.0, 30.0), t in 0.05f64..20.0) {
        let m = softmax_with_temperature(&logits, Temperature::new(t).unwrap()).unwrap();
        prop_assert!(m.normalization_error() < 1e-12);
        prop_assert!(m.data.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn fusing_identical_candidates_returns_them(img in image(4, 5), logits in tensor(6, 4, 5, -5.0, 5.0), t in 0.0f64..=1.0) {
        let m = softmax_with_temperature(&logits, Temperature::new(1.0).unwrap()).unwrap();
        let c = FusionCandidates { t_from_0: &img, i0_to_t: &img, i0: &img, t_from_1: &img, i1_to_t: &img, i1: &img };
        let out = fuse(&c, &m, t).unwrap();
        prop_assert!(out.max_abs_diff(&img) < 1e-12);
    }

    #[test]
    fn fusion_is_a_convex_combination(a in image(3, 3), b in image(3, 3), logits in tensor(6, 3, 3, -5.0, 5.0), t in 0.0f64..=1.0) {
        let m = WeightMap::new(softmax_with_temperature(&logits, Temperature::new(1.0).unwrap()).unwrap().data).unwrap();
        let c = FusionCandidates { t_from_0: &a, i0_to_t: &a, i0: &a, t_from_1: &b, i1_to_t: &b, i1: &b };
        let out = fuse(&c, &m, t).unwrap();
        for i in 0..out.len() {
            let (lo, hi) = (a.data()[i].min(b.data()[i]), a.data()[i].max(b.data()[i]));
            prop_assert!(out.data()[i] >= lo - 1e-9 && out.data()[i] <= hi + 1e-9);
        }
    }

    #[test]
    fn full_rank_projection_is_lossless(img in image(8, 12), d in prop::sample::select(vec![2usize, 4])) {
        let basis = init_basis_from_image(&img, d, d * d).unwrap();
        let back = reconstruct(&project(&img, &basis).unwrap(), &basis).unwrap();
        prop_assert!(back.max_abs_diff(&img) < 1e-9);
    }

    #[test]
    fn losses_are_non_negative(
        a in image(8, 8),
        b in image(8, 8),
        f01 in tensor(2, 8, 8, -2.0, 2.0),
        f10 in tensor(2, 8, 8, -2.0, 2.0),
        e in 0.0f64..200.0,
    ) {
        prop_assert!(loss_recon(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap() >= 0.0);
        prop_assert_eq!(loss_recon(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(), 0.0);
        prop_assert!(loss_smooth(&f01, &f10, &a, &b, e).unwrap() >= 0.0);
        prop_assert!(loss_warp(&a, &b, &f01, &f10).unwrap() >= 0.0);
    }

    #[test]
    fn total_loss_is_linear_in_the_weights(
        recon in 0.0f64..10.0,
        smooth in 0.0f64..10.0,
        warp in 0.0f64..10.0,
        ls in 0.0f64..1.0,
        lw in 0.0f64..1.0,
        s in 0.0f64..4.0,
    ) {
        let c = LossComponents { recon, smooth, warp };
        let base = total_loss(&c, ls, lw);
        let scaled = total_loss(&c, s * ls, s * lw);
        prop_assert!((scaled - recon - s * (base - recon)).abs() < 1e-9);
        prop_assert_eq!(total_loss(&c, 0.0, 0.0), recon);
    }
}

#[test]
fn zero_fldr_learning_rate_keeps_the_basis() {
    let set = make_synthetic_dataset::<f32>(11, 12, 32, 4.0);
    let cfg = TrainConfig { epochs: 3, batch: 2, lr_main: 1e-3, lr_fldr: 0.0, seed: 4, ..TrainConfig::desk() };
    let (trained, _) = train(&cfg, &set[..10], &set[10..], &set[0].i0, &mut |_| {}).unwrap();
    let init = fldr_core::training::initial_model(&cfg, &set[0].i0).unwrap();
    assert_eq!(trained.model.basis.u, init.basis.u);
    assert_eq!(trained.model.basis.mean, init.basis.mean);
    // The run did update the other groups.
    assert!(trained.epoch > 0);
    assert_ne!(trained.model.flow, init.flow);
}
