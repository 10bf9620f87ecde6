use cfdcam_core::cam::{cfd_cam_weights, grad_cam, score_cam_weights};
use cfdcam_core::multiscale::{fuse_maps, fuse_raw, multiscale_cam, per_scale_maps};
use cfdcam_core::{
    reference_network, CamMethod, CamRequest, ClassifierHandle, Fusion, ImageTensor, ScaleSpec, Tensor3, Weighting,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TUMOR: usize = 1;

fn image_from(seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..64 * 64).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor3::from_vec(1, 64, 64, data).unwrap()
}

fn handle(seed: u64) -> ClassifierHandle {
    ClassifierHandle::new(reference_network(seed))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn every_method_gives_a_unit_range_map(net in 0u64..1000, img in any::<u64>()) {
        let h = handle(net);
        let x = image_from(img);
        for method in CamMethod::ALL {
            let m = CamRequest::new(method, TUMOR).run(&h, &x).unwrap();
            prop_assert_eq!(m.shape(), (64, 64));
            prop_assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)), "{:?}", method);
        }
    }

    #[test]
    fn grad_cam_ignores_head_scaling(net in 0u64..1000, img in any::<u64>()) {
        let mut h = handle(net);
        let x = image_from(img);
        let layer = h.default_layer().to_string();
        let before = grad_cam(&h, &x, TUMOR, &layer).unwrap();
        let head = h.head_mut();
        head.weight.iter_mut().for_each(|w| *w *= 3.0);
        head.bias.iter_mut().for_each(|b| *b *= 3.0);
        let after = grad_cam(&h, &x, TUMOR, &layer).unwrap();
        prop_assert!(max_abs_diff(before.data(), after.data()) < 1e-9);
    }

    #[test]
    fn confidence_is_shift_invariant_and_logits_shift(
        net in 0u64..1000,
        img in any::<u64>(),
        c in -5.0f64..5.0,
    ) {
        let mut h = handle(net);
        let x = image_from(img);
        let layer = h.default_layer().to_string();
        let (_, conf) = cfd_cam_weights(&h, &x, TUMOR, &layer, Weighting::Confidence, 8).unwrap();
        let (_, logit) = cfd_cam_weights(&h, &x, TUMOR, &layer, Weighting::Logits, 8).unwrap();
        prop_assert!(conf.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        h.head_mut().bias.iter_mut().for_each(|b| *b += c);
        let (_, conf2) = cfd_cam_weights(&h, &x, TUMOR, &layer, Weighting::Confidence, 8).unwrap();
        let (_, logit2) = cfd_cam_weights(&h, &x, TUMOR, &layer, Weighting::Logits, 8).unwrap();
        prop_assert!(max_abs_diff(&conf.weights, &conf2.weights) < 1e-12);
        for (a, b) in logit.weights.iter().zip(&logit2.weights) {
            prop_assert!((b - a - c).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_size_does_not_change_weights(net in 0u64..1000, img in any::<u64>(), batch in 1usize..40) {
        let h = handle(net);
        let x = image_from(img);
        let layer = h.default_layer().to_string();
        let (_, s1) = score_cam_weights(&h, &x, TUMOR, &layer, 1).unwrap();
        let (_, sb) = score_cam_weights(&h, &x, TUMOR, &layer, batch).unwrap();
        prop_assert_eq!(s1.weights, sb.weights);
        let (_, c1) = cfd_cam_weights(&h, &x, TUMOR, &layer, Weighting::Confidence, 1).unwrap();
        let (_, cb) = cfd_cam_weights(&h, &x, TUMOR, &layer, Weighting::Confidence, batch).unwrap();
        prop_assert_eq!(c1.weights, cb.weights);
    }

    #[test]
    fn multiscale_fusion_identities(net in 0u64..1000, img in any::<u64>()) {
        let h = handle(net);
        let x = image_from(img);
        let req = CamRequest::new(CamMethod::GradCam, TUMOR);
        let direct = req.run(&h, &x).unwrap();
        let single = multiscale_cam(&req, &h, &x, &ScaleSpec::single(1.0)).unwrap();
        prop_assert!(max_abs_diff(direct.data(), single.data()) < 1e-12);

        let scales = ScaleSpec::default();
        let maps = per_scale_maps(&req, &h, &x, &scales).unwrap();
        prop_assert_eq!(maps.len(), 2);
        let fused = multiscale_cam(&req, &h, &x, &scales).unwrap();
        prop_assert_eq!(&fused, &fuse_maps(&maps, Fusion::Mean).unwrap());
        let mean = fuse_raw(&maps, Fusion::Mean).unwrap();
        let max = fuse_raw(&maps, Fusion::Max).unwrap();
        for ((m, a), (b, c)) in mean.data().iter().zip(max.data()).zip(maps[0].data().iter().zip(maps[1].data())) {
            prop_assert!((m - (b + c) / 2.0).abs() < 1e-12);
            prop_assert_eq!(*a, b.max(*c));
        }
        let twice = fuse_maps(&[maps[0].clone(), maps[0].clone()], Fusion::Mean).unwrap();
        prop_assert!(max_abs_diff(twice.data(), maps[0].data()) < 1e-12);
    }
}

#[test]
fn maps_are_deterministic() {
    let h = handle(3);
    let x = image_from(11);
    for method in CamMethod::ALL {
        let req = CamRequest::new(method, TUMOR);
        assert_eq!(req.run(&h, &x).unwrap(), req.run(&h, &x).unwrap(), "{method:?}");
    }
}

#[test]
fn bad_requests_are_rejected() {
    let h = handle(0);
    let x = image_from(0);
    assert!(CamRequest::new(CamMethod::CfdCam, 2).run(&h, &x).is_err());
    assert!(CamRequest::new(CamMethod::ScoreCam, TUMOR).with_batch_size(0).run(&h, &x).is_err());
    assert!(CamRequest::new(CamMethod::GradCam, TUMOR).with_layers(["nope"]).run(&h, &x).is_err());
    assert!(CamRequest::new(CamMethod::GradCam, TUMOR)
        .with_layers(["stage1", "stage2"])
        .run(&h, &x)
        .is_err());
    let wrong = Tensor3::zeros(3, 64, 64);
    assert!(CamRequest::new(CamMethod::GradCam, TUMOR).run(&h, &wrong).is_err());
}
