mod common;

use std::collections::HashSet;

use offload_core::masking::{
    combine_shares, expected_leak_count, generate_masks, mask_input, masking_failure_rate, split_weights,
    unmask_output, MaskSet, MaskingError,
};
use offload_core::nn::{forward_layer, LayerSpec, Padding};
use offload_core::rng::DetRng;
use offload_core::Tensor;
use proptest::prelude::*;

#[test]
fn scalar_unmasking_example() {
    let layer = LayerSpec::dense(Tensor::matrix(&[&[2.0]]), Tensor::vector(&[1.0])).unwrap();
    let eps = Tensor::vector(&[0.5]);
    let masked = Tensor::vector(&[3.0]).add(&eps).unwrap();
    let from_worker = forward_layer(&layer, &masked).unwrap();
    assert_eq!(from_worker.data(), &[8.0]);
    let pre = layer.forward_linear(&eps).unwrap();
    assert_eq!(pre.data(), &[1.0]);
    assert_eq!(from_worker.sub(&pre).unwrap().data(), &[7.0]);
}

#[test]
fn failure_rate_formulas() {
    assert!((masking_failure_rate(1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    assert!((expected_leak_count(1000, 10.0).unwrap() - 2000.0 / 21.0).abs() < 1e-9);
    assert!(masking_failure_rate(0.5).is_err());
    assert!(expected_leak_count(0, 2.0).is_err());
}

#[test]
fn mask_ids_are_one_time() {
    let mut rng = DetRng::seeded(1);
    let layer = common::dense(4, 3, &mut rng);
    let mut set = generate_masks(&layer, 0, &common::shape(&[4]), 16, 2.0, (-1.0, 1.0), 9).unwrap();
    let x = common::random_tensor(&[4], &mut rng);
    let mut seen = HashSet::new();
    for _ in 0..16 {
        let (masked, id) = mask_input(&x, &mut set).unwrap();
        assert!(seen.insert(id));
        let y = unmask_output(&forward_layer(&layer, &masked).unwrap(), &mut set, id).unwrap();
        assert_eq!(unmask_output(&y, &mut set, id), Err(MaskingError::AlreadyUnmasked(id)));
    }
    assert_eq!(mask_input(&x, &mut set).unwrap_err(), MaskingError::OutOfMasks);
    set.replenish(&layer, 4, 10).unwrap();
    let (_, id) = mask_input(&x, &mut set).unwrap();
    assert!(!seen.contains(&id), "replenished ids must be fresh");
    assert_eq!(MaskSet::from_bytes(&set.to_bytes()).unwrap(), set);
}

proptest! {
    #[test]
    fn privacy_masks_cancel(seed in any::<u64>(), k in prop::sample::select(vec![0.5f32, 1.0, 10.0, 100.0])) {
        let mut rng = DetRng::seeded(seed);
        let layer = common::dense(6, 4, &mut rng);
        let x = common::random_tensor(&[6], &mut rng);
        let mut set = generate_masks(&layer, 0, &common::shape(&[6]), 1, k, (-1.0, 1.0), seed).unwrap();
        let (masked, id) = mask_input(&x, &mut set).unwrap();
        let y = unmask_output(&forward_layer(&layer, &masked).unwrap(), &mut set, id).unwrap();
        let plain = forward_layer(&layer, &x).unwrap();
        for (a, b) in y.data().iter().zip(plain.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + k) * 10.0, "{a} vs {b}");
        }
    }

    #[test]
    fn weight_shares_are_additive(seed in any::<u64>(), k in prop::sample::select(vec![0.1f32, 1.0, 10.0])) {
        let mut rng = DetRng::seeded(seed);
        let cases = [
            (common::dense(5, 3, &mut rng), vec![5]),
            (common::conv(3, 2, 2, 1, Padding::Same, &mut rng), vec![5, 4, 2]),
            (common::conv(2, 2, 3, 2, Padding::Valid, &mut rng), vec![6, 6, 2]),
        ];
        for (layer, dims) in cases {
            let shares = split_weights(&layer, k, seed).unwrap();
            let (w, b) = shares.reconstruct().unwrap();
            let (w0, b0) = layer.params().unwrap();
            prop_assert!(w.max_relative_diff(w0, 1.0).unwrap() < 1e-5 * (1.0 + k));
            prop_assert!(b.max_relative_diff(b0, 1.0).unwrap() < 1e-5 * (1.0 + k));
            let x = common::random_tensor(&dims, &mut rng);
            let y = combine_shares(
                &forward_layer(&shares.share_plus, &x).unwrap(),
                &forward_layer(&shares.share_minus, &x).unwrap(),
            ).unwrap();
            let plain = forward_layer(&layer, &x).unwrap();
            prop_assert!(y.max_relative_diff(&plain, 1.0).unwrap() < 1e-4 * (1.0 + k));
        }
    }
}

#[test]
fn non_linear_layers_cannot_be_masked() {
    assert!(matches!(
        generate_masks(&LayerSpec::Relu, 0, &common::shape(&[3]), 1, 1.0, (0.0, 1.0), 0),
        Err(MaskingError::UnsupportedLayer(_))
    ));
    assert!(split_weights(&LayerSpec::Softmax, 1.0, 0).is_err());
}
