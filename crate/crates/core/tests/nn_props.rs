mod common;

use offload_core::container::{decode_model, decode_tensor_file, encode_model, encode_tensor_file};
use offload_core::nn::{forward_layer, LayerSpec, Padding};
use offload_core::rng::DetRng;
use offload_core::Region;
use proptest::prelude::*;

proptest! {
    #[test]
    fn softmax_is_a_distribution(t in common::arb_tensor(2, 8)) {
        let y = forward_layer(&LayerSpec::Softmax, &t).unwrap();
        let sum: f32 = y.data().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-5);
        prop_assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert_eq!(y.argmax(), t.argmax());
    }

    #[test]
    fn region_evaluation_is_bit_identical(
        seed in any::<u64>(),
        side in 3usize..9,
        kh in 1usize..4,
        stride in 1usize..3,
        same in any::<bool>(),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 6),
    ) {
        let mut rng = DetRng::seeded(seed);
        let padding = if same { Padding::Same } else { Padding::Valid };
        let layer = common::conv(kh.min(side), 2, 3, stride, padding, &mut rng);
        let x = common::random_tensor(&[side, side, 2], &mut rng);
        let full = forward_layer(&layer, &x).unwrap();
        let dims = full.shape().dims().to_vec();
        let (offset, extent): (Vec<usize>, Vec<usize>) = dims
            .iter()
            .enumerate()
            .map(|(a, &d)| {
                let o = picks[2 * a].index(d);
                (o, 1 + picks[2 * a + 1].index(d - o))
            })
            .unzip();
        let region = Region::new(offset, extent);
        let part = layer.forward_region(&x, &region).unwrap();
        let want = full.extract(&region).unwrap();
        prop_assert_eq!(
            part.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            want.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        // Only the receptive field may influence the region.
        let field = layer.input_region(x.shape(), &region).unwrap();
        let mut masked = x.clone();
        for i in 0..masked.len() {
            let s = x.shape().strides();
            let idx: Vec<usize> = (0..3).map(|a| i / s[a] % x.shape().dims()[a]).collect();
            if !field.contains_index(&idx) {
                masked.data_mut()[i] = 1e6;
            }
        }
        prop_assert_eq!(layer.forward_region(&masked, &region).unwrap(), part);
    }

    #[test]
    fn tensor_files_round_trip(t in common::arb_tensor(4, 5)) {
        prop_assert_eq!(decode_tensor_file(&encode_tensor_file(&t)).unwrap(), t);
    }
}

#[test]
fn models_round_trip_through_the_container() {
    for model in [common::mlp(6, 5, 3, 1), common::cnn(7, 2)] {
        let bytes = encode_model(&model);
        assert_eq!(&bytes[..4], b"VSML");
        assert_eq!(decode_model(&bytes).unwrap(), model);
        for cut in [0, 5, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_model(&bytes[..cut]).is_err());
        }
    }
}

#[test]
fn cnn_forward_shapes() {
    let m = common::cnn(8, 3);
    let shapes = m.shapes();
    assert_eq!(shapes[1].dims(), &[8, 8, 3]);
    assert_eq!(shapes[3].dims(), &[3, 3, 2]);
    assert_eq!(shapes[4].dims(), &[18]);
    assert_eq!(shapes[5].dims(), &[3]);
}
