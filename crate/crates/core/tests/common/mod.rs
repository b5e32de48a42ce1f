#![allow(dead_code)]

use offload_core::nn::{LayerSpec, ModelSpec, Padding};
use offload_core::rng::DetRng;
use offload_core::{Shape, Tensor};
use proptest::prelude::*;

pub fn shape(dims: &[usize]) -> Shape {
    Shape::new(dims.to_vec()).unwrap()
}

pub fn random_tensor(dims: &[usize], rng: &mut DetRng) -> Tensor {
    let s = shape(dims);
    let data = (0..s.len()).map(|_| rng.uniform(-1.0, 1.0) as f32).collect();
    Tensor::new(s, data).unwrap()
}

pub fn dense(inputs: usize, outputs: usize, rng: &mut DetRng) -> LayerSpec {
    LayerSpec::dense(random_tensor(&[outputs, inputs], rng), random_tensor(&[outputs], rng)).unwrap()
}

pub fn conv(kh: usize, cin: usize, cout: usize, stride: usize, padding: Padding, rng: &mut DetRng) -> LayerSpec {
    LayerSpec::conv2d(
        random_tensor(&[kh, kh, cin, cout], rng),
        random_tensor(&[cout], rng),
        stride,
        padding,
    )
    .unwrap()
}

/// Dense -> ReLU -> Dense -> Softmax.
pub fn mlp(inputs: usize, hidden: usize, outputs: usize, seed: u64) -> ModelSpec {
    let mut rng = DetRng::seeded(seed);
    let layers = vec![
        dense(inputs, hidden, &mut rng),
        LayerSpec::Relu,
        dense(hidden, outputs, &mut rng),
        LayerSpec::Softmax,
    ];
    ModelSpec::new(shape(&[inputs]), layers).unwrap()
}

/// Conv -> ReLU -> Conv -> Flatten -> Dense.
pub fn cnn(side: usize, seed: u64) -> ModelSpec {
    let mut rng = DetRng::seeded(seed);
    let layers = vec![
        conv(3, 2, 3, 1, Padding::Same, &mut rng),
        LayerSpec::Relu,
        conv(3, 3, 2, 2, Padding::Valid, &mut rng),
        LayerSpec::Flatten,
    ];
    let shapes = offload_core::nn::infer_shapes(&shape(&[side, side, 2]), &layers).unwrap();
    let flat = shapes.last().unwrap().len();
    let mut layers = layers;
    layers.push(dense(flat, 3, &mut rng));
    ModelSpec::new(shape(&[side, side, 2]), layers).unwrap()
}

pub fn arb_tensor(max_rank: usize, max_dim: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(1..=max_dim, 1..=max_rank).prop_flat_map(|dims| {
        let len = dims.iter().product::<usize>();
        prop::collection::vec(-100.0f32..100.0, len).prop_map(move |data| Tensor::new(shape(&dims), data).unwrap())
    })
}
