//! Desk-scale models and data: a small MLP classifier trained on a
//! synthetic four-class problem, a random CNN for the latency smoke
//! check, and the held-out corpus used by the mask-scale sweep.
//!
//! `examples/train_toy.rs` regenerates everything under `assets/`.

use std::path::PathBuf;

use offload_core::container::decode_model;
use offload_core::nn::{infer_shapes, LayerSpec, ModelSpec, Padding};
use offload_core::rng::DetRng;
use offload_core::{Shape, Tensor};

pub const FEATURES: usize = 16;
pub const CLASSES: usize = 4;
pub const HIDDEN: usize = 24;
pub const CORPUS_SIZE: usize = 100;
pub const CNN_SIDE: usize = 16;

pub const TRAIN_SEED: u64 = 0x70_79;
pub const CORPUS_SEED: u64 = 0xc0_4b;
pub const CNN_SEED: u64 = 0xc4_4e;

static TOY_MLP: &[u8] = include_bytes!("../assets/toy_mlp.vsml");
static TOY_CNN: &[u8] = include_bytes!("../assets/toy_cnn.vsml");

/// The bundled classifier.
pub fn toy_mlp() -> ModelSpec {
    decode_model(TOY_MLP).expect("bundled toy_mlp.vsml is valid")
}

/// The bundled CNN, input `[16, 16, 3]`.
pub fn toy_cnn() -> ModelSpec {
    decode_model(TOY_CNN).expect("bundled toy_cnn.vsml is valid")
}

pub fn assets_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets")
}

pub fn corpus_dir() -> PathBuf {
    assets_dir().join("corpus")
}

fn shape(dims: &[usize]) -> Shape {
    Shape::new(dims.to_vec()).expect("non-empty shape")
}

/// Class `c` is centred on +3 in features `4c..4c+4`; samples add
/// uniform noise in [-1, 1] to every feature.
pub fn synthetic_samples(count: usize, seed: u64) -> Vec<(Tensor, usize)> {
    let mut rng = DetRng::seeded(seed);
    (0..count)
        .map(|_| {
            let class = rng.below(CLASSES);
            let per = FEATURES / CLASSES;
            let data = (0..FEATURES)
                .map(|f| {
                    let centre = if f / per == class { 3.0 } else { 0.0 };
                    (centre + rng.uniform(-1.0, 1.0)) as f32
                })
                .collect();
            (Tensor::new(shape(&[FEATURES]), data).unwrap(), class)
        })
        .collect()
}

struct DenseF64 {
    w: Vec<f64>,
    b: Vec<f64>,
    inputs: usize,
    outputs: usize,
}

impl DenseF64 {
    fn random(inputs: usize, outputs: usize, rng: &mut DetRng) -> Self {
        let scale = (1.0 / inputs as f64).sqrt();
        DenseF64 {
            w: (0..inputs * outputs).map(|_| rng.uniform(-scale, scale)).collect(),
            b: vec![0.0; outputs],
            inputs,
            outputs,
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                self.b[o]
                    + (0..self.inputs)
                        .map(|i| self.w[o * self.inputs + i] * x[i])
                        .sum::<f64>()
            })
            .collect()
    }

    /// Applies one SGD step and returns the gradient w.r.t. `x`.
    fn backward(&mut self, x: &[f64], grad: &[f64], lr: f64) -> Vec<f64> {
        let mut gx = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            for i in 0..self.inputs {
                gx[i] += self.w[o * self.inputs + i] * grad[o];
                self.w[o * self.inputs + i] -= lr * grad[o] * x[i];
            }
            self.b[o] -= lr * grad[o];
        }
        gx
    }

    fn to_layer(&self) -> LayerSpec {
        let w = self.w.iter().map(|&v| v as f32).collect();
        let b = self.b.iter().map(|&v| v as f32).collect();
        LayerSpec::dense(
            Tensor::new(shape(&[self.outputs, self.inputs]), w).unwrap(),
            Tensor::new(shape(&[self.outputs]), b).unwrap(),
        )
        .unwrap()
    }
}

fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x.max(0.0)).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Trains Dense-ReLU-Dense-ReLU-Dense-Softmax with plain SGD on
/// cross-entropy.
pub fn train_mlp(seed: u64) -> ModelSpec {
    let mut rng = DetRng::stream(seed, 0);
    let mut l1 = DenseF64::random(FEATURES, HIDDEN, &mut rng);
    let mut l2 = DenseF64::random(HIDDEN, HIDDEN, &mut rng);
    let mut l3 = DenseF64::random(HIDDEN, CLASSES, &mut rng);
    let data: Vec<(Vec<f64>, usize)> = synthetic_samples(800, seed)
        .into_iter()
        .map(|(t, c)| (t.data().iter().map(|&v| v as f64).collect(), c))
        .collect();
    let lr = 0.02;
    for _epoch in 0..20 {
        for (x, class) in &data {
            let z1 = l1.forward(x);
            let a1 = relu(&z1);
            let z2 = l2.forward(&a1);
            let a2 = relu(&z2);
            let p = softmax(&l3.forward(&a2));
            let g3: Vec<f64> = p
                .iter()
                .enumerate()
                .map(|(i, &pi)| pi - (i == *class) as u8 as f64)
                .collect();
            let ga2 = l3.backward(&a2, &g3, lr);
            let g2: Vec<f64> = ga2
                .iter()
                .zip(&z2)
                .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
                .collect();
            let ga1 = l2.backward(&a1, &g2, lr);
            let g1: Vec<f64> = ga1
                .iter()
                .zip(&z1)
                .map(|(g, &z)| if z > 0.0 { *g } else { 0.0 })
                .collect();
            l1.backward(x, &g1, lr);
        }
    }
    let layers = vec![
        l1.to_layer(),
        LayerSpec::Relu,
        l2.to_layer(),
        LayerSpec::Relu,
        l3.to_layer(),
        LayerSpec::Softmax,
    ];
    ModelSpec::new(shape(&[FEATURES]), layers).unwrap()
}

fn random_tensor(dims: &[usize], scale: f64, rng: &mut DetRng) -> Tensor {
    let s = shape(dims);
    let data = (0..s.len()).map(|_| rng.uniform(-scale, scale) as f32).collect();
    Tensor::new(s, data).unwrap()
}

/// Conv3x3(3->8, same) - ReLU - Conv3x3(8->8, stride 2, same) - ReLU -
/// Flatten - Dense(512->4) - Softmax, with seeded random weights.
pub fn build_cnn(seed: u64) -> ModelSpec {
    let mut rng = DetRng::seeded(seed);
    let input = shape(&[CNN_SIDE, CNN_SIDE, 3]);
    let mut layers = vec![
        LayerSpec::conv2d(
            random_tensor(&[3, 3, 3, 8], 0.2, &mut rng),
            random_tensor(&[8], 0.1, &mut rng),
            1,
            Padding::Same,
        )
        .unwrap(),
        LayerSpec::Relu,
        LayerSpec::conv2d(
            random_tensor(&[3, 3, 8, 8], 0.1, &mut rng),
            random_tensor(&[8], 0.1, &mut rng),
            2,
            Padding::Same,
        )
        .unwrap(),
        LayerSpec::Relu,
        LayerSpec::Flatten,
    ];
    let flat = infer_shapes(&input, &layers).unwrap().last().unwrap().len();
    layers.push(
        LayerSpec::dense(
            random_tensor(&[CLASSES, flat], 0.05, &mut rng),
            random_tensor(&[CLASSES], 0.1, &mut rng),
        )
        .unwrap(),
    );
    layers.push(LayerSpec::Softmax);
    ModelSpec::new(input, layers).unwrap()
}

/// Held-out inputs for the sweep, drawn from the training distribution
/// with a different seed.
pub fn corpus(seed: u64) -> Vec<Tensor> {
    synthetic_samples(CORPUS_SIZE, seed)
        .into_iter()
        .map(|(t, _)| t)
        .collect()
}

/// Fraction of `samples` the model labels correctly.
pub fn accuracy(model: &ModelSpec, samples: &[(Tensor, usize)]) -> f64 {
    let hits = samples
        .iter()
        .filter(|(x, c)| model.forward(x).map(|(y, _)| y.argmax() == *c).unwrap_or(false))
        .count();
    hits as f64 / samples.len().max(1) as f64
}

/// A random input for the CNN.
pub fn cnn_input(seed: u64) -> Tensor {
    random_tensor(&[CNN_SIDE, CNN_SIDE, 3], 1.0, &mut DetRng::seeded(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::files::read_tensor_dir;

    #[test]
    fn bundled_assets_match_their_generators() {
        assert_eq!(toy_mlp(), train_mlp(TRAIN_SEED));
        assert_eq!(toy_cnn(), build_cnn(CNN_SEED));
        let stored: Vec<Tensor> = read_tensor_dir(&corpus_dir())
            .unwrap()
            .into_iter()
            .map(|(_, t)| t)
            .collect();
        assert_eq!(stored, corpus(CORPUS_SEED));
    }

    #[test]
    fn toy_classifier_learns_the_task() {
        let test = synthetic_samples(400, CORPUS_SEED ^ 1);
        assert!(accuracy(&toy_mlp(), &test) > 0.97);
    }
}
