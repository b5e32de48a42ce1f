//! Binary containers for models and standalone tensors.
//!
//! Model container (all integers little-endian):
//!
//! ```text
//! "VSML"  u16 version=1  u32 layer_count  shape input_shape
//! per layer:
//!   u8 kind   0=Dense 1=Conv2D 2=ReLU 3=Flatten 4=Softmax
//!   Dense:    tensor weights [out,in]    tensor bias [out]
//!   Conv2D:   u32 stride  u8 padding (0=valid 1=same)
//!             tensor kernels [kh,kw,in,out]  tensor bias [out]
//! shape  := u32 rank, u32 dim * rank
//! tensor := shape, f32 * product(dims)
//! ```
//!
//! A tensor file is `"VSTN" u16 version=1 tensor`. Tensors inside protocol
//! payloads use the bare `tensor` record.

use alloc::vec::Vec;

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::nn::{LayerKind, LayerSpec, ModelSpec, NnError, Padding};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: [u8; 4] = *b"VSML";
pub const TENSOR_MAGIC: [u8; 4] = *b"VSTN";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("container holds an invalid model: {0}")]
    Model(#[from] NnError),
}

impl LayerKind {
    pub fn code(self) -> u8 {
        match self {
            LayerKind::Dense => 0,
            LayerKind::Conv2d => 1,
            LayerKind::Relu => 2,
            LayerKind::Flatten => 3,
            LayerKind::Softmax => 4,
        }
    }
}

pub fn encode_model(model: &ModelSpec) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&MODEL_MAGIC).u16(FORMAT_VERSION).len32(model.len());
    w.shape(model.input_shape());
    for layer in model.layers() {
        w.u8(layer.kind().code());
        match layer {
            LayerSpec::Dense(d) => {
                w.tensor(d.weights()).tensor(d.bias());
            }
            LayerSpec::Conv2d(c) => {
                w.len32(c.stride());
                w.u8(match c.padding() {
                    Padding::Valid => 0,
                    Padding::Same => 1,
                });
                w.tensor(c.kernels()).tensor(c.bias());
            }
            LayerSpec::Relu | LayerSpec::Flatten | LayerSpec::Softmax => {}
        }
    }
    w.into_bytes()
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelSpec, ContainerError> {
    let mut r = Reader::new(bytes);
    if r.array::<4>()? != MODEL_MAGIC {
        return Err(DecodeError::BadMagic.into());
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(DecodeError::Version(version).into());
    }
    let count = r.count(1)?;
    let input_shape = r.shape()?;
    let mut layers = Vec::with_capacity(count);
    for _ in 0..count {
        layers.push(read_layer(&mut r)?);
    }
    r.finish()?;
    Ok(ModelSpec::new(input_shape, layers)?)
}

fn read_layer(r: &mut Reader<'_>) -> Result<LayerSpec, ContainerError> {
    let kind = r.u8()?;
    Ok(match kind {
        0 => {
            let w = r.tensor()?;
            let b = r.tensor()?;
            LayerSpec::dense(w, b)?
        }
        1 => {
            let stride = r.u32()? as usize;
            let padding = match r.u8()? {
                0 => Padding::Valid,
                1 => Padding::Same,
                p => return Err(DecodeError::invalid("padding", p).into()),
            };
            let k = r.tensor()?;
            let b = r.tensor()?;
            LayerSpec::conv2d(k, b, stride, padding)?
        }
        2 => LayerSpec::Relu,
        3 => LayerSpec::Flatten,
        4 => LayerSpec::Softmax,
        other => return Err(DecodeError::invalid("layer kind", other).into()),
    })
}

pub fn encode_tensor_file(t: &Tensor) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&TENSOR_MAGIC).u16(FORMAT_VERSION).tensor(t);
    w.into_bytes()
}

pub fn decode_tensor_file(bytes: &[u8]) -> Result<Tensor, DecodeError> {
    let mut r = Reader::new(bytes);
    if r.array::<4>()? != TENSOR_MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(DecodeError::Version(version));
    }
    let t = r.tensor()?;
    r.finish()?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use alloc::vec;

    fn sample_model() -> ModelSpec {
        let conv = LayerSpec::conv2d(
            Tensor::new(
                Shape::new(vec![2, 2, 1, 2]).unwrap(),
                (0..8).map(|v| v as f32 * 0.5).collect(),
            )
            .unwrap(),
            Tensor::vector(&[0.1, -0.1]),
            1,
            Padding::Same,
        )
        .unwrap();
        let dense = LayerSpec::dense(
            Tensor::new(Shape::new(vec![3, 18]).unwrap(), vec![0.25; 54]).unwrap(),
            Tensor::vector(&[1.0, 2.0, 3.0]),
        )
        .unwrap();
        ModelSpec::new(
            Shape::new(vec![3, 3, 1]).unwrap(),
            vec![conv, LayerSpec::Relu, LayerSpec::Flatten, dense, LayerSpec::Softmax],
        )
        .unwrap()
    }

    #[test]
    fn model_round_trips() {
        let m = sample_model();
        let bytes = encode_model(&m);
        assert_eq!(&bytes[..4], b"VSML");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[5, 0, 0, 0]);
        assert_eq!(decode_model(&bytes).unwrap(), m);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = encode_model(&sample_model());
        for cut in 0..bytes.len() {
            assert!(decode_model(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_model(&extra).is_err());
    }

    #[test]
    fn inconsistent_model_is_rejected() {
        // Dense expecting 18 inputs placed directly after a [3,3,1] input.
        let mut w = Writer::new();
        w.bytes(&MODEL_MAGIC).u16(1).u32(1).shape(&Shape::new(vec![3]).unwrap());
        w.u8(0)
            .tensor(&Tensor::matrix(&[&[1.0, 1.0]]))
            .tensor(&Tensor::vector(&[0.0]));
        assert!(matches!(decode_model(&w.into_bytes()), Err(ContainerError::Model(_))));
    }

    #[test]
    fn tensor_file_round_trip_and_magic() {
        let t = Tensor::vector(&[1.5, -2.5]);
        let bytes = encode_tensor_file(&t);
        assert_eq!(decode_tensor_file(&bytes).unwrap(), t);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(decode_tensor_file(&bad), Err(DecodeError::BadMagic));
    }
}
