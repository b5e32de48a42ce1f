//! One-time additive masks for data privacy and additive weight shares for
//! model confidentiality.
//!
//! Privacy: for a linear layer `y = W x + b` the device draws masks `e_i`
//! ahead of time and stores `W e_i` (no bias). At inference time it sends
//! `x + e_i` and recovers `y = y' - W e_i`. The bias is deliberately absent
//! from the precomputed product, since it survives in `y'` exactly once.
//!
//! Confidentiality: the parameters are split into `(W + d)/2, (b + c)/2` and
//! `(W - d)/2, (b - c)/2`. Two non-colluding workers each evaluate one share
//! and the device adds their outputs.
//!
//! Masking the weights for a single worker (sending `W + d` and removing
//! `d x` afterwards) is not offered: removing `d x` costs the device as much
//! as computing `W x` itself.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::codec::{DecodeError, Reader, Writer};
use crate::nn::{LayerKind, LayerSpec, NnError};
use crate::rng::DetRng;
use crate::tensor::{Shape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MaskingError {
    #[error("masking only applies to linear layers, got {0:?}")]
    UnsupportedLayer(LayerKind),
    #[error("input range must satisfy min < max, got ({0}, {1})")]
    InvalidRange(f32, f32),
    #[error("mask scale must be finite and non-negative, got {0}")]
    InvalidScale(f32),
    #[error("mask set exhausted; generate more masks before offloading")]
    OutOfMasks,
    #[error("unknown mask id {0}")]
    UnknownMask(u64),
    #[error("mask {0} was never issued by mask_input")]
    NotIssued(u64),
    #[error("mask {0} was already used to unmask an output")]
    AlreadyUnmasked(u64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskState {
    Fresh,
    /// Handed out by `mask_input`, awaiting `unmask_output`.
    Issued,
    Retired,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub id: u64,
    pub epsilon: Tensor,
    /// Linear part of the layer applied to `epsilon`.
    pub precomputed: Tensor,
    pub state: MaskState,
}

/// Stockpile of one-time masks for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    layer_index: usize,
    k_scale: f32,
    half_width: f32,
    masks: Vec<Mask>,
    next_id: u64,
}

impl MaskSet {
    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn k_scale(&self) -> f32 {
        self.k_scale
    }

    /// `k * (max - min)` of the input range the set was generated for.
    pub fn half_width(&self) -> f32 {
        self.half_width
    }

    pub fn masks(&self) -> &[Mask] {
        &self.masks
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn available(&self) -> usize {
        self.masks.iter().filter(|m| m.state == MaskState::Fresh).count()
    }

    fn push_fresh(
        &mut self,
        layer: &LayerSpec,
        input_shape: &Shape,
        count: usize,
        rng: &mut DetRng,
    ) -> Result<(), MaskingError> {
        for _ in 0..count {
            let data = (0..input_shape.len())
                .map(|_| rng.symmetric_f32(self.half_width))
                .collect();
            let epsilon = Tensor::new(input_shape.clone(), data)?;
            let precomputed = layer.forward_linear(&epsilon)?;
            self.masks.push(Mask {
                id: self.next_id,
                epsilon,
                precomputed,
                state: MaskState::Fresh,
            });
            self.next_id += 1;
        }
        Ok(())
    }

    /// Adds `count` fresh masks with new ids. Retired masks are dropped.
    pub fn replenish(&mut self, layer: &LayerSpec, count: usize, seed: u64) -> Result<(), MaskingError> {
        let input_shape = match self.masks.first() {
            Some(m) => m.epsilon.shape().clone(),
            None => return Err(MaskingError::OutOfMasks),
        };
        self.masks.retain(|m| m.state != MaskState::Retired);
        let mut rng = DetRng::stream(seed, self.next_id);
        self.push_fresh(layer, &input_shape, count, &mut rng)
    }

    fn find(&mut self, id: u64) -> Result<&mut Mask, MaskingError> {
        self.masks
            .iter_mut()
            .find(|m| m.id == id)
            .ok_or(MaskingError::UnknownMask(id))
    }

    /// Serialized form: header, per-mask state bitmaps, then the tensors.
    ///
    /// ```text
    /// "VSMK" u16 version=1 u32 layer_index f32 k_scale f32 half_width
    /// u64 next_id u32 count
    /// consumed bitmap (ceil(count/8) bytes, bit i = mask i not fresh)
    /// retired bitmap  (same size)
    /// per mask: u64 id, tensor epsilon, tensor precomputed
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MASKSET_MAGIC)
            .u16(1)
            .len32(self.layer_index)
            .f32(self.k_scale)
            .f32(self.half_width)
            .u64(self.next_id)
            .len32(self.masks.len());
        let bitmap = |pred: &dyn Fn(&Mask) -> bool| {
            let mut bits = vec![0u8; self.masks.len().div_ceil(8)];
            for (i, m) in self.masks.iter().enumerate() {
                if pred(m) {
                    bits[i / 8] |= 1 << (i % 8);
                }
            }
            bits
        };
        w.bytes(&bitmap(&|m| m.state != MaskState::Fresh));
        w.bytes(&bitmap(&|m| m.state == MaskState::Retired));
        for m in &self.masks {
            w.u64(m.id).tensor(&m.epsilon).tensor(&m.precomputed);
        }
        w.into_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MASKSET_MAGIC {
            return Err(DecodeError::BadMagic);
        }
        let version = r.u16()?;
        if version != 1 {
            return Err(DecodeError::Version(version));
        }
        let layer_index = r.u32()? as usize;
        let k_scale = r.f32()?;
        let half_width = r.f32()?;
        let next_id = r.u64()?;
        let count = r.count(1)?;
        let nbytes = count.div_ceil(8);
        let consumed = r.take(nbytes)?.to_vec();
        let retired = r.take(nbytes)?.to_vec();
        let bit = |bits: &[u8], i: usize| bits[i / 8] & (1 << (i % 8)) != 0;
        let mut masks = Vec::with_capacity(count);
        for i in 0..count {
            let id = r.u64()?;
            if id >= next_id {
                return Err(DecodeError::invalid("mask id", id));
            }
            let epsilon = r.tensor()?;
            let precomputed = r.tensor()?;
            let state = match (bit(&consumed, i), bit(&retired, i)) {
                (false, false) => MaskState::Fresh,
                (true, false) => MaskState::Issued,
                (true, true) => MaskState::Retired,
                (false, true) => return Err(DecodeError::invalid("mask state", i as u64)),
            };
            masks.push(Mask {
                id,
                epsilon,
                precomputed,
                state,
            });
        }
        r.finish()?;
        Ok(MaskSet {
            layer_index,
            k_scale,
            half_width,
            masks,
            next_id,
        })
    }
}

const MASKSET_MAGIC: &[u8; 4] = b"VSMK";

fn check_scale(k: f32) -> Result<(), MaskingError> {
    if k.is_finite() && k >= 0.0 {
        Ok(())
    } else {
        Err(MaskingError::InvalidScale(k))
    }
}

/// Draws `count` masks uniformly from `[-e, e]`, `e = k_scale * (max - min)`,
/// and precomputes each one's product through the layer's linear part.
pub fn generate_masks(
    layer: &LayerSpec,
    layer_index: usize,
    input_shape: &Shape,
    count: usize,
    k_scale: f32,
    input_range: (f32, f32),
    seed: u64,
) -> Result<MaskSet, MaskingError> {
    if !layer.is_linear() {
        return Err(MaskingError::UnsupportedLayer(layer.kind()));
    }
    check_scale(k_scale)?;
    let (lo, hi) = input_range;
    if !(lo < hi) || !(hi - lo).is_finite() {
        return Err(MaskingError::InvalidRange(lo, hi));
    }
    // Validates the shape against the layer even when count == 0.
    layer.output_shape(input_shape)?;
    let mut set = MaskSet {
        layer_index,
        k_scale,
        half_width: k_scale * (hi - lo),
        masks: Vec::with_capacity(count),
        next_id: 0,
    };
    let mut rng = DetRng::stream(seed, 0);
    set.push_fresh(layer, input_shape, count, &mut rng)?;
    Ok(set)
}

/// Adds the next fresh mask to `x` and marks it issued.
pub fn mask_input(x: &Tensor, set: &mut MaskSet) -> Result<(Tensor, u64), MaskingError> {
    let mask = set
        .masks
        .iter_mut()
        .find(|m| m.state == MaskState::Fresh)
        .ok_or(MaskingError::OutOfMasks)?;
    let masked = x.add(&mask.epsilon)?;
    mask.state = MaskState::Issued;
    Ok((masked, mask.id))
}

/// `y' - W e` for the mask `mask_id`; retires the mask.
pub fn unmask_output(y_masked: &Tensor, set: &mut MaskSet, mask_id: u64) -> Result<Tensor, MaskingError> {
    let mask = set.find(mask_id)?;
    match mask.state {
        MaskState::Fresh => return Err(MaskingError::NotIssued(mask_id)),
        MaskState::Retired => return Err(MaskingError::AlreadyUnmasked(mask_id)),
        MaskState::Issued => {}
    }
    let y = y_masked.sub(&mask.precomputed)?;
    mask.state = MaskState::Retired;
    Ok(y)
}

/// The two additive halves of a parametric layer.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightShares {
    pub share_plus: LayerSpec,
    pub share_minus: LayerSpec,
    pub delta_scale: f32,
}

impl WeightShares {
    /// Shares for explicit masks `delta` (weights) and `beta` (bias).
    pub fn from_masks(
        layer: &LayerSpec,
        delta: &Tensor,
        beta: &Tensor,
        delta_scale: f32,
    ) -> Result<Self, MaskingError> {
        let (w, b) = layer.params().ok_or(MaskingError::UnsupportedLayer(layer.kind()))?;
        let half = |t: Tensor| t.map(|v| v * 0.5);
        let share_plus = layer.with_params(half(w.add(delta)?), half(b.add(beta)?))?;
        let share_minus = layer.with_params(half(w.sub(delta)?), half(b.sub(beta)?))?;
        Ok(WeightShares {
            share_plus,
            share_minus,
            delta_scale,
        })
    }

    /// Elementwise `plus + minus` of weights and bias.
    pub fn reconstruct(&self) -> Result<(Tensor, Tensor), MaskingError> {
        let (wp, bp) = self.share_plus.params().expect("parametric share");
        let (wm, bm) = self.share_minus.params().expect("parametric share");
        Ok((wp.add(wm)?, bp.add(bm)?))
    }
}

fn value_range(t: &Tensor) -> f32 {
    let (lo, hi) = t
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    hi - lo
}

/// Splits Dense/Conv2D parameters into two additive shares with masks drawn
/// from `[-k * range(W), k * range(W)]` (and likewise for the bias).
pub fn split_weights(layer: &LayerSpec, k_scale: f32, seed: u64) -> Result<WeightShares, MaskingError> {
    let (w, b) = layer.params().ok_or(MaskingError::UnsupportedLayer(layer.kind()))?;
    check_scale(k_scale)?;
    let mut rng = DetRng::stream(seed, 1);
    let mut draw = |t: &Tensor| {
        let hw = k_scale * value_range(t);
        let data = (0..t.len()).map(|_| rng.symmetric_f32(hw)).collect();
        Tensor::new(t.shape().clone(), data)
    };
    let delta = draw(w)?;
    let beta = draw(b)?;
    WeightShares::from_masks(layer, &delta, &beta, k_scale)
}

/// Adds the two workers' outputs.
pub fn combine_shares(y1: &Tensor, y2: &Tensor) -> Result<Tensor, MaskingError> {
    Ok(y1.add(y2)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("{what} out of domain: {value}")]
pub struct DomainError {
    pub what: &'static str,
    pub value: f64,
}

/// Per-value failure bound `2 / (2k + 1)` of a uniform mask whose half
/// width is `k` times the value spread. Requires `k >= 1`.
pub fn masking_failure_rate(k: f64) -> Result<f64, DomainError> {
    if !(k >= 1.0) || !k.is_finite() {
        return Err(DomainError {
            what: "mask scale k",
            value: k,
        });
    }
    Ok(2.0 / (2.0 * k + 1.0))
}

/// Expected number of leaked values out of `n`: `2n / (2k + 1)`.
pub fn expected_leak_count(n: u64, k: f64) -> Result<f64, DomainError> {
    if n == 0 {
        return Err(DomainError {
            what: "value count n",
            value: 0.0,
        });
    }
    Ok(n as f64 * masking_failure_rate(k)?)
}
