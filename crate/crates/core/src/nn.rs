//! Deterministic f32 forward pass for Dense, Conv2D, ReLU, Flatten and
//! Softmax layers.
//!
//! Every output element is produced by one scalar kernel with a fixed
//! accumulation order (row-major over the reduction axes), so evaluating a
//! whole layer and evaluating a sub-region of it give bit-identical values on
//! the same build. Workers rely on this to regenerate committed bytes; the
//! client relies on it to recompute a single verify unit.
//!
//! Layout conventions: Dense weights are `[out, in]` and act on rank-1
//! inputs. Conv2D inputs are `[height, width, channels]`, kernels are
//! `[kh, kw, in_ch, out_ch]`. `Same` padding follows the usual
//! `out = ceil(in / stride)` rule with the extra padding row/column placed at
//! the bottom/right. Softmax normalizes over every element of its input.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use thiserror::Error;

use crate::tensor::{Region, Shape, Tensor, TensorError};

struct LayerNo(Option<usize>);

impl fmt::Display for LayerNo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(i) => write!(f, "layer {i}"),
            None => f.write_str("layer"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("{}: expected input shape {expected}, got {found}", LayerNo(*.layer))]
    Shape {
        layer: Option<usize>,
        expected: String,
        found: Shape,
    },
    #[error("invalid layer parameters: {0}")]
    InvalidLayer(String),
    #[error("{0:?} layer has no linear part")]
    NotLinear(LayerKind),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl NnError {
    pub(crate) fn at_layer(self, index: usize) -> Self {
        match self {
            NnError::Shape { expected, found, .. } => NnError::Shape {
                layer: Some(index),
                expected,
                found,
            },
            other => other,
        }
    }

    fn shape(expected: String, found: &Shape) -> Self {
        NnError::Shape {
            layer: None,
            expected,
            found: found.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    Flatten,
    Softmax,
}

impl LayerKind {
    pub fn is_linear(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2d | LayerKind::Flatten)
    }

    /// Softmax needs its whole input to check any output, so its tensors are
    /// committed as a single unit.
    pub fn is_sliceable(self) -> bool {
        self != LayerKind::Softmax
    }

    pub fn has_params(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    weights: Tensor,
    bias: Tensor,
}

impl Dense {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self, NnError> {
        let wd = weights.shape().dims();
        if wd.len() != 2 {
            return Err(NnError::InvalidLayer(format!(
                "dense weights must be [out, in], got {}",
                weights.shape()
            )));
        }
        if bias.shape().dims() != [wd[0]] {
            return Err(NnError::InvalidLayer(format!(
                "dense bias {} does not match {} output rows",
                bias.shape(),
                wd[0]
            )));
        }
        Ok(Dense { weights, bias })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn in_features(&self) -> usize {
        self.weights.shape().dims()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weights.shape().dims()[0]
    }

    fn dot(&self, out: usize, input: &[f32]) -> f32 {
        let n = self.in_features();
        let row = &self.weights.data()[out * n..(out + 1) * n];
        let mut acc = 0.0f32;
        for (w, x) in row.iter().zip(input) {
            acc += w * x;
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    kernels: Tensor,
    bias: Tensor,
    stride: usize,
    padding: Padding,
}

impl Conv2d {
    pub fn new(kernels: Tensor, bias: Tensor, stride: usize, padding: Padding) -> Result<Self, NnError> {
        let kd = kernels.shape().dims();
        if kd.len() != 4 {
            return Err(NnError::InvalidLayer(format!(
                "conv2d kernels must be [kh, kw, in_ch, out_ch], got {}",
                kernels.shape()
            )));
        }
        if bias.shape().dims() != [kd[3]] {
            return Err(NnError::InvalidLayer(format!(
                "conv2d bias {} does not match {} output channels",
                bias.shape(),
                kd[3]
            )));
        }
        if stride == 0 {
            return Err(NnError::InvalidLayer("conv2d stride must be positive".into()));
        }
        Ok(Conv2d {
            kernels,
            bias,
            stride,
            padding,
        })
    }

    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> Padding {
        self.padding
    }

    fn dims(&self) -> [usize; 4] {
        let d = self.kernels.shape().dims();
        [d[0], d[1], d[2], d[3]]
    }

    fn geometry(&self, input: &Shape) -> Result<ConvGeometry, NnError> {
        let [kh, kw, in_c, out_c] = self.dims();
        let expected = || format!("[h, w, {in_c}] with h >= {kh}, w >= {kw}");
        let d = input.dims();
        if d.len() != 3 || d[2] != in_c {
            return Err(NnError::shape(expected(), input));
        }
        let (in_h, in_w) = (d[0], d[1]);
        let s = self.stride;
        let (out_h, pad_top, out_w, pad_left) = match self.padding {
            Padding::Valid => {
                if in_h < kh || in_w < kw {
                    return Err(NnError::shape(expected(), input));
                }
                ((in_h - kh) / s + 1, 0, (in_w - kw) / s + 1, 0)
            }
            Padding::Same => {
                let out_h = in_h.div_ceil(s);
                let out_w = in_w.div_ceil(s);
                let pad_h = ((out_h - 1) * s + kh).saturating_sub(in_h);
                let pad_w = ((out_w - 1) * s + kw).saturating_sub(in_w);
                (out_h, pad_h / 2, out_w, pad_w / 2)
            }
        };
        Ok(ConvGeometry {
            in_h,
            in_w,
            in_c,
            kh,
            kw,
            out_c,
            stride: s,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    in_h: usize,
    in_w: usize,
    in_c: usize,
    kh: usize,
    kw: usize,
    out_c: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeometry {
    fn correlate(&self, kernels: &[f32], input: &[f32], oy: usize, ox: usize, oc: usize) -> f32 {
        let mut acc = 0.0f32;
        for ky in 0..self.kh {
            let iy = (oy * self.stride + ky).wrapping_sub(self.pad_top);
            if iy >= self.in_h {
                continue;
            }
            for kx in 0..self.kw {
                let ix = (ox * self.stride + kx).wrapping_sub(self.pad_left);
                if ix >= self.in_w {
                    continue;
                }
                let kbase = (ky * self.kw + kx) * self.in_c * self.out_c + oc;
                let ibase = (iy * self.in_w + ix) * self.in_c;
                for ic in 0..self.in_c {
                    acc += kernels[kbase + ic * self.out_c] * input[ibase + ic];
                }
            }
        }
        acc
    }

    /// Input rows (or columns) read by output rows `[start, start + len)`.
    fn receptive(start: usize, len: usize, stride: usize, pad: usize, k: usize, limit: usize) -> (usize, usize) {
        let lo = (start * stride).saturating_sub(pad);
        let hi = ((start + len - 1) * stride + k).saturating_sub(pad).min(limit);
        (lo, hi.max(lo + 1).min(limit) - lo)
    }
}

/// One model layer.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense(Dense),
    Conv2d(Conv2d),
    Relu,
    Flatten,
    Softmax,
}

impl LayerSpec {
    pub fn dense(weights: Tensor, bias: Tensor) -> Result<Self, NnError> {
        Dense::new(weights, bias).map(LayerSpec::Dense)
    }

    pub fn conv2d(kernels: Tensor, bias: Tensor, stride: usize, padding: Padding) -> Result<Self, NnError> {
        Conv2d::new(kernels, bias, stride, padding).map(LayerSpec::Conv2d)
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            LayerSpec::Dense(_) => LayerKind::Dense,
            LayerSpec::Conv2d(_) => LayerKind::Conv2d,
            LayerSpec::Relu => LayerKind::Relu,
            LayerSpec::Flatten => LayerKind::Flatten,
            LayerSpec::Softmax => LayerKind::Softmax,
        }
    }

    pub fn is_linear(&self) -> bool {
        self.kind().is_linear()
    }

    pub fn is_sliceable(&self) -> bool {
        self.kind().is_sliceable()
    }

    /// Weight and bias tensors of parametric layers.
    pub fn params(&self) -> Option<(&Tensor, &Tensor)> {
        match self {
            LayerSpec::Dense(d) => Some((&d.weights, &d.bias)),
            LayerSpec::Conv2d(c) => Some((&c.kernels, &c.bias)),
            _ => None,
        }
    }

    /// Same layer with replaced weight and bias tensors of identical shapes.
    pub fn with_params(&self, weights: Tensor, bias: Tensor) -> Result<Self, NnError> {
        match self {
            LayerSpec::Dense(d) if weights.shape() == d.weights.shape() => LayerSpec::dense(weights, bias),
            LayerSpec::Conv2d(c) if weights.shape() == c.kernels.shape() => {
                LayerSpec::conv2d(weights, bias, c.stride, c.padding)
            }
            LayerSpec::Dense(_) | LayerSpec::Conv2d(_) => Err(NnError::InvalidLayer(format!(
                "replacement weights {} do not match the layer",
                weights.shape()
            ))),
            other => Err(NnError::NotLinear(other.kind())),
        }
    }

    pub fn output_shape(&self, input: &Shape) -> Result<Shape, NnError> {
        match self {
            LayerSpec::Dense(d) => {
                if input.dims() != [d.in_features()] {
                    return Err(NnError::shape(format!("[{}]", d.in_features()), input));
                }
                Ok(Shape::vector(d.out_features())?)
            }
            LayerSpec::Conv2d(c) => {
                let g = c.geometry(input)?;
                Ok(Shape::new(vec![g.out_h, g.out_w, g.out_c])?)
            }
            LayerSpec::Relu | LayerSpec::Softmax => Ok(input.clone()),
            LayerSpec::Flatten => Ok(Shape::vector(input.len())?),
        }
    }

    /// Region of the input read when computing `out_region` of the output.
    pub fn input_region(&self, input: &Shape, out_region: &Region) -> Result<Region, NnError> {
        let out_shape = self.output_shape(input)?;
        out_region.check_fits(&out_shape)?;
        Ok(match self {
            LayerSpec::Dense(_) | LayerSpec::Softmax => input.full_region(),
            LayerSpec::Relu => out_region.clone(),
            LayerSpec::Conv2d(c) => {
                let g = c.geometry(input)?;
                let (y0, hy) = ConvGeometry::receptive(
                    out_region.offset[0],
                    out_region.extent[0],
                    g.stride,
                    g.pad_top,
                    g.kh,
                    g.in_h,
                );
                let (x0, hx) = ConvGeometry::receptive(
                    out_region.offset[1],
                    out_region.extent[1],
                    g.stride,
                    g.pad_left,
                    g.kw,
                    g.in_w,
                );
                Region::new(vec![y0, x0, 0], vec![hy, hx, g.in_c])
            }
            LayerSpec::Flatten => {
                // Bounding box over the leading axis of the flat range.
                let lead = input.strides()[0];
                let first = out_region.offset[0] / lead;
                let last = (out_region.offset[0] + out_region.extent[0] - 1) / lead;
                let mut offset = vec![0; input.rank()];
                let mut extent = input.dims().to_vec();
                offset[0] = first;
                extent[0] = last - first + 1;
                Region::new(offset, extent)
            }
        })
    }

    /// Layer output restricted to `out_region`, in row-major region order.
    /// Only the elements of [`LayerSpec::input_region`] are read from
    /// `input`. Values are bit-identical to the matching elements of
    /// [`forward_layer`].
    pub fn forward_region(&self, input: &Tensor, out_region: &Region) -> Result<Vec<f32>, NnError> {
        self.eval_region(input, out_region, true)
    }

    fn eval_region(&self, input: &Tensor, out_region: &Region, with_bias: bool) -> Result<Vec<f32>, NnError> {
        let out_shape = self.output_shape(input.shape())?;
        out_region.check_fits(&out_shape)?;
        let x = input.data();
        Ok(match self {
            LayerSpec::Dense(d) => {
                let start = out_region.offset[0];
                (start..start + out_region.extent[0])
                    .map(|o| {
                        let acc = d.dot(o, x);
                        if with_bias {
                            acc + d.bias.data()[o]
                        } else {
                            acc
                        }
                    })
                    .collect()
            }
            LayerSpec::Conv2d(c) => {
                let g = c.geometry(input.shape())?;
                let k = c.kernels.data();
                let b = c.bias.data();
                let mut out = Vec::with_capacity(out_region.len());
                let (o, e) = (&out_region.offset, &out_region.extent);
                for oy in o[0]..o[0] + e[0] {
                    for ox in o[1]..o[1] + e[1] {
                        for oc in o[2]..o[2] + e[2] {
                            let acc = g.correlate(k, x, oy, ox, oc);
                            out.push(if with_bias { acc + b[oc] } else { acc });
                        }
                    }
                }
                out
            }
            LayerSpec::Relu => out_region
                .flat_indices(&out_shape)
                .into_iter()
                .map(|i| relu(x[i]))
                .collect(),
            LayerSpec::Flatten => {
                let start = out_region.offset[0];
                x[start..start + out_region.extent[0]].to_vec()
            }
            LayerSpec::Softmax => {
                let full = softmax(x);
                out_region
                    .flat_indices(&out_shape)
                    .into_iter()
                    .map(|i| full[i])
                    .collect()
            }
        })
    }

    /// The linear map of a linear layer without its bias: `W x` for Dense and
    /// Conv2D, a reshape for Flatten.
    pub fn forward_linear(&self, input: &Tensor) -> Result<Tensor, NnError> {
        if !self.is_linear() {
            return Err(NnError::NotLinear(self.kind()));
        }
        let out_shape = self.output_shape(input.shape())?;
        let data = self.eval_region(input, &out_shape.full_region(), false)?;
        Ok(Tensor::new(out_shape, data)?)
    }
}

fn relu(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn softmax(x: &[f32]) -> Vec<f32> {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = x.iter().map(|&v| libm::expf(v - max)).collect();
    let mut sum = 0.0f32;
    for e in &exps {
        sum += e;
    }
    exps.into_iter().map(|e| e / sum).collect()
}

/// Evaluates one layer on a full input tensor.
pub fn forward_layer(layer: &LayerSpec, input: &Tensor) -> Result<Tensor, NnError> {
    let out_shape = layer.output_shape(input.shape())?;
    let data = layer.forward_region(input, &out_shape.full_region())?;
    Ok(Tensor::new(out_shape, data)?)
}

/// Ordered layers plus the expected input shape. Construction checks that
/// consecutive shapes line up.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    input_shape: Shape,
    layers: Vec<LayerSpec>,
}

impl ModelSpec {
    pub fn new(input_shape: Shape, layers: Vec<LayerSpec>) -> Result<Self, NnError> {
        infer_shapes(&input_shape, &layers)?;
        Ok(ModelSpec { input_shape, layers })
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, index: usize) -> Option<&LayerSpec> {
        self.layers.get(index)
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Shapes of every intermediate: the input followed by each layer output.
    pub fn shapes(&self) -> Vec<Shape> {
        infer_shapes(&self.input_shape, &self.layers).expect("validated at construction")
    }

    /// Runs the model and returns the output together with every
    /// intermediate (input first, output last).
    pub fn forward(&self, input: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
        self.forward_with(input, |_, _| {})
    }

    /// Like [`ModelSpec::forward`], calling `hook(layer_index, output)` on
    /// each layer output before it feeds the next layer.
    pub fn forward_with(
        &self,
        input: &Tensor,
        mut hook: impl FnMut(usize, &mut Tensor),
    ) -> Result<(Tensor, Vec<Tensor>), NnError> {
        if input.shape() != &self.input_shape {
            return Err(NnError::Shape {
                layer: Some(0),
                expected: format!("{}", self.input_shape),
                found: input.shape().clone(),
            });
        }
        let mut intermediates = Vec::with_capacity(self.layers.len() + 1);
        intermediates.push(input.clone());
        for (i, layer) in self.layers.iter().enumerate() {
            let prev = intermediates.last().expect("non-empty");
            let mut out = forward_layer(layer, prev).map_err(|e| e.at_layer(i))?;
            hook(i, &mut out);
            intermediates.push(out);
        }
        let output = intermediates.last().expect("non-empty").clone();
        Ok((output, intermediates))
    }

    /// The sub-model consisting of the single layer `index`.
    pub fn single_layer(&self, index: usize) -> Option<ModelSpec> {
        let layer = self.layers.get(index)?.clone();
        let input_shape = self.shapes().swap_remove(index);
        Some(ModelSpec {
            input_shape,
            layers: vec![layer],
        })
    }
}

/// Shape of every intermediate tensor, without evaluating data.
pub fn infer_shapes(input: &Shape, layers: &[LayerSpec]) -> Result<Vec<Shape>, NnError> {
    let mut shapes = Vec::with_capacity(layers.len() + 1);
    shapes.push(input.clone());
    for (i, layer) in layers.iter().enumerate() {
        let next = layer
            .output_shape(shapes.last().expect("non-empty"))
            .map_err(|e| e.at_layer(i))?;
        shapes.push(next);
    }
    Ok(shapes)
}

/// Free-function form of [`ModelSpec::forward`].
pub fn forward_model(model: &ModelSpec, input: &Tensor) -> Result<(Tensor, Vec<Tensor>), NnError> {
    model.forward(input)
}
