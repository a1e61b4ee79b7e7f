//! Layer-list networks with retained-activation reverse mode.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::ConvGeometry;
use super::scalar::Scalar;
use super::tensor::{ParameterSet, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Layer {
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
        bias: bool,
    },
    Conv2d {
        name: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Relu,
    Sigmoid,
    Softmax,
    Flatten,
    Upsample2x,
    /// Reinterprets a flat item as `shape` (used between a dense layer and
    /// convolutions in decoders).
    Reshape { shape: Vec<usize> },
    /// Appends the condition vector (width entries) to a flat item.
    ConcatCondition { width: usize },
}

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Sigmoid => "sigmoid",
            Layer::Softmax => "softmax",
            Layer::Flatten => "flatten",
            Layer::Upsample2x => "upsample2x",
            Layer::Reshape { .. } => "reshape",
            Layer::ConcatCondition { .. } => "concat_condition",
        }
    }

    fn label(&self, index: usize) -> String {
        match self {
            Layer::Dense { name, .. } | Layer::Conv2d { name, .. } => name.clone(),
            other => format!("#{index} {}", other.kind()),
        }
    }

    /// Names and shapes of this layer's parameters.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            Layer::Dense {
                name,
                inputs,
                outputs,
                bias,
            } => {
                let mut v = vec![(format!("{name}.weight"), vec![*outputs, *inputs])];
                if *bias {
                    v.push((format!("{name}.bias"), vec![*outputs]));
                }
                v
            }
            Layer::Conv2d {
                name,
                in_channels,
                out_channels,
                kernel,
                bias,
                ..
            } => {
                let mut v = vec![(
                    format!("{name}.weight"),
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                )];
                if *bias {
                    v.push((format!("{name}.bias"), vec![*out_channels]));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    fn fans(&self) -> (usize, usize) {
        match self {
            Layer::Dense {
                inputs, outputs, ..
            } => (*inputs, *outputs),
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => (in_channels * kernel * kernel, out_channels * kernel * kernel),
            _ => (0, 0),
        }
    }

    fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let err = |msg: String| Err(Error::shape(self.label(index), msg));
        match self {
            Layer::Dense {
                inputs, outputs, ..
            } => {
                if input != [*inputs] {
                    return err(format!("expects flat input of {inputs}, got {input:?}"));
                }
                Ok(vec![*outputs])
            }
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return err(format!(
                        "expects [{in_channels}, H, W] input, got {input:?}"
                    ));
                }
                if *stride == 0 || *kernel == 0 {
                    return err("kernel and stride must be positive".into());
                }
                if input[1] + 2 * padding < *kernel || input[2] + 2 * padding < *kernel {
                    return err(format!("kernel {kernel} larger than padded input {input:?}"));
                }
                let g = ConvGeometry {
                    in_channels: *in_channels,
                    out_channels: *out_channels,
                    height: input[1],
                    width: input[2],
                    kernel: *kernel,
                    stride: *stride,
                    padding: *padding,
                };
                Ok(vec![*out_channels, g.out_height(), g.out_width()])
            }
            Layer::Relu | Layer::Sigmoid => Ok(input.to_vec()),
            Layer::Softmax => {
                if input.len() != 1 {
                    return err(format!("softmax expects flat input, got {input:?}"));
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Upsample2x => {
                if input.len() != 3 {
                    return err(format!("expects [C, H, W] input, got {input:?}"));
                }
                Ok(vec![input[0], input[1] * 2, input[2] * 2])
            }
            Layer::Reshape { shape } => {
                let n: usize = input.iter().product();
                if shape.iter().product::<usize>() != n {
                    return err(format!("cannot reshape {input:?} into {shape:?}"));
                }
                Ok(shape.clone())
            }
            Layer::ConcatCondition { width } => {
                if input.len() != 1 {
                    return err(format!("expects flat input, got {input:?}"));
                }
                Ok(vec![input[0] + width])
            }
        }
    }

    fn conv_geometry(&self, input: &[usize]) -> Option<ConvGeometry> {
        match self {
            Layer::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => Some(ConvGeometry {
                in_channels: *in_channels,
                out_channels: *out_channels,
                height: input[1],
                width: input[2],
                kernel: *kernel,
                stride: *stride,
                padding: *padding,
            }),
            _ => None,
        }
    }
}

/// Ordered layer list plus the per-item input shape.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl NetworkSpec {
    pub fn new(input_shape: Vec<usize>) -> Self {
        Self {
            input_shape,
            layers: Vec::new(),
        }
    }

    pub fn dense(mut self, name: &str, inputs: usize, outputs: usize, bias: bool) -> Self {
        self.layers.push(Layer::Dense {
            name: name.to_string(),
            inputs,
            outputs,
            bias,
        });
        self
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        mut self,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        self.layers.push(Layer::Conv2d {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        });
        self
    }

    pub fn layer(mut self, layer: Layer) -> Self {
        self.layers.push(layer);
        self
    }

    pub fn relu(self) -> Self {
        self.layer(Layer::Relu)
    }

    pub fn sigmoid(self) -> Self {
        self.layer(Layer::Sigmoid)
    }

    pub fn softmax(self) -> Self {
        self.layer(Layer::Softmax)
    }

    pub fn flatten(self) -> Self {
        self.layer(Layer::Flatten)
    }

    pub fn upsample2x(self) -> Self {
        self.layer(Layer::Upsample2x)
    }

    pub fn reshape(self, shape: Vec<usize>) -> Self {
        self.layer(Layer::Reshape { shape })
    }

    pub fn concat_condition(self, width: usize) -> Self {
        self.layer(Layer::ConcatCondition { width })
    }

    /// Per-item shapes: index 0 is the input, index i+1 the output of layer i.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape(i, shapes.last().expect("non-empty"))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().expect("non-empty"))
    }

    pub fn condition_width(&self) -> Option<usize> {
        self.layers.iter().find_map(|l| match l {
            Layer::ConcatCondition { width } => Some(*width),
            _ => None,
        })
    }

    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.layers.iter().flat_map(Layer::parameter_shapes).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Seeded Glorot-uniform weights, zero biases.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParameterSet<T>> {
        self.shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterSet::new();
        for layer in &self.layers {
            let (fan_in, fan_out) = layer.fans();
            let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            for (name, shape) in layer.parameter_shapes() {
                let n: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    vec![T::zero(); n]
                } else {
                    (0..n)
                        .map(|_| T::lit(rng.random_range(-bound..bound)))
                        .collect()
                };
                params.insert(name, Tensor::new(shape, data)?)?;
            }
        }
        Ok(params)
    }

    /// Checks that `params` holds exactly the declared tensors.
    pub fn check_params<T: Scalar>(&self, params: &ParameterSet<T>) -> Result<()> {
        let expected = self.parameter_shapes();
        for (name, shape) in &expected {
            let t = params.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    name.clone(),
                    format!("parameter shape {:?}, expected {:?}", t.shape(), shape),
                ));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::invalid(format!(
                "parameter set holds {} tensors, spec declares {}",
                params.len(),
                expected.len()
            )));
        }
        Ok(())
    }

    fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }
}

/// Activations retained by [`forward`] for a later [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace<T = f32> {
    /// `inputs[i]` is the batch fed into layer `i`.
    inputs: Vec<Tensor<T>>,
    output: Tensor<T>,
    condition: Option<Tensor<T>>,
    fingerprint: u64,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn output(&self) -> &Tensor<T> {
        &self.output
    }

    pub fn into_output(self) -> Tensor<T> {
        self.output
    }

    pub fn condition(&self) -> Option<&Tensor<T>> {
        self.condition.as_ref()
    }

    pub fn layer_input(&self, index: usize) -> Option<&Tensor<T>> {
        self.inputs.get(index)
    }

    fn layer_output(&self, index: usize) -> &Tensor<T> {
        self.inputs.get(index + 1).unwrap_or(&self.output)
    }

    /// Hash of every relu's on/off pattern. Equal signatures at two parameter
    /// points mean the network is the same smooth map at both.
    pub fn kink_signature(&self, spec: &NetworkSpec) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            if matches!(layer, Layer::Relu) {
                hash_signs(&mut h, self.inputs[i].data());
            }
        }
        h.finish()
    }
}

pub(crate) fn hash_signs<T: Scalar>(h: &mut DefaultHasher, values: &[T]) {
    for chunk in values.chunks(64) {
        let mut word = 0u64;
        for (b, v) in chunk.iter().enumerate() {
            if *v > T::zero() {
                word |= 1 << b;
            }
        }
        word.hash(h);
    }
}

/// Parameter gradients plus gradients for the network inputs.
#[derive(Debug, Clone)]
pub struct Gradients<T = f32> {
    pub params: ParameterSet<T>,
    pub input: Option<Tensor<T>>,
    pub condition: Option<Tensor<T>>,
}

#[derive(Debug, Clone, Copy)]
pub struct BackwardOptions {
    pub param_grads: bool,
    pub input_grad: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        Self {
            param_grads: true,
            input_grad: true,
        }
    }
}

fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Runs `input` (`[N, ...input_shape]`) through the network.
pub fn forward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    input: &Tensor<T>,
    condition: Option<&Tensor<T>>,
) -> Result<ForwardTrace<T>> {
    let shapes = spec.shapes()?;
    let n = input.batch();
    if input.shape().len() != spec.input_shape.len() + 1 || input.shape()[1..] != spec.input_shape[..]
    {
        return Err(Error::shape(
            "input",
            format!(
                "expected [N, {:?}], got {:?}",
                spec.input_shape,
                input.shape()
            ),
        ));
    }
    match (spec.condition_width(), condition) {
        (Some(w), Some(c)) => {
            if c.shape() != [n, w] {
                return Err(Error::shape(
                    "condition",
                    format!("expected [{n}, {w}], got {:?}", c.shape()),
                ));
            }
        }
        (Some(_), None) => return Err(Error::shape("condition", "condition tensor required")),
        (None, Some(_)) => {
            return Err(Error::shape(
                "condition",
                "network has no concat_condition layer",
            ))
        }
        (None, None) => {}
    }

    let mut inputs = Vec::with_capacity(spec.layers.len());
    let mut current = input.clone();
    for (i, layer) in spec.layers.iter().enumerate() {
        let out_shape = {
            let mut s = vec![n];
            s.extend_from_slice(&shapes[i + 1]);
            s
        };
        let next = match layer {
            Layer::Dense {
                name,
                inputs: fin,
                outputs,
                bias,
            } => {
                let w = params.require(&format!("{name}.weight"))?;
                let mut out = Tensor::zeros(out_shape);
                if *bias {
                    let b = params.require(&format!("{name}.bias"))?;
                    for row in out.data_mut().chunks_mut(*outputs) {
                        row.copy_from_slice(b.data());
                    }
                }
                T::gemm(
                    n,
                    *fin,
                    *outputs,
                    current.data(),
                    (*fin as isize, 1),
                    w.data(),
                    (1, *fin as isize),
                    T::one(),
                    out.data_mut(),
                    (*outputs as isize, 1),
                );
                out
            }
            Layer::Conv2d { name, bias, .. } => {
                let g = layer.conv_geometry(&shapes[i]).expect("conv");
                let w = params.require(&format!("{name}.weight"))?;
                let b = if *bias {
                    Some(params.require(&format!("{name}.bias"))?.data())
                } else {
                    None
                };
                let mut out = Tensor::zeros(out_shape);
                let mut cols = vec![T::zero(); g.patch_len() * g.out_pixels()];
                let out_len = out.item_len();
                for s in 0..n {
                    g.im2col(current.item(s), &mut cols);
                    let dst = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
                    g.forward_item(w.data(), b, &cols, dst);
                }
                out
            }
            Layer::Relu => current.map(|v| if v > T::zero() { v } else { T::zero() }),
            Layer::Sigmoid => current.map(stable_sigmoid),
            Layer::Softmax => {
                let width = current.item_len();
                let mut out = current.clone();
                for row in out.data_mut().chunks_mut(width) {
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        sum += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= sum;
                    }
                }
                out
            }
            Layer::Flatten | Layer::Reshape { .. } => current.clone().reshape(out_shape)?,
            Layer::Upsample2x => {
                let (c, h, w) = (shapes[i][0], shapes[i][1], shapes[i][2]);
                let mut out = Tensor::zeros(out_shape);
                let src = current.data();
                let dst = out.data_mut();
                for plane in 0..n * c {
                    let sp = &src[plane * h * w..(plane + 1) * h * w];
                    let dp = &mut dst[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dp[y * 2 * w + x] = sp[(y / 2) * w + x / 2];
                        }
                    }
                }
                out
            }
            Layer::ConcatCondition { width } => {
                let cond = condition.expect("checked above");
                let f = current.item_len();
                let mut data = Vec::with_capacity(n * (f + width));
                for s in 0..n {
                    data.extend_from_slice(current.item(s));
                    data.extend_from_slice(cond.item(s));
                }
                Tensor::new(out_shape, data)?
            }
        };
        inputs.push(std::mem::replace(&mut current, next));
    }
    Ok(ForwardTrace {
        inputs,
        output: current,
        condition: condition.cloned(),
        fingerprint: spec.fingerprint(),
    })
}

/// Reverse-mode pass with every gradient requested.
pub fn backward<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    trace: &ForwardTrace<T>,
    output_grad: &Tensor<T>,
) -> Result<Gradients<T>> {
    backward_with(spec, params, trace, output_grad, BackwardOptions::default())
}

pub fn backward_with<T: Scalar>(
    spec: &NetworkSpec,
    params: &ParameterSet<T>,
    trace: &ForwardTrace<T>,
    output_grad: &Tensor<T>,
    opts: BackwardOptions,
) -> Result<Gradients<T>> {
    if trace.fingerprint != spec.fingerprint() || trace.inputs.len() != spec.layers.len() {
        return Err(Error::invalid(
            "forward trace does not belong to this network spec",
        ));
    }
    if output_grad.shape() != trace.output.shape() {
        return Err(Error::shape(
            "output",
            format!(
                "output gradient {:?} does not match output {:?}",
                output_grad.shape(),
                trace.output.shape()
            ),
        ));
    }
    let shapes = spec.shapes()?;
    let n = trace.output.batch();
    let mut grads = ParameterSet::new();
    let mut condition_grad = None;
    let mut g = output_grad.clone();

    // index of the first layer that needs an input gradient computed
    let first_needed = if opts.input_grad {
        0
    } else {
        spec.layers
            .iter()
            .position(|l| !l.parameter_shapes().is_empty())
            .unwrap_or(spec.layers.len())
    };

    for (i, layer) in spec.layers.iter().enumerate().rev() {
        let x = &trace.inputs[i];
        let need_input = i > first_needed || (i == first_needed && opts.input_grad);
        let mut in_shape = vec![n];
        in_shape.extend_from_slice(&shapes[i]);
        g = match layer {
            Layer::Dense {
                name,
                inputs: fin,
                outputs,
                bias,
            } => {
                let w = params.require(&format!("{name}.weight"))?;
                if opts.param_grads {
                    let mut dw = Tensor::zeros(vec![*outputs, *fin]);
                    T::gemm(
                        *outputs,
                        n,
                        *fin,
                        g.data(),
                        (1, *outputs as isize),
                        x.data(),
                        (*fin as isize, 1),
                        T::zero(),
                        dw.data_mut(),
                        (*fin as isize, 1),
                    );
                    grads.insert(format!("{name}.weight"), dw)?;
                    if *bias {
                        let mut db = Tensor::zeros(vec![*outputs]);
                        for row in g.data().chunks(*outputs) {
                            for (d, &v) in db.data_mut().iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        grads.insert(format!("{name}.bias"), db)?;
                    }
                }
                if need_input {
                    let mut dx = Tensor::zeros(in_shape);
                    T::gemm(
                        n,
                        *outputs,
                        *fin,
                        g.data(),
                        (*outputs as isize, 1),
                        w.data(),
                        (*fin as isize, 1),
                        T::zero(),
                        dx.data_mut(),
                        (*fin as isize, 1),
                    );
                    dx
                } else {
                    Tensor::zeros(vec![0])
                }
            }
            Layer::Conv2d {
                name,
                out_channels,
                bias,
                ..
            } => {
                let geo = layer.conv_geometry(&shapes[i]).expect("conv");
                let w = params.require(&format!("{name}.weight"))?;
                let out_len = g.item_len();
                let mut cols = vec![T::zero(); geo.patch_len() * geo.out_pixels()];
                let mut dw = Tensor::zeros(w.shape().to_vec());
                let mut db = Tensor::zeros(vec![*out_channels]);
                let mut dx = if need_input {
                    Tensor::zeros(in_shape)
                } else {
                    Tensor::zeros(vec![0])
                };
                let in_len = x.item_len();
                for s in 0..n {
                    let gs = &g.data()[s * out_len..(s + 1) * out_len];
                    if opts.param_grads {
                        geo.im2col(x.item(s), &mut cols);
                        geo.weight_grad_item(gs, &cols, dw.data_mut());
                        if *bias {
                            for (o, row) in gs.chunks(geo.out_pixels()).enumerate() {
                                db.data_mut()[o] += row.iter().copied().sum::<T>();
                            }
                        }
                    }
                    if need_input {
                        geo.col_grad_item(w.data(), gs, &mut cols);
                        geo.col2im(&cols, &mut dx.data_mut()[s * in_len..(s + 1) * in_len]);
                    }
                }
                if opts.param_grads {
                    grads.insert(format!("{name}.weight"), dw)?;
                    if *bias {
                        grads.insert(format!("{name}.bias"), db)?;
                    }
                }
                dx
            }
            Layer::Relu => {
                let mut dx = g;
                for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                }
                dx
            }
            Layer::Sigmoid => {
                let y = trace.layer_output(i);
                let mut dx = g;
                for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= s * (T::one() - s);
                }
                dx
            }
            Layer::Softmax => {
                let y = trace.layer_output(i);
                let width = y.item_len();
                let mut dx = g;
                for (drow, yrow) in dx.data_mut().chunks_mut(width).zip(y.data().chunks(width)) {
                    let dot: T = drow.iter().zip(yrow).map(|(&d, &p)| d * p).sum();
                    for (d, &p) in drow.iter_mut().zip(yrow) {
                        *d = p * (*d - dot);
                    }
                }
                dx
            }
            Layer::Flatten | Layer::Reshape { .. } => g.reshape(in_shape)?,
            Layer::Upsample2x => {
                let (c, h, w) = (shapes[i][0], shapes[i][1], shapes[i][2]);
                let mut dx = Tensor::zeros(in_shape);
                let src = g.data();
                let dst = dx.data_mut();
                for plane in 0..n * c {
                    let sp = &src[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                    let dp = &mut dst[plane * h * w..(plane + 1) * h * w];
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dp[(y / 2) * w + xx / 2] += sp[y * 2 * w + xx];
                        }
                    }
                }
                dx
            }
            Layer::ConcatCondition { width } => {
                let f = shapes[i][0];
                let mut dx = Vec::with_capacity(n * f);
                let mut dc = Vec::with_capacity(n * width);
                for s in 0..n {
                    let row = g.item(s);
                    dx.extend_from_slice(&row[..f]);
                    dc.extend_from_slice(&row[f..]);
                }
                condition_grad = Some(Tensor::new(vec![n, *width], dc)?);
                Tensor::new(in_shape, dx)?
            }
        };
        if !need_input && i <= first_needed {
            break;
        }
    }
    Ok(Gradients {
        params: grads,
        input: if opts.input_grad { Some(g) } else { None },
        condition: condition_grad,
    })
}

/// A spec together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T = f32> {
    pub spec: NetworkSpec,
    pub params: ParameterSet<T>,
}

impl<T: Scalar> Network<T> {
    pub fn new(spec: NetworkSpec, params: ParameterSet<T>) -> Result<Self> {
        spec.check_params(&params)?;
        Ok(Self { spec, params })
    }

    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let params = spec.init_params(seed)?;
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: &Tensor<T>, condition: Option<&Tensor<T>>) -> Result<ForwardTrace<T>> {
        forward(&self.spec, &self.params, input, condition)
    }

    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        output_grad: &Tensor<T>,
        opts: BackwardOptions,
    ) -> Result<Gradients<T>> {
        backward_with(&self.spec, &self.params, trace, output_grad, opts)
    }

    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            params: self.params.cast(),
        }
    }
}
