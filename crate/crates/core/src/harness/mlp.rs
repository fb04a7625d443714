//! Dense MLP with hand-written backpropagation, generic over the float type
//! so gradients can be checked in f64 while training runs in f32.

use std::fmt;
use std::str::FromStr;

use num_traits::Float;

use crate::error::{DstError, Result};
use crate::param_store::{ParamLayout, ParamSource, ParamVector};
use crate::rng::Xoshiro256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    /// No nonlinearity; mostly useful in tests.
    Linear,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }

    #[inline]
    fn apply<T: Float>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(T::zero()),
            Activation::Linear => z,
        }
    }

    /// Derivative given the pre-activation `z` and the output `a`.
    #[inline]
    fn derivative<T: Float>(self, z: T, a: T) -> T {
        match self {
            Activation::Tanh => T::one() - a * a,
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Linear => T::one(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Activation {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "linear" => Ok(Activation::Linear),
            _ => Err(DstError::Config(format!("unknown activation '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Mean over batch and outputs of the squared error.
    Mse,
    /// Softmax cross-entropy against target distributions, mean over batch.
    CrossEntropy,
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Loss::Mse => "mse",
            Loss::CrossEntropy => "cross_entropy",
        }
    }
}

impl FromStr for Loss {
    type Err = DstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Loss::Mse),
            "cross_entropy" => Ok(Loss::CrossEntropy),
            _ => Err(DstError::Config(format!("unknown loss '{s}'"))),
        }
    }
}

/// Offsets of one dense layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSlot {
    fan_in: usize,
    fan_out: usize,
    weight: usize,
    bias: usize,
}

/// Layer widths `[input, hidden..., output]`. Layer `l` owns the groups
/// `weight@l` (row-major `[out, in]`) and `bias@l`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activation: Activation,
    init_seed: u64,
    slots: Vec<LayerSlot>,
}

/// Per-layer inputs and pre-activations from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch: usize,
    /// `inputs[l]` feeds layer `l`; the last entry is the network output.
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
}

impl<T: Float> ForwardCache<T> {
    pub fn output(&self) -> &[T] {
        self.inputs.last().expect("cache always holds the input")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, init_seed: u64) -> Result<Self> {
        if widths.len() < 2 {
            return Err(DstError::Shape(format!(
                "an MLP needs at least input and output widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(DstError::Shape(format!("zero width in {widths:?}")));
        }
        let mut slots = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weight = offset;
            let bias = weight + fan_in * fan_out;
            offset = bias + fan_out;
            slots.push(LayerSlot {
                fan_in,
                fan_out,
                weight,
                bias,
            });
        }
        Ok(Self {
            widths,
            activation,
            init_seed,
            slots,
        })
    }

    /// Recover the widths from a `weight@l` / `bias@l` layout.
    pub fn from_layout(layout: &ParamLayout, activation: Activation, init_seed: u64) -> Result<Self> {
        let mut widths = Vec::new();
        let layers = layout.entries().len() / 2;
        for l in 0..layers {
            let w = layout.group(&format!("weight@{l}"));
            let b = layout.group(&format!("bias@{l}"));
            let (Some(w), Some(b)) = (w, b) else {
                return Err(DstError::Shape(format!("layout lacks layer {l} groups")));
            };
            if b.length == 0 || w.length % b.length != 0 {
                return Err(DstError::Shape(format!("inconsistent shapes at layer {l}")));
            }
            if l == 0 {
                widths.push(w.length / b.length);
            }
            widths.push(b.length);
        }
        let spec = Self::new(widths, activation, init_seed)?;
        if spec.layout() != *layout {
            return Err(DstError::Shape("layout is not an MLP layout".into()));
        }
        Ok(spec)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn param_count(&self) -> usize {
        self.slots.last().map_or(0, |s| s.bias + s.fan_out)
    }

    pub fn layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::new();
        for (l, s) in self.slots.iter().enumerate() {
            let l32 = l as u32;
            layout
                .push(format!("weight@{l}"), "weight", l32, s.fan_in * s.fan_out)
                .expect("unique names");
            layout
                .push(format!("bias@{l}"), "bias", l32, s.fan_out)
                .expect("unique names");
        }
        layout
    }

    /// Weights `N(0, 1/fan_in)`, biases `N(0, 0.01²)`.
    pub fn init(&self) -> ParamVector {
        let mut rng = Xoshiro256::seed_from_u64(self.init_seed);
        let mut values = vec![0.0f32; self.param_count()];
        for s in &self.slots {
            let scale = 1.0 / (s.fan_in as f64).sqrt();
            for v in &mut values[s.weight..s.bias] {
                *v = (rng.normal() * scale) as f32;
            }
            for v in &mut values[s.bias..s.bias + s.fan_out] {
                *v = (rng.normal() * 0.01) as f32;
            }
        }
        ParamVector::new(self.layout(), values).expect("layout matches")
    }

    fn check_params<T, P: ParamSource<T> + ?Sized>(&self, params: &P) -> Result<()> {
        if params.param_count() != self.param_count() {
            return Err(DstError::Shape(format!(
                "model has {} parameters, spec needs {}",
                params.param_count(),
                self.param_count()
            )));
        }
        Ok(())
    }

    pub fn forward<T: Float, P: ParamSource<T> + ?Sized>(
        &self,
        params: &P,
        inputs: &[T],
    ) -> Result<ForwardCache<T>> {
        self.check_params(params)?;
        let d = self.input_dim();
        if !inputs.len().is_multiple_of(d) {
            return Err(DstError::Shape(format!(
                "input length {} is not a multiple of input width {d}",
                inputs.len()
            )));
        }
        let batch = inputs.len() / d;
        let mut cache = ForwardCache {
            batch,
            inputs: vec![inputs.to_vec()],
            pre: Vec::with_capacity(self.slots.len()),
        };
        let last = self.slots.len() - 1;
        for (l, s) in self.slots.iter().enumerate() {
            let x = &cache.inputs[l];
            let mut z = vec![T::zero(); batch * s.fan_out];
            for b in 0..batch {
                let row = &x[b * s.fan_in..(b + 1) * s.fan_in];
                for o in 0..s.fan_out {
                    let w0 = s.weight + o * s.fan_in;
                    let mut acc = params.param(s.bias + o);
                    for (i, &xi) in row.iter().enumerate() {
                        acc = acc + params.param(w0 + i) * xi;
                    }
                    z[b * s.fan_out + o] = acc;
                }
            }
            let a = if l == last {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            cache.pre.push(z);
            cache.inputs.push(a);
        }
        Ok(cache)
    }

    /// Mean loss of `outputs` against `targets` and its gradient w.r.t. the outputs.
    pub fn loss_grad<T: Float>(
        &self,
        outputs: &[T],
        targets: &[T],
        loss: Loss,
    ) -> Result<(T, Vec<T>)> {
        let k = self.output_dim();
        if outputs.len() != targets.len() || !outputs.len().is_multiple_of(k) {
            return Err(DstError::Shape(format!(
                "{} outputs vs {} targets (width {k})",
                outputs.len(),
                targets.len()
            )));
        }
        let batch = outputs.len() / k;
        if batch == 0 {
            return Err(DstError::Shape("empty batch".into()));
        }
        let bt = T::from(batch).expect("batch fits float");
        match loss {
            Loss::Mse => {
                let denom = bt * T::from(k).expect("width fits float");
                let two = T::one() + T::one();
                let mut total = T::zero();
                let grad = outputs
                    .iter()
                    .zip(targets)
                    .map(|(&y, &t)| {
                        let e = y - t;
                        total = total + e * e;
                        two * e / denom
                    })
                    .collect();
                Ok((total / denom, grad))
            }
            Loss::CrossEntropy => {
                if k < 2 {
                    return Err(DstError::InvalidArgument(
                        "cross-entropy needs at least two outputs".into(),
                    ));
                }
                let mut total = T::zero();
                let mut grad = vec![T::zero(); outputs.len()];
                for b in 0..batch {
                    let y = &outputs[b * k..(b + 1) * k];
                    let t = &targets[b * k..(b + 1) * k];
                    let max = y.iter().copied().fold(T::neg_infinity(), T::max);
                    let sum: T = y.iter().fold(T::zero(), |acc, &v| acc + (v - max).exp());
                    let log_sum = sum.ln() + max;
                    for o in 0..k {
                        let log_p = y[o] - log_sum;
                        total = total - t[o] * log_p;
                        grad[b * k + o] = (log_p.exp() - t[o]) / bt;
                    }
                }
                Ok((total / bt, grad))
            }
        }
    }

    /// Gradient of the mean loss w.r.t. every parameter, in layout order.
    pub fn backward<T: Float, P: ParamSource<T> + ?Sized>(
        &self,
        params: &P,
        cache: &ForwardCache<T>,
        targets: &[T],
        loss: Loss,
    ) -> Result<(T, Vec<T>)> {
        self.check_params(params)?;
        let (value, mut upstream) = self.loss_grad(cache.output(), targets, loss)?;
        let batch = cache.batch;
        let mut grads = vec![T::zero(); self.param_count()];
        let last = self.slots.len() - 1;
        for (l, s) in self.slots.iter().enumerate().rev() {
            // upstream: dL/da for this layer's output; turn it into dL/dz
            if l != last {
                let z = &cache.pre[l];
                let a = &cache.inputs[l + 1];
                for ((g, &zv), &av) in upstream.iter_mut().zip(z).zip(a) {
                    *g = *g * self.activation.derivative(zv, av);
                }
            }
            let x = &cache.inputs[l];
            let mut down = vec![T::zero(); batch * s.fan_in];
            for b in 0..batch {
                let row = &x[b * s.fan_in..(b + 1) * s.fan_in];
                let drow = &mut down[b * s.fan_in..(b + 1) * s.fan_in];
                for o in 0..s.fan_out {
                    let dz = upstream[b * s.fan_out + o];
                    if dz == T::zero() {
                        continue;
                    }
                    let w0 = s.weight + o * s.fan_in;
                    grads[s.bias + o] = grads[s.bias + o] + dz;
                    for i in 0..s.fan_in {
                        grads[w0 + i] = grads[w0 + i] + dz * row[i];
                        drow[i] = drow[i] + params.param(w0 + i) * dz;
                    }
                }
            }
            upstream = down;
        }
        Ok((value, grads))
    }

    pub fn loss_and_grad<T: Float, P: ParamSource<T> + ?Sized>(
        &self,
        params: &P,
        inputs: &[T],
        targets: &[T],
        loss: Loss,
    ) -> Result<(T, Vec<T>)> {
        let cache = self.forward(params, inputs)?;
        self.backward(params, &cache, targets, loss)
    }

    pub fn loss<T: Float, P: ParamSource<T> + ?Sized>(
        &self,
        params: &P,
        inputs: &[T],
        targets: &[T],
        loss: Loss,
    ) -> Result<T> {
        let cache = self.forward(params, inputs)?;
        Ok(self.loss_grad(cache.output(), targets, loss)?.0)
    }
}
