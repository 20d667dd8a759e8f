use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::layers::{LayerCache, LayerSpec};
use crate::numerics::{ParamVector, Tensor};

/// Parameter-name prefix for layer `index`, e.g. `03`.
pub fn layer_key(index: usize, name: &str) -> String {
    format!("{index:02}.{name}")
}

/// Activation record of one forward pass. Consumed by [`Network::backward`].
#[derive(Debug)]
pub struct Tape {
    stamp: (u64, u64),
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    caches: Vec<LayerCache>,
}

/// A validated sequential stack of layers with a fixed per-sample input
/// shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
}

impl Network {
    pub fn new(layers: Vec<LayerSpec>, input_shape: &[usize]) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            let name = format!("layer {i} ({})", layer.kind());
            layer.validate().map_err(|e| match e {
                Error::Config { message, .. } => Error::config(&name, message),
                other => other,
            })?;
            if matches!(layer, LayerSpec::SoftmaxCrossEntropy { .. }) && i + 1 != layers.len() {
                return Err(Error::config(name, "softmax_cross_entropy must be the last layer"));
            }
            shape = layer.output_shape(&shape).map_err(|e| match e {
                Error::Config { message, .. } => Error::config(&name, message),
                other => other,
            })?;
        }
        Ok(Network {
            layers,
            input_shape: input_shape.to_vec(),
            output_shape: shape,
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Per-sample output shape (logits when the stack ends in a loss).
    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    /// Class count of a terminal softmax_cross_entropy, if present.
    pub fn loss_classes(&self) -> Option<usize> {
        match self.layers.last() {
            Some(LayerSpec::SoftmaxCrossEntropy { classes }) => Some(*classes),
            _ => None,
        }
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<_> = self
            .layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.param_shapes()
                    .into_iter()
                    .map(move |(n, s)| (layer_key(i, n), s))
            })
            .collect();
        out.sort();
        out
    }

    /// Fan-in scaled uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and biases; group-norm scale 1 and shift 0.
    pub fn init_params(&self, rng: &mut impl Rng) -> ParamVector {
        let mut params = ParamVector::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let bound = match layer.fan_in() {
                0 => 0.0,
                f => 1.0 / (f as f64).sqrt(),
            };
            for (name, shape) in layer.param_shapes() {
                let t = match name {
                    "gamma" => Tensor::full(&shape, 1.0),
                    "beta" => Tensor::zeros(&shape),
                    _ => Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound)),
                };
                params.insert(layer_key(i, name), t);
            }
        }
        params
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        let expected = self.param_shapes();
        if params.tensor_count() != expected.len() {
            return Err(Error::config(
                "network",
                format!(
                    "expected {} parameter tensors, got {}",
                    expected.len(),
                    params.tensor_count()
                ),
            ));
        }
        for (name, shape) in expected {
            match params.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::config(
                        name,
                        format!("parameter shape {:?}, expected {shape:?}", t.shape()),
                    ))
                }
                None => return Err(Error::config(name, "missing parameter")),
            }
        }
        Ok(())
    }

    fn layer_params<'a>(&self, params: &'a ParamVector, i: usize) -> Vec<&'a Tensor> {
        self.layers[i]
            .param_shapes()
            .iter()
            .map(|(n, _)| params.get(&layer_key(i, n)).expect("checked layout"))
            .collect()
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        if input.shape().len() != self.input_shape.len() + 1
            || input.shape()[1..] != self.input_shape[..]
        {
            let first = self.layers.first().map(|l| l.kind()).unwrap_or("network");
            return Err(Error::config(
                format!("layer 0 ({first})"),
                format!(
                    "input shape {:?} does not match [N, {:?}]",
                    input.shape(),
                    self.input_shape
                ),
            ));
        }
        Ok(())
    }

    /// Forward pass over a batch `[N, ...input_shape]` recording a tape.
    pub fn forward(&self, params: &ParamVector, input: &Tensor) -> Result<(Tensor, Tape)> {
        self.check_params(params)?;
        self.check_input(input)?;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (y, cache) = layer.forward(&self.layer_params(params, i), &x, true)?;
            caches.push(cache);
            x = y;
        }
        let tape = Tape {
            stamp: params.stamp(),
            input_shape: input.shape().to_vec(),
            output_shape: x.shape().to_vec(),
            caches,
        };
        Ok((x, tape))
    }

    /// Forward pass without recording.
    pub fn infer(&self, params: &ParamVector, input: &Tensor) -> Result<Tensor> {
        self.check_params(params)?;
        self.check_input(input)?;
        let mut x = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(&self.layer_params(params, i), &x, false)?.0;
        }
        Ok(x)
    }

    /// Reverse-mode gradients of `<output, upstream>` with respect to the
    /// parameters and the input.
    pub fn backward(
        &self,
        params: &ParamVector,
        tape: Tape,
        upstream: &Tensor,
    ) -> Result<(ParamVector, Tensor)> {
        if tape.stamp != params.stamp() {
            return Err(Error::StaleTape);
        }
        if upstream.shape() != tape.output_shape.as_slice() {
            return Err(Error::Input(format!(
                "upstream shape {:?} does not match output {:?}",
                upstream.shape(),
                tape.output_shape
            )));
        }
        let mut grads = ParamVector::new();
        let mut g = upstream.clone();
        for (i, cache) in tape.caches.into_iter().enumerate().rev() {
            let layer = &self.layers[i];
            let lg = layer.backward(&self.layer_params(params, i), cache, &g)?;
            for ((name, _), t) in layer.param_shapes().into_iter().zip(lg.params) {
                grads.insert(layer_key(i, name), t);
            }
            g = lg.input;
        }
        Ok((grads, g))
    }
}

/// Free-function form: builds the network from `layers` and runs a recorded
/// forward pass.
pub fn model_forward(
    layers: &[LayerSpec],
    params: &ParamVector,
    input: &Tensor,
) -> Result<(Tensor, Tape)> {
    let shape = input
        .shape()
        .get(1..)
        .ok_or_else(|| Error::Input("input needs a batch axis".into()))?;
    Network::new(layers.to_vec(), shape)?.forward(params, input)
}

pub fn model_backward(
    layers: &[LayerSpec],
    params: &ParamVector,
    tape: Tape,
    upstream: &Tensor,
) -> Result<(ParamVector, Tensor)> {
    let net = Network::new(layers.to_vec(), &tape.input_shape[1..])?;
    net.backward(params, tape, upstream)
}
