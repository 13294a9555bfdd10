use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::matrix::Matrix;
use crate::error::{check_len, Error, Result};

/// Activation applied after the last layer. Hidden layers always use tanh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Tanh,
    Identity,
}

/// One affine layer, `y = W x + b` with `W` shaped `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    #[inline]
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    #[inline]
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn zero(&mut self) {
        self.weight.fill(0.0);
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }
}

/// Parameters of a fully connected network with tanh hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    layers: Vec<Layer>,
    output: Activation,
    frozen: bool,
}

/// Per-layer inputs and post-activation outputs recorded by
/// [`MlpParams::forward`], consumed by [`MlpParams::backward`].
#[derive(Debug, Clone, Default)]
pub struct ActivationCache {
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl ActivationCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
        self.outputs.clear();
    }

    /// Final network output of the recorded pass.
    pub fn output(&self) -> Option<&[f64]> {
        self.outputs.last().map(Vec::as_slice)
    }
}

/// Gradient buffers shaped like an [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    layers: Vec<Layer>,
    count: usize,
}

impl Grads {
    pub fn for_params(params: &MlpParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer::zeros(l.in_dim(), l.out_dim()))
                .collect(),
            count: 0,
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Number of backward passes accumulated since the last reset.
    pub fn count(&self) -> usize {
        self.count
    }

    pub fn zero(&mut self) {
        self.layers.iter_mut().for_each(Layer::zero);
        self.count = 0;
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weight.as_slice().iter().all(|g| *g == 0.0) && l.bias.iter().all(|g| *g == 0.0)
        })
    }

    /// Flattened view in the same order as [`MlpParams::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weight.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}

impl MlpParams {
    /// Builds a network from explicit layers, checking that adjacent layers
    /// agree on their shared dimension.
    pub fn from_layers(layers: Vec<Layer>, output: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("mlp layers"));
        }
        for l in &layers {
            check_len("layer bias", l.out_dim(), l.bias.len())?;
        }
        for pair in layers.windows(2) {
            check_len("adjacent layer width", pair[0].out_dim(), pair[1].in_dim())?;
        }
        Ok(Self {
            layers,
            output,
            frozen: false,
        })
    }

    /// Xavier-uniform weights and zero biases for widths `dims[0] → … → dims[last]`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], output: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config("an mlp needs at least an input and an output width".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Config("mlp widths must be positive".into()));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
                let mut layer = Layer::zeros(fan_in, fan_out);
                for v in layer.weight.as_mut_slice() {
                    *v = rng.random_range(-limit..limit);
                }
                layer
            })
            .collect();
        Self::from_layers(layers, output)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    /// Zeroes the last layer so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        if let Some(last) = self.layers.last_mut() {
            last.zero();
        }
    }

    /// All weights and biases, layer by layer, weight before bias.
    pub fn flat_params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    /// Mutable access to one scalar in [`flat_params`](Self::flat_params) order.
    /// Intended for finite-difference checks; ignores the frozen flag.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            let wn = l.weight.as_slice().len();
            if index < wn {
                return &mut l.weight.as_mut_slice()[index];
            }
            index -= wn;
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// CRC-64 over the bit patterns of every parameter.
    pub fn fingerprint(&self) -> u64 {
        let crc = crc::Crc::<u64>::new(&crc::CRC_64_XZ);
        let mut digest = crc.digest();
        for l in &self.layers {
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                digest.update(&v.to_le_bytes());
            }
        }
        digest.finalize()
    }

    fn activate(&self, layer: usize, v: &mut [f64]) {
        let last = layer + 1 == self.layers.len();
        if !last || self.output == Activation::Tanh {
            v.iter_mut().for_each(|x| *x = libm::tanh(*x));
        }
    }

    /// Forward pass that records what [`backward`](Self::backward) needs.
    pub fn forward(&self, input: &[f64], cache: &mut ActivationCache) -> Result<Vec<f64>> {
        check_len("mlp input", self.in_dim(), input.len())?;
        cache.clear();
        let mut current = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = layer.bias.clone();
            for (o, row) in next.iter_mut().zip(layer.weight.as_slice().chunks_exact(layer.in_dim())) {
                *o += super::matrix::dot(row, &current);
            }
            self.activate(i, &mut next);
            cache.inputs.push(current);
            cache.outputs.push(next.clone());
            current = next;
        }
        Ok(current)
    }

    /// Forward pass without recording activations.
    pub fn infer(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_len("mlp input", self.in_dim(), input.len())?;
        let mut current = input.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = layer.bias.clone();
            for (o, row) in next.iter_mut().zip(layer.weight.as_slice().chunks_exact(layer.in_dim())) {
                *o += super::matrix::dot(row, &current);
            }
            self.activate(i, &mut next);
            current = next;
        }
        Ok(current)
    }

    /// [`infer`](Self::infer) for every row of `inputs`, one output row each.
    pub fn infer_batch(&self, inputs: &Matrix) -> Result<Matrix> {
        check_len("mlp batch input", self.in_dim(), inputs.cols())?;
        let mut out = Matrix::zeros(inputs.rows(), self.out_dim());
        for r in 0..inputs.rows() {
            out.row_mut(r).copy_from_slice(&self.infer(inputs.row(r))?);
        }
        Ok(out)
    }

    /// Backpropagates `output_grad` through the recorded pass.
    ///
    /// Parameter gradients are added into `grads` unless the network is frozen,
    /// in which case they are discarded. The gradient with respect to the
    /// network input is always returned.
    pub fn backward(
        &self,
        cache: &ActivationCache,
        output_grad: &[f64],
        grads: Option<&mut Grads>,
    ) -> Result<Vec<f64>> {
        check_len("activation cache depth", self.layers.len(), cache.inputs.len())?;
        check_len("mlp output gradient", self.out_dim(), output_grad.len())?;
        let mut grads = if self.frozen { None } else { grads };
        if let Some(g) = grads.as_deref() {
            check_len("gradient buffer depth", self.layers.len(), g.layers.len())?;
        }

        let mut delta = output_grad.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let (input, output) = (&cache.inputs[i], &cache.outputs[i]);
            check_len("cached layer input", layer.in_dim(), input.len())?;
            check_len("cached layer output", layer.out_dim(), output.len())?;
            let last = i + 1 == self.layers.len();
            if !last || self.output == Activation::Tanh {
                for (d, y) in delta.iter_mut().zip(output) {
                    *d *= 1.0 - y * y;
                }
            }
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[i];
                gl.weight.add_outer(&delta, input)?;
                super::matrix::axpy(1.0, &delta, &mut gl.bias);
            }
            let mut prev = vec![0.0; layer.in_dim()];
            layer.weight.matvec_t_acc(&delta, &mut prev)?;
            delta = prev;
        }
        if let Some(g) = grads {
            g.count += 1;
        }
        Ok(delta)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}
