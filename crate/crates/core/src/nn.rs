//! Affine layers and ReLU stacks over the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, NodeId, ParamId, ParamStore, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Weights uniform in ±√(6/fan_in), zero bias.
    HeUniform,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn init(store: &mut ParamStore, name: &str, input: usize, output: usize, init: Init, rng: &mut impl Rng) -> Result<Self> {
        let w = match init {
            Init::Zero => Matrix::zeros(output, input),
            Init::HeUniform => {
                let bound = (6.0 / input.max(1) as f64).sqrt();
                let data = (0..output * input).map(|_| rng.random_range(-bound..bound)).collect();
                Matrix::from_vec(output, input, data)?
            }
        };
        Ok(Self {
            weight: store.register(format!("{name}.weight"), w)?,
            bias: store.register(format!("{name}.bias"), Matrix::zeros(1, output))?,
            input,
            output,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        tape.affine(store, x, self.weight, self.bias)
    }
}

/// Affine layers with ReLU between them and none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Layer `i` is registered as `<prefix>.<i>`. With `zero_last`, the final
    /// layer starts at zero.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        dims: &[usize],
        zero_last: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::config(prefix, format!("layer widths {dims:?} must be non-empty and positive")));
        }
        let mut layers = Vec::with_capacity(dims.len());
        let mut width = input;
        for (i, &d) in dims.iter().enumerate() {
            let init = if zero_last && i + 1 == dims.len() { Init::Zero } else { Init::HeUniform };
            layers.push(Linear::init(store, &format!("{prefix}.{i}"), width, d, init, rng)?);
            width = d;
        }
        Ok(Self { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_width(&self) -> usize {
        self.layers[self.layers.len() - 1].output
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}
