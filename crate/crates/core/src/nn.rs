//! Linear layers and SiLU multilayer perceptrons recorded on a [`Tape`].

use rand::Rng;

use crate::tensor::{Tape, Tensor, TensorError, Var};

/// Affine map `y = x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| rng.random_range(-bound..bound))
                .collect::<Vec<_>>()
        };
        let weight = Tensor::new(&[inputs, outputs], draw(inputs * outputs)).expect("shape");
        let bias = Tensor::new(&[1, outputs], draw(outputs)).expect("shape");
        Self { weight, bias }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[1, outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }
}

/// Stack of linear layers with SiLU between them, and optionally after the
/// last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_output: bool,
}

impl Mlp {
    /// `widths = [in, hidden.., out]`.
    pub fn new(widths: &[usize], activate_output: bool, rng: &mut impl Rng) -> Self {
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            activate_output,
        }
    }

    /// Same as [`Mlp::new`] but with the final layer set to zero, so the
    /// network initially outputs exactly zero.
    pub fn zero_output(widths: &[usize], rng: &mut impl Rng) -> Self {
        let mut mlp = Self::new(widths, false, rng);
        if let Some(last) = mlp.layers.last_mut() {
            *last = Linear::zeros(last.inputs(), last.outputs());
        }
        mlp
    }

    pub fn inputs(&self) -> usize {
        self.layers.first().map_or(0, Linear::inputs)
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().map_or(0, Linear::outputs)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i < last || self.activate_output {
                h = tape.silu(h);
            }
        }
        Ok(h)
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("{prefix}.{i}.weight"), &l.weight);
            f(format!("{prefix}.{i}.bias"), &l.bias);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("{prefix}.{i}.weight"), &mut l.weight);
            f(format!("{prefix}.{i}.bias"), &mut l.bias);
        }
    }

    /// Evaluates on plain values, without keeping the tape.
    pub fn eval(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}
