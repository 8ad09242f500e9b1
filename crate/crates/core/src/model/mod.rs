//! Conditional noise-prediction network.
//!
//! A small fully connected network maps `concat(y, time_features(t), prompt)`
//! to a predicted noise vector with the same dimension as `y`. All parameters
//! live in one flat vector so the optimizer and checkpoint code can treat them
//! uniformly. Gradients are computed by hand with a reverse pass over the
//! cached activations.

mod adamw;
mod objective;

pub use adamw::{optimizer_step, scaled_lr, OptimizerState};
pub use objective::{
    loss_gradient, BatchStats, LossEval, LossKind, NoiseDraws, ObjectiveOptions, PosteriorMode,
    TimestepMode,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::schedule::DiffusionSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Layer widths plus the pieces of the input vector they imply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub layers: Vec<usize>,
    pub time_dim: usize,
    pub activation: Activation,
}

impl Arch {
    /// Dense net for `data_dim`-dimensional samples with the given hidden widths.
    pub fn dense(data_dim: usize, prompt_dim: usize, time_dim: usize, hidden: &[usize]) -> Self {
        let mut layers = vec![data_dim + time_dim + prompt_dim];
        layers.extend_from_slice(hidden);
        layers.push(data_dim);
        Self {
            layers,
            time_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::InvalidArch(format!(
                "need at least an input and an output layer, got {:?}",
                self.layers
            )));
        }
        if self.layers.contains(&0) {
            return Err(Error::InvalidArch(format!(
                "zero-width layer in {:?}",
                self.layers
            )));
        }
        if !self.time_dim.is_multiple_of(2) {
            return Err(Error::InvalidArch(format!(
                "time feature dimension must be even, got {}",
                self.time_dim
            )));
        }
        if self.input_dim() < self.data_dim() + self.time_dim {
            return Err(Error::InvalidArch(format!(
                "input width {} cannot hold data ({}) plus time features ({})",
                self.input_dim(),
                self.data_dim(),
                self.time_dim
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0]
    }

    pub fn data_dim(&self) -> usize {
        *self.layers.last().expect("validated arch")
    }

    pub fn prompt_dim(&self) -> usize {
        self.input_dim() - self.data_dim() - self.time_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Flat parameter vector of the denoiser together with its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    arch: Arch,
    theta: Vec<f64>,
}

impl DenoiserParams {
    pub fn from_theta(arch: Arch, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        check_dim(arch.param_count(), theta.len())?;
        if let Some(bad) = theta.iter().find(|x| !x.is_finite()) {
            return Err(Error::InvalidArch(format!("non-finite parameter {bad}")));
        }
        Ok(Self { arch, theta })
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        let n = arch.param_count();
        Self::from_theta(arch, vec![0.0; n])
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub(crate) fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Predicted noise for `y` at array index `t` under prompt conditioning.
    pub fn denoise(
        &self,
        y: &[f64],
        t: usize,
        prompt: &[f64],
        schedule: &DiffusionSchedule,
    ) -> Result<Vec<f64>> {
        if t > schedule.steps() {
            return Err(Error::TimestepOutOfRange {
                t,
                lo: 0,
                hi: schedule.steps(),
            });
        }
        let input = self.assemble_input(y, t, prompt)?;
        Ok(self.forward(input).output().to_vec())
    }

    fn assemble_input(&self, y: &[f64], t: usize, prompt: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.arch.data_dim(), y.len())?;
        check_dim(self.arch.prompt_dim(), prompt.len())?;
        let mut input = Vec::with_capacity(self.arch.input_dim());
        input.extend_from_slice(y);
        input.extend(time_features(t, self.arch.time_dim));
        input.extend_from_slice(prompt);
        Ok(input)
    }

    fn forward(&self, input: Vec<f64>) -> Forward {
        let layers = &self.arch.layers;
        let mut acts = Vec::with_capacity(layers.len());
        acts.push(input);
        let mut offset = 0;
        for (l, w) in layers.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.theta[offset..offset + n_in * n_out];
            let bias = &self.theta[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let prev = &acts[l];
            let last = l + 2 == layers.len();
            let out: Vec<f64> = weights
                .chunks_exact(n_in)
                .zip(bias)
                .map(|(row, b)| {
                    let z = row.iter().zip(prev).map(|(w, a)| w * a).sum::<f64>() + b;
                    if last {
                        z
                    } else {
                        self.arch.activation.apply(z)
                    }
                })
                .collect();
            acts.push(out);
        }
        Forward { acts }
    }

    /// Accumulates `d loss / d theta` into `grad` given `d loss / d output`.
    fn backward(&self, fwd: &Forward, d_out: &[f64], grad: &mut [f64]) {
        let layers = &self.arch.layers;
        let n_layers = layers.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for w in layers.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }

        let mut delta = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (layers[l], layers[l + 1]);
            if l + 1 < n_layers {
                // delta arrives w.r.t. the activation output; move it to pre-activation
                for (d, a) in delta.iter_mut().zip(&fwd.acts[l + 1]) {
                    *d *= self.arch.activation.derivative_from_output(*a);
                }
            }
            let off = offsets[l];
            let prev = &fwd.acts[l];
            for o in 0..n_out {
                let d = delta[o];
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[off + o * n_in..off + (o + 1) * n_in];
                for (g, a) in row.iter_mut().zip(prev) {
                    *g += d * a;
                }
                grad[off + n_in * n_out + o] += d;
            }
            if l > 0 {
                let weights = &self.theta[off..off + n_in * n_out];
                let mut next = vec![0.0; n_in];
                for (o, row) in weights.chunks_exact(n_in).enumerate() {
                    let d = delta[o];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += d * w;
                    }
                }
                delta = next;
            }
        }
    }
}

struct Forward {
    acts: Vec<Vec<f64>>,
}

impl Forward {
    fn output(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

/// Sinusoidal features of the timestep: `sin(t f_k)` then `cos(t f_k)` with
/// `f_k = 10000^(-k / (dim/2))`.
pub fn time_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10000f64.ln()) * k as f64 / half as f64).exp())
        .collect();
    let t = t as f64;
    freqs
        .iter()
        .map(|f| (t * f).sin())
        .chain(freqs.iter().map(|f| (t * f).cos()))
        .collect()
}

/// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
pub fn init_params(arch: Arch, seed: u64) -> Result<DenoiserParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = Vec::with_capacity(arch.param_count());
    for w in arch.layers.windows(2) {
        let bound = 1.0 / (w[0] as f64).sqrt();
        theta.extend((0..w[0] * w[1]).map(|_| rng.random_range(-bound..=bound)));
        theta.extend(std::iter::repeat_n(0.0, w[1]));
    }
    DenoiserParams::from_theta(arch, theta)
}
