//! CNN window encoder: a stack of valid 1-d convolutions with ReLU after
//! each layer, flattened and projected to a 256-dimensional local embedding
//! per window.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Scalar, Tape, Tensor, Var};
use crate::error::{MilcError, Result};

/// Local embedding width shared by both variants.
pub const EMBED_DIM: usize = 256;

/// The two published encoder configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderVariant {
    /// 10-channel synthetic data: features (32, 64, 128, 64), kernels (4, 4, 3, 2).
    Simulation,
    /// 53-channel ICA time courses: features (64, 128, 200), kernels (4, 4, 3).
    Real,
}

impl EncoderVariant {
    pub fn in_channels(self) -> usize {
        match self {
            EncoderVariant::Simulation => 10,
            EncoderVariant::Real => 53,
        }
    }

    /// (out_features, kernel) per conv layer, stride 1, no padding.
    pub fn conv_shapes(self) -> &'static [(usize, usize)] {
        match self {
            EncoderVariant::Simulation => &[(32, 4), (64, 4), (128, 3), (64, 2)],
            EncoderVariant::Real => &[(64, 4), (128, 4), (200, 3)],
        }
    }

    /// Smallest window the conv stack accepts.
    pub fn min_win_len(self) -> usize {
        1 + self.conv_shapes().iter().map(|&(_, k)| k - 1).sum::<usize>()
    }

    /// Flattened width after the conv stack on a window of `win_len` points.
    pub fn flat_dim(self, win_len: usize) -> Result<usize> {
        let mut len = win_len;
        for &(_, k) in self.conv_shapes() {
            if len < k {
                return Err(MilcError::Data(format!(
                    "window length {} too short for the {:?} conv stack (needs ≥ {})",
                    win_len,
                    self,
                    self.min_win_len()
                )));
            }
            len = len - k + 1;
        }
        let out_features = self.conv_shapes().last().map(|&(f, _)| f).unwrap_or(0);
        Ok(out_features * len)
    }

    pub fn tag(self) -> &'static str {
        match self {
            EncoderVariant::Simulation => "simulation",
            EncoderVariant::Real => "real",
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        match tag {
            "simulation" => Ok(EncoderVariant::Simulation),
            "real" => Ok(EncoderVariant::Real),
            other => Err(MilcError::Config(format!(
                "unknown encoder variant '{}', expected 'simulation' or 'real'",
                other
            ))),
        }
    }
}

/// Affine layer parameters; weight is (in, out) so `x @ weight + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Registered tape handles for one affine layer.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<F: Scalar> LinearParams<F> {
    /// Uniform fan-in init U(±1/√in), zero bias.
    pub fn init(inp: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (inp as f64).sqrt();
        LinearParams {
            weight: Tensor::from_fn(&[inp, out], |_| F::from_f64(rng.gen_range(-bound..bound))),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn register(&self, tape: &mut Tape<F>) -> LinearVars {
        LinearVars { weight: tape.leaf(self.weight.clone()), bias: tape.leaf(self.bias.clone()) }
    }
}

/// Conv layer parameters; weight is (out, in, kernel).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<F: Scalar> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
}

impl<F: Scalar> ConvParams<F> {
    pub fn init(out: usize, inp: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((inp * kernel) as f64).sqrt();
        ConvParams {
            weight: Tensor::from_fn(&[out, inp, kernel], |_| F::from_f64(rng.gen_range(-bound..bound))),
            bias: Tensor::zeros(&[out]),
        }
    }

    pub fn register(&self, tape: &mut Tape<F>) -> ConvVars {
        ConvVars { weight: tape.leaf(self.weight.clone()), bias: tape.leaf(self.bias.clone()) }
    }
}

/// Full window-encoder parameters: the conv stack plus the output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<F: Scalar> {
    pub convs: Vec<ConvParams<F>>,
    pub out: LinearParams<F>,
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub convs: Vec<ConvVars>,
    pub out: LinearVars,
}

impl<F: Scalar> EncoderParams<F> {
    pub fn init(variant: EncoderVariant, win_len: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let flat = variant.flat_dim(win_len)?;
        let mut convs = Vec::new();
        let mut in_ch = variant.in_channels();
        for &(out_ch, k) in variant.conv_shapes() {
            convs.push(ConvParams::init(out_ch, in_ch, k, rng));
            in_ch = out_ch;
        }
        Ok(EncoderParams { convs, out: LinearParams::init(flat, EMBED_DIM, rng) })
    }

    pub fn register(&self, tape: &mut Tape<F>) -> EncoderVars {
        EncoderVars {
            convs: self.convs.iter().map(|c| c.register(tape)).collect(),
            out: self.out.register(tape),
        }
    }
}

/// Encode a batch of windows (B, channels, win_len) into local embeddings
/// (B, 256): conv → ReLU per layer, flatten channel-major over time, one
/// linear projection, no final activation.
pub fn encode_windows<F: Scalar>(tape: &mut Tape<F>, vars: &EncoderVars, x: Var) -> Result<Var> {
    let mut h = x;
    for conv in &vars.convs {
        let y = tape.conv1d(h, conv.weight, conv.bias)?;
        h = tape.relu(y);
    }
    let shape = tape.value(h).shape().to_vec();
    let (b, flat) = (shape[0], shape[1] * shape[2]);
    let flattened = tape.reshape(h, &[b, flat])?;
    tape.linear(flattened, vars.out.weight, vars.out.bias)
}
