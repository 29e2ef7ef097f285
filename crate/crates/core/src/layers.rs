//! Network layers built from tape primitives: ConvLSTM, time-distributed
//! pooling, dense, dropout and binary cross-entropy, plus weight init.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::Unary;
use crate::tensor::{Tape, Tensor, Var};

pub const BCE_CLAMP: f64 = 1e-12;

/// Gate order inside the fused ConvLSTM kernels.
pub const GATES: [&str; 4] = ["i", "f", "o", "g"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    None,
}

/// Glorot/Xavier uniform: `U(−a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-a..=a))
}

/// ConvLSTM weights. The four gate kernels are stored fused along the output
/// channel axis in `i, f, o, g` order: `w_x` is `kh×kw×Cin×4Ch` (valid
/// input-to-state convolution), `w_h` is `3×3×Ch×4Ch` (same-padded
/// state-to-state convolution), `bias` has length `4Ch`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub bias: Tensor,
}

impl ConvLstmParams {
    pub fn new(w_x: Tensor, w_h: Tensor, bias: Tensor) -> Result<Self> {
        if w_x.rank() != 4 || w_h.rank() != 4 {
            return Err(Error::dim("convlstm", "kernels must be rank 4"));
        }
        let fused = w_x.shape()[3];
        if !fused.is_multiple_of(4) {
            return Err(Error::dim(
                "convlstm",
                format!("fused output axis {fused} is not a multiple of 4 gates"),
            ));
        }
        let ch = fused / 4;
        if w_h.shape()[2] != ch || w_h.shape()[3] != fused {
            return Err(Error::dim(
                "convlstm",
                format!(
                    "state kernel {:?} does not match {ch} hidden channels",
                    w_h.shape()
                ),
            ));
        }
        if bias.len() != fused {
            return Err(Error::dim(
                "convlstm",
                format!("bias length {} but 4·Ch = {fused}", bias.len()),
            ));
        }
        Ok(ConvLstmParams { w_x, w_h, bias })
    }

    pub fn init<R: Rng + ?Sized>(cin: usize, ch: usize, kernel: usize, state_kernel: usize, rng: &mut R) -> Self {
        let w_x = glorot_uniform(
            &[kernel, kernel, cin, 4 * ch],
            kernel * kernel * cin,
            kernel * kernel * ch,
            rng,
        );
        let w_h = glorot_uniform(
            &[state_kernel, state_kernel, ch, 4 * ch],
            state_kernel * state_kernel * ch,
            state_kernel * state_kernel * ch,
            rng,
        );
        ConvLstmParams {
            w_x,
            w_h,
            bias: Tensor::zeros(&[4 * ch]),
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.bias.len() / 4
    }

    /// One gate's `(input kernel, state kernel, bias)` split out of the fused storage.
    pub fn gate(&self, gate: usize) -> (Tensor, Tensor, Tensor) {
        assert!(gate < 4);
        let ch = self.hidden_channels();
        let pick = |t: &Tensor| crate::tensor::ops::slice_last(t, gate * ch, ch).expect("gate slice");
        (pick(&self.w_x), pick(&self.w_h), pick(&self.bias))
    }

    pub fn record(&self, tape: &mut Tape) -> ConvLstmVars {
        ConvLstmVars {
            w_x: tape.leaf(self.w_x.clone()),
            w_h: tape.leaf(self.w_h.clone()),
            bias: tape.leaf(self.bias.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvLstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

/// Runs a ConvLSTM over a `T×H×W×Cin` sequence and returns every hidden state
/// stacked as `T×H'×W'×Ch`.
///
/// ```text
/// z_t = W_x * X_t + W_h ⊛ H_{t−1} + b        (* valid, ⊛ same-padded)
/// i, f, o = σ(z_i), σ(z_f), σ(z_o);  g = tanh(z_g)
/// C_t = f∘C_{t−1} + i∘g;  H_t = o∘tanh(C_t);  H_0 = C_0 = 0
/// ```
pub fn convlstm_forward(tape: &mut Tape, seq: Var, p: ConvLstmVars) -> Result<Var> {
    let shape = tape.shape(seq)?.to_vec();
    if shape.len() != 4 {
        return Err(Error::dim(
            "convlstm",
            format!("sequence must be T×H×W×C, got {shape:?}"),
        ));
    }
    let wx = tape.shape(p.w_x)?.to_vec();
    if wx[2] != shape[3] {
        return Err(Error::dim(
            "convlstm",
            format!(
                "sequence channel axis 3 = {} but input kernel Cin axis 2 = {}",
                shape[3], wx[2]
            ),
        ));
    }
    let ch = wx[3] / 4;
    let mut h: Option<Var> = None;
    let mut c: Option<Var> = None;
    let mut hs = Vec::with_capacity(shape[0]);
    for t in 0..shape[0] {
        let x_t = tape.select(seq, t)?;
        let mut z = tape.conv2d_valid(x_t, p.w_x, Some(p.bias))?;
        // With H_{t−1} = C_{t−1} = 0 the state terms vanish; skip them at t = 0.
        if let Some(h_prev) = h {
            let zh = tape.conv2d_same(h_prev, p.w_h, None)?;
            z = tape.add(z, zh)?;
        }
        let zi = tape.slice_last(z, 0, ch)?;
        let i = tape.sigmoid(zi)?;
        let zg = tape.slice_last(z, 3 * ch, ch)?;
        let g = tape.tanh(zg)?;
        let ig = tape.hadamard(i, g)?;
        let c_t = match c {
            Some(c_prev) => {
                let zf = tape.slice_last(z, ch, ch)?;
                let f = tape.sigmoid(zf)?;
                let fc = tape.hadamard(f, c_prev)?;
                tape.add(fc, ig)?
            }
            None => ig,
        };
        let zo = tape.slice_last(z, 2 * ch, ch)?;
        let o = tape.sigmoid(zo)?;
        let tc = tape.tanh(c_t)?;
        let h_t = tape.hadamard(o, tc)?;
        hs.push(h_t);
        h = Some(h_t);
        c = Some(c_t);
    }
    tape.stack(&hs)
}

/// Tape-free convenience wrapper around [`convlstm_forward`].
pub fn convlstm(seq: &Tensor, params: &ConvLstmParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.leaf(seq.clone());
    let p = params.record(&mut tape);
    let out = convlstm_forward(&mut tape, s, p)?;
    Ok(tape.value(out)?.clone())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseParams {
    /// `in×out`
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseParams {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.rank() != 2 || bias.len() != weight.shape()[1] {
            return Err(Error::dim(
                "dense",
                format!(
                    "bias length {} does not match weight {:?}",
                    bias.len(),
                    weight.shape()
                ),
            ));
        }
        Ok(DenseParams {
            weight,
            bias,
            activation,
        })
    }

    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, activation: Activation, rng: &mut R) -> Self {
        DenseParams {
            weight: glorot_uniform(&[inputs, outputs], inputs, outputs, rng),
            bias: Tensor::zeros(&[outputs]),
            activation,
        }
    }
}

/// `activation(Wᵀx + b)` for a vector `x`.
pub fn dense_forward(tape: &mut Tape, x: Var, weight: Var, bias: Var, activation: Activation) -> Result<Var> {
    let n = tape.value(x)?.len();
    let w = tape.shape(weight)?.to_vec();
    if w.len() != 2 || w[0] != n {
        return Err(Error::dim(
            "dense",
            format!("input length {n} but weight is {w:?}"),
        ));
    }
    let row = tape.reshape(x, &[1, n])?;
    let y = tape.matmul(row, weight)?;
    let y = tape.reshape(y, &[w[1]])?;
    let y = tape.add(y, bias)?;
    match activation {
        Activation::Relu => tape.unary(y, Unary::Relu),
        Activation::Sigmoid => tape.unary(y, Unary::Sigmoid),
        Activation::None => Ok(y),
    }
}

pub fn dense(x: &Tensor, params: &DenseParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let w = tape.leaf(params.weight.clone());
    let b = tape.leaf(params.bias.clone());
    let y = dense_forward(&mut tape, xv, w, b, params.activation)?;
    Ok(tape.value(y)?.clone())
}

/// Time-distributed 2×2/stride-2 max pooling with ceil-mode edges.
pub fn maxpool_time(seq: &Tensor) -> Result<Tensor> {
    Ok(crate::tensor::ops::maxpool_time(seq)?.0)
}

/// Dropout on the tape; the identity in eval mode.
pub fn dropout_forward(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Contract(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    match mode {
        Mode::Eval => Ok(x),
        Mode::Train => tape.dropout(x, p, rng),
    }
}

pub fn dropout(x: &Tensor, p: f64, mode: Mode, seed: u64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = dropout_forward(&mut tape, v, p, mode, &mut rng)?;
    Ok(tape.value(y)?.clone())
}

/// Mean BCE and its derivative with respect to each (clamped) prediction.
pub(crate) fn bce_terms(preds: &[f64], labels: &[f64]) -> Result<(f64, Vec<f64>)> {
    if preds.is_empty() {
        return Err(Error::Contract("bce on an empty batch".into()));
    }
    let n = preds.len() as f64;
    let mut loss = 0.0;
    let mut dp = Vec::with_capacity(preds.len());
    for (&p, &y) in preds.iter().zip(labels) {
        if y != 0.0 && y != 1.0 {
            return Err(Error::Contract(format!("label must be 0 or 1, got {y}")));
        }
        let clamped = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        loss -= y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln();
        let d = if clamped != p {
            0.0
        } else {
            (-y / p + (1.0 - y) / (1.0 - p)) / n
        };
        dp.push(d);
    }
    Ok((loss / n, dp))
}

/// Mean binary cross-entropy over a batch of probabilities.
pub fn bce_loss(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::dim(
            "bce",
            format!("{} predictions vs {} labels", preds.len(), labels.len()),
        ));
    }
    Ok(bce_terms(preds, labels)?.0)
}
