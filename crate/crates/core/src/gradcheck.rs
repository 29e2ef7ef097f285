//! Central finite-difference checks of tape gradients.
//!
//! A function `f` of some input tensors is reduced to the scalar
//! `L = Σ w ∘ f(x)` with fixed random weights `w`, so every output element
//! contributes with an O(1) weight. The analytic gradient of `L` from the tape
//! is compared with `(L(x + ε) − L(x − ε)) / 2ε` element by element.

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layers::{convlstm_forward, dense_forward, Activation, ConvLstmParams, Mode};
use crate::model::{build_variant, forward_on_tape, ArchitectureConfig, Variant};
use crate::rng::substream;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CheckConfig {
    pub epsilon: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// At most this many coordinates per input tensor are probed.
    pub max_probes: usize,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            epsilon: 1e-6,
            floor: 1e-4,
            max_probes: 64,
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub probes: usize,
}

/// Checks `f` at `inputs`. `f` must be deterministic: any randomness it uses
/// has to be re-seeded on every call.
pub fn check<F>(name: &str, inputs: &[Tensor], seed: u64, config: &CheckConfig, f: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let weights = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let shape = tape.shape(out)?.to_vec();
        let mut r = substream(seed, "gradcheck/weights");
        Tensor::from_fn(&shape, |_| r.gen_range(-1.0..1.0))
    };
    let objective = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let out = f(tape, vars)?;
        let w = tape.leaf(weights.clone());
        let prod = tape.hadamard(out, w)?;
        tape.sum(prod)
    };
    let eval = |xs: &[Tensor]| -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out)?.clone())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = objective(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut pick = substream(seed, "gradcheck/probes");
    let mut report = CheckReport {
        name: name.to_string(),
        seed,
        max_rel_error: 0.0,
        worst: (0, 0),
        probes: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[ii], input.shape());
        let n = input.len();
        let coords: Vec<usize> = if n <= config.max_probes {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut pick, n, config.max_probes).into_vec()
        };
        for j in coords {
            let orig = input.data()[j];
            work[ii].data_mut()[j] = orig + config.epsilon;
            let up = eval(&work)?;
            work[ii].data_mut()[j] = orig - config.epsilon;
            let down = eval(&work)?;
            work[ii].data_mut()[j] = orig;
            // Differencing each output before weighting avoids cancellation in a large sum.
            let numeric = up
                .data()
                .iter()
                .zip(down.data())
                .zip(weights.data())
                .map(|((u, d), w)| w * (u - d))
                .sum::<f64>()
                / (2.0 * config.epsilon);
            let err = relative_error(analytic.data()[j], numeric, config.floor);
            if !err.is_finite() {
                return Err(Error::Numerical(format!("{name}: non-finite gradient at input {ii}[{j}]")));
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ii, j);
            }
            report.probes += 1;
        }
    }
    Ok(report)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Uniform in ±[0.05, 1]: keeps ReLU inputs away from the kink.
fn away_from_zero(shape: &[usize], r: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Every primitive and layer type, checked at one seed.
pub fn check_primitives(seed: u64, config: &CheckConfig) -> Result<Vec<CheckReport>> {
    let mut r = substream(seed, "gradcheck/inputs");
    let mut out = Vec::new();

    let x = uniform(&[5, 6, 2], -1.0, 1.0, &mut r);
    let k = uniform(&[3, 3, 2, 3], -1.0, 1.0, &mut r);
    let b = uniform(&[3], -1.0, 1.0, &mut r);
    out.push(check("conv2d_valid", &[x.clone(), k.clone(), b.clone()], seed, config, |t, v| {
        t.conv2d_valid(v[0], v[1], Some(v[2]))
    })?);
    out.push(check("conv2d_same", &[x, k, b], seed, config, |t, v| t.conv2d_same(v[0], v[1], Some(v[2])))?);

    let a = uniform(&[3, 4], -1.0, 1.0, &mut r);
    let m = uniform(&[4, 2], -1.0, 1.0, &mut r);
    out.push(check("matmul", &[a, m], seed, config, |t, v| t.matmul(v[0], v[1]))?);

    let z = uniform(&[4, 3], -3.0, 3.0, &mut r);
    out.push(check("sigmoid", std::slice::from_ref(&z), seed, config, |t, v| t.sigmoid(v[0]))?);
    out.push(check("tanh", &[z], seed, config, |t, v| t.tanh(v[0]))?);
    out.push(check("relu", &[away_from_zero(&[4, 3], &mut r)], seed, config, |t, v| t.relu(v[0]))?);

    let p = uniform(&[2, 3], -1.0, 1.0, &mut r);
    let q = uniform(&[2, 3], -1.0, 1.0, &mut r);
    out.push(check("add", &[p.clone(), q.clone()], seed, config, |t, v| t.add(v[0], v[1]))?);
    out.push(check("hadamard", &[p.clone(), q.clone()], seed, config, |t, v| t.hadamard(v[0], v[1]))?);
    out.push(check("scale", std::slice::from_ref(&p), seed, config, |t, v| t.scale(v[0], -2.5))?);
    out.push(check("reshape", std::slice::from_ref(&p), seed, config, |t, v| t.reshape(v[0], &[3, 2]))?);
    out.push(check("flatten", std::slice::from_ref(&p), seed, config, |t, v| t.flatten(v[0]))?);
    out.push(check("concat", &[p.clone(), uniform(&[2, 2], -1.0, 1.0, &mut r)], seed, config, |t, v| {
        t.concat(&[v[0], v[1]], 1)
    })?);
    out.push(check("slice_last", std::slice::from_ref(&p), seed, config, |t, v| t.slice_last(v[0], 1, 2))?);
    out.push(check("select", std::slice::from_ref(&p), seed, config, |t, v| t.select(v[0], 1))?);
    out.push(check("stack", &[p.clone(), q], seed, config, |t, v| t.stack(&[v[0], v[1]]))?);
    out.push(check("sum", std::slice::from_ref(&p), seed, config, |t, v| t.sum(v[0]))?);
    out.push(check("mean", &[p], seed, config, |t, v| t.mean(v[0]))?);

    let seq = uniform(&[3, 5, 5, 2], -1.0, 1.0, &mut r);
    out.push(check("maxpool_time", &[seq], seed, config, |t, v| t.maxpool_time(v[0]))?);

    let d = uniform(&[10], -1.0, 1.0, &mut r);
    out.push(check("dropout", &[d], seed, config, |t, v| {
        let mut rr = substream(seed, "gradcheck/dropout");
        t.dropout(v[0], 0.5, &mut rr)
    })?);

    let probs = uniform(&[6], 0.05, 0.95, &mut r);
    let labels: Vec<f64> = (0..6).map(|i| (i % 2) as f64).collect();
    out.push(check("bce", &[probs], seed, config, |t, v| t.bce(v[0], &labels))?);

    let lstm = ConvLstmParams::init(2, 3, 3, 3, &mut r);
    let lstm_bias = uniform(&[12], -0.5, 0.5, &mut r);
    let seq = uniform(&[4, 6, 6, 2], -1.0, 1.0, &mut r);
    out.push(check(
        "convlstm",
        &[seq, lstm.w_x, lstm.w_h, lstm_bias],
        seed,
        config,
        |t, v| {
            convlstm_forward(
                t,
                v[0],
                crate::layers::ConvLstmVars {
                    w_x: v[1],
                    w_h: v[2],
                    bias: v[3],
                },
            )
        },
    )?);

    let xin = uniform(&[1, 5], -1.0, 1.0, &mut r);
    let w = uniform(&[5, 4], -1.0, 1.0, &mut r);
    let bb = uniform(&[4], -0.5, 0.5, &mut r);
    for (name, act) in [
        ("dense_relu", Activation::Relu),
        ("dense_sigmoid", Activation::Sigmoid),
        ("dense_linear", Activation::None),
    ] {
        out.push(check(name, &[xin.clone(), w.clone(), bb.clone()], seed, config, |t, v| {
            dense_forward(t, v[0], v[1], v[2], act)
        })?);
    }
    Ok(out)
}

/// Loss gradient of a whole tiny network (train mode, fixed dropout mask)
/// with respect to every parameter tensor and both inputs.
pub fn check_model(variant: Variant, arch: &ArchitectureConfig, seed: u64, config: &CheckConfig) -> Result<CheckReport> {
    let params = build_variant(variant, arch, seed)?;
    let mut r = substream(seed, "gradcheck/model-inputs");
    let s = arch.image_size;
    let video = uniform(&[arch.frames, s, s, arch.image_channels], 0.0, 1.0, &mut r);
    let features = uniform(&[arch.frames, arch.features], -2.0, 2.0, &mut r);
    let label = if r.gen_bool(0.5) { 1.0 } else { 0.0 };
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    // Zero biases can pin a ReLU input exactly on its kink; check at a generic point.
    let mut inputs: Vec<Tensor> = params
        .tensors
        .iter()
        .map(|(n, t)| if n.ends_with("bias") { uniform(t.shape(), -0.2, 0.2, &mut r) } else { t.clone() })
        .collect();
    inputs.push(video);
    inputs.push(features);
    let np = names.len();
    check(&format!("model/{variant}"), &inputs, seed, config, |tape, v| {
        let vars = names.iter().cloned().zip(v[..np].iter().copied()).collect();
        let mut rng = substream(seed, "gradcheck/model-dropout");
        let p = forward_on_tape(&params, tape, &vars, v[np], v[np + 1], Mode::Train, &mut rng, None)?;
        tape.bce(p, &[label])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(1.0, 1.0, 1e-4), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-4) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-9, 1e-4) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Call 0 sizes the weights, call 1 is the analytic pass, later calls
        // are probes; a different slope on the analytic pass must be caught.
        let calls = std::cell::Cell::new(0);
        let x = Tensor::vector(vec![0.3, -0.7]);
        let r = check("mismatch", std::slice::from_ref(&x), 1, &CheckConfig::default(), |t, v| {
            let k = calls.get();
            calls.set(k + 1);
            t.scale(v[0], if k == 1 { 2.0 } else { 3.0 })
        })
        .unwrap();
        assert!((r.max_rel_error - 1.0 / 3.0).abs() < 1e-6, "{r:?}");
        let good = check("scale", &[x], 1, &CheckConfig::default(), |t, v| t.scale(v[0], 2.0)).unwrap();
        assert!(good.max_rel_error < 1e-8);
    }
}
