//! The two-stream fusion network and its ablation variants.
//!
//! Full model, for frames `T×S×S×3` and features `T×29`:
//!
//! ```text
//! frames ─ 4×[ConvLSTM → 2×2 pool] ─ flatten ─ dense(relu) ─ dropout ─ dense ─┐
//!                                                                          concat(8) ─ dense(relu) ─ dense(relu) ─ dense(sigmoid)
//! features ─ flatten(145) ─ dense(relu) ─ dense(relu) ─ dense(relu) ────────┘
//! ```
//!
//! The output is P(stalking).

mod checkpoint;
mod config;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{
    ArchitectureConfig, BlockShape, Variant, FEATURES_PER_FRAME, FRAMES_PER_VIDEO, STREAM_WIDTH,
};

use indexmap::IndexMap;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{self, Activation, ConvLstmParams, ConvLstmVars, DenseParams, Mode};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn dense_specs(out: &mut Vec<ParamSpec>, prefix: &str, inputs: usize, widths: &[usize]) -> usize {
    let mut n = inputs;
    for (j, &w) in widths.iter().enumerate() {
        let name = if widths.len() == 1 {
            prefix.to_string()
        } else {
            format!("{prefix}{}", j + 1)
        };
        out.push(ParamSpec {
            name: format!("{name}.weight"),
            shape: vec![n, w],
            init: Init::Glorot { fan_in: n, fan_out: w },
        });
        out.push(ParamSpec {
            name: format!("{name}.bias"),
            shape: vec![w],
            init: Init::Zeros,
        });
        n = w;
    }
    n
}

/// Every learnable tensor of a variant, in declaration order. Shapes depend on
/// the configuration alone.
pub fn param_specs(config: &ArchitectureConfig, variant: Variant) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let chain = config.shape_chain()?;
    let k = config.input_kernel;
    let sk = config.state_kernel;
    let mut specs = Vec::new();
    let last = chain.last().unwrap();
    let per_frame_flat = last.pool * last.pool * last.channels;

    match variant {
        Variant::Full | Variant::FramesOnly => {
            let mut cin = config.image_channels;
            for (b, block) in chain.iter().enumerate() {
                let ch = block.channels;
                let p = format!("convlstm{}", b + 1);
                specs.push(ParamSpec {
                    name: format!("{p}.w_x"),
                    shape: vec![k, k, cin, 4 * ch],
                    init: Init::Glorot {
                        fan_in: k * k * cin,
                        fan_out: k * k * ch,
                    },
                });
                specs.push(ParamSpec {
                    name: format!("{p}.w_h"),
                    shape: vec![sk, sk, ch, 4 * ch],
                    init: Init::Glorot {
                        fan_in: sk * sk * ch,
                        fan_out: sk * sk * ch,
                    },
                });
                specs.push(ParamSpec {
                    name: format!("{p}.bias"),
                    shape: vec![4 * ch],
                    init: Init::Zeros,
                });
                cin = ch;
            }
            dense_specs(&mut specs, "cnn_dense", config.frames * per_frame_flat, &config.cnn_dense);
        }
        Variant::NoLstm => {
            let mut cin = config.image_channels;
            for (b, block) in chain.iter().enumerate() {
                let ch = block.channels;
                specs.push(ParamSpec {
                    name: format!("cnn{}.kernel", b + 1),
                    shape: vec![k, k, cin, ch],
                    init: Init::Glorot {
                        fan_in: k * k * cin,
                        fan_out: k * k * ch,
                    },
                });
                specs.push(ParamSpec {
                    name: format!("cnn{}.bias", b + 1),
                    shape: vec![ch],
                    init: Init::Zeros,
                });
                cin = ch;
            }
            dense_specs(&mut specs, "cnn_dense", per_frame_flat, &config.cnn_dense);
        }
        Variant::FeaturesOnly => {}
    }

    match variant {
        Variant::Full | Variant::FeaturesOnly => {
            dense_specs(&mut specs, "mlp", config.frames * config.features, &config.mlp_hidden);
        }
        Variant::NoLstm => {
            dense_specs(&mut specs, "mlp", config.features, &config.mlp_hidden);
        }
        Variant::FramesOnly => {}
    }

    match variant {
        Variant::Full | Variant::NoLstm => {
            dense_specs(&mut specs, "fusion", 2 * STREAM_WIDTH, &config.fusion_dense);
        }
        Variant::FramesOnly | Variant::FeaturesOnly => {
            dense_specs(&mut specs, "head", STREAM_WIDTH, &[1]);
        }
    }
    Ok(specs)
}

/// All learnable weights of one network, addressable by layer name.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ArchitectureConfig,
    pub variant: Variant,
    pub tensors: IndexMap<String, Tensor>,
}

pub fn build_model(config: &ArchitectureConfig, seed: u64) -> Result<ModelParams> {
    build_variant(Variant::Full, config, seed)
}

/// Allocates and initializes a variant. Each tensor draws from its own named
/// substream, so layers shared between variants start identical for one seed.
pub fn build_variant(variant: Variant, config: &ArchitectureConfig, seed: u64) -> Result<ModelParams> {
    let specs = param_specs(config, variant)?;
    let mut tensors = IndexMap::with_capacity(specs.len());
    for spec in specs {
        let t = match spec.init {
            Init::Zeros => Tensor::zeros(&spec.shape),
            Init::Glorot { fan_in, fan_out } => {
                let mut r = rng::substream(seed, &format!("init/{}", spec.name));
                layers::glorot_uniform(&spec.shape, fan_in, fan_out, &mut r)
            }
        };
        tensors.insert(spec.name, t);
    }
    Ok(ModelParams {
        config: config.clone(),
        variant,
        tensors,
    })
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Validation(format!("model has no tensor named {name}")))
    }

    pub fn convlstm_block(&self, block: usize) -> Result<ConvLstmParams> {
        let p = format!("convlstm{block}");
        ConvLstmParams::new(
            self.get(&format!("{p}.w_x"))?.clone(),
            self.get(&format!("{p}.w_h"))?.clone(),
            self.get(&format!("{p}.bias"))?.clone(),
        )
    }

    pub fn dense_layer(&self, name: &str, activation: Activation) -> Result<DenseParams> {
        DenseParams::new(
            self.get(&format!("{name}.weight"))?.clone(),
            self.get(&format!("{name}.bias"))?.clone(),
            activation,
        )
    }

    /// Checks every tensor against the shapes implied by config and variant.
    pub fn validate(&self) -> Result<()> {
        let specs = param_specs(&self.config, self.variant)?;
        if specs.len() != self.tensors.len() {
            return Err(Error::Validation(format!(
                "{} variant expects {} tensors, found {}",
                self.variant,
                specs.len(),
                self.tensors.len()
            )));
        }
        for (spec, (name, t)) in specs.iter().zip(&self.tensors) {
            if &spec.name != name {
                return Err(Error::Validation(format!(
                    "expected layer {} but found {name}",
                    spec.name
                )));
            }
            if spec.shape != t.shape() {
                return Err(Error::Validation(format!(
                    "layer {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    spec.shape
                )));
            }
        }
        Ok(())
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn record(&self, tape: &mut Tape) -> IndexMap<String, Var> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), tape.leaf(t.clone())))
            .collect()
    }
}

/// Intermediate shapes seen during a forward pass, in execution order.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

struct Ctx<'a> {
    config: &'a ArchitectureConfig,
    vars: &'a IndexMap<String, Var>,
    mode: Mode,
    rng: &'a mut ChaCha8Rng,
    trace: Option<&'a mut ShapeTrace>,
}

impl Ctx<'_> {
    fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Validation(format!("tensor {name} is not recorded")))
    }

    fn note(&mut self, tape: &Tape, label: String, v: Var) -> Result<()> {
        if let Some(trace) = self.trace.as_deref_mut() {
            trace.push((label, tape.shape(v)?.to_vec()));
        }
        Ok(())
    }

    /// Dense stack; every layer except the last uses `hidden`, the last uses `last`.
    fn dense_stack(
        &mut self,
        tape: &mut Tape,
        prefix: &str,
        widths: usize,
        mut x: Var,
        hidden: Activation,
        last: Activation,
        dropout_between: bool,
    ) -> Result<Var> {
        for j in 0..widths {
            let name = if widths == 1 {
                prefix.to_string()
            } else {
                format!("{prefix}{}", j + 1)
            };
            let act = if j + 1 == widths { last } else { hidden };
            let w = self.var(&format!("{name}.weight"))?;
            let b = self.var(&format!("{name}.bias"))?;
            x = layers::dense_forward(tape, x, w, b, act)?;
            self.note(tape, name, x)?;
            if dropout_between && j + 1 < widths {
                x = layers::dropout_forward(tape, x, self.config.dropout, self.mode, self.rng)?;
            }
        }
        Ok(x)
    }

    fn convlstm_stream(&mut self, tape: &mut Tape, video: Var) -> Result<Var> {
        let mut x = video;
        for b in 1..=self.config.convlstm_channels.len() {
            let p = ConvLstmVars {
                w_x: self.var(&format!("convlstm{b}.w_x"))?,
                w_h: self.var(&format!("convlstm{b}.w_h"))?,
                bias: self.var(&format!("convlstm{b}.bias"))?,
            };
            x = layers::convlstm_forward(tape, x, p)?;
            self.note(tape, format!("convlstm{b}"), x)?;
            x = tape.maxpool_time(x)?;
            self.note(tape, format!("pool{b}"), x)?;
        }
        x = tape.flatten(x)?;
        self.note(tape, "flatten".into(), x)?;
        let n = self.config.cnn_dense.len();
        self.dense_stack(tape, "cnn_dense", n, x, Activation::Relu, Activation::None, true)
    }

    fn frame_cnn(&mut self, tape: &mut Tape, frame: Var) -> Result<Var> {
        let mut x = frame;
        for b in 1..=self.config.convlstm_channels.len() {
            let k = self.var(&format!("cnn{b}.kernel"))?;
            let bias = self.var(&format!("cnn{b}.bias"))?;
            x = tape.conv2d_valid(x, k, Some(bias))?;
            x = tape.relu(x)?;
            let s = tape.shape(x)?.to_vec();
            let seq = tape.reshape(x, &[1, s[0], s[1], s[2]])?;
            let pooled = tape.maxpool_time(seq)?;
            let ps = tape.shape(pooled)?.to_vec();
            x = tape.reshape(pooled, &ps[1..])?;
        }
        x = tape.flatten(x)?;
        let n = self.config.cnn_dense.len();
        self.dense_stack(tape, "cnn_dense", n, x, Activation::Relu, Activation::None, true)
    }

    fn mlp_stream(&mut self, tape: &mut Tape, features: Var) -> Result<Var> {
        let x = tape.flatten(features)?;
        self.note(tape, "mlp_input".into(), x)?;
        let n = self.config.mlp_hidden.len();
        self.dense_stack(tape, "mlp", n, x, Activation::Relu, Activation::Relu, false)
    }

    fn fusion_head(&mut self, tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
        let joined = tape.concat(&[a, b], 0)?;
        self.note(tape, "concat".into(), joined)?;
        let n = self.config.fusion_dense.len();
        self.dense_stack(tape, "fusion", n, joined, Activation::Relu, Activation::Sigmoid, false)
    }

    fn single_head(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.dense_stack(tape, "head", 1, x, Activation::Sigmoid, Activation::Sigmoid, false)
    }
}

fn check_inputs(config: &ArchitectureConfig, video: &[usize], features: &[usize]) -> Result<()> {
    let s = config.image_size;
    let want_video = [config.frames, s, s, config.image_channels];
    if video != want_video {
        return Err(Error::dim(
            "forward",
            format!("video must be {want_video:?}, got {video:?}"),
        ));
    }
    let want_feat = [config.frames, config.features];
    if features != want_feat {
        return Err(Error::dim(
            "forward",
            format!("features must be {want_feat:?}, got {features:?}"),
        ));
    }
    Ok(())
}

/// Records the forward pass on `tape`; returns the probability as a length-1 vector.
#[allow(clippy::too_many_arguments)]
pub fn forward_on_tape(
    params: &ModelParams,
    tape: &mut Tape,
    vars: &IndexMap<String, Var>,
    video: Var,
    features: Var,
    mode: Mode,
    rng: &mut ChaCha8Rng,
    trace: Option<&mut ShapeTrace>,
) -> Result<Var> {
    let config = &params.config;
    check_inputs(config, tape.shape(video)?, tape.shape(features)?)?;
    let mut ctx = Ctx {
        config,
        vars,
        mode,
        rng,
        trace,
    };
    match params.variant {
        Variant::Full => {
            let s = ctx.convlstm_stream(tape, video)?;
            let m = ctx.mlp_stream(tape, features)?;
            ctx.fusion_head(tape, s, m)
        }
        Variant::FramesOnly => {
            let s = ctx.convlstm_stream(tape, video)?;
            ctx.single_head(tape, s)
        }
        Variant::FeaturesOnly => {
            let m = ctx.mlp_stream(tape, features)?;
            ctx.single_head(tape, m)
        }
        Variant::NoLstm => {
            let mut scores = None;
            for t in 0..config.frames {
                let frame = tape.select(video, t)?;
                let c = ctx.frame_cnn(tape, frame)?;
                let row = tape.select(features, t)?;
                let m = ctx.mlp_stream(tape, row)?;
                let p = ctx.fusion_head(tape, c, m)?;
                scores = Some(match scores {
                    None => p,
                    Some(acc) => tape.add(acc, p)?,
                });
            }
            tape.scale(scores.unwrap(), 1.0 / config.frames as f64)
        }
    }
}

/// P(stalking) for one video. `seed` drives dropout in train mode only.
pub fn forward(params: &ModelParams, video: &Tensor, features: &Tensor, mode: Mode, seed: u64) -> Result<f64> {
    forward_traced(params, video, features, mode, seed, None)
}

pub fn forward_traced(
    params: &ModelParams,
    video: &Tensor,
    features: &Tensor,
    mode: Mode,
    seed: u64,
    trace: Option<&mut ShapeTrace>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape);
    let v = tape.leaf(video.clone());
    let f = tape.leaf(features.clone());
    let mut r = rng::substream(seed, "dropout");
    let p = forward_on_tape(params, &mut tape, &vars, v, f, mode, &mut r, trace)?;
    tape.value(p)?.item()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_inputs(config: &ArchitectureConfig, seed: u64) -> (Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = config.image_size;
        let video = Tensor::from_fn(&[5, s, s, 3], |_| r.gen_range(0.0..1.0));
        let feats = Tensor::from_fn(&[5, 29], |_| r.gen_range(-2.0..2.0));
        (video, feats)
    }

    #[test]
    fn full_size_trace() {
        let cfg = ArchitectureConfig::default();
        let model = build_model(&cfg, 1).unwrap();
        let (video, feats) = random_inputs(&cfg, 2);
        let mut trace = ShapeTrace::new();
        let p = forward_traced(&model, &video, &feats, Mode::Eval, 0, Some(&mut trace)).unwrap();
        assert!(p > 0.0 && p < 1.0);
        let lookup = |n: &str| trace.iter().find(|(l, _)| l == n).unwrap().1.clone();
        assert_eq!(lookup("convlstm1"), vec![5, 126, 126, 4]);
        assert_eq!(lookup("pool1"), vec![5, 63, 63, 4]);
        assert_eq!(lookup("convlstm2"), vec![5, 61, 61, 8]);
        assert_eq!(lookup("pool2"), vec![5, 31, 31, 8]);
        assert_eq!(lookup("convlstm3"), vec![5, 29, 29, 14]);
        assert_eq!(lookup("pool3"), vec![5, 15, 15, 14]);
        assert_eq!(lookup("convlstm4"), vec![5, 13, 13, 16]);
        assert_eq!(lookup("pool4"), vec![5, 7, 7, 16]);
        assert_eq!(lookup("flatten"), vec![3920]);
        assert_eq!(lookup("cnn_dense1"), vec![1024]);
        assert_eq!(lookup("cnn_dense2"), vec![4]);
        assert_eq!(lookup("mlp_input"), vec![145]);
        assert_eq!(lookup("concat"), vec![8]);
        assert_eq!(lookup("fusion3"), vec![1]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let cfg = ArchitectureConfig::default().with_image_size(32);
        let model = build_model(&cfg, 3).unwrap();
        let (video, feats) = random_inputs(&cfg, 4);
        let a = forward(&model, &video, &feats, Mode::Eval, 9).unwrap();
        let b = forward(&model, &video, &feats, Mode::Eval, 10).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let c = forward(&model, &video, &feats, Mode::Train, 9).unwrap();
        let d = forward(&model, &video, &feats, Mode::Train, 9).unwrap();
        assert_eq!(c.to_bits(), d.to_bits());
    }

    #[test]
    fn variants_share_stream_weights() {
        let cfg = ArchitectureConfig::default().with_image_size(32);
        let full = build_variant(Variant::Full, &cfg, 5).unwrap();
        let frames = build_variant(Variant::FramesOnly, &cfg, 5).unwrap();
        for (name, t) in &frames.tensors {
            if name.starts_with("head") {
                assert!(!full.tensors.contains_key(name));
            } else {
                assert_eq!(full.tensors.get(name), Some(t), "{name}");
            }
        }
        for name in full.tensors.keys() {
            if !frames.tensors.contains_key(name) {
                assert!(name.starts_with("mlp") || name.starts_with("fusion"), "{name}");
            }
        }
    }

    #[test]
    fn features_only_ignores_video() {
        let cfg = ArchitectureConfig::default().with_image_size(32);
        let model = build_variant(Variant::FeaturesOnly, &cfg, 6).unwrap();
        let (video, feats) = random_inputs(&cfg, 7);
        let a = forward(&model, &video, &feats, Mode::Eval, 0).unwrap();
        let b = forward(&model, &Tensor::zeros(video.shape()), &feats, Mode::Eval, 0).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn every_variant_outputs_probability() {
        let cfg = ArchitectureConfig::default().with_image_size(32);
        let (video, feats) = random_inputs(&cfg, 8);
        for v in Variant::ALL {
            let model = build_variant(v, &cfg, 1).unwrap();
            model.validate().unwrap();
            let p = forward(&model, &video, &feats, Mode::Train, 1).unwrap();
            assert!(p > 0.0 && p < 1.0, "{v}: {p}");
        }
    }

    #[test]
    fn param_count_is_a_function_of_config() {
        let cfg = ArchitectureConfig::default();
        let a = build_model(&cfg, 1).unwrap().param_count();
        let b = build_model(&cfg, 2).unwrap().param_count();
        assert_eq!(a, b);
        let specs = param_specs(&cfg, Variant::Full).unwrap();
        assert_eq!(a, specs.iter().map(|s| s.shape.iter().product::<usize>()).sum::<usize>());
    }

    #[test]
    fn wrong_input_shapes_rejected() {
        let cfg = ArchitectureConfig::default().with_image_size(32);
        let model = build_model(&cfg, 1).unwrap();
        let (video, _) = random_inputs(&cfg, 1);
        let bad = Tensor::zeros(&[5, 28]);
        assert!(matches!(
            forward(&model, &video, &bad, Mode::Eval, 0),
            Err(Error::Dimension { .. })
        ));
    }
}
