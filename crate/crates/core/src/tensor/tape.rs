use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::ops::{self, Binary, ConvGeometry, Unary};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        x: usize,
        k: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Unary {
        x: usize,
        f: Unary,
    },
    Binary {
        a: usize,
        b: usize,
        f: Binary,
    },
    Scale {
        x: usize,
        factor: f64,
    },
    Reshape {
        x: usize,
    },
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    SliceLast {
        x: usize,
        start: usize,
    },
    Select {
        x: usize,
        index: usize,
    },
    Stack {
        parts: Vec<usize>,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Mask {
        x: usize,
        mask: Vec<f64>,
    },
    Sum {
        x: usize,
    },
    Bce {
        p: usize,
        /// d(mean loss)/dp per element, zero where the clamp is active.
        dp: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-writer record of one differentiable computation.
///
/// Nodes are appended in execution order, which is already a topological
/// order, so the backward pass is a reverse scan.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    spent: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients from one backward pass, indexed by the tape's variables.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the variable does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the right shape when `v` is unreachable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            spent: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape == self.id && v.index < self.nodes.len() {
            Ok(v.index)
        } else {
            Err(Error::MissingNode)
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn conv(&mut self, x: Var, k: Var, b: Option<Var>, same: bool) -> Result<Var> {
        let (xi, ki) = (self.idx(x)?, self.idx(k)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let op = if same { "conv2d_same" } else { "conv2d_valid" };
        let xv = &self.nodes[xi].value;
        let kv = &self.nodes[ki].value;
        let bv = bi.map(|i| &self.nodes[i].value);
        let geom = ops::conv_geometry(op, xv, kv, bv, same)?;
        let out = ops::conv_forward(&geom, xv.data(), kv.data(), bv.map(Tensor::data));
        let value = Tensor::new(&[geom.ho, geom.wo, geom.cout], out)?;
        Ok(self.push(
            value,
            Op::Conv {
                x: xi,
                k: ki,
                b: bi,
                geom,
            },
        ))
    }

    pub fn conv2d_valid(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        self.conv(x, kernel, bias, false)
    }

    pub fn conv2d_same(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        self.conv(x, kernel, bias, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let value = ops::matmul(&self.nodes[ai].value, &self.nodes[bi].value)?;
        Ok(self.push(value, Op::MatMul { a: ai, b: bi }))
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = ops::unary(&self.nodes[xi].value, f);
        Ok(self.push(value, Op::Unary { x: xi, f }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn binary(&mut self, a: Var, b: Var, f: Binary) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let value = ops::binary(&self.nodes[ai].value, &self.nodes[bi].value, f)?;
        Ok(self.push(value, Op::Binary { a: ai, b: bi, f }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Hadamard)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(|v| v * factor);
        Ok(self.push(value, Op::Scale { x: xi, factor }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let src = &self.nodes[xi].value;
        let n: usize = shape.iter().product();
        if n != src.len() {
            return Err(Error::dim(
                "reshape",
                format!(
                    "{:?} has {} elements, target {shape:?} has {n}",
                    src.shape(),
                    src.len()
                ),
            ));
        }
        let value = src.reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x: xi }))
    }

    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x)?.len();
        self.reshape(x, &[n])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let parts = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = parts.iter().map(|&i| &self.nodes[i].value).collect();
        let value = ops::concat(&refs, axis)?;
        Ok(self.push(value, Op::Concat { parts, axis }))
    }

    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = ops::slice_last(&self.nodes[xi].value, start, len)?;
        Ok(self.push(value, Op::SliceLast { x: xi, start }))
    }

    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = ops::select(&self.nodes[xi].value, index)?;
        Ok(self.push(value, Op::Select { x: xi, index }))
    }

    pub fn stack(&mut self, xs: &[Var]) -> Result<Var> {
        let parts = xs.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = parts.iter().map(|&i| &self.nodes[i].value).collect();
        let value = ops::stack(&refs)?;
        Ok(self.push(value, Op::Stack { parts }))
    }

    pub fn maxpool_time(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (value, argmax) = ops::maxpool_time(&self.nodes[xi].value)?;
        Ok(self.push(value, Op::MaxPool { x: xi, argmax }))
    }

    /// Inverted dropout in training mode: zero with probability `p`, scale survivors by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        let xi = self.idx(x)?;
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.nodes[xi].value.len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let src = &self.nodes[xi].value;
        let value = Tensor::new(
            src.shape(),
            src.data().iter().zip(&mask).map(|(v, m)| v * m).collect(),
        )?;
        Ok(self.push(value, Op::Mask { x: xi, mask }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: xi }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x)?.len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 labels.
    /// Probabilities are clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pi = self.idx(p)?;
        let pv = &self.nodes[pi].value;
        if pv.len() != labels.len() {
            return Err(Error::dim(
                "bce",
                format!("{} predictions vs {} labels", pv.len(), labels.len()),
            ));
        }
        let (loss, dp) = crate::layers::bce_terms(pv.data(), labels)?;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p: pi, dp }))
    }

    /// Reverse pass from a scalar loss. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.spent {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        self.spent = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, k, b, geom } => {
                    let xv = self.nodes[*x].value.data();
                    let kv = self.nodes[*k].value.data();
                    let mut gx = take_or_zero(&mut grads, *x, xv.len());
                    let mut gk = take_or_zero(&mut grads, *k, kv.len());
                    let mut gb = b.map(|b| take_or_zero(&mut grads, b, geom.cout));
                    ops::conv_backward(
                        geom,
                        xv,
                        kv,
                        &g,
                        Some(&mut gx),
                        Some(&mut gk),
                        gb.as_deref_mut(),
                    );
                    grads[*x] = Some(gx);
                    grads[*k] = Some(gk);
                    if let (Some(b), Some(gb)) = (b, gb) {
                        grads[*b] = Some(gb);
                    }
                }
                Op::MatMul { a, b } => {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let bt = ops::transpose(bv.data(), k, n);
                    let mut ga = take_or_zero(&mut grads, *a, m * k);
                    ops::matmul_acc(&g, &bt, &mut ga, m, n, k);
                    grads[*a] = Some(ga);
                    let at = ops::transpose(av.data(), m, k);
                    let mut gb = take_or_zero(&mut grads, *b, k * n);
                    ops::matmul_acc(&at, &g, &mut gb, k, m, n);
                    grads[*b] = Some(gb);
                }
                Op::Unary { x, f } => {
                    let xv = self.nodes[*x].value.data();
                    let yv = node.value.data();
                    let mut gx = take_or_zero(&mut grads, *x, xv.len());
                    for j in 0..g.len() {
                        gx[j] += g[j] * f.derivative(xv[j], yv[j]);
                    }
                    grads[*x] = Some(gx);
                }
                Op::Binary { a, b, f } => {
                    let n = g.len();
                    match f {
                        Binary::Add => {
                            accumulate(&mut grads, *a, &g);
                            accumulate(&mut grads, *b, &g);
                        }
                        Binary::Hadamard => {
                            let av = self.nodes[*a].value.data();
                            let bv = self.nodes[*b].value.data();
                            let ga: Vec<f64> = (0..n).map(|j| g[j] * bv[j]).collect();
                            let gb: Vec<f64> = (0..n).map(|j| g[j] * av[j]).collect();
                            accumulate(&mut grads, *a, &ga);
                            accumulate(&mut grads, *b, &gb);
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    let gx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Reshape { x } => accumulate(&mut grads, *x, &g),
                Op::Concat { parts, axis } => {
                    let refs: Vec<&Tensor> = parts.iter().map(|&p| &self.nodes[p].value).collect();
                    let (shape, inner, extents) = ops::concat_layout(&refs, *axis)?;
                    let outer: usize = shape[..*axis].iter().product();
                    let mut pgrads: Vec<Vec<f64>> =
                        refs.iter().map(|r| Vec::with_capacity(r.len())).collect();
                    let mut off = 0;
                    for _ in 0..outer {
                        for (pg, &e) in pgrads.iter_mut().zip(&extents) {
                            pg.extend_from_slice(&g[off..off + e * inner]);
                            off += e * inner;
                        }
                    }
                    for (&p, pg) in parts.iter().zip(pgrads) {
                        accumulate(&mut grads, p, &pg);
                    }
                }
                Op::SliceLast { x, start } => {
                    let xs = self.nodes[*x].value.shape();
                    let c = *xs.last().unwrap();
                    let len = *node.value.shape().last().unwrap();
                    let mut gx = take_or_zero(&mut grads, *x, self.nodes[*x].value.len());
                    for (row, grow) in gx.chunks_exact_mut(c).zip(g.chunks_exact(len)) {
                        for (d, s) in row[*start..start + len].iter_mut().zip(grow) {
                            *d += s;
                        }
                    }
                    grads[*x] = Some(gx);
                }
                Op::Select { x, index } => {
                    let inner = g.len();
                    let mut gx = take_or_zero(&mut grads, *x, self.nodes[*x].value.len());
                    for (d, s) in gx[index * inner..(index + 1) * inner].iter_mut().zip(&g) {
                        *d += s;
                    }
                    grads[*x] = Some(gx);
                }
                Op::Stack { parts } => {
                    let inner = g.len() / parts.len();
                    for (j, &p) in parts.iter().enumerate() {
                        accumulate(&mut grads, p, &g[j * inner..(j + 1) * inner]);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut gx = take_or_zero(&mut grads, *x, self.nodes[*x].value.len());
                    for (&src, &v) in argmax.iter().zip(&g) {
                        gx[src] += v;
                    }
                    grads[*x] = Some(gx);
                }
                Op::Mask { x, mask } => {
                    let gx: Vec<f64> = g.iter().zip(mask).map(|(v, m)| v * m).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sum { x } => {
                    let n = self.nodes[*x].value.len();
                    accumulate(&mut grads, *x, &vec![g[0]; n]);
                }
                Op::Bce { p, dp } => {
                    let gp: Vec<f64> = dp.iter().map(|d| d * g[0]).collect();
                    accumulate(&mut grads, *p, &gp);
                }
            }
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }
}

fn take_or_zero(grads: &mut [Option<Vec<f64>>], i: usize, n: usize) -> Vec<f64> {
    grads[i].take().unwrap_or_else(|| vec![0.0; n])
}

fn accumulate(grads: &mut [Option<Vec<f64>>], i: usize, g: &[f64]) {
    match &mut grads[i] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[3, 3], |i| i as f64));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 9]);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let xv = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5 - 1.0);
        let yv = Tensor::from_fn(&[2, 3], |i| (i as f64).cos());
        let x = tape.leaf(xv.clone());
        let y = tape.leaf(yv.clone());
        let p = tape.hadamard(x, y).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &yv);
        assert_eq!(g.get(y).unwrap(), &xv);
    }

    #[test]
    fn second_backward_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let y = tape.scale(x, 3.0).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_and_detached_losses_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let mut other = Tape::new();
        let foreign = other.leaf(Tensor::scalar(1.0));
        assert!(matches!(tape.backward(foreign), Err(Error::MissingNode)));
        assert!(matches!(tape.sum(foreign), Err(Error::MissingNode)));
    }

    #[test]
    fn reused_nodes_accumulate() {
        // loss = sum(x∘x) → 2x
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let sq = tape.hadamard(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn unreachable_nodes_have_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let unused = tape.leaf(Tensor::scalar(5.0));
        let y = tape.scale(x, 2.0).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(unused).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[2.0]);
    }
}
