//! Forward kernels (and the adjoint kernels the tape needs) on plain tensors.
//!
//! Layouts: images are `H×W×C`, sequences `T×H×W×C`, convolution kernels
//! `kh×kw×Cin×Cout`. Convolution is correlation (no kernel flip). All loops run
//! in a fixed order so results are bitwise reproducible.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Hadamard,
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn relu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        0.0
    }
}

impl Unary {
    pub fn eval(self, z: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(z),
            Unary::Tanh => z.tanh(),
            Unary::Relu => relu(z),
        }
    }

    /// Derivative expressed through the input `z` and output `y = f(z)`.
    pub(crate) fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn unary(x: &Tensor, f: Unary) -> Tensor {
    x.map(|z| f.eval(z))
}

pub fn binary(a: &Tensor, b: &Tensor, f: Binary) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            "elementwise",
            format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| match f {
            Binary::Add => x + y,
            Binary::Hadamard => x * y,
        })
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::dim(
            "matmul",
            format!("expected matrices, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner extents differ: lhs axis 1 = {k}, rhs axis 0 = {k2}"),
        ));
    }
    let mut out = vec![0.0; m * n];
    matmul_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(&[m, n], out)
}

/// out (m×n) += a (m×k) · b (k×n)
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_geometry(
    op: &'static str,
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    same: bool,
) -> Result<ConvGeometry> {
    if x.rank() != 3 {
        return Err(Error::dim(
            op,
            format!("input must be H×W×C, got {:?}", x.shape()),
        ));
    }
    if k.rank() != 4 {
        return Err(Error::dim(
            op,
            format!("kernel must be kh×kw×Cin×Cout, got {:?}", k.shape()),
        ));
    }
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, kc, cout) = (k.shape()[0], k.shape()[1], k.shape()[2], k.shape()[3]);
    if kc != cin {
        return Err(Error::dim(
            op,
            format!("input channel axis 2 = {cin} but kernel Cin axis 2 = {kc}"),
        ));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::dim(
                op,
                format!("bias length {} but kernel Cout axis 3 = {cout}", b.len()),
            ));
        }
    }
    let (pad_h, pad_w) = if same {
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Unsupported(format!(
                "{op} needs odd kernel extents, got {kh}×{kw}"
            )));
        }
        (kh / 2, kw / 2)
    } else {
        if kh > h {
            return Err(Error::dim(
                op,
                format!("kernel height axis 0 = {kh} exceeds input height axis 0 = {h}"),
            ));
        }
        if kw > w {
            return Err(Error::dim(
                op,
                format!("kernel width axis 1 = {kw} exceeds input width axis 1 = {w}"),
            ));
        }
        (0, 0)
    };
    Ok(ConvGeometry {
        h,
        w,
        cin,
        kh,
        kw,
        cout,
        pad_h,
        pad_w,
        ho: h + 2 * pad_h - kh + 1,
        wo: w + 2 * pad_w - kw + 1,
    })
}

/// Output-row range of kernel tap `d` for which the input row `y + d - pad` is in bounds.
#[inline]
fn tap_range(d: usize, pad: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(d);
    let hi = (n_in + pad).saturating_sub(d).min(n_out);
    (lo, hi.max(lo))
}

pub(crate) fn conv_forward(g: &ConvGeometry, x: &[f64], k: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let ConvGeometry {
        w, cin, kh, kw, cout, pad_h, pad_w, ho, wo, h,
    } = *g;
    let mut out = vec![0.0; ho * wo * cout];
    if let Some(b) = bias {
        for px in out.chunks_exact_mut(cout) {
            px.copy_from_slice(b);
        }
    }
    for dy in 0..kh {
        let (ylo, yhi) = tap_range(dy, pad_h, h, ho);
        for dx in 0..kw {
            let (xlo, xhi) = tap_range(dx, pad_w, w, wo);
            let ktap = &k[(dy * kw + dx) * cin * cout..(dy * kw + dx + 1) * cin * cout];
            for y in ylo..yhi {
                let iy = y + dy - pad_h;
                for xo in xlo..xhi {
                    let ix = xo + dx - pad_w;
                    let xin = &x[(iy * w + ix) * cin..(iy * w + ix + 1) * cin];
                    let o = &mut out[(y * wo + xo) * cout..(y * wo + xo + 1) * cout];
                    for (c, &v) in xin.iter().enumerate() {
                        let krow = &ktap[c * cout..(c + 1) * cout];
                        for (ov, &kv) in o.iter_mut().zip(krow) {
                            *ov += v * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, kernel and bias adjoints for an upstream gradient `gout`.
pub(crate) fn conv_backward(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    gx: Option<&mut [f64]>,
    gk: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let ConvGeometry {
        w, cin, kh, kw, cout, pad_h, pad_w, ho, wo, h,
    } = *g;
    if let Some(gb) = gb {
        for px in gout.chunks_exact(cout) {
            for (b, &v) in gb.iter_mut().zip(px) {
                *b += v;
            }
        }
    }
    let mut gx = gx;
    let mut gk = gk;
    for dy in 0..kh {
        let (ylo, yhi) = tap_range(dy, pad_h, h, ho);
        for dx in 0..kw {
            let (xlo, xhi) = tap_range(dx, pad_w, w, wo);
            let tap = (dy * kw + dx) * cin * cout..(dy * kw + dx + 1) * cin * cout;
            let ktap = &k[tap.clone()];
            for y in ylo..yhi {
                let iy = y + dy - pad_h;
                for xo in xlo..xhi {
                    let ix = xo + dx - pad_w;
                    let go = &gout[(y * wo + xo) * cout..(y * wo + xo + 1) * cout];
                    let xoff = (iy * w + ix) * cin;
                    if let Some(gx) = gx.as_deref_mut() {
                        let gxin = &mut gx[xoff..xoff + cin];
                        for (c, gv) in gxin.iter_mut().enumerate() {
                            let krow = &ktap[c * cout..(c + 1) * cout];
                            let mut s = 0.0;
                            for (&kv, &ov) in krow.iter().zip(go) {
                                s += kv * ov;
                            }
                            *gv += s;
                        }
                    }
                    if let Some(gk) = gk.as_deref_mut() {
                        let gktap = &mut gk[tap.clone()];
                        let xin = &x[xoff..xoff + cin];
                        for (c, &v) in xin.iter().enumerate() {
                            let grow = &mut gktap[c * cout..(c + 1) * cout];
                            for (gv, &ov) in grow.iter_mut().zip(go) {
                                *gv += v * ov;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv(op: &'static str, x: &Tensor, k: &Tensor, bias: Option<&Tensor>, same: bool) -> Result<Tensor> {
    let g = conv_geometry(op, x, k, bias, same)?;
    let out = conv_forward(&g, x.data(), k.data(), bias.map(Tensor::data));
    Tensor::new(&[g.ho, g.wo, g.cout], out)
}

/// Unpadded correlation: `H×W×Cin` with `kh×kw×Cin×Cout` gives `(H−kh+1)×(W−kw+1)×Cout`.
pub fn conv2d_valid(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    conv("conv2d_valid", x, kernel, bias, false)
}

/// Zero-padded correlation with odd kernels; spatial extents are preserved.
pub fn conv2d_same(x: &Tensor, kernel: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    conv("conv2d_same", x, kernel, bias, true)
}

/// 2×2/stride-2 max pooling applied to every timestep of a `T×H×W×C` sequence.
/// Ragged edges (odd extents) pool over whatever part of the window exists.
/// Returns the pooled tensor and, per output element, the flat index of the winner.
pub fn maxpool_time(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 4 {
        return Err(Error::dim(
            "maxpool_time",
            format!("input must be T×H×W×C, got {:?}", x.shape()),
        ));
    }
    let (t, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(t * ho * wo * c);
    let mut arg = Vec::with_capacity(t * ho * wo * c);
    let xd = x.data();
    for s in 0..t {
        let base = s * h * w * c;
        for y in 0..ho {
            for xo in 0..wo {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for iy in 2 * y..(2 * y + 2).min(h) {
                        for ix in 2 * xo..(2 * xo + 2).min(w) {
                            let i = base + (iy * w + ix) * c + ch;
                            if best_i == usize::MAX || xd[i] > best {
                                best = xd[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    arg.push(best_i);
                }
            }
        }
    }
    Ok((Tensor::new(&[t, ho, wo, c], out)?, arg))
}

pub fn flatten(x: &Tensor) -> Tensor {
    Tensor::vector(x.data().to_vec())
}

pub(crate) fn concat_layout(xs: &[&Tensor], axis: usize) -> Result<(Vec<usize>, usize, Vec<usize>)> {
    let first = xs
        .first()
        .ok_or_else(|| Error::dim("concat", "no operands"))?;
    if axis >= first.rank() {
        return Err(Error::dim(
            "concat",
            format!("axis {axis} out of range for shape {:?}", first.shape()),
        ));
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = 0;
    let mut extents = Vec::with_capacity(xs.len());
    for x in xs {
        if x.rank() != first.rank() {
            return Err(Error::dim(
                "concat",
                format!("rank mismatch: {:?} vs {:?}", first.shape(), x.shape()),
            ));
        }
        for (a, (&p, &q)) in first.shape().iter().zip(x.shape()).enumerate() {
            if a != axis && p != q {
                return Err(Error::dim(
                    "concat",
                    format!("axis {a} differs: {p} vs {q}"),
                ));
            }
        }
        shape[axis] += x.shape()[axis];
        extents.push(x.shape()[axis]);
    }
    let inner: usize = first.shape()[axis + 1..].iter().product();
    Ok((shape, inner, extents))
}

/// Concatenates along an existing axis; all other extents must agree.
pub fn concat(xs: &[&Tensor], axis: usize) -> Result<Tensor> {
    let (shape, inner, extents) = concat_layout(xs, axis)?;
    let outer: usize = shape[..axis].iter().product();
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for (x, &e) in xs.iter().zip(&extents) {
            let chunk = e * inner;
            data.extend_from_slice(&x.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::new(&shape, data)
}

/// Channels `start..start+len` of the last axis.
pub fn slice_last(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let c = *x.shape().last().unwrap();
    if len == 0 || start + len > c {
        return Err(Error::dim(
            "slice_last",
            format!("range {start}..{} outside last axis of extent {c}", start + len),
        ));
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    let data = x
        .data()
        .chunks_exact(c)
        .flat_map(|row| row[start..start + len].iter().copied())
        .collect();
    Tensor::new(&shape, data)
}

/// Sub-tensor at `index` along the leading axis.
pub fn select(x: &Tensor, index: usize) -> Result<Tensor> {
    if x.rank() < 2 || index >= x.shape()[0] {
        return Err(Error::dim(
            "select",
            format!("index {index} invalid for shape {:?}", x.shape()),
        ));
    }
    let inner = x.len() / x.shape()[0];
    Tensor::new(
        &x.shape()[1..],
        x.data()[index * inner..(index + 1) * inner].to_vec(),
    )
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs.first().ok_or_else(|| Error::dim("stack", "no operands"))?;
    let mut data = Vec::with_capacity(first.len() * xs.len());
    for x in xs {
        if x.shape() != first.shape() {
            return Err(Error::dim(
                "stack",
                format!("shapes {:?} and {:?} differ", first.shape(), x.shape()),
            ));
        }
        data.extend_from_slice(x.data());
    }
    let mut shape = vec![xs.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn valid_conv_hand_sum() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0]);
        let y = conv2d_valid(&x, &k, Some(&Tensor::vector(vec![0.0]))).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn valid_conv_identity_kernel() {
        let x = Tensor::from_fn(&[4, 5, 1], |i| (i as f64).sin());
        let k = t(&[1, 1, 1, 1], &[1.0]);
        assert_eq!(conv2d_valid(&x, &k, None).unwrap(), x);
    }

    #[test]
    fn valid_conv_128_shape() {
        let x = Tensor::zeros(&[128, 128, 3]);
        let k = Tensor::zeros(&[3, 3, 3, 4]);
        let y = conv2d_valid(&x, &k, Some(&Tensor::zeros(&[4]))).unwrap();
        assert_eq!(y.shape(), &[126, 126, 4]);
    }

    #[test]
    fn conv_shape_errors_name_axes() {
        let x = Tensor::zeros(&[4, 4, 2]);
        let k = Tensor::zeros(&[3, 3, 3, 1]);
        let e = conv2d_valid(&x, &k, None).unwrap_err().to_string();
        assert!(e.contains("Cin"), "{e}");
        let big = Tensor::zeros(&[5, 3, 2, 1]);
        let e = conv2d_valid(&x, &big, None).unwrap_err().to_string();
        assert!(e.contains("height"), "{e}");
    }

    #[test]
    fn same_conv_ones() {
        let x = Tensor::full(&[3, 3, 1], 1.0);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d_same(&x, &k, Some(&Tensor::vector(vec![0.0]))).unwrap();
        assert_eq!(y.shape(), &[3, 3, 1]);
        assert_eq!(y.at(&[1, 1, 0]), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(&[r, c, 0]), 4.0);
        }
        assert_eq!(y.at(&[0, 1, 0]), 6.0);
    }

    #[test]
    fn same_conv_shapes_and_zero_kernel() {
        let x = Tensor::from_fn(&[4, 4, 2], |i| i as f64);
        let k = Tensor::zeros(&[3, 3, 2, 3]);
        let b = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let y = conv2d_same(&x, &k, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[4, 4, 3]);
        for px in y.data().chunks(3) {
            assert_eq!(px, b.data());
        }
        let even = Tensor::zeros(&[2, 3, 2, 1]);
        assert!(matches!(
            conv2d_same(&x, &even, None),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn matmul_small_cases() {
        let id = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let b = Tensor::from_fn(&[3, 2], |i| i as f64 - 2.5);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let ones_row = Tensor::full(&[1, 3], 1.0);
        let ones_col = Tensor::full(&[3, 1], 1.0);
        assert_eq!(matmul(&ones_row, &ones_col).unwrap().data(), &[3.0]);
        assert!(matmul(&ones_row, &ones_row).is_err());
    }

    #[test]
    fn pooling_extents_and_values() {
        let x = t(&[1, 2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool_time(&x).unwrap().0.data(), &[4.0]);
        let (y, _) = maxpool_time(&Tensor::zeros(&[5, 126, 126, 4])).unwrap();
        assert_eq!(y.shape(), &[5, 63, 63, 4]);
        let (y, _) = maxpool_time(&Tensor::zeros(&[5, 61, 61, 8])).unwrap();
        assert_eq!(y.shape(), &[5, 31, 31, 8]);
        let odd = t(&[1, 3, 1, 1], &[1.0, -2.0, 7.0]);
        assert_eq!(maxpool_time(&odd).unwrap().0.data(), &[1.0, 7.0]);
    }

    #[test]
    fn concat_and_flatten() {
        let a = Tensor::vector(vec![1.0; 4]);
        let b = Tensor::vector(vec![2.0; 4]);
        assert_eq!(concat(&[&a, &b], 0).unwrap().shape(), &[8]);
        let x = Tensor::zeros(&[5, 7, 7, 16]);
        assert_eq!(flatten(&x).len(), 3920);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let n = t(&[2, 1], &[9.0, 8.0]);
        assert_eq!(concat(&[&m, &n], 1).unwrap().data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        assert!(concat(&[&m, &Tensor::zeros(&[3, 1])], 1).is_err());
    }

    #[test]
    fn elementwise_basics() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(relu(-3.0), 0.0);
        assert_eq!(relu(3.0), 3.0);
        let a = Tensor::vector(vec![1.0, 2.0]);
        assert!(binary(&a, &Tensor::vector(vec![1.0]), Binary::Add).is_err());
    }

    #[test]
    fn tanh_matches_series_reference() {
        // tanh(x) = 1 - 2/(e^{2x}+1) with e^{2x} from its Maclaurin series
        fn exp_series(x: f64) -> f64 {
            let mut term = 1.0;
            let mut sum = 1.0;
            for k in 1..60 {
                term *= x / k as f64;
                sum += term;
            }
            sum
        }
        for x in [-1.0, 0.0, 1.0] {
            let reference = 1.0 - 2.0 / (exp_series(2.0 * x) + 1.0);
            assert!((Unary::Tanh.eval(x) - reference).abs() < 1e-12);
        }
    }
}
