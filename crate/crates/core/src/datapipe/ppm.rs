//! Binary PPM (P6, 8-bit) frames as `H×W×3` tensors in [0, 1].

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn decode_ppm(bytes: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |msg: String| Error::Format(format!("{}: {msg}", origin.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII".into()))?);
    }
    if fields[0] != "P6" {
        return Err(bad(format!("expected P6 magic, found {:?}", fields[0])));
    }
    let num = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(format!("bad {what} {s:?}")));
    let (w, h, maxval) = (num(fields[1], "width")?, num(fields[2], "height")?, num(fields[3], "maxval")?);
    if maxval != 255 {
        return Err(Error::Unsupported(format!("{}: only 8-bit PPM (maxval 255) is read, found {maxval}", origin.display())));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let need = w * h * 3;
    if w == 0 || h == 0 || bytes.len() < pos + need {
        return Err(bad(format!("raster holds {} bytes, {w}×{h} needs {need}", bytes.len().saturating_sub(pos))));
    }
    let data = bytes[pos..pos + need].iter().map(|&b| b as f64 / 255.0).collect();
    Tensor::new(&[h, w, 3], data)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, path)
}

pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    if image.rank() != 3 || image.shape()[2] != 3 {
        return Err(Error::dim("write_ppm", format!("expected H×W×3, got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

/// Bilinear resampling with pixel-centre alignment and edge clamping.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if image.rank() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::dim(
            "resize_bilinear",
            format!("expected H×W×C input and positive output, got {:?} → {out_h}×{out_w}", image.shape()),
        ));
    }
    let (h, w, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let src = |o: usize, n_out: usize, n_in: usize| {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let d = image.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = src(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, fx) = src(ox, out_w, w);
            for ch in 0..c {
                let at = |y: usize, x: usize| d[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[out_h, out_w, c], out)
}
