use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::TintModel;
use crate::params::{Forward, Mode};
use crate::tape::Tape;
use crate::tensor::{DType, Tensor};

/// Recorded in map metadata: the map is an input-gradient approximation,
/// not an attention rollout.
pub const SALIENCY_METHOD: &str = "input-gradient";

#[derive(Clone, Debug, PartialEq)]
pub struct Saliency {
    /// `[S, S]`, min-max normalized to `[0, 1]`.
    pub map: Tensor,
    /// The gradient magnitude was constant; the map is all zeros.
    pub degenerate: bool,
}

/// `|d y / d x|`, maximum over channels, for one preprocessed `[C, S, S]` image.
pub fn saliency(model: &TintModel, image: &Tensor) -> Result<Saliency> {
    let (c, h, w) = match *image.shape() {
        [c, h, w] => (c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                shape: image.shape().to_vec(),
                reason: "saliency expects one [C, S, S] image".into(),
            })
        }
    };
    let mut tape = Tape::new();
    let x = tape.param(image.to_dtype(model.dtype()).reshaped(&[1, c, h, w])?);
    let mut f = Forward::new(&mut tape, model.store(), Mode::Eval).frozen();
    let trace = model.forward_in(&mut f, x)?;
    let y = tape.sum_all(trace.pred)?;
    tape.backward(y)?;
    let g = tape.grad(x)?.expect("input is a parameter leaf");
    let plane = h * w;
    let mut mag = vec![0.0f64; plane];
    for ch in g.data().chunks_exact(plane) {
        for (m, &v) in mag.iter_mut().zip(ch) {
            *m = m.max(v.abs());
        }
    }
    let lo = mag.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi > lo);
    let data = if degenerate {
        vec![0.0; plane]
    } else {
        mag.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    Ok(Saliency {
        map: Tensor::new(vec![h, w], data, DType::F64)?,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub comments: Vec<String>,
    pub pixels: Vec<u8>,
}

/// Binary greyscale (P5) with maxval 255; values in `[0, 1]` are scaled.
pub fn write_pgm(path: impl AsRef<Path>, s: &Saliency) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (s.map.shape()[0], s.map.shape()[1]);
    let mut bytes = format!(
        "P5\n# method={SALIENCY_METHOD} degenerate={}\n{w} {h}\n255\n",
        s.degenerate
    )
    .into_bytes();
    bytes.extend(s.map.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Pgm> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Corrupt(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut comments = Vec::new();
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos >= bytes.len() {
            return Err(bad("truncated header"));
        }
        if bytes[pos] == b'#' {
            let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
            comments.push(String::from_utf8_lossy(&bytes[pos + 1..end]).trim().to_string());
            pos = end;
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit maxval is supported"));
    }
    let pixels = bytes.get(pos..).unwrap_or(&[]).to_vec();
    if pixels.len() != width * height {
        return Err(bad("raster size does not match header"));
    }
    Ok(Pgm {
        width,
        height,
        maxval: maxval as u16,
        comments,
        pixels,
    })
}
