//! Per-image transforms on `[C, H, W]` tensors.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest training-time rotation, in degrees.
pub const MAX_ROTATION_DEG: f64 = 20.0;
pub const FLIP_PROB: f64 = 0.5;

fn dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: "expected [C, H, W]".into(),
        }),
    }
}

/// `(x - mean_c) / std_c` per channel; non-finite results become 0.
pub fn clean_and_normalize(img: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if mean.len() != c || std.len() != c {
        return Err(Error::Data(format!(
            "image has {c} channels but {} means / {} stds were given",
            mean.len(),
            std.len()
        )));
    }
    let plane = h * w;
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let ch = i / plane;
            let v = (x - mean[ch]) / std[ch];
            if v.is_finite() {
                v
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(img.shape().to_vec(), data, img.dtype())
}

/// Bilinear sample of one plane at fractional `(y, x)`; taps outside the
/// plane read as zero.
fn sample_plane(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let tap = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    let mut acc = 0.0;
    for (dy, wy) in [(0.0, 1.0 - fy), (1.0, fy)] {
        for (dx, wx) in [(0.0, 1.0 - fx), (1.0, fx)] {
            let wgt = wy * wx;
            if wgt != 0.0 {
                acc += wgt * tap(y0 + dy, x0 + dx);
            }
        }
    }
    acc
}

/// Corner-aligned bilinear resize to `size x size`.
pub fn resize_bilinear(img: &Tensor, size: usize) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if size < 2 || h < 2 || w < 2 {
        return Err(Error::InvalidShape {
            shape: img.shape().to_vec(),
            reason: format!("bilinear resize to {size} needs extents of at least 2"),
        });
    }
    if h == size && w == size {
        return Ok(img.clone());
    }
    let sy = (h - 1) as f64 / (size - 1) as f64;
    let sx = (w - 1) as f64 / (size - 1) as f64;
    let mut out = Vec::with_capacity(c * size * size);
    for plane in img.data().chunks_exact(h * w) {
        for i in 0..size {
            // Clamp guards the last row against rounding past the edge.
            let y = (i as f64 * sy).min((h - 1) as f64);
            for j in 0..size {
                let x = (j as f64 * sx).min((w - 1) as f64);
                out.push(sample_plane(plane, h, w, y, x));
            }
        }
    }
    Tensor::new(vec![c, size, size], out, img.dtype())
}

/// Rotates counter-clockwise (as displayed, rows growing downward) about the
/// image centre by `degrees`. Uncovered pixels are 0.
pub fn rotate(img: &Tensor, degrees: f64) -> Result<Tensor> {
    let (c, h, w) = dims(img)?;
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    let (s, co) = degrees.to_radians().sin_cos();
    let cy = (h - 1) as f64 / 2.0;
    let cx = (w - 1) as f64 / 2.0;
    let mut out = Vec::with_capacity(c * h * w);
    for plane in img.data().chunks_exact(h * w) {
        for r in 0..h {
            // Upward-positive offsets so the rotation is the usual one.
            let up = cy - r as f64;
            for col in 0..w {
                let dx = col as f64 - cx;
                let src_x = cx + dx * co + up * s;
                let src_up = -dx * s + up * co;
                let src_y = cy - src_up;
                out.push(sample_plane(plane, h, w, src_y, src_x));
            }
        }
    }
    Tensor::new(img.shape().to_vec(), out, img.dtype())
}

pub fn flip_horizontal(img: &Tensor) -> Result<Tensor> {
    let (_, _, w) = dims(img)?;
    let mut out = img.data().to_vec();
    for row in out.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::new(img.shape().to_vec(), out, img.dtype())
}

pub fn flip_vertical(img: &Tensor) -> Result<Tensor> {
    let (_, h, w) = dims(img)?;
    let mut out = Vec::with_capacity(img.numel());
    for plane in img.data().chunks_exact(h * w) {
        for r in (0..h).rev() {
            out.extend_from_slice(&plane[r * w..(r + 1) * w]);
        }
    }
    Tensor::new(img.shape().to_vec(), out, img.dtype())
}

/// Rotation by an angle drawn uniformly from `[0, MAX_ROTATION_DEG]`.
pub fn random_rotation<R: Rng>(img: &Tensor, rng: &mut R) -> Result<(Tensor, f64)> {
    let angle = rng.random_range(0.0..=MAX_ROTATION_DEG);
    Ok((rotate(img, angle)?, angle))
}

/// Independent horizontal and vertical flips, each with probability 1/2.
pub fn random_flip<R: Rng>(img: &Tensor, rng: &mut R) -> Result<(Tensor, bool, bool)> {
    let h = rng.random_bool(FLIP_PROB);
    let v = rng.random_bool(FLIP_PROB);
    let mut out = img.clone();
    if h {
        out = flip_horizontal(&out)?;
    }
    if v {
        out = flip_vertical(&out)?;
    }
    Ok((out, h, v))
}
