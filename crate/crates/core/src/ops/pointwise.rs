use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Per-pixel softmax over exactly two channels, max-shifted.
pub fn pixel_softmax2(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.c() != 2 {
        return Err(Error::shape(
            "pixel_softmax2",
            format!("expected 2 channels, got {}", s.c()),
        ));
    }
    let plane = s.plane();
    let mut out = Tensor::zeros(s);
    let x = logits.data();
    let y = out.data_mut();
    for n in 0..s.n() {
        let b = n * 2 * plane;
        for i in 0..plane {
            let (l0, l1) = (x[b + i], x[b + plane + i]);
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            let z = e0 + e1;
            y[b + i] = e0 / z;
            y[b + plane + i] = e1 / z;
        }
    }
    Ok(out)
}

/// Vector-Jacobian product of `pixel_softmax2` given its output `probs`.
pub fn pixel_softmax2_backward(probs: &Tensor, grad_out: &Tensor) -> Tensor {
    let s = probs.shape();
    let plane = s.plane();
    let mut gx = Tensor::zeros(s);
    let p = probs.data();
    let g = grad_out.data();
    let gi = gx.data_mut();
    for n in 0..s.n() {
        let b = n * 2 * plane;
        for i in 0..plane {
            let (p0, p1) = (p[b + i], p[b + plane + i]);
            let (g0, g1) = (g[b + i], g[b + plane + i]);
            let dot = p0 * g0 + p1 * g1;
            gi[b + i] = p0 * (g0 - dot);
            gi[b + plane + i] = p1 * (g1 - dot);
        }
    }
    gx
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SobelAxis {
    /// Horizontal derivative (responds to vertical edges).
    X,
    Y,
}

// Cross-correlation taps (dy, dx, weight), ordered in cancelling pairs so a
// flat neighbourhood sums to exactly zero.
const SOBEL_X: [(isize, isize, f64); 6] = [
    (-1, -1, -1.0),
    (-1, 1, 1.0),
    (0, -1, -2.0),
    (0, 1, 2.0),
    (1, -1, -1.0),
    (1, 1, 1.0),
];
const SOBEL_Y: [(isize, isize, f64); 6] = [
    (-1, -1, -1.0),
    (1, -1, 1.0),
    (-1, 0, -2.0),
    (1, 0, 2.0),
    (-1, 1, -1.0),
    (1, 1, 1.0),
];

#[inline]
fn clamp(i: usize, d: isize, len: usize) -> usize {
    (i as isize + d).clamp(0, len as isize - 1) as usize
}

/// 3×3 Sobel derivative per channel with replicate border.
pub fn sobel(input: &Tensor, axis: SobelAxis) -> Tensor {
    let s = input.shape();
    let taps = match axis {
        SobelAxis::X => &SOBEL_X,
        SobelAxis::Y => &SOBEL_Y,
    };
    let (h, w) = (s.h(), s.w());
    let mut out = Tensor::zeros(s);
    let x = input.data();
    let y = out.data_mut();
    for plane in 0..s.n() * s.c() {
        let b = plane * s.plane();
        for i in 0..h {
            for j in 0..w {
                y[b + i * w + j] = taps
                    .iter()
                    .map(|&(dy, dx, k)| k * x[b + clamp(i, dy, h) * w + clamp(j, dx, w)])
                    .sum();
            }
        }
    }
    out
}

pub fn sobel_backward(grad_out: &Tensor, axis: SobelAxis) -> Tensor {
    let s = grad_out.shape();
    let taps = match axis {
        SobelAxis::X => &SOBEL_X,
        SobelAxis::Y => &SOBEL_Y,
    };
    let (h, w) = (s.h(), s.w());
    let mut gx = Tensor::zeros(s);
    let g = grad_out.data();
    let gi = gx.data_mut();
    for plane in 0..s.n() * s.c() {
        let b = plane * s.plane();
        for i in 0..h {
            for j in 0..w {
                let v = g[b + i * w + j];
                for &(dy, dx, k) in taps {
                    gi[b + clamp(i, dy, h) * w + clamp(j, dx, w)] += k * v;
                }
            }
        }
    }
    gx
}

/// Sobel gradient magnitude `√(gx² + gy²)`.
pub fn sobel_magnitude(input: &Tensor) -> Tensor {
    let gx = sobel(input, SobelAxis::X);
    let gy = sobel(input, SobelAxis::Y);
    gx.zip_map(&gy, |a, b| a.hypot(b)).expect("same shape")
}

/// Channel-mean of an `[N, C, H, W]` tensor, giving `[N, 1, H, W]`.
pub fn channel_mean(input: &Tensor) -> Tensor {
    let s = input.shape();
    let plane = s.plane();
    let mut out = Tensor::zeros(Shape::new(s.n(), 1, s.h(), s.w()));
    for n in 0..s.n() {
        let dst = &mut out.data_mut()[n * plane..(n + 1) * plane];
        for c in 0..s.c() {
            let src = &input.data()[(n * s.c() + c) * plane..(n * s.c() + c + 1) * plane];
            for (d, v) in dst.iter_mut().zip(src) {
                *d += v;
            }
        }
        dst.iter_mut().for_each(|d| *d /= s.c() as f64);
    }
    out
}
