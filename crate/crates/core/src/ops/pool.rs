use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Non-overlapping max pooling (`kernel == stride`). Returns the output and,
/// for each output cell, the flat input index it was taken from.
pub fn max_pool2d(input: &Tensor, k: usize) -> Result<(Tensor, Vec<usize>)> {
    let s = input.shape();
    if k == 0 || !s.h().is_multiple_of(k) || !s.w().is_multiple_of(k) {
        return Err(Error::shape(
            "max_pool2d",
            format!("spatial size {}x{} not divisible by pool size {k}", s.h(), s.w()),
        ));
    }
    let (oh, ow) = (s.h() / k, s.w() / k);
    let out_shape = Shape::new(s.n(), s.c(), oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let x = input.data();
    for plane in 0..s.n() * s.c() {
        let base = plane * s.plane();
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * s.w() + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (oy * k + dy) * s.w() + ox * k + dx;
                        // strict comparison keeps the first row-major maximum
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(out_shape, out)?, argmax))
}

pub fn max_pool2d_backward(input_shape: Shape, argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let g = gx.data_mut();
    for (&i, &v) in argmax.iter().zip(grad_out.data()) {
        g[i] += v;
    }
    gx
}

/// Window bounds `[lo, hi)` along one axis for a centered window of radius `r`.
#[inline]
fn window(i: usize, r: usize, len: usize) -> (usize, usize) {
    (i.saturating_sub(r), (i + r + 1).min(len))
}

/// Stride-1 SAME average pooling with a `k × k` window (`k` odd). Each
/// output averages only the in-bounds cells of its window, so constant
/// inputs are reproduced exactly (the mean is taken around the center
/// value).
pub fn avg_pool2d_same(input: &Tensor, k: usize) -> Result<Tensor> {
    if k.is_multiple_of(2) {
        return Err(Error::shape("avg_pool2d_same", format!("window {k} must be odd")));
    }
    let s = input.shape();
    let r = k / 2;
    let (h, w) = (s.h(), s.w());
    let mut out = Tensor::zeros(s);
    let x = input.data();
    let y = out.data_mut();
    for plane in 0..s.n() * s.c() {
        let base = plane * s.plane();
        for i in 0..h {
            let (y0, y1) = window(i, r, h);
            for j in 0..w {
                let (x0, x1) = window(j, r, w);
                let center = x[base + i * w + j];
                let mut dev = 0.0;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        dev += x[base + yy * w + xx] - center;
                    }
                }
                let count = ((y1 - y0) * (x1 - x0)) as f64;
                y[base + i * w + j] = center + dev / count;
            }
        }
    }
    Ok(out)
}

pub fn avg_pool2d_same_backward(grad_out: &Tensor, k: usize) -> Tensor {
    let s = grad_out.shape();
    let r = k / 2;
    let (h, w) = (s.h(), s.w());
    let mut gx = Tensor::zeros(s);
    let g = grad_out.data();
    let gi = gx.data_mut();
    for plane in 0..s.n() * s.c() {
        let base = plane * s.plane();
        for i in 0..h {
            let (y0, y1) = window(i, r, h);
            for j in 0..w {
                let (x0, x1) = window(j, r, w);
                let share = g[base + i * w + j] / ((y1 - y0) * (x1 - x0)) as f64;
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        gi[base + yy * w + xx] += share;
                    }
                }
            }
        }
    }
    gx
}

/// Mean over non-overlapping `f × f` blocks. Not differentiated.
pub fn area_downsample(input: &Tensor, f: usize) -> Result<Tensor> {
    let s = input.shape();
    if f == 0 || !s.h().is_multiple_of(f) || !s.w().is_multiple_of(f) {
        return Err(Error::shape(
            "area_downsample",
            format!("spatial size {}x{} not divisible by {f}", s.h(), s.w()),
        ));
    }
    let (oh, ow) = (s.h() / f, s.w() / f);
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), oh, ow));
    let denom = (f * f) as f64;
    for n in 0..s.n() {
        for c in 0..s.c() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += input.at(n, c, oy * f + dy, ox * f + dx);
                        }
                    }
                    out.set(n, c, oy, ox, acc / denom);
                }
            }
        }
    }
    Ok(out)
}
