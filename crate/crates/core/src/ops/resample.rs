//! Bilinear (align-corners-false) and nearest-neighbour resampling.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Per-output-index source taps `(lo, hi, frac)` along one axis.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            let frac = if hi == lo { 0.0 } else { src - lo as f64 };
            (lo, hi, frac)
        })
        .collect()
}

fn check_resize(input: Shape, out_h: usize, out_w: usize, op: &'static str) -> Result<()> {
    if input.h() == 0 || input.w() == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::shape(op, format!("cannot resize {input} to {out_h}x{out_w}")));
    }
    Ok(())
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + t * (b - a)
}

pub fn bilinear_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = input.shape();
    check_resize(s, out_h, out_w, "bilinear_resize")?;
    let ty = bilinear_taps(s.h(), out_h);
    let tx = bilinear_taps(s.w(), out_w);
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), out_h, out_w));
    let x = input.data();
    let y = out.data_mut();
    for plane in 0..s.n() * s.c() {
        let ib = plane * s.plane();
        let ob = plane * out_h * out_w;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = ib + y0 * s.w();
            let r1 = ib + y1 * s.w();
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = lerp(x[r0 + x0], x[r0 + x1], fx);
                let bot = lerp(x[r1 + x0], x[r1 + x1], fx);
                y[ob + oy * out_w + ox] = lerp(top, bot, fy);
            }
        }
    }
    Ok(out)
}

pub fn bilinear_resize_backward(input_shape: Shape, grad_out: &Tensor) -> Tensor {
    let s = input_shape;
    let (out_h, out_w) = (grad_out.shape().h(), grad_out.shape().w());
    let ty = bilinear_taps(s.h(), out_h);
    let tx = bilinear_taps(s.w(), out_w);
    let mut gx = Tensor::zeros(s);
    let g = grad_out.data();
    let gi = gx.data_mut();
    for plane in 0..s.n() * s.c() {
        let ib = plane * s.plane();
        let ob = plane * out_h * out_w;
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[ob + oy * out_w + ox];
                gi[ib + y0 * s.w() + x0] += v * (1.0 - fy) * (1.0 - fx);
                gi[ib + y0 * s.w() + x1] += v * (1.0 - fy) * fx;
                gi[ib + y1 * s.w() + x0] += v * fy * (1.0 - fx);
                gi[ib + y1 * s.w() + x1] += v * fy * fx;
            }
        }
    }
    gx
}

/// Nearest-neighbour resize, sampling at pixel centers. Not differentiated.
pub fn nearest_resize(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = input.shape();
    check_resize(s, out_h, out_w, "nearest_resize")?;
    let pick = |i: usize, out_len: usize, in_len: usize| {
        (((i as f64 + 0.5) * in_len as f64 / out_len as f64).floor() as usize).min(in_len - 1)
    };
    let mut out = Tensor::zeros(Shape::new(s.n(), s.c(), out_h, out_w));
    for n in 0..s.n() {
        for c in 0..s.c() {
            for oy in 0..out_h {
                let iy = pick(oy, out_h, s.h());
                for ox in 0..out_w {
                    out.set(n, c, oy, ox, input.at(n, c, iy, pick(ox, out_w, s.w())));
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(Shape::new(1, 2, 5, 7), 0.0, 1.0, &mut rng);
        assert_eq!(bilinear_resize(&x, 5, 7).unwrap(), x);
        assert_eq!(nearest_resize(&x, 5, 7).unwrap(), x);
    }

    #[test]
    fn constants_survive_any_factor() {
        let x = Tensor::full(Shape::new(1, 1, 3, 4), 0.3);
        for f in 1..5 {
            let y = bilinear_resize(&x, 3 * f, 4 * f).unwrap();
            assert!(y.data().iter().all(|&v| v == 0.3));
        }
    }

    #[test]
    fn doubling_uses_quarter_offsets() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let y = bilinear_resize(&x, 1, 4).unwrap();
        // centers map to -0.25 (clamped), 0.25, 0.75, 1.25 (clamped)
        assert_eq!(y.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn nearest_downsample_picks_centers() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(nearest_resize(&x, 1, 2).unwrap().data(), &[2.0, 4.0]);
    }
}
