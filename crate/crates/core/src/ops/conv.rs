//! 2-D convolution and transposed convolution via im2col + GEMM.
//!
//! Weights follow the usual layouts: `[Cout, Cin, kH, kW]` for `conv2d`
//! and `[Cin, Cout, kH, kW]` for `conv2d_transpose`, so that a transposed
//! convolution with weight `w` is the adjoint of `conv2d` with the same `w`.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// `⌊k/2⌋` on each side; odd kernels only.
    Same,
    Valid,
    Explicit([usize; 2]),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 2],
    pub stride: [usize; 2],
    pub padding: Padding,
    /// Extra rows/cols appended to a transposed convolution's output.
    pub output_padding: [usize; 2],
}

impl ConvSpec {
    pub fn new(k: usize, stride: usize, padding: Padding) -> Self {
        ConvSpec {
            kernel: [k, k],
            stride: [stride, stride],
            padding,
            output_padding: [0, 0],
        }
    }

    pub fn same(k: usize, stride: usize) -> Self {
        Self::new(k, stride, Padding::Same)
    }

    pub fn valid(k: usize) -> Self {
        Self::new(k, 1, Padding::Valid)
    }

    pub fn with_output_padding(mut self, op: usize) -> Self {
        self.output_padding = [op, op];
        self
    }

    pub fn resolved_padding(&self) -> Result<[usize; 2]> {
        if self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::shape(
                "conv_spec",
                format!("kernel {:?} and stride {:?} must be positive", self.kernel, self.stride),
            ));
        }
        match self.padding {
            Padding::Valid => Ok([0, 0]),
            Padding::Explicit(p) => Ok(p),
            Padding::Same => {
                if self.kernel.iter().any(|k| k % 2 == 0) {
                    return Err(Error::shape(
                        "conv_spec",
                        format!("SAME padding needs odd kernels, got {:?}", self.kernel),
                    ));
                }
                Ok([self.kernel[0] / 2, self.kernel[1] / 2])
            }
        }
    }

    /// Output spatial size of a forward convolution over an `h × w` input.
    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.resolved_padding()?;
        let dim = |size: usize, axis: usize, name: &str| -> Result<usize> {
            let padded = size + 2 * p[axis];
            if padded < self.kernel[axis] {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "kernel {name} {} exceeds padded input {name} {padded}",
                        self.kernel[axis]
                    ),
                ));
            }
            Ok((padded - self.kernel[axis]) / self.stride[axis] + 1)
        };
        Ok((dim(h, 0, "height")?, dim(w, 1, "width")?))
    }

    /// Output spatial size of a transposed convolution over an `h × w` input.
    pub fn transpose_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.resolved_padding()?;
        for axis in 0..2 {
            if self.output_padding[axis] >= self.stride[axis] {
                return Err(Error::shape(
                    "conv2d_transpose",
                    format!(
                        "output_padding {:?} must be smaller than stride {:?}",
                        self.output_padding, self.stride
                    ),
                ));
            }
        }
        let dim = |size: usize, axis: usize, name: &str| -> Result<usize> {
            if size == 0 {
                return Err(Error::shape("conv2d_transpose", format!("empty input {name}")));
            }
            let full = (size - 1) * self.stride[axis] + self.kernel[axis] + self.output_padding[axis];
            full.checked_sub(2 * p[axis]).filter(|&v| v > 0).ok_or_else(|| {
                Error::shape(
                    "conv2d_transpose",
                    format!("negative output {name}: padding {} too large", p[axis]),
                )
            })
        };
        Ok((dim(h, 0, "height")?, dim(w, 1, "width")?))
    }
}

/// Geometry shared by im2col and col2im: an image of `channels × img` is
/// scanned by a kernel producing `out` positions.
#[derive(Clone, Copy, Debug)]
struct Patch {
    channels: usize,
    img: [usize; 2],
    out: [usize; 2],
    kernel: [usize; 2],
    stride: [usize; 2],
    pad: [usize; 2],
}

impl Patch {
    fn rows(&self) -> usize {
        self.channels * self.kernel[0] * self.kernel[1]
    }

    fn cols(&self) -> usize {
        self.out[0] * self.out[1]
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1] && self.stride == [1, 1] && self.pad == [0, 0]
    }

    /// Unfolds every kernel window into one column; out-of-bounds taps read 0.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let [ih, iw] = self.img;
        let [oh, ow] = self.out;
        let [kh, kw] = self.kernel;
        let [sh, sw] = self.stride;
        let [ph, pw] = self.pad;
        let ncols = oh * ow;
        for c in 0..self.channels {
            let plane = &img[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= ih as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * iw..(iy as usize + 1) * iw];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            *v = if ix < 0 || ix >= iw as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of `im2col`: scatter-adds columns back into the image.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let [ih, iw] = self.img;
        let [oh, ow] = self.out;
        let [kh, kw] = self.kernel;
        let [sh, sw] = self.stride;
        let [ph, pw] = self.pad;
        let ncols = oh * ow;
        for c in 0..self.channels {
            let plane = &mut img[c * ih * iw..(c + 1) * ih * iw];
            for ky in 0..kh {
                for kx in 0..kw {
                    let row = (c * kh + ky) * kw + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..oh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy >= ih as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * iw..(iy as usize + 1) * iw];
                        for (ox, &v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix >= 0 && ix < iw as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c = op(a) · op(b) + beta · c`, all row-major. `a` is `m×k` (or `k×m`
/// when `ta`), `b` is `k×n` (or `n×k` when `tb`), `c` is `m×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover every index reachable with these dimensions
    // and strides (checked above), and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_bias(bias: &Tensor, channels: usize, op: &'static str) -> Result<()> {
    if bias.numel() != channels {
        return Err(Error::shape(
            op,
            format!("bias has {} values, expected {channels} output channels", bias.numel()),
        ));
    }
    Ok(())
}

fn add_bias(out: &mut Tensor, bias: &Tensor) {
    let s = out.shape();
    let plane = s.plane();
    let b = bias.data();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let v = b[i % s.c()];
        if v != 0.0 {
            chunk.iter_mut().for_each(|x| *x += v);
        }
    }
}

fn bias_grad(grad_out: &Tensor) -> Tensor {
    let s = grad_out.shape();
    let mut gb = vec![0.0; s.c()];
    for (i, chunk) in grad_out.data().chunks(s.plane()).enumerate() {
        gb[i % s.c()] += chunk.iter().sum::<f64>();
    }
    Tensor::from_vec(Shape::new(1, s.c(), 1, 1), gb).expect("bias length")
}

fn conv_patch(input: Shape, weight: Shape, spec: &ConvSpec) -> Result<(Patch, usize)> {
    let [cout, cin, kh, kw] = weight.dims();
    if input.c() != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input channels {} != weight input channels {cin}", input.c()),
        ));
    }
    if [kh, kw] != spec.kernel {
        return Err(Error::shape(
            "conv2d",
            format!("weight kernel {kh}x{kw} != spec kernel {:?}", spec.kernel),
        ));
    }
    let (oh, ow) = spec.conv_output(input.h(), input.w())?;
    let patch = Patch {
        channels: cin,
        img: [input.h(), input.w()],
        out: [oh, ow],
        kernel: spec.kernel,
        stride: spec.stride,
        pad: spec.resolved_padding()?,
    };
    Ok((patch, cout))
}

pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (patch, cout) = conv_patch(input.shape(), weight.shape(), spec)?;
    check_bias(bias, cout, "conv2d")?;
    let n = input.shape().n();
    let [oh, ow] = patch.out;
    let mut out = Tensor::zeros(Shape::new(n, cout, oh, ow));
    let in_len = patch.channels * patch.img[0] * patch.img[1];
    let out_len = cout * oh * ow;
    let mut cols = vec![
        0.0;
        if patch.is_pointwise() {
            0
        } else {
            patch.rows() * patch.cols()
        }
    ];
    for b in 0..n {
        let x = &input.data()[b * in_len..(b + 1) * in_len];
        let src = if patch.is_pointwise() {
            x
        } else {
            patch.im2col(x, &mut cols);
            &cols
        };
        let y = &mut out.data_mut()[b * out_len..(b + 1) * out_len];
        gemm(
            false,
            false,
            cout,
            patch.cols(),
            patch.rows(),
            weight.data(),
            src,
            0.0,
            y,
        );
    }
    add_bias(&mut out, bias);
    Ok(out)
}

/// Gradients of `conv2d` with respect to `(input, weight, bias)`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (patch, cout) = conv_patch(input.shape(), weight.shape(), spec)?;
    let n = input.shape().n();
    let [oh, ow] = patch.out;
    if grad_out.shape() != Shape::new(n, cout, oh, ow) {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad shape {} != output shape {:?}",
                grad_out.shape(),
                [n, cout, oh, ow]
            ),
        ));
    }
    let in_len = patch.channels * patch.img[0] * patch.img[1];
    let out_len = cout * oh * ow;
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut cols = vec![0.0; patch.rows() * patch.cols()];
    for b in 0..n {
        let x = &input.data()[b * in_len..(b + 1) * in_len];
        let g = &grad_out.data()[b * out_len..(b + 1) * out_len];
        if patch.is_pointwise() {
            gemm(false, true, cout, patch.rows(), patch.cols(), g, x, 1.0, gw.data_mut());
            let gxb = &mut gx.data_mut()[b * in_len..(b + 1) * in_len];
            gemm(
                true,
                false,
                patch.rows(),
                patch.cols(),
                cout,
                weight.data(),
                g,
                0.0,
                gxb,
            );
        } else {
            patch.im2col(x, &mut cols);
            gemm(
                false,
                true,
                cout,
                patch.rows(),
                patch.cols(),
                g,
                &cols,
                1.0,
                gw.data_mut(),
            );
            gemm(
                true,
                false,
                patch.rows(),
                patch.cols(),
                cout,
                weight.data(),
                g,
                0.0,
                &mut cols,
            );
            patch.col2im(&cols, &mut gx.data_mut()[b * in_len..(b + 1) * in_len]);
        }
    }
    Ok((gx, gw, bias_grad(grad_out)))
}

fn transpose_patch(input: Shape, weight: Shape, spec: &ConvSpec) -> Result<(Patch, usize)> {
    let [cin, cout, kh, kw] = weight.dims();
    if input.c() != cin {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("input channels {} != weight input channels {cin}", input.c()),
        ));
    }
    if [kh, kw] != spec.kernel {
        return Err(Error::shape(
            "conv2d_transpose",
            format!("weight kernel {kh}x{kw} != spec kernel {:?}", spec.kernel),
        ));
    }
    let (oh, ow) = spec.transpose_output(input.h(), input.w())?;
    // The patch describes the forward convolution whose adjoint this is:
    // it scans the (larger) output image and lands on the input grid.
    let patch = Patch {
        channels: cout,
        img: [oh, ow],
        out: [input.h(), input.w()],
        kernel: spec.kernel,
        stride: spec.stride,
        pad: spec.resolved_padding()?,
    };
    Ok((patch, cout))
}

pub fn conv2d_transpose(input: &Tensor, weight: &Tensor, bias: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    let (patch, cout) = transpose_patch(input.shape(), weight.shape(), spec)?;
    check_bias(bias, cout, "conv2d_transpose")?;
    let s = input.shape();
    let [oh, ow] = patch.img;
    let mut out = Tensor::zeros(Shape::new(s.n(), cout, oh, ow));
    let in_len = s.c() * s.plane();
    let out_len = cout * oh * ow;
    let mut cols = vec![0.0; patch.rows() * patch.cols()];
    for b in 0..s.n() {
        let x = &input.data()[b * in_len..(b + 1) * in_len];
        gemm(
            true,
            false,
            patch.rows(),
            patch.cols(),
            s.c(),
            weight.data(),
            x,
            0.0,
            &mut cols,
        );
        patch.col2im(&cols, &mut out.data_mut()[b * out_len..(b + 1) * out_len]);
    }
    add_bias(&mut out, bias);
    Ok(out)
}

/// Gradients of `conv2d_transpose` with respect to `(input, weight, bias)`.
pub fn conv2d_transpose_backward(
    input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (patch, cout) = transpose_patch(input.shape(), weight.shape(), spec)?;
    let s = input.shape();
    let [oh, ow] = patch.img;
    if grad_out.shape() != Shape::new(s.n(), cout, oh, ow) {
        return Err(Error::shape(
            "conv2d_transpose_backward",
            format!(
                "grad shape {} != output shape {:?}",
                grad_out.shape(),
                [s.n(), cout, oh, ow]
            ),
        ));
    }
    let in_len = s.c() * s.plane();
    let out_len = cout * oh * ow;
    let mut gx = Tensor::zeros(s);
    let mut gw = Tensor::zeros(weight.shape());
    let mut cols = vec![0.0; patch.rows() * patch.cols()];
    for b in 0..s.n() {
        let x = &input.data()[b * in_len..(b + 1) * in_len];
        patch.im2col(&grad_out.data()[b * out_len..(b + 1) * out_len], &mut cols);
        let gxb = &mut gx.data_mut()[b * in_len..(b + 1) * in_len];
        gemm(
            false,
            false,
            s.c(),
            patch.cols(),
            patch.rows(),
            weight.data(),
            &cols,
            0.0,
            gxb,
        );
        gemm(
            false,
            true,
            s.c(),
            patch.rows(),
            patch.cols(),
            x,
            &cols,
            1.0,
            gw.data_mut(),
        );
    }
    Ok((gx, gw, bias_grad(grad_out)))
}
