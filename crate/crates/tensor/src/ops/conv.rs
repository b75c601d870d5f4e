//! Convolution kernels: im2col lowering onto a dense GEMM.

use crate::error::{invalid, Result, TensorError};
use crate::tensor::Tensor;

/// Spatial padding policy for [`conv2d`](crate::Tape::conv2d).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output extent is `ceil(input / stride)`; the deficit is split with the
    /// extra row/column on the bottom/right.
    Same,
    /// No padding.
    Valid,
}

/// Resolved geometry of one 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub dilation: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

fn axis(
    input: usize,
    kernel: usize,
    stride: usize,
    dilation: usize,
    padding: Padding,
) -> Option<(usize, usize)> {
    let span = dilation * (kernel - 1) + 1;
    match padding {
        Padding::Valid => {
            if input < span {
                return None;
            }
            Some(((input - span) / stride + 1, 0))
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out - 1) * stride + span).saturating_sub(input);
            Some((out, needed / 2))
        }
    }
}

impl ConvGeometry {
    pub fn new(
        in_h: usize,
        in_w: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        dilation: usize,
        padding: Padding,
    ) -> Result<Self> {
        if stride == 0 || dilation == 0 || kernel_h == 0 || kernel_w == 0 {
            return Err(invalid(
                "conv2d",
                "stride, dilation and kernel extents must be positive",
            ));
        }
        let too_small = || {
            invalid(
                "conv2d",
                format!(
                    "input {in_h}x{in_w} smaller than dilated kernel {kernel_h}x{kernel_w} (dilation {dilation})"
                ),
            )
        };
        let (out_h, pad_top) =
            axis(in_h, kernel_h, stride, dilation, padding).ok_or_else(too_small)?;
        let (out_w, pad_left) =
            axis(in_w, kernel_w, stride, dilation, padding).ok_or_else(too_small)?;
        Ok(Self {
            in_h,
            in_w,
            kernel_h,
            kernel_w,
            stride,
            dilation,
            pad_top,
            pad_left,
            out_h,
            out_w,
        })
    }

    fn patch(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    fn out_area(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Source coordinate for output `o` and kernel tap `k` along one axis.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, dilation: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = (o * stride + k * dilation) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Lower one `[C, H, W]` image into a `[C*kh*kw, OH*OW]` column matrix.
pub(crate) fn im2col(image: &[f64], channels: usize, g: &ConvGeometry, cols: &mut [f64]) {
    let area = g.out_area();
    for c in 0..channels {
        let plane = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * area..(row + 1) * area];
                for oy in 0..g.out_h {
                    let sy = ConvGeometry::source(oy, ky, g.stride, g.dilation, g.pad_top, g.in_h);
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match sy {
                        None => line.fill(0.0),
                        Some(sy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match ConvGeometry::source(
                                    ox, kx, g.stride, g.dilation, g.pad_left, g.in_w,
                                ) {
                                    Some(sx) => plane[sy * g.in_w + sx],
                                    None => 0.0,
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto a `[C, H, W]` image (adjoint of [`im2col`]).
pub(crate) fn col2im(cols: &[f64], channels: usize, g: &ConvGeometry, image: &mut [f64]) {
    let area = g.out_area();
    for c in 0..channels {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * area..(row + 1) * area];
                for oy in 0..g.out_h {
                    let Some(sy) =
                        ConvGeometry::source(oy, ky, g.stride, g.dilation, g.pad_top, g.in_h)
                    else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(sx) = ConvGeometry::source(
                            ox, kx, g.stride, g.dilation, g.pad_left, g.in_w,
                        ) {
                            plane[sy * g.in_w + sx] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the buffers hold at least m*k, k*n and m*n elements and the
    // strides above address exactly those row-major (or transposed) layouts.
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

/// Input channels must match kernel axis 1 for a convolution and axis 0 for
/// a transposed convolution.
pub(crate) fn check_conv_shapes(input: &Tensor, kernel: &Tensor, op: &'static str, transposed: bool) -> Result<()> {
    let (_, c_in, _, _) = input.dims4()?;
    let (k0, k1, _, _) = kernel.dims4()?;
    let k_in = if transposed { k0 } else { k1 };
    if c_in != k_in {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    Ok(())
}

/// Forward 2-d cross-correlation. `kernel` is `[C_out, C_in, kh, kw]`.
pub fn conv2d_forward(input: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Tensor {
    let (n, c_in, h, w) = input.dims4().expect("checked");
    let (c_out, _, _, _) = kernel.dims4().expect("checked");
    let patch_rows = c_in * g.patch();
    let area = g.out_area();
    let mut cols = vec![0.0; patch_rows * area];
    let mut out = Tensor::zeros(&[n, c_out, g.out_h, g.out_w]);
    for b in 0..n {
        let image = &input.data()[b * c_in * h * w..(b + 1) * c_in * h * w];
        im2col(image, c_in, g, &mut cols);
        let dst = &mut out.data_mut()[b * c_out * area..(b + 1) * c_out * area];
        gemm(c_out, patch_rows, area, kernel.data(), false, &cols, false, 0.0, dst);
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    g: &ConvGeometry,
    grad_out: &Tensor,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c_in, h, w) = input.dims4().expect("checked");
    let (c_out, _, _, _) = kernel.dims4().expect("checked");
    let patch_rows = c_in * g.patch();
    let area = g.out_area();
    let mut cols = vec![0.0; patch_rows * area];
    let mut grad_in = want_input.then(|| Tensor::zeros(input.shape()));
    let mut grad_k = want_kernel.then(|| Tensor::zeros(kernel.shape()));
    for b in 0..n {
        let go = &grad_out.data()[b * c_out * area..(b + 1) * c_out * area];
        if let Some(gk) = grad_k.as_mut() {
            let image = &input.data()[b * c_in * h * w..(b + 1) * c_in * h * w];
            im2col(image, c_in, g, &mut cols);
            gemm(c_out, area, patch_rows, go, false, &cols, true, 1.0, gk.data_mut());
        }
        if let Some(gi) = grad_in.as_mut() {
            gemm(patch_rows, c_out, area, kernel.data(), true, go, false, 0.0, &mut cols);
            let dst = &mut gi.data_mut()[b * c_in * h * w..(b + 1) * c_in * h * w];
            col2im(&cols, c_in, g, dst);
        }
    }
    (grad_in, grad_k)
}

/// Geometry of the convolution whose input-gradient a transposed convolution computes.
pub fn transpose_geometry(in_h: usize, in_w: usize, kernel_h: usize, kernel_w: usize, stride: usize) -> Result<ConvGeometry> {
    if stride == 0 {
        return Err(invalid("conv2d_transpose", "stride must be positive"));
    }
    let out_h = (in_h - 1) * stride + kernel_h;
    let out_w = (in_w - 1) * stride + kernel_w;
    let g = ConvGeometry::new(out_h, out_w, kernel_h, kernel_w, stride, 1, Padding::Valid)?;
    debug_assert_eq!((g.out_h, g.out_w), (in_h, in_w));
    Ok(g)
}

/// Forward transposed convolution. `kernel` is `[C_in, C_out, kh, kw]` and
/// `g` is the geometry from [`transpose_geometry`].
pub fn conv_transpose_forward(input: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Tensor {
    let (n, c_in, h, w) = input.dims4().expect("checked");
    let (_, c_out, _, _) = kernel.dims4().expect("checked");
    let patch_rows = c_out * g.patch();
    let area = h * w;
    let mut cols = vec![0.0; patch_rows * area];
    let mut out = Tensor::zeros(&[n, c_out, g.in_h, g.in_w]);
    let plane = c_out * g.in_h * g.in_w;
    for b in 0..n {
        let x = &input.data()[b * c_in * area..(b + 1) * c_in * area];
        gemm(patch_rows, c_in, area, kernel.data(), true, x, false, 0.0, &mut cols);
        col2im(&cols, c_out, g, &mut out.data_mut()[b * plane..(b + 1) * plane]);
    }
    out
}

pub fn conv_transpose_backward(
    input: &Tensor,
    kernel: &Tensor,
    g: &ConvGeometry,
    grad_out: &Tensor,
    want_input: bool,
    want_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (n, c_in, h, w) = input.dims4().expect("checked");
    let (_, c_out, _, _) = kernel.dims4().expect("checked");
    let patch_rows = c_out * g.patch();
    let area = h * w;
    let plane = c_out * g.in_h * g.in_w;
    let mut cols = vec![0.0; patch_rows * area];
    let mut grad_in = want_input.then(|| Tensor::zeros(input.shape()));
    let mut grad_k = want_kernel.then(|| Tensor::zeros(kernel.shape()));
    for b in 0..n {
        im2col(&grad_out.data()[b * plane..(b + 1) * plane], c_out, g, &mut cols);
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi.data_mut()[b * c_in * area..(b + 1) * c_in * area];
            gemm(c_in, patch_rows, area, kernel.data(), false, &cols, false, 0.0, dst);
        }
        if let Some(gk) = grad_k.as_mut() {
            let x = &input.data()[b * c_in * area..(b + 1) * c_in * area];
            gemm(c_in, area, patch_rows, x, false, &cols, true, 1.0, gk.data_mut());
        }
    }
    (grad_in, grad_k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_extents() {
        let g = ConvGeometry::new(7, 8, 3, 3, 2, 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w), (4, 4));
        let g = ConvGeometry::new(8, 8, 3, 3, 1, 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top), (8, 8, 2));
    }

    #[test]
    fn valid_rejects_oversized_kernel() {
        assert!(ConvGeometry::new(4, 4, 3, 3, 1, 2, Padding::Valid).is_err());
        let g = ConvGeometry::new(5, 5, 3, 3, 1, 2, Padding::Valid).unwrap();
        assert_eq!((g.out_h, g.out_w), (1, 1));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeometry::new(5, 6, 3, 2, 2, 1, Padding::Same).unwrap();
        let image: Vec<f64> = (0..2 * 30).map(|i| (i as f64 * 0.37).sin()).collect();
        let rows = 2 * g.patch();
        let cols_probe: Vec<f64> = (0..rows * g.out_area()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; rows * g.out_area()];
        im2col(&image, 2, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; image.len()];
        col2im(&cols_probe, 2, &g, &mut back);
        let rhs: f64 = image.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
