//! im2col-based convolution kernels.

use super::Element;
use crate::error::{Error, Result};

/// Geometry of a cross-correlation from `c×h×w` to `f×out_h×out_w`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn new(
        (batch, in_channels, height, width): (usize, usize, usize, usize),
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        if kernel == 0 || stride == 0 {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kernel} and stride {stride} must be positive"
            )));
        }
        if height + 2 * pad < kernel || width + 2 * pad < kernel {
            return Err(Error::ShapeMismatch(format!(
                "kernel {kernel} exceeds padded input {height}x{width} (pad {pad})"
            )));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    /// Rows of the column matrix: `C·k·k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn in_image(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_image(&self) -> usize {
        self.out_channels * self.out_plane()
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (out_h·out_w)` matrix.
pub(crate) fn im2col<T: Element>(g: &ConvGeom, image: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let k = g.kernel;
    for c in 0..g.in_channels {
        let src = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    if iy < 0 || iy >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, slot) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *slot = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `image`.
pub(crate) fn col2im<T: Element>(g: &ConvGeom, cols: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    let k = g.kernel;
    for c in 0..g.in_channels {
        let dst = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_height {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_width {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

fn unfold<T: Element>(g: &ConvGeom, image: &[T], scratch: &mut Vec<T>) -> bool {
    // A 1x1 stride-1 unpadded kernel reads the image directly.
    if g.kernel == 1 && g.stride == 1 && g.pad == 0 {
        return false;
    }
    scratch.resize(g.patch_len() * g.out_plane(), T::zero());
    im2col(g, image, scratch);
    true
}

/// Forward cross-correlation over a batch.
pub(crate) fn conv_forward<T: Element>(g: &ConvGeom, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    let mut scratch = Vec::new();
    for n in 0..g.batch {
        let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
        let cols: &[T] = if unfold(g, image, &mut scratch) { &scratch } else { image };
        let dst = &mut out[n * g.out_image()..(n + 1) * g.out_image()];
        T::gemm(g.out_channels, g.patch_len(), g.out_plane(), weight, false, cols, false, dst, false);
        if let Some(bias) = bias {
            add_channel_bias(dst, bias, g.out_plane());
        }
    }
    out
}

pub(crate) fn add_channel_bias<T: Element>(dst: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in dst.chunks_exact_mut(plane).zip(bias) {
        for v in chunk {
            *v = *v + b;
        }
    }
}

pub(crate) fn accumulate_channel_sums<T: Element>(src: &[T], out: &mut [T], plane: usize) {
    for (chunk, acc) in src.chunks_exact(plane).zip(out.iter_mut()) {
        *acc = chunk.iter().fold(*acc, |s, &v| s + v);
    }
}

/// Gradients of a forward conv given the output gradient.
pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Element>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_input, want_weight, want_bias) = want;
    let mut d_input = want_input.then(|| vec![T::zero(); g.batch * g.in_image()]);
    let mut d_weight = want_weight.then(|| vec![T::zero(); g.out_channels * g.patch_len()]);
    let mut d_bias = want_bias.then(|| vec![T::zero(); g.out_channels]);
    let mut scratch = Vec::new();
    let mut d_cols = vec![T::zero(); g.patch_len() * g.out_plane()];
    for n in 0..g.batch {
        let dy = &grad_out[n * g.out_image()..(n + 1) * g.out_image()];
        if let Some(db) = d_bias.as_mut() {
            accumulate_channel_sums(dy, db, g.out_plane());
        }
        if let Some(dw) = d_weight.as_mut() {
            let image = &input[n * g.in_image()..(n + 1) * g.in_image()];
            let cols: &[T] = if unfold(g, image, &mut scratch) { &scratch } else { image };
            T::gemm(g.out_channels, g.out_plane(), g.patch_len(), dy, false, cols, true, dw, true);
        }
        if let Some(dx) = d_input.as_mut() {
            let dst = &mut dx[n * g.in_image()..(n + 1) * g.in_image()];
            T::gemm(g.patch_len(), g.out_channels, g.out_plane(), weight, true, dy, false, &mut d_cols, false);
            if g.kernel == 1 && g.stride == 1 && g.pad == 0 {
                dst.copy_from_slice(&d_cols);
            } else {
                col2im(g, &d_cols, dst);
            }
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}

/// Geometry of the conv whose input-gradient a transposed conv computes.
///
/// The transposed conv maps `in_channels×h×w` to `out_channels×H'×W'` with
/// `H' = (h-1)·stride - 2·pad + k`; the adjoint conv maps `H'` back to `h`.
pub fn transpose_geometry(
    (batch, in_channels, height, width): (usize, usize, usize, usize),
    out_channels: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    let span = |len: usize| ((len.max(1) - 1) * stride + kernel).checked_sub(2 * pad).filter(|&v| v > 0);
    let (Some(out_h), Some(out_w)) = (span(height), span(width)) else {
        return Err(Error::ShapeMismatch(format!(
            "transposed conv of {height}x{width} with k={kernel}, stride={stride}, pad={pad} is empty"
        )));
    };
    if height == 0 || width == 0 || stride == 0 {
        return Err(Error::ShapeMismatch("empty transposed conv input".into()));
    }
    let g = ConvGeom::new((batch, out_channels, out_h, out_w), in_channels, kernel, stride, pad)?;
    debug_assert_eq!((g.out_height, g.out_width), (height, width));
    Ok(g)
}

/// Forward transposed conv. `g` is the adjoint conv geometry; weight is `[in, out, k, k]`.
pub(crate) fn conv_transpose_forward<T: Element>(g: &ConvGeom, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    // Adjoint conv: image side has g.in_channels (= our out), column side g.out_channels (= our in).
    let out_image = g.in_image();
    let in_image = g.out_image();
    let mut out = vec![T::zero(); g.batch * out_image];
    let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
    for n in 0..g.batch {
        let x = &input[n * in_image..(n + 1) * in_image];
        T::gemm(g.patch_len(), g.out_channels, g.out_plane(), weight, true, x, false, &mut cols, false);
        let dst = &mut out[n * out_image..(n + 1) * out_image];
        col2im(g, &cols, dst);
        if let Some(bias) = bias {
            add_channel_bias(dst, bias, g.height * g.width);
        }
    }
    out
}

pub(crate) fn conv_transpose_backward<T: Element>(
    g: &ConvGeom,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_input, want_weight, want_bias) = want;
    let out_image = g.in_image();
    let in_image = g.out_image();
    let mut d_input = want_input.then(|| vec![T::zero(); g.batch * in_image]);
    let mut d_weight = want_weight.then(|| vec![T::zero(); g.out_channels * g.patch_len()]);
    let mut d_bias = want_bias.then(|| vec![T::zero(); g.in_channels]);
    let mut cols = vec![T::zero(); g.patch_len() * g.out_plane()];
    for n in 0..g.batch {
        let dy = &grad_out[n * out_image..(n + 1) * out_image];
        if let Some(db) = d_bias.as_mut() {
            accumulate_channel_sums(dy, db, g.height * g.width);
        }
        if d_input.is_none() && d_weight.is_none() {
            continue;
        }
        im2col(g, dy, &mut cols);
        if let Some(dx) = d_input.as_mut() {
            let dst = &mut dx[n * in_image..(n + 1) * in_image];
            T::gemm(g.out_channels, g.patch_len(), g.out_plane(), weight, false, &cols, false, dst, false);
        }
        if let Some(dw) = d_weight.as_mut() {
            let x = &input[n * in_image..(n + 1) * in_image];
            T::gemm(g.out_channels, g.out_plane(), g.patch_len(), x, false, &cols, true, dw, true);
        }
    }
    ConvGrads {
        input: d_input,
        weight: d_weight,
        bias: d_bias,
    }
}
