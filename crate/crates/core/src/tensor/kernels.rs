//! Dense loops behind the convolution and resampling nodes.

use crate::Scalar;

/// Output length of a valid (unpadded) convolution along one axis.
pub fn conv_output_len(input: usize, kernel: usize, stride: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || kernel > input {
        None
    } else {
        Some((input - kernel) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn columns(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds `x` (N×C×H×W) into a `(C·kh·kw) × (N·out_h·out_w)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let cols = g.columns();
    let plane = g.out_h * g.out_w;
    let mut out = vec![T::zero(); g.patch_len() * cols];
    for ci in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let src = &x[(n * g.channels + ci) * g.height * g.width..];
                    for oy in 0..g.out_h {
                        let line = &src[(oy * g.stride + ky) * g.width..];
                        let base = n * plane + oy * g.out_w;
                        for ox in 0..g.out_w {
                            dst[base + ox] = line[ox * g.stride + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into `dx`.
pub(crate) fn col2im<T: Scalar>(cols_data: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cols = g.columns();
    let plane = g.out_h * g.out_w;
    for ci in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols_data[row * cols..(row + 1) * cols];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.channels + ci) * g.height * g.width..];
                    for oy in 0..g.out_h {
                        let line = &mut dst[(oy * g.stride + ky) * g.width..];
                        let base = n * plane + oy * g.out_w;
                        for ox in 0..g.out_w {
                            line[ox * g.stride + kx] += src[base + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `[C_out, N·P] → [N, C_out, P]`
pub(crate) fn channel_major_to_batch_major<T: Scalar>(src: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for c in 0..channels {
        for n in 0..batch {
            let s = &src[c * batch * plane + n * plane..][..plane];
            out[(n * channels + c) * plane..][..plane].copy_from_slice(s);
        }
    }
    out
}

/// `[N, C_out, P] → [C_out, N·P]`
pub(crate) fn batch_major_to_channel_major<T: Scalar>(src: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for n in 0..batch {
        for c in 0..channels {
            let s = &src[(n * channels + c) * plane..][..plane];
            out[c * batch * plane + n * plane..][..plane].copy_from_slice(s);
        }
    }
    out
}

/// Nearest-neighbour upsampling of `planes` H×W planes by `factor`.
pub(crate) fn upsample<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let row = &src[(oy / factor) * w..];
            for ox in 0..ow {
                dst[oy * ow + ox] = row[ox / factor];
            }
        }
    }
    out
}

/// Adjoint of [`upsample`]: sums each factor×factor block.
pub(crate) fn upsample_backward<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, factor: usize) -> Vec<T> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
            }
        }
    }
    out
}
