//! Convolution kernels (cross-correlation, NCHW) via per-sample im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Stride and zero padding of a 2-d convolution.
///
/// The output extent is `(H + 2 * padding - K) / stride + 1`. By default the
/// division must be exact; `truncate` accepts a remainder and drops the
/// trailing input rows/columns that do not fill a whole window, which is what
/// stride-2 downsampling layers on even-sized maps need.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub truncate: bool,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            truncate: false,
        }
    }

    pub fn truncating(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            truncate: true,
        }
    }

    pub fn output_extent(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(Error::config("convolution stride must be positive"));
        }
        let padded = input + 2 * self.padding;
        if kernel == 0 || kernel > padded {
            return Err(Error::dim(format!(
                "kernel extent {kernel} does not fit padded input extent {padded}"
            )));
        }
        let span = padded - kernel;
        if !span.is_multiple_of(self.stride) && !self.truncate {
            return Err(Error::config(format!(
                "output size is not integral: ({input} + 2*{} - {kernel}) / {} leaves a remainder",
                self.padding, self.stride
            )));
        }
        Ok(span / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub geom: ConvGeometry,
}

impl ConvShape {
    pub fn infer<T: Element>(
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: ConvGeometry,
    ) -> Result<Self> {
        let [batch, cin, h, w] = input.dims4("conv2d input")?;
        let [cout, kcin, kh, kw] = kernel.dims4("conv2d kernel")?;
        if kcin != cin {
            return Err(Error::dim(format!(
                "conv2d: kernel expects {kcin} input channels but input has {cin}"
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::dim(format!(
                    "conv2d: bias shape {:?} does not match {cout} output channels",
                    b.shape()
                )));
            }
        }
        let oh = geom.output_extent(h, kh)?;
        let ow = geom.output_extent(w, kw)?;
        Ok(Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
            geom,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns `ox` whose input column `ox*stride + k - pad` lies in `[0, w)`.
fn valid_span(out: usize, w: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    // ox*stride + k >= pad  and  ox*stride + k - pad < w
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let hi = if w + pad > k { (w + pad - k).div_ceil(stride).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one sample `[cin, h, w]` into `[cin*kh*kw, oh*ow]`.
fn im2col<T: Element>(s: &ConvShape, x: &[T], cols: &mut [T]) {
    let (st, pad) = (s.geom.stride, s.geom.padding);
    let plane = s.out_plane();
    for ci in 0..s.cin {
        let xc = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.kh {
            let (ylo, yhi) = valid_span(s.oh, s.h, st, ky, pad);
            for kx in 0..s.kw {
                let (xlo, xhi) = valid_span(s.ow, s.w, st, kx, pad);
                let row = (ci * s.kh + ky) * s.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst[..ylo * s.ow].fill(T::zero());
                dst[yhi * s.ow..].fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * st + ky - pad;
                    let line = &mut dst[oy * s.ow..(oy + 1) * s.ow];
                    line[..xlo].fill(T::zero());
                    line[xhi..].fill(T::zero());
                    let src = &xc[iy * s.w..(iy + 1) * s.w];
                    if xlo < xhi {
                        let first = xlo * st + kx - pad;
                        if st == 1 {
                            line[xlo..xhi].copy_from_slice(&src[first..first + (xhi - xlo)]);
                        } else {
                            for (v, ix) in line[xlo..xhi].iter_mut().zip((first..).step_by(st)) {
                                *v = src[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[cin*kh*kw, oh*ow]` back onto `[cin, h, w]`.
fn col2im<T: Element>(s: &ConvShape, cols: &[T], dx: &mut [T]) {
    let (st, pad) = (s.geom.stride, s.geom.padding);
    let plane = s.out_plane();
    for ci in 0..s.cin {
        let dxc = &mut dx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
        for ky in 0..s.kh {
            let (ylo, yhi) = valid_span(s.oh, s.h, st, ky, pad);
            for kx in 0..s.kw {
                let (xlo, xhi) = valid_span(s.ow, s.w, st, kx, pad);
                if xlo >= xhi {
                    continue;
                }
                let row = (ci * s.kh + ky) * s.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let first = xlo * st + kx - pad;
                for oy in ylo..yhi {
                    let iy = oy * st + ky - pad;
                    let dst = &mut dxc[iy * s.w..(iy + 1) * s.w];
                    let line = &src[oy * s.ow + xlo..oy * s.ow + xhi];
                    for (g, ix) in line.iter().zip((first..).step_by(st)) {
                        dst[ix] = dst[ix] + *g;
                    }
                }
            }
        }
    }
}

fn is_pointwise(s: &ConvShape) -> bool {
    s.kh == 1 && s.kw == 1 && s.geom.stride == 1 && s.geom.padding == 0
}

pub(crate) fn forward<T: Element>(
    s: &ConvShape,
    x: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let (patch, plane) = (s.patch(), s.out_plane());
    let in_len = s.cin * s.h * s.w;
    let out_len = s.cout * plane;
    let mut out = vec![T::zero(); s.batch * out_len];
    let mut cols = vec![T::zero(); if is_pointwise(s) { 0 } else { patch * plane }];
    for b in 0..s.batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let cols_ref: &[T] = if is_pointwise(s) {
            xb
        } else {
            im2col(s, xb, &mut cols);
            &cols
        };
        let ob = &mut out[b * out_len..(b + 1) * out_len];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(plane).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        T::gemm(
            s.cout,
            patch,
            plane,
            T::one(),
            kernel,
            (patch as isize, 1),
            cols_ref,
            (plane as isize, 1),
            if bias.is_some() { T::one() } else { T::zero() },
            ob,
            (plane as isize, 1),
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn backward<T: Element>(
    s: &ConvShape,
    x: &[T],
    kernel: &[T],
    gout: &[T],
    need: (bool, bool, bool),
) -> ConvGrads<T> {
    let (need_x, need_k, need_b) = need;
    let (patch, plane) = (s.patch(), s.out_plane());
    let in_len = s.cin * s.h * s.w;
    let out_len = s.cout * plane;
    let pointwise = is_pointwise(s);

    let mut dx = need_x.then(|| vec![T::zero(); s.batch * in_len]);
    let mut dk = need_k.then(|| vec![T::zero(); kernel.len()]);
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); s.cout];
        for b in 0..s.batch {
            for (co, chunk) in gout[b * out_len..(b + 1) * out_len]
                .chunks(plane)
                .enumerate()
            {
                db[co] = db[co] + chunk.iter().copied().sum::<T>();
            }
        }
        db
    });

    let mut cols = vec![T::zero(); if pointwise { 0 } else { patch * plane }];
    let mut dcols = vec![T::zero(); if need_x && !pointwise { patch * plane } else { 0 }];
    for b in 0..s.batch {
        let gb = &gout[b * out_len..(b + 1) * out_len];
        if let Some(dk) = dk.as_mut() {
            let xb = &x[b * in_len..(b + 1) * in_len];
            let cols_ref: &[T] = if pointwise {
                xb
            } else {
                im2col(s, xb, &mut cols);
                &cols
            };
            // dK += G (cout x plane) * cols^T (plane x patch)
            T::gemm(
                s.cout,
                plane,
                patch,
                T::one(),
                gb,
                (plane as isize, 1),
                cols_ref,
                (1, plane as isize),
                T::one(),
                dk,
                (patch as isize, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * in_len..(b + 1) * in_len];
            // dcols = K^T (patch x cout) * G (cout x plane)
            let target: &mut [T] = if pointwise { dxb } else { &mut dcols };
            T::gemm(
                patch,
                s.cout,
                plane,
                T::one(),
                kernel,
                (1, patch as isize),
                gb,
                (plane as isize, 1),
                T::zero(),
                target,
                (plane as isize, 1),
            );
            if !pointwise {
                col2im(s, &dcols, dxb);
            }
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}
