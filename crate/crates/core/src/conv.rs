//! Convolution as im2col + matmul.
//!
//! candle's CPU conv2d backward is several times slower than routing the
//! same computation through its matmul kernels, so convolutions here unfold
//! the input with a custom op whose adjoint is the matching fold.

use std::ops::AddAssign;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Geometry {
    pub fn output(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.padding - self.kernel) / self.stride + 1,
            (self.width + 2 * self.padding - self.kernel) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(col_start, img_start, len, step)` for every run of column
    /// entries that read inside the image: column entries
    /// `col_start..col_start + len` pair with image entries
    /// `img_start, img_start + step, ...`.
    ///
    /// Columns are laid out as (C·k·k, B·H'·W') so one matmul covers the
    /// whole batch.
    fn for_each_run(&self, batch: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (ho, wo) = self.output();
        let per_image = ho * wo;
        let total = batch * per_image;
        let plane = self.height * self.width;
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    // Valid ox satisfy 0 ≤ ox·s + kj − p < width.
                    let ox_lo = p.saturating_sub(kj).div_ceil(s);
                    let ox_hi = if self.width + p > kj {
                        ((self.width + p - kj - 1) / s + 1).min(wo)
                    } else {
                        0
                    };
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for n in 0..batch {
                        let img_base = (n * self.channels + c) * plane;
                        let col_base = row * total + n * per_image;
                        for oy in 0..ho {
                            let iy = oy * s + ki;
                            if iy < p || iy - p >= self.height {
                                continue;
                            }
                            let ix = ox_lo * s + kj - p;
                            f(
                                col_base + oy * wo + ox_lo,
                                img_base + (iy - p) * self.width + ix,
                                ox_hi - ox_lo,
                                s,
                            );
                        }
                    }
                }
            }
        }
    }
}

fn unfold<T: Copy + Default>(x: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let (ho, wo) = g.output();
    let mut out = vec![T::default(); batch * g.rows() * ho * wo];
    g.for_each_run(batch, |col, img, len, step| {
        let dst = &mut out[col..col + len];
        if step == 1 {
            dst.copy_from_slice(&x[img..img + len]);
        } else {
            for (j, d) in dst.iter_mut().enumerate() {
                *d = x[img + j * step];
            }
        }
    });
    out
}

fn fold<T: Copy + Default + AddAssign>(cols: &[T], batch: usize, g: Geometry) -> Vec<T> {
    let mut out = vec![T::default(); batch * g.channels * g.height * g.width];
    g.for_each_run(batch, |col, img, len, step| {
        let src = &cols[col..col + len];
        if step == 1 {
            for (d, &v) in out[img..img + len].iter_mut().zip(src) {
                *d += v;
            }
        } else {
            for (j, &v) in src.iter().enumerate() {
                out[img + j * step] += v;
            }
        }
    });
    out
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("{op} expects a contiguous input"),
    }
}

struct Unfold(Geometry);
struct Fold(Geometry);

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let batch = layout.dims()[0];
        let (ho, wo) = g.output();
        let shape = Shape::from((g.rows(), batch * ho * wo));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(contiguous_slice(v, layout, "unfold")?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(contiguous_slice(v, layout, "unfold")?, batch, g)),
            _ => candle_core::bail!("unfold supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (ho, wo) = g.output();
        let batch = layout.dims()[1] / (ho * wo);
        let shape = Shape::from((batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(contiguous_slice(v, layout, "fold")?, batch, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(contiguous_slice(v, layout, "fold")?, batch, g)),
            _ => candle_core::bail!("fold supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Unfold(self.0))?))
    }
}

/// `x` is (B, C, H, W); `weight` is (C_out, C, k, k); `bias` is (C_out).
/// Returns (B, C_out, H', W').
pub(crate) fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> candle_core::Result<Tensor> {
    let (batch, channels, height, width) = x.dims4()?;
    let (c_out, c_in, k, k2) = weight.dims4()?;
    if c_in != channels || k != k2 {
        candle_core::bail!("conv2d: input has {channels} channels, weight {:?}", weight.dims());
    }
    if height + 2 * padding < k || width + 2 * padding < k {
        candle_core::bail!("conv2d: {height}x{width} input is smaller than the {k}x{k} kernel");
    }
    let g = Geometry {
        channels,
        height,
        width,
        kernel: k,
        stride,
        padding,
    };
    let (ho, wo) = g.output();
    let cols = x.contiguous()?.apply_op1(Unfold(g))?;
    let mut y = weight.reshape((c_out, channels * k * k))?.matmul(&cols)?;
    if let Some(b) = bias {
        y = y.broadcast_add(&b.reshape((c_out, 1))?)?;
    }
    y.reshape((c_out, batch, ho, wo))?.transpose(0, 1)?.contiguous()
}
