//! Raw numeric kernels shared by the autodiff graph: dense matrix products
//! and im2col convolution.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. A transposed operand is stored in its
/// untransposed row-major layout.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` is exclusively borrowed.
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

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[batch, c_in, h, w], &[c_out, kc, kh, kw]) = (x, kernel) else {
            return Err(Error::shape("conv2d", format!("expected rank-4 input and kernel, got {x:?} and {kernel:?}")));
        };
        if kc != c_in {
            return Err(Error::shape("conv2d", format!("kernel expects {kc} input channels, input has {c_in}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.oh * self.ow
    }

    /// 1×1 kernels at stride 1 without padding read the input directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.c_out, self.oh, self.ow]
    }
}

fn im2col(img: &[f64], g: &ConvGeometry, col: &mut [f64]) {
    let pixels = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * pixels..(row + 1) * pixels];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(col: &[f64], g: &ConvGeometry, img: &mut [f64]) {
    let pixels = g.out_pixels();
    for ci in 0..g.c_in {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &col[row * pixels..(row + 1) * pixels];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation of `x[n,c,h,w]` with `kernel[c',c,kh,kw]`.
pub fn conv2d_forward(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), kernel.shape(), stride, pad)?;
    let mut out = vec![0.0; g.batch * g.out_len()];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0; g.patch_len() * g.out_pixels()] };
    for b in 0..g.batch {
        let img = &x.data()[b * g.in_len()..(b + 1) * g.in_len()];
        let cols: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(img, &g, &mut col);
            &col
        };
        gemm(
            g.c_out,
            g.patch_len(),
            g.out_pixels(),
            kernel.data(),
            false,
            cols,
            false,
            &mut out[b * g.out_len()..(b + 1) * g.out_len()],
            0.0,
        );
    }
    Tensor::new(&g.output_shape(), out)
}

/// Gradients of a convolution with respect to its input (added into `dx`)
/// and kernel (added into `dk`). Images are processed in index order so the
/// kernel-gradient accumulation order is fixed.
pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    dout: &[f64],
    stride: usize,
    pad: usize,
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) -> Result<()> {
    let g = ConvGeometry::new(x.shape(), kernel.shape(), stride, pad)?;
    let mut col = vec![0.0; g.patch_len() * g.out_pixels()];
    for b in 0..g.batch {
        let img = &x.data()[b * g.in_len()..(b + 1) * g.in_len()];
        let dy = &dout[b * g.out_len()..(b + 1) * g.out_len()];
        if let Some(dk) = dk.as_deref_mut() {
            let cols: &[f64] = if g.is_pointwise() {
                img
            } else {
                im2col(img, &g, &mut col);
                &col
            };
            // dk[c', ckk] += dy[c', P] · cols[ckk, P]^T
            gemm(g.c_out, g.out_pixels(), g.patch_len(), dy, false, cols, true, dk, 1.0);
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dimg = &mut dx[b * g.in_len()..(b + 1) * g.in_len()];
            if g.is_pointwise() {
                gemm(g.c_in, g.c_out, g.out_pixels(), kernel.data(), true, dy, false, dimg, 1.0);
            } else {
                // dcol[ckk, P] = kernel[c', ckk]^T · dy[c', P]
                gemm(g.patch_len(), g.c_out, g.out_pixels(), kernel.data(), true, dy, false, &mut col, 0.0);
                col2im_add(&col, &g, dimg);
            }
        }
    }
    Ok(())
}
