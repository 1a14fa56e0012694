//! GEMM, convolution and resampling kernels.

/// Strided view of a row-major matrix for `gemm`.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols as isize, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self { data: self.data, rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

/// `c = beta * c + a @ b` where `c` is row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: Mat<'_>, b: Mat<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for x in c[..m * n].iter_mut() {
            *x *= beta;
        }
        return;
    }
    // SAFETY: the slices cover every element addressed by the given dims and
    // strides (checked by the asserts above and the Mat constructors).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Output positions `lo..hi` whose input index `o * stride + k - pad` lies
/// inside `0..len`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { (len + pad - k).div_ceil(stride) } else { 0 };
    (lo.min(out_len), hi.min(out_len).max(lo.min(out_len)))
}

/// Unfold one `[C, H, W]` image into `[C*kh*kw, Ho*Wo]` patch columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for c in 0..g.channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.pad, g.stride, g.height, ho);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst[..ylo * wo].fill(0.0);
                dst[yhi * wo..].fill(0.0);
                let (xlo, xhi) = valid_range(kj, g.pad, g.stride, g.width, wo);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &xc[iy * g.width..(iy + 1) * g.width];
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    line[..xlo].fill(0.0);
                    line[xhi..].fill(0.0);
                    if xlo < xhi {
                        let first = xlo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            line[xlo..xhi].copy_from_slice(&src[first..first + (xhi - xlo)]);
                        } else {
                            for (v, s) in line[xlo..xhi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                *v = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    for c in 0..g.channels {
        let xc = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.pad, g.stride, g.height, ho);
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (xlo, xhi) = valid_range(kj, g.pad, g.stride, g.width, wo);
                if xlo >= xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst = &mut xc[iy * g.width..(iy + 1) * g.width];
                    let first = xlo * g.stride + kj - g.pad;
                    let line = &src[oy * wo + xlo..oy * wo + xhi];
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + line.len()].iter_mut().zip(line) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(line) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution of a batch. `x: [B, C, H, W]`, `w: [O, C*kh*kw]`.
pub(crate) fn conv2d_forward(x: &[f64], batch: usize, w: &[f64], out_ch: usize, g: &ConvGeom) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let in_sz = g.channels * g.height * g.width;
    let mut out = vec![0.0; batch * out_ch * plane];
    let mut cols = vec![0.0; g.col_rows() * plane];
    let wm = Mat::new(w, out_ch, g.col_rows());
    for b in 0..batch {
        im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
        gemm(
            wm,
            Mat::new(&cols, g.col_rows(), plane),
            0.0,
            &mut out[b * out_ch * plane..(b + 1) * out_ch * plane],
        );
    }
    out
}

/// Gradients of the convolution w.r.t. input and weights.
pub(crate) fn conv2d_backward(
    x: &[f64],
    batch: usize,
    w: &[f64],
    out_ch: usize,
    g: &ConvGeom,
    grad_out: &[f64],
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.out_h() * g.out_w();
    let in_sz = g.channels * g.height * g.width;
    let rows = g.col_rows();
    let mut gx = need_x.then(|| vec![0.0; batch * in_sz]);
    let mut gw = need_w.then(|| vec![0.0; out_ch * rows]);
    let mut cols = vec![0.0; rows * plane];
    let wm = Mat::new(w, out_ch, rows);
    for b in 0..batch {
        let go = Mat::new(&grad_out[b * out_ch * plane..(b + 1) * out_ch * plane], out_ch, plane);
        if let Some(gw) = gw.as_mut() {
            im2col(&x[b * in_sz..(b + 1) * in_sz], g, &mut cols);
            gemm(go, Mat::new(&cols, rows, plane).t(), 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(wm.t(), go, 0.0, &mut cols);
            col2im(&cols, g, &mut gx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (gx, gw)
}

/// Nearest-neighbour 2x upsampling of `[N, H, W]` planes.
pub(crate) fn upsample2x(x: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * 4 * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward(g: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..2 * h {
            for xx in 0..2 * w {
                dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
            }
        }
    }
    out
}
