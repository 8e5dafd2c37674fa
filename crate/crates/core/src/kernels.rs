//! Raw numeric kernels shared by the tape ops. No shape validation here;
//! callers check geometry first.

/// `c = beta·c + op(a)·op(b)` where `op(a)` is `[m,k]` and `op(b)` is
/// `[k,n]`. With `a_t` set, `a` is stored as `[k,m]`; likewise for `b_t`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents described above.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit the padded input or stride is 0.
    pub fn new(
        c_in: usize,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || kh == 0 || kw == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return None;
        }
        Some(Self {
            c_in,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds `x: [C,H,W]` into `[C·kh·kw, out_h·out_w]`.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols_n = g.out_len();
    let mut cols = vec![0.0; g.patch_len() * cols_n];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `dx: [C,H,W]`.
pub fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols_n = g.out_len();
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Two-tap linear interpolation weights along one axis, half-pixel centers.
///
/// Output sample `d` reads source coordinate `(d + 0.5)·in/out − 0.5`,
/// clamped to `[0, in − 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisTaps {
    pub index: Vec<[usize; 2]>,
    pub weight: Vec<[f64; 2]>,
}

impl AxisTaps {
    pub fn new(in_len: usize, out_len: usize) -> Self {
        let scale = in_len as f64 / out_len as f64;
        let mut index = Vec::with_capacity(out_len);
        let mut weight = Vec::with_capacity(out_len);
        for d in 0..out_len {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
            index.push([i0, i1]);
            weight.push([1.0 - frac, frac]);
        }
        Self { index, weight }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResizePlan {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub rows: AxisTaps,
    pub cols: AxisTaps,
}

impl ResizePlan {
    pub fn new(channels: usize, in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            channels,
            in_h,
            in_w,
            rows: AxisTaps::new(in_h, out_h),
            cols: AxisTaps::new(in_w, out_w),
        }
    }

    pub fn out_h(&self) -> usize {
        self.rows.len()
    }

    pub fn out_w(&self) -> usize {
        self.cols.len()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut out = vec![0.0; self.channels * oh * ow];
        for c in 0..self.channels {
            let plane = &x[c * self.in_h * self.in_w..][..self.in_h * self.in_w];
            for oy in 0..oh {
                let [y0, y1] = self.rows.index[oy];
                let [wy0, wy1] = self.rows.weight[oy];
                for ox in 0..ow {
                    let [x0, x1] = self.cols.index[ox];
                    let [wx0, wx1] = self.cols.weight[ox];
                    out[(c * oh + oy) * ow + ox] = wy0
                        * (wx0 * plane[y0 * self.in_w + x0] + wx1 * plane[y0 * self.in_w + x1])
                        + wy1
                            * (wx0 * plane[y1 * self.in_w + x0]
                                + wx1 * plane[y1 * self.in_w + x1]);
                }
            }
        }
        out
    }

    pub fn backward(&self, dy: &[f64], dx: &mut [f64]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        for c in 0..self.channels {
            let plane = &mut dx[c * self.in_h * self.in_w..][..self.in_h * self.in_w];
            for oy in 0..oh {
                let [y0, y1] = self.rows.index[oy];
                let [wy0, wy1] = self.rows.weight[oy];
                for ox in 0..ow {
                    let [x0, x1] = self.cols.index[ox];
                    let [wx0, wx1] = self.cols.weight[ox];
                    let g = dy[(c * oh + oy) * ow + ox];
                    plane[y0 * self.in_w + x0] += g * wy0 * wx0;
                    plane[y0 * self.in_w + x1] += g * wy0 * wx1;
                    plane[y1 * self.in_w + x0] += g * wy1 * wx0;
                    plane[y1 * self.in_w + x1] += g * wy1 * wx1;
                }
            }
        }
    }
}

pub const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}
