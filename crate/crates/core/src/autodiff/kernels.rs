//! Raw slice kernels shared by forward and backward rules.

/// `c = op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and `op(b)`
/// of shape `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides above address them in bounds.
    unsafe {
        matrixmultiply::sgemm(
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1, stride 1, no padding: the input already is its own column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.pad == (0, 0)
    }
}

pub(crate) fn im2col(x: &[f32], g: &ConvGeometry, col: &mut [f32]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.pad.0 as isize, g.pad.1 as isize);
    let plane = g.out_h * g.out_w;
    for ci in 0..g.channels {
        let src = &x[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * sh + ki) as isize - ph;
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * sw + kj) as isize - pw;
                        *d = if ix >= 0 && ix < g.width as isize { srow[ix as usize] } else { 0.0 };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add(col: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.pad.0 as isize, g.pad.1 as isize);
    let plane = g.out_h * g.out_w;
    for ci in 0..g.channels {
        let dst = &mut dx[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * sh + ki) as isize - ph;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * sw + kj) as isize - pw;
                        if ix >= 0 && ix < g.width as isize {
                            drow[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward cross-correlation over a batch. `weight` is `O x C x Kh x Kw`.
pub(crate) fn conv2d_forward(
    x: &[f32],
    batch: usize,
    g: &ConvGeometry,
    weight: &[f32],
    out_channels: usize,
    bias: Option<&[f32]>,
) -> Vec<f32> {
    let in_len = g.channels * g.height * g.width;
    let plane = g.col_cols();
    let rows = g.col_rows();
    let mut out = vec![0.0f32; batch * out_channels * plane];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * plane] };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let cols: &[f32] = if g.is_pointwise() {
            xn
        } else {
            im2col(xn, g, &mut col);
            &col
        };
        let on = &mut out[n * out_channels * plane..(n + 1) * out_channels * plane];
        gemm(out_channels, rows, plane, weight, false, cols, false, on, 0.0);
        if let Some(b) = bias {
            for (o, chunk) in on.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    }
    out
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    x: &[f32],
    batch: usize,
    g: &ConvGeometry,
    weight: &[f32],
    out_channels: usize,
    dout: &[f32],
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads {
    let in_len = g.channels * g.height * g.width;
    let plane = g.col_cols();
    let rows = g.col_rows();
    let mut dx = want_input.then(|| vec![0.0f32; x.len()]);
    let mut dw = want_weight.then(|| vec![0.0f32; weight.len()]);
    let mut db = want_bias.then(|| vec![0.0f32; out_channels]);
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![0.0f32; rows * plane] };
    let mut dcol = if want_input && !g.is_pointwise() { vec![0.0f32; rows * plane] } else { Vec::new() };
    for n in 0..batch {
        let xn = &x[n * in_len..(n + 1) * in_len];
        let dn = &dout[n * out_channels * plane..(n + 1) * out_channels * plane];
        if let Some(dw) = dw.as_mut() {
            let cols: &[f32] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, g, &mut col);
                &col
            };
            gemm(out_channels, plane, rows, dn, false, cols, true, dw, 1.0);
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                gemm(rows, out_channels, plane, weight, true, dn, false, dxn, 1.0);
            } else {
                gemm(rows, out_channels, plane, weight, true, dn, false, &mut dcol, 0.0);
                col2im_add(&dcol, g, dxn);
            }
        }
        if let Some(db) = db.as_mut() {
            for (o, chunk) in dn.chunks(plane).enumerate() {
                db[o] += chunk.iter().sum::<f32>();
            }
        }
    }
    ConvGrads { input: dx, weight: dw, bias: db }
}
