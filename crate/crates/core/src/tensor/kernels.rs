//! Raw numeric kernels behind the graph ops. Everything here works on flat
//! row-major slices; shape checking happens in the graph layer.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rows: isize,
    pub cols: isize,
}

impl Layout {
    /// Row-major layout of a matrix with `cols` columns.
    pub fn row_major(cols: usize) -> Self {
        Self {
            rows: cols as isize,
            cols: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self {
            rows: 1,
            cols: cols as isize,
        }
    }
}

/// `c = a · b + beta · c` where `a` is m×k, `b` is k×n and `c` is a row-major m×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    let span = |l: Layout, r: usize, q: usize| {
        if r == 0 || q == 0 {
            0
        } else {
            (r as isize - 1) * l.rows + (q as isize - 1) * l.cols + 1
        }
    };
    assert!(a.len() as isize >= span(la, m, k), "gemm lhs too small");
    assert!(b.len() as isize >= span(lb, k, n), "gemm rhs too small");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rows,
            la.cols,
            b.as_ptr(),
            lb.rows,
            lb.cols,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one 2-D correlation.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1x1, unit stride, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `lo..hi` whose unit-stride input column `ox + kj - padding`
/// lies inside the image.
fn valid_span(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = g.padding.saturating_sub(kj).min(g.out_w);
    let hi = (g.width + g.padding).saturating_sub(kj).min(g.out_w).max(lo);
    (lo, hi)
}

/// Unfolds one image `[C,H,W]` into columns `[C*kh*kw, out_h*out_w]`.
fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let ol = g.out_len();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kj);
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        let start = lo + kj - g.padding;
                        line[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        continue;
                    }
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *d = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatters columns back onto an image, accumulating.
fn col2im_add(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let ol = g.out_len();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 {
                        let (lo, hi) = valid_span(g, kj);
                        let start = lo + kj - g.padding;
                        for (d, v) in dst[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]) {
                            *d += v;
                        }
                        continue;
                    }
                    for (ox, v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    kernel: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let in_len = g.channels * g.height * g.width;
    let ol = g.out_len();
    let pl = g.patch_len();
    let mut out = vec![0.0; batch * g.filters * ol];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; pl * ol]
    };
    for n in 0..batch {
        let image = &input[n * in_len..(n + 1) * in_len];
        let b: &[f64] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        let dst = &mut out[n * g.filters * ol..(n + 1) * g.filters * ol];
        let beta = match bias {
            Some(bias) => {
                for (row, b) in dst.chunks_mut(ol).zip(bias) {
                    row.fill(*b);
                }
                1.0
            }
            None => 0.0,
        };
        gemm(g.filters, pl, ol, kernel, Layout::row_major(pl), b, Layout::row_major(ol), beta, dst);
    }
    out
}

/// Vector-Jacobian products of the correlation. Returns `(d_input, d_kernel)`,
/// each only when requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    batch: usize,
    input: &[f64],
    kernel: &[f64],
    d_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let in_len = g.channels * g.height * g.width;
    let ol = g.out_len();
    let pl = g.patch_len();
    let mut d_input = want_input.then(|| vec![0.0; batch * in_len]);
    let mut d_kernel = want_kernel.then(|| vec![0.0; g.filters * pl]);
    let mut cols = vec![0.0; pl * ol];
    for n in 0..batch {
        let dy = &d_out[n * g.filters * ol..(n + 1) * g.filters * ol];
        if let Some(dk) = d_kernel.as_mut() {
            let image = &input[n * in_len..(n + 1) * in_len];
            let b: &[f64] = if g.is_pointwise() {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            // dK += dY · colsᵀ
            gemm(
                g.filters,
                ol,
                pl,
                dy,
                Layout::row_major(ol),
                b,
                Layout::transposed(ol),
                1.0,
                dk,
            );
        }
        if let Some(dx) = d_input.as_mut() {
            let dst = &mut dx[n * in_len..(n + 1) * in_len];
            // dcols = Kᵀ · dY
            if g.is_pointwise() {
                gemm(
                    pl,
                    g.filters,
                    ol,
                    kernel,
                    Layout::transposed(pl),
                    dy,
                    Layout::row_major(ol),
                    1.0,
                    dst,
                );
            } else {
                gemm(
                    pl,
                    g.filters,
                    ol,
                    kernel,
                    Layout::transposed(pl),
                    dy,
                    Layout::row_major(ol),
                    0.0,
                    &mut cols,
                );
                col2im_add(g, &cols, dst);
            }
        }
    }
    (d_input, d_kernel)
}

/// Non-overlapping average pooling with window and stride `size`.
pub(crate) fn avg_pool_forward(planes: usize, h: usize, w: usize, size: usize, input: &[f64]) -> Vec<f64> {
    let (oh, ow) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..size {
                    let row = (oy * size + dy) * w + ox * size;
                    for v in &src[row..row + size] {
                        acc += v;
                    }
                }
                dst[oy * ow + ox] = acc * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(planes: usize, h: usize, w: usize, size: usize, d_out: &[f64], d_in: &mut [f64]) {
    let (oh, ow) = (h / size, w / size);
    let scale = 1.0 / (size * size) as f64;
    for p in 0..planes {
        let src = &d_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut d_in[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox] * scale;
                for dy in 0..size {
                    let row = (oy * size + dy) * w + ox * size;
                    for d in &mut dst[row..row + size] {
                        *d += v;
                    }
                }
            }
        }
    }
}
