//! Dense kernels shared by the forward and backward rules.

/// Row-major matrix view description: `rows × cols` with explicit strides.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl Mat {
    pub fn rm(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        ((self.rows - 1) as isize * self.rs + (self.cols - 1) as isize * self.cs) as usize
    }
}

/// `c = alpha * a·b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: &[f64], am: Mat, b: &[f64], bm: Mat, beta: f64, c: &mut [f64], cm: Mat) {
    assert_eq!(am.cols, bm.rows);
    assert_eq!(am.rows, cm.rows);
    assert_eq!(bm.cols, cm.cols);
    let (m, k, n) = (am.rows, am.cols, bm.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = (i as isize * cm.rs + j as isize * cm.cs) as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    assert!(am.max_offset() < a.len());
    assert!(bm.max_offset() < b.len());
    assert!(cm.max_offset() < c.len());
    if m * n * k <= 4096 {
        small_gemm(alpha, a, am, b, bm, beta, c, cm);
        return;
    }
    // SAFETY: every index touched by dgemm lies within the bounds checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            am.rs,
            am.cs,
            b.as_ptr(),
            bm.rs,
            bm.cs,
            beta,
            c.as_mut_ptr(),
            cm.rs,
            cm.cs,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn small_gemm(alpha: f64, a: &[f64], am: Mat, b: &[f64], bm: Mat, beta: f64, c: &mut [f64], cm: Mat) {
    let (m, k, n) = (am.rows, am.cols, bm.cols);
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                let av = a[(i as isize * am.rs + p as isize * am.cs) as usize];
                let bv = b[(p as isize * bm.rs + j as isize * bm.cs) as usize];
                acc += av * bv;
            }
            let idx = (i as isize * cm.rs + j as isize * cm.cs) as usize;
            c[idx] = if beta == 0.0 { alpha * acc } else { alpha * acc + beta * c[idx] };
        }
    }
}

/// Geometry of a channels-last 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_width(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Unfolds one image `[h, w, cin]` into `[ho*wo, kh*kw*cin]`.
pub(crate) fn im2col(img: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let cw = g.col_width();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &mut cols[(oy * g.wo + ox) * cw..(oy * g.wo + ox + 1) * cw];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    let dst = &mut row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                        dst.fill(0.0);
                    } else {
                        let src = (iy as usize * g.w + ix as usize) * g.cin;
                        dst.copy_from_slice(&img[src..src + g.cin]);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, img: &mut [f64]) {
    let cw = g.col_width();
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let row = &cols[(oy * g.wo + ox) * cw..(oy * g.wo + ox + 1) * cw];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    let src = &row[(ky * g.kw + kx) * g.cin..(ky * g.kw + kx + 1) * g.cin];
                    let dst = (iy as usize * g.w + ix as usize) * g.cin;
                    img[dst..dst + g.cin]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}
