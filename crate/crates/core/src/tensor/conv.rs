// Convolution kernels. Everything here works on flat buffers and accumulates
// in f64; the tape owns shapes and storage precision.
//
// Learnable convolutions lower to im2col + GEMM per batch item. Batch items are
// processed in order and weight gradients are accumulated sample by sample, so
// results do not depend on scheduling.

use super::Real;

/// Geometry of a square-kernel convolution with "same" zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, cout: usize, h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = (k - 1) / 2;
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        ConvGeom {
            cin,
            cout,
            h,
            w,
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    /// Rows of the im2col matrix.
    pub fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Output pixels per channel.
    pub fn pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// C[m×n] = A[m×k]·B[k×n] + beta·C, arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the debug assertions above spell out the extents each pointer is
    // read or written at; every caller passes buffers sized from the same geometry.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.pixels();
    if g.k == 1 && g.stride == 1 {
        for (dst, src) in cols.iter_mut().zip(x) {
            *dst = src.to_f64();
        }
        return;
    }
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize].to_f64()
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.pixels();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward pass for `n` batch items. `w` is `[cout, cin·k·k]`, `b` is `[cout]`.
pub(crate) fn conv_forward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    b: &[f64],
) -> Vec<f64> {
    let (kdim, p) = (g.patch(), g.pixels());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let mut out = vec![0.0; n * out_per];
    let mut cols = vec![0.0; kdim * p];
    for i in 0..n {
        im2col(&x[i * in_per..(i + 1) * in_per], g, &mut cols);
        let o = &mut out[i * out_per..(i + 1) * out_per];
        for (co, row) in o.chunks_mut(p).enumerate() {
            row.fill(b[co]);
        }
        gemm(
            g.cout,
            kdim,
            p,
            w,
            (kdim, 1),
            &cols,
            (p, 1),
            1.0,
            o,
            (p, 1),
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn conv_backward<T: Real>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[f64],
    gout: &[f64],
    need_dx: bool,
) -> ConvGrads {
    let (kdim, p) = (g.patch(), g.pixels());
    let in_per = g.cin * g.h * g.w;
    let out_per = g.cout * p;
    let mut dw = vec![0.0; g.cout * kdim];
    let mut db = vec![0.0; g.cout];
    let mut dx = need_dx.then(|| vec![0.0; n * in_per]);
    let mut cols = vec![0.0; kdim * p];
    let mut dcols = vec![0.0; kdim * p];
    for i in 0..n {
        let go = &gout[i * out_per..(i + 1) * out_per];
        for (co, row) in go.chunks(p).enumerate() {
            db[co] += row.iter().sum::<f64>();
        }
        im2col(&x[i * in_per..(i + 1) * in_per], g, &mut cols);
        // dW[cout×K] += dOut[cout×P] · colsᵀ[P×K]
        gemm(
            g.cout,
            p,
            kdim,
            go,
            (p, 1),
            &cols,
            (1, p),
            1.0,
            &mut dw,
            (kdim, 1),
        );
        if let Some(dx) = dx.as_mut() {
            // dcols[K×P] = Wᵀ[K×cout] · dOut[cout×P]
            gemm(
                kdim,
                g.cout,
                p,
                w,
                (1, kdim),
                go,
                (p, 1),
                0.0,
                &mut dcols,
                (p, 1),
            );
            col2im(&dcols, g, &mut dx[i * in_per..(i + 1) * in_per]);
        }
    }
    ConvGrads { dx, dw, db }
}

/// Per-channel 3×3 cross-correlation with a constant kernel. Out-of-range taps
/// read the nearest edge pixel.
pub(crate) fn depthwise3x3_forward<T: Real>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    kernel: &[[f64; 3]; 3],
) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                // column sums first: antisymmetric kernels then cancel exactly
                let mut acc = 0.0;
                for dx in 0..3 {
                    let ix = clamp_tap(xx, dx, w);
                    let mut col = 0.0;
                    for (dy, krow) in kernel.iter().enumerate() {
                        if krow[dx] != 0.0 {
                            col += krow[dx] * src[clamp_tap(y, dy, h) * w + ix].to_f64();
                        }
                    }
                    acc += col;
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    out
}

#[inline]
fn clamp_tap(pos: usize, tap: usize, extent: usize) -> usize {
    (pos + tap).saturating_sub(1).min(extent - 1)
}

pub(crate) fn depthwise3x3_backward(
    gout: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    kernel: &[[f64; 3]; 3],
) -> Vec<f64> {
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let go = &gout[p * h * w..(p + 1) * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let g = go[y * w + xx];
                if g == 0.0 {
                    continue;
                }
                for (dy, krow) in kernel.iter().enumerate() {
                    let iy = clamp_tap(y, dy, h);
                    for (dx_, kv) in krow.iter().enumerate() {
                        dst[iy * w + clamp_tap(xx, dx_, w)] += kv * g;
                    }
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    // Direct six-loop convolution used as the reference for the GEMM lowering.
    fn naive(x: &[f64], n: usize, g: &ConvGeom, w: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; n * g.cout * g.pixels()];
        for i in 0..n {
            for co in 0..g.cout {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = b[co];
                        for ci in 0..g.cin {
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize
                                    {
                                        continue;
                                    }
                                    acc += w[((co * g.cin + ci) * g.k + ky) * g.k + kx]
                                        * x[((i * g.cin + ci) * g.h + iy as usize) * g.w
                                            + ix as usize];
                                }
                            }
                        }
                        out[((i * g.cout + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(len: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..len)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn gemm_lowering_matches_direct_loops() {
        for &(k, stride, h, w) in &[(3, 1, 5, 6), (3, 2, 7, 5), (1, 1, 4, 4), (1, 2, 5, 5)] {
            let g = ConvGeom::new(3, 2, h, w, k, stride);
            let x = pseudo(2 * 3 * h * w, 1);
            let wt = pseudo(g.cout * g.patch(), 2);
            let b = pseudo(g.cout, 3);
            let fast = conv_forward(&x, 2, &g, &wt, &b);
            let slow = naive(&x, 2, &g, &wt, &b);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() < 1e-12, "k={k} s={stride}: {a} vs {e}");
            }
        }
    }

    #[test]
    fn stride_two_uses_ceil_division() {
        let g = ConvGeom::new(1, 1, 7, 8, 3, 2);
        assert_eq!((g.ho, g.wo), (4, 4));
        let g = ConvGeom::new(1, 1, 7, 8, 1, 2);
        assert_eq!((g.ho, g.wo), (4, 4));
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), gy> == <x, dx> + <w, dw> + <b, db> for the linear map in each argument.
        let g = ConvGeom::new(2, 3, 5, 4, 3, 2);
        let x = pseudo(2 * 2 * 5 * 4, 7);
        let wt = pseudo(g.cout * g.patch(), 8);
        let zero_b = vec![0.0; g.cout];
        let gy = pseudo(2 * g.cout * g.pixels(), 9);
        let y = conv_forward(&x, 2, &g, &wt, &zero_b);
        let lhs: f64 = y.iter().zip(&gy).map(|(a, b)| a * b).sum();
        let grads = conv_backward(&x, 2, &g, &wt, &gy, true);
        let via_x: f64 = x.iter().zip(grads.dx.as_ref().unwrap()).map(|(a, b)| a * b).sum();
        let via_w: f64 = wt.iter().zip(&grads.dw).map(|(a, b)| a * b).sum();
        assert!((lhs - via_x).abs() < 1e-10);
        assert!((lhs - via_w).abs() < 1e-10);
    }
}
