//! Direct convolution kernels. Three paths, picked by shape alone:
//! a gemm for 1x1/stride-1, a dense stencil for 3x3/stride-1 (the hot case),
//! and a generic shifted-row loop for everything else. No im2col buffers;
//! the stencil path pads into a thread-local scratch.

use std::cell::RefCell;

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};

thread_local! {
    static SCRATCH: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

#[derive(Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_1x1(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
    fn is_stencil3(&self) -> bool {
        self.kh == 3 && self.kw == 3 && self.stride == 1
    }
}

pub fn forward(x: &[f64], kernel: &[f64], g: ConvGeom, out: &mut [f64]) {
    if g.is_1x1() {
        gemm_nn(g.cout, g.cin, g.h * g.w, kernel, x, out);
    } else if g.is_stencil3() {
        stencil3_forward(x, kernel, g, out);
    } else {
        generic_forward(x, kernel, g, out);
    }
}

pub fn backward_input(gout: &[f64], kernel: &[f64], g: ConvGeom, dx: &mut [f64]) {
    if g.is_1x1() {
        gemm_tn(g.cin, g.cout, g.h * g.w, kernel, gout, dx);
    } else if g.is_stencil3() {
        // dx = correlation of gout with the 180-degree-rotated kernel,
        // channels swapped, padding (k-1-pad)
        let mut kflip = vec![0.0; kernel.len()];
        for co in 0..g.cout {
            for ci in 0..g.cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        kflip[((ci * g.cout + co) * 3 + (2 - ky)) * 3 + (2 - kx)] =
                            kernel[((co * g.cin + ci) * 3 + ky) * 3 + kx];
                    }
                }
            }
        }
        let gflip = ConvGeom {
            cin: g.cout,
            h: g.oh,
            w: g.ow,
            cout: g.cin,
            pad: 2 - g.pad,
            oh: g.h,
            ow: g.w,
            ..g
        };
        stencil3_forward(gout, &kflip, gflip, dx);
    } else {
        generic_backward_input(gout, kernel, g, dx);
    }
}

pub fn backward_kernel(gout: &[f64], x: &[f64], g: ConvGeom, dk: &mut [f64]) {
    if g.is_1x1() {
        gemm_nt(g.cout, g.h * g.w, g.cin, gout, x, dk);
    } else if g.is_stencil3() {
        stencil3_backward_kernel(gout, x, g, dk);
    } else {
        generic_backward_kernel(gout, x, g, dk);
    }
}

// ── 3x3 stride-1 stencil ────────────────────────────────────────────────

/// Runs `f` with the input padded by `pad` zeros on each side
/// (plane-major, rows of width `w + 2*pad`).
fn with_padded<R>(x: &[f64], c: usize, h: usize, w: usize, pad: usize, f: impl FnOnce(&[f64], usize) -> R) -> R {
    if pad == 0 {
        return f(x, w);
    }
    let pw = w + 2 * pad;
    let ph = h + 2 * pad;
    SCRATCH.with(|s| {
        let mut buf = s.borrow_mut();
        buf.clear();
        buf.resize(c * ph * pw, 0.0);
        for ci in 0..c {
            for y in 0..h {
                let src = &x[ci * h * w + y * w..ci * h * w + (y + 1) * w];
                let dst_off = ci * ph * pw + (y + pad) * pw + pad;
                buf[dst_off..dst_off + w].copy_from_slice(src);
            }
        }
        f(&buf, pw)
    })
}

fn stencil3_forward(x: &[f64], kernel: &[f64], g: ConvGeom, out: &mut [f64]) {
    debug_assert!(g.pad <= 2);
    with_padded(x, g.cin, g.h, g.w, g.pad, |xp, pw| {
        let ph = g.h + 2 * g.pad;
        for co in 0..g.cout {
            let out_plane = &mut out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
            for ci in 0..g.cin {
                let plane = &xp[ci * ph * pw..(ci + 1) * ph * pw];
                let kbase = ((co * g.cin + ci) * 3) * 3;
                let k = &kernel[kbase..kbase + 9];
                for oy in 0..g.oh {
                    let r0 = &plane[oy * pw..oy * pw + g.ow + 2];
                    let r1 = &plane[(oy + 1) * pw..(oy + 1) * pw + g.ow + 2];
                    let r2 = &plane[(oy + 2) * pw..(oy + 2) * pw + g.ow + 2];
                    let orow = &mut out_plane[oy * g.ow..(oy + 1) * g.ow];
                    for ox in 0..g.ow {
                        orow[ox] += k[0] * r0[ox]
                            + k[1] * r0[ox + 1]
                            + k[2] * r0[ox + 2]
                            + k[3] * r1[ox]
                            + k[4] * r1[ox + 1]
                            + k[5] * r1[ox + 2]
                            + k[6] * r2[ox]
                            + k[7] * r2[ox + 1]
                            + k[8] * r2[ox + 2];
                    }
                }
            }
        }
    });
}

fn stencil3_backward_kernel(gout: &[f64], x: &[f64], g: ConvGeom, dk: &mut [f64]) {
    with_padded(x, g.cin, g.h, g.w, g.pad, |xp, pw| {
        let ph = g.h + 2 * g.pad;
        for co in 0..g.cout {
            let g_plane = &gout[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
            for ci in 0..g.cin {
                let plane = &xp[ci * ph * pw..(ci + 1) * ph * pw];
                let mut acc = [0.0f64; 9];
                for oy in 0..g.oh {
                    let grow = &g_plane[oy * g.ow..(oy + 1) * g.ow];
                    let r0 = &plane[oy * pw..oy * pw + g.ow + 2];
                    let r1 = &plane[(oy + 1) * pw..(oy + 1) * pw + g.ow + 2];
                    let r2 = &plane[(oy + 2) * pw..(oy + 2) * pw + g.ow + 2];
                    for ox in 0..g.ow {
                        let gv = grow[ox];
                        acc[0] += gv * r0[ox];
                        acc[1] += gv * r0[ox + 1];
                        acc[2] += gv * r0[ox + 2];
                        acc[3] += gv * r1[ox];
                        acc[4] += gv * r1[ox + 1];
                        acc[5] += gv * r1[ox + 2];
                        acc[6] += gv * r2[ox];
                        acc[7] += gv * r2[ox + 1];
                        acc[8] += gv * r2[ox + 2];
                    }
                }
                let kbase = ((co * g.cin + ci) * 3) * 3;
                for (d, a) in dk[kbase..kbase + 9].iter_mut().zip(acc) {
                    *d += a;
                }
            }
        }
    });
}

// ── generic shifted-row path ────────────────────────────────────────────

/// Valid output-column range for a kernel column `kx`:
/// `ix = ox*stride + kx - pad` must land in `[0, w)`.
#[inline]
fn ox_range(ow: usize, w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi = if w + pad > kx {
        ((w + pad - 1 - kx) / stride + 1).min(ow)
    } else {
        0
    };
    (lo.min(ow), hi.max(lo).min(ow))
}

fn generic_forward(x: &[f64], kernel: &[f64], g: ConvGeom, out: &mut [f64]) {
    for co in 0..g.cout {
        let out_plane = &mut out[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.cin {
            let x_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kv = kernel[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let (lo, hi) = ox_range(g.ow, g.w, g.stride, kx, g.pad);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let xrow = &x_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let orow = &mut out_plane[oy * g.ow + lo..oy * g.ow + hi];
                        if g.stride == 1 {
                            let xoff = lo + kx - g.pad;
                            for (o, &xv) in orow.iter_mut().zip(&xrow[xoff..xoff + (hi - lo)]) {
                                *o += kv * xv;
                            }
                        } else {
                            for (i, o) in orow.iter_mut().enumerate() {
                                *o += kv * xrow[(lo + i) * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn generic_backward_input(gout: &[f64], kernel: &[f64], g: ConvGeom, dx: &mut [f64]) {
    for co in 0..g.cout {
        let g_plane = &gout[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.cin {
            let dx_plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let kv = kernel[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let (lo, hi) = ox_range(g.ow, g.w, g.stride, kx, g.pad);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let grow = &g_plane[oy * g.ow + lo..oy * g.ow + hi];
                        let dxrow =
                            &mut dx_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        if g.stride == 1 {
                            let xoff = lo + kx - g.pad;
                            for (d, &gv) in dxrow[xoff..xoff + (hi - lo)].iter_mut().zip(grow) {
                                *d += kv * gv;
                            }
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                dxrow[(lo + i) * g.stride + kx - g.pad] += kv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn generic_backward_kernel(gout: &[f64], x: &[f64], g: ConvGeom, dk: &mut [f64]) {
    for co in 0..g.cout {
        let g_plane = &gout[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
        for ci in 0..g.cin {
            let x_plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let (lo, hi) = ox_range(g.ow, g.w, g.stride, kx, g.pad);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let grow = &g_plane[oy * g.ow + lo..oy * g.ow + hi];
                        let xrow = &x_plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        if g.stride == 1 {
                            let xoff = lo + kx - g.pad;
                            acc += dot4(grow, &xrow[xoff..xoff + (hi - lo)]);
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                acc += gv * xrow[(lo + i) * g.stride + kx - g.pad];
                            }
                        }
                    }
                    dk[((co * g.cin + ci) * g.kh + ky) * g.kw + kx] += acc;
                }
            }
        }
    }
}

#[inline]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..chunks {
        let j = i * 4;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    let mut tail = 0.0;
    for j in chunks * 4..n {
        tail += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3) + tail
}
