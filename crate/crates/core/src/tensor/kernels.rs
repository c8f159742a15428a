//! Raw numeric loops behind the differentiable ops. Everything here works on
//! flat row-major slices; shape validation happens in the callers.

use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvCfg {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvCfg {
    fn default() -> Self {
        ConvCfg {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl ConvCfg {
    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Output positions `o` in `[lo, hi)` for which `o * stride + offset` falls
/// inside `[0, in_len)`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, offset: isize, stride: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = (last / s + 1).min(out_len as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// Geometry shared by the three convolution kernels.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub cfg: ConvCfg,
}

impl ConvGeom {
    fn cin_per_group(&self) -> usize {
        self.cin / self.cfg.groups
    }

    fn cout_per_group(&self) -> usize {
        self.cout / self.cfg.groups
    }

    /// Calls `f(n, co, ci, ky, kx, oy_range, ox_range, iy0, ix0)` for every
    /// kernel tap with a nonempty valid output window.
    #[inline]
    fn for_each_tap(
        &self,
        mut f: impl FnMut(usize, usize, usize, usize, usize, (usize, usize), (usize, usize), isize, isize),
    ) {
        let cig = self.cin_per_group();
        let cog = self.cout_per_group();
        let p = self.cfg.padding as isize;
        let d = self.cfg.dilation as isize;
        let s = self.cfg.stride;
        for n in 0..self.n {
            for co in 0..self.cout {
                let g = co / cog;
                for cil in 0..cig {
                    let ci = g * cig + cil;
                    for ky in 0..self.kh {
                        let offy = ky as isize * d - p;
                        let ry = valid_range(self.oh, self.h, offy, s);
                        if ry.0 == ry.1 {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let offx = kx as isize * d - p;
                            let rx = valid_range(self.ow, self.w, offx, s);
                            if rx.0 == rx.1 {
                                continue;
                            }
                            f(n, co, ci, ky, kx, ry, rx, offy, offx);
                        }
                    }
                }
            }
        }
    }

    fn widx(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        let cil = ci % self.cin_per_group();
        ((co * self.cin_per_group() + cil) * self.kh + ky) * self.kw + kx
    }
}

pub fn conv2d_forward(x: &[f64], wt: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; geom.n * geom.cout * geom.oh * geom.ow];
    let s = geom.cfg.stride;
    geom.for_each_tap(|n, co, ci, ky, kx, ry, rx, offy, offx| {
        let wv = wt[geom.widx(co, ci, ky, kx)];
        let obase = (n * geom.cout + co) * geom.oh * geom.ow;
        let ibase = (n * geom.cin + ci) * geom.h * geom.w;
        for oy in ry.0..ry.1 {
            let iy = (oy * s) as isize + offy;
            let orow = &mut out[obase + oy * geom.ow..obase + (oy + 1) * geom.ow];
            let irow = &x[ibase + iy as usize * geom.w..ibase + (iy as usize + 1) * geom.w];
            let ix0 = (rx.0 * s) as isize + offx;
            if s == 1 {
                let len = rx.1 - rx.0;
                let src = &irow[ix0 as usize..ix0 as usize + len];
                for (o, i) in orow[rx.0..rx.1].iter_mut().zip(src) {
                    *o += wv * i;
                }
            } else {
                for (j, ox) in (rx.0..rx.1).enumerate() {
                    orow[ox] += wv * irow[ix0 as usize + j * s];
                }
            }
        }
    });
    out
}

/// Adjoint of [`conv2d_forward`] with respect to its input.
pub fn conv2d_input_grad(gy: &[f64], wt: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let mut gx = vec![0.0; geom.n * geom.cin * geom.h * geom.w];
    let s = geom.cfg.stride;
    geom.for_each_tap(|n, co, ci, ky, kx, ry, rx, offy, offx| {
        let wv = wt[geom.widx(co, ci, ky, kx)];
        let obase = (n * geom.cout + co) * geom.oh * geom.ow;
        let ibase = (n * geom.cin + ci) * geom.h * geom.w;
        for oy in ry.0..ry.1 {
            let iy = ((oy * s) as isize + offy) as usize;
            let grow = &gy[obase + oy * geom.ow..obase + (oy + 1) * geom.ow];
            let xrow = &mut gx[ibase + iy * geom.w..ibase + (iy + 1) * geom.w];
            let ix0 = ((rx.0 * s) as isize + offx) as usize;
            if s == 1 {
                let len = rx.1 - rx.0;
                for (xi, g) in xrow[ix0..ix0 + len].iter_mut().zip(&grow[rx.0..rx.1]) {
                    *xi += wv * g;
                }
            } else {
                for (j, ox) in (rx.0..rx.1).enumerate() {
                    xrow[ix0 + j * s] += wv * grow[ox];
                }
            }
        }
    });
    gx
}

/// Adjoint of [`conv2d_forward`] with respect to its weight.
pub fn conv2d_weight_grad(x: &[f64], gy: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let mut gw = vec![0.0; geom.cout * geom.cin_per_group() * geom.kh * geom.kw];
    let s = geom.cfg.stride;
    geom.for_each_tap(|n, co, ci, ky, kx, ry, rx, offy, offx| {
        let obase = (n * geom.cout + co) * geom.oh * geom.ow;
        let ibase = (n * geom.cin + ci) * geom.h * geom.w;
        let mut acc = 0.0;
        for oy in ry.0..ry.1 {
            let iy = ((oy * s) as isize + offy) as usize;
            let grow = &gy[obase + oy * geom.ow..obase + (oy + 1) * geom.ow];
            let xrow = &x[ibase + iy * geom.w..ibase + (iy + 1) * geom.w];
            let ix0 = ((rx.0 * s) as isize + offx) as usize;
            if s == 1 {
                let len = rx.1 - rx.0;
                acc += xrow[ix0..ix0 + len]
                    .iter()
                    .zip(&grow[rx.0..rx.1])
                    .map(|(a, b)| a * b)
                    .sum::<f64>();
            } else {
                for (j, ox) in (rx.0..rx.1).enumerate() {
                    acc += xrow[ix0 + j * s] * grow[ox];
                }
            }
        }
        gw[geom.widx(co, ci, ky, kx)] += acc;
    });
    gw
}

/// `a` is m×k, `b` is k×n.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResampleDir {
    Up,
    Down,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InterpMode {
    Nearest,
    Bilinear,
    Bicubic,
}

/// Catmull-Rom coefficient.
pub const CUBIC_A: f64 = -0.5;

pub fn cubic_weight(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Per-output-index list of `(source index, weight)`.
pub type Taps = Vec<Vec<(usize, f64)>>;

/// 1-D taps for a factor-2 resize with half-pixel centers.
pub fn axis_taps(in_len: usize, dir: ResampleDir, mode: InterpMode) -> Taps {
    let (out_len, scale) = match dir {
        ResampleDir::Up => (in_len * 2, 0.5),
        ResampleDir::Down => (in_len / 2, 2.0),
    };
    let clamp = |i: isize| i.clamp(0, in_len as isize - 1) as usize;
    (0..out_len)
        .map(|o| match mode {
            InterpMode::Nearest => {
                let src = ((o as f64) * scale).floor() as usize;
                vec![(src.min(in_len - 1), 1.0)]
            }
            InterpMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = src.floor() as isize;
                let t = src - i0 as f64;
                let i1 = clamp(i0 + 1);
                vec![(clamp(i0), 1.0 - t), (i1, t)]
            }
            InterpMode::Bicubic => {
                let src = (o as f64 + 0.5) * scale - 0.5;
                let i0 = src.floor() as isize;
                let t = src - i0 as f64;
                (-1..=2)
                    .map(|k| (clamp(i0 + k), cubic_weight(t - k as f64)))
                    .collect()
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ResamplePlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub taps_y: Taps,
    pub taps_x: Taps,
}

impl ResamplePlan {
    pub fn new(in_h: usize, in_w: usize, dir: ResampleDir, mode: InterpMode) -> Arc<Self> {
        let taps_y = axis_taps(in_h, dir, mode);
        let taps_x = axis_taps(in_w, dir, mode);
        Arc::new(ResamplePlan {
            in_h,
            in_w,
            out_h: taps_y.len(),
            out_w: taps_x.len(),
            taps_y,
            taps_x,
        })
    }

    pub fn apply(&self, x: &[f64], planes: usize) -> Vec<f64> {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        let mut out = vec![0.0; planes * oh * ow];
        let mut tmp = vec![0.0; ih * ow];
        for p in 0..planes {
            let src = &x[p * ih * iw..(p + 1) * ih * iw];
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for y in 0..ih {
                for (ox, taps) in self.taps_x.iter().enumerate() {
                    tmp[y * ow + ox] = taps.iter().map(|&(sx, w)| w * src[y * iw + sx]).sum();
                }
            }
            let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
            for (oy, taps) in self.taps_y.iter().enumerate() {
                let drow = &mut dst[oy * ow..(oy + 1) * ow];
                for &(sy, w) in taps {
                    for (d, t) in drow.iter_mut().zip(&tmp[sy * ow..(sy + 1) * ow]) {
                        *d += w * t;
                    }
                }
            }
        }
        out
    }

    pub fn apply_transpose(&self, g: &[f64], planes: usize) -> Vec<f64> {
        let (ih, iw, oh, ow) = (self.in_h, self.in_w, self.out_h, self.out_w);
        let mut out = vec![0.0; planes * ih * iw];
        let mut tmp = vec![0.0; ih * ow];
        for p in 0..planes {
            let src = &g[p * oh * ow..(p + 1) * oh * ow];
            tmp.iter_mut().for_each(|v| *v = 0.0);
            for (oy, taps) in self.taps_y.iter().enumerate() {
                let grow = &src[oy * ow..(oy + 1) * ow];
                for &(sy, w) in taps {
                    for (t, gv) in tmp[sy * ow..(sy + 1) * ow].iter_mut().zip(grow) {
                        *t += w * gv;
                    }
                }
            }
            let dst = &mut out[p * ih * iw..(p + 1) * ih * iw];
            for y in 0..ih {
                for (ox, taps) in self.taps_x.iter().enumerate() {
                    let v = tmp[y * ow + ox];
                    for &(sx, w) in taps {
                        dst[y * iw + sx] += w * v;
                    }
                }
            }
        }
        out
    }
}
