//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use ginas::tensor::{InterpMode, ResampleDir, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Direct seven-loop grouped convolution with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_loops(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
) -> (Vec<usize>, Vec<f64>) {
    let [n, cin, h, wd]: [usize; 4] = x.shape().try_into().unwrap();
    let [cout, cpg, kh, kw]: [usize; 4] = w.shape().try_into().unwrap();
    let oh = (h + 2 * padding - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (wd + 2 * padding - dilation * (kw - 1) - 1) / stride + 1;
    let opg = cout / groups;
    assert_eq!(cpg * groups, cin);
    let xd = x.data();
    let wdat = w.data();
    let mut out = vec![0.0; n * cout * oh * ow];
    for b in 0..n {
        for co in 0..cout {
            let g = co / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[co]);
                    for ci in 0..cpg {
                        let c = g * cpg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                                let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((b * cin + c) * h + iy as usize) * wd + ix as usize];
                                let wv = wdat[((co * cpg + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    (vec![n, cout, oh, ow], out)
}

/// `y = x W + b` with `W` stored `[in, out]`.
pub fn linear_loops(x: &Tensor, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let [n, din]: [usize; 2] = x.shape().try_into().unwrap();
    let dout = w.shape()[1];
    let mut out = vec![0.0; n * dout];
    for i in 0..n {
        for j in 0..dout {
            let mut acc = b.data()[j];
            for k in 0..din {
                acc += x.data()[i * din + k] * w.data()[k * dout + j];
            }
            out[i * dout + j] = acc;
        }
    }
    out
}

fn keys_cubic(s: f64) -> f64 {
    let s = s.abs();
    if s < 1.0 {
        1.5 * s.powi(3) - 2.5 * s.powi(2) + 1.0
    } else if s < 2.0 {
        -0.5 * s.powi(3) + 2.5 * s.powi(2) - 4.0 * s + 2.0
    } else {
        0.0
    }
}

/// Factor-2 resize evaluated pixel by pixel with half-pixel source
/// coordinates and edge clamping.
pub fn resample_loops(x: &Tensor, dir: ResampleDir, mode: InterpMode) -> Vec<f64> {
    let [n, c, h, w]: [usize; 4] = x.shape().try_into().unwrap();
    let (oh, ow, ratio) = match dir {
        ResampleDir::Up => (2 * h, 2 * w, 0.5),
        ResampleDir::Down => (h / 2, w / 2, 2.0),
    };
    let at = |p: usize, y: isize, xx: isize| -> f64 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let xx = xx.clamp(0, w as isize - 1) as usize;
        x.data()[(p * h + y) * w + xx]
    };
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let v = match mode {
                    InterpMode::Nearest => {
                        let sy = (oy as f64 * ratio).floor() as isize;
                        let sx = (ox as f64 * ratio).floor() as isize;
                        at(p, sy, sx)
                    }
                    InterpMode::Bilinear => {
                        let sy = ((oy as f64 + 0.5) * ratio - 0.5).max(0.0);
                        let sx = ((ox as f64 + 0.5) * ratio - 0.5).max(0.0);
                        let (y0, x0) = (sy.floor(), sx.floor());
                        let (fy, fx) = (sy - y0, sx - x0);
                        let (y0, x0) = (y0 as isize, x0 as isize);
                        (1.0 - fy) * (1.0 - fx) * at(p, y0, x0)
                            + (1.0 - fy) * fx * at(p, y0, x0 + 1)
                            + fy * (1.0 - fx) * at(p, y0 + 1, x0)
                            + fy * fx * at(p, y0 + 1, x0 + 1)
                    }
                    InterpMode::Bicubic => {
                        let sy = (oy as f64 + 0.5) * ratio - 0.5;
                        let sx = (ox as f64 + 0.5) * ratio - 0.5;
                        let (y0, x0) = (sy.floor() as isize, sx.floor() as isize);
                        let mut acc = 0.0;
                        for dy in -1..=2isize {
                            for dx in -1..=2isize {
                                let wy = keys_cubic(sy - (y0 + dy) as f64);
                                let wx = keys_cubic(sx - (x0 + dx) as f64);
                                acc += wy * wx * at(p, y0 + dy, x0 + dx);
                            }
                        }
                        acc
                    }
                };
                out.push(v);
            }
        }
    }
    out
}

/// Bias-corrected Adam on a single coordinate, optionally on the gradient
/// sign.
pub struct ScalarAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub signed: bool,
    m: f64,
    v: f64,
    t: i32,
}

impl ScalarAdam {
    pub fn new(lr: f64, signed: bool) -> Self {
        ScalarAdam {
            lr,
            b1: 0.9,
            b2: 0.999,
            eps: 1e-8,
            signed,
            m: 0.0,
            v: 0.0,
            t: 0,
        }
    }

    pub fn step(&mut self, p: f64, g: f64) -> f64 {
        let g = if self.signed {
            if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            }
        } else {
            g
        };
        self.t += 1;
        self.m = self.b1 * self.m + (1.0 - self.b1) * g;
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g;
        let mh = self.m / (1.0 - self.b1.powi(self.t));
        let vh = self.v / (1.0 - self.b2.powi(self.t));
        p - self.lr * mh / (vh.sqrt() + self.eps)
    }
}

/// Permutation maximizing the summed PSNR, by trying all of them
/// recursively.
pub fn best_assignment(table: &[Vec<f64>]) -> f64 {
    fn go(table: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == table.len() {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for j in 0..table.len() {
            if !used[j] {
                used[j] = true;
                best = best.max(table[row][j] + go(table, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(table, 0, &mut vec![false; table.len()])
}
