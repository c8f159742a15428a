//! Image quality metrics and reconstruction-to-ground-truth alignment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Largest batch aligned by exhaustive search.
pub const EXHAUSTIVE_ALIGN_MAX: usize = 8;

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok(())
}

/// PSNR in dB for unit dynamic range, capped for identical inputs.
pub fn psnr_slices(a: &[f64], b: &[f64]) -> Result<f64> {
    check_same("psnr", &[a.len()], &[b.len()])?;
    if a.is_empty() {
        return Err(Error::invalid("psnr of empty images"));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same("psnr", a.shape(), b.shape())?;
    psnr_slices(a.data(), b.data())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of two single-channel `h×w` planes over all fully contained
/// windows.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<f64> {
    check_same("ssim", &[a.len()], &[b.len()])?;
    if a.len() != h * w {
        return Err(Error::invalid("plane length does not match its dimensions"));
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let g = gaussian_window();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let wt = g[u] * g[v];
                    let k = (i + u) * w + j + v;
                    let (x, y) = (a[k], b[k]);
                    ma += wt * x;
                    mb += wt * y;
                    saa += wt * x * x;
                    sbb += wt * y * y;
                    sab += wt * x * y;
                }
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// SSIM of two `C×H×W` (or `1×C×H×W`) images, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same("ssim", a.shape(), b.shape())?;
    let s = a.shape();
    let (c, h, w) = match s.len() {
        3 => (s[0], s[1], s[2]),
        4 if s[0] == 1 => (s[1], s[2], s[3]),
        _ => return Err(Error::invalid(format!("ssim expects one image, got shape {s:?}"))),
    };
    let plane = h * w;
    let mut sum = 0.0;
    for ch in 0..c {
        let r = ch * plane..(ch + 1) * plane;
        sum += ssim_plane(&a.data()[r.clone()], &b.data()[r], h, w)?;
    }
    Ok(sum / c as f64)
}

/// `perm[i]` is the ground-truth index matched to reconstruction `i`.
pub fn batch_align(recon: &Tensor, truth: &Tensor) -> Result<Vec<usize>> {
    check_same("batch_align", recon.shape(), truth.shape())?;
    let b = recon.shape()[0];
    let table = psnr_table(recon, truth)?;
    Ok(if b <= EXHAUSTIVE_ALIGN_MAX {
        align_exhaustive(&table)
    } else {
        align_greedy(&table)
    })
}

/// `table[i][j] = psnr(recon_i, truth_j)`.
pub fn psnr_table(recon: &Tensor, truth: &Tensor) -> Result<Vec<Vec<f64>>> {
    check_same("psnr_table", recon.shape(), truth.shape())?;
    let b = recon.shape()[0];
    let n = recon.numel() / b;
    (0..b)
        .map(|i| {
            (0..b)
                .map(|j| psnr_slices(&recon.data()[i * n..(i + 1) * n], &truth.data()[j * n..(j + 1) * n]))
                .collect()
        })
        .collect()
}

fn assignment_score(table: &[Vec<f64>], perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| table[i][j]).sum()
}

/// Best assignment over all permutations; the first optimum in
/// lexicographic order wins.
pub fn align_exhaustive(table: &[Vec<f64>]) -> Vec<usize> {
    let n = table.len();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = perm.clone();
    let mut best_score = assignment_score(table, &perm);
    while next_permutation(&mut perm) {
        let s = assignment_score(table, &perm);
        if s > best_score {
            best_score = s;
            best = perm.clone();
        }
    }
    best
}

fn next_permutation(p: &mut [usize]) -> bool {
    if p.len() < 2 {
        return false;
    }
    let mut i = p.len() - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = p.len() - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// Repeatedly takes the highest remaining pair.
pub fn align_greedy(table: &[Vec<f64>]) -> Vec<usize> {
    let n = table.len();
    let mut perm = vec![usize::MAX; n];
    let mut used = vec![false; n];
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    pairs.sort_by(|&(a, b), &(c, d)| table[c][d].total_cmp(&table[a][b]).then((a, b).cmp(&(c, d))));
    for (i, j) in pairs {
        if perm[i] == usize::MAX && !used[j] {
            perm[i] = j;
            used[j] = true;
        }
    }
    perm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: Vec<f64>,
    /// Empty when images are smaller than the SSIM window.
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: Option<f64>,
    pub alignment: Vec<usize>,
}

/// Aligns `recon` to `truth` and scores each matched pair.
pub fn evaluate(recon: &Tensor, truth: &Tensor) -> Result<MetricReport> {
    let alignment = batch_align(recon, truth)?;
    let b = recon.shape()[0];
    let n = recon.numel() / b;
    let img_shape = &recon.shape()[1..];
    let image = |t: &Tensor, i: usize| Tensor::new(img_shape, t.data()[i * n..(i + 1) * n].to_vec());
    let mut psnrs = Vec::with_capacity(b);
    let mut ssims = Vec::with_capacity(b);
    let with_ssim = img_shape[1] >= SSIM_WINDOW && img_shape[2] >= SSIM_WINDOW;
    for (i, &j) in alignment.iter().enumerate() {
        let (x, y) = (image(recon, i)?, image(truth, j)?);
        psnrs.push(psnr(&x, &y)?);
        if with_ssim {
            ssims.push(ssim(&x, &y)?);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricReport {
        mean_psnr: mean(&psnrs),
        mean_ssim: with_ssim.then(|| mean(&ssims)),
        psnr: psnrs,
        ssim: ssims,
        alignment,
    })
}
