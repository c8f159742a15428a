//! Client-side gradient perturbations and the attacker's estimate of them.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::victim::GradientSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseKind {
    None,
    GaussianNoise {
        sigma: f64,
    },
    /// Global-norm clipping over the flattened gradient.
    Clipping {
        bound: f64,
    },
    /// Keep the largest-magnitude fraction `1 - prune_rate` of entries,
    /// globally or within each parameter tensor.
    Sparsification {
        prune_rate: f64,
        #[serde(default)]
        per_layer: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DefenseConfig {
    #[serde(flatten)]
    pub kind: DefenseKind,
    #[serde(default)]
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig::none()
    }
}

impl DefenseConfig {
    pub fn none() -> Self {
        DefenseConfig {
            kind: DefenseKind::None,
            seed: 0,
        }
    }

    pub fn noise(sigma: f64, seed: u64) -> Self {
        DefenseConfig {
            kind: DefenseKind::GaussianNoise { sigma },
            seed,
        }
    }

    pub fn clipping(bound: f64) -> Self {
        DefenseConfig {
            kind: DefenseKind::Clipping { bound },
            seed: 0,
        }
    }

    pub fn sparsification(prune_rate: f64) -> Self {
        DefenseConfig {
            kind: DefenseKind::Sparsification {
                prune_rate,
                per_layer: false,
            },
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DefenseKind::None => Ok(()),
            DefenseKind::GaussianNoise { sigma } if sigma > 0.0 && sigma.is_finite() => Ok(()),
            DefenseKind::Clipping { bound } if bound > 0.0 && bound.is_finite() => Ok(()),
            DefenseKind::Sparsification { prune_rate, .. } if prune_rate > 0.0 && prune_rate < 1.0 => Ok(()),
            other => Err(Error::invalid(format!("invalid defense parameters: {other:?}"))),
        }
    }
}

/// `none`, `noise:<sigma>`, `clip:<bound>`, `sparsify:<rate>` or
/// `sparsify-layer:<rate>`.
impl FromStr for DefenseConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let value = || -> Result<f64> {
            arg.ok_or_else(|| Error::invalid(format!("defense '{name}' needs a parameter")))?
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("bad defense parameter in '{s}': {e}")))
        };
        let cfg = match name {
            "none" => DefenseConfig::none(),
            "noise" => DefenseConfig::noise(value()?, 0),
            "clip" => DefenseConfig::clipping(value()?),
            "sparsify" => DefenseConfig::sparsification(value()?),
            "sparsify-layer" => DefenseConfig {
                kind: DefenseKind::Sparsification {
                    prune_rate: value()?,
                    per_layer: true,
                },
                seed: 0,
            },
            _ => return Err(Error::invalid(format!("unknown defense '{s}'"))),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for DefenseConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            DefenseKind::None => write!(f, "none"),
            DefenseKind::GaussianNoise { sigma } => write!(f, "noise:{sigma}"),
            DefenseKind::Clipping { bound } => write!(f, "clip:{bound}"),
            DefenseKind::Sparsification {
                prune_rate,
                per_layer: false,
            } => write!(f, "sparsify:{prune_rate}"),
            DefenseKind::Sparsification {
                prune_rate,
                per_layer: true,
            } => write!(f, "sparsify-layer:{prune_rate}"),
        }
    }
}

/// Number of entries kept out of `d` at `prune_rate`: `ceil((1 - rate) * d)`,
/// with products within 1e-9 of an integer taken as that integer.
pub fn kept_count(d: usize, prune_rate: f64) -> usize {
    let x = (1.0 - prune_rate) * d as f64;
    let k = if (x - x.round()).abs() < 1e-9 { x.round() } else { x.ceil() };
    (k as usize).min(d)
}

/// 0/1 mask keeping the `k` largest magnitudes, ties going to the lower index.
fn top_k_mask(values: &[f64], k: usize) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].abs().total_cmp(&values[i].abs()).then(i.cmp(&j)));
    let mut mask = vec![0.0; values.len()];
    for &i in order.iter().take(k) {
        mask[i] = 1.0;
    }
    mask
}

pub fn apply_defense(g: &GradientSet, cfg: &DefenseConfig) -> Result<GradientSet> {
    cfg.validate()?;
    let shapes = g.shapes();
    match cfg.kind {
        DefenseKind::None => Ok(g.clone()),
        DefenseKind::GaussianNoise { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            let noisy: Vec<f64> = g.flatten().into_iter().map(|v| v + normal.sample(&mut rng)).collect();
            GradientSet::unflatten(&shapes, &noisy)
        }
        DefenseKind::Clipping { bound } => {
            let norm = g.l2_norm();
            if norm <= bound {
                return Ok(g.clone());
            }
            let flat = g.flatten();
            let mut factor = bound / norm;
            loop {
                // rounding can leave the rescaled norm an ulp above the bound
                let scaled: Vec<f64> = flat.iter().map(|v| v * factor).collect();
                let out = GradientSet::unflatten(&shapes, &scaled)?;
                if out.l2_norm() <= bound {
                    return Ok(out);
                }
                factor = f64::from_bits(factor.to_bits() - 1);
            }
        }
        DefenseKind::Sparsification { prune_rate, per_layer } => {
            let tensors = if per_layer {
                g.tensors
                    .iter()
                    .map(|t| {
                        let mask = top_k_mask(t.data(), kept_count(t.numel(), prune_rate));
                        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
                        Tensor::new(t.shape(), data)
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                let flat = g.flatten();
                let mask = top_k_mask(&flat, kept_count(flat.len(), prune_rate));
                let kept: Vec<f64> = flat.iter().zip(&mask).map(|(v, m)| v * m).collect();
                GradientSet::unflatten(&shapes, &kept)?.tensors
            };
            Ok(GradientSet::new(tensors))
        }
    }
}

/// Applies the attacker's estimate of the client's defense to the dummy
/// gradient, keeping the result differentiable.
///
/// Noise is not estimable and maps to the identity. Clipping reapplies the
/// norm rule; sparsification copies the zero pattern of `g_observed`.
pub fn estimate_transform(
    g_dummy: &[Tensor],
    g_observed: &GradientSet,
    cfg: &DefenseConfig,
) -> Result<Vec<Tensor>> {
    if g_dummy.len() != g_observed.tensors.len() {
        return Err(Error::invalid(format!(
            "dummy gradient has {} tensors, observed has {}",
            g_dummy.len(),
            g_observed.tensors.len()
        )));
    }
    match cfg.kind {
        DefenseKind::None | DefenseKind::GaussianNoise { .. } => Ok(g_dummy.to_vec()),
        DefenseKind::Clipping { bound } => {
            let mut sq: Option<Tensor> = None;
            for t in g_dummy {
                let s = t.square()?.sum()?;
                sq = Some(match sq {
                    Some(acc) => acc.add(&s)?,
                    None => s,
                });
            }
            let norm = sq.expect("nonempty").sqrt()?;
            if norm.item() <= bound {
                return Ok(g_dummy.to_vec());
            }
            let factor = Tensor::scalar(bound).div(&norm)?;
            g_dummy.iter().map(|t| t.mul(&factor)).collect()
        }
        DefenseKind::Sparsification { .. } => g_dummy
            .iter()
            .zip(&g_observed.tensors)
            .map(|(d, o)| {
                if d.numel() != o.numel() {
                    return Err(Error::ShapeMismatch {
                        op: "estimate_transform",
                        lhs: d.shape().to_vec(),
                        rhs: o.shape().to_vec(),
                    });
                }
                let mask = o.data().iter().map(|&v| if v == 0.0 { 0.0 } else { 1.0 }).collect();
                d.mask_mul(Arc::new(mask))
            })
            .collect(),
    }
}
