//! Finite-difference verification of the autodiff engine.
//!
//! Each check contracts the function output with a fixed random weighting,
//! differentiates the resulting scalar, and compares against central
//! differences over every input coordinate. Errors are norm-wise:
//! `|a - n| / max(|a|, |n|)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{
    self, conv2d, cosine_distance, linear, resample2x, softmax_cross_entropy, ConvCfg, Graph, InterpMode, ResampleDir,
    Tensor,
};

pub const FIRST_ORDER_TOL: f64 = 1e-6;
pub const SECOND_ORDER_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub rel_err: f64,
}

impl CheckOutcome {
    pub fn passed(&self, tol: f64) -> bool {
        self.rel_err.is_finite() && self.rel_err < tol
    }
}

type TestFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let data = (0..tensor::numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("nonzero shape")
}

/// Values bounded away from zero so kinked ops stay on one side under
/// perturbation.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let data = (0..tensor::numel(shape))
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("nonzero shape")
}

fn weighted_sum(y: &Tensor, w: &[f64]) -> Result<Tensor> {
    if y.is_scalar() {
        return Ok(y.clone());
    }
    let wt = Tensor::new(y.shape(), w[..y.numel()].to_vec())?;
    y.mul(&wt)?.sum()
}

/// Relative error between the analytic gradient of `sum(w * f(inputs))` and
/// central differences.
pub fn fd_check(f: &dyn Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Tensor], weight_seed: u64) -> Result<f64> {
    let probe = f(inputs)?;
    let mut wrng = ChaCha8Rng::seed_from_u64(weight_seed);
    let w: Vec<f64> = (0..probe.numel()).map(|_| wrng.random_range(-1.0..1.0)).collect();

    let graph = Graph::new();
    let leaves = graph.leaves(inputs);
    let out = weighted_sum(&f(&leaves)?, &w)?;
    let analytic = tensor::grad(&out, &leaves, false)?.tensors;

    let eval = |xs: &[Tensor]| -> Result<f64> { Ok(weighted_sum(&f(xs)?, &w)?.item()) };
    let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
    let mut xs: Vec<Tensor> = inputs.iter().map(Tensor::detach).collect();
    for k in 0..xs.len() {
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            xs[k].data_mut()[i] = orig + STEP;
            let fp = eval(&xs)?;
            xs[k].data_mut()[i] = orig - STEP;
            let fm = eval(&xs)?;
            xs[k].data_mut()[i] = orig;
            let num = (fp - fm) / (2.0 * STEP);
            let ana = analytic[k].data()[i];
            diff2 += (ana - num).powi(2);
            a2 += ana * ana;
            n2 += num * num;
        }
    }
    let denom = a2.sqrt().max(n2.sqrt());
    Ok(if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom })
}

fn first_order_cases(rng: &mut ChaCha8Rng) -> Vec<(String, TestFn, Vec<Tensor>)> {
    let mut cases: Vec<(String, TestFn, Vec<Tensor>)> = Vec::new();
    let s = [2, 3, 4];
    let mut push = |name: &str, f: TestFn, inputs: Vec<Tensor>| cases.push((name.to_string(), f, inputs));

    push("add", Box::new(|x| x[0].add(&x[1])), vec![random_tensor(rng, &s, -1.0, 1.0), random_tensor(rng, &s, -1.0, 1.0)]);
    push("sub", Box::new(|x| x[0].sub(&x[1])), vec![random_tensor(rng, &s, -1.0, 1.0), random_tensor(rng, &s, -1.0, 1.0)]);
    push("mul", Box::new(|x| x[0].mul(&x[1])), vec![random_tensor(rng, &s, -1.0, 1.0), random_tensor(rng, &s, -1.0, 1.0)]);
    push("mul_broadcast", Box::new(|x| x[0].mul(&x[1])), vec![random_tensor(rng, &s, -1.0, 1.0), random_tensor(rng, &[1], -1.0, 1.0)]);
    push("div", Box::new(|x| x[0].div(&x[1])), vec![random_tensor(rng, &s, -1.0, 1.0), random_tensor(rng, &s, 0.5, 2.0)]);
    push("scale_neg", Box::new(|x| x[0].scale(-2.5)?.neg()), vec![random_tensor(rng, &s, -1.0, 1.0)]);
    push("square", Box::new(|x| x[0].square()), vec![random_tensor(rng, &s, -1.0, 1.0)]);
    push("sqrt", Box::new(|x| x[0].sqrt()), vec![random_tensor(rng, &s, 0.5, 2.0)]);
    push("exp", Box::new(|x| x[0].exp()), vec![random_tensor(rng, &s, -1.0, 1.0)]);
    push("log", Box::new(|x| x[0].log()), vec![random_tensor(rng, &s, 0.5, 2.0)]);
    push("sigmoid", Box::new(|x| x[0].sigmoid()), vec![random_tensor(rng, &s, -3.0, 3.0)]);
    push("relu", Box::new(|x| x[0].relu()), vec![away_from_zero(rng, &s)]);
    push("leaky_relu", Box::new(|x| x[0].leaky_relu(0.2)), vec![away_from_zero(rng, &s)]);
    push("prelu", Box::new(|x| x[0].prelu(&x[1])), vec![away_from_zero(rng, &[2, 3, 2, 2]), random_tensor(rng, &[3], 0.0, 0.5)]);
    push("sum_mean", Box::new(|x| x[0].sum()?.add(&x[0].mean()?)), vec![random_tensor(rng, &s, -1.0, 1.0)]);
    push("reshape", Box::new(|x| x[0].reshape(&[6, 4])), vec![random_tensor(rng, &s, -1.0, 1.0)]);
    push("matmul", Box::new(|x| x[0].matmul(&x[1])), vec![random_tensor(rng, &[3, 4], -1.0, 1.0), random_tensor(rng, &[4, 5], -1.0, 1.0)]);
    push("transpose", Box::new(|x| x[0].transpose()), vec![random_tensor(rng, &[3, 5], -1.0, 1.0)]);
    push("channel_ops", Box::new(|x| x[0].mul_channel(&x[1])?.add_channel(&x[2])), vec![
        random_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0),
        random_tensor(rng, &[3], -1.0, 1.0),
        random_tensor(rng, &[3], -1.0, 1.0),
    ]);
    push("sum_channels", Box::new(|x| x[0].sum_channels()), vec![random_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0)]);
    push("sum_last", Box::new(|x| x[0].sum_last()), vec![random_tensor(rng, &[3, 4], -1.0, 1.0)]);

    let convs = [
        ("conv2d", ConvCfg::default(), 3, 1),
        ("conv2d_stride2", ConvCfg { stride: 2, padding: 1, ..Default::default() }, 3, 1),
        ("conv2d_dilated", ConvCfg { padding: 2, dilation: 2, ..Default::default() }, 3, 1),
        ("conv2d_grouped", ConvCfg { padding: 1, groups: 2, ..Default::default() }, 3, 2),
    ];
    for (name, cfg, k, groups) in convs {
        push(name, Box::new(move |x| conv2d(&x[0], &x[1], Some(&x[2]), cfg)), vec![
            random_tensor(rng, &[2, 4, 5, 5], -1.0, 1.0),
            random_tensor(rng, &[4, 4 / groups, k, k], -1.0, 1.0),
            random_tensor(rng, &[4], -1.0, 1.0),
        ]);
    }
    push("linear", Box::new(|x| linear(&x[0], &x[1], &x[2])), vec![
        random_tensor(rng, &[3, 5], -1.0, 1.0),
        random_tensor(rng, &[5, 4], -1.0, 1.0),
        random_tensor(rng, &[4], -1.0, 1.0),
    ]);
    for mode in [InterpMode::Nearest, InterpMode::Bilinear, InterpMode::Bicubic] {
        for dir in [ResampleDir::Up, ResampleDir::Down] {
            push(&format!("resample_{mode:?}_{dir:?}").to_lowercase(), Box::new(move |x| resample2x(&x[0], dir, mode)), vec![
                random_tensor(rng, &[1, 2, 4, 6], -1.0, 1.0),
            ]);
        }
    }
    let onehot = Tensor::new(&[2, 3], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0]).expect("static");
    push("softmax_cross_entropy", Box::new(move |x| softmax_cross_entropy(&x[0], &onehot)), vec![random_tensor(rng, &[2, 3], -2.0, 2.0)]);
    push("cosine_distance", Box::new(|x| cosine_distance(&x[..2], &x[2..])), vec![
        random_tensor(rng, &[3, 2], -1.0, 1.0),
        random_tensor(rng, &[4], -1.0, 1.0),
        random_tensor(rng, &[3, 2], -1.0, 1.0),
        random_tensor(rng, &[4], -1.0, 1.0),
    ]);
    cases
}

/// Per-op checks, `rounds` random instances of each.
pub fn first_order_suite(seed: u64, rounds: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for r in 0..rounds {
        for (name, f, inputs) in first_order_cases(&mut rng) {
            let rel_err = fd_check(&*f, &inputs, seed ^ ((r as u64 + 1) << 32))?;
            out.push(CheckOutcome { name: format!("{name}#{r}"), rel_err });
        }
    }
    Ok(out)
}

/// Gradient-matching loss of a small conv classifier as a function of its
/// input: `cosine(grad_theta CE(net(x)), target)`. The inner gradient is
/// recorded whenever `x` is.
fn matching_loss(x: &Tensor, theta: &[Tensor], target: &[Tensor], onehot: &Tensor, smooth: bool) -> Result<Tensor> {
    let own;
    let graph = match x.graph() {
        Some(g) => g,
        None => {
            own = Graph::new();
            &own
        }
    };
    let th = graph.leaves(theta);
    let cfg = ConvCfg { padding: 1, ..Default::default() };
    let h = conv2d(x, &th[0], Some(&th[1]), cfg)?;
    let h = if smooth { h.sigmoid()? } else { h.leaky_relu(0.2)? };
    let b = x.shape()[0];
    let h = h.reshape(&[b, h.numel() / b])?;
    let logits = linear(&h, &th[2], &th[3])?;
    let loss = softmax_cross_entropy(&logits, onehot)?;
    let g = tensor::grad(&loss, &th, x.is_tracked())?.tensors;
    cosine_distance(&g, target)
}

/// Second-order checks: derivative of the gradient-matching loss with
/// respect to the classifier input.
pub fn second_order_suite(seed: u64, instances: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(instances);
    for i in 0..instances {
        let (b, c, side) = (1 + i % 2, 1 + i % 3, 5);
        let hidden = 2;
        let classes = 3;
        let theta = vec![
            random_tensor(&mut rng, &[hidden, c, 3, 3], -0.8, 0.8),
            random_tensor(&mut rng, &[hidden], -0.3, 0.3),
            random_tensor(&mut rng, &[hidden * side * side, classes], -0.5, 0.5),
            random_tensor(&mut rng, &[classes], -0.3, 0.3),
        ];
        let target: Vec<Tensor> = theta.iter().map(|t| random_tensor(&mut rng, t.shape(), -1.0, 1.0)).collect();
        let mut oh = vec![0.0; b * classes];
        for r in 0..b {
            oh[r * classes + rng.random_range(0..classes)] = 1.0;
        }
        let onehot = Tensor::new(&[b, classes], oh)?;
        let x = random_tensor(&mut rng, &[b, c, side, side], 0.0, 1.0);
        let smooth = i % 2 == 0;
        let f = move |xs: &[Tensor]| matching_loss(&xs[0], &theta, &target, &onehot, smooth);
        let rel_err = fd_check(&f, &[x], seed + i as u64)?;
        let act = if smooth { "sigmoid" } else { "leaky_relu" };
        out.push(CheckOutcome {
            name: format!("conv_{act}_linear_ce_cosine#{i}"),
            rel_err,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_order_passes() {
        for o in first_order_suite(1, 1).unwrap() {
            assert!(o.passed(FIRST_ORDER_TOL), "{o:?}");
        }
    }

    #[test]
    fn second_order_passes() {
        for o in second_order_suite(2, 4).unwrap() {
            assert!(o.passed(SECOND_ORDER_TOL), "{o:?}");
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // Value of x^2 with the gradient of x^3 via a detached factor.
        let f = |x: &[Tensor]| x[0].mul(&x[0].detach());
        let x = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        assert!(fd_check(&f, &[x], 0).unwrap() > 0.1);
    }
}
