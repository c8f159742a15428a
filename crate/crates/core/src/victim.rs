//! Small classifiers standing in for the federated-learning global model,
//! plus the gradients they leak and label inference from those gradients.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, conv2d, linear, softmax_cross_entropy, ConvCfg, Graph, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierKind {
    /// Two convolutions and a linear head.
    TinyConvnet,
    /// Three strided 5×5 sigmoid convolutions and a linear head.
    LenetZhuLike,
    /// Stem convolution, two residual blocks, global pooling, linear head.
    MiniResnet,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [
        ClassifierKind::TinyConvnet,
        ClassifierKind::LenetZhuLike,
        ClassifierKind::MiniResnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::TinyConvnet => "tiny_convnet",
            ClassifierKind::LenetZhuLike => "lenet_zhu_like",
            ClassifierKind::MiniResnet => "mini_resnet",
        }
    }
}

impl fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassifierKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ClassifierKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unsupported classifier kind '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub kind: ClassifierKind,
    /// Batch, channels, height, width.
    pub input_shape: [usize; 4],
    pub classes: usize,
    pub seed: u64,
}

impl ClassifierSpec {
    pub fn batch(&self) -> usize {
        self.input_shape[0]
    }
}

const TINY_WIDTH: usize = 8;
const LENET_WIDTH: usize = 12;
const RESNET_WIDTHS: [usize; 2] = [8, 16];

#[derive(Debug, Clone)]
pub struct Classifier {
    spec: ClassifierSpec,
    params: Vec<Parameter>,
    names: Vec<String>,
}

struct Init {
    rng: ChaCha8Rng,
    params: Vec<Parameter>,
    names: Vec<String>,
}

impl Init {
    /// Kaiming-uniform weights, uniform(±1/sqrt(fan_in)) biases.
    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize, bias: bool) {
        let fan_in = (cin * k * k) as f64;
        self.push(&format!("{name}.weight"), &[cout, cin, k, k], (1.0 / fan_in).sqrt());
        if bias {
            self.push(&format!("{name}.bias"), &[cout], 1.0 / fan_in.sqrt());
        }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let fan_in = din as f64;
        self.push(&format!("{name}.weight"), &[din, dout], (1.0 / fan_in).sqrt());
        self.push(&format!("{name}.bias"), &[dout], 1.0 / fan_in.sqrt());
    }

    fn push(&mut self, name: &str, shape: &[usize], bound: f64) {
        let data = (0..tensor::numel(shape))
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.params.push(Parameter::new(Tensor::raw(shape.to_vec(), data)));
        self.names.push(name.to_string());
    }
}

fn conv_cfg(stride: usize, padding: usize) -> ConvCfg {
    ConvCfg {
        stride,
        padding,
        dilation: 1,
        groups: 1,
    }
}

impl Classifier {
    pub fn build(spec: ClassifierSpec) -> Result<Self> {
        let [b, c, h, w] = spec.input_shape;
        if b == 0 || c == 0 || spec.classes < 2 {
            return Err(Error::invalid(format!("invalid classifier spec {spec:?}")));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(Error::invalid(format!(
                "classifier input must have spatial dims divisible by 4, got {h}x{w}"
            )));
        }
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            params: Vec::new(),
            names: Vec::new(),
        };
        let l = spec.classes;
        match spec.kind {
            ClassifierKind::TinyConvnet => {
                init.conv("conv1", TINY_WIDTH, c, 3, true);
                init.conv("conv2", TINY_WIDTH, TINY_WIDTH, 3, true);
                init.linear("fc", TINY_WIDTH * (h / 2) * (w / 2), l);
            }
            ClassifierKind::LenetZhuLike => {
                init.conv("conv1", LENET_WIDTH, c, 5, true);
                init.conv("conv2", LENET_WIDTH, LENET_WIDTH, 5, true);
                init.conv("conv3", LENET_WIDTH, LENET_WIDTH, 5, true);
                init.linear("fc", LENET_WIDTH * (h / 4) * (w / 4), l);
            }
            ClassifierKind::MiniResnet => {
                let [w0, w1] = RESNET_WIDTHS;
                init.conv("stem", w0, c, 3, false);
                init.conv("block1.conv1", w0, w0, 3, false);
                init.conv("block1.conv2", w0, w0, 3, false);
                init.conv("block2.conv1", w1, w0, 3, false);
                init.conv("block2.conv2", w1, w1, 3, false);
                init.conv("block2.shortcut", w1, w0, 1, false);
                init.linear("fc", w1, l);
            }
        }
        Ok(Classifier {
            spec,
            params: init.params,
            names: init.names,
        })
    }

    pub fn spec(&self) -> &ClassifierSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Current parameter values, in registration order.
    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|p| p.tensor.shape().to_vec()).collect()
    }

    /// Order-sensitive checksum of every parameter bit.
    pub fn checksum(&self) -> u64 {
        checksum(self.params.iter().map(|p| &p.tensor))
    }

    /// Index of the final linear layer's bias in the parameter list.
    pub fn final_bias_index(&self) -> usize {
        self.params.len() - 1
    }

    /// Logits for `x` using the parameter tensors `theta` (which may be graph leaves).
    pub fn forward(&self, x: &Tensor, theta: &[Tensor]) -> Result<Tensor> {
        if theta.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                theta.len()
            )));
        }
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::InvalidShape {
                op: "classifier",
                reason: format!("input must be NCHW, got {:?}", x.shape()),
            });
        };
        let [_, sc, sh, sw] = self.spec.input_shape;
        if (c, h, w) != (sc, sh, sw) {
            return Err(Error::ShapeMismatch {
                op: "classifier",
                lhs: x.shape().to_vec(),
                rhs: self.spec.input_shape.to_vec(),
            });
        }
        let p = theta;
        match self.spec.kind {
            ClassifierKind::TinyConvnet => {
                let y = conv2d(x, &p[0], Some(&p[1]), conv_cfg(1, 1))?.relu()?;
                let y = conv2d(&y, &p[2], Some(&p[3]), conv_cfg(2, 1))?.relu()?;
                let feat = y.reshape(&[b, y.numel() / b])?;
                linear(&feat, &p[4], &p[5])
            }
            ClassifierKind::LenetZhuLike => {
                let y = conv2d(x, &p[0], Some(&p[1]), conv_cfg(2, 2))?.sigmoid()?;
                let y = conv2d(&y, &p[2], Some(&p[3]), conv_cfg(2, 2))?.sigmoid()?;
                let y = conv2d(&y, &p[4], Some(&p[5]), conv_cfg(1, 2))?.sigmoid()?;
                let feat = y.reshape(&[b, y.numel() / b])?;
                linear(&feat, &p[6], &p[7])
            }
            ClassifierKind::MiniResnet => {
                let stem = conv2d(x, &p[0], None, conv_cfg(1, 1))?.relu()?;
                let r = conv2d(&stem, &p[1], None, conv_cfg(1, 1))?.relu()?;
                let r = conv2d(&r, &p[2], None, conv_cfg(1, 1))?;
                let b1 = r.add(&stem)?.relu()?;
                let r = conv2d(&b1, &p[3], None, conv_cfg(2, 1))?.relu()?;
                let r = conv2d(&r, &p[4], None, conv_cfg(1, 1))?;
                let short = conv2d(&b1, &p[5], None, conv_cfg(2, 0))?;
                let b2 = r.add(&short)?.relu()?;
                let &[_, ch, hh, ww] = b2.shape() else { unreachable!() };
                let pooled = b2
                    .reshape(&[b * ch, hh * ww])?
                    .sum_last()?
                    .reshape(&[b, ch])?
                    .scale(1.0 / (hh * ww) as f64)?;
                linear(&pooled, &p[6], &p[7])
            }
        }
    }
}

pub(crate) fn checksum<'a>(tensors: impl Iterator<Item = &'a Tensor>) -> u64 {
    // FNV-1a over shapes and value bits.
    let mut h: u64 = 0xcbf29ce484222325;
    let mut feed = |x: u64| {
        for byte in x.to_le_bytes() {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    };
    for t in tensors {
        for &d in t.shape() {
            feed(d as u64);
        }
        for v in t.data() {
            feed(v.to_bits());
        }
    }
    h
}

/// A client's private images and labels.
#[derive(Debug, Clone)]
pub struct PrivateBatch {
    /// B×C×H×W with values in [0, 1].
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// Largest batch supported.
pub const MAX_BATCH: usize = 96;

impl PrivateBatch {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        let &[b, _, _, _] = images.shape() else {
            return Err(Error::InvalidShape {
                op: "private_batch",
                reason: format!("images must be B×C×H×W, got {:?}", images.shape()),
            });
        };
        if b != labels.len() {
            return Err(Error::invalid(format!(
                "batch has {b} images but {} labels",
                labels.len()
            )));
        }
        if !(1..=MAX_BATCH).contains(&b) {
            return Err(Error::invalid(format!("batch size {b} outside 1..={MAX_BATCH}")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(PrivateBatch { images, labels })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

/// Per-parameter gradient tensors in parameter registration order.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub tensors: Vec<Tensor>,
}

impl GradientSet {
    pub fn new(tensors: Vec<Tensor>) -> Self {
        GradientSet { tensors }
    }

    /// Total number of scalar entries.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(shapes: &[Vec<usize>], flat: &[f64]) -> Result<Self> {
        let total: usize = shapes.iter().map(|s| tensor::numel(s)).sum();
        if total != flat.len() {
            return Err(Error::invalid(format!(
                "flat gradient has {} entries, shapes need {total}",
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut tensors = Vec::with_capacity(shapes.len());
        for s in shapes {
            let n = tensor::numel(s);
            tensors.push(Tensor::new(s, flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(GradientSet { tensors })
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Detached copy.
    pub fn detach(&self) -> Self {
        GradientSet {
            tensors: self.tensors.iter().map(Tensor::detach).collect(),
        }
    }
}

pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::invalid(format!("label {y} out of range for {classes} classes")));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], data)
}

/// Gradients of the mean cross-entropy of `model` on `(x, labels)` with
/// respect to its parameters.
///
/// Parameters become leaves of `graph`. When `x` is tracked in `graph` the
/// returned gradients stay recorded, so they can be differentiated with
/// respect to whatever produced `x`.
pub fn model_gradients(model: &Classifier, graph: &Graph, x: &Tensor, labels: &[usize]) -> Result<Vec<Tensor>> {
    if x.shape().first() != Some(&labels.len()) {
        return Err(Error::invalid(format!(
            "{} labels for input of shape {:?}",
            labels.len(),
            x.shape()
        )));
    }
    let theta = graph.leaves(&model.param_values());
    let logits = model.forward(x, &theta)?;
    let y = one_hot(labels, model.spec.classes)?;
    let loss = softmax_cross_entropy(&logits, &y)?;
    let create_graph = x.is_tracked();
    Ok(tensor::grad(&loss, &theta, create_graph)?.tensors)
}

/// The gradient the client shares for `batch`.
pub fn compute_gradients(model: &Classifier, batch: &PrivateBatch) -> Result<GradientSet> {
    let graph = Graph::new();
    let x = batch.images.detach();
    let grads = model_gradients(model, &graph, &x, &batch.labels)?;
    Ok(GradientSet::new(grads.iter().map(Tensor::detach).collect()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelInference {
    /// Inferred labels, ascending.
    pub labels: Vec<usize>,
    /// Fewer negative bias-gradient entries than the batch size were found,
    /// so some labels are guesses.
    pub partial: bool,
}

/// Labels from the sign pattern of the final-layer bias gradient.
///
/// Under mean cross-entropy that entry is `mean_b(p_bc - y_bc)`, negative for
/// classes present in the batch when the batch holds distinct labels.
pub fn infer_labels(g: &GradientSet, model: &Classifier) -> Result<LabelInference> {
    let idx = model.final_bias_index();
    let bias = g
        .tensors
        .get(idx)
        .ok_or_else(|| Error::invalid("gradient set does not match the model"))?;
    if bias.numel() != model.spec.classes {
        return Err(Error::invalid("final bias gradient has the wrong length"));
    }
    let b = model.spec.batch();
    let mut order: Vec<usize> = (0..bias.numel()).collect();
    order.sort_by(|&i, &j| bias.data()[i].total_cmp(&bias.data()[j]).then(i.cmp(&j)));
    let negatives = order.iter().filter(|&&i| bias.data()[i] < 0.0).count();
    let mut labels: Vec<usize> = order.into_iter().take(b).collect();
    labels.sort_unstable();
    Ok(LabelInference {
        labels,
        partial: negatives < b,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: ClassifierKind, shape: [usize; 4]) -> ClassifierSpec {
        ClassifierSpec {
            kind,
            input_shape: shape,
            classes: 10,
            seed: 42,
        }
    }

    fn random_images(shape: [usize; 4], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::raw(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect())
    }

    #[test]
    fn build_is_deterministic() {
        for kind in ClassifierKind::ALL {
            let a = Classifier::build(spec(kind, [1, 3, 16, 16])).unwrap();
            let b = Classifier::build(spec(kind, [1, 3, 16, 16])).unwrap();
            assert_eq!(a.checksum(), b.checksum());
        }
    }

    #[test]
    fn tiny_convnet_logit_shape() {
        let m = Classifier::build(spec(ClassifierKind::TinyConvnet, [1, 1, 16, 16])).unwrap();
        let y = m.forward(&Tensor::zeros(&[1, 1, 16, 16]), &m.param_values()).unwrap();
        assert_eq!(y.shape(), &[1, 10]);
    }

    #[test]
    fn mini_resnet_zero_input_gives_final_bias() {
        // Bias-free convolutions map zero to zero, relu keeps zero, pooling
        // keeps zero; only the head bias survives.
        let m = Classifier::build(spec(ClassifierKind::MiniResnet, [2, 3, 8, 8])).unwrap();
        let y = m.forward(&Tensor::zeros(&[2, 3, 8, 8]), &m.param_values()).unwrap();
        let bias = m.params()[m.final_bias_index()].tensor.data();
        for row in y.data().chunks(10) {
            assert_eq!(row, bias);
        }
    }

    #[test]
    fn unsupported_kind_is_an_error() {
        assert!("resnet50".parse::<ClassifierKind>().is_err());
        assert_eq!("lenet_zhu_like".parse::<ClassifierKind>().unwrap(), ClassifierKind::LenetZhuLike);
    }

    #[test]
    fn final_bias_gradient_closed_form() {
        let m = Classifier::build(spec(ClassifierKind::TinyConvnet, [1, 1, 16, 16])).unwrap();
        let x = random_images([1, 1, 16, 16], 1);
        let batch = PrivateBatch::new(x.clone(), vec![3]).unwrap();
        let g = compute_gradients(&m, &batch).unwrap();
        let logits = m.forward(&x, &m.param_values()).unwrap();
        let mx = logits.data().iter().copied().fold(f64::MIN, f64::max);
        let z: f64 = logits.data().iter().map(|v| (v - mx).exp()).sum();
        for (c, gb) in g.tensors[m.final_bias_index()].data().iter().enumerate() {
            let p = (logits.data()[c] - mx).exp() / z;
            let want = p - if c == 3 { 1.0 } else { 0.0 };
            assert!((gb - want).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicated_samples_match_single_sample() {
        let single = Classifier::build(spec(ClassifierKind::LenetZhuLike, [1, 1, 16, 16])).unwrap();
        let triple = Classifier::build(spec(ClassifierKind::LenetZhuLike, [3, 1, 16, 16])).unwrap();
        let x = random_images([1, 1, 16, 16], 5);
        let x3 = Tensor::new(&[3, 1, 16, 16], x.data().repeat(3)).unwrap();
        let g1 = compute_gradients(&single, &PrivateBatch::new(x, vec![4]).unwrap()).unwrap();
        let g3 = compute_gradients(&triple, &PrivateBatch::new(x3, vec![4, 4, 4]).unwrap()).unwrap();
        for (a, b) in g1.flatten().iter().zip(g3.flatten()) {
            assert!((a - b).abs() < 1e-14);
        }
        assert_eq!(g1.len(), single.param_count());
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        let m = Classifier::build(spec(ClassifierKind::TinyConvnet, [1, 1, 16, 16])).unwrap();
        let batch = PrivateBatch::new(Tensor::zeros(&[1, 1, 16, 16]), vec![10]).unwrap();
        assert!(compute_gradients(&m, &batch).is_err());
    }

    #[test]
    fn infer_single_label() {
        let m = Classifier::build(spec(ClassifierKind::TinyConvnet, [1, 1, 16, 16])).unwrap();
        let batch = PrivateBatch::new(random_images([1, 1, 16, 16], 2), vec![3]).unwrap();
        let g = compute_gradients(&m, &batch).unwrap();
        let inf = infer_labels(&g, &m).unwrap();
        assert_eq!(inf.labels, vec![3]);
        assert!(!inf.partial);
    }

    #[test]
    fn duplicate_labels_flag_partial() {
        let m = Classifier::build(spec(ClassifierKind::TinyConvnet, [4, 1, 16, 16])).unwrap();
        let batch = PrivateBatch::new(random_images([4, 1, 16, 16], 3), vec![1, 1, 5, 7]).unwrap();
        let g = compute_gradients(&m, &batch).unwrap();
        let inf = infer_labels(&g, &m).unwrap();
        assert!(inf.partial);
        assert_eq!(inf.labels.len(), 4);
    }

    #[test]
    fn gradient_set_flatten_roundtrip() {
        let m = Classifier::build(spec(ClassifierKind::MiniResnet, [1, 1, 8, 8])).unwrap();
        let g = GradientSet::new(m.param_values());
        let back = GradientSet::unflatten(&g.shapes(), &g.flatten()).unwrap();
        assert_eq!(back.flatten(), g.flatten());
        assert!(GradientSet::unflatten(&g.shapes(), &[1.0]).is_err());
    }
}
