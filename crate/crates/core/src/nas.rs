//! Candidate decoder architectures: genome encoding, sampling and
//! instantiation.
//!
//! A decoder maps a fixed latent `z0` of shape `B×16×(H/2^t)×(W/2^t)` to an
//! image batch. It has `t` encoder levels working at the latent resolution
//! and `t` decoder levels, each of which doubles the resolution with the
//! upsampling module its genome describes. Skip matrix entry `A[i][j]`
//! adds a projected, rescaled copy of encoder output `i` to the input of
//! decoder level `j`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, conv2d, resample2x, ConvCfg, InterpMode, Parameter, ResampleDir, Tensor};

/// Channels of the latent input.
pub const LATENT_CHANNELS: usize = 16;
pub const LEAKY_SLOPE: f64 = 0.2;
pub const PRELU_INIT: f64 = 0.25;
pub const KERNEL_OPTIONS: [usize; 3] = [1, 3, 5];
pub const DILATION_OPTIONS: [usize; 3] = [1, 3, 5];

macro_rules! named_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn name(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                Self::ALL.iter().copied().find(|v| v.name() == s).ok_or_else(|| {
                    Error::invalid(format!("unknown {} '{s}'", stringify!($name)))
                })
            }
        }
    };
}

named_enum!(Interp {
    Nearest => "nearest",
    Bilinear => "bilinear",
    Bicubic => "bicubic",
});

named_enum!(
    /// `Separable` is depthwise then pointwise; `Depthwise` is a pointwise
    /// channel projection followed by a depthwise convolution.
    Transform {
        Conv2d => "conv2d",
        Separable => "separable",
        Depthwise => "depthwise",
    }
);

named_enum!(Activation {
    Relu => "relu",
    LeakyRelu => "leaky_relu",
    Prelu => "prelu",
});

named_enum!(SearchMode {
    Full => "full",
    UpsampleOnly => "upsample_only",
    ConnectionOnly => "connection_only",
});

impl Interp {
    pub fn mode(self) -> InterpMode {
        match self {
            Interp::Nearest => InterpMode::Nearest,
            Interp::Bilinear => InterpMode::Bilinear,
            Interp::Bicubic => InterpMode::Bicubic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UpsampleConfig {
    pub interp: Interp,
    pub transform: Transform,
    pub activation: Activation,
    pub kernel: usize,
    pub dilation: usize,
}

impl Default for UpsampleConfig {
    fn default() -> Self {
        UpsampleConfig {
            interp: Interp::Bilinear,
            transform: Transform::Conv2d,
            activation: Activation::LeakyRelu,
            kernel: 3,
            dilation: 1,
        }
    }
}

impl UpsampleConfig {
    pub fn sample(rng: &mut impl Rng) -> Self {
        fn pick<T: Copy>(rng: &mut impl Rng, xs: &[T]) -> T {
            xs[rng.random_range(0..xs.len())]
        }
        UpsampleConfig {
            interp: pick(rng, Interp::ALL),
            transform: pick(rng, Transform::ALL),
            activation: pick(rng, Activation::ALL),
            kernel: pick(rng, &KERNEL_OPTIONS),
            dilation: pick(rng, &DILATION_OPTIONS),
        }
    }

    fn validate(&self) -> Result<()> {
        if !KERNEL_OPTIONS.contains(&self.kernel) || !DILATION_OPTIONS.contains(&self.dilation) {
            return Err(Error::invalid(format!(
                "kernel {} / dilation {} outside the option lists",
                self.kernel, self.dilation
            )));
        }
        Ok(())
    }
}

/// `t×t` binary matrix; `get(i, j)` is the skip from encoder `i` to decoder `j`
/// (both zero-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SkipMatrix {
    size: usize,
    bits: Vec<bool>,
}

impl SkipMatrix {
    pub fn zeros(size: usize) -> Self {
        SkipMatrix {
            size,
            bits: vec![false; size * size],
        }
    }

    pub fn ones(size: usize) -> Self {
        SkipMatrix {
            size,
            bits: vec![true; size * size],
        }
    }

    pub fn identity(size: usize) -> Self {
        let mut m = Self::zeros(size);
        for i in 0..size {
            m.set(i, i, true);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::invalid("skip matrix must be square"));
        }
        Ok(SkipMatrix {
            size,
            bits: rows.concat(),
        })
    }

    pub fn sample(size: usize, rng: &mut impl Rng) -> Self {
        SkipMatrix {
            size,
            bits: (0..size * size).map(|_| rng.random_bool(0.5)).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, on: bool) {
        self.bits[i * self.size + j] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Active `(encoder, decoder)` pairs in row-major order.
    pub fn active(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.size * self.size)
            .filter(|&k| self.bits[k])
            .map(|k| (k / self.size, k % self.size))
    }

    /// Same matrix with the diagonal switched on.
    pub fn with_diagonal(&self) -> Self {
        let mut m = self.clone();
        for i in 0..self.size {
            m.set(i, i, true);
        }
        m
    }
}

impl fmt::Display for SkipMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<String> = self
            .bits
            .chunks(self.size.max(1))
            .map(|r| r.iter().map(|&b| if b { '1' } else { '0' }).collect())
            .collect();
        f.write_str(&rows.join(","))
    }
}

impl FromStr for SkipMatrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let rows = s
            .split(',')
            .map(|r| {
                r.trim()
                    .chars()
                    .map(|c| match c {
                        '0' => Ok(false),
                        '1' => Ok(true),
                        _ => Err(Error::format("skip matrix", format!("bad bit '{c}'"))),
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        SkipMatrix::from_rows(&rows)
    }
}

/// Complete description of one candidate decoder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchGenome {
    pub levels: usize,
    /// Encoder widths, shallow to deep; decoders mirror them.
    pub widths: Vec<usize>,
    /// One module per decoder level, lowest resolution first.
    pub upsample: Vec<UpsampleConfig>,
    pub skips: SkipMatrix,
    pub init_seed: u64,
}

pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];

impl ArchGenome {
    /// The fixed reference architecture: default upsampling modules and
    /// same-index skips.
    pub fn baseline(widths: &[usize], init_seed: u64) -> Self {
        let t = widths.len();
        ArchGenome {
            levels: t,
            widths: widths.to_vec(),
            upsample: vec![UpsampleConfig::default(); t],
            skips: SkipMatrix::identity(t),
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.levels;
        if t == 0 || self.widths.len() != t || self.upsample.len() != t || self.skips.size() != t {
            return Err(Error::invalid(format!(
                "genome with {t} levels has {} widths, {} upsample modules and a {}x{0} skip matrix",
                self.widths.len(),
                self.upsample.len(),
                self.skips.size()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::invalid("genome widths must be positive"));
        }
        self.upsample.iter().try_for_each(UpsampleConfig::validate)
    }

    /// Hash of the architecture, excluding the init seed.
    pub fn arch_fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        (self.levels, &self.widths, &self.upsample, &self.skips).hash(&mut h);
        h.finish()
    }

    /// Human-readable `key = value` record, one field per line.
    pub fn to_record(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("levels = {}\n", self.levels));
        let widths: Vec<String> = self.widths.iter().map(usize::to_string).collect();
        out.push_str(&format!("widths = {}\n", widths.join(",")));
        for (j, u) in self.upsample.iter().enumerate() {
            out.push_str(&format!("up{j}.interp = {}\n", u.interp));
            out.push_str(&format!("up{j}.transform = {}\n", u.transform));
            out.push_str(&format!("up{j}.activation = {}\n", u.activation));
            out.push_str(&format!("up{j}.kernel = {}\n", u.kernel));
            out.push_str(&format!("up{j}.dilation = {}\n", u.dilation));
        }
        out.push_str(&format!("skips = {}\n", self.skips));
        out.push_str(&format!("init_seed = {}\n", self.init_seed));
        out
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let mut fields = BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("genome record", format!("no '=' in '{line}'")))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::format("genome record", format!("missing field '{k}'")))
        };
        let num = |k: &str| -> Result<u64> {
            get(k)?
                .parse()
                .map_err(|e| Error::format("genome record", format!("field '{k}': {e}")))
        };
        let levels = num("levels")? as usize;
        let widths = get("widths")?
            .split(',')
            .map(|w| w.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format("genome record", format!("widths: {e}")))?;
        let upsample = (0..levels)
            .map(|j| {
                Ok(UpsampleConfig {
                    interp: get(&format!("up{j}.interp"))?.parse()?,
                    transform: get(&format!("up{j}.transform"))?.parse()?,
                    activation: get(&format!("up{j}.activation"))?.parse()?,
                    kernel: num(&format!("up{j}.kernel"))? as usize,
                    dilation: num(&format!("up{j}.dilation"))? as usize,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let genome = ArchGenome {
            levels,
            widths,
            upsample,
            skips: get("skips")?.parse()?,
            init_seed: num("init_seed")?,
        };
        genome.validate()?;
        Ok(genome)
    }
}

/// Draws a genome. Levels and widths always come from `base`; in restricted
/// modes the frozen axis is copied from `base` as well.
pub fn sample_genome(rng: &mut impl Rng, mode: SearchMode, base: &ArchGenome) -> ArchGenome {
    let t = base.levels;
    let upsample = match mode {
        SearchMode::ConnectionOnly => base.upsample.clone(),
        _ => (0..t).map(|_| UpsampleConfig::sample(rng)).collect(),
    };
    let skips = match mode {
        SearchMode::UpsampleOnly => base.skips.clone(),
        _ => SkipMatrix::sample(t, rng),
    };
    ArchGenome {
        levels: t,
        widths: base.widths.clone(),
        upsample,
        skips,
        init_seed: rng.random(),
    }
}

/// A factor-2 resampler; one instance is reused for every step of a chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resampler {
    pub dir: ResampleDir,
    pub mode: InterpMode,
}

impl Resampler {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        resample2x(x, self.dir, self.mode)
    }
}

/// Decomposition of a power-of-two resolution change into 2× steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleChain {
    /// `None` when source and destination agree.
    pub dir: Option<ResampleDir>,
    pub steps: usize,
}

impl ScaleChain {
    pub fn apply(&self, x: &Tensor, mode: InterpMode) -> Result<Tensor> {
        let Some(dir) = self.dir else {
            return Ok(x.clone());
        };
        let resampler = Resampler { dir, mode };
        let mut y = x.clone();
        for _ in 0..self.steps {
            y = resampler.apply(&y)?;
        }
        Ok(y)
    }
}

pub fn resolve_scale(src: usize, dst: usize) -> Result<ScaleChain> {
    if src == 0 || dst == 0 {
        return Err(Error::invalid("spatial sizes must be positive"));
    }
    let (hi, lo, dir) = if dst >= src {
        (dst, src, ResampleDir::Up)
    } else {
        (src, dst, ResampleDir::Down)
    };
    if hi % lo != 0 || !(hi / lo).is_power_of_two() {
        return Err(Error::invalid(format!("scale {src} -> {dst} is not a power of two")));
    }
    let steps = (hi / lo).trailing_zeros() as usize;
    Ok(ScaleChain {
        dir: (steps > 0).then_some(dir),
        steps,
    })
}

#[derive(Debug, Clone)]
enum TransformLayout {
    /// weight, bias
    Conv { weight: usize, bias: usize },
    /// depthwise weight, pointwise weight, bias
    Separable { dw: usize, pw: usize, bias: usize },
    /// pointwise weight, depthwise weight, bias
    Depthwise { pw: usize, dw: usize, bias: usize },
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    config: UpsampleConfig,
    transform: TransformLayout,
    cin: usize,
    cout: usize,
    prelu: Option<usize>,
    /// (encoder index, projection parameter index, chain)
    skips: Vec<(usize, usize, ScaleChain)>,
}

/// An instantiated generator with parameters φ.
#[derive(Debug, Clone)]
pub struct Decoder {
    genome: ArchGenome,
    latent_shape: [usize; 4],
    out_shape: [usize; 4],
    params: Vec<Parameter>,
    names: Vec<String>,
    encoders: Vec<(usize, usize)>,
    levels: Vec<DecoderLevel>,
    head: (usize, usize),
}

struct ParamBuilder {
    rng: ChaCha8Rng,
    params: Vec<Parameter>,
    names: Vec<String>,
}

impl ParamBuilder {
    fn uniform(&mut self, name: String, shape: &[usize], bound: f64) -> usize {
        let data = (0..tensor::numel(shape))
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        self.push(name, Tensor::raw(shape.to_vec(), data))
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.params.push(Parameter::new(t));
        self.names.push(name);
        self.params.len() - 1
    }

    /// Kaiming-uniform weight of shape `[cout, cin_per_group, k, k]`.
    fn weight(&mut self, name: String, cout: usize, cin_g: usize, k: usize) -> usize {
        let fan_in = (cin_g * k * k) as f64;
        self.uniform(name, &[cout, cin_g, k, k], (6.0 / fan_in).sqrt())
    }

    fn bias(&mut self, name: String, c: usize, fan_in: usize) -> usize {
        self.uniform(name, &[c], 1.0 / (fan_in as f64).sqrt())
    }
}

/// Instantiates the generator described by `genome`.
pub fn build_decoder(genome: &ArchGenome, latent_shape: [usize; 4], out_shape: [usize; 4]) -> Result<Decoder> {
    genome.validate()?;
    let t = genome.levels;
    let [lb, lc, lh, lw] = latent_shape;
    let [b, c, h, w] = out_shape;
    if lb != b || lc == 0 || b == 0 || c == 0 {
        return Err(Error::invalid(format!(
            "latent {latent_shape:?} incompatible with output {out_shape:?}"
        )));
    }
    if lh << t != h || lw << t != w {
        return Err(Error::invalid(format!(
            "output {h}x{w} must be the latent {lh}x{lw} times 2^{t}"
        )));
    }
    let mut pb = ParamBuilder {
        rng: ChaCha8Rng::seed_from_u64(genome.init_seed),
        params: Vec::new(),
        names: Vec::new(),
    };

    let mut encoders = Vec::with_capacity(t);
    let mut prev = lc;
    for (i, &wd) in genome.widths.iter().enumerate() {
        let wi = pb.weight(format!("enc{i}.weight"), wd, prev, 3);
        let bi = pb.bias(format!("enc{i}.bias"), wd, prev * 9);
        encoders.push((wi, bi));
        prev = wd;
    }

    let mut levels = Vec::with_capacity(t);
    for j in 0..t {
        let cin = genome.widths[t - 1 - j];
        let cout = if j + 1 < t { genome.widths[t - 2 - j] } else { genome.widths[0] };
        let cfg = genome.upsample[j];
        let k = cfg.kernel;
        let transform = match cfg.transform {
            Transform::Conv2d => TransformLayout::Conv {
                weight: pb.weight(format!("dec{j}.conv.weight"), cout, cin, k),
                bias: pb.bias(format!("dec{j}.conv.bias"), cout, cin * k * k),
            },
            Transform::Separable => TransformLayout::Separable {
                dw: pb.weight(format!("dec{j}.dw.weight"), cin, 1, k),
                pw: pb.weight(format!("dec{j}.pw.weight"), cout, cin, 1),
                bias: pb.bias(format!("dec{j}.pw.bias"), cout, cin),
            },
            Transform::Depthwise => TransformLayout::Depthwise {
                pw: pb.weight(format!("dec{j}.pw.weight"), cout, cin, 1),
                dw: pb.weight(format!("dec{j}.dw.weight"), cout, 1, k),
                bias: pb.bias(format!("dec{j}.dw.bias"), cout, k * k),
            },
        };
        let prelu = (cfg.activation == Activation::Prelu)
            .then(|| pb.push(format!("dec{j}.prelu"), Tensor::full(&[cout], PRELU_INIT)));
        levels.push(DecoderLevel {
            config: cfg,
            transform,
            cin,
            cout,
            prelu,
            skips: Vec::new(),
        });
    }

    for (i, j) in genome.skips.active() {
        let cin = levels[j].cin;
        let proj = pb.weight(format!("skip{i}_{j}.weight"), cin, genome.widths[i], 1);
        let chain = resolve_scale(lh, lh << j)?;
        levels[j].skips.push((i, proj, chain));
    }

    let head_w = pb.weight("head.weight".into(), c, genome.widths[0], 1);
    let head_b = pb.bias("head.bias".into(), c, genome.widths[0]);

    let decoder = Decoder {
        genome: genome.clone(),
        latent_shape,
        out_shape,
        params: pb.params,
        names: pb.names,
        encoders,
        levels,
        head: (head_w, head_b),
    };
    let pixels = b * c * h * w;
    if decoder.param_count() <= pixels {
        return Err(Error::invalid(format!(
            "decoder has {} parameters, not more than the {pixels} output values; widen it",
            decoder.param_count()
        )));
    }
    Ok(decoder)
}

fn same_pad(k: usize, dilation: usize) -> ConvCfg {
    ConvCfg {
        stride: 1,
        padding: dilation * (k - 1) / 2,
        dilation,
        groups: 1,
    }
}

impl Decoder {
    pub fn genome(&self) -> &ArchGenome {
        &self.genome
    }

    pub fn latent_shape(&self) -> [usize; 4] {
        self.latent_shape
    }

    pub fn out_shape(&self) -> [usize; 4] {
        self.out_shape
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn checksum(&self) -> u64 {
        crate::victim::checksum(self.params.iter().map(|p| &p.tensor))
    }

    /// Replaces parameter values; shapes must match.
    pub fn set_param_values(&mut self, values: Vec<Tensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.tensor.shape() != v.shape() {
                return Err(Error::ShapeMismatch {
                    op: "set_param_values",
                    lhs: p.tensor.shape().to_vec(),
                    rhs: v.shape().to_vec(),
                });
            }
            p.tensor = v.detach();
        }
        Ok(())
    }

    /// `G(z0; phi)` for parameter tensors `phi` (graph leaves or plain values).
    pub fn forward(&self, z0: &Tensor, phi: &[Tensor]) -> Result<Tensor> {
        if z0.shape() != self.latent_shape {
            return Err(Error::ShapeMismatch {
                op: "decoder",
                lhs: z0.shape().to_vec(),
                rhs: self.latent_shape.to_vec(),
            });
        }
        if phi.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "decoder expects {} parameter tensors, got {}",
                self.params.len(),
                phi.len()
            )));
        }
        let enc_cfg = same_pad(3, 1);
        let mut feats = Vec::with_capacity(self.encoders.len());
        let mut x = z0.clone();
        for &(wi, bi) in &self.encoders {
            x = conv2d(&x, &phi[wi], Some(&phi[bi]), enc_cfg)?;
            x = x.leaky_relu(LEAKY_SLOPE)?;
            feats.push(x.clone());
        }

        let mut h = x;
        for level in &self.levels {
            let mode = level.config.interp.mode();
            for &(i, proj, chain) in &level.skips {
                let s = conv2d(&feats[i], &phi[proj], None, ConvCfg::default())?;
                h = h.add(&chain.apply(&s, mode)?)?;
            }
            let up = resample2x(&h, ResampleDir::Up, mode)?;
            let cfg = same_pad(level.config.kernel, level.config.dilation);
            let y = match level.transform {
                TransformLayout::Conv { weight, bias } => conv2d(&up, &phi[weight], Some(&phi[bias]), cfg)?,
                TransformLayout::Separable { dw, pw, bias } => {
                    let d = conv2d(&up, &phi[dw], None, ConvCfg { groups: level.cin, ..cfg })?;
                    conv2d(&d, &phi[pw], Some(&phi[bias]), ConvCfg::default())?
                }
                TransformLayout::Depthwise { pw, dw, bias } => {
                    let p = conv2d(&up, &phi[pw], None, ConvCfg::default())?;
                    conv2d(&p, &phi[dw], Some(&phi[bias]), ConvCfg { groups: level.cout, ..cfg })?
                }
            };
            h = match (level.config.activation, level.prelu) {
                (Activation::Relu, _) => y.relu()?,
                (Activation::LeakyRelu, _) => y.leaky_relu(LEAKY_SLOPE)?,
                (Activation::Prelu, Some(a)) => y.prelu(&phi[a])?,
                (Activation::Prelu, None) => unreachable!("prelu slope registered at build"),
            };
        }
        let (hw, hb) = self.head;
        conv2d(&h, &phi[hw], Some(&phi[hb]), ConvCfg::default())?.sigmoid()
    }

    /// Forward pass with the decoder's own parameter values.
    pub fn generate(&self, z0: &Tensor) -> Result<Tensor> {
        self.forward(z0, &self.param_values())
    }
}

/// Latent shape for a `B×C×H×W` target at `levels` decoder levels.
pub fn latent_shape_for(out_shape: [usize; 4], levels: usize) -> Result<[usize; 4]> {
    let [b, _, h, w] = out_shape;
    let f = 1usize << levels;
    if h % f != 0 || w % f != 0 {
        return Err(Error::invalid(format!(
            "output {h}x{w} is not divisible by 2^{levels}"
        )));
    }
    Ok([b, LATENT_CHANNELS, h / f, w / f])
}

/// Standard-normal latent of the given shape.
pub fn sample_latent(shape: [usize; 4], seed: u64) -> Tensor {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..tensor::numel(&shape))
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::raw(shape.to_vec(), data)
}
