//! Architecture descriptors, model construction and SineFM conversion.
//!
//! Descriptors use a line-oriented text format:
//!
//! ```text
//! # comment
//! input 3 32 32
//! conv 3 16 3 1 1            # c_in c_out K stride pad
//! relu
//! sinefm 16 64 16 3 1 1 5 sinusoidal 42   # c_in c_out c_s K stride pad k family seed
//! pool                       # 2x2 max pool
//! up                         # nearest 2x upsample
//! save                       # push the current activation
//! add                        # pop and add (identity shortcut)
//! addproj 64 128 2           # pop, 1x1 conv c_in c_out stride, add
//! gap
//! dense 64 4
//! seghead 16 2
//! ```
//!
//! A `sinefm` line may end with `bounds lo:hi [lo:hi]` when its family's
//! sampling ranges differ from the defaults.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layer::{init_uniform, SineFMConfig, SineFMLayer};
use crate::real::Real;
use crate::rng::{derive_seed, stream, Xoshiro256};
use crate::tape::{conv_out_extent, Tape, Var};
use crate::tensor::{Shape, Tensor};
use crate::transforms::{Bounds, HyperBounds, TransformFamily, TransformSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    StandardConv(ConvSpec),
    SineFM(SineFMConfig),
    MaxPool,
    NearestUpsample,
    Relu,
    GlobalAvgPool,
    DenseHead { c_in: usize, classes: usize },
    SegHead { c_in: usize, classes: usize },
    /// Pushes the current activation for a later `Add`/`AddProj`.
    Save,
    /// Adds the most recently saved activation (identity shortcut).
    Add,
    /// Adds a 1×1-projected saved activation (projection shortcut).
    AddProj { c_in: usize, c_out: usize, stride: usize },
}

impl LayerSpec {
    pub fn keyword(&self) -> &'static str {
        match self {
            LayerSpec::StandardConv(_) => "conv",
            LayerSpec::SineFM(_) => "sinefm",
            LayerSpec::MaxPool => "pool",
            LayerSpec::NearestUpsample => "up",
            LayerSpec::Relu => "relu",
            LayerSpec::GlobalAvgPool => "gap",
            LayerSpec::DenseHead { .. } => "dense",
            LayerSpec::SegHead { .. } => "seghead",
            LayerSpec::Save => "save",
            LayerSpec::Add => "add",
            LayerSpec::AddProj { .. } => "addproj",
        }
    }

    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerSpec::StandardConv(_)
                | LayerSpec::SineFM(_)
                | LayerSpec::DenseHead { .. }
                | LayerSpec::SegHead { .. }
                | LayerSpec::AddProj { .. }
        )
    }

    /// Shapes of this layer's learnable tensors, in storage order.
    pub fn weight_shapes(&self) -> Vec<[usize; 4]> {
        match self {
            LayerSpec::StandardConv(c) => vec![[c.c_out, c.c_in, c.kernel, c.kernel]],
            LayerSpec::SineFM(cfg) => {
                let mut v = vec![[cfg.c_s, cfg.c_in, cfg.kernel, cfg.kernel]];
                if cfg.c_out > cfg.c_s {
                    v.push([cfg.c_out - cfg.c_s, cfg.fanout * cfg.c_s, 1, 1]);
                }
                v
            }
            LayerSpec::DenseHead { c_in, classes } | LayerSpec::SegHead { c_in, classes } => {
                vec![[*classes, *c_in, 1, 1], [1, *classes, 1, 1]]
            }
            LayerSpec::AddProj { c_in, c_out, .. } => vec![[*c_out, *c_in, 1, 1]],
            _ => Vec::new(),
        }
    }

    pub fn learnable_params(&self) -> usize {
        self.weight_shapes().iter().map(|s| s.iter().product::<usize>()).sum()
    }
}

/// Input and output `(C, H, W)` of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerTrace {
    pub input: (usize, usize, usize),
    pub output: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArchDescriptor {
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

impl ArchDescriptor {
    pub fn new(input: (usize, usize, usize), layers: Vec<LayerSpec>) -> Self {
        Self { input, layers }
    }

    /// Propagates shapes from an input of `hw`, checking that channel counts
    /// chain. Errors name the offending layer index.
    pub fn trace(&self, hw: (usize, usize)) -> Result<Vec<LayerTrace>> {
        let invalid = |i: usize, msg: String| Error::Validation(format!("layer {i}: {msg}"));
        if self.layers.is_empty() {
            return Err(Error::Validation("descriptor has no layers".into()));
        }
        let (mut c, mut h, mut w) = (self.input.0, hw.0, hw.1);
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Validation("input extents must be positive".into()));
        }
        let mut saved: Vec<(usize, usize, usize)> = Vec::new();
        let mut seeds = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = (c, h, w);
            let conv = |c_in: usize, kernel: usize, stride: usize, pad: usize, c: usize, h: usize, w: usize| {
                if c_in != c {
                    return Err(invalid(i, format!("expects {c_in} input channels but receives {c}")));
                }
                let ho = conv_out_extent(h, kernel, stride, pad);
                let wo = conv_out_extent(w, kernel, stride, pad);
                match (ho, wo) {
                    (Some(ho), Some(wo)) => Ok((ho, wo)),
                    _ => Err(invalid(i, format!("kernel {kernel}/stride {stride} does not fit a {h}x{w} input"))),
                }
            };
            match layer {
                LayerSpec::StandardConv(s) => {
                    if s.c_out == 0 || s.kernel == 0 {
                        return Err(invalid(i, "conv needs positive c_out and kernel".into()));
                    }
                    (h, w) = conv(s.c_in, s.kernel, s.stride, s.pad, c, h, w)?;
                    c = s.c_out;
                }
                LayerSpec::SineFM(cfg) => {
                    cfg.validate().map_err(|e| invalid(i, e.to_string()))?;
                    if !seeds.insert(cfg.seed) {
                        return Err(invalid(i, format!("transform seed {} reused", cfg.seed)));
                    }
                    (h, w) = conv(cfg.c_in, cfg.kernel, cfg.stride, cfg.padding, c, h, w)?;
                    c = cfg.c_out;
                }
                LayerSpec::MaxPool => {
                    if h < 2 || w < 2 {
                        return Err(invalid(i, format!("cannot pool a {h}x{w} map")));
                    }
                    (h, w) = (h / 2, w / 2);
                }
                LayerSpec::NearestUpsample => (h, w) = (2 * h, 2 * w),
                LayerSpec::Relu => {}
                LayerSpec::GlobalAvgPool => (h, w) = (1, 1),
                LayerSpec::DenseHead { c_in, classes } => {
                    if *c_in != c {
                        return Err(invalid(i, format!("dense head expects {c_in} inputs but receives {c}")));
                    }
                    if h != 1 || w != 1 {
                        return Err(invalid(i, format!("dense head needs 1x1 maps, got {h}x{w} (add gap)")));
                    }
                    if *classes == 0 {
                        return Err(invalid(i, "head needs at least one class".into()));
                    }
                    c = *classes;
                }
                LayerSpec::SegHead { c_in, classes } => {
                    if *c_in != c {
                        return Err(invalid(i, format!("segmentation head expects {c_in} inputs but receives {c}")));
                    }
                    if *classes == 0 {
                        return Err(invalid(i, "head needs at least one class".into()));
                    }
                    c = *classes;
                }
                LayerSpec::Save => saved.push((c, h, w)),
                LayerSpec::Add => {
                    let s = saved.pop().ok_or_else(|| invalid(i, "add without a matching save".into()))?;
                    if s != (c, h, w) {
                        return Err(invalid(i, format!("shortcut {s:?} does not match {:?}", (c, h, w))));
                    }
                }
                LayerSpec::AddProj { c_in, c_out, stride } => {
                    let s = saved.pop().ok_or_else(|| invalid(i, "addproj without a matching save".into()))?;
                    let (ph, pw) = conv(*c_in, 1, *stride, 0, s.0, s.1, s.2)?;
                    if (*c_out, ph, pw) != (c, h, w) {
                        return Err(invalid(
                            i,
                            format!("projected shortcut {:?} does not match {:?}", (*c_out, ph, pw), (c, h, w)),
                        ));
                    }
                }
            }
            out.push(LayerTrace { input, output: (c, h, w) });
        }
        if !saved.is_empty() {
            return Err(Error::Validation(format!("{} saved activation(s) never consumed", saved.len())));
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        self.trace((self.input.1, self.input.2)).map(|_| ())
    }

    pub fn output_channels(&self) -> Result<usize> {
        Ok(self.trace((self.input.1, self.input.2))?.last().map(|t| t.output.0).unwrap_or(self.input.0))
    }

    pub fn head(&self) -> Option<&LayerSpec> {
        self.layers
            .iter()
            .rev()
            .find(|l| matches!(l, LayerSpec::DenseHead { .. } | LayerSpec::SegHead { .. }))
    }

    pub fn learnable_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::learnable_params).sum()
    }

    /// Same descriptor with a different nominal input size.
    pub fn with_input_hw(mut self, h: usize, w: usize) -> Self {
        self.input = (self.input.0, h, w);
        self
    }

    pub fn to_text(&self) -> String {
        self.to_string()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        text.parse()
    }
}

impl fmt::Display for ArchDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {} {} {}", self.input.0, self.input.1, self.input.2)?;
        for layer in &self.layers {
            let mut line = layer.keyword().to_string();
            match layer {
                LayerSpec::StandardConv(s) => {
                    write!(line, " {} {} {} {} {}", s.c_in, s.c_out, s.kernel, s.stride, s.pad)?;
                }
                LayerSpec::SineFM(c) => {
                    write!(
                        line,
                        " {} {} {} {} {} {} {} {} {}",
                        c.c_in, c.c_out, c.c_s, c.kernel, c.stride, c.padding, c.fanout, c.family, c.seed
                    )?;
                    if !c.bounds.is_default_for(c.family) {
                        line.push_str(" bounds");
                        for b in c.bounds.for_family(c.family) {
                            write!(line, " {b}")?;
                        }
                    }
                }
                LayerSpec::DenseHead { c_in, classes } | LayerSpec::SegHead { c_in, classes } => {
                    write!(line, " {c_in} {classes}")?;
                }
                LayerSpec::AddProj { c_in, c_out, stride } => write!(line, " {c_in} {c_out} {stride}")?,
                _ => {}
            }
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

impl FromStr for ArchDescriptor {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input = None;
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Format(format!("line {}: {msg}: '{line}'", lineno + 1));
            let toks: Vec<&str> = line.split_whitespace().collect();
            let nums = |range: std::ops::Range<usize>| -> Result<Vec<usize>> {
                range
                    .map(|i| {
                        toks.get(i)
                            .ok_or_else(|| err("missing field"))?
                            .parse::<usize>()
                            .map_err(|_| err("expected a non-negative integer"))
                    })
                    .collect()
            };
            let arity = |n: usize| -> Result<()> {
                if toks.len() != n + 1 {
                    return Err(err(&format!("'{}' takes {n} field(s)", toks[0])));
                }
                Ok(())
            };
            match toks[0] {
                "input" => {
                    arity(3)?;
                    let v = nums(1..4)?;
                    input = Some((v[0], v[1], v[2]));
                }
                "conv" => {
                    arity(5)?;
                    let v = nums(1..6)?;
                    layers.push(LayerSpec::StandardConv(ConvSpec {
                        c_in: v[0],
                        c_out: v[1],
                        kernel: v[2],
                        stride: v[3],
                        pad: v[4],
                    }));
                }
                "sinefm" => {
                    if toks.len() < 10 {
                        return Err(err("'sinefm' takes c_in c_out c_s K stride pad k family seed"));
                    }
                    let v = nums(1..8)?;
                    let family: TransformFamily = toks[8].parse().map_err(|_| err("unknown family"))?;
                    let seed: u64 = toks[9].parse().map_err(|_| err("bad seed"))?;
                    let mut cfg = SineFMConfig::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], family, seed);
                    if toks.len() > 10 {
                        if toks[10] != "bounds" {
                            return Err(err("unexpected trailing fields"));
                        }
                        let pairs = toks[11..]
                            .iter()
                            .map(|t| t.parse::<Bounds>())
                            .collect::<Result<Vec<_>>>()
                            .map_err(|_| err("bad bounds"))?;
                        cfg.bounds = HyperBounds::with_family_bounds(family, &pairs).map_err(|e| err(&e.to_string()))?;
                    }
                    layers.push(LayerSpec::SineFM(cfg));
                }
                "pool" => {
                    arity(0)?;
                    layers.push(LayerSpec::MaxPool);
                }
                "up" => {
                    arity(0)?;
                    layers.push(LayerSpec::NearestUpsample);
                }
                "relu" => {
                    arity(0)?;
                    layers.push(LayerSpec::Relu);
                }
                "gap" => {
                    arity(0)?;
                    layers.push(LayerSpec::GlobalAvgPool);
                }
                "save" => {
                    arity(0)?;
                    layers.push(LayerSpec::Save);
                }
                "add" => {
                    arity(0)?;
                    layers.push(LayerSpec::Add);
                }
                "dense" | "seghead" => {
                    arity(2)?;
                    let v = nums(1..3)?;
                    layers.push(if toks[0] == "dense" {
                        LayerSpec::DenseHead { c_in: v[0], classes: v[1] }
                    } else {
                        LayerSpec::SegHead { c_in: v[0], classes: v[1] }
                    });
                }
                "addproj" => {
                    arity(3)?;
                    let v = nums(1..4)?;
                    layers.push(LayerSpec::AddProj {
                        c_in: v[0],
                        c_out: v[1],
                        stride: v[2],
                    });
                }
                other => return Err(err(&format!("unknown layer kind '{other}'"))),
            }
        }
        let input = input.ok_or_else(|| Error::Format("missing 'input C H W' header".into()))?;
        Ok(Self { input, layers })
    }
}

/// Settings for [`convert_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct ConvertOptions {
    pub c_s: usize,
    pub fanout: usize,
    pub family: TransformFamily,
    pub seed: u64,
    pub bounds: HyperBounds,
}

impl ConvertOptions {
    pub fn new(c_s: usize, fanout: usize, family: TransformFamily, seed: u64) -> Self {
        Self {
            c_s,
            fanout,
            family,
            seed,
            bounds: HyperBounds::default(),
        }
    }
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self::new(16, 5, TransformFamily::Sinusoidal, 0)
    }
}

/// Replaces every standard convolution wider than `c_s` (odd kernel) with a
/// SineFM layer of identical geometry. Layer `i` gets transform seed
/// `derive_seed(seed, i)`.
pub fn convert_to_sinefm(desc: &ArchDescriptor, c_s: usize, k: usize, family: TransformFamily, seed: u64) -> ArchDescriptor {
    convert_with(desc, &ConvertOptions::new(c_s, k, family, seed))
}

pub fn convert_with(desc: &ArchDescriptor, opts: &ConvertOptions) -> ArchDescriptor {
    let layers = desc
        .layers
        .iter()
        .enumerate()
        .map(|(i, layer)| match layer {
            LayerSpec::StandardConv(s) if s.c_out > opts.c_s && s.kernel % 2 == 1 => {
                let mut cfg = SineFMConfig::new(
                    s.c_in,
                    s.c_out,
                    opts.c_s.min(s.c_out),
                    s.kernel,
                    s.stride,
                    s.pad,
                    opts.fanout,
                    opts.family,
                    derive_seed(opts.seed, i as u64),
                );
                cfg.bounds = HyperBounds::with_family_bounds(opts.family, &opts.bounds.for_family(opts.family))
                    .unwrap_or(opts.bounds);
                LayerSpec::SineFM(cfg)
            }
            other => other.clone(),
        })
        .collect();
    ArchDescriptor { input: desc.input, layers }
}

/// Replaces every SineFM layer with a standard convolution of equal geometry.
pub fn to_standard(desc: &ArchDescriptor) -> ArchDescriptor {
    let layers = desc
        .layers
        .iter()
        .map(|layer| match layer {
            LayerSpec::SineFM(c) => LayerSpec::StandardConv(ConvSpec {
                c_in: c.c_in,
                c_out: c.c_out,
                kernel: c.kernel,
                stride: c.stride,
                pad: c.padding,
            }),
            other => other.clone(),
        })
        .collect();
    ArchDescriptor { input: desc.input, layers }
}

// ----------------------------------------------------------------------
// Reference backbones
// ----------------------------------------------------------------------

fn conv(c_in: usize, c_out: usize, kernel: usize, stride: usize) -> LayerSpec {
    LayerSpec::StandardConv(ConvSpec {
        c_in,
        c_out,
        kernel,
        stride,
        pad: kernel / 2,
    })
}

/// Six 3×3 convolutions (16, 32, 64, 128, 128, 128 channels) with three
/// max-pools and a dense head.
pub fn tiny_vgg(classes: usize, hw: usize) -> ArchDescriptor {
    use LayerSpec::*;
    ArchDescriptor::new(
        (3, hw, hw),
        vec![
            conv(3, 16, 3, 1),
            Relu,
            MaxPool,
            conv(16, 32, 3, 1),
            Relu,
            MaxPool,
            conv(32, 64, 3, 1),
            Relu,
            conv(64, 128, 3, 1),
            Relu,
            MaxPool,
            conv(128, 128, 3, 1),
            Relu,
            conv(128, 128, 3, 1),
            Relu,
            GlobalAvgPool,
            DenseHead { c_in: 128, classes },
        ],
    )
}

fn basic_block(c: usize) -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![Save, conv(c, c, 3, 1), Relu, conv(c, c, 3, 1), Add, Relu]
}

/// A 16-channel stem and two residual stages (64 and 128 channels) with
/// identity shortcuts.
pub fn tiny_resnet(classes: usize, hw: usize) -> ArchDescriptor {
    use LayerSpec::*;
    let mut layers = vec![conv(3, 16, 3, 1), Relu, MaxPool, conv(16, 64, 3, 1), Relu];
    layers.extend(basic_block(64));
    layers.extend([MaxPool, conv(64, 128, 3, 1), Relu]);
    layers.extend(basic_block(128));
    layers.extend([GlobalAvgPool, DenseHead { c_in: 128, classes }]);
    ArchDescriptor::new((3, hw, hw), layers)
}

/// Two-level encoder-decoder with additive skips and a per-pixel head.
pub fn tiny_unet(classes: usize, hw: usize) -> ArchDescriptor {
    use LayerSpec::*;
    ArchDescriptor::new(
        (3, hw, hw),
        vec![
            conv(3, 16, 3, 1),
            Relu,
            Save,
            MaxPool,
            conv(16, 32, 3, 1),
            Relu,
            Save,
            MaxPool,
            conv(32, 64, 3, 1),
            Relu,
            NearestUpsample,
            conv(64, 32, 3, 1),
            Relu,
            Add,
            NearestUpsample,
            conv(32, 16, 3, 1),
            Relu,
            Add,
            SegHead { c_in: 16, classes },
        ],
    )
}

/// ResNet-50 (bottleneck blocks, stride on the 3×3 convolution, projection
/// shortcuts) at 224×224. The 3×3/2 stem pool is modelled as a 2×2 pool,
/// which yields the same 56×56 map.
pub fn resnet50() -> ArchDescriptor {
    use LayerSpec::*;
    let mut layers = vec![conv(3, 64, 7, 2), Relu, MaxPool];
    let mut c_in = 64;
    for (stage, (&blocks, &width)) in [3usize, 4, 6, 3].iter().zip(&[64usize, 128, 256, 512]).enumerate() {
        for b in 0..blocks {
            let stride = if b == 0 && stage > 0 { 2 } else { 1 };
            let c_out = width * 4;
            layers.extend([
                Save,
                conv(c_in, width, 1, 1),
                Relu,
                conv(width, width, 3, stride),
                Relu,
                conv(width, c_out, 1, 1),
            ]);
            if b == 0 {
                layers.push(AddProj { c_in, c_out, stride });
            } else {
                layers.push(Add);
            }
            layers.push(Relu);
            c_in = c_out;
        }
    }
    layers.extend([GlobalAvgPool, DenseHead { c_in: 2048, classes: 1000 }]);
    ArchDescriptor::new((3, 224, 224), layers)
}

pub const BUILTIN_NAMES: [&str; 4] = ["tiny-vgg", "tiny-resnet", "tiny-unet", "resnet50"];

/// Built-in descriptors by name, at their nominal input size.
pub fn builtin(name: &str) -> Option<ArchDescriptor> {
    match name {
        "tiny-vgg" => Some(tiny_vgg(4, 32)),
        "tiny-resnet" => Some(tiny_resnet(4, 32)),
        "tiny-unet" => Some(tiny_unet(2, 32)),
        "resnet50" | "resnet-50" => Some(resnet50()),
        _ => None,
    }
}

// ----------------------------------------------------------------------
// Instantiated models
// ----------------------------------------------------------------------

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv { stride: usize, pad: usize, weight: Tensor<T> },
    SineFM(SineFMLayer<T>),
    MaxPool,
    Upsample,
    Relu,
    GlobalAvgPool,
    /// Dense and segmentation heads: a 1×1 convolution plus per-class bias.
    Head { weight: Tensor<T>, bias: Tensor<T> },
    Save,
    Add,
    AddProj { stride: usize, weight: Tensor<T> },
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    descriptor: ArchDescriptor,
    layers: Vec<Layer<T>>,
    seed: Option<u64>,
}

impl<T: Real> Model<T> {
    /// Instantiates `descriptor`; learnable weights are uniform in
    /// `±√(1/fan_in)`, drawn from the init stream of `seed`.
    pub fn build(descriptor: &ArchDescriptor, seed: u64) -> Result<Self> {
        descriptor.validate()?;
        let mut rng = Xoshiro256::seed_from_u64(derive_seed(seed, stream::INIT));
        let layers = descriptor
            .layers
            .iter()
            .map(|spec| -> Result<Layer<T>> {
                Ok(match spec {
                    LayerSpec::StandardConv(s) => Layer::Conv {
                        stride: s.stride,
                        pad: s.pad,
                        weight: init_uniform(
                            &mut rng,
                            Shape::new(s.c_out, s.c_in, s.kernel, s.kernel)?,
                            s.c_in * s.kernel * s.kernel,
                        ),
                    },
                    LayerSpec::SineFM(cfg) => Layer::SineFM(SineFMLayer::new(cfg.clone(), &mut rng)?),
                    LayerSpec::DenseHead { c_in, classes } | LayerSpec::SegHead { c_in, classes } => Layer::Head {
                        weight: init_uniform(&mut rng, Shape::new(*classes, *c_in, 1, 1)?, *c_in),
                        bias: Tensor::zeros(Shape::new(1, *classes, 1, 1)?),
                    },
                    LayerSpec::AddProj { c_in, c_out, stride } => Layer::AddProj {
                        stride: *stride,
                        weight: init_uniform(&mut rng, Shape::new(*c_out, *c_in, 1, 1)?, *c_in),
                    },
                    other => Self::stateless(other),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            descriptor: descriptor.clone(),
            layers,
            seed: Some(seed),
        })
    }

    fn stateless(spec: &LayerSpec) -> Layer<T> {
        match spec {
            LayerSpec::MaxPool => Layer::MaxPool,
            LayerSpec::NearestUpsample => Layer::Upsample,
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Save => Layer::Save,
            LayerSpec::Add => Layer::Add,
            _ => unreachable!("layer kind carries weights"),
        }
    }

    /// Reassembles a model from `descriptor` and its learnable tensors in
    /// [`params`](Self::params) order. Transforms are re-derived from seeds.
    pub fn from_weights(descriptor: &ArchDescriptor, weights: Vec<Tensor<T>>) -> Result<Self> {
        descriptor.validate()?;
        let expected: usize = descriptor.layers.iter().map(|l| l.weight_shapes().len()).sum();
        if weights.len() != expected {
            return Err(Error::dim(format!("expected {expected} weight tensors, got {}", weights.len())));
        }
        let mut it = weights.into_iter();
        let mut layers = Vec::with_capacity(descriptor.layers.len());
        for (i, spec) in descriptor.layers.iter().enumerate() {
            let mut take = |dims: [usize; 4]| -> Result<Tensor<T>> {
                let t = it.next().expect("count checked");
                if t.shape().0 != dims {
                    return Err(Error::dim(format!(
                        "layer {i}: weight shape {} does not match {:?}",
                        t.shape(),
                        dims
                    )));
                }
                Ok(t)
            };
            let shapes = spec.weight_shapes();
            layers.push(match spec {
                LayerSpec::StandardConv(s) => Layer::Conv {
                    stride: s.stride,
                    pad: s.pad,
                    weight: take(shapes[0])?,
                },
                LayerSpec::SineFM(cfg) => {
                    let seed_filters = take(shapes[0])?;
                    let combine = shapes.get(1).map(|&d| take(d)).transpose()?;
                    Layer::SineFM(SineFMLayer::from_weights(cfg.clone(), seed_filters, combine)?)
                }
                LayerSpec::DenseHead { .. } | LayerSpec::SegHead { .. } => Layer::Head {
                    weight: take(shapes[0])?,
                    bias: take(shapes[1])?,
                },
                LayerSpec::AddProj { stride, .. } => Layer::AddProj {
                    stride: *stride,
                    weight: take(shapes[0])?,
                },
                other => Self::stateless(other),
            });
        }
        Ok(Self {
            descriptor: descriptor.clone(),
            layers,
            seed: None,
        })
    }

    pub fn descriptor(&self) -> &ArchDescriptor {
        &self.descriptor
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    /// Initialisation seed, when the model was built rather than loaded.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Conv { weight, .. } | Layer::AddProj { weight, .. } => out.push(weight),
                Layer::SineFM(l) => out.extend(l.params()),
                Layer::Head { weight, bias } => out.extend([weight, bias]),
                _ => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Conv { weight, .. } | Layer::AddProj { weight, .. } => out.push(weight),
                Layer::SineFM(l) => out.extend(l.params_mut()),
                Layer::Head { weight, bias } => out.extend([weight, bias]),
                _ => {}
            }
        }
        out
    }

    pub fn learnable_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Fixed transforms of every SineFM layer, in layer order.
    pub fn transform_specs(&self) -> Vec<&TransformSpec> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::SineFM(s) => Some(s.transform()),
                _ => None,
            })
            .collect()
    }

    /// Records the whole network on `tape`. Returns the output and the
    /// learnable leaves in [`params`](Self::params) order.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let c = tape.shape(x).c();
        if c != self.descriptor.input.0 {
            return Err(Error::dim(format!(
                "model expects {} input channels, got {c}",
                self.descriptor.input.0
            )));
        }
        let mut params = Vec::new();
        let mut saved = Vec::new();
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { stride, pad, weight } => {
                    let w = tape.param(weight);
                    params.push(w);
                    tape.conv2d(h, w, *stride, *pad)?
                }
                Layer::SineFM(l) => l.forward(tape, h, &mut params)?,
                Layer::MaxPool => tape.max_pool2(h)?,
                Layer::Upsample => tape.upsample2(h)?,
                Layer::Relu => tape.relu(h)?,
                Layer::GlobalAvgPool => tape.global_avg_pool(h)?,
                Layer::Head { weight, bias } => {
                    let w = tape.param(weight);
                    let b = tape.param(bias);
                    params.extend([w, b]);
                    let z = tape.conv2d(h, w, 1, 0)?;
                    tape.channel_bias(z, b)?
                }
                Layer::Save => {
                    saved.push(h);
                    h
                }
                Layer::Add => {
                    let s = saved.pop().ok_or_else(|| Error::State("add without save".into()))?;
                    tape.add(h, s)?
                }
                Layer::AddProj { stride, weight } => {
                    let s = saved.pop().ok_or_else(|| Error::State("addproj without save".into()))?;
                    let w = tape.param(weight);
                    params.push(w);
                    let p = tape.conv2d(s, w, *stride, 0)?;
                    tape.add(h, p)?
                }
            };
        }
        Ok((h, params))
    }

    /// Forward pass without gradients. Classification heads yield
    /// `N×classes×1×1` logits; segmentation heads `N×classes×H×W` maps.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (out, _) = self.forward(&mut tape, xv)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for name in BUILTIN_NAMES {
            builtin(name).unwrap().validate().unwrap();
        }
        let vgg = tiny_vgg(4, 32);
        let convs = vgg.layers.iter().filter(|l| matches!(l, LayerSpec::StandardConv(_))).count();
        assert_eq!(convs, 6);
        assert_eq!(vgg.output_channels().unwrap(), 4);
    }

    #[test]
    fn text_round_trip() {
        let mut d = convert_to_sinefm(&tiny_resnet(4, 32), 16, 5, TransformFamily::Sinusoidal, 77);
        if let LayerSpec::SineFM(c) = &mut d.layers[3] {
            c.bounds.omega = Bounds::new(0.0, 1.0);
        }
        let text = d.to_text();
        let back: ArchDescriptor = text.parse().unwrap();
        assert_eq!(back, d);
        assert_eq!(back.to_text(), text);
        assert!(text.contains("bounds 0:1 1:5"));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!("conv 3 16 3 1 1\n".parse::<ArchDescriptor>(), Err(Error::Format(_))));
        assert!(matches!("input 3 8 8\nconv 3 16 3 1\n".parse::<ArchDescriptor>(), Err(Error::Format(_))));
        assert!(matches!("input 3 8 8\nwarp 2\n".parse::<ArchDescriptor>(), Err(Error::Format(_))));
        let ok = "# tiny\ninput 3 8 8  # rgb\n\nconv 3 4 3 1 1\nrelu\n".parse::<ArchDescriptor>().unwrap();
        assert_eq!(ok.layers.len(), 2);
    }

    #[test]
    fn validation_names_layer() {
        let mut d = tiny_vgg(4, 32);
        d.layers[3] = conv(8, 32, 3, 1);
        let err = d.validate().unwrap_err().to_string();
        assert!(err.contains("layer 3"), "{err}");
        let mut dup = convert_to_sinefm(&tiny_vgg(4, 32), 16, 5, TransformFamily::Sinusoidal, 1);
        let seeds: Vec<usize> = dup
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::SineFM(_)))
            .map(|(i, _)| i)
            .collect();
        let first = match &dup.layers[seeds[0]] {
            LayerSpec::SineFM(c) => c.seed,
            _ => unreachable!(),
        };
        if let LayerSpec::SineFM(c) = &mut dup.layers[seeds[1]] {
            c.seed = first;
        }
        assert!(dup.validate().is_err());
    }

    #[test]
    fn conversion_rules() {
        let vgg = tiny_vgg(4, 32);
        let conv = convert_to_sinefm(&vgg, 16, 5, TransformFamily::Sinusoidal, 9);
        assert!(matches!(conv.layers[0], LayerSpec::StandardConv(_)));
        assert!(matches!(conv.layers[3], LayerSpec::SineFM(_)));
        assert_eq!(convert_to_sinefm(&conv, 16, 5, TransformFamily::Sinusoidal, 9), conv);
        assert_eq!(to_standard(&conv), vgg);
        let a = vgg.trace((32, 32)).unwrap();
        let b = conv.trace((32, 32)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn predict_shapes_and_determinism() {
        let m = Model::<f32>::build(&tiny_vgg(4, 32), 3).unwrap();
        let x = Tensor::full(Shape::new(2, 3, 32, 32).unwrap(), 0.5f32);
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape().0, [2, 4, 1, 1]);
        assert!(y.bit_eq(&m.predict(&x).unwrap()));

        let u = Model::<f32>::build(&tiny_unet(2, 32), 3).unwrap();
        let y = u.predict(&Tensor::full(Shape::new(1, 3, 32, 32).unwrap(), 0.1)).unwrap();
        assert_eq!(y.shape().0, [1, 2, 32, 32]);

        let bad = Tensor::full(Shape::new(1, 4, 32, 32).unwrap(), 0.1f32);
        assert!(matches!(m.predict(&bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn build_is_deterministic_and_seed_sensitive() {
        let d = convert_to_sinefm(&tiny_resnet(4, 32), 16, 5, TransformFamily::Sinusoidal, 4);
        let a = Model::<f32>::build(&d, 10).unwrap();
        let b = Model::<f32>::build(&d, 10).unwrap();
        let c = Model::<f32>::build(&d, 11).unwrap();
        assert!(a.params().iter().zip(b.params()).all(|(x, y)| x.bit_eq(y)));
        assert!(!a.params().iter().zip(c.params()).all(|(x, y)| x.bit_eq(y)));
        assert_eq!(a.learnable_count(), d.learnable_params());
    }

    #[test]
    fn from_weights_round_trip() {
        let d = convert_to_sinefm(&tiny_unet(2, 32), 16, 5, TransformFamily::GaussianRbf, 4);
        let m = Model::<f64>::build(&d, 1).unwrap();
        let weights: Vec<Tensor<f64>> = m.params().into_iter().cloned().collect();
        let r = Model::from_weights(&d, weights).unwrap();
        let x = Tensor::full(Shape::new(1, 3, 16, 16).unwrap(), 0.3);
        assert!(m.predict(&x).unwrap().bit_eq(&r.predict(&x).unwrap()));
        assert!(Model::<f64>::from_weights(&d, vec![]).is_err());
    }
}
