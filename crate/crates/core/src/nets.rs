//! Echo, visual and material subnetworks plus the shared upsampling stack.

use echodepth_tensor::{Activation, Var};

use crate::error::{Error, Result};
use crate::kv::{KvList, KvMap};
use crate::layers::{BatchNorm2d, Conv2d, ConvBlock, ConvKind, ConvTranspose2d};
use crate::params::{Builder, Ctx};

const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Output depth map side `W = H`.
    pub image_size: usize,
    /// Feature width `N` shared by the echo vector and the visual/material maps.
    pub feature_dim: usize,
    /// Divisor applied to every reference channel width (1 at full size, 4 at toy size).
    pub width_div: usize,
    /// Output channels `K` of each bilinear fusion branch.
    pub fusion_channels: usize,
    /// Echo spectrogram `[channels, freq bins, frames]`.
    pub spec_shape: [usize; 3],
    /// Include convolution biases and batch-norm shifts.
    pub bias: bool,
    /// Use U-Net skip connections; when off the skips are replaced by zeros.
    pub skip_connections: bool,
}

impl NetConfig {
    pub fn full(image_size: usize, spec_shape: [usize; 3]) -> Self {
        NetConfig {
            image_size,
            feature_dim: 512,
            width_div: 1,
            fusion_channels: 64,
            spec_shape,
            bias: true,
            skip_connections: true,
        }
    }

    pub fn toy(image_size: usize, spec_shape: [usize; 3]) -> Self {
        NetConfig {
            image_size,
            feature_dim: 128,
            width_div: 4,
            fusion_channels: 16,
            spec_shape,
            bias: true,
            skip_connections: true,
        }
    }

    pub fn width(&self, reference: usize) -> usize {
        (reference / self.width_div).max(1)
    }

    /// Number of stride-2 upsampling stages from a 1×1 code: `log2(W)`.
    pub fn decoder_depth(&self) -> usize {
        self.image_size.trailing_zeros() as usize
    }

    /// Side of the visual bottleneck, `W / 32`.
    pub fn bottleneck(&self) -> usize {
        self.image_size / 32
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.image_size;
        if !w.is_power_of_two() || w % 32 != 0 {
            return Err(Error::Config(format!(
                "image size {w} must be a power of two divisible by 32"
            )));
        }
        if self.width_div == 0 || 512 % self.width_div != 0 {
            return Err(Error::Config(format!("width divisor {} must divide 512", self.width_div)));
        }
        if self.feature_dim < 8 || self.feature_dim != self.width(512) {
            return Err(Error::Config(format!(
                "feature dim {} must be at least 8 and equal the last visual width {}",
                self.feature_dim,
                self.width(512)
            )));
        }
        if self.fusion_channels == 0 {
            return Err(Error::Config("fusion channels must be positive".into()));
        }
        echo_encoder_shapes(self).map(|_| ())
    }

    pub fn to_kv(&self) -> KvList {
        let mut kv = KvList::new();
        kv.push("net.image_size", self.image_size);
        kv.push("net.feature_dim", self.feature_dim);
        kv.push("net.width_div", self.width_div);
        kv.push("net.fusion_channels", self.fusion_channels);
        kv.push(
            "net.spec_shape",
            format!("{}x{}x{}", self.spec_shape[0], self.spec_shape[1], self.spec_shape[2]),
        );
        kv.push("net.bias", self.bias);
        kv.push("net.skip_connections", self.skip_connections);
        if let Ok(shapes) = echo_encoder_shapes(self) {
            let s: Vec<String> = shapes.iter().map(|[c, h, w]| format!("{c}x{h}x{w}")).collect();
            kv.push("net.echo_encoder_shapes", s.join(","));
        }
        kv
    }

    pub fn from_kv(map: &KvMap) -> Result<Self> {
        let spec: String = map.require("net.spec_shape")?;
        let dims: Vec<usize> = spec
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Config(format!("bad spec shape {spec:?}"))))
            .collect::<Result<_>>()?;
        if dims.len() != 3 {
            return Err(Error::Config(format!("bad spec shape {spec:?}")));
        }
        // informational only
        let _ = map.raw("net.echo_encoder_shapes");
        let cfg = NetConfig {
            image_size: map.require("net.image_size")?,
            feature_dim: map.require("net.feature_dim")?,
            width_div: map.require("net.width_div")?,
            fusion_channels: map.require("net.fusion_channels")?,
            spec_shape: [dims[0], dims[1], dims[2]],
            bias: map.require("net.bias")?,
            skip_connections: map.require("net.skip_connections")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

const ECHO_WIDTHS: [usize; 3] = [32, 64, 8];
const ECHO_KERNELS: [usize; 3] = [8, 4, 3];
const ECHO_STRIDES: [usize; 3] = [4, 2, 1];

fn conv_out(len: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (len + 2 * p).checked_sub(k).map(|v| v / s + 1)
}

/// `[channels, height, width]` after each echo-encoder convolution.
pub fn echo_encoder_shapes(cfg: &NetConfig) -> Result<Vec<[usize; 3]>> {
    let [c, mut h, mut w] = cfg.spec_shape;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("empty spectrogram shape {:?}", cfg.spec_shape)));
    }
    let mut out = Vec::new();
    for i in 0..3 {
        let (k, s) = (ECHO_KERNELS[i], ECHO_STRIDES[i]);
        let p = k / 2;
        match (conv_out(h, k, s, p), conv_out(w, k, s, p)) {
            (Some(nh), Some(nw)) if nh >= 1 && nw >= 1 => {
                h = nh;
                w = nw;
            }
            _ => {
                return Err(Error::Config(format!(
                    "echo encoder collapses spectrogram {:?} below 1x1 at layer {i}",
                    cfg.spec_shape
                )))
            }
        }
        out.push([cfg.width(ECHO_WIDTHS[i]), h, w]);
    }
    Ok(out)
}

/// Spectrogram to feature vector `[B, N]`.
#[derive(Debug, Clone)]
pub struct EchoEncoder {
    pub blocks: Vec<ConvBlock>,
    pub project: Conv2d,
}

impl EchoEncoder {
    pub fn new(b: &mut Builder, cfg: &NetConfig) -> Result<Self> {
        echo_encoder_shapes(cfg)?;
        let mut b = b.scope("echo_encoder");
        let mut cin = cfg.spec_shape[0];
        let mut blocks = Vec::new();
        for i in 0..3 {
            let cout = cfg.width(ECHO_WIDTHS[i]);
            let k = ECHO_KERNELS[i];
            blocks.push(ConvBlock {
                conv: ConvKind::Down(Conv2d::new(&mut b, &format!("conv{i}"), cin, cout, k, ECHO_STRIDES[i], k / 2, cfg.bias)),
                norm: Some(BatchNorm2d::new(&mut b, &format!("bn{i}"), cout, cfg.bias)),
                act: Some(Activation::Relu),
            });
            cin = cout;
        }
        let project = Conv2d::new(&mut b, "project", cin, cfg.feature_dim, 1, 1, 0, cfg.bias);
        Ok(EchoEncoder { blocks, project })
    }

    pub fn forward(&self, ctx: &mut Ctx, spec: Var) -> Result<Var> {
        let mut x = spec;
        for blk in &self.blocks {
            x = blk.forward(ctx, x)?;
        }
        let x = self.project.forward(ctx, x)?;
        Ok(ctx.g.global_avg_pool(x)?)
    }
}

/// Widths of an upsampling stack of `stages` stages: `512, 256, ...` scaled, ending in 1.
pub fn up_widths(cfg: &NetConfig, stages: usize) -> Vec<usize> {
    (0..stages)
        .map(|i| if i + 1 == stages { 1 } else { cfg.width(512 >> i.min(9)) })
        .collect()
}

/// Stride-2 transposed-convolution stack (k=4, s=2, p=1), batch norm + ReLU
/// between stages and a chosen activation after the last.
#[derive(Debug, Clone)]
pub struct UpStack {
    pub stages: Vec<ConvBlock>,
}

impl UpStack {
    pub fn new(b: &mut Builder, name: &str, cfg: &NetConfig, cin: usize, stages: usize, last: Activation) -> Self {
        let mut b = b.scope(name);
        let widths = up_widths(cfg, stages);
        let mut cin = cin;
        let mut out = Vec::with_capacity(stages);
        for (i, &cout) in widths.iter().enumerate() {
            let is_last = i + 1 == stages;
            out.push(ConvBlock {
                conv: ConvKind::Up(ConvTranspose2d::new(&mut b, &format!("up{i}"), cin, cout, 4, 2, 1, cfg.bias)),
                norm: (!is_last).then(|| BatchNorm2d::new(&mut b, &format!("bn{i}"), cout, cfg.bias)),
                act: Some(if is_last { last } else { Activation::Relu }),
            });
            cin = cout;
        }
        UpStack { stages: out }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut x = x;
        for s in &self.stages {
            x = s.forward(ctx, x)?;
        }
        Ok(x)
    }
}

/// Feature vector to depth map: reshape to `N×1×1`, then `log2(W)` upsampling stages.
#[derive(Debug, Clone)]
pub struct EchoDecoder {
    pub stack: UpStack,
    feature_dim: usize,
}

impl EchoDecoder {
    pub fn new(b: &mut Builder, cfg: &NetConfig) -> Self {
        EchoDecoder {
            stack: UpStack::new(b, "echo_decoder", cfg, cfg.feature_dim, cfg.decoder_depth(), Activation::Relu),
            feature_dim: cfg.feature_dim,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, fe: Var) -> Result<Var> {
        let batch = ctx.g.shape(fe)[0];
        let x = ctx.g.reshape(fe, &[batch, self.feature_dim, 1, 1])?;
        self.stack.forward(ctx, x)
    }
}

const VISUAL_WIDTHS: [usize; 5] = [64, 128, 256, 512, 512];
const VISUAL_UP_WIDTHS: [usize; 4] = [512, 256, 128, 64];

/// Image U-Net producing a depth map and its bottleneck feature map.
#[derive(Debug, Clone)]
pub struct VisualNet {
    pub down: Vec<ConvBlock>,
    pub up: Vec<ConvBlock>,
    pub skip_connections: bool,
}

pub struct VisualOutput {
    pub depth: Var,
    /// Last encoder stage output, `[B, N, W/32, W/32]`.
    pub features: Var,
}

impl VisualNet {
    pub fn new(b: &mut Builder, cfg: &NetConfig) -> Self {
        let mut b = b.scope("visual");
        let mut down = Vec::new();
        let mut cin = 3;
        for (i, &w) in VISUAL_WIDTHS.iter().enumerate() {
            let cout = cfg.width(w);
            down.push(ConvBlock {
                conv: ConvKind::Down(Conv2d::new(&mut b, &format!("down{i}"), cin, cout, 4, 2, 1, cfg.bias)),
                norm: Some(BatchNorm2d::new(&mut b, &format!("down_bn{i}"), cout, cfg.bias)),
                act: Some(Activation::LeakyRelu(LEAKY_SLOPE)),
            });
            cin = cout;
        }
        let mut up = Vec::new();
        for i in 0..5 {
            let cout = if i < 4 { cfg.width(VISUAL_UP_WIDTHS[i]) } else { 1 };
            let skip = if i == 0 { 0 } else { cfg.width(VISUAL_WIDTHS[4 - i]) };
            let is_last = i == 4;
            up.push(ConvBlock {
                conv: ConvKind::Up(ConvTranspose2d::new(&mut b, &format!("up{i}"), cin + skip, cout, 4, 2, 1, cfg.bias)),
                norm: (!is_last).then(|| BatchNorm2d::new(&mut b, &format!("up_bn{i}"), cout, cfg.bias)),
                act: Some(Activation::Relu),
            });
            cin = cout;
        }
        VisualNet {
            down,
            up,
            skip_connections: cfg.skip_connections,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, img: Var) -> Result<VisualOutput> {
        let mut skips = Vec::with_capacity(5);
        let mut x = img;
        for blk in &self.down {
            x = blk.forward(ctx, x)?;
            skips.push(x);
        }
        let features = x;
        for (i, blk) in self.up.iter().enumerate() {
            if i > 0 {
                let s = skips[4 - i];
                let s = if self.skip_connections {
                    s
                } else {
                    let zeros = echodepth_tensor::Tensor::zeros(ctx.g.shape(s));
                    ctx.g.input(zeros)
                };
                x = ctx.g.concat(&[x, s])?;
            }
            x = blk.forward(ctx, x)?;
        }
        Ok(VisualOutput { depth: x, features })
    }
}

#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub bn1: BatchNorm2d,
    pub conv2: Conv2d,
    pub bn2: BatchNorm2d,
    pub shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl ResidualBlock {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, stride: usize, bias: bool) -> Self {
        let mut b = b.scope(name);
        let shortcut = (cin != cout || stride != 1).then(|| {
            (
                Conv2d::new(&mut b, "shortcut", cin, cout, 1, stride, 0, bias),
                BatchNorm2d::new(&mut b, "shortcut_bn", cout, bias),
            )
        });
        ResidualBlock {
            conv1: Conv2d::new(&mut b, "conv1", cin, cout, 3, stride, 1, bias),
            bn1: BatchNorm2d::new(&mut b, "bn1", cout, bias),
            conv2: Conv2d::new(&mut b, "conv2", cout, cout, 3, 1, 1, bias),
            bn2: BatchNorm2d::new(&mut b, "bn2", cout, bias),
            shortcut,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let y = self.conv1.forward(ctx, x)?;
        let y = self.bn1.forward(ctx, y)?;
        let y = ctx.g.relu(y);
        let y = self.conv2.forward(ctx, y)?;
        let y = self.bn2.forward(ctx, y)?;
        let s = match &self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let sum = ctx.g.add(y, s)?;
        Ok(ctx.g.relu(sum))
    }
}

const MATERIAL_WIDTHS: [usize; 4] = [64, 128, 256, 512];
const MATERIAL_STRIDES: [usize; 4] = [1, 2, 2, 2];

/// Residual image encoder whose output is pooled onto the visual bottleneck grid.
#[derive(Debug, Clone)]
pub struct MaterialNet {
    pub stem: ConvBlock,
    pub blocks: Vec<ResidualBlock>,
    pub project: Option<Conv2d>,
}

impl MaterialNet {
    pub fn new(b: &mut Builder, cfg: &NetConfig) -> Self {
        let mut b = b.scope("material");
        let stem_w = cfg.width(64);
        let stem = ConvBlock {
            conv: ConvKind::Down(Conv2d::new(&mut b, "stem", 3, stem_w, 7, 2, 3, cfg.bias)),
            norm: Some(BatchNorm2d::new(&mut b, "stem_bn", stem_w, cfg.bias)),
            act: Some(Activation::Relu),
        };
        let mut cin = stem_w;
        let mut blocks = Vec::new();
        for (i, (&w, &s)) in MATERIAL_WIDTHS.iter().zip(&MATERIAL_STRIDES).enumerate() {
            let cout = cfg.width(w);
            blocks.push(ResidualBlock::new(&mut b, &format!("block{i}"), cin, cout, s, cfg.bias));
            cin = cout;
        }
        let project = (cin != cfg.feature_dim).then(|| Conv2d::new(&mut b, "project", cin, cfg.feature_dim, 1, 1, 0, cfg.bias));
        MaterialNet { stem, blocks, project }
    }

    /// Material feature map `[B, N, h, w]` pooled to `target`.
    pub fn forward(&self, ctx: &mut Ctx, img: Var, target: (usize, usize)) -> Result<Var> {
        let mut x = self.stem.forward(ctx, img)?;
        for blk in &self.blocks {
            x = blk.forward(ctx, x)?;
        }
        let mut x = ctx.g.adaptive_avg_pool2d(x, target)?;
        if let Some(p) = &self.project {
            x = p.forward(ctx, x)?;
        }
        Ok(x)
    }
}
