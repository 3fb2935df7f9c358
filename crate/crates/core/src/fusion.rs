//! Multimodal fusion of the echo vector with visual and material maps,
//! the per-pixel attention head, and the attention-weighted depth blend.

use echodepth_tensor::{Activation, Tensor, Var};

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::nets::{NetConfig, UpStack};
use crate::params::{Builder, Ctx, ParamId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    Bilinear,
    Dot,
    Concat,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::Concat, FusionKind::Dot, FusionKind::Bilinear];

    pub fn name(self) -> &'static str {
        match self {
            FusionKind::Bilinear => "bilinear",
            FusionKind::Dot => "dot",
            FusionKind::Concat => "concat",
        }
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(FusionKind::Bilinear),
            "dot" => Ok(FusionKind::Dot),
            "concat" => Ok(FusionKind::Concat),
            _ => Err(Error::Config(format!("unknown fusion {s:?} (expected bilinear, dot or concat)"))),
        }
    }
}

/// Weights of the two bilinear branches, `A: [K, N, N]`, `b: [K]`.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub a_img: ParamId,
    pub b_img: ParamId,
    pub a_mat: ParamId,
    pub b_mat: ParamId,
}

impl FusionParams {
    pub fn new(b: &mut Builder, n: usize, k: usize) -> Self {
        let mut b = b.scope("fusion");
        let fan_in = n * n;
        FusionParams {
            a_img: b.weight("a_img", &[k, n, n], fan_in),
            b_img: b.weight("b_img", &[k], fan_in),
            a_mat: b.weight("a_mat", &[k, n, n], fan_in),
            b_mat: b.weight("b_mat", &[k], fan_in),
        }
    }
}

pub struct FusionMap {
    pub f_img: Var,
    pub f_mat: Var,
    /// Channel concatenation of `f_img` and `f_mat`.
    pub f_star: Var,
}

/// `f_img[k](p) = feᵀ A_img[k] fi(:, p) + b_img[k]`, likewise for the material map.
pub fn bilinear_fusion(ctx: &mut Ctx, fe: Var, fi: Var, fm: Var, params: &FusionParams) -> Result<FusionMap> {
    let (a_img, b_img) = (ctx.p(params.a_img), ctx.p(params.b_img));
    let (a_mat, b_mat) = (ctx.p(params.a_mat), ctx.p(params.b_mat));
    let f_img = ctx.g.bilinear_map(fe, a_img, fi, Some(b_img))?;
    let f_mat = ctx.g.bilinear_map(fe, a_mat, fm, Some(b_mat))?;
    let f_star = ctx.g.concat(&[f_img, f_mat])?;
    Ok(FusionMap { f_img, f_mat, f_star })
}

/// Per-pixel `dot(fe, fi(:, p))` and `dot(fe, fm(:, p))`, two channels.
pub fn dot_fusion(ctx: &mut Ctx, fe: Var, fi: Var, fm: Var) -> Result<FusionMap> {
    let f_img = ctx.g.channel_dot(fe, fi)?;
    let f_mat = ctx.g.channel_dot(fe, fm)?;
    let f_star = ctx.g.concat(&[f_img, f_mat])?;
    Ok(FusionMap { f_img, f_mat, f_star })
}

/// `fe` broadcast over the grid, concatenated with `fi` and `fm` (3N channels).
pub fn concat_fusion(ctx: &mut Ctx, fe: Var, fi: Var, fm: Var) -> Result<Var> {
    let (h, w) = spatial(ctx, fi)?;
    let fe_map = ctx.g.broadcast_spatial(fe, h, w)?;
    Ok(ctx.g.concat(&[fe_map, fi, fm])?)
}

fn spatial(ctx: &Ctx, x: Var) -> Result<(usize, usize)> {
    match *ctx.g.shape(x) {
        [_, _, h, w] => Ok((h, w)),
        ref s => Err(Error::InvalidArgument(format!("expected a [B, C, H, W] map, got {s:?}"))),
    }
}

/// Upsamples a fused map to a per-pixel weight in `(0, 1)`.
#[derive(Debug, Clone)]
pub struct AttentionNet {
    pub stack: UpStack,
    in_side: usize,
    out_side: usize,
}

impl AttentionNet {
    pub fn new(b: &mut Builder, cfg: &NetConfig, in_channels: usize) -> Result<Self> {
        let in_side = cfg.bottleneck();
        let ratio = cfg.image_size / in_side;
        if !ratio.is_power_of_two() || in_side * ratio != cfg.image_size {
            return Err(Error::Config(format!(
                "attention input side {in_side} does not upsample to {}",
                cfg.image_size
            )));
        }
        let stages = ratio.trailing_zeros() as usize;
        Ok(AttentionNet {
            stack: UpStack::new(b, "attention", cfg, in_channels, stages, Activation::Sigmoid),
            in_side,
            out_side: cfg.image_size,
        })
    }

    pub fn forward(&self, ctx: &mut Ctx, fstar: Var) -> Result<Var> {
        let (h, w) = spatial(ctx, fstar)?;
        if h != self.in_side || w != self.in_side {
            return Err(Error::Config(format!(
                "attention expects a {0}x{0} map, got {h}x{w}",
                self.in_side
            )));
        }
        let alpha = self.stack.forward(ctx, fstar)?;
        debug_assert_eq!(ctx.g.shape(alpha)[2], self.out_side);
        Ok(alpha)
    }
}

/// Fusion front-end for one variant; dot and concat pass through a 1×1
/// adapter to `2K` channels so the attention head is the same for all.
#[derive(Debug, Clone)]
pub enum Fusion {
    Bilinear(FusionParams),
    Dot(Conv2d),
    Concat(Conv2d),
}

impl Fusion {
    pub fn new(b: &mut Builder, cfg: &NetConfig, kind: FusionKind) -> Self {
        let (n, k) = (cfg.feature_dim, cfg.fusion_channels);
        match kind {
            FusionKind::Bilinear => Fusion::Bilinear(FusionParams::new(b, n, k)),
            FusionKind::Dot => Fusion::Dot(Conv2d::new(&mut b.scope("fusion"), "adapter", 2, 2 * k, 1, 1, 0, true)),
            FusionKind::Concat => Fusion::Concat(Conv2d::new(&mut b.scope("fusion"), "adapter", 3 * n, 2 * k, 1, 1, 0, true)),
        }
    }

    pub fn kind(&self) -> FusionKind {
        match self {
            Fusion::Bilinear(_) => FusionKind::Bilinear,
            Fusion::Dot(_) => FusionKind::Dot,
            Fusion::Concat(_) => FusionKind::Concat,
        }
    }

    /// `[B, 2K, h, w]` input for the attention head.
    pub fn forward(&self, ctx: &mut Ctx, fe: Var, fi: Var, fm: Var) -> Result<Var> {
        match self {
            Fusion::Bilinear(p) => Ok(bilinear_fusion(ctx, fe, fi, fm, p)?.f_star),
            Fusion::Dot(adapter) => {
                let m = dot_fusion(ctx, fe, fi, fm)?;
                adapter.forward(ctx, m.f_star)
            }
            Fusion::Concat(adapter) => {
                let m = concat_fusion(ctx, fe, fi, fm)?;
                adapter.forward(ctx, m)
            }
        }
    }
}

/// `α ⊙ D_e + (1 − α) ⊙ D_i`.
pub fn combine_depth(ctx: &mut Ctx, alpha: Var, echo_depth: Var, image_depth: Var) -> Result<Var> {
    Ok(ctx.g.lerp(alpha, echo_depth, image_depth)?)
}

/// Mean of `ln(1 + |D − D̂|)` over valid pixels.
pub fn log_l1_loss(ctx: &mut Ctx, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::NoValidPixels);
    }
    Ok(ctx.g.log_l1_loss(pred, target, mask)?)
}
