use echodepth_tensor::{Activation, Tensor, Var};

use crate::error::Result;
use crate::params::{Builder, Ctx, ParamId};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        let mut s = b.scope(name);
        let fan_in = cin * kernel * kernel;
        let weight = s.weight("weight", &[cout, cin, kernel, kernel], fan_in);
        let bias = bias.then(|| s.weight("bias", &[cout], fan_in));
        Conv2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        Ok(ctx
            .g
            .conv2d(x, w, b, (self.stride, self.stride), (self.padding, self.padding))?)
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    /// Weight layout `[cin, cout, k, k]`; fan-in is taken as `cin·k·k`.
    pub fn new(b: &mut Builder, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        let mut s = b.scope(name);
        let fan_in = cin * kernel * kernel;
        let weight = s.weight("weight", &[cin, cout, kernel, kernel], fan_in);
        let bias = bias.then(|| s.weight("bias", &[cout], fan_in));
        ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = ctx.p(self.weight);
        let b = self.bias.map(|b| ctx.p(b));
        Ok(ctx
            .g
            .conv_transpose2d(x, w, b, (self.stride, self.stride), (self.padding, self.padding))?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: Option<ParamId>,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new(b: &mut Builder, name: &str, channels: usize, bias: bool) -> Self {
        let mut s = b.scope(name);
        BatchNorm2d {
            gamma: s.constant("gamma", Tensor::ones(&[channels])),
            beta: bias.then(|| s.constant("beta", Tensor::zeros(&[channels]))),
            running_mean: s.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: s.buffer("running_var", Tensor::ones(&[channels])),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        ctx.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var)
    }
}

/// Convolution (or transposed convolution), optional batch norm, optional activation.
#[derive(Debug, Clone)]
pub enum ConvKind {
    Down(Conv2d),
    Up(ConvTranspose2d),
}

#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: ConvKind,
    pub norm: Option<BatchNorm2d>,
    pub act: Option<Activation>,
}

impl ConvBlock {
    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let mut y = match &self.conv {
            ConvKind::Down(c) => c.forward(ctx, x)?,
            ConvKind::Up(c) => c.forward(ctx, x)?,
        };
        if let Some(n) = &self.norm {
            y = n.forward(ctx, y)?;
        }
        if let Some(a) = self.act {
            y = ctx.g.activation(y, a);
        }
        Ok(y)
    }
}
