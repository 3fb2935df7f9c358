use crate::error::{Result, TensorError};
use crate::kernels::{self, Scratch, Window2d};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

/// Per-channel running statistics maintained by batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormMode {
    pub training: bool,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for BatchNormMode {
    fn default() -> Self {
        BatchNormMode {
            training: true,
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Window2d,
        cout: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Window2d,
        cin: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Act(Var, Activation),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    GlobalAvgPool(Var),
    AdaptiveAvgPool(Var),
    BroadcastSpatial(Var),
    MatVecBilinear {
        fe: Var,
        a: Var,
        v: Var,
    },
    BilinearMap {
        fe: Var,
        a: Var,
        fmap: Var,
        bias: Option<Var>,
        u: Vec<f64>,
    },
    ChannelDot {
        fe: Var,
        fmap: Var,
    },
    Lerp {
        alpha: Var,
        a: Var,
        b: Var,
    },
    LogL1 {
        pred: Var,
        target: Vec<f64>,
        mask: Vec<bool>,
        n_valid: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Taped computation graph. Nodes are appended in evaluation order, so every
/// node's inputs precede it and a reverse sweep is a valid backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape4(op: &'static str, what: &str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::dim(op, format!("{what} rank (expected 4 axes)"), &[4], &[t.ndim()])),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that does not track gradients.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor> {
        self.nodes[v.0].grad.take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::dim(op, "operand shapes", sa, sb));
        }
        Ok(())
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [channels] {
                return Err(TensorError::dim(op, "bias", &[channels], self.shape(b)));
            }
        }
        Ok(())
    }

    /// 2-D cross-correlation over `[B, Cin, H, W]` with weight `[Cout, Cin, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        const OP: &str = "conv2d";
        let [batch, cin, h, wd] = shape4(OP, "input", self.value(x))?;
        let [cout, wcin, kh, kw] = shape4(OP, "weight", self.value(w))?;
        if wcin != cin {
            return Err(TensorError::dim(OP, "input channels (axis 1)", &[wcin], &[cin]));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::invalid(OP, "stride must be at least 1"));
        }
        if h + 2 * padding.0 < kh || wd + 2 * padding.1 < kw {
            return Err(TensorError::dim(
                OP,
                "kernel vs padded input (axes 2,3)",
                &[kh, kw],
                &[h + 2 * padding.0, wd + 2 * padding.1],
            ));
        }
        self.check_bias(OP, b, cout)?;
        let geom = Window2d {
            channels: cin,
            height: h,
            width: wd,
            kernel: (kh, kw),
            stride,
            padding,
        };
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let (rows, l) = (geom.col_rows(), geom.col_cols());
        let mut out = vec![0.0; batch * cout * l];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let per = batch_chunk(batch, rows * l);
            let mut cols = Scratch::take(rows * per * l);
            let mut prod = Scratch::take(cout * per * l);
            for (start, nb) in chunk_ranges(batch, per) {
                let ld = nb * l;
                for i in 0..nb {
                    im2col(xv, start + i, &geom, &mut cols[i * l..], ld);
                }
                kernels::gemm(cout, rows, ld, wv, false, &cols, false, &mut prod, false);
                let ob = &mut out[start * cout * l..(start + nb) * cout * l];
                kernels::channels_to_batch_add(&prod, nb, cout, l, ob);
            }
            if let Some(b) = b {
                for ob in out.chunks_mut(cout * l) {
                    add_channel_bias(ob, self.value(b).data(), l);
                }
            }
        }
        let value = Tensor::new(&[batch, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, geom, cout }, &inputs))
    }

    /// Fractionally strided convolution; weight is `[Cin, Cout, kh, kw]` and
    /// the output side is `(H-1)·stride - 2·pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        let [batch, cin, h, wd] = shape4(OP, "input", self.value(x))?;
        let [wcin, cout, kh, kw] = shape4(OP, "weight", self.value(w))?;
        if wcin != cin {
            return Err(TensorError::dim(OP, "input channels (axis 1)", &[wcin], &[cin]));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(TensorError::invalid(OP, "stride must be at least 1"));
        }
        let full_h = (h - 1) * stride.0 + kh;
        let full_w = (wd - 1) * stride.1 + kw;
        if full_h <= 2 * padding.0 || full_w <= 2 * padding.1 {
            return Err(TensorError::dim(OP, "output extent (axes 2,3)", &[2 * padding.0 + 1, 2 * padding.1 + 1], &[full_h, full_w]));
        }
        self.check_bias(OP, b, cout)?;
        let (ho, wo) = (full_h - 2 * padding.0, full_w - 2 * padding.1);
        let geom = Window2d {
            channels: cout,
            height: ho,
            width: wo,
            kernel: (kh, kw),
            stride,
            padding,
        };
        debug_assert_eq!(geom.col_cols(), h * wd);
        let (rows, l) = (geom.col_rows(), h * wd);
        let plane = cout * ho * wo;
        let mut out = vec![0.0; batch * plane];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let per = batch_chunk(batch, rows * l);
            let mut cols = Scratch::take(rows * per * l);
            let mut xcat = Scratch::take(cin * per * l);
            for (start, nb) in chunk_ranges(batch, per) {
                let ld = nb * l;
                kernels::batch_to_channels_into(&xv[start * cin * l..(start + nb) * cin * l], nb, cin, l, &mut xcat);
                kernels::gemm(rows, cin, ld, wv, true, &xcat, false, &mut cols, false);
                for i in 0..nb {
                    let ob = &mut out[(start + i) * plane..(start + i + 1) * plane];
                    kernels::col2im(&cols[i * l..], &geom, ob, ld);
                }
            }
            if let Some(b) = b {
                for ob in out.chunks_mut(plane) {
                    add_channel_bias(ob, self.value(b).data(), ho * wo);
                }
            }
        }
        let value = Tensor::new(&[batch, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, geom, cin }, &inputs))
    }

    /// Per-channel normalization of `[B, C, H, W]`. Training mode uses batch
    /// statistics and updates `stats`; evaluation mode reads `stats`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: &mut RunningStats, mode: BatchNormMode) -> Result<Var> {
        const OP: &str = "batch_norm";
        let [batch, c, h, w] = shape4(OP, "input", self.value(x))?;
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(TensorError::dim(OP, what, &[c], self.shape(v)));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(TensorError::dim(OP, "running stats", &[c], &[stats.mean.len()]));
        }
        let hw = h * w;
        let n = (batch * hw) as f64;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if mode.training {
                let mut sum = 0.0;
                for bi in 0..batch {
                    let s = (bi * c + ch) * hw;
                    sum += xv[s..s + hw].iter().sum::<f64>();
                }
                let mean = sum / n;
                let mut sq = 0.0;
                for bi in 0..batch {
                    let s = (bi * c + ch) * hw;
                    sq += xv[s..s + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                }
                let var = sq / n;
                let unbiased = if n > 1.0 { sq / (n - 1.0) } else { var };
                stats.mean[ch] = (1.0 - mode.momentum) * stats.mean[ch] + mode.momentum * mean;
                stats.var[ch] = (1.0 - mode.momentum) * stats.var[ch] + mode.momentum * unbiased;
                (mean, var)
            } else {
                (stats.mean[ch], stats.var[ch])
            };
            let is = 1.0 / (var + mode.eps).sqrt();
            inv_std[ch] = is;
            for bi in 0..batch {
                let s = (bi * c + ch) * hw;
                for i in s..s + hw {
                    let xh = (xv[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let value = Tensor::new(&[batch, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training: mode.training,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = match kind {
            Activation::Relu => self.value(x).map(|v| v.max(0.0)),
            Activation::LeakyRelu(slope) => self.value(x).map(|v| if v > 0.0 { v } else { slope * v }),
            Activation::Sigmoid => self.value(x).map(kernels::sigmoid),
        };
        self.push(value, Op::Act(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| c * v);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Concatenates tensors along axis 1; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        let first = *parts.first().ok_or_else(|| TensorError::invalid(OP, "nothing to concatenate"))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(TensorError::dim(OP, "rank (need at least 2 axes)", &[2], &[base.len()]));
        }
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s[0] != base[0] || s[2..] != base[2..] {
                return Err(TensorError::dim(OP, "non-channel axes", &base, s));
            }
            channels += s[1];
        }
        let batch = base[0];
        let inner: usize = base[2..].iter().product();
        let mut data = Vec::with_capacity(batch * channels * inner);
        for bi in 0..batch {
            for &p in parts {
                data.extend_from_slice(self.value(p).batch_slice(bi));
            }
        }
        let mut shape = base.clone();
        shape[1] = channels;
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `[B, C, H, W] -> [B, C]` by spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [batch, c, h, w] = shape4("global_avg_pool", "input", self.value(x))?;
        let hw = h * w;
        let xv = self.value(x).data();
        let data = (0..batch * c).map(|i| xv[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64).collect();
        let value = Tensor::new(&[batch, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Average pooling onto a fixed `(oh, ow)` grid with bins `[floor(i·H/oh), ceil((i+1)·H/oh))`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out: (usize, usize)) -> Result<Var> {
        const OP: &str = "adaptive_avg_pool2d";
        let [batch, c, h, w] = shape4(OP, "input", self.value(x))?;
        if out.0 == 0 || out.1 == 0 || out.0 > h || out.1 > w {
            return Err(TensorError::dim(OP, "target grid", &[h, w], &[out.0, out.1]));
        }
        let xv = self.value(x).data();
        let mut data = vec![0.0; batch * c * out.0 * out.1];
        for plane in 0..batch * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            for oy in 0..out.0 {
                let (y0, y1) = kernels::adaptive_bin(oy, out.0, h);
                for ox in 0..out.1 {
                    let (x0, x1) = kernels::adaptive_bin(ox, out.1, w);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += src[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    data[(plane * out.0 + oy) * out.1 + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let value = Tensor::new(&[batch, c, out.0, out.1], data)?;
        Ok(self.push(value, Op::AdaptiveAvgPool(x), &[x]))
    }

    /// `[B, C] -> [B, C, h, w]` by spatial replication.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(TensorError::dim("broadcast_spatial", "rank (expected 2 axes)", &[2], &[s.len()]));
        }
        let (batch, c) = (s[0], s[1]);
        let mut data = Vec::with_capacity(batch * c * h * w);
        for &v in self.value(x).data() {
            data.extend(std::iter::repeat_n(v, h * w));
        }
        let value = Tensor::new(&[batch, c, h, w], data)?;
        Ok(self.push(value, Op::BroadcastSpatial(x), &[x]))
    }

    /// Scalar bilinear form `feᵀ·A·v`.
    pub fn matvec_bilinear(&mut self, fe: Var, a: Var, v: Var) -> Result<Var> {
        const OP: &str = "matvec_bilinear";
        let (sf, sa, sv) = (self.shape(fe), self.shape(a), self.shape(v));
        if sf.len() != 1 || sv.len() != 1 {
            return Err(TensorError::dim(OP, "vector rank", &[1, 1], &[sf.len(), sv.len()]));
        }
        if sa != [sf[0], sv[0]] {
            return Err(TensorError::dim(OP, "matrix", &[sf[0], sv[0]], sa));
        }
        let (n, m) = (sf[0], sv[0]);
        let (fv, av, vv) = (self.value(fe).data(), self.value(a).data(), self.value(v).data());
        let mut total = 0.0;
        for i in 0..n {
            let row: f64 = (0..m).map(|j| av[i * m + j] * vv[j]).sum();
            total += fv[i] * row;
        }
        Ok(self.push(Tensor::scalar(total), Op::MatVecBilinear { fe, a, v }, &[fe, a, v]))
    }

    /// Per-pixel bilinear map: `out[b,k,p] = fe[b]ᵀ · A[k] · fmap[b,:,p] + bias[k]`.
    ///
    /// `fe: [B, N]`, `a: [K, N, M]`, `fmap: [B, M, h, w]`, `bias: [K]`.
    pub fn bilinear_map(&mut self, fe: Var, a: Var, fmap: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "bilinear_map";
        let [batch, m, h, w] = shape4(OP, "feature map", self.value(fmap))?;
        let sf = self.shape(fe).to_vec();
        if sf.len() != 2 || sf[0] != batch {
            return Err(TensorError::dim(OP, "vector feature [B, N]", &[batch, 0], &sf));
        }
        let n = sf[1];
        let sa = self.shape(a).to_vec();
        if sa.len() != 3 || sa[1] != n || sa[2] != m {
            return Err(TensorError::dim(OP, "weight [K, N, M]", &[0, n, m], &sa));
        }
        let k = sa[0];
        self.check_bias(OP, bias, k)?;
        let hw = h * w;
        let fv = self.value(fe).data();
        let av = self.value(a).data();
        let mv = self.value(fmap).data();
        // u[b,k,:] = fe[b]ᵀ A[k]
        let mut u = vec![0.0; batch * k * m];
        for bi in 0..batch {
            for kk in 0..k {
                let ub = &mut u[(bi * k + kk) * m..(bi * k + kk + 1) * m];
                for ni in 0..n {
                    let f = fv[bi * n + ni];
                    let arow = &av[(kk * n + ni) * m..(kk * n + ni + 1) * m];
                    for (uj, aj) in ub.iter_mut().zip(arow) {
                        *uj += f * aj;
                    }
                }
            }
        }
        let mut out = vec![0.0; batch * k * hw];
        for bi in 0..batch {
            let mb = &mv[bi * m * hw..(bi + 1) * m * hw];
            for kk in 0..k {
                let ub = &u[(bi * k + kk) * m..(bi * k + kk + 1) * m];
                let ob = &mut out[(bi * k + kk) * hw..(bi * k + kk + 1) * hw];
                for (p, o) in ob.iter_mut().enumerate() {
                    let mut s = 0.0;
                    for (j, uj) in ub.iter().enumerate() {
                        s += uj * mb[j * hw + p];
                    }
                    *o = s;
                }
                if let Some(bias) = bias {
                    let bk = self.value(bias).data()[kk];
                    ob.iter_mut().for_each(|o| *o += bk);
                }
            }
        }
        let value = Tensor::new(&[batch, k, h, w], out)?;
        let mut inputs = vec![fe, a, fmap];
        inputs.extend(bias);
        Ok(self.push(value, Op::BilinearMap { fe, a, fmap, bias, u }, &inputs))
    }

    /// Per-pixel inner product `out[b,0,p] = Σ_j fe[b,j]·fmap[b,j,p]`.
    pub fn channel_dot(&mut self, fe: Var, fmap: Var) -> Result<Var> {
        const OP: &str = "channel_dot";
        let [batch, m, h, w] = shape4(OP, "feature map", self.value(fmap))?;
        if self.shape(fe) != [batch, m] {
            return Err(TensorError::dim(OP, "vector feature [B, N]", &[batch, m], self.shape(fe)));
        }
        let hw = h * w;
        let fv = self.value(fe).data();
        let mv = self.value(fmap).data();
        let mut out = vec![0.0; batch * hw];
        for bi in 0..batch {
            for p in 0..hw {
                let mut s = 0.0;
                for j in 0..m {
                    s += fv[bi * m + j] * mv[(bi * m + j) * hw + p];
                }
                out[bi * hw + p] = s;
            }
        }
        let value = Tensor::new(&[batch, 1, h, w], out)?;
        Ok(self.push(value, Op::ChannelDot { fe, fmap }, &[fe, fmap]))
    }

    /// Pointwise `alpha·a + (1 - alpha)·b`.
    pub fn lerp(&mut self, alpha: Var, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("lerp", alpha, a)?;
        self.check_same_shape("lerp", alpha, b)?;
        let (al, av, bv) = (self.value(alpha).data(), self.value(a).data(), self.value(b).data());
        let data = (0..al.len()).map(|i| al[i] * av[i] + (1.0 - al[i]) * bv[i]).collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, Op::Lerp { alpha, a, b }, &[alpha, a, b]))
    }

    /// Mean of `ln(1 + |target - pred|)` over positions where `mask` is set.
    /// Masked-out positions contribute neither value nor gradient.
    pub fn log_l1_loss(&mut self, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
        const OP: &str = "log_l1_loss";
        if self.shape(pred) != target.shape() {
            return Err(TensorError::dim(OP, "target", self.shape(pred), target.shape()));
        }
        if mask.len() != target.numel() {
            return Err(TensorError::dim(OP, "mask length", &[target.numel()], &[mask.len()]));
        }
        let n_valid = mask.iter().filter(|&&m| m).count();
        if n_valid == 0 {
            return Err(TensorError::NoValidElements { op: OP });
        }
        let pv = self.value(pred).data();
        let mut total = 0.0;
        for i in 0..pv.len() {
            if mask[i] {
                total += (target.data()[i] - pv[i]).abs().ln_1p();
            }
        }
        let value = Tensor::scalar(total / n_valid as f64);
        Ok(self.push(
            value,
            Op::LogL1 {
                pred,
                target: target.data().to_vec(),
                mask: mask.to_vec(),
                n_valid,
            },
            &[pred],
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(g) => g.data_mut().iter_mut().zip(&gout).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape(), gout)?),
                }
                continue;
            }
            self.backward_node(idx, &gout, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cout } => {
                let batch = out_shape[0];
                let (rows, l) = (geom.col_rows(), geom.col_cols());
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let in_plane = geom.channels * geom.height * geom.width;
                let (need_w, need_x) = (self.rg(*w), self.rg(*x));
                let per = batch_chunk(batch, rows * l);
                let mut cols = Scratch::take(rows * per * l);
                let mut gcat = Scratch::take(cout * per * l);
                for (start, nb) in chunk_ranges(batch, per) {
                    let ld = nb * l;
                    kernels::batch_to_channels_into(&gout[start * cout * l..(start + nb) * cout * l], nb, *cout, l, &mut gcat);
                    if need_w {
                        for i in 0..nb {
                            im2col(xv, start + i, geom, &mut cols[i * l..], ld);
                        }
                        let dw = accumulate(grads, *w, cout * rows);
                        kernels::gemm(*cout, ld, rows, &gcat, false, &cols, true, dw, true);
                    }
                    if need_x {
                        kernels::gemm(rows, *cout, ld, wv, true, &gcat, false, &mut cols, false);
                        let dx = accumulate(grads, *x, xv.len());
                        for i in 0..nb {
                            let bi = start + i;
                            kernels::col2im(&cols[i * l..], geom, &mut dx[bi * in_plane..(bi + 1) * in_plane], ld);
                        }
                    }
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let db = channel_sums(gout, batch, *cout, l);
                        add_into(accumulate(grads, *b, *cout), &db);
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, cin } => {
                let batch = out_shape[0];
                let cout = geom.channels;
                let (rows, l) = (geom.col_rows(), geom.col_cols());
                let plane = cout * geom.height * geom.width;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let (need_w, need_x) = (self.rg(*w), self.rg(*x));
                if need_w || need_x {
                    let per = batch_chunk(batch, rows * l);
                    let mut gcols = Scratch::take(rows * per * l);
                    let mut xcat = Scratch::take(cin * per * l);
                    let mut dxcat = Scratch::take(cin * per * l);
                    for (start, nb) in chunk_ranges(batch, per) {
                        let ld = nb * l;
                        for i in 0..nb {
                            let bi = start + i;
                            kernels::im2col(&gout[bi * plane..(bi + 1) * plane], geom, &mut gcols[i * l..], ld);
                        }
                        if need_w {
                            kernels::batch_to_channels_into(&xv[start * cin * l..(start + nb) * cin * l], nb, *cin, l, &mut xcat);
                            let dw = accumulate(grads, *w, cin * rows);
                            kernels::gemm(*cin, ld, rows, &xcat, false, &gcols, true, dw, true);
                        }
                        if need_x {
                            kernels::gemm(*cin, rows, ld, wv, false, &gcols, false, &mut dxcat, false);
                            let dx = accumulate(grads, *x, xv.len());
                            kernels::channels_to_batch_add(&dxcat, nb, *cin, l, &mut dx[start * cin * l..(start + nb) * cin * l]);
                        }
                    }
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let db = channel_sums(gout, batch, cout, geom.height * geom.width);
                        add_into(accumulate(grads, *b, cout), &db);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (batch, c) = (out_shape[0], out_shape[1]);
                let hw = out_shape[2] * out_shape[3];
                let n = (batch * hw) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    for bi in 0..batch {
                        let s = (bi * c + ch) * hw;
                        for i in s..s + hw {
                            dgamma[ch] += gout[i] * xhat[i];
                            dbeta[ch] += gout[i];
                        }
                    }
                }
                if self.rg(*x) {
                    let dx = accumulate(grads, *x, gout.len());
                    for ch in 0..c {
                        let g = gv[ch];
                        let is = inv_std[ch];
                        for bi in 0..batch {
                            let s = (bi * c + ch) * hw;
                            for i in s..s + hw {
                                dx[i] += if *training {
                                    g * is / n * (n * gout[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    g * is * gout[i]
                                };
                            }
                        }
                    }
                }
                if self.rg(*gamma) {
                    add_into(accumulate(grads, *gamma, c), &dgamma);
                }
                if self.rg(*beta) {
                    add_into(accumulate(grads, *beta, c), &dbeta);
                }
            }
            Op::Act(x, kind) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let dx = accumulate(grads, *x, xv.len());
                match kind {
                    Activation::Relu => {
                        for i in 0..xv.len() {
                            if xv[i] > 0.0 {
                                dx[i] += gout[i];
                            }
                        }
                    }
                    Activation::LeakyRelu(slope) => {
                        for i in 0..xv.len() {
                            dx[i] += if xv[i] > 0.0 { gout[i] } else { slope * gout[i] };
                        }
                    }
                    Activation::Sigmoid => {
                        for i in 0..xv.len() {
                            dx[i] += gout[i] * yv[i] * (1.0 - yv[i]);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.rg(v) {
                        add_into(accumulate(grads, v, gout.len()), gout);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(accumulate(grads, *a, gout.len()), gout);
                }
                if self.rg(*b) {
                    let db = accumulate(grads, *b, gout.len());
                    db.iter_mut().zip(gout).for_each(|(d, g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let da = accumulate(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        da[i] += gout[i] * bv[i];
                    }
                }
                if self.rg(*b) {
                    let db = accumulate(grads, *b, gout.len());
                    for i in 0..gout.len() {
                        db[i] += gout[i] * av[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let da = accumulate(grads, *a, gout.len());
                da.iter_mut().zip(gout).for_each(|(d, g)| *d += c * g);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                accumulate(grads, *a, n).iter_mut().for_each(|d| *d += gout[0]);
            }
            Op::Concat(parts) => {
                let batch = out_shape[0];
                let per_out = gout.len() / batch;
                let mut offset = 0;
                for &p in parts {
                    let per = self.value(p).numel() / batch;
                    if self.rg(p) {
                        let dp = accumulate(grads, p, per * batch);
                        for bi in 0..batch {
                            let src = &gout[bi * per_out + offset..bi * per_out + offset + per];
                            add_into(&mut dp[bi * per..(bi + 1) * per], src);
                        }
                    }
                    offset += per;
                }
            }
            Op::Reshape(x) => add_into(accumulate(grads, *x, gout.len()), gout),
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let dx = accumulate(grads, *x, gout.len() * hw);
                for (i, g) in gout.iter().enumerate() {
                    dx[i * hw..(i + 1) * hw].iter_mut().for_each(|d| *d += g / hw as f64);
                }
            }
            Op::AdaptiveAvgPool(x) => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (out_shape[2], out_shape[3]);
                let planes = s[0] * s[1];
                let dx = accumulate(grads, *x, planes * h * w);
                for plane in 0..planes {
                    for oy in 0..oh {
                        let (y0, y1) = kernels::adaptive_bin(oy, oh, h);
                        for ox in 0..ow {
                            let (x0, x1) = kernels::adaptive_bin(ox, ow, w);
                            let g = gout[(plane * oh + oy) * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                for xx in x0..x1 {
                                    dx[(plane * h + y) * w + xx] += g;
                                }
                            }
                        }
                    }
                }
            }
            Op::BroadcastSpatial(x) => {
                let hw = out_shape[2] * out_shape[3];
                let n = gout.len() / hw;
                let dx = accumulate(grads, *x, n);
                for i in 0..n {
                    dx[i] += gout[i * hw..(i + 1) * hw].iter().sum::<f64>();
                }
            }
            Op::MatVecBilinear { fe, a, v } => {
                let g = gout[0];
                let (fv, av, vv) = (self.value(*fe).data(), self.value(*a).data(), self.value(*v).data());
                let (n, m) = (fv.len(), vv.len());
                if self.rg(*fe) {
                    let d = accumulate(grads, *fe, n);
                    for i in 0..n {
                        d[i] += g * (0..m).map(|j| av[i * m + j] * vv[j]).sum::<f64>();
                    }
                }
                if self.rg(*a) {
                    let d = accumulate(grads, *a, n * m);
                    for i in 0..n {
                        for j in 0..m {
                            d[i * m + j] += g * fv[i] * vv[j];
                        }
                    }
                }
                if self.rg(*v) {
                    let d = accumulate(grads, *v, m);
                    for j in 0..m {
                        d[j] += g * (0..n).map(|i| fv[i] * av[i * m + j]).sum::<f64>();
                    }
                }
            }
            Op::BilinearMap { fe, a, fmap, bias, u } => {
                let (batch, k) = (out_shape[0], out_shape[1]);
                let hw = out_shape[2] * out_shape[3];
                let fv = self.value(*fe).data();
                let av = self.value(*a).data();
                let mv = self.value(*fmap).data();
                let n = fv.len() / batch;
                let m = mv.len() / (batch * hw);
                if let Some(bias) = bias {
                    if self.rg(*bias) {
                        let db = channel_sums(gout, batch, k, hw);
                        add_into(accumulate(grads, *bias, k), &db);
                    }
                }
                if self.rg(*fmap) {
                    let dm = accumulate(grads, *fmap, mv.len());
                    for bi in 0..batch {
                        for kk in 0..k {
                            let ub = &u[(bi * k + kk) * m..(bi * k + kk + 1) * m];
                            let gb = &gout[(bi * k + kk) * hw..(bi * k + kk + 1) * hw];
                            for j in 0..m {
                                let d = &mut dm[(bi * m + j) * hw..(bi * m + j + 1) * hw];
                                for p in 0..hw {
                                    d[p] += ub[j] * gb[p];
                                }
                            }
                        }
                    }
                }
                let need_a = self.rg(*a);
                let need_fe = self.rg(*fe);
                if need_a || need_fe {
                    // du[b,k,j] = Σ_p gout[b,k,p]·fmap[b,j,p]
                    let mut du = vec![0.0; batch * k * m];
                    for bi in 0..batch {
                        for kk in 0..k {
                            let gb = &gout[(bi * k + kk) * hw..(bi * k + kk + 1) * hw];
                            for j in 0..m {
                                let mrow = &mv[(bi * m + j) * hw..(bi * m + j + 1) * hw];
                                du[(bi * k + kk) * m + j] = gb.iter().zip(mrow).map(|(g, x)| g * x).sum();
                            }
                        }
                    }
                    if need_a {
                        let da = accumulate(grads, *a, av.len());
                        for bi in 0..batch {
                            for kk in 0..k {
                                let dub = &du[(bi * k + kk) * m..(bi * k + kk + 1) * m];
                                for ni in 0..n {
                                    let f = fv[bi * n + ni];
                                    let row = &mut da[(kk * n + ni) * m..(kk * n + ni + 1) * m];
                                    row.iter_mut().zip(dub).for_each(|(r, d)| *r += f * d);
                                }
                            }
                        }
                    }
                    if need_fe {
                        let df = accumulate(grads, *fe, fv.len());
                        for bi in 0..batch {
                            for kk in 0..k {
                                let dub = &du[(bi * k + kk) * m..(bi * k + kk + 1) * m];
                                for ni in 0..n {
                                    let row = &av[(kk * n + ni) * m..(kk * n + ni + 1) * m];
                                    df[bi * n + ni] += row.iter().zip(dub).map(|(a, d)| a * d).sum::<f64>();
                                }
                            }
                        }
                    }
                }
            }
            Op::ChannelDot { fe, fmap } => {
                let batch = out_shape[0];
                let hw = out_shape[2] * out_shape[3];
                let fv = self.value(*fe).data();
                let mv = self.value(*fmap).data();
                let m = fv.len() / batch;
                if self.rg(*fe) {
                    let df = accumulate(grads, *fe, fv.len());
                    for bi in 0..batch {
                        for j in 0..m {
                            let mrow = &mv[(bi * m + j) * hw..(bi * m + j + 1) * hw];
                            df[bi * m + j] += mrow.iter().zip(&gout[bi * hw..(bi + 1) * hw]).map(|(x, g)| x * g).sum::<f64>();
                        }
                    }
                }
                if self.rg(*fmap) {
                    let dm = accumulate(grads, *fmap, mv.len());
                    for bi in 0..batch {
                        for j in 0..m {
                            let f = fv[bi * m + j];
                            for p in 0..hw {
                                dm[(bi * m + j) * hw + p] += f * gout[bi * hw + p];
                            }
                        }
                    }
                }
            }
            Op::Lerp { alpha, a, b } => {
                let (al, av, bv) = (self.value(*alpha).data(), self.value(*a).data(), self.value(*b).data());
                if self.rg(*alpha) {
                    let d = accumulate(grads, *alpha, gout.len());
                    for i in 0..gout.len() {
                        d[i] += gout[i] * (av[i] - bv[i]);
                    }
                }
                if self.rg(*a) {
                    let d = accumulate(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        d[i] += gout[i] * al[i];
                    }
                }
                if self.rg(*b) {
                    let d = accumulate(grads, *b, gout.len());
                    for i in 0..gout.len() {
                        d[i] += gout[i] * (1.0 - al[i]);
                    }
                }
            }
            Op::LogL1 {
                pred,
                target,
                mask,
                n_valid,
            } => {
                let pv = self.value(*pred).data();
                let scale = gout[0] / *n_valid as f64;
                let d = accumulate(grads, *pred, pv.len());
                for i in 0..pv.len() {
                    if mask[i] {
                        let diff = pv[i] - target[i];
                        let sign = if diff > 0.0 {
                            1.0
                        } else if diff < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d[i] += scale * sign / (1.0 + diff.abs());
                    }
                }
            }
        }
    }
}

fn im2col(x: &[f64], bi: usize, geom: &Window2d, cols: &mut [f64], ld: usize) {
    let plane = geom.channels * geom.height * geom.width;
    kernels::im2col(&x[bi * plane..(bi + 1) * plane], geom, cols, ld);
}

/// Samples per unfolded chunk: as many as fit in a cache-sized column buffer, at least one.
fn batch_chunk(batch: usize, per_sample: usize) -> usize {
    const CHUNK_ELEMS: usize = 1 << 18;
    (CHUNK_ELEMS / per_sample.max(1)).clamp(1, batch.max(1))
}

fn chunk_ranges(batch: usize, per: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..batch).step_by(per).map(move |s| (s, per.min(batch - s)))
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (c, b) in bias.iter().enumerate() {
        out[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(g: &[f64], batch: usize, c: usize, plane: usize) -> Vec<f64> {
    let mut s = vec![0.0; c];
    for bi in 0..batch {
        for (ch, acc) in s.iter_mut().enumerate() {
            let start = (bi * c + ch) * plane;
            *acc += g[start..start + plane].iter().sum::<f64>();
        }
    }
    s
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
