use super::conv::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Ln(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    AbsMean(Var, Var),
    ConcatChannels(Vec<Var>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-channel batch mean and biased variance from a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// Exponential moving averages used by eval-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Element> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::full(&[channels], T::one()),
        }
    }

    /// `running = momentum·running + (1-momentum)·batch`, with unbiased batch variance.
    pub fn update(&mut self, stats: &BatchStats<T>, momentum: f64) {
        let m = T::from_f64(momentum);
        let one_minus = T::from_f64(1.0 - momentum);
        let unbias = T::from_f64(stats.count as f64 / (stats.count as f64 - 1.0));
        for (r, &b) in self.mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = m * *r + one_minus * b;
        }
        for (r, &b) in self.var.data_mut().iter_mut().zip(&stats.var) {
            *r = m * *r + one_minus * b * unbias;
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var`, or zeros shaped like `like` when nothing reached it.
    pub fn get_or_zeros(&self, var: Var, like: &Tensor<T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

/// Wengert list of a single forward computation.
///
/// Node indices are a topological order, so backward is a reverse sweep that
/// visits each node once and sums contributions across fan-out.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn ensure_same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.clone();
        self.constant(value)
    }

    fn map_unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let src = &self.nodes[a.0].value;
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    fn zip_binary(&mut self, a: Var, b: Var, op: Op<T>, what: &str, f: impl Fn(T, T) -> T) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        ensure_same_shape(va, vb, what)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// `scale·a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        self.map_unary(a, Op::Affine(a, s), |v| s * v + t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Relu(a), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        self.map_unary(a, Op::LeakyRelu(a, s), |v| if v > T::zero() { v } else { s * v })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Tanh(a), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Sigmoid(a), |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.map_unary(a, Op::Ln(a), |v| v.ln())
    }

    /// Clamps to `[lo, hi]`; gradient passes only where the input was inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (l, h) = (T::from_f64(lo), T::from_f64(hi));
        self.map_unary(a, Op::Clamp(a, l, h), |v| v.max(l).min(h))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].value;
        let s = src.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let m = s / T::from_f64(src.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// `mean(|a - b|)` over all elements.
    pub fn abs_mean(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        ensure_same_shape(va, vb, "abs_mean")?;
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .fold(T::zero(), |acc, (&x, &y)| acc + (x - y).abs());
        let m = s / T::from_f64(va.numel() as f64);
        Ok(self.push(Tensor::scalar(m), Op::AbsMean(a, b), &[a, b]))
    }

    /// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self
            .nodes
            .get(parts.first().map(|v| v.0).unwrap_or(usize::MAX))
            .ok_or_else(|| Error::ShapeMismatch("concat of zero tensors".into()))?;
        let (n, _, h, w) = first.value.dims4()?;
        let mut channels = 0;
        for p in parts {
            let (pn, pc, ph, pw) = self.nodes[p.0].value.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "concat of [{n},_,{h},{w}] with [{pn},{pc},{ph},{pw}]"
                )));
            }
            channels += pc;
        }
        let mut data = Vec::with_capacity(n * channels * h * w);
        for i in 0..n {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let per = v.numel() / n;
                data.extend_from_slice(&v.data()[i * per..(i + 1) * per]);
            }
        }
        let value = Tensor::new(vec![n, channels, h, w], data)?;
        Ok(self.push(value, Op::ConcatChannels(parts.to_vec()), parts))
    }

    fn check_conv_params(&self, weight: Var, bias: Option<Var>, filters: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.nodes[b.0].value.shape() != [filters] {
                return Err(Error::ShapeMismatch(format!(
                    "bias {:?} for {} filters",
                    self.nodes[b.0].value.shape(),
                    filters
                )));
            }
        }
        let _ = weight;
        Ok(())
    }

    /// Cross-correlation of `[N,C,H,W]` with `[F,C,k,k]` plus optional `[F]` bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        let dims = x.dims4()?;
        let (f, c, kh, kw) = wt.dims4()?;
        if c != dims.1 || kh != kw {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input {:?} with weight {:?}",
                x.shape(),
                wt.shape()
            )));
        }
        self.check_conv_params(weight, bias, f)?;
        let geom = ConvGeom::new(dims, f, kh, stride, pad)?;
        let out = conv::conv_forward(
            &geom,
            x.data(),
            wt.data(),
            bias.map(|b| self.nodes[b.0].value.data()),
        );
        let value = Tensor::new(vec![geom.batch, f, geom.out_height, geom.out_width], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            &parents,
        ))
    }

    /// Transposed convolution of `[N,C_in,H,W]` with `[C_in,C_out,k,k]`.
    ///
    /// Output side is `(H-1)·stride - 2·pad + k`; the forward pass equals the
    /// input gradient of the matching [`Tape::conv2d`].
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let x = &self.nodes[input.0].value;
        let wt = &self.nodes[weight.0].value;
        let (n, c_in, h, w) = x.dims4()?;
        let (wc_in, c_out, kh, kw) = wt.dims4()?;
        if wc_in != c_in || kh != kw {
            return Err(Error::ShapeMismatch(format!(
                "conv_transpose2d input {:?} with weight {:?}",
                x.shape(),
                wt.shape()
            )));
        }
        self.check_conv_params(weight, bias, c_out)?;
        let geom = conv::transpose_geometry((n, c_in, h, w), c_out, kh, stride, pad)?;
        let out = conv::conv_transpose_forward(
            &geom,
            x.data(),
            wt.data(),
            bias.map(|b| self.nodes[b.0].value.data()),
        );
        let value = Tensor::new(vec![n, c_out, geom.height, geom.width], out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            },
            &parents,
        ))
    }

    fn check_affine_params(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.nodes[input.0].value.dims4()?;
        for p in [gamma, beta] {
            if self.nodes[p.0].value.shape() != [c] {
                return Err(Error::ShapeMismatch(format!(
                    "batch-norm affine {:?} for {} channels",
                    self.nodes[p.0].value.shape(),
                    c
                )));
            }
        }
        Ok((n, c, h * w))
    }

    /// Training-mode batch norm: normalizes each channel over `N·H·W` with
    /// batch statistics, then applies `gamma·x̂ + beta`.
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let (n, c, plane) = self.check_affine_params(input, gamma, beta)?;
        let count = n * plane;
        if count < 2 {
            return Err(Error::DegenerateBatch(count));
        }
        let x = self.nodes[input.0].value.data();
        let inv_count = T::from_f64(1.0 / count as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                s = x[off..off + plane].iter().fold(s, |a, &v| a + v);
            }
            let mu = s * inv_count;
            let mut sq = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * plane;
                sq = x[off..off + plane].iter().fold(sq, |a, &v| a + (v - mu) * (v - mu));
            }
            mean[ch] = mu;
            var[ch] = sq * inv_count;
        }
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.nodes[gamma.0].value.data(), self.nodes[beta.0].value.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    let h = (x[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let shape = self.nodes[input.0].value.shape().to_vec();
        let value = Tensor::new(shape, out)?;
        let var_out = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: true,
            },
            &[input, gamma, beta],
        );
        Ok((var_out, BatchStats { mean, var, count }))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(&mut self, input: Var, gamma: Var, beta: Var, running: &RunningStats<T>, eps: f64) -> Result<Var> {
        let (n, c, plane) = self.check_affine_params(input, gamma, beta)?;
        if running.mean.shape() != [c] || running.var.shape() != [c] {
            return Err(Error::ShapeMismatch(format!("running stats for {} channels", c)));
        }
        let x = self.nodes[input.0].value.data();
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = running.var.data().iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = running.mean.data();
        let (g, b) = (self.nodes[gamma.0].value.data(), self.nodes[beta.0].value.data());
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    let h = (x[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = h;
                    out[j] = g[ch] * h + b[ch];
                }
            }
        }
        let shape = self.nodes[input.0].value.shape().to_vec();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: false,
            },
            &[input, gamma, beta],
        ))
    }

    /// Which linear piece every piecewise-linear op is evaluated on: the sign
    /// of relu and leaky relu inputs, the region of clamp inputs and the sign
    /// of `a - b` in `abs_mean`. Two evaluations of one graph with equal
    /// patterns are joined by a segment free of kinks only if the pattern
    /// holds along it, so this is a necessary check, not a proof.
    pub fn kink_pattern(&self) -> Vec<i8> {
        let sign = |v: T| {
            if v > T::zero() {
                1
            } else if v < T::zero() {
                -1
            } else {
                0
            }
        };
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) => {
                    out.extend(self.nodes[a.0].value.data().iter().map(|&v| sign(v)));
                }
                Op::Clamp(a, lo, hi) => out.extend(
                    self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .map(|&v| sign(v - *lo) + sign(v - *hi)),
                ),
                Op::AbsMean(a, b) => out.extend(
                    self.nodes[a.0]
                        .value
                        .data()
                        .iter()
                        .zip(self.nodes[b.0].value.data())
                        .map(|(&x, &y)| sign(x - y)),
                ),
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0].value;
        if root.numel() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar, got shape {:?}",
                root.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, contribution: Vec<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contribution) {
                    *e = *e + c;
                }
            }
            slot @ None => {
                let shape = self.nodes[var.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, contribution).expect("gradient shape"));
            }
        }
    }

    fn unary_grad(&self, grads: &mut [Option<Tensor<T>>], a: Var, g: &Tensor<T>, f: impl Fn(T, T, T) -> T, out: &Tensor<T>) {
        let x = self.nodes[a.0].value.data();
        let contribution = g
            .data()
            .iter()
            .zip(x)
            .zip(out.data())
            .map(|((&gi, &xi), &yi)| f(gi, xi, yi))
            .collect();
        self.accumulate(grads, a, contribution);
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let zero = T::zero();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.data().to_vec());
                self.accumulate(grads, *b, g.data().to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.data().to_vec());
                self.accumulate(grads, *b, g.data().iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let ga = g.data().iter().zip(vb).map(|(&gi, &y)| gi * y).collect();
                let gb = g.data().iter().zip(va).map(|(&gi, &x)| gi * x).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Affine(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.data().iter().map(|&v| v * s).collect());
            }
            Op::Relu(a) => self.unary_grad(grads, *a, g, |gi, x, _| if x > zero { gi } else { zero }, out),
            Op::LeakyRelu(a, s) => {
                let s = *s;
                self.unary_grad(grads, *a, g, |gi, x, _| if x > zero { gi } else { gi * s }, out)
            }
            Op::Tanh(a) => self.unary_grad(grads, *a, g, |gi, _, y| gi * (T::one() - y * y), out),
            Op::Sigmoid(a) => self.unary_grad(grads, *a, g, |gi, _, y| gi * y * (T::one() - y), out),
            Op::Ln(a) => self.unary_grad(grads, *a, g, |gi, x, _| gi / x, out),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                self.unary_grad(grads, *a, g, |gi, x, _| if x >= lo && x <= hi { gi } else { zero }, out)
            }
            Op::Sum(a) => {
                let n = self.nodes[a.0].value.numel();
                self.accumulate(grads, *a, vec![g.item(); n]);
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel();
                let v = g.item() / T::from_f64(n as f64);
                self.accumulate(grads, *a, vec![v; n]);
            }
            Op::AbsMean(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                let scale = g.item() / T::from_f64(va.len() as f64);
                let ga: Vec<T> = va
                    .iter()
                    .zip(vb)
                    .map(|(&x, &y)| {
                        let d = x - y;
                        if d > zero {
                            scale
                        } else if d < zero {
                            -scale
                        } else {
                            zero
                        }
                    })
                    .collect();
                let gb = ga.iter().map(|&v| -v).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::ConcatChannels(parts) => {
                let n = out.shape()[0];
                let per_out = out.numel() / n;
                let mut offset = 0;
                for p in parts {
                    let per = self.nodes[p.0].value.numel() / n;
                    let mut contribution = Vec::with_capacity(per * n);
                    for i in 0..n {
                        let start = i * per_out + offset;
                        contribution.extend_from_slice(&g.data()[start..start + per]);
                    }
                    self.accumulate(grads, *p, contribution);
                    offset += per;
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want = (
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                    bias.is_some_and(|b| self.requires_grad(b)),
                );
                let r = conv::conv_backward(
                    geom,
                    self.nodes[input.0].value.data(),
                    self.nodes[weight.0].value.data(),
                    g.data(),
                    want,
                );
                self.scatter_conv_grads(grads, *input, *weight, *bias, r);
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let want = (
                    self.requires_grad(*input),
                    self.requires_grad(*weight),
                    bias.is_some_and(|b| self.requires_grad(b)),
                );
                let r = conv::conv_transpose_backward(
                    geom,
                    self.nodes[input.0].value.data(),
                    self.nodes[weight.0].value.data(),
                    g.data(),
                    want,
                );
                self.scatter_conv_grads(grads, *input, *weight, *bias, r);
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = out.dims4().expect("4-D batch norm");
                let plane = h * w;
                let count = T::from_f64((n * plane) as f64);
                let dy = g.data();
                let mut d_gamma = vec![zero; c];
                let mut d_beta = vec![zero; c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * plane;
                        for j in off..off + plane {
                            d_beta[ch] = d_beta[ch] + dy[j];
                            d_gamma[ch] = d_gamma[ch] + dy[j] * xhat[j];
                        }
                    }
                }
                if self.requires_grad(*input) {
                    let gam = self.nodes[gamma.0].value.data();
                    let mut dx = vec![zero; dy.len()];
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * plane;
                            let k = gam[ch] * inv_std[ch];
                            for j in off..off + plane {
                                dx[j] = if *batch_stats {
                                    k * (dy[j] - (d_beta[ch] + xhat[j] * d_gamma[ch]) / count)
                                } else {
                                    k * dy[j]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
                self.accumulate(grads, *gamma, d_gamma);
                self.accumulate(grads, *beta, d_beta);
            }
        }
    }

    fn scatter_conv_grads(&self, grads: &mut [Option<Tensor<T>>], input: Var, weight: Var, bias: Option<Var>, r: conv::ConvGrads<T>) {
        if let Some(dx) = r.input {
            self.accumulate(grads, input, dx);
        }
        if let Some(dw) = r.weight {
            self.accumulate(grads, weight, dw);
        }
        if let (Some(b), Some(db)) = (bias, r.bias) {
            self.accumulate(grads, b, db);
        }
    }
}
