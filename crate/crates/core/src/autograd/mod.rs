//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every builder method evaluates its op eagerly and
//! appends a node. [`Graph::backward`] walks the tape in reverse. Parameters
//! enter through [`Graph::param`]; a parameter requested twice (for example
//! through two aliased names) maps to one node, so its gradient is
//! accumulated once. Only parameters in the graph's trainable set, and
//! nodes depending on them, carry gradients.

pub(crate) mod kernels;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, shape_mismatch, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use kernels::{col2im, gemm, im2col, Window};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// How batch normalization obtains its statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics of the current batch; optionally record running-average updates.
    Batch { update_running: bool },
    /// Frozen running averages supplied by the caller.
    Frozen,
}

/// Running-statistics update recorded during a batch-statistics forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub slot: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: Window,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        g: Window,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        invstd: Vec<f64>,
    },
    ScaleShift {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulMask {
        x: Var,
        mask: Var,
    },
    ScaleSamples {
        x: Var,
        s: Var,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    MeanAbs {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SampleNorms {
        x: Var,
    },
    MeanLog {
        x: Var,
        complement: bool,
        eps: f64,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Constant | Op::Param => Vec::new(),
            Op::Conv2d { x, w, b, .. } | Op::ConvTranspose2d { x, w, b, .. } => {
                let mut v = vec![x, w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::ScaleShift { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
            Op::Linear { x, w, b } => vec![x, w, b],
            Op::Concat { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
                vec![a, b]
            }
            Op::MulMask { x, mask } => vec![x, mask],
            Op::ScaleSamples { x, s } => vec![x, s],
            Op::LeakyRelu { x, .. }
            | Op::Sigmoid { x }
            | Op::Affine { x, .. }
            | Op::MeanAbs { x }
            | Op::Mean { x }
            | Op::SampleNorms { x }
            | Op::MeanLog { x, .. }
            | Op::GlobalAvgPool { x } => vec![x],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    trainable: BTreeSet<ParamId>,
    bn_mode: BnMode,
    bn_updates: Vec<BnUpdate>,
    encoder_passes: usize,
}

/// Gradients of one scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::exp(-v))
    } else {
        let e = libm::exp(v);
        e / (1.0 + e)
    }
}

fn add_into(dst: &mut Option<Tensor>, src: Tensor) {
    match dst {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(src.data()) {
                *a += *b;
            }
        }
        None => *dst = Some(src),
    }
}

impl Graph {
    /// Empty graph whose trainable parameters are `trainable`.
    pub fn new(trainable: BTreeSet<ParamId>, bn_mode: BnMode) -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            trainable,
            bn_mode,
            bn_updates: Vec::new(),
            encoder_passes: 0,
        }
    }

    /// Graph with nothing trainable and frozen batch-norm statistics.
    pub fn inference() -> Self {
        Self::new(BTreeSet::new(), BnMode::Frozen)
    }

    pub fn bn_mode(&self) -> BnMode {
        self.bn_mode
    }

    pub fn trainable(&self) -> &BTreeSet<ParamId> {
        &self.trainable
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate> {
        core::mem::take(&mut self.bn_updates)
    }

    pub(crate) fn record_bn_update(&mut self, update: BnUpdate) {
        self.bn_updates.push(update);
    }

    pub(crate) fn count_encoder_pass(&mut self) {
        self.encoder_passes += 1;
    }

    /// Number of encoder forward passes recorded on this graph.
    pub fn encoder_passes(&self) -> usize {
        self.encoder_passes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies the current value of `v` into a fresh constant (no gradient path).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    /// Parameter node for `id`, created on first use. A graph serves one
    /// store: ids from different stores would collide.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let requires_grad = self.trainable.contains(&id);
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    /// Whether `target` is reachable backwards from `output` through the tape.
    pub fn depends_on(&self, output: Var, target: Var) -> bool {
        if output == target {
            return true;
        }
        let mut seen = vec![false; output.0 + 1];
        let mut stack = vec![output];
        while let Some(v) = stack.pop() {
            if v == target {
                return true;
            }
            if v.0 < target.0 || seen[v.0] {
                continue;
            }
            seen[v.0] = true;
            stack.extend(self.nodes[v.0].op.inputs());
        }
        false
    }

    // ---- convolutions -------------------------------------------------

    /// Cross-correlation. `x`: N×C×H×W, `w`: O×C×K×K, optional bias of length O.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(shape_mismatch(("O", c, "K", "K"), ws));
        }
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(invalid("convolution window larger than padded input"));
        }
        let g = Window::new(c, h, wd, k, stride, pad);
        let p = g.positions();
        let ld = n * p;
        let mut cols = vec![0.0; g.rows() * ld];
        let xv = self.value(x).data();
        for s in 0..n {
            im2col(
                &xv[s * g.image_len()..(s + 1) * g.image_len()],
                &g,
                &mut cols,
                ld,
                s * p,
            );
        }
        let mut prod = vec![0.0; o * ld];
        gemm(
            o,
            g.rows(),
            ld,
            self.value(w).data(),
            false,
            &cols,
            false,
            0.0,
            &mut prod,
        );
        let bias = b.map(|b| self.value(b).data().to_vec());
        let mut out = vec![0.0; n * o * p];
        for s in 0..n {
            for oc in 0..o {
                let add = bias.as_ref().map_or(0.0, |bv| bv[oc]);
                let src = &prod[oc * ld + s * p..oc * ld + (s + 1) * p];
                let dst = &mut out[(s * o + oc) * p..(s * o + oc + 1) * p];
                for (d, v) in dst.iter_mut().zip(src) {
                    *d = v + add;
                }
            }
        }
        let value = Tensor::new(&[n, o, g.out_h, g.out_w], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, g }))
    }

    /// Transposed convolution doubling (for stride 2) the spatial size:
    /// output is `stride·H × stride·W`. `w`: C_in×C_out×K×K.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (n, c_in, h, wd) = self.value(x).dims4();
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != c_in || ws[2] != ws[3] {
            return Err(shape_mismatch((c_in, "O", "K", "K"), ws));
        }
        let (o, k) = (ws[1], ws[2]);
        let g = Window::new(o, stride * h, stride * wd, k, stride, pad);
        if g.out_h != h || g.out_w != wd {
            return Err(invalid("transposed convolution geometry does not invert"));
        }
        let p = h * wd;
        let ld = n * p;
        let xv = self.value(x).data();
        let mut xm = vec![0.0; c_in * ld];
        for s in 0..n {
            for ci in 0..c_in {
                xm[ci * ld + s * p..ci * ld + (s + 1) * p]
                    .copy_from_slice(&xv[(s * c_in + ci) * p..(s * c_in + ci + 1) * p]);
            }
        }
        let mut cols = vec![0.0; g.rows() * ld];
        gemm(
            g.rows(),
            c_in,
            ld,
            self.value(w).data(),
            true,
            &xm,
            false,
            0.0,
            &mut cols,
        );
        let mut out = vec![0.0; n * g.image_len()];
        for s in 0..n {
            col2im(
                &cols,
                &g,
                ld,
                s * p,
                &mut out[s * g.image_len()..(s + 1) * g.image_len()],
            );
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            let plane = g.height * g.width;
            for s in 0..n {
                for oc in 0..o {
                    for v in &mut out[(s * o + oc) * plane..(s * o + oc + 1) * plane] {
                        *v += bv[oc];
                    }
                }
            }
        }
        let value = Tensor::new(&[n, o, g.height, g.width], out)?;
        Ok(self.push(value, Op::ConvTranspose2d { x, w, b, g }))
    }

    // ---- normalization --------------------------------------------------

    /// Batch normalization with statistics over N, H, W of each channel.
    /// Returns the output and the biased batch mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, h, w) = self.value(x).dims4();
        self.value(gamma).ensure_shape(&[c])?;
        self.value(beta).ensure_shape(&[c])?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let xv = self.value(x).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for s in 0..n {
                sum += xv[(s * c + ch) * plane..(s * c + ch + 1) * plane]
                    .iter()
                    .sum::<f64>();
            }
            let m = sum / count;
            let mut sq = 0.0;
            for s in 0..n {
                sq += xv[(s * c + ch) * plane..(s * c + ch + 1) * plane]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = sq / count;
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let range = (s * c + ch) * plane..(s * c + ch + 1) * plane;
                for i in range {
                    let z = (xv[i] - mean[ch]) * invstd[ch];
                    xhat[i] = z;
                    out[i] = gv[ch] * z + bv[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        let v = self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            },
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed statistics.
    pub fn scale_shift(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
    ) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        self.value(gamma).ensure_shape(&[c])?;
        self.value(beta).ensure_shape(&[c])?;
        if mean.len() != c || var.len() != c {
            return Err(shape_mismatch(c, (mean.len(), var.len())));
        }
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / libm::sqrt(v + BN_EPS)).collect();
        let plane = h * w;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                    out[i] = gv[ch] * (xv[i] - mean[ch]) * invstd[ch] + bv[ch];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::ScaleShift {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                invstd,
            },
        ))
    }

    // ---- pointwise ------------------------------------------------------

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x);
        let value =
            Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape");
        self.push(value, op)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.map(
            x,
            |v| if v > 0.0 { v } else { slope * v },
            Op::LeakyRelu { x, slope },
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, sigmoid, Op::Sigmoid { x })
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.map(x, |v| scale * v + shift, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.affine(x, s, 0.0)
    }

    /// `1 − x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_mismatch(ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape(), data)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Sum of equally shaped vars.
    pub fn sum_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or(crate::error::Error::Empty("sum"))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// Multiplies every channel of `x` (N×C×H×W) by `mask` (N×1×H×W).
    pub fn mul_mask(&mut self, x: Var, mask: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4();
        self.value(mask).ensure_shape(&[n, 1, h, w])?;
        let plane = h * w;
        let (xv, mv) = (self.value(x).data(), self.value(mask).data());
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    out[(s * c + ch) * plane + p] =
                        xv[(s * c + ch) * plane + p] * mv[s * plane + p];
                }
            }
        }
        let value = Tensor::new(&[n, c, h, w], out)?;
        Ok(self.push(value, Op::MulMask { x, mask }))
    }

    /// Scales sample `i` of `x` by `s[i]`; `s` has N elements.
    pub fn scale_samples(&mut self, x: Var, s: Var) -> Result<Var> {
        let n = self.value(x).batch();
        if self.value(s).numel() != n {
            return Err(shape_mismatch(n, self.value(s).numel()));
        }
        let per = self.value(x).numel() / n;
        let sv = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv[i / per])
            .collect();
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::ScaleSamples { x, s }))
    }

    /// Channel concatenation of two N×?×H×W tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        if (n, h, w) != (nb, hb, wb) {
            return Err(shape_mismatch((n, h, w), (nb, hb, wb)));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            out.extend_from_slice(&self.value(a).data()[s * ca * plane..(s + 1) * ca * plane]);
            out.extend_from_slice(&self.value(b).data()[s * cb * plane..(s + 1) * cb * plane]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], out)?;
        Ok(self.push(value, Op::Concat { a, b }))
    }

    // ---- reductions -----------------------------------------------------

    /// Mean absolute value over all elements.
    pub fn mean_abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().map(|v| v.abs()).sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(v), Op::MeanAbs { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(v), Op::Mean { x })
    }

    /// Euclidean norm of each sample, shape `[N]`.
    pub fn sample_norms(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.batch();
        let per = t.numel() / n;
        let norms = (0..n)
            .map(|s| libm::sqrt(t.data()[s * per..(s + 1) * per].iter().map(|v| v * v).sum()))
            .collect();
        self.push(
            Tensor::new(&[n], norms).expect("len n"),
            Op::SampleNorms { x },
        )
    }

    /// Mean of `ln(clamp(x))`, or of `ln(1 − clamp(x))` when `complement`,
    /// with `clamp` into `[eps, 1 − eps]`.
    pub fn mean_log(&mut self, x: Var, complement: bool, eps: f64) -> Var {
        let t = self.value(x);
        let sum: f64 = t
            .data()
            .iter()
            .map(|&v| {
                let c = v.clamp(eps, 1.0 - eps);
                libm::log(if complement { 1.0 - c } else { c })
            })
            .sum();
        let v = sum / t.numel() as f64;
        self.push(Tensor::scalar(v), Op::MeanLog { x, complement, eps })
    }

    /// N×C×H×W → N×C spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let plane = h * w;
        let data = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        self.push(
            Tensor::new(&[n, c], data).expect("n*c"),
            Op::GlobalAvgPool { x },
        )
    }

    /// `x·wᵀ + b` with `x`: N×C, `w`: O×C, `b`: O.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_mismatch(xs, ws));
        }
        let (n, o) = (xs[0], ws[0]);
        self.value(b).ensure_shape(&[o])?;
        let mut out = vec![0.0; n * o];
        for s in 0..n {
            out[s * o..(s + 1) * o].copy_from_slice(self.value(b).data());
        }
        gemm(
            n,
            xs[1],
            o,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            1.0,
            &mut out,
        );
        Ok(self.push(Tensor::new(&[n, o], out)?, Op::Linear { x, w, b }))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Gradients of the one-element `loss` with respect to every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backprop_node(node, &gout, &mut grads)?;
            }
            grads[idx] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    /// Gradients of every trainable parameter (zeros where none flowed).
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<ParamId, Tensor> {
        self.params
            .iter()
            .filter(|(id, _)| self.trainable.contains(id))
            .map(|(&id, &v)| {
                (
                    id,
                    grads
                        .get(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(self.shape(v))),
                )
            })
            .collect()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(
        &self,
        node: &Node,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let g = gout.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::Conv2d { x, w, b, g: win } => {
                let (n, o, _, _) = node.value.dims4();
                let p = win.positions();
                let ld = n * p;
                let mut gm = vec![0.0; o * ld];
                for s in 0..n {
                    for oc in 0..o {
                        gm[oc * ld + s * p..oc * ld + (s + 1) * p]
                            .copy_from_slice(&g[(s * o + oc) * p..(s * o + oc + 1) * p]);
                    }
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let db = (0..o)
                        .map(|oc| gm[oc * ld..(oc + 1) * ld].iter().sum())
                        .collect();
                    add_into(&mut grads[b.0], Tensor::new(&[o], db)?);
                }
                let xv = self.value(*x).data();
                if self.needs(*w) {
                    let mut cols = vec![0.0; win.rows() * ld];
                    for s in 0..n {
                        im2col(
                            &xv[s * win.image_len()..(s + 1) * win.image_len()],
                            win,
                            &mut cols,
                            ld,
                            s * p,
                        );
                    }
                    let mut dw = vec![0.0; o * win.rows()];
                    gemm(o, ld, win.rows(), &gm, false, &cols, true, 0.0, &mut dw);
                    add_into(&mut grads[w.0], Tensor::new(self.shape(*w), dw)?);
                }
                if self.needs(*x) {
                    let mut dcols = vec![0.0; win.rows() * ld];
                    gemm(
                        win.rows(),
                        o,
                        ld,
                        self.value(*w).data(),
                        true,
                        &gm,
                        false,
                        0.0,
                        &mut dcols,
                    );
                    let mut dx = vec![0.0; n * win.image_len()];
                    for s in 0..n {
                        col2im(
                            &dcols,
                            win,
                            ld,
                            s * p,
                            &mut dx[s * win.image_len()..(s + 1) * win.image_len()],
                        );
                    }
                    add_into(&mut grads[x.0], Tensor::new(self.shape(*x), dx)?);
                }
            }
            Op::ConvTranspose2d { x, w, b, g: win } => {
                let (n, c_in, _, _) = self.value(*x).dims4();
                let o = win.channels;
                let p = win.positions();
                let ld = n * p;
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let plane = win.height * win.width;
                    let mut db = vec![0.0; o];
                    for s in 0..n {
                        for (oc, d) in db.iter_mut().enumerate() {
                            *d += g[(s * o + oc) * plane..(s * o + oc + 1) * plane]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                    add_into(&mut grads[b.0], Tensor::new(&[o], db)?);
                }
                let mut gcols = vec![0.0; win.rows() * ld];
                for s in 0..n {
                    im2col(
                        &g[s * win.image_len()..(s + 1) * win.image_len()],
                        win,
                        &mut gcols,
                        ld,
                        s * p,
                    );
                }
                if self.needs(*w) {
                    let xv = self.value(*x).data();
                    let mut xm = vec![0.0; c_in * ld];
                    for s in 0..n {
                        for ci in 0..c_in {
                            xm[ci * ld + s * p..ci * ld + (s + 1) * p]
                                .copy_from_slice(&xv[(s * c_in + ci) * p..(s * c_in + ci + 1) * p]);
                        }
                    }
                    let mut dw = vec![0.0; c_in * win.rows()];
                    gemm(c_in, ld, win.rows(), &xm, false, &gcols, true, 0.0, &mut dw);
                    add_into(&mut grads[w.0], Tensor::new(self.shape(*w), dw)?);
                }
                if self.needs(*x) {
                    let mut dxm = vec![0.0; c_in * ld];
                    gemm(
                        c_in,
                        win.rows(),
                        ld,
                        self.value(*w).data(),
                        false,
                        &gcols,
                        false,
                        0.0,
                        &mut dxm,
                    );
                    let mut dx = vec![0.0; n * c_in * p];
                    for s in 0..n {
                        for ci in 0..c_in {
                            dx[(s * c_in + ci) * p..(s * c_in + ci + 1) * p]
                                .copy_from_slice(&dxm[ci * ld + s * p..ci * ld + (s + 1) * p]);
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::new(self.shape(*x), dx)?);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                invstd,
            } => {
                let (n, c, h, w) = node.value.dims4();
                let plane = h * w;
                let count = (n * plane) as f64;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let k = gv[ch] * invstd[ch] / count;
                            for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                                dx[i] = k * (count * g[i] - dbeta[ch] - xhat[i] * dgamma[ch]);
                            }
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::new(&[n, c, h, w], dx)?);
                }
                if self.needs(*gamma) {
                    add_into(&mut grads[gamma.0], Tensor::new(&[c], dgamma)?);
                }
                if self.needs(*beta) {
                    add_into(&mut grads[beta.0], Tensor::new(&[c], dbeta)?);
                }
            }
            Op::ScaleShift {
                x,
                gamma,
                beta,
                mean,
                invstd,
            } => {
                let (n, c, h, w) = node.value.dims4();
                let plane = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for s in 0..n {
                    for ch in 0..c {
                        for i in (s * c + ch) * plane..(s * c + ch + 1) * plane {
                            dgamma[ch] += g[i] * (xv[i] - mean[ch]) * invstd[ch];
                            dbeta[ch] += g[i];
                            dx[i] = g[i] * gv[ch] * invstd[ch];
                        }
                    }
                }
                if self.needs(*x) {
                    add_into(&mut grads[x.0], Tensor::new(&[n, c, h, w], dx)?);
                }
                if self.needs(*gamma) {
                    add_into(&mut grads[gamma.0], Tensor::new(&[c], dgamma)?);
                }
                if self.needs(*beta) {
                    add_into(&mut grads[beta.0], Tensor::new(&[c], dbeta)?);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let d = xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &gi)| if v > 0.0 { gi } else { slope * gi })
                    .collect();
                add_into(&mut grads[x.0], Tensor::new(node.value.shape(), d)?);
            }
            Op::Sigmoid { x } => {
                let d = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gi)| gi * y * (1.0 - y))
                    .collect();
                add_into(&mut grads[x.0], Tensor::new(node.value.shape(), d)?);
            }
            Op::Affine { x, scale } => {
                let d = g.iter().map(|gi| gi * scale).collect();
                add_into(&mut grads[x.0], Tensor::new(node.value.shape(), d)?);
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if self.needs(*v) {
                        add_into(&mut grads[v.0], gout.clone());
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], gout.clone());
                }
                if self.needs(*b) {
                    add_into(
                        &mut grads[b.0],
                        Tensor::new(gout.shape(), g.iter().map(|v| -v).collect())?,
                    );
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    add_into(
                        &mut grads[a.0],
                        Tensor::new(gout.shape(), g.iter().zip(bv).map(|(x, y)| x * y).collect())?,
                    );
                }
                if self.needs(*b) {
                    add_into(
                        &mut grads[b.0],
                        Tensor::new(gout.shape(), g.iter().zip(av).map(|(x, y)| x * y).collect())?,
                    );
                }
            }
            Op::MulMask { x, mask } => {
                let (n, c, h, w) = node.value.dims4();
                let plane = h * w;
                let (xv, mv) = (self.value(*x).data(), self.value(*mask).data());
                if self.needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            for p in 0..plane {
                                let i = (s * c + ch) * plane + p;
                                dx[i] = g[i] * mv[s * plane + p];
                            }
                        }
                    }
                    add_into(&mut grads[x.0], Tensor::new(&[n, c, h, w], dx)?);
                }
                if self.needs(*mask) {
                    let mut dm = vec![0.0; n * plane];
                    for s in 0..n {
                        for ch in 0..c {
                            for p in 0..plane {
                                let i = (s * c + ch) * plane + p;
                                dm[s * plane + p] += g[i] * xv[i];
                            }
                        }
                    }
                    add_into(&mut grads[mask.0], Tensor::new(&[n, 1, h, w], dm)?);
                }
            }
            Op::ScaleSamples { x, s } => {
                let n = node.value.batch();
                let per = node.value.numel() / n;
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                if self.needs(*x) {
                    let d = g
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * sv[i / per])
                        .collect();
                    add_into(&mut grads[x.0], Tensor::new(node.value.shape(), d)?);
                }
                if self.needs(*s) {
                    let d = (0..n)
                        .map(|k| (k * per..(k + 1) * per).map(|i| g[i] * xv[i]).sum())
                        .collect();
                    add_into(&mut grads[s.0], Tensor::new(self.shape(*s), d)?);
                }
            }
            Op::Concat { a, b } => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).dims4().1;
                let plane = h * w;
                let per = (ca + cb) * plane;
                if self.needs(*a) {
                    let d = (0..n)
                        .flat_map(|s| g[s * per..s * per + ca * plane].iter().copied())
                        .collect();
                    add_into(&mut grads[a.0], Tensor::new(&[n, ca, h, w], d)?);
                }
                if self.needs(*b) {
                    let d = (0..n)
                        .flat_map(|s| g[s * per + ca * plane..(s + 1) * per].iter().copied())
                        .collect();
                    add_into(&mut grads[b.0], Tensor::new(&[n, cb, h, w], d)?);
                }
            }
            Op::MeanAbs { x } => {
                let t = self.value(*x);
                let k = g[0] / t.numel() as f64;
                let d = t
                    .data()
                    .iter()
                    .map(|&v| {
                        if v > 0.0 {
                            k
                        } else if v < 0.0 {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(&mut grads[x.0], Tensor::new(t.shape(), d)?);
            }
            Op::Mean { x } => {
                let t = self.value(*x);
                add_into(
                    &mut grads[x.0],
                    Tensor::full(t.shape(), g[0] / t.numel() as f64),
                );
            }
            Op::SampleNorms { x } => {
                let t = self.value(*x);
                let per = t.numel() / t.batch();
                let norms = node.value.data();
                let d = t
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let nk = norms[i / per];
                        if nk > 0.0 {
                            g[i / per] * v / nk
                        } else {
                            0.0
                        }
                    })
                    .collect();
                add_into(&mut grads[x.0], Tensor::new(t.shape(), d)?);
            }
            Op::MeanLog { x, complement, eps } => {
                let t = self.value(*x);
                let k = g[0] / t.numel() as f64;
                let d = t
                    .data()
                    .iter()
                    .map(|&v| {
                        if v < *eps || v > 1.0 - *eps {
                            0.0
                        } else if *complement {
                            -k / (1.0 - v)
                        } else {
                            k / v
                        }
                    })
                    .collect();
                add_into(&mut grads[x.0], Tensor::new(t.shape(), d)?);
            }
            Op::GlobalAvgPool { x } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let plane = h * w;
                let d = (0..n * c)
                    .flat_map(|i| core::iter::repeat_n(g[i] / plane as f64, plane))
                    .collect();
                add_into(&mut grads[x.0], Tensor::new(&[n, c, h, w], d)?);
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, cin) = (xs[0], xs[1]);
                let o = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * cin];
                    gemm(
                        n,
                        o,
                        cin,
                        g,
                        false,
                        self.value(*w).data(),
                        false,
                        0.0,
                        &mut dx,
                    );
                    add_into(&mut grads[x.0], Tensor::new(&[n, cin], dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; o * cin];
                    gemm(
                        o,
                        n,
                        cin,
                        g,
                        true,
                        self.value(*x).data(),
                        false,
                        0.0,
                        &mut dw,
                    );
                    add_into(&mut grads[w.0], Tensor::new(&[o, cin], dw)?);
                }
                if self.needs(*b) {
                    let db = (0..o).map(|j| (0..n).map(|s| g[s * o + j]).sum()).collect();
                    add_into(&mut grads[b.0], Tensor::new(&[o], db)?);
                }
            }
        }
        Ok(())
    }
}
