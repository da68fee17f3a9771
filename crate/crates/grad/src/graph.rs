//! Tape-based computation graph with reverse-mode differentiation.
//!
//! Every primitive appends one node to the tape, so node indices are already a
//! topological order: `backward` simply walks the tape from the loss down.

use std::collections::BTreeMap;

use crate::error::GradError;
use crate::tensor::{gemm, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Disjoint parameter partitions. The pixel module is `Encoder ∪ PixelDecoder`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    PixelDecoder,
    SegmentDecoder,
    /// Learnable classifier head (only used by the MLP-head variant).
    Head,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::PixelDecoder,
        ParamGroup::SegmentDecoder,
        ParamGroup::Head,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::PixelDecoder => "pixel_decoder",
            ParamGroup::SegmentDecoder => "segment_decoder",
            ParamGroup::Head => "head",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.as_str() == s)
    }

    /// True for the groups making up the pixel-level module.
    pub fn is_pixel_module(self) -> bool {
        matches!(self, ParamGroup::Encoder | ParamGroup::PixelDecoder)
    }
}

/// Batch-normalization mode.
#[derive(Clone, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Infer { mean: &'a [f64], var: &'a [f64] },
}

/// Batch-normalization epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Floor on vector norms in [`Graph::l2_normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    BatchItem { x: Var, item: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize },
    Upsample2(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    Log(Var),
    ClampMin { x: Var, min: f64 },
    SumNormalize { x: Var, axis: usize },
    L2Normalize { x: Var, axis: usize, norms: Vec<f64> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    AddBias { x: Var, b: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    IndexSelect { x: Var, axis: usize, indices: Vec<usize> },
    Gather { x: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Debug)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    var: Var,
}

/// Per-channel statistics of one training-mode batch-normalization node.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    /// Biased variance over the batch-spatial axes.
    pub var: Vec<f64>,
}

/// A single forward computation recorded for differentiation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<ParamEntry>,
    bn_stats: BTreeMap<usize, BnBatchStats>,
}

/// Splits `shape` around `axis` into `(outer, len, inner)` extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A non-parameter leaf whose gradient is tracked (useful for
    /// differentiating with respect to features directly).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Registers a named trainable parameter.
    pub fn param(&mut self, name: &str, group: ParamGroup, t: Tensor) -> Result<Var, GradError> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(GradError::Contract(format!("parameter `{name}` registered twice")));
        }
        let var = self.push(t, Op::Leaf, true);
        self.params.push(ParamEntry { name: name.to_string(), group, var });
        Ok(var)
    }

    pub fn param_names(&self) -> impl Iterator<Item = (&str, ParamGroup)> {
        self.params.iter().map(|p| (p.name.as_str(), p.group))
    }

    /// Batch statistics recorded by a training-mode batch-norm node.
    pub fn bn_stats(&self, v: Var) -> Option<&BnBatchStats> {
        self.bn_stats.get(&v.0)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(GradError::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<(), GradError> {
        if axis >= self.value(x).rank() {
            return Err(GradError::Shape(format!(
                "axis {axis} out of range for shape {:?}",
                self.shape(x)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_with(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_with(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_with(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("square of a tensor with itself")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let v = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let v = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Slices item `item` off the leading (batch) axis.
    pub fn batch_item(&mut self, x: Var, item: usize) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || item >= shape[0] {
            return Err(GradError::Shape(format!("batch item {item} of shape {shape:?}")));
        }
        let per: usize = shape[1..].iter().product();
        let data = self.value(x).data()[item * per..(item + 1) * per].to_vec();
        let v = Tensor::from_parts(shape[1..].to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(v, Op::BatchItem { x, item }, rg))
    }

    /// 3×3 convolution with zero padding 1 over `[N, Cin, H, W]` input.
    /// Weight is `[Cout, Cin, 3, 3]`, bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let [n, cin, h, wd] = xs[..] else {
            return Err(GradError::Shape(format!("conv2d input must be rank 4, got {xs:?}")));
        };
        let [cout, wcin, 3, 3] = ws[..] else {
            return Err(GradError::Shape(format!("conv2d weight must be [Cout,Cin,3,3], got {ws:?}")));
        };
        if wcin != cin {
            return Err(GradError::Dimension { op: "conv2d", lhs: xs, rhs: ws });
        }
        if stride != 1 && stride != 2 {
            return Err(GradError::Shape(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if stride == 2 && (h % 2 != 0 || wd % 2 != 0) {
            return Err(GradError::Shape(format!("stride-2 conv2d needs even extents, got {h}×{wd}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(GradError::Dimension {
                    op: "conv2d bias",
                    lhs: vec![cout],
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geo = ConvGeom { cin, h, w: wd, stride };
        let (ho, wo) = geo.out_hw();
        let p = ho * wo;
        let kk = cin * 9;
        let mut out = vec![0.0; n * cout * p];
        let mut cols = vec![0.0; kk * p];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for item in 0..n {
            geo.im2col(&xv[item * cin * h * wd..(item + 1) * cin * h * wd], &mut cols);
            let o = &mut out[item * cout * p..(item + 1) * cout * p];
            gemm(false, false, cout, kk, p, 1.0, wv, &cols, 0.0, o);
            if let Some(b) = b {
                for (c, &bc) in self.value(b).data().iter().enumerate() {
                    o[c * p..(c + 1) * p].iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let v = Tensor::from_parts(vec![n, cout, ho, wo], out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, stride }, rg))
    }

    /// Nearest-neighbour ×2 upsampling of `[N, C, H, W]`.
    pub fn upsample2(&mut self, x: Var) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        let [n, c, h, w] = xs[..] else {
            return Err(GradError::Shape(format!("upsample2 input must be rank 4, got {xs:?}")));
        };
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * 4 * h * w];
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    d[y * 2 * w + xx] = s[(y / 2) * w + xx / 2];
                }
            }
        }
        let v = Tensor::from_parts(vec![n, c, 2 * h, 2 * w], out);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Upsample2(x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a.max(0.0));
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        self.check_axis(x, axis)?;
        let v = softmax_along(self.value(x), axis);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Softmax { x, axis }, rg))
    }

    /// Natural log; inputs must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var, GradError> {
        if self.value(x).data().iter().any(|&a| a <= 0.0) {
            return Err(GradError::Contract("log of a non-positive value".into()));
        }
        let v = self.value(x).map(f64::ln);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Log(x), rg))
    }

    /// `max(x, min)` elementwise; the gradient is zero where clamped.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let v = self.value(x).map(|a| a.max(min));
        let rg = self.rg(x);
        self.push(v, Op::ClampMin { x, min }, rg)
    }

    /// Divides by the sum along `axis` (inputs assumed positive).
    pub fn sum_normalize(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        self.check_axis(x, axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let s: f64 = (0..len).map(|k| out[base + k * inner]).sum();
                if s <= 0.0 {
                    return Err(GradError::Contract("sum_normalize over non-positive mass".into()));
                }
                (0..len).for_each(|k| out[base + k * inner] /= s);
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(v, Op::SumNormalize { x, axis }, rg))
    }

    /// Scales every vector along `axis` to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        self.check_axis(x, axis)?;
        let xv = self.value(x);
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let n = (0..len).map(|k| out[base + k * inner].powi(2)).sum::<f64>().sqrt();
                let n = n.max(NORM_FLOOR);
                (0..len).for_each(|k| out[base + k * inner] /= n);
                norms.push(n);
            }
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        Ok(self.push(v, Op::L2Normalize { x, axis, norms }, rg))
    }

    /// Per-channel batch normalization; the channel axis is 1 and statistics
    /// are taken over all other axes.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var, GradError> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(GradError::Shape(format!("batch_norm needs rank ≥ 2, got {xs:?}")));
        }
        let (outer, ch, inner) = split_axis(&xs, 1);
        for p in [gamma, beta] {
            if self.shape(p) != [ch] {
                return Err(GradError::Dimension { op: "batch_norm", lhs: xs, rhs: self.shape(p).to_vec() });
            }
        }
        let xv = self.value(x).data();
        let m = (outer * inner) as f64;
        let (mean, var) = match &mode {
            BnMode::Train => {
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for c in 0..ch {
                    let vals = || (0..outer).flat_map(move |o| (0..inner).map(move |i| (o * ch + c) * inner + i));
                    let mu = vals().map(|k| xv[k]).sum::<f64>() / m;
                    mean[c] = mu;
                    var[c] = vals().map(|k| (xv[k] - mu).powi(2)).sum::<f64>() / m;
                }
                (mean, var)
            }
            BnMode::Infer { mean, var } => {
                if mean.len() != ch || var.len() != ch {
                    return Err(GradError::Shape("running statistics length mismatch".into()));
                }
                (mean.to_vec(), var.to_vec())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                    out[i] = g[c] * xhat[i] + b[c];
                }
            }
        }
        let v = Tensor::from_parts(xs, out);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let train = matches!(mode, BnMode::Train);
        let var_id = self.push(v, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, rg);
        if train {
            self.bn_stats.insert(var_id.0, BnBatchStats { mean, var });
        }
        Ok(var_id)
    }

    /// Adds a vector `b` broadcast along every axis except `axis`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var, GradError> {
        self.check_axis(x, axis)?;
        let xs = self.shape(x).to_vec();
        if self.shape(b) != [xs[axis]] {
            return Err(GradError::Dimension { op: "add_bias", lhs: xs, rhs: self.shape(b).to_vec() });
        }
        let (outer, len, inner) = split_axis(&xs, axis);
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v += bv[k]);
            }
        }
        let v = Tensor::from_parts(xs, out);
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(v, Op::AddBias { x, b, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.rg(x);
        self.push(v, Op::Mean(x), rg)
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, GradError> {
        self.check_axis(x, axis)?;
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&xs, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let base = (o * len + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xv[base + i];
                }
            }
        }
        let mut shape = xs;
        shape.remove(axis);
        let v = Tensor::from_parts(shape, out);
        let rg = self.rg(x);
        Ok(self.push(v, Op::SumAxis { x, axis }, rg))
    }

    /// Selects `indices` (repeats allowed) along `axis`.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var, GradError> {
        self.check_axis(x, axis)?;
        let xs = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&xs, axis);
        if indices.is_empty() {
            return Err(GradError::Shape("index_select with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(GradError::Shape(format!("index {bad} out of range for axis of length {len}")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &k in indices {
                let base = (o * len + k) * inner;
                out.extend_from_slice(&xv[base..base + inner]);
            }
        }
        let mut shape = xs;
        shape[axis] = indices.len();
        let v = Tensor::from_parts(shape, out);
        let rg = self.rg(x);
        Ok(self.push(v, Op::IndexSelect { x, axis, indices: indices.to_vec() }, rg))
    }

    /// Picks flat (row-major) elements into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var, GradError> {
        let xv = self.value(x);
        if indices.is_empty() {
            return Err(GradError::Shape("gather with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(GradError::Shape(format!("gather index {bad} out of range for {:?}", xv.shape())));
        }
        let v = Tensor::vector(indices.iter().map(|&i| xv.data()[i]).collect());
        let rg = self.rg(x);
        Ok(self.push(v, Op::Gather { x, indices: indices.to_vec() }, rg))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GradError> {
        if self.value(loss).len() != 1 {
            return Err(GradError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(self.shape(loss).to_vec(), vec![1.0]));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &gy, &mut grads);
            }
            grads[idx] = Some(gy);
        }
        let params = self
            .params
            .iter()
            .map(|p| {
                let g = grads[p.var.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(p.var)));
                (p.name.clone(), (p.group, g))
            })
            .collect();
        Ok(Gradients { nodes: grads, params })
    }

    fn propagate(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, || g.to_vec());
                self.acc(grads, *b, || g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, || g.to_vec());
                self.acc(grads, *b, || g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, || g.iter().zip(bv).map(|(g, b)| g * b).collect());
                self.acc(grads, *b, || g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            Op::Scale(a, s) => self.acc(grads, *a, || g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, || g.to_vec()),
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul").unwrap();
                let n = y.shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, || {
                    let mut ga = vec![0.0; m * k];
                    gemm(false, true, m, n, k, 1.0, g, bv, 0.0, &mut ga);
                    ga
                });
                self.acc(grads, *b, || {
                    let mut gb = vec![0.0; k * n];
                    gemm(true, false, k, m, n, 1.0, av, g, 0.0, &mut gb);
                    gb
                });
            }
            Op::Transpose(a) => {
                self.acc(grads, *a, || gy.transpose().unwrap().into_data());
            }
            Op::BatchItem { x, item } => {
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    gx[item * g.len()..(item + 1) * g.len()].copy_from_slice(g);
                    gx
                });
            }
            Op::Conv2d { x, w, b, stride } => self.conv2d_backward(*x, *w, *b, *stride, g, grads),
            Op::Upsample2(x) => {
                self.acc(grads, *x, || {
                    let xs = self.shape(*x);
                    let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                    let mut gx = vec![0.0; planes * h * w];
                    for p in 0..planes {
                        for yy in 0..2 * h {
                            for xx in 0..2 * w {
                                gx[p * h * w + (yy / 2) * w + xx / 2] += g[p * 4 * h * w + yy * 2 * w + xx];
                            }
                        }
                    }
                    gx
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, || {
                    g.iter().zip(xv).map(|(&g, &x)| if x > 0.0 { g } else { 0.0 }).collect()
                });
            }
            Op::Softmax { x, axis } => {
                self.acc(grads, *x, || {
                    let (outer, len, inner) = split_axis(y.shape(), *axis);
                    let yv = y.data();
                    let mut gx = vec![0.0; yv.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let dot: f64 = (0..len).map(|k| g[base + k * inner] * yv[base + k * inner]).sum();
                            for k in 0..len {
                                let j = base + k * inner;
                                gx[j] = yv[j] * (g[j] - dot);
                            }
                        }
                    }
                    gx
                });
            }
            Op::Log(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, || g.iter().zip(xv).map(|(g, x)| g / x).collect());
            }
            Op::ClampMin { x, min } => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, || {
                    g.iter().zip(xv).map(|(&g, &x)| if x > *min { g } else { 0.0 }).collect()
                });
            }
            Op::SumNormalize { x, axis } => {
                self.acc(grads, *x, || {
                    let xv = self.value(*x).data();
                    let (outer, len, inner) = split_axis(y.shape(), *axis);
                    let yv = y.data();
                    let mut gx = vec![0.0; yv.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let s: f64 = (0..len).map(|k| xv[base + k * inner]).sum();
                            let dot: f64 = (0..len).map(|k| g[base + k * inner] * yv[base + k * inner]).sum();
                            for k in 0..len {
                                let j = base + k * inner;
                                gx[j] = (g[j] - dot) / s;
                            }
                        }
                    }
                    gx
                });
            }
            Op::L2Normalize { x, axis, norms } => {
                self.acc(grads, *x, || {
                    let (outer, len, inner) = split_axis(y.shape(), *axis);
                    let yv = y.data();
                    let mut gx = vec![0.0; yv.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let n = norms[o * inner + i];
                            // Below the floor the map is linear: y = x / floor.
                            let dot: f64 = if n > NORM_FLOOR {
                                (0..len).map(|k| g[base + k * inner] * yv[base + k * inner]).sum()
                            } else {
                                0.0
                            };
                            for k in 0..len {
                                let j = base + k * inner;
                                gx[j] = (g[j] - yv[j] * dot) / n;
                            }
                        }
                    }
                    gx
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let xs = self.shape(*x);
                let (outer, ch, inner) = split_axis(xs, 1);
                let m = (outer * inner) as f64;
                let mut sum_g = vec![0.0; ch];
                let mut sum_gx = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in base..base + inner {
                            sum_g[c] += g[i];
                            sum_gx[c] += g[i] * xhat[i];
                        }
                    }
                }
                let gam = self.value(*gamma).data();
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; g.len()];
                    for o in 0..outer {
                        for c in 0..ch {
                            let base = (o * ch + c) * inner;
                            let k = gam[c] * inv_std[c];
                            for i in base..base + inner {
                                gx[i] = if *train {
                                    k * (g[i] - sum_g[c] / m - xhat[i] * sum_gx[c] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    gx
                });
                self.acc(grads, *gamma, || sum_gx.clone());
                self.acc(grads, *beta, || sum_g.clone());
            }
            Op::AddBias { x, b, axis } => {
                self.acc(grads, *x, || g.to_vec());
                self.acc(grads, *b, || {
                    let (outer, len, inner) = split_axis(y.shape(), *axis);
                    let mut gb = vec![0.0; len];
                    for o in 0..outer {
                        for (k, gbk) in gb.iter_mut().enumerate() {
                            let base = (o * len + k) * inner;
                            *gbk += g[base..base + inner].iter().sum::<f64>();
                        }
                    }
                    gb
                });
            }
            Op::Sum(x) => self.acc(grads, *x, || vec![g[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.acc(grads, *x, || vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { x, axis } => {
                self.acc(grads, *x, || {
                    let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for k in 0..len {
                            let base = (o * len + k) * inner;
                            gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                        }
                    }
                    gx
                });
            }
            Op::IndexSelect { x, axis, indices } => {
                self.acc(grads, *x, || {
                    let (outer, len, inner) = split_axis(self.shape(*x), *axis);
                    let sel = indices.len();
                    let mut gx = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for (s, &k) in indices.iter().enumerate() {
                            let src = (o * sel + s) * inner;
                            let dst = (o * len + k) * inner;
                            for i in 0..inner {
                                gx[dst + i] += g[src + i];
                            }
                        }
                    }
                    gx
                });
            }
            Op::Gather { x, indices } => {
                self.acc(grads, *x, || {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (gi, &i) in g.iter().zip(indices) {
                        gx[i] += gi;
                    }
                    gx
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        g: &[f64],
        grads: &mut [Option<Tensor>],
    ) {
        let [n, cin, h, wd] = self.shape(x)[..] else { unreachable!() };
        let cout = self.shape(w)[0];
        let geo = ConvGeom { cin, h, w: wd, stride };
        let (ho, wo) = geo.out_hw();
        let p = ho * wo;
        let kk = cin * 9;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_x = self.rg(x);
        let need_w = self.rg(w);
        let mut gw = vec![0.0; cout * kk];
        let mut gx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut cols = vec![0.0; kk * p];
        for item in 0..n {
            let gi = &g[item * cout * p..(item + 1) * cout * p];
            if need_w {
                geo.im2col(&xv[item * cin * h * wd..(item + 1) * cin * h * wd], &mut cols);
                gemm(false, true, cout, p, kk, 1.0, gi, &cols, 1.0, &mut gw);
            }
            if need_x {
                gemm(true, false, kk, cout, p, 1.0, wv, gi, 0.0, &mut cols);
                geo.col2im(&cols, &mut gx[item * cin * h * wd..(item + 1) * cin * h * wd]);
            }
        }
        if need_x {
            self.acc(grads, x, || gx);
        }
        if need_w {
            self.acc(grads, w, || gw);
        }
        if let Some(b) = b {
            self.acc(grads, b, || {
                let mut gb = vec![0.0; cout];
                for item in 0..n {
                    for (c, gbc) in gb.iter_mut().enumerate() {
                        let base = (item * cout + c) * p;
                        *gbc += g[base..base + p].iter().sum::<f64>();
                    }
                }
                gb
            });
        }
    }

    /// Adds a gradient contribution to `v` if it tracks gradients.
    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, contribution: impl FnOnce() -> Vec<f64>) {
        if !self.rg(v) {
            return;
        }
        let c = contribution();
        match &mut grads[v.0] {
            Some(t) => t.data_mut().iter_mut().zip(&c).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(Tensor::from_parts(self.shape(v).to_vec(), c)),
        }
    }
}

/// Softmax of a plain tensor along `axis`.
pub fn softmax_along(t: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(t.shape(), axis);
    let mut out = t.data().to_vec();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mx = (0..len).map(|k| out[base + k * inner]).fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for k in 0..len {
                let e = (out[base + k * inner] - mx).exp();
                out[base + k * inner] = e;
                s += e;
            }
            (0..len).for_each(|k| out[base + k * inner] /= s);
        }
    }
    Tensor::from_parts(t.shape().to_vec(), out)
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    stride: usize,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        ((self.h - 1) / self.stride + 1, (self.w - 1) / self.stride + 1)
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (ho, wo) = self.out_hw();
        let p = ho * wo;
        for c in 0..self.cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((c * 3 + ky) * 3 + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        let dst = &mut row[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let (ho, wo) = self.out_hw();
        let p = ho * wo;
        for c in 0..self.cin {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((c * 3 + ky) * 3 + kx) * p..][..p];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut gx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - 1;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<String, (ParamGroup, Tensor)>,
}

impl Gradients {
    /// Gradient with respect to any node; `None` if no path reached it.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a named parameter (zeros when unreached).
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|(_, t)| t)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, ParamGroup, &Tensor)> {
        self.params.iter().map(|(n, (g, t))| (n.as_str(), *g, t))
    }

    /// Largest absolute gradient entry over one parameter group.
    pub fn group_max_abs(&self, group: ParamGroup) -> f64 {
        self.params()
            .filter(|(_, g, _)| *g == group)
            .fold(0.0, |m, (_, _, t)| m.max(t.max_abs()))
    }

    pub fn into_param_map(self) -> BTreeMap<String, Tensor> {
        self.params.into_iter().map(|(n, (_, t))| (n, t)).collect()
    }
}
