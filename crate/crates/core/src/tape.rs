//! Reverse-mode differentiation over a linear operation tape.
//!
//! Forward calls record one node per primitive; [`Tape::backward`] replays
//! the tape in reverse and accumulates gradients into the `requires_grad`
//! leaves via the chain rule. Operands always precede results, so a single
//! reverse sweep covers every leaf reachable from the loss.
//!
//! Leaf gradients accumulate across backward calls until
//! [`Tape::zero_grads`] is called; interior gradients are scratch local to
//! one sweep. A tape is confined to one execution context — parallelism
//! happens across independent samples, each on its own tape.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Numeric profile. `Test` (64-bit) additionally validates that every
/// operation result is finite, turning NaN/Inf into a hard error at the
/// boundary where it first appears.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Profile {
    Train,
    #[default]
    Test,
}

impl Profile {
    pub fn check_finite(self) -> bool {
        matches!(self, Profile::Test)
    }
}

#[derive(Debug)]
enum Op<F: Real> {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, F),
    AddScalar(TensorId, F),
    /// [R,C] + [C] broadcast over rows.
    AddBias(TensorId, TensorId),
    /// [C,H,W] + [C] broadcast over planes.
    AddChanBias(TensorId, TensorId),
    /// [R,C] scaled per row by [R].
    RowScale(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    /// A · Bᵀ with B stored row-major as [n,k].
    MatmulNt(TensorId, TensorId),
    Transpose2(TensorId),
    Reshape(TensorId),
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Narrow {
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        // per-row mean and reciprocal stddev cached at forward
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu(TensorId),
    Conv2d {
        x: TensorId,
        kernel: TensorId,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        x: TensorId,
        kernel: TensorId,
    },
    AvgPool3(TensorId),
    MaxPool3 {
        x: TensorId,
        argmax: Vec<u32>,
    },
    BilinearUpsample {
        x: TensorId,
        out_h: usize,
        out_w: usize,
    },
    SumAll(TensorId),
    /// Per-category mean of rows selected by label. Gradient scatters the
    /// category row gradient back to member pixels, divided by the count.
    ClassMean {
        x: TensorId,
        labels: Vec<i32>,
        counts: Vec<u32>,
    },
    /// Mean over non-ignored pixels of -log softmax(logit)[label].
    CrossEntropyMean {
        logits: TensorId,
        labels: Vec<i32>,
        probs: Vec<F>,
        n_valid: usize,
    },
    /// KL(t ‖ s) with the teacher side detached: gradient flows to s only.
    KlDiv {
        t: TensorId,
        s: TensorId,
    },
    Dropout {
        x: TensorId,
        mask: Vec<bool>,
        keep_scale: F,
    },
}

impl<F: Real> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddBias(..) => "add_bias",
            Op::AddChanBias(..) => "add_chan_bias",
            Op::RowScale(..) => "row_scale",
            Op::Matmul(..) => "matmul",
            Op::MatmulNt(..) => "matmul_nt",
            Op::Transpose2(..) => "transpose2",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::AvgPool3(..) => "avg_pool3",
            Op::MaxPool3 { .. } => "max_pool3",
            Op::BilinearUpsample { .. } => "bilinear_upsample",
            Op::SumAll(..) => "sum_all",
            Op::ClassMean { .. } => "class_mean",
            Op::CrossEntropyMean { .. } => "cross_entropy",
            Op::KlDiv { .. } => "kl_div",
            Op::Dropout { .. } => "dropout",
        }
    }
}

#[derive(Debug)]
struct Node<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
    is_leaf_param: bool,
    /// Persistent accumulated gradient; populated for leaves only.
    grad: Option<Vec<F>>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    check_finite: bool,
    /// Verification hook: scales the named op's input gradients during
    /// backward so the finite-difference checker can prove it catches a
    /// wrong rule. Never set outside gradient verification.
    fault: Option<(&'static str, f64)>,
}

impl<F: Real> Tape<F> {
    pub fn new(profile: Profile) -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: profile.check_finite(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn inject_backward_fault(&mut self, op_name: &'static str, scale: f64) {
        self.fault = Some((op_name, scale));
    }

    pub fn value(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: TensorId) -> F {
        self.nodes[id.0].data[0]
    }

    /// Persistent accumulated gradient of a leaf, if any reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    pub fn to_tensor(&self, id: TensorId) -> Tensor<F> {
        Tensor::new(self.shape(id).to_vec(), self.value(id).to_vec()).expect("node is consistent")
    }

    // ── node plumbing ───────────────────────────────────────────────

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, needs_grad: bool) -> Result<TensorId> {
        if self.check_finite && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
            is_leaf_param: false,
            grad: None,
        });
        Ok(id)
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, t: &Tensor<F>) -> Result<TensorId> {
        let id = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)?;
        self.nodes[id.0].is_leaf_param = t.requires_grad;
        Ok(id)
    }

    pub fn leaf_values(&mut self, shape: Vec<usize>, data: Vec<F>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {shape:?} vs {} values", data.len()),
            });
        }
        let id = self.push(shape, data, Op::Leaf, requires_grad)?;
        self.nodes[id.0].is_leaf_param = requires_grad;
        Ok(id)
    }

    pub fn constant_scalar(&mut self, v: F) -> Result<TensorId> {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    // ── elementwise ─────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), data, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), data, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(self.shape(a).to_vec(), data, Op::Mul(a, b), needs)
    }

    pub fn scale(&mut self, x: TensorId, c: F) -> Result<TensorId> {
        let data = self.value(x).iter().map(|&v| v * c).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: TensorId, c: F) -> Result<TensorId> {
        let data = self.value(x).iter().map(|&v| v + c).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::AddScalar(x, c), needs)
    }

    pub fn add_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 2 || self.shape(b) != [xs[1]] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("{:?} + {:?}", xs, self.shape(b)),
            });
        }
        let (_r, c) = (xs[0], xs[1]);
        let bias = self.value(b);
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % c])
            .collect();
        let needs = self.needs(x) || self.needs(b);
        self.push(self.shape(x).to_vec(), data, Op::AddBias(x, b), needs)
    }

    pub fn add_chan_bias(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 3 || self.shape(b) != [xs[0]] {
            return Err(Error::ShapeMismatch {
                op: "add_chan_bias",
                detail: format!("{:?} + {:?}", xs, self.shape(b)),
            });
        }
        let plane = xs[1] * xs[2];
        let bias = self.value(b);
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i / plane])
            .collect();
        let needs = self.needs(x) || self.needs(b);
        self.push(self.shape(x).to_vec(), data, Op::AddChanBias(x, b), needs)
    }

    pub fn row_scale(&mut self, x: TensorId, s: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 2 || self.shape(s) != [xs[0]] {
            return Err(Error::ShapeMismatch {
                op: "row_scale",
                detail: format!("{:?} scaled by {:?}", xs, self.shape(s)),
            });
        }
        let c = xs[1];
        let sv = self.value(s);
        let data = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v * sv[i / c])
            .collect();
        let needs = self.needs(x) || self.needs(s);
        self.push(xs.to_vec(), data, Op::RowScale(x, s), needs)
    }

    // ── linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} × {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![F::zero(); m * n];
        kernels::matmul(self.value(a), self.value(b), m, k, n, &mut data);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], data, Op::Matmul(a, b), needs)
    }

    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("{sa:?} × {sb:?}ᵀ"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut data = vec![F::zero(); m * n];
        kernels::matmul_nt(self.value(a), self.value(b), m, k, n, &mut data);
        let needs = self.needs(a) || self.needs(b);
        self.push(vec![m, n], data, Op::MatmulNt(a, b), needs)
    }

    pub fn transpose2(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose2",
                detail: format!("{xs:?} is not rank 2"),
            });
        }
        let (r, c) = (xs[0], xs[1]);
        let src = self.value(x);
        let mut data = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(x);
        self.push(vec![c, r], data, Op::Transpose2(x), needs)
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape(x)),
            });
        }
        let data = self.value(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, data, Op::Reshape(x), needs)
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero parts".into()));
        }
        let rank = self.shape(parts[0]).len();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let mut out_shape = self.shape(parts[0]).to_vec();
        let mut axis_total = 0;
        for &p in parts {
            let ps = self.shape(p);
            if ps.len() != rank {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    detail: "rank mismatch".into(),
                });
            }
            for (d, (&a, &b)) in out_shape.iter().zip(ps).enumerate() {
                if d != axis && a != b {
                    return Err(Error::ShapeMismatch {
                        op: "concat",
                        detail: format!("axis {d}: {a} vs {b}"),
                    });
                }
            }
            axis_total += ps[axis];
        }
        out_shape[axis] = axis_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut data = vec![F::zero(); outer * axis_total * inner];
        for o in 0..outer {
            let mut offset = 0;
            for &p in parts {
                let alen = self.shape(p)[axis];
                let src = &self.value(p)[o * alen * inner..(o + 1) * alen * inner];
                let dst_start = o * axis_total * inner + offset * inner;
                data[dst_start..dst_start + alen * inner].copy_from_slice(src);
                offset += alen;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(
            out_shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        )
    }

    pub fn narrow(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::InvalidAxis { axis, rank: xs.len() });
        }
        if start + len > xs[axis] || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "narrow [{start}, {start}+{len}) out of extent {}",
                xs[axis]
            )));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut out_shape = xs.clone();
        out_shape[axis] = len;
        let mut data = vec![F::zero(); outer * len * inner];
        let src = self.value(x);
        for o in 0..outer {
            let src_start = o * xs[axis] * inner + start * inner;
            let dst_start = o * len * inner;
            data[dst_start..dst_start + len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        let needs = self.needs(x);
        self.push(out_shape, data, Op::Narrow { x, axis, start, len }, needs)
    }

    // ── nonlinear primitives ────────────────────────────────────────

    /// Numerically stable softmax along `axis` (max subtraction).
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::InvalidAxis { axis, rank: xs.len() });
        }
        if xs[axis] == 0 {
            return Err(Error::InvalidArgument("softmax over empty axis".into()));
        }
        let (outer, alen, inner) = axis_split(&xs, axis);
        let src = self.value(x);
        let mut data = vec![F::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * alen * inner + i;
                let mut maxv = F::neg_infinity();
                for a in 0..alen {
                    maxv = maxv.max(src[base + a * inner]);
                }
                let mut denom = F::zero();
                for a in 0..alen {
                    let e = (src[base + a * inner] - maxv).exp();
                    data[base + a * inner] = e;
                    denom = denom + e;
                }
                for a in 0..alen {
                    data[base + a * inner] = data[base + a * inner] / denom;
                }
            }
        }
        let needs = self.needs(x);
        self.push(xs, data, Op::Softmax { x, axis }, needs)
    }

    /// Last-axis layer normalization with affine gain and bias.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId, eps: F) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().ok_or(Error::InvalidAxis { axis: 0, rank: 0 })?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                detail: format!(
                    "gain {:?} / bias {:?} vs last extent {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            });
        }
        if eps <= F::zero() {
            return Err(Error::InvalidArgument("layer_norm eps must be > 0".into()));
        }
        let rows = self.value(x).len() / d;
        let src = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut data = vec![F::zero(); src.len()];
        let mut means = vec![F::zero(); rows];
        let mut rstds = vec![F::zero(); rows];
        let dn = F::from_f64(d as f64);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mut mean = F::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dn;
            let mut var = F::zero();
            for &v in row {
                let c = v - mean;
                var = var + c * c;
            }
            var = var / dn;
            let rstd = F::one() / (var + eps).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        self.push(
            xs,
            data,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            needs,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: TensorId) -> Result<TensorId> {
        let data = self.value(x).iter().map(|&v| gelu_fwd(v)).collect();
        let needs = self.needs(x);
        self.push(self.shape(x).to_vec(), data, Op::Gelu(x), needs)
    }

    // ── spatial primitives (chw layout) ─────────────────────────────

    pub fn conv2d(&mut self, x: TensorId, kernel: TensorId, stride: usize, padding: usize) -> Result<TensorId> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] || ks[2] != ks[3] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {xs:?}, kernel {ks:?}"),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        let (c_in, h, w) = (xs[0], xs[1], xs[2]);
        let (c_out, ksize) = (ks[0], ks[2]);
        if ksize > h + 2 * padding || ksize > w + 2 * padding {
            return Err(Error::InvalidArgument(format!(
                "kernel {ksize} larger than padded input {}×{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let oh = kernels::conv_out_extent(h, ksize, stride, padding);
        let ow = kernels::conv_out_extent(w, ksize, stride, padding);
        let mut data = vec![F::zero(); c_out * oh * ow];
        kernels::conv2d(
            self.value(x),
            self.value(kernel),
            c_in,
            h,
            w,
            c_out,
            ksize,
            stride,
            padding,
            &mut data,
        );
        let needs = self.needs(x) || self.needs(kernel);
        self.push(
            vec![c_out, oh, ow],
            data,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            },
            needs,
        )
    }

    pub fn depthwise_conv2d(&mut self, x: TensorId, kernel: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        let ks = self.shape(kernel);
        if xs.len() != 3 || ks.len() != 3 || ks[0] != xs[0] || ks[1] != ks[2] {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d",
                detail: format!("input {xs:?}, kernel {ks:?}"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let ksize = ks[1];
        let mut data = vec![F::zero(); c * h * w];
        kernels::depthwise_conv2d(self.value(x), self.value(kernel), c, h, w, ksize, &mut data);
        let needs = self.needs(x) || self.needs(kernel);
        self.push(xs.to_vec(), data, Op::DepthwiseConv2d { x, kernel }, needs)
    }

    pub fn avg_pool3(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "avg_pool3",
                detail: format!("{xs:?} is not chw"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut data = vec![F::zero(); c * h * w];
        kernels::avg_pool3(self.value(x), c, h, w, &mut data);
        let needs = self.needs(x);
        self.push(xs.to_vec(), data, Op::AvgPool3(x), needs)
    }

    pub fn max_pool3(&mut self, x: TensorId) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "max_pool3",
                detail: format!("{xs:?} is not chw"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut data = vec![F::zero(); c * h * w];
        let mut argmax = vec![0u32; c * h * w];
        kernels::max_pool3(self.value(x), c, h, w, &mut data, &mut argmax);
        let needs = self.needs(x);
        self.push(xs.to_vec(), data, Op::MaxPool3 { x, argmax }, needs)
    }

    pub fn bilinear_upsample(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "bilinear_upsample",
                detail: format!("{xs:?} is not chw"),
            });
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidArgument("upsample target must be ≥ 1".into()));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let mut data = vec![F::zero(); c * out_h * out_w];
        kernels::bilinear_upsample(self.value(x), c, h, w, out_h, out_w, &mut data);
        let needs = self.needs(x);
        self.push(
            vec![c, out_h, out_w],
            data,
            Op::BilinearUpsample { x, out_h, out_w },
            needs,
        )
    }

    // ── reductions and losses ───────────────────────────────────────

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let mut acc = F::zero();
        for &v in self.value(x) {
            acc = acc + v;
        }
        let needs = self.needs(x);
        self.push(vec![1], vec![acc], Op::SumAll(x), needs)
    }

    /// protos[c] = mean of feature rows whose label is c; rows for absent
    /// categories are zero and flagged in the returned presence mask.
    /// Ignore labels are encoded as any negative id.
    pub fn class_mean(&mut self, x: TensorId, labels: &[i32], classes: usize) -> Result<(TensorId, Vec<bool>)> {
        let xs = self.shape(x);
        if xs.len() != 2 || xs[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "class_mean",
                detail: format!("features {xs:?} vs {} labels", labels.len()),
            });
        }
        if classes == 0 {
            return Err(Error::InvalidArgument("class_mean needs ≥ 1 category".into()));
        }
        let d = xs[1];
        let mut counts = vec![0u32; classes];
        for &l in labels {
            if l >= 0 {
                let c = l as usize;
                if c >= classes {
                    return Err(Error::InvalidArgument(format!(
                        "label {c} out of range for {classes} categories"
                    )));
                }
                counts[c] += 1;
            }
        }
        let src = self.value(x);
        let mut data = vec![F::zero(); classes * d];
        for (j, &l) in labels.iter().enumerate() {
            if l < 0 {
                continue;
            }
            let c = l as usize;
            let row = &src[j * d..(j + 1) * d];
            let dst = &mut data[c * d..(c + 1) * d];
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = *o + v;
            }
        }
        for c in 0..classes {
            if counts[c] > 0 {
                let n = F::from_f64(counts[c] as f64);
                for v in &mut data[c * d..(c + 1) * d] {
                    *v = *v / n;
                }
            }
        }
        let present = counts.iter().map(|&n| n > 0).collect();
        let needs = self.needs(x);
        let id = self.push(
            vec![classes, d],
            data,
            Op::ClassMean {
                x,
                labels: labels.to_vec(),
                counts,
            },
            needs,
        )?;
        Ok((id, present))
    }

    /// Mean cross-entropy over non-ignored pixels of logits [C,H,W]
    /// against integer labels [H,W].
    pub fn cross_entropy_mean(&mut self, logits: TensorId, labels: &[i32], ignore_id: i32) -> Result<TensorId> {
        let ls = self.shape(logits);
        if ls.len() != 3 {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {ls:?} are not [C,H,W]"),
            });
        }
        let (c, h, w) = (ls[0], ls[1], ls[2]);
        if labels.len() != h * w {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("{} labels vs {h}×{w} logits", labels.len()),
            });
        }
        let src = self.value(logits);
        let plane = h * w;
        let mut probs = vec![F::zero(); c * plane];
        let mut loss = F::zero();
        let mut n_valid = 0usize;
        for p in 0..plane {
            let mut maxv = F::neg_infinity();
            for ch in 0..c {
                maxv = maxv.max(src[ch * plane + p]);
            }
            let mut denom = F::zero();
            for ch in 0..c {
                let e = (src[ch * plane + p] - maxv).exp();
                probs[ch * plane + p] = e;
                denom = denom + e;
            }
            for ch in 0..c {
                probs[ch * plane + p] = probs[ch * plane + p] / denom;
            }
            let l = labels[p];
            if l == ignore_id || l < 0 {
                continue;
            }
            let li = l as usize;
            if li >= c {
                return Err(Error::InvalidArgument(format!(
                    "label {li} out of range for {c} categories"
                )));
            }
            loss = loss - probs[li * plane + p].ln();
            n_valid += 1;
        }
        if n_valid == 0 {
            return Err(Error::InvalidArgument("all pixels ignored".into()));
        }
        loss = loss / F::from_f64(n_valid as f64);
        let needs = self.needs(logits);
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropyMean {
                logits,
                labels: labels.to_vec(),
                probs,
                n_valid,
            },
            needs,
        )
    }

    /// KL(t ‖ s) = Σ t·(ln t − ln s) over the flattened distributions.
    /// Inputs must be nonnegative and sum to 1 within 1e-6; the gradient
    /// flows to the student side only (teacher detached).
    pub fn kl_div(&mut self, t: TensorId, s: TensorId) -> Result<TensorId> {
        if self.value(t).len() != self.value(s).len() {
            return Err(Error::ShapeMismatch {
                op: "kl_div",
                detail: format!("{:?} vs {:?}", self.shape(t), self.shape(s)),
            });
        }
        for (name, id) in [("teacher", t), ("student", s)] {
            let mut sum = 0.0f64;
            for &v in self.value(id) {
                if v < F::zero() {
                    return Err(Error::InvalidArgument(format!(
                        "kl_div {name} input has negative entries"
                    )));
                }
                sum += v.as_f64();
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "kl_div {name} input sums to {sum}, not 1"
                )));
            }
        }
        let mut acc = F::zero();
        for (&tv, &sv) in self.value(t).iter().zip(self.value(s)) {
            if tv > F::zero() {
                acc = acc + tv * (tv.ln() - sv.ln());
            }
        }
        let needs = self.needs(s);
        self.push(vec![1], vec![acc], Op::KlDiv { t, s }, needs)
    }

    /// Inverted dropout with a caller-supplied mask of kept positions.
    pub fn dropout(&mut self, x: TensorId, mask: Vec<bool>, rate: f64) -> Result<TensorId> {
        if mask.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch {
                op: "dropout",
                detail: format!("mask {} vs {} values", mask.len(), self.value(x).len()),
            });
        }
        let keep_scale = F::from_f64(1.0 / (1.0 - rate));
        let data = self
            .value(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * keep_scale } else { F::zero() })
            .collect();
        let needs = self.needs(x);
        self.push(
            self.shape(x).to_vec(),
            data,
            Op::Dropout { x, mask, keep_scale },
            needs,
        )
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Accumulates into leaf gradients;
    /// calling twice doubles them unless [`Tape::zero_grads`] intervenes.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut scratch: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        scratch[loss.0] = Some(vec![F::one()]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = scratch[i].take() else { continue };
            self.propagate(i, &gy, &mut scratch);
            if self.nodes[i].is_leaf_param {
                let node = &mut self.nodes[i];
                let acc = node.grad.get_or_insert_with(|| vec![F::zero(); node.data.len()]);
                for (a, g) in acc.iter_mut().zip(&gy) {
                    *a = *a + *g;
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, scratch: &mut [Option<Vec<F>>], id: TensorId, delta: impl Iterator<Item = F>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let buf = scratch[id.0].get_or_insert_with(|| vec![F::zero(); self.nodes[id.0].data.len()]);
        for (slot, d) in buf.iter_mut().zip(delta) {
            *slot = *slot + d;
        }
    }

    fn fault_scale(&self, op_name: &'static str) -> F {
        match &self.fault {
            Some((name, scale)) if *name == op_name => F::from_f64(*scale),
            _ => F::one(),
        }
    }

    fn propagate(&self, i: usize, gy: &[F], scratch: &mut [Option<Vec<F>>]) {
        // Local copies of cached values sidestep borrow conflicts.
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(scratch, *a, gy.iter().copied());
                self.accumulate(scratch, *b, gy.iter().copied());
            }
            Op::Sub(a, b) => {
                self.accumulate(scratch, *a, gy.iter().copied());
                self.accumulate(scratch, *b, gy.iter().map(|&g| F::zero() - g));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].data;
                let bv = &self.nodes[b.0].data;
                self.accumulate(scratch, *a, gy.iter().zip(bv).map(|(&g, &v)| g * v));
                self.accumulate(scratch, *b, gy.iter().zip(av).map(|(&g, &v)| g * v));
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(scratch, *x, gy.iter().map(|&g| g * c));
            }
            Op::AddScalar(x, _) => {
                self.accumulate(scratch, *x, gy.iter().copied());
            }
            Op::AddBias(x, b) => {
                self.accumulate(scratch, *x, gy.iter().copied());
                let c = node.shape[1];
                let mut db = vec![F::zero(); c];
                for (idx, &g) in gy.iter().enumerate() {
                    db[idx % c] = db[idx % c] + g;
                }
                self.accumulate(scratch, *b, db.into_iter());
            }
            Op::AddChanBias(x, b) => {
                self.accumulate(scratch, *x, gy.iter().copied());
                let plane = node.shape[1] * node.shape[2];
                let mut db = vec![F::zero(); node.shape[0]];
                for (idx, &g) in gy.iter().enumerate() {
                    db[idx / plane] = db[idx / plane] + g;
                }
                self.accumulate(scratch, *b, db.into_iter());
            }
            Op::RowScale(x, s) => {
                let c = node.shape[1];
                let sv = &self.nodes[s.0].data;
                let xv = &self.nodes[x.0].data;
                self.accumulate(
                    scratch,
                    *x,
                    gy.iter().enumerate().map(|(idx, &g)| g * sv[idx / c]),
                );
                let rows = node.shape[0];
                let mut ds = vec![F::zero(); rows];
                for r in 0..rows {
                    let mut acc = F::zero();
                    for j in 0..c {
                        acc = acc + gy[r * c + j] * xv[r * c + j];
                    }
                    ds[r] = acc;
                }
                self.accumulate(scratch, *s, ds.into_iter());
            }
            Op::Matmul(a, b) => {
                let fs = self.fault_scale("matmul");
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = self.nodes[a.0].shape[1];
                // dA = dC · Bᵀ
                let mut da = vec![F::zero(); m * k];
                kernels::matmul_nt(gy, &self.nodes[b.0].data, m, n, k, &mut da);
                self.accumulate(scratch, *a, da.into_iter().map(|v| v * fs));
                // dB = Aᵀ · dC
                let mut db = vec![F::zero(); k * n];
                kernels::matmul_tn(&self.nodes[a.0].data, gy, m, k, n, &mut db);
                self.accumulate(scratch, *b, db.into_iter().map(|v| v * fs));
            }
            Op::MatmulNt(a, b) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let k = self.nodes[a.0].shape[1];
                // C = A·Bᵀ → dA = dC·B, dB = dCᵀ·A
                let mut da = vec![F::zero(); m * k];
                kernels::matmul(gy, &self.nodes[b.0].data, m, n, k, &mut da);
                self.accumulate(scratch, *a, da.into_iter());
                let mut db = vec![F::zero(); n * k];
                kernels::matmul_tn(gy, &self.nodes[a.0].data, m, n, k, &mut db);
                self.accumulate(scratch, *b, db.into_iter());
            }
            Op::Transpose2(x) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let mut dx = vec![F::zero(); r * c];
                for i2 in 0..r {
                    for j in 0..c {
                        dx[j * r + i2] = gy[i2 * c + j];
                    }
                }
                self.accumulate(scratch, *x, dx.into_iter());
            }
            Op::Reshape(x) => {
                self.accumulate(scratch, *x, gy.iter().copied());
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = &node.shape;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[axis];
                let mut offset = 0;
                for &p in parts {
                    let alen = self.nodes[p.0].shape[axis];
                    let mut dp = vec![F::zero(); self.nodes[p.0].data.len()];
                    for o in 0..outer {
                        let src_start = o * total * inner + offset * inner;
                        let dst_start = o * alen * inner;
                        dp[dst_start..dst_start + alen * inner]
                            .copy_from_slice(&gy[src_start..src_start + alen * inner]);
                    }
                    self.accumulate(scratch, p, dp.into_iter());
                    offset += alen;
                }
            }
            Op::Narrow { x, axis, start, len } => {
                let xs = &self.nodes[x.0].shape;
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut dx = vec![F::zero(); self.nodes[x.0].data.len()];
                for o in 0..outer {
                    let dst_start = o * xs[*axis] * inner + start * inner;
                    let src_start = o * len * inner;
                    dx[dst_start..dst_start + len * inner]
                        .copy_from_slice(&gy[src_start..src_start + len * inner]);
                }
                self.accumulate(scratch, *x, dx.into_iter());
            }
            Op::Softmax { x, axis } => {
                let y = &node.data;
                let (outer, alen, inner) = axis_split(&node.shape, *axis);
                let mut dx = vec![F::zero(); y.len()];
                for o in 0..outer {
                    for i2 in 0..inner {
                        let base = o * alen * inner + i2;
                        let mut dot = F::zero();
                        for a in 0..alen {
                            let idx = base + a * inner;
                            dot = dot + gy[idx] * y[idx];
                        }
                        for a in 0..alen {
                            let idx = base + a * inner;
                            dx[idx] = y[idx] * (gy[idx] - dot);
                        }
                    }
                }
                self.accumulate(scratch, *x, dx.into_iter());
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let d = *node.shape.last().expect("rank ≥ 1");
                let rows = node.data.len() / d;
                let xv = &self.nodes[x.0].data;
                let gv = &self.nodes[gain.0].data;
                let dn = F::from_f64(d as f64);
                let mut dx = vec![F::zero(); xv.len()];
                let mut dgain = vec![F::zero(); d];
                let mut dbias = vec![F::zero(); d];
                for r in 0..rows {
                    let (m, rs) = (mean[r], rstd[r]);
                    // h = dy ⊙ gain; dx = rstd/D · (D·h − Σh − x̂·Σ(h⊙x̂))
                    let mut sum_h = F::zero();
                    let mut sum_hx = F::zero();
                    for j in 0..d {
                        let idx = r * d + j;
                        let xhat = (xv[idx] - m) * rs;
                        let h = gy[idx] * gv[j];
                        sum_h = sum_h + h;
                        sum_hx = sum_hx + h * xhat;
                        dgain[j] = dgain[j] + gy[idx] * xhat;
                        dbias[j] = dbias[j] + gy[idx];
                    }
                    for j in 0..d {
                        let idx = r * d + j;
                        let xhat = (xv[idx] - m) * rs;
                        let h = gy[idx] * gv[j];
                        dx[idx] = rs / dn * (dn * h - sum_h - xhat * sum_hx);
                    }
                }
                self.accumulate(scratch, *x, dx.into_iter());
                self.accumulate(scratch, *gain, dgain.into_iter());
                self.accumulate(scratch, *bias, dbias.into_iter());
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x.0].data;
                self.accumulate(
                    scratch,
                    *x,
                    gy.iter().zip(xv).map(|(&g, &v)| g * gelu_grad(v)),
                );
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
            } => {
                let xs = &self.nodes[x.0].shape;
                let ks = &self.nodes[kernel.0].shape;
                let mut dx = vec![F::zero(); self.nodes[x.0].data.len()];
                let mut dk = vec![F::zero(); self.nodes[kernel.0].data.len()];
                kernels::conv2d_backward(
                    &self.nodes[x.0].data,
                    &self.nodes[kernel.0].data,
                    gy,
                    xs[0],
                    xs[1],
                    xs[2],
                    ks[0],
                    ks[2],
                    *stride,
                    *padding,
                    &mut dx,
                    &mut dk,
                );
                self.accumulate(scratch, *x, dx.into_iter());
                self.accumulate(scratch, *kernel, dk.into_iter());
            }
            Op::DepthwiseConv2d { x, kernel } => {
                let xs = &self.nodes[x.0].shape;
                let ks = &self.nodes[kernel.0].shape;
                let mut dx = vec![F::zero(); self.nodes[x.0].data.len()];
                let mut dk = vec![F::zero(); self.nodes[kernel.0].data.len()];
                kernels::depthwise_conv2d_backward(
                    &self.nodes[x.0].data,
                    &self.nodes[kernel.0].data,
                    gy,
                    xs[0],
                    xs[1],
                    xs[2],
                    ks[1],
                    &mut dx,
                    &mut dk,
                );
                self.accumulate(scratch, *x, dx.into_iter());
                self.accumulate(scratch, *kernel, dk.into_iter());
            }
            Op::AvgPool3(x) => {
                let xs = &self.nodes[x.0].shape;
                let mut dx = vec![F::zero(); self.nodes[x.0].data.len()];
                kernels::avg_pool3_backward(gy, xs[0], xs[1], xs[2], &mut dx);
                self.accumulate(scratch, *x, dx.into_iter());
            }
            Op::MaxPool3 { x, argmax } => {
                let mut dx = vec![F::zero(); self.nodes[x.0].data.len()];
                kernels::max_pool3_backward(gy, argmax, &mut dx);
                self.accumulate(scratch, *x, dx.into_iter());
            }
            Op::BilinearUpsample { x, out_h, out_w } => {
                let xs = &self.nodes[x.0].shape;
                let mut dx = vec![F::zero(); self.nodes[x.0].data.len()];
                kernels::bilinear_upsample_backward(gy, xs[0], xs[1], xs[2], *out_h, *out_w, &mut dx);
                self.accumulate(scratch, *x, dx.into_iter());
            }
            Op::SumAll(x) => {
                let g = gy[0];
                let n = self.nodes[x.0].data.len();
                self.accumulate(scratch, *x, std::iter::repeat(g).take(n));
            }
            Op::ClassMean { x, labels, counts } => {
                let d = node.shape[1];
                let mut dx = vec![F::zero(); self.nodes[x.0].data.len()];
                for (j, &l) in labels.iter().enumerate() {
                    if l < 0 {
                        continue;
                    }
                    let c = l as usize;
                    let inv = F::one() / F::from_f64(counts[c] as f64);
                    for k2 in 0..d {
                        dx[j * d + k2] = gy[c * d + k2] * inv;
                    }
                }
                self.accumulate(scratch, *x, dx.into_iter());
            }
            Op::CrossEntropyMean {
                logits,
                labels,
                probs,
                n_valid,
            } => {
                let g = gy[0] / F::from_f64(*n_valid as f64);
                let c = self.nodes[logits.0].shape[0];
                let plane = labels.len();
                let mut dl = vec![F::zero(); c * plane];
                for (p, &l) in labels.iter().enumerate() {
                    if l < 0 {
                        continue;
                    }
                    let li = l as usize;
                    if li >= c {
                        continue;
                    }
                    for ch in 0..c {
                        let idx = ch * plane + p;
                        let one_hot = if ch == li { F::one() } else { F::zero() };
                        dl[idx] = (probs[idx] - one_hot) * g;
                    }
                }
                self.accumulate(scratch, *logits, dl.into_iter());
            }
            Op::KlDiv { t, s } => {
                // Teacher detached; d/ds = −t/s.
                let g = gy[0];
                let tv = &self.nodes[t.0].data;
                let sv = &self.nodes[s.0].data;
                self.accumulate(
                    scratch,
                    *s,
                    tv.iter()
                        .zip(sv)
                        .map(|(&tt, &ss)| F::zero() - g * tt / ss),
                );
            }
            Op::Dropout { x, mask, keep_scale } => {
                let ks = *keep_scale;
                self.accumulate(
                    scratch,
                    *x,
                    gy.iter()
                        .zip(mask)
                        .map(|(&g, &keep)| if keep { g * ks } else { F::zero() }),
                );
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_fwd<F: Real>(x: F) -> F {
    // 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))
    let c = F::from_f64(0.7978845608028654);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    half * x * (F::one() + u.tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::from_f64(0.7978845608028654);
    let a = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let three = F::from_f64(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * a * x * x)
}
