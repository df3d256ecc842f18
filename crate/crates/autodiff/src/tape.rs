//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever the
//! backward rule needs. Nodes only reference earlier nodes, so the tape is
//! topologically ordered by construction and `backward` is a single reverse
//! sweep.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::tensor::{axis_split, numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// User-supplied backward rule: `(inputs, output, output_grad) -> input grads`.
pub type CustomBackward =
    Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync + 'static>;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { xs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    SumAxes(Var),
    Broadcast(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Linear { x: Var, w: Var, b: Option<Var> },
    Gather { x: Var, index: Vec<usize> },
    CosineRows { a: Var, b: Var, eps: f64 },
    Custom { inputs: Vec<Var>, backward: CustomBackward },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.len())
            .field("consumed", &self.consumed)
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients or is unreachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Like [`get`](Self::get) but unreachable nodes yield zeros of `shape`.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape.to_vec()))
    }
}

fn check_axis(op: &'static str, axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        return Err(TensorError::InvalidAxis { op, axis, rank });
    }
    Ok(())
}

impl Tape {
    /// A new tape. Finite-value assertions are on in debug builds.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Overrides the per-op finite-value assertion.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// An input excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.check_finite && !value.all_finite() {
            return Err(TensorError::invalid(name, "produced a non-finite value"));
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_map(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push(name, value, op, &[a, b])
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(vx.shape().to_vec(), data);
        self.push(name, value, op, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("scale", x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.map("add_scalar", x, |v| v + s, Op::AddScalar(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map("log", x, f64::ln, Op::Log(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, kernels::gelu, Op::Gelu(x))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), &[a, b])
    }

    /// Batched matrix product `[B,m,k] · [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; bt * m * n];
        for i in 0..bt {
            kernels::matmul_nn_acc(
                &va[i * m * k..(i + 1) * m * k],
                &vb[i * k * n..(i + 1) * k * n],
                &mut data[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push("bmm", Tensor::from_parts(vec![bt, m, n], data), Op::BatchMatMul(a, b), &[a, b])
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("softmax", axis, shape.len())?;
        let (o, l, i) = axis_split(&shape, axis);
        let data = kernels::softmax(self.value(x).data(), o, l, i);
        self.push("softmax", Tensor::from_parts(shape, data), Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("log_softmax", axis, shape.len())?;
        let (o, l, i) = axis_split(&shape, axis);
        let data = kernels::log_softmax(self.value(x).data(), o, l, i);
        self.push("log_softmax", Tensor::from_parts(shape, data), Op::LogSoftmax { x, axis }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::invalid("permute", format!("{perm:?} is not a permutation of rank {}", shape.len())));
        }
        let (out_shape, data) = kernels::permute(self.value(x).data(), &shape, perm);
        self.push(
            "permute",
            Tensor::from_parts(out_shape, data),
            Op::Permute { x, perm: perm.to_vec() },
            &[x],
        )
    }

    /// Swaps the two axes of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", axis, base.len())?;
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        self.push(
            "concat",
            Tensor::from_parts(out_shape, data),
            Op::Concat { xs: xs.to_vec(), axis },
            xs,
        )
    }

    /// Selects `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", axis, shape.len())?;
        if len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("range {start}..{} exceeds extent {}", start + len, shape[axis]),
            ));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * ext + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push("slice", Tensor::from_parts(out_shape, data), Op::Slice { x, axis, start }, &[x])
    }

    /// Sums over `axes`, keeping each reduced axis with extent 1.
    pub fn sum_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        for &a in axes {
            check_axis("sum_axes", a, shape.len())?;
        }
        let (out_shape, data) = kernels::reduce_sum(self.value(x).data(), &shape, axes);
        self.push(
            "sum_axes",
            Tensor::from_parts(out_shape, data),
            Op::SumAxes(x),
            &[x],
        )
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        let s = self.sum_axes(x, &axes)?;
        self.reshape(s, &[])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Expands axes of extent 1 to `shape` (ranks must match).
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.shape(x).to_vec();
        let ok = src.len() == shape.len()
            && src.iter().zip(shape).all(|(&s, &t)| s == t || s == 1);
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: src,
                rhs: shape.to_vec(),
            });
        }
        let data = kernels::broadcast(self.value(x).data(), &src, shape);
        self.push("broadcast_to", Tensor::from_parts(shape.to_vec(), data), Op::Broadcast(x), &[x])
    }

    /// Layer normalization over the last axis followed by an affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| TensorError::invalid("layer_norm", "rank-0 input"))?;
        for p in [gain, bias] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (y, xhat, rstd) = kernels::layer_norm(
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
            d,
        );
        self.push(
            "layer_norm",
            Tensor::from_parts(shape, y),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            &[x, gain, bias],
        )
    }

    /// Affine map over the last axis: `[..., Cin] · [Cin, Cout] + [Cout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let cin = *shape.last().unwrap_or(&0);
        if ws.len() != 2 || ws[0] != cin {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: shape,
                rhs: ws,
            });
        }
        let cout = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    lhs: ws,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let rows = numel(&shape) / cin;
        let mut data = vec![0.0; rows * cout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in data.chunks_mut(cout) {
                row.copy_from_slice(bv);
            }
        }
        kernels::matmul_nn_acc(self.value(x).data(), self.value(w).data(), &mut data, rows, cin, cout);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = cout;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push("linear", Tensor::from_parts(out_shape, data), Op::Linear { x, w, b }, &parents)
    }

    /// Picks `x[r, index[r]]` from a rank-2 tensor, giving `[R]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != index.len() {
            return Err(TensorError::ShapeMismatch {
                op: "gather_rows",
                lhs: shape,
                rhs: vec![index.len()],
            });
        }
        let cols = shape[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= cols) {
            return Err(TensorError::invalid("gather_rows", format!("index {bad} out of range {cols}")));
        }
        let src = self.value(x).data();
        let data = index.iter().enumerate().map(|(r, &c)| src[r * cols + c]).collect();
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![index.len()], data),
            Op::Gather { x, index: index.to_vec() },
            &[x],
        )
    }

    /// Row-wise cosine similarity of two `[R, D]` tensors; each norm is
    /// clamped below at `eps`.
    pub fn cosine_rows(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        self.same_shape("cosine_rows", a, b)?;
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::invalid("cosine_rows", format!("expected rank 2, got {shape:?}")));
        }
        let d = shape[1];
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let data = va
            .chunks(d)
            .zip(vb.chunks(d))
            .map(|(ra, rb)| {
                let na = kernels::dot(ra, ra).sqrt().max(eps);
                let nb = kernels::dot(rb, rb).sqrt().max(eps);
                kernels::dot(ra, rb) / (na * nb)
            })
            .collect();
        self.push(
            "cosine_rows",
            Tensor::from_parts(vec![shape[0]], data),
            Op::CosineRows { a, b, eps },
            &[a, b],
        )
    }

    /// Records an operation with a caller-supplied backward rule.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor,
        backward: impl Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor> + Send + Sync + 'static,
    ) -> Result<Var> {
        self.push(
            "custom",
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward: Box::new(backward),
            },
            inputs,
        )
    }

    /// Reverse sweep from a one-element `loss`. The tape is consumed: a
    /// second call, or recording further ops, is rejected.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(TensorError::NotScalar(loss_value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            // only leaf gradients are reported
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let shp = |v: Var| nodes[v.0].value.shape();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let needs = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    acc(*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect());
                }
                if needs(*b) {
                    acc(*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    acc(*a, g.iter().zip(vb).map(|(g, y)| g / y).collect());
                }
                if needs(*b) {
                    acc(
                        *b,
                        g.iter()
                            .zip(va.iter().zip(vb))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    );
                }
            }
            Op::Scale(x, s) => acc(*x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(x) => acc(*x, g.to_vec()),
            Op::Exp(x) => acc(*x, g.iter().zip(node.value.data()).map(|(g, y)| g * y).collect()),
            Op::Log(x) => acc(*x, g.iter().zip(val(*x)).map(|(g, x)| g / x).collect()),
            Op::Relu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            ),
            Op::Gelu(x) => acc(
                *x,
                g.iter().zip(val(*x)).map(|(g, &x)| g * kernels::gelu_grad(x)).collect(),
            ),
            Op::MatMul(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if needs(*a) {
                    acc(*a, kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if needs(*b) {
                    acc(*b, kernels::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (shp(*a), shp(*b));
                let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (va, vb) = (val(*a), val(*b));
                if needs(*a) {
                    let mut da = Vec::with_capacity(bt * m * k);
                    for i in 0..bt {
                        da.extend(kernels::matmul_nt(
                            &g[i * m * n..(i + 1) * m * n],
                            &vb[i * k * n..(i + 1) * k * n],
                            m,
                            n,
                            k,
                        ));
                    }
                    acc(*a, da);
                }
                if needs(*b) {
                    let mut db = Vec::with_capacity(bt * k * n);
                    for i in 0..bt {
                        db.extend(kernels::matmul_tn(
                            &va[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    acc(*b, db);
                }
            }
            Op::Softmax { x, axis } => {
                let (o, l, i) = axis_split(node.value.shape(), *axis);
                acc(*x, kernels::softmax_backward(node.value.data(), g, o, l, i));
            }
            Op::LogSoftmax { x, axis } => {
                let (o, l, i) = axis_split(node.value.shape(), *axis);
                acc(*x, kernels::log_softmax_backward(node.value.data(), g, o, l, i));
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (_, d) = kernels::permute(g, node.value.shape(), &inverse);
                acc(*x, d);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let ext = shp(v)[*axis];
                    if needs(v) {
                        let mut d = Vec::with_capacity(outer * ext * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            d.extend_from_slice(&g[from..from + ext * inner]);
                        }
                        acc(v, d);
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = axis_split(shp(*x), *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    let to = (o * ext + start) * inner;
                    d[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, d);
            }
            Op::SumAxes(x) => {
                acc(*x, kernels::broadcast(g, node.value.shape(), shp(*x)));
            }
            Op::Broadcast(x) => {
                let src = shp(*x);
                let axes: Vec<usize> = (0..src.len())
                    .filter(|&a| src[a] == 1 && node.value.shape()[a] != 1)
                    .collect();
                let (_, d) = kernels::reduce_sum(g, node.value.shape(), &axes);
                acc(*x, d);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *shp(*x).last().unwrap();
                let (dx, dg, db) = kernels::layer_norm_backward(xhat, rstd, val(*gain), g, d);
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Linear { x, w, b } => {
                let ws = shp(*w);
                let (cin, cout) = (ws[0], ws[1]);
                let rows = g.len() / cout;
                if needs(*x) {
                    acc(*x, kernels::matmul_nt(g, val(*w), rows, cout, cin));
                }
                if needs(*w) {
                    acc(*w, kernels::matmul_tn(val(*x), g, rows, cin, cout));
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut db = vec![0.0; cout];
                        for row in g.chunks(cout) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        acc(*b, db);
                    }
                }
            }
            Op::Gather { x, index } => {
                let cols = shp(*x)[1];
                let mut d = vec![0.0; index.len() * cols];
                for (r, &c) in index.iter().enumerate() {
                    d[r * cols + c] = g[r];
                }
                acc(*x, d);
            }
            Op::CosineRows { a, b, eps } => {
                let d = shp(*a)[1];
                let (va, vb) = (val(*a), val(*b));
                let mut da = vec![0.0; va.len()];
                let mut db = vec![0.0; vb.len()];
                for (r, &gr) in g.iter().enumerate() {
                    let ra = &va[r * d..(r + 1) * d];
                    let rb = &vb[r * d..(r + 1) * d];
                    let la = kernels::dot(ra, ra).sqrt();
                    let lb = kernels::dot(rb, rb).sqrt();
                    let (na, nb) = (la.max(*eps), lb.max(*eps));
                    let c = node.value.data()[r];
                    // the clamped norm is constant below eps
                    let ka = if la > *eps { c / (na * na) } else { 0.0 };
                    let kb = if lb > *eps { c / (nb * nb) } else { 0.0 };
                    let inv = 1.0 / (na * nb);
                    for j in 0..d {
                        da[r * d + j] = gr * (rb[j] * inv - ka * ra[j]);
                        db[r * d + j] = gr * (ra[j] * inv - kb * rb[j]);
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Custom { inputs, backward } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let gt = Tensor::from_parts(node.value.shape().to_vec(), g.to_vec());
                let outs = backward(&ins, &node.value, &gt);
                for (v, d) in inputs.iter().zip(outs) {
                    acc(*v, d.into_data());
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let y = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 3., 4.]);
    }

    #[test]
    fn orthogonal_rows() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[1, 2], &[1., 0.]));
        let b = tape.constant(t(&[2, 1], &[0., 1.]));
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([3]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::from_vec(vec![1000.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data()[0], 1.0);
        assert!(tape.value(y).data()[1] >= 0.0 && tape.value(y).data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rejects_bad_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros([3]));
        assert!(matches!(tape.softmax(x, 1), Err(TensorError::InvalidAxis { .. })));
    }

    #[test]
    fn layer_norm_constant_row_maps_to_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full([1, 4], 5.0));
        let g = tape.constant(Tensor::ones([4]));
        let b = tape.constant(Tensor::zeros([4]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_two_values_closed_form() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1., 3.]));
        let g = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::zeros([2]));
        let y = tape.layer_norm(x, g, b).unwrap();
        // mean 2, variance 1
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        let v = tape.value(y).data();
        assert!((v[0] + expect).abs() < 1e-15 && (v[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn linear_identity_and_summation() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec((0..12).map(f64::from).collect()).reshape([2, 2, 3]).unwrap());
        let w = tape.constant(Tensor::eye(3));
        let b = tape.constant(Tensor::zeros([3]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let w = tape.constant(Tensor::ones([3, 1]));
        let y = tape.linear(x, w, None).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 1]);
        assert_eq!(tape.value(y).data(), &[3., 12., 21., 30.]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1., -2., 3.]).reshape([3, 1]).unwrap());
        let s = tape.sum_all(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn backward_of_half_square_is_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[0.5, -1.5, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        let l = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), tape.value(x));
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NotScalar(_))));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(TensorError::TapeConsumed)));
        assert!(matches!(tape.add(x, x), Err(TensorError::TapeConsumed)));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2]));
        let c = tape.constant(Tensor::ones([2]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum_all(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn finite_check_reports_op() {
        let mut tape = Tape::new().with_finite_checks(true);
        let x = tape.constant(Tensor::zeros([1]));
        let err = tape.log(x).unwrap_err().to_string();
        assert!(err.contains("log"), "{err}");
        let mut tape = Tape::new().with_finite_checks(false);
        let x = tape.constant(Tensor::zeros([1]));
        assert!(tape.log(x).is_ok());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1., 2.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 3., 4., 2., 5., 6.]);
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s), tape.value(b));
    }

    #[test]
    fn cosine_rows_values() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1., 0., 1., 1.]));
        let b = tape.constant(t(&[2, 2], &[0., 2., -2., -2.]));
        let c = tape.cosine_rows(a, b, 1e-12).unwrap();
        let v = tape.value(c).data();
        assert!(v[0].abs() < 1e-15);
        assert!((v[1] + 1.0).abs() < 1e-15);
    }
}
