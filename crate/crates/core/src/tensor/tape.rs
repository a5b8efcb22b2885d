//! Define-by-run tape for reverse-mode differentiation.
//!
//! Every value produced during a forward pass lives in the tape arena and is
//! addressed by a [`Var`]. When gradients are enabled each op is recorded
//! together with whatever it needs for its backward rule; `backward` replays
//! the records in reverse exactly once and accumulates parameter gradients
//! into the owning [`ParamStore`].

use super::array::{ParamId, ParamStore, Tensor};
use super::error::{shape_err, Result, TensorError};
use super::kernels::{self, Conv2dGeom, PoolGeom};
use super::scalar::Scalar;

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Differentiable op kinds supported by the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Mul,
    MatMul,
    Conv2d,
    AvgPool2d,
    MaxPool2d,
    Relu,
    Linear,
    LogSoftmax,
    Softmax,
    L2Normalize,
    CrossEntropy,
    Mean,
    Sum,
    Scale,
    Concat,
    BilinearResize,
    Reshape,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::Add,
        OpKind::Mul,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::AvgPool2d,
        OpKind::MaxPool2d,
        OpKind::Relu,
        OpKind::Linear,
        OpKind::LogSoftmax,
        OpKind::Softmax,
        OpKind::L2Normalize,
        OpKind::CrossEntropy,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Scale,
        OpKind::Concat,
        OpKind::BilinearResize,
        OpKind::Reshape,
    ];
}

/// Cross-entropy target: hard class indices or a soft distribution per row.
#[derive(Clone, Debug)]
pub enum Target<F: Scalar> {
    Classes(Vec<usize>),
    Soft(Tensor<F>),
}

#[derive(Debug)]
enum Op<F: Scalar> {
    Constant,
    Param(ParamId),
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
    },
    AvgPool {
        x: Var,
        geom: PoolGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Relu {
        x: Var,
    },
    LogSoftmax {
        x: Var,
        cols: usize,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    L2Normalize {
        x: Var,
        cols: usize,
        norms: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        target: Target<F>,
        cols: usize,
    },
    Mean {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Scale {
        x: Var,
        factor: F,
    },
    Concat {
        parts: Vec<Var>,
        axis_len: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    BilinearResize {
        x: Var,
        planes: usize,
        in_hw: (usize, usize),
        out_hw: (usize, usize),
    },
    Reshape {
        x: Var,
    },
}

impl<F: Scalar> Op<F> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Constant | Op::Param(_) => return None,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Linear { .. } => OpKind::Linear,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AvgPool { .. } => OpKind::AvgPool2d,
            Op::MaxPool { .. } => OpKind::MaxPool2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mean { .. } => OpKind::Mean,
            Op::Sum { .. } => OpKind::Sum,
            Op::Scale { .. } => OpKind::Scale,
            Op::Concat { .. } => OpKind::Concat,
            Op::BilinearResize { .. } => OpKind::BilinearResize,
            Op::Reshape { .. } => OpKind::Reshape,
        })
    }
}

#[derive(Debug)]
struct Node<F: Scalar> {
    shape: Vec<usize>,
    data: Vec<F>,
    op: Op<F>,
}

/// Outcome of a backward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BackwardReport {
    /// Recorded ops replayed (each exactly once).
    pub ops_visited: usize,
    /// Distinct parameters that received a gradient.
    pub params_reached: usize,
    /// Set when the loss does not depend on any parameter; their grads are zeroed.
    pub detached: bool,
}

#[derive(Debug)]
pub struct Tape<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<usize> {
    if a == b {
        return Ok(1);
    }
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        return Ok(a[..a.len() - b.len()].iter().product());
    }
    Err(shape_err(
        op,
        format!("{a:?} and {b:?} are not broadcast-compatible"),
    ))
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that never records ops (inference / stop-gradient passes).
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn set_grad_enabled(&mut self, on: bool) {
        self.grad_enabled = on;
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Kinds of the recorded (differentiable) ops, in execution order.
    pub fn recorded_ops(&self) -> Vec<OpKind> {
        self.nodes.iter().filter_map(|n| n.op.kind()).collect()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn value(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape node shape is consistent")
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.nodes[v.0].data[0]
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<F>,
        op: Op<F>,
    ) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let op = if self.grad_enabled { op } else { Op::Constant };
        self.nodes.push(Node { shape, data, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-differentiable input value.
    pub fn constant(&mut self, t: &Tensor<F>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    /// Loads a parameter value; its gradient flows back into `store` on backward.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let t = store.get(id);
        let op = if self.grad_enabled && !store.is_frozen(id) {
            Op::Param(id)
        } else {
            Op::Constant
        };
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.nodes.push(Node {
            shape,
            data,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    /// Elementwise sum; `rhs` may be a trailing-suffix broadcast of `lhs` (e.g. a bias row).
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (&self.nodes[lhs.0], &self.nodes[rhs.0]);
        suffix_broadcast("add", &a.shape, &b.shape)?;
        let inner = b.data.len();
        let data: Vec<F> = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b.data[i % inner])
            .collect();
        let shape = a.shape.clone();
        self.push("add", shape, data, Op::Add { lhs, rhs })
    }

    /// Elementwise product with the same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let (a, b) = (&self.nodes[lhs.0], &self.nodes[rhs.0]);
        suffix_broadcast("mul", &a.shape, &b.shape)?;
        let inner = b.data.len();
        let data: Vec<F> = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * b.data[i % inner])
            .collect();
        let shape = a.shape.clone();
        self.push("mul", shape, data, Op::Mul { lhs, rhs })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(shape_err(
                "matmul",
                format!("{:?} @ {:?}", na.shape, nb.shape),
            ));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let data = kernels::matmul(&na.data, &nb.data, m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul { a, b, m, k, n })
    }

    /// `x[N,in] w[out,in]^T + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (nx, nw) = (&self.nodes[x.0], &self.nodes[w.0]);
        if nx.shape.len() != 2 || nw.shape.len() != 2 || nx.shape[1] != nw.shape[1] {
            return Err(shape_err(
                "linear",
                format!("input {:?} with weight {:?}", nx.shape, nw.shape),
            ));
        }
        let (rows, inp, out) = (nx.shape[0], nx.shape[1], nw.shape[0]);
        let bias = match b {
            Some(bv) => {
                let nb = &self.nodes[bv.0];
                if nb.data.len() != out {
                    return Err(shape_err(
                        "linear",
                        format!("bias {:?} for {out} outputs", nb.shape),
                    ));
                }
                Some(nb.data.as_slice())
            }
            None => None,
        };
        let data = kernels::linear(&nx.data, &nw.data, bias, rows, inp, out);
        self.push(
            "linear",
            vec![rows, out],
            data,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
        )
    }

    /// 2-D convolution over NCHW input with OIHW weights, stride and zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (nx, nw) = (&self.nodes[x.0], &self.nodes[w.0]);
        if nx.shape.len() != 4 || nw.shape.len() != 4 || nx.shape[1] != nw.shape[1] {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} with weight {:?}", nx.shape, nw.shape),
            ));
        }
        if stride == 0 {
            return Err(TensorError::Invalid(
                "conv2d: stride must be positive".into(),
            ));
        }
        let geom = Conv2dGeom {
            batch: nx.shape[0],
            in_ch: nx.shape[1],
            in_h: nx.shape[2],
            in_w: nx.shape[3],
            out_ch: nw.shape[0],
            kh: nw.shape[2],
            kw: nw.shape[3],
            stride,
            pad,
        };
        if geom.in_h + 2 * pad < geom.kh || geom.in_w + 2 * pad < geom.kw {
            return Err(shape_err(
                "conv2d",
                format!(
                    "kernel {:?} larger than padded input {:?}",
                    nw.shape, nx.shape
                ),
            ));
        }
        let bias = match b {
            Some(bv) => {
                let nb = &self.nodes[bv.0];
                if nb.data.len() != geom.out_ch {
                    return Err(shape_err("conv2d", format!("bias {:?}", nb.shape)));
                }
                Some(nb.data.as_slice())
            }
            None => None,
        };
        let data = kernels::conv2d(&nx.data, &nw.data, bias, &geom);
        let shape = vec![geom.batch, geom.out_ch, geom.out_h(), geom.out_w()];
        self.push("conv2d", shape, data, Op::Conv2d { x, w, b, geom })
    }

    fn pool_geom(&self, op: &'static str, x: Var, k: usize, stride: usize) -> Result<PoolGeom> {
        let s = &self.nodes[x.0].shape;
        if s.len() != 4 || k == 0 || stride == 0 || s[2] < k || s[3] < k {
            return Err(shape_err(
                op,
                format!("input {s:?} with kernel {k} stride {stride}"),
            ));
        }
        Ok(PoolGeom {
            batch: s[0],
            ch: s[1],
            in_h: s[2],
            in_w: s[3],
            k,
            stride,
        })
    }

    pub fn avgpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geom("avgpool2d", x, k, stride)?;
        let data = kernels::avgpool2d(&self.nodes[x.0].data, &geom);
        let shape = vec![geom.batch, geom.ch, geom.out_h(), geom.out_w()];
        self.push("avgpool2d", shape, data, Op::AvgPool { x, geom })
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let geom = self.pool_geom("maxpool2d", x, k, stride)?;
        let (data, argmax) = kernels::maxpool2d(&self.nodes[x.0].data, &geom);
        let shape = vec![geom.batch, geom.ch, geom.out_h(), geom.out_w()];
        self.push("maxpool2d", shape, data, Op::MaxPool { x, argmax })
    }

    /// Average over the full spatial extent: `[N,C,H,W] -> [N,C]`.
    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() != 4 || s[2] != s[3] {
            return Err(shape_err(
                "global_avgpool",
                format!("needs square NCHW, got {s:?}"),
            ));
        }
        let p = self.avgpool2d(x, s[2], s[2])?;
        self.reshape(p, &[s[0], s[1]])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let n = &self.nodes[x.0];
        let data = n.data.iter().map(|&v| v.max(F::zero())).collect();
        let shape = n.shape.clone();
        self.push("relu", shape, data, Op::Relu { x })
    }

    fn last_dim(&self, op: &'static str, x: Var) -> Result<usize> {
        self.nodes[x.0]
            .shape
            .last()
            .copied()
            .ok_or_else(|| shape_err(op, "empty shape"))
    }

    /// Softmax over the trailing axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_dim("softmax", x)?;
        let n = &self.nodes[x.0];
        let data = kernels::softmax_rows(&n.data, cols);
        let shape = n.shape.clone();
        self.push("softmax", shape, data, Op::Softmax { x, cols })
    }

    /// Divides each trailing-axis row by its Euclidean norm (floored at
    /// [`kernels::L2_EPS`]).
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_dim("l2_normalize", x)?;
        let n = &self.nodes[x.0];
        let (data, norms) = kernels::l2_normalize_rows(&n.data, cols);
        let shape = n.shape.clone();
        self.push(
            "l2_normalize",
            shape,
            data,
            Op::L2Normalize { x, cols, norms },
        )
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.last_dim("log_softmax", x)?;
        let n = &self.nodes[x.0];
        let data = kernels::log_softmax_rows(&n.data, cols);
        let shape = n.shape.clone();
        self.push("log_softmax", shape, data, Op::LogSoftmax { x, cols })
    }

    /// Mean cross-entropy of row-wise logits `[N,C]` against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: Target<F>) -> Result<Var> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 {
            return Err(shape_err(
                "cross_entropy",
                format!("logits must be [N,C], got {shape:?}"),
            ));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let logp = kernels::log_softmax_rows(&self.nodes[logits.0].data, cols);
        let total = match &target {
            Target::Classes(t) => {
                if t.len() != rows {
                    return Err(shape_err(
                        "cross_entropy",
                        format!("{} targets for {rows} rows", t.len()),
                    ));
                }
                let mut s = F::zero();
                for (r, &c) in t.iter().enumerate() {
                    if c >= cols {
                        return Err(TensorError::Invalid(format!(
                            "cross_entropy: target {c} out of range for {cols} classes"
                        )));
                    }
                    s -= logp[r * cols + c];
                }
                s
            }
            Target::Soft(p) => {
                if p.shape() != shape.as_slice() {
                    return Err(shape_err(
                        "cross_entropy",
                        format!("soft target {:?} vs logits {shape:?}", p.shape()),
                    ));
                }
                -p.data().iter().zip(&logp).map(|(&a, &b)| a * b).sum::<F>()
            }
        };
        let loss = total / F::lit(rows as f64);
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                target,
                cols,
            },
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = &self.nodes[x.0];
        let v = n.data.iter().copied().sum::<F>() / F::lit(n.data.len() as f64);
        self.push("mean", vec![1], vec![v], Op::Mean { x })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = self.nodes[x.0].data.iter().copied().sum::<F>();
        self.push("sum", vec![1], vec![v], Op::Sum { x })
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Result<Var> {
        let n = &self.nodes[x.0];
        let data = n.data.iter().map(|&v| v * factor).collect();
        let shape = n.shape.clone();
        self.push("scale", shape, data, Op::Scale { x, factor })
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero inputs".into()))?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(shape_err(
                "concat",
                format!("axis {axis} for shape {base:?}"),
            ));
        }
        let mut axis_len = Vec::with_capacity(parts.len());
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} vs {base:?} on axis {axis}"),
                ));
            }
            axis_len.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = axis_len.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&axis_len) {
                let chunk = len * inner;
                data.extend_from_slice(&self.nodes[p.0].data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            shape,
            data,
            Op::Concat {
                parts: parts.to_vec(),
                axis_len,
                outer,
                inner,
            },
        )
    }

    /// Bilinear resize of the two trailing axes (half-pixel centres).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.nodes[x.0].shape.clone();
        if s.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(shape_err(
                "bilinear_resize",
                format!("{s:?} -> {out_h}x{out_w}"),
            ));
        }
        let (in_h, in_w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes: usize = s[..s.len() - 2].iter().product();
        let data =
            kernels::bilinear_resize(&self.nodes[x.0].data, planes, in_h, in_w, out_h, out_w);
        let mut shape = s;
        let l = shape.len();
        shape[l - 2] = out_h;
        shape[l - 1] = out_w;
        self.push(
            "bilinear_resize",
            shape,
            data,
            Op::BilinearResize {
                x,
                planes,
                in_hw: (in_h, in_w),
                out_hw: (out_h, out_w),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n = &self.nodes[x.0];
        if shape.iter().product::<usize>() != n.data.len() || shape.contains(&0) {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", n.shape)));
        }
        let data = n.data.clone();
        self.push("reshape", shape.to_vec(), data, Op::Reshape { x })
    }

    /// Reverse pass from a scalar `loss`; parameter grads accumulate into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<F>) -> Result<BackwardReport> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<F>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![F::one()]);

        fn acc<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
            match &mut grads[v.0] {
                Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
                slot @ None => *slot = Some(g),
            }
        }

        let mut report = BackwardReport::default();
        let mut reached = vec![false; store.len()];
        let mut touched: Vec<ParamId> = Vec::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(id) = node.op {
                touched.push(id);
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFiniteGrad(store.name(*id).to_string()));
                    }
                    store.get_mut(*id).accumulate_grad(&g)?;
                    if !reached[id.0] {
                        reached[id.0] = true;
                        report.params_reached += 1;
                    }
                }
                op => {
                    report.ops_visited += 1;
                    self.backward_op(op, node, g, &mut grads, acc)?;
                }
            }
        }

        if report.params_reached == 0 {
            report.detached = true;
            for id in touched {
                store.get_mut(id).ensure_grad();
            }
        }
        Ok(report)
    }

    fn backward_op(
        &self,
        op: &Op<F>,
        node: &Node<F>,
        g: Vec<F>,
        grads: &mut [Option<Vec<F>>],
        acc: fn(&mut [Option<Vec<F>>], Var, Vec<F>),
    ) -> Result<()> {
        let val = |v: Var| &self.nodes[v.0].data;
        match op {
            Op::Constant | Op::Param(_) => unreachable!(),
            Op::Add { lhs, rhs } => {
                let inner = val(*rhs).len();
                let mut gr = vec![F::zero(); inner];
                for (i, &x) in g.iter().enumerate() {
                    gr[i % inner] += x;
                }
                acc(grads, *lhs, g);
                acc(grads, *rhs, gr);
            }
            Op::Mul { lhs, rhs } => {
                let (a, b) = (val(*lhs), val(*rhs));
                let inner = b.len();
                let ga: Vec<F> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| x * b[i % inner])
                    .collect();
                let mut gb = vec![F::zero(); inner];
                for (i, &x) in g.iter().enumerate() {
                    gb[i % inner] += x * a[i];
                }
                acc(grads, *lhs, ga);
                acc(grads, *rhs, gb);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), &g, *m, *k, *n);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                let (gx, gw, gbias) =
                    kernels::linear_backward(val(*x), val(*w), &g, *rows, *inp, *out);
                acc(grads, *x, gx);
                acc(grads, *w, gw);
                if let Some(b) = b {
                    acc(grads, *b, gbias);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (gx, gw, gbias) = kernels::conv2d_backward(val(*x), val(*w), &g, geom);
                acc(grads, *x, gx);
                acc(grads, *w, gw);
                if let Some(b) = b {
                    acc(grads, *b, gbias);
                }
            }
            Op::AvgPool { x, geom } => acc(grads, *x, kernels::avgpool2d_backward(&g, geom)),
            Op::MaxPool { x, argmax } => {
                let len = val(*x).len();
                acc(grads, *x, kernels::maxpool2d_backward(&g, argmax, len));
            }
            Op::Relu { x } => {
                let gx = g
                    .iter()
                    .zip(val(*x))
                    .map(|(&gv, &xv)| if xv > F::zero() { gv } else { F::zero() })
                    .collect();
                acc(grads, *x, gx);
            }
            Op::Softmax { x, cols } => {
                acc(grads, *x, kernels::softmax_backward(&node.data, &g, *cols))
            }
            Op::L2Normalize { x, cols, norms } => acc(
                grads,
                *x,
                kernels::l2_normalize_backward(&node.data, &g, norms, *cols),
            ),
            Op::LogSoftmax { x, cols } => acc(
                grads,
                *x,
                kernels::log_softmax_backward(&node.data, &g, *cols),
            ),
            Op::CrossEntropy {
                logits,
                target,
                cols,
            } => {
                let p = kernels::softmax_rows(val(*logits), *cols);
                let rows = p.len() / cols;
                let scale = g[0] / F::lit(rows as f64);
                let mut gx = vec![F::zero(); p.len()];
                match target {
                    Target::Classes(t) => {
                        for (r, &c) in t.iter().enumerate() {
                            for j in 0..*cols {
                                let onehot = if j == c { F::one() } else { F::zero() };
                                gx[r * cols + j] = (p[r * cols + j] - onehot) * scale;
                            }
                        }
                    }
                    Target::Soft(q) => {
                        let q = q.data();
                        for r in 0..rows {
                            let row = r * cols..(r + 1) * cols;
                            let mass: F = q[row.clone()].iter().copied().sum();
                            for j in row {
                                gx[j] = (p[j] * mass - q[j]) * scale;
                            }
                        }
                    }
                }
                acc(grads, *logits, gx);
            }
            Op::Mean { x } => {
                let n = val(*x).len();
                acc(grads, *x, vec![g[0] / F::lit(n as f64); n]);
            }
            Op::Sum { x } => {
                let n = val(*x).len();
                acc(grads, *x, vec![g[0]; n]);
            }
            Op::Scale { x, factor } => acc(grads, *x, g.iter().map(|&v| v * *factor).collect()),
            Op::Concat {
                parts,
                axis_len,
                outer,
                inner,
            } => {
                let total: usize = axis_len.iter().sum();
                let mut offset = 0;
                for (p, &len) in parts.iter().zip(axis_len) {
                    let chunk = len * inner;
                    let mut gp = Vec::with_capacity(outer * chunk);
                    for o in 0..*outer {
                        let start = o * total * inner + offset;
                        gp.extend_from_slice(&g[start..start + chunk]);
                    }
                    offset += chunk;
                    acc(grads, *p, gp);
                }
            }
            Op::BilinearResize {
                x,
                planes,
                in_hw,
                out_hw,
            } => acc(
                grads,
                *x,
                kernels::bilinear_resize_backward(
                    &g, *planes, in_hw.0, in_hw.1, out_hw.0, out_hw.1,
                ),
            ),
            Op::Reshape { x } => acc(grads, *x, g),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, shape: &[usize], data: Vec<f64>) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s
            .insert(name, Tensor::new(shape.to_vec(), data).unwrap())
            .unwrap();
        (s, id)
    }

    #[test]
    fn square_gradient() {
        let (mut store, id) = store_with("x", &[1], vec![3.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let rep = tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[6.0]);
        assert_eq!(rep.ops_visited, 2);
        assert!(!rep.detached);
    }

    #[test]
    fn cross_entropy_value() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(&Tensor::new(vec![1, 3], vec![2.0, 1.0, 0.0]).unwrap());
        let l = tape
            .cross_entropy(logits, Target::Classes(vec![0]))
            .unwrap();
        // -ln(e^2 / (e^2 + e + 1))
        let expect = -(2f64.exp() / (2f64.exp() + 1f64.exp() + 1.0)).ln();
        assert!((tape.scalar_value(l) - expect).abs() < 1e-12);
        assert!((tape.scalar_value(l) - 0.4076).abs() < 5e-5);
    }

    #[test]
    fn uniform_logits_ce_gradient() {
        let c = 5;
        let (mut store, id) = store_with("z", &[1, c], vec![0.7; c]);
        let mut tape = Tape::new();
        let z = tape.param(&store, id);
        let l = tape.cross_entropy(z, Target::Classes(vec![2])).unwrap();
        tape.backward(l, &mut store).unwrap();
        let g = store.get(id).grad().unwrap();
        assert!((g[2] + (1.0 - 1.0 / c as f64)).abs() < 1e-12);
        assert!((g[0] - 1.0 / c as f64).abs() < 1e-12);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let (mut store, id) = store_with("x", &[1], vec![3.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss, &mut store).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[12.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let (mut store, id) = store_with("x", &[2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn detached_graph_flags_and_zeroes() {
        let (mut store, id) = store_with("x", &[2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let x = tape.param(&store, id);
        let d = tape.detach(x);
        let loss = tape.sum(d).unwrap();
        let rep = tape.backward(loss, &mut store).unwrap();
        assert!(rep.detached);
        assert_eq!(store.get(id).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let (store, id) = store_with("x", &[2], vec![1.0, 2.0]);
        let mut tape = Tape::no_grad();
        let x = tape.param(&store, id);
        let y = tape.relu(x).unwrap();
        let _ = tape.sum(y).unwrap();
        assert!(tape.recorded_ops().is_empty());
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn non_finite_forward_is_error() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::full(&[2], f32::MAX));
        let err = tape.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, TensorError::NonFinite { op: "scale" }));
    }

    #[test]
    fn empty_tape_backward_is_noop() {
        let tape = Tape::<f32>::new();
        assert!(tape.is_empty());
        assert!(tape.recorded_ops().is_empty());
    }
}
