//! Define-by-run reverse-mode autodiff on a linear tape.
//!
//! Every builder method validates shapes, computes the forward value
//! eagerly, and pushes one node. Parents always have smaller indices than
//! their children, so `backward` is a single reverse sweep with no explicit
//! topological sort. Gradients of interior nodes are dropped as soon as they
//! have been propagated; only leaf gradients survive into the returned
//! [`Grads`], which is what optimizers and gradient checks consume.
//!
//! The op set is deliberately closed (an enum, not trait objects): it keeps
//! the tape allocation-light, makes every backward formula auditable in one
//! place, and guarantees bitwise-reproducible accumulation order.

use crate::kernels;
use crate::ops;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct NodeId(usize);

impl NodeId {
    /// Position of the node on its tape.
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddScalar(NodeId),
    MulScalar(NodeId, f64),
    /// Matrix plus a row vector broadcast over every row.
    AddRows(NodeId, NodeId),
    /// Matrix plus a column vector broadcast over every column.
    AddCols(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    /// Affine map `x·w + b` — matmul and row-broadcast bias in one node.
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        /// Row softmax of `q·kᵀ`, the only intermediate backward needs.
        probs: Vec<f64>,
    },
    /// Multi-head attention over column bands of packed `[·, heads·d]`
    /// operands, with the `1/√d` temperature folded in via `scale`. Rows
    /// split into `blocks` independent equal row-blocks (block-diagonal
    /// attention), so a whole batch of sequences rides one node.
    Mha {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        scale: f64,
        blocks: usize,
        /// Each (block, head) `[n, n]` attention map, block-major.
        probs: Vec<f64>,
    },
    Transpose(NodeId),
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    Relu(NodeId),
    Gelu {
        x: NodeId,
        tanh_u: Vec<f64>,
    },
    Softplus(NodeId),
    Abs(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: Vec<(f64, f64)>,
    },
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    GatherRows {
        src: NodeId,
        ids: Vec<usize>,
    },
    Gather1d {
        src: NodeId,
        ids: Vec<usize>,
    },
    LogSumExp(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols {
        src: NodeId,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    StopGradient,
    /// Forward value of `forward`, gradient routed entirely to `carrier`.
    StraightThrough {
        carrier: NodeId,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Per-node gradients produced by [`Tape::backward`]; only leaves are populated.
#[derive(Debug)]
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient of the root w.r.t. the leaf `id`, if it was reached.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    /// Remove and return the gradient for `id`.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.slots.get_mut(id.0).and_then(|s| s.take())
    }
}

/// Last-axis view of a shape: `(rows, cols)` where `cols` is the final axis.
fn last_axis(shape: &[usize]) -> (usize, usize) {
    let cols = shape.last().copied().unwrap_or(1);
    let numel: usize = shape.iter().product();
    if cols == 0 {
        (0, 0)
    } else {
        (numel / cols, cols)
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

/// The autodiff tape. One tape per forward pass; build, call `backward`,
/// then drop or [`Tape::clear`] it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all nodes, keeping the allocation for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Forward value of a node.
    ///
    /// # Panics
    /// Panics if `id` does not belong to this tape.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, op: &'static str, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::IndexOutOfRange { op, index: id.0, bound: self.nodes.len() });
        }
        Ok(())
    }

    /// Register an input / parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, t)
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        self.check(name, a)?;
        self.check(name, b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data: Vec<f64> = va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.check("add_scalar", a)?;
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.iter().map(|&x| x + s).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(Op::AddScalar(a), value))
    }

    pub fn mul_scalar(&mut self, a: NodeId, s: f64) -> Result<NodeId> {
        self.check("mul_scalar", a)?;
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.iter().map(|&x| x * s).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(Op::MulScalar(a, s), value))
    }

    /// `a[r, c] + row[c]` for a rank-2 `a` and a length-`cols` vector.
    pub fn add_rows(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.check("add_rows", a)?;
        self.check("add_rows", row)?;
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        let (rows, cols) = matrix_dims("add_rows", va)?;
        if vr.numel() != cols {
            return Err(shape_err(
                "add_rows",
                format!("matrix has {cols} cols, vector has {} elements", vr.numel()),
            ));
        }
        let mut data = va.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += vr.data()[c];
            }
        }
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(Op::AddRows(a, row), value))
    }

    /// `a[r, c] + col[r]` for a rank-2 `a` and a length-`rows` vector.
    pub fn add_cols(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        self.check("add_cols", a)?;
        self.check("add_cols", col)?;
        let (va, vc) = (&self.nodes[a.0].value, &self.nodes[col.0].value);
        let (rows, cols) = matrix_dims("add_cols", va)?;
        if vc.numel() != rows {
            return Err(shape_err(
                "add_cols",
                format!("matrix has {rows} rows, vector has {} elements", vc.numel()),
            ));
        }
        let mut data = va.data().to_vec();
        for r in 0..rows {
            let add = vc.data()[r];
            for c in 0..cols {
                data[r * cols + c] += add;
            }
        }
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(Op::AddCols(a, col), value))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check("matmul", a)?;
        self.check("matmul", b)?;
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k) = matrix_dims("matmul", va)?;
        let (k2, n) = matrix_dims("matmul", vb)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] · [{k2},{n}]")));
        }
        let mut c = vec![0.0; m * n];
        kernels::matmul_nn(va.data(), vb.data(), &mut c, m, k, n);
        let value = Tensor::new(&[m, n], c)?;
        Ok(self.push(Op::Matmul(a, b), value))
    }

    /// Affine map `x·w + b` where `x` is `[m, k]`, `w` is `[k, n]` and `b` is
    /// a length-`n` row bias, with the arithmetic of
    /// `add_rows(matmul(x, w), b)`. A transformer layer runs seven affine
    /// maps, and fusing each into one node drops the intermediate product's
    /// `[m, n]` gradient buffer from the backward sweep.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.check("linear", x)?;
        self.check("linear", w)?;
        self.check("linear", b)?;
        let (vx, vw, vb) =
            (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (m, k) = matrix_dims("linear", vx)?;
        let (k2, n) = matrix_dims("linear", vw)?;
        if k != k2 {
            return Err(shape_err("linear", format!("[{m},{k}] · [{k2},{n}]")));
        }
        if vb.numel() != n {
            return Err(shape_err(
                "linear",
                format!("product has {n} columns, bias has {} elements", vb.numel()),
            ));
        }
        let mut c = vec![0.0; m * n];
        kernels::matmul_nn(vx.data(), vw.data(), &mut c, m, k, n);
        for r in 0..m {
            for (cv, &bv) in c[r * n..(r + 1) * n].iter_mut().zip(vb.data()) {
                *cv += bv;
            }
        }
        let value = Tensor::new(&[m, n], c)?;
        Ok(self.push(Op::Linear { x, w, b }, value))
    }

    /// Scaled-dot-product attention core: `softmax(q·kᵀ) · v` with the
    /// softmax taken over each query row.
    ///
    /// `q` is `[m, d]`, `k` is `[t, d]`, `v` is `[t, e]`; the result is
    /// `[m, e]`. Any temperature such as `1/√d` must be folded into `q` by
    /// the caller. Fusing the three steps stores one `[m, t]` matrix for
    /// backward where the op-by-op composition would keep three, which is
    /// the difference between the attention maps fitting in cache or not.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        self.check("attention", q)?;
        self.check("attention", k)?;
        self.check("attention", v)?;
        let (vq, vk, vv) =
            (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let (m, d) = matrix_dims("attention", vq)?;
        let (t, d2) = matrix_dims("attention", vk)?;
        let (t2, e) = matrix_dims("attention", vv)?;
        if d != d2 || t != t2 {
            return Err(shape_err(
                "attention",
                format!("q [{m},{d}], k [{t},{d2}], v [{t2},{e}]"),
            ));
        }
        if t == 0 || d == 0 {
            return Err(shape_err("attention", "k and v must be non-empty".into()));
        }
        let mut probs = vec![0.0; m * t];
        kernels::matmul_nt(vq.data(), vk.data(), &mut probs, m, d, t);
        ops::softmax_rows_inplace(&mut probs, m, t);
        let mut out = vec![0.0; m * e];
        kernels::matmul_nn(&probs, vv.data(), &mut out, m, t, e);
        let value = Tensor::new(&[m, e], out)?;
        Ok(self.push(Op::Attention { q, k, v, probs }, value))
    }

    /// Multi-head attention on packed operands. `q` is `[m, hidden]`, `k`
    /// and `v` are `[t, hidden]` with `hidden = heads·d`; head `h` computes
    /// `softmax(scale · q_h·k_hᵀ) · v_h` over its column band
    /// `h·d..(h+1)·d`, and the head outputs land in the same bands of the
    /// `[m, hidden]` result.
    ///
    /// The arithmetic matches slicing each band out, folding `scale` into
    /// the query and calling [`Tape::attention`] per head, but the packed
    /// walk replaces the `4·heads + 1` nodes of that composition with one
    /// and reuses two scratch buffers for every intermediate.
    pub fn mha(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        scale: f64,
    ) -> Result<NodeId> {
        self.mha_blocks(q, k, v, heads, scale, 1)
    }

    /// Block-diagonal [`Tape::mha`]: rows of `q` and of `k`/`v` split into
    /// `blocks` equal consecutive blocks, and block `i` of the queries
    /// attends only within block `i` of the keys and values. Batching a
    /// mini-batch of sequences into one node this way gives every other op
    /// in the layer full-batch matrices while attention stays confined to
    /// each sequence, exactly as if each block ran through its own `mha`.
    pub fn mha_blocks(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        scale: f64,
        blocks: usize,
    ) -> Result<NodeId> {
        self.check("mha", q)?;
        self.check("mha", k)?;
        self.check("mha", v)?;
        let (vq, vk, vv) =
            (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let (m, hidden) = matrix_dims("mha", vq)?;
        let (t, h2) = matrix_dims("mha", vk)?;
        let (t2, h3) = matrix_dims("mha", vv)?;
        if hidden != h2 || hidden != h3 || t != t2 {
            return Err(shape_err(
                "mha",
                format!("q [{m},{hidden}], k [{t},{h2}], v [{t2},{h3}]"),
            ));
        }
        if heads == 0 || hidden % heads != 0 {
            return Err(shape_err(
                "mha",
                format!("{hidden} columns do not split into {heads} heads"),
            ));
        }
        if t == 0 || hidden == 0 {
            return Err(shape_err("mha", "k and v must be non-empty".into()));
        }
        if blocks == 0 || m % blocks != 0 || t % blocks != 0 {
            return Err(shape_err(
                "mha",
                format!("{m} and {t} rows do not split into {blocks} blocks"),
            ));
        }
        let d = hidden / heads;
        let (bm, bt) = (m / blocks, t / blocks);
        let mut probs = vec![0.0; blocks * heads * bm * bt];
        let mut out = vec![0.0; m * hidden];
        let mut qp = vec![0.0; bm * d];
        let mut pack = vec![0.0; bt * d];
        let mut oh = vec![0.0; bm * d];
        for blk in 0..blocks {
            let qs = &vq.data()[blk * bm * hidden..(blk + 1) * bm * hidden];
            let ks = &vk.data()[blk * bt * hidden..(blk + 1) * bt * hidden];
            let vs = &vv.data()[blk * bt * hidden..(blk + 1) * bt * hidden];
            let os = &mut out[blk * bm * hidden..(blk + 1) * bm * hidden];
            for h in 0..heads {
                let po = (blk * heads + h) * bm * bt;
                let ph = &mut probs[po..po + bm * bt];
                kernels::gather_cols_scaled(qs, &mut qp, bm, hidden, h * d, d, scale);
                kernels::gather_cols_scaled(ks, &mut pack, bt, hidden, h * d, d, 1.0);
                kernels::matmul_nt(&qp, &pack, ph, bm, d, bt);
                ops::softmax_rows_inplace(ph, bm, bt);
                kernels::gather_cols_scaled(vs, &mut pack, bt, hidden, h * d, d, 1.0);
                oh.fill(0.0);
                kernels::matmul_nn(ph, &pack, &mut oh, bm, bt, d);
                kernels::scatter_cols(&oh, os, bm, hidden, h * d, d);
            }
        }
        let value = Tensor::new(&[m, hidden], out)?;
        Ok(self.push(Op::Mha { q, k, v, heads, scale, blocks, probs }, value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check("transpose", a)?;
        let va = &self.nodes[a.0].value;
        let (m, n) = matrix_dims("transpose", va)?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = va.data()[i * n + j];
            }
        }
        let value = Tensor::new(&[n, m], data)?;
        Ok(self.push(Op::Transpose(a), value))
    }

    /// Zero-padded strided convolution: input `[b, c_in, l]`, weight
    /// `[c_out, c_in, k]`, bias `[c_out]` → `[b, c_out, l_out]`.
    pub fn conv1d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.check("conv1d", input)?;
        self.check("conv1d", weight)?;
        self.check("conv1d", bias)?;
        let (vi, vw, vb) =
            (&self.nodes[input.0].value, &self.nodes[weight.0].value, &self.nodes[bias.0].value);
        let (ish, wsh) = (vi.shape(), vw.shape());
        if ish.len() != 3 || wsh.len() != 3 || vb.shape().len() != 1 {
            return Err(shape_err(
                "conv1d",
                format!("want input rank 3, weight rank 3, bias rank 1; got {ish:?}, {wsh:?}, {:?}", vb.shape()),
            ));
        }
        let (b, c_in, l) = (ish[0], ish[1], ish[2]);
        let (c_out, c_in_w, k) = (wsh[0], wsh[1], wsh[2]);
        if c_in != c_in_w || vb.numel() != c_out {
            return Err(shape_err(
                "conv1d",
                format!("channel mismatch: input c_in {c_in}, weight c_in {c_in_w}, bias {}", vb.numel()),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArg { op: "conv1d", detail: "stride must be >= 1".into() });
        }
        let Some(l_out) = ops::conv1d_out_len(l, k, stride, padding) else {
            return Err(Error::InvalidArg {
                op: "conv1d",
                detail: format!("kernel {k} longer than padded input {}", l + 2 * padding),
            });
        };
        let mut out = vec![0.0; b * c_out * l_out];
        ops::conv1d_forward(vi.data(), vw.data(), vb.data(), &mut out, b, c_in, l, c_out, k, stride, padding);
        let value = Tensor::new(&[b, c_out, l_out], out)?;
        Ok(self.push(Op::Conv1d { input, weight, bias, stride, padding }, value))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check("relu", a)?;
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(Op::Relu(a), value))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check("gelu", a)?;
        let va = &self.nodes[a.0].value;
        let mut y = vec![0.0; va.numel()];
        let mut tanh_u = vec![0.0; va.numel()];
        ops::gelu_forward(va.data(), &mut y, &mut tanh_u);
        let value = Tensor::new(va.shape(), y)?;
        Ok(self.push(Op::Gelu { x: a, tanh_u }, value))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.check("softplus", a)?;
        let va = &self.nodes[a.0].value;
        let mut y = vec![0.0; va.numel()];
        ops::softplus_forward(va.data(), &mut y);
        let value = Tensor::new(va.shape(), y)?;
        Ok(self.push(Op::Softplus(a), value))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.check("abs", a)?;
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.iter().map(|&x| x.abs()).collect();
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(Op::Abs(a), value))
    }

    /// Layer norm over the last axis with learnable per-feature scale/offset.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.check("layer_norm", x)?;
        self.check("layer_norm", gamma)?;
        self.check("layer_norm", beta)?;
        if !(eps > 0.0) {
            return Err(Error::InvalidArg { op: "layer_norm", detail: format!("eps must be > 0, got {eps}") });
        }
        let (vx, vg, vb) =
            (&self.nodes[x.0].value, &self.nodes[gamma.0].value, &self.nodes[beta.0].value);
        let (rows, cols) = last_axis(vx.shape());
        if cols == 0 || vg.numel() != cols || vb.numel() != cols {
            return Err(shape_err(
                "layer_norm",
                format!("last axis {cols}, gamma {}, beta {}", vg.numel(), vb.numel()),
            ));
        }
        let mut y = vec![0.0; vx.numel()];
        let mut stats = Vec::with_capacity(rows);
        ops::layer_norm_forward(vx.data(), vg.data(), vb.data(), &mut y, &mut stats, rows, cols, eps);
        let value = Tensor::new(vx.shape(), y)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, stats }, value))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check("softmax", a)?;
        let va = &self.nodes[a.0].value;
        let (rows, cols) = last_axis(va.shape());
        if cols == 0 {
            return Err(shape_err("softmax", "empty last axis".into()));
        }
        let mut y = vec![0.0; va.numel()];
        ops::softmax_rows(va.data(), &mut y, rows, cols);
        let value = Tensor::new(va.shape(), y)?;
        Ok(self.push(Op::Softmax(a), value))
    }

    /// Log-softmax over the last axis; `log_softmax(x)[t] == -cross_entropy(x, t)` exactly.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.check("log_softmax", a)?;
        let va = &self.nodes[a.0].value;
        let (rows, cols) = last_axis(va.shape());
        if cols == 0 {
            return Err(shape_err("log_softmax", "empty last axis".into()));
        }
        let mut y = vec![0.0; va.numel()];
        for r in 0..rows {
            let xr = &va.data()[r * cols..(r + 1) * cols];
            let lse = ops::row_lse(xr);
            for c in 0..cols {
                y[r * cols + c] = xr[c] - lse;
            }
        }
        let value = Tensor::new(va.shape(), y)?;
        Ok(self.push(Op::LogSoftmax(a), value))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check("sum_all", a)?;
        let s: f64 = self.nodes[a.0].value.iter().sum();
        Ok(self.push(Op::SumAll(a), Tensor::scalar(s)))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check("mean_all", a)?;
        let va = &self.nodes[a.0].value;
        if va.numel() == 0 {
            return Err(shape_err("mean_all", "empty tensor".into()));
        }
        let s: f64 = va.iter().sum::<f64>() / va.numel() as f64;
        Ok(self.push(Op::MeanAll(a), Tensor::scalar(s)))
    }

    /// Select rows of a rank-2 tensor by index (embedding lookup). Repeats allowed.
    pub fn gather_rows(&mut self, src: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.check("gather_rows", src)?;
        let vs = &self.nodes[src.0].value;
        let (rows, cols) = matrix_dims("gather_rows", vs)?;
        for &i in ids {
            if i >= rows {
                return Err(Error::IndexOutOfRange { op: "gather_rows", index: i, bound: rows });
            }
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            data.extend_from_slice(&vs.data()[i * cols..(i + 1) * cols]);
        }
        let value = Tensor::new(&[ids.len(), cols], data)?;
        Ok(self.push(Op::GatherRows { src, ids: ids.to_vec() }, value))
    }

    /// Select elements of a rank-1 tensor by index. Repeats allowed.
    pub fn gather1d(&mut self, src: NodeId, ids: &[usize]) -> Result<NodeId> {
        self.check("gather1d", src)?;
        let vs = &self.nodes[src.0].value;
        if vs.shape().len() != 1 {
            return Err(shape_err("gather1d", format!("want rank 1, got {:?}", vs.shape())));
        }
        let n = vs.numel();
        for &i in ids {
            if i >= n {
                return Err(Error::IndexOutOfRange { op: "gather1d", index: i, bound: n });
            }
        }
        let data: Vec<f64> = ids.iter().map(|&i| vs.data()[i]).collect();
        let value = Tensor::new(&[ids.len()], data)?;
        Ok(self.push(Op::Gather1d { src, ids: ids.to_vec() }, value))
    }

    /// `log(Σ exp(x))` of a rank-1 tensor, max-shifted for stability.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check("logsumexp", a)?;
        let va = &self.nodes[a.0].value;
        if va.shape().len() != 1 || va.numel() == 0 {
            return Err(shape_err("logsumexp", format!("want non-empty rank 1, got {:?}", va.shape())));
        }
        let lse = ops::row_lse(va.data());
        Ok(self.push(Op::LogSumExp(a), Tensor::scalar(lse)))
    }

    /// Stack rank-2 tensors vertically (all must share a column count).
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg { op: "concat_rows", detail: "no inputs".into() });
        }
        for &p in parts {
            self.check("concat_rows", p)?;
        }
        let (_, cols) = matrix_dims("concat_rows", &self.nodes[parts[0].0].value)?;
        let mut total_rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let (r, c) = matrix_dims("concat_rows", v)?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("cols {c} vs {cols}")));
            }
            total_rows += r;
            data.extend_from_slice(v.data());
        }
        let value = Tensor::new(&[total_rows, cols], data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value))
    }

    /// Stack rank-2 tensors side by side (all must share a row count).
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArg { op: "concat_cols", detail: "no inputs".into() });
        }
        for &p in parts {
            self.check("concat_cols", p)?;
        }
        let (rows, _) = matrix_dims("concat_cols", &self.nodes[parts[0].0].value)?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total_cols = 0;
        for &p in parts {
            let v = &self.nodes[p.0].value;
            let (r, c) = matrix_dims("concat_cols", v)?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("rows {r} vs {rows}")));
            }
            widths.push(c);
            total_cols += c;
        }
        let mut data = vec![0.0; rows * total_cols];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.nodes[p.0].value.data();
            for r in 0..rows {
                data[r * total_cols + off..r * total_cols + off + w]
                    .copy_from_slice(&v[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let value = Tensor::new(&[rows, total_cols], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    /// Contiguous column slice `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, src: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.check("slice_cols", src)?;
        let vs = &self.nodes[src.0].value;
        let (rows, cols) = matrix_dims("slice_cols", vs)?;
        if len == 0 || start + len > cols {
            return Err(Error::InvalidArg {
                op: "slice_cols",
                detail: format!("slice [{start}, {}) of {cols} cols", start + len),
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&vs.data()[r * cols + start..r * cols + start + len]);
        }
        let value = Tensor::new(&[rows, len], data)?;
        Ok(self.push(Op::SliceCols { src, start, len }, value))
    }

    pub fn reshape(&mut self, src: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check("reshape", src)?;
        let vs = &self.nodes[src.0].value;
        let n: usize = shape.iter().product();
        if n != vs.numel() {
            return Err(shape_err("reshape", format!("{:?} ({} elems) to {shape:?} ({n} elems)", vs.shape(), vs.numel())));
        }
        let value = Tensor::new(shape, vs.data().to_vec())?;
        Ok(self.push(Op::Reshape(src), value))
    }

    /// Cross-entropy from raw logits.
    ///
    /// Rank-1 logits `[k]` with one target produce a scalar; rank-2 logits
    /// `[n, k]` with `n` targets produce the per-row loss vector `[n]`.
    /// Equals `-log_softmax(logits)[target]` bit for bit.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        self.check("cross_entropy", logits)?;
        let vl = &self.nodes[logits.0].value;
        let (rows, cols) = match vl.shape().len() {
            1 => (1, vl.numel()),
            2 => (vl.shape()[0], vl.shape()[1]),
            _ => return Err(shape_err("cross_entropy", format!("want rank 1 or 2, got {:?}", vl.shape()))),
        };
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{rows} logit rows but {} targets", targets.len()),
            ));
        }
        if cols == 0 {
            return Err(shape_err("cross_entropy", "no classes".into()));
        }
        for &t in targets {
            if t >= cols {
                return Err(Error::IndexOutOfRange { op: "cross_entropy", index: t, bound: cols });
            }
        }
        let mut probs = vec![0.0; rows * cols];
        ops::softmax_rows(vl.data(), &mut probs, rows, cols);
        let mut losses = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            let xr = &vl.data()[r * cols..(r + 1) * cols];
            losses.push(ops::row_lse(xr) - xr[t]);
        }
        let value = if vl.shape().len() == 1 {
            Tensor::scalar(losses[0])
        } else {
            Tensor::new(&[rows], losses)?
        };
        Ok(self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, value))
    }

    /// Identity forward, zero gradient backward.
    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.check("stop_gradient", a)?;
        let value = self.nodes[a.0].value.clone();
        Ok(self.push(Op::StopGradient, value))
    }

    /// Straight-through estimator: takes the value of `forward` but routes
    /// the entire incoming gradient to `carrier`. Shapes must match.
    pub fn straight_through(&mut self, forward: NodeId, carrier: NodeId) -> Result<NodeId> {
        self.check("straight_through", forward)?;
        self.check("straight_through", carrier)?;
        let (vf, vc) = (&self.nodes[forward.0].value, &self.nodes[carrier.0].value);
        if vf.shape() != vc.shape() {
            return Err(shape_err(
                "straight_through",
                format!("{:?} vs {:?}", vf.shape(), vc.shape()),
            ));
        }
        let value = vf.clone();
        Ok(self.push(Op::StraightThrough { carrier }, value))
    }

    /// Reverse sweep from a scalar `root`. Returns gradients for every leaf
    /// that the root depends on; interior gradients are freed on the fly.
    pub fn backward(&self, root: NodeId) -> Result<Grads> {
        self.check("backward", root)?;
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::NonScalarRoot { shape: rv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let mut slots: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        slots.resize_with(self.nodes.len(), || None);
        for (i, slot) in grads.into_iter().enumerate() {
            if let (Op::Leaf, Some(g)) = (&self.nodes[i].op, slot) {
                slots[i] = Some(Tensor::new(self.nodes[i].value.shape(), g)?);
            }
        }
        Ok(Grads { slots })
    }

    /// Push the gradient `g` of node `i` into its parents.
    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let numel_of = |idx: usize| self.nodes[idx].value.numel();
        macro_rules! slot {
            ($id:expr) => {
                grads[$id.0].get_or_insert_with(|| vec![0.0; numel_of($id.0)]).as_mut_slice()
            };
        }
        match &node.op {
            Op::Leaf => unreachable!("leaves are skipped in the sweep"),
            Op::Add(a, b) => {
                axpy(slot!(a), g, 1.0);
                axpy(slot!(b), g, 1.0);
            }
            Op::Sub(a, b) => {
                axpy(slot!(a), g, 1.0);
                axpy(slot!(b), g, -1.0);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                {
                    let da = slot!(a);
                    for j in 0..g.len() {
                        da[j] = g[j].mul_add(vb[j], da[j]);
                    }
                }
                let db = slot!(b);
                for j in 0..g.len() {
                    db[j] = g[j].mul_add(va[j], db[j]);
                }
            }
            Op::AddScalar(a) => axpy(slot!(a), g, 1.0),
            Op::MulScalar(a, s) => axpy(slot!(a), g, *s),
            Op::AddRows(a, row) => {
                axpy(slot!(a), g, 1.0);
                let cols = numel_of(row.0);
                let dr = slot!(row);
                for (j, &gv) in g.iter().enumerate() {
                    dr[j % cols] += gv;
                }
            }
            Op::AddCols(a, col) => {
                axpy(slot!(a), g, 1.0);
                let rows = numel_of(col.0);
                let cols = g.len() / rows;
                let dc = slot!(col);
                for r in 0..rows {
                    let mut s = 0.0;
                    for c in 0..cols {
                        s += g[r * cols + c];
                    }
                    dc[r] += s;
                }
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                kernels::matmul_nt(g, vb.data(), slot!(a), m, n, k);
                kernels::matmul_tn(va.data(), g, slot!(b), m, k, n);
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (m, k) = (vx.shape()[0], vx.shape()[1]);
                let n = vw.shape()[1];
                kernels::matmul_nt(g, vw.data(), slot!(x), m, n, k);
                kernels::matmul_tn(vx.data(), g, slot!(w), m, k, n);
                let db = slot!(b);
                for r in 0..m {
                    for (dv, &gv) in db.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                        *dv += gv;
                    }
                }
            }
            Op::Attention { q, k, v, probs } => {
                let (vq, vv) = (&self.nodes[q.0].value, &self.nodes[v.0].value);
                let (m, d) = (vq.shape()[0], vq.shape()[1]);
                let (t, e) = (vv.shape()[0], vv.shape()[1]);
                kernels::matmul_tn(probs, g, slot!(v), m, t, e);
                // ds = p ⊙ (g·vᵀ − rowdot(g·vᵀ, p)): softmax backward applied
                // to the score gradient, built in scratch since the raw score
                // matrix never existed as a node.
                let mut ds = vec![0.0; m * t];
                kernels::matmul_nt(g, vv.data(), &mut ds, m, e, t);
                for r in 0..m {
                    let pr = &probs[r * t..(r + 1) * t];
                    let dr = &mut ds[r * t..(r + 1) * t];
                    let dot = kernels::dot_slice(dr, pr);
                    for c in 0..t {
                        dr[c] = pr[c] * (dr[c] - dot);
                    }
                }
                kernels::matmul_nn(&ds, self.nodes[k.0].value.data(), slot!(q), m, t, d);
                kernels::matmul_tn(&ds, vq.data(), slot!(k), m, t, d);
            }
            Op::Mha { q, k, v, heads, scale, blocks, probs } => {
                let (vq, vk, vv) =
                    (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                let (m, hidden) = (vq.shape()[0], vq.shape()[1]);
                let t = vk.shape()[0];
                let d = hidden / heads;
                let (bm, bt) = (m / blocks, t / blocks);
                let mut gh = vec![0.0; bm * d];
                let mut pack = vec![0.0; bt.max(bm) * d];
                let mut band = vec![0.0; bt.max(bm) * d];
                let mut ds = vec![0.0; bm * bt];
                for blk in 0..*blocks {
                    let (qr, tr) = (blk * bm * hidden, blk * bt * hidden);
                    let qs = &vq.data()[qr..qr + bm * hidden];
                    let ks = &vk.data()[tr..tr + bt * hidden];
                    let vs = &vv.data()[tr..tr + bt * hidden];
                    let gs = &g[qr..qr + bm * hidden];
                    for h in 0..*heads {
                        let po = (blk * heads + h) * bm * bt;
                        let ph = &probs[po..po + bm * bt];
                        kernels::gather_cols_scaled(gs, &mut gh, bm, hidden, h * d, d, 1.0);
                        // dv_h = p_hᵀ · g_h, built in scratch and scattered
                        // back into v's column band of this row block; dq_h
                        // and dk_h follow the same pattern below.
                        let dvh = &mut band[..bt * d];
                        dvh.fill(0.0);
                        kernels::matmul_tn(ph, &gh, dvh, bm, bt, d);
                        kernels::scatter_cols_add_scaled(
                            dvh,
                            &mut slot!(v)[tr..tr + bt * hidden],
                            bt,
                            hidden,
                            h * d,
                            d,
                            1.0,
                        );
                        // Score gradient: softmax backward over each query row.
                        let vp = &mut pack[..bt * d];
                        kernels::gather_cols_scaled(vs, vp, bt, hidden, h * d, d, 1.0);
                        ds.fill(0.0);
                        kernels::matmul_nt(&gh, vp, &mut ds, bm, d, bt);
                        for r in 0..bm {
                            let pr = &ph[r * bt..(r + 1) * bt];
                            let dr = &mut ds[r * bt..(r + 1) * bt];
                            let dot = kernels::dot_slice(dr, pr);
                            for c in 0..bt {
                                dr[c] = pr[c] * (dr[c] - dot);
                            }
                        }
                        let kp = &mut pack[..bt * d];
                        kernels::gather_cols_scaled(ks, kp, bt, hidden, h * d, d, 1.0);
                        let dqh = &mut band[..bm * d];
                        dqh.fill(0.0);
                        kernels::matmul_nn(&ds, kp, dqh, bm, bt, d);
                        kernels::scatter_cols_add_scaled(
                            dqh,
                            &mut slot!(q)[qr..qr + bm * hidden],
                            bm,
                            hidden,
                            h * d,
                            d,
                            *scale,
                        );
                        let qp = &mut pack[..bm * d];
                        kernels::gather_cols_scaled(qs, qp, bm, hidden, h * d, d, *scale);
                        let dkh = &mut band[..bt * d];
                        dkh.fill(0.0);
                        kernels::matmul_tn(&ds, qp, dkh, bm, bt, d);
                        kernels::scatter_cols_add_scaled(
                            dkh,
                            &mut slot!(k)[tr..tr + bt * hidden],
                            bt,
                            hidden,
                            h * d,
                            d,
                            1.0,
                        );
                    }
                }
            }
            Op::Transpose(a) => {
                // value is n×m; g follows value's layout.
                let va = &self.nodes[a.0].value;
                let (m, n) = (va.shape()[0], va.shape()[1]);
                let da = slot!(a);
                for i2 in 0..n {
                    for j2 in 0..m {
                        da[j2 * n + i2] += g[i2 * m + j2];
                    }
                }
            }
            Op::Conv1d { input, weight, bias, stride, padding } => {
                let (vi, vw) = (&self.nodes[input.0].value, &self.nodes[weight.0].value);
                let (b, c_in, l) = (vi.shape()[0], vi.shape()[1], vi.shape()[2]);
                let (c_out, _, k) = (vw.shape()[0], vw.shape()[1], vw.shape()[2]);
                let (in_data, w_data) = (vi.data().to_vec(), vw.data().to_vec());
                // The three parent slots can alias only through distinct ids,
                // so borrow them one at a time via raw index juggling.
                let mut di = vec![0.0; vi.numel()];
                let mut dw = vec![0.0; vw.numel()];
                let mut db = vec![0.0; c_out];
                ops::conv1d_backward(
                    &in_data, &w_data, g, &mut di, &mut dw, &mut db, b, c_in, l, c_out, k, *stride, *padding,
                );
                put_back(grads, input.0, di);
                put_back(grads, weight.0, dw);
                put_back(grads, bias.0, db);
            }
            Op::Relu(a) => {
                let va = self.nodes[a.0].value.data();
                let da = slot!(a);
                for j in 0..g.len() {
                    if va[j] > 0.0 {
                        da[j] += g[j];
                    }
                }
            }
            Op::Gelu { x, tanh_u } => {
                let vx = self.nodes[x.0].value.data();
                ops::gelu_backward(vx, tanh_u, g, slot!(x));
            }
            Op::Softplus(a) => {
                let va = self.nodes[a.0].value.data();
                let da = slot!(a);
                for j in 0..g.len() {
                    da[j] = g[j].mul_add(ops::sigmoid(va[j]), da[j]);
                }
            }
            Op::Abs(a) => {
                let va = self.nodes[a.0].value.data();
                let da = slot!(a);
                for j in 0..g.len() {
                    da[j] += g[j] * sign(va[j]);
                }
            }
            Op::LayerNorm { x, gamma, beta, stats } => {
                let vx = &self.nodes[x.0].value;
                let (rows, cols) = last_axis(vx.shape());
                let (x_data, g_data) = (vx.data().to_vec(), self.nodes[gamma.0].value.data().to_vec());
                let mut dx = vec![0.0; vx.numel()];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                ops::layer_norm_backward(&x_data, &g_data, stats, g, &mut dx, &mut dg, &mut db, rows, cols);
                put_back(grads, x.0, dx);
                put_back(grads, gamma.0, dg);
                put_back(grads, beta.0, db);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (rows, cols) = last_axis(node.value.shape());
                let da = slot!(a);
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot = kernels::dot_slice(gr, yr);
                    for c in 0..cols {
                        da[r * cols + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let (rows, cols) = last_axis(node.value.shape());
                let da = slot!(a);
                let mut p = vec![0.0; cols];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    kernels::exp_slice(yr, &mut p);
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..cols {
                        da[r * cols + c] += gr[c] - p[c] * gsum;
                    }
                }
            }
            Op::SumAll(a) => axpy_broadcast(slot!(a), g[0]),
            Op::MeanAll(a) => {
                let n = numel_of(a.0) as f64;
                axpy_broadcast(slot!(a), g[0] / n);
            }
            Op::GatherRows { src, ids } => {
                let cols = self.nodes[src.0].value.shape()[1];
                let ds = slot!(src);
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..cols {
                        ds[id * cols + c] += g[r * cols + c];
                    }
                }
            }
            Op::Gather1d { src, ids } => {
                let ds = slot!(src);
                for (r, &id) in ids.iter().enumerate() {
                    ds[id] += g[r];
                }
            }
            Op::LogSumExp(a) => {
                let va = self.nodes[a.0].value.data();
                let lse = node.value.item();
                let da = slot!(a);
                let shifted: Vec<f64> = va.iter().map(|&v| v - lse).collect();
                let mut p = vec![0.0; va.len()];
                kernels::exp_slice(&shifted, &mut p);
                for j in 0..p.len() {
                    da[j] = g[0].mul_add(p[j], da[j]);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = numel_of(p.0);
                    axpy(slot!(p), &g[off..off + n], 1.0);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total_cols = node.value.shape()[1];
                let rows = node.value.shape()[0];
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.shape()[1];
                    let dp = slot!(p);
                    for r in 0..rows {
                        for c in 0..w {
                            dp[r * w + c] += g[r * total_cols + off + c];
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { src, start, len } => {
                let cols = self.nodes[src.0].value.shape()[1];
                let rows = self.nodes[src.0].value.shape()[0];
                let ds = slot!(src);
                for r in 0..rows {
                    for c in 0..*len {
                        ds[r * cols + start + c] += g[r * len + c];
                    }
                }
            }
            Op::Reshape(src) => axpy(slot!(src), g, 1.0),
            Op::CrossEntropy { logits, targets, probs } => {
                let cols = probs.len() / targets.len();
                let dl = slot!(logits);
                for (r, &t) in targets.iter().enumerate() {
                    let coeff = g[r];
                    let pr = &probs[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        let delta = if c == t { 1.0 } else { 0.0 };
                        dl[r * cols + c] = coeff.mul_add(pr[c] - delta, dl[r * cols + c]);
                    }
                }
            }
            Op::StopGradient => {}
            Op::StraightThrough { carrier } => axpy(slot!(carrier), g, 1.0),
        }
    }
}

/// `dst += scale · g`, elementwise.
fn axpy(dst: &mut [f64], g: &[f64], scale: f64) {
    debug_assert_eq!(dst.len(), g.len());
    if scale == 1.0 {
        for (d, &v) in dst.iter_mut().zip(g) {
            *d += v;
        }
    } else {
        for (d, &v) in dst.iter_mut().zip(g) {
            *d = scale.mul_add(v, *d);
        }
    }
}

/// `dst += v` for every element.
fn axpy_broadcast(dst: &mut [f64], v: f64) {
    for d in dst.iter_mut() {
        *d += v;
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Merge a freshly computed gradient into a node's slot, accumulating if the
/// slot is already populated (parents may repeat within one op).
fn put_back(grads: &mut [Option<Vec<f64>>], idx: usize, v: Vec<f64>) {
    match &mut grads[idx] {
        Some(existing) => axpy(existing, &v, 1.0),
        slot @ None => *slot = Some(v),
    }
}

/// Rank-2 dimensions, rejecting other ranks.
fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(shape_err(op, format!("want rank 2, got {s:?}")));
    }
    Ok((s[0], s[1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_reuses_parent_and_doubles_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.5, -2.0]));
        let y = t.add(x, x).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn matmul_chain_gradients_match_hand_computation() {
        // s = Σ (A·B), A 2×2, B 2×2 → dA[i,p] = Σ_j B[p,j], dB[p,j] = Σ_i A[i,p]
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let c = t.matmul(a, b).unwrap();
        let s = t.sum_all(c).unwrap();
        assert_eq!(t.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn fused_attention_matches_op_by_op_composition() {
        // Same graph twice: once through the fused node, once spelled out as
        // matmul/softmax/matmul. Values and input gradients must agree to
        // rounding (the fused path uses a transposed kernel for the scores).
        let qd: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let kd: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).cos()).collect();
        let vd: Vec<f64> = (0..12).map(|i| (i as f64 * 0.9).sin() * 0.5).collect();

        let mut tf = Tape::new();
        let (q1, k1, v1) = (
            tf.leaf(Tensor::matrix(3, 2, qd.clone()).unwrap()),
            tf.leaf(Tensor::matrix(4, 2, kd.clone()).unwrap()),
            tf.leaf(Tensor::matrix(4, 3, vd.clone()).unwrap()),
        );
        let fused = tf.attention(q1, k1, v1).unwrap();
        assert_eq!(tf.value(fused).shape(), &[3, 3]);
        let root_f = tf.sum_all(fused).unwrap();
        let gf = tf.backward(root_f).unwrap();

        let mut tc = Tape::new();
        let (q2, k2, v2) = (
            tc.leaf(Tensor::matrix(3, 2, qd).unwrap()),
            tc.leaf(Tensor::matrix(4, 2, kd).unwrap()),
            tc.leaf(Tensor::matrix(4, 3, vd).unwrap()),
        );
        let kt = tc.transpose(k2).unwrap();
        let scores = tc.matmul(q2, kt).unwrap();
        let probs = tc.softmax(scores).unwrap();
        let composed = tc.matmul(probs, v2).unwrap();
        let root_c = tc.sum_all(composed).unwrap();
        let gc = tc.backward(root_c).unwrap();

        for (a, b) in tf.value(fused).iter().zip(tc.value(composed).iter()) {
            assert!((a - b).abs() < 1e-13, "value {a} vs {b}");
        }
        for (id_f, id_c) in [(q1, q2), (k1, k2), (v1, v2)] {
            let (df, dc) = (gf.get(id_f).unwrap(), gc.get(id_c).unwrap());
            for (a, b) in df.iter().zip(dc.iter()) {
                assert!((a - b).abs() < 1e-13, "grad {a} vs {b}");
            }
        }
    }

    #[test]
    fn fused_linear_is_bitwise_equal_to_matmul_plus_add_rows() {
        // The fused node runs the same kernel on the same operands and then
        // the same per-element bias adds, so values and every input gradient
        // must match the two-node spelling exactly — not just to rounding.
        // n = 5 exercises the matmul kernel's column-tail path.
        let xd: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let wd: Vec<f64> = (0..20).map(|i| (i as f64 * 0.61).cos()).collect();
        let bd: Vec<f64> = (0..5).map(|i| 0.1 * i as f64 - 0.2).collect();

        let mut tf = Tape::new();
        let (x1, w1, b1) = (
            tf.leaf(Tensor::matrix(3, 4, xd.clone()).unwrap()),
            tf.leaf(Tensor::matrix(4, 5, wd.clone()).unwrap()),
            tf.leaf(Tensor::vector(bd.clone())),
        );
        let fused = tf.linear(x1, w1, b1).unwrap();
        let root_f = tf.mean_all(fused).unwrap();
        let gf = tf.backward(root_f).unwrap();

        let mut tc = Tape::new();
        let (x2, w2, b2) = (
            tc.leaf(Tensor::matrix(3, 4, xd).unwrap()),
            tc.leaf(Tensor::matrix(4, 5, wd).unwrap()),
            tc.leaf(Tensor::vector(bd)),
        );
        let prod = tc.matmul(x2, w2).unwrap();
        let composed = tc.add_rows(prod, b2).unwrap();
        let root_c = tc.mean_all(composed).unwrap();
        let gc = tc.backward(root_c).unwrap();

        assert_eq!(tf.value(fused).shape(), &[3, 5]);
        assert_eq!(tf.value(fused).data(), tc.value(composed).data());
        for (id_f, id_c) in [(x1, x2), (w1, w2), (b1, b2)] {
            assert_eq!(gf.get(id_f).unwrap().data(), gc.get(id_c).unwrap().data());
        }
    }

    #[test]
    fn fused_mha_is_bitwise_equal_to_slice_per_head_composition() {
        // Head packing copies the exact values the slice nodes would hold
        // (the scale multiply included) and feeds them to the same kernels,
        // so the fused op must reproduce the slice/scale/attention/concat
        // spelling bit for bit, gradients included.
        let (m, t_rows, heads, d) = (3usize, 4usize, 3usize, 2usize);
        let hidden = heads * d;
        let scale = 1.0 / (d as f64).sqrt();
        let qd: Vec<f64> = (0..m * hidden).map(|i| (i as f64 * 0.7).sin()).collect();
        let kd: Vec<f64> = (0..t_rows * hidden).map(|i| (i as f64 * 0.3).cos()).collect();
        let vd: Vec<f64> =
            (0..t_rows * hidden).map(|i| (i as f64 * 0.9).sin() * 0.5).collect();

        let mut tf = Tape::new();
        let (q1, k1, v1) = (
            tf.leaf(Tensor::matrix(m, hidden, qd.clone()).unwrap()),
            tf.leaf(Tensor::matrix(t_rows, hidden, kd.clone()).unwrap()),
            tf.leaf(Tensor::matrix(t_rows, hidden, vd.clone()).unwrap()),
        );
        let fused = tf.mha(q1, k1, v1, heads, scale).unwrap();
        let root_f = tf.mean_all(fused).unwrap();
        let gf = tf.backward(root_f).unwrap();

        let mut tc = Tape::new();
        let (q2, k2, v2) = (
            tc.leaf(Tensor::matrix(m, hidden, qd).unwrap()),
            tc.leaf(Tensor::matrix(t_rows, hidden, kd).unwrap()),
            tc.leaf(Tensor::matrix(t_rows, hidden, vd).unwrap()),
        );
        let mut head_outs = Vec::new();
        for h in 0..heads {
            let qh = tc.slice_cols(q2, h * d, d).unwrap();
            let qh = tc.mul_scalar(qh, scale).unwrap();
            let kh = tc.slice_cols(k2, h * d, d).unwrap();
            let vh = tc.slice_cols(v2, h * d, d).unwrap();
            head_outs.push(tc.attention(qh, kh, vh).unwrap());
        }
        let composed = tc.concat_cols(&head_outs).unwrap();
        let root_c = tc.mean_all(composed).unwrap();
        let gc = tc.backward(root_c).unwrap();

        assert_eq!(tf.value(fused).shape(), &[m, hidden]);
        assert_eq!(tf.value(fused).data(), tc.value(composed).data());
        for (id_f, id_c) in [(q1, q2), (k1, k2), (v1, v2)] {
            assert_eq!(gf.get(id_f).unwrap().data(), gc.get(id_c).unwrap().data());
        }
    }

    #[test]
    fn fused_linear_and_mha_pass_finite_difference_checks() {
        let qd: Vec<f64> = (0..8).map(|i| (i as f64 * 0.5).sin()).collect();
        let kd: Vec<f64> = (0..12).map(|i| (i as f64 * 0.4).cos()).collect();
        let vd: Vec<f64> = (0..12).map(|i| (i as f64 * 0.8).sin()).collect();
        let report = crate::gradcheck::check_gradients(
            "mha",
            &[
                Tensor::matrix(2, 4, qd).unwrap(),
                Tensor::matrix(3, 4, kd).unwrap(),
                Tensor::matrix(3, 4, vd).unwrap(),
            ],
            |t, ids| {
                let a = t.mha(ids[0], ids[1], ids[2], 2, 0.5)?;
                t.mean_all(a)
            },
        )
        .unwrap();
        assert!(report.pass, "mha rel err {}", report.max_rel_err);

        let report = crate::gradcheck::check_gradients(
            "linear",
            &[
                Tensor::matrix(3, 4, (0..12).map(|i| 0.3 * i as f64 - 1.0).collect()).unwrap(),
                Tensor::matrix(4, 5, (0..20).map(|i| (i as f64 * 0.23).sin()).collect()).unwrap(),
                Tensor::vector(vec![0.4, -0.3, 0.2, -0.1, 0.05]),
            ],
            |t, ids| {
                let a = t.linear(ids[0], ids[1], ids[2])?;
                t.mean_all(a)
            },
        )
        .unwrap();
        assert!(report.pass, "linear rel err {}", report.max_rel_err);
    }

    #[test]
    fn mha_rejects_bad_head_splits_and_linear_rejects_bad_bias() {
        let mut t = Tape::new();
        let q = t.leaf(Tensor::matrix(3, 6, vec![0.0; 18]).unwrap());
        let k = t.leaf(Tensor::matrix(4, 6, vec![0.0; 24]).unwrap());
        let v = t.leaf(Tensor::matrix(4, 6, vec![0.0; 24]).unwrap());
        let err = t.mha(q, k, v, 4, 1.0).unwrap_err();
        assert!(err.to_string().contains("mha"), "{err}");
        let err = t.mha(q, k, v, 0, 1.0).unwrap_err();
        assert!(err.to_string().contains("mha"), "{err}");

        let x = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let w = t.leaf(Tensor::matrix(3, 4, vec![0.0; 12]).unwrap());
        let b = t.leaf(Tensor::vector(vec![0.0; 3]));
        let err = t.linear(x, w, b).unwrap_err();
        assert!(err.to_string().contains("linear"), "{err}");
    }

    #[test]
    fn attention_rejects_mismatched_head_dims() {
        let mut t = Tape::new();
        let q = t.leaf(Tensor::matrix(3, 2, vec![0.0; 6]).unwrap());
        let k = t.leaf(Tensor::matrix(4, 3, vec![0.0; 12]).unwrap());
        let v = t.leaf(Tensor::matrix(4, 3, vec![0.0; 12]).unwrap());
        let err = t.attention(q, k, v).unwrap_err();
        assert!(err.to_string().contains("attention"), "{err}");
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        match t.backward(x) {
            Err(Error::NonScalarRoot { shape }) => assert_eq!(shape, vec![2]),
            other => panic!("want NonScalarRoot, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_reported_with_op_name() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"), "{err}");
    }

    #[test]
    fn stop_gradient_blocks_and_straight_through_reroutes() {
        // y = sg(x)·x → dy/dx = x (only the live factor contributes)
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![3.0]));
        let frozen = t.stop_gradient(x).unwrap();
        let y = t.mul(frozen, x).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);

        // straight_through(f, c): value from f, gradient to c.
        let mut t = Tape::new();
        let f = t.leaf(Tensor::vector(vec![10.0, 20.0]));
        let c = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let st = t.straight_through(f, c).unwrap();
        assert_eq!(t.value(st).data(), &[10.0, 20.0]);
        let doubled = t.mul_scalar(st, 2.0).unwrap();
        let s = t.sum_all(doubled).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(f).is_none());
        assert_eq!(g.get(c).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_equals_negated_log_softmax_bitwise() {
        let logits = vec![0.3, -1.2, 2.2, 0.0, 0.7];
        for target in 0..5 {
            let mut t = Tape::new();
            let x = t.leaf(Tensor::vector(logits.clone()));
            let ls = t.log_softmax(x).unwrap();
            let ce = t.cross_entropy(x, &[target]).unwrap();
            let want = -t.value(ls).data()[target];
            let got = t.value(ce).item();
            assert_eq!(got.to_bits(), want.to_bits(), "target {target}");
        }
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![0.1, 0.9, -0.4]));
        let ce = t.cross_entropy(x, &[1]).unwrap();
        let g = t.backward(ce).unwrap();
        let mut probs = vec![0.0; 3];
        ops::softmax_rows(t.value(x).data(), &mut probs, 1, 3);
        let got = g.get(x).unwrap().data();
        for j in 0..3 {
            let want = probs[j] - if j == 1 { 1.0 } else { 0.0 };
            assert!((got[j] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn batched_cross_entropy_mean_reaches_every_row() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(2, 3, vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.2]).unwrap());
        let ce = t.cross_entropy(x, &[2, 0]).unwrap();
        assert_eq!(t.value(ce).shape(), &[2]);
        let m = t.mean_all(ce).unwrap();
        let g = t.backward(m).unwrap();
        let gd = g.get(x).unwrap();
        // Each row's gradient sums to zero (softmax minus one-hot, scaled).
        let row0: f64 = gd.data()[..3].iter().sum();
        let row1: f64 = gd.data()[3..].iter().sum();
        assert!(row0.abs() < 1e-15 && row1.abs() < 1e-15);
        assert!(gd.data()[2] < 0.0 && gd.data()[3] < 0.0, "target entries pull down");
    }

    #[test]
    fn gather_accumulates_repeated_indices() {
        let mut t = Tape::new();
        let table = t.leaf(Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let picked = t.gather_rows(table, &[1, 1, 2]).unwrap();
        assert_eq!(t.value(picked).data(), &[3.0, 4.0, 3.0, 4.0, 5.0, 6.0]);
        let s = t.sum_all(picked).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(table).unwrap().data(), &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn logsumexp_gradient_is_softmax() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let l = t.logsumexp(x).unwrap();
        let g = t.backward(l).unwrap();
        let mut sm = vec![0.0; 3];
        ops::softmax_rows(t.value(x).data(), &mut sm, 1, 3);
        // Backward uses exp(x − lse); softmax_rows uses exp(x − max)/Σ. Both
        // are ~1e-13 accurate, so they agree to that order, not exactly.
        for (a, b) in g.get(x).unwrap().data().iter().zip(&sm) {
            assert!((a - b).abs() < 1e-12);
        }
        let direct: f64 = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln();
        assert!((t.value(l).item() - direct).abs() < 1e-12);
    }

    #[test]
    fn concat_and_slice_round_trip_gradients() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.leaf(Tensor::matrix(2, 1, vec![9.0, 8.0]).unwrap());
        let cc = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(cc).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let right = t.slice_cols(cc, 2, 1).unwrap();
        assert_eq!(t.value(right).data(), &[9.0, 8.0]);
        let s = t.sum_all(right).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(g.get(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn conv1d_output_shape_and_known_values() {
        // Single channel, identity-ish kernel: k=1, stride 1, padding 0.
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = t.leaf(Tensor::new(&[1, 1, 1], vec![2.0]).unwrap());
        let b = t.leaf(Tensor::vector(vec![0.5]));
        let y = t.conv1d(x, w, b, 1, 0).unwrap();
        assert_eq!(t.value(y).shape(), &[1, 1, 4]);
        assert_eq!(t.value(y).data(), &[2.5, 4.5, 6.5, 8.5]);
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0, 2.0]);
        assert_eq!(g.get(w).unwrap().data(), &[10.0]);
        assert_eq!(g.get(b).unwrap().data(), &[4.0]);
    }

    #[test]
    fn interior_gradients_are_not_exposed() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::vector(vec![2.0]));
        let y = t.mul_scalar(x, 3.0).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(y).is_none());
        assert!(g.get(s).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn softmax_rows_backward_matches_finite_differences() {
        let mut t = Tape::new();
        let vals = vec![0.5, -0.2, 0.8, 1.1, 0.0, -0.7];
        let x = t.leaf(Tensor::matrix(2, 3, vals.clone()).unwrap());
        let y = t.softmax(x).unwrap();
        // Weighted sum so the gradient is non-trivial per element.
        let w = t.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.3, 2.0, -1.0]).unwrap());
        let prod = t.mul(y, w).unwrap();
        let s = t.sum_all(prod).unwrap();
        let g = t.backward(s).unwrap();
        let gd = g.get(x).unwrap().data().to_vec();
        let f = |v: &[f64]| -> f64 {
            let mut sm = vec![0.0; 6];
            ops::softmax_rows(v, &mut sm, 2, 3);
            sm.iter()
                .zip(&[1.0, -2.0, 0.5, 0.3, 2.0, -1.0])
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        for i in 0..6 {
            let mut vp = vals.clone();
            let mut vm = vals.clone();
            vp[i] += h;
            vm[i] -= h;
            let fd = (f(&vp) - f(&vm)) / (2.0 * h);
            assert!((fd - gd[i]).abs() < 1e-8, "softmax dx[{i}]: {fd} vs {}", gd[i]);
        }
    }
}
