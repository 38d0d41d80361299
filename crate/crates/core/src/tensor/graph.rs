//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and enough of the forward state to run its local backward rule. Nodes are
//! appended in evaluation order, so reverse index order is a valid
//! topological order and each node is visited exactly once. A graph is built
//! per step and dropped after `backward`.
//!
//! Shape errors while building a graph are programming errors and panic.

use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::params::{ParamId, ParamStore};
use super::{Tensor, TensorError};
use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

/// One attention problem inside a batched [`Graph::attention`] call:
/// `q_len` query rows starting at `q_start` attend over `kv_len` key/value
/// rows starting at `kv_start`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub kv_start: usize,
    pub kv_len: usize,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Recip(Var),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        rstd: Vec<f64>,
    },
    RowL2Normalize {
        x: Var,
        eps: f64,
        norms: Vec<f64>,
    },
    RowNorm(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    RowSum(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    GatherRows {
        sources: Vec<Var>,
        index: Vec<Option<(usize, usize)>>,
    },
    FeatureEmbed {
        x: Vec<f64>,
        w: Var,
        b: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        scale: f64,
        probs: Vec<f64>,
    },
    Focal {
        logits: Var,
        labels: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of one backward pass, kept for leaf nodes only.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a leaf created by [`Graph::leaf`] or
    /// [`Graph::param`]; `None` if nothing reached it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                let dst = store.grad_mut(id).data_mut();
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += s;
                }
            }
        }
    }
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn assert_same_shape(op: &str, a: &Tensor, b: &Tensor) {
    assert!(
        a.shape() == b.shape(),
        "{op}: shape mismatch {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + math::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = math::exp(-0.5 * x * x) / math::sqrt(2.0 * core::f64::consts::PI);
    cdf + x * pdf
}

fn focal_terms(z: f64, y: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    const FLOOR: f64 = 1e-12;
    let p = math::sigmoid(z);
    if y > 0.5 {
        let q = 1.0 - p;
        let logp = math::log_sigmoid(z).max(math::ln(FLOOR));
        let w = math::pow(q, gamma);
        let loss = -alpha * w * logp;
        let grad = alpha * w * (gamma * p * logp - q);
        (loss, grad)
    } else {
        let log1mp = math::log_sigmoid(-z).max(math::ln(FLOOR));
        let w = math::pow(p, gamma);
        let loss = -(1.0 - alpha) * w * log1mp;
        let grad = (1.0 - alpha) * w * (p - gamma * (1.0 - p) * log1mp);
        (loss, grad)
    }
}

/// Focal loss of one logit, shared with the eager evaluation path.
pub(crate) fn focal_value(z: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    focal_terms(z, y, alpha, gamma).0
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; nothing in it requires gradients.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient (when the graph records gradients).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: t,
            op: Op::Input,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let needs_grad = self.grad_enabled;
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter read as a constant: gradient flow into it is suppressed.
    pub fn param_frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.input(store.value(id).clone())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b)).unwrap_or_else(|e| panic!("{e}"));
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a[m×n]`, `b[k×n]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(
            av.shape().len() == 2 && bv.shape().len() == 2 && av.shape()[1] == bv.shape()[1],
            "matmul_nt: shape mismatch {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        let (m, n, k) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut out = vec![0.0; m * k];
        gemm_nt(av.data(), bv.data(), &mut out, m, n, k);
        let t = Tensor::matrix(m, k, out).unwrap();
        self.push(t, Op::MatMulNT(a, b), &[a, b])
    }

    fn zip(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        assert_same_shape(name, av, bv);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), data).unwrap()
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|x| f(*x)).collect()).unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, "add", |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, "sub", |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip(a, b, "mul", |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    /// Adds the vector `b` (length = last-axis width of `x`) to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        assert_eq!(bv.len(), c, "add_row: width mismatch");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x, b), &[x, b])
    }

    /// Multiplies every row of `x` elementwise by the vector `s`.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Var {
        let (xv, sv) = (self.value(x), self.value(s));
        let c = xv.cols();
        assert_eq!(sv.len(), c, "mul_row: width mismatch");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            for (o, ss) in row.iter_mut().zip(sv.data()) {
                *o *= ss;
            }
        }
        self.push(out, Op::MulRow(x, s), &[x, s])
    }

    pub fn scale(&mut self, x: Var, a: f64) -> Var {
        let t = self.map(x, |v| v * a);
        self.push(t, Op::Scale(x, a), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v + c);
        self.push(t, Op::AddScalar(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v * v);
        self.push(t, Op::Square(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, math::exp);
        self.push(t, Op::Exp(x), &[x])
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let t = self.map(x, math::ln);
        self.push(t, Op::Ln(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let t = self.map(x, math::sqrt);
        self.push(t, Op::Sqrt(x), &[x])
    }

    pub fn recip(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| 1.0 / v);
        self.push(t, Op::Recip(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x), &[x])
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.map(x, gelu);
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let c = t.cols().max(1);
        for row in t.data_mut().chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        self.push(t, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let mut t = self.value(x).clone();
        let c = t.cols().max(1);
        for row in t.data_mut().chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>());
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(t, Op::LogSoftmaxRows(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let (gv, bv) = (self.value(gain), self.value(bias));
        assert!(gv.len() == c && bv.len() == c, "layer_norm: width mismatch");
        let rows = xv.rows();
        let mut out = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let (_, s) = kernels::layer_norm_row(
                &xv.data()[r * c..(r + 1) * c],
                gv.data(),
                bv.data(),
                eps,
                &mut out[r * c..(r + 1) * c],
            );
            rstd.push(s);
        }
        let t = Tensor::new(xv.shape().to_vec(), out).unwrap();
        self.push(t, Op::LayerNorm { x, gain, bias, rstd }, &[x, gain, bias])
    }

    /// Divides every row by `max(‖row‖, eps)`.
    pub fn row_l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let mut t = self.value(x).clone();
        let c = t.cols().max(1);
        let mut norms = Vec::with_capacity(t.rows());
        for row in t.data_mut().chunks_mut(c) {
            let n = math::sqrt(dot(row, row));
            let d = n.max(eps);
            row.iter_mut().for_each(|v| *v /= d);
            norms.push(n);
        }
        self.push(t, Op::RowL2Normalize { x, eps, norms }, &[x])
    }

    /// Euclidean norm of every row, shape `[rows]`. The gradient at a zero
    /// row is taken as zero.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols().max(1);
        let data: Vec<f64> = xv.data().chunks(c).map(|r| math::sqrt(dot(r, r))).collect();
        let t = Tensor::new(vec![data.len()], data).unwrap();
        self.push(t, Op::RowNorm(x), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose().unwrap_or_else(|e| panic!("{e}"));
        self.push(t, Op::Transpose(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column sums: `[R×C] -> [C]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = vec![0.0; c];
        for row in xv.data().chunks(c.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        self.push(Tensor::new(vec![c], out).unwrap(), Op::SumRows(x), &[x])
    }

    /// Row sums: `[R×C] -> [R]`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols().max(1);
        let out: Vec<f64> = xv.data().chunks(c).map(|r| r.iter().sum()).collect();
        self.push(Tensor::new(vec![out.len()], out).unwrap(), Op::RowSum(x), &[x])
    }

    /// Flat elementwise gather: `out[i] = x.data[index[i]]`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Var {
        let xv = self.value(x);
        let out: Vec<f64> = index.iter().map(|&i| xv.data()[i]).collect();
        let t = Tensor::new(vec![out.len()], out).unwrap();
        self.push(t, Op::Gather { x, index }, &[x])
    }

    /// Builds a matrix whose row `i` is row `index[i].1` of
    /// `sources[index[i].0]`, or zeros for `None`. All sources must share the
    /// last-axis width.
    pub fn gather_rows(&mut self, sources: &[Var], index: Vec<Option<(usize, usize)>>) -> Var {
        let cols = self.value(sources[0]).cols();
        for s in sources {
            assert_eq!(self.value(*s).cols(), cols, "gather_rows: width mismatch");
        }
        let mut out = vec![0.0; index.len() * cols];
        for (i, ix) in index.iter().enumerate() {
            if let Some((s, r)) = *ix {
                out[i * cols..(i + 1) * cols].copy_from_slice(self.value(sources[s]).row(r));
            }
        }
        let t = Tensor::matrix(index.len(), cols, out).unwrap();
        let srcs = sources.to_vec();
        self.push(t, Op::GatherRows { sources: srcs, index }, sources)
    }

    /// Per-feature affine embedding of constant scalar features.
    ///
    /// `x` holds `n` rows of `D` features; `w`, `b` are `[D×d]`. Output row
    /// `r·D + i` is `x[r][i]·w[i] + b[i]`.
    pub fn feature_embed(&mut self, x: Vec<f64>, w: Var, b: Var) -> Var {
        let (wv, bv) = (self.value(w), self.value(b));
        assert_same_shape("feature_embed", wv, bv);
        let (dim_in, d) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(x.len() % dim_in, 0, "feature_embed: width mismatch");
        let mut out = Vec::with_capacity(x.len() * d);
        for (j, xv) in x.iter().enumerate() {
            let i = j % dim_in;
            let (wr, br) = (wv.row(i), bv.row(i));
            out.extend(wr.iter().zip(br).map(|(a, c)| xv * a + c));
        }
        let t = Tensor::matrix(x.len(), d, out).unwrap();
        self.push(t, Op::FeatureEmbed { x, w, b }, &[w, b])
    }

    /// Batched scaled dot-product attention.
    ///
    /// `q`, `k`, `v` are `[rows×d]` with `d` divisible by `heads`; each head
    /// uses a contiguous column block. Output rows follow segment order.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: Vec<Segment>, heads: usize, scale: f64) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert!(
            kv.cols() == d && vv.cols() == d && d % heads == 0,
            "attention: widths {} {} {} with {} heads",
            d,
            kv.cols(),
            vv.cols(),
            heads
        );
        let dh = d / heads;
        let out_rows: usize = segments.iter().map(|s| s.q_len).sum();
        let prob_len: usize = segments.iter().map(|s| s.q_len * s.kv_len).sum::<usize>() * heads;
        let mut out = vec![0.0; out_rows * d];
        let mut probs = Vec::with_capacity(prob_len);
        let mut orow = 0;
        let mut scores = Vec::new();
        for s in &segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..s.q_len {
                    let qr = &qv.row(s.q_start + i)[cols.clone()];
                    scores.clear();
                    for j in 0..s.kv_len {
                        scores.push(scale * dot(qr, &kv.row(s.kv_start + j)[cols.clone()]));
                    }
                    kernels::softmax_in_place(&mut scores);
                    let dst = &mut out[(orow + i) * d + h * dh..(orow + i) * d + (h + 1) * dh];
                    for (j, p) in scores.iter().enumerate() {
                        axpy(*p, &vv.row(s.kv_start + j)[cols.clone()], dst);
                    }
                    probs.extend_from_slice(&scores);
                }
            }
            orow += s.q_len;
        }
        let t = Tensor::matrix(out_rows, d, out).unwrap();
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                scale,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Post-softmax probabilities recorded by an attention node, laid out as
    /// `[segment][head][q_len][kv_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&[f64], &[Segment], usize)> {
        match &self.nodes[v.0].op {
            Op::Attention {
                probs, segments, heads, ..
            } => Some((probs, segments, *heads)),
            _ => None,
        }
    }

    /// Mean binary focal loss over a vector of logits.
    pub fn focal_loss(&mut self, logits: Var, labels: &[f64], alpha: f64, gamma: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.len(), labels.len(), "focal_loss: label count");
        let n = labels.len() as f64;
        let total: f64 = lv
            .data()
            .iter()
            .zip(labels)
            .map(|(z, y)| focal_terms(*z, *y, alpha, gamma).0)
            .sum();
        self.push(
            Tensor::scalar(total / n),
            Op::Focal {
                logits,
                labels: labels.to_vec(),
                alpha,
                gamma,
            },
            &[logits],
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params = Vec::new();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match node.op {
                Op::Input => continue,
                Op::Param(id) => {
                    params.push((id, i));
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        params.reverse();
        Ok(Gradients { grads, params })
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl Fn(usize) -> f64) {
        if let Some(b) = self.buf(grads, v) {
            for (i, d) in b.iter_mut().enumerate() {
                *d += f(i);
            }
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let y = node.value.data();
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, k, n) = (at.shape()[0], at.shape()[1], bt.shape()[1]);
                if let Some(da) = self.buf(grads, *a) {
                    gemm_nt(g, bt.data(), da, m, n, k);
                }
                if let Some(db) = self.buf(grads, *b) {
                    gemm_tn(at.data(), g, db, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (at, bt) = (self.value(*a), self.value(*b));
                let (m, n, k) = (at.shape()[0], at.shape()[1], bt.shape()[0]);
                if let Some(da) = self.buf(grads, *a) {
                    gemm_nn(g, bt.data(), da, m, k, n);
                }
                if let Some(db) = self.buf(grads, *b) {
                    gemm_tn(g, at.data(), db, m, k, n);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |i| g[i]);
                self.acc(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |i| g[i]);
                self.acc(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.acc(grads, *a, |i| g[i] * bv[i]);
                self.acc(grads, *b, |i| g[i] * av[i]);
            }
            Op::AddRow(x, b) => {
                let c = node.value.cols().max(1);
                self.acc(grads, *x, |i| g[i]);
                if let Some(db) = self.buf(grads, *b) {
                    for row in g.chunks(c) {
                        for (d, gv) in db.iter_mut().zip(row) {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MulRow(x, s) => {
                let c = node.value.cols().max(1);
                let (xv, sv) = (val(*x), val(*s));
                self.acc(grads, *x, |i| g[i] * sv[i % c]);
                if let Some(ds) = self.buf(grads, *s) {
                    for (gr, xr) in g.chunks(c).zip(xv.chunks(c)) {
                        for j in 0..c {
                            ds[j] += gr[j] * xr[j];
                        }
                    }
                }
            }
            Op::Scale(x, a) => self.acc(grads, *x, |i| a * g[i]),
            Op::AddScalar(x) => self.acc(grads, *x, |i| g[i]),
            Op::Square(x) => {
                let xv = val(*x);
                self.acc(grads, *x, |i| 2.0 * xv[i] * g[i]);
            }
            Op::Exp(x) => self.acc(grads, *x, |i| y[i] * g[i]),
            Op::Ln(x) => {
                let xv = val(*x);
                self.acc(grads, *x, |i| g[i] / xv[i]);
            }
            Op::Sqrt(x) => self.acc(grads, *x, |i| if y[i] > 0.0 { g[i] / (2.0 * y[i]) } else { 0.0 }),
            Op::Recip(x) => self.acc(grads, *x, |i| -g[i] * y[i] * y[i]),
            Op::Relu(x) => {
                let xv = val(*x);
                self.acc(grads, *x, |i| if xv[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Gelu(x) => {
                let xv = val(*x);
                self.acc(grads, *x, |i| g[i] * gelu_grad(xv[i]));
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.cols().max(1);
                if let Some(dx) = self.buf(grads, *x) {
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s = dot(gr, yr);
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(x) => {
                let c = node.value.cols().max(1);
                if let Some(dx) = self.buf(grads, *x) {
                    for ((dr, gr), yr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let s: f64 = gr.iter().sum();
                        for j in 0..c {
                            dr[j] += gr[j] - math::exp(yr[j]) * s;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, rstd } => {
                let xv = val(*x);
                let gv = val(*gain);
                let c = node.value.cols().max(1);
                let rows = rstd.len();
                let mut xhat = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                let mut dgain = vec![0.0; c];
                let mut dbias = vec![0.0; c];
                let mut dx_all = vec![0.0; xv.len()];
                for r in 0..rows {
                    let xr = &xv[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mean = xr.iter().sum::<f64>() / c as f64;
                    for j in 0..c {
                        xhat[j] = (xr[j] - mean) * rstd[r];
                        dxhat[j] = gr[j] * gv[j];
                        dgain[j] += gr[j] * xhat[j];
                        dbias[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / c as f64;
                    let m2 = dot(&dxhat, &xhat) / c as f64;
                    for j in 0..c {
                        dx_all[r * c + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                self.acc(grads, *x, |i| dx_all[i]);
                self.acc(grads, *gain, |i| dgain[i]);
                self.acc(grads, *bias, |i| dbias[i]);
            }
            Op::RowL2Normalize { x, eps, norms } => {
                let c = node.value.cols().max(1);
                if let Some(dx) = self.buf(grads, *x) {
                    for (r, n) in norms.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let dr = &mut dx[r * c..(r + 1) * c];
                        if *n > *eps {
                            let s = dot(gr, yr);
                            for j in 0..c {
                                dr[j] += (gr[j] - yr[j] * s) / n;
                            }
                        } else {
                            for j in 0..c {
                                dr[j] += gr[j] / eps;
                            }
                        }
                    }
                }
            }
            Op::RowNorm(x) => {
                let xv = val(*x);
                let c = self.value(*x).cols().max(1);
                self.acc(grads, *x, |i| {
                    let r = i / c;
                    if y[r] > 0.0 {
                        g[r] * xv[i] / y[r]
                    } else {
                        0.0
                    }
                });
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let gt = kernels::transpose(g, s[0], s[1]);
                self.acc(grads, *x, |i| gt[i]);
            }
            Op::Sum(x) => self.acc(grads, *x, |_| g[0]),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                self.acc(grads, *x, |_| g[0] / n);
            }
            Op::SumRows(x) => {
                let c = node.value.len().max(1);
                self.acc(grads, *x, |i| g[i % c]);
            }
            Op::RowSum(x) => {
                let c = self.value(*x).cols().max(1);
                self.acc(grads, *x, |i| g[i / c]);
            }
            Op::Gather { x, index } => {
                if let Some(dx) = self.buf(grads, *x) {
                    for (gi, &ix) in g.iter().zip(index) {
                        dx[ix] += gi;
                    }
                }
            }
            Op::GatherRows { sources, index } => {
                let c = node.value.cols().max(1);
                for (i, ix) in index.iter().enumerate() {
                    if let Some((s, r)) = *ix {
                        if let Some(ds) = self.buf(grads, sources[s]) {
                            for (d, gv) in ds[r * c..(r + 1) * c].iter_mut().zip(&g[i * c..]) {
                                *d += gv;
                            }
                        }
                    }
                }
            }
            Op::FeatureEmbed { x, w, b } => {
                let dim_in = self.value(*w).shape()[0];
                let d = node.value.cols();
                if let Some(dw) = self.buf(grads, *w) {
                    for (j, xv) in x.iter().enumerate() {
                        let i = j % dim_in;
                        axpy(*xv, &g[j * d..(j + 1) * d], &mut dw[i * d..(i + 1) * d]);
                    }
                }
                if let Some(db) = self.buf(grads, *b) {
                    for j in 0..x.len() {
                        let i = j % dim_in;
                        axpy(1.0, &g[j * d..(j + 1) * d], &mut db[i * d..(i + 1) * d]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                scale,
                probs,
            } => self.attention_backward(g, *q, *k, *v, segments, *heads, *scale, probs, grads),
            Op::Focal {
                logits,
                labels,
                alpha,
                gamma,
            } => {
                let z = val(*logits);
                let n = labels.len() as f64;
                self.acc(grads, *logits, |i| {
                    g[0] * focal_terms(z[i], labels[i], *alpha, *gamma).1 / n
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[f64],
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        scale: f64,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let mut dq = self.nodes[q.0].needs_grad.then(|| vec![0.0; qv.len()]);
        let mut dk = self.nodes[k.0].needs_grad.then(|| vec![0.0; kv.len()]);
        let mut dv = self.nodes[v.0].needs_grad.then(|| vec![0.0; vv.len()]);
        let mut pofs = 0;
        let mut orow = 0;
        let mut dp = Vec::new();
        for s in segments {
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..s.q_len {
                    let p = &probs[pofs..pofs + s.kv_len];
                    pofs += s.kv_len;
                    let go = &g[(orow + i) * d + c0..(orow + i) * d + c0 + dh];
                    dp.clear();
                    for j in 0..s.kv_len {
                        let vr = &vv.data()[(s.kv_start + j) * d + c0..][..dh];
                        dp.push(dot(go, vr));
                        if let Some(dv) = dv.as_mut() {
                            axpy(p[j], go, &mut dv[(s.kv_start + j) * d + c0..][..dh]);
                        }
                    }
                    let sdot = dot(&dp, p);
                    let qr = &qv.data()[(s.q_start + i) * d + c0..][..dh];
                    for j in 0..s.kv_len {
                        let ds = p[j] * (dp[j] - sdot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kr = &kv.data()[(s.kv_start + j) * d + c0..][..dh];
                        if let Some(dq) = dq.as_mut() {
                            axpy(ds, kr, &mut dq[(s.q_start + i) * d + c0..][..dh]);
                        }
                        if let Some(dk) = dk.as_mut() {
                            axpy(ds, qr, &mut dk[(s.kv_start + j) * d + c0..][..dh]);
                        }
                    }
                }
            }
            orow += s.q_len;
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(b) = buf {
                self.acc(grads, var, |i| b[i]);
            }
        }
    }
}
