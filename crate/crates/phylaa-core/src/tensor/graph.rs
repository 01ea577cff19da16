//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Each op validates shapes, computes its forward value immediately, and
//! records what backward needs. `backward` walks the tape in exact reverse
//! insertion order. A graph is confined to one thread and is dropped (or
//! rebuilt) between optimizer steps; a second `backward` on the same graph
//! is a contract error.

use super::conv::{col2im_acc, im2col};
use super::gemm::{gemm_acc, gemm_acc_at, gemm_acc_bt};
use super::{strides_of, Tensor};
use crate::{Error, Result};
use rand::Rng;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulBcast(Var, Var),
    AddBcast(Var, Var),
    Matmul(Var, Var),
    Transpose2d(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LogSigmoid(Var),
    PowConst(Var, f64),
    Softmax(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    Conv2d { input: Var, weight: Var, pad: usize, cols: Vec<f64> },
    CausalConv1d { input: Var, weight: Var, dilation: usize },
    AvgPool2(Var),
    Dropout { input: Var, mask: Vec<f64> },
    LayerNorm { input: Var, gamma: Var, beta: Var, mean: Vec<f64>, inv_std: Vec<f64> },
    ConcatAxis(Var, Var, usize),
    IndexAxis { input: Var, axis: usize, index: usize },
    StackAxis { parts: Vec<Var>, axis: usize },
    SpatialGrad(Var),
    RowCosine { a: Var, b: Var, saved: Vec<CosineRow> },
    BceMean { probs: Var, target: Vec<f64> },
}

#[derive(Clone, Copy)]
struct CosineRow {
    dot: f64,
    norm_a: f64,
    norm_b: f64,
    guarded: bool,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode tape. Build ops through the methods; call [`Graph::backward`]
/// once on a scalar loss; read gradients back with [`Graph::grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
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

    /// Registers a tensor as a graph input. Gradients are tracked when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    /// Convenience leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    /// Gradient of the loss w.r.t. `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs: bool) -> Var {
        let t = Tensor { shape, data, grad: None, requires_grad: false };
        self.push(t, op, needs)
    }

    // ---- elementwise -----------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: shape {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = zip(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(self.shape(a).to_vec(), data, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = zip(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x - y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(self.shape(a).to_vec(), data, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = zip(&self.nodes[a.0].value.data, &self.nodes[b.0].value.data, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(self.shape(a).to_vec(), data, Op::Mul(a, b), needs))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|x| -x).collect();
        let needs = self.needs(a);
        self.out(self.shape(a).to_vec(), data, Op::Neg(a), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|x| x * c).collect();
        let needs = self.needs(a);
        self.out(self.shape(a).to_vec(), data, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|x| x + c).collect();
        let needs = self.needs(a);
        self.out(self.shape(a).to_vec(), data, Op::AddScalar(a), needs)
    }

    fn bcast_check(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != sb.len()
            || sa.iter().zip(sb).any(|(&x, &y)| y != 1 && y != x)
        {
            return Err(Error::Dimension(format!(
                "{what}: cannot broadcast {:?} onto {:?}",
                sb, sa
            )));
        }
        Ok(())
    }

    /// Elementwise product where `b` may have extent-1 axes broadcast over `a`.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast_check(a, b, "mul_bcast")?;
        let map = BcastMap::new(self.shape(a), self.shape(b));
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let data: Vec<f64> = av.iter().enumerate().map(|(i, x)| x * bv[map.index(i)]).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(self.shape(a).to_vec(), data, Op::MulBcast(a, b), needs))
    }

    /// Elementwise sum where `b` may have extent-1 axes broadcast over `a`.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bcast_check(a, b, "add_bcast")?;
        let map = BcastMap::new(self.shape(a), self.shape(b));
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let data: Vec<f64> = av.iter().enumerate().map(|(i, x)| x + bv[map.index(i)]).collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(self.shape(a).to_vec(), data, Op::AddBcast(a, b), needs))
    }

    // ---- shape ------------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.nodes[a.0].value.len() {
            return Err(Error::Dimension(format!(
                "reshape: {} elements into {:?}",
                self.nodes[a.0].value.len(),
                shape
            )));
        }
        let data = self.nodes[a.0].value.data.clone();
        let needs = self.needs(a);
        Ok(self.out(shape, data, Op::Reshape(a), needs))
    }

    /// Swaps the trailing two axes.
    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() < 2 {
            return Err(Error::Dimension("transpose2d needs rank >= 2".into()));
        }
        let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; src.len()];
        for bidx in 0..batch {
            let s = &src[bidx * r * c..(bidx + 1) * r * c];
            let d = &mut data[bidx * r * c..(bidx + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    d[j * r + i] = s[i * c + j];
                }
            }
        }
        let mut shape = sa.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let needs = self.needs(a);
        Ok(self.out(shape, data, Op::Transpose2d(a), needs))
    }

    /// Arbitrary axis permutation.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if perm.len() != sa.len() {
            return Err(Error::Dimension("permute: rank mismatch".into()));
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || seen[p] {
                return Err(Error::Dimension("permute: invalid permutation".into()));
            }
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| sa[p]).collect();
        let data = permute_data(&self.nodes[a.0].value.data, &sa, perm);
        let needs = self.needs(a);
        Ok(self.out(out_shape, data, Op::Permute(a, perm.to_vec()), needs))
    }

    pub fn concat_axis(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || axis >= sa.len() {
            return Err(Error::Dimension("concat: rank/axis mismatch".into()));
        }
        for i in 0..sa.len() {
            if i != axis && sa[i] != sb[i] {
                return Err(Error::Dimension(format!(
                    "concat: shapes {:?} and {:?} differ off-axis",
                    sa, sb
                )));
            }
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let (ea, eb) = (sa[axis], sb[axis]);
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for o in 0..outer {
            data.extend_from_slice(&av[o * ea * inner..(o + 1) * ea * inner]);
            data.extend_from_slice(&bv[o * eb * inner..(o + 1) * eb * inner]);
        }
        let mut shape = sa;
        shape[axis] = ea + eb;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, Op::ConcatAxis(a, b, axis), needs))
    }

    /// Selects one index along `axis`, dropping that axis.
    pub fn index_axis(&mut self, a: Var, axis: usize, index: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() || index >= sa[axis] {
            return Err(Error::Dimension(format!(
                "index_axis: axis {axis} index {index} out of {:?}",
                sa
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let e = sa[axis];
        let src = &self.nodes[a.0].value.data;
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = (o * e + index) * inner;
            data.extend_from_slice(&src[base..base + inner]);
        }
        let mut shape = sa;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let needs = self.needs(a);
        Ok(self.out(shape, data, Op::IndexAxis { input: a, axis, index }, needs))
    }

    /// Stacks same-shape parts along a new axis inserted at `axis`.
    pub fn stack_axis(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Input("stack of nothing".into()))?;
        let sp = self.shape(first).to_vec();
        if axis > sp.len() {
            return Err(Error::Dimension("stack: axis out of range".into()));
        }
        for &p in parts {
            if self.shape(p) != sp.as_slice() {
                return Err(Error::Dimension("stack: mismatched part shapes".into()));
            }
        }
        let outer: usize = sp[..axis].iter().product();
        let inner: usize = sp[axis..].iter().product();
        let count = parts.len();
        let mut data = vec![0.0; outer * count * inner];
        for (pi, &p) in parts.iter().enumerate() {
            let src = &self.nodes[p.0].value.data;
            for o in 0..outer {
                let dst = (o * count + pi) * inner;
                data[dst..dst + inner].copy_from_slice(&src[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = sp;
        shape.insert(axis, count);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.out(shape, data, Op::StackAxis { parts: parts.to_vec(), axis }, needs))
    }

    // ---- activations -------------------------------------------------------

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|&x| super::sigmoid_scalar(x)).collect();
        let needs = self.needs(a);
        self.out(self.shape(a).to_vec(), data, Op::Sigmoid(a), needs)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|x| x.tanh()).collect();
        let needs = self.needs(a);
        self.out(self.shape(a).to_vec(), data, Op::Tanh(a), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let needs = self.needs(a);
        self.out(self.shape(a).to_vec(), data, Op::Relu(a), needs)
    }

    /// log(sigmoid(x)) computed as -softplus(-x); stable for large |x|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let data = self
            .nodes[a.0]
            .value
            .data
            .iter()
            .map(|&x| if x >= 0.0 { -(-x).exp().ln_1p() } else { x - x.exp().ln_1p() })
            .collect();
        let needs = self.needs(a);
        self.out(self.shape(a).to_vec(), data, Op::LogSigmoid(a), needs)
    }

    /// Elementwise x^c for nonnegative bases.
    pub fn pow_const(&mut self, a: Var, c: f64) -> Var {
        let data = self.nodes[a.0].value.data.iter().map(|x| x.powf(c)).collect();
        let needs = self.needs(a);
        self.out(self.shape(a).to_vec(), data, Op::PowConst(a, c), needs)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Dimension(format!("softmax: axis {axis} out of {:?}", sa)));
        }
        let (outer, e, inner) = axis_split(&sa, axis);
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * e + j) * inner + i;
                let mut m = f64::NEG_INFINITY;
                for j in 0..e {
                    m = m.max(src[at(j)]);
                }
                let mut denom = 0.0;
                for j in 0..e {
                    let v = (src[at(j)] - m).exp();
                    data[at(j)] = v;
                    denom += v;
                }
                for j in 0..e {
                    data[at(j)] /= denom;
                }
            }
        }
        let needs = self.needs(a);
        Ok(self.out(sa, data, Op::Softmax(a, axis), needs))
    }

    // ---- reductions ---------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let needs = self.needs(a);
        self.out(vec![1], vec![s], Op::SumAll(a), needs)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s: f64 = self.nodes[a.0].value.data.iter().sum::<f64>() / n as f64;
        let needs = self.needs(a);
        self.out(vec![1], vec![s], Op::MeanAll(a), needs)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if axis >= sa.len() {
            return Err(Error::Dimension(format!("reduce: axis {axis} out of {:?}", sa)));
        }
        let (outer, e, inner) = axis_split(&sa, axis);
        let norm = if mean { 1.0 / e as f64 } else { 1.0 };
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..e {
                let base = (o * e + j) * inner;
                let dst = &mut data[o * inner..(o + 1) * inner];
                for i in 0..inner {
                    dst[i] += src[base + i];
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v *= norm);
        }
        let mut shape = sa;
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let op = if mean { Op::MeanAxis(a, axis) } else { Op::SumAxis(a, axis) };
        let needs = self.needs(a);
        Ok(self.out(shape, data, op, needs))
    }

    // ---- linear algebra ------------------------------------------------------

    /// Batched matrix product. Leading (batch) axes must match exactly; a
    /// rank-2 operand is broadcast across the other side's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Dimension("matmul needs rank >= 2".into()));
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul: inner extents {} vs {} ({:?} x {:?})",
                ka, kb, sa, sb
            )));
        }
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let batch_b: usize = sb[..sb.len() - 2].iter().product();
        let (batch, lead): (usize, Vec<usize>) = if sa.len() == 2 && sb.len() == 2 {
            (1, vec![])
        } else if sb.len() == 2 {
            (batch_a, sa[..sa.len() - 2].to_vec())
        } else if sa.len() == 2 {
            (batch_b, sb[..sb.len() - 2].to_vec())
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(Error::Dimension(format!(
                    "matmul: batch dims {:?} vs {:?}",
                    &sa[..sa.len() - 2],
                    &sb[..sb.len() - 2]
                )));
            }
            (batch_a, sa[..sa.len() - 2].to_vec())
        };
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut data = vec![0.0; batch * m * n];
        for t in 0..batch {
            let ab = if sa.len() == 2 { av } else { &av[t * m * ka..(t + 1) * m * ka] };
            let bb = if sb.len() == 2 { bv } else { &bv[t * ka * n..(t + 1) * ka * n] };
            gemm_acc(m, ka, n, ab, bb, &mut data[t * m * n..(t + 1) * m * n]);
        }
        let mut shape = lead;
        shape.push(m);
        shape.push(n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(shape, data, Op::Matmul(a, b), needs))
    }

    // ---- structured ops -------------------------------------------------------

    /// 2-D convolution, stride 1, zero padding `k/2` (same-size output).
    /// Input [B, CI, H, W], weight [CO, CI, KH, KW].
    pub fn conv2d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 4 || sw.len() != 4 {
            return Err(Error::Dimension("conv2d wants [B,CI,H,W] x [CO,CI,KH,KW]".into()));
        }
        let (b, ci, h, w) = (si[0], si[1], si[2], si[3]);
        let (co, ciw, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if ci != ciw {
            return Err(Error::Dimension(format!("conv2d: {} input channels vs weight {}", ci, ciw)));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Dimension("conv2d: kernel extents must be odd".into()));
        }
        let pad = kh / 2;
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::Dimension("conv2d: kernel larger than padded input".into()));
        }
        let krows = ci * kh * kw;
        let ohw = h * w;
        let src = &self.nodes[input.0].value.data;
        let wv = &self.nodes[weight.0].value.data;
        let mut cols = vec![0.0; b * krows * ohw];
        let mut data = vec![0.0; b * co * ohw];
        for img in 0..b {
            let cslice = &mut cols[img * krows * ohw..(img + 1) * krows * ohw];
            im2col(&src[img * ci * h * w..(img + 1) * ci * h * w], ci, h, w, kh, kw, pad, cslice);
            gemm_acc(co, krows, ohw, wv, cslice, &mut data[img * co * ohw..(img + 1) * co * ohw]);
        }
        let needs = self.needs(input) || self.needs(weight);
        Ok(self.out(vec![b, co, h, w], data, Op::Conv2d { input, weight, pad, cols }, needs))
    }

    /// Causal dilated 1-D convolution. Input [B, CI, T], weight [CO, CI, K];
    /// output at time t sees inputs at t, t-d, ..., t-(K-1)d only.
    pub fn conv1d_causal(&mut self, input: Var, weight: Var, dilation: usize) -> Result<Var> {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        if si.len() != 3 || sw.len() != 3 {
            return Err(Error::Dimension("conv1d_causal wants [B,CI,T] x [CO,CI,K]".into()));
        }
        if dilation == 0 {
            return Err(Error::Input("conv1d_causal: dilation must be >= 1".into()));
        }
        let (b, ci, t) = (si[0], si[1], si[2]);
        let (co, ciw, k) = (sw[0], sw[1], sw[2]);
        if ci != ciw {
            return Err(Error::Dimension(format!(
                "conv1d_causal: {} input channels vs weight {}",
                ci, ciw
            )));
        }
        let src = &self.nodes[input.0].value.data;
        let wv = &self.nodes[weight.0].value.data;
        let mut data = vec![0.0; b * co * t];
        for bi in 0..b {
            for oc in 0..co {
                for ot in 0..t {
                    let mut acc = 0.0;
                    for icc in 0..ci {
                        let xrow = &src[(bi * ci + icc) * t..(bi * ci + icc + 1) * t];
                        let wrow = &wv[(oc * ci + icc) * k..(oc * ci + icc + 1) * k];
                        for kk in 0..k {
                            let shift = (k - 1 - kk) * dilation;
                            if shift <= ot {
                                acc += wrow[kk] * xrow[ot - shift];
                            }
                        }
                    }
                    data[(bi * co + oc) * t + ot] = acc;
                }
            }
        }
        let needs = self.needs(input) || self.needs(weight);
        Ok(self.out(vec![b, co, t], data, Op::CausalConv1d { input, weight, dilation }, needs))
    }

    /// 2x2 average pooling with stride 2 on the trailing two axes.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 2 {
            return Err(Error::Dimension("avg_pool2 needs rank >= 2".into()));
        }
        let h = sa[sa.len() - 2];
        let w = sa[sa.len() - 1];
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("avg_pool2: odd extents {}x{}", h, w)));
        }
        let planes: usize = sa[..sa.len() - 2].iter().product();
        let (nh, nw) = (h / 2, w / 2);
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; planes * nh * nw];
        for p in 0..planes {
            let s = &src[p * h * w..(p + 1) * h * w];
            let d = &mut data[p * nh * nw..(p + 1) * nh * nw];
            for y in 0..nh {
                for x in 0..nw {
                    d[y * nw + x] = 0.25
                        * (s[2 * y * w + 2 * x]
                            + s[2 * y * w + 2 * x + 1]
                            + s[(2 * y + 1) * w + 2 * x]
                            + s[(2 * y + 1) * w + 2 * x + 1]);
                }
            }
        }
        let mut shape = sa;
        let nd = shape.len();
        shape[nd - 2] = nh;
        shape[nd - 1] = nw;
        let needs = self.needs(a);
        Ok(self.out(shape, data, Op::AvgPool2(a), needs))
    }

    /// Inverted dropout: training mode zeroes units with probability `p` and
    /// scales the survivors by 1/(1-p); eval mode is the exact identity.
    pub fn dropout<R: Rng>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Input(format!("dropout p={p} outside [0,1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.nodes[a.0].value.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = zip(&self.nodes[a.0].value.data, &mask, |x, m| x * m);
        let needs = self.needs(a);
        Ok(self.out(self.shape(a).to_vec(), data, Op::Dropout { input: a, mask }, needs))
    }

    /// Layer normalization over the trailing axis with learned gain/offset.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let f = *sa.last().ok_or_else(|| Error::Dimension("layer_norm on scalar".into()))?;
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::Dimension(format!(
                "layer_norm: gamma/beta must be [{}], got {:?}/{:?}",
                f,
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.nodes[a.0].value.len() / f;
        let src = &self.nodes[a.0].value.data;
        let gv = &self.nodes[gamma.0].value.data;
        let bv = &self.nodes[beta.0].value.data;
        let mut data = vec![0.0; src.len()];
        let mut means = vec![0.0; rows];
        let mut inv_stds = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * f..(r + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / f as f64;
            let inv = 1.0 / (var + eps).sqrt();
            means[r] = mean;
            inv_stds[r] = inv;
            let out = &mut data[r * f..(r + 1) * f];
            for i in 0..f {
                out[i] = (row[i] - mean) * inv * gv[i] + bv[i];
            }
        }
        let needs = self.needs(a) || self.needs(gamma) || self.needs(beta);
        Ok(self.out(
            sa,
            data,
            Op::LayerNorm { input: a, gamma, beta, mean: means, inv_std: inv_stds },
            needs,
        ))
    }

    /// Spatial gradient by central differences (one-sided at the borders).
    /// Input [..., 1, H, W] becomes [..., 2, H, W]: channel 0 = d/dx, 1 = d/dy.
    pub fn spatial_grad(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        if sa.len() < 3 || sa[sa.len() - 3] != 1 {
            return Err(Error::Dimension(format!(
                "spatial_grad wants [..., 1, H, W], got {:?}",
                sa
            )));
        }
        let h = sa[sa.len() - 2];
        let w = sa[sa.len() - 1];
        let planes: usize = sa[..sa.len() - 3].iter().product();
        let src = &self.nodes[a.0].value.data;
        let mut data = vec![0.0; planes * 2 * h * w];
        for p in 0..planes {
            let s = &src[p * h * w..(p + 1) * h * w];
            let (gx, rest) = data[p * 2 * h * w..(p + 1) * 2 * h * w].split_at_mut(h * w);
            let gy = rest;
            for y in 0..h {
                for x in 0..w {
                    gx[y * w + x] = diff1d(s, y * w, w, x, 1);
                }
            }
            for x in 0..w {
                for y in 0..h {
                    gy[y * w + x] = diff1d(s, x, h, y, w);
                }
            }
        }
        let mut shape = sa;
        let nd = shape.len();
        shape[nd - 3] = 2;
        let needs = self.needs(a);
        Ok(self.out(shape, data, Op::SpatialGrad(a), needs))
    }

    /// Per-row cosine similarity between two [R, M] tensors. Rows where
    /// either norm falls under 1e-12 yield 0 with zero gradient.
    pub fn row_cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        self.same_shape(a, b, "row_cosine")?;
        if sa.len() != 2 {
            return Err(Error::Dimension("row_cosine wants [R, M]".into()));
        }
        let (rows, m) = (sa[0], sa[1]);
        let av = &self.nodes[a.0].value.data;
        let bv = &self.nodes[b.0].value.data;
        let mut data = vec![0.0; rows];
        let mut saved = Vec::with_capacity(rows);
        for r in 0..rows {
            let ra = &av[r * m..(r + 1) * m];
            let rb = &bv[r * m..(r + 1) * m];
            let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
            let na = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            let guarded = na < 1e-12 || nb < 1e-12;
            data[r] = if guarded { 0.0 } else { dot / (na * nb) };
            saved.push(CosineRow { dot, norm_a: na, norm_b: nb, guarded });
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.out(vec![rows], data, Op::RowCosine { a, b, saved }, needs))
    }

    /// Mean binary cross-entropy of probabilities against fixed 0/1 targets.
    /// Probabilities are clamped to [1e-12, 1-1e-12] before the logs.
    pub fn bce_mean(&mut self, probs: Var, target: &Tensor) -> Result<Var> {
        if self.shape(probs) != target.shape.as_slice() {
            return Err(Error::Dimension(format!(
                "bce_mean: probs {:?} vs target {:?}",
                self.shape(probs),
                target.shape
            )));
        }
        let pv = &self.nodes[probs.0].value.data;
        let n = pv.len().max(1);
        let mut acc = 0.0;
        for (p, y) in pv.iter().zip(&target.data) {
            let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let needs = self.needs(probs);
        Ok(self.out(
            vec![1],
            vec![acc / n as f64],
            Op::BceMean { probs, target: target.data.clone() },
            needs,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse pass from a scalar loss. Errors if the loss is non-scalar or
    /// if backward has already run on this graph (reset by rebuilding).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; build a fresh graph per step".into(),
            ));
        }
        self.backward_done = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let gout = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }

        for (id, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                self.nodes[id].value.grad = Some(g);
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, update: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].value.len()]);
        }
        update(slot.as_mut().unwrap());
    }

    fn propagate(&self, id: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, gout, 1.0));
                self.accumulate(grads, *b, |g| add_into(g, gout, 1.0));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, gout, 1.0));
                self.accumulate(grads, *b, |g| add_into(g, gout, -1.0));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * av[i];
                    }
                });
            }
            Op::Neg(a) => self.accumulate(grads, *a, |g| add_into(g, gout, -1.0)),
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |g| add_into(g, gout, c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, |g| add_into(g, gout, 1.0)),
            Op::MulBcast(a, b) => {
                let map = BcastMap::new(self.shape(*a), self.shape(*b));
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bv[map.index(i)];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[map.index(i)] += go * av[i];
                    }
                });
            }
            Op::AddBcast(a, b) => {
                let map = BcastMap::new(self.shape(*a), self.shape(*b));
                self.accumulate(grads, *a, |g| add_into(g, gout, 1.0));
                self.accumulate(grads, *b, |g| {
                    for (i, &go) in gout.iter().enumerate() {
                        g[map.index(i)] += go;
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |g| add_into(g, gout, 1.0)),
            Op::Transpose2d(a) => {
                let sa = self.shape(*a);
                let (r, c) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let batch: usize = sa[..sa.len() - 2].iter().product();
                self.accumulate(grads, *a, |g| {
                    for t in 0..batch {
                        let gsrc = &gout[t * r * c..(t + 1) * r * c];
                        let gdst = &mut g[t * r * c..(t + 1) * r * c];
                        for i in 0..r {
                            for j in 0..c {
                                gdst[i * c + j] += gsrc[j * r + i];
                            }
                        }
                    }
                });
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let out_shape = self.shape(Var(id)).to_vec();
                let ga = permute_data(gout, &out_shape, &inv);
                self.accumulate(grads, *a, |g| add_into(g, &ga, 1.0));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[id].value.data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &self.nodes[id].value.data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value.data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        if x[i] > 0.0 {
                            g[i] += gout[i];
                        }
                    }
                });
            }
            Op::LogSigmoid(a) => {
                let x = &self.nodes[a.0].value.data;
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * super::sigmoid_scalar(-x[i]);
                    }
                });
            }
            Op::PowConst(a, c) => {
                let c = *c;
                let x = &self.nodes[a.0].value.data;
                self.accumulate(grads, *a, |g| {
                    if c == 0.0 {
                        return;
                    }
                    for i in 0..g.len() {
                        if x[i] <= 0.0 && c < 1.0 {
                            continue;
                        }
                        g[i] += gout[i] * c * x[i].powf(c - 1.0);
                    }
                });
            }
            Op::Softmax(a, axis) => {
                let y = &self.nodes[id].value.data;
                let (outer, e, inner) = axis_split(self.shape(Var(id)), *axis);
                self.accumulate(grads, *a, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * e + j) * inner + i;
                            let mut dot = 0.0;
                            for j in 0..e {
                                dot += gout[at(j)] * y[at(j)];
                            }
                            for j in 0..e {
                                g[at(j)] += y[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let go = gout[0];
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|v| *v += go));
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a.0].value.len().max(1);
                let go = gout[0] / n as f64;
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|v| *v += go));
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let mean = matches!(self.nodes[id].op, Op::MeanAxis(..));
                let (outer, e, inner) = axis_split(self.shape(*a), *axis);
                let norm = if mean { 1.0 / e as f64 } else { 1.0 };
                self.accumulate(grads, *a, |g| {
                    for o in 0..outer {
                        for j in 0..e {
                            let base = (o * e + j) * inner;
                            for i in 0..inner {
                                g[base + i] += gout[o * inner + i] * norm;
                            }
                        }
                    }
                });
            }
            Op::Matmul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let m = sa[sa.len() - 2];
                let k = sa[sa.len() - 1];
                let n = sb[sb.len() - 1];
                let batch: usize = self.shape(Var(id))[..self.shape(Var(id)).len() - 2]
                    .iter()
                    .product();
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                let a_rank2 = sa.len() == 2 && batch > 1;
                let b_rank2 = sb.len() == 2 && batch > 1;
                self.accumulate(grads, *a, |g| {
                    for t in 0..batch {
                        let gslice = &gout[t * m * n..(t + 1) * m * n];
                        let bb = if b_rank2 { bv } else { &bv[t * k * n..(t + 1) * k * n] };
                        let ga = if a_rank2 { &mut g[..] } else { &mut g[t * m * k..(t + 1) * m * k] };
                        gemm_acc_bt(m, n, k, gslice, bb, ga);
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for t in 0..batch {
                        let gslice = &gout[t * m * n..(t + 1) * m * n];
                        let ab = if a_rank2 { av } else { &av[t * m * k..(t + 1) * m * k] };
                        let gb = if b_rank2 { &mut g[..] } else { &mut g[t * k * n..(t + 1) * k * n] };
                        gemm_acc_at(k, m, n, ab, gslice, gb);
                    }
                });
            }
            Op::Conv2d { input, weight, pad, cols } => {
                let si = self.shape(*input);
                let sw = self.shape(*weight);
                let (b, ci, h, w) = (si[0], si[1], si[2], si[3]);
                let (co, kh, kw) = (sw[0], sw[2], sw[3]);
                let krows = ci * kh * kw;
                let ohw = h * w;
                let wv = &self.nodes[weight.0].value.data;
                self.accumulate(grads, *weight, |g| {
                    for img in 0..b {
                        let gy = &gout[img * co * ohw..(img + 1) * co * ohw];
                        let cslice = &cols[img * krows * ohw..(img + 1) * krows * ohw];
                        // dW[co, krows] += dY[co, ohw] * cols[krows, ohw]^T
                        gemm_acc_bt(co, ohw, krows, gy, cslice, g);
                    }
                });
                self.accumulate(grads, *input, |g| {
                    let mut dcols = vec![0.0; krows * ohw];
                    for img in 0..b {
                        let gy = &gout[img * co * ohw..(img + 1) * co * ohw];
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        // dcols[krows, ohw] = W[co, krows]^T * dY[co, ohw]
                        gemm_acc_at(krows, co, ohw, wv, gy, &mut dcols);
                        col2im_acc(
                            &dcols,
                            ci,
                            h,
                            w,
                            kh,
                            kw,
                            *pad,
                            &mut g[img * ci * h * w..(img + 1) * ci * h * w],
                        );
                    }
                });
            }
            Op::CausalConv1d { input, weight, dilation } => {
                let si = self.shape(*input);
                let sw = self.shape(*weight);
                let (b, ci, t) = (si[0], si[1], si[2]);
                let (co, k) = (sw[0], sw[2]);
                let d = *dilation;
                let xv = &self.nodes[input.0].value.data;
                let wv = &self.nodes[weight.0].value.data;
                self.accumulate(grads, *input, |g| {
                    for bi in 0..b {
                        for oc in 0..co {
                            let grow = &gout[(bi * co + oc) * t..(bi * co + oc + 1) * t];
                            for icc in 0..ci {
                                let wrow = &wv[(oc * ci + icc) * k..(oc * ci + icc + 1) * k];
                                let gx = &mut g[(bi * ci + icc) * t..(bi * ci + icc + 1) * t];
                                for ot in 0..t {
                                    for kk in 0..k {
                                        let shift = (k - 1 - kk) * d;
                                        if shift <= ot {
                                            gx[ot - shift] += grow[ot] * wrow[kk];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                self.accumulate(grads, *weight, |g| {
                    for bi in 0..b {
                        for oc in 0..co {
                            let grow = &gout[(bi * co + oc) * t..(bi * co + oc + 1) * t];
                            for icc in 0..ci {
                                let xrow = &xv[(bi * ci + icc) * t..(bi * ci + icc + 1) * t];
                                let gw = &mut g[(oc * ci + icc) * k..(oc * ci + icc + 1) * k];
                                for kk in 0..k {
                                    let shift = (k - 1 - kk) * d;
                                    let mut acc = 0.0;
                                    for ot in shift..t {
                                        acc += grow[ot] * xrow[ot - shift];
                                    }
                                    gw[kk] += acc;
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool2(a) => {
                let sa = self.shape(*a);
                let h = sa[sa.len() - 2];
                let w = sa[sa.len() - 1];
                let planes: usize = sa[..sa.len() - 2].iter().product();
                let (nh, nw) = (h / 2, w / 2);
                self.accumulate(grads, *a, |g| {
                    for p in 0..planes {
                        let gs = &gout[p * nh * nw..(p + 1) * nh * nw];
                        let gd = &mut g[p * h * w..(p + 1) * h * w];
                        for y in 0..nh {
                            for x in 0..nw {
                                let v = 0.25 * gs[y * nw + x];
                                gd[2 * y * w + 2 * x] += v;
                                gd[2 * y * w + 2 * x + 1] += v;
                                gd[(2 * y + 1) * w + 2 * x] += v;
                                gd[(2 * y + 1) * w + 2 * x + 1] += v;
                            }
                        }
                    }
                });
            }
            Op::Dropout { input, mask } => {
                self.accumulate(grads, *input, |g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * mask[i];
                    }
                });
            }
            Op::LayerNorm { input, gamma, beta, mean, inv_std } => {
                let sa = self.shape(*input);
                let f = sa[sa.len() - 1];
                let rows = self.nodes[input.0].value.len() / f;
                let x = &self.nodes[input.0].value.data;
                let gv = &self.nodes[gamma.0].value.data;
                self.accumulate(grads, *beta, |g| {
                    for r in 0..rows {
                        for i in 0..f {
                            g[i] += gout[r * f + i];
                        }
                    }
                });
                self.accumulate(grads, *gamma, |g| {
                    for r in 0..rows {
                        for i in 0..f {
                            let xh = (x[r * f + i] - mean[r]) * inv_std[r];
                            g[i] += gout[r * f + i] * xh;
                        }
                    }
                });
                self.accumulate(grads, *input, |g| {
                    for r in 0..rows {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for i in 0..f {
                            let dyh = gout[r * f + i] * gv[i];
                            let xh = (x[r * f + i] - mean[r]) * inv_std[r];
                            s1 += dyh;
                            s2 += dyh * xh;
                        }
                        s1 /= f as f64;
                        s2 /= f as f64;
                        for i in 0..f {
                            let dyh = gout[r * f + i] * gv[i];
                            let xh = (x[r * f + i] - mean[r]) * inv_std[r];
                            g[r * f + i] += inv_std[r] * (dyh - s1 - xh * s2);
                        }
                    }
                });
            }
            Op::ConcatAxis(a, b, axis) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let (ea, eb) = (sa[*axis], sb[*axis]);
                let stride_out = (ea + eb) * inner;
                self.accumulate(grads, *a, |g| {
                    for o in 0..outer {
                        let src = &gout[o * stride_out..o * stride_out + ea * inner];
                        g[o * ea * inner..(o + 1) * ea * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(gv, s)| *gv += s);
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for o in 0..outer {
                        let src = &gout[o * stride_out + ea * inner..(o + 1) * stride_out];
                        g[o * eb * inner..(o + 1) * eb * inner]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(gv, s)| *gv += s);
                    }
                });
            }
            Op::IndexAxis { input, axis, index } => {
                let sa = self.shape(*input);
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let e = sa[*axis];
                self.accumulate(grads, *input, |g| {
                    for o in 0..outer {
                        let base = (o * e + index) * inner;
                        for i in 0..inner {
                            g[base + i] += gout[o * inner + i];
                        }
                    }
                });
            }
            Op::StackAxis { parts, axis } => {
                let sp = self.shape(parts[0]);
                let outer: usize = sp[..*axis].iter().product();
                let inner: usize = sp[*axis..].iter().product();
                let count = parts.len();
                for (pi, &p) in parts.iter().enumerate() {
                    self.accumulate(grads, p, |g| {
                        for o in 0..outer {
                            let src = (o * count + pi) * inner;
                            for i in 0..inner {
                                g[o * inner + i] += gout[src + i];
                            }
                        }
                    });
                }
            }
            Op::SpatialGrad(a) => {
                let sa = self.shape(*a);
                let h = sa[sa.len() - 2];
                let w = sa[sa.len() - 1];
                let planes: usize = sa[..sa.len() - 3].iter().product();
                self.accumulate(grads, *a, |g| {
                    for p in 0..planes {
                        let gx = &gout[p * 2 * h * w..p * 2 * h * w + h * w];
                        let gy = &gout[p * 2 * h * w + h * w..(p + 1) * 2 * h * w];
                        let gd = &mut g[p * h * w..(p + 1) * h * w];
                        for y in 0..h {
                            for x in 0..w {
                                diff1d_adjoint(gd, y * w, w, x, 1, gx[y * w + x]);
                            }
                        }
                        for x in 0..w {
                            for y in 0..h {
                                diff1d_adjoint(gd, x, h, y, w, gy[y * w + x]);
                            }
                        }
                    }
                });
            }
            Op::RowCosine { a, b, saved } => {
                let m = self.shape(*a)[1];
                let av = &self.nodes[a.0].value.data;
                let bv = &self.nodes[b.0].value.data;
                self.accumulate(grads, *a, |g| {
                    for (r, s) in saved.iter().enumerate() {
                        if s.guarded {
                            continue;
                        }
                        let go = gout[r];
                        let cosv = s.dot / (s.norm_a * s.norm_b);
                        for i in 0..m {
                            let ai = av[r * m + i];
                            let bi = bv[r * m + i];
                            g[r * m + i] += go
                                * (bi / (s.norm_a * s.norm_b) - cosv * ai / (s.norm_a * s.norm_a));
                        }
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for (r, s) in saved.iter().enumerate() {
                        if s.guarded {
                            continue;
                        }
                        let go = gout[r];
                        let cosv = s.dot / (s.norm_a * s.norm_b);
                        for i in 0..m {
                            let ai = av[r * m + i];
                            let bi = bv[r * m + i];
                            g[r * m + i] += go
                                * (ai / (s.norm_a * s.norm_b) - cosv * bi / (s.norm_b * s.norm_b));
                        }
                    }
                });
            }
            Op::BceMean { probs, target } => {
                let pv = &self.nodes[probs.0].value.data;
                let n = pv.len().max(1) as f64;
                let go = gout[0];
                self.accumulate(grads, *probs, |g| {
                    for i in 0..g.len() {
                        let p = pv[i];
                        if p <= BCE_EPS || p >= 1.0 - BCE_EPS {
                            continue;
                        }
                        g[i] += go * (p - target[i]) / (p * (1.0 - p)) / n;
                    }
                });
            }
        }
    }
}

const BCE_EPS: f64 = 1e-12;

/// Central difference along one line of a strided buffer; one-sided at ends.
#[inline]
fn diff1d(s: &[f64], base: usize, extent: usize, pos: usize, stride: usize) -> f64 {
    if extent < 2 {
        return 0.0;
    }
    if pos == 0 {
        s[base + stride] - s[base]
    } else if pos == extent - 1 {
        s[base + pos * stride] - s[base + (pos - 1) * stride]
    } else {
        0.5 * (s[base + (pos + 1) * stride] - s[base + (pos - 1) * stride])
    }
}

#[inline]
fn diff1d_adjoint(g: &mut [f64], base: usize, extent: usize, pos: usize, stride: usize, go: f64) {
    if extent < 2 {
        return;
    }
    if pos == 0 {
        g[base + stride] += go;
        g[base] -= go;
    } else if pos == extent - 1 {
        g[base + pos * stride] += go;
        g[base + (pos - 1) * stride] -= go;
    } else {
        g[base + (pos + 1) * stride] += 0.5 * go;
        g[base + (pos - 1) * stride] -= 0.5 * go;
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut out = vec![0.0; src.len()];
    let mut coords = vec![0usize; nd];
    for slot in out.iter_mut() {
        let mut src_idx = 0;
        for (d, &c) in coords.iter().enumerate() {
            src_idx += c * in_strides[perm[d]];
        }
        *slot = src[src_idx];
        for d in (0..nd).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    out
}

/// Maps flat indices of an output shape onto a broadcast operand whose
/// extent-1 axes repeat.
struct BcastMap {
    dims: Vec<(usize, usize, usize)>, // (out extent trailing product, out extent, b stride)
}

impl BcastMap {
    fn new(out_shape: &[usize], b_shape: &[usize]) -> Self {
        let b_strides = strides_of(b_shape);
        let out_strides = strides_of(out_shape);
        let dims = out_shape
            .iter()
            .zip(b_shape)
            .zip(out_strides.iter().zip(&b_strides))
            .map(|((&oe, &be), (&os, &bs))| (os, oe, if be == 1 { 0 } else { bs }))
            .collect();
        Self { dims }
    }

    #[inline]
    fn index(&self, flat: usize) -> usize {
        let mut idx = 0;
        for &(os, oe, bs) in &self.dims {
            idx += ((flat / os) % oe) * bs;
        }
        idx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a = g.constant(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let y = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(y).data, vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    }

    #[test]
    fn matmul_hand_value() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[0., 1.]));
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data, vec![2., 4.]);
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(g.matmul(a, b), Err(crate::Error::Dimension(_))));
    }

    #[test]
    fn softmax_symmetry_and_row_sums() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 3], &[0., 0., 0.]));
        let y = g.softmax(x, 1).unwrap();
        for &v in &g.value(y).data {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 4], &[3.0, -2.0, 0.5, 9.0, -1.0, -1.5, 2.0, 0.0]));
        let y = g.softmax(x, 1).unwrap();
        let v = &g.value(y).data;
        for r in 0..2 {
            let s: f64 = v[r * 4..(r + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
        }
    }

    #[test]
    fn softmax_huge_inputs_do_not_overflow() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1000.0, 0.0]));
        let y = g.softmax(x, 1).unwrap();
        let v = &g.value(y).data;
        assert!(v[0] > 1.0 - 1e-12 && v[1] < 1e-12);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert!((g.value(y).data[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]).with_grad());
        let loss = g.sum_all(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_twice_is_contract_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0).with_grad());
        let loss = g.mean_all(x);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1., 2.]).with_grad());
        assert!(matches!(g.backward(x), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn dropout_eval_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.constant(t(&[4], &[1.0, -2.0, 3.0, 0.25]));
        let y = g.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_train_scales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1000], 1.0));
        let y = g.dropout(x, 0.25, true, &mut rng).unwrap();
        let v = &g.value(y).data;
        for &e in v {
            assert!(e == 0.0 || (e - 4.0 / 3.0).abs() < 1e-12);
        }
        let kept = v.iter().filter(|&&e| e != 0.0).count();
        assert!(kept > 600 && kept < 900, "kept {kept} of 1000 at p=0.25");
    }

    #[test]
    fn causal_conv_ignores_the_future() {
        // Perturb a future time step; outputs at earlier steps must not move.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::randn(&[1, 2, 10], 1.0, &mut rng);
        let wt = Tensor::randn(&[2, 2, 3], 1.0, &mut rng);
        let run = |xv: &Tensor| {
            let mut g = Graph::new();
            let x = g.constant(xv.clone());
            let w = g.constant(wt.clone());
            let y = g.conv1d_causal(x, w, 2).unwrap();
            g.value(y).data.clone()
        };
        let base = run(&x0);
        let mut bumped = x0.clone();
        bumped.data[7] += 100.0; // channel 0, t = 7
        let out = run(&bumped);
        for c in 0..2 {
            for tt in 0..7 {
                assert_eq!(base[c * 10 + tt], out[c * 10 + tt], "t={tt} changed");
            }
            assert_ne!(base[c * 10 + 7], out[c * 10 + 7]);
        }
    }

    #[test]
    fn dilated_stack_receptive_field_is_43() {
        // kernel 7, dilations [1,2,4]: 1 + 6*(1+2+4) = 43 taps of history.
        let t_len = 64usize;
        let run = |impulse_at: Option<usize>| {
            let mut x = Tensor::zeros(&[1, 1, t_len]);
            if let Some(i) = impulse_at {
                x.data[i] = 1.0;
            }
            let mut g = Graph::new();
            let xv = g.constant(x);
            let w = g.constant(Tensor::full(&[1, 1, 7], 1.0));
            let mut h = xv;
            for d in [1usize, 2, 4] {
                h = g.conv1d_causal(h, w, d).unwrap();
            }
            g.value(h).data.clone()
        };
        let probe = t_len - 1;
        let within = run(Some(probe - 42));
        let beyond = run(Some(probe - 43));
        assert!(within[probe] != 0.0, "tap at distance 42 must reach the output");
        assert_eq!(beyond[probe], 0.0, "tap at distance 43 must not reach the output");
    }

    #[test]
    fn spatial_grad_of_linear_ramp() {
        // f(x,y) = 2x + 3y has gx = 2, gy = 3 (interior and borders alike, up
        // to the one-sided stencils which are exact for linear fields).
        let (h, w) = (5, 6);
        let mut f = Tensor::zeros(&[1, 1, h, w]);
        for y in 0..h {
            for x in 0..w {
                f.data[y * w + x] = 2.0 * x as f64 + 3.0 * y as f64;
            }
        }
        let mut g = Graph::new();
        let v = g.constant(f);
        let out = g.spatial_grad(v).unwrap();
        let d = &g.value(out).data;
        for i in 0..h * w {
            assert!((d[i] - 2.0).abs() < 1e-12, "gx[{i}]");
            assert!((d[h * w + i] - 3.0).abs() < 1e-12, "gy[{i}]");
        }
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
            let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
            let mut g = Graph::new();
            let xv = g.constant(x);
            let wv = g.constant(w);
            let h = g.matmul(xv, wv).unwrap();
            let s = g.sigmoid(h);
            let y = g.mean_all(s);
            g.value(y).data[0]
        };
        assert_eq!(build().to_bits(), build().to_bits());
    }

    #[test]
    fn gradients_match_finite_differences_for_composites() {
        // mean(sigmoid(W x)) exercised end to end.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w0 = Tensor::randn(&[3, 4], 0.7, &mut rng).with_grad();
        let x0 = Tensor::randn(&[4, 2], 0.7, &mut rng).with_grad();
        let max_err = check_gradients(&[w0, x0], 1e-5, |g, vars| {
            let h = g.matmul(vars[0], vars[1])?;
            let s = g.sigmoid(h);
            Ok(g.mean_all(s))
        })
        .unwrap();
        assert!(max_err < 1e-5, "rel err {max_err}");
    }

    #[test]
    fn permute_roundtrip_and_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng).with_grad();
        let max_err = check_gradients(&[x], 1e-5, |g, vars| {
            let p = g.permute(vars[0], &[2, 0, 1])?;
            let s = g.sigmoid(p);
            Ok(g.mean_all(s))
        })
        .unwrap();
        assert!(max_err < 1e-5);
    }
}
