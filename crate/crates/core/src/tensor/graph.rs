use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MulRows {
        x: Var,
        g: Var,
    },
    Scale {
        x: Var,
        k: f64,
    },
    AddKeyMask {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Tanh {
        x: Var,
    },
    Ln {
        x: Var,
        floor: f64,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MeanRows {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Execution record for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so every op's inputs precede it.
/// A tape supports exactly one backward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().expect("rank >= 1");
    (shape.iter().product::<usize>() / last, last)
}

/// `out[r×c] += a[r×k] · b[k×c]`
fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * c..(p + 1) * c];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[r×c] += a[r×k] · b[c×k]ᵀ`
fn gemm_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b[j * k..(j + 1) * k];
            out[i * c + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k×c] += a[r×k]ᵀ · b[r×c]`
fn gemm_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let brow = &b[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor as an input. It is differentiated iff `requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data().to_vec(), t.shape().to_vec(), Op::Leaf, false)
    }

    pub fn constant_raw(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.data, t.shape, Op::Leaf, false))
    }

    /// Copies the value into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (value, shape) = (n.value.clone(), n.shape.clone());
        self.push(value, shape, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("recorded shape")
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Gradient of the last backward's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// `a[.., k] · b[k, c] -> [.., c]`; leading axes of `a` are treated as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (r, k) = split_last(sa);
        let c = sb[1];
        let mut out = vec![0.0; r * c];
        gemm_acc(self.value(a), self.value(b), &mut out, r, k, c);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = c;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::MatMul { a, b }, rg))
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape(if trans_b { "bmm_nt" } else { "bmm" }, sa, sb));
        }
        let (batch, r, k) = (sa[0], sa[1], sa[2]);
        let c = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![0.0; batch * r * c];
        let (va, vb) = (self.value(a), self.value(b));
        for i in 0..batch {
            let ab = &va[i * r * k..(i + 1) * r * k];
            let bb = &vb[i * k * c..(i + 1) * k * c];
            let ob = &mut out[i * r * c..(i + 1) * r * c];
            if trans_b {
                gemm_nt_acc(ab, bb, ob, r, k, c);
            } else {
                gemm_acc(ab, bb, ob, r, k, c);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, vec![batch, r, c], Op::BatchMatMul { a, b, trans_b }, rg))
    }

    /// Batched product `a[B, r, k] · b[B, k, c]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched product against a transposed right operand: `a[B, r, k] · b[B, c, k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Add { a, b }, rg))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let vb = self.value(b);
        let n = vb.len();
        let out = self.value(a).iter().enumerate().map(|(i, x)| x + vb[i % n]).collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::AddBroadcast { a, b }, rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, shape, Op::Mul { a, b }, rg))
    }

    /// Scales each row of `x[.., d]` by the matching entry of `g[..]`.
    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (sx, sg) = (self.shape(x), self.shape(g));
        if sx.len() < 2 || sx[..sx.len() - 1] != *sg {
            return Err(Error::shape("mul_rows", sx, sg));
        }
        let (_, d) = split_last(sx);
        let vg = self.value(g);
        let out = self.value(x).iter().enumerate().map(|(i, v)| v * vg[i / d]).collect();
        let shape = sx.to_vec();
        let rg = self.rg(x) || self.rg(g);
        Ok(self.push(out, shape, Op::MulRows { x, g }, rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * k).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Scale { x, k }, rg)
    }

    /// Adds a constant per-key bias `mask[B, Lk]` to attention logits `x[B, Lq, Lk]`.
    pub fn add_key_mask(&mut self, x: Var, mask: &[f64]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || mask.len() != sx[0] * sx[2] {
            return Err(Error::shape("add_key_mask", sx, &[mask.len()]));
        }
        let (lq, lk) = (sx[1], sx[2]);
        let out = self
            .value(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + mask[(i / (lq * lk)) * lk + i % lk])
            .collect();
        let shape = sx.to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::AddKeyMask { x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Sigmoid { x }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Tanh { x }, rg)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v.max(floor).ln()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Ln { x, floor }, rg)
    }

    /// Softmax over the last axis, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (r, c) = split_last(self.shape(x));
        let vx = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &vx[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (o, v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            orow.iter_mut().for_each(|o| *o /= total);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(out, shape, Op::Softmax { x }, rg)
    }

    /// Normalizes every row of `x[.., c]` to zero mean and unit (biased) variance,
    /// then applies `gamma[c]` and `beta[c]`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = split_last(self.shape(x));
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("layer_norm_rows", self.shape(x), self.shape(gamma)));
        }
        if c < 2 {
            return Err(Error::InvalidTensor("layer norm needs at least 2 columns".into()));
        }
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        for i in 0..r {
            let row = &vx[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[i] = s;
            for j in 0..c {
                let h = (row[j] - mean) * s;
                xhat[i * c + j] = h;
                out[i * c + j] = vg[j] * h + vb[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            shape,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Averages over the second-to-last axis: `[.., L, d] -> [.., d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(Error::shape("mean_rows", sx, &[]));
        }
        let (l, d) = (sx[sx.len() - 2], sx[sx.len() - 1]);
        let outer: usize = sx[..sx.len() - 2].iter().product();
        let vx = self.value(x);
        let mut out = vec![0.0; outer * d];
        for o in 0..outer {
            for t in 0..l {
                let row = &vx[(o * l + t) * d..(o * l + t + 1) * d];
                for (acc, v) in out[o * d..(o + 1) * d].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= l as f64);
        let mut shape = sx[..sx.len() - 2].to_vec();
        shape.push(d);
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::MeanRows { x }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![total], vec![1], Op::Sum { x }, rg)
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..s.len() - 1] != *lead {
                return Err(Error::shape("concat_last", &first, s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, shape, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x);
        let (r, c) = split_last(sx);
        if len == 0 || start + len > c {
            return Err(Error::shape("slice_last", sx, &[start, len]));
        }
        let vx = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&vx[i * c + start..i * c + start + len]);
        }
        let mut shape = sx.to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Slice { x, start }, rg))
    }

    /// Looks up rows of `table[V, d]`; the result has shape `lead ++ [d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("gather_rows", st, lead));
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::OutOfVocab {
                id: bad as u32,
                vocab: v,
            });
        }
        let vt = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&vt[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            out,
            shape,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(value, shape.to_vec(), Op::Reshape { x }, rg))
    }

    /// Multiplies by a fixed mask. Inverted dropout passes entries of `0` or `1/keep`.
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("dropout", self.shape(x), &[mask.len()]));
        }
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(out, shape, Op::Dropout { x, mask }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are then available via [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.shape(loss) != [1] {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        if !self.rg(loss) {
            return Err(Error::Detached);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let shp = |v: Var| nodes[v.0].shape.as_slice();
        let rg = |v: Var| nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (r, k) = split_last(shp(*a));
                let c = shp(*b)[1];
                if rg(*a) {
                    gemm_nt_acc(gout, val(*b), slot(grads, *a, r * k), r, c, k);
                }
                if rg(*b) {
                    gemm_tn_acc(val(*a), gout, slot(grads, *b, k * c), r, k, c);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = shp(*a);
                let (batch, r, k) = (sa[0], sa[1], sa[2]);
                let c = node.shape[2];
                let (va, vb) = (val(*a), val(*b));
                if rg(*a) {
                    let ga = slot(grads, *a, batch * r * k);
                    for i in 0..batch {
                        let go = &gout[i * r * c..(i + 1) * r * c];
                        let bb = &vb[i * k * c..(i + 1) * k * c];
                        let gb = &mut ga[i * r * k..(i + 1) * r * k];
                        if *trans_b {
                            // out = A Bᵀ, B is [c, k]: dA = dOut · B
                            gemm_acc(go, bb, gb, r, c, k);
                        } else {
                            gemm_nt_acc(go, bb, gb, r, c, k);
                        }
                    }
                }
                if rg(*b) {
                    let gbv = slot(grads, *b, batch * k * c);
                    for i in 0..batch {
                        let go = &gout[i * r * c..(i + 1) * r * c];
                        let ab = &va[i * r * k..(i + 1) * r * k];
                        let gb = &mut gbv[i * k * c..(i + 1) * k * c];
                        if *trans_b {
                            // dB = dOutᵀ · A, shape [c, k]
                            gemm_tn_acc(go, ab, gb, r, c, k);
                        } else {
                            gemm_tn_acc(ab, go, gb, r, k, c);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if rg(v) {
                        let g = slot(grads, v, gout.len());
                        g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddBroadcast { a, b } => {
                if rg(*a) {
                    let g = slot(grads, *a, gout.len());
                    g.iter_mut().zip(gout).for_each(|(x, y)| *x += y);
                }
                if rg(*b) {
                    let n = val(*b).len();
                    let g = slot(grads, *b, n);
                    for (i, y) in gout.iter().enumerate() {
                        g[i % n] += y;
                    }
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let vb = val(*b);
                    let g = slot(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * vb[i];
                    }
                }
                if rg(*b) {
                    let va = val(*a);
                    let g = slot(grads, *b, gout.len());
                    for i in 0..gout.len() {
                        g[i] += gout[i] * va[i];
                    }
                }
            }
            Op::MulRows { x, g: gate } => {
                let d = *node.shape.last().unwrap();
                if rg(*x) {
                    let vg = val(*gate);
                    let gx = slot(grads, *x, gout.len());
                    for i in 0..gout.len() {
                        gx[i] += gout[i] * vg[i / d];
                    }
                }
                if rg(*gate) {
                    let vx = val(*x);
                    let gg = slot(grads, *gate, gout.len() / d);
                    for i in 0..gout.len() {
                        gg[i / d] += gout[i] * vx[i];
                    }
                }
            }
            Op::Scale { x, k } => {
                let g = slot(grads, *x, gout.len());
                g.iter_mut().zip(gout).for_each(|(a, y)| *a += k * y);
            }
            Op::AddKeyMask { x } | Op::Reshape { x } => {
                let g = slot(grads, *x, gout.len());
                g.iter_mut().zip(gout).for_each(|(a, y)| *a += y);
            }
            Op::Relu { x } => {
                let vx = val(*x);
                let g = slot(grads, *x, gout.len());
                for i in 0..gout.len() {
                    if vx[i] > 0.0 {
                        g[i] += gout[i];
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let g = slot(grads, *x, gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Tanh { x } => {
                let y = &node.value;
                let g = slot(grads, *x, gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Ln { x, floor } => {
                let vx = val(*x);
                let g = slot(grads, *x, gout.len());
                for i in 0..gout.len() {
                    if vx[i] > *floor {
                        g[i] += gout[i] / vx[i];
                    }
                }
            }
            Op::Softmax { x } => {
                let (r, c) = split_last(&node.shape);
                let y = &node.value;
                let g = slot(grads, *x, gout.len());
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &gout[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        g[i * c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = split_last(&node.shape);
                let vg = val(*gamma);
                if rg(*gamma) {
                    let gg = slot(grads, *gamma, c);
                    for i in 0..r * c {
                        gg[i % c] += gout[i] * xhat[i];
                    }
                }
                if rg(*beta) {
                    let gb = slot(grads, *beta, c);
                    for i in 0..r * c {
                        gb[i % c] += gout[i];
                    }
                }
                if rg(*x) {
                    let gx = slot(grads, *x, r * c);
                    let mut dxhat = vec![0.0; c];
                    for i in 0..r {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            dxhat[j] = gout[i * c + j] * vg[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[i * c + j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            gx[i * c + j] += rstd[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                }
            }
            Op::MeanRows { x } => {
                let sx = shp(*x);
                let (l, d) = (sx[sx.len() - 2], sx[sx.len() - 1]);
                let n = val(*x).len();
                let g = slot(grads, *x, n);
                for i in 0..n {
                    let o = i / (l * d);
                    g[i] += gout[o * d + i % d] / l as f64;
                }
            }
            Op::Sum { x } => {
                let g = slot(grads, *x, val(*x).len());
                g.iter_mut().for_each(|a| *a += gout[0]);
            }
            Op::Concat { parts } => {
                let total = *node.shape.last().unwrap();
                let rows = gout.len() / total;
                let mut offset = 0;
                for &p in parts {
                    let w = *shp(p).last().unwrap();
                    if rg(p) {
                        let g = slot(grads, p, rows * w);
                        for r in 0..rows {
                            for j in 0..w {
                                g[r * w + j] += gout[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start } => {
                let (r, c) = split_last(shp(*x));
                let len = *node.shape.last().unwrap();
                let g = slot(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..len {
                        g[i * c + start + j] += gout[i * len + j];
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = shp(*table)[1];
                let n = val(*table).len();
                let g = slot(grads, *table, n);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        g[id * d + j] += gout[row * d + j];
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let g = slot(grads, *x, gout.len());
                for i in 0..gout.len() {
                    g[i] += gout[i] * mask[i];
                }
            }
        }
    }
}
