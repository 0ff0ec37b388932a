//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Every op validates shapes, computes its value immediately, and records
//! itself as a node. `backward` consumes the tape and walks the nodes in
//! reverse creation order (which is a topological order by construction).
//!
//! Broadcasting is restricted to two forms: an operand whose shape is a
//! suffix of the other's (covers biases and scalars), and the explicit
//! `broadcast_lead` op that prepends a batch axis. Anything else is a
//! shape error naming the offending shapes.

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Neg { a: Var },
    Scale { a: Var, c: f64 },
    Matmul { a: Var, b: Var },
    MatmulTb { a: Var, b: Var },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Gelu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Exp { a: Var },
    ClampMax { a: Var, max: f64 },
    Embedding { table: Var, ids: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize, len: usize },
    MeanAxis { a: Var, axis: usize },
    MeanAll { a: Var },
    L2Normalize { a: Var, eps: f64 },
    Permute { a: Var, perm: Vec<usize> },
    Reshape { a: Var },
    BroadcastLead { a: Var, n: usize },
    GatherSeq { a: Var, idx: Vec<usize> },
    TakeDiag { a: Var },
}

struct Node<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by `Tape::backward`, indexed by node id.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for a var, or None if no gradient flowed to it.
    pub fn get(&self, var: Var) -> Option<&[S]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// outer x axis_dim x inner decomposition around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let dim = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, dim, inner)
}

fn is_suffix(suffix: &[usize], of: &[usize]) -> bool {
    suffix.len() <= of.len() && of[of.len() - suffix.len()..] == *suffix
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value_tensor(&self, v: Var) -> Tensor<S> {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].data.clone(),
            requires_grad: self.nodes[v.0].requires_grad,
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node { shape, data, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ── Leaves ───────────────────────────────────────────────────────

    pub fn leaf(&mut self, t: &Tensor<S>, requires_grad: bool) -> Var {
        self.push(t.shape.clone(), t.data.clone(), requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.leaf(t, false)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.push(vec![], vec![S::from_f64(x)], false, Op::Leaf)
    }

    // ── Elementwise with suffix broadcast ────────────────────────────

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var, bool)> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb {
            Ok((a, b, false))
        } else if is_suffix(sb, sa) {
            Ok((a, b, true))
        } else if is_suffix(sa, sb) {
            Ok((b, a, true))
        } else {
            Err(CoreError::ShapeMismatch { op, lhs: sa.clone(), rhs: sb.clone() })
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small, _) = self.broadcast_pair("add", a, b)?;
        let sb_len = self.nodes[small.0].data.len().max(1);
        let data: Vec<S> = self.nodes[big.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x + self.nodes[small.0].data[i % sb_len])
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[big.0].shape.clone();
        Ok(self.push(shape, data, rg, Op::Add { a: big, b: small }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small, _) = self.broadcast_pair("mul", a, b)?;
        let sb_len = self.nodes[small.0].data.len().max(1);
        let data: Vec<S> = self.nodes[big.0]
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * self.nodes[small.0].data[i % sb_len])
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.nodes[big.0].shape.clone();
        Ok(self.push(shape, data, rg, Op::Mul { a: big, b: small }))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| -x).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Neg { a })
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cs = S::from_f64(c);
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x * cs).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Scale { a, c })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    // ── Matrix products ──────────────────────────────────────────────

    /// `a @ b` where `b` is 2-D (applied to every leading batch of `a`),
    /// or both operands share identical leading batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let mismatch = || CoreError::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (batched, n) = if sb.len() == 2 {
            if sb[0] != k {
                return Err(mismatch());
            }
            (false, sb[1])
        } else if sb.len() == sa.len() && sb[..sb.len() - 2] == sa[..sa.len() - 2] {
            if sb[sb.len() - 2] != k {
                return Err(mismatch());
            }
            (true, sb[sb.len() - 1])
        } else {
            return Err(mismatch());
        };
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![S::zero(); batch * m * n];
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        for bi in 0..batch {
            let ab = &da[bi * m * k..(bi + 1) * m * k];
            let bb = if batched { &db[bi * k * n..(bi + 1) * k * n] } else { &db[..] };
            let ob = &mut out[bi * m * n..(bi + 1) * m * n];
            matmul_acc(ab, bb, ob, m, k, n);
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Matmul { a, b }))
    }

    /// `a @ b^T` for 2-D `a: [m,k]` and `b: [n,k]`. Used for score grids.
    pub fn matmul_tb(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(CoreError::ShapeMismatch { op: "matmul_tb", lhs: sa, rhs: sb });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &db[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for p in 0..k {
                    acc = acc + arow[p] * brow[p];
                }
                out[i * n + j] = acc;
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatmulTb { a, b }))
    }

    // ── Nonlinearities and normalizations ────────────────────────────

    fn check_axis(&self, op: &'static str, a: Var, axis: usize) -> Result<()> {
        let shape = &self.nodes[a.0].shape;
        if axis >= shape.len() {
            return Err(CoreError::BadShape {
                op,
                msg: format!("axis {} out of range", axis),
                shape: shape.clone(),
            });
        }
        Ok(())
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let mut mx = src[at(0)];
                for d in 1..dim {
                    if src[at(d)] > mx {
                        mx = src[at(d)];
                    }
                }
                let mut sum = S::zero();
                for d in 0..dim {
                    let e = (src[at(d)] - mx).exp();
                    out[at(d)] = e;
                    sum = sum + e;
                }
                for d in 0..dim {
                    out[at(d)] = out[at(d)] / sum;
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, out, rg, Op::Softmax { a, axis }))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![S::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let mut mx = src[at(0)];
                for d in 1..dim {
                    if src[at(d)] > mx {
                        mx = src[at(d)];
                    }
                }
                let mut sum = S::zero();
                for d in 0..dim {
                    sum = sum + (src[at(d)] - mx).exp();
                }
                let lse = mx + sum.ln();
                for d in 0..dim {
                    out[at(d)] = src[at(d)] - lse;
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, out, rg, Op::LogSoftmax { a, axis }))
    }

    /// Layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[x.0].shape.clone();
        let dim = *shape.last().ok_or_else(|| CoreError::BadShape {
            op: "layer_norm",
            msg: "rank-0 input".into(),
            shape: shape.clone(),
        })?;
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let s = &self.nodes[v.0].shape;
            if s.as_slice() != [dim] {
                return Err(CoreError::ShapeMismatch {
                    op: if name == "gain" { "layer_norm gain" } else { "layer_norm bias" },
                    lhs: shape.clone(),
                    rhs: s.clone(),
                });
            }
        }
        let rows = numel(&shape) / dim;
        let src = &self.nodes[x.0].data;
        let g = &self.nodes[gain.0].data;
        let b = &self.nodes[bias.0].data;
        let epss = S::from_f64(eps);
        let dimn = S::from_usize(dim);
        let mut out = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * dim..(r + 1) * dim];
            let mut mean = S::zero();
            for &v in row {
                mean = mean + v;
            }
            mean = mean / dimn;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var = var + d * d;
            }
            var = var / dimn;
            let inv = (var + epss).sqrt().recip();
            for c in 0..dim {
                let xhat = (row[c] - mean) * inv;
                out[r * dim + c] = g[c] * xhat + b[c];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(shape, out, rg, Op::LayerNorm { x, gain, bias, eps }))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        let data: Vec<S> = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| {
                let xf = x.as_f64();
                let u = C * (xf + 0.044715 * xf * xf * xf);
                S::from_f64(0.5 * xf * (1.0 + u.tanh()))
            })
            .collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = S::one();
        let data: Vec<S> =
            self.nodes[a.0].data.iter().map(|&x| one / (one + (-x).exp())).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x.tanh()).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data: Vec<S> = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::Exp { a })
    }

    pub fn clamp_max(&mut self, a: Var, max: f64) -> Var {
        let ms = S::from_f64(max);
        let data: Vec<S> =
            self.nodes[a.0].data.iter().map(|&x| if x > ms { ms } else { x }).collect();
        let rg = self.nodes[a.0].requires_grad;
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, data, rg, Op::ClampMax { a, max })
    }

    // ── Lookup, reshape and motion ───────────────────────────────────

    /// Row lookup: `table: [V, d]`, flat `ids` → `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.nodes[table.0].shape.clone();
        if ts.len() != 2 {
            return Err(CoreError::BadShape {
                op: "embedding",
                msg: "table must be 2-D".into(),
                shape: ts,
            });
        }
        let (v, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(CoreError::TokenOutOfRange { id: bad as u32, vocab: v });
        }
        let src = &self.nodes[table.0].data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        Ok(self.push(vec![ids.len(), d], out, rg, Op::Embedding { table, ids: ids.to_vec() }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(CoreError::BadShape {
                op: "concat",
                msg: "no inputs".into(),
                shape: vec![],
            });
        }
        let first = self.nodes[inputs[0].0].shape.clone();
        self.check_axis("concat", inputs[0], axis)?;
        let mut axis_total = 0usize;
        for &v in inputs {
            let s = &self.nodes[v.0].shape;
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.clone(),
                });
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![S::zero(); numel(&shape)];
        for o in 0..outer {
            let mut off = 0usize;
            for &v in inputs {
                let dim = self.nodes[v.0].shape[axis];
                let chunk = dim * inner;
                let src = &self.nodes[v.0].data[o * chunk..(o + 1) * chunk];
                let dst_start = (o * axis_total + off) * inner;
                out[dst_start..dst_start + chunk].copy_from_slice(src);
                off += dim;
            }
        }
        let rg = self.any_grad(inputs);
        Ok(self.push(shape, out, rg, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("slice", a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        if start + len > shape[axis] {
            return Err(CoreError::BadShape {
                op: "slice",
                msg: format!("range {}..{} exceeds axis {}", start, start + len, shape[axis]),
                shape,
            });
        }
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a.0].data;
        let mut out = vec![S::zero(); outer * len * inner];
        for o in 0..outer {
            let src_start = (o * dim + start) * inner;
            let dst_start = o * len * inner;
            out[dst_start..dst_start + len * inner]
                .copy_from_slice(&src[src_start..src_start + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape, out, rg, Op::Slice { a, axis, start, len }))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis("mean_axis", a, axis)?;
        let shape = self.nodes[a.0].shape.clone();
        let (outer, dim, inner) = axis_split(&shape, axis);
        let src = &self.nodes[a.0].data;
        let dimn = S::from_usize(dim);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[(o * dim + d) * inner + i];
                }
            }
        }
        for v in out.iter_mut() {
            *v = *v / dimn;
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape, out, rg, Op::MeanAxis { a, axis }))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let src = &self.nodes[a.0].data;
        let mut sum = S::zero();
        for &v in src {
            sum = sum + v;
        }
        let mean = sum / S::from_usize(src.len().max(1));
        let rg = self.nodes[a.0].requires_grad;
        self.push(vec![], vec![mean], rg, Op::MeanAll { a })
    }

    /// L2-normalize over the last axis. Rows with norm <= eps are rejected.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let dim = *shape.last().ok_or_else(|| CoreError::BadShape {
            op: "l2_normalize",
            msg: "rank-0 input".into(),
            shape: shape.clone(),
        })?;
        let rows = numel(&shape) / dim;
        let src = &self.nodes[a.0].data;
        let epss = S::from_f64(eps);
        let mut out = vec![S::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * dim..(r + 1) * dim];
            let mut sq = S::zero();
            for &v in row {
                sq = sq + v * v;
            }
            let norm = sq.sqrt();
            if norm <= epss {
                return Err(CoreError::ZeroNormEmbedding(r));
            }
            for c in 0..dim {
                out[r * dim + c] = row[c] / norm;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, out, rg, Op::L2Normalize { a, eps }))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(CoreError::BadShape {
                op: "permute",
                msg: format!("bad permutation {:?}", perm),
                shape,
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let data = permute_data(&self.nodes[a.0].data, &shape, perm);
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(out_shape, data, rg, Op::Permute { a, perm: perm.to_vec() }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let old = self.nodes[a.0].shape.clone();
        if numel(shape) != numel(&old) {
            return Err(CoreError::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape { a }))
    }

    /// Leading-batch broadcast: repeat the whole tensor `n` times under a
    /// new first axis.
    pub fn broadcast_lead(&mut self, a: Var, n: usize) -> Var {
        let shape = self.nodes[a.0].shape.clone();
        let src = self.nodes[a.0].data.clone();
        let mut data = Vec::with_capacity(src.len() * n);
        for _ in 0..n {
            data.extend_from_slice(&src);
        }
        let mut out_shape = Vec::with_capacity(shape.len() + 1);
        out_shape.push(n);
        out_shape.extend_from_slice(&shape);
        let rg = self.nodes[a.0].requires_grad;
        self.push(out_shape, data, rg, Op::BroadcastLead { a, n })
    }

    /// Per-row sequence gather: `a: [B, L, d]`, `idx` of length B → `[B, d]`.
    pub fn gather_seq(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 3 || idx.len() != shape[0] {
            return Err(CoreError::BadShape {
                op: "gather_seq",
                msg: format!("need [B, L, d] with {} indices", idx.len()),
                shape,
            });
        }
        let (b, l, d) = (shape[0], shape[1], shape[2]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= l) {
            return Err(CoreError::BadShape {
                op: "gather_seq",
                msg: format!("index {} out of range for length {}", bad, l),
                shape: vec![b, l, d],
            });
        }
        let src = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(b * d);
        for (bi, &i) in idx.iter().enumerate() {
            let start = (bi * l + i) * d;
            out.extend_from_slice(&src[start..start + d]);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![b, d], out, rg, Op::GatherSeq { a, idx: idx.to_vec() }))
    }

    pub fn take_diag(&mut self, a: Var) -> Result<Var> {
        let shape = self.nodes[a.0].shape.clone();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(CoreError::BadShape {
                op: "take_diag",
                msg: "need a square matrix".into(),
                shape,
            });
        }
        let n = shape[0];
        let src = &self.nodes[a.0].data;
        let out: Vec<S> = (0..n).map(|i| src[i * n + i]).collect();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(vec![n], out, rg, Op::TakeDiag { a }))
    }

    // ── Instrumentation ──────────────────────────────────────────────

    /// True when `target`'s value depends on `source` through the graph.
    pub fn depends_on(&self, target: Var, source: Var) -> bool {
        let mut stack = vec![target.0];
        let mut seen = vec![false; self.nodes.len()];
        while let Some(id) = stack.pop() {
            if id == source.0 {
                return true;
            }
            if std::mem::replace(&mut seen[id], true) {
                continue;
            }
            for input in op_inputs(&self.nodes[id].op) {
                stack.push(input.0);
            }
        }
        false
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss; consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(CoreError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<S>>], v: Var, delta: &[S]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, &d) in g.iter_mut().zip(delta) {
                    *gi = *gi + d;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn backward_node(&self, id: usize, dout: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}

            Op::Add { a, b } => {
                self.accum(grads, *a, dout);
                if self.nodes[b.0].requires_grad {
                    let blen = self.nodes[b.0].data.len().max(1);
                    let mut db = vec![S::zero(); self.nodes[b.0].data.len()];
                    for (i, &d) in dout.iter().enumerate() {
                        db[i % blen] = db[i % blen] + d;
                    }
                    self.accum(grads, *b, &db);
                }
            }

            Op::Mul { a, b } => {
                let blen = self.nodes[b.0].data.len().max(1);
                if self.nodes[a.0].requires_grad {
                    let bd = &self.nodes[b.0].data;
                    let da: Vec<S> =
                        dout.iter().enumerate().map(|(i, &d)| d * bd[i % blen]).collect();
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    let ad = &self.nodes[a.0].data;
                    let mut db = vec![S::zero(); self.nodes[b.0].data.len()];
                    for (i, &d) in dout.iter().enumerate() {
                        db[i % blen] = db[i % blen] + d * ad[i];
                    }
                    self.accum(grads, *b, &db);
                }
            }

            Op::Neg { a } => {
                let da: Vec<S> = dout.iter().map(|&d| -d).collect();
                self.accum(grads, *a, &da);
            }

            Op::Scale { a, c } => {
                let cs = S::from_f64(*c);
                let da: Vec<S> = dout.iter().map(|&d| d * cs).collect();
                self.accum(grads, *a, &da);
            }

            Op::Matmul { a, b } => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batched = sb.len() > 2;
                let batch: usize = sa[..sa.len() - 2].iter().product();
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                if self.nodes[a.0].requires_grad {
                    // dA = dOut @ B^T
                    let mut da = vec![S::zero(); ad.len()];
                    for bi in 0..batch {
                        let dob = &dout[bi * m * n..(bi + 1) * m * n];
                        let bb = if batched { &bd[bi * k * n..(bi + 1) * k * n] } else { &bd[..] };
                        let dab = &mut da[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let d = dob[i * n + j];
                                let brow = &bb[j..]; // column j strided
                                let _ = brow;
                                for p in 0..k {
                                    dab[i * k + p] = dab[i * k + p] + d * bb[p * n + j];
                                }
                            }
                        }
                    }
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T @ dOut, summed over batch when B is 2-D
                    let mut db = vec![S::zero(); bd.len()];
                    for bi in 0..batch {
                        let ab = &ad[bi * m * k..(bi + 1) * m * k];
                        let dob = &dout[bi * m * n..(bi + 1) * m * n];
                        let dbb = if batched {
                            &mut db[bi * k * n..(bi + 1) * k * n]
                        } else {
                            &mut db[..]
                        };
                        for i in 0..m {
                            for p in 0..k {
                                let av = ab[i * k + p];
                                let dorow = &dob[i * n..(i + 1) * n];
                                let dbrow = &mut dbb[p * n..(p + 1) * n];
                                for j in 0..n {
                                    dbrow[j] = dbrow[j] + av * dorow[j];
                                }
                            }
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }

            Op::MatmulTb { a, b } => {
                let sa = &self.nodes[a.0].shape;
                let sb = &self.nodes[b.0].shape;
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                let ad = &self.nodes[a.0].data;
                let bd = &self.nodes[b.0].data;
                if self.nodes[a.0].requires_grad {
                    // dA = dOut @ B
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let d = dout[i * n + j];
                            let brow = &bd[j * k..(j + 1) * k];
                            let darow = &mut da[i * k..(i + 1) * k];
                            for p in 0..k {
                                darow[p] = darow[p] + d * brow[p];
                            }
                        }
                    }
                    self.accum(grads, *a, &da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = dOut^T @ A
                    let mut db = vec![S::zero(); n * k];
                    for i in 0..m {
                        let arow = &ad[i * k..(i + 1) * k];
                        for j in 0..n {
                            let d = dout[i * n + j];
                            let dbrow = &mut db[j * k..(j + 1) * k];
                            for p in 0..k {
                                dbrow[p] = dbrow[p] + d * arow[p];
                            }
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }

            Op::Softmax { a, axis } => {
                let y = &node.data;
                let (outer, dim, inner) = axis_split(&node.shape, *axis);
                let mut da = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + i;
                        let mut dot = S::zero();
                        for d in 0..dim {
                            dot = dot + dout[at(d)] * y[at(d)];
                        }
                        for d in 0..dim {
                            da[at(d)] = y[at(d)] * (dout[at(d)] - dot);
                        }
                    }
                }
                self.accum(grads, *a, &da);
            }

            Op::LogSoftmax { a, axis } => {
                let y = &node.data;
                let (outer, dim, inner) = axis_split(&node.shape, *axis);
                let mut da = vec![S::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |d: usize| (o * dim + d) * inner + i;
                        let mut sum = S::zero();
                        for d in 0..dim {
                            sum = sum + dout[at(d)];
                        }
                        for d in 0..dim {
                            da[at(d)] = dout[at(d)] - y[at(d)].exp() * sum;
                        }
                    }
                }
                self.accum(grads, *a, &da);
            }

            Op::LayerNorm { x, gain, bias, eps } => {
                let shape = &self.nodes[x.0].shape;
                let dim = *shape.last().unwrap();
                let rows = numel(shape) / dim;
                let src = &self.nodes[x.0].data;
                let g = &self.nodes[gain.0].data;
                let epss = S::from_f64(*eps);
                let dimn = S::from_usize(dim);
                let mut dx = vec![S::zero(); src.len()];
                let mut dgain = vec![S::zero(); dim];
                let mut dbias = vec![S::zero(); dim];
                for r in 0..rows {
                    let row = &src[r * dim..(r + 1) * dim];
                    let dorow = &dout[r * dim..(r + 1) * dim];
                    let mut mean = S::zero();
                    for &v in row {
                        mean = mean + v;
                    }
                    mean = mean / dimn;
                    let mut var = S::zero();
                    for &v in row {
                        let d = v - mean;
                        var = var + d * d;
                    }
                    var = var / dimn;
                    let inv = (var + epss).sqrt().recip();
                    // dL/dxhat = g * dout; dx via the standard three-term rule
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for c in 0..dim {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = g[c] * dorow[c];
                        sum_dxhat = sum_dxhat + dxhat;
                        sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                        dgain[c] = dgain[c] + dorow[c] * xhat;
                        dbias[c] = dbias[c] + dorow[c];
                    }
                    for c in 0..dim {
                        let xhat = (row[c] - mean) * inv;
                        let dxhat = g[c] * dorow[c];
                        dx[r * dim + c] =
                            (dxhat - sum_dxhat / dimn - xhat * sum_dxhat_xhat / dimn) * inv;
                    }
                }
                self.accum(grads, *x, &dx);
                self.accum(grads, *gain, &dgain);
                self.accum(grads, *bias, &dbias);
            }

            Op::Gelu { a } => {
                const C: f64 = 0.797_884_560_802_865_4;
                let src = &self.nodes[a.0].data;
                let da: Vec<S> = src
                    .iter()
                    .zip(dout)
                    .map(|(&x, &d)| {
                        let xf = x.as_f64();
                        let u = C * (xf + 0.044715 * xf * xf * xf);
                        let t = u.tanh();
                        let du = C * (1.0 + 3.0 * 0.044715 * xf * xf);
                        let gp = 0.5 * (1.0 + t) + 0.5 * xf * (1.0 - t * t) * du;
                        d * S::from_f64(gp)
                    })
                    .collect();
                self.accum(grads, *a, &da);
            }

            Op::Sigmoid { a } => {
                let y = &node.data;
                let one = S::one();
                let da: Vec<S> =
                    y.iter().zip(dout).map(|(&y, &d)| d * y * (one - y)).collect();
                self.accum(grads, *a, &da);
            }

            Op::Tanh { a } => {
                let y = &node.data;
                let one = S::one();
                let da: Vec<S> =
                    y.iter().zip(dout).map(|(&y, &d)| d * (one - y * y)).collect();
                self.accum(grads, *a, &da);
            }

            Op::Exp { a } => {
                let y = &node.data;
                let da: Vec<S> = y.iter().zip(dout).map(|(&y, &d)| d * y).collect();
                self.accum(grads, *a, &da);
            }

            Op::ClampMax { a, max } => {
                let ms = S::from_f64(*max);
                let src = &self.nodes[a.0].data;
                let da: Vec<S> = src
                    .iter()
                    .zip(dout)
                    .map(|(&x, &d)| if x > ms { S::zero() } else { d })
                    .collect();
                self.accum(grads, *a, &da);
            }

            Op::Embedding { table, ids } => {
                let d = self.nodes[table.0].shape[1];
                let mut dt = vec![S::zero(); self.nodes[table.0].data.len()];
                for (row, &i) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[i * d + c] = dt[i * d + c] + dout[row * d + c];
                    }
                }
                self.accum(grads, *table, &dt);
            }

            Op::Concat { inputs, axis } => {
                let shape = &node.shape;
                let (outer, total, inner) = axis_split(shape, *axis);
                for o in 0..outer {
                    let mut off = 0usize;
                    for &v in inputs {
                        let dim = self.nodes[v.0].shape[*axis];
                        let chunk = dim * inner;
                        if self.nodes[v.0].requires_grad {
                            let src_start = (o * total + off) * inner;
                            // Accumulate one outer-block at a time so repeated
                            // inputs sum correctly.
                            let mut dv = vec![S::zero(); self.nodes[v.0].data.len()];
                            dv[o * chunk..(o + 1) * chunk]
                                .copy_from_slice(&dout[src_start..src_start + chunk]);
                            self.accum(grads, v, &dv);
                        }
                        off += dim;
                    }
                }
            }

            Op::Slice { a, axis, start, len } => {
                let in_shape = &self.nodes[a.0].shape;
                let (outer, dim, inner) = axis_split(in_shape, *axis);
                let mut da = vec![S::zero(); self.nodes[a.0].data.len()];
                for o in 0..outer {
                    let dst_start = (o * dim + start) * inner;
                    let src_start = o * len * inner;
                    da[dst_start..dst_start + len * inner]
                        .copy_from_slice(&dout[src_start..src_start + len * inner]);
                }
                self.accum(grads, *a, &da);
            }

            Op::MeanAxis { a, axis } => {
                let in_shape = &self.nodes[a.0].shape;
                let (outer, dim, inner) = axis_split(in_shape, *axis);
                let dimn = S::from_usize(dim);
                let mut da = vec![S::zero(); self.nodes[a.0].data.len()];
                for o in 0..outer {
                    for d in 0..dim {
                        for i in 0..inner {
                            da[(o * dim + d) * inner + i] = dout[o * inner + i] / dimn;
                        }
                    }
                }
                self.accum(grads, *a, &da);
            }

            Op::MeanAll { a } => {
                let n = S::from_usize(self.nodes[a.0].data.len().max(1));
                let d = dout[0] / n;
                let da = vec![d; self.nodes[a.0].data.len()];
                self.accum(grads, *a, &da);
            }

            Op::L2Normalize { a, eps } => {
                let shape = &self.nodes[a.0].shape;
                let dim = *shape.last().unwrap();
                let rows = numel(shape) / dim;
                let src = &self.nodes[a.0].data;
                let y = &node.data;
                let _ = eps;
                let mut da = vec![S::zero(); src.len()];
                for r in 0..rows {
                    let row = &src[r * dim..(r + 1) * dim];
                    let yrow = &y[r * dim..(r + 1) * dim];
                    let dorow = &dout[r * dim..(r + 1) * dim];
                    let mut sq = S::zero();
                    for &v in row {
                        sq = sq + v * v;
                    }
                    let norm = sq.sqrt();
                    let mut dot = S::zero();
                    for c in 0..dim {
                        dot = dot + dorow[c] * yrow[c];
                    }
                    for c in 0..dim {
                        da[r * dim + c] = (dorow[c] - yrow[c] * dot) / norm;
                    }
                }
                self.accum(grads, *a, &da);
            }

            Op::Permute { a, perm } => {
                // Gradient moves back through the inverse permutation.
                let mut inv = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let da = permute_data(dout, &node.shape, &inv);
                self.accum(grads, *a, &da);
            }

            Op::Reshape { a } => {
                self.accum(grads, *a, dout);
            }

            Op::BroadcastLead { a, n } => {
                let len = self.nodes[a.0].data.len();
                let mut da = vec![S::zero(); len];
                for bi in 0..*n {
                    for (i, dv) in da.iter_mut().enumerate() {
                        *dv = *dv + dout[bi * len + i];
                    }
                }
                self.accum(grads, *a, &da);
            }

            Op::GatherSeq { a, idx } => {
                let shape = &self.nodes[a.0].shape;
                let (l, d) = (shape[1], shape[2]);
                let mut da = vec![S::zero(); self.nodes[a.0].data.len()];
                for (bi, &i) in idx.iter().enumerate() {
                    for c in 0..d {
                        da[(bi * l + i) * d + c] = da[(bi * l + i) * d + c] + dout[bi * d + c];
                    }
                }
                self.accum(grads, *a, &da);
            }

            Op::TakeDiag { a } => {
                let n = self.nodes[a.0].shape[0];
                let mut da = vec![S::zero(); n * n];
                for i in 0..n {
                    da[i * n + i] = dout[i];
                }
                self.accum(grads, *a, &da);
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add { a, b } | Op::Mul { a, b } | Op::Matmul { a, b } | Op::MatmulTb { a, b } => {
            vec![*a, *b]
        }
        Op::Neg { a }
        | Op::Scale { a, .. }
        | Op::Softmax { a, .. }
        | Op::LogSoftmax { a, .. }
        | Op::Gelu { a }
        | Op::Sigmoid { a }
        | Op::Tanh { a }
        | Op::Exp { a }
        | Op::ClampMax { a, .. }
        | Op::Slice { a, .. }
        | Op::MeanAxis { a, .. }
        | Op::MeanAll { a }
        | Op::L2Normalize { a, .. }
        | Op::Permute { a, .. }
        | Op::Reshape { a }
        | Op::BroadcastLead { a, .. }
        | Op::GatherSeq { a, .. }
        | Op::TakeDiag { a } => vec![*a],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::Embedding { table, .. } => vec![*table],
        Op::Concat { inputs, .. } => inputs.clone(),
    }
}

fn permute_data<S: Scalar>(src: &[S], in_shape: &[usize], perm: &[usize]) -> Vec<S> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let out_strides = strides(&out_shape);
    let mut out = vec![src[0]; src.len()];
    for (flat, o) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src_idx = 0usize;
        for (k, &os) in out_strides.iter().enumerate() {
            let coord = rem / os;
            rem %= os;
            src_idx += coord * in_strides[perm[k]];
        }
        *o = src[src_idx];
    }
    out
}

fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: Vec<usize>, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_shape_algebra() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::ones(vec![2, 3]), false);
        let b = tape.leaf(&Tensor::ones(vec![3, 4]), false);
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 4]);
        assert!(tape.value(c).iter().all(|&v| (v - 3.0).abs() < 1e-12));

        let bad = tape.matmul(a, a);
        assert!(matches!(bad, Err(CoreError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_of_constant_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::full(vec![5], 3.7), false);
        let s = tape.softmax(a, 0).unwrap();
        for &v in tape.value(s) {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_unit_gain_zero_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![1, 3], vec![1.0, 2.0, 3.0]), false);
        let g = tape.leaf(&Tensor::ones(vec![3]), false);
        let b = tape.leaf(&Tensor::zeros(vec![3]), false);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        let v = tape.value(y);
        assert!((v[0] + 1.2247).abs() < 1e-3, "got {}", v[0]);
        assert!(v[1].abs() < 1e-9);
        assert!((v[2] - 1.2247).abs() < 1e-3);
    }

    #[test]
    fn square_loss_gradient() {
        // loss = x^2 at x = 3 -> grad 6
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::scalar(3.0), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert!((grads.get(x).unwrap()[0] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn sum_of_softmax_has_zero_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t64(vec![4], vec![0.3, -1.0, 2.0, 0.7]), true);
        let s = tape.softmax(x, 0).unwrap();
        let m = tape.mean_all(s); // mean = sum / 4; gradient still identically 0
        let grads = tape.backward(m).unwrap();
        for &g in grads.get(x).unwrap() {
            assert!(g.abs() < 1e-14, "got {}", g);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::ones(vec![2]), true);
        let y = tape.neg(x);
        assert!(matches!(tape.backward(y), Err(CoreError::NonScalarLoss(_))));
    }

    #[test]
    fn suffix_broadcast_add_backward_sums_over_batch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::ones(vec![2, 3]), false);
        let bias = tape.leaf(&t64(vec![3], vec![0.1, 0.2, 0.3]), true);
        let y = tape.add(x, bias).unwrap();
        let loss = tape.mean_all(y);
        let grads = tape.backward(loss).unwrap();
        // d mean / d bias_j = 2 rows / 6 elements = 1/3
        for &g in grads.get(bias).unwrap() {
            assert!((g - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_suffix_broadcast() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::ones(vec![2, 3]), false);
        let b = tape.leaf(&Tensor::ones(vec![2]), false);
        assert!(matches!(tape.add(a, b), Err(CoreError::ShapeMismatch { .. })));
    }

    #[test]
    fn embedding_rejects_out_of_range() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(&Tensor::ones(vec![4, 2]), false);
        assert!(tape.embedding(table, &[0, 5]).is_err());
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t64(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), false);
        let b = tape.leaf(&t64(vec![1, 1, 2], vec![5.0, 6.0]), false);
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 3, 2]);
        assert_eq!(tape.value(c), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = tape.slice(c, 1, 2, 1).unwrap();
        assert_eq!(tape.value(s), &[5.0, 6.0]);
    }

    #[test]
    fn dependency_tracking() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&Tensor::ones(vec![2]), true);
        let b = tape.leaf(&Tensor::ones(vec![2]), true);
        let c = tape.neg(a);
        let d = tape.add(c, b).unwrap();
        assert!(tape.depends_on(d, a));
        assert!(tape.depends_on(d, b));
        assert!(!tape.depends_on(c, b));
    }

    /// Central-difference check of one scalar-output graph builder.
    fn fd_check(build: impl Fn(&mut Tape<f64>, Var) -> Var, x0: Tensor<f64>) {
        let h = 1e-6;
        let analytic = {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(&x0, true);
            let loss = build(&mut tape, x);
            let grads = tape.backward(loss).unwrap();
            grads.get(x).unwrap().to_vec()
        };
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data[i] += delta;
                let mut tape = Tape::<f64>::new();
                let x = tape.leaf(&xp, false);
                let loss = build(&mut tape, x);
                tape.value(loss)[0]
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (analytic[i] - num).abs() / analytic[i].abs().max(num.abs()).max(1e-6);
            assert!(err < 1e-6, "coord {}: analytic {} vs numeric {}", i, analytic[i], num);
        }
    }

    #[test]
    fn fd_spot_checks() {
        let x0 = t64(vec![2, 4], vec![0.3, -1.2, 0.8, 0.1, -0.5, 1.4, -0.9, 0.2]);

        fd_check(
            |tape, x| {
                let y = tape.gelu(x);
                tape.mean_all(y)
            },
            x0.clone(),
        );
        fd_check(
            |tape, x| {
                let y = tape.softmax(x, 1).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.mean_all(sq)
            },
            x0.clone(),
        );
        fd_check(
            |tape, x| {
                let y = tape.log_softmax(x, 0).unwrap();
                let d = tape.slice(y, 1, 0, 2).unwrap();
                let sq = tape.mul(d, d).unwrap();
                tape.mean_all(sq)
            },
            x0.clone(),
        );
        fd_check(
            |tape, x| {
                let y = tape.l2_normalize(x, 1e-12).unwrap();
                let c = tape.constant(&t64(vec![4], vec![0.2, -0.1, 0.4, 0.3]));
                let p = tape.mul(y, c).unwrap();
                tape.mean_all(p)
            },
            x0.clone(),
        );
        fd_check(
            |tape, x| {
                let g = tape.constant(&t64(vec![4], vec![1.1, 0.9, 1.0, 1.2]));
                let b = tape.constant(&t64(vec![4], vec![0.1, -0.2, 0.0, 0.3]));
                let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.mean_all(sq)
            },
            x0.clone(),
        );
        fd_check(
            |tape, x| {
                let p = tape.permute(x, &[1, 0]).unwrap();
                let r = tape.reshape(p, &[2, 4]).unwrap();
                let m = tape.matmul_tb(r, r).unwrap();
                let d = tape.take_diag(m).unwrap();
                tape.mean_all(d)
            },
            x0.clone(),
        );
        fd_check(
            |tape, x| {
                let b = tape.broadcast_lead(x, 3);
                let s = tape.sigmoid(b);
                let t = tape.tanh(s);
                tape.mean_all(t)
            },
            x0.clone(),
        );
        fd_check(
            |tape, x| {
                let g = tape.gather_seq(x, &[3, 1]).unwrap();
                let e = tape.exp(g);
                let c = tape.clamp_max(e, 2.0);
                tape.mean_all(c)
            },
            t64(vec![2, 4, 1], x0.data.clone()),
        );
        // batched matmul + concat with a repeated input
        fd_check(
            |tape, x| {
                let y = tape.concat(&[x, x], 1).unwrap(); // [2, 8]
                let r = tape.reshape(y, &[2, 2, 4]).unwrap();
                let q = tape.permute(r, &[0, 2, 1]).unwrap(); // [2, 4, 2]
                let m = tape.matmul(r, q).unwrap(); // [2, 2, 2]
                tape.mean_all(m)
            },
            x0.clone(),
        );
        // embedding lookup gradient (scatter-add)
        fd_check(
            |tape, x| {
                let e = tape.embedding(x, &[1, 0, 1]).unwrap();
                let sq = tape.mul(e, e).unwrap();
                tape.mean_all(sq)
            },
            x0.clone(),
        );
        // mean over a middle axis
        fd_check(
            |tape, x| {
                let r = tape.reshape(x, &[2, 2, 2]).unwrap();
                let m = tape.mean_axis(r, 1).unwrap();
                let sq = tape.mul(m, m).unwrap();
                tape.mean_all(sq)
            },
            x0,
        );
    }
}
