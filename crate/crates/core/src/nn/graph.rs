use super::{Mode, NnError, ParameterSet, Scalar, Tensor};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Handle to a node on the tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    Concat(NodeId, NodeId),
    SliceCols(NodeId, usize, usize),
    StackSteps(Vec<NodeId>),
    SliceStep(NodeId, usize),
    BatchToTimeMajor(NodeId),
    Conv2dSame {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
    },
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    MaskedSoftmax {
        x: NodeId,
        valid: Vec<usize>,
    },
    AttnScores {
        q: NodeId,
        states: NodeId,
    },
    AttnContext {
        w: NodeId,
        states: NodeId,
    },
    SoftmaxXent {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    SumAll(NodeId),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    param: Option<usize>,
}

/// Per-node gradients produced by [`Graph::backward`].
pub struct Gradients<F>(Vec<Option<Tensor<F>>>);

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<F>> {
        self.0.get(id).and_then(|g| g.as_ref())
    }
}

/// Eagerly-evaluated autodiff tape.
///
/// Values are computed as ops are recorded; [`Graph::backward`] walks the tape
/// in reverse, accumulating gradients additively across every use of a node.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, param: Option<usize>) -> NodeId {
        debug_assert!(value.all_finite(), "non-finite value out of {:?}", op_name(&op));
        self.nodes.push(Node { value, op, param });
        self.nodes.len() - 1
    }

    /// Records a constant leaf (no gradient destination).
    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t, Op::Leaf, None)
    }

    /// Records a leaf bound to a named parameter; gradients flow back to it
    /// through [`Graph::backward_into`].
    pub fn param(&mut self, params: &ParameterSet<F>, name: &str) -> Result<NodeId, NnError> {
        let idx = params
            .index_of(name)
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))?;
        let value = params.entry(idx).value.clone();
        Ok(self.push(value, Op::Leaf, Some(idx)))
    }

    /// `a · b` for 2-D operands `[m,k] · [k,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                expected: "[m,k]x[k,n]".into(),
                got: format!("{sa:?}x{sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_vec(&[m, n], out), Op::MatMul(a, b), None))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(&shape, data), Op::Add(a, b), None))
    }

    /// Adds a length-`d` bias to every row of `x: [..., d]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(b).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != d {
            return Err(NnError::ShapeMismatch {
                op: "add_bias",
                expected: format!("bias [{d}]"),
                got: format!("{sb:?}"),
            });
        }
        let bias = self.value(b).data().to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % d])
            .collect();
        Ok(self.push(Tensor::from_vec(&sx, data), Op::AddBias(x, b), None))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_vec(&shape, data), Op::Mul(a, b), None))
    }

    pub fn scale(&mut self, x: NodeId, c: F) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Scale(x, c), None)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| F::one() / (F::one() + (-v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Sigmoid(x), None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|&v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Tanh(x), None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_vec(&shape, data), Op::Relu(x), None)
    }

    /// Free reinterpretation of the element buffer under a new shape.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NnError> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(NnError::ShapeMismatch {
                op: "reshape",
                expected: format!("{} elements", self.value(x).len()),
                got: format!("{shape:?}"),
            });
        }
        let t = self.value(x).clone().reshaped(shape);
        Ok(self.push(t, Op::Reshape(x), None))
    }

    /// Concatenates two tensors with equal leading dims along the last axis.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(NnError::ShapeMismatch {
                op: "concat",
                expected: "equal leading dims".into(),
                got: format!("{sa:?} vs {sb:?}"),
            });
        }
        let (da, db) = (*sa.last().unwrap(), *sb.last().unwrap());
        let rows = self.value(a).len() / da.max(1);
        let mut data = Vec::with_capacity(rows * (da + db));
        for r in 0..rows {
            data.extend_from_slice(&self.value(a).data()[r * da..(r + 1) * da]);
            data.extend_from_slice(&self.value(b).data()[r * db..(r + 1) * db]);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = da + db;
        Ok(self.push(Tensor::from_vec(&shape, data), Op::Concat(a, b), None))
    }

    /// Takes columns `[start, start+len)` of the last axis.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NnError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap();
        if start + len > d {
            return Err(NnError::ShapeMismatch {
                op: "slice_cols",
                expected: format!("within {d} columns"),
                got: format!("{start}..{}", start + len),
            });
        }
        let rows = self.value(x).len() / d.max(1);
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.value(x).data()[r * d + start..r * d + start + len]);
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = len;
        Ok(self.push(Tensor::from_vec(&shape, data), Op::SliceCols(x, start, len), None))
    }

    /// Stacks `K` same-shape tensors into `[K, ...]`.
    pub fn stack_steps(&mut self, parts: &[NodeId]) -> Result<NodeId, NnError> {
        if parts.is_empty() {
            return Err(NnError::InvalidArg("stack_steps of zero tensors".into()));
        }
        let s0 = self.shape(parts[0]).to_vec();
        for &p in parts {
            if self.shape(p) != s0.as_slice() {
                return Err(NnError::ShapeMismatch {
                    op: "stack_steps",
                    expected: format!("{s0:?}"),
                    got: format!("{:?}", self.shape(p)),
                });
            }
        }
        let mut data = Vec::with_capacity(parts.len() * self.value(parts[0]).len());
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&s0);
        Ok(self.push(
            Tensor::from_vec(&shape, data),
            Op::StackSteps(parts.to_vec()),
            None,
        ))
    }

    /// Extracts index `t` of the leading axis: `[T, ...] -> [...]`.
    pub fn slice_step(&mut self, x: NodeId, t: usize) -> Result<NodeId, NnError> {
        let sx = self.shape(x).to_vec();
        if sx.is_empty() || t >= sx[0] {
            return Err(NnError::ShapeMismatch {
                op: "slice_step",
                expected: format!("t < {}", sx.first().unwrap_or(&0)),
                got: format!("t = {t}"),
            });
        }
        let chunk = self.value(x).len() / sx[0];
        let data = self.value(x).data()[t * chunk..(t + 1) * chunk].to_vec();
        Ok(self.push(
            Tensor::from_vec(&sx[1..], data),
            Op::SliceStep(x, t),
            None,
        ))
    }

    /// `[B, T, D] -> [T, B, D]`.
    pub fn batch_to_time_major(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(NnError::ShapeMismatch {
                op: "batch_to_time_major",
                expected: "[B,T,D]".into(),
                got: format!("{sx:?}"),
            });
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let src = self.value(x).data();
        let mut data = vec![F::zero(); src.len()];
        for bi in 0..b {
            for ti in 0..t {
                let from = (bi * t + ti) * d;
                let to = (ti * b + bi) * d;
                data[to..to + d].copy_from_slice(&src[from..from + d]);
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[t, b, d], data),
            Op::BatchToTimeMajor(x),
            None,
        ))
    }

    /// Same-padding strided 2-D convolution over `[B, T, F, C_in]`.
    ///
    /// Filters are `[KH, KW, C_in, C_out]`, output `[B, ceil(T/sh), ceil(F/sw), C_out]`.
    pub fn conv2d_same(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: (usize, usize),
    ) -> Result<NodeId, NnError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        if sx.len() != 4 || sw.len() != 4 {
            return Err(NnError::ShapeMismatch {
                op: "conv2d_same",
                expected: "x [B,T,F,Ci], w [KH,KW,Ci,Co]".into(),
                got: format!("{sx:?}, {sw:?}"),
            });
        }
        if sx[3] != sw[2] {
            return Err(NnError::ShapeMismatch {
                op: "conv2d_same",
                expected: format!("input channels {}", sw[2]),
                got: format!("{}", sx[3]),
            });
        }
        if sb != vec![sw[3]] {
            return Err(NnError::ShapeMismatch {
                op: "conv2d_same",
                expected: format!("bias [{}]", sw[3]),
                got: format!("{sb:?}"),
            });
        }
        let geo = ConvGeometry::new(&sx, &sw, stride);
        let out = conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            &geo,
        );
        Ok(self.push(
            Tensor::from_vec(&geo.out_shape(), out),
            Op::Conv2dSame { x, w, b, stride },
            None,
        ))
    }

    /// Gathers rows of `table: [V, E]` at `ids`, producing `[ids.len(), E]`.
    ///
    /// Backward accumulates into the looked-up rows only; a row gathered twice
    /// receives the sum of both upstream gradients.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId, NnError> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(NnError::ShapeMismatch {
                op: "embed",
                expected: "[V,E]".into(),
                got: format!("{st:?}"),
            });
        }
        let (v, e) = (st[0], st[1]);
        for &id in ids {
            if id >= v {
                return Err(NnError::IdOutOfRange { id, rows: v });
            }
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            data.extend_from_slice(&src[id * e..(id + 1) * e]);
        }
        Ok(self.push(
            Tensor::from_vec(&[ids.len(), e], data),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            None,
        ))
    }

    /// Row-wise softmax over the first `valid[b]` entries of `x: [B, T]`;
    /// positions at or past the valid length come out exactly zero.
    pub fn masked_softmax(&mut self, x: NodeId, valid: &[usize]) -> Result<NodeId, NnError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || valid.len() != sx[0] {
            return Err(NnError::ShapeMismatch {
                op: "masked_softmax",
                expected: format!("[B,T] with {} lengths", sx.first().unwrap_or(&0)),
                got: format!("{sx:?}, {} lengths", valid.len()),
            });
        }
        let t = sx[1];
        for &l in valid {
            if l > t {
                return Err(NnError::LengthExceedsSequence { len: l, t });
            }
        }
        let src = self.value(x).data();
        let mut data = vec![F::zero(); src.len()];
        for (bi, &len) in valid.iter().enumerate() {
            let row = &src[bi * t..bi * t + len];
            if len == 0 {
                continue;
            }
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - m).exp();
                data[bi * t + j] = e;
                z = z + e;
            }
            for j in 0..len {
                data[bi * t + j] = data[bi * t + j] / z;
            }
        }
        Ok(self.push(
            Tensor::from_vec(&sx, data),
            Op::MaskedSoftmax {
                x,
                valid: valid.to_vec(),
            },
            None,
        ))
    }

    /// Bilinear attention scores: `q: [B, H]` against `states: [T, B, H]` -> `[B, T]`.
    pub fn attn_scores(&mut self, q: NodeId, states: NodeId) -> Result<NodeId, NnError> {
        let sq = self.shape(q).to_vec();
        let ss = self.shape(states).to_vec();
        if sq.len() != 2 || ss.len() != 3 || sq[0] != ss[1] || sq[1] != ss[2] {
            return Err(NnError::ShapeMismatch {
                op: "attn_scores",
                expected: "q [B,H], states [T,B,H]".into(),
                got: format!("{sq:?}, {ss:?}"),
            });
        }
        let (t, b, h) = (ss[0], ss[1], ss[2]);
        let qd = self.value(q).data();
        let sd = self.value(states).data();
        let mut data = vec![F::zero(); b * t];
        for ti in 0..t {
            for bi in 0..b {
                let mut dot = F::zero();
                let sbase = (ti * b + bi) * h;
                let qbase = bi * h;
                for hi in 0..h {
                    dot = dot + qd[qbase + hi] * sd[sbase + hi];
                }
                data[bi * t + ti] = dot;
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[b, t], data),
            Op::AttnScores { q, states },
            None,
        ))
    }

    /// Attention-weighted sum of states: `w: [B, T]`, `states: [T, B, H]` -> `[B, H]`.
    pub fn attn_context(&mut self, w: NodeId, states: NodeId) -> Result<NodeId, NnError> {
        let swt = self.shape(w).to_vec();
        let ss = self.shape(states).to_vec();
        if swt.len() != 2 || ss.len() != 3 || swt[0] != ss[1] || swt[1] != ss[0] {
            return Err(NnError::ShapeMismatch {
                op: "attn_context",
                expected: "w [B,T], states [T,B,H]".into(),
                got: format!("{swt:?}, {ss:?}"),
            });
        }
        let (t, b, h) = (ss[0], ss[1], ss[2]);
        let wd = self.value(w).data();
        let sd = self.value(states).data();
        let mut data = vec![F::zero(); b * h];
        for bi in 0..b {
            for ti in 0..t {
                let wv = wd[bi * t + ti];
                if wv == F::zero() {
                    continue;
                }
                let sbase = (ti * b + bi) * h;
                for hi in 0..h {
                    data[bi * h + hi] = data[bi * h + hi] + wv * sd[sbase + hi];
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[b, h], data),
            Op::AttnContext { w, states },
            None,
        ))
    }

    /// Numerically stable masked mean cross-entropy.
    ///
    /// `logits` is interpreted as `[N, V]` with `N` the product of its leading
    /// dims; `targets` and `mask` have length `N`. Masked positions contribute
    /// zero; the result is the mean over unmasked positions.
    pub fn softmax_xent(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId, NnError> {
        let sl = self.shape(logits).to_vec();
        let v = *sl.last().ok_or_else(|| NnError::InvalidArg("empty logits".into()))?;
        let n = self.value(logits).len() / v.max(1);
        if targets.len() != n || mask.len() != n {
            return Err(NnError::ShapeMismatch {
                op: "softmax_xent",
                expected: format!("{n} targets and mask entries"),
                got: format!("{} targets, {} mask", targets.len(), mask.len()),
            });
        }
        let unmasked = mask.iter().filter(|&&m| m).count();
        if unmasked == 0 {
            return Err(NnError::AllMasked);
        }
        for (i, &t) in targets.iter().enumerate() {
            if mask[i] && t >= v {
                return Err(NnError::IdOutOfRange { id: t, rows: v });
            }
        }
        let src = self.value(logits).data();
        let mut total = F::zero();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            let row = &src[i * v..(i + 1) * v];
            let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for &x in row {
                z = z + (x - m).exp();
            }
            total = total + (m + z.ln() - row[targets[i]]);
        }
        let mean = total / F::from_f64(unmasked as f64);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            None,
        ))
    }

    /// Scalar sum of all elements.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: F = self.value(x).data().iter().cloned().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), None)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), NnError> {
        if self.shape(a) != self.shape(b) {
            return Err(NnError::ShapeMismatch {
                op,
                expected: format!("{:?}", self.shape(a)),
                got: format!("{:?}", self.shape(b)),
            });
        }
        Ok(())
    }

    /// Runs reverse-mode differentiation from a scalar `loss` node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>, NnError> {
        if self.nodes.is_empty() {
            return Err(NnError::EmptyGraph);
        }
        if loss >= self.nodes.len() {
            return Err(NnError::InvalidArg(format!("node {loss} not on tape")));
        }
        if self.value(loss).shape() != [1] {
            return Err(NnError::NotScalarLoss(self.value(loss).shape().to_vec()));
        }

        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(F::one()));

        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients(grads))
    }

    /// Backward pass that accumulates leaf gradients into `params`.
    ///
    /// `params` must be the same set the graph's [`Graph::param`] leaves were
    /// loaded from. Gradients add onto whatever is already stored, so calling
    /// this for several losses sums their gradients.
    pub fn backward_into(
        &self,
        loss: NodeId,
        params: &mut ParameterSet<F>,
    ) -> Result<(), NnError> {
        let grads = self.backward(loss)?;
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Some(pidx), Some(g)) = (node.param, grads.get(id)) {
                params.accumulate_grad(pidx, g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, id: NodeId, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let ga = matmul_nt(g.data(), self.value(*b).data(), m, n, k);
                let gb = matmul_tn(self.value(*a).data(), g.data(), m, k, n);
                acc(grads, *a, &[m, k], &ga);
                acc(grads, *b, &[k, n], &gb);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.shape(), g.data());
                acc(grads, *b, g.shape(), g.data());
            }
            Op::AddBias(x, b) => {
                acc(grads, *x, g.shape(), g.data());
                let d = self.value(*b).len();
                let mut gb = vec![F::zero(); d];
                for (i, &v) in g.data().iter().enumerate() {
                    gb[i % d] = gb[i % d] + v;
                }
                acc(grads, *b, &[d], &gb);
            }
            Op::Mul(a, b) => {
                let ga: Vec<F> = g
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&gv, &bv)| gv * bv)
                    .collect();
                let gb: Vec<F> = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&gv, &av)| gv * av)
                    .collect();
                acc(grads, *a, g.shape(), &ga);
                acc(grads, *b, g.shape(), &gb);
            }
            Op::Scale(x, c) => {
                let gx: Vec<F> = g.data().iter().map(|&v| v * *c).collect();
                acc(grads, *x, g.shape(), &gx);
            }
            Op::Sigmoid(x) => {
                let y = self.value(id).data();
                let gx: Vec<F> = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * yv * (F::one() - yv))
                    .collect();
                acc(grads, *x, g.shape(), &gx);
            }
            Op::Tanh(x) => {
                let y = self.value(id).data();
                let gx: Vec<F> = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&gv, &yv)| gv * (F::one() - yv * yv))
                    .collect();
                acc(grads, *x, g.shape(), &gx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<F> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > F::zero() { gv } else { F::zero() })
                    .collect();
                acc(grads, *x, g.shape(), &gx);
            }
            Op::Reshape(x) => {
                acc(grads, *x, self.shape(*x), g.data());
            }
            Op::Concat(a, b) => {
                let da = *self.shape(*a).last().unwrap();
                let db = *self.shape(*b).last().unwrap();
                let rows = self.value(*a).len() / da.max(1);
                let mut ga = vec![F::zero(); rows * da];
                let mut gb = vec![F::zero(); rows * db];
                for r in 0..rows {
                    let row = &g.data()[r * (da + db)..(r + 1) * (da + db)];
                    ga[r * da..(r + 1) * da].copy_from_slice(&row[..da]);
                    gb[r * db..(r + 1) * db].copy_from_slice(&row[da..]);
                }
                acc(grads, *a, self.shape(*a), &ga);
                acc(grads, *b, self.shape(*b), &gb);
            }
            Op::SliceCols(x, start, len) => {
                let d = *self.shape(*x).last().unwrap();
                let rows = self.value(*x).len() / d.max(1);
                let mut gx = vec![F::zero(); rows * d];
                for r in 0..rows {
                    for j in 0..*len {
                        gx[r * d + start + j] = g.data()[r * len + j];
                    }
                }
                acc(grads, *x, self.shape(*x), &gx);
            }
            Op::StackSteps(parts) => {
                let chunk = g.data().len() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    acc(grads, p, self.shape(p), &g.data()[i * chunk..(i + 1) * chunk]);
                }
            }
            Op::SliceStep(x, t) => {
                let sx = self.shape(*x);
                let chunk = self.value(*x).len() / sx[0];
                let mut gx = vec![F::zero(); self.value(*x).len()];
                gx[t * chunk..(t + 1) * chunk].copy_from_slice(g.data());
                acc(grads, *x, sx, &gx);
            }
            Op::BatchToTimeMajor(x) => {
                let sx = self.shape(*x);
                let (b, t, d) = (sx[0], sx[1], sx[2]);
                let mut gx = vec![F::zero(); b * t * d];
                for bi in 0..b {
                    for ti in 0..t {
                        let from = (ti * b + bi) * d;
                        let to = (bi * t + ti) * d;
                        gx[to..to + d].copy_from_slice(&g.data()[from..from + d]);
                    }
                }
                acc(grads, *x, sx, &gx);
            }
            Op::Conv2dSame { x, w, b, stride } => {
                let geo = ConvGeometry::new(self.shape(*x), self.shape(*w), *stride);
                let (gx, gw, gb) = conv_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g.data(),
                    &geo,
                );
                acc(grads, *x, self.shape(*x), &gx);
                acc(grads, *w, self.shape(*w), &gw);
                acc(grads, *b, self.shape(*b), &gb);
            }
            Op::Embed { table, ids } => {
                let st = self.shape(*table);
                let e = st[1];
                let mut gt = vec![F::zero(); st[0] * e];
                for (i, &id2) in ids.iter().enumerate() {
                    for j in 0..e {
                        gt[id2 * e + j] = gt[id2 * e + j] + g.data()[i * e + j];
                    }
                }
                acc(grads, *table, st, &gt);
            }
            Op::MaskedSoftmax { x, valid } => {
                let t = self.shape(*x)[1];
                let y = self.value(id).data();
                let mut gx = vec![F::zero(); y.len()];
                for (bi, &len) in valid.iter().enumerate() {
                    let mut dot = F::zero();
                    for j in 0..len {
                        dot = dot + g.data()[bi * t + j] * y[bi * t + j];
                    }
                    for j in 0..len {
                        gx[bi * t + j] = y[bi * t + j] * (g.data()[bi * t + j] - dot);
                    }
                }
                acc(grads, *x, self.shape(*x), &gx);
            }
            Op::AttnScores { q, states } => {
                let ss = self.shape(*states);
                let (t, b, h) = (ss[0], ss[1], ss[2]);
                let qd = self.value(*q).data();
                let sd = self.value(*states).data();
                let mut gq = vec![F::zero(); b * h];
                let mut gs = vec![F::zero(); t * b * h];
                for bi in 0..b {
                    for ti in 0..t {
                        let gv = g.data()[bi * t + ti];
                        if gv == F::zero() {
                            continue;
                        }
                        let sbase = (ti * b + bi) * h;
                        for hi in 0..h {
                            gq[bi * h + hi] = gq[bi * h + hi] + gv * sd[sbase + hi];
                            gs[sbase + hi] = gs[sbase + hi] + gv * qd[bi * h + hi];
                        }
                    }
                }
                acc(grads, *q, &[b, h], &gq);
                acc(grads, *states, ss, &gs);
            }
            Op::AttnContext { w, states } => {
                let ss = self.shape(*states);
                let (t, b, h) = (ss[0], ss[1], ss[2]);
                let wd = self.value(*w).data();
                let sd = self.value(*states).data();
                let mut gw = vec![F::zero(); b * t];
                let mut gs = vec![F::zero(); t * b * h];
                for bi in 0..b {
                    for ti in 0..t {
                        let sbase = (ti * b + bi) * h;
                        let mut dot = F::zero();
                        for hi in 0..h {
                            dot = dot + g.data()[bi * h + hi] * sd[sbase + hi];
                            gs[sbase + hi] =
                                gs[sbase + hi] + wd[bi * t + ti] * g.data()[bi * h + hi];
                        }
                        gw[bi * t + ti] = dot;
                    }
                }
                acc(grads, *w, &[b, t], &gw);
                acc(grads, *states, ss, &gs);
            }
            Op::SoftmaxXent {
                logits,
                targets,
                mask,
            } => {
                let v = *self.shape(*logits).last().unwrap();
                let n = self.value(*logits).len() / v;
                let unmasked = mask.iter().filter(|&&m| m).count();
                let scale = g.item() / F::from_f64(unmasked as f64);
                let src = self.value(*logits).data();
                let mut gx = vec![F::zero(); src.len()];
                for i in 0..n {
                    if !mask[i] {
                        continue;
                    }
                    let row = &src[i * v..(i + 1) * v];
                    let m = row.iter().cloned().fold(F::neg_infinity(), F::max);
                    let mut z = F::zero();
                    for &xv in row {
                        z = z + (xv - m).exp();
                    }
                    for j in 0..v {
                        let p = (row[j] - m).exp() / z;
                        let indicator = if j == targets[i] { F::one() } else { F::zero() };
                        gx[i * v + j] = scale * (p - indicator);
                    }
                }
                acc(grads, *logits, self.shape(*logits), &gx);
            }
            Op::SumAll(x) => {
                let gx = vec![g.item(); self.value(*x).len()];
                acc(grads, *x, self.shape(*x), &gx);
            }
        }
    }
}

/// Seeded inverted-dropout: in train mode multiplies by a Bernoulli keep-mask
/// scaled by `1/(1-ratio)`; in eval mode (or at ratio 0) it is the identity.
pub fn dropout<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    ratio: f64,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<NodeId, NnError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(NnError::InvalidArg(format!(
            "dropout ratio must be in [0,1), got {ratio}"
        )));
    }
    if mode == Mode::Eval || ratio == 0.0 {
        return Ok(x);
    }
    let mask = dropout_mask::<F>(g.shape(x), ratio, rng);
    let m = g.constant(mask);
    g.mul(x, m)
}

/// The keep-mask used by [`dropout`], exposed so recurrent layers can reuse
/// one mask across every timestep (variational dropout).
pub fn dropout_mask<F: Scalar>(shape: &[usize], ratio: f64, rng: &mut ChaCha8Rng) -> Tensor<F> {
    let keep = F::from_f64(1.0 / (1.0 - ratio));
    let data = (0..shape.iter().product::<usize>())
        .map(|_| {
            if rng.random::<f64>() < ratio {
                F::zero()
            } else {
                keep
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// `x·W + b` over the last axis of `x`.
pub fn affine<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
) -> Result<NodeId, NnError> {
    let sx = g.shape(x).to_vec();
    let sw = g.shape(w).to_vec();
    let d_in = *sx.last().ok_or_else(|| NnError::InvalidArg("empty affine input".into()))?;
    if sw.len() != 2 || sw[0] != d_in {
        return Err(NnError::ShapeMismatch {
            op: "affine",
            expected: format!("W [{d_in}, out]"),
            got: format!("{sw:?}"),
        });
    }
    let rows: usize = sx[..sx.len() - 1].iter().product();
    let flat = g.reshape(x, &[rows, d_in])?;
    let prod = g.matmul(flat, w)?;
    let biased = g.add_bias(prod, b)?;
    let mut out_shape = sx;
    *out_shape.last_mut().unwrap() = sw[1];
    g.reshape(biased, &out_shape)
}

/// Strided same-padding convolution followed by ReLU.
pub fn conv2d_relu<F: Scalar>(
    g: &mut Graph<F>,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    stride: (usize, usize),
) -> Result<NodeId, NnError> {
    let c = g.conv2d_same(x, w, b, stride)?;
    Ok(g.relu(c))
}

/// Row gather wrapper matching the embedding contract: `ids` indexes a
/// `[V, E]` table and the result is `[ids.len(), E]`.
pub fn embedding_lookup<F: Scalar>(
    g: &mut Graph<F>,
    table: NodeId,
    ids: &[usize],
) -> Result<NodeId, NnError> {
    g.embed(table, ids)
}

/// Stride-2 same-padding output length: `ceil(len / 2)` per layer.
pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

fn op_name<F>(op: &Op<F>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddBias(..) => "add_bias",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::Relu(..) => "relu",
        Op::Reshape(..) => "reshape",
        Op::Concat(..) => "concat",
        Op::SliceCols(..) => "slice_cols",
        Op::StackSteps(..) => "stack_steps",
        Op::SliceStep(..) => "slice_step",
        Op::BatchToTimeMajor(..) => "batch_to_time_major",
        Op::Conv2dSame { .. } => "conv2d_same",
        Op::Embed { .. } => "embed",
        Op::MaskedSoftmax { .. } => "masked_softmax",
        Op::AttnScores { .. } => "attn_scores",
        Op::AttnContext { .. } => "attn_context",
        Op::SoftmaxXent { .. } => "softmax_xent",
        Op::SumAll(..) => "sum_all",
    }
}

fn acc<F: Scalar>(grads: &mut [Option<Tensor<F>>], id: NodeId, shape: &[usize], contrib: &[F]) {
    match &mut grads[id] {
        Some(t) => {
            for (a, &b) in t.data_mut().iter_mut().zip(contrib) {
                *a = *a + b;
            }
        }
        None => grads[id] = Some(Tensor::from_vec(shape, contrib.to_vec())),
    }
}

fn matmul_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

/// `g · bᵀ` where `g: [m,n]`, `b: [k,n]` -> `[m,k]`.
fn matmul_nt<F: Scalar>(g: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut dot = F::zero();
            for j in 0..n {
                dot = dot + grow[j] * brow[j];
            }
            orow[kk] = dot;
        }
    }
    out
}

/// `aᵀ · g` where `a: [m,k]`, `g: [m,n]` -> `[k,n]`.
fn matmul_tn<F: Scalar>(a: &[F], g: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * grow[j];
            }
        }
    }
    out
}

struct ConvGeometry {
    b: usize,
    t: usize,
    f: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    sh: usize,
    sw: usize,
    ot: usize,
    of: usize,
    pad_t: usize,
    pad_f: usize,
}

impl ConvGeometry {
    fn new(sx: &[usize], sw: &[usize], stride: (usize, usize)) -> Self {
        let (b, t, f, ci) = (sx[0], sx[1], sx[2], sx[3]);
        let (kh, kw, co) = (sw[0], sw[1], sw[3]);
        let (sh, s_w) = stride;
        let ot = t.div_ceil(sh);
        let of = f.div_ceil(s_w);
        // Fixed half padding of (k-1)/2 on each side. For odd kernels this
        // realizes out = ceil(in/stride) with a pad amount that does not
        // depend on the input length, so values at real positions are
        // unaffected by how far the batch is zero-padded.
        let pad_total_t = kh - 1;
        let pad_total_f = kw - 1;
        ConvGeometry {
            b,
            t,
            f,
            ci,
            kh,
            kw,
            co,
            sh,
            sw: s_w,
            ot,
            of,
            pad_t: pad_total_t / 2,
            pad_f: pad_total_f / 2,
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.b, self.ot, self.of, self.co]
    }
}

fn conv_forward<F: Scalar>(x: &[F], w: &[F], bias: &[F], g: &ConvGeometry) -> Vec<F> {
    let mut out = vec![F::zero(); g.b * g.ot * g.of * g.co];
    for b in 0..g.b {
        for ot in 0..g.ot {
            for of in 0..g.of {
                let obase = ((b * g.ot + ot) * g.of + of) * g.co;
                for co in 0..g.co {
                    out[obase + co] = bias[co];
                }
                for kh in 0..g.kh {
                    let it = (ot * g.sh + kh) as isize - g.pad_t as isize;
                    if it < 0 || it as usize >= g.t {
                        continue;
                    }
                    for kw in 0..g.kw {
                        let jf = (of * g.sw + kw) as isize - g.pad_f as isize;
                        if jf < 0 || jf as usize >= g.f {
                            continue;
                        }
                        let xbase = ((b * g.t + it as usize) * g.f + jf as usize) * g.ci;
                        let wbase = (kh * g.kw + kw) * g.ci * g.co;
                        for ci in 0..g.ci {
                            let xv = x[xbase + ci];
                            if xv == F::zero() {
                                continue;
                            }
                            let wrow = &w[wbase + ci * g.co..wbase + (ci + 1) * g.co];
                            for co in 0..g.co {
                                out[obase + co] = out[obase + co] + xv * wrow[co];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward<F: Scalar>(
    x: &[F],
    w: &[F],
    gout: &[F],
    g: &ConvGeometry,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let mut gx = vec![F::zero(); x.len()];
    let mut gw = vec![F::zero(); w.len()];
    let mut gb = vec![F::zero(); g.co];
    for b in 0..g.b {
        for ot in 0..g.ot {
            for of in 0..g.of {
                let obase = ((b * g.ot + ot) * g.of + of) * g.co;
                for co in 0..g.co {
                    gb[co] = gb[co] + gout[obase + co];
                }
                for kh in 0..g.kh {
                    let it = (ot * g.sh + kh) as isize - g.pad_t as isize;
                    if it < 0 || it as usize >= g.t {
                        continue;
                    }
                    for kw in 0..g.kw {
                        let jf = (of * g.sw + kw) as isize - g.pad_f as isize;
                        if jf < 0 || jf as usize >= g.f {
                            continue;
                        }
                        let xbase = ((b * g.t + it as usize) * g.f + jf as usize) * g.ci;
                        let wbase = (kh * g.kw + kw) * g.ci * g.co;
                        for ci in 0..g.ci {
                            let xv = x[xbase + ci];
                            let mut gxv = F::zero();
                            let wrow = &w[wbase + ci * g.co..wbase + (ci + 1) * g.co];
                            let gwrow = &mut gw[wbase + ci * g.co..wbase + (ci + 1) * g.co];
                            for co in 0..g.co {
                                let go = gout[obase + co];
                                gxv = gxv + go * wrow[co];
                                gwrow[co] = gwrow[co] + go * xv;
                            }
                            gx[xbase + ci] = gx[xbase + ci] + gxv;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(shape, data)
    }

    fn rand_params(specs: &[(&str, &[usize])], seed: u64) -> ParameterSet<f64> {
        let mut r = rng(seed);
        let mut p = ParameterSet::new();
        for (name, shape) in specs {
            p.insert(name, rand_tensor(shape, &mut r)).unwrap();
        }
        p
    }

    #[test]
    fn sum_of_tensor_gets_all_ones_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&[3, 4], &mut rng(1)));
        let loss = g.sum_all(x);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &vec![1.0; 12][..]);
    }

    #[test]
    fn tensor_used_twice_gets_doubled_grad() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&[5], &mut rng(2)));
        let y = g.add(x, x).unwrap();
        let loss = g.sum_all(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &vec![2.0; 5][..]);
    }

    #[test]
    fn backward_on_empty_tape_is_an_error() {
        let g = Graph::<f64>::new();
        assert!(matches!(g.backward(0), Err(NnError::EmptyGraph)));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&[2, 2], &mut rng(3)));
        assert!(matches!(g.backward(x), Err(NnError::NotScalarLoss(_))));
    }

    #[test]
    fn uniform_logits_cost_ln_v() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::from_vec(&[3, 7], vec![0.25; 21]));
        let loss = g
            .softmax_xent(logits, &[0, 3, 6], &[true, true, true])
            .unwrap();
        assert!((g.value(loss).item() - (7.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_logit_costs_nearly_zero() {
        let mut g = Graph::<f64>::new();
        let mut data = vec![0.0; 5];
        data[2] = 1e4;
        let logits = g.constant(Tensor::from_vec(&[1, 5], data));
        let loss = g.softmax_xent(logits, &[2], &[true]).unwrap();
        assert!(g.value(loss).item().abs() < 1e-9);
    }

    #[test]
    fn xent_rejects_all_masked_and_bad_targets() {
        let mut g = Graph::<f64>::new();
        let logits = g.constant(Tensor::from_vec(&[2, 3], vec![0.0; 6]));
        assert!(matches!(
            g.softmax_xent(logits, &[0, 1], &[false, false]),
            Err(NnError::AllMasked)
        ));
        assert!(matches!(
            g.softmax_xent(logits, &[0, 9], &[true, true]),
            Err(NnError::IdOutOfRange { .. })
        ));
    }

    #[test]
    fn xent_gradient_is_softmax_minus_onehot_over_count() {
        let mut g = Graph::<f64>::new();
        let vals = rand_tensor(&[3, 4], &mut rng(4));
        let logits = g.constant(vals.clone());
        let targets = [1usize, 3, 0];
        let mask = [true, false, true];
        let loss = g.softmax_xent(logits, &targets, &mask).unwrap();
        let grads = g.backward(loss).unwrap();
        let gl = grads.get(logits).unwrap();
        for i in 0..3 {
            let row = &vals.data()[i * 4..(i + 1) * 4];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            for j in 0..4 {
                let expected = if mask[i] {
                    let p = (row[j] - m).exp() / z;
                    (p - if j == targets[i] { 1.0 } else { 0.0 }) / 2.0
                } else {
                    0.0
                };
                assert!((gl.data()[i * 4 + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn all_negative_preactivations_relu_to_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 4, 4, 1], vec![-1.0; 16]));
        let w = g.constant(Tensor::from_vec(&[3, 3, 1, 2], vec![0.5; 18]));
        let b = g.constant(Tensor::zeros(&[2]));
        let y = conv2d_relu(&mut g, x, w, b, (2, 2)).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn centered_identity_kernel_stride_one_is_relu_of_input() {
        let mut g = Graph::<f64>::new();
        let input = rand_tensor(&[2, 5, 6, 1], &mut rng(5));
        let x = g.constant(input.clone());
        let mut kernel = vec![0.0; 9];
        kernel[4] = 1.0; // center of the 3x3 window
        let w = g.constant(Tensor::from_vec(&[3, 3, 1, 1], kernel));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = conv2d_relu(&mut g, x, w, b, (1, 1)).unwrap();
        for (out, inp) in g.value(y).data().iter().zip(input.data()) {
            assert!((out - inp.max(0.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_stride_two_layers_quarter_the_time_axis() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&[1, 100, 80, 1], &mut rng(6)));
        let w1 = g.constant(rand_tensor(&[3, 3, 1, 4], &mut rng(7)));
        let b1 = g.constant(Tensor::zeros(&[4]));
        let h1 = conv2d_relu(&mut g, x, w1, b1, (2, 2)).unwrap();
        let w2 = g.constant(rand_tensor(&[3, 3, 4, 4], &mut rng(8)));
        let b2 = g.constant(Tensor::zeros(&[4]));
        let h2 = conv2d_relu(&mut g, h1, w2, b2, (2, 2)).unwrap();
        assert_eq!(g.shape(h2), &[1, 25, 20, 4]);
    }

    #[test]
    fn stride_two_length_law_holds_for_all_lengths() {
        for len in 1..=2000usize {
            assert_eq!(conv_out_len(len, 2), len.div_ceil(2));
            let two = conv_out_len(conv_out_len(len, 2), 2);
            assert_eq!(two, (len + 3) / 4);
        }
    }

    #[test]
    fn embedding_gathers_rows_and_sums_repeated_grads() {
        let mut g = Graph::<f64>::new();
        let table_vals = rand_tensor(&[6, 3], &mut rng(9));
        let table = g.constant(table_vals.clone());
        let out = g.embed(table, &[0, 4, 4]).unwrap();
        assert_eq!(&g.value(out).data()[..3], &table_vals.data()[..3]);
        let loss = g.sum_all(out);
        let grads = g.backward(loss).unwrap();
        let gt = grads.get(table).unwrap();
        for j in 0..3 {
            assert_eq!(gt.data()[j], 1.0); // row 0 used once
            assert_eq!(gt.data()[4 * 3 + j], 2.0); // row 4 used twice
            assert_eq!(gt.data()[1 * 3 + j], 0.0); // row 1 never used
        }
        assert!(matches!(
            g.embed(table, &[6]),
            Err(NnError::IdOutOfRange { id: 6, rows: 6 })
        ));
    }

    #[test]
    fn masked_softmax_is_uniform_over_valid_and_zero_after() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[2, 5], vec![3.7; 10]));
        let y = g.masked_softmax(x, &[3, 5]).unwrap();
        let d = g.value(y).data();
        for j in 0..3 {
            assert!((d[j] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert_eq!(&d[3..5], &[0.0, 0.0]);
        for j in 5..10 {
            assert!((d[j] - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_is_identity_when_disabled() {
        let mut r = rng(10);
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_tensor(&[4, 4], &mut r));
        let same = dropout(&mut g, x, 0.0, Mode::Train, &mut r).unwrap();
        assert_eq!(same, x);
        let same_eval = dropout(&mut g, x, 0.9, Mode::Eval, &mut r).unwrap();
        assert_eq!(same_eval, x);
    }

    #[test]
    fn dropout_zero_fraction_matches_ratio() {
        let mut r = rng(11);
        let mask: Tensor<f64> = dropout_mask(&[100_000], 0.5, &mut r);
        let zeros = mask.data().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / 100_000.0;
        assert!((frac - 0.5).abs() < 0.01, "zero fraction {frac}");
        // Surviving elements are scaled so the expectation is unbiased.
        let mean: f64 = mask.data().iter().sum::<f64>() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mask mean {mean}");
    }

    #[test]
    fn affine_identity_and_bias_broadcast() {
        let mut g = Graph::<f64>::new();
        let x_vals = rand_tensor(&[2, 3, 3], &mut rng(12));
        let x = g.constant(x_vals.clone());
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let w = g.constant(Tensor::from_vec(&[3, 3], eye));
        let b = g.constant(Tensor::zeros(&[3]));
        let y = affine(&mut g, x, w, b).unwrap();
        for (a, b) in g.value(y).data().iter().zip(x_vals.data()) {
            assert!((a - b).abs() < 1e-12);
        }

        let zero = g.constant(Tensor::zeros(&[4, 3]));
        let bias = g.constant(Tensor::from_vec(&[2], vec![0.5, -1.5]));
        let w2 = g.constant(Tensor::zeros(&[3, 2]));
        let y2 = affine(&mut g, zero, w2, bias).unwrap();
        for row in 0..4 {
            assert_eq!(&g.value(y2).data()[row * 2..row * 2 + 2], &[0.5, -1.5]);
        }
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut params = rand_params(&[("w", &[3, 2]), ("b", &[2]), ("x", &[4, 3])], 13);
        let worst = grad_check(&mut params, 1e-5, |p| {
            let mut g = Graph::<f64>::new();
            let x = g.param(p, "x")?;
            let w = g.param(p, "w")?;
            let b = g.param(p, "b")?;
            let y = affine(&mut g, x, w, b)?;
            let t = g.tanh(y);
            let loss = g.sum_all(t);
            Ok((g, loss))
        })
        .unwrap();
        assert!(worst < 1e-6, "rel err {worst}");
    }

    #[test]
    fn elementwise_and_shaping_op_gradients_match_finite_differences() {
        let mut params = rand_params(&[("a", &[3, 6]), ("b", &[3, 6]), ("c", &[3, 2])], 14);
        let worst = grad_check(&mut params, 1e-5, |p| {
            let mut g = Graph::<f64>::new();
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let c = g.param(p, "c")?;
            let prod = g.mul(a, b)?;
            let scaled = g.scale(prod, 0.7);
            let sg = g.sigmoid(scaled);
            let left = g.slice_cols(sg, 0, 2)?;
            let mid = g.slice_cols(sg, 2, 2)?;
            let cat = g.concat(left, mid)?;
            let cat2 = g.concat(cat, c)?;
            let th = g.tanh(cat2);
            let loss = g.sum_all(th);
            Ok((g, loss))
        })
        .unwrap();
        assert!(worst < 1e-6, "rel err {worst}");
    }

    #[test]
    fn stacking_and_transpose_op_gradients_match_finite_differences() {
        let mut params = rand_params(&[("s0", &[2, 3]), ("s1", &[2, 3]), ("s2", &[2, 3])], 15);
        let worst = grad_check(&mut params, 1e-5, |p| {
            let mut g = Graph::<f64>::new();
            let s0 = g.param(p, "s0")?;
            let s1 = g.param(p, "s1")?;
            let s2 = g.param(p, "s2")?;
            let stacked = g.stack_steps(&[s0, s1, s2])?; // [3,2,3] time-major
            let one = g.slice_step(stacked, 1)?;
            let flat = g.reshape(stacked, &[2, 3, 3])?;
            let tm = g.batch_to_time_major(flat)?;
            let sum1 = g.sum_all(one);
            let sig = g.sigmoid(tm);
            let sum2 = g.sum_all(sig);
            let loss = g.add(sum1, sum2)?;
            Ok((g, loss))
        })
        .unwrap();
        assert!(worst < 1e-6, "rel err {worst}");
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut params = rand_params(
            &[("x", &[2, 5, 4, 2]), ("w", &[3, 3, 2, 3]), ("b", &[3])],
            16,
        );
        let worst = grad_check(&mut params, 1e-5, |p| {
            let mut g = Graph::<f64>::new();
            let x = g.param(p, "x")?;
            let w = g.param(p, "w")?;
            let b = g.param(p, "b")?;
            let y = g.conv2d_same(x, w, b, (2, 2))?;
            let t = g.tanh(y);
            let loss = g.sum_all(t);
            Ok((g, loss))
        })
        .unwrap();
        assert!(worst < 1e-6, "rel err {worst}");
    }

    #[test]
    fn attention_op_gradients_match_finite_differences() {
        let mut params = rand_params(&[("q", &[2, 3]), ("states", &[4, 2, 3])], 17);
        let valid = [3usize, 4];
        let worst = grad_check(&mut params, 1e-5, |p| {
            let mut g = Graph::<f64>::new();
            let q = g.param(p, "q")?;
            let states = g.param(p, "states")?;
            let scores = g.attn_scores(q, states)?;
            let weights = g.masked_softmax(scores, &valid)?;
            let ctx = g.attn_context(weights, states)?;
            let t = g.tanh(ctx);
            let loss = g.sum_all(t);
            Ok((g, loss))
        })
        .unwrap();
        assert!(worst < 1e-6, "rel err {worst}");
    }

    #[test]
    fn embedding_and_xent_gradients_match_finite_differences() {
        let mut params = rand_params(&[("table", &[5, 3]), ("w", &[3, 4]), ("b", &[4])], 18);
        let worst = grad_check(&mut params, 1e-5, |p| {
            let mut g = Graph::<f64>::new();
            let table = g.param(p, "table")?;
            let w = g.param(p, "w")?;
            let b = g.param(p, "b")?;
            let emb = embedding_lookup(&mut g, table, &[1, 3, 3, 0])?;
            let logits = affine(&mut g, emb, w, b)?;
            let loss = g.softmax_xent(logits, &[0, 1, 2, 3], &[true, true, false, true])?;
            Ok((g, loss))
        })
        .unwrap();
        assert!(worst < 1e-6, "rel err {worst}");
    }

    #[test]
    fn backward_of_summed_losses_equals_summed_backwards() {
        for seed in 0..20u64 {
            let mut r = rng(100 + seed);
            let vals = rand_tensor(&[3, 3], &mut r);

            let mut g = Graph::<f64>::new();
            let x = g.constant(vals.clone());
            let t = g.tanh(x);
            let l1 = g.sum_all(t);
            let s = g.sigmoid(x);
            let l2 = g.sum_all(s);
            let both = g.add(l1, l2).unwrap();
            let g_both = g.backward(both).unwrap();
            let g_l1 = g.backward(l1).unwrap();
            let g_l2 = g.backward(l2).unwrap();
            for j in 0..9 {
                let sum = g_l1.get(x).unwrap().data()[j] + g_l2.get(x).unwrap().data()[j];
                assert!((g_both.get(x).unwrap().data()[j] - sum).abs() < 1e-12);
            }
        }
    }
}
