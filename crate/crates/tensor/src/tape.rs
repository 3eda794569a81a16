use std::sync::Arc;

use crate::attention::{self, AttnLayout, KeySets};
use crate::kernels::{self, gelu, gelu_grad, softmax_in_place};
use crate::macs::{Component, MacCounter, Scope};
use crate::{Float, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub tensor: Tensor<F>,
    /// Whether AdamW applies weight decay to this parameter.
    pub decay: bool,
}

/// Named, ordered set of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
}

impl<F: Float> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>, decay: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].tensor
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn clear_grads(&mut self) {
        self.entries.iter_mut().for_each(|e| e.tensor.clear_grad());
    }

    /// Adds the gradients of every parameter leaf on `tape` into the store.
    pub fn accumulate(&mut self, tape: &Tape<F>, grads: &Grads<F>) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(pid) = node.op {
                if let Some(g) = &grads.grads[i] {
                    self.entries[pid.0].tensor.accumulate_grad(g);
                }
            }
        }
    }
}

enum Op<F> {
    Constant,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, F),
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax {
        x: NodeId,
        mask: Option<Vec<bool>>,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    GatherRows {
        x: NodeId,
        rows: Vec<usize>,
    },
    GroupMean {
        x: NodeId,
        groups: usize,
    },
    Tokens {
        patches: NodeId,
        cls: Option<NodeId>,
        pos: NodeId,
        batch: usize,
    },
    Attention {
        qkv: NodeId,
        layout: AttnLayout,
        keys: Vec<Option<Arc<KeySets>>>,
        probs: Vec<F>,
    },
    WeightedSum {
        x: NodeId,
        w: Vec<F>,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
}

/// Define-by-run recording of one forward pass.
pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
    scope: Scope,
    macs: MacCounter,
}

/// Gradients of a scalar loss with respect to every tape node.
pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Float> Grads<F> {
    pub fn wrt(&self, node: NodeId) -> Option<&[F]> {
        self.grads[node.0].as_deref()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn add_into<F: Float>(slot: &mut Option<Vec<F>>, g: &[F]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
        None => *slot = Some(g.to_vec()),
    }
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scope: Scope::Unscoped,
            macs: MacCounter::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn set_scope(&mut self, scope: Scope) {
        self.scope = scope;
    }

    pub fn scope(&self) -> Scope {
        self.scope
    }

    pub fn macs(&self) -> &MacCounter {
        &self.macs
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let v = self.value(id);
        (v.rows(), v.cols())
    }

    pub fn constant(&mut self, t: Tensor<F>) -> NodeId {
        self.push(t.detached(), Op::Constant)
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> NodeId {
        self.push(store.get(id).detached(), Op::Param(id))
    }

    /// `[M×K] · [K×N]`; charges `M·K·N` MACs to the current scope.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.macs.charge(self.scope, (m * k * n) as u64);
        Ok(self.push(Tensor::new(vec![m, n], c)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(mismatch("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let shape = va.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    /// Adds a length-`N` bias to every row of an `[M×N]` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.len() != vx.cols() {
            return Err(mismatch("add_bias", vx.shape(), vb.shape()));
        }
        let n = vx.cols();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % n])
            .collect();
        let shape = vx.shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: NodeId, s: F) -> NodeId {
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        self.push(v, Op::Gelu(x))
    }

    /// Normalizes each row over its last axis, then applies `gamma`/`beta`.
    pub fn layernorm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: F) -> Result<NodeId> {
        if eps <= F::zero() {
            return Err(TensorError::Invalid("layernorm eps must be positive".into()));
        }
        let vx = self.value(x);
        let d = vx.cols();
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vg.len() != d || vb.len() != d {
            return Err(mismatch("layernorm", vx.shape(), vg.shape()));
        }
        let rows = vx.rows();
        let dn = F::from_f64(d as f64);
        let mut out = vec![F::zero(); vx.len()];
        let mut xhat = vec![F::zero(); vx.len()];
        let mut rstd = vec![F::zero(); rows];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let shape = vx.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Row softmax; masked-out entries (`false`) are exactly zero.
    pub fn softmax_rows(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, cols) = (vx.rows(), vx.cols());
        if let Some(m) = mask {
            if m.len() != vx.len() {
                return Err(mismatch("softmax_rows", vx.shape(), &[m.len()]));
            }
        }
        let mut out = vec![F::zero(); vx.len()];
        let mut buf = Vec::with_capacity(cols);
        for r in 0..rows {
            let row = vx.row(r);
            let keep = |c: usize| mask.is_none_or(|m| m[r * cols + c]);
            buf.clear();
            buf.extend((0..cols).filter(|&c| keep(c)).map(|c| row[c]));
            if buf.is_empty() {
                return Err(TensorError::DegenerateMask { row: r });
            }
            softmax_in_place(&mut buf);
            let mut it = buf.iter();
            for c in (0..cols).filter(|&c| keep(c)) {
                out[r * cols + c] = *it.next().expect("kept entry");
            }
        }
        let shape = vx.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                mask: mask.map(<[bool]>::to_vec),
            },
        ))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`; scalar output.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (b, c) = self.dims2(logits);
        if labels.len() != b {
            return Err(mismatch("cross_entropy", self.value(logits).shape(), &[labels.len()]));
        }
        let vl = self.value(logits);
        let mut probs = vec![F::zero(); b * c];
        let mut loss = F::zero();
        for (r, &label) in labels.iter().enumerate() {
            if label >= c {
                return Err(TensorError::LabelOutOfRange {
                    row: r,
                    label,
                    classes: c,
                });
            }
            let row = vl.row(r);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            loss = loss + (lse - row[label]);
            for k in 0..c {
                probs[r * c + k] = (row[k] - lse).exp();
            }
        }
        loss = loss / F::from_f64(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Selects rows of a 2-D tensor (repeats allowed).
    pub fn gather_rows(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let vx = self.value(x);
        let (n, d) = (vx.rows(), vx.cols());
        if rows.is_empty() {
            return Err(TensorError::Invalid("gather_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(TensorError::Invalid(format!("row {bad} out of range for {n} rows")));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(vx.row(r));
        }
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Means of `groups` consecutive equal-size row blocks: `[G·n × d] → [G × d]`.
    pub fn group_mean(&mut self, x: NodeId, groups: usize) -> Result<NodeId> {
        let vx = self.value(x);
        let (rows, d) = (vx.rows(), vx.cols());
        if groups == 0 || rows % groups != 0 {
            return Err(mismatch("group_mean", vx.shape(), &[groups]));
        }
        let n = rows / groups;
        let inv = F::one() / F::from_f64(n as f64);
        let mut out = vec![F::zero(); groups * d];
        for g in 0..groups {
            for r in 0..n {
                let row = vx.row(g * n + r);
                for c in 0..d {
                    out[g * d + c] = out[g * d + c] + row[c];
                }
            }
            for c in 0..d {
                out[g * d + c] = out[g * d + c] * inv;
            }
        }
        Ok(self.push(Tensor::new(vec![groups, d], out)?, Op::GroupMean { x, groups }))
    }

    /// Builds `[B·L × d]` token rows: for each image, the optional class
    /// token then its `N` patch rows, each plus its positional row.
    pub fn assemble_tokens(
        &mut self,
        patches: NodeId,
        cls: Option<NodeId>,
        pos: NodeId,
        batch: usize,
    ) -> Result<NodeId> {
        let (vp, vpos) = (self.value(patches), self.value(pos));
        let d = vp.cols();
        if batch == 0 || vp.rows() % batch != 0 {
            return Err(mismatch("assemble_tokens", vp.shape(), &[batch]));
        }
        let n = vp.rows() / batch;
        let lead = usize::from(cls.is_some());
        let l = n + lead;
        if vpos.rows() != l || vpos.cols() != d {
            return Err(mismatch("assemble_tokens", vp.shape(), vpos.shape()));
        }
        let cls_row = match cls {
            Some(c) => {
                let vc = self.value(c);
                if vc.len() != d {
                    return Err(mismatch("assemble_tokens", vp.shape(), vc.shape()));
                }
                Some(vc.data())
            }
            None => None,
        };
        let mut out = Vec::with_capacity(batch * l * d);
        for b in 0..batch {
            if let Some(c) = cls_row {
                out.extend(c.iter().zip(vpos.row(0)).map(|(&a, &p)| a + p));
            }
            for i in 0..n {
                let prow = vp.row(b * n + i);
                out.extend(prow.iter().zip(vpos.row(lead + i)).map(|(&a, &p)| a + p));
            }
        }
        Ok(self.push(
            Tensor::new(vec![batch * l, d], out)?,
            Op::Tokens {
                patches,
                cls,
                pos,
                batch,
            },
        ))
    }

    /// Multi-head attention core. `keys[b]` restricts image `b`'s queries to
    /// the given key positions; `None` keeps every key.
    pub fn attention(
        &mut self,
        qkv: NodeId,
        layout: AttnLayout,
        keys: Vec<Option<Arc<KeySets>>>,
    ) -> Result<NodeId> {
        let vq = self.value(qkv);
        let expected = [layout.batch * layout.tokens, 3 * layout.d_model];
        if vq.shape() != expected || layout.heads == 0 || !layout.d_model.is_multiple_of(layout.heads) {
            return Err(mismatch("attention", vq.shape(), &expected));
        }
        if keys.len() != layout.batch {
            return Err(TensorError::Invalid(format!(
                "attention got {} key sets for batch {}",
                keys.len(),
                layout.batch
            )));
        }
        if let Some(k) = keys.iter().flatten().find(|k| k.tokens() != layout.tokens) {
            return Err(TensorError::Invalid(format!(
                "key set covers {} tokens, layout has {}",
                k.tokens(),
                layout.tokens
            )));
        }
        let fwd = attention::forward(vq.data(), layout, &keys);
        let dh = layout.head_dim() as u64;
        if let Scope::Layer(l, _) = self.scope {
            self.macs
                .charge(Scope::Layer(l, Component::AttnLogits), fwd.pairs * dh);
            self.macs
                .charge(Scope::Layer(l, Component::AttnValue), fwd.pairs * dh);
        } else {
            self.macs.charge(self.scope, 2 * fwd.pairs * dh);
        }
        let value = Tensor::new(vec![layout.batch * layout.tokens, layout.d_model], fwd.ctx)?;
        Ok(self.push(
            value,
            Op::Attention {
                qkv,
                layout,
                keys,
                probs: fwd.probs,
            },
        ))
    }

    /// Post-softmax probabilities saved by an attention node,
    /// laid out `[B][H][L][L]`.
    pub fn attention_probs(&self, node: NodeId) -> Option<(&[F], AttnLayout)> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, layout, .. } => Some((probs, *layout)),
            _ => None,
        }
    }

    /// `Σ w ⊙ x` as a scalar; handy for probing gradients of any node.
    pub fn weighted_sum(&mut self, x: NodeId, w: Vec<F>) -> Result<NodeId> {
        let vx = self.value(x);
        if w.len() != vx.len() {
            return Err(mismatch("weighted_sum", vx.shape(), &[w.len()]));
        }
        let s = kernels::dot(vx.data(), &w);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w }))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Grads<F>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims2(*a);
                    let n = self.value(*b).cols();
                    let da = kernels::matmul_nt(&g, self.value(*b).data(), m, n, k);
                    let db = kernels::matmul_tn(self.value(*a).data(), &g, m, k, n);
                    add_into(&mut grads[a.0], &da);
                    add_into(&mut grads[b.0], &db);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads[a.0], &g);
                    add_into(&mut grads[b.0], &g);
                }
                Op::AddBias(x, bias) => {
                    let n = self.value(*bias).len();
                    let mut db = vec![F::zero(); n];
                    for (i, &v) in g.iter().enumerate() {
                        db[i % n] = db[i % n] + v;
                    }
                    add_into(&mut grads[x.0], &g);
                    add_into(&mut grads[bias.0], &db);
                }
                Op::Scale(x, s) => {
                    let dx: Vec<F> = g.iter().map(|&v| v * *s).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x).data();
                    let dx: Vec<F> = g.iter().zip(xv).map(|(&v, &xi)| v * gelu_grad(xi)).collect();
                    add_into(&mut grads[x.0], &dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let gv = self.value(*gamma).data();
                    let d = gv.len();
                    let dn = F::from_f64(d as f64);
                    let mut dgamma = vec![F::zero(); d];
                    let mut dbeta = vec![F::zero(); d];
                    let mut dx = vec![F::zero(); g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = F::zero();
                        let mut mean_dh_h = F::zero();
                        for c in 0..d {
                            dgamma[c] = dgamma[c] + gr[c] * hr[c];
                            dbeta[c] = dbeta[c] + gr[c];
                            let dh = gr[c] * gv[c];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[c];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for c in 0..d {
                            let dh = gr[c] * gv[c];
                            dx[r * d + c] = rs * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                    add_into(&mut grads[gamma.0], &dgamma);
                    add_into(&mut grads[beta.0], &dbeta);
                }
                Op::Softmax { x, mask } => {
                    let y = node.value.data();
                    let cols = node.value.cols();
                    let mut dx = vec![F::zero(); y.len()];
                    for r in 0..node.value.rows() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let inner = kernels::dot(yr, gr);
                        for c in 0..cols {
                            let kept = mask.as_ref().is_none_or(|m| m[r * cols + c]);
                            if kept {
                                dx[r * cols + c] = yr[c] * (gr[c] - inner);
                            }
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = self.value(*logits).cols();
                    let scale = g[0] / F::from_f64(labels.len() as f64);
                    let mut dx: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                    for (r, &label) in labels.iter().enumerate() {
                        dx[r * c + label] = dx[r * c + label] - scale;
                    }
                    add_into(&mut grads[logits.0], &dx);
                }
                Op::GatherRows { x, rows } => {
                    let vx = self.value(*x);
                    let d = vx.cols();
                    let mut dx = vec![F::zero(); vx.len()];
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..d {
                            dx[r * d + c] = dx[r * d + c] + g[i * d + c];
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                Op::GroupMean { x, groups } => {
                    let vx = self.value(*x);
                    let (rows, d) = (vx.rows(), vx.cols());
                    let n = rows / groups;
                    let inv = F::one() / F::from_f64(n as f64);
                    let mut dx = vec![F::zero(); vx.len()];
                    for r in 0..rows {
                        let grp = r / n;
                        for c in 0..d {
                            dx[r * d + c] = g[grp * d + c] * inv;
                        }
                    }
                    add_into(&mut grads[x.0], &dx);
                }
                Op::Tokens {
                    patches,
                    cls,
                    pos,
                    batch,
                } => {
                    let vp = self.value(*patches);
                    let d = vp.cols();
                    let n = vp.rows() / batch;
                    let lead = usize::from(cls.is_some());
                    let l = n + lead;
                    let mut dp = vec![F::zero(); vp.len()];
                    let mut dpos = vec![F::zero(); l * d];
                    let mut dcls = vec![F::zero(); d];
                    for b in 0..*batch {
                        for t in 0..l {
                            let gr = &g[(b * l + t) * d..(b * l + t + 1) * d];
                            for c in 0..d {
                                dpos[t * d + c] = dpos[t * d + c] + gr[c];
                            }
                            if t < lead {
                                for c in 0..d {
                                    dcls[c] = dcls[c] + gr[c];
                                }
                            } else {
                                let row = b * n + t - lead;
                                dp[row * d..(row + 1) * d].copy_from_slice(gr);
                            }
                        }
                    }
                    add_into(&mut grads[patches.0], &dp);
                    add_into(&mut grads[pos.0], &dpos);
                    if let Some(c) = cls {
                        add_into(&mut grads[c.0], &dcls);
                    }
                }
                Op::Attention {
                    qkv,
                    layout,
                    keys,
                    probs,
                } => {
                    let dqkv =
                        attention::backward(self.value(*qkv).data(), probs, &g, *layout, keys);
                    add_into(&mut grads[qkv.0], &dqkv);
                }
                Op::WeightedSum { x, w } => {
                    let dx: Vec<F> = w.iter().map(|&v| v * g[0]).collect();
                    add_into(&mut grads[x.0], &dx);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Grads { grads })
    }
}
