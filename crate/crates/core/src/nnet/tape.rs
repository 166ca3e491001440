//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of a forward computation as a node
//! holding its value; [`Tape::backward`] walks the nodes in reverse order and
//! accumulates gradients. Parameters enter the tape as borrowed leaves, so
//! building a tape never copies model weights.
//!
//! The GRU cell and additive attention are single fused nodes with
//! hand-written adjoints; everything else is elementary.

use std::borrow::Cow;

use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    ConcatCols(Vec<NodeId>),
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    StackTime(Vec<NodeId>),
    Gru {
        xw: NodeId,
        hu: NodeId,
        h: NodeId,
        z: Vec<f64>,
        r: Vec<f64>,
        n: Vec<f64>,
    },
    Attention {
        keys: NodeId,
        query: NodeId,
        v: NodeId,
        values: NodeId,
        lengths: Vec<usize>,
        seq: usize,
        act: Vec<f64>,
        weights: Vec<f64>,
    },
    Loss {
        inputs: Vec<NodeId>,
        grads: Vec<Vec<f64>>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
}

/// Gradients indexed by node id; `None` where nothing flowed.
#[derive(Debug)]
pub struct NodeGrads(Vec<Option<Vec<f64>>>);

impl NodeGrads {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.0.get(id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.0.get_mut(id).and_then(Option::take)
    }
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Cow<'a, [f64]>, op: Op) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        self.nodes.len() - 1
    }

    /// Borrowed leaf (model parameter).
    pub fn leaf_ref(&mut self, rows: usize, cols: usize, value: &'a [f64]) -> NodeId {
        assert_eq!(rows * cols, value.len(), "leaf shape does not match data");
        self.push(rows, cols, Cow::Borrowed(value), Op::Leaf)
    }

    /// Owned leaf (input constant).
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        assert_eq!(rows * cols, value.len(), "leaf shape does not match data");
        self.push(rows, cols, Cow::Owned(value), Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let out = matmul_raw(&self.nodes[a].value, &self.nodes[b].value, n, k, m);
        self.push(n, m, Cow::Owned(out), Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shapes differ");
        let (r, c) = self.shape(a);
        let out = self.nodes[a]
            .value
            .iter()
            .zip(self.nodes[b].value.iter())
            .map(|(x, y)| x + y)
            .collect();
        self.push(r, c, Cow::Owned(out), Op::Add(a, b))
    }

    /// `a + 1 bias` with `bias` of shape `[1, cols]`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(bias), (1, c), "bias shape mismatch");
        let bv = &self.nodes[bias].value;
        let mut out = self.nodes[a].value.to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(bv.iter()) {
                *o += b;
            }
        }
        self.push(r, c, Cow::Owned(out), Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let (r, c) = self.shape(a);
        let out = self.nodes[a].value.iter().map(|x| x * factor).collect();
        self.push(r, c, Cow::Owned(out), Op::Scale(a, factor))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.shape(parts[0]).0;
        assert!(
            parts.iter().all(|&p| self.shape(p).0 == rows),
            "concat rows differ"
        );
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.nodes[p].cols;
                out.extend_from_slice(&self.nodes[p].value[r * c..(r + 1) * c]);
            }
        }
        self.push(rows, cols, Cow::Owned(out), Op::ConcatCols(parts.to_vec()))
    }

    /// Row lookup `table[ids[i]]`.
    pub fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let (v, e) = self.shape(table);
        let tv = &self.nodes[table].value;
        let mut out = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            assert!(id < v, "embedding index {id} out of range {v}");
            out.extend_from_slice(&tv[id * e..(id + 1) * e]);
        }
        self.push(
            ids.len(),
            e,
            Cow::Owned(out),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Interleaves per-timestep `[B, H]` nodes into `[B * S, H]` with row `b * S + s`.
    pub fn stack_time(&mut self, steps: &[NodeId]) -> NodeId {
        let (b, h) = self.shape(steps[0]);
        let s = steps.len();
        let mut out = vec![0.0; b * s * h];
        for (t, &id) in steps.iter().enumerate() {
            let v = &self.nodes[id].value;
            for row in 0..b {
                let dst = (row * s + t) * h;
                out[dst..dst + h].copy_from_slice(&v[row * h..(row + 1) * h]);
            }
        }
        self.push(b * s, h, Cow::Owned(out), Op::StackTime(steps.to_vec()))
    }

    /// GRU update. `xw` and `hu` are `[B, 3H]` pre-activations (bias included)
    /// in gate order update, reset, candidate; `h` is the previous state.
    pub fn gru(&mut self, xw: NodeId, hu: NodeId, h: NodeId) -> NodeId {
        let (b, hd) = self.shape(h);
        assert_eq!(self.shape(xw), (b, 3 * hd));
        assert_eq!(self.shape(hu), (b, 3 * hd));
        let xv = &self.nodes[xw].value;
        let uv = &self.nodes[hu].value;
        let hv = &self.nodes[h].value;
        let mut z = vec![0.0; b * hd];
        let mut r = vec![0.0; b * hd];
        let mut n = vec![0.0; b * hd];
        let mut out = vec![0.0; b * hd];
        for row in 0..b {
            let g = row * 3 * hd;
            for j in 0..hd {
                let i = row * hd + j;
                let zz = sigmoid(xv[g + j] + uv[g + j]);
                let rr = sigmoid(xv[g + hd + j] + uv[g + hd + j]);
                let nn = (xv[g + 2 * hd + j] + rr * uv[g + 2 * hd + j]).tanh();
                z[i] = zz;
                r[i] = rr;
                n[i] = nn;
                out[i] = (1.0 - zz) * nn + zz * hv[i];
            }
        }
        self.push(b, hd, Cow::Owned(out), Op::Gru { xw, hu, h, z, r, n })
    }

    /// Additive attention. `keys` is `[B * S, A]`, `query` `[B, A]`, `v` `[A, 1]`,
    /// `values` `[B * S, H]`; positions at or beyond `lengths[b]` are masked.
    /// Returns the context `[B, H]`.
    pub fn attention(
        &mut self,
        keys: NodeId,
        query: NodeId,
        v: NodeId,
        values: NodeId,
        lengths: &[usize],
    ) -> NodeId {
        let (b, a) = self.shape(query);
        let (bs, a2) = self.shape(keys);
        assert_eq!(a, a2);
        assert_eq!(bs % b, 0);
        let seq = bs / b;
        let hd = self.shape(values).1;
        assert_eq!(self.shape(values).0, bs);
        assert_eq!(self.shape(v), (a, 1));
        assert_eq!(lengths.len(), b);
        let kv = &self.nodes[keys].value;
        let qv = &self.nodes[query].value;
        let vv = &self.nodes[v].value;
        let hv = &self.nodes[values].value;
        let mut act = vec![0.0; bs * a];
        let mut weights = vec![0.0; bs];
        let mut out = vec![0.0; b * hd];
        for row in 0..b {
            let len = lengths[row].clamp(1, seq);
            let q = &qv[row * a..(row + 1) * a];
            let mut max = f64::NEG_INFINITY;
            for s in 0..len {
                let idx = row * seq + s;
                let k = &kv[idx * a..(idx + 1) * a];
                let e = &mut act[idx * a..(idx + 1) * a];
                let mut score = 0.0;
                for j in 0..a {
                    e[j] = (k[j] + q[j]).tanh();
                    score += e[j] * vv[j];
                }
                weights[idx] = score;
                max = max.max(score);
            }
            let mut sum = 0.0;
            for s in 0..len {
                let w = &mut weights[row * seq + s];
                *w = (*w - max).exp();
                sum += *w;
            }
            let ctx = &mut out[row * hd..(row + 1) * hd];
            for s in 0..len {
                let idx = row * seq + s;
                weights[idx] /= sum;
                let w = weights[idx];
                for (c, h) in ctx.iter_mut().zip(&hv[idx * hd..(idx + 1) * hd]) {
                    *c += w * h;
                }
            }
        }
        self.push(
            b,
            hd,
            Cow::Owned(out),
            Op::Attention {
                keys,
                query,
                v,
                values,
                lengths: lengths.to_vec(),
                seq,
                act,
                weights,
            },
        )
    }

    /// Scalar loss node whose gradient with respect to each input is supplied
    /// by the caller (`grads[i]` has the shape of `inputs[i]`).
    pub fn loss(&mut self, value: f64, inputs: Vec<NodeId>, grads: Vec<Vec<f64>>) -> NodeId {
        assert_eq!(inputs.len(), grads.len());
        for (&i, g) in inputs.iter().zip(&grads) {
            assert_eq!(
                self.nodes[i].value.len(),
                g.len(),
                "loss gradient shape mismatch"
            );
        }
        self.push(1, 1, Cow::Owned(vec![value]), Op::Loss { inputs, grads })
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, root: NodeId) -> Result<NodeGrads> {
        let node = self
            .nodes
            .get(root)
            .ok_or_else(|| Error::contract("backward from a node that was never recorded"))?;
        if node.value.len() != 1 {
            return Err(Error::contract("backward requires a scalar root"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(NodeGrads(grads))
    }

    fn propagate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = node.cols;
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let ga = acc(grads, *a, n * k);
                // dA = G B^T
                for (grow, garow) in g.chunks_exact(m).zip(ga.chunks_exact_mut(k)) {
                    for (dst, brow) in garow.iter_mut().zip(bv.chunks_exact(m)) {
                        *dst += dot(grow, brow);
                    }
                }
                let gb = acc(grads, *b, k * m);
                // dB = A^T G
                for (grow, arow) in g.chunks_exact(m).zip(av.chunks_exact(k)) {
                    for (&aip, dst) in arow.iter().zip(gb.chunks_exact_mut(m)) {
                        if aip != 0.0 {
                            axpy(dst, aip, grow);
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                add_into(acc(grads, *a, g.len()), g);
                add_into(acc(grads, *b, g.len()), g);
            }
            Op::AddBias(a, bias) => {
                add_into(acc(grads, *a, g.len()), g);
                let c = node.cols;
                let gb = acc(grads, *bias, c);
                for row in g.chunks(c) {
                    add_into(gb, row);
                }
            }
            Op::Scale(a, f) => {
                let ga = acc(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += f * y;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.rows;
                let total = node.cols;
                let mut offset = 0;
                for &p in parts {
                    let c = self.nodes[p].cols;
                    let gp = acc(grads, p, rows * c);
                    for r in 0..rows {
                        add_into(
                            &mut gp[r * c..(r + 1) * c],
                            &g[r * total + offset..r * total + offset + c],
                        );
                    }
                    offset += c;
                }
            }
            Op::Embed { table, ids } => {
                let (v, e) = self.shape(*table);
                let gt = acc(grads, *table, v * e);
                for (row, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * e..(id + 1) * e], &g[row * e..(row + 1) * e]);
                }
            }
            Op::StackTime(steps) => {
                let (b, h) = self.shape(steps[0]);
                let s = steps.len();
                for (t, &sid) in steps.iter().enumerate() {
                    let gs = acc(grads, sid, b * h);
                    for row in 0..b {
                        let src = (row * s + t) * h;
                        add_into(&mut gs[row * h..(row + 1) * h], &g[src..src + h]);
                    }
                }
            }
            Op::Gru { xw, hu, h, z, r, n } => {
                let (b, hd) = (node.rows, node.cols);
                let hv = &self.nodes[*h].value;
                let uv = &self.nodes[*hu].value;
                let mut dxw = vec![0.0; b * 3 * hd];
                let mut dhu = vec![0.0; b * 3 * hd];
                let mut dh = vec![0.0; b * hd];
                for row in 0..b {
                    let gate = row * 3 * hd;
                    for j in 0..hd {
                        let i = row * hd + j;
                        let go = g[i];
                        let (zz, rr, nn) = (z[i], r[i], n[i]);
                        dh[i] = go * zz;
                        let dz = go * (hv[i] - nn) * zz * (1.0 - zz);
                        let dn_pre = go * (1.0 - zz) * (1.0 - nn * nn);
                        let un = uv[gate + 2 * hd + j];
                        let dr = dn_pre * un * rr * (1.0 - rr);
                        dxw[gate + j] = dz;
                        dhu[gate + j] = dz;
                        dxw[gate + hd + j] = dr;
                        dhu[gate + hd + j] = dr;
                        dxw[gate + 2 * hd + j] = dn_pre;
                        dhu[gate + 2 * hd + j] = dn_pre * rr;
                    }
                }
                add_into(acc(grads, *xw, dxw.len()), &dxw);
                add_into(acc(grads, *hu, dhu.len()), &dhu);
                add_into(acc(grads, *h, dh.len()), &dh);
            }
            Op::Attention {
                keys,
                query,
                v,
                values,
                lengths,
                seq,
                act,
                weights,
            } => {
                let seq = *seq;
                let b = node.rows;
                let hd = node.cols;
                let a = self.nodes[*query].cols;
                let vv = &self.nodes[*v].value;
                let hv = &self.nodes[*values].value;
                let mut dkeys = vec![0.0; b * seq * a];
                let mut dquery = vec![0.0; b * a];
                let mut dv = vec![0.0; a];
                let mut dvalues = vec![0.0; b * seq * hd];
                let mut dw = vec![0.0; seq];
                for row in 0..b {
                    let len = lengths[row].clamp(1, seq);
                    let gctx = &g[row * hd..(row + 1) * hd];
                    let mut dot = 0.0;
                    for s in 0..len {
                        let idx = row * seq + s;
                        let w = weights[idx];
                        let hrow = &hv[idx * hd..(idx + 1) * hd];
                        let mut d = 0.0;
                        for j in 0..hd {
                            d += gctx[j] * hrow[j];
                            dvalues[idx * hd + j] += w * gctx[j];
                        }
                        dw[s] = d;
                        dot += w * d;
                    }
                    for s in 0..len {
                        let idx = row * seq + s;
                        let dscore = weights[idx] * (dw[s] - dot);
                        let e = &act[idx * a..(idx + 1) * a];
                        for j in 0..a {
                            dv[j] += dscore * e[j];
                            let dpre = dscore * vv[j] * (1.0 - e[j] * e[j]);
                            dkeys[idx * a + j] += dpre;
                            dquery[row * a + j] += dpre;
                        }
                    }
                }
                add_into(acc(grads, *keys, dkeys.len()), &dkeys);
                add_into(acc(grads, *query, dquery.len()), &dquery);
                add_into(acc(grads, *v, dv.len()), &dv);
                add_into(acc(grads, *values, dvalues.len()), &dvalues);
            }
            Op::Loss {
                inputs,
                grads: local,
            } => {
                let scale = g[0];
                for (&i, lg) in inputs.iter().zip(local) {
                    let gi = acc(grads, i, lg.len());
                    for (x, y) in gi.iter_mut().zip(lg) {
                        *x += scale * y;
                    }
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Row-major `[n, k] × [k, m]`. Each output entry accumulates over `k` in order,
/// so a row's result does not depend on the other rows in the batch.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for (orow, arow) in out.chunks_exact_mut(m).zip(a.chunks_exact(k)) {
        for (&aip, brow) in arow.iter().zip(b.chunks_exact(m)) {
            axpy(orow, aip, brow);
        }
    }
    out
}

#[inline]
fn axpy(dst: &mut [f64], a: f64, x: &[f64]) {
    for (d, x) in dst.iter_mut().zip(x) {
        *d += a * x;
    }
}

/// Dot product with four fixed accumulation lanes (vectorisable, order fixed).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            lanes[l] += x[l] * y[l];
        }
    }
    (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]) + tail
}
