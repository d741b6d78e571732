//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Parameter nodes borrow their values from the [`ParamStore`]; gradients are
//! returned per parameter id.

use std::collections::HashMap;

use super::{Grads, ParamId, ParamStore, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    MatMul { a: NodeId, b: NodeId, transpose_b: bool },
    Add(NodeId, NodeId),
    AddRow { a: NodeId, bias: NodeId },
    Scale(NodeId, f64),
    Relu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, normed: Tensor<T>, inv_std: Vec<T> },
    SoftmaxRows(NodeId),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    ClampMin { a: NodeId, min: f64 },
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(store: &'p ParamStore<T>) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'p ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.get(*p),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].needs_grad)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Input, value, false)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(id, n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b), false);
        let ng = self.needs(&[a, b]);
        self.push(Op::MatMul { a, b, transpose_b: false }, v, ng)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b), true);
        let ng = self.needs(&[a, b]);
        self.push(Op::MatMul { a, b, transpose_b: true }, v, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.needs(&[a, b]);
        self.push(Op::Add(a, b), v, ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(bias);
        assert_eq!((1, av.cols), bv.shape(), "bias shape");
        let mut v = av.clone();
        for r in 0..v.rows {
            for c in 0..v.cols {
                v.data[r * v.cols + c] = v.data[r * v.cols + c] + bv.data[c];
            }
        }
        let ng = self.needs(&[a, bias]);
        self.push(Op::AddRow { a, bias }, v, ng)
    }

    pub fn linear(&mut self, x: NodeId, weight: ParamId, bias: ParamId) -> NodeId {
        let w = self.param(weight);
        let b = self.param(bias);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let st = T::lit(s);
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = *x * st);
        let ng = self.needs(&[a]);
        self.push(Op::Scale(a, s), v, ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.max(T::zero()));
        let ng = self.needs(&[a]);
        self.push(Op::Relu(a), v, ng)
    }

    pub fn clamp_min(&mut self, a: NodeId, min: f64) -> NodeId {
        let m = T::lit(min);
        let mut v = self.value(a).clone();
        v.data.iter_mut().for_each(|x| *x = x.max(m));
        let ng = self.needs(&[a]);
        self.push(Op::ClampMin { a, min }, v, ng)
    }

    /// Per-row layer normalization with learned gain and bias (`1 x n` each).
    pub fn layer_norm(&mut self, x: NodeId, gain: ParamId, bias: ParamId) -> NodeId {
        let g = self.param(gain);
        let b = self.param(bias);
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut normed = Tensor::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let n = T::lit(cols as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + T::lit(LN_EPS)).sqrt();
            for c in 0..cols {
                normed.data[r * cols + c] = (row[c] - mean) * is;
            }
            inv_std.push(is);
        }
        let gv = self.value(g);
        let bv = self.value(b);
        let mut out = normed.clone();
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                out.data[i] = out.data[i] * gv.data[c] + bv.data[c];
            }
        }
        let ng = self.needs(&[x, g, b]);
        self.push(
            Op::LayerNorm {
                x,
                gain: g,
                bias: b,
                normed,
                inv_std,
            },
            out,
            ng,
        )
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let cols = v.cols;
        for r in 0..v.rows {
            let row = &mut v.data[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z = z + *x;
            }
            row.iter_mut().for_each(|x| *x = *x / z);
        }
        let ng = self.needs(&[a]);
        self.push(Op::SoftmaxRows(a), v, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        let ng = self.needs(parts);
        self.push(Op::ConcatCols(parts.to_vec()), v, ng)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let ng = self.needs(parts);
        self.push(Op::ConcatRows(parts.to_vec()), Tensor::new(rows, cols, data), ng)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.rows, "row slice out of range");
        let v = Tensor::new(
            len,
            av.cols,
            av.data[start * av.cols..(start + len) * av.cols].to_vec(),
        );
        let ng = self.needs(&[a]);
        self.push(Op::SliceRows { a, start }, v, ng)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let av = self.value(a);
        assert!(start + len <= av.cols, "column slice out of range");
        let mut data = Vec::with_capacity(av.rows * len);
        for r in 0..av.rows {
            data.extend_from_slice(&av.row(r)[start..start + len]);
        }
        let v = Tensor::new(av.rows, len, data);
        let ng = self.needs(&[a]);
        self.push(Op::SliceCols { a, start }, v, ng)
    }

    /// Propagates the given output gradients back to the parameters.
    pub fn backward(&self, seeds: &[(NodeId, Tensor<T>)]) -> Grads<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            assert_eq!(self.value(*id).shape(), g.shape(), "seed gradient shape");
            accumulate(&mut grads, *id, g.clone());
        }
        let mut out = Grads::new(self.store.len());
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Param(p) => out.accumulate(*p, &g),
                Op::MatMul { a, b, transpose_b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.nodes[a.0].needs_grad {
                        // dA = dC * B^T, or dC * B when B was transposed
                        accumulate(&mut grads, *a, g.matmul(bv, !transpose_b));
                    }
                    if self.nodes[b.0].needs_grad {
                        let gb = if *transpose_b {
                            transpose(&g).matmul(&transpose(av), true)
                        } else {
                            transpose(av).matmul(&g, false)
                        };
                        accumulate(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[b.0].needs_grad {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::AddRow { a, bias } => {
                    if self.nodes[bias.0].needs_grad {
                        accumulate(&mut grads, *bias, col_sums(&g));
                    }
                    if self.nodes[a.0].needs_grad {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => {
                    let st = T::lit(*s);
                    let mut ga = g;
                    ga.data.iter_mut().for_each(|x| *x = *x * st);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let out_v = node.value.as_ref().expect("relu value");
                    let mut ga = g;
                    for (x, y) in ga.data.iter_mut().zip(&out_v.data) {
                        if *y <= T::zero() {
                            *x = T::zero();
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ClampMin { a, min } => {
                    let m = T::lit(*min);
                    let av = self.value(*a);
                    let mut ga = g;
                    for (x, v) in ga.data.iter_mut().zip(&av.data) {
                        if *v < m {
                            *x = T::zero();
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    normed,
                    inv_std,
                } => {
                    let (rows, cols) = g.shape();
                    if self.nodes[bias.0].needs_grad {
                        accumulate(&mut grads, *bias, col_sums(&g));
                    }
                    let gv = self.value(*gain);
                    if self.nodes[gain.0].needs_grad {
                        let mut gg = Tensor::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                let i = r * cols + c;
                                gg.data[c] = gg.data[c] + g.data[i] * normed.data[i];
                            }
                        }
                        accumulate(&mut grads, *gain, gg);
                    }
                    if self.nodes[x.0].needs_grad {
                        let n = T::lit(cols as f64);
                        let mut gx = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            let mut mean_d = T::zero();
                            let mut mean_dn = T::zero();
                            for c in 0..cols {
                                let i = r * cols + c;
                                let d = g.data[i] * gv.data[c];
                                mean_d = mean_d + d;
                                mean_dn = mean_dn + d * normed.data[i];
                            }
                            mean_d = mean_d / n;
                            mean_dn = mean_dn / n;
                            for c in 0..cols {
                                let i = r * cols + c;
                                let d = g.data[i] * gv.data[c];
                                gx.data[i] = inv_std[r] * (d - mean_d - normed.data[i] * mean_dn);
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().expect("softmax value");
                    let cols = y.cols;
                    let mut ga = Tensor::zeros(y.rows, cols);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for c in 0..cols {
                            ga.data[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pc = self.value(*p).cols;
                        if self.nodes[p.0].needs_grad {
                            let mut gp = Tensor::zeros(g.rows, pc);
                            for r in 0..g.rows {
                                gp.data[r * pc..(r + 1) * pc]
                                    .copy_from_slice(&g.row(r)[off..off + pc]);
                            }
                            accumulate(&mut grads, *p, gp);
                        }
                        off += pc;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pr = self.value(*p).rows;
                        if self.nodes[p.0].needs_grad {
                            let gp = Tensor::new(
                                pr,
                                g.cols,
                                g.data[off * g.cols..(off + pr) * g.cols].to_vec(),
                            );
                            accumulate(&mut grads, *p, gp);
                        }
                        off += pr;
                    }
                }
                Op::SliceRows { a, start } => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    ga.data[start * av.cols..(start + g.rows) * av.cols].copy_from_slice(&g.data);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols { a, start } => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.rows, av.cols);
                    for r in 0..g.rows {
                        ga.data[r * av.cols + start..r * av.cols + start + g.cols]
                            .copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
            }
        }
        out
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut s = Tensor::zeros(1, g.cols);
    for r in 0..g.rows {
        for c in 0..g.cols {
            s.data[c] = s.data[c] + g.data[r * g.cols + c];
        }
    }
    s
}

fn transpose<T: Real>(a: &Tensor<T>) -> Tensor<T> {
    let mut t = Tensor::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            t.data[c * a.rows + r] = a.data[r * a.cols + c];
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::xavier;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Scalar objective `sum(w_out ⊙ f(params))` for a graph exercising every op.
    fn objective(store: &ParamStore<f64>, seed_out: &Tensor<f64>) -> (f64, Grads<f64>) {
        let mut t = Tape::new(store);
        let ids: Vec<ParamId> = (0..store.len()).map(ParamId).collect();
        let x = t.input(Tensor::new(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()));
        let h = t.linear(x, ids[0], ids[1]); // 3x5
        let h = t.layer_norm(h, ids[2], ids[3]);
        let r = t.relu(h);
        let sm = t.softmax_rows(r);
        let att = t.matmul_t(sm, h); // 3x3
        let a2 = t.scale(att, 0.7);
        let cat = t.concat_cols(&[a2, h]); // 3x8
        let top = t.slice_rows(cat, 1, 2);
        let top = t.slice_cols(top, 3, 4); // 2x4
        let mid = t.slice_cols(cat, 2, 4); // 3x4
        let w = t.param(ids[4]); // 4x4
        let mid2 = t.matmul(mid, w);
        let summed = t.add(mid2, mid);
        let stacked = t.concat_rows(&[top, summed]); // 5x4
        let clamped = t.clamp_min(stacked, -0.2);
        let v = t.value(clamped);
        let f: f64 = v.data.iter().zip(&seed_out.data).map(|(a, b)| a * b).sum();
        let grads = t.backward(&[(clamped, seed_out.clone())]);
        (f, grads)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        store.add("w0", xavier(4, 5, &mut rng));
        store.add("b0", xavier(1, 5, &mut rng));
        store.add("g", Tensor::new(1, 5, (0..5).map(|_| rng.random_range(0.5..1.5)).collect()));
        store.add("b", xavier(1, 5, &mut rng));
        store.add("w1", xavier(4, 4, &mut rng));
        let seed_out = Tensor::new(5, 4, (0..20).map(|_| rng.random_range(-1.0..1.0)).collect());
        let (_, grads) = objective(&store, &seed_out);
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for p in 0..store.len() {
            let id = ParamId(p);
            for j in 0..store.get(id).data.len() {
                let mut up = store.clone();
                up.get_mut(id).data[j] += h;
                let mut dn = store.clone();
                dn.get_mut(id).data[j] -= h;
                let fd = (objective(&up, &seed_out).0 - objective(&dn, &seed_out).0) / (2.0 * h);
                let an = grads.get(id).map(|g| g.data[j]).unwrap_or(0.0);
                worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-4));
            }
        }
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn inputs_receive_no_gradient_work() {
        let store = ParamStore::<f32>::new();
        let mut t = Tape::new(&store);
        let x = t.input(Tensor::row_vector(vec![1.0, 2.0]));
        let y = t.relu(x);
        let g = t.backward(&[(y, Tensor::row_vector(vec![1.0, 1.0]))]);
        assert!(g.is_empty());
    }
}
