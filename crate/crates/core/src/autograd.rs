//! A small reverse-mode tape over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! trainable leaves, data and frozen quantities as constant leaves, and
//! [`Graph::backward`] walks the tape once in reverse. Shape mismatches inside
//! the tape are programming errors and panic; public entry points validate
//! their inputs before building a graph.

use crate::tensor::{matmul_into, s, softmax_in_place, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnShape {
    heads: usize,
    groups: usize,
    tq: usize,
    tk: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddTiled(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    RowEntropy(Var),
    L2NormRows {
        x: Var,
        norms: Vec<T>,
    },
    SumAll(Var),
    SelectRows(Var, Vec<usize>),
    Interleave(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

const LN_EPS: f64 = 1e-5;
const L2_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_f64(x: f64) -> (f64, f64) {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Softmax weights saved by an attention node, laid out as
    /// `[groups][heads][tq][tk]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[T]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant copy of `x`; gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul inner dims {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![T::zero(); m * n];
        matmul_into(av.data(), m, k, false, bv.data(), k2, n, false, &mut out, false);
        let value = Tensor::from_vec(&[m, n], out).unwrap();
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul(a, b), ng)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "elementwise {:?} vs {:?}", av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_vec(av.shape(), data).unwrap();
        let ng = self.ng(&[a, b]);
        self.push(value, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c: T = s(c);
        let value = self.value(a).map(|x| x * c);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, c), ng)
    }

    /// `x + tile(p)`: row `i` of `x` gets row `i mod p.rows` of `p`.
    pub fn add_tiled(&mut self, x: Var, p: Var) -> Var {
        let (xv, pv) = (self.value(x), self.value(p));
        assert_eq!(xv.cols(), pv.cols(), "add_tiled cols");
        let (rows, t, c) = (xv.rows(), pv.rows(), xv.cols());
        assert!(t > 0 && rows % t == 0, "add_tiled rows {rows} by {t}");
        let mut value = xv.clone();
        for r in 0..rows {
            let src = pv.row(r % t);
            for (o, &b) in value.data_mut()[r * c..(r + 1) * c].iter_mut().zip(src) {
                *o += b;
            }
        }
        let ng = self.ng(&[x, p]);
        self.push(value, Op::AddTiled(x, p), ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| s(gelu_f64(v.as_f64()).0));
        let ng = self.ng(&[x]);
        self.push(value, Op::Gelu(x), ng)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` of shape `[1, cols]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.cols());
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let mut xhat = vec![T::zero(); rows * c];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * c];
        let n: T = s(c as f64);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / n;
            let rs = T::one() / (var + s(LN_EPS)).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gv[j] + bv[j];
            }
        }
        let value = Tensor::from_vec(xv.shape(), out).unwrap();
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::Softmax(x), ng)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let c = value.cols();
        for row in value.data_mut().chunks_mut(c) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::LogSoftmax(x), ng)
    }

    /// Shannon entropy of each row (rows are probability vectors), `[rows, 1]`.
    pub fn row_entropy(&mut self, p: Var) -> Var {
        let pv = self.value(p);
        let c = pv.cols();
        let data: Vec<T> = pv
            .data()
            .chunks(c)
            .map(crate::tensor::entropy)
            .collect();
        let rows = data.len();
        let value = Tensor::from_vec(&[rows, 1], data).unwrap();
        let ng = self.ng(&[p]);
        self.push(value, Op::RowEntropy(p), ng)
    }

    /// Row-wise `x / max(|x|, eps)`; the zero row maps to zeros.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(c) {
            let n = row.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
            let d = n.max(s(L2_EPS));
            row.iter_mut().for_each(|v| *v /= d);
            norms.push(n);
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::L2NormRows { x, norms }, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(T::zero(), |a, &v| a + v);
        let ng = self.ng(&[x]);
        self.push(Tensor::from_vec(&[1, 1], vec![total]).unwrap(), Op::SumAll(x), ng)
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let value = self.value(x).gather_rows(idx);
        let ng = self.ng(&[x]);
        self.push(value, Op::SelectRows(x, idx.to_vec()), ng)
    }

    /// Stacks `T` tensors of shape `[G, d]` into `[G*T, d]` with row
    /// `g*T + j` taken from `parts[j]`, i.e. one contiguous sequence per group.
    pub fn interleave(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "interleave of nothing");
        let t = parts.len();
        let g = self.value(parts[0]).rows();
        let c = self.value(parts[0]).cols();
        let mut out = vec![T::zero(); g * t * c];
        for (j, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            assert_eq!((pv.rows(), pv.cols()), (g, c), "interleave part shape");
            for gi in 0..g {
                out[(gi * t + j) * c..(gi * t + j + 1) * c].copy_from_slice(pv.row(gi));
            }
        }
        let value = Tensor::from_vec(&[g * t, c], out).unwrap();
        let ng = self.ng(parts);
        self.push(value, Op::Interleave(parts.to_vec()), ng)
    }

    /// Multi-head scaled dot-product attention without masking.
    ///
    /// `q` is `[groups*tq, d]`, `k` and `v` are `[groups*tk, d]`; each group
    /// attends only within itself. Heads split the `d` columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        assert!(heads > 0 && d % heads == 0, "d={d} heads={heads}");
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(kv.rows(), vv.rows());
        assert!(groups > 0 && qv.rows() % groups == 0 && kv.rows() % groups == 0);
        let shape = AttnShape {
            heads,
            groups,
            tq: qv.rows() / groups,
            tk: kv.rows() / groups,
        };
        let dh = d / heads;
        let scale: T = s(1.0 / (dh as f64).sqrt());
        let (tq, tk) = (shape.tq, shape.tk);
        let mut probs = vec![T::zero(); groups * heads * tq * tk];
        let mut out = vec![T::zero(); groups * tq * d];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let qrow = &qd[(g * tq + i) * d + off..(g * tq + i) * d + off + dh];
                    let base = ((g * heads + h) * tq + i) * tk;
                    let prow = &mut probs[base..base + tk];
                    for (j, p) in prow.iter_mut().enumerate() {
                        let krow = &kd[(g * tk + j) * d + off..(g * tk + j) * d + off + dh];
                        *p = dot(qrow, krow) * scale;
                    }
                    softmax_in_place(prow);
                    let orow = &mut out[(g * tq + i) * d + off..(g * tq + i) * d + off + dh];
                    for (j, &p) in prow.iter().enumerate() {
                        let vrow = &vd[(g * tk + j) * d + off..(g * tk + j) * d + off + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[groups * tq, d], out).unwrap();
        let ng = self.ng(&[q, k, v]);
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            ng,
        )
    }

    /// Forward value `value`, backward identity into `src`.
    pub fn straight_through(&mut self, src: Var, value: Tensor<T>) -> Var {
        assert_eq!(self.value(src).len(), value.len(), "straight-through shape");
        let ng = self.ng(&[src]);
        self.push(value, Op::StraightThrough(src), ng)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        Grads { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, node: &Node<T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.accum(grads, *a, |ga| {
                    matmul_into(go, m, n, false, bv.data(), k, n, true, ga, true)
                });
                self.accum(grads, *b, |gb| {
                    matmul_into(av.data(), m, k, true, go, m, n, false, gb, true)
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |g| add_into(g, go));
                self.accum(grads, *b, |g| add_into(g, go));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |g| add_into(g, go));
                self.accum(grads, *b, |g| g.iter_mut().zip(go).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accum(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += go[i] * bv[i];
                    }
                });
                self.accum(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += go[i] * av[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accum(grads, *a, |g| g.iter_mut().zip(go).for_each(|(x, &y)| *x += y * *c));
            }
            Op::AddTiled(x, p) => {
                self.accum(grads, *x, |g| add_into(g, go));
                let pv = self.value(*p);
                let (t, c) = (pv.rows(), pv.cols());
                self.accum(grads, *p, |g| {
                    for (r, row) in go.chunks(c).enumerate() {
                        let dst = &mut g[(r % t) * c..(r % t + 1) * c];
                        add_into(dst, row);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accum(grads, *x, |g| {
                    for i in 0..g.len() {
                        g[i] += go[i] * s::<T>(gelu_f64(xv[i].as_f64()).1);
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = node.value.cols();
                let gv = self.value(*gamma).data();
                self.accum(grads, *gamma, |g| {
                    for (r, row) in go.chunks(c).enumerate() {
                        for j in 0..c {
                            g[j] += row[j] * xhat[r * c + j];
                        }
                    }
                });
                self.accum(grads, *beta, |g| {
                    for row in go.chunks(c) {
                        add_into(g, row);
                    }
                });
                let n: T = s(c as f64);
                self.accum(grads, *x, |g| {
                    for (r, row) in go.chunks(c).enumerate() {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xh = T::zero();
                        for j in 0..c {
                            let dy = row[j] * gv[j];
                            sum_dy += dy;
                            sum_dy_xh += dy * xh[j];
                        }
                        for j in 0..c {
                            let dy = row[j] * gv[j];
                            g[r * c + j] += rstd[r] * (dy - sum_dy / n - xh[j] * sum_dy_xh / n);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                self.accum(grads, *x, |g| {
                    for r in 0..node.value.rows() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &go[r * c..(r + 1) * c]);
                        let dotp = dot(yr, gr);
                        for j in 0..c {
                            g[r * c + j] += yr[j] * (gr[j] - dotp);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                self.accum(grads, *x, |g| {
                    for r in 0..node.value.rows() {
                        let gr = &go[r * c..(r + 1) * c];
                        let sum = gr.iter().fold(T::zero(), |a, &v| a + v);
                        for j in 0..c {
                            g[r * c + j] += gr[j] - y[r * c + j].exp() * sum;
                        }
                    }
                });
            }
            Op::RowEntropy(p) => {
                let pv = self.value(*p);
                let c = pv.cols();
                let tiny: T = s(1e-30);
                self.accum(grads, *p, |g| {
                    for (r, row) in pv.data().chunks(c).enumerate() {
                        for j in 0..c {
                            // d/dp (-p ln p) = -(ln p + 1)
                            g[r * c + j] -= go[r] * (row[j].max(tiny).ln() + T::one());
                        }
                    }
                });
            }
            Op::L2NormRows { x, norms } => {
                let y = node.value.data();
                let c = node.value.cols();
                self.accum(grads, *x, |g| {
                    for (r, &n) in norms.iter().enumerate() {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &go[r * c..(r + 1) * c]);
                        if n > s(L2_EPS) {
                            let dotp = dot(yr, gr);
                            for j in 0..c {
                                g[r * c + j] += (gr[j] - yr[j] * dotp) / n;
                            }
                        } else {
                            for j in 0..c {
                                g[r * c + j] += gr[j] / s(L2_EPS);
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                let g0 = go[0];
                self.accum(grads, *x, |g| g.iter_mut().for_each(|v| *v += g0));
            }
            Op::SelectRows(x, idx) => {
                let c = node.value.cols();
                self.accum(grads, *x, |g| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut g[i * c..(i + 1) * c], &go[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Interleave(parts) => {
                let t = parts.len();
                let c = node.value.cols();
                for (j, &p) in parts.iter().enumerate() {
                    self.accum(grads, p, |g| {
                        let groups = g.len() / c;
                        for gi in 0..groups {
                            add_into(
                                &mut g[gi * c..(gi + 1) * c],
                                &go[(gi * t + j) * c..(gi * t + j + 1) * c],
                            );
                        }
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => self.attention_backward(*q, *k, *v, *shape, probs, go, grads),
            Op::StraightThrough(src) => {
                self.accum(grads, *src, |g| add_into(g, go));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: &[T],
        go: &[T],
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let AttnShape {
            heads,
            groups,
            tq,
            tk,
        } = shape;
        let dh = d / heads;
        let scale: T = s(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut ds = vec![T::zero(); tk];
        for g in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let qi = (g * tq + i) * d + off;
                    let gor = &go[qi..qi + dh];
                    let base = ((g * heads + h) * tq + i) * tk;
                    let prow = &probs[base..base + tk];
                    let mut acc = T::zero();
                    for j in 0..tk {
                        let kj = (g * tk + j) * d + off;
                        let dp = dot(gor, &vd[kj..kj + dh]);
                        ds[j] = dp;
                        acc += prow[j] * dp;
                        for (x, &y) in dv[kj..kj + dh].iter_mut().zip(gor) {
                            *x += prow[j] * y;
                        }
                    }
                    for j in 0..tk {
                        let dsj = prow[j] * (ds[j] - acc) * scale;
                        let kj = (g * tk + j) * d + off;
                        for c in 0..dh {
                            dq[qi + c] += dsj * kd[kj + c];
                            dk[kj + c] += dsj * qd[qi + c];
                        }
                    }
                }
            }
        }
        self.accum(grads, q, |g| add_into(g, &dq));
        self.accum(grads, k, |g| add_into(g, &dk));
        self.accum(grads, v, |g| add_into(g, &dv));
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
