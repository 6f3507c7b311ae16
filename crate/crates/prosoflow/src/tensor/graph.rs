//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive as it executes. Values are computed
//! eagerly; [`Graph::backward`] replays the trace in reverse and accumulates
//! adjoints. One graph is confined to one thread and one forward pass;
//! parameters live outside the graph and are re-registered each pass.

use super::array::{broadcast_shape, broadcast_to, matmul, reduce_to_shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    /// Elementwise x^p for constant p.
    Pow(Var, f64),
    Scale(Var, f64),
    AddConst(Var, f64),
    Clamp(Var, f64, f64),
    SumAll(Var),
    /// Row means of a matrix, keeping the unit column: [r, c] -> [r, 1].
    MeanRows(Var),
    /// Softmax over the last axis of a matrix.
    SoftmaxRows(Var),
    Reshape(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    /// out[i, :] = x[idx[i], :]; doubles as embedding lookup and length regulation.
    GatherRows(Var, Vec<usize>),
    /// out[r] = x[r, idx[r]].
    SelectColPerRow(Var, Vec<usize>),
    /// Same-padded 1-D convolution over rows: x [t, c_in], w [c_out, c_in, k], b [c_out].
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        kernel: usize,
    },
    /// Multiplication by a saved, pre-scaled keep mask.
    Dropout(Var, Vec<f64>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Index into the owning parameter store, for leaves registered as parameters.
    param: Option<usize>,
}

/// Contract violations raised by [`Graph::backward`].
#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("backward() requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of all registered parameter leaves, as (param index, grad) pairs.
    pub fn param_grads(&self) -> Vec<(usize, Tensor)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| {
                let pid = n.param?;
                let g = self.grads[i].clone()?;
                Some((pid, g))
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, param: Option<usize>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, None)
    }

    /// A differentiable leaf tied to parameter `pid` in the owning store.
    pub fn param(&mut self, pid: usize, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, Some(pid))
    }

    /// A differentiable leaf not tied to any store (inputs under test).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, None)
    }

    // ── elementwise binary ───────────────────────────────────────────

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(va.shape(), vb.shape());
        let da = broadcast_to(va.data(), va.shape(), &shape);
        let db = broadcast_to(vb.data(), vb.shape(), &shape);
        let data = da.iter().zip(&db).map(|(&x, &y)| f(x, y)).collect();
        let needs = self.any_grad(&[a, b]);
        self.push(Tensor::new(shape, data), op, needs, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(Op::Div(a, b), a, b, |x, y| x / y)
    }

    // ── elementwise unary ────────────────────────────────────────────

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.map(f);
        let needs = self.nodes[a.0].needs_grad;
        self.push(value, op, needs, None)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Op::Neg(a), a, |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a, f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus(a), a, softplus)
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Var {
        self.unary(Op::Pow(a, p), a, |x| x.powf(p))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(a, c), a, |x| x * c)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::AddConst(a, c), a, |x| x + c)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(a, lo, hi), a, |x| x.clamp(lo, hi))
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape().len(), 2, "matmul lhs must be 2-D");
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be 2-D");
        let (m, k) = (va.rows(), va.cols());
        let (k2, n) = (vb.rows(), vb.cols());
        assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
        let data = matmul(va.data(), vb.data(), m, k, n);
        let needs = self.any_grad(&[a, b]);
        self.push(Tensor::new(vec![m, n], data), Op::MatMul(a, b), needs, None)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let (r, c) = (va.rows(), va.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data()[i * c + j];
            }
        }
        let needs = self.nodes[a.0].needs_grad;
        self.push(Tensor::new(vec![c, r], data), Op::Transpose(a), needs, None)
    }

    // ── reductions and shaping ───────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let needs = self.nodes[a.0].needs_grad;
        self.push(Tensor::scalar(s), Op::SumAll(a), needs, None)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let (r, c) = (va.rows(), va.cols());
        let data: Vec<f64> = (0..r)
            .map(|i| va.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
            .collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(Tensor::new(vec![r, 1], data), Op::MeanRows(a), needs, None)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let (r, c) = (va.rows(), va.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &va.data()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - m).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
        }
        let needs = self.nodes[a.0].needs_grad;
        self.push(Tensor::new(vec![r, c], data), Op::SoftmaxRows(a), needs, None)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let value = self.nodes[a.0].value.reshaped(shape);
        let needs = self.nodes[a.0].needs_grad;
        self.push(value, Op::Reshape(a), needs, None)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let (r, c) = (va.rows(), va.cols());
        assert!(start <= end && end <= c, "slice {}..{} out of {} cols", start, end, c);
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&va.data()[i * c + start..i * c + end]);
        }
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            Tensor::new(vec![r, w], data),
            Op::SliceCols(a, start, end),
            needs,
            None,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|v| self.nodes[v.0].value.cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for v in parts {
                let t = &self.nodes[v.0].value;
                let c = t.cols();
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let needs = self.any_grad(parts);
        self.push(
            Tensor::new(vec![r, total], data),
            Op::ConcatCols(parts.to_vec()),
            needs,
            None,
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = &self.nodes[a.0].value;
        let (r, c) = (va.rows(), va.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather index {} out of {} rows", i, r);
            data.extend_from_slice(&va.data()[i * c..(i + 1) * c]);
        }
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            Tensor::new(vec![idx.len(), c], data),
            Op::GatherRows(a, idx.to_vec()),
            needs,
            None,
        )
    }

    pub fn select_col_per_row(&mut self, a: Var, idx: &[usize]) -> Var {
        let va = &self.nodes[a.0].value;
        let (r, c) = (va.rows(), va.cols());
        assert_eq!(idx.len(), r);
        let data: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c);
                va.data()[i * c + j]
            })
            .collect();
        let needs = self.nodes[a.0].needs_grad;
        self.push(
            Tensor::new(vec![r], data),
            Op::SelectColPerRow(a, idx.to_vec()),
            needs,
            None,
        )
    }

    // ── structured ops ───────────────────────────────────────────────

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "conv1d kernel must be odd");
        let value = {
            let vx = &self.nodes[x.0].value;
            let vw = &self.nodes[w.0].value;
            let vb = &self.nodes[b.0].value;
            conv1d_forward(vx, vw, vb, kernel)
        };
        let needs = self.any_grad(&[x, w, b]);
        self.push(value, Op::Conv1d { x, w, b, kernel }, needs, None)
    }

    /// Inverted dropout: zeroes entries with probability `p` and scales the
    /// survivors by 1/(1-p). The keep mask comes from the caller's RNG stream.
    pub fn dropout<R: rand::Rng>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&p), "dropout probability {}", p);
        if p == 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let n = self.nodes[a.0].value.numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let va = &self.nodes[a.0].value;
        let data: Vec<f64> = va.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(va.shape().to_vec(), data);
        let needs = self.nodes[a.0].needs_grad;
        self.push(value, Op::Dropout(a, mask), needs, None)
    }

    // ── backward ─────────────────────────────────────────────────────

    fn accumulate(&mut self, v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.nodes[v.0].value.shape());
        match &mut self.grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn bcast_back(&self, g: &Tensor, input: Var) -> Tensor {
        let target = self.nodes[input.0].value.shape();
        Tensor::new(
            target.to_vec(),
            reduce_to_shape(g.data(), g.shape(), target),
        )
    }

    /// Reverse pass from a scalar `loss`. Gradients accumulate on every
    /// differentiable node reachable from it.
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(GradError::NonScalarLoss(lv.shape().to_vec()));
        }
        let l = lv.data()[0];
        if !l.is_finite() {
            return Err(GradError::NonFiniteLoss(l));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        let seed_shape = self.nodes[loss.0].value.shape().to_vec();
        self.grads[loss.0] = Some(Tensor::new(seed_shape, vec![1.0]));

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = self.grads[i].clone() else { continue };
            let op = self.nodes[i].op.clone();
            self.backprop_op(i, &op, &g);
        }
        Ok(())
    }

    fn backprop_op(&mut self, node: usize, op: &Op, g: &Tensor) {
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                let ga = self.bcast_back(g, *a);
                let gb = self.bcast_back(g, *b);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Sub(a, b) => {
                let ga = self.bcast_back(g, *a);
                let gneg = g.map(|x| -x);
                let gb = self.bcast_back(&gneg, *b);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Mul(a, b) => {
                let shape = g.shape().to_vec();
                let da = broadcast_to(self.nodes[a.0].value.data(), self.nodes[a.0].value.shape(), &shape);
                let db = broadcast_to(self.nodes[b.0].value.data(), self.nodes[b.0].value.shape(), &shape);
                let ga_full: Vec<f64> = g.data().iter().zip(&db).map(|(&gv, &bv)| gv * bv).collect();
                let gb_full: Vec<f64> = g.data().iter().zip(&da).map(|(&gv, &av)| gv * av).collect();
                let ga = self.bcast_back(&Tensor::new(shape.clone(), ga_full), *a);
                let gb = self.bcast_back(&Tensor::new(shape, gb_full), *b);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Div(a, b) => {
                let shape = g.shape().to_vec();
                let da = broadcast_to(self.nodes[a.0].value.data(), self.nodes[a.0].value.shape(), &shape);
                let db = broadcast_to(self.nodes[b.0].value.data(), self.nodes[b.0].value.shape(), &shape);
                let ga_full: Vec<f64> = g.data().iter().zip(&db).map(|(&gv, &bv)| gv / bv).collect();
                let gb_full: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(da.iter().zip(&db))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                let ga = self.bcast_back(&Tensor::new(shape.clone(), ga_full), *a);
                let gb = self.bcast_back(&Tensor::new(shape, gb_full), *b);
                self.accumulate(*a, ga);
                self.accumulate(*b, gb);
            }
            Op::Neg(a) => {
                let ga = g.map(|x| -x);
                self.accumulate(*a, ga);
            }
            Op::MatMul(a, b) => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let (m, k) = (va.rows(), va.cols());
                let n = vb.cols();
                // dA = G B^T
                let mut ga = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g.data()[i * n + j] * vb.data()[p * n + j];
                        }
                        ga[i * k + p] = s;
                    }
                }
                // dB = A^T G
                let mut gb = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let av = va.data()[i * k + p];
                        if av == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[p * n + j] += av * g.data()[i * n + j];
                        }
                    }
                }
                self.accumulate(*a, Tensor::new(vec![m, k], ga));
                self.accumulate(*b, Tensor::new(vec![k, n], gb));
            }
            Op::Transpose(a) => {
                let (r, c) = (g.rows(), g.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[j * r + i] = g.data()[i * c + j];
                    }
                }
                self.accumulate(*a, Tensor::new(vec![c, r], ga));
            }
            Op::Exp(a) => {
                let y = self.nodes[node].value.clone();
                let ga: Vec<f64> = g.data().iter().zip(y.data()).map(|(&gv, &yv)| gv * yv).collect();
                self.accumulate(*a, Tensor::new(y.shape().to_vec(), ga));
            }
            Op::Log(a) => {
                let x = self.nodes[a.0].value.clone();
                let ga: Vec<f64> = g.data().iter().zip(x.data()).map(|(&gv, &xv)| gv / xv).collect();
                self.accumulate(*a, Tensor::new(x.shape().to_vec(), ga));
            }
            Op::Tanh(a) => {
                let y = self.nodes[node].value.clone();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * (1.0 - yv * yv))
                    .collect();
                self.accumulate(*a, Tensor::new(y.shape().to_vec(), ga));
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[node].value.clone();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&gv, &yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.accumulate(*a, Tensor::new(y.shape().to_vec(), ga));
            }
            Op::Softplus(a) => {
                let x = self.nodes[a.0].value.clone();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * sigmoid(xv))
                    .collect();
                self.accumulate(*a, Tensor::new(x.shape().to_vec(), ga));
            }
            Op::Pow(a, p) => {
                let x = self.nodes[a.0].value.clone();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| gv * p * xv.powf(p - 1.0))
                    .collect();
                self.accumulate(*a, Tensor::new(x.shape().to_vec(), ga));
            }
            Op::Scale(a, c) => {
                let ga = g.map(|x| x * c);
                self.accumulate(*a, ga);
            }
            Op::AddConst(a, _) => {
                self.accumulate(*a, g.clone());
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.nodes[a.0].value.clone();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&gv, &xv)| if xv > *lo && xv < *hi { gv } else { 0.0 })
                    .collect();
                self.accumulate(*a, Tensor::new(x.shape().to_vec(), ga));
            }
            Op::SumAll(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let gv = g.item();
                let n: usize = shape.iter().product();
                self.accumulate(*a, Tensor::new(shape, vec![gv; n]));
            }
            Op::MeanRows(a) => {
                let (r, c) = {
                    let x = &self.nodes[a.0].value;
                    (x.rows(), x.cols())
                };
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let gi = g.data()[i] / c as f64;
                    for j in 0..c {
                        ga[i * c + j] = gi;
                    }
                }
                self.accumulate(*a, Tensor::new(vec![r, c], ga));
            }
            Op::SoftmaxRows(a) => {
                let y = self.nodes[node].value.clone();
                let (r, c) = (y.rows(), y.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let yrow = &y.data()[i * c..(i + 1) * c];
                    let grow = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yrow.iter().zip(grow).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..c {
                        ga[i * c + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                self.accumulate(*a, Tensor::new(vec![r, c], ga));
            }
            Op::Reshape(a) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                self.accumulate(*a, Tensor::new(shape, g.data().to_vec()));
            }
            Op::SliceCols(a, start, _end) => {
                let (r, c) = {
                    let x = &self.nodes[a.0].value;
                    (x.rows(), x.cols())
                };
                let w = g.cols();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..w {
                        ga[i * c + start + j] = g.data()[i * w + j];
                    }
                }
                self.accumulate(*a, Tensor::new(vec![r, c], ga));
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let mut offset = 0usize;
                let total = g.cols();
                for v in parts {
                    let c = self.nodes[v.0].value.cols();
                    let mut gp = vec![0.0; r * c];
                    for i in 0..r {
                        gp[i * c..(i + 1) * c]
                            .copy_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                    }
                    offset += c;
                    self.accumulate(*v, Tensor::new(vec![r, c], gp));
                }
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = {
                    let x = &self.nodes[a.0].value;
                    (x.rows(), x.cols())
                };
                let mut ga = vec![0.0; r * c];
                for (out_i, &src) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[src * c + j] += g.data()[out_i * c + j];
                    }
                }
                self.accumulate(*a, Tensor::new(vec![r, c], ga));
            }
            Op::SelectColPerRow(a, idx) => {
                let (r, c) = {
                    let x = &self.nodes[a.0].value;
                    (x.rows(), x.cols())
                };
                let mut ga = vec![0.0; r * c];
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * c + j] = g.data()[i];
                }
                self.accumulate(*a, Tensor::new(vec![r, c], ga));
            }
            Op::Conv1d { x, w, b, kernel } => {
                let vx = self.nodes[x.0].value.clone();
                let vw = self.nodes[w.0].value.clone();
                let (t, cin) = (vx.rows(), vx.cols());
                let cout = vw.shape()[0];
                let k = *kernel;
                let half = k / 2;
                let mut gx = vec![0.0; t * cin];
                let mut gw = vec![0.0; cout * cin * k];
                let mut gb = vec![0.0; cout];
                for ti in 0..t {
                    for o in 0..cout {
                        let go = g.data()[ti * cout + o];
                        if go == 0.0 {
                            continue;
                        }
                        gb[o] += go;
                        for dk in 0..k {
                            let src = ti as isize + dk as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let src = src as usize;
                            for ci in 0..cin {
                                let xv = vx.data()[src * cin + ci];
                                let wv = vw.data()[(o * cin + ci) * k + dk];
                                gw[(o * cin + ci) * k + dk] += go * xv;
                                gx[src * cin + ci] += go * wv;
                            }
                        }
                    }
                }
                self.accumulate(*x, Tensor::new(vec![t, cin], gx));
                self.accumulate(*w, Tensor::new(vec![cout, cin, k], gw));
                self.accumulate(*b, Tensor::new(vec![cout], gb));
            }
            Op::Dropout(a, mask) => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                let ga: Vec<f64> = g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(*a, Tensor::new(shape, ga));
            }
        }
    }

    /// Recompute every node's value from the leaves and compare with the
    /// recorded trace. Returns true when the replay is bit-identical.
    pub fn replay_matches(&self) -> bool {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf => node.value.clone(),
                op => self.recompute(op, &values, node.value.shape()),
            };
            if v.shape() != node.value.shape() || v.data() != node.value.data() {
                return false;
            }
            values.push(v);
        }
        true
    }

    fn recompute(&self, op: &Op, values: &[Tensor], out_shape: &[usize]) -> Tensor {
        let get = |v: &Var| &values[v.0];
        let bin = |a: &Var, b: &Var, f: &dyn Fn(f64, f64) -> f64| {
            let (va, vb) = (get(a), get(b));
            let shape = broadcast_shape(va.shape(), vb.shape());
            let da = broadcast_to(va.data(), va.shape(), &shape);
            let db = broadcast_to(vb.data(), vb.shape(), &shape);
            let data = da.iter().zip(&db).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(shape, data)
        };
        match op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => bin(a, b, &|x, y| x + y),
            Op::Sub(a, b) => bin(a, b, &|x, y| x - y),
            Op::Mul(a, b) => bin(a, b, &|x, y| x * y),
            Op::Div(a, b) => bin(a, b, &|x, y| x / y),
            Op::Neg(a) => get(a).map(|x| -x),
            Op::Exp(a) => get(a).map(f64::exp),
            Op::Log(a) => get(a).map(f64::ln),
            Op::Tanh(a) => get(a).map(f64::tanh),
            Op::Sigmoid(a) => get(a).map(sigmoid),
            Op::Softplus(a) => get(a).map(softplus),
            Op::Pow(a, p) => get(a).map(|x| x.powf(*p)),
            Op::Scale(a, c) => get(a).map(|x| x * c),
            Op::AddConst(a, c) => get(a).map(|x| x + c),
            Op::Clamp(a, lo, hi) => get(a).map(|x| x.clamp(*lo, *hi)),
            Op::MatMul(a, b) => {
                let (va, vb) = (get(a), get(b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                Tensor::new(vec![m, n], matmul(va.data(), vb.data(), m, k, n))
            }
            Op::Transpose(a) => {
                let va = get(a);
                let (r, c) = (va.rows(), va.cols());
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[j * r + i] = va.data()[i * c + j];
                    }
                }
                Tensor::new(vec![c, r], data)
            }
            Op::SumAll(a) => Tensor::scalar(get(a).data().iter().sum()),
            Op::MeanRows(a) => {
                let va = get(a);
                let (r, c) = (va.rows(), va.cols());
                let data = (0..r)
                    .map(|i| va.data()[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                    .collect();
                Tensor::new(vec![r, 1], data)
            }
            Op::SoftmaxRows(a) => {
                let va = get(a);
                let (r, c) = (va.rows(), va.cols());
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    let row = &va.data()[i * c..(i + 1) * c];
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let out = &mut data[i * c..(i + 1) * c];
                    let mut z = 0.0;
                    for (o, &x) in out.iter_mut().zip(row) {
                        *o = (x - m).exp();
                        z += *o;
                    }
                    for o in out.iter_mut() {
                        *o /= z;
                    }
                }
                Tensor::new(vec![r, c], data)
            }
            Op::Reshape(a) => get(a).reshaped(out_shape.to_vec()),
            Op::SliceCols(a, s, e) => {
                let va = get(a);
                let (r, c) = (va.rows(), va.cols());
                let mut data = Vec::with_capacity(r * (e - s));
                for i in 0..r {
                    data.extend_from_slice(&va.data()[i * c + s..i * c + e]);
                }
                Tensor::new(vec![r, e - s], data)
            }
            Op::ConcatCols(parts) => {
                let r = get(&parts[0]).rows();
                let total: usize = parts.iter().map(|v| get(v).cols()).sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for v in parts {
                        let t = get(v);
                        let c = t.cols();
                        data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
                    }
                }
                Tensor::new(vec![r, total], data)
            }
            Op::GatherRows(a, idx) => {
                let va = get(a);
                let c = va.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(&va.data()[i * c..(i + 1) * c]);
                }
                Tensor::new(vec![idx.len(), c], data)
            }
            Op::SelectColPerRow(a, idx) => {
                let va = get(a);
                let c = va.cols();
                let data = idx
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| va.data()[i * c + j])
                    .collect();
                Tensor::new(vec![idx.len()], data)
            }
            Op::Conv1d { x, w, b, kernel } => conv1d_forward(get(x), get(w), get(b), *kernel),
            Op::Dropout(a, mask) => {
                let va = get(a);
                let data = va.data().iter().zip(mask).map(|(&v, &m)| v * m).collect();
                Tensor::new(va.shape().to_vec(), data)
            }
        }
    }
}

fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor, kernel: usize) -> Tensor {
    let (t, cin) = (x.rows(), x.cols());
    assert_eq!(w.shape().len(), 3, "conv1d weight must be [c_out, c_in, k]");
    let cout = w.shape()[0];
    assert_eq!(w.shape()[1], cin, "conv1d weight c_in mismatch");
    assert_eq!(w.shape()[2], kernel);
    assert_eq!(b.numel(), cout);
    let half = kernel / 2;
    let mut out = vec![0.0; t * cout];
    for ti in 0..t {
        for o in 0..cout {
            let mut acc = b.data()[o];
            for dk in 0..kernel {
                let src = ti as isize + dk as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                for ci in 0..cin {
                    acc += w.data()[(o * cin + ci) * kernel + dk] * x.data()[src * cin + ci];
                }
            }
            out[ti * cout + o] = acc;
        }
    }
    Tensor::new(vec![t, cout], out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient_is_two_x() {
        // f(x) = x*x at x = 3 -> gradient 6
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_gradient_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let c = g.constant(Tensor::scalar(7.0));
        let y = g.mul(c, c);
        let z = g.add(y, x);
        g.backward(z).unwrap();
        // d/dc is never tracked; d/dx of x + const is 1
        assert_eq!(g.grad(x).unwrap().item(), 1.0);
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn softplus_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0));
        let y = g.softplus(x);
        g.backward(y).unwrap();
        assert!((g.grad(x).unwrap().item() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.exp(x);
        assert!(matches!(g.backward(y), Err(GradError::NonScalarLoss(_))));
    }

    #[test]
    fn replay_reproduces_trace() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 3], vec![0.1, -0.4, 2.0, 1.5, -1.0, 0.3]));
        let w = g.input(Tensor::new(vec![3, 2], vec![0.5; 6]));
        let y = g.matmul(x, w);
        let s = g.softmax_rows(y);
        let l = g.sum_all(s);
        let _ = l;
        assert!(g.replay_matches());
    }

    #[test]
    fn matmul_gradient_matches_manual() {
        let mut g = Graph::new();
        let a = g.input(Tensor::new(vec![1, 2], vec![2.0, 3.0]));
        let b = g.input(Tensor::new(vec![2, 1], vec![5.0, 7.0]));
        let y = g.matmul(a, b); // 2*5 + 3*7 = 31
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        assert_eq!(g.value(y).item(), 31.0);
        assert_eq!(g.grad(a).unwrap().data(), &[5.0, 7.0]);
        assert_eq!(g.grad(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let mut g = Graph::new();
        let table = g.input(Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = g.gather_rows(table, &[2, 0, 2]);
        let l = g.sum_all(picked);
        g.backward(l).unwrap();
        assert_eq!(g.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn dropout_zero_probability_is_identity() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.dropout(x, 0.0, &mut rng);
        assert_eq!(x, y);
    }
}
