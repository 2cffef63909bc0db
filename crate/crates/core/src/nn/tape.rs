//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse and returns gradients for the parameters that were
//! read through [`Tape::param`].

use std::sync::Arc;

use super::graph::Graph;
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    SumAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherCols(Var, Arc<Vec<usize>>),
    MaskedLogSoftmax(Var, Arc<Vec<bool>>),
    NeighborSum(Var, Arc<Graph>),
    Clamp(Var, f64, f64),
    Min(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> Error {
    Error::Shape(format!("{what}: {}x{} vs {}x{}", a.0, a.1, b.0, b.1))
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient is reported for it).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let t = self.params.get(id).clone();
        self.push(t, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let v = self.value(a).matmul(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// a · bᵀ
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err("matmul_bt", sa, sb));
        }
        let v = self.value(a).matmul_bt(self.value(b));
        Ok(self.push(v, Op::MatMulBt(a, b)))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(what, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Add a 1×c row to every row of an r×c matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr.0 != 1 || sr.1 != sa.1 {
            return Err(shape_err("add_row", sa, sr));
        }
        let mut v = self.value(a).clone();
        let r = self.value(row);
        for i in 0..sa.0 {
            for (x, b) in v.row_mut(i).iter_mut().zip(&r.data) {
                *x += b;
            }
        }
        Ok(self.push(v, Op::AddRow(a, row)))
    }

    /// Scale row i of an r×c matrix by entry i of an r×1 column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc.1 != 1 || sc.0 != sa.0 {
            return Err(shape_err("mul_col", sa, sc));
        }
        let mut v = self.value(a).clone();
        let c = self.value(col);
        for i in 0..sa.0 {
            let s = c.data[i];
            for x in v.row_mut(i) {
                *x *= s;
            }
        }
        Ok(self.push(v, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    /// Sum of all entries as a 1×1.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: r×c → r×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows).map(|i| t.row(i).iter().sum()).collect();
        let v = Tensor {
            rows: t.rows,
            cols: 1,
            data,
        };
        self.push(v, Op::SumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        if let Some(&bad) = parts.iter().find(|&&p| self.shape(p).0 != rows) {
            return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(bad)));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                v.row_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::Shape(format!("slice {start}+{len} of {c} columns")));
        }
        let t = self.value(a);
        let mut v = Tensor::zeros(r, len);
        for i in 0..r {
            v.row_mut(i).copy_from_slice(&t.row(i)[start..start + len]);
        }
        Ok(self.push(v, Op::SliceCols(a, start)))
    }

    /// Entry `idx[i]` of each row i: r×c → r×1.
    pub fn gather_cols(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::Shape("gather index out of range".into()));
        }
        let t = self.value(a);
        let data = idx.iter().enumerate().map(|(i, &j)| t.at(i, j)).collect();
        let v = Tensor { rows: r, cols: 1, data };
        Ok(self.push(v, Op::GatherCols(a, Arc::new(idx))))
    }

    /// Row-wise log-softmax over entries whose mask is true. Masked entries
    /// get value 0 and zero gradient; multiply `exp` of the result by the
    /// mask to obtain probabilities. Rows with no legal entry are all zero.
    pub fn masked_log_softmax(&mut self, a: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if mask.len() != r * c {
            return Err(Error::Shape(format!("mask of {} for {r}x{c}", mask.len())));
        }
        let t = self.value(a);
        let mut v = Tensor::zeros(r, c);
        for i in 0..r {
            let row = t.row(i);
            let m = &mask[i * c..(i + 1) * c];
            let mx = row
                .iter()
                .zip(m)
                .filter(|(_, &ok)| ok)
                .map(|(&x, _)| x)
                .fold(f64::NEG_INFINITY, f64::max);
            if mx == f64::NEG_INFINITY {
                continue;
            }
            let lse = mx
                + row
                    .iter()
                    .zip(m)
                    .filter(|(_, &ok)| ok)
                    .map(|(&x, _)| (x - mx).exp())
                    .sum::<f64>()
                    .ln();
            for (j, out) in v.row_mut(i).iter_mut().enumerate() {
                if m[j] {
                    *out = row[j] - lse;
                }
            }
        }
        Ok(self.push(v, Op::MaskedLogSoftmax(a, mask)))
    }

    /// out_i = Σ_{j ∈ N(i)} a_j (no self term).
    pub fn neighbor_sum(&mut self, a: Var, graph: Arc<Graph>) -> Result<Var> {
        let (r, c) = self.shape(a);
        if r != graph.node_count() {
            return Err(Error::Shape(format!(
                "{r} rows for a graph of {} nodes",
                graph.node_count()
            )));
        }
        let t = self.value(a);
        let mut v = Tensor::zeros(r, c);
        for i in 0..r {
            for &j in graph.neighbors(i) {
                let src = t.row(j);
                for (o, s) in v.row_mut(i).iter_mut().zip(src) {
                    *o += s;
                }
            }
        }
        Ok(self.push(v, Op::NeighborSum(a, graph)))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("min", a, b)?;
        let v = self.value(a).zip(self.value(b), f64::min);
        Ok(self.push(v, Op::Min(a, b)))
    }

    /// Reverse pass from a 1×1 root.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(Error::Shape(format!("backward from a {r}x{c} root; need a scalar")));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));
        let mut out = self.params.zeros_like();

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => out.tensors[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul_bt(bv));
                    acc(&mut grads, *b, av.matmul_at(&g));
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul(bv));
                    acc(&mut grads, *b, g.matmul_at(av));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.map(|x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(self.value(*b), |x, y| x * y);
                    let gb = g.zip(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (s, x) in gr.data.iter_mut().zip(g.row(r)) {
                            *s += x;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulCol(a, col) => {
                    let (av, cv) = (self.value(*a), self.value(*col));
                    let mut ga = g.clone();
                    let mut gc = Tensor::zeros(g.rows, 1);
                    for r in 0..g.rows {
                        let s = cv.data[r];
                        gc.data[r] = super::tensor::dot(g.row(r), av.row(r));
                        for x in ga.row_mut(r) {
                            *x *= s;
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *col, gc);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|x| x * c)),
                Op::Relu(a) => {
                    let ga = g.zip(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g.zip(&node.value, |x, y| x * (1.0 - y * y));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip(&node.value, |x, y| x * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip(self.value(*a), |x, y| x / y);
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(r, c, g.data[0]));
                }
                Op::SumCols(a) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i).fill(g.data[i]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let (r, c) = self.shape(p);
                        let mut gp = Tensor::zeros(r, c);
                        for i in 0..r {
                            gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                        }
                        off += c;
                        acc(&mut grads, p, gp);
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        ga.row_mut(i)[*start..*start + g.cols].copy_from_slice(g.row(i));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::GatherCols(a, idx) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for (i, &j) in idx.iter().enumerate() {
                        ga.set(i, j, g.data[i]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MaskedLogSoftmax(a, mask) => {
                    let (r, c) = self.shape(*a);
                    let y = &node.value;
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let m = &mask[i * c..(i + 1) * c];
                        let gs: f64 = g.row(i).iter().zip(m).filter(|(_, &ok)| ok).map(|(x, _)| x).sum();
                        for j in 0..c {
                            if m[j] {
                                ga.set(i, j, g.at(i, j) - y.at(i, j).exp() * gs);
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::NeighborSum(a, graph) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for i in 0..r {
                        let gi = g.row(i).to_vec();
                        for &j in graph.neighbors(i) {
                            for (o, s) in ga.row_mut(j).iter_mut().zip(&gi) {
                                *o += s;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip(self.value(*a), |x, y| if y >= *lo && y <= *hi { x } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Min(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(g.rows, g.cols);
                    let mut gb = Tensor::zeros(g.rows, g.cols);
                    for j in 0..g.data.len() {
                        if av.data[j] <= bv.data[j] {
                            ga.data[j] = g.data[j];
                        } else {
                            gb.data[j] = g.data[j];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamStore::new();
        ps.add("w", 2, 2, 2, &mut rng);
        let mut t = Tape::new(&ps);
        let c = t.constant(Tensor::scalar(3.0));
        let g = t.backward(c).unwrap();
        assert!(g.tensors.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_loss_gradient_is_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamStore::new();
        let w = ps.add("w", 3, 1, 3, &mut rng);
        let x = Tensor::row_vector(vec![0.5, -2.0, 4.0]);
        let mut t = Tape::new(&ps);
        let xv = t.constant(x.clone());
        let wv = t.param(w);
        let y = t.matmul(xv, wv).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(w).data, x.data);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let ps = ParamStore::new();
        let mut t = Tape::new(&ps);
        let v = t.constant(Tensor::zeros(2, 2));
        assert!(matches!(t.backward(v), Err(Error::Shape(_))));
    }

    #[test]
    fn masked_log_softmax_normalizes_over_legal_entries() {
        let ps = ParamStore::new();
        let mut t = Tape::new(&ps);
        let a = t.constant(Tensor::from_rows(&[vec![1.0, 5.0, 2.0], vec![0.0, 0.0, 0.0]]).unwrap());
        let mask = Arc::new(vec![true, false, true, true, true, true]);
        let y = t.masked_log_softmax(a, mask).unwrap();
        let v = t.value(y);
        assert_eq!(v.at(0, 1), 0.0);
        let s0 = v.at(0, 0).exp() + v.at(0, 2).exp();
        assert!((s0 - 1.0).abs() < 1e-12);
        let s1: f64 = v.row(1).iter().map(|x| x.exp()).sum();
        assert!((s1 - 1.0).abs() < 1e-12);
    }

    /// Exercises every op in one composite against central differences.
    #[test]
    fn every_op_matches_finite_differences() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ps = ParamStore::new();
            let w = ps.add("w", 3, 4, 3, &mut rng);
            let b = ps.add("b", 1, 4, 3, &mut rng);
            let c = ps.add("c", 5, 1, 1, &mut rng);
            let x = rand_tensor(&mut rng, 5, 3);
            let graph = Arc::new(Graph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (0, 4)]));
            let mask = Arc::new((0..20).map(|i| i % 3 != 1).collect::<Vec<_>>());
            let loss = |t: &mut Tape| -> Var {
                let xv = t.constant(x.clone());
                let (wv, bv, cv) = (t.param(w), t.param(b), t.param(c));
                let h = t.matmul(xv, wv).unwrap();
                let h = t.add_row(h, bv).unwrap();
                let h1 = t.tanh(h);
                let h2 = t.relu(h);
                let h3 = t.neighbor_sum(h1, graph.clone()).unwrap();
                let m = t.mul(h2, h3).unwrap();
                let s = t.sub(m, h1).unwrap();
                let s = t.add(s, h2).unwrap();
                let s = t.mul_col(s, cv).unwrap();
                let lp = t.masked_log_softmax(s, mask.clone()).unwrap();
                let sl = t.slice_cols(lp, 1, 2).unwrap();
                let cat = t.concat_cols(&[sl, h1]).unwrap();
                let e = t.exp(cat);
                let e = t.scale(e, 0.5);
                let q = t.matmul_bt(e, cat).unwrap();
                let q = t.clamp(q, -0.8, 0.8);
                let sq = t.mul(q, q).unwrap();
                let mn = t.min(q, sq).unwrap();
                let g = t.gather_cols(mn, vec![0, 4, 2, 1, 3]).unwrap();
                let sc = t.sum_cols(mn);
                let l1 = t.mul(g, sc).unwrap();
                let pos = t.exp(l1);
                let lg = t.log(pos);
                let total = t.mean_all(lg);
                let extra = t.sum_all(cv);
                let out = t.add(total, extra).unwrap();
                out
            };
            let err = check_gradients(&ps, loss, 1e-5);
            assert!(err < 1e-4, "seed {seed}: relative error {err}");
        }
    }
}
