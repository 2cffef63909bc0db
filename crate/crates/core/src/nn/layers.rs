use std::sync::Arc;

use rand::Rng;

use super::graph::Graph;
use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::domain::{RegBits, REG_DIM};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

fn activate(t: &mut Tape, x: Var, a: Activation) -> Var {
    match a {
        Activation::Relu => t.relu(x),
        Activation::Tanh => t.tanh(x),
        Activation::Linear => x,
    }
}

/// x·W + b.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut R) -> Self {
        let w = ps.add(&format!("{name}.w"), in_dim, out_dim, in_dim, rng);
        let b = bias.then(|| ps.add(&format!("{name}.b"), 1, out_dim, in_dim, rng));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let w = t.param(self.w);
        let y = t.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Affine layers with ReLU between them and a configurable final activation.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub output: Activation,
}

impl Mlp {
    /// `dims` = [input, hidden..., output].
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, dims: &[usize], output: Activation, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(ps, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, output }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let (_, c) = t.shape(x);
        if c != self.layers[0].in_dim {
            return Err(Error::Shape(format!(
                "MLP expects {} inputs, got {c}",
                self.layers[0].in_dim
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(t, h)?;
            h = activate(t, h, if i == last { self.output } else { Activation::Relu });
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }
}

/// h_i' = ReLU(W · mean(h_i, h_j for j ∈ N(i)) + b). Averaging over the closed
/// neighborhood keeps embedding scale independent of degree and depth.
#[derive(Clone, Debug)]
pub struct GnnLayer {
    pub lin: Linear,
}

impl GnnLayer {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            lin: Linear::new(ps, name, in_dim, out_dim, true, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape, graph: &Arc<Graph>, h: Var) -> Result<Var> {
        // Mean over the closed neighbourhood keeps magnitudes stable across layers.
        let nb = t.neighbor_sum(h, graph.clone())?;
        let closed = t.add(h, nb)?;
        let inv = t.constant(Tensor::from_vec(
            graph.node_count(),
            1,
            graph.degrees().iter().map(|&d| 1.0 / (d + 1) as f64).collect(),
        )?);
        let agg = t.mul_col(closed, inv)?;
        let y = self.lin.forward(t, agg)?;
        Ok(t.relu(y))
    }
}

/// Sum of learned rows E_r[j] over the set regulatory bits.
#[derive(Clone, Debug)]
pub struct RegEmbedding {
    pub table: ParamId,
    pub dim: usize,
}

impl RegEmbedding {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        Self {
            table: ps.add(&format!("{name}.table"), REG_DIM, dim, REG_DIM, rng),
            dim,
        }
    }

    /// 0/1 indicator matrix, one row per parcel.
    pub fn indicator_matrix(bits: &[RegBits]) -> Tensor {
        let mut m = Tensor::zeros(bits.len(), REG_DIM);
        for (i, b) in bits.iter().enumerate() {
            for j in b.iter_ones() {
                m.set(i, j, 1.0);
            }
        }
        m
    }

    /// `indicators` is an n×127 0/1 constant.
    pub fn forward(&self, t: &mut Tape, indicators: Var) -> Result<Var> {
        let (_, c) = t.shape(indicators);
        if c != REG_DIM {
            return Err(Error::Shape(format!("regulatory vector of width {c}, expected {REG_DIM}")));
        }
        let e = t.param(self.table);
        t.matmul(indicators, e)
    }
}

/// Row-wise softmax with every entry legal.
fn softmax_rows(t: &mut Tape, x: Var) -> Result<Var> {
    let (r, c) = t.shape(x);
    let lp = t.masked_log_softmax(x, Arc::new(vec![true; r * c]))?;
    Ok(t.exp(lp))
}

/// softmax(Q·Kᵀ/√d_k)·V; returns (output, weights).
pub fn scaled_dot_attention(t: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dk = t.shape(q).1;
    if t.shape(k).0 != t.shape(v).0 {
        return Err(Error::Shape("keys and values differ in count".into()));
    }
    let s = t.matmul_bt(q, k)?;
    let s = t.scale(s, 1.0 / (dk as f64).sqrt());
    let a = softmax_rows(t, s)?;
    let out = t.matmul(a, v)?;
    Ok((out, a))
}

/// Coordination weights α = softmax(q·k_iᵀ/√d) for a batch of queries
/// (B×d) against agent keys (m×d); returns B×m.
pub fn coordination_weights(t: &mut Tape, q: Var, keys: Var) -> Result<Var> {
    let d = t.shape(q).1;
    let s = t.matmul_bt(q, keys)?;
    let s = t.scale(s, 1.0 / (d as f64).sqrt());
    softmax_rows(t, s)
}

/// Multi-head self-attention among a fixed set of T tokens per row: every
/// row (parcel) attends only over its own tokens.
#[derive(Clone, Debug)]
pub struct TokenAttention {
    pub heads: usize,
    pub dim: usize,
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: Linear,
}

pub struct AttentionOutput {
    /// One n×dim output per token.
    pub tokens: Vec<Var>,
    /// n×T attention each token receives, averaged over heads and queries.
    pub received: Var,
}

impl TokenAttention {
    pub fn new<R: Rng + ?Sized>(ps: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim must split evenly across heads");
        let dk = dim / heads;
        let mut mk = |tag: &str| -> Vec<ParamId> {
            (0..heads)
                .map(|h| ps.add(&format!("{name}.{tag}{h}"), dim, dk, dim, rng))
                .collect()
        };
        let (wq, wk, wv) = (mk("q"), mk("k"), mk("v"));
        let wo = Linear::new(ps, &format!("{name}.o"), dim, dim, false, rng);
        Self {
            heads,
            dim,
            wq,
            wk,
            wv,
            wo,
        }
    }

    pub fn forward(&self, t: &mut Tape, tokens: &[Var]) -> Result<AttentionOutput> {
        let nt = tokens.len();
        let dk = self.dim / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut head_outs: Vec<Vec<Var>> = vec![Vec::with_capacity(self.heads); nt];
        let mut received: Option<Var> = None;
        for h in 0..self.heads {
            let (wq, wk, wv) = (t.param(self.wq[h]), t.param(self.wk[h]), t.param(self.wv[h]));
            let mut qs = Vec::with_capacity(nt);
            let mut ks = Vec::with_capacity(nt);
            let mut vs = Vec::with_capacity(nt);
            for &x in tokens {
                qs.push(t.matmul(x, wq)?);
                ks.push(t.matmul(x, wk)?);
                vs.push(t.matmul(x, wv)?);
            }
            for (ti, &q) in qs.iter().enumerate() {
                let mut scores = Vec::with_capacity(nt);
                for &k in &ks {
                    let qk = t.mul(q, k)?;
                    let s = t.sum_cols(qk);
                    scores.push(t.scale(s, scale));
                }
                let logits = t.concat_cols(&scores)?;
                let alpha = softmax_rows(t, logits)?;
                received = Some(match received {
                    None => alpha,
                    Some(acc) => t.add(acc, alpha)?,
                });
                let mut out: Option<Var> = None;
                for (u, &v) in vs.iter().enumerate() {
                    let a = t.slice_cols(alpha, u, 1)?;
                    let term = t.mul_col(v, a)?;
                    out = Some(match out {
                        None => term,
                        Some(o) => t.add(o, term)?,
                    });
                }
                head_outs[ti].push(out.expect("at least one token"));
            }
        }
        let mut outs = Vec::with_capacity(nt);
        for parts in head_outs {
            let cat = t.concat_cols(&parts)?;
            outs.push(self.wo.forward(t, cat)?);
        }
        let received = t.scale(received.expect("at least one head"), 1.0 / (self.heads * nt) as f64);
        Ok(AttentionOutput {
            tokens: outs,
            received,
        })
    }
}
