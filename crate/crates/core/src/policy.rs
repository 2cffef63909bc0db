//! Preference-conditioned site-selection policy.
//!
//! Stage one encodes every parcel from four feature groups (regulatory,
//! accessibility, cost, environment), fused by per-parcel multi-head
//! attention; a message-passing network over the parcel graph adds spatial
//! context. Stage two scores every parcel for a batch of states: a trunk
//! reads the state context and three agents (spatial, encoder, market cost)
//! propose logits, blended by coordination weights, then masked.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{geo, regbit, CityInstance, PortfolioState, PreferenceVector, GEO_DIM};
use crate::error::{Error, Result};
use crate::nn::layers::{coordination_weights, Activation, GnnLayer, Linear, Mlp, RegEmbedding, TokenAttention};
use crate::nn::{Graph, ParamId, ParamStore, Tape, Tensor, Var};

/// Number of factor groups the encoder attends over.
pub const FACTOR_GROUPS: usize = 4;
pub const FACTOR_NAMES: [&str; FACTOR_GROUPS] = ["regulatory", "accessibility", "cost", "environment"];
/// Per-parcel, per-state market features read by the cost agent.
pub const MARKET_FEATURES: usize = 3;
const AGENTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub token_dim: usize,
    pub reg_dim: usize,
    pub heads: usize,
    pub gnn_dim: usize,
    pub gnn_layers: usize,
    /// Trunk hidden sizes; the last one is the width of the trunk output.
    pub trunk_hidden: Vec<usize>,
    pub value_hidden: Vec<usize>,
    /// When false the encoder averages its factor tokens instead of attending.
    pub attention: bool,
    /// Target median degree of the parcel graph.
    pub graph_degree: usize,
}

impl PolicyConfig {
    pub fn desk() -> Self {
        Self {
            token_dim: 16,
            reg_dim: 32,
            heads: 4,
            gnn_dim: 16,
            gnn_layers: 4,
            trunk_hidden: vec![64, 32],
            value_hidden: vec![64, 32],
            attention: true,
            graph_degree: 8,
        }
    }

    pub fn paper() -> Self {
        Self {
            token_dim: 128,
            reg_dim: 32,
            heads: 4,
            gnn_dim: 128,
            gnn_layers: 4,
            trunk_hidden: vec![512, 256, 128],
            value_hidden: vec![512, 256],
            attention: true,
            graph_degree: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.token_dim == 0 || self.gnn_dim == 0 || self.reg_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.heads == 0 || !self.token_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "token_dim {} is not divisible by {} heads",
                self.token_dim, self.heads
            )));
        }
        if self.trunk_hidden.is_empty() || self.trunk_hidden.contains(&0) || self.value_hidden.contains(&0) {
            return Err(Error::Config("trunk needs at least one nonzero hidden width".into()));
        }
        Ok(())
    }
}

/// Standardized static features of one city, shared by all policies.
#[derive(Clone, Debug)]
pub struct CityFeatures {
    pub n: usize,
    pub districts: usize,
    pub capacity: usize,
    pub budget: f64,
    pub reg_bits: Tensor,
    pub demographics: Tensor,
    pub access: Tensor,
    pub cost: Tensor,
    pub env: Tensor,
    /// Full geospatial block plus district one-hot, input of the graph network.
    pub geo: Tensor,
    /// Compact static description used for portfolio means in the value input.
    pub summary: Tensor,
    pub graph: Arc<Graph>,
    appraised: Vec<f64>,
    base_cost: Vec<f64>,
}

fn standardize(cols: &[Vec<f64>]) -> Tensor {
    let n = cols.first().map_or(0, Vec::len);
    let mut t = Tensor::zeros(n, cols.len());
    for (c, col) in cols.iter().enumerate() {
        let mean = col.iter().sum::<f64>() / n.max(1) as f64;
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64).sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        for (i, v) in col.iter().enumerate() {
            t.set(i, c, (v - mean) / sd);
        }
    }
    t
}

fn hstack(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].rows;
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let mut off = 0;
        for p in parts {
            out.row_mut(r)[off..off + p.cols].copy_from_slice(p.row(r));
            off += p.cols;
        }
    }
    out
}

impl CityFeatures {
    pub fn new(city: &CityInstance, graph_degree: usize) -> Self {
        let ps = &city.parcels;
        let col = |f: &dyn Fn(&crate::domain::Parcel) -> f64| -> Vec<f64> { ps.iter().map(f).collect() };
        let ln = |v: f64| v.max(1e-9).ln();
        let bit = |b: bool| if b { 1.0 } else { 0.0 };

        let access = standardize(&[
            col(&|p| p.walk_score()),
            col(&|p| p.job_proximity()),
            col(&|p| p.geo[geo::TRANSIT_STOPS_800M]),
            col(&|p| p.geo[geo::SCHOOL_PROXIMITY]),
            col(&|p| p.geo[geo::INFRA_CONNECTIVITY]),
        ]);
        let cost = standardize(&[
            col(&|p| ln(p.land_cost())),
            col(&|p| ln(p.construction_cost())),
            col(&|p| ln(p.appraised_cost())),
            col(&|p| ln(p.area_m2())),
            col(&|p| bit(p.reg.get(regbit::DDA))),
        ]);
        let env = standardize(&[
            col(&|p| ln(p.carbon_footprint())),
            col(&|p| p.green_space()),
            col(&|p| bit(p.flood_zone())),
            col(&|p| bit(p.reg.get(regbit::FLOOD_MITIGATION))),
            col(&|p| p.air_quality()),
            col(&|p| p.geo[geo::SOIL_QUALITY]),
        ]);
        let logged = [
            geo::AREA_M2,
            geo::CARBON_FOOTPRINT,
            geo::LAND_COST,
            geo::CONSTRUCTION_COST,
            geo::POPULATION_DENSITY,
        ];
        let geo_cols: Vec<Vec<f64>> = (0..GEO_DIM)
            .map(|j| {
                if logged.contains(&j) {
                    col(&|p| ln(p.geo[j]))
                } else {
                    col(&|p| p.geo[j])
                }
            })
            .collect();
        let d = city.districts as usize;
        let mut onehot = Tensor::zeros(ps.len(), d);
        for (i, p) in ps.iter().enumerate() {
            onehot.set(i, p.district_id as usize, 1.0);
        }
        let geo_t = hstack(&[&standardize(&geo_cols), &onehot]);
        let demographics = Tensor::from_rows(
            &ps.iter()
                .map(|p| {
                    vec![
                        bit(p.is_qct()),
                        bit(p.demographics.minority_tract),
                        bit(p.demographics.low_income_tract),
                    ]
                })
                .collect::<Vec<_>>(),
        )
        .expect("rectangular");
        let summary = hstack(&[&access, &cost, &env, &demographics]);
        let bits: Vec<_> = ps.iter().map(|p| p.reg).collect();
        Self {
            n: ps.len(),
            districts: d,
            capacity: city.portfolio_capacity,
            budget: city.budget_total,
            reg_bits: RegEmbedding::indicator_matrix(&bits),
            demographics,
            access,
            cost,
            env,
            geo: geo_t,
            summary,
            graph: Arc::new(Graph::distance_threshold(city, graph_degree)),
            appraised: ps.iter().map(|p| p.appraised_cost()).collect(),
            base_cost: ps.iter().map(|p| p.base_cost()).collect(),
        }
    }

    /// Width of the fixed part of the state context.
    pub fn context_dim(&self) -> usize {
        9 + self.districts
    }

    pub fn value_input_dim(&self) -> usize {
        self.context_dim() + self.summary.cols
    }

    /// Build the policy and value inputs for one state.
    pub fn state_input(&self, state: &PortfolioState, pref: &PreferenceVector, mask: Vec<bool>) -> StateInput {
        let k = self.capacity as f64;
        let b = self.budget;
        let spent: f64 = state.selected.iter().map(|id| self.appraised[id.index()]).sum();
        let mut taken = vec![false; self.n];
        for id in &state.selected {
            taken[id.index()] = true;
        }
        let free = self.n - state.selected.len();
        let mean_log_mult = state
            .dyn_snapshot
            .iter()
            .zip(&taken)
            .filter(|(_, t)| !**t)
            .map(|(m, _)| m.ln())
            .sum::<f64>()
            / free.max(1) as f64;
        let mut ctx = Vec::with_capacity(self.context_dim());
        ctx.extend_from_slice(&pref.weights);
        ctx.push(state.step_index as f64 / k);
        ctx.push(spent / b);
        ctx.push(state.cumulative_cost / b);
        ctx.push(if state.selected.is_empty() {
            0.0
        } else {
            state.minority_count as f64 / state.selected.len() as f64
        });
        ctx.extend(state.district_counts.iter().map(|&c| c as f64 / k));
        ctx.push(5.0 * mean_log_mult);
        debug_assert_eq!(ctx.len(), self.context_dim());

        let remaining = b - spent;
        let mut market: [Vec<f64>; MARKET_FEATURES] = std::array::from_fn(|_| Vec::with_capacity(self.n));
        for i in 0..self.n {
            let m = state.dyn_snapshot[i];
            market[0].push(5.0 * m.ln());
            market[1].push(if remaining > 0.0 {
                (self.appraised[i] / remaining).min(3.0)
            } else {
                3.0
            });
            market[2].push(self.base_cost[i] * m * k / b);
        }

        let mut value = ctx.clone();
        let mut pooled = vec![0.0; self.summary.cols];
        for id in &state.selected {
            for (acc, v) in pooled.iter_mut().zip(self.summary.row(id.index())) {
                *acc += v / state.selected.len() as f64;
            }
        }
        value.extend(pooled);
        StateInput {
            ctx,
            selected: state.selected.iter().map(|id| id.0).collect(),
            market,
            mask,
            value,
        }
    }
}

/// Everything the policy and value net read from one state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateInput {
    pub ctx: Vec<f64>,
    pub selected: Vec<u32>,
    pub market: [Vec<f64>; MARKET_FEATURES],
    pub mask: Vec<bool>,
    pub value: Vec<f64>,
}

/// Dense tensors for a batch of states.
#[derive(Clone, Debug)]
pub struct StateBatch {
    pub size: usize,
    pub ctx: Tensor,
    /// Row b averages the embeddings of state b's selected parcels.
    pub sel: Tensor,
    pub market: Vec<Tensor>,
    pub mask: Arc<Vec<bool>>,
}

impl StateBatch {
    pub fn new(inputs: &[&StateInput], n: usize) -> Result<Self> {
        let b = inputs.len();
        if b == 0 {
            return Err(Error::Shape("empty state batch".into()));
        }
        let c = inputs[0].ctx.len();
        let mut ctx = Tensor::zeros(b, c);
        let mut sel = Tensor::zeros(b, n);
        let mut market: Vec<Tensor> = (0..MARKET_FEATURES).map(|_| Tensor::zeros(b, n)).collect();
        let mut mask = Vec::with_capacity(b * n);
        for (r, s) in inputs.iter().enumerate() {
            if s.ctx.len() != c || s.mask.len() != n {
                return Err(Error::Shape("inconsistent state inputs".into()));
            }
            ctx.row_mut(r).copy_from_slice(&s.ctx);
            for &id in &s.selected {
                sel.set(r, id as usize, 1.0 / s.selected.len() as f64);
            }
            for (m, src) in market.iter_mut().zip(&s.market) {
                m.row_mut(r).copy_from_slice(src);
            }
            mask.extend_from_slice(&s.mask);
        }
        Ok(Self {
            size: b,
            ctx,
            sel,
            market,
            mask: Arc::new(mask),
        })
    }

    pub fn mask_tensor(&self) -> Tensor {
        let n = self.sel.cols;
        Tensor::from_vec(
            self.size,
            n,
            self.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
        )
        .expect("mask matches batch")
    }
}

/// Parcel embeddings on a tape.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// Fused factor embedding, n × token_dim.
    pub fused: Var,
    /// Graph embedding, n × gnn_dim.
    pub spatial: Var,
    /// Attention each factor group receives, n × 4 (absent without attention).
    pub received: Option<Var>,
}

/// Parcel embeddings as plain values, reused across a rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedValues {
    pub fused: Tensor,
    pub spatial: Tensor,
    pub received: Tensor,
}

pub struct HeadOutput {
    /// B × n masked log-probabilities (0 at illegal entries).
    pub logp: Var,
    /// B × 3 coordination weights over the agents.
    pub agent_weights: Var,
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub pref: PreferenceVector,
    pub params: ParamStore,
    reg_embedding: RegEmbedding,
    reg_token: Linear,
    access_token: Mlp,
    cost_token: Mlp,
    env_token: Mlp,
    attention: TokenAttention,
    gnn_input: Linear,
    gnn: Vec<GnnLayer>,
    trunk: Mlp,
    geo_agent: Linear,
    encoder_agent: Linear,
    cost_agent: Linear,
    agent_keys: ParamId,
}

impl Policy {
    pub fn new(config: PolicyConfig, pref: PreferenceVector, feats: &CityFeatures, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let mut ps = ParamStore::new();
        let d = config.token_dim;
        let g = config.gnn_dim;
        let reg_embedding = RegEmbedding::new(&mut ps, "reg", config.reg_dim, rng);
        let reg_token = Linear::new(&mut ps, "tok.reg", config.reg_dim + feats.demographics.cols, d, true, rng);
        let access_token = Mlp::new(&mut ps, "tok.access", &[feats.access.cols, d, d], Activation::Linear, rng);
        let cost_token = Mlp::new(&mut ps, "tok.cost", &[feats.cost.cols, d, d], Activation::Linear, rng);
        let env_token = Mlp::new(&mut ps, "tok.env", &[feats.env.cols, d, d], Activation::Linear, rng);
        let attention = TokenAttention::new(&mut ps, "attn", d, config.heads, rng);
        let gnn_input = Linear::new(&mut ps, "gnn.in", feats.geo.cols, g, true, rng);
        let gnn = (0..config.gnn_layers)
            .map(|l| GnnLayer::new(&mut ps, &format!("gnn.{l}"), g, g, rng))
            .collect();
        let mut dims = vec![feats.context_dim() + d + g];
        dims.extend(&config.trunk_hidden);
        let trunk = Mlp::new(&mut ps, "trunk", &dims, Activation::Tanh, rng);
        let h = trunk.out_dim();
        let geo_agent = Linear::new(&mut ps, "agent.geo", h, g, false, rng);
        let encoder_agent = Linear::new(&mut ps, "agent.enc", h, d, false, rng);
        let cost_agent = Linear::new(&mut ps, "agent.cost", h, MARKET_FEATURES, false, rng);
        let agent_keys = ps.add("agent.keys", AGENTS, h, h, rng);
        Ok(Self {
            config,
            pref,
            params: ps,
            reg_embedding,
            reg_token,
            access_token,
            cost_token,
            env_token,
            attention,
            gnn_input,
            gnn,
            trunk,
            geo_agent,
            encoder_agent,
            cost_agent,
            agent_keys,
        })
    }

    /// Stage one: per-parcel embeddings.
    pub fn encode(&self, t: &mut Tape, feats: &CityFeatures) -> Result<Encoded> {
        let bits = t.constant(feats.reg_bits.clone());
        let reg = self.reg_embedding.forward(t, bits)?;
        let demo = t.constant(feats.demographics.clone());
        let reg_in = t.concat_cols(&[reg, demo])?;
        let reg_tok = self.reg_token.forward(t, reg_in)?;
        let access = t.constant(feats.access.clone());
        let access_tok = self.access_token.forward(t, access)?;
        let cost = t.constant(feats.cost.clone());
        let cost_tok = self.cost_token.forward(t, cost)?;
        let env = t.constant(feats.env.clone());
        let env_tok = self.env_token.forward(t, env)?;
        let tokens = [reg_tok, access_tok, cost_tok, env_tok];

        let (fused_sum, received) = if self.config.attention {
            let out = self.attention.forward(t, &tokens)?;
            let mut acc = out.tokens[0];
            for &x in &out.tokens[1..] {
                acc = t.add(acc, x)?;
            }
            (acc, Some(out.received))
        } else {
            let mut acc = tokens[0];
            for &x in &tokens[1..] {
                acc = t.add(acc, x)?;
            }
            (acc, None)
        };
        let fused = t.scale(fused_sum, 1.0 / FACTOR_GROUPS as f64);

        let geo_in = t.constant(feats.geo.clone());
        let h0 = self.gnn_input.forward(t, geo_in)?;
        let mut h = t.relu(h0);
        for layer in &self.gnn {
            h = layer.forward(t, &feats.graph, h)?;
        }
        Ok(Encoded {
            fused,
            spatial: h,
            received,
        })
    }

    pub fn encode_values(&self, feats: &CityFeatures) -> Result<EncodedValues> {
        let mut t = Tape::new(&self.params);
        let enc = self.encode(&mut t, feats)?;
        let received = match enc.received {
            Some(r) => t.value(r).clone(),
            None => Tensor::filled(feats.n, FACTOR_GROUPS, 1.0 / FACTOR_GROUPS as f64),
        };
        Ok(EncodedValues {
            fused: t.value(enc.fused).clone(),
            spatial: t.value(enc.spatial).clone(),
            received,
        })
    }

    /// Place precomputed embeddings on a tape as constants.
    pub fn encoded_constants(t: &mut Tape, ev: &EncodedValues) -> Encoded {
        Encoded {
            fused: t.constant(ev.fused.clone()),
            spatial: t.constant(ev.spatial.clone()),
            received: None,
        }
    }

    /// Stage two: masked log-probabilities over parcels for a batch of states.
    pub fn head(&self, t: &mut Tape, enc: &Encoded, batch: &StateBatch) -> Result<HeadOutput> {
        let (n, _) = t.shape(enc.fused);
        if batch.sel.cols != n {
            return Err(Error::Shape(format!("batch over {} parcels, city has {n}", batch.sel.cols)));
        }
        let ctx = t.constant(batch.ctx.clone());
        let sel = t.constant(batch.sel.clone());
        let z = t.concat_cols(&[enc.fused, enc.spatial])?;
        let pooled = t.matmul(sel, z)?;
        let input = t.concat_cols(&[ctx, pooled])?;
        let q = self.trunk.forward(t, input)?;

        let qg = self.geo_agent.forward(t, q)?;
        let s_geo = t.matmul_bt(qg, enc.spatial)?;
        let s_geo = t.scale(s_geo, 1.0 / (self.config.gnn_dim as f64).sqrt());
        let qf = self.encoder_agent.forward(t, q)?;
        let s_enc = t.matmul_bt(qf, enc.fused)?;
        let s_enc = t.scale(s_enc, 1.0 / (self.config.token_dim as f64).sqrt());
        let u = self.cost_agent.forward(t, q)?;
        let mut s_cost: Option<Var> = None;
        for (c, m) in batch.market.iter().enumerate() {
            let x = t.constant(m.clone());
            let w = t.slice_cols(u, c, 1)?;
            let term = t.mul_col(x, w)?;
            s_cost = Some(match s_cost {
                None => term,
                Some(acc) => t.add(acc, term)?,
            });
        }
        let s_cost = s_cost.expect("market features");

        let keys = t.param(self.agent_keys);
        let alpha = coordination_weights(t, q, keys)?;
        let mut logits: Option<Var> = None;
        for (a, s) in [s_geo, s_enc, s_cost].into_iter().enumerate() {
            let w = t.slice_cols(alpha, a, 1)?;
            let term = t.mul_col(s, w)?;
            logits = Some(match logits {
                None => term,
                Some(acc) => t.add(acc, term)?,
            });
        }
        let logp = t.masked_log_softmax(logits.expect("agents"), batch.mask.clone())?;
        Ok(HeadOutput {
            logp,
            agent_weights: alpha,
        })
    }

    /// Log-probabilities for a batch with fixed (precomputed) embeddings.
    pub fn log_probs(&self, ev: &EncodedValues, batch: &StateBatch) -> Result<Tensor> {
        let mut t = Tape::new(&self.params);
        let enc = Self::encoded_constants(&mut t, ev);
        let out = self.head(&mut t, &enc, batch)?;
        Ok(t.value(out.logp).clone())
    }

    /// Per-parcel attention shares of the four factor groups (rows sum to 1).
    pub fn factor_attention(&self, feats: &CityFeatures) -> Result<Tensor> {
        Ok(self.encode_values(feats)?.received)
    }

    pub fn write_checkpoint<W: std::io::Write>(&self, w: W) -> Result<()> {
        self.params.write_checkpoint(w)
    }

    /// Rebuild a policy with the given architecture and load its weights.
    pub fn load<R: std::io::Read>(
        config: PolicyConfig,
        pref: PreferenceVector,
        feats: &CityFeatures,
        r: R,
    ) -> Result<Self> {
        let mut p = Self::new(config, pref, feats, 0)?;
        let stored = ParamStore::read_checkpoint(r)?;
        p.params.load_from(&stored)?;
        Ok(p)
    }
}

/// Index of the largest legal entry of each row, lowest index on ties.
pub fn masked_argmax(logp: &Tensor, mask: &[bool]) -> Vec<Option<usize>> {
    (0..logp.rows)
        .map(|r| {
            let mut best: Option<(usize, f64)> = None;
            for (c, &v) in logp.row(r).iter().enumerate() {
                if mask[r * logp.cols + c] && best.is_none_or(|(_, b)| v > b) {
                    best = Some((c, v));
                }
            }
            best.map(|(c, _)| c)
        })
        .collect()
}

/// State-value estimator V^λ for one policy.
#[derive(Clone, Debug)]
pub struct ValueNet {
    pub params: ParamStore,
    mlp: Mlp,
}

impl ValueNet {
    pub fn new(in_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::new();
        let mut dims = vec![in_dim];
        dims.extend(hidden);
        dims.push(1);
        let mlp = Mlp::new(&mut ps, "value", &dims, Activation::Linear, &mut rng);
        Self { params: ps, mlp }
    }

    pub fn forward(&self, t: &mut Tape, x: Var) -> Result<Var> {
        self.mlp.forward(t, x)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut t = Tape::new(&self.params);
        let xv = t.constant(x.clone());
        let y = self.forward(&mut t, xv)?;
        Ok(t.value(y).data.clone())
    }

    /// Mean squared error against `targets` and its gradients.
    pub fn mse_grads(&self, x: &Tensor, targets: &[f64]) -> Result<(f64, crate::nn::Grads)> {
        let mut t = Tape::new(&self.params);
        let xv = t.constant(x.clone());
        let y = self.forward(&mut t, xv)?;
        let target = t.constant(Tensor::from_vec(targets.len(), 1, targets.to_vec())?);
        let diff = t.sub(y, target)?;
        let sq = t.mul(diff, diff)?;
        let loss = t.mean_all(sq);
        let value = t.value(loss).data[0];
        Ok((value, t.backward(loss)?))
    }
}
