//! Sequential site-selection MDP: one parcel per step for K steps.
//!
//! Rewards are per-step increments of [`reward_vector`], so an episode's
//! return telescopes to the terminal portfolio value; the discounted future
//! bonus is added on the final step.
//!
//! Between steps every unselected parcel's price multiplier drifts by a
//! mean-one lognormal shock (standard normal draw clamped to ±2). Drift
//! changes what the portfolio actually costs, and so the cost reward, but
//! compliance is judged on appraised cost, so the action mask is exact: a
//! parcel is legal iff some completion of the portfolio satisfies every
//! enabled constraint.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintRegistry;
use crate::domain::{CityInstance, ObjectiveVector, ParcelId, PortfolioState};
use crate::error::{Error, Result};
use crate::reward::{gini_unchecked, reward_vector, terminal_bonus, RewardParams};

/// Yearly price volatility; gives ±12–18% moves at one sigma.
pub const DEFAULT_VOLATILITY: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub volatility: f64,
    /// When false every unselected parcel is a legal action and compliance
    /// is left to the penalty term.
    pub masking: bool,
    pub reward: RewardParams,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            volatility: DEFAULT_VOLATILITY,
            masking: true,
            reward: RewardParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next_state: PortfolioState,
    pub reward: ObjectiveVector,
    pub done: bool,
    /// Legal actions in `next_state` (all false once done).
    pub mask: Vec<bool>,
}

/// One line of an exported episode trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub step: usize,
    pub action: ParcelId,
    pub reward: ObjectiveVector,
    pub mask_size: usize,
    pub cumulative_cost: f64,
    pub summary: Vec<f64>,
}

pub struct Environment<'a> {
    pub city: &'a CityInstance,
    pub registry: &'a ConstraintRegistry,
    pub config: EnvConfig,
    /// Terminal requirements pulled from the registry.
    district_min: Vec<u32>,
    minority_needed: u32,
    gini_max: Option<f64>,
}

impl<'a> Environment<'a> {
    pub fn new(city: &'a CityInstance, registry: &'a ConstraintRegistry, config: EnvConfig) -> Result<Self> {
        config.reward.validate(city)?;
        if !(config.volatility >= 0.0 && config.volatility.is_finite()) {
            return Err(Error::Config(format!("volatility {} must be >= 0", config.volatility)));
        }
        if registry.parcel_count() != city.n() {
            return Err(Error::Config("registry was built for a different city".into()));
        }
        let req = registry.terminal_requirements();
        let k = city.portfolio_capacity;
        let minority_needed = match req.minority_share {
            Some(min) => (0..=k as u32)
                .find(|&m| m as f64 / k as f64 >= min)
                .unwrap_or(k as u32 + 1),
            None => 0,
        };
        Ok(Self {
            city,
            registry,
            config,
            district_min: req.district_min,
            minority_needed,
            gini_max: req.gini_max,
        })
    }

    pub fn capacity(&self) -> usize {
        self.city.portfolio_capacity
    }

    /// Empty portfolio at the city's initial prices. The seed is accepted for
    /// interface symmetry; the initial market is the city's snapshot.
    pub fn reset(&self, _seed: u64) -> PortfolioState {
        PortfolioState::empty(self.city)
    }

    /// Validated step. Unknown, duplicate or masked parcels are rejected.
    pub fn step<R: Rng + ?Sized>(&self, state: &PortfolioState, id: ParcelId, rng: &mut R) -> Result<StepOutcome> {
        let mask = self.action_mask(state);
        if id.index() >= self.city.n() {
            return Err(Error::InvalidAction(format!("unknown parcel {id}")));
        }
        if !mask[id.index()] {
            return Err(Error::InvalidAction(format!("parcel {id} is not a legal action")));
        }
        let (next_state, reward, done) = self.advance(state, id, rng);
        let mask = if done {
            vec![false; self.city.n()]
        } else {
            self.action_mask(&next_state)
        };
        Ok(StepOutcome {
            next_state,
            reward,
            done,
            mask,
        })
    }

    /// Unvalidated transition used by rollouts that already hold the mask.
    pub fn advance<R: Rng + ?Sized>(
        &self,
        state: &PortfolioState,
        id: ParcelId,
        rng: &mut R,
    ) -> (PortfolioState, ObjectiveVector, bool) {
        let params = &self.config.reward;
        let before = reward_vector(self.city, params, state);
        let mut next = state.clone();
        next.push(self.city, id);
        let after = reward_vector(self.city, params, &next);
        let done = next.step_index >= self.capacity();
        let mut reward = after - before;
        if done {
            reward = reward + terminal_bonus(self.city, params, &next.selected);
        } else {
            self.drift(&mut next, rng);
        }
        (next, reward, done)
    }

    fn drift<R: Rng + ?Sized>(&self, state: &mut PortfolioState, rng: &mut R) {
        let s = self.config.volatility;
        if s == 0.0 {
            return;
        }
        let mut chosen = vec![false; self.city.n()];
        for id in &state.selected {
            chosen[id.index()] = true;
        }
        for (m, taken) in state.dyn_snapshot.iter_mut().zip(chosen) {
            let z: f64 = StandardNormal.sample(rng);
            if !taken {
                *m *= (s * z.clamp(-2.0, 2.0) - 0.5 * s * s).exp();
            }
        }
    }

    /// Legal actions from `state`.
    pub fn action_mask(&self, state: &PortfolioState) -> Vec<bool> {
        let n = self.city.n();
        let mut taken = vec![false; n];
        for id in &state.selected {
            taken[id.index()] = true;
        }
        if state.step_index >= self.capacity() {
            return vec![false; n];
        }
        if !self.config.masking {
            return taken.iter().map(|t| !t).collect();
        }
        let pool: Vec<ParcelId> = self
            .city
            .parcels
            .iter()
            .map(|p| p.id)
            .filter(|&id| !taken[id.index()] && self.registry.parcel_admissible(id))
            .collect();
        let mut mask = vec![false; n];
        let plan = Completion::new(self, state, &pool);
        for &id in &pool {
            mask[id.index()] = plan.admits(self, state, id);
        }
        mask
    }

    /// Return of a full episode under `policy_fn` (used by tests and tools).
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        rng: &mut R,
        mut choose: impl FnMut(&PortfolioState, &[bool], &mut R) -> ParcelId,
    ) -> Result<(PortfolioState, Vec<TraceStep>)> {
        let mut state = self.reset(0);
        let mut trace = Vec::with_capacity(self.capacity());
        loop {
            let mask = self.action_mask(&state);
            let legal = mask.iter().filter(|&&m| m).count();
            if legal == 0 {
                return Err(Error::Infeasible(format!(
                    "no legal action at step {}",
                    state.step_index
                )));
            }
            let id = choose(&state, &mask, rng);
            if !mask.get(id.index()).copied().unwrap_or(false) {
                return Err(Error::InvalidAction(format!("parcel {id} is not a legal action")));
            }
            let (next, reward, done) = self.advance(&state, id, rng);
            trace.push(TraceStep {
                step: state.step_index,
                action: id,
                reward,
                mask_size: legal,
                cumulative_cost: next.cumulative_cost,
                summary: next.portfolio_summary(self.city),
            });
            state = next;
            if done {
                return Ok((state, trace));
            }
        }
    }
}

/// Write an episode trace as one JSON object per line.
pub fn write_trace<W: std::io::Write>(trace: &[TraceStep], mut w: W) -> Result<()> {
    for step in trace {
        serde_json::to_writer(&mut w, step).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Minimum-cost completion tables for the reachability test.
///
/// After adding a candidate, `r` slots remain. Parcels fall into classes by
/// (district, minority tract); within a class the cheapest parcels are always
/// the best completion, so only per-class counts matter. `excl[d][u][m]` is
/// the cheapest way to fill `u` slots from districts other than `d` while
/// meeting their minimums, with `m` minority picks (capped at the number
/// still needed).
struct Completion {
    r: usize,
    cap: usize,
    prefix: Vec<[Vec<f64>; 2]>,
    /// excl[d][u][t] = min cost over minority counts >= t.
    excl: Vec<Vec<Vec<f64>>>,
    /// Position of each pool parcel within its class.
    rank: Vec<usize>,
    /// Appraised cost of the current portfolio.
    spent: f64,
}

const INF: f64 = f64::INFINITY;

impl Completion {
    fn new(env: &Environment, state: &PortfolioState, pool: &[ParcelId]) -> Self {
        let city = env.city;
        let d = city.districts as usize;
        let r = env.capacity() - state.step_index - 1;
        let cap = (env.minority_needed as usize).saturating_sub(state.minority_count as usize);
        let mut classes: Vec<[Vec<(f64, ParcelId)>; 2]> = vec![[Vec::new(), Vec::new()]; d];
        for &id in pool {
            let p = &city.parcels[id.index()];
            classes[p.district_id as usize][p.demographics.minority_tract as usize]
                .push((p.appraised_cost(), id));
        }
        let mut rank = vec![usize::MAX; city.n()];
        for c in classes.iter_mut().flatten() {
            c.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for (i, (_, id)) in c.iter().enumerate() {
                rank[id.index()] = i;
            }
        }
        let prefix: Vec<[Vec<f64>; 2]> = classes
            .iter()
            .map(|pair| {
                pair.clone().map(|c| {
                    let mut out = Vec::with_capacity((r + 2).min(c.len() + 1));
                    out.push(0.0);
                    for (cost, _) in c.iter().take(r + 1) {
                        out.push(out.last().unwrap() + cost);
                    }
                    out
                })
            })
            .collect();

        let deficit = |e: usize| env.district_min.get(e).map_or(0, |&m| m.saturating_sub(state.district_counts[e])) as usize;
        // Per-district option tables: opt[u][m] = min cost of u picks with m minority.
        let options: Vec<Vec<Vec<f64>>> = (0..d)
            .map(|e| {
                let mut t = vec![vec![INF; cap + 1]; r + 1];
                let (p0, p1) = (&prefix[e][0], &prefix[e][1]);
                for a in 0..p0.len() {
                    for b in 0..p1.len() {
                        if a + b > r || a + b < deficit(e) {
                            continue;
                        }
                        let cell = &mut t[a + b][b.min(cap)];
                        *cell = cell.min(p0[a] + p1[b]);
                    }
                }
                t
            })
            .collect();
        let unit = {
            let mut t = vec![vec![INF; cap + 1]; r + 1];
            t[0][0] = 0.0;
            t
        };
        let combine = |x: &Vec<Vec<f64>>, y: &Vec<Vec<f64>>| {
            let mut out = vec![vec![INF; cap + 1]; r + 1];
            for u1 in 0..=r {
                for m1 in 0..=cap {
                    let c1 = x[u1][m1];
                    if c1 == INF {
                        continue;
                    }
                    for u2 in 0..=r - u1 {
                        for m2 in 0..=cap {
                            let c2 = y[u2][m2];
                            if c2 == INF {
                                continue;
                            }
                            let cell = &mut out[u1 + u2][(m1 + m2).min(cap)];
                            *cell = cell.min(c1 + c2);
                        }
                    }
                }
            }
            out
        };
        let mut left = vec![unit.clone()];
        for e in 0..d {
            let next = combine(&left[e], &options[e]);
            left.push(next);
        }
        let mut right = vec![unit.clone(); d + 1];
        for e in (0..d).rev() {
            right[e] = combine(&options[e], &right[e + 1]);
        }
        let excl = (0..d)
            .map(|e| {
                let mut t = combine(&left[e], &right[e + 1]);
                for row in &mut t {
                    for m in (0..cap).rev() {
                        row[m] = row[m].min(row[m + 1]);
                    }
                }
                t
            })
            .collect();
        Self {
            r,
            cap,
            prefix,
            excl,
            rank,
            spent: state
                .selected
                .iter()
                .map(|id| city.parcels[id.index()].appraised_cost())
                .sum(),
        }
    }

    fn admits(&self, env: &Environment, state: &PortfolioState, id: ParcelId) -> bool {
        let city = env.city;
        let p = &city.parcels[id.index()];
        let d = p.district_id as usize;
        let own = p.demographics.minority_tract as usize;
        let cost_i = p.appraised_cost();
        // A hair of slack absorbs summation-order rounding against `check`.
        let room = city.budget_total - self.spent - cost_i - 1e-9 * city.budget_total;
        if room < 0.0 {
            return false;
        }
        if self.r == 0 {
            // Final pick: the resulting portfolio is exactly known.
            let mut counts = state.district_counts.clone();
            counts[d] += 1;
            if counts
                .iter()
                .zip(&env.district_min)
                .any(|(&c, &m)| c < m)
            {
                return false;
            }
            if (state.minority_count as usize + own) < env.minority_needed as usize {
                return false;
            }
            return env.gini_max.is_none_or(|g| gini_unchecked(&counts) <= g);
        }
        let rank = self.rank[id.index()];
        let need = self.cap.saturating_sub(own);
        let def = env
            .district_min
            .get(d)
            .map_or(0, |&m| m.saturating_sub(state.district_counts[d] + 1)) as usize;
        // Prefix sums of this district's classes with the candidate removed.
        let adjusted = |class: usize, x: usize| -> Option<f64> {
            let pre = &self.prefix[d][class];
            if class != own || x <= rank {
                pre.get(x).copied()
            } else {
                pre.get(x + 1).map(|v| v - cost_i)
            }
        };
        for a in 0..=self.r {
            let Some(ca) = adjusted(0, a) else { break };
            for b in 0..=self.r - a {
                let Some(cb) = adjusted(1, b) else { break };
                if a + b < def {
                    continue;
                }
                let rest = self.excl[d][self.r - a - b][need.saturating_sub(b)];
                if ca + cb + rest <= room {
                    return true;
                }
            }
        }
        false
    }
}
