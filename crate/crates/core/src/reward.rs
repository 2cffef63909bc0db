//! Vector reward of a portfolio and the long-horizon bonus term.

use serde::{Deserialize, Serialize};

use crate::domain::{CityInstance, ObjectiveVector, Parcel, ParcelId, PortfolioState};
use crate::error::{invalid, Result};

/// Coefficients of the four objective terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    /// Weight of job proximity inside accessibility.
    pub beta1: f64,
    /// Weight of green-space preservation inside the environment term.
    pub beta2: f64,
    /// Weight of demographic diversity inside equity.
    pub beta4: f64,
    /// Per-parcel accessibility weights; `None` means all ones.
    pub access_weights: Option<Vec<f64>>,
    /// Carbon, green space, flood avoidance, air quality weights of the
    /// environmental composite score.
    pub env_weights: [f64; 4],
    pub gamma: f64,
    /// Planning horizon in years for the discounted future-outcome bonus.
    pub horizon: u32,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            beta1: 20.0,
            beta2: 100.0,
            beta4: 0.5,
            access_weights: None,
            env_weights: [0.4, 0.3, 0.2, 0.1],
            gamma: 0.95,
            horizon: 10,
        }
    }
}

impl RewardParams {
    pub fn validate(&self, city: &CityInstance) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(invalid(format!("gamma {} outside (0, 1)", self.gamma)));
        }
        let s: f64 = self.env_weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 || self.env_weights.iter().any(|w| *w < 0.0) {
            return Err(invalid("environmental weights must be nonnegative and sum to 1"));
        }
        if let Some(w) = &self.access_weights {
            if w.len() != city.n() {
                return Err(invalid(format!(
                    "{} accessibility weights for {} parcels",
                    w.len(),
                    city.n()
                )));
            }
        }
        Ok(())
    }

    fn access_weight(&self, id: ParcelId) -> f64 {
        self.access_weights
            .as_ref()
            .map_or(1.0, |w| w[id.index()])
    }

    /// gamma^H, the discount applied to the future-outcome estimate.
    pub fn future_discount(&self) -> f64 {
        self.gamma.powi(self.horizon as i32)
    }
}

/// Gini coefficient of per-district counts; caller guarantees a nonzero total.
pub(crate) fn gini_unchecked(counts: &[u32]) -> f64 {
    let d = counts.len() as f64;
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    let mean = total as f64 / d;
    let mut acc = 0.0;
    for &a in counts {
        for &b in counts {
            acc += (a as f64 - b as f64).abs();
        }
    }
    acc / (2.0 * d * d * mean)
}

fn equity_term(params: &RewardParams, counts: &[u32], minority: u32, size: usize) -> f64 {
    if size == 0 {
        return 0.0;
    }
    let diversity = (minority as f64 / size as f64).clamp(0.0, 1.0);
    (1.0 - gini_unchecked(counts)) + params.beta4 * diversity
}

/// Immediate four-objective value of the portfolio held in `state`.
///
/// Sums run over members sorted by id so that the same portfolio evaluates
/// bit-identically regardless of selection order.
pub fn reward_vector(city: &CityInstance, params: &RewardParams, state: &PortfolioState) -> ObjectiveVector {
    let mut access = 0.0;
    let mut env = 0.0;
    let mut cost = 0.0;
    for (id, mult) in state.sorted_members() {
        let p = &city.parcels[id.index()];
        access += params.access_weight(id) * p.walk_score() + params.beta1 * p.job_proximity();
        env += -p.carbon_footprint() + params.beta2 * p.green_space();
        cost += p.base_cost() * mult;
    }
    let equity = equity_term(
        params,
        &state.district_counts,
        state.minority_count,
        state.selected.len(),
    );
    ObjectiveVector::new(access, env, -cost, equity)
}

/// Deterministic stand-in for a learned long-term outcome model: the mean of
/// green space and walk score / 100 over the selected parcels, in [0, 1].
pub fn future_value(city: &CityInstance, ids: &[ParcelId]) -> f64 {
    if ids.is_empty() {
        return 0.0;
    }
    let mut sorted = ids.to_vec();
    sorted.sort();
    let total: f64 = sorted
        .iter()
        .map(|id| {
            let p = &city.parcels[id.index()];
            0.5 * p.green_space() + 0.5 * p.walk_score() / 100.0
        })
        .sum();
    total / sorted.len() as f64
}

/// The discounted future bonus as an objective vector (environment and equity).
pub fn terminal_bonus(city: &CityInstance, params: &RewardParams, ids: &[ParcelId]) -> ObjectiveVector {
    let b = params.future_discount() * future_value(city, ids);
    ObjectiveVector::new(0.0, b, 0.0, b)
}

/// Objective vector of a completed portfolio: immediate value plus bonus.
pub fn portfolio_objectives(city: &CityInstance, params: &RewardParams, state: &PortfolioState) -> ObjectiveVector {
    reward_vector(city, params, state) + terminal_bonus(city, params, &state.selected)
}

/// Static evaluation at the city's initial prices. Every baseline uses this.
pub fn evaluate_portfolio(city: &CityInstance, params: &RewardParams, ids: &[ParcelId]) -> Result<ObjectiveVector> {
    let state = PortfolioState::from_selection(city, ids)?;
    Ok(portfolio_objectives(city, params, &state))
}

/// Running sums for cheap what-if evaluation while building portfolios greedily.
#[derive(Clone, Debug)]
pub(crate) struct ObjectiveAccumulator {
    access: f64,
    env: f64,
    cost: f64,
    future: f64,
    counts: Vec<u32>,
    minority: u32,
    size: usize,
}

impl ObjectiveAccumulator {
    pub fn new(districts: usize) -> Self {
        Self {
            access: 0.0,
            env: 0.0,
            cost: 0.0,
            future: 0.0,
            counts: vec![0; districts],
            minority: 0,
            size: 0,
        }
    }

    pub fn add(&mut self, params: &RewardParams, p: &Parcel) {
        self.access += params.access_weight(p.id) * p.walk_score() + params.beta1 * p.job_proximity();
        self.env += -p.carbon_footprint() + params.beta2 * p.green_space();
        self.cost += p.base_cost() * p.price_multiplier();
        self.future += 0.5 * p.green_space() + 0.5 * p.walk_score() / 100.0;
        self.counts[p.district_id as usize] += 1;
        if p.demographics.minority_tract {
            self.minority += 1;
        }
        self.size += 1;
    }

    /// Objectives (with bonus) as if `p` were added.
    pub fn with(&self, params: &RewardParams, p: &Parcel) -> ObjectiveVector {
        let mut next = self.clone();
        next.add(params, p);
        next.value(params)
    }

    pub fn value(&self, params: &RewardParams) -> ObjectiveVector {
        let bonus = if self.size == 0 {
            0.0
        } else {
            params.future_discount() * self.future / self.size as f64
        };
        ObjectiveVector::new(
            self.access,
            self.env + bonus,
            -self.cost,
            equity_term(params, &self.counts, self.minority, self.size) + bonus,
        )
    }
}
