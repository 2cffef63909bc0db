//! Shared vocabulary: parcels, cities, objective vectors, preferences and
//! the portfolio state threaded through the environment.
//!
//! All objectives are stored so that larger is better. Cost and
//! environmental impact enter negated at reward computation and nowhere else.

use std::fmt;
use std::ops::{Add, Sub};

use serde::{Deserialize, Serialize};

use crate::citygen::CityGenSpec;
use crate::error::{invalid, Result};

pub const GEO_DIM: usize = 47;
pub const REG_DIM: usize = 127;
pub const DYN_DIM: usize = 23;
pub const NUM_OBJECTIVES: usize = 4;

/// Column layout of the geospatial feature vector.
pub mod geo {
    pub const X_KM: usize = 0;
    pub const Y_KM: usize = 1;
    pub const AREA_M2: usize = 2;
    pub const WALK_SCORE: usize = 3;
    pub const JOB_PROXIMITY: usize = 4;
    pub const CARBON_FOOTPRINT: usize = 5;
    pub const GREEN_SPACE: usize = 6;
    pub const LAND_COST: usize = 7;
    pub const CONSTRUCTION_COST: usize = 8;
    pub const FLOOD_ZONE_100YR: usize = 9;
    pub const AIR_QUALITY: usize = 10;
    pub const SOIL_QUALITY: usize = 11;
    pub const INFRA_CONNECTIVITY: usize = 12;
    pub const TRANSIT_STOPS_800M: usize = 13;
    pub const SCHOOL_PROXIMITY: usize = 14;
    pub const MEDIAN_INCOME_INDEX: usize = 15;
    pub const POPULATION_DENSITY: usize = 16;

    pub const NAMED: [&str; 17] = [
        "x_km",
        "y_km",
        "area_m2",
        "walk_score",
        "job_proximity",
        "carbon_footprint",
        "green_space",
        "land_cost",
        "construction_cost",
        "flood_zone_100yr",
        "air_quality",
        "soil_quality",
        "infra_connectivity",
        "transit_stops_800m",
        "school_proximity",
        "median_income_index",
        "population_density",
    ];

    /// Field name of geo column `i`; unnamed columns are `geo_aux_NN`.
    pub fn name(i: usize) -> String {
        NAMED
            .get(i)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("geo_aux_{i:02}"))
    }
}

/// Column layout of the dynamic feature vector.
pub mod dynf {
    pub const PRICE_MULTIPLIER: usize = 0;
    pub const PERMIT_APPROVAL_RATE: usize = 1;
    pub const COMMUNITY_SENTIMENT: usize = 2;
    pub const POLICY_CHANGE: usize = 3;

    pub const NAMED: [&str; 4] = [
        "current_price_multiplier",
        "permit_approval_rate",
        "community_sentiment",
        "policy_change",
    ];

    pub fn name(i: usize) -> String {
        NAMED
            .get(i)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("dyn_aux_{i:02}"))
    }
}

/// Bit layout of the regulatory indicator vector.
pub mod regbit {
    pub const QCT: usize = 0;
    pub const DDA: usize = 1;
    /// Zoning designations R1..R10 occupy one-hot bits 2..=11.
    pub const ZONE_BASE: usize = 2;
    pub const NUM_ZONES: usize = 10;
    pub const FLOOD_MITIGATION: usize = 12;
    /// First bit of the generic compliance indicators backing the
    /// parametric requirement constraints.
    pub const REQUIREMENT_BASE: usize = 13;
}

/// Fixed-width 127-bit regulatory indicator set.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct RegBits([u64; 2]);

impl RegBits {
    pub fn get(&self, i: usize) -> bool {
        debug_assert!(i < REG_DIM);
        (self.0[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, on: bool) {
        assert!(i < REG_DIM, "regulatory bit {i} out of range");
        let mask = 1u64 << (i % 64);
        if on {
            self.0[i / 64] |= mask;
        } else {
            self.0[i / 64] &= !mask;
        }
    }

    pub fn count_ones(&self) -> u32 {
        self.0[0].count_ones() + self.0[1].count_ones()
    }

    pub fn iter_ones(&self) -> impl Iterator<Item = usize> + '_ {
        (0..REG_DIM).filter(move |&i| self.get(i))
    }

    /// 127-character string of `0`/`1`, bit 0 first.
    pub fn to_bit_string(&self) -> String {
        (0..REG_DIM)
            .map(|i| if self.get(i) { '1' } else { '0' })
            .collect()
    }

    pub fn from_bit_string(s: &str) -> std::result::Result<Self, String> {
        if s.len() != REG_DIM {
            return Err(format!(
                "expected {REG_DIM} bits, found {}",
                s.chars().count()
            ));
        }
        let mut bits = RegBits::default();
        for (i, c) in s.chars().enumerate() {
            match c {
                '0' => {}
                '1' => bits.set(i, true),
                other => return Err(format!("invalid bit character {other:?} at {i}")),
            }
        }
        Ok(bits)
    }
}

impl fmt::Debug for RegBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RegBits({})", self.to_bit_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParcelId(pub u32);

impl ParcelId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ParcelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Demographics {
    pub minority_tract: bool,
    pub low_income_tract: bool,
}

/// One candidate land unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Parcel {
    pub id: ParcelId,
    pub district_id: u32,
    pub geo: Vec<f64>,
    pub reg: RegBits,
    pub dyn_features: Vec<f64>,
    pub demographics: Demographics,
}

impl Parcel {
    pub fn walk_score(&self) -> f64 {
        self.geo[geo::WALK_SCORE]
    }
    pub fn job_proximity(&self) -> f64 {
        self.geo[geo::JOB_PROXIMITY]
    }
    pub fn carbon_footprint(&self) -> f64 {
        self.geo[geo::CARBON_FOOTPRINT]
    }
    pub fn green_space(&self) -> f64 {
        self.geo[geo::GREEN_SPACE]
    }
    pub fn land_cost(&self) -> f64 {
        self.geo[geo::LAND_COST]
    }
    pub fn construction_cost(&self) -> f64 {
        self.geo[geo::CONSTRUCTION_COST]
    }
    /// Land plus construction cost before any market multiplier.
    pub fn base_cost(&self) -> f64 {
        self.land_cost() + self.construction_cost()
    }
    /// Cost at the appraisal snapshot; the budget rule is judged on this.
    pub fn appraised_cost(&self) -> f64 {
        self.base_cost() * self.price_multiplier()
    }
    pub fn area_m2(&self) -> f64 {
        self.geo[geo::AREA_M2]
    }
    pub fn flood_zone(&self) -> bool {
        self.geo[geo::FLOOD_ZONE_100YR] >= 0.5
    }
    pub fn air_quality(&self) -> f64 {
        self.geo[geo::AIR_QUALITY]
    }
    pub fn coordinates(&self) -> (f64, f64) {
        (self.geo[geo::X_KM], self.geo[geo::Y_KM])
    }
    pub fn price_multiplier(&self) -> f64 {
        self.dyn_features[dynf::PRICE_MULTIPLIER]
    }
    pub fn is_qct(&self) -> bool {
        self.reg.get(regbit::QCT)
    }
    /// Index 0..10 of the zoning designation, if one is set.
    pub fn zone(&self) -> Option<usize> {
        (0..regbit::NUM_ZONES).find(|&z| self.reg.get(regbit::ZONE_BASE + z))
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.geo.len() != GEO_DIM {
            return Err(format!("geo has {} entries, expected {GEO_DIM}", self.geo.len()));
        }
        if self.dyn_features.len() != DYN_DIM {
            return Err(format!(
                "dyn has {} entries, expected {DYN_DIM}",
                self.dyn_features.len()
            ));
        }
        if self.geo.iter().chain(&self.dyn_features).any(|v| !v.is_finite()) {
            return Err("non-finite feature".into());
        }
        let walk = self.walk_score();
        if !(0.0..=100.0).contains(&walk) {
            return Err(format!("walk_score {walk} outside [0, 100]"));
        }
        if self.land_cost() < 0.0 || self.construction_cost() < 0.0 {
            return Err("negative cost".into());
        }
        if self.price_multiplier() <= 0.0 {
            return Err("current_price_multiplier must be positive".into());
        }
        Ok(())
    }
}

/// Per-objective normalization range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBounds {
    pub min: [f64; NUM_OBJECTIVES],
    pub max: [f64; NUM_OBJECTIVES],
}

impl ObjectiveBounds {
    pub fn validate(&self) -> Result<()> {
        for k in 0..NUM_OBJECTIVES {
            let (lo, hi) = (self.min[k], self.max[k]);
            if !lo.is_finite() || !hi.is_finite() {
                return Err(invalid(format!("objective bound {k} is not finite")));
            }
            if lo >= hi {
                return Err(invalid(format!(
                    "degenerate bounds for objective {k}: min {lo} >= max {hi}"
                )));
            }
        }
        Ok(())
    }

    pub fn range(&self, k: usize) -> f64 {
        self.max[k] - self.min[k]
    }
}

/// A full synthetic metropolitan instance.
#[derive(Clone, Debug, PartialEq)]
pub struct CityInstance {
    pub name: String,
    pub parcels: Vec<Parcel>,
    pub districts: u32,
    pub budget_total: f64,
    pub portfolio_capacity: usize,
    pub objective_bounds: ObjectiveBounds,
    pub seed: u64,
    /// Generator settings, when the city came from the generator.
    pub spec: Option<CityGenSpec>,
}

impl CityInstance {
    pub fn n(&self) -> usize {
        self.parcels.len()
    }

    pub fn parcel(&self, id: ParcelId) -> Option<&Parcel> {
        self.parcels.get(id.index())
    }

    pub fn validate(&self) -> Result<()> {
        if self.districts == 0 {
            return Err(invalid("city needs at least one district"));
        }
        if self.portfolio_capacity == 0 {
            return Err(invalid("portfolio capacity K must be >= 1"));
        }
        if self.n() < self.portfolio_capacity {
            return Err(invalid(format!(
                "{} parcels cannot fill a portfolio of {}",
                self.n(),
                self.portfolio_capacity
            )));
        }
        if !(self.budget_total.is_finite() && self.budget_total > 0.0) {
            return Err(invalid("budget_total must be positive"));
        }
        self.objective_bounds.validate()?;
        for (i, p) in self.parcels.iter().enumerate() {
            if p.id.index() != i {
                return Err(invalid(format!("parcel at position {i} has id {}", p.id)));
            }
            if p.district_id >= self.districts {
                return Err(invalid(format!(
                    "parcel {} in district {} but city has {}",
                    p.id, p.district_id, self.districts
                )));
            }
            p.validate()
                .map_err(|e| invalid(format!("parcel {}: {e}", p.id)))?;
        }
        Ok(())
    }
}

/// Four-component objective vector, maximization convention.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector {
    pub accessibility: f64,
    pub environment: f64,
    pub neg_cost: f64,
    pub equity: f64,
}

impl ObjectiveVector {
    pub const fn new(accessibility: f64, environment: f64, neg_cost: f64, equity: f64) -> Self {
        Self {
            accessibility,
            environment,
            neg_cost,
            equity,
        }
    }

    pub fn from_array(a: [f64; NUM_OBJECTIVES]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; NUM_OBJECTIVES] {
        [self.accessibility, self.environment, self.neg_cost, self.equity]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, pref: &PreferenceVector) -> f64 {
        self.to_array()
            .iter()
            .zip(pref.weights)
            .map(|(v, w)| v * w)
            .sum()
    }

    pub fn scale(self, c: f64) -> Self {
        Self::from_array(self.to_array().map(|v| v * c))
    }
}

impl Add for ObjectiveVector {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(
            self.accessibility + rhs.accessibility,
            self.environment + rhs.environment,
            self.neg_cost + rhs.neg_cost,
            self.equity + rhs.equity,
        )
    }
}

impl Sub for ObjectiveVector {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(
            self.accessibility - rhs.accessibility,
            self.environment - rhs.environment,
            self.neg_cost - rhs.neg_cost,
            self.equity - rhs.equity,
        )
    }
}

/// Weak-and-strict Pareto dominance: `a` is at least as good everywhere and
/// differs somewhere.
pub fn dominates(a: &ObjectiveVector, b: &ObjectiveVector) -> Result<bool> {
    if !a.is_finite() || !b.is_finite() {
        return Err(invalid("dominance on non-finite objective vector"));
    }
    Ok(dominates_slice(&a.to_array(), &b.to_array()))
}

/// Dominance on raw coordinates; no finiteness check.
pub fn dominates_slice(a: &[f64], b: &[f64]) -> bool {
    debug_assert_eq!(a.len(), b.len());
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return false;
        }
        if x > y {
            strictly = true;
        }
    }
    strictly
}

/// Indices of the points no other point dominates, in input order. Equal
/// points do not dominate each other, so duplicates survive together.
///
/// Points are visited in descending lexicographic order: a dominator always
/// sorts before what it dominates, and by transitivity it suffices to test
/// against the non-dominated points seen so far.
pub fn nondominated_indices(points: &[[f64; NUM_OBJECTIVES]]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&points[a], &points[b]);
        pb.iter()
            .zip(pa)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if !kept.iter().any(|&j| dominates_slice(&points[j], &points[i])) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

/// Affine map of each component onto [0, 1], clamping outside the bounds.
pub fn normalize(v: &ObjectiveVector, bounds: &ObjectiveBounds) -> Result<ObjectiveVector> {
    bounds.validate()?;
    if !v.is_finite() {
        return Err(invalid("cannot normalize non-finite objective vector"));
    }
    let raw = v.to_array();
    let mut out = [0.0; NUM_OBJECTIVES];
    for k in 0..NUM_OBJECTIVES {
        out[k] = ((raw[k] - bounds.min[k]) / bounds.range(k)).clamp(0.0, 1.0);
    }
    Ok(ObjectiveVector::from_array(out))
}

/// Nonnegative weights on the four objectives, summing to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceVector {
    pub weights: [f64; NUM_OBJECTIVES],
}

impl PreferenceVector {
    pub fn new(weights: [f64; NUM_OBJECTIVES]) -> Result<Self> {
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("preference weights must be finite and nonnegative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("preference weights sum to {sum}, not 1")));
        }
        Ok(Self { weights })
    }

    /// Rescale nonnegative raw weights onto the simplex.
    pub fn normalized(raw: [f64; NUM_OBJECTIVES]) -> Result<Self> {
        if raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(invalid("preference weights must be finite and nonnegative"));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(invalid("at least one preference weight must be positive"));
        }
        Ok(Self {
            weights: raw.map(|w| w / sum),
        })
    }

    pub fn uniform() -> Self {
        Self {
            weights: [0.25; NUM_OBJECTIVES],
        }
    }
}

/// MDP state: the partial portfolio and the market snapshot it was built in.
#[derive(Clone, Debug, PartialEq)]
pub struct PortfolioState {
    /// Selected parcels in selection order.
    pub selected: Vec<ParcelId>,
    /// Price multiplier of each selected parcel at the moment it was chosen.
    pub selection_multipliers: Vec<f64>,
    pub cumulative_cost: f64,
    pub step_index: usize,
    /// Current price multiplier of every parcel. The remaining dynamic
    /// columns are static and read from the city.
    pub dyn_snapshot: Vec<f64>,
    pub district_counts: Vec<u32>,
    pub minority_count: u32,
}

impl PortfolioState {
    pub fn empty(city: &CityInstance) -> Self {
        Self {
            selected: Vec::with_capacity(city.portfolio_capacity),
            selection_multipliers: Vec::with_capacity(city.portfolio_capacity),
            cumulative_cost: 0.0,
            step_index: 0,
            dyn_snapshot: city.parcels.iter().map(Parcel::price_multiplier).collect(),
            district_counts: vec![0; city.districts as usize],
            minority_count: 0,
        }
    }

    /// Static portfolio at the city's initial prices, selected in the given order.
    pub fn from_selection(city: &CityInstance, ids: &[ParcelId]) -> Result<Self> {
        let mut state = Self::empty(city);
        for &id in ids {
            if city.parcel(id).is_none() {
                return Err(invalid(format!("unknown parcel id {id}")));
            }
            if state.contains(id) {
                return Err(invalid(format!("duplicate parcel id {id}")));
            }
            state.push(city, id);
        }
        Ok(state)
    }

    pub fn contains(&self, id: ParcelId) -> bool {
        self.selected.contains(&id)
    }

    /// Append a parcel at its current multiplier. Caller checks validity.
    pub(crate) fn push(&mut self, city: &CityInstance, id: ParcelId) {
        let p = &city.parcels[id.index()];
        let mult = self.dyn_snapshot[id.index()];
        self.selected.push(id);
        self.selection_multipliers.push(mult);
        self.cumulative_cost += p.base_cost() * mult;
        self.step_index += 1;
        self.district_counts[p.district_id as usize] += 1;
        if p.demographics.minority_tract {
            self.minority_count += 1;
        }
    }

    /// Effective cost of adding `id` now.
    pub fn effective_cost(&self, city: &CityInstance, id: ParcelId) -> f64 {
        city.parcels[id.index()].base_cost() * self.dyn_snapshot[id.index()]
    }

    /// Aggregate features: capacity used, per-district counts over K,
    /// cumulative cost over budget, minority share.
    pub fn portfolio_summary(&self, city: &CityInstance) -> Vec<f64> {
        let k = city.portfolio_capacity as f64;
        let mut out = Vec::with_capacity(self.district_counts.len() + 3);
        out.push(self.step_index as f64 / k);
        out.extend(self.district_counts.iter().map(|&c| c as f64 / k));
        out.push(self.cumulative_cost / city.budget_total);
        out.push(if self.selected.is_empty() {
            0.0
        } else {
            self.minority_count as f64 / self.selected.len() as f64
        });
        out
    }

    /// Selected parcels with their selection multipliers, sorted by id.
    pub fn sorted_members(&self) -> Vec<(ParcelId, f64)> {
        let mut m: Vec<_> = self
            .selected
            .iter()
            .copied()
            .zip(self.selection_multipliers.iter().copied())
            .collect();
        m.sort_by_key(|(id, _)| *id);
        m
    }

    pub fn sorted_ids(&self) -> Vec<ParcelId> {
        let mut ids = self.selected.clone();
        ids.sort();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ov(a: [f64; 4]) -> ObjectiveVector {
        ObjectiveVector::from_array(a)
    }

    #[test]
    fn nondominated_indices_examples() {
        assert_eq!(nondominated_indices(&[[1.0; 4], [0.0; 4]]), vec![0]);
        assert_eq!(nondominated_indices(&[[0.0; 4], [1.0; 4]]), vec![1]);
        assert_eq!(
            nondominated_indices(&[[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]]),
            vec![0, 1]
        );
        assert_eq!(nondominated_indices(&[[0.5; 4], [0.5; 4], [0.1; 4]]), vec![0, 1]);
        assert!(nondominated_indices(&[]).is_empty());
    }

    #[test]
    fn dominance_examples() {
        assert!(dominates(&ov([1.0; 4]), &ov([0.0; 4])).unwrap());
        assert!(!dominates(&ov([1.0, 0.0, 0.0, 0.0]), &ov([0.0, 1.0, 0.0, 0.0])).unwrap());
        assert!(!dominates(&ov([1.0; 4]), &ov([1.0; 4])).unwrap());
        assert!(dominates(&ov([f64::NAN, 0.0, 0.0, 0.0]), &ov([0.0; 4])).is_err());
    }

    #[test]
    fn normalize_examples() {
        let b = ObjectiveBounds {
            min: [0.0, -10.0, -100.0, 0.0],
            max: [10.0, 10.0, 0.0, 2.0],
        };
        assert_eq!(normalize(&ov(b.min), &b).unwrap().to_array(), [0.0; 4]);
        assert_eq!(normalize(&ov(b.max), &b).unwrap().to_array(), [1.0; 4]);
        let mid = ov([5.0, 0.0, -50.0, 1.0]);
        assert_eq!(normalize(&mid, &b).unwrap().to_array(), [0.5; 4]);
        assert_eq!(
            normalize(&ov([20.0, -20.0, 0.0, 1.0]), &b).unwrap().to_array(),
            [1.0, 0.0, 1.0, 0.5]
        );
        let degenerate = ObjectiveBounds {
            min: [0.0; 4],
            max: [1.0, 1.0, 0.0, 1.0],
        };
        assert!(normalize(&mid, &degenerate).is_err());
    }

    #[test]
    fn reg_bits_string_round_trip() {
        let mut bits = RegBits::default();
        for i in [0, 1, 63, 64, 126] {
            bits.set(i, true);
        }
        let s = bits.to_bit_string();
        assert_eq!(s.len(), 127);
        assert_eq!(RegBits::from_bit_string(&s).unwrap(), bits);
        assert!(RegBits::from_bit_string(&s[..126]).is_err());
        assert_eq!(bits.count_ones(), 5);
    }

    #[test]
    fn preference_validation() {
        assert!(PreferenceVector::new([0.25; 4]).is_ok());
        assert!(PreferenceVector::new([0.5, 0.5, 0.5, 0.0]).is_err());
        assert!(PreferenceVector::new([1.5, -0.5, 0.0, 0.0]).is_err());
        let p = PreferenceVector::normalized([2.0, 2.0, 0.0, 0.0]).unwrap();
        assert_eq!(p.weights, [0.5, 0.5, 0.0, 0.0]);
        assert!(PreferenceVector::normalized([0.0; 4]).is_err());
    }

    fn vec4() -> impl Strategy<Value = [f64; 4]> {
        // Small integer grid so that ties and equal components actually occur.
        prop::array::uniform4(-3i32..3).prop_map(|a| a.map(f64::from))
    }

    proptest! {
        #[test]
        fn dominance_is_a_strict_partial_order(a in vec4(), b in vec4(), c in vec4()) {
            let (a, b, c) = (ov(a), ov(b), ov(c));
            prop_assert!(!dominates(&a, &a).unwrap());
            if dominates(&a, &b).unwrap() {
                prop_assert!(!dominates(&b, &a).unwrap());
                if dominates(&b, &c).unwrap() {
                    prop_assert!(dominates(&a, &c).unwrap());
                }
            }
        }

        #[test]
        fn normalize_is_monotone(a in vec4(), b in vec4()) {
            let bounds = ObjectiveBounds { min: [-2.0; 4], max: [2.0; 4] };
            let (a, b) = (ov(a), ov(b));
            if dominates(&a, &b).unwrap() {
                let (na, nb) = (normalize(&a, &bounds).unwrap(), normalize(&b, &bounds).unwrap());
                prop_assert!(dominates(&na, &nb).unwrap() || na == nb);
            }
        }
    }
}
