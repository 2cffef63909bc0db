//! Seeded synthetic city generator.
//!
//! Marginals follow the per-city targets in [`CityGenSpec::preset`]:
//! walk score is a truncated normal (mean 55, sd 20) driven partly by a smooth
//! spatial field, land price per m² is lognormal around the city average with
//! latent correlation 0.5 to walk score, and exactly `round(qct_fraction * n)`
//! parcels carry the QCT bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{
    dynf, geo, regbit, CityInstance, Demographics, ObjectiveBounds, Parcel, ParcelId, RegBits,
    DYN_DIM, GEO_DIM, NUM_OBJECTIVES, REG_DIM,
};
use crate::error::{invalid, Result};
use crate::reward::{ObjectiveAccumulator, RewardParams};

const MEAN_AREA_M2: f64 = 1200.0;
const CONSTRUCTION_PER_M2: f64 = 1800.0;
const WALK_MEAN: f64 = 55.0;
const WALK_SD: f64 = 20.0;
const WALK_PRICE_CORRELATION: f64 = 0.5;
const PRICE_LOG_SD: f64 = 0.35;
const AREA_LOG_SD: f64 = 0.35;
/// Probability that any single generic compliance indicator is present.
const INDICATOR_RATE: f64 = 0.998;

/// Generator settings for one synthetic city.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityGenSpec {
    pub name: String,
    pub n_parcels: usize,
    pub districts: u32,
    pub avg_price_per_m2: f64,
    pub qct_fraction: f64,
    pub flood_fraction: f64,
    pub area_km2: f64,
    pub budget_total: f64,
    pub portfolio_capacity: usize,
    pub seed: u64,
}

/// Table of the eight metropolitan presets: name, parcels, area, price, QCT share.
const PRESETS: [(&str, usize, f64, f64, f64); 8] = [
    ("nyc", 12_847, 783.0, 4230.0, 0.342),
    ("la", 9_234, 1302.0, 3180.0, 0.287),
    ("chi", 6_721, 606.0, 2410.0, 0.413),
    ("hou", 5_498, 1651.0, 1890.0, 0.389),
    ("pho", 4_912, 1344.0, 1650.0, 0.321),
    ("phi", 3_876, 347.0, 2920.0, 0.456),
    ("sa", 2_654, 1256.0, 1420.0, 0.378),
    ("sd", 1_650, 842.0, 3670.0, 0.264),
];

impl CityGenSpec {
    pub const PRESET_NAMES: [&'static str; 8] = ["nyc", "la", "chi", "hou", "pho", "phi", "sa", "sd"];

    /// One of the eight metropolitan presets with 10 districts and K = 20.
    pub fn preset(name: &str, seed: u64) -> Option<Self> {
        let (key, n, area, price, qct) = *PRESETS.iter().find(|p| p.0 == name.to_lowercase())?;
        // Houston's developable land is heavily flood-exposed.
        let flood = if key == "hou" { 0.35 } else { 0.10 };
        let k = 20;
        Some(Self {
            name: key.to_string(),
            n_parcels: n,
            districts: 10,
            avg_price_per_m2: price,
            qct_fraction: qct,
            flood_fraction: flood,
            area_km2: area,
            budget_total: default_budget(price, k, 1.0),
            portfolio_capacity: k,
            seed,
        })
    }

    /// Small laptop-scale city: 3 districts, K = 5.
    pub fn desk(n_parcels: usize, seed: u64) -> Self {
        let k = 5;
        Self {
            name: format!("desk-{n_parcels}"),
            n_parcels,
            districts: 3,
            avg_price_per_m2: 2671.0,
            qct_fraction: 0.356,
            flood_fraction: 0.10,
            area_km2: 100.0,
            budget_total: default_budget(2671.0, k, 1.0),
            portfolio_capacity: k,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.portfolio_capacity == 0 {
            return Err(invalid("portfolio capacity must be >= 1"));
        }
        if self.n_parcels < self.portfolio_capacity {
            return Err(invalid(format!(
                "n_parcels {} < portfolio capacity {}",
                self.n_parcels, self.portfolio_capacity
            )));
        }
        if self.districts == 0 {
            return Err(invalid("districts must be >= 1"));
        }
        for (name, f) in [("qct_fraction", self.qct_fraction), ("flood_fraction", self.flood_fraction)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(invalid(format!("{name} {f} outside [0, 1]")));
            }
        }
        if !(self.avg_price_per_m2 > 0.0 && self.area_km2 > 0.0 && self.budget_total > 0.0) {
            return Err(invalid("price, area and budget must be positive"));
        }
        Ok(())
    }
}

/// Budget equal to `slack` times K average parcels.
pub fn default_budget(avg_price_per_m2: f64, k: usize, slack: f64) -> f64 {
    slack * k as f64 * MEAN_AREA_M2 * (avg_price_per_m2 + CONSTRUCTION_PER_M2)
}

/// Realized statistics of a city.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CityStats {
    pub parcel_count: usize,
    pub qct_fraction: f64,
    pub flood_fraction: f64,
    pub mean_price_per_m2: f64,
    pub district_counts: Vec<usize>,
}

pub fn summarize(city: &CityInstance) -> CityStats {
    let n = city.n().max(1) as f64;
    let mut district_counts = vec![0; city.districts as usize];
    let mut qct = 0usize;
    let mut flood = 0usize;
    let mut price = 0.0;
    for p in &city.parcels {
        district_counts[p.district_id as usize] += 1;
        qct += p.is_qct() as usize;
        flood += p.flood_zone() as usize;
        price += p.land_cost() / p.area_m2();
    }
    CityStats {
        parcel_count: city.n(),
        qct_fraction: qct as f64 / n,
        flood_fraction: flood as f64 / n,
        mean_price_per_m2: price / n,
        district_counts,
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Mean-one lognormal factor with log-sd `s`.
fn lognormal_unit(rng: &mut ChaCha8Rng, s: f64) -> f64 {
    (s * normal(rng) - 0.5 * s * s).exp()
}

/// Smooth zero-mean, roughly unit-variance random field over the city square.
struct SpatialField {
    waves: Vec<(f64, f64, f64)>,
}

impl SpatialField {
    fn new(rng: &mut ChaCha8Rng, side: f64) -> Self {
        let waves = (0..4)
            .map(|_| {
                let freq = std::f64::consts::TAU / side * rng.random_range(0.5..2.0);
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (freq * angle.cos(), freq * angle.sin(), phase)
            })
            .collect();
        Self { waves }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let scale = (2.0 / self.waves.len() as f64).sqrt();
        self.waves
            .iter()
            .map(|(a, b, phase)| (a * x + b * y + phase).cos())
            .sum::<f64>()
            * scale
    }
}

fn zone_for(rng: &mut ChaCha8Rng) -> usize {
    // R1 and R2 are rare single-family designations.
    let u: f64 = rng.random();
    if u < 0.06 {
        0
    } else if u < 0.12 {
        1
    } else {
        2 + ((u - 0.12) / 0.88 * 8.0).floor().min(7.0) as usize
    }
}

/// Generate a city. Identical specs produce identical cities.
pub fn generate_city(spec: &CityGenSpec) -> Result<CityInstance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n_parcels;
    let d = spec.districts as usize;
    let side = spec.area_km2.sqrt();
    let field = SpatialField::new(&mut rng, side);

    let centers: Vec<(f64, f64)> = (0..d)
        .map(|_| (rng.random_range(0.15..0.85) * side, rng.random_range(0.15..0.85) * side))
        .collect();
    let spread = side / (2.0 * (d as f64).sqrt());

    let n_qct = (spec.qct_fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut qct = vec![false; n];
    for &i in &order[..n_qct] {
        qct[i] = true;
    }

    let sites: Vec<(usize, f64, f64)> = (0..n)
        .map(|_| {
            let district = rng.random_range(0..d);
            let (cx, cy) = centers[district];
            let x = (cx + spread * normal(&mut rng)).clamp(0.0, side);
            let y = (cy + spread * normal(&mut rng)).clamp(0.0, side);
            (district, x, y)
        })
        .collect();
    // Standardize the field over the realized sites so it shifts walk scores
    // between neighbourhoods without moving the city-wide mean.
    let raw: Vec<f64> = sites.iter().map(|&(_, x, y)| field.at(x, y)).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let sd = (raw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64)
        .sqrt()
        .max(1e-9);

    let mut parcels = Vec::with_capacity(n);
    for (i, &is_qct) in qct.iter().enumerate() {
        let (district, x, y) = sites[i];
        let spatial = (raw[i] - mean) / sd;
        let (walk_latent, walk) = loop {
            let z = std::f64::consts::FRAC_1_SQRT_2 * (spatial + normal(&mut rng));
            let w = WALK_MEAN + WALK_SD * z;
            if (0.0..=100.0).contains(&w) {
                break (z, w);
            }
        };
        let rho = WALK_PRICE_CORRELATION;
        let price_z = rho * walk_latent + (1.0 - rho * rho).sqrt() * normal(&mut rng);
        let price_per_m2 =
            spec.avg_price_per_m2 * (PRICE_LOG_SD * price_z - 0.5 * PRICE_LOG_SD * PRICE_LOG_SD).exp();
        let area = MEAN_AREA_M2 * lognormal_unit(&mut rng, AREA_LOG_SD);
        let dw = (walk - WALK_MEAN) / WALK_SD;

        let mut g = vec![0.0; GEO_DIM];
        g[geo::X_KM] = x;
        g[geo::Y_KM] = y;
        g[geo::AREA_M2] = area;
        g[geo::WALK_SCORE] = walk;
        g[geo::JOB_PROXIMITY] = 1.0 / (1.0 + (-(1.0 * dw + 0.8 * normal(&mut rng))).exp());
        g[geo::CARBON_FOOTPRINT] = 0.25 * area * lognormal_unit(&mut rng, 0.3);
        g[geo::GREEN_SPACE] = (0.45 - 0.12 * dw + 0.15 * normal(&mut rng)).clamp(0.0, 1.0);
        g[geo::LAND_COST] = price_per_m2 * area;
        g[geo::CONSTRUCTION_COST] = CONSTRUCTION_PER_M2 * area * lognormal_unit(&mut rng, 0.15);
        let flood = rng.random_bool(spec.flood_fraction);
        g[geo::FLOOD_ZONE_100YR] = if flood { 1.0 } else { 0.0 };
        g[geo::AIR_QUALITY] = (0.6 - 0.08 * dw + 0.15 * normal(&mut rng)).clamp(0.0, 1.0);
        g[geo::SOIL_QUALITY] = rng.random_range(0.0..1.0);
        g[geo::INFRA_CONNECTIVITY] = (0.5 + 0.15 * dw + 0.1 * normal(&mut rng)).clamp(0.0, 1.0);
        g[geo::TRANSIT_STOPS_800M] = (walk / 10.0 + 2.0 * normal(&mut rng)).round().max(0.0);
        g[geo::SCHOOL_PROXIMITY] = rng.random_range(0.0..1.0);
        g[geo::MEDIAN_INCOME_INDEX] = (if is_qct { -0.8 } else { 0.3 }) + 0.5 * normal(&mut rng);
        g[geo::POPULATION_DENSITY] = (8.0 + 0.6 * dw + 0.4 * normal(&mut rng)).exp();
        for v in g.iter_mut().skip(geo::NAMED.len()) {
            *v = normal(&mut rng);
        }

        let mut reg = RegBits::default();
        reg.set(regbit::QCT, is_qct);
        reg.set(regbit::DDA, rng.random_bool(if price_z > 0.0 { 0.3 } else { 0.1 }));
        reg.set(regbit::ZONE_BASE + zone_for(&mut rng), true);
        reg.set(regbit::FLOOD_MITIGATION, flood && rng.random_bool(0.4));
        for b in regbit::REQUIREMENT_BASE..REG_DIM {
            reg.set(b, rng.random_bool(INDICATOR_RATE));
        }

        let mut dy = vec![0.0; DYN_DIM];
        dy[dynf::PRICE_MULTIPLIER] = lognormal_unit(&mut rng, 0.03);
        dy[dynf::PERMIT_APPROVAL_RATE] = rng.random_range(0.4..0.95);
        dy[dynf::COMMUNITY_SENTIMENT] = normal(&mut rng);
        dy[dynf::POLICY_CHANGE] = if rng.random_bool(0.05) { 1.0 } else { 0.0 };
        for v in dy.iter_mut().skip(dynf::NAMED.len()) {
            *v = normal(&mut rng);
        }

        let minority = rng.random_bool(if is_qct { 0.6 } else { 0.3 });
        let low_income = is_qct || rng.random_bool(0.12);
        parcels.push(Parcel {
            id: ParcelId(i as u32),
            district_id: district as u32,
            geo: g,
            reg,
            dyn_features: dy,
            demographics: Demographics {
                minority_tract: minority,
                low_income_tract: low_income,
            },
        });
    }

    let mut city = CityInstance {
        name: spec.name.clone(),
        parcels,
        districts: spec.districts,
        budget_total: spec.budget_total,
        portfolio_capacity: spec.portfolio_capacity,
        objective_bounds: ObjectiveBounds {
            min: [0.0; NUM_OBJECTIVES],
            max: [1.0; NUM_OBJECTIVES],
        },
        seed: spec.seed,
        spec: Some(spec.clone()),
    };
    city.objective_bounds = objective_bounds(&city, &RewardParams::default());
    city.validate()?;
    Ok(city)
}

/// Per-objective range from greedy single-objective portfolios of size K:
/// the max is the value of the portfolio that greedily maximizes the
/// objective, the min the one that greedily minimizes it. Constraints are
/// ignored, so feasible portfolios lie inside the range up to greedy slack
/// (normalization clamps).
pub fn objective_bounds(city: &CityInstance, params: &RewardParams) -> ObjectiveBounds {
    let mut min = [0.0; NUM_OBJECTIVES];
    let mut max = [0.0; NUM_OBJECTIVES];
    for k in 0..NUM_OBJECTIVES {
        max[k] = greedy_single_objective(city, params, k, true);
        min[k] = greedy_single_objective(city, params, k, false);
        if !(max[k] > min[k]) {
            let pad = 1e-6 * max[k].abs().max(1.0);
            let mid = 0.5 * (max[k] + min[k]);
            min[k] = mid - pad;
            max[k] = mid + pad;
        }
    }
    ObjectiveBounds { min, max }
}

fn greedy_single_objective(city: &CityInstance, params: &RewardParams, k: usize, maximize: bool) -> f64 {
    let mut acc = ObjectiveAccumulator::new(city.districts as usize);
    let mut taken = vec![false; city.n()];
    for _ in 0..city.portfolio_capacity {
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in city.parcels.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let v = acc.with(params, p).to_array()[k];
            let better = match best {
                None => true,
                Some((_, b)) => {
                    if maximize {
                        v > b
                    } else {
                        v < b
                    }
                }
            };
            if better {
                best = Some((i, v));
            }
        }
        let (i, _) = best.expect("n >= K");
        taken[i] = true;
        acc.add(params, &city.parcels[i]);
    }
    acc.value(params).to_array()[k]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(n: usize, seed: u64) -> CityGenSpec {
        CityGenSpec::desk(n, seed)
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_city(&small_spec(300, 3)).unwrap();
        let b = generate_city(&small_spec(300, 3)).unwrap();
        assert_eq!(a, b);
        let c = generate_city(&small_spec(300, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_qct_fraction_means_no_qct_parcels() {
        let mut spec = small_spec(400, 1);
        spec.qct_fraction = 0.0;
        let city = generate_city(&spec).unwrap();
        assert!(city.parcels.iter().all(|p| !p.is_qct()));
    }

    #[test]
    fn rejects_too_few_parcels() {
        let mut spec = small_spec(4, 1);
        spec.portfolio_capacity = 5;
        assert!(generate_city(&spec).is_err());
    }

    #[test]
    fn statistical_targets_hold_for_large_cities() {
        for seed in [1, 2, 3] {
            let spec = small_spec(2000, seed);
            let city = generate_city(&spec).unwrap();
            let stats = summarize(&city);
            assert!((stats.qct_fraction - spec.qct_fraction).abs() <= 0.02);
            let rel = (stats.mean_price_per_m2 - spec.avg_price_per_m2).abs() / spec.avg_price_per_m2;
            assert!(rel <= 0.05, "mean price off by {rel}");
        }
    }

    #[test]
    fn walk_score_correlates_with_land_price() {
        let city = generate_city(&small_spec(4000, 11)).unwrap();
        let xs: Vec<f64> = city.parcels.iter().map(|p| p.walk_score()).collect();
        let ys: Vec<f64> = city
            .parcels
            .iter()
            .map(|p| (p.land_cost() / p.area_m2()).ln())
            .collect();
        let n = xs.len() as f64;
        let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let r = cov / (vx * vy).sqrt();
        assert!((r - 0.5).abs() < 0.08, "correlation {r}");
        let mean_walk = mx;
        assert!((mean_walk - 55.0).abs() < 2.0, "mean walk {mean_walk}");
    }

    #[test]
    fn summarize_identical_parcels() {
        let mut city = generate_city(&small_spec(10, 5)).unwrap();
        let template = city.parcels[0].clone();
        for (i, p) in city.parcels.iter_mut().enumerate() {
            *p = Parcel {
                id: ParcelId(i as u32),
                ..template.clone()
            };
        }
        let stats = summarize(&city);
        let price = template.land_cost() / template.area_m2();
        assert!((stats.mean_price_per_m2 - price).abs() < 1e-9 * price);

        city.districts = 1;
        for p in &mut city.parcels {
            p.district_id = 0;
        }
        assert_eq!(summarize(&city).district_counts, vec![10]);
    }

    #[test]
    fn bounds_are_ordered() {
        let city = generate_city(&small_spec(200, 9)).unwrap();
        city.objective_bounds.validate().unwrap();
    }

    #[test]
    fn presets_match_table() {
        let nyc = CityGenSpec::preset("NYC", 1).unwrap();
        assert_eq!(nyc.n_parcels, 12_847);
        assert_eq!(nyc.qct_fraction, 0.342);
        assert_eq!(CityGenSpec::PRESET_NAMES.len(), 8);
        assert!(CityGenSpec::preset("boston", 1).is_none());
    }
}
