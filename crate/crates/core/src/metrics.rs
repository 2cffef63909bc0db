//! Quality indicators for portfolio sets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{CheckMode, ConstraintRegistry};
use crate::domain::{
    dominates_slice, normalize, CityInstance, ObjectiveVector, ParcelId, PortfolioState, NUM_OBJECTIVES,
};
use crate::error::{invalid, Result};
use crate::reward::{evaluate_portfolio, gini_unchecked, RewardParams};

pub type Point = [f64; NUM_OBJECTIVES];

fn check_unit(points: &[Point]) -> Result<()> {
    for p in points {
        if p.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(invalid(format!("point {p:?} outside [0,1]^4")));
        }
    }
    Ok(())
}

/// Exact hypervolume dominated by `points` w.r.t. the origin, by recursive
/// slicing along the last objective.
pub fn hypervolume_exact(points: &[Point]) -> Result<f64> {
    check_unit(points)?;
    let front: Vec<Point> = crate::domain::nondominated_indices(points)
        .into_iter()
        .map(|i| points[i])
        .collect();
    Ok(slice_volume(front, NUM_OBJECTIVES))
}

fn slice_volume(mut pts: Vec<Point>, d: usize) -> f64 {
    if pts.is_empty() {
        return 0.0;
    }
    if d == 1 {
        return pts.iter().map(|p| p[0]).fold(0.0, f64::max);
    }
    if d == 2 {
        pts.sort_by(|a, b| b[0].total_cmp(&a[0]).then(b[1].total_cmp(&a[1])));
        let mut area = 0.0;
        let mut top = 0.0;
        for p in &pts {
            if p[1] > top {
                area += p[0] * (p[1] - top);
                top = p[1];
            }
        }
        return area;
    }
    let k = d - 1;
    pts.sort_by(|a, b| b[k].total_cmp(&a[k]));
    let mut vol = 0.0;
    let mut active: Vec<Point> = Vec::with_capacity(pts.len());
    for i in 0..pts.len() {
        let p = pts[i];
        // Keep only points not dominated in the first k objectives.
        if !active.iter().any(|q| (0..k).all(|j| q[j] >= p[j])) {
            active.retain(|q| !(0..k).all(|j| p[j] >= q[j]));
            active.push(p);
        }
        let next = pts.get(i + 1).map_or(0.0, |q| q[k]);
        if p[k] > next {
            vol += (p[k] - next) * slice_volume(active.clone(), k);
        }
    }
    vol
}

/// Monte Carlo estimate with its binomial standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub std_error: f64,
}

/// Fraction of uniform samples in [0,1]^4 dominated by some point.
pub fn hypervolume_mc(points: &[Point], samples: usize, seed: u64) -> Result<McEstimate> {
    check_unit(points)?;
    if samples == 0 {
        return Err(invalid("hypervolume_mc needs at least one sample"));
    }
    // Largest boxes first so most hits exit early.
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| b.iter().product::<f64>().total_cmp(&a.iter().product::<f64>()));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let s: Point = std::array::from_fn(|_| rng.random::<f64>());
        if pts.iter().any(|p| p[0] >= s[0] && p[1] >= s[1] && p[2] >= s[2] && p[3] >= s[3]) {
            hits += 1;
        }
    }
    let v = hits as f64 / samples as f64;
    Ok(McEstimate {
        value: v,
        std_error: (v * (1.0 - v) / samples as f64).sqrt(),
    })
}

/// Mean distance from each reference point to its nearest front point.
pub fn igd(front: &[Point], reference: &[Point]) -> Result<f64> {
    if reference.is_empty() {
        return Err(invalid("IGD needs a non-empty reference front"));
    }
    if front.is_empty() {
        return Err(invalid("IGD needs a non-empty front"));
    }
    let total: f64 = reference
        .iter()
        .map(|r| {
            front
                .iter()
                .map(|f| r.iter().zip(f).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / reference.len() as f64)
}

/// Fraction of portfolios satisfying every enabled constraint. An empty
/// list has rate 0.
pub fn rcr(city: &CityInstance, registry: &ConstraintRegistry, portfolios: &[Vec<ParcelId>]) -> Result<f64> {
    if portfolios.is_empty() {
        return Ok(0.0);
    }
    let mut ok = 0usize;
    for p in portfolios {
        if registry.portfolio_feasible(city, p)? {
            ok += 1;
        }
    }
    Ok(ok as f64 / portfolios.len() as f64)
}

/// Σ_i Σ_j |n_i − n_j| / (2 D² n̄).
pub fn gini(counts: &[u32]) -> Result<f64> {
    if counts.is_empty() {
        return Err(invalid("Gini needs at least one district"));
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(invalid("Gini of all-zero counts is undefined"));
    }
    Ok(gini_unchecked(counts))
}

pub fn district_counts(city: &CityInstance, ids: &[ParcelId]) -> Result<Vec<u32>> {
    let mut counts = vec![0u32; city.districts as usize];
    for id in ids {
        let p = city.parcel(*id).ok_or_else(|| invalid(format!("unknown parcel id {id}")))?;
        counts[p.district_id as usize] += 1;
    }
    Ok(counts)
}

/// 1 − Gini of the portfolio's district counts.
pub fn equity_index(city: &CityInstance, ids: &[ParcelId]) -> Result<f64> {
    Ok(1.0 - gini(&district_counts(city, ids)?)?)
}

fn members<'a>(city: &'a CityInstance, ids: &[ParcelId]) -> Result<Vec<&'a crate::domain::Parcel>> {
    if ids.is_empty() {
        return Err(invalid("empty portfolio"));
    }
    ids.iter()
        .map(|id| city.parcel(*id).ok_or_else(|| invalid(format!("unknown parcel id {id}"))))
        .collect()
}

/// Environmental composite in [0, 100]: carbon 40%, green space 30%, flood
/// avoidance 20%, air quality 10%.
pub fn env_score(city: &CityInstance, params: &RewardParams, ids: &[ParcelId]) -> Result<f64> {
    let ps = members(city, ids)?;
    let n = ps.len() as f64;
    let max_carbon = city.parcels.iter().map(|p| p.carbon_footprint()).fold(0.0, f64::max);
    let mean_carbon = ps.iter().map(|p| p.carbon_footprint()).sum::<f64>() / n;
    let carbon = if max_carbon > 0.0 {
        100.0 * (1.0 - mean_carbon / max_carbon)
    } else {
        100.0
    };
    let green = 100.0 * ps.iter().map(|p| p.green_space()).sum::<f64>() / n;
    let flood = 100.0 * ps.iter().filter(|p| !p.flood_zone()).count() as f64 / n;
    let air = 100.0 * ps.iter().map(|p| p.air_quality()).sum::<f64>() / n;
    let w = params.env_weights;
    Ok(w[0] * carbon + w[1] * green + w[2] * flood + w[3] * air)
}

/// Mean walk score of the portfolio.
pub fn transit_access(city: &CityInstance, ids: &[ParcelId]) -> Result<f64> {
    let ps = members(city, ids)?;
    Ok(ps.iter().map(|p| p.walk_score()).sum::<f64>() / ps.len() as f64)
}

/// Normalized objective vectors of the given portfolios.
pub fn normalized_points(city: &CityInstance, params: &RewardParams, portfolios: &[Vec<ParcelId>]) -> Result<Vec<Point>> {
    portfolios
        .iter()
        .map(|p| {
            let v = evaluate_portfolio(city, params, p)?;
            Ok(normalize(&v, &city.objective_bounds)?.to_array())
        })
        .collect()
}

pub fn normalized_point(v: &ObjectiveVector, city: &CityInstance) -> Result<Point> {
    Ok(normalize(v, &city.objective_bounds)?.to_array())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorReport {
    pub method: String,
    pub portfolios: usize,
    pub hypervolume: f64,
    pub rcr: f64,
    pub igd: Option<f64>,
    pub transit_access: f64,
    pub env_score: f64,
    pub equity_index: f64,
}

/// Indicators of one method's portfolios. HV and IGD use the compliant
/// portfolios only; `reference` is the true or surrogate front.
pub fn indicator_report(
    method: &str,
    city: &CityInstance,
    registry: &ConstraintRegistry,
    params: &RewardParams,
    portfolios: &[Vec<ParcelId>],
    reference: Option<&[Point]>,
) -> Result<IndicatorReport> {
    let empty = PortfolioState::empty(city);
    let mut compliant = Vec::new();
    for p in portfolios {
        if registry.check(city, &empty, p, CheckMode::EarlyStop)?.feasible {
            compliant.push(p.clone());
        }
    }
    let pts = normalized_points(city, params, &compliant)?;
    let n = portfolios.len().max(1) as f64;
    let mut transit = 0.0;
    let mut env = 0.0;
    let mut equity = 0.0;
    for p in portfolios {
        transit += transit_access(city, p)?;
        env += env_score(city, params, p)?;
        equity += equity_index(city, p)?;
    }
    let igd_value = match reference {
        Some(r) if !pts.is_empty() && !r.is_empty() => Some(igd(&pts, r)?),
        _ => None,
    };
    Ok(IndicatorReport {
        method: method.to_string(),
        portfolios: portfolios.len(),
        hypervolume: hypervolume_exact(&pts)?,
        rcr: rcr(city, registry, portfolios)?,
        igd: igd_value,
        transit_access: transit / n,
        env_score: env / n,
        equity_index: equity / n,
    })
}

/// Aligned text table of reports.
pub fn format_report_table(reports: &[IndicatorReport]) -> String {
    let mut out = format!(
        "{:<16} {:>6} {:>8} {:>7} {:>8} {:>8} {:>8} {:>8}\n",
        "method", "n", "HV", "RCR%", "IGD", "transit", "env", "equity"
    );
    for r in reports {
        let igd = r.igd.map_or("-".to_string(), |v| format!("{v:.4}"));
        out.push_str(&format!(
            "{:<16} {:>6} {:>8.4} {:>7.1} {:>8} {:>8.2} {:>8.2} {:>8.4}\n",
            r.method,
            r.portfolios,
            r.hypervolume,
            100.0 * r.rcr,
            igd,
            r.transit_access,
            r.env_score,
            r.equity_index
        ));
    }
    out
}

/// One JSON object per report.
pub fn write_report_records<W: std::io::Write>(reports: &[IndicatorReport], mut w: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// True iff some point of `front` dominates or equals `p`.
pub fn covered(front: &[Point], p: &Point) -> bool {
    front.iter().any(|q| q == p || dominates_slice(q, p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citygen::{generate_city, CityGenSpec};
    use crate::constraints::RegistryPolicy;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n).map(|_| std::array::from_fn(|_| rng.random::<f64>())).collect()
    }

    #[test]
    fn hypervolume_basics() {
        assert_eq!(hypervolume_exact(&[]).unwrap(), 0.0);
        assert!((hypervolume_exact(&[[0.5; 4]]).unwrap() - 0.0625).abs() < 1e-15);
        assert_eq!(hypervolume_exact(&[[1.0; 4]]).unwrap(), 1.0);
        assert!(hypervolume_exact(&[[1.2, 0.0, 0.0, 0.0]]).is_err());
        assert!(hypervolume_exact(&[[f64::NAN, 0.0, 0.0, 0.0]]).is_err());
        // Two boxes overlapping in [0,.5]^4.
        let v = hypervolume_exact(&[[1.0, 0.5, 0.5, 0.5], [0.5, 1.0, 0.5, 0.5]]).unwrap();
        assert!((v - (0.125 + 0.125 - 0.0625)).abs() < 1e-15);
    }

    /// Inclusion–exclusion over all subsets: an independent exact oracle.
    fn inclusion_exclusion(points: &[Point]) -> f64 {
        let n = points.len();
        let mut total = 0.0;
        for mask in 1u32..(1 << n) {
            let mut corner = [1.0f64; 4];
            for (i, p) in points.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    for k in 0..4 {
                        corner[k] = corner[k].min(p[k]);
                    }
                }
            }
            let vol: f64 = corner.iter().product();
            total += if mask.count_ones() % 2 == 1 { vol } else { -vol };
        }
        total
    }

    #[test]
    fn exact_matches_inclusion_exclusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=10 {
            let pts = random_points(&mut rng, n);
            let a = hypervolume_exact(&pts).unwrap();
            let b = inclusion_exclusion(&pts);
            assert!((a - b).abs() < 1e-12, "{n}: {a} vs {b}");
        }
    }

    #[test]
    fn monte_carlo_basics() {
        assert_eq!(hypervolume_mc(&[[1.0; 4]], 1000, 1).unwrap().value, 1.0);
        assert_eq!(hypervolume_mc(&[], 1000, 1).unwrap().value, 0.0);
        assert!(hypervolume_mc(&[[0.5; 4]], 0, 1).is_err());
        let est = hypervolume_mc(&[[0.5; 4]], 1_000_000, 7).unwrap();
        let se = (0.0625f64 * 0.9375 / 1e6).sqrt();
        assert!((est.value - 0.0625).abs() <= 3.0 * se);
    }

    #[test]
    fn exact_matches_monte_carlo_on_twelve_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pts = random_points(&mut rng, 12);
        let exact = hypervolume_exact(&pts).unwrap();
        let mc = hypervolume_mc(&pts, 1_000_000, 5).unwrap();
        assert!((exact - mc.value).abs() < 0.01);
    }

    #[test]
    fn igd_examples() {
        let a = [[0.1, 0.2, 0.3, 0.4], [0.9, 0.8, 0.7, 0.6]];
        assert_eq!(igd(&a, &a).unwrap(), 0.0);
        assert_eq!(igd(&[[1.0; 4]], &[[0.0; 4]]).unwrap(), 2.0);
        assert!(igd(&a, &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = random_points(&mut rng, 7);
        let r = random_points(&mut rng, 5);
        let mut total = 0.0;
        for rp in &r {
            let mut best = f64::INFINITY;
            for fp in &f {
                let mut s = 0.0;
                for k in 0..4 {
                    s += (rp[k] - fp[k]) * (rp[k] - fp[k]);
                }
                best = best.min(s.sqrt());
            }
            total += best;
        }
        assert!((igd(&f, &r).unwrap() - total / 5.0).abs() < 1e-12);
    }

    #[test]
    fn gini_examples() {
        assert_eq!(gini(&[3, 3, 3]).unwrap(), 0.0);
        assert_eq!(gini(&[7]).unwrap(), 0.0);
        assert_eq!(gini(&[0, 4]).unwrap(), 0.5);
        assert!(gini(&[0, 0]).is_err());
        assert!(gini(&[]).is_err());
    }

    #[test]
    fn transit_and_env_by_hand() {
        let city = generate_city(&CityGenSpec::desk(60, 2)).unwrap();
        let params = RewardParams::default();
        let ids = [ParcelId(3), ParcelId(17)];
        let (a, b) = (&city.parcels[3], &city.parcels[17]);
        let t = transit_access(&city, &ids).unwrap();
        assert!((t - (a.walk_score() + b.walk_score()) / 2.0).abs() < 1e-12);
        let max_c = city.parcels.iter().map(|p| p.carbon_footprint()).fold(0.0, f64::max);
        let carbon = 100.0 * (1.0 - (a.carbon_footprint() + b.carbon_footprint()) / 2.0 / max_c);
        let green = 50.0 * (a.green_space() + b.green_space());
        let flood = 50.0 * ((!a.flood_zone()) as u8 + (!b.flood_zone()) as u8) as f64;
        let air = 50.0 * (a.air_quality() + b.air_quality());
        let want = 0.4 * carbon + 0.3 * green + 0.2 * flood + 0.1 * air;
        assert!((env_score(&city, &params, &ids).unwrap() - want).abs() < 1e-9);
        assert!(env_score(&city, &params, &[]).is_err());
        assert!(transit_access(&city, &[]).is_err());
    }

    #[test]
    fn rcr_counts_feasible_portfolios() {
        let city = generate_city(&CityGenSpec::desk(80, 5)).unwrap();
        let reg = ConstraintRegistry::build(&city, &RegistryPolicy::default()).unwrap();
        let bad: Vec<ParcelId> = city
            .parcels
            .iter()
            .filter(|p| !reg.parcel_admissible(p.id))
            .map(|p| p.id)
            .take(1)
            .collect();
        assert_eq!(rcr(&city, &reg, &[bad.clone(), bad]).unwrap(), 0.0);
        assert_eq!(rcr(&city, &reg, &[]).unwrap(), 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn hypervolume_is_monotone_and_order_free(seed in 0u64..10_000, n in 1usize..15) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = random_points(&mut rng, n);
            let base = hypervolume_exact(&pts).unwrap();
            let extra = random_points(&mut rng, 1)[0];
            let mut more = pts.clone();
            more.push(extra);
            prop_assert!(hypervolume_exact(&more).unwrap() >= base - 1e-15);
            // A point dominated by an existing one changes nothing.
            let mut dom = pts.clone();
            dom.push(pts[0].map(|v| v * 0.5));
            prop_assert!((hypervolume_exact(&dom).unwrap() - base).abs() < 1e-12);
            pts.reverse();
            prop_assert!((hypervolume_exact(&pts).unwrap() - base).abs() < 1e-12);
        }

        #[test]
        fn gini_matches_direct_formula(counts in proptest::collection::vec(0u32..20, 1..12)) {
            prop_assume!(counts.iter().any(|&c| c > 0));
            let d = counts.len() as f64;
            let mean = counts.iter().sum::<u32>() as f64 / d;
            let mut s = 0.0;
            for &a in &counts {
                for &b in &counts {
                    s += (a as f64 - b as f64).abs();
                }
            }
            let g = gini(&counts).unwrap();
            prop_assert!((g - s / (2.0 * d * d * mean)).abs() < 1e-12);
        }
    }
}
