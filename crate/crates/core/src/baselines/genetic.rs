use web_time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::BaselineResult;
use crate::constraints::ConstraintRegistry;
use crate::domain::{dominates_slice, CityInstance, ParcelId, NUM_OBJECTIVES};
use crate::error::{invalid, Result};
use crate::reward::{evaluate_portfolio, RewardParams};

type Objectives = [f64; NUM_OBJECTIVES];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Nsga2Config {
    pub population: usize,
    pub generations: usize,
    pub crossover_rate: f64,
    /// Probability that a child has one parcel replaced.
    pub mutation_rate: f64,
    /// Rank infeasible individuals behind every feasible one.
    pub death_penalty: bool,
    pub seed: u64,
}

impl Nsga2Config {
    pub fn desk(seed: u64) -> Self {
        Self {
            population: 40,
            generations: 60,
            crossover_rate: 0.9,
            mutation_rate: 0.3,
            death_penalty: false,
            seed,
        }
    }

    pub fn paper(seed: u64) -> Self {
        Self {
            population: 200,
            generations: 500,
            ..Self::desk(seed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeadConfig {
    /// Simplex-lattice resolution H; C(H+3, 3) weight vectors.
    pub divisions: usize,
    pub generations: usize,
    pub neighborhood: usize,
    pub mutation_rate: f64,
    pub death_penalty: bool,
    pub seed: u64,
}

impl MoeadConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            divisions: 5,
            generations: 60,
            neighborhood: 10,
            mutation_rate: 0.3,
            death_penalty: false,
            seed,
        }
    }

    /// H = 9 gives 220 weight vectors.
    pub fn paper(seed: u64) -> Self {
        Self {
            divisions: 9,
            generations: 500,
            ..Self::desk(seed)
        }
    }
}

/// All weight vectors with components in {0, 1/H, …, 1} summing to one,
/// in lexicographic order of their integer numerators.
pub fn simplex_lattice(divisions: usize) -> Vec<Objectives> {
    let h = divisions;
    let mut out = Vec::new();
    if h == 0 {
        return out;
    }
    for a in 0..=h {
        for b in 0..=h - a {
            for c in 0..=h - a - b {
                let d = h - a - b - c;
                out.push([a, b, c, d].map(|x| x as f64 / h as f64));
            }
        }
    }
    out
}

/// Shared evaluation and variation machinery.
struct Problem<'a> {
    city: &'a CityInstance,
    registry: &'a ConstraintRegistry,
    params: &'a RewardParams,
    k: usize,
}

#[derive(Clone, Debug)]
struct Individual {
    ids: Vec<ParcelId>,
    /// Objectives mapped by the city's bounds (not clamped).
    scaled: Objectives,
    feasible: bool,
}

impl Problem<'_> {
    fn evaluate(&self, mut ids: Vec<ParcelId>) -> Result<Individual> {
        ids.sort();
        let raw = evaluate_portfolio(self.city, self.params, &ids)?.to_array();
        let b = &self.city.objective_bounds;
        let scaled = std::array::from_fn(|k| (raw[k] - b.min[k]) / b.range(k));
        Ok(Individual {
            feasible: self.registry.portfolio_feasible(self.city, &ids)?,
            ids,
            scaled,
        })
    }

    fn random<R: Rng>(&self, rng: &mut R) -> Vec<ParcelId> {
        rand::seq::index::sample(rng, self.city.n(), self.k)
            .into_iter()
            .map(|i| ParcelId(i as u32))
            .collect()
    }

    /// Keep the parcels both parents share; fill the rest uniformly from
    /// the parcels only one of them holds.
    fn crossover<R: Rng>(&self, a: &[ParcelId], b: &[ParcelId], rng: &mut R) -> Vec<ParcelId> {
        let mut child: Vec<ParcelId> = a.iter().filter(|x| b.contains(x)).copied().collect();
        let mut rest: Vec<ParcelId> = a.iter().chain(b).filter(|x| !child.contains(x)).copied().collect();
        rest.shuffle(rng);
        child.extend(rest.into_iter().take(self.k - child.len()));
        child
    }

    fn mutate<R: Rng>(&self, ids: &mut [ParcelId], rate: f64, rng: &mut R) {
        if self.city.n() == self.k || !rng.random_bool(rate) {
            return;
        }
        let slot = rng.random_range(0..ids.len());
        loop {
            let c = ParcelId(rng.random_range(0..self.city.n()) as u32);
            if !ids.contains(&c) {
                ids[slot] = c;
                return;
            }
        }
    }
}

fn check_problem(city: &CityInstance) -> Result<usize> {
    let k = city.portfolio_capacity;
    if k == 0 || k > city.n() {
        return Err(invalid("portfolio capacity must be in 1..=n"));
    }
    Ok(k)
}

/// Fitness used for ranking: infeasible individuals sink below everything
/// when the death penalty is on.
fn fitness(ind: &Individual, death_penalty: bool) -> Objectives {
    if death_penalty && !ind.feasible {
        [f64::MIN; NUM_OBJECTIVES]
    } else {
        ind.scaled
    }
}

/// Fronts of non-dominated sorting, each in ascending index order.
fn sort_fronts(points: &[Objectives]) -> Vec<Vec<usize>> {
    let n = points.len();
    let mut dominated_by = vec![0usize; n];
    let mut dominates: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if i != j && dominates_slice(&points[i], &points[j]) {
                dominates[i].push(j);
                dominated_by[j] += 1;
            }
        }
    }
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| dominated_by[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            for &j in &dominates[i] {
                dominated_by[j] -= 1;
                if dominated_by[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(std::mem::replace(&mut current, next));
    }
    fronts
}

fn crowding(points: &[Objectives], front: &[usize]) -> Vec<f64> {
    let mut dist = vec![0.0; front.len()];
    if front.len() <= 2 {
        return vec![f64::INFINITY; front.len()];
    }
    for k in 0..NUM_OBJECTIVES {
        let mut order: Vec<usize> = (0..front.len()).collect();
        order.sort_by(|&a, &b| points[front[a]][k].total_cmp(&points[front[b]][k]));
        let lo = points[front[order[0]]][k];
        let hi = points[front[*order.last().unwrap()]][k];
        dist[order[0]] = f64::INFINITY;
        dist[*order.last().unwrap()] = f64::INFINITY;
        let span = hi - lo;
        if span <= 0.0 {
            continue;
        }
        for w in 1..order.len() - 1 {
            let gap = points[front[order[w + 1]]][k] - points[front[order[w - 1]]][k];
            dist[order[w]] += gap / span;
        }
    }
    dist
}

/// Rank and crowding distance of every point.
fn rank_and_crowd(points: &[Objectives]) -> (Vec<usize>, Vec<f64>) {
    let mut rank = vec![0; points.len()];
    let mut crowd = vec![0.0; points.len()];
    for (r, front) in sort_fronts(points).iter().enumerate() {
        for (&i, d) in front.iter().zip(crowding(points, front)) {
            rank[i] = r;
            crowd[i] = d;
        }
    }
    (rank, crowd)
}

fn report(
    method: &str,
    problem: &Problem,
    pop: &[Individual],
    death_penalty: bool,
    started: Instant,
) -> Result<BaselineResult> {
    let points: Vec<Objectives> = pop.iter().map(|i| fitness(i, death_penalty)).collect();
    let first = sort_fronts(&points).into_iter().next().unwrap_or_default();
    let portfolios = first.iter().map(|&i| pop[i].ids.clone()).collect();
    BaselineResult::evaluate(method, problem.city, problem.registry, problem.params, portfolios, started)
}

/// NSGA-II over fixed-size parcel sets. Reports the first front of the
/// final population.
pub fn nsga2(
    city: &CityInstance,
    registry: &ConstraintRegistry,
    params: &RewardParams,
    cfg: &Nsga2Config,
) -> Result<BaselineResult> {
    let started = Instant::now();
    let k = check_problem(city)?;
    if cfg.population < 2 {
        return Err(invalid("NSGA-II population must be at least 2"));
    }
    let problem = Problem { city, registry, params, k };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pop = (0..cfg.population)
        .map(|_| problem.evaluate(problem.random(&mut rng)))
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..cfg.generations {
        let points: Vec<Objectives> = pop.iter().map(|i| fitness(i, cfg.death_penalty)).collect();
        let (rank, crowd) = rank_and_crowd(&points);
        let better = |a: usize, b: usize| rank[a] < rank[b] || (rank[a] == rank[b] && crowd[a] > crowd[b]);
        let tournament = |rng: &mut ChaCha8Rng| {
            let a = rng.random_range(0..pop.len());
            let b = rng.random_range(0..pop.len());
            if better(b, a) { b } else { a }
        };
        let mut offspring = Vec::with_capacity(cfg.population);
        while offspring.len() < cfg.population {
            let p1 = tournament(&mut rng);
            let p2 = tournament(&mut rng);
            let mut child = if rng.random_bool(cfg.crossover_rate) {
                problem.crossover(&pop[p1].ids, &pop[p2].ids, &mut rng)
            } else {
                pop[p1].ids.clone()
            };
            problem.mutate(&mut child, cfg.mutation_rate, &mut rng);
            offspring.push(problem.evaluate(child)?);
        }
        pop.extend(offspring);
        let points: Vec<Objectives> = pop.iter().map(|i| fitness(i, cfg.death_penalty)).collect();
        let mut survivors = Vec::with_capacity(cfg.population);
        for front in sort_fronts(&points) {
            if survivors.len() + front.len() <= cfg.population {
                survivors.extend(front);
                continue;
            }
            let d = crowding(&points, &front);
            let mut order: Vec<usize> = (0..front.len()).collect();
            // Stable: equal distances keep index order.
            order.sort_by(|&a, &b| d[b].total_cmp(&d[a]));
            survivors.extend(order.into_iter().take(cfg.population - survivors.len()).map(|o| front[o]));
            break;
        }
        survivors.sort_unstable();
        pop = survivors.into_iter().map(|i| pop[i].clone()).collect();
    }
    report("nsga2", &problem, &pop, cfg.death_penalty, started)
}

/// Tchebycheff distance to the ideal point (smaller is better).
fn tchebycheff(f: &Objectives, w: &Objectives, ideal: &Objectives) -> f64 {
    (0..NUM_OBJECTIVES)
        .map(|k| w[k].max(1e-6) * (ideal[k] - f[k]))
        .fold(f64::NEG_INFINITY, f64::max)
}

/// MOEA/D with Tchebycheff subproblems and neighbourhood mating. Reports the
/// non-dominated subproblem solutions.
pub fn moead(
    city: &CityInstance,
    registry: &ConstraintRegistry,
    params: &RewardParams,
    cfg: &MoeadConfig,
) -> Result<BaselineResult> {
    let started = Instant::now();
    let k = check_problem(city)?;
    let weights = simplex_lattice(cfg.divisions);
    if weights.is_empty() || cfg.neighborhood == 0 {
        return Err(invalid("MOEA/D needs divisions >= 1 and a neighbourhood of at least 1"));
    }
    let problem = Problem { city, registry, params, k };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let t = cfg.neighborhood.min(weights.len());
    let neighbors: Vec<Vec<usize>> = weights
        .iter()
        .map(|w| {
            let mut idx: Vec<usize> = (0..weights.len()).collect();
            let d = |j: usize| (0..NUM_OBJECTIVES).map(|c| (w[c] - weights[j][c]).powi(2)).sum::<f64>();
            idx.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
            idx.truncate(t);
            idx
        })
        .collect();
    let mut pop = (0..weights.len())
        .map(|_| problem.evaluate(problem.random(&mut rng)))
        .collect::<Result<Vec<_>>>()?;
    let mut ideal = [f64::NEG_INFINITY; NUM_OBJECTIVES];
    let raise = |ideal: &mut Objectives, ind: &Individual| {
        if !cfg.death_penalty || ind.feasible {
            for c in 0..NUM_OBJECTIVES {
                ideal[c] = ideal[c].max(ind.scaled[c]);
            }
        }
    };
    for ind in &pop {
        raise(&mut ideal, ind);
    }
    let score = |ind: &Individual, w: &Objectives, ideal: &Objectives| {
        if cfg.death_penalty && !ind.feasible {
            f64::INFINITY
        } else {
            tchebycheff(&ind.scaled, w, ideal)
        }
    };
    for _ in 0..cfg.generations {
        for i in 0..weights.len() {
            let a = neighbors[i][rng.random_range(0..t)];
            let b = neighbors[i][rng.random_range(0..t)];
            let mut child = problem.crossover(&pop[a].ids, &pop[b].ids, &mut rng);
            problem.mutate(&mut child, cfg.mutation_rate, &mut rng);
            let y = problem.evaluate(child)?;
            raise(&mut ideal, &y);
            for &j in &neighbors[i] {
                if score(&y, &weights[j], &ideal) < score(&pop[j], &weights[j], &ideal) {
                    pop[j] = y.clone();
                }
            }
        }
    }
    report("moead", &problem, &pop, cfg.death_penalty, started)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citygen::{generate_city, CityGenSpec};
    use crate::constraints::RegistryPolicy;

    #[test]
    fn lattice_sums_to_one() {
        for h in 1..8 {
            let w = simplex_lattice(h);
            let expected = (h + 1) * (h + 2) * (h + 3) / 6;
            assert_eq!(w.len(), expected);
            assert!(w.iter().all(|v| (v.iter().sum::<f64>() - 1.0).abs() < 1e-12));
        }
        assert_eq!(simplex_lattice(1).len(), 4);
    }

    #[test]
    fn fronts_partition_and_order() {
        let pts = [[1.0, 1.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [2.0, 2.0, 0.0, 0.0], [0.0, 3.0, 0.0, 0.0]];
        assert_eq!(sort_fronts(&pts), vec![vec![2, 3], vec![0], vec![1]]);
        let (rank, _) = rank_and_crowd(&pts);
        assert_eq!(rank, vec![1, 2, 0, 0]);
    }

    #[test]
    fn crowding_ties_keep_boundaries_infinite() {
        let pts = [[0.5; 4], [0.5; 4], [0.5; 4]];
        let d = crowding(&pts, &[0, 1, 2]);
        assert_eq!(d.iter().filter(|v| v.is_infinite()).count(), 2);
        assert!(d[1].is_finite() || d[0].is_finite() || d[2].is_finite());
    }

    #[test]
    fn zero_generations_reports_front_of_initial_population() {
        let city = generate_city(&CityGenSpec::desk(30, 4)).unwrap();
        let reg = ConstraintRegistry::build(&city, &RegistryPolicy::default()).unwrap();
        let p = RewardParams::default();
        let cfg = Nsga2Config {
            generations: 0,
            ..Nsga2Config::desk(3)
        };
        let res = nsga2(&city, &reg, &p, &cfg).unwrap();
        let problem = Problem { city: &city, registry: &reg, params: &p, k: 5 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init: Vec<Individual> = (0..40).map(|_| problem.evaluate(problem.random(&mut rng)).unwrap()).collect();
        let pts: Vec<Objectives> = init.iter().map(|i| i.scaled).collect();
        let mut expected: Vec<Vec<ParcelId>> = sort_fronts(&pts)[0].iter().map(|&i| init[i].ids.clone()).collect();
        let mut seen = std::collections::HashSet::new();
        expected.retain(|p| seen.insert(p.clone()));
        assert_eq!(res.portfolios, expected);
    }

    #[test]
    fn death_penalty_raises_compliance() {
        let city = generate_city(&CityGenSpec::desk(60, 5)).unwrap();
        let reg = ConstraintRegistry::build(&city, &RegistryPolicy::default()).unwrap();
        let p = RewardParams::default();
        let on = nsga2(&city, &reg, &p, &Nsga2Config { death_penalty: true, ..Nsga2Config::desk(1) }).unwrap();
        assert!(on.rcr > 0.0);
        let m = moead(&city, &reg, &p, &MoeadConfig { death_penalty: true, ..MoeadConfig::desk(1) }).unwrap();
        assert!(m.rcr > 0.0);
        let single = moead(&city, &reg, &p, &MoeadConfig { divisions: 1, neighborhood: 1, ..MoeadConfig::desk(1) }).unwrap();
        assert!(!single.portfolios.is_empty());
    }
}
