//! Comparison methods run on the same city, registry and reward model.

mod genetic;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use web_time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use genetic::{moead, nsga2, simplex_lattice, MoeadConfig, Nsga2Config};

use crate::constraints::ConstraintRegistry;
use crate::domain::{nondominated_indices, normalize, CityInstance, ObjectiveVector, ParcelId, PortfolioState, PreferenceVector};
use crate::env::{EnvConfig, Environment};
use crate::error::{invalid, Error, Result};
use crate::metrics::{hypervolume_exact, rcr};
use crate::ppo::{train_population, ArchiveRecord, ParetoArchive, PpoConfig, TrainingRun};
use crate::reward::{evaluate_portfolio, RewardParams};

/// Portfolios reported by one method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub method: String,
    /// Sorted parcel ids of each reported portfolio.
    pub portfolios: Vec<Vec<ParcelId>>,
    pub objectives: Vec<ObjectiveVector>,
    pub feasible: Vec<bool>,
    pub rcr: f64,
    pub wall_time_s: f64,
}

impl BaselineResult {
    /// Evaluate and check `portfolios`; duplicates (as sets) are dropped.
    pub fn evaluate(
        method: &str,
        city: &CityInstance,
        registry: &ConstraintRegistry,
        params: &RewardParams,
        portfolios: Vec<Vec<ParcelId>>,
        started: Instant,
    ) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        let portfolios: Vec<Vec<ParcelId>> = portfolios
            .into_iter()
            .map(|mut p| {
                p.sort();
                p
            })
            .filter(|p| seen.insert(p.clone()))
            .collect();
        let objectives = portfolios
            .iter()
            .map(|p| evaluate_portfolio(city, params, p))
            .collect::<Result<Vec<_>>>()?;
        let feasible = portfolios
            .iter()
            .map(|p| registry.portfolio_feasible(city, p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            method: method.to_string(),
            rcr: rcr(city, registry, &portfolios)?,
            portfolios,
            objectives,
            feasible,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }

    /// Non-dominated feasible portfolios (indices into `portfolios`).
    pub fn feasible_front(&self) -> Vec<usize> {
        let idx: Vec<usize> = (0..self.portfolios.len()).filter(|&i| self.feasible[i]).collect();
        let pts: Vec<_> = idx.iter().map(|&i| self.objectives[i].to_array()).collect();
        nondominated_indices(&pts).into_iter().map(|j| idx[j]).collect()
    }

    /// Hypervolume of the feasible front in normalized objective space.
    pub fn hypervolume(&self, city: &CityInstance) -> Result<f64> {
        let pts = self
            .feasible_front()
            .iter()
            .map(|&i| Ok(normalize(&self.objectives[i], &city.objective_bounds)?.to_array()))
            .collect::<Result<Vec<_>>>()?;
        hypervolume_exact(&pts)
    }

    pub fn mean_objectives(&self) -> Option<ObjectiveVector> {
        if self.objectives.is_empty() {
            return None;
        }
        let n = self.objectives.len() as f64;
        let sum = self.objectives.iter().fold([0.0; 4], |mut acc, o| {
            for (a, v) in acc.iter_mut().zip(o.to_array()) {
                *a += v / n;
            }
            acc
        });
        Some(ObjectiveVector::from_array(sum))
    }

    /// config.json, portfolios.jsonl, archive.jsonl and metrics.tsv under `dir`.
    pub fn write_dir<C: Serialize>(&self, city: &CityInstance, config: &C, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("config.json"))?), config)
            .map_err(std::io::Error::from)?;
        let mut w = BufWriter::new(File::create(dir.join("portfolios.jsonl"))?);
        for i in 0..self.portfolios.len() {
            let line = serde_json::json!({
                "portfolio": self.portfolios[i],
                "objectives": self.objectives[i],
                "feasible": self.feasible[i],
            });
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        let mut archive = ParetoArchive::new();
        for i in self.feasible_front() {
            archive.insert(ArchiveRecord::new(
                city,
                self.objectives[i],
                self.portfolios[i].clone(),
                PreferenceVector::uniform(),
                0,
                0,
                Vec::new(),
            )?)?;
        }
        archive.write_jsonl(BufWriter::new(File::create(dir.join("archive.jsonl"))?))?;
        let mut m = BufWriter::new(File::create(dir.join("metrics.tsv"))?);
        writeln!(m, "method\tportfolios\trcr\thypervolume\twall_time_s")?;
        writeln!(
            m,
            "{}\t{}\t{:.4}\t{:.8}\t{:.3}",
            self.method,
            self.portfolios.len(),
            self.rcr,
            archive.hypervolume()?,
            self.wall_time_s
        )?;
        m.flush()?;
        Ok(())
    }
}

fn static_env<'a>(city: &'a CityInstance, registry: &'a ConstraintRegistry, params: &RewardParams) -> Result<Environment<'a>> {
    Environment::new(
        city,
        registry,
        EnvConfig {
            volatility: 0.0,
            masking: true,
            reward: params.clone(),
        },
    )
}

/// Portfolios built by uniform sampling among legal parcels at every step.
pub fn random_feasible(
    city: &CityInstance,
    registry: &ConstraintRegistry,
    params: &RewardParams,
    trials: usize,
    seed: u64,
) -> Result<BaselineResult> {
    let started = Instant::now();
    if trials == 0 {
        return Err(invalid("random sampling needs at least one trial"));
    }
    let env = static_env(city, registry, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut portfolios = Vec::with_capacity(trials);
    for _ in 0..trials {
        let (state, _) = env.rollout(&mut rng, |_, mask, rng| {
            let legal: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
            ParcelId(legal[rng.random_range(0..legal.len())] as u32)
        })?;
        portfolios.push(state.selected);
    }
    // Keep every trial (duplicates included) so means are over all draws.
    let objectives = portfolios
        .iter()
        .map(|p| evaluate_portfolio(city, params, p))
        .collect::<Result<Vec<_>>>()?;
    let feasible = portfolios
        .iter()
        .map(|p| registry.portfolio_feasible(city, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineResult {
        method: "random-feasible".into(),
        rcr: rcr(city, registry, &portfolios)?,
        portfolios: portfolios
            .into_iter()
            .map(|mut p| {
                p.sort();
                p
            })
            .collect(),
        objectives,
        feasible,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

/// Beam search over partial portfolios by cumulative cost; only legal
/// (completable) extensions are expanded.
pub fn greedy_cost_beam(
    city: &CityInstance,
    registry: &ConstraintRegistry,
    params: &RewardParams,
    beam_width: usize,
) -> Result<BaselineResult> {
    let started = Instant::now();
    if beam_width == 0 {
        return Err(invalid("beam width must be >= 1"));
    }
    let env = static_env(city, registry, params)?;
    let mut beam = vec![env.reset(0)];
    for _ in 0..env.capacity() {
        let mut next: Vec<(Vec<ParcelId>, PortfolioState)> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for state in &beam {
            let mask = env.action_mask(state);
            for (i, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
                let mut child = state.clone();
                child.push(city, ParcelId(i as u32));
                let key = child.sorted_ids();
                if seen.insert(key.clone()) {
                    next.push((key, child));
                }
            }
        }
        if next.is_empty() {
            return Err(Error::Infeasible("beam emptied before the portfolio was complete".into()));
        }
        next.sort_by(|a, b| a.1.cumulative_cost.total_cmp(&b.1.cumulative_cost).then_with(|| a.0.cmp(&b.0)));
        next.truncate(beam_width);
        beam = next.into_iter().map(|(_, s)| s).collect();
    }
    BaselineResult::evaluate(
        "greedy-cost-beam",
        city,
        registry,
        params,
        vec![beam[0].selected.clone()],
        started,
    )
}

/// Result view of a PPO run: the archive portfolios, with RCR taken over
/// the last epoch's greedy evaluations.
pub fn from_training_run(
    method: &str,
    city: &CityInstance,
    registry: &ConstraintRegistry,
    run: &TrainingRun,
    started: Instant,
) -> Result<BaselineResult> {
    let portfolios: Vec<Vec<ParcelId>> = run.archive.records().iter().map(|r| r.portfolio.clone()).collect();
    let mut res = BaselineResult::evaluate(method, city, registry, &run.config.reward, portfolios, started)?;
    res.rcr = run.metrics.last().map_or(0.0, |m| m.rcr);
    Ok(res)
}

/// PPO with a single policy on the uniform preference.
pub fn single_policy_morl(
    city: &CityInstance,
    registry: &ConstraintRegistry,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<(BaselineResult, TrainingRun)> {
    let started = Instant::now();
    let cfg = PpoConfig {
        population: 1,
        fixed_preference: Some(PreferenceVector::uniform()),
        ..cfg.clone()
    };
    let run = train_population(city, registry, &cfg, seed)?;
    Ok((from_training_run("single-policy-morl", city, registry, &run, started)?, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citygen::{generate_city, CityGenSpec};
    use crate::constraints::RegistryPolicy;

    fn setup(n: usize, seed: u64) -> (CityInstance, ConstraintRegistry) {
        let city = generate_city(&CityGenSpec::desk(n, seed)).unwrap();
        let reg = ConstraintRegistry::build(&city, &RegistryPolicy::default()).unwrap();
        (city, reg)
    }

    #[test]
    fn random_feasible_is_compliant_and_seeded() {
        let (city, reg) = setup(80, 1);
        let p = RewardParams::default();
        let a = random_feasible(&city, &reg, &p, 100, 7).unwrap();
        assert_eq!(a.portfolios.len(), 100);
        assert_eq!(a.rcr, 1.0);
        assert!(a.feasible.iter().all(|f| *f));
        let b = random_feasible(&city, &reg, &p, 100, 7).unwrap();
        assert_eq!(a.portfolios, b.portfolios);
        assert!(random_feasible(&city, &reg, &p, 0, 7).is_err());
    }

    #[test]
    fn beam_of_one_is_greedy_and_beam_beats_random_on_cost() {
        let p = RewardParams::default();
        for seed in 0..3 {
            let (city, reg) = setup(80, seed);
            let env = static_env(&city, &reg, &p).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (greedy, _) = env
                .rollout(&mut rng, |s, mask, _| {
                    (0..mask.len())
                        .filter(|&i| mask[i])
                        .min_by(|&a, &b| {
                            let ca = s.effective_cost(&city, ParcelId(a as u32));
                            let cb = s.effective_cost(&city, ParcelId(b as u32));
                            ca.total_cmp(&cb).then(a.cmp(&b))
                        })
                        .map(|i| ParcelId(i as u32))
                        .unwrap()
                })
                .unwrap();
            let one = greedy_cost_beam(&city, &reg, &p, 1).unwrap();
            assert_eq!(one.portfolios[0], greedy.sorted_ids());
            let wide = greedy_cost_beam(&city, &reg, &p, 50).unwrap();
            let rand = random_feasible(&city, &reg, &p, 100, seed).unwrap();
            let mean_neg_cost = rand.mean_objectives().unwrap().neg_cost;
            assert!(wide.objectives[0].neg_cost >= mean_neg_cost);
            assert!(wide.objectives[0].neg_cost >= one.objectives[0].neg_cost - 1e-9);
            assert_eq!(wide.rcr, 1.0);
        }
    }

    #[test]
    fn result_dir_layout() {
        let (city, reg) = setup(40, 2);
        let r = random_feasible(&city, &reg, &RewardParams::default(), 10, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.write_dir(&city, &serde_json::json!({"trials": 10}), dir.path()).unwrap();
        for f in ["config.json", "portfolios.jsonl", "archive.jsonl", "metrics.tsv"] {
            assert!(dir.path().join(f).exists());
        }
    }
}
