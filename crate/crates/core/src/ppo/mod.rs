//! Population PPO over preference-conditioned policies with a shared Pareto archive.

mod archive;
mod loss;
mod rollout;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

pub use archive::{nondominated_filter, ArchiveRecord, ParetoArchive};
pub use loss::{clipped_objective, ppo_loss, LossBatch, LossCoefficients, LossParts};
pub use rollout::{act, collect_rollouts, gae, run_episode, Sampling, Step, Trajectory};

use crate::constraints::ConstraintRegistry;
use crate::domain::{CityInstance, ObjectiveVector, ParcelId, PreferenceVector};
use crate::env::{EnvConfig, Environment};
use crate::error::{invalid, Error, Result};
use crate::metrics::rcr;
use crate::nn::{Adam, Tape, Tensor};
use crate::policy::{CityFeatures, Policy, PolicyConfig, StateBatch, StateInput, ValueNet, FACTOR_GROUPS};
use crate::reward::{portfolio_objectives, RewardParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    /// Number of policies M.
    pub population: usize,
    pub epochs: usize,
    pub updates_per_epoch: usize,
    pub timesteps_per_epoch: usize,
    pub clip: f64,
    pub gae_lambda: f64,
    pub entropy_coeff: f64,
    /// Weight of the expected constraint penalty (only active without masking).
    pub penalty_coeff: f64,
    pub lr: f64,
    pub value_lr: f64,
    pub max_grad_norm: f64,
    /// Undo an update that leaves more than 5% of the batch ratios outside
    /// [1−ε−0.05, 1+ε+0.05] and end the epoch's updates there.
    pub ratio_guard: bool,
    pub gamma: f64,
    pub masking: bool,
    pub volatility: f64,
    pub reward: RewardParams,
    pub policy: PolicyConfig,
    /// Give every policy this preference instead of simplex draws.
    pub fixed_preference: Option<PreferenceVector>,
}

impl PpoConfig {
    /// Small settings that train in well under a minute on one core.
    pub fn desk() -> Self {
        Self {
            population: 4,
            epochs: 50,
            updates_per_epoch: 10,
            timesteps_per_epoch: 512,
            clip: 0.2,
            gae_lambda: 0.95,
            entropy_coeff: 0.01,
            penalty_coeff: 10.0,
            lr: 3e-4,
            value_lr: 1e-3,
            max_grad_norm: 0.5,
            ratio_guard: true,
            gamma: 0.95,
            masking: true,
            volatility: crate::env::DEFAULT_VOLATILITY,
            reward: RewardParams::default(),
            policy: PolicyConfig::desk(),
            fixed_preference: None,
        }
    }

    /// Full-scale settings: 20 policies, 500 epochs, 2048 steps per epoch.
    pub fn paper() -> Self {
        Self {
            population: 20,
            epochs: 500,
            timesteps_per_epoch: 2048,
            policy: PolicyConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.population == 0 {
            return bad("population must be at least 1");
        }
        if self.updates_per_epoch == 0 || self.timesteps_per_epoch == 0 {
            return bad("updates and timesteps per epoch must be positive");
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad("clip must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) || !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1] and lambda in [0, 1]");
        }
        let nonneg = [self.entropy_coeff, self.penalty_coeff, self.volatility];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("coefficients and volatility must be finite and nonnegative");
        }
        let pos = [self.lr, self.value_lr, self.max_grad_norm];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return bad("learning rates and gradient clip must be positive");
        }
        self.policy.validate()
    }

    fn env_config(&self, volatility: f64) -> EnvConfig {
        EnvConfig {
            volatility,
            masking: self.masking,
            reward: self.reward.clone(),
        }
    }

    fn coefficients(&self) -> LossCoefficients {
        LossCoefficients {
            clip: self.clip,
            entropy: self.entropy_coeff,
            penalty: self.penalty_coeff,
        }
    }
}

/// `m` preference vectors drawn uniformly from the probability simplex.
pub fn sample_preferences(m: usize, seed: u64) -> Result<Vec<PreferenceVector>> {
    if m == 0 {
        return Err(invalid("need at least one preference vector"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| PreferenceVector::normalized(std::array::from_fn(|_| Exp1.sample(&mut rng))))
        .collect()
}

/// Diagnostics of one policy's update phase.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct UpdateStats {
    pub loss_first: f64,
    pub loss_last: f64,
    pub entropy: f64,
    pub penalty: f64,
    /// Share of post-update ratios within [1−ε−0.05, 1+ε+0.05].
    pub ratio_in_band: f64,
    /// Updates kept (fewer when the ratio guard ended the epoch).
    pub updates: usize,
    pub approx_kl: f64,
    pub value_loss: f64,
    pub mean_reward: f64,
}

/// Greedy zero-volatility evaluation of one policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub policy: usize,
    pub portfolio: Vec<ParcelId>,
    pub objectives: ObjectiveVector,
    pub feasible: bool,
    pub attention: Vec<[f64; FACTOR_GROUPS]>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub hypervolume: f64,
    /// Hypervolume of the front built from this epoch's evaluations alone.
    pub epoch_hypervolume: f64,
    pub archive_size: usize,
    pub rcr: f64,
    pub added: usize,
    pub updates: Vec<UpdateStats>,
}

pub struct TrainingRun {
    pub config: PpoConfig,
    pub preferences: Vec<PreferenceVector>,
    pub archive: ParetoArchive,
    pub metrics: Vec<EpochMetrics>,
    pub policies: Vec<Policy>,
    pub values: Vec<ValueNet>,
    /// Every evaluated portfolio, epoch by epoch.
    pub evaluations: Vec<Vec<Evaluation>>,
}

impl TrainingRun {
    pub fn final_hypervolume(&self) -> f64 {
        self.metrics.last().map_or(0.0, |m| m.hypervolume)
    }
}

struct Learner {
    policy: Policy,
    value: ValueNet,
    opt: Adam,
    value_opt: Adam,
    rng: ChaCha8Rng,
}

impl Learner {
    fn train_epoch(&mut self, env: &Environment, feats: &CityFeatures, cfg: &PpoConfig) -> Result<UpdateStats> {
        let traj = collect_rollouts(
            &self.policy,
            &self.value,
            env,
            feats,
            cfg.timesteps_per_epoch,
            Sampling::Stochastic,
            &mut self.rng,
        )?;
        let rewards = traj.scalar_rewards(&self.policy.pref, &env.city.objective_bounds);
        let raw = traj.advantages(&rewards, cfg.gamma, cfg.gae_lambda)?;
        let returns: Vec<f64> = raw.iter().zip(&traj.steps).map(|(a, s)| a + s.value).collect();
        let advantages = standardize(&raw);

        let inputs: Vec<&StateInput> = traj.steps.iter().map(|s| &s.input).collect();
        let batch = StateBatch::new(&inputs, feats.n)?;
        let mask = batch.mask_tensor();
        let penalties = if cfg.masking {
            None
        } else {
            let rows: Vec<Vec<f64>> = traj.steps.iter().map(|s| s.penalties.clone()).collect();
            Some(Tensor::from_rows(&rows)?)
        };
        let actions: Vec<usize> = traj.steps.iter().map(|s| s.action).collect();
        let old: Vec<f64> = traj.steps.iter().map(|s| s.log_prob).collect();
        let lb = LossBatch {
            actions: &actions,
            old_log_probs: &old,
            advantages: &advantages,
            mask: &mask,
            penalties: penalties.as_ref(),
        };

        let mut stats = UpdateStats {
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            ..UpdateStats::default()
        };
        let band = |ratios: &[f64]| {
            let (lo, hi) = (1.0 - cfg.clip - 0.05, 1.0 + cfg.clip + 0.05);
            ratios.iter().filter(|r| (lo..=hi).contains(*r)).count() as f64 / ratios.len() as f64
        };
        let mut previous = None;
        let mut kept = (1.0, 0.0);
        for u in 0..=cfg.updates_per_epoch {
            let (parts, mut grads) = {
                let mut t = Tape::new(&self.policy.params);
                let enc = self.policy.encode(&mut t, feats)?;
                let out = self.policy.head(&mut t, &enc, &batch)?;
                let (loss, parts) = ppo_loss(&mut t, out.logp, &lb, cfg.coefficients())?;
                (parts, t.backward(loss)?)
            };
            // The forward pass at u sees the parameters after u updates.
            let in_band = band(&parts.ratios);
            if cfg.ratio_guard && in_band < 0.95 {
                if let Some(p) = previous.take() {
                    self.policy.params = p;
                    stats.updates -= 1;
                }
                break;
            }
            kept = (in_band, approx_kl(&parts.ratios));
            if u == 0 {
                stats.loss_first = parts.loss;
            }
            stats.loss_last = parts.loss;
            stats.entropy = parts.entropy;
            stats.penalty = parts.penalty;
            if u == cfg.updates_per_epoch {
                break;
            }
            if !grads.is_finite() {
                return Err(Error::Training(format!("non-finite gradient at update {u}")));
            }
            grads.clip_norm(cfg.max_grad_norm);
            if cfg.ratio_guard {
                previous = Some(self.policy.params.clone());
            }
            self.opt.step(&mut self.policy.params, &grads)?;
            stats.updates += 1;
        }
        (stats.ratio_in_band, stats.approx_kl) = kept;

        let vx = Tensor::from_rows(&traj.steps.iter().map(|s| s.input.value.clone()).collect::<Vec<_>>())?;
        for _ in 0..cfg.updates_per_epoch {
            let (l, mut g) = self.value.mse_grads(&vx, &returns)?;
            g.clip_norm(cfg.max_grad_norm);
            self.value_opt.step(&mut self.value.params, &g)?;
            stats.value_loss = l;
        }
        Ok(stats)
    }
}

/// Sample estimate of KL(old ‖ new) from ratios r = π_new/π_old: E[(r − 1) − ln r].
fn approx_kl(ratios: &[f64]) -> f64 {
    ratios.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / ratios.len() as f64
}

fn standardize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-8);
    x.iter().map(|v| (v - mean) / sd).collect()
}

/// Greedy episode at zero volatility with attention rows of the chosen parcels.
pub fn evaluate_policy(
    policy: &Policy,
    index: usize,
    env: &Environment,
    feats: &CityFeatures,
) -> Result<Evaluation> {
    let ev = policy.encode_values(feats)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let state = run_episode(policy, &ev, env, feats, Sampling::Greedy, &mut rng)?;
    let objectives = portfolio_objectives(env.city, &env.config.reward, &state);
    let feasible = env.registry.portfolio_feasible(env.city, &state.selected)?;
    let attention = state
        .selected
        .iter()
        .map(|id| std::array::from_fn(|g| ev.received.at(id.index(), g)))
        .collect();
    Ok(Evaluation {
        policy: index,
        portfolio: state.selected.clone(),
        objectives,
        feasible,
        attention,
    })
}

fn records(
    city: &CityInstance,
    evals: &[Evaluation],
    prefs: &[PreferenceVector],
    epoch: usize,
) -> Result<Vec<ArchiveRecord>> {
    evals
        .iter()
        .filter(|e| e.feasible)
        .map(|e| {
            ArchiveRecord::new(
                city,
                e.objectives,
                e.portfolio.clone(),
                prefs[e.policy],
                e.policy,
                epoch,
                e.attention.clone(),
            )
        })
        .collect()
}

#[cfg(feature = "parallel")]
fn for_each_learner<T: Send>(
    learners: &mut [Learner],
    f: impl Fn(usize, &mut Learner) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    use rayon::prelude::*;
    learners.par_iter_mut().enumerate().map(|(i, l)| f(i, l)).collect()
}

#[cfg(not(feature = "parallel"))]
fn for_each_learner<T: Send>(
    learners: &mut [Learner],
    f: impl Fn(usize, &mut Learner) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    learners.iter_mut().enumerate().map(|(i, l)| f(i, l)).collect()
}

/// Train the population. Epoch 0 records the untrained policies; each later
/// epoch collects rollouts, runs the updates and merges the greedy
/// evaluations into the archive.
pub fn train_population(
    city: &CityInstance,
    registry: &ConstraintRegistry,
    cfg: &PpoConfig,
    seed: u64,
) -> Result<TrainingRun> {
    train_population_with(city, registry, cfg, seed, |_| {})
}

/// Like [`train_population`], calling `progress` after every epoch.
pub fn train_population_with(
    city: &CityInstance,
    registry: &ConstraintRegistry,
    cfg: &PpoConfig,
    seed: u64,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<TrainingRun> {
    cfg.validate()?;
    let feats = CityFeatures::new(city, cfg.policy.graph_degree);
    let train_env = Environment::new(city, registry, cfg.env_config(cfg.volatility))?;
    let eval_env = Environment::new(city, registry, cfg.env_config(0.0))?;
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let prefs = match cfg.fixed_preference {
        Some(p) => vec![p; cfg.population],
        None => sample_preferences(cfg.population, seeder.random())?,
    };
    let mut learners = prefs
        .iter()
        .map(|&pref| {
            let policy = Policy::new(cfg.policy.clone(), pref, &feats, seeder.random())?;
            let value = ValueNet::new(feats.value_input_dim(), &cfg.policy.value_hidden, seeder.random());
            Ok(Learner {
                opt: Adam::new(&policy.params, cfg.lr),
                value_opt: Adam::new(&value.params, cfg.value_lr),
                rng: ChaCha8Rng::seed_from_u64(seeder.random()),
                policy,
                value,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut archive = ParetoArchive::new();
    let mut metrics = Vec::with_capacity(cfg.epochs + 1);
    let mut evaluations = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let updates = if epoch == 0 {
            Vec::new()
        } else {
            for_each_learner(&mut learners, |_, l| l.train_epoch(&train_env, &feats, cfg))?
        };
        let evals = for_each_learner(&mut learners, |i, l| evaluate_policy(&l.policy, i, &eval_env, &feats))?;
        let recs = records(city, &evals, &prefs, epoch)?;
        let mut epoch_front = ParetoArchive::new();
        epoch_front.merge(recs.iter().cloned())?;
        let before = archive.hypervolume()?;
        let added = archive.merge(recs)?;
        let hv = archive.hypervolume()?;
        if hv < before - 1e-12 {
            return Err(Error::Training(format!("archive hypervolume fell from {before} to {hv}")));
        }
        let portfolios: Vec<Vec<ParcelId>> = evals.iter().map(|e| e.portfolio.clone()).collect();
        let m = EpochMetrics {
            epoch,
            hypervolume: hv,
            epoch_hypervolume: epoch_front.hypervolume()?,
            archive_size: archive.len(),
            rcr: rcr(city, registry, &portfolios)?,
            added,
            updates,
        };
        progress(&m);
        metrics.push(m);
        evaluations.push(evals);
    }
    let (policies, values) = learners.into_iter().map(|l| (l.policy, l.value)).unzip();
    Ok(TrainingRun {
        config: cfg.clone(),
        preferences: prefs,
        archive,
        metrics,
        policies,
        values,
        evaluations,
    })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), v).map_err(std::io::Error::from)?;
    Ok(())
}

/// Write config.json, preferences.json, metrics.tsv, hv_curve.tsv,
/// archive.jsonl and per-policy checkpoints under `dir`.
pub fn write_run_dir(run: &TrainingRun, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("checkpoints"))?;
    write_json(&dir.join("config.json"), &run.config)?;
    write_json(&dir.join("preferences.json"), &run.preferences)?;

    let mut m = BufWriter::new(File::create(dir.join("metrics.tsv"))?);
    writeln!(m, "epoch\tpolicy\tloss_first\tloss_last\tentropy\tpenalty\tratio_in_band\tvalue_loss\tmean_reward")?;
    for e in &run.metrics {
        for (i, u) in e.updates.iter().enumerate() {
            writeln!(
                m,
                "{}\t{i}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.4}\t{:.6}\t{:.6}",
                e.epoch, u.loss_first, u.loss_last, u.entropy, u.penalty, u.ratio_in_band, u.value_loss, u.mean_reward
            )?;
        }
    }
    m.flush()?;

    let mut h = BufWriter::new(File::create(dir.join("hv_curve.tsv"))?);
    writeln!(h, "epoch\thypervolume\tepoch_hypervolume\tarchive_size\tadded\trcr")?;
    for e in &run.metrics {
        writeln!(
            h,
            "{}\t{:.8}\t{:.8}\t{}\t{}\t{:.4}",
            e.epoch, e.hypervolume, e.epoch_hypervolume, e.archive_size, e.added, e.rcr
        )?;
    }
    h.flush()?;

    run.archive.write_jsonl(BufWriter::new(File::create(dir.join("archive.jsonl"))?))?;
    for (i, (p, v)) in run.policies.iter().zip(&run.values).enumerate() {
        p.write_checkpoint(BufWriter::new(File::create(dir.join(format!("checkpoints/policy_{i}.bin")))?))?;
        v.params
            .write_checkpoint(BufWriter::new(File::create(dir.join(format!("checkpoints/value_{i}.bin")))?))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citygen::{generate_city, CityGenSpec};
    use crate::constraints::RegistryPolicy;

    fn quick() -> PpoConfig {
        PpoConfig {
            population: 2,
            epochs: 2,
            updates_per_epoch: 3,
            timesteps_per_epoch: 40,
            ..PpoConfig::desk()
        }
    }

    #[test]
    fn preferences_lie_on_simplex() {
        let p = sample_preferences(50, 9).unwrap();
        assert_eq!(p.len(), 50);
        for v in &p {
            assert!((v.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(v.weights.iter().all(|w| *w >= 0.0));
        }
        assert!(sample_preferences(0, 1).is_err());
        assert_eq!(sample_preferences(3, 4).unwrap(), sample_preferences(3, 4).unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(PpoConfig::desk().validate().is_ok());
        assert!(PpoConfig::paper().validate().is_ok());
        let mut c = PpoConfig::desk();
        c.population = 0;
        assert!(c.validate().is_err());
        c = PpoConfig::desk();
        c.clip = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_writes_run_dir() {
        let city = generate_city(&CityGenSpec::desk(60, 2)).unwrap();
        let reg = ConstraintRegistry::build(&city, &RegistryPolicy::default()).unwrap();
        let a = train_population(&city, &reg, &quick(), 5).unwrap();
        let b = train_population(&city, &reg, &quick(), 5).unwrap();
        assert_eq!(a.archive, b.archive);
        assert_eq!(a.metrics.len(), 3);
        assert!(a.metrics.windows(2).all(|w| w[1].hypervolume >= w[0].hypervolume));
        assert!(a.metrics.iter().all(|m| m.rcr == 1.0));
        assert!(a.archive.is_mutually_nondominated());
        let dir = tempfile::tempdir().unwrap();
        write_run_dir(&a, dir.path()).unwrap();
        for f in ["config.json", "metrics.tsv", "hv_curve.tsv", "archive.jsonl", "checkpoints/policy_0.bin"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = ParetoArchive::read_jsonl(std::io::BufReader::new(File::open(dir.path().join("archive.jsonl")).unwrap())).unwrap();
        assert_eq!(back, a.archive);
    }
}
