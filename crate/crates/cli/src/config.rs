//! Flat `key = value` settings files layered over the built-in defaults.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;
use siting_core::baselines::{MoeadConfig, Nsga2Config};
use siting_core::constraints::RegistryPolicy;
use siting_core::ppo::PpoConfig;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settings {
    pub ppo: PpoConfig,
    pub registry: RegistryPolicy,
    pub trials: usize,
    pub beam_width: usize,
    pub nsga2: Nsga2Config,
    pub moead: MoeadConfig,
}

impl Settings {
    pub fn new(paper_scale: bool, seed: u64) -> Self {
        if paper_scale {
            Self {
                ppo: PpoConfig::paper(),
                registry: RegistryPolicy::default(),
                trials: 100,
                beam_width: 50,
                nsga2: Nsga2Config::paper(seed),
                moead: MoeadConfig::paper(seed),
            }
        } else {
            Self {
                ppo: PpoConfig::desk(),
                registry: RegistryPolicy::default(),
                trials: 100,
                beam_width: 50,
                nsga2: Nsga2Config::desk(seed),
                moead: MoeadConfig::desk(seed),
            }
        }
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        self.apply_str(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Apply every `key = value` line; unknown keys are errors.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        let table: toml::Table = text.parse().context("expected flat `key = value` lines")?;
        for (key, value) in &table {
            self.set(key, value).with_context(|| format!("key `{key}`"))?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        let float = || -> Result<f64> {
            v.as_float()
                .or_else(|| v.as_integer().map(|i| i as f64))
                .ok_or_else(|| anyhow!("expected a number"))
        };
        let int = || -> Result<usize> {
            v.as_integer()
                .and_then(|i| usize::try_from(i).ok())
                .ok_or_else(|| anyhow!("expected a nonnegative integer"))
        };
        let boolean = || v.as_bool().ok_or_else(|| anyhow!("expected true or false"));
        let p = &mut self.ppo;
        match key {
            "population" => p.population = int()?,
            "epochs" => p.epochs = int()?,
            "updates_per_epoch" => p.updates_per_epoch = int()?,
            "timesteps_per_epoch" => p.timesteps_per_epoch = int()?,
            "clip" => p.clip = float()?,
            "gae_lambda" => p.gae_lambda = float()?,
            "entropy_coeff" => p.entropy_coeff = float()?,
            "reg_coeff" | "penalty_coeff" => p.penalty_coeff = float()?,
            "lr" => p.lr = float()?,
            "value_lr" => p.value_lr = float()?,
            "max_grad_norm" => p.max_grad_norm = float()?,
            "gamma" => {
                p.gamma = float()?;
                p.reward.gamma = p.gamma;
            }
            "masking" => p.masking = boolean()?,
            "volatility" => p.volatility = float()?,
            "ratio_guard" => p.ratio_guard = boolean()?,
            "attention" => p.policy.attention = boolean()?,
            "graph_degree" => p.policy.graph_degree = int()?,
            "beta1" => p.reward.beta1 = float()?,
            "beta2" => p.reward.beta2 = float()?,
            "beta4" => p.reward.beta4 = float()?,
            "horizon" => p.reward.horizon = u32::try_from(int()?)?,
            "fairness" => self.registry.fairness = boolean()?,
            "require_qct" => self.registry.require_qct = boolean()?,
            "minority_share_min" => self.registry.minority_share_min = float()?,
            "gini_max" => self.registry.gini_max = float()?,
            "district_minimum" => self.registry.district_minimum = Some(u32::try_from(int()?)?),
            "trials" => self.trials = int()?,
            "beam_width" => self.beam_width = int()?,
            "nsga_population" => self.nsga2.population = int()?,
            "nsga_generations" => self.nsga2.generations = int()?,
            "crossover_rate" => self.nsga2.crossover_rate = float()?,
            "moead_divisions" => self.moead.divisions = int()?,
            "moead_generations" => self.moead.generations = int()?,
            "moead_neighborhood" => self.moead.neighborhood = int()?,
            "mutation_rate" => {
                self.nsga2.mutation_rate = float()?;
                self.moead.mutation_rate = self.nsga2.mutation_rate;
            }
            "death_penalty" => {
                self.nsga2.death_penalty = boolean()?;
                self.moead.death_penalty = self.nsga2.death_penalty;
            }
            _ => bail!("unknown setting"),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_rejects() {
        let mut s = Settings::new(false, 1);
        s.apply_str("epochs = 3\nlr = 1e-4\nmasking = false\nreg_coeff = 50\n").unwrap();
        assert_eq!(s.ppo.epochs, 3);
        assert_eq!(s.ppo.lr, 1e-4);
        assert!(!s.ppo.masking);
        assert_eq!(s.ppo.penalty_coeff, 50.0);
        assert!(s.apply_str("nonsense = 1").is_err());
        assert!(s.apply_str("epochs = -1").is_err());
        assert!(s.apply_str("masking = 3").is_err());
        assert!(s.apply_str("[section]\nx = 1").is_err());
    }
}
