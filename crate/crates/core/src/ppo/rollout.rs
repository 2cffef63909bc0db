use rand::Rng;

use crate::domain::{ObjectiveBounds, ObjectiveVector, ParcelId, PortfolioState, PreferenceVector, NUM_OBJECTIVES};
use crate::env::Environment;
use crate::error::{invalid, Error, Result};
use crate::nn::Tensor;
use crate::policy::{masked_argmax, CityFeatures, EncodedValues, Policy, StateBatch, StateInput, ValueNet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    Stochastic,
    Greedy,
}

/// One recorded transition.
#[derive(Clone, Debug)]
pub struct Step {
    pub input: StateInput,
    pub action: usize,
    pub log_prob: f64,
    pub reward: ObjectiveVector,
    pub value: f64,
    /// V(s'), or 0 after a terminal step.
    pub next_value: f64,
    pub done: bool,
    /// Last recorded step of its episode (terminal or truncated).
    pub end: bool,
    /// Per-candidate constraint penalty; empty when actions are masked.
    pub penalties: Vec<f64>,
}

/// Steps of several episodes, stored episode after episode.
#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub steps: Vec<Step>,
    pub episodes: usize,
    /// Final states of the episodes, in order.
    pub finals: Vec<PortfolioState>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// λ-weighted rewards, each objective divided by its range.
    pub fn scalar_rewards(&self, pref: &PreferenceVector, bounds: &ObjectiveBounds) -> Vec<f64> {
        let w: [f64; NUM_OBJECTIVES] = std::array::from_fn(|k| pref.weights[k] / bounds.range(k));
        self.steps
            .iter()
            .map(|s| s.reward.to_array().iter().zip(w).map(|(r, w)| r * w).sum())
            .collect()
    }

    pub fn advantages(&self, rewards: &[f64], gamma: f64, lambda: f64) -> Result<Vec<f64>> {
        let values: Vec<f64> = self.steps.iter().map(|s| s.value).collect();
        let next: Vec<f64> = self.steps.iter().map(|s| s.next_value).collect();
        let ends: Vec<bool> = self.steps.iter().map(|s| s.end).collect();
        gae(rewards, &values, &next, &ends, gamma, lambda)
    }
}

/// Generalized advantage estimates. `next_values[t]` is the bootstrap
/// V(s_{t+1}) (0 after termination); `ends[t]` cuts the recursion.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    ends: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<Vec<f64>> {
    let n = rewards.len();
    if values.len() != n || next_values.len() != n || ends.len() != n {
        return Err(Error::Shape(format!(
            "gae inputs of lengths {n}, {}, {}, {}",
            values.len(),
            next_values.len(),
            ends.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(invalid("gamma and lambda must lie in [0, 1]"));
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        if ends[t] {
            running = 0.0;
        }
        let delta = rewards[t] + gamma * next_values[t] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    Ok(adv)
}

/// Sample a legal index from a log-probability row.
fn sample_row<R: Rng + ?Sized>(logp: &[f64], mask: &[bool], rng: &mut R) -> Option<usize> {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (c, (&lp, &ok)) in logp.iter().zip(mask).enumerate() {
        if ok {
            acc += lp.exp();
            last = Some(c);
            if u < acc {
                return Some(c);
            }
        }
    }
    last
}

fn episode_lengths(timesteps: usize, k: usize) -> Vec<usize> {
    let episodes = timesteps.div_ceil(k);
    (0..episodes)
        .map(|e| if e + 1 < episodes { k } else { timesteps - k * e })
        .collect()
}

fn state_inputs(
    env: &Environment,
    feats: &CityFeatures,
    pref: &PreferenceVector,
    states: &[&PortfolioState],
) -> Result<Vec<StateInput>> {
    states
        .iter()
        .map(|s| {
            let mask = env.action_mask(s);
            if !mask.contains(&true) {
                return Err(Error::Infeasible(format!("no legal action at step {}", s.step_index)));
            }
            Ok(feats.state_input(s, pref, mask))
        })
        .collect()
}

/// Choose actions for a batch of states; returns (action, log-prob) pairs.
pub fn act<R: Rng + ?Sized>(
    policy: &Policy,
    ev: &EncodedValues,
    inputs: &[StateInput],
    n: usize,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Vec<(usize, f64)>> {
    let refs: Vec<&StateInput> = inputs.iter().collect();
    let batch = StateBatch::new(&refs, n)?;
    let logp = policy.log_probs(ev, &batch)?;
    let greedy = match sampling {
        Sampling::Greedy => masked_argmax(&logp, &batch.mask),
        Sampling::Stochastic => Vec::new(),
    };
    inputs
        .iter()
        .enumerate()
        .map(|(r, inp)| {
            let a = match sampling {
                Sampling::Greedy => greedy[r],
                Sampling::Stochastic => sample_row(logp.row(r), &inp.mask, rng),
            }
            .ok_or_else(|| Error::Infeasible("empty action mask".into()))?;
            Ok((a, logp.at(r, a)))
        })
        .collect()
}

/// Run `timesteps` environment steps as ceil(T/K) episodes advanced in
/// lockstep; the last episode is truncated so the step count is exactly T.
pub fn collect_rollouts<R: Rng + ?Sized>(
    policy: &Policy,
    value: &ValueNet,
    env: &Environment,
    feats: &CityFeatures,
    timesteps: usize,
    sampling: Sampling,
    rng: &mut R,
) -> Result<Trajectory> {
    if timesteps == 0 {
        return Err(invalid("rollout needs at least one timestep"));
    }
    let k = env.capacity();
    let lens = episode_lengths(timesteps, k);
    let ev = policy.encode_values(feats)?;
    let mut states = vec![env.reset(0); lens.len()];
    let mut per_episode: Vec<Vec<Step>> = vec![Vec::with_capacity(k); lens.len()];
    for s in 0..k {
        let active: Vec<usize> = (0..lens.len()).filter(|&e| lens[e] > s).collect();
        if active.is_empty() {
            break;
        }
        let current: Vec<&PortfolioState> = active.iter().map(|&e| &states[e]).collect();
        let inputs = state_inputs(env, feats, &policy.pref, &current)?;
        let choices = act(policy, &ev, &inputs, feats.n, sampling, rng)?;
        for ((&e, input), (action, log_prob)) in active.iter().zip(inputs).zip(choices) {
            let penalties = if env.config.masking {
                Vec::new()
            } else {
                env.registry.candidate_penalties(env.city, &states[e])?
            };
            let (next, reward, done) = env.advance(&states[e], ParcelId(action as u32), rng);
            per_episode[e].push(Step {
                input,
                action,
                log_prob,
                reward,
                value: 0.0,
                next_value: 0.0,
                done,
                end: done || lens[e] == s + 1,
                penalties,
            });
            states[e] = next;
        }
    }

    // Bootstrap states of truncated episodes.
    let truncated: Vec<usize> = (0..lens.len())
        .filter(|&e| per_episode[e].last().is_some_and(|st| !st.done))
        .collect();
    let boot_states: Vec<&PortfolioState> = truncated.iter().map(|&e| &states[e]).collect();
    let boot_inputs = state_inputs(env, feats, &policy.pref, &boot_states)?;

    let steps: Vec<Step> = per_episode.into_iter().flatten().collect();
    let rows: Vec<Vec<f64>> = steps
        .iter()
        .map(|s| s.input.value.clone())
        .chain(boot_inputs.iter().map(|b| b.value.clone()))
        .collect();
    let predicted = value.predict(&Tensor::from_rows(&rows)?)?;
    let mut traj = Trajectory {
        episodes: lens.len(),
        finals: states,
        steps,
    };
    let mut boot = predicted[traj.steps.len()..].iter();
    let n_steps = traj.steps.len();
    for t in 0..n_steps {
        traj.steps[t].value = predicted[t];
        traj.steps[t].next_value = if !traj.steps[t].end {
            predicted[t + 1]
        } else if traj.steps[t].done {
            0.0
        } else {
            *boot.next().expect("bootstrap value per truncated episode")
        };
    }
    Ok(traj)
}

/// One episode with the given sampling; returns the final state and the
/// chosen parcels in order.
pub fn run_episode<R: Rng + ?Sized>(
    policy: &Policy,
    ev: &EncodedValues,
    env: &Environment,
    feats: &CityFeatures,
    sampling: Sampling,
    rng: &mut R,
) -> Result<PortfolioState> {
    let mut state = env.reset(0);
    loop {
        let inputs = state_inputs(env, feats, &policy.pref, &[&state])?;
        let (a, _) = act(policy, ev, &inputs, feats.n, sampling, rng)?[0];
        let (next, _, done) = env.advance(&state, ParcelId(a as u32), rng);
        state = next;
        if done {
            return Ok(state);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citygen::{generate_city, CityGenSpec};
    use crate::constraints::{ConstraintRegistry, RegistryPolicy};
    use crate::env::EnvConfig;
    use crate::policy::PolicyConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gae_matches_hand_computation() {
        // Two episodes: [1, 2] terminal, then [3] truncated with bootstrap 5.
        let r = [1.0, 2.0, 3.0];
        let v = [0.5, 1.0, 2.0];
        let nv = [1.0, 0.0, 5.0];
        let ends = [false, true, true];
        let (g, l) = (0.9, 0.8);
        let a = gae(&r, &v, &nv, &ends, g, l).unwrap();
        let d1 = 2.0 - 1.0;
        let d0 = 1.0 + g * 1.0 - 0.5;
        let d2 = 3.0 + g * 5.0 - 2.0;
        assert!((a[1] - d1).abs() < 1e-12);
        assert!((a[0] - (d0 + g * l * d1)).abs() < 1e-12);
        assert!((a[2] - d2).abs() < 1e-12);
        assert!(gae(&r, &v, &nv, &ends[..2], g, l).is_err());
    }

    #[test]
    fn gae_with_unit_lambda_is_discounted_return_minus_value() {
        let r = [1.0, -2.0, 0.5, 4.0];
        let v = [0.3, 0.1, -0.2, 0.7];
        let mut nv = v[1..].to_vec();
        nv.push(0.0);
        let ends = [false, false, false, true];
        let g = 0.95;
        let a = gae(&r, &v, &nv, &ends, g, 1.0).unwrap();
        for t in 0..4 {
            let ret: f64 = (t..4).map(|j| g.powi((j - t) as i32) * r[j]).sum();
            assert!((a[t] - (ret - v[t])).abs() < 1e-12);
        }
    }

    #[test]
    fn episode_lengths_cover_budget() {
        assert_eq!(episode_lengths(12, 5), vec![5, 5, 2]);
        assert_eq!(episode_lengths(10, 5), vec![5, 5]);
        assert_eq!(episode_lengths(3, 5), vec![3]);
    }

    #[test]
    fn rollouts_have_exact_length_and_legal_actions() {
        let city = generate_city(&CityGenSpec::desk(60, 3)).unwrap();
        let reg = ConstraintRegistry::build(&city, &RegistryPolicy::default()).unwrap();
        let env = Environment::new(&city, &reg, EnvConfig::default()).unwrap();
        let feats = CityFeatures::new(&city, 8);
        let cfg = PolicyConfig::desk();
        let pref = PreferenceVector::uniform();
        let policy = Policy::new(cfg.clone(), pref, &feats, 1).unwrap();
        let value = ValueNet::new(feats.value_input_dim(), &cfg.value_hidden, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for t in [1, 7, 13] {
            let traj = collect_rollouts(&policy, &value, &env, &feats, t, Sampling::Stochastic, &mut rng).unwrap();
            assert_eq!(traj.len(), t);
            assert_eq!(traj.episodes, t.div_ceil(city.portfolio_capacity));
            for s in &traj.steps {
                assert!(s.input.mask[s.action]);
                assert!(s.log_prob <= 0.0);
            }
            assert_eq!(traj.steps.iter().filter(|s| s.end).count(), traj.episodes);
        }
        let calm = Environment::new(&city, &reg, EnvConfig { volatility: 0.0, ..EnvConfig::default() }).unwrap();
        let full = collect_rollouts(&policy, &value, &calm, &feats, 10, Sampling::Greedy, &mut rng).unwrap();
        for st in &full.finals {
            assert!(reg.portfolio_feasible(&city, &st.selected).unwrap());
        }
        // Greedy episodes at zero volatility are identical.
        assert_eq!(full.finals[0].selected, full.finals[1].selected);
    }
}
