//! Regulatory compliance: a fixed registry of 127 constraints, short-circuit
//! checking, a quadratic violation penalty and greedy repair.
//!
//! `check(state, action)` asks whether adding the parcels of `action` to the
//! partial portfolio in `state` is compliant. Per-parcel rules look at the
//! action's parcels (state members were admitted earlier); budget looks at
//! the combined appraised cost; distribution and fairness rules apply only
//! when the combined portfolio has exactly K sites. To audit a finished
//! portfolio, check it as a single action against an empty state.
//!
//! Every rule depends only on which parcels are chosen, never on the order
//! or on market drift during selection, so compliance is a property of the
//! portfolio itself.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::domain::{regbit, CityInstance, Parcel, ParcelId, PortfolioState, REG_DIM};
use crate::error::{invalid, Error, Result};
use crate::reward::gini_unchecked;

pub const REGISTRY_SIZE: usize = 127;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    QctEligibility,
    Budget,
    GeographicDistribution,
    Environmental,
    Zoning,
    Fairness,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Hard,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    PerParcel,
    Portfolio,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rule {
    /// Total appraised cost at most the budget.
    Budget,
    /// At least `minimum` sites in `district` (terminal).
    DistrictMinimum { district: u32, minimum: u32 },
    /// No site in a 100-year flood zone unless it carries the mitigation flag.
    NoUnmitigatedFlood,
    /// Zoning designation `zone`; sites in it are rejected when `prohibited`.
    Zone { zone: usize, prohibited: bool },
    /// Every site must be QCT-designated when `required`.
    QctPortfolio { required: bool },
    /// Share of minority-tract sites at least `min` (terminal).
    MinorityShare { min: f64 },
    /// Gini coefficient of district counts at most `max` (terminal).
    GiniMax { max: f64 },
    /// Every site must carry regulatory indicator `bit`.
    RegBitRequired { bit: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub id: usize,
    pub category: Category,
    pub severity: Severity,
    pub scope: Scope,
    /// Disabled constraints are always satisfied (placeholders or relaxed).
    pub enabled: bool,
    pub rule: Rule,
}

impl Constraint {
    fn terminal_only(&self) -> bool {
        matches!(
            self.rule,
            Rule::DistrictMinimum { .. } | Rule::MinorityShare { .. } | Rule::GiniMax { .. }
        )
    }

    /// Violation magnitude of a single parcel for a per-parcel rule.
    fn parcel_violation(&self, p: &Parcel) -> bool {
        match self.rule {
            Rule::NoUnmitigatedFlood => p.flood_zone() && !p.reg.get(regbit::FLOOD_MITIGATION),
            Rule::Zone { zone, prohibited } => prohibited && p.reg.get(regbit::ZONE_BASE + zone),
            Rule::QctPortfolio { required } => required && !p.is_qct(),
            Rule::RegBitRequired { bit } => !p.reg.get(bit),
            _ => false,
        }
    }

    pub fn description(&self) -> String {
        let text = match &self.rule {
            Rule::Budget => "total cost <= budget".to_string(),
            Rule::DistrictMinimum { district, minimum } => {
                format!(">= {minimum} sites in district {district}")
            }
            Rule::NoUnmitigatedFlood => "no sites in 100-year flood zone without mitigation".into(),
            Rule::Zone { zone, prohibited } => format!(
                "zone R{}: {}",
                zone + 1,
                if *prohibited { "prohibited" } else { "permitted" }
            ),
            Rule::QctPortfolio { required } => {
                if *required {
                    "every site QCT-designated".into()
                } else {
                    "QCT designation not required".into()
                }
            }
            Rule::MinorityShare { min } => format!("minority-tract share >= {min:.2}"),
            Rule::GiniMax { max } => format!("district Gini <= {max:.2}"),
            Rule::RegBitRequired { bit } => format!("regulatory indicator {bit} present"),
        };
        if self.enabled {
            text
        } else {
            format!("{text} [disabled]")
        }
    }
}

/// Knobs for instantiating the registry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryPolicy {
    pub fairness: bool,
    pub require_qct: bool,
    /// Zone indices (0 = R1) in which sites are prohibited.
    pub prohibited_zones: Vec<usize>,
    pub minority_share_min: f64,
    pub gini_max: f64,
    /// Per-district minimum; `None` means min(2, K / D).
    pub district_minimum: Option<u32>,
}

impl Default for RegistryPolicy {
    fn default() -> Self {
        Self {
            fairness: true,
            require_qct: false,
            prohibited_zones: vec![0, 1],
            minority_share_min: 0.30,
            gini_max: 0.85,
            district_minimum: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TerminalRequirements {
    pub district_min: Vec<u32>,
    pub minority_share: Option<f64>,
    pub gini_max: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckMode {
    EarlyStop,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplianceReport {
    pub feasible: bool,
    pub first_violation: Option<usize>,
    /// Every violated constraint with its magnitude (full mode only).
    pub violations: Vec<(usize, f64)>,
    pub checked_count: usize,
}

/// Successful repair.
#[derive(Clone, Debug, PartialEq)]
pub struct Repair {
    pub action: Vec<ParcelId>,
    /// (removed, inserted) pairs in application order.
    pub swaps: Vec<(ParcelId, ParcelId)>,
    pub removed: Vec<ParcelId>,
    /// Soft constraints that had to be relaxed; the action passes `check`
    /// under `registry.relaxed(&relaxed)`.
    pub relaxed: Vec<usize>,
}

impl Repair {
    pub fn modifications(&self) -> usize {
        self.swaps.len() + self.removed.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RepairOutcome {
    Repaired(Repair),
    Failed { reason: String },
}

/// Aggregates of state + action needed by portfolio rules.
struct View<'a> {
    action: &'a [ParcelId],
    cost: f64,
    counts: Vec<u32>,
    minority: u32,
    size: usize,
    terminal: bool,
}

/// Immutable constraint set bound to one city.
#[derive(Clone, Debug)]
pub struct ConstraintRegistry {
    constraints: Vec<Constraint>,
    budget: f64,
    capacity: usize,
    districts: usize,
    /// Ids of per-parcel constraints each parcel violates (enabled or not).
    parcel_violations: Vec<Vec<u16>>,
}

impl ConstraintRegistry {
    pub fn build(city: &CityInstance, policy: &RegistryPolicy) -> Result<Self> {
        let d = city.districts as usize;
        let fixed = 1 + d + 1 + regbit::NUM_ZONES + 1 + 2;
        if fixed > REGISTRY_SIZE || REGISTRY_SIZE - fixed > REG_DIM - regbit::REQUIREMENT_BASE {
            return Err(Error::Config(format!(
                "{d} districts do not fit a registry of {REGISTRY_SIZE} constraints"
            )));
        }
        if policy.prohibited_zones.iter().any(|&z| z >= regbit::NUM_ZONES) {
            return Err(invalid("prohibited zone index out of range"));
        }
        let minimum = policy
            .district_minimum
            .unwrap_or_else(|| 2.min(city.portfolio_capacity / d) as u32);

        let mut cs = Vec::with_capacity(REGISTRY_SIZE);
        let mut push = |category, severity, scope, enabled, rule| {
            let id = cs.len();
            cs.push(Constraint {
                id,
                category,
                severity,
                scope,
                enabled,
                rule,
            });
        };
        use Category::*;
        use Scope::*;
        push(Budget, Severity::Hard, Portfolio, true, Rule::Budget);
        for district in 0..d as u32 {
            push(
                GeographicDistribution,
                Severity::Hard,
                Portfolio,
                minimum > 0,
                Rule::DistrictMinimum { district, minimum },
            );
        }
        push(Environmental, Severity::Hard, PerParcel, true, Rule::NoUnmitigatedFlood);
        for zone in 0..regbit::NUM_ZONES {
            let prohibited = policy.prohibited_zones.contains(&zone);
            push(Zoning, Severity::Hard, PerParcel, prohibited, Rule::Zone { zone, prohibited });
        }
        push(
            QctEligibility,
            Severity::Hard,
            PerParcel,
            policy.require_qct,
            Rule::QctPortfolio {
                required: policy.require_qct,
            },
        );
        push(
            Fairness,
            Severity::Soft,
            Portfolio,
            policy.fairness,
            Rule::MinorityShare {
                min: policy.minority_share_min,
            },
        );
        push(
            Fairness,
            Severity::Soft,
            Portfolio,
            policy.fairness,
            Rule::GiniMax {
                max: policy.gini_max,
            },
        );
        let fill = REGISTRY_SIZE - fixed;
        for bit in regbit::REQUIREMENT_BASE..regbit::REQUIREMENT_BASE + fill {
            let category = if bit % 2 == 0 { Zoning } else { Environmental };
            push(category, Severity::Hard, PerParcel, true, Rule::RegBitRequired { bit });
        }
        debug_assert_eq!(cs.len(), REGISTRY_SIZE);

        let parcel_violations = city
            .parcels
            .iter()
            .map(|p| {
                cs.iter()
                    .filter(|c| c.scope == Scope::PerParcel && c.parcel_violation(p))
                    .map(|c| c.id as u16)
                    .collect()
            })
            .collect();
        Ok(Self {
            constraints: cs,
            budget: city.budget_total,
            capacity: city.portfolio_capacity,
            districts: d,
            parcel_violations,
        })
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn get(&self, id: usize) -> Option<&Constraint> {
        self.constraints.get(id)
    }

    pub fn parcel_count(&self) -> usize {
        self.parcel_violations.len()
    }

    /// Copy with the given soft constraints disabled. Hard ids are ignored.
    pub fn relaxed(&self, ids: &[usize]) -> Self {
        let mut out = self.clone();
        for &id in ids {
            if let Some(c) = out.constraints.get_mut(id) {
                if c.severity == Severity::Soft {
                    c.enabled = false;
                }
            }
        }
        out
    }

    /// Copy with soft constraints switched on or off by id (overlay for
    /// what-if queries). Unknown or hard ids are rejected.
    pub fn with_soft_overlay(&self, overlay: &[(usize, bool)]) -> Result<Self> {
        let mut out = self.clone();
        for &(id, on) in overlay {
            let c = out
                .constraints
                .get_mut(id)
                .ok_or_else(|| invalid(format!("unknown constraint id {id}")))?;
            if c.severity != Severity::Soft {
                return Err(invalid(format!("constraint {id} is hard and cannot be toggled")));
            }
            c.enabled = on;
        }
        Ok(out)
    }

    /// Ids of enabled soft constraints.
    pub fn enabled_soft(&self) -> Vec<usize> {
        self.constraints
            .iter()
            .filter(|c| c.severity == Severity::Soft && c.enabled)
            .map(|c| c.id)
            .collect()
    }

    /// True when the parcel violates no enabled per-parcel constraint.
    pub fn parcel_admissible(&self, id: ParcelId) -> bool {
        self.parcel_violations[id.index()]
            .iter()
            .all(|&j| !self.constraints[j as usize].enabled)
    }

    fn view<'a>(&self, city: &CityInstance, state: &PortfolioState, action: &'a [ParcelId]) -> Result<View<'a>> {
        let mut seen = HashSet::with_capacity(action.len());
        let mut cost: f64 = state.selected.iter().map(|id| city.parcels[id.index()].appraised_cost()).sum();
        let mut counts = state.district_counts.clone();
        let mut minority = state.minority_count;
        for &id in action {
            if id.index() >= city.n() || id.index() >= self.parcel_violations.len() {
                return Err(invalid(format!("unknown parcel id {id}")));
            }
            if !seen.insert(id) || state.contains(id) {
                return Err(invalid(format!("parcel {id} selected twice")));
            }
            let p = &city.parcels[id.index()];
            cost += p.appraised_cost();
            counts[p.district_id as usize] += 1;
            minority += p.demographics.minority_tract as u32;
        }
        let size = state.selected.len() + action.len();
        if size > self.capacity {
            return Err(invalid(format!(
                "portfolio of {size} exceeds capacity {}",
                self.capacity
            )));
        }
        Ok(View {
            action,
            cost,
            counts,
            minority,
            size,
            terminal: size == self.capacity,
        })
    }

    fn violation(&self, c: &Constraint, v: &View) -> f64 {
        if !c.enabled || (c.terminal_only() && !v.terminal) {
            return 0.0;
        }
        match c.rule {
            Rule::Budget => (v.cost - self.budget) / self.budget,
            Rule::DistrictMinimum { district, minimum } => {
                let have = v.counts[district as usize] as f64;
                (minimum as f64 - have) / minimum as f64
            }
            Rule::MinorityShare { min } => {
                let share = v.minority as f64 / v.size.max(1) as f64;
                (min - share) / min.max(f64::MIN_POSITIVE)
            }
            Rule::GiniMax { max } => {
                if v.size == 0 {
                    0.0
                } else {
                    gini_unchecked(&v.counts) - max
                }
            }
            _ => {
                let hit = v
                    .action
                    .iter()
                    .any(|id| self.parcel_violations[id.index()].contains(&(c.id as u16)));
                if hit {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn check(
        &self,
        city: &CityInstance,
        state: &PortfolioState,
        action: &[ParcelId],
        mode: CheckMode,
    ) -> Result<ComplianceReport> {
        let v = self.view(city, state, action)?;
        let mut report = ComplianceReport {
            feasible: true,
            first_violation: None,
            violations: Vec::new(),
            checked_count: 0,
        };
        for c in &self.constraints {
            report.checked_count += 1;
            let m = self.violation(c, &v);
            if m > 0.0 {
                report.feasible = false;
                report.first_violation.get_or_insert(c.id);
                match mode {
                    CheckMode::EarlyStop => break,
                    CheckMode::Full => report.violations.push((c.id, m)),
                }
            }
        }
        Ok(report)
    }

    pub fn is_feasible(&self, city: &CityInstance, state: &PortfolioState, action: &[ParcelId]) -> Result<bool> {
        Ok(self.check(city, state, action, CheckMode::EarlyStop)?.feasible)
    }

    /// Whole-portfolio compliance: every rule, per-parcel ones included.
    pub fn portfolio_feasible(&self, city: &CityInstance, ids: &[ParcelId]) -> Result<bool> {
        self.is_feasible(city, &PortfolioState::empty(city), ids)
    }

    /// Σ_j max(0, c_j)², with budget excess in budget units.
    pub fn penalty(&self, city: &CityInstance, state: &PortfolioState, action: &[ParcelId]) -> Result<f64> {
        let v = self.view(city, state, action)?;
        Ok(self
            .constraints
            .iter()
            .map(|c| self.violation(c, &v).max(0.0).powi(2))
            .sum())
    }

    /// `penalty(state, [c])` for every parcel `c`, in one pass. Already
    /// selected parcels get 0.
    pub fn candidate_penalties(&self, city: &CityInstance, state: &PortfolioState) -> Result<Vec<f64>> {
        let size = state.selected.len() + 1;
        if size > self.capacity {
            return Err(invalid(format!("portfolio already holds {} sites", state.selected.len())));
        }
        if city.n() != self.parcel_violations.len() {
            return Err(invalid("registry was built for a different city"));
        }
        let terminal = size == self.capacity;
        let spent: f64 = state.selected.iter().map(|id| city.parcels[id.index()].appraised_cost()).sum();
        let budget_on = self
            .constraints
            .iter()
            .any(|c| c.enabled && c.rule == Rule::Budget);

        // Terminal rules depend on the candidate only through its class.
        let mut class_pen = vec![[0.0f64; 2]; self.districts];
        if terminal {
            for (d, pens) in class_pen.iter_mut().enumerate() {
                for (m, pen) in pens.iter_mut().enumerate() {
                    let mut counts = state.district_counts.clone();
                    counts[d] += 1;
                    let v = View {
                        action: &[],
                        cost: 0.0,
                        counts,
                        minority: state.minority_count + m as u32,
                        size,
                        terminal,
                    };
                    *pen = self
                        .constraints
                        .iter()
                        .filter(|c| c.terminal_only())
                        .map(|c| self.violation(c, &v).max(0.0).powi(2))
                        .sum();
                }
            }
        }

        let mut taken = vec![false; city.n()];
        for id in &state.selected {
            taken[id.index()] = true;
        }
        Ok(city
            .parcels
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if taken[i] {
                    return 0.0;
                }
                let budget = if budget_on {
                    ((spent + p.appraised_cost() - self.budget) / self.budget).max(0.0).powi(2)
                } else {
                    0.0
                };
                let per_parcel = self.parcel_violations[i]
                    .iter()
                    .filter(|&&j| self.constraints[j as usize].enabled)
                    .count() as f64;
                budget + per_parcel + class_pen[p.district_id as usize][p.demographics.minority_tract as usize]
            })
            .collect())
    }

    /// Minimal greedy repair.
    ///
    /// 1. Up to 2K best-improvement swaps (replace one action parcel with an
    ///    unused parcel, minimizing the penalty, ties broken by smallest cost
    ///    change).
    /// 2. If still infeasible, relax the violated soft constraints.
    /// 3. If still infeasible, drop parcels that violate hard per-parcel
    ///    constraints, then the most expensive parcels while over budget.
    pub fn repair(&self, city: &CityInstance, state: &PortfolioState, action: &[ParcelId]) -> Result<RepairOutcome> {
        let mut current = action.to_vec();
        if self.is_feasible(city, state, &current)? {
            return Ok(RepairOutcome::Repaired(Repair {
                action: current,
                swaps: vec![],
                removed: vec![],
                relaxed: vec![],
            }));
        }

        let mut swaps = Vec::new();
        let mut pen = self.penalty(city, state, &current)?;
        for _ in 0..2 * self.capacity {
            if pen == 0.0 {
                break;
            }
            match self.best_swap(city, state, &current, pen)? {
                Some((pos, incoming, new_pen)) => {
                    swaps.push((current[pos], incoming));
                    current[pos] = incoming;
                    pen = new_pen;
                }
                None => break,
            }
        }
        if pen == 0.0 {
            return Ok(RepairOutcome::Repaired(Repair {
                action: current,
                swaps,
                removed: vec![],
                relaxed: vec![],
            }));
        }

        let full = self.check(city, state, &current, CheckMode::Full)?;
        let relaxed: Vec<usize> = full
            .violations
            .iter()
            .map(|&(id, _)| id)
            .filter(|&id| self.constraints[id].severity == Severity::Soft)
            .collect();
        let reg = self.relaxed(&relaxed);
        if reg.is_feasible(city, state, &current)? {
            return Ok(RepairOutcome::Repaired(Repair {
                action: current,
                swaps,
                removed: vec![],
                relaxed,
            }));
        }

        let mut removed = Vec::new();
        current.retain(|&id| {
            let keep = reg.parcel_admissible(id);
            if !keep {
                removed.push(id);
            }
            keep
        });
        loop {
            if current.is_empty() {
                return Ok(RepairOutcome::Failed {
                    reason: "no compliant parcel remains".into(),
                });
            }
            if reg.is_feasible(city, state, &current)? {
                return Ok(RepairOutcome::Repaired(Repair {
                    action: current,
                    swaps,
                    removed,
                    relaxed,
                }));
            }
            // Remaining violations are portfolio-level; shed the priciest site.
            let (pos, _) = current
                .iter()
                .enumerate()
                .map(|(i, &id)| (i, city.parcels[id.index()].appraised_cost()))
                .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
            removed.push(current.remove(pos));
        }
    }

    fn best_swap(
        &self,
        city: &CityInstance,
        state: &PortfolioState,
        current: &[ParcelId],
        pen: f64,
    ) -> Result<Option<(usize, ParcelId, f64)>> {
        let offending: Vec<usize> = (0..current.len())
            .filter(|&i| !self.parcel_admissible(current[i]))
            .collect();
        let outgoing: Vec<usize> = if offending.is_empty() {
            (0..current.len()).collect()
        } else {
            offending
        };
        let in_use: HashSet<ParcelId> = current.iter().chain(&state.selected).copied().collect();
        let mut trial = current.to_vec();
        let mut best: Option<(usize, ParcelId, f64, f64)> = None;
        for &pos in &outgoing {
            let out_cost = city.parcels[current[pos].index()].appraised_cost();
            for p in &city.parcels {
                if in_use.contains(&p.id) || !self.parcel_admissible(p.id) {
                    continue;
                }
                trial[pos] = p.id;
                let new_pen = self.penalty(city, state, &trial)?;
                let dc = (p.appraised_cost() - out_cost).abs();
                let better = match best {
                    None => true,
                    Some((_, _, bp, bdc)) => new_pen < bp || (new_pen == bp && dc < bdc),
                };
                if better {
                    best = Some((pos, p.id, new_pen, dc));
                }
            }
            trial[pos] = current[pos];
        }
        Ok(best.filter(|b| b.2 < pen).map(|(pos, id, p, _)| (pos, id, p)))
    }

    /// Human-readable audit table.
    pub fn dump_table(&self) -> String {
        let mut out = format!("{:>3}  {:<24} {:<8} {:<10} description\n", "id", "category", "severity", "scope");
        for c in &self.constraints {
            out.push_str(&format!(
                "{:>3}  {:<24} {:<8} {:<10} {}\n",
                c.id,
                format!("{:?}", c.category),
                format!("{:?}", c.severity),
                format!("{:?}", c.scope),
                c.description()
            ));
        }
        out
    }

    /// Enabled end-of-episode requirements, for reachability planning.
    pub fn terminal_requirements(&self) -> TerminalRequirements {
        let mut req = TerminalRequirements {
            district_min: vec![0; self.districts],
            minority_share: None,
            gini_max: None,
        };
        for c in self.constraints.iter().filter(|c| c.enabled) {
            match c.rule {
                Rule::DistrictMinimum { district, minimum } => req.district_min[district as usize] = minimum,
                Rule::MinorityShare { min } => req.minority_share = Some(min),
                Rule::GiniMax { max } => req.gini_max = Some(max),
                _ => {}
            }
        }
        req
    }

    pub fn district_count(&self) -> usize {
        self.districts
    }
}

impl fmt::Display for ConstraintRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump_table())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::citygen::{generate_city, CityGenSpec};
    use proptest::prelude::*;
    use rand::seq::index::sample;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn city(n: usize, seed: u64) -> CityInstance {
        generate_city(&CityGenSpec::desk(n, seed)).unwrap()
    }

    fn admissible_ids(reg: &ConstraintRegistry, c: &CityInstance) -> Vec<ParcelId> {
        c.parcels.iter().map(|p| p.id).filter(|&id| reg.parcel_admissible(id)).collect()
    }

    #[test]
    fn registry_has_exactly_127_contiguous_ids() {
        let nyc = generate_city(&CityGenSpec {
            n_parcels: 300,
            ..CityGenSpec::preset("nyc", 1).unwrap()
        })
        .unwrap();
        let reg = ConstraintRegistry::build(&nyc, &RegistryPolicy::default()).unwrap();
        assert_eq!(reg.len(), REGISTRY_SIZE);
        assert!(reg.constraints().iter().enumerate().all(|(i, c)| c.id == i));
        let no_fair = ConstraintRegistry::build(
            &nyc,
            &RegistryPolicy {
                fairness: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(no_fair.len(), REGISTRY_SIZE);
        assert!(no_fair.enabled_soft().is_empty());
    }

    #[test]
    fn too_many_districts_is_a_config_error() {
        let mut c = city(200, 1);
        c.districts = 120;
        assert!(matches!(
            ConstraintRegistry::build(&c, &RegistryPolicy::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn over_budget_action_reports_budget_first() {
        let c = city(200, 2);
        let reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
        let mut ids: Vec<ParcelId> = c.parcels.iter().map(|p| p.id).collect();
        ids.sort_by(|a, b| c.parcels[b.index()].base_cost().total_cmp(&c.parcels[a.index()].base_cost()));
        let state = PortfolioState::empty(&c);
        let r = reg.check(&c, &state, &ids[..4], CheckMode::EarlyStop).unwrap();
        assert!(!r.feasible);
        assert_eq!(r.first_violation, Some(0));
        assert_eq!(r.checked_count, 1);
    }

    #[test]
    fn empty_action_at_start_is_feasible() {
        let c = city(50, 3);
        let reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
        let r = reg.check(&c, &PortfolioState::empty(&c), &[], CheckMode::Full).unwrap();
        assert!(r.feasible && r.violations.is_empty() && r.first_violation.is_none());
    }

    #[test]
    fn unknown_parcel_is_invalid_argument() {
        let c = city(50, 3);
        let reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
        let err = reg.check(&c, &PortfolioState::empty(&c), &[ParcelId(999)], CheckMode::Full);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn flood_rule_silent_without_flood_parcels() {
        let mut c = city(60, 4);
        for p in &mut c.parcels {
            p.geo[crate::domain::geo::FLOOD_ZONE_100YR] = 0.0;
        }
        let reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
        let flood_id = 1 + c.districts as usize;
        assert_eq!(reg.get(flood_id).unwrap().rule, Rule::NoUnmitigatedFlood);
        for p in &c.parcels {
            let r = reg.check(&c, &PortfolioState::empty(&c), &[p.id], CheckMode::Full).unwrap();
            assert!(r.violations.iter().all(|(id, _)| *id != flood_id));
        }
    }

    #[test]
    fn budget_penalty_is_squared_normalized_excess() {
        let mut c = city(30, 5);
        let cost = c.parcels[0].base_cost() * c.parcels[0].price_multiplier();
        c.budget_total = cost / 1.5; // excess of 0.5 budget units
        let mut reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
        for con in &mut reg.constraints[1..] {
            con.enabled = false;
        }
        let pen = reg.penalty(&c, &PortfolioState::empty(&c), &[ParcelId(0)]).unwrap();
        assert!((pen - 0.25).abs() < 1e-12, "{pen}");
    }

    #[test]
    fn two_violations_add() {
        let c = city(200, 6);
        let reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
        let bad: Vec<ParcelId> = c
            .parcels
            .iter()
            .filter(|p| p.zone() == Some(0))
            .map(|p| p.id)
            .take(1)
            .collect();
        let flood: Vec<ParcelId> = c
            .parcels
            .iter()
            .filter(|p| p.flood_zone() && !p.reg.get(regbit::FLOOD_MITIGATION) && p.zone() != Some(0))
            .map(|p| p.id)
            .take(1)
            .collect();
        let action: Vec<ParcelId> = bad.into_iter().chain(flood).collect();
        assert_eq!(action.len(), 2);
        let st = PortfolioState::empty(&c);
        let full = reg.check(&c, &st, &action, CheckMode::Full).unwrap();
        let oracle: f64 = full.violations.iter().map(|(_, m)| m * m).sum();
        assert!(full.violations.len() >= 2);
        assert_eq!(reg.penalty(&c, &st, &action).unwrap(), oracle);
    }

    #[test]
    fn feasible_action_is_returned_unchanged() {
        let c = city(200, 7);
        let reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
        let id = admissible_ids(&reg, &c)[0];
        let out = reg.repair(&c, &PortfolioState::empty(&c), &[id]).unwrap();
        assert_eq!(
            out,
            RepairOutcome::Repaired(Repair {
                action: vec![id],
                swaps: vec![],
                removed: vec![],
                relaxed: vec![]
            })
        );
    }

    #[test]
    fn single_flood_parcel_is_swapped_for_best_substitute() {
        let c = city(200, 8);
        let reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
        let st = PortfolioState::empty(&c);
        let good = admissible_ids(&reg, &c);
        let flood = c
            .parcels
            .iter()
            .find(|p| p.flood_zone() && !p.reg.get(regbit::FLOOD_MITIGATION))
            .unwrap()
            .id;
        let action = vec![good[0], good[1], flood];
        assert!(!reg.is_feasible(&c, &st, &action).unwrap());

        // Exhaustive single-swap oracle over the flood position.
        let fc = st.effective_cost(&c, flood);
        let mut best: Option<(f64, ParcelId)> = None;
        for p in &c.parcels {
            if action.contains(&p.id) {
                continue;
            }
            let trial = vec![good[0], good[1], p.id];
            if reg.is_feasible(&c, &st, &trial).unwrap() {
                let dc = (st.effective_cost(&c, p.id) - fc).abs();
                if best.is_none_or(|(b, _)| dc < b) {
                    best = Some((dc, p.id));
                }
            }
        }
        let (_, expect) = best.unwrap();
        match reg.repair(&c, &st, &action).unwrap() {
            RepairOutcome::Repaired(r) => {
                assert_eq!(r.swaps, vec![(flood, expect)]);
                assert_eq!(r.action, vec![good[0], good[1], expect]);
                assert!(r.relaxed.is_empty() && r.removed.is_empty());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn repair_fails_when_every_parcel_is_non_compliant() {
        let mut c = city(40, 9);
        for p in &mut c.parcels {
            p.reg.set(regbit::REQUIREMENT_BASE, false);
        }
        let reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
        let out = reg.repair(&c, &PortfolioState::empty(&c), &[ParcelId(0), ParcelId(1)]).unwrap();
        assert!(matches!(out, RepairOutcome::Failed { .. }));
    }

    #[test]
    fn soft_constraints_relax_before_hard_removal() {
        let mut c = city(60, 10);
        for p in &mut c.parcels {
            p.demographics.minority_tract = false;
        }
        let reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
        let st = PortfolioState::empty(&c);
        // K admissible parcels spread over districts and within budget.
        let mut pick = Vec::new();
        let mut ids = admissible_ids(&reg, &c);
        ids.sort_by(|a, b| st.effective_cost(&c, *a).total_cmp(&st.effective_cost(&c, *b)));
        for d in 0..c.districts {
            pick.extend(ids.iter().filter(|id| c.parcels[id.index()].district_id == d).take(1));
        }
        for id in &ids {
            if pick.len() == c.portfolio_capacity {
                break;
            }
            if !pick.contains(id) {
                pick.push(*id);
            }
        }
        match reg.repair(&c, &st, &pick).unwrap() {
            RepairOutcome::Repaired(r) => {
                assert!(r.removed.is_empty());
                let share_id = reg
                    .constraints()
                    .iter()
                    .find(|c| matches!(c.rule, Rule::MinorityShare { .. }))
                    .unwrap()
                    .id;
                assert!(r.relaxed.contains(&share_id));
                assert!(reg.relaxed(&r.relaxed).is_feasible(&c, &st, &r.action).unwrap());
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn early_stop_agrees_with_full_on_random_actions() {
        let c = city(200, 11);
        let reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
        let st = PortfolioState::empty(&c);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 0..1000 {
            let k = 1 + t % c.portfolio_capacity;
            let action: Vec<ParcelId> = sample(&mut rng, c.n(), k)
                .into_iter()
                .map(|i| ParcelId(i as u32))
                .collect();
            let a = reg.check(&c, &st, &action, CheckMode::EarlyStop).unwrap();
            let b = reg.check(&c, &st, &action, CheckMode::Full).unwrap();
            assert_eq!(a.feasible, b.feasible);
            assert_eq!(a.first_violation, b.first_violation);
        }
    }

    #[test]
    fn candidate_penalties_match_single_parcel_penalty() {
        let c = city(150, 4);
        let reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for prefix in 0..c.portfolio_capacity {
            let ids: Vec<ParcelId> = sample(&mut rng, c.n(), prefix)
                .into_iter()
                .map(|i| ParcelId(i as u32))
                .collect();
            let st = PortfolioState::from_selection(&c, &ids).unwrap();
            let fast = reg.candidate_penalties(&c, &st).unwrap();
            for p in &c.parcels {
                if st.contains(p.id) {
                    assert_eq!(fast[p.id.index()], 0.0);
                    continue;
                }
                let slow = reg.penalty(&c, &st, &[p.id]).unwrap();
                assert!((fast[p.id.index()] - slow).abs() < 1e-12, "{prefix} {}", p.id);
            }
        }
        let full = PortfolioState::from_selection(&c, &(0..5).map(ParcelId).collect::<Vec<_>>()).unwrap();
        assert!(reg.candidate_penalties(&c, &full).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn penalty_zero_iff_feasible_and_repair_is_compliant(
            seed in 0u64..6,
            picks in proptest::collection::vec(0usize..120, 1..6),
            prefix in 0usize..3,
        ) {
            let c = city(120, seed);
            let reg = ConstraintRegistry::build(&c, &RegistryPolicy::default()).unwrap();
            let mut ids: Vec<ParcelId> = Vec::new();
            for i in picks {
                let id = ParcelId(i as u32);
                if !ids.contains(&id) {
                    ids.push(id);
                }
            }
            let split = prefix.min(ids.len().saturating_sub(1));
            let st = PortfolioState::from_selection(&c, &ids[..split]).unwrap();
            let action = &ids[split..];
            let rep = reg.check(&c, &st, action, CheckMode::Full).unwrap();
            let pen = reg.penalty(&c, &st, action).unwrap();
            prop_assert_eq!(pen == 0.0, rep.feasible);
            prop_assert_eq!(rep.feasible, rep.violations.is_empty());
            prop_assert_eq!(rep.feasible, rep.first_violation.is_none());
            if let RepairOutcome::Repaired(r) = reg.repair(&c, &st, action).unwrap() {
                prop_assert!(!r.action.is_empty());
                prop_assert!(reg.relaxed(&r.relaxed).is_feasible(&c, &st, &r.action).unwrap());
            }
        }
    }
}
