//! Preference exploration over a trained archive: re-optimization queries,
//! parcel summaries and templated explanations.

use web_time::Instant;

use serde::{Deserialize, Serialize};

use crate::constraints::{CheckMode, ComplianceReport, ConstraintRegistry, RepairOutcome};
use crate::domain::{normalize, CityInstance, ObjectiveVector, ParcelId, PortfolioState, PreferenceVector};
use crate::error::{invalid, Error, Result};
use crate::policy::{FACTOR_GROUPS, FACTOR_NAMES};
use crate::ppo::{ArchiveRecord, ParetoArchive};
use crate::reward::{evaluate_portfolio, RewardParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SoftToggle {
    pub id: usize,
    pub enabled: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReoptimizeRequest {
    /// Nonnegative preference weights; normalized here.
    pub lambda: [f64; 4],
    #[serde(default)]
    pub soft_constraints: Vec<SoftToggle>,
    /// Tighter total appraised budget in USD.
    #[serde(default)]
    pub budget_override: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParcelSummary {
    pub id: ParcelId,
    pub district: u32,
    pub x_km: f64,
    pub y_km: f64,
    pub walk_score: f64,
    pub job_proximity: f64,
    pub green_space: f64,
    pub appraised_cost: f64,
    pub qct: bool,
    pub minority_tract: bool,
    pub flood_zone: bool,
    pub zone: Option<usize>,
}

impl ParcelSummary {
    pub fn of(city: &CityInstance, id: ParcelId) -> Result<Self> {
        let p = city
            .parcel(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parcel {id}")))?;
        let (x_km, y_km) = p.coordinates();
        Ok(Self {
            id,
            district: p.district_id,
            x_km,
            y_km,
            walk_score: p.walk_score(),
            job_proximity: p.job_proximity(),
            green_space: p.green_space(),
            appraised_cost: p.appraised_cost(),
            qct: p.is_qct(),
            minority_tract: p.demographics.minority_tract,
            flood_zone: p.flood_zone(),
            zone: p.zone(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorLine {
    pub group: String,
    /// Attention share in percent; the groups of one parcel sum to 100.
    pub weight_pct: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParcelExplanation {
    pub parcel: ParcelId,
    pub headline: String,
    pub factors: Vec<FactorLine>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    /// Archive record served; `None` for a live-repaired portfolio.
    pub record: Option<usize>,
    pub portfolio: Vec<ParcelSummary>,
    pub objectives: ObjectiveVector,
    pub normalized: ObjectiveVector,
    pub preference: PreferenceVector,
    pub score: f64,
    /// Hard-rule compliance of the served portfolio (always feasible).
    pub compliance: ComplianceReport,
    /// True when no record met the requested soft constraints and budget.
    pub soft_relaxed: bool,
    /// Requested soft constraints the served portfolio violates.
    pub soft_violations: Vec<usize>,
    pub explanation: Vec<ParcelExplanation>,
    pub latency_ms: f64,
}

/// Percentages of nonnegative weights summing to 100 (uniform when all zero).
pub fn attention_percentages(w: &[f64; FACTOR_GROUPS]) -> [f64; FACTOR_GROUPS] {
    let total: f64 = w.iter().map(|v| v.max(0.0)).sum();
    if !(total > 0.0 && total.is_finite()) {
        return [100.0 / FACTOR_GROUPS as f64; FACTOR_GROUPS];
    }
    w.map(|v| 100.0 * v.max(0.0) / total)
}

/// Integer percentages by largest remainder, so the rendered values add up to 100.
fn rounded_percentages(pct: &[f64; FACTOR_GROUPS]) -> [u32; FACTOR_GROUPS] {
    let mut out = pct.map(|p| p.floor() as u32);
    let short = 100 - out.iter().sum::<u32>().min(100);
    let mut order: Vec<usize> = (0..FACTOR_GROUPS).collect();
    order.sort_by(|&a, &b| (pct[b] - pct[b].floor()).total_cmp(&(pct[a] - pct[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().take(short as usize) {
        out[i] += 1;
    }
    out
}

fn money(v: f64) -> String {
    if v >= 1e6 {
        format!("${:.2}M", v / 1e6)
    } else {
        format!("${:.0}K", v / 1e3)
    }
}

/// Deterministic per-parcel explanation from attention over the factor groups.
pub fn explain_parcel(city: &CityInstance, id: ParcelId, attention: &[f64; FACTOR_GROUPS]) -> Result<ParcelExplanation> {
    let p = city
        .parcel(id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown parcel {id}")))?;
    let n = city.n() as f64;
    let mean_walk = city.parcels.iter().map(|q| q.walk_score()).sum::<f64>() / n;
    let mean_cost = city.parcels.iter().map(|q| q.appraised_cost()).sum::<f64>() / n;
    let pct = attention_percentages(attention);
    let shown = rounded_percentages(&pct);

    let regulatory = if p.is_qct() {
        "Qualified Census Tract: eligible for the tax-credit basis boost".to_string()
    } else {
        "Passes every parcel-level zoning and permitting rule".to_string()
    };
    let delta = 100.0 * (p.appraised_cost() - mean_cost) / mean_cost;
    let texts = [
        regulatory,
        format!("Walk score {:.0} (city mean {:.0})", p.walk_score(), mean_walk),
        format!(
            "Appraised cost {} ({:.0}% {} city mean)",
            money(p.appraised_cost()),
            delta.abs(),
            if delta <= 0.0 { "below" } else { "above" }
        ),
        if p.flood_zone() {
            format!("Green space {:.0}%; mitigated 100-year flood zone", 100.0 * p.green_space())
        } else {
            format!("Green space {:.0}%; outside the 100-year flood zone", 100.0 * p.green_space())
        },
    ];
    let factors = (0..FACTOR_GROUPS)
        .map(|g| FactorLine {
            group: FACTOR_NAMES[g].to_string(),
            weight_pct: pct[g],
            text: texts[g].clone(),
        })
        .collect();
    let parts: Vec<String> = (0..FACTOR_GROUPS)
        .map(|g| format!("{} {}%", FACTOR_NAMES[g], shown[g]))
        .collect();
    Ok(ParcelExplanation {
        parcel: id,
        headline: format!("Parcel {id} (district {}): {}", p.district_id, parts.join(", ")),
        factors,
    })
}

/// Explanations for every parcel of a record; missing attention rows count as uniform.
pub fn explain_record(city: &CityInstance, rec: &ArchiveRecord) -> Result<Vec<ParcelExplanation>> {
    let uniform = [1.0; FACTOR_GROUPS];
    rec.portfolio
        .iter()
        .enumerate()
        .map(|(i, &id)| explain_parcel(city, id, rec.attention.get(i).unwrap_or(&uniform)))
        .collect()
}

/// Immutable snapshot answering exploration queries.
pub struct Explorer {
    pub city: CityInstance,
    pub registry: ConstraintRegistry,
    pub archive: ParetoArchive,
    pub params: RewardParams,
    /// Try greedy swaps when no record meets the request.
    pub live: bool,
    hard_only: ConstraintRegistry,
}

impl Explorer {
    pub fn new(city: CityInstance, registry: ConstraintRegistry, archive: ParetoArchive, params: RewardParams) -> Self {
        let hard_only = registry.relaxed(&registry.enabled_soft());
        Self {
            city,
            registry,
            archive,
            params,
            live: false,
            hard_only,
        }
    }

    pub fn parcels(&self, ids: &[ParcelId]) -> Result<Vec<ParcelSummary>> {
        ids.iter().map(|&id| ParcelSummary::of(&self.city, id)).collect()
    }

    pub fn explain(&self, record: usize) -> Result<Vec<ParcelExplanation>> {
        let rec = self
            .archive
            .get(record)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown record {record}")))?;
        explain_record(&self.city, rec)
    }

    fn appraised(&self, ids: &[ParcelId]) -> f64 {
        ids.iter().map(|id| self.city.parcels[id.index()].appraised_cost()).sum()
    }

    fn hard_report(&self, ids: &[ParcelId]) -> Result<ComplianceReport> {
        self.hard_only
            .check(&self.city, &PortfolioState::empty(&self.city), ids, CheckMode::Full)
    }

    fn soft_violations(&self, overlay: &ConstraintRegistry, ids: &[ParcelId]) -> Result<Vec<usize>> {
        let report = overlay.check(&self.city, &PortfolioState::empty(&self.city), ids, CheckMode::Full)?;
        let soft = overlay.enabled_soft();
        Ok(report.violations.iter().map(|v| v.0).filter(|id| soft.contains(id)).collect())
    }

    /// Best archive record for the request; see [`ReoptimizeRequest`].
    pub fn reoptimize(&self, req: &ReoptimizeRequest) -> Result<Recommendation> {
        let started = Instant::now();
        if req.lambda.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(invalid("lambda: components must be finite and nonnegative"));
        }
        let pref = PreferenceVector::normalized(req.lambda).map_err(|_| invalid("lambda: needs a positive component"))?;
        if let Some(b) = req.budget_override {
            if !(b > 0.0 && b <= self.city.budget_total) {
                return Err(invalid(format!(
                    "budget_override: must lie in (0, {}]",
                    self.city.budget_total
                )));
            }
        }
        let overlay: Vec<(usize, bool)> = req.soft_constraints.iter().map(|t| (t.id, t.enabled)).collect();
        let overlay = self
            .registry
            .with_soft_overlay(&overlay)
            .map_err(|e| invalid(format!("soft_constraints: {e}")))?;

        // Records that pass the hard rules, best score first (lowest id on ties).
        let mut ranked: Vec<(&ArchiveRecord, f64)> = Vec::new();
        for r in self.archive.records() {
            if self.hard_report(&r.portfolio)?.feasible {
                ranked.push((r, r.normalized.dot(&pref)));
            }
        }
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.id.cmp(&b.0.id)));
        if ranked.is_empty() {
            return Err(Error::Infeasible("archive holds no compliant record".into()));
        }
        let within_budget = |ids: &[ParcelId]| req.budget_override.is_none_or(|b| self.appraised(ids) <= b + 1e-9 * b);
        for (r, score) in &ranked {
            if within_budget(&r.portfolio) && self.soft_violations(&overlay, &r.portfolio)?.is_empty() {
                return self.recommend(Some(r), r.portfolio.clone(), pref, *score, false, Vec::new(), started);
            }
        }
        if self.live {
            if let Some(rec) = self.live_repair(&overlay, &ranked, pref, &within_budget, started)? {
                return Ok(rec);
            }
        }
        let (best, score) = ranked[0];
        let violations = self.soft_violations(&overlay, &best.portfolio)?;
        self.recommend(Some(best), best.portfolio.clone(), pref, score, true, violations, started)
    }

    fn live_repair(
        &self,
        overlay: &ConstraintRegistry,
        ranked: &[(&ArchiveRecord, f64)],
        pref: PreferenceVector,
        within_budget: &dyn Fn(&[ParcelId]) -> bool,
        started: Instant,
    ) -> Result<Option<Recommendation>> {
        let empty = PortfolioState::empty(&self.city);
        for (r, _) in ranked {
            if let RepairOutcome::Repaired(fix) = overlay.repair(&self.city, &empty, &r.portfolio)? {
                let ids = fix.action;
                if fix.relaxed.is_empty()
                    && within_budget(&ids)
                    && overlay.portfolio_feasible(&self.city, &ids)?
                    && self.hard_report(&ids)?.feasible
                {
                    let obj = evaluate_portfolio(&self.city, &self.params, &ids)?;
                    let score = normalize(&obj, &self.city.objective_bounds)?.dot(&pref);
                    return Ok(Some(self.recommend(None, ids, pref, score, false, Vec::new(), started)?));
                }
            }
        }
        Ok(None)
    }

    #[allow(clippy::too_many_arguments)]
    fn recommend(
        &self,
        record: Option<&ArchiveRecord>,
        ids: Vec<ParcelId>,
        pref: PreferenceVector,
        score: f64,
        soft_relaxed: bool,
        soft_violations: Vec<usize>,
        started: Instant,
    ) -> Result<Recommendation> {
        let (objectives, normalized, explanation) = match record {
            Some(r) => (r.objectives, r.normalized, explain_record(&self.city, r)?),
            None => {
                let obj = evaluate_portfolio(&self.city, &self.params, &ids)?;
                let uniform = [1.0; FACTOR_GROUPS];
                let expl = ids
                    .iter()
                    .map(|&id| explain_parcel(&self.city, id, &uniform))
                    .collect::<Result<Vec<_>>>()?;
                (obj, normalize(&obj, &self.city.objective_bounds)?, expl)
            }
        };
        Ok(Recommendation {
            record: record.map(|r| r.id),
            portfolio: self.parcels(&ids)?,
            compliance: self.hard_report(&ids)?,
            objectives,
            normalized,
            preference: pref,
            score,
            soft_relaxed,
            soft_violations,
            explanation,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}
