//! In-browser demo over the core crate. Every method returns a JSON string so
//! the page needs nothing beyond `JSON.parse`.

use serde::Serialize;
use siting_core::baselines::{greedy_cost_beam, nsga2, random_feasible, Nsga2Config};
use siting_core::citygen::{generate_city, summarize, CityGenSpec};
use siting_core::constraints::{ConstraintRegistry, RegistryPolicy};
use siting_core::domain::PreferenceVector;
use siting_core::explore::{Explorer, ReoptimizeRequest};
use siting_core::ppo::{ArchiveRecord, ParetoArchive};
use siting_core::reward::{evaluate_portfolio, RewardParams};
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct CityView {
    name: String,
    parcels: usize,
    districts: u32,
    capacity: usize,
    budget: f64,
    qct_fraction: f64,
    flood_fraction: f64,
    /// x, y, district, flood (0/1) per parcel.
    points: Vec<(f64, f64, u32, u8)>,
}

#[derive(Serialize)]
struct SearchView {
    method: String,
    evaluated: usize,
    front: usize,
    hypervolume: f64,
    rcr: f64,
    seconds: f64,
    /// Normalized objectives of every archived portfolio.
    archive: Vec<[f64; 4]>,
}

/// One demo session: a city plus the archive accumulated by searches.
#[wasm_bindgen]
pub struct Demo {
    explorer: Explorer,
}

fn js(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
impl Demo {
    /// Generate a three-district desk city with `parcels` parcels.
    #[wasm_bindgen(constructor)]
    pub fn new(parcels: usize, seed: u64) -> Result<Demo, JsError> {
        Self::build(parcels, seed).map_err(js)
    }

    pub fn city(&self) -> String {
        let city = &self.explorer.city;
        let s = summarize(city);
        let view = CityView {
            name: city.name.clone(),
            parcels: city.n(),
            districts: city.districts,
            capacity: city.portfolio_capacity,
            budget: city.budget_total,
            qct_fraction: s.qct_fraction,
            flood_fraction: s.flood_fraction,
            points: city
                .parcels
                .iter()
                .map(|p| {
                    let (x, y) = p.coordinates();
                    (x, y, p.district_id, p.flood_zone() as u8)
                })
                .collect(),
        };
        serde_json::to_string(&view).expect("plain data serializes")
    }

    /// Run `random`, `beam` or `nsga2` and merge its compliant portfolios into the archive.
    pub fn search(&mut self, method: &str, seed: u64) -> Result<String, JsError> {
        self.run_search(method, seed).map_err(js)
    }

    /// Best archived portfolio for the weights, with explanations.
    pub fn recommend(&self, accessibility: f64, environment: f64, cost: f64, equity: f64) -> Result<String, JsError> {
        let req = ReoptimizeRequest {
            lambda: [accessibility, environment, cost, equity],
            soft_constraints: vec![],
            budget_override: None,
        };
        let rec = self.explorer.reoptimize(&req).map_err(js)?;
        serde_json::to_string(&rec).map_err(js)
    }
}

impl Demo {
    fn build(parcels: usize, seed: u64) -> siting_core::Result<Demo> {
        let city = generate_city(&CityGenSpec::desk(parcels, seed))?;
        let registry = ConstraintRegistry::build(&city, &RegistryPolicy::default())?;
        Ok(Demo {
            explorer: Explorer::new(city, registry, ParetoArchive::new(), RewardParams::default()),
        })
    }

    fn run_search(&mut self, method: &str, seed: u64) -> siting_core::Result<String> {
        let ex = &mut self.explorer;
        let result = match method {
            "random" => random_feasible(&ex.city, &ex.registry, &ex.params, 300, seed)?,
            "beam" => greedy_cost_beam(&ex.city, &ex.registry, &ex.params, 16)?,
            "nsga2" => {
                let cfg = Nsga2Config { generations: 40, ..Nsga2Config::desk(seed) };
                nsga2(&ex.city, &ex.registry, &ex.params, &cfg)?
            }
            other => {
                return Err(siting_core::Error::InvalidArgument(format!(
                    "method: unknown `{other}` (random, beam, nsga2)"
                )))
            }
        };
        for &i in &result.feasible_front() {
            let portfolio = result.portfolios[i].clone();
            let objectives = evaluate_portfolio(&ex.city, &ex.params, &portfolio)?;
            let rec = ArchiveRecord::new(&ex.city, objectives, portfolio, PreferenceVector::uniform(), 0, 0, vec![])?;
            ex.archive.insert(rec)?;
        }
        let view = SearchView {
            method: result.method.clone(),
            evaluated: result.portfolios.len(),
            front: result.feasible_front().len(),
            hypervolume: ex.archive.hypervolume()?,
            rcr: result.rcr,
            seconds: result.wall_time_s,
            archive: ex.archive.normalized_points(),
        };
        Ok(serde_json::to_string(&view).expect("plain data serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn search_then_recommend() {
        let mut d = Demo::build(60, 3).unwrap();
        let city: serde_json::Value = serde_json::from_str(&d.city()).unwrap();
        assert_eq!(city["points"].as_array().unwrap().len(), 60);
        let s: serde_json::Value = serde_json::from_str(&d.run_search("random", 1).unwrap()).unwrap();
        assert!(s["hypervolume"].as_f64().unwrap() > 0.0);
        let n = s["archive"].as_array().unwrap().len();
        let s: serde_json::Value = serde_json::from_str(&d.run_search("nsga2", 1).unwrap()).unwrap();
        assert!(!s["archive"].as_array().unwrap().is_empty() && n >= 1);
        let req = ReoptimizeRequest { lambda: [1.0, 0.0, 0.0, 0.0], soft_constraints: vec![], budget_override: None };
        let r = d.explorer.reoptimize(&req).unwrap();
        assert!(r.compliance.feasible);
        assert!(d.run_search("annealing", 1).is_err());
    }
}
