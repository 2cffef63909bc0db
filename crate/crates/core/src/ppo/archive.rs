use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::domain::{dominates_slice, nondominated_indices, normalize, CityInstance, ObjectiveVector, ParcelId, PreferenceVector};
use crate::error::{invalid, Error, Result};
use crate::metrics::{hypervolume_exact, Point};
use crate::policy::FACTOR_GROUPS;

/// Indices of the vectors no other vector dominates, in input order;
/// duplicates are all kept.
pub fn nondominated_filter(points: &[ObjectiveVector]) -> Vec<usize> {
    let arr: Vec<Point> = points.iter().map(|p| p.to_array()).collect();
    nondominated_indices(&arr)
}

/// One evaluated portfolio in the archive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveRecord {
    pub id: usize,
    pub objectives: ObjectiveVector,
    pub normalized: ObjectiveVector,
    pub portfolio: Vec<ParcelId>,
    pub preference: PreferenceVector,
    pub policy: usize,
    pub epoch: usize,
    /// Encoder attention over the factor groups, one row per portfolio parcel.
    #[serde(default)]
    pub attention: Vec<[f64; FACTOR_GROUPS]>,
}

impl ArchiveRecord {
    /// Record with normalized objectives filled in; the id is assigned on insertion.
    pub fn new(
        city: &CityInstance,
        objectives: ObjectiveVector,
        portfolio: Vec<ParcelId>,
        preference: PreferenceVector,
        policy: usize,
        epoch: usize,
        attention: Vec<[f64; FACTOR_GROUPS]>,
    ) -> Result<Self> {
        Ok(Self {
            id: 0,
            normalized: normalize(&objectives, &city.objective_bounds)?,
            objectives,
            portfolio,
            preference,
            policy,
            epoch,
            attention,
        })
    }
}

/// Mutually non-dominated records. An incoming record equal to a stored one
/// is dropped (first inserted wins).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive {
    records: Vec<ArchiveRecord>,
    next_id: usize,
}

impl ParetoArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[ArchiveRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ArchiveRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Insert unless dominated or duplicated; evicts what the record dominates.
    pub fn insert(&mut self, mut rec: ArchiveRecord) -> Result<bool> {
        if !rec.objectives.is_finite() {
            return Err(invalid("archive record with non-finite objectives"));
        }
        let new = rec.objectives.to_array();
        if self.records.iter().any(|r| {
            let old = r.objectives.to_array();
            old == new || dominates_slice(&old, &new)
        }) {
            return Ok(false);
        }
        self.records.retain(|r| !dominates_slice(&new, &r.objectives.to_array()));
        rec.id = self.next_id;
        self.next_id += 1;
        self.records.push(rec);
        Ok(true)
    }

    /// Insert in the given order; returns how many records were accepted.
    pub fn merge(&mut self, candidates: impl IntoIterator<Item = ArchiveRecord>) -> Result<usize> {
        let mut added = 0;
        for c in candidates {
            added += self.insert(c)? as usize;
        }
        Ok(added)
    }

    pub fn normalized_points(&self) -> Vec<Point> {
        self.records.iter().map(|r| r.normalized.to_array()).collect()
    }

    pub fn hypervolume(&self) -> Result<f64> {
        hypervolume_exact(&self.normalized_points())
    }

    /// True when no record dominates another.
    pub fn is_mutually_nondominated(&self) -> bool {
        let pts: Vec<Point> = self.records.iter().map(|r| r.objectives.to_array()).collect();
        nondominated_indices(&pts).len() == pts.len()
    }

    /// One JSON record per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        let mut records: Vec<ArchiveRecord> = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Self::from_records(records)
    }

    /// Archive from stored records, which must have unique ids and be
    /// mutually non-dominated.
    pub fn from_records(records: Vec<ArchiveRecord>) -> Result<Self> {
        let mut ids: Vec<usize> = records.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("duplicate archive record id"));
        }
        let archive = Self {
            next_id: ids.last().map_or(0, |m| m + 1),
            records,
        };
        if !archive.is_mutually_nondominated() {
            return Err(invalid("archive records dominate each other"));
        }
        Ok(archive)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(v: [f64; 4]) -> ArchiveRecord {
        let o = ObjectiveVector::from_array(v);
        ArchiveRecord {
            id: 0,
            objectives: o,
            normalized: o,
            portfolio: vec![ParcelId(0)],
            preference: PreferenceVector::uniform(),
            policy: 0,
            epoch: 0,
            attention: vec![],
        }
    }

    #[test]
    fn filter_examples() {
        let o = ObjectiveVector::from_array;
        assert_eq!(nondominated_filter(&[o([1.0; 4]), o([0.0; 4])]), vec![0]);
        assert_eq!(
            nondominated_filter(&[o([1.0, 0.0, 0.0, 0.0]), o([0.0, 1.0, 0.0, 0.0])]),
            vec![0, 1]
        );
    }

    #[test]
    fn insert_evicts_and_rejects() {
        let mut a = ParetoArchive::new();
        assert!(a.insert(rec([0.2, 0.2, 0.2, 0.2])).unwrap());
        assert!(!a.insert(rec([0.1, 0.2, 0.2, 0.2])).unwrap());
        assert!(!a.insert(rec([0.2, 0.2, 0.2, 0.2])).unwrap());
        assert!(a.insert(rec([0.9, 0.0, 0.0, 0.0])).unwrap());
        assert!(a.insert(rec([0.3, 0.3, 0.3, 0.3])).unwrap());
        assert_eq!(a.len(), 2);
        assert_eq!(a.records().iter().map(|r| r.id).collect::<Vec<_>>(), vec![1, 2]);
        assert!(a.get(0).is_none());
    }

    #[test]
    fn jsonl_round_trip() {
        let mut a = ParetoArchive::new();
        a.merge([rec([0.5, 0.1, 0.2, 0.3]), rec([0.1, 0.5, 0.2, 0.3])]).unwrap();
        let mut buf = Vec::new();
        a.write_jsonl(&mut buf).unwrap();
        let back = ParetoArchive::read_jsonl(&buf[..]).unwrap();
        assert_eq!(back, a);
        let bad = b"{\"id\":1}\n";
        assert!(matches!(ParetoArchive::read_jsonl(&bad[..]), Err(Error::Parse { line: 1, .. })));
    }

    proptest! {
        #[test]
        fn merges_keep_mutual_nondominance_and_monotone_hv(
            pts in proptest::collection::vec(proptest::array::uniform4(0.0f64..1.0), 1..60)
        ) {
            let mut a = ParetoArchive::new();
            let mut hv = 0.0;
            for chunk in pts.chunks(7) {
                a.merge(chunk.iter().map(|p| rec(*p))).unwrap();
                prop_assert!(a.is_mutually_nondominated());
                let now = a.hypervolume().unwrap();
                prop_assert!(now >= hv - 1e-12);
                hv = now;
            }
        }
    }
}
